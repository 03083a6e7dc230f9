//! Stereographic projection from `R^n` onto the unit sphere `S^n` in
//! `R^(n+1)`, projecting away from the north pole `e_(n+1)`.
//!
//! For `x` with squared norm `s = |x|^2` the image is
//!
//! ```text
//! phi(x) = ( 2 x_1 / (s + 1), ..., 2 x_n / (s + 1), (s - 1) / (s + 1) )
//! ```
//!
//! which equals `x + z (e_(n+1) - x)` with `z = (s - 1) / (s + 1)`. The
//! origin lands on the south pole, the unit shell stays fixed in its first
//! `n` coordinates, and the north pole itself is never reached.
//!
//! Besides the map this module carries its inverse and Jacobian, a tape
//! primitive for batched projection, and sampling checkers for the convexity
//! and hemisphere-chart facts about the sphere and ball.

use std::ops::Deref;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::ndcore::{CustomOp, Tape, Tensor, Var};

/// Cutoff below the north pole inside which [`inverse_project`] refuses to
/// divide by `1 - p_(n+1)`.
pub const POLE_EPSILON: f64 = 1e-9;

/// How far from unit norm an input to [`inverse_project`] may be.
pub const SPHERE_TOLERANCE: f64 = 1e-9;

/// Slack on `|v| <= 1` accepted by [`hemisphere_map`].
pub const DISK_TOLERANCE: f64 = 1e-12;

/// Radicands `1 - |v|^2` at or below this are treated as zero, so inputs on
/// the unit shell map to the equator for both hemispheres.
const SHELL_SNAP: f64 = 1e-13;

/// A finite point of `R^n`.
#[derive(Debug, Clone, PartialEq)]
pub struct EuclideanPoint(Vec<f64>);

impl EuclideanPoint {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if let Some(i) = coords.iter().position(|c| !c.is_finite()) {
            return Err(Error::domain(
                "euclidean point",
                format!("coordinate {i} is {}", coords[i]),
            ));
        }
        Ok(EuclideanPoint(coords))
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn squared_norm(&self) -> f64 {
        squared_norm(&self.0)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for EuclideanPoint {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// A point of `S^n` other than the north pole.
#[derive(Debug, Clone, PartialEq)]
pub struct SpherePoint(Vec<f64>);

impl SpherePoint {
    /// Validates unit norm (within [`SPHERE_TOLERANCE`]) and pole exclusion.
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        check_on_sphere(&coords)?;
        if is_north_pole(&coords) {
            return Err(Error::PoleSingularity {
                last: coords[coords.len() - 1],
            });
        }
        Ok(SpherePoint(coords))
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn last(&self) -> f64 {
        self.0[self.0.len() - 1]
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for SpherePoint {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

fn squared_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

fn is_north_pole(p: &[f64]) -> bool {
    let (last, head) = p.split_last().expect("sphere point has at least one coordinate");
    *last == 1.0 && head.iter().all(|&c| c == 0.0)
}

fn check_on_sphere(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::domain("sphere point", "no coordinates"));
    }
    let n2 = squared_norm(p);
    if !n2.is_finite() || (n2 - 1.0).abs() > SPHERE_TOLERANCE {
        return Err(Error::domain(
            "sphere point",
            format!("squared norm {n2} is not 1"),
        ));
    }
    Ok(())
}

/// `z = (|x|^2 - 1) / (|x|^2 + 1)`, the position along the line from `x` to
/// the north pole where the sphere is met. Lies in `[-1, 1)`.
pub fn scale_factor(x: &[f64]) -> Result<f64> {
    let s = checked_squared_norm(x)?;
    Ok((s - 1.0) / (s + 1.0))
}

fn checked_squared_norm(x: &[f64]) -> Result<f64> {
    if let Some(i) = x.iter().position(|c| !c.is_finite()) {
        return Err(Error::domain("project", format!("coordinate {i} is {}", x[i])));
    }
    let s = squared_norm(x);
    if !s.is_finite() {
        return Err(Error::domain("project", "squared norm overflows"));
    }
    Ok(s)
}

/// Writes `phi(x)` into `out`, which must have length `x.len() + 1`.
pub fn project_into(x: &[f64], out: &mut [f64]) -> Result<()> {
    debug_assert_eq!(out.len(), x.len() + 1);
    let s = checked_squared_norm(x)?;
    let denom = s + 1.0;
    for (o, &xi) in out.iter_mut().zip(x) {
        *o = 2.0 * xi / denom;
    }
    let last = (s - 1.0) / denom;
    if last >= 1.0 {
        return Err(Error::domain(
            "project",
            format!("|x|^2 = {s:e} is so large the image rounds to the north pole"),
        ));
    }
    out[x.len()] = last;
    Ok(())
}

/// Stereographic image of a single point.
pub fn project(x: &[f64]) -> Result<SpherePoint> {
    let mut out = vec![0.0; x.len() + 1];
    project_into(x, &mut out)?;
    Ok(SpherePoint(out))
}

/// Inverse map `x_i = p_i / (1 - p_(n+1))`.
pub fn inverse_project(p: &[f64]) -> Result<EuclideanPoint> {
    check_on_sphere(p)?;
    let (last, head) = p.split_last().expect("checked non-empty");
    if *last >= 1.0 - POLE_EPSILON {
        return Err(Error::PoleSingularity { last: *last });
    }
    let denom = 1.0 - last;
    Ok(EuclideanPoint(head.iter().map(|c| c / denom).collect()))
}

/// Jacobian of `phi` at `x`, shaped `(n+1) x n`.
pub fn jacobian(x: &[f64]) -> Result<Tensor> {
    let n = x.len();
    let s = checked_squared_norm(x)?;
    let d = s + 1.0;
    let d2 = d * d;
    let mut j = vec![0.0; (n + 1) * n];
    for i in 0..n {
        for k in 0..n {
            let diag = if i == k { 2.0 / d } else { 0.0 };
            j[i * n + k] = diag - 4.0 * x[i] * x[k] / d2;
        }
    }
    for k in 0..n {
        j[n * n + k] = 4.0 * x[k] / d2;
    }
    Tensor::new(vec![n + 1, n], j)
}

#[derive(Debug)]
struct StereoProjectOp;

impl CustomOp for StereoProjectOp {
    fn name(&self) -> &'static str {
        "stereo_project"
    }

    // grad_j = 2 g_j / D + 4 x_j / D^2 * (g_last - sum_i g_i x_i), D = |x|^2 + 1
    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_output: &[f64]) -> Vec<Vec<f64>> {
        let x = inputs[0];
        let (rows, n) = (x.rows(), x.cols());
        let mut gx = vec![0.0; rows * n];
        for r in 0..rows {
            let xr = x.row(r);
            let g = &grad_output[r * (n + 1)..(r + 1) * (n + 1)];
            let d = squared_norm(xr) + 1.0;
            let dot: f64 = g[..n].iter().zip(xr).map(|(a, b)| a * b).sum();
            let radial = 4.0 * (g[n] - dot) / (d * d);
            for k in 0..n {
                gx[r * n + k] = 2.0 * g[k] / d + radial * xr[k];
            }
        }
        vec![gx]
    }
}

/// Projects every row of a `B x n` matrix, recording the map on the tape.
pub fn project_batch(tape: &mut Tape, x: Var) -> Result<Var> {
    let t = tape.value(x);
    let (rows, n) = match t.shape() {
        [r, c] if *r >= 1 && *c >= 1 => (*r, *c),
        other => {
            return Err(Error::Shape(format!(
                "project_batch expects a non-empty B x n matrix, got {other:?}"
            )))
        }
    };
    let mut out = vec![0.0; rows * (n + 1)];
    for r in 0..rows {
        project_into(t.row(r), &mut out[r * (n + 1)..(r + 1) * (n + 1)])?;
    }
    let output = Tensor::new(vec![rows, n + 1], out)?;
    Ok(tape.custom(Box::new(StereoProjectOp), &[x], output))
}

/// Which closed hemisphere [`hemisphere_map`] lands in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Hemisphere {
    Upper,
    Lower,
}

/// Chart of a closed hemisphere over the unit disk:
/// `v -> (v, +-sqrt(1 - |v|^2))`.
pub fn hemisphere_map(v: &[f64], hemisphere: Hemisphere) -> Result<SpherePoint> {
    let n2 = squared_norm(v);
    if !n2.is_finite() || n2.sqrt() > 1.0 + DISK_TOLERANCE {
        return Err(Error::domain(
            "hemisphere_map",
            format!("|v| = {} lies outside the closed unit disk", n2.sqrt()),
        ));
    }
    let radicand = 1.0 - n2;
    let height = if radicand <= SHELL_SNAP {
        0.0
    } else {
        radicand.sqrt()
    };
    let mut coords = v.to_vec();
    coords.push(match hemisphere {
        Hemisphere::Upper => height,
        Hemisphere::Lower if height == 0.0 => 0.0,
        Hemisphere::Lower => -height,
    });
    Ok(SpherePoint(coords))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvexityReport {
    pub dim: usize,
    pub trials: usize,
    pub violations: usize,
    /// Largest `|a x + (1 - a) y|` observed.
    pub max_norm: f64,
}

/// Convexity tolerance for [`check_ball_convexity`].
pub const CONVEXITY_TOLERANCE: f64 = 1e-12;

/// Uniform sample from the closed unit ball, or from its boundary shell
/// when `on_shell` is set.
fn sample_ball(rng: &mut ChaCha8Rng, dim: usize, on_shell: bool) -> Vec<f64> {
    loop {
        let dir: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = squared_norm(&dir).sqrt();
        if norm < 1e-8 {
            continue;
        }
        let radius = if on_shell {
            1.0
        } else {
            rng.random::<f64>().powf(1.0 / dim as f64)
        };
        return dir.into_iter().map(|c| c / norm * radius).collect();
    }
}

/// Samples pairs in the closed unit ball and mixing weights in `[0, 1]` and
/// counts convex combinations whose norm exceeds `1 + 1e-12`.
///
/// Half of the endpoints are drawn on the unit shell, where a violation
/// would first show up.
pub fn check_ball_convexity(seed: u64, trials: usize, dim: usize) -> Result<ConvexityReport> {
    if trials == 0 || dim == 0 {
        return Err(Error::Config(
            "convexity check needs at least one trial and dimension".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0;
    let mut max_norm: f64 = 0.0;
    for _ in 0..trials {
        let (x_shell, y_shell) = (rng.random::<bool>(), rng.random::<bool>());
        let x = sample_ball(&mut rng, dim, x_shell);
        let y = sample_ball(&mut rng, dim, y_shell);
        let alpha: f64 = rng.random();
        let norm = x
            .iter()
            .zip(&y)
            .map(|(a, b)| alpha * a + (1.0 - alpha) * b)
            .map(|c| c * c)
            .sum::<f64>()
            .sqrt();
        max_norm = max_norm.max(norm);
        if norm > 1.0 + CONVEXITY_TOLERANCE {
            violations += 1;
        }
    }
    Ok(ConvexityReport {
        dim,
        trials,
        violations,
        max_norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn scale_factor_cases() {
        assert_eq!(scale_factor(&[0.0, 0.0, 0.0]).unwrap(), -1.0);
        assert_eq!(scale_factor(&[1.0, 0.0]).unwrap(), 0.0);
        assert!((scale_factor(&[3.0, 4.0]).unwrap() - 24.0 / 26.0).abs() < 1e-15);
        assert!(scale_factor(&[f64::NAN]).is_err());
        assert!(scale_factor(&[f64::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn origin_goes_to_south_pole() {
        let p = project(&[0.0, 0.0]).unwrap();
        assert_eq!(p.coords(), &[0.0, 0.0, -1.0]);
    }

    #[test]
    fn unit_shell_is_fixed() {
        let p = project(&[1.0, 0.0]).unwrap();
        assert_eq!(p.coords(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn three_four_example() {
        let p = project(&[3.0, 4.0]).unwrap();
        let expected = [6.0 / 26.0, 8.0 / 26.0, 24.0 / 26.0];
        for (a, b) in p.coords().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((squared_norm(p.coords()) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn matches_line_through_north_pole() {
        // phi(x) = x + z (e_{n+1} - x), with x embedded at height 0
        let x = [0.7, -1.3, 2.2];
        let z = scale_factor(&x).unwrap();
        let p = project(&x).unwrap();
        for i in 0..3 {
            assert!((p[i] - (x[i] - z * x[i])).abs() < 1e-15);
        }
        assert!((p[3] - z).abs() < 1e-15);
    }

    #[test]
    fn inverse_cases() {
        let x = inverse_project(&[0.0, 0.0, -1.0]).unwrap();
        assert_eq!(x.coords(), &[0.0, 0.0]);
        let x = inverse_project(&[1.0, 0.0, 0.0]).unwrap();
        assert_eq!(x.coords(), &[1.0, 0.0]);
        let x = inverse_project(&[3.0 / 13.0, 4.0 / 13.0, 12.0 / 13.0]).unwrap();
        assert!((x[0] - 3.0).abs() < 1e-9 && (x[1] - 4.0).abs() < 1e-9);
    }

    #[test]
    fn inverse_rejects_pole_and_off_sphere() {
        assert!(matches!(
            inverse_project(&[0.0, 0.0, 1.0]),
            Err(Error::PoleSingularity { .. })
        ));
        let near: f64 = 1.0 - 1e-10;
        let side = (1.0 - near * near).sqrt();
        assert!(matches!(
            inverse_project(&[side, near]),
            Err(Error::PoleSingularity { .. })
        ));
        assert!(matches!(
            inverse_project(&[0.5, 0.5, 0.0]),
            Err(Error::Domain { .. })
        ));
    }

    #[test]
    fn huge_inputs_approach_but_never_reach_pole() {
        let p = project(&[1e6, 0.0]).unwrap();
        assert!(p.last() < 1.0);
        assert!(p.last() > 1.0 - 1e-11);
        assert!(project(&[1e9, 0.0]).is_err());
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let x = [0.4, -1.1, 0.25];
        let j = jacobian(&x).unwrap();
        let h = 1e-6;
        for k in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[k] += h;
            xm[k] -= h;
            let (pp, pm) = (project(&xp).unwrap(), project(&xm).unwrap());
            for i in 0..4 {
                let fd = (pp[i] - pm[i]) / (2.0 * h);
                assert!((fd - j.at(i, k)).abs() < 1e-8, "J[{i},{k}]");
            }
        }
    }

    #[test]
    fn batch_rows_match_single_projection() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[[3.0, 4.0], [3.0, 4.0], [-0.5, 0.1]]).unwrap());
        let p = project_batch(&mut tape, x).unwrap();
        let out = tape.value(p);
        assert_eq!(out.shape(), &[3, 3]);
        assert_eq!(out.row(0), out.row(1));
        assert_eq!(out.row(0), project(&[3.0, 4.0]).unwrap().coords());
        assert_eq!(out.row(2), project(&[-0.5, 0.1]).unwrap().coords());
    }

    #[test]
    fn hemisphere_cases() {
        let p = hemisphere_map(&[0.0, 0.0], Hemisphere::Upper).unwrap();
        assert_eq!(p.coords(), &[0.0, 0.0, 1.0]);
        let p = hemisphere_map(&[0.6, 0.0], Hemisphere::Lower).unwrap();
        assert!((p[2] + 0.8).abs() < 1e-15);
        for v in [[1.0, 0.0], [0.6, 0.8], [-(0.5f64.sqrt()), 0.5f64.sqrt()]] {
            let up = hemisphere_map(&v, Hemisphere::Upper).unwrap();
            let down = hemisphere_map(&v, Hemisphere::Lower).unwrap();
            assert_eq!(up, down);
            assert_eq!(up.last().to_bits(), 0.0f64.to_bits());
        }
        assert!(hemisphere_map(&[1.0 + 1e-9, 0.0], Hemisphere::Upper).is_err());
    }

    #[test]
    fn convexity_corner_cases() {
        // identical shell points and antipodal midpoints
        let x: [f64; 2] = [0.6, 0.8];
        for alpha in [0.0, 0.3, 1.0] {
            let n: f64 = x.iter().map(|c| (alpha * c + (1.0 - alpha) * c).powi(2)).sum();
            assert!((n.sqrt() - 1.0).abs() < 1e-15);
        }
        let mid: Vec<f64> = x.iter().map(|c| 0.5 * c + 0.5 * -c).collect();
        assert_eq!(mid, vec![0.0, 0.0]);
        let report = check_ball_convexity(7, 2000, 3).unwrap();
        assert_eq!(report.violations, 0);
        assert!(check_ball_convexity(7, 0, 3).is_err());
    }

    fn finite_vec(max_dim: usize) -> impl Strategy<Value = Vec<f64>> {
        (1..=max_dim, -3.0f64..3.0).prop_flat_map(|(n, log_scale)| {
            prop::collection::vec(-1.0f64..1.0, n)
                .prop_map(move |v| v.into_iter().map(|c| c * 10f64.powf(log_scale)).collect())
        })
    }

    proptest! {
        #[test]
        fn image_is_on_unit_sphere(x in finite_vec(20)) {
            let p = project(&x).unwrap();
            prop_assert!((squared_norm(&p) - 1.0).abs() <= 1e-12);
            prop_assert!(p.last() < 1.0);
        }

        #[test]
        fn inverse_round_trips(x in finite_vec(12)) {
            let back = inverse_project(&project(&x).unwrap()).unwrap();
            let err: f64 = back.iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale = squared_norm(&x).sqrt();
            prop_assert!(err <= 1e-9 * scale.max(f64::MIN_POSITIVE) || err == 0.0);
        }

        #[test]
        fn last_coordinate_increases_with_radius(
            dir in prop::collection::vec(-1.0f64..1.0, 1..6),
            r in 0.0f64..100.0,
            dr in 1e-3f64..10.0,
        ) {
            let norm = squared_norm(&dir).sqrt();
            prop_assume!(norm > 1e-3);
            let at = |radius: f64| {
                let x: Vec<f64> = dir.iter().map(|c| c / norm * radius).collect();
                project(&x).unwrap().last()
            };
            prop_assert!(at(r + dr) > at(r));
        }

        #[test]
        fn commutes_with_planar_rotation(x0 in -50.0f64..50.0, x1 in -50.0f64..50.0, angle in 0.0f64..std::f64::consts::TAU) {
            let (s, c) = angle.sin_cos();
            let rotated = [c * x0 - s * x1, s * x0 + c * x1];
            let p = project(&[x0, x1]).unwrap();
            let q = project(&rotated).unwrap();
            prop_assert!((q[0] - (c * p[0] - s * p[1])).abs() < 1e-12);
            prop_assert!((q[1] - (s * p[0] + c * p[1])).abs() < 1e-12);
            prop_assert!((q[2] - p[2]).abs() < 1e-12);
        }
    }
}
