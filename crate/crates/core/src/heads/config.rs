use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Classification objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Family {
    Cce,
    SphereFace,
    CosFace,
    ArcFace,
    BroadFace,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::Cce,
        Family::SphereFace,
        Family::CosFace,
        Family::ArcFace,
        Family::BroadFace,
    ];

    /// True for the cosine-based families.
    pub fn is_angular(self) -> bool {
        self != Family::Cce
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Family::Cce => "cce",
            Family::SphereFace => "sphereface",
            Family::CosFace => "cosface",
            Family::ArcFace => "arcface",
            Family::BroadFace => "broadface",
        }
    }

    /// Name as printed in result tables.
    pub fn display_name(self) -> &'static str {
        match self {
            Family::Cce => "CCE",
            Family::SphereFace => "SphereFace",
            Family::CosFace => "CosFace",
            Family::ArcFace => "ArcFace",
            Family::BroadFace => "BroadFace",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown loss family '{s}'")))
    }
}

/// Hyperparameters of a classification head.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginConfig {
    pub family: Family,
    /// Multiplicative integer margin for SphereFace, additive margin for
    /// CosFace, ArcFace and BroadFace. Unused by CCE.
    pub m: f64,
    /// Fixed logit scale, used when `scale_by_norm` is off.
    pub s: f64,
    /// Scale logits by the pre-normalisation feature norm instead of `s`.
    pub scale_by_norm: bool,
    /// BroadFace embedding queue size; 0 disables the queue.
    pub queue_capacity: usize,
    /// SphereFace only: piecewise monotone `psi` instead of plain `cos(m theta)`.
    pub use_monotone_psi: bool,
}

pub const DEFAULT_SCALE: f64 = 8.0;
pub const DEFAULT_QUEUE_CAPACITY: usize = 512;

impl MarginConfig {
    /// Defaults for `family`.
    pub fn new(family: Family) -> Self {
        let m = match family {
            Family::Cce => 0.0,
            Family::SphereFace => 2.0,
            Family::CosFace => 0.35,
            Family::ArcFace | Family::BroadFace => 0.5,
        };
        MarginConfig {
            family,
            m,
            s: if family == Family::Cce { 1.0 } else { DEFAULT_SCALE },
            scale_by_norm: family == Family::SphereFace,
            queue_capacity: if family == Family::BroadFace {
                DEFAULT_QUEUE_CAPACITY
            } else {
                0
            },
            use_monotone_psi: true,
        }
    }

    pub fn with_margin(mut self, m: f64) -> Self {
        self.m = m;
        self
    }

    pub fn with_scale(mut self, s: f64) -> Self {
        self.s = s;
        self.scale_by_norm = false;
        self
    }

    pub fn with_norm_scale(mut self) -> Self {
        self.scale_by_norm = true;
        self
    }

    pub fn with_queue(mut self, capacity: usize) -> Self {
        self.queue_capacity = capacity;
        self
    }

    pub fn with_monotone_psi(mut self, on: bool) -> Self {
        self.use_monotone_psi = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.s.is_finite() && self.s > 0.0) {
            return Err(Error::Config(format!("scale s must be positive, got {}", self.s)));
        }
        match self.family {
            Family::SphereFace => {
                if self.m.fract() != 0.0 || !(1.0..=4.0).contains(&self.m) {
                    return Err(Error::Config(format!(
                        "sphereface needs an integer margin in 1..=4, got {}",
                        self.m
                    )));
                }
            }
            Family::CosFace | Family::ArcFace | Family::BroadFace => {
                if !(0.0..=1.0).contains(&self.m) {
                    return Err(Error::Config(format!(
                        "{} needs a margin in [0, 1], got {}",
                        self.family, self.m
                    )));
                }
            }
            Family::Cce => {}
        }
        if self.queue_capacity > 0 && self.family != Family::BroadFace {
            return Err(Error::Config(format!(
                "queue capacity only applies to broadface, not {}",
                self.family
            )));
        }
        Ok(())
    }

    pub(crate) fn expect_family(&self, family: Family) -> Result<()> {
        self.validate()?;
        if self.family != family {
            return Err(Error::Config(format!(
                "{family} loss called with a {} configuration",
                self.family
            )));
        }
        Ok(())
    }
}
