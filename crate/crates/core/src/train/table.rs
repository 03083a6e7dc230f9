use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::experiment::RunReport;
use crate::error::{Error, Result};
use crate::heads::Family;

/// Appended to the better cell of each row.
pub const BETTER_MARKER: char = '*';

fn cell(r: &RunReport) -> String {
    format!("{:.2}±{:.2}", r.mean, r.std)
}

/// Rows of loss families, columns for projection on and off, one block
/// per dataset. Each cell is `mean±std` to two decimals; the cell with
/// the higher rounded mean gets [`BETTER_MARKER`], ties get none.
pub fn emit_table(reports: &[RunReport]) -> Result<String> {
    if reports.is_empty() {
        return Err(Error::Layout("no reports to tabulate".into()));
    }
    type Pair<'a> = [Option<&'a RunReport>; 2];
    let mut pairs: BTreeMap<(String, Family), Pair> = BTreeMap::new();
    for r in reports {
        let key = (r.dataset(), r.spec.family());
        let slot = &mut pairs.entry(key.clone()).or_default()[usize::from(!r.spec.model.projection)];
        if slot.is_some() {
            return Err(Error::Layout(format!(
                "two reports for {} / {} with projection {}",
                key.0,
                key.1.display_name(),
                if r.spec.model.projection { "on" } else { "off" }
            )));
        }
        *slot = Some(r);
    }
    let missing: Vec<String> = pairs
        .iter()
        .filter_map(|((ds, fam), pair)| match pair {
            [Some(_), None] => Some(format!("{ds} / {} projection off", fam.display_name())),
            [None, Some(_)] => Some(format!("{ds} / {} projection on", fam.display_name())),
            _ => None,
        })
        .collect();
    if !missing.is_empty() {
        return Err(Error::Layout(format!("unpaired reports, missing: {}", missing.join("; "))));
    }

    let mut rows = vec![[
        "Dataset".to_string(),
        "Loss".to_string(),
        "Projection: Yes".to_string(),
        "Projection: No".to_string(),
    ]];
    for ((ds, fam), pair) in &pairs {
        let (on, off) = (pair[0].expect("paired"), pair[1].expect("paired"));
        let (mut yes, mut no) = (cell(on), cell(off));
        let (a, b) = (format!("{:.2}", on.mean), format!("{:.2}", off.mean));
        if a != b {
            if on.mean > off.mean {
                yes.push(BETTER_MARKER);
            } else {
                no.push(BETTER_MARKER);
            }
        }
        rows.push([ds.clone(), fam.display_name().to_string(), yes, no]);
    }
    let mut widths = [0usize; 4];
    for row in &rows {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let mut out = String::new();
    for row in &rows {
        let line: Vec<String> = row
            .iter()
            .zip(widths)
            .map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
    }
    Ok(out)
}
