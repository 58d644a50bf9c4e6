//! The `selftest` command: the gradient-check battery plus quick metric
//! oracle probes, reported one line per check.

use crate::{CliError, CliResult};
use srgd_core::grid::Grid;
use srgd_core::metrics::{hard_dice, ndv, wilcoxon_signed_rank};
use srgd_core::selfcheck::standard_suite;

fn fmt_report(r: &srgd_core::selfcheck::CheckReport) -> String {
    let status = if r.passed() { "ok" } else { "FAIL" };
    let mut line = format!(
        "{:<22} {:>5} coords  max dev {:.3e}  kinks {:>2}  {}",
        r.name, r.checked, r.max_abs_dev, r.kinks, status
    );
    if !r.passed() {
        if let Some(w) = r.worst {
            line.push_str(&format!(
                "  (worst: input {} offset {} analytic {:.6e} numeric {:.6e})",
                w.input, w.offset, w.analytic, w.numeric
            ));
        }
    }
    line
}

/// Hand-checkable metric probes; each returns a status line or an error
/// message describing the mismatch.
fn oracle_probes() -> Vec<(String, bool)> {
    let mut probes = Vec::new();

    // A constant displacement moves every triangle rigidly; a horizontal
    // reflection flips the orientation of every triangle.
    let (h, w) = (8usize, 8usize);
    let mut translation = Grid::zeros(h, w, 2);
    let mut reflection = Grid::zeros(h, w, 2);
    for y in 0..h {
        for x in 0..w {
            translation.set(y, x, 0, 0.3);
            translation.set(y, x, 1, -0.2);
            reflection.set(y, x, 1, (w - 1) as f64 - 2.0 * x as f64);
        }
    }
    let t = ndv(&translation).unwrap_or(f64::NAN);
    let r = ndv(&reflection).unwrap_or(f64::NAN);
    probes.push((
        format!("ndv oracle             translation {:.3}  reflection {:.3}", t, r),
        t.abs() < 1e-12 && (r - 1.0).abs() < 1e-12,
    ));

    // Five all-positive differences: W+ = 15, two-sided exact p = 2/32.
    let xs = [2.0, 4.0, 6.0, 8.0, 10.0];
    let ys = [1.0, 2.0, 3.0, 4.0, 5.0];
    let p = wilcoxon_signed_rank(&xs, &ys).map(|r| r.p_two_sided).unwrap_or(f64::NAN);
    probes.push((
        format!("wilcoxon oracle        p {:.6} (expect 0.062500)", p),
        (p - 2.0 / 32.0).abs() < 1e-12,
    ));

    // Label 1 overlap 1 of sizes 2 and 1: Dice 2/3.
    let a = Grid::from_vec(2, 2, 1, vec![1.0, 1.0, 0.0, 0.0]).expect("2x2");
    let b = Grid::from_vec(2, 2, 1, vec![1.0, 0.0, 0.0, 0.0]).expect("2x2");
    let d = hard_dice(&a, &b, 1).map(|v| v[0]).unwrap_or(f64::NAN);
    probes.push((
        format!("dice oracle            dsc {:.6} (expect 0.666667)", d),
        (d - 2.0 / 3.0).abs() < 1e-12,
    ));

    probes
}

/// Runs every check; the returned flag is true when all passed.
pub fn run(seeds: &[u64]) -> CliResult<(Vec<String>, bool)> {
    let mut lines = Vec::new();
    let mut ok = true;
    for &seed in seeds {
        lines.push(format!("gradient checks, seed {}", seed));
        let reports = standard_suite(seed).map_err(CliError::from)?;
        for r in &reports {
            ok &= r.passed();
            lines.push(format!("  {}", fmt_report(r)));
        }
    }
    for (line, passed) in oracle_probes() {
        ok &= passed;
        lines.push(format!("  {}  {}", line, if passed { "ok" } else { "FAIL" }));
    }
    lines.push(if ok { "selftest: all checks passed".into() } else { "selftest: FAILED".into() });
    Ok((lines, ok))
}
