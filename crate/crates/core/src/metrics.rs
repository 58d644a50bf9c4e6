//! Evaluation metrics. None of these touch the tape; they measure
//! finished displacements and label grids.

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::warp::sample_tap;
use statrs::distribution::{ContinuousCDF, Normal};

/// Two-sided significance level used when comparing paired metric runs.
pub const ALPHA: f64 = 0.01;

/// Per-label hard Dice between two integer label grids. Label 0 is
/// background and excluded; the returned vector covers labels `1..=k`.
/// A label absent from both grids scores 1 (perfect agreement on absence).
pub fn hard_dice(a: &Grid, b: &Grid, num_labels: usize) -> Result<Vec<f64>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "hard_dice",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    if a.c() != 1 {
        return Err(Error::shape("hard_dice", "label grids must be single-channel"));
    }
    if num_labels == 0 {
        return Err(Error::invalid("hard_dice", "num_labels must be at least 1"));
    }
    for g in [a, b] {
        for &v in g.data() {
            if v.fract() != 0.0 || v < 0.0 || v > num_labels as f64 {
                return Err(Error::domain(
                    "hard_dice",
                    format!("value {} is not a label in 0..={}", v, num_labels),
                ));
            }
        }
    }
    let mut inter = vec![0u64; num_labels + 1];
    let mut ca = vec![0u64; num_labels + 1];
    let mut cb = vec![0u64; num_labels + 1];
    for (&va, &vb) in a.data().iter().zip(b.data()) {
        let (la, lb) = (va as usize, vb as usize);
        ca[la] += 1;
        cb[lb] += 1;
        if la == lb {
            inter[la] += 1;
        }
    }
    Ok((1..=num_labels)
        .map(|l| {
            let denom = ca[l] + cb[l];
            if denom == 0 {
                1.0
            } else {
                2.0 * inter[l] as f64 / denom as f64
            }
        })
        .collect())
}

/// Mean of [`hard_dice`] over foreground labels.
pub fn mean_dice(a: &Grid, b: &Grid, num_labels: usize) -> Result<f64> {
    let d = hard_dice(a, b, num_labels)?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

/// Target registration error per landmark pair: `|p + d(p) - q|` with the
/// displacement sampled bilinearly at p and axes scaled by `spacing`.
pub fn tre(
    disp: &Grid,
    fixed_pts: &[(f64, f64)],
    moving_pts: &[(f64, f64)],
    spacing: (f64, f64),
) -> Result<Vec<f64>> {
    if disp.c() != 2 {
        return Err(Error::shape("tre", "displacement must have 2 channels"));
    }
    if fixed_pts.len() != moving_pts.len() {
        return Err(Error::invalid(
            "tre",
            format!("{} fixed vs {} moving points", fixed_pts.len(), moving_pts.len()),
        ));
    }
    let (h, w, _) = disp.shape();
    let mut out = Vec::with_capacity(fixed_pts.len());
    for (&(py, px), &(qy, qx)) in fixed_pts.iter().zip(moving_pts) {
        let tap = sample_tap(h, w, py, px);
        let dy = tap.gather(disp, 0);
        let dx = tap.gather(disp, 1);
        let ry = (py + dy - qy) * spacing.0;
        let rx = (px + dx - qx) * spacing.1;
        out.push((ry * ry + rx * rx).sqrt());
    }
    Ok(out)
}

/// Mean of [`tre`] over the landmark set.
pub fn mean_tre(
    disp: &Grid,
    fixed_pts: &[(f64, f64)],
    moving_pts: &[(f64, f64)],
    spacing: (f64, f64),
) -> Result<f64> {
    if fixed_pts.is_empty() {
        return Err(Error::invalid("tre", "empty landmark lists"));
    }
    let v = tre(disp, fixed_pts, moving_pts, spacing)?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// Fraction of mapped area carried by folded triangles, in [0, 1].
///
/// Each grid cell is split along both diagonals into four triangles, each
/// weighted 1/2 so an identity cell contributes unit area. A triangle whose
/// signed area under `p + d(p)` is negative has locally reversed
/// orientation; the result is |negative area| / total |area|. Identity
/// fields give 0, a full reflection gives 1.
pub fn ndv(disp: &Grid) -> Result<f64> {
    let (h, w, c) = disp.shape();
    if c != 2 {
        return Err(Error::shape("ndv", "displacement must have 2 channels"));
    }
    if h < 2 || w < 2 {
        return Err(Error::invalid("ndv", "field must be at least 2x2"));
    }
    let pos = |y: usize, x: usize| -> (f64, f64) {
        (y as f64 + disp.get(y, x, 0), x as f64 + disp.get(y, x, 1))
    };
    // Positive under identity for vertex order (a, b, c) with y down.
    let signed = |a: (f64, f64), b: (f64, f64), c: (f64, f64)| -> f64 {
        0.5 * ((b.1 - a.1) * (c.0 - a.0) - (c.1 - a.1) * (b.0 - a.0))
    };
    let mut neg = 0.0;
    let mut total = 0.0;
    for y in 0..h - 1 {
        for x in 0..w - 1 {
            let a = pos(y, x);
            let b = pos(y, x + 1);
            let c = pos(y + 1, x);
            let d = pos(y + 1, x + 1);
            for area in [
                signed(a, b, d),
                signed(a, d, c),
                signed(a, b, c),
                signed(b, d, c),
            ] {
                let m = 0.5 * area;
                total += m.abs();
                if m < 0.0 {
                    neg += -m;
                }
            }
        }
    }
    if total == 0.0 {
        return Err(Error::domain("ndv", "degenerate field with zero total area"));
    }
    Ok(neg / total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PValueMethod {
    Exact,
    NormalApprox,
}

#[derive(Debug, Clone, Copy)]
pub struct WilcoxonResult {
    /// Sum of ranks of positive differences.
    pub w_plus: f64,
    /// Pairs remaining after zero differences are dropped.
    pub n_used: usize,
    pub p_two_sided: f64,
    pub method: PValueMethod,
}

/// Largest n for which the exact sign-flip distribution is enumerated.
const WILCOXON_EXACT_MAX_N: usize = 20;

/// Paired two-sided Wilcoxon signed-rank test on `xs[i] - ys[i]`.
///
/// Zero differences are dropped; ties in |difference| get average ranks.
/// For n <= 20 the p-value is exact over all 2^n sign assignments of the
/// observed rank multiset (dynamic program on doubled ranks, which are
/// integers even with ties). Larger n uses the normal approximation with
/// tie-corrected variance and a 0.5 continuity correction.
pub fn wilcoxon_signed_rank(xs: &[f64], ys: &[f64]) -> Result<WilcoxonResult> {
    if xs.len() != ys.len() {
        return Err(Error::invalid(
            "wilcoxon_signed_rank",
            format!("{} vs {} observations", xs.len(), ys.len()),
        ));
    }
    let mut diffs: Vec<f64> = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| x - y)
        .filter(|d| *d != 0.0)
        .collect();
    let n = diffs.len();
    if n == 0 {
        return Err(Error::domain(
            "wilcoxon_signed_rank",
            "all differences are zero; the test is undefined",
        ));
    }
    diffs.sort_by(|a, b| a.abs().partial_cmp(&b.abs()).unwrap());
    // Average ranks over tie groups of |d|.
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && diffs[j].abs() == diffs[i].abs() {
            j += 1;
        }
        let avg = (i + 1..=j).map(|r| r as f64).sum::<f64>() / (j - i) as f64;
        for r in ranks.iter_mut().take(j).skip(i) {
            *r = avg;
        }
        i = j;
    }
    let w_plus: f64 = diffs
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| *r)
        .sum();

    let (p, method) = if n <= WILCOXON_EXACT_MAX_N {
        (exact_p(&ranks, w_plus), PValueMethod::Exact)
    } else {
        (normal_p(&ranks, w_plus), PValueMethod::NormalApprox)
    };
    Ok(WilcoxonResult { w_plus, n_used: n, p_two_sided: p.min(1.0), method })
}

/// Exact two-sided p by counting sign assignments with a subset-sum DP.
/// Doubling makes every (possibly half-integer) rank an exact integer.
fn exact_p(ranks: &[f64], w_plus: f64) -> f64 {
    let scaled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let total: usize = scaled.iter().sum();
    let mut counts = vec![0.0f64; total + 1];
    counts[0] = 1.0;
    for &s in &scaled {
        for sum in (s..=total).rev() {
            counts[sum] += counts[sum - s];
        }
    }
    let denom = 2f64.powi(ranks.len() as i32);
    let w2 = (2.0 * w_plus).round() as usize;
    let below: f64 = counts[..=w2].iter().sum();
    let above: f64 = counts[w2..].iter().sum();
    2.0 * (below.min(above)) / denom
}

fn normal_p(ranks: &[f64], w_plus: f64) -> f64 {
    let n = ranks.len() as f64;
    let mu = n * (n + 1.0) / 4.0;
    let mut var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0;
    // Tie correction: subtract (t^3 - t)/48 per tie group of size t.
    let mut i = 0;
    while i < ranks.len() {
        let mut j = i;
        while j < ranks.len() && ranks[j] == ranks[i] {
            j += 1;
        }
        let t = (j - i) as f64;
        var -= (t * t * t - t) / 48.0;
        i = j;
    }
    if var <= 0.0 {
        return 1.0;
    }
    let d = w_plus - mu;
    if d == 0.0 {
        return 1.0;
    }
    let z = (d - 0.5 * d.signum()) / var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    2.0 * normal.cdf(-z.abs())
}

/// Quantile with linear interpolation on the sorted copy of `xs`.
pub fn quantile(xs: &[f64], q: f64) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::invalid("quantile", "empty sample"));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::invalid("quantile", format!("q = {} outside [0, 1]", q)));
    }
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Ok(v[lo] * (1.0 - frac) + v[hi] * frac)
}

pub fn median(xs: &[f64]) -> Result<f64> {
    quantile(xs, 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::warp::{identity_displacement, uniform_displacement};

    fn labels(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Grid {
        let mut g = Grid::zeros(h, w, 1);
        for y in 0..h {
            for x in 0..w {
                g.set(y, x, 0, f(y, x));
            }
        }
        g
    }

    #[test]
    fn hard_dice_on_offset_strips_is_one_third() {
        // 1x3 strips overlapping in one pixel: 2*1 / (3+3) = 1/3.
        let a = labels(1, 5, |_, x| if x < 3 { 1.0 } else { 0.0 });
        let b = labels(1, 5, |_, x| if x >= 2 { 1.0 } else { 0.0 });
        let d = hard_dice(&a, &b, 1).unwrap();
        assert!((d[0] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn hard_dice_identical_is_one_and_disjoint_is_zero() {
        let a = labels(4, 4, |y, _| if y < 2 { 1.0 } else { 2.0 });
        let d = hard_dice(&a, &a, 2).unwrap();
        assert_eq!(d, vec![1.0, 1.0]);
        let b = labels(4, 4, |y, _| if y < 2 { 2.0 } else { 1.0 });
        let d = hard_dice(&a, &b, 2).unwrap();
        assert_eq!(d, vec![0.0, 0.0]);
    }

    #[test]
    fn hard_dice_excludes_background_and_rejects_fractional() {
        let a = labels(2, 2, |_, _| 0.0);
        // All background: label 1 absent from both grids scores 1.
        assert_eq!(hard_dice(&a, &a, 1).unwrap(), vec![1.0]);
        let bad = labels(2, 2, |_, _| 0.5);
        assert!(hard_dice(&bad, &a, 1).is_err());
    }

    #[test]
    fn tre_is_zero_for_matching_translation_and_scales_with_spacing() {
        let d = uniform_displacement(8, 8, 2.0, 0.0);
        let fixed = [(1.0, 1.0), (4.5, 3.0)];
        let moving = [(3.0, 1.0), (6.5, 3.0)];
        let v = tre(&d, &fixed, &moving, (1.0, 1.0)).unwrap();
        assert!(v.iter().all(|e| *e < 1e-12));

        let id = identity_displacement(8, 8);
        let v1 = mean_tre(&id, &fixed, &moving, (1.0, 1.0)).unwrap();
        let v2 = mean_tre(&id, &fixed, &moving, (3.0, 1.0)).unwrap();
        assert!((v1 - 2.0).abs() < 1e-12);
        assert!((v2 - 6.0).abs() < 1e-12);
    }

    #[test]
    fn ndv_identity_is_zero_and_reflection_is_total() {
        assert_eq!(ndv(&identity_displacement(6, 6)).unwrap(), 0.0);
        let mut refl = Grid::zeros(6, 6, 2);
        for y in 0..6 {
            for x in 0..6 {
                refl.set(y, x, 1, (5 - x) as f64 - x as f64);
            }
        }
        assert!((ndv(&refl).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ndv_single_collapsed_corner_folds_half_the_cell() {
        // Mapping the (1,1) corner of a 2x2 field onto (0,0) degenerates
        // both main-diagonal triangles and flips one anti-diagonal
        // triangle: |neg| = 1/4 of mass 1/2.
        let mut d = Grid::zeros(2, 2, 2);
        d.set(1, 1, 0, -1.0);
        d.set(1, 1, 1, -1.0);
        assert!((ndv(&d).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn ndv_smooth_translation_is_zero() {
        assert_eq!(ndv(&uniform_displacement(5, 7, 1.3, -2.2)).unwrap(), 0.0);
    }

    #[test]
    fn wilcoxon_all_positive_n5() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        let ys = [0.0; 5];
        let r = wilcoxon_signed_rank(&xs, &ys).unwrap();
        assert_eq!(r.w_plus, 15.0);
        assert_eq!(r.method, PValueMethod::Exact);
        assert!((r.p_two_sided - 0.0625).abs() < 1e-12);
    }

    #[test]
    fn wilcoxon_all_positive_n10() {
        let xs: Vec<f64> = (1..=10).map(|i| i as f64).collect();
        let ys = vec![0.0; 10];
        let r = wilcoxon_signed_rank(&xs, &ys).unwrap();
        assert!((r.p_two_sided - 2.0 / 1024.0).abs() < 1e-12);
    }

    #[test]
    fn wilcoxon_symmetric_differences_give_p_one() {
        let xs = [1.0, -1.0, 2.0, -2.0, 3.0, -3.0];
        let ys = [0.0; 6];
        let r = wilcoxon_signed_rank(&xs, &ys).unwrap();
        assert_eq!(r.p_two_sided, 1.0);
    }

    #[test]
    fn wilcoxon_drops_zero_differences_and_rejects_all_zero() {
        let xs = [1.0, 2.0, 0.5, 0.5];
        let ys = [0.0, 0.0, 0.5, 0.5];
        let r = wilcoxon_signed_rank(&xs, &ys).unwrap();
        assert_eq!(r.n_used, 2);
        assert!(wilcoxon_signed_rank(&[1.0, 2.0], &[1.0, 2.0]).is_err());
    }

    /// Brute-force oracle: enumerate all 2^n sign assignments directly.
    fn enumerated_p(ranks: &[f64], w_plus: f64) -> f64 {
        let n = ranks.len();
        let mut below = 0u64;
        let mut above = 0u64;
        for mask in 0u64..(1 << n) {
            let w: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
            if w <= w_plus + 1e-12 {
                below += 1;
            }
            if w >= w_plus - 1e-12 {
                above += 1;
            }
        }
        let denom = (1u64 << n) as f64;
        (2.0 * (below.min(above)) as f64 / denom).min(1.0)
    }

    #[test]
    fn wilcoxon_exact_matches_enumeration_with_and_without_ties() {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for case in 0..20 {
            let n = rng.gen_range(3..=12);
            let xs: Vec<f64> = (0..n)
                .map(|_| {
                    // Coarse quantization forces ties in |difference|.
                    let v: i32 = rng.gen_range(-4..=4);
                    if v == 0 {
                        1.0
                    } else {
                        v as f64
                    }
                })
                .collect();
            let ys = vec![0.0; n];
            let r = wilcoxon_signed_rank(&xs, &ys).unwrap();
            // Recover the ranks the implementation used.
            let mut diffs: Vec<f64> = xs.iter().filter(|d| **d != 0.0).copied().collect();
            diffs.sort_by(|a, b| a.abs().partial_cmp(&b.abs()).unwrap());
            let m = diffs.len();
            let mut ranks = vec![0.0; m];
            let mut i = 0;
            while i < m {
                let mut j = i;
                while j < m && diffs[j].abs() == diffs[i].abs() {
                    j += 1;
                }
                let avg = (i + 1..=j).map(|r| r as f64).sum::<f64>() / (j - i) as f64;
                for r in ranks.iter_mut().take(j).skip(i) {
                    *r = avg;
                }
                i = j;
            }
            let expect = enumerated_p(&ranks, r.w_plus);
            assert!(
                (r.p_two_sided - expect).abs() < 1e-12,
                "case {}: {} vs {}",
                case,
                r.p_two_sided,
                expect
            );
        }
    }

    #[test]
    fn wilcoxon_normal_approximation_tracks_exact_near_boundary() {
        // n = 21 uses the approximation; a clearly one-sided sample should
        // be highly significant under both.
        let xs: Vec<f64> = (1..=21).map(|i| i as f64).collect();
        let ys = vec![0.0; 21];
        let r = wilcoxon_signed_rank(&xs, &ys).unwrap();
        assert_eq!(r.method, PValueMethod::NormalApprox);
        assert!(r.p_two_sided < 1e-4);
    }

    #[test]
    fn quantile_interpolates() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&xs, 0.0).unwrap(), 1.0);
        assert_eq!(quantile(&xs, 1.0).unwrap(), 4.0);
        assert!((median(&xs).unwrap() - 2.5).abs() < 1e-12);
        assert!((quantile(&xs, 0.25).unwrap() - 1.75).abs() < 1e-12);
    }
}
