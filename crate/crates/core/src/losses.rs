//! Registration losses, all recorded on the tape.
//!
//! Every loss maps one or two grids (and usually a displacement) to a 1x1x1
//! scalar node, so gradients reach the displacement, the images, and any
//! parameters behind them. The dissimilarity convention is "lower is
//! better" throughout: similarity measures are returned as losses.
//!
//! [`objective`] assembles similarity plus weighted diffusion regularity on
//! a warped pair. [`surrogate_objective`] is the same computation evaluated
//! on a *surrogate* pair: the images the loss sees may differ from the
//! images the model saw. When the surrogates are the inputs themselves the
//! two are one code path and agree bit for bit.

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::tape::{TVal, Tape};

/// Denominator guard in the windowed NCC score. Large enough to keep
/// flat windows finite, small enough to leave the score near 1 on
/// self-similar windows; it bounds the affine-invariance slack measured in
/// the tests (order 1e-7 on unit-range images).
pub const NCC_EPS: f64 = 1e-5;

/// Added to per-channel Dice denominators so empty-vs-empty channels stay
/// finite before support filtering.
pub const DICE_EPS: f64 = 1e-6;

/// Floor on per-bin Parzen mass in the correlation ratio, guarding the
/// within-bin mean of almost-empty bins.
pub const CR_MASS_EPS: f64 = 1e-12;

/// Inside the square root of landmark distances, keeping the gradient
/// finite at exact coincidence.
pub const TRE_EPS: f64 = 1e-12;

/// Images whose intensity range is at or below this are rejected where a
/// [0, 1] rescale is required (mutual information, correlation ratio).
const CONST_RANGE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Similarity {
    Mse,
    Ncc,
    Mi,
    Cr,
    Dice,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub similarity: Similarity,
    /// Weight on the diffusion regularizer.
    pub lambda: f64,
    pub ncc_window: usize,
    pub mi_bins: usize,
    pub mi_sigma: f64,
    pub cr_bins: usize,
    pub cr_sigma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            similarity: Similarity::Mse,
            lambda: 1.0,
            ncc_window: 9,
            mi_bins: 32,
            mi_sigma: 0.5,
            cr_bins: 32,
            cr_sigma: 0.5,
        }
    }
}

impl LossConfig {
    pub fn with_similarity(sim: Similarity, lambda: f64) -> Self {
        LossConfig { similarity: sim, lambda, ..Default::default() }
    }
}

fn require_equal_shapes(t: &Tape, a: TVal, b: TVal, op: &'static str) -> Result<()> {
    if t.value(a).shape() != t.value(b).shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", t.value(a).shape(), t.value(b).shape()),
        ));
    }
    Ok(())
}

/// Mean squared difference.
pub fn mse(t: &mut Tape, a: TVal, b: TVal) -> Result<TVal> {
    require_equal_shapes(t, a, b, "mse")?;
    let d = t.sub(a, b)?;
    let sq = t.mul(d, d)?;
    t.mean(sq)
}

/// Windowed normalized cross-correlation loss, `1 - mean(cc)`.
///
/// Per pixel, cc is the squared correlation of the k x k windows around it:
/// `(sum (a - a_bar)(b - b_bar))^2 / (sum (a - a_bar)^2 sum (b - b_bar)^2 +
/// eps)`. Windows are zero padded and the padding zeros participate as
/// data, so window statistics always use n = k*k values.
pub fn ncc_loss(t: &mut Tape, a: TVal, b: TVal, window: usize) -> Result<TVal> {
    require_equal_shapes(t, a, b, "ncc_loss")?;
    let n = (window * window) as f64;
    let ab = t.mul(a, b)?;
    let aa = t.mul(a, a)?;
    let bb = t.mul(b, b)?;
    let sa = t.window_sum(a, window)?;
    let sb = t.window_sum(b, window)?;
    let sab = t.window_sum(ab, window)?;
    let saa = t.window_sum(aa, window)?;
    let sbb = t.window_sum(bb, window)?;
    let sasb = t.mul(sa, sb)?;
    let cross = {
        let scaled = t.mul_s(sasb, 1.0 / n)?;
        t.sub(sab, scaled)?
    };
    let va = {
        let sasa = t.mul(sa, sa)?;
        let scaled = t.mul_s(sasa, 1.0 / n)?;
        t.sub(saa, scaled)?
    };
    let vb = {
        let sbsb = t.mul(sb, sb)?;
        let scaled = t.mul_s(sbsb, 1.0 / n)?;
        t.sub(sbb, scaled)?
    };
    let num = t.mul(cross, cross)?;
    let den = {
        let vv = t.mul(va, vb)?;
        t.add_s(vv, NCC_EPS)?
    };
    let cc = t.div(num, den)?;
    let mean_cc = t.mean(cc)?;
    t.sub_from_s(1.0, mean_cc)
}

/// Rescales a grid to [0, 1] on the tape. Gradients flow through min/max by
/// subgradient routing, so finite-difference checks agree everywhere except
/// exact ties.
fn rescale01(t: &mut Tape, a: TVal, op: &'static str) -> Result<TVal> {
    let lo = t.min(a)?;
    let hi = t.max(a)?;
    let range = t.sub(hi, lo)?;
    if t.value(range).scalar_value() <= CONST_RANGE {
        return Err(Error::domain(op, "constant image cannot be rescaled to [0, 1]"));
    }
    let shifted = t.sub(a, lo)?;
    t.div(shifted, range)
}

/// Parzen-window mutual information between two single-channel grids, as a
/// scalar MI node (natural log). Intensities are rescaled to [0, 1], soft
/// binned with normalized Gaussian kernels of std `sigma` bin widths, and
/// the joint histogram is the mean outer product of the per-pixel weights.
pub fn mutual_information(
    t: &mut Tape,
    a: TVal,
    b: TVal,
    bins: usize,
    sigma: f64,
) -> Result<TVal> {
    require_equal_shapes(t, a, b, "mutual_information")?;
    if t.value(a).c() != 1 {
        return Err(Error::shape("mutual_information", "inputs must be single-channel"));
    }
    let ar = rescale01(t, a, "mutual_information")?;
    let br = rescale01(t, b, "mutual_information")?;
    let wa = t.parzen_weights(ar, bins, sigma)?;
    let wb = t.parzen_weights(br, bins, sigma)?;
    let j = t.outer_mean(wa, wb)?;
    t.mi_from_joint(j)
}

/// Mutual information as a loss: `-MI`.
pub fn mi_loss(t: &mut Tape, a: TVal, b: TVal, bins: usize, sigma: f64) -> Result<TVal> {
    let mi = mutual_information(t, a, b, bins, sigma)?;
    t.mul_s(mi, -1.0)
}

/// Soft-binned correlation ratio eta^2 of `b` given `a`: the fraction of
/// the variance of `b` explained by the Parzen bin of `a`. Both inputs are
/// rescaled to [0, 1]; `b` must be non-constant.
pub fn correlation_ratio(
    t: &mut Tape,
    a: TVal,
    b: TVal,
    bins: usize,
    sigma: f64,
) -> Result<TVal> {
    require_equal_shapes(t, a, b, "correlation_ratio")?;
    if t.value(a).c() != 1 {
        return Err(Error::shape("correlation_ratio", "inputs must be single-channel"));
    }
    {
        let vb = t.value(b);
        let mean = vb.mean();
        let var = vb.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / vb.numel() as f64;
        if var <= CONST_RANGE {
            return Err(Error::domain("correlation_ratio", "constant b has no variance to explain"));
        }
    }
    let (h, w, _) = t.value(a).shape();
    let n = (h * w) as f64;
    let ar = rescale01(t, a, "correlation_ratio")?;
    let br = rescale01(t, b, "correlation_ratio")?;
    let wa = t.parzen_weights(ar, bins, sigma)?;
    // Per-bin mass and first/second moments of b under the soft assignment.
    let s0 = t.sum_per_channel(wa)?;
    let wb1 = t.mul(wa, br)?;
    let s1 = t.sum_per_channel(wb1)?;
    let bsq = t.mul(br, br)?;
    let wb2 = t.mul(wa, bsq)?;
    let s2 = t.sum_per_channel(wb2)?;
    // sum_i (S2_i - S1_i^2 / S0_i) is the total within-bin variance mass.
    let s1sq = t.mul(s1, s1)?;
    let s0_safe = t.add_s(s0, CR_MASS_EPS)?;
    let explained_part = t.div(s1sq, s0_safe)?;
    let sum_s2 = t.sum(s2)?;
    let sum_expl = t.sum(explained_part)?;
    let within = t.sub(sum_s2, sum_expl)?;
    // Total variance mass of b: n * Var(b) on the rescaled values.
    let mb = t.mean(br)?;
    let centered = t.sub(br, mb)?;
    let csq = t.mul(centered, centered)?;
    let var_b = t.mean(csq)?;
    let total = t.mul_s(var_b, n)?;
    let ratio = t.div(within, total)?;
    t.sub_from_s(1.0, ratio)
}

/// Correlation ratio as a loss: `1 - eta^2`.
pub fn cr_loss(t: &mut Tape, a: TVal, b: TVal, bins: usize, sigma: f64) -> Result<TVal> {
    let eta2 = correlation_ratio(t, a, b, bins, sigma)?;
    t.sub_from_s(1.0, eta2)
}

/// Soft Dice loss over probability channels: `1 - mean_c 2|P_c Q_c| /
/// (|P_c| + |Q_c| + eps)`, where the mean runs over channels with nonzero
/// support in either grid. Values are expected in [0, 1] (a loose tolerance
/// admits round-off and finite-difference probes, not misuse).
pub fn soft_dice_loss(t: &mut Tape, p: TVal, q: TVal) -> Result<TVal> {
    require_equal_shapes(t, p, q, "soft_dice_loss")?;
    for (name, v) in [("p", p), ("q", q)] {
        if t.value(v).data().iter().any(|&x| !(-1e-2..=1.0 + 1e-2).contains(&x)) {
            return Err(Error::domain(
                "soft_dice_loss",
                format!("{} has values outside [0, 1]", name),
            ));
        }
    }
    let c = t.value(p).c();
    let pq = t.mul(p, q)?;
    let inter = t.sum_per_channel(pq)?;
    let sp = t.sum_per_channel(p)?;
    let sq = t.sum_per_channel(q)?;
    // Support selection is a value-level decision, constant on the tape.
    let mut sel = Grid::zeros(1, 1, c);
    let mut n_sel = 0.0;
    for ch in 0..c {
        if t.value(sp).get(0, 0, ch) + t.value(sq).get(0, 0, ch) > 0.0 {
            sel.set(0, 0, ch, 1.0);
            n_sel += 1.0;
        }
    }
    if n_sel == 0.0 {
        return Err(Error::domain("soft_dice_loss", "no channel has support in either grid"));
    }
    let num = t.mul_s(inter, 2.0)?;
    let den = {
        let s = t.add(sp, sq)?;
        t.add_s(s, DICE_EPS)?
    };
    let dice_c = t.div(num, den)?;
    let sel_node = t.input(sel)?;
    let kept = t.mul(dice_c, sel_node)?;
    let total = t.sum(kept)?;
    let mean_dice = t.mul_s(total, 1.0 / n_sel)?;
    t.sub_from_s(1.0, mean_dice)
}

/// Diffusion regularizer: mean squared forward differences of the field.
pub fn diffusion_reg(t: &mut Tape, disp: TVal) -> Result<TVal> {
    t.diffusion(disp)
}

/// Mean landmark distance under the displacement, differentiable in the
/// field. For each fixed-grid point p with counterpart q, the residual is
/// `p + d(p) - q`, scaled per axis by `spacing` and measured in 2-norm
/// (with [`TRE_EPS`] inside the square root).
pub fn tre_loss(
    t: &mut Tape,
    disp: TVal,
    fixed_pts: &[(f64, f64)],
    moving_pts: &[(f64, f64)],
    spacing: (f64, f64),
) -> Result<TVal> {
    if fixed_pts.len() != moving_pts.len() {
        return Err(Error::invalid(
            "tre_loss",
            format!("{} fixed vs {} moving points", fixed_pts.len(), moving_pts.len()),
        ));
    }
    if fixed_pts.is_empty() {
        return Err(Error::invalid("tre_loss", "empty landmark lists"));
    }
    let k = fixed_pts.len();
    let sampled = t.sample_disp(disp, fixed_pts)?;
    let mut target = Grid::zeros(k, 1, 2);
    for i in 0..k {
        target.set(i, 0, 0, moving_pts[i].0 - fixed_pts[i].0);
        target.set(i, 0, 1, moving_pts[i].1 - fixed_pts[i].1);
    }
    let tgt = t.input(target)?;
    let diff = t.sub(sampled, tgt)?;
    let sp = t.input(Grid::from_vec(1, 1, 2, vec![spacing.0, spacing.1])?)?;
    let scaled = t.mul(diff, sp)?;
    let sq = t.mul(scaled, scaled)?;
    let per_lm = t.chan_sum(sq)?;
    let shifted = t.add_s(per_lm, TRE_EPS)?;
    let dist = t.pow_s(shifted, 0.5)?;
    t.mean(dist)
}

/// Similarity-plus-regularity objective on a warped pair:
/// `sim(fixed, moving w d) + lambda * diffusion(d)`.
pub fn objective(
    t: &mut Tape,
    fixed: TVal,
    moving: TVal,
    disp: TVal,
    cfg: &LossConfig,
) -> Result<TVal> {
    let warped = t.warp(moving, disp)?;
    let sim = match cfg.similarity {
        Similarity::Mse => mse(t, fixed, warped)?,
        Similarity::Ncc => ncc_loss(t, fixed, warped, cfg.ncc_window)?,
        Similarity::Mi => mi_loss(t, fixed, warped, cfg.mi_bins, cfg.mi_sigma)?,
        Similarity::Cr => cr_loss(t, fixed, warped, cfg.cr_bins, cfg.cr_sigma)?,
        Similarity::Dice => soft_dice_loss(t, fixed, warped)?,
    };
    if cfg.lambda == 0.0 {
        return Ok(sim);
    }
    let reg = diffusion_reg(t, disp)?;
    let weighted = t.mul_s(reg, cfg.lambda)?;
    t.add(sim, weighted)
}

/// The objective evaluated on surrogate grids in place of the model inputs.
/// The displacement still comes from whatever the model saw; only the loss
/// domain changes. With surrogates equal to the inputs this *is*
/// [`objective`], so the two agree bit for bit in that case.
pub fn surrogate_objective(
    t: &mut Tape,
    surrogate_fixed: TVal,
    surrogate_moving: TVal,
    disp: TVal,
    cfg: &LossConfig,
) -> Result<TVal> {
    objective(t, surrogate_fixed, surrogate_moving, disp, cfg)
}
