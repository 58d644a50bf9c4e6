//! Synthetic data: labeled phantoms, smooth random deformations with exact
//! inverses, multiplicative artifact fields, and an intensity transfer that
//! fakes a second modality.
//!
//! Every generator takes an explicit seed and is deterministic for it.
//! Stage seeds are derived per stream, so a retry in one stage never shifts
//! the draws of another.

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::metrics::ndv;
use crate::model::derive_seed;
use crate::warp::{sample_tap, warp_image, Interp};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Background {
    /// Uniform low intensity.
    Flat,
    /// Structured clutter of the given contrast around mid-gray. In pairs
    /// it is stamped at the *same* absolute positions on both sides, so it
    /// never follows the deformation.
    Texture { amplitude: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub h: usize,
    pub w: usize,
    /// Foreground labels 1..=num_labels, one elliptical blob each.
    pub num_labels: usize,
    pub noise_std: f64,
    /// Gaussian blur of the intensity image (labels stay crisp). Soft
    /// edges give the image a continuous intensity range, which is what
    /// makes a non-monotone modality transfer locally nonlinear; 0
    /// disables it.
    pub smooth_sigma: f64,
    /// Amplitude of a smooth anatomical intensity variation added within
    /// the image before blurring. It is part of the phantom, so both
    /// sides of a pair share it; where it carries a tissue across a fold
    /// of the modality transfer, the transferred image grows contours
    /// that do not exist in the original. 0 disables it.
    pub modulation: f64,
    pub background: Background,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            h: 32,
            w: 32,
            num_labels: 3,
            noise_std: 0.02,
            smooth_sigma: 0.7,
            modulation: 0.2,
            background: Background::Flat,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeformSpec {
    /// Maximum displacement norm in pixels after rescaling.
    pub amplitude: f64,
    /// Gaussian smoothing std of the underlying noise, in pixels.
    pub sigma: f64,
    pub max_tries: usize,
}

impl Default for DeformSpec {
    fn default() -> Self {
        DeformSpec { amplitude: 2.5, sigma: 2.0, max_tries: 10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiasSpec {
    /// Total log-amplitude: the sum of |coefficient| over components, so
    /// the field stays within exp(+-amplitude) at unit scale.
    pub amplitude: f64,
    /// Frequencies u, v are drawn from -max_freq..=max_freq.
    pub max_freq: i32,
    pub components: usize,
}

impl Default for BiasSpec {
    fn default() -> Self {
        BiasSpec { amplitude: 0.4, max_freq: 2, components: 6 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairSpec {
    pub phantom: PhantomSpec,
    pub deform: DeformSpec,
    /// Multiplicative artifact on both sides, drawn independently.
    pub bias: Option<BiasSpec>,
    /// Exponent applied to the stored unit-scale artifact fields. 0 keeps
    /// the images bit-identical to their clean versions.
    pub bias_scale: f64,
    /// Push the moving side through the intensity transfer.
    pub moving_modality: bool,
    /// Fraction of the transferred side remapped through the mirrored
    /// transfer instead, in spatially coherent patches independent of the
    /// anatomy. One source intensity then maps to two possible target
    /// intensities, so the cross-modal relation is statistically dependent
    /// but not a function: a conditional-variance loss keeps an irreducible
    /// floor while a joint-histogram loss still sees two sharp ridges.
    /// Inert unless `moving_modality` is set.
    pub transfer_mix: f64,
}

impl Default for PairSpec {
    fn default() -> Self {
        PairSpec {
            phantom: PhantomSpec::default(),
            deform: DeformSpec::default(),
            bias: None,
            bias_scale: 0.0,
            moving_modality: false,
            transfer_mix: 0.35,
        }
    }
}

/// One observed side of a pair. `image` is what a model sees; `clean` is
/// the artifact-free, untransferred observation of the same content and is
/// the natural surrogate.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Grid,
    pub clean: Grid,
    pub labels: Grid,
    pub mask: Grid,
}

#[derive(Debug, Clone)]
pub struct Pair {
    pub fixed: Sample,
    pub moving: Sample,
    /// Field registering moving onto fixed: warp(moving, gt_disp) ~ fixed.
    pub gt_disp: Grid,
    pub fixed_landmarks: Vec<(f64, f64)>,
    pub moving_landmarks: Vec<(f64, f64)>,
    pub num_labels: usize,
}

fn clamp01(g: &mut Grid) {
    for v in g.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
}

/// Separable Gaussian blur; border taps are dropped and the kernel mass
/// renormalized, so constants are preserved exactly up to rounding.
pub fn gaussian_smooth(g: &Grid, sigma: f64) -> Grid {
    let (h, w, c) = g.shape();
    let r = (3.0 * sigma).ceil().max(1.0) as isize;
    let taps: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let mut mid = Grid::zeros(h, w, c);
    for y in 0..h as isize {
        for x in 0..w as isize {
            for ch in 0..c {
                let mut acc = 0.0;
                let mut mass = 0.0;
                for (k, t) in taps.iter().enumerate() {
                    let yy = y + k as isize - r;
                    if yy >= 0 && yy < h as isize {
                        acc += t * g.get(yy as usize, x as usize, ch);
                        mass += t;
                    }
                }
                mid.set(y as usize, x as usize, ch, acc / mass);
            }
        }
    }
    let mut out = Grid::zeros(h, w, c);
    for y in 0..h {
        for x in 0..w as isize {
            for ch in 0..c {
                let mut acc = 0.0;
                let mut mass = 0.0;
                for (k, t) in taps.iter().enumerate() {
                    let xx = x + k as isize - r;
                    if xx >= 0 && xx < w as isize {
                        acc += t * mid.get(y, xx as usize, ch);
                        mass += t;
                    }
                }
                out.set(y, x as usize, ch, acc / mass);
            }
        }
    }
    out
}

struct Phantom {
    base: Grid,
    labels: Grid,
    mask: Grid,
    landmarks: Vec<(f64, f64)>,
}

/// Dilation radius applied to the foreground union to form the ROI mask.
const MASK_DILATE: usize = 2;

fn label_intensity(label: usize, num_labels: usize) -> f64 {
    if num_labels <= 1 {
        0.65
    } else {
        0.35 + 0.6 * (label - 1) as f64 / (num_labels - 1) as f64
    }
}

fn make_phantom(spec: &PhantomSpec, seed: u64) -> Result<Phantom> {
    if spec.num_labels == 0 {
        return Err(Error::invalid("phantom", "at least one label is required"));
    }
    if spec.h < 16 || spec.w < 16 {
        return Err(Error::invalid("phantom", "phantoms smaller than 16x16 leave no room for blobs"));
    }
    let (h, w, k) = (spec.h, spec.w, spec.num_labels);
    let side = h.min(w) as f64;
    'attempt: for attempt in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 100 + attempt));
        let mut labels = Grid::zeros(h, w, 1);
        // Blob centers sit on a jittered ring so labels rarely occlude
        // each other; occlusion is caught by the emptiness check below.
        for l in 1..=k {
            let ang = std::f64::consts::TAU * (l - 1) as f64 / k as f64
                + rng.gen_range(-0.4..0.4);
            let ring = side * rng.gen_range(0.18..0.26);
            let cy = h as f64 / 2.0 + ring * ang.sin();
            let cx = w as f64 / 2.0 + ring * ang.cos();
            let ry = side * rng.gen_range(0.10..0.16);
            let rx = side * rng.gen_range(0.10..0.16);
            let th = rng.gen_range(0.0..std::f64::consts::PI);
            let (s, c) = th.sin_cos();
            for y in 0..h {
                for x in 0..w {
                    let dy = y as f64 - cy;
                    let dx = x as f64 - cx;
                    let u = dx * c + dy * s;
                    let v = -dx * s + dy * c;
                    if (u / rx).powi(2) + (v / ry).powi(2) <= 1.0 {
                        labels.set(y, x, 0, l as f64);
                    }
                }
            }
        }
        let mut counts = vec![0usize; k + 1];
        for &v in labels.data() {
            counts[v as usize] += 1;
        }
        // Every label needs enough pixels for a stable centroid and
        // boundary landmarks.
        if counts[1..].iter().any(|&c| c < 8) {
            continue 'attempt;
        }

        let mut base = Grid::zeros(h, w, 1);
        match spec.background {
            Background::Flat => {
                for v in base.data_mut() {
                    *v = 0.05;
                }
            }
            Background::Texture { amplitude } => {
                let mut noise = Grid::zeros(h, w, 1);
                for v in noise.data_mut() {
                    *v = rng.gen_range(0.0..1.0);
                }
                let smooth = gaussian_smooth(&noise, 1.2);
                let (lo, hi) = (smooth.min(), smooth.max());
                for (dst, &s) in base.data_mut().iter_mut().zip(smooth.data()) {
                    let t01 = (s - lo) / (hi - lo).max(1e-12);
                    *dst = 0.5 + amplitude * (2.0 * t01 - 1.0);
                }
            }
        }
        for y in 0..h {
            for x in 0..w {
                let l = labels.get(y, x, 0) as usize;
                if l > 0 {
                    base.set(y, x, 0, label_intensity(l, k));
                }
            }
        }
        clamp01(&mut base);
        if spec.modulation > 0.0 {
            let field = smooth_unit_field(h, w, 2.5, &mut rng);
            for (dst, &s) in base.data_mut().iter_mut().zip(field.data()) {
                *dst += spec.modulation * s;
            }
            clamp01(&mut base);
        }
        if spec.smooth_sigma > 0.0 {
            // Blur is a convex combination, so [0, 1] is preserved.
            base = gaussian_smooth(&base, spec.smooth_sigma);
        }

        // ROI: foreground union dilated by a Chebyshev radius.
        let mut mask = Grid::zeros(h, w, 1);
        for y in 0..h {
            for x in 0..w {
                'dilate: for dy in -(MASK_DILATE as isize)..=MASK_DILATE as isize {
                    for dx in -(MASK_DILATE as isize)..=MASK_DILATE as isize {
                        let (yy, xx) = (y as isize + dy, x as isize + dx);
                        if yy >= 0
                            && (yy as usize) < h
                            && xx >= 0
                            && (xx as usize) < w
                            && labels.get(yy as usize, xx as usize, 0) > 0.0
                        {
                            mask.set(y, x, 0, 1.0);
                            break 'dilate;
                        }
                    }
                }
            }
        }

        // Landmarks: per label, the centroid plus the four extreme pixels.
        let mut landmarks = Vec::new();
        for l in 1..=k {
            let lf = l as f64;
            let (mut sy, mut sx, mut n) = (0.0, 0.0, 0.0);
            let (mut top, mut bot) = ((h, 0usize), (0usize, 0usize));
            let (mut left, mut right) = ((0usize, w), (0usize, 0usize));
            for y in 0..h {
                for x in 0..w {
                    if labels.get(y, x, 0) == lf {
                        sy += y as f64;
                        sx += x as f64;
                        n += 1.0;
                        if y < top.0 {
                            top = (y, x);
                        }
                        if y >= bot.0 {
                            bot = (y, x);
                        }
                        if x < left.1 {
                            left = (y, x);
                        }
                        if x >= right.1 {
                            right = (y, x);
                        }
                    }
                }
            }
            landmarks.push((sy / n, sx / n));
            for (y, x) in [top, bot, left, right] {
                landmarks.push((y as f64, x as f64));
            }
        }
        return Ok(Phantom { base, labels, mask, landmarks });
    }
    Err(Error::domain("phantom", "could not place non-occluded blobs in 20 attempts"))
}

/// Smooth random displacement with no folded triangles: smoothed white
/// noise, rescaled so the largest vector norm is exactly `amplitude`.
/// Draws again (bounded) if the fold check fails.
pub fn random_deformation(h: usize, w: usize, spec: &DeformSpec, seed: u64) -> Result<Grid> {
    if spec.amplitude < 0.0 {
        return Err(Error::invalid("deformation", "negative amplitude"));
    }
    for attempt in 0..spec.max_tries.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 200 + attempt as u64));
        let mut noise = Grid::zeros(h, w, 2);
        for v in noise.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let smooth = gaussian_smooth(&noise, spec.sigma);
        let mut max_norm: f64 = 0.0;
        for y in 0..h {
            for x in 0..w {
                let dy = smooth.get(y, x, 0);
                let dx = smooth.get(y, x, 1);
                max_norm = max_norm.max((dy * dy + dx * dx).sqrt());
            }
        }
        if max_norm == 0.0 {
            return Ok(smooth);
        }
        let field = smooth.map(|v| v * spec.amplitude / max_norm);
        if spec.amplitude == 0.0 || ndv(&field)? == 0.0 {
            return Ok(field);
        }
    }
    Err(Error::domain(
        "deformation",
        format!("no fold-free field of amplitude {} in {} tries", spec.amplitude, spec.max_tries),
    ))
}

fn sample_field(d: &Grid, y: f64, x: f64) -> (f64, f64) {
    let (h, w, _) = d.shape();
    let tap = sample_tap(h, w, y, x);
    (tap.gather(d, 0), tap.gather(d, 1))
}

const INVERT_ITERS: usize = 25;

/// Inverts the point q mapped by `phi(q) = q + d(q)` back from p, by the
/// fixed-point iteration q <- p - d(q).
fn invert_point(d: &Grid, p: (f64, f64)) -> (f64, f64) {
    let mut q = p;
    for _ in 0..INVERT_ITERS {
        let (dy, dx) = sample_field(d, q.0, q.1);
        q = (p.0 - dy, p.1 - dx);
    }
    q
}

/// Grid-sampled inverse of a displacement field: `inv(p) = q - p` with
/// `q + d(q) = p`. Accurate to the contraction tolerance for smooth,
/// fold-free fields.
pub fn invert_displacement(d: &Grid) -> Result<Grid> {
    let (h, w, c) = d.shape();
    if c != 2 {
        return Err(Error::shape("invert_displacement", "field must have 2 channels"));
    }
    let mut inv = Grid::zeros(h, w, 2);
    for y in 0..h {
        for x in 0..w {
            let q = invert_point(d, (y as f64, x as f64));
            inv.set(y, x, 0, q.0 - y as f64);
            inv.set(y, x, 1, q.1 - x as f64);
        }
    }
    Ok(inv)
}

/// Unit-scale multiplicative artifact field: exp of a low-frequency cosine
/// mixture whose |coefficients| sum to `amplitude`.
pub fn bias_field(h: usize, w: usize, spec: &BiasSpec, seed: u64) -> Result<Grid> {
    if spec.components == 0 || spec.max_freq < 1 {
        return Err(Error::invalid("bias_field", "need at least one component and frequency"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut comps = Vec::with_capacity(spec.components);
    let mut total = 0.0;
    for _ in 0..spec.components {
        let mut u = 0i32;
        let mut v = 0i32;
        while u == 0 && v == 0 {
            u = rng.gen_range(-spec.max_freq..=spec.max_freq);
            v = rng.gen_range(-spec.max_freq..=spec.max_freq);
        }
        let a: f64 = rng.gen_range(0.2..1.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        total += a.abs();
        comps.push((u, v, a, phase));
    }
    let mut g = Grid::zeros(h, w, 1);
    for y in 0..h {
        for x in 0..w {
            let mut log_b = 0.0;
            for &(u, v, a, phase) in &comps {
                let arg = std::f64::consts::TAU
                    * (u as f64 * y as f64 / h as f64 + v as f64 * x as f64 / w as f64)
                    + phase;
                log_b += a * spec.amplitude / total * arg.cos();
            }
            g.set(y, x, 0, log_b.exp());
        }
    }
    Ok(g)
}

/// `img * field^scale`, elementwise. Scale 0 returns the image bits
/// unchanged.
pub fn apply_bias(img: &Grid, field: &Grid, scale: f64) -> Result<Grid> {
    if img.shape() != field.shape() {
        return Err(Error::shape(
            "apply_bias",
            format!("{:?} vs {:?}", img.shape(), field.shape()),
        ));
    }
    Ok(Grid::from_vec(
        img.h(),
        img.w(),
        img.c(),
        img.data()
            .iter()
            .zip(field.data())
            .map(|(&i, &b)| i * b.powf(scale))
            .collect(),
    )
    .expect("shape preserved"))
}

/// Control points of the fake second modality: piecewise linear with five
/// slope sign changes, so intensity order is destroyed many times over
/// while the value mapping stays functional. Combined with the phantom's
/// smooth intensity modulation, the folds turn iso-intensity lines of the
/// original into visible contours of the transferred image.
const TRANSFER: [(f64, f64); 7] = [
    (0.0, 0.85),
    (0.15, 0.95),
    (0.3, 0.15),
    (0.5, 0.75),
    (0.7, 0.05),
    (0.85, 0.65),
    (1.0, 0.25),
];

pub fn modality_transfer(img: &Grid) -> Grid {
    img.map(|v| {
        let v = v.clamp(0.0, 1.0);
        let mut out = TRANSFER[TRANSFER.len() - 1].1;
        for i in 0..TRANSFER.len() - 1 {
            let (x0, y0) = TRANSFER[i];
            let (x1, y1) = TRANSFER[i + 1];
            if v <= x1 {
                out = y0 + (y1 - y0) * (v - x0) / (x1 - x0);
                break;
            }
        }
        out
    })
}

/// Smooth random field normalized to peak magnitude 1 (values in [-1, 1]).
/// `sigma` sets the patch scale in pixels.
fn smooth_unit_field(h: usize, w: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Grid {
    let mut field = Grid::zeros(h, w, 1);
    for v in field.data_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    let mut field = gaussian_smooth(&field, sigma);
    let peak = field.data().iter().fold(0.0f64, |m, &v| m.max(v.abs())).max(1e-12);
    for v in field.data_mut() {
        *v /= peak;
    }
    field
}

fn add_noise(g: &Grid, std: f64, rng: &mut ChaCha8Rng) -> Grid {
    if std == 0.0 {
        return g.clone();
    }
    let dist = Normal::new(0.0, std).expect("positive std");
    let mut out = g.clone();
    for v in out.data_mut() {
        *v += dist.sample(rng);
    }
    clamp01(&mut out);
    out
}

/// Builds one registration pair. The moving side is the phantom pushed
/// through a random deformation; the ground-truth field is that
/// deformation's inverse, which registers moving back onto fixed. Noise is
/// drawn independently per side after warping, and the clutter background
/// (when present) is stamped at fixed positions on both sides.
pub fn make_pair(spec: &PairSpec, seed: u64) -> Result<Pair> {
    let ph = make_phantom(&spec.phantom, derive_seed(seed, 1))?;
    let (h, w) = (spec.phantom.h, spec.phantom.w);
    let deform = random_deformation(h, w, &spec.deform, derive_seed(seed, 2))?;
    let gt_disp = invert_displacement(&deform)?;

    let moving_labels = warp_image(&ph.labels, &deform, Interp::Nearest)?;
    let moving_mask = warp_image(&ph.mask, &deform, Interp::Nearest)?;
    let mut moving_base = warp_image(&ph.base, &deform, Interp::Bilinear)?;
    if let Background::Texture { .. } = spec.phantom.background {
        // Clutter does not follow the anatomy: re-stamp the unwarped
        // background values wherever the warped labels are background.
        for y in 0..h {
            for x in 0..w {
                if moving_labels.get(y, x, 0) == 0.0 {
                    moving_base.set(y, x, 0, ph.base.get(y, x, 0));
                }
            }
        }
    }

    let moving_landmarks: Vec<(f64, f64)> =
        ph.landmarks.iter().map(|&p| invert_point(&deform, p)).collect();

    let mut noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 4));
    let fixed_clean = add_noise(&ph.base, spec.phantom.noise_std, &mut noise_rng);
    let moving_input_base = if spec.moving_modality {
        let mut b = modality_transfer(&moving_base);
        if spec.transfer_mix > 0.0 {
            let mut mix_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 7));
            // Patch scale sits above the similarity-window radius on
            // purpose: windowed statistics shrug off fine-grained mixing
            // (every window sees the same mixture), but patches that cover
            // whole windows hand those windows a coherently different
            // intensity relation.
            let field = smooth_unit_field(h, w, 4.0, &mut mix_rng);
            // Threshold at an order statistic so the subtype area fraction
            // is exact, not approximate.
            let n = field.data().len();
            let k = ((1.0 - spec.transfer_mix.min(1.0)) * n as f64).round() as usize;
            if k < n {
                let mut sorted: Vec<f64> = field.data().to_vec();
                sorted.sort_by(|x, y| x.partial_cmp(y).unwrap());
                let thr = sorted[k];
                let mut flipped = moving_base.clone();
                for v in flipped.data_mut() {
                    *v = 1.0 - *v;
                }
                let alt = modality_transfer(&flipped);
                for (i, &s) in field.data().iter().enumerate() {
                    if s >= thr {
                        b.data_mut()[i] = alt.data()[i];
                    }
                }
            }
        }
        b
    } else {
        moving_base.clone()
    };
    let moving_image_clean = add_noise(&moving_input_base, spec.phantom.noise_std, &mut noise_rng);
    // The surrogate observation of the moving side: same content, original
    // intensity mapping, independently drawn noise.
    let moving_clean = if spec.moving_modality {
        add_noise(&moving_base, spec.phantom.noise_std, &mut noise_rng)
    } else {
        moving_image_clean.clone()
    };

    let (fixed_image, moving_image) = match &spec.bias {
        None => (fixed_clean.clone(), moving_image_clean.clone()),
        Some(bs) => {
            let bf = bias_field(h, w, bs, derive_seed(seed, 5))?;
            let bm = bias_field(h, w, bs, derive_seed(seed, 6))?;
            (
                apply_bias(&fixed_clean, &bf, spec.bias_scale)?,
                apply_bias(&moving_image_clean, &bm, spec.bias_scale)?,
            )
        }
    };

    Ok(Pair {
        fixed: Sample {
            image: fixed_image,
            clean: fixed_clean,
            labels: ph.labels,
            mask: ph.mask,
        },
        moving: Sample {
            image: moving_image,
            clean: moving_clean,
            labels: moving_labels,
            mask: moving_mask,
        },
        gt_disp,
        fixed_landmarks: ph.landmarks,
        moving_landmarks,
        num_labels: spec.phantom.num_labels,
    })
}

/// Deterministic dataset: pair i is built from a seed derived for stream i.
pub fn make_dataset(spec: &PairSpec, n: usize, seed: u64) -> Result<Vec<Pair>> {
    (0..n).map(|i| make_pair(spec, derive_seed(seed, 1000 + i as u64))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{mean_tre, ndv};

    #[test]
    fn phantom_is_deterministic_and_seed_sensitive() {
        let spec = PhantomSpec::default();
        let a = make_phantom(&spec, 9).unwrap();
        let b = make_phantom(&spec, 9).unwrap();
        let c = make_phantom(&spec, 10).unwrap();
        assert_eq!(a.base.data(), b.base.data());
        assert_eq!(a.labels.data(), b.labels.data());
        assert_ne!(a.base.data(), c.base.data());
    }

    #[test]
    fn phantom_has_all_labels_and_dilated_mask() {
        let spec = PhantomSpec::default();
        let p = make_phantom(&spec, 3).unwrap();
        let mut counts = vec![0usize; spec.num_labels + 1];
        for &v in p.labels.data() {
            counts[v as usize] += 1;
        }
        assert!(counts[1..].iter().all(|&c| c >= 8));
        let (h, w) = (spec.h, spec.w);
        for y in 0..h {
            for x in 0..w {
                let mut near_fg = false;
                for dy in -2i32..=2 {
                    for dx in -2i32..=2 {
                        let (yy, xx) = (y as i32 + dy, x as i32 + dx);
                        if yy >= 0 && yy < h as i32 && xx >= 0 && xx < w as i32 {
                            near_fg |= p.labels.get(yy as usize, xx as usize, 0) > 0.0;
                        }
                    }
                }
                assert_eq!(p.mask.get(y, x, 0) == 1.0, near_fg, "mask mismatch at {},{}", y, x);
            }
        }
    }

    #[test]
    fn phantom_landmarks_sit_inside_the_mask() {
        let p = make_phantom(&PhantomSpec::default(), 4).unwrap();
        assert!(p.landmarks.len() >= 8);
        for &(y, x) in &p.landmarks {
            assert!(y >= 0.0 && x >= 0.0 && y < 32.0 && x < 32.0);
            assert_eq!(p.mask.get(y.round() as usize, x.round() as usize, 0), 1.0);
        }
    }

    #[test]
    fn deformation_honors_amplitude_and_never_folds() {
        let spec = DeformSpec { amplitude: 2.5, sigma: 2.0, max_tries: 10 };
        for seed in 0..5 {
            let d = random_deformation(32, 32, &spec, seed).unwrap();
            let mut max_norm: f64 = 0.0;
            for y in 0..32 {
                for x in 0..32 {
                    let (dy, dx) = (d.get(y, x, 0), d.get(y, x, 1));
                    max_norm = max_norm.max((dy * dy + dx * dx).sqrt());
                }
            }
            assert!((max_norm - 2.5).abs() < 1e-9);
            assert_eq!(ndv(&d).unwrap(), 0.0);
        }
    }

    #[test]
    fn zero_amplitude_deformation_is_identity() {
        let spec = DeformSpec { amplitude: 0.0, sigma: 2.0, max_tries: 3 };
        let d = random_deformation(16, 16, &spec, 0).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn inverse_field_undoes_the_forward_map() {
        let spec = DeformSpec { amplitude: 2.5, sigma: 2.0, max_tries: 10 };
        let d = random_deformation(32, 32, &spec, 11).unwrap();
        let inv = invert_displacement(&d).unwrap();
        // phi(psi(p)) = p: inv(p) + d(p + inv(p)) must vanish away from
        // the border, where clamping distorts sampling.
        let mut worst: f64 = 0.0;
        for y in 4..28 {
            for x in 4..28 {
                let (iy, ix) = (inv.get(y, x, 0), inv.get(y, x, 1));
                let (dy, dx) = sample_field(&d, y as f64 + iy, x as f64 + ix);
                worst = worst.max(((iy + dy).powi(2) + (ix + dx).powi(2)).sqrt());
            }
        }
        assert!(worst < 0.05, "inversion residual {}", worst);
    }

    #[test]
    fn ground_truth_field_scores_subpixel_tre() {
        let spec = PairSpec::default();
        for seed in 0..3 {
            let pair = make_pair(&spec, seed).unwrap();
            let e = mean_tre(
                &pair.gt_disp,
                &pair.fixed_landmarks,
                &pair.moving_landmarks,
                (1.0, 1.0),
            )
            .unwrap();
            assert!(e < 0.5, "seed {}: TRE {}", seed, e);
        }
    }

    #[test]
    fn pair_labels_stay_integral_and_sides_get_independent_noise() {
        let pair = make_pair(&PairSpec::default(), 21).unwrap();
        assert!(pair.moving.labels.data().iter().all(|&v| v.fract() == 0.0));
        assert!(pair.moving.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
        assert_ne!(pair.fixed.image.data(), pair.moving.image.data());
        // Without artifacts the observed image is the clean observation.
        assert_eq!(pair.fixed.image.data(), pair.fixed.clean.data());
    }

    #[test]
    fn bias_scale_zero_is_bitwise_clean_and_correction_divides_out() {
        let spec = PairSpec { bias: Some(BiasSpec::default()), bias_scale: 0.0, ..Default::default() };
        let p0 = make_pair(&spec, 33).unwrap();
        assert_eq!(p0.fixed.image.data(), p0.fixed.clean.data());
        assert_eq!(p0.moving.image.data(), p0.moving.clean.data());

        let spec2 = PairSpec { bias_scale: 2.0, ..spec };
        let p2 = make_pair(&spec2, 33).unwrap();
        // Same seed, same streams: clean content identical across scales.
        assert_eq!(p0.fixed.clean.data(), p2.fixed.clean.data());
        assert_ne!(p2.fixed.image.data(), p2.fixed.clean.data());
        let bf = bias_field(32, 32, &BiasSpec::default(), derive_seed(33, 5)).unwrap();
        for ((&img, &clean), &b) in
            p2.fixed.image.data().iter().zip(p2.fixed.clean.data()).zip(bf.data())
        {
            assert!((img / b.powf(2.0) - clean).abs() < 1e-12);
        }
    }

    #[test]
    fn bias_field_is_positive_and_bounded_by_amplitude() {
        let spec = BiasSpec { amplitude: 0.4, max_freq: 2, components: 6 };
        let b = bias_field(32, 32, &spec, 7).unwrap();
        for &v in b.data() {
            assert!(v > 0.0);
            assert!(v.ln().abs() <= 0.4 + 1e-12);
        }
    }

    #[test]
    fn modality_transfer_hits_control_points_and_is_non_monotone() {
        let xs: Vec<f64> = TRANSFER.iter().map(|&(x, _)| x).collect();
        let g = Grid::from_vec(1, xs.len(), 1, xs).unwrap();
        let t = modality_transfer(&g);
        for (i, &(_, y)) in TRANSFER.iter().enumerate() {
            assert!((t.get(0, i, 0) - y).abs() < 1e-12);
        }
        // Slope sign flips at every interior control point.
        for i in 1..TRANSFER.len() - 1 {
            let before = t.get(0, i, 0) - t.get(0, i - 1, 0);
            let after = t.get(0, i + 1, 0) - t.get(0, i, 0);
            assert!(before * after < 0.0, "no fold at control point {}", i);
        }
    }

    #[test]
    fn multimodal_pair_keeps_an_untransferred_surrogate() {
        let spec = PairSpec {
            phantom: PhantomSpec { noise_std: 0.0, ..Default::default() },
            moving_modality: true,
            transfer_mix: 0.0,
            ..Default::default()
        };
        let pair = make_pair(&spec, 44).unwrap();
        assert_ne!(pair.moving.image.data(), pair.moving.clean.data());
        // With zero noise and mix, the surrogate is exactly the warped
        // phantom and the image is exactly its transfer.
        let again = modality_transfer(&pair.moving.clean);
        for (&a, &b) in again.data().iter().zip(pair.moving.image.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn transfer_mix_remaps_an_exact_fraction_through_the_mirror() {
        let base = PairSpec {
            phantom: PhantomSpec { noise_std: 0.0, ..Default::default() },
            moving_modality: true,
            transfer_mix: 0.0,
            ..Default::default()
        };
        let mixed = PairSpec { transfer_mix: 0.35, ..base.clone() };
        let p0 = make_pair(&base, 44).unwrap();
        let p1 = make_pair(&mixed, 44).unwrap();
        assert_eq!(p0.moving.clean.data(), p1.moving.clean.data());
        assert_eq!(p0.fixed.image.data(), p1.fixed.image.data());
        assert_eq!(p0.moving.labels.data(), p1.moving.labels.data());

        // Every pixel is either the primary transfer of the surrogate or
        // the mirrored one, and the subtype count is exact.
        let n = p1.moving.image.data().len();
        let expect_alt = n - ((1.0 - 0.35) * n as f64).round() as usize;
        let mut flipped = p1.moving.clean.clone();
        for v in flipped.data_mut() {
            *v = 1.0 - *v;
        }
        let alt = modality_transfer(&flipped);
        let mut n_alt = 0;
        for ((&got, &pri), &sec) in
            p1.moving.image.data().iter().zip(p0.moving.image.data()).zip(alt.data())
        {
            if (got - pri).abs() < 1e-12 {
                continue;
            }
            assert!((got - sec).abs() < 1e-12, "pixel from neither transfer");
            n_alt += 1;
        }
        // Pixels where both transfers agree count toward the primary
        // branch, so the exact subtype count is only a lower bound here.
        assert!(n_alt > 0 && n_alt <= expect_alt, "{} of {}", n_alt, expect_alt);

        // Off the transferred path the knob is inert.
        let mono = PairSpec { moving_modality: false, ..base };
        let mono_m = PairSpec { transfer_mix: 0.35, ..mono.clone() };
        let q0 = make_pair(&mono, 44).unwrap();
        let q1 = make_pair(&mono_m, 44).unwrap();
        assert_eq!(q0.moving.image.data(), q1.moving.image.data());
    }

    #[test]
    fn clutter_background_stays_put_on_both_sides() {
        let spec = PairSpec {
            phantom: PhantomSpec {
                noise_std: 0.0,
                background: Background::Texture { amplitude: 0.4 },
                ..Default::default()
            },
            ..Default::default()
        };
        let pair = make_pair(&spec, 55).unwrap();
        let mut checked = 0;
        for y in 0..32 {
            for x in 0..32 {
                if pair.fixed.labels.get(y, x, 0) == 0.0 && pair.moving.labels.get(y, x, 0) == 0.0 {
                    assert_eq!(
                        pair.fixed.image.get(y, x, 0),
                        pair.moving.image.get(y, x, 0),
                        "background moved at {},{}",
                        y,
                        x
                    );
                    checked += 1;
                }
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn dataset_is_reproducible() {
        let spec = PairSpec::default();
        let a = make_dataset(&spec, 3, 77).unwrap();
        let b = make_dataset(&spec, 3, 77).unwrap();
        for (pa, pb) in a.iter().zip(&b) {
            assert_eq!(pa.fixed.image.data(), pb.fixed.image.data());
            assert_eq!(pa.gt_disp.data(), pb.gt_disp.data());
            assert_eq!(pa.moving_landmarks, pb.moving_landmarks);
        }
        assert_ne!(a[0].fixed.image.data(), a[1].fixed.image.data());
    }
}
