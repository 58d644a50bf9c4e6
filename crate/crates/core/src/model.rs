//! Displacement models: a small convolutional encoder-decoder that maps an
//! image pair to a field, and a free-field fallback that optimizes the
//! displacement grid directly.
//!
//! The network's final convolution is zero-initialized, so a fresh model
//! outputs the identity displacement regardless of its input. Training
//! therefore starts from "no deformation" rather than from noise.

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::losses::{objective, LossConfig};
use crate::optim::{AdamConfig, Param};
use crate::tape::{TVal, Tape};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

#[derive(Debug, Clone, PartialEq)]
pub struct ArchConfig {
    /// Number of stride-2 encoder levels; input sides must be divisible by
    /// 2^levels so decoder upsampling re-reaches every skip resolution.
    pub levels: usize,
    /// Channel width per level, `widths.len() == levels`.
    pub widths: Vec<usize>,
    pub leaky_slope: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig { levels: 2, widths: vec![16, 32], leaky_slope: 0.2 }
    }
}

const KERNEL: usize = 3;

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::invalid("arch", "at least one level is required"));
        }
        if self.widths.len() != self.levels {
            return Err(Error::invalid(
                "arch",
                format!("{} widths for {} levels", self.widths.len(), self.levels),
            ));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::invalid("arch", "zero-width level"));
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return Err(Error::invalid("arch", "leaky slope must be in [0, 1)"));
        }
        Ok(())
    }

    /// Parameter tensors in forward order: name, (cin, cout) of the conv.
    /// Kernels are stored as (3, 3, cin*cout) grids, biases as (1, 1, cout).
    fn conv_specs(&self) -> Vec<(String, usize, usize)> {
        let mut specs = Vec::new();
        let w = &self.widths;
        specs.push(("stem".into(), 2, w[0]));
        let mut prev = w[0];
        for (i, &wi) in w.iter().enumerate() {
            specs.push((format!("down{}", i), prev, wi));
            specs.push((format!("mix{}", i), wi, wi));
            prev = wi;
        }
        specs.push(("bottleneck".into(), prev, prev));
        // Decoder: upsample, concat the skip from the level above, conv
        // back down to that level's width.
        for i in (0..self.levels).rev() {
            let skip = if i == 0 { w[0] } else { w[i - 1] };
            specs.push((format!("dec{}", i), prev + skip, skip));
            prev = skip;
        }
        specs.push(("final".into(), prev, 2));
        specs
    }

    /// Flat (name, shape) list covering kernels and biases.
    pub fn param_specs(&self) -> Vec<(String, (usize, usize, usize))> {
        let mut out = Vec::new();
        for (name, cin, cout) in self.conv_specs() {
            out.push((format!("{}.w", name), (KERNEL, KERNEL, cin * cout)));
            out.push((format!("{}.b", name), (1, 1, cout)));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_specs().iter().map(|(_, (h, w, c))| h * w * c).sum()
    }
}

pub struct RegNet {
    pub arch: ArchConfig,
    names: Vec<String>,
    pub params: Vec<Param>,
}

/// One splitmix64 round over a stream-salted seed, giving decorrelated
/// per-tensor and per-worker seeds from one run seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Builds a fresh network. Kernels get scaled He-normal weights (gain
/// matched to the leaky slope, fan-in from the kernel), biases start at
/// zero, and the final conv is zeroed entirely so the initial output is
/// the identity displacement.
pub fn regnet_init(arch: &ArchConfig, seed: u64) -> Result<RegNet> {
    arch.validate()?;
    let gain2 = 2.0 / (1.0 + arch.leaky_slope * arch.leaky_slope);
    let mut names = Vec::new();
    let mut params = Vec::new();
    for (idx, (name, cin, cout)) in arch.conv_specs().into_iter().enumerate() {
        let fan_in = (KERNEL * KERNEL * cin) as f64;
        let std = (gain2 / fan_in).sqrt();
        let mut kernel = Grid::zeros(KERNEL, KERNEL, cin * cout);
        if name != "final" {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, idx as u64));
            let dist = Normal::new(0.0, std).expect("positive std");
            for v in kernel.data_mut() {
                *v = dist.sample(&mut rng);
            }
        }
        names.push(format!("{}.w", name));
        params.push(Param::new(kernel));
        names.push(format!("{}.b", name));
        params.push(Param::new(Grid::zeros(1, 1, cout)));
    }
    Ok(RegNet { arch: arch.clone(), names, params })
}

impl RegNet {
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn named_params(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.names.iter().map(|s| s.as_str()).zip(self.params.iter())
    }

    /// Rebuilds a network from stored tensors; names and shapes must match
    /// the architecture's spec exactly and in order.
    pub fn from_parts(arch: &ArchConfig, parts: Vec<(String, Grid)>) -> Result<RegNet> {
        arch.validate()?;
        let specs = arch.param_specs();
        if parts.len() != specs.len() {
            return Err(Error::invalid(
                "regnet",
                format!("{} tensors stored, {} expected", parts.len(), specs.len()),
            ));
        }
        let mut names = Vec::new();
        let mut params = Vec::new();
        for ((name, grid), (want_name, want_shape)) in parts.into_iter().zip(specs) {
            if name != want_name || grid.shape() != want_shape {
                return Err(Error::invalid(
                    "regnet",
                    format!("tensor {} {:?} does not match {} {:?}", name, grid.shape(), want_name, want_shape),
                ));
            }
            names.push(name);
            params.push(Param::new(grid));
        }
        Ok(RegNet { arch: arch.clone(), names, params })
    }

    /// Records the parameters on the tape and runs the network. Returns the
    /// displacement node and the parameter nodes in [`RegNet::params`]
    /// order, for gradient extraction after `backward`.
    pub fn forward(&self, t: &mut Tape, fixed: TVal, moving: TVal) -> Result<(TVal, Vec<TVal>)> {
        let nodes: Vec<TVal> = self
            .params
            .iter()
            .map(|p| t.input(p.value.clone()))
            .collect::<Result<_>>()?;
        let disp = regnet_forward_with(t, &self.arch, &nodes, fixed, moving)?;
        Ok((disp, nodes))
    }
}

/// Divides by the grid's own 99th-percentile intensity, as a constant (no
/// gradient flows into the divisor). Keeps heterogeneous intensity scales
/// comparable without letting the normalizer fight the loss.
fn normalize_input(t: &mut Tape, x: TVal) -> Result<TVal> {
    let q = t.value(x).quantile(0.99);
    let scale = if q.abs() > 1e-12 { 1.0 / q } else { 1.0 };
    t.mul_s(x, scale)
}

/// The network as a pure function of parameter nodes, shared by training,
/// checkpoint evaluation, and gradient checking.
pub fn regnet_forward_with(
    t: &mut Tape,
    arch: &ArchConfig,
    param_nodes: &[TVal],
    fixed: TVal,
    moving: TVal,
) -> Result<TVal> {
    arch.validate()?;
    let specs = arch.conv_specs();
    if param_nodes.len() != 2 * specs.len() {
        return Err(Error::invalid(
            "regnet",
            format!("{} param nodes, {} expected", param_nodes.len(), 2 * specs.len()),
        ));
    }
    let (h, w, cf) = t.value(fixed).shape();
    let (hm, wm, cm) = t.value(moving).shape();
    if cf != 1 || cm != 1 || (h, w) != (hm, wm) {
        return Err(Error::shape("regnet", "inputs must be matching single-channel grids"));
    }
    let div = 1usize << arch.levels;
    if h % div != 0 || w % div != 0 {
        return Err(Error::invalid(
            "regnet",
            format!("{}x{} input not divisible by 2^{}", h, w, arch.levels),
        ));
    }

    let slope = arch.leaky_slope;
    let mut conv_idx = 0usize;
    let mut conv = |t: &mut Tape, x: TVal, stride: usize, activate: bool| -> Result<TVal> {
        let k = param_nodes[2 * conv_idx];
        let b = param_nodes[2 * conv_idx + 1];
        conv_idx += 1;
        let y = t.conv2d(x, k, Some(b), stride)?;
        if activate {
            t.leaky_relu(y, slope)
        } else {
            Ok(y)
        }
    };

    let fixed_n = normalize_input(t, fixed)?;
    let moving_n = normalize_input(t, moving)?;
    let x0 = t.concat(fixed_n, moving_n)?;
    let mut cur = conv(t, x0, 1, true)?; // stem
    let mut skips = vec![cur];
    for i in 0..arch.levels {
        cur = conv(t, cur, 2, true)?; // down
        cur = conv(t, cur, 1, true)?; // mix
        if i + 1 < arch.levels {
            skips.push(cur);
        }
    }
    cur = conv(t, cur, 1, true)?; // bottleneck
    for skip in skips.into_iter().rev() {
        let up = t.upsample2x(cur)?;
        let cat = t.concat(up, skip)?;
        cur = conv(t, cat, 1, true)?;
    }
    conv(t, cur, 1, false) // final, linear
}

#[derive(Debug, Clone)]
pub struct FieldOptimConfig {
    pub loss: LossConfig,
    pub steps: usize,
    pub adam: AdamConfig,
}

impl Default for FieldOptimConfig {
    fn default() -> Self {
        FieldOptimConfig {
            loss: LossConfig::default(),
            steps: 300,
            adam: AdamConfig::with_lr(0.05),
        }
    }
}

/// Optimizes a free displacement field for one pair. Returns the field and
/// the per-step loss history. A non-finite loss aborts with `Diverged`.
pub fn field_optimize(fixed: &Grid, moving: &Grid, cfg: &FieldOptimConfig) -> Result<(Grid, Vec<f64>)> {
    let (h, w, c) = fixed.shape();
    if c != 1 || moving.shape() != (h, w, 1) {
        return Err(Error::shape("field_optimize", "inputs must be matching single-channel grids"));
    }
    let mut field = Param::new(Grid::zeros(h, w, 2));
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut t = Tape::new();
        let f = t.input(fixed.clone())?;
        let m = t.input(moving.clone())?;
        let d = t.input(field.value.clone())?;
        let loss = objective(&mut t, f, m, d, &cfg.loss)?;
        let lv = t.value(loss).scalar_value();
        if !lv.is_finite() {
            return Err(Error::Diverged { step, detail: format!("loss {}", lv) });
        }
        history.push(lv);
        t.backward(loss)?;
        let g = t
            .take_grad(d)
            .ok_or_else(|| Error::invalid("field_optimize", "loss does not reach the field"))?;
        field.adam_update(&g, &cfg.adam)?;
    }
    Ok((field.value, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::Similarity;
    use crate::metrics::mean_tre;
    use crate::warp::{warp_image, Interp};

    #[test]
    fn default_arch_stays_under_budget() {
        let arch = ArchConfig::default();
        assert!(arch.param_count() < 100_000, "{} params", arch.param_count());
        let net = regnet_init(&arch, 0).unwrap();
        assert_eq!(net.param_count(), arch.param_count());
    }

    #[test]
    fn tiny_arch_param_count_matches_hand_total() {
        let arch = ArchConfig { levels: 2, widths: vec![2, 3], leaky_slope: 0.2 };
        // stem 38, down0 38, mix0 38, down1 57, mix1 84, bottleneck 84,
        // dec1 92, dec0 74, final 38.
        assert_eq!(arch.param_count(), 543);
    }

    fn smooth_pair(h: usize, w: usize) -> (Grid, Grid) {
        let mut fixed = Grid::zeros(h, w, 1);
        for y in 0..h {
            for x in 0..w {
                let mut v = 0.0;
                for (cy, cx, s) in [(5.0, 5.0, 3.0), (10.0, 11.0, 2.5), (4.0, 12.0, 2.0)] {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    v += (-d2 / (2.0 * s * s)).exp();
                }
                fixed.set(y, x, 0, v);
            }
        }
        (fixed, Grid::zeros(h, w, 1))
    }

    #[test]
    fn fresh_network_outputs_identity_displacement() {
        let arch = ArchConfig { levels: 2, widths: vec![4, 8], leaky_slope: 0.2 };
        let net = regnet_init(&arch, 3).unwrap();
        let (fixed, _) = smooth_pair(16, 16);
        let moving = fixed.map(|v| 1.0 - v);
        let mut t = Tape::new();
        let f = t.input(fixed).unwrap();
        let m = t.input(moving).unwrap();
        let (d, _) = net.forward(&mut t, f, m).unwrap();
        assert_eq!(t.value(d).shape(), (16, 16, 2));
        assert!(t.value(d).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_is_seed_deterministic_and_seed_sensitive() {
        let arch = ArchConfig { levels: 1, widths: vec![4], leaky_slope: 0.2 };
        let a = regnet_init(&arch, 7).unwrap();
        let b = regnet_init(&arch, 7).unwrap();
        let c = regnet_init(&arch, 8).unwrap();
        for ((pa, pb), pc) in a.params.iter().zip(&b.params).zip(&c.params) {
            assert_eq!(pa.value.data(), pb.value.data());
            if pa.value.data().iter().any(|&v| v != 0.0) {
                assert_ne!(pa.value.data(), pc.value.data());
            }
        }
    }

    #[test]
    fn rejects_input_not_divisible_by_stride_product() {
        let arch = ArchConfig { levels: 2, widths: vec![2, 2], leaky_slope: 0.2 };
        let net = regnet_init(&arch, 0).unwrap();
        let mut t = Tape::new();
        let f = t.input(Grid::filled(10, 12, 1, 0.5)).unwrap();
        let m = t.input(Grid::filled(10, 12, 1, 0.5)).unwrap();
        assert!(net.forward(&mut t, f, m).is_err());
    }

    #[test]
    fn one_step_of_training_unlocks_gradients_everywhere() {
        // At init the final conv is zero, so every earlier tensor has an
        // exactly zero gradient; after one Adam step the final kernel is
        // nonzero and gradients reach the whole stack.
        let arch = ArchConfig { levels: 2, widths: vec![4, 6], leaky_slope: 0.2 };
        let mut net = regnet_init(&arch, 5).unwrap();
        let (fixed, _) = smooth_pair(16, 16);
        let moving = warp_image(&fixed, &crate::warp::uniform_displacement(16, 16, 1.0, 0.5), Interp::Bilinear).unwrap();
        let cfg = LossConfig::with_similarity(Similarity::Mse, 1.0);
        let adam = AdamConfig::with_lr(1e-3);

        let run = |net: &RegNet| -> Vec<Grid> {
            let mut t = Tape::new();
            let f = t.input(fixed.clone()).unwrap();
            let m = t.input(moving.clone()).unwrap();
            let (d, nodes) = net.forward(&mut t, f, m).unwrap();
            let loss = objective(&mut t, f, m, d, &cfg).unwrap();
            t.backward(loss).unwrap();
            nodes.iter().map(|&n| t.take_grad(n).unwrap()).collect()
        };

        let grads0 = run(&net);
        let final_w_idx = 2 * (net.names.len() / 2 - 1);
        for (i, g) in grads0.iter().enumerate() {
            if i == final_w_idx {
                assert!(g.data().iter().any(|&v| v != 0.0), "final kernel grad must be live");
            } else if i != final_w_idx + 1 {
                assert!(g.data().iter().all(|&v| v == 0.0), "tensor {} live before training", i);
            }
        }
        for (p, g) in net.params.iter_mut().zip(&grads0) {
            p.adam_update(g, &adam).unwrap();
        }
        let grads1 = run(&net);
        for (i, g) in grads1.iter().enumerate() {
            assert!(g.all_finite(), "tensor {} grad not finite", i);
            assert!(g.data().iter().any(|&v| v != 0.0), "tensor {} grad all zero", i);
        }
    }

    #[test]
    fn field_optimize_recovers_a_two_pixel_translation() {
        let (fixed, _) = smooth_pair(16, 16);
        // moving(p) = fixed(p + (0, 2)): the minimizer is d = (0, -2)...
        // warp(moving, d)(p) = moving(p + d) = fixed(p + d + (0, 2)).
        let moving = warp_image(&fixed, &crate::warp::uniform_displacement(16, 16, 0.0, 2.0), Interp::Bilinear).unwrap();
        let cfg = FieldOptimConfig {
            loss: LossConfig::with_similarity(Similarity::Mse, 1.0),
            steps: 300,
            adam: AdamConfig::with_lr(0.05),
        };
        let (field, history) = field_optimize(&fixed, &moving, &cfg).unwrap();
        assert!(history[history.len() - 1] < history[0]);
        // A feature at p in fixed sits at q = p - (0, 2) in moving.
        let fixed_pts: Vec<(f64, f64)> = vec![(5.0, 5.0), (10.0, 11.0), (4.0, 12.0), (8.0, 8.0)];
        let moving_pts: Vec<(f64, f64)> = fixed_pts.iter().map(|&(y, x)| (y, x - 2.0)).collect();
        let e = mean_tre(&field, &fixed_pts, &moving_pts, (1.0, 1.0)).unwrap();
        assert!(e < 0.5, "TRE {} px", e);
    }

    #[test]
    fn derive_seed_spreads_streams() {
        let s: Vec<u64> = (0..8).map(|i| derive_seed(42, i)).collect();
        for i in 0..8 {
            for j in i + 1..8 {
                assert_ne!(s[i], s[j]);
            }
        }
        assert_eq!(derive_seed(42, 3), derive_seed(42, 3));
        assert_ne!(derive_seed(42, 3), derive_seed(43, 3));
    }
}
