//! Reverse-mode automatic differentiation over [`Grid`] values.
//!
//! A [`Tape`] records one forward computation as a flat list of nodes, each
//! holding its operation and its already-computed value (define-by-run).
//! [`Tape::backward`] seeds a scalar root with gradient 1 and replays the
//! list in reverse, accumulating adjoints into lazily allocated buffers, so
//! nodes consumed by several downstream ops receive the sum of their
//! contributions. A tape is single-use: one forward build, one backward.
//!
//! Op coverage is exactly what the registration losses, the warp, and the
//! small conv net need. Fused ops (Parzen weights, joint-histogram mutual
//! information, diffusion energy) carry hand-derived adjoints; everything
//! else composes from elementwise, reduce, window-sum, conv, upsample,
//! concat, and warp nodes.

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::warp::sample_tap;

/// Handle to a node on a specific tape. Indices are tape-local.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TVal(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UnKind {
    Exp,
    Log,
    LeakyRelu(u64), // slope bits; kept as bits so the enum stays Copy + Eq
    PowS(u64),      // exponent bits
    AddS(u64),
    MulS(u64),
    SubFromS(u64), // s - a
}

/// How the second operand of a binary op lines up with the first.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    Scalar,   // b is 1x1x1
    PerChan,  // b is 1x1xC against HxWxC
    PerPixel, // b is HxWx1 against HxWxC
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Bin { kind: BinKind, a: usize, b: usize, bc: Bcast },
    Un { kind: UnKind, a: usize },
    ReduceSum { a: usize },
    ReduceMean { a: usize },
    ReduceMin { a: usize, arg: usize },
    ReduceMax { a: usize, arg: usize },
    SumPerChan { a: usize },
    ChanSum { a: usize },
    WindowSum { a: usize, k: usize },
    Conv { x: usize, kern: usize, bias: Option<usize>, stride: usize, cin: usize, cout: usize },
    Upsample2x { a: usize },
    Concat { a: usize, b: usize },
    Warp { img: usize, disp: usize },
    SampleDisp { disp: usize, pts: Vec<(f64, f64)> },
    Parzen { a: usize, bins: usize, sigma: f64 },
    OuterMean { wa: usize, wb: usize },
    MiJoint { j: usize },
    Diffusion { d: usize },
}

struct Node {
    op: Op,
    val: Grid,
}

pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Grid>>,
    backward_done: bool,
}

/// Joint-histogram entries at or below this are treated as empty: their MI
/// contribution is exactly 0 and no gradient flows through them.
const MI_TINY: f64 = 1e-300;

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new(), grads: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: TVal) -> &Grid {
        &self.nodes[v.0].val
    }

    /// Gradient of the backward root with respect to node `v`, if the node
    /// was reached by the reverse sweep.
    pub fn grad(&self, v: TVal) -> Option<&Grid> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take_grad(&mut self, v: TVal) -> Option<Grid> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    fn push(&mut self, opname: &'static str, op: Op, val: Grid) -> Result<TVal> {
        if !val.all_finite() {
            return Err(Error::non_finite(opname, format!("node {} value", self.nodes.len())));
        }
        self.nodes.push(Node { op, val });
        Ok(TVal(self.nodes.len() - 1))
    }

    /// Registers a grid as a leaf. Leaves receive gradients but have no
    /// parents; model parameters and loss inputs both enter this way.
    pub fn input(&mut self, g: Grid) -> Result<TVal> {
        self.push("Tape::input", Op::Leaf, g)
    }

    pub fn scalar(&mut self, v: f64) -> Result<TVal> {
        self.input(Grid::scalar(v))
    }

    // ---- elementwise -----------------------------------------------------

    fn bcast_of(a: (usize, usize, usize), b: (usize, usize, usize)) -> Option<Bcast> {
        if a == b {
            Some(Bcast::Same)
        } else if b == (1, 1, 1) {
            Some(Bcast::Scalar)
        } else if b.0 == 1 && b.1 == 1 && b.2 == a.2 {
            Some(Bcast::PerChan)
        } else if b.0 == a.0 && b.1 == a.1 && b.2 == 1 {
            Some(Bcast::PerPixel)
        } else {
            None
        }
    }

    fn bin(&mut self, kind: BinKind, a: TVal, b: TVal) -> Result<TVal> {
        let (as_, bs) = (self.nodes[a.0].val.shape(), self.nodes[b.0].val.shape());
        let bc = Self::bcast_of(as_, bs).ok_or_else(|| {
            Error::shape("Tape::elementwise", format!("{:?} vs {:?}", as_, bs))
        })?;
        if kind == BinKind::Div && self.nodes[b.0].val.data().iter().any(|&v| v == 0.0) {
            return Err(Error::domain("Tape::div", "zero divisor element"));
        }
        let (h, w, c) = as_;
        let va = &self.nodes[a.0].val;
        let vb = &self.nodes[b.0].val;
        let mut out = Grid::zeros(h, w, c);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let bv = match bc {
                        Bcast::Same => vb.get(y, x, ch),
                        Bcast::Scalar => vb.get(0, 0, 0),
                        Bcast::PerChan => vb.get(0, 0, ch),
                        Bcast::PerPixel => vb.get(y, x, 0),
                    };
                    let av = va.get(y, x, ch);
                    let r = match kind {
                        BinKind::Add => av + bv,
                        BinKind::Sub => av - bv,
                        BinKind::Mul => av * bv,
                        BinKind::Div => av / bv,
                    };
                    out.set(y, x, ch, r);
                }
            }
        }
        self.push("Tape::elementwise", Op::Bin { kind, a: a.0, b: b.0, bc }, out)
    }

    pub fn add(&mut self, a: TVal, b: TVal) -> Result<TVal> {
        self.bin(BinKind::Add, a, b)
    }
    pub fn sub(&mut self, a: TVal, b: TVal) -> Result<TVal> {
        self.bin(BinKind::Sub, a, b)
    }
    pub fn mul(&mut self, a: TVal, b: TVal) -> Result<TVal> {
        self.bin(BinKind::Mul, a, b)
    }
    pub fn div(&mut self, a: TVal, b: TVal) -> Result<TVal> {
        self.bin(BinKind::Div, a, b)
    }

    fn un(&mut self, opname: &'static str, kind: UnKind, a: TVal) -> Result<TVal> {
        let va = &self.nodes[a.0].val;
        let out = match kind {
            UnKind::Exp => va.map(f64::exp),
            UnKind::Log => {
                if va.data().iter().any(|&v| v <= 0.0) {
                    return Err(Error::domain("Tape::log", "non-positive element"));
                }
                va.map(f64::ln)
            }
            UnKind::LeakyRelu(slope) => {
                let s = f64::from_bits(slope);
                va.map(|v| if v > 0.0 { v } else { s * v })
            }
            UnKind::PowS(e) => {
                let s = f64::from_bits(e);
                if s.fract() != 0.0 && va.data().iter().any(|&v| v < 0.0) {
                    return Err(Error::domain("Tape::pow", "negative base, fractional exponent"));
                }
                if s < 0.0 && va.data().iter().any(|&v| v == 0.0) {
                    return Err(Error::domain("Tape::pow", "zero base, negative exponent"));
                }
                va.map(|v| v.powf(s))
            }
            UnKind::AddS(s) => {
                let s = f64::from_bits(s);
                va.map(|v| v + s)
            }
            UnKind::MulS(s) => {
                let s = f64::from_bits(s);
                va.map(|v| v * s)
            }
            UnKind::SubFromS(s) => {
                let s = f64::from_bits(s);
                va.map(|v| s - v)
            }
        };
        self.push(opname, Op::Un { kind, a: a.0 }, out)
    }

    pub fn exp(&mut self, a: TVal) -> Result<TVal> {
        self.un("Tape::exp", UnKind::Exp, a)
    }
    pub fn log(&mut self, a: TVal) -> Result<TVal> {
        self.un("Tape::log", UnKind::Log, a)
    }
    pub fn leaky_relu(&mut self, a: TVal, slope: f64) -> Result<TVal> {
        self.un("Tape::leaky_relu", UnKind::LeakyRelu(slope.to_bits()), a)
    }
    /// Elementwise power with a constant exponent. Fractional exponents
    /// require a non-negative base; negative exponents require nonzero base.
    pub fn pow_s(&mut self, a: TVal, e: f64) -> Result<TVal> {
        self.un("Tape::pow", UnKind::PowS(e.to_bits()), a)
    }
    pub fn add_s(&mut self, a: TVal, s: f64) -> Result<TVal> {
        self.un("Tape::add_s", UnKind::AddS(s.to_bits()), a)
    }
    pub fn mul_s(&mut self, a: TVal, s: f64) -> Result<TVal> {
        self.un("Tape::mul_s", UnKind::MulS(s.to_bits()), a)
    }
    /// `s - a`, elementwise.
    pub fn sub_from_s(&mut self, s: f64, a: TVal) -> Result<TVal> {
        self.un("Tape::sub_from_s", UnKind::SubFromS(s.to_bits()), a)
    }

    // ---- reductions ------------------------------------------------------

    pub fn sum(&mut self, a: TVal) -> Result<TVal> {
        let s = self.nodes[a.0].val.sum();
        self.push("Tape::sum", Op::ReduceSum { a: a.0 }, Grid::scalar(s))
    }

    pub fn mean(&mut self, a: TVal) -> Result<TVal> {
        let m = self.nodes[a.0].val.mean();
        self.push("Tape::mean", Op::ReduceMean { a: a.0 }, Grid::scalar(m))
    }

    /// Minimum over all elements. The adjoint routes to the first attaining
    /// element (subgradient choice; ties are a measure-zero case).
    pub fn min(&mut self, a: TVal) -> Result<TVal> {
        let data = self.nodes[a.0].val.data();
        let mut arg = 0;
        for (i, &v) in data.iter().enumerate() {
            if v < data[arg] {
                arg = i;
            }
        }
        let m = data[arg];
        self.push("Tape::min", Op::ReduceMin { a: a.0, arg }, Grid::scalar(m))
    }

    /// Maximum over all elements; adjoint routing mirrors [`Tape::min`].
    pub fn max(&mut self, a: TVal) -> Result<TVal> {
        let data = self.nodes[a.0].val.data();
        let mut arg = 0;
        for (i, &v) in data.iter().enumerate() {
            if v > data[arg] {
                arg = i;
            }
        }
        let m = data[arg];
        self.push("Tape::max", Op::ReduceMax { a: a.0, arg }, Grid::scalar(m))
    }

    /// Per-channel sum over all pixels, shape HxWxC -> 1x1xC.
    pub fn sum_per_channel(&mut self, a: TVal) -> Result<TVal> {
        let v = &self.nodes[a.0].val;
        let (h, w, c) = v.shape();
        let mut out = Grid::zeros(1, 1, c);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out.add_at(0, 0, ch, v.get(y, x, ch));
                }
            }
        }
        self.push("Tape::sum_per_channel", Op::SumPerChan { a: a.0 }, out)
    }

    /// Per-pixel sum over channels, shape HxWxC -> HxWx1.
    pub fn chan_sum(&mut self, a: TVal) -> Result<TVal> {
        let v = &self.nodes[a.0].val;
        let (h, w, c) = v.shape();
        let mut out = Grid::zeros(h, w, 1);
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for ch in 0..c {
                    s += v.get(y, x, ch);
                }
                out.set(y, x, 0, s);
            }
        }
        self.push("Tape::chan_sum", Op::ChanSum { a: a.0 }, out)
    }

    /// Sum over the k x k window centered at each pixel, per channel, with
    /// zero padding outside the grid. k must be odd.
    pub fn window_sum(&mut self, a: TVal, k: usize) -> Result<TVal> {
        if k % 2 == 0 || k == 0 {
            return Err(Error::invalid("Tape::window_sum", format!("k = {} must be odd", k)));
        }
        let v = &self.nodes[a.0].val;
        let out = window_sum_raw(v, k);
        self.push("Tape::window_sum", Op::WindowSum { a: a.0, k }, out)
    }

    // ---- structured ops --------------------------------------------------

    /// 2D convolution with same-style zero padding.
    ///
    /// `kernel` is an odd (kh x kw x cin*cout) grid; channel index `ci * cout
    /// + co` holds the weight connecting input channel `ci` to output channel
    /// `co`. Output spatial dims are `ceil(in / stride)`; stride 1 pads
    /// symmetrically, stride 2 pads one less on the top/left when the total
    /// is odd. `bias`, when given, is 1x1xcout.
    pub fn conv2d(
        &mut self,
        x: TVal,
        kernel: TVal,
        bias: Option<TVal>,
        stride: usize,
    ) -> Result<TVal> {
        if stride != 1 && stride != 2 {
            return Err(Error::invalid("Tape::conv2d", format!("stride {} not in {{1, 2}}", stride)));
        }
        let xs = self.nodes[x.0].val.shape();
        let ks = self.nodes[kernel.0].val.shape();
        let cin = xs.2;
        if ks.0 % 2 == 0 || ks.1 % 2 == 0 {
            return Err(Error::invalid("Tape::conv2d", "kernel dims must be odd"));
        }
        if ks.2 % cin != 0 {
            return Err(Error::shape(
                "Tape::conv2d",
                format!("kernel channels {} not divisible by input channels {}", ks.2, cin),
            ));
        }
        let cout = ks.2 / cin;
        if let Some(b) = bias {
            let bs = self.nodes[b.0].val.shape();
            if bs != (1, 1, cout) {
                return Err(Error::shape("Tape::conv2d", format!("bias {:?} != (1,1,{})", bs, cout)));
            }
        }
        let out = conv2d_raw(&self.nodes[x.0].val, &self.nodes[kernel.0].val, bias.map(|b| &self.nodes[b.0].val), stride, cin, cout);
        self.push(
            "Tape::conv2d",
            Op::Conv { x: x.0, kern: kernel.0, bias: bias.map(|b| b.0), stride, cin, cout },
            out,
        )
    }

    /// Bilinear 2x upsampling (half-pixel-centered sampling, edges clamped).
    /// Constant grids stay constant; a 1x1 input replicates to 2x2.
    pub fn upsample2x(&mut self, a: TVal) -> Result<TVal> {
        let v = &self.nodes[a.0].val;
        let (h, w, c) = v.shape();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = Grid::zeros(oh, ow, c);
        for oy in 0..oh {
            let sy = (oy as f64 + 0.5) / 2.0 - 0.5;
            for ox in 0..ow {
                let sx = (ox as f64 + 0.5) / 2.0 - 0.5;
                let tap = sample_tap(h, w, sy, sx);
                for ch in 0..c {
                    out.set(oy, ox, ch, tap.gather(v, ch));
                }
            }
        }
        self.push("Tape::upsample2x", Op::Upsample2x { a: a.0 }, out)
    }

    /// Channel concatenation of two grids with equal spatial dims.
    pub fn concat(&mut self, a: TVal, b: TVal) -> Result<TVal> {
        let (va, vb) = (&self.nodes[a.0].val, &self.nodes[b.0].val);
        if va.h() != vb.h() || va.w() != vb.w() {
            return Err(Error::shape(
                "Tape::concat",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let (h, w) = (va.h(), va.w());
        let (ca, cb) = (va.c(), vb.c());
        let mut out = Grid::zeros(h, w, ca + cb);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..ca {
                    out.set(y, x, ch, va.get(y, x, ch));
                }
                for ch in 0..cb {
                    out.set(y, x, ca + ch, vb.get(y, x, ch));
                }
            }
        }
        self.push("Tape::concat", Op::Concat { a: a.0, b: b.0 }, out)
    }

    /// Differentiable bilinear warp: `out(p) = img(p + disp(p))` with
    /// border-clamped sampling. `disp` is HxWx2 (dy in channel 0, dx in
    /// channel 1) in pixel units on the output (fixed) grid. Gradients flow
    /// to both the image and the displacement; the sampling-coordinate
    /// derivative is zero where the coordinate is clamped at the border.
    pub fn warp(&mut self, img: TVal, disp: TVal) -> Result<TVal> {
        let (vi, vd) = (&self.nodes[img.0].val, &self.nodes[disp.0].val);
        if vd.c() != 2 || vd.h() != vi.h() || vd.w() != vi.w() {
            return Err(Error::shape(
                "Tape::warp",
                format!("img {:?} vs disp {:?} (want HxWx2)", vi.shape(), vd.shape()),
            ));
        }
        let (h, w, c) = vi.shape();
        let mut out = Grid::zeros(h, w, c);
        for y in 0..h {
            for x in 0..w {
                let sy = y as f64 + vd.get(y, x, 0);
                let sx = x as f64 + vd.get(y, x, 1);
                let tap = sample_tap(h, w, sy, sx);
                for ch in 0..c {
                    out.set(y, x, ch, tap.gather(vi, ch));
                }
            }
        }
        self.push("Tape::warp", Op::Warp { img: img.0, disp: disp.0 }, out)
    }

    /// Samples a displacement field bilinearly at sub-pixel points, yielding
    /// a Kx1x2 grid. Points are constants; gradients flow to the field only.
    pub fn sample_disp(&mut self, disp: TVal, pts: &[(f64, f64)]) -> Result<TVal> {
        let vd = &self.nodes[disp.0].val;
        if vd.c() != 2 {
            return Err(Error::shape("Tape::sample_disp", "displacement must be HxWx2"));
        }
        if pts.is_empty() {
            return Err(Error::invalid("Tape::sample_disp", "empty point list"));
        }
        let (h, w) = (vd.h(), vd.w());
        let mut out = Grid::zeros(pts.len(), 1, 2);
        for (k, &(py, px)) in pts.iter().enumerate() {
            let tap = sample_tap(h, w, py, px);
            out.set(k, 0, 0, tap.gather(vd, 0));
            out.set(k, 0, 1, tap.gather(vd, 1));
        }
        self.push(
            "Tape::sample_disp",
            Op::SampleDisp { disp: disp.0, pts: pts.to_vec() },
            out,
        )
    }

    /// Per-pixel normalized Gaussian bin assignments over intensity bins.
    ///
    /// Input must be HxWx1 with values in [0, 1]; output is HxWxbins where
    /// channel i holds exp(-((a - c_i)/h)^2 / 2) normalized to sum to 1 over
    /// bins, with centers c_i = (i + 0.5)/bins and bandwidth h = sigma/bins.
    pub fn parzen_weights(&mut self, a: TVal, bins: usize, sigma: f64) -> Result<TVal> {
        let v = &self.nodes[a.0].val;
        if v.c() != 1 {
            return Err(Error::shape("Tape::parzen_weights", "input must be single-channel"));
        }
        if bins < 2 {
            return Err(Error::invalid("Tape::parzen_weights", "bins must be >= 2"));
        }
        if !(sigma > 0.0) {
            return Err(Error::invalid("Tape::parzen_weights", "sigma must be positive"));
        }
        let (h, w) = (v.h(), v.w());
        let band = sigma / bins as f64;
        let mut out = Grid::zeros(h, w, bins);
        for y in 0..h {
            for x in 0..w {
                let av = v.get(y, x, 0);
                let mut total = 0.0;
                for i in 0..bins {
                    let z = (av - center(i, bins)) / band;
                    let g = (-0.5 * z * z).exp();
                    out.set(y, x, i, g);
                    total += g;
                }
                if total <= 0.0 {
                    return Err(Error::domain(
                        "Tape::parzen_weights",
                        format!("value {} too far outside [0,1] at ({}, {})", av, y, x),
                    ));
                }
                for i in 0..bins {
                    let g = out.get(y, x, i);
                    out.set(y, x, i, g / total);
                }
            }
        }
        self.push("Tape::parzen_weights", Op::Parzen { a: a.0, bins, sigma }, out)
    }

    /// Mean outer product over pixels: `J(i, j) = mean_p wa(p, i) * wb(p, j)`,
    /// shape (Ba x Bb x 1). With normalized Parzen weights on both sides this
    /// is a joint intensity histogram summing to 1.
    pub fn outer_mean(&mut self, wa: TVal, wb: TVal) -> Result<TVal> {
        let (va, vb) = (&self.nodes[wa.0].val, &self.nodes[wb.0].val);
        if va.h() != vb.h() || va.w() != vb.w() {
            return Err(Error::shape(
                "Tape::outer_mean",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let (h, w) = (va.h(), va.w());
        let (ba, bb) = (va.c(), vb.c());
        let n = (h * w) as f64;
        let mut out = Grid::zeros(ba, bb, 1);
        for y in 0..h {
            for x in 0..w {
                for i in 0..ba {
                    let ai = va.get(y, x, i);
                    if ai == 0.0 {
                        continue;
                    }
                    for j in 0..bb {
                        out.add_at(i, j, 0, ai * vb.get(y, x, j));
                    }
                }
            }
        }
        for v in out.data_mut() {
            *v /= n;
        }
        self.push("Tape::outer_mean", Op::OuterMean { wa: wa.0, wb: wb.0 }, out)
    }

    /// Mutual information of a joint histogram: `sum_ij J log(J / (p_i q_j))`
    /// with marginals p, q computed from J. Entries at or below 1e-300 are
    /// treated as exactly empty (zero contribution, zero gradient). Entries
    /// must be non-negative.
    pub fn mi_from_joint(&mut self, j: TVal) -> Result<TVal> {
        let vj = &self.nodes[j.0].val;
        if vj.c() != 1 {
            return Err(Error::shape("Tape::mi_from_joint", "joint must be (Ba x Bb x 1)"));
        }
        if vj.data().iter().any(|&v| v < 0.0) {
            return Err(Error::domain("Tape::mi_from_joint", "negative histogram entry"));
        }
        let (p, q) = joint_marginals(vj);
        let (ba, bb) = (vj.h(), vj.w());
        let mut mi = 0.0;
        for i in 0..ba {
            for jx in 0..bb {
                let v = vj.get(i, jx, 0);
                if v > MI_TINY {
                    mi += v * (v / (p[i] * q[jx])).ln();
                }
            }
        }
        self.push("Tape::mi_from_joint", Op::MiJoint { j: j.0 }, Grid::scalar(mi))
    }

    /// Diffusion energy of a displacement (or any) field: the mean over
    /// pixels, channels, and the two spatial directions of squared forward
    /// differences. Differences that would cross the bottom/right border are
    /// treated as absent (contribute 0) while the divisor stays H*W*C*2.
    pub fn diffusion(&mut self, d: TVal) -> Result<TVal> {
        let v = &self.nodes[d.0].val;
        let (h, w, c) = v.shape();
        let mut acc = 0.0;
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let cur = v.get(y, x, ch);
                    if y + 1 < h {
                        let dy = v.get(y + 1, x, ch) - cur;
                        acc += dy * dy;
                    }
                    if x + 1 < w {
                        let dx = v.get(y, x + 1, ch) - cur;
                        acc += dx * dx;
                    }
                }
            }
        }
        let m = (h * w * c * 2) as f64;
        self.push("Tape::diffusion", Op::Diffusion { d: d.0 }, Grid::scalar(acc / m))
    }

    // ---- backward --------------------------------------------------------

    /// Reverse sweep from a scalar root. Allocates adjoints lazily, sums
    /// contributions for multi-consumer nodes, and may run once per tape.
    pub fn backward(&mut self, root: TVal) -> Result<()> {
        if self.backward_done {
            return Err(Error::invalid("Tape::backward", "backward already run on this tape"));
        }
        if !self.nodes[root.0].val.is_scalar() {
            return Err(Error::invalid("Tape::backward", "root must be a 1x1x1 scalar"));
        }
        self.backward_done = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Grid>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(Grid::scalar(1.0));

        for i in (0..n).rev() {
            let Some(gout) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Bin { kind, a, b, bc } => {
                    let (a, b, bc, kind) = (*a, *b, *bc, *kind);
                    let va = &self.nodes[a].val;
                    let vb = &self.nodes[b].val;
                    let (h, w, c) = va.shape();
                    let ga = grads[a].get_or_insert_with(|| Grid::zeros(h, w, c));
                    // First pass: adjoint into a (never broadcast).
                    for y in 0..h {
                        for x in 0..w {
                            for ch in 0..c {
                                let g = gout.get(y, x, ch);
                                let bv = match bc {
                                    Bcast::Same => vb.get(y, x, ch),
                                    Bcast::Scalar => vb.get(0, 0, 0),
                                    Bcast::PerChan => vb.get(0, 0, ch),
                                    Bcast::PerPixel => vb.get(y, x, 0),
                                };
                                let da = match kind {
                                    BinKind::Add | BinKind::Sub => g,
                                    BinKind::Mul => g * bv,
                                    BinKind::Div => g / bv,
                                };
                                ga.add_at(y, x, ch, da);
                            }
                        }
                    }
                    // Second pass: adjoint into b, reduced over broadcast dims.
                    let (bh, bw, bcn) = vb.shape();
                    let gb = grads[b].get_or_insert_with(|| Grid::zeros(bh, bw, bcn));
                    let va = &self.nodes[a].val;
                    let vb = &self.nodes[b].val;
                    for y in 0..h {
                        for x in 0..w {
                            for ch in 0..c {
                                let g = gout.get(y, x, ch);
                                let (by, bxx, bch) = match bc {
                                    Bcast::Same => (y, x, ch),
                                    Bcast::Scalar => (0, 0, 0),
                                    Bcast::PerChan => (0, 0, ch),
                                    Bcast::PerPixel => (y, x, 0),
                                };
                                let db = match kind {
                                    BinKind::Add => g,
                                    BinKind::Sub => -g,
                                    BinKind::Mul => g * va.get(y, x, ch),
                                    BinKind::Div => {
                                        let bv = vb.get(by, bxx, bch);
                                        -g * va.get(y, x, ch) / (bv * bv)
                                    }
                                };
                                gb.add_at(by, bxx, bch, db);
                            }
                        }
                    }
                }
                Op::Un { kind, a } => {
                    let (a, kind) = (*a, *kind);
                    let va = &self.nodes[a].val;
                    let (h, w, c) = va.shape();
                    let ga = grads[a].get_or_insert_with(|| Grid::zeros(h, w, c));
                    for (idx, gv) in gout.data().iter().enumerate() {
                        let x = va.data()[idx];
                        let d = match kind {
                            UnKind::Exp => gv * x.exp(),
                            UnKind::Log => gv / x,
                            UnKind::LeakyRelu(s) => {
                                let s = f64::from_bits(s);
                                if x > 0.0 {
                                    *gv
                                } else {
                                    gv * s
                                }
                            }
                            UnKind::PowS(e) => {
                                let e = f64::from_bits(e);
                                gv * e * x.powf(e - 1.0)
                            }
                            UnKind::AddS(_) => *gv,
                            UnKind::MulS(s) => gv * f64::from_bits(s),
                            UnKind::SubFromS(_) => -*gv,
                        };
                        ga.data_mut()[idx] += d;
                    }
                }
                Op::ReduceSum { a } => {
                    let a = *a;
                    let g = gout.scalar_value();
                    let (h, w, c) = self.nodes[a].val.shape();
                    let ga = grads[a].get_or_insert_with(|| Grid::zeros(h, w, c));
                    for v in ga.data_mut() {
                        *v += g;
                    }
                }
                Op::ReduceMean { a } => {
                    let a = *a;
                    let (h, w, c) = self.nodes[a].val.shape();
                    let g = gout.scalar_value() / (h * w * c) as f64;
                    let ga = grads[a].get_or_insert_with(|| Grid::zeros(h, w, c));
                    for v in ga.data_mut() {
                        *v += g;
                    }
                }
                Op::ReduceMin { a, arg } | Op::ReduceMax { a, arg } => {
                    let (a, arg) = (*a, *arg);
                    let g = gout.scalar_value();
                    let (h, w, c) = self.nodes[a].val.shape();
                    let ga = grads[a].get_or_insert_with(|| Grid::zeros(h, w, c));
                    ga.data_mut()[arg] += g;
                }
                Op::SumPerChan { a } => {
                    let a = *a;
                    let (h, w, c) = self.nodes[a].val.shape();
                    let ga = grads[a].get_or_insert_with(|| Grid::zeros(h, w, c));
                    for y in 0..h {
                        for x in 0..w {
                            for ch in 0..c {
                                ga.add_at(y, x, ch, gout.get(0, 0, ch));
                            }
                        }
                    }
                }
                Op::ChanSum { a } => {
                    let a = *a;
                    let (h, w, c) = self.nodes[a].val.shape();
                    let ga = grads[a].get_or_insert_with(|| Grid::zeros(h, w, c));
                    for y in 0..h {
                        for x in 0..w {
                            let g = gout.get(y, x, 0);
                            for ch in 0..c {
                                ga.add_at(y, x, ch, g);
                            }
                        }
                    }
                }
                Op::WindowSum { a, k } => {
                    // The adjoint of a window sum is the window sum of the
                    // adjoint (the ones-kernel is symmetric).
                    let (a, k) = (*a, *k);
                    let contrib = window_sum_raw(&gout, k);
                    let (h, w, c) = self.nodes[a].val.shape();
                    let ga = grads[a].get_or_insert_with(|| Grid::zeros(h, w, c));
                    for (dst, src) in ga.data_mut().iter_mut().zip(contrib.data()) {
                        *dst += src;
                    }
                }
                Op::Conv { x, kern, bias, stride, cin, cout } => {
                    let (x, kern, bias, stride, cin, cout) =
                        (*x, *kern, *bias, *stride, *cin, *cout);
                    let vx = self.nodes[x].val.clone();
                    let vk = self.nodes[kern].val.clone();
                    let (h, w, _) = vx.shape();
                    let (kh, kw, _) = vk.shape();
                    let (oh, ow) = (div_ceil(h, stride), div_ceil(w, stride));
                    let (pt, pl) = same_pad(h, w, kh, kw, stride);
                    {
                        let gx = grads[x].get_or_insert_with(|| Grid::zeros(h, w, cin));
                        for oy in 0..oh {
                            for ox in 0..ow {
                                for co in 0..cout {
                                    let g = gout.get(oy, ox, co);
                                    if g == 0.0 {
                                        continue;
                                    }
                                    for ky in 0..kh {
                                        let iy = (oy * stride + ky) as isize - pt as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let ix = (ox * stride + kx) as isize - pl as isize;
                                            if ix < 0 || ix >= w as isize {
                                                continue;
                                            }
                                            for ci in 0..cin {
                                                gx.add_at(
                                                    iy as usize,
                                                    ix as usize,
                                                    ci,
                                                    g * vk.get(ky, kx, ci * cout + co),
                                                );
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    {
                        let gk = grads[kern]
                            .get_or_insert_with(|| Grid::zeros(kh, kw, cin * cout));
                        for oy in 0..oh {
                            for ox in 0..ow {
                                for co in 0..cout {
                                    let g = gout.get(oy, ox, co);
                                    if g == 0.0 {
                                        continue;
                                    }
                                    for ky in 0..kh {
                                        let iy = (oy * stride + ky) as isize - pt as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let ix = (ox * stride + kx) as isize - pl as isize;
                                            if ix < 0 || ix >= w as isize {
                                                continue;
                                            }
                                            for ci in 0..cin {
                                                gk.add_at(
                                                    ky,
                                                    kx,
                                                    ci * cout + co,
                                                    g * vx.get(iy as usize, ix as usize, ci),
                                                );
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    if let Some(b) = bias {
                        let gb = grads[b].get_or_insert_with(|| Grid::zeros(1, 1, cout));
                        for oy in 0..oh {
                            for ox in 0..ow {
                                for co in 0..cout {
                                    gb.add_at(0, 0, co, gout.get(oy, ox, co));
                                }
                            }
                        }
                    }
                }
                Op::Upsample2x { a } => {
                    let a = *a;
                    let (h, w, c) = self.nodes[a].val.shape();
                    let ga = grads[a].get_or_insert_with(|| Grid::zeros(h, w, c));
                    let (oh, ow) = (2 * h, 2 * w);
                    for oy in 0..oh {
                        let sy = (oy as f64 + 0.5) / 2.0 - 0.5;
                        for ox in 0..ow {
                            let sx = (ox as f64 + 0.5) / 2.0 - 0.5;
                            let tap = sample_tap(h, w, sy, sx);
                            for ch in 0..c {
                                tap.scatter(ga, ch, gout.get(oy, ox, ch));
                            }
                        }
                    }
                }
                Op::Concat { a, b } => {
                    let (a, b) = (*a, *b);
                    let (h, w, ca) = self.nodes[a].val.shape();
                    let cb = self.nodes[b].val.c();
                    {
                        let ga = grads[a].get_or_insert_with(|| Grid::zeros(h, w, ca));
                        for y in 0..h {
                            for x in 0..w {
                                for ch in 0..ca {
                                    ga.add_at(y, x, ch, gout.get(y, x, ch));
                                }
                            }
                        }
                    }
                    let gb = grads[b].get_or_insert_with(|| Grid::zeros(h, w, cb));
                    for y in 0..h {
                        for x in 0..w {
                            for ch in 0..cb {
                                gb.add_at(y, x, ch, gout.get(y, x, ca + ch));
                            }
                        }
                    }
                }
                Op::Warp { img, disp } => {
                    let (img, disp) = (*img, *disp);
                    let vi = self.nodes[img].val.clone();
                    let vd = self.nodes[disp].val.clone();
                    let (h, w, c) = vi.shape();
                    // Two passes keep the borrow checker happy: image adjoint
                    // first, then displacement adjoint.
                    {
                        let gi = grads[img].get_or_insert_with(|| Grid::zeros(h, w, c));
                        for y in 0..h {
                            for x in 0..w {
                                let tap = sample_tap(
                                    h,
                                    w,
                                    y as f64 + vd.get(y, x, 0),
                                    x as f64 + vd.get(y, x, 1),
                                );
                                for ch in 0..c {
                                    tap.scatter(gi, ch, gout.get(y, x, ch));
                                }
                            }
                        }
                    }
                    let gd = grads[disp].get_or_insert_with(|| Grid::zeros(h, w, 2));
                    for y in 0..h {
                        for x in 0..w {
                            let tap = sample_tap(
                                h,
                                w,
                                y as f64 + vd.get(y, x, 0),
                                x as f64 + vd.get(y, x, 1),
                            );
                            let (mut dy, mut dx) = (0.0, 0.0);
                            for ch in 0..c {
                                let g = gout.get(y, x, ch);
                                let (gy, gx) = tap.coord_grad(&vi, ch);
                                dy += g * gy;
                                dx += g * gx;
                            }
                            gd.add_at(y, x, 0, dy);
                            gd.add_at(y, x, 1, dx);
                        }
                    }
                }
                Op::SampleDisp { disp, pts } => {
                    let disp = *disp;
                    let pts = pts.clone();
                    let (h, w, _) = self.nodes[disp].val.shape();
                    let gd = grads[disp].get_or_insert_with(|| Grid::zeros(h, w, 2));
                    for (k, &(py, px)) in pts.iter().enumerate() {
                        let tap = sample_tap(h, w, py, px);
                        tap.scatter(gd, 0, gout.get(k, 0, 0));
                        tap.scatter(gd, 1, gout.get(k, 0, 1));
                    }
                }
                Op::Parzen { a, bins, sigma } => {
                    let (a, bins, sigma) = (*a, *bins, *sigma);
                    let va = self.nodes[a].val.clone();
                    let out = &self.nodes[i].val;
                    let (h, w) = (va.h(), va.w());
                    let band = sigma / bins as f64;
                    let ga = grads[a].get_or_insert_with(|| Grid::zeros(h, w, 1));
                    for y in 0..h {
                        for x in 0..w {
                            let av = va.get(y, x, 0);
                            // d w_i / da = (w_i / band) * (sum_k w_k z_k - z_i)
                            let mut wz = 0.0;
                            for k in 0..bins {
                                let z = (av - center(k, bins)) / band;
                                wz += out.get(y, x, k) * z;
                            }
                            let mut d = 0.0;
                            for k in 0..bins {
                                let z = (av - center(k, bins)) / band;
                                d += gout.get(y, x, k) * out.get(y, x, k) * (wz - z);
                            }
                            ga.add_at(y, x, 0, d / band);
                        }
                    }
                }
                Op::OuterMean { wa, wb } => {
                    let (wa, wb) = (*wa, *wb);
                    let va = self.nodes[wa].val.clone();
                    let vb = self.nodes[wb].val.clone();
                    let (h, w) = (va.h(), va.w());
                    let (ba, bb) = (va.c(), vb.c());
                    let n = (h * w) as f64;
                    {
                        let gwa = grads[wa].get_or_insert_with(|| Grid::zeros(h, w, ba));
                        for y in 0..h {
                            for x in 0..w {
                                for i2 in 0..ba {
                                    let mut d = 0.0;
                                    for j2 in 0..bb {
                                        d += gout.get(i2, j2, 0) * vb.get(y, x, j2);
                                    }
                                    gwa.add_at(y, x, i2, d / n);
                                }
                            }
                        }
                    }
                    let gwb = grads[wb].get_or_insert_with(|| Grid::zeros(h, w, bb));
                    for y in 0..h {
                        for x in 0..w {
                            for j2 in 0..bb {
                                let mut d = 0.0;
                                for i2 in 0..ba {
                                    d += gout.get(i2, j2, 0) * va.get(y, x, i2);
                                }
                                gwb.add_at(y, x, j2, d / n);
                            }
                        }
                    }
                }
                Op::MiJoint { j } => {
                    let j = *j;
                    let vj = &self.nodes[j].val;
                    let (p, q) = joint_marginals(vj);
                    let g = gout.scalar_value();
                    let (ba, bb, _) = vj.shape();
                    let gj = grads[j].get_or_insert_with(|| Grid::zeros(ba, bb, 1));
                    for i2 in 0..ba {
                        for j2 in 0..bb {
                            let v = vj.get(i2, j2, 0);
                            if v > MI_TINY {
                                gj.add_at(i2, j2, 0, g * ((v / (p[i2] * q[j2])).ln() - 1.0));
                            }
                        }
                    }
                }
                Op::Diffusion { d } => {
                    let d = *d;
                    let vd = self.nodes[d].val.clone();
                    let (h, w, c) = vd.shape();
                    let scale = gout.scalar_value() * 2.0 / (h * w * c * 2) as f64;
                    let gd = grads[d].get_or_insert_with(|| Grid::zeros(h, w, c));
                    for y in 0..h {
                        for x in 0..w {
                            for ch in 0..c {
                                let cur = vd.get(y, x, ch);
                                if y + 1 < h {
                                    let u = vd.get(y + 1, x, ch) - cur;
                                    gd.add_at(y + 1, x, ch, scale * u);
                                    gd.add_at(y, x, ch, -scale * u);
                                }
                                if x + 1 < w {
                                    let u = vd.get(y, x + 1, ch) - cur;
                                    gd.add_at(y, x + 1, ch, scale * u);
                                    gd.add_at(y, x, ch, -scale * u);
                                }
                            }
                        }
                    }
                }
            }
            grads[i] = Some(gout);
        }
        self.grads = grads;
        Ok(())
    }
}

fn center(i: usize, bins: usize) -> f64 {
    (i as f64 + 0.5) / bins as f64
}

fn div_ceil(a: usize, b: usize) -> usize {
    (a + b - 1) / b
}

/// Same-style padding offsets (top, left) for the given geometry.
fn same_pad(h: usize, w: usize, kh: usize, kw: usize, stride: usize) -> (usize, usize) {
    let oh = div_ceil(h, stride);
    let ow = div_ceil(w, stride);
    let pad_h = ((oh - 1) * stride + kh).saturating_sub(h);
    let pad_w = ((ow - 1) * stride + kw).saturating_sub(w);
    (pad_h / 2, pad_w / 2)
}

fn conv2d_raw(
    x: &Grid,
    kern: &Grid,
    bias: Option<&Grid>,
    stride: usize,
    cin: usize,
    cout: usize,
) -> Grid {
    let (h, w, _) = x.shape();
    let (kh, kw, _) = kern.shape();
    let (oh, ow) = (div_ceil(h, stride), div_ceil(w, stride));
    let (pt, pl) = same_pad(h, w, kh, kw, stride);
    let mut out = Grid::zeros(oh, ow, cout);
    for oy in 0..oh {
        for ox in 0..ow {
            for co in 0..cout {
                let mut acc = match bias {
                    Some(b) => b.get(0, 0, co),
                    None => 0.0,
                };
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pt as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pl as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        for ci in 0..cin {
                            acc += x.get(iy as usize, ix as usize, ci)
                                * kern.get(ky, kx, ci * cout + co);
                        }
                    }
                }
                out.set(oy, ox, co, acc);
            }
        }
    }
    out
}

fn window_sum_raw(v: &Grid, k: usize) -> Grid {
    let (h, w, c) = v.shape();
    let r = (k / 2) as isize;
    let mut out = Grid::zeros(h, w, c);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for dy in -r..=r {
                    let yy = y as isize + dy;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    for dx in -r..=r {
                        let xx = x as isize + dx;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        acc += v.get(yy as usize, xx as usize, ch);
                    }
                }
                out.set(y, x, ch, acc);
            }
        }
    }
    out
}

fn joint_marginals(j: &Grid) -> (Vec<f64>, Vec<f64>) {
    let (ba, bb, _) = j.shape();
    let mut p = vec![0.0; ba];
    let mut q = vec![0.0; bb];
    for i in 0..ba {
        for jx in 0..bb {
            let v = j.get(i, jx, 0);
            p[i] += v;
            q[jx] += v;
        }
    }
    (p, q)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_2x2(vals: [f64; 4]) -> Grid {
        Grid::from_vec(2, 2, 1, vals.to_vec()).unwrap()
    }

    #[test]
    fn window_sum_of_center_impulse_is_all_ones() {
        let mut t = Tape::new();
        let mut g = Grid::zeros(3, 3, 1);
        g.set(1, 1, 0, 1.0);
        let a = t.input(g).unwrap();
        let s = t.window_sum(a, 3).unwrap();
        assert!(t.value(s).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn window_sum_corner_of_ones_counts_in_bounds_neighbors() {
        // Corner of a 5x5 ones grid sees a 2x2 in-bounds patch: 4.
        let mut t = Tape::new();
        let a = t.input(Grid::filled(5, 5, 1, 1.0)).unwrap();
        let s = t.window_sum(a, 3).unwrap();
        assert_eq!(t.value(s).get(0, 0, 0), 4.0);
        assert_eq!(t.value(s).get(2, 2, 0), 9.0);
        assert_eq!(t.value(s).get(0, 2, 0), 6.0);
    }

    #[test]
    fn window_sum_k1_is_identity() {
        let mut t = Tape::new();
        let g = grid_2x2([1.0, -2.0, 3.0, 4.5]);
        let a = t.input(g.clone()).unwrap();
        let s = t.window_sum(a, 1).unwrap();
        assert_eq!(t.value(s), &g);
    }

    #[test]
    fn window_sum_rejects_even_k() {
        let mut t = Tape::new();
        let a = t.input(Grid::zeros(3, 3, 1)).unwrap();
        assert!(t.window_sum(a, 2).is_err());
    }

    #[test]
    fn sum_of_ones_is_exact() {
        let mut t = Tape::new();
        let a = t.input(Grid::filled(17, 13, 1, 1.0)).unwrap();
        let s = t.sum(a).unwrap();
        assert_eq!(t.value(s).scalar_value(), 17.0 * 13.0);
    }

    #[test]
    fn grad_of_mean_square_is_two_a_over_n() {
        let mut t = Tape::new();
        let g = grid_2x2([1.0, -2.0, 0.5, 3.0]);
        let a = t.input(g.clone()).unwrap();
        let sq = t.mul(a, a).unwrap();
        let m = t.mean(sq).unwrap();
        t.backward(m).unwrap();
        let ga = t.grad(a).unwrap();
        for i in 0..4 {
            assert!((ga.data()[i] - 2.0 * g.data()[i] / 4.0).abs() < 1e-15);
        }
    }

    #[test]
    fn multi_consumer_node_accumulates_grad() {
        // y = sum(a*a + a); dy/da = 2a + 1.
        let mut t = Tape::new();
        let g = grid_2x2([2.0, -1.0, 0.0, 5.0]);
        let a = t.input(g.clone()).unwrap();
        let sq = t.mul(a, a).unwrap();
        let s = t.add(sq, a).unwrap();
        let y = t.sum(s).unwrap();
        t.backward(y).unwrap();
        let ga = t.grad(a).unwrap();
        for i in 0..4 {
            assert!((ga.data()[i] - (2.0 * g.data()[i] + 1.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn pow_grad_matches_closed_form() {
        let mut t = Tape::new();
        let a = t.input(grid_2x2([1.0, 2.0, 3.0, 0.5])).unwrap();
        let p = t.pow_s(a, 3.0).unwrap();
        let s = t.sum(p).unwrap();
        t.backward(s).unwrap();
        let ga = t.grad(a).unwrap();
        for (i, &x) in [1.0f64, 2.0, 3.0, 0.5].iter().enumerate() {
            assert!((ga.data()[i] - 3.0 * x * x).abs() < 1e-12);
        }
    }

    #[test]
    fn max_routes_grad_to_first_argmax() {
        let mut t = Tape::new();
        let a = t.input(grid_2x2([1.0, 7.0, 7.0, 2.0])).unwrap();
        let m = t.max(a).unwrap();
        assert_eq!(t.value(m).scalar_value(), 7.0);
        t.backward(m).unwrap();
        assert_eq!(t.grad(a).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn min_routes_grad_to_argmin() {
        let mut t = Tape::new();
        let a = t.input(grid_2x2([1.0, -7.0, 3.0, 2.0])).unwrap();
        let m = t.min(a).unwrap();
        assert_eq!(t.value(m).scalar_value(), -7.0);
        t.backward(m).unwrap();
        assert_eq!(t.grad(a).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_is_error_not_panic() {
        let mut t = Tape::new();
        let a = t.input(Grid::zeros(2, 2, 1)).unwrap();
        let b = t.input(Grid::zeros(3, 2, 1)).unwrap();
        assert!(t.add(a, b).is_err());
    }

    #[test]
    fn div_by_zero_element_is_error() {
        let mut t = Tape::new();
        let a = t.input(grid_2x2([1.0, 1.0, 1.0, 1.0])).unwrap();
        let b = t.input(grid_2x2([1.0, 0.0, 2.0, 3.0])).unwrap();
        assert!(t.div(a, b).is_err());
    }

    #[test]
    fn log_of_non_positive_is_error() {
        let mut t = Tape::new();
        let a = t.input(grid_2x2([1.0, 0.0, 2.0, 3.0])).unwrap();
        assert!(t.log(a).is_err());
    }

    #[test]
    fn backward_twice_is_error() {
        let mut t = Tape::new();
        let a = t.input(Grid::scalar(2.0)).unwrap();
        let y = t.mul(a, a).unwrap();
        t.backward(y).unwrap();
        assert!(t.backward(y).is_err());
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut t = Tape::new();
        let a = t.input(Grid::zeros(2, 2, 1)).unwrap();
        assert!(t.backward(a).is_err());
    }

    #[test]
    fn broadcast_scalar_add_and_grad_reduction() {
        let mut t = Tape::new();
        let a = t.input(grid_2x2([1.0, 2.0, 3.0, 4.0])).unwrap();
        let s = t.scalar(10.0).unwrap();
        let y = t.add(a, s).unwrap();
        assert_eq!(t.value(y).data(), &[11.0, 12.0, 13.0, 14.0]);
        let total = t.sum(y).unwrap();
        t.backward(total).unwrap();
        // The scalar operand collects one contribution per output element.
        assert_eq!(t.grad(s).unwrap().scalar_value(), 4.0);
    }

    #[test]
    fn broadcast_per_pixel_mul_reduces_grad_over_channels() {
        let mut t = Tape::new();
        let a = t.input(Grid::from_vec(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let b = t.input(Grid::from_vec(1, 2, 1, vec![10.0, 20.0]).unwrap()).unwrap();
        let y = t.mul(a, b).unwrap();
        assert_eq!(t.value(y).data(), &[10.0, 20.0, 60.0, 80.0]);
        let s = t.sum(y).unwrap();
        t.backward(s).unwrap();
        // db(p) = sum over channels of a(p, ch).
        assert_eq!(t.grad(b).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn conv_center_impulse_kernel_is_identity() {
        let mut t = Tape::new();
        let x = t.input(grid_2x2([1.0, 2.0, 3.0, 4.0])).unwrap();
        let mut k = Grid::zeros(3, 3, 1);
        k.set(1, 1, 0, 1.0);
        let kn = t.input(k).unwrap();
        let y = t.conv2d(x, kn, None, 1).unwrap();
        assert_eq!(t.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn conv_stride2_output_dims_are_ceil() {
        let mut t = Tape::new();
        let x = t.input(Grid::zeros(5, 7, 1)).unwrap();
        let k = t.input(Grid::zeros(3, 3, 1)).unwrap();
        let y = t.conv2d(x, k, None, 2).unwrap();
        assert_eq!(t.value(y).shape(), (3, 4, 1));
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut t = Tape::new();
        let x = t.input(Grid::zeros(4, 4, 3)).unwrap();
        // 3x3 kernel with 4 channel slots cannot split into cin=3 groups.
        let k = t.input(Grid::zeros(3, 3, 4)).unwrap();
        assert!(t.conv2d(x, k, None, 1).is_err());
    }

    #[test]
    fn upsample_replicates_1x1_and_keeps_constants() {
        let mut t = Tape::new();
        let a = t.input(Grid::scalar(3.5)).unwrap();
        let up = t.upsample2x(a).unwrap();
        assert_eq!(t.value(up).shape(), (2, 2, 1));
        assert!(t.value(up).data().iter().all(|&v| v == 3.5));

        let c = t.input(Grid::filled(4, 4, 2, -1.25)).unwrap();
        let up2 = t.upsample2x(c).unwrap();
        assert!(t.value(up2).data().iter().all(|&v| v == -1.25));
    }

    #[test]
    fn concat_stacks_channels_and_splits_grads() {
        let mut t = Tape::new();
        let a = t.input(Grid::filled(2, 2, 1, 1.0)).unwrap();
        let b = t.input(Grid::filled(2, 2, 2, 2.0)).unwrap();
        let y = t.concat(a, b).unwrap();
        assert_eq!(t.value(y).shape(), (2, 2, 3));
        let m = t.mean(y).unwrap();
        t.backward(m).unwrap();
        assert!(t.grad(a).unwrap().data().iter().all(|&v| (v - 1.0 / 12.0).abs() < 1e-15));
        assert!(t.grad(b).unwrap().data().iter().all(|&v| (v - 1.0 / 12.0).abs() < 1e-15));
    }

    #[test]
    fn parzen_weights_normalize_per_pixel() {
        let mut t = Tape::new();
        let a = t.input(Grid::from_vec(1, 3, 1, vec![0.0, 0.43, 1.0]).unwrap()).unwrap();
        let w = t.parzen_weights(a, 8, 0.5).unwrap();
        let v = t.value(w);
        for x in 0..3 {
            let s: f64 = (0..8).map(|i| v.get(0, x, i)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn outer_mean_of_normalized_weights_sums_to_one() {
        let mut t = Tape::new();
        let a = t.input(Grid::from_vec(2, 2, 1, vec![0.1, 0.4, 0.6, 0.9]).unwrap()).unwrap();
        let b = t.input(Grid::from_vec(2, 2, 1, vec![0.9, 0.2, 0.5, 0.3]).unwrap()).unwrap();
        let wa = t.parzen_weights(a, 8, 0.5).unwrap();
        let wb = t.parzen_weights(b, 8, 0.5).unwrap();
        let j = t.outer_mean(wa, wb).unwrap();
        assert!((t.value(j).sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn diffusion_of_constant_field_is_zero() {
        let mut t = Tape::new();
        let d = t.input(Grid::filled(5, 5, 2, 3.0)).unwrap();
        let e = t.diffusion(d).unwrap();
        assert_eq!(t.value(e).scalar_value(), 0.0);
    }

    #[test]
    fn diffusion_of_linear_ramp_matches_closed_form() {
        // d(y, x, 1) = x: unit forward differences in x at every pixel that
        // has a right neighbor, nothing else. Sum = h * (w - 1); divisor is
        // h * w * c * 2 with c = 2.
        let (h, w) = (4, 6);
        let mut g = Grid::zeros(h, w, 2);
        for y in 0..h {
            for x in 0..w {
                g.set(y, x, 1, x as f64);
            }
        }
        let mut t = Tape::new();
        let d = t.input(g).unwrap();
        let e = t.diffusion(d).unwrap();
        let expect = (h * (w - 1)) as f64 / (h * w * 2 * 2) as f64;
        assert!((t.value(e).scalar_value() - expect).abs() < 1e-15);
    }
}
