//! Dense 2D grids with a channel axis.
//!
//! `Grid` is the single value type the whole crate computes on: images,
//! one-hot label stacks, displacement fields, convolution kernels, and
//! scalar results (1x1x1) are all grids of `f64`. Storage is row-major with
//! channels innermost: `data[(y * w + x) * c + ch]`. All numerics are 64-bit;
//! there is no mixed-precision path.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    h: usize,
    w: usize,
    c: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn zeros(h: usize, w: usize, c: usize) -> Grid {
        assert!(h > 0 && w > 0 && c > 0, "grid dims must be positive");
        Grid { h, w, c, data: vec![0.0; h * w * c] }
    }

    pub fn filled(h: usize, w: usize, c: usize, v: f64) -> Grid {
        assert!(h > 0 && w > 0 && c > 0, "grid dims must be positive");
        Grid { h, w, c, data: vec![v; h * w * c] }
    }

    /// Wraps an existing buffer. Length must equal `h * w * c`.
    pub fn from_vec(h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Grid> {
        if data.len() != h * w * c {
            return Err(Error::shape(
                "Grid::from_vec",
                format!("buffer len {} != {}x{}x{}", data.len(), h, w, c),
            ));
        }
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::invalid("Grid::from_vec", "zero-sized dimension"));
        }
        Ok(Grid { h, w, c, data })
    }

    /// A 1x1x1 grid holding one value. Scalar results use this shape.
    pub fn scalar(v: f64) -> Grid {
        Grid { h: 1, w: 1, c: 1, data: vec![v] }
    }

    pub fn h(&self) -> usize {
        self.h
    }
    pub fn w(&self) -> usize {
        self.w
    }
    pub fn c(&self) -> usize {
        self.c
    }
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }
    pub fn numel(&self) -> usize {
        self.data.len()
    }
    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The value of a 1x1x1 grid.
    pub fn scalar_value(&self) -> f64 {
        assert!(self.is_scalar(), "scalar_value on non-scalar grid");
        self.data[0]
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize, ch: usize) -> usize {
        debug_assert!(y < self.h && x < self.w && ch < self.c);
        (y * self.w + x) * self.c + ch
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.data[self.idx(y, x, ch)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, ch: usize, v: f64) {
        let i = self.idx(y, x, ch);
        self.data[i] = v;
    }

    #[inline]
    pub fn add_at(&mut self, y: usize, x: usize, ch: usize, v: f64) {
        let i = self.idx(y, x, ch);
        self.data[i] += v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid {
        Grid { h: self.h, w: self.w, c: self.c, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Elementwise combine with an equal-shaped grid (plain, not autodiff).
    pub fn zip(&self, other: &Grid, f: impl Fn(f64, f64) -> f64) -> Result<Grid> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                "Grid::zip",
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Grid { h: self.h, w: self.w, c: self.c, data })
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Quantile by linear interpolation on the sorted values, q in [0, 1].
    /// Used for intensity normalization (q = 0.99), not on any gradient path.
    pub fn quantile(&self, q: f64) -> f64 {
        assert!((0.0..=1.0).contains(&q), "quantile q out of range");
        let mut sorted = self.data.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("NaN in quantile input"));
        let pos = q * (sorted.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let frac = pos - lo as f64;
        sorted[lo] * (1.0 - frac) + sorted[hi] * frac
    }

    /// One channel extracted as an HxWx1 grid.
    pub fn channel(&self, ch: usize) -> Grid {
        assert!(ch < self.c, "channel out of range");
        let mut out = Grid::zeros(self.h, self.w, 1);
        for y in 0..self.h {
            for x in 0..self.w {
                out.set(y, x, 0, self.get(y, x, ch));
            }
        }
        out
    }

    /// Stacks single-channel grids of equal spatial shape into one grid.
    pub fn from_channels(parts: &[Grid]) -> Result<Grid> {
        if parts.is_empty() {
            return Err(Error::invalid("Grid::from_channels", "no channels given"));
        }
        let (h, w) = (parts[0].h, parts[0].w);
        for p in parts {
            if p.h != h || p.w != w || p.c != 1 {
                return Err(Error::shape("Grid::from_channels", "parts must be HxWx1 and equal"));
            }
        }
        let mut out = Grid::zeros(h, w, parts.len());
        for (ch, p) in parts.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    out.set(y, x, ch, p.get(y, x, 0));
                }
            }
        }
        Ok(out)
    }
}

/// Converts an integer label grid (values 0..k as whole f64s) to a k-channel
/// one-hot stack. Labels outside 0..k are rejected.
pub fn labels_to_onehot(labels: &Grid, k: usize) -> Result<Grid> {
    if labels.c() != 1 {
        return Err(Error::shape("labels_to_onehot", "label grid must be single-channel"));
    }
    if k == 0 {
        return Err(Error::invalid("labels_to_onehot", "k must be positive"));
    }
    let mut out = Grid::zeros(labels.h(), labels.w(), k);
    for y in 0..labels.h() {
        for x in 0..labels.w() {
            let v = labels.get(y, x, 0);
            let l = v as usize;
            if v.fract() != 0.0 || v < 0.0 || l >= k {
                return Err(Error::domain(
                    "labels_to_onehot",
                    format!("label {} at ({}, {}) outside 0..{}", v, y, x, k),
                ));
            }
            out.set(y, x, l, 1.0);
        }
    }
    Ok(out)
}
