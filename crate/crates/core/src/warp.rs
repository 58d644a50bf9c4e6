//! Dense displacement fields and image warping.
//!
//! A displacement field is an HxWx2 grid in pixel units: channel 0 holds dy,
//! channel 1 dx. Warping pulls values from the moving image onto the fixed
//! grid, `out(p) = img(p + d(p))`, sampling with border clamp (coordinates
//! outside the grid read the nearest edge value). The differentiable warp
//! lives on the tape ([`crate::tape::Tape::warp`]); this module holds the
//! plain (non-recorded) versions used by synthesis and evaluation, plus the
//! shared bilinear sampling kernel.

use crate::error::{Error, Result};
use crate::grid::Grid;

/// One bilinear sampling stencil: clamped corner indices, fractional
/// weights, and whether the coordinate derivative is live on each axis
/// (it is zero wherever the coordinate clamps at the border).
#[derive(Debug, Clone, Copy)]
pub(crate) struct BilinearTap {
    y0: usize,
    y1: usize,
    x0: usize,
    x1: usize,
    wy: f64,
    wx: f64,
    dy_active: bool,
    dx_active: bool,
}

pub(crate) fn sample_tap(h: usize, w: usize, sy: f64, sx: f64) -> BilinearTap {
    let max_y = (h - 1) as f64;
    let max_x = (w - 1) as f64;
    let cy = sy.clamp(0.0, max_y);
    let cx = sx.clamp(0.0, max_x);
    let fy = cy.floor();
    let fx = cx.floor();
    let y0 = fy as usize;
    let x0 = fx as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    BilinearTap {
        y0,
        y1,
        x0,
        x1,
        wy: cy - fy,
        wx: cx - fx,
        dy_active: sy > 0.0 && sy < max_y,
        dx_active: sx > 0.0 && sx < max_x,
    }
}

impl BilinearTap {
    pub(crate) fn gather(&self, g: &Grid, ch: usize) -> f64 {
        let (wy, wx) = (self.wy, self.wx);
        (1.0 - wy) * (1.0 - wx) * g.get(self.y0, self.x0, ch)
            + (1.0 - wy) * wx * g.get(self.y0, self.x1, ch)
            + wy * (1.0 - wx) * g.get(self.y1, self.x0, ch)
            + wy * wx * g.get(self.y1, self.x1, ch)
    }

    /// Adds `v` distributed by the bilinear weights (adjoint of gather).
    pub(crate) fn scatter(&self, g: &mut Grid, ch: usize, v: f64) {
        let (wy, wx) = (self.wy, self.wx);
        g.add_at(self.y0, self.x0, ch, (1.0 - wy) * (1.0 - wx) * v);
        g.add_at(self.y0, self.x1, ch, (1.0 - wy) * wx * v);
        g.add_at(self.y1, self.x0, ch, wy * (1.0 - wx) * v);
        g.add_at(self.y1, self.x1, ch, wy * wx * v);
    }

    /// d(gather)/d(sy), d(gather)/d(sx); zero where the coordinate clamps.
    pub(crate) fn coord_grad(&self, g: &Grid, ch: usize) -> (f64, f64) {
        let (wy, wx) = (self.wy, self.wx);
        let gy = if self.dy_active {
            (1.0 - wx) * (g.get(self.y1, self.x0, ch) - g.get(self.y0, self.x0, ch))
                + wx * (g.get(self.y1, self.x1, ch) - g.get(self.y0, self.x1, ch))
        } else {
            0.0
        };
        let gx = if self.dx_active {
            (1.0 - wy) * (g.get(self.y0, self.x1, ch) - g.get(self.y0, self.x0, ch))
                + wy * (g.get(self.y1, self.x1, ch) - g.get(self.y1, self.x0, ch))
        } else {
            0.0
        };
        (gy, gx)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interp {
    Bilinear,
    /// Rounds to the nearest pixel (ties away from zero). Keeps integer
    /// label values exact; never use on a gradient path.
    Nearest,
}

/// The zero field: warping by it is the identity map.
pub fn identity_displacement(h: usize, w: usize) -> Grid {
    Grid::zeros(h, w, 2)
}

/// A constant translation field (dy, dx) in pixels.
pub fn uniform_displacement(h: usize, w: usize, dy: f64, dx: f64) -> Grid {
    let mut g = Grid::zeros(h, w, 2);
    for y in 0..h {
        for x in 0..w {
            g.set(y, x, 0, dy);
            g.set(y, x, 1, dx);
        }
    }
    g
}

fn check_disp(img: &Grid, disp: &Grid, op: &'static str) -> Result<()> {
    if disp.c() != 2 || disp.h() != img.h() || disp.w() != img.w() {
        return Err(Error::shape(
            op,
            format!("img {:?} vs disp {:?} (want HxWx2)", img.shape(), disp.shape()),
        ));
    }
    Ok(())
}

/// Plain (non-differentiable) warp, applied channel-wise.
pub fn warp_image(img: &Grid, disp: &Grid, interp: Interp) -> Result<Grid> {
    check_disp(img, disp, "warp_image")?;
    let (h, w, c) = img.shape();
    let mut out = Grid::zeros(h, w, c);
    for y in 0..h {
        for x in 0..w {
            let sy = y as f64 + disp.get(y, x, 0);
            let sx = x as f64 + disp.get(y, x, 1);
            match interp {
                Interp::Bilinear => {
                    let tap = sample_tap(h, w, sy, sx);
                    for ch in 0..c {
                        out.set(y, x, ch, tap.gather(img, ch));
                    }
                }
                Interp::Nearest => {
                    let ny = sy.round().clamp(0.0, (h - 1) as f64) as usize;
                    let nx = sx.round().clamp(0.0, (w - 1) as f64) as usize;
                    for ch in 0..c {
                        out.set(y, x, ch, img.get(ny, nx, ch));
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Bilinear warp of a one-hot label stack. Rejects inputs whose per-pixel
/// channel sums stray from 1 by more than 1e-6; bilinear weights then keep
/// interior channel sums at 1 up to rounding.
pub fn warp_onehot(onehot: &Grid, disp: &Grid) -> Result<Grid> {
    check_disp(onehot, disp, "warp_onehot")?;
    for y in 0..onehot.h() {
        for x in 0..onehot.w() {
            let s: f64 = (0..onehot.c()).map(|ch| onehot.get(y, x, ch)).sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::domain(
                    "warp_onehot",
                    format!("channel sum {} at ({}, {}) is not 1", s, y, x),
                ));
            }
        }
    }
    warp_image(onehot, disp, Interp::Bilinear)
}

/// Composition such that warping by the result equals warping by `d1` first,
/// then by `d2`: `(d1 . d2)(p) = d2(p) + d1(p + d2(p))`, with `d1` resampled
/// bilinearly at the displaced positions.
pub fn compose(d1: &Grid, d2: &Grid) -> Result<Grid> {
    if d1.shape() != d2.shape() || d1.c() != 2 {
        return Err(Error::shape(
            "compose",
            format!("{:?} vs {:?} (want equal HxWx2)", d1.shape(), d2.shape()),
        ));
    }
    let (h, w, _) = d1.shape();
    let mut out = Grid::zeros(h, w, 2);
    for y in 0..h {
        for x in 0..w {
            let dy2 = d2.get(y, x, 0);
            let dx2 = d2.get(y, x, 1);
            let tap = sample_tap(h, w, y as f64 + dy2, x as f64 + dx2);
            out.set(y, x, 0, dy2 + tap.gather(d1, 0));
            out.set(y, x, 1, dx2 + tap.gather(d1, 1));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Grid {
        let mut g = Grid::zeros(h, w, 1);
        for y in 0..h {
            for x in 0..w {
                g.set(y, x, 0, (y * w + x) as f64);
            }
        }
        g
    }

    #[test]
    fn identity_displacement_is_bit_identity() {
        let img = ramp(5, 4);
        let out = warp_image(&img, &identity_displacement(5, 4), Interp::Bilinear).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn integer_shift_pulls_next_row_and_clamps_last() {
        // dy = 1: out(y, x) = img(y + 1, x); the last row reads itself.
        let img = ramp(4, 3);
        let d = uniform_displacement(4, 3, 1.0, 0.0);
        let out = warp_image(&img, &d, Interp::Bilinear).unwrap();
        for y in 0..3 {
            for x in 0..3 {
                assert_eq!(out.get(y, x, 0), img.get(y + 1, x, 0));
            }
        }
        for x in 0..3 {
            assert_eq!(out.get(3, x, 0), img.get(3, x, 0));
        }
    }

    #[test]
    fn integer_shift_dx_matches_index_oracle() {
        let img = ramp(3, 5);
        let d = uniform_displacement(3, 5, 0.0, 2.0);
        let out = warp_image(&img, &d, Interp::Bilinear).unwrap();
        for y in 0..3 {
            for x in 0..5 {
                let sx = (x + 2).min(4);
                assert_eq!(out.get(y, x, 0), img.get(y, sx, 0));
            }
        }
    }

    #[test]
    fn half_pixel_shift_averages_neighbors() {
        let img = ramp(1, 4);
        let d = uniform_displacement(1, 4, 0.0, 0.5);
        let out = warp_image(&img, &d, Interp::Bilinear).unwrap();
        for x in 0..3 {
            let expect = 0.5 * img.get(0, x, 0) + 0.5 * img.get(0, x + 1, 0);
            assert!((out.get(0, x, 0) - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn nearest_keeps_labels_integer() {
        let mut labels = Grid::zeros(4, 4, 1);
        labels.set(1, 1, 0, 2.0);
        labels.set(2, 2, 0, 1.0);
        let d = uniform_displacement(4, 4, 0.7, -0.3);
        let out = warp_image(&labels, &d, Interp::Nearest).unwrap();
        for &v in out.data() {
            assert!(v == 0.0 || v == 1.0 || v == 2.0);
            assert_eq!(v.fract(), 0.0);
        }
    }

    #[test]
    fn compose_of_translations_adds() {
        let d1 = uniform_displacement(6, 6, 1.0, -0.5);
        let d2 = uniform_displacement(6, 6, 0.25, 2.0);
        let c = compose(&d1, &d2).unwrap();
        for y in 0..6 {
            for x in 0..6 {
                assert!((c.get(y, x, 0) - 1.25).abs() < 1e-15);
                assert!((c.get(y, x, 1) - 1.5).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn compose_matches_sequential_warp_in_interior() {
        // Non-constant smooth fields: compare warp-by-composition against
        // two sequential warps away from the border.
        let (h, w) = (9, 9);
        let img = ramp(h, w);
        let mut d1 = Grid::zeros(h, w, 2);
        let mut d2 = Grid::zeros(h, w, 2);
        for y in 0..h {
            for x in 0..w {
                d1.set(y, x, 0, 0.3 * (x as f64 / w as f64));
                d1.set(y, x, 1, -0.2 * (y as f64 / h as f64));
                d2.set(y, x, 0, 0.15);
                d2.set(y, x, 1, 0.25 * (x as f64 / w as f64));
            }
        }
        let once = warp_image(&img, &compose(&d1, &d2).unwrap(), Interp::Bilinear).unwrap();
        let twice =
            warp_image(&warp_image(&img, &d1, Interp::Bilinear).unwrap(), &d2, Interp::Bilinear)
                .unwrap();
        // Sequential warping re-interpolates the intermediate image, so the
        // two paths agree only up to interpolation error of the smooth ramp.
        for y in 2..h - 2 {
            for x in 2..w - 2 {
                assert!((once.get(y, x, 0) - twice.get(y, x, 0)).abs() < 0.05);
            }
        }
    }

    #[test]
    fn warp_onehot_preserves_interior_channel_sums() {
        let mut oh = Grid::zeros(6, 6, 3);
        for y in 0..6 {
            for x in 0..6 {
                let l = if y < 2 { 0 } else if x < 3 { 1 } else { 2 };
                oh.set(y, x, l, 1.0);
            }
        }
        let d = uniform_displacement(6, 6, 0.4, -0.6);
        let out = warp_onehot(&oh, &d).unwrap();
        for y in 1..5 {
            for x in 1..5 {
                let s: f64 = (0..3).map(|ch| out.get(y, x, ch)).sum();
                assert!((s - 1.0).abs() < 1e-9, "sum {} at ({}, {})", s, y, x);
            }
        }
    }

    #[test]
    fn warp_onehot_rejects_non_onehot() {
        let mut oh = Grid::zeros(3, 3, 2);
        for y in 0..3 {
            for x in 0..3 {
                oh.set(y, x, 0, 1.0);
            }
        }
        oh.set(1, 1, 1, 0.5); // sum 1.5 at one pixel
        let d = identity_displacement(3, 3);
        assert!(warp_onehot(&oh, &d).is_err());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let img = ramp(4, 4);
        let d = identity_displacement(5, 4);
        assert!(warp_image(&img, &d, Interp::Bilinear).is_err());
    }
}
