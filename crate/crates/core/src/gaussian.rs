//! Canonical Gaussian primitives and their deformation.
//!
//! Every Gaussian shares the same axial coordinate and axial scale, and the
//! deformation never touches rotation, so the observable state under the fixed
//! axial view is exactly a 2D Gaussian with an in-plane angle. That 2D state is
//! what we store; the shared axial constants live on [`VolumeModel`].

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::SplitMix64;

/// Added to the covariance diagonal before inversion.
pub const COV_EPS: f64 = 1e-6;

/// Shared axial coordinate of every Gaussian.
pub const Z0: f64 = 0.0;
/// Shared axial scale of every Gaussian.
pub const SZ0: f64 = 1.0;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gaussian2D {
    /// Center in pixel coordinates; pixel `(i, j)` has its center at `(i + 0.5, j + 0.5)`.
    pub mean: [f64; 2],
    pub log_scale: [f64; 2],
    /// In-plane rotation in radians.
    pub rotation: f64,
    pub opacity_logit: f64,
    /// Grayscale value, clamped to `[0, 1]` when rendered.
    pub intensity: f64,
}

impl Gaussian2D {
    pub fn scale(&self) -> [f64; 2] {
        [self.log_scale[0].exp(), self.log_scale[1].exp()]
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn covariance(&self) -> Cov2 {
        build_covariance(self.log_scale, self.rotation)
    }
}

/// Symmetric 2x2 matrix stored as `[[xx, xy], [xy, yy]]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cov2 {
    pub xx: f64,
    pub xy: f64,
    pub yy: f64,
}

impl Cov2 {
    pub fn to_matrix(self) -> [[f64; 2]; 2] {
        [[self.xx, self.xy], [self.xy, self.yy]]
    }

    pub fn trace(self) -> f64 {
        self.xx + self.yy
    }

    pub fn det(self) -> f64 {
        self.xx * self.yy - self.xy * self.xy
    }

    pub fn max_eigenvalue(self) -> f64 {
        let mid = 0.5 * self.trace();
        let half_gap = (0.25 * (self.xx - self.yy).powi(2) + self.xy * self.xy).sqrt();
        mid + half_gap
    }

    /// Inverse of `self + COV_EPS * I`, as a conic `(a, b, c)` with
    /// `q(d) = a dx^2 + 2 b dx dy + c dy^2`.
    pub fn regularized_conic(self) -> [f64; 3] {
        let xx = self.xx + COV_EPS;
        let yy = self.yy + COV_EPS;
        let det = xx * yy - self.xy * self.xy;
        [yy / det, -self.xy / det, xx / det]
    }
}

/// `R(theta) diag(s_x^2, s_y^2) R(theta)^T` with `s = exp(log_scale)`.
pub fn build_covariance(log_scale: [f64; 2], rotation: f64) -> Cov2 {
    let vx = (2.0 * log_scale[0]).exp();
    let vy = (2.0 * log_scale[1]).exp();
    let (s, c) = rotation.sin_cos();
    Cov2 {
        xx: c * c * vx + s * s * vy,
        xy: c * s * (vx - vy),
        yy: s * s * vx + c * c * vy,
    }
}

/// Unnormalized Gaussian kernel `exp(-1/2 d^T Sigma^-1 d)` at point `p`.
pub fn eval_gaussian(g: &Gaussian2D, p: [f64; 2]) -> f64 {
    let [a, b, c] = g.covariance().regularized_conic();
    let dx = p[0] - g.mean[0];
    let dy = p[1] - g.mean[1];
    (-0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy)).exp()
}

/// Per-Gaussian offsets predicted by the deformation network.
///
/// There are deliberately no axial, axial-scale or rotation slots.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DeformationDelta {
    pub d_mean: [f64; 2],
    pub d_log_scale: [f64; 2],
    pub d_opacity_logit: f64,
}

impl DeformationDelta {
    pub const ZERO: DeformationDelta = DeformationDelta {
        d_mean: [0.0; 2],
        d_log_scale: [0.0; 2],
        d_opacity_logit: 0.0,
    };

    pub const ARITY: usize = 5;

    pub fn to_array(self) -> [f64; 5] {
        [
            self.d_mean[0],
            self.d_mean[1],
            self.d_log_scale[0],
            self.d_log_scale[1],
            self.d_opacity_logit,
        ]
    }

    pub fn from_array(a: [f64; 5]) -> Self {
        DeformationDelta {
            d_mean: [a[0], a[1]],
            d_log_scale: [a[2], a[3]],
            d_opacity_logit: a[4],
        }
    }
}

pub fn apply_deformation(g: &Gaussian2D, d: &DeformationDelta) -> Gaussian2D {
    Gaussian2D {
        mean: [g.mean[0] + d.d_mean[0], g.mean[1] + d.d_mean[1]],
        log_scale: [
            g.log_scale[0] + d.d_log_scale[0],
            g.log_scale[1] + d.d_log_scale[1],
        ],
        rotation: g.rotation,
        opacity_logit: g.opacity_logit + d.d_opacity_logit,
        intensity: g.intensity,
    }
}

/// Normalized depth of observed slice `k` out of `n`: `k / (n - 1)`.
pub fn timestamp_of_slice(k: usize, n: usize) -> Result<f64> {
    if n < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 observed slices to assign timestamps, got {n}"
        )));
    }
    if k >= n {
        return Err(Error::invalid(format!("slice index {k} out of range 0..{n}")));
    }
    Ok(k as f64 / (n - 1) as f64)
}

/// Initialization settings for a fresh canonical set.
#[derive(Clone, Debug, PartialEq)]
pub struct InitConfig {
    /// Maximum Gaussian count as a fraction of the pixel count.
    pub cap_fraction: f64,
    /// Initial isotropic scale in pixels.
    pub scale_px: f64,
    pub opacity: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            cap_fraction: 0.25,
            scale_px: 1.5,
            opacity: 0.1,
        }
    }
}

/// The canonical Gaussian set plus the frame it renders into.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeModel {
    pub gaussians: Vec<Gaussian2D>,
    pub z0: f64,
    pub sz0: f64,
    pub width: usize,
    pub height: usize,
}

impl VolumeModel {
    pub fn new(width: usize, height: usize, gaussians: Vec<Gaussian2D>) -> Self {
        VolumeModel {
            gaussians,
            z0: Z0,
            sz0: SZ0,
            width,
            height,
        }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    /// One Gaussian per 2x2 pixel cell, sampling intensity from `first_slice`.
    ///
    /// When the cap is below the cell count a seeded subset of cells is kept,
    /// still in raster order.
    pub fn initialize(first_slice: &Image, cfg: &InitConfig, rng: &mut SplitMix64) -> Result<Self> {
        let (w, h) = (first_slice.width(), first_slice.height());
        if w == 0 || h == 0 {
            return Err(Error::invalid("cannot initialize from an empty slice"));
        }
        if !(cfg.scale_px > 0.0) || !(cfg.opacity > 0.0 && cfg.opacity < 1.0) {
            return Err(Error::invalid("init scale must be > 0 and opacity in (0, 1)"));
        }
        let cells_x = w.div_ceil(2);
        let cells_y = h.div_ceil(2);
        let cells = cells_x * cells_y;
        let cap = ((cfg.cap_fraction * (w * h) as f64).floor() as usize).clamp(1, cells);

        let mut chosen: Vec<usize> = (0..cells).collect();
        if cap < cells {
            for i in 0..cap {
                let j = i + rng.below(cells - i);
                chosen.swap(i, j);
            }
            chosen.truncate(cap);
            chosen.sort_unstable();
        }

        let log_scale = cfg.scale_px.ln();
        let opacity_logit = logit(cfg.opacity);
        let gaussians = chosen
            .into_iter()
            .map(|cell| {
                let cx = (cell % cells_x) as f64 * 2.0 + 1.0;
                let cy = (cell / cells_x) as f64 * 2.0 + 1.0;
                let cx = cx.min(w as f64 - 0.5);
                let cy = cy.min(h as f64 - 0.5);
                Gaussian2D {
                    mean: [cx, cy],
                    log_scale: [log_scale; 2],
                    rotation: 0.0,
                    opacity_logit,
                    intensity: first_slice.sample_bilinear(cx, cy).clamp(0.0, 1.0),
                }
            })
            .collect();
        Ok(VolumeModel::new(w, h, gaussians))
    }
}
