//! Tile-binned front-to-back compositing of 2D Gaussians and its exact backward pass.
//!
//! All Gaussians sit at the same depth, so blending order is the canonical
//! creation order. Per pixel:
//!
//! ```text
//! C = sum_i c_i a_i T_i,   T_1 = 1,   T_{i+1} = T_i (1 - a_i),   a_i = min(o_i G_i, 0.99)
//! ```
//!
//! with a black background. Tiles are independent; per-tile gradient buffers
//! are reduced in tile order so results do not depend on the thread count.

use std::io::Write;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gaussian::{apply_deformation, sigmoid, Cov2, DeformationDelta, Gaussian2D, VolumeModel, COV_EPS};
use crate::image::Image;

#[derive(Clone, Debug, PartialEq)]
pub struct RenderSettings {
    pub tile_size: usize,
    /// Contributions with `o * G` below this are skipped.
    pub alpha_min: f64,
    /// `o * G` is clamped to this; clamped entries pass no gradient to `o` or `G`.
    pub alpha_max: f64,
    /// Footprint radius in standard deviations (Mahalanobis distance).
    pub footprint_sigma: f64,
    /// Compositing stops once transmittance drops below this.
    pub min_transmittance: f64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        RenderSettings {
            tile_size: 16,
            alpha_min: 1.0 / 255.0,
            alpha_max: 0.99,
            footprint_sigma: 3.0,
            min_transmittance: 1e-4,
        }
    }
}

/// One blended Gaussian at one pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AuxEntry {
    pub id: u32,
    /// Index of the Gaussian within its tile's list.
    pub local: u32,
    pub alpha: f64,
    /// Transmittance before this Gaussian was blended.
    pub transmittance: f64,
    pub clamped: bool,
}

#[derive(Clone, Debug, Default)]
struct TileAux {
    x0: usize,
    y0: usize,
    w: usize,
    h: usize,
    ids: Vec<u32>,
    entries: Vec<AuxEntry>,
    /// `(start, len)` into `entries`, row-major within the tile.
    spans: Vec<(u32, u32)>,
}

/// Per-pixel compositing records kept for the backward pass.
#[derive(Clone, Debug)]
pub struct RenderAux {
    width: usize,
    height: usize,
    tile_size: usize,
    tiles_x: usize,
    n_gaussians: usize,
    tiles: Vec<TileAux>,
    final_transmittance: Vec<f64>,
}

impl RenderAux {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn gaussian_count(&self) -> usize {
        self.n_gaussians
    }

    /// Blended Gaussians at pixel `(x, y)` in compositing order.
    pub fn pixel(&self, x: usize, y: usize) -> &[AuxEntry] {
        let tile = &self.tiles[(y / self.tile_size) * self.tiles_x + x / self.tile_size];
        let (s, n) = tile.spans[(y - tile.y0) * tile.w + (x - tile.x0)];
        &tile.entries[s as usize..(s + n) as usize]
    }

    pub fn final_transmittance(&self, x: usize, y: usize) -> f64 {
        self.final_transmittance[y * self.width + x]
    }

    /// Ids of the Gaussians binned into each tile, in tile order.
    pub fn tile_ids(&self) -> impl Iterator<Item = &[u32]> {
        self.tiles.iter().map(|t| t.ids.as_slice())
    }

    /// Text dump, one line per record: `x y id alpha T`, then `x y final T` per pixel.
    pub fn write_text<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for y in 0..self.height {
            for x in 0..self.width {
                for e in self.pixel(x, y) {
                    writeln!(out, "{x} {y} {} {:e} {:e}", e.id, e.alpha, e.transmittance)?;
                }
                writeln!(out, "{x} {y} final {:e}", self.final_transmittance(x, y))?;
            }
        }
        Ok(())
    }
}

/// Gradient of a scalar loss with respect to one Gaussian's parameters.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GaussianGrad {
    pub mean: [f64; 2],
    pub log_scale: [f64; 2],
    pub rotation: f64,
    pub opacity_logit: f64,
    pub intensity: f64,
}

impl GaussianGrad {
    /// The gradient with respect to the deformation offsets equals the
    /// gradient with respect to the deformed attribute.
    pub fn delta(&self) -> DeformationDelta {
        DeformationDelta {
            d_mean: self.mean,
            d_log_scale: self.log_scale,
            d_opacity_logit: self.opacity_logit,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RenderGrads {
    /// Gradients for the canonical Gaussians (deformed and canonical share
    /// mean, scale and opacity gradients; rotation and intensity are canonical only).
    pub gaussians: Vec<GaussianGrad>,
}

impl RenderGrads {
    pub fn deltas(&self) -> Vec<DeformationDelta> {
        self.gaussians.iter().map(GaussianGrad::delta).collect()
    }
}

#[derive(Clone, Copy, Debug)]
struct Splat {
    mean: [f64; 2],
    conic: [f64; 3],
    cov: Cov2,
    vx: f64,
    vy: f64,
    rotation: f64,
    opacity: f64,
    color: f64,
    color_passes: bool,
    radius: f64,
}

impl Splat {
    fn new(g: &Gaussian2D, footprint_sigma: f64) -> Self {
        let cov = g.covariance();
        let reg = Cov2 {
            xx: cov.xx + COV_EPS,
            xy: cov.xy,
            yy: cov.yy + COV_EPS,
        };
        Splat {
            mean: g.mean,
            conic: cov.regularized_conic(),
            cov,
            vx: (2.0 * g.log_scale[0]).exp(),
            vy: (2.0 * g.log_scale[1]).exp(),
            rotation: g.rotation,
            opacity: sigmoid(g.opacity_logit),
            color: g.intensity.clamp(0.0, 1.0),
            color_passes: (0.0..=1.0).contains(&g.intensity),
            radius: footprint_sigma * reg.max_eigenvalue().sqrt(),
        }
    }

    /// Mahalanobis distance squared from the pixel center.
    #[inline]
    fn quad(&self, px: f64, py: f64) -> (f64, f64, f64) {
        let dx = px - self.mean[0];
        let dy = py - self.mean[1];
        let [a, b, c] = self.conic;
        (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy, dx, dy)
    }
}

/// Differentiable rasterizer with fixed settings.
#[derive(Clone, Debug, Default)]
pub struct Renderer {
    pub settings: RenderSettings,
}

impl Renderer {
    pub fn new(settings: RenderSettings) -> Self {
        Renderer { settings }
    }

    fn splats(&self, model: &VolumeModel, deltas: Option<&[DeformationDelta]>) -> Result<Vec<Splat>> {
        let sigma = self.settings.footprint_sigma;
        match deltas {
            None => Ok(model.gaussians.iter().map(|g| Splat::new(g, sigma)).collect()),
            Some(d) if d.len() == model.len() => Ok(model
                .gaussians
                .iter()
                .zip(d)
                .map(|(g, d)| Splat::new(&apply_deformation(g, d), sigma))
                .collect()),
            Some(d) => Err(Error::mismatch(format!(
                "{} deformation deltas for {} Gaussians",
                d.len(),
                model.len()
            ))),
        }
    }

    fn bin(&self, splats: &[Splat], width: usize, height: usize) -> Vec<TileAux> {
        let ts = self.settings.tile_size;
        let tiles_x = width.div_ceil(ts);
        let tiles_y = height.div_ceil(ts);
        let mut tiles: Vec<TileAux> = (0..tiles_x * tiles_y)
            .map(|i| {
                let x0 = (i % tiles_x) * ts;
                let y0 = (i / tiles_x) * ts;
                TileAux {
                    x0,
                    y0,
                    w: ts.min(width - x0),
                    h: ts.min(height - y0),
                    ..TileAux::default()
                }
            })
            .collect();
        for (id, s) in splats.iter().enumerate() {
            if s.opacity < self.settings.alpha_min {
                continue;
            }
            // Pixel x is reached when |x + 0.5 - mean| <= radius.
            let lo_x = (s.mean[0] - s.radius - 0.5).ceil();
            let hi_x = (s.mean[0] + s.radius - 0.5).floor();
            let lo_y = (s.mean[1] - s.radius - 0.5).ceil();
            let hi_y = (s.mean[1] + s.radius - 0.5).floor();
            if !(lo_x <= hi_x && lo_y <= hi_y) || hi_x < 0.0 || hi_y < 0.0 {
                continue;
            }
            if lo_x > (width - 1) as f64 || lo_y > (height - 1) as f64 {
                continue;
            }
            let tx0 = lo_x.max(0.0) as usize / ts;
            let tx1 = (hi_x.min((width - 1) as f64) as usize) / ts;
            let ty0 = lo_y.max(0.0) as usize / ts;
            let ty1 = (hi_y.min((height - 1) as f64) as usize) / ts;
            for ty in ty0..=ty1 {
                for tx in tx0..=tx1 {
                    tiles[ty * tiles_x + tx].ids.push(id as u32);
                }
            }
        }
        tiles
    }

    /// Renders the canonical (undeformed) set.
    pub fn render_canonical(&self, model: &VolumeModel) -> Result<(Image, RenderAux)> {
        self.render_impl(model, None)
    }

    /// Renders the set deformed by one delta per Gaussian.
    pub fn render(&self, model: &VolumeModel, deltas: &[DeformationDelta]) -> Result<(Image, RenderAux)> {
        self.render_impl(model, Some(deltas))
    }

    fn render_impl(
        &self,
        model: &VolumeModel,
        deltas: Option<&[DeformationDelta]>,
    ) -> Result<(Image, RenderAux)> {
        let (width, height) = (model.width, model.height);
        if width == 0 || height == 0 {
            return Err(Error::invalid("cannot render an empty frame"));
        }
        let splats = self.splats(model, deltas)?;
        let mut tiles = self.bin(&splats, width, height);
        let st = &self.settings;
        let cutoff = st.footprint_sigma * st.footprint_sigma;

        let colors: Vec<(Vec<f64>, Vec<f64>)> = tiles
            .par_iter_mut()
            .map(|tile| {
                let mut out = Vec::with_capacity(tile.w * tile.h);
                let mut finals = Vec::with_capacity(tile.w * tile.h);
                tile.spans.reserve(tile.w * tile.h);
                for ly in 0..tile.h {
                    let py = (tile.y0 + ly) as f64 + 0.5;
                    for lx in 0..tile.w {
                        let px = (tile.x0 + lx) as f64 + 0.5;
                        let start = tile.entries.len() as u32;
                        let mut t = 1.0;
                        let mut c = 0.0;
                        for (local, &id) in tile.ids.iter().enumerate() {
                            let s = &splats[id as usize];
                            let (q, _, _) = s.quad(px, py);
                            if !(q <= cutoff) {
                                continue;
                            }
                            let raw = s.opacity * (-0.5 * q).exp();
                            if raw < st.alpha_min {
                                continue;
                            }
                            let clamped = raw > st.alpha_max;
                            let alpha = if clamped { st.alpha_max } else { raw };
                            tile.entries.push(AuxEntry {
                                id,
                                local: local as u32,
                                alpha,
                                transmittance: t,
                                clamped,
                            });
                            c += s.color * alpha * t;
                            t *= 1.0 - alpha;
                            if t < st.min_transmittance {
                                break;
                            }
                        }
                        tile.spans.push((start, tile.entries.len() as u32 - start));
                        out.push(c);
                        finals.push(t);
                    }
                }
                (out, finals)
            })
            .collect();

        let mut image = Image::zeros(width, height);
        let mut final_transmittance = vec![0.0; width * height];
        for (tile, (vals, finals)) in tiles.iter().zip(colors) {
            for ly in 0..tile.h {
                for lx in 0..tile.w {
                    let idx = (tile.y0 + ly) * width + tile.x0 + lx;
                    image.data_mut()[idx] = vals[ly * tile.w + lx];
                    final_transmittance[idx] = finals[ly * tile.w + lx];
                }
            }
        }
        let aux = RenderAux {
            width,
            height,
            tile_size: st.tile_size,
            tiles_x: width.div_ceil(st.tile_size),
            n_gaussians: model.len(),
            tiles,
            final_transmittance,
        };
        Ok((image, aux))
    }

    /// Exact gradients of `sum_p grad_image[p] * C[p]` with respect to every
    /// Gaussian parameter, for the render that produced `aux`.
    pub fn render_backward(
        &self,
        grad_image: &Image,
        aux: &RenderAux,
        model: &VolumeModel,
        deltas: Option<&[DeformationDelta]>,
    ) -> Result<RenderGrads> {
        if aux.n_gaussians != model.len() {
            return Err(Error::mismatch(format!(
                "render aux built for {} Gaussians, model has {}",
                aux.n_gaussians,
                model.len()
            )));
        }
        if grad_image.width() != aux.width || grad_image.height() != aux.height {
            return Err(Error::mismatch("gradient image does not match the rendered frame"));
        }
        if aux.tile_size != self.settings.tile_size {
            return Err(Error::mismatch("render aux produced with different settings"));
        }
        let splats = self.splats(model, deltas)?;
        let width = aux.width;

        // [mean_x, mean_y, conic_a, conic_b, conic_c, opacity_logit, color]
        let partials: Vec<Vec<[f64; 7]>> = aux
            .tiles
            .par_iter()
            .map(|tile| {
                let mut acc = vec![[0.0f64; 7]; tile.ids.len()];
                for ly in 0..tile.h {
                    let py = (tile.y0 + ly) as f64 + 0.5;
                    for lx in 0..tile.w {
                        let px = (tile.x0 + lx) as f64 + 0.5;
                        let g_pix = grad_image.data()[(tile.y0 + ly) * width + tile.x0 + lx];
                        if g_pix == 0.0 {
                            continue;
                        }
                        let (s0, n) = tile.spans[ly * tile.w + lx];
                        let entries = &tile.entries[s0 as usize..(s0 + n) as usize];
                        let mut suffix = 0.0;
                        for e in entries.iter().rev() {
                            let s = &splats[e.id as usize];
                            let slot = &mut acc[e.local as usize];
                            let at = e.alpha * e.transmittance;
                            slot[6] += g_pix * at;
                            let d_alpha = g_pix * (s.color * e.transmittance - suffix / (1.0 - e.alpha));
                            suffix += s.color * at;
                            if e.clamped {
                                continue;
                            }
                            let (q, dx, dy) = s.quad(px, py);
                            let gk = (-0.5 * q).exp();
                            slot[5] += d_alpha * gk * s.opacity * (1.0 - s.opacity);
                            // d/d(power) where G = exp(power), power = -q/2
                            let d_power = d_alpha * s.opacity * gk;
                            let [a, b, c] = s.conic;
                            slot[0] += d_power * (a * dx + b * dy);
                            slot[1] += d_power * (b * dx + c * dy);
                            slot[2] += d_power * (-0.5 * dx * dx);
                            slot[3] += d_power * (-dx * dy);
                            slot[4] += d_power * (-0.5 * dy * dy);
                        }
                    }
                }
                acc
            })
            .collect();

        let mut raw = vec![[0.0f64; 7]; model.len()];
        for (tile, acc) in aux.tiles.iter().zip(&partials) {
            for (&id, v) in tile.ids.iter().zip(acc) {
                let r = &mut raw[id as usize];
                for k in 0..7 {
                    r[k] += v[k];
                }
            }
        }

        let gaussians = splats
            .iter()
            .zip(&raw)
            .map(|(s, r)| chain_to_params(s, r))
            .collect();
        Ok(RenderGrads { gaussians })
    }
}

/// Pushes conic/opacity/color gradients through the inverse, the covariance
/// factorization and the clamps to the stored parameters.
fn chain_to_params(s: &Splat, r: &[f64; 7]) -> GaussianGrad {
    let (ga, gb, gc) = (r[2], r[3], r[4]);
    let m00 = s.cov.xx + COV_EPS;
    let m11 = s.cov.yy + COV_EPS;
    let m01 = s.cov.xy;
    let det = m00 * m11 - m01 * m01;
    let inv = 1.0 / det;
    let inv2 = inv * inv;
    let g00 = ga * (-m11 * m11 * inv2) + gb * (m01 * m11 * inv2) + gc * (inv - m00 * m11 * inv2);
    let g11 = ga * (inv - m11 * m00 * inv2) + gb * (m01 * m00 * inv2) + gc * (-m00 * m00 * inv2);
    let g01 = ga * (2.0 * m01 * m11 * inv2) + gb * (-inv - 2.0 * m01 * m01 * inv2) + gc * (2.0 * m01 * m00 * inv2);

    let (sn, cs) = s.rotation.sin_cos();
    let g_vx = g00 * cs * cs + g01 * cs * sn + g11 * sn * sn;
    let g_vy = g00 * sn * sn - g01 * cs * sn + g11 * cs * cs;
    let dv = s.vx - s.vy;
    let g_rot = g00 * (-2.0 * cs * sn * dv) + g01 * ((cs * cs - sn * sn) * dv) + g11 * (2.0 * cs * sn * dv);

    GaussianGrad {
        mean: [r[0], r[1]],
        log_scale: [2.0 * s.vx * g_vx, 2.0 * s.vy * g_vy],
        rotation: g_rot,
        opacity_logit: r[5],
        intensity: if s.color_passes { r[6] } else { 0.0 },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::logit;
    use crate::rng::SplitMix64;

    fn gauss(x: f64, y: f64, o: f64, c: f64) -> Gaussian2D {
        Gaussian2D {
            mean: [x, y],
            log_scale: [0.0, 0.0],
            rotation: 0.0,
            opacity_logit: logit(o),
            intensity: c,
        }
    }

    fn random_model(rng: &mut SplitMix64, n: usize, w: usize, h: usize) -> VolumeModel {
        let gs = (0..n)
            .map(|_| Gaussian2D {
                mean: [rng.uniform(0.0, w as f64), rng.uniform(0.0, h as f64)],
                log_scale: [rng.uniform(0.0, 1.2), rng.uniform(0.0, 1.2)],
                rotation: rng.uniform(-3.0, 3.0),
                opacity_logit: rng.uniform(-1.0, 3.0),
                intensity: rng.uniform(0.0, 1.0),
            })
            .collect();
        VolumeModel::new(w, h, gs)
    }

    #[test]
    fn single_gaussian_center() {
        let model = VolumeModel::new(4, 4, vec![gauss(1.5, 2.5, 0.5, 1.0)]);
        let (img, aux) = Renderer::default().render_canonical(&model).unwrap();
        assert!((img.get(1, 2) - 0.5).abs() < 1e-12);
        assert!((aux.final_transmittance(1, 2) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn coincident_pair_composites_front_to_back() {
        let g = gauss(1.5, 1.5, 0.5, 1.0);
        let model = VolumeModel::new(4, 4, vec![g, g]);
        let (img, aux) = Renderer::default().render_canonical(&model).unwrap();
        assert!((img.get(1, 1) - 0.75).abs() < 1e-12);
        let e = aux.pixel(1, 1);
        assert_eq!(e.len(), 2);
        assert_eq!(e[0].transmittance, 1.0);
        assert!((e[1].transmittance - 0.5).abs() < 1e-12);
    }

    #[test]
    fn empty_set_is_black() {
        let model = VolumeModel::new(20, 17, vec![]);
        let (img, aux) = Renderer::default().render_canonical(&model).unwrap();
        assert!(img.data().iter().all(|&v| v == 0.0));
        for y in 0..17 {
            for x in 0..20 {
                assert_eq!(aux.final_transmittance(x, y), 1.0);
                assert!(aux.pixel(x, y).is_empty());
            }
        }
    }

    #[test]
    fn delta_count_mismatch_rejected() {
        let model = VolumeModel::new(4, 4, vec![gauss(1.5, 1.5, 0.5, 1.0)]);
        assert!(Renderer::default().render(&model, &[]).is_err());
    }

    #[test]
    fn opacity_gradient_at_center() {
        let model = VolumeModel::new(4, 4, vec![gauss(1.5, 1.5, 0.5, 1.0)]);
        let r = Renderer::default();
        let (_, aux) = r.render_canonical(&model).unwrap();
        let mut grad = Image::zeros(4, 4);
        grad.set(1, 1, 1.0);
        let g = r.render_backward(&grad, &aux, &model, None).unwrap();
        // dC/do = c * G = 1; chain through the sigmoid: o (1 - o) = 0.25
        assert!((g.gaussians[0].opacity_logit - 0.25).abs() < 1e-12);
        assert!((g.gaussians[0].intensity - 0.5).abs() < 1e-12);
    }

    #[test]
    fn occluded_gaussians_get_no_gradient() {
        let front = gauss(1.5, 1.5, 0.999, 1.0);
        let hidden = gauss(1.5, 1.5, 0.8, 0.3);
        let model = VolumeModel::new(3, 3, vec![front, front, front, hidden]);
        let r = Renderer::default();
        let (_, aux) = r.render_canonical(&model).unwrap();
        let mut grad = Image::zeros(3, 3);
        grad.set(1, 1, 1.0);
        let g = r.render_backward(&grad, &aux, &model, None).unwrap();
        assert!(aux.pixel(1, 1).iter().all(|e| e.id != 3));
        assert_eq!(g.gaussians[3].opacity_logit, 0.0);
        assert_eq!(g.gaussians[3].intensity, 0.0);
    }

    #[test]
    fn energy_is_conserved() {
        let mut rng = SplitMix64::new(3);
        let model = random_model(&mut rng, 40, 37, 29);
        let (img, aux) = Renderer::default().render_canonical(&model).unwrap();
        for y in 0..29 {
            for x in 0..37 {
                let s: f64 = aux.pixel(x, y).iter().map(|e| e.alpha * e.transmittance).sum();
                assert!((s + aux.final_transmittance(x, y) - 1.0).abs() < 1e-9);
                assert!(img.get(x, y) <= 1.0 + 1e-9);
            }
        }
    }

    #[test]
    fn deterministic() {
        let mut rng = SplitMix64::new(5);
        let model = random_model(&mut rng, 60, 40, 40);
        let r = Renderer::default();
        let (a, _) = r.render_canonical(&model).unwrap();
        let (b, _) = r.render_canonical(&model).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn translation_equivariance() {
        let mut rng = SplitMix64::new(11);
        let mut model = random_model(&mut rng, 12, 48, 48);
        for g in &mut model.gaussians {
            g.mean = [rng.uniform(14.0, 30.0), rng.uniform(14.0, 30.0)];
        }
        let mut shifted = model.clone();
        for g in &mut shifted.gaussians {
            g.mean[0] += 5.0;
            g.mean[1] -= 3.0;
        }
        let r = Renderer::default();
        let (a, _) = r.render_canonical(&model).unwrap();
        let (b, _) = r.render_canonical(&shifted).unwrap();
        for y in 3..45 {
            for x in 0..43 {
                assert!((a.get(x, y) - b.get(x + 5, y - 3)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn aux_dump_lists_every_pixel() {
        let model = VolumeModel::new(2, 2, vec![gauss(0.5, 0.5, 0.5, 1.0)]);
        let (_, aux) = Renderer::default().render_canonical(&model).unwrap();
        let mut buf = Vec::new();
        aux.write_text(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().filter(|l| l.contains("final")).count(), 4);
        assert!(text.starts_with("0 0 0 5e-1 1e0"));
    }
}
