//! MSE, PSNR and Gaussian-window SSIM (with its gradient, used by the D-SSIM loss).

use std::fmt::Write as _;

use crate::error::Result;
use crate::image::Image;

pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_RADIUS: usize = 5;

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    a.check_shape(b)?;
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.len() as f64)
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

/// Peak signal-to-noise ratio for unit-range images; identical images give `+inf`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

fn window() -> [f64; 2 * SSIM_RADIUS + 1] {
    let mut w = [0.0; 2 * SSIM_RADIUS + 1];
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - SSIM_RADIUS as f64;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let sum: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= sum);
    w
}

/// Half-sample symmetric reflection (`d c b a | a b c d | d c b a`).
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// Separable Gaussian blur with reflective borders, and its adjoint.
struct Blur {
    w: [f64; 2 * SSIM_RADIUS + 1],
    width: usize,
    height: usize,
}

impl Blur {
    fn new(width: usize, height: usize) -> Self {
        Blur {
            w: window(),
            width,
            height,
        }
    }

    fn apply(&self, src: &[f64]) -> Vec<f64> {
        let (w, h) = (self.width, self.height);
        let r = SSIM_RADIUS as isize;
        let mut tmp = vec![0.0; w * h];
        for y in 0..h {
            let row = &src[y * w..(y + 1) * w];
            for x in 0..w {
                let mut acc = 0.0;
                for (k, wk) in self.w.iter().enumerate() {
                    acc += wk * row[reflect(x as isize + k as isize - r, w)];
                }
                tmp[y * w + x] = acc;
            }
        }
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for (k, wk) in self.w.iter().enumerate() {
                let sy = reflect(y as isize + k as isize - r, h);
                let src_row = &tmp[sy * w..(sy + 1) * w];
                let dst = &mut out[y * w..(y + 1) * w];
                for (d, s) in dst.iter_mut().zip(src_row) {
                    *d += wk * s;
                }
            }
        }
        out
    }

    fn adjoint(&self, g: &[f64]) -> Vec<f64> {
        let (w, h) = (self.width, self.height);
        let r = SSIM_RADIUS as isize;
        let mut tmp = vec![0.0; w * h];
        for y in 0..h {
            for (k, wk) in self.w.iter().enumerate() {
                let sy = reflect(y as isize + k as isize - r, h);
                let (src, dst) = (&g[y * w..(y + 1) * w], sy * w);
                for x in 0..w {
                    tmp[dst + x] += wk * src[x];
                }
            }
        }
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let gv = tmp[y * w + x];
                for (k, wk) in self.w.iter().enumerate() {
                    out[y * w + reflect(x as isize + k as isize - r, w)] += wk * gv;
                }
            }
        }
        out
    }
}

struct SsimMaps {
    mu_x: Vec<f64>,
    mu_y: Vec<f64>,
    /// Luminance term `(2 mx my + C1) / (mx^2 + my^2 + C1)` and its denominator.
    lum: Vec<f64>,
    lum_den: Vec<f64>,
    /// Contrast-structure term `(2 sxy + C2) / (sxx + syy + C2)` and its denominator.
    cs: Vec<f64>,
    cs_den: Vec<f64>,
}

fn ssim_maps(a: &Image, b: &Image, blur: &Blur) -> SsimMaps {
    let x = a.data();
    let y = b.data();
    let mu_x = blur.apply(x);
    let mu_y = blur.apply(y);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(p, q)| p * q).collect();
    let exx = blur.apply(&xx);
    let eyy = blur.apply(&yy);
    let exy = blur.apply(&xy);
    let n = x.len();
    let mut lum = Vec::with_capacity(n);
    let mut lum_den = Vec::with_capacity(n);
    let mut cs = Vec::with_capacity(n);
    let mut cs_den = Vec::with_capacity(n);
    for i in 0..n {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let sxx = exx[i] - mx * mx;
        let syy = eyy[i] - my * my;
        let sxy = exy[i] - mx * my;
        let ld = mx * mx + my * my + SSIM_C1;
        let cd = sxx + syy + SSIM_C2;
        lum.push((2.0 * mx * my + SSIM_C1) / ld);
        lum_den.push(ld);
        cs.push((2.0 * sxy + SSIM_C2) / cd);
        cs_den.push(cd);
    }
    SsimMaps {
        mu_x,
        mu_y,
        lum,
        lum_den,
        cs,
        cs_den,
    }
}

/// Mean local SSIM over an 11x11 Gaussian window (sigma 1.5), reflective borders.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.check_shape(b)?;
    if a.is_empty() {
        return Ok(1.0);
    }
    let blur = Blur::new(a.width(), a.height());
    let m = ssim_maps(a, b, &blur);
    let sum: f64 = m.lum.iter().zip(&m.cs).map(|(l, c)| l * c).sum();
    Ok(sum / a.len() as f64)
}

/// SSIM and its gradient with respect to `a`.
///
/// Written so that `a == b` yields an exactly zero gradient.
pub fn ssim_with_grad(a: &Image, b: &Image) -> Result<(f64, Image)> {
    a.check_shape(b)?;
    if a.is_empty() {
        return Ok((1.0, a.clone()));
    }
    let blur = Blur::new(a.width(), a.height());
    let m = ssim_maps(a, b, &blur);
    let n = a.len();
    let inv_n = 1.0 / n as f64;
    let mut value = 0.0;
    let mut d_mu = Vec::with_capacity(n);
    let mut d_exx = Vec::with_capacity(n);
    let mut d_exy = Vec::with_capacity(n);
    for i in 0..n {
        let (l, c) = (m.lum[i], m.cs[i]);
        let s = l * c;
        value += s;
        let (mx, my) = (m.mu_x[i], m.mu_y[i]);
        // S = l * c; l depends on mu_x, c on (exx - mx^2) and (exy - mx my).
        let dl_dmx = (2.0 * my - 2.0 * mx * l) / m.lum_den[i];
        let dc_dmx = (2.0 * mx * c - 2.0 * my) / m.cs_den[i];
        d_mu.push(inv_n * (c * dl_dmx + l * dc_dmx));
        d_exx.push(inv_n * (-s / m.cs_den[i]));
        d_exy.push(inv_n * (2.0 * l / m.cs_den[i]));
    }
    let g_mu = blur.adjoint(&d_mu);
    let g_exx = blur.adjoint(&d_exx);
    let g_exy = blur.adjoint(&d_exy);
    let grad: Vec<f64> = a
        .data()
        .iter()
        .zip(b.data())
        .enumerate()
        .map(|(i, (x, y))| g_mu[i] + 2.0 * x * g_exx[i] + y * g_exy[i])
        .collect();
    Ok((value * inv_n, Image::from_vec(a.width(), a.height(), grad)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SliceScore {
    pub id: String,
    pub t: f64,
    pub psnr: f64,
    pub ssim: f64,
}

/// Per-slice and mean quality of one method.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub method: String,
    pub rows: Vec<SliceScore>,
}

impl MetricReport {
    pub fn new(method: impl Into<String>) -> Self {
        MetricReport {
            method: method.into(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, id: impl Into<String>, t: f64, result: &Image, truth: &Image) -> Result<()> {
        self.rows.push(SliceScore {
            id: id.into(),
            t,
            psnr: psnr(result, truth)?,
            ssim: ssim(result, truth)?,
        });
        Ok(())
    }

    pub fn mean_psnr(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.psnr))
    }

    pub fn mean_ssim(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.ssim))
    }

    /// Aligned text table, one row per slice plus a mean row.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<24} {:>8} {:>10} {:>8}", self.method, "t", "psnr_db", "ssim");
        for r in &self.rows {
            let _ = writeln!(s, "{:<24} {:>8.4} {:>10.4} {:>8.5}", r.id, r.t, r.psnr, r.ssim);
        }
        let _ = writeln!(s, "{:<24} {:>8} {:>10.4} {:>8.5}", "mean", "", self.mean_psnr(), self.mean_ssim());
        s
    }

    /// `key = value` lines: `<method>.<id>.psnr`, `<method>.mean.psnr`, ...
    pub fn key_values(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            let _ = writeln!(s, "{}.{}.t = {}", self.method, r.id, r.t);
            let _ = writeln!(s, "{}.{}.psnr = {}", self.method, r.id, r.psnr);
            let _ = writeln!(s, "{}.{}.ssim = {}", self.method, r.id, r.ssim);
        }
        let _ = writeln!(s, "{}.mean.psnr = {}", self.method, self.mean_psnr());
        let _ = writeln!(s, "{}.mean.ssim = {}", self.method, self.mean_ssim());
        let _ = writeln!(s, "{}.count = {}", self.method, self.rows.len());
        s
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}
