//! Finite-difference gradient oracles shared by the integration tests and the
//! acceptance suite.
#![allow(dead_code)]

use slicesplat::deform::{DeformNet, NetConfig, NetParams};
use slicesplat::gaussian::{DeformationDelta, Gaussian2D, VolumeModel};
use slicesplat::raster::{RenderAux, Renderer};
use slicesplat::rng::SplitMix64;
use slicesplat::train::photometric_loss;
use slicesplat::Image;

pub const REL_TOL: f64 = 1e-3;
pub const ABS_FLOOR: f64 = 1e-6;

#[derive(Debug, Default, Clone)]
pub struct FdStats {
    pub checked: usize,
    /// Coordinates where every step size crossed a compositing branch.
    pub skipped: usize,
    /// Over coordinates whose gradient magnitude exceeds the floor.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub failures: Vec<String>,
}

impl FdStats {
    pub fn merge(&mut self, o: FdStats) {
        self.checked += o.checked;
        self.skipped += o.skipped;
        self.max_rel_err = self.max_rel_err.max(o.max_rel_err);
        self.max_abs_err = self.max_abs_err.max(o.max_abs_err);
        self.failures.extend(o.failures);
    }

    pub fn ok(&self) -> bool {
        self.failures.is_empty() && self.checked > 0 && self.skipped * 20 <= self.checked
    }

    fn record(&mut self, label: String, analytic: f64, numeric: f64) {
        self.checked += 1;
        let err = (analytic - numeric).abs();
        let mag = analytic.abs().max(numeric.abs());
        let rel = err / mag.max(f64::MIN_POSITIVE);
        self.max_abs_err = self.max_abs_err.max(err);
        if mag >= ABS_FLOOR {
            self.max_rel_err = self.max_rel_err.max(rel);
        }
        if err >= ABS_FLOOR && rel >= REL_TOL {
            self.failures.push(format!("{label}: analytic {analytic:e} numeric {numeric:e}"));
        }
    }
}

pub fn random_scene(rng: &mut SplitMix64, n: usize, w: usize, h: usize) -> VolumeModel {
    let gs = (0..n)
        .map(|_| Gaussian2D {
            mean: [rng.uniform(1.0, w as f64 - 1.0), rng.uniform(1.0, h as f64 - 1.0)],
            log_scale: [rng.uniform(0.2, 1.3), rng.uniform(0.2, 1.3)],
            rotation: rng.uniform(-3.0, 3.0),
            opacity_logit: rng.uniform(-2.0, 1.5),
            intensity: rng.uniform(0.05, 1.0),
        })
        .collect();
    VolumeModel::new(w, h, gs)
}

pub fn random_deltas(rng: &mut SplitMix64, n: usize) -> Vec<DeformationDelta> {
    (0..n)
        .map(|_| DeformationDelta {
            d_mean: [rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5)],
            d_log_scale: [rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2)],
            d_opacity_logit: rng.uniform(-0.3, 0.3),
        })
        .collect()
}

fn param_mut(g: &mut Gaussian2D, k: usize) -> &mut f64 {
    match k {
        0 => &mut g.mean[0],
        1 => &mut g.mean[1],
        2 => &mut g.log_scale[0],
        3 => &mut g.log_scale[1],
        4 => &mut g.rotation,
        5 => &mut g.opacity_logit,
        _ => &mut g.intensity,
    }
}

const PARAM_NAMES: [&str; 7] = ["mean.x", "mean.y", "ls_x", "ls_y", "theta", "opacity_logit", "intensity"];

fn delta_mut(d: &mut DeformationDelta, k: usize) -> &mut f64 {
    match k {
        0 => &mut d.d_mean[0],
        1 => &mut d.d_mean[1],
        2 => &mut d.d_log_scale[0],
        3 => &mut d.d_log_scale[1],
        _ => &mut d.d_opacity_logit,
    }
}

/// Which Gaussians touch which pixels, and whether their alpha was clamped.
fn signature(aux: &RenderAux) -> Vec<(u32, bool)> {
    let mut s = Vec::new();
    for y in 0..aux.height() {
        for x in 0..aux.width() {
            s.extend(aux.pixel(x, y).iter().map(|e| (e.id, e.clamped)));
            s.push((u32::MAX, false));
        }
    }
    s
}

fn weighted(img: &Image, w: &Image) -> f64 {
    img.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

/// Central difference of `f` at step `h`, retrying smaller steps while the
/// two sides land on different branches (as reported by `f`'s second value).
fn branch_safe_fd<S: PartialEq>(h0: f64, mut f: impl FnMut(f64) -> (f64, S)) -> Option<f64> {
    let mut h = h0;
    for _ in 0..4 {
        let (fp, sp) = f(h);
        let (fm, sm) = f(-h);
        if sp == sm {
            return Some((fp - fm) / (2.0 * h));
        }
        h /= 10.0;
    }
    None
}

/// Checks every Gaussian parameter and, with deltas, every delta component
/// of `sum_p w_p C_p` for one random scene.
pub fn check_raster_scene(seed: u64, n: usize, size: usize, with_deltas: bool, h: f64) -> FdStats {
    let mut rng = SplitMix64::new(seed);
    let model = random_scene(&mut rng, n, size, size);
    let deltas = with_deltas.then(|| random_deltas(&mut rng, n));
    let weights = Image::from_fn(size, size, |_, _| rng.uniform(-1.0, 1.0));
    let r = Renderer::default();
    let render = |m: &VolumeModel, d: &Option<Vec<DeformationDelta>>| match d {
        Some(d) => r.render(m, d).unwrap(),
        None => r.render_canonical(m).unwrap(),
    };
    let (_, aux) = render(&model, &deltas);
    let grads = r.render_backward(&weights, &aux, &model, deltas.as_deref()).unwrap();
    let mut stats = FdStats::default();

    for i in 0..n {
        let ga = grads.gaussians[i];
        let analytic = [ga.mean[0], ga.mean[1], ga.log_scale[0], ga.log_scale[1], ga.rotation, ga.opacity_logit, ga.intensity];
        for (k, &a) in analytic.iter().enumerate() {
            let num = branch_safe_fd(h, |step| {
                let mut m = model.clone();
                *param_mut(&mut m.gaussians[i], k) += step;
                let (img, aux) = render(&m, &deltas);
                (weighted(&img, &weights), signature(&aux))
            });
            match num {
                Some(v) => stats.record(format!("scene {seed} gaussian {i} {}", PARAM_NAMES[k]), a, v),
                None => stats.skipped += 1,
            }
        }
        if let Some(d) = &deltas {
            let gd = grads.gaussians[i].delta().to_array();
            for (k, &a) in gd.iter().enumerate() {
                let num = branch_safe_fd(h, |step| {
                    let mut dd = d.clone();
                    *delta_mut(&mut dd[i], k) += step;
                    let (img, aux) = render(&model, &Some(dd));
                    (weighted(&img, &weights), signature(&aux))
                });
                match num {
                    Some(v) => stats.record(format!("scene {seed} gaussian {i} delta[{k}]"), a, v),
                    None => stats.skipped += 1,
                }
            }
        }
    }
    stats
}

fn perturbed_params(net: &DeformNet, rng: &mut SplitMix64, amp: f64) -> NetParams {
    let mut p = net.init_params(rng);
    for s in p.slices_mut() {
        for v in s.iter_mut() {
            *v += rng.uniform(-amp, amp);
        }
    }
    p
}

fn net_objective(net: &DeformNet, p: &NetParams, means: &[[f64; 2]], t: f64, u: &[DeformationDelta]) -> f64 {
    net.batched_forward(p, means, t)
        .unwrap()
        .iter()
        .zip(u)
        .map(|(d, w)| d.to_array().iter().zip(w.to_array()).map(|(a, b)| a * b).sum::<f64>())
        .sum()
}

/// Checks every network parameter and every input mean of
/// `sum_i <u_i, delta_i>` for a random batch.
pub fn check_deform(seed: u64, config: NetConfig, batch: usize, h: f64) -> FdStats {
    let mut rng = SplitMix64::new(seed);
    let net = DeformNet::new(config, 16, 16).unwrap();
    let params = perturbed_params(&net, &mut rng, 0.2);
    let means: Vec<[f64; 2]> = (0..batch).map(|_| [rng.uniform(0.0, 16.0), rng.uniform(0.0, 16.0)]).collect();
    let t = rng.uniform(0.0, 1.0);
    let u: Vec<DeformationDelta> = (0..batch)
        .map(|_| {
            let mut a = [0.0; 5];
            a.iter_mut().for_each(|v| *v = rng.uniform(-1.0, 1.0));
            DeformationDelta::from_array(a)
        })
        .collect();
    let (_, cache) = net.forward_with_cache(&params, &means, t).unwrap();
    let (gp, gm) = net.backward(&params, &cache, &u, true).unwrap();
    let gm = gm.unwrap();
    let mut stats = FdStats::default();

    // ReLU kinks: accept a coordinate only when two step sizes agree.
    let fd = |f: &dyn Fn(f64) -> f64| {
        let a = (f(h) - f(-h)) / (2.0 * h);
        let b = (f(h / 4.0) - f(-h / 4.0)) / (h / 2.0);
        ((a - b).abs() <= ABS_FLOOR.max(1e-4 * a.abs())).then_some(a)
    };
    let analytic: Vec<f64> = gp.iter().collect();
    let flat_len = analytic.len();
    for (idx, &a) in analytic.iter().enumerate().take(flat_len) {
        let f = |step: f64| {
            let mut p = params.clone();
            let mut k = idx;
            for s in p.slices_mut() {
                if k < s.len() {
                    s[k] += step;
                    break;
                }
                k -= s.len();
            }
            net_objective(&net, &p, &means, t, &u)
        };
        match fd(&f) {
            Some(v) => stats.record(format!("net seed {seed} param {idx}"), a, v),
            None => stats.skipped += 1,
        }
    }
    for (i, g) in gm.iter().enumerate() {
        for (j, &a) in g.iter().enumerate() {
            let f = |step: f64| {
                let mut m = means.clone();
                m[i][j] += step;
                net_objective(&net, &params, &m, t, &u)
            };
            match fd(&f) {
                Some(v) => stats.record(format!("net seed {seed} mean {i}.{j}"), a, v),
                None => stats.skipped += 1,
            }
        }
    }
    stats
}

/// Checks the photometric loss gradient with respect to every rendered pixel.
pub fn check_photometric(seed: u64, size: usize, dssim_weight: f64, h: f64) -> FdStats {
    let mut rng = SplitMix64::new(seed);
    let r = Image::from_fn(size, size, |_, _| rng.uniform(0.0, 1.0));
    let t = Image::from_fn(size, size, |_, _| rng.uniform(0.0, 1.0));
    let loss = photometric_loss(&r, &t, dssim_weight).unwrap();
    let mut stats = FdStats::default();
    for p in 0..r.len() {
        if (r.data()[p] - t.data()[p]).abs() < 10.0 * h {
            // L1 kink inside the stencil.
            stats.skipped += 1;
            continue;
        }
        let f = |step: f64| {
            let mut rr = r.clone();
            rr.data_mut()[p] += step;
            photometric_loss(&rr, &t, dssim_weight).unwrap().total
        };
        let num = (f(h) - f(-h)) / (2.0 * h);
        stats.record(format!("photometric seed {seed} pixel {p}"), loss.grad.data()[p], num);
    }
    stats
}
