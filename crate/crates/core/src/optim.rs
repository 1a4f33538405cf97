//! Adam, per-group learning rates, and adaptive density control.

use crate::error::{Error, Result};
use crate::gaussian::{logit, sigmoid, Gaussian2D, VolumeModel};
use crate::raster::GaussianGrad;
use crate::rng::SplitMix64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Position,
    Scale,
    Rotation,
    Opacity,
    Intensity,
    Deformation,
}

impl ParamGroup {
    pub const GAUSSIAN: [ParamGroup; 5] = [
        ParamGroup::Position,
        ParamGroup::Scale,
        ParamGroup::Rotation,
        ParamGroup::Opacity,
        ParamGroup::Intensity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Position => "position",
            ParamGroup::Scale => "scale",
            ParamGroup::Rotation => "rotation",
            ParamGroup::Opacity => "opacity",
            ParamGroup::Intensity => "intensity",
            ParamGroup::Deformation => "deformation",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        ParamGroup::GAUSSIAN
            .into_iter()
            .chain([ParamGroup::Deformation])
            .find(|g| g.name() == name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter group `{name}`")))
    }

    fn width(self) -> usize {
        match self {
            ParamGroup::Position | ParamGroup::Scale => 2,
            _ => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
        }
    }
}

/// First/second moments for one flat parameter block.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl Moments {
    pub fn zeros(n: usize) -> Self {
        Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }
}

impl AdamConfig {
    /// One bias-corrected Adam update of `params` in place.
    pub fn step(
        &self,
        group: ParamGroup,
        params: &mut [f64],
        grads: &[f64],
        moments: &mut Moments,
        lr: f64,
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != moments.len() {
            return Err(Error::mismatch(format!(
                "{}: {} params, {} grads, {} moments",
                group.name(),
                params.len(),
                grads.len(),
                moments.len()
            )));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient { group: group.name() });
        }
        moments.step += 1;
        let bc1 = 1.0 - self.beta1.powi(moments.step as i32);
        let bc2 = 1.0 - self.beta2.powi(moments.step as i32);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(moments.m.iter_mut())
            .zip(moments.v.iter_mut())
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Learning-rate schedule for every parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub position_init: f64,
    pub position_final: f64,
    /// Position rates are in units of the image extent; the trainer multiplies
    /// by it. Zero or less means the larger image side.
    pub position_extent: f64,
    pub scale: f64,
    pub rotation: f64,
    pub opacity: f64,
    pub intensity: f64,
    pub deformation_init: f64,
    pub deformation_final: f64,
    pub total_iters: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            position_init: 1.6e-4,
            position_final: 1.6e-6,
            position_extent: 0.0,
            scale: 5e-3,
            rotation: 1e-3,
            opacity: 5e-2,
            intensity: 2.5e-3,
            deformation_init: 8e-4,
            deformation_final: 1.6e-6,
            total_iters: 18_000,
        }
    }
}

fn log_lerp(a: f64, b: f64, r: f64) -> f64 {
    if r <= 0.0 {
        a
    } else if r >= 1.0 {
        b
    } else {
        (a.ln() * (1.0 - r) + b.ln() * r).exp()
    }
}

impl LrSchedule {
    pub fn rate(&self, group: ParamGroup, iter: usize) -> f64 {
        let r = if self.total_iters == 0 {
            1.0
        } else {
            iter as f64 / self.total_iters as f64
        };
        match group {
            ParamGroup::Position => log_lerp(self.position_init, self.position_final, r),
            ParamGroup::Scale => self.scale,
            ParamGroup::Rotation => self.rotation,
            ParamGroup::Opacity => self.opacity,
            ParamGroup::Intensity => self.intensity,
            ParamGroup::Deformation => log_lerp(self.deformation_init, self.deformation_final, r),
        }
    }

    /// Rate by group name, for config-driven callers.
    pub fn rate_by_name(&self, group: &str, iter: usize) -> Result<f64> {
        Ok(self.rate(ParamGroup::from_name(group)?, iter))
    }
}

/// Adam moments for the Gaussian attribute groups, aligned with the model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaussianAdam {
    pub position: Moments,
    pub scale: Moments,
    pub rotation: Moments,
    pub opacity: Moments,
    pub intensity: Moments,
}

impl GaussianAdam {
    pub fn new(n: usize) -> Self {
        GaussianAdam {
            position: Moments::zeros(2 * n),
            scale: Moments::zeros(2 * n),
            rotation: Moments::zeros(n),
            opacity: Moments::zeros(n),
            intensity: Moments::zeros(n),
        }
    }

    pub fn group(&self, g: ParamGroup) -> &Moments {
        match g {
            ParamGroup::Position => &self.position,
            ParamGroup::Scale => &self.scale,
            ParamGroup::Rotation => &self.rotation,
            ParamGroup::Opacity => &self.opacity,
            ParamGroup::Intensity => &self.intensity,
            ParamGroup::Deformation => panic!("deformation moments live with the network"),
        }
    }

    fn group_mut(&mut self, g: ParamGroup) -> &mut Moments {
        match g {
            ParamGroup::Position => &mut self.position,
            ParamGroup::Scale => &mut self.scale,
            ParamGroup::Rotation => &mut self.rotation,
            ParamGroup::Opacity => &mut self.opacity,
            ParamGroup::Intensity => &mut self.intensity,
            ParamGroup::Deformation => panic!("deformation moments live with the network"),
        }
    }

    /// Number of Gaussians every group is aligned with, if they agree.
    pub fn aligned_len(&self) -> Option<usize> {
        let n = self.rotation.len();
        let ok = self.position.len() == 2 * n
            && self.scale.len() == 2 * n
            && self.opacity.len() == n
            && self.intensity.len() == n;
        ok.then_some(n)
    }

    /// Steps every Gaussian group; `lr(group)` supplies the rate.
    /// Intensities are projected back into `[0, 1]` afterwards.
    pub fn step(
        &mut self,
        adam: &AdamConfig,
        model: &mut VolumeModel,
        grads: &[GaussianGrad],
        lr: impl Fn(ParamGroup) -> f64,
    ) -> Result<()> {
        let n = model.len();
        if grads.len() != n || self.aligned_len() != Some(n) {
            return Err(Error::mismatch("Gaussian gradients or moments misaligned with the model"));
        }
        for group in ParamGroup::GAUSSIAN {
            let k = group.width();
            let mut p = Vec::with_capacity(k * n);
            let mut g = Vec::with_capacity(k * n);
            for (gs, gr) in model.gaussians.iter().zip(grads) {
                match group {
                    ParamGroup::Position => {
                        p.extend_from_slice(&gs.mean);
                        g.extend_from_slice(&gr.mean);
                    }
                    ParamGroup::Scale => {
                        p.extend_from_slice(&gs.log_scale);
                        g.extend_from_slice(&gr.log_scale);
                    }
                    ParamGroup::Rotation => {
                        p.push(gs.rotation);
                        g.push(gr.rotation);
                    }
                    ParamGroup::Opacity => {
                        p.push(gs.opacity_logit);
                        g.push(gr.opacity_logit);
                    }
                    ParamGroup::Intensity => {
                        p.push(gs.intensity);
                        g.push(gr.intensity);
                    }
                    ParamGroup::Deformation => unreachable!(),
                }
            }
            adam.step(group, &mut p, &g, self.group_mut(group), lr(group))?;
            for (i, gs) in model.gaussians.iter_mut().enumerate() {
                match group {
                    ParamGroup::Position => gs.mean = [p[2 * i], p[2 * i + 1]],
                    ParamGroup::Scale => gs.log_scale = [p[2 * i], p[2 * i + 1]],
                    ParamGroup::Rotation => gs.rotation = p[i],
                    ParamGroup::Opacity => gs.opacity_logit = p[i],
                    ParamGroup::Intensity => gs.intensity = p[i].clamp(0.0, 1.0),
                    ParamGroup::Deformation => unreachable!(),
                }
            }
        }
        Ok(())
    }

    fn rebuild(&self, plan: &[Origin]) -> GaussianAdam {
        let pick = |src: &Moments, k: usize| {
            let mut out = Moments {
                m: Vec::with_capacity(k * plan.len()),
                v: Vec::with_capacity(k * plan.len()),
                step: src.step,
            };
            for o in plan {
                match *o {
                    Origin::Kept(i) | Origin::Cloned(i) => {
                        out.m.extend_from_slice(&src.m[k * i..k * i + k]);
                        out.v.extend_from_slice(&src.v[k * i..k * i + k]);
                    }
                    Origin::Fresh => {
                        out.m.extend(std::iter::repeat_n(0.0, k));
                        out.v.extend(std::iter::repeat_n(0.0, k));
                    }
                }
            }
            out
        };
        GaussianAdam {
            position: pick(&self.position, 2),
            scale: pick(&self.scale, 2),
            rotation: pick(&self.rotation, 1),
            opacity: pick(&self.opacity, 1),
            intensity: pick(&self.intensity, 1),
        }
    }
}

/// Accumulated image-plane positional gradient per Gaussian.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DensityStats {
    pub grad_accum: Vec<f64>,
    pub count: Vec<u32>,
}

impl DensityStats {
    pub fn new(n: usize) -> Self {
        DensityStats {
            grad_accum: vec![0.0; n],
            count: vec![0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.count.len()
    }

    pub fn is_empty(&self) -> bool {
        self.count.is_empty()
    }

    /// Adds one observation. `grad_ndc` is the mean gradient expressed in
    /// normalized device units; only Gaussians that touched the frame count.
    pub fn accumulate(&mut self, id: usize, grad_ndc: [f64; 2]) {
        self.grad_accum[id] += grad_ndc[0].hypot(grad_ndc[1]);
        self.count[id] += 1;
    }

    pub fn mean_grad(&self, id: usize) -> f64 {
        if self.count[id] == 0 {
            0.0
        } else {
            self.grad_accum[id] / self.count[id] as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DensityConfig {
    pub grad_threshold: f64,
    /// Gaussians whose largest scale is at most this clone; larger ones split.
    pub clone_max_scale_px: f64,
    pub split_factor: f64,
    pub prune_opacity: f64,
    /// Hard cap on the Gaussian count.
    pub max_gaussians: usize,
    pub start_iter: usize,
    pub end_iter: usize,
    pub interval: usize,
    pub opacity_reset_iter: Option<usize>,
}

impl Default for DensityConfig {
    fn default() -> Self {
        DensityConfig {
            grad_threshold: 2e-4,
            clone_max_scale_px: 4.0,
            split_factor: 1.6,
            prune_opacity: 0.005,
            max_gaussians: usize::MAX,
            start_iter: 500,
            end_iter: 3000,
            interval: 100,
            opacity_reset_iter: Some(1500),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Origin {
    Kept(usize),
    Cloned(usize),
    Fresh,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DensityReport {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

/// Samples a point from `N(mean, Sigma)` of `g`.
fn sample_offset(g: &Gaussian2D, rng: &mut SplitMix64) -> [f64; 2] {
    let s = g.scale();
    let (u, v) = (rng.normal() * s[0], rng.normal() * s[1]);
    let (sn, cs) = g.rotation.sin_cos();
    [cs * u - sn * v, sn * u + cs * v]
}

/// Clones small high-gradient Gaussians, splits large ones, prunes transparent
/// ones. Survivors keep their relative order; new Gaussians are appended.
/// Moments follow their Gaussians (clones copy, splits start at zero) and the
/// stats are reset.
pub fn densify_and_prune(
    model: &mut VolumeModel,
    stats: &mut DensityStats,
    adam: &mut GaussianAdam,
    cfg: &DensityConfig,
    rng: &mut SplitMix64,
) -> Result<DensityReport> {
    let n = model.len();
    if stats.len() != n || adam.aligned_len() != Some(n) {
        return Err(Error::mismatch("density stats or moments misaligned with the model"));
    }
    let mut report = DensityReport::default();
    let mut budget = cfg.max_gaussians.saturating_sub(n);
    let mut removed = vec![false; n];
    let mut appended: Vec<(Gaussian2D, Origin)> = Vec::new();

    for i in 0..n {
        if stats.mean_grad(i) < cfg.grad_threshold {
            continue;
        }
        let g = model.gaussians[i];
        let s = g.scale();
        if s[0].max(s[1]) <= cfg.clone_max_scale_px {
            if budget == 0 {
                continue;
            }
            budget -= 1;
            let off = sample_offset(&g, rng);
            let copy = Gaussian2D {
                mean: [g.mean[0] + off[0], g.mean[1] + off[1]],
                ..g
            };
            appended.push((copy, Origin::Cloned(i)));
            report.cloned += 1;
        } else {
            // Two children replace the parent: net +1.
            if budget == 0 {
                continue;
            }
            budget -= 1;
            let shrink = cfg.split_factor.ln();
            for _ in 0..2 {
                let off = sample_offset(&g, rng);
                let child = Gaussian2D {
                    mean: [g.mean[0] + off[0], g.mean[1] + off[1]],
                    log_scale: [g.log_scale[0] - shrink, g.log_scale[1] - shrink],
                    ..g
                };
                appended.push((child, Origin::Fresh));
            }
            removed[i] = true;
            report.split += 1;
        }
    }

    let mut plan = Vec::with_capacity(n + appended.len());
    let mut gaussians = Vec::with_capacity(n + appended.len());
    let candidates = model
        .gaussians
        .iter()
        .enumerate()
        .filter(|(i, _)| !removed[*i])
        .map(|(i, g)| (*g, Origin::Kept(i)))
        .chain(appended);
    for (g, origin) in candidates {
        if g.opacity() < cfg.prune_opacity {
            report.pruned += 1;
            continue;
        }
        gaussians.push(g);
        plan.push(origin);
    }
    model.gaussians = gaussians;
    *adam = adam.rebuild(&plan);
    *stats = DensityStats::new(model.len());
    Ok(report)
}

/// Caps every opacity at 0.01; lower opacities are left bitwise untouched.
/// Opacity moments are cleared.
pub fn reset_opacity(model: &mut VolumeModel, adam: Option<&mut GaussianAdam>) {
    let target = logit(0.01);
    for g in &mut model.gaussians {
        if sigmoid(g.opacity_logit) > 0.01 {
            g.opacity_logit = target;
        }
    }
    if let Some(adam) = adam {
        adam.opacity.m.iter_mut().for_each(|v| *v = 0.0);
        adam.opacity.v.iter_mut().for_each(|v| *v = 0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(x: f64, scale: f64, opacity: f64) -> Gaussian2D {
        Gaussian2D {
            mean: [x, 5.0],
            log_scale: [scale.ln(), scale.ln()],
            rotation: 0.2,
            opacity_logit: logit(opacity),
            intensity: 0.7,
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let adam = AdamConfig::default();
        let mut p = vec![1.0, -2.0];
        let mut m = Moments::zeros(2);
        adam.step(ParamGroup::Scale, &mut p, &[0.0, 0.0], &mut m, 0.1).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(m.step, 1);
    }

    #[test]
    fn first_step_is_signed_lr() {
        let adam = AdamConfig::default();
        let mut p = vec![0.0, 0.0];
        let mut m = Moments::zeros(2);
        adam.step(ParamGroup::Rotation, &mut p, &[3.0, -0.02], &mut m, 0.01).unwrap();
        assert!((p[0] + 0.01).abs() < 1e-12);
        assert!((p[1] - 0.01).abs() < 1e-12);
    }

    #[test]
    fn constant_gradient_monotone_descent() {
        // Scalar simulation: every step must move strictly downhill.
        let adam = AdamConfig::default();
        let mut p = vec![5.0];
        let mut m = Moments::zeros(1);
        let mut last = p[0];
        for _ in 0..100 {
            adam.step(ParamGroup::Opacity, &mut p, &[0.5], &mut m, 0.01).unwrap();
            assert!(p[0] < last);
            last = p[0];
        }
        // With a constant gradient each Adam step is exactly lr.
        assert!((p[0] - (5.0 - 100.0 * 0.01)).abs() < 1e-9);
    }

    #[test]
    fn nan_gradient_names_group() {
        let adam = AdamConfig::default();
        let mut p = vec![0.0];
        let mut m = Moments::zeros(1);
        let err = adam
            .step(ParamGroup::Intensity, &mut p, &[f64::NAN], &mut m, 0.1)
            .unwrap_err();
        assert!(err.to_string().contains("intensity"));
    }

    #[test]
    fn schedule_endpoints() {
        let s = LrSchedule {
            total_iters: 30_000,
            ..LrSchedule::default()
        };
        assert_eq!(s.rate(ParamGroup::Position, 0), 1.6e-4);
        assert_eq!(s.rate(ParamGroup::Position, 30_000), 1.6e-6);
        assert!((s.rate(ParamGroup::Position, 15_000) - 1.6e-5).abs() < 1e-18);
        assert_eq!(s.rate(ParamGroup::Opacity, 123), 5e-2);
        assert_eq!(s.rate(ParamGroup::Deformation, 0), 8e-4);
        assert!(s.rate_by_name("sh_coeffs", 0).is_err());
    }

    fn setup(gs: Vec<Gaussian2D>) -> (VolumeModel, DensityStats, GaussianAdam) {
        let n = gs.len();
        (VolumeModel::new(16, 16, gs), DensityStats::new(n), GaussianAdam::new(n))
    }

    #[test]
    fn no_change_when_quiet() {
        let (mut m, mut st, mut ad) = setup(vec![g(1.0, 1.0, 0.5), g(3.0, 6.0, 0.2)]);
        let before = m.clone();
        let r = densify_and_prune(&mut m, &mut st, &mut ad, &DensityConfig::default(), &mut SplitMix64::new(1)).unwrap();
        assert_eq!(r, DensityReport::default());
        assert_eq!(m, before);
    }

    #[test]
    fn clone_appends_copy_with_moments() {
        let (mut m, mut st, mut ad) = setup(vec![g(1.0, 1.0, 0.5), g(3.0, 1.0, 0.5)]);
        st.accumulate(0, [1e-3, 0.0]);
        ad.position.m[0] = 0.25;
        let r = densify_and_prune(&mut m, &mut st, &mut ad, &DensityConfig::default(), &mut SplitMix64::new(2)).unwrap();
        assert_eq!(r.cloned, 1);
        assert_eq!(m.len(), 3);
        assert_eq!(m.gaussians[2].intensity, m.gaussians[0].intensity);
        assert_ne!(m.gaussians[2].mean, m.gaussians[0].mean);
        assert_eq!(ad.aligned_len(), Some(3));
        assert_eq!(ad.position.m[4], 0.25);
        assert_eq!(st.len(), 3);
    }

    #[test]
    fn split_replaces_large_gaussian() {
        let (mut m, mut st, mut ad) = setup(vec![g(1.0, 1.0, 0.5), g(8.0, 6.0, 0.5)]);
        st.accumulate(1, [0.0, 1e-3]);
        ad.scale.v[2] = 9.0;
        let r = densify_and_prune(&mut m, &mut st, &mut ad, &DensityConfig::default(), &mut SplitMix64::new(3)).unwrap();
        assert_eq!(r.split, 1);
        assert_eq!(m.len(), 3);
        assert_eq!(m.gaussians[0], g(1.0, 1.0, 0.5));
        for child in &m.gaussians[1..] {
            assert!((child.scale()[0] - 6.0 / 1.6).abs() < 1e-9);
        }
        assert!(ad.scale.v[2..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn prune_transparent() {
        let (mut m, mut st, mut ad) = setup(vec![g(1.0, 1.0, 0.5), g(3.0, 1.0, 0.001), g(5.0, 1.0, 0.005)]);
        let r = densify_and_prune(&mut m, &mut st, &mut ad, &DensityConfig::default(), &mut SplitMix64::new(4)).unwrap();
        assert_eq!(r.pruned, 1);
        assert_eq!(m.len(), 2);
        assert_eq!(m.gaussians[1].mean[0], 5.0);
        assert_eq!(ad.aligned_len(), Some(2));
    }

    #[test]
    fn cap_is_respected() {
        let gs: Vec<_> = (0..4).map(|i| g(i as f64, 1.0, 0.5)).collect();
        let (mut m, mut st, mut ad) = setup(gs);
        for i in 0..4 {
            st.accumulate(i, [1.0, 0.0]);
        }
        let cfg = DensityConfig {
            max_gaussians: 6,
            ..DensityConfig::default()
        };
        densify_and_prune(&mut m, &mut st, &mut ad, &cfg, &mut SplitMix64::new(5)).unwrap();
        assert_eq!(m.len(), 6);
    }

    #[test]
    fn opacity_reset() {
        let mut m = VolumeModel::new(8, 8, vec![g(1.0, 1.0, 0.9), g(2.0, 1.0, 0.005)]);
        reset_opacity(&mut m, None);
        assert!((m.gaussians[0].opacity() - 0.01).abs() < 1e-12);
        assert!((m.gaussians[1].opacity() - 0.005).abs() < 1e-12);
        let once = m.clone();
        reset_opacity(&mut m, None);
        assert_eq!(m, once);
    }
}
