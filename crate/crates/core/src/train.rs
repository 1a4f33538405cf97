//! Losses and the three-stage training loop with EMA teacher-student bootstrapping.
//!
//! Stage 1 fits the canonical Gaussians with the deformation network frozen,
//! stage 2 trains both jointly, and stage 3 interleaves supervised steps with
//! pseudo-supervised steps where an EMA copy of the network (the teacher)
//! renders targets at unobserved depths for the student.

use std::fmt;

use crate::deform::{DeformNet, ForwardCache, NetConfig, NetParams};
use crate::error::{Error, Result};
use crate::gaussian::{DeformationDelta, InitConfig, VolumeModel};
use crate::image::Image;
use crate::metrics::ssim_with_grad;
use crate::optim::{
    densify_and_prune, reset_opacity, AdamConfig, DensityConfig, DensityStats, GaussianAdam, LrSchedule,
    Moments, ParamGroup,
};
use crate::raster::{RenderSettings, Renderer};
use crate::rng::SplitMix64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RampKind {
    Linear,
    Exponential,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub warmup_iters: usize,
    pub joint_iters: usize,
    pub pseudo_iters: usize,
    pub ema_decay: f64,
    pub dssim_weight: f64,
    pub pseudo_ramp_start: usize,
    pub pseudo_ramp_end: usize,
    pub pseudo_weight_lo: f64,
    pub pseudo_weight_hi: f64,
    pub pseudo_ramp: RampKind,
    /// Supervised steps per pseudo step at the start of stage 3 ...
    pub interleave_start: f64,
    /// ... and at `interleave_ramp_end`.
    pub interleave_end: f64,
    pub interleave_ramp_end: usize,
    /// Fraction of stage 3 during which pseudo targets are gap midpoints only.
    pub pseudo_early_fraction: f64,
    /// When false, stage 3 runs supervised steps only.
    pub teacher_student: bool,
    /// Feed the network's gradient with respect to its input means back into the Gaussians.
    pub deform_mean_grad: bool,
    pub seed: u64,
    pub lr: LrSchedule,
    pub density: DensityConfig,
    /// Gaussian cap as a multiple of the initial count.
    pub gaussian_cap_multiplier: f64,
    pub net: NetConfig,
    pub init: InitConfig,
    pub render: RenderSettings,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            warmup_iters: 2000,
            joint_iters: 1000,
            pseudo_iters: 15_000,
            ema_decay: 0.995,
            dssim_weight: 0.2,
            pseudo_ramp_start: 3000,
            pseudo_ramp_end: 10_000,
            pseudo_weight_lo: 0.1,
            pseudo_weight_hi: 1.0,
            pseudo_ramp: RampKind::Linear,
            interleave_start: 4.0,
            interleave_end: 1.0,
            interleave_ramp_end: 10_000,
            pseudo_early_fraction: 1.0 / 3.0,
            teacher_student: true,
            deform_mean_grad: false,
            seed: 0,
            lr: LrSchedule::default(),
            density: DensityConfig::default(),
            gaussian_cap_multiplier: 4.0,
            net: NetConfig::default(),
            init: InitConfig::default(),
            render: RenderSettings::default(),
        }
    }
}

impl TrainConfig {
    /// Desk-scale settings: the smaller network, slower opacity updates,
    /// a faster deformation rate and no opacity reset.
    pub fn desk() -> Self {
        let d = TrainConfig::default();
        TrainConfig {
            net: NetConfig::desk(),
            lr: LrSchedule {
                opacity: 5e-3,
                deformation_init: 4e-3,
                ..d.lr
            },
            density: DensityConfig {
                opacity_reset_iter: None,
                ..d.density
            },
            ..d
        }
    }

    pub fn teacher_init_iter(&self) -> usize {
        self.warmup_iters + self.joint_iters
    }

    pub fn total_iters(&self) -> usize {
        self.warmup_iters + self.joint_iters + self.pseudo_iters
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(Error::invalid(format!("ema_decay {} must lie in (0, 1)", self.ema_decay)));
        }
        if self.pseudo_ramp_start < self.teacher_init_iter() {
            return Err(Error::invalid(format!(
                "pseudo ramp starts at {} before the teacher exists ({})",
                self.pseudo_ramp_start,
                self.teacher_init_iter()
            )));
        }
        if self.pseudo_ramp_end < self.pseudo_ramp_start {
            return Err(Error::invalid("pseudo ramp ends before it starts"));
        }
        if !(0.0..=1.0).contains(&self.dssim_weight) {
            return Err(Error::invalid("dssim_weight must lie in [0, 1]"));
        }
        if !(self.pseudo_weight_lo > 0.0 && self.pseudo_weight_hi >= self.pseudo_weight_lo) {
            return Err(Error::invalid("pseudo weights must satisfy 0 < lo <= hi"));
        }
        if !(self.interleave_start >= 0.0 && self.interleave_end >= 0.0) {
            return Err(Error::invalid("interleave ratios must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.pseudo_early_fraction) {
            return Err(Error::invalid("pseudo_early_fraction must lie in [0, 1]"));
        }
        if self.gaussian_cap_multiplier < 1.0 {
            return Err(Error::invalid("gaussian_cap_multiplier must be >= 1"));
        }
        Ok(())
    }

    /// Weight of the pseudo-supervision loss at `iter`.
    pub fn pseudo_weight(&self, iter: usize) -> f64 {
        if iter < self.teacher_init_iter() {
            return 0.0;
        }
        let (lo, hi) = (self.pseudo_weight_lo, self.pseudo_weight_hi);
        if iter <= self.pseudo_ramp_start {
            return lo;
        }
        if iter >= self.pseudo_ramp_end {
            return hi;
        }
        let r = (iter - self.pseudo_ramp_start) as f64 / (self.pseudo_ramp_end - self.pseudo_ramp_start) as f64;
        match self.pseudo_ramp {
            RampKind::Linear => lo + (hi - lo) * r,
            RampKind::Exponential => lo * (hi / lo).powf(r),
        }
    }

    /// Fraction of stage-3 steps that are pseudo steps at `iter`.
    pub fn pseudo_fraction(&self, iter: usize) -> f64 {
        let start = self.teacher_init_iter();
        let r = if self.interleave_ramp_end <= start {
            1.0
        } else {
            ((iter.saturating_sub(start)) as f64 / (self.interleave_ramp_end - start) as f64).min(1.0)
        };
        let ratio = self.interleave_start + (self.interleave_end - self.interleave_start) * r;
        1.0 / (ratio + 1.0)
    }

    pub fn stage_of(&self, iter: usize) -> Stage {
        if iter < self.warmup_iters {
            Stage::Warmup
        } else if iter < self.teacher_init_iter() {
            Stage::Joint
        } else {
            Stage::Bootstrap
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Canonical Gaussians only; the network is frozen.
    Warmup,
    /// Gaussians and network on observed slices.
    Joint,
    /// Interleaved supervised and teacher-supervised steps.
    Bootstrap,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::Warmup => 1,
            Stage::Joint => 2,
            Stage::Bootstrap => 3,
        }
    }
}

/// Observed slices only; held-out ground truth never reaches the trainer.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSet {
    pub images: Vec<Image>,
    pub timestamps: Vec<f64>,
    /// Axial step between observed slices in lateral pixel units.
    pub anisotropy: usize,
}

impl TrainingSet {
    pub fn new(images: Vec<Image>, timestamps: Vec<f64>, anisotropy: usize) -> Result<Self> {
        if images.len() < 2 {
            return Err(Error::invalid(format!(
                "training needs at least 2 observed slices, got {}",
                images.len()
            )));
        }
        if images.len() != timestamps.len() {
            return Err(Error::mismatch("one timestamp per observed slice is required"));
        }
        if images.iter().any(|im| !im.same_shape(&images[0])) {
            return Err(Error::mismatch("observed slices have differing dimensions"));
        }
        if timestamps.windows(2).any(|w| !(w[0] < w[1])) || timestamps.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::invalid("timestamps must be strictly increasing within [0, 1]"));
        }
        Ok(TrainingSet {
            images,
            timestamps,
            anisotropy: anisotropy.max(1),
        })
    }

    pub fn width(&self) -> usize {
        self.images[0].width()
    }

    pub fn height(&self) -> usize {
        self.images[0].height()
    }
}

#[derive(Clone, Debug)]
pub struct PhotometricLoss {
    pub total: f64,
    pub l1: f64,
    /// `(1 - SSIM) / 2`.
    pub dssim: f64,
    /// Gradient of `total` with respect to the rendered image.
    pub grad: Image,
}

/// `(1 - lambda) * mean|r - t| + lambda * (1 - SSIM(r, t)) / 2`.
pub fn photometric_loss(rendered: &Image, target: &Image, dssim_weight: f64) -> Result<PhotometricLoss> {
    rendered.check_shape(target)?;
    let n = rendered.len() as f64;
    let lambda = dssim_weight;
    let mut l1 = 0.0;
    let mut grad = Vec::with_capacity(rendered.len());
    for (r, t) in rendered.data().iter().zip(target.data()) {
        let d = r - t;
        l1 += d.abs();
        let sign = if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        };
        grad.push((1.0 - lambda) * sign / n);
    }
    l1 /= n;
    let (dssim, grad) = if lambda > 0.0 {
        let (s, gs) = ssim_with_grad(rendered, target)?;
        for (g, v) in grad.iter_mut().zip(gs.data()) {
            *g -= 0.5 * lambda * v;
        }
        ((1.0 - s) / 2.0, grad)
    } else {
        (0.0, grad)
    };
    Ok(PhotometricLoss {
        total: (1.0 - lambda) * l1 + lambda * dssim,
        l1,
        dssim,
        grad: Image::from_vec(rendered.width(), rendered.height(), grad)?,
    })
}

/// `teacher <- alpha * teacher + (1 - alpha) * student`, elementwise.
pub fn ema_update(teacher: &mut NetParams, student: &NetParams, alpha: f64) -> Result<()> {
    if !teacher.same_shape(student) {
        return Err(Error::mismatch("teacher and student networks differ in shape"));
    }
    let k = 1.0 - alpha;
    for (t, s) in teacher.slices_mut().into_iter().zip(student.slices()) {
        for (tv, sv) in t.iter_mut().zip(s) {
            // Written as an increment so identical parameters stay bitwise fixed.
            *tv += k * (sv - *tv);
        }
    }
    Ok(())
}

/// Draws an unobserved depth: gap midpoints early, the full interleaved grid later.
pub fn pseudo_timestamp(observed: &[f64], anisotropy: usize, early: bool, rng: &mut SplitMix64) -> Result<f64> {
    if observed.len() < 2 {
        return Err(Error::invalid("need at least two observed timestamps"));
    }
    let gap = rng.below(observed.len() - 1);
    let (a, b) = (observed[gap], observed[gap + 1]);
    let frac = if early || anisotropy < 2 {
        0.5
    } else {
        (1 + rng.below(anisotropy - 1)) as f64 / anisotropy as f64
    };
    let t = a + (b - a) * frac;
    debug_assert!(t > a && t < b);
    Ok(t)
}

/// Full optimizer state of a training run; enough to resume bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub iter: usize,
    pub model: VolumeModel,
    pub student: NetParams,
    pub teacher: Option<NetParams>,
    pub gaussian_adam: GaussianAdam,
    pub net_adam: Moments,
    pub density: DensityStats,
    pub rng: SplitMix64,
    pub pseudo_credit: f64,
    pub initial_count: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepKind {
    Supervised,
    Pseudo,
}

/// One line of the loss log.
#[derive(Clone, Debug, PartialEq)]
pub struct LossRecord {
    pub iter: usize,
    pub stage: Stage,
    pub kind: StepKind,
    pub loss: f64,
    pub l1: f64,
    pub dssim: f64,
    pub pseudo_weight: f64,
    pub lr_position: f64,
    pub gaussians: usize,
}

impl LossRecord {
    pub const HEADER: &'static str = "iter stage loss l1 dssim pseudo_w lr_pos n_gauss";
}

impl fmt::Display for LossRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {:e} {:e} {:e} {:e} {:e} {}",
            self.iter,
            self.stage.number(),
            self.loss,
            self.l1,
            self.dssim,
            self.pseudo_weight,
            self.lr_position,
            self.gaussians
        )
    }
}

pub struct Trainer<'a> {
    config: TrainConfig,
    data: &'a TrainingSet,
    net: DeformNet,
    renderer: Renderer,
    adam: AdamConfig,
    state: TrainState,
}

impl<'a> Trainer<'a> {
    pub fn new(data: &'a TrainingSet, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let net = DeformNet::new(config.net.clone(), data.width(), data.height())?;
        let mut rng = SplitMix64::new(config.seed);
        let mut init_rng = rng.fork();
        let mut net_rng = rng.fork();
        let model = VolumeModel::initialize(&data.images[0], &config.init, &mut init_rng)?;
        let student = net.init_params(&mut net_rng);
        let n = model.len();
        let state = TrainState {
            iter: 0,
            gaussian_adam: GaussianAdam::new(n),
            net_adam: Moments::zeros(student.param_count()),
            density: DensityStats::new(n),
            initial_count: n,
            model,
            student,
            teacher: None,
            rng,
            pseudo_credit: 0.0,
        };
        Self::from_state(data, config, state)
    }

    /// Resumes from `state`. The learning-rate schedule always spans the
    /// configured stages, whatever `config.lr.total_iters` says.
    pub fn from_state(data: &'a TrainingSet, mut config: TrainConfig, state: TrainState) -> Result<Self> {
        config.validate()?;
        config.lr.total_iters = config.total_iters();
        if config.lr.position_extent <= 0.0 {
            config.lr.position_extent = data.width().max(data.height()) as f64;
        }
        if state.model.width != data.width() || state.model.height != data.height() {
            return Err(Error::mismatch("checkpoint frame differs from the training slices"));
        }
        let net = DeformNet::new(config.net.clone(), data.width(), data.height())?;
        net.check_params(&state.student)?;
        if let Some(t) = &state.teacher {
            net.check_params(t)?;
        }
        let n = state.model.len();
        if state.gaussian_adam.aligned_len() != Some(n)
            || state.density.len() != n
            || state.net_adam.len() != state.student.param_count()
        {
            return Err(Error::mismatch("training state is not aligned with the model"));
        }
        Ok(Trainer {
            renderer: Renderer::new(config.render.clone()),
            config,
            data,
            net,
            adam: AdamConfig::default(),
            state,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    pub fn net(&self) -> &DeformNet {
        &self.net
    }

    pub fn renderer(&self) -> &Renderer {
        &self.renderer
    }

    pub fn is_done(&self) -> bool {
        self.state.iter >= self.config.total_iters()
    }

    fn lr(&self, group: ParamGroup) -> f64 {
        let base = self.config.lr.rate(group, self.state.iter);
        if group == ParamGroup::Position {
            base * self.config.lr.position_extent
        } else {
            base
        }
    }

    /// Runs one iteration and returns its log record.
    pub fn step(&mut self) -> Result<LossRecord> {
        let iter = self.state.iter;
        let stage = self.config.stage_of(iter);
        if stage == Stage::Bootstrap && self.state.teacher.is_none() {
            self.state.teacher = Some(self.state.student.clone());
        }

        let pseudo = stage == Stage::Bootstrap && self.config.teacher_student && {
            self.state.pseudo_credit += self.config.pseudo_fraction(iter);
            if self.state.pseudo_credit >= 1.0 {
                self.state.pseudo_credit -= 1.0;
                true
            } else {
                false
            }
        };

        let weight = self.config.pseudo_weight(iter);
        let (kind, loss) = if pseudo {
            let early_end = self.config.teacher_init_iter()
                + (self.config.pseudo_early_fraction * self.config.pseudo_iters as f64) as usize;
            let t = pseudo_timestamp(
                &self.data.timestamps,
                self.data.anisotropy,
                iter < early_end,
                &mut self.state.rng,
            )?;
            (StepKind::Pseudo, self.pseudo_step(t, weight)?)
        } else {
            let k = self.state.rng.below(self.data.images.len());
            (StepKind::Supervised, self.supervised_step(k, stage)?)
        };

        if stage == Stage::Bootstrap {
            let teacher = self.state.teacher.as_mut().expect("initialized above");
            ema_update(teacher, &self.state.student, self.config.ema_decay)?;
        }

        let done = iter + 1;
        let dc = &self.config.density;
        if stage != Stage::Bootstrap {
            if dc.interval > 0 && done >= dc.start_iter && done <= dc.end_iter && done % dc.interval == 0 {
                let cfg = DensityConfig {
                    max_gaussians: (self.state.initial_count as f64 * self.config.gaussian_cap_multiplier) as usize,
                    ..dc.clone()
                };
                let s = &mut self.state;
                densify_and_prune(&mut s.model, &mut s.density, &mut s.gaussian_adam, &cfg, &mut s.rng)?;
            }
            if dc.opacity_reset_iter == Some(done) {
                reset_opacity(&mut self.state.model, Some(&mut self.state.gaussian_adam));
            }
        }

        self.state.iter += 1;
        Ok(LossRecord {
            iter,
            stage,
            kind,
            loss: if pseudo { weight * loss.total } else { loss.total },
            l1: loss.l1,
            dssim: loss.dssim,
            pseudo_weight: weight,
            lr_position: self.config.lr.rate(ParamGroup::Position, iter),
            gaussians: self.state.model.len(),
        })
    }

    fn means(&self) -> Vec<[f64; 2]> {
        self.state.model.gaussians.iter().map(|g| g.mean).collect()
    }

    /// One step against observed slice `k`; the network stays frozen in stage 1.
    pub fn supervised_step(&mut self, k: usize, stage: Stage) -> Result<PhotometricLoss> {
        let target = self.data.images.get(k).ok_or_else(|| Error::invalid(format!("no observed slice {k}")))?;
        let t = self.data.timestamps[k];
        let train_net = stage != Stage::Warmup;

        let forward: Option<(Vec<DeformationDelta>, ForwardCache)> = if train_net {
            Some(self.net.forward_with_cache(&self.state.student, &self.means(), t)?)
        } else {
            None
        };
        let deltas = forward.as_ref().map(|(d, _)| d.as_slice());
        let (image, aux) = match deltas {
            Some(d) => self.renderer.render(&self.state.model, d)?,
            None => self.renderer.render_canonical(&self.state.model)?,
        };
        let loss = photometric_loss(&image, target, self.config.dssim_weight)?;
        let mut grads = self.renderer.render_backward(&loss.grad, &aux, &self.state.model, deltas)?;

        if stage != Stage::Bootstrap {
            let (w, h) = (self.data.width() as f64, self.data.height() as f64);
            let mut visible = vec![false; self.state.model.len()];
            for ids in aux.tile_ids() {
                for &id in ids {
                    visible[id as usize] = true;
                }
            }
            for (i, g) in grads.gaussians.iter().enumerate() {
                if visible[i] {
                    self.state.density.accumulate(i, [g.mean[0] * 0.5 * w, g.mean[1] * 0.5 * h]);
                }
            }
        }

        let net_grads = match &forward {
            Some((_, cache)) => {
                let (gp, gm) = self.net.backward(
                    &self.state.student,
                    cache,
                    &grads.deltas(),
                    self.config.deform_mean_grad,
                )?;
                if let Some(gm) = gm {
                    for (g, m) in grads.gaussians.iter_mut().zip(gm) {
                        g.mean[0] += m[0];
                        g.mean[1] += m[1];
                    }
                }
                Some(gp)
            }
            None => None,
        };

        let lrs: Vec<(ParamGroup, f64)> = ParamGroup::GAUSSIAN.iter().map(|&g| (g, self.lr(g))).collect();
        let lr_of = |g: ParamGroup| lrs.iter().find(|(k, _)| *k == g).map(|(_, v)| *v).unwrap_or(0.0);
        self.state
            .gaussian_adam
            .step(&self.adam, &mut self.state.model, &grads.gaussians, lr_of)?;
        if let Some(gp) = net_grads {
            self.step_network(&gp)?;
        }
        Ok(loss)
    }

    /// One teacher-supervised step at unobserved depth `t`; only the student
    /// network is updated.
    pub fn pseudo_step(&mut self, t: f64, weight: f64) -> Result<PhotometricLoss> {
        let teacher = self.state.teacher.as_ref().ok_or(Error::TeacherUninitialized)?;
        let means = self.means();
        let teacher_deltas = self.net.batched_forward(teacher, &means, t)?;
        let (target, _) = self.renderer.render(&self.state.model, &teacher_deltas)?;
        let (deltas, cache) = self.net.forward_with_cache(&self.state.student, &means, t)?;
        let (image, aux) = self.renderer.render(&self.state.model, &deltas)?;
        let mut loss = photometric_loss(&image, &target, self.config.dssim_weight)?;
        if weight == 0.0 {
            return Ok(loss);
        }
        loss.grad.data_mut().iter_mut().for_each(|g| *g *= weight);
        let grads = self.renderer.render_backward(&loss.grad, &aux, &self.state.model, Some(&deltas))?;
        let (gp, _) = self.net.backward(&self.state.student, &cache, &grads.deltas(), false)?;
        self.step_network(&gp)?;
        Ok(loss)
    }

    fn step_network(&mut self, grads: &NetParams) -> Result<()> {
        let mut flat: Vec<f64> = self.state.student.iter().collect();
        let g: Vec<f64> = grads.iter().collect();
        let lr = self.lr(ParamGroup::Deformation);
        self.adam
            .step(ParamGroup::Deformation, &mut flat, &g, &mut self.state.net_adam, lr)?;
        let mut it = flat.into_iter();
        for s in self.state.student.slices_mut() {
            for v in s.iter_mut() {
                *v = it.next().expect("same length");
            }
        }
        Ok(())
    }

    /// Runs until `end` (capped at the configured total), calling `on_step` after each iteration.
    pub fn run_until(
        &mut self,
        end: usize,
        mut on_step: impl FnMut(&LossRecord, &Trainer<'_>) -> Result<()>,
    ) -> Result<()> {
        let end = end.min(self.config.total_iters());
        while self.state.iter < end {
            let rec = self.step()?;
            on_step(&rec, self)?;
        }
        Ok(())
    }

    pub fn infer(&self, t: f64) -> Result<Image> {
        infer_slice(&self.renderer, &self.state.model, &self.net, &self.state.student, t)
    }
}

/// Result of a complete training run.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub state: TrainState,
    pub log: Vec<LossRecord>,
}

/// Trains from scratch through all three stages.
pub fn train(data: &TrainingSet, config: TrainConfig) -> Result<TrainOutput> {
    let total = config.total_iters();
    let mut trainer = Trainer::new(data, config)?;
    let mut log = Vec::with_capacity(total);
    trainer.run_until(total, |rec, _| {
        log.push(rec.clone());
        Ok(())
    })?;
    Ok(TrainOutput {
        state: trainer.into_state(),
        log,
    })
}

/// Synthesizes the slice at depth `t` in `[0, 1]`.
pub fn infer_slice(
    renderer: &Renderer,
    model: &VolumeModel,
    net: &DeformNet,
    params: &NetParams,
    t: f64,
) -> Result<Image> {
    let means: Vec<[f64; 2]> = model.gaussians.iter().map(|g| g.mean).collect();
    let deltas = net.batched_forward(params, &means, t)?;
    let (image, _) = renderer.render(model, &deltas)?;
    Ok(image.clamped())
}
