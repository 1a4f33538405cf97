//! Run manifests: `key = value` lines with `#` comments.
//!
//! Every trainer, optimizer and network setting can be overridden from a
//! manifest or from `--set key=value` on the command line; unknown keys are
//! rejected so typos never silently fall back to defaults.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::train::{RampKind, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub slices_dir: PathBuf,
    pub pattern: String,
    /// Expected slice size; checked against the data when set.
    pub width: Option<usize>,
    pub height: Option<usize>,
    pub anisotropy: usize,
    /// Lateral and axial voxel size, informational only.
    pub pixel_size_nm: Option<[f64; 2]>,
    pub held_out_map: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub checkpoint_every: usize,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn new(slices_dir: PathBuf) -> Self {
        RunConfig {
            slices_dir,
            pattern: "*.pgm".into(),
            width: None,
            height: None,
            anisotropy: 1,
            pixel_size_nm: None,
            held_out_map: None,
            out_dir: PathBuf::from("out"),
            checkpoint_every: 1000,
            train: TrainConfig::default(),
        }
    }

    /// Parses manifest text; relative paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg = RunConfig::new(PathBuf::new());
        let mut have_dir = false;
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Manifest {
                line: ln + 1,
                message: format!("expected key = value, got {line:?}"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            cfg.set(k, v, base).map_err(|e| Error::Manifest {
                line: ln + 1,
                message: e.to_string(),
            })?;
            have_dir |= k == "slices_dir";
        }
        if !have_dir {
            return Err(Error::Manifest {
                line: 0,
                message: "missing required key slices_dir".into(),
            });
        }
        if !cfg.out_dir.is_absolute() {
            cfg.out_dir = base.join(&cfg.out_dir);
        }
        cfg.finish()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).map_err(|e| match e {
            Error::Manifest { line, message } => Error::Manifest {
                line,
                message: format!("{}: {message}", path.display()),
            },
            other => other,
        })
    }

    /// Applies a `key=value` override after loading.
    pub fn apply_override(&mut self, kv: &str, base: &Path) -> Result<()> {
        self.apply_overrides([kv], base)
    }

    /// Applies several overrides, validating only once all are in place.
    pub fn apply_overrides<'s>(&mut self, kvs: impl IntoIterator<Item = &'s str>, base: &Path) -> Result<()> {
        for kv in kvs {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("override {kv:?} is not key=value")))?;
            self.set(k.trim(), v.trim(), base)?;
        }
        self.finish()
    }

    /// Keeps derived settings in sync and validates.
    fn finish(&mut self) -> Result<()> {
        self.train.lr.total_iters = self.train.total_iters();
        if self.anisotropy < 1 {
            return Err(Error::invalid("anisotropy must be >= 1"));
        }
        self.train.validate()
    }

    fn set(&mut self, key: &str, value: &str, base: &Path) -> Result<()> {
        let t = &mut self.train;
        let path = |v: &str| {
            let p = PathBuf::from(v);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };
        match key {
            "slices_dir" => self.slices_dir = path(value),
            "pattern" => self.pattern = value.to_string(),
            "width" => self.width = Some(num(key, value)?),
            "height" => self.height = Some(num(key, value)?),
            // Replaces every training key, so it belongs at the top of a manifest.
            "preset" => {
                *t = match value {
                    "default" => TrainConfig::default(),
                    "desk" => TrainConfig::desk(),
                    _ => return Err(Error::invalid(format!("unknown preset {value:?} (default, desk)"))),
                }
            }
            "anisotropy" => self.anisotropy = num(key, value)?,
            "pixel_size_nm" => {
                let v: Vec<f64> = value
                    .split([',', ' '])
                    .filter(|s| !s.is_empty())
                    .map(|s| num(key, s))
                    .collect::<Result<_>>()?;
                if v.len() != 2 {
                    return Err(Error::invalid("pixel_size_nm takes two values: lateral, axial"));
                }
                self.pixel_size_nm = Some([v[0], v[1]]);
            }
            "held_out_map" => self.held_out_map = Some(path(value)),
            "out_dir" => self.out_dir = path(value),
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "seed" => t.seed = num(key, value)?,
            "warmup_iters" => t.warmup_iters = num(key, value)?,
            "joint_iters" => t.joint_iters = num(key, value)?,
            "pseudo_iters" => t.pseudo_iters = num(key, value)?,
            "ema_decay" => t.ema_decay = num(key, value)?,
            "dssim_weight" => t.dssim_weight = num(key, value)?,
            "pseudo_ramp_start" => t.pseudo_ramp_start = num(key, value)?,
            "pseudo_ramp_end" => t.pseudo_ramp_end = num(key, value)?,
            "pseudo_weight_lo" => t.pseudo_weight_lo = num(key, value)?,
            "pseudo_weight_hi" => t.pseudo_weight_hi = num(key, value)?,
            "pseudo_ramp" => {
                t.pseudo_ramp = match value {
                    "linear" => RampKind::Linear,
                    "exponential" => RampKind::Exponential,
                    _ => return Err(Error::invalid(format!("pseudo_ramp must be linear or exponential, got {value:?}"))),
                }
            }
            "interleave_start" => t.interleave_start = num(key, value)?,
            "interleave_end" => t.interleave_end = num(key, value)?,
            "interleave_ramp_end" => t.interleave_ramp_end = num(key, value)?,
            "pseudo_early_fraction" => t.pseudo_early_fraction = num(key, value)?,
            "teacher_student" => t.teacher_student = boolean(key, value)?,
            "deform_mean_grad" => t.deform_mean_grad = boolean(key, value)?,
            "lr_position_init" => t.lr.position_init = num(key, value)?,
            "lr_position_final" => t.lr.position_final = num(key, value)?,
            "lr_position_extent" => t.lr.position_extent = num(key, value)?,
            "lr_scale" => t.lr.scale = num(key, value)?,
            "lr_rotation" => t.lr.rotation = num(key, value)?,
            "lr_opacity" => t.lr.opacity = num(key, value)?,
            "lr_intensity" => t.lr.intensity = num(key, value)?,
            "lr_deform_init" => t.lr.deformation_init = num(key, value)?,
            "lr_deform_final" => t.lr.deformation_final = num(key, value)?,
            "densify_grad_threshold" => t.density.grad_threshold = num(key, value)?,
            "densify_clone_max_scale" => t.density.clone_max_scale_px = num(key, value)?,
            "densify_split_factor" => t.density.split_factor = num(key, value)?,
            "prune_opacity" => t.density.prune_opacity = num(key, value)?,
            "densify_from" => t.density.start_iter = num(key, value)?,
            "densify_until" => t.density.end_iter = num(key, value)?,
            "densify_interval" => t.density.interval = num(key, value)?,
            "opacity_reset_at" => t.density.opacity_reset_iter = optional(key, value)?,
            "gaussian_cap_multiplier" => t.gaussian_cap_multiplier = num(key, value)?,
            "net_hidden_layers" => t.net.hidden_layers = num(key, value)?,
            "net_width" => t.net.width = num(key, value)?,
            "net_skip_layer" => t.net.skip_layer = optional(key, value)?,
            "pos_freqs" => t.net.pos_freqs = num(key, value)?,
            "time_freqs" => t.net.time_freqs = num(key, value)?,
            "mean_offset_fraction" => t.net.mean_offset_fraction = num(key, value)?,
            "opacity_delta_bound" => t.net.opacity_delta_bound = optional(key, value)?,
            "init_cap_fraction" => t.init.cap_fraction = num(key, value)?,
            "init_scale_px" => t.init.scale_px = num(key, value)?,
            "init_opacity" => t.init.opacity = num(key, value)?,
            "tile_size" => t.render.tile_size = num(key, value)?,
            _ => return Err(Error::invalid(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// The fully resolved configuration in manifest syntax.
    pub fn to_manifest(&self) -> String {
        let t = &self.train;
        fn opt<T: ToString>(v: Option<T>) -> String {
            v.map_or("none".to_string(), |x| x.to_string())
        }
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("slices_dir", self.slices_dir.display().to_string());
        kv("pattern", self.pattern.clone());
        if let Some(w) = self.width {
            kv("width", w.to_string());
        }
        if let Some(h) = self.height {
            kv("height", h.to_string());
        }
        kv("anisotropy", self.anisotropy.to_string());
        if let Some([a, b]) = self.pixel_size_nm {
            kv("pixel_size_nm", format!("{a}, {b}"));
        }
        if let Some(p) = &self.held_out_map {
            kv("held_out_map", p.display().to_string());
        }
        kv("out_dir", self.out_dir.display().to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv("seed", t.seed.to_string());
        kv("warmup_iters", t.warmup_iters.to_string());
        kv("joint_iters", t.joint_iters.to_string());
        kv("pseudo_iters", t.pseudo_iters.to_string());
        kv("ema_decay", t.ema_decay.to_string());
        kv("dssim_weight", t.dssim_weight.to_string());
        kv("pseudo_ramp_start", t.pseudo_ramp_start.to_string());
        kv("pseudo_ramp_end", t.pseudo_ramp_end.to_string());
        kv("pseudo_weight_lo", t.pseudo_weight_lo.to_string());
        kv("pseudo_weight_hi", t.pseudo_weight_hi.to_string());
        kv(
            "pseudo_ramp",
            match t.pseudo_ramp {
                RampKind::Linear => "linear",
                RampKind::Exponential => "exponential",
            }
            .into(),
        );
        kv("interleave_start", t.interleave_start.to_string());
        kv("interleave_end", t.interleave_end.to_string());
        kv("interleave_ramp_end", t.interleave_ramp_end.to_string());
        kv("pseudo_early_fraction", t.pseudo_early_fraction.to_string());
        kv("teacher_student", t.teacher_student.to_string());
        kv("deform_mean_grad", t.deform_mean_grad.to_string());
        kv("lr_position_init", t.lr.position_init.to_string());
        kv("lr_position_final", t.lr.position_final.to_string());
        kv("lr_position_extent", t.lr.position_extent.to_string());
        kv("lr_scale", t.lr.scale.to_string());
        kv("lr_rotation", t.lr.rotation.to_string());
        kv("lr_opacity", t.lr.opacity.to_string());
        kv("lr_intensity", t.lr.intensity.to_string());
        kv("lr_deform_init", t.lr.deformation_init.to_string());
        kv("lr_deform_final", t.lr.deformation_final.to_string());
        kv("densify_grad_threshold", t.density.grad_threshold.to_string());
        kv("densify_clone_max_scale", t.density.clone_max_scale_px.to_string());
        kv("densify_split_factor", t.density.split_factor.to_string());
        kv("prune_opacity", t.density.prune_opacity.to_string());
        kv("densify_from", t.density.start_iter.to_string());
        kv("densify_until", t.density.end_iter.to_string());
        kv("densify_interval", t.density.interval.to_string());
        kv("opacity_reset_at", opt(t.density.opacity_reset_iter));
        kv("gaussian_cap_multiplier", t.gaussian_cap_multiplier.to_string());
        kv("net_hidden_layers", t.net.hidden_layers.to_string());
        kv("net_width", t.net.width.to_string());
        kv("net_skip_layer", opt(t.net.skip_layer));
        kv("pos_freqs", t.net.pos_freqs.to_string());
        kv("time_freqs", t.net.time_freqs.to_string());
        kv("mean_offset_fraction", t.net.mean_offset_fraction.to_string());
        kv("opacity_delta_bound", opt(t.net.opacity_delta_bound));
        kv("init_cap_fraction", t.init.cap_fraction.to_string());
        kv("init_scale_px", t.init.scale_px.to_string());
        kv("init_opacity", t.init.opacity.to_string());
        kv("tile_size", t.render.tile_size.to_string());
        s
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::invalid(format!("{key}: cannot parse {value:?}")))
}

fn boolean(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::invalid(format!("{key}: expected true or false, got {value:?}"))),
    }
}

fn optional<T: std::str::FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value == "none" {
        Ok(None)
    } else {
        num(key, value).map(Some)
    }
}
