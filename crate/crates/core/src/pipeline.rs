//! End-to-end helpers shared by the command line, the FFI layer and tests.

use crate::deform::{DeformNet, NetParams};
use crate::error::Result;
use crate::gaussian::VolumeModel;
use crate::image::Image;
use crate::metrics::MetricReport;
use crate::raster::{RenderSettings, Renderer};
use crate::train::{infer_slice, TrainingSet};
use crate::volume::{generate_phantom, linear_slice, nearest_slice, slice_names, subsample_z, HeldOutEntry, SliceStack};

/// A dense volume split into observed slices and held-out ground truth.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub full: Vec<Image>,
    pub observed: TrainingSet,
    pub held_out: Vec<HeldOutEntry>,
    pub held_out_slices: Vec<Image>,
}

impl Dataset {
    pub fn from_stack(full: SliceStack, anisotropy: usize) -> Result<Self> {
        let sub = subsample_z(&full, anisotropy)?;
        Ok(Dataset {
            observed: sub.observed.training_set(anisotropy)?,
            held_out: sub.held_out,
            held_out_slices: sub.held_out_slices,
            full: full.slices,
        })
    }

    /// Phantom of `dims = [width, height, depth]` subsampled by `anisotropy`.
    pub fn phantom(seed: u64, dims: [usize; 3], structures: usize, anisotropy: usize) -> Result<Self> {
        let slices = generate_phantom(seed, dims, structures)?;
        let stack = SliceStack::new(slices, slice_names(dims[2]))?;
        Self::from_stack(stack, anisotropy)
    }
}

/// A trained model ready for inference.
#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub model: VolumeModel,
    pub net: DeformNet,
    pub params: NetParams,
    pub renderer: Renderer,
}

impl Reconstruction {
    pub fn new(model: VolumeModel, net: DeformNet, params: NetParams, settings: RenderSettings) -> Result<Self> {
        net.check_params(&params)?;
        Ok(Reconstruction {
            model,
            net,
            params,
            renderer: Renderer::new(settings),
        })
    }

    pub fn slice(&self, t: f64) -> Result<Image> {
        infer_slice(&self.renderer, &self.model, &self.net, &self.params, t)
    }
}

/// Scores `synth(t)` against every held-out slice.
pub fn score(
    method: &str,
    held_out: &[HeldOutEntry],
    truth: &[Image],
    mut synth: impl FnMut(f64) -> Result<Image>,
) -> Result<MetricReport> {
    let mut report = MetricReport::new(method);
    for (e, gt) in held_out.iter().zip(truth) {
        let id = std::path::Path::new(&e.name)
            .file_stem()
            .map_or_else(|| e.name.clone(), |s| s.to_string_lossy().into_owned());
        report.push(id, e.t, &synth(e.t)?, gt)?;
    }
    Ok(report)
}

/// Reports for the model and both interpolation baselines, in that order.
pub fn evaluate(
    recon: &Reconstruction,
    observed: &TrainingSet,
    held_out: &[HeldOutEntry],
    truth: &[Image],
) -> Result<[MetricReport; 3]> {
    Ok([
        score("model", held_out, truth, |t| recon.slice(t))?,
        score("nearest", held_out, truth, |t| nearest_slice(observed, t))?,
        score("linear", held_out, truth, |t| linear_slice(observed, t))?,
    ])
}
