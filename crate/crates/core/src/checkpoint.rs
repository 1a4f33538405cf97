//! Binary checkpoints: Gaussian records, the deformation network, a small
//! metadata trailer and optionally the full optimizer state for resuming.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "EMG1" u32 count u32 0 u32 0                       16-byte header
//! count x 7 f64                                      mean.x mean.y ls_x ls_y theta opacity_logit intensity
//! u32 layers, per layer: u32 rows u32 cols f64[rows*cols] f64[rows]
//! "EMX1" u32 width u32 height f64 z0 f64 sz0         frame
//!        u32 hidden u32 width u32 skip(+1, 0 = none) u32 pos_freqs u32 time_freqs f64 offset_fraction
//! u8 has_resume, then "EMS1" and the training state
//! ```

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::deform::{Layer, NetConfig, NetParams};
use crate::error::{Error, Result};
use crate::gaussian::{Gaussian2D, VolumeModel};
use crate::optim::{DensityStats, GaussianAdam, Moments};
use crate::rng::SplitMix64;
use crate::train::TrainState;

pub const MAGIC: &[u8; 4] = b"EMG1";
const FRAME_MAGIC: &[u8; 4] = b"EMX1";
const STATE_MAGIC: &[u8; 4] = b"EMS1";
pub const HEADER_LEN: usize = 16;
pub const RECORD_LEN: usize = 56;

/// Optimizer state needed to continue a run bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct ResumeState {
    pub iter: usize,
    pub teacher: Option<NetParams>,
    pub gaussian_adam: GaussianAdam,
    pub net_adam: Moments,
    pub density: DensityStats,
    pub rng: SplitMix64,
    pub pseudo_credit: f64,
    pub initial_count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: VolumeModel,
    pub net_config: NetConfig,
    pub student: NetParams,
    pub resume: Option<ResumeState>,
}

impl Checkpoint {
    pub fn from_state(state: &TrainState, net_config: &NetConfig, with_resume: bool) -> Self {
        Checkpoint {
            model: state.model.clone(),
            net_config: net_config.clone(),
            student: state.student.clone(),
            resume: with_resume.then(|| ResumeState {
                iter: state.iter,
                teacher: state.teacher.clone(),
                gaussian_adam: state.gaussian_adam.clone(),
                net_adam: state.net_adam.clone(),
                density: state.density.clone(),
                rng: state.rng.clone(),
                pseudo_credit: state.pseudo_credit,
                initial_count: state.initial_count,
            }),
        }
    }

    pub fn into_state(self) -> Result<TrainState> {
        let r = self
            .resume
            .ok_or_else(|| Error::Checkpoint("checkpoint carries no training state to resume from".into()))?;
        Ok(TrainState {
            iter: r.iter,
            model: self.model,
            student: self.student,
            teacher: r.teacher,
            gaussian_adam: r.gaussian_adam,
            net_adam: r.net_adam,
            density: r.density,
            rng: r.rng,
            pseudo_credit: r.pseudo_credit,
            initial_count: r.initial_count,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        write_gaussians(&mut w, &self.model.gaussians);
        write_net(&mut w, &self.student);
        w.bytes(FRAME_MAGIC);
        w.u32(self.model.width as u32);
        w.u32(self.model.height as u32);
        w.f64(self.model.z0);
        w.f64(self.model.sz0);
        let c = &self.net_config;
        w.u32(c.hidden_layers as u32);
        w.u32(c.width as u32);
        w.u32(c.skip_layer.map_or(0, |s| s as u32 + 1));
        w.u32(c.pos_freqs as u32);
        w.u32(c.time_freqs as u32);
        w.f64(c.mean_offset_fraction);
        w.f64(c.opacity_delta_bound.unwrap_or(0.0));
        match &self.resume {
            None => w.u8(0),
            Some(r) => {
                w.u8(1);
                w.bytes(STATE_MAGIC);
                w.u64(r.iter as u64);
                w.u64(r.rng.state());
                w.f64(r.pseudo_credit);
                w.u64(r.initial_count as u64);
                match &r.teacher {
                    None => w.u8(0),
                    Some(t) => {
                        w.u8(1);
                        write_net(&mut w, t);
                    }
                }
                let a = &r.gaussian_adam;
                for m in [&a.position, &a.scale, &a.rotation, &a.opacity, &a.intensity, &r.net_adam] {
                    write_moments(&mut w, m);
                }
                w.u64(r.density.len() as u64);
                r.density.grad_accum.iter().for_each(|&v| w.f64(v));
                r.density.count.iter().for_each(|&v| w.u32(v));
            }
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let gaussians = read_gaussians(&mut r)?;
        let student = read_net(&mut r)?;
        r.expect(FRAME_MAGIC, "frame trailer")?;
        let width = r.u32()? as usize;
        let height = r.u32()? as usize;
        let z0 = r.f64()?;
        let sz0 = r.f64()?;
        let hidden_layers = r.u32()? as usize;
        let net_width = r.u32()? as usize;
        let skip = r.u32()?;
        let net_config = NetConfig {
            hidden_layers,
            width: net_width,
            skip_layer: (skip > 0).then(|| skip as usize - 1),
            pos_freqs: r.u32()? as usize,
            time_freqs: r.u32()? as usize,
            mean_offset_fraction: r.f64()?,
            opacity_delta_bound: Some(r.f64()?).filter(|&b| b > 0.0),
        };
        let model = VolumeModel {
            gaussians,
            z0,
            sz0,
            width,
            height,
        };
        let resume = match r.u8()? {
            0 => None,
            1 => {
                r.expect(STATE_MAGIC, "training state")?;
                let iter = r.u64()? as usize;
                let rng = SplitMix64::new(r.u64()?);
                let pseudo_credit = r.f64()?;
                let initial_count = r.u64()? as usize;
                let teacher = match r.u8()? {
                    0 => None,
                    1 => Some(read_net(&mut r)?),
                    v => return Err(Error::Checkpoint(format!("bad teacher flag {v}"))),
                };
                let mut ms = Vec::with_capacity(6);
                for _ in 0..6 {
                    ms.push(read_moments(&mut r)?);
                }
                let net_adam = ms.pop().expect("six moments");
                let mut it = ms.into_iter();
                let mut next = || it.next().expect("five moments");
                let gaussian_adam = GaussianAdam {
                    position: next(),
                    scale: next(),
                    rotation: next(),
                    opacity: next(),
                    intensity: next(),
                };
                let n = r.len_prefix(12)?;
                let grad_accum = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
                let count = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
                Some(ResumeState {
                    iter,
                    teacher,
                    gaussian_adam,
                    net_adam,
                    density: DensityStats { grad_accum, count },
                    rng,
                    pseudo_credit,
                    initial_count,
                })
            }
            v => return Err(Error::Checkpoint(format!("bad resume flag {v}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            model,
            net_config,
            student,
            resume,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // Write then rename so an interrupted save never clobbers a good checkpoint.
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::file(&tmp, e.to_string()))?;
        fs::rename(&tmp, path).map_err(|e| Error::file(path, e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::file(path, e.to_string()))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

/// Serializes only the header and Gaussian records.
pub fn gaussian_records(gaussians: &[Gaussian2D]) -> Vec<u8> {
    let mut w = Writer::default();
    write_gaussians(&mut w, gaussians);
    w.0
}

fn write_gaussians(w: &mut Writer, gaussians: &[Gaussian2D]) {
    w.bytes(MAGIC);
    w.u32(gaussians.len() as u32);
    w.u32(0);
    w.u32(0);
    for g in gaussians {
        for v in [
            g.mean[0],
            g.mean[1],
            g.log_scale[0],
            g.log_scale[1],
            g.rotation,
            g.opacity_logit,
            g.intensity,
        ] {
            w.f64(v);
        }
    }
}

fn read_gaussians(r: &mut Reader) -> Result<Vec<Gaussian2D>> {
    r.expect(MAGIC, "header")?;
    let n = r.u32()? as usize;
    r.u32()?;
    r.u32()?;
    if r.remaining() < n * RECORD_LEN {
        return Err(Error::Checkpoint(format!("header claims {n} Gaussians but the file is too short")));
    }
    (0..n)
        .map(|_| {
            let mut v = [0.0; 7];
            for x in v.iter_mut() {
                *x = r.f64()?;
            }
            Ok(Gaussian2D {
                mean: [v[0], v[1]],
                log_scale: [v[2], v[3]],
                rotation: v[4],
                opacity_logit: v[5],
                intensity: v[6],
            })
        })
        .collect()
}

fn write_net(w: &mut Writer, p: &NetParams) {
    w.u32(p.layers.len() as u32);
    for l in &p.layers {
        w.u32(l.rows() as u32);
        w.u32(l.cols() as u32);
        l.weights.iter().for_each(|&v| w.f64(v));
        l.bias.iter().for_each(|&v| w.f64(v));
    }
}

fn read_net(r: &mut Reader) -> Result<NetParams> {
    let n = r.u32()? as usize;
    let mut layers = Vec::with_capacity(n.min(64));
    for _ in 0..n {
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        if r.remaining() < 8 * rows * (cols + 1) {
            return Err(Error::Checkpoint("network section is truncated".into()));
        }
        let w = (0..rows * cols).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let b = (0..rows).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        layers.push(Layer {
            weights: Array2::from_shape_vec((rows, cols), w).map_err(|e| Error::Checkpoint(e.to_string()))?,
            bias: Array1::from(b),
        });
    }
    Ok(NetParams { layers })
}

fn write_moments(w: &mut Writer, m: &Moments) {
    w.u64(m.step);
    w.u64(m.len() as u64);
    m.m.iter().for_each(|&v| w.f64(v));
    m.v.iter().for_each(|&v| w.f64(v));
}

fn read_moments(r: &mut Reader) -> Result<Moments> {
    let step = r.u64()?;
    let n = r.len_prefix(16)?;
    let m = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    let v = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    Ok(Moments { m, v, step })
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let s = self
            .buf
            .get(self.pos..self.pos + N)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected end of data at byte {}", self.pos)))?;
        self.pos += N;
        Ok(s.try_into().expect("length checked"))
    }

    fn expect(&mut self, magic: &[u8; 4], what: &str) -> Result<()> {
        let got = self.take::<4>()?;
        if &got != magic {
            return Err(Error::Checkpoint(format!(
                "bad {what} magic {:?}, expected {:?}",
                String::from_utf8_lossy(&got),
                String::from_utf8_lossy(magic)
            )));
        }
        Ok(())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take::<1>()?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take()?))
    }

    /// Reads a u64 element count and checks `count * elem_bytes` fits in what is left.
    fn len_prefix(&mut self, elem_bytes: usize) -> Result<usize> {
        let n = self.u64()? as usize;
        if n.checked_mul(elem_bytes).is_none_or(|b| b > self.remaining()) {
            return Err(Error::Checkpoint(format!("length {n} exceeds the remaining data")));
        }
        Ok(n)
    }
}
