//! Slice stacks on disk, axial subsampling, phantom volumes and the
//! interpolation baselines.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::SplitMix64;
use crate::train::TrainingSet;

/// Reads an 8-bit binary PGM (`P5`, maxval <= 255) into `[0, 1]`.
pub fn read_pgm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::file(path, e.to_string()))?;
    parse_pgm(&bytes).map_err(|m| Error::file(path, m))
}

fn parse_pgm(bytes: &[u8]) -> std::result::Result<Image, String> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated PGM header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(format!("unsupported magic {:?}, expected P5", fields[0]));
    }
    let num = |s: &str, what: &str| s.parse::<usize>().map_err(|_| format!("bad PGM {what} {s:?}"));
    let (w, h, maxval) = (num(&fields[1], "width")?, num(&fields[2], "height")?, num(&fields[3], "maxval")?);
    if maxval == 0 || maxval > 255 {
        return Err(format!("only 8-bit PGM is supported (maxval {maxval})"));
    }
    if w == 0 || h == 0 {
        return Err("empty PGM".into());
    }
    // A single whitespace byte separates the header from the raster.
    pos += 1;
    let data = bytes.get(pos..pos + w * h).ok_or("PGM raster is truncated")?;
    let scale = maxval as f64;
    Image::from_vec(w, h, data.iter().map(|&b| b as f64 / scale).collect()).map_err(|e| e.to_string())
}

/// Quantizes `v` in `[0, 1]` to a byte, rounding half up.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

pub fn write_pgm(image: &Image, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::file(path, e.to_string()))?;
    let mut out = BufWriter::new(file);
    let bytes: Vec<u8> = image.data().iter().map(|&v| quantize(v)).collect();
    write!(out, "P5\n{} {}\n255\n", image.width(), image.height())
        .and_then(|_| out.write_all(&bytes))
        .and_then(|_| out.flush())
        .map_err(|e| Error::file(path, e.to_string()))
}

/// Reads an 8-bit grayscale PNG into `[0, 1]`.
pub fn read_png(path: &Path) -> Result<Image> {
    let file = fs::File::open(path).map_err(|e| Error::file(path, e.to_string()))?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| Error::file(path, e.to_string()))?;
    let (color, depth) = reader.output_color_type();
    if color != png::ColorType::Grayscale || depth != png::BitDepth::Eight {
        return Err(Error::file(path, format!("expected 8-bit grayscale PNG, got {color:?} {depth:?}")));
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::file(path, "PNG too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::file(path, e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let mut data = Vec::with_capacity(w * h);
    for row in buf.chunks(info.line_size).take(h) {
        data.extend(row[..w].iter().map(|&b| b as f64 / 255.0));
    }
    Image::from_vec(w, h, data)
}

/// Reads a PGM or PNG slice, chosen by extension.
pub fn read_slice(path: &Path) -> Result<Image> {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("pgm") => read_pgm(path),
        Some("png") => read_png(path),
        _ => Err(Error::file(path, "unsupported slice format (expected .pgm or .png)")),
    }
}

/// An ordered stack of same-sized slices with their names.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceStack {
    pub slices: Vec<Image>,
    pub names: Vec<String>,
}

impl SliceStack {
    pub fn new(slices: Vec<Image>, names: Vec<String>) -> Result<Self> {
        if slices.len() != names.len() {
            return Err(Error::mismatch("one name per slice is required"));
        }
        if let Some(first) = slices.first() {
            if let Some(k) = slices.iter().position(|s| !s.same_shape(first)) {
                return Err(Error::mismatch(format!(
                    "slice {} is {}x{}, expected {}x{}",
                    names[k],
                    slices[k].width(),
                    slices[k].height(),
                    first.width(),
                    first.height()
                )));
            }
        }
        Ok(SliceStack { slices, names })
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.slices.first().map_or((0, 0), |s| (s.width(), s.height()))
    }

    /// Evenly spaced timestamps `k / (n - 1)` for a training set.
    pub fn training_set(&self, anisotropy: usize) -> Result<TrainingSet> {
        let n = self.len();
        let ts = (0..n)
            .map(|k| crate::gaussian::timestamp_of_slice(k, n))
            .collect::<Result<Vec<_>>>()?;
        TrainingSet::new(self.slices.clone(), ts, anisotropy)
    }

    /// Writes every slice as `<dir>/<name>`.
    pub fn write_pgm_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::file(dir, e.to_string()))?;
        for (s, n) in self.slices.iter().zip(&self.names) {
            write_pgm(s, &dir.join(n))?;
        }
        Ok(())
    }
}

/// Loads every file in `dir` whose name matches `pattern`, in lexicographic order.
pub fn load_stack(dir: &Path, pattern: &str) -> Result<SliceStack> {
    let pat = glob::Pattern::new(pattern).map_err(|e| Error::invalid(format!("bad pattern {pattern:?}: {e}")))?;
    let entries = fs::read_dir(dir).map_err(|e| Error::file(dir, e.to_string()))?;
    let mut names = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::file(dir, e.to_string()))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if pat.matches(&name) && entry.path().is_file() {
            names.push(name);
        }
    }
    names.sort();
    if names.is_empty() {
        return Err(Error::file(dir, format!("no slices match {pattern:?}")));
    }
    let slices = names
        .iter()
        .map(|n| read_slice(&dir.join(n)))
        .collect::<Result<Vec<_>>>()?;
    SliceStack::new(slices, names)
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeldOutEntry {
    /// Index in the full-resolution stack.
    pub index: usize,
    /// Normalized depth in the observed coordinate frame.
    pub t: f64,
    pub name: String,
}

/// Observed slices plus the bookkeeping for the ones left out.
#[derive(Clone, Debug, PartialEq)]
pub struct Subsampled {
    pub observed: SliceStack,
    pub held_out: Vec<HeldOutEntry>,
    pub held_out_slices: Vec<Image>,
}

/// Keeps every `a`-th slice; requires `n = 1 (mod a)` so both ends are observed.
pub fn subsample_z(full: &SliceStack, a: usize) -> Result<Subsampled> {
    let n = full.len();
    if a < 1 {
        return Err(Error::invalid("anisotropy factor must be >= 1"));
    }
    if n < a + 1 || (n - 1) % a != 0 {
        return Err(Error::invalid(format!(
            "stack of {n} slices cannot be subsampled by {a}: need n = 1 (mod {a}) and n > {a}"
        )));
    }
    let mut observed = Vec::new();
    let mut observed_names = Vec::new();
    let mut held_out = Vec::new();
    let mut held_out_slices = Vec::new();
    for (i, (s, name)) in full.slices.iter().zip(&full.names).enumerate() {
        if i % a == 0 {
            observed.push(s.clone());
            observed_names.push(name.clone());
        } else {
            held_out.push(HeldOutEntry {
                index: i,
                t: i as f64 / (n - 1) as f64,
                name: name.clone(),
            });
            held_out_slices.push(s.clone());
        }
    }
    Ok(Subsampled {
        observed: SliceStack::new(observed, observed_names)?,
        held_out,
        held_out_slices,
    })
}

pub fn write_held_out_map(entries: &[HeldOutEntry], path: &Path) -> Result<()> {
    let mut text = String::new();
    for e in entries {
        text.push_str(&format!("{} {} {}\n", e.index, e.t, e.name));
    }
    fs::write(path, text).map_err(|e| Error::file(path, e.to_string()))
}

pub fn read_held_out_map(path: &Path) -> Result<Vec<HeldOutEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e.to_string()))?;
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |m: &str| Error::Manifest {
            line: ln + 1,
            message: format!("{}: {m}", path.display()),
        };
        let mut parts = line.splitn(3, char::is_whitespace);
        let index = parts.next().and_then(|s| s.parse().ok()).ok_or_else(|| bad("bad index"))?;
        let t: f64 = parts.next().and_then(|s| s.parse().ok()).ok_or_else(|| bad("bad t"))?;
        let name = parts.next().map(str::trim).filter(|s| !s.is_empty()).ok_or_else(|| bad("missing filename"))?;
        if !(0.0..=1.0).contains(&t) {
            return Err(bad("t outside [0, 1]"));
        }
        out.push(HeldOutEntry {
            index,
            t,
            name: name.to_string(),
        });
    }
    Ok(out)
}

/// Bracketing observed slices of depth `t` and the fraction between them.
pub fn bracket(timestamps: &[f64], t: f64) -> Result<(usize, usize, f64)> {
    let n = timestamps.len();
    if n < 2 || !(timestamps[0]..=timestamps[n - 1]).contains(&t) {
        return Err(Error::invalid(format!("t = {t} lies outside the observed range")));
    }
    let hi = timestamps.partition_point(|&x| x < t).clamp(1, n - 1);
    let lo = hi - 1;
    let f = (t - timestamps[lo]) / (timestamps[hi] - timestamps[lo]);
    Ok((lo, hi, f))
}

/// Nearest observed slice; ties go to the shallower one.
pub fn nearest_slice(data: &TrainingSet, t: f64) -> Result<Image> {
    let (lo, hi, f) = bracket(&data.timestamps, t)?;
    Ok(data.images[if f > 0.5 { hi } else { lo }].clone())
}

/// Linear blend of the two bracketing observed slices.
pub fn linear_slice(data: &TrainingSet, t: f64) -> Result<Image> {
    let (lo, hi, f) = bracket(&data.timestamps, t)?;
    data.images[lo].lerp(&data.images[hi], f)
}

/// Linear resampling of a dense stack at fractional slice index `z`.
pub fn resample_z(stack: &[Image], z: f64) -> Result<Image> {
    if stack.is_empty() || !(0.0..=(stack.len() - 1) as f64).contains(&z) {
        return Err(Error::invalid(format!("z = {z} lies outside the stack")));
    }
    let lo = (z.floor() as usize).min(stack.len() - 1);
    let hi = (lo + 1).min(stack.len() - 1);
    stack[lo].lerp(&stack[hi], z - lo as f64)
}

/// Structures a phantom volume is built from; coordinates are voxel units
/// with voxel centres at `i + 0.5`.
#[derive(Clone, Debug, PartialEq)]
pub enum Structure {
    /// Cubic Bezier centreline with a Gaussian cross-section of std `radius / 2`.
    Tube {
        control: [[f64; 3]; 4],
        radius: f64,
        peak: f64,
    },
    /// Rotated solid ellipsoid with a one-voxel soft edge.
    Ellipsoid {
        center: [f64; 3],
        semi_axes: [f64; 3],
        /// Rows are the body axes.
        rotation: [[f64; 3]; 3],
        peak: f64,
    },
    /// Plane `n . p = offset` of the given thickness.
    Membrane {
        normal: [f64; 3],
        offset: f64,
        thickness: f64,
        peak: f64,
    },
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn bezier(c: &[[f64; 3]; 4], s: f64) -> [f64; 3] {
    let u = 1.0 - s;
    let w = [u * u * u, 3.0 * u * u * s, 3.0 * u * s * s, s * s * s];
    let mut p = [0.0; 3];
    for (wk, ck) in w.iter().zip(c) {
        for d in 0..3 {
            p[d] += wk * ck[d];
        }
    }
    p
}

fn segment_dist2(p: [f64; 3], a: [f64; 3], b: [f64; 3]) -> f64 {
    let ab = sub(b, a);
    let ap = sub(p, a);
    let len2 = dot(ab, ab);
    let s = if len2 > 0.0 { (dot(ap, ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let q = [a[0] + s * ab[0], a[1] + s * ab[1], a[2] + s * ab[2]];
    let d = sub(p, q);
    dot(d, d)
}

const TUBE_SEGMENTS: usize = 64;

impl Structure {
    /// Axis-aligned voxel bounds `[lo, hi)` per axis that can receive signal.
    fn bounds(&self, dims: [usize; 3]) -> [(usize, usize); 3] {
        let (lo, hi) = match self {
            Structure::Tube { control, radius, .. } => {
                let pad = 1.5 * radius + 1.0;
                let mut lo = [f64::INFINITY; 3];
                let mut hi = [f64::NEG_INFINITY; 3];
                for c in control {
                    for d in 0..3 {
                        lo[d] = lo[d].min(c[d] - pad);
                        hi[d] = hi[d].max(c[d] + pad);
                    }
                }
                (lo, hi)
            }
            Structure::Ellipsoid { center, semi_axes, .. } => {
                let r = semi_axes.iter().cloned().fold(0.0, f64::max) + 1.0;
                ([center[0] - r, center[1] - r, center[2] - r], [center[0] + r, center[1] + r, center[2] + r])
            }
            Structure::Membrane { .. } => ([0.0; 3], [f64::INFINITY; 3]),
        };
        let mut out = [(0, 0); 3];
        for d in 0..3 {
            let a = lo[d].floor().max(0.0) as usize;
            let b = (hi[d].ceil().max(0.0) as usize).min(dims[d]);
            out[d] = (a.min(b), b);
        }
        out
    }

    /// Emits `(x, y, z, value)` contributions through `f`.
    fn rasterize(&self, dims: [usize; 3], mut f: impl FnMut(usize, usize, usize, f64)) {
        let b = self.bounds(dims);
        match self {
            Structure::Tube { control, radius, peak } => {
                let pts: Vec<[f64; 3]> = (0..=TUBE_SEGMENTS)
                    .map(|i| bezier(control, i as f64 / TUBE_SEGMENTS as f64))
                    .collect();
                let sigma = radius / 2.0;
                let cut2 = (1.5 * radius + 1.0).powi(2);
                for z in b[2].0..b[2].1 {
                    for y in b[1].0..b[1].1 {
                        for x in b[0].0..b[0].1 {
                            let p = [x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5];
                            let d2 = pts
                                .windows(2)
                                .map(|s| segment_dist2(p, s[0], s[1]))
                                .fold(f64::INFINITY, f64::min);
                            if d2 < cut2 {
                                f(x, y, z, peak * (-0.5 * d2 / (sigma * sigma)).exp());
                            }
                        }
                    }
                }
            }
            Structure::Ellipsoid {
                center,
                semi_axes,
                rotation,
                peak,
            } => {
                let amin = semi_axes.iter().cloned().fold(f64::INFINITY, f64::min);
                for z in b[2].0..b[2].1 {
                    for y in b[1].0..b[1].1 {
                        for x in b[0].0..b[0].1 {
                            let p = sub([x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5], *center);
                            let rho = (0..3)
                                .map(|k| (dot(rotation[k], p) / semi_axes[k]).powi(2))
                                .sum::<f64>()
                                .sqrt();
                            let v = ((1.0 - rho) * amin + 0.5).clamp(0.0, 1.0);
                            if v > 0.0 {
                                f(x, y, z, peak * v);
                            }
                        }
                    }
                }
            }
            Structure::Membrane {
                normal,
                offset,
                thickness,
                peak,
            } => {
                for z in b[2].0..b[2].1 {
                    for y in b[1].0..b[1].1 {
                        for x in b[0].0..b[0].1 {
                            let d = dot(*normal, [x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5]) - offset;
                            let v = (0.5 * thickness - d.abs() + 0.5).clamp(0.0, 1.0);
                            if v > 0.0 {
                                f(x, y, z, peak * v);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Renders structures into `depth` slices of `width x height`, max-compositing overlaps.
pub fn render_structures(dims: [usize; 3], structures: &[Structure]) -> Vec<Image> {
    let [w, h, d] = dims;
    let mut vol = vec![0.0f64; w * h * d];
    for s in structures {
        s.rasterize(dims, |x, y, z, v| {
            let c = &mut vol[(z * h + y) * w + x];
            if v > *c {
                *c = v;
            }
        });
    }
    vol.chunks(w * h)
        .map(|c| Image::from_vec(w, h, c.to_vec()).expect("chunk size matches"))
        .collect()
}

fn random_unit(rng: &mut SplitMix64) -> [f64; 3] {
    loop {
        let v = [rng.normal(), rng.normal(), rng.normal()];
        let n = dot(v, v).sqrt();
        if n > 1e-9 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

fn random_rotation(rng: &mut SplitMix64) -> [[f64; 3]; 3] {
    let a = random_unit(rng);
    let mut b = random_unit(rng);
    let p = dot(a, b);
    b = sub(b, [a[0] * p, a[1] * p, a[2] * p]);
    let n = dot(b, b).sqrt().max(1e-12);
    b = [b[0] / n, b[1] / n, b[2] / n];
    let c = [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]];
    [a, b, c]
}

/// Samples `count` random structures inside a `dims` volume.
pub fn sample_structures(dims: [usize; 3], count: usize, rng: &mut SplitMix64) -> Vec<Structure> {
    let ext = [dims[0] as f64, dims[1] as f64, dims[2] as f64];
    let point = |rng: &mut SplitMix64, margin: f64| {
        [
            rng.uniform(-margin, ext[0] + margin),
            rng.uniform(-margin, ext[1] + margin),
            rng.uniform(-margin, ext[2] + margin),
        ]
    };
    (0..count)
        .map(|_| {
            let kind = rng.below(10);
            let peak = rng.uniform(0.4, 1.0);
            if kind < 5 {
                let control = [point(rng, 4.0), point(rng, 4.0), point(rng, 4.0), point(rng, 4.0)];
                Structure::Tube {
                    control,
                    radius: rng.uniform(1.5, 4.0),
                    peak,
                }
            } else if kind < 8 {
                Structure::Ellipsoid {
                    center: point(rng, 0.0),
                    semi_axes: [rng.uniform(3.0, 10.0), rng.uniform(3.0, 10.0), rng.uniform(3.0, 10.0)],
                    rotation: random_rotation(rng),
                    peak,
                }
            } else {
                let normal = random_unit(rng);
                let c = point(rng, 0.0);
                Structure::Membrane {
                    normal,
                    offset: dot(normal, c),
                    thickness: rng.uniform(1.0, 2.0),
                    peak: 0.6 * peak,
                }
            }
        })
        .collect()
}

/// Deterministic synthetic volume of `dims = [width, height, depth]`.
pub fn generate_phantom(seed: u64, dims: [usize; 3], structures: usize) -> Result<Vec<Image>> {
    if dims.iter().any(|&d| d < 16) {
        return Err(Error::invalid(format!(
            "phantom dimensions {}x{}x{} must each be at least 16",
            dims[0], dims[1], dims[2]
        )));
    }
    let mut rng = SplitMix64::new(seed);
    let s = sample_structures(dims, structures, &mut rng);
    Ok(render_structures(dims, &s))
}

/// Zero-padded slice file names: `slice_0000.pgm`, ...
pub fn slice_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("slice_{i:04}.pgm")).collect()
}

pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}
