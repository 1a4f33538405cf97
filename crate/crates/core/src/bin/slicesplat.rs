use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use slicesplat::checkpoint::Checkpoint;
use slicesplat::config::RunConfig;
use slicesplat::deform::DeformNet;
use slicesplat::pipeline::{evaluate, Reconstruction};
use slicesplat::train::{LossRecord, Trainer, TrainingSet};
use slicesplat::volume::{
    generate_phantom, load_stack, read_held_out_map, read_slice, slice_names, subsample_z, write_held_out_map,
    write_pgm, HeldOutEntry, SliceStack,
};
use slicesplat::{Error, Image, Result};

#[derive(Parser)]
#[command(name = "slicesplat", version, about = "Slice-to-volume reconstruction with deformable 2D Gaussians")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic volume and a manifest describing it.
    Phantom {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// WIDTHxHEIGHTxDEPTH
        #[arg(long, default_value = "64x64x61")]
        dims: String,
        /// Number of structures.
        #[arg(long, default_value_t = 14)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Keep every FACTOR-th slice and write the held-out map.
    Subsample {
        manifest: PathBuf,
        #[arg(long)]
        factor: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on the slices named by the manifest.
    Train {
        manifest: PathBuf,
        #[command(flatten)]
        common: Overrides,
        #[arg(long)]
        pseudo_iters: Option<usize>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this iteration instead of the configured total.
        #[arg(long)]
        stop_at: Option<usize>,
    },
    /// Synthesize slices at one depth or over a range.
    Render {
        checkpoint: PathBuf,
        #[arg(long, conflicts_with = "range")]
        t: Option<f64>,
        #[arg(long, num_args = 2, value_names = ["START", "END"], requires = "step")]
        range: Option<Vec<f64>>,
        /// Step size, a decimal or a fraction such as 1/60.
        #[arg(long)]
        step: Option<String>,
        #[arg(long)]
        out: PathBuf,
        /// Also write per-pixel compositing records next to each slice.
        #[arg(long)]
        dump_aux: bool,
    },
    /// Score a checkpoint on the held-out slices, with interpolation baselines.
    Eval {
        manifest: PathBuf,
        #[command(flatten)]
        common: Overrides,
        /// Defaults to `<out_dir>/model.bin`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also write the key-value report here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train with and without the teacher over several seeds and compare.
    Ablate {
        manifest: PathBuf,
        #[command(flatten)]
        common: Overrides,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
    },
}

#[derive(Args)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    /// Override any manifest key, e.g. `--set net_width=64`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::InvalidArgument(_) | Error::Manifest { .. } => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Phantom { seed, dims, n, out } => phantom(seed, &dims, n, &out),
        Command::Subsample { manifest, factor, out } => subsample(&manifest, factor, &out),
        Command::Train {
            manifest,
            common,
            pseudo_iters,
            resume,
            stop_at,
        } => {
            let mut cfg = load_config(&manifest, &common)?;
            if let Some(p) = pseudo_iters {
                cfg.apply_override(&format!("pseudo_iters={p}"), Path::new("."))?;
            }
            print!("{}", cfg.to_manifest());
            train(&cfg, resume.as_deref(), stop_at)
        }
        Command::Render {
            checkpoint,
            t,
            range,
            step,
            out,
            dump_aux,
        } => render(&checkpoint, t, range, step.as_deref(), &out, dump_aux),
        Command::Eval {
            manifest,
            common,
            checkpoint,
            report,
        } => {
            let cfg = load_config(&manifest, &common)?;
            print!("{}", cfg.to_manifest());
            let ck = checkpoint.unwrap_or_else(|| cfg.out_dir.join("model.bin"));
            eval(&cfg, &ck, report.as_deref())
        }
        Command::Ablate { manifest, common, seeds } => {
            let cfg = load_config(&manifest, &common)?;
            print!("{}", cfg.to_manifest());
            ablate(&cfg, &seeds)
        }
    }
}

fn load_config(manifest: &Path, o: &Overrides) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(manifest)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let seed = o.seed.map(|s| format!("seed={s}"));
    cfg.apply_overrides(o.set.iter().chain(&seed).map(String::as_str), base)?;
    Ok(cfg)
}

fn parse_dims(s: &str) -> Result<[usize; 3]> {
    let v: Vec<usize> = s
        .split(['x', 'X'])
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::InvalidArgument(format!("dims {s:?} must look like 64x64x61")))?;
    <[usize; 3]>::try_from(v).map_err(|_| Error::InvalidArgument(format!("dims {s:?} must have three parts")))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::File {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::File {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn phantom(seed: u64, dims: &str, n: usize, out: &Path) -> Result<()> {
    let dims = parse_dims(dims)?;
    let slices = generate_phantom(seed, dims, n)?;
    let stack = SliceStack::new(slices, slice_names(dims[2]))?;
    stack.write_pgm_dir(&out.join("slices"))?;
    let manifest = format!(
        "# phantom seed {seed}, {n} structures\nslices_dir = slices\npattern = *.pgm\nwidth = {}\nheight = {}\nanisotropy = 1\nseed = {seed}\n",
        dims[0], dims[1]
    );
    write_text(&out.join("manifest.txt"), &manifest)?;
    println!("wrote {} slices and {}", dims[2], out.join("manifest.txt").display());
    Ok(())
}

fn load_slices(cfg: &RunConfig) -> Result<SliceStack> {
    let stack = load_stack(&cfg.slices_dir, &cfg.pattern)?;
    let (w, h) = stack.dims();
    if cfg.width.is_some_and(|x| x != w) || cfg.height.is_some_and(|x| x != h) {
        return Err(Error::DimensionMismatch(format!(
            "slices are {w}x{h} but the manifest says {}x{}",
            cfg.width.unwrap_or(w),
            cfg.height.unwrap_or(h)
        )));
    }
    Ok(stack)
}

fn subsample(manifest: &Path, factor: usize, out: &Path) -> Result<()> {
    let cfg = RunConfig::load(manifest)?;
    let full = load_slices(&cfg)?;
    let sub = subsample_z(&full, factor)?;
    sub.observed.write_pgm_dir(&out.join("observed"))?;
    let held_dir = out.join("held_out");
    create_dir(&held_dir)?;
    let mut entries = Vec::with_capacity(sub.held_out.len());
    for (e, img) in sub.held_out.iter().zip(&sub.held_out_slices) {
        write_pgm(img, &held_dir.join(&e.name))?;
        entries.push(HeldOutEntry {
            name: format!("held_out/{}", e.name),
            ..e.clone()
        });
    }
    write_held_out_map(&entries, &out.join("held_out.txt"))?;
    let mut text = format!(
        "slices_dir = observed\npattern = {}\nanisotropy = {factor}\nheld_out_map = held_out.txt\nseed = {}\n",
        cfg.pattern, cfg.train.seed
    );
    if let (Some(w), Some(h)) = (cfg.width, cfg.height) {
        text.push_str(&format!("width = {w}\nheight = {h}\n"));
    }
    write_text(&out.join("manifest.txt"), &text)?;
    println!(
        "kept {} of {} slices; {} held out",
        sub.observed.len(),
        full.len(),
        entries.len()
    );
    Ok(())
}

fn training_set(cfg: &RunConfig) -> Result<TrainingSet> {
    load_slices(cfg)?.training_set(cfg.anisotropy)
}

fn train(cfg: &RunConfig, resume: Option<&Path>, stop_at: Option<usize>) -> Result<()> {
    let data = training_set(cfg)?;
    create_dir(&cfg.out_dir)?;
    write_text(&cfg.out_dir.join("config.txt"), &cfg.to_manifest())?;
    let log_path = cfg.out_dir.join("loss.log");

    let (mut trainer, mut log_text) = match resume {
        Some(p) => {
            let state = Checkpoint::load(p)?.into_state()?;
            let start = state.iter;
            // Keep the log consistent: drop lines from iterations that will be rerun.
            let old = fs::read_to_string(&log_path).unwrap_or_default();
            let mut kept = String::from(LossRecord::HEADER);
            kept.push('\n');
            for line in old.lines().skip(1) {
                if line.split(' ').next().and_then(|s| s.parse::<usize>().ok()).is_some_and(|i| i < start) {
                    kept.push_str(line);
                    kept.push('\n');
                }
            }
            (Trainer::from_state(&data, cfg.train.clone(), state)?, kept)
        }
        None => (Trainer::new(&data, cfg.train.clone())?, format!("{}\n", LossRecord::HEADER)),
    };
    let file = fs::File::create(&log_path).map_err(|e| Error::File {
        path: log_path.clone(),
        message: e.to_string(),
    })?;
    let mut log = BufWriter::new(file);
    log.write_all(log_text.as_bytes())?;
    log_text.clear();

    let every = cfg.checkpoint_every;
    let end = stop_at.unwrap_or(usize::MAX);
    let net_cfg = cfg.train.net.clone();
    let out_dir = cfg.out_dir.clone();
    trainer.run_until(end, |rec, tr| {
        writeln!(log, "{rec}")?;
        let done = rec.iter + 1;
        if every > 0 && done % every == 0 {
            log.flush()?;
            Checkpoint::from_state(tr.state(), &net_cfg, true).save(&out_dir.join(format!("checkpoint_{done:06}.bin")))?;
        }
        if done % 500 == 0 {
            eprintln!("{rec}");
        }
        Ok(())
    })?;
    log.flush()?;
    let final_ck = Checkpoint::from_state(trainer.state(), &net_cfg, true);
    final_ck.save(&cfg.out_dir.join("model.bin"))?;
    println!(
        "trained {} iterations, {} Gaussians; wrote {}",
        trainer.state().iter,
        trainer.state().model.len(),
        cfg.out_dir.join("model.bin").display()
    );
    Ok(())
}

fn reconstruction(ck: Checkpoint) -> Result<Reconstruction> {
    let net = DeformNet::new(ck.net_config, ck.model.width, ck.model.height)?;
    Reconstruction::new(ck.model, net, ck.student, Default::default())
}

fn parse_step(s: &str) -> Result<f64> {
    let v = match s.split_once('/') {
        Some((a, b)) => {
            let a: f64 = a.trim().parse().map_err(|_| Error::InvalidArgument(format!("bad step {s:?}")))?;
            let b: f64 = b.trim().parse().map_err(|_| Error::InvalidArgument(format!("bad step {s:?}")))?;
            a / b
        }
        None => s.trim().parse().map_err(|_| Error::InvalidArgument(format!("bad step {s:?}")))?,
    };
    if !(v > 0.0 && v.is_finite()) {
        return Err(Error::InvalidArgument(format!("step {s:?} must be positive")));
    }
    Ok(v)
}

fn check_t(t: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("t = {t} must lie in [0, 1]")));
    }
    Ok(t)
}

fn render(
    checkpoint: &Path,
    t: Option<f64>,
    range: Option<Vec<f64>>,
    step: Option<&str>,
    out: &Path,
    dump_aux: bool,
) -> Result<()> {
    let ts: Vec<f64> = match (t, range) {
        (Some(t), None) => vec![check_t(t)?],
        (None, Some(r)) => {
            let (a, b) = (check_t(r[0])?, check_t(r[1])?);
            let step = parse_step(step.unwrap_or("0"))?;
            if b < a {
                return Err(Error::InvalidArgument("range end lies before its start".into()));
            }
            let n = ((b - a) / step + 1e-9).floor() as usize;
            (0..=n).map(|i| (a + i as f64 * step).min(b)).collect()
        }
        _ => return Err(Error::InvalidArgument("give either --t or --range with --step".into())),
    };
    let recon = reconstruction(Checkpoint::load(checkpoint)?)?;
    create_dir(out)?;
    for t in &ts {
        let name = format!("slice_t{t:.6}");
        write_pgm(&recon.slice(*t)?, &out.join(format!("{name}.pgm")))?;
        if dump_aux {
            let means: Vec<[f64; 2]> = recon.model.gaussians.iter().map(|g| g.mean).collect();
            let deltas = recon.net.batched_forward(&recon.params, &means, *t)?;
            let (_, aux) = recon.renderer.render(&recon.model, &deltas)?;
            let p = out.join(format!("{name}.aux.txt"));
            let f = fs::File::create(&p).map_err(|e| Error::File {
                path: p.clone(),
                message: e.to_string(),
            })?;
            aux.write_text(BufWriter::new(f))?;
        }
    }
    println!("wrote {} slice(s) to {}", ts.len(), out.display());
    Ok(())
}

fn held_out(cfg: &RunConfig) -> Result<(Vec<HeldOutEntry>, Vec<Image>)> {
    let map = cfg
        .held_out_map
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("manifest has no held_out_map".into()))?;
    let entries = read_held_out_map(map)?;
    let base = map.parent().unwrap_or(Path::new("."));
    let truth = entries
        .iter()
        .map(|e| read_slice(&base.join(&e.name)))
        .collect::<Result<Vec<_>>>()?;
    Ok((entries, truth))
}

fn eval(cfg: &RunConfig, checkpoint: &Path, report_path: Option<&Path>) -> Result<()> {
    let data = training_set(cfg)?;
    let (entries, truth) = held_out(cfg)?;
    let recon = reconstruction(Checkpoint::load(checkpoint)?)?;
    let reports = evaluate(&recon, &data, &entries, &truth)?;
    let mut kv = String::new();
    for r in &reports {
        println!("{}", r.table());
        kv.push_str(&r.key_values());
    }
    print!("{kv}");
    if let Some(p) = report_path {
        write_text(p, &kv)?;
    }
    Ok(())
}

fn ablate(cfg: &RunConfig, seeds: &[u64]) -> Result<()> {
    let data = training_set(cfg)?;
    let (entries, truth) = held_out(cfg)?;
    let mut arms = [("teacher", Vec::new()), ("no-teacher", Vec::new())];
    for &seed in seeds {
        for (arm, scores) in arms.iter_mut() {
            let mut run = cfg.train.clone();
            run.seed = seed;
            if *arm == "no-teacher" {
                run.pseudo_iters = 0;
            }
            let out = slicesplat::train::train(&data, run.clone())?;
            let net = DeformNet::new(run.net.clone(), data.width(), data.height())?;
            let recon = Reconstruction::new(out.state.model, net, out.state.student, run.render.clone())?;
            let [model, ..] = evaluate(&recon, &data, &entries, &truth)?;
            println!("seed {seed} {arm} psnr {:.4} ssim {:.4}", model.mean_psnr(), model.mean_ssim());
            scores.push(model.mean_psnr());
        }
    }
    for (arm, scores) in &arms {
        let mean = scores.iter().sum::<f64>() / scores.len().max(1) as f64;
        println!("{arm} mean_psnr {mean:.4}");
    }
    Ok(())
}
