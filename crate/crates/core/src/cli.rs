//! Command-line entry point.
//!
//! Every command reads an optional JSON config (`--config`), applies dotted
//! overrides such as `--guidance.lambda 0.5` plus a few short aliases, and
//! writes the effective config next to its outputs. Exit codes: 0 success,
//! 1 contract violation, 2 bad config.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::{apply_override, RunConfig};
use crate::denoiser::DenoiserWeights;
use crate::diffcore::{Rng, Stream};
use crate::error::{Error, Result};
use crate::eval::{erase_report, mse, psnr};
use crate::gradcheck;
use crate::inversion::{invert, InversionBundle};
use crate::ppm;
use crate::sampler::sample_edit;
use crate::schedule::NoiseSchedule;
use crate::training::{gen_scene, gen_two_object_scene, run_training, SceneSpec, Trainer};

#[derive(Parser, Debug)]
#[command(name = "eraselab", about = "Text-guided object erasure on a tiny diffusion model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run config; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the denoiser on synthetic scenes.
    Train {
        #[command(flatten)]
        common: Common,
        /// Final checkpoint path; periodic checkpoints go next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Invert a generated scene and optimise per-step null embeddings.
    Invert {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: Option<String>,
        #[arg(long = "scene-seed")]
        scene_seed: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Erase the target object from an inverted scene.
    Erase {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: Option<String>,
        #[arg(long)]
        bundle: Option<String>,
        /// Target phrase, e.g. "red square"; repeat for several objects.
        #[arg(long)]
        target: Vec<String>,
        #[arg(long)]
        lambda: Option<String>,
        #[arg(long)]
        v: Option<String>,
        #[arg(long = "N")]
        n: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Null edit: reconstruction with guidance and repeats disabled.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: Option<String>,
        #[arg(long)]
        bundle: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference checks of every tape op and the erasure energy.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Erasure metrics over scenes for several values of one parameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: Option<String>,
        #[arg(long)]
        param: Option<String>,
        #[arg(long)]
        values: Option<String>,
        #[arg(long)]
        scenes: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Splits `--a.b value` / `--a.b=value` overrides out of `args`.
fn extract_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--") else {
            rest.push(a);
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        if !name.contains('.') {
            rest.push(a);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it
                .next()
                .ok_or_else(|| Error::Config(format!("--{name} needs a value")))?,
        };
        overrides.push((name, value));
    }
    Ok((rest, overrides))
}

fn push(overrides: &mut Vec<(String, String)>, path: &str, value: &Option<String>) {
    if let Some(v) = value {
        overrides.push((path.to_string(), v.clone()));
    }
}

fn load_config(common: &Common, overrides: &[(String, String)]) -> Result<RunConfig> {
    RunConfig::load(common.config.as_deref(), overrides)
}

/// `<out>` with `suffix` appended to the file name.
fn sidecar(out: &Path, suffix: &str) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    out.with_file_name(name)
}

/// `dir/model.ckpt` → `dir/model.step001000.ckpt`.
fn step_path(out: &Path, step: usize) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match out.extension() {
        Some(ext) => format!("{stem}.step{step:06}.{}", ext.to_string_lossy()),
        None => format!("{stem}.step{step:06}"),
    };
    out.with_file_name(name)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(p)?;
    }
    Ok(())
}

fn write_config(path: &Path, cfg: &RunConfig) -> Result<()> {
    ensure_parent(path)?;
    std::fs::write(path, cfg.to_json()?)?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    for r in rows {
        writeln!(f, "{}", serde_json::to_string(r)?)?;
    }
    f.flush()?;
    Ok(())
}

fn required<'a>(value: &'a Option<PathBuf>, name: &str) -> Result<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| Error::Config(format!("{name} is required")))
}

/// Loads the checkpoint and checks its schedule against the config.
fn load_weights(cfg: &RunConfig) -> Result<(DenoiserWeights, NoiseSchedule)> {
    let (w, sp) = DenoiserWeights::load(required(&cfg.io.ckpt, "io.ckpt (--ckpt)")?)?;
    if sp != cfg.schedule {
        return Err(Error::Config(format!(
            "checkpoint schedule {sp:?} differs from config schedule {:?}",
            cfg.schedule
        )));
    }
    Ok((w, cfg.schedule()?))
}

/// The scene drawn from `seed` on the data stream.
pub fn make_scene(seed: u64, two_objects: bool) -> SceneSpec {
    let mut rng = Rng::new(seed, Stream::DataGen);
    if two_objects {
        gen_two_object_scene(&mut rng)
    } else {
        gen_scene(&mut rng)
    }
}

fn scene_of(bundle: &InversionBundle) -> Result<SceneSpec> {
    let scene = bundle
        .meta
        .get("scene")
        .ok_or_else(|| Error::Format("bundle carries no scene description".into()))?;
    Ok(serde_json::from_value(scene.clone())?)
}

fn invert_scene(cfg: &RunConfig, w: &DenoiserWeights, sched: &NoiseSchedule, seed: u64) -> Result<InversionBundle> {
    let scene = make_scene(seed, cfg.io.two_object_scenes);
    let meta = serde_json::json!({ "scene_seed": seed, "scene": scene });
    invert(&scene.render(), &scene.tokens, w, sched, &cfg.inversion, meta)
}

fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<()> {
    let sched = cfg.schedule()?;
    ensure_parent(out)?;
    write_config(&sidecar(out, ".config.json"), cfg)?;
    let mut log = BufWriter::new(File::create(sidecar(out, ".log.jsonl"))?);
    let mut trainer = Trainer::new(cfg.train.clone(), cfg.model.init_seed)?;
    let steps = cfg.train.steps;
    let last = run_training(
        &mut trainer,
        &sched,
        |l| {
            log::info!("step {} loss {:.5} running {:.5}", l.step, l.loss, l.running_loss);
            writeln!(log, "{}", serde_json::to_string(l)?)?;
            Ok(())
        },
        |t, l| {
            let meta = serde_json::json!({ "step": l.step, "running_loss": l.running_loss });
            let path = if l.step == steps { out.to_path_buf() } else { step_path(out, l.step) };
            t.weights.save(&path, sched.params(), meta)
        },
    )?;
    log.flush()?;
    log::info!("trained {} steps, running loss {:.5}", last.step, last.running_loss);
    Ok(())
}

fn cmd_invert(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (w, sched) = load_weights(cfg)?;
    let bundle = invert_scene(cfg, &w, &sched, cfg.io.scene_seed)?;
    ensure_parent(out)?;
    bundle.save(out)?;
    write_config(&sidecar(out, ".config.json"), cfg)?;
    write_jsonl(&sidecar(out, ".log.jsonl"), &bundle.log)?;
    ppm::write(&sidecar(out, ".input.ppm"), &bundle.trajectory[0])?;
    Ok(())
}

#[derive(Serialize)]
struct ReconstructReport {
    psnr_reconstruction: f64,
    recon_mse: f64,
}

fn cmd_edit(mut cfg: RunConfig, out: &Path, null_edit: bool) -> Result<()> {
    if null_edit {
        cfg.guidance.v = 0.0;
        cfg.guidance.n_repeats = 0;
        cfg.guidance.targets.clear();
    } else if cfg.guidance.targets.is_empty() && (cfg.guidance.v != 0.0 || cfg.guidance.n_repeats != 0) {
        return Err(Error::Config("guidance.targets is empty (use --target)".into()));
    }
    let (w, sched) = load_weights(&cfg)?;
    let bundle = InversionBundle::load(required(&cfg.io.bundle, "io.bundle (--bundle)")?)?;
    let scene = scene_of(&bundle)?;
    let mut guidance = cfg.guidance.clone();
    let target = match cfg.guidance.targets.first() {
        Some(phrase) => Some(scene.find_object(phrase)?),
        None => None,
    };
    if let (true, Some(idx)) = (guidance.use_scene_mask, target) {
        let m = scene.masks()[idx].reshape(&[crate::denoiser::IMAGE, crate::denoiser::IMAGE])?;
        guidance.mask = Some(m);
    }
    let result = sample_edit(&bundle, &w, &sched, &guidance, &cfg.sampler)?;

    std::fs::create_dir_all(out)?;
    write_config(&out.join("config.json"), &cfg)?;
    ppm::write(&out.join("recon.ppm"), &result.reconstructed)?;
    ppm::write(&out.join("edit.ppm"), &result.edited)?;
    write_jsonl(&out.join("steps.jsonl"), &result.logs)?;
    match target {
        Some(idx) => write_json(&out.join("report.json"), &erase_report(&result, &scene, idx, &w)?),
        None => {
            let original = &bundle.trajectory[0];
            let report = ReconstructReport {
                psnr_reconstruction: psnr(&result.reconstructed, original)?,
                recon_mse: mse(&result.reconstructed, original)?,
            };
            write_json(&out.join("report.json"), &report)
        }
    }
}

fn cmd_gradcheck(trials: usize, seed: u64) -> Result<()> {
    let reports = gradcheck::run_all(trials, seed)?;
    let mut failed = 0;
    for r in &reports {
        println!(
            "{} {:<36} trials={} max_rel_error={:.3e} tol={:.0e}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.trials,
            r.max_rel_error,
            r.tolerance
        );
        failed += usize::from(!r.passed);
    }
    if failed > 0 {
        return Err(Error::invalid(format!("{failed} gradient suites failed")));
    }
    Ok(())
}

pub const SWEEP_HEADER: &str = "param,value,scene_seed,psnr_reconstruction,attn_drop,bg_mse,obj_mse_vs_clean";

fn cmd_sweep(cfg: &RunConfig, out: &Path) -> Result<()> {
    if cfg.io.sweep_values.is_empty() {
        return Err(Error::Config("io.sweep_values is empty".into()));
    }
    let path = if cfg.io.sweep_param.contains('.') {
        cfg.io.sweep_param.clone()
    } else {
        format!("guidance.{}", cfg.io.sweep_param)
    };
    let base = serde_json::to_value(cfg)?;
    let variants = cfg
        .io
        .sweep_values
        .iter()
        .map(|v| {
            let mut doc = base.clone();
            apply_override(&mut doc, &base, &path, &v.to_string())?;
            RunConfig::from_json(Some(&doc.to_string()), &[])
        })
        .collect::<Result<Vec<_>>>()?;

    let (w, sched) = load_weights(cfg)?;
    let mut bundles = Vec::with_capacity(cfg.io.scenes);
    for i in 0..cfg.io.scenes as u64 {
        let seed = cfg.io.scene_seed + i;
        log::info!("inverting scene {seed}");
        bundles.push((seed, invert_scene(cfg, &w, &sched, seed)?));
    }

    std::fs::create_dir_all(out)?;
    write_config(&out.join("config.json"), cfg)?;
    let mut csv = String::from(SWEEP_HEADER);
    csv.push('\n');
    let mut reports = Vec::new();
    for (value, variant) in cfg.io.sweep_values.iter().zip(&variants) {
        for (seed, bundle) in &bundles {
            let scene = scene_of(bundle)?;
            let mut guidance = variant.guidance.clone();
            if guidance.targets.is_empty() {
                guidance.targets = vec![scene.phrase(0)?];
            }
            let target = scene.find_object(&guidance.targets[0])?;
            let result = sample_edit(bundle, &w, &sched, &guidance, &variant.sampler)?;
            let r = erase_report(&result, &scene, target, &w)?;
            csv.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                cfg.io.sweep_param, value, seed, r.psnr_reconstruction, r.attn_drop, r.bg_mse, r.obj_mse_vs_clean
            ));
            reports.push(serde_json::json!({ "value": value, "scene_seed": seed, "report": r }));
        }
    }
    std::fs::write(out.join("sweep.csv"), csv)?;
    write_jsonl(&out.join("reports.jsonl"), &reports)
}

fn dispatch(cli: Cli, mut overrides: Vec<(String, String)>) -> Result<()> {
    match cli.command {
        Command::Train { common, out } => cmd_train(&load_config(&common, &overrides)?, &out),
        Command::Invert {
            common,
            ckpt,
            scene_seed,
            out,
        } => {
            push(&mut overrides, "io.ckpt", &ckpt);
            push(&mut overrides, "io.scene_seed", &scene_seed);
            cmd_invert(&load_config(&common, &overrides)?, &out)
        }
        Command::Erase {
            common,
            ckpt,
            bundle,
            target,
            lambda,
            v,
            n,
            out,
        } => {
            push(&mut overrides, "io.ckpt", &ckpt);
            push(&mut overrides, "io.bundle", &bundle);
            if !target.is_empty() {
                let list = serde_json::to_string(&target)?;
                overrides.push(("guidance.targets".into(), list));
            }
            push(&mut overrides, "guidance.lambda", &lambda);
            push(&mut overrides, "guidance.v", &v);
            push(&mut overrides, "guidance.N", &n);
            cmd_edit(load_config(&common, &overrides)?, &out, false)
        }
        Command::Reconstruct {
            common,
            ckpt,
            bundle,
            out,
        } => {
            push(&mut overrides, "io.ckpt", &ckpt);
            push(&mut overrides, "io.bundle", &bundle);
            cmd_edit(load_config(&common, &overrides)?, &out, true)
        }
        Command::Gradcheck { trials, seed } => {
            if !overrides.is_empty() {
                return Err(Error::Config("gradcheck takes no config overrides".into()));
            }
            cmd_gradcheck(trials, seed)
        }
        Command::Sweep {
            common,
            ckpt,
            param,
            values,
            scenes,
            out,
        } => {
            push(&mut overrides, "io.ckpt", &ckpt);
            push(&mut overrides, "io.sweep_param", &param);
            push(&mut overrides, "io.sweep_values", &values);
            push(&mut overrides, "io.scenes", &scenes);
            cmd_sweep(&load_config(&common, &overrides)?, &out)
        }
    }
}

/// Exit code for an error: 2 for configuration problems, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        _ => 1,
    }
}

/// Runs the command line `args` (program name first) and returns the exit code.
pub fn run(args: Vec<String>) -> i32 {
    let (rest, overrides) = match extract_overrides(args) {
        Ok(x) => x,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
    };
    let cli = match Cli::try_parse_from(rest) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli, overrides) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
