//! Command-line driver for the super-resolution pipeline.
//!
//! Exit codes: 0 success, 1 verification/metric failure, 2 usage or
//! configuration error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use rbam::config::RunConfig;
use rbam::data::{self, Partition, Split};
use rbam::gradcheck;
use rbam::image::{bicubic_resample, image_to_tensor, read_pgm, tensor_to_image, write_pgm, GrayImage};
use rbam::metrics;
use rbam::model::{build, forward};
use rbam::optim::{self, load_checkpoint, save_checkpoint, AdamState};
use rbam::{Error, GrayImage64, ParamStore64, Result};

#[derive(Parser)]
#[command(name = "rbam", version, about = "Grayscale super resolution with bilinear attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// key = value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    scale: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    lr0: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::parse_file(path)?,
            None => RunConfig::default(),
        };
        let overrides: &[(&str, Option<String>)] = &[
            ("blocks", self.blocks.map(|v| v.to_string())),
            ("channels", self.channels.map(|v| v.to_string())),
            ("scale", self.scale.map(|v| v.to_string())),
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("batch_size", self.batch_size.map(|v| v.to_string())),
            ("patch_size", self.patch_size.map(|v| v.to_string())),
            ("lr0", self.lr0.map(|v| format!("{v:e}"))),
            ("seed", self.seed.map(|v| v.to_string())),
            ("checkpoint_every", self.checkpoint_every.map(|v| v.to_string())),
        ];
        for (key, value) in overrides {
            if let Some(v) = value {
                cfg.apply(key, v, 0)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Bicubic-downsample a PGM image by the given factor
    Degrade {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long = "out")]
        output: PathBuf,
        #[arg(long)]
        scale: usize,
    },
    /// Train a model on the train split of a manifest
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Super-resolve one PGM image with a trained checkpoint
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long = "out")]
        output: PathBuf,
    },
    /// Evaluate a checkpoint or the bicubic baseline over a manifest
    Eval {
        #[arg(long, conflicts_with = "baseline")]
        checkpoint: Option<PathBuf>,
        /// Only "bicubic" is supported
        #[arg(long)]
        baseline: Option<String>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        scale: usize,
        /// "all" or "rich" (requires a partitioned manifest)
        #[arg(long, default_value = "all")]
        partition: String,
    },
    /// Assign train/test splits with a seeded shuffle
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.8)]
        fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Label test images texture-rich/poor by bicubic restoration PSNR
    Partition {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        scale: usize,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Verify analytic gradients against finite differences at toy scale
    Gradcheck {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train the attention-ablation grid with a shared seed and budget
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn check_scale(scale: usize) -> Result<()> {
    if scale != 2 && scale != 4 {
        return Err(Error::Config(format!("scale must be 2 or 4, got {scale}")));
    }
    Ok(())
}

fn load_split_images(manifest: &data::Manifest, split: Split) -> Result<Vec<(String, GrayImage64)>> {
    let mut out = Vec::new();
    for rec in manifest.split_records(split) {
        out.push((rec.id.clone(), read_pgm(&rec.path)?));
    }
    Ok(out)
}

fn model_sr_fn<'a>(
    params: &'a ParamStore64,
    config: &'a rbam::ModelConfig,
) -> impl FnMut(&GrayImage64) -> Result<GrayImage64> + 'a {
    move |lr: &GrayImage64| {
        let out = forward(params, config, &image_to_tensor(lr))?;
        tensor_to_image(&out)
    }
}

fn cmd_train(config: ConfigArgs, manifest: PathBuf, out: PathBuf, resume: Option<PathBuf>) -> Result<()> {
    let cfg = config.resolve()?;
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("resolved.cfg"), cfg.render())?;
    let manifest = data::read_manifest(&manifest)?;
    let images: Vec<GrayImage<f64>> = load_split_images(&manifest, Split::Train)?
        .into_iter()
        .map(|(_, img)| img)
        .collect();
    if images.is_empty() {
        return Err(Error::Contract("manifest has no train records".into()));
    }

    let (params, mut state, start_epoch) = match resume {
        Some(path) => {
            let ckpt = load_checkpoint::<f64>(&path)?;
            if ckpt.config != cfg.model {
                return Err(Error::Config(
                    "checkpoint model config does not match the requested config".into(),
                ));
            }
            (ckpt.params, ckpt.state, ckpt.epochs_completed as usize)
        }
        None => {
            let params = build::<f64>(&cfg.model, cfg.train.seed)?;
            let state = AdamState::new(&params);
            (params, state, 0)
        }
    };

    let log_path = out.join("train.log");
    let ckpt_dir = out.clone();
    let every = cfg.train.checkpoint_every.max(1);
    let mcfg = cfg.model.clone();
    let logs = optim::train(
        &params,
        &cfg.model,
        &cfg.train,
        &images,
        &mut state,
        start_epoch,
        |log, params, state| {
            use std::io::Write;
            let mut f = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&log_path)?;
            writeln!(f, "{}", log.line())?;
            println!("{}", log.line());
            if (log.epoch + 1) % every == 0 {
                save_checkpoint(
                    &ckpt_dir.join(format!("epoch{}.ckpt", log.epoch + 1)),
                    &mcfg,
                    params,
                    state,
                    (log.epoch + 1) as u32,
                )?;
            }
            Ok(())
        },
    )?;
    let done = start_epoch + logs.len();
    save_checkpoint(&out.join("final.ckpt"), &cfg.model, &params, &state, done as u32)?;
    Ok(())
}

fn cmd_eval(
    checkpoint: Option<PathBuf>,
    baseline: Option<String>,
    manifest: PathBuf,
    scale: usize,
    partition: String,
) -> Result<()> {
    check_scale(scale)?;
    let manifest = data::read_manifest(&manifest)?;
    let mut images = load_split_images(&manifest, Split::Test)?;
    if images.is_empty() {
        // fall back to the whole manifest when no test split is marked
        images = load_split_images(&manifest, Split::Train)?;
    }
    match partition.as_str() {
        "all" => {}
        "rich" => {
            if manifest
                .records
                .iter()
                .all(|r| r.partition == Partition::Unassigned)
            {
                return Err(Error::Config(
                    "manifest is not partitioned; run `rbam partition` first".into(),
                ));
            }
            let rich: std::collections::HashSet<&str> = manifest
                .records
                .iter()
                .filter(|r| r.partition == Partition::Rich)
                .map(|r| r.id.as_str())
                .collect();
            images.retain(|(id, _)| rich.contains(id.as_str()));
            if images.is_empty() {
                eprintln!("warning: texture-rich partition is empty");
            }
        }
        other => {
            return Err(Error::Config(format!(
                "--partition must be 'all' or 'rich', got '{other}'"
            )));
        }
    }
    let report = match (checkpoint, baseline.as_deref()) {
        (Some(path), None) => {
            let ckpt = load_checkpoint::<f64>(&path)?;
            if ckpt.config.scale != scale {
                return Err(Error::Config(format!(
                    "checkpoint was trained for x{} but --scale is {scale}",
                    ckpt.config.scale
                )));
            }
            let mut sr = model_sr_fn(&ckpt.params, &ckpt.config);
            metrics::evaluate(&images, scale, &mut sr)?
        }
        (None, Some("bicubic")) => {
            let mut sr = |lr: &GrayImage64| bicubic_resample(lr, lr.height() * scale, lr.width() * scale);
            metrics::evaluate(&images, scale, &mut sr)?
        }
        (None, Some(other)) => {
            return Err(Error::Config(format!("unknown baseline '{other}'")));
        }
        _ => {
            return Err(Error::Config(
                "pass exactly one of --checkpoint or --baseline bicubic".into(),
            ));
        }
    };
    print!("{}", metrics::format_report(&report));
    Ok(())
}

fn cmd_ablate(config: ConfigArgs, manifest: PathBuf, out: PathBuf) -> Result<()> {
    let cfg = config.resolve()?;
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("resolved.cfg"), cfg.render())?;
    let manifest = data::read_manifest(&manifest)?;
    let images: Vec<GrayImage<f64>> = load_split_images(&manifest, Split::Train)?
        .into_iter()
        .map(|(_, img)| img)
        .collect();

    let variants = ablation_grid(&cfg.model);
    let mut table = String::from("variant\tparams\tfinal_l1\n");
    for (name, mcfg) in &variants {
        let params = build::<f64>(mcfg, cfg.train.seed)?;
        let mut state = AdamState::new(&params);
        let logs = optim::train(&params, mcfg, &cfg.train, &images, &mut state, 0, |_, _, _| Ok(()))?;
        let final_l1 = logs.last().map(|l| l.mean_l1).unwrap_or(f64::NAN);
        table.push_str(&format!("{name}\t{}\t{final_l1:.6}\n", params.param_count()));
        println!("{name}: params={} final_l1={final_l1:.6}", params.param_count());
    }
    std::fs::write(out.join("ablation.tsv"), &table)?;
    print!("{table}");
    Ok(())
}

/// The six-variant ablation grid, all sharing block/channel counts.
fn ablation_grid(base: &rbam::ModelConfig) -> Vec<(&'static str, rbam::ModelConfig)> {
    let mk = |ca: bool, sa: bool, first: bool, second: bool| rbam::ModelConfig {
        use_ca: ca,
        use_sa: sa,
        use_first_order: first,
        use_second_order: second,
        ..base.clone()
    };
    vec![
        ("baseline", mk(false, false, true, true)),
        ("ca-1st", mk(true, false, true, false)),
        ("ca-2nd", mk(true, false, false, true)),
        ("ca-both", mk(true, false, true, true)),
        ("sa-both", mk(false, true, true, true)),
        ("ca+sa-both", mk(true, true, true, true)),
    ]
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Degrade { input, output, scale } => {
            check_scale(scale)?;
            let img = read_pgm::<f64>(&input)?;
            if img.height() % scale != 0 || img.width() % scale != 0 {
                return Err(Error::Config(format!(
                    "image extents {}x{} not divisible by scale {scale}",
                    img.height(),
                    img.width()
                )));
            }
            let down = bicubic_resample(&img, img.height() / scale, img.width() / scale)?;
            write_pgm(&output, &down)?;
            Ok(true)
        }
        Command::Train { config, manifest, out, resume } => {
            cmd_train(config, manifest, out, resume)?;
            Ok(true)
        }
        Command::Infer { checkpoint, input, output } => {
            let ckpt = load_checkpoint::<f64>(&checkpoint)?;
            let img = read_pgm::<f64>(&input)?;
            let x = image_to_tensor(&img);
            let t0 = Instant::now();
            let sr = forward(&ckpt.params, &ckpt.config, &x)?;
            let seconds = t0.elapsed().as_secs_f64();
            write_pgm(&output, &tensor_to_image(&sr)?)?;
            println!("forward_seconds {seconds:.4}");
            Ok(true)
        }
        Command::Eval { checkpoint, baseline, manifest, scale, partition } => {
            cmd_eval(checkpoint, baseline, manifest, scale, partition)?;
            Ok(true)
        }
        Command::Split { manifest, out, fraction, seed } => {
            let m = data::read_manifest(&manifest)?;
            let m = data::split(&m, fraction, seed)?;
            data::write_manifest(&out, &m)?;
            Ok(true)
        }
        Command::Partition { manifest, out, scale, report } => {
            check_scale(scale)?;
            let m = data::read_manifest(&manifest)?;
            let mut load = |p: &Path| read_pgm::<f64>(p);
            let (m, rep) = data::partition_by_texture(&m, scale, &mut load)?;
            data::write_manifest(&out, &m)?;
            let text = rep.format();
            if let Some(path) = report {
                std::fs::write(path, &text)?;
            }
            print!("{text}");
            Ok(true)
        }
        Command::Gradcheck { config } => {
            let cfg = config.resolve()?;
            let mut all_ok = true;
            for (name, corner) in gradcheck::ablation_corners() {
                let report = gradcheck::model_gradcheck(&corner, cfg.train.seed, 8, 8, None)?;
                let (group, err) = report
                    .worst_group()
                    .map(|(g, e)| (g.clone(), *e))
                    .unwrap_or_default();
                println!(
                    "{name}: worst rel err {err:.3e} in {group} [{}]",
                    if report.passed() { "ok" } else { "FAIL" }
                );
                all_ok &= report.passed();
            }
            Ok(all_ok)
        }
        Command::Ablate { config, manifest, out } => {
            cmd_ablate(config, manifest, out)?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Contract(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
