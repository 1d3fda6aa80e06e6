use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bevpred::config::RunConfig;
use bevpred::inference::decode_instances;
use bevpred::plot::{flow_image, mask_overlay, Image};
use bevpred::trainer::{
    baseline_report, evaluate_checkpoint, predict, run_ablation, AblationAxis, Checkpoint, RunLayout, Trainer,
};
use bevpred::world::{build_dataset, Dataset};
use bevpred::{Error, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

#[derive(Parser)]
#[command(name = "bevpred", version, about = "Future instance prediction on synthetic BEV grids")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the built-in toy preset instead of the defaults.
    #[arg(long)]
    toy: bool,
    /// Dotted override, e.g. `--set train.lr=1e-3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate train and eval splits under OUT.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Master seed of the train split; the eval split uses SEED + 1.
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Train a model into a run directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run: PathBuf,
        /// Continue from the run's last checkpoint.
        #[arg(long)]
        resume: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on the eval split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also report the copy-last-frame baseline.
        #[arg(long)]
        baseline: bool,
        /// Print machine-readable JSON instead of key=value text.
        #[arg(long)]
        json: bool,
        /// Also write the report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decode one eval sample and write its instance-ID maps.
    Infer {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Output container file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Render flow fields and mask overlays of one eval sample as PNGs.
    Plot {
        #[arg(long)]
        data: PathBuf,
        /// Adds predicted flow and instances when given.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        out: PathBuf,
        /// Pixels per grid cell.
        #[arg(long, default_value_t = 8)]
        scale: usize,
    },
    /// Train and evaluate a grid of config variants, e.g.
    /// `ablate matching=multi,single`.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run: PathBuf,
        /// Comma-separated seeds; each variant trains once per seed.
        #[arg(long, default_value = "0", value_delimiter = ',')]
        seeds: Vec<u64>,
        /// `key=v1,v2,...`; short keys `matching`, `attention`,
        /// `shared_heads` and `box_branch` are accepted.
        #[arg(required = true)]
        axes: Vec<String>,
        #[command(flatten)]
        common: Common,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        "config" => 2,
        "numeric" => 4,
        _ => 3,
    }
}

fn fail(kind: &str, msg: &str, code: u8) -> ExitCode {
    let msg: String = msg.split_whitespace().collect::<Vec<_>>().join(" ");
    eprintln!("error kind={kind} msg={msg:?}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", &e.kind().to_string(), 2),
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), &e.to_string(), exit_code(&e)),
    }
}

fn resolve(common: &Common, data_dir: Option<&Path>) -> Result<RunConfig> {
    let base = match (&common.config, data_dir.map(|d| d.join("config.toml"))) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(p)) if !common.toy && p.exists() => RunConfig::load(&p)?,
        _ if common.toy => RunConfig::toy(),
        _ => RunConfig::default(),
    };
    let mut cfg = base;
    for o in &common.overrides {
        cfg = cfg.with_override(o)?;
    }
    info!("resolved config hash {}\n{}", cfg.hash(), cfg.to_toml());
    Ok(cfg)
}

fn load_splits(dir: &Path) -> Result<(Dataset, Dataset)> {
    Ok((Dataset::load(&dir.join("train"))?, Dataset::load(&dir.join("eval"))?))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn expand_axis(spec: &str) -> String {
    let Some((k, v)) = spec.split_once('=') else {
        return spec.to_string();
    };
    let key = match k.trim() {
        "matching" => "loss.matching",
        "attention" => "model.attention",
        "shared_heads" => "model.shared_heads",
        "box_branch" => "model.box_branch",
        other => other,
    };
    format!("{key}={v}")
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenData { out, seed, common } => {
            let mut cfg = resolve(&common, None)?;
            if let Some(s) = seed {
                cfg.data.train_seed = s;
                cfg.data.eval_seed = s.wrapping_add(1);
            }
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let tr = build_dataset(&cfg.data.train_split(), &out.join("train"))?;
            let ev = build_dataset(&cfg.data.eval_split(), &out.join("eval"))?;
            write_text(&out.join("config.toml"), &cfg.to_toml())?;
            println!("train scenarios={} manifest_hash={}", tr.len(), tr.hash());
            println!("eval scenarios={} manifest_hash={}", ev.len(), ev.hash());
        }
        Cmd::Train {
            data,
            run,
            resume,
            common,
        } => {
            let (tr, ev) = load_splits(&data)?;
            let layout = RunLayout::new(&run);
            let mut trainer = if resume {
                let ck = Checkpoint::load(&layout.last_checkpoint())?;
                if !common.overrides.is_empty() || common.config.is_some() {
                    let cfg = resolve(&common, Some(&data))?;
                    if cfg.hash() != ck.config.hash() {
                        return Err(Error::Config("resume config differs from the checkpoint's".into()));
                    }
                }
                info!("resuming at step {}", ck.state.step);
                Trainer::from_checkpoint(ck, &tr, &ev)?
            } else {
                Trainer::new(resolve(&common, Some(&data))?, &tr, &ev)?
            };
            trainer.run(Some(&run), None)?;
            println!(
                "trained steps={} best_vpq={} checkpoint={}",
                trainer.state.step,
                trainer.state.best_vpq.map_or("n/a".into(), |v| format!("{v:.4}")),
                layout.last_checkpoint().display()
            );
        }
        Cmd::Eval {
            data,
            checkpoint,
            baseline,
            json,
            out,
        } => {
            let ev = Dataset::load(&data.join("eval"))?;
            let ck = Checkpoint::load(&checkpoint)?;
            let name = checkpoint.display().to_string();
            let mut reports = vec![evaluate_checkpoint(&ck, &ev, &name)?];
            if baseline {
                reports.push(baseline_report(&ck.config, &ev)?);
            }
            let text = if json {
                reports
                    .iter()
                    .map(|r| serde_json::to_string(r).expect("serialises") + "\n")
                    .collect::<String>()
            } else {
                reports.iter().map(|r| r.to_string()).collect::<String>()
            };
            print!("{text}");
            if let Some(p) = out {
                write_text(&p, &text)?;
            }
        }
        Cmd::Infer {
            data,
            checkpoint,
            index,
            out,
        } => {
            let ev = Dataset::load(&data.join("eval"))?;
            let ck = Checkpoint::load(&checkpoint)?;
            let s = ev.samples.get(index).ok_or(Error::OutOfRange { index, len: ev.len() })?;
            let p = predict(&ck.state.store, &ck.config, s)?;
            let seg = decode_instances(&p, &s.grid, &ck.config.inference)?;
            seg.to_container()?.write(&out)?;
            for (t, f) in seg.frames.iter().enumerate() {
                let mut ids: Vec<u32> = f.iter().copied().filter(|&v| v != 0).collect();
                ids.sort_unstable();
                ids.dedup();
                println!("frame={t} instances={} cells={}", ids.len(), f.iter().filter(|&&v| v != 0).count());
            }
        }
        Cmd::Plot {
            data,
            checkpoint,
            index,
            out,
            scale,
        } => {
            let ev = Dataset::load(&data.join("eval"))?;
            let s = ev.samples.get(index).ok_or(Error::OutOfRange { index, len: ev.len() })?;
            let (h, w) = (s.grid.height, s.grid.width);
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let pred = match &checkpoint {
                Some(c) => {
                    let ck = Checkpoint::load(c)?;
                    let p = predict(&ck.state.store, &ck.config, s)?;
                    let seg = decode_instances(&p, &s.grid, &ck.config.inference)?;
                    Some((p, seg))
                }
                None => None,
            };
            let flows: Vec<Vec<f64>> = s.frames[1..]
                .iter()
                .map(|f| f.backward_flow.iter().map(|&v| v as f64).collect())
                .collect();
            let top = flows.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-9) * 2f64.sqrt();
            let gt_flow: Vec<Image> = flows.iter().map(|f| flow_image(f, h, w, Some(top))).collect();
            Image::hstack(&gt_flow, 1).upscale(scale).write_png(&out.join("flow_gt.png"))?;
            let empty = vec![0u32; h * w];
            let masks: Vec<Image> = s
                .frames
                .iter()
                .enumerate()
                .map(|(t, f)| {
                    let p = pred.as_ref().map_or(&empty, |(_, seg)| &seg.frames[t]);
                    mask_overlay(&f.instance_ids, p, h, w)
                })
                .collect();
            Image::hstack(&masks, 1).upscale(scale).write_png(&out.join("masks.png"))?;
            if let Some((p, _)) = &pred {
                let imgs: Vec<Image> = p.flows.iter().map(|f| flow_image(f.data(), h, w, Some(top))).collect();
                Image::hstack(&imgs, 1).upscale(scale).write_png(&out.join("flow_pred.png"))?;
            }
            println!("wrote plots to {}", out.display());
        }
        Cmd::Ablate {
            data,
            run,
            seeds,
            axes,
            common,
        } => {
            let (tr, ev) = load_splits(&data)?;
            let cfg = resolve(&common, Some(&data))?;
            let axes = axes
                .iter()
                .map(|a| AblationAxis::parse(&expand_axis(a)))
                .collect::<Result<Vec<_>>>()?;
            let table = run_ablation(&cfg, &axes, &seeds, &tr, &ev, Some(&run))?;
            let text = table.to_string();
            print!("{text}");
            write_text(&run.join("ablation.txt"), &text)?;
            write_text(
                &run.join("ablation.json"),
                &serde_json::to_string_pretty(&table).expect("serialises"),
            )?;
        }
    }
    Ok(())
}
