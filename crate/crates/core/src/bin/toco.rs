use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use toco_core::checkpoint;
use toco_core::data::{export_dataset, gen_shapes_dataset, load_dir_dataset, write_label_png, Dataset};
use toco_core::diagnostics::{
    blockwise_similarity, evaluate, evaluate_with, render_cam, run_ablation, shapes_datasets, AblationGrid,
};
use toco_core::segmenter::{MetricsWriter, Preset, TrainConfig, Trainer};

#[derive(Parser)]
#[command(name = "toco", version, about = "Token-contrast weakly-supervised segmentation on synthetic shapes")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML file overriding the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Training seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "toco-out")]
    out: PathBuf,
    #[arg(long, global = true, value_enum, default_value = "desk")]
    preset: Preset,
    /// Extra `dotted.key=value` overrides, applied last.
    #[arg(long = "set", global = true)]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics, checkpoints and a final evaluation.
    Train {
        /// Train on a directory dataset instead of generated shapes.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint (final CAM, auxiliary CAM, decoder).
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Also write predicted label PNGs.
        #[arg(long)]
        dump_labels: bool,
    },
    /// Per-block similarity curve and CAM / similarity / attention renders.
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Images used for the similarity curve.
        #[arg(long, default_value_t = 64)]
        samples: usize,
        /// Images rendered.
        #[arg(long, default_value_t = 4)]
        renders: usize,
    },
    /// Run a grid of settings and append one CSV row per setting.
    Ablate {
        #[arg(long)]
        grid: PathBuf,
    },
    /// Export a synthetic shapes dataset in directory format.
    GenData {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
    },
}

fn load_config(c: &Common) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::preset(c.preset);
    if let Some(path) = &c.config {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let table: toml::Table = text.parse().with_context(|| format!("parsing {}", path.display()))?;
        cfg = cfg.merge_toml(&table).with_context(|| format!("applying {}", path.display()))?;
    }
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    Ok(cfg.with_assignments(&c.set)?)
}

fn eval_set(cfg: &TrainConfig, data: Option<&Path>) -> Result<Dataset> {
    match data {
        Some(dir) => Ok(load_dir_dataset(dir)?),
        None => Ok(shapes_datasets(cfg)?.1),
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    toco_core::init_thread_pool();
    let cli = Cli::parse();
    let c = &cli.common;
    let out = &c.out;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    match &cli.command {
        Command::Train { data } => {
            let cfg = load_config(c)?;
            let (train, eval) = match data {
                Some(dir) => {
                    let d = load_dir_dataset(dir)?;
                    (d.clone(), d)
                }
                None => shapes_datasets(&cfg)?,
            };
            std::fs::write(out.join("config.toml"), cfg.to_toml_string())?;
            let mut trainer = Trainer::<f32>::new(cfg.clone())?;
            let mut metrics = MetricsWriter::create(&out.join("metrics.csv"))?;
            let every = cfg.checkpoint_every;
            trainer.run(&train, |t, r| {
                metrics.write(r)?;
                if cfg.log_every > 0 && r.iteration % cfg.log_every == 0 {
                    log::info!(
                        "iter {:>6} lr {:.2e} total {:.4} cls {:.4} aux {:.4} ptc {:.4} ctc {:.4} seg {:.4}",
                        r.iteration,
                        r.lr,
                        r.losses.total,
                        r.losses.l_cls,
                        r.losses.l_cls_aux,
                        r.losses.l_ptc,
                        r.losses.l_ctc,
                        r.losses.l_seg
                    );
                }
                let done = t.iteration();
                if every > 0 && done % every == 0 && done < cfg.schedule.total_iters {
                    checkpoint::save(t.model(), &cfg, done, &out.join(format!("checkpoint_{done}.json")))?;
                }
                Ok(())
            })?;
            metrics.finish()?;
            let model = trainer.into_model();
            checkpoint::save(&model, &cfg, cfg.schedule.total_iters, &out.join("model.json"))?;
            let report = evaluate(&model, &eval, cfg.eval_bg_threshold)?;
            std::fs::write(out.join("eval.json"), serde_json::to_string_pretty(&report)?)?;
            println!(
                "cam mIoU {:.4}  aux cam mIoU {:.4}  seg mIoU {:.4}",
                report.cam.miou, report.aux_cam.miou, report.seg.miou
            );
        }
        Command::Eval {
            checkpoint: ckpt,
            data,
            dump_labels,
        } => {
            let (cfg, _, model) = checkpoint::load::<f32>(ckpt)?;
            let eval = eval_set(&cfg, data.as_deref())?;
            let dump = out.join("labels");
            if *dump_labels {
                for sub in ["cam", "aux_cam", "seg"] {
                    std::fs::create_dir_all(dump.join(sub))?;
                }
            }
            let report = evaluate_with(&model, &eval, cfg.eval_bg_threshold, |id, p| {
                if *dump_labels {
                    write_label_png(&dump.join("cam").join(format!("{id}.png")), p.cam.view())?;
                    write_label_png(&dump.join("aux_cam").join(format!("{id}.png")), p.aux_cam.view())?;
                    write_label_png(&dump.join("seg").join(format!("{id}.png")), p.seg.view())?;
                }
                Ok(())
            })?;
            std::fs::write(out.join("eval.json"), serde_json::to_string_pretty(&report)?)?;
            println!(
                "cam mIoU {:.4}  aux cam mIoU {:.4}  seg mIoU {:.4}",
                report.cam.miou, report.aux_cam.miou, report.seg.miou
            );
        }
        Command::Diagnose {
            checkpoint: ckpt,
            data,
            samples,
            renders,
        } => {
            let (cfg, _, model) = checkpoint::load::<f32>(ckpt)?;
            let eval = eval_set(&cfg, data.as_deref())?;
            let sim = blockwise_similarity(&model, &eval, *samples)?;
            let mut csv = String::from("block,mean_cosine\n");
            for (k, v) in sim.iter().enumerate() {
                csv.push_str(&format!("{},{v}\n", k + 1));
                println!("block {:>2}: {v:.4}", k + 1);
            }
            std::fs::write(out.join("similarity.csv"), csv)?;
            let dir = out.join("renders");
            for s in eval.samples.iter().take(*renders) {
                render_cam(s.image.view(), &s.image_labels, &model, &dir, &s.id)?;
            }
        }
        Command::Ablate { grid } => {
            let cfg = load_config(c)?;
            let text = std::fs::read_to_string(grid).with_context(|| format!("reading {}", grid.display()))?;
            let grid = AblationGrid::from_toml_str(&text)?;
            if grid.points().is_empty() {
                bail!("grid defines no settings");
            }
            let (train, eval) = shapes_datasets(&cfg)?;
            let rows = run_ablation(&cfg, &grid, &train, &eval, &out.join("ablation.csv"))?;
            for r in rows {
                println!("{}", r.csv_line());
            }
        }
        Command::GenData { n, classes, size } => {
            let cfg = load_config(c)?;
            let n = n.unwrap_or(cfg.data.train_samples);
            let classes = classes.unwrap_or(cfg.classes);
            let size = size.unwrap_or(cfg.model.image_size);
            let d = gen_shapes_dataset(n, classes, size, cfg.data.seed)?;
            export_dataset(&d, out)?;
            println!("wrote {} samples to {}", d.len(), out.display());
        }
    }
    Ok(())
}
