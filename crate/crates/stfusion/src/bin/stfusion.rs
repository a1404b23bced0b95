//! Command-line entry point. Exit codes: 0 success, 2 config error,
//! 3 numerical failure, 4 failed acceptance check (gradcheck or
//! `ablate --assert`).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use stfusion::detect::write_detections;
use stfusion::encoder::Teacher;
use stfusion::error::{Error, Result};
use stfusion::harness::train::{scene_seed, teacher_encoder_spec};
use stfusion::harness::{
    assert_suite, evaluate, export_attention, format_table, gradcheck_all, metrics, run_ablation,
    train_student, train_teacher, ExperimentConfig, StudentModel, Suite,
};
use stfusion::inject::{inject_at, TieBreak};
use stfusion::scene::{generate_scene, save_scene};
use stfusion::tensor::ParameterStore;

#[derive(Parser)]
#[command(name = "stfusion", about = "Sequential LiDAR detection with spatial-temporal fusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the train/eval scene files (with semantic labels) for a config.
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; train_NNNN.txt and eval_NNNN.txt are created.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the teacher on injected single-frame clouds and freeze it.
    TrainTeacher {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint path for the frozen teacher.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Train the student (encoder, fusion, supervision, head).
    TrainStudent {
        #[arg(long)]
        config: PathBuf,
        /// Frozen teacher checkpoint (required when use_sup is set).
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Evaluate a student checkpoint on the config's eval split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        student: PathBuf,
        /// Also write every eval detection, one record per line.
        #[arg(long)]
        dets: Option<PathBuf>,
    },
    /// Run an ablation suite over several seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// fusion_table, pruning_table, or k_sweep.
        #[arg(long)]
        suite: String,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Fail (exit 4) when the suite's directional checks do not hold.
        #[arg(long, default_value_t = false)]
        assert: bool,
    },
    /// Finite-difference audit of every parameter tensor's gradient.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Dump the temporal attention maps for one scene as a text tensor.
    ExportAttention {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        scene_seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_teacher(cfg: &ExperimentConfig, path: &PathBuf) -> Result<Teacher> {
    let (store, frozen) = ParameterStore::load(path)?;
    Teacher::new(
        store,
        frozen,
        teacher_encoder_spec(cfg),
        cfg.teacher_one_hot.then_some(cfg.num_classes),
    )
}

fn write_metrics_log(path: &Option<PathBuf>, records: &[metrics::MetricsRecord]) -> Result<()> {
    if let Some(p) = path {
        metrics::write_log(p, records)?;
        eprintln!("metrics written to {}", p.display());
    }
    for r in records {
        eprintln!(
            "epoch {}: l_det {:.6} l_total {:.6} ap {:.4} ({:.1}s)",
            r.epoch, r.l_det, r.l_total, r.ap, r.wall_secs
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            std::fs::create_dir_all(&out)?;
            for (stream, prefix, count) in
                [(1u64, "train", cfg.train_scenes), (2u64, "eval", cfg.eval_scenes)]
            {
                for i in 0..count {
                    let sc = cfg.scene_config(scene_seed(cfg.seed, stream, i));
                    let seq = generate_scene(&sc)?;
                    let labels: Vec<Vec<u32>> = seq
                        .frames
                        .iter()
                        .enumerate()
                        .map(|(fi, frame)| {
                            let dt = (seq.preceding - fi) as f64 * seq.frame_interval;
                            inject_at(frame, &seq.gt, dt, TieBreak::FirstByIndex)
                                .map(|inj| inj.labels)
                        })
                        .collect::<Result<_>>()?;
                    save_scene(&seq, Some(&labels), &out.join(format!("{prefix}_{i:04}.txt")))?;
                }
            }
            println!(
                "wrote {} train and {} eval scenes to {}",
                cfg.train_scenes,
                cfg.eval_scenes,
                out.display()
            );
            Ok(0)
        }
        Command::TrainTeacher { config, out, metrics } => {
            let cfg = ExperimentConfig::load(&config)?;
            let (store, records) = train_teacher(&cfg)?;
            store.save(&out, true)?;
            write_metrics_log(&metrics, &records)?;
            println!(
                "teacher frozen at {} (final ap {:.4})",
                out.display(),
                records.last().map_or(0.0, |r| r.ap)
            );
            Ok(0)
        }
        Command::TrainStudent { config, teacher, out, metrics } => {
            let cfg = ExperimentConfig::load(&config)?;
            let teacher = match (&teacher, cfg.use_sup) {
                (Some(p), _) => Some(load_teacher(&cfg, p)?),
                (None, true) => {
                    return Err(Error::Config(
                        "use_sup is set: pass --teacher with a frozen checkpoint".into(),
                    ))
                }
                (None, false) => None,
            };
            let trained = train_student(&cfg, teacher.as_ref())?;
            trained.store.save(&out, false)?;
            write_metrics_log(&metrics, &trained.metrics)?;
            println!(
                "student saved at {} (final ap {:.4})",
                out.display(),
                trained.metrics.last().map_or(0.0, |r| r.ap)
            );
            Ok(0)
        }
        Command::Eval { config, student, dets } => {
            let cfg = ExperimentConfig::load(&config)?;
            let model = StudentModel::new(&cfg)?;
            let (store, _) = ParameterStore::load(&student)?;
            model.check_store(&store)?;
            let scenes = model.eval_scenes()?;
            let ap = evaluate(&model, &store, &scenes)?;
            if let Some(path) = dets {
                let mut all = Vec::new();
                for s in &scenes {
                    all.extend(model.decode_scene(&store, s)?);
                }
                write_detections(&all, &path)?;
                eprintln!("{} detections written to {}", all.len(), path.display());
            }
            println!("ap {ap:.4} over {} eval scenes", cfg.eval_scenes);
            Ok(0)
        }
        Command::Ablate { config, suite, seeds, out, assert } => {
            let cfg = ExperimentConfig::load(&config)?;
            let suite: Suite = suite.parse()?;
            let rows = run_ablation(&cfg, suite, seeds)?;
            let table = format_table(suite, seeds, &rows);
            print!("{table}");
            if let Some(p) = out {
                std::fs::write(&p, &table)?;
                eprintln!("table written to {}", p.display());
            }
            if assert {
                if let Err(msg) = assert_suite(suite, &rows) {
                    eprintln!("acceptance check failed: {msg}");
                    return Ok(4);
                }
                eprintln!("acceptance checks passed");
            }
            Ok(0)
        }
        Command::Gradcheck { seed, tol } => {
            let report = gradcheck_all(seed)?;
            for e in &report.entries {
                println!(
                    "{:<16} max_rel_err {:.3e} ({} coords)",
                    e.name, e.max_rel_err, e.coords_checked
                );
            }
            if report.passes(tol) {
                println!("gradcheck passed (max {:.3e} <= {tol:.1e})", report.max_rel_err());
                Ok(0)
            } else {
                eprintln!("gradcheck failed (max {:.3e} > {tol:.1e})", report.max_rel_err());
                Ok(4)
            }
        }
        Command::ExportAttention { config, student, scene_seed, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let (store, _) = ParameterStore::load(&student)?;
            let model = StudentModel::new(&cfg)?;
            model.check_store(&store)?;
            let att = export_attention(&cfg, &store, scene_seed)?;
            att.dump_to_file(&out)?;
            println!("attention maps {:?} written to {}", att.shape(), out.display());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
