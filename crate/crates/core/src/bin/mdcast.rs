use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mdcast::metrics::aligned_table;
use mdcast::pipeline::{ablation_text, sweep_text, Pipeline, PipelineConfig};
use mdcast::Error;

const COMMON_KEYS: &str = "Top-level keys: seed, out_dir, run_id, data_format (xyz|csv).\n\
Outputs go to <out_dir>/<run_id>/ next to a snapshot of the resolved config.";

/// Physics-guarded forecasting of atomic trajectories.
#[derive(Debug, Parser)]
#[command(name = "mdcast", version, about, after_help = COMMON_KEYS)]
struct Cli {
    /// TOML config file. Built-in defaults are used for missing keys.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Override one config key, e.g. `--set train.lambda=5e-4`. Repeatable; wins over the file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a trajectory and write train/valid/test splits plus a manifest.
    #[command(after_help = concat!(
        "Config keys read:\n",
        "  seed, out_dir, run_id, data_format\n",
        "  simgen.n_atoms, simgen.species_counts, simgen.box_side, simgen.temperature_K,\n",
        "  simgen.n_steps, simgen.dt_fs, simgen.thermostat, simgen.seed, simgen.cutoff,\n",
        "  simgen.masses, simgen.reflective_walls, simgen.train_frac, simgen.valid_frac\n",
        "  morse.params_file, morse.pairs\n",
        "Writes data/{train,valid,test}.<ext> and data/manifest.json."
    ))]
    GenData,

    /// Fit one Morse curve per species pair from `species_i,species_j,d,energy` samples.
    #[command(after_help = concat!(
        "Config keys read:\n",
        "  out_dir, run_id, morse.samples_file (overridden by --samples)\n",
        "Writes morse_fit.csv and morse_fit_report.csv. Exit code 3 if any pair failed."
    ))]
    FitMorse {
        /// Energy sample CSV.
        #[arg(long)]
        samples: Option<PathBuf>,
    },

    /// Compute per-pair energy thresholds on the train and test splits.
    #[command(after_help = concat!(
        "Config keys read:\n",
        "  out_dir, run_id, data_format, morse.params_file, morse.pairs, morse.granularity\n",
        "Writes thresholds_train.csv and thresholds_test.csv."
    ))]
    Thresholds,

    /// Train a forecaster on the train split with validation early stopping.
    #[command(after_help = concat!(
        "Config keys read:\n",
        "  seed, out_dir, run_id, data_format, morse.params_file, morse.pairs, morse.granularity\n",
        "  window.H, window.L, window.stride, window.normalize\n",
        "  train.backbone, train.hidden, train.lambda, train.M, train.B, train.learning_rate,\n",
        "  train.clip_norm, train.max_epochs, train.patience, train.seed, train.physics_steps,\n",
        "  train.plateau_decay\n",
        "Writes checkpoint.json, training_log.csv and thresholds_train.csv."
    ))]
    Train,

    /// Roll a trained model forward autoregressively from real history.
    #[command(after_help = concat!(
        "Config keys read:\n",
        "  seed, out_dir, run_id, data_format, morse.params_file, morse.pairs, morse.granularity\n",
        "  window.H, window.L, rollout.T, rollout.L, rollout.pii, rollout.M, rollout.seed,\n",
        "  rollout.freeze_policy, rollout.seed_from, rollout.start\n",
        "Writes rollout.<ext> and rollout_log.csv."
    ))]
    Rollout {
        /// Checkpoint to load. Defaults to the run's checkpoint.json.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },

    /// Score a predicted trajectory: displacement and position errors plus violations.
    #[command(after_help = concat!(
        "Config keys read:\n",
        "  seed, out_dir, run_id, data_format, morse.params_file, morse.pairs, morse.granularity\n",
        "  window.H, rollout.T, rollout.seed_from, rollout.start\n",
        "  eval.M, eval.seed, eval.threshold_table\n",
        "Writes metrics.csv and metrics.txt."
    ))]
    Evaluate {
        /// Predicted trajectory. Defaults to the run's rollout file.
        #[arg(long)]
        pred: Option<PathBuf>,
        /// Ground-truth trajectory. Defaults to the matching span of the seed segment.
        #[arg(long)]
        truth: Option<PathBuf>,
    },

    /// 2x2 grid over physics-informed training and guarded inference.
    #[command(after_help = concat!(
        "Config keys read:\n",
        "  every key read by train and rollout (except rollout.pii), plus\n",
        "  eval.M, eval.seed, eval.threshold_table, eval.replicates, eval.ablation_lambda\n",
        "Writes ablation.csv (averaged) and ablation_runs.csv (per replicate)."
    ))]
    Ablate,

    /// Train one model per lambda and score its rollout.
    #[command(after_help = concat!(
        "Config keys read:\n",
        "  every key read by train and rollout, plus\n",
        "  eval.lambdas, eval.replicates, eval.M, eval.seed, eval.threshold_table\n",
        "Writes sweep_lambda.csv."
    ))]
    SweepLambda,

    /// Mean squared displacement curves and per-species diffusion coefficients.
    #[command(after_help = concat!(
        "Config keys read:\n",
        "  out_dir, run_id, data_format, eval.fit_start, eval.fit_end, eval.msd_origins\n",
        "Reads the test split unless --trajectory is given.\n",
        "Writes diffusivity.csv and msd_<species>.csv."
    ))]
    Diffusivity {
        /// Trajectory to analyse.
        #[arg(long)]
        trajectory: Option<PathBuf>,
    },
}

enum Outcome {
    Ok,
    Partial,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::SegmentTooShort { .. } => 1,
        _ => 2,
    }
}

fn run(cli: Cli) -> mdcast::Result<Outcome> {
    let cfg = PipelineConfig::load(cli.config.as_deref(), &cli.overrides)?;
    let p = Pipeline::new(cfg)?;
    match cli.command {
        Command::GenData => {
            let (_, m) = p.gen_data()?;
            let rows = vec![
                vec!["train".into(), m.train_frames.to_string(), m.files[0].clone()],
                vec!["valid".into(), m.valid_frames.to_string(), m.files[1].clone()],
                vec!["test".into(), m.test_frames.to_string(), m.files[2].clone()],
            ];
            print!("{}", aligned_table(&["split", "frames", "file"], &rows));
            println!("seed {} dt_fs {}", m.seed, m.dt_fs);
        }
        Command::FitMorse { samples } => {
            let out = p.fit_morse(samples.as_deref())?;
            let rows: Vec<Vec<String>> = out
                .reports
                .iter()
                .map(|(k, r)| {
                    let pair = format!("{}-{}", k.first(), k.second());
                    match (r, out.table.get(k.first(), k.second())) {
                        (Ok(rep), Ok(prm)) => vec![
                            pair,
                            format!("{:.6e}", prm.depth),
                            format!("{:.6e}", prm.steepness),
                            format!("{:.6e}", prm.r_eq),
                            format!("{:.6e}", prm.offset),
                            format!("{:.3e}", rep.rmse),
                            rep.iterations.to_string(),
                            "ok".into(),
                        ],
                        (Err(e), _) => {
                            let mut v = vec![pair];
                            v.extend(std::iter::repeat_n("-".to_string(), 6));
                            v.push(e.to_string());
                            v
                        }
                        (Ok(_), Err(e)) => vec![pair, e.to_string()],
                    }
                })
                .collect();
            print!(
                "{}",
                aligned_table(&["pair", "D_e", "a", "d_e", "b", "rmse", "iter", "status"], &rows)
            );
            if out.partial() {
                eprintln!("error: some pairs failed to fit");
                return Ok(Outcome::Partial);
            }
        }
        Command::Thresholds => {
            let (train, test) = p.thresholds()?;
            let mut rows = Vec::new();
            for (k, tau) in train.species_entries() {
                let t = test
                    .species_entries()
                    .find(|(k2, _)| *k2 == k)
                    .map_or("-".to_string(), |(_, v)| format!("{v:.6e}"));
                rows.push(vec![format!("{}-{}", k.first(), k.second()), format!("{tau:.6e}"), t]);
            }
            print!("{}", aligned_table(&["pair", "tau_train", "tau_test"], &rows));
            let n_atom = train.atom_entries().count();
            if n_atom > 0 {
                println!("{n_atom} atom-level thresholds");
            }
        }
        Command::Train => {
            let (ck, log) = p.train()?;
            let best = log.epochs.iter().find(|e| e.epoch == log.best_epoch);
            let rows = vec![vec![
                format!("{:?}", ck.model.params.arch.backbone),
                ck.lambda.to_string(),
                log.epochs.len().to_string(),
                log.best_epoch.to_string(),
                best.map_or("-".into(), |e| format!("{:.6e}", e.valid.mse)),
                best.map_or("-".into(), |e| format!("{:.6e}", e.valid.phys)),
            ]];
            print!(
                "{}",
                aligned_table(
                    &["backbone", "lambda", "epochs", "best_epoch", "valid_mse", "valid_phys"],
                    &rows
                )
            );
        }
        Command::Rollout { checkpoint } => {
            let (traj, log) = p.rollout(checkpoint.as_deref())?;
            let rows = vec![vec![
                traj.n_frames().to_string(),
                log.steps.len().to_string(),
                log.violated_steps().to_string(),
                log.frozen_steps().to_string(),
            ]];
            print!("{}", aligned_table(&["frames", "steps", "violated", "frozen"], &rows));
        }
        Command::Evaluate { pred, truth } => {
            let report = p.evaluate(pred.as_deref(), truth.as_deref())?;
            print!("{}", report.to_text());
        }
        Command::Ablate => {
            let rows = p.ablate()?;
            print!("{}", ablation_text(&rows));
        }
        Command::SweepLambda => {
            let rows = p.sweep_lambda()?;
            print!("{}", sweep_text(&rows));
        }
        Command::Diffusivity { trajectory } => {
            let reports = p.diffusivity(trajectory.as_deref())?;
            let rows: Vec<Vec<String>> = reports
                .iter()
                .map(|r| {
                    vec![
                        r.species.clone(),
                        r.n_atoms.to_string(),
                        format!("{:.6e}", r.d_a2_per_fs),
                        format!("{:.6e}", r.d_m2_per_s),
                        format!("{:.4}", r.r_squared),
                    ]
                })
                .collect();
            print!(
                "{}",
                aligned_table(&["species", "atoms", "D_A2_per_fs", "D_m2_per_s", "R2"], &rows)
            );
        }
    }
    Ok(Outcome::Ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Partial) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
