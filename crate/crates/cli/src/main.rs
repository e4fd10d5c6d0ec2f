use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mixsig::codesign::{self, DataSource, RunConfig};
use mixsig::error::{Error, Result};
use mixsig::hwcost::{self, CostLut};
use mixsig::mlp::Checkpoint;
use mixsig::{adc, analog, rng, signal};

#[derive(Parser)]
#[command(name = "mixsig", version, about = "Feature-to-classifier co-design for mixed-signal wearables")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Run configuration (TOML). Built-in defaults when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.epochs=20`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        match &self.config {
            Some(p) => RunConfig::load(p, &self.overrides),
            None => RunConfig::from_toml_with_overrides("", &self.overrides),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset as CSV.
    SynthData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Train the gated classifier of one fold and save it with its history.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Threshold sweep with the configured lambda (no tuning).
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Run the extractor bank and converter on one fold's test windows.
    Simulate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Cost a saved design.
    Cost {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Cost table (TOML); placeholder table when omitted.
        #[arg(long)]
        lut: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Random search over lambda and the final temperature.
    Tune {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Summarize a run directory (all candidates) or a points JSON file.
    Report {
        input: PathBuf,
    },
    /// Full pipeline: tune, sweep, prune, evaluate, export.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.category().exit_code() as u8)
        }
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn prepare(cfg: &RunConfig) -> Result<(Vec<codesign::FoldData>, CostLut)> {
    let lut = cfg.lut()?;
    let data = codesign::load_dataset(cfg)?;
    Ok((codesign::prepare_folds(cfg, &data, &lut)?, lut))
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::SynthData { cfg, out } => {
            let cfg = cfg.load()?;
            let spec = match &cfg.data {
                DataSource::Synthetic(s) => s.clone(),
                DataSource::Csv { .. } => {
                    return Err(Error::Usage("synth-data needs a synthetic data source".into()))
                }
            };
            let ds = signal::generate_synthetic(&spec, rng::derive_seed(cfg.seed, 1))?;
            let f = fs::File::create(&out).map_err(|e| Error::io(&out, e))?;
            signal::write_csv(&ds, f)?;
            println!("wrote {} subjects to {}", ds.subjects().len(), out.display());
        }
        Command::Train { cfg, fold, out } => {
            let cfg = cfg.load()?;
            let (folds, _) = prepare(&cfg)?;
            let data = folds
                .get(fold)
                .ok_or_else(|| Error::Usage(format!("fold {fold} does not exist ({} folds)", folds.len())))?;
            let t = codesign::train_fold(
                &cfg,
                data,
                cfg.gates.lambda,
                &cfg.gamma,
                cfg.train.epochs,
                rng::derive_seed(cfg.seed, 300 + fold as u64),
            )?;
            ensure_dir(&out)?;
            Checkpoint::new(data.candidates.clone(), t.model, t.layer.clone(), None).save(out.join("model.json"))?;
            write_json(&out.join("history.json"), &t.history)?;
            for (id, z) in data.candidates.iter().zip(t.layer.deterministic_gates()) {
                println!("{id:>10}  gate {z:.4}");
            }
        }
        Command::Sweep { cfg, out } => {
            let mut cfg = cfg.load()?;
            cfg.search.trials = 0;
            let dir = out.unwrap_or_else(|| cfg.output_dir.clone());
            let run = codesign::run_pipeline(&cfg)?;
            codesign::write_run(&run, &dir)?;
            print!("{}", codesign::report(&run.points()));
        }
        Command::Simulate { cfg, out } => {
            let cfg = cfg.load()?;
            let (folds, _) = prepare(&cfg)?;
            let data = &folds[0];
            ensure_dir(&out)?;
            let nmse = codesign::analog_fidelity(data, &cfg.analog)?;
            write_json(&out.join("analog_nmse.json"), &nmse)?;
            if let Some(w) = data.test_windows.first() {
                let bank = analog::run_extractor_bank(w, &data.candidates, &cfg.analog)?;
                let conv = adc::convert_bank(&bank, &cfg.adc);
                let path = out.join("sar_traces.csv");
                let f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
                adc::write_traces(&conv.traces, f).map_err(|e| Error::io(&path, e))?;
            }
            for n in &nmse {
                println!("{:>10}  nmse {:.3e}", n.feature, n.nmse);
            }
        }
        Command::Cost { checkpoint, lut, cfg } => {
            let cfg = cfg.load()?;
            let lut = match lut {
                Some(p) => CostLut::load(p)?,
                None => cfg.lut()?,
            };
            let ck = Checkpoint::load(&checkpoint)?;
            let q = ck
                .quantized
                .as_ref()
                .ok_or_else(|| Error::Usage("checkpoint has no quantized model".into()))?;
            let keep = ck
                .gates
                .frozen_mask
                .as_ref()
                .ok_or_else(|| Error::Usage("checkpoint gates are not frozen".into()))?;
            let selection: Vec<_> = ck
                .candidates
                .iter()
                .zip(keep)
                .filter(|(_, &k)| k)
                .map(|(&id, _)| id)
                .collect();
            let report = hwcost::system_cost(&selection, q, &cfg.adc, &lut, cfg.window_s)?;
            let rt = hwcost::realtime_check(&report, lut.timing.budget_ms, cfg.window_s);
            let out = serde_json::json!({ "cost": report, "realtime": rt });
            println!("{}", serde_json::to_string_pretty(&out).map_err(|e| Error::Format(e.to_string()))?);
        }
        Command::Tune { cfg, trials } => {
            let cfg = cfg.load()?;
            let (folds, _) = prepare(&cfg)?;
            let n = trials.unwrap_or(cfg.search.trials.max(1));
            let res = codesign::tune_hyperparams(&cfg, &folds[0], n, rng::derive_seed(cfg.seed, 400))?;
            println!("{}", serde_json::to_string_pretty(&res).map_err(|e| Error::Format(e.to_string()))?);
        }
        Command::Report { input } => {
            let path = if input.is_dir() {
                let all = input.join("candidates.json");
                if all.exists() {
                    all
                } else {
                    input.join("pareto.json")
                }
            } else {
                input
            };
            let points = codesign::read_points_json(&path)?;
            print!("{}", codesign::report(&points));
        }
        Command::Run { cfg, out } => {
            let cfg = cfg.load()?;
            let dir = out.unwrap_or_else(|| cfg.output_dir.clone());
            let run = codesign::run_pipeline(&cfg)?;
            codesign::write_run(&run, &dir)?;
            if let Some(t) = &run.tuning {
                println!("tuned lambda {:.3e}, gamma_end {:.3}", t.best.lambda, t.best.gamma_end);
            }
            print!("{}", codesign::report(&run.points()));
            println!("wrote {}", dir.display());
        }
    }
    Ok(())
}
