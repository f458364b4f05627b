use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use super::{
    evaluate, ppo_gradient_study, shac_gradient_study, ConstantController, Controller, CurveSummary, ModelController,
    RunConfig, StudySetup,
};
use crate::cstr_env::load_prices;
use crate::error::{Error, Result};
use crate::koopman::{generate_dataset, multi_step_rmse, mean_predictor_rmse, seed_sweep, KoopmanModel, TrajectoryDataset};

#[derive(Parser, Debug)]
#[command(name = "shac-koopman", version, about = "Koopman eNMPC training and evaluation for the CSTR case study")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long)]
    run_dir: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StudyChoice {
    Shac,
    Ppo,
    Both,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate the system-identification dataset.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Fit Koopman models by multi-step prediction error, one per seed.
    TrainSi {
        #[command(flatten)]
        common: Common,
        /// Dataset written by gen-data; generated from the config otherwise.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Short-horizon actor-critic training of an SI-pretrained policy.
    TrainShac {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
    },
    /// PPO training of an SI-pretrained policy.
    TrainPpo {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
    },
    /// Closed-loop test on the held-out price series.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Policy checkpoint; pass --nominal instead to apply the steady controls.
        #[arg(long, required_unless_present = "nominal")]
        model: Option<PathBuf>,
        #[arg(long)]
        nominal: bool,
        /// Price CSV overriding the configured test series.
        #[arg(long)]
        prices: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Policy-gradient direction variance of a frozen policy.
    GradStudy {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        algorithm: StudyChoice,
    },
    /// Collect the summaries of other run directories into one report.
    Report {
        #[command(flatten)]
        common: Common,
        /// Run directories to include.
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
    },
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code: 0 on success, 2 for usage or configuration errors,
/// 1 for anything else.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e @ Error::Config { .. }) => {
            eprintln!("error: {e}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn prepare(common: &Common) -> Result<RunConfig> {
    let cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    fs::create_dir_all(&common.run_dir)?;
    fs::write(common.run_dir.join("config.toml"), cfg.to_toml())?;
    Ok(cfg)
}

fn write_summary(dir: &Path, command: &str, body: Value) -> Result<()> {
    let mut v = json!({ "command": command });
    if let (Some(dst), Value::Object(src)) = (v.as_object_mut(), body) {
        dst.extend(src);
    }
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&v)?)?;
    Ok(())
}

fn dataset(cfg: &RunConfig) -> Result<TrajectoryDataset> {
    let plant = cfg.env.plant()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.si.dataset_seed);
    generate_dataset(&cfg.env, &plant, &cfg.si.dataset, &mut rng)
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { common } => {
            let cfg = prepare(&common)?;
            let ds = dataset(&cfg)?;
            ds.save(&common.run_dir.join("dataset.ckpt"))?;
            write_summary(
                &common.run_dir,
                "gen-data",
                json!({
                    "train_trajectories": ds.train.len(),
                    "validation_trajectories": ds.validation.len(),
                    "steps": ds.steps(),
                    "norm": ds.norm,
                }),
            )
        }
        Command::TrainSi { common, dataset: path } => {
            let cfg = prepare(&common)?;
            let ds = match path {
                Some(p) => TrajectoryDataset::load(&p)?,
                None => dataset(&cfg)?,
            };
            let sweep = seed_sweep(&ds, &cfg.si.train, &cfg.si.seeds)?;
            sweep.model.save(&common.run_dir.join("si_model.ckpt"))?;
            fs::write(
                common.run_dir.join("si_reports.json"),
                serde_json::to_string_pretty(&sweep.reports)?,
            )?;
            let h = cfg.si.train.horizon;
            write_summary(
                &common.run_dir,
                "train-si",
                json!({
                    "best_seed": cfg.si.seeds[sweep.best],
                    "best_validation_loss": sweep.reports[sweep.best].best_val,
                    "validation_rmse": multi_step_rmse(&sweep.model, &ds.validation, h),
                    "mean_predictor_rmse": mean_predictor_rmse(&ds.norm, &ds.validation, h),
                    "horizon": h,
                }),
            )
        }
        Command::TrainShac { common, model } => {
            let cfg = prepare(&common)?;
            let run = crate::shac::train(cfg.scenario()?, KoopmanModel::load(&model)?, &cfg.shac, Some(&common.run_dir))?;
            let curve = CurveSummary::from_curve(&run.curve);
            write_summary(
                &common.run_dir,
                "train-shac",
                json!({
                    "updates": run.updates.len(),
                    "best_update": run.best_update,
                    "best_mean_reward": run.updates[run.best_update].mean_reward,
                    "curve": curve,
                }),
            )
        }
        Command::TrainPpo { common, model } => {
            let cfg = prepare(&common)?;
            let run = crate::ppo::train(cfg.scenario()?, KoopmanModel::load(&model)?, &cfg.ppo, Some(&common.run_dir))?;
            let curve = CurveSummary::from_curve(&run.curve);
            write_summary(
                &common.run_dir,
                "train-ppo",
                json!({
                    "updates": run.updates.len(),
                    "best_update": run.best_update,
                    "best_mean_reward": run.updates[run.best_update].mean_reward,
                    "curve": curve,
                }),
            )
        }
        Command::Evaluate {
            common,
            model,
            nominal: _,
            prices,
            steps,
        } => {
            let cfg = prepare(&common)?;
            let spec = cfg.spec()?;
            let prices = match prices {
                Some(p) => load_prices(&p)?,
                None => cfg.prices.test()?,
            };
            let loaded = model.as_deref().map(KoopmanModel::load).transpose()?;
            let mut controller: Box<dyn Controller> = match &loaded {
                Some(m) => Box::new(ModelController {
                    model: m,
                    spec: &spec,
                    label: "koopman-enmpc".into(),
                }),
                None => Box::new(ConstantController(cfg.env.steady_input())),
            };
            let steps = steps.or(cfg.eval.steps);
            let report = evaluate(controller.as_mut(), &cfg.env, spec.horizon(), &prices, steps, cfg.eval.initial)?;
            report.save(&common.run_dir, "eval_report")?;
            info!(
                "cost ratio {:.4}, violating steps {:.2}%",
                report.cost_ratio, report.violation_pct
            );
            write_summary(
                &common.run_dir,
                "evaluate",
                json!({
                    "controller": report.controller,
                    "steps": report.steps,
                    "completed": report.completed,
                    "metrics": report.metrics(),
                    "total_reward": report.total_reward,
                    "aborted": report.aborted,
                }),
            )
        }
        Command::GradStudy {
            common,
            model,
            algorithm,
        } => {
            let cfg = prepare(&common)?;
            let model = KoopmanModel::load(&model)?;
            let setup = StudySetup {
                n_gradients: cfg.grad_study.n_gradients,
                critic_updates: cfg.grad_study.critic_updates,
                fixed_start: false,
            };
            let mut out = serde_json::Map::new();
            if matches!(algorithm, StudyChoice::Shac | StudyChoice::Both) {
                let r = shac_gradient_study(cfg.scenario()?, model.clone(), &cfg.shac, &setup)?;
                fs::write(common.run_dir.join("grad_study_shac.json"), serde_json::to_string_pretty(&r)?)?;
                out.insert("shac".into(), serde_json::to_value(&r.similarity)?);
            }
            if matches!(algorithm, StudyChoice::Ppo | StudyChoice::Both) {
                let ppo = crate::ppo::PpoConfig {
                    rollout: cfg.grad_study.ppo_batch,
                    ..cfg.ppo.clone()
                };
                let r = ppo_gradient_study(cfg.scenario()?, model, &ppo, &setup)?;
                fs::write(common.run_dir.join("grad_study_ppo.json"), serde_json::to_string_pretty(&r)?)?;
                out.insert("ppo".into(), serde_json::to_value(&r.similarity)?);
            }
            write_summary(&common.run_dir, "grad-study", Value::Object(out))
        }
        Command::Report { common, inputs } => {
            prepare(&common)?;
            let mut entries = Vec::new();
            let mut md = String::from("# Run report\n\n");
            for dir in &inputs {
                let text = fs::read_to_string(dir.join("summary.json"))
                    .map_err(|e| Error::Invalid(format!("{}: {e}", dir.join("summary.json").display())))?;
                let summary: Value = serde_json::from_str(&text)?;
                let name = dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
                md.push_str(&format!("## {name}\n\n```json\n{}\n```\n\n", serde_json::to_string_pretty(&summary)?));
                entries.push(json!({ "name": name, "summary": summary }));
            }
            fs::write(common.run_dir.join("report.md"), md)?;
            write_summary(&common.run_dir, "report", json!({ "runs": entries }))
        }
    }
}
