//! Command-line entry point: dataset generation, behavior-model
//! pretraining, training in all three regimes, evaluation, the bandit
//! sampling-mode comparison, λ ablations, and the tabular verification
//! suite. Every failure prints one machine-readable JSON error line on
//! stderr; usage problems exit 2, failed verification exits 1.

use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{RunConfig, TrainConfig};
use crate::critic::Regime;
use crate::dataset::OfflineDataset;
use crate::ebm::train_ebm;
use crate::envs::{
    generate_bandit_dataset, generate_pointmass_dataset, BanditSpec, DatasetQuality, EnvHandle,
    PointMassEnv,
};
use crate::error::{BprError, Result};
use crate::nn::checkpoint;
use crate::oracle;
use crate::policy::{SamplingMode, TanhGaussianPolicy};
use crate::trainer;

#[derive(Parser)]
#[command(name = "bpr", version, about = "Offline RL via behavior preference regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum EnvArg {
    Bandit,
    PmDense,
    PmStitch,
}

#[derive(Clone, Copy, ValueEnum)]
enum QualityArg {
    Expert,
    Medium,
    Mixed,
    Stitch,
}

#[derive(Clone, Copy, ValueEnum)]
enum RegimeArg {
    OffPolicy,
    Onestep,
    Ensemble,
}

impl From<RegimeArg> for Regime {
    fn from(r: RegimeArg) -> Self {
        match r {
            RegimeArg::OffPolicy => Regime::OffPolicy,
            RegimeArg::Onestep => Regime::Onestep,
            RegimeArg::Ensemble => Regime::EnsembleLcb,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    SelfPlay,
    Reference,
}

impl From<ModeArg> for SamplingMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::SelfPlay => SamplingMode::SelfPlay,
            ModeArg::Reference => SamplingMode::Reference,
        }
    }
}

#[derive(Args)]
struct TrainFlags {
    /// Offline dataset produced by gen-data.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Full run configuration (JSON); explicit flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Tradeoff between behavioral consistency and value fitting.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, value_enum)]
    regime: Option<RegimeArg>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    steps: Option<u64>,
    /// Paper-scale widths and step counts.
    #[arg(long)]
    full: bool,
    /// Pretrained behavior-model checkpoint.
    #[arg(long)]
    ebm: Option<PathBuf>,
    /// Continue a crashed run from its last checkpoint.
    #[arg(long)]
    resume: bool,
    /// Train the behavioral-cloning comparator instead.
    #[arg(long)]
    bc: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic offline dataset.
    GenData {
        #[arg(long, value_enum)]
        env: EnvArg,
        #[arg(long, value_enum, default_value = "expert")]
        quality: QualityArg,
        /// Transition count for the bandit.
        #[arg(long, default_value_t = 10_000)]
        n: usize,
        /// Episode count for the point-mass tasks.
        #[arg(long, default_value_t = 200)]
        episodes: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the energy-based behavior model.
    TrainEbm {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        full: bool,
    },
    /// Train a policy on an offline dataset.
    Train(TrainFlags),
    /// Evaluate a finished run's policy.
    Eval {
        /// Run directory containing config.json and checkpoints/.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Bimodal-bandit protocol: pretrain, fit under both sampling modes,
    /// plot the comparison.
    Bandit {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        full: bool,
    },
    /// Sweep λ with a shared seed and emit CSV plus a bar plot.
    AblateLambda {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated λ values.
        #[arg(long, default_value = "0.5,1.0,1.5,2.0")]
        values: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long, value_enum)]
        regime: Option<RegimeArg>,
    },
    /// Run the exact tabular verification suite.
    Verify {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value = "verify_report.json")]
        out: PathBuf,
    },
}

/// Parse and execute; returns the process exit code.
pub fn dispatch<I: IntoIterator<Item = String>>(args: I) -> i32 {
    let mut argv = vec!["bpr".to_string()];
    argv.extend(args);
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "error": e.to_string() }));
            match e {
                BprError::Config(_) | BprError::Dataset(_) | BprError::Io(_) => 2,
                _ => 1,
            }
        }
    }
}

fn require<T>(value: Option<T>, what: &str) -> Result<T> {
    value.ok_or_else(|| BprError::Config(format!("missing required input: {what}")))
}

/// Desk preset matched to a dataset's environment tag.
fn preset_for_tag(tag: &str, seed: u64, regime: Regime) -> TrainConfig {
    match tag {
        "bandit" => TrainConfig::bandit_desk(seed),
        "pm-stitch" => TrainConfig::pointmass_stitch_desk(seed, regime),
        _ => TrainConfig::pointmass_dense_desk(seed),
    }
}

fn run(cmd: Command) -> Result<i32> {
    match cmd {
        Command::GenData { env, quality, n, episodes, seed, out } => {
            let mut rng = trainer::derive_rng(seed, "gen-data");
            let ds = match env {
                EnvArg::Bandit => generate_bandit_dataset(&BanditSpec::default(), n, &mut rng)?,
                EnvArg::PmDense => {
                    let q = match quality {
                        QualityArg::Expert => DatasetQuality::Expert,
                        QualityArg::Medium => DatasetQuality::Medium,
                        QualityArg::Mixed => DatasetQuality::Mixed,
                        QualityArg::Stitch => {
                            return Err(BprError::Config(
                                "stitch data belongs to the pm-stitch environment".into(),
                            ))
                        }
                    };
                    generate_pointmass_dataset(&PointMassEnv::dense(), q, episodes, &mut rng)?
                }
                EnvArg::PmStitch => generate_pointmass_dataset(
                    &PointMassEnv::sparse_stitch(),
                    DatasetQuality::Stitch,
                    episodes,
                    &mut rng,
                )?,
            };
            if let Some(parent) = out.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent)?;
                }
            }
            ds.save(&out)?;
            println!(
                "{}",
                serde_json::json!({
                    "dataset": out,
                    "env": ds.env_tag,
                    "transitions": ds.len(),
                })
            );
            Ok(0)
        }

        Command::TrainEbm { data, out, seed, steps, full } => {
            let data = require(data, "--data DATASET")?;
            let out = out.unwrap_or_else(|| PathBuf::from("ebm_out"));
            let seed = seed.unwrap_or(1);
            let ds = OfflineDataset::load(&data)?;
            let mut base = if full {
                TrainConfig::full_fidelity()
            } else {
                preset_for_tag(&ds.env_tag, seed, Regime::OffPolicy)
            };
            base.seed = seed;
            if let Some(s) = steps {
                base.ebm_steps = s;
            }
            let mut prepared = ds.clone();
            if prepared.len() >= 2 {
                prepared.normalize_states()?;
            }
            std::fs::create_dir_all(&out)?;
            let mut rng = trainer::derive_rng(seed, "ebm");
            let (model, trace) = train_ebm(&prepared, &base.ebm_config(), &mut rng)?;
            let ckpt = out.join("ebm.bprw");
            checkpoint::save(&model.net, "ebm", &ckpt)?;
            let mut csv = String::from("step,loss\n");
            for (s, l) in &trace.losses {
                csv.push_str(&format!("{s},{l}\n"));
            }
            std::fs::write(out.join("ebm_loss.csv"), csv)?;
            println!(
                "{}",
                serde_json::json!({
                    "checkpoint": ckpt,
                    "steps": base.ebm_steps,
                    "final_loss": trace.losses.last().map(|x| x.1),
                })
            );
            Ok(0)
        }

        Command::Train(flags) => {
            let mut cfg = match &flags.config {
                Some(path) => RunConfig::load_json(path)?,
                None => {
                    let data = require(flags.data.clone(), "--data DATASET (or --config)")?;
                    let ds_probe = OfflineDataset::load(&data)?;
                    let seed = flags.seed.unwrap_or(1);
                    let regime = flags.regime.map(Regime::from).unwrap_or(Regime::OffPolicy);
                    let train = if flags.full {
                        let mut t = TrainConfig::full_fidelity();
                        let preset = preset_for_tag(&ds_probe.env_tag, seed, regime);
                        t.gamma = preset.gamma;
                        t.reward_scale = preset.reward_scale;
                        t.eval_episodes = preset.eval_episodes;
                        t
                    } else {
                        preset_for_tag(&ds_probe.env_tag, seed, regime)
                    };
                    RunConfig {
                        env: ds_probe.env_tag.clone(),
                        dataset: data,
                        out_dir: PathBuf::from("runs/latest"),
                        full_fidelity: flags.full,
                        ebm_checkpoint: None,
                        train,
                        state_mean: vec![],
                        state_std: vec![],
                    }
                }
            };
            if let Some(seed) = flags.seed {
                cfg.train.seed = seed;
            }
            if let Some(lambda) = flags.lambda {
                cfg.train.lambda = lambda;
            }
            if let Some(regime) = flags.regime {
                cfg.train.regime = regime.into();
            }
            if let Some(mode) = flags.mode {
                cfg.train.mode = mode.into();
            }
            if let Some(steps) = flags.steps {
                cfg.train.steps = steps;
            }
            if let Some(out) = flags.out {
                cfg.out_dir = out;
            }
            if let Some(ebm) = flags.ebm {
                cfg.ebm_checkpoint = Some(ebm);
            }
            let ds = OfflineDataset::load(&cfg.dataset)?;
            let artifacts = if flags.bc {
                trainer::train_bc(&cfg, &ds)?
            } else if flags.resume {
                trainer::train_bpr_resumable(&cfg, &ds, true)?
            } else {
                trainer::train(&cfg, &ds)?
            };
            println!(
                "{}",
                serde_json::json!({
                    "out_dir": artifacts.out_dir,
                    "eval_mean": artifacts.final_eval.0,
                    "eval_std": artifacts.final_eval.1,
                    "policy_updates": artifacts.policy_updates,
                    "wall_clock_s": artifacts.wall_clock.as_secs_f64(),
                })
            );
            Ok(0)
        }

        Command::Eval { run, episodes, seed } => {
            let cfg = RunConfig::load_json(&run.join("config.json"))?;
            let (net, role) = checkpoint::load(&run.join("checkpoints/policy.bprw"))?;
            if role != "policy" {
                return Err(BprError::Config(format!("expected a policy checkpoint, found '{role}'")));
            }
            let env = EnvHandle::from_tag(&cfg.env)?;
            let policy = TanhGaussianPolicy::from_net(net, env.state_dim(), env.action_dim())?;
            let episodes = episodes.unwrap_or(cfg.train.eval_episodes);
            let mut rng = trainer::derive_rng(seed, "eval-cli");
            let (mean, std) = trainer::evaluate(
                &policy,
                &env,
                (&cfg.state_mean, &cfg.state_std),
                episodes,
                &mut rng,
            )?;
            println!(
                "{}",
                serde_json::json!({ "episodes": episodes, "mean": mean, "std": std })
            );
            Ok(0)
        }

        Command::Bandit { seed, out, steps, full } => {
            let out = out.unwrap_or_else(|| PathBuf::from(format!("runs/bandit_seed{seed}")));
            let mut base = if full {
                let mut t = TrainConfig::full_fidelity();
                t.seed = seed;
                t
            } else {
                TrainConfig::bandit_desk(seed)
            };
            if let Some(s) = steps {
                base.steps = s;
            }
            let outcome = trainer::bandit_protocol(&out, &base)?;
            println!(
                "self-play policy mean: {:.4}; reference policy mean: {:.4}",
                outcome.self_play_mean, outcome.reference_mean
            );
            println!("{}", serde_json::to_string(&outcome)?);
            Ok(0)
        }

        Command::AblateLambda { data, out, values, seed, steps, regime } => {
            let data = require(data, "--data DATASET")?;
            let out = out.unwrap_or_else(|| PathBuf::from("runs/lambda_sweep"));
            let seed = seed.unwrap_or(1);
            let parsed: Result<Vec<f64>> = values
                .split(',')
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|e| BprError::Config(format!("bad lambda '{v}': {e}")))
                })
                .collect();
            let values = parsed?;
            let ds = OfflineDataset::load(&data)?;
            let regime = regime.map(Regime::from).unwrap_or(Regime::OffPolicy);
            let mut train = preset_for_tag(&ds.env_tag, seed, regime);
            if let Some(s) = steps {
                train.steps = s;
            }
            let cfg = RunConfig {
                env: ds.env_tag.clone(),
                dataset: data,
                out_dir: out.clone(),
                full_fidelity: false,
                ebm_checkpoint: None,
                train,
                state_mean: vec![],
                state_std: vec![],
            };
            let arms = trainer::ablate_lambda(&cfg, &values, &ds)?;
            for arm in &arms {
                println!("{}", serde_json::to_string(arm)?);
            }
            println!(
                "{}",
                serde_json::json!({
                    "csv": out.join("lambda_sweep.csv"),
                    "svg": out.join("lambda_sweep.svg"),
                })
            );
            Ok(0)
        }

        Command::Verify { instances, seed, out } => {
            let reports = oracle::run_suite(instances, seed);
            let json = serde_json::to_string_pretty(&reports)?;
            if let Some(parent) = out.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent)?;
                }
            }
            std::fs::write(&out, &json)?;
            let mut all_pass = true;
            for r in &reports {
                println!(
                    "{} {}: {} instances, {} violations, worst slack {:e}",
                    if r.passed() { "PASS" } else { "FAIL" },
                    r.check,
                    r.instances,
                    r.violations,
                    r.worst_slack
                );
                all_pass &= r.passed();
            }
            println!("report: {}", out.display());
            Ok(if all_pass { 0 } else { 1 })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(s: &str) -> Vec<String> {
        s.split_whitespace().map(|x| x.to_string()).collect()
    }

    #[test]
    fn unknown_flag_exits_two() {
        assert_eq!(dispatch(args("train --mystery")), 2);
    }

    #[test]
    fn missing_dataset_is_a_usage_error() {
        assert_eq!(dispatch(args("train --lambda 1.0")), 2);
    }

    #[test]
    fn help_exits_zero() {
        assert_eq!(dispatch(args("--help")), 0);
    }

    #[test]
    fn verify_writes_report_and_passes() {
        let dir = tempfile::tempdir().unwrap();
        let report = dir.path().join("report.json");
        let code = dispatch(args(&format!(
            "verify --instances 10 --seed 7 --out {}",
            report.display()
        )));
        assert_eq!(code, 0);
        let text = std::fs::read_to_string(&report).unwrap();
        let parsed: Vec<serde_json::Value> = serde_json::from_str(&text).unwrap();
        assert!(parsed.iter().any(|c| c["check"] == "pdl_identity"));
        for c in &parsed {
            assert!(c.get("instances").is_some());
            assert!(c.get("violations").is_some());
            assert!(c.get("worst_slack").is_some());
        }
    }
}
