//! Training pipelines: interleaved off-policy runs, two-phase on-policy
//! runs, a behavioral-cloning comparator, evaluation rollouts, the
//! bandit sampling-mode comparison, and the λ-ablation sweep.
//!
//! One step of the interleaved loop is: sample a batch, compute the
//! regime's bootstrap targets, regress the critics, soft-update their
//! targets, then apply one paired-regression policy update on the same
//! batch. Energies and values reach the policy as constants.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, TrainConfig};
use crate::critic::{CriticSet, CriticTargets, Regime};
use crate::dataset::OfflineDataset;
use crate::ebm::{train_ebm, EnergyModel};
use crate::envs::{generate_bandit_dataset, BanditSpec, EnvHandle};
use crate::error::{BprError, Result};
use crate::nn::checkpoint;
use crate::nn::optim::AdamW;
use crate::plot::{emit_bar_plot, emit_line_plot, Series};
use crate::policy::{bc_step, policy_step, SamplingMode, TanhGaussianPolicy};

/// Deterministic per-purpose RNG stream derived from the run seed.
pub fn derive_rng(seed: u64, stream: &str) -> ChaCha8Rng {
    // FNV-1a over the stream label picks the ChaCha stream index.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stream.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(h);
    rng
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: u64,
    pub critic_loss: Option<f64>,
    pub policy_loss: Option<f64>,
    pub eval_mean: Option<f64>,
    pub eval_std: Option<f64>,
}

impl MetricRow {
    pub fn csv_line(&self) -> String {
        let field = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{}",
            self.step,
            field(self.critic_loss),
            field(self.policy_loss),
            field(self.eval_mean),
            field(self.eval_std)
        )
    }
}

pub const METRICS_HEADER: &str = "step,critic_loss,policy_loss,eval_mean,eval_std";

/// Everything a finished run leaves behind, plus the live components for
/// callers that keep composing (plots, protocol comparisons, tests).
pub struct RunArtifacts {
    pub config: RunConfig,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub metrics: Vec<MetricRow>,
    pub wall_clock: Duration,
    pub final_eval: (f64, f64),
    pub policy: TanhGaussianPolicy,
    pub ebm: Option<EnergyModel>,
    pub critics: Option<CriticSet>,
    /// Optimizer steps applied to the policy.
    pub policy_updates: u64,
}

/// Resume marker written next to the checkpoints.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Progress {
    completed_steps: u64,
    phase: String,
}

struct RunDir {
    out: PathBuf,
    metrics_path: PathBuf,
    rows: Vec<MetricRow>,
}

impl RunDir {
    fn create(cfg: &RunConfig, resume: bool) -> Result<Self> {
        std::fs::create_dir_all(cfg.out_dir.join("checkpoints"))?;
        std::fs::create_dir_all(cfg.out_dir.join("plots"))?;
        // config.json is written before anything else happens
        cfg.save_json(&cfg.out_dir.join("config.json"))?;
        let metrics_path = cfg.out_dir.join("metrics.csv");
        let rows = if resume && metrics_path.exists() {
            read_metric_rows(&metrics_path)?
        } else {
            std::fs::write(&metrics_path, format!("{METRICS_HEADER}\n"))?;
            Vec::new()
        };
        Ok(RunDir {
            out: cfg.out_dir.clone(),
            metrics_path,
            rows,
        })
    }

    fn append(&mut self, row: MetricRow) -> Result<()> {
        use std::io::Write;
        let mut f = std::fs::OpenOptions::new().append(true).open(&self.metrics_path)?;
        writeln!(f, "{}", row.csv_line())?;
        self.rows.push(row);
        Ok(())
    }

    fn save_progress(&self, completed_steps: u64, phase: &str) -> Result<()> {
        let text = serde_json::to_string_pretty(&Progress {
            completed_steps,
            phase: phase.to_string(),
        })?;
        std::fs::write(self.out.join("state.json"), text)?;
        Ok(())
    }

    fn load_progress(&self) -> Option<Progress> {
        let text = std::fs::read_to_string(self.out.join("state.json")).ok()?;
        serde_json::from_str(&text).ok()
    }

    fn ckpt(&self, name: &str) -> PathBuf {
        self.out.join("checkpoints").join(name)
    }
}

fn read_metric_rows(path: &Path) -> Result<Vec<MetricRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for line in text.lines().skip(1) {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 5 {
            continue;
        }
        let opt = |s: &str| -> Option<f64> { if s.is_empty() { None } else { s.parse().ok() } };
        rows.push(MetricRow {
            step: parts[0].parse().unwrap_or(0),
            critic_loss: opt(parts[1]),
            policy_loss: opt(parts[2]),
            eval_mean: opt(parts[3]),
            eval_std: opt(parts[4]),
        });
    }
    Ok(rows)
}

/// Prepare a training copy of the dataset: apply the configured reward
/// scale once and standardize states (raw datasets carry identity stats).
fn prepare_dataset(cfg: &TrainConfig, ds: &OfflineDataset) -> Result<OfflineDataset> {
    let mut ds = ds.clone();
    if cfg.reward_scale != 1.0 {
        if ds.reward_scale == 1.0 {
            ds.scale_rewards(cfg.reward_scale)?;
        } else if ds.reward_scale != cfg.reward_scale {
            return Err(BprError::Config(format!(
                "dataset rewards already scaled by {} but config wants {}",
                ds.reward_scale, cfg.reward_scale
            )));
        }
    }
    let is_identity = ds.state_mean.iter().all(|&m| m == 0.0) && ds.state_std.iter().all(|&s| s == 1.0);
    if is_identity && ds.len() >= 2 {
        ds.normalize_states()?;
    }
    Ok(ds)
}

fn obtain_ebm(
    cfg: &RunConfig,
    ds: &OfflineDataset,
    run: &RunDir,
    rng: &mut ChaCha8Rng,
) -> Result<EnergyModel> {
    if let Some(path) = &cfg.ebm_checkpoint {
        let (net, role) = checkpoint::load(path)?;
        if role != "ebm" {
            return Err(BprError::Config(format!(
                "checkpoint {} has role '{role}', expected 'ebm'",
                path.display()
            )));
        }
        let mut model = EnergyModel::new(ds.state_dim, ds.action_dim, &[1], &mut rng.clone());
        model.net = net;
        model.trained = true;
        return Ok(model);
    }
    let (model, _trace) = train_ebm(ds, &cfg.train.ebm_config(), rng)?;
    checkpoint::save(&model.net, "ebm", &run.ckpt("ebm.bprw"))?;
    Ok(model)
}

/// Deterministic-action rollouts; returns (mean return, std over
/// episodes). Observations are mapped through the dataset normalization
/// before the policy sees them.
pub fn evaluate(
    policy: &TanhGaussianPolicy,
    env: &EnvHandle,
    stats: (&[f32], &[f32]),
    episodes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64)> {
    let normalize = |raw: &[f64]| -> Vec<f64> {
        raw.iter()
            .enumerate()
            .map(|(j, &v)| (v - stats.0[j] as f64) / stats.1[j] as f64)
            .collect()
    };
    let mut returns = Vec::with_capacity(episodes);
    match env {
        EnvHandle::Bandit(spec) => {
            for _ in 0..episodes {
                let s = normalize(&[0.0]);
                let a = policy.deterministic_action(&s)?;
                returns.push(spec.reward(a[0].clamp(-1.0, 1.0))?);
            }
        }
        EnvHandle::PointMass(env) => {
            for _ in 0..episodes {
                let mut state = env.reset(rng);
                let mut ret = 0.0;
                for _ in 0..env.horizon {
                    let s = normalize(&state.to_vec());
                    let a = policy.deterministic_action(&s)?;
                    let (next, reward, done) = env.step(state, [a[0], a[1]]);
                    ret += reward;
                    state = next;
                    if done {
                        break;
                    }
                }
                returns.push(ret);
            }
        }
    }
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

fn save_components(
    run: &RunDir,
    policy: &TanhGaussianPolicy,
    critics: Option<&CriticSet>,
) -> Result<()> {
    checkpoint::save(&policy.net, "policy", &run.ckpt("policy.bprw"))?;
    if let Some(cs) = critics {
        for (i, m) in cs.members.iter().enumerate() {
            checkpoint::save(m, &format!("critic[{i}]"), &run.ckpt(&format!("critic{i}.bprw")))?;
        }
    }
    Ok(())
}

/// Interleaved off-policy training per the paired-regression recipe.
pub fn train_bpr(cfg: &RunConfig, ds: &OfflineDataset) -> Result<RunArtifacts> {
    train_bpr_resumable(cfg, ds, false)
}

pub fn train_bpr_resumable(cfg: &RunConfig, ds: &OfflineDataset, resume: bool) -> Result<RunArtifacts> {
    if cfg.train.regime != Regime::OffPolicy {
        return Err(BprError::Config(
            "interleaved training is the off-policy pipeline; use the on-policy pipeline for \
             onestep and ensemble regimes"
                .into(),
        ));
    }
    cfg.train.validate()?;
    let started = Instant::now();
    let t = &cfg.train;
    let ds = prepare_dataset(t, ds)?;
    let mut cfg = cfg.clone();
    cfg.state_mean = ds.state_mean.clone();
    cfg.state_std = ds.state_std.clone();
    let mut run = RunDir::create(&cfg, resume)?;
    let env = EnvHandle::from_tag(&cfg.env)?;

    let mut rng = derive_rng(t.seed, "train");
    let ebm = obtain_ebm(&cfg, &ds, &run, &mut derive_rng(t.seed, "ebm"))?;

    let mut policy = TanhGaussianPolicy::new(ds.state_dim, ds.action_dim, &t.policy_hidden, &mut rng);
    let mut critics = CriticSet::new(
        ds.state_dim,
        ds.action_dim,
        &t.critic_hidden,
        Regime::OffPolicy,
        t.critic_hyper(),
        t.critic_lr,
        t.weight_decay,
        &mut rng,
    );
    let mut policy_opt = AdamW::new(t.policy_lr, t.weight_decay, &policy.net.param_shapes());

    let mut start_step = 0;
    if resume {
        if let Some(p) = run.load_progress() {
            if p.phase == "interleaved" && p.completed_steps > 0 {
                start_step = p.completed_steps;
                let (net, _) = checkpoint::load(&run.ckpt("policy.bprw"))?;
                policy = TanhGaussianPolicy::from_net(net, ds.state_dim, ds.action_dim)?;
                for i in 0..critics.members.len() {
                    let (net, _) = checkpoint::load(&run.ckpt(&format!("critic{i}.bprw")))?;
                    critics.members[i] = net.clone();
                    critics.targets[i] = net;
                }
                rng = derive_rng(t.seed, &format!("train-resume-{start_step}"));
            }
        }
    }

    let mut critic_acc = 0.0;
    let mut policy_acc = 0.0;
    let mut acc_n = 0u64;
    for step in start_step..t.steps {
        let batch = ds.sample_batch(t.batch_size, &mut rng)?;
        let targets = critics
            .soft_bellman_target(&batch, &policy, &mut rng)
            .map_err(|e| BprError::TrainingAborted { step, message: e.to_string() })?;
        let losses = critics
            .critic_update(&batch, &CriticTargets::Shared(targets))
            .map_err(|e| BprError::TrainingAborted { step, message: e.to_string() })?;
        critics.target_soft_update();
        let ploss = policy_step(
            t.lambda,
            t.mode,
            &mut policy,
            &mut policy_opt,
            &ebm,
            &critics,
            &batch.states,
            Some(&batch.actions),
            &mut rng,
        )
        .map_err(|e| BprError::TrainingAborted { step, message: e.to_string() })?;

        critic_acc += losses.iter().sum::<f64>() / losses.len() as f64;
        policy_acc += ploss;
        acc_n += 1;

        if (step + 1) % t.eval_interval == 0 || step + 1 == t.steps {
            let mut eval_rng = derive_rng(t.seed, &format!("eval-{}", step + 1));
            let (mean, std) = evaluate(
                &policy,
                &env,
                (&cfg.state_mean, &cfg.state_std),
                t.eval_episodes,
                &mut eval_rng,
            )?;
            run.append(MetricRow {
                step: step + 1,
                critic_loss: Some(critic_acc / acc_n as f64),
                policy_loss: Some(policy_acc / acc_n as f64),
                eval_mean: Some(mean),
                eval_std: Some(std),
            })?;
            critic_acc = 0.0;
            policy_acc = 0.0;
            acc_n = 0;
            save_components(&run, &policy, Some(&critics))?;
            run.save_progress(step + 1, "interleaved")?;
        }
    }

    finish(cfg, run, started, policy, Some(ebm), Some(critics), policy_opt.step_count())
}

/// Two-phase on-policy training: fit the value function to the logged
/// next actions first, then regress the policy against the frozen
/// values. The learned policy is never queried in phase one.
pub fn train_onestep(cfg: &RunConfig, ds: &OfflineDataset) -> Result<RunArtifacts> {
    if !matches!(cfg.train.regime, Regime::Onestep | Regime::EnsembleLcb) {
        return Err(BprError::Config(
            "two-phase training covers the onestep and ensemble regimes".into(),
        ));
    }
    cfg.train.validate()?;
    let started = Instant::now();
    let t = &cfg.train;
    let ds = prepare_dataset(t, ds)?;
    let mut cfg = cfg.clone();
    cfg.state_mean = ds.state_mean.clone();
    cfg.state_std = ds.state_std.clone();
    let mut run = RunDir::create(&cfg, false)?;
    let env = EnvHandle::from_tag(&cfg.env)?;

    let mut rng = derive_rng(t.seed, "train");
    let ebm = obtain_ebm(&cfg, &ds, &run, &mut derive_rng(t.seed, "ebm"))?;

    let mut policy = TanhGaussianPolicy::new(ds.state_dim, ds.action_dim, &t.policy_hidden, &mut rng);
    let mut critics = CriticSet::new(
        ds.state_dim,
        ds.action_dim,
        &t.critic_hidden,
        t.regime,
        t.critic_hyper(),
        t.critic_lr,
        t.weight_decay,
        &mut rng,
    );
    let mut policy_opt = AdamW::new(t.policy_lr, t.weight_decay, &policy.net.param_shapes());

    // Phase 1: on-policy value fitting from stored next actions only.
    let mut critic_acc = 0.0;
    let mut acc_n = 0u64;
    for step in 0..t.critic_steps {
        let batch = ds.sample_batch(t.batch_size, &mut rng)?;
        let targets = match t.regime {
            Regime::Onestep => CriticTargets::Shared(critics.sarsa_target(&batch)?),
            Regime::EnsembleLcb => CriticTargets::PerMember(critics.ensemble_sarsa_targets(&batch)?),
            Regime::OffPolicy => unreachable!(),
        };
        let losses = critics
            .critic_update(&batch, &targets)
            .map_err(|e| BprError::TrainingAborted { step, message: e.to_string() })?;
        critics.target_soft_update();
        critic_acc += losses.iter().sum::<f64>() / losses.len() as f64;
        acc_n += 1;
        if (step + 1) % t.eval_interval == 0 || step + 1 == t.critic_steps {
            run.append(MetricRow {
                step: step + 1,
                critic_loss: Some(critic_acc / acc_n as f64),
                policy_loss: None,
                eval_mean: None,
                eval_std: None,
            })?;
            critic_acc = 0.0;
            acc_n = 0;
        }
    }
    debug_assert_eq!(policy.sample_count(), 0, "phase 1 must not query the policy");

    // Phase 2: policy regression against the frozen critics.
    let mut policy_acc = 0.0;
    let mut acc_n = 0u64;
    for step in 0..t.steps {
        let batch = ds.sample_batch(t.batch_size, &mut rng)?;
        let ploss = policy_step(
            t.lambda,
            t.mode,
            &mut policy,
            &mut policy_opt,
            &ebm,
            &critics,
            &batch.states,
            Some(&batch.actions),
            &mut rng,
        )
        .map_err(|e| BprError::TrainingAborted { step, message: e.to_string() })?;
        policy_acc += ploss;
        acc_n += 1;
        if (step + 1) % t.eval_interval == 0 || step + 1 == t.steps {
            let mut eval_rng = derive_rng(t.seed, &format!("eval-{}", step + 1));
            let (mean, std) = evaluate(
                &policy,
                &env,
                (&cfg.state_mean, &cfg.state_std),
                t.eval_episodes,
                &mut eval_rng,
            )?;
            run.append(MetricRow {
                step: t.critic_steps + step + 1,
                critic_loss: None,
                policy_loss: Some(policy_acc / acc_n as f64),
                eval_mean: Some(mean),
                eval_std: Some(std),
            })?;
            policy_acc = 0.0;
            acc_n = 0;
            save_components(&run, &policy, Some(&critics))?;
            run.save_progress(step + 1, "policy-phase")?;
        }
    }

    finish(cfg, run, started, policy, Some(ebm), Some(critics), policy_opt.step_count())
}

/// Behavioral cloning with the same policy class and budget.
pub fn train_bc(cfg: &RunConfig, ds: &OfflineDataset) -> Result<RunArtifacts> {
    cfg.train.validate()?;
    let started = Instant::now();
    let t = &cfg.train;
    let ds = prepare_dataset(t, ds)?;
    let mut cfg = cfg.clone();
    cfg.state_mean = ds.state_mean.clone();
    cfg.state_std = ds.state_std.clone();
    let mut run = RunDir::create(&cfg, false)?;
    let env = EnvHandle::from_tag(&cfg.env)?;

    let mut rng = derive_rng(t.seed, "train");
    let mut policy = TanhGaussianPolicy::new(ds.state_dim, ds.action_dim, &t.policy_hidden, &mut rng);
    let mut policy_opt = AdamW::new(t.policy_lr, t.weight_decay, &policy.net.param_shapes());

    let mut policy_acc = 0.0;
    let mut acc_n = 0u64;
    for step in 0..t.steps {
        let batch = ds.sample_batch(t.batch_size, &mut rng)?;
        let loss = bc_step(&mut policy, &mut policy_opt, &batch.states, &batch.actions)
            .map_err(|e| BprError::TrainingAborted { step, message: e.to_string() })?;
        policy_acc += loss;
        acc_n += 1;
        if (step + 1) % t.eval_interval == 0 || step + 1 == t.steps {
            let mut eval_rng = derive_rng(t.seed, &format!("eval-{}", step + 1));
            let (mean, std) = evaluate(
                &policy,
                &env,
                (&cfg.state_mean, &cfg.state_std),
                t.eval_episodes,
                &mut eval_rng,
            )?;
            run.append(MetricRow {
                step: step + 1,
                critic_loss: None,
                policy_loss: Some(policy_acc / acc_n as f64),
                eval_mean: Some(mean),
                eval_std: Some(std),
            })?;
            policy_acc = 0.0;
            acc_n = 0;
            save_components(&run, &policy, None)?;
            run.save_progress(step + 1, "bc")?;
        }
    }

    finish(cfg, run, started, policy, None, None, policy_opt.step_count())
}

/// Route a run to its pipeline by regime.
pub fn train(cfg: &RunConfig, ds: &OfflineDataset) -> Result<RunArtifacts> {
    match cfg.train.regime {
        Regime::OffPolicy => train_bpr(cfg, ds),
        Regime::Onestep | Regime::EnsembleLcb => train_onestep(cfg, ds),
    }
}

fn finish(
    cfg: RunConfig,
    mut run: RunDir,
    started: Instant,
    policy: TanhGaussianPolicy,
    ebm: Option<EnergyModel>,
    critics: Option<CriticSet>,
    policy_updates: u64,
) -> Result<RunArtifacts> {
    save_components(&run, &policy, critics.as_ref())?;
    let final_eval = run
        .rows
        .iter()
        .rev()
        .find_map(|r| r.eval_mean.map(|m| (m, r.eval_std.unwrap_or(0.0))))
        .unwrap_or((f64::NAN, f64::NAN));
    let seed = cfg.train.seed;
    let out_dir = run.out.clone();
    let metrics = std::mem::take(&mut run.rows);
    Ok(RunArtifacts {
        config: cfg,
        seed,
        out_dir,
        metrics,
        wall_clock: started.elapsed(),
        final_eval,
        policy,
        ebm,
        critics,
        policy_updates,
    })
}

/// One arm of the λ sweep.
#[derive(Debug, Clone, Serialize)]
pub struct LambdaArm {
    pub lambda: f64,
    pub eval_mean: f64,
    pub eval_std: f64,
    pub failed: bool,
}

/// Train one full run per λ with a shared seed; emit `lambda_sweep.csv`
/// and a bar plot. Arm failures are recorded and the sweep continues.
/// `BPR_THREADS` caps how many arms run in parallel.
pub fn ablate_lambda(cfg: &RunConfig, values: &[f64], ds: &OfflineDataset) -> Result<Vec<LambdaArm>> {
    if values.is_empty() {
        return Err(BprError::Config("need at least one lambda value".into()));
    }
    std::fs::create_dir_all(&cfg.out_dir)?;
    let threads: usize = std::env::var("BPR_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(1);

    let run_arm = |&lambda: &f64| -> LambdaArm {
        let mut arm_cfg = cfg.clone();
        arm_cfg.train.lambda = lambda;
        arm_cfg.out_dir = cfg.out_dir.join(format!("lambda_{lambda}"));
        match train(&arm_cfg, ds) {
            Ok(artifacts) => LambdaArm {
                lambda,
                eval_mean: artifacts.final_eval.0,
                eval_std: artifacts.final_eval.1,
                failed: false,
            },
            Err(_) => LambdaArm {
                lambda,
                eval_mean: f64::NAN,
                eval_std: f64::NAN,
                failed: true,
            },
        }
    };

    let arms: Vec<LambdaArm> = if threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| BprError::Config(format!("thread pool: {e}")))?;
        pool.install(|| {
            use rayon::prelude::*;
            values.par_iter().map(run_arm).collect()
        })
    } else {
        values.iter().map(run_arm).collect()
    };

    let mut csv = String::from("lambda,mean,std\n");
    for arm in &arms {
        csv.push_str(&format!("{},{},{}\n", arm.lambda, arm.eval_mean, arm.eval_std));
    }
    std::fs::write(cfg.out_dir.join("lambda_sweep.csv"), csv)?;
    let bars: Vec<(String, f64)> = arms
        .iter()
        .map(|a| (a.lambda.to_string(), if a.eval_mean.is_finite() { a.eval_mean } else { 0.0 }))
        .collect();
    emit_bar_plot(&bars, "return by lambda", &cfg.out_dir.join("lambda_sweep.svg"))?;
    Ok(arms)
}

/// Outcome of the bandit sampling-mode comparison.
#[derive(Debug, Clone, Serialize)]
pub struct BanditOutcome {
    pub seed: u64,
    /// tanh of the policy mean at the (normalized) bandit state.
    pub self_play_mean: f64,
    pub reference_mean: f64,
    pub self_play_eval: (f64, f64),
    pub reference_eval: (f64, f64),
}

/// Full bandit protocol: generate the bimodal dataset, pretrain one
/// energy model, train the policy under both sampling modes with a
/// shared seed, and emit the comparison plots.
pub fn bandit_protocol(out_dir: &Path, base: &TrainConfig) -> Result<BanditOutcome> {
    std::fs::create_dir_all(out_dir)?;
    let seed = base.seed;
    let spec = BanditSpec::default();
    let mut data_rng = derive_rng(seed, "bandit-data");
    let ds = generate_bandit_dataset(&spec, 10_000, &mut data_rng)?;
    let ds_path = out_dir.join("bandit.bprd");
    ds.save(&ds_path)?;

    // one EBM per seed, shared between the two sampling modes
    let prepared = prepare_dataset(base, &ds)?;
    let (ebm, _) = train_ebm(&prepared, &base.ebm_config(), &mut derive_rng(seed, "ebm"))?;
    let ebm_path = out_dir.join("ebm.bprw");
    checkpoint::save(&ebm.net, "ebm", &ebm_path)?;

    let mut outcomes = Vec::new();
    for (mode, name) in [(SamplingMode::SelfPlay, "self_play"), (SamplingMode::Reference, "reference")] {
        let cfg = RunConfig {
            env: "bandit".into(),
            dataset: ds_path.clone(),
            out_dir: out_dir.join(name),
            full_fidelity: false,
            ebm_checkpoint: Some(ebm_path.clone()),
            train: TrainConfig { mode, ..base.clone() },
            state_mean: vec![],
            state_std: vec![],
        };
        let artifacts = train_bpr(&cfg, &ds)?;
        let normalized_state = vec![
            (0.0 - artifacts.config.state_mean[0] as f64) / artifacts.config.state_std[0] as f64,
        ];
        let mean_action = artifacts.policy.deterministic_action(&normalized_state)?[0];
        outcomes.push((mean_action, artifacts));
    }
    let (self_play_mean, self_artifacts) = (outcomes[0].0, &outcomes[0].1);
    let (reference_mean, ref_artifacts) = (outcomes[1].0, &outcomes[1].1);

    emit_bandit_plots(out_dir, &spec, &ebm, self_artifacts, ref_artifacts)?;

    Ok(BanditOutcome {
        seed,
        self_play_mean,
        reference_mean,
        self_play_eval: self_artifacts.final_eval,
        reference_eval: ref_artifacts.final_eval,
    })
}

/// Reward, behavior density, learned energy density, and both fitted
/// policy densities over the action interval, as in the appendix figure:
/// one panel per fitted policy plus a combined overlay. Density curves
/// are rescaled to peak at 1 so shapes stay comparable.
fn emit_bandit_plots(
    out_dir: &Path,
    spec: &BanditSpec,
    ebm: &EnergyModel,
    self_artifacts: &RunArtifacts,
    ref_artifacts: &RunArtifacts,
) -> Result<()> {
    let n = 401;
    let grid: Vec<f64> = (0..n).map(|i| -1.0 + 2.0 * i as f64 / (n - 1) as f64).collect();
    let reward: Vec<(f64, f64)> = grid.iter().map(|&a| (a, spec.reward(a).unwrap())).collect();
    let behavior: Vec<(f64, f64)> = normalize_curve(grid.iter().map(|&a| (a, spec.behavior_density(a))));

    let state_mean = self_artifacts.config.state_mean[0] as f64;
    let state_std = self_artifacts.config.state_std[0] as f64;
    let norm_state = vec![(0.0 - state_mean) / state_std];
    let grid_actions: Vec<Vec<f64>> = grid.iter().map(|&a| vec![a]).collect();
    let ebm_density = ebm.density_grid(&norm_state, &grid_actions)?;
    let ebm_curve: Vec<(f64, f64)> =
        normalize_curve(grid.iter().cloned().zip(ebm_density.iter().cloned()));

    let policy_curve = |artifacts: &RunArtifacts| -> Result<Vec<(f64, f64)>> {
        let states = Array2::from_shape_fn((n, 1), |_| norm_state[0]);
        let actions = Array2::from_shape_fn((n, 1), |(i, _)| grid[i]);
        let lp = artifacts.policy.log_prob(&states, &actions)?;
        Ok(normalize_curve(
            grid.iter().cloned().zip(lp.iter().map(|l| l.exp())),
        ))
    };
    let self_curve = policy_curve(self_artifacts)?;
    let ref_curve = policy_curve(ref_artifacts)?;

    let series = |label: &str, pts: &[(f64, f64)]| Series {
        label: label.to_string(),
        points: pts.to_vec(),
    };
    emit_line_plot(
        &[series("reward", &reward), series("behavior density", &behavior)],
        "reward and behavior",
        &out_dir.join("plots_panel_a.svg"),
    )?;
    emit_line_plot(
        &[
            series("reward", &reward),
            series("energy density", &ebm_curve),
            series("reference policy", &ref_curve),
        ],
        "reference sampling",
        &out_dir.join("plots_panel_b.svg"),
    )?;
    emit_line_plot(
        &[
            series("reward", &reward),
            series("energy density", &ebm_curve),
            series("self-play policy", &self_curve),
        ],
        "self-play",
        &out_dir.join("plots_panel_c.svg"),
    )?;
    emit_line_plot(
        &[
            series("reward", &reward),
            series("energy density", &ebm_curve),
            series("self-play policy", &self_curve),
            series("reference policy", &ref_curve),
        ],
        "sampling-mode comparison",
        &out_dir.join("plots_overlay.svg"),
    )?;
    Ok(())
}

fn normalize_curve(points: impl Iterator<Item = (f64, f64)>) -> Vec<(f64, f64)> {
    let pts: Vec<(f64, f64)> = points.collect();
    let peak = pts.iter().map(|p| p.1).fold(0.0f64, f64::max).max(1e-300);
    pts.into_iter().map(|(x, y)| (x, y / peak)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::pointmass::{rollout_scripted, BehaviorKind};
    use crate::envs::{generate_pointmass_dataset, DatasetQuality, PointMassEnv};

    fn tiny_cfg(dir: &Path, env: &str, seed: u64) -> RunConfig {
        RunConfig {
            env: env.into(),
            dataset: dir.join("ds.bprd"),
            out_dir: dir.join("run"),
            full_fidelity: false,
            ebm_checkpoint: None,
            train: TrainConfig {
                seed,
                steps: 6,
                critic_steps: 4,
                ebm_steps: 3,
                ebm_batch: 4,
                ebm_negatives: 8,
                batch_size: 8,
                eval_interval: 3,
                eval_episodes: 2,
                policy_hidden: vec![8],
                critic_hidden: vec![8],
                ebm_hidden: vec![8],
                ..TrainConfig::default()
            },
            state_mean: vec![],
            state_std: vec![],
        }
    }

    fn tiny_bandit_dataset(seed: u64) -> OfflineDataset {
        let mut rng = derive_rng(seed, "data");
        generate_bandit_dataset(&BanditSpec::default(), 64, &mut rng).unwrap()
    }

    #[test]
    fn zero_steps_returns_initialized_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(dir.path(), "bandit", 1);
        cfg.train.steps = 0;
        let ds = tiny_bandit_dataset(1);
        let artifacts = train_bpr(&cfg, &ds).unwrap();
        assert_eq!(artifacts.policy_updates, 0);
        assert!(artifacts.metrics.is_empty());
        assert!(cfg.out_dir.join("config.json").exists());
    }

    #[test]
    fn interleaved_step_counters_match_call_order() {
        // per step in self-play off-policy: one target draw plus one
        // action pair → 3 sampled actions, one stacked energy evaluation,
        // one stacked value evaluation, exactly one policy update
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path(), "bandit", 2);
        let ds = tiny_bandit_dataset(2);
        let artifacts = train_bpr(&cfg, &ds).unwrap();
        let n = cfg.train.steps;
        assert_eq!(artifacts.policy_updates, n);
        assert_eq!(artifacts.policy.sample_count(), 3 * n);
        assert_eq!(artifacts.ebm.as_ref().unwrap().eval_count(), n);
        assert_eq!(artifacts.critics.as_ref().unwrap().eval_count(), n);
    }

    #[test]
    fn same_seed_runs_produce_identical_metrics_files() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_bandit_dataset(3);
        let mut cfg_a = tiny_cfg(dir.path(), "bandit", 3);
        cfg_a.out_dir = dir.path().join("a");
        let mut cfg_b = tiny_cfg(dir.path(), "bandit", 3);
        cfg_b.out_dir = dir.path().join("b");
        train_bpr(&cfg_a, &ds).unwrap();
        train_bpr(&cfg_b, &ds).unwrap();
        let a = std::fs::read(cfg_a.out_dir.join("metrics.csv")).unwrap();
        let b = std::fs::read(cfg_b.out_dir.join("metrics.csv")).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, b);
    }

    #[test]
    fn onestep_phase_one_never_queries_the_policy() {
        let dir = tempfile::tempdir().unwrap();
        let env = PointMassEnv::sparse_stitch();
        let mut rng = derive_rng(7, "data");
        let ds = generate_pointmass_dataset(&env, DatasetQuality::Stitch, 4, &mut rng).unwrap();
        let mut cfg = tiny_cfg(dir.path(), "pm-stitch", 7);
        cfg.train.regime = Regime::Onestep;
        cfg.train.steps = 0; // phase 2 empty: sampling must stay at zero
        let artifacts = train_onestep(&cfg, &ds).unwrap();
        assert_eq!(artifacts.policy.sample_count(), 0);
        assert_eq!(artifacts.policy_updates, 0);
    }

    #[test]
    fn ensemble_regime_uses_four_members() {
        let dir = tempfile::tempdir().unwrap();
        let env = PointMassEnv::sparse_stitch();
        let mut rng = derive_rng(8, "data");
        let ds = generate_pointmass_dataset(&env, DatasetQuality::Stitch, 4, &mut rng).unwrap();
        let mut cfg = tiny_cfg(dir.path(), "pm-stitch", 8);
        cfg.train.regime = Regime::EnsembleLcb;
        let artifacts = train_onestep(&cfg, &ds).unwrap();
        assert_eq!(artifacts.critics.as_ref().unwrap().members.len(), 4);
    }

    #[test]
    fn evaluate_horizon_one_returns_single_reward_and_zero_std() {
        let mut rng = derive_rng(0, "eval");
        let policy = TanhGaussianPolicy::new(1, 1, &[8], &mut rng);
        let env = EnvHandle::Bandit(BanditSpec::default());
        let (mean, std) = evaluate(&policy, &env, (&[0.0], &[1.0]), 1, &mut rng).unwrap();
        let a = policy.deterministic_action(&[0.0]).unwrap()[0];
        let expect = BanditSpec::default().reward(a).unwrap();
        assert!((mean - expect).abs() < 1e-12);
        assert_eq!(std, 0.0);
    }

    #[test]
    fn scripted_expert_matches_golden_return() {
        // frozen regression value for the dense expert controller
        let env = PointMassEnv::dense();
        let mut rng = derive_rng(123, "golden");
        let (_, ret) = rollout_scripted(BehaviorKind::Expert, &env, &mut rng).unwrap();
        let golden = -30.934196047649852;
        assert!(
            (ret - golden).abs() < 1e-9,
            "expert return drifted: {ret} vs {golden}"
        );
    }

    #[test]
    fn lambda_sweep_emits_rows_and_bars_for_every_value() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_bandit_dataset(4);
        let mut cfg = tiny_cfg(dir.path(), "bandit", 4);
        cfg.out_dir = dir.path().join("sweep");
        let arms = ablate_lambda(&cfg, &[1.0, 0.5, 1.0], &ds).unwrap();
        assert_eq!(arms.len(), 3);
        // duplicate values with the same seed give identical results
        assert_eq!(arms[0].eval_mean, arms[2].eval_mean);
        let csv = std::fs::read_to_string(cfg.out_dir.join("lambda_sweep.csv")).unwrap();
        assert_eq!(csv.lines().count(), 4);
        assert!(cfg.out_dir.join("lambda_sweep.svg").exists());
    }

    #[test]
    fn resume_continues_to_completion() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_bandit_dataset(5);
        let mut cfg = tiny_cfg(dir.path(), "bandit", 5);
        cfg.train.steps = 3;
        cfg.train.eval_interval = 3;
        train_bpr(&cfg, &ds).unwrap();
        // pretend the run was meant to be longer and resume it
        cfg.train.steps = 6;
        let artifacts = train_bpr_resumable(&cfg, &ds, true).unwrap();
        assert_eq!(artifacts.metrics.last().unwrap().step, 6);
        let csv = std::fs::read_to_string(cfg.out_dir.join("metrics.csv")).unwrap();
        assert_eq!(csv.lines().count(), 3); // header + rows at steps 3, 6
    }
}
