//! Print a deterministic evaluation rollout of a trained point-mass
//! policy, step by step.
//!
//! ```bash
//! cargo run --release --example trace_rollout -- runs/example_stitch/ensemble
//! ```

use bpr::config::RunConfig;
use bpr::envs::EnvHandle;
use bpr::nn::checkpoint;
use bpr::policy::TanhGaussianPolicy;
use bpr::trainer::derive_rng;

fn main() -> bpr::Result<()> {
    let run: std::path::PathBuf = std::env::args()
        .nth(1)
        .expect("usage: trace_rollout RUN_DIR [SEED]")
        .into();
    let seed: u64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(5);

    let cfg = RunConfig::load_json(&run.join("config.json"))?;
    let (net, _) = checkpoint::load(&run.join("checkpoints/policy.bprw"))?;
    let env = match EnvHandle::from_tag(&cfg.env)? {
        EnvHandle::PointMass(e) => e,
        EnvHandle::Bandit(_) => {
            println!("bandit runs have single-step episodes; use `bpr eval` instead");
            return Ok(());
        }
    };
    let policy = TanhGaussianPolicy::from_net(net, 4, 2)?;

    let mut rng = derive_rng(seed, "trace");
    let mut state = env.reset(&mut rng);
    println!("goal ({:+.2}, {:+.2}), horizon {}", env.goal[0], env.goal[1], env.horizon);
    let mut ret = 0.0;
    for t in 0..env.horizon {
        let raw = state.to_vec();
        let s: Vec<f64> = raw
            .iter()
            .enumerate()
            .map(|(j, &v)| (v - cfg.state_mean[j] as f64) / cfg.state_std[j] as f64)
            .collect();
        let a = policy.deterministic_action(&s)?;
        let (next, reward, done) = env.step(state, [a[0], a[1]]);
        ret += reward;
        if t % 5 == 0 || done {
            println!(
                "t={t:3}  pos=({:+.3}, {:+.3})  vel=({:+.3}, {:+.3})  act=({:+.3}, {:+.3})  r={reward:+.2}",
                state.pos[0], state.pos[1], state.vel[0], state.vel[1], a[0], a[1]
            );
        }
        state = next;
        if done {
            println!("reached the goal at step {t}");
            break;
        }
    }
    println!("return {ret:.2}");
    Ok(())
}
