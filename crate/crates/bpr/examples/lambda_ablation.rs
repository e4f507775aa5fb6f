//! Sweep the consistency/value tradeoff λ on the bandit with a shared
//! seed and emit the CSV table and bar plot.
//!
//! ```bash
//! cargo run --release --example lambda_ablation
//! ```

use bpr::config::{RunConfig, TrainConfig};
use bpr::envs::{generate_bandit_dataset, BanditSpec};
use bpr::trainer::{ablate_lambda, derive_rng};

fn main() -> bpr::Result<()> {
    let out = std::path::PathBuf::from("runs/example_lambda");
    std::fs::create_dir_all(&out)?;
    let mut rng = derive_rng(1, "example-data");
    let ds = generate_bandit_dataset(&BanditSpec::default(), 10_000, &mut rng)?;
    let ds_path = out.join("bandit.bprd");
    ds.save(&ds_path)?;

    let mut train = TrainConfig::bandit_desk(1);
    train.steps = 10_000; // reduced budget per arm for the walkthrough
    let cfg = RunConfig {
        env: "bandit".into(),
        dataset: ds_path,
        out_dir: out.clone(),
        full_fidelity: false,
        ebm_checkpoint: None,
        train,
        state_mean: vec![],
        state_std: vec![],
    };

    let values = [0.5, 1.0, 1.5, 2.0];
    println!("sweeping λ over {values:?} with a shared seed…");
    let arms = ablate_lambda(&cfg, &values, &ds)?;
    for arm in &arms {
        println!(
            "λ = {:>4}: reward {:.4} ± {:.4}{}",
            arm.lambda,
            arm.eval_mean,
            arm.eval_std,
            if arm.failed { "  (failed)" } else { "" }
        );
    }
    println!("table: {}", out.join("lambda_sweep.csv").display());
    println!("plot:  {}", out.join("lambda_sweep.svg").display());
    Ok(())
}
