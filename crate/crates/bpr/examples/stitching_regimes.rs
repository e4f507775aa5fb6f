//! Sparse stitching task across the three value regimes.
//!
//! The dataset holds first-leg episodes (start → junction, park) and
//! second-leg episodes launched at the junction toward the goal or its
//! mirror decoy in equal shares. No logged trajectory solves the task,
//! and the junction's average behavior points nowhere — success requires
//! the value function to pick the goal-bound mode.
//!
//! ```bash
//! cargo run --release --example stitching_regimes
//! ```

use bpr::config::{RunConfig, TrainConfig};
use bpr::critic::Regime;
use bpr::envs::{generate_pointmass_dataset, DatasetQuality, PointMassEnv};
use bpr::trainer::{derive_rng, train_bc, train_onestep};

fn main() -> bpr::Result<()> {
    let out = std::path::PathBuf::from("runs/example_stitch");
    std::fs::create_dir_all(&out)?;
    let env = PointMassEnv::sparse_stitch();
    let mut rng = derive_rng(1, "example-data");
    let ds = generate_pointmass_dataset(&env, DatasetQuality::Stitch, 200, &mut rng)?;
    let ds_path = out.join("pm_stitch.bprd");
    ds.save(&ds_path)?;
    println!("stitch dataset: {} transitions", ds.len());

    let base = |name: &str, regime: Regime| RunConfig {
        env: ds.env_tag.clone(),
        dataset: ds_path.clone(),
        out_dir: out.join(name),
        full_fidelity: false,
        ebm_checkpoint: None,
        train: TrainConfig::pointmass_stitch_desk(1, regime),
        state_mean: vec![],
        state_std: vec![],
    };

    println!("behavioral cloning…");
    let bc = train_bc(&base("bc", Regime::Onestep), &ds)?;
    println!("on-policy value function, clipped double-Q (~40 s)…");
    let one = train_onestep(&base("onestep", Regime::Onestep), &ds)?;
    println!("independent four-critic ensemble, lower confidence bound (~60 s)…");
    let ens = train_onestep(&base("ensemble", Regime::EnsembleLcb), &ds)?;

    println!("success rates over 100 evaluation episodes:");
    println!("  cloning            {:.2}", bc.final_eval.0);
    println!("  onestep (min of 2) {:.2}", one.final_eval.0);
    println!("  ensemble LCB (4)   {:.2}", ens.final_eval.0);
    println!("independent critics propagate the sparse signal along the");
    println!("second leg without the compounding underestimation of the");
    println!("min-clipped pair, so the ensemble stitches more reliably.");
    Ok(())
}
