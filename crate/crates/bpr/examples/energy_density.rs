//! Train the energy-based behavior model on the bimodal bandit dataset
//! and inspect the implied density on an action grid. Only energy
//! differences matter downstream; the grid softmax here is a diagnostic.
//!
//! ```bash
//! cargo run --release --example energy_density
//! ```

use bpr::ebm::{train_ebm, EbmConfig};
use bpr::envs::{generate_bandit_dataset, BanditSpec};
use bpr::plot::{emit_line_plot, Series};
use bpr::trainer::derive_rng;

fn main() -> bpr::Result<()> {
    let out = std::path::PathBuf::from("runs/example_energy");
    std::fs::create_dir_all(&out)?;
    let spec = BanditSpec::default();
    let mut rng = derive_rng(3, "example-data");
    let mut ds = generate_bandit_dataset(&spec, 10_000, &mut rng)?;
    ds.normalize_states()?;

    let cfg = EbmConfig { hidden: vec![32, 32], steps: 1_500, ..EbmConfig::default() };
    println!("training the energy model ({} contrastive steps)…", cfg.steps);
    let (model, trace) = train_ebm(&ds, &cfg, &mut derive_rng(3, "ebm"))?;
    println!(
        "contrastive loss: {:.3} → {:.3}",
        trace.losses.first().unwrap().1,
        trace.losses.last().unwrap().1
    );

    let n = 401;
    let grid: Vec<Vec<f64>> = (0..n).map(|i| vec![-1.0 + 2.0 * i as f64 / (n - 1) as f64]).collect();
    let state = ds.normalize_raw_state(&[0.0]);
    let density = model.density_grid(&state, &grid)?;

    // density modes should sit on the behavior modes at ±0.5
    let mut minima = Vec::new();
    let energies: Vec<f64> = grid
        .iter()
        .map(|a| model.energy(&state, a).expect("in-range action"))
        .collect();
    for i in 1..n - 1 {
        if energies[i] < energies[i - 1] && energies[i] < energies[i + 1] {
            minima.push(grid[i][0]);
        }
    }
    println!("energy minima on the grid: {minima:?}");

    let true_curve: Vec<(f64, f64)> = grid.iter().map(|a| (a[0], spec.behavior_density(a[0]))).collect();
    let peak_true = true_curve.iter().map(|p| p.1).fold(0.0f64, f64::max);
    let peak_learned = density.iter().cloned().fold(0.0f64, f64::max);
    let series = vec![
        Series {
            label: "behavior mixture".into(),
            points: true_curve.iter().map(|&(x, y)| (x, y / peak_true)).collect(),
        },
        Series {
            label: "learned density".into(),
            points: grid.iter().zip(&density).map(|(a, &d)| (a[0], d / peak_learned)).collect(),
        },
    ];
    let svg = out.join("density.svg");
    emit_line_plot(&series, "behavior density recovery", &svg)?;
    println!("plot: {}", svg.display());
    Ok(())
}
