use scatterdense::decoder::{ResidualMode, SkipMode};
use scatterdense::harness::{config::ExperimentConfig, dataset::make_dataset, train};

fn main() {
    let runs: Vec<(SkipMode, bool, usize, u64)> = vec![
        (SkipMode::Polar, true, 2000, 1),
        (SkipMode::Cartesian, true, 500, 1),
        (SkipMode::Cartesian, true, 500, 2),
    ];
    for (mode, gating, steps, seed) in runs {
        let cfg = ExperimentConfig {
            steps, lr: 3e-3, scales: 3, orientations: 4, patch_size: 64,
            skip_mode: mode, gating, seed, residual: ResidualMode::Lowpass,
            ..Default::default()
        };
        let ds = make_dataset(&cfg).unwrap();
        let m = train::train_on(&cfg, &ds).unwrap();
        println!("{mode} gating={gating} steps={steps} seed={seed}: psnr {:.3}", m.metrics.psnr_db);
    }
}
