//! The architectural ablation ladder and the spatial shuffling ablation.

use rand::seq::SliceRandom;

use crate::decoder::SkipMode;
use crate::encoder::{EncoderMode, ScatterOutput, SkipPair};
use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::harness::dataset::make_dataset;
use crate::harness::parallel::parallel_map_ordered;
use crate::harness::train::{evaluate, train_on, TrainedModel};
use crate::rng::seeded_rng;
use crate::tensor::RealTensor;

/// Aggregated outcome of one arm across seeds.
#[derive(Clone, Debug)]
pub struct AblationResult {
    pub id: String,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub ssim_mean: f64,
    pub delta_vs_baseline: f64,
    pub per_seed_psnr: Vec<f64>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// The four ladder arms, in progression order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LadderStep {
    /// Invariant smoothing, magnitude-only skips.
    InvariantModulus,
    /// Per-scale smoothing, magnitude-only skips.
    Stride1Modulus,
    /// Per-scale smoothing, Cartesian complex skips, no gating.
    Stride1CartesianNoGate,
    /// Per-scale smoothing, polar skips, learned gating.
    Stride1PolarGated,
}

pub const LADDER: [LadderStep; 4] = [
    LadderStep::InvariantModulus,
    LadderStep::Stride1Modulus,
    LadderStep::Stride1CartesianNoGate,
    LadderStep::Stride1PolarGated,
];

impl LadderStep {
    pub fn id(&self) -> &'static str {
        match self {
            LadderStep::InvariantModulus => "invariant_modulus",
            LadderStep::Stride1Modulus => "stride1_modulus",
            LadderStep::Stride1CartesianNoGate => "stride1_cartesian_nogate",
            LadderStep::Stride1PolarGated => "stride1_polar_gated",
        }
    }

    pub fn apply(&self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut cfg = base.clone();
        match self {
            LadderStep::InvariantModulus => {
                cfg.encoder_mode = EncoderMode::Invariant;
                cfg.skip_mode = SkipMode::ModulusOnly;
                cfg.gating = true;
            }
            LadderStep::Stride1Modulus => {
                cfg.encoder_mode = EncoderMode::Stride1;
                cfg.skip_mode = SkipMode::ModulusOnly;
                cfg.gating = true;
            }
            LadderStep::Stride1CartesianNoGate => {
                cfg.encoder_mode = EncoderMode::Stride1;
                cfg.skip_mode = SkipMode::Cartesian;
                cfg.gating = false;
            }
            LadderStep::Stride1PolarGated => {
                cfg.encoder_mode = EncoderMode::Stride1;
                cfg.skip_mode = SkipMode::Polar;
                cfg.gating = true;
            }
        }
        cfg
    }
}

/// Train every ladder arm across the seeds and report mean/std PSNR with
/// deltas against the invariant baseline. Runs execute in parallel worker
/// threads; results merge in deterministic arm order.
pub fn ablation_ladder(base: &ExperimentConfig, seeds: &[u64]) -> Result<Vec<AblationResult>> {
    if seeds.len() < 3 {
        return Err(Error::Config(format!(
            "ablation ladder needs >= 3 seeds, got {}",
            seeds.len()
        )));
    }
    let mut jobs = Vec::new();
    for step in LADDER {
        for &seed in seeds {
            let mut cfg = step.apply(base);
            cfg.seed = seed;
            jobs.push(cfg);
        }
    }
    let outcomes = parallel_map_ordered(jobs, |cfg| -> Result<(f64, f64)> {
        let dataset = make_dataset(&cfg)?;
        let model = train_on(&cfg, &dataset)?;
        Ok((model.metrics.psnr_db, model.metrics.ssim))
    });
    let mut results = Vec::new();
    let mut baseline_mean = 0.0;
    for (si, step) in LADDER.iter().enumerate() {
        let mut psnrs = Vec::new();
        let mut ssims = Vec::new();
        for k in 0..seeds.len() {
            let (p, s) = outcomes[si * seeds.len() + k]
                .as_ref()
                .map_err(|e| Error::Config(format!("{} failed: {e}", step.id())))?;
            psnrs.push(*p);
            ssims.push(*s);
        }
        let m = mean(&psnrs);
        if si == 0 {
            baseline_mean = m;
        }
        results.push(AblationResult {
            id: step.id().to_string(),
            psnr_mean: m,
            psnr_std: std_dev(&psnrs),
            ssim_mean: mean(&ssims),
            delta_vs_baseline: m - baseline_mean,
            per_seed_psnr: psnrs,
        });
    }
    Ok(results)
}

/// Which skip plane(s) get spatially permuted at evaluation time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShuffleMode {
    None,
    Phase,
    Amplitude,
    All,
}

impl std::fmt::Display for ShuffleMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ShuffleMode::None => write!(f, "none"),
            ShuffleMode::Phase => write!(f, "phase"),
            ShuffleMode::Amplitude => write!(f, "amplitude"),
            ShuffleMode::All => write!(f, "all"),
        }
    }
}

impl std::str::FromStr for ShuffleMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(ShuffleMode::None),
            "phase" => Ok(ShuffleMode::Phase),
            "amplitude" => Ok(ShuffleMode::Amplitude),
            "all" => Ok(ShuffleMode::All),
            other => Err(Error::Config(format!(
                "unknown shuffle mode {other} (expected none|phase|amplitude|all)"
            ))),
        }
    }
}

/// One random spatial permutation per channel, applied to the whole plane;
/// the per-channel value multiset is exactly preserved.
fn permute_plane(t: &RealTensor, rng: &mut impl rand::Rng) -> RealTensor {
    let (b, c, h, w) = t.dims4().expect("skip plane rank");
    let plane = h * w;
    let mut out = t.clone();
    for p in 0..b * c {
        let mut perm: Vec<usize> = (0..plane).collect();
        perm.shuffle(rng);
        let src = &t.data()[p * plane..(p + 1) * plane];
        let dst = &mut out.data_mut()[p * plane..(p + 1) * plane];
        for (i, &s) in perm.iter().enumerate() {
            dst[i] = src[s];
        }
    }
    out
}

/// Permute the selected plane(s) of every skip scale; `All` draws
/// independent permutations for the two planes.
pub fn shuffle_skips(
    encoded: &ScatterOutput,
    mode: ShuffleMode,
    rng: &mut impl rand::Rng,
) -> ScatterOutput {
    if mode == ShuffleMode::None {
        return encoded.clone();
    }
    let skips = encoded
        .skips
        .iter()
        .map(|pair| {
            let amplitude = match mode {
                ShuffleMode::Amplitude | ShuffleMode::All => permute_plane(&pair.amplitude, rng),
                _ => pair.amplitude.clone(),
            };
            let phase = match mode {
                ShuffleMode::Phase | ShuffleMode::All => permute_plane(&pair.phase, rng),
                _ => pair.phase.clone(),
            };
            SkipPair { amplitude, phase }
        })
        .collect();
    ScatterOutput {
        s_agg: encoded.s_agg.clone(),
        skips,
        s0: encoded.s0.clone(),
        k_in: encoded.k_in,
    }
}

/// Evaluate a trained model with shuffled skip planes. The delta is against
/// the same model evaluated unshuffled; seeds drive the permutations.
pub fn shuffle_ablation(
    model: &TrainedModel,
    mode: ShuffleMode,
    seeds: &[u64],
) -> Result<AblationResult> {
    let cfg = &model.config;
    let dataset = make_dataset(cfg)?;
    let base = evaluate(cfg, &model.store, &dataset, None)?;
    let mut psnrs = Vec::new();
    let mut ssims = Vec::new();
    for &seed in seeds {
        let transform = move |image_index: usize, encoded: ScatterOutput| -> ScatterOutput {
            let mut rng = seeded_rng(seed, &format!("shuffle-{mode}-image{image_index}"));
            shuffle_skips(&encoded, mode, &mut rng)
        };
        let eval = evaluate(cfg, &model.store, &dataset, Some(&transform))?;
        psnrs.push(eval.metrics.psnr_db);
        ssims.push(eval.metrics.ssim);
    }
    Ok(AblationResult {
        id: format!("shuffle_{mode}"),
        psnr_mean: mean(&psnrs),
        psnr_std: std_dev(&psnrs),
        ssim_mean: mean(&ssims),
        delta_vs_baseline: mean(&psnrs) - base.metrics.psnr_db,
        per_seed_psnr: psnrs,
    })
}
