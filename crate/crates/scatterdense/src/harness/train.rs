//! The training loop: encode (fixed) -> forward -> loss -> backward ->
//! optimizer step, plus held-out evaluation.
//!
//! Everything downstream of the config and seed is deterministic; repeated
//! runs produce bit-identical parameters and metrics.

use std::collections::BTreeMap;

use rand::Rng;

use crate::decoder::{self, ForwardOpts, ModelConfig};
use crate::encoder::{scatter, ScatterOutput};
use crate::error::{Error, Result};
use crate::filterbank::FilterBank;
use crate::harness::config::ExperimentConfig;
use crate::harness::dataset::{make_dataset, tiles, Dataset};
use crate::metrics::{self, ImageMetrics, MetricReport};
use crate::nn::optim::{Adam, ParamStore};
use crate::nn::{ops, Tape};
use crate::rng::seeded_rng;
use crate::tensor::RealTensor;

/// A trained model with its evaluation summary.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub config: ExperimentConfig,
    pub store: ParamStore,
    pub metrics: MetricReport,
    /// PSNR of the (clamped) noisy input against the clean reference,
    /// logged with every run so "beats identity" is always checkable.
    pub identity_psnr: f64,
    /// (step, loss) samples along the run.
    pub history: Vec<(usize, f64)>,
    /// Mean spatial variance of the gate masks per level (coarse to fine),
    /// measured on the held-out images.
    pub gate_variance: Vec<f64>,
    /// Clamped denoised held-out images, for visual diagnostics.
    pub val_predictions: Vec<RealTensor>,
}

/// Stack single-image encoder outputs along the batch axis.
fn stack_outputs(parts: &[&ScatterOutput]) -> Result<ScatterOutput> {
    let first = parts[0];
    let (_, k, h, w) = first.s_agg.dims4()?;
    let b = parts.len();
    let mut agg = Vec::with_capacity(b * k * h * w);
    for p in parts {
        agg.extend_from_slice(p.s_agg.data());
    }
    let mut s0 = Vec::with_capacity(b * first.s0.len());
    for p in parts {
        s0.extend_from_slice(p.s0.data());
    }
    let c_in = first.s0.shape()[1];
    let mut skips = Vec::with_capacity(first.skips.len());
    for j in 0..first.skips.len() {
        let c = first.skips[j].amplitude.shape()[1];
        let mut amp = Vec::with_capacity(b * c * h * w);
        let mut phase = Vec::with_capacity(b * c * h * w);
        for p in parts {
            amp.extend_from_slice(p.skips[j].amplitude.data());
            phase.extend_from_slice(p.skips[j].phase.data());
        }
        skips.push(crate::encoder::SkipPair {
            amplitude: RealTensor::from_vec(&[b, c, h, w], amp)?,
            phase: RealTensor::from_vec(&[b, c, h, w], phase)?,
        });
    }
    Ok(ScatterOutput {
        s_agg: RealTensor::from_vec(&[b, k, h, w], agg)?,
        skips,
        s0: RealTensor::from_vec(&[b, c_in, h, w], s0)?,
        k_in: first.k_in,
    })
}

fn stack_images(parts: &[&RealTensor]) -> Result<RealTensor> {
    let (h, w) = parts[0].hw()?;
    let mut data = Vec::with_capacity(parts.len() * h * w);
    for p in parts {
        data.extend_from_slice(p.data());
    }
    RealTensor::from_vec(&[parts.len(), 1, h, w], data)
}

/// Number of batchnorm updates recorded in a store (0 for a fresh model).
pub fn bn_update_count(store: &ParamStore) -> f64 {
    store
        .buffer("level0.fuse.bn1.stats")
        .map(|t| t.data()[t.len() - 1])
        .unwrap_or(0.0)
}

/// Evaluation-mode forward: running statistics when available, batch
/// statistics for a fresh model (so a 0-step run still evaluates). The
/// store is never mutated.
pub fn forward_eval(
    model: &ModelConfig,
    store: &ParamStore,
    x: &RealTensor,
    encoded: &ScatterOutput,
) -> Result<(RealTensor, Vec<f64>)> {
    let tape = Tape::new();
    let mut scratch = store.clone();
    let out = decoder::forward(
        &tape,
        &mut scratch,
        x,
        encoded,
        model,
        ForwardOpts {
            training: bn_update_count(store) == 0.0,
            trainable: false,
            collect_gates: true,
            collect_trace: false,
        },
    )?;
    let gate_variance = out
        .gates
        .iter()
        .map(|g| decoder::gate_spatial_variance(g))
        .collect();
    Ok(((*out.prediction.value()).clone(), gate_variance))
}

/// Denoise one (H, W) image with a trained store; output clamped to [0, 1].
pub fn denoise_image(
    model: &ModelConfig,
    store: &ParamStore,
    bank: &FilterBank,
    mode: crate::encoder::EncoderMode,
    noisy: &RealTensor,
) -> Result<RealTensor> {
    let encoded = scatter(noisy, bank, mode)?;
    let (pred, _) = forward_eval(model, store, noisy, &encoded)?;
    let (h, w) = noisy.hw()?;
    pred.map(|v| v.clamp(0.0, 1.0)).reshape(&[h, w])
}

/// Summary of one evaluation pass over the held-out split.
pub struct EvalResult {
    pub metrics: MetricReport,
    pub identity_psnr: f64,
    pub gate_variance: Vec<f64>,
    pub predictions: Vec<RealTensor>,
}

/// Evaluate a store on the held-out images. `transform` can rewrite the
/// encoder output per image (the shuffling ablation hooks in here).
pub fn evaluate(
    cfg: &ExperimentConfig,
    store: &ParamStore,
    dataset: &Dataset,
    transform: Option<&dyn Fn(usize, ScatterOutput) -> ScatterOutput>,
) -> Result<EvalResult> {
    let model = cfg.model();
    let bank = FilterBank::build(
        cfg.scales,
        cfg.orientations,
        cfg.slant,
        cfg.image_size,
        cfg.image_size,
    )?;
    let mut per_image = Vec::new();
    let mut identity = 0.0;
    let mut predictions = Vec::new();
    let mut gate_acc: Vec<f64> = Vec::new();
    for (i, pair) in dataset.val.iter().enumerate() {
        let mut encoded = scatter(&pair.noisy, &bank, cfg.encoder_mode)?;
        if let Some(t) = transform {
            encoded = t(i, encoded);
        }
        let (pred, gates) = forward_eval(&model, store, &pair.noisy, &encoded)?;
        let pred = pred
            .map(|v| v.clamp(0.0, 1.0))
            .reshape(&[cfg.image_size, cfg.image_size])?;
        per_image.push(ImageMetrics {
            psnr_db: metrics::psnr(&pred, &pair.clean, 1.0)?,
            ssim: metrics::ssim(&pred, &pair.clean)?,
            mse: metrics::mse(&pred, &pair.clean)?,
        });
        identity += metrics::psnr(&pair.noisy.map(|v| v.clamp(0.0, 1.0)), &pair.clean, 1.0)?;
        if gate_acc.is_empty() {
            gate_acc = gates;
        } else {
            for (a, g) in gate_acc.iter_mut().zip(&gates) {
                *a += g;
            }
        }
        predictions.push(pred);
    }
    let n = dataset.val.len() as f64;
    if !gate_acc.is_empty() {
        for a in &mut gate_acc {
            *a /= n;
        }
    }
    Ok(EvalResult {
        metrics: MetricReport::from_images(per_image),
        identity_psnr: identity / n,
        gate_variance: gate_acc,
        predictions,
    })
}

/// Train a model from scratch per the config.
pub fn train(cfg: &ExperimentConfig) -> Result<TrainedModel> {
    cfg.validate()?;
    let dataset = make_dataset(cfg)?;
    train_on(cfg, &dataset)
}

/// Train on an existing dataset (shared across harness arms).
pub fn train_on(cfg: &ExperimentConfig, dataset: &Dataset) -> Result<TrainedModel> {
    let model = cfg.model();
    let patch = cfg.patch_size;
    let bank = FilterBank::build(cfg.scales, cfg.orientations, cfg.slant, patch, patch)?;

    // fixed encoder: encode every training tile once
    let mut tile_pairs: Vec<(RealTensor, RealTensor)> = Vec::new();
    for pair in &dataset.train {
        let noisy_tiles = tiles(&pair.noisy, patch);
        let clean_tiles = tiles(&pair.clean, patch);
        tile_pairs.extend(noisy_tiles.into_iter().zip(clean_tiles));
    }
    if tile_pairs.is_empty() {
        return Err(Error::Data("no training tiles".into()));
    }
    let encoded: Vec<ScatterOutput> = tile_pairs
        .iter()
        .map(|(noisy, _)| scatter(noisy, &bank, cfg.encoder_mode))
        .collect::<Result<_>>()?;
    let tile_x: Vec<RealTensor> = tile_pairs
        .iter()
        .map(|(noisy, _)| noisy.clone().reshape(&[1, 1, patch, patch]))
        .collect::<Result<_>>()?;
    let tile_y: Vec<RealTensor> = tile_pairs
        .iter()
        .map(|(_, clean)| clean.clone().reshape(&[1, 1, patch, patch]))
        .collect::<Result<_>>()?;

    // real-spectrum wavelets for the prediction-phase regularizers
    let use_phase_losses = cfg.lambda_ptv != 0.0 || cfg.lambda_align != 0.0;
    let phase_filters: Vec<Vec<RealTensor>> = if use_phase_losses {
        bank.psi_hat
            .iter()
            .map(|row| row.iter().map(|p| p.re_tensor()).collect())
            .collect()
    } else {
        Vec::new()
    };

    let mut store = decoder::init_params(&model, cfg.seed);
    let mut adam = Adam::new(cfg.lr);
    let mut order_rng = seeded_rng(cfg.seed, "train-order");
    let mut history = Vec::new();

    for step in 0..cfg.steps {
        let picks: Vec<usize> = (0..cfg.batch)
            .map(|_| order_rng.gen_range(0..tile_pairs.len()))
            .collect();
        let enc_refs: Vec<&ScatterOutput> = picks.iter().map(|&i| &encoded[i]).collect();
        let x_refs: Vec<&RealTensor> = picks.iter().map(|&i| &tile_x[i]).collect();
        let y_refs: Vec<&RealTensor> = picks.iter().map(|&i| &tile_y[i]).collect();
        let enc_batch = stack_outputs(&enc_refs)?;
        let x_batch = stack_images(&x_refs)?.reshape(&[cfg.batch, 1, patch, patch])?;
        let y_batch = stack_images(&y_refs)?.reshape(&[cfg.batch, 1, patch, patch])?;

        let tape = Tape::new();
        let out = decoder::forward(
            &tape,
            &mut store,
            &x_batch,
            &enc_batch,
            &model,
            ForwardOpts {
                training: true,
                trainable: true,
                collect_gates: false,
                collect_trace: false,
            },
        )?;
        let target = tape.constant(y_batch);
        let mut loss = metrics::mse_loss(&out.prediction, &target)?;

        if use_phase_losses {
            let mut scale_phases = Vec::with_capacity(cfg.scales);
            for row in &phase_filters {
                let mut orientation_phases = Vec::with_capacity(cfg.orientations);
                for h_hat in row {
                    let (re, im) = ops::filter_pair(&out.prediction, h_hat)?;
                    orientation_phases.push(ops::atan2(&im, &re)?);
                }
                let refs: Vec<&crate::nn::DiffTensor> = orientation_phases.iter().collect();
                scale_phases.push(ops::concat_channels(&refs)?);
            }
            if cfg.lambda_ptv != 0.0 {
                let mut tv_terms = Vec::new();
                for phase in &scale_phases {
                    tv_terms.push(metrics::phase_tv_loss(phase)?);
                }
                let mut tv = tv_terms[0].clone();
                for t in &tv_terms[1..] {
                    tv = ops::add(&tv, t)?;
                }
                let tv = ops::scale(&tv, cfg.lambda_ptv / tv_terms.len() as f64);
                loss = ops::add(&loss, &tv)?;
            }
            if cfg.lambda_align != 0.0 && cfg.scales >= 2 {
                let align = metrics::phase_align_loss(&scale_phases, cfg.align_pool)?;
                loss = ops::add(&loss, &ops::scale(&align, cfg.lambda_align))?;
            }
        }

        if cfg.lr_cosine {
            let progress = step as f64 / cfg.steps.max(1) as f64;
            adam.lr = cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        }
        let loss_value = loss.scalar_value()?;
        if !loss_value.is_finite() {
            return Err(Error::Divergence(format!(
                "loss became non-finite at step {step}"
            )));
        }
        if step % 25 == 0 || step + 1 == cfg.steps {
            history.push((step, loss_value));
        }

        let grads_by_node = tape.backward(&loss)?;
        let mut grads: BTreeMap<String, RealTensor> = BTreeMap::new();
        for (name, node) in &out.bound {
            if let Some(g) = grads_by_node.get(node) {
                grads.insert(name.clone(), g.clone());
            }
        }
        adam.step(&mut store, &grads)?;
        if !store.all_finite() {
            return Err(Error::Divergence(format!(
                "parameters became non-finite after step {step}"
            )));
        }
    }

    let eval = evaluate(cfg, &store, dataset, None)?;
    Ok(TrainedModel {
        config: cfg.clone(),
        store,
        metrics: eval.metrics,
        identity_psnr: eval.identity_psnr,
        history,
        gate_variance: eval.gate_variance,
        val_predictions: eval.predictions,
    })
}
