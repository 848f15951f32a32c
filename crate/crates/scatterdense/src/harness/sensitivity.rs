//! Single-knob sensitivity sweeps: scattering depth, wavelet slant, decoder
//! width, gate hidden width.

use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::harness::dataset::make_dataset;
use crate::harness::parallel::parallel_map_ordered;
use crate::harness::train::train_on;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Knob {
    Scales,
    Slant,
    CBn,
    GateHidden,
}

impl std::fmt::Display for Knob {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Knob::Scales => write!(f, "J"),
            Knob::Slant => write!(f, "slant"),
            Knob::CBn => write!(f, "c_bn"),
            Knob::GateHidden => write!(f, "gate_hidden"),
        }
    }
}

impl std::str::FromStr for Knob {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "J" => Ok(Knob::Scales),
            "slant" => Ok(Knob::Slant),
            "c_bn" => Ok(Knob::CBn),
            "gate_hidden" => Ok(Knob::GateHidden),
            other => Err(Error::Config(format!(
                "unknown sensitivity knob {other} (expected J|slant|c_bn|gate_hidden)"
            ))),
        }
    }
}

impl Knob {
    pub fn apply(&self, base: &ExperimentConfig, value: f64) -> Result<ExperimentConfig> {
        let mut cfg = base.clone();
        match self {
            Knob::Scales => cfg.scales = value as usize,
            Knob::Slant => cfg.slant = value,
            Knob::CBn => cfg.c_bn = value as usize,
            Knob::GateHidden => cfg.gate_hidden = value as usize,
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug)]
pub struct SensitivityRow {
    pub knob: String,
    pub value: f64,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    /// Mean over levels and seeds of the gate spatial-variance statistic.
    pub gate_variance: f64,
    pub per_seed_psnr: Vec<f64>,
}

/// Train per (value, seed) and report mean/std PSNR plus the gate
/// spatial-variance statistic.
pub fn sensitivity_sweep(
    base: &ExperimentConfig,
    knob: Knob,
    values: &[f64],
    seeds: &[u64],
) -> Result<Vec<SensitivityRow>> {
    if values.is_empty() || seeds.is_empty() {
        return Err(Error::Config("sensitivity sweep needs values and seeds".into()));
    }
    let mut jobs = Vec::new();
    for &value in values {
        for &seed in seeds {
            let mut cfg = knob.apply(base, value)?;
            cfg.seed = seed;
            jobs.push(cfg);
        }
    }
    let outcomes = parallel_map_ordered(jobs, |cfg| -> Result<(f64, f64)> {
        let dataset = make_dataset(&cfg)?;
        let model = train_on(&cfg, &dataset)?;
        let gate_var = if model.gate_variance.is_empty() {
            0.0
        } else {
            model.gate_variance.iter().sum::<f64>() / model.gate_variance.len() as f64
        };
        Ok((model.metrics.psnr_db, gate_var))
    });
    let mut rows = Vec::new();
    for (vi, &value) in values.iter().enumerate() {
        let mut psnrs = Vec::new();
        let mut gates = Vec::new();
        for k in 0..seeds.len() {
            let (p, g) = outcomes[vi * seeds.len() + k]
                .as_ref()
                .map_err(|e| Error::Config(format!("{knob}={value} failed: {e}")))?;
            psnrs.push(*p);
            gates.push(*g);
        }
        let m = psnrs.iter().sum::<f64>() / psnrs.len() as f64;
        let sd = if psnrs.len() < 2 {
            0.0
        } else {
            (psnrs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (psnrs.len() - 1) as f64)
                .sqrt()
        };
        rows.push(SensitivityRow {
            knob: knob.to_string(),
            value,
            psnr_mean: m,
            psnr_std: sd,
            gate_variance: gates.iter().sum::<f64>() / gates.len() as f64,
            per_seed_psnr: psnrs,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{count_channels, SiblingRule};

    #[test]
    fn knob_application_changes_channel_counts_consistently() {
        let base = ExperimentConfig::default();
        let j1 = Knob::Scales.apply(&base, 1.0).unwrap();
        let j2 = Knob::Scales.apply(&base, 2.0).unwrap();
        let rule = SiblingRule::default();
        assert_eq!(
            j1.model().k_in(),
            count_channels(1, 1, base.orientations, rule)
        );
        assert_eq!(
            j2.model().k_in(),
            count_channels(1, 2, base.orientations, rule)
        );
    }

    #[test]
    fn invalid_knob_values_are_rejected() {
        let base = ExperimentConfig::default();
        assert!(Knob::Slant.apply(&base, 1.5).is_err());
        assert!(Knob::Scales.apply(&base, 0.0).is_err());
    }
}
