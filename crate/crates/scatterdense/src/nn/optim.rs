//! Named parameter storage, the Adam optimizer, and the checkpoint format.
//!
//! A `ParamStore` holds trainable parameters and non-trainable buffers
//! (batchnorm running statistics) keyed by name; iteration order is always
//! the sorted name order, which makes updates deterministic. Stores are not
//! concurrently mutable; one store belongs to one model instance.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ops::BnStateView;
use crate::nn::{DiffTensor, Tape};
use crate::sdtn;
use crate::tensor::RealTensor;

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: BTreeMap<String, RealTensor>,
    buffers: BTreeMap<String, RealTensor>,
    pub rng_seed: u64,
}

impl ParamStore {
    pub fn new(rng_seed: u64) -> Self {
        ParamStore {
            rng_seed,
            ..Default::default()
        }
    }

    pub fn insert_param(&mut self, name: &str, value: RealTensor) {
        debug_assert!(!self.params.contains_key(name), "duplicate param {name}");
        self.params.insert(name.to_string(), value);
    }

    pub fn insert_buffer(&mut self, name: &str, value: RealTensor) {
        debug_assert!(!self.buffers.contains_key(name), "duplicate buffer {name}");
        self.buffers.insert(name.to_string(), value);
    }

    pub fn param(&self, name: &str) -> Result<&RealTensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut RealTensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    pub fn buffer(&self, name: &str) -> Result<&RealTensor> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown buffer {name}")))
    }

    pub fn param_names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &RealTensor)> {
        self.params.iter()
    }

    /// Total number of trainable scalar values.
    pub fn parameter_count(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(|t| t.all_finite())
            && self.buffers.values().all(|t| t.all_finite())
    }

    /// Register a batchnorm layer's state buffer: running mean and variance
    /// for `channels` plus the update counter, packed into one tensor.
    pub fn add_bn_buffer(&mut self, prefix: &str, channels: usize) {
        let mut init = vec![0.0; 2 * channels + 1];
        for v in init.iter_mut().skip(channels).take(channels) {
            *v = 1.0; // running variance starts at one
        }
        self.insert_buffer(
            &format!("{prefix}.stats"),
            RealTensor::from_vec(&[2 * channels + 1], init).expect("bn buffer"),
        );
    }

    /// Mutable view into a batchnorm state buffer registered with
    /// [`ParamStore::add_bn_buffer`].
    pub fn bn_state(&mut self, prefix: &str) -> Result<BnStateView<'_>> {
        let name = format!("{prefix}.stats");
        let tensor = self
            .buffers
            .get_mut(&name)
            .ok_or_else(|| Error::Config(format!("unknown batchnorm state {name}")))?;
        let len = tensor.len();
        if len < 3 || len % 2 == 0 {
            return Err(Error::Shape(format!("malformed batchnorm state {name}")));
        }
        let channels = (len - 1) / 2;
        let (mean, rest) = tensor.data_mut().split_at_mut(channels);
        let (var, updates) = rest.split_at_mut(channels);
        Ok(BnStateView {
            running_mean: mean,
            running_var: var,
            updates: &mut updates[0],
        })
    }

    /// Bind every parameter onto a tape. `trainable = false` binds them as
    /// constants (evaluation graphs record no backward closures).
    pub fn bind(&self, tape: &Tape, trainable: bool) -> BTreeMap<String, DiffTensor> {
        self.params
            .iter()
            .map(|(name, value)| {
                let node = if trainable {
                    tape.leaf(value.clone())
                } else {
                    tape.constant(value.clone())
                };
                (name.clone(), node)
            })
            .collect()
    }
}

/// Standard Adam with bias correction. Deterministic given the parameter
/// order (sorted by name).
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first_moment: BTreeMap<String, RealTensor>,
    second_moment: BTreeMap<String, RealTensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        }
    }

    /// One update over every trainable parameter. A parameter without a
    /// gradient entry is an error: the graph must reach all of them.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &BTreeMap<String, RealTensor>,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let names: Vec<String> = store.param_names().cloned().collect();
        for name in names {
            let grad = grads
                .get(&name)
                .ok_or_else(|| Error::Config(format!("missing gradient for parameter {name}")))?;
            let value = store.param_mut(&name)?;
            if grad.shape() != value.shape() {
                return Err(Error::Shape(format!(
                    "gradient shape {:?} does not match parameter {name} {:?}",
                    grad.shape(),
                    value.shape()
                )));
            }
            let m = self
                .first_moment
                .entry(name.clone())
                .or_insert_with(|| RealTensor::zeros(value.shape()));
            let v = self
                .second_moment
                .entry(name.clone())
                .or_insert_with(|| RealTensor::zeros(value.shape()));
            for i in 0..value.len() {
                let g = grad.data()[i];
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * g;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                value.data_mut()[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

fn shape_string(shape: &[usize]) -> String {
    shape
        .iter()
        .map(|e| e.to_string())
        .collect::<Vec<_>>()
        .join("x")
}

fn parse_shape(s: &str) -> Result<Vec<usize>> {
    s.split('x')
        .map(|p| {
            p.parse::<usize>()
                .map_err(|_| Error::Data(format!("bad extent {p} in checkpoint manifest")))
        })
        .collect()
}

/// Write a checkpoint: one SDTN tensor per named entry plus a CSV manifest
/// (name, kind, dtype, shape). Reload is bit-exact.
pub fn save_checkpoint(store: &ParamStore, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::from("name,kind,dtype,shape\n");
    let mut write_entry = |name: &str, kind: &str, tensor: &RealTensor| -> Result<()> {
        manifest.push_str(&format!(
            "{name},{kind},f64,{}\n",
            shape_string(tensor.shape())
        ));
        sdtn::write_real_tensor(tensor, &dir.join(format!("{name}.sdtn")))
    };
    for (name, tensor) in &store.params {
        write_entry(name, "param", tensor)?;
    }
    for (name, tensor) in &store.buffers {
        write_entry(name, "buffer", tensor)?;
    }
    manifest.push_str(&format!("_rng_seed,meta,u64,{}\n", store.rng_seed));
    let path = dir.join("manifest.csv");
    fs::write(&path, manifest).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<ParamStore> {
    let path = dir.join("manifest.csv");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut store = ParamStore::new(0);
    for (lineno, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::Data(format!(
                "{}: manifest line {} has {} fields",
                path.display(),
                lineno + 1,
                fields.len()
            )));
        }
        let (name, kind) = (fields[0], fields[1]);
        if kind == "meta" {
            if name == "_rng_seed" {
                store.rng_seed = fields[3]
                    .parse()
                    .map_err(|_| Error::Data("bad rng seed in checkpoint".into()))?;
            }
            continue;
        }
        let tensor = sdtn::read_real_tensor(&dir.join(format!("{name}.sdtn")))?;
        let expected = parse_shape(fields[3])?;
        if tensor.shape() != expected {
            return Err(Error::Data(format!(
                "checkpoint tensor {name} has shape {:?}, manifest says {:?}",
                tensor.shape(),
                expected
            )));
        }
        match kind {
            "param" => store.insert_param(name, tensor),
            "buffer" => store.insert_buffer(name, tensor),
            other => {
                return Err(Error::Data(format!(
                    "unknown checkpoint entry kind {other}"
                )))
            }
        }
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut store = ParamStore::new(0);
        store.insert_param("w", RealTensor::filled(&[3], 1.5));
        let mut adam = Adam::new(0.1);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), RealTensor::zeros(&[3]));
        adam.step(&mut store, &grads).unwrap();
        assert_eq!(store.param("w").unwrap().data(), &[1.5, 1.5, 1.5]);
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        // bias-corrected first step with constant unit gradient
        let mut store = ParamStore::new(0);
        store.insert_param("w", RealTensor::scalar(1.0));
        let mut adam = Adam::new(0.1);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), RealTensor::scalar(1.0));
        adam.step(&mut store, &grads).unwrap();
        let got = store.param("w").unwrap().data()[0];
        assert!((got - 0.9).abs() < 1e-6, "got {got}");
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut store = ParamStore::new(0);
        store.insert_param("w", RealTensor::scalar(1.0));
        let mut adam = Adam::new(0.1);
        assert!(adam.step(&mut store, &BTreeMap::new()).is_err());
    }

    #[test]
    fn identical_seeds_give_bit_identical_trajectories() {
        let run = || {
            let mut store = ParamStore::new(7);
            store.insert_param(
                "w",
                crate::nn::init::kaiming_uniform(7, "w", &[4, 4], 16),
            );
            let mut adam = Adam::new(0.01);
            for step in 0..100 {
                let w = store.param("w").unwrap();
                // synthetic deterministic gradient
                let grad = w.map(|v| (v * 3.0 + step as f64 * 0.01).sin());
                let mut grads = BTreeMap::new();
                grads.insert("w".to_string(), grad);
                adam.step(&mut store, &grads).unwrap();
            }
            store.param("w").unwrap().clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = std::env::temp_dir().join("scatterdense_ckpt_test");
        let _ = fs::remove_dir_all(&dir);
        let mut store = ParamStore::new(42);
        store.insert_param("a.weight", crate::nn::init::kaiming_uniform(1, "a", &[2, 2], 4));
        store.add_bn_buffer("a.bn", 2);
        save_checkpoint(&store, &dir).unwrap();
        let loaded = load_checkpoint(&dir).unwrap();
        assert_eq!(loaded.rng_seed, 42);
        assert_eq!(loaded.param("a.weight").unwrap(), store.param("a.weight").unwrap());
        assert_eq!(loaded.buffer("a.bn.stats").unwrap(), store.buffer("a.bn.stats").unwrap());
    }
}
