//! The learned half of the network: bottleneck compression, coarse-to-fine
//! phase-informed gating, multiplicative modulation, three-source fusion,
//! and output projection.
//!
//! All learned convolutions use periodic padding, matching the encoder's
//! boundary model, so the full network is shift-equivariant end to end.
//! Forward/backward is single-threaded per model instance; independent
//! instances may run on separate threads with separate stores.

use std::collections::BTreeMap;
use std::rc::Rc;

use crate::encoder::{ScatterOutput, SkipPair, POLAR_EPS};
use crate::error::{Error, Result};
use crate::nn::optim::ParamStore;
use crate::nn::{init, ops, DiffTensor, Tape};
use crate::tensor::RealTensor;

/// What the skip connections carry into the decoder. Channel counts are
/// identical in every mode (two planes per scale), so ablations compare
/// information content, not capacity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SkipMode {
    /// (A, Phi): stabilized magnitude and phase.
    Polar,
    /// (Re, Im) reconstructed from the polar pair.
    Cartesian,
    /// (|W|, 0): magnitude only.
    ModulusOnly,
}

impl std::fmt::Display for SkipMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SkipMode::Polar => write!(f, "polar"),
            SkipMode::Cartesian => write!(f, "cartesian"),
            SkipMode::ModulusOnly => write!(f, "modulus_only"),
        }
    }
}

impl std::str::FromStr for SkipMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "polar" => Ok(SkipMode::Polar),
            "cartesian" => Ok(SkipMode::Cartesian),
            "modulus_only" => Ok(SkipMode::ModulusOnly),
            other => Err(Error::Config(format!(
                "unknown skip_mode {other} (expected polar|cartesian|modulus_only)"
            ))),
        }
    }
}

/// What the projection output is added to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResidualMode {
    /// Predict the correction to the raw input.
    Input,
    /// Predict the correction to the reference-order low-pass x * phi_J.
    /// The intensity base bypasses the normalized decoder pipeline, which
    /// keeps desk-scale training stable, while the learned part carries
    /// only zero-mean detail.
    Lowpass,
    /// Predict the output directly.
    None,
}

impl std::fmt::Display for ResidualMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ResidualMode::Input => write!(f, "input"),
            ResidualMode::Lowpass => write!(f, "lowpass"),
            ResidualMode::None => write!(f, "none"),
        }
    }
}

impl std::str::FromStr for ResidualMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "input" | "true" => Ok(ResidualMode::Input),
            "lowpass" => Ok(ResidualMode::Lowpass),
            "none" | "false" => Ok(ResidualMode::None),
            other => Err(Error::Config(format!(
                "unknown residual mode {other} (expected input|lowpass|none)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateActivation {
    Sigmoid,
    Relu,
    LeakyRelu,
}

impl std::fmt::Display for GateActivation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GateActivation::Sigmoid => write!(f, "sigmoid"),
            GateActivation::Relu => write!(f, "relu"),
            GateActivation::LeakyRelu => write!(f, "leaky_relu"),
        }
    }
}

impl std::str::FromStr for GateActivation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigmoid" => Ok(GateActivation::Sigmoid),
            "relu" => Ok(GateActivation::Relu),
            "leaky_relu" => Ok(GateActivation::LeakyRelu),
            other => Err(Error::Config(format!(
                "unknown gate_activation {other} (expected sigmoid|relu|leaky_relu)"
            ))),
        }
    }
}

/// Architecture description; fully determines the parameter shapes.
#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub c_in: usize,
    pub scales: usize,
    pub orientations: usize,
    pub c_bn: usize,
    pub gate_hidden: usize,
    pub out_channels: usize,
    pub gating: bool,
    pub skip_mode: SkipMode,
    pub gate_activation: GateActivation,
    pub residual: ResidualMode,
}

impl ModelConfig {
    pub fn k_in(&self) -> usize {
        crate::encoder::count_channels(
            self.c_in,
            self.scales,
            self.orientations,
            crate::encoder::SiblingRule::default(),
        )
    }

    /// Channels of one skip plane.
    pub fn skip_channels(&self) -> usize {
        self.c_in * self.orientations
    }
}

/// Allocate and initialize all decoder parameters. Each parameter draws
/// from its own (seed, name) stream, so two configs share bit-identical
/// values for the parameters they have in common. Gate networks exist only
/// when gating is enabled. The scattering encoder itself is fixed and
/// contributes exactly zero learnable parameters.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> ParamStore {
    let mut store = ParamStore::new(seed);
    let skip2 = 2 * cfg.skip_channels();

    store.insert_param(
        "bottleneck.weight",
        init::conv3x3_weight(seed, "bottleneck.weight", cfg.c_bn, cfg.k_in()),
    );
    store.insert_param("bottleneck.bias", init::zeros(&[cfg.c_bn]));

    for level in 0..cfg.scales {
        if cfg.gating {
            let w1 = format!("level{level}.gate.conv1.weight");
            store.insert_param(&w1, init::conv3x3_weight(seed, &w1, cfg.gate_hidden, skip2));
            store.insert_param(
                &format!("level{level}.gate.conv1.bias"),
                init::zeros(&[cfg.gate_hidden]),
            );
            let w2 = format!("level{level}.gate.conv2.weight");
            store.insert_param(&w2, init::conv3x3_weight(seed, &w2, cfg.c_bn, cfg.gate_hidden));
            // open-gate bias: masks start near pass-through and learning
            // closes them where that helps
            store.insert_param(
                &format!("level{level}.gate.conv2.bias"),
                RealTensor::filled(&[cfg.c_bn], 2.0),
            );
        }
        let f1 = format!("level{level}.fuse.conv1.weight");
        store.insert_param(&f1, init::conv3x3_weight(seed, &f1, cfg.c_bn, cfg.c_bn + skip2));
        store.insert_param(
            &format!("level{level}.fuse.conv1.bias"),
            init::zeros(&[cfg.c_bn]),
        );
        store.insert_param(
            &format!("level{level}.fuse.bn1.gamma"),
            init::ones(&[cfg.c_bn]),
        );
        store.insert_param(
            &format!("level{level}.fuse.bn1.beta"),
            init::zeros(&[cfg.c_bn]),
        );
        store.add_bn_buffer(&format!("level{level}.fuse.bn1"), cfg.c_bn);
        let f2 = format!("level{level}.fuse.conv2.weight");
        store.insert_param(&f2, init::conv3x3_weight(seed, &f2, cfg.c_bn, cfg.c_bn));
        store.insert_param(
            &format!("level{level}.fuse.conv2.bias"),
            init::zeros(&[cfg.c_bn]),
        );
        store.insert_param(
            &format!("level{level}.fuse.bn2.gamma"),
            init::ones(&[cfg.c_bn]),
        );
        store.insert_param(
            &format!("level{level}.fuse.bn2.beta"),
            init::zeros(&[cfg.c_bn]),
        );
        store.add_bn_buffer(&format!("level{level}.fuse.bn2"), cfg.c_bn);
    }

    // zero-initialized projection: the residual prediction starts exactly
    // at the input and learning moves it from there
    store.insert_param(
        "proj.weight",
        init::zeros(&[cfg.out_channels, cfg.c_bn, 3, 3]),
    );
    store.insert_param("proj.bias", init::zeros(&[cfg.out_channels]));
    store
}

/// The two skip planes a level feeds to the decoder, per skip mode. The
/// polar pair is invertible (A carries the stabilizer), so the Cartesian
/// and modulus views are recovered exactly.
pub fn skip_planes(pair: &SkipPair, mode: SkipMode) -> (RealTensor, RealTensor) {
    match mode {
        SkipMode::Polar => (pair.amplitude.clone(), pair.phase.clone()),
        SkipMode::Cartesian => {
            let modulus = pair
                .amplitude
                .map(|a| (a * a - POLAR_EPS).max(0.0).sqrt());
            let re = modulus
                .zip(&pair.phase, |m, p| m * p.cos())
                .expect("skip shapes");
            let im = modulus
                .zip(&pair.phase, |m, p| m * p.sin())
                .expect("skip shapes");
            (re, im)
        }
        SkipMode::ModulusOnly => {
            let modulus = pair
                .amplitude
                .map(|a| (a * a - POLAR_EPS).max(0.0).sqrt());
            let zeros = RealTensor::zeros(pair.phase.shape());
            (modulus, zeros)
        }
    }
}

fn conv_from(
    bound: &BTreeMap<String, DiffTensor>,
    prefix: &str,
    x: &DiffTensor,
) -> Result<DiffTensor> {
    let w = bound
        .get(&format!("{prefix}.weight"))
        .ok_or_else(|| Error::Config(format!("missing bound parameter {prefix}.weight")))?;
    let b = bound
        .get(&format!("{prefix}.bias"))
        .ok_or_else(|| Error::Config(format!("missing bound parameter {prefix}.bias")))?;
    ops::conv3x3(x, w, b)
}

fn batchnorm_from(
    store: &mut ParamStore,
    bound: &BTreeMap<String, DiffTensor>,
    prefix: &str,
    x: &DiffTensor,
    training: bool,
) -> Result<DiffTensor> {
    let gamma = bound
        .get(&format!("{prefix}.gamma"))
        .ok_or_else(|| Error::Config(format!("missing bound parameter {prefix}.gamma")))?;
    let beta = bound
        .get(&format!("{prefix}.beta"))
        .ok_or_else(|| Error::Config(format!("missing bound parameter {prefix}.beta")))?;
    let state = store.bn_state(prefix)?;
    ops::batchnorm(x, gamma, beta, state, training)
}

/// Bottleneck: a single 3x3 stride-1 convolution from K_in to C_bn
/// channels, preserving spatial extents.
pub fn bottleneck(
    bound: &BTreeMap<String, DiffTensor>,
    features: &DiffTensor,
) -> Result<DiffTensor> {
    conv_from(bound, "bottleneck", features)
}

/// Gate for one level: two 3x3 convolutions over the concatenated skip
/// planes, hidden relu, final nonlinearity (sigmoid by default, giving a
/// mask in (0,1) with C_bn channels).
pub fn gate_level(
    bound: &BTreeMap<String, DiffTensor>,
    level: usize,
    skip_a: &DiffTensor,
    skip_b: &DiffTensor,
    activation: GateActivation,
) -> Result<DiffTensor> {
    let input = ops::concat_channels(&[skip_a, skip_b])?;
    let hidden = ops::relu(&conv_from(bound, &format!("level{level}.gate.conv1"), &input)?);
    let raw = conv_from(bound, &format!("level{level}.gate.conv2"), &hidden)?;
    Ok(match activation {
        GateActivation::Sigmoid => ops::sigmoid(&raw),
        GateActivation::Relu => ops::relu(&raw),
        GateActivation::LeakyRelu => ops::leaky_relu(&raw, 0.01),
    })
}

/// One decoder level: upsample the incoming features to this level's
/// extents, modulate them with the gate, then fuse with both skip planes
/// through Conv-BN-ReLU-Conv-BN-ReLU.
#[allow(clippy::too_many_arguments)]
pub fn decode_level(
    store: &mut ParamStore,
    bound: &BTreeMap<String, DiffTensor>,
    level: usize,
    u_prev: &DiffTensor,
    skip_a: &DiffTensor,
    skip_b: &DiffTensor,
    cfg: &ModelConfig,
    training: bool,
    gates_out: Option<&mut Vec<Rc<RealTensor>>>,
) -> Result<DiffTensor> {
    let shape = skip_a.shape();
    let (h, w) = (shape[2], shape[3]);
    // identity at stride-1 extents; kept in the graph so the architecture
    // supports multi-resolution level inputs
    let upsampled = ops::bilinear_upsample(u_prev, h, w)?;
    let modulated = if cfg.gating {
        let gate = gate_level(bound, level, skip_a, skip_b, cfg.gate_activation)?;
        if let Some(out) = gates_out {
            out.push(gate.value());
        }
        ops::mul(&upsampled, &gate)?
    } else {
        upsampled
    };
    let fuse_in = ops::concat_channels(&[&modulated, skip_a, skip_b])?;
    let prefix = format!("level{level}.fuse");
    let c1 = conv_from(bound, &format!("{prefix}.conv1"), &fuse_in)?;
    let b1 = batchnorm_from(store, bound, &format!("{prefix}.bn1"), &c1, training)?;
    let r1 = ops::relu(&b1);
    let c2 = conv_from(bound, &format!("{prefix}.conv2"), &r1)?;
    let b2 = batchnorm_from(store, bound, &format!("{prefix}.bn2"), &c2, training)?;
    Ok(ops::relu(&b2))
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOpts {
    /// Batch statistics + running-stat updates (true) vs running stats.
    pub training: bool,
    /// Record gradients for the parameters (false binds them as constants).
    pub trainable: bool,
    /// Capture per-level gate masks (coarse to fine order).
    pub collect_gates: bool,
    /// Capture a (layer, shape) trace of the graph.
    pub collect_trace: bool,
}

impl Default for ForwardOpts {
    fn default() -> Self {
        ForwardOpts {
            training: false,
            trainable: false,
            collect_gates: false,
            collect_trace: false,
        }
    }
}

pub struct ForwardOutput {
    pub prediction: DiffTensor,
    /// Parameter bindings (name -> tape node), for gradient collection.
    pub bound: BTreeMap<String, DiffTensor>,
    /// Gate masks per processed level, coarse to fine.
    pub gates: Vec<Rc<RealTensor>>,
    /// (layer, output shape) trace when requested.
    pub trace: Vec<(String, Vec<usize>)>,
}

/// Full decoder pass over precomputed encoder outputs.
///
/// Levels are processed coarse to fine (level = scales-1 down to 0); the
/// coarsest level consumes the bottleneck output, finer levels consume the
/// previous level's output. With `residual`, the input is added to the
/// projection (standard for denoising); prediction shape is
/// (B, out_channels, H, W).
pub fn forward(
    tape: &Tape,
    store: &mut ParamStore,
    x: &RealTensor,
    encoded: &ScatterOutput,
    cfg: &ModelConfig,
    opts: ForwardOpts,
) -> Result<ForwardOutput> {
    let (b, k, h, w) = encoded.s_agg.dims4()?;
    if k != cfg.k_in() {
        return Err(Error::Config(format!(
            "encoder produced {k} channels but the model expects {}",
            cfg.k_in()
        )));
    }
    if encoded.skips.len() != cfg.scales {
        return Err(Error::Config(format!(
            "encoder produced {} skip scales but the model expects {}",
            encoded.skips.len(),
            cfg.scales
        )));
    }
    let x4 = match x.rank() {
        2 => x.clone().reshape(&[1, 1, h, w])?,
        4 => x.clone(),
        _ => {
            return Err(Error::Shape(format!(
                "forward input must be (H, W) or (B, C, H, W), got {:?}",
                x.shape()
            )))
        }
    };
    if x4.shape()[0] != b || x4.shape()[2] != h || x4.shape()[3] != w {
        return Err(Error::Shape(format!(
            "input {:?} does not match encoder output (B={b}, H={h}, W={w})",
            x4.shape()
        )));
    }

    let bound = store.bind(tape, opts.trainable);
    let mut trace: Vec<(String, Vec<usize>)> = Vec::new();
    let mut gates: Vec<Rc<RealTensor>> = Vec::new();

    let features = tape.constant(encoded.s_agg.clone());
    let mut u = bottleneck(&bound, &features)?;
    if opts.collect_trace {
        trace.push(("bottleneck".into(), u.shape()));
    }

    for level in (0..cfg.scales).rev() {
        let (plane_a, plane_b) = skip_planes(&encoded.skips[level], cfg.skip_mode);
        let skip_a = tape.constant(plane_a);
        let skip_b = tape.constant(plane_b);
        u = decode_level(
            store,
            &bound,
            level,
            &u,
            &skip_a,
            &skip_b,
            cfg,
            opts.training,
            if opts.collect_gates {
                Some(&mut gates)
            } else {
                None
            },
        )?;
        if opts.collect_trace {
            trace.push((format!("level{level}"), u.shape()));
        }
    }

    let projected = conv_from(&bound, "proj", &u)?;
    let prediction = match cfg.residual {
        ResidualMode::Input => {
            if x4.shape()[1] != cfg.out_channels {
                return Err(Error::Config(format!(
                    "residual prediction needs input channels {} == output channels {}",
                    x4.shape()[1],
                    cfg.out_channels
                )));
            }
            let x_node = tape.constant(x4);
            ops::add(&x_node, &projected)?
        }
        ResidualMode::Lowpass => {
            if encoded.s0.shape()[1] != cfg.out_channels {
                return Err(Error::Config(format!(
                    "low-pass residual needs input channels {} == output channels {}",
                    encoded.s0.shape()[1],
                    cfg.out_channels
                )));
            }
            let base = tape.constant(encoded.s0.clone());
            ops::add(&base, &projected)?
        }
        ResidualMode::None => projected,
    };
    if opts.collect_trace {
        trace.push(("prediction".into(), prediction.shape()));
    }

    Ok(ForwardOutput {
        prediction,
        bound,
        gates,
        trace,
    })
}

/// Mean over channels of the spatial variance of a gate mask; the
/// measurement behind "gates converge to spatially-constant masks".
pub fn gate_spatial_variance(gate: &RealTensor) -> f64 {
    let (b, c, h, w) = gate.dims4().expect("gate mask is rank 4");
    let plane = h * w;
    let mut total = 0.0;
    for p in 0..b * c {
        let slice = &gate.data()[p * plane..(p + 1) * plane];
        let mean = slice.iter().sum::<f64>() / plane as f64;
        let var = slice.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / plane as f64;
        total += var;
    }
    total / (b * c) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{scatter, EncoderMode};
    use crate::filterbank::FilterBank;
    use crate::rng::seeded_rng;
    use rand::Rng;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            c_in: 1,
            scales: 2,
            orientations: 4,
            c_bn: 6,
            gate_hidden: 5,
            out_channels: 1,
            gating: true,
            skip_mode: SkipMode::Polar,
            gate_activation: GateActivation::Sigmoid,
            residual: ResidualMode::Lowpass,
        }
    }

    fn random_image(n: usize, seed: u64) -> RealTensor {
        let mut rng = seeded_rng(seed, "decoder-test");
        RealTensor::from_vec(&[n, n], (0..n * n).map(|_| rng.gen_range(0.0..1.0)).collect())
            .unwrap()
    }

    fn encode(n: usize, seed: u64, cfg: &ModelConfig) -> (RealTensor, ScatterOutput) {
        let bank = FilterBank::build(cfg.scales, cfg.orientations, 0.5, n, n).unwrap();
        let x = random_image(n, seed);
        let enc = scatter(&x, &bank, EncoderMode::Stride1).unwrap();
        (x, enc)
    }

    #[test]
    fn prediction_shape_matches_input() {
        let cfg = ModelConfig {
            scales: 3,
            orientations: 8,
            ..small_cfg()
        };
        let (x, enc) = encode(32, 1, &cfg);
        let mut store = init_params(&cfg, 0);
        let tape = Tape::new();
        let out = forward(
            &tape,
            &mut store,
            &x,
            &enc,
            &cfg,
            ForwardOpts {
                training: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(out.prediction.shape(), vec![1, 1, 32, 32]);
    }

    #[test]
    fn sigmoid_gates_stay_strictly_inside_unit_interval() {
        let cfg = small_cfg();
        let (x, enc) = encode(16, 2, &cfg);
        let mut store = init_params(&cfg, 3);
        let tape = Tape::new();
        let out = forward(
            &tape,
            &mut store,
            &x,
            &enc,
            &cfg,
            ForwardOpts {
                training: true,
                collect_gates: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(out.gates.len(), 2);
        for gate in &out.gates {
            assert!(gate.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn zero_gate_net_yields_half_gates() {
        let cfg = small_cfg();
        let (x, enc) = encode(16, 4, &cfg);
        let mut store = init_params(&cfg, 5);
        for level in 0..cfg.scales {
            for layer in ["conv1", "conv2"] {
                let name = format!("level{level}.gate.{layer}.weight");
                let shape = store.param(&name).unwrap().shape().to_vec();
                *store.param_mut(&name).unwrap() = RealTensor::zeros(&shape);
            }
        }
        let tape = Tape::new();
        let out = forward(
            &tape,
            &mut store,
            &x,
            &enc,
            &cfg,
            ForwardOpts {
                training: true,
                collect_gates: true,
                ..Default::default()
            },
        )
        .unwrap();
        for gate in &out.gates {
            assert!(gate.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
        }
    }

    #[test]
    fn layer_shapes_are_identical_across_skip_modes() {
        let cfg = small_cfg();
        let (x, enc) = encode(16, 6, &cfg);
        let mut traces = Vec::new();
        for mode in [SkipMode::Polar, SkipMode::Cartesian, SkipMode::ModulusOnly] {
            let cfg = ModelConfig {
                skip_mode: mode,
                ..small_cfg()
            };
            let mut store = init_params(&cfg, 7);
            let tape = Tape::new();
            let out = forward(
                &tape,
                &mut store,
                &x,
                &enc,
                &cfg,
                ForwardOpts {
                    training: true,
                    collect_trace: true,
                    ..Default::default()
                },
            )
            .unwrap();
            traces.push(out.trace);
        }
        assert_eq!(traces[0], traces[1]);
        assert_eq!(traces[0], traces[2]);
    }

    #[test]
    fn gating_off_matches_saturated_gate() {
        // gating off == G identically 1; a gate whose final bias is hugely
        // positive saturates the sigmoid to 1 and the common parameters are
        // initialized identically, so the outputs coincide
        let (x, enc) = encode(16, 8, &small_cfg());
        let cfg_off = ModelConfig {
            gating: false,
            ..small_cfg()
        };
        let mut store_off = init_params(&cfg_off, 11);
        let tape_off = Tape::new();
        let out_off = forward(
            &tape_off,
            &mut store_off,
            &x,
            &enc,
            &cfg_off,
            ForwardOpts {
                training: true,
                ..Default::default()
            },
        )
        .unwrap();

        let cfg_on = small_cfg();
        let mut store_on = init_params(&cfg_on, 11);
        for level in 0..cfg_on.scales {
            let name = format!("level{level}.gate.conv2.bias");
            let c = store_on.param(&name).unwrap().len();
            *store_on.param_mut(&name).unwrap() = RealTensor::filled(&[c], 50.0);
        }
        let tape_on = Tape::new();
        let out_on = forward(
            &tape_on,
            &mut store_on,
            &x,
            &enc,
            &cfg_on,
            ForwardOpts {
                training: true,
                ..Default::default()
            },
        )
        .unwrap();

        let diff = out_on
            .prediction
            .value()
            .sub(&out_off.prediction.value())
            .unwrap()
            .max_abs();
        assert!(diff < 1e-6, "gating-off vs saturated gate differ by {diff:e}");
    }

    #[test]
    fn saturated_low_gate_blocks_the_bottleneck_branch() {
        // G ~ 0 annihilates the upsampled features: two very different
        // bottleneck inputs produce the same output
        let cfg = small_cfg();
        let (x, enc) = encode(16, 9, &cfg);
        let mut predictions = Vec::new();
        for bump in [0.0, 10.0] {
            let mut store = init_params(&cfg, 13);
            for level in 0..cfg.scales {
                let name = format!("level{level}.gate.conv2.bias");
                let c = store.param(&name).unwrap().len();
                *store.param_mut(&name).unwrap() = RealTensor::filled(&[c], -60.0);
            }
            let b = store.param("bottleneck.bias").unwrap().len();
            *store.param_mut("bottleneck.bias").unwrap() = RealTensor::filled(&[b], bump);
            let tape = Tape::new();
            let out = forward(
                &tape,
                &mut store,
                &x,
                &enc,
                &cfg,
                ForwardOpts {
                    training: true,
                    ..Default::default()
                },
            )
            .unwrap();
            predictions.push((*out.prediction.value()).clone());
        }
        let diff = predictions[0].sub(&predictions[1]).unwrap().max_abs();
        assert!(diff < 1e-9, "blocked bottleneck still leaks: {diff:e}");
    }

    #[test]
    fn bottleneck_zero_input_zero_bias_gives_zero() {
        let cfg = small_cfg();
        let store = init_params(&cfg, 15);
        let tape = Tape::new();
        let bound = store.bind(&tape, false);
        let zero = tape.constant(RealTensor::zeros(&[1, cfg.k_in(), 8, 8]));
        let z = bottleneck(&bound, &zero).unwrap();
        assert_eq!(z.value().max_abs(), 0.0);
        assert_eq!(z.value().shape(), &[1, cfg.c_bn, 8, 8]);
    }

    #[test]
    fn untrained_network_is_shift_equivariant() {
        let cfg = ModelConfig {
            scales: 2,
            orientations: 4,
            ..small_cfg()
        };
        let n = 16;
        let bank = FilterBank::build(cfg.scales, cfg.orientations, 0.5, n, n).unwrap();
        let x = random_image(n, 10);
        let (dy, dx) = (5i64, -3i64);
        let mut store = init_params(&cfg, 17);
        let run = |store: &mut ParamStore, img: &RealTensor| -> RealTensor {
            let enc = scatter(img, &bank, EncoderMode::Stride1).unwrap();
            let tape = Tape::new();
            let out = forward(
                &tape,
                store,
                img,
                &enc,
                &cfg,
                ForwardOpts {
                    training: true,
                    ..Default::default()
                },
            )
            .unwrap();
            (*out.prediction.value()).clone()
        };
        let shifted_then_run = run(&mut store, &x.circular_shift(dy, dx));
        let run_then_shifted = run(&mut store, &x).circular_shift(dy, dx);
        let diff = shifted_then_run.sub(&run_then_shifted).unwrap().max_abs();
        assert!(diff < 1e-6, "end-to-end equivariance error {diff:e}");
    }

    #[test]
    fn gradient_reaches_gate_parameters() {
        use crate::nn::gradcheck::{max_rel_error, FD_STEP};
        let cfg = ModelConfig {
            scales: 1,
            orientations: 4,
            c_bn: 4,
            gate_hidden: 3,
            ..small_cfg()
        };
        let n = 8;
        let bank = FilterBank::build(cfg.scales, cfg.orientations, 0.5, n, n).unwrap();
        let x = random_image(n, 11);
        let enc = scatter(&x, &bank, EncoderMode::Stride1).unwrap();
        let target = random_image(n, 12).reshape(&[1, 1, n, n]).unwrap();
        let name = "level0.gate.conv1.weight";

        let loss_for = |store: &mut ParamStore| -> (f64, Option<RealTensor>) {
            let tape = Tape::new();
            let out = forward(
                &tape,
                store,
                &x,
                &enc,
                &cfg,
                ForwardOpts {
                    training: true,
                    trainable: true,
                    ..Default::default()
                },
            )
            .unwrap();
            let t = tape.constant(target.clone());
            let d = ops::sub(&out.prediction, &t).unwrap();
            let sq = ops::mul(&d, &d).unwrap();
            let loss = ops::mean_all(&sq).unwrap();
            let grads = tape.backward(&loss).unwrap();
            let g = grads.get(&out.bound[name]).cloned();
            (loss.scalar_value().unwrap(), g)
        };

        let mut store = init_params(&cfg, 19);
        let base = store.param(name).unwrap().clone();
        let (_, analytic) = loss_for(&mut store);
        let analytic = analytic.expect("gate weight received no gradient");

        let mut loss_at = |w: &RealTensor| -> f64 {
            let mut store = init_params(&cfg, 19);
            *store.param_mut(name).unwrap() = w.clone();
            loss_for(&mut store).0
        };
        let points: Vec<usize> = vec![0, 7, 19, 31];
        let err = max_rel_error(&mut loss_at, &base, &analytic, &points, FD_STEP);
        assert!(err < 1e-4, "gate weight gradient error {err:e}");
    }

    #[test]
    fn parameter_count_is_reported_and_gateless_models_are_smaller() {
        let cfg = small_cfg();
        let with_gates = init_params(&cfg, 0).parameter_count();
        let without = init_params(
            &ModelConfig {
                gating: false,
                ..small_cfg()
            },
            0,
        )
        .parameter_count();
        assert!(with_gates > without);
        assert!(without > 0);
    }
}
