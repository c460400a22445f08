//! A small convolutional pose regressor over paired coordinate maps.
//!
//! The network consumes two maps of the same scene (source and target) as
//! eight input channels (X, Y, Z, validity mask per map), runs a stack of
//! stride-2 valid convolutions with ReLU, then two fully connected layers
//! down to 7 outputs: a translation head (scaled to millimetres) and a raw
//! 4-vector rotation head interpreted by the selected loss variant.
//!
//! Everything is f64 on the CPU with manual backpropagation; parameters
//! live in one flat vector addressed through [`Layout`], which keeps
//! optimiser state, checkpoints, and finite-difference checks trivial.

mod adam;
mod train;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use train::{
    build_examples, load_checkpoint, predict_transform, register_twice, save_checkpoint,
    train, EpochStats, MapConfig, TrainExample, TrainOutcome, TrainReport,
};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::loss::{evaluate, LossError, LossValue, LossVariant, LossWeights, PosePrediction, PoseTarget};
use crate::synth::derive_seed;

/// Input channels: X, Y, Z, mask for each of the two maps.
pub const INPUT_CHANNELS: usize = 8;

/// Pose outputs: 3 translation + 4 rotation.
pub const OUTPUT_DIM: usize = 7;

/// Translation head unit: raw outputs are centimetre-scale, predictions
/// are reported in millimetres.
pub const TRANSLATION_SCALE_MM: f64 = 100.0;

/// Coordinate channels are multiplied by this before entering the network,
/// keeping millimetre-scale inputs of order one.
pub const COORD_INPUT_SCALE: f64 = 0.01;

const SALT_INIT: u64 = 0x1217;

/// Errors surfaced by the regressor.
#[derive(Debug, Error)]
pub enum RegressorError {
    #[error("expected {expected} values, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("network shrinks to zero spatial size at conv layer {layer}")]
    BadArchitecture { layer: usize },
    #[error("no training examples")]
    EmptyDataset,
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Cloud(#[from] crate::cloud::CloudError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{path}: {msg}")]
    Corrupt { path: String, msg: String },
}

/// One convolution layer: `out_channels` filters of size `kernel` applied
/// with `stride` and no padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// Architecture and optimisation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressorConfig {
    pub input_resolution: usize,
    pub conv_spec: Vec<ConvSpec>,
    pub fc_width: usize,
    pub lr: f64,
    /// Multiplies the learning rate once per epoch; 1.0 disables decay.
    pub lr_decay: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub loss_variant: LossVariant,
}

impl Default for RegressorConfig {
    fn default() -> Self {
        RegressorConfig {
            input_resolution: 32,
            conv_spec: vec![
                ConvSpec { out_channels: 8, kernel: 3, stride: 2 },
                ConvSpec { out_channels: 16, kernel: 3, stride: 2 },
                ConvSpec { out_channels: 32, kernel: 3, stride: 2 },
            ],
            fc_width: 128,
            lr: 0.01,
            lr_decay: 1.0,
            weight_decay: 5e-5,
            batch_size: 32,
            epochs: 30,
            seed: 7,
            loss_variant: LossVariant::QuatL2,
        }
    }
}

impl RegressorConfig {
    /// A deliberately tiny architecture for finite-difference checks.
    pub fn tiny(seed: u64, loss_variant: LossVariant) -> Self {
        RegressorConfig {
            input_resolution: 8,
            conv_spec: vec![
                ConvSpec { out_channels: 4, kernel: 3, stride: 2 },
                ConvSpec { out_channels: 8, kernel: 3, stride: 2 },
            ],
            fc_width: 16,
            lr: 0.01,
            lr_decay: 1.0,
            weight_decay: 5e-5,
            batch_size: 4,
            epochs: 1,
            seed,
            loss_variant,
        }
    }
}

/// Geometry of one conv layer's tensors within the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
struct ConvLayout {
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    in_size: usize,
    out_size: usize,
    w_off: usize,
    b_off: usize,
}

/// Offsets of every named parameter slice in the flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    convs: Vec<ConvLayout>,
    flat_len: usize,
    fc_width: usize,
    fc1_w_off: usize,
    fc1_b_off: usize,
    fc2_w_off: usize,
    fc2_b_off: usize,
    total: usize,
    input_len: usize,
}

impl Layout {
    pub fn new(config: &RegressorConfig) -> Result<Layout, RegressorError> {
        let mut off = 0usize;
        let mut in_channels = INPUT_CHANNELS;
        let mut size = config.input_resolution;
        let mut convs = Vec::with_capacity(config.conv_spec.len());
        for (layer, spec) in config.conv_spec.iter().enumerate() {
            if size < spec.kernel {
                return Err(RegressorError::BadArchitecture { layer });
            }
            let out_size = (size - spec.kernel) / spec.stride + 1;
            if out_size == 0 {
                return Err(RegressorError::BadArchitecture { layer });
            }
            let w_off = off;
            off += spec.out_channels * in_channels * spec.kernel * spec.kernel;
            let b_off = off;
            off += spec.out_channels;
            convs.push(ConvLayout {
                in_channels,
                out_channels: spec.out_channels,
                kernel: spec.kernel,
                stride: spec.stride,
                in_size: size,
                out_size,
                w_off,
                b_off,
            });
            in_channels = spec.out_channels;
            size = out_size;
        }
        let flat_len = in_channels * size * size;
        let fc1_w_off = off;
        off += config.fc_width * flat_len;
        let fc1_b_off = off;
        off += config.fc_width;
        let fc2_w_off = off;
        off += OUTPUT_DIM * config.fc_width;
        let fc2_b_off = off;
        off += OUTPUT_DIM;
        Ok(Layout {
            convs,
            flat_len,
            fc_width: config.fc_width,
            fc1_w_off,
            fc1_b_off,
            fc2_w_off,
            fc2_b_off,
            total: off,
            input_len: INPUT_CHANNELS * config.input_resolution * config.input_resolution,
        })
    }

    /// Total number of parameters.
    pub fn param_count(&self) -> usize {
        self.total
    }

    /// Length of one flattened input tensor.
    pub fn input_len(&self) -> usize {
        self.input_len
    }
}

/// The flat parameter vector of one model instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressorParams {
    pub values: Vec<f64>,
}

/// A configured network: architecture, layout, and loss binding.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    config: RegressorConfig,
    layout: Layout,
}

/// Per-layer buffers captured during a forward pass, consumed by backward.
struct Trace {
    /// act[0] = input; act[l + 1] = ReLU output of conv layer l.
    act: Vec<Vec<f64>>,
    /// Pre-activation of each conv layer.
    pre: Vec<Vec<f64>>,
    fc1_pre: Vec<f64>,
    fc1_act: Vec<f64>,
    out: [f64; OUTPUT_DIM],
}

impl Network {
    pub fn new(config: RegressorConfig) -> Result<Network, RegressorError> {
        let layout = Layout::new(&config)?;
        Ok(Network { config, layout })
    }

    pub fn config(&self) -> &RegressorConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Seeded fan-in-uniform initialisation. Weights draw from
    /// U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases start at zero except the
    /// rotation-head bias, which starts at the identity rotation of the
    /// configured representation so early predictions are near identity
    /// rather than degenerate.
    pub fn init_params(&self) -> RegressorParams {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, SALT_INIT, 0));
        let mut v = vec![0.0f64; self.layout.total];
        for conv in &self.layout.convs {
            let fan_in = (conv.in_channels * conv.kernel * conv.kernel) as f64;
            let bound = (1.0 / fan_in).sqrt();
            let w_len = conv.out_channels * conv.in_channels * conv.kernel * conv.kernel;
            for w in &mut v[conv.w_off..conv.w_off + w_len] {
                *w = rng.gen_range(-bound..bound);
            }
        }
        let bound1 = (1.0 / self.layout.flat_len as f64).sqrt();
        for w in &mut v[self.layout.fc1_w_off..self.layout.fc1_w_off + self.layout.fc_width * self.layout.flat_len] {
            *w = rng.gen_range(-bound1..bound1);
        }
        let bound2 = (1.0 / self.layout.fc_width as f64).sqrt();
        for w in &mut v[self.layout.fc2_w_off..self.layout.fc2_w_off + OUTPUT_DIM * self.layout.fc_width] {
            *w = rng.gen_range(-bound2..bound2);
        }
        let rot_bias = if self.config.loss_variant.uses_quaternion() {
            [1.0, 0.0, 0.0, 0.0]
        } else {
            [0.0, 0.0, 0.0, 1.0]
        };
        for k in 0..4 {
            v[self.layout.fc2_b_off + 3 + k] = rot_bias[k];
        }
        RegressorParams { values: v }
    }

    fn check_shapes(&self, params: &RegressorParams, input: &[f64]) -> Result<(), RegressorError> {
        if params.values.len() != self.layout.total {
            return Err(RegressorError::ShapeMismatch {
                expected: self.layout.total,
                got: params.values.len(),
            });
        }
        if input.len() != self.layout.input_len {
            return Err(RegressorError::ShapeMismatch {
                expected: self.layout.input_len,
                got: input.len(),
            });
        }
        Ok(())
    }

    fn forward_trace(&self, params: &RegressorParams, input: &[f64]) -> Trace {
        let p = &params.values;
        let mut act: Vec<Vec<f64>> = Vec::with_capacity(self.layout.convs.len() + 1);
        let mut pre: Vec<Vec<f64>> = Vec::with_capacity(self.layout.convs.len());
        act.push(input.to_vec());
        for conv in &self.layout.convs {
            let (os, is) = (conv.out_size, conv.in_size);
            let k = conv.kernel;
            let mut y = vec![0.0f64; conv.out_channels * os * os];
            {
                let x = &act[act.len() - 1];
                for o in 0..conv.out_channels {
                    let b = p[conv.b_off + o];
                    for r in 0..os {
                        for c in 0..os {
                            let mut acc = b;
                            let r0 = r * conv.stride;
                            let c0 = c * conv.stride;
                            for i in 0..conv.in_channels {
                                let w_base = conv.w_off + ((o * conv.in_channels + i) * k) * k;
                                let x_base = i * is * is;
                                for dr in 0..k {
                                    let w_row = w_base + dr * k;
                                    let x_row = x_base + (r0 + dr) * is + c0;
                                    for dc in 0..k {
                                        acc += p[w_row + dc] * x[x_row + dc];
                                    }
                                }
                            }
                            y[(o * os + r) * os + c] = acc;
                        }
                    }
                }
            }
            let a: Vec<f64> = y.iter().map(|v| v.max(0.0)).collect();
            pre.push(y);
            act.push(a);
        }

        let flat = &act[act.len() - 1];
        let mut fc1_pre = vec![0.0f64; self.layout.fc_width];
        for i in 0..self.layout.fc_width {
            let mut acc = p[self.layout.fc1_b_off + i];
            let row = self.layout.fc1_w_off + i * self.layout.flat_len;
            for j in 0..self.layout.flat_len {
                acc += p[row + j] * flat[j];
            }
            fc1_pre[i] = acc;
        }
        let fc1_act: Vec<f64> = fc1_pre.iter().map(|v| v.max(0.0)).collect();

        let mut out = [0.0f64; OUTPUT_DIM];
        for o in 0..OUTPUT_DIM {
            let mut acc = p[self.layout.fc2_b_off + o];
            let row = self.layout.fc2_w_off + o * self.layout.fc_width;
            for (i, a) in fc1_act.iter().enumerate() {
                acc += p[row + i] * a;
            }
            out[o] = acc;
        }

        Trace { act, pre, fc1_pre, fc1_act, out }
    }

    /// Runs the network on one flattened 8-channel input.
    pub fn forward(
        &self,
        params: &RegressorParams,
        input: &[f64],
    ) -> Result<PosePrediction, RegressorError> {
        self.check_shapes(params, input)?;
        let trace = self.forward_trace(params, input);
        Ok(prediction_from_out(&trace.out))
    }

    /// Forward plus loss plus exact parameter gradients for one example.
    ///
    /// Returns the loss evaluation and d loss / d params as a flat vector
    /// aligned with the parameter layout.
    pub fn backward(
        &self,
        params: &RegressorParams,
        input: &[f64],
        target: &PoseTarget,
        weights: &LossWeights,
    ) -> Result<(LossValue, Vec<f64>), RegressorError> {
        self.check_shapes(params, input)?;
        let trace = self.forward_trace(params, input);
        let prediction = prediction_from_out(&trace.out);
        let loss = evaluate(self.config.loss_variant, &prediction, target, weights)?;

        // d loss / d raw outputs: the translation head is scaled into mm
        // after the network, so its chain factor appears here.
        let mut d_out = [0.0f64; OUTPUT_DIM];
        for k in 0..3 {
            d_out[k] = loss.grad_t[k] * TRANSLATION_SCALE_MM;
        }
        for k in 0..4 {
            d_out[3 + k] = loss.grad_rot[k];
        }

        let p = &params.values;
        let mut g = vec![0.0f64; self.layout.total];

        // fc2
        let mut d_fc1_act = vec![0.0f64; self.layout.fc_width];
        for o in 0..OUTPUT_DIM {
            g[self.layout.fc2_b_off + o] += d_out[o];
            let row = self.layout.fc2_w_off + o * self.layout.fc_width;
            for i in 0..self.layout.fc_width {
                g[row + i] += d_out[o] * trace.fc1_act[i];
                d_fc1_act[i] += p[row + i] * d_out[o];
            }
        }

        // fc1 through its ReLU
        let flat = &trace.act[trace.act.len() - 1];
        let mut d_flat = vec![0.0f64; self.layout.flat_len];
        for i in 0..self.layout.fc_width {
            if trace.fc1_pre[i] <= 0.0 {
                continue;
            }
            let d = d_fc1_act[i];
            g[self.layout.fc1_b_off + i] += d;
            let row = self.layout.fc1_w_off + i * self.layout.flat_len;
            for j in 0..self.layout.flat_len {
                g[row + j] += d * flat[j];
                d_flat[j] += p[row + j] * d;
            }
        }

        // conv stack, last layer first
        let mut d_act = d_flat;
        for (l, conv) in self.layout.convs.iter().enumerate().rev() {
            let (os, is) = (conv.out_size, conv.in_size);
            let k = conv.kernel;
            let mut d_prev = vec![0.0f64; conv.in_channels * is * is];
            let input_act = &trace.act[l];
            let pre = &trace.pre[l];
            for o in 0..conv.out_channels {
                for r in 0..os {
                    for c in 0..os {
                        let idx = (o * os + r) * os + c;
                        if pre[idx] <= 0.0 {
                            continue;
                        }
                        let d = d_act[idx];
                        if d == 0.0 {
                            continue;
                        }
                        g[conv.b_off + o] += d;
                        let r0 = r * conv.stride;
                        let c0 = c * conv.stride;
                        for i in 0..conv.in_channels {
                            let w_base = conv.w_off + ((o * conv.in_channels + i) * k) * k;
                            let x_base = i * is * is;
                            for dr in 0..k {
                                let w_row = w_base + dr * k;
                                let x_row = x_base + (r0 + dr) * is + c0;
                                for dc in 0..k {
                                    g[w_row + dc] += d * input_act[x_row + dc];
                                    d_prev[x_row + dc] += p[w_row + dc] * d;
                                }
                            }
                        }
                    }
                }
            }
            d_act = d_prev;
        }

        Ok((loss, g))
    }

    /// Central-difference gradient of the loss in every parameter; the
    /// verification oracle for [`Network::backward`].
    pub fn fd_param_gradients(
        &self,
        params: &RegressorParams,
        input: &[f64],
        target: &PoseTarget,
        weights: &LossWeights,
        eps: f64,
    ) -> Result<Vec<f64>, RegressorError> {
        self.check_shapes(params, input)?;
        let mut probe = params.clone();
        let mut g = vec![0.0f64; self.layout.total];
        for i in 0..self.layout.total {
            let orig = probe.values[i];
            probe.values[i] = orig + eps;
            let hi = self.loss_only(&probe, input, target, weights)?;
            probe.values[i] = orig - eps;
            let lo = self.loss_only(&probe, input, target, weights)?;
            probe.values[i] = orig;
            g[i] = (hi - lo) / (2.0 * eps);
        }
        Ok(g)
    }

    fn loss_only(
        &self,
        params: &RegressorParams,
        input: &[f64],
        target: &PoseTarget,
        weights: &LossWeights,
    ) -> Result<f64, RegressorError> {
        let trace = self.forward_trace(params, input);
        let prediction = prediction_from_out(&trace.out);
        Ok(evaluate(self.config.loss_variant, &prediction, target, weights)?.total)
    }

    /// Smallest |pre-activation| across the network for one input; used by
    /// tests to keep finite-difference probes away from ReLU kinks.
    pub fn min_abs_preactivation(&self, params: &RegressorParams, input: &[f64]) -> f64 {
        let trace = self.forward_trace(params, input);
        let mut m = f64::INFINITY;
        for layer in &trace.pre {
            for v in layer {
                m = m.min(v.abs());
            }
        }
        for v in &trace.fc1_pre {
            m = m.min(v.abs());
        }
        m
    }
}

fn prediction_from_out(out: &[f64; OUTPUT_DIM]) -> PosePrediction {
    PosePrediction {
        t: [
            out[0] * TRANSLATION_SCALE_MM,
            out[1] * TRANSLATION_SCALE_MM,
            out[2] * TRANSLATION_SCALE_MM,
        ],
        rot: [out[3], out[4], out[5], out[6]],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::rel_err;
    use crate::pose::{EulerAngles, UnitQuaternion};
    use rand::Rng;

    const FD_EPS: f64 = 1e-5;
    const FD_TOL: f64 = 1e-4;

    fn random_input(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
        (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn random_target(rng: &mut ChaCha8Rng) -> PoseTarget {
        let e = EulerAngles::new(
            rng.gen_range(-40.0..40.0),
            rng.gen_range(-18.0..18.0),
            rng.gen_range(-28.0..28.0),
        );
        PoseTarget {
            t: [
                rng.gen_range(-8.0..8.0),
                rng.gen_range(-8.0..8.0),
                rng.gen_range(-8.0..8.0),
            ],
            q: UnitQuaternion::from_euler(&e),
        }
    }

    #[test]
    fn layout_counts_default_architecture() {
        let net = Network::new(RegressorConfig::default()).unwrap();
        let l = net.layout();
        // 32 -> 15 -> 7 -> 3 spatially; flatten 3*3*32 = 288.
        assert_eq!(l.flat_len, 288);
        let conv1 = 8 * 8 * 9 + 8;
        let conv2 = 16 * 8 * 9 + 16;
        let conv3 = 32 * 16 * 9 + 32;
        let fc1 = 128 * 288 + 128;
        let fc2 = 7 * 128 + 7;
        assert_eq!(l.param_count(), conv1 + conv2 + conv3 + fc1 + fc2);
        assert_eq!(l.input_len(), 8 * 32 * 32);
    }

    #[test]
    fn layout_rejects_vanishing_spatial_size() {
        let mut config = RegressorConfig::tiny(0, LossVariant::QuatL2);
        config.conv_spec.push(ConvSpec { out_channels: 4, kernel: 3, stride: 2 });
        // 8 -> 3 -> 1, then kernel 3 no longer fits.
        assert!(matches!(
            Network::new(config).unwrap_err(),
            RegressorError::BadArchitecture { layer: 2 }
        ));
    }

    #[test]
    fn forward_is_deterministic_and_shaped() {
        let net = Network::new(RegressorConfig::tiny(3, LossVariant::QuatL2)).unwrap();
        let params = net.init_params();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let input = random_input(&mut rng, net.layout().input_len());
        let a = net.forward(&params, &input).unwrap();
        let b = net.forward(&params, &input).unwrap();
        assert_eq!(a, b);
        assert!(a.t.iter().all(|v| v.is_finite()));
        assert!(a.rot.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn init_is_seeded_and_rot_bias_points_at_identity() {
        let net = Network::new(RegressorConfig::tiny(5, LossVariant::QuatL2)).unwrap();
        assert_eq!(net.init_params(), net.init_params());
        let other = Network::new(RegressorConfig::tiny(6, LossVariant::QuatL2)).unwrap();
        assert_ne!(net.init_params(), other.init_params());

        // Quaternion head starts at (1, 0, 0, 0).
        let zero_input = vec![0.0; net.layout().input_len()];
        let pred = net.forward(&net.init_params(), &zero_input).unwrap();
        assert_eq!(pred.rot, [1.0, 0.0, 0.0, 0.0]);

        // Axis-angle head starts at theta 0 about (0, 0, 1).
        let aa = Network::new(RegressorConfig::tiny(5, LossVariant::AxisAngleL2)).unwrap();
        let pred = aa.forward(&aa.init_params(), &zero_input).unwrap();
        assert_eq!(pred.rot, [0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn zero_params_degenerate_quaternion_surfaces_as_error() {
        let net = Network::new(RegressorConfig::tiny(0, LossVariant::QuatL2)).unwrap();
        let params = RegressorParams { values: vec![0.0; net.layout().param_count()] };
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let input = random_input(&mut rng, net.layout().input_len());
        let pred = net.forward(&params, &input).unwrap();
        assert_eq!(pred.t, [0.0; 3]);
        assert_eq!(pred.rot, [0.0; 4]);
        let target = random_target(&mut rng);
        let err = net
            .backward(&params, &input, &target, &LossWeights::default())
            .unwrap_err();
        assert!(matches!(err, RegressorError::Loss(LossError::ZeroQuaternion { .. })));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let net = Network::new(RegressorConfig::tiny(0, LossVariant::QuatL2)).unwrap();
        let params = net.init_params();
        let want_input = net.layout().input_len();
        match net.forward(&params, &[0.0; 3]).unwrap_err() {
            RegressorError::ShapeMismatch { expected, got } => {
                assert_eq!((expected, got), (want_input, 3));
            }
            other => panic!("unexpected error {other:?}"),
        }
        let bad = RegressorParams { values: vec![0.0; 5] };
        let input = vec![0.0; net.layout().input_len()];
        let want_params = net.layout().param_count();
        match net.forward(&bad, &input).unwrap_err() {
            RegressorError::ShapeMismatch { expected, got } => {
                assert_eq!((expected, got), (want_params, 5));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    /// Draws (params, input, target) with margins that keep every ReLU and
    /// loss kink far enough away for trustworthy central differences.
    fn fd_setup(
        variant: LossVariant,
        seed: u64,
    ) -> (Network, RegressorParams, Vec<f64>, PoseTarget) {
        let net = Network::new(RegressorConfig::tiny(seed, variant)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xF00D);
        loop {
            let params = {
                let mut p = net.init_params();
                // Nudge biases so pre-activations spread away from zero.
                for v in &mut p.values {
                    *v += rng.gen_range(-0.05..0.05);
                }
                p
            };
            let input = random_input(&mut rng, net.layout().input_len());
            let target = random_target(&mut rng);
            if net.min_abs_preactivation(&params, &input) < 1e-3 {
                continue;
            }
            let pred = net.forward(&params, &input).unwrap();
            let t_ok = (0..3).all(|k| (target.t[k] - pred.t[k]).abs() > 0.05);
            let raw_norm = pred.rot.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !t_ok || !(0.3..3.0).contains(&raw_norm) {
                continue;
            }
            let rr = crate::loss::rotation_residual_sq(variant, &pred, &target);
            if rr < 5e-3 {
                continue;
            }
            return (net, params, input, target);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        for (i, variant) in [LossVariant::QuatL2, LossVariant::AxisAngleL1].iter().enumerate() {
            let (net, params, input, target) = fd_setup(*variant, 40 + i as u64);
            let w = LossWeights::default();
            let (_, analytic) = net.backward(&params, &input, &target, &w).unwrap();
            let fd = net.fd_param_gradients(&params, &input, &target, &w, FD_EPS).unwrap();
            let mut worst = 0.0f64;
            for k in 0..analytic.len() {
                worst = worst.max(rel_err(analytic[k], fd[k]));
            }
            assert!(worst < FD_TOL, "{variant:?}: worst rel err {worst}");
        }
    }

    #[test]
    fn dead_relu_path_has_zero_gradient() {
        let (net, mut params, input, target) = fd_setup(LossVariant::QuatL2, 60);
        // Kill conv layer 0, output channel 0: zero weights, strongly
        // negative bias. Its pre-activations all land below zero, so no
        // gradient may flow into that channel's parameters.
        let conv = &net.layout().convs[0];
        let w_len = conv.in_channels * conv.kernel * conv.kernel;
        for w in &mut params.values[conv.w_off..conv.w_off + w_len] {
            *w = 0.0;
        }
        params.values[conv.b_off] = -10.0;
        let (_, g) = net
            .backward(&params, &input, &target, &LossWeights::default())
            .unwrap();
        for k in conv.w_off..conv.w_off + w_len {
            assert_eq!(g[k], 0.0);
        }
        assert_eq!(g[conv.b_off], 0.0);
    }

    #[test]
    fn gradient_is_linear_in_rotation_weight() {
        // With the translation residual zeroed, the loss is alpha times
        // the rotation term, so doubling alpha doubles every gradient.
        let (net, params, input, mut target) = fd_setup(LossVariant::QuatL2, 70);
        let pred = net.forward(&params, &input).unwrap();
        target.t = pred.t;
        let (_, g1) = net
            .backward(&params, &input, &target, &LossWeights::constant(500.0))
            .unwrap();
        let (_, g2) = net
            .backward(&params, &input, &target, &LossWeights::constant(1000.0))
            .unwrap();
        for k in 0..g1.len() {
            assert!((g2[k] - 2.0 * g1[k]).abs() <= 1e-9 * g1[k].abs().max(1.0));
        }
    }

    #[test]
    fn backward_loss_agrees_with_forward_loss() {
        let (net, params, input, target) = fd_setup(LossVariant::QuatL2, 80);
        let w = LossWeights::default();
        let (loss, _) = net.backward(&params, &input, &target, &w).unwrap();
        let pred = net.forward(&params, &input).unwrap();
        let direct = evaluate(LossVariant::QuatL2, &pred, &target, &w).unwrap();
        assert_eq!(loss, direct);
    }

    #[test]
    fn gradient_step_reduces_network_loss() {
        let (net, mut params, input, target) = fd_setup(LossVariant::QuatL2, 90);
        let w = LossWeights::default();
        let (before, g) = net.backward(&params, &input, &target, &w).unwrap();
        let gnorm2: f64 = g.iter().map(|v| v * v).sum();
        let step = 1e-4 / gnorm2.sqrt().max(1.0);
        for (pv, gv) in params.values.iter_mut().zip(g.iter()) {
            *pv -= step * gv;
        }
        let (after, _) = net.backward(&params, &input, &target, &w).unwrap();
        assert!(after.total < before.total);
    }
}
