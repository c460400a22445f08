//! Example construction, the training loop, sequential registration, and
//! checkpoint files for the pose regressor.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cloud::{rasterize, PointCloud};
use crate::loss::{evaluate, LossWeights, PoseTarget};
use crate::pose::{
    apply_transform, rotation_error_deg, translation_error_mm, RigidTransform, UnitQuaternion,
};
use crate::synth::{derive_seed, split_identities, PairSet, PoseRanges};

use super::{
    adam_step, AdamConfig, AdamState, Network, RegressorConfig, RegressorError, RegressorParams,
    COORD_INPUT_SCALE, INPUT_CHANNELS,
};

const SALT_SHUFFLE: u64 = 0xE90C;
const SALT_RESIDUAL: u64 = 0xD17A;

/// How clouds become network inputs: project at a fine resolution, then
/// block-average down to the network's input resolution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapConfig {
    pub raster_resolution: usize,
    pub scale_mm_per_px: f64,
}

impl Default for MapConfig {
    fn default() -> Self {
        MapConfig {
            raster_resolution: crate::cloud::DEFAULT_MAP_RESOLUTION,
            scale_mm_per_px: crate::cloud::DEFAULT_MAP_SCALE_MM,
        }
    }
}

impl MapConfig {
    /// Rasterises one cloud and flattens it to four channels at the target
    /// resolution: X, Y, Z scaled to order one, then the validity mask.
    fn cloud_channels(
        &self,
        cloud: &PointCloud,
        input_resolution: usize,
    ) -> Result<Vec<f64>, RegressorError> {
        let fine = rasterize(cloud, self.raster_resolution, self.scale_mm_per_px)
            .map_err(RegressorError::Cloud)?;
        let factor = (self.raster_resolution / input_resolution.max(1)).max(1);
        let map = if factor == 1 {
            fine
        } else {
            fine.downsample(factor).map_err(RegressorError::Cloud)?
        };
        if map.resolution() != input_resolution {
            return Err(RegressorError::ShapeMismatch {
                expected: input_resolution,
                got: map.resolution(),
            });
        }
        let n = input_resolution * input_resolution;
        let mut out = Vec::with_capacity(4 * n);
        for ch in [map.x_channel(), map.y_channel(), map.z_channel()] {
            out.extend(ch.iter().map(|v| v * COORD_INPUT_SCALE));
        }
        out.extend(map.mask().iter().map(|m| if *m { 1.0 } else { 0.0 }));
        Ok(out)
    }

    /// Builds the 8-channel input for one (source, target) cloud pair.
    pub fn build_input(
        &self,
        source: &PointCloud,
        target: &PointCloud,
        input_resolution: usize,
    ) -> Result<Vec<f64>, RegressorError> {
        let mut input = self.cloud_channels(source, input_resolution)?;
        input.extend(self.cloud_channels(target, input_resolution)?);
        debug_assert_eq!(input.len(), INPUT_CHANNELS * input_resolution * input_resolution);
        Ok(input)
    }
}

/// One supervised example: flattened input, pose target, identity label
/// for leakage-free splits.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub input: Vec<f64>,
    pub target: PoseTarget,
    pub identity: String,
}

/// Converts every registration pair of a set into a training example.
pub fn build_examples(
    set: &PairSet,
    map: &MapConfig,
    input_resolution: usize,
) -> Result<Vec<TrainExample>, RegressorError> {
    let mut out = Vec::with_capacity(set.pairs.len());
    for pair in &set.pairs {
        out.push(TrainExample {
            input: map.build_input(&pair.source, &pair.target, input_resolution)?,
            target: PoseTarget::from_transform(&pair.gt),
            identity: pair.source.id.clone().unwrap_or_default(),
        });
    }
    Ok(out)
}

/// Second-pass training examples: each pair's source is repositioned to sit
/// a small residual pose away from the target while keeping the sampling
/// pattern of its original pose, and that residual becomes the label.
///
/// Sequential registration feeds the network clouds it has already moved
/// once, so their point density no longer agrees with their position. A
/// model trained only on raw pairs never sees that disagreement and
/// overshoots near alignment; a slice of these examples in the training mix
/// closes the gap. The residual for pair `i` is drawn from `residual` with
/// a generator keyed by `seed` and `i` only, so the output is independent
/// of how the set was produced.
pub fn build_refinement_examples(
    set: &PairSet,
    map: &MapConfig,
    input_resolution: usize,
    residual: &PoseRanges,
    seed: u64,
) -> Result<Vec<TrainExample>, RegressorError> {
    let mut out = Vec::with_capacity(set.pairs.len());
    for (i, pair) in set.pairs.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SALT_RESIDUAL, i as u64));
        let (euler, t) = residual.sample(&mut rng);
        let delta = RigidTransform { t, q: UnitQuaternion::from_euler(&euler) };
        // delta maps the repositioned source onto the target: repositioning
        // by delta^-1 o gt and then applying delta lands on gt(source).
        let reposition = delta.inverse().compose(&pair.gt);
        let moved = apply_transform(&reposition, &pair.source);
        out.push(TrainExample {
            input: map.build_input(&moved, &pair.target, input_resolution)?,
            target: PoseTarget::from_transform(&delta),
            identity: pair.source.id.clone().unwrap_or_default(),
        });
    }
    Ok(out)
}

/// Post-epoch snapshot: running training loss and held-out metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_rot_deg: f64,
    pub val_trans_mm: f64,
}

/// The full training record. Contains only values that are a pure function
/// of the configuration and the examples, so identical runs produce
/// identical reports; wall time travels separately in [`TrainOutcome`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: RegressorConfig,
    pub train_examples: usize,
    pub val_examples: usize,
    pub epochs: Vec<EpochStats>,
}

impl TrainReport {
    /// Renders the per-epoch table as CSV with full-precision floats, so a
    /// reader parsing the text recovers the exact values.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,val_rot_deg,val_trans_mm\n");
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                e.epoch, e.train_loss, e.val_loss, e.val_rot_deg, e.val_trans_mm
            ));
        }
        s
    }
}

/// Everything `train` produces: the fitted parameters, the deterministic
/// report, and the measured wall time for console display.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: RegressorParams,
    pub report: TrainReport,
    pub wall_seconds: f64,
}

fn mean(sum: f64, count: usize) -> f64 {
    if count == 0 { 0.0 } else { sum / count as f64 }
}

/// Fits a network to the examples.
///
/// Examples are split about 90/10 into train and validation by identity
/// label, never by row, so no identity contributes to both sides. Batches
/// are reshuffled every epoch from the config seed; the optimiser is Adam
/// with decoupled weight decay, with the learning rate multiplied by
/// `lr_decay` each epoch. The loss weight schedule is applied per example.
pub fn train(
    config: &RegressorConfig,
    examples: &[TrainExample],
) -> Result<TrainOutcome, RegressorError> {
    if examples.is_empty() {
        return Err(RegressorError::EmptyDataset);
    }
    let start = Instant::now();
    let net = Network::new(config.clone())?;
    let weights = LossWeights::default();

    let labels: Vec<String> = examples.iter().map(|e| e.identity.clone()).collect();
    let (_, val_ids) = split_identities(&labels, config.seed);
    let mut train_idx: Vec<usize> = Vec::new();
    let mut val_idx: Vec<usize> = Vec::new();
    for (i, e) in examples.iter().enumerate() {
        if val_ids.binary_search(&e.identity).is_ok() {
            val_idx.push(i);
        } else {
            train_idx.push(i);
        }
    }
    if train_idx.is_empty() {
        std::mem::swap(&mut train_idx, &mut val_idx);
    }
    // With a single identity there is nothing to hold out; metrics then
    // fall back to the training rows rather than an empty set.
    let metric_idx: &[usize] = if val_idx.is_empty() { &train_idx } else { &val_idx };

    let mut params = net.init_params();
    let mut state = AdamState::new(params.values.len());
    let adam = AdamConfig::default();
    let batch = config.batch_size.max(1);
    let mut epochs = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let lr = config.lr * config.lr_decay.powi(epoch as i32);
        let mut order = train_idx.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, SALT_SHUFFLE, epoch as u64));
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut grad = vec![0.0f64; params.values.len()];
        for chunk in order.chunks(batch) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for &i in chunk {
                let e = &examples[i];
                let (loss, g) = net.backward(&params, &e.input, &e.target, &weights)?;
                loss_sum += loss.total;
                for (acc, v) in grad.iter_mut().zip(g.iter()) {
                    *acc += v;
                }
            }
            let inv = 1.0 / chunk.len() as f64;
            grad.iter_mut().for_each(|g| *g *= inv);
            adam_step(&mut params.values, &grad, &mut state, &adam, lr, config.weight_decay);
        }

        let mut val_loss = 0.0;
        let mut val_rot = 0.0;
        let mut val_trans = 0.0;
        for &i in metric_idx {
            let e = &examples[i];
            let pred = net.forward(&params, &e.input)?;
            val_loss += evaluate(config.loss_variant, &pred, &e.target, &weights)?.total;
            let tf = pred.to_transform(config.loss_variant);
            val_rot += rotation_error_deg(&e.target.q, &tf.q);
            val_trans += translation_error_mm(&e.target.t, &tf.t);
        }
        epochs.push(EpochStats {
            epoch,
            train_loss: mean(loss_sum, order.len()),
            val_loss: mean(val_loss, metric_idx.len()),
            val_rot_deg: mean(val_rot, metric_idx.len()),
            val_trans_mm: mean(val_trans, metric_idx.len()),
        });
    }

    Ok(TrainOutcome {
        params,
        report: TrainReport {
            config: config.clone(),
            train_examples: train_idx.len(),
            val_examples: val_idx.len(),
            epochs,
        },
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Registers source onto target in one shot: rasterise both, run the
/// network, interpret the outputs under the configured rotation form.
pub fn predict_transform(
    net: &Network,
    params: &RegressorParams,
    map: &MapConfig,
    source: &PointCloud,
    target: &PointCloud,
) -> Result<RigidTransform, RegressorError> {
    let input = map.build_input(source, target, net.config().input_resolution)?;
    let pred = net.forward(params, &input)?;
    Ok(pred.to_transform(net.config().loss_variant))
}

/// Two-pass registration: predict, move the source by the prediction,
/// re-rasterise, predict the remaining motion, and return exactly the
/// composition `second o first`.
pub fn register_twice(
    net: &Network,
    params: &RegressorParams,
    map: &MapConfig,
    source: &PointCloud,
    target: &PointCloud,
) -> Result<RigidTransform, RegressorError> {
    let first = predict_transform(net, params, map, source, target)?;
    let moved = apply_transform(&first, source);
    let second = predict_transform(net, params, map, &moved, target)?;
    Ok(second.compose(&first))
}

/// First bytes of a checkpoint file: one JSON line describing the payload.
#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    config: RegressorConfig,
    epoch: usize,
    param_count: usize,
}

/// Writes a checkpoint: a one-line JSON header (config, training seed via
/// the config, epoch, parameter count), a newline, then the parameters as
/// consecutive little-endian f64 bytes. The binary payload keeps reloads
/// bit-exact.
pub fn save_checkpoint(
    path: &Path,
    config: &RegressorConfig,
    epoch: usize,
    params: &RegressorParams,
) -> Result<(), RegressorError> {
    let header = CheckpointHeader {
        config: config.clone(),
        epoch,
        param_count: params.values.len(),
    };
    let mut bytes = serde_json::to_vec(&header).map_err(|e| RegressorError::Corrupt {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    bytes.push(b'\n');
    bytes.reserve(params.values.len() * 8);
    for v in &params.values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`], validating the header
/// against the payload length and the architecture's parameter count.
pub fn load_checkpoint(
    path: &Path,
) -> Result<(RegressorConfig, usize, RegressorParams), RegressorError> {
    let bytes = std::fs::read(path)?;
    let corrupt = |msg: &str| RegressorError::Corrupt {
        path: path.display().to_string(),
        msg: msg.to_string(),
    };
    let nl = bytes
        .iter()
        .position(|b| *b == b'\n')
        .ok_or_else(|| corrupt("missing header line"))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| corrupt(&format!("bad header: {e}")))?;
    let payload = &bytes[nl + 1..];
    if payload.len() != header.param_count * 8 {
        return Err(corrupt(&format!(
            "payload holds {} bytes, header promises {} parameters",
            payload.len(),
            header.param_count
        )));
    }
    let expected = Network::new(header.config.clone())?.layout().param_count();
    if header.param_count != expected {
        return Err(corrupt(&format!(
            "architecture needs {} parameters, header carries {}",
            expected, header.param_count
        )));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunks_exact yields 8 bytes")))
        .collect();
    Ok((header.config, header.epoch, RegressorParams { values }))
}
