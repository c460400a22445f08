//! On-disk layout for generated sequences and registration pair sets.
//!
//! A sequence lives in one directory:
//!
//! ```text
//! seq_dir/
//!   frame_0.ply .. frame_5.ply
//!   gt.json      reference index plus the six frame-to-standard motions
//!   meta.json    generating seed and identity label
//! ```
//!
//! A pair set lives in one directory with a `clouds/` subdirectory holding
//! every endpoint as PLY, a `pairs.jsonl` with one JSON object per line
//! pointing at the two files and carrying the ground-truth motion, and a
//! `meta.json` with the seed and regime. All paths inside `pairs.jsonl`
//! are relative to the set directory, so the whole directory relocates
//! freely.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{read_ply, write_ply, IoError};
use crate::pose::RigidTransform;
use crate::synth::{FrameSequence, PairRegime, PairSet, RegistrationPair, FRAMES_PER_SEQUENCE};

/// Errors surfaced by dataset loading and saving.
#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Cloud(#[from] IoError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{path}: {msg}")]
    Malformed { path: String, msg: String },
}

impl DatasetError {
    fn malformed(path: &Path, msg: impl Into<String>) -> Self {
        DatasetError::Malformed {
            path: path.display().to_string(),
            msg: msg.into(),
        }
    }
}

/// Sequence provenance persisted alongside the frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceMeta {
    pub seed: u64,
    pub identity: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct SequenceGt {
    reference_index: usize,
    gt_to_standard: Vec<RigidTransform>,
}

/// Writes one sequence into `dir`, creating it if needed.
pub fn save_sequence(dir: &Path, seq: &FrameSequence, seed: u64) -> Result<(), DatasetError> {
    fs::create_dir_all(dir)?;
    for (i, frame) in seq.frames.iter().enumerate() {
        write_ply(&dir.join(format!("frame_{i}.ply")), frame)?;
    }
    let gt = SequenceGt {
        reference_index: seq.reference_index,
        gt_to_standard: seq.gt_to_standard.clone(),
    };
    write_json(&dir.join("gt.json"), &gt)?;
    let meta = SequenceMeta { seed, identity: seq.identity.clone() };
    write_json(&dir.join("meta.json"), &meta)?;
    Ok(())
}

/// Reads a sequence directory back.
pub fn load_sequence(dir: &Path) -> Result<(FrameSequence, SequenceMeta), DatasetError> {
    let gt: SequenceGt = read_json(&dir.join("gt.json"))?;
    if gt.gt_to_standard.len() != FRAMES_PER_SEQUENCE {
        return Err(DatasetError::malformed(
            &dir.join("gt.json"),
            format!(
                "expected {FRAMES_PER_SEQUENCE} transforms, found {}",
                gt.gt_to_standard.len()
            ),
        ));
    }
    if gt.reference_index >= FRAMES_PER_SEQUENCE {
        return Err(DatasetError::malformed(
            &dir.join("gt.json"),
            format!("reference index {} out of range", gt.reference_index),
        ));
    }
    let meta: SequenceMeta = read_json(&dir.join("meta.json"))?;
    let mut frames = Vec::with_capacity(FRAMES_PER_SEQUENCE);
    for i in 0..FRAMES_PER_SEQUENCE {
        let mut frame = read_ply(&dir.join(format!("frame_{i}.ply")))?;
        frame.frame_index = Some(i);
        frame.id = Some(meta.identity.clone());
        frames.push(frame);
    }
    let seq = FrameSequence {
        frames,
        reference_index: gt.reference_index,
        gt_to_standard: gt.gt_to_standard,
        identity: meta.identity.clone(),
    };
    Ok((seq, meta))
}

/// Pair-set provenance persisted alongside the clouds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSetMeta {
    pub seed: u64,
    pub regime: PairRegime,
    pub count: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct PairLine {
    source: String,
    target: String,
    gt: RigidTransform,
}

/// Writes a pair set into `dir`: endpoint clouds under `clouds/`, one
/// `pairs.jsonl` line per pair, and `meta.json`.
pub fn save_pair_set(dir: &Path, set: &PairSet) -> Result<(), DatasetError> {
    let clouds = dir.join("clouds");
    fs::create_dir_all(&clouds)?;
    let mut lines = String::new();
    for (i, pair) in set.pairs.iter().enumerate() {
        let source = format!("clouds/pair_{i:05}_source.ply");
        let target = format!("clouds/pair_{i:05}_target.ply");
        write_ply(&dir.join(&source), &pair.source)?;
        write_ply(&dir.join(&target), &pair.target)?;
        let line = PairLine { source, target, gt: pair.gt };
        lines.push_str(&serde_json::to_string(&line).expect("pair line serializes"));
        lines.push('\n');
    }
    fs::write(dir.join("pairs.jsonl"), lines)?;
    let meta = PairSetMeta {
        seed: set.seed,
        regime: set.regime,
        count: set.pairs.len(),
    };
    write_json(&dir.join("meta.json"), &meta)?;
    Ok(())
}

/// Reads a pair-set directory back, resolving cloud paths against `dir`.
pub fn load_pair_set(dir: &Path) -> Result<PairSet, DatasetError> {
    let meta: PairSetMeta = read_json(&dir.join("meta.json"))?;
    let jsonl_path = dir.join("pairs.jsonl");
    let text = fs::read_to_string(&jsonl_path)?;
    let mut pairs = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: PairLine = serde_json::from_str(line).map_err(|e| {
            DatasetError::malformed(&jsonl_path, format!("line {}: {e}", idx + 1))
        })?;
        let source = read_ply(&dir.join(&parsed.source))?;
        let target = read_ply(&dir.join(&parsed.target))?;
        pairs.push(RegistrationPair { source, target, gt: parsed.gt });
    }
    if pairs.len() != meta.count {
        return Err(DatasetError::malformed(
            &jsonl_path,
            format!("meta promises {} pairs, file has {}", meta.count, pairs.len()),
        ));
    }
    Ok(PairSet { pairs, regime: meta.regime, seed: meta.seed })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), DatasetError> {
    let text = serde_json::to_string_pretty(value).expect("dataset records serialize");
    fs::write(path, text)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, DatasetError> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| DatasetError::malformed(path, e.to_string()))
}
