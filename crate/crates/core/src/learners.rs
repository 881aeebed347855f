//! Linear learners over hashed features: the softmax answering model, the
//! two-headed relevance model and offline retraining.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FeatureVector;
use crate::oracle::{AnswerSpace, OracleResponse};
use crate::program::Program;

pub const ONLINE_LR: f64 = 0.05;
pub const OFFLINE_LR: f64 = 0.1;

/// Multinomial logistic regression. Weights are stored feature-major
/// (`weights[j * classes + c]`) so a sparse row touches contiguous memory.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxModel {
    pub classes: usize,
    pub dim: usize,
    pub weights: Vec<f64>,
    pub steps: u64,
}

impl SoftmaxModel {
    pub fn new(dim: usize, classes: usize) -> SoftmaxModel {
        SoftmaxModel {
            classes,
            dim,
            weights: vec![0.0; dim * classes],
            steps: 0,
        }
    }

    pub fn scores_into(&self, f: &FeatureVector, out: &mut [f64]) {
        out.fill(0.0);
        for &(j, x) in &f.entries {
            let row = &self.weights[j as usize * self.classes..(j as usize + 1) * self.classes];
            for (o, w) in out.iter_mut().zip(row) {
                *o += w * x;
            }
        }
    }

    pub fn predict_into(&self, f: &FeatureVector, out: &mut [f64]) {
        self.scores_into(f, out);
        softmax_in_place(out);
    }

    pub fn predict(&self, f: &FeatureVector) -> Vec<f64> {
        let mut p = vec![0.0; self.classes];
        self.predict_into(f, &mut p);
        p
    }

    pub fn loss(&self, f: &FeatureVector, target: usize) -> f64 {
        -self.predict(f)[target].max(f64::MIN_POSITIVE).ln()
    }

    /// Gradient of the cross-entropy loss, one entry per (feature, class) on the support.
    pub fn gradient(&self, f: &FeatureVector, target: usize) -> Vec<(u32, usize, f64)> {
        let p = self.predict(f);
        let mut g = Vec::with_capacity(f.entries.len() * self.classes);
        for &(j, x) in &f.entries {
            for (c, &pc) in p.iter().enumerate() {
                let y = (c == target) as u8 as f64;
                g.push((j, c, x * (pc - y)));
            }
        }
        g
    }

    /// One cross-entropy gradient step; returns the loss before the step.
    pub fn sgd_step(&mut self, f: &FeatureVector, target: usize, lr: f64) -> f64 {
        let mut p = vec![0.0; self.classes];
        self.sgd_step_with(f, target, lr, &mut p)
    }

    pub fn sgd_step_with(&mut self, f: &FeatureVector, target: usize, lr: f64, buf: &mut [f64]) -> f64 {
        self.predict_into(f, buf);
        let loss = -buf[target].max(f64::MIN_POSITIVE).ln();
        buf[target] -= 1.0;
        for &(j, x) in &f.entries {
            let row = &mut self.weights[j as usize * self.classes..(j as usize + 1) * self.classes];
            for (w, g) in row.iter_mut().zip(buf.iter()) {
                *w -= lr * x * g;
            }
        }
        self.steps += 1;
        loss
    }
}

pub fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        z += *x;
    }
    for x in v.iter_mut() {
        *x /= z;
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Two independent logistic heads: is the question valid for the scene, and
/// are all objects it mentions present.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceModel {
    pub dim: usize,
    pub valid: Vec<f64>,
    pub present: Vec<f64>,
}

impl RelevanceModel {
    pub fn new(dim: usize) -> RelevanceModel {
        RelevanceModel {
            dim,
            valid: vec![0.0; dim],
            present: vec![0.0; dim],
        }
    }

    pub fn predict(&self, f: &FeatureVector) -> (f64, f64) {
        let (mut a, mut b) = (0.0, 0.0);
        for &(j, x) in &f.entries {
            a += self.valid[j as usize] * x;
            b += self.present[j as usize] * x;
        }
        (sigmoid(a), sigmoid(b))
    }

    pub fn passes(&self, f: &FeatureVector) -> bool {
        let (v, p) = self.predict(f);
        v >= 0.5 && p >= 0.5
    }

    /// One logistic step per head; returns the summed pre-step loss.
    pub fn step(&mut self, f: &FeatureVector, labels: (bool, bool), lr: f64) -> f64 {
        let (pv, pp) = self.predict(f);
        let (yv, yp) = (labels.0 as u8 as f64, labels.1 as u8 as f64);
        let loss = -(if labels.0 { pv } else { 1.0 - pv }).max(f64::MIN_POSITIVE).ln()
            - (if labels.1 { pp } else { 1.0 - pp }).max(f64::MIN_POSITIVE).ln();
        for &(j, x) in &f.entries {
            self.valid[j as usize] -= lr * x * (pv - yv);
            self.present[j as usize] -= lr * x * (pp - yp);
        }
        loss
    }
}

/// One (scene, question, oracle answer) observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcquiredTuple {
    pub scene_id: String,
    pub program: String,
    pub response: OracleResponse,
    pub step: u64,
}

impl AcquiredTuple {
    pub fn program(&self) -> Program {
        Program::parse(&self.program).expect("acquired tuples hold serialized programs")
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum LearnError {
    #[error("no tuple carries a real answer; nothing to train on")]
    NoTrainableTuples,
    #[error("relevance bootstrap needs at least 2 tuples, got {0}")]
    BootstrapTooSmall(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OfflineConfig {
    pub epochs: usize,
    pub lr: f64,
}

impl Default for OfflineConfig {
    fn default() -> Self {
        OfflineConfig {
            epochs: 3,
            lr: OFFLINE_LR,
        }
    }
}

/// Trains a fresh model on every tuple with a real answer. Tuples are put in a
/// canonical order before the seeded shuffles, so input order does not matter.
pub fn train_offline(
    tuples: &[AcquiredTuple],
    featurize: impl Fn(&AcquiredTuple) -> FeatureVector,
    space: &AnswerSpace,
    dim: usize,
    cfg: OfflineConfig,
    seed: u64,
) -> Result<SoftmaxModel, LearnError> {
    let mut usable: Vec<(&AcquiredTuple, usize)> = tuples
        .iter()
        .filter_map(|t| space.index(&t.response.answer).map(|a| (t, a)))
        .collect();
    if usable.is_empty() {
        return Err(LearnError::NoTrainableTuples);
    }
    usable.sort_by(|a, b| {
        (&a.0.scene_id, &a.0.program, a.1, a.0.step).cmp(&(&b.0.scene_id, &b.0.program, b.1, b.0.step))
    });
    let examples: Vec<(FeatureVector, usize)> = usable.iter().map(|(t, a)| (featurize(t), *a)).collect();
    Ok(train_examples(&examples, space.len(), dim, cfg, seed))
}

/// Offline training on pre-featurized examples, in the given order before shuffling.
pub fn train_examples(
    examples: &[(FeatureVector, usize)],
    classes: usize,
    dim: usize,
    cfg: OfflineConfig,
    seed: u64,
) -> SoftmaxModel {
    let mut model = SoftmaxModel::new(dim, classes);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut buf = vec![0.0; classes];
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let lr = cfg.lr / (epoch as f64).sqrt();
        for &i in &order {
            let (f, a) = &examples[i];
            model.sgd_step_with(f, *a, lr, &mut buf);
        }
    }
    model
}

/// A uniformly random cyclic permutation (Sattolo's algorithm): no fixed points.
pub fn derangement(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..i);
        p.swap(i, j);
    }
    p
}

/// Original pairs as positives, scene-permuted pairs as negatives.
/// `featurize(scene_index, program_index)` builds features of the pair
/// (scene of tuple `scene_index`, question of tuple `program_index`).
pub fn bootstrap_relevance(
    n: usize,
    featurize: impl Fn(usize, usize) -> FeatureVector,
    dim: usize,
    lr: f64,
    seed: u64,
) -> Result<RelevanceModel, LearnError> {
    if n < 2 {
        return Err(LearnError::BootstrapTooSmall(n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let perm = derangement(n, &mut rng);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut model = RelevanceModel::new(dim);
    for &i in &order {
        model.step(&featurize(i, i), (true, true), lr);
        model.step(&featurize(perm[i], i), (false, false), lr);
    }
    Ok(model)
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a model checkpoint")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint is for config {found}, expected {expected}")]
    ConfigMismatch { expected: String, found: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

const MAGIC: &[u8; 8] = b"LBAMODEL";
const CHECKPOINT_VERSION: u32 = 1;

/// Binary checkpoint: magic, version, dims, config hash, then weights as little-endian f64.
pub fn write_checkpoint(model: &SoftmaxModel, config_hash: &str, mut w: impl Write) -> Result<(), CheckpointError> {
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(model.dim as u64).to_le_bytes())?;
    w.write_all(&(model.classes as u64).to_le_bytes())?;
    w.write_all(&model.steps.to_le_bytes())?;
    w.write_all(&(config_hash.len() as u32).to_le_bytes())?;
    w.write_all(config_hash.as_bytes())?;
    let mut bytes = Vec::with_capacity(model.weights.len() * 8);
    for x in &model.weights {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&bytes)?;
    Ok(())
}

/// Reads a checkpoint, returning the model and the config hash it was saved with.
pub fn read_checkpoint(mut r: impl Read) -> Result<(SoftmaxModel, String), CheckpointError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut u4 = [0u8; 4];
    let mut u8b = [0u8; 8];
    r.read_exact(&mut u4)?;
    let version = u32::from_le_bytes(u4);
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    r.read_exact(&mut u8b)?;
    let dim = u64::from_le_bytes(u8b) as usize;
    r.read_exact(&mut u8b)?;
    let classes = u64::from_le_bytes(u8b) as usize;
    r.read_exact(&mut u8b)?;
    let steps = u64::from_le_bytes(u8b);
    r.read_exact(&mut u4)?;
    let mut hash = vec![0u8; u32::from_le_bytes(u4) as usize];
    r.read_exact(&mut hash)?;
    let hash = String::from_utf8_lossy(&hash).into_owned();
    let mut bytes = vec![0u8; dim * classes * 8];
    r.read_exact(&mut bytes)?;
    let weights = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((
        SoftmaxModel {
            classes,
            dim,
            weights,
            steps,
        },
        hash,
    ))
}
