//! Per-answer accuracy tracking, informativeness and the selection policies.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FeatureVector;
use crate::learners::{argmax, train_examples, OfflineConfig, SoftmaxModel};

pub const DEFAULT_DELTA: u64 = 20;
pub const DEFAULT_EPSILON: f64 = 0.1;
pub const ENSEMBLE_SIZE: usize = 4;

#[derive(Debug, Error, PartialEq)]
pub enum SelectionError {
    #[error("step {got} does not follow step {last}")]
    NonMonotonicStep { last: u64, got: u64 },
    #[error("answer index {0} is outside the vocabulary")]
    UnknownAnswer(usize),
    #[error("cannot select from an empty proposal set")]
    EmptyProposals,
}

/// Cumulative per-answer accuracy of the answering model on the questions it
/// has been asked, with a history indexed by oracle step.
#[derive(Debug, Clone)]
pub struct AnswerStateTracker {
    pub correct: Vec<u64>,
    pub total: Vec<u64>,
    pub delta: u64,
    last_step: Option<u64>,
    base: Vec<f64>,
    /// (step, accuracies after that step's outcome)
    history: Vec<(u64, Vec<f64>)>,
}

impl AnswerStateTracker {
    pub fn new(answers: usize, delta: u64) -> AnswerStateTracker {
        AnswerStateTracker {
            correct: vec![0; answers],
            total: vec![0; answers],
            delta,
            last_step: None,
            base: vec![0.0; answers],
            history: Vec::new(),
        }
    }

    /// Starts the counts from earlier observations (e.g. the bootstrap set).
    pub fn with_prior(correct: Vec<u64>, total: Vec<u64>, delta: u64) -> AnswerStateTracker {
        let mut t = AnswerStateTracker::new(total.len(), delta);
        t.correct = correct;
        t.total = total;
        t.base = t.current();
        t
    }

    pub fn len(&self) -> usize {
        self.total.len()
    }

    pub fn is_empty(&self) -> bool {
        self.total.is_empty()
    }

    pub fn current(&self) -> Vec<f64> {
        self.correct
            .iter()
            .zip(&self.total)
            .map(|(&c, &n)| if n == 0 { 0.0 } else { c as f64 / n as f64 })
            .collect()
    }

    pub fn record_outcome(&mut self, answer: usize, correct: bool, step: u64) -> Result<(), SelectionError> {
        if answer >= self.total.len() {
            return Err(SelectionError::UnknownAnswer(answer));
        }
        if let Some(last) = self.last_step {
            if step <= last {
                return Err(SelectionError::NonMonotonicStep { last, got: step });
            }
        }
        self.total[answer] += 1;
        self.correct[answer] += correct as u64;
        self.last_step = Some(step);
        self.history.push((step, self.current()));
        Ok(())
    }

    /// s as it stood before the outcome of step `t` was recorded.
    pub fn state_before(&self, t: u64) -> Vec<f64> {
        let k = self.history.partition_point(|(s, _)| *s < t);
        match k {
            0 => self.base.clone(),
            _ => self.history[k - 1].1.clone(),
        }
    }

    /// (s_t, s_{t-Δ}) for selecting at step t; s_{t-Δ} is all zeros while t < Δ.
    pub fn states_for_step(&self, t: u64) -> (Vec<f64>, Vec<f64>) {
        let now = self.state_before(t);
        let then = if t < self.delta {
            vec![0.0; self.total.len()]
        } else {
            self.state_before(t - self.delta)
        };
        (now, then)
    }
}

/// Expected relative accuracy improvement under the predicted answer
/// distribution. Terms with s_t(a) = 0 contribute nothing.
pub fn informativeness(v: &[f64], s_t: &[f64], s_prev: &[f64]) -> f64 {
    v.iter()
        .zip(s_t.iter().zip(s_prev))
        .map(|(&p, (&now, &then))| if now == 0.0 { 0.0 } else { p * (now - then) / now })
        .sum()
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Curriculum,
    Random,
    Entropy,
    VariationRatio,
}

impl PolicyKind {
    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Curriculum => "curriculum",
            PolicyKind::Random => "random",
            PolicyKind::Entropy => "entropy",
            PolicyKind::VariationRatio => "variation_ratio",
        }
    }

    pub fn from_name(name: &str) -> Option<PolicyKind> {
        Some(match name {
            "curriculum" => PolicyKind::Curriculum,
            "random" => PolicyKind::Random,
            "entropy" => PolicyKind::Entropy,
            "variation_ratio" | "variation-ratio" => PolicyKind::VariationRatio,
            _ => return None,
        })
    }

    pub fn needs_ensemble(self) -> bool {
        matches!(self, PolicyKind::Entropy | PolicyKind::VariationRatio)
    }
}

/// What a policy may look at for one proposal.
pub struct Candidate<'a> {
    /// Answering model's predicted distribution.
    pub v: &'a [f64],
    /// Ensemble members' predicted distributions (only for uncertainty policies).
    pub members: &'a [Vec<f64>],
    /// Canonical key, used to break ties deterministically.
    pub key: &'a str,
}

/// Outcome of a selection, with the score of every proposal.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub index: usize,
    pub scores: Vec<f64>,
    pub explored: bool,
}

fn argmax_lowest_key(scores: &[f64], candidates: &[Candidate]) -> usize {
    let mut best = 0;
    for i in 1..scores.len() {
        if scores[i] > scores[best] || (scores[i] == scores[best] && candidates[i].key < candidates[best].key) {
            best = i;
        }
    }
    best
}

fn argmax_random_tie(scores: &[f64], rng: &mut impl Rng) -> usize {
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ties: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] == m).collect();
    ties[rng.gen_range(0..ties.len())]
}

pub fn variation_ratio(members: &[Vec<f64>], classes: usize) -> f64 {
    let mut votes = vec![0usize; classes];
    for m in members {
        votes[argmax(m)] += 1;
    }
    let modal = *votes.iter().max().unwrap_or(&0);
    1.0 - modal as f64 / members.len().max(1) as f64
}

/// Picks one proposal.
///
/// Curriculum is ε-greedy over informativeness with ties going to the lowest
/// canonical key; entropy and variation ratio use the ensemble and break ties
/// uniformly at random.
pub fn select(
    policy: PolicyKind,
    candidates: &[Candidate],
    s_t: &[f64],
    s_prev: &[f64],
    epsilon: f64,
    rng: &mut impl Rng,
) -> Result<Selection, SelectionError> {
    if candidates.is_empty() {
        return Err(SelectionError::EmptyProposals);
    }
    let n = candidates.len();
    Ok(match policy {
        PolicyKind::Curriculum => {
            let scores: Vec<f64> = candidates.iter().map(|c| informativeness(c.v, s_t, s_prev)).collect();
            let explore = rng.gen::<f64>() < epsilon;
            let index = if explore {
                rng.gen_range(0..n)
            } else {
                argmax_lowest_key(&scores, candidates)
            };
            Selection {
                index,
                scores,
                explored: explore,
            }
        }
        PolicyKind::Random => Selection {
            index: rng.gen_range(0..n),
            scores: vec![0.0; n],
            explored: true,
        },
        PolicyKind::Entropy => {
            let scores: Vec<f64> = candidates
                .iter()
                .map(|c| {
                    let k = c.v.len();
                    let mut mean = vec![0.0; k];
                    for m in c.members {
                        for (a, b) in mean.iter_mut().zip(m) {
                            *a += b / c.members.len() as f64;
                        }
                    }
                    entropy(&mean)
                })
                .collect();
            Selection {
                index: argmax_random_tie(&scores, rng),
                scores,
                explored: false,
            }
        }
        PolicyKind::VariationRatio => {
            let scores: Vec<f64> = candidates.iter().map(|c| variation_ratio(c.members, c.v.len())).collect();
            Selection {
                index: argmax_random_tie(&scores, rng),
                scores,
                explored: false,
            }
        }
    })
}

/// Draws from Poisson(1) by inversion.
pub fn poisson1(rng: &mut impl Rng) -> u32 {
    let mut k = 0;
    let mut p = (-1.0f64).exp();
    let mut cdf = p;
    let u: f64 = rng.gen();
    while u > cdf && k < 20 {
        k += 1;
        p /= k as f64;
        cdf += p;
    }
    k
}

/// Online-bagged ensemble: every member sees each example Poisson(1) times.
#[derive(Debug, Clone)]
pub struct Ensemble {
    pub members: Vec<SoftmaxModel>,
}

impl Ensemble {
    /// Each member is trained offline on its own Poisson(1) resample of `examples`.
    pub fn bagged(
        examples: &[(FeatureVector, usize)],
        classes: usize,
        dim: usize,
        cfg: OfflineConfig,
        size: usize,
        seed: u64,
    ) -> Ensemble {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let members = (0..size)
            .map(|_| {
                let mut sample = Vec::with_capacity(examples.len());
                for ex in examples {
                    for _ in 0..poisson1(&mut rng) {
                        sample.push(ex.clone());
                    }
                }
                train_examples(&sample, classes, dim, cfg, rng.gen())
            })
            .collect();
        Ensemble { members }
    }

    pub fn predict(&self, f: &FeatureVector) -> Vec<Vec<f64>> {
        self.members.iter().map(|m| m.predict(f)).collect()
    }

    pub fn update(&mut self, f: &FeatureVector, target: usize, lr: f64, rng: &mut impl Rng) {
        for m in &mut self.members {
            for _ in 0..poisson1(rng) {
                m.sgd_step(f, target, lr);
            }
        }
    }
}
