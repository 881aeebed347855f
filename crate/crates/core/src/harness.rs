//! Experiment orchestration: bootstrap, the online asking loop, the i.i.d.
//! baseline, offline evaluation, ablation grids and report tables.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{FeatureConfig, FeatureVector, Featurizer, Fnv, SceneFeatures};
use crate::learners::{
    argmax, bootstrap_relevance, train_examples, AcquiredTuple, LearnError, OfflineConfig, RelevanceModel,
    SoftmaxModel, OFFLINE_LR, ONLINE_LR,
};
use crate::oracle::{
    answer_with_budget, execute, sample_truth_question, Answer, AnswerSpace, AnswerType, AuditRecord,
    BudgetLedger, OracleError,
};
use crate::program::{FamilyCatalog, Program};
use crate::proposal::{
    fit_generator, propose, GeneratorConfig, GeneratorModel, ProposalError, ProposeArgs, QuestionBank,
    RelevanceMode, DEFAULT_K, DEFAULT_MAX_ATTEMPTS, DEFAULT_P_MALFORMED,
};
use crate::selection::{
    entropy, informativeness, select, AnswerStateTracker, Candidate, Ensemble, PolicyKind, SelectionError,
    DEFAULT_DELTA, DEFAULT_EPSILON, ENSEMBLE_SIZE,
};
use crate::universe::{generate_scene, AttributeCatalog, Scene, SceneError};

pub const INVALID_WINDOW: usize = 500;
pub const DECILES: usize = 10;
/// Consecutive images without a single proposal before a run gives up.
pub const MAX_CONSECUTIVE_SKIPS: u64 = 100_000;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error(transparent)]
    Proposal(#[from] ProposalError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error("evaluation set is empty")]
    EmptyEval,
    #[error("no proposals for {0} consecutive images")]
    Stalled(u64),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("bad json in {path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Family weights used to draw bootstrap, baseline and eval questions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mixture {
    Uniform,
    /// Skewed towards short query/exist questions, like a hand-built dataset.
    Curated,
    /// Reweighted towards counting and comparison.
    CountCompare,
    Weights(Vec<f64>),
}

impl Mixture {
    pub fn weights(&self, families: &FamilyCatalog) -> Vec<f64> {
        let by_name = |f: &dyn Fn(&str) -> f64| families.families.iter().map(|fam| f(&fam.name)).collect();
        match self {
            Mixture::Uniform => vec![1.0; families.len()],
            Mixture::Curated => by_name(&|name| match name {
                "query_1f" | "query_2f" | "exist_1f" | "exist_2f" | "count_1f" => 4.0,
                _ => 1.0,
            }),
            Mixture::CountCompare => by_name(&|name| {
                if name.starts_with("count") || name.starts_with("compare") {
                    4.0
                } else {
                    1.0
                }
            }),
            Mixture::Weights(w) => w.clone(),
        }
    }
}

fn sample_weighted(weights: &[f64], rng: &mut impl Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LBAConfig {
    /// Optional label used as the ablation cell id.
    pub name: Option<String>,
    pub seed: u64,
    pub n_images: usize,
    pub bootstrap_size: usize,
    pub budget: u64,
    pub eval_size: usize,
    pub eval_images: usize,
    pub ood_eval_size: usize,
    pub k: usize,
    pub max_attempts: usize,
    pub epsilon: f64,
    pub delta: u64,
    pub tau: f64,
    pub policy: PolicyKind,
    pub relevance: RelevanceMode,
    pub qtype_conditioning: bool,
    pub p_malformed: f64,
    pub offline_epochs: usize,
    pub offline_lr: f64,
    pub online_lr: f64,
    pub relevance_lr: f64,
    pub ensemble_size: usize,
    /// Seed the answer-state counts with the bootstrap model's accuracy on the bootstrap set.
    pub tracker_warm_start: bool,
    pub features: FeatureConfig,
    pub min_objects: usize,
    pub max_objects: usize,
    pub bootstrap_mixture: Mixture,
    pub eval_mixture: Mixture,
    pub ood_mixture: Mixture,
    /// Generator samples per training image for the generated-answer diagnostic.
    pub generated_per_image: usize,
    /// Fractions of the budget at which a fresh offline model is trained and evaluated.
    pub checkpoints: Vec<f64>,
    pub catalog: AttributeCatalog,
    pub family_catalog_version: u32,
}

impl Default for LBAConfig {
    fn default() -> Self {
        LBAConfig {
            name: None,
            seed: 0,
            n_images: 2000,
            bootstrap_size: 2000,
            budget: 20_000,
            eval_size: 5000,
            eval_images: 1000,
            ood_eval_size: 2000,
            k: DEFAULT_K,
            max_attempts: DEFAULT_MAX_ATTEMPTS,
            epsilon: DEFAULT_EPSILON,
            delta: DEFAULT_DELTA,
            tau: 1.3,
            policy: PolicyKind::Curriculum,
            relevance: RelevanceMode::Learned,
            qtype_conditioning: true,
            p_malformed: DEFAULT_P_MALFORMED,
            offline_epochs: 3,
            offline_lr: OFFLINE_LR,
            online_lr: ONLINE_LR,
            relevance_lr: ONLINE_LR,
            ensemble_size: ENSEMBLE_SIZE,
            tracker_warm_start: false,
            features: FeatureConfig {
                dim: 1 << 15,
                grounding: true,
            },
            min_objects: 3,
            max_objects: 10,
            bootstrap_mixture: Mixture::Curated,
            eval_mixture: Mixture::Uniform,
            ood_mixture: Mixture::CountCompare,
            generated_per_image: 10,
            checkpoints: vec![0.2, 0.4, 0.6, 0.8, 1.0],
            catalog: AttributeCatalog::default(),
            family_catalog_version: 1,
        }
    }
}

impl LBAConfig {
    pub fn validate(&self, families: &FamilyCatalog) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        for (name, v) in [
            ("n_images", self.n_images),
            ("eval_size", self.eval_size),
            ("eval_images", self.eval_images),
            ("k", self.k),
            ("max_attempts", self.max_attempts),
            ("offline_epochs", self.offline_epochs),
            ("features.dim", self.features.dim),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.bootstrap_size < 2 {
            return bad("bootstrap_size must be at least 2".into());
        }
        if self.delta == 0 {
            return bad("delta must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return bad(format!("epsilon {} outside [0, 1]", self.epsilon));
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(0.0..1.0).contains(&self.p_malformed) {
            return bad(format!("p_malformed {} outside [0, 1)", self.p_malformed));
        }
        if self.policy.needs_ensemble() && self.ensemble_size == 0 {
            return bad("ensemble_size must be positive".into());
        }
        if self.checkpoints.iter().any(|&c| !(c > 0.0 && c <= 1.0)) {
            return bad("checkpoints must lie in (0, 1]".into());
        }
        if self.family_catalog_version != families.version {
            return bad(format!(
                "family catalog version {} requested, {} available",
                self.family_catalog_version, families.version
            ));
        }
        for (name, m) in [
            ("bootstrap_mixture", &self.bootstrap_mixture),
            ("eval_mixture", &self.eval_mixture),
            ("ood_mixture", &self.ood_mixture),
        ] {
            let w = m.weights(families);
            if w.len() != families.len() || w.iter().any(|x| !(*x >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
                return bad(format!("{name} needs {} non-negative weights with a positive sum", families.len()));
            }
        }
        self.catalog.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        if self.min_objects < 1 || self.min_objects > self.max_objects || self.max_objects > self.catalog.max_count {
            return bad(format!("object range {}..={} is not usable", self.min_objects, self.max_objects));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hex FNV-1a of the canonical JSON form.
    pub fn hash(&self) -> String {
        let canon = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", Fnv::new().write(canon.as_bytes()).finish())
    }

    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            tau: self.tau,
            qtype_conditioning: self.qtype_conditioning,
            p_malformed: self.p_malformed,
        }
    }

    pub fn offline(&self) -> OfflineConfig {
        OfflineConfig {
            epochs: self.offline_epochs,
            lr: self.offline_lr,
        }
    }

    pub fn cell_id(&self, index: usize) -> String {
        self.name.clone().unwrap_or_else(|| format!("cell-{index}"))
    }
}

/// A named random stream derived from the master seed.
pub fn derive_seed(master: u64, stream: &str) -> u64 {
    Fnv::new().write(&master.to_le_bytes()).write(stream.as_bytes()).finish()
}

fn stream_rng(master: u64, stream: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, stream))
}

/// Training scene `i` only depends on (seed, i), so smaller pools are prefixes of larger ones.
pub fn training_scenes(cfg: &LBAConfig) -> Result<Vec<Scene>, HarnessError> {
    scene_pool(cfg, "scene", cfg.n_images)
}

pub fn eval_scenes(cfg: &LBAConfig) -> Result<Vec<Scene>, HarnessError> {
    scene_pool(cfg, "eval-scene", cfg.eval_images)
}

fn scene_pool(cfg: &LBAConfig, stream: &str, n: usize) -> Result<Vec<Scene>, HarnessError> {
    (0..n)
        .map(|i| {
            let seed = derive_seed(cfg.seed, &format!("{stream}/{i}"));
            Ok(generate_scene(seed, &cfg.catalog, cfg.min_objects, cfg.max_objects)?)
        })
        .collect()
}

/// Shared, config-independent machinery for one feature configuration.
pub struct Lab {
    pub catalog: AttributeCatalog,
    pub families: FamilyCatalog,
    pub featurizer: Featurizer,
    pub bank: QuestionBank,
    pub space: AnswerSpace,
}

impl Lab {
    pub fn new(cfg: &LBAConfig) -> Result<Lab, HarnessError> {
        let families = FamilyCatalog::default();
        cfg.validate(&families)?;
        let featurizer = Featurizer::new(cfg.features, &cfg.catalog);
        let bank = QuestionBank::new(&families, &cfg.catalog, &featurizer)?;
        Ok(Lab {
            catalog: cfg.catalog.clone(),
            space: AnswerSpace::new(&cfg.catalog),
            families,
            featurizer,
            bank,
        })
    }

    fn features_of(&self, sf: &SceneFeatures, program: &Program) -> (FeatureVector, Option<usize>) {
        match self.bank.lookup(program) {
            Some(id) => (
                self.featurizer.featurize_parts(sf, &self.bank.entry(id).features),
                Some(id),
            ),
            None => (self.featurizer.featurize_with(sf, program), None),
        }
    }
}

/// Ground-truth questions: random scene, family from the mixture, rejection-sampled slots.
/// A family that cannot be grounded on the drawn scene is simply redrawn.
pub fn sample_truth_tuples(
    lab: &Lab,
    scenes: &[Scene],
    size: usize,
    weights: &[f64],
    rng: &mut ChaCha8Rng,
    first_step: u64,
) -> Result<Vec<AcquiredTuple>, HarnessError> {
    let mut out = Vec::with_capacity(size);
    let mut failures = 0usize;
    while out.len() < size {
        let scene = &scenes[rng.gen_range(0..scenes.len())];
        let family = &lab.families.families[sample_weighted(weights, rng)];
        match sample_truth_question(scene, family, &lab.catalog, rng.gen()) {
            Ok(program) => {
                let response = execute(&program, scene, &lab.catalog);
                out.push(AcquiredTuple {
                    scene_id: scene.id.clone(),
                    program: program.serialize(),
                    response,
                    step: first_step + out.len() as u64,
                });
                failures = 0;
            }
            Err(e) => {
                failures += 1;
                if failures > 10_000 {
                    return Err(e.into());
                }
            }
        }
    }
    Ok(out)
}

pub fn build_bootstrap(lab: &Lab, cfg: &LBAConfig, scenes: &[Scene]) -> Result<Vec<AcquiredTuple>, HarnessError> {
    if cfg.bootstrap_size == 0 {
        return Err(HarnessError::Config("bootstrap size must be at least 1".into()));
    }
    let weights = cfg.bootstrap_mixture.weights(&lab.families);
    let mut rng = stream_rng(cfg.seed, "bootstrap");
    sample_truth_tuples(lab, scenes, cfg.bootstrap_size, &weights, &mut rng, 0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalItem {
    pub scene_id: String,
    pub program: Program,
    pub family: usize,
    pub features: FeatureVector,
    pub answer: usize,
}

pub fn build_eval_set(
    lab: &Lab,
    scenes: &[Scene],
    size: usize,
    mixture: &Mixture,
    seed: u64,
) -> Result<Vec<EvalItem>, HarnessError> {
    let weights = mixture.weights(&lab.families);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tuples = sample_truth_tuples(lab, scenes, size, &weights, &mut rng, 0)?;
    let index: HashMap<&str, usize> = scenes.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect();
    let mut sf_cache: HashMap<usize, SceneFeatures> = HashMap::new();
    tuples
        .into_iter()
        .map(|t| {
            let si = index[t.scene_id.as_str()];
            let sf = sf_cache.entry(si).or_insert_with(|| lab.featurizer.scene_features(&scenes[si]));
            let program = t.program();
            let (features, id) = lab.features_of(sf, &program);
            let family = match id {
                Some(id) => lab.bank.entry(id).family,
                None => lab.families.identify(&program).map(|(f, _)| f).unwrap_or(0),
            };
            let answer = lab.space.index(&t.response.answer).ok_or(HarnessError::EmptyEval)?;
            Ok(EvalItem {
                scene_id: t.scene_id,
                program,
                family,
                features,
                answer,
            })
        })
        .collect()
}

/// Fraction of items whose argmax prediction (lowest index on ties) is the oracle answer.
pub fn evaluate(model: &SoftmaxModel, items: &[EvalItem]) -> Result<f64, HarnessError> {
    if items.is_empty() {
        return Err(HarnessError::EmptyEval);
    }
    let mut buf = vec![0.0; model.classes];
    let correct = items
        .iter()
        .filter(|it| {
            model.scores_into(&it.features, &mut buf);
            argmax(&buf) == it.answer
        })
        .count();
    Ok(correct as f64 / items.len() as f64)
}

/// One line of metrics.jsonl.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub t: u64,
    pub scene_id: String,
    pub family: String,
    pub proposals: usize,
    pub h_chosen: f64,
    /// The chosen question's informativeness split by answer type.
    pub h_by_type: BTreeMap<String, f64>,
    pub explored: bool,
    pub answer: Answer,
    pub predicted: Answer,
    pub correct: Option<bool>,
    pub e_valid: bool,
    pub e_present: bool,
    pub v_loss: Option<f64>,
    pub r_loss: f64,
    pub invalid_rate_window_500: f64,
    /// Images skipped for lack of proposals since the previous step.
    pub skipped: u64,
    /// Tracker state used for this selection (before this step's outcome).
    pub s_t: Vec<f64>,
    pub v_dist: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub budget: u64,
    pub accuracy: f64,
    pub ood_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub kind: String,
    pub config_hash: String,
    pub policy: PolicyKind,
    pub relevance: RelevanceMode,
    pub budget: u64,
    pub oracle_calls: u64,
    pub invalid_calls: u64,
    pub skipped_images: u64,
    pub perfect_calls: u64,
    pub final_accuracy: f64,
    pub final_ood_accuracy: f64,
    pub checkpoints: Vec<Checkpoint>,
    /// Acquired real answers, in answer-vocabulary order.
    pub answer_histogram: Vec<u64>,
    pub answer_entropy: f64,
    /// Answers to fresh generator samples on the training images (diagnostic, off-budget).
    pub generated_answer_histogram: Vec<u64>,
    pub generated_answer_entropy: f64,
    pub invalid_rate_by_decile: Vec<f64>,
    pub final_s: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub steps: Vec<StepMetrics>,
    pub audit: Vec<AuditRecord>,
    pub summary: RunSummary,
    pub model: SoftmaxModel,
}

impl RunRecord {
    pub fn metrics_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.steps {
            out.push_str(&serde_json::to_string(s).expect("metrics serialize"));
            out.push('\n');
        }
        out
    }

    pub fn audit_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.audit {
            out.push_str(&serde_json::to_string(r).expect("audit serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write_to(&self, dir: &Path) -> Result<(), HarnessError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let write = |name: &str, text: &str| {
            let p = dir.join(name);
            fs::write(&p, text).map_err(io_err(&p))
        };
        write("metrics.jsonl", &self.metrics_jsonl())?;
        write("audit.jsonl", &self.audit_jsonl())?;
        write(
            "summary.json",
            &serde_json::to_string_pretty(&self.summary).expect("summary serializes"),
        )?;
        Ok(())
    }
}

/// Budget values at which checkpoints are taken; always ends at the full budget.
pub fn checkpoint_budgets(cfg: &LBAConfig) -> Vec<u64> {
    let mut out: Vec<u64> = cfg
        .checkpoints
        .iter()
        .map(|f| ((f * cfg.budget as f64).round() as u64).min(cfg.budget))
        .collect();
    out.push(cfg.budget);
    out.sort_unstable();
    out.dedup();
    out
}

/// Everything both the asking loop and the baseline need before spending budget.
struct Prepared {
    scenes: Vec<Scene>,
    scene_feats: Vec<SceneFeatures>,
    scene_index: HashMap<String, usize>,
    bootstrap: Vec<AcquiredTuple>,
    bootstrap_examples: Vec<(FeatureVector, usize)>,
    /// Bank id of each bootstrap question, when it has one.
    bootstrap_ids: Vec<Option<usize>>,
    eval: Vec<EvalItem>,
    ood: Vec<EvalItem>,
}

fn prepare(lab: &Lab, cfg: &LBAConfig) -> Result<Prepared, HarnessError> {
    let scenes = training_scenes(cfg)?;
    let scene_feats: Vec<SceneFeatures> = scenes.iter().map(|s| lab.featurizer.scene_features(s)).collect();
    let scene_index: HashMap<String, usize> = scenes.iter().enumerate().map(|(i, s)| (s.id.clone(), i)).collect();
    let bootstrap = build_bootstrap(lab, cfg, &scenes)?;
    let mut bootstrap_examples = Vec::new();
    let mut bootstrap_ids = Vec::new();
    for t in &bootstrap {
        let (f, id) = lab.features_of(&scene_feats[scene_index[&t.scene_id]], &t.program());
        bootstrap_ids.push(id);
        if let Some(a) = lab.space.index(&t.response.answer) {
            bootstrap_examples.push((f, a));
        }
    }
    let escenes = eval_scenes(cfg)?;
    let eval = build_eval_set(lab, &escenes, cfg.eval_size, &cfg.eval_mixture, derive_seed(cfg.seed, "eval"))?;
    let ood = if cfg.ood_eval_size > 0 {
        build_eval_set(lab, &escenes, cfg.ood_eval_size, &cfg.ood_mixture, derive_seed(cfg.seed, "ood-eval"))?
    } else {
        Vec::new()
    };
    Ok(Prepared {
        scenes,
        scene_feats,
        scene_index,
        bootstrap,
        bootstrap_examples,
        bootstrap_ids,
        eval,
        ood,
    })
}

/// Trains a fresh offline model on bootstrap ∪ acquired and scores it.
fn checkpoint(
    lab: &Lab,
    cfg: &LBAConfig,
    prep: &Prepared,
    acquired: &[(FeatureVector, usize)],
    budget: u64,
) -> Result<(Checkpoint, SoftmaxModel), HarnessError> {
    let mut examples = prep.bootstrap_examples.clone();
    examples.extend_from_slice(acquired);
    if examples.is_empty() {
        return Err(LearnError::NoTrainableTuples.into());
    }
    let model = train_examples(
        &examples,
        lab.space.len(),
        cfg.features.dim,
        cfg.offline(),
        derive_seed(cfg.seed, &format!("offline/{budget}")),
    );
    let accuracy = evaluate(&model, &prep.eval)?;
    let ood_accuracy = if prep.ood.is_empty() { 0.0 } else { evaluate(&model, &prep.ood)? };
    Ok((
        Checkpoint {
            budget,
            accuracy,
            ood_accuracy,
        },
        model,
    ))
}

fn histogram_entropy(hist: &[u64]) -> f64 {
    let total: u64 = hist.iter().sum();
    if total == 0 {
        return 0.0;
    }
    entropy(&hist.iter().map(|&c| c as f64 / total as f64).collect::<Vec<_>>())
}

/// Oracle answers to `per_image` raw generator samples on every training image.
/// Malformed and invalid samples are left out. These calls are not charged to any budget.
pub fn generated_answer_histogram(
    lab: &Lab,
    generator: &GeneratorModel,
    gen_cfg: &GeneratorConfig,
    scenes: &[Scene],
    per_image: usize,
    seed: u64,
) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hist = vec![0u64; lab.space.len()];
    for scene in scenes {
        for _ in 0..per_image {
            if let crate::proposal::Generated::Entry(id) = generator.sample(&lab.bank, gen_cfg, &mut rng) {
                let r = crate::oracle::execute_typed(&lab.bank.entry(id).typed, scene);
                if let Some(a) = lab.space.index(&r.answer) {
                    hist[a] += 1;
                }
            }
        }
    }
    hist
}

fn decile_means(flags: &[bool]) -> Vec<f64> {
    if flags.is_empty() {
        return Vec::new();
    }
    (0..DECILES)
        .map(|d| {
            let (lo, hi) = decile_bounds(flags.len(), d);
            let n = hi - lo;
            if n == 0 {
                0.0
            } else {
                flags[lo..hi].iter().filter(|&&x| x).count() as f64 / n as f64
            }
        })
        .collect()
}

pub fn decile_bounds(len: usize, d: usize) -> (usize, usize) {
    (d * len / DECILES, (d + 1) * len / DECILES)
}

fn summarize(
    kind: &str,
    cfg: &LBAConfig,
    lab: &Lab,
    ledger: &BudgetLedger,
    checkpoints: Vec<Checkpoint>,
    skipped: u64,
    perfect_calls: u64,
    final_s: Vec<f64>,
    generated: Vec<u64>,
) -> RunSummary {
    let mut hist = vec![0u64; lab.space.len()];
    let mut invalid = Vec::with_capacity(ledger.audit.len());
    for rec in &ledger.audit {
        if let Some(a) = lab.space.index(&rec.answer) {
            hist[a] += 1;
        }
        invalid.push(!rec.e_valid);
    }
    let answer_entropy = histogram_entropy(&hist);
    let last = checkpoints.last().cloned().expect("at least one checkpoint");
    RunSummary {
        kind: kind.to_string(),
        config_hash: cfg.hash(),
        policy: cfg.policy,
        relevance: cfg.relevance,
        budget: cfg.budget,
        oracle_calls: ledger.audit.len() as u64,
        invalid_calls: invalid.iter().filter(|&&x| x).count() as u64,
        skipped_images: skipped,
        perfect_calls,
        final_accuracy: last.accuracy,
        final_ood_accuracy: last.ood_accuracy,
        checkpoints,
        answer_histogram: hist,
        answer_entropy,
        generated_answer_entropy: histogram_entropy(&generated),
        generated_answer_histogram: generated,
        invalid_rate_by_decile: decile_means(&invalid),
        final_s,
    }
}

fn initial_checkpoints(
    lab: &Lab,
    cfg: &LBAConfig,
    prep: &Prepared,
) -> Result<(Vec<Checkpoint>, Option<SoftmaxModel>), HarnessError> {
    if cfg.budget == 0 {
        let (c, m) = checkpoint(lab, cfg, prep, &[], 0)?;
        return Ok((vec![c], Some(m)));
    }
    Ok((Vec::new(), None))
}

/// The learning-by-asking loop followed by offline retraining.
pub fn run_lba(cfg: &LBAConfig) -> Result<(Vec<AcquiredTuple>, RunRecord), HarnessError> {
    let lab = Lab::new(cfg)?;
    run_lba_in(&lab, cfg)
}

pub fn run_lba_in(lab: &Lab, cfg: &LBAConfig) -> Result<(Vec<AcquiredTuple>, RunRecord), HarnessError> {
    cfg.validate(&lab.families)?;
    let prep = prepare(lab, cfg)?;
    let classes = lab.space.len();
    let dim = cfg.features.dim;

    let generator: GeneratorModel = fit_generator(&prep.bootstrap, &lab.bank)?;
    let pairs: Vec<(usize, &crate::proposal::BankEntry)> = prep
        .bootstrap
        .iter()
        .zip(&prep.bootstrap_ids)
        .filter_map(|(t, id)| id.map(|id| (prep.scene_index[&t.scene_id], lab.bank.entry(id))))
        .collect();
    let mut relevance: RelevanceModel = bootstrap_relevance(
        pairs.len(),
        |si, pi| lab.featurizer.featurize_parts(&prep.scene_feats[pairs[si].0], &pairs[pi].1.features),
        dim,
        cfg.relevance_lr,
        derive_seed(cfg.seed, "relevance"),
    )?;
    let mut v = train_examples(
        &prep.bootstrap_examples,
        classes,
        dim,
        cfg.offline(),
        derive_seed(cfg.seed, "offline/bootstrap"),
    );
    let mut ensemble = if cfg.policy.needs_ensemble() {
        Some(Ensemble::bagged(
            &prep.bootstrap_examples,
            classes,
            dim,
            cfg.offline(),
            cfg.ensemble_size,
            derive_seed(cfg.seed, "ensemble"),
        ))
    } else {
        None
    };

    // Questions already asked about each scene, bootstrap included.
    let mut asked: Vec<HashSet<u32>> = vec![HashSet::new(); prep.scenes.len()];
    for (t, id) in prep.bootstrap.iter().zip(&prep.bootstrap_ids) {
        if let Some(id) = id {
            asked[prep.scene_index[&t.scene_id]].insert(lab.bank.entry(*id).key_id);
        }
    }

    let gen_cfg = cfg.generator();
    let mut tracker = if cfg.tracker_warm_start {
        let mut correct = vec![0u64; classes];
        let mut total = vec![0u64; classes];
        for (f, a) in &prep.bootstrap_examples {
            total[*a] += 1;
            correct[*a] += (argmax(&v.predict(f)) == *a) as u64;
        }
        AnswerStateTracker::with_prior(correct, total, cfg.delta)
    } else {
        AnswerStateTracker::new(classes, cfg.delta)
    };
    let mut ledger = BudgetLedger::new(cfg.budget);
    let mut image_rng = stream_rng(cfg.seed, "images");
    let mut proposal_rng = stream_rng(cfg.seed, "proposals");
    let mut policy_rng = stream_rng(cfg.seed, "policy");
    let mut ensemble_rng = stream_rng(cfg.seed, "ensemble-online");

    let budgets = checkpoint_budgets(cfg);
    let (mut checkpoints, mut final_model) = initial_checkpoints(lab, cfg, &prep)?;
    let mut next_ckpt = budgets.iter().position(|&b| b > 0).unwrap_or(budgets.len());

    let mut acquired: Vec<AcquiredTuple> = Vec::with_capacity(cfg.budget as usize);
    let mut acquired_examples: Vec<(FeatureVector, usize)> = Vec::new();
    let mut steps: Vec<StepMetrics> = Vec::with_capacity(cfg.budget as usize);
    let mut invalid_window: std::collections::VecDeque<bool> = Default::default();
    let mut invalid_in_window = 0usize;
    let mut skipped_total = 0u64;
    let mut skipped_since = 0u64;
    let mut perfect_calls = 0u64;
    let mut vbuf = vec![0.0; classes];

    while ledger.remaining > 0 {
        let si = image_rng.gen_range(0..prep.scenes.len());
        let scene = &prep.scenes[si];
        let args = ProposeArgs {
            bank: &lab.bank,
            generator: &generator,
            gen_cfg: &gen_cfg,
            featurizer: &lab.featurizer,
            relevance: &relevance,
            mode: cfg.relevance,
            k: cfg.k,
            max_attempts: cfg.max_attempts,
        };
        let set = propose(&args, scene, &prep.scene_feats[si], &asked[si], &mut proposal_rng)?;
        perfect_calls += set.perfect_calls;
        if set.proposals.is_empty() {
            skipped_total += 1;
            skipped_since += 1;
            if skipped_since >= MAX_CONSECUTIVE_SKIPS {
                return Err(HarnessError::Stalled(skipped_since));
            }
            continue;
        }

        let t = ledger.step;
        let dists: Vec<Vec<f64>> = set.proposals.iter().map(|p| v.predict(&p.features)).collect();
        let member_dists: Vec<Vec<Vec<f64>>> = match &ensemble {
            Some(e) => set.proposals.iter().map(|p| e.predict(&p.features)).collect(),
            None => vec![Vec::new(); set.proposals.len()],
        };
        let keys: Vec<&str> = set
            .proposals
            .iter()
            .map(|p| lab.bank.key(lab.bank.entry(p.id).key_id).0.as_str())
            .collect();
        let candidates: Vec<Candidate> = (0..set.proposals.len())
            .map(|i| Candidate {
                v: &dists[i],
                members: &member_dists[i],
                key: keys[i],
            })
            .collect();
        let (s_t, s_prev) = tracker.states_for_step(t);
        let sel = select(cfg.policy, &candidates, &s_t, &s_prev, cfg.epsilon, &mut policy_rng)?;
        let chosen = &set.proposals[sel.index];
        let entry = lab.bank.entry(chosen.id);
        let v_dist = dists[sel.index].clone();

        let response = answer_with_budget(&mut ledger, &entry.program, scene, &lab.catalog)?;
        asked[si].insert(entry.key_id);

        let h_chosen = informativeness(&v_dist, &s_t, &s_prev);
        let mut h_by_type: BTreeMap<String, f64> = AnswerType::ALL.iter().map(|t| (t.name().to_string(), 0.0)).collect();
        for a in 0..classes {
            if s_t[a] != 0.0 {
                *h_by_type.get_mut(lab.space.answer_type(a).name()).expect("type present") +=
                    v_dist[a] * (s_t[a] - s_prev[a]) / s_t[a];
            }
        }

        let predicted = argmax(&v_dist);
        let (correct, v_loss) = match lab.space.index(&response.answer) {
            Some(a) => {
                let correct = predicted == a;
                tracker.record_outcome(a, correct, t)?;
                let loss = v.sgd_step_with(&chosen.features, a, cfg.online_lr, &mut vbuf);
                if let Some(e) = ensemble.as_mut() {
                    e.update(&chosen.features, a, cfg.online_lr, &mut ensemble_rng);
                }
                acquired_examples.push((chosen.features.clone(), a));
                (Some(correct), Some(loss))
            }
            None => (None, None),
        };
        let r_loss = relevance.step(&chosen.features, (response.e_valid, response.e_present), cfg.relevance_lr);

        invalid_window.push_back(!response.e_valid);
        invalid_in_window += !response.e_valid as usize;
        if invalid_window.len() > INVALID_WINDOW {
            invalid_in_window -= invalid_window.pop_front().expect("non-empty") as usize;
        }

        steps.push(StepMetrics {
            t,
            scene_id: scene.id.clone(),
            family: lab.families.families[entry.family].name.clone(),
            proposals: set.proposals.len(),
            h_chosen,
            h_by_type,
            explored: sel.explored,
            answer: response.answer.clone(),
            predicted: lab.space.get(predicted).clone(),
            correct,
            e_valid: response.e_valid,
            e_present: response.e_present,
            v_loss,
            r_loss,
            invalid_rate_window_500: invalid_in_window as f64 / invalid_window.len() as f64,
            skipped: skipped_since,
            s_t,
            v_dist,
        });
        skipped_since = 0;
        acquired.push(AcquiredTuple {
            scene_id: scene.id.clone(),
            program: entry.program.serialize(),
            response,
            step: t,
        });

        let spent = cfg.budget - ledger.remaining;
        if next_ckpt < budgets.len() && spent == budgets[next_ckpt] {
            let (c, m) = checkpoint(lab, cfg, &prep, &acquired_examples, spent)?;
            checkpoints.push(c);
            final_model = Some(m);
            next_ckpt += 1;
        }
    }

    let summary = summarize(
        "lba",
        cfg,
        lab,
        &ledger,
        checkpoints,
        skipped_total,
        perfect_calls,
        tracker.current(),
        generated_answer_histogram(
            lab,
            &generator,
            &gen_cfg,
            &prep.scenes,
            cfg.generated_per_image,
            derive_seed(cfg.seed, "generated"),
        ),
    );
    Ok((
        acquired,
        RunRecord {
            steps,
            audit: ledger.audit,
            summary,
            model: final_model.expect("final checkpoint trained"),
        },
    ))
}

/// Budget-matched ground-truth questions drawn like the bootstrap set, with the same offline phase.
pub fn run_iid_baseline(cfg: &LBAConfig) -> Result<(Vec<AcquiredTuple>, RunRecord), HarnessError> {
    let lab = Lab::new(cfg)?;
    run_iid_baseline_in(&lab, cfg)
}

pub fn run_iid_baseline_in(lab: &Lab, cfg: &LBAConfig) -> Result<(Vec<AcquiredTuple>, RunRecord), HarnessError> {
    cfg.validate(&lab.families)?;
    let prep = prepare(lab, cfg)?;
    let weights = cfg.bootstrap_mixture.weights(&lab.families);
    let mut rng = stream_rng(cfg.seed, "iid");
    let drawn = sample_truth_tuples(lab, &prep.scenes, cfg.budget as usize, &weights, &mut rng, 0)?;

    let budgets = checkpoint_budgets(cfg);
    let (mut checkpoints, mut final_model) = initial_checkpoints(lab, cfg, &prep)?;
    let mut next_ckpt = budgets.iter().position(|&b| b > 0).unwrap_or(budgets.len());
    let mut ledger = BudgetLedger::new(cfg.budget);
    let mut acquired = Vec::with_capacity(drawn.len());
    let mut examples = Vec::with_capacity(drawn.len());
    for t in drawn {
        let si = prep.scene_index[&t.scene_id];
        let program = t.program();
        let response = answer_with_budget(&mut ledger, &program, &prep.scenes[si], &lab.catalog)?;
        let (f, _) = lab.features_of(&prep.scene_feats[si], &program);
        if let Some(a) = lab.space.index(&response.answer) {
            examples.push((f, a));
        }
        acquired.push(AcquiredTuple {
            response,
            step: ledger.step - 1,
            ..t
        });
        let spent = cfg.budget - ledger.remaining;
        if next_ckpt < budgets.len() && spent == budgets[next_ckpt] {
            let (c, m) = checkpoint(lab, cfg, &prep, &examples, spent)?;
            checkpoints.push(c);
            final_model = Some(m);
            next_ckpt += 1;
        }
    }
    let summary = summarize("iid", cfg, lab, &ledger, checkpoints, 0, 0, Vec::new(), Vec::new());
    Ok((
        acquired,
        RunRecord {
            steps: Vec::new(),
            audit: ledger.audit,
            summary,
            model: final_model.expect("final checkpoint trained"),
        },
    ))
}

/// Evaluates a saved model on the eval set the config defines.
pub fn evaluate_model(cfg: &LBAConfig, model: &SoftmaxModel) -> Result<(f64, f64), HarnessError> {
    let lab = Lab::new(cfg)?;
    let escenes = eval_scenes(cfg)?;
    let eval = build_eval_set(&lab, &escenes, cfg.eval_size, &cfg.eval_mixture, derive_seed(cfg.seed, "eval"))?;
    let ood_acc = if cfg.ood_eval_size > 0 {
        let ood = build_eval_set(&lab, &escenes, cfg.ood_eval_size, &cfg.ood_mixture, derive_seed(cfg.seed, "ood-eval"))?;
        evaluate(model, &ood)?
    } else {
        0.0
    };
    Ok((evaluate(model, &eval)?, ood_acc))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell_id: String,
    pub config_hash: String,
    pub budget: u64,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub mean_ood_acc: f64,
    pub runs: usize,
    pub accuracies: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub cell_id: String,
    pub repeat: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub failures: Vec<CellFailure>,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Config for repeat `r`: the master seed shifted by `r`, so repeat 0 is the config itself
/// and every cell shares the same seeds per repeat.
pub fn repeat_config(cfg: &LBAConfig, r: usize) -> LBAConfig {
    LBAConfig {
        seed: cfg.seed.wrapping_add(r as u64),
        ..cfg.clone()
    }
}

/// Runs every cell `repeats` times (in parallel up to `jobs`) and aggregates per checkpoint.
pub fn run_ablation(grid: &[LBAConfig], repeats: usize, jobs: usize) -> Result<AblationReport, HarnessError> {
    if repeats == 0 {
        return Err(HarnessError::Config("repeats must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    let jobs_list: Vec<(usize, usize)> = (0..grid.len()).flat_map(|c| (0..repeats).map(move |r| (c, r))).collect();
    let results: Vec<Result<RunSummary, String>> = pool.install(|| {
        jobs_list
            .par_iter()
            .map(|&(c, r)| {
                run_lba(&repeat_config(&grid[c], r))
                    .map(|(_, rec)| rec.summary)
                    .map_err(|e| e.to_string())
            })
            .collect()
    });
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (c, cfg) in grid.iter().enumerate() {
        let cell_id = cfg.cell_id(c);
        let mut per_budget: BTreeMap<u64, Vec<(f64, f64)>> = BTreeMap::new();
        for (r, res) in results[c * repeats..(c + 1) * repeats].iter().enumerate() {
            match res {
                Ok(s) => {
                    for ck in &s.checkpoints {
                        per_budget.entry(ck.budget).or_default().push((ck.accuracy, ck.ood_accuracy));
                    }
                }
                Err(e) => failures.push(CellFailure {
                    cell_id: cell_id.clone(),
                    repeat: r,
                    error: e.clone(),
                }),
            }
        }
        for (budget, accs) in per_budget {
            let a: Vec<f64> = accs.iter().map(|x| x.0).collect();
            let o: Vec<f64> = accs.iter().map(|x| x.1).collect();
            let (mean_acc, std_acc) = mean_std(&a);
            rows.push(AblationRow {
                cell_id: cell_id.clone(),
                config_hash: cfg.hash(),
                budget,
                mean_acc,
                std_acc,
                mean_ood_acc: mean_std(&o).0,
                runs: a.len(),
                accuracies: a,
            });
        }
    }
    Ok(AblationReport { rows, failures })
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("cell_id,config_hash,budget,mean_acc,std_acc,mean_ood_acc,runs\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.cell_id, r.config_hash, r.budget, r.mean_acc, r.std_acc, r.mean_ood_acc, r.runs
            );
        }
        out
    }
}

/// Per-decile informativeness and cumulative accuracy for one answer type.
#[derive(Debug, Clone, PartialEq)]
pub struct TypeProfile {
    pub answer_type: String,
    pub mean_h: Vec<f64>,
    /// Answering-model accuracy on this type's real answers within each decile.
    pub accuracy: Vec<f64>,
}

/// Decile profiles of the chosen questions' per-type informativeness and of the answering
/// model's per-type accuracy (prediction before update).
pub fn decile_profiles(steps: &[StepMetrics], space: &AnswerSpace) -> Vec<TypeProfile> {
    let mut out = Vec::new();
    for ty in AnswerType::ALL {
        let name = ty.name().to_string();
        let mut mean_h = Vec::with_capacity(DECILES);
        let mut accuracy = Vec::with_capacity(DECILES);
        for d in 0..DECILES {
            let (mut c, mut n) = (0u64, 0u64);
            let (lo, hi) = decile_bounds(steps.len(), d);
            let slice = &steps[lo..hi];
            let h: f64 = slice.iter().map(|s| s.h_by_type.get(&name).copied().unwrap_or(0.0)).sum();
            mean_h.push(if slice.is_empty() { 0.0 } else { h / slice.len() as f64 });
            for s in slice {
                if let (Some(ok), Some(a)) = (s.correct, space.index(&s.answer)) {
                    if space.answer_type(a) == ty {
                        n += 1;
                        c += ok as u64;
                    }
                }
            }
            accuracy.push(if n == 0 { 0.0 } else { c as f64 / n as f64 });
        }
        out.push(TypeProfile {
            answer_type: name,
            mean_h,
            accuracy,
        });
    }
    out
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, HarnessError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|source| HarnessError::Json {
                path: path.to_path_buf(),
                source,
            })
        })
        .collect()
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, HarnessError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| HarnessError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes fig4.csv, fig5.csv, fig7.csv and fig8.csv for the given run directories.
/// Returns warnings for directories that could not be used.
pub fn report(run_dirs: &[PathBuf], out: &Path) -> Result<Vec<String>, HarnessError> {
    let space = AnswerSpace::new(&AttributeCatalog::default());
    let mut warnings = Vec::new();
    let mut fig4 = String::from("run,kind,policy,relevance,budget,accuracy,ood_accuracy\n");
    let mut fig5 = String::from("run,panel,key,value\n");
    let mut fig7 = String::from("policy,run,budget,accuracy\n");
    let mut fig8 = String::from("run,decile,answer_type,informativeness,accuracy\n");
    for dir in run_dirs {
        let run = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let summary: RunSummary = match read_json(&dir.join("summary.json")) {
            Ok(s) => s,
            Err(e) => {
                warnings.push(format!("{}: {e}", dir.display()));
                continue;
            }
        };
        for c in &summary.checkpoints {
            let _ = writeln!(
                fig4,
                "{run},{},{},{},{},{},{}",
                summary.kind,
                summary.policy.name(),
                summary.relevance.name(),
                c.budget,
                c.accuracy,
                c.ood_accuracy
            );
            let _ = writeln!(fig7, "{},{run},{},{}", summary.policy.name(), c.budget, c.accuracy);
        }
        let total: u64 = summary.answer_histogram.iter().sum();
        for (a, &count) in summary.answer_histogram.iter().enumerate() {
            let frac = if total == 0 { 0.0 } else { count as f64 / total as f64 };
            let _ = writeln!(fig5, "{run},answers,{},{frac}", space.get(a).label());
        }
        for (d, r) in summary.invalid_rate_by_decile.iter().enumerate() {
            let _ = writeln!(fig5, "{run},invalid_rate,{d},{r}");
        }
        let metrics = dir.join("metrics.jsonl");
        if !metrics.exists() {
            warnings.push(format!("{}: no metrics.jsonl", dir.display()));
            continue;
        }
        let steps: Vec<StepMetrics> = match read_jsonl(&metrics) {
            Ok(s) => s,
            Err(e) => {
                warnings.push(format!("{}: {e}", dir.display()));
                continue;
            }
        };
        if steps.is_empty() {
            continue;
        }
        for p in decile_profiles(&steps, &space) {
            for d in 0..DECILES {
                let _ = writeln!(fig8, "{run},{d},{},{},{}", p.answer_type, p.mean_h[d], p.accuracy[d]);
            }
        }
    }
    fs::create_dir_all(out).map_err(io_err(out))?;
    for (name, text) in [("fig4.csv", &fig4), ("fig5.csv", &fig5), ("fig7.csv", &fig7), ("fig8.csv", &fig8)] {
        let p = out.join(name);
        fs::write(&p, text).map_err(io_err(&p))?;
    }
    Ok(warnings)
}
