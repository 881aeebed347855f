//! Question proposal: a frozen, family-conditioned slot generator and the
//! relevance filter that turns its samples into a proposal set.

use std::collections::{HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{FeatureVector, Featurizer, ProgramFeatures, SceneFeatures};
use crate::learners::{AcquiredTuple, RelevanceModel};
use crate::oracle::execute_typed;
use crate::program::{
    validate, FamilyCatalog, Node, Program, QuestionKey, SlotKind, SlotValue, TypedProgram,
};
use crate::universe::{AttributeCatalog, Relation, Scene};

pub const DEFAULT_K: usize = 50;
pub const DEFAULT_MAX_ATTEMPTS: usize = 2000;
pub const DEFAULT_P_MALFORMED: f64 = 0.04;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelevanceMode {
    None,
    Learned,
    Perfect,
}

impl RelevanceMode {
    pub fn name(self) -> &'static str {
        match self {
            RelevanceMode::None => "none",
            RelevanceMode::Learned => "learned",
            RelevanceMode::Perfect => "perfect",
        }
    }
}

/// One family instantiation with everything about it precomputed.
#[derive(Debug, Clone)]
pub struct BankEntry {
    pub family: usize,
    pub slots: Vec<usize>,
    pub program: Program,
    pub typed: TypedProgram,
    /// Dense id of the canonical key; distinct slot orders of one question share it.
    pub key_id: u32,
    pub features: ProgramFeatures,
}

/// Every instantiation of every family under one catalog, addressable by
/// (family, slot-domain indices).
#[derive(Debug, Clone)]
pub struct QuestionBank {
    pub families: FamilyCatalog,
    pub catalog: AttributeCatalog,
    pub domains: [Vec<SlotValue>; 3],
    entries: Vec<BankEntry>,
    offsets: Vec<usize>,
    keys: Vec<QuestionKey>,
    key_lookup: HashMap<QuestionKey, u32>,
}

fn kind_index(kind: SlotKind) -> usize {
    match kind {
        SlotKind::Attribute => 0,
        SlotKind::Relation => 1,
        SlotKind::Dimension => 2,
    }
}

#[derive(Debug, Error)]
pub enum ProposalError {
    #[error("no bootstrap tuple matches a known question family ({skipped} skipped)")]
    EmptyBootstrap { skipped: usize },
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("k must be at least 1")]
    ZeroK,
    #[error("family {0} does not instantiate: {1}")]
    Family(usize, String),
}

impl QuestionBank {
    pub fn new(families: &FamilyCatalog, catalog: &AttributeCatalog, featurizer: &Featurizer) -> Result<QuestionBank, ProposalError> {
        let domains = [SlotKind::Attribute, SlotKind::Relation, SlotKind::Dimension].map(|k| SlotValue::domain(k, catalog));
        let mut entries = Vec::new();
        let mut offsets = Vec::with_capacity(families.len());
        let mut keys = Vec::new();
        let mut key_lookup: HashMap<QuestionKey, u32> = HashMap::new();
        for fam in &families.families {
            offsets.push(entries.len());
            let sizes: Vec<usize> = fam.slots.iter().map(|&k| domains[kind_index(k)].len()).collect();
            let total: usize = sizes.iter().product();
            for mut code in 0..total {
                // mixed radix, last slot fastest
                let mut slots = vec![0; sizes.len()];
                for s in (0..sizes.len()).rev() {
                    slots[s] = code % sizes[s];
                    code /= sizes[s];
                }
                let values: Vec<SlotValue> = slots
                    .iter()
                    .zip(&fam.slots)
                    .map(|(&i, &k)| domains[kind_index(k)][i].clone())
                    .collect();
                let program = fam
                    .instantiate(&values, catalog)
                    .map_err(|e| ProposalError::Family(fam.id, e.to_string()))?;
                let typed = validate(&program, catalog).map_err(|e| ProposalError::Family(fam.id, e.to_string()))?;
                let key = QuestionKey(program.serialize());
                let next = keys.len() as u32;
                let key_id = *key_lookup.entry(key.clone()).or_insert_with(|| {
                    keys.push(key);
                    next
                });
                let features = featurizer.program_features(&program);
                entries.push(BankEntry {
                    family: fam.id,
                    slots,
                    program,
                    typed,
                    key_id,
                    features,
                });
            }
        }
        Ok(QuestionBank {
            families: families.clone(),
            catalog: catalog.clone(),
            domains,
            entries,
            offsets,
            keys,
            key_lookup,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: usize) -> &BankEntry {
        &self.entries[id]
    }

    pub fn entries(&self) -> &[BankEntry] {
        &self.entries
    }

    pub fn key(&self, key_id: u32) -> &QuestionKey {
        &self.keys[key_id as usize]
    }

    pub fn key_id(&self, key: &QuestionKey) -> Option<u32> {
        self.key_lookup.get(key).copied()
    }

    pub fn domain(&self, kind: SlotKind) -> &[SlotValue] {
        &self.domains[kind_index(kind)]
    }

    /// Bank id of a family instantiation given slot-domain indices.
    pub fn id_of(&self, family: usize, slots: &[usize]) -> usize {
        let fam = &self.families.families[family];
        let mut code = 0;
        for (&i, &k) in slots.iter().zip(&fam.slots) {
            code = code * self.domains[kind_index(k)].len() + i;
        }
        self.offsets[family] + code
    }

    /// Bank id of a program if it is a family instantiation.
    pub fn lookup(&self, program: &Program) -> Option<usize> {
        let (family, values) = self.families.identify(program)?;
        let fam = &self.families.families[family];
        let slots: Option<Vec<usize>> = values
            .iter()
            .zip(&fam.slots)
            .map(|(v, &k)| self.domains[kind_index(k)].iter().position(|d| d == v))
            .collect();
        let id = self.id_of(family, &slots?);
        (self.entries[id].program == *program).then_some(id)
    }
}

/// Per-family slot categoricals fit once on the bootstrap set, then frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorModel {
    /// `slot_counts[family][slot][value]`
    pub slot_counts: Vec<Vec<Vec<f64>>>,
    pub family_counts: Vec<f64>,
    /// Slot counts pooled over families, per slot kind; used when not conditioning on family.
    pub pooled_counts: [Vec<f64>; 3],
    pub skipped: usize,
}

pub fn fit_generator(bootstrap: &[AcquiredTuple], bank: &QuestionBank) -> Result<GeneratorModel, ProposalError> {
    let fams = &bank.families;
    let mut slot_counts: Vec<Vec<Vec<f64>>> = fams
        .families
        .iter()
        .map(|f| f.slots.iter().map(|&k| vec![0.0; bank.domain(k).len()]).collect())
        .collect();
    let mut family_counts = vec![0.0; fams.len()];
    let mut pooled_counts = [0, 1, 2].map(|k| vec![0.0; bank.domains[k].len()]);
    let mut skipped = 0;
    let mut used = 0;
    for t in bootstrap {
        let id = Program::parse(&t.program).ok().and_then(|p| bank.lookup(&p));
        let Some(id) = id else {
            skipped += 1;
            continue;
        };
        let e = bank.entry(id);
        family_counts[e.family] += 1.0;
        for (s, &v) in e.slots.iter().enumerate() {
            slot_counts[e.family][s][v] += 1.0;
            let kind = fams.families[e.family].slots[s];
            pooled_counts[kind_index(kind)][v] += 1.0;
        }
        used += 1;
    }
    if used == 0 {
        return Err(ProposalError::EmptyBootstrap { skipped });
    }
    Ok(GeneratorModel {
        slot_counts,
        family_counts,
        pooled_counts,
        skipped,
    })
}

/// Draws an index with probability proportional to (count + 1)^(1/tau).
pub fn sample_tempered(counts: &[f64], tau: f64, rng: &mut impl Rng) -> usize {
    let logits: Vec<f64> = counts.iter().map(|c| (c + 1.0).ln() / tau).collect();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
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

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub tau: f64,
    pub qtype_conditioning: bool,
    pub p_malformed: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            tau: 1.3,
            qtype_conditioning: true,
            p_malformed: DEFAULT_P_MALFORMED,
        }
    }
}

/// A generated question: either a well-formed bank entry or a malformed program.
#[derive(Debug, Clone, PartialEq)]
pub enum Generated {
    Entry(usize),
    Malformed(Program),
}

impl GeneratorModel {
    /// The question type: uniform when conditioning, else the pooled bootstrap family frequencies.
    pub fn sample_family(&self, cfg: &GeneratorConfig, rng: &mut impl Rng) -> usize {
        if cfg.qtype_conditioning {
            rng.gen_range(0..self.family_counts.len())
        } else {
            sample_tempered(&self.family_counts, cfg.tau, rng)
        }
    }

    pub fn sample_slots(&self, bank: &QuestionBank, family: usize, cfg: &GeneratorConfig, rng: &mut impl Rng) -> Vec<usize> {
        let kinds = &bank.families.families[family].slots;
        (0..kinds.len())
            .map(|s| {
                let counts = if cfg.qtype_conditioning {
                    &self.slot_counts[family][s]
                } else {
                    &self.pooled_counts[kind_index(kinds[s])]
                };
                sample_tempered(counts, cfg.tau, rng)
            })
            .collect()
    }

    /// Samples a question of the given family; with probability `p_malformed`
    /// the result is mutated into a program that fails validation.
    pub fn sample_question(&self, bank: &QuestionBank, family: usize, cfg: &GeneratorConfig, rng: &mut impl Rng) -> Generated {
        let slots = self.sample_slots(bank, family, cfg, rng);
        let id = bank.id_of(family, &slots);
        if cfg.p_malformed > 0.0 && rng.gen::<f64>() < cfg.p_malformed {
            Generated::Malformed(malform(&bank.entry(id).program, &bank.catalog, rng))
        } else {
            Generated::Entry(id)
        }
    }

    pub fn sample(&self, bank: &QuestionBank, cfg: &GeneratorConfig, rng: &mut impl Rng) -> Generated {
        let family = self.sample_family(cfg, rng);
        self.sample_question(bank, family, cfg, rng)
    }
}

/// Applies a random syntax-breaking mutation. The result never validates.
pub fn malform(program: &Program, catalog: &AttributeCatalog, rng: &mut impl Rng) -> Program {
    let mut p = program.clone();
    let last = p.nodes.len() - 1;
    match rng.gen_range(0..4) {
        0 => {
            // wrong-dimension constant on a filter
            let filters: Vec<usize> = (0..p.nodes.len())
                .filter(|&i| p.nodes[i].function.starts_with("filter_"))
                .collect();
            if !filters.is_empty() {
                let i = filters[rng.gen_range(0..filters.len())];
                p.nodes[i].value_inputs = vec![Relation::ALL[rng.gen_range(0..4)].name().to_string()];
            }
        }
        1 => {
            // drop the root
            p.nodes.truncate(last);
        }
        2 => {
            // misspelled function
            let i = rng.gen_range(0..p.nodes.len());
            p.nodes[i].function.push('_');
        }
        _ => {}
    }
    if p.nodes.is_empty() || validate(&p, catalog).is_ok() {
        // an extra input is always an arity error
        p = program.clone();
        let i = rng.gen_range(1..=last.max(1)).min(last);
        p.nodes[i].inputs.push(0);
        if validate(&p, catalog).is_ok() {
            p.nodes.push(Node::new("scene", vec![], vec![]));
        }
    }
    p
}

#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub id: usize,
    pub features: FeatureVector,
    pub relevance: (f64, f64),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProposalStats {
    pub attempts: usize,
    pub malformed: usize,
    pub asked: usize,
    pub duplicate: usize,
    pub rejected: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProposalSet {
    pub scene_id: String,
    pub proposals: Vec<Proposal>,
    pub k: usize,
    /// True when fewer than `k` proposals were found within the attempt bound.
    pub exhausted: bool,
    pub stats: ProposalStats,
    /// Ground-truth oracle calls made by the perfect filter; never charged to the budget.
    pub perfect_calls: u64,
}

pub struct ProposeArgs<'a> {
    pub bank: &'a QuestionBank,
    pub generator: &'a GeneratorModel,
    pub gen_cfg: &'a GeneratorConfig,
    pub featurizer: &'a Featurizer,
    pub relevance: &'a RelevanceModel,
    pub mode: RelevanceMode,
    pub k: usize,
    pub max_attempts: usize,
}

/// Samples until `k` new, well-formed, relevance-approved questions are found
/// or `max_attempts` samples were drawn. `asked` holds key ids already asked about this scene.
pub fn propose(
    args: &ProposeArgs,
    scene: &Scene,
    scene_features: &SceneFeatures,
    asked: &HashSet<u32>,
    rng: &mut impl Rng,
) -> Result<ProposalSet, ProposalError> {
    if args.k == 0 {
        return Err(ProposalError::ZeroK);
    }
    if args.gen_cfg.tau <= 0.0 || args.gen_cfg.tau.is_nan() {
        return Err(ProposalError::Temperature(args.gen_cfg.tau));
    }
    let mut stats = ProposalStats::default();
    let mut seen: HashSet<u32> = HashSet::new();
    let mut proposals = Vec::with_capacity(args.k);
    let mut perfect_calls = 0;
    while proposals.len() < args.k && stats.attempts < args.max_attempts {
        stats.attempts += 1;
        let id = match args.generator.sample(args.bank, args.gen_cfg, rng) {
            Generated::Entry(id) => id,
            Generated::Malformed(_) => {
                stats.malformed += 1;
                continue;
            }
        };
        let entry = args.bank.entry(id);
        if asked.contains(&entry.key_id) {
            stats.asked += 1;
            continue;
        }
        if seen.contains(&entry.key_id) {
            stats.duplicate += 1;
            continue;
        }
        let features = args.featurizer.featurize_parts(scene_features, &entry.features);
        let relevance = args.relevance.predict(&features);
        let keep = match args.mode {
            RelevanceMode::None => true,
            RelevanceMode::Learned => relevance.0 >= 0.5 && relevance.1 >= 0.5,
            RelevanceMode::Perfect => {
                perfect_calls += 1;
                let r = execute_typed(&entry.typed, scene);
                r.e_valid && r.e_present
            }
        };
        if !keep {
            stats.rejected += 1;
            continue;
        }
        seen.insert(entry.key_id);
        proposals.push(Proposal { id, features, relevance });
    }
    Ok(ProposalSet {
        scene_id: scene.id.clone(),
        exhausted: proposals.len() < args.k,
        k: args.k,
        proposals,
        stats,
        perfect_calls,
    })
}

/// Convenience for callers that want a seed rather than an RNG.
pub fn propose_seeded(
    args: &ProposeArgs,
    scene: &Scene,
    scene_features: &SceneFeatures,
    asked: &HashSet<u32>,
    seed: u64,
) -> Result<ProposalSet, ProposalError> {
    propose(args, scene, scene_features, asked, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureConfig;
    use crate::oracle::{execute, sample_truth_question, AnswerSpace, OracleResponse};
    use crate::program::tests::appendix_query_color;
    use crate::universe::generate_scene;
    use crate::universe::tests::appendix_scene;
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};
    use std::sync::OnceLock;

    struct Fixture {
        bank: QuestionBank,
        featurizer: Featurizer,
    }

    fn fixture() -> &'static Fixture {
        static F: OnceLock<Fixture> = OnceLock::new();
        F.get_or_init(|| {
            let c = AttributeCatalog::default();
            let featurizer = Featurizer::new(FeatureConfig::default(), &c);
            let bank = QuestionBank::new(&FamilyCatalog::default(), &c, &featurizer).unwrap();
            Fixture { bank, featurizer }
        })
    }

    fn tuple(program: &Program) -> AcquiredTuple {
        AcquiredTuple {
            scene_id: "s".into(),
            program: program.serialize(),
            response: OracleResponse {
                answer: crate::oracle::Answer::Bool(true),
                e_valid: true,
                e_present: true,
            },
            step: 0,
        }
    }

    fn entropy(counts: &HashMap<String, usize>) -> f64 {
        let n: usize = counts.values().sum();
        counts
            .values()
            .map(|&c| {
                let p = c as f64 / n as f64;
                -p * p.ln()
            })
            .sum()
    }

    #[test]
    fn bank_is_consistent() {
        let fx = fixture();
        let c = AttributeCatalog::default();
        assert_eq!(fx.bank.len(), 11_521);
        for (id, e) in fx.bank.entries().iter().enumerate().step_by(13) {
            assert_eq!(fx.bank.id_of(e.family, &e.slots), id);
            let found = fx.bank.lookup(&e.program).unwrap();
            assert_eq!(fx.bank.entry(found).program, e.program);
            assert_eq!(fx.bank.key_id(fx.bank.key(e.key_id)), Some(e.key_id));
            assert_eq!(fx.bank.key(e.key_id).0, e.program.serialize());
            assert!(validate(&e.program, &c).is_ok());
        }
        // the same question reached through swapped slots shares a key
        let count2 = &fx.bank.families.families[6];
        let red = fx.bank.domain(SlotKind::Attribute).iter().position(|v| v.to_string() == "color=red").unwrap();
        let large = fx.bank.domain(SlotKind::Attribute).iter().position(|v| v.to_string() == "size=large").unwrap();
        let a = fx.bank.id_of(count2.id, &[red, large]);
        let b = fx.bank.id_of(count2.id, &[large, red]);
        assert_ne!(a, b);
        assert_eq!(fx.bank.entry(a).key_id, fx.bank.entry(b).key_id);
    }

    #[test]
    fn fit_counts_single_question() {
        let fx = fixture();
        let g = fit_generator(&[tuple(&appendix_query_color())], &fx.bank).unwrap();
        let fam = 1;
        assert_eq!(g.family_counts[fam], 1.0);
        let total: f64 = g.slot_counts[fam].iter().map(|s| s.iter().sum::<f64>()).sum();
        assert_eq!(total, 3.0);
        let dom = fx.bank.domain(SlotKind::Attribute);
        let small = dom.iter().position(|v| v.to_string() == "size=small").unwrap();
        let rubber = dom.iter().position(|v| v.to_string() == "material=rubber").unwrap();
        // the chain is stored sorted, so slot 0 is size and slot 1 is material
        assert_eq!(g.slot_counts[fam][0][small], 1.0);
        assert_eq!(g.slot_counts[fam][1][rubber], 1.0);

        // near-zero temperature reproduces the modal slots
        let cfg = GeneratorConfig { tau: 0.01, qtype_conditioning: true, p_malformed: 0.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let Generated::Entry(id) = g.sample_question(&fx.bank, fam, &cfg, &mut rng) else { panic!() };
            assert_eq!(fx.bank.entry(id).program, appendix_query_color());
        }
        // add-one smoothing: every value has mass
        let cfg = GeneratorConfig { tau: 1.0, ..cfg };
        let mut seen = HashSet::new();
        for _ in 0..3000 {
            seen.insert(g.sample_slots(&fx.bank, 0, &cfg, &mut rng)[0]);
        }
        assert_eq!(seen.len(), 15);
    }

    #[test]
    fn fit_rejects_unusable_bootstrap() {
        let fx = fixture();
        let mut t = tuple(&appendix_query_color());
        t.program = "[]".into();
        assert!(matches!(fit_generator(&[t], &fx.bank), Err(ProposalError::EmptyBootstrap { skipped: 1 })));
    }

    #[test]
    fn malformed_rate_controls_validity() {
        let fx = fixture();
        let c = AttributeCatalog::default();
        let g = fit_generator(&[tuple(&appendix_query_color())], &fx.bank).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for p_malformed in [0.0, 1.0] {
            let cfg = GeneratorConfig { tau: 1.3, qtype_conditioning: true, p_malformed };
            for _ in 0..500 {
                match g.sample(&fx.bank, &cfg, &mut rng) {
                    Generated::Entry(id) => {
                        assert_eq!(p_malformed, 0.0);
                        assert!(validate(&fx.bank.entry(id).program, &c).is_ok());
                    }
                    Generated::Malformed(p) => {
                        assert_eq!(p_malformed, 1.0);
                        assert!(validate(&p, &c).is_err());
                    }
                }
            }
        }
        for e in fx.bank.entries().iter().step_by(11) {
            for _ in 0..4 {
                assert!(validate(&malform(&e.program, &c, &mut rng), &c).is_err());
            }
        }
    }

    fn skewed_generator(fx: &Fixture) -> GeneratorModel {
        let c = AttributeCatalog::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let scenes: Vec<Scene> = (0..50).map(|i| generate_scene(i, &c, 3, 10).unwrap()).collect();
        let mut tuples = Vec::new();
        // skewed toward two families, each with a favourite value
        for k in 0..400 {
            let fam = if k % 4 == 0 { 17 } else if k % 2 == 0 { 5 } else { 10 };
            let s = &scenes[rng.gen_range(0..scenes.len())];
            if let Ok(p) = sample_truth_question(s, &fx.bank.families.families[fam], &c, rng.gen()) {
                tuples.push(tuple(&p));
            }
        }
        let red = fx.bank.families.families[5].instantiate(&[SlotValue::Attribute(crate::universe::Dimension::Color, "red".into())], &c).unwrap();
        tuples.extend(std::iter::repeat(tuple(&red)).take(200));
        fit_generator(&tuples, &fx.bank).unwrap()
    }

    #[test]
    fn temperature_lowers_slot_entropy() {
        let fx = fixture();
        let g = skewed_generator(fx);
        let mut ent = Vec::new();
        for tau in [0.3, 1.3] {
            let cfg = GeneratorConfig { tau, qtype_conditioning: true, p_malformed: 0.0 };
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let mut counts: HashMap<String, usize> = HashMap::new();
            for _ in 0..10_000 {
                let s = g.sample_slots(&fx.bank, 5, &cfg, &mut rng);
                *counts.entry(s[0].to_string()).or_default() += 1;
            }
            ent.push(entropy(&counts));
        }
        assert!(ent[0] < ent[1], "{ent:?}");
    }

    #[test]
    fn conditioning_widens_answer_coverage() {
        let fx = fixture();
        let c = AttributeCatalog::default();
        let g = skewed_generator(fx);
        let scenes: Vec<Scene> = (100..200).map(|i| generate_scene(i, &c, 3, 10).unwrap()).collect();
        let mut ent = Vec::new();
        for cond in [true, false] {
            let cfg = GeneratorConfig { tau: 1.3, qtype_conditioning: cond, p_malformed: 0.0 };
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let mut counts: HashMap<String, usize> = HashMap::new();
            for i in 0..10_000 {
                let Generated::Entry(id) = g.sample(&fx.bank, &cfg, &mut rng) else { unreachable!() };
                let r = execute(&fx.bank.entry(id).program, &scenes[i % scenes.len()], &c);
                *counts.entry(r.answer.label()).or_default() += 1;
            }
            ent.push(entropy(&counts));
        }
        assert!(ent[0] > ent[1], "{ent:?}");
    }

    fn args<'a>(fx: &'a Fixture, g: &'a GeneratorModel, cfg: &'a GeneratorConfig, r: &'a RelevanceModel, mode: RelevanceMode, k: usize) -> ProposeArgs<'a> {
        ProposeArgs {
            bank: &fx.bank,
            generator: g,
            gen_cfg: cfg,
            featurizer: &fx.featurizer,
            relevance: r,
            mode,
            k,
            max_attempts: DEFAULT_MAX_ATTEMPTS,
        }
    }

    #[test]
    fn propose_accept_all() {
        let fx = fixture();
        let g = fit_generator(&[tuple(&appendix_query_color())], &fx.bank).unwrap();
        let cfg = GeneratorConfig::default();
        let r = RelevanceModel::new(fx.featurizer.cfg.dim);
        let s = appendix_scene();
        let sf = fx.featurizer.scene_features(&s);
        let set = propose_seeded(&args(fx, &g, &cfg, &r, RelevanceMode::Learned, 3), &s, &sf, &HashSet::new(), 5).unwrap();
        assert_eq!(set.proposals.len(), 3);
        assert!(!set.exhausted);
        let keys: HashSet<u32> = set.proposals.iter().map(|p| fx.bank.entry(p.id).key_id).collect();
        assert_eq!(keys.len(), 3);
        assert_eq!(set.perfect_calls, 0);
        let again = propose_seeded(&args(fx, &g, &cfg, &r, RelevanceMode::Learned, 3), &s, &sf, &HashSet::new(), 5).unwrap();
        assert_eq!(set, again);
    }

    #[test]
    fn propose_exhausts_when_everything_was_asked() {
        let fx = fixture();
        let c = AttributeCatalog::default();
        // only the count-everything family has mass worth noting, but sampling is uniform over families,
        // so mark every key as asked to force exhaustion
        let g = fit_generator(&[tuple(&fx.bank.families.families[4].instantiate(&[], &c).unwrap())], &fx.bank).unwrap();
        let cfg = GeneratorConfig::default();
        let r = RelevanceModel::new(fx.featurizer.cfg.dim);
        let s = appendix_scene();
        let sf = fx.featurizer.scene_features(&s);
        let asked: HashSet<u32> = fx.bank.entries().iter().map(|e| e.key_id).collect();
        let mut a = args(fx, &g, &cfg, &r, RelevanceMode::None, 5);
        a.max_attempts = 300;
        let set = propose_seeded(&a, &s, &sf, &asked, 1).unwrap();
        assert!(set.exhausted);
        assert!(set.proposals.is_empty());
        assert_eq!(set.stats.attempts, 300);
    }

    #[test]
    fn perfect_filter_only_keeps_valid_questions() {
        let fx = fixture();
        let c = AttributeCatalog::default();
        let g = fit_generator(&[tuple(&appendix_query_color())], &fx.bank).unwrap();
        let cfg = GeneratorConfig::default();
        let r = RelevanceModel::new(fx.featurizer.cfg.dim);
        for seed in 0..5 {
            let s = generate_scene(seed, &c, 3, 10).unwrap();
            let sf = fx.featurizer.scene_features(&s);
            let set = propose_seeded(&args(fx, &g, &cfg, &r, RelevanceMode::Perfect, 50), &s, &sf, &HashSet::new(), seed).unwrap();
            assert!(set.perfect_calls > 0);
            for p in &set.proposals {
                let resp = execute(&fx.bank.entry(p.id).program, &s, &c);
                assert!(resp.e_valid && resp.e_present);
            }
        }
        let _ = AnswerSpace::new(&c);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn proposals_avoid_asked_keys(seed in 0u64..10_000, frac in 0.0f64..0.9) {
            let fx = fixture();
            let c = AttributeCatalog::default();
            let g = fit_generator(&[tuple(&appendix_query_color())], &fx.bank).unwrap();
            let cfg = GeneratorConfig::default();
            let r = RelevanceModel::new(fx.featurizer.cfg.dim);
            let s = generate_scene(seed, &c, 3, 10).unwrap();
            let sf = fx.featurizer.scene_features(&s);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let asked: HashSet<u32> = fx.bank.entries().iter().map(|e| e.key_id).filter(|_| rng.gen::<f64>() < frac).collect();
            let set = propose(&args(fx, &g, &cfg, &r, RelevanceMode::None, 50), &s, &sf, &asked, &mut rng).unwrap();
            for p in &set.proposals {
                prop_assert!(!asked.contains(&fx.bank.entry(p.id).key_id));
            }
        }
    }
}
