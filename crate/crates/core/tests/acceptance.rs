//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::time::Instant;

use lba::features::{FeatureConfig, FeatureVector, Featurizer, Fnv};
use lba::harness::{decile_profiles, run_lba, LBAConfig, RunSummary, StepMetrics, DECILES};
use lba::learners::SoftmaxModel;
use lba::oracle::{execute, reference_execute, AnswerSpace};
use lba::program::FamilyCatalog;
use lba::proposal::{QuestionBank, RelevanceMode};
use lba::selection::{informativeness, PolicyKind};
use lba::universe::{generate_scene, AttributeCatalog};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 5;
const ORACLE_SCENES: u64 = 200;
const H_TOL: f64 = 1e-12;
const GRAD_TOL: f64 = 1e-4;

struct Report {
    lines: Vec<(usize, bool, String)>,
}

impl Report {
    fn record(&mut self, id: usize, pass: bool, detail: String) {
        println!("criterion {id:>2} [{}] {detail}", if pass { "PASS" } else { "FAIL" });
        self.lines.push((id, pass, detail));
    }
}

/// h by direct summation, written independently of the library routine.
fn h_direct(v: &[f64], s_t: &[f64], s_prev: &[f64]) -> f64 {
    let mut h = 0.0;
    for a in 0..v.len() {
        if s_t[a] > 0.0 {
            h += v[a] * ((s_t[a] - s_prev[a]) / s_t[a]);
        }
    }
    h
}

fn oracle_equivalence(rep: &mut Report) {
    let t = Instant::now();
    let catalog = AttributeCatalog::default();
    let featurizer = Featurizer::new(FeatureConfig { dim: 1 << 10, grounding: false }, &catalog);
    let bank = QuestionBank::new(&FamilyCatalog::default(), &catalog, &featurizer).expect("bank");
    let mut checked = 0u64;
    let mut mismatches = 0u64;
    for i in 0..ORACLE_SCENES {
        let scene = generate_scene(0xACCE_0000 + i, &catalog, 3, 10).expect("scene");
        for e in bank.entries() {
            checked += 1;
            if execute(&e.program, &scene, &catalog) != reference_execute(&e.program, &scene, &catalog) {
                mismatches += 1;
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    rep.record(
        1,
        mismatches == 0 && secs < 60.0,
        format!(
            "oracle matches reference interpreter: {mismatches} mismatches over {} programs x {ORACLE_SCENES} scenes = {checked} pairs in {secs:.1}s",
            bank.len()
        ),
    );
}

fn informativeness_suite(rep: &mut Report) {
    let mut worst: f64 = 0.0;
    let examples: [(&[f64], &[f64], &[f64], f64); 3] = [
        (&[0.2, 0.3, 0.5], &[0.1, 0.7, 0.4], &[0.0, 0.0, 0.0], 1.0),
        (&[0.5, 0.5], &[0.4, 0.8], &[0.2, 0.8], 0.25),
        (&[0.5, 0.5], &[0.4, 0.0], &[0.2, 0.0], 0.25),
    ];
    for (v, s, sp, want) in examples {
        worst = worst.max((informativeness(v, s, sp) - want).abs());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..1000 {
        let n = rng.gen_range(1..=28);
        let raw: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let total: f64 = raw.iter().sum();
        let v: Vec<f64> = raw.iter().map(|x| x / total).collect();
        let s: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.2) { 0.0 } else { rng.gen() }).collect();
        let sp: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
        worst = worst.max((informativeness(&v, &s, &sp) - h_direct(&v, &s, &sp)).abs());
    }
    rep.record(
        2,
        worst <= H_TOL,
        format!("informativeness examples and 1000 fuzzed triples: max |dh| = {worst:.2e}"),
    );
}

fn gradient_check(rep: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (dim, classes) = (64, rng.gen_range(2..=28));
        let mut m = SoftmaxModel::new(dim, classes);
        for w in m.weights.iter_mut() {
            *w = rng.gen_range(-1.0..1.0);
        }
        let mut idx: Vec<u32> = (0..rng.gen_range(1..8)).map(|_| rng.gen_range(0..dim as u32)).collect();
        idx.push(0);
        let f = FeatureVector::from_indices(idx);
        let target = rng.gen_range(0..classes);
        for (j, c, g) in m.gradient(&f, target) {
            let k = j as usize * classes + c;
            let mut plus = m.clone();
            plus.weights[k] += eps;
            let mut minus = m.clone();
            minus.weights[k] -= eps;
            let numeric = (plus.loss(&f, target) - minus.loss(&f, target)) / (2.0 * eps);
            worst = worst.max((g - numeric).abs() / g.abs().max(numeric.abs()).max(1e-6));
        }
    }
    rep.record(
        12,
        worst <= GRAD_TOL,
        format!("analytic vs central-difference gradients on 50 cases: max relative error {worst:.2e}"),
    );
}

/// What the criteria need from one run.
struct Outcome {
    summary: RunSummary,
    /// (steps checked, steps with all-positive state, max deviation) for steps before the look-back window.
    early_h: (usize, usize, f64),
    profiles: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
    metrics_hash: u64,
    audit_hash: u64,
}

fn early_h_check(steps: &[StepMetrics], delta: u64) -> (usize, usize, f64) {
    let (mut n, mut all_pos, mut worst) = (0, 0, 0.0f64);
    for s in steps.iter().filter(|s| s.t < delta) {
        n += 1;
        let zeros = vec![0.0; s.s_t.len()];
        let recomputed = h_direct(&s.v_dist, &s.s_t, &zeros);
        let support: f64 = s.v_dist.iter().zip(&s.s_t).filter(|(_, &x)| x > 0.0).map(|(v, _)| v).sum();
        worst = worst.max((recomputed - s.h_chosen).abs()).max((recomputed - support).abs());
        if s.s_t.iter().all(|&x| x > 0.0) {
            all_pos += 1;
            worst = worst.max((recomputed - 1.0).abs());
        }
    }
    (n, all_pos, worst)
}

fn run(cfg: &LBAConfig, space: &AnswerSpace) -> Outcome {
    let (_, rec) = run_lba(cfg).unwrap_or_else(|e| panic!("run {} failed: {e}", cfg.name.clone().unwrap_or_default()));
    let hash = |s: &str| Fnv::new().write(s.as_bytes()).finish();
    Outcome {
        early_h: early_h_check(&rec.steps, cfg.delta),
        profiles: decile_profiles(&rec.steps, space)
            .into_iter()
            .map(|p| (p.answer_type, (p.mean_h, p.accuracy)))
            .collect(),
        metrics_hash: hash(&rec.metrics_jsonl()),
        audit_hash: hash(&rec.audit_jsonl()),
        summary: rec.summary,
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn first_argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..xs.len() {
        if xs[i] > xs[best] {
            best = i;
        }
    }
    best
}

fn main() {
    let start = Instant::now();
    let mut rep = Report { lines: Vec::new() };
    oracle_equivalence(&mut rep);
    informativeness_suite(&mut rep);
    gradient_check(&mut rep);

    let base = LBAConfig::default();
    let cell = |name: &str, f: &dyn Fn(&mut LBAConfig)| {
        let mut c = LBAConfig { name: Some(name.to_string()), ..base.clone() };
        f(&mut c);
        c
    };
    let grid = vec![
        cell("curriculum", &|_| {}),
        cell("random", &|c| c.policy = PolicyKind::Random),
        cell("entropy", &|c| c.policy = PolicyKind::Entropy),
        cell("variation_ratio", &|c| c.policy = PolicyKind::VariationRatio),
        cell("relevance_none", &|c| c.relevance = RelevanceMode::None),
        cell("relevance_perfect", &|c| c.relevance = RelevanceMode::Perfect),
        cell("tau_0.3", &|c| c.tau = 0.3),
        cell("tau_0.7", &|c| c.tau = 0.7),
        cell("qtype_off", &|c| c.qtype_conditioning = false),
        cell("bootstrap_500", &|c| c.bootstrap_size = 500),
        cell("bootstrap_1000", &|c| c.bootstrap_size = 1000),
        cell("images_100", &|c| c.n_images = 100),
        cell("images_500", &|c| c.n_images = 500),
    ];
    let space = AnswerSpace::new(&base.catalog);
    let mut results: BTreeMap<String, Vec<Outcome>> = BTreeMap::new();
    for cfg in &grid {
        let t = Instant::now();
        let outs: Vec<Outcome> = (0..SEEDS)
            .map(|s| run(&LBAConfig { seed: base.seed + s, ..cfg.clone() }, &space))
            .collect();
        let name = cfg.name.clone().expect("named cell");
        println!(
            "  {name}: final accuracy {:.4} over {SEEDS} seeds ({:.0}s)",
            mean(outs.iter().map(|o| o.summary.final_accuracy)),
            t.elapsed().as_secs_f64()
        );
        results.insert(name, outs);
    }
    let acc = |name: &str| mean(results[name].iter().map(|o| o.summary.final_accuracy));
    let acc_at = |name: &str, budget: u64| {
        mean(results[name].iter().map(|o| {
            o.summary
                .checkpoints
                .iter()
                .find(|c| c.budget == budget)
                .expect("checkpoint present")
                .accuracy
        }))
    };
    let gen_h = |name: &str| mean(results[name].iter().map(|o| o.summary.generated_answer_entropy));
    let acq_h = |name: &str| mean(results[name].iter().map(|o| o.summary.answer_entropy));

    // 3
    let (mut n, mut all_pos, mut worst) = (0, 0, 0.0f64);
    for outs in results.values() {
        for o in outs {
            n += o.early_h.0;
            all_pos += o.early_h.1;
            worst = worst.max(o.early_h.2);
        }
    }
    rep.record(
        3,
        n > 0 && worst <= H_TOL,
        format!(
            "early-step law: {n} steps with t < {} recomputed with zero look-back state, {all_pos} with all-positive state; max deviation {worst:.2e}",
            base.delta
        ),
    );

    // 4
    let (cur, rnd) = (acc("curriculum"), acc("random"));
    let cur80 = acc_at("curriculum", (base.budget as f64 * 0.8).round() as u64);
    rep.record(
        4,
        cur >= rnd + 0.02 && cur80 >= rnd,
        format!("curriculum {cur:.4} vs random {rnd:.4} (needs +0.02); curriculum at 80% budget {cur80:.4} vs random final {rnd:.4}"),
    );

    // 5
    let (ent, vr) = (acc("entropy"), acc("variation_ratio"));
    rep.record(
        5,
        ent <= rnd + 0.01 && vr <= rnd + 0.01,
        format!("entropy {ent:.4}, variation ratio {vr:.4} vs random {rnd:.4} (each must be <= random + 0.01)"),
    );

    // 6
    let drops: Vec<f64> = results["curriculum"]
        .iter()
        .map(|o| o.summary.invalid_rate_by_decile[0] - o.summary.invalid_rate_by_decile[DECILES - 1])
        .collect();
    let first = mean(results["curriculum"].iter().map(|o| o.summary.invalid_rate_by_decile[0]));
    let last = mean(results["curriculum"].iter().map(|o| o.summary.invalid_rate_by_decile[DECILES - 1]));
    let drop = mean(drops.into_iter());
    rep.record(
        6,
        drop >= 0.10,
        format!("invalid rate first decile {first:.3} -> last decile {last:.3}, mean drop {drop:.3} (needs >= 0.10)"),
    );

    // 7
    let (none, learned, perfect) = (acc("relevance_none"), acc("curriculum"), acc("relevance_perfect"));
    rep.record(
        7,
        perfect >= learned && learned >= none && learned - none >= 0.02,
        format!("relevance perfect {perfect:.4} >= learned {learned:.4} >= none {none:.4}, learned - none = {:.4} (needs >= 0.02)", learned - none),
    );

    // 8
    let (h03, h07, h13) = (gen_h("tau_0.3"), gen_h("tau_0.7"), gen_h("curriculum"));
    let (a03, a13) = (acc("tau_0.3"), acc("curriculum"));
    rep.record(
        8,
        a13 >= a03 && h03 < h07 && h07 < h13,
        format!("accuracy tau 1.3 {a13:.4} vs 0.3 {a03:.4}; generated-answer entropy tau 0.3/0.7/1.3 = {h03:.4}/{h07:.4}/{h13:.4} (must increase); acquired-answer entropy {:.4}/{:.4}/{:.4}", acq_h("tau_0.3"), acq_h("tau_0.7"), acq_h("curriculum")),
    );

    // 9
    let (h_on, h_off) = (gen_h("curriculum"), gen_h("qtype_off"));
    let (a_on, a_off) = (acc("curriculum"), acc("qtype_off"));
    rep.record(
        9,
        h_on > h_off && a_on >= a_off + 0.02,
        format!("type conditioning on/off: entropy {h_on:.4}/{h_off:.4}, accuracy {a_on:.4}/{a_off:.4} (needs +0.02)"),
    );

    // 10
    let (b5, b10, b20) = (acc("bootstrap_500"), acc("bootstrap_1000"), acc("curriculum"));
    rep.record(
        10,
        b10 >= b5 - 0.01 && b20 >= b10 - 0.01,
        format!("bootstrap size 500/1000/2000: {b5:.4}/{b10:.4}/{b20:.4} (non-decreasing within 0.01)"),
    );

    // 11
    let (n1, n5, n20) = (acc("images_100"), acc("images_500"), acc("curriculum"));
    rep.record(
        11,
        n5 >= n1 - 0.01 && n20 >= n5 - 0.01,
        format!("image count 100/500/2000: {n1:.4}/{n5:.4}/{n20:.4} (non-decreasing within 0.01)"),
    );

    // 13
    let again = run(&LBAConfig { seed: base.seed, ..grid[0].clone() }, &space);
    let first_run = &results["curriculum"][0];
    rep.record(
        13,
        again.metrics_hash == first_run.metrics_hash && again.audit_hash == first_run.audit_hash,
        format!(
            "repeat run with the same seed: metrics {:016x}/{:016x}, audit {:016x}/{:016x}",
            first_run.metrics_hash, again.metrics_hash, first_run.audit_hash, again.audit_hash
        ),
    );

    // 14
    let mut good_runs = 0;
    let mut per_run = Vec::new();
    for o in &results["curriculum"] {
        let mut ok_types = Vec::new();
        for ty in ["color", "shape", "count"] {
            let (h, a) = &o.profiles[ty];
            let peak_h = first_argmax(h);
            let slopes: Vec<f64> = (1..a.len()).map(|d| a[d] - a[d - 1]).collect();
            let peak_slope = 1 + first_argmax(&slopes);
            if peak_h <= peak_slope {
                ok_types.push(ty);
            }
        }
        per_run.push(ok_types.len());
        if ok_types.len() >= 2 {
            good_runs += 1;
        }
    }
    rep.record(
        14,
        good_runs >= 3,
        format!("informativeness peak precedes steepest accuracy rise for >= 2 types in {good_runs}/{SEEDS} runs (types per run {per_run:?})"),
    );

    rep.lines.sort_by_key(|l| l.0);
    let failed: Vec<usize> = rep.lines.iter().filter(|l| !l.1).map(|l| l.0).collect();
    println!(
        "acceptance: {}/{} criteria passed in {:.0}s",
        rep.lines.len() - failed.len(),
        rep.lines.len(),
        start.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
