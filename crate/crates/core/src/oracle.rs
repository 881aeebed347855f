//! The oracle: executes question programs against ground-truth scenes.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::program::{validate, Op, Program, QuestionFamily, SlotValue, TypedProgram};
use crate::universe::{spatial_relate, AttributeCatalog, Dimension, Scene};

/// Rejection-sampling attempts before [`sample_truth_question`] gives up.
pub const MAX_TRUTH_REJECTIONS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Answer {
    Bool(bool),
    Count(usize),
    Attr(Dimension, String),
    Invalid { present: bool },
}

impl Answer {
    pub fn is_invalid(&self) -> bool {
        matches!(self, Answer::Invalid { .. })
    }

    pub fn label(&self) -> String {
        match self {
            Answer::Bool(true) => "yes".into(),
            Answer::Bool(false) => "no".into(),
            Answer::Count(n) => n.to_string(),
            Answer::Attr(d, v) => format!("{d}={v}"),
            Answer::Invalid { present: true } => "invalid(present)".into(),
            Answer::Invalid { present: false } => "invalid(absent)".into(),
        }
    }

    pub fn from_label(label: &str) -> Option<Answer> {
        Some(match label {
            "yes" => Answer::Bool(true),
            "no" => Answer::Bool(false),
            "invalid(present)" => Answer::Invalid { present: true },
            "invalid(absent)" => Answer::Invalid { present: false },
            _ => {
                if let Some((d, v)) = label.split_once('=') {
                    Answer::Attr(Dimension::from_name(d)?, v.to_string())
                } else {
                    Answer::Count(label.parse().ok()?)
                }
            }
        })
    }
}

impl fmt::Display for Answer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl Serialize for Answer {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.label())
    }
}

impl<'de> Deserialize<'de> for Answer {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Answer::from_label(&s).ok_or_else(|| serde::de::Error::custom(format!("unknown answer {s:?}")))
    }
}

/// Coarse answer categories used for per-type reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnswerType {
    Bool,
    Count,
    Size,
    Color,
    Material,
    Shape,
}

impl AnswerType {
    pub const ALL: [AnswerType; 6] = [
        AnswerType::Bool,
        AnswerType::Count,
        AnswerType::Size,
        AnswerType::Color,
        AnswerType::Material,
        AnswerType::Shape,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AnswerType::Bool => "bool",
            AnswerType::Count => "count",
            AnswerType::Size => "size",
            AnswerType::Color => "color",
            AnswerType::Material => "material",
            AnswerType::Shape => "shape",
        }
    }

    fn of_dimension(d: Dimension) -> AnswerType {
        match d {
            Dimension::Size => AnswerType::Size,
            Dimension::Color => AnswerType::Color,
            Dimension::Material => AnswerType::Material,
            Dimension::Shape => AnswerType::Shape,
        }
    }
}

/// The finite vocabulary of real answers, in a fixed order: no, yes,
/// counts 0..=max_count, then attribute values dimension by dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct AnswerSpace {
    answers: Vec<Answer>,
    count_offset: usize,
    dim_offsets: [usize; 4],
    catalog: AttributeCatalog,
}

impl AnswerSpace {
    pub fn new(catalog: &AttributeCatalog) -> AnswerSpace {
        let mut answers = vec![Answer::Bool(false), Answer::Bool(true)];
        let count_offset = answers.len();
        answers.extend((0..=catalog.max_count).map(Answer::Count));
        let mut dim_offsets = [0; 4];
        for dim in Dimension::ALL {
            dim_offsets[dim as usize] = answers.len();
            answers.extend(catalog.values(dim).iter().map(|v| Answer::Attr(dim, v.clone())));
        }
        AnswerSpace {
            answers,
            count_offset,
            dim_offsets,
            catalog: catalog.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }

    pub fn answers(&self) -> &[Answer] {
        &self.answers
    }

    pub fn get(&self, index: usize) -> &Answer {
        &self.answers[index]
    }

    /// Position of a real answer; `None` for invalid or out-of-catalog answers.
    pub fn index(&self, answer: &Answer) -> Option<usize> {
        match answer {
            Answer::Bool(b) => Some(*b as usize),
            Answer::Count(n) => (*n <= self.catalog.max_count).then_some(self.count_offset + n),
            Answer::Attr(d, v) => self
                .catalog
                .index_of(*d, v)
                .map(|i| self.dim_offsets[*d as usize] + i),
            Answer::Invalid { .. } => None,
        }
    }

    pub fn answer_type(&self, index: usize) -> AnswerType {
        match &self.answers[index] {
            Answer::Bool(_) => AnswerType::Bool,
            Answer::Count(_) => AnswerType::Count,
            Answer::Attr(d, _) => AnswerType::of_dimension(*d),
            Answer::Invalid { .. } => unreachable!("vocabulary holds real answers only"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleResponse {
    pub answer: Answer,
    pub e_valid: bool,
    pub e_present: bool,
}

impl OracleResponse {
    fn answered(answer: Answer) -> OracleResponse {
        OracleResponse {
            answer,
            e_valid: true,
            e_present: true,
        }
    }

    fn invalid(present: bool) -> OracleResponse {
        OracleResponse {
            answer: Answer::Invalid { present },
            e_valid: false,
            e_present: present,
        }
    }
}

/// Answers a program on a scene. Syntactically invalid programs get
/// `Invalid(present=false)`.
pub fn execute(program: &Program, scene: &Scene, catalog: &AttributeCatalog) -> OracleResponse {
    match validate(program, catalog) {
        Ok(typed) => execute_typed(&typed, scene),
        Err(_) => OracleResponse::invalid(false),
    }
}

#[derive(Debug, Clone)]
enum Value {
    Set(Vec<usize>),
    Object(usize),
    Int(usize),
    Bool(bool),
    Attr(Dimension, String),
}

/// Executes an already validated program.
pub fn execute_typed(program: &TypedProgram, scene: &Scene) -> OracleResponse {
    match run(program, scene) {
        Some(answer) => OracleResponse::answered(answer),
        None => OracleResponse::invalid(objects_present(program, scene)),
    }
}

fn run(program: &TypedProgram, scene: &Scene) -> Option<Answer> {
    let mut values: Vec<Value> = Vec::with_capacity(program.ops.len());
    // Types were checked by validation, so these projections cannot miss.
    fn set(values: &[Value], i: usize) -> &[usize] {
        match &values[i] {
            Value::Set(s) => s,
            _ => unreachable!("validated program"),
        }
    }
    fn obj(values: &[Value], i: usize) -> usize {
        match values[i] {
            Value::Object(o) => o,
            _ => unreachable!("validated program"),
        }
    }
    fn int(values: &[Value], i: usize) -> usize {
        match values[i] {
            Value::Int(n) => n,
            _ => unreachable!("validated program"),
        }
    }
    for op in &program.ops {
        let v = match op {
            Op::Scene => Value::Set((0..scene.objects.len()).collect()),
            Op::Filter { input, dim, value } => Value::Set(
                set(&values, *input)
                    .iter()
                    .copied()
                    .filter(|&o| scene.objects[o].attribute(*dim) == value)
                    .collect(),
            ),
            Op::Unique(i) => match set(&values, *i) {
                [only] => Value::Object(*only),
                _ => return None,
            },
            Op::Relate(i, r) => Value::Set(spatial_relate(scene, obj(&values, *i), *r)),
            Op::Same(i, d) => {
                let anchor = obj(&values, *i);
                let want = scene.objects[anchor].attribute(*d);
                Value::Set(
                    (0..scene.objects.len())
                        .filter(|&o| o != anchor && scene.objects[o].attribute(*d) == want)
                        .collect(),
                )
            }
            Op::Count(i) => Value::Int(set(&values, *i).len()),
            Op::Exist(i) => Value::Bool(!set(&values, *i).is_empty()),
            Op::Query(i, d) => Value::Attr(*d, scene.objects[obj(&values, *i)].attribute(*d).to_string()),
            Op::EqualAttr(a, b, d) => {
                let (a, b) = (obj(&values, *a), obj(&values, *b));
                Value::Bool(scene.objects[a].attribute(*d) == scene.objects[b].attribute(*d))
            }
            Op::EqualInteger(a, b) => Value::Bool(int(&values, *a) == int(&values, *b)),
            Op::GreaterThan(a, b) => Value::Bool(int(&values, *a) > int(&values, *b)),
            Op::LessThan(a, b) => Value::Bool(int(&values, *a) < int(&values, *b)),
            Op::Union(a, b) => {
                let mut s: Vec<usize> = set(&values, *a).to_vec();
                s.extend_from_slice(set(&values, *b));
                s.sort_unstable();
                s.dedup();
                Value::Set(s)
            }
            Op::Intersect(a, b) => {
                let right = set(&values, *b);
                Value::Set(
                    set(&values, *a)
                        .iter()
                        .copied()
                        .filter(|o| right.contains(o))
                        .collect(),
                )
            }
        };
        values.push(v);
    }
    Some(match values.pop()? {
        Value::Int(n) => Answer::Count(n),
        Value::Bool(b) => Answer::Bool(b),
        Value::Attr(d, v) => Answer::Attr(d, v),
        Value::Set(_) | Value::Object(_) => unreachable!("validated root"),
    })
}

/// The objects a question mentions are present iff, for every filter node,
/// the conjunction of the filters in its chain matches something in the
/// whole scene.
fn objects_present(program: &TypedProgram, scene: &Scene) -> bool {
    let mut constraints: Vec<(Dimension, &str)> = Vec::new();
    for (i, op) in program.ops.iter().enumerate() {
        if !matches!(op, Op::Filter { .. }) {
            continue;
        }
        constraints.clear();
        let mut cur = i;
        while let Op::Filter { input, dim, value } = &program.ops[cur] {
            constraints.push((*dim, value.as_str()));
            cur = *input;
        }
        let any = scene
            .objects
            .iter()
            .any(|o| constraints.iter().all(|(d, v)| o.attribute(*d) == *v));
        if !any {
            return false;
        }
    }
    true
}

/// A second, deliberately naive evaluator over raw nodes: recursive, no
/// memoisation, objects as plain index lists. For differential testing.
pub fn reference_execute(program: &Program, scene: &Scene, catalog: &AttributeCatalog) -> OracleResponse {
    if validate(program, catalog).is_err() {
        return OracleResponse::invalid(false);
    }
    match reference_eval(program, scene, program.nodes.len() - 1) {
        Ok(RefValue::Int(n)) => OracleResponse::answered(Answer::Count(n)),
        Ok(RefValue::Bool(b)) => OracleResponse::answered(Answer::Bool(b)),
        Ok(RefValue::Text(d, v)) => OracleResponse::answered(Answer::Attr(d, v)),
        Ok(_) => unreachable!("root type checked by validation"),
        Err(()) => {
            let present = (0..program.nodes.len())
                .filter(|&i| program.nodes[i].function.starts_with("filter_"))
                .all(|i| {
                    scene
                        .objects
                        .iter()
                        .any(|o| reference_chain_matches(program, i, o))
                });
            OracleResponse::invalid(present)
        }
    }
}

enum RefValue {
    List(Vec<usize>),
    One(usize),
    Int(usize),
    Bool(bool),
    Text(Dimension, String),
}

fn suffix_dim(name: &str) -> Dimension {
    let tail = name.rsplit('_').next().unwrap_or_default();
    Dimension::from_name(tail).expect("validated function name")
}

fn reference_chain_matches(program: &Program, node: usize, object: &crate::universe::ObjectSpec) -> bool {
    let n = &program.nodes[node];
    if !n.function.starts_with("filter_") {
        return true;
    }
    object.attribute(suffix_dim(&n.function)) == n.value_inputs[0]
        && reference_chain_matches(program, n.inputs[0], object)
}

fn reference_eval(program: &Program, scene: &Scene, node: usize) -> Result<RefValue, ()> {
    let n = &program.nodes[node];
    let arg = |k: usize| reference_eval(program, scene, n.inputs[k]);
    let list = |k: usize| match arg(k)? {
        RefValue::List(l) => Ok(l),
        _ => Err(()),
    };
    let one = |k: usize| match arg(k)? {
        RefValue::One(o) => Ok(o),
        _ => Err(()),
    };
    let int = |k: usize| match arg(k)? {
        RefValue::Int(i) => Ok(i),
        _ => Err(()),
    };
    let all: Vec<usize> = (0..scene.objects.len()).collect();
    let f = n.function.as_str();
    Ok(if f == "scene" {
        RefValue::List(all)
    } else if f.starts_with("filter_") {
        let d = suffix_dim(f);
        let input = list(0)?;
        let mut out = Vec::new();
        for o in input {
            if scene.objects[o].attribute(d) == n.value_inputs[0] {
                out.push(o);
            }
        }
        RefValue::List(out)
    } else if f == "unique" {
        let l = list(0)?;
        if l.len() != 1 {
            return Err(());
        }
        RefValue::One(l[0])
    } else if f == "relate" {
        let anchor = one(0)?;
        let a = scene.objects[anchor].coords_3d;
        let eps = crate::universe::TIE_EPS;
        let mut out = Vec::new();
        for o in all {
            if o == anchor {
                continue;
            }
            let c = scene.objects[o].coords_3d;
            let keep = match n.value_inputs[0].as_str() {
                "left" => c[0] < a[0] - eps,
                "right" => c[0] > a[0] + eps,
                "front" => c[1] < a[1] - eps,
                "behind" => c[1] > a[1] + eps,
                _ => return Err(()),
            };
            if keep {
                out.push(o);
            }
        }
        RefValue::List(out)
    } else if f.starts_with("same_") {
        let d = suffix_dim(f);
        let anchor = one(0)?;
        let want = scene.objects[anchor].attribute(d);
        RefValue::List(
            all.into_iter()
                .filter(|&o| o != anchor && scene.objects[o].attribute(d) == want)
                .collect(),
        )
    } else if f == "count" {
        RefValue::Int(list(0)?.len())
    } else if f == "exist" {
        RefValue::Bool(!list(0)?.is_empty())
    } else if f.starts_with("query_") {
        let d = suffix_dim(f);
        let o = one(0)?;
        RefValue::Text(d, scene.objects[o].attribute(d).to_string())
    } else if f == "equal_integer" {
        RefValue::Bool(int(0)? == int(1)?)
    } else if f == "greater_than" {
        RefValue::Bool(int(0)? > int(1)?)
    } else if f == "less_than" {
        RefValue::Bool(int(0)? < int(1)?)
    } else if f.starts_with("equal_") {
        let d = suffix_dim(f);
        let (a, b) = (one(0)?, one(1)?);
        RefValue::Bool(scene.objects[a].attribute(d) == scene.objects[b].attribute(d))
    } else if f == "union" {
        let (a, b) = (list(0)?, list(1)?);
        RefValue::List(all.into_iter().filter(|o| a.contains(o) || b.contains(o)).collect())
    } else if f == "intersect" {
        let (a, b) = (list(0)?, list(1)?);
        RefValue::List(all.into_iter().filter(|o| a.contains(o) && b.contains(o)).collect())
    } else {
        return Err(());
    })
}

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("family {family} has no valid question on scene {scene} after {attempts} attempts")]
    Exhausted {
        family: usize,
        scene: String,
        attempts: usize,
    },
    #[error("oracle budget exhausted")]
    BudgetExhausted,
}

/// Draws slot values uniformly until the family yields a valid question on the scene.
pub fn sample_truth_question(
    scene: &Scene,
    family: &QuestionFamily,
    catalog: &AttributeCatalog,
    seed: u64,
) -> Result<Program, OracleError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let domains: Vec<Vec<SlotValue>> = family
        .slots
        .iter()
        .map(|&k| SlotValue::domain(k, catalog))
        .collect();
    let mut slots: Vec<SlotValue> = Vec::with_capacity(domains.len());
    for _ in 0..MAX_TRUTH_REJECTIONS {
        slots.clear();
        slots.extend(domains.iter().map(|d| d[rng.gen_range(0..d.len())].clone()));
        let Ok(program) = family.instantiate(&slots, catalog) else {
            continue;
        };
        if execute(&program, scene, catalog).e_valid {
            return Ok(program);
        }
    }
    Err(OracleError::Exhausted {
        family: family.id,
        scene: scene.id.clone(),
        attempts: MAX_TRUTH_REJECTIONS,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub step: u64,
    pub scene_id: String,
    pub program: String,
    pub answer: Answer,
    pub e_valid: bool,
    pub e_present: bool,
}

/// Counts oracle calls against a fixed budget and keeps an audit trail.
#[derive(Debug, Clone)]
pub struct BudgetLedger {
    pub remaining: u64,
    pub step: u64,
    pub audit: Vec<AuditRecord>,
}

impl BudgetLedger {
    pub fn new(budget: u64) -> BudgetLedger {
        BudgetLedger {
            remaining: budget,
            step: 0,
            audit: Vec::new(),
        }
    }

    pub fn audit_jsonl(&self) -> String {
        let mut out = String::new();
        for rec in &self.audit {
            out.push_str(&serde_json::to_string(rec).expect("audit record serializes"));
            out.push('\n');
        }
        out
    }
}

/// One charged oracle call. Invalid responses cost the same as answers.
pub fn answer_with_budget(
    ledger: &mut BudgetLedger,
    program: &Program,
    scene: &Scene,
    catalog: &AttributeCatalog,
) -> Result<OracleResponse, OracleError> {
    if ledger.remaining == 0 {
        return Err(OracleError::BudgetExhausted);
    }
    let response = execute(program, scene, catalog);
    ledger.remaining -= 1;
    ledger.audit.push(AuditRecord {
        step: ledger.step,
        scene_id: scene.id.clone(),
        program: program.serialize(),
        answer: response.answer.clone(),
        e_valid: response.e_valid,
        e_present: response.e_present,
    });
    ledger.step += 1;
    Ok(response)
}
