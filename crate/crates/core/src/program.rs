//! Question programs: the function catalog, prefix-tree program structure,
//! validation, canonical serialization and question families.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::universe::{AttributeCatalog, Dimension, Relation};

/// Programs longer than this are rejected by [`validate`].
pub const MAX_PROGRAM_NODES: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueKind {
    ObjectSet,
    Object,
    Integer,
    Bool,
    AttributeValue,
}

impl fmt::Display for ValueKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ValueKind::ObjectSet => "ObjectSet",
            ValueKind::Object => "Object",
            ValueKind::Integer => "Integer",
            ValueKind::Bool => "Bool",
            ValueKind::AttributeValue => "AttributeValue",
        };
        f.write_str(s)
    }
}

/// A constant argument a function expects in `value_inputs`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstantKind {
    Attribute(Dimension),
    Relation,
}

/// The fixed function vocabulary of the question language.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Function {
    Scene,
    Filter(Dimension),
    Unique,
    Relate,
    Same(Dimension),
    Count,
    Exist,
    Query(Dimension),
    Equal(Dimension),
    EqualInteger,
    GreaterThan,
    LessThan,
    Union,
    Intersect,
}

impl Function {
    pub fn from_name(name: &str) -> Option<Function> {
        let by_dim = |prefix: &str| {
            name.strip_prefix(prefix)
                .and_then(|rest| rest.strip_prefix('_'))
                .and_then(Dimension::from_name)
        };
        Some(match name {
            "scene" => Function::Scene,
            "unique" => Function::Unique,
            "relate" => Function::Relate,
            "count" => Function::Count,
            "exist" => Function::Exist,
            "equal_integer" => Function::EqualInteger,
            "greater_than" => Function::GreaterThan,
            "less_than" => Function::LessThan,
            "union" => Function::Union,
            "intersect" => Function::Intersect,
            _ => {
                if let Some(d) = by_dim("filter") {
                    Function::Filter(d)
                } else if let Some(d) = by_dim("same") {
                    Function::Same(d)
                } else if let Some(d) = by_dim("query") {
                    Function::Query(d)
                } else if let Some(d) = by_dim("equal") {
                    Function::Equal(d)
                } else {
                    return None;
                }
            }
        })
    }

    pub fn name(self) -> String {
        match self {
            Function::Scene => "scene".into(),
            Function::Filter(d) => format!("filter_{d}"),
            Function::Unique => "unique".into(),
            Function::Relate => "relate".into(),
            Function::Same(d) => format!("same_{d}"),
            Function::Count => "count".into(),
            Function::Exist => "exist".into(),
            Function::Query(d) => format!("query_{d}"),
            Function::Equal(d) => format!("equal_{d}"),
            Function::EqualInteger => "equal_integer".into(),
            Function::GreaterThan => "greater_than".into(),
            Function::LessThan => "less_than".into(),
            Function::Union => "union".into(),
            Function::Intersect => "intersect".into(),
        }
    }

    pub fn signature(self) -> FunctionSig {
        use ValueKind::*;
        let (inputs, constants, output): (Vec<ValueKind>, Vec<ConstantKind>, ValueKind) = match self
        {
            Function::Scene => (vec![], vec![], ObjectSet),
            Function::Filter(d) => (vec![ObjectSet], vec![ConstantKind::Attribute(d)], ObjectSet),
            Function::Unique => (vec![ObjectSet], vec![], Object),
            Function::Relate => (vec![Object], vec![ConstantKind::Relation], ObjectSet),
            Function::Same(_) => (vec![Object], vec![], ObjectSet),
            Function::Count => (vec![ObjectSet], vec![], Integer),
            Function::Exist => (vec![ObjectSet], vec![], Bool),
            Function::Query(_) => (vec![Object], vec![], AttributeValue),
            Function::Equal(_) => (vec![Object, Object], vec![], Bool),
            Function::EqualInteger | Function::GreaterThan | Function::LessThan => {
                (vec![Integer, Integer], vec![], Bool)
            }
            Function::Union | Function::Intersect => (vec![ObjectSet, ObjectSet], vec![], ObjectSet),
        };
        FunctionSig {
            name: self.name(),
            input_types: inputs,
            value_inputs: constants,
            output_type: output,
        }
    }

    /// The full catalog, one entry per function name.
    pub fn catalog() -> Vec<Function> {
        let mut all = vec![Function::Scene];
        all.extend(Dimension::ALL.map(Function::Filter));
        all.extend([Function::Unique, Function::Relate]);
        all.extend(Dimension::ALL.map(Function::Same));
        all.extend([Function::Count, Function::Exist]);
        all.extend(Dimension::ALL.map(Function::Query));
        all.extend(Dimension::ALL.map(Function::Equal));
        all.extend([
            Function::EqualInteger,
            Function::GreaterThan,
            Function::LessThan,
            Function::Union,
            Function::Intersect,
        ]);
        all
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FunctionSig {
    pub name: String,
    pub input_types: Vec<ValueKind>,
    pub value_inputs: Vec<ConstantKind>,
    pub output_type: ValueKind,
}

/// One function application in a program. Inputs index earlier nodes.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Node {
    pub function: String,
    pub inputs: Vec<usize>,
    pub value_inputs: Vec<String>,
}

impl Node {
    pub fn new(function: impl Into<String>, inputs: Vec<usize>, value_inputs: Vec<String>) -> Node {
        Node {
            function: function.into(),
            inputs,
            value_inputs,
        }
    }
}

/// A question as a topologically ordered DAG of function nodes; the last node is the root.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct Program {
    pub nodes: Vec<Node>,
}

impl Program {
    pub fn new(nodes: Vec<Node>) -> Program {
        Program { nodes }
    }

    pub fn root(&self) -> Option<usize> {
        self.nodes.len().checked_sub(1)
    }

    /// Compact JSON with keys in sorted order; byte-deterministic.
    pub fn serialize(&self) -> String {
        serde_json::to_string(&self.nodes).expect("program serialization is infallible")
    }

    pub fn parse(text: &str) -> Result<Program, ParseError> {
        let nodes: Vec<Node> = serde_json::from_str(text).map_err(|e| ParseError::Malformed {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        if nodes.is_empty() {
            return Err(ParseError::Empty);
        }
        for (i, node) in nodes.iter().enumerate() {
            if let Some(&bad) = node.inputs.iter().find(|&&j| j >= i) {
                return Err(ParseError::ForwardReference { node: i, input: bad });
            }
        }
        Ok(Program { nodes })
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ParseError {
    #[error("malformed program JSON at line {line}, column {column}: {message}")]
    Malformed {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("empty program: missing scene root")]
    Empty,
    #[error("node {node} references node {input}, which does not precede it")]
    ForwardReference { node: usize, input: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InvalidReason {
    #[error("unknown function {0:?}")]
    UnknownFunction(String),
    #[error("expected {expected} inputs and {expected_values} value inputs, found {found} and {found_values}")]
    Arity {
        expected: usize,
        found: usize,
        expected_values: usize,
        found_values: usize,
    },
    #[error("input {position} must be {expected}, found {found}")]
    TypeMismatch {
        position: usize,
        expected: ValueKind,
        found: ValueKind,
    },
    #[error("input {0} does not reference an earlier node")]
    ForwardReference(usize),
    #[error("constant {0:?} is not a catalog member of the expected kind")]
    BadConstant(String),
    #[error("bad root: {0}")]
    BadRoot(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("node {node}: {reason}")]
pub struct ValidationError {
    pub node: usize,
    pub reason: InvalidReason,
}

/// A validated program with resolved functions and constants.
#[derive(Debug, Clone, PartialEq)]
pub struct TypedProgram {
    pub ops: Vec<Op>,
    pub output: ValueKind,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Scene,
    Filter {
        input: usize,
        dim: Dimension,
        value: String,
    },
    Unique(usize),
    Relate(usize, Relation),
    Same(usize, Dimension),
    Count(usize),
    Exist(usize),
    Query(usize, Dimension),
    EqualAttr(usize, usize, Dimension),
    EqualInteger(usize, usize),
    GreaterThan(usize, usize),
    LessThan(usize, usize),
    Union(usize, usize),
    Intersect(usize, usize),
}

/// Checks syntax and types. Total: never panics, whatever the node list.
pub fn validate(program: &Program, catalog: &AttributeCatalog) -> Result<TypedProgram, ValidationError> {
    let nodes = &program.nodes;
    let fail = |node: usize, reason: InvalidReason| Err(ValidationError { node, reason });
    if nodes.is_empty() {
        return fail(0, InvalidReason::BadRoot("empty program".into()));
    }
    if nodes.len() > MAX_PROGRAM_NODES {
        return fail(
            MAX_PROGRAM_NODES,
            InvalidReason::BadRoot(format!(
                "{} nodes exceeds the maximum of {MAX_PROGRAM_NODES}",
                nodes.len()
            )),
        );
    }
    let mut kinds: Vec<ValueKind> = Vec::with_capacity(nodes.len());
    let mut ops = Vec::with_capacity(nodes.len());
    for (i, node) in nodes.iter().enumerate() {
        let Some(function) = Function::from_name(&node.function) else {
            return fail(i, InvalidReason::UnknownFunction(node.function.clone()));
        };
        if (i == 0) != (function == Function::Scene) {
            let msg = if i == 0 {
                "node 0 must be scene"
            } else {
                "scene may only appear at node 0"
            };
            return fail(i, InvalidReason::BadRoot(msg.into()));
        }
        let sig = function.signature();
        if node.inputs.len() != sig.input_types.len() || node.value_inputs.len() != sig.value_inputs.len() {
            return fail(
                i,
                InvalidReason::Arity {
                    expected: sig.input_types.len(),
                    found: node.inputs.len(),
                    expected_values: sig.value_inputs.len(),
                    found_values: node.value_inputs.len(),
                },
            );
        }
        for (pos, (&input, &expected)) in node.inputs.iter().zip(&sig.input_types).enumerate() {
            if input >= i {
                return fail(i, InvalidReason::ForwardReference(input));
            }
            if kinds[input] != expected {
                return fail(
                    i,
                    InvalidReason::TypeMismatch {
                        position: pos,
                        expected,
                        found: kinds[input],
                    },
                );
            }
        }
        for (value, kind) in node.value_inputs.iter().zip(&sig.value_inputs) {
            let ok = match kind {
                ConstantKind::Attribute(d) => catalog.contains(*d, value),
                ConstantKind::Relation => Relation::from_name(value).is_some(),
            };
            if !ok {
                return fail(i, InvalidReason::BadConstant(value.clone()));
            }
        }
        let a = |k: usize| node.inputs[k];
        let op = match function {
            Function::Scene => Op::Scene,
            Function::Filter(dim) => Op::Filter {
                input: a(0),
                dim,
                value: node.value_inputs[0].clone(),
            },
            Function::Unique => Op::Unique(a(0)),
            Function::Relate => Op::Relate(a(0), Relation::from_name(&node.value_inputs[0]).unwrap()),
            Function::Same(d) => Op::Same(a(0), d),
            Function::Count => Op::Count(a(0)),
            Function::Exist => Op::Exist(a(0)),
            Function::Query(d) => Op::Query(a(0), d),
            Function::Equal(d) => Op::EqualAttr(a(0), a(1), d),
            Function::EqualInteger => Op::EqualInteger(a(0), a(1)),
            Function::GreaterThan => Op::GreaterThan(a(0), a(1)),
            Function::LessThan => Op::LessThan(a(0), a(1)),
            Function::Union => Op::Union(a(0), a(1)),
            Function::Intersect => Op::Intersect(a(0), a(1)),
        };
        kinds.push(sig.output_type);
        ops.push(op);
    }
    let output = *kinds.last().unwrap();
    if matches!(output, ValueKind::ObjectSet | ValueKind::Object) {
        return fail(
            nodes.len() - 1,
            InvalidReason::BadRoot(format!("root produces {output}")),
        );
    }
    Ok(TypedProgram { ops, output })
}

/// Canonical identity of a question, used to avoid re-asking it.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct QuestionKey(pub String);

impl fmt::Display for QuestionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

pub fn canonical_key(program: &Program, catalog: &AttributeCatalog) -> Result<QuestionKey, ValidationError> {
    validate(program, catalog)?;
    Ok(QuestionKey(program.serialize()))
}

// ---------------------------------------------------------------------------
// Question families

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotKind {
    Attribute,
    Relation,
    Dimension,
}

/// A value filling one typed hole of a family skeleton.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotValue {
    Attribute(Dimension, String),
    Relation(Relation),
    Dimension(Dimension),
}

impl SlotValue {
    pub fn kind(&self) -> SlotKind {
        match self {
            SlotValue::Attribute(..) => SlotKind::Attribute,
            SlotValue::Relation(_) => SlotKind::Relation,
            SlotValue::Dimension(_) => SlotKind::Dimension,
        }
    }

    /// Every legal value of a slot kind under `catalog`, in a fixed order.
    pub fn domain(kind: SlotKind, catalog: &AttributeCatalog) -> Vec<SlotValue> {
        match kind {
            SlotKind::Attribute => catalog
                .attribute_pairs()
                .map(|(d, v)| SlotValue::Attribute(d, v.to_string()))
                .collect(),
            SlotKind::Relation => Relation::ALL.into_iter().map(SlotValue::Relation).collect(),
            SlotKind::Dimension => Dimension::ALL.into_iter().map(SlotValue::Dimension).collect(),
        }
    }
}

impl fmt::Display for SlotValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SlotValue::Attribute(d, v) => write!(f, "{d}={v}"),
            SlotValue::Relation(r) => write!(f, "rel={r}"),
            SlotValue::Dimension(d) => write!(f, "dim={d}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum TemplateNode {
    Scene,
    /// Zero or more filters, emitted in canonical dimension order.
    Filters { input: usize, slots: Vec<usize> },
    Unique { input: usize },
    Relate { input: usize, slot: usize },
    Same { input: usize, slot: usize },
    Count { input: usize },
    Exist { input: usize },
    Query { input: usize, slot: usize },
    EqualAttr { left: usize, right: usize, slot: usize },
    EqualInteger { left: usize, right: usize },
    GreaterThan { left: usize, right: usize },
    LessThan { left: usize, right: usize },
    Union { left: usize, right: usize },
    Intersect { left: usize, right: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionFamily {
    pub id: usize,
    pub name: String,
    pub answer_kind: ValueKind,
    pub slots: Vec<SlotKind>,
    pub nodes: Vec<TemplateNode>,
}

#[derive(Debug, Error, PartialEq)]
pub enum InstantiateError {
    #[error("family {family} takes {expected} slots, got {found}")]
    SlotCount {
        family: usize,
        expected: usize,
        found: usize,
    },
    #[error("slot {slot}: expected {expected:?}, got {found}")]
    SlotKind {
        slot: usize,
        expected: SlotKind,
        found: SlotValue,
    },
    #[error("slot {slot}: {value} is not in the catalog")]
    NotInCatalog { slot: usize, value: SlotValue },
    #[error("instantiation produced an invalid program: {0}")]
    Invalid(#[from] ValidationError),
}

enum Pattern {
    Fixed(Function),
    Filter(usize),
    Relate(usize),
    Same(usize),
    Query(usize),
    Equal(usize),
}

impl QuestionFamily {
    /// Fills the skeleton's holes. Filter chains come out sorted by dimension
    /// (size, color, material, shape); ties keep slot order.
    pub fn instantiate(&self, slots: &[SlotValue], catalog: &AttributeCatalog) -> Result<Program, InstantiateError> {
        if slots.len() != self.slots.len() {
            return Err(InstantiateError::SlotCount {
                family: self.id,
                expected: self.slots.len(),
                found: slots.len(),
            });
        }
        for (i, (value, &kind)) in slots.iter().zip(&self.slots).enumerate() {
            if value.kind() != kind {
                return Err(InstantiateError::SlotKind {
                    slot: i,
                    expected: kind,
                    found: value.clone(),
                });
            }
            if let SlotValue::Attribute(d, v) = value {
                if !catalog.contains(*d, v) {
                    return Err(InstantiateError::NotInCatalog {
                        slot: i,
                        value: value.clone(),
                    });
                }
            }
        }
        let program = self.build(slots);
        validate(&program, catalog)?;
        Ok(program)
    }

    fn build(&self, slots: &[SlotValue]) -> Program {
        let attr = |s: usize| match &slots[s] {
            SlotValue::Attribute(d, v) => (*d, v.clone()),
            _ => unreachable!("slot kinds checked"),
        };
        let dim = |s: usize| match &slots[s] {
            SlotValue::Dimension(d) => *d,
            _ => unreachable!("slot kinds checked"),
        };
        let mut nodes: Vec<Node> = Vec::new();
        let mut out: Vec<usize> = Vec::with_capacity(self.nodes.len());
        let push = |nodes: &mut Vec<Node>, f: Function, inputs: Vec<usize>, values: Vec<String>| {
            nodes.push(Node::new(f.name(), inputs, values));
            nodes.len() - 1
        };
        for t in &self.nodes {
            let idx = match t {
                TemplateNode::Scene => push(&mut nodes, Function::Scene, vec![], vec![]),
                TemplateNode::Filters { input, slots: fs } => {
                    let mut chain: Vec<(Dimension, String)> = fs.iter().map(|&s| attr(s)).collect();
                    chain.sort_by_key(|(d, _)| *d);
                    let mut cur = out[*input];
                    for (d, v) in chain {
                        cur = push(&mut nodes, Function::Filter(d), vec![cur], vec![v]);
                    }
                    cur
                }
                TemplateNode::Unique { input } => push(&mut nodes, Function::Unique, vec![out[*input]], vec![]),
                TemplateNode::Relate { input, slot } => {
                    let r = match &slots[*slot] {
                        SlotValue::Relation(r) => *r,
                        _ => unreachable!("slot kinds checked"),
                    };
                    push(&mut nodes, Function::Relate, vec![out[*input]], vec![r.name().into()])
                }
                TemplateNode::Same { input, slot } => {
                    push(&mut nodes, Function::Same(dim(*slot)), vec![out[*input]], vec![])
                }
                TemplateNode::Count { input } => push(&mut nodes, Function::Count, vec![out[*input]], vec![]),
                TemplateNode::Exist { input } => push(&mut nodes, Function::Exist, vec![out[*input]], vec![]),
                TemplateNode::Query { input, slot } => {
                    push(&mut nodes, Function::Query(dim(*slot)), vec![out[*input]], vec![])
                }
                TemplateNode::EqualAttr { left, right, slot } => push(
                    &mut nodes,
                    Function::Equal(dim(*slot)),
                    vec![out[*left], out[*right]],
                    vec![],
                ),
                TemplateNode::EqualInteger { left, right } => {
                    push(&mut nodes, Function::EqualInteger, vec![out[*left], out[*right]], vec![])
                }
                TemplateNode::GreaterThan { left, right } => {
                    push(&mut nodes, Function::GreaterThan, vec![out[*left], out[*right]], vec![])
                }
                TemplateNode::LessThan { left, right } => {
                    push(&mut nodes, Function::LessThan, vec![out[*left], out[*right]], vec![])
                }
                TemplateNode::Union { left, right } => {
                    push(&mut nodes, Function::Union, vec![out[*left], out[*right]], vec![])
                }
                TemplateNode::Intersect { left, right } => {
                    push(&mut nodes, Function::Intersect, vec![out[*left], out[*right]], vec![])
                }
            };
            out.push(idx);
        }
        Program { nodes }
    }

    fn pattern(&self) -> Vec<(Pattern, Vec<usize>)> {
        let mut pat: Vec<(Pattern, Vec<usize>)> = Vec::new();
        let mut out: Vec<usize> = Vec::with_capacity(self.nodes.len());
        for t in &self.nodes {
            let mut emit = |p: Pattern, inputs: Vec<usize>| {
                pat.push((p, inputs));
                pat.len() - 1
            };
            let idx = match t {
                TemplateNode::Scene => emit(Pattern::Fixed(Function::Scene), vec![]),
                TemplateNode::Filters { input, slots } => {
                    let mut cur = out[*input];
                    for &s in slots {
                        cur = emit(Pattern::Filter(s), vec![cur]);
                    }
                    cur
                }
                TemplateNode::Unique { input } => emit(Pattern::Fixed(Function::Unique), vec![out[*input]]),
                TemplateNode::Relate { input, slot } => emit(Pattern::Relate(*slot), vec![out[*input]]),
                TemplateNode::Same { input, slot } => emit(Pattern::Same(*slot), vec![out[*input]]),
                TemplateNode::Count { input } => emit(Pattern::Fixed(Function::Count), vec![out[*input]]),
                TemplateNode::Exist { input } => emit(Pattern::Fixed(Function::Exist), vec![out[*input]]),
                TemplateNode::Query { input, slot } => emit(Pattern::Query(*slot), vec![out[*input]]),
                TemplateNode::EqualAttr { left, right, slot } => {
                    emit(Pattern::Equal(*slot), vec![out[*left], out[*right]])
                }
                TemplateNode::EqualInteger { left, right } => {
                    emit(Pattern::Fixed(Function::EqualInteger), vec![out[*left], out[*right]])
                }
                TemplateNode::GreaterThan { left, right } => {
                    emit(Pattern::Fixed(Function::GreaterThan), vec![out[*left], out[*right]])
                }
                TemplateNode::LessThan { left, right } => {
                    emit(Pattern::Fixed(Function::LessThan), vec![out[*left], out[*right]])
                }
                TemplateNode::Union { left, right } => {
                    emit(Pattern::Fixed(Function::Union), vec![out[*left], out[*right]])
                }
                TemplateNode::Intersect { left, right } => {
                    emit(Pattern::Fixed(Function::Intersect), vec![out[*left], out[*right]])
                }
            };
            out.push(idx);
        }
        pat
    }

    /// Recovers slot values if `program` has this family's skeleton shape.
    /// Filter slots come back in the order the chain lists them.
    pub fn match_program(&self, program: &Program) -> Option<Vec<SlotValue>> {
        let pattern = self.pattern();
        if pattern.len() != program.nodes.len() {
            return None;
        }
        let mut slots: Vec<Option<SlotValue>> = vec![None; self.slots.len()];
        let mut bind = |s: usize, v: SlotValue| -> bool {
            match &slots[s] {
                Some(prev) => *prev == v,
                None => {
                    slots[s] = Some(v);
                    true
                }
            }
        };
        for ((p, inputs), node) in pattern.iter().zip(&program.nodes) {
            if *inputs != node.inputs {
                return None;
            }
            let f = Function::from_name(&node.function)?;
            let ok = match (p, f) {
                (Pattern::Fixed(want), got) => *want == got && node.value_inputs.is_empty(),
                (Pattern::Filter(s), Function::Filter(d)) => match node.value_inputs.as_slice() {
                    [v] => bind(*s, SlotValue::Attribute(d, v.clone())),
                    _ => false,
                },
                (Pattern::Relate(s), Function::Relate) => match node.value_inputs.as_slice() {
                    [v] => match Relation::from_name(v) {
                        Some(r) => bind(*s, SlotValue::Relation(r)),
                        None => false,
                    },
                    _ => false,
                },
                (Pattern::Same(s), Function::Same(d))
                | (Pattern::Query(s), Function::Query(d))
                | (Pattern::Equal(s), Function::Equal(d)) => {
                    node.value_inputs.is_empty() && bind(*s, SlotValue::Dimension(d))
                }
                _ => false,
            };
            if !ok {
                return None;
            }
        }
        slots.into_iter().collect()
    }

    /// Iterates over every legal slot assignment (cartesian product of slot domains).
    pub fn assignments(&self, catalog: &AttributeCatalog) -> Vec<Vec<SlotValue>> {
        let domains: Vec<Vec<SlotValue>> = self
            .slots
            .iter()
            .map(|&k| SlotValue::domain(k, catalog))
            .collect();
        let mut out = vec![Vec::new()];
        for domain in &domains {
            let mut next = Vec::with_capacity(out.len() * domain.len());
            for prefix in &out {
                for v in domain {
                    let mut p: Vec<SlotValue> = prefix.clone();
                    p.push(v.clone());
                    next.push(p);
                }
            }
            out = next;
        }
        out
    }
}

#[derive(Debug, Error)]
pub enum FamilyCatalogError {
    #[error("family catalog JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("family at position {position} has id {id}; ids must be dense and ordered")]
    Ids { position: usize, id: usize },
    #[error("family {family}: template node {node} references a later node or missing slot")]
    Template { family: usize, node: usize },
}

/// The versioned set of question families.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FamilyCatalog {
    pub version: u32,
    pub families: Vec<QuestionFamily>,
}

pub const DEFAULT_FAMILIES_JSON: &str = include_str!("../resources/families.json");

impl Default for FamilyCatalog {
    fn default() -> Self {
        FamilyCatalog::from_json(DEFAULT_FAMILIES_JSON).expect("shipped family catalog is valid")
    }
}

impl FamilyCatalog {
    pub fn from_json(text: &str) -> Result<FamilyCatalog, FamilyCatalogError> {
        let cat: FamilyCatalog = serde_json::from_str(text)?;
        for (pos, fam) in cat.families.iter().enumerate() {
            if fam.id != pos {
                return Err(FamilyCatalogError::Ids {
                    position: pos,
                    id: fam.id,
                });
            }
            for (i, node) in fam.nodes.iter().enumerate() {
                let (inputs, slots): (Vec<usize>, Vec<usize>) = match node {
                    TemplateNode::Scene => (vec![], vec![]),
                    TemplateNode::Filters { input, slots } => (vec![*input], slots.clone()),
                    TemplateNode::Unique { input }
                    | TemplateNode::Count { input }
                    | TemplateNode::Exist { input } => (vec![*input], vec![]),
                    TemplateNode::Relate { input, slot }
                    | TemplateNode::Same { input, slot }
                    | TemplateNode::Query { input, slot } => (vec![*input], vec![*slot]),
                    TemplateNode::EqualAttr { left, right, slot } => (vec![*left, *right], vec![*slot]),
                    TemplateNode::EqualInteger { left, right }
                    | TemplateNode::GreaterThan { left, right }
                    | TemplateNode::LessThan { left, right }
                    | TemplateNode::Union { left, right }
                    | TemplateNode::Intersect { left, right } => (vec![*left, *right], vec![]),
                };
                if inputs.iter().any(|&j| j >= i) || slots.iter().any(|&s| s >= fam.slots.len()) {
                    return Err(FamilyCatalogError::Template { family: fam.id, node: i });
                }
            }
        }
        Ok(cat)
    }

    pub fn len(&self) -> usize {
        self.families.len()
    }

    pub fn is_empty(&self) -> bool {
        self.families.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&QuestionFamily> {
        self.families.get(id)
    }

    /// Identifies the family whose skeleton shape `program` has.
    pub fn identify(&self, program: &Program) -> Option<(usize, Vec<SlotValue>)> {
        self.families
            .iter()
            .find_map(|f| f.match_program(program).map(|s| (f.id, s)))
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn n(f: &str, inputs: &[usize], values: &[&str]) -> Node {
        Node::new(f, inputs.to_vec(), values.iter().map(|s| s.to_string()).collect())
    }

    /// "What color is the tiny rubber thing?"
    pub(crate) fn appendix_query_color() -> Program {
        Program::new(vec![
            n("scene", &[], &[]),
            n("filter_size", &[0], &["small"]),
            n("filter_material", &[1], &["rubber"]),
            n("unique", &[2], &[]),
            n("query_color", &[3], &[]),
        ])
    }

    /// "How many large green things are there?"
    pub(crate) fn appendix_count() -> Program {
        Program::new(vec![
            n("scene", &[], &[]),
            n("filter_size", &[0], &["large"]),
            n("filter_color", &[1], &["green"]),
            n("count", &[2], &[]),
        ])
    }

    fn cat() -> AttributeCatalog {
        AttributeCatalog::default()
    }

    fn attr(d: Dimension, v: &str) -> SlotValue {
        SlotValue::Attribute(d, v.into())
    }

    #[test]
    fn function_names_round_trip() {
        let all = Function::catalog();
        assert_eq!(all.len(), 26);
        for f in all {
            assert_eq!(Function::from_name(&f.name()), Some(f));
        }
        assert_eq!(Function::from_name("filter_texture"), None);
    }

    #[test]
    fn minimal_program_validates() {
        let p = Program::new(vec![n("scene", &[], &[]), n("count", &[0], &[])]);
        assert_eq!(validate(&p, &cat()).unwrap().output, ValueKind::Integer);
    }

    #[test]
    fn query_on_set_is_a_type_error() {
        let p = Program::new(vec![n("scene", &[], &[]), n("query_color", &[0], &[])]);
        let err = validate(&p, &cat()).unwrap_err();
        assert_eq!(err.node, 1);
        assert_eq!(
            err.reason,
            InvalidReason::TypeMismatch {
                position: 0,
                expected: ValueKind::Object,
                found: ValueKind::ObjectSet
            }
        );
    }

    #[test]
    fn appendix_programs_validate() {
        assert_eq!(
            validate(&appendix_query_color(), &cat()).unwrap().output,
            ValueKind::AttributeValue
        );
        assert_eq!(validate(&appendix_count(), &cat()).unwrap().output, ValueKind::Integer);
    }

    #[test]
    fn validation_reasons() {
        let c = cat();
        let reason = |nodes: Vec<Node>| validate(&Program::new(nodes), &c).unwrap_err();
        let e = reason(vec![n("scene", &[], &[]), n("frobnicate", &[0], &[])]);
        assert_eq!(e.node, 1);
        assert!(matches!(e.reason, InvalidReason::UnknownFunction(_)));
        let e = reason(vec![n("scene", &[], &[]), n("count", &[0, 0], &[])]);
        assert!(matches!(e.reason, InvalidReason::Arity { .. }));
        let e = reason(vec![n("scene", &[], &[]), n("filter_color", &[0], &["cube"]), n("count", &[1], &[])]);
        assert_eq!(e.reason, InvalidReason::BadConstant("cube".into()));
        let e = reason(vec![n("scene", &[], &[]), n("filter_color", &[0], &["red"])]);
        assert!(matches!(e.reason, InvalidReason::BadRoot(_)));
        let e = reason(vec![n("count", &[], &[])]);
        assert!(matches!(e.reason, InvalidReason::BadRoot(_)));
        let e = reason(vec![n("scene", &[], &[]), n("count", &[5], &[])]);
        assert_eq!(e.reason, InvalidReason::ForwardReference(5));
        let e = reason(vec![]);
        assert!(matches!(e.reason, InvalidReason::BadRoot(_)));
        let e = reason(vec![n("scene", &[], &[]), n("scene", &[], &[]), n("union", &[0, 1], &[])]);
        assert_eq!(e.node, 1);
        let mut long = vec![n("scene", &[], &[])];
        for i in 0..12 {
            long.push(n("filter_color", &[i], &["red"]));
        }
        long.push(n("count", &[12], &[]));
        assert!(matches!(reason(long).reason, InvalidReason::BadRoot(_)));
        let e = reason(vec![n("scene", &[], &[]), n("filter_color", &[0], &["red"]), n("unique", &[1], &[]), n("relate", &[2], &["above"]), n("count", &[3], &[])]);
        assert_eq!(e.reason, InvalidReason::BadConstant("above".into()));
    }

    #[test]
    fn serialize_is_compact_and_sorted() {
        let p = Program::new(vec![n("scene", &[], &[]), n("count", &[0], &[])]);
        assert_eq!(
            p.serialize(),
            r#"[{"function":"scene","inputs":[],"value_inputs":[]},{"function":"count","inputs":[0],"value_inputs":[]}]"#
        );
    }

    #[test]
    fn parse_round_trip_and_errors() {
        let p = appendix_query_color();
        assert_eq!(Program::parse(&p.serialize()).unwrap(), p);
        // the appendix's pretty-printed layout parses too
        let pretty = "[\n {\n  \"function\": \"scene\", \n  \"inputs\": [], \n  \"value_inputs\": []\n }, \n {\n  \"function\": \"count\", \n  \"inputs\": [\n   0\n  ], \n  \"value_inputs\": []\n }\n]";
        assert_eq!(Program::parse(pretty).unwrap().nodes.len(), 2);
        let forward = r#"[{"function":"scene","inputs":[],"value_inputs":[]},{"function":"count","inputs":[0],"value_inputs":[]},{"function":"count","inputs":[5],"value_inputs":[]}]"#;
        assert_eq!(
            Program::parse(forward),
            Err(ParseError::ForwardReference { node: 2, input: 5 })
        );
        assert_eq!(Program::parse("[]"), Err(ParseError::Empty));
        assert!(matches!(Program::parse("[{"), Err(ParseError::Malformed { .. })));
    }

    #[test]
    fn canonical_keys() {
        let c = cat();
        let p = appendix_query_color();
        let back = Program::parse(&p.serialize()).unwrap();
        assert_eq!(canonical_key(&p, &c).unwrap(), canonical_key(&back, &c).unwrap());
        let red = Program::new(vec![n("scene", &[], &[]), n("filter_color", &[0], &["red"]), n("count", &[1], &[])]);
        let blue = Program::new(vec![n("scene", &[], &[]), n("filter_color", &[0], &["blue"]), n("count", &[1], &[])]);
        assert_ne!(canonical_key(&red, &c).unwrap(), canonical_key(&blue, &c).unwrap());
        assert_eq!(
            canonical_key(&appendix_count(), &c).unwrap(),
            canonical_key(&appendix_count(), &c).unwrap()
        );
        let bad = Program::new(vec![n("scene", &[], &[]), n("query_color", &[0], &[])]);
        assert!(canonical_key(&bad, &c).is_err());
    }

    #[test]
    fn shipped_catalog_shape() {
        let fams = FamilyCatalog::default();
        assert_eq!(fams.version, 1);
        assert_eq!(fams.len(), 18);
        let kinds: Vec<ValueKind> = fams.families.iter().map(|f| f.answer_kind).collect();
        assert_eq!(kinds.iter().filter(|k| **k == ValueKind::AttributeValue).count(), 4);
        assert_eq!(kinds.iter().filter(|k| **k == ValueKind::Integer).count(), 6);
        assert_eq!(kinds.iter().filter(|k| **k == ValueKind::Bool).count(), 8);
    }

    #[test]
    fn instantiate_appendix_examples() {
        let c = cat();
        let fams = FamilyCatalog::default();
        let q = fams.get(1).unwrap();
        let p = q
            .instantiate(
                &[attr(Dimension::Material, "rubber"), attr(Dimension::Size, "small"), SlotValue::Dimension(Dimension::Color)],
                &c,
            )
            .unwrap();
        assert_eq!(p, appendix_query_color());
        let count = fams.get(6).unwrap();
        let p = count
            .instantiate(&[attr(Dimension::Color, "green"), attr(Dimension::Size, "large")], &c)
            .unwrap();
        assert_eq!(p, appendix_count());
    }

    #[test]
    fn instantiate_rejects_wrong_slots() {
        let c = cat();
        let fams = FamilyCatalog::default();
        let count = fams.get(5).unwrap();
        assert!(matches!(
            count.instantiate(&[SlotValue::Relation(Relation::Left)], &c),
            Err(InstantiateError::SlotKind { slot: 0, .. })
        ));
        assert!(matches!(count.instantiate(&[], &c), Err(InstantiateError::SlotCount { .. })));
        assert!(matches!(
            count.instantiate(&[attr(Dimension::Color, "magenta")], &c),
            Err(InstantiateError::NotInCatalog { .. })
        ));
    }

    #[test]
    fn every_assignment_instantiates_and_is_identified() {
        let c = cat();
        let fams = FamilyCatalog::default();
        let mut total = 0;
        for fam in &fams.families {
            for slots in fam.assignments(&c) {
                let p = fam.instantiate(&slots, &c).unwrap();
                let (id, recovered) = fams.identify(&p).expect("family shape recognised");
                assert_eq!(id, fam.id);
                assert_eq!(fam.instantiate(&recovered, &c).unwrap(), p);
                total += 1;
            }
        }
        assert_eq!(total, 11_521);
    }

    #[test]
    fn identify_rejects_foreign_shapes() {
        let fams = FamilyCatalog::default();
        let p = Program::new(vec![
            n("scene", &[], &[]),
            n("filter_color", &[0], &["red"]),
            n("filter_color", &[0], &["blue"]),
            n("intersect", &[1, 2], &[]),
            n("exist", &[3], &[]),
        ]);
        assert_eq!(fams.identify(&p), None);
    }

    #[test]
    fn catalog_json_is_checked() {
        let bad = r#"{"version": 1, "families": [{"id": 1, "name": "x", "answer_kind": "integer", "slots": [], "nodes": [{"op": "scene"}]}]}"#;
        assert!(matches!(FamilyCatalog::from_json(bad), Err(FamilyCatalogError::Ids { .. })));
        let bad = r#"{"version": 1, "families": [{"id": 0, "name": "x", "answer_kind": "integer", "slots": [], "nodes": [{"op": "count", "input": 0}]}]}"#;
        assert!(matches!(FamilyCatalog::from_json(bad), Err(FamilyCatalogError::Template { .. })));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_node() -> impl Strategy<Value = Node> {
            let names = prop::sample::select(vec![
                "scene", "filter_color", "filter_size", "unique", "relate", "same_shape", "count",
                "exist", "query_material", "equal_color", "equal_integer", "greater_than",
                "union", "intersect", "bogus",
            ]);
            let values = prop::sample::select(vec!["red", "small", "cube", "left", "behind", "???"]);
            (
                names,
                prop::collection::vec(0usize..14, 0..3),
                prop::collection::vec(values, 0..2),
            )
                .prop_map(|(f, i, v)| Node::new(f, i, v.into_iter().map(String::from).collect()))
        }

        proptest! {
            #[test]
            fn validate_is_total(nodes in prop::collection::vec(arb_node(), 0..14)) {
                let _ = validate(&Program::new(nodes), &AttributeCatalog::default());
            }
        }
    }
}
