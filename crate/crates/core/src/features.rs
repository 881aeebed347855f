//! Hashed sparse features for (scene, program) pairs.

use serde::{Deserialize, Serialize};

use crate::program::{Function, Program};
use crate::universe::{AttributeCatalog, Dimension, Scene};

pub const FNV_OFFSET: u64 = 14695981039346656037;
pub const FNV_PRIME: u64 = 1099511628211;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = Fnv::new();
    h.write(bytes);
    h.finish()
}

/// Incremental FNV-1a, so tokens can be hashed piecewise without building strings.
#[derive(Debug, Clone, Copy)]
pub struct Fnv(u64);

impl Fnv {
    pub fn new() -> Fnv {
        Fnv(FNV_OFFSET)
    }

    pub fn write(&mut self, bytes: &[u8]) -> &mut Fnv {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(FNV_PRIME);
        }
        self
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

impl Default for Fnv {
    fn default() -> Self {
        Fnv::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub dim: usize,
    /// Also emit grounding tokens: for each filter chain, the number of scene
    /// objects it matches and, when exactly one matches, that object's attributes.
    #[serde(default)]
    pub grounding: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            dim: 1 << 15,
            grounding: false,
        }
    }
}

/// Sparse vector sorted by index, no duplicate indices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureVector {
    pub entries: Vec<(u32, f64)>,
}

impl FeatureVector {
    pub fn from_indices(mut indices: Vec<u32>) -> FeatureVector {
        indices.sort_unstable();
        let mut entries: Vec<(u32, f64)> = Vec::with_capacity(indices.len());
        for i in indices {
            match entries.last_mut() {
                Some((j, w)) if *j == i => *w += 1.0,
                _ => entries.push((i, 1.0)),
            }
        }
        FeatureVector { entries }
    }

    pub fn get(&self, index: u32) -> f64 {
        self.entries
            .binary_search_by_key(&index, |e| e.0)
            .map(|k| self.entries[k].1)
            .unwrap_or(0.0)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Per-scene part of the featurization, computed once and reused for every
/// question asked about that scene.
#[derive(Debug, Clone)]
pub struct SceneFeatures {
    hist_indices: Vec<u32>,
    counts: [Vec<usize>; 4],
    /// Attribute value indices per object, in dimension order.
    objects: Vec<[usize; 4]>,
}

impl SceneFeatures {
    pub fn count(&self, catalog: &AttributeCatalog, dim: Dimension, value: &str) -> usize {
        catalog
            .index_of(dim, value)
            .map(|i| self.counts[dim as usize][i])
            .unwrap_or(0)
    }
}

#[derive(Debug, Clone)]
struct PresenceFeature {
    dim: Dimension,
    value: usize,
    index: [u32; 2],
}

#[derive(Debug, Clone)]
struct ChainFeature {
    constraints: Vec<(Dimension, usize)>,
    key: String,
    count_index: Vec<u32>,
    attr_index: [Vec<u32>; 4],
}

/// Scene-independent part of a program's features.
#[derive(Debug, Clone)]
pub struct ProgramFeatures {
    indices: Vec<u32>,
    presence: Vec<PresenceFeature>,
    chains: Vec<ChainFeature>,
}

#[derive(Debug, Clone)]
pub struct Featurizer {
    pub cfg: FeatureConfig,
    pub catalog: AttributeCatalog,
}

fn bucket(count: usize) -> &'static str {
    match count {
        0 => "0",
        1 => "1",
        2 => "2",
        _ => "3+",
    }
}

impl Featurizer {
    pub fn new(cfg: FeatureConfig, catalog: &AttributeCatalog) -> Featurizer {
        assert!(cfg.dim >= 2, "feature dimension must be at least 2");
        Featurizer {
            cfg,
            catalog: catalog.clone(),
        }
    }

    /// Index 0 is the bias; every other token lands in 1..dim.
    pub fn index_of_hash(&self, hash: u64) -> u32 {
        (1 + hash % (self.cfg.dim as u64 - 1)) as u32
    }

    pub fn index_of_token(&self, token: &str) -> u32 {
        if token == "bias" {
            0
        } else {
            self.index_of_hash(fnv1a64(token.as_bytes()))
        }
    }

    pub fn scene_features(&self, scene: &Scene) -> SceneFeatures {
        let counts = Dimension::ALL.map(|d| {
            let values = self.catalog.values(d);
            let mut c = vec![0usize; values.len()];
            for o in &scene.objects {
                if let Some(i) = values.iter().position(|v| v == o.attribute(d)) {
                    c[i] += 1;
                }
            }
            c
        });
        let mut hist_indices = Vec::new();
        for d in Dimension::ALL {
            for (v, &c) in self.catalog.values(d).iter().zip(&counts[d as usize]) {
                let h = Fnv::new()
                    .write(b"hist:")
                    .write(d.name().as_bytes())
                    .write(b"=")
                    .write(v.as_bytes())
                    .write(b":")
                    .write(bucket(c).as_bytes())
                    .finish();
                hist_indices.push(self.index_of_hash(h));
            }
        }
        let objects = scene
            .objects
            .iter()
            .map(|o| Dimension::ALL.map(|d| self.catalog.index_of(d, o.attribute(d)).unwrap_or(usize::MAX)))
            .collect();
        SceneFeatures {
            hist_indices,
            counts,
            objects,
        }
    }

    pub fn featurize(&self, scene: &Scene, program: &Program) -> FeatureVector {
        self.featurize_with(&self.scene_features(scene), program)
    }

    pub fn featurize_with(&self, scene: &SceneFeatures, program: &Program) -> FeatureVector {
        self.featurize_parts(scene, &self.program_features(program))
    }

    /// Combines cached scene and program parts; the fast path of [`Featurizer::featurize`].
    pub fn featurize_parts(&self, scene: &SceneFeatures, program: &ProgramFeatures) -> FeatureVector {
        let mut idx: Vec<u32> = Vec::with_capacity(1 + scene.hist_indices.len() + program.indices.len() + 16);
        idx.push(0);
        idx.extend_from_slice(&scene.hist_indices);
        idx.extend_from_slice(&program.indices);
        for p in &program.presence {
            let has = p.value != usize::MAX && scene.counts[p.dim as usize][p.value] > 0;
            idx.push(p.index[has as usize]);
        }
        for chain in &program.chains {
            let mut n = 0;
            let mut last = usize::MAX;
            for (k, o) in scene.objects.iter().enumerate() {
                if chain.constraints.iter().all(|&(d, v)| o[d as usize] == v) {
                    n += 1;
                    last = k;
                }
            }
            idx.push(match chain.count_index.get(n) {
                Some(&i) => i,
                None => self.index_of_hash(fnv1a64(format!("g:{}:n={n}", chain.key).as_bytes())),
            });
            if n == 1 {
                let o = &scene.objects[last];
                for d in Dimension::ALL {
                    if let Some(&i) = chain.attr_index[d as usize].get(o[d as usize]) {
                        idx.push(i);
                    }
                }
            }
        }
        FeatureVector::from_indices(idx)
    }

    /// Precomputes everything about a program's features that does not depend on the scene.
    pub fn program_features(&self, program: &Program) -> ProgramFeatures {
        let mut indices = Vec::new();
        let mut presence = Vec::new();
        let mut chains = Vec::new();
        for (i, node) in program.nodes.iter().enumerate() {
            let mut base = Fnv::new();
            base.write(b"fn=").write(node.function.as_bytes());
            indices.push(self.index_of_hash(base.finish()));
            for v in &node.value_inputs {
                let mut h = base;
                let h = h.write(b":v=").write(v.as_bytes()).finish();
                indices.push(self.index_of_hash(h));
            }
            let (Some(Function::Filter(d)), [v]) = (Function::from_name(&node.function), node.value_inputs.as_slice()) else {
                continue;
            };
            let token = |flag: &str| self.index_of_hash(fnv1a64(format!("x:{d}={v}:{flag}").as_bytes()));
            presence.push(PresenceFeature {
                dim: d,
                value: self.catalog.index_of(d, v).unwrap_or(usize::MAX),
                index: [token("0"), token("1")],
            });
            if self.cfg.grounding {
                chains.push(self.chain_feature(program, i));
            }
        }
        ProgramFeatures {
            indices,
            presence,
            chains,
        }
    }

    /// The run of consecutive filters ending at `node`, as sorted (dimension, value) constraints.
    fn chain_feature(&self, program: &Program, node: usize) -> ChainFeature {
        let mut constraints: Vec<(Dimension, usize)> = Vec::new();
        let mut names: Vec<(Dimension, String)> = Vec::new();
        let mut cur = node;
        loop {
            let n = &program.nodes[cur];
            let (Some(Function::Filter(d)), Some(v)) = (Function::from_name(&n.function), n.value_inputs.first()) else {
                break;
            };
            constraints.push((d, self.catalog.index_of(d, v).unwrap_or(usize::MAX)));
            names.push((d, v.clone()));
            match n.inputs.first() {
                Some(&next) if next < cur => cur = next,
                _ => break,
            }
        }
        names.sort();
        constraints.sort_unstable();
        let key = names
            .iter()
            .map(|(d, v)| format!("{d}={v}"))
            .collect::<Vec<_>>()
            .join(",");
        let count_index = (0..=self.catalog.max_count)
            .map(|n| self.index_of_hash(fnv1a64(format!("g:{key}:n={n}").as_bytes())))
            .collect();
        let attr_index = Dimension::ALL.map(|d| {
            self.catalog
                .values(d)
                .iter()
                .map(|v| self.index_of_hash(fnv1a64(format!("g:{key}:{d}={v}").as_bytes())))
                .collect()
        });
        ChainFeature {
            constraints,
            key,
            count_index,
            attr_index,
        }
    }

    /// The token strings behind [`Featurizer::featurize`], in emission order.
    pub fn tokens(&self, scene: &Scene, program: &Program) -> Vec<String> {
        let sf = self.scene_features(scene);
        let mut out = vec!["bias".to_string()];
        for d in Dimension::ALL {
            for (v, &c) in self.catalog.values(d).iter().zip(&sf.counts[d as usize]) {
                out.push(format!("hist:{d}={v}:{}", bucket(c)));
            }
        }
        for node in &program.nodes {
            out.push(format!("fn={}", node.function));
            for v in &node.value_inputs {
                out.push(format!("fn={}:v={v}", node.function));
            }
            if let (Some(Function::Filter(d)), [v]) = (Function::from_name(&node.function), node.value_inputs.as_slice()) {
                let has = sf.count(&self.catalog, d, v) > 0;
                out.push(format!("x:{d}={v}:{}", has as u8));
            }
        }
        if self.cfg.grounding {
            for (i, node) in program.nodes.iter().enumerate() {
                if !matches!(Function::from_name(&node.function), Some(Function::Filter(_))) || node.value_inputs.len() != 1 {
                    continue;
                }
                let chain = self.chain_feature(program, i);
                let matches: Vec<&[usize; 4]> = sf
                    .objects
                    .iter()
                    .filter(|o| chain.constraints.iter().all(|&(d, v)| o[d as usize] == v))
                    .collect();
                out.push(format!("g:{}:n={}", chain.key, matches.len()));
                if let [only] = matches.as_slice() {
                    for d in Dimension::ALL {
                        out.push(format!("g:{}:{d}={}", chain.key, self.catalog.values(d)[only[d as usize]]));
                    }
                }
            }
        }
        out
    }
}
