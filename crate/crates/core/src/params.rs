//! Named parameter blocks, their grouping, and per-forward binding into a graph.

use std::fmt;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Coarse ownership of a parameter, derived from its name.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    Encoder,
    PretextHead,
    LidConditioner,
    SvConditioner,
    LidConditionProjection,
    SvConditionProjection,
    AsrDecoder,
    /// Aggregation weights and input projection of the LID decoder.
    LidFeat,
    LidDecoder,
    SvFeat,
    SvDecoder,
}

impl Block {
    pub const ALL: [Block; 11] = [
        Block::Encoder,
        Block::PretextHead,
        Block::LidConditioner,
        Block::SvConditioner,
        Block::LidConditionProjection,
        Block::SvConditionProjection,
        Block::AsrDecoder,
        Block::LidFeat,
        Block::LidDecoder,
        Block::SvFeat,
        Block::SvDecoder,
    ];

    pub fn of(name: &str) -> Block {
        let head = |p: &str| name == p || name.starts_with(&format!("{p}."));
        if head("encoder") {
            Block::Encoder
        } else if head("pretext") {
            Block::PretextHead
        } else if head("cond.lid") {
            Block::LidConditioner
        } else if head("cond.sv") {
            Block::SvConditioner
        } else if head("zproj.lid") {
            Block::LidConditionProjection
        } else if head("zproj.sv") {
            Block::SvConditionProjection
        } else if head("asr") {
            Block::AsrDecoder
        } else if head("lid.agg") || head("lid.proj") {
            Block::LidFeat
        } else if head("lid") {
            Block::LidDecoder
        } else if head("sv.agg") || head("sv.proj") {
            Block::SvFeat
        } else {
            Block::SvDecoder
        }
    }

    pub fn is_adapter(self) -> bool {
        matches!(
            self,
            Block::LidConditioner
                | Block::SvConditioner
                | Block::LidConditionProjection
                | Block::SvConditionProjection
        )
    }
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("serializable");
        write!(f, "{}", s.as_str().unwrap_or("?"))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<F: Real> {
    params: IndexMap<String, Tensor<F>>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            params: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<F>) {
        self.params.insert(name.into(), t);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<F>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<F>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<F>> {
        self.params.shift_remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<F>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<F>)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Marks exactly the blocks accepted by `pred` as trainable.
    pub fn set_trainable(&mut self, pred: impl Fn(&str) -> bool) {
        for (name, t) in self.params.iter_mut() {
            t.set_requires_grad(pred(name));
        }
    }

    pub fn freeze_all(&mut self) {
        self.set_trainable(|_| false);
    }

    pub fn count(&self, pred: impl Fn(&str, &Tensor<F>) -> bool) -> usize {
        self.params
            .iter()
            .filter(|(n, t)| pred(n, t))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.count(|_, t| t.requires_grad())
    }

    /// Hex SHA-256 of the block's serialized tensor.
    pub fn block_hash(&self, name: &str) -> Result<String> {
        Ok(hash_tensor(self.get(name)?))
    }

    pub fn frozen_hashes(&self) -> IndexMap<String, String> {
        self.params
            .iter()
            .filter(|(_, t)| !t.requires_grad())
            .map(|(n, t)| (n.clone(), hash_tensor(t)))
            .collect()
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(n, t)| (n.clone(), t.cast::<G>()))
                .collect(),
        }
    }
}

pub fn hash_tensor<F: Real>(t: &Tensor<F>) -> String {
    let digest = Sha256::digest(t.to_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Deterministic 64-bit seed derived from a base seed and a label.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

pub fn rng_for(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, label))
}

/// Parameter initializers. Each block draws from its own stream keyed by
/// name, so adding or removing other blocks never changes its values.
pub mod init {
    use super::*;

    pub fn normal<F: Real>(seed: u64, name: &str, shape: Vec<usize>, std: f64) -> Tensor<F> {
        let mut rng = rng_for(seed, name);
        let n = crate::tensor::numel(&shape);
        let data: Vec<F> = (0..n)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                F::lit(v * std)
            })
            .collect();
        Tensor::new(shape, data).expect("positive extents")
    }

    /// Weight `[out, in]` with std `1/sqrt(in)`.
    pub fn fan_in<F: Real>(seed: u64, name: &str, out: usize, inp: usize) -> Tensor<F> {
        normal(seed, name, vec![out, inp], 1.0 / (inp as f64).sqrt())
    }

    pub fn zeros<F: Real>(shape: Vec<usize>) -> Tensor<F> {
        Tensor::zeros(shape)
    }

    pub fn ones<F: Real>(shape: Vec<usize>) -> Tensor<F> {
        Tensor::full(shape, F::one())
    }

    /// Inserts `{prefix}.w` `[out, in]` and `{prefix}.b` `[out]`.
    pub fn linear<F: Real>(store: &mut ParamStore<F>, seed: u64, prefix: &str, out: usize, inp: usize) {
        store.insert(format!("{prefix}.w"), fan_in(seed, &format!("{prefix}.w"), out, inp));
        store.insert(format!("{prefix}.b"), zeros(vec![out]));
    }

    pub fn layer_norm<F: Real>(store: &mut ParamStore<F>, prefix: &str, width: usize) {
        store.insert(format!("{prefix}.gain"), ones(vec![width]));
        store.insert(format!("{prefix}.bias"), zeros(vec![width]));
    }
}

/// Binds store parameters into a fresh graph on first use. Repeated lookups
/// of the same name return the same leaf, so shared weights stay shared.
pub struct Scope<'a, F: Real> {
    pub g: Graph<F>,
    store: &'a ParamStore<F>,
    bound: IndexMap<String, Var>,
}

impl<'a, F: Real> Scope<'a, F> {
    pub fn new(store: &'a ParamStore<F>) -> Self {
        Scope {
            g: Graph::new(),
            store,
            bound: IndexMap::new(),
        }
    }

    pub fn store(&self) -> &'a ParamStore<F> {
        self.store
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let v = self.g.param(self.store.get(name)?);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Binds `name` to an existing variable instead of the stored tensor.
    pub fn bind_var(&mut self, name: &str, v: Var) {
        self.bound.insert(name.to_string(), v);
    }

    pub fn has(&self, name: &str) -> bool {
        self.store.contains(name)
    }

    pub fn bound(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.bound.iter()
    }

    /// Gradients for every bound parameter that requires them.
    pub fn param_grads(&self, grads: &Gradients<F>) -> Vec<(String, Vec<F>)> {
        self.bound
            .iter()
            .filter_map(|(n, &v)| grads.get(v).map(|g| (n.clone(), g.to_vec())))
            .collect()
    }
}
