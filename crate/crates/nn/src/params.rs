use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{NnError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    /// Frozen parameters never receive optimizer updates.
    pub frozen: bool,
}

/// How a freshly registered parameter is filled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// `uniform(-k, k)` with `k = fan_in^-1/2`.
    FanIn(usize),
    Uniform(f64),
    Const(f64),
    Zeros,
}

/// 64-bit FNV-1a; stable across platforms and releases.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Named parameter registry for one model.
///
/// Every parameter draws its initial values from an rng seeded by the global
/// seed and the hash of its name, so initialization does not depend on
/// registration order.
#[derive(Clone, Debug)]
pub struct ParamStore {
    seed: u64,
    params: Vec<Parameter>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn add(&mut self, name: &str, shape: &[usize], init: Init, frozen: bool) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(NnError::Consistency(format!("duplicate parameter name {name}")));
        }
        let n: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(name.as_bytes()));
        let data = match init {
            Init::FanIn(fan_in) => {
                let k = (fan_in.max(1) as f64).powf(-0.5);
                (0..n).map(|_| rng.gen_range(-k..=k)).collect()
            }
            Init::Uniform(k) => (0..n).map(|_| rng.gen_range(-k..=k)).collect(),
            Init::Const(c) => vec![c; n],
            Init::Zeros => vec![0.0; n],
        };
        let id = ParamId(self.params.len());
        self.params.push(Parameter {
            name: name.to_string(),
            tensor: Tensor::new(shape, data)?,
            frozen,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| !p.frozen).map(|p| p.tensor.len()).sum()
    }

    /// Overwrites values by name. With `strict`, every stored parameter must
    /// be present in `records`; unknown record names are always an error.
    pub fn load_named(&mut self, records: &[(String, Tensor)], strict: bool) -> Result<usize> {
        let mut seen = vec![false; self.params.len()];
        for (name, t) in records {
            let id = self
                .id(name)
                .ok_or_else(|| NnError::Consistency(format!("checkpoint has unknown parameter {name}")))?;
            let p = &mut self.params[id.0];
            if p.tensor.shape() != t.shape() {
                return Err(NnError::Consistency(format!(
                    "parameter {name}: expected shape {:?}, checkpoint has {:?}",
                    p.tensor.shape(),
                    t.shape()
                )));
            }
            p.tensor = t.clone();
            seen[id.0] = true;
        }
        if strict {
            if let Some(i) = seen.iter().position(|s| !s) {
                return Err(NnError::Consistency(format!(
                    "checkpoint is missing parameter {}",
                    self.params[i].name
                )));
            }
        }
        Ok(records.len())
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.params.iter().map(|p| (p.name.clone(), p.tensor.clone())).collect()
    }
}
