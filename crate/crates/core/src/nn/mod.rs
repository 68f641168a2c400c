//! Parameters, layers, optimizers and checkpoints.

mod checkpoint;
mod layers;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader, ParamInfo};
pub use layers::{
    dropout, AttentionDecoder, BiLstm, Conv1d, Conv2d, Dense, Embedding, Lstm, LstmCell, Seq,
};
pub use optim::{OptimizerConfig, OptimizerKind, Optimizer, StepStats};

use std::rc::Rc;

use rand::Rng;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
    pub optimizer: OptimizerKind,
}

/// Named parameters in declaration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, optimizer: OptimizerKind) -> Result<ParamId> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::Contract(format!("parameter {name} registered twice")));
        }
        self.params.push(Param {
            name,
            value,
            trainable: true,
            optimizer,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Marks every parameter whose name starts with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut n = 0;
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.trainable = trainable;
            n += 1;
        }
        n
    }

    /// Inserts every parameter as a graph leaf; frozen ones do not take grads.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| g.leaf(p.value.clone(), p.trainable))
            .collect()
    }

    /// Little-endian bytes of every value in declaration order.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.params.iter().flat_map(|p| p.value.to_le_bytes()).collect()
    }
}

/// Seeded initializers.
pub struct Init<'a> {
    pub rng: &'a mut dyn RngCore,
}

impl Init<'_> {
    pub fn uniform(&mut self, shape: Vec<usize>, limit: f64) -> Tensor {
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| rng.gen_range(-limit..=limit))
    }

    /// He-uniform: `±sqrt(6 / fan_in)`.
    pub fn fan_in(&mut self, shape: Vec<usize>, fan_in: usize) -> Tensor {
        self.uniform(shape, (6.0 / fan_in as f64).sqrt())
    }
}

/// Per-forward state shared by the layers of one network.
pub struct Ctx<'a> {
    pub graph: &'a mut Graph,
    pub vars: &'a [Var],
    pub mode: Mode,
    pub rng: &'a mut dyn RngCore,
}

impl Ctx<'_> {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// Shared handle to per-sample valid lengths.
pub type Lengths = Option<Rc<[usize]>>;
