//! Named trainable parameters with a hard DET/SEM partition label.

use rand::RngExt;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Glorot-uniform matrix init.
pub fn glorot(rows: usize, cols: usize, rng: &mut ChaCha12Rng) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::from_parts(vec![rows, cols], data)
}

/// Which optimization stream owns a parameter.
///
/// Detection losses may only touch `Det` parameters; semantic losses (KL
/// distillation + alignment) may only touch `Sem` parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partition {
    Det,
    Sem,
}

impl Partition {
    pub fn as_str(self) -> &'static str {
        match self {
            Partition::Det => "DET",
            Partition::Sem => "SEM",
        }
    }

    pub fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(Partition::Det),
            1 => Ok(Partition::Sem),
            other => Err(Error::Format(format!("unknown partition byte {other}"))),
        }
    }

    pub fn to_byte(self) -> u8 {
        match self {
            Partition::Det => 0,
            Partition::Sem => 1,
        }
    }
}

/// One named trainable tensor.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub partition: Partition,
    pub value: Tensor,
}

/// The full set of trainable parameters, in a stable order.
///
/// Order is the identity used by the optimizer moments and the checkpoint
/// format, so it must never depend on hashing.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter and returns its stable index.
    pub fn push(&mut self, name: impl Into<String>, partition: Partition, value: Tensor) -> usize {
        let name = name.into();
        debug_assert!(
            self.index_of(&name).is_none(),
            "duplicate parameter name {name}"
        );
        let value = value.with_requires_grad(true);
        self.params.push(Parameter { name, partition, value });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Parameter {
        &self.params[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Parameter {
        &mut self.params[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn indices_of(&self, partition: Partition) -> Vec<usize> {
        self.params
            .iter()
            .enumerate()
            .filter(|(_, p)| p.partition == partition)
            .map(|(i, _)| i)
            .collect()
    }
}
