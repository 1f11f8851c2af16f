use crate::error::{Error, Result};
use crate::numerics::{ops, RngStream, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    Classification(usize),
    Regression,
}

impl HeadKind {
    pub fn outputs(self) -> usize {
        match self {
            HeadKind::Classification(k) => k,
            HeadKind::Regression => 1,
        }
    }
}

/// Task-specific affine layer on top of the pooled encoder output.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskHead {
    pub kind: HeadKind,
    /// `[H × out]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

impl TaskHead {
    pub fn new(kind: HeadKind, weight: Tensor, bias: Tensor) -> Result<Self> {
        let out = kind.outputs();
        if out == 0 {
            return Err(Error::Config("head needs at least one output".into()));
        }
        match weight.shape() {
            [_, o] if *o == out => {}
            s => return Err(Error::shape("task head", s, &[out])),
        }
        if bias.shape() != [out] {
            return Err(Error::shape("task head bias", bias.shape(), &[out]));
        }
        Ok(TaskHead { kind, weight, bias })
    }

    /// Uniform `±1/√H` weights, zero bias.
    pub fn init(kind: HeadKind, hidden: usize, rng: &mut RngStream) -> Self {
        let out = kind.outputs();
        let c = 1.0 / (hidden as f64).sqrt();
        let w = (0..hidden * out).map(|_| rng.uniform_range(-c, c)).collect();
        TaskHead {
            kind,
            weight: Tensor::new(vec![hidden, out], w).expect("head shape"),
            bias: Tensor::zeros(&[out]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// Logits (classification) or the scalar prediction (regression).
    pub fn forward(&self, pooled: &Tensor) -> Result<Tensor> {
        if pooled.len() != self.hidden() {
            return Err(Error::shape("head_forward", pooled.shape(), self.weight.shape()));
        }
        let x = pooled.clone().reshape(vec![1, self.hidden()])?;
        let mut y = ops::matmul(&x, &self.weight)?;
        for (o, b) in y.data_mut().iter_mut().zip(self.bias.data()) {
            *o += b;
        }
        y.reshape(vec![self.kind.outputs()])
    }

    /// Argmax class for classification heads.
    pub fn predict(&self, pooled: &Tensor) -> Result<usize> {
        let y = self.forward(pooled)?;
        Ok(argmax(y.data()))
    }
}

/// First index of the maximum.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
