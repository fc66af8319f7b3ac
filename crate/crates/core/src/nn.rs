//! Dense layers on the autodiff tape.

use rand::Rng;
use crate::autodiff::{AutodiffError, NodeId, Tape, Tensor};

/// Fully connected layer `y = x W + b` with `W` of shape `(in, out)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct DenseNodes {
    pub weight: NodeId,
    pub bias: NodeId,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Tensor::zeros(vec![inputs, outputs]),
            bias: Tensor::zeros(vec![outputs]),
        }
    }

    /// Weights and biases drawn uniformly from `[-bound, bound]`.
    pub fn uniform<R: Rng + ?Sized>(inputs: usize, outputs: usize, bound: f64, rng: &mut R) -> Self {
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|_| if bound > 0.0 { rng.random_range(-bound..=bound) } else { 0.0 })
                .collect()
        };
        Self {
            weight: Tensor::new(vec![inputs, outputs], draw(inputs * outputs)).expect("shape"),
            bias: Tensor::vector(draw(outputs)),
        }
    }

    /// Uniform with the fan-in bound `sqrt(6 / inputs)` suited to ReLU trunks.
    pub fn he_uniform<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Self::uniform(inputs, outputs, (6.0 / inputs as f64).sqrt(), rng)
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> DenseNodes {
        let put = |tape: &mut Tape, t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        DenseNodes {
            weight: put(tape, &self.weight),
            bias: put(tape, &self.bias),
        }
    }

    pub fn tensors(&self) -> [&Tensor; 2] {
        [&self.weight, &self.bias]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

impl DenseNodes {
    /// `x W + b` for a batch `x` of shape `(B, in)`.
    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId, AutodiffError> {
        let xw = tape.matmul(x, self.weight)?;
        tape.add_row(xw, self.bias)
    }

    pub fn ids(&self) -> [NodeId; 2] {
        [self.weight, self.bias]
    }
}

/// Inverted dropout: zeroes entries with probability `rate` and rescales the
/// survivors by `1 / (1 - rate)`.
pub fn dropout<R: Rng + ?Sized>(tape: &mut Tape, x: NodeId, rate: f64, rng: &mut R) -> Result<NodeId, AutodiffError> {
    if rate <= 0.0 {
        return Ok(x);
    }
    let shape = tape.value(x).shape().to_vec();
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..tape.value(x).len())
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    let m = tape.constant(Tensor::new(shape, mask).expect("shape"));
    tape.mul(x, m)
}

/// ReLU multilayer perceptron with a linear output layer. Dropout, when
/// active, follows every hidden layer except the last.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

pub struct MlpNodes {
    layers: Vec<DenseNodes>,
}

impl MlpNodes {
    pub fn ids(&self) -> Vec<NodeId> {
        self.layers.iter().flat_map(DenseNodes::ids).collect()
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        x: NodeId,
        dropout_rate: f64,
        mut rng: Option<&mut R>,
    ) -> Result<NodeId, AutodiffError> {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, h)?;
            if i < last {
                h = tape.relu(h);
                if i + 1 < last {
                    if let Some(r) = rng.as_deref_mut() {
                        h = dropout(tape, h, dropout_rate, r)?;
                    }
                }
            }
        }
        Ok(h)
    }
}

impl Mlp {
    /// Layer widths `inputs -> hidden... -> outputs`, all parameters uniform in `[-bound, bound]`.
    pub fn uniform<R: Rng + ?Sized>(inputs: usize, hidden: &[usize], outputs: usize, bound: f64, rng: &mut R) -> Self {
        let mut widths = vec![inputs];
        widths.extend_from_slice(hidden);
        widths.push(outputs);
        Self {
            layers: widths.windows(2).map(|w| Dense::uniform(w[0], w[1], bound, rng)).collect(),
        }
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn outputs(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> MlpNodes {
        MlpNodes {
            layers: self.layers.iter().map(|l| l.bind(tape, trainable)).collect(),
        }
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| l.tensors())
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.tensors_mut())
    }
}

/// Flattens parameter tensors in order.
pub fn flatten_params<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Vec<f64> {
    params.into_iter().flat_map(|t| t.data().iter().copied()).collect()
}

/// Fills parameter tensors in order from `values`; returns the count consumed
/// or `None` when `values` is too short.
pub fn unflatten_params<'a>(params: impl IntoIterator<Item = &'a mut Tensor>, values: &[f64]) -> Option<usize> {
    let mut offset = 0;
    for t in params {
        let n = t.len();
        let src = values.get(offset..offset + n)?;
        t.data_mut().copy_from_slice(src);
        offset += n;
    }
    Some(offset)
}
