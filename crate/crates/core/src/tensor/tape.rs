use super::ops::{self, BatchNormMode, BnCache, LossKind, Padding, RunningStats};
use super::Tensor;
use crate::error::{invalid, Result};
use crate::scalar::Real;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: Padding,
    },
    TransposeConv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        cache: BnCache<T>,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Concat(Vec<Var>),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    /// Scalar whose gradient w.r.t. `input` was computed in the forward pass.
    Reduce {
        input: Var,
        grad: Vec<T>,
    },
}

/// Linear record of a computation, replayed in reverse by [`Tape::backward`].
///
/// Values are appended in evaluation order, so every operand index is smaller
/// than its consumer's and a single reverse sweep visits nodes in a valid
/// topological order.
pub struct Tape<T> {
    values: Vec<Tensor<T>>,
    ops: Vec<Op<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            ops: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.values.push(value);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    /// Gradient of the last [`backward`](Self::backward) root w.r.t. `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.values[v.0].grad()
    }

    pub fn take_value(&mut self, v: Var) -> Tensor<T> {
        std::mem::replace(&mut self.values[v.0], Tensor::zeros([0]))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, padding: Padding) -> Result<Var> {
        let y = ops::conv2d(self.value(input), self.value(kernel), self.value(bias), stride, padding)?;
        Ok(self.push(
            y,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
        ))
    }

    pub fn transpose_conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize) -> Result<Var> {
        let y = ops::transpose_conv2d(self.value(input), self.value(kernel), self.value(bias), stride)?;
        Ok(self.push(
            y,
            Op::TransposeConv2d {
                input,
                kernel,
                bias,
                stride,
            },
        ))
    }

    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode,
        running: &mut RunningStats<T>,
        epsilon: f64,
    ) -> Result<Var> {
        let (y, cache) = ops::batch_norm(self.value(input), self.value(gamma), self.value(beta), mode, running, epsilon)?;
        Ok(self.push(
            y,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                cache,
            },
        ))
    }

    pub fn maxpool2x2(&mut self, input: Var) -> Result<Var> {
        let (y, argmax) = ops::maxpool2x2(self.value(input))?;
        Ok(self.push(y, Op::MaxPool { input, argmax }))
    }

    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let parts: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
        let y = ops::concat_channels(&parts)?;
        Ok(self.push(y, Op::Concat(inputs.to_vec())))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let y = ops::relu(self.value(input));
        self.push(y, Op::Relu(input))
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let y = ops::sigmoid(self.value(input));
        self.push(y, Op::Sigmoid(input))
    }

    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let y = ops::softmax(self.value(input))?;
        Ok(self.push(y, Op::Softmax(input)))
    }

    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = ops::dense(self.value(input), self.value(weight), self.value(bias))?;
        Ok(self.push(y, Op::Dense { input, weight, bias }))
    }

    /// Mean loss of `pred` against a constant target.
    pub fn loss(&mut self, kind: LossKind, pred: Var, target: &Tensor<T>) -> Result<Var> {
        let (value, grad) = ops::loss(kind, self.value(pred), target)?;
        Ok(self.push(Tensor::scalar(value), Op::Reduce { input: pred, grad }))
    }

    /// `sum(weights * input)`; turns any tensor-valued fragment into a scalar.
    pub fn weighted_sum(&mut self, input: Var, weights: &Tensor<T>) -> Result<Var> {
        let x = self.value(input);
        if x.shape() != weights.shape() {
            return Err(invalid(format!(
                "weighted_sum weights {:?} vs input {:?}",
                weights.shape(),
                x.shape()
            )));
        }
        let value = x.data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum();
        Ok(self.push(
            Tensor::scalar(value),
            Op::Reduce {
                input,
                grad: weights.data().to_vec(),
            },
        ))
    }

    /// Reverse sweep from a scalar `root`; afterwards every value that `root`
    /// depends on carries its gradient in [`Tensor::grad`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.values[root.0].len() != 1 {
            return Err(invalid(format!(
                "backward root must be scalar, got shape {:?}",
                self.values[root.0].shape()
            )));
        }
        for v in &mut self.values {
            v.take_grad();
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.values.len()];
        grads[root.0] = Some(vec![T::one()]);
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let contributions = self.input_grads(idx, &g)?;
            for (var, contrib) in contributions {
                accumulate(&mut grads[var.0], contrib);
            }
            self.values[idx].set_grad(g)?;
        }
        Ok(())
    }

    fn input_grads(&self, idx: usize, g: &[T]) -> Result<Vec<(Var, Vec<T>)>> {
        let val = |v: Var| &self.values[v.0];
        Ok(match &self.ops[idx] {
            Op::Leaf => Vec::new(),
            &Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            } => {
                let cg = ops::conv2d_backward(g, val(input), val(kernel), val(bias), stride, padding)?;
                vec![(input, cg.input), (kernel, cg.kernel), (bias, cg.bias)]
            }
            &Op::TransposeConv2d {
                input,
                kernel,
                bias,
                stride,
            } => {
                let cg = ops::transpose_conv2d_backward(g, val(input), val(kernel), val(bias), stride)?;
                vec![(input, cg.input), (kernel, cg.kernel), (bias, cg.bias)]
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                cache,
            } => {
                let bg = ops::batch_norm_backward(g, val(*input).shape(), val(*gamma), cache)?;
                vec![(*input, bg.input), (*gamma, bg.gamma), (*beta, bg.beta)]
            }
            Op::MaxPool { input, argmax } => {
                vec![(*input, ops::maxpool2x2_backward(g, argmax, val(*input).len()))]
            }
            Op::Concat(inputs) => {
                let shapes: Vec<&[usize]> = inputs.iter().map(|&v| val(v).shape()).collect();
                inputs
                    .iter()
                    .copied()
                    .zip(ops::concat_channels_backward(g, &shapes))
                    .collect()
            }
            &Op::Relu(input) => vec![(input, ops::relu_backward(g, val(input).data()))],
            &Op::Sigmoid(input) => vec![(input, ops::sigmoid_backward(g, self.values[idx].data()))],
            &Op::Softmax(input) => vec![(input, ops::softmax_backward(g, &self.values[idx])?)],
            &Op::Dense { input, weight, bias } => {
                let dg = ops::dense_backward(g, val(input), val(weight), val(bias))?;
                vec![(input, dg.input), (weight, dg.weight), (bias, dg.bias)]
            }
            Op::Reduce { input, grad } => {
                let scale = g[0];
                vec![(*input, grad.iter().map(|&v| v * scale).collect())]
            }
        })
    }
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, contrib: Vec<T>) {
    match slot {
        None => *slot = Some(contrib),
        Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, &b)| *a = *a + b),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shared_operand_accumulates() {
        // y = sum(relu(x) + relu(x)) through a concat of the same var
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new([1, 1, 1, 2], vec![1.0, -1.0]).unwrap());
        let r = tape.relu(x);
        let c = tape.concat(&[r, r]).unwrap();
        let s = tape.weighted_sum(c, &Tensor::full([1, 2, 1, 2], 1.0)).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 0.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros([3]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn unreachable_values_get_no_grad() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::full([2], 1.0));
        let b = tape.leaf(Tensor::full([2], 2.0));
        let s = tape.weighted_sum(a, &Tensor::full([2], 3.0)).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[3.0, 3.0]);
        assert!(tape.grad(b).is_none());
    }
}
