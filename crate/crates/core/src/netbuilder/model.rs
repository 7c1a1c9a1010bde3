use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::spec::{LayerKind, LayerShape, NetworkSpec};
use crate::error::{invalid, shape_err, Error, Result};
use crate::scalar::Real;
use crate::tensor::checkpoint::{Checkpoint, OptimizerState};
use crate::tensor::{Adam, BatchNormMode, Padding, RunningStats, Tape, Tensor, Var};

pub const BN_EPSILON: f64 = 1e-5;

/// Result of one forward pass recorded on a tape.
pub struct Forward {
    pub output: Var,
    /// Tape handles of the parameters, in [`Network::params`] order.
    pub params: Vec<Var>,
}

/// Executable network: a shape-checked spec plus its weights and batch-norm
/// running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    spec: NetworkSpec,
    shapes: Vec<LayerShape>,
    params: Vec<Tensor<T>>,
    names: Vec<String>,
    slots: Vec<Range<usize>>,
    running: Vec<Option<RunningStats<T>>>,
}

impl<T: Real> Network<T> {
    /// Fan-in scaled uniform init, `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`;
    /// biases and shifts start at 0, scales at 1.
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = |shape: Vec<usize>, fan_in: usize| {
            let limit = (6.0 / fan_in.max(1) as f64).sqrt();
            Tensor::from_fn(shape, |_| T::lit(rng.random_range(-limit..limit)))
        };
        Self::assemble(spec, |role, _, shape, fan_in| match role {
            "kernel" | "weight" => Ok(init(shape, fan_in)),
            "gamma" => Ok(Tensor::full(shape, T::one())),
            _ => Ok(Tensor::zeros(shape)),
        })
    }

    /// Walks the spec creating each parameter through `make(role, name,
    /// shape, fan_in)`.
    fn assemble(
        spec: NetworkSpec,
        mut make: impl FnMut(&str, &str, Vec<usize>, usize) -> Result<Tensor<T>>,
    ) -> Result<Self> {
        let shapes = spec.infer_shapes()?;
        if let Some(first) = spec.layers.first() {
            if first.kind != LayerKind::Input {
                return Err(Error::Spec("first layer must be the input".into()));
            }
        }
        if spec.layers.iter().skip(1).any(|l| l.kind == LayerKind::Input) {
            return Err(Error::Spec("only one input layer is supported".into()));
        }
        let mut params = Vec::new();
        let mut names = Vec::new();
        let mut slots = Vec::new();
        let mut running = Vec::new();
        for layer in &spec.layers {
            let start = params.len();
            let in_shape = layer
                .inputs
                .first()
                .and_then(|n| spec.layers.iter().position(|l| &l.name == n))
                .map(|j| shapes[j]);
            let mut add = |role: &str, shape: Vec<usize>, fan_in: usize| -> Result<()> {
                let name = format!("{}.{role}", layer.name);
                params.push(make(role, &name, shape, fan_in)?);
                names.push(name);
                Ok(())
            };
            let mut stats = None;
            match (layer.kind, in_shape) {
                (LayerKind::Conv | LayerKind::UpConv, Some(s)) => {
                    let (kh, kw) = layer.kernel.unwrap_or((1, 1));
                    add("kernel", vec![layer.filters, s.channels, kh, kw], s.channels * kh * kw)?;
                    add("bias", vec![layer.filters], 1)?;
                }
                (LayerKind::Bn, Some(s)) => {
                    add("gamma", vec![s.channels], 1)?;
                    add("beta", vec![s.channels], 1)?;
                    stats = Some(RunningStats::new(s.channels));
                }
                (LayerKind::Dense, Some(s)) => {
                    add("weight", vec![layer.filters, s.numel()], s.numel())?;
                    add("bias", vec![layer.filters], 1)?;
                }
                _ => {}
            }
            slots.push(start..params.len());
            running.push(stats);
        }
        Ok(Self {
            spec,
            shapes,
            params,
            names,
            slots,
            running,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn shapes(&self) -> &[LayerShape] {
        &self.shapes
    }

    pub fn input_shape(&self) -> Option<LayerShape> {
        self.spec.input_shape()
    }

    pub fn output_shape(&self) -> Option<LayerShape> {
        self.shapes.last().copied()
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn running_stats(&self, layer: &str) -> Option<&RunningStats<T>> {
        let i = self.spec.layers.iter().position(|l| l.name == layer)?;
        self.running[i].as_ref()
    }

    /// Records the network on `tape`. Train-mode batch norm updates the
    /// running statistics.
    pub fn forward(&mut self, tape: &mut Tape<T>, input: Var, mode: BatchNormMode) -> Result<Forward> {
        let param_vars: Vec<Var> = self.params.iter().map(|p| tape.leaf(p.clone())).collect();
        let mut outs: Vec<Var> = Vec::with_capacity(self.spec.layers.len());
        if let Some(expect) = self.input_shape() {
            let got = tape.value(input).shape();
            if got.len() != 4 || got[1..] != [expect.channels, expect.height, expect.width] {
                return Err(shape_err(
                    "network",
                    format!(
                        "input {got:?} does not match (N, {}, {}, {})",
                        expect.channels, expect.height, expect.width
                    ),
                ));
            }
        }
        for (i, layer) in self.spec.layers.iter().enumerate() {
            let src = |k: usize| -> Var {
                let name = &layer.inputs[k];
                let j = self.spec.layers[..i].iter().position(|l| &l.name == name).expect("checked by infer_shapes");
                outs[j]
            };
            let p = &param_vars[self.slots[i].clone()];
            let out = match layer.kind {
                LayerKind::Input => input,
                LayerKind::Conv => tape.conv2d(src(0), p[0], p[1], 1, Padding::Same)?,
                LayerKind::UpConv => tape.transpose_conv2d(src(0), p[0], p[1], 2)?,
                LayerKind::Bn => {
                    let stats = self.running[i].as_mut().expect("bn layers own running stats");
                    tape.batch_norm(src(0), p[0], p[1], mode, stats, BN_EPSILON)?
                }
                LayerKind::Relu => tape.relu(src(0)),
                LayerKind::MaxPool => tape.maxpool2x2(src(0))?,
                LayerKind::Concat => {
                    let ins: Vec<Var> = (0..layer.inputs.len()).map(src).collect();
                    tape.concat(&ins)?
                }
                LayerKind::Sigmoid => tape.sigmoid(src(0)),
                LayerKind::Softmax => tape.softmax(src(0))?,
                LayerKind::Dense => tape.dense(src(0), p[0], p[1])?,
            };
            outs.push(out);
        }
        let output = *outs.last().ok_or_else(|| invalid("network has no layers"))?;
        Ok(Forward {
            output,
            params: param_vars,
        })
    }

    /// Inference-mode forward pass; running statistics are left untouched.
    pub fn predict(&self, input: Tensor<T>) -> Result<Tensor<T>> {
        let mut scratch = self.clone();
        let mut tape = Tape::new();
        let x = tape.leaf(input);
        let fwd = scratch.forward(&mut tape, x, BatchNormMode::Infer)?;
        Ok(tape.take_value(fwd.output))
    }

    /// Parameters and running statistics as f64 tensors, plus the spec text
    /// under the `spec` meta key.
    pub fn to_checkpoint(&self, optimizer: Option<&Adam<T>>, extra_meta: &[(&str, &str)]) -> Checkpoint {
        let mut meta = vec![("spec".to_string(), self.spec.to_text())];
        meta.extend(extra_meta.iter().map(|(k, v)| (k.to_string(), v.to_string())));
        let mut tensors: Vec<(String, Tensor<f64>)> =
            self.names.iter().cloned().zip(self.params.iter().map(|p| p.cast())).collect();
        for (layer, stats) in self.spec.layers.iter().zip(&self.running) {
            if let Some(s) = stats {
                let to64 = |v: &[T]| Tensor::from_fn([v.len()], |i| v[i].as_f64());
                tensors.push((format!("{}.running_mean", layer.name), to64(&s.mean)));
                tensors.push((format!("{}.running_var", layer.name), to64(&s.var)));
            }
        }
        Checkpoint {
            meta,
            tensors,
            optimizer: optimizer.map(|a| OptimizerState::capture(a, &self.names)),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Self, Option<Adam<T>>)> {
        let text = ckpt
            .meta_value("spec")
            .ok_or_else(|| Error::Spec("checkpoint carries no network spec".into()))?;
        let spec = NetworkSpec::from_text(text)?;
        let fetch = |name: &str, shape: &[usize]| -> Result<Tensor<T>> {
            let t = ckpt
                .tensor(name)
                .ok_or_else(|| Error::Spec(format!("checkpoint is missing `{name}`")))?;
            if t.shape() != shape {
                return Err(shape_err(
                    "checkpoint",
                    format!("`{name}` has shape {:?}, network expects {shape:?}", t.shape()),
                ));
            }
            Ok(t.cast())
        };
        let mut net = Self::assemble(spec, |_, name, shape, _| fetch(name, &shape))?;
        for (layer, stats) in net.spec.layers.iter().zip(net.running.iter_mut()) {
            if let Some(s) = stats {
                let c = s.mean.len();
                s.mean = fetch(&format!("{}.running_mean", layer.name), &[c])?.into_data();
                s.var = fetch(&format!("{}.running_var", layer.name), &[c])?.into_data();
            }
        }
        let adam = match &ckpt.optimizer {
            None => None,
            Some(state) => {
                let names: Vec<&String> = state.moments.iter().map(|(n, _, _)| n).collect();
                if names.len() != net.names.len() || names.iter().zip(&net.names).any(|(a, b)| *a != b) {
                    return Err(Error::Spec("optimizer state does not match network parameters".into()));
                }
                Some(state.restore()?)
            }
        };
        Ok((net, adam))
    }
}

#[cfg(test)]
mod tests {
    use super::super::build::*;
    use super::*;
    use crate::tensor::LossKind;

    fn tiny_spec() -> NetworkSpec {
        build_mu_net(BlockVariant::BlockII, &[2, 2, 2, 2, 2], InputShape::gray(16)).unwrap()
    }

    #[test]
    fn init_is_seeded() {
        let a = Network::<f64>::new(tiny_spec(), 7).unwrap();
        let b = Network::<f64>::new(tiny_spec(), 7).unwrap();
        let c = Network::<f64>::new(tiny_spec(), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params(), c.params());
        let k = &a.params()[0];
        assert!(k.data().iter().all(|v| v.abs() <= (6.0f64 / 9.0).sqrt()));
    }

    #[test]
    fn unet_output_is_a_probability_map() {
        let spec = build_unet(&[2, 2, 2, 2, 2], InputShape::gray(16)).unwrap();
        let net = Network::<f64>::new(spec, 1).unwrap();
        let y = net.predict(Tensor::from_fn([2, 1, 16, 16], |i| (i % 7) as f64 / 7.0)).unwrap();
        assert_eq!(y.shape(), &[2, 1, 16, 16]);
        assert!(y.data().iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let net = Network::<f64>::new(tiny_spec(), 1).unwrap();
        assert!(net.predict(Tensor::zeros([1, 1, 8, 8])).is_err());
    }

    #[test]
    fn patch_classifier_rows_sum_to_one() {
        let net = Network::<f64>::new(build_patch_classifier(8).unwrap(), 3).unwrap();
        let y = net.predict(Tensor::from_fn([5, 1, 8, 8], |i| (i % 5) as f64)).unwrap();
        assert_eq!(y.shape(), &[5, 2]);
        for row in y.data().chunks(2) {
            assert!((row[0] + row[1] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_predictions_and_optimizer() {
        let mut net = Network::<f64>::new(tiny_spec(), 2).unwrap();
        let mut adam = Adam::new(Default::default());
        let x = Tensor::from_fn([2, 1, 16, 16], |i| ((i * 31) % 17) as f64 / 17.0);
        let y = Tensor::from_fn([2, 1, 16, 16], |i| ((i / 16) % 2) as f64);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let fwd = net.forward(&mut tape, xv, BatchNormMode::train()).unwrap();
        let loss = tape.loss(LossKind::BinaryCrossEntropy, fwd.output, &y).unwrap();
        tape.backward(loss).unwrap();
        let grads: Vec<Vec<f64>> = fwd.params.iter().map(|&p| tape.grad(p).unwrap().to_vec()).collect();
        let names = net.param_names().to_vec();
        adam.step(net.params_mut(), &grads, &names).unwrap();

        let ckpt = net.to_checkpoint(Some(&adam), &[("arch", "b2")]);
        let back = Checkpoint::read_from(ckpt.to_bytes().as_slice()).unwrap();
        let (net2, adam2) = Network::<f64>::from_checkpoint(&back).unwrap();
        assert_eq!(net2, net);
        assert_eq!(adam2.unwrap(), adam);
        assert_eq!(net2.predict(x.clone()).unwrap(), net.predict(x).unwrap());
        assert_ne!(net.running_stats("block1_u1_bn").unwrap().mean, vec![0.0; 2]);
    }

    #[test]
    fn from_checkpoint_rejects_shape_mismatch() {
        let net = Network::<f64>::new(tiny_spec(), 2).unwrap();
        let mut ckpt = net.to_checkpoint(None, &[]);
        ckpt.tensors[0].1 = Tensor::zeros([1]);
        assert!(Network::<f64>::from_checkpoint(&ckpt).is_err());
    }
}
