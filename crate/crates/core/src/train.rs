//! Mini-batch training shared by the pixel network and the patch classifier.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, shape_err, Error, Result};
use crate::netbuilder::Network;
use crate::scalar::Real;
use crate::tensor::{ops, Adam, BatchNormMode, LossKind, Tape, Tensor};

/// Stacked samples: `inputs` is `(N, C, H, W)`, `targets` has leading dim N.
#[derive(Clone, Debug, PartialEq)]
pub struct Samples<T> {
    pub inputs: Tensor<T>,
    pub targets: Tensor<T>,
}

impl<T: Real> Samples<T> {
    pub fn new(inputs: Tensor<T>, targets: Tensor<T>) -> Result<Self> {
        let n = inputs.shape().first().copied().unwrap_or(0);
        if targets.shape().first().copied().unwrap_or(0) != n {
            return Err(shape_err(
                "samples",
                format!("inputs {:?} vs targets {:?}", inputs.shape(), targets.shape()),
            ));
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.shape().first().copied().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Batch made of the listed sample indices, in order.
    pub fn gather(&self, idx: &[usize]) -> Self {
        Self {
            inputs: gather_rows(&self.inputs, idx),
            targets: gather_rows(&self.targets, idx),
        }
    }
}

fn gather_rows<T: Real>(t: &Tensor<T>, idx: &[usize]) -> Tensor<T> {
    let row: usize = t.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(row * idx.len());
    for &i in idx {
        data.extend_from_slice(&t.data()[i * row..(i + 1) * row]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(shape, data).expect("gathered rows match shape")
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
}

/// Fraction of correct predictions: thresholded at 0.5 for binary targets,
/// row argmax for one-hot targets.
pub fn accuracy<T: Real>(kind: LossKind, pred: &Tensor<T>, target: &Tensor<T>) -> f64 {
    let half = T::lit(0.5);
    match kind {
        LossKind::BinaryCrossEntropy => {
            let hits = pred
                .data()
                .iter()
                .zip(target.data())
                .filter(|(&p, &y)| (p >= half) == (y >= half))
                .count();
            hits as f64 / pred.len().max(1) as f64
        }
        LossKind::CategoricalCrossEntropy => {
            let k = pred.shape().get(1).copied().unwrap_or(1);
            let rows = pred.data().chunks(k).zip(target.data().chunks(k));
            let n = pred.len() / k.max(1);
            let hits = rows.filter(|(p, y)| argmax(p) == argmax(y)).count();
            hits as f64 / n.max(1) as f64
        }
    }
}

fn argmax<T: Real>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Inference-mode predictions over `inputs` in chunks of `batch_size`.
pub fn predict_batched<T: Real>(net: &Network<T>, inputs: &Tensor<T>, batch_size: usize) -> Result<Tensor<T>> {
    let n = inputs.shape().first().copied().unwrap_or(0);
    let mut data = Vec::new();
    let mut out_shape = None;
    for start in (0..n).step_by(batch_size.max(1)) {
        let idx: Vec<usize> = (start..(start + batch_size.max(1)).min(n)).collect();
        let y = net.predict(gather_rows(inputs, &idx))?;
        out_shape.get_or_insert_with(|| y.shape().to_vec());
        data.extend_from_slice(y.data());
    }
    let mut shape = out_shape.ok_or_else(|| invalid("cannot predict on zero samples"))?;
    shape[0] = n;
    Tensor::new(shape, data)
}

/// Mean loss and accuracy in inference mode.
pub fn evaluate<T: Real>(net: &Network<T>, data: &Samples<T>, kind: LossKind, batch_size: usize) -> Result<(f64, f64)> {
    let pred = predict_batched(net, &data.inputs, batch_size)?;
    let (loss, _) = ops::loss(kind, &pred, &data.targets)?;
    Ok((loss.as_f64(), accuracy(kind, &pred, &data.targets)))
}

/// One optimizer step on a batch; returns the batch loss and accuracy.
pub fn train_step<T: Real>(
    net: &mut Network<T>,
    adam: &mut Adam<T>,
    batch: &Samples<T>,
    kind: LossKind,
) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let x = tape.leaf(batch.inputs.clone());
    let fwd = net.forward(&mut tape, x, BatchNormMode::train())?;
    let loss = tape.loss(kind, fwd.output, &batch.targets)?;
    let value = tape.value(loss).data()[0].as_f64();
    if !value.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    let acc = accuracy(kind, tape.value(fwd.output), &batch.targets);
    tape.backward(loss)?;
    let grads: Vec<Vec<T>> = fwd
        .params
        .iter()
        .map(|&p| tape.grad(p).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); tape.value(p).len()]))
        .collect();
    let names = net.param_names().to_vec();
    adam.step(net.params_mut(), &grads, &names)?;
    Ok((value, acc))
}

/// Trains for `cfg.epochs` epochs with a seeded per-epoch shuffle. Training
/// loss and accuracy are sample-weighted means over the epoch's batches;
/// validation runs in inference mode after each epoch. `on_epoch` sees each
/// row as soon as it is available.
pub fn fit<T: Real>(
    net: &mut Network<T>,
    adam: &mut Adam<T>,
    train: &Samples<T>,
    val: Option<&Samples<T>>,
    kind: LossKind,
    cfg: TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<Vec<EpochStats>> {
    if train.is_empty() {
        return Err(invalid("no training samples"));
    }
    if cfg.batch_size == 0 {
        return Err(invalid("batch size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut acc_sum) = (0.0, 0.0);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = train.gather(chunk);
            let (loss, acc) = train_step(net, adam, &batch, kind).map_err(|e| match e {
                Error::NonFinite(_) | Error::NonFiniteGradient(_) => Error::Diverged { epoch, batch: b + 1 },
                other => other,
            })?;
            loss_sum += loss * chunk.len() as f64;
            acc_sum += acc * chunk.len() as f64;
        }
        let (val_loss, val_acc) = match val.filter(|v| !v.is_empty()) {
            Some(v) => {
                let (l, a) = evaluate(net, v, kind, cfg.batch_size)?;
                (Some(l), Some(a))
            }
            None => (None, None),
        };
        let stats = EpochStats {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_acc: acc_sum / train.len() as f64,
            val_loss,
            val_acc,
        };
        on_epoch(&stats);
        history.push(stats);
    }
    Ok(history)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// `epoch,train_loss,train_acc,val_loss,val_acc`
pub fn pixel_curves_csv(history: &[EpochStats]) -> String {
    let mut out = String::from("epoch,train_loss,train_acc,val_loss,val_acc\n");
    for s in history {
        out.push_str(&format!(
            "{},{:.6},{:.6},{},{}\n",
            s.epoch,
            s.train_loss,
            s.train_acc,
            fmt_opt(s.val_loss),
            fmt_opt(s.val_acc)
        ));
    }
    out
}

/// `epoch,loss,accuracy` from the training columns.
pub fn patch_curves_csv(history: &[EpochStats]) -> String {
    let mut out = String::from("epoch,loss,accuracy\n");
    for s in history {
        out.push_str(&format!("{},{:.6},{:.6}\n", s.epoch, s.train_loss, s.train_acc));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netbuilder::build_patch_classifier;
    use crate::tensor::AdamConfig;

    fn toy(n: usize) -> Samples<f64> {
        // left half bright vs right half bright
        let x = Tensor::from_fn([n, 1, 8, 8], |i| {
            let (s, col) = (i / 64, i % 8);
            if (s % 2 == 0) == (col < 4) { 1.0 } else { 0.0 }
        });
        let y = Tensor::from_fn([n, 2], |i| if (i / 2) % 2 == i % 2 { 1.0 } else { 0.0 });
        Samples::new(x, y).unwrap()
    }

    #[test]
    fn accuracy_rules() {
        let p = Tensor::new([4], vec![0.5, 0.49, 0.9, 0.1]).unwrap();
        let y = Tensor::new([4], vec![1.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(accuracy(LossKind::BinaryCrossEntropy, &p, &y), 0.75);
        let p = Tensor::new([2, 2], vec![0.5, 0.5, 0.2, 0.8]).unwrap();
        let y = Tensor::new([2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(accuracy(LossKind::CategoricalCrossEntropy, &p, &y), 0.5);
    }

    #[test]
    fn gather_picks_rows() {
        let s = toy(4);
        let g = s.gather(&[3, 0]);
        assert_eq!(g.inputs.shape(), &[2, 1, 8, 8]);
        assert_eq!(&g.targets.data()[..2], &s.targets.data()[6..8]);
    }

    #[test]
    fn fit_is_deterministic_and_learns_toy_set() {
        let data = toy(64);
        let run = || {
            let mut net = Network::new(build_patch_classifier(8).unwrap(), 5).unwrap();
            let mut adam = Adam::new(AdamConfig::with_lr(1e-2));
            let cfg = TrainConfig {
                epochs: 3,
                batch_size: 8,
                seed: 11,
            };
            let h = fit(&mut net, &mut adam, &data, Some(&data), LossKind::CategoricalCrossEntropy, cfg, |_| {}).unwrap();
            (net, h)
        };
        let (a, ha) = run();
        let (b, hb) = run();
        assert_eq!(a, b);
        assert_eq!(ha, hb);
        assert!(ha[2].train_loss < ha[0].train_loss);
        assert!(ha[2].val_acc.unwrap() > 0.95);
        let csv = pixel_curves_csv(&ha);
        assert_eq!(csv.lines().count(), 4);
        assert!(patch_curves_csv(&ha).starts_with("epoch,loss,accuracy\n1,"));
    }

    #[test]
    fn empty_training_set_rejected() {
        let mut net = Network::<f64>::new(build_patch_classifier(8).unwrap(), 5).unwrap();
        let mut adam = Adam::new(AdamConfig::default());
        let empty = Samples::new(Tensor::zeros([0, 1, 8, 8]), Tensor::zeros([0, 2])).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            seed: 0,
        };
        assert!(fit(&mut net, &mut adam, &empty, None, LossKind::CategoricalCrossEntropy, cfg, |_| {}).is_err());
    }
}
