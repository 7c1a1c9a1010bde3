use super::spec::{LayerKind, NetworkSpec};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerParams {
    pub name: String,
    pub kind: LayerKind,
    pub trainable: usize,
    /// Running statistics kept by batch-norm layers.
    pub non_trainable: usize,
}

impl LayerParams {
    pub fn total(&self) -> usize {
        self.trainable + self.non_trainable
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParamCount {
    pub layers: Vec<LayerParams>,
    pub trainable: usize,
    pub non_trainable: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.trainable + self.non_trainable
    }

    /// `layer,kind,params` rows, one per layer, then a `total` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,kind,params\n");
        for l in &self.layers {
            out.push_str(&format!("{},{},{}\n", l.name, l.kind, l.total()));
        }
        out.push_str(&format!("total,all,{}\n", self.total()));
        out
    }
}

/// Exact parameter counts. Conv and transposed conv contribute
/// `F * (kh * kw * C + 1)`, batch norm `2C` trainable plus `2C` running,
/// dense `out * (in + 1)`.
pub fn count_parameters(spec: &NetworkSpec) -> Result<ParamCount> {
    let shapes = spec.infer_shapes()?;
    let mut count = ParamCount::default();
    for layer in &spec.layers {
        let input = layer
            .inputs
            .first()
            .and_then(|n| spec.layers.iter().position(|l| &l.name == n))
            .map(|j| shapes[j]);
        let (trainable, non_trainable) = match (layer.kind, input) {
            (LayerKind::Conv | LayerKind::UpConv, Some(s)) => {
                let (kh, kw) = layer.kernel.unwrap_or((1, 1));
                (layer.filters * (kh * kw * s.channels + 1), 0)
            }
            (LayerKind::Bn, Some(s)) => (2 * s.channels, 2 * s.channels),
            (LayerKind::Dense, Some(s)) => (layer.filters * (s.numel() + 1), 0),
            _ => (0, 0),
        };
        count.trainable += trainable;
        count.non_trainable += non_trainable;
        count.layers.push(LayerParams {
            name: layer.name.clone(),
            kind: layer.kind,
            trainable,
            non_trainable,
        });
    }
    Ok(count)
}
