use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerKind {
    /// Network input. `kernel` carries `(H, W)` and `filters` the channel count.
    Input,
    Conv,
    Bn,
    Relu,
    MaxPool,
    UpConv,
    Concat,
    Sigmoid,
    Softmax,
    Dense,
}

impl LayerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Input => "input",
            LayerKind::Conv => "conv",
            LayerKind::Bn => "bn",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool => "maxpool",
            LayerKind::UpConv => "upconv",
            LayerKind::Concat => "concat",
            LayerKind::Sigmoid => "sigmoid",
            LayerKind::Softmax => "softmax",
            LayerKind::Dense => "dense",
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LayerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "input" => LayerKind::Input,
            "conv" => LayerKind::Conv,
            "bn" => LayerKind::Bn,
            "relu" => LayerKind::Relu,
            "maxpool" => LayerKind::MaxPool,
            "upconv" => LayerKind::UpConv,
            "concat" => LayerKind::Concat,
            "sigmoid" => LayerKind::Sigmoid,
            "softmax" => LayerKind::Softmax,
            "dense" => LayerKind::Dense,
            other => return Err(Error::Spec(format!("unknown layer kind `{other}`"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub kernel: Option<(usize, usize)>,
    /// Output channels for conv/upconv/input, output features for dense,
    /// 0 where the layer inherits its width.
    pub filters: usize,
    pub inputs: Vec<String>,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind, inputs: &[&str]) -> Self {
        Self {
            name: name.into(),
            kind,
            kernel: None,
            filters: 0,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn conv(name: impl Into<String>, input: &str, kernel: (usize, usize), filters: usize) -> Self {
        Self {
            kernel: Some(kernel),
            filters,
            ..Self::new(name, LayerKind::Conv, &[input])
        }
    }

    pub fn upconv(name: impl Into<String>, input: &str, filters: usize) -> Self {
        Self {
            kernel: Some((2, 2)),
            filters,
            ..Self::new(name, LayerKind::UpConv, &[input])
        }
    }

    pub fn dense(name: impl Into<String>, input: &str, features: usize) -> Self {
        Self {
            filters: features,
            ..Self::new(name, LayerKind::Dense, &[input])
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self.kind, LayerKind::Conv | LayerKind::UpConv | LayerKind::Bn | LayerKind::Dense)
    }
}

impl fmt::Display for LayerSpec {
    /// `name kind kHxkW filters inputs=a,b`
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kernel = match self.kernel {
            Some((h, w)) => format!("{h}x{w}"),
            None => "-".to_string(),
        };
        write!(
            f,
            "{} {} {} {} inputs={}",
            self.name,
            self.kind,
            kernel,
            self.filters,
            self.inputs.join(",")
        )
    }
}

impl FromStr for LayerSpec {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let bad = |why: &str| Error::Spec(format!("{why}: `{line}`"));
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [name, kind, kernel, filters, inputs] = fields[..] else {
            return Err(bad("expected 5 fields"));
        };
        let kernel = match kernel {
            "-" => None,
            k => {
                let (h, w) = k.split_once('x').ok_or_else(|| bad("kernel must be HxW"))?;
                Some((
                    h.parse().map_err(|_| bad("kernel height"))?,
                    w.parse().map_err(|_| bad("kernel width"))?,
                ))
            }
        };
        let inputs = inputs.strip_prefix("inputs=").ok_or_else(|| bad("missing inputs="))?;
        Ok(LayerSpec {
            name: name.to_string(),
            kind: kind.parse()?,
            kernel,
            filters: filters.parse().map_err(|_| bad("filters"))?,
            inputs: if inputs.is_empty() {
                Vec::new()
            } else {
                inputs.split(',').map(str::to_string).collect()
            },
        })
    }
}

/// Output shape of one layer for a single batch item: channels (or dense
/// features), height, width.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl LayerShape {
    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// Declarative layer DAG. Layers are listed in evaluation order; every input
/// must name an earlier layer.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct NetworkSpec {
    pub layers: Vec<LayerSpec>,
    pub width_schedule: Vec<usize>,
    /// Encoder levels before the bottleneck (0 for non-encoder networks).
    pub depth: usize,
    /// `(encoder output, decoder concat)` pairs.
    pub skip_pairs: Vec<(String, String)>,
}

impl NetworkSpec {
    pub fn layer(&self, name: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn output(&self) -> Option<&LayerSpec> {
        self.layers.last()
    }

    pub fn input_shape(&self) -> Option<LayerShape> {
        let first = self.layers.first()?;
        let (height, width) = first.kernel?;
        (first.kind == LayerKind::Input).then_some(LayerShape {
            channels: first.filters,
            height,
            width,
        })
    }

    /// Validates the graph and propagates shapes. Returns one shape per layer.
    pub fn infer_shapes(&self) -> Result<Vec<LayerShape>> {
        let mut index: HashMap<&str, usize> = HashMap::new();
        let mut shapes: Vec<LayerShape> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let err = |why: String| Error::Spec(format!("layer `{}`: {why}", layer.name));
            let mut operands = Vec::with_capacity(layer.inputs.len());
            for name in &layer.inputs {
                let &j = index
                    .get(name.as_str())
                    .ok_or_else(|| err(format!("input `{name}` is not an earlier layer")))?;
                operands.push(shapes[j]);
            }
            let arity_ok = match layer.kind {
                LayerKind::Input => operands.is_empty(),
                LayerKind::Concat => !operands.is_empty(),
                _ => operands.len() == 1,
            };
            if !arity_ok {
                return Err(err(format!("{} cannot take {} inputs", layer.kind, operands.len())));
            }
            let shape = match layer.kind {
                LayerKind::Input => {
                    let (height, width) = layer.kernel.ok_or_else(|| err("input needs HxW".into()))?;
                    if layer.filters == 0 || height == 0 || width == 0 {
                        return Err(err("input dims must be positive".into()));
                    }
                    LayerShape {
                        channels: layer.filters,
                        height,
                        width,
                    }
                }
                LayerKind::Conv => {
                    let (kh, kw) = layer.kernel.ok_or_else(|| err("conv needs a kernel".into()))?;
                    if kh % 2 == 0 || kw % 2 == 0 {
                        return Err(err(format!("conv kernel {kh}x{kw} must be odd")));
                    }
                    if layer.filters == 0 {
                        return Err(err("conv needs filters > 0".into()));
                    }
                    LayerShape {
                        channels: layer.filters,
                        ..operands[0]
                    }
                }
                LayerKind::UpConv => {
                    if layer.filters == 0 || layer.kernel.is_none() {
                        return Err(err("upconv needs a kernel and filters > 0".into()));
                    }
                    LayerShape {
                        channels: layer.filters,
                        height: operands[0].height * 2,
                        width: operands[0].width * 2,
                    }
                }
                LayerKind::MaxPool => {
                    let s = operands[0];
                    if s.height % 2 != 0 || s.width % 2 != 0 {
                        return Err(err(format!("cannot pool odd spatial size {}x{}", s.height, s.width)));
                    }
                    LayerShape {
                        height: s.height / 2,
                        width: s.width / 2,
                        ..s
                    }
                }
                LayerKind::Concat => {
                    let first = operands[0];
                    if let Some(o) = operands.iter().find(|o| (o.height, o.width) != (first.height, first.width)) {
                        return Err(err(format!(
                            "concat operands disagree spatially: {}x{} vs {}x{}",
                            first.height, first.width, o.height, o.width
                        )));
                    }
                    LayerShape {
                        channels: operands.iter().map(|o| o.channels).sum(),
                        ..first
                    }
                }
                LayerKind::Dense => {
                    if layer.filters == 0 {
                        return Err(err("dense needs features > 0".into()));
                    }
                    LayerShape {
                        channels: layer.filters,
                        height: 1,
                        width: 1,
                    }
                }
                LayerKind::Bn | LayerKind::Relu | LayerKind::Sigmoid | LayerKind::Softmax => operands[0],
            };
            if index.insert(&layer.name, i).is_some() {
                return Err(err("duplicate layer name".into()));
            }
            shapes.push(shape);
        }
        Ok(shapes)
    }

    /// Line-oriented text form: `#` header lines carry the schedule metadata,
    /// then one layer per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let widths: Vec<String> = self.width_schedule.iter().map(|w| w.to_string()).collect();
        out.push_str(&format!("# widths {}\n", widths.join(",")));
        out.push_str(&format!("# depth {}\n", self.depth));
        for (enc, dec) in &self.skip_pairs {
            out.push_str(&format!("# skip {enc} {dec}\n"));
        }
        for layer in &self.layers {
            out.push_str(&layer.to_string());
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut spec = NetworkSpec::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            if let Some(meta) = line.strip_prefix('#') {
                let mut parts = meta.split_whitespace();
                match (parts.next(), parts.next(), parts.next()) {
                    (Some("widths"), Some(ws), None) => {
                        spec.width_schedule = ws
                            .split(',')
                            .map(|w| w.parse().map_err(|_| Error::Spec(format!("bad width `{w}`"))))
                            .collect::<Result<_>>()?;
                    }
                    (Some("widths"), None, None) => spec.width_schedule.clear(),
                    (Some("depth"), Some(d), None) => {
                        spec.depth = d.parse().map_err(|_| Error::Spec(format!("bad depth `{d}`")))?;
                    }
                    (Some("skip"), Some(a), Some(b)) => spec.skip_pairs.push((a.to_string(), b.to_string())),
                    _ => {}
                }
                continue;
            }
            spec.layers.push(line.parse()?);
        }
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_line_round_trip() {
        let l = LayerSpec::conv("enc1_conv", "input", (3, 1), 16);
        assert_eq!(l.to_string(), "enc1_conv conv 3x1 16 inputs=input");
        assert_eq!(l.to_string().parse::<LayerSpec>().unwrap(), l);
        let c = LayerSpec::new("cat", LayerKind::Concat, &["a", "b"]);
        assert_eq!(c.to_string(), "cat concat - 0 inputs=a,b");
        assert_eq!(c.to_string().parse::<LayerSpec>().unwrap(), c);
    }

    #[test]
    fn parse_errors() {
        assert!("x conv 3x3 8".parse::<LayerSpec>().is_err());
        assert!("x warp 3x3 8 inputs=a".parse::<LayerSpec>().is_err());
        assert!("x conv 3by3 8 inputs=a".parse::<LayerSpec>().is_err());
    }

    #[test]
    fn shape_check_catches_bad_graphs() {
        let input = LayerSpec {
            kernel: Some((4, 4)),
            filters: 1,
            ..LayerSpec::new("input", LayerKind::Input, &[])
        };
        let mut spec = NetworkSpec {
            layers: vec![input.clone(), LayerSpec::conv("c", "missing", (3, 3), 2)],
            ..Default::default()
        };
        assert!(spec.infer_shapes().is_err());
        spec.layers[1] = LayerSpec::conv("input", "input", (3, 3), 2);
        assert!(spec.infer_shapes().unwrap_err().to_string().contains("duplicate"));
        spec.layers = vec![
            input,
            LayerSpec::new("p", LayerKind::MaxPool, &["input"]),
            LayerSpec::new("cat", LayerKind::Concat, &["input", "p"]),
        ];
        assert!(spec.infer_shapes().unwrap_err().to_string().contains("spatially"));
        assert_eq!(NetworkSpec::default().infer_shapes().unwrap(), vec![]);
    }
}
