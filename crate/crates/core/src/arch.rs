//! Architecture descriptions: an input shape plus an ordered layer list,
//! validated by shape inference and stored as TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::composite::CompositeConvSpec;
use crate::error::{ArchIssue, Error, Result};
use crate::ops::conv::{output_len, same_padding};
use crate::ops::pool::maxpool_output_shape;
use crate::tensor::Shape;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum LayerSpec {
    /// Plain convolution with same padding.
    Conv {
        in_channels: usize,
        out_channels: usize,
        kh: usize,
        kw: usize,
        #[serde(default = "unit_stride")]
        stride: (usize, usize),
    },
    Composite {
        in_channels: usize,
        composite: CompositeConvSpec,
    },
    MaxPool {
        #[serde(default = "two")]
        k: usize,
        #[serde(default = "two")]
        stride: usize,
    },
    GlobalMaxPool,
    Relu,
    Dense {
        inputs: usize,
        outputs: usize,
    },
    /// Marks the classifier output; the network emits logits and the loss
    /// applies the softmax.
    Softmax,
}

fn unit_stride() -> (usize, usize) {
    (1, 1)
}

fn two() -> usize {
    2
}

impl LayerSpec {
    pub fn conv(in_channels: usize, out_channels: usize, kh: usize, kw: usize) -> Self {
        LayerSpec::Conv {
            in_channels,
            out_channels,
            kh,
            kw,
            stride: (1, 1),
        }
    }

    pub fn composite(in_channels: usize, composite: CompositeConvSpec) -> Self {
        LayerSpec::Composite {
            in_channels,
            composite,
        }
    }

    pub const fn maxpool() -> Self {
        LayerSpec::MaxPool { k: 2, stride: 2 }
    }

    pub const fn dense(inputs: usize, outputs: usize) -> Self {
        LayerSpec::Dense { inputs, outputs }
    }

    pub const fn has_params(&self) -> bool {
        matches!(
            self,
            LayerSpec::Conv { .. } | LayerSpec::Composite { .. } | LayerSpec::Dense { .. }
        )
    }

    /// Short kind label used for report row names.
    pub const fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } | LayerSpec::Composite { .. } => "conv",
            LayerSpec::MaxPool { .. } => "pool",
            LayerSpec::GlobalMaxPool => "gmp",
            LayerSpec::Relu => "relu",
            LayerSpec::Dense { .. } => "fc",
            LayerSpec::Softmax => "softmax",
        }
    }

    /// Output shape for `input`, or a description of why the layer does not
    /// fit.
    pub fn output_shape(&self, input: Shape) -> std::result::Result<Shape, String> {
        match self {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kh,
                kw,
                stride,
            } => {
                if *in_channels != input.c {
                    return Err(format!(
                        "expects {in_channels} input channels, predecessor yields {}",
                        input.c
                    ));
                }
                if *out_channels == 0 || *kh == 0 || *kw == 0 || stride.0 == 0 || stride.1 == 0 {
                    return Err("zero-sized conv parameter".into());
                }
                let (py, px) = same_padding(*kh, *kw);
                let oh = output_len(input.h, *kh, stride.0, py);
                let ow = output_len(input.w, *kw, stride.1, px);
                match (oh, ow) {
                    (Some(h), Some(w)) => Ok(Shape::new(input.n, *out_channels, h, w)),
                    _ => Err(format!("{kh}x{kw} kernel does not fit {}x{} input", input.h, input.w)),
                }
            }
            LayerSpec::Composite {
                in_channels,
                composite,
            } => {
                if *in_channels != input.c {
                    return Err(format!(
                        "expects {in_channels} input channels, predecessor yields {}",
                        input.c
                    ));
                }
                composite.output_shape(input).map_err(|e| e.to_string())
            }
            LayerSpec::MaxPool { k, stride } => {
                maxpool_output_shape(input, *k, *stride).map_err(|e| e.to_string())
            }
            LayerSpec::GlobalMaxPool => {
                if input.h == 0 || input.w == 0 {
                    Err("empty spatial extent".into())
                } else {
                    Ok(Shape::new(input.n, input.c, 1, 1))
                }
            }
            LayerSpec::Relu | LayerSpec::Softmax => Ok(input),
            LayerSpec::Dense { inputs, outputs } => {
                if *inputs != input.sample() {
                    Err(format!(
                        "dense fan-in {inputs} does not match flattened input {} ({}x{}x{})",
                        input.sample(),
                        input.c,
                        input.h,
                        input.w
                    ))
                } else {
                    Ok(Shape::new(input.n, *outputs, 1, 1))
                }
            }
        }
    }
}

impl std::fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LayerSpec::Conv {
                out_channels,
                kh,
                kw,
                stride,
                ..
            } => {
                write!(f, "{kw}x{kh},{out_channels}")?;
                if *stride != (1, 1) {
                    write!(f, " /{}x{}", stride.0, stride.1)?;
                }
                Ok(())
            }
            LayerSpec::Composite { composite, .. } => write!(f, "{composite}"),
            LayerSpec::MaxPool { k, stride } => write!(f, "{k}x{k} maxpool /{stride}"),
            LayerSpec::GlobalMaxPool => write!(f, "global maxpool"),
            LayerSpec::Relu => write!(f, "ReLU"),
            LayerSpec::Dense { inputs, outputs } => write!(f, "{inputs} x {outputs}"),
            LayerSpec::Softmax => write!(f, "softmax"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub name: String,
    /// `(c, h, w)` of one input image.
    pub input: (usize, usize, usize),
    pub layers: Vec<LayerSpec>,
}

impl ArchSpec {
    pub fn new(name: impl Into<String>, input: (usize, usize, usize), layers: Vec<LayerSpec>) -> Self {
        ArchSpec {
            name: name.into(),
            input,
            layers,
        }
    }

    pub fn with_input(&self, input: (usize, usize, usize)) -> Self {
        ArchSpec {
            input,
            ..self.clone()
        }
    }

    pub fn input_shape(&self, batch: usize) -> Shape {
        Shape::new(batch, self.input.0, self.input.1, self.input.2)
    }

    /// Every problem found while chaining shapes through the layers. Checking
    /// continues past a bad layer whenever its output shape is still known.
    pub fn issues(&self) -> Vec<ArchIssue> {
        let mut issues = Vec::new();
        let mut shape = self.input_shape(1);
        if shape.numel() == 0 {
            issues.push(ArchIssue {
                layer: 0,
                msg: "input has a zero dimension".into(),
            });
            return issues;
        }
        for (i, layer) in self.layers.iter().enumerate() {
            match layer.output_shape(shape) {
                Ok(s) => shape = s,
                Err(msg) => {
                    issues.push(ArchIssue { layer: i, msg });
                    match recover_shape(layer, shape) {
                        Some(s) => shape = s,
                        None => break,
                    }
                }
            }
        }
        issues
    }

    pub fn validate(&self) -> Result<()> {
        let issues = self.issues();
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidArch {
                arch: self.name.clone(),
                issues,
            })
        }
    }

    /// Output shape of every layer for a batch of one.
    pub fn shapes(&self) -> Result<Vec<Shape>> {
        self.validate()?;
        let mut shape = self.input_shape(1);
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            shape = layer.output_shape(shape).expect("validated");
            out.push(shape);
        }
        Ok(out)
    }

    pub fn output_shape(&self) -> Result<Shape> {
        Ok(self.shapes()?.last().copied().unwrap_or(self.input_shape(1)))
    }

    /// Receptive field `(rows, cols)` of one output element in input pixels.
    pub fn receptive_field(&self) -> (usize, usize) {
        let (mut rf, mut jump) = ((1usize, 1usize), (1usize, 1usize));
        for layer in &self.layers {
            let (k, s) = match layer {
                LayerSpec::Conv { kh, kw, stride, .. } => ((*kh, *kw), *stride),
                LayerSpec::Composite { composite, .. } => {
                    let kh = composite.groups.iter().map(|g| g.kh).max().unwrap_or(1);
                    let kw = composite.groups.iter().map(|g| g.kw).max().unwrap_or(1);
                    ((kh, kw), composite.stride)
                }
                LayerSpec::MaxPool { k, stride } => ((*k, *k), (*stride, *stride)),
                _ => continue,
            };
            rf.0 += (k.0 - 1) * jump.0;
            rf.1 += (k.1 - 1) * jump.1;
            jump.0 *= s.0;
            jump.1 *= s.1;
        }
        rf
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }
}

/// Best-effort output shape of a layer that failed its check, so later
/// layers can still be validated.
fn recover_shape(layer: &LayerSpec, input: Shape) -> Option<Shape> {
    match layer {
        LayerSpec::Conv { out_channels, .. } => Some(Shape { c: *out_channels, ..input }),
        LayerSpec::Composite { composite, .. } => Some(Shape {
            c: composite.out_channels(),
            ..input
        }),
        LayerSpec::Dense { outputs, .. } => Some(Shape::new(input.n, *outputs, 1, 1)),
        _ => None,
    }
}
