use std::fmt::{self, Write as _};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Conv2d {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Linear {
        out_features: usize,
    },
    Relu,
    MaxPool2d {
        kernel: usize,
        stride: usize,
    },
    /// Inverted dropout; `ratio` is the probability of zeroing a unit.
    Dropout {
        ratio: f64,
    },
    Flatten,
    GlobalMeanPool,
}

impl LayerSpec {
    pub fn is_parametric(&self) -> bool {
        matches!(self, LayerSpec::Conv2d { .. } | LayerSpec::Linear { .. })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Linear { .. } => "linear",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool2d { .. } => "max_pool2d",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Flatten => "flatten",
            LayerSpec::GlobalMeanPool => "global_mean_pool",
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LayerSpec::Conv2d {
                out_channels,
                kernel,
                stride,
                padding,
            } => write!(f, "conv2d {out_channels} {kernel} {stride} {padding}"),
            LayerSpec::Linear { out_features } => write!(f, "linear {out_features}"),
            LayerSpec::MaxPool2d { kernel, stride } => write!(f, "max_pool2d {kernel} {stride}"),
            LayerSpec::Dropout { ratio } => write!(f, "dropout {ratio}"),
            _ => f.write_str(self.kind()),
        }
    }
}

/// Per-sample activation shape: `[C, H, W]` for feature maps, `[F]` once
/// flattened.
pub type ActShape = Vec<usize>;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    /// `(channels, height, width)` of one input image.
    pub input: (usize, usize, usize),
    pub num_classes: usize,
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    /// Three conv3x3/relu/maxpool blocks (16, 32, 64 channels), then
    /// linear(128), relu, dropout(`dropout_ratio`), linear(`num_classes`),
    /// on 3x32x32 inputs.
    pub fn compact_cnn(num_classes: usize, dropout_ratio: f64) -> Self {
        let mut layers = Vec::new();
        for ch in [16, 32, 64] {
            layers.push(LayerSpec::Conv2d {
                out_channels: ch,
                kernel: 3,
                stride: 1,
                padding: 1,
            });
            layers.push(LayerSpec::Relu);
            layers.push(LayerSpec::MaxPool2d { kernel: 2, stride: 2 });
        }
        layers.extend([
            LayerSpec::Flatten,
            LayerSpec::Linear { out_features: 128 },
            LayerSpec::Relu,
            LayerSpec::Dropout {
                ratio: dropout_ratio,
            },
            LayerSpec::Linear {
                out_features: num_classes,
            },
        ]);
        ModelSpec {
            input: (3, 32, 32),
            num_classes,
            layers,
        }
    }

    /// Output shape of every layer, or the first layer that does not fit.
    pub fn layer_shapes(&self) -> Result<Vec<ActShape>> {
        let (c, h, w) = self.input;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::ModelSpec {
                layer: 0,
                reason: format!("empty input shape {:?}", self.input),
            });
        }
        if self.num_classes < 2 {
            return Err(Error::ModelSpec {
                layer: self.layers.len(),
                reason: format!("need at least 2 classes, got {}", self.num_classes),
            });
        }
        let mut shape = vec![c, h, w];
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let fail = |reason: String| Error::ModelSpec { layer: i, reason };
            shape = match *layer {
                LayerSpec::Conv2d {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    if shape.len() != 3 {
                        return Err(fail(format!("conv2d needs a feature map, got {:?}", shape)));
                    }
                    if out_channels == 0 || kernel == 0 || stride == 0 {
                        return Err(fail("conv2d sizes must be positive".into()));
                    }
                    if shape[1] + 2 * padding < kernel || shape[2] + 2 * padding < kernel {
                        return Err(fail(format!("kernel {kernel} exceeds input {:?}", shape)));
                    }
                    vec![
                        out_channels,
                        (shape[1] + 2 * padding - kernel) / stride + 1,
                        (shape[2] + 2 * padding - kernel) / stride + 1,
                    ]
                }
                LayerSpec::MaxPool2d { kernel, stride } => {
                    if shape.len() != 3 || kernel == 0 || stride == 0 || shape[1] < kernel || shape[2] < kernel {
                        return Err(fail(format!("max_pool2d {kernel}/{stride} on {:?}", shape)));
                    }
                    vec![
                        shape[0],
                        (shape[1] - kernel) / stride + 1,
                        (shape[2] - kernel) / stride + 1,
                    ]
                }
                LayerSpec::GlobalMeanPool => {
                    if shape.len() != 3 || shape[1] != shape[2] {
                        return Err(fail(format!(
                            "global_mean_pool needs a square feature map, got {:?}",
                            shape
                        )));
                    }
                    vec![shape[0]]
                }
                LayerSpec::Flatten => vec![shape.iter().product()],
                LayerSpec::Linear { out_features } => {
                    if shape.len() != 1 {
                        return Err(fail(format!("linear needs a flat input, got {:?}", shape)));
                    }
                    if out_features == 0 {
                        return Err(fail("linear needs out_features > 0".into()));
                    }
                    vec![out_features]
                }
                LayerSpec::Dropout { ratio } => {
                    if !(0.0..1.0).contains(&ratio) {
                        return Err(fail(format!("dropout ratio {ratio} not in [0, 1)")));
                    }
                    shape
                }
                LayerSpec::Relu => shape,
            };
            out.push(shape.clone());
        }
        if shape != [self.num_classes] {
            return Err(Error::ModelSpec {
                layer: self.layers.len().saturating_sub(1),
                reason: format!(
                    "final output {:?} is not {} logits",
                    shape, self.num_classes
                ),
            });
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        self.layer_shapes().map(|_| ())
    }

    /// `(weight shape, bias shape)` for each layer, `None` for layers
    /// without parameters. Linear weights are stored `[in, out]`.
    pub fn param_shapes(&self) -> Result<Vec<Option<(Vec<usize>, Vec<usize>)>>> {
        let shapes = self.layer_shapes()?;
        let (c, h, w) = self.input;
        let mut prev = vec![c, h, w];
        let mut out = Vec::with_capacity(self.layers.len());
        for (layer, shape) in self.layers.iter().zip(shapes) {
            out.push(match *layer {
                LayerSpec::Conv2d {
                    out_channels,
                    kernel,
                    ..
                } => Some((vec![out_channels, prev[0], kernel, kernel], vec![out_channels])),
                LayerSpec::Linear { out_features } => {
                    Some((vec![prev[0], out_features], vec![out_features]))
                }
                _ => None,
            });
            prev = shape;
        }
        Ok(out)
    }

    /// Index of the last convolution layer.
    pub fn last_conv(&self) -> Option<usize> {
        self.layers
            .iter()
            .rposition(|l| matches!(l, LayerSpec::Conv2d { .. }))
    }

    pub fn to_text(&self) -> String {
        let (c, h, w) = self.input;
        let mut s = format!("input {c} {h} {w}\nclasses {}\n", self.num_classes);
        for l in &self.layers {
            writeln!(s, "{l}").unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            what: "model spec",
            reason,
        };
        let mut input = None;
        let mut classes = None;
        let mut layers = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut it = line.split_whitespace();
            let kind = it.next().unwrap();
            let args: Vec<&str> = it.collect();
            let nums = |n: usize| -> Result<Vec<usize>> {
                if args.len() != n {
                    return Err(bad(format!("line {}: `{kind}` takes {n} values", ln + 1)));
                }
                args.iter()
                    .map(|a| a.parse().map_err(|_| bad(format!("line {}: bad integer `{a}`", ln + 1))))
                    .collect()
            };
            match kind {
                "input" => {
                    let v = nums(3)?;
                    input = Some((v[0], v[1], v[2]));
                }
                "classes" => classes = Some(nums(1)?[0]),
                "conv2d" => {
                    let v = nums(4)?;
                    layers.push(LayerSpec::Conv2d {
                        out_channels: v[0],
                        kernel: v[1],
                        stride: v[2],
                        padding: v[3],
                    });
                }
                "linear" => layers.push(LayerSpec::Linear {
                    out_features: nums(1)?[0],
                }),
                "max_pool2d" => {
                    let v = nums(2)?;
                    layers.push(LayerSpec::MaxPool2d {
                        kernel: v[0],
                        stride: v[1],
                    });
                }
                "dropout" => {
                    let ratio = args
                        .first()
                        .filter(|_| args.len() == 1)
                        .and_then(|a| a.parse().ok())
                        .ok_or_else(|| bad(format!("line {}: dropout takes one ratio", ln + 1)))?;
                    layers.push(LayerSpec::Dropout { ratio });
                }
                "relu" | "flatten" | "global_mean_pool" => {
                    nums(0)?;
                    layers.push(match kind {
                        "relu" => LayerSpec::Relu,
                        "flatten" => LayerSpec::Flatten,
                        _ => LayerSpec::GlobalMeanPool,
                    });
                }
                other => return Err(bad(format!("line {}: unknown layer kind `{other}`", ln + 1))),
            }
        }
        let spec = ModelSpec {
            input: input.ok_or_else(|| bad("missing `input` line".into()))?,
            num_classes: classes.ok_or_else(|| bad("missing `classes` line".into()))?,
            layers,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Same architecture with every dropout layer set to `ratio`.
    pub fn with_dropout(&self, ratio: f64) -> Self {
        let mut s = self.clone();
        for l in &mut s.layers {
            if let LayerSpec::Dropout { ratio: r } = l {
                *r = ratio;
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compact_cnn_shapes() {
        let spec = ModelSpec::compact_cnn(2, 0.2);
        let shapes = spec.layer_shapes().unwrap();
        assert_eq!(shapes[2], vec![16, 16, 16]);
        assert_eq!(shapes[8], vec![64, 4, 4]);
        assert_eq!(shapes.last().unwrap(), &vec![2]);
        assert_eq!(spec.last_conv(), Some(6));
    }

    #[test]
    fn text_round_trip() {
        let spec = ModelSpec::compact_cnn(6, 0.3);
        assert_eq!(ModelSpec::from_text(&spec.to_text()).unwrap(), spec);
    }

    #[test]
    fn inconsistent_spec_names_the_layer() {
        let mut spec = ModelSpec::compact_cnn(2, 0.2);
        spec.layers.remove(9); // flatten
        match spec.validate() {
            Err(Error::ModelSpec { layer, .. }) => assert_eq!(layer, 9),
            other => panic!("{other:?}"),
        }
        let mut spec = ModelSpec::compact_cnn(2, 0.2);
        spec.num_classes = 3;
        assert!(spec.validate().is_err());
        let spec = ModelSpec::compact_cnn(2, 1.0);
        assert!(matches!(spec.validate(), Err(Error::ModelSpec { layer: 12, .. })));
    }

    #[test]
    fn unknown_kind_is_rejected() {
        assert!(ModelSpec::from_text("input 1 4 4\nclasses 2\nbatchnorm\n").is_err());
    }
}
