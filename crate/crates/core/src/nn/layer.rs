use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LayerKind {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool {
        window: usize,
    },
    GlobalAvgPool,
    Dense {
        in_features: usize,
        out_features: usize,
    },
    /// Marks the end of the logit stack. `forward` always returns
    /// pre-sigmoid logits; probabilities come from `Model::predict_proba`.
    SigmoidHead,
}

/// One layer of a model plus whether its output is the Grad-CAM feature tap.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    #[serde(flatten)]
    pub kind: LayerKind,
    #[serde(default)]
    pub feature_tap: bool,
}

impl LayerSpec {
    pub fn new(kind: LayerKind) -> Self {
        Self {
            kind,
            feature_tap: false,
        }
    }

    pub fn tapped(kind: LayerKind) -> Self {
        Self {
            kind,
            feature_tap: true,
        }
    }

    pub fn conv(in_channels: usize, out_channels: usize) -> Self {
        Self::new(LayerKind::Conv {
            in_channels,
            out_channels,
            kernel: 3,
            stride: 1,
            padding: 1,
        })
    }

    pub fn param_count(&self) -> usize {
        match self.kind {
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => out_channels * in_channels * kernel * kernel + out_channels,
            LayerKind::Dense {
                in_features,
                out_features,
            } => out_features * in_features + out_features,
            _ => 0,
        }
    }
}

/// Activation shape between layers (batch axis excluded).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Activation {
    Spatial { channels: usize, height: usize, width: usize },
    Flat(usize),
}

/// Checks that `layers` compose for a `3×size×size` input and yields the
/// activation shape after every layer.
pub(crate) fn infer_shapes(layers: &[LayerSpec], size: usize, num_classes: usize) -> Result<Vec<Activation>> {
    if size == 0 {
        return Err(Error::shape("input size must be positive"));
    }
    let mut act = Activation::Spatial {
        channels: 3,
        height: size,
        width: size,
    };
    let mut shapes = Vec::with_capacity(layers.len());
    let mut taps = 0;
    for (i, layer) in layers.iter().enumerate() {
        let err = |msg: String| Error::shape(format!("layer {i} ({:?}): {msg}", layer.kind));
        act = match (layer.kind, act) {
            (
                LayerKind::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                },
                Activation::Spatial {
                    channels,
                    height,
                    width,
                },
            ) => {
                if in_channels != channels {
                    return Err(err(format!("expects {in_channels} input channels, gets {channels}")));
                }
                if out_channels == 0 || kernel == 0 || stride == 0 {
                    return Err(err("channels, kernel and stride must be positive".into()));
                }
                if kernel > height + 2 * padding || kernel > width + 2 * padding {
                    return Err(err(format!("kernel does not fit {height}×{width} with padding {padding}")));
                }
                Activation::Spatial {
                    channels: out_channels,
                    height: (height + 2 * padding - kernel) / stride + 1,
                    width: (width + 2 * padding - kernel) / stride + 1,
                }
            }
            (LayerKind::Relu, a) => a,
            (
                LayerKind::MaxPool { window },
                Activation::Spatial {
                    channels,
                    height,
                    width,
                },
            ) => {
                if window == 0 || height % window != 0 || width % window != 0 {
                    return Err(err(format!("window does not divide {height}×{width}")));
                }
                Activation::Spatial {
                    channels,
                    height: height / window,
                    width: width / window,
                }
            }
            (LayerKind::GlobalAvgPool, Activation::Spatial { channels, .. }) => Activation::Flat(channels),
            (
                LayerKind::Dense {
                    in_features,
                    out_features,
                },
                Activation::Flat(n),
            ) => {
                if in_features != n {
                    return Err(err(format!("expects {in_features} features, gets {n}")));
                }
                if out_features == 0 {
                    return Err(err("output features must be positive".into()));
                }
                Activation::Flat(out_features)
            }
            (LayerKind::SigmoidHead, Activation::Flat(n)) => {
                if i + 1 != layers.len() {
                    return Err(err("sigmoid head must be the last layer".into()));
                }
                Activation::Flat(n)
            }
            (_, a) => return Err(err(format!("cannot follow activation {a:?}"))),
        };
        if layer.feature_tap {
            taps += 1;
            if !matches!(act, Activation::Spatial { .. }) {
                return Err(err("feature tap must produce a spatial map".into()));
            }
        }
        shapes.push(act);
    }
    if taps != 1 {
        return Err(Error::shape(format!("model needs exactly one feature tap, found {taps}")));
    }
    match act {
        Activation::Flat(n) if n == num_classes => Ok(shapes),
        other => Err(Error::shape(format!(
            "model output {other:?} does not match {num_classes} classes"
        ))),
    }
}

/// The two built-in architectures: a compact student and a larger teacher.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelPreset {
    #[serde(rename = "tiny-t")]
    TinyTeacher,
    #[serde(rename = "tiny-s")]
    TinyStudent,
}

impl ModelPreset {
    pub fn name(self) -> &'static str {
        match self {
            ModelPreset::TinyTeacher => "tiny-t",
            ModelPreset::TinyStudent => "tiny-s",
        }
    }

    pub fn layers(self, num_classes: usize) -> Vec<LayerSpec> {
        use LayerKind::*;
        let relu = LayerSpec::new(Relu);
        let pool = LayerSpec::new(MaxPool { window: 2 });
        let gap = LayerSpec::new(GlobalAvgPool);
        let head = |n| {
            LayerSpec::new(Dense {
                in_features: n,
                out_features: num_classes,
            })
        };
        match self {
            ModelPreset::TinyStudent => vec![
                LayerSpec::conv(3, 8),
                relu,
                pool,
                LayerSpec::conv(8, 16),
                relu,
                pool,
                LayerSpec::conv(16, 32),
                LayerSpec::tapped(Relu),
                gap,
                head(32),
            ],
            ModelPreset::TinyTeacher => vec![
                LayerSpec::conv(3, 16),
                relu,
                pool,
                LayerSpec::conv(16, 32),
                relu,
                pool,
                LayerSpec::conv(32, 64),
                relu,
                LayerSpec::conv(64, 64),
                LayerSpec::tapped(Relu),
                gap,
                head(64),
            ],
        }
    }
}

impl fmt::Display for ModelPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny-t" => Ok(ModelPreset::TinyTeacher),
            "tiny-s" => Ok(ModelPreset::TinyStudent),
            other => Err(Error::config(format!("unknown model preset {other:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_compose() {
        for preset in [ModelPreset::TinyStudent, ModelPreset::TinyTeacher] {
            for size in [64, 224] {
                let shapes = infer_shapes(&preset.layers(4), size, 4).unwrap();
                assert_eq!(*shapes.last().unwrap(), Activation::Flat(4));
            }
        }
    }

    #[test]
    fn student_tap_is_32x16x16_at_64() {
        let layers = ModelPreset::TinyStudent.layers(4);
        let shapes = infer_shapes(&layers, 64, 4).unwrap();
        let tap = layers.iter().position(|l| l.feature_tap).unwrap();
        assert_eq!(
            shapes[tap],
            Activation::Spatial {
                channels: 32,
                height: 16,
                width: 16
            }
        );
    }

    #[test]
    fn tap_count_is_enforced() {
        let mut layers = ModelPreset::TinyStudent.layers(2);
        layers[1].feature_tap = true;
        assert!(infer_shapes(&layers, 64, 2).is_err());
        let layers: Vec<_> = ModelPreset::TinyStudent
            .layers(2)
            .into_iter()
            .map(|mut l| {
                l.feature_tap = false;
                l
            })
            .collect();
        assert!(infer_shapes(&layers, 64, 2).is_err());
    }

    #[test]
    fn wrong_class_count_is_rejected() {
        assert!(infer_shapes(&ModelPreset::TinyStudent.layers(3), 64, 4).is_err());
    }

    #[test]
    fn preset_names_round_trip() {
        for p in [ModelPreset::TinyStudent, ModelPreset::TinyTeacher] {
            assert_eq!(p.name().parse::<ModelPreset>().unwrap(), p);
        }
        assert!("resnet".parse::<ModelPreset>().is_err());
    }
}
