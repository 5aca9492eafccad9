//! Model architectures as parameterized forward functions.
//!
//! Weights live in a [`ParameterVector`]: a flat, deterministically ordered
//! buffer whose layout follows the layer declaration order. All weight-space
//! arithmetic (SGD, noise injection, anchoring) happens on these flat
//! buffers; the forward pass unflattens them into graph leaves on the fly.

mod checkpoint;
mod forward;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use forward::{forward_eval, forward_graph, ForwardPass};
pub use params::{ParamEntry, ParamLayout, ParamRole, ParameterVector};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::Xoshiro256StarStar;
use crate::tensor::{BnLayerStats, Scalar};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unknown architecture `{0}`")]
    UnknownArchitecture(String),
    #[error("parameter buffer has {got} values, layout expects {expected}")]
    Misaligned { expected: usize, got: usize },
    #[error("batch images have shape {got:?}, model expects {expected:?}")]
    InputShape {
        expected: (usize, usize, usize),
        got: Vec<usize>,
    },
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    MnistCnn,
    Mlp,
}

impl Architecture {
    pub fn parse(s: &str) -> Result<Self, ModelError> {
        match s {
            "mnist_cnn" => Ok(Architecture::MnistCnn),
            "mlp" => Ok(Architecture::Mlp),
            other => Err(ModelError::UnknownArchitecture(other.to_string())),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Architecture::MnistCnn => "mnist_cnn",
            Architecture::Mlp => "mlp",
        }
    }
}

/// Layer descriptors, derived from the spec in declaration order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerDesc {
    Conv3x3 { cin: usize, cout: usize },
    BatchNorm { channels: usize },
    Relu,
    MaxPool,
    Flatten,
    Fc { cin: usize, cout: usize, bias: bool },
}

/// Architecture id plus the dimensions needed to lay out parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Architecture,
    pub class_count: usize,
    /// Input image shape as (channels, height, width).
    pub input: (usize, usize, usize),
    /// Hidden layer widths; used by the MLP only.
    #[serde(default)]
    pub hidden: Vec<usize>,
    /// Whether MLP linear layers carry biases. The CNN always does.
    #[serde(default = "default_true")]
    pub mlp_bias: bool,
}

fn default_true() -> bool {
    true
}

impl ModelSpec {
    /// The 28x28 grayscale CNN: two 3x3 conv blocks (32 and 64 channels,
    /// each conv -> batchnorm -> relu -> 2x2 maxpool) followed by a
    /// 128-unit fully-connected layer and the class head.
    pub fn mnist_cnn(class_count: usize) -> Self {
        Self {
            arch: Architecture::MnistCnn,
            class_count,
            input: (1, 28, 28),
            hidden: Vec::new(),
            mlp_bias: true,
        }
    }

    /// A plain MLP over flattened inputs; `hidden` may be empty for a
    /// single linear (softmax-regression) model.
    pub fn mlp(input: (usize, usize, usize), hidden: Vec<usize>, class_count: usize) -> Self {
        Self {
            arch: Architecture::Mlp,
            class_count,
            input,
            hidden,
            mlp_bias: true,
        }
    }

    pub fn without_bias(mut self) -> Self {
        self.mlp_bias = false;
        self
    }

    pub fn layers(&self) -> Vec<LayerDesc> {
        let (c, h, w) = self.input;
        match self.arch {
            Architecture::MnistCnn => {
                let flat = (h / 4) * (w / 4) * 64;
                vec![
                    LayerDesc::Conv3x3 { cin: c, cout: 32 },
                    LayerDesc::BatchNorm { channels: 32 },
                    LayerDesc::Relu,
                    LayerDesc::MaxPool,
                    LayerDesc::Conv3x3 { cin: 32, cout: 64 },
                    LayerDesc::BatchNorm { channels: 64 },
                    LayerDesc::Relu,
                    LayerDesc::MaxPool,
                    LayerDesc::Flatten,
                    LayerDesc::Fc {
                        cin: flat,
                        cout: 128,
                        bias: true,
                    },
                    LayerDesc::Relu,
                    LayerDesc::Fc {
                        cin: 128,
                        cout: self.class_count,
                        bias: true,
                    },
                ]
            }
            Architecture::Mlp => {
                let mut layers = vec![LayerDesc::Flatten];
                let mut cin = c * h * w;
                for &width in &self.hidden {
                    layers.push(LayerDesc::Fc {
                        cin,
                        cout: width,
                        bias: self.mlp_bias,
                    });
                    layers.push(LayerDesc::Relu);
                    cin = width;
                }
                layers.push(LayerDesc::Fc {
                    cin,
                    cout: self.class_count,
                    bias: self.mlp_bias,
                });
                layers
            }
        }
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout::from_layers(&self.layers())
    }

    /// Channel widths of the batch-norm layers, in order.
    pub fn bn_channels(&self) -> Vec<usize> {
        self.layers()
            .iter()
            .filter_map(|l| match l {
                LayerDesc::BatchNorm { channels } => Some(*channels),
                _ => None,
            })
            .collect()
    }
}

/// Running statistics for every batch-norm layer of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct BnRunningStats<S> {
    pub layers: Vec<BnLayerStats<S>>,
}

impl<S: Scalar> BnRunningStats<S> {
    pub fn init(spec: &ModelSpec) -> Self {
        Self {
            layers: spec.bn_channels().into_iter().map(BnLayerStats::init).collect(),
        }
    }
}

/// Trainable-coordinate selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubsetSelector {
    All,
    BnAffineOnly,
}

/// Boolean mask over the flat parameter vector marking trainable
/// coordinates. `BnAffineOnly` marks exactly the batch-norm scale/shift
/// coordinates (the Tent convention); a model without batch-norm yields an
/// all-false mask.
pub fn param_subset_mask(spec: &ModelSpec, selector: SubsetSelector) -> Vec<bool> {
    let layout = spec.layout();
    let mut mask = vec![false; layout.total_len()];
    for entry in layout.entries() {
        let on = match selector {
            SubsetSelector::All => true,
            SubsetSelector::BnAffineOnly => {
                matches!(entry.role, ParamRole::BnScale | ParamRole::BnShift)
            }
        };
        if on {
            mask[entry.offset..entry.offset + entry.len()].fill(true);
        }
    }
    mask
}

/// He-initialized weights: conv/fc weights ~ N(0, 2/fan_in), zero biases,
/// batch-norm scale 1 and shift 0. Draws happen in layout order so equal
/// seeds build identical models.
pub fn build_model<S: Scalar>(spec: &ModelSpec, rng: &mut Xoshiro256StarStar) -> ParameterVector<S> {
    let layout = spec.layout();
    let mut values = vec![S::zero(); layout.total_len()];
    for entry in layout.entries() {
        let slot = &mut values[entry.offset..entry.offset + entry.len()];
        match entry.role {
            ParamRole::ConvWeight | ParamRole::FcWeight => {
                let fan_in: usize = entry.shape[1..].iter().product();
                let std = (2.0 / fan_in as f64).sqrt();
                let mut buf = vec![0.0f64; slot.len()];
                rng.fill_gaussian(&mut buf, std);
                for (s, v) in slot.iter_mut().zip(buf) {
                    *s = S::from_f64(v);
                }
            }
            ParamRole::ConvBias | ParamRole::FcBias | ParamRole::BnShift => {
                slot.fill(S::zero());
            }
            ParamRole::BnScale => slot.fill(S::one()),
        }
    }
    ParameterVector::new(layout, values).expect("layout-sized buffer")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mnist_cnn_parameter_count_matches_layer_arithmetic() {
        // Summing the layout shapes by hand:
        // conv1 3*3*1*32 + 32, bn1 2*32, conv2 3*3*32*64 + 64, bn2 2*64,
        // fc1 7*7*64*128 + 128, fc2 128*10 + 10.
        let expected = (3 * 3 * 32 + 32)
            + 2 * 32
            + (3 * 3 * 32 * 64 + 64)
            + 2 * 64
            + (7 * 7 * 64 * 128 + 128)
            + (128 * 10 + 10);
        let spec = ModelSpec::mnist_cnn(10);
        assert_eq!(spec.layout().total_len(), expected);
        assert_eq!(expected, 421_834);
    }

    #[test]
    fn bn_shift_zero_and_scale_one_at_init() {
        let spec = ModelSpec::mnist_cnn(10);
        let mut rng = Xoshiro256StarStar::seeded(1);
        let params: ParameterVector<f64> = build_model(&spec, &mut rng);
        for entry in params.layout().entries() {
            let vals = params.slice(entry);
            match entry.role {
                ParamRole::BnShift | ParamRole::ConvBias | ParamRole::FcBias => {
                    assert!(vals.iter().all(|&v| v == 0.0), "{} not zero", entry.name);
                }
                ParamRole::BnScale => {
                    assert!(vals.iter().all(|&v| v == 1.0), "{} not one", entry.name);
                }
                _ => {}
            }
        }
    }

    #[test]
    fn same_seed_builds_identical_models() {
        let spec = ModelSpec::mnist_cnn(10);
        let a: ParameterVector<f64> = build_model(&spec, &mut Xoshiro256StarStar::seeded(7));
        let b: ParameterVector<f64> = build_model(&spec, &mut Xoshiro256StarStar::seeded(7));
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn subset_mask_all_true_and_bn_only_count() {
        let spec = ModelSpec::mnist_cnn(10);
        let all = param_subset_mask(&spec, SubsetSelector::All);
        assert!(all.iter().all(|&b| b));
        let bn = param_subset_mask(&spec, SubsetSelector::BnAffineOnly);
        let on = bn.iter().filter(|&&b| b).count();
        assert_eq!(on, 2 * 32 + 2 * 64);
    }

    #[test]
    fn mlp_without_batchnorm_has_empty_bn_mask() {
        let spec = ModelSpec::mlp((1, 4, 4), vec![8], 3);
        let mask = param_subset_mask(&spec, SubsetSelector::BnAffineOnly);
        assert!(mask.iter().all(|&b| !b));
    }

    #[test]
    fn architecture_parse_rejects_unknown() {
        assert!(Architecture::parse("mnist_cnn").is_ok());
        assert!(matches!(
            Architecture::parse("resnet18"),
            Err(ModelError::UnknownArchitecture(_))
        ));
    }
}
