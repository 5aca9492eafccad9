//! Flat parameter vectors and their layouts.

use std::sync::Arc;

use super::{LayerDesc, ModelError};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    ConvWeight,
    ConvBias,
    BnScale,
    BnShift,
    FcWeight,
    FcBias,
}

/// One named tensor inside the flat buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamEntry {
    pub name: String,
    pub role: ParamRole,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ordered (layer, role, shape) descriptors; the unflattening recipe.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    entries: Vec<ParamEntry>,
    total: usize,
}

impl ParamLayout {
    pub fn from_layers(layers: &[LayerDesc]) -> Self {
        let mut entries = Vec::new();
        let mut offset = 0usize;
        let mut conv_idx = 0usize;
        let mut bn_idx = 0usize;
        let mut fc_idx = 0usize;
        let mut push = |name: String, role: ParamRole, shape: Vec<usize>, offset: &mut usize| {
            let entry = ParamEntry {
                name,
                role,
                shape,
                offset: *offset,
            };
            *offset += entry.len();
            entries.push(entry);
        };
        for layer in layers {
            match *layer {
                LayerDesc::Conv3x3 { cin, cout } => {
                    conv_idx += 1;
                    push(
                        format!("conv{conv_idx}.weight"),
                        ParamRole::ConvWeight,
                        vec![cout, cin, 3, 3],
                        &mut offset,
                    );
                    push(
                        format!("conv{conv_idx}.bias"),
                        ParamRole::ConvBias,
                        vec![cout],
                        &mut offset,
                    );
                }
                LayerDesc::BatchNorm { channels } => {
                    bn_idx += 1;
                    push(
                        format!("bn{bn_idx}.scale"),
                        ParamRole::BnScale,
                        vec![channels],
                        &mut offset,
                    );
                    push(
                        format!("bn{bn_idx}.shift"),
                        ParamRole::BnShift,
                        vec![channels],
                        &mut offset,
                    );
                }
                LayerDesc::Fc { cin, cout, bias } => {
                    fc_idx += 1;
                    push(
                        format!("fc{fc_idx}.weight"),
                        ParamRole::FcWeight,
                        vec![cin, cout],
                        &mut offset,
                    );
                    if bias {
                        push(
                            format!("fc{fc_idx}.bias"),
                            ParamRole::FcBias,
                            vec![cout],
                            &mut offset,
                        );
                    }
                }
                LayerDesc::Relu | LayerDesc::MaxPool | LayerDesc::Flatten => {}
            }
        }
        Self {
            entries,
            total: offset,
        }
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn total_len(&self) -> usize {
        self.total
    }

    pub fn entry_named(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

/// Flat, deterministically ordered view of all model weights.
///
/// Two vectors built from the same [`super::ModelSpec`] are element-aligned,
/// which is what makes the weight-space blends and updates plain
/// coordinatewise arithmetic.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector<S> {
    layout: Arc<ParamLayout>,
    values: Vec<S>,
}

impl<S: Scalar> ParameterVector<S> {
    pub fn new(layout: ParamLayout, values: Vec<S>) -> Result<Self, ModelError> {
        if layout.total_len() != values.len() {
            return Err(ModelError::Misaligned {
                expected: layout.total_len(),
                got: values.len(),
            });
        }
        Ok(Self {
            layout: Arc::new(layout),
            values,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layout: Arc::clone(&self.layout),
            values: vec![S::zero(); self.values.len()],
        }
    }

    /// Same layout, new buffer. Errors if the buffer length disagrees.
    pub fn with_values(&self, values: Vec<S>) -> Result<Self, ModelError> {
        if values.len() != self.values.len() {
            return Err(ModelError::Misaligned {
                expected: self.values.len(),
                got: values.len(),
            });
        }
        Ok(Self {
            layout: Arc::clone(&self.layout),
            values,
        })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [S] {
        &mut self.values
    }

    pub fn slice(&self, entry: &ParamEntry) -> &[S] {
        &self.values[entry.offset..entry.offset + entry.len()]
    }

    pub fn aligned_with(&self, other: &Self) -> bool {
        self.layout == other.layout
    }

    /// Euclidean distance to an aligned vector.
    pub fn l2_distance(&self, other: &Self) -> f64 {
        debug_assert!(self.aligned_with(other));
        let mut acc = 0.0f64;
        for (&a, &b) in self.values.iter().zip(other.values()) {
            let d = a.as_f64() - b.as_f64();
            acc += d * d;
        }
        acc.sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;

    #[test]
    fn flatten_unflatten_round_trip_is_exact() {
        let spec = ModelSpec::mnist_cnn(10);
        let layout = spec.layout();
        let values: Vec<f64> = (0..layout.total_len()).map(|i| i as f64 * 0.25).collect();
        let pv = ParameterVector::new(layout, values.clone()).unwrap();
        // reassemble from per-entry slices
        let mut rebuilt = vec![0.0f64; values.len()];
        for entry in pv.layout().entries() {
            rebuilt[entry.offset..entry.offset + entry.len()].copy_from_slice(pv.slice(entry));
        }
        assert_eq!(rebuilt, values);
    }

    #[test]
    fn layout_orders_follow_declaration() {
        let spec = ModelSpec::mnist_cnn(10);
        let layout = spec.layout();
        let names: Vec<&str> = layout.entries().iter().map(|e| e.name.as_str()).collect();
        assert_eq!(
            names,
            vec![
                "conv1.weight",
                "conv1.bias",
                "bn1.scale",
                "bn1.shift",
                "conv2.weight",
                "conv2.bias",
                "bn2.scale",
                "bn2.shift",
                "fc1.weight",
                "fc1.bias",
                "fc2.weight",
                "fc2.bias"
            ]
        );
    }

    #[test]
    fn misaligned_buffer_rejected() {
        let spec = ModelSpec::mlp((1, 2, 2), vec![], 2);
        let layout = spec.layout();
        assert!(ParameterVector::<f64>::new(layout, vec![0.0; 3]).is_err());
    }
}
