//! Forward evaluation: unflattens parameters into graph leaves and walks
//! the layer list.

use super::{BnRunningStats, LayerDesc, ModelError, ModelSpec, ParameterVector};
use crate::tensor::{BnMode, Graph, NodeId, Scalar, Tensor};

/// A completed forward pass with the handles needed for backprop.
pub struct ForwardPass<S> {
    pub graph: Graph<S>,
    pub logits: NodeId,
    /// One node per layout entry, in layout order.
    pub param_nodes: Vec<NodeId>,
}

impl<S: Scalar> ForwardPass<S> {
    pub fn logits_tensor(&self) -> &Tensor<S> {
        self.graph.value(self.logits)
    }

    /// Assembles a flat, layout-aligned gradient from a backward pass.
    /// Entries the loss never touched come back as zeros.
    pub fn flat_grad(
        &self,
        grads: &crate::tensor::Gradients<S>,
        params: &ParameterVector<S>,
    ) -> ParameterVector<S> {
        let mut out = params.zeros_like();
        for (entry, node) in params.layout().entries().iter().zip(&self.param_nodes) {
            if let Some(g) = grads.get(*node) {
                out.values_mut()[entry.offset..entry.offset + entry.len()]
                    .copy_from_slice(g.data());
            }
        }
        out
    }
}

/// Runs the model forward, recording gradients when `track_grads` is set.
///
/// `stats` is read in `Eval` mode, updated in `Train` mode and ignored in
/// `Adapt` mode (current-batch statistics, frozen running estimates).
pub fn forward_graph<S: Scalar>(
    spec: &ModelSpec,
    params: &ParameterVector<S>,
    images: &Tensor<S>,
    mode: BnMode,
    stats: &mut BnRunningStats<S>,
    track_grads: bool,
) -> Result<ForwardPass<S>, ModelError> {
    let (c, h, w) = spec.input;
    let ish = images.shape();
    if ish.len() != 4 || ish[1] != c || ish[2] != h || ish[3] != w {
        return Err(ModelError::InputShape {
            expected: spec.input,
            got: ish.to_vec(),
        });
    }
    let n = ish[0];
    if params.len() != spec.layout().total_len() {
        return Err(ModelError::Misaligned {
            expected: spec.layout().total_len(),
            got: params.len(),
        });
    }

    let mut graph = Graph::new();
    let mut param_nodes = Vec::with_capacity(params.layout().entries().len());
    for entry in params.layout().entries() {
        let t = Tensor::from_vec(entry.shape.clone(), params.slice(entry).to_vec())?;
        let t = if track_grads { t.with_grad() } else { t };
        param_nodes.push(graph.leaf(t));
    }

    let mut x = graph.constant(images.clone());
    let mut next_param = 0usize;
    let mut bn_idx = 0usize;
    let take = |count: usize, next: &mut usize| -> Vec<NodeId> {
        let ids = param_nodes[*next..*next + count].to_vec();
        *next += count;
        ids
    };

    for layer in spec.layers() {
        x = match layer {
            LayerDesc::Conv3x3 { cout, .. } => {
                let ids = take(2, &mut next_param);
                let conv = graph.conv2d(x, ids[0])?;
                // bias broadcast as [C,1,1] over [N,C,H,W]
                let bias = graph.reshape(ids[1], vec![cout, 1, 1])?;
                graph.add(conv, bias)?
            }
            LayerDesc::BatchNorm { .. } => {
                let ids = take(2, &mut next_param);
                let out = graph.batchnorm2d(x, ids[0], ids[1], mode, &mut stats.layers[bn_idx])?;
                bn_idx += 1;
                out
            }
            LayerDesc::Relu => graph.relu(x),
            LayerDesc::MaxPool => graph.maxpool2d(x)?,
            LayerDesc::Flatten => {
                let numel = graph.value(x).numel();
                graph.reshape(x, vec![n, numel / n])?
            }
            LayerDesc::Fc { bias, .. } => {
                let ids = take(if bias { 2 } else { 1 }, &mut next_param);
                let mm = graph.matmul(x, ids[0])?;
                if bias {
                    graph.add(mm, ids[1])?
                } else {
                    mm
                }
            }
        };
    }

    Ok(ForwardPass {
        graph,
        logits: x,
        param_nodes,
    })
}

/// Gradient-free forward; returns the pre-softmax logits `[n, classes]`.
pub fn forward_eval<S: Scalar>(
    spec: &ModelSpec,
    params: &ParameterVector<S>,
    images: &Tensor<S>,
    mode: BnMode,
    stats: &mut BnRunningStats<S>,
) -> Result<Tensor<S>, ModelError> {
    let pass = forward_graph(spec, params, images, mode, stats, false)?;
    Ok(pass.graph.value(pass.logits).clone())
}
