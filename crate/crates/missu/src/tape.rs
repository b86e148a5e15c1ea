//! Reverse-mode autodiff over a flat operation tape.
//!
//! Forward values are computed eagerly as nodes are pushed; `backward`
//! replays the tape in reverse and accumulates gradients into every node.
//! Leaves hold parameters or inputs; gradients are read back by node id.

use crate::kernels::conv::{self, ConvCfg};
use crate::kernels::{linalg, loss, norm, resample};
use crate::tensor::Tensor;

pub type NodeId = usize;

#[derive(Debug)]
enum Op {
    Leaf,
    Conv3d(ConvCfg),
    InstanceNorm { eps: f64 },
    LayerNorm { eps: f64 },
    Relu,
    Gelu,
    Add,
    Sub,
    Scale(f64),
    Matmul,
    AddRowBias,
    SoftmaxLast,
    BmmNt,
    BmmNn,
    SplitHeads,
    MergeHeads,
    VolToTokens,
    TokensToVol,
    ConcatC,
    Upsample2x,
    CrossEntropyMean(Vec<u8>),
    AbsChannelSum,
    NormalizeL2 { eps: f64 },
    L2Norm,
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by a backward pass.
pub struct Gradients(Vec<Option<Tensor>>);

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.0.get(id).and_then(|g| g.as_ref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, inputs, value });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, vec![], value)
    }

    pub fn conv3d(&mut self, x: NodeId, w: NodeId, b: NodeId, cfg: ConvCfg) -> NodeId {
        let value = conv::conv3d_forward(self.value(x), self.value(w), self.value(b), &cfg);
        self.push(Op::Conv3d(cfg), vec![x, w, b], value)
    }

    pub fn instance_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let eps = 1e-5;
        let value =
            norm::instance_norm_forward(self.value(x), self.value(gamma), self.value(beta), eps);
        self.push(Op::InstanceNorm { eps }, vec![x, gamma, beta], value)
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let eps = 1e-5;
        let value =
            norm::layer_norm_forward(self.value(x), self.value(gamma), self.value(beta), eps);
        self.push(Op::LayerNorm { eps }, vec![x, gamma, beta], value)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = loss::relu_forward(self.value(x));
        self.push(Op::Relu, vec![x], value)
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let value = loss::gelu_forward(self.value(x));
        self.push(Op::Gelu, vec![x], value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(
            self.value(a).shape(),
            self.value(b).shape(),
            "add shape mismatch"
        );
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        self.push(Op::Add, vec![a, b], value)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(
            self.value(a).shape(),
            self.value(b).shape(),
            "sub shape mismatch"
        );
        let mut value = self.value(a).clone();
        for (v, o) in value.data_mut().iter_mut().zip(self.nodes[b].value.data()) {
            *v -= o;
        }
        self.push(Op::Sub, vec![a, b], value)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let mut value = self.value(x).clone();
        for v in value.data_mut() {
            *v *= c;
        }
        self.push(Op::Scale(c), vec![x], value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = linalg::matmul(self.value(a), self.value(b));
        self.push(Op::Matmul, vec![a, b], value)
    }

    pub fn add_row_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let value = linalg::add_row_bias(self.value(x), self.value(bias));
        self.push(Op::AddRowBias, vec![x, bias], value)
    }

    pub fn softmax_last(&mut self, x: NodeId) -> NodeId {
        let value = linalg::softmax_last(self.value(x));
        self.push(Op::SoftmaxLast, vec![x], value)
    }

    pub fn bmm_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = linalg::bmm_nt(self.value(a), self.value(b));
        self.push(Op::BmmNt, vec![a, b], value)
    }

    pub fn bmm_nn(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = linalg::bmm_nn(self.value(a), self.value(b));
        self.push(Op::BmmNn, vec![a, b], value)
    }

    pub fn split_heads(&mut self, x: NodeId, heads: usize) -> NodeId {
        let value = linalg::split_heads(self.value(x), heads);
        self.push(Op::SplitHeads, vec![x], value)
    }

    pub fn merge_heads(&mut self, x: NodeId) -> NodeId {
        let value = linalg::merge_heads(self.value(x));
        self.push(Op::MergeHeads, vec![x], value)
    }

    pub fn vol_to_tokens(&mut self, x: NodeId) -> NodeId {
        let value = resample::vol_to_tokens(self.value(x));
        self.push(Op::VolToTokens, vec![x], value)
    }

    pub fn tokens_to_vol(&mut self, x: NodeId, spatial: (usize, usize, usize)) -> NodeId {
        let value = resample::tokens_to_vol(self.value(x), spatial);
        self.push(Op::TokensToVol, vec![x], value)
    }

    /// Concatenate two `[C,H,W,D]` tensors along channels.
    pub fn concat_c(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape()[1..], vb.shape()[1..], "concat spatial mismatch");
        let mut shape = va.shape().to_vec();
        shape[0] += vb.shape()[0];
        let mut data = Vec::with_capacity(va.len() + vb.len());
        data.extend_from_slice(va.data());
        data.extend_from_slice(vb.data());
        self.push(Op::ConcatC, vec![a, b], Tensor::from_vec(&shape, data))
    }

    pub fn upsample2x(&mut self, x: NodeId) -> NodeId {
        let value = resample::upsample2x_forward(self.value(x));
        self.push(Op::Upsample2x, vec![x], value)
    }

    /// Mean voxel-wise cross-entropy against `labels` (validated by caller).
    pub fn cross_entropy_mean(&mut self, logits: NodeId, labels: Vec<u8>) -> NodeId {
        let value = Tensor::scalar(loss::cross_entropy_mean_forward(self.value(logits), &labels));
        self.push(Op::CrossEntropyMean(labels), vec![logits], value)
    }

    pub fn abs_channel_sum(&mut self, x: NodeId) -> NodeId {
        let value = loss::abs_channel_sum_forward(self.value(x));
        self.push(Op::AbsChannelSum, vec![x], value)
    }

    pub fn normalize_l2(&mut self, x: NodeId, eps: f64) -> NodeId {
        let value = loss::normalize_l2_forward(self.value(x), eps);
        self.push(Op::NormalizeL2 { eps }, vec![x], value)
    }

    pub fn l2_norm(&mut self, x: NodeId) -> NodeId {
        let value = Tensor::scalar(loss::l2_norm_forward(self.value(x)));
        self.push(Op::L2Norm, vec![x], value)
    }

    /// Backward from a scalar node with seed gradient 1.
    pub fn backward(&self, root: NodeId) -> Gradients {
        assert!(
            self.value(root).shape().is_empty(),
            "backward root must be a scalar"
        );
        self.backward_seeded(root, Tensor::scalar(1.0))
    }

    /// Backward from any node with an explicit seed gradient.
    pub fn backward_seeded(&self, root: NodeId, seed: Tensor) -> Gradients {
        assert_eq!(self.value(root).shape(), seed.shape(), "seed shape mismatch");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root] = Some(seed);
        for id in (0..=root).rev() {
            // Take the gradient while computing input contributions, then
            // restore it so callers can read every node's gradient.
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[id];
            let input_grads: Vec<(NodeId, Tensor)> = match &node.op {
                Op::Leaf => vec![],
                Op::Conv3d(cfg) => {
                    let (x, w, _b) = (node.inputs[0], node.inputs[1], node.inputs[2]);
                    let gx = conv::conv3d_backward_input(
                        &g,
                        self.value(w),
                        self.value(x).shape(),
                        cfg,
                    );
                    let (gw, gb) = conv::conv3d_backward_weight(
                        &g,
                        self.value(x),
                        self.value(w).shape(),
                        cfg,
                    );
                    vec![(node.inputs[0], gx), (node.inputs[1], gw), (node.inputs[2], gb)]
                }
                Op::InstanceNorm { eps } => {
                    let (x, gamma) = (node.inputs[0], node.inputs[1]);
                    let (gx, gg, gb) =
                        norm::instance_norm_backward(&g, self.value(x), self.value(gamma), *eps);
                    vec![(node.inputs[0], gx), (node.inputs[1], gg), (node.inputs[2], gb)]
                }
                Op::LayerNorm { eps } => {
                    let (x, gamma) = (node.inputs[0], node.inputs[1]);
                    let (gx, gg, gb) =
                        norm::layer_norm_backward(&g, self.value(x), self.value(gamma), *eps);
                    vec![(node.inputs[0], gx), (node.inputs[1], gg), (node.inputs[2], gb)]
                }
                Op::Relu => vec![(node.inputs[0], loss::relu_backward(&g, self.value(node.inputs[0])))],
                Op::Gelu => vec![(node.inputs[0], loss::gelu_backward(&g, self.value(node.inputs[0])))],
                Op::Add => vec![(node.inputs[0], g.clone()), (node.inputs[1], g.clone())],
                Op::Sub => {
                    let mut neg = g.clone();
                    for v in neg.data_mut() {
                        *v = -*v;
                    }
                    vec![(node.inputs[0], g.clone()), (node.inputs[1], neg)]
                }
                Op::Scale(c) => {
                    let mut gx = g.clone();
                    for v in gx.data_mut() {
                        *v *= c;
                    }
                    vec![(node.inputs[0], gx)]
                }
                Op::Matmul => {
                    let (a, b) = (node.inputs[0], node.inputs[1]);
                    let (ga, gb) = linalg::matmul_backward(&g, self.value(a), self.value(b));
                    vec![(a, ga), (b, gb)]
                }
                Op::AddRowBias => {
                    let n = *self.value(node.inputs[1]).shape().last().unwrap();
                    let mut gb = Tensor::zeros(&[n]);
                    for row in g.data().chunks(n) {
                        for (o, v) in gb.data_mut().iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    vec![(node.inputs[0], g.clone()), (node.inputs[1], gb)]
                }
                Op::SoftmaxLast => {
                    vec![(node.inputs[0], linalg::softmax_last_backward(&g, &node.value))]
                }
                Op::BmmNt => {
                    let (a, b) = (node.inputs[0], node.inputs[1]);
                    let (ga, gb) = linalg::bmm_nt_backward(&g, self.value(a), self.value(b));
                    vec![(a, ga), (b, gb)]
                }
                Op::BmmNn => {
                    let (a, b) = (node.inputs[0], node.inputs[1]);
                    let (ga, gb) = linalg::bmm_nn_backward(&g, self.value(a), self.value(b));
                    vec![(a, ga), (b, gb)]
                }
                Op::SplitHeads => {
                    vec![(node.inputs[0], linalg::merge_heads(&g))]
                }
                Op::MergeHeads => {
                    let heads = self.value(node.inputs[0]).shape()[0];
                    vec![(node.inputs[0], linalg::split_heads(&g, heads))]
                }
                Op::VolToTokens => {
                    let s = self.value(node.inputs[0]).shape();
                    vec![(node.inputs[0], resample::tokens_to_vol(&g, (s[1], s[2], s[3])))]
                }
                Op::TokensToVol => {
                    vec![(node.inputs[0], resample::vol_to_tokens(&g))]
                }
                Op::ConcatC => {
                    let ca = self.value(node.inputs[0]).shape()[0];
                    let na = self.value(node.inputs[0]).len();
                    let mut sa = self.value(node.inputs[0]).shape().to_vec();
                    sa[0] = ca;
                    let ga = Tensor::from_vec(&sa, g.data()[..na].to_vec());
                    let sb = self.value(node.inputs[1]).shape().to_vec();
                    let gb = Tensor::from_vec(&sb, g.data()[na..].to_vec());
                    vec![(node.inputs[0], ga), (node.inputs[1], gb)]
                }
                Op::Upsample2x => {
                    let s = self.value(node.inputs[0]).shape();
                    vec![(node.inputs[0], resample::upsample2x_backward(&g, s))]
                }
                Op::CrossEntropyMean(labels) => {
                    let gx = loss::cross_entropy_mean_backward(
                        g.item(),
                        self.value(node.inputs[0]),
                        labels,
                    );
                    vec![(node.inputs[0], gx)]
                }
                Op::AbsChannelSum => {
                    vec![(node.inputs[0], loss::abs_channel_sum_backward(&g, self.value(node.inputs[0])))]
                }
                Op::NormalizeL2 { eps } => {
                    vec![(node.inputs[0], loss::normalize_l2_backward(&g, self.value(node.inputs[0]), *eps))]
                }
                Op::L2Norm => {
                    vec![(node.inputs[0], loss::l2_norm_backward(g.item(), self.value(node.inputs[0])))]
                }
            };
            grads[id] = Some(g);
            for (input, grad) in input_grads {
                match &mut grads[input] {
                    Some(existing) => existing.add_assign(&grad),
                    slot => *slot = Some(grad),
                }
            }
        }
        Gradients(grads)
    }
}
