use ndarray::{Array2, Array3, ArrayD, Axis, Ix2, IxDyn};

use crate::ops::{self, ConvGeom, GroupNormCache};
use crate::params::{ParamGrads, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op {
    /// Constant input; gradients are not propagated into it.
    Input,
    /// Differentiable leaf.
    Leaf,
    Conv {
        input: NodeId,
        weight: ParamId,
        bias: Option<ParamId>,
        geom: ConvGeom,
        cols: Array2<f64>,
    },
    GroupNorm {
        input: NodeId,
        gamma: ParamId,
        beta: ParamId,
        groups: usize,
        cache: GroupNormCache,
    },
    Relu {
        input: NodeId,
    },
    MaxPool2 {
        input: NodeId,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        input: NodeId,
    },
    Upsample {
        input: NodeId,
    },
    Concat {
        inputs: Vec<NodeId>,
    },
}

struct Node {
    value: Array3<f64>,
    op: Op,
}

/// One recorded forward pass over borrowed parameters.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    nodes: Vec<Option<Array3<f64>>>,
    pub params: ParamGrads,
}

impl Gradients {
    pub fn node(&self, id: NodeId) -> Option<&Array3<f64>> {
        self.nodes[id.0].as_ref()
    }
}

fn as_vec(a: &ArrayD<f64>) -> &[f64] {
    a.as_slice().expect("parameters are contiguous")
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    fn push(&mut self, value: Array3<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Array3<f64> {
        &self.nodes[id.0].value
    }

    pub fn input(&mut self, value: Array3<f64>) -> NodeId {
        self.push(value, Op::Input)
    }

    pub fn leaf(&mut self, value: Array3<f64>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Stride-1 convolution. `weight` is `(Cout, Cin, k, k)`.
    pub fn conv2d(&mut self, input: NodeId, weight: ParamId, bias: Option<ParamId>, geom: ConvGeom) -> NodeId {
        let w = self.params.value(weight);
        let shape = w.shape();
        let (cout, cin, k) = (shape[0], shape[1], shape[2]);
        assert_eq!(k, geom.kernel, "kernel size mismatch");
        let x = &self.nodes[input.0].value;
        assert_eq!(x.dim().0, cin, "conv input channels");
        let (_, h, wd) = x.dim();
        let (ho, wo) = (geom.out_len(h), geom.out_len(wd));
        let cols = ops::im2col(x.view(), geom);
        let wmat = w
            .view()
            .into_shape_with_order((cout, cin * k * k))
            .expect("contiguous weight")
            .into_dimensionality::<Ix2>()
            .expect("2d");
        let mut out = wmat.dot(&cols);
        if let Some(b) = bias {
            let b = as_vec(self.params.value(b));
            for (mut row, &bv) in out.axis_iter_mut(Axis(0)).zip(b) {
                row.mapv_inplace(|v| v + bv);
            }
        }
        let out = out.into_shape_with_order((cout, ho, wo)).expect("reshape");
        self.push(
            out,
            Op::Conv {
                input,
                weight,
                bias,
                geom,
                cols,
            },
        )
    }

    pub fn group_norm(&mut self, input: NodeId, gamma: ParamId, beta: ParamId, groups: usize) -> NodeId {
        let x = &self.nodes[input.0].value;
        assert_eq!(x.dim().0 % groups, 0, "channels divisible by groups");
        let (out, cache) = ops::group_norm(
            x.view(),
            as_vec(self.params.value(gamma)),
            as_vec(self.params.value(beta)),
            groups,
        );
        self.push(
            out,
            Op::GroupNorm {
                input,
                gamma,
                beta,
                groups,
                cache,
            },
        )
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let out = self.nodes[input.0].value.mapv(|v| v.max(0.0));
        self.push(out, Op::Relu { input })
    }

    pub fn max_pool2(&mut self, input: NodeId) -> NodeId {
        let (out, argmax) = ops::max_pool2(self.nodes[input.0].value.view());
        self.push(out, Op::MaxPool2 { input, argmax })
    }

    /// `(C, H, W) -> (C, 1, 1)` spatial mean.
    pub fn global_avg_pool(&mut self, input: NodeId) -> NodeId {
        let x = &self.nodes[input.0].value;
        let (c, h, w) = x.dim();
        let n = (h * w) as f64;
        let out = Array3::from_shape_fn((c, 1, 1), |(ci, _, _)| x.index_axis(Axis(0), ci).sum() / n);
        self.push(out, Op::GlobalAvgPool { input })
    }

    pub fn upsample(&mut self, input: NodeId, oh: usize, ow: usize) -> NodeId {
        let out = ops::upsample_bilinear(self.nodes[input.0].value.view(), oh, ow);
        self.push(out, Op::Upsample { input })
    }

    /// Channel concatenation.
    pub fn concat(&mut self, inputs: &[NodeId]) -> NodeId {
        let views: Vec<_> = inputs.iter().map(|i| self.nodes[i.0].value.view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("matching spatial dims");
        self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
        )
    }

    /// Reverse pass seeded with `d(objective)/d(node)` for each seed.
    pub fn backward(&self, seeds: &[(NodeId, Array3<f64>)]) -> Gradients {
        let mut grads: Vec<Option<Array3<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut pgrads = self.params.zeros_like();
        let accumulate = |grads: &mut Vec<Option<Array3<f64>>>, id: NodeId, g: Array3<f64>| {
            match &mut grads[id.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        };
        for (id, g) in seeds {
            assert_eq!(g.dim(), self.nodes[id.0].value.dim(), "seed shape");
            accumulate(&mut grads, *id, g.clone());
        }
        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input | Op::Leaf => {}
                Op::Conv {
                    input,
                    weight,
                    bias,
                    geom,
                    cols,
                } => {
                    let (cout, ho, wo) = g.dim();
                    let g2 = g
                        .view()
                        .into_shape_with_order((cout, ho * wo))
                        .expect("contiguous grad");
                    let w = self.params.value(*weight);
                    let shape = w.shape().to_vec();
                    let mut dw = g2.dot(&cols.t());
                    if !dw.is_standard_layout() {
                        dw = dw.as_standard_layout().into_owned();
                    }
                    pgrads.grads[weight.0] += &dw
                        .into_shape_with_order(IxDyn(&shape))
                        .expect("weight shape");
                    if let Some(b) = bias {
                        let db = g2.sum_axis(Axis(1));
                        pgrads.grads[b.0] += &db.into_dyn();
                    }
                    if !matches!(self.nodes[input.0].op, Op::Input) {
                        let wmat = w
                            .view()
                            .into_shape_with_order((shape[0], shape[1] * shape[2] * shape[3]))
                            .expect("contiguous weight")
                            .into_dimensionality::<Ix2>()
                            .expect("2d");
                        let dcols = wmat.t().dot(&g2);
                        let dx = ops::col2im(dcols.view(), self.nodes[input.0].value.dim(), *geom);
                        accumulate(&mut grads, *input, dx);
                    }
                }
                Op::GroupNorm {
                    input,
                    gamma,
                    beta,
                    groups,
                    cache,
                } => {
                    let (dx, dg, db) =
                        ops::group_norm_backward(g.view(), cache, as_vec(self.params.value(*gamma)), *groups);
                    for (a, b) in pgrads.grads[gamma.0].iter_mut().zip(dg) {
                        *a += b;
                    }
                    for (a, b) in pgrads.grads[beta.0].iter_mut().zip(db) {
                        *a += b;
                    }
                    accumulate(&mut grads, *input, dx);
                }
                Op::Relu { input } => {
                    let mut dx = g.clone();
                    ndarray::Zip::from(&mut dx)
                        .and(&self.nodes[input.0].value)
                        .for_each(|d, &x| {
                            if x <= 0.0 {
                                *d = 0.0;
                            }
                        });
                    accumulate(&mut grads, *input, dx);
                }
                Op::MaxPool2 { input, argmax } => {
                    let mut dx = Array3::zeros(self.nodes[input.0].value.dim());
                    let ds = dx.as_slice_mut().expect("fresh");
                    for (gv, &src) in g.iter().zip(argmax) {
                        ds[src] += gv;
                    }
                    accumulate(&mut grads, *input, dx);
                }
                Op::GlobalAvgPool { input } => {
                    let (c, h, w) = self.nodes[input.0].value.dim();
                    let n = (h * w) as f64;
                    let dx = Array3::from_shape_fn((c, h, w), |(ci, _, _)| g[[ci, 0, 0]] / n);
                    accumulate(&mut grads, *input, dx);
                }
                Op::Upsample { input } => {
                    let (_, ih, iw) = self.nodes[input.0].value.dim();
                    let dx = ops::upsample_bilinear_backward(g.view(), ih, iw);
                    accumulate(&mut grads, *input, dx);
                }
                Op::Concat { inputs } => {
                    let mut start = 0;
                    for inp in inputs {
                        let c = self.nodes[inp.0].value.dim().0;
                        let part = g.slice_axis(Axis(0), (start..start + c).into()).to_owned();
                        start += c;
                        if !matches!(self.nodes[inp.0].op, Op::Input) {
                            accumulate(&mut grads, *inp, part);
                        }
                    }
                }
            }
            grads[idx] = Some(g);
        }
        Gradients {
            nodes: grads,
            params: pgrads,
        }
    }
}

