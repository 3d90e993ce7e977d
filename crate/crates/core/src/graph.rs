//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the tape itself is a
//! topological order and `backward` is a single reverse sweep. A node's
//! gradient is the sum of the contributions from all of its consumers.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{arg_err, shape_err, Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Lower clamp applied before every logarithm in the loss ops.
pub const LOG_EPS: f64 = 1e-7;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        x: usize,
        k: usize,
        b: Option<usize>,
        geom: ConvGeom,
    },
    MaxPool2 {
        x: usize,
        argmax: Vec<u32>,
    },
    UpConv2 {
        x: usize,
        k: usize,
        b: Option<usize>,
        c_in: usize,
        c_out: usize,
        h: usize,
        w: usize,
    },
    Dense {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Relu(usize),
    LeakyRelu(usize, T),
    Sigmoid(usize),
    Tanh(usize),
    Ln(usize),
    Softmax0 {
        x: usize,
        c: usize,
        positions: usize,
    },
    Concat(Vec<usize>),
    Slice {
        x: usize,
        start: usize,
    },
    Reshape(usize),
    Dropout {
        x: usize,
        mask: Vec<T>,
    },
    InstanceNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        c: usize,
        plane: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    GlobalAvgPool {
        x: usize,
        plane: usize,
    },
    AddChannel {
        map: usize,
        vec: usize,
        plane: usize,
    },
    Sum(usize),
    Mean(usize),
    AddN(Vec<usize>),
    Bce {
        x: usize,
        target: Vec<T>,
    },
    WeightedCce {
        probs: usize,
        labels: Vec<u8>,
        weights: Vec<T>,
        positions: usize,
    },
    WeightedL1 {
        pred: usize,
        target: Vec<T>,
        weights: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Counters reported by [`Graph::backward`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BackwardStats {
    /// Nodes that received a gradient, each processed exactly once.
    pub nodes_visited: usize,
}

#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims3(op: &'static str, t: &[usize]) -> Result<(usize, usize, usize)> {
    match *t {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(shape_err(op, format!("expected [C,H,W], got {:?}", t))),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[usize]) -> Var {
        let requires_grad = parents.iter().any(|&p| self.nodes[p].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient (inputs, detached activations).
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is tracked.
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last `backward`, if the node received one.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn val(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    // ---- layer primitives -------------------------------------------------

    /// Stride-1 cross-correlation with zero "same" padding.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let (c_in, h, w) = dims3("conv2d", self.shape(x))?;
        let (c_out, kc, k) = match *self.shape(kernel) {
            [co, ci, kh, kw] if kh == kw => (co, ci, kh),
            ref s => {
                return Err(shape_err(
                    "conv2d",
                    format!("kernel must be [C_out,C_in,k,k], got {:?}", s),
                ))
            }
        };
        if k % 2 == 0 {
            return Err(shape_err("conv2d", format!("kernel size {} must be odd", k)));
        }
        if kc != c_in {
            return Err(shape_err(
                "conv2d",
                format!("C_in: input has {} channels, kernel expects {}", c_in, kc),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [c_out] {
                return Err(shape_err(
                    "conv2d",
                    format!("C_out: bias shape {:?}, expected [{}]", self.shape(b), c_out),
                ));
            }
        }
        let geom = ConvGeom { c_in, c_out, h, w, k };
        let mut out = vec![T::zero(); c_out * h * w];
        kernels::conv2d_forward(geom, self.val(x), self.val(kernel), bias.map(|b| self.val(b)), &mut out);
        let mut parents = vec![x.0, kernel.0];
        parents.extend(bias.map(|b| b.0));
        Ok(self.push(
            Tensor::new([c_out, h, w], out)?,
            Op::Conv2d {
                x: x.0,
                k: kernel.0,
                b: bias.map(|b| b.0),
                geom,
            },
            &parents,
        ))
    }

    /// 2x2 max pooling with stride 2.
    pub fn maxpool2d(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = dims3("maxpool2d", self.shape(x))?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err(
                "maxpool2d",
                format!("spatial extent {}x{} must be even", h, w),
            ));
        }
        let n = c * (h / 2) * (w / 2);
        let mut out = vec![T::zero(); n];
        let mut argmax = vec![0u32; n];
        kernels::maxpool2_forward(c, h, w, self.val(x), &mut out, &mut argmax);
        Ok(self.push(
            Tensor::new([c, h / 2, w / 2], out)?,
            Op::MaxPool2 { x: x.0, argmax },
            &[x.0],
        ))
    }

    /// Stride-2 transposed convolution with a `[C_out, C_in, 2, 2]` kernel.
    pub fn upconv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let (c_in, h, w) = dims3("upconv2d", self.shape(x))?;
        let c_out = match *self.shape(kernel) {
            [co, ci, 2, 2] if ci == c_in => co,
            ref s => {
                return Err(shape_err(
                    "upconv2d",
                    format!("kernel must be [C_out,{},2,2], got {:?}", c_in, s),
                ))
            }
        };
        if let Some(b) = bias {
            if self.shape(b) != [c_out] {
                return Err(shape_err(
                    "upconv2d",
                    format!("C_out: bias shape {:?}, expected [{}]", self.shape(b), c_out),
                ));
            }
        }
        let mut out = vec![T::zero(); c_out * 4 * h * w];
        kernels::upconv2_forward(
            c_in,
            c_out,
            h,
            w,
            self.val(x),
            self.val(kernel),
            bias.map(|b| self.val(b)),
            &mut out,
        );
        let mut parents = vec![x.0, kernel.0];
        parents.extend(bias.map(|b| b.0));
        Ok(self.push(
            Tensor::new([c_out, 2 * h, 2 * w], out)?,
            Op::UpConv2 {
                x: x.0,
                k: kernel.0,
                b: bias.map(|b| b.0),
                c_in,
                c_out,
                h,
                w,
            },
            &parents,
        ))
    }

    /// Affine map of a vector: `weight` is `[out, in]`.
    pub fn dense(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let n_in = self.value(x).len();
        let n_out = match *self.shape(weight) {
            [o, i] if i == n_in => o,
            ref s => {
                return Err(shape_err(
                    "dense",
                    format!("weight {:?} incompatible with input of length {}", s, n_in),
                ))
            }
        };
        if let Some(b) = bias {
            if self.shape(b) != [n_out] {
                return Err(shape_err(
                    "dense",
                    format!("bias shape {:?}, expected [{}]", self.shape(b), n_out),
                ));
            }
        }
        let mut out = vec![T::zero(); n_out];
        kernels::dense_forward(self.val(x), self.val(weight), bias.map(|b| self.val(b)), &mut out);
        let mut parents = vec![x.0, weight.0];
        parents.extend(bias.map(|b| b.0));
        Ok(self.push(
            Tensor::new([n_out], out)?,
            Op::Dense {
                x: x.0,
                w: weight.0,
                b: bias.map(|b| b.0),
            },
            &parents,
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let data = self.val(a).iter().zip(self.val(b)).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(self.shape(a).to_vec(), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let data = self.val(a).iter().map(|&x| f(x)).collect();
        Tensor::new(self.shape(a).to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(t, Op::Add(a.0, b.0), &[a.0, b.0]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(t, Op::Sub(a.0, b.0), &[a.0, b.0]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(t, Op::Mul(a.0, b.0), &[a.0, b.0]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let t = self.map(a, |x| x * s);
        self.push(t, Op::Scale(a.0, s), &[a.0])
    }

    /// Elementwise sum of equally shaped tensors.
    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or(Error::Empty("add_n"))?;
        let mut acc = self.val(first).to_vec();
        for &x in &xs[1..] {
            self.same_shape("add_n", first, x)?;
            for (a, &v) in acc.iter_mut().zip(self.val(x)) {
                *a += v;
            }
        }
        let t = Tensor::new(self.shape(first).to_vec(), acc)?;
        let parents: Vec<usize> = xs.iter().map(|v| v.0).collect();
        Ok(self.push(t, Op::AddN(parents.clone()), &parents))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| if x > T::zero() { x } else { T::zero() });
        self.push(t, Op::Relu(a.0), &[a.0])
    }

    pub fn leaky_relu(&mut self, a: Var, alpha: T) -> Var {
        let t = self.map(a, |x| if x > T::zero() { x } else { alpha * x });
        self.push(t, Op::LeakyRelu(a.0, alpha), &[a.0])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.map(a, sigmoid);
        self.push(t, Op::Sigmoid(a.0), &[a.0])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| x.tanh());
        self.push(t, Op::Tanh(a.0), &[a.0])
    }

    /// `ln(max(x, LOG_EPS))`; the gradient is zero where the clamp is active.
    pub fn ln(&mut self, a: Var) -> Var {
        let eps = T::of(LOG_EPS);
        let t = self.map(a, |x| x.max(eps).ln());
        self.push(t, Op::Ln(a.0), &[a.0])
    }

    /// Softmax across the leading (class/channel) axis at every position.
    pub fn softmax_channel(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape
            .first()
            .ok_or_else(|| shape_err("softmax_channel", "scalar input"))?;
        if c == 0 {
            return Err(shape_err("softmax_channel", "zero channels"));
        }
        let positions = self.value(x).len() / c;
        let mut out = vec![T::zero(); c * positions];
        kernels::softmax_axis0_forward(c, positions, self.val(x), &mut out);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax0 { x: x.0, c, positions }, &[x.0]))
    }

    /// Concatenation along the leading axis; trailing extents must agree.
    pub fn concat_channel(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or(Error::Empty("concat_channel"))?;
        let tail = self.shape(first).get(1..).unwrap_or(&[]).to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &x in xs {
            let s = self.shape(x);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(shape_err(
                    "concat_channel",
                    format!("trailing extents {:?} vs {:?}", s.get(1..), tail),
                ));
            }
            lead += s[0];
            data.extend_from_slice(self.val(x));
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let parents: Vec<usize> = xs.iter().map(|v| v.0).collect();
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat(parents.clone()), &parents))
    }

    /// Rows `start..start+len` of the leading axis.
    pub fn slice_channel(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let lead = *shape
            .first()
            .ok_or_else(|| shape_err("slice_channel", "scalar input"))?;
        if start + len > lead || len == 0 {
            return Err(shape_err(
                "slice_channel",
                format!("range {}..{} outside leading extent {}", start, start + len, lead),
            ));
        }
        let inner: usize = shape[1..].iter().product();
        let data = self.val(x)[start * inner..(start + len) * inner].to_vec();
        let mut out_shape = shape;
        out_shape[0] = len;
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            Op::Slice {
                x: x.0,
                start: start * inner,
            },
            &[x.0],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape(x.0), &[x.0]))
    }

    /// Inverted dropout: kept units are scaled by `1/(1-p)`. Identity when
    /// `train` is false or `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, train: bool, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(arg_err("dropout", format!("probability {} not in [0,1)", p)));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.bernoulli(p) { T::zero() } else { keep })
            .collect();
        let data = self.val(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(t, Op::Dropout { x: x.0, mask }, &[x.0]))
    }

    /// Per-channel normalization over the spatial plane with learned affine.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (c, h, w) = dims3("instance_norm", self.shape(x))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err("instance_norm", format!("affine params must be [{}]", c)));
        }
        let plane = h * w;
        let mut out = vec![T::zero(); c * plane];
        let mut xhat = vec![T::zero(); c * plane];
        let mut inv_std = vec![T::zero(); c];
        kernels::instance_norm_forward(
            c,
            plane,
            self.val(x),
            self.val(gamma),
            self.val(beta),
            &mut out,
            &mut xhat,
            &mut inv_std,
        );
        Ok(self.push(
            Tensor::new([c, h, w], out)?,
            Op::InstanceNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                c,
                plane,
                xhat,
                inv_std,
            },
            &[x.0, gamma.0, beta.0],
        ))
    }

    /// `[C,H,W] -> [C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = dims3("global_avg_pool", self.shape(x))?;
        let plane = h * w;
        let inv = T::one() / T::of(plane as f64);
        let data = self
            .val(x)
            .chunks(plane)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        Ok(self.push(Tensor::new([c], data)?, Op::GlobalAvgPool { x: x.0, plane }, &[x.0]))
    }

    /// Adds `vec[c]` to every position of channel `c` of a `[C,H,W]` map.
    pub fn add_channel_bias(&mut self, map: Var, vec: Var) -> Result<Var> {
        let (c, h, w) = dims3("add_channel_bias", self.shape(map))?;
        if self.shape(vec) != [c] {
            return Err(shape_err(
                "add_channel_bias",
                format!("vector shape {:?}, expected [{}]", self.shape(vec), c),
            ));
        }
        let plane = h * w;
        let v = self.val(vec).to_vec();
        let data = self
            .val(map)
            .iter()
            .enumerate()
            .map(|(i, &m)| m + v[i / plane])
            .collect();
        Ok(self.push(
            Tensor::new([c, h, w], data)?,
            Op::AddChannel {
                map: map.0,
                vec: vec.0,
                plane,
            },
            &[map.0, vec.0],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.val(a).iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(a.0), &[a.0])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::of(self.value(a).len() as f64);
        let s = self.val(a).iter().copied().sum::<T>() / n;
        self.push(Tensor::scalar(s), Op::Mean(a.0), &[a.0])
    }

    // ---- loss primitives --------------------------------------------------

    /// Mean binary cross-entropy of scores against per-element 0/1 targets.
    /// Scores are clamped to `[LOG_EPS, 1-LOG_EPS]`.
    pub fn bce(&mut self, scores: Var, target: &[T]) -> Result<Var> {
        if target.len() != self.value(scores).len() {
            return Err(shape_err(
                "bce",
                format!("{} targets for {} scores", target.len(), self.value(scores).len()),
            ));
        }
        let v = bce_value(self.val(scores), target);
        Ok(self.push(
            Tensor::scalar(v),
            Op::Bce {
                x: scores.0,
                target: target.to_vec(),
            },
            &[scores.0],
        ))
    }

    /// Mean over positions of `-w[y] * ln(max(p[y], eps))` where `probs` is
    /// `[classes, positions...]` and `labels` holds one class per position.
    pub fn weighted_cce(&mut self, probs: Var, labels: &[u8], weights: &[T]) -> Result<Var> {
        let shape = self.shape(probs);
        let c = *shape.first().ok_or_else(|| shape_err("weighted_cce", "scalar probs"))?;
        let positions = self.value(probs).len() / c.max(1);
        if labels.len() != positions {
            return Err(shape_err(
                "weighted_cce",
                format!("{} labels for {} positions", labels.len(), positions),
            ));
        }
        if weights.len() != c {
            return Err(shape_err(
                "weighted_cce",
                format!("{} weights for {} classes", weights.len(), c),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= c) {
            return Err(Error::LabelOutOfRange {
                label: bad as usize,
                num_classes: c,
                context: alloc::string::String::new(),
            });
        }
        let v = weighted_cce_value(self.val(probs), positions, labels, weights);
        Ok(self.push(
            Tensor::scalar(v),
            Op::WeightedCce {
                probs: probs.0,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
                positions,
            },
            &[probs.0],
        ))
    }

    /// `sum_c w[c] * |target[c] - pred[c]|`.
    pub fn weighted_l1(&mut self, pred: Var, target: &[T], weights: &[T]) -> Result<Var> {
        let n = self.value(pred).len();
        if target.len() != n || weights.len() != n {
            return Err(shape_err(
                "weighted_l1",
                format!(
                    "pred {} / target {} / weights {} lengths differ",
                    n,
                    target.len(),
                    weights.len()
                ),
            ));
        }
        let v = weighted_l1_value(self.val(pred), target, weights);
        Ok(self.push(
            Tensor::scalar(v),
            Op::WeightedL1 {
                pred: pred.0,
                target: target.to_vec(),
                weights: weights.to_vec(),
            },
            &[pred.0],
        ))
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. A graph can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<BackwardStats> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        if !lv.item().is_finite() {
            return Err(Error::NonFinite(format!("loss value {}", lv.item())));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![T::one()]);
        let mut visited = 0;
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            visited += 1;
            if self.nodes[i].requires_grad {
                self.propagate(i, &g);
            }
            self.grads[i] = Some(g);
        }
        Ok(BackwardStats { nodes_visited: visited })
    }

    fn accumulate(&mut self, idx: usize, delta: Vec<T>) {
        if !self.nodes[idx].requires_grad {
            return;
        }
        match &mut self.grads[idx] {
            Some(g) => g.iter_mut().zip(&delta).for_each(|(a, &d)| *a += d),
            slot @ None => *slot = Some(delta),
        }
    }

    fn wants(&self, idx: usize) -> bool {
        self.nodes[idx].requires_grad
    }

    fn zeros_like(&self, idx: usize) -> Vec<T> {
        vec![T::zero(); self.nodes[idx].value.len()]
    }

    fn propagate(&mut self, i: usize, g: &[T]) {
        // Each arm computes fresh parent deltas, then accumulates them, so a
        // node that appears as several parents of one op is handled correctly.
        let mut deltas: Vec<(usize, Vec<T>)> = Vec::new();
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, k, b, geom } => {
                let (x, k, b, geom) = (*x, *k, *b, *geom);
                let mut gx = self.wants(x).then(|| self.zeros_like(x));
                let mut gk = self.wants(k).then(|| self.zeros_like(k));
                let mut gb = b.filter(|&b| self.wants(b)).map(|b| self.zeros_like(b));
                kernels::conv2d_backward(
                    geom,
                    self.nodes[x].value.data(),
                    self.nodes[k].value.data(),
                    g,
                    gx.as_deref_mut(),
                    gk.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                deltas.extend(gx.map(|d| (x, d)));
                deltas.extend(gk.map(|d| (k, d)));
                if let (Some(b), Some(d)) = (b, gb) {
                    deltas.push((b, d));
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let mut gx = self.zeros_like(*x);
                for (o, &src) in argmax.iter().enumerate() {
                    gx[src as usize] += g[o];
                }
                deltas.push((*x, gx));
            }
            Op::UpConv2 {
                x,
                k,
                b,
                c_in,
                c_out,
                h,
                w,
            } => {
                let (x, k, b) = (*x, *k, *b);
                let mut gx = self.wants(x).then(|| self.zeros_like(x));
                let mut gk = self.wants(k).then(|| self.zeros_like(k));
                let mut gb = b.filter(|&b| self.wants(b)).map(|b| self.zeros_like(b));
                kernels::upconv2_backward(
                    *c_in,
                    *c_out,
                    *h,
                    *w,
                    self.nodes[x].value.data(),
                    self.nodes[k].value.data(),
                    g,
                    gx.as_deref_mut(),
                    gk.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                deltas.extend(gx.map(|d| (x, d)));
                deltas.extend(gk.map(|d| (k, d)));
                if let (Some(b), Some(d)) = (b, gb) {
                    deltas.push((b, d));
                }
            }
            Op::Dense { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let mut gx = self.wants(x).then(|| self.zeros_like(x));
                let mut gw = self.wants(w).then(|| self.zeros_like(w));
                let mut gb = b.filter(|&b| self.wants(b)).map(|b| self.zeros_like(b));
                kernels::dense_backward(
                    self.nodes[x].value.data(),
                    self.nodes[w].value.data(),
                    g,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                deltas.extend(gx.map(|d| (x, d)));
                deltas.extend(gw.map(|d| (w, d)));
                if let (Some(b), Some(d)) = (b, gb) {
                    deltas.push((b, d));
                }
            }
            Op::Add(a, b) => {
                deltas.push((*a, g.to_vec()));
                deltas.push((*b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                deltas.push((*a, g.to_vec()));
                deltas.push((*b, g.iter().map(|&v| -v).collect()));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                deltas.push((*a, g.iter().zip(vb).map(|(&g, &y)| g * y).collect()));
                deltas.push((*b, g.iter().zip(va).map(|(&g, &x)| g * x).collect()));
            }
            Op::Scale(a, s) => deltas.push((*a, g.iter().map(|&v| v * *s).collect())),
            Op::AddN(xs) => {
                for &x in xs {
                    deltas.push((x, g.to_vec()));
                }
            }
            Op::Relu(a) => {
                let x = self.nodes[*a].value.data();
                deltas.push((
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                        .collect(),
                ));
            }
            Op::LeakyRelu(a, alpha) => {
                let x = self.nodes[*a].value.data();
                deltas.push((
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(&g, &x)| if x > T::zero() { g } else { g * *alpha })
                        .collect(),
                ));
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                deltas.push((*a, g.iter().zip(y).map(|(&g, &y)| g * y * (T::one() - y)).collect()));
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                deltas.push((*a, g.iter().zip(y).map(|(&g, &y)| g * (T::one() - y * y)).collect()));
            }
            Op::Ln(a) => {
                let eps = T::of(LOG_EPS);
                let x = self.nodes[*a].value.data();
                let d = g.iter().zip(x).map(|(&g, &x)| if x > eps { g / x } else { T::zero() });
                deltas.push((*a, d.collect()));
            }
            Op::Softmax0 { x, c, positions } => {
                let mut gx = self.zeros_like(*x);
                kernels::softmax_axis0_backward(*c, *positions, node.value.data(), g, &mut gx);
                deltas.push((*x, gx));
            }
            Op::Concat(xs) => {
                let mut off = 0;
                for &x in xs {
                    let n = self.nodes[x].value.len();
                    deltas.push((x, g[off..off + n].to_vec()));
                    off += n;
                }
            }
            Op::Slice { x, start } => {
                let mut gx = self.zeros_like(*x);
                gx[*start..*start + g.len()].copy_from_slice(g);
                deltas.push((*x, gx));
            }
            Op::Reshape(x) => deltas.push((*x, g.to_vec())),
            Op::Dropout { x, mask } => deltas.push((*x, g.iter().zip(mask).map(|(&g, &m)| g * m).collect())),
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                c,
                plane,
                xhat,
                inv_std,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let mut gx = self.wants(x).then(|| self.zeros_like(x));
                let mut gg = self.wants(gamma).then(|| self.zeros_like(gamma));
                let mut gbt = self.wants(beta).then(|| self.zeros_like(beta));
                kernels::instance_norm_backward(
                    *c,
                    *plane,
                    self.nodes[gamma].value.data(),
                    xhat,
                    inv_std,
                    g,
                    gx.as_deref_mut(),
                    gg.as_deref_mut(),
                    gbt.as_deref_mut(),
                );
                deltas.extend(gx.map(|d| (x, d)));
                deltas.extend(gg.map(|d| (gamma, d)));
                deltas.extend(gbt.map(|d| (beta, d)));
            }
            Op::GlobalAvgPool { x, plane } => {
                let inv = T::one() / T::of(*plane as f64);
                let n = self.nodes[*x].value.len();
                deltas.push((*x, (0..n).map(|i| g[i / plane] * inv).collect()));
            }
            Op::AddChannel { map, vec, plane } => {
                deltas.push((*map, g.to_vec()));
                deltas.push((*vec, g.chunks(*plane).map(|p| p.iter().copied().sum()).collect()));
            }
            Op::Sum(a) => {
                let n = self.nodes[*a].value.len();
                deltas.push((*a, vec![g[0]; n]));
            }
            Op::Mean(a) => {
                let n = self.nodes[*a].value.len();
                deltas.push((*a, vec![g[0] / T::of(n as f64); n]));
            }
            Op::Bce { x, target } => {
                let s = self.nodes[*x].value.data();
                let n = T::of(s.len() as f64);
                let (lo, hi) = (T::of(LOG_EPS), T::one() - T::of(LOG_EPS));
                let d = s
                    .iter()
                    .zip(target)
                    .map(|(&s, &t)| {
                        if s < lo || s > hi {
                            T::zero()
                        } else {
                            g[0] * (-t / s + (T::one() - t) / (T::one() - s)) / n
                        }
                    })
                    .collect();
                deltas.push((*x, d));
            }
            Op::WeightedCce {
                probs,
                labels,
                weights,
                positions,
            } => {
                let p = self.nodes[*probs].value.data();
                let mut gp = self.zeros_like(*probs);
                let n = T::of(*positions as f64);
                let eps = T::of(LOG_EPS);
                for (pos, &y) in labels.iter().enumerate() {
                    let idx = y as usize * positions + pos;
                    if p[idx] > eps {
                        gp[idx] = -g[0] * weights[y as usize] / (p[idx] * n);
                    }
                }
                deltas.push((*probs, gp));
            }
            Op::WeightedL1 { pred, target, weights } => {
                let p = self.nodes[*pred].value.data();
                let d = p
                    .iter()
                    .zip(target)
                    .zip(weights)
                    .map(|((&p, &t), &w)| {
                        let diff = p - t;
                        if diff > T::zero() {
                            g[0] * w
                        } else if diff < T::zero() {
                            -g[0] * w
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                deltas.push((*pred, d));
            }
        }
        for (idx, d) in deltas {
            self.accumulate(idx, d);
        }
    }
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn bce_value<T: Real>(scores: &[T], target: &[T]) -> T {
    let (lo, hi) = (T::of(LOG_EPS), T::one() - T::of(LOG_EPS));
    let n = T::of(scores.len() as f64);
    scores
        .iter()
        .zip(target)
        .map(|(&s, &t)| {
            let s = s.max(lo).min(hi);
            -(t * s.ln() + (T::one() - t) * (T::one() - s).ln())
        })
        .sum::<T>()
        / n
}

pub fn weighted_cce_value<T: Real>(probs: &[T], positions: usize, labels: &[u8], weights: &[T]) -> T {
    let eps = T::of(LOG_EPS);
    let n = T::of(positions as f64);
    labels
        .iter()
        .enumerate()
        .map(|(pos, &y)| -weights[y as usize] * probs[y as usize * positions + pos].max(eps).ln())
        .sum::<T>()
        / n
}

pub fn weighted_l1_value<T: Real>(pred: &[T], target: &[T], weights: &[T]) -> T {
    pred.iter()
        .zip(target)
        .zip(weights)
        .map(|((&p, &t), &w)| w * (t - p).abs())
        .sum()
}
