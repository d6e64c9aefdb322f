//! Dynamic reverse-mode tape. Each op validates shapes, computes its
//! value eagerly, and records itself; `backward` walks the tape in
//! reverse. Values are checked for NaN/Inf as nodes are created, and
//! again when gradients land in leaves, so a diverging run aborts with
//! the offending node named.

use crate::autodiff::kernels;
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};
use crate::volume::PlaneSelector;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Linear { x: NodeId, w: NodeId, b: Option<NodeId> },
    Conv2d { x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize },
    TConv2d { x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize },
    AvgPool2d { x: NodeId },
    Gap2d { x: NodeId },
    Relu { x: NodeId },
    Tanh { x: NodeId },
    Sigmoid { x: NodeId },
    Exp { x: NodeId },
    Sqrt { x: NodeId },
    Abs { x: NodeId },
    ClampMin { x: NodeId, floor: f64 },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Div { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: f64 },
    Shift { x: NodeId },
    PowScalar { x: NodeId, p: f64 },
    AddChanBias { x: NodeId, v: NodeId },
    MulChanGain { x: NodeId, v: NodeId },
    Concat { parts: Vec<NodeId> },
    Reshape { x: NodeId },
    Sum { x: NodeId },
    Mean { x: NodeId },
    RowBroadcast { x: NodeId, rows: usize },
    RowSum { x: NodeId },
    Softmax { x: NodeId },
    StackLast { parts: Vec<NodeId> },
    PlaneSlice { x: NodeId, plane: PlaneSelector, index: usize, channel: usize },
    DeltaAxis { x: NodeId, axis: usize },
    GaussBlur3 { x: NodeId, taps: Vec<f64> },
    AvgPool3dHalf { x: NodeId },
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
    label: String,
}

/// Where a leaf's gradient should be delivered after backward.
#[derive(Debug, Clone)]
pub struct Binding {
    pub node: NodeId,
    pub store: String,
    pub name: String,
}

pub struct Grads(Vec<Option<Vec<f64>>>);

impl Grads {
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.0.get(id.0).and_then(|g| g.as_deref())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bindings: Vec<Binding>,
}

impl Graph {
    pub fn new() -> Graph {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn item(&self, id: NodeId) -> Result<f64> {
        self.nodes[id.0].value.item()
    }

    pub fn bindings(&self) -> &[Binding] {
        &self.bindings
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool, label: String) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite { node: label });
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
            label,
        });
        Ok(id)
    }

    fn auto(&self, kind: &str) -> String {
        format!("{kind}#{}", self.nodes.len())
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Constant leaf; no gradient flows to it.
    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        let label = self.auto("const");
        self.push(Op::Leaf, value, false, label)
    }

    /// Differentiable leaf, for inputs whose gradient is wanted.
    pub fn var(&mut self, value: Tensor, label: &str) -> Result<NodeId> {
        self.push(Op::Leaf, value, true, label.to_string())
    }

    /// Leaf bound to a named store parameter; grads from `backward` are
    /// later delivered via the recorded binding.
    pub fn bound_leaf(
        &mut self,
        value: Tensor,
        trainable: bool,
        store: &str,
        name: &str,
    ) -> Result<NodeId> {
        let id = self.push(Op::Leaf, value, trainable, format!("{store}.{name}"))?;
        self.bindings.push(Binding {
            node: id,
            store: store.to_string(),
            name: name.to_string(),
        });
        Ok(id)
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (xs, ws) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        if xs.shape.len() != 1 || ws.shape.len() != 2 || ws.shape[1] != xs.shape[0] {
            return Err(Error::shape(
                "linear",
                format!("x {:?} vs w {:?}", xs.shape, ws.shape),
            ));
        }
        let (out, inn) = (ws.shape[0], ws.shape[1]);
        if let Some(b) = b {
            let bs = &self.nodes[b.0].value;
            if bs.shape != vec![out] {
                return Err(Error::shape("linear", format!("bias {:?} vs out {out}", bs.shape)));
            }
        }
        let mut y = vec![0.0; out];
        for o in 0..out {
            let mut acc = match b {
                Some(b) => self.nodes[b.0].value.data[o],
                None => 0.0,
            };
            let row = &self.nodes[w.0].value.data[o * inn..(o + 1) * inn];
            let xd = &self.nodes[x.0].value.data;
            for j in 0..inn {
                acc += row[j] * xd[j];
            }
            y[o] = acc;
        }
        let needs = self.needs(x) || self.needs(w) || b.map(|b| self.needs(b)).unwrap_or(false);
        let label = self.auto("linear");
        self.push(Op::Linear { x, w, b }, Tensor::new(vec![out], y)?, needs, label)
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let (xs, ws) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        if xs.shape.len() != 3 || ws.shape.len() != 4 || ws.shape[1] != xs.shape[0] {
            return Err(Error::shape(
                "conv2d",
                format!("x {:?} vs w {:?}", xs.shape, ws.shape),
            ));
        }
        let (ci, h, wd) = (xs.shape[0], xs.shape[1], xs.shape[2]);
        let (co, kh, kw) = (ws.shape[0], ws.shape[2], ws.shape[3]);
        let bias = match b {
            Some(bid) => {
                let bs = &self.nodes[bid.0].value;
                if bs.shape != vec![co] {
                    return Err(Error::shape("conv2d", format!("bias {:?} vs co {co}", bs.shape)));
                }
                Some(bid)
            }
            None => None,
        };
        let y = kernels::conv2d_fwd(
            &self.nodes[x.0].value.data,
            ci,
            h,
            wd,
            &self.nodes[w.0].value.data,
            co,
            kh,
            kw,
            bias.map(|b| self.nodes[b.0].value.data.as_slice()),
            stride,
            pad,
        )?;
        let ho = kernels::conv_out(h, kh, stride, pad)?;
        let wo = kernels::conv_out(wd, kw, stride, pad)?;
        let needs = self.needs(x) || self.needs(w) || bias.map(|b| self.needs(b)).unwrap_or(false);
        let label = self.auto("conv2d");
        self.push(
            Op::Conv2d { x, w, b: bias, stride, pad },
            Tensor::new(vec![co, ho, wo], y)?,
            needs,
            label,
        )
    }

    pub fn tconv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let (xs, ws) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        if xs.shape.len() != 3 || ws.shape.len() != 4 || ws.shape[0] != xs.shape[0] {
            return Err(Error::shape(
                "tconv2d",
                format!("x {:?} vs w {:?}", xs.shape, ws.shape),
            ));
        }
        let (ci, h, wd) = (xs.shape[0], xs.shape[1], xs.shape[2]);
        let (co, kh, kw) = (ws.shape[1], ws.shape[2], ws.shape[3]);
        let bias = match b {
            Some(bid) => {
                let bs = &self.nodes[bid.0].value;
                if bs.shape != vec![co] {
                    return Err(Error::shape("tconv2d", format!("bias {:?} vs co {co}", bs.shape)));
                }
                Some(bid)
            }
            None => None,
        };
        let y = kernels::tconv2d_fwd(
            &self.nodes[x.0].value.data,
            ci,
            h,
            wd,
            &self.nodes[w.0].value.data,
            co,
            kh,
            kw,
            bias.map(|b| self.nodes[b.0].value.data.as_slice()),
            stride,
            pad,
        )?;
        let ho = kernels::tconv_out(h, kh, stride, pad)?;
        let wo = kernels::tconv_out(wd, kw, stride, pad)?;
        let needs = self.needs(x) || self.needs(w) || bias.map(|b| self.needs(b)).unwrap_or(false);
        let label = self.auto("tconv2d");
        self.push(
            Op::TConv2d { x, w, b: bias, stride, pad },
            Tensor::new(vec![co, ho, wo], y)?,
            needs,
            label,
        )
    }

    pub fn avgpool2d(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = &self.nodes[x.0].value;
        if xs.shape.len() != 3 {
            return Err(Error::shape("avgpool2d", format!("want [C,H,W], got {:?}", xs.shape)));
        }
        let (c, h, w) = (xs.shape[0], xs.shape[1], xs.shape[2]);
        let y = kernels::avgpool2d_half_fwd(&xs.data, c, h, w)?;
        let needs = self.needs(x);
        let label = self.auto("avgpool2d");
        self.push(
            Op::AvgPool2d { x },
            Tensor::new(vec![c, h / 2, w / 2], y)?,
            needs,
            label,
        )
    }

    pub fn gap2d(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = &self.nodes[x.0].value;
        if xs.shape.len() != 3 {
            return Err(Error::shape("gap2d", format!("want [C,H,W], got {:?}", xs.shape)));
        }
        let y = kernels::gap2d(&xs.data, xs.shape[0], xs.shape[1], xs.shape[2]);
        let needs = self.needs(x);
        let label = self.auto("gap2d");
        self.push(Op::Gap2d { x }, Tensor::new(vec![xs.shape[0]], y)?, needs, label)
    }

    fn unary(
        &mut self,
        x: NodeId,
        kind: &'static str,
        op: Op,
        f: impl Fn(f64) -> f64,
    ) -> Result<NodeId> {
        let xs = &self.nodes[x.0].value;
        let data: Vec<f64> = xs.data.iter().map(|&v| f(v)).collect();
        let shape = xs.shape.clone();
        let needs = self.needs(x);
        let label = self.auto(kind);
        self.push(op, Tensor::new(shape, data)?, needs, label)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, "relu", Op::Relu { x }, |v| v.max(0.0))
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, "tanh", Op::Tanh { x }, f64::tanh)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, "sigmoid", Op::Sigmoid { x }, |v| 1.0 / (1.0 + (-v).exp()))
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, "exp", Op::Exp { x }, f64::exp)
    }

    pub fn sqrt(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, "sqrt", Op::Sqrt { x }, f64::sqrt)
    }

    pub fn abs(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, "abs", Op::Abs { x }, f64::abs)
    }

    pub fn clamp_min(&mut self, x: NodeId, floor: f64) -> Result<NodeId> {
        self.unary(x, "clamp_min", Op::ClampMin { x, floor }, |v| v.max(floor))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.unary(x, "scale", Op::Scale { x, c }, |v| v * c)
    }

    pub fn shift(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.unary(x, "shift", Op::Shift { x }, |v| v + c)
    }

    pub fn pow_scalar(&mut self, x: NodeId, p: f64) -> Result<NodeId> {
        self.unary(x, "pow", Op::PowScalar { x, p }, |v| v.powf(p))
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        kind: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape != bv.shape {
            return Err(Error::shape(
                kind,
                format!("{:?} vs {:?}", av.shape, bv.shape),
            ));
        }
        let data: Vec<f64> = av
            .data
            .iter()
            .zip(bv.data.iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = av.shape.clone();
        let needs = self.needs(a) || self.needs(b);
        let label = self.auto(kind);
        self.push(op, Tensor::new(shape, data)?, needs, label)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "add", Op::Add { a, b }, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "sub", Op::Sub { a, b }, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "mul", Op::Mul { a, b }, |x, y| x * y)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "div", Op::Div { a, b }, |x, y| x / y)
    }

    /// Adds a per-channel bias vector to every pixel of a [C,H,W] map.
    pub fn add_chan_bias(&mut self, x: NodeId, v: NodeId) -> Result<NodeId> {
        let (xs, vs) = (&self.nodes[x.0].value, &self.nodes[v.0].value);
        if xs.shape.len() != 3 || vs.shape.len() != 1 || vs.shape[0] != xs.shape[0] {
            return Err(Error::shape(
                "add_chan_bias",
                format!("x {:?} vs v {:?}", xs.shape, vs.shape),
            ));
        }
        let (c, area) = (xs.shape[0], xs.shape[1] * xs.shape[2]);
        let mut data = xs.data.clone();
        for ic in 0..c {
            let bias = vs.data[ic];
            for i in 0..area {
                data[ic * area + i] += bias;
            }
        }
        let shape = xs.shape.clone();
        let needs = self.needs(x) || self.needs(v);
        let label = self.auto("add_chan_bias");
        self.push(Op::AddChanBias { x, v }, Tensor::new(shape, data)?, needs, label)
    }

    /// Multiplies every pixel of a [C,H,W] map by a per-channel gain.
    pub fn mul_chan_gain(&mut self, x: NodeId, v: NodeId) -> Result<NodeId> {
        let (xs, vs) = (&self.nodes[x.0].value, &self.nodes[v.0].value);
        if xs.shape.len() != 3 || vs.shape.len() != 1 || vs.shape[0] != xs.shape[0] {
            return Err(Error::shape(
                "mul_chan_gain",
                format!("x {:?} vs v {:?}", xs.shape, vs.shape),
            ));
        }
        let (c, area) = (xs.shape[0], xs.shape[1] * xs.shape[2]);
        let mut data = xs.data.clone();
        for ic in 0..c {
            let gain = vs.data[ic];
            for i in 0..area {
                data[ic * area + i] *= gain;
            }
        }
        let shape = xs.shape.clone();
        let needs = self.needs(x) || self.needs(v);
        let label = self.auto("mul_chan_gain");
        self.push(Op::MulChanGain { x, v }, Tensor::new(shape, data)?, needs, label)
    }

    /// Concatenation along the first axis.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no parts".to_string()));
        }
        let tail = self.nodes[parts[0].0].value.shape[1..].to_vec();
        let mut dim0 = 0;
        for &p in parts {
            let s = &self.nodes[p.0].value.shape;
            if s[1..] != tail[..] {
                return Err(Error::shape(
                    "concat",
                    format!("trailing dims differ: {:?} vs {:?}", &s[1..], tail),
                ));
            }
            dim0 += s[0];
        }
        let mut data = Vec::with_capacity(dim0 * tail.iter().product::<usize>());
        for &p in parts {
            data.extend_from_slice(&self.nodes[p.0].value.data);
        }
        let mut shape = vec![dim0];
        shape.extend_from_slice(&tail);
        let needs = parts.iter().any(|&p| self.needs(p));
        let label = self.auto("concat");
        self.push(
            Op::Concat { parts: parts.to_vec() },
            Tensor::new(shape, data)?,
            needs,
            label,
        )
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let xs = &self.nodes[x.0].value;
        if shape.iter().product::<usize>() != xs.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} cannot view as {:?}", xs.shape, shape),
            ));
        }
        let data = xs.data.clone();
        let needs = self.needs(x);
        let label = self.auto("reshape");
        self.push(Op::Reshape { x }, Tensor::new(shape, data)?, needs, label)
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let total: f64 = self.nodes[x.0].value.data.iter().sum();
        let needs = self.needs(x);
        let label = self.auto("sum");
        self.push(Op::Sum { x }, Tensor::scalar(total), needs, label)
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let v = &self.nodes[x.0].value;
        let m = v.data.iter().sum::<f64>() / v.numel() as f64;
        let needs = self.needs(x);
        let label = self.auto("mean");
        self.push(Op::Mean { x }, Tensor::scalar(m), needs, label)
    }

    /// Repeats a [d] vector into [rows, d].
    pub fn row_broadcast(&mut self, x: NodeId, rows: usize) -> Result<NodeId> {
        let xs = &self.nodes[x.0].value;
        if xs.shape.len() != 1 || rows == 0 {
            return Err(Error::shape(
                "row_broadcast",
                format!("want vector and rows > 0, got {:?} x {rows}", xs.shape),
            ));
        }
        let d = xs.shape[0];
        let mut data = Vec::with_capacity(rows * d);
        for _ in 0..rows {
            data.extend_from_slice(&xs.data);
        }
        let needs = self.needs(x);
        let label = self.auto("row_broadcast");
        self.push(
            Op::RowBroadcast { x, rows },
            Tensor::new(vec![rows, d], data)?,
            needs,
            label,
        )
    }

    /// Sums a [n, d] matrix across columns, giving [n].
    pub fn row_sum(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = &self.nodes[x.0].value;
        if xs.shape.len() != 2 {
            return Err(Error::shape("row_sum", format!("want matrix, got {:?}", xs.shape)));
        }
        let (n, d) = (xs.shape[0], xs.shape[1]);
        let mut y = vec![0.0; n];
        for i in 0..n {
            y[i] = xs.data[i * d..(i + 1) * d].iter().sum();
        }
        let needs = self.needs(x);
        let label = self.auto("row_sum");
        self.push(Op::RowSum { x }, Tensor::new(vec![n], y)?, needs, label)
    }

    /// Max-shifted softmax over a vector.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = &self.nodes[x.0].value;
        if xs.shape.len() != 1 {
            return Err(Error::shape("softmax", format!("want vector, got {:?}", xs.shape)));
        }
        let hi = xs.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = xs.data.iter().map(|&v| (v - hi).exp()).collect();
        let z: f64 = exps.iter().sum();
        let y: Vec<f64> = exps.iter().map(|&e| e / z).collect();
        let shape = xs.shape.clone();
        let needs = self.needs(x);
        let label = self.auto("softmax");
        self.push(Op::Softmax { x }, Tensor::new(shape, y)?, needs, label)
    }

    /// Stacks k same-shape tensors along a new trailing axis.
    pub fn stack_last(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::shape("stack_last", "no parts".to_string()));
        }
        let base = self.nodes[parts[0].0].value.shape.clone();
        for &p in parts {
            if self.nodes[p.0].value.shape != base {
                return Err(Error::shape(
                    "stack_last",
                    format!("{:?} vs {:?}", self.nodes[p.0].value.shape, base),
                ));
            }
        }
        let k = parts.len();
        let numel = self.nodes[parts[0].0].value.numel();
        let mut data = vec![0.0; numel * k];
        for (j, &p) in parts.iter().enumerate() {
            for (i, &v) in self.nodes[p.0].value.data.iter().enumerate() {
                data[i * k + j] = v;
            }
        }
        let mut shape = base;
        shape.push(k);
        let needs = parts.iter().any(|&p| self.needs(p));
        let label = self.auto("stack_last");
        self.push(
            Op::StackLast { parts: parts.to_vec() },
            Tensor::new(shape, data)?,
            needs,
            label,
        )
    }

    /// Extracts one plane of a [C,H,W,D] block as a 2-D tensor, with the
    /// same orientation conventions as the volume slicing helpers.
    /// `index` is 1-based.
    pub fn plane_slice(
        &mut self,
        x: NodeId,
        plane: PlaneSelector,
        index: usize,
        channel: usize,
    ) -> Result<NodeId> {
        let xs = &self.nodes[x.0].value;
        if xs.shape.len() != 4 {
            return Err(Error::shape(
                "plane_slice",
                format!("want [C,H,W,D], got {:?}", xs.shape),
            ));
        }
        let [c, h, w, d] = [xs.shape[0], xs.shape[1], xs.shape[2], xs.shape[3]];
        if channel >= c {
            return Err(Error::index("plane_slice", format!("channel {channel} of {c}")));
        }
        let count = match plane {
            PlaneSelector::Axial => d,
            PlaneSelector::Coronal => h,
            PlaneSelector::Sagittal => w,
        };
        if index == 0 || index > count {
            return Err(Error::index(
                "plane_slice",
                format!("slice {index} of {count} on {}", plane.name()),
            ));
        }
        let s = index - 1;
        let flat = |hh: usize, ww: usize, dd: usize| ((channel * h + hh) * w + ww) * d + dd;
        let (rows, cols, data) = match plane {
            PlaneSelector::Axial => {
                let mut out = Vec::with_capacity(h * w);
                for hh in 0..h {
                    for ww in 0..w {
                        out.push(xs.data[flat(hh, ww, s)]);
                    }
                }
                (h, w, out)
            }
            PlaneSelector::Coronal => {
                let mut out = Vec::with_capacity(w * d);
                for ww in 0..w {
                    for dd in 0..d {
                        out.push(xs.data[flat(s, ww, dd)]);
                    }
                }
                (w, d, out)
            }
            PlaneSelector::Sagittal => {
                let mut out = Vec::with_capacity(h * d);
                for hh in 0..h {
                    for dd in 0..d {
                        out.push(xs.data[flat(hh, s, dd)]);
                    }
                }
                (h, d, out)
            }
        };
        let needs = self.needs(x);
        let label = self.auto("plane_slice");
        self.push(
            Op::PlaneSlice { x, plane, index, channel },
            Tensor::new(vec![rows, cols], data)?,
            needs,
            label,
        )
    }

    /// Forward difference along a spatial axis (1 = H, 2 = W, 3 = D) of
    /// a [C,H,W,D] block; the differenced axis shrinks by one.
    pub fn delta_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let xs = &self.nodes[x.0].value;
        if xs.shape.len() != 4 || !(1..=3).contains(&axis) {
            return Err(Error::shape(
                "delta_axis",
                format!("want [C,H,W,D] and axis 1..3, got {:?} axis {axis}", xs.shape),
            ));
        }
        let dims = [xs.shape[0], xs.shape[1], xs.shape[2], xs.shape[3]];
        if dims[axis] < 2 {
            return Err(Error::shape(
                "delta_axis",
                format!("axis {axis} extent {} too short to difference", dims[axis]),
            ));
        }
        let mut od = dims;
        od[axis] -= 1;
        let (so, si) = (kernels::strides(od), kernels::strides(dims));
        let mut data = vec![0.0; od.iter().product()];
        for c in 0..od[0] {
            for h in 0..od[1] {
                for w in 0..od[2] {
                    for d in 0..od[3] {
                        let mut hi = [c, h, w, d];
                        hi[axis] += 1;
                        data[c * so[0] + h * so[1] + w * so[2] + d * so[3]] = xs.data[hi[0]
                            * si[0]
                            + hi[1] * si[1]
                            + hi[2] * si[2]
                            + hi[3] * si[3]]
                            - xs.data[c * si[0] + h * si[1] + w * si[2] + d * si[3]];
                    }
                }
            }
        }
        let needs = self.needs(x);
        let label = self.auto("delta_axis");
        self.push(Op::DeltaAxis { x, axis }, Tensor::new(od.to_vec(), data)?, needs, label)
    }

    /// Separable valid-mode Gaussian blur over all three spatial axes of
    /// a [C,H,W,D] block.
    pub fn gauss_blur3(&mut self, x: NodeId, taps: &[f64]) -> Result<NodeId> {
        let xs = &self.nodes[x.0].value;
        if xs.shape.len() != 4 {
            return Err(Error::shape(
                "gauss_blur3",
                format!("want [C,H,W,D], got {:?}", xs.shape),
            ));
        }
        let dims = [xs.shape[0], xs.shape[1], xs.shape[2], xs.shape[3]];
        let (data, od) = kernels::blur3d_valid(&xs.data, dims, taps)?;
        let needs = self.needs(x);
        let label = self.auto("gauss_blur3");
        self.push(
            Op::GaussBlur3 { x, taps: taps.to_vec() },
            Tensor::new(od.to_vec(), data)?,
            needs,
            label,
        )
    }

    pub fn avgpool3d_half(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = &self.nodes[x.0].value;
        if xs.shape.len() != 4 {
            return Err(Error::shape(
                "avgpool3d",
                format!("want [C,H,W,D], got {:?}", xs.shape),
            ));
        }
        let dims = [xs.shape[0], xs.shape[1], xs.shape[2], xs.shape[3]];
        let (data, od) = kernels::avgpool3d_half_fwd(&xs.data, dims)?;
        let needs = self.needs(x);
        let label = self.auto("avgpool3d");
        self.push(Op::AvgPool3dHalf { x }, Tensor::new(od.to_vec(), data)?, needs, label)
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate, so two
    /// backward calls from the same loss double the leaf gradients.
    pub fn backward(&self, loss: NodeId) -> Result<Grads> {
        let lv = &self.nodes[loss.0].value;
        if lv.shape != vec![1] {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", lv.shape),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            if !node.needs_grad {
                continue;
            }
            self.scatter(i, &gy, &mut grads)?;
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFinite {
                        node: format!("grad of {}", self.nodes[i].label),
                    });
                }
            }
        }
        Ok(Grads(grads))
    }

    fn scatter(&self, i: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let val = |id: NodeId| &self.nodes[id.0].value;
        let slot = |id: NodeId, grads: &mut [Option<Vec<f64>>]| -> bool {
            if !self.nodes[id.0].needs_grad {
                return false;
            }
            if grads[id.0].is_none() {
                grads[id.0] = Some(vec![0.0; self.nodes[id.0].value.numel()]);
            }
            true
        };
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let (out, inn) = (wv.shape[0], wv.shape[1]);
                if slot(*x, grads) {
                    let gx = grads[x.0].as_mut().unwrap();
                    for o in 0..out {
                        let g = gy[o];
                        let row = &wv.data[o * inn..(o + 1) * inn];
                        for j in 0..inn {
                            gx[j] += g * row[j];
                        }
                    }
                }
                if slot(*w, grads) {
                    let gw = grads[w.0].as_mut().unwrap();
                    for o in 0..out {
                        let g = gy[o];
                        for j in 0..inn {
                            gw[o * inn + j] += g * xv.data[j];
                        }
                    }
                }
                if let Some(b) = b {
                    if slot(*b, grads) {
                        let gb = grads[b.0].as_mut().unwrap();
                        for o in 0..out {
                            gb[o] += gy[o];
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (xv, wv) = (val(*x), val(*w));
                let (ci, h, wd) = (xv.shape[0], xv.shape[1], xv.shape[2]);
                let (co, kh, kw) = (wv.shape[0], wv.shape[2], wv.shape[3]);
                let wx = slot(*x, grads);
                let ww = slot(*w, grads);
                let wb = b.map(|b| slot(b, grads)).unwrap_or(false);
                let (mut gx, mut gw, mut gb) = take3(grads, *x, *w, *b, wx, ww, wb);
                kernels::conv2d_bwd(
                    &xv.data, ci, h, wd, &wv.data, co, kh, kw, *stride, *pad, gy,
                    gx.as_deref_mut(), gw.as_deref_mut(), gb.as_deref_mut(),
                )?;
                put3(grads, *x, *w, *b, gx, gw, gb);
            }
            Op::TConv2d { x, w, b, stride, pad } => {
                let (xv, wv) = (val(*x), val(*w));
                let (ci, h, wd) = (xv.shape[0], xv.shape[1], xv.shape[2]);
                let (co, kh, kw) = (wv.shape[1], wv.shape[2], wv.shape[3]);
                let wx = slot(*x, grads);
                let ww = slot(*w, grads);
                let wb = b.map(|b| slot(b, grads)).unwrap_or(false);
                let (mut gx, mut gw, mut gb) = take3(grads, *x, *w, *b, wx, ww, wb);
                kernels::tconv2d_bwd(
                    &xv.data, ci, h, wd, &wv.data, co, kh, kw, *stride, *pad, gy,
                    gx.as_deref_mut(), gw.as_deref_mut(), gb.as_deref_mut(),
                )?;
                put3(grads, *x, *w, *b, gx, gw, gb);
            }
            Op::AvgPool2d { x } => {
                let xv = val(*x);
                if slot(*x, grads) {
                    kernels::avgpool2d_half_bwd(
                        gy,
                        xv.shape[0],
                        xv.shape[1],
                        xv.shape[2],
                        grads[x.0].as_mut().unwrap(),
                    );
                }
            }
            Op::Gap2d { x } => {
                let xv = val(*x);
                let (c, area) = (xv.shape[0], xv.shape[1] * xv.shape[2]);
                if slot(*x, grads) {
                    let gx = grads[x.0].as_mut().unwrap();
                    for ic in 0..c {
                        let g = gy[ic] / area as f64;
                        for j in 0..area {
                            gx[ic * area + j] += g;
                        }
                    }
                }
            }
            Op::Relu { x } => {
                let xv = val(*x);
                if slot(*x, grads) {
                    let gx = grads[x.0].as_mut().unwrap();
                    for (j, &v) in xv.data.iter().enumerate() {
                        if v > 0.0 {
                            gx[j] += gy[j];
                        }
                    }
                }
            }
            Op::Tanh { x } => {
                let yv = &node.value;
                if slot(*x, grads) {
                    let gx = grads[x.0].as_mut().unwrap();
                    for (j, &y) in yv.data.iter().enumerate() {
                        gx[j] += gy[j] * (1.0 - y * y);
                    }
                }
            }
            Op::Sigmoid { x } => {
                let yv = &node.value;
                if slot(*x, grads) {
                    let gx = grads[x.0].as_mut().unwrap();
                    for (j, &y) in yv.data.iter().enumerate() {
                        gx[j] += gy[j] * y * (1.0 - y);
                    }
                }
            }
            Op::Exp { x } => {
                let yv = &node.value;
                if slot(*x, grads) {
                    let gx = grads[x.0].as_mut().unwrap();
                    for (j, &y) in yv.data.iter().enumerate() {
                        gx[j] += gy[j] * y;
                    }
                }
            }
            Op::Sqrt { x } => {
                let yv = &node.value;
                if slot(*x, grads) {
                    let gx = grads[x.0].as_mut().unwrap();
                    for (j, &y) in yv.data.iter().enumerate() {
                        gx[j] += gy[j] * 0.5 / y;
                    }
                }
            }
            Op::Abs { x } => {
                let xv = val(*x);
                if slot(*x, grads) {
                    let gx = grads[x.0].as_mut().unwrap();
                    for (j, &v) in xv.data.iter().enumerate() {
                        gx[j] += gy[j] * if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 };
                    }
                }
            }
            Op::ClampMin { x, floor } => {
                let xv = val(*x);
                if slot(*x, grads) {
                    let gx = grads[x.0].as_mut().unwrap();
                    for (j, &v) in xv.data.iter().enumerate() {
                        if v > *floor {
                            gx[j] += gy[j];
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for id in [*a, *b] {
                    if slot(id, grads) {
                        let g = grads[id.0].as_mut().unwrap();
                        for (j, &v) in gy.iter().enumerate() {
                            g[j] += v;
                        }
                    }
                }
            }
            Op::Sub { a, b } => {
                if slot(*a, grads) {
                    let g = grads[a.0].as_mut().unwrap();
                    for (j, &v) in gy.iter().enumerate() {
                        g[j] += v;
                    }
                }
                if slot(*b, grads) {
                    let g = grads[b.0].as_mut().unwrap();
                    for (j, &v) in gy.iter().enumerate() {
                        g[j] -= v;
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (val(*a).data.clone(), val(*b).data.clone());
                if slot(*a, grads) {
                    let g = grads[a.0].as_mut().unwrap();
                    for j in 0..gy.len() {
                        g[j] += gy[j] * bv[j];
                    }
                }
                if slot(*b, grads) {
                    let g = grads[b.0].as_mut().unwrap();
                    for j in 0..gy.len() {
                        g[j] += gy[j] * av[j];
                    }
                }
            }
            Op::Div { a, b } => {
                let (av, bv) = (val(*a).data.clone(), val(*b).data.clone());
                if slot(*a, grads) {
                    let g = grads[a.0].as_mut().unwrap();
                    for j in 0..gy.len() {
                        g[j] += gy[j] / bv[j];
                    }
                }
                if slot(*b, grads) {
                    let g = grads[b.0].as_mut().unwrap();
                    for j in 0..gy.len() {
                        g[j] -= gy[j] * av[j] / (bv[j] * bv[j]);
                    }
                }
            }
            Op::Scale { x, c } => {
                if slot(*x, grads) {
                    let g = grads[x.0].as_mut().unwrap();
                    for (j, &v) in gy.iter().enumerate() {
                        g[j] += v * c;
                    }
                }
            }
            Op::Shift { x, .. } => {
                if slot(*x, grads) {
                    let g = grads[x.0].as_mut().unwrap();
                    for (j, &v) in gy.iter().enumerate() {
                        g[j] += v;
                    }
                }
            }
            Op::PowScalar { x, p } => {
                let xv = val(*x);
                if slot(*x, grads) {
                    let g = grads[x.0].as_mut().unwrap();
                    for (j, &v) in xv.data.iter().enumerate() {
                        g[j] += gy[j] * p * v.powf(p - 1.0);
                    }
                }
            }
            Op::AddChanBias { x, v } => {
                let (c, area) = {
                    let xv = val(*x);
                    (xv.shape[0], xv.shape[1] * xv.shape[2])
                };
                if slot(*x, grads) {
                    let g = grads[x.0].as_mut().unwrap();
                    for (j, &gv) in gy.iter().enumerate() {
                        g[j] += gv;
                    }
                }
                if slot(*v, grads) {
                    let g = grads[v.0].as_mut().unwrap();
                    for ic in 0..c {
                        let mut acc = 0.0;
                        for j in 0..area {
                            acc += gy[ic * area + j];
                        }
                        g[ic] += acc;
                    }
                }
            }
            Op::MulChanGain { x, v } => {
                let (c, area) = {
                    let xv = val(*x);
                    (xv.shape[0], xv.shape[1] * xv.shape[2])
                };
                if slot(*x, grads) {
                    let vv = val(*v).data.clone();
                    let g = grads[x.0].as_mut().unwrap();
                    for ic in 0..c {
                        let gain = vv[ic];
                        for j in 0..area {
                            g[ic * area + j] += gy[ic * area + j] * gain;
                        }
                    }
                }
                if slot(*v, grads) {
                    let xv = val(*x).data.clone();
                    let g = grads[v.0].as_mut().unwrap();
                    for ic in 0..c {
                        let mut acc = 0.0;
                        for j in 0..area {
                            acc += gy[ic * area + j] * xv[ic * area + j];
                        }
                        g[ic] += acc;
                    }
                }
            }
            Op::Concat { parts } => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).numel();
                    if slot(p, grads) {
                        let g = grads[p.0].as_mut().unwrap();
                        for j in 0..n {
                            g[j] += gy[off + j];
                        }
                    }
                    off += n;
                }
            }
            Op::Reshape { x } => {
                if slot(*x, grads) {
                    let g = grads[x.0].as_mut().unwrap();
                    for (j, &v) in gy.iter().enumerate() {
                        g[j] += v;
                    }
                }
            }
            Op::Sum { x } => {
                if slot(*x, grads) {
                    let g = grads[x.0].as_mut().unwrap();
                    for v in g.iter_mut() {
                        *v += gy[0];
                    }
                }
            }
            Op::Mean { x } => {
                let n = val(*x).numel() as f64;
                if slot(*x, grads) {
                    let g = grads[x.0].as_mut().unwrap();
                    let gm = gy[0] / n;
                    for v in g.iter_mut() {
                        *v += gm;
                    }
                }
            }
            Op::RowBroadcast { x, rows } => {
                let d = val(*x).shape[0];
                if slot(*x, grads) {
                    let g = grads[x.0].as_mut().unwrap();
                    for r in 0..*rows {
                        for j in 0..d {
                            g[j] += gy[r * d + j];
                        }
                    }
                }
            }
            Op::RowSum { x } => {
                let (n, d) = {
                    let xv = val(*x);
                    (xv.shape[0], xv.shape[1])
                };
                if slot(*x, grads) {
                    let g = grads[x.0].as_mut().unwrap();
                    for r in 0..n {
                        for j in 0..d {
                            g[r * d + j] += gy[r];
                        }
                    }
                }
            }
            Op::Softmax { x } => {
                let yv = &node.value;
                if slot(*x, grads) {
                    let dot: f64 = gy.iter().zip(yv.data.iter()).map(|(g, y)| g * y).sum();
                    let g = grads[x.0].as_mut().unwrap();
                    for (j, &y) in yv.data.iter().enumerate() {
                        g[j] += y * (gy[j] - dot);
                    }
                }
            }
            Op::StackLast { parts } => {
                let k = parts.len();
                for (j, &p) in parts.iter().enumerate() {
                    let n = val(p).numel();
                    if slot(p, grads) {
                        let g = grads[p.0].as_mut().unwrap();
                        for i in 0..n {
                            g[i] += gy[i * k + j];
                        }
                    }
                }
            }
            Op::PlaneSlice { x, plane, index, channel } => {
                let xv = val(*x);
                let [_, h, w, d] = [xv.shape[0], xv.shape[1], xv.shape[2], xv.shape[3]];
                let s = index - 1;
                if slot(*x, grads) {
                    let g = grads[x.0].as_mut().unwrap();
                    let flat = |hh: usize, ww: usize, dd: usize| {
                        ((channel * h + hh) * w + ww) * d + dd
                    };
                    match plane {
                        PlaneSelector::Axial => {
                            for hh in 0..h {
                                for ww in 0..w {
                                    g[flat(hh, ww, s)] += gy[hh * w + ww];
                                }
                            }
                        }
                        PlaneSelector::Coronal => {
                            for ww in 0..w {
                                for dd in 0..d {
                                    g[flat(s, ww, dd)] += gy[ww * d + dd];
                                }
                            }
                        }
                        PlaneSelector::Sagittal => {
                            for hh in 0..h {
                                for dd in 0..d {
                                    g[flat(hh, s, dd)] += gy[hh * d + dd];
                                }
                            }
                        }
                    }
                }
            }
            Op::DeltaAxis { x, axis } => {
                let xv = val(*x);
                let dims = [xv.shape[0], xv.shape[1], xv.shape[2], xv.shape[3]];
                let mut od = dims;
                od[*axis] -= 1;
                let (so, si) = (kernels::strides(od), kernels::strides(dims));
                if slot(*x, grads) {
                    let g = grads[x.0].as_mut().unwrap();
                    for c in 0..od[0] {
                        for h in 0..od[1] {
                            for w in 0..od[2] {
                                for d in 0..od[3] {
                                    let gv = gy[c * so[0] + h * so[1] + w * so[2] + d * so[3]];
                                    let mut hi = [c, h, w, d];
                                    hi[*axis] += 1;
                                    g[hi[0] * si[0] + hi[1] * si[1] + hi[2] * si[2] + hi[3] * si[3]] += gv;
                                    g[c * si[0] + h * si[1] + w * si[2] + d * si[3]] -= gv;
                                }
                            }
                        }
                    }
                }
            }
            Op::GaussBlur3 { x, taps } => {
                let xv = val(*x);
                let d0 = [xv.shape[0], xv.shape[1], xv.shape[2], xv.shape[3]];
                let k = taps.len();
                let mut d1 = d0;
                d1[1] = d0[1] - k + 1;
                let mut d2 = d1;
                d2[2] = d1[2] - k + 1;
                if slot(*x, grads) {
                    let mut g2 = vec![0.0; d2.iter().product()];
                    kernels::blur_axis_valid_bwd(gy, d2, 3, taps, &mut g2);
                    let mut g1 = vec![0.0; d1.iter().product()];
                    kernels::blur_axis_valid_bwd(&g2, d1, 2, taps, &mut g1);
                    kernels::blur_axis_valid_bwd(&g1, d0, 1, taps, grads[x.0].as_mut().unwrap());
                }
            }
            Op::AvgPool3dHalf { x } => {
                let xv = val(*x);
                let dims = [xv.shape[0], xv.shape[1], xv.shape[2], xv.shape[3]];
                if slot(*x, grads) {
                    kernels::avgpool3d_half_bwd(gy, dims, grads[x.0].as_mut().unwrap());
                }
            }
        }
        Ok(())
    }
}

type Buf = Option<Vec<f64>>;

fn take3(
    grads: &mut [Option<Vec<f64>>],
    x: NodeId,
    w: NodeId,
    b: Option<NodeId>,
    wx: bool,
    ww: bool,
    wb: bool,
) -> (Buf, Buf, Buf) {
    let gx = if wx { grads[x.0].take() } else { None };
    let gw = if ww { grads[w.0].take() } else { None };
    let gb = match (b, wb) {
        (Some(b), true) => grads[b.0].take(),
        _ => None,
    };
    (gx, gw, gb)
}

fn put3(
    grads: &mut [Option<Vec<f64>>],
    x: NodeId,
    w: NodeId,
    b: Option<NodeId>,
    gx: Buf,
    gw: Buf,
    gb: Buf,
) {
    if gx.is_some() {
        grads[x.0] = gx;
    }
    if gw.is_some() {
        grads[w.0] = gw;
    }
    if let (Some(b), Some(g)) = (b, gb) {
        grads[b.0] = Some(g);
    }
}
