//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value,
//! and [`Graph::backward`] walks the tape in reverse. Only the handful of
//! operations the denoiser, the feature extractor and the losses need are
//! provided. Shapes are checked with assertions; callers validate user
//! input before building a graph.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Silu(Var),
    Tanh(Var),
    Add(Var, Var),
    AddChannel {
        x: Var,
        v: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    ConcatChannels(Var, Var),
    Upsample2(Var),
    MatMul(Var, Var),
    Transpose(Var),
    SoftmaxRows(Var),
    Scale(Var, f64),
    Reshape(Var),
    MulConst(Var, Vec<f64>),
    AddConst(Var),
    Mse {
        x: Var,
        target: Vec<f64>,
    },
    CosineToConst {
        x: Var,
        u: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every node that required them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads[v.0].take()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "not a scalar");
        val[0]
    }

    fn push(&mut self, value: Vec<f64>, shape: Vec<usize>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            value,
            shape,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Vec<f64>, shape: &[usize]) -> Var {
        self.push(value, shape.to_vec(), Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Vec<f64>, shape: &[usize]) -> Var {
        self.push(value, shape.to_vec(), Op::Leaf, false)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (xs, ws) = (self.shape(x), self.shape(w));
        assert_eq!(xs.len(), 3);
        assert_eq!(ws.len(), 4);
        assert_eq!(xs[0], ws[1], "conv input channels");
        let (ci, h, wd) = (xs[0], xs[1], xs[2]);
        let (co, k) = (ws[0], ws[2]);
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; co * ho * wo];
        if let Some(b) = b {
            let bv = self.value(b);
            assert_eq!(bv.len(), co);
            for (o, plane) in out.chunks_mut(ho * wo).enumerate() {
                plane.fill(bv[o]);
            }
        }
        conv_forward(
            self.value(x),
            self.value(w),
            &mut out,
            ConvDims {
                ci,
                h,
                w: wd,
                co,
                k,
                stride,
                pad,
                ho,
                wo,
            },
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(
            out,
            vec![co, ho, wo],
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            rg,
        )
    }

    /// Group normalization over axis 0 split into `groups`, remaining axes
    /// flattened. `gamma` and `beta` have one entry per channel.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Var {
        let shape = self.shape(x).to_vec();
        let c = shape[0];
        assert!(
            groups > 0 && c.is_multiple_of(groups),
            "groups must divide channels"
        );
        let plane = self.value(x).len() / c;
        let per_group = c / groups * plane;
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        assert_eq!(gv.len(), c);
        assert_eq!(bv.len(), c);
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; groups];
        for g in 0..groups {
            let seg = &xv[g * per_group..(g + 1) * per_group];
            let mean = seg.iter().sum::<f64>() / per_group as f64;
            let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per_group as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[g] = r;
            for (o, v) in xhat[g * per_group..(g + 1) * per_group].iter_mut().zip(seg) {
                *o = (v - mean) * r;
            }
        }
        let mut out = vec![0.0; xv.len()];
        for ch in 0..c {
            for i in ch * plane..(ch + 1) * plane {
                out[i] = gv[ch] * xhat[i] + bv[ch];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            out,
            shape,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            },
            rg,
        )
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v * sigmoid(v)).collect();
        let rg = self.rg(x);
        self.push(out, self.shape(x).to_vec(), Op::Silu(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| v.tanh()).collect();
        let rg = self.rg(x);
        self.push(out, self.shape(x).to_vec(), Op::Tanh(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shapes");
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(out, self.shape(a).to_vec(), Op::Add(a, b), rg)
    }

    /// Adds `v[c]` to every element of channel `c` (axis 0).
    pub fn add_channel(&mut self, x: Var, v: Var) -> Var {
        let c = self.shape(x)[0];
        assert_eq!(self.value(v).len(), c, "channel vector length");
        let plane = self.value(x).len() / c;
        let vv = self.value(v);
        let out = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &xv)| xv + vv[i / plane])
            .collect();
        let rg = self.rg(x) || self.rg(v);
        self.push(out, self.shape(x).to_vec(), Op::AddChannel { x, v }, rg)
    }

    /// `w @ x + b` for a vector `x` and a row-major `(out, in)` matrix `w`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let ws = self.shape(w);
        let (o, i) = (ws[0], ws[1]);
        let xv = self.value(x);
        assert_eq!(xv.len(), i, "linear input length");
        let wv = self.value(w);
        let bv = self.value(b);
        let out = (0..o)
            .map(|r| bv[r] + dot(&wv[r * i..(r + 1) * i], xv))
            .collect();
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(out, vec![o], Op::Linear { x, w, b }, rg)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa[1..], sb[1..], "concat spatial shapes");
        let mut shape = sa.to_vec();
        shape[0] += sb[0];
        let mut out = self.value(a).to_vec();
        out.extend_from_slice(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, shape, Op::ConcatChannels(a, b), rg)
    }

    /// Nearest-neighbour 2x upsampling of a `(C, H, W)` array.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (c, h, w) = (s[0], s[1], s[2]);
        let xv = self.value(x);
        let mut out = vec![0.0; c * 4 * h * w];
        for ch in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(ch * 2 * h + y) * 2 * w + xx] = xv[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        let rg = self.rg(x);
        self.push(out, vec![c, 2 * h, 2 * w], Op::Upsample2(x), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa.len(), 2);
        assert_eq!(sb.len(), 2);
        assert_eq!(sa[1], sb[0], "matmul inner dims");
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, vec![m, n], Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        assert_eq!(s.len(), 2);
        let (r, c) = (s[0], s[1]);
        let out = transpose(self.value(x), r, c);
        let rg = self.rg(x);
        self.push(out, vec![c, r], Op::Transpose(x), rg)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let cols = s[1];
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(cols) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let rg = self.rg(x);
        self.push(out, s, Op::SoftmaxRows(x), rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * s).collect();
        let rg = self.rg(x);
        self.push(out, self.shape(x).to_vec(), Op::Scale(x, s), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        assert_eq!(shape.iter().product::<usize>(), self.value(x).len());
        let out = self.value(x).to_vec();
        let rg = self.rg(x);
        self.push(out, shape.to_vec(), Op::Reshape(x), rg)
    }

    /// Elementwise product with a constant array.
    pub fn mul_const(&mut self, x: Var, c: Vec<f64>) -> Var {
        assert_eq!(c.len(), self.value(x).len());
        let out = self.value(x).iter().zip(&c).map(|(a, b)| a * b).collect();
        let rg = self.rg(x);
        self.push(out, self.shape(x).to_vec(), Op::MulConst(x, c), rg)
    }

    /// Elementwise sum with a constant array.
    pub fn add_const(&mut self, x: Var, c: &[f64]) -> Var {
        assert_eq!(c.len(), self.value(x).len());
        let out = self.value(x).iter().zip(c).map(|(a, b)| a + b).collect();
        let rg = self.rg(x);
        self.push(out, self.shape(x).to_vec(), Op::AddConst(x), rg)
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, x: Var, target: Vec<f64>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.len(), target.len(), "mse lengths");
        let n = xv.len() as f64;
        let value = xv
            .iter()
            .zip(&target)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        let rg = self.rg(x);
        self.push(vec![value], vec![1], Op::Mse { x, target }, rg)
    }

    /// `1 - cos(x, u)` for a constant reference vector `u`.
    pub fn cosine_distance_to(&mut self, x: Var, u: Vec<f64>) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != u.len() {
            return Err(Error::Shape(format!(
                "feature lengths {} vs {}",
                xv.len(),
                u.len()
            )));
        }
        let value = cosine_distance_raw(xv, &u)?;
        let rg = self.rg(x);
        Ok(self.push(vec![value], vec![1], Op::CosineToConst { x, u }, rg))
    }

    /// Reverse pass from the scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(
            self.nodes[root.0].value.len(),
            1,
            "backward needs a scalar root"
        );
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let (lo, hi) = grads.split_at_mut(i);
            let Some(g) = hi[0].take() else { continue };
            self.backprop_node(node, &g, lo);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, node: &Node, g: &[f64], acc: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let want = |v: Var| nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let xs = &nodes[x.0].shape;
                let ws = &nodes[w.0].shape;
                let dims = ConvDims {
                    ci: xs[0],
                    h: xs[1],
                    w: xs[2],
                    co: ws[0],
                    k: ws[2],
                    stride: *stride,
                    pad: *pad,
                    ho: node.shape[1],
                    wo: node.shape[2],
                };
                if let Some(b) = b.filter(|&b| want(b)) {
                    let plane = dims.ho * dims.wo;
                    let gb = slot(acc, b, dims.co);
                    for (o, gp) in g.chunks(plane).enumerate() {
                        gb[o] += gp.iter().sum::<f64>();
                    }
                }
                if want(*w) {
                    let gw = slot(acc, *w, nodes[w.0].value.len());
                    conv_backward_weight(&nodes[x.0].value, g, gw, dims);
                }
                if want(*x) {
                    let gx = slot(acc, *x, nodes[x.0].value.len());
                    conv_backward_input(&nodes[w.0].value, g, gx, dims);
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            } => {
                let c = node.shape[0];
                let plane = g.len() / c;
                let gv = &nodes[gamma.0].value;
                if want(*gamma) {
                    let gg = slot(acc, *gamma, c);
                    for (ch, acc_ch) in gg.iter_mut().enumerate() {
                        let r = ch * plane..(ch + 1) * plane;
                        *acc_ch += dot(&g[r.clone()], &xhat[r]);
                    }
                }
                if want(*beta) {
                    let gb = slot(acc, *beta, c);
                    for ch in 0..c {
                        gb[ch] += g[ch * plane..(ch + 1) * plane].iter().sum::<f64>();
                    }
                }
                if want(*x) {
                    let per_group = g.len() / groups;
                    let n = per_group as f64;
                    let dxhat: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(i, &gi)| gi * gv[i / plane])
                        .collect();
                    let gx = slot(acc, *x, g.len());
                    for (grp, &rs) in rstd.iter().enumerate().take(*groups) {
                        let r = grp * per_group..(grp + 1) * per_group;
                        let sum_d: f64 = dxhat[r.clone()].iter().sum();
                        let sum_dx = dot(&dxhat[r.clone()], &xhat[r.clone()]);
                        let k = rs / n;
                        for i in r {
                            gx[i] += k * (n * dxhat[i] - sum_d - xhat[i] * sum_dx);
                        }
                    }
                }
            }
            Op::Silu(x) => {
                let gx = slot(acc, *x, g.len());
                for ((o, &v), &gi) in gx.iter_mut().zip(&nodes[x.0].value).zip(g) {
                    let s = sigmoid(v);
                    *o += gi * s * (1.0 + v * (1.0 - s));
                }
            }
            Op::Tanh(x) => {
                let gx = slot(acc, *x, g.len());
                for ((o, &y), &gi) in gx.iter_mut().zip(&node.value).zip(g) {
                    *o += gi * (1.0 - y * y);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if want(v) {
                        add_into(slot(acc, v, g.len()), g);
                    }
                }
            }
            Op::AddChannel { x, v } => {
                if want(*x) {
                    add_into(slot(acc, *x, g.len()), g);
                }
                if want(*v) {
                    let c = nodes[v.0].value.len();
                    let plane = g.len() / c;
                    let gv = slot(acc, *v, c);
                    for (ch, gp) in g.chunks(plane).enumerate() {
                        gv[ch] += gp.iter().sum::<f64>();
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (o, i) = (nodes[w.0].shape[0], nodes[w.0].shape[1]);
                if want(*b) {
                    add_into(slot(acc, *b, o), g);
                }
                if want(*w) {
                    let xv = &nodes[x.0].value;
                    let gw = slot(acc, *w, o * i);
                    for r in 0..o {
                        for (dst, &xi) in gw[r * i..(r + 1) * i].iter_mut().zip(xv) {
                            *dst += g[r] * xi;
                        }
                    }
                }
                if want(*x) {
                    let wv = &nodes[w.0].value;
                    let gx = slot(acc, *x, i);
                    for r in 0..o {
                        for (dst, &wi) in gx.iter_mut().zip(&wv[r * i..(r + 1) * i]) {
                            *dst += g[r] * wi;
                        }
                    }
                }
            }
            Op::ConcatChannels(a, b) => {
                let na = nodes[a.0].value.len();
                if want(*a) {
                    add_into(slot(acc, *a, na), &g[..na]);
                }
                if want(*b) {
                    add_into(slot(acc, *b, g.len() - na), &g[na..]);
                }
            }
            Op::Upsample2(x) => {
                let s = &nodes[x.0].shape;
                let (c, h, w) = (s[0], s[1], s[2]);
                let gx = slot(acc, *x, c * h * w);
                for ch in 0..c {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            gx[(ch * h + y / 2) * w + xx / 2] += g[(ch * 2 * h + y) * 2 * w + xx];
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                if want(*a) {
                    // dA = dC @ B^T
                    let bt = transpose(&nodes[b.0].value, k, n);
                    matmul_acc(g, &bt, slot(acc, *a, m * k), m, n, k);
                }
                if want(*b) {
                    // dB = A^T @ dC
                    let at = transpose(&nodes[a.0].value, m, k);
                    matmul_acc(&at, g, slot(acc, *b, k * n), k, m, n);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (node.shape[0], node.shape[1]);
                let gt = transpose(g, r, c);
                add_into(slot(acc, *x, g.len()), &gt);
            }
            Op::SoftmaxRows(x) => {
                let cols = node.shape[1];
                let gx = slot(acc, *x, g.len());
                for ((dst, y), gr) in gx
                    .chunks_mut(cols)
                    .zip(node.value.chunks(cols))
                    .zip(g.chunks(cols))
                {
                    let s = dot(y, gr);
                    for ((d, &yi), &gi) in dst.iter_mut().zip(y).zip(gr) {
                        *d += yi * (gi - s);
                    }
                }
            }
            Op::Scale(x, s) => {
                let gx = slot(acc, *x, g.len());
                for (d, &gi) in gx.iter_mut().zip(g) {
                    *d += gi * s;
                }
            }
            Op::Reshape(x) | Op::AddConst(x) => add_into(slot(acc, *x, g.len()), g),
            Op::MulConst(x, c) => {
                let gx = slot(acc, *x, g.len());
                for ((d, &gi), &ci) in gx.iter_mut().zip(g).zip(c) {
                    *d += gi * ci;
                }
            }
            Op::Mse { x, target } => {
                let xv = &nodes[x.0].value;
                let k = 2.0 * g[0] / xv.len() as f64;
                let gx = slot(acc, *x, xv.len());
                for ((d, &a), &t) in gx.iter_mut().zip(xv).zip(target) {
                    *d += k * (a - t);
                }
            }
            Op::CosineToConst { x, u } => {
                let xv = &nodes[x.0].value;
                let nx = dot(xv, xv).sqrt();
                let nu = dot(u, u).sqrt();
                let xu = dot(xv, u);
                let gx = slot(acc, *x, xv.len());
                for ((d, &xi), &ui) in gx.iter_mut().zip(xv).zip(u) {
                    let dcos = ui / (nx * nu) - xu * xi / (nx * nx * nx * nu);
                    *d -= g[0] * dcos;
                }
            }
        }
    }
}

fn slot(acc: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    acc[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn cosine_distance_raw(u: &[f64], v: &[f64]) -> Result<f64> {
    let nu = dot(u, u).sqrt();
    let nv = dot(v, v).sqrt();
    if nu == 0.0 || nv == 0.0 || !nu.is_finite() || !nv.is_finite() {
        return Err(Error::DegenerateFeature);
    }
    let cos = (dot(u, v) / (nu * nv)).clamp(-1.0, 1.0);
    Ok(1.0 - cos)
}

fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// `out += a(m,k) @ b(k,n)`.
fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
}

#[derive(Clone, Copy)]
struct ConvDims {
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvDims {
    /// Output index range along one axis for which the input tap
    /// `o * stride + kk - pad` lands inside `0..len`.
    fn valid(&self, kk: usize, len: usize, out_len: usize) -> std::ops::Range<usize> {
        let (s, p) = (self.stride as isize, self.pad as isize);
        let kk = kk as isize;
        let lo = ((p - kk).max(0) + s - 1) / s;
        let hi = ((len as isize - 1 + p - kk).div_euclid(s) + 1).clamp(0, out_len as isize);
        lo as usize..(hi as usize).max(lo as usize)
    }

    fn tap(&self, o: usize, kk: usize) -> usize {
        o * self.stride + kk - self.pad
    }
}

fn conv_forward(x: &[f64], w: &[f64], out: &mut [f64], d: ConvDims) {
    let kk2 = d.k * d.k;
    for o in 0..d.co {
        let oplane = &mut out[o * d.ho * d.wo..(o + 1) * d.ho * d.wo];
        for c in 0..d.ci {
            let iplane = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
            for ky in 0..d.k {
                let rows = d.valid(ky, d.h, d.ho);
                for kx in 0..d.k {
                    let wv = w[(o * d.ci + c) * kk2 + ky * d.k + kx];
                    let cols = d.valid(kx, d.w, d.wo);
                    for oy in rows.clone() {
                        let irow = &iplane[d.tap(oy, ky) * d.w..];
                        let orow = &mut oplane[oy * d.wo..(oy + 1) * d.wo];
                        if d.stride == 1 {
                            let off = d.tap(cols.start, kx);
                            for (o, &i) in orow[cols.clone()].iter_mut().zip(&irow[off..]) {
                                *o += wv * i;
                            }
                        } else {
                            for ox in cols.clone() {
                                orow[ox] += wv * irow[d.tap(ox, kx)];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_backward_input(w: &[f64], g: &[f64], gx: &mut [f64], d: ConvDims) {
    let kk2 = d.k * d.k;
    for o in 0..d.co {
        let gplane = &g[o * d.ho * d.wo..(o + 1) * d.ho * d.wo];
        for c in 0..d.ci {
            let xplane = &mut gx[c * d.h * d.w..(c + 1) * d.h * d.w];
            for ky in 0..d.k {
                let rows = d.valid(ky, d.h, d.ho);
                for kx in 0..d.k {
                    let wv = w[(o * d.ci + c) * kk2 + ky * d.k + kx];
                    let cols = d.valid(kx, d.w, d.wo);
                    for oy in rows.clone() {
                        let grow = &gplane[oy * d.wo..(oy + 1) * d.wo];
                        let xrow = &mut xplane[d.tap(oy, ky) * d.w..];
                        if d.stride == 1 {
                            let off = d.tap(cols.start, kx);
                            for (xi, &gi) in xrow[off..].iter_mut().zip(&grow[cols.clone()]) {
                                *xi += wv * gi;
                            }
                        } else {
                            for ox in cols.clone() {
                                xrow[d.tap(ox, kx)] += wv * grow[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_backward_weight(x: &[f64], g: &[f64], gw: &mut [f64], d: ConvDims) {
    let kk2 = d.k * d.k;
    for o in 0..d.co {
        let gplane = &g[o * d.ho * d.wo..(o + 1) * d.ho * d.wo];
        for c in 0..d.ci {
            let iplane = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
            for ky in 0..d.k {
                let rows = d.valid(ky, d.h, d.ho);
                for kx in 0..d.k {
                    let cols = d.valid(kx, d.w, d.wo);
                    let mut sum = 0.0;
                    for oy in rows.clone() {
                        let grow = &gplane[oy * d.wo..(oy + 1) * d.wo];
                        let irow = &iplane[d.tap(oy, ky) * d.w..];
                        if d.stride == 1 {
                            let off = d.tap(cols.start, kx);
                            sum += dot(&grow[cols.clone()], &irow[off..]);
                        } else {
                            for ox in cols.clone() {
                                sum += grow[ox] * irow[d.tap(ox, kx)];
                            }
                        }
                    }
                    gw[(o * d.ci + c) * kk2 + ky * d.k + kx] += sum;
                }
            }
        }
    }
}
