use std::collections::BTreeMap;
use std::sync::Arc;

use crate::linalg::{col2im, gemm, im2col};
use crate::{BilinearMap, ParamStore, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        // im2col of x, kept only when w needs a gradient
        cols: Option<Vec<f64>>,
    },
    Affine(Var, f64),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulBroadcast {
        x: Var,
        mask: Var,
    },
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Square(Var),
    Sqrt(Var),
    Abs(Var),
    Log(Var),
    Clamp(Var, f64, f64),
    FlipW(Var),
    Concat(Vec<Var>),
    Reshape(Var),
    Transpose(Var),
    MatMul(Var, Var),
    SoftmaxRows(Var),
    Upsample2(Var),
    Bilinear {
        x: Var,
        map: Arc<BilinearMap>,
    },
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records operations for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(Var, String)>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A leaf that receives a gradient.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf with no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Binds a named parameter from `store`. Frozen bindings behave as
    /// constants; trainable ones are reported by [`Tape::param_grads`].
    pub fn param(&mut self, store: &ParamStore, name: &str, trainable: bool) -> Var {
        let t = store.expect(name).clone();
        if trainable {
            let v = self.leaf(t);
            self.params.push((v, name.to_string()));
            v
        } else {
            self.constant(t)
        }
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xv = self.value(x);
        let (c, h, wd) = xv.dims3().expect("conv2d input must be [C,H,W]");
        let ws = self.value(w).shape().to_vec();
        assert!(
            ws.len() == 4 && ws[1] == c && ws[2] == ws[3],
            "conv2d weight {ws:?} incompatible with input channels {c}"
        );
        let (o, k) = (ws[0], ws[2]);
        let (cols, ho, wo) = im2col(xv.data(), (c, h, wd), k, stride, pad);
        let p = ho * wo;
        let mut out = vec![0.0; o * p];
        if let Some(b) = b {
            let bv = self.value(b).data();
            assert_eq!(bv.len(), o, "conv2d bias length");
            for (row, &bias) in out.chunks_mut(p).zip(bv) {
                row.fill(bias);
            }
        }
        gemm(
            o,
            c * k * k,
            p,
            self.value(w).data(),
            false,
            &cols,
            false,
            &mut out,
            1.0,
        );
        let mut deps = vec![x, w];
        deps.extend(b);
        let needs = self.any_grad(&deps);
        let keep_cols = self.nodes[w.0].needs_grad;
        let value = Tensor::new(&[o, ho, wo], out).unwrap();
        self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols: keep_cols.then_some(cols),
            },
            needs,
        )
    }

    /// `mul · x + add`, elementwise.
    pub fn affine(&mut self, x: Var, mul: f64, add: f64) -> Var {
        let v = self.value(x).map(|a| mul * a + add);
        let needs = self.any_grad(&[x]);
        self.push(v, Op::Affine(x, mul), needs)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.affine(x, factor, 0.0)
    }

    pub fn one_minus(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 1.0)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self
            .value(a)
            .zip_map(self.value(b), |x, y| x + y)
            .expect("add");
        let needs = self.any_grad(&[a, b]);
        self.push(v, Op::Add(a, b), needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self
            .value(a)
            .zip_map(self.value(b), |x, y| x - y)
            .expect("sub");
        let needs = self.any_grad(&[a, b]);
        self.push(v, Op::Sub(a, b), needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self
            .value(a)
            .zip_map(self.value(b), |x, y| x * y)
            .expect("mul");
        let needs = self.any_grad(&[a, b]);
        self.push(v, Op::Mul(a, b), needs)
    }

    /// `[C,H,W] ⊗ [1,H,W]` with the mask broadcast over channels.
    pub fn mul_broadcast(&mut self, x: Var, mask: Var) -> Var {
        let xv = self.value(x);
        let (c, h, w) = xv.dims3().expect("mul_broadcast input");
        let mv = self.value(mask);
        assert_eq!(mv.shape(), &[1, h, w], "mul_broadcast mask shape");
        let plane = h * w;
        let mut out = xv.data().to_vec();
        for ch in out.chunks_mut(plane) {
            for (o, m) in ch.iter_mut().zip(mv.data()) {
                *o *= m;
            }
        }
        let needs = self.any_grad(&[x, mask]);
        let value = Tensor::new(&[c, h, w], out).unwrap();
        self.push(value, Op::MulBroadcast { x, mask }, needs)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let v = self.value(x).map(|a| if a > 0.0 { a } else { slope * a });
        let needs = self.any_grad(&[x]);
        self.push(v, Op::LeakyRelu(x, slope), needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        let needs = self.any_grad(&[x]);
        self.push(v, Op::Sigmoid(x), needs)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::tanh);
        let needs = self.any_grad(&[x]);
        self.push(v, Op::Tanh(x), needs)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a * a);
        let needs = self.any_grad(&[x]);
        self.push(v, Op::Square(x), needs)
    }

    /// Square root; inputs must be positive where a gradient is needed.
    pub fn sqrt(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::sqrt);
        let needs = self.any_grad(&[x]);
        self.push(v, Op::Sqrt(x), needs)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::abs);
        let needs = self.any_grad(&[x]);
        self.push(v, Op::Abs(x), needs)
    }

    pub fn log(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::ln);
        let needs = self.any_grad(&[x]);
        self.push(v, Op::Log(x), needs)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(x).map(|a| a.clamp(lo, hi));
        let needs = self.any_grad(&[x]);
        self.push(v, Op::Clamp(x, lo, hi), needs)
    }

    /// Reverses the width axis.
    pub fn flip_w(&mut self, x: Var) -> Var {
        let v = self.value(x).flip_last();
        let needs = self.any_grad(&[x]);
        self.push(v, Op::FlipW(x), needs)
    }

    /// Concatenates along the leading (channel) axis.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let tail = self.value(parts[0]).shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            assert_eq!(&v.shape()[1..], tail.as_slice(), "concat trailing dims");
            lead += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let needs = self.any_grad(parts);
        self.push(
            Tensor::new(&shape, data).unwrap(),
            Op::Concat(parts.to_vec()),
            needs,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.value(x).clone().reshape(shape).expect("reshape");
        let needs = self.any_grad(&[x]);
        self.push(v, Op::Reshape(x), needs)
    }

    /// Transposes a rank-2 tensor.
    pub fn transpose(&mut self, x: Var) -> Var {
        let v = transpose2(self.value(x));
        let needs = self.any_grad(&[x]);
        self.push(v, Op::Transpose(x), needs)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = dims2(av);
        let (k2, n) = dims2(bv);
        assert_eq!(k, k2, "matmul inner dims");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), false, &mut out, 0.0);
        let needs = self.any_grad(&[a, b]);
        self.push(Tensor::new(&[m, n], out).unwrap(), Op::MatMul(a, b), needs)
    }

    /// Row-wise softmax of a rank-2 tensor.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (_, n) = dims2(xv);
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let shape = xv.shape().to_vec();
        let needs = self.any_grad(&[x]);
        self.push(Tensor::new(&shape, out).unwrap(), Op::SoftmaxRows(x), needs)
    }

    /// Nearest-neighbour ×2 upsampling of `[C,H,W]`.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let v = upsample2(self.value(x));
        let needs = self.any_grad(&[x]);
        self.push(v, Op::Upsample2(x), needs)
    }

    /// Resamples each channel of `x` through a fixed bilinear map.
    pub fn bilinear(&mut self, x: Var, map: Arc<BilinearMap>, out_shape: &[usize]) -> Var {
        let out = map.apply(self.value(x).data());
        let v = Tensor::new(out_shape, out).expect("bilinear output shape");
        let needs = self.any_grad(&[x]);
        self.push(v, Op::Bilinear { x, map }, needs)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        let needs = self.any_grad(&[x]);
        self.push(v, Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).mean());
        let needs = self.any_grad(&[x]);
        self.push(v, Op::Mean(x), needs)
    }

    /// Reverse sweep from a scalar `output`.
    pub fn backward(&self, output: Var) -> Grads {
        assert_eq!(self.value(output).numel(), 1, "backward from non-scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(self.value(output).shape(), 1.0));
        for id in (0..=output.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Grads { grads }
    }

    /// Gradients of trainable parameters bound with [`Tape::param`], summed
    /// when a name was bound more than once. Unreached parameters get zeros.
    pub fn param_grads(&self, grads: &Grads) -> BTreeMap<String, Tensor> {
        let mut out: BTreeMap<String, Tensor> = BTreeMap::new();
        for (v, name) in &self.params {
            let g = grads
                .get(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(self.value(*v).shape()));
            match out.get_mut(name) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    out.insert(name.clone(), g);
                }
            }
        }
        out
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            } => {
                let xv = self.value(*x);
                let dims = xv.dims3().unwrap();
                let wv = self.value(*w);
                let (o, k) = (wv.shape()[0], wv.shape()[2]);
                let ckk = dims.0 * k * k;
                let p = y.numel() / o;
                if let Some(b) = b {
                    if self.wants(*b) {
                        let db: Vec<f64> = g.data().chunks(p).map(|r| r.iter().sum()).collect();
                        self.accumulate(grads, *b, Tensor::new(&[o], db).unwrap());
                    }
                }
                if self.wants(*w) {
                    let cols = cols.as_ref().expect("conv2d cols retained for weight grad");
                    let mut dw = vec![0.0; o * ckk];
                    gemm(o, p, ckk, g.data(), false, cols, true, &mut dw, 0.0);
                    self.accumulate(grads, *w, Tensor::new(wv.shape(), dw).unwrap());
                }
                if self.wants(*x) {
                    let mut dcols = vec![0.0; ckk * p];
                    gemm(ckk, o, p, wv.data(), true, g.data(), false, &mut dcols, 0.0);
                    let dx = col2im(&dcols, dims, k, *stride, *pad);
                    self.accumulate(grads, *x, Tensor::new(xv.shape(), dx).unwrap());
                }
            }
            Op::Affine(x, mul) => self.accumulate(grads, *x, g.scale(*mul)),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let d = g.zip_map(self.value(*b), |u, v| u * v).unwrap();
                    self.accumulate(grads, *a, d);
                }
                if self.wants(*b) {
                    let d = g.zip_map(self.value(*a), |u, v| u * v).unwrap();
                    self.accumulate(grads, *b, d);
                }
            }
            Op::MulBroadcast { x, mask } => {
                let xv = self.value(*x);
                let mv = self.value(*mask);
                let plane = mv.numel();
                if self.wants(*x) {
                    let mut dx = g.data().to_vec();
                    for ch in dx.chunks_mut(plane) {
                        for (d, m) in ch.iter_mut().zip(mv.data()) {
                            *d *= m;
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(xv.shape(), dx).unwrap());
                }
                if self.wants(*mask) {
                    let mut dm = vec![0.0; plane];
                    for (gc, xc) in g.data().chunks(plane).zip(xv.data().chunks(plane)) {
                        for ((d, gv), xv) in dm.iter_mut().zip(gc).zip(xc) {
                            *d += gv * xv;
                        }
                    }
                    self.accumulate(grads, *mask, Tensor::new(mv.shape(), dm).unwrap());
                }
            }
            Op::LeakyRelu(x, slope) => {
                let d = g
                    .zip_map(
                        self.value(*x),
                        |gv, xv| if xv > 0.0 { gv } else { slope * gv },
                    )
                    .unwrap();
                self.accumulate(grads, *x, d);
            }
            Op::Sigmoid(x) => {
                let d = g.zip_map(y, |gv, s| gv * s * (1.0 - s)).unwrap();
                self.accumulate(grads, *x, d);
            }
            Op::Tanh(x) => {
                let d = g.zip_map(y, |gv, t| gv * (1.0 - t * t)).unwrap();
                self.accumulate(grads, *x, d);
            }
            Op::Square(x) => {
                let d = g.zip_map(self.value(*x), |gv, xv| 2.0 * xv * gv).unwrap();
                self.accumulate(grads, *x, d);
            }
            Op::Sqrt(x) => {
                let d = g.zip_map(y, |gv, yv| 0.5 * gv / yv).unwrap();
                self.accumulate(grads, *x, d);
            }
            Op::Abs(x) => {
                let d = g.zip_map(self.value(*x), |gv, xv| gv * sign(xv)).unwrap();
                self.accumulate(grads, *x, d);
            }
            Op::Log(x) => {
                let d = g.zip_map(self.value(*x), |gv, xv| gv / xv).unwrap();
                self.accumulate(grads, *x, d);
            }
            Op::Clamp(x, lo, hi) => {
                let d = g
                    .zip_map(self.value(*x), |gv, xv| {
                        if xv >= *lo && xv <= *hi {
                            gv
                        } else {
                            0.0
                        }
                    })
                    .unwrap();
                self.accumulate(grads, *x, d);
            }
            Op::FlipW(x) => self.accumulate(grads, *x, g.flip_last()),
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).numel();
                    if self.wants(*p) {
                        let d = Tensor::new(
                            self.value(*p).shape(),
                            g.data()[offset..offset + n].to_vec(),
                        )
                        .unwrap();
                        self.accumulate(grads, *p, d);
                    }
                    offset += n;
                }
            }
            Op::Reshape(x) => {
                let d = g.clone().reshape(self.value(*x).shape()).unwrap();
                self.accumulate(grads, *x, d);
            }
            Op::Transpose(x) => self.accumulate(grads, *x, transpose2(g)),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = dims2(av);
                let (_, n) = dims2(bv);
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, bv.data(), true, &mut da, 0.0);
                    self.accumulate(grads, *a, Tensor::new(&[m, k], da).unwrap());
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), true, g.data(), false, &mut db, 0.0);
                    self.accumulate(grads, *b, Tensor::new(&[k, n], db).unwrap());
                }
            }
            Op::SoftmaxRows(x) => {
                let (_, n) = dims2(y);
                let mut d = vec![0.0; y.numel()];
                for ((dr, yr), gr) in d
                    .chunks_mut(n)
                    .zip(y.data().chunks(n))
                    .zip(g.data().chunks(n))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((dv, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *dv = yv * (gv - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape(), d).unwrap());
            }
            Op::Upsample2(x) => {
                let xv = self.value(*x);
                let (c, h, w) = xv.dims3().unwrap();
                let mut d = vec![0.0; c * h * w];
                let gd = g.data();
                for ci in 0..c {
                    for yy in 0..2 * h {
                        for xx in 0..2 * w {
                            d[(ci * h + yy / 2) * w + xx / 2] += gd[(ci * 2 * h + yy) * 2 * w + xx];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape(), d).unwrap());
            }
            Op::Bilinear { x, map } => {
                let xv = self.value(*x);
                let mut d = vec![0.0; xv.numel()];
                map.apply_transpose_into(g.data(), &mut d);
                self.accumulate(grads, *x, Tensor::new(xv.shape(), d).unwrap());
            }
            Op::Sum(x) => {
                let d = Tensor::full(self.value(*x).shape(), g.item());
                self.accumulate(grads, *x, d);
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let d = Tensor::full(xv.shape(), g.item() / xv.numel().max(1) as f64);
                self.accumulate(grads, *x, d);
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn dims2(t: &Tensor) -> (usize, usize) {
    match t.shape() {
        &[m, n] => (m, n),
        s => panic!("expected rank-2 tensor, got {s:?}"),
    }
}

fn transpose2(t: &Tensor) -> Tensor {
    let (m, n) = dims2(t);
    let src = t.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = src[i * n + j];
        }
    }
    Tensor::new(&[n, m], out).unwrap()
}

fn upsample2(t: &Tensor) -> Tensor {
    let (c, h, w) = t.dims3().expect("upsample2 input must be [C,H,W]");
    let src = t.data();
    let mut out = vec![0.0; c * 4 * h * w];
    for ci in 0..c {
        for yy in 0..2 * h {
            for xx in 0..2 * w {
                out[(ci * 2 * h + yy) * 2 * w + xx] = src[(ci * h + yy / 2) * w + xx / 2];
            }
        }
    }
    Tensor::new(&[c, 2 * h, 2 * w], out).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central-difference check of d(loss)/d(input) for a graph builder.
    fn check_grad(input: Tensor, build: impl Fn(&mut Tape, Var) -> Var, tol: f64) {
        let mut tape = Tape::new();
        let x = tape.leaf(input.clone());
        let out = build(&mut tape, x);
        let grads = tape.backward(out);
        let analytic = grads
            .get(x)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        let eval = |t: Tensor| {
            let mut tp = Tape::new();
            let v = tp.leaf(t);
            let o = build(&mut tp, v);
            tp.value(o).item()
        };
        let h = 1e-6;
        for i in 0..input.numel() {
            let mut plus = input.clone();
            plus.data_mut()[i] += h;
            let mut minus = input.clone();
            minus.data_mut()[i] -= h;
            let fd = (eval(plus) - eval(minus)) / (2.0 * h);
            let an = analytic.data()[i];
            assert!(
                (fd - an).abs() <= tol * (1.0 + fd.abs()),
                "element {i}: fd {fd} vs analytic {an}"
            );
        }
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = rand_tensor(&mut rng, &[3, 2, 4, 4]);
        let b = rand_tensor(&mut rng, &[3]);
        let x = rand_tensor(&mut rng, &[2, 6, 6]);
        let (w2, b2) = (w.clone(), b.clone());
        check_grad(
            x.clone(),
            move |t, v| {
                let wv = t.constant(w2.clone());
                let bv = t.constant(b2.clone());
                let y = t.conv2d(v, wv, Some(bv), 2, 1);
                let y = t.square(y);
                t.sum(y)
            },
            1e-6,
        );
        // weight gradient
        check_grad(
            w,
            move |t, wv| {
                let xv = t.constant(x.clone());
                let y = t.conv2d(xv, wv, None, 1, 1);
                let y = t.tanh(y);
                t.sum(y)
            },
            1e-6,
        );
    }

    #[test]
    fn attention_block_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let other = rand_tensor(&mut rng, &[3, 4]);
        check_grad(
            rand_tensor(&mut rng, &[4, 3]),
            move |t, v| {
                let o = t.constant(other.clone());
                let logits = t.matmul(v, o);
                let a = t.softmax_rows(logits);
                let at = t.transpose(a);
                let s = t.sigmoid(at);
                let l = t.log(s);
                t.mean(l)
            },
            1e-6,
        );
    }

    #[test]
    fn structural_ops_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mask = rand_tensor(&mut rng, &[1, 2, 4]);
        check_grad(
            rand_tensor(&mut rng, &[2, 2, 4]),
            move |t, v| {
                let m = t.leaf(mask.clone());
                let f = t.flip_w(v);
                let blended = t.mul_broadcast(f, m);
                let c = t.concat(&[blended, v]);
                let u = t.upsample2(c);
                let r = t.reshape(u, &[4, 32]);
                let l = t.leaky_relu(r, 0.2);
                let a = t.affine(l, 0.5, 0.1);
                let sq = t.square(a);
                t.sum(sq)
            },
            1e-6,
        );
    }

    #[test]
    fn sqrt_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, &[2, 5]).map(|v| v.abs() + 0.2);
        check_grad(
            x,
            |t, v| {
                let r = t.sqrt(v);
                let r = t.tanh(r);
                t.sum(r)
            },
            1e-6,
        );
    }

    #[test]
    fn bilinear_gradient_is_transpose() {
        let taps = vec![
            Some(crate::BilinearTaps::clamped(0.3, 0.6, 3, 2)),
            None,
            Some(crate::BilinearTaps::clamped(1.9, 0.1, 3, 2)),
        ];
        let map = Arc::new(BilinearMap::new(6, taps));
        check_grad(
            Tensor::new(&[1, 2, 3], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap(),
            move |t, v| {
                let y = t.bilinear(v, map.clone(), &[1, 3]);
                let y = t.square(y);
                t.sum(y)
            },
            1e-6,
        );
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::full(&[2], 2.0));
        store.insert("b", Tensor::full(&[2], 3.0));
        let mut tape = Tape::new();
        let a = tape.param(&store, "a", true);
        let b = tape.param(&store, "b", false);
        let p = tape.mul(a, b);
        let s = tape.sum(p);
        let g = tape.backward(s);
        let pg = tape.param_grads(&g);
        assert_eq!(pg["a"].data(), &[3.0, 3.0]);
        assert!(!pg.contains_key("b"));
        assert!(g.get(b).is_none());
    }
}
