use std::collections::HashMap;

use super::kernels::{self, ConvGeom};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Storage the tape reads parameter values from and writes parameter
/// gradients into. Implemented by [`crate::nn::ParamStore`].
pub trait ParamSource<T: Real> {
    fn param_value(&self, id: usize) -> &Tensor<T>;
    fn accumulate_grad(&self, id: usize, grad: &Tensor<T>);
    fn param_name(&self, id: usize) -> &str;
}

/// Reference to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(u32);

impl Var {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

enum Op<T> {
    Leaf,
    Param(usize),
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, cout: usize, cols: Vec<T> },
    ConvTranspose2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, cin: usize },
    MaxPool { x: Var, argmax: Vec<u32> },
    Upsample { x: Var, factor: usize },
    Concat { a: Var, b: Var },
    SliceChannels { x: Var, start: usize },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Sum(Var),
    Mean(Var),
    WeightedSum(Vec<(Var, T)>),
    Bce { p: Var, t: Var },
    Dice { p: Var, t: Var, eps: f64 },
    Mse { a: Var, b: Var },
}

struct Node<T> {
    /// `None` for parameter leaves, whose value lives in the param source.
    value: Option<Tensor<T>>,
    shape: Vec<usize>,
    op: Op<T>,
    needs_grad: bool,
}

/// Define-by-run reverse-mode tape. Build a fresh one per forward pass.
pub struct Tape<'p, T: Real> {
    params: Option<&'p dyn ParamSource<T>>,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<usize, Var>,
    leaf_grads: HashMap<usize, Tensor<T>>,
}

/// Clamp used inside BCE so `ln` stays finite at saturated sigmoids.
fn bce_eps<T: Real>() -> T {
    if T::BYTES == 4 {
        T::of(1e-7)
    } else {
        T::of(1e-12)
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn split_samples(shape: &[usize]) -> usize {
    if shape.len() >= 2 {
        shape[0]
    } else {
        1
    }
}

impl<'p, T: Real> Default for Tape<'p, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Real> Tape<'p, T> {
    /// A tape without parameters; only explicit leaves can carry gradients.
    pub fn new() -> Self {
        Self { params: None, nodes: Vec::new(), param_vars: HashMap::new(), leaf_grads: HashMap::new() }
    }

    pub fn with_params(params: &'p dyn ParamSource<T>) -> Self {
        Self { params: Some(params), ..Self::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Option<Tensor<T>>, shape: Vec<usize>, op: Op<T>, needs_grad: bool) -> Var {
        let id = Var(self.nodes.len() as u32);
        self.nodes.push(Node { value, shape, op, needs_grad });
        id
    }

    fn push_value(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        let shape = value.shape().to_vec();
        self.push(Some(value), shape, op, needs_grad)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.index()].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.index()];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.expect("parameter node without a parameter source").param_value(*id),
            (None, _) => unreachable!("non-parameter node without a value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.index()].shape
    }

    /// Accumulated gradient of a leaf created with `requires_grad`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaf_grads.get(&v.index())
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push_value(value, Op::Leaf, requires_grad)
    }

    /// A constant copy of `v`'s current value; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.leaf(value, false)
    }

    /// The tape site for parameter `id`. Every request for the same id returns the
    /// same node, so all uses of a parameter accumulate into one gradient.
    pub fn param(&mut self, id: usize) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let src = self.params.expect("tape has no parameter source");
        let shape = src.param_value(id).shape().to_vec();
        let v = self.push(None, shape, Op::Param(id), true);
        self.param_vars.insert(id, v);
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        const OP: &str = "conv2d";
        let (n, cin, h, wd) = self.value(x).dims4(OP)?;
        let (cout, wcin, kh, kw) = self.value(w).dims4(OP)?;
        if wcin != cin {
            return Err(Error::shape(OP, format!("input has {cin} channels but weight expects Cin = {wcin}")));
        }
        if kh != kw || kh == 0 || stride == 0 {
            return Err(Error::invalid(OP, format!("kernel {kh}×{kw}, stride {stride}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape(OP, format!("bias shape {:?}, expected [{cout}]", self.shape(b))));
            }
        }
        let ho = kernels::conv_out_extent(h, kh, stride, pad)
            .ok_or_else(|| Error::shape(OP, format!("height {h} too small for kernel {kh} with padding {pad}")))?;
        let wo = kernels::conv_out_extent(wd, kh, stride, pad)
            .ok_or_else(|| Error::shape(OP, format!("width {wd} too small for kernel {kh} with padding {pad}")))?;
        let geom = ConvGeom { channels: cin, h, w: wd, k: kh, stride, pad, ho, wo };
        let (out, cols) = kernels::conv2d_forward(
            self.value(x).data(),
            n,
            &geom,
            self.value(w).data(),
            cout,
            b.map(|b| self.value(b).data()),
        );
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        let value = Tensor::new(vec![n, cout, ho, wo], out)?;
        Ok(self.push_value(value, Op::Conv2d { x, w, b, geom, cout, cols }, needs))
    }

    /// Transposed convolution with weight `[Cin, Cout, k, k]`. An encoder conv2d
    /// kernel `[Cout_e, Cin_e, k, k]` can be passed unchanged to map `Cout_e`
    /// channels back to `Cin_e`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        const OP: &str = "conv_transpose2d";
        let (n, cin, h, wd) = self.value(x).dims4(OP)?;
        let (wcin, cout, kh, kw) = self.value(w).dims4(OP)?;
        if wcin != cin {
            return Err(Error::shape(OP, format!("input has {cin} channels but weight expects Cin = {wcin}")));
        }
        if kh != kw || kh == 0 || stride == 0 {
            return Err(Error::invalid(OP, format!("kernel {kh}×{kw}, stride {stride}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape(OP, format!("bias shape {:?}, expected [{cout}]", self.shape(b))));
            }
        }
        let ho = kernels::conv_transpose_out_extent(h, kh, stride, pad)
            .ok_or_else(|| Error::shape(OP, format!("height {h} gives an empty output")))?;
        let wo = kernels::conv_transpose_out_extent(wd, kh, stride, pad)
            .ok_or_else(|| Error::shape(OP, format!("width {wd} gives an empty output")))?;
        // adjoint conv2d: output (cout × ho × wo) → input (cin × h × wd)
        let geom = ConvGeom { channels: cout, h: ho, w: wo, k: kh, stride, pad, ho: h, wo: wd };
        if kernels::conv_out_extent(ho, kh, stride, pad) != Some(h)
            || kernels::conv_out_extent(wo, kh, stride, pad) != Some(wd)
        {
            return Err(Error::invalid(OP, "stride/padding combination has no exact adjoint"));
        }
        let out = kernels::conv_transpose2d_forward(
            self.value(x).data(),
            n,
            &geom,
            self.value(w).data(),
            cin,
            b.map(|b| self.value(b).data()),
        );
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        let value = Tensor::new(vec![n, cout, ho, wo], out)?;
        Ok(self.push_value(value, Op::ConvTranspose2d { x, w, b, geom, cin }, needs))
    }

    pub fn maxpool2d(&mut self, x: Var, window: usize) -> Result<Var> {
        const OP: &str = "maxpool2d";
        let (n, c, h, w) = self.value(x).dims4(OP)?;
        if window == 0 {
            return Err(Error::invalid(OP, "window must be positive"));
        }
        if h % window != 0 {
            return Err(Error::shape(OP, format!("height {h} is not divisible by window {window}")));
        }
        if w % window != 0 {
            return Err(Error::shape(OP, format!("width {w} is not divisible by window {window}")));
        }
        let (out, argmax) = kernels::maxpool_forward(self.value(x).data(), n, c, h, w, window);
        let value = Tensor::new(vec![n, c, h / window, w / window], out)?;
        let needs = self.needs(x);
        Ok(self.push_value(value, Op::MaxPool { x, argmax }, needs))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        const OP: &str = "upsample_nearest";
        let (n, c, h, w) = self.value(x).dims4(OP)?;
        if factor == 0 {
            return Err(Error::invalid(OP, "factor must be at least 1"));
        }
        let out = kernels::upsample_forward(self.value(x).data(), n * c, h, w, factor);
        let value = Tensor::new(vec![n, c, h * factor, w * factor], out)?;
        let needs = self.needs(x);
        Ok(self.push_value(value, Op::Upsample { x, factor }, needs))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        const OP: &str = "concat_channels";
        let (n, ca, h, w) = self.value(a).dims4(OP)?;
        let (nb, cb, hb, wb) = self.value(b).dims4(OP)?;
        if n != nb {
            return Err(Error::shape(OP, format!("batch {n} vs {nb}")));
        }
        if h != hb {
            return Err(Error::shape(OP, format!("height {h} vs {hb}")));
        }
        if w != wb {
            return Err(Error::shape(OP, format!("width {w} vs {wb}")));
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * (ca + cb) * plane);
        for s in 0..n {
            out.extend_from_slice(&self.value(a).data()[s * ca * plane..(s + 1) * ca * plane]);
            out.extend_from_slice(&self.value(b).data()[s * cb * plane..(s + 1) * cb * plane]);
        }
        let value = Tensor::new(vec![n, ca + cb, h, w], out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push_value(value, Op::Concat { a, b }, needs))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        const OP: &str = "slice_channels";
        let (n, c, h, w) = self.value(x).dims4(OP)?;
        if start + len > c || len == 0 {
            return Err(Error::shape(OP, format!("channels {start}..{} of {c}", start + len)));
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * len * plane);
        for s in 0..n {
            let off = (s * c + start) * plane;
            out.extend_from_slice(&self.value(x).data()[off..off + len * plane]);
        }
        let value = Tensor::new(vec![n, len, h, w], out)?;
        let needs = self.needs(x);
        Ok(self.push_value(value, Op::SliceChannels { x, start }, needs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(T::zero()));
        let needs = self.needs(x);
        self.push_value(value, Op::Relu(x), needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        let needs = self.needs(x);
        self.push_value(value, Op::Sigmoid(x), needs)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push_value(value, Op::Add(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push_value(value, Op::Mul(a, b), needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(T::of(self.value(x).sum()));
        let needs = self.needs(x);
        self.push_value(value, Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let value = Tensor::scalar(T::of(self.value(x).sum() / n));
        let needs = self.needs(x);
        self.push_value(value, Op::Mean(x), needs)
    }

    /// `Σ cᵢ·vᵢ` over equally shaped values.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let (first, _) = *terms.first().ok_or_else(|| Error::invalid("weighted_sum", "no terms"))?;
        let mut value = Tensor::zeros(self.shape(first));
        for &(v, c) in terms {
            self.same_shape("weighted_sum", first, v)?;
            for (acc, &x) in value.data_mut().iter_mut().zip(self.value(v).data()) {
                *acc += c * x;
            }
        }
        let needs = terms.iter().any(|&(v, _)| self.needs(v));
        Ok(self.push_value(value, Op::WeightedSum(terms.to_vec()), needs))
    }

    /// Mean binary cross-entropy `-[t·ln p + (1-t)·ln(1-p)]`.
    pub fn bce(&mut self, p: Var, t: Var) -> Result<Var> {
        self.same_shape("bce_loss", p, t)?;
        let eps = bce_eps::<T>();
        let n = self.value(p).len() as f64;
        let total: f64 = self
            .value(p)
            .data()
            .iter()
            .zip(self.value(t).data())
            .map(|(&p, &t)| {
                let pc = p.max(eps).min(T::one() - eps).as_f64();
                let t = t.as_f64();
                -(t * pc.ln() + (1.0 - t) * (1.0 - pc).ln())
            })
            .sum();
        let value = Tensor::scalar(T::of(total / n));
        let needs = self.needs(p) || self.needs(t);
        Ok(self.push_value(value, Op::Bce { p, t }, needs))
    }

    /// Soft Dice loss `1 - (2Σpt + ε)/(Σp + Σt + ε)`, per sample then averaged.
    pub fn dice(&mut self, p: Var, t: Var, eps: f64) -> Result<Var> {
        self.same_shape("dice_loss", p, t)?;
        let samples = split_samples(self.shape(p));
        let per = self.value(p).len() / samples;
        let (pv, tv) = (self.value(p).data(), self.value(t).data());
        let mut total = 0.0;
        for s in 0..samples {
            let (inter, denom) = dice_sums(&pv[s * per..(s + 1) * per], &tv[s * per..(s + 1) * per]);
            total += 1.0 - (2.0 * inter + eps) / (denom + eps);
        }
        let value = Tensor::scalar(T::of(total / samples as f64));
        let needs = self.needs(p) || self.needs(t);
        Ok(self.push_value(value, Op::Dice { p, t, eps }, needs))
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse_loss", a, b)?;
        let n = self.value(a).len() as f64;
        let total: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| {
                let d = x.as_f64() - y.as_f64();
                d * d
            })
            .sum();
        let value = Tensor::scalar(T::of(total / n));
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push_value(value, Op::Mse { a, b }, needs))
    }

    /// Reverse pass from a scalar `loss`. Parameter gradients are added into the
    /// parameter source and leaf gradients into the tape, so repeated calls
    /// accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss).to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.index()).map(|_| None).collect();
        grads[loss.index()] = Some(Tensor::full(&shape, T::one()));
        for i in (0..=loss.index()).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backward_node(i, g, &mut grads);
        }
        Ok(())
    }

    fn send(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if self.needs(v) {
            accumulate(&mut grads[v.index()], g);
        }
    }

    fn backward_node(&mut self, i: usize, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &self.nodes[i].op {
            Op::Leaf => match self.leaf_grads.get_mut(&i) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    self.leaf_grads.insert(i, g);
                }
            },
            Op::Param(id) => {
                let src = self.params.expect("parameter node without a parameter source");
                src.accumulate_grad(*id, &g);
            }
            Op::Conv2d { x, w, b, geom, cout, cols } => {
                let (x, w, b, geom, cout) = (*x, *w, *b, *geom, *cout);
                let (n, _, _, _) = self.value(x).dims4("conv2d").expect("checked in forward");
                let mut dw = self.needs(w).then(|| Tensor::zeros(self.shape(w)));
                let mut db = b.filter(|&b| self.needs(b)).map(|b| Tensor::zeros(self.shape(b)));
                let dx = kernels::conv2d_backward(
                    self.value(x).data(),
                    cols,
                    n,
                    &geom,
                    self.value(w).data(),
                    cout,
                    g.data(),
                    dw.as_mut().map(|t| t.data_mut()),
                    db.as_mut().map(|t| t.data_mut()),
                    self.needs(x),
                );
                if let Some(dx) = dx {
                    let t = Tensor::new(self.shape(x).to_vec(), dx).expect("shape");
                    self.send(grads, x, t);
                }
                if let Some(dw) = dw {
                    self.send(grads, w, dw);
                }
                if let (Some(b), Some(db)) = (b, db) {
                    self.send(grads, b, db);
                }
            }
            &Op::ConvTranspose2d { x, w, b, geom, cin } => {
                let (n, _, _, _) = self.value(x).dims4("conv_transpose2d").expect("checked in forward");
                let mut dw = self.needs(w).then(|| Tensor::zeros(self.shape(w)));
                let mut db = b.filter(|&b| self.needs(b)).map(|b| Tensor::zeros(self.shape(b)));
                let dx = kernels::conv_transpose2d_backward(
                    self.value(x).data(),
                    n,
                    &geom,
                    self.value(w).data(),
                    cin,
                    g.data(),
                    dw.as_mut().map(|t| t.data_mut()),
                    db.as_mut().map(|t| t.data_mut()),
                    self.needs(x),
                );
                if let Some(dx) = dx {
                    let t = Tensor::new(self.shape(x).to_vec(), dx).expect("shape");
                    self.send(grads, x, t);
                }
                if let Some(dw) = dw {
                    self.send(grads, w, dw);
                }
                if let (Some(b), Some(db)) = (b, db) {
                    self.send(grads, b, db);
                }
            }
            Op::MaxPool { x, argmax } => {
                let x = *x;
                let mut dx = Tensor::zeros(self.shape(x));
                let d = dx.data_mut();
                for (&idx, &gv) in argmax.iter().zip(g.data()) {
                    d[idx as usize] += gv;
                }
                self.send(grads, x, dx);
            }
            &Op::Upsample { x, factor } => {
                let shape = self.shape(x).to_vec();
                let dx = kernels::upsample_backward(g.data(), shape[0] * shape[1], shape[2], shape[3], factor);
                self.send(grads, x, Tensor::new(shape, dx).expect("shape"));
            }
            &Op::Concat { a, b } => {
                let sa = self.shape(a).to_vec();
                let sb = self.shape(b).to_vec();
                let (n, ca, cb, plane) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
                let mut da = Vec::with_capacity(n * ca * plane);
                let mut db = Vec::with_capacity(n * cb * plane);
                for s in 0..n {
                    let off = s * (ca + cb) * plane;
                    da.extend_from_slice(&g.data()[off..off + ca * plane]);
                    db.extend_from_slice(&g.data()[off + ca * plane..off + (ca + cb) * plane]);
                }
                self.send(grads, a, Tensor::new(sa, da).expect("shape"));
                self.send(grads, b, Tensor::new(sb, db).expect("shape"));
            }
            &Op::SliceChannels { x, start } => {
                let sx = self.shape(x).to_vec();
                let (n, c, plane) = (sx[0], sx[1], sx[2] * sx[3]);
                let len = self.nodes[i].shape[1];
                let mut dx = Tensor::zeros(&sx);
                for s in 0..n {
                    let dst = (s * c + start) * plane;
                    let src = s * len * plane;
                    dx.data_mut()[dst..dst + len * plane].copy_from_slice(&g.data()[src..src + len * plane]);
                }
                self.send(grads, x, dx);
            }
            &Op::Relu(x) => {
                let data = self
                    .value(x)
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                let dx = Tensor::new(self.shape(x).to_vec(), data).expect("shape");
                self.send(grads, x, dx);
            }
            &Op::Sigmoid(x) => {
                let y = self.nodes[i].value.as_ref().expect("sigmoid output");
                let data = y.data().iter().zip(g.data()).map(|(&s, &gv)| gv * s * (T::one() - s)).collect();
                let dx = Tensor::new(self.shape(x).to_vec(), data).expect("shape");
                self.send(grads, x, dx);
            }
            &Op::Add(a, b) => {
                self.send(grads, a, g.clone());
                self.send(grads, b, g);
            }
            &Op::Mul(a, b) => {
                let da = mul_data(&g, self.value(b));
                let db = mul_data(&g, self.value(a));
                self.send(grads, a, da);
                self.send(grads, b, db);
            }
            &Op::Sum(x) => {
                let gx = Tensor::full(self.shape(x), g.item());
                self.send(grads, x, gx);
            }
            &Op::Mean(x) => {
                let n = T::of(self.value(x).len() as f64);
                let gx = Tensor::full(self.shape(x), g.item() / n);
                self.send(grads, x, gx);
            }
            Op::WeightedSum(terms) => {
                let terms = terms.clone();
                for (v, c) in terms {
                    self.send(grads, v, g.map(|gv| gv * c));
                }
            }
            &Op::Bce { p, t } => {
                let eps = bce_eps::<T>();
                let scale = g.item().as_f64() / self.value(p).len() as f64;
                let (pv, tv) = (self.value(p), self.value(t));
                if self.needs(p) {
                    let data = pv
                        .data()
                        .iter()
                        .zip(tv.data())
                        .map(|(&p, &t)| {
                            let pc = p.max(eps).min(T::one() - eps).as_f64();
                            T::of(scale * (pc - t.as_f64()) / (pc * (1.0 - pc)))
                        })
                        .collect();
                    let dp = Tensor::new(pv.shape().to_vec(), data).expect("shape");
                    self.send(grads, p, dp);
                }
                let (pv, tv) = (self.value(p), self.value(t));
                if self.needs(t) {
                    let data = pv
                        .data()
                        .iter()
                        .map(|&p| {
                            let pc = p.max(eps).min(T::one() - eps).as_f64();
                            T::of(-scale * (pc.ln() - (1.0 - pc).ln()))
                        })
                        .collect();
                    let dt = Tensor::new(tv.shape().to_vec(), data).expect("shape");
                    self.send(grads, t, dt);
                }
            }
            &Op::Dice { p, t, eps } => {
                let samples = split_samples(self.shape(p));
                let per = self.value(p).len() / samples;
                let scale = g.item().as_f64() / samples as f64;
                let (pv, tv) = (self.value(p).data(), self.value(t).data());
                let mut dp = vec![T::zero(); pv.len()];
                let mut dt = vec![T::zero(); tv.len()];
                for s in 0..samples {
                    let range = s * per..(s + 1) * per;
                    let (inter, denom) = dice_sums(&pv[range.clone()], &tv[range.clone()]);
                    let num = 2.0 * inter + eps;
                    let den = denom + eps;
                    let den2 = den * den;
                    for j in range {
                        dp[j] = T::of(-scale * (2.0 * tv[j].as_f64() * den - num) / den2);
                        dt[j] = T::of(-scale * (2.0 * pv[j].as_f64() * den - num) / den2);
                    }
                }
                let shape = self.shape(p).to_vec();
                self.send(grads, p, Tensor::new(shape.clone(), dp).expect("shape"));
                self.send(grads, t, Tensor::new(shape, dt).expect("shape"));
            }
            &Op::Mse { a, b } => {
                let scale = 2.0 * g.item().as_f64() / self.value(a).len() as f64;
                let data: Vec<T> = self
                    .value(a)
                    .data()
                    .iter()
                    .zip(self.value(b).data())
                    .map(|(&x, &y)| T::of(scale * (x.as_f64() - y.as_f64())))
                    .collect();
                let shape = self.shape(a).to_vec();
                let da = Tensor::new(shape.clone(), data).expect("shape");
                if self.needs(b) {
                    let db = da.map(|v| -v);
                    self.send(grads, b, db);
                }
                self.send(grads, a, da);
            }
        }
    }
}

fn dice_sums<T: Real>(p: &[T], t: &[T]) -> (f64, f64) {
    let mut inter = 0.0;
    let mut denom = 0.0;
    for (&p, &t) in p.iter().zip(t) {
        let (p, t) = (p.as_f64(), t.as_f64());
        inter += p * t;
        denom += p + t;
    }
    (inter, denom)
}

fn mul_data<T: Real>(g: &Tensor<T>, other: &Tensor<T>) -> Tensor<T> {
    let data = g.data().iter().zip(other.data()).map(|(&a, &b)| a * b).collect();
    Tensor::new(g.shape().to_vec(), data).expect("shape")
}
