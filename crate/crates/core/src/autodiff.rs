//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! topological order, so [`Graph::backward`] is a single reverse sweep. Only
//! nodes that (transitively) depend on a `requires_grad` leaf take part in the
//! sweep; constant subgraphs such as frozen stages cost nothing in backward.
//!
//! A graph can be differentiated once. A second `backward` call returns
//! [`Error::Contract`] rather than silently accumulating gradients twice.

use crate::error::{contract_err, shape_err, Error, Result};
use crate::tensor::{conv2d_backward, conv2d_forward, softmax_channels, ConvGeom, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Pixels whose feature norm falls below this are treated as zero vectors by `cosine_map`.
pub const COSINE_EPS: f64 = 1e-12;

enum Op {
    Leaf,
    Conv2d { input: Var, kernel: Var, bias: Var, geom: ConvGeom, col: Vec<f64> },
    Relu(Var),
    Softmax(Var),
    Concat { a: Var, b: Var },
    SliceChannels { x: Var, start: usize },
    CosineMap { features: Var, proto: Var },
    MaskedMean { features: Var, mask: Vec<bool>, count: usize },
    Attend { h: Var, m: Var },
    StackMaps(Vec<Var>),
    MeanOf(Vec<Var>),
    Affine { x: Var, scale: f64 },
    Add(Var, Var),
    Mul(Var, Var),
    Sum(Var),
    Nll { probs: Var, targets: Vec<usize>, clamp: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    differentiated: bool,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let (x, k, b) = (self.value(input), self.value(kernel), self.value(bias));
        let geom = ConvGeom::new(x, k, b, stride, padding)?;
        x.check_finite("conv2d input")?;
        let (out, col) = conv2d_forward(&geom, x.data(), k.data(), b.data());
        let value = Tensor::new(&[geom.out_h, geom.out_w, geom.cout], out)?;
        Ok(self.push(value, Op::Conv2d { input, kernel, bias, geom, col }, &[input, kernel, bias]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu(x), &[x])
    }

    pub fn softmax_channels(&mut self, logits: Var) -> Result<Var> {
        let value = softmax_channels(self.value(logits))?;
        Ok(self.push(value, Op::Softmax(logits), &[logits]))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (h, w, ka) = self.value(a).dims3()?;
        let (hb, wb, kb) = self.value(b).dims3()?;
        if (h, w) != (hb, wb) {
            return Err(shape_err!("concat spatial mismatch: {h}x{w} vs {hb}x{wb}"));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(h * w * (ka + kb));
        for (pa, pb) in da.chunks_exact(ka).zip(db.chunks_exact(kb)) {
            out.extend_from_slice(pa);
            out.extend_from_slice(pb);
        }
        let value = Tensor::new(&[h, w, ka + kb], out)?;
        Ok(self.push(value, Op::Concat { a, b }, &[a, b]))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(x).slice_channels(start, len)?;
        Ok(self.push(value, Op::SliceChannels { x, start }, &[x]))
    }

    /// Per-pixel cosine similarity between `features` (H, W, K) and `proto` (K).
    pub fn cosine_map(&mut self, features: Var, proto: Var) -> Result<Var> {
        let (h, w, k) = self.value(features).dims3()?;
        let p = self.value(proto);
        if p.len() != k {
            return Err(shape_err!("prototype has {} entries, features have {k} channels", p.len()));
        }
        let pn = p.norm();
        if !(pn > COSINE_EPS) {
            return Err(Error::DegeneratePrototype(format!("prototype norm {pn}")));
        }
        let pd = p.data();
        let out = self
            .value(features)
            .data()
            .chunks_exact(k)
            .map(|f| {
                let fnorm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
                if fnorm < COSINE_EPS {
                    0.0
                } else {
                    let dot: f64 = f.iter().zip(pd).map(|(a, b)| a * b).sum();
                    (dot / (fnorm * pn)).clamp(-1.0, 1.0)
                }
            })
            .collect();
        let value = Tensor::new(&[h, w], out)?;
        Ok(self.push(value, Op::CosineMap { features, proto }, &[features, proto]))
    }

    /// Mean feature vector over the pixels where `mask` is set.
    pub fn masked_mean(&mut self, features: Var, mask: &[bool]) -> Result<Var> {
        let (h, w, k) = self.value(features).dims3()?;
        if mask.len() != h * w {
            return Err(shape_err!("mask has {} pixels, features have {}", mask.len(), h * w));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(contract_err!("masked_mean over an empty mask"));
        }
        let mut acc = vec![0.0; k];
        for (f, _) in self.value(features).data().chunks_exact(k).zip(mask).filter(|(_, &m)| m) {
            for (a, v) in acc.iter_mut().zip(f) {
                *a += v;
            }
        }
        for a in &mut acc {
            *a /= count as f64;
        }
        let value = Tensor::from_vec(acc);
        Ok(self.push(value, Op::MaskedMean { features, mask: mask.to_vec(), count }, &[features]))
    }

    /// Residual attention `m ⊙ h + h` with the (H, W) map broadcast across channels.
    pub fn attend(&mut self, h: Var, m: Var) -> Result<Var> {
        let (hh, ww, k) = self.value(h).dims3()?;
        let mv = self.value(m);
        if mv.len() != hh * ww {
            return Err(shape_err!("attention map has {} pixels, features have {}", mv.len(), hh * ww));
        }
        let mut out = self.value(h).data().to_vec();
        for (px, &a) in out.chunks_exact_mut(k).zip(mv.data()) {
            for v in px {
                *v *= 1.0 + a;
            }
        }
        let value = Tensor::new(&[hh, ww, k], out)?;
        Ok(self.push(value, Op::Attend { h, m }, &[h, m]))
    }

    /// Stack single-channel maps (each H×W values) into an (H, W, C) tensor.
    pub fn stack_maps(&mut self, maps: &[Var]) -> Result<Var> {
        let first = maps.first().ok_or_else(|| contract_err!("stack_maps needs at least one map"))?;
        let (h, w, c0) = self.value(*first).dims3()?;
        let c = maps.len();
        let mut out = vec![0.0; h * w * c];
        for (ci, m) in maps.iter().enumerate() {
            let v = self.value(*m);
            let (mh, mw, mc) = v.dims3()?;
            if (mh, mw, mc) != (h, w, c0) || mc != 1 {
                return Err(shape_err!("stack_maps expects single-channel {h}x{w} maps, got {:?}", v.shape()));
            }
            for (px, &val) in v.data().iter().enumerate() {
                out[px * c + ci] = val;
            }
        }
        let value = Tensor::new(&[h, w, c], out)?;
        Ok(self.push(value, Op::StackMaps(maps.to_vec()), maps))
    }

    /// Elementwise mean of same-shaped tensors.
    pub fn mean_of(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| contract_err!("mean_of needs at least one input"))?;
        let shape = self.value(*first).shape().to_vec();
        let mut acc = vec![0.0; self.value(*first).len()];
        for x in xs {
            let v = self.value(*x);
            if v.shape() != shape.as_slice() {
                return Err(shape_err!("mean_of shape mismatch: {:?} vs {shape:?}", v.shape()));
            }
            for (a, b) in acc.iter_mut().zip(v.data()) {
                *a += b;
            }
        }
        let n = xs.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        let value = Tensor::new(&shape, acc)?;
        Ok(self.push(value, Op::MeanOf(xs.to_vec()), xs))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(x).map(|v| scale * v + shift);
        self.push(value, Op::Affine { x, scale }, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip(a, b, |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip(a, b, |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err!("elementwise shape mismatch: {:?} vs {:?}", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape(), data)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x), &[x])
    }

    /// Mean over pixels of `-ln max(p[target], clamp)` for an (H, W, C) probability map.
    pub fn nll(&mut self, probs: Var, targets: &[usize], clamp: f64) -> Result<Var> {
        let (h, w, c) = self.value(probs).dims3()?;
        if targets.len() != h * w {
            return Err(shape_err!("{} targets for {} pixels", targets.len(), h * w));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(contract_err!("target channel {t} outside {c} prediction channels"));
        }
        let p = self.value(probs).data();
        let total: f64 = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| -p[i * c + t].max(clamp).ln())
            .sum();
        let value = Tensor::scalar(total / targets.len() as f64);
        Ok(self.push(value, Op::Nll { probs, targets: targets.to_vec(), clamp }, &[probs]))
    }

    /// Reverse sweep from a scalar node. Gradients of every `requires_grad` leaf
    /// are available in the result; leaves that do not influence `loss` get none.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.differentiated {
            return Err(contract_err!("backward already ran on this graph"));
        }
        if self.value(loss).len() != 1 {
            return Err(contract_err!("backward needs a scalar loss, got shape {:?}", self.value(loss).shape()));
        }
        self.differentiated = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        // Interior nodes keep their gradients too; callers normally only read leaves.
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, data: Vec<f64>| -> Result<()> {
            let shape = self.nodes[v.0].value.shape();
            match &mut grads[v.0] {
                Some(t) => {
                    for (a, b) in t.data_mut().iter_mut().zip(&data) {
                        *a += b;
                    }
                }
                slot @ None => *slot = Some(Tensor::new(shape, data)?),
            }
            Ok(())
        };
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, bias, geom, col } => {
                let need = [needs(*input), needs(*kernel), needs(*bias)];
                let cg = conv2d_backward(geom, col, self.value(*kernel).data(), gd, need);
                if let Some(d) = cg.input {
                    acc(*input, d)?;
                }
                if let Some(d) = cg.kernel {
                    acc(*kernel, d)?;
                }
                if let Some(d) = cg.bias {
                    acc(*bias, d)?;
                }
            }
            Op::Relu(x) => {
                let d = self.value(*x).data().iter().zip(gd).map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 }).collect();
                acc(*x, d)?;
            }
            Op::Softmax(x) => {
                let (_, _, c) = node.value.dims3()?;
                let mut d = vec![0.0; gd.len()];
                for ((dp, yp), gp) in d.chunks_exact_mut(c).zip(node.value.data().chunks_exact(c)).zip(gd.chunks_exact(c)) {
                    let dot: f64 = yp.iter().zip(gp).map(|(a, b)| a * b).sum();
                    for ((o, &y), &gv) in dp.iter_mut().zip(yp).zip(gp) {
                        *o = y * (gv - dot);
                    }
                }
                acc(*x, d)?;
            }
            Op::Concat { a, b } => {
                let (_, _, ka) = self.value(*a).dims3()?;
                let (_, _, kb) = self.value(*b).dims3()?;
                if needs(*a) {
                    let d = gd.chunks_exact(ka + kb).flat_map(|p| p[..ka].iter().copied()).collect();
                    acc(*a, d)?;
                }
                if needs(*b) {
                    let d = gd.chunks_exact(ka + kb).flat_map(|p| p[ka..].iter().copied()).collect();
                    acc(*b, d)?;
                }
            }
            Op::SliceChannels { x, start } => {
                let (_, _, c) = self.value(*x).dims3()?;
                let (_, _, len) = node.value.dims3()?;
                let mut d = vec![0.0; self.value(*x).len()];
                for (dp, gp) in d.chunks_exact_mut(c).zip(gd.chunks_exact(len)) {
                    dp[*start..*start + len].copy_from_slice(gp);
                }
                acc(*x, d)?;
            }
            Op::CosineMap { features, proto } => {
                let f = self.value(*features);
                let (_, _, k) = f.dims3()?;
                let p = self.value(*proto).data();
                let pn = self.value(*proto).norm();
                let mut df = vec![0.0; f.len()];
                let mut dp = vec![0.0; k];
                for ((fp, dfp), (&m, &gv)) in f.data().chunks_exact(k).zip(df.chunks_exact_mut(k)).zip(node.value.data().iter().zip(gd)) {
                    let fnorm = fp.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if fnorm < COSINE_EPS || gv == 0.0 {
                        continue;
                    }
                    let inv = 1.0 / (fnorm * pn);
                    for i in 0..k {
                        dfp[i] = gv * (p[i] * inv - m * fp[i] / (fnorm * fnorm));
                        dp[i] += gv * (fp[i] * inv - m * p[i] / (pn * pn));
                    }
                }
                if needs(*features) {
                    acc(*features, df)?;
                }
                if needs(*proto) {
                    acc(*proto, dp)?;
                }
            }
            Op::MaskedMean { features, mask, count } => {
                let k = gd.len();
                let scale = 1.0 / *count as f64;
                let mut d = vec![0.0; self.value(*features).len()];
                for (dp, _) in d.chunks_exact_mut(k).zip(mask).filter(|(_, &m)| m) {
                    for (o, &gv) in dp.iter_mut().zip(gd) {
                        *o = gv * scale;
                    }
                }
                acc(*features, d)?;
            }
            Op::Attend { h, m } => {
                let hv = self.value(*h);
                let (_, _, k) = hv.dims3()?;
                let mv = self.value(*m).data();
                if needs(*h) {
                    let mut d = gd.to_vec();
                    for (dp, &a) in d.chunks_exact_mut(k).zip(mv) {
                        dp.iter_mut().for_each(|v| *v *= 1.0 + a);
                    }
                    acc(*h, d)?;
                }
                if needs(*m) {
                    let d = hv.data().chunks_exact(k).zip(gd.chunks_exact(k)).map(|(hp, gp)| hp.iter().zip(gp).map(|(a, b)| a * b).sum()).collect();
                    acc(*m, d)?;
                }
            }
            Op::StackMaps(maps) => {
                let c = maps.len();
                for (ci, m) in maps.iter().enumerate() {
                    if needs(*m) {
                        let d = gd.chunks_exact(c).map(|p| p[ci]).collect();
                        acc(*m, d)?;
                    }
                }
            }
            Op::MeanOf(xs) => {
                let n = xs.len() as f64;
                for x in xs {
                    if needs(*x) {
                        acc(*x, gd.iter().map(|v| v / n).collect())?;
                    }
                }
            }
            Op::Affine { x, scale } => acc(*x, gd.iter().map(|v| v * scale).collect())?,
            Op::Add(a, b) => {
                for x in [a, b] {
                    if needs(*x) {
                        acc(*x, gd.to_vec())?;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if needs(*a) {
                    acc(*a, gd.iter().zip(vb).map(|(g, y)| g * y).collect())?;
                }
                if needs(*b) {
                    acc(*b, gd.iter().zip(va).map(|(g, x)| g * x).collect())?;
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                acc(*x, vec![gd[0]; n])?;
            }
            Op::Nll { probs, targets, clamp } => {
                let pv = self.value(*probs);
                let (_, _, c) = pv.dims3()?;
                let n = targets.len() as f64;
                let mut d = vec![0.0; pv.len()];
                for (i, &t) in targets.iter().enumerate() {
                    let p = pv.data()[i * c + t];
                    if p > *clamp {
                        d[i * c + t] = -gd[0] / (n * p);
                    }
                }
                acc(*probs, d)?;
            }
        }
        Ok(())
    }
}

/// Largest `|analytic - central difference| / max(1, |analytic|)` over every
/// coordinate of every input. `f` receives one trainable leaf per point and
/// must return a scalar node.
pub fn grad_check<F>(points: &[Tensor], step: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(contract_err!("grad_check step must be positive"));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = points.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let eval = |pts: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = pts.iter().map(|p| g.constant(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };
    let mut worst = 0.0f64;
    let mut pts = points.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(points[i].shape()));
        for j in 0..points[i].len() {
            let orig = pts[i].data()[j];
            pts[i].data_mut()[j] = orig + step;
            let up = eval(&pts)?;
            pts[i].data_mut()[j] = orig - step;
            let down = eval(&pts)?;
            pts[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.data()[j];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}
