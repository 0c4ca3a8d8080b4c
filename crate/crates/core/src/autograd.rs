//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Node ids grow
//! monotonically, so reverse id order is a valid topological order for the
//! backward sweep. Parameters are bound by address with [`Tape::param`]; using
//! the same parameter twice in one graph yields one leaf whose gradient
//! accumulates both uses.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::tensor::Tensor;

type Backward = Box<dyn Fn(&Tensor) -> Vec<(usize, Tensor)>>;

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    backward: Option<Backward>,
}

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<usize, usize>>,
    record: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A tape that records backward closures.
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            record: true,
        }
    }

    /// A tape for forward-only evaluation; `backward` yields no gradients.
    pub fn inference() -> Self {
        Self {
            record: false,
            ..Self::new()
        }
    }

    fn push(&self, value: Tensor, requires_grad: bool, backward: Option<Backward>) -> Var<'_> {
        let requires_grad = requires_grad && self.record;
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            backward: if requires_grad { backward } else { None },
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A leaf that never receives gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, false, None)
    }

    /// A free leaf that receives gradient (not tied to a parameter).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, true, None)
    }

    /// Binds a parameter tensor; repeated calls with the same tensor return the same leaf.
    pub fn param(&self, param: &Tensor) -> Var<'_> {
        let key = param as *const Tensor as usize;
        if let Some(&id) = self.params.borrow().get(&key) {
            return Var { tape: self, id };
        }
        let var = self.leaf(param.clone());
        self.params.borrow_mut().insert(key, var.id);
        var
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.id].value.len(), 1, "backward requires a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..=loss.id).map(|_| None).collect();
        if nodes[loss.id].requires_grad {
            grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), 1.0));
        }
        for id in (0..=loss.id).rev() {
            let Some(node_backward) = nodes[id].backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            for (parent, pg) in node_backward(&g) {
                debug_assert!(parent < id);
                match &mut grads[parent] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Gradients {
            grads,
            params: self.params.borrow().clone(),
        }
    }
}

/// Gradients produced by [`Tape::backward`]; only leaves retain theirs.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: HashMap<usize, usize>,
}

impl Gradients {
    /// Gradient of the loss with respect to a bound parameter.
    pub fn wrt(&self, param: &Tensor) -> Option<&Tensor> {
        let key = param as *const Tensor as usize;
        let id = *self.params.get(&key)?;
        self.grads.get(id)?.as_ref()
    }

    pub fn of(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id)?.as_ref()
    }
}

#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

fn needs(vars: &[Var<'_>]) -> Vec<Option<usize>> {
    let nodes = vars[0].tape.nodes.borrow();
    vars.iter().map(|v| nodes[v.id].requires_grad.then_some(v.id)).collect()
}

#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn unary(self, value: Tensor, backward: impl Fn(&Tensor) -> Tensor + 'static) -> Var<'t> {
        let id = self.id;
        let rg = self.requires_grad();
        self.tape
            .push(value, rg, Some(Box::new(move |g: &Tensor| vec![(id, backward(g))])))
    }

    // ---- elementwise -------------------------------------------------

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "add: shape mismatch");
        let value = a.zip_map(&b, |x, y| x + y);
        let parents = needs(&[self, other]);
        let rg = parents.iter().any(Option::is_some);
        self.tape.push(
            value,
            rg,
            Some(Box::new(move |g: &Tensor| {
                parents.iter().flatten().map(|&p| (p, g.clone())).collect()
            })),
        )
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "sub: shape mismatch");
        let value = a.zip_map(&b, |x, y| x - y);
        let parents = needs(&[self, other]);
        let rg = parents.iter().any(Option::is_some);
        self.tape.push(
            value,
            rg,
            Some(Box::new(move |g: &Tensor| {
                let mut out = Vec::new();
                if let Some(p) = parents[0] {
                    out.push((p, g.clone()));
                }
                if let Some(p) = parents[1] {
                    out.push((p, g.map(|v| -v)));
                }
                out
            })),
        )
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "mul: shape mismatch");
        let value = a.zip_map(&b, |x, y| x * y);
        let parents = needs(&[self, other]);
        let rg = parents.iter().any(Option::is_some);
        self.tape.push(
            value,
            rg,
            Some(Box::new(move |g: &Tensor| {
                let mut out = Vec::new();
                if let Some(p) = parents[0] {
                    out.push((p, g.zip_map(&b, |gv, bv| gv * bv)));
                }
                if let Some(p) = parents[1] {
                    out.push((p, g.zip_map(&a, |gv, av| gv * av)));
                }
                out
            })),
        )
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(self, weights: &Tensor) -> Var<'t> {
        let a = self.value();
        assert_eq!(a.shape(), weights.shape(), "mul_const: shape mismatch");
        let w = weights.clone();
        let value = a.zip_map(&w, |x, y| x * y);
        self.unary(value, move |g| g.zip_map(&w, |gv, wv| gv * wv))
    }

    pub fn scale(self, k: f64) -> Var<'t> {
        let value = self.value().map(|v| v * k);
        self.unary(value, move |g| g.map(|v| v * k))
    }

    pub fn add_scalar(self, k: f64) -> Var<'t> {
        let value = self.value().map(|v| v + k);
        self.unary(value, |g| g.clone())
    }

    pub fn abs(self) -> Var<'t> {
        let a = self.value();
        let value = a.map(f64::abs);
        self.unary(value, move |g| {
            g.zip_map(&a, |gv, av| {
                if av > 0.0 {
                    gv
                } else if av < 0.0 {
                    -gv
                } else {
                    0.0
                }
            })
        })
    }

    pub fn square(self) -> Var<'t> {
        let a = self.value();
        let value = a.map(|v| v * v);
        self.unary(value, move |g| g.zip_map(&a, |gv, av| 2.0 * gv * av))
    }

    pub fn relu(self) -> Var<'t> {
        self.leaky_relu(0.0)
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        let a = self.value();
        let value = a.map(|v| if v > 0.0 { v } else { slope * v });
        self.unary(value, move |g| {
            g.zip_map(&a, |gv, av| if av > 0.0 { gv } else { slope * gv })
        })
    }

    pub fn tanh(self) -> Var<'t> {
        let y = Rc::new(self.value().map(f64::tanh));
        let saved = y.clone();
        self.unary((*y).clone(), move |g| g.zip_map(&saved, |gv, yv| gv * (1.0 - yv * yv)))
    }

    pub fn sigmoid(self) -> Var<'t> {
        let y = Rc::new(self.value().map(sigmoid));
        let saved = y.clone();
        self.unary((*y).clone(), move |g| g.zip_map(&saved, |gv, yv| gv * yv * (1.0 - yv)))
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(self) -> Var<'t> {
        let a = self.value();
        let value = a.map(|v| v.max(0.0) + (-v.abs()).exp().ln_1p());
        self.unary(value, move |g| g.zip_map(&a, |gv, av| gv * sigmoid(av)))
    }

    // ---- reductions --------------------------------------------------

    pub fn sum(self) -> Var<'t> {
        let a = self.value();
        let shape = a.shape().to_vec();
        self.unary(Tensor::scalar(a.sum()), move |g| Tensor::full(&shape, g.item()))
    }

    pub fn mean(self) -> Var<'t> {
        let a = self.value();
        let shape = a.shape().to_vec();
        let n = a.len() as f64;
        self.unary(Tensor::scalar(a.mean()), move |g| Tensor::full(&shape, g.item() / n))
    }

    /// Mean over every axis but the leading one: `(N, ...) -> (N)`.
    pub fn mean_per_sample(self) -> Var<'t> {
        let a = self.value();
        let shape = a.shape().to_vec();
        let n = shape[0];
        let per = a.len() / n;
        let means: Vec<f64> = a
            .data()
            .chunks(per)
            .map(|c| c.iter().sum::<f64>() / per as f64)
            .collect();
        let value = Tensor::from_vec(&[n], means).expect("mean_per_sample shape");
        self.unary(value, move |g| {
            let mut out = Tensor::zeros(&shape);
            for (chunk, gv) in out.data_mut().chunks_mut(per).zip(g.data()) {
                chunk.fill(gv / per as f64);
            }
            out
        })
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let a = self.value();
        let old = a.shape().to_vec();
        let value = (*a).clone().reshape(shape).expect("reshape: size mismatch");
        self.unary(value, move |g| g.clone().reshape(&old).expect("reshape grad"))
    }

    // ---- dense layers --------------------------------------------------

    /// `(N, K) x (K, M) -> (N, M)`.
    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let (n, k) = (a.shape()[0], a.shape()[1]);
        let (k2, m) = (b.shape()[0], b.shape()[1]);
        assert_eq!(k, k2, "matmul: inner dimension mismatch");
        let mut out = Tensor::zeros(&[n, m]);
        gemm(n, k, m, a.data(), false, b.data(), false, out.data_mut(), 0.0);
        let parents = needs(&[self, other]);
        let rg = parents.iter().any(Option::is_some);
        self.tape.push(
            out,
            rg,
            Some(Box::new(move |g: &Tensor| {
                let mut grads = Vec::new();
                if let Some(p) = parents[0] {
                    let mut ga = Tensor::zeros(&[n, k]);
                    gemm(n, m, k, g.data(), false, b.data(), true, ga.data_mut(), 0.0);
                    grads.push((p, ga));
                }
                if let Some(p) = parents[1] {
                    let mut gb = Tensor::zeros(&[k, m]);
                    gemm(k, n, m, a.data(), true, g.data(), false, gb.data_mut(), 0.0);
                    grads.push((p, gb));
                }
                grads
            })),
        )
    }

    /// Adds a `(M)` bias to every row of an `(N, M)` matrix.
    pub fn add_row_bias(self, bias: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), bias.value());
        let m = b.len();
        assert_eq!(a.shape()[1], m, "add_row_bias: width mismatch");
        let mut value = (*a).clone();
        for row in value.data_mut().chunks_mut(m) {
            for (v, bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
        let parents = needs(&[self, bias]);
        let rg = parents.iter().any(Option::is_some);
        let bshape = b.shape().to_vec();
        self.tape.push(
            value,
            rg,
            Some(Box::new(move |g: &Tensor| {
                let mut grads = Vec::new();
                if let Some(p) = parents[0] {
                    grads.push((p, g.clone()));
                }
                if let Some(p) = parents[1] {
                    let mut gb = Tensor::zeros(&bshape);
                    for row in g.data().chunks(m) {
                        for (acc, gv) in gb.data_mut().iter_mut().zip(row) {
                            *acc += gv;
                        }
                    }
                    grads.push((p, gb));
                }
                grads
            })),
        )
    }

    // ---- image ops -----------------------------------------------------

    /// 2-D cross-correlation with zero padding. `weight` is `(O, C, kh, kw)`,
    /// `bias` is `(O)`.
    pub fn conv2d(self, weight: Var<'t>, bias: Option<Var<'t>>, stride: usize, padding: usize) -> Var<'t> {
        let x = self.value();
        let w = weight.value();
        let geom = ConvGeom::new(x.shape(), w.shape(), stride, padding);
        let out = conv_forward(&x, &w, bias.map(|b| b.value()).as_deref(), &geom);
        let mut vars = vec![self, weight];
        vars.extend(bias);
        let parents = needs(&vars);
        let rg = parents.iter().any(Option::is_some);
        self.tape.push(
            out,
            rg,
            Some(Box::new(move |g: &Tensor| conv_backward(g, &x, &w, &geom, &parents))),
        )
    }

    /// Reflection padding on both spatial axes.
    pub fn reflect_pad(self, pad: usize) -> Var<'t> {
        let x = self.value();
        let (n, c, h, w) = x.dims4().expect("reflect_pad expects NCHW");
        assert!(pad < h && pad < w, "reflect_pad: pad {pad} too large for {h}x{w}");
        let (hp, wp) = (h + 2 * pad, w + 2 * pad);
        let rows: Vec<usize> = (0..hp).map(|i| reflect(i as isize - pad as isize, h)).collect();
        let cols: Vec<usize> = (0..wp).map(|j| reflect(j as isize - pad as isize, w)).collect();
        let mut out = Tensor::zeros(&[n, c, hp, wp]);
        for (plane_out, plane_in) in out.data_mut().chunks_mut(hp * wp).zip(x.data().chunks(h * w)) {
            for (i, &si) in rows.iter().enumerate() {
                for (j, &sj) in cols.iter().enumerate() {
                    plane_out[i * wp + j] = plane_in[si * w + sj];
                }
            }
        }
        self.unary(out, move |g| {
            let mut gx = Tensor::zeros(&[n, c, h, w]);
            for (plane_in, plane_out) in gx.data_mut().chunks_mut(h * w).zip(g.data().chunks(hp * wp)) {
                for (i, &si) in rows.iter().enumerate() {
                    for (j, &sj) in cols.iter().enumerate() {
                        plane_in[si * w + sj] += plane_out[i * wp + j];
                    }
                }
            }
            gx
        })
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2x(self) -> Var<'t> {
        let x = self.value();
        let (n, c, h, w) = x.dims4().expect("upsample2x expects NCHW");
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = Tensor::zeros(&[n, c, h2, w2]);
        for (po, pi) in out.data_mut().chunks_mut(h2 * w2).zip(x.data().chunks(h * w)) {
            for i in 0..h2 {
                for j in 0..w2 {
                    po[i * w2 + j] = pi[(i / 2) * w + j / 2];
                }
            }
        }
        self.unary(out, move |g| {
            let mut gx = Tensor::zeros(&[n, c, h, w]);
            for (pi, po) in gx.data_mut().chunks_mut(h * w).zip(g.data().chunks(h2 * w2)) {
                for i in 0..h2 {
                    for j in 0..w2 {
                        pi[(i / 2) * w + j / 2] += po[i * w2 + j];
                    }
                }
            }
            gx
        })
    }

    /// Per-(sample, channel) normalization to zero mean and unit variance.
    pub fn instance_norm(self, eps: f64) -> Var<'t> {
        let x = self.value();
        let (n, c, h, w) = x.dims4().expect("instance_norm expects NCHW");
        let hw = h * w;
        let mut xhat = Tensor::zeros(&[n, c, h, w]);
        let mut inv_std = Vec::with_capacity(n * c);
        for (po, pi) in xhat.data_mut().chunks_mut(hw).zip(x.data().chunks(hw)) {
            let mean = pi.iter().sum::<f64>() / hw as f64;
            let var = pi.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw as f64;
            let is = 1.0 / (var + eps).sqrt();
            for (o, v) in po.iter_mut().zip(pi) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let saved = Rc::new(xhat);
        let xh = saved.clone();
        self.unary((*saved).clone(), move |g| {
            let mut gx = Tensor::zeros(&[n, c, h, w]);
            for (((pgx, pg), px), is) in gx
                .data_mut()
                .chunks_mut(hw)
                .zip(g.data().chunks(hw))
                .zip(xh.data().chunks(hw))
                .zip(&inv_std)
            {
                let mg = pg.iter().sum::<f64>() / hw as f64;
                let mgx = pg.iter().zip(px).map(|(a, b)| a * b).sum::<f64>() / hw as f64;
                for ((o, gv), xv) in pgx.iter_mut().zip(pg).zip(px) {
                    *o = is * (gv - mg - xv * mgx);
                }
            }
            gx
        })
    }

    /// `y[n,c,:,:] = x[n,c,:,:] * scale[n,c] + shift[n,c]`.
    pub fn channel_affine(self, scale: Var<'t>, shift: Var<'t>) -> Var<'t> {
        let x = self.value();
        let (s, b) = (scale.value(), shift.value());
        let (n, c, h, w) = x.dims4().expect("channel_affine expects NCHW");
        assert_eq!(s.shape(), [n, c], "channel_affine: scale shape");
        assert_eq!(b.shape(), [n, c], "channel_affine: shift shape");
        let hw = h * w;
        let mut out = (*x).clone();
        for ((plane, sv), bv) in out.data_mut().chunks_mut(hw).zip(s.data()).zip(b.data()) {
            for v in plane {
                *v = *v * sv + bv;
            }
        }
        let parents = needs(&[self, scale, shift]);
        let rg = parents.iter().any(Option::is_some);
        self.tape.push(
            out,
            rg,
            Some(Box::new(move |g: &Tensor| {
                let mut grads = Vec::new();
                if let Some(p) = parents[0] {
                    let mut gx = g.clone();
                    for (plane, sv) in gx.data_mut().chunks_mut(hw).zip(s.data()) {
                        plane.iter_mut().for_each(|v| *v *= sv);
                    }
                    grads.push((p, gx));
                }
                if let Some(p) = parents[1] {
                    let data = g
                        .data()
                        .chunks(hw)
                        .zip(x.data().chunks(hw))
                        .map(|(pg, px)| pg.iter().zip(px).map(|(a, b)| a * b).sum())
                        .collect();
                    grads.push((p, Tensor::from_vec(&[n, c], data).expect("scale grad")));
                }
                if let Some(p) = parents[2] {
                    let data = g.data().chunks(hw).map(|pg| pg.iter().sum()).collect();
                    grads.push((p, Tensor::from_vec(&[n, c], data).expect("shift grad")));
                }
                grads
            })),
        )
    }

    /// Concatenates two NCHW tensors along the channel axis.
    pub fn concat_channels(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let (n, ca, h, w) = a.dims4().expect("concat expects NCHW");
        let (n2, cb, h2, w2) = b.dims4().expect("concat expects NCHW");
        assert_eq!((n, h, w), (n2, h2, w2), "concat_channels: shape mismatch");
        let (sa, sb) = (ca * h * w, cb * h * w);
        let mut data = Vec::with_capacity(n * (sa + sb));
        for i in 0..n {
            data.extend_from_slice(&a.data()[i * sa..(i + 1) * sa]);
            data.extend_from_slice(&b.data()[i * sb..(i + 1) * sb]);
        }
        let out = Tensor::from_vec(&[n, ca + cb, h, w], data).expect("concat shape");
        let parents = needs(&[self, other]);
        let rg = parents.iter().any(Option::is_some);
        self.tape.push(
            out,
            rg,
            Some(Box::new(move |g: &Tensor| {
                let mut ga = Vec::with_capacity(n * sa);
                let mut gb = Vec::with_capacity(n * sb);
                for chunk in g.data().chunks(sa + sb) {
                    ga.extend_from_slice(&chunk[..sa]);
                    gb.extend_from_slice(&chunk[sa..]);
                }
                let mut grads = Vec::new();
                if let Some(p) = parents[0] {
                    grads.push((p, Tensor::from_vec(&[n, ca, h, w], ga).expect("grad a")));
                }
                if let Some(p) = parents[1] {
                    grads.push((p, Tensor::from_vec(&[n, cb, h, w], gb).expect("grad b")));
                }
                grads
            })),
        )
    }

    /// Softmax over the channel axis of an NCHW tensor.
    pub fn softmax_channels(self) -> Var<'t> {
        let x = self.value();
        let (n, c, h, w) = x.dims4().expect("softmax expects NCHW");
        let hw = h * w;
        let mut y = Tensor::zeros(&[n, c, h, w]);
        {
            let (xd, yd) = (x.data(), y.data_mut());
            for i in 0..n {
                for p in 0..hw {
                    let idx = |ch: usize| (i * c + ch) * hw + p;
                    let m = (0..c).map(|ch| xd[idx(ch)]).fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = (0..c).map(|ch| (xd[idx(ch)] - m).exp()).sum();
                    for ch in 0..c {
                        yd[idx(ch)] = (xd[idx(ch)] - m).exp() / z;
                    }
                }
            }
        }
        let saved = Rc::new(y);
        let ys = saved.clone();
        self.unary((*saved).clone(), move |g| {
            let mut gx = Tensor::zeros(&[n, c, h, w]);
            let (yd, gd, gxd) = (ys.data(), g.data(), gx.data_mut());
            for i in 0..n {
                for p in 0..hw {
                    let idx = |ch: usize| (i * c + ch) * hw + p;
                    let dot: f64 = (0..c).map(|ch| gd[idx(ch)] * yd[idx(ch)]).sum();
                    for ch in 0..c {
                        gxd[idx(ch)] = yd[idx(ch)] * (gd[idx(ch)] - dot);
                    }
                }
            }
            gx
        })
    }

    /// Mean per-pixel cross-entropy of NCHW class logits against `labels`
    /// (one class index per pixel, in `(n, h, w)` order).
    pub fn cross_entropy(self, labels: &[usize]) -> Var<'t> {
        let x = self.value();
        let (n, c, h, w) = x.dims4().expect("cross_entropy expects NCHW");
        let hw = h * w;
        assert_eq!(labels.len(), n * hw, "cross_entropy: label count");
        let count = (n * hw) as f64;
        let mut probs = Tensor::zeros(&[n, c, h, w]);
        let mut total = 0.0;
        {
            let (xd, pd) = (x.data(), probs.data_mut());
            for i in 0..n {
                for p in 0..hw {
                    let idx = |ch: usize| (i * c + ch) * hw + p;
                    let m = (0..c).map(|ch| xd[idx(ch)]).fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = (0..c).map(|ch| (xd[idx(ch)] - m).exp()).sum();
                    let label = labels[i * hw + p];
                    assert!(label < c, "cross_entropy: label {label} out of range");
                    total -= xd[idx(label)] - m - z.ln();
                    for ch in 0..c {
                        pd[idx(ch)] = (xd[idx(ch)] - m).exp() / z;
                    }
                }
            }
        }
        let labels = labels.to_vec();
        self.unary(Tensor::scalar(total / count), move |g| {
            let scale = g.item() / count;
            let mut gx = probs.clone();
            let gd = gx.data_mut();
            for i in 0..n {
                for p in 0..hw {
                    gd[(i * c + labels[i * hw + p]) * hw + p] -= 1.0;
                }
            }
            gd.iter_mut().for_each(|v| *v *= scale);
            gx
        })
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * n - 2 - i
    } else {
        i
    };
    r as usize
}

/// Row-major `C = A * B + beta * C` where `A` is `m x k` and `B` is `k x n`,
/// each optionally stored transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserted lengths cover every index reachable with these strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Self {
        let [n, c, h, wd] = *x else {
            panic!("conv2d expects NCHW input, got {x:?}")
        };
        let [o, c2, kh, kw] = *w else {
            panic!("conv2d expects OCHW weight, got {w:?}")
        };
        assert_eq!(c, c2, "conv2d: input has {c} channels, weight expects {c2}");
        assert!(
            h + 2 * pad >= kh && wd + 2 * pad >= kw,
            "conv2d: kernel {kh}x{kw} larger than padded input {h}x{wd}"
        );
        Self {
            n,
            c,
            h,
            w: wd,
            o,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (wd + 2 * pad - kw) / stride + 1,
        }
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let plane = g.out_plane();
    for ci in 0..g.c {
        let xc = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let plane = g.out_plane();
    for ci in 0..g.c {
        let xc = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, g: &ConvGeom) -> Tensor {
    let (patch, plane) = (g.patch(), g.out_plane());
    let mut out = Tensor::zeros(&[g.n, g.o, g.ho, g.wo]);
    let mut cols = vec![0.0; patch * plane];
    let in_size = g.c * g.h * g.w;
    for (i, out_n) in out.data_mut().chunks_mut(g.o * plane).enumerate() {
        im2col(&x.data()[i * in_size..(i + 1) * in_size], g, &mut cols);
        gemm(g.o, patch, plane, w.data(), false, &cols, false, out_n, 0.0);
        if let Some(b) = b {
            for (row, bv) in out_n.chunks_mut(plane).zip(b.data()) {
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

fn conv_backward(
    grad: &Tensor,
    x: &Tensor,
    w: &Tensor,
    g: &ConvGeom,
    parents: &[Option<usize>],
) -> Vec<(usize, Tensor)> {
    let (patch, plane) = (g.patch(), g.out_plane());
    let in_size = g.c * g.h * g.w;
    let want_x = parents[0].is_some();
    let want_w = parents[1].is_some();
    let want_b = parents.get(2).copied().flatten().is_some();

    let mut gx = want_x.then(|| Tensor::zeros(&[g.n, g.c, g.h, g.w]));
    let mut gw = want_w.then(|| Tensor::zeros(&[g.o, g.c, g.kh, g.kw]));
    let mut gb = want_b.then(|| Tensor::zeros(&[g.o]));
    let mut cols = vec![0.0; patch * plane];
    for i in 0..g.n {
        let gy = &grad.data()[i * g.o * plane..(i + 1) * g.o * plane];
        if let Some(gw) = gw.as_mut() {
            im2col(&x.data()[i * in_size..(i + 1) * in_size], g, &mut cols);
            gemm(g.o, plane, patch, gy, false, &cols, true, gw.data_mut(), 1.0);
        }
        if let Some(gx) = gx.as_mut() {
            gemm(patch, g.o, plane, w.data(), true, gy, false, &mut cols, 0.0);
            col2im(&cols, g, &mut gx.data_mut()[i * in_size..(i + 1) * in_size]);
        }
        if let Some(gb) = gb.as_mut() {
            for (acc, row) in gb.data_mut().iter_mut().zip(gy.chunks(plane)) {
                *acc += row.iter().sum::<f64>();
            }
        }
    }
    let mut out = Vec::new();
    if let (Some(p), Some(t)) = (parents[0], gx) {
        out.push((p, t));
    }
    if let (Some(p), Some(t)) = (parents[1], gw) {
        out.push((p, t));
    }
    if let (Some(Some(p)), Some(t)) = (parents.get(2), gb) {
        out.push((*p, t));
    }
    out
}
