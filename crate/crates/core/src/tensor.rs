//! Dense tensors and a small reverse-mode tape. Single-threaded and
//! deterministic; sized for 64x64 tiles, not for GPUs.

use std::cell::RefCell;
use std::rc::Rc;

use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: &[usize], data: Vec<S>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape/data mismatch");
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![S::zero(); shape.iter().product()] }
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![v; shape.iter().product()] }
    }

    pub fn scalar(v: S) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn item(&self) -> S {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn reshaped(&self, shape: &[usize]) -> Tensor<S> {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        Tensor { shape: shape.to_vec(), data: self.data.clone() }
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Tensor<S> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip(&self, other: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
        assert_eq!(self.shape, other.shape, "shape mismatch");
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Tensor { shape: self.shape.clone(), data }
    }

    pub fn add(&self, other: &Tensor<S>) -> Tensor<S> {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor<S>) -> Tensor<S> {
        self.zip(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor<S>) -> Tensor<S> {
        self.zip(other, |a, b| a * b)
    }

    pub fn scale(&self, k: S) -> Tensor<S> {
        self.map(|v| v * k)
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn accumulate(&mut self, other: &Tensor<S>) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> S {
        self.data.iter().fold(S::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| T::from_f64_(v.to_f64_())).collect() }
    }
}

// ---------------------------------------------------------------------------
// raw kernels, shared by forward and backward paths
// ---------------------------------------------------------------------------

/// a[m,k] * b[k,n] -> [m,n]
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    assert_eq!(k, k2, "matmul inner dim mismatch");
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor { shape: vec![m, n], data: out }
}

/// a[m,k] * b[n,k]^T -> [m,n]
pub fn matmul_nt<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let (m, k) = (a.shape[0], a.shape[1]);
    let (n, k2) = (b.shape[0], b.shape[1]);
    assert_eq!(k, k2, "matmul_nt inner dim mismatch");
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b.data[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            out[i * n + j] = acc;
        }
    }
    Tensor { shape: vec![m, n], data: out }
}

/// a[k,m]^T * b[k,n] -> [m,n]
pub fn matmul_tn<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let (k, m) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    assert_eq!(k, k2, "matmul_tn inner dim mismatch");
    let mut out = vec![S::zero(); m * n];
    for p in 0..k {
        let arow = &a.data[p * m..(p + 1) * m];
        let brow = &b.data[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor { shape: vec![m, n], data: out }
}

/// Same-padding stride-1 convolution. x: [C,H,W], w: [O,C,kh,kw], b: [O].
pub fn conv2d<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let (c, h, wd) = (x.shape[0], x.shape[1], x.shape[2]);
    let (o, c2, kh, kw) = (w.shape[0], w.shape[1], w.shape[2], w.shape[3]);
    assert_eq!(c, c2, "conv2d channel mismatch");
    assert_eq!(b.shape, vec![o]);
    let (ph, pw) = (kh / 2, kw / 2);
    let mut out = vec![S::zero(); o * h * wd];
    for oc in 0..o {
        let bias = b.data[oc];
        let oplane = &mut out[oc * h * wd..(oc + 1) * h * wd];
        for v in oplane.iter_mut() {
            *v = bias;
        }
        for ic in 0..c {
            let xplane = &x.data[ic * h * wd..(ic + 1) * h * wd];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = w.data[((oc * c + ic) * kh + ky) * kw + kx];
                    if wv == S::zero() {
                        continue;
                    }
                    let dy = ky as isize - ph as isize;
                    let dx = kx as isize - pw as isize;
                    let y0 = (-dy).max(0) as usize;
                    let y1 = (h as isize).min(h as isize - dy) as usize;
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (wd as isize).min(wd as isize - dx) as usize;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let orow = &mut oplane[y * wd + x0..y * wd + x1];
                        let xrow = &xplane[sy * wd + (x0 as isize + dx) as usize..sy * wd + (x1 as isize + dx) as usize];
                        for (ov, &xv) in orow.iter_mut().zip(xrow) {
                            *ov += wv * xv;
                        }
                    }
                }
            }
        }
    }
    Tensor { shape: vec![o, h, wd], data: out }
}

/// Gradient of conv2d wrt its input: full correlation of gy with the kernel.
pub fn conv2d_backward_input<S: Scalar>(gy: &Tensor<S>, w: &Tensor<S>) -> Tensor<S> {
    let (o, h, wd) = (gy.shape[0], gy.shape[1], gy.shape[2]);
    let (o2, c, kh, kw) = (w.shape[0], w.shape[1], w.shape[2], w.shape[3]);
    assert_eq!(o, o2);
    let (ph, pw) = (kh / 2, kw / 2);
    let mut gx = vec![S::zero(); c * h * wd];
    for oc in 0..o {
        let gplane = &gy.data[oc * h * wd..(oc + 1) * h * wd];
        for ic in 0..c {
            let xplane = &mut gx[ic * h * wd..(ic + 1) * h * wd];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = w.data[((oc * c + ic) * kh + ky) * kw + kx];
                    if wv == S::zero() {
                        continue;
                    }
                    let dy = ky as isize - ph as isize;
                    let dx = kx as isize - pw as isize;
                    let y0 = (-dy).max(0) as usize;
                    let y1 = (h as isize).min(h as isize - dy) as usize;
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (wd as isize).min(wd as isize - dx) as usize;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let grow = &gplane[y * wd + x0..y * wd + x1];
                        let xrow = &mut xplane[sy * wd + (x0 as isize + dx) as usize..sy * wd + (x1 as isize + dx) as usize];
                        for (xv, &gv) in xrow.iter_mut().zip(grow) {
                            *xv += wv * gv;
                        }
                    }
                }
            }
        }
    }
    Tensor { shape: vec![c, h, wd], data: gx }
}

pub fn conv2d_backward_weight<S: Scalar>(gy: &Tensor<S>, x: &Tensor<S>, kh: usize, kw: usize) -> Tensor<S> {
    let (o, h, wd) = (gy.shape[0], gy.shape[1], gy.shape[2]);
    let c = x.shape[0];
    let (ph, pw) = (kh / 2, kw / 2);
    let mut gw = vec![S::zero(); o * c * kh * kw];
    for oc in 0..o {
        let gplane = &gy.data[oc * h * wd..(oc + 1) * h * wd];
        for ic in 0..c {
            let xplane = &x.data[ic * h * wd..(ic + 1) * h * wd];
            for ky in 0..kh {
                for kx in 0..kw {
                    let dy = ky as isize - ph as isize;
                    let dx = kx as isize - pw as isize;
                    let y0 = (-dy).max(0) as usize;
                    let y1 = (h as isize).min(h as isize - dy) as usize;
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (wd as isize).min(wd as isize - dx) as usize;
                    let mut acc = S::zero();
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let grow = &gplane[y * wd + x0..y * wd + x1];
                        let xrow = &xplane[sy * wd + (x0 as isize + dx) as usize..sy * wd + (x1 as isize + dx) as usize];
                        for (&gv, &xv) in grow.iter().zip(xrow) {
                            acc += gv * xv;
                        }
                    }
                    gw[((oc * c + ic) * kh + ky) * kw + kx] = acc;
                }
            }
        }
    }
    Tensor { shape: vec![o, c, kh, kw], data: gw }
}

pub fn conv2d_backward_bias<S: Scalar>(gy: &Tensor<S>) -> Tensor<S> {
    let (o, h, wd) = (gy.shape[0], gy.shape[1], gy.shape[2]);
    let mut gb = vec![S::zero(); o];
    for oc in 0..o {
        gb[oc] = gy.data[oc * h * wd..(oc + 1) * h * wd].iter().copied().sum();
    }
    Tensor { shape: vec![o], data: gb }
}

pub fn avg_pool2<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
    assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even extents");
    let (oh, ow) = (h / 2, w / 2);
    let quarter = S::from_f64_(0.25);
    let mut out = vec![S::zero(); c * oh * ow];
    for ic in 0..c {
        let xp = &x.data[ic * h * w..(ic + 1) * h * w];
        let op = &mut out[ic * oh * ow..(ic + 1) * oh * ow];
        for y in 0..oh {
            for xi in 0..ow {
                let s = xp[(2 * y) * w + 2 * xi]
                    + xp[(2 * y) * w + 2 * xi + 1]
                    + xp[(2 * y + 1) * w + 2 * xi]
                    + xp[(2 * y + 1) * w + 2 * xi + 1];
                op[y * ow + xi] = s * quarter;
            }
        }
    }
    Tensor { shape: vec![c, oh, ow], data: out }
}

pub fn upsample2<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
    let (oh, ow) = (h * 2, w * 2);
    let mut out = vec![S::zero(); c * oh * ow];
    for ic in 0..c {
        let xp = &x.data[ic * h * w..(ic + 1) * h * w];
        let op = &mut out[ic * oh * ow..(ic + 1) * oh * ow];
        for y in 0..oh {
            for xi in 0..ow {
                op[y * ow + xi] = xp[(y / 2) * w + xi / 2];
            }
        }
    }
    Tensor { shape: vec![c, oh, ow], data: out }
}

pub fn transpose2<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let (m, n) = (x.shape[0], x.shape[1]);
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x.data[i * n + j];
        }
    }
    Tensor { shape: vec![n, m], data: out }
}

fn sigmoid<S: Scalar>(v: S) -> S {
    S::one() / (S::one() + (-v).exp())
}

// ---------------------------------------------------------------------------
// tape
// ---------------------------------------------------------------------------

type BackFn<S> = Box<dyn Fn(&Tensor<S>) -> Vec<Tensor<S>>>;

struct Node<S> {
    value: Rc<Tensor<S>>,
    parents: Vec<usize>,
    backward: Option<BackFn<S>>,
}

/// Reverse-mode tape. Build a graph of `Var`s, call `backward` on a scalar
/// output, read gradients per leaf.
pub struct Tape<S: Scalar> {
    nodes: RefCell<Vec<Node<S>>>,
}

#[derive(Clone, Copy)]
pub struct Var<'t, S: Scalar> {
    tape: &'t Tape<S>,
    id: usize,
}

pub struct Grads<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Grads<S> {
    pub fn get(&self, v: Var<'_, S>) -> Option<&Tensor<S>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn var(&self, value: Tensor<S>) -> Var<'_, S> {
        self.push(value, vec![], None)
    }

    fn push(&self, value: Tensor<S>, parents: Vec<usize>, backward: Option<BackFn<S>>) -> Var<'_, S> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { value: Rc::new(value), parents, backward });
        Var { tape: self, id }
    }

    /// Attach a fused op with a caller-supplied backward. The closure gets
    /// the output gradient and must return one gradient per parent, in order.
    pub fn push_op(
        &self,
        value: Tensor<S>,
        parents: &[Var<'_, S>],
        backward: impl Fn(&Tensor<S>) -> Vec<Tensor<S>> + 'static,
    ) -> Var<'_, S> {
        let ids = parents.iter().map(|p| p.id).collect();
        self.push(value, ids, Some(Box::new(backward)))
    }

    pub fn backward(&self, root: Var<'_, S>) -> Grads<S> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[root.id].value.len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; nodes.len()];
        grads[root.id] = Some(Tensor::scalar(S::one()));
        for id in (0..=root.id).rev() {
            let Some(gout) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Some(back) = &node.backward {
                let pgrads = back(&gout);
                assert_eq!(pgrads.len(), node.parents.len());
                for (pid, pg) in node.parents.iter().zip(pgrads) {
                    match &mut grads[*pid] {
                        Some(acc) => acc.accumulate(&pg),
                        slot => *slot = Some(pg),
                    }
                }
            }
            grads[id] = Some(gout);
        }
        Grads { grads }
    }
}

impl<'t, S: Scalar> Var<'t, S> {
    pub fn value(&self) -> Rc<Tensor<S>> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    fn unary(&self, value: Tensor<S>, back: impl Fn(&Tensor<S>) -> Tensor<S> + 'static) -> Var<'t, S> {
        self.tape.push(value, vec![self.id], Some(Box::new(move |g| vec![back(g)])))
    }

    pub fn add(&self, other: Var<'t, S>) -> Var<'t, S> {
        let v = self.value().add(&other.value());
        self.tape.push(v, vec![self.id, other.id], Some(Box::new(|g| vec![g.clone(), g.clone()])))
    }

    pub fn sub(&self, other: Var<'t, S>) -> Var<'t, S> {
        let v = self.value().sub(&other.value());
        self.tape
            .push(v, vec![self.id, other.id], Some(Box::new(|g| vec![g.clone(), g.scale(-S::one())])))
    }

    pub fn mul(&self, other: Var<'t, S>) -> Var<'t, S> {
        let a = self.value();
        let b = other.value();
        let v = a.mul(&b);
        self.tape.push(
            v,
            vec![self.id, other.id],
            Some(Box::new(move |g| vec![g.mul(&b), g.mul(&a)])),
        )
    }

    pub fn scale(&self, k: S) -> Var<'t, S> {
        self.unary(self.value().scale(k), move |g| g.scale(k))
    }

    pub fn add_scalar(&self, k: S) -> Var<'t, S> {
        self.unary(self.value().map(|v| v + k), |g| g.clone())
    }

    pub fn square(&self) -> Var<'t, S> {
        let a = self.value();
        self.unary(a.map(|v| v * v), move |g| {
            g.zip(&a, |gv, av| gv * (av + av))
        })
    }

    pub fn silu(&self) -> Var<'t, S> {
        let a = self.value();
        let v = a.map(|x| x * sigmoid(x));
        self.unary(v, move |g| {
            g.zip(&a, |gv, x| {
                let s = sigmoid(x);
                gv * (s + x * s * (S::one() - s))
            })
        })
    }

    pub fn sum(&self) -> Var<'t, S> {
        let a = self.value();
        let shape = a.shape().to_vec();
        self.unary(Tensor::scalar(a.sum()), move |g| Tensor::full(&shape, g.item()))
    }

    pub fn mean(&self) -> Var<'t, S> {
        let n = S::from_usize_(self.value().len());
        self.sum().scale(S::one() / n)
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<'t, S> {
        let old = self.shape();
        let v = self.value().reshaped(shape);
        self.unary(v, move |g| g.reshaped(&old))
    }

    /// [m,k] x [k,n]
    pub fn matmul(&self, other: Var<'t, S>) -> Var<'t, S> {
        let a = self.value();
        let b = other.value();
        let v = matmul(&a, &b);
        self.tape.push(
            v,
            vec![self.id, other.id],
            Some(Box::new(move |g| vec![matmul_nt(g, &b), matmul_tn(&a, g)])),
        )
    }

    /// self[m,k] x other[n,k]^T -> [m,n]; used for Gram matrices.
    pub fn matmul_nt(&self, other: Var<'t, S>) -> Var<'t, S> {
        let a = self.value();
        let b = other.value();
        let v = matmul_nt(&a, &b);
        self.tape.push(
            v,
            vec![self.id, other.id],
            Some(Box::new(move |g| vec![matmul(g, &b), matmul_tn(g, &a)])),
        )
    }

    pub fn conv2d(&self, w: Var<'t, S>, b: Var<'t, S>) -> Var<'t, S> {
        let x = self.value();
        let wv = w.value();
        let (kh, kw) = (wv.shape()[2], wv.shape()[3]);
        let v = conv2d(&x, &wv, &b.value());
        self.tape.push(
            v,
            vec![self.id, w.id, b.id],
            Some(Box::new(move |g| {
                vec![
                    conv2d_backward_input(g, &wv),
                    conv2d_backward_weight(g, &x, kh, kw),
                    conv2d_backward_bias(g),
                ]
            })),
        )
    }

    pub fn avg_pool2(&self) -> Var<'t, S> {
        let v = avg_pool2(&self.value());
        self.unary(v, |g| {
            let quarter = S::from_f64_(0.25);
            upsample2(g).scale(quarter)
        })
    }

    pub fn upsample2(&self) -> Var<'t, S> {
        let v = upsample2(&self.value());
        self.unary(v, |g| avg_pool2(g).scale(S::from_f64_(4.0)))
    }

    /// Channel concat of [C1,H,W] and [C2,H,W].
    pub fn concat_c(&self, other: Var<'t, S>) -> Var<'t, S> {
        let a = self.value();
        let b = other.value();
        let (c1, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let c2 = b.shape()[0];
        assert_eq!(&b.shape()[1..], &[h, w], "concat_c spatial mismatch");
        let mut data = Vec::with_capacity((c1 + c2) * h * w);
        data.extend_from_slice(a.data());
        data.extend_from_slice(b.data());
        let v = Tensor::new(&[c1 + c2, h, w], data);
        self.tape.push(
            v,
            vec![self.id, other.id],
            Some(Box::new(move |g| {
                let split = c1 * h * w;
                vec![
                    Tensor::new(&[c1, h, w], g.data()[..split].to_vec()),
                    Tensor::new(&[c2, h, w], g.data()[split..].to_vec()),
                ]
            })),
        )
    }

    /// x[C,H,W] + bias[C] broadcast over space.
    pub fn add_channel_bias(&self, bias: Var<'t, S>) -> Var<'t, S> {
        let x = self.value();
        let bv = bias.value();
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        assert_eq!(bv.shape(), &[c]);
        let mut data = x.data().to_vec();
        for ic in 0..c {
            let add = bv.data()[ic];
            for v in &mut data[ic * h * w..(ic + 1) * h * w] {
                *v += add;
            }
        }
        let v = Tensor::new(&[c, h, w], data);
        self.tape.push(
            v,
            vec![self.id, bias.id],
            Some(Box::new(move |g| {
                let mut gb = vec![S::zero(); c];
                for ic in 0..c {
                    gb[ic] = g.data()[ic * h * w..(ic + 1) * h * w].iter().copied().sum();
                }
                vec![g.clone(), Tensor::new(&[c], gb)]
            })),
        )
    }

    pub fn transpose2(&self) -> Var<'t, S> {
        let v = transpose2(&self.value());
        self.unary(v, |g| transpose2(g))
    }

    /// Sum of selected rows of a [V,E] table; backward scatters into the table.
    pub fn row_sum(&self, indices: &[usize]) -> Var<'t, S> {
        let table = self.value();
        let (v, e) = (table.shape()[0], table.shape()[1]);
        let idx: Vec<usize> = indices.to_vec();
        let mut out = vec![S::zero(); e];
        for &i in &idx {
            assert!(i < v, "row index out of range");
            for (o, &t) in out.iter_mut().zip(&table.data()[i * e..(i + 1) * e]) {
                *o += t;
            }
        }
        self.unary(Tensor::new(&[e], out), move |g| {
            let mut gt = Tensor::zeros(&[v, e]);
            for &i in &idx {
                for (t, &gv) in gt.data_mut()[i * e..(i + 1) * e].iter_mut().zip(g.data()) {
                    *t += gv;
                }
            }
            gt
        })
    }
}
