use std::cell::RefCell;
use std::rc::Rc;

use rayon::prelude::*;

use super::{RcTensor, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Gradient contributions to input nodes, as (node index, flat grad).
type BackFn = Box<dyn Fn(&[f64]) -> Vec<(usize, Vec<f64>)>>;

struct Inner {
    values: Vec<RcTensor>,
    requires: Vec<bool>,
    backward: Vec<Option<BackFn>>,
    spent: bool,
}

/// Records a forward computation; [`Tape::backward`] replays it in exact
/// reverse order. Single-threaded by contract (ops may parallelize
/// internally with a fixed reduction order).
pub struct Tape {
    inner: RefCell<Inner>,
}

/// Per-node gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: RefCell::new(Inner {
                values: Vec::new(),
                requires: Vec::new(),
                backward: Vec::new(),
                spent: false,
            }),
        }
    }

    fn push(&self, value: Tensor, requires: bool, back: Option<BackFn>) -> NodeId {
        let mut inner = self.inner.borrow_mut();
        inner.values.push(Rc::new(value));
        inner.requires.push(requires);
        inner.backward.push(if requires { back } else { None });
        NodeId(inner.values.len() - 1)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, requires_grad, None)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> RcTensor {
        Rc::clone(&self.inner.borrow().values[id.0])
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.inner.borrow().requires[id.0]
    }

    fn req(&self, id: NodeId) -> bool {
        self.inner.borrow().requires[id.0]
    }

    /// Reverse pass from a scalar root. Errors if the root is not scalar or
    /// if the tape has already been consumed by a previous backward.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        {
            let mut inner = self.inner.borrow_mut();
            if inner.spent {
                return Err(Error::Contract(
                    "backward called twice on the same tape".into(),
                ));
            }
            if inner.values[root.0].len() != 1 {
                return Err(Error::Contract(format!(
                    "backward root must be scalar, got shape {:?}",
                    inner.values[root.0].shape()
                )));
            }
            inner.spent = true;
        }
        let inner = self.inner.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; inner.values.len()];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if let Some(back) = &inner.backward[i] {
                for (j, contrib) in back(&g) {
                    debug_assert!(j < i, "backward edge must point to an earlier node");
                    match &mut grads[j] {
                        Some(acc) => {
                            for (a, c) in acc.iter_mut().zip(&contrib) {
                                *a += c;
                            }
                        }
                        None => grads[j] = Some(contrib),
                    }
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    // ── elementwise ops ─────────────────────────────────────────────

    fn same_shape(&self, a: NodeId, b: NodeId, op: &str) -> Result<()> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!(
                "{op}: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        Ok(())
    }

    pub fn add(&self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let (ra, rb) = (self.req(a), self.req(b));
        let back: BackFn = Box::new(move |g| {
            let mut c = Vec::new();
            if ra {
                c.push((a.0, g.to_vec()));
            }
            if rb {
                c.push((b.0, g.to_vec()));
            }
            c
        });
        Ok(self.push(out, ra || rb, Some(back)))
    }

    pub fn sub(&self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "sub")?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let (ra, rb) = (self.req(a), self.req(b));
        let back: BackFn = Box::new(move |g| {
            let mut c = Vec::new();
            if ra {
                c.push((a.0, g.to_vec()));
            }
            if rb {
                c.push((b.0, g.iter().map(|v| -v).collect()));
            }
            c
        });
        Ok(self.push(out, ra || rb, Some(back)))
    }

    pub fn mul(&self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let (ra, rb) = (self.req(a), self.req(b));
        let (ca, cb) = (Rc::clone(&va), Rc::clone(&vb));
        let back: BackFn = Box::new(move |g| {
            let mut c = Vec::new();
            if ra {
                c.push((a.0, g.iter().zip(cb.data()).map(|(gv, y)| gv * y).collect()));
            }
            if rb {
                c.push((b.0, g.iter().zip(ca.data()).map(|(gv, x)| gv * x).collect()));
            }
            c
        });
        Ok(self.push(out, ra || rb, Some(back)))
    }

    pub fn scale(&self, a: NodeId, k: f64) -> NodeId {
        let va = self.value(a);
        let data = va.data().iter().map(|x| x * k).collect();
        let out = Tensor::new(va.shape().to_vec(), data).expect("scale preserves shape");
        let ra = self.req(a);
        let back: BackFn = Box::new(move |g| vec![(a.0, g.iter().map(|v| v * k).collect())]);
        self.push(out, ra, Some(back))
    }

    pub fn add_scalar(&self, a: NodeId, k: f64) -> NodeId {
        let va = self.value(a);
        let data = va.data().iter().map(|x| x + k).collect();
        let out = Tensor::new(va.shape().to_vec(), data).expect("add_scalar preserves shape");
        let ra = self.req(a);
        let back: BackFn = Box::new(move |g| vec![(a.0, g.to_vec())]);
        self.push(out, ra, Some(back))
    }

    pub fn relu(&self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| x.max(0.0)).collect();
        let out = Tensor::new(va.shape().to_vec(), data).expect("relu preserves shape");
        let ra = self.req(a);
        let ca = Rc::clone(&va);
        let back: BackFn = Box::new(move |g| {
            vec![(
                a.0,
                g.iter()
                    .zip(ca.data())
                    .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                    .collect(),
            )]
        });
        self.push(out, ra, Some(back))
    }

    pub fn sigmoid(&self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let data: Vec<f64> = va.data().iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect();
        let out = Tensor::new(va.shape().to_vec(), data).expect("sigmoid preserves shape");
        let ra = self.req(a);
        let id = self.push(out, ra, None);
        let co = self.value(id);
        let back: BackFn = Box::new(move |g| {
            vec![(
                a.0,
                g.iter()
                    .zip(co.data())
                    .map(|(gv, &s)| gv * s * (1.0 - s))
                    .collect(),
            )]
        });
        if ra {
            self.inner.borrow_mut().backward[id.0] = Some(back);
        }
        id
    }

    /// ln(max(x, floor)); the gradient is zero below the floor.
    pub fn ln_clamped(&self, a: NodeId, floor: f64) -> NodeId {
        assert!(floor > 0.0, "ln_clamped floor must be positive");
        let va = self.value(a);
        let data = va.data().iter().map(|&x| x.max(floor).ln()).collect();
        let out = Tensor::new(va.shape().to_vec(), data).expect("ln preserves shape");
        let ra = self.req(a);
        let ca = Rc::clone(&va);
        let back: BackFn = Box::new(move |g| {
            vec![(
                a.0,
                g.iter()
                    .zip(ca.data())
                    .map(|(gv, &x)| if x > floor { gv / x } else { 0.0 })
                    .collect(),
            )]
        });
        self.push(out, ra, Some(back))
    }

    pub fn abs(&self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let data = va.data().iter().map(|x| x.abs()).collect();
        let out = Tensor::new(va.shape().to_vec(), data).expect("abs preserves shape");
        let ra = self.req(a);
        let ca = Rc::clone(&va);
        let back: BackFn = Box::new(move |g| {
            vec![(
                a.0,
                g.iter()
                    .zip(ca.data())
                    .map(|(gv, &x)| gv * x.signum())
                    .collect(),
            )]
        });
        self.push(out, ra, Some(back))
    }

    // ── reductions ──────────────────────────────────────────────────

    pub fn sum(&self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let s: f64 = va.data().iter().sum();
        let ra = self.req(a);
        let n = va.len();
        let back: BackFn = Box::new(move |g| vec![(a.0, vec![g[0]; n])]);
        self.push(Tensor::scalar(s), ra, Some(back))
    }

    /// Sum a C×H×W map over its channel axis, yielding H×W.
    pub fn sum_channels(&self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        if va.rank() != 3 {
            return Err(Error::Shape(format!(
                "sum_channels wants rank 3, got {:?}",
                va.shape()
            )));
        }
        let (c, h, w) = (va.shape()[0], va.shape()[1], va.shape()[2]);
        let hw = h * w;
        let mut data = vec![0.0; hw];
        for ch in 0..c {
            for p in 0..hw {
                data[p] += va.data()[ch * hw + p];
            }
        }
        let out = Tensor::new(vec![h, w], data)?;
        let ra = self.req(a);
        let back: BackFn = Box::new(move |g| {
            let mut da = vec![0.0; c * hw];
            for ch in 0..c {
                da[ch * hw..(ch + 1) * hw].copy_from_slice(g);
            }
            vec![(a.0, da)]
        });
        Ok(self.push(out, ra, Some(back)))
    }

    // ── structural ops ──────────────────────────────────────────────

    /// Channel concatenation of two C×H×W maps (channels of `a` first).
    pub fn concat_channels(&self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 3 || vb.rank() != 3 || va.shape()[1..] != vb.shape()[1..] {
            return Err(Error::Shape(format!(
                "concat_channels: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let (ca, cb) = (va.shape()[0], vb.shape()[0]);
        let (h, w) = (va.shape()[1], va.shape()[2]);
        let mut data = Vec::with_capacity((ca + cb) * h * w);
        data.extend_from_slice(va.data());
        data.extend_from_slice(vb.data());
        let out = Tensor::new(vec![ca + cb, h, w], data)?;
        let (ra, rb) = (self.req(a), self.req(b));
        let na = ca * h * w;
        let back: BackFn = Box::new(move |g| {
            let mut c = Vec::new();
            if ra {
                c.push((a.0, g[..na].to_vec()));
            }
            if rb {
                c.push((b.0, g[na..].to_vec()));
            }
            c
        });
        Ok(self.push(out, ra || rb, Some(back)))
    }

    /// Channel slice [start, start+count) of a C×H×W map.
    pub fn slice_channels(&self, a: NodeId, start: usize, count: usize) -> Result<NodeId> {
        let va = self.value(a);
        if va.rank() != 3 || start + count > va.shape()[0] {
            return Err(Error::Shape(format!(
                "slice_channels [{start}, {}) of {:?}",
                start + count,
                va.shape()
            )));
        }
        let (c, h, w) = (va.shape()[0], va.shape()[1], va.shape()[2]);
        let hw = h * w;
        let out = Tensor::new(
            vec![count, h, w],
            va.data()[start * hw..(start + count) * hw].to_vec(),
        )?;
        let ra = self.req(a);
        let back: BackFn = Box::new(move |g| {
            let mut da = vec![0.0; c * hw];
            da[start * hw..(start + count) * hw].copy_from_slice(g);
            vec![(a.0, da)]
        });
        Ok(self.push(out, ra, Some(back)))
    }

    /// Stack K maps of shape H×W into K×H×W.
    pub fn stack_maps(&self, maps: &[NodeId]) -> Result<NodeId> {
        if maps.is_empty() {
            return Err(Error::Contract("stack_maps of empty list".into()));
        }
        let first = self.value(maps[0]);
        if first.rank() != 2 {
            return Err(Error::Shape(format!(
                "stack_maps wants rank-2 maps, got {:?}",
                first.shape()
            )));
        }
        let (h, w) = (first.shape()[0], first.shape()[1]);
        let mut data = Vec::with_capacity(maps.len() * h * w);
        for &m in maps {
            let v = self.value(m);
            if v.shape() != first.shape() {
                return Err(Error::Shape(format!(
                    "stack_maps: {:?} vs {:?}",
                    v.shape(),
                    first.shape()
                )));
            }
            data.extend_from_slice(v.data());
        }
        let out = Tensor::new(vec![maps.len(), h, w], data)?;
        let reqs: Vec<(usize, bool)> = maps.iter().map(|m| (m.0, self.req(*m))).collect();
        let any = reqs.iter().any(|(_, r)| *r);
        let hw = h * w;
        let back: BackFn = Box::new(move |g| {
            reqs.iter()
                .enumerate()
                .filter(|(_, (_, r))| *r)
                .map(|(i, (id, _))| (*id, g[i * hw..(i + 1) * hw].to_vec()))
                .collect()
        });
        Ok(self.push(out, any, Some(back)))
    }

    /// Slab `i` of a K×H×W tensor, as H×W.
    pub fn index_axis0(&self, a: NodeId, i: usize) -> Result<NodeId> {
        let va = self.value(a);
        if va.rank() != 3 || i >= va.shape()[0] {
            return Err(Error::Shape(format!(
                "index_axis0 {i} of {:?}",
                va.shape()
            )));
        }
        let (k, h, w) = (va.shape()[0], va.shape()[1], va.shape()[2]);
        let hw = h * w;
        let out = Tensor::new(vec![h, w], va.data()[i * hw..(i + 1) * hw].to_vec())?;
        let ra = self.req(a);
        let back: BackFn = Box::new(move |g| {
            let mut da = vec![0.0; k * hw];
            da[i * hw..(i + 1) * hw].copy_from_slice(g);
            vec![(a.0, da)]
        });
        Ok(self.push(out, ra, Some(back)))
    }

    // ── fusion primitives ───────────────────────────────────────────

    /// Pointwise product of an H×W map broadcast over the channels of a
    /// C×H×W feature map.
    pub fn hadamard_broadcast(&self, map: NodeId, feat: NodeId) -> Result<NodeId> {
        let (vm, vf) = (self.value(map), self.value(feat));
        if vm.rank() != 2 || vf.rank() != 3 || vm.shape() != &vf.shape()[1..] {
            return Err(Error::Shape(format!(
                "hadamard_broadcast: map {:?} vs feat {:?}",
                vm.shape(),
                vf.shape()
            )));
        }
        let (c, hw) = (vf.shape()[0], vm.len());
        let mut data = vec![0.0; c * hw];
        for ch in 0..c {
            for p in 0..hw {
                data[ch * hw + p] = vm.data()[p] * vf.data()[ch * hw + p];
            }
        }
        let out = Tensor::new(vf.shape().to_vec(), data)?;
        let (rm, rf) = (self.req(map), self.req(feat));
        let (cm, cf) = (Rc::clone(&vm), Rc::clone(&vf));
        let back: BackFn = Box::new(move |g| {
            let mut c_out = Vec::new();
            if rm {
                let mut dm = vec![0.0; hw];
                for ch in 0..c {
                    for p in 0..hw {
                        dm[p] += g[ch * hw + p] * cf.data()[ch * hw + p];
                    }
                }
                c_out.push((map.0, dm));
            }
            if rf {
                let mut df = vec![0.0; c * hw];
                for ch in 0..c {
                    for p in 0..hw {
                        df[ch * hw + p] = g[ch * hw + p] * cm.data()[p];
                    }
                }
                c_out.push((feat.0, df));
            }
            c_out
        });
        Ok(self.push(out, rm || rf, Some(back)))
    }

    /// Numerically stabilized softmax along one axis (max subtraction).
    pub fn softmax_over_axis(&self, a: NodeId, axis: usize) -> Result<NodeId> {
        let va = self.value(a);
        if axis >= va.rank() {
            return Err(Error::Shape(format!(
                "softmax axis {axis} out of range for {:?}",
                va.shape()
            )));
        }
        let outer: usize = va.shape()[..axis].iter().product();
        let n = va.shape()[axis];
        let inner: usize = va.shape()[axis + 1..].iter().product();
        let mut data = vec![0.0; va.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let mut m = f64::NEG_INFINITY;
                for j in 0..n {
                    m = m.max(va.data()[idx(j)]);
                }
                let mut z = 0.0;
                for j in 0..n {
                    let e = (va.data()[idx(j)] - m).exp();
                    data[idx(j)] = e;
                    z += e;
                }
                for j in 0..n {
                    data[idx(j)] /= z;
                }
            }
        }
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let ra = self.req(a);
        let id = self.push(out, ra, None);
        let cs = self.value(id);
        let back: BackFn = Box::new(move |g| {
            let mut da = vec![0.0; cs.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| (o * n + j) * inner + i;
                    let mut dot = 0.0;
                    for j in 0..n {
                        dot += g[idx(j)] * cs.data()[idx(j)];
                    }
                    for j in 0..n {
                        da[idx(j)] = cs.data()[idx(j)] * (g[idx(j)] - dot);
                    }
                }
            }
            vec![(a.0, da)]
        });
        if ra {
            self.inner.borrow_mut().backward[id.0] = Some(back);
        }
        Ok(id)
    }

    /// Per-pixel projection: cat is C2×H×W, weights are H×W×C2, output is
    /// H×W with out(h,w) = Σ_c cat(c,h,w)·w(h,w,c).
    pub fn perpixel_dot(&self, cat: NodeId, weights: NodeId) -> Result<NodeId> {
        let (vc, vw) = (self.value(cat), self.value(weights));
        if vc.rank() != 3
            || vw.rank() != 3
            || vw.shape()[0] != vc.shape()[1]
            || vw.shape()[1] != vc.shape()[2]
            || vw.shape()[2] != vc.shape()[0]
        {
            return Err(Error::Shape(format!(
                "perpixel_dot: cat {:?} vs weights {:?}",
                vc.shape(),
                vw.shape()
            )));
        }
        let (c2, h, w) = (vc.shape()[0], vc.shape()[1], vc.shape()[2]);
        let hw = h * w;
        let mut data = vec![0.0; hw];
        for p in 0..hw {
            let mut acc = 0.0;
            for ch in 0..c2 {
                acc += vc.data()[ch * hw + p] * vw.data()[p * c2 + ch];
            }
            data[p] = acc;
        }
        let out = Tensor::new(vec![h, w], data)?;
        let (rc, rw) = (self.req(cat), self.req(weights));
        let (cc, cw) = (Rc::clone(&vc), Rc::clone(&vw));
        let back: BackFn = Box::new(move |g| {
            let mut c_out = Vec::new();
            if rc {
                let mut dc = vec![0.0; c2 * hw];
                for p in 0..hw {
                    for ch in 0..c2 {
                        dc[ch * hw + p] = g[p] * cw.data()[p * c2 + ch];
                    }
                }
                c_out.push((cat.0, dc));
            }
            if rw {
                let mut dw = vec![0.0; hw * c2];
                for p in 0..hw {
                    for ch in 0..c2 {
                        dw[p * c2 + ch] = g[p] * cc.data()[ch * hw + p];
                    }
                }
                c_out.push((weights.0, dw));
            }
            c_out
        });
        Ok(self.push(out, rc || rw, Some(back)))
    }

    // ── point-cloud encoding primitives ─────────────────────────────

    /// Affine map applied to every row of a constant N×D point matrix:
    /// out(n, c) = b(c) + Σ_d points(n, d)·w(c, d).
    pub fn linear_points(
        &self,
        points: &RcTensor,
        weight: NodeId,
        bias: NodeId,
    ) -> Result<NodeId> {
        let (vw, vb) = (self.value(weight), self.value(bias));
        if points.rank() != 2 || vw.rank() != 2 || vb.rank() != 1 {
            return Err(Error::Shape("linear_points: bad ranks".into()));
        }
        let (n, d) = (points.shape()[0], points.shape()[1]);
        let c = vw.shape()[0];
        if vw.shape()[1] != d || vb.shape()[0] != c {
            return Err(Error::Shape(format!(
                "linear_points: points {:?}, weight {:?}, bias {:?}",
                points.shape(),
                vw.shape(),
                vb.shape()
            )));
        }
        let mut data = vec![0.0; n * c];
        for row in 0..n {
            let p = &points.data()[row * d..(row + 1) * d];
            for ch in 0..c {
                let wr = &vw.data()[ch * d..(ch + 1) * d];
                let mut acc = vb.data()[ch];
                for k in 0..d {
                    acc += p[k] * wr[k];
                }
                data[row * c + ch] = acc;
            }
        }
        let out = Tensor::new(vec![n, c], data)?;
        let (rw, rb) = (self.req(weight), self.req(bias));
        let cp = Rc::clone(points);
        let back: BackFn = Box::new(move |g| {
            let mut c_out = Vec::new();
            if rw {
                let mut dw = vec![0.0; c * d];
                for row in 0..n {
                    let p = &cp.data()[row * d..(row + 1) * d];
                    for ch in 0..c {
                        let gv = g[row * c + ch];
                        for k in 0..d {
                            dw[ch * d + k] += gv * p[k];
                        }
                    }
                }
                c_out.push((weight.0, dw));
            }
            if rb {
                let mut db = vec![0.0; c];
                for row in 0..n {
                    for ch in 0..c {
                        db[ch] += g[row * c + ch];
                    }
                }
                c_out.push((bias.0, db));
            }
            c_out
        });
        Ok(self.push(out, rw || rb, Some(back)))
    }

    /// Per-cell elementwise max over point features. `cells[n]` is the flat
    /// H·W cell index of point n, or None for points outside the grid.
    /// Empty cells are zero; ties go to the earliest point.
    pub fn scatter_max(
        &self,
        feats: NodeId,
        cells: &[Option<usize>],
        h: usize,
        w: usize,
    ) -> Result<NodeId> {
        let vf = self.value(feats);
        if vf.rank() != 2 || vf.shape()[0] != cells.len() {
            return Err(Error::Shape(format!(
                "scatter_max: feats {:?} vs {} cells",
                vf.shape(),
                cells.len()
            )));
        }
        let (n, c) = (vf.shape()[0], vf.shape()[1]);
        let hw = h * w;
        let mut data = vec![0.0; c * hw];
        let mut argmax = vec![usize::MAX; c * hw];
        for row in 0..n {
            let cell = match cells[row] {
                Some(cell) => cell,
                None => continue,
            };
            debug_assert!(cell < hw);
            for ch in 0..c {
                let v = vf.data()[row * c + ch];
                let pos = ch * hw + cell;
                if argmax[pos] == usize::MAX || v > data[pos] {
                    data[pos] = v;
                    argmax[pos] = row;
                }
            }
        }
        let out = Tensor::new(vec![c, h, w], data)?;
        let rf = self.req(feats);
        let arg = argmax;
        let back: BackFn = Box::new(move |g| {
            let mut df = vec![0.0; n * c];
            for ch in 0..c {
                for cell in 0..hw {
                    let row = arg[ch * hw + cell];
                    if row != usize::MAX {
                        df[row * c + ch] += g[ch * hw + cell];
                    }
                }
            }
            vec![(feats.0, df)]
        });
        Ok(self.push(out, rf, Some(back)))
    }

    // ── convolution ─────────────────────────────────────────────────

    /// Same-padding 2D convolution: input C_in×H×W, kernel C_out×C_in×m×m,
    /// bias C_out, odd m, zero padding of (m−1)/2 per side.
    pub fn conv2d_same(
        &self,
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        m: usize,
    ) -> Result<NodeId> {
        let (vi, vk, vb) = (self.value(input), self.value(kernel), self.value(bias));
        if m % 2 == 0 || m == 0 {
            return Err(Error::InvalidKernel(format!("kernel size {m} is not odd")));
        }
        if vi.rank() != 3 || vk.rank() != 4 || vb.rank() != 1 {
            return Err(Error::Shape("conv2d_same: bad ranks".into()));
        }
        let (c_in, h, w) = (vi.shape()[0], vi.shape()[1], vi.shape()[2]);
        let c_out = vk.shape()[0];
        if vk.shape()[1] != c_in || vk.shape()[2] != m || vk.shape()[3] != m {
            return Err(Error::Shape(format!(
                "conv2d_same: kernel {:?} vs input {:?} with m={m}",
                vk.shape(),
                vi.shape()
            )));
        }
        if vb.shape()[0] != c_out {
            return Err(Error::Shape(format!(
                "conv2d_same: bias {:?} vs C_out {c_out}",
                vb.shape()
            )));
        }
        let data = conv_forward(vi.data(), vk.data(), vb.data(), c_in, c_out, h, w, m);
        let out = Tensor::new(vec![c_out, h, w], data)?;
        let (ri, rk, rb) = (self.req(input), self.req(kernel), self.req(bias));
        let (ci, ck) = (Rc::clone(&vi), Rc::clone(&vk));
        let back: BackFn = Box::new(move |g| {
            let mut c_contrib = Vec::new();
            if rb {
                let hw = h * w;
                let db: Vec<f64> = (0..c_out)
                    .map(|co| g[co * hw..(co + 1) * hw].iter().sum())
                    .collect();
                c_contrib.push((bias.0, db));
            }
            if rk {
                c_contrib.push((
                    kernel.0,
                    conv_backward_kernel(ci.data(), g, c_in, c_out, h, w, m),
                ));
            }
            if ri {
                c_contrib.push((
                    input.0,
                    conv_backward_input(ck.data(), g, c_in, c_out, h, w, m),
                ));
            }
            c_contrib
        });
        Ok(self.push(out, ri || rk || rb, Some(back)))
    }
}

/// Explicit correlation, parallel over output channels (deterministic: each
/// output channel is written by exactly one task with a fixed loop order).
#[allow(clippy::too_many_arguments)]
fn conv_forward(
    input: &[f64],
    kernel: &[f64],
    bias: &[f64],
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    m: usize,
) -> Vec<f64> {
    let p = (m - 1) / 2;
    let hw = h * w;
    let mut out = vec![0.0; c_out * hw];
    out.par_chunks_mut(hw).enumerate().for_each(|(co, oc)| {
        oc.fill(bias[co]);
        for ci in 0..c_in {
            let inp = &input[ci * hw..(ci + 1) * hw];
            for kh in 0..m {
                for kw in 0..m {
                    let kv = kernel[((co * c_in + ci) * m + kh) * m + kw];
                    if kv == 0.0 {
                        continue;
                    }
                    let oh_lo = p.saturating_sub(kh);
                    let oh_hi = (h + p - kh).min(h);
                    let ow_lo = p.saturating_sub(kw);
                    let ow_hi = (w + p - kw).min(w);
                    for oh in oh_lo..oh_hi {
                        let ih = oh + kh - p;
                        let orow = &mut oc[oh * w + ow_lo..oh * w + ow_hi];
                        let irow = &inp[ih * w + ow_lo + kw - p..ih * w + ow_hi + kw - p];
                        for (ov, iv) in orow.iter_mut().zip(irow) {
                            *ov += kv * iv;
                        }
                    }
                }
            }
        }
    });
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_backward_kernel(
    input: &[f64],
    grad_out: &[f64],
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    m: usize,
) -> Vec<f64> {
    let p = (m - 1) / 2;
    let hw = h * w;
    let mut dk = vec![0.0; c_out * c_in * m * m];
    dk.par_chunks_mut(c_in * m * m)
        .enumerate()
        .for_each(|(co, dkc)| {
            let g = &grad_out[co * hw..(co + 1) * hw];
            for ci in 0..c_in {
                let inp = &input[ci * hw..(ci + 1) * hw];
                for kh in 0..m {
                    for kw in 0..m {
                        let oh_lo = p.saturating_sub(kh);
                        let oh_hi = (h + p - kh).min(h);
                        let ow_lo = p.saturating_sub(kw);
                        let ow_hi = (w + p - kw).min(w);
                        let mut acc = 0.0;
                        for oh in oh_lo..oh_hi {
                            let ih = oh + kh - p;
                            let grow = &g[oh * w + ow_lo..oh * w + ow_hi];
                            let irow = &inp[ih * w + ow_lo + kw - p..ih * w + ow_hi + kw - p];
                            for (gv, iv) in grow.iter().zip(irow) {
                                acc += gv * iv;
                            }
                        }
                        dkc[(ci * m + kh) * m + kw] = acc;
                    }
                }
            }
        });
    dk
}

#[allow(clippy::too_many_arguments)]
fn conv_backward_input(
    kernel: &[f64],
    grad_out: &[f64],
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    m: usize,
) -> Vec<f64> {
    let p = (m - 1) / 2;
    let hw = h * w;
    let mut di = vec![0.0; c_in * hw];
    di.par_chunks_mut(hw).enumerate().for_each(|(ci, dic)| {
        for co in 0..c_out {
            let g = &grad_out[co * hw..(co + 1) * hw];
            for kh in 0..m {
                for kw in 0..m {
                    let kv = kernel[((co * c_in + ci) * m + kh) * m + kw];
                    if kv == 0.0 {
                        continue;
                    }
                    let oh_lo = p.saturating_sub(kh);
                    let oh_hi = (h + p - kh).min(h);
                    let ow_lo = p.saturating_sub(kw);
                    let ow_hi = (w + p - kw).min(w);
                    for oh in oh_lo..oh_hi {
                        let ih = oh + kh - p;
                        let grow = &g[oh * w + ow_lo..oh * w + ow_hi];
                        let drow = &mut dic[ih * w + ow_lo + kw - p..ih * w + ow_hi + kw - p];
                        for (dv, gv) in drow.iter_mut().zip(grow) {
                            *dv += kv * gv;
                        }
                    }
                }
            }
        }
    });
    di
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_definition() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[3], &[-1.0, 0.0, 2.0]), false);
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn relu_identity_on_positives() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[4], &[0.5, 1.0, 3.0, 7.25]), false);
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn softmax_equal_logits_over_four() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[4], &[2.5; 4]), false);
        let s = tape.softmax_over_axis(x, 0).unwrap();
        for v in tape.value(s).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_closed_form() {
        // logits [0, ln 3] -> [0.25, 0.75]
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[0.0, 3f64.ln()]), false);
        let s = tape.softmax_over_axis(x, 0).unwrap();
        assert!((tape.value(s).data()[0] - 0.25).abs() < 1e-14);
        assert!((tape.value(s).data()[1] - 0.75).abs() < 1e-14);
    }

    #[test]
    fn softmax_saturation() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[3], &[50.0, 0.0, 0.0]), false);
        let s = tape.softmax_over_axis(x, 0).unwrap();
        assert!(tape.value(s).data()[0] > 1.0 - 1e-10);
    }

    #[test]
    fn softmax_sums_to_one_along_axis() {
        let tape = Tape::new();
        let x = tape.leaf(
            t(&[3, 2, 2], &(0..12).map(|i| (i as f64 * 1.3).sin() * 4.0).collect::<Vec<_>>()),
            false,
        );
        let s = tape.softmax_over_axis(x, 0).unwrap();
        let v = tape.value(s);
        for p in 0..4 {
            let sum: f64 = (0..3).map(|j| v.data()[j * 4 + p]).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_zero_input_gives_zero() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 3, 3]), false);
        let k = tape.leaf(t(&[1, 1, 3, 3], &[0.3; 9]), false);
        let b = tape.leaf(Tensor::zeros(&[1]), false);
        let y = tape.conv2d_same(x, k, b, 3).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_identity_kernel() {
        let tape = Tape::new();
        let data: Vec<f64> = (0..9).map(|i| i as f64 - 4.0).collect();
        let x = tape.leaf(t(&[1, 3, 3], &data), false);
        let mut kd = vec![0.0; 9];
        kd[4] = 1.0; // center tap
        let k = tape.leaf(t(&[1, 1, 3, 3], &kd), false);
        let b = tape.leaf(Tensor::zeros(&[1]), false);
        let y = tape.conv2d_same(x, k, b, 3).unwrap();
        assert_eq!(tape.value(y).data(), data.as_slice());
    }

    #[test]
    fn conv_matches_nested_sum_oracle() {
        // random 2x5x5 input, 3x2x3x3 kernel, direct 6-loop oracle
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        let inp: Vec<f64> = (0..2 * 25).map(|_| next()).collect();
        let ker: Vec<f64> = (0..3 * 2 * 9).map(|_| next()).collect();
        let bias: Vec<f64> = (0..3).map(|_| next()).collect();

        let tape = Tape::new();
        let x = tape.leaf(t(&[2, 5, 5], &inp), false);
        let k = tape.leaf(t(&[3, 2, 3, 3], &ker), false);
        let b = tape.leaf(t(&[3], &bias), false);
        let y = tape.conv2d_same(x, k, b, 3).unwrap();
        let yv = tape.value(y);

        let (h, w, m, p) = (5usize, 5usize, 3usize, 1usize);
        for co in 0..3 {
            for oh in 0..h {
                for ow in 0..w {
                    let mut acc = bias[co];
                    for ci in 0..2 {
                        for kh in 0..m {
                            for kw in 0..m {
                                let ih = oh as isize + kh as isize - p as isize;
                                let iw = ow as isize + kw as isize - p as isize;
                                if ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < w {
                                    acc += ker[((co * 2 + ci) * m + kh) * m + kw]
                                        * inp[ci * h * w + ih as usize * w + iw as usize];
                                }
                            }
                        }
                    }
                    assert!((yv.at3(co, oh, ow) - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv_even_kernel_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 3, 3]), false);
        let k = tape.leaf(Tensor::zeros(&[1, 1, 2, 2]), false);
        let b = tape.leaf(Tensor::zeros(&[1]), false);
        assert!(matches!(
            tape.conv2d_same(x, k, b, 2),
            Err(Error::InvalidKernel(_))
        ));
    }

    #[test]
    fn conv_preserves_spatial_dims_for_odd_m() {
        for m in [1usize, 3, 5, 7] {
            let tape = Tape::new();
            let x = tape.leaf(Tensor::filled(&[2, 9, 11], 0.5), false);
            let k = tape.leaf(Tensor::filled(&[2, 2, m, m], 0.1), false);
            let b = tape.leaf(Tensor::zeros(&[2]), false);
            let y = tape.conv2d_same(x, k, b, m).unwrap();
            assert_eq!(tape.value(y).shape(), &[2, 9, 11]);
        }
    }

    #[test]
    fn concat_shapes_and_roundtrip() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::filled(&[2, 4, 4], 1.5), false);
        let b = tape.leaf(Tensor::filled(&[3, 4, 4], -0.5), false);
        let c = tape.concat_channels(a, b).unwrap();
        assert_eq!(tape.value(c).shape(), &[5, 4, 4]);
        let sa = tape.slice_channels(c, 0, 2).unwrap();
        let sb = tape.slice_channels(c, 2, 3).unwrap();
        assert_eq!(tape.value(sa).data(), tape.value(a).data());
        assert_eq!(tape.value(sb).data(), tape.value(b).data());
    }

    #[test]
    fn concat_backward_routes_ones_to_both() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::filled(&[1, 2, 2], 0.7), true);
        let b = tape.leaf(Tensor::filled(&[2, 2, 2], -0.2), true);
        let c = tape.concat_channels(a, b).unwrap();
        let s = tape.sum(c);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap(), &[1.0; 4]);
        assert_eq!(g.get(b).unwrap(), &[1.0; 8]);
    }

    #[test]
    fn hadamard_identity_and_annihilator() {
        let tape = Tape::new();
        let feat = tape.leaf(t(&[2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]), false);
        let ones = tape.leaf(Tensor::filled(&[2, 2], 1.0), false);
        let zeros = tape.leaf(Tensor::zeros(&[2, 2]), false);
        let y1 = tape.hadamard_broadcast(ones, feat).unwrap();
        assert_eq!(tape.value(y1).data(), tape.value(feat).data());
        let y0 = tape.hadamard_broadcast(zeros, feat).unwrap();
        assert!(tape.value(y0).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hadamard_matches_triple_loop() {
        let md: Vec<f64> = (0..6).map(|i| 0.3 * i as f64 - 0.7).collect();
        let fd: Vec<f64> = (0..12).map(|i| (i as f64).cos()).collect();
        let tape = Tape::new();
        let map = tape.leaf(t(&[2, 3], &md), false);
        let feat = tape.leaf(t(&[2, 2, 3], &fd), false);
        let y = tape.hadamard_broadcast(map, feat).unwrap();
        let yv = tape.value(y);
        for c in 0..2 {
            for i in 0..2 {
                for j in 0..3 {
                    let expect = md[i * 3 + j] * fd[(c * 2 + i) * 3 + j];
                    assert!((yv.at3(c, i, j) - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn backward_twice_is_error() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0), true);
        let y = tape.scale(x, 3.0);
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_on_non_scalar_is_error() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[3]), true);
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn scatter_max_ties_go_to_first_point() {
        let tape = Tape::new();
        let feats = tape.leaf(t(&[2, 1], &[0.5, 0.5]), true);
        let y = tape.scatter_max(feats, &[Some(0), Some(0)], 1, 1).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5]);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(feats).unwrap(), &[1.0, 0.0]);
    }
}
