//! Reverse-mode automatic differentiation over a fixed tensor op set.
//!
//! Eager evaluation with a taped backward pass: every op computes its value
//! immediately and records itself on the tape; node indices are therefore
//! already in topological order and `backward` is a single reverse sweep.
//! Graphs are small and rebuilt per optimization step.
//!
//! Gradient paths are pruned at build time: a node needs gradients only if
//! one of its parents does, so attack tapes (which differentiate w.r.t. the
//! quantization table or the input, never the model weights) skip the
//! expensive weight-gradient kernels entirely. Leaves that are not on any
//! path to the loss receive exactly zero.
//!
//! Shape-incompatible op applications are rejected at graph build with a
//! panic; those are programmer errors, not data errors.

use std::cell::RefCell;
use std::collections::HashSet;
use std::rc::Rc;

use crate::conv;
use crate::dct::{dct2_slices, dct3, idct2_slices, idct3, DctPlan};
use crate::tensor::Tensor;
use crate::volume::{self, PatchGrid};

/// Working precision of a tape. `F32` rounds every node value to the
/// nearest f32-representable number, deterministically emulating
/// single-precision storage; `F64` is the high-precision mode used for
/// gradient checks and reproducibility guarantees.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F64,
    F32,
}

impl Precision {
    fn apply(self, t: &mut Tensor) {
        if self == Precision::F32 {
            t.round_to_f32();
        }
    }
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    Neg(usize),
    Abs(usize),
    Relu(usize),
    Log(usize),
    /// rhs shape is a prefix of lhs shape; rhs broadcasts over the trailing axes.
    MulBcast(usize, usize),
    DivBcast(usize, usize),
    Matmul(usize, usize),
    Conv3d { x: usize, w: usize, b: usize },
    SoftmaxClass(usize),
    Sum(usize),
    Mean(usize),
    ClassSums(usize),
    Dct3(usize, DctPlan),
    Idct3(usize, DctPlan),
    Dct2(usize, DctPlan),
    Idct2(usize, DctPlan),
    /// Rounding (or its identity surrogate) with a straight-through
    /// backward. The forward value is fixed at construction; the backward
    /// rule is the identity either way.
    Round(usize),
    Clamp { x: usize, lo: f64, hi: f64 },
    BoxMean { x: usize, window: usize },
    Merge { patches: Vec<usize>, grid: PatchGrid },
    Gather { x: usize, idx: Rc<Vec<usize>> },
    Reshape(usize),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records ops eagerly; one tape per optimization step, never shared
/// across threads.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    precision: Precision,
}

/// Handle to a tape node. Copyable; tied to its tape's lifetime.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

impl Tape {
    pub fn new(precision: Precision) -> Tape {
        Tape { nodes: RefCell::new(Vec::new()), precision }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that accumulates gradients.
    pub fn param(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf treated as a constant (no gradient path grows through it).
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, false)
    }

    fn push(&self, mut value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        // non-finite values are allowed to flow; divergence is detected at
        // the loss by the attack/training loops, which abort gracefully
        self.precision.apply(&mut value);
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, needs_grad });
        Var { tape: self, idx: nodes.len() - 1 }
    }

    fn needs(&self, idx: usize) -> bool {
        self.nodes.borrow()[idx].needs_grad
    }

    /// Re-wraps a node index produced by `Var::index`.
    pub fn var_from_index(&self, idx: usize) -> Var<'_> {
        assert!(idx < self.len(), "node index {idx} out of range");
        Var { tape: self, idx }
    }

    fn value_clone(&self, idx: usize) -> Tensor {
        self.nodes.borrow()[idx].value.clone()
    }

    fn shape_of(&self, idx: usize) -> Vec<usize> {
        self.nodes.borrow()[idx].value.shape().to_vec()
    }

    /// Differentiable reassembly of patches into a volume-extent tensor.
    pub fn merge(&self, patches: &[Var<'_>], grid: &PatchGrid) -> Var<'_> {
        assert_eq!(patches.len(), grid.num_patches(), "patch count does not match grid");
        let shape = grid.patch_shape().to_vec();
        let nodes = self.nodes.borrow();
        for p in patches {
            assert!(std::ptr::eq(p.tape, self), "merge across tapes");
            assert_eq!(nodes[p.idx].value.shape(), &shape[..], "patch shape does not match grid");
        }
        let values: Vec<Tensor> = patches.iter().map(|p| nodes[p.idx].value.clone()).collect();
        let needs = patches.iter().any(|p| nodes[p.idx].needs_grad);
        drop(nodes);
        let merged = volume::merge(&values, grid).expect("validated above");
        self.push(
            merged,
            Op::Merge { patches: patches.iter().map(|p| p.idx).collect(), grid: grid.clone() },
            needs,
        )
    }

    /// Reverse sweep from a scalar loss; returns the gradient for each
    /// requested node (zeros if the node is not connected to the loss).
    pub fn backward(&self, loss: Var<'_>, wrt: &[Var<'_>]) -> Vec<Tensor> {
        assert!(std::ptr::eq(loss.tape, self));
        let nodes = self.nodes.borrow();
        assert!(
            nodes[loss.idx].value.is_scalar(),
            "backward requires a scalar loss, got shape {:?}",
            nodes[loss.idx].value.shape()
        );
        let keep: HashSet<usize> = wrt.iter().map(|v| v.idx).collect();
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        grads[loss.idx] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.idx).rev() {
            let Some(g) = grads[i].take() else { continue };
            debug_assert_eq!(g.shape(), nodes[i].value.shape(), "gradient shape mismatch");
            self.propagate(&nodes, i, &g, &mut grads);
            if keep.contains(&i) {
                grads[i] = Some(g);
            }
        }

        wrt.iter()
            .map(|v| {
                assert!(std::ptr::eq(v.tape, self));
                grads[v.idx].take().unwrap_or_else(|| Tensor::zeros(nodes[v.idx].value.shape()))
            })
            .collect()
    }

    fn propagate(&self, nodes: &[Node], i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let add = |grads: &mut [Option<Tensor>], idx: usize, contrib: Tensor| {
            if !nodes[idx].needs_grad {
                return;
            }
            match &mut grads[idx] {
                Some(t) => t.add_in_place(&contrib),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add(grads, *a, g.clone());
                add(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                add(grads, *a, g.clone());
                add(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if nodes[*a].needs_grad {
                    add(grads, *a, g.zip(&nodes[*b].value, |gv, bv| gv * bv));
                }
                if nodes[*b].needs_grad {
                    add(grads, *b, g.zip(&nodes[*a].value, |gv, av| gv * av));
                }
            }
            Op::Div(a, b) => {
                let bv = &nodes[*b].value;
                if nodes[*a].needs_grad {
                    add(grads, *a, g.zip(bv, |gv, b| gv / b));
                }
                if nodes[*b].needs_grad {
                    let av = &nodes[*a].value;
                    let mut gb = g.zip(av, |gv, a| gv * a);
                    gb = gb.zip(bv, |t, b| -t / (b * b));
                    add(grads, *b, gb);
                }
            }
            Op::AddScalar(a) => add(grads, *a, g.clone()),
            Op::MulScalar(a, c) => add(grads, *a, g.scale(*c)),
            Op::Neg(a) => add(grads, *a, g.scale(-1.0)),
            Op::Abs(a) => {
                let av = &nodes[*a].value;
                add(grads, *a, g.zip(av, |gv, a| gv * sign(a)));
            }
            Op::Relu(a) => {
                let av = &nodes[*a].value;
                add(grads, *a, g.zip(av, |gv, a| if a > 0.0 { gv } else { 0.0 }));
            }
            Op::Log(a) => {
                let av = &nodes[*a].value;
                add(grads, *a, g.zip(av, |gv, a| gv / a));
            }
            Op::MulBcast(a, b) => {
                let av = &nodes[*a].value;
                let bv = &nodes[*b].value;
                let rep = av.len() / bv.len();
                if nodes[*a].needs_grad {
                    let mut ga = Tensor::zeros(av.shape());
                    for (p, &bvp) in bv.data().iter().enumerate() {
                        let base = p * rep;
                        for j in 0..rep {
                            ga.data_mut()[base + j] = g.data()[base + j] * bvp;
                        }
                    }
                    add(grads, *a, ga);
                }
                if nodes[*b].needs_grad {
                    let mut gb = Tensor::zeros(bv.shape());
                    for p in 0..bv.len() {
                        let base = p * rep;
                        let mut acc = 0.0;
                        for j in 0..rep {
                            acc += g.data()[base + j] * av.data()[base + j];
                        }
                        gb.data_mut()[p] = acc;
                    }
                    add(grads, *b, gb);
                }
            }
            Op::DivBcast(a, b) => {
                let av = &nodes[*a].value;
                let bv = &nodes[*b].value;
                let rep = av.len() / bv.len();
                if nodes[*a].needs_grad {
                    let mut ga = Tensor::zeros(av.shape());
                    for (p, &bvp) in bv.data().iter().enumerate() {
                        let base = p * rep;
                        for j in 0..rep {
                            ga.data_mut()[base + j] = g.data()[base + j] / bvp;
                        }
                    }
                    add(grads, *a, ga);
                }
                if nodes[*b].needs_grad {
                    let mut gb = Tensor::zeros(bv.shape());
                    for (p, &bvp) in bv.data().iter().enumerate() {
                        let base = p * rep;
                        let mut acc = 0.0;
                        for j in 0..rep {
                            acc += g.data()[base + j] * av.data()[base + j];
                        }
                        gb.data_mut()[p] = -acc / (bvp * bvp);
                    }
                    add(grads, *b, gb);
                }
            }
            Op::Matmul(a, b) => {
                let av = &nodes[*a].value;
                let bv = &nodes[*b].value;
                if nodes[*a].needs_grad {
                    add(grads, *a, matmul_nt(g, bv));
                }
                if nodes[*b].needs_grad {
                    add(grads, *b, matmul_tn(av, g));
                }
            }
            Op::Conv3d { x, w, b } => {
                let k = nodes[*w].value.shape()[2];
                if nodes[*x].needs_grad {
                    let gx = conv::conv3d_backward_input(
                        g,
                        nodes[*x].value.shape(),
                        &nodes[*w].value,
                    );
                    add(grads, *x, gx);
                }
                if nodes[*w].needs_grad || nodes[*b].needs_grad {
                    let (gw, gb) = conv::conv3d_backward_weights(g, &nodes[*x].value, k);
                    add(grads, *w, gw);
                    add(grads, *b, gb);
                }
            }
            Op::SoftmaxClass(a) => {
                let p = &nodes[i].value;
                let classes = p.shape()[0];
                let inner = p.len() / classes;
                let mut ga = Tensor::zeros(p.shape());
                for j in 0..inner {
                    let mut dot = 0.0;
                    for c in 0..classes {
                        dot += g.data()[c * inner + j] * p.data()[c * inner + j];
                    }
                    for c in 0..classes {
                        let pv = p.data()[c * inner + j];
                        ga.data_mut()[c * inner + j] = pv * (g.data()[c * inner + j] - dot);
                    }
                }
                add(grads, *a, ga);
            }
            Op::Sum(a) => {
                add(grads, *a, Tensor::full(nodes[*a].value.shape(), g.item()));
            }
            Op::Mean(a) => {
                let n = nodes[*a].value.len() as f64;
                add(grads, *a, Tensor::full(nodes[*a].value.shape(), g.item() / n));
            }
            Op::ClassSums(a) => {
                let av = &nodes[*a].value;
                let classes = av.shape()[0];
                let inner = av.len() / classes;
                let mut ga = Tensor::zeros(av.shape());
                for c in 0..classes {
                    let gv = g.data()[c];
                    for j in 0..inner {
                        ga.data_mut()[c * inner + j] = gv;
                    }
                }
                add(grads, *a, ga);
            }
            Op::Dct3(a, plan) => add(grads, *a, idct3(g, plan)),
            Op::Idct3(a, plan) => add(grads, *a, dct3(g, plan)),
            Op::Dct2(a, plan) => add(grads, *a, idct2_slices(g, plan)),
            Op::Idct2(a, plan) => add(grads, *a, dct2_slices(g, plan)),
            Op::Round(x) => add(grads, *x, g.clone()),
            Op::Clamp { x, lo, hi } => {
                let xv = &nodes[*x].value;
                add(grads, *x, g.zip(xv, |gv, u| if u >= *lo && u <= *hi { gv } else { 0.0 }));
            }
            Op::BoxMean { x, window } => {
                let orig = nodes[*x].value.shape().to_vec();
                add(grads, *x, box_mean3_adjoint(g, *window, &orig));
            }
            Op::Merge { patches, grid } => {
                let gpad = volume::embed_zeros(g, grid.padded_extent());
                for (off, &pid) in grid.offsets().iter().zip(patches) {
                    if nodes[pid].needs_grad {
                        add(grads, pid, volume::extract_block(&gpad, *off, grid.side()));
                    }
                }
            }
            Op::Gather { x, idx } => {
                let mut gx = Tensor::zeros(nodes[*x].value.shape());
                for (j, &src) in idx.iter().enumerate() {
                    gx.data_mut()[src] += g.data()[j];
                }
                add(grads, *x, gx);
            }
            Op::Reshape(a) => {
                add(grads, *a, g.clone().reshaped(nodes[*a].value.shape()));
            }
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn matmul_nn(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    assert_eq!(b.shape()[0], k, "matmul inner dimension mismatch");
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for l in 0..k {
            let av = a.data()[i * k + l];
            let brow = &b.data()[l * n..(l + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::from_vec(&[m, n], out)
}

/// a (m, n) * b^T where b is (k, n) -> (m, k)
fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let k = b.shape()[0];
    assert_eq!(b.shape()[1], n);
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        for j in 0..k {
            let arow = &a.data()[i * n..(i + 1) * n];
            let brow = &b.data()[j * n..(j + 1) * n];
            out[i * k + j] = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
        }
    }
    Tensor::from_vec(&[m, k], out)
}

/// a^T * b where a is (k, m), b is (k, n) -> (m, n)
fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (k, m) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    assert_eq!(b.shape()[0], k);
    let mut out = vec![0.0; m * n];
    for l in 0..k {
        for i in 0..m {
            let av = a.data()[l * m + i];
            let brow = &b.data()[l * n..(l + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::from_vec(&[m, n], out)
}

/// Valid sliding sum along one axis (output axis length n - w + 1).
fn box_sum_axis_valid(t: &Tensor, axis: usize, w: usize) -> Tensor {
    let shape = t.shape();
    let n = shape[axis];
    assert!(w >= 1 && w <= n, "window {w} does not fit axis of length {n}");
    let m = n - w + 1;
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out_shape = shape.to_vec();
    out_shape[axis] = m;
    let mut out = vec![0.0; outer * m * inner];
    let src = t.data();
    for o in 0..outer {
        for j in 0..inner {
            let at = |i: usize| src[o * n * inner + i * inner + j];
            let mut acc = 0.0;
            for i in 0..w {
                acc += at(i);
            }
            out[o * m * inner + j] = acc;
            for i in 1..m {
                acc += at(i + w - 1) - at(i - 1);
                out[o * m * inner + i * inner + j] = acc;
            }
        }
    }
    Tensor::from_vec(&out_shape, out)
}

/// Adjoint of the valid sliding sum: spreads each window value back over
/// the positions it covered.
fn box_spread_axis(t: &Tensor, axis: usize, w: usize, n_out: usize) -> Tensor {
    let shape = t.shape();
    let m = shape[axis];
    assert_eq!(m + w - 1, n_out);
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out_shape = shape.to_vec();
    out_shape[axis] = n_out;
    let mut out = vec![0.0; outer * n_out * inner];
    let src = t.data();
    for o in 0..outer {
        for i in 0..m {
            for di in 0..w {
                let dst = o * n_out * inner + (i + di) * inner;
                let s = o * m * inner + i * inner;
                for j in 0..inner {
                    out[dst + j] += src[s + j];
                }
            }
        }
    }
    Tensor::from_vec(&out_shape, out)
}

/// Uniform 3D mean filter with valid extent (each axis shrinks by w - 1).
pub fn box_mean3(t: &Tensor, w: usize) -> Tensor {
    assert_eq!(t.rank(), 3);
    let mut out = t.clone();
    for axis in 0..3 {
        out = box_sum_axis_valid(&out, axis, w);
    }
    out.scale(1.0 / (w * w * w) as f64)
}

/// Adjoint of `box_mean3`.
pub fn box_mean3_adjoint(g: &Tensor, w: usize, orig_shape: &[usize]) -> Tensor {
    assert_eq!(g.rank(), 3);
    let mut out = g.clone();
    for axis in (0..3).rev() {
        out = box_spread_axis(&out, axis, w, orig_shape[axis]);
    }
    out.scale(1.0 / (w * w * w) as f64)
}

impl<'t> Var<'t> {
    pub fn tape(self) -> &'t Tape {
        self.tape
    }

    pub fn index(self) -> usize {
        self.idx
    }

    pub fn value(self) -> Tensor {
        self.tape.value_clone(self.idx)
    }

    pub fn shape(self) -> Vec<usize> {
        self.tape.shape_of(self.idx)
    }

    pub fn item(self) -> f64 {
        self.tape.nodes.borrow()[self.idx].value.item()
    }

    fn same_tape(self, other: Var<'t>) {
        assert!(std::ptr::eq(self.tape, other.tape), "op across different tapes");
    }

    fn binary(
        self,
        other: Var<'t>,
        op: fn(usize, usize) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Var<'t> {
        self.same_tape(other);
        let nodes = self.tape.nodes.borrow();
        let value = nodes[self.idx].value.zip(&nodes[other.idx].value, f);
        let needs = nodes[self.idx].needs_grad || nodes[other.idx].needs_grad;
        drop(nodes);
        self.tape.push(value, op(self.idx, other.idx), needs)
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, Op::Add, |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, Op::Sub, |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, Op::Mul, |a, b| a * b)
    }

    pub fn div(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, Op::Div, |a, b| a / b)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let value = self.tape.nodes.borrow()[self.idx].value.map(|v| v + c);
        let needs = self.tape.needs(self.idx);
        self.tape.push(value, Op::AddScalar(self.idx), needs)
    }

    pub fn mul_scalar(self, c: f64) -> Var<'t> {
        let value = self.tape.nodes.borrow()[self.idx].value.scale(c);
        let needs = self.tape.needs(self.idx);
        self.tape.push(value, Op::MulScalar(self.idx, c), needs)
    }

    pub fn neg(self) -> Var<'t> {
        let value = self.tape.nodes.borrow()[self.idx].value.scale(-1.0);
        let needs = self.tape.needs(self.idx);
        self.tape.push(value, Op::Neg(self.idx), needs)
    }

    pub fn abs(self) -> Var<'t> {
        let value = self.tape.nodes.borrow()[self.idx].value.map(f64::abs);
        let needs = self.tape.needs(self.idx);
        self.tape.push(value, Op::Abs(self.idx), needs)
    }

    pub fn relu(self) -> Var<'t> {
        let value = self.tape.nodes.borrow()[self.idx].value.map(|v| v.max(0.0));
        let needs = self.tape.needs(self.idx);
        self.tape.push(value, Op::Relu(self.idx), needs)
    }

    pub fn log(self) -> Var<'t> {
        let value = self.tape.nodes.borrow()[self.idx].value.map(f64::ln);
        let needs = self.tape.needs(self.idx);
        self.tape.push(value, Op::Log(self.idx), needs)
    }

    /// Elementwise multiply where `other`'s shape is a prefix of this
    /// shape; `other` broadcasts over the trailing axes.
    pub fn mul_bcast(self, other: Var<'t>) -> Var<'t> {
        self.same_tape(other);
        let nodes = self.tape.nodes.borrow();
        let (av, bv) = (&nodes[self.idx].value, &nodes[other.idx].value);
        assert!(
            av.shape().starts_with(bv.shape()),
            "broadcast operand {:?} is not a prefix of {:?}",
            bv.shape(),
            av.shape()
        );
        let rep = av.len() / bv.len();
        let mut out = Tensor::zeros(av.shape());
        for (p, &b) in bv.data().iter().enumerate() {
            for j in 0..rep {
                out.data_mut()[p * rep + j] = av.data()[p * rep + j] * b;
            }
        }
        let needs = nodes[self.idx].needs_grad || nodes[other.idx].needs_grad;
        drop(nodes);
        self.tape.push(out, Op::MulBcast(self.idx, other.idx), needs)
    }

    /// Elementwise divide with the same prefix-broadcast rule as `mul_bcast`.
    pub fn div_bcast(self, other: Var<'t>) -> Var<'t> {
        self.same_tape(other);
        let nodes = self.tape.nodes.borrow();
        let (av, bv) = (&nodes[self.idx].value, &nodes[other.idx].value);
        assert!(
            av.shape().starts_with(bv.shape()),
            "broadcast operand {:?} is not a prefix of {:?}",
            bv.shape(),
            av.shape()
        );
        let rep = av.len() / bv.len();
        let mut out = Tensor::zeros(av.shape());
        for (p, &b) in bv.data().iter().enumerate() {
            for j in 0..rep {
                out.data_mut()[p * rep + j] = av.data()[p * rep + j] / b;
            }
        }
        let needs = nodes[self.idx].needs_grad || nodes[other.idx].needs_grad;
        drop(nodes);
        self.tape.push(out, Op::DivBcast(self.idx, other.idx), needs)
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        self.same_tape(other);
        let nodes = self.tape.nodes.borrow();
        let (av, bv) = (&nodes[self.idx].value, &nodes[other.idx].value);
        assert!(av.rank() == 2 && bv.rank() == 2, "matmul expects rank-2 operands");
        let value = matmul_nn(av, bv);
        let needs = nodes[self.idx].needs_grad || nodes[other.idx].needs_grad;
        drop(nodes);
        self.tape.push(value, Op::Matmul(self.idx, other.idx), needs)
    }

    /// 3D convolution, stride 1, replicate padding, cubic odd kernel.
    pub fn conv3d(self, weights: Var<'t>, bias: Var<'t>) -> Var<'t> {
        self.same_tape(weights);
        self.same_tape(bias);
        let nodes = self.tape.nodes.borrow();
        let value = conv::conv3d_forward(
            &nodes[self.idx].value,
            &nodes[weights.idx].value,
            &nodes[bias.idx].value,
        );
        let needs = nodes[self.idx].needs_grad
            || nodes[weights.idx].needs_grad
            || nodes[bias.idx].needs_grad;
        drop(nodes);
        self.tape.push(value, Op::Conv3d { x: self.idx, w: weights.idx, b: bias.idx }, needs)
    }

    /// Numerically stable softmax over axis 0 (the class axis).
    pub fn softmax_class(self) -> Var<'t> {
        let nodes = self.tape.nodes.borrow();
        let x = &nodes[self.idx].value;
        assert!(x.rank() >= 1);
        let classes = x.shape()[0];
        let inner = x.len() / classes;
        let mut out = Tensor::zeros(x.shape());
        for j in 0..inner {
            let mut max = f64::NEG_INFINITY;
            for c in 0..classes {
                max = max.max(x.data()[c * inner + j]);
            }
            let mut total = 0.0;
            for c in 0..classes {
                let e = (x.data()[c * inner + j] - max).exp();
                out.data_mut()[c * inner + j] = e;
                total += e;
            }
            for c in 0..classes {
                out.data_mut()[c * inner + j] /= total;
            }
        }
        let needs = nodes[self.idx].needs_grad;
        drop(nodes);
        self.tape.push(out, Op::SoftmaxClass(self.idx), needs)
    }

    pub fn sum(self) -> Var<'t> {
        let value = Tensor::scalar(self.tape.nodes.borrow()[self.idx].value.sum());
        let needs = self.tape.needs(self.idx);
        self.tape.push(value, Op::Sum(self.idx), needs)
    }

    pub fn mean(self) -> Var<'t> {
        let nodes = self.tape.nodes.borrow();
        let t = &nodes[self.idx].value;
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        let needs = nodes[self.idx].needs_grad;
        drop(nodes);
        self.tape.push(value, Op::Mean(self.idx), needs)
    }

    /// Sums over all axes except axis 0; (C, ...) -> (C,).
    pub fn class_sums(self) -> Var<'t> {
        let nodes = self.tape.nodes.borrow();
        let x = &nodes[self.idx].value;
        assert!(x.rank() >= 1);
        let classes = x.shape()[0];
        let inner = x.len() / classes;
        let mut out = Tensor::zeros(&[classes]);
        for c in 0..classes {
            out.data_mut()[c] = x.data()[c * inner..(c + 1) * inner].iter().sum();
        }
        let needs = nodes[self.idx].needs_grad;
        drop(nodes);
        self.tape.push(out, Op::ClassSums(self.idx), needs)
    }

    pub fn dct3(self, plan: &DctPlan) -> Var<'t> {
        let value = dct3(&self.tape.nodes.borrow()[self.idx].value, plan);
        let needs = self.tape.needs(self.idx);
        self.tape.push(value, Op::Dct3(self.idx, plan.clone()), needs)
    }

    pub fn idct3(self, plan: &DctPlan) -> Var<'t> {
        let value = idct3(&self.tape.nodes.borrow()[self.idx].value, plan);
        let needs = self.tape.needs(self.idx);
        self.tape.push(value, Op::Idct3(self.idx, plan.clone()), needs)
    }

    pub fn dct2_slices(self, plan: &DctPlan) -> Var<'t> {
        let value = dct2_slices(&self.tape.nodes.borrow()[self.idx].value, plan);
        let needs = self.tape.needs(self.idx);
        self.tape.push(value, Op::Dct2(self.idx, plan.clone()), needs)
    }

    pub fn idct2_slices(self, plan: &DctPlan) -> Var<'t> {
        let value = idct2_slices(&self.tape.nodes.borrow()[self.idx].value, plan);
        let needs = self.tape.needs(self.idx);
        self.tape.push(value, Op::Idct2(self.idx, plan.clone()), needs)
    }

    /// Round half away from zero; backward passes the upstream gradient
    /// through unchanged (straight-through estimator).
    pub fn soft_round(self) -> Var<'t> {
        let value = self.tape.nodes.borrow()[self.idx].value.map(f64::round);
        let needs = self.tape.needs(self.idx);
        self.tape.push(value, Op::Round(self.idx), needs)
    }

    /// Identity forward with the same straight-through backward as
    /// `soft_round`; swapping this in makes objectives containing rounding
    /// smooth, so finite differences can validate the rest of the graph.
    pub fn round_as_identity(self) -> Var<'t> {
        let value = self.tape.value_clone(self.idx);
        let needs = self.tape.needs(self.idx);
        self.tape.push(value, Op::Round(self.idx), needs)
    }

    /// Clamp with a straight-through interior gradient: upstream gradient
    /// passes where the input lies in [lo, hi], zero outside.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        assert!(lo < hi);
        let value = self.tape.nodes.borrow()[self.idx].value.map(|v| v.clamp(lo, hi));
        let needs = self.tape.needs(self.idx);
        self.tape.push(value, Op::Clamp { x: self.idx, lo, hi }, needs)
    }

    /// Uniform mean filter over w^3 windows, valid extent (rank-3 input).
    pub fn box_mean(self, window: usize) -> Var<'t> {
        let value = box_mean3(&self.tape.nodes.borrow()[self.idx].value, window);
        let needs = self.tape.needs(self.idx);
        self.tape.push(value, Op::BoxMean { x: self.idx, window }, needs)
    }

    pub fn gather(self, idx: Rc<Vec<usize>>) -> Var<'t> {
        let nodes = self.tape.nodes.borrow();
        let x = &nodes[self.idx].value;
        let data: Vec<f64> = idx.iter().map(|&i| x.data()[i]).collect();
        let value = Tensor::from_vec(&[idx.len()], data);
        let needs = nodes[self.idx].needs_grad;
        drop(nodes);
        self.tape.push(value, Op::Gather { x: self.idx, idx }, needs)
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let value = self.tape.value_clone(self.idx).reshaped(shape);
        let needs = self.tape.needs(self.idx);
        self.tape.push(value, Op::Reshape(self.idx), needs)
    }
}

impl<'t> std::ops::Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        Var::add(self, rhs)
    }
}

impl<'t> std::ops::Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        Var::sub(self, rhs)
    }
}

impl<'t> std::ops::Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        Var::mul(self, rhs)
    }
}

impl<'t> std::ops::Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        Var::div(self, rhs)
    }
}
