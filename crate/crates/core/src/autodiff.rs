//! Reverse-mode automatic differentiation over `ndarray` matrices.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s;
//! [`Tape::backward`] replays the records in reverse and accumulates
//! gradients. Values are `f64` matrices throughout; scalars are 1x1.
//! The tape is single-threaded and rebuilt for every training step, so
//! model parameters live outside it as plain arrays and enter through
//! [`Tape::param`].
//!
//! Only the operations the losses need are implemented: affine maps,
//! row normalization, row-wise softmax / log-softmax / log-sum-exp,
//! GELU, gather/select indexing, stacking and reductions. Masked
//! denominators (e.g. "sum over n != i") are expressed by adding a
//! constant matrix of `-inf` entries before `logsumexp_rows`.

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{Array2, Axis};

/// Row norms below this are treated as constant scale in `normalize_rows`.
const NORM_FLOOR: f64 = 1e-12;

type BackwardFn = Box<dyn Fn(&Array2<f64>, &mut [Option<Array2<f64>>])>;

struct Node {
    value: Array2<f64>,
    backward: Option<BackwardFn>,
    needs_grad: bool,
}

/// Records a computation graph; cheap to clone (shared handle).
#[derive(Clone, Default)]
pub struct Tape {
    nodes: Rc<RefCell<Vec<Node>>>,
}

/// A value on a tape. Cloning copies the handle, not the matrix.
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    index: usize,
}

/// Gradients of one scalar output with respect to every tape node.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient for `var`, if any path from the output reached it.
    pub fn wrt(&self, var: &Var) -> Option<&Array2<f64>> {
        self.grads.get(var.index).and_then(|g| g.as_ref())
    }
}

fn accumulate(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
    match slot {
        Some(existing) => *existing += &g,
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: Array2<f64>, needs_grad: bool, backward: Option<BackwardFn>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            backward,
            needs_grad,
        });
        Var {
            tape: self.clone(),
            index: nodes.len() - 1,
        }
    }

    /// A trainable leaf; gradients are produced for it.
    pub fn param(&self, value: Array2<f64>) -> Var {
        self.push(value, true, None)
    }

    /// A non-trainable leaf; no gradient is tracked through it.
    pub fn constant(&self, value: Array2<f64>) -> Var {
        self.push(value, false, None)
    }

    /// A 1x1 constant.
    pub fn scalar(&self, v: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), v))
    }

    fn value_of(&self, index: usize) -> Array2<f64> {
        self.nodes.borrow()[index].value.clone()
    }

    fn needs_grad(&self, index: usize) -> bool {
        self.nodes.borrow()[index].needs_grad
    }

    /// Backpropagates from a 1x1 `root`, returning all gradients.
    ///
    /// Panics if `root` is not scalar-shaped.
    pub fn backward(&self, root: &Var) -> Gradients {
        assert_eq!(
            root.shape(),
            (1, 1),
            "backward requires a scalar (1x1) root"
        );
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Array2<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.index] = Some(Array2::from_elem((1, 1), 1.0));
        for i in (0..=root.index).rev() {
            let Some(g) = grads[i].take() else { continue };
            if let Some(bw) = &nodes[i].backward {
                bw(&g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }
}

impl Var {
    pub fn value(&self) -> Array2<f64> {
        self.tape.value_of(self.index)
    }

    /// The single element of a 1x1 var.
    pub fn scalar_value(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.dim(), (1, 1), "scalar_value on non-scalar var");
        v[(0, 0)]
    }

    pub fn shape(&self) -> (usize, usize) {
        let nodes = self.tape.nodes.borrow();
        nodes[self.index].value.dim()
    }

    fn unary(&self, value: Array2<f64>, backward: BackwardFn) -> Var {
        let needs = self.tape.needs_grad(self.index);
        self.tape
            .push(value, needs, if needs { Some(backward) } else { None })
    }

    fn binary(&self, rhs: &Var, value: Array2<f64>, backward: BackwardFn) -> Var {
        assert!(
            Rc::ptr_eq(&self.tape.nodes, &rhs.tape.nodes),
            "vars from different tapes"
        );
        let needs = self.tape.needs_grad(self.index) || self.tape.needs_grad(rhs.index);
        self.tape
            .push(value, needs, if needs { Some(backward) } else { None })
    }

    /// Cuts the gradient: same value, treated as a constant downstream.
    pub fn detach(&self) -> Var {
        self.tape.constant(self.value())
    }

    pub fn matmul(&self, rhs: &Var) -> Var {
        let a = self.value();
        let b = rhs.value();
        assert_eq!(a.ncols(), b.nrows(), "matmul shape mismatch");
        let value = a.dot(&b);
        let (pa, pb) = (self.index, rhs.index);
        let ga = self.tape.needs_grad(pa);
        let gb = self.tape.needs_grad(pb);
        self.binary(
            rhs,
            value,
            Box::new(move |g, grads| {
                if ga {
                    accumulate(&mut grads[pa], g.dot(&b.t()));
                }
                if gb {
                    accumulate(&mut grads[pb], a.t().dot(g));
                }
            }),
        )
    }

    pub fn t(&self) -> Var {
        let value = self.value().t().to_owned();
        let p = self.index;
        self.unary(
            value,
            Box::new(move |g, grads| accumulate(&mut grads[p], g.t().to_owned())),
        )
    }

    pub fn add(&self, rhs: &Var) -> Var {
        let value = &self.value() + &rhs.value();
        let (pa, pb) = (self.index, rhs.index);
        let ga = self.tape.needs_grad(pa);
        let gb = self.tape.needs_grad(pb);
        self.binary(
            rhs,
            value,
            Box::new(move |g, grads| {
                if ga {
                    accumulate(&mut grads[pa], g.clone());
                }
                if gb {
                    accumulate(&mut grads[pb], g.clone());
                }
            }),
        )
    }

    pub fn sub(&self, rhs: &Var) -> Var {
        let value = &self.value() - &rhs.value();
        let (pa, pb) = (self.index, rhs.index);
        let ga = self.tape.needs_grad(pa);
        let gb = self.tape.needs_grad(pb);
        self.binary(
            rhs,
            value,
            Box::new(move |g, grads| {
                if ga {
                    accumulate(&mut grads[pa], g.clone());
                }
                if gb {
                    accumulate(&mut grads[pb], -g);
                }
            }),
        )
    }

    /// Elementwise product.
    pub fn mul(&self, rhs: &Var) -> Var {
        let a = self.value();
        let b = rhs.value();
        assert_eq!(a.dim(), b.dim(), "mul shape mismatch");
        let value = &a * &b;
        let (pa, pb) = (self.index, rhs.index);
        let ga = self.tape.needs_grad(pa);
        let gb = self.tape.needs_grad(pb);
        self.binary(
            rhs,
            value,
            Box::new(move |g, grads| {
                if ga {
                    accumulate(&mut grads[pa], g * &b);
                }
                if gb {
                    accumulate(&mut grads[pb], g * &a);
                }
            }),
        )
    }

    pub fn scale(&self, c: f64) -> Var {
        let value = &self.value() * c;
        let p = self.index;
        self.unary(
            value,
            Box::new(move |g, grads| accumulate(&mut grads[p], g * c)),
        )
    }

    pub fn neg(&self) -> Var {
        self.scale(-1.0)
    }

    /// Adds a 1xM row vector to every row of an NxM matrix.
    pub fn add_row(&self, bias: &Var) -> Var {
        let a = self.value();
        let b = bias.value();
        assert_eq!(b.nrows(), 1, "add_row bias must be 1xM");
        assert_eq!(a.ncols(), b.ncols(), "add_row width mismatch");
        let value = &a + &b;
        let (pa, pb) = (self.index, bias.index);
        let ga = self.tape.needs_grad(pa);
        let gb = self.tape.needs_grad(pb);
        self.binary(
            bias,
            value,
            Box::new(move |g, grads| {
                if ga {
                    accumulate(&mut grads[pa], g.clone());
                }
                if gb {
                    let col_sum = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads[pb], col_sum);
                }
            }),
        )
    }

    /// GELU activation (tanh approximation).
    pub fn gelu(&self) -> Var {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const A: f64 = 0.044_715;
        let x = self.value();
        let value = x.mapv(|v| 0.5 * v * (1.0 + (C * (v + A * v * v * v)).tanh()));
        let p = self.index;
        self.unary(
            value,
            Box::new(move |g, grads| {
                let dx = x.mapv(|v| {
                    let u = C * (v + A * v * v * v);
                    let t = u.tanh();
                    0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * C * (1.0 + 3.0 * A * v * v)
                });
                accumulate(&mut grads[p], g * &dx);
            }),
        )
    }

    /// Scales each row to unit L2 norm. Rows with norm below `1e-12`
    /// are divided by that floor instead.
    pub fn normalize_rows(&self) -> Var {
        let x = self.value();
        let norms: Vec<f64> = x
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt().max(NORM_FLOOR))
            .collect();
        let mut value = x.clone();
        for (i, mut row) in value.rows_mut().into_iter().enumerate() {
            row /= norms[i];
        }
        let y = value.clone();
        let floored: Vec<bool> = x
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt() < NORM_FLOOR)
            .collect();
        let p = self.index;
        self.unary(
            value,
            Box::new(move |g, grads| {
                let mut gx = Array2::zeros(g.dim());
                for i in 0..g.nrows() {
                    let gr = g.row(i);
                    let yr = y.row(i);
                    if floored[i] {
                        // x / floor is linear in x
                        for j in 0..g.ncols() {
                            gx[(i, j)] = gr[j] / NORM_FLOOR;
                        }
                    } else {
                        let dot = yr.dot(&gr);
                        for j in 0..g.ncols() {
                            gx[(i, j)] = (gr[j] - yr[j] * dot) / norms[i];
                        }
                    }
                }
                accumulate(&mut grads[p], gx);
            }),
        )
    }

    /// Row-wise softmax. `-inf` logits get exactly zero probability.
    pub fn softmax_rows(&self) -> Var {
        let x = self.value();
        let value = softmax_matrix(&x);
        let y = value.clone();
        let p = self.index;
        self.unary(
            value,
            Box::new(move |g, grads| {
                let mut gx = Array2::zeros(g.dim());
                for i in 0..g.nrows() {
                    let dot = y.row(i).dot(&g.row(i));
                    for j in 0..g.ncols() {
                        gx[(i, j)] = y[(i, j)] * (g[(i, j)] - dot);
                    }
                }
                accumulate(&mut grads[p], gx);
            }),
        )
    }

    /// Row-wise log-softmax.
    pub fn log_softmax_rows(&self) -> Var {
        let x = self.value();
        let soft = softmax_matrix(&x);
        let mut value = x.clone();
        for i in 0..x.nrows() {
            let lse = logsumexp_row(&x, i);
            for j in 0..x.ncols() {
                value[(i, j)] = x[(i, j)] - lse;
            }
        }
        let p = self.index;
        self.unary(
            value,
            Box::new(move |g, grads| {
                let mut gx = Array2::zeros(g.dim());
                for i in 0..g.nrows() {
                    let row_sum: f64 = g.row(i).sum();
                    for j in 0..g.ncols() {
                        gx[(i, j)] = g[(i, j)] - soft[(i, j)] * row_sum;
                    }
                }
                accumulate(&mut grads[p], gx);
            }),
        )
    }

    /// Row-wise log-sum-exp, returning Nx1. Tolerates `-inf` entries as
    /// long as each row keeps at least one finite logit.
    pub fn logsumexp_rows(&self) -> Var {
        let x = self.value();
        let n = x.nrows();
        let mut value = Array2::zeros((n, 1));
        for i in 0..n {
            value[(i, 0)] = logsumexp_row(&x, i);
        }
        let soft = softmax_matrix(&x);
        let p = self.index;
        self.unary(
            value,
            Box::new(move |g, grads| {
                let mut gx = soft.clone();
                for (i, mut row) in gx.rows_mut().into_iter().enumerate() {
                    row *= g[(i, 0)];
                }
                accumulate(&mut grads[p], gx);
            }),
        )
    }

    /// Elementwise `max(x, c)`. Gradient passes only where `x > c`, which
    /// keeps `p * ln(max(p, tiny))` finite for entropy terms at `p = 0`.
    pub fn clamp_min(&self, c: f64) -> Var {
        let x = self.value();
        let value = x.mapv(|v| v.max(c));
        let p = self.index;
        self.unary(
            value,
            Box::new(move |g, grads| {
                let mut gx = g.clone();
                for (gv, &xv) in gx.iter_mut().zip(x.iter()) {
                    if xv <= c {
                        *gv = 0.0;
                    }
                }
                accumulate(&mut grads[p], gx);
            }),
        )
    }

    /// Elementwise natural log; inputs must be strictly positive.
    pub fn ln(&self) -> Var {
        let x = self.value();
        let value = x.mapv(f64::ln);
        let p = self.index;
        self.unary(
            value,
            Box::new(move |g, grads| accumulate(&mut grads[p], g / &x)),
        )
    }

    pub fn sum_all(&self) -> Var {
        let x = self.value();
        let dim = x.dim();
        let value = Array2::from_elem((1, 1), x.sum());
        let p = self.index;
        self.unary(
            value,
            Box::new(move |g, grads| {
                accumulate(&mut grads[p], Array2::from_elem(dim, g[(0, 0)]));
            }),
        )
    }

    pub fn mean_all(&self) -> Var {
        let x = self.value();
        let dim = x.dim();
        let count = (dim.0 * dim.1) as f64;
        let value = Array2::from_elem((1, 1), x.sum() / count);
        let p = self.index;
        self.unary(
            value,
            Box::new(move |g, grads| {
                accumulate(&mut grads[p], Array2::from_elem(dim, g[(0, 0)] / count));
            }),
        )
    }

    /// Sum of each row: NxM -> Nx1.
    pub fn row_sums(&self) -> Var {
        let x = self.value();
        let value = x.sum_axis(Axis(1)).insert_axis(Axis(1));
        let dim = x.dim();
        let p = self.index;
        self.unary(
            value,
            Box::new(move |g, grads| {
                let mut gx = Array2::zeros(dim);
                for i in 0..dim.0 {
                    for j in 0..dim.1 {
                        gx[(i, j)] = g[(i, 0)];
                    }
                }
                accumulate(&mut grads[p], gx);
            }),
        )
    }

    /// Mean down each column: NxM -> 1xM.
    pub fn col_means(&self) -> Var {
        let x = self.value();
        let dim = x.dim();
        let n = dim.0 as f64;
        let value = x.mean_axis(Axis(0)).expect("nonempty").insert_axis(Axis(0));
        let p = self.index;
        self.unary(
            value,
            Box::new(move |g, grads| {
                let mut gx = Array2::zeros(dim);
                for i in 0..dim.0 {
                    for j in 0..dim.1 {
                        gx[(i, j)] = g[(0, j)] / n;
                    }
                }
                accumulate(&mut grads[p], gx);
            }),
        )
    }

    /// Selects rows by index (duplicates allowed).
    pub fn gather_rows(&self, idx: &[usize]) -> Var {
        let x = self.value();
        let m = x.ncols();
        let mut value = Array2::zeros((idx.len(), m));
        for (r, &i) in idx.iter().enumerate() {
            value.row_mut(r).assign(&x.row(i));
        }
        let idx = idx.to_vec();
        let dim = x.dim();
        let p = self.index;
        self.unary(
            value,
            Box::new(move |g, grads| {
                let mut gx = Array2::zeros(dim);
                for (r, &i) in idx.iter().enumerate() {
                    let mut dst = gx.row_mut(i);
                    dst += &g.row(r);
                }
                accumulate(&mut grads[p], gx);
            }),
        )
    }

    /// Picks one element per row: out[i] = x[i, idx[i]], returning Nx1.
    pub fn select_per_row(&self, idx: &[usize]) -> Var {
        let x = self.value();
        assert_eq!(x.nrows(), idx.len(), "select_per_row index length");
        let mut value = Array2::zeros((idx.len(), 1));
        for (i, &j) in idx.iter().enumerate() {
            value[(i, 0)] = x[(i, j)];
        }
        let idx = idx.to_vec();
        let dim = x.dim();
        let p = self.index;
        self.unary(
            value,
            Box::new(move |g, grads| {
                let mut gx = Array2::zeros(dim);
                for (i, &j) in idx.iter().enumerate() {
                    gx[(i, j)] += g[(i, 0)];
                }
                accumulate(&mut grads[p], gx);
            }),
        )
    }

    /// Stacks vars vertically (all with the same column count).
    pub fn vstack(parts: &[&Var]) -> Var {
        assert!(!parts.is_empty(), "vstack of nothing");
        let tape = parts[0].tape.clone();
        let cols = parts[0].shape().1;
        let mut rows = 0;
        for p in parts {
            assert_eq!(p.shape().1, cols, "vstack column mismatch");
            rows += p.shape().0;
        }
        let mut value = Array2::zeros((rows, cols));
        let mut offsets = Vec::with_capacity(parts.len());
        let mut at = 0;
        for p in parts {
            let v = p.value();
            value
                .slice_mut(ndarray::s![at..at + v.nrows(), ..])
                .assign(&v);
            offsets.push((p.index, at, v.nrows()));
            at += v.nrows();
        }
        let needs = parts.iter().any(|p| tape.needs_grad(p.index));
        let flags: Vec<bool> = parts.iter().map(|p| tape.needs_grad(p.index)).collect();
        let backward: BackwardFn = Box::new(move |g, grads| {
            for (k, &(pi, start, len)) in offsets.iter().enumerate() {
                if flags[k] {
                    let piece = g.slice(ndarray::s![start..start + len, ..]).to_owned();
                    accumulate(&mut grads[pi], piece);
                }
            }
        });
        tape.push(value, needs, if needs { Some(backward) } else { None })
    }
}

fn logsumexp_row(x: &Array2<f64>, i: usize) -> f64 {
    let row = x.row(i);
    let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    debug_assert!(m.is_finite(), "logsumexp row with no finite entries");
    let s: f64 = row.iter().map(|&v| (v - m).exp()).sum();
    m + s.ln()
}

fn softmax_matrix(x: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(x.dim());
    for i in 0..x.nrows() {
        let row = x.row(i);
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut sum = 0.0;
        for j in 0..x.ncols() {
            let e = (x[(i, j)] - m).exp();
            out[(i, j)] = e;
            sum += e;
        }
        for j in 0..x.ncols() {
            out[(i, j)] /= sum;
        }
    }
    out
}
