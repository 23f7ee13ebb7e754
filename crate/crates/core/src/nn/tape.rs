//! Reverse-mode automatic differentiation over matrix-valued nodes.
//!
//! Expressions are recorded on a [`Tape`] as they are evaluated; a single
//! backward sweep from a 1×1 loss node yields exact gradients for every node
//! that depends on a variable. The primitive set is closed: anything the
//! [`Tape`] methods can build is differentiable.

use super::tensor::{gemm, Tensor};

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulCol(usize, usize),
    ScaleBy(usize, usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    Transpose(usize),
    Relu(usize),
    Abs(usize),
    Sum(usize),
    SqNorm(usize),
    GatherRows(usize, Vec<usize>),
    GatherElems(usize, Vec<(usize, usize)>),
    CapBlocks { input: usize, block: usize, cap: f64 },
    Rodrigues(usize),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, zeros when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// A differentiable input.
    pub fn var(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A fixed input; no gradient is propagated into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "{what}: operand shapes differ");
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        let rg = self.rg(&[a.0, b.0]);
        self.push(v, Op::Add(a.0, b.0), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p - q).collect();
        let v = Tensor::from_vec(x.rows, x.cols, data);
        let rg = self.rg(&[a.0, b.0]);
        self.push(v, Op::Sub(a.0, b.0), rg)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p * q).collect();
        let v = Tensor::from_vec(x.rows, x.cols, data);
        let rg = self.rg(&[a.0, b.0]);
        self.push(v, Op::Mul(a.0, b.0), rg)
    }

    /// `a + row` with the 1×c `row` broadcast over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (self.value(a), self.value(row));
        assert_eq!(r.shape(), (1, x.cols), "add_row: row must be 1 x cols");
        let mut v = x.clone();
        for chunk in v.data.chunks_exact_mut(x.cols.max(1)) {
            for (o, b) in chunk.iter_mut().zip(&r.data) {
                *o += b;
            }
        }
        let rg = self.rg(&[a.0, row.0]);
        self.push(v, Op::AddRow(a.0, row.0), rg)
    }

    /// `a ⊙ col` with the n×1 `col` broadcast over every column of `a`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (x, c) = (self.value(a), self.value(col));
        assert_eq!(c.shape(), (x.rows, 1), "mul_col: column must be rows x 1");
        let mut v = x.clone();
        for (r, chunk) in v.data.chunks_exact_mut(x.cols.max(1)).enumerate() {
            for o in chunk {
                *o *= c.data[r];
            }
        }
        let rg = self.rg(&[a.0, col.0]);
        self.push(v, Op::MulCol(a.0, col.0), rg)
    }

    /// `s · a` for a 1×1 node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let k = self.value(s).item();
        let v = self.value(a).map(|x| x * k);
        let rg = self.rg(&[a.0, s.0]);
        self.push(v, Op::ScaleBy(a.0, s.0), rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x * k);
        let rg = self.rg(&[a.0]);
        self.push(v, Op::Scale(a.0, k), rg)
    }

    /// Matrix product (a matrix-vector product when `b` has one column).
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let rg = self.rg(&[a.0, b.0]);
        self.push(v, Op::MatMul(a.0, b.0), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        let rg = self.rg(&[a.0]);
        self.push(v, Op::Transpose(a.0), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(&[a.0]);
        self.push(v, Op::Relu(a.0), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        let rg = self.rg(&[a.0]);
        self.push(v, Op::Abs(a.0), rg)
    }

    /// Sum of all entries, 1×1.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).data.iter().sum());
        let rg = self.rg(&[a.0]);
        self.push(v, Op::Sum(a.0), rg)
    }

    /// Sum of squared entries, 1×1.
    pub fn sq_norm(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).data.iter().map(|x| x * x).sum());
        let rg = self.rg(&[a.0]);
        self.push(v, Op::SqNorm(a.0), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Rows of `a` selected by index (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Var {
        let x = self.value(a);
        let mut v = Tensor::zeros(indices.len(), x.cols);
        for (o, &i) in indices.iter().enumerate() {
            assert!(i < x.rows, "gather_rows: index {i} out of range");
            v.row_slice_mut(o).copy_from_slice(x.row_slice(i));
        }
        let rg = self.rg(&[a.0]);
        self.push(v, Op::GatherRows(a.0, indices.to_vec()), rg)
    }

    /// Entries `(row, col)` of `a` as a k×1 column.
    pub fn gather_elems(&mut self, a: Var, at: &[(usize, usize)]) -> Var {
        let x = self.value(a);
        let data = at
            .iter()
            .map(|&(r, c)| {
                assert!(r < x.rows && c < x.cols, "gather_elems: ({r},{c}) out of range");
                x.get(r, c)
            })
            .collect();
        let v = Tensor::from_vec(at.len(), 1, data);
        let rg = self.rg(&[a.0]);
        self.push(v, Op::GatherElems(a.0, at.to_vec()), rg)
    }

    /// Splits each row into consecutive blocks of `block` entries and rescales
    /// any block whose Euclidean norm exceeds `cap` down to norm `cap`.
    pub fn cap_blocks(&mut self, a: Var, block: usize, cap: f64) -> Var {
        let x = self.value(a);
        assert!(block > 0 && x.cols.is_multiple_of(block), "cap_blocks: cols must be a multiple of block");
        let mut v = x.clone();
        cap_blocks_in_place(&mut v.data, block, cap);
        let rg = self.rg(&[a.0]);
        self.push(v, Op::CapBlocks { input: a.0, block, cap }, rg)
    }

    /// Rotation matrix (3×3) of an axis-angle 1×3 (or 3×1) vector.
    pub fn rodrigues(&mut self, a: Var) -> Var {
        let x = self.value(a);
        assert_eq!(x.len(), 3, "rodrigues: needs a 3-vector");
        let r = rodrigues_matrix([x.data[0], x.data[1], x.data[2]]);
        let v = Tensor::from_vec(3, 3, r.iter().flatten().copied().collect());
        let rg = self.rg(&[a.0]);
        self.push(v, Op::Rodrigues(a.0), rg)
    }

    /// Reverse sweep from a 1×1 `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar loss");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads, shapes: self.nodes.iter().map(|n| n.value.shape()).collect() }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
        if !self.nodes[id].requires_grad {
            return;
        }
        match &mut grads[id] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn wants(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone());
                if self.wants(b) {
                    self.accumulate(grads, b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                let (x, y) = (&self.nodes[a].value, &self.nodes[b].value);
                if self.wants(a) {
                    let d = g.data.iter().zip(&y.data).map(|(p, q)| p * q).collect();
                    self.accumulate(grads, a, Tensor::from_vec(g.rows, g.cols, d));
                }
                if self.wants(b) {
                    let d = g.data.iter().zip(&x.data).map(|(p, q)| p * q).collect();
                    self.accumulate(grads, b, Tensor::from_vec(g.rows, g.cols, d));
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, a, g.clone());
                if self.wants(row) {
                    let mut d = Tensor::zeros(1, g.cols);
                    for chunk in g.data.chunks_exact(g.cols.max(1)) {
                        for (o, x) in d.data.iter_mut().zip(chunk) {
                            *o += x;
                        }
                    }
                    self.accumulate(grads, row, d);
                }
            }
            Op::MulCol(a, col) => {
                let (x, c) = (&self.nodes[a].value, &self.nodes[col].value);
                if self.wants(a) {
                    let mut d = g.clone();
                    for (r, chunk) in d.data.chunks_exact_mut(g.cols.max(1)).enumerate() {
                        for o in chunk {
                            *o *= c.data[r];
                        }
                    }
                    self.accumulate(grads, a, d);
                }
                if self.wants(col) {
                    let d = (0..g.rows)
                        .map(|r| g.row_slice(r).iter().zip(x.row_slice(r)).map(|(p, q)| p * q).sum())
                        .collect();
                    self.accumulate(grads, col, Tensor::from_vec(g.rows, 1, d));
                }
            }
            Op::ScaleBy(a, s) => {
                let k = self.nodes[s].value.item();
                if self.wants(a) {
                    self.accumulate(grads, a, g.map(|x| x * k));
                }
                if self.wants(s) {
                    let x = &self.nodes[a].value;
                    let d = g.data.iter().zip(&x.data).map(|(p, q)| p * q).sum();
                    self.accumulate(grads, s, Tensor::scalar(d));
                }
            }
            Op::Scale(a, k) => self.accumulate(grads, a, g.map(|x| x * k)),
            Op::MatMul(a, b) => {
                let (x, y) = (&self.nodes[a].value, &self.nodes[b].value);
                if self.wants(a) {
                    let mut d = Tensor::zeros(x.rows, x.cols);
                    gemm(g, false, y, true, &mut d, 0.0);
                    self.accumulate(grads, a, d);
                }
                if self.wants(b) {
                    let mut d = Tensor::zeros(y.rows, y.cols);
                    gemm(x, true, g, false, &mut d, 0.0);
                    self.accumulate(grads, b, d);
                }
            }
            Op::Transpose(a) => self.accumulate(grads, a, g.transpose()),
            Op::Relu(a) => {
                let d = g.data.iter().zip(&out.data).map(|(p, y)| if *y > 0.0 { *p } else { 0.0 }).collect();
                self.accumulate(grads, a, Tensor::from_vec(g.rows, g.cols, d));
            }
            Op::Abs(a) => {
                let x = &self.nodes[a].value;
                let d = g.data.iter().zip(&x.data).map(|(p, q)| p * sign(*q)).collect();
                self.accumulate(grads, a, Tensor::from_vec(g.rows, g.cols, d));
            }
            Op::Sum(a) => {
                let x = &self.nodes[a].value;
                self.accumulate(grads, a, Tensor::filled(x.rows, x.cols, g.item()));
            }
            Op::SqNorm(a) => {
                let k = 2.0 * g.item();
                let d = self.nodes[a].value.map(|x| k * x);
                self.accumulate(grads, a, d);
            }
            Op::GatherRows(a, ref indices) => {
                let x = &self.nodes[a].value;
                let mut d = Tensor::zeros(x.rows, x.cols);
                for (o, &i) in indices.iter().enumerate() {
                    for (acc, v) in d.row_slice_mut(i).iter_mut().zip(g.row_slice(o)) {
                        *acc += v;
                    }
                }
                self.accumulate(grads, a, d);
            }
            Op::GatherElems(a, ref at) => {
                let x = &self.nodes[a].value;
                let mut d = Tensor::zeros(x.rows, x.cols);
                for (o, &(r, c)) in at.iter().enumerate() {
                    d.data[r * x.cols + c] += g.data[o];
                }
                self.accumulate(grads, a, d);
            }
            Op::CapBlocks { input, block, cap } => {
                let x = &self.nodes[input].value;
                let mut d = g.clone();
                for (xb, db) in x.data.chunks_exact(block).zip(d.data.chunks_exact_mut(block)) {
                    let norm = xb.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm > cap {
                        let dot: f64 = xb.iter().zip(db.iter()).map(|(u, v)| u * v).sum::<f64>() / norm;
                        for (o, u) in db.iter_mut().zip(xb) {
                            *o = cap / norm * (*o - u / norm * dot);
                        }
                    }
                }
                self.accumulate(grads, input, d);
            }
            Op::Rodrigues(a) => {
                let x = &self.nodes[a].value;
                let v = [x.data[0], x.data[1], x.data[2]];
                let partials = rodrigues_partials(v);
                let d: Vec<f64> =
                    partials.iter().map(|p| p.iter().flatten().zip(&g.data).map(|(a, b)| a * b).sum()).collect();
                self.accumulate(grads, a, Tensor::from_vec(x.rows, x.cols, d));
            }
        }
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Rescales each `block`-sized chunk to Euclidean norm at most `cap`.
pub fn cap_blocks_in_place(data: &mut [f64], block: usize, cap: f64) {
    for chunk in data.chunks_exact_mut(block) {
        let norm = chunk.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > cap {
            let k = cap / norm;
            for v in chunk {
                *v *= k;
            }
        }
    }
}

type Mat3 = [[f64; 3]; 3];

fn skew(v: [f64; 3]) -> Mat3 {
    [[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]]
}

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// Coefficients of `R = I + a K + b K²` and their derivatives divided by θ.
fn rodrigues_coefficients(theta: f64) -> (f64, f64, f64, f64) {
    let t2 = theta * theta;
    if theta < 1e-3 {
        let t4 = t2 * t2;
        (
            1.0 - t2 / 6.0 + t4 / 120.0,
            0.5 - t2 / 24.0 + t4 / 720.0,
            -1.0 / 3.0 + t2 / 30.0 - t4 / 840.0,
            -1.0 / 12.0 + t2 / 180.0 - t4 / 6720.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        (s / theta, (1.0 - c) / t2, (theta * c - s) / (t2 * theta), (theta * s - 2.0 * (1.0 - c)) / (t2 * t2))
    }
}

/// Rotation matrix of an axis-angle vector (Rodrigues' formula).
pub fn rodrigues_matrix(v: [f64; 3]) -> Mat3 {
    let theta = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    let (a, b, _, _) = rodrigues_coefficients(theta);
    let k = skew(v);
    let k2 = mat_mul(&k, &k);
    let mut r = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] = if i == j { 1.0 } else { 0.0 } + a * k[i][j] + b * k2[i][j];
        }
    }
    r
}

/// `∂R/∂v_i` for each component of the axis-angle vector.
fn rodrigues_partials(v: [f64; 3]) -> [Mat3; 3] {
    let theta = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    let (a, b, da, db) = rodrigues_coefficients(theta);
    let k = skew(v);
    let k2 = mat_mul(&k, &k);
    let mut out = [[[0.0; 3]; 3]; 3];
    for (i, slot) in out.iter_mut().enumerate() {
        let mut e = [0.0; 3];
        e[i] = 1.0;
        let ei = skew(e);
        let ek = mat_mul(&ei, &k);
        let ke = mat_mul(&k, &ei);
        for r in 0..3 {
            for c in 0..3 {
                slot[r][c] = a * ei[r][c] + b * (ek[r][c] + ke[r][c]) + da * v[i] * k[r][c] + db * v[i] * k2[r][c];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const STEP: f64 = 1e-5;

    fn random_tensor(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
        Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Central-difference gradient of `f` at `x`.
    fn finite_difference(x: &Tensor, f: &dyn Fn(&Tensor) -> f64) -> Tensor {
        let mut g = Tensor::zeros(x.rows, x.cols);
        for i in 0..x.len() {
            let mut p = x.clone();
            p.data[i] += STEP;
            let mut m = x.clone();
            m.data[i] -= STEP;
            g.data[i] = (f(&p) - f(&m)) / (2.0 * STEP);
        }
        g
    }

    fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
        let num = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den = a.data.iter().map(|x| x * x).sum::<f64>().sqrt() + b.data.iter().map(|x| x * x).sum::<f64>().sqrt();
        if den < 1e-12 {
            num
        } else {
            num / den
        }
    }

    /// Checks reverse-mode against finite differences for an expression of
    /// one variable.
    fn check(x: Tensor, build: impl Fn(&mut Tape, Var) -> Var) -> f64 {
        let eval = |t: &Tensor| {
            let mut tape = Tape::new();
            let v = tape.var(t.clone());
            let out = build(&mut tape, v);
            tape.value(out).item()
        };
        let mut tape = Tape::new();
        let v = tape.var(x.clone());
        let out = build(&mut tape, v);
        let analytic = tape.backward(out).wrt(v);
        rel_err(&analytic, &finite_difference(&x, &eval))
    }

    #[test]
    fn square_and_abs_examples() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::scalar(3.0));
        let y = tape.sq_norm(x);
        assert_eq!(tape.backward(y).wrt(x).item(), 6.0);

        let mut tape = Tape::new();
        let x = tape.var(Tensor::row(&[-1.0, 2.0]));
        let a = tape.abs(x);
        let s = tape.sum(a);
        assert_eq!(tape.backward(s).wrt(x).data, vec![-1.0, 1.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::row(&[1.0, 2.0]));
        let x = tape.var(Tensor::row(&[3.0, 4.0]));
        let p = tape.mul(c, x);
        let s = tape.sum(p);
        let g = tape.backward(s);
        assert!(g.get(c).is_none());
        assert_eq!(g.wrt(x).data, vec![1.0, 2.0]);
    }

    #[test]
    fn rodrigues_quarter_turn() {
        let r = rodrigues_matrix([0.0, 0.0, std::f64::consts::FRAC_PI_2]);
        let p = [1.0, 0.0, 0.0];
        let q: Vec<f64> = (0..3).map(|i| (0..3).map(|j| r[i][j] * p[j]).sum()).collect();
        assert!((q[0]).abs() < 1e-12 && (q[1] - 1.0).abs() < 1e-12 && q[2].abs() < 1e-12);
    }

    #[test]
    fn rodrigues_matches_nalgebra() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let v = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let r = rodrigues_matrix(v);
            let reference = nalgebra::Rotation3::new(nalgebra::Vector3::from(v));
            for i in 0..3 {
                for j in 0..3 {
                    assert!((r[i][j] - reference[(i, j)]).abs() < 1e-12);
                }
            }
        }
    }

    // One property per primitive: reverse-mode agrees with central differences.
    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn grad_add_sub_mul(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = random_tensor(3, 4, &mut rng);
            let err = check(random_tensor(3, 4, &mut rng), |t, x| {
                let c = t.constant(w.clone());
                let a = t.add(x, c);
                let b = t.sub(a, x);
                let m = t.mul(b, x);
                let m2 = t.mul(m, x);
                t.sum(m2)
            });
            prop_assert!(err < 1e-4);
        }

        #[test]
        fn grad_add_row_mul_col(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = random_tensor(5, 3, &mut rng);
            let err = check(random_tensor(1, 3, &mut rng), |t, x| {
                let c = t.constant(w.clone());
                let a = t.add_row(c, x);
                let xt = t.transpose(x);
                let col = t.matmul(a, xt);
                let m = t.mul_col(a, col);
                t.sq_norm(m)
            });
            prop_assert!(err < 1e-4);
        }

        #[test]
        fn grad_matmul_transpose(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = random_tensor(4, 2, &mut rng);
            let err = check(random_tensor(3, 4, &mut rng), |t, x| {
                let c = t.constant(w.clone());
                let p = t.matmul(x, c);
                let xt = t.transpose(x);
                let q = t.matmul(xt, p);
                t.sq_norm(q)
            });
            prop_assert!(err < 1e-4);
        }

        #[test]
        fn grad_relu_abs(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = random_tensor(3, 3, &mut rng);
            let err = check(random_tensor(2, 3, &mut rng), |t, x| {
                let c = t.constant(w.clone());
                let p = t.matmul(x, c);
                let r = t.relu(p);
                let a = t.abs(x);
                let s1 = t.sq_norm(r);
                let s2 = t.sum(a);
                let s = t.add(s1, s2);
                t.scale(s, 0.5)
            });
            prop_assert!(err < 1e-4);
        }

        #[test]
        fn grad_scale_by_and_gathers(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let err = check(random_tensor(4, 3, &mut rng), |t, x| {
                let rows = t.gather_rows(x, &[2, 0, 2, 3]);
                let s = t.gather_elems(x, &[(1, 1)]);
                let e = t.gather_elems(x, &[(0, 2), (3, 1), (0, 2)]);
                let scaled = t.scale_by(rows, s);
                let a = t.sq_norm(scaled);
                let b = t.sq_norm(e);
                t.add(a, b)
            });
            prop_assert!(err < 1e-4);
        }

        #[test]
        fn grad_cap_blocks(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = random_tensor(2, 6, &mut rng);
            let err = check(random_tensor(2, 6, &mut rng), |t, x| {
                let c = t.constant(w.clone());
                let capped = t.cap_blocks(x, 3, 0.7);
                let m = t.mul(capped, c);
                t.sum(m)
            });
            prop_assert!(err < 1e-4);
        }

        #[test]
        fn grad_rodrigues(seed in 0u64..10_000, scale in prop::sample::select(vec![1e-4, 0.5, 2.0])) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = random_tensor(3, 3, &mut rng);
            let x = random_tensor(1, 3, &mut rng).map(|v| v * scale);
            let err = check(x, |t, x| {
                let r = t.rodrigues(x);
                let c = t.constant(w.clone());
                let m = t.mul(r, c);
                t.sum(m)
            });
            prop_assert!(err < 1e-4);
        }
    }
}
