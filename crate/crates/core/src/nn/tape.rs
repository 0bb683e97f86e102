//! Tape-based reverse-mode automatic differentiation over 2-D arrays.
//!
//! Every operation appends a node to the [`Tape`]; node indices are a
//! topological order, so [`Tape::backward`] walks them once, last to first.

use std::cell::RefCell;

use ndarray::{Array2, Axis, Zip};

use crate::{Error, Real, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation with a hand-written reverse pass, recorded on the tape.
pub trait CustomOp<T: Real> {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input, in input order.
    fn backward(&self, grad_out: &Array2<T>) -> Result<Vec<Array2<T>>>;
}

enum Op<T: Real> {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, T),
    AddConst(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Powf(Var, T),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    Diag(Var),
    LogSoftmaxRows(Var),
    GumbelSt { logits: Var, soft: Array2<T>, tau: T },
    BitLogLik { logits: Var, bits: Vec<u8> },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<T>> },
}

struct Node<T: Real> {
    value: Array2<T>,
    op: Op<T>,
}

/// Records values and operations for one forward pass.
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape<T>(op: &str, a: &Array2<T>, b: &Array2<T>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("{op}: {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `log σ(x)` without overflow.
#[inline]
fn log_sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Array2<T>, op: Op<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var(nodes.len() - 1)
    }

    /// A value the graph can differentiate with respect to.
    pub fn leaf(&self, value: Array2<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar_leaf(&self, v: T) -> Var {
        self.leaf(Array2::from_elem((1, 1), v))
    }

    pub fn value(&self, v: Var) -> Array2<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&Array2<T>) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.dim()
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes.borrow()[v.0].value[[0, 0]]
    }

    fn unary(&self, a: Var, f: impl FnOnce(&Array2<T>) -> Array2<T>, op: Op<T>) -> Var {
        let value = f(&self.nodes.borrow()[a.0].value);
        self.push(value, op)
    }

    fn binary(&self, a: Var, b: Var, f: impl FnOnce(&Array2<T>, &Array2<T>) -> Result<Array2<T>>, op: Op<T>) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            f(&nodes[a.0].value, &nodes[b.0].value)?
        };
        Ok(self.push(value, op))
    }

    /// `a · b`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(
            a,
            b,
            |x, y| {
                if x.ncols() != y.nrows() {
                    return Err(Error::Shape(format!("matmul: {:?} · {:?}", x.dim(), y.dim())));
                }
                Ok(x.dot(y))
            },
            Op::MatMul(a, b),
        )
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(
            a,
            b,
            |x, y| {
                if x.ncols() != y.ncols() {
                    return Err(Error::Shape(format!("matmul_nt: {:?} · {:?}ᵀ", x.dim(), y.dim())));
                }
                Ok(x.dot(&y.t()))
            },
            Op::MatMulNT(a, b),
        )
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| same_shape("add", x, y).map(|_| x + y), Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| same_shape("sub", x, y).map(|_| x - y), Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| same_shape("mul", x, y).map(|_| x * y), Op::Mul(a, b))
    }

    /// Adds the `1×d` row `r` to every row of `a`.
    pub fn add_row(&self, a: Var, r: Var) -> Result<Var> {
        self.binary(
            a,
            r,
            |x, y| {
                if y.nrows() != 1 || y.ncols() != x.ncols() {
                    return Err(Error::Shape(format!("add_row: {:?} + {:?}", x.dim(), y.dim())));
                }
                Ok(x + y)
            },
            Op::AddRow(a, r),
        )
    }

    /// Multiplies every entry of `a` by the `1×1` node `s`.
    pub fn mul_scalar(&self, a: Var, s: Var) -> Result<Var> {
        self.binary(
            a,
            s,
            |x, y| {
                if y.dim() != (1, 1) {
                    return Err(Error::Shape(format!("mul_scalar: scalar operand has shape {:?}", y.dim())));
                }
                Ok(x * y[[0, 0]])
            },
            Op::MulScalar(a, s),
        )
    }

    pub fn scale(&self, a: Var, c: T) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_const(&self, a: Var, c: T) -> Var {
        self.unary(a, |x| x + c, Op::AddConst(a))
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, |x| x.mapv(|v| v.max(T::zero())), Op::Relu(a))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, |x| x.mapv(sigmoid), Op::Sigmoid(a))
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, |x| x.mapv(T::exp), Op::Exp(a))
    }

    pub fn ln(&self, a: Var) -> Var {
        self.unary(a, |x| x.mapv(T::ln), Op::Log(a))
    }

    pub fn powf(&self, a: Var, p: T) -> Var {
        self.unary(a, |x| x.mapv(|v| v.powf(p)), Op::Powf(a, p))
    }

    /// Sum of all entries, `1×1`.
    pub fn sum(&self, a: Var) -> Var {
        self.unary(a, |x| Array2::from_elem((1, 1), x.sum()), Op::Sum(a))
    }

    /// Mean of all entries, `1×1`.
    pub fn mean(&self, a: Var) -> Var {
        self.unary(a, |x| Array2::from_elem((1, 1), x.sum() / T::of(x.len() as f64)), Op::Mean(a))
    }

    /// Row sums, `n×1`.
    pub fn sum_cols(&self, a: Var) -> Var {
        self.unary(a, |x| x.sum_axis(Axis(1)).insert_axis(Axis(1)), Op::SumCols(a))
    }

    /// Diagonal of a square matrix as a `1×n` row.
    pub fn diag(&self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if r != c {
            return Err(Error::Shape(format!("diag of non-square {r}×{c}")));
        }
        Ok(self.unary(a, |x| x.diag().to_owned().insert_axis(Axis(0)), Op::Diag(a)))
    }

    /// Row-wise `x - logsumexp(x)`.
    pub fn log_softmax_rows(&self, a: Var) -> Var {
        self.unary(a, log_softmax_rows, Op::LogSoftmaxRows(a))
    }

    pub fn softmax_rows(&self, a: Var) -> Var {
        let l = self.log_softmax_rows(a);
        self.exp(l)
    }

    /// Straight-through Gumbel-Softmax. `logits` is `1×M`; `noise` is `K×M`
    /// standard Gumbel noise. The value is the one-hot matrix of
    /// `argmax(logits + noise)` per row; the reverse pass is that of
    /// `softmax((logits + noise)/τ)`.
    pub fn gumbel_st(&self, logits: Var, noise: &Array2<T>, tau: T) -> Result<(Var, Vec<usize>)> {
        let (value, soft, idx) = {
            let nodes = self.nodes.borrow();
            let l = &nodes[logits.0].value;
            if l.nrows() != 1 || l.ncols() != noise.ncols() {
                return Err(Error::Shape(format!("gumbel_st: logits {:?}, noise {:?}", l.dim(), noise.dim())));
            }
            let perturbed = noise + l;
            let mut value = Array2::zeros(noise.dim());
            let mut idx = Vec::with_capacity(noise.nrows());
            for (r, row) in perturbed.rows().into_iter().enumerate() {
                let mut best = 0;
                for (j, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = j;
                    }
                }
                value[[r, best]] = T::one();
                idx.push(best);
            }
            let soft = log_softmax_rows(&(perturbed / tau)).mapv(T::exp);
            (value, soft, idx)
        };
        Ok((self.push(value, Op::GumbelSt { logits, soft, tau }), idx))
    }

    /// `Σ_k [b_k log σ(z_k) + (1-b_k) log σ(-z_k)]` (natural log) for a
    /// `K×1` column of logits `z`; equal to the sum of `h_b(b, σ(z))`.
    pub fn bit_log_likelihood(&self, logits: Var, bits: Vec<u8>) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let z = &nodes[logits.0].value;
            if z.ncols() != 1 || z.nrows() != bits.len() {
                return Err(Error::Shape(format!("bit_log_likelihood: logits {:?}, {} bits", z.dim(), bits.len())));
            }
            let s: T = z
                .iter()
                .zip(&bits)
                .map(|(&v, &b)| if b == 1 { log_sigmoid(v) } else { log_sigmoid(-v) })
                .sum();
            Array2::from_elem((1, 1), s)
        };
        Ok(self.push(value, Op::BitLogLik { logits, bits }))
    }

    /// Records a node whose reverse pass is supplied by `op`.
    pub fn custom(&self, inputs: &[Var], value: Array2<T>, op: Box<dyn CustomOp<T>>) -> Var {
        self.push(value, Op::Custom { inputs: inputs.to_vec(), op })
    }

    /// Reverse pass from the `1×1` node `loss`. Nodes that do not influence
    /// `loss` receive zero gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.dim() != (1, 1) {
            return Err(Error::Shape(format!("backward needs a scalar loss, got {:?}", nodes[loss.0].value.dim())));
        }
        let mut grads: Vec<Option<Array2<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::from_elem((1, 1), T::one()));

        fn acc<T: Real>(grads: &mut [Option<Array2<T>>], v: Var, g: Array2<T>) {
            match &mut grads[v.0] {
                Some(existing) => existing.zip_mut_with(&g, |a, b| *a = *a + *b),
                slot => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            let val = |v: Var| &nodes[v.0].value;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    acc(&mut grads, *a, g.dot(&val(*b).t()));
                    acc(&mut grads, *b, val(*a).t().dot(&g));
                }
                Op::MatMulNT(a, b) => {
                    acc(&mut grads, *a, g.dot(val(*b)));
                    acc(&mut grads, *b, g.t().dot(val(*a)));
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, g.mapv(|v| -v));
                    acc(&mut grads, *a, g.clone());
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, *a, &g * val(*b));
                    acc(&mut grads, *b, &g * val(*a));
                }
                Op::AddRow(a, r) => {
                    acc(&mut grads, *r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *a, g.clone());
                }
                Op::MulScalar(a, s) => {
                    let ds = (&g * val(*a)).sum();
                    acc(&mut grads, *a, &g * val(*s)[[0, 0]]);
                    acc(&mut grads, *s, Array2::from_elem((1, 1), ds));
                }
                Op::Scale(a, c) => acc(&mut grads, *a, &g * *c),
                Op::AddConst(a) => acc(&mut grads, *a, g.clone()),
                Op::Relu(a) => {
                    let mut d = g.clone();
                    Zip::from(&mut d).and(val(*a)).for_each(|d, &x| {
                        if x <= T::zero() {
                            *d = T::zero();
                        }
                    });
                    acc(&mut grads, *a, d);
                }
                Op::Sigmoid(a) => {
                    let mut d = g.clone();
                    Zip::from(&mut d).and(&node.value).for_each(|d, &y| *d = *d * y * (T::one() - y));
                    acc(&mut grads, *a, d);
                }
                Op::Exp(a) => acc(&mut grads, *a, &g * &node.value),
                Op::Log(a) => acc(&mut grads, *a, &g / val(*a)),
                Op::Powf(a, p) => {
                    let p = *p;
                    let mut d = g.clone();
                    Zip::from(&mut d).and(val(*a)).for_each(|d, &x| *d = *d * p * x.powf(p - T::one()));
                    acc(&mut grads, *a, d);
                }
                Op::Sum(a) => {
                    let shape = val(*a).dim();
                    acc(&mut grads, *a, Array2::from_elem(shape, g[[0, 0]]));
                }
                Op::Mean(a) => {
                    let x = val(*a);
                    let v = g[[0, 0]] / T::of(x.len() as f64);
                    acc(&mut grads, *a, Array2::from_elem(x.dim(), v));
                }
                Op::SumCols(a) => {
                    let x = val(*a);
                    let mut d = Array2::zeros(x.dim());
                    for (mut row, gv) in d.rows_mut().into_iter().zip(g.iter()) {
                        row.fill(*gv);
                    }
                    acc(&mut grads, *a, d);
                }
                Op::Diag(a) => {
                    let n = val(*a).nrows();
                    let mut d = Array2::zeros((n, n));
                    for k in 0..n {
                        d[[k, k]] = g[[0, k]];
                    }
                    acc(&mut grads, *a, d);
                }
                Op::LogSoftmaxRows(a) => {
                    let mut d = g.clone();
                    for (mut drow, yrow) in d.rows_mut().into_iter().zip(node.value.rows()) {
                        let total = drow.sum();
                        Zip::from(&mut drow).and(&yrow).for_each(|d, &y| *d = *d - y.exp() * total);
                    }
                    acc(&mut grads, *a, d);
                }
                Op::GumbelSt { logits, soft, tau } => {
                    let m = soft.ncols();
                    let mut d = Array2::zeros((1, m));
                    for (grow, srow) in g.rows().into_iter().zip(soft.rows()) {
                        let dot: T = grow.iter().zip(srow.iter()).map(|(a, b)| *a * *b).sum();
                        for j in 0..m {
                            d[[0, j]] = d[[0, j]] + srow[j] * (grow[j] - dot) / *tau;
                        }
                    }
                    acc(&mut grads, *logits, d);
                }
                Op::BitLogLik { logits, bits } => {
                    let z = val(*logits);
                    let s = g[[0, 0]];
                    let d = Array2::from_shape_fn(z.dim(), |(k, _)| {
                        let b = T::of(bits[k] as f64);
                        s * (b - sigmoid(z[[k, 0]]))
                    });
                    acc(&mut grads, *logits, d);
                }
                Op::Custom { inputs, op } => {
                    let gs = op.backward(&g)?;
                    if gs.len() != inputs.len() {
                        return Err(Error::Shape(format!(
                            "{}: {} gradients for {} inputs",
                            op.name(),
                            gs.len(),
                            inputs.len()
                        )));
                    }
                    for (v, gi) in inputs.iter().zip(gs) {
                        if gi.dim() != val(*v).dim() {
                            return Err(Error::Shape(format!("{}: gradient shape {:?} for input {:?}", op.name(), gi.dim(), val(*v).dim())));
                        }
                        acc(&mut grads, *v, gi);
                    }
                }
            }
            grads[i] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.value.dim()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn log_softmax_rows<T: Real>(x: &Array2<T>) -> Array2<T> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|v| (*v - max).exp()).sum::<T>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Array2<T>>>,
    shapes: Vec<(usize, usize)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to `v` (zeros if unreachable).
    pub fn get(&self, v: Var) -> Array2<T> {
        self.grads[v.0].clone().unwrap_or_else(|| Array2::zeros(self.shapes[v.0]))
    }

    pub fn take(&mut self, v: Var) -> Array2<T> {
        self.grads[v.0].take().unwrap_or_else(|| Array2::zeros(self.shapes[v.0]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn square_derivative() {
        let t = Tape::<f64>::new();
        let x = t.scalar_leaf(3.0);
        let y = t.mul(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(t.scalar(y), 9.0);
        assert_eq!(g.get(x)[[0, 0]], 6.0);
    }

    #[test]
    fn relu_values() {
        let t = Tape::<f64>::new();
        let x = t.leaf(array![[-1.0, 2.0]]);
        assert_eq!(t.value(t.relu(x)), array![[0.0, 2.0]]);
    }

    #[test]
    fn unreachable_leaf_gets_zero() {
        let t = Tape::<f64>::new();
        let x = t.leaf(array![[1.0, 2.0]]);
        let unused = t.leaf(array![[5.0], [6.0]]);
        let l = t.sum(x);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(unused), array![[0.0], [0.0]]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let t = Tape::<f64>::new();
        let x = t.leaf(array![[1.0, 2.0]]);
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn shape_errors() {
        let t = Tape::<f64>::new();
        let a = t.leaf(Array2::zeros((2, 3)));
        let b = t.leaf(Array2::zeros((2, 3)));
        assert!(t.matmul(a, b).is_err());
        assert!(t.matmul_nt(a, b).is_ok());
        let r = t.leaf(Array2::zeros((1, 2)));
        assert!(t.add_row(a, r).is_err());
        assert!(t.mul_scalar(a, b).is_err());
    }

    #[test]
    fn fan_out_accumulates() {
        // y = x·x + 3x at x = 2 → dy/dx = 2x + 3 = 7
        let t = Tape::<f64>::new();
        let x = t.scalar_leaf(2.0);
        let sq = t.mul(x, x).unwrap();
        let lin = t.scale(x, 3.0);
        let y = t.add(sq, lin).unwrap();
        assert_eq!(t.backward(y).unwrap().get(x)[[0, 0]], 7.0);
    }

    #[test]
    fn log_sigmoid_is_stable() {
        assert!((log_sigmoid(-800.0f64) + 800.0).abs() < 1e-9);
        assert!(log_sigmoid(800.0f64).abs() < 1e-300);
        assert!((log_sigmoid(0.0f64) - 0.5f64.ln()).abs() < 1e-15);
    }
}
