//! Gradient tape: records every executed operation with its inputs and
//! output, then replays adjoints from the last recorded node to the first.

use super::ops::*;
use super::{shape_err, Scalar, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An operation defined outside this module. `backward` returns one adjoint
/// per input, in input order.
pub trait CustomOp<T: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Tensor<T>>, TensorError>;
}

enum Op<T: Scalar> {
    Leaf,
    MatMul(Var, Var),
    Conv2d { input: Var, kernel: Var, bias: Var },
    Relu(Var),
    AvgPool(Var),
    Linear { x: Var, w: Var, b: Var },
    Reshape(Var),
    Add(Var, Var),
    Scale(Var, T),
    MeanSquaredDiff(Var, Var),
    MeanAbsDiff(Var, Var),
    Custom(Vec<Var>, Box<dyn CustomOp<T>>),
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Record an input (parameter or constant).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var, TensorError> {
        let out = conv2d(self.value(input), self.value(kernel), self.value(bias))?;
        Ok(self.push(out, Op::Conv2d { input, kernel, bias }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = relu(self.value(x));
        self.push(out, Op::Relu(x))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, TensorError> {
        let out = global_avg_pool(self.value(x))?;
        Ok(self.push(out, Op::AvgPool(x)))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let out = linear(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(out, Op::Linear { x, w, b }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err("add", format!("{:?} vs {:?}", x.shape(), y.shape())));
        }
        let mut out = x.clone();
        out.add_assign(y);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s))
    }

    pub fn mean_squared_diff(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = mean_squared_diff(self.value(a), self.value(b))?;
        Ok(self.push(Tensor::scalar(v), Op::MeanSquaredDiff(a, b)))
    }

    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = mean_abs_diff(self.value(a), self.value(b))?;
        Ok(self.push(Tensor::scalar(v), Op::MeanAbsDiff(a, b)))
    }

    /// Record an externally computed `output` of `op` applied to `inputs`.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Var {
        self.push(output, Op::Custom(inputs.to_vec(), op))
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NotScalar("backward"));
        }
        self.backward_from(vec![(loss, Tensor::new(self.value(loss).shape().to_vec(), vec![T::one()])?)])
    }

    /// Reverse pass seeded with explicit upstream gradients on any number of
    /// recorded values.
    pub fn backward_from(&self, seeds: Vec<(Var, Tensor<T>)>) -> Result<Gradients<T>, TensorError> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut last = 0;
        for (v, g) in seeds {
            if g.shape() != self.value(v).shape() {
                return Err(shape_err("backward", format!("seed shape {:?}", g.shape())));
            }
            accumulate(&mut grads[v.0], g);
            last = last.max(v.0 + 1);
        }

        let mut visited = Vec::new();
        for i in (0..last).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            visited.push(i);
            let val = |v: Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let (da, db) = matmul_backward(val(*a), val(*b), &g)?;
                    accumulate(&mut grads[a.0], da);
                    accumulate(&mut grads[b.0], db);
                }
                Op::Conv2d { input, kernel, bias } => {
                    let (dx, dk, db) = conv2d_backward(val(*input), val(*kernel), val(*bias), &g)?;
                    accumulate(&mut grads[input.0], dx);
                    accumulate(&mut grads[kernel.0], dk);
                    accumulate(&mut grads[bias.0], db);
                }
                Op::Relu(x) => {
                    let dx = relu_backward(val(*x), &g)?;
                    accumulate(&mut grads[x.0], dx);
                }
                Op::AvgPool(x) => {
                    let dx = global_avg_pool_backward(val(*x).shape(), &g)?;
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Linear { x, w, b } => {
                    let (dx, dw, db) = linear_backward(val(*x), val(*w), &g)?;
                    accumulate(&mut grads[x.0], dx);
                    accumulate(&mut grads[w.0], dw);
                    accumulate(&mut grads[b.0], db);
                }
                Op::Reshape(x) => {
                    let dx = g.reshape(val(*x).shape().to_vec())?;
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g);
                }
                Op::Scale(x, s) => {
                    let s = *s;
                    accumulate(&mut grads[x.0], g.map(|v| v * s));
                }
                Op::MeanSquaredDiff(a, b) => {
                    let da = mean_squared_diff_backward(val(*a), val(*b), g.data()[0])?;
                    accumulate(&mut grads[b.0], da.map(|v| -v));
                    accumulate(&mut grads[a.0], da);
                }
                Op::MeanAbsDiff(a, b) => {
                    let da = mean_abs_diff_backward(val(*a), val(*b), g.data()[0])?;
                    accumulate(&mut grads[b.0], da.map(|v| -v));
                    accumulate(&mut grads[a.0], da);
                }
                Op::Custom(inputs, op) => {
                    let ins: Vec<&Tensor<T>> = inputs.iter().map(|v| val(*v)).collect();
                    let outs = op.backward(&ins, &node.value, &g)?;
                    if outs.len() != inputs.len() {
                        return Err(shape_err(op.name(), "wrong number of adjoints"));
                    }
                    for (v, d) in inputs.iter().zip(outs) {
                        if d.shape() != val(*v).shape() {
                            return Err(shape_err(op.name(), format!("adjoint shape {:?}", d.shape())));
                        }
                        accumulate(&mut grads[v.0], d);
                    }
                }
            }
        }
        Ok(Gradients { grads, visited })
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

/// Result of a reverse pass: adjoints of every leaf that the seeds reach.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
    visited: Vec<usize>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Adjoint of `v`, or zeros shaped like `like` when nothing reached it.
    pub fn take_or_zeros(&mut self, v: Var, like: &Tensor<T>) -> Tensor<T> {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(like.shape().to_vec()))
    }

    /// Indices of the non-leaf nodes processed, in processing order.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central finite differences of `f` at every coordinate of `x`.
    fn numeric_grad(x: &Tensor<f64>, f: impl Fn(&Tensor<f64>) -> f64, h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut xp = x.clone();
                xp.data_mut()[i] += h;
                let mut xm = x.clone();
                xm.data_mut()[i] -= h;
                (f(&xp) - f(&xm)) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close(analytic: &[f64], numeric: &[f64], tol: f64) {
        for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
            assert!(rel < tol, "coord {i}: analytic {a} numeric {n} rel {rel}");
        }
    }

    /// Weighted sum reduces any output to a scalar with a generic upstream.
    fn weighted(t: &Tensor<f64>, w: &Tensor<f64>) -> f64 {
        t.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn matmul_adjoints_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[4, 2]);
        let w = rand_tensor(&mut rng, &[3, 2]);
        let (da, db) = matmul_backward(&a, &b, &w).unwrap();
        let na = numeric_grad(&a, |a| weighted(&matmul(a, &b).unwrap(), &w), 1e-4);
        let nb = numeric_grad(&b, |b| weighted(&matmul(&a, b).unwrap(), &w), 1e-4);
        assert_close(da.data(), &na, 1e-6);
        assert_close(db.data(), &nb, 1e-6);
    }

    #[test]
    fn conv_adjoints_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, &[3, 8, 8]);
        let k = rand_tensor(&mut rng, &[4, 3, 3, 3]);
        let b = rand_tensor(&mut rng, &[4]);
        let w = rand_tensor(&mut rng, &[4, 4, 4]);
        let (dx, dk, db) = conv2d_backward(&x, &k, &b, &w).unwrap();
        let f = |x: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>| weighted(&conv2d(x, k, b).unwrap(), &w);
        assert_close(dx.data(), &numeric_grad(&x, |x| f(x, &k, &b), 1e-4), 1e-3);
        assert_close(dk.data(), &numeric_grad(&k, |k| f(&x, k, &b), 1e-4), 1e-3);
        assert_close(db.data(), &numeric_grad(&b, |b| f(&x, &k, b), 1e-4), 1e-3);
    }

    #[test]
    fn conv_adjoints_on_odd_extent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[2, 5, 7]);
        let k = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let b = rand_tensor(&mut rng, &[3]);
        let w = rand_tensor(&mut rng, &[3, 3, 4]);
        let (dx, dk, _) = conv2d_backward(&x, &k, &b, &w).unwrap();
        assert_close(dx.data(), &numeric_grad(&x, |x| weighted(&conv2d(x, &k, &b).unwrap(), &w), 1e-4), 1e-3);
        assert_close(dk.data(), &numeric_grad(&k, |k| weighted(&conv2d(&x, k, &b).unwrap(), &w), 1e-4), 1e-3);
    }

    #[test]
    fn pool_linear_relu_adjoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, &[3, 4, 5]);
        let w = rand_tensor(&mut rng, &[3]);
        let dx = global_avg_pool_backward(x.shape(), &w).unwrap();
        assert_close(dx.data(), &numeric_grad(&x, |x| weighted(&global_avg_pool(x).unwrap(), &w), 1e-4), 1e-3);

        let v = rand_tensor(&mut rng, &[5]);
        let wm = rand_tensor(&mut rng, &[5, 3]);
        let bm = rand_tensor(&mut rng, &[3]);
        let up = rand_tensor(&mut rng, &[3]);
        let (dv, dw, db) = linear_backward(&v, &wm, &up).unwrap();
        let f = |v: &Tensor<f64>, wm: &Tensor<f64>, bm: &Tensor<f64>| weighted(&linear(v, wm, bm).unwrap(), &up);
        assert_close(dv.data(), &numeric_grad(&v, |v| f(v, &wm, &bm), 1e-4), 1e-3);
        assert_close(dw.data(), &numeric_grad(&wm, |wm| f(&v, wm, &bm), 1e-4), 1e-3);
        assert_close(db.data(), &numeric_grad(&bm, |bm| f(&v, &wm, bm), 1e-4), 1e-3);

        // keep away from the kink
        let r = rand_tensor(&mut rng, &[12]).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
        let up = rand_tensor(&mut rng, &[12]);
        let dr = relu_backward(&r, &up).unwrap();
        assert_close(dr.data(), &numeric_grad(&r, |r| weighted(&relu(r), &up), 1e-4), 1e-3);
    }

    #[test]
    fn loss_adjoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = rand_tensor(&mut rng, &[2, 6]);
        let b = rand_tensor(&mut rng, &[2, 6]);
        let da = mean_squared_diff_backward(&a, &b, 1.0).unwrap();
        assert_close(da.data(), &numeric_grad(&a, |a| mean_squared_diff(a, &b).unwrap(), 1e-4), 1e-3);
        let da = mean_abs_diff_backward(&a, &b, 1.0).unwrap();
        assert_close(da.data(), &numeric_grad(&a, |a| mean_abs_diff(a, &b).unwrap(), 1e-4), 1e-3);
    }

    fn small_graph(tape: &mut Tape<f64>, x: Var, w: Var, b: Var) -> (Var, Var) {
        let h = tape.matmul(x, w).unwrap();
        let h = tape.relu(h);
        let flat = tape.reshape(h, &[6]).unwrap();
        let bias = tape_bias(tape);
        let y = tape.linear(flat, b, bias).unwrap();
        let zero = tape.leaf(Tensor::zeros([2]));
        let l1 = tape.mean_squared_diff(y, zero).unwrap();
        let l2 = tape.mean_abs_diff(y, zero).unwrap();
        (l1, l2)
    }

    fn tape_bias(tape: &mut Tape<f64>) -> Var {
        tape.leaf(Tensor::new([2], vec![0.3, -0.2]).unwrap())
    }

    #[test]
    fn backward_of_sum_is_sum_of_backwards() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let xv = rand_tensor(&mut rng, &[2, 4]);
        let wv = rand_tensor(&mut rng, &[4, 3]);
        let bv = rand_tensor(&mut rng, &[6, 2]);

        let mut tape = Tape::new();
        let (x, w, b) = (tape.leaf(xv.clone()), tape.leaf(wv.clone()), tape.leaf(bv.clone()));
        let (l1, l2) = small_graph(&mut tape, x, w, b);
        let total = tape.add(l1, l2).unwrap();
        let g_total = tape.backward(total).unwrap();
        let g1 = tape.backward(l1).unwrap();
        let g2 = tape.backward(l2).unwrap();
        for v in [x, w, b] {
            let sum: Vec<f64> = g1.get(v).unwrap().data().iter().zip(g2.get(v).unwrap().data()).map(|(a, b)| a + b).collect();
            for (a, s) in g_total.get(v).unwrap().data().iter().zip(&sum) {
                assert!((a - s).abs() <= 1e-12 * s.abs().max(1.0));
            }
        }
    }

    #[test]
    fn backward_visits_each_node_once_in_reverse() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new([2, 2], vec![0.5, -1.0, 0.25, 2.0]).unwrap());
        let w = tape.leaf(Tensor::new([2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.25]).unwrap());
        let b = tape.leaf(Tensor::new([6, 2], vec![0.1; 12]).unwrap());
        let (l1, l2) = small_graph(&mut tape, x, w, b);
        let total = tape.add(l1, l2).unwrap();
        let g = tape.backward(total).unwrap();
        let order = g.visit_order();
        let mut sorted = order.to_vec();
        sorted.sort_unstable_by(|a, b| b.cmp(a));
        sorted.dedup();
        assert_eq!(order, sorted.as_slice());
        assert_eq!(order[0], total.index());
    }

    #[test]
    fn replay_is_bitwise_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let mut tape = Tape::new();
            let x = tape.leaf(rand_tensor(&mut rng, &[2, 4]));
            let w = tape.leaf(rand_tensor(&mut rng, &[4, 3]));
            let b = tape.leaf(rand_tensor(&mut rng, &[6, 2]));
            let (l1, _) = small_graph(&mut tape, x, w, b);
            let g = tape.backward(l1).unwrap();
            (tape.value(l1).clone(), g.get(w).unwrap().clone())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros([2]));
        assert!(matches!(tape.backward(x), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn scale_and_add_adjoints() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::new([2], vec![1.0, 2.0]).unwrap());
        let b = tape.leaf(Tensor::new([2], vec![3.0, -1.0]).unwrap());
        let s = tape.scale(a, 10.0);
        let sum = tape.add(s, b).unwrap();
        let zero = tape.leaf(Tensor::zeros([2]));
        let l = tape.mean_squared_diff(sum, zero).unwrap();
        let g = tape.backward(l).unwrap();
        // d/da mean((10a+b)^2) = 2*(10a+b)*10/2
        assert_eq!(g.get(a).unwrap().data(), &[130.0, 190.0]);
        assert_eq!(g.get(b).unwrap().data(), &[13.0, 19.0]);
    }
}
