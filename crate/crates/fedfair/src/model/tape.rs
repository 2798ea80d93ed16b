//! Minimal reverse-mode autodiff over dense matrices.
//!
//! The only consumer is the unrolled trajectory-matching gradient, which
//! needs second-order terms: each inner SGD step writes the analytic loss
//! gradient as a composition of these primitives, so differentiating the
//! whole unroll picks up the derivative of the per-step gradients as well.

use ndarray::{Array2, Axis};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Input,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    MatMul(NodeId, NodeId),
    /// `a (n x c)` plus a `1 x c` row broadcast over rows.
    AddRow(NodeId, NodeId),
    Transpose(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    /// Heaviside step of the argument. Derivative 0 almost everywhere, so
    /// backward propagates nothing; used for relu' inside gradient formulas.
    /// The input id is not stored because backward never visits it.
    StepMask,
    /// Column sums, result `1 x c`.
    SumRows(NodeId),
    /// Sum of squared entries, result `1 x 1`.
    SumSq(NodeId),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

pub(crate) struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    pub fn input(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Input)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(super::sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn step_mask(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
        self.push(v, Op::StepMask)
    }

    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push(v, Op::SumRows(a))
    }

    pub fn sum_sq(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).iter().map(|x| x * x).sum();
        self.push(Array2::from_elem((1, 1), s), Op::SumSq(a))
    }

    /// Reverse pass from a scalar (`1 x 1`) node. Returns the adjoint of
    /// every node; entries are `None` where no gradient flows.
    pub fn backward(&self, root: NodeId) -> Vec<Option<Array2<f64>>> {
        assert_eq!(self.value(root).dim(), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Array2::from_elem((1, 1), 1.0));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Input => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, g.clone());
                    self.accumulate(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut grads, *a, g.clone());
                    self.accumulate(&mut grads, *b, -&g);
                }
                Op::Mul(a, b) => {
                    self.accumulate(&mut grads, *a, &g * self.value(*b));
                    self.accumulate(&mut grads, *b, &g * self.value(*a));
                }
                Op::Scale(a, c) => {
                    self.accumulate(&mut grads, *a, &g * *c);
                }
                Op::MatMul(a, b) => {
                    self.accumulate(&mut grads, *a, g.dot(&self.value(*b).t()));
                    self.accumulate(&mut grads, *b, self.value(*a).t().dot(&g));
                }
                Op::AddRow(a, row) => {
                    self.accumulate(&mut grads, *a, g.clone());
                    let row_grad = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(&mut grads, *row, row_grad);
                }
                Op::Transpose(a) => {
                    self.accumulate(&mut grads, *a, g.t().to_owned());
                }
                Op::Sigmoid(a) => {
                    let s = &self.nodes[idx].value;
                    self.accumulate(&mut grads, *a, &g * &(s * &(1.0 - s)));
                }
                Op::Relu(a) => {
                    let mask = self.value(*a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    self.accumulate(&mut grads, *a, &g * &mask);
                }
                Op::StepMask => {}
                Op::SumRows(a) => {
                    let broadcast =
                        Array2::from_shape_fn(self.value(*a).dim(), |(_, j)| g[[0, j]]);
                    self.accumulate(&mut grads, *a, broadcast);
                }
                Op::SumSq(a) => {
                    self.accumulate(&mut grads, *a, self.value(*a) * (2.0 * g[[0, 0]]));
                }
            }
            // interior node: keep the adjoint only if someone still needs it;
            // storing it back is harmless and simplifies inspection in tests
            grads[idx] = Some(g);
        }
        grads
    }

    fn accumulate(&self, grads: &mut [Option<Array2<f64>>], id: NodeId, g: Array2<f64>) {
        match &mut grads[id.0] {
            Some(acc) => *acc += &g,
            // force standard layout so consumers can rely on `as_slice`
            slot @ None => *slot = Some(g.as_standard_layout().into_owned()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{finite_difference_grad, max_grad_error};
    use ndarray::array;

    #[test]
    fn matmul_chain_matches_finite_differences() {
        let a0 = array![[0.5, -1.0], [2.0, 0.3]];
        let b0 = array![[1.5], [-0.7]];
        let eval = |av: &[f64], bv: &[f64]| {
            let mut t = Tape::new();
            let a = t.input(Array2::from_shape_vec((2, 2), av.to_vec()).unwrap());
            let b = t.input(Array2::from_shape_vec((2, 1), bv.to_vec()).unwrap());
            let c = t.matmul(a, b);
            let s = t.sigmoid(c);
            let out = t.sum_sq(s);
            (t, a, b, out)
        };

        let (t, a, b, out) = eval(a0.as_slice().unwrap(), b0.as_slice().unwrap());
        let grads = t.backward(out);
        let ga = grads[0].clone().unwrap();
        let gb = grads[1].clone().unwrap();
        let _ = (a, b);

        let fd_a = finite_difference_grad(
            |av| {
                let (t, _, _, out) = eval(av, b0.as_slice().unwrap());
                t.value(out)[[0, 0]]
            },
            a0.as_slice().unwrap(),
            1e-6,
        );
        let fd_b = finite_difference_grad(
            |bv| {
                let (t, _, _, out) = eval(a0.as_slice().unwrap(), bv);
                t.value(out)[[0, 0]]
            },
            b0.as_slice().unwrap(),
            1e-6,
        );
        assert!(max_grad_error(ga.as_slice().unwrap(), &fd_a) < 1e-6);
        assert!(max_grad_error(gb.as_slice().unwrap(), &fd_b) < 1e-6);
    }

    #[test]
    fn add_row_and_sum_rows_are_adjoint() {
        let mut t = Tape::new();
        let a = t.input(array![[1.0, 2.0], [3.0, 4.0]]);
        let row = t.input(array![[0.5, -0.5]]);
        let shifted = t.add_row(a, row);
        let col = t.sum_rows(shifted);
        let out = t.sum_sq(col);
        let grads = t.backward(out);
        // col_j = sum_i (a_ij + row_j), so d(sum_j col_j^2)/drow_j =
        // 2 * col_j * nrows with nrows = 2
        let colsum = [1.0 + 3.0 + 2.0 * 0.5, 2.0 + 4.0 - 2.0 * 0.5];
        let grow = grads[1].clone().unwrap();
        assert_eq!(grow[[0, 0]], 2.0 * colsum[0] * 2.0);
        assert_eq!(grow[[0, 1]], 2.0 * colsum[1] * 2.0);
    }

    #[test]
    fn step_mask_blocks_gradient() {
        let mut t = Tape::new();
        let a = t.input(array![[1.0, -2.0]]);
        let m = t.step_mask(a);
        let out = t.sum_sq(m);
        let grads = t.backward(out);
        assert!(grads[0].is_none());
    }
}
