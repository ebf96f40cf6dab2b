//! Reverse-mode automatic differentiation on a flat tape of `Array2<f64>` values.
//!
//! Every training-time kernel builds its forward pass through [`Tape`] methods,
//! so the analytic gradients checked against finite differences are the same
//! gradients the optimizer consumes. The tape is rebuilt per step; values are
//! desk-scale matrices, so cloning into closures is cheap.

use ndarray::{Array2, Axis};

use crate::error::{CoreError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type BackFn = Box<dyn Fn(&Tape, &Array2<f64>, &mut [Option<Array2<f64>>])>;

struct Node {
    value: Array2<f64>,
    back: Option<BackFn>,
}

/// Gradients of a scalar root with respect to every tape node.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` if the root does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v` with zeros substituted when the root does not depend on it.
    pub fn get_or_zeros(&self, v: Var, rows: usize, cols: usize) -> Array2<f64> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Array2::zeros((rows, cols)),
        }
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], idx: usize, delta: &Array2<f64>) {
    match &mut grads[idx] {
        Some(g) => *g += delta,
        slot @ None => *slot = Some(delta.clone()),
    }
}

pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Array2<f64>, back: Option<BackFn>) -> Var {
        self.nodes.push(Node { value, back });
        Var(self.nodes.len() - 1)
    }

    /// Value of a node.
    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Leaf node: an input constant or a trainable parameter.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, None)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let value = self.value(a) + self.value(b);
        self.push(
            value,
            Some(Box::new(move |_t, g, grads| {
                accumulate(grads, a.0, g);
                accumulate(grads, b.0, g);
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let value = self.value(a) - self.value(b);
        self.push(
            value,
            Some(Box::new(move |_t, g, grads| {
                accumulate(grads, a.0, g);
                accumulate(grads, b.0, &(-g));
            })),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        self.push(
            value,
            Some(Box::new(move |_t, g, grads| {
                accumulate(grads, a.0, &(g * c));
            })),
        )
    }

    /// Broadcast-add a `1 x d` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (_, d) = self.shape(a);
        assert_eq!(self.shape(row), (1, d), "add_row: row must be 1 x d");
        let value = self.value(a) + self.value(row);
        self.push(
            value,
            Some(Box::new(move |_t, g, grads| {
                accumulate(grads, a.0, g);
                let colsum = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                accumulate(grads, row.0, &colsum);
            })),
        )
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let value = self.value(a) * self.value(b);
        self.push(
            value,
            Some(Box::new(move |t, g, grads| {
                accumulate(grads, a.0, &(g * t.value(b)));
                accumulate(grads, b.0, &(g * t.value(a)));
            })),
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (_, ka) = self.shape(a);
        let (kb, _) = self.shape(b);
        assert_eq!(ka, kb, "matmul: inner dimension mismatch");
        let value = self.value(a).dot(self.value(b));
        self.push(
            value,
            Some(Box::new(move |t, g, grads| {
                accumulate(grads, a.0, &g.dot(&t.value(b).t()));
                accumulate(grads, b.0, &t.value(a).t().dot(g));
            })),
        )
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        self.push(
            value,
            Some(Box::new(move |_t, g, grads| {
                accumulate(grads, a.0, &g.t().to_owned());
            })),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let cached = value.clone();
        self.push(
            value,
            Some(Box::new(move |_t, g, grads| {
                let d = &cached * &(1.0 - &cached) * g;
                accumulate(grads, a.0, &d);
            })),
        )
    }

    /// Tanh-form GELU (smooth, so finite-difference checks stay clean).
    pub fn gelu(&mut self, a: Var) -> Var {
        const K: f64 = 0.7978845608028654; // sqrt(2/pi)
        let x = self.value(a).clone();
        let value = x.mapv(|v| 0.5 * v * (1.0 + (K * (v + 0.044715 * v * v * v)).tanh()));
        self.push(
            value,
            Some(Box::new(move |_t, g, grads| {
                let d = x.mapv(|v| {
                    let u = K * (v + 0.044715 * v * v * v);
                    let th = u.tanh();
                    let du = K * (1.0 + 3.0 * 0.044715 * v * v);
                    0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du
                }) * g;
                accumulate(grads, a.0, &d);
            })),
        )
    }

    /// Row-wise softmax over all columns.
    pub fn row_softmax(&mut self, a: Var) -> Var {
        let value = row_softmax_value(self.value(a));
        let y = value.clone();
        self.push(
            value,
            Some(Box::new(move |_t, g, grads| {
                accumulate(grads, a.0, &softmax_backward(&y, g));
            })),
        )
    }

    /// Row-wise softmax restricted to `allowed` entries; disallowed entries output 0.
    ///
    /// Panics if any row has no allowed entry.
    pub fn masked_row_softmax(&mut self, a: Var, allowed: &Array2<bool>) -> Var {
        let x = self.value(a);
        assert_eq!(x.dim(), allowed.dim(), "masked_row_softmax: mask shape");
        let (n, m) = x.dim();
        let mut value = Array2::zeros((n, m));
        for i in 0..n {
            let mut max = f64::NEG_INFINITY;
            for j in 0..m {
                if allowed[(i, j)] {
                    max = max.max(x[(i, j)]);
                }
            }
            assert!(max.is_finite(), "masked_row_softmax: empty row {i}");
            let mut z = 0.0;
            for j in 0..m {
                if allowed[(i, j)] {
                    let e = (x[(i, j)] - max).exp();
                    value[(i, j)] = e;
                    z += e;
                }
            }
            for j in 0..m {
                value[(i, j)] /= z;
            }
        }
        // Disallowed entries have y = 0, so the dense softmax backward already
        // routes zero gradient to them.
        let y = value.clone();
        self.push(
            value,
            Some(Box::new(move |_t, g, grads| {
                accumulate(grads, a.0, &softmax_backward(&y, g));
            })),
        )
    }

    /// Row-wise layer normalization with learned `gamma`/`beta` (`1 x d` each).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (n, d) = self.shape(x);
        assert_eq!(self.shape(gamma), (1, d), "layer_norm: gamma shape");
        assert_eq!(self.shape(beta), (1, d), "layer_norm: beta shape");
        let xv = self.value(x).clone();
        let gv = self.value(gamma).clone();
        let bv = self.value(beta);

        let mut xhat = Array2::zeros((n, d));
        let mut inv_std = vec![0.0; n];
        for i in 0..n {
            let row = xv.row(i);
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[i] = istd;
            for j in 0..d {
                xhat[(i, j)] = (xv[(i, j)] - mean) * istd;
            }
        }
        let mut value = Array2::zeros((n, d));
        for i in 0..n {
            for j in 0..d {
                value[(i, j)] = gv[(0, j)] * xhat[(i, j)] + bv[(0, j)];
            }
        }
        self.push(
            value,
            Some(Box::new(move |_t, g, grads| {
                let dbeta = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                let dgamma = (g * &xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                let mut dx = Array2::zeros((n, d));
                for i in 0..n {
                    let mut sum_dxh = 0.0;
                    let mut sum_dxh_xh = 0.0;
                    for j in 0..d {
                        let dxh = g[(i, j)] * gv[(0, j)];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xhat[(i, j)];
                    }
                    let m = d as f64;
                    for j in 0..d {
                        let dxh = g[(i, j)] * gv[(0, j)];
                        dx[(i, j)] = inv_std[i]
                            * (dxh - sum_dxh / m - xhat[(i, j)] * sum_dxh_xh / m);
                    }
                }
                accumulate(grads, x.0, &dx);
                accumulate(grads, gamma.0, &dgamma);
                accumulate(grads, beta.0, &dbeta);
            })),
        )
    }

    /// Mean over rows, producing a `1 x d` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (n, _) = self.shape(a);
        let value = self
            .value(a)
            .mean_axis(Axis(0))
            .expect("mean_rows: empty input")
            .insert_axis(Axis(0));
        self.push(
            value,
            Some(Box::new(move |t, g, grads| {
                let (rows, cols) = t.shape(a);
                let mut d = Array2::zeros((rows, cols));
                for i in 0..rows {
                    for j in 0..cols {
                        d[(i, j)] = g[(0, j)] / n as f64;
                    }
                }
                accumulate(grads, a.0, &d);
            })),
        )
    }

    /// Sum of all entries, producing a `1 x 1` scalar.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(
            Array2::from_elem((1, 1), s),
            Some(Box::new(move |t, g, grads| {
                let (rows, cols) = t.shape(a);
                let d = Array2::from_elem((rows, cols), g[(0, 0)]);
                accumulate(grads, a.0, &d);
            })),
        )
    }

    pub fn slice_cols(&mut self, a: Var, from: usize, to: usize) -> Var {
        let value = self
            .value(a)
            .slice(ndarray::s![.., from..to])
            .to_owned();
        self.push(
            value,
            Some(Box::new(move |t, g, grads| {
                let (rows, cols) = t.shape(a);
                let mut d = Array2::zeros((rows, cols));
                d.slice_mut(ndarray::s![.., from..to]).assign(g);
                accumulate(grads, a.0, &d);
            })),
        )
    }

    pub fn slice_rows(&mut self, a: Var, from: usize, to: usize) -> Var {
        let value = self
            .value(a)
            .slice(ndarray::s![from..to, ..])
            .to_owned();
        self.push(
            value,
            Some(Box::new(move |t, g, grads| {
                let (rows, cols) = t.shape(a);
                let mut d = Array2::zeros((rows, cols));
                d.slice_mut(ndarray::s![from..to, ..]).assign(g);
                accumulate(grads, a.0, &d);
            })),
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.shape(parts[0]).0;
        let total: usize = parts.iter().map(|p| self.shape(*p).1).sum();
        let mut value = Array2::zeros((rows, total));
        let mut offset = 0;
        let mut spans = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.shape(p);
            assert_eq!(r, rows, "concat_cols: row mismatch");
            value
                .slice_mut(ndarray::s![.., offset..offset + c])
                .assign(self.value(p));
            spans.push((p, offset, c));
            offset += c;
        }
        self.push(
            value,
            Some(Box::new(move |_t, g, grads| {
                for &(p, off, c) in &spans {
                    let gp = g.slice(ndarray::s![.., off..off + c]).to_owned();
                    accumulate(grads, p.0, &gp);
                }
            })),
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.shape(parts[0]).1;
        let total: usize = parts.iter().map(|p| self.shape(*p).0).sum();
        let mut value = Array2::zeros((total, cols));
        let mut offset = 0;
        let mut spans = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.shape(p);
            assert_eq!(c, cols, "concat_rows: column mismatch");
            value
                .slice_mut(ndarray::s![offset..offset + r, ..])
                .assign(self.value(p));
            spans.push((p, offset, r));
            offset += r;
        }
        self.push(
            value,
            Some(Box::new(move |_t, g, grads| {
                for &(p, off, r) in &spans {
                    let gp = g.slice(ndarray::s![off..off + r, ..]).to_owned();
                    accumulate(grads, p.0, &gp);
                }
            })),
        )
    }

    /// Row lookup (embedding gather); gradient scatter-adds into the table.
    pub fn gather_rows(&mut self, table: Var, ids: Vec<usize>) -> Var {
        let (v, d) = self.shape(table);
        for &id in &ids {
            assert!(id < v, "gather_rows: id {id} out of range {v}");
        }
        let mut value = Array2::zeros((ids.len(), d));
        for (i, &id) in ids.iter().enumerate() {
            value.row_mut(i).assign(&self.value(table).row(id));
        }
        self.push(
            value,
            Some(Box::new(move |t, g, grads| {
                let (rows, cols) = t.shape(table);
                let mut d = Array2::zeros((rows, cols));
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..cols {
                        d[(id, j)] += g[(i, j)];
                    }
                }
                accumulate(grads, table.0, &d);
            })),
        )
    }

    /// Sum over rows of `-log softmax(logits)[target]`; the usual
    /// cross-entropy with integer targets, summed (not averaged).
    pub fn softmax_ce_sum(&mut self, logits: Var, targets: Vec<usize>) -> Var {
        let (n, v) = self.shape(logits);
        assert_eq!(n, targets.len(), "softmax_ce_sum: target count");
        for &t in &targets {
            assert!(t < v, "softmax_ce_sum: target {t} out of range {v}");
        }
        let probs = row_softmax_value(self.value(logits));
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            loss -= probs[(i, t)].ln();
        }
        self.push(
            Array2::from_elem((1, 1), loss),
            Some(Box::new(move |_t, g, grads| {
                let s = g[(0, 0)];
                let mut d = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    d[(i, t)] -= 1.0;
                }
                accumulate(grads, logits.0, &(d * s));
            })),
        )
    }

    /// Sum of absolute deviations from a constant target over masked rows.
    pub fn l1_masked_sum(&mut self, pred: Var, target: Array2<f64>, row_mask: Vec<bool>) -> Var {
        let (n, d) = self.shape(pred);
        assert_eq!(target.dim(), (n, d), "l1_masked_sum: target shape");
        assert_eq!(row_mask.len(), n, "l1_masked_sum: mask length");
        let p = self.value(pred);
        let mut loss = 0.0;
        for i in 0..n {
            if row_mask[i] {
                for j in 0..d {
                    loss += (p[(i, j)] - target[(i, j)]).abs();
                }
            }
        }
        let pv = p.clone();
        self.push(
            Array2::from_elem((1, 1), loss),
            Some(Box::new(move |_t, g, grads| {
                let s = g[(0, 0)];
                let mut dm = Array2::zeros((n, d));
                for i in 0..n {
                    if row_mask[i] {
                        for j in 0..d {
                            dm[(i, j)] = s * (pv[(i, j)] - target[(i, j)]).signum();
                        }
                    }
                }
                accumulate(grads, pred.0, &dm);
            })),
        )
    }

    /// Reverse pass from a `1 x 1` root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let (r, c) = self.shape(root);
        if (r, c) != (1, 1) {
            return Err(CoreError::Shape(format!(
                "backward root must be 1x1, got {r}x{c}"
            )));
        }
        let mut grads: Vec<Option<Array2<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(Array2::from_elem((1, 1), 1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if let Some(back) = &self.nodes[i].back {
                back(self, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

/// Numerically stable row-wise softmax of a plain matrix.
pub fn row_softmax_value(x: &Array2<f64>) -> Array2<f64> {
    let (n, m) = x.dim();
    let mut out = Array2::zeros((n, m));
    for i in 0..n {
        let max = x.row(i).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for j in 0..m {
            let e = (x[(i, j)] - max).exp();
            out[(i, j)] = e;
            z += e;
        }
        for j in 0..m {
            out[(i, j)] /= z;
        }
    }
    out
}

fn softmax_backward(y: &Array2<f64>, g: &Array2<f64>) -> Array2<f64> {
    let (n, m) = y.dim();
    let mut out = Array2::zeros((n, m));
    for i in 0..n {
        let mut dot = 0.0;
        for j in 0..m {
            dot += y[(i, j)] * g[(i, j)];
        }
        for j in 0..m {
            out[(i, j)] = y[(i, j)] * (g[(i, j)] - dot);
        }
    }
    out
}
