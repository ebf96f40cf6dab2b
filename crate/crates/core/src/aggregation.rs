//! Meta-learning multi-modal feature aggregation: a weight-shared multi-head
//! self-attention projection, vision+language prototype fusion, softmax
//! feature-matching coefficients, sigmoid foreground filtering, and the
//! class-agnostic task encoding. The module output is the element-wise sum of
//! the filtered and task-encoded query maps.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{CoreError, Result};
use crate::init::xavier_uniform;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Fused multi-modal support prototypes, `(C+1) x d`, background last.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    matrix: Array2<f64>,
}

impl PrototypeSet {
    pub fn new(matrix: Array2<f64>) -> Result<Self> {
        if matrix.nrows() < 2 {
            return Err(CoreError::Shape(
                "prototype set needs at least one category plus background".into(),
            ));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Validation("non-finite prototype value".into()));
        }
        Ok(PrototypeSet { matrix })
    }

    /// Number of real categories C (background excluded).
    pub fn num_categories(&self) -> usize {
        self.matrix.nrows() - 1
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }
}

/// Trainable class-agnostic prototypes, sinusoidally initialized.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskPrototypes {
    pub matrix: Array2<f64>,
}

impl TaskPrototypes {
    /// First `rows` rows, the slice matching an episode's C+1 slots.
    pub fn slice(&self, rows: usize) -> Result<Array2<f64>> {
        if rows > self.matrix.nrows() {
            return Err(CoreError::Shape(format!(
                "requested {rows} task prototype rows, have {}",
                self.matrix.nrows()
            )));
        }
        Ok(self.matrix.slice(ndarray::s![..rows, ..]).to_owned())
    }
}

/// Feature-mapping coefficients: `(H*W) x (C+1)`, rows on the simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionCoefficients {
    matrix: Array2<f64>,
}

impl AttentionCoefficients {
    pub fn new(matrix: Array2<f64>) -> Result<Self> {
        for row in matrix.rows() {
            let sum: f64 = row.sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(CoreError::Validation(format!(
                    "attention row sums to {sum}, expected 1"
                )));
            }
            if row.iter().any(|&v| v <= 0.0 || v >= 1.0) {
                // softmax output is strictly inside (0, 1)
                return Err(CoreError::Validation(
                    "attention entry outside (0,1)".into(),
                ));
            }
        }
        Ok(AttentionCoefficients { matrix })
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }
}

/// One multi-head self-attention layer (post-norm, residual), applied with the
/// same weights to query maps, support instance features, and token embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedAttentionLayer {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub ln_gamma: Array2<f64>,
    pub ln_beta: Array2<f64>,
    pub heads: usize,
}

impl SharedAttentionLayer {
    pub fn init(d: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(CoreError::Precondition(format!(
                "heads ({heads}) must divide d ({d})"
            )));
        }
        Ok(SharedAttentionLayer {
            wq: xavier_uniform(rng, d, d),
            wk: xavier_uniform(rng, d, d),
            wv: xavier_uniform(rng, d, d),
            wo: xavier_uniform(rng, d, d),
            ln_gamma: Array2::ones((1, d)),
            ln_beta: Array2::zeros((1, d)),
            heads,
        })
    }

    pub fn dim(&self) -> usize {
        self.wq.nrows()
    }
}

/// Tape handles for one attention layer's parameters.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ln_gamma: Var,
    pub ln_beta: Var,
    pub heads: usize,
}

pub fn bind_attention(tape: &mut Tape, layer: &SharedAttentionLayer) -> AttentionVars {
    AttentionVars {
        wq: tape.leaf(layer.wq.clone()),
        wk: tape.leaf(layer.wk.clone()),
        wv: tape.leaf(layer.wv.clone()),
        wo: tape.leaf(layer.wo.clone()),
        ln_gamma: tape.leaf(layer.ln_gamma.clone()),
        ln_beta: tape.leaf(layer.ln_beta.clone()),
        heads: layer.heads,
    }
}

/// Multi-head attention with residual and layer norm:
/// `LN(x_q + MHA(x_q, x_kv, x_kv) W_o)`. Self-attention when `x_q == x_kv`;
/// an optional boolean mask restricts which kv positions each query sees.
pub fn attention_graph(
    tape: &mut Tape,
    x_q: Var,
    x_kv: Var,
    av: &AttentionVars,
    mask: Option<&Array2<bool>>,
) -> Var {
    let (_, d) = tape.shape(x_q);
    let head_dim = d / av.heads;
    let q = tape.matmul(x_q, av.wq);
    let k = tape.matmul(x_kv, av.wk);
    let v = tape.matmul(x_kv, av.wv);
    let mut heads = Vec::with_capacity(av.heads);
    for h in 0..av.heads {
        let (from, to) = (h * head_dim, (h + 1) * head_dim);
        let qh = tape.slice_cols(q, from, to);
        let kh = tape.slice_cols(k, from, to);
        let vh = tape.slice_cols(v, from, to);
        let kt = tape.transpose(kh);
        let scores = tape.matmul(qh, kt);
        let scaled = tape.scale(scores, 1.0 / (head_dim as f64).sqrt());
        let attn = match mask {
            Some(m) => tape.masked_row_softmax(scaled, m),
            None => tape.row_softmax(scaled),
        };
        heads.push(tape.matmul(attn, vh));
    }
    let concat = tape.concat_cols(&heads);
    let proj = tape.matmul(concat, av.wo);
    let residual = tape.add(x_q, proj);
    tape.layer_norm(residual, av.ln_gamma, av.ln_beta, LAYER_NORM_EPS)
}

/// Eq. (1): `A = softmax(Q S^T / sqrt(d))`, softmax over the C+1 prototypes.
pub fn matching_coefficients_graph(tape: &mut Tape, q: Var, s: Var) -> Var {
    let (_, d) = tape.shape(q);
    let st = tape.transpose(s);
    let scores = tape.matmul(q, st);
    let scaled = tape.scale(scores, 1.0 / (d as f64).sqrt());
    tape.row_softmax(scaled)
}

/// Eq. (2): `Q1 = (A sigmoid(S)) ⊙ Q`.
pub fn foreground_filter_graph(tape: &mut Tape, a: Var, s: Var, q: Var) -> Var {
    let gate = tape.sigmoid(s);
    let mixed = tape.matmul(a, gate);
    tape.mul(mixed, q)
}

/// Eq. (3): `Q2 = A T`.
pub fn task_encoding_graph(tape: &mut Tape, a: Var, t_slice: Var) -> Var {
    tape.matmul(a, t_slice)
}

/// Full aggregation: `Q1 + Q2` with `A` from Eq. (1).
pub fn aggregate_graph(tape: &mut Tape, q: Var, s: Var, t_slice: Var) -> Var {
    let a = matching_coefficients_graph(tape, q, s);
    let q1 = foreground_filter_graph(tape, a, s, q);
    let q2 = task_encoding_graph(tape, a, t_slice);
    tape.add(q1, q2)
}

/// Vision+language fusion: real categories average the two modalities, the
/// background row averages with the learned background-text vector.
pub fn fuse_prototypes_graph(
    tape: &mut Tape,
    vision: Var,
    language: Var,
    background_text: Var,
) -> Var {
    let (c_plus_1, _) = tape.shape(vision);
    let c = c_plus_1 - 1;
    let vision_real = tape.slice_rows(vision, 0, c);
    let vision_bg = tape.slice_rows(vision, c, c + 1);
    let fg_sum = tape.add(vision_real, language);
    let fg = tape.scale(fg_sum, 0.5);
    let bg_sum = tape.add(vision_bg, background_text);
    let bg = tape.scale(bg_sum, 0.5);
    tape.concat_rows(&[fg, bg])
}

// ---------------------------------------------------------------------------
// Plain-matrix entry points; each runs the single tape implementation above.

fn check_same_dim(name: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(CoreError::Shape(format!("{name}: dim {a} vs {b}")));
    }
    Ok(())
}

/// Shared self-attention encoding of an `L x d` sequence.
pub fn shared_encode(layer: &SharedAttentionLayer, seq: &Array2<f64>) -> Result<Array2<f64>> {
    check_same_dim("shared_encode", seq.ncols(), layer.dim())?;
    if seq.nrows() == 0 {
        return Err(CoreError::Precondition("empty sequence".into()));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(seq.clone());
    let av = bind_attention(&mut tape, layer);
    let out = attention_graph(&mut tape, x, x, &av, None);
    Ok(tape.value(out).clone())
}

/// Eq. (1) on plain matrices.
pub fn feature_matching_coefficients(
    q: &Array2<f64>,
    s: &PrototypeSet,
) -> Result<AttentionCoefficients> {
    check_same_dim("feature_matching_coefficients", q.ncols(), s.matrix().ncols())?;
    let mut tape = Tape::new();
    let qv = tape.leaf(q.clone());
    let sv = tape.leaf(s.matrix().clone());
    let a = matching_coefficients_graph(&mut tape, qv, sv);
    AttentionCoefficients::new(tape.value(a).clone())
}

/// Eq. (2) on plain matrices.
pub fn foreground_filter(
    a: &AttentionCoefficients,
    s: &PrototypeSet,
    q: &Array2<f64>,
) -> Result<Array2<f64>> {
    check_same_dim("foreground_filter", q.ncols(), s.matrix().ncols())?;
    check_same_dim(
        "foreground_filter coefficients",
        a.matrix().ncols(),
        s.matrix().nrows(),
    )?;
    let mut tape = Tape::new();
    let av = tape.leaf(a.matrix().clone());
    let sv = tape.leaf(s.matrix().clone());
    let qv = tape.leaf(q.clone());
    let out = foreground_filter_graph(&mut tape, av, sv, qv);
    Ok(tape.value(out).clone())
}

/// Eq. (3) on plain matrices. `t_slice` must hold the episode's C+1 rows.
pub fn task_encoding(a: &AttentionCoefficients, t_slice: &Array2<f64>) -> Result<Array2<f64>> {
    check_same_dim("task_encoding", a.matrix().ncols(), t_slice.nrows())?;
    let mut tape = Tape::new();
    let av = tape.leaf(a.matrix().clone());
    let tv = tape.leaf(t_slice.clone());
    let out = task_encoding_graph(&mut tape, av, tv);
    Ok(tape.value(out).clone())
}

/// Q1 + Q2 with A recomputed from (Q, S).
pub fn aggregate(
    q: &Array2<f64>,
    s: &PrototypeSet,
    t_slice: &Array2<f64>,
) -> Result<Array2<f64>> {
    check_same_dim("aggregate", q.ncols(), s.matrix().ncols())?;
    check_same_dim("aggregate task rows", s.matrix().nrows(), t_slice.nrows())?;
    let mut tape = Tape::new();
    let qv = tape.leaf(q.clone());
    let sv = tape.leaf(s.matrix().clone());
    let tv = tape.leaf(t_slice.clone());
    let out = aggregate_graph(&mut tape, qv, sv, tv);
    Ok(tape.value(out).clone())
}

/// Stack-then-mean fusion of per-category vision and language prototypes.
pub fn fuse_prototypes(
    vision: &Array2<f64>,
    language: &Array2<f64>,
    background_text: &Array2<f64>,
) -> Result<PrototypeSet> {
    if vision.nrows() != language.nrows() + 1 {
        return Err(CoreError::Shape(format!(
            "fuse_prototypes: vision has {} rows, language {} (want C+1 vs C)",
            vision.nrows(),
            language.nrows()
        )));
    }
    check_same_dim("fuse_prototypes", vision.ncols(), language.ncols())?;
    check_same_dim("fuse_prototypes bg", vision.ncols(), background_text.ncols())?;
    let mut tape = Tape::new();
    let v = tape.leaf(vision.clone());
    let l = tape.leaf(language.clone());
    let b = tape.leaf(background_text.clone());
    let s = fuse_prototypes_graph(&mut tape, v, l, b);
    PrototypeSet::new(tape.value(s).clone())
}

/// Sinusoidal matrix: `M[k, 2i] = sin(k / 10000^(2i/d))`, `M[k, 2i+1] = cos(...)`.
pub fn sinusoidal_matrix(rows: usize, d: usize) -> Array2<f64> {
    debug_assert!(d % 2 == 0);
    let mut m = Array2::zeros((rows, d));
    for k in 0..rows {
        for i in 0..d / 2 {
            let angle = k as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            m[(k, 2 * i)] = angle.sin();
            m[(k, 2 * i + 1)] = angle.cos();
        }
    }
    m
}

/// Sinusoidally initialized task prototypes; `d` must be even.
pub fn init_task_prototypes(rows: usize, d: usize) -> Result<TaskPrototypes> {
    if d % 2 != 0 {
        return Err(CoreError::Precondition(format!(
            "task prototype dim must be even, got {d}"
        )));
    }
    if rows == 0 || d == 0 {
        return Err(CoreError::Precondition("task prototypes need rows and dim".into()));
    }
    Ok(TaskPrototypes {
        matrix: sinusoidal_matrix(rows, d),
    })
}
