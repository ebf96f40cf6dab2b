//! Rich text semantic rectification (training-time only): fuse support and
//! query features into a composite context, cross-attend refined text tokens
//! against it, predict the token sequence in both directions under teacher
//! forcing, and score the predictions with a bidirectional next-token
//! negative log-likelihood.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::aggregation::{attention_graph, bind_attention, AttentionVars, SharedAttentionLayer};
use crate::aggregation::LAYER_NORM_EPS;
use crate::autodiff::{Tape, Var};
use crate::corpus::TokenSequence;
use crate::error::{CoreError, Result};
use crate::init::{tensor_rng, uniform, xavier_uniform};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
}

/// Composite support+query context `p`, one row per query position.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeFeature {
    pub values: Array2<f64>,
}

/// Next-token logits for one direction: `(M-1) x V`. Forward rows cover
/// target positions 2..M (1-indexed), backward rows cover 1..M-1.
#[derive(Debug, Clone, PartialEq)]
pub struct SequencePrediction {
    pub logits: Array2<f64>,
    pub direction: Direction,
}

/// One transformer block: masked self-attention, cross-attention onto `p`,
/// and a feed-forward sublayer, each with residual + layer norm.
#[derive(Debug, Clone, PartialEq)]
pub struct RectifierLayer {
    pub self_attn: SharedAttentionLayer,
    pub cross_attn: SharedAttentionLayer,
    pub ffn_w1: Array2<f64>,
    pub ffn_b1: Array2<f64>,
    pub ffn_w2: Array2<f64>,
    pub ffn_b2: Array2<f64>,
    pub ffn_ln_gamma: Array2<f64>,
    pub ffn_ln_beta: Array2<f64>,
}

/// The bidirectional sequence predictor `f_theta`.
#[derive(Debug, Clone, PartialEq)]
pub struct RectifierModel {
    pub layers: Vec<RectifierLayer>,
    pub out_w: Array2<f64>,
    pub out_b: Array2<f64>,
    pub dir_forward: Array2<f64>,
    pub dir_backward: Array2<f64>,
}

impl RectifierModel {
    pub fn init(
        d: usize,
        vocab_size: usize,
        n_layers: usize,
        heads: usize,
        ffn_mult: usize,
        master_seed: u64,
        prefix: &str,
    ) -> Result<Self> {
        let f = d * ffn_mult;
        let mut layers = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let name = |part: &str| format!("{prefix}.layer{i}.{part}");
            layers.push(RectifierLayer {
                self_attn: SharedAttentionLayer::init(
                    d,
                    heads,
                    &mut tensor_rng(master_seed, &name("self")),
                )?,
                cross_attn: SharedAttentionLayer::init(
                    d,
                    heads,
                    &mut tensor_rng(master_seed, &name("cross")),
                )?,
                ffn_w1: xavier_uniform(&mut tensor_rng(master_seed, &name("ffn_w1")), d, f),
                ffn_b1: Array2::zeros((1, f)),
                ffn_w2: xavier_uniform(&mut tensor_rng(master_seed, &name("ffn_w2")), f, d),
                ffn_b2: Array2::zeros((1, d)),
                ffn_ln_gamma: Array2::ones((1, d)),
                ffn_ln_beta: Array2::zeros((1, d)),
            });
        }
        Ok(RectifierModel {
            layers,
            out_w: xavier_uniform(
                &mut tensor_rng(master_seed, &format!("{prefix}.out_w")),
                d,
                vocab_size,
            ),
            out_b: Array2::zeros((1, vocab_size)),
            dir_forward: uniform(
                &mut tensor_rng(master_seed, &format!("{prefix}.dir_forward")),
                1,
                d,
                0.1,
            ),
            dir_backward: uniform(
                &mut tensor_rng(master_seed, &format!("{prefix}.dir_backward")),
                1,
                d,
                0.1,
            ),
        })
    }

    pub fn dim(&self) -> usize {
        self.out_w.nrows()
    }

    pub fn vocab_size(&self) -> usize {
        self.out_w.ncols()
    }
}

#[derive(Debug, Clone)]
pub struct RectifierLayerVars {
    pub self_attn: AttentionVars,
    pub cross_attn: AttentionVars,
    pub ffn_w1: Var,
    pub ffn_b1: Var,
    pub ffn_w2: Var,
    pub ffn_b2: Var,
    pub ffn_ln_gamma: Var,
    pub ffn_ln_beta: Var,
}

#[derive(Debug, Clone)]
pub struct RectifierVars {
    pub layers: Vec<RectifierLayerVars>,
    pub out_w: Var,
    pub out_b: Var,
    pub dir_forward: Var,
    pub dir_backward: Var,
}

pub fn bind_rectifier(tape: &mut Tape, model: &RectifierModel) -> RectifierVars {
    RectifierVars {
        layers: model
            .layers
            .iter()
            .map(|l| RectifierLayerVars {
                self_attn: bind_attention(tape, &l.self_attn),
                cross_attn: bind_attention(tape, &l.cross_attn),
                ffn_w1: tape.leaf(l.ffn_w1.clone()),
                ffn_b1: tape.leaf(l.ffn_b1.clone()),
                ffn_w2: tape.leaf(l.ffn_w2.clone()),
                ffn_b2: tape.leaf(l.ffn_b2.clone()),
                ffn_ln_gamma: tape.leaf(l.ffn_ln_gamma.clone()),
                ffn_ln_beta: tape.leaf(l.ffn_ln_beta.clone()),
            })
            .collect(),
        out_w: tape.leaf(model.out_w.clone()),
        out_b: tape.leaf(model.out_b.clone()),
        dir_forward: tape.leaf(model.dir_forward.clone()),
        dir_backward: tape.leaf(model.dir_backward.clone()),
    }
}

/// `p = (Q_enc + S_c) / 2`, the prototype broadcast over query positions.
pub fn composite_feature_graph(tape: &mut Tape, s_c: Var, q_enc: Var) -> Var {
    let sum = tape.add_row(q_enc, s_c);
    tape.scale(sum, 0.5)
}

/// Plain-matrix composite feature; `s_c` is a `1 x d` prototype row.
pub fn composite_feature(s_c: &Array2<f64>, q_enc: &Array2<f64>) -> Result<CompositeFeature> {
    if s_c.dim() != (1, q_enc.ncols()) {
        return Err(CoreError::Shape(format!(
            "composite_feature: prototype {:?} vs query dim {}",
            s_c.dim(),
            q_enc.ncols()
        )));
    }
    let mut tape = Tape::new();
    let sv = tape.leaf(s_c.clone());
    let qv = tape.leaf(q_enc.clone());
    let p = composite_feature_graph(&mut tape, sv, qv);
    Ok(CompositeFeature {
        values: tape.value(p).clone(),
    })
}

/// Causal mask over token positions: forward lets position i see j <= i,
/// backward lets it see j >= i. The prediction for target token j therefore
/// conditions only on positions strictly before (after) j.
fn causal_mask(m: usize, direction: Direction) -> Array2<bool> {
    Array2::from_shape_fn((m, m), |(i, j)| match direction {
        Direction::Forward => j <= i,
        Direction::Backward => j >= i,
    })
}

/// Builds the predictor graph and returns the `(M-1) x V` logits node.
pub fn predict_sequence_graph(
    tape: &mut Tape,
    rv: &RectifierVars,
    refined_tokens: Var,
    p: Var,
    direction: Direction,
) -> Var {
    let (m, _) = tape.shape(refined_tokens);
    assert!(m >= 2, "predict_sequence_graph: M must be >= 2");
    let dir = match direction {
        Direction::Forward => rv.dir_forward,
        Direction::Backward => rv.dir_backward,
    };
    let mut x = tape.add_row(refined_tokens, dir);
    let mask = causal_mask(m, direction);
    for layer in &rv.layers {
        x = attention_graph(tape, x, x, &layer.self_attn, Some(&mask));
        x = attention_graph(tape, x, p, &layer.cross_attn, None);
        let h = tape.matmul(x, layer.ffn_w1);
        let h = tape.add_row(h, layer.ffn_b1);
        let h = tape.gelu(h);
        let o = tape.matmul(h, layer.ffn_w2);
        let o = tape.add_row(o, layer.ffn_b2);
        let res = tape.add(x, o);
        x = tape.layer_norm(res, layer.ffn_ln_gamma, layer.ffn_ln_beta, LAYER_NORM_EPS);
    }
    // Teacher forcing: stream row t predicts token t+1 (forward) or t-1
    // (backward), so the sources are rows 0..M-1 resp. 1..M.
    let src = match direction {
        Direction::Forward => tape.slice_rows(x, 0, m - 1),
        Direction::Backward => tape.slice_rows(x, 1, m),
    };
    let logits = tape.matmul(src, rv.out_w);
    tape.add_row(logits, rv.out_b)
}

/// Plain-matrix sequence prediction.
pub fn predict_sequence(
    model: &RectifierModel,
    refined_tokens: &Array2<f64>,
    p: &CompositeFeature,
    direction: Direction,
) -> Result<SequencePrediction> {
    if refined_tokens.nrows() < 2 {
        return Err(CoreError::Precondition(
            "refined token sequence must have M >= 2".into(),
        ));
    }
    if refined_tokens.ncols() != model.dim() || p.values.ncols() != model.dim() {
        return Err(CoreError::Shape(format!(
            "predict_sequence: dims {} / {} vs model {}",
            refined_tokens.ncols(),
            p.values.ncols(),
            model.dim()
        )));
    }
    let mut tape = Tape::new();
    let rv = bind_rectifier(&mut tape, model);
    let tokens = tape.leaf(refined_tokens.clone());
    let pv = tape.leaf(p.values.clone());
    let logits = predict_sequence_graph(&mut tape, &rv, tokens, pv, direction);
    Ok(SequencePrediction {
        logits: tape.value(logits).clone(),
        direction,
    })
}

/// Target ids for one direction of one sequence.
pub fn direction_targets(seq: &TokenSequence, direction: Direction) -> Vec<usize> {
    let ids = seq.ids();
    match direction {
        Direction::Forward => ids[1..].iter().map(|&i| i as usize).collect(),
        Direction::Backward => ids[..ids.len() - 1].iter().map(|&i| i as usize).collect(),
    }
}

/// Rectification loss on the tape: half the sum of both directions'
/// next-token cross-entropies, summed (not averaged) over categories and
/// positions exactly as in the printed objective.
pub fn rectification_loss_graph(
    tape: &mut Tape,
    per_category: &[(Var, Var, TokenSequence)],
) -> Var {
    assert!(!per_category.is_empty());
    let mut terms = Vec::with_capacity(per_category.len() * 2);
    for (fwd, bwd, seq) in per_category {
        let f = tape.softmax_ce_sum(*fwd, direction_targets(seq, Direction::Forward));
        let b = tape.softmax_ce_sum(*bwd, direction_targets(seq, Direction::Backward));
        terms.push(f);
        terms.push(b);
    }
    let mut total = terms[0];
    for t in &terms[1..] {
        total = tape.add(total, *t);
    }
    tape.scale(total, 0.5)
}

/// Plain-matrix rectification loss over C categories.
pub fn rectification_loss(
    forward: &[SequencePrediction],
    backward: &[SequencePrediction],
    ground_truth: &[TokenSequence],
) -> Result<f64> {
    if forward.len() != ground_truth.len() || backward.len() != ground_truth.len() {
        return Err(CoreError::Validation(format!(
            "rectification_loss: {} forward / {} backward predictions for {} categories",
            forward.len(),
            backward.len(),
            ground_truth.len()
        )));
    }
    if ground_truth.is_empty() {
        return Err(CoreError::Validation("rectification_loss: no categories".into()));
    }
    let mut tape = Tape::new();
    let mut per_category = Vec::with_capacity(ground_truth.len());
    for ((f, b), seq) in forward.iter().zip(backward).zip(ground_truth) {
        if f.direction != Direction::Forward || b.direction != Direction::Backward {
            return Err(CoreError::Validation(
                "rectification_loss: prediction direction flags misaligned".into(),
            ));
        }
        let m = seq.len();
        if f.logits.nrows() != m - 1 || b.logits.nrows() != m - 1 {
            return Err(CoreError::Validation(format!(
                "rectification_loss: logits rows {} / {} for sequence of length {m}",
                f.logits.nrows(),
                b.logits.nrows()
            )));
        }
        let fv = tape.leaf(f.logits.clone());
        let bv = tape.leaf(b.logits.clone());
        per_category.push((fv, bv, seq.clone()));
    }
    let loss = rectification_loss_graph(&mut tape, &per_category);
    Ok(tape.value(loss)[(0, 0)])
}
