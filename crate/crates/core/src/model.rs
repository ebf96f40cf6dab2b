//! The trainable model: shared (or decoupled) attention encoding of query
//! maps, vision prototypes and token embeddings; prototype fusion; the
//! aggregation kernels; the rectification branch; and the per-position
//! detection head. One episode builds one tape; the optimizer consumes the
//! gradients of every bound parameter.

use indexmap::IndexMap;
use ndarray::Array2;

use crate::aggregation::{
    aggregate_graph, attention_graph, bind_attention, fuse_prototypes_graph, init_task_prototypes,
    sinusoidal_matrix, AttentionVars, SharedAttentionLayer, TaskPrototypes,
};
use crate::autodiff::{Gradients, Tape, Var};
use crate::detection::{bind_head, detection_loss_graph, head_forward_graph, DetectionHead, HeadVars};
use crate::episodes::EpisodeTensors;
use crate::error::{CoreError, Result};
use crate::init::tensor_rng;
use crate::rectify::{
    bind_rectifier, composite_feature_graph, predict_sequence_graph, rectification_loss_graph,
    Direction, RectifierModel, RectifierVars,
};

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    /// Categories per episode; fixes the task-prototype and head widths.
    pub n_slots: usize,
    pub vocab_size: usize,
    pub rect_layers: usize,
    pub rect_heads: usize,
    pub rect_ffn_mult: usize,
    pub no_language: bool,
    pub no_rectify: bool,
    pub decoupled_attention: bool,
    pub lambda: f64,
    pub normalize_rect: bool,
}

/// Trainable token embedding: lookup table plus sinusoidal positions.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenEmbedding {
    pub table: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub shared_attention: SharedAttentionLayer,
    /// Present only under decoupled attention; encodes the language branch.
    pub language_attention: Option<SharedAttentionLayer>,
    pub task_prototypes: TaskPrototypes,
    pub background_text: Option<Array2<f64>>,
    pub embedding: Option<TokenEmbedding>,
    pub rectifier: Option<RectifierModel>,
    pub head: DetectionHead,
    pub config: ModelConfig,
}

impl Model {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Model> {
        if config.d % 2 != 0 {
            return Err(CoreError::Config("model dim must be even".into()));
        }
        let language = !config.no_language;
        let shared_attention = SharedAttentionLayer::init(
            config.d,
            config.heads,
            &mut tensor_rng(seed, "shared_attention"),
        )?;
        let language_attention = if language && config.decoupled_attention {
            Some(SharedAttentionLayer::init(
                config.d,
                config.heads,
                &mut tensor_rng(seed, "language_attention"),
            )?)
        } else {
            None
        };
        let task_prototypes = init_task_prototypes(config.n_slots + 1, config.d)?;
        let background_text = language.then(|| Array2::zeros((1, config.d)));
        // Token embeddings start from the deterministic synthetic embedder
        // (the pretrained-text-tower stand-in), scaled to balance the
        // sinusoidal position rows, and train from there.
        let embedding = language.then(|| {
            let scale = (config.d as f64).sqrt();
            let mut table = Array2::zeros((config.vocab_size, config.d));
            for id in 0..config.vocab_size {
                let row = crate::backends::synthetic_token_row(id as u32, config.d);
                for (j, v) in row.into_iter().enumerate() {
                    table[(id, j)] = scale * v;
                }
            }
            TokenEmbedding { table }
        });
        let rectifier = (language && !config.no_rectify)
            .then(|| {
                RectifierModel::init(
                    config.d,
                    config.vocab_size,
                    config.rect_layers,
                    config.rect_heads,
                    config.rect_ffn_mult,
                    seed,
                    "rectifier",
                )
            })
            .transpose()?;
        let head = DetectionHead::init(config.d, config.n_slots, seed, "head");
        Ok(Model {
            shared_attention,
            language_attention,
            task_prototypes,
            background_text,
            embedding,
            rectifier,
            head,
            config: config.clone(),
        })
    }

    pub fn visit_params(&self, f: &mut impl FnMut(&str, &Array2<f64>)) {
        visit_attention(&self.shared_attention, "shared_attention", f);
        if let Some(l) = &self.language_attention {
            visit_attention(l, "language_attention", f);
        }
        f("task_prototypes.t", &self.task_prototypes.matrix);
        if let Some(b) = &self.background_text {
            f("fusion.background_text", b);
        }
        if let Some(e) = &self.embedding {
            f("embedding.table", &e.table);
        }
        if let Some(r) = &self.rectifier {
            visit_rectifier(r, f);
        }
        f("head.class_w", &self.head.class_w);
        f("head.class_b", &self.head.class_b);
        f("head.box_w", &self.head.box_w);
        f("head.box_b", &self.head.box_b);
    }

    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(&str, &mut Array2<f64>)) {
        visit_attention_mut(&mut self.shared_attention, "shared_attention", f);
        if let Some(l) = &mut self.language_attention {
            visit_attention_mut(l, "language_attention", f);
        }
        f("task_prototypes.t", &mut self.task_prototypes.matrix);
        if let Some(b) = &mut self.background_text {
            f("fusion.background_text", b);
        }
        if let Some(e) = &mut self.embedding {
            f("embedding.table", &mut e.table);
        }
        if let Some(r) = &mut self.rectifier {
            visit_rectifier_mut(r, f);
        }
        f("head.class_w", &mut self.head.class_w);
        f("head.class_b", &mut self.head.class_b);
        f("head.box_w", &mut self.head.box_w);
        f("head.box_b", &mut self.head.box_b);
    }

    pub fn param_tensors(&self) -> IndexMap<String, Array2<f64>> {
        let mut out = IndexMap::new();
        self.visit_params(&mut |name, value| {
            out.insert(name.to_string(), value.clone());
        });
        out
    }

    pub fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, v| n += v.len());
        n
    }
}

fn visit_attention(
    layer: &SharedAttentionLayer,
    prefix: &str,
    f: &mut impl FnMut(&str, &Array2<f64>),
) {
    f(&format!("{prefix}.wq"), &layer.wq);
    f(&format!("{prefix}.wk"), &layer.wk);
    f(&format!("{prefix}.wv"), &layer.wv);
    f(&format!("{prefix}.wo"), &layer.wo);
    f(&format!("{prefix}.ln_gamma"), &layer.ln_gamma);
    f(&format!("{prefix}.ln_beta"), &layer.ln_beta);
}

fn visit_attention_mut(
    layer: &mut SharedAttentionLayer,
    prefix: &str,
    f: &mut impl FnMut(&str, &mut Array2<f64>),
) {
    f(&format!("{prefix}.wq"), &mut layer.wq);
    f(&format!("{prefix}.wk"), &mut layer.wk);
    f(&format!("{prefix}.wv"), &mut layer.wv);
    f(&format!("{prefix}.wo"), &mut layer.wo);
    f(&format!("{prefix}.ln_gamma"), &mut layer.ln_gamma);
    f(&format!("{prefix}.ln_beta"), &mut layer.ln_beta);
}

fn visit_rectifier(r: &RectifierModel, f: &mut impl FnMut(&str, &Array2<f64>)) {
    for (i, l) in r.layers.iter().enumerate() {
        visit_attention(&l.self_attn, &format!("rectifier.layer{i}.self"), f);
        visit_attention(&l.cross_attn, &format!("rectifier.layer{i}.cross"), f);
        f(&format!("rectifier.layer{i}.ffn_w1"), &l.ffn_w1);
        f(&format!("rectifier.layer{i}.ffn_b1"), &l.ffn_b1);
        f(&format!("rectifier.layer{i}.ffn_w2"), &l.ffn_w2);
        f(&format!("rectifier.layer{i}.ffn_b2"), &l.ffn_b2);
        f(&format!("rectifier.layer{i}.ffn_ln_gamma"), &l.ffn_ln_gamma);
        f(&format!("rectifier.layer{i}.ffn_ln_beta"), &l.ffn_ln_beta);
    }
    f("rectifier.out_w", &r.out_w);
    f("rectifier.out_b", &r.out_b);
    f("rectifier.dir_forward", &r.dir_forward);
    f("rectifier.dir_backward", &r.dir_backward);
}

fn visit_rectifier_mut(r: &mut RectifierModel, f: &mut impl FnMut(&str, &mut Array2<f64>)) {
    for (i, l) in r.layers.iter_mut().enumerate() {
        visit_attention_mut(&mut l.self_attn, &format!("rectifier.layer{i}.self"), f);
        visit_attention_mut(&mut l.cross_attn, &format!("rectifier.layer{i}.cross"), f);
        f(&format!("rectifier.layer{i}.ffn_w1"), &mut l.ffn_w1);
        f(&format!("rectifier.layer{i}.ffn_b1"), &mut l.ffn_b1);
        f(&format!("rectifier.layer{i}.ffn_w2"), &mut l.ffn_w2);
        f(&format!("rectifier.layer{i}.ffn_b2"), &mut l.ffn_b2);
        f(&format!("rectifier.layer{i}.ffn_ln_gamma"), &mut l.ffn_ln_gamma);
        f(&format!("rectifier.layer{i}.ffn_ln_beta"), &mut l.ffn_ln_beta);
    }
    f("rectifier.out_w", &mut r.out_w);
    f("rectifier.out_b", &mut r.out_b);
    f("rectifier.dir_forward", &mut r.dir_forward);
    f("rectifier.dir_backward", &mut r.dir_backward);
}

/// Tape bindings for every trainable tensor, plus a name-aligned ledger in
/// `visit_params` order for generic gradient extraction.
pub struct ModelVars {
    pub shared: AttentionVars,
    pub language: Option<AttentionVars>,
    pub task: Var,
    pub background_text: Option<Var>,
    pub embedding: Option<Var>,
    pub rectifier: Option<RectifierVars>,
    pub head: HeadVars,
    pub ledger: Vec<(String, Var)>,
}

impl ModelVars {
    fn attention_ledger(prefix: &str, av: &AttentionVars, ledger: &mut Vec<(String, Var)>) {
        ledger.push((format!("{prefix}.wq"), av.wq));
        ledger.push((format!("{prefix}.wk"), av.wk));
        ledger.push((format!("{prefix}.wv"), av.wv));
        ledger.push((format!("{prefix}.wo"), av.wo));
        ledger.push((format!("{prefix}.ln_gamma"), av.ln_gamma));
        ledger.push((format!("{prefix}.ln_beta"), av.ln_beta));
    }
}

pub fn bind_model(tape: &mut Tape, model: &Model) -> ModelVars {
    let shared = bind_attention(tape, &model.shared_attention);
    let language = model
        .language_attention
        .as_ref()
        .map(|l| bind_attention(tape, l));
    let task = tape.leaf(model.task_prototypes.matrix.clone());
    let background_text = model.background_text.as_ref().map(|b| tape.leaf(b.clone()));
    let embedding = model.embedding.as_ref().map(|e| tape.leaf(e.table.clone()));
    let rectifier = model.rectifier.as_ref().map(|r| bind_rectifier(tape, r));
    let head = bind_head(tape, &model.head);

    let mut ledger = Vec::new();
    ModelVars::attention_ledger("shared_attention", &shared, &mut ledger);
    if let Some(l) = &language {
        ModelVars::attention_ledger("language_attention", l, &mut ledger);
    }
    ledger.push(("task_prototypes.t".into(), task));
    if let Some(b) = background_text {
        ledger.push(("fusion.background_text".into(), b));
    }
    if let Some(e) = embedding {
        ledger.push(("embedding.table".into(), e));
    }
    if let Some(r) = &rectifier {
        for (i, l) in r.layers.iter().enumerate() {
            ModelVars::attention_ledger(&format!("rectifier.layer{i}.self"), &l.self_attn, &mut ledger);
            ModelVars::attention_ledger(&format!("rectifier.layer{i}.cross"), &l.cross_attn, &mut ledger);
            ledger.push((format!("rectifier.layer{i}.ffn_w1"), l.ffn_w1));
            ledger.push((format!("rectifier.layer{i}.ffn_b1"), l.ffn_b1));
            ledger.push((format!("rectifier.layer{i}.ffn_w2"), l.ffn_w2));
            ledger.push((format!("rectifier.layer{i}.ffn_b2"), l.ffn_b2));
            ledger.push((format!("rectifier.layer{i}.ffn_ln_gamma"), l.ffn_ln_gamma));
            ledger.push((format!("rectifier.layer{i}.ffn_ln_beta"), l.ffn_ln_beta));
        }
        ledger.push(("rectifier.out_w".into(), r.out_w));
        ledger.push(("rectifier.out_b".into(), r.out_b));
        ledger.push(("rectifier.dir_forward".into(), r.dir_forward));
        ledger.push(("rectifier.dir_backward".into(), r.dir_backward));
    }
    ledger.push(("head.class_w".into(), head.class_w));
    ledger.push(("head.class_b".into(), head.class_b));
    ledger.push(("head.box_w".into(), head.box_w));
    ledger.push(("head.box_b".into(), head.box_b));

    ModelVars {
        shared,
        language,
        task,
        background_text,
        embedding,
        rectifier,
        head,
        ledger,
    }
}

/// Outputs of one episode's forward pass.
pub struct EpisodeOutputs {
    pub total: Var,
    pub det: Var,
    pub rect: Option<Var>,
    /// Per-query class logits and box predictions (values, detached).
    pub class_logits: Vec<Array2<f64>>,
    pub box_preds: Vec<Array2<f64>>,
}

/// Builds the full training graph for one episode: detection loss averaged
/// over query images plus `lambda` times the rectification loss. The
/// rectification branch is skipped entirely when inactive or `lambda == 0`,
/// so the detection gradients are bit-identical with and without it.
pub fn episode_loss_graph(
    tape: &mut Tape,
    mv: &ModelVars,
    model: &Model,
    tensors: &EpisodeTensors,
) -> Result<EpisodeOutputs> {
    let cfg = &model.config;
    if tensors.num_slots != cfg.n_slots {
        return Err(CoreError::Shape(format!(
            "episode has {} slots, model built for {}",
            tensors.num_slots, cfg.n_slots
        )));
    }
    if tensors.queries.is_empty() {
        return Err(CoreError::Precondition("episode has no query images".into()));
    }
    let n = tensors.num_slots;
    let d = cfg.d;
    let language = !cfg.no_language;

    // Vision prototypes through the shared layer.
    let vision_raw = tape.leaf(tensors.support_vision.clone());
    let vision_enc = attention_graph(tape, vision_raw, vision_raw, &mv.shared, None);

    // Language prototypes: embed, encode, mean-pool; kept per slot for the
    // rectification branch.
    let mut encoded_tokens: Vec<Var> = Vec::new();
    let s = if language {
        let embedding = mv.embedding.expect("language model without embedding");
        let lang_layer = mv.language.as_ref().unwrap_or(&mv.shared);
        let mut lang_rows = Vec::with_capacity(n);
        for seq in &tensors.token_sequences {
            let ids: Vec<usize> = seq.ids().iter().map(|&i| i as usize).collect();
            let emb = tape.gather_rows(embedding, ids);
            let pos = tape.leaf(sinusoidal_matrix(seq.len(), d));
            let emb = tape.add(emb, pos);
            let enc = attention_graph(tape, emb, emb, lang_layer, None);
            encoded_tokens.push(enc);
            lang_rows.push(tape.mean_rows(enc));
        }
        let lang = tape.concat_rows(&lang_rows);
        let bg = mv
            .background_text
            .expect("language model without background text vector");
        fuse_prototypes_graph(tape, vision_enc, lang, bg)
    } else {
        vision_enc
    };

    let t_slice = tape.slice_rows(mv.task, 0, n + 1);
    let rectify = language && !cfg.no_rectify && cfg.lambda != 0.0;

    let mut det_terms = Vec::with_capacity(tensors.queries.len());
    let mut rect_terms = Vec::with_capacity(tensors.queries.len());
    let mut class_logits = Vec::with_capacity(tensors.queries.len());
    let mut box_preds = Vec::with_capacity(tensors.queries.len());
    for q in &tensors.queries {
        let q_raw = tape.leaf(q.features.clone());
        let q_enc = attention_graph(tape, q_raw, q_raw, &mv.shared, None);
        let agg = aggregate_graph(tape, q_enc, s, t_slice);
        let (cl, bx) = head_forward_graph(tape, &mv.head, agg);
        class_logits.push(tape.value(cl).clone());
        box_preds.push(tape.value(bx).clone());
        det_terms.push(detection_loss_graph(
            tape,
            cl,
            bx,
            &q.targets,
            crate::detection::DEFAULT_CLASS_WEIGHT,
            crate::detection::DEFAULT_BOX_WEIGHT,
        ));

        if rectify {
            let rv = mv.rectifier.as_ref().expect("rectify without rectifier");
            let mut per_category = Vec::with_capacity(n);
            for slot in 0..n {
                let s_c = tape.slice_rows(s, slot, slot + 1);
                let p = composite_feature_graph(tape, s_c, q_enc);
                let fwd =
                    predict_sequence_graph(tape, rv, encoded_tokens[slot], p, Direction::Forward);
                let bwd =
                    predict_sequence_graph(tape, rv, encoded_tokens[slot], p, Direction::Backward);
                per_category.push((fwd, bwd, tensors.token_sequences[slot].clone()));
            }
            let mut rect = rectification_loss_graph(tape, &per_category);
            if cfg.normalize_rect {
                let targets: usize = tensors
                    .token_sequences
                    .iter()
                    .map(|s| s.len() - 1)
                    .sum();
                rect = tape.scale(rect, 1.0 / targets as f64);
            }
            rect_terms.push(rect);
        }
    }

    let inv_q = 1.0 / tensors.queries.len() as f64;
    let mut det = det_terms[0];
    for t in &det_terms[1..] {
        det = tape.add(det, *t);
    }
    det = tape.scale(det, inv_q);

    let rect = if rectify {
        let mut r = rect_terms[0];
        for t in &rect_terms[1..] {
            r = tape.add(r, *t);
        }
        Some(tape.scale(r, inv_q))
    } else {
        None
    };

    let total = match rect {
        Some(r) => {
            let weighted = tape.scale(r, cfg.lambda);
            tape.add(det, weighted)
        }
        None => det,
    };

    Ok(EpisodeOutputs {
        total,
        det,
        rect,
        class_logits,
        box_preds,
    })
}

/// Extracts named gradients in ledger order (zeros for parameters the loss
/// does not reach).
pub fn named_gradients(
    tape: &Tape,
    grads: &Gradients,
    mv: &ModelVars,
) -> IndexMap<String, Array2<f64>> {
    let mut out = IndexMap::new();
    for (name, var) in &mv.ledger {
        let (r, c) = tape.shape(*var);
        out.insert(name.clone(), grads.get_or_zeros(*var, r, c));
    }
    out
}

/// Fraction of query ground-truth boxes whose box-averaged class logits
/// argmax (over foreground slots) hits the true slot. `None` when the
/// episode has no ground truth.
pub fn query_classification_accuracy(
    outputs: &EpisodeOutputs,
    tensors: &EpisodeTensors,
    height: usize,
    width: usize,
) -> Option<f64> {
    let n = tensors.num_slots;
    let mut total = 0usize;
    let mut correct = 0usize;
    for (q, logits) in tensors.queries.iter().zip(&outputs.class_logits) {
        for gt in &q.ground_truth {
            let mut acc = vec![0.0; n];
            let mut cells = 0usize;
            for r in 0..height {
                for c in 0..width {
                    let y = (r as f64 + 0.5) / height as f64;
                    let x = (c as f64 + 0.5) / width as f64;
                    if x >= gt.bbox.x0 && x < gt.bbox.x1 && y >= gt.bbox.y0 && y < gt.bbox.y1 {
                        let pos = r * width + c;
                        for (slot, a) in acc.iter_mut().enumerate() {
                            *a += logits[(pos, slot)];
                        }
                        cells += 1;
                    }
                }
            }
            if cells == 0 {
                continue;
            }
            let best = acc
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            total += 1;
            if best == gt.category {
                correct += 1;
            }
        }
    }
    if total == 0 {
        None
    } else {
        Some(correct as f64 / total as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::build_vocabulary;
    use crate::episodes::{
        generate_synthetic_catalog, materialize_episode, sample_episode, EpisodeSpec,
        SamplingStrategy, Separability, SyntheticCatalogSpec, TextVariant,
    };

    fn test_config(no_language: bool, no_rectify: bool, decoupled: bool) -> ModelConfig {
        ModelConfig {
            d: 16,
            heads: 2,
            n_slots: 2,
            vocab_size: 64,
            rect_layers: 1,
            rect_heads: 2,
            rect_ffn_mult: 2,
            no_language,
            no_rectify,
            decoupled_attention: decoupled,
            lambda: 1.0,
            normalize_rect: false,
        }
    }

    fn setup(
        cfg: &ModelConfig,
    ) -> (
        Model,
        crate::episodes::CategoryCatalog,
        Vec<crate::corpus::RichTextEntry>,
        EpisodeTensors,
    ) {
        let spec = SyntheticCatalogSpec::new(2, 8, cfg.d, Separability::VisionSeparable, 3);
        let (catalog, corpus) = generate_synthetic_catalog(&spec).unwrap();
        let vocab = build_vocabulary(&corpus, 1).unwrap();
        let mut cfg = cfg.clone();
        cfg.vocab_size = vocab.size();
        let model = Model::init(&cfg, 11).unwrap();
        let espec = EpisodeSpec {
            n: 2,
            k: 2,
            strategy: SamplingStrategy::BalancedInstances,
            text_variant: TextVariant::Manual,
            query_instances: 4,
            allow_empty_query: false,
            restrict_to: None,
        };
        let ep = sample_episode(&catalog, &corpus, &espec, 0).unwrap();
        let tensors = materialize_episode(&catalog, &ep, &vocab).unwrap();
        (model, catalog, corpus, tensors)
    }

    #[test]
    fn ledger_order_matches_visit_order() {
        for (nl, nr, dc) in [
            (false, false, false),
            (false, false, true),
            (false, true, false),
            (true, true, false),
        ] {
            let cfg = test_config(nl, nr, dc);
            let model = Model::init(&cfg, 5).unwrap();
            let mut tape = Tape::new();
            let mv = bind_model(&mut tape, &model);
            let mut visit_names = Vec::new();
            model.visit_params(&mut |n, _| visit_names.push(n.to_string()));
            let ledger_names: Vec<String> =
                mv.ledger.iter().map(|(n, _)| n.clone()).collect();
            assert_eq!(visit_names, ledger_names);
            // Bound values match the stored tensors.
            for ((name, var), vname) in mv.ledger.iter().zip(&visit_names) {
                assert_eq!(name, vname);
                let mut found = false;
                model.visit_params(&mut |n, v| {
                    if n == name {
                        assert_eq!(tape.value(*var), v);
                        found = true;
                    }
                });
                assert!(found);
            }
        }
    }

    #[test]
    fn no_language_blocks_language_gradients_and_params() {
        let cfg = test_config(true, true, false);
        let (model, _cat, _corpus, tensors) = setup(&cfg);
        assert!(model.embedding.is_none());
        assert!(model.background_text.is_none());
        assert!(model.rectifier.is_none());
        let mut tape = Tape::new();
        let mv = bind_model(&mut tape, &model);
        let out = episode_loss_graph(&mut tape, &mv, &model, &tensors).unwrap();
        let grads = tape.backward(out.total).unwrap();
        let named = named_gradients(&tape, &grads, &mv);
        // The remaining parameters all receive gradient.
        for (name, g) in &named {
            let nonzero = g.iter().any(|v| *v != 0.0);
            assert!(nonzero, "parameter {name} received no gradient");
        }
    }

    #[test]
    fn lambda_zero_matches_detection_only_gradients() {
        let cfg_full = test_config(false, false, false);
        let (model_full, _c, _e, tensors) = setup(&cfg_full);

        let mut tape_a = Tape::new();
        let mv_a = bind_model(&mut tape_a, &model_full);
        let out_a = episode_loss_graph(&mut tape_a, &mv_a, &model_full, &tensors).unwrap();
        assert!(out_a.rect.is_some());
        let grads_a = tape_a.backward(out_a.det).unwrap();
        let det_grads_a = named_gradients(&tape_a, &grads_a, &mv_a);

        let mut model_zero = model_full;
        model_zero.config.lambda = 0.0;
        let mut tape_b = Tape::new();
        let mv_b = bind_model(&mut tape_b, &model_zero);
        let out_b = episode_loss_graph(&mut tape_b, &mv_b, &model_zero, &tensors).unwrap();
        assert!(out_b.rect.is_none());
        let grads_b = tape_b.backward(out_b.total).unwrap();
        let det_grads_b = named_gradients(&tape_b, &grads_b, &mv_b);

        assert_eq!(
            tape_a.value(out_a.det),
            tape_b.value(out_b.total),
            "detection loss changed"
        );
        for (name, gb) in &det_grads_b {
            let ga = &det_grads_a[name];
            assert_eq!(ga, gb, "gradient for {name} changed");
        }
        // Rectifier parameters receive no gradient under lambda = 0.
        for (name, g) in &det_grads_b {
            if name.starts_with("rectifier.") {
                assert!(g.iter().all(|v| *v == 0.0), "{name} got gradient");
            }
        }
    }

    #[test]
    fn rectify_contributes_gradients_when_active() {
        let cfg = test_config(false, false, false);
        let (model, _c, _e, tensors) = setup(&cfg);
        let mut tape = Tape::new();
        let mv = bind_model(&mut tape, &model);
        let out = episode_loss_graph(&mut tape, &mv, &model, &tensors).unwrap();
        let grads = tape.backward(out.total).unwrap();
        let named = named_gradients(&tape, &grads, &mv);
        let rect_grad_norm: f64 = named
            .iter()
            .filter(|(n, _)| n.starts_with("rectifier."))
            .map(|(_, g)| g.iter().map(|v| v * v).sum::<f64>())
            .sum();
        assert!(rect_grad_norm > 0.0);
        let emb = &named["embedding.table"];
        assert!(emb.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn decoupled_attention_separates_branches() {
        let cfg = test_config(false, true, true);
        let (model, _c, _e, tensors) = setup(&cfg);
        assert!(model.language_attention.is_some());
        let mut tape = Tape::new();
        let mv = bind_model(&mut tape, &model);
        let out = episode_loss_graph(&mut tape, &mv, &model, &tensors).unwrap();
        let grads = tape.backward(out.total).unwrap();
        let named = named_gradients(&tape, &grads, &mv);
        assert!(named["language_attention.wq"].iter().any(|v| *v != 0.0));

        // Same input through both layers differs (independent init).
        let x = tensors.support_vision.clone();
        let via_shared =
            crate::aggregation::shared_encode(&model.shared_attention, &x).unwrap();
        let via_language =
            crate::aggregation::shared_encode(model.language_attention.as_ref().unwrap(), &x)
                .unwrap();
        assert_ne!(via_shared, via_language);
    }

    #[test]
    fn shared_weights_are_seed_stable_across_variants() {
        // Enabling optional parameter groups must not shift shared init.
        let a = Model::init(&test_config(false, false, false), 7).unwrap();
        let b = Model::init(&test_config(false, false, true), 7).unwrap();
        let c = Model::init(&test_config(true, true, false), 7).unwrap();
        assert_eq!(a.shared_attention, b.shared_attention);
        assert_eq!(a.shared_attention, c.shared_attention);
        assert_eq!(a.head, c.head);
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = test_config(false, false, false);
        let (model, _c, _e, tensors) = setup(&cfg);
        let run = || {
            let mut tape = Tape::new();
            let mv = bind_model(&mut tape, &model);
            let out = episode_loss_graph(&mut tape, &mv, &model, &tensors).unwrap();
            tape.value(out.total)[(0, 0)]
        };
        assert_eq!(run(), run());
    }
}
