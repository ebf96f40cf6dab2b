//! Episodic training loop: deterministic under a fixed seed, single-threaded
//! optimizer steps, newline-delimited JSON metrics.

use indexmap::IndexMap;
use ndarray::Array2;
use serde::Serialize;

use crate::backends::mix;
use crate::corpus::{build_vocabulary, load_corpus, RichTextEntry, Vocabulary};
use crate::detection::{compute_map, extract_detections, Detection};
use crate::episodes::{
    generate_synthetic_catalog, materialize_episode, sample_episode, CategoryCatalog, Episode,
    EpisodeSpec, EpisodeTensors,
};
use crate::error::{CoreError, Result};
use crate::harness::checkpoint::Checkpoint;
use crate::harness::config::{OptimizerKind, RunConfig};
use crate::model::{
    bind_model, episode_loss_graph, named_gradients, query_classification_accuracy, Model,
};
use crate::autodiff::Tape;

pub const MAP_IOU_THRESHOLD: f64 = 0.5;
pub const SCORE_THRESHOLD: f64 = 0.05;
pub const SUPPRESS_IOU: f64 = 0.5;

#[derive(Debug, Clone, Serialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub loss_det: f64,
    pub loss_rect: f64,
    pub acc: f64,
    pub map: f64,
}

pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRecord>,
}

pub fn metrics_to_ndjson(metrics: &[MetricsRecord]) -> String {
    let mut out = String::new();
    for m in metrics {
        out.push_str(&serde_json::to_string(m).expect("metrics serialize"));
        out.push('\n');
    }
    out
}

/// Resolved data sources for a run.
pub struct RunData {
    pub catalog: CategoryCatalog,
    pub corpus: Vec<RichTextEntry>,
    pub vocab: Vocabulary,
}

pub fn load_run_data(config: &RunConfig) -> Result<RunData> {
    // The synthetic pipeline renders features through the synthetic backend
    // functions; an unresolvable external backend is a hard error, never a
    // silent fallback.
    crate::backends::resolve_backend(&config.backend, crate::corpus::RESERVED_TOKENS)?;
    let (catalog, generated_corpus) = match &config.catalog_path {
        Some(path) => (
            CategoryCatalog::load(RunConfig::resolve_path(path))?,
            Vec::new(),
        ),
        None => {
            let spec = config.effective_synthetic();
            if spec.dim != config.d {
                return Err(CoreError::Config(format!(
                    "synthetic catalog dim {} must equal d {}",
                    spec.dim, config.d
                )));
            }
            generate_synthetic_catalog(&spec)?
        }
    };
    if catalog.geometry.dim != config.d {
        return Err(CoreError::Config(format!(
            "catalog feature dim {} must equal d {}",
            catalog.geometry.dim, config.d
        )));
    }
    let corpus = match &config.corpus_path {
        Some(path) => load_corpus(RunConfig::resolve_path(path))?,
        None if !generated_corpus.is_empty() => generated_corpus,
        None => {
            return Err(CoreError::Config(
                "corpus_path required when loading a catalog from disk".into(),
            ))
        }
    };
    let vocab = build_vocabulary(&corpus, config.min_count)?;
    Ok(RunData {
        catalog,
        corpus,
        vocab,
    })
}

pub fn episode_spec(config: &RunConfig) -> EpisodeSpec {
    EpisodeSpec {
        n: config.n,
        k: config.k,
        strategy: config.strategy,
        text_variant: config.text_variant,
        query_instances: config.effective_query_instances(),
        allow_empty_query: false,
        restrict_to: None,
    }
}

struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    adam_m: IndexMap<String, Array2<f64>>,
    adam_v: IndexMap<String, Array2<f64>>,
    t: usize,
}

impl Optimizer {
    fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer {
            kind,
            lr,
            adam_m: IndexMap::new(),
            adam_v: IndexMap::new(),
            t: 0,
        }
    }

    fn step(&mut self, model: &mut Model, grads: &IndexMap<String, Array2<f64>>) {
        self.t += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                let lr = self.lr;
                model.visit_params_mut(&mut |name, value| {
                    if let Some(g) = grads.get(name) {
                        value.scaled_add(-lr, g);
                    }
                });
            }
            OptimizerKind::Adam => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                const EPS: f64 = 1e-8;
                let lr = self.lr;
                let t = self.t as f64;
                let (m_map, v_map) = (&mut self.adam_m, &mut self.adam_v);
                model.visit_params_mut(&mut |name, value| {
                    let Some(g) = grads.get(name) else { return };
                    let m = m_map
                        .entry(name.to_string())
                        .or_insert_with(|| Array2::zeros(g.dim()));
                    let v = v_map
                        .entry(name.to_string())
                        .or_insert_with(|| Array2::zeros(g.dim()));
                    *m = &*m * B1 + &(g * (1.0 - B1));
                    *v = &*v * B2 + &(g.mapv(|x| x * x) * (1.0 - B2));
                    let mhat = &*m / (1.0 - B1.powf(t));
                    let vhat = v.mapv(|x| x / (1.0 - B2.powf(t)));
                    let update = mhat / &vhat.mapv(|x| x.sqrt() + EPS);
                    value.scaled_add(-lr, &update);
                });
            }
        }
    }
}

fn accumulate(into: &mut IndexMap<String, Array2<f64>>, from: &IndexMap<String, Array2<f64>>) {
    for (name, g) in from {
        match into.get_mut(name) {
            Some(acc) => *acc += g,
            None => {
                into.insert(name.clone(), g.clone());
            }
        }
    }
}

/// One episode's forward/backward pass plus detection metrics.
pub struct EpisodeStep {
    pub grads: IndexMap<String, Array2<f64>>,
    pub loss_det: f64,
    pub loss_rect: f64,
    pub accuracy: Option<f64>,
    pub map: Option<f64>,
}

pub fn run_episode(
    model: &Model,
    tensors: &EpisodeTensors,
    height: usize,
    width: usize,
    with_gradients: bool,
) -> Result<EpisodeStep> {
    let mut tape = Tape::new();
    let mv = bind_model(&mut tape, model);
    let out = episode_loss_graph(&mut tape, &mv, model, tensors)?;
    let loss_det = tape.value(out.det)[(0, 0)];
    let loss_rect = out.rect.map(|r| tape.value(r)[(0, 0)]).unwrap_or(0.0);
    let grads = if with_gradients {
        let g = tape.backward(out.total)?;
        named_gradients(&tape, &g, &mv)
    } else {
        IndexMap::new()
    };
    let accuracy = query_classification_accuracy(&out, tensors, height, width);

    let mut dets: Vec<Detection> = Vec::new();
    let mut gts = Vec::new();
    for (qi, q) in tensors.queries.iter().enumerate() {
        let extracted = extract_detections(
            &out.class_logits[qi],
            &out.box_preds[qi],
            qi,
            tensors.num_slots,
            SCORE_THRESHOLD,
            SUPPRESS_IOU,
        );
        dets.extend(extracted);
        gts.extend(q.ground_truth.iter().cloned());
    }
    let map = if gts.is_empty() {
        None
    } else {
        Some(compute_map(&dets, &gts, MAP_IOU_THRESHOLD)?)
    };

    Ok(EpisodeStep {
        grads,
        loss_det,
        loss_rect,
        accuracy,
        map,
    })
}

pub fn sample_training_episode(
    data: &RunData,
    config: &RunConfig,
    step: usize,
    batch_index: usize,
) -> Result<(Episode, EpisodeTensors)> {
    let spec = episode_spec(config);
    let seed = mix(&[config.seed, step as u64, batch_index as u64, 0x7238]);
    let episode = sample_episode(&data.catalog, &data.corpus, &spec, seed)?;
    let tensors = materialize_episode(&data.catalog, &episode, &data.vocab)?;
    Ok((episode, tensors))
}

/// Runs episodic optimization and returns the final checkpoint with the
/// per-step metrics log. Fully deterministic under a fixed config + seed.
pub fn train(config: &RunConfig) -> Result<TrainOutput> {
    config.validate()?;
    let data = load_run_data(config)?;
    let mut model = Model::init(&config.model_config(data.vocab.size()), config.seed)?;
    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate);
    let batch = config.effective_batch_size();
    let (h, w) = (data.catalog.geometry.height, data.catalog.geometry.width);

    let mut metrics = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let mut grads: IndexMap<String, Array2<f64>> = IndexMap::new();
        let mut loss_det = 0.0;
        let mut loss_rect = 0.0;
        let mut acc_sum = 0.0;
        let mut acc_n = 0usize;
        let mut map_sum = 0.0;
        let mut map_n = 0usize;
        for b in 0..batch {
            let (_, tensors) = sample_training_episode(&data, config, step, b)?;
            let ep = run_episode(&model, &tensors, h, w, true)?;
            if !ep.loss_det.is_finite() {
                return Err(CoreError::NonFiniteLoss {
                    step,
                    term: "loss_det".into(),
                });
            }
            if !ep.loss_rect.is_finite() {
                return Err(CoreError::NonFiniteLoss {
                    step,
                    term: "loss_rect".into(),
                });
            }
            loss_det += ep.loss_det;
            loss_rect += ep.loss_rect;
            if let Some(a) = ep.accuracy {
                acc_sum += a;
                acc_n += 1;
            }
            if let Some(m) = ep.map {
                map_sum += m;
                map_n += 1;
            }
            accumulate(&mut grads, &ep.grads);
        }
        let scale = 1.0 / batch as f64;
        for (_, g) in grads.iter_mut() {
            *g *= scale;
        }
        optimizer.step(&mut model, &grads);
        metrics.push(MetricsRecord {
            step,
            loss_det: loss_det * scale,
            loss_rect: loss_rect * scale,
            acc: if acc_n > 0 { acc_sum / acc_n as f64 } else { f64::NAN },
            map: if map_n > 0 { map_sum / map_n as f64 } else { f64::NAN },
        });
    }

    Ok(TrainOutput {
        checkpoint: Checkpoint::from_model(&model, config, config.steps as u64),
        metrics,
    })
}
