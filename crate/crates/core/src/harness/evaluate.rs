//! Evaluation: runs eval episodes with the rectification branch inactive,
//! never mutating the checkpoint, and reports mAP, per-category AP, and
//! query classification accuracy.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::backends::mix;
use crate::detection::{extract_detections, per_category_ap};
use crate::episodes::{materialize_episode, sample_episode};
use crate::error::{CoreError, Result};
use crate::harness::checkpoint::Checkpoint;
use crate::harness::config::RunConfig;
use crate::harness::train::{
    episode_spec, load_run_data, run_episode, MAP_IOU_THRESHOLD, SCORE_THRESHOLD, SUPPRESS_IOU,
};

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub episodes: usize,
    pub map: f64,
    pub accuracy: f64,
    pub per_category_ap: Vec<(String, f64)>,
}

/// One exportable detection line: `{image, box, category, score}`.
#[derive(Debug, Clone, Serialize)]
pub struct DetectionRecord {
    pub image: String,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub category: String,
    pub score: f64,
}

pub fn evaluate(checkpoint: &Checkpoint, config: &RunConfig) -> Result<(EvalReport, Vec<DetectionRecord>)> {
    config.validate()?;
    if checkpoint.config.d != config.d {
        return Err(CoreError::Config(format!(
            "checkpoint d = {} but config d = {}",
            checkpoint.config.d, config.d
        )));
    }
    if checkpoint.config.n != config.n {
        return Err(CoreError::Config(format!(
            "checkpoint n = {} but config n = {}",
            checkpoint.config.n, config.n
        )));
    }
    let data = load_run_data(config)?;
    let mut model = checkpoint.build_model()?;
    if let Some(emb) = &model.embedding {
        if emb.table.nrows() != data.vocab.size() {
            return Err(CoreError::Config(format!(
                "checkpoint vocabulary {} does not match corpus vocabulary {}",
                emb.table.nrows(),
                data.vocab.size()
            )));
        }
    }
    // Inference never runs the rectification branch.
    model.config.lambda = 0.0;

    let spec = episode_spec(config);
    let (h, w) = (data.catalog.geometry.height, data.catalog.geometry.width);
    let mut map_sum = 0.0;
    let mut map_n = 0usize;
    let mut acc_sum = 0.0;
    let mut acc_n = 0usize;
    let mut ap_by_name: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    let mut dump = Vec::new();

    for e in 0..config.eval_episodes {
        let seed = mix(&[config.seed, e as u64, 0xE7A1]);
        let episode = sample_episode(&data.catalog, &data.corpus, &spec, seed)?;
        let tensors = materialize_episode(&data.catalog, &episode, &data.vocab)?;
        let step = run_episode(&model, &tensors, h, w, false)?;
        if let Some(a) = step.accuracy {
            acc_sum += a;
            acc_n += 1;
        }
        if let Some(m) = step.map {
            map_sum += m;
            map_n += 1;
        }

        // Re-extract detections for the per-category report and the dump.
        let mut tape = crate::autodiff::Tape::new();
        let mv = crate::model::bind_model(&mut tape, &model);
        let out = crate::model::episode_loss_graph(&mut tape, &mv, &model, &tensors)?;
        let mut dets = Vec::new();
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
            for d in &extracted {
                let name = &data.catalog.categories[episode.support[d.category].category].name;
                dump.push(DetectionRecord {
                    image: format!("ep{e}_q{qi}"),
                    bbox: d.bbox.into(),
                    category: name.clone(),
                    score: d.score,
                });
            }
            dets.extend(extracted);
            gts.extend(q.ground_truth.iter().cloned());
        }
        if !gts.is_empty() {
            for (slot, ap) in per_category_ap(&dets, &gts, MAP_IOU_THRESHOLD)? {
                let name = data.catalog.categories[episode.support[slot].category]
                    .name
                    .clone();
                let entry = ap_by_name.entry(name).or_insert((0.0, 0));
                entry.0 += ap;
                entry.1 += 1;
            }
        }
    }

    let report = EvalReport {
        episodes: config.eval_episodes,
        map: if map_n > 0 { map_sum / map_n as f64 } else { 0.0 },
        accuracy: if acc_n > 0 { acc_sum / acc_n as f64 } else { 0.0 },
        per_category_ap: ap_by_name
            .into_iter()
            .map(|(name, (sum, n))| (name, sum / n as f64))
            .collect(),
    };
    Ok((report, dump))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodes::{Separability, SyntheticCatalogSpec};
    use crate::harness::train::train;

    fn tiny_config() -> RunConfig {
        RunConfig {
            d: 16,
            heads: 2,
            rect_heads: 2,
            rect_layers: 1,
            n: 2,
            k: 2,
            steps: 2,
            eval_episodes: 3,
            query_instances: Some(4),
            synthetic: Some(SyntheticCatalogSpec::new(
                2,
                8,
                16,
                Separability::VisionSeparable,
                5,
            )),
            ..RunConfig::default()
        }
    }

    #[test]
    fn evaluate_runs_and_reports() {
        let cfg = tiny_config();
        let out = train(&cfg).unwrap();
        let (report, dump) = evaluate(&out.checkpoint, &cfg).unwrap();
        assert_eq!(report.episodes, 3);
        assert!(report.map >= 0.0 && report.map <= 1.0);
        assert!(report.accuracy >= 0.0 && report.accuracy <= 1.0);
        assert!(!report.per_category_ap.is_empty());
        // Dump lines serialize to the documented shape.
        if let Some(first) = dump.first() {
            let line = serde_json::to_string(first).unwrap();
            assert!(line.contains("\"image\"") && line.contains("\"box\""));
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let cfg = tiny_config();
        let out = train(&cfg).unwrap();
        let mut other = tiny_config();
        other.d = 32;
        other.synthetic = Some(SyntheticCatalogSpec::new(
            2,
            8,
            32,
            Separability::VisionSeparable,
            5,
        ));
        assert!(evaluate(&out.checkpoint, &other).is_err());
    }

    #[test]
    fn untrained_model_sits_near_chance() {
        let mut cfg = tiny_config();
        cfg.steps = 0;
        cfg.eval_episodes = 8;
        let out = train(&cfg).unwrap();
        let (report, _) = evaluate(&out.checkpoint, &cfg).unwrap();
        assert!(
            (0.2..=0.8).contains(&report.accuracy),
            "untrained accuracy {}",
            report.accuracy
        );
        assert!(report.map < 0.3, "untrained mAP {}", report.map);
    }

    #[test]
    fn evaluate_does_not_mutate_checkpoint() {
        let cfg = tiny_config();
        let out = train(&cfg).unwrap();
        let before = out.checkpoint.to_bytes().unwrap();
        let _ = evaluate(&out.checkpoint, &cfg).unwrap();
        assert_eq!(before, out.checkpoint.to_bytes().unwrap());
    }
}
