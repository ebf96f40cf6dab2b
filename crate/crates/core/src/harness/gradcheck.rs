//! Central finite-difference verification of the analytic gradients, exposed
//! as a harness utility so any build can re-certify its own backward passes.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::aggregation::aggregate_graph;
use crate::autodiff::Tape;
use crate::backends::mix;
use crate::corpus::{TokenSequence, BOS_ID, EOS_ID};
use crate::episodes::{Separability, SyntheticCatalogSpec};
use crate::error::{CoreError, Result};
use crate::harness::config::RunConfig;
use crate::harness::train::{load_run_data, sample_training_episode};
use crate::model::{bind_model, episode_loss_graph, named_gradients, Model};
use crate::rectify::rectification_loss_graph;

pub const FD_EPSILON: f64 = 1e-4;
pub const DEFAULT_THRESHOLD: f64 = 1e-4;
pub const LINEAR_THRESHOLD: f64 = 1e-8;

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub module: String,
    pub instances: usize,
    pub max_rel_err: f64,
    pub threshold: f64,
    pub pass: bool,
}

fn rel_err(analytic: f64, fd: f64) -> f64 {
    if analytic.abs() < 1e-12 && fd.abs() < 1e-12 {
        return 0.0;
    }
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-8)
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
}

/// FD over every entry of `inputs[target]` for a scalar function rebuilt from
/// scratch at each probe.
fn fd_matrix(
    inputs: &[Array2<f64>],
    target: usize,
    eval: &dyn Fn(&[Array2<f64>]) -> f64,
) -> Array2<f64> {
    let mut g = Array2::zeros(inputs[target].dim());
    for i in 0..g.nrows() {
        for j in 0..g.ncols() {
            let mut plus = inputs.to_vec();
            plus[target][(i, j)] += FD_EPSILON;
            let mut minus = inputs.to_vec();
            minus[target][(i, j)] -= FD_EPSILON;
            g[(i, j)] = (eval(&plus) - eval(&minus)) / (2.0 * FD_EPSILON);
        }
    }
    g
}

fn max_rel(analytic: &Array2<f64>, fd: &Array2<f64>) -> f64 {
    analytic
        .iter()
        .zip(fd.iter())
        .map(|(a, f)| rel_err(*a, *f))
        .fold(0.0, f64::max)
}

/// Aggregation gradients w.r.t. Q, S, and T against central differences.
fn check_aggregate(seed: u64, instances: usize) -> f64 {
    let (hw, c1, d) = (6, 4, 8);
    let mut worst: f64 = 0.0;
    for inst in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[seed, inst as u64, 0xA6]));
        let q = random_matrix(&mut rng, hw, d);
        let s = random_matrix(&mut rng, c1, d);
        let t = random_matrix(&mut rng, c1, d);
        let w = random_matrix(&mut rng, hw, d);
        let eval = |inputs: &[Array2<f64>]| -> f64 {
            let mut tape = Tape::new();
            let qv = tape.leaf(inputs[0].clone());
            let sv = tape.leaf(inputs[1].clone());
            let tv = tape.leaf(inputs[2].clone());
            let agg = aggregate_graph(&mut tape, qv, sv, tv);
            let wv = tape.leaf(w.clone());
            let prod = tape.mul(agg, wv);
            let s = tape.sum_all(prod);
            tape.value(s)[(0, 0)]
        };
        let inputs = vec![q.clone(), s.clone(), t.clone()];
        let mut tape = Tape::new();
        let qv = tape.leaf(q);
        let sv = tape.leaf(s);
        let tv = tape.leaf(t);
        let agg = aggregate_graph(&mut tape, qv, sv, tv);
        let wv = tape.leaf(w.clone());
        let prod = tape.mul(agg, wv);
        let scalar = tape.sum_all(prod);
        let grads = tape.backward(scalar).expect("backward");
        for (idx, var) in [(0, qv), (1, sv), (2, tv)] {
            let analytic = grads.get(var).expect("gradient");
            let fd = fd_matrix(&inputs, idx, &eval);
            worst = worst.max(max_rel(analytic, &fd));
        }
    }
    worst
}

/// Rectification-loss gradient w.r.t. the logits against central differences.
fn check_rectification(seed: u64, instances: usize) -> f64 {
    let (c, m, v) = (2usize, 5usize, 16usize);
    let mut worst: f64 = 0.0;
    for inst in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[seed, inst as u64, 0xB7]));
        let mut seqs = Vec::new();
        for _ in 0..c {
            let interior: Vec<u32> = (0..m - 2).map(|_| rng.gen_range(4..v as u32)).collect();
            let mut ids = vec![BOS_ID];
            ids.extend(interior);
            ids.push(EOS_ID);
            seqs.push(TokenSequence::from_ids(ids, v).unwrap());
        }
        let mats: Vec<Array2<f64>> = (0..2 * c)
            .map(|_| random_matrix(&mut rng, m - 1, v))
            .collect();
        let eval = |inputs: &[Array2<f64>]| -> f64 {
            let mut tape = Tape::new();
            let mut per_cat = Vec::new();
            for i in 0..c {
                let f = tape.leaf(inputs[2 * i].clone());
                let b = tape.leaf(inputs[2 * i + 1].clone());
                per_cat.push((f, b, seqs[i].clone()));
            }
            let loss = rectification_loss_graph(&mut tape, &per_cat);
            tape.value(loss)[(0, 0)]
        };
        let mut tape = Tape::new();
        let mut per_cat = Vec::new();
        let mut vars = Vec::new();
        for i in 0..c {
            let f = tape.leaf(mats[2 * i].clone());
            let b = tape.leaf(mats[2 * i + 1].clone());
            per_cat.push((f, b, seqs[i].clone()));
            vars.push(f);
            vars.push(b);
        }
        let loss = rectification_loss_graph(&mut tape, &per_cat);
        let grads = tape.backward(loss).expect("backward");
        for (idx, var) in vars.iter().enumerate() {
            let analytic = grads.get(*var).expect("gradient");
            let fd = fd_matrix(&mats, idx, &eval);
            worst = worst.max(max_rel(analytic, &fd));
        }
    }
    worst
}

/// The purely linear task-encoding path: gradient w.r.t. T is exact.
fn check_task_encoding(seed: u64, instances: usize) -> f64 {
    let (hw, c1, d) = (6, 4, 8);
    let mut worst: f64 = 0.0;
    for inst in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[seed, inst as u64, 0xC8]));
        let mut a = random_matrix(&mut rng, hw, c1).mapv(|x| x.abs() + 0.05);
        for mut row in a.rows_mut() {
            let s = row.sum();
            row.mapv_inplace(|x| x / s);
        }
        let t = random_matrix(&mut rng, c1, d);
        let w = random_matrix(&mut rng, hw, d);
        let eval = |inputs: &[Array2<f64>]| -> f64 {
            let mut tape = Tape::new();
            let av = tape.leaf(a.clone());
            let tv = tape.leaf(inputs[0].clone());
            let q2 = tape.matmul(av, tv);
            let wv = tape.leaf(w.clone());
            let prod = tape.mul(q2, wv);
            let s = tape.sum_all(prod);
            tape.value(s)[(0, 0)]
        };
        let inputs = vec![t.clone()];
        let mut tape = Tape::new();
        let av = tape.leaf(a.clone());
        let tv = tape.leaf(t);
        let q2 = tape.matmul(av, tv);
        let wv = tape.leaf(w.clone());
        let prod = tape.mul(q2, wv);
        let scalar = tape.sum_all(prod);
        let grads = tape.backward(scalar).expect("backward");
        let fd = fd_matrix(&inputs, 0, &eval);
        worst = worst.max(max_rel(grads.get(tv).unwrap(), &fd));
    }
    worst
}

/// End-to-end episode loss: every model parameter, probed on a coordinate
/// subsample.
fn check_full_model(seed: u64) -> Result<f64> {
    let config = RunConfig {
        d: 16,
        heads: 2,
        rect_heads: 2,
        rect_layers: 1,
        n: 2,
        k: 2,
        query_instances: Some(2),
        synthetic: Some(SyntheticCatalogSpec::new(
            2,
            6,
            16,
            Separability::VisionSeparable,
            seed,
        )),
        seed,
        ..RunConfig::default()
    };
    let data = load_run_data(&config)?;
    let model = Model::init(&config.model_config(data.vocab.size()), seed)?;
    let (_, tensors) = sample_training_episode(&data, &config, 0, 0)?;

    let eval_model = |m: &Model| -> f64 {
        let mut tape = Tape::new();
        let mv = bind_model(&mut tape, m);
        let out = episode_loss_graph(&mut tape, &mv, m, &tensors).expect("forward");
        tape.value(out.total)[(0, 0)]
    };

    let mut tape = Tape::new();
    let mv = bind_model(&mut tape, &model);
    let out = episode_loss_graph(&mut tape, &mv, &model, &tensors)?;
    let grads = tape.backward(out.total)?;
    let named = named_gradients(&tape, &grads, &mv);

    let mut worst: f64 = 0.0;
    let mut names = Vec::new();
    model.visit_params(&mut |n, _| names.push(n.to_string()));
    for name in names {
        let analytic = &named[&name];
        // Probe a few coordinates per tensor.
        let coords: Vec<(usize, usize)> = [(0, 0), (analytic.nrows() - 1, analytic.ncols() - 1)]
            .into_iter()
            .collect();
        for (i, j) in coords {
            let probe = |delta: f64| -> f64 {
                let mut m = model.clone();
                m.visit_params_mut(&mut |n, v| {
                    if n == name {
                        v[(i, j)] += delta;
                    }
                });
                eval_model(&m)
            };
            let fd = (probe(FD_EPSILON) - probe(-FD_EPSILON)) / (2.0 * FD_EPSILON);
            worst = worst.max(rel_err(analytic[(i, j)], fd));
        }
    }
    Ok(worst)
}

/// Runs the selected gradient check. Selectors: `aggregate`,
/// `rectification_loss`, `task_encoding`, `full`.
pub fn gradcheck(selector: &str, seed: u64) -> Result<GradcheckReport> {
    let (instances, max_rel_err, threshold) = match selector {
        "aggregate" => (20, check_aggregate(seed, 20), DEFAULT_THRESHOLD),
        "rectification_loss" => (20, check_rectification(seed, 20), DEFAULT_THRESHOLD),
        "task_encoding" => (20, check_task_encoding(seed, 20), LINEAR_THRESHOLD),
        "full" => (1, check_full_model(seed)?, DEFAULT_THRESHOLD),
        other => return Err(CoreError::UnknownModule(other.to_string())),
    };
    Ok(GradcheckReport {
        module: selector.to_string(),
        instances,
        max_rel_err,
        threshold,
        pass: max_rel_err <= threshold,
    })
}
