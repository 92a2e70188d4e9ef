//! Training loops, losses, and the evaluation protocol.
//!
//! Training streams freshly generated batches (there is no fixed epoch set)
//! and is fully deterministic given (config, seed). Evaluation draws its
//! examples from a seed stream disjoint from training.

use thiserror::Error;

use crate::adam::{AdamConfig, AdamState, OptimError};
use crate::data::{
    generate_batch, generate_example, Batch, DataError, GenConfig, Target, TaskKind,
};
use crate::graph::Var;
use crate::models::{Model, ModelConfig, ModelError, OutputKind};
use crate::oracles::{knn_kl, mc_kl, OracleError};
use crate::rng::derived_rng;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at step {step} (seed {seed}, batch {step} reproducible)")]
    NonFinite { step: u64, seed: u64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Seed for the evaluation example stream, fixed and independent of any
/// training seed so all models of a task share one eval set.
pub const EVAL_SEED: u64 = 74755;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub task: TaskKind,
    pub model: ModelConfig,
    pub batch_size: usize,
    pub n_batches: u64,
    pub lr: f64,
    pub seed: u64,
    /// Evaluate every this many steps; 0 disables periodic eval (one final
    /// eval still runs).
    pub eval_every: u64,
    pub eval_examples: usize,
    pub dim: usize,
    pub dim_range: Option<(usize, usize)>,
    pub n_classes: usize,
    /// Optional global gradient-norm clip.
    pub grad_clip: Option<f64>,
    /// Monte Carlo samples per example for oracle KL targets at eval time.
    pub mc_eval_samples: usize,
    /// Invoke the snapshot hook every this many steps; 0 disables it.
    pub snapshot_every: u64,
}

impl TrainConfig {
    pub fn new(task: TaskKind, model: ModelConfig, seed: u64) -> TrainConfig {
        TrainConfig {
            task,
            model,
            batch_size: 64,
            n_batches: 20_000,
            lr: 1e-4,
            seed,
            eval_every: 0,
            eval_examples: 100,
            dim: 2,
            dim_range: None,
            n_classes: 10,
            grad_clip: None,
            mc_eval_samples: 100_000,
            snapshot_every: 0,
        }
    }

    fn gen_config(&self) -> GenConfig {
        GenConfig {
            task: self.task,
            dim: self.dim,
            dim_range: self.dim_range,
            n_classes: self.n_classes,
            seed: self.seed,
        }
    }
}

/// One row of the loss/eval trace CSV
/// (schema: step, split, metric, value, task, arch, seed).
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: u64,
    pub split: String,
    pub metric: String,
    pub value: f64,
    pub task: String,
    pub arch: String,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct EvalResult {
    pub metric: String,
    pub value: f64,
    pub n_examples: usize,
    /// Optional per-bucket breakdown, e.g. by dimension.
    pub buckets: Vec<(String, f64)>,
}

fn loss_for_batch(model: &mut Model<f32>, batch: &Batch<f32>) -> Result<Var> {
    let out = model.forward(&batch.pair)?;
    let g = &mut model.graph;
    let loss = match &batch.targets {
        crate::data::Targets::Values(vs) => {
            let b = vs.len();
            let t: Vec<f32> = vs.iter().map(|&v| v as f32).collect();
            let tv = g.constant(crate::tensor::Tensor::new(vec![b, 1], t));
            let diff = g.sub(out, tv)?;
            let sq = g.mul(diff, diff)?;
            g.mean_all(sq)
        }
        crate::data::Targets::Classes(cs) => match model.cfg.output {
            OutputKind::Logit => {
                let t: Vec<f32> = cs.iter().map(|&c| c as f32).collect();
                g.bce_with_logits(out, &t)?
            }
            _ => g.cross_entropy(out, cs)?,
        },
    };
    Ok(loss)
}

/// Train a fresh model; returns the model and the full loss/eval trace.
pub fn train(cfg: &TrainConfig) -> Result<(Model<f32>, Vec<TraceRow>)> {
    train_with_progress(cfg, |_, _| {})
}

pub fn train_with_progress(
    cfg: &TrainConfig,
    progress: impl FnMut(u64, f64),
) -> Result<(Model<f32>, Vec<TraceRow>)> {
    train_with_hooks(cfg, progress, |_, _| Ok(()))
}

/// Like [`train_with_progress`], but additionally calls `snapshot` every
/// `cfg.snapshot_every` steps with the model and the trace so far, letting
/// callers persist partial results of long runs.
pub fn train_with_hooks(
    cfg: &TrainConfig,
    mut progress: impl FnMut(u64, f64),
    mut snapshot: impl FnMut(&Model<f32>, &[TraceRow]) -> Result<()>,
) -> Result<(Model<f32>, Vec<TraceRow>)> {
    let mut model: Model<f32> = Model::new(cfg.model.clone(), cfg.seed)?;
    let mut opt = AdamState::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let gen = cfg.gen_config();
    let mut trace = Vec::new();
    let task = cfg.task.name().to_string();
    let arch = cfg.model.arch.name().to_string();

    for step in 0..cfg.n_batches {
        let batch = generate_batch::<f32>(&gen, step, cfg.batch_size)?;
        let loss = loss_for_batch(&mut model, &batch)?;
        let lv = model.graph.value(loss).data[0] as f64;
        if !lv.is_finite() {
            return Err(TrainError::NonFinite { step, seed: cfg.seed });
        }
        model.graph.backward(loss)?;
        if let Some(clip) = cfg.grad_clip {
            clip_gradients(&mut model, clip);
        }
        let params: Vec<(String, Var)> = model.params().to_vec();
        opt.step(&mut model.graph, &params)?;
        trace.push(TraceRow {
            step,
            split: "train".into(),
            metric: "loss".into(),
            value: lv,
            task: task.clone(),
            arch: arch.clone(),
            seed: cfg.seed,
        });
        progress(step, lv);
        if cfg.eval_every > 0 && step > 0 && step % cfg.eval_every == 0 {
            let ev = evaluate(&mut model, cfg)?;
            trace.push(TraceRow {
                step,
                split: "eval".into(),
                metric: ev.metric.clone(),
                value: ev.value,
                task: task.clone(),
                arch: arch.clone(),
                seed: cfg.seed,
            });
        }
        if cfg.snapshot_every > 0 && step > 0 && step % cfg.snapshot_every == 0 {
            snapshot(&model, &trace)?;
        }
    }
    let ev = evaluate(&mut model, cfg)?;
    trace.push(TraceRow {
        step: cfg.n_batches,
        split: "eval".into(),
        metric: ev.metric.clone(),
        value: ev.value,
        task,
        arch,
        seed: cfg.seed,
    });
    Ok((model, trace))
}

fn clip_gradients(model: &mut Model<f32>, clip: f64) {
    let params: Vec<Var> = model.params().iter().map(|(_, v)| *v).collect();
    let mut norm2 = 0.0f64;
    for v in &params {
        if let Some(gr) = model.graph.grad(*v) {
            norm2 += gr.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>();
        }
    }
    let norm = norm2.sqrt();
    if norm > clip {
        let s = (clip / norm) as f32;
        for v in &params {
            let scaled: Option<Vec<f32>> = model
                .graph
                .grad(*v)
                .map(|gr| gr.iter().map(|&x| x * s).collect());
            if let Some(sc) = scaled {
                model.graph.set_grad(*v, sc);
            }
        }
    }
}

/// Evaluation examples for a task at a given dimension: a fixed stream
/// shared by every model (and the KNN baseline) of that task.
pub fn eval_examples(
    cfg: &TrainConfig,
) -> Result<Vec<crate::data::TaskExample>> {
    let gen = GenConfig {
        task: cfg.task,
        dim: cfg.dim,
        dim_range: cfg.dim_range,
        n_classes: cfg.n_classes,
        seed: EVAL_SEED,
    };
    (0..cfg.eval_examples as u64)
        .map(|i| {
            let d = match cfg.dim_range {
                Some((lo, hi)) => {
                    use rand::Rng;
                    let rng = &mut derived_rng(EVAL_SEED, "eval/dim", i);
                    rng.gen_range(lo..=hi)
                }
                None => cfg.dim,
            };
            Ok(generate_example(&gen, d, i)?)
        })
        .collect()
}

/// Oracle target for one evaluation example: fresh high-sample Monte Carlo
/// for KL, closed form for MI, the stored label otherwise.
pub fn oracle_target(ex: &crate::data::TaskExample, mc_samples: usize) -> Result<f64> {
    match ex.task {
        TaskKind::Kl => {
            let p = ex.x_params.as_ref().expect("kl example keeps params");
            let q = ex.y_params.as_ref().expect("kl example keeps params");
            let rng = &mut derived_rng(EVAL_SEED, "eval/mc", ex.meta.index);
            Ok(mc_kl(p, q, mc_samples, rng).value)
        }
        TaskKind::Mi => {
            let rho = ex.meta.rho.expect("mi example keeps rho");
            Ok(crate::oracles::gaussian_mi_closed_form(rho, ex.x.d))
        }
        _ => Ok(match ex.target {
            Target::Value(v) => v,
            Target::Class(c) => c as f64,
        }),
    }
}

/// Model predictions over a list of examples, batched by matching dimension.
pub fn predict(
    model: &mut Model<f32>,
    examples: &[crate::data::TaskExample],
) -> Result<Vec<Vec<f64>>> {
    let mut preds = vec![Vec::new(); examples.len()];
    // group indices by input dimension so each forward batch is rectangular
    let mut by_dim: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, ex) in examples.iter().enumerate() {
        by_dim.entry(ex.x.d).or_default().push(i);
    }
    for (_, idxs) in by_dim {
        for chunk in idxs.chunks(32) {
            let exs: Vec<_> = chunk.iter().map(|&i| examples[i].clone()).collect();
            let batch = crate::data::assemble_batch::<f32>(exs);
            let out = model.forward(&batch.pair)?;
            let t = model.graph.value(out);
            let width = t.shape[1];
            for (row, &i) in chunk.iter().enumerate() {
                preds[i] = (0..width).map(|j| t.data[row * width + j] as f64).collect();
            }
        }
    }
    Ok(preds)
}

/// Evaluate on the shared eval stream: MAE against oracle targets for the
/// regression tasks, accuracy for classification.
pub fn evaluate(model: &mut Model<f32>, cfg: &TrainConfig) -> Result<EvalResult> {
    let examples = eval_examples(cfg)?;
    let preds = predict(model, &examples)?;
    match cfg.task {
        TaskKind::Kl | TaskKind::Mi => {
            let mut abs = 0.0;
            for (ex, p) in examples.iter().zip(&preds) {
                let t = oracle_target(ex, cfg.mc_eval_samples)?;
                abs += (p[0] - t).abs();
            }
            Ok(EvalResult {
                metric: "mae".into(),
                value: abs / examples.len() as f64,
                n_examples: examples.len(),
                buckets: Vec::new(),
            })
        }
        TaskKind::Distinguish => {
            let mut correct = 0usize;
            for (ex, p) in examples.iter().zip(&preds) {
                let label = match ex.target {
                    Target::Class(c) => c,
                    Target::Value(_) => unreachable!("distinguish targets are classes"),
                };
                let pred = (p[0] > 0.0) as usize;
                correct += (pred == label) as usize;
            }
            Ok(EvalResult {
                metric: "accuracy".into(),
                value: correct as f64 / examples.len() as f64,
                n_examples: examples.len(),
                buckets: Vec::new(),
            })
        }
        TaskKind::CountShared => {
            let mut correct = 0usize;
            for (ex, p) in examples.iter().zip(&preds) {
                let label = match ex.target {
                    Target::Class(c) => c,
                    Target::Value(_) => unreachable!("count targets are classes"),
                };
                let pred = p
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                correct += (pred == label) as usize;
            }
            Ok(EvalResult {
                metric: "accuracy".into(),
                value: correct as f64 / examples.len() as f64,
                n_examples: examples.len(),
                buckets: Vec::new(),
            })
        }
    }
}

/// MAE of the nearest-neighbour KL baseline over the same eval stream the
/// models use; requires no training.
pub fn knn_baseline_mae(cfg: &TrainConfig, k: usize) -> Result<f64> {
    let examples = eval_examples(cfg)?;
    let mut abs = 0.0;
    for ex in &examples {
        let t = oracle_target(ex, cfg.mc_eval_samples)?;
        let est = knn_kl(&ex.x, &ex.y, k)?;
        abs += (est.value - t).abs();
    }
    Ok(abs / examples.len() as f64)
}
