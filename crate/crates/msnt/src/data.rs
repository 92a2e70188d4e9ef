//! Synthetic task generators: Gaussian mixtures with LKJ-correlated
//! covariances, componentwise-correlated Gaussian pairs, whitening, and the
//! four desk-scale tasks (KL regression, mutual information, same-source
//! distinguishability, shared-class counting).
//!
//! All generators are deterministic given (seed, example index).

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::{Beta, Distribution, LogNormal, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::SetPairBatch;
use crate::rng::derived_rng;
use crate::scalar::Scalar;
use crate::tensor::{Mask, Tensor};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("covariance sampling failed after {0} retries")]
    CovarianceRetries(usize),
    #[error("snapshot i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("snapshot format: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Kl,
    Mi,
    Distinguish,
    CountShared,
}

impl TaskKind {
    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::Kl => "kl",
            TaskKind::Mi => "mi",
            TaskKind::Distinguish => "distinguish",
            TaskKind::CountShared => "count",
        }
    }

    pub fn parse(s: &str) -> Option<TaskKind> {
        match s {
            "kl" => Some(TaskKind::Kl),
            "mi" => Some(TaskKind::Mi),
            "distinguish" => Some(TaskKind::Distinguish),
            "count" | "count_shared" => Some(TaskKind::CountShared),
            _ => None,
        }
    }
}

// ----------------------------------------------------------------- mixtures

/// A Gaussian mixture: weights on the simplex, one mean and covariance
/// Cholesky factor per component.
#[derive(Debug, Clone)]
pub struct GmmParams {
    pub k: usize,
    pub d: usize,
    pub weights: Vec<f64>,
    pub means: Vec<DVector<f64>>,
    pub cov_chol: Vec<DMatrix<f64>>,
    /// Random identity tag; two sets drawn from the same mixture share it.
    pub id: u64,
}

/// Correlation matrix from the LKJ distribution, sampled with the onion
/// method.
pub fn sample_lkj(d: usize, eta: f64, rng: &mut impl Rng) -> DMatrix<f64> {
    let mut c = DMatrix::identity(1, 1);
    if d == 1 {
        return c;
    }
    let mut beta = eta + (d as f64 - 2.0) / 2.0;
    let b = Beta::new(beta, beta).expect("valid Beta");
    let r12: f64 = 2.0 * b.sample(rng) - 1.0;
    c = DMatrix::from_row_slice(2, 2, &[1.0, r12, r12, 1.0]);
    for k in 3..=d {
        beta -= 0.5;
        let y: f64 = Beta::new((k as f64 - 1.0) / 2.0, beta)
            .expect("valid Beta")
            .sample(rng);
        // uniform unit vector on the (k-2)-sphere
        let mut u = DVector::from_fn(k - 1, |_, _| {
            <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
        });
        u /= u.norm().max(1e-300);
        let a = Cholesky::new(c.clone()).expect("correlation PD").l();
        let w = a * (u * y.sqrt());
        let mut next = DMatrix::identity(k, k);
        next.view_mut((0, 0), (k - 1, k - 1)).copy_from(&c);
        for i in 0..k - 1 {
            next[(i, k - 1)] = w[i];
            next[(k - 1, i)] = w[i];
        }
        c = next;
    }
    c
}

/// Sample mixture parameters: k ~ Uniform{1..10}, Dirichlet(1) weights,
/// means Uniform(-3,3)^d, covariance D·C·D with C ~ LKJ(eta=5) and D the
/// diagonal of LogNormal(0, 0.3) standard deviations.
pub fn sample_gmm_params(d: usize, rng: &mut impl Rng) -> Result<GmmParams> {
    let k = rng.gen_range(1..=10);
    // Dirichlet(1,...,1) via normalized Exp(1) draws
    let mut weights: Vec<f64> = (0..k).map(|_| -rng.gen::<f64>().max(1e-300).ln()).collect();
    let s: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= s);

    let unif = Uniform::new(-3.0, 3.0);
    let logn = LogNormal::new(0.0, 0.3).expect("valid LogNormal");
    let mut means = Vec::with_capacity(k);
    let mut cov_chol = Vec::with_capacity(k);
    for _ in 0..k {
        means.push(DVector::from_fn(d, |_, _| unif.sample(rng)));
        let mut chol = None;
        for _attempt in 0..10 {
            let c = sample_lkj(d, 5.0, rng);
            let sd = DVector::from_fn(d, |_, _| logn.sample(rng));
            let mut sigma = c;
            for i in 0..d {
                for j in 0..d {
                    sigma[(i, j)] *= sd[i] * sd[j];
                }
            }
            if let Some(ch) = Cholesky::new(sigma) {
                chol = Some(ch.l());
                break;
            }
        }
        cov_chol.push(chol.ok_or(DataError::CovarianceRetries(10))?);
    }
    Ok(GmmParams {
        k,
        d,
        weights,
        means,
        cov_chol,
        id: rng.gen(),
    })
}

impl GmmParams {
    pub fn sample(&self, rng: &mut impl Rng) -> DVector<f64> {
        let mut u: f64 = rng.gen();
        let mut comp = self.k - 1;
        for (j, w) in self.weights.iter().enumerate() {
            if u < *w {
                comp = j;
                break;
            }
            u -= w;
        }
        let z = DVector::from_fn(self.d, |_, _| {
            <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
        });
        &self.means[comp] + &self.cov_chol[comp] * z
    }

    pub fn sample_n(&self, n: usize, rng: &mut impl Rng) -> Vec<DVector<f64>> {
        (0..n).map(|_| self.sample(rng)).collect()
    }
}

/// Log density of a mixture at `x`, via log-sum-exp over components.
pub fn gmm_log_density(p: &GmmParams, x: &DVector<f64>) -> f64 {
    let d = p.d as f64;
    let mut terms = Vec::with_capacity(p.k);
    for j in 0..p.k {
        let l = &p.cov_chol[j];
        let diff = x - &p.means[j];
        let z = l
            .solve_lower_triangular(&diff)
            .expect("Cholesky factor has positive diagonal");
        let log_det = (0..p.d).map(|i| l[(i, i)].ln()).sum::<f64>();
        let log_n = -0.5 * d * (2.0 * std::f64::consts::PI).ln() - log_det - 0.5 * z.norm_squared();
        terms.push(p.weights[j].max(1e-300).ln() + log_n);
    }
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

// ---------------------------------------------------------------- whitening

/// Whiten the pooled sample: subtract the joint mean and multiply by the
/// inverse symmetric square root of the joint covariance. Near-singular
/// covariances get a 1e-6 ridge.
pub fn whiten_pair(x: &[DVector<f64>], y: &[DVector<f64>]) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
    let d = x[0].len();
    let n = (x.len() + y.len()) as f64;
    let mut mean = DVector::zeros(d);
    for v in x.iter().chain(y.iter()) {
        mean += v;
    }
    mean /= n;
    let mut cov = DMatrix::zeros(d, d);
    for v in x.iter().chain(y.iter()) {
        let c = v - &mean;
        cov += &c * c.transpose();
    }
    cov /= n;
    let eig = SymmetricEigen::new(cov);
    let ridge = if eig.eigenvalues.iter().any(|&l| l < 1e-12) {
        1e-6
    } else {
        0.0
    };
    let mut inv_sqrt = DMatrix::zeros(d, d);
    let q = &eig.eigenvectors;
    for i in 0..d {
        let s = 1.0 / (eig.eigenvalues[i] + ridge).sqrt();
        let qi = q.column(i);
        inv_sqrt += s * &qi * qi.transpose();
    }
    let map = |v: &DVector<f64>| &inv_sqrt * (v - &mean);
    (x.iter().map(map).collect(), y.iter().map(map).collect())
}

// ----------------------------------------------------------------- examples

/// One set as a flat row-major `n x d` matrix.
#[derive(Debug, Clone)]
pub struct SetSample {
    pub n: usize,
    pub d: usize,
    pub data: Vec<f64>,
}

impl SetSample {
    pub fn from_rows(rows: &[DVector<f64>]) -> SetSample {
        let n = rows.len();
        let d = rows[0].len();
        let mut data = Vec::with_capacity(n * d);
        for r in rows {
            data.extend(r.iter().cloned());
        }
        SetSample { n, d, data }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }
}

#[derive(Debug, Clone)]
pub enum Target {
    Value(f64),
    Class(usize),
}

#[derive(Debug, Clone, Default)]
pub struct ExampleMeta {
    pub seed: u64,
    pub index: u64,
    /// Identity tags of the source distributions; equal tags mean the two
    /// sets were drawn from the same distribution.
    pub x_source: u64,
    pub y_source: u64,
    pub rho: Option<f64>,
    pub x_classes: Vec<usize>,
    pub y_classes: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct TaskExample {
    pub x: SetSample,
    pub y: SetSample,
    pub target: Target,
    pub task: TaskKind,
    pub meta: ExampleMeta,
    /// Source mixtures, kept for oracle re-estimation of targets.
    pub x_params: Option<GmmParams>,
    pub y_params: Option<GmmParams>,
}

/// KL task: two mixtures, own-sample Monte Carlo target (computed before
/// whitening, under which the divergence is invariant).
pub fn make_kl_example(d: usize, rng: &mut impl Rng) -> Result<TaskExample> {
    make_kl_example_sized(d, 100, 150, rng)
}

pub fn make_kl_example_sized(
    d: usize,
    min_n: usize,
    max_n: usize,
    rng: &mut impl Rng,
) -> Result<TaskExample> {
    let px = sample_gmm_params(d, rng)?;
    let py = sample_gmm_params(d, rng)?;
    let nx = rng.gen_range(min_n..=max_n);
    let ny = rng.gen_range(min_n..=max_n);
    let xs = px.sample_n(nx, rng);
    let ys = py.sample_n(ny, rng);
    let target = xs
        .iter()
        .map(|x| gmm_log_density(&px, x) - gmm_log_density(&py, x))
        .sum::<f64>()
        / nx as f64;
    let (xw, yw) = whiten_pair(&xs, &ys);
    Ok(TaskExample {
        x: SetSample::from_rows(&xw),
        y: SetSample::from_rows(&yw),
        target: Target::Value(target),
        task: TaskKind::Kl,
        meta: ExampleMeta {
            x_source: px.id,
            y_source: py.id,
            ..Default::default()
        },
        x_params: Some(px),
        y_params: Some(py),
    })
}

/// Mutual-information task: standardized Gaussian marginals with a shared
/// componentwise correlation; target is the closed-form MI in nats.
pub fn make_mi_example(d: usize, rng: &mut impl Rng) -> Result<TaskExample> {
    let rho: f64 = rng.gen_range(-1.0..1.0);
    let n = rng.gen_range(100..=150);
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    let c = (1.0 - rho * rho).sqrt();
    for _ in 0..n {
        let x = DVector::from_fn(d, |_, _| {
            <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
        });
        let z = DVector::from_fn(d, |_, _| {
            <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
        });
        ys.push(rho * &x + c * z);
        xs.push(x);
    }
    let target = -(d as f64 / 2.0) * (1.0 - rho * rho).ln();
    Ok(TaskExample {
        x: SetSample::from_rows(&xs),
        y: SetSample::from_rows(&ys),
        target: Target::Value(target),
        task: TaskKind::Mi,
        meta: ExampleMeta {
            rho: Some(rho),
            ..Default::default()
        },
        x_params: None,
        y_params: None,
    })
}

/// Distinguishability task: with probability one half both sets come from
/// the same mixture (class 1), otherwise from independent mixtures (class 0).
pub fn make_distinguish_example(d: usize, rng: &mut impl Rng) -> Result<TaskExample> {
    let same: bool = rng.gen();
    let px = sample_gmm_params(d, rng)?;
    let py = if same { px.clone() } else { sample_gmm_params(d, rng)? };
    let nx = rng.gen_range(10..=30);
    let ny = rng.gen_range(10..=30);
    let xs = px.sample_n(nx, rng);
    let ys = py.sample_n(ny, rng);
    Ok(TaskExample {
        x: SetSample::from_rows(&xs),
        y: SetSample::from_rows(&ys),
        target: Target::Class(same as usize),
        task: TaskKind::Distinguish,
        meta: ExampleMeta {
            x_source: px.id,
            y_source: py.id,
            ..Default::default()
        },
        x_params: Some(px),
        y_params: Some(py),
    })
}

/// Shared-class counting analogue: noisy copies of class prototypes; the
/// label is the number of distinct classes present in both sets.
pub fn make_count_shared_example(
    n_classes: usize,
    d: usize,
    rng: &mut impl Rng,
) -> Result<TaskExample> {
    let unif = Uniform::new(-3.0, 3.0);
    let protos: Vec<DVector<f64>> = (0..n_classes)
        .map(|_| DVector::from_fn(d, |_, _| unif.sample(rng)))
        .collect();
    let draw_set = |rng: &mut dyn rand::RngCore| {
        let n = rng.gen_range(6..=10);
        let mut rows = Vec::with_capacity(n);
        let mut classes = Vec::with_capacity(n);
        for _ in 0..n {
            let c = rng.gen_range(0..n_classes);
            classes.push(c);
            let noise = DVector::from_fn(d, |_, _| {
                0.1 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
            });
            rows.push(&protos[c] + noise);
        }
        (rows, classes)
    };
    let (xs, xc) = draw_set(rng);
    let (ys, yc) = draw_set(rng);
    let shared = (0..n_classes)
        .filter(|c| xc.contains(c) && yc.contains(c))
        .count();
    Ok(TaskExample {
        x: SetSample::from_rows(&xs),
        y: SetSample::from_rows(&ys),
        target: Target::Class(shared),
        task: TaskKind::CountShared,
        meta: ExampleMeta {
            x_classes: xc,
            y_classes: yc,
            ..Default::default()
        },
        x_params: None,
        y_params: None,
    })
}

// ------------------------------------------------------------------ batches

#[derive(Debug, Clone)]
pub struct GenConfig {
    pub task: TaskKind,
    pub dim: usize,
    /// When set, the per-batch dimension is drawn uniformly from this
    /// inclusive range (dimension-equivariant training).
    pub dim_range: Option<(usize, usize)>,
    pub n_classes: usize,
    pub seed: u64,
}

impl GenConfig {
    pub fn new(task: TaskKind, dim: usize, seed: u64) -> GenConfig {
        GenConfig {
            task,
            dim,
            dim_range: None,
            n_classes: 10,
            seed,
        }
    }
}

pub fn generate_example(cfg: &GenConfig, d: usize, index: u64) -> Result<TaskExample> {
    let tag = format!("data/{}", cfg.task.name());
    let rng = &mut derived_rng(cfg.seed, &tag, index);
    let mut ex = match cfg.task {
        TaskKind::Kl => make_kl_example(d, rng)?,
        TaskKind::Mi => make_mi_example(d, rng)?,
        TaskKind::Distinguish => make_distinguish_example(d, rng)?,
        TaskKind::CountShared => make_count_shared_example(cfg.n_classes, d, rng)?,
    };
    ex.meta.seed = cfg.seed;
    ex.meta.index = index;
    Ok(ex)
}

#[derive(Debug, Clone)]
pub enum Targets {
    Values(Vec<f64>),
    Classes(Vec<usize>),
}

#[derive(Debug, Clone)]
pub struct Batch<E: Scalar> {
    pub pair: SetPairBatch<E>,
    pub targets: Targets,
    pub examples: Vec<TaskExample>,
}

/// Deterministic batch `batch_index` of the stream defined by `cfg`:
/// examples are padded to the largest set in the batch with zero rows and
/// prefix masks.
pub fn generate_batch<E: Scalar>(
    cfg: &GenConfig,
    batch_index: u64,
    batch_size: usize,
) -> Result<Batch<E>> {
    let d = match cfg.dim_range {
        Some((lo, hi)) => {
            let rng = &mut derived_rng(cfg.seed, "data/dim", batch_index);
            rng.gen_range(lo..=hi)
        }
        None => cfg.dim,
    };
    let base = batch_index * batch_size as u64;
    let examples: Vec<TaskExample> = (0..batch_size)
        .map(|i| generate_example(cfg, d, base + i as u64))
        .collect::<Result<_>>()?;
    Ok(assemble_batch(examples))
}

pub fn assemble_batch<E: Scalar>(examples: Vec<TaskExample>) -> Batch<E> {
    let b = examples.len();
    let d = examples[0].x.d;
    let n_max = examples.iter().map(|e| e.x.n).max().unwrap();
    let m_max = examples.iter().map(|e| e.y.n).max().unwrap();
    let mut x = Tensor::zeros(&[b, n_max, d]);
    let mut y = Tensor::zeros(&[b, m_max, d]);
    let mut xm = vec![false; b * n_max];
    let mut ym = vec![false; b * m_max];
    for (i, ex) in examples.iter().enumerate() {
        for r in 0..ex.x.n * d {
            x.data[i * n_max * d + r] = E::from_f64(ex.x.data[r]);
        }
        for r in 0..ex.x.n {
            xm[i * n_max + r] = true;
        }
        for r in 0..ex.y.n * d {
            y.data[i * m_max * d + r] = E::from_f64(ex.y.data[r]);
        }
        for r in 0..ex.y.n {
            ym[i * m_max + r] = true;
        }
    }
    let targets = match examples[0].target {
        Target::Value(_) => Targets::Values(
            examples
                .iter()
                .map(|e| match e.target {
                    Target::Value(v) => v,
                    Target::Class(c) => c as f64,
                })
                .collect(),
        ),
        Target::Class(_) => Targets::Classes(
            examples
                .iter()
                .map(|e| match e.target {
                    Target::Class(c) => c,
                    Target::Value(_) => 0,
                })
                .collect(),
        ),
    };
    Batch {
        pair: SetPairBatch {
            x,
            y,
            x_mask: Mask::new(vec![b, n_max], xm),
            y_mask: Mask::new(vec![b, m_max], ym),
        },
        targets,
        examples,
    }
}

// ----------------------------------------------------------------- snapshot

const SNAP_MAGIC: &[u8; 4] = b"MSND";

/// Write a dataset snapshot: header (task, d, count, seed), then per example
/// the two flat f32 sets and the target.
pub fn write_snapshot(path: &std::path::Path, cfg: &GenConfig, examples: &[TaskExample]) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(SNAP_MAGIC)?;
    let name = cfg.task.name().as_bytes();
    f.write_all(&(name.len() as u32).to_le_bytes())?;
    f.write_all(name)?;
    f.write_all(&(cfg.dim as u32).to_le_bytes())?;
    f.write_all(&(examples.len() as u32).to_le_bytes())?;
    f.write_all(&cfg.seed.to_le_bytes())?;
    for ex in examples {
        for set in [&ex.x, &ex.y] {
            f.write_all(&(set.n as u32).to_le_bytes())?;
            f.write_all(&(set.d as u32).to_le_bytes())?;
            for v in &set.data {
                f.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
        let t = match ex.target {
            Target::Value(v) => v as f32,
            Target::Class(c) => c as f32,
        };
        f.write_all(&t.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_snapshot(path: &std::path::Path) -> Result<(String, usize, u64, Vec<(SetSample, SetSample, f64)>)> {
    use std::io::Read;
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != SNAP_MAGIC {
        return Err(DataError::Format("bad snapshot magic".into()));
    }
    let mut u32b = [0u8; 4];
    let mut u64b = [0u8; 8];
    f.read_exact(&mut u32b)?;
    let mut name = vec![0u8; u32::from_le_bytes(u32b) as usize];
    f.read_exact(&mut name)?;
    let task = String::from_utf8(name).map_err(|_| DataError::Format("task name".into()))?;
    f.read_exact(&mut u32b)?;
    let d = u32::from_le_bytes(u32b) as usize;
    f.read_exact(&mut u32b)?;
    let count = u32::from_le_bytes(u32b) as usize;
    f.read_exact(&mut u64b)?;
    let seed = u64::from_le_bytes(u64b);
    let read_set = |f: &mut dyn Read| -> Result<SetSample> {
        let mut u32b = [0u8; 4];
        f.read_exact(&mut u32b)?;
        let n = u32::from_le_bytes(u32b) as usize;
        f.read_exact(&mut u32b)?;
        let d = u32::from_le_bytes(u32b) as usize;
        let mut data = Vec::with_capacity(n * d);
        let mut f32b = [0u8; 4];
        for _ in 0..n * d {
            f.read_exact(&mut f32b)?;
            data.push(f32::from_le_bytes(f32b) as f64);
        }
        Ok(SetSample { n, d, data })
    };
    let mut examples = Vec::with_capacity(count);
    for _ in 0..count {
        let x = read_set(&mut f)?;
        let y = read_set(&mut f)?;
        let mut f32b = [0u8; 4];
        f.read_exact(&mut f32b)?;
        examples.push((x, y, f32::from_le_bytes(f32b) as f64));
    }
    Ok((task, d, seed, examples))
}
