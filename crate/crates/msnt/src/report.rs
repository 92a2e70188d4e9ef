//! Report assembly: loss-trace CSV I/O, architecture comparison tables,
//! the MI sweep, the scaling grid, and minimal internally generated SVG
//! line plots (CSV is the contract; plots are a convenience).

use std::io::{BufRead, Write};
use std::path::Path;
use std::time::Instant;

use thiserror::Error;

use crate::data::{Target, TaskKind};
use crate::models::{count_flops, Model, ModelConfig, SetPairBatch};
use crate::oracles::{gaussian_mi_closed_form, ksg_mi};
use crate::rng::derived_rng;
use crate::tensor::{Mask, Tensor};
use crate::train::{predict, TraceRow, TrainError};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad trace row: {0}")]
    Parse(String),
    #[error(transparent)]
    Train(#[from] TrainError),
}

pub type Result<T> = std::result::Result<T, ReportError>;

pub const TRACE_HEADER: &str = "step,split,metric,value,task,arch,seed";

pub fn write_trace_csv(path: &Path, rows: &[TraceRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{TRACE_HEADER}")?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{},{},{}",
            r.step, r.split, r.metric, r.value, r.task, r.arch, r.seed
        )?;
    }
    Ok(())
}

pub fn read_trace_csv(path: &Path) -> Result<Vec<TraceRow>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut rows = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if i == 0 {
            if line != TRACE_HEADER {
                return Err(ReportError::Parse(format!("bad header: {line}")));
            }
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 7 {
            return Err(ReportError::Parse(line));
        }
        rows.push(TraceRow {
            step: parts[0].parse().map_err(|_| ReportError::Parse(line.clone()))?,
            split: parts[1].to_string(),
            metric: parts[2].to_string(),
            value: parts[3].parse().map_err(|_| ReportError::Parse(line.clone()))?,
            task: parts[4].to_string(),
            arch: parts[5].to_string(),
            seed: parts[6].parse().map_err(|_| ReportError::Parse(line.clone()))?,
        });
    }
    Ok(rows)
}

// -------------------------------------------------------------------- table

/// One table cell: mean and standard deviation over trials.
#[derive(Debug, Clone, Copy)]
pub struct Cell {
    pub mean: f64,
    pub std: f64,
    pub trials: usize,
}

pub fn cell_from_values(vals: &[f64]) -> Cell {
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Cell {
        mean,
        std: var.sqrt(),
        trials: vals.len(),
    }
}

/// Format an architecture-by-dimension comparison as a markdown table with
/// `mean ± std` cells.
pub fn format_table(
    title: &str,
    col_names: &[String],
    rows: &[(String, Vec<Option<Cell>>)],
) -> String {
    let mut out = format!("# {title}\n\n| arch |");
    for c in col_names {
        out.push_str(&format!(" {c} |"));
    }
    out.push_str("\n|---|");
    for _ in col_names {
        out.push_str("---|");
    }
    out.push('\n');
    for (name, cells) in rows {
        out.push_str(&format!("| {name} |"));
        for c in cells {
            match c {
                Some(c) => out.push_str(&format!(" {:.4} ± {:.4} |", c.mean, c.std)),
                None => out.push_str(" — |"),
            }
        }
        out.push('\n');
    }
    out
}

/// Final eval value of a trace (last row with split == "eval").
pub fn final_eval(rows: &[TraceRow]) -> Option<&TraceRow> {
    rows.iter().rev().find(|r| r.split == "eval")
}

// ----------------------------------------------------------------- mi curve

#[derive(Debug, Clone)]
pub struct MiCurvePoint {
    pub rho: f64,
    pub truth: f64,
    pub model: f64,
    pub ksg: f64,
}

/// Sweep the correlation grid with fresh sample sets per point; the model
/// column comes from the given trained model, the ksg column from the
/// classical estimator on the same samples.
pub fn mi_curve(
    model: &mut Model<f32>,
    d: usize,
    grid: &[f64],
    set_size: usize,
    ksg_k: usize,
    seed: u64,
) -> Result<Vec<MiCurvePoint>> {
    let mut points = Vec::with_capacity(grid.len());
    for (i, &rho) in grid.iter().enumerate() {
        let ex = remake_mi_with_rho(d, rho, set_size, seed, i as u64);
        let truth = gaussian_mi_closed_form(rho, d);
        let est = ksg_mi(&ex.x, &ex.y, ksg_k).map_err(TrainError::Oracle)?;
        let preds = predict(model, std::slice::from_ref(&ex))?;
        points.push(MiCurvePoint {
            rho,
            truth,
            model: preds[0][0],
            ksg: est.value,
        });
    }
    Ok(points)
}

fn remake_mi_with_rho(
    d: usize,
    rho: f64,
    n: usize,
    seed: u64,
    index: u64,
) -> crate::data::TaskExample {
    use rand_distr::{Distribution, StandardNormal};
    let rng = &mut derived_rng(seed, "mi-curve/samples", index);
    let c = (1.0 - rho * rho).sqrt();
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let x: Vec<f64> = (0..d)
            .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
            .collect();
        let y: Vec<f64> = x
            .iter()
            .map(|&xi| {
                rho * xi
                    + c * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
            })
            .collect();
        xs.extend_from_slice(&x);
        ys.extend_from_slice(&y);
    }
    crate::data::TaskExample {
        x: crate::data::SetSample { n, d, data: xs },
        y: crate::data::SetSample { n, d, data: ys },
        target: Target::Value(gaussian_mi_closed_form(rho, d)),
        task: TaskKind::Mi,
        meta: crate::data::ExampleMeta {
            rho: Some(rho),
            ..Default::default()
        },
        x_params: None,
        y_params: None,
    }
}

pub fn write_mi_curve_csv(path: &Path, points: &[MiCurvePoint]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "rho,truth,model,ksg")?;
    for p in points {
        writeln!(f, "{},{},{},{}", p.rho, p.truth, p.model, p.ksg)?;
    }
    Ok(())
}

// ------------------------------------------------------------------ scaling

#[derive(Debug, Clone)]
pub struct ScalingPoint {
    pub arch: String,
    pub n_plus_m: usize,
    pub d: usize,
    pub macs: f64,
    pub wall_ms: f64,
}

/// Analytic MAC counts plus a timed forward pass over a grid of set sizes.
pub fn scaling_grid(
    cfgs: &[ModelConfig],
    sizes: &[usize],
    d: usize,
    seed: u64,
) -> Result<Vec<ScalingPoint>> {
    let mut out = Vec::new();
    for cfg in cfgs {
        let mut model: Model<f32> =
            Model::new(cfg.clone(), seed).map_err(TrainError::Model)?;
        for &total in sizes {
            let n = total / 2;
            let m = total - n;
            let macs = count_flops(cfg, n, m).total();
            let rng = &mut derived_rng(seed, "scaling", total as u64);
            let x = Tensor::<f32>::rand_uniform(&[1, n, d], -1.0, 1.0, rng);
            let y = Tensor::<f32>::rand_uniform(&[1, m, d], -1.0, 1.0, rng);
            let batch = SetPairBatch {
                x,
                y,
                x_mask: Mask::all_true(&[1, n]),
                y_mask: Mask::all_true(&[1, m]),
            };
            let start = Instant::now();
            model.forward(&batch).map_err(TrainError::Model)?;
            let wall_ms = start.elapsed().as_secs_f64() * 1e3;
            out.push(ScalingPoint {
                arch: cfg.arch.name().to_string(),
                n_plus_m: total,
                d,
                macs,
                wall_ms,
            });
        }
    }
    Ok(out)
}

pub fn write_scaling_csv(path: &Path, points: &[ScalingPoint]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "arch,n_plus_m,d,macs,wall_ms")?;
    for p in points {
        writeln!(
            f,
            "{},{},{},{},{}",
            p.arch, p.n_plus_m, p.d, p.macs, p.wall_ms
        )?;
    }
    Ok(())
}

// --------------------------------------------------------------------- SVG

/// Minimal SVG line plot: one polyline per named series, auto-scaled axes.
pub fn svg_line_plot(
    path: &Path,
    title: &str,
    series: &[(String, Vec<(f64, f64)>)],
) -> Result<()> {
    const W: f64 = 640.0;
    const H: f64 = 420.0;
    const PAD: f64 = 50.0;
    let all: Vec<(f64, f64)> = series.iter().flat_map(|(_, p)| p.iter().copied()).collect();
    if all.is_empty() {
        return Err(ReportError::Parse("empty plot".into()));
    }
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in &all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if (x1 - x0).abs() < 1e-12 {
        x1 = x0 + 1.0;
    }
    if (y1 - y0).abs() < 1e-12 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{title}</text>\n",
        W / 2.0
    );
    svg.push_str(&format!(
        "<line x1=\"{PAD}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{}\" stroke=\"black\"/>\n",
        H - PAD,
        W - PAD,
        H - PAD,
        H - PAD
    ));
    svg.push_str(&format!(
        "<text x=\"{PAD}\" y=\"{}\" font-size=\"10\">{:.3}</text>\n\
         <text x=\"{}\" y=\"{}\" font-size=\"10\" text-anchor=\"end\">{:.3}</text>\n\
         <text x=\"10\" y=\"{}\" font-size=\"10\">{:.3}</text>\n\
         <text x=\"10\" y=\"{PAD}\" font-size=\"10\">{:.3}</text>\n",
        H - PAD + 14.0,
        x0,
        W - PAD,
        H - PAD + 14.0,
        x1,
        H - PAD,
        y0,
        y1
    ));
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = colors[i % colors.len()];
        let path_d: Vec<String> = pts
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            path_d.join(" ")
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" fill=\"{color}\">{name}</text>\n",
            W - PAD + 4.0 - 90.0,
            PAD + 16.0 * i as f64
        ));
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg)?;
    Ok(())
}
