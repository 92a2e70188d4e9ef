//! Architecture zoo: every set-pair regressor/classifier compared in the
//! experiments, built from the blocks in [`crate::blocks`].
//!
//! All architectures are invariant to independent row permutations of the
//! two input sets. The `multiset_transformer_equi` variant additionally
//! shares weights across input coordinates, so one parameter set accepts
//! inputs of any dimension.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blocks::{
    msab, multichannel_msab, pma, rff_encoder, rn_block, transformer_block, Linear, Merge,
    MsabParams, MultichannelMsabParams, ParamSet, PmaParams, RffEncoderParams, RnBlockParams,
    TransformerBlockParams,
};
use crate::checkpoint::{read_checkpoint, write_checkpoint, CheckpointError, TensorRecord};
use crate::graph::{Graph, Var};
use crate::rng::derived_rng;
use crate::scalar::Scalar;
use crate::tensor::{Mask, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    MultisetTransformer,
    MultisetRn,
    SingleRff,
    SingleRn,
    SingleSt,
    UnionTransformer,
    Pine,
    CrossOnly,
    SumMerge,
    MultisetTransformerEqui,
}

impl Arch {
    pub const ALL: [Arch; 10] = [
        Arch::MultisetTransformer,
        Arch::MultisetRn,
        Arch::SingleRff,
        Arch::SingleRn,
        Arch::SingleSt,
        Arch::UnionTransformer,
        Arch::Pine,
        Arch::CrossOnly,
        Arch::SumMerge,
        Arch::MultisetTransformerEqui,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Arch::MultisetTransformer => "multiset_transformer",
            Arch::MultisetRn => "multiset_rn",
            Arch::SingleRff => "single_rff",
            Arch::SingleRn => "single_rn",
            Arch::SingleSt => "single_st",
            Arch::UnionTransformer => "union_transformer",
            Arch::Pine => "pine",
            Arch::CrossOnly => "cross_only",
            Arch::SumMerge => "sum_merge",
            Arch::MultisetTransformerEqui => "multiset_transformer_equi",
        }
    }

    pub fn parse(s: &str) -> Option<Arch> {
        Arch::ALL.iter().copied().find(|a| a.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputKind {
    Scalar,
    Logit,
    ClassCount,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    pub input_dim: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub d_latent: usize,
    pub d_hidden: usize,
    /// Channel width of the dimension-equivariant variant; ignored elsewhere.
    pub n_channels: usize,
    pub decoder_layers: usize,
    pub output: OutputKind,
    pub n_outputs: usize,
}

impl ModelConfig {
    pub fn new(arch: Arch, input_dim: usize) -> ModelConfig {
        ModelConfig {
            arch,
            input_dim,
            n_blocks: 4,
            n_heads: 4,
            d_latent: 32,
            d_hidden: 64,
            n_channels: 16,
            decoder_layers: 1,
            output: OutputKind::Scalar,
            n_outputs: 1,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.n_blocks == 0 || self.n_outputs == 0 {
            return Err(ModelError::Config("zero-sized model dimension".into()));
        }
        if self.arch == Arch::MultisetTransformerEqui {
            if self.n_channels % self.n_heads != 0 {
                return Err(ModelError::Config(format!(
                    "n_channels {} not divisible by n_heads {}",
                    self.n_channels, self.n_heads
                )));
            }
        } else if self.d_latent % self.n_heads != 0 {
            return Err(ModelError::Config(format!(
                "d_latent {} not divisible by n_heads {}",
                self.d_latent, self.n_heads
            )));
        }
        Ok(())
    }
}

/// One padded batch of set pairs: `x` is `[b, n_max, d]`, `y` is
/// `[b, m_max, d]`, masks mark live rows. Padding rows are zero.
#[derive(Debug, Clone)]
pub struct SetPairBatch<E: Scalar> {
    pub x: Tensor<E>,
    pub y: Tensor<E>,
    pub x_mask: Mask,
    pub y_mask: Mask,
}

/// Relation-network analogue of the multi-set attention block: four pairwise
/// encoders with max pooling, learned merge, residual.
#[derive(Debug, Clone)]
pub struct RnMsabParams {
    pub rn_xx: RnBlockParams,
    pub rn_xy: RnBlockParams,
    pub rn_yx: RnBlockParams,
    pub rn_yy: RnBlockParams,
    pub g_x: Linear,
    pub g_y: Linear,
}

#[derive(Debug, Clone)]
enum Body {
    SetAttention {
        proj: Linear,
        blocks: Vec<MsabParams>,
        pma_x: PmaParams,
        pma_y: PmaParams,
    },
    RelationNet {
        proj: Linear,
        blocks: Vec<RnMsabParams>,
    },
    SingleRff {
        phi: RffEncoderParams,
    },
    SingleRn {
        proj: Linear,
        blocks: Vec<RnBlockParams>,
    },
    SingleSt {
        proj: Linear,
        blocks: Vec<TransformerBlockParams>,
        pma: PmaParams,
    },
    UnionSt {
        proj: Linear,
        blocks: Vec<TransformerBlockParams>,
        pma: PmaParams,
    },
    Pine {
        phi_x: RffEncoderParams,
        phi_y: RffEncoderParams,
    },
    Equi {
        lift: Linear,
        blocks: Vec<MultichannelMsabParams>,
        pma_x: PmaParams,
        pma_y: PmaParams,
    },
}

pub struct Model<E: Scalar> {
    pub graph: Graph<E>,
    pub cfg: ModelConfig,
    params: Vec<(String, Var)>,
    body: Body,
    decoder: Vec<Linear>,
}

impl<E: Scalar> Model<E> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Model<E>> {
        cfg.validate()?;
        let mut g = Graph::new();
        let mut ps = ParamSet::default();
        let rng = &mut derived_rng(seed, "model-init", 0);
        let l = cfg.d_latent;
        let h = cfg.d_hidden;
        let heads = cfg.n_heads;
        let d = cfg.input_dim;

        let body = match cfg.arch {
            Arch::MultisetTransformer | Arch::CrossOnly | Arch::SumMerge => {
                let (merge, cross_only) = match cfg.arch {
                    Arch::CrossOnly => (Merge::Learned, true),
                    Arch::SumMerge => (Merge::Sum, false),
                    _ => (Merge::Learned, false),
                };
                let proj = Linear::init(&mut g, &mut ps, "proj", d, l, rng);
                let blocks = (0..cfg.n_blocks)
                    .map(|i| {
                        MsabParams::init(
                            &mut g,
                            &mut ps,
                            &format!("msab.{i}"),
                            l,
                            h,
                            heads,
                            merge,
                            cross_only,
                            rng,
                        )
                    })
                    .collect::<crate::tensor::Result<Vec<_>>>()?;
                let pma_x = PmaParams::init(&mut g, &mut ps, "pma_x", 1, l, heads, rng)?;
                let pma_y = PmaParams::init(&mut g, &mut ps, "pma_y", 1, l, heads, rng)?;
                Body::SetAttention { proj, blocks, pma_x, pma_y }
            }
            Arch::MultisetRn => {
                let proj = Linear::init(&mut g, &mut ps, "proj", d, l, rng);
                let blocks = (0..cfg.n_blocks)
                    .map(|i| {
                        let p = format!("rnmsab.{i}");
                        RnMsabParams {
                            rn_xx: RnBlockParams::init(&mut g, &mut ps, &format!("{p}.rn_xx"), l, h, l, rng),
                            rn_xy: RnBlockParams::init(&mut g, &mut ps, &format!("{p}.rn_xy"), l, h, l, rng),
                            rn_yx: RnBlockParams::init(&mut g, &mut ps, &format!("{p}.rn_yx"), l, h, l, rng),
                            rn_yy: RnBlockParams::init(&mut g, &mut ps, &format!("{p}.rn_yy"), l, h, l, rng),
                            g_x: Linear::init(&mut g, &mut ps, &format!("{p}.g_x"), 2 * l, l, rng),
                            g_y: Linear::init(&mut g, &mut ps, &format!("{p}.g_y"), 2 * l, l, rng),
                        }
                    })
                    .collect();
                Body::RelationNet { proj, blocks }
            }
            Arch::SingleRff => Body::SingleRff {
                phi: RffEncoderParams::init(&mut g, &mut ps, "phi", d, h, l, rng),
            },
            Arch::SingleRn => {
                let proj = Linear::init(&mut g, &mut ps, "proj", d, l, rng);
                let blocks = (0..cfg.n_blocks)
                    .map(|i| RnBlockParams::init(&mut g, &mut ps, &format!("rn.{i}"), l, h, l, rng))
                    .collect();
                Body::SingleRn { proj, blocks }
            }
            Arch::SingleSt | Arch::UnionTransformer => {
                let proj = Linear::init(&mut g, &mut ps, "proj", d, l, rng);
                let blocks = (0..cfg.n_blocks)
                    .map(|i| {
                        TransformerBlockParams::init(&mut g, &mut ps, &format!("t.{i}"), l, h, heads, rng)
                    })
                    .collect::<crate::tensor::Result<Vec<_>>>()?;
                let pma = PmaParams::init(&mut g, &mut ps, "pma", 1, l, heads, rng)?;
                if cfg.arch == Arch::SingleSt {
                    Body::SingleSt { proj, blocks, pma }
                } else {
                    Body::UnionSt { proj, blocks, pma }
                }
            }
            Arch::Pine => Body::Pine {
                phi_x: RffEncoderParams::init(&mut g, &mut ps, "phi_x", d, h, l, rng),
                phi_y: RffEncoderParams::init(&mut g, &mut ps, "phi_y", d, h, l, rng),
            },
            Arch::MultisetTransformerEqui => {
                let c = cfg.n_channels;
                let lift = Linear::init(&mut g, &mut ps, "lift", 1, c, rng);
                let blocks = (0..cfg.n_blocks)
                    .map(|i| {
                        MultichannelMsabParams::init(
                            &mut g,
                            &mut ps,
                            &format!("mcmsab.{i}"),
                            c,
                            h,
                            heads,
                            rng,
                        )
                    })
                    .collect::<crate::tensor::Result<Vec<_>>>()?;
                let pma_x = PmaParams::init(&mut g, &mut ps, "pma_x", 1, c, heads, rng)?;
                let pma_y = PmaParams::init(&mut g, &mut ps, "pma_y", 1, c, heads, rng)?;
                Body::Equi { lift, blocks, pma_x, pma_y }
            }
        };

        let dec_in = match cfg.arch {
            Arch::UnionTransformer => l,
            Arch::MultisetTransformerEqui => 2 * cfg.n_channels,
            _ => 2 * l,
        };
        let mut decoder = Vec::new();
        let mut cur = dec_in;
        for i in 0..cfg.decoder_layers {
            decoder.push(Linear::init(&mut g, &mut ps, &format!("dec.{i}"), cur, h, rng));
            cur = h;
        }
        decoder.push(Linear::init(
            &mut g,
            &mut ps,
            &format!("dec.{}", cfg.decoder_layers),
            cur,
            cfg.n_outputs,
            rng,
        ));

        g.freeze();
        Ok(Model { graph: g, cfg, params: ps.entries, body, decoder })
    }

    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn n_params(&self) -> usize {
        self.params
            .iter()
            .map(|(_, v)| self.graph.value(*v).numel())
            .sum()
    }

    /// Testing hook: overwrite a named parameter's values.
    pub fn set_param(&mut self, name: &str, data: Tensor<E>) -> Result<()> {
        let var = self
            .params
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| ModelError::Config(format!("no parameter named {name}")))?;
        let cur = self.graph.value(var);
        if cur.shape != data.shape {
            return Err(ModelError::Config(format!(
                "parameter {name}: shape {:?} != {:?}",
                data.shape, cur.shape
            )));
        }
        *self.graph.value_mut(var) = data;
        Ok(())
    }

    pub fn param_value(&self, name: &str) -> Option<&Tensor<E>> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| self.graph.value(*v))
    }

    /// Testing hook: direct access to block parameters.
    pub fn msab_blocks_mut(&mut self) -> Option<&mut Vec<MsabParams>> {
        match &mut self.body {
            Body::SetAttention { blocks, .. } => Some(blocks),
            _ => None,
        }
    }

    /// Run the model on a batch; returns `[b, n_outputs]` raw outputs
    /// (logits for classifier heads). Resets the tape to the parameter
    /// watermark first.
    pub fn forward(&mut self, batch: &SetPairBatch<E>) -> Result<Var> {
        if self.cfg.arch != Arch::MultisetTransformerEqui
            && batch.x.shape[2] != self.cfg.input_dim
        {
            return Err(ModelError::Config(format!(
                "batch dim {} != model input_dim {}",
                batch.x.shape[2], self.cfg.input_dim
            )));
        }
        self.graph.reset();
        let g = &mut self.graph;
        let x = g.constant(batch.x.clone());
        let y = g.constant(batch.y.clone());
        let xm = &batch.x_mask;
        let ym = &batch.y_mask;
        let b = batch.x.shape[0];

        let joint = match &self.body {
            Body::SetAttention { proj, blocks, pma_x, pma_y } => {
                let mut zx = proj.apply(g, x)?;
                let mut zy = proj.apply(g, y)?;
                for blk in blocks {
                    let (nx, ny) = msab(g, blk, zx, zy, xm, ym)?;
                    zx = nx;
                    zy = ny;
                }
                let px = pma(g, pma_x, zx, xm)?;
                let py = pma(g, pma_y, zy, ym)?;
                let px = g.reshape(px, &[b, self.cfg.d_latent])?;
                let py = g.reshape(py, &[b, self.cfg.d_latent])?;
                g.concat(px, py, 1)?
            }
            Body::RelationNet { proj, blocks } => {
                let mut zx = proj.apply(g, x)?;
                let mut zy = proj.apply(g, y)?;
                for blk in blocks {
                    let sx = rn_block(g, &blk.rn_xx, zx, zx, xm)?;
                    let cx = rn_block(g, &blk.rn_xy, zx, zy, ym)?;
                    let sy = rn_block(g, &blk.rn_yy, zy, zy, ym)?;
                    let cy = rn_block(g, &blk.rn_yx, zy, zx, xm)?;
                    let jx = g.concat(sx, cx, 2)?;
                    let jx = blk.g_x.apply(g, jx)?;
                    let jx = g.relu(jx);
                    let jy = g.concat(sy, cy, 2)?;
                    let jy = blk.g_y.apply(g, jy)?;
                    let jy = g.relu(jy);
                    zx = g.add(zx, jx)?;
                    zy = g.add(zy, jy)?;
                }
                let px = masked_max_rows(g, zx, xm)?;
                let py = masked_max_rows(g, zy, ym)?;
                g.concat(px, py, 1)?
            }
            Body::SingleRff { phi } => {
                let px = rff_encoder(g, phi, x, xm)?;
                let py = rff_encoder(g, phi, y, ym)?;
                g.concat(px, py, 1)?
            }
            Body::SingleRn { proj, blocks } => {
                let mut zx = proj.apply(g, x)?;
                let mut zy = proj.apply(g, y)?;
                for blk in blocks {
                    let rx = rn_block(g, blk, zx, zx, xm)?;
                    let ry = rn_block(g, blk, zy, zy, ym)?;
                    zx = g.add(zx, rx)?;
                    zy = g.add(zy, ry)?;
                }
                let px = masked_max_rows(g, zx, xm)?;
                let py = masked_max_rows(g, zy, ym)?;
                g.concat(px, py, 1)?
            }
            Body::SingleSt { proj, blocks, pma: pool } => {
                let mut zx = proj.apply(g, x)?;
                let mut zy = proj.apply(g, y)?;
                for blk in blocks {
                    // residual mirrors the multi-set block with cross terms removed
                    let tx = transformer_block(g, blk, zx, zx, xm)?;
                    let ty = transformer_block(g, blk, zy, zy, ym)?;
                    zx = g.add(zx, tx)?;
                    zy = g.add(zy, ty)?;
                }
                let px = pma(g, pool, zx, xm)?;
                let py = pma(g, pool, zy, ym)?;
                let px = g.reshape(px, &[b, self.cfg.d_latent])?;
                let py = g.reshape(py, &[b, self.cfg.d_latent])?;
                g.concat(px, py, 1)?
            }
            Body::UnionSt { proj, blocks, pma: pool } => {
                let u = g.concat(x, y, 1)?;
                let n = batch.x_mask.shape[1];
                let m = batch.y_mask.shape[1];
                let mut um = Vec::with_capacity(b * (n + m));
                for i in 0..b {
                    um.extend_from_slice(&batch.x_mask.data[i * n..(i + 1) * n]);
                    um.extend_from_slice(&batch.y_mask.data[i * m..(i + 1) * m]);
                }
                let umask = Mask::new(vec![b, n + m], um);
                let mut z = proj.apply(g, u)?;
                for blk in blocks {
                    let t = transformer_block(g, blk, z, z, &umask)?;
                    z = g.add(z, t)?;
                }
                let p = pma(g, pool, z, &umask)?;
                g.reshape(p, &[b, self.cfg.d_latent])?
            }
            Body::Pine { phi_x, phi_y } => {
                let px = rff_encoder(g, phi_x, x, xm)?;
                let py = rff_encoder(g, phi_y, y, ym)?;
                g.concat(px, py, 1)?
            }
            Body::Equi { lift, blocks, pma_x, pma_y } => {
                let d = batch.x.shape[2];
                let n = batch.x.shape[1];
                let m = batch.y.shape[1];
                let c = self.cfg.n_channels;
                let x4 = g.reshape(x, &[b, n, d, 1])?;
                let y4 = g.reshape(y, &[b, m, d, 1])?;
                let mut zx = lift.apply(g, x4)?;
                let mut zy = lift.apply(g, y4)?;
                for blk in blocks {
                    let (nx, ny) = multichannel_msab(g, blk, zx, zy, xm, ym)?;
                    zx = nx;
                    zy = ny;
                }
                // max over the dimension axis: invariant to input dimension
                let all = Mask::all_true(&[1]);
                let mx = g.masked_max(zx, &all, 2, false)?; // [b,n,c]
                let my = g.masked_max(zy, &all, 2, false)?;
                let px = pma(g, pma_x, mx, xm)?;
                let py = pma(g, pma_y, my, ym)?;
                let px = g.reshape(px, &[b, c])?;
                let py = g.reshape(py, &[b, c])?;
                g.concat(px, py, 1)?
            }
        };

        let mut out = joint;
        let n_hidden = self.decoder.len() - 1;
        for (i, lin) in self.decoder.iter().enumerate() {
            out = lin.apply(g, out)?;
            if i < n_hidden {
                out = g.relu(out);
            }
        }
        Ok(out)
    }

    pub fn records(&self) -> Vec<TensorRecord> {
        self.params
            .iter()
            .map(|(name, v)| {
                let t = self.graph.value(*v);
                TensorRecord {
                    name: name.clone(),
                    extents: t.shape.clone(),
                    data: t.data.iter().map(|&x| x.to_f64() as f32).collect(),
                }
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let cfg_json = serde_json::to_string(&self.cfg)
            .map_err(|e| ModelError::Config(format!("config serialization: {e}")))?;
        write_checkpoint(path, &cfg_json, &self.records())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Model<E>> {
        let (cfg_json, records) = read_checkpoint(path)?;
        let cfg: ModelConfig = serde_json::from_str(&cfg_json).map_err(|e| {
            ModelError::Checkpoint(CheckpointError::Malformed(format!(
                "bad model config in checkpoint: {e}"
            )))
        })?;
        let mut model = Model::new(cfg, 0)?;
        model.load_records(&records)?;
        Ok(model)
    }

    pub fn load_records(&mut self, records: &[TensorRecord]) -> Result<()> {
        if records.len() != self.params.len() {
            return Err(ModelError::Config(format!(
                "checkpoint has {} tensors, model has {}",
                records.len(),
                self.params.len()
            )));
        }
        for (rec, (name, var)) in records.iter().zip(&self.params) {
            if &rec.name != name {
                return Err(ModelError::Config(format!(
                    "checkpoint tensor {} does not match parameter {name}",
                    rec.name
                )));
            }
            let shape = rec.extents.clone();
            let want = self.graph.value(*var).shape.clone();
            if shape != want {
                return Err(ModelError::Config(format!(
                    "parameter {name}: checkpoint shape {shape:?} != {want:?}"
                )));
            }
            let data: Vec<E> = rec.data.iter().map(|&x| E::from_f64(x as f64)).collect();
            *self.graph.value_mut(*var) = Tensor::new(shape, data);
        }
        Ok(())
    }
}

/// Max over live set rows: `[b, n, d]` with mask `[b, n]` -> `[b, d]`.
fn masked_max_rows<E: Scalar>(
    g: &mut Graph<E>,
    z: Var,
    mask: &Mask,
) -> crate::tensor::Result<Var> {
    let b = mask.shape[0];
    let n = mask.shape[1];
    let m3 = Mask::new(vec![b, n, 1], mask.data.clone());
    g.masked_max(z, &m3, 1, false)
}

// --------------------------------------------------------------- MAC counts

/// Multiply-accumulate counts for one forward pass on a single set pair,
/// split by term family.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FlopReport {
    /// Attention-score and attention-apply terms (quadratic in set sizes).
    pub attention: f64,
    /// Pairwise relation-encoder terms (quadratic in set sizes).
    pub pairwise: f64,
    /// Everything linear in set sizes, plus the decoder.
    pub pointwise: f64,
}

impl FlopReport {
    pub fn total(&self) -> f64 {
        self.attention + self.pairwise + self.pointwise
    }
}

/// Analytic MAC count for a forward pass with set sizes `n`, `m` and input
/// dimension `cfg.input_dim`.
pub fn count_flops(cfg: &ModelConfig, n: usize, m: usize) -> FlopReport {
    let (n, m) = (n as f64, m as f64);
    let d = cfg.input_dim as f64;
    let l = cfg.d_latent as f64;
    let h = cfg.d_hidden as f64;
    let c = cfg.n_channels as f64;
    let out = cfg.n_outputs as f64;

    let mut r = FlopReport::default();
    let lin = |rows: f64, din: f64, dout: f64| rows * din * dout;
    // transformer block with nq query rows and nkv key rows
    let t_block = |r: &mut FlopReport, nq: f64, nkv: f64| {
        r.pointwise += (2.0 * nq + 2.0 * nkv) * l * l + 2.0 * nq * l * h;
        r.attention += 2.0 * nq * nkv * l;
    };
    let pma_cost = |r: &mut FlopReport, nkv: f64, dm: f64| {
        r.pointwise += (2.0 + 2.0 * nkv) * dm * dm;
        r.attention += 2.0 * nkv * dm;
    };
    let rn_cost = |r: &mut FlopReport, pairs: f64| {
        r.pairwise += pairs * (2.0 * l * h + h * l);
    };
    let phi_cost = |r: &mut FlopReport, rows: f64| {
        r.pointwise += rows * (d * h + h * h + h * l);
    };
    let decoder = |r: &mut FlopReport, din: f64| {
        let mut cur = din;
        for _ in 0..cfg.decoder_layers {
            r.pointwise += lin(1.0, cur, h);
            cur = h;
        }
        r.pointwise += lin(1.0, cur, out);
    };

    match cfg.arch {
        Arch::MultisetTransformer | Arch::SumMerge => {
            r.pointwise += lin(n + m, d, l);
            for _ in 0..cfg.n_blocks {
                t_block(&mut r, n, n);
                t_block(&mut r, n, m);
                t_block(&mut r, m, n);
                t_block(&mut r, m, m);
                if cfg.arch != Arch::SumMerge {
                    r.pointwise += lin(n + m, 2.0 * l, l);
                }
            }
            pma_cost(&mut r, n, l);
            pma_cost(&mut r, m, l);
            decoder(&mut r, 2.0 * l);
        }
        Arch::CrossOnly => {
            r.pointwise += lin(n + m, d, l);
            for _ in 0..cfg.n_blocks {
                t_block(&mut r, n, m);
                t_block(&mut r, m, n);
                r.pointwise += lin(n + m, l, l);
            }
            pma_cost(&mut r, n, l);
            pma_cost(&mut r, m, l);
            decoder(&mut r, 2.0 * l);
        }
        Arch::MultisetRn => {
            r.pointwise += lin(n + m, d, l);
            for _ in 0..cfg.n_blocks {
                rn_cost(&mut r, n * n);
                rn_cost(&mut r, n * m);
                rn_cost(&mut r, m * n);
                rn_cost(&mut r, m * m);
                r.pointwise += lin(n + m, 2.0 * l, l);
            }
            decoder(&mut r, 2.0 * l);
        }
        Arch::SingleRff => {
            phi_cost(&mut r, n + m);
            decoder(&mut r, 2.0 * l);
        }
        Arch::SingleRn => {
            r.pointwise += lin(n + m, d, l);
            for _ in 0..cfg.n_blocks {
                rn_cost(&mut r, n * n);
                rn_cost(&mut r, m * m);
            }
            decoder(&mut r, 2.0 * l);
        }
        Arch::SingleSt => {
            r.pointwise += lin(n + m, d, l);
            for _ in 0..cfg.n_blocks {
                t_block(&mut r, n, n);
                t_block(&mut r, m, m);
            }
            pma_cost(&mut r, n, l);
            pma_cost(&mut r, m, l);
            decoder(&mut r, 2.0 * l);
        }
        Arch::UnionTransformer => {
            let u = n + m;
            r.pointwise += lin(u, d, l);
            for _ in 0..cfg.n_blocks {
                t_block(&mut r, u, u);
            }
            pma_cost(&mut r, u, l);
            decoder(&mut r, l);
        }
        Arch::Pine => {
            phi_cost(&mut r, n);
            phi_cost(&mut r, m);
            decoder(&mut r, 2.0 * l);
        }
        Arch::MultisetTransformerEqui => {
            r.pointwise += lin((n + m) * d, 1.0, c);
            let mc_block = |r: &mut FlopReport, nq: f64, nkv: f64| {
                r.pointwise += (2.0 * nq + 2.0 * nkv) * d * c * c + 2.0 * nq * d * c * h;
                r.attention += 2.0 * nq * nkv * d * c;
            };
            for _ in 0..cfg.n_blocks {
                mc_block(&mut r, n, n);
                mc_block(&mut r, n, m);
                mc_block(&mut r, m, n);
                mc_block(&mut r, m, m);
                r.pointwise += lin((n + m) * d, 2.0 * c, c);
            }
            pma_cost(&mut r, n, c);
            pma_cost(&mut r, m, c);
            decoder(&mut r, 2.0 * c);
        }
    }
    r
}
