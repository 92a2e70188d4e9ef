//! Attention and set-encoder building blocks.
//!
//! Every block is a pure function of (inputs, parameters) on a [`Graph`].
//! Inputs are batched `[b, n, d]` tensors of padded sets; validity masks
//! travel alongside as `[b, n]` boolean masks. Blocks are equivariant in
//! their query set and invariant in their key/value set.

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::{Mask, Result, Tensor, TensorError};

/// Named parameter registry; creation order is the checkpoint order.
#[derive(Default)]
pub struct ParamSet {
    pub entries: Vec<(String, Var)>,
}

impl ParamSet {
    pub fn add<E: Scalar>(&mut self, g: &mut Graph<E>, name: String, t: Tensor<E>) -> Var {
        let v = g.leaf(t, true);
        self.entries.push((name, v));
        v
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: Var,
    pub b: Var,
}

impl Linear {
    pub fn init<E: Scalar>(
        g: &mut Graph<E>,
        ps: &mut ParamSet,
        prefix: &str,
        din: usize,
        dout: usize,
        rng: &mut impl Rng,
    ) -> Linear {
        let w = ps.add(g, format!("{prefix}.w"), Tensor::rand_fan_in(&[din, dout], din, rng));
        let b = ps.add(g, format!("{prefix}.b"), Tensor::rand_fan_in(&[dout], din, rng));
        Linear { w, b }
    }

    pub fn apply<E: Scalar>(&self, g: &mut Graph<E>, x: Var) -> Result<Var> {
        let y = g.matmul(x, self.w)?;
        g.add(y, self.b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNormParams {
    pub gain: Var,
    pub bias: Var,
}

impl LayerNormParams {
    pub fn init<E: Scalar>(
        g: &mut Graph<E>,
        ps: &mut ParamSet,
        prefix: &str,
        d: usize,
    ) -> LayerNormParams {
        let gain = ps.add(g, format!("{prefix}.gain"), Tensor::ones(&[d]));
        let bias = ps.add(g, format!("{prefix}.bias"), Tensor::zeros(&[d]));
        LayerNormParams { gain, bias }
    }

    pub fn apply<E: Scalar>(&self, g: &mut Graph<E>, x: Var) -> Result<Var> {
        g.layer_norm(x, self.gain, self.bias)
    }
}

// ------------------------------------------------------------------- MHA

#[derive(Debug, Clone, Copy)]
pub struct MhaParams {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub heads: usize,
}

impl MhaParams {
    pub fn init<E: Scalar>(
        g: &mut Graph<E>,
        ps: &mut ParamSet,
        prefix: &str,
        d_model: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<MhaParams> {
        if heads == 0 || d_model % heads != 0 {
            return Err(TensorError::InvalidInput(format!(
                "d_model {d_model} not divisible by {heads} heads"
            )));
        }
        let mut mk = |g: &mut Graph<E>, n: &str, rng: &mut dyn rand::RngCore| {
            ps.add(
                g,
                format!("{prefix}.{n}"),
                Tensor::rand_fan_in(&[d_model, d_model], d_model, rng),
            )
        };
        Ok(MhaParams {
            w_q: mk(g, "w_q", rng),
            w_k: mk(g, "w_k", rng),
            w_v: mk(g, "w_v", rng),
            w_o: mk(g, "w_o", rng),
            heads,
        })
    }
}

/// Reshape `[b, n, d]` to `[b, h, n, d/h]`.
fn split_heads<E: Scalar>(g: &mut Graph<E>, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, n, d) = (s[0], s[1], s[2]);
    let r = g.reshape(x, &[b, n, heads, d / heads])?;
    g.permute(r, &[0, 2, 1, 3])
}

/// Inverse of `split_heads`.
fn merge_heads<E: Scalar>(g: &mut Graph<E>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, h, n, dh) = (s[0], s[1], s[2], s[3]);
    let p = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(p, &[b, n, h * dh])
}

fn key_mask_4d(key_mask: &Mask) -> Mask {
    // [b, m] -> [b, 1, 1, m] so it broadcasts over heads and query rows
    let b = key_mask.shape[0];
    let m = key_mask.shape[1];
    Mask::new(vec![b, 1, 1, m], key_mask.data.clone())
}

/// Multiheaded attention with queries `q` `[b,n,d]` and keys/values `kv`
/// `[b,m,d]`. Logits scaled by 1/sqrt(head_dim); `key_mask` marks live rows
/// of `kv`.
pub fn mha<E: Scalar>(
    g: &mut Graph<E>,
    p: &MhaParams,
    q: Var,
    kv: Var,
    key_mask: &Mask,
) -> Result<Var> {
    let d = g.shape(q)[2];
    let dh = d / p.heads;
    let qp = g.matmul(q, p.w_q)?;
    let kp = g.matmul(kv, p.w_k)?;
    let vp = g.matmul(kv, p.w_v)?;
    let qh = split_heads(g, qp, p.heads)?;
    let kh = split_heads(g, kp, p.heads)?;
    let vh = split_heads(g, vp, p.heads)?;
    let kt = g.transpose(kh)?;
    let scores = g.matmul(qh, kt)?;
    let scaled = g.scale(scores, E::from_f64(1.0 / (dh as f64).sqrt()));
    let attn = g.masked_softmax(scaled, &key_mask_4d(key_mask))?;
    let ctx = g.matmul(attn, vh)?;
    let merged = merge_heads(g, ctx)?;
    g.matmul(merged, p.w_o)
}

// ------------------------------------------------------- transformer block

#[derive(Debug, Clone, Copy)]
pub struct TransformerBlockParams {
    pub mha: MhaParams,
    pub ln1: LayerNormParams,
    pub ln2: LayerNormParams,
    pub ff1: Linear,
    pub ff2: Linear,
    /// When set, the block reduces to the bare attention map (no layer norm,
    /// feedforward, or skip connections). Used by ablations and equivalence
    /// checks.
    pub attn_only: bool,
}

impl TransformerBlockParams {
    pub fn init<E: Scalar>(
        g: &mut Graph<E>,
        ps: &mut ParamSet,
        prefix: &str,
        d_model: usize,
        d_hidden: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<TransformerBlockParams> {
        Ok(TransformerBlockParams {
            mha: MhaParams::init(g, ps, &format!("{prefix}.mha"), d_model, heads, rng)?,
            ln1: LayerNormParams::init(g, ps, &format!("{prefix}.ln1"), d_model),
            ln2: LayerNormParams::init(g, ps, &format!("{prefix}.ln2"), d_model),
            ff1: Linear::init(g, ps, &format!("{prefix}.ff1"), d_model, d_hidden, rng),
            ff2: Linear::init(g, ps, &format!("{prefix}.ff2"), d_hidden, d_model, rng),
            attn_only: false,
        })
    }
}

/// `T(X) = LN(ATTN + FF(ATTN))` with `ATTN = LN(X + MHA(X, KV))`.
pub fn transformer_block<E: Scalar>(
    g: &mut Graph<E>,
    p: &TransformerBlockParams,
    x: Var,
    kv: Var,
    key_mask: &Mask,
) -> Result<Var> {
    let h = mha(g, &p.mha, x, kv, key_mask)?;
    if p.attn_only {
        return Ok(h);
    }
    let skip = g.add(x, h)?;
    let attn = p.ln1.apply(g, skip)?;
    let f1 = p.ff1.apply(g, attn)?;
    let f1 = g.relu(f1);
    let ff = p.ff2.apply(g, f1)?;
    let skip2 = g.add(attn, ff)?;
    p.ln2.apply(g, skip2)
}

// ------------------------------------------------------------------- MSAB

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Merge {
    /// 1-layer feedforward with ReLU on the per-element feature concat.
    Learned,
    /// Elementwise sum of the two block outputs.
    Sum,
    /// Keep only the same-set branch (testing/ablation).
    First,
}

#[derive(Debug, Clone)]
pub struct MsabParams {
    pub t_xx: Option<TransformerBlockParams>,
    pub t_xy: TransformerBlockParams,
    pub t_yx: TransformerBlockParams,
    pub t_yy: Option<TransformerBlockParams>,
    pub g_x: Option<Linear>,
    pub g_y: Option<Linear>,
    pub merge: Merge,
}

impl MsabParams {
    pub fn init<E: Scalar>(
        g: &mut Graph<E>,
        ps: &mut ParamSet,
        prefix: &str,
        d_model: usize,
        d_hidden: usize,
        heads: usize,
        merge: Merge,
        cross_only: bool,
        rng: &mut impl Rng,
    ) -> Result<MsabParams> {
        let t_xx = if cross_only {
            None
        } else {
            Some(TransformerBlockParams::init(
                g,
                ps,
                &format!("{prefix}.t_xx"),
                d_model,
                d_hidden,
                heads,
                rng,
            )?)
        };
        let t_xy = TransformerBlockParams::init(
            g,
            ps,
            &format!("{prefix}.t_xy"),
            d_model,
            d_hidden,
            heads,
            rng,
        )?;
        let t_yx = TransformerBlockParams::init(
            g,
            ps,
            &format!("{prefix}.t_yx"),
            d_model,
            d_hidden,
            heads,
            rng,
        )?;
        let t_yy = if cross_only {
            None
        } else {
            Some(TransformerBlockParams::init(
                g,
                ps,
                &format!("{prefix}.t_yy"),
                d_model,
                d_hidden,
                heads,
                rng,
            )?)
        };
        let (g_x, g_y) = if merge == Merge::Learned {
            let din = if cross_only { d_model } else { 2 * d_model };
            (
                Some(Linear::init(g, ps, &format!("{prefix}.g_x"), din, d_model, rng)),
                Some(Linear::init(g, ps, &format!("{prefix}.g_y"), din, d_model, rng)),
            )
        } else {
            (None, None)
        };
        Ok(MsabParams {
            t_xx,
            t_xy,
            t_yx,
            t_yy,
            g_x,
            g_y,
            merge,
        })
    }
}

fn merge_branches<E: Scalar>(
    g: &mut Graph<E>,
    merge: Merge,
    lin: Option<&Linear>,
    same: Option<Var>,
    cross: Var,
) -> Result<Var> {
    match merge {
        Merge::First => Ok(same.unwrap_or(cross)),
        Merge::Sum => match same {
            Some(s) => g.add(s, cross),
            None => Ok(cross),
        },
        Merge::Learned => {
            let lin = lin.expect("learned merge has weights");
            let joined = match same {
                Some(s) => {
                    let axis = g.shape(s).len() - 1;
                    g.concat(s, cross, axis)?
                }
                None => cross,
            };
            let y = lin.apply(g, joined)?;
            Ok(g.relu(y))
        }
    }
}

/// Multi-set attention block: `Z_X = X + g_x(T_xx(X,X), T_xy(X,Y))` and
/// symmetrically for Y. Partially permutation equivariant.
pub fn msab<E: Scalar>(
    g: &mut Graph<E>,
    p: &MsabParams,
    x: Var,
    y: Var,
    x_mask: &Mask,
    y_mask: &Mask,
) -> Result<(Var, Var)> {
    let sx = match &p.t_xx {
        Some(t) => Some(transformer_block(g, t, x, x, x_mask)?),
        None => None,
    };
    let cx = transformer_block(g, &p.t_xy, x, y, y_mask)?;
    let sy = match &p.t_yy {
        Some(t) => Some(transformer_block(g, t, y, y, y_mask)?),
        None => None,
    };
    let cy = transformer_block(g, &p.t_yx, y, x, x_mask)?;
    let mx = merge_branches(g, p.merge, p.g_x.as_ref(), sx, cx)?;
    let my = merge_branches(g, p.merge, p.g_y.as_ref(), sy, cy)?;
    let zx = g.add(x, mx)?;
    let zy = g.add(y, my)?;
    Ok((zx, zy))
}

// ------------------------------------------------------------- multichannel

#[derive(Debug, Clone, Copy)]
pub struct MultichannelMhaParams {
    /// Channel-space projections, shared across input dimensions.
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub heads: usize,
}

impl MultichannelMhaParams {
    pub fn init<E: Scalar>(
        g: &mut Graph<E>,
        ps: &mut ParamSet,
        prefix: &str,
        channels: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<MultichannelMhaParams> {
        if heads == 0 || channels % heads != 0 {
            return Err(TensorError::InvalidInput(format!(
                "channels {channels} not divisible by {heads} heads"
            )));
        }
        let mut mk = |g: &mut Graph<E>, n: &str, rng: &mut dyn rand::RngCore| {
            ps.add(
                g,
                format!("{prefix}.{n}"),
                Tensor::rand_fan_in(&[channels, channels], channels, rng),
            )
        };
        Ok(MultichannelMhaParams {
            w_q: mk(g, "w_q", rng),
            w_k: mk(g, "w_k", rng),
            w_v: mk(g, "w_v", rng),
            w_o: mk(g, "w_o", rng),
            heads,
        })
    }
}

/// Dimension-equivariant attention on `[b, n, d, c]` inputs: one attention
/// matrix per (batch, head) from scores summed over the d axis, applied to
/// every dimension slice. Weights never index d, so any d is accepted.
pub fn multichannel_mha<E: Scalar>(
    g: &mut Graph<E>,
    p: &MultichannelMhaParams,
    x: Var,
    y: Var,
    key_mask: &Mask,
) -> Result<Var> {
    let (b, n, d, c) = {
        let s = g.shape(x);
        (s[0], s[1], s[2], s[3])
    };
    let m = g.shape(y)[1];
    let h = p.heads;
    let ch = c / h;
    // [b,n,d,c] -> [b,d,n,c]
    let xt = g.permute(x, &[0, 2, 1, 3])?;
    let yt = g.permute(y, &[0, 2, 1, 3])?;
    let qp = g.matmul(xt, p.w_q)?;
    let kp = g.matmul(yt, p.w_k)?;
    let vp = g.matmul(yt, p.w_v)?;
    // [b,d,n,c] -> [b,d,h,n,ch]
    let qh = {
        let r = g.reshape(qp, &[b, d, n, h, ch])?;
        g.permute(r, &[0, 1, 3, 2, 4])?
    };
    let kh = {
        let r = g.reshape(kp, &[b, d, m, h, ch])?;
        g.permute(r, &[0, 1, 3, 2, 4])?
    };
    let vh = {
        let r = g.reshape(vp, &[b, d, m, h, ch])?;
        g.permute(r, &[0, 1, 3, 2, 4])?
    };
    let kt = g.transpose(kh)?;
    let per_dim = g.matmul(qh, kt)?; // [b,d,h,n,m]
    let summed = g.sum_axis(per_dim, 1, false)?; // [b,h,n,m]
    // extra 1/sqrt(d) keeps logit magnitude stable across input dimension
    let scaled = g.scale(summed, E::from_f64(1.0 / ((d * ch) as f64).sqrt()));
    let attn = g.masked_softmax(scaled, &key_mask_4d(key_mask))?;
    // broadcast the shared attention matrix over the d axis
    let attn5 = g.reshape(attn, &[b, 1, h, n, m])?;
    let ctx = g.matmul(attn5, vh)?; // [b,d,h,n,ch]
    let merged = {
        let p5 = g.permute(ctx, &[0, 1, 3, 2, 4])?; // [b,d,n,h,ch]
        g.reshape(p5, &[b, d, n, c])?
    };
    let out = g.matmul(merged, p.w_o)?;
    g.permute(out, &[0, 2, 1, 3]) // [b,n,d,c]
}

#[derive(Debug, Clone, Copy)]
pub struct MultichannelBlockParams {
    pub mha: MultichannelMhaParams,
    pub ln1: LayerNormParams,
    pub ln2: LayerNormParams,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl MultichannelBlockParams {
    pub fn init<E: Scalar>(
        g: &mut Graph<E>,
        ps: &mut ParamSet,
        prefix: &str,
        channels: usize,
        hidden: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<MultichannelBlockParams> {
        Ok(MultichannelBlockParams {
            mha: MultichannelMhaParams::init(g, ps, &format!("{prefix}.mha"), channels, heads, rng)?,
            ln1: LayerNormParams::init(g, ps, &format!("{prefix}.ln1"), channels),
            ln2: LayerNormParams::init(g, ps, &format!("{prefix}.ln2"), channels),
            ff1: Linear::init(g, ps, &format!("{prefix}.ff1"), channels, hidden, rng),
            ff2: Linear::init(g, ps, &format!("{prefix}.ff2"), hidden, channels, rng),
        })
    }
}

pub fn multichannel_block<E: Scalar>(
    g: &mut Graph<E>,
    p: &MultichannelBlockParams,
    x: Var,
    kv: Var,
    key_mask: &Mask,
) -> Result<Var> {
    let h = multichannel_mha(g, &p.mha, x, kv, key_mask)?;
    let skip = g.add(x, h)?;
    let attn = p.ln1.apply(g, skip)?;
    let f1 = p.ff1.apply(g, attn)?;
    let f1 = g.relu(f1);
    let ff = p.ff2.apply(g, f1)?;
    let skip2 = g.add(attn, ff)?;
    p.ln2.apply(g, skip2)
}

#[derive(Debug, Clone)]
pub struct MultichannelMsabParams {
    pub t_xx: MultichannelBlockParams,
    pub t_xy: MultichannelBlockParams,
    pub t_yx: MultichannelBlockParams,
    pub t_yy: MultichannelBlockParams,
    pub g_x: Linear,
    pub g_y: Linear,
}

impl MultichannelMsabParams {
    pub fn init<E: Scalar>(
        g: &mut Graph<E>,
        ps: &mut ParamSet,
        prefix: &str,
        channels: usize,
        hidden: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<MultichannelMsabParams> {
        Ok(MultichannelMsabParams {
            t_xx: MultichannelBlockParams::init(g, ps, &format!("{prefix}.t_xx"), channels, hidden, heads, rng)?,
            t_xy: MultichannelBlockParams::init(g, ps, &format!("{prefix}.t_xy"), channels, hidden, heads, rng)?,
            t_yx: MultichannelBlockParams::init(g, ps, &format!("{prefix}.t_yx"), channels, hidden, heads, rng)?,
            t_yy: MultichannelBlockParams::init(g, ps, &format!("{prefix}.t_yy"), channels, hidden, heads, rng)?,
            g_x: Linear::init(g, ps, &format!("{prefix}.g_x"), 2 * channels, channels, rng),
            g_y: Linear::init(g, ps, &format!("{prefix}.g_y"), 2 * channels, channels, rng),
        })
    }
}

pub fn multichannel_msab<E: Scalar>(
    g: &mut Graph<E>,
    p: &MultichannelMsabParams,
    x: Var,
    y: Var,
    x_mask: &Mask,
    y_mask: &Mask,
) -> Result<(Var, Var)> {
    let sx = multichannel_block(g, &p.t_xx, x, x, x_mask)?;
    let cx = multichannel_block(g, &p.t_xy, x, y, y_mask)?;
    let sy = multichannel_block(g, &p.t_yy, y, y, y_mask)?;
    let cy = multichannel_block(g, &p.t_yx, y, x, x_mask)?;
    let jx = {
        let cat = g.concat(sx, cx, 3)?;
        let l = p.g_x.apply(g, cat)?;
        g.relu(l)
    };
    let jy = {
        let cat = g.concat(sy, cy, 3)?;
        let l = p.g_y.apply(g, cat)?;
        g.relu(l)
    };
    let zx = g.add(x, jx)?;
    let zy = g.add(y, jy)?;
    Ok((zx, zy))
}

// -------------------------------------------------------------------- PMA

#[derive(Debug, Clone, Copy)]
pub struct PmaParams {
    pub seeds: Var,
    pub mha: MhaParams,
    pub ln: LayerNormParams,
    pub k: usize,
}

impl PmaParams {
    pub fn init<E: Scalar>(
        g: &mut Graph<E>,
        ps: &mut ParamSet,
        prefix: &str,
        k: usize,
        d_model: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<PmaParams> {
        let seeds = ps.add(
            g,
            format!("{prefix}.seeds"),
            Tensor::rand_fan_in(&[k, d_model], d_model, rng),
        );
        Ok(PmaParams {
            seeds,
            mha: MhaParams::init(g, ps, &format!("{prefix}.mha"), d_model, heads, rng)?,
            ln: LayerNormParams::init(g, ps, &format!("{prefix}.ln"), d_model),
            k,
        })
    }
}

/// Pooling by multiheaded attention: `LN(S + MHA(S, Z))`, output `[b, k, d]`
/// regardless of set size. Invariant to row permutations of `z`.
pub fn pma<E: Scalar>(g: &mut Graph<E>, p: &PmaParams, z: Var, mask: &Mask) -> Result<Var> {
    let s = g.shape(z).to_vec();
    let (b, d) = (s[0], s[2]);
    let seeds = g.reshape(p.seeds, &[1, p.k, d])?;
    let seeds = g.expand(seeds, &[b, p.k, d])?;
    let h = mha(g, &p.mha, seeds, z, mask)?;
    let skip = g.add(seeds, h)?;
    p.ln.apply(g, skip)
}

// -------------------------------------------------------- relation network

#[derive(Debug, Clone, Copy)]
pub struct RnBlockParams {
    pub l1: Linear,
    pub l2: Linear,
}

impl RnBlockParams {
    pub fn init<E: Scalar>(
        g: &mut Graph<E>,
        ps: &mut ParamSet,
        prefix: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> RnBlockParams {
        RnBlockParams {
            l1: Linear::init(g, ps, &format!("{prefix}.l1"), 2 * d_in, d_hidden, rng),
            l2: Linear::init(g, ps, &format!("{prefix}.l2"), d_hidden, d_out, rng),
        }
    }
}

/// Pairwise relation encoder with masked max pooling over the second set:
/// `out_i = max_j theta(concat(x_i, y_j))` over live `j`.
pub fn rn_block<E: Scalar>(
    g: &mut Graph<E>,
    p: &RnBlockParams,
    x: Var,
    y: Var,
    y_mask: &Mask,
) -> Result<Var> {
    let sx = g.shape(x).to_vec();
    let sy = g.shape(y).to_vec();
    let (b, n, d) = (sx[0], sx[1], sx[2]);
    let m = sy[1];
    let xe = {
        let r = g.reshape(x, &[b, n, 1, d])?;
        g.expand(r, &[b, n, m, d])?
    };
    let ye = {
        let r = g.reshape(y, &[b, 1, m, d])?;
        g.expand(r, &[b, n, m, d])?
    };
    let pairs = g.concat(xe, ye, 3)?;
    let h = p.l1.apply(g, pairs)?;
    let h = g.relu(h);
    let theta = p.l2.apply(g, h)?; // [b,n,m,dout]
    let mask = Mask::new(vec![b, 1, m, 1], y_mask.data.clone());
    g.masked_max(theta, &mask, 2, false)
}

// ------------------------------------------------------ sum-decomposition

#[derive(Debug, Clone, Copy)]
pub struct RffEncoderParams {
    pub l1: Linear,
    pub l2: Linear,
    pub l3: Linear,
}

impl RffEncoderParams {
    pub fn init<E: Scalar>(
        g: &mut Graph<E>,
        ps: &mut ParamSet,
        prefix: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> RffEncoderParams {
        RffEncoderParams {
            l1: Linear::init(g, ps, &format!("{prefix}.l1"), d_in, d_hidden, rng),
            l2: Linear::init(g, ps, &format!("{prefix}.l2"), d_hidden, d_hidden, rng),
            l3: Linear::init(g, ps, &format!("{prefix}.l3"), d_hidden, d_out, rng),
        }
    }
}

/// Sum-decomposition encoder: per-element 3-layer feedforward map, summed
/// over live rows. Output `[b, d_out]`.
pub fn rff_encoder<E: Scalar>(
    g: &mut Graph<E>,
    p: &RffEncoderParams,
    x: Var,
    mask: &Mask,
) -> Result<Var> {
    if !mask.data.chunks_exact(mask.shape[1]).all(|row| row.iter().any(|&v| v)) {
        return Err(TensorError::InvalidInput("empty set in sum pooling".into()));
    }
    let h = p.l1.apply(g, x)?;
    let h = g.relu(h);
    let h = p.l2.apply(g, h)?;
    let h = g.relu(h);
    let phi = p.l3.apply(g, h)?; // [b,n,dout]
    let s = g.shape(phi).to_vec();
    let (b, n) = (s[0], s[1]);
    let mw: Vec<E> = mask
        .data
        .iter()
        .map(|&v| if v { E::ONE } else { E::ZERO })
        .collect();
    let mt = g.constant(Tensor::new(vec![b, n, 1], mw));
    let gated = g.mul(phi, mt)?;
    g.sum_axis(gated, 1, false)
}
