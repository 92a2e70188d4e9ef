//! Finite-difference gradient checks: every block's reverse-mode gradient
//! is compared against 64-bit central differences (h = 1e-4) with relative
//! error at most 1e-3, on 20 random instances per block.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use msnt::blocks::{
    mha, msab, multichannel_block, multichannel_mha, multichannel_msab, pma, rff_encoder,
    rn_block, transformer_block, Linear, Merge, MhaParams, MsabParams, MultichannelBlockParams,
    MultichannelMsabParams, ParamSet, PmaParams, RffEncoderParams, RnBlockParams,
    TransformerBlockParams,
};
use msnt::graph::{Graph, Var};
use msnt::rng::derived_rng;
use msnt::tensor::{Mask, Tensor};

const H: f64 = 1e-4;
const TOL: f64 = 1e-3;
const INSTANCES: usize = 20;
/// Coordinates sampled per leaf; full sweeps are redundant at this tolerance.
const COORDS_PER_LEAF: usize = 6;

fn rand_prefix_mask(b: usize, n: usize, rng: &mut ChaCha8Rng) -> Mask {
    let mut data = vec![false; b * n];
    for i in 0..b {
        let valid = rng.gen_range(1..=n);
        for j in 0..valid {
            data[i * n + j] = true;
        }
    }
    Mask::new(vec![b, n], data)
}

/// Build a graph + forward closure, then compare autodiff against central
/// differences on sampled coordinates of every leaf.
fn check<FBuild>(name: &str, instance: usize, build: FBuild)
where
    FBuild: FnOnce(&mut Graph<f64>, &mut ChaCha8Rng) -> (Vec<Var>, Box<dyn FnMut(&mut Graph<f64>) -> Var>),
{
    let rng = &mut derived_rng(0xC0FFEE, name, instance as u64);
    let mut g: Graph<f64> = Graph::new();
    let (leaves, mut forward) = build(&mut g, rng);
    g.freeze();

    g.reset();
    let loss = forward(&mut g);
    assert_eq!(g.value(loss).numel(), 1, "{name}: loss must be scalar");
    g.zero_grad();
    g.backward(loss).expect("backward");

    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|&v| g.grad(v).map(|s| s.to_vec()).unwrap_or_default())
        .collect();

    for (li, &leaf) in leaves.iter().enumerate() {
        let numel = g.value(leaf).numel();
        assert_eq!(analytic[li].len(), numel, "{name}: missing grad on leaf {li}");
        let n_coords = COORDS_PER_LEAF.min(numel);
        for c in 0..n_coords {
            let idx = if numel <= COORDS_PER_LEAF {
                c
            } else {
                rng.gen_range(0..numel)
            };
            let orig = g.value(leaf).data[idx];
            g.value_mut(leaf).data[idx] = orig + H;
            g.reset();
            let lp = forward(&mut g);
            let fp = g.value(lp).data[0];
            g.value_mut(leaf).data[idx] = orig - H;
            g.reset();
            let lm = forward(&mut g);
            let fm = g.value(lm).data[0];
            g.value_mut(leaf).data[idx] = orig;
            let numeric = (fp - fm) / (2.0 * H);
            let a = analytic[li][idx];
            let denom = a.abs().max(numeric.abs()).max(1.0);
            let rel = (a - numeric).abs() / denom;
            assert!(
                rel <= TOL,
                "{name} instance {instance}: leaf {li} coord {idx}: autodiff {a} vs numeric {numeric} (rel {rel:.2e})"
            );
        }
    }
}

fn input_leaf(g: &mut Graph<f64>, shape: &[usize], rng: &mut ChaCha8Rng) -> Var {
    g.leaf(Tensor::rand_uniform(shape, -1.0, 1.0, rng), true)
}

pub fn mha_gradients_match_finite_differences() {
    for i in 0..INSTANCES {
        check("mha", i, |g, rng| {
            let mut ps = ParamSet::default();
            let p = MhaParams::init(g, &mut ps, "mha", 4, 2, rng).unwrap();
            let x = input_leaf(g, &[2, 3, 4], rng);
            let y = input_leaf(g, &[2, 4, 4], rng);
            let mask = rand_prefix_mask(2, 4, rng);
            let mut leaves: Vec<Var> = ps.entries.iter().map(|(_, v)| *v).collect();
            leaves.push(x);
            leaves.push(y);
            (
                leaves,
                Box::new(move |g: &mut Graph<f64>| {
                    let h = mha(g, &p, x, y, &mask).unwrap();
                    g.mean_all(h)
                }),
            )
        });
    }
}

pub fn transformer_block_gradients_match_finite_differences() {
    for i in 0..INSTANCES {
        check("t_block", i, |g, rng| {
            let mut ps = ParamSet::default();
            let p = TransformerBlockParams::init(g, &mut ps, "t", 4, 5, 2, rng).unwrap();
            let x = input_leaf(g, &[2, 3, 4], rng);
            let y = input_leaf(g, &[2, 4, 4], rng);
            let mask = rand_prefix_mask(2, 4, rng);
            let mut leaves: Vec<Var> = ps.entries.iter().map(|(_, v)| *v).collect();
            leaves.push(x);
            leaves.push(y);
            (
                leaves,
                Box::new(move |g: &mut Graph<f64>| {
                    let h = transformer_block(g, &p, x, y, &mask).unwrap();
                    g.mean_all(h)
                }),
            )
        });
    }
}

pub fn msab_gradients_match_finite_differences() {
    for i in 0..INSTANCES {
        let merge = if i % 2 == 0 { Merge::Learned } else { Merge::Sum };
        check("msab", i, move |g, rng| {
            let mut ps = ParamSet::default();
            let p = MsabParams::init(g, &mut ps, "msab", 4, 5, 2, merge, i % 3 == 2, rng).unwrap();
            let x = input_leaf(g, &[2, 3, 4], rng);
            let y = input_leaf(g, &[2, 4, 4], rng);
            let xm = rand_prefix_mask(2, 3, rng);
            let ym = rand_prefix_mask(2, 4, rng);
            let mut leaves: Vec<Var> = ps.entries.iter().map(|(_, v)| *v).collect();
            leaves.push(x);
            leaves.push(y);
            (
                leaves,
                Box::new(move |g: &mut Graph<f64>| {
                    let (zx, zy) = msab(g, &p, x, y, &xm, &ym).unwrap();
                    let mx = g.mean_all(zx);
                    let my = g.mean_all(zy);
                    let s = g.add(mx, my).unwrap();
                    g.mean_all(s)
                }),
            )
        });
    }
}

pub fn pma_gradients_match_finite_differences() {
    for i in 0..INSTANCES {
        check("pma", i, |g, rng| {
            let mut ps = ParamSet::default();
            let p = PmaParams::init(g, &mut ps, "pma", 1, 4, 2, rng).unwrap();
            let z = input_leaf(g, &[2, 5, 4], rng);
            let mask = rand_prefix_mask(2, 5, rng);
            let mut leaves: Vec<Var> = ps.entries.iter().map(|(_, v)| *v).collect();
            leaves.push(z);
            (
                leaves,
                Box::new(move |g: &mut Graph<f64>| {
                    let h = pma(g, &p, z, &mask).unwrap();
                    g.mean_all(h)
                }),
            )
        });
    }
}

pub fn rn_block_gradients_match_finite_differences() {
    for i in 0..INSTANCES {
        check("rn_block", i, |g, rng| {
            let mut ps = ParamSet::default();
            let p = RnBlockParams::init(g, &mut ps, "rn", 3, 5, 4, rng);
            let x = input_leaf(g, &[2, 3, 3], rng);
            let y = input_leaf(g, &[2, 4, 3], rng);
            let ym = rand_prefix_mask(2, 4, rng);
            let mut leaves: Vec<Var> = ps.entries.iter().map(|(_, v)| *v).collect();
            leaves.push(x);
            leaves.push(y);
            (
                leaves,
                Box::new(move |g: &mut Graph<f64>| {
                    let h = rn_block(g, &p, x, y, &ym).unwrap();
                    g.mean_all(h)
                }),
            )
        });
    }
}

pub fn rff_encoder_gradients_match_finite_differences() {
    for i in 0..INSTANCES {
        check("rff", i, |g, rng| {
            let mut ps = ParamSet::default();
            let p = RffEncoderParams::init(g, &mut ps, "phi", 3, 5, 4, rng);
            let x = input_leaf(g, &[2, 4, 3], rng);
            let mask = rand_prefix_mask(2, 4, rng);
            let mut leaves: Vec<Var> = ps.entries.iter().map(|(_, v)| *v).collect();
            leaves.push(x);
            (
                leaves,
                Box::new(move |g: &mut Graph<f64>| {
                    let h = rff_encoder(g, &p, x, &mask).unwrap();
                    g.mean_all(h)
                }),
            )
        });
    }
}

pub fn multichannel_mha_gradients_match_finite_differences() {
    for i in 0..INSTANCES {
        check("mc_mha", i, |g, rng| {
            let mut ps = ParamSet::default();
            let p = msnt::blocks::MultichannelMhaParams::init(g, &mut ps, "mc", 4, 2, rng).unwrap();
            let x = input_leaf(g, &[2, 3, 2, 4], rng);
            let y = input_leaf(g, &[2, 4, 2, 4], rng);
            let mask = rand_prefix_mask(2, 4, rng);
            let mut leaves: Vec<Var> = ps.entries.iter().map(|(_, v)| *v).collect();
            leaves.push(x);
            leaves.push(y);
            (
                leaves,
                Box::new(move |g: &mut Graph<f64>| {
                    let h = multichannel_mha(g, &p, x, y, &mask).unwrap();
                    g.mean_all(h)
                }),
            )
        });
    }
}

pub fn multichannel_block_gradients_match_finite_differences() {
    for i in 0..INSTANCES {
        check("mc_block", i, |g, rng| {
            let mut ps = ParamSet::default();
            let p = MultichannelBlockParams::init(g, &mut ps, "mcb", 4, 5, 2, rng).unwrap();
            let x = input_leaf(g, &[2, 3, 2, 4], rng);
            let y = input_leaf(g, &[2, 4, 2, 4], rng);
            let mask = rand_prefix_mask(2, 4, rng);
            let mut leaves: Vec<Var> = ps.entries.iter().map(|(_, v)| *v).collect();
            leaves.push(x);
            leaves.push(y);
            (
                leaves,
                Box::new(move |g: &mut Graph<f64>| {
                    let h = multichannel_block(g, &p, x, y, &mask).unwrap();
                    g.mean_all(h)
                }),
            )
        });
    }
}

pub fn multichannel_msab_gradients_match_finite_differences() {
    for i in 0..INSTANCES {
        check("mc_msab", i, |g, rng| {
            let mut ps = ParamSet::default();
            let p = MultichannelMsabParams::init(g, &mut ps, "mcm", 4, 5, 2, rng).unwrap();
            let x = input_leaf(g, &[1, 3, 2, 4], rng);
            let y = input_leaf(g, &[1, 4, 2, 4], rng);
            let xm = rand_prefix_mask(1, 3, rng);
            let ym = rand_prefix_mask(1, 4, rng);
            let mut leaves: Vec<Var> = ps.entries.iter().map(|(_, v)| *v).collect();
            leaves.push(x);
            leaves.push(y);
            (
                leaves,
                Box::new(move |g: &mut Graph<f64>| {
                    let (zx, zy) = multichannel_msab(g, &p, x, y, &xm, &ym).unwrap();
                    let mx = g.mean_all(zx);
                    let my = g.mean_all(zy);
                    let s = g.add(mx, my).unwrap();
                    g.mean_all(s)
                }),
            )
        });
    }
}

pub fn linear_and_losses_match_finite_differences() {
    for i in 0..INSTANCES {
        check("losses", i, |g, rng| {
            let mut ps = ParamSet::default();
            let lin = Linear::init(g, &mut ps, "lin", 3, 4, rng);
            let x = input_leaf(g, &[5, 3], rng);
            let classes: Vec<usize> = (0..5).map(|_| rng.gen_range(0..4)).collect();
            let bce_targets: Vec<f64> = (0..5).map(|_| f64::from(rng.gen_range(0..2u8))).collect();
            let mut leaves: Vec<Var> = ps.entries.iter().map(|(_, v)| *v).collect();
            leaves.push(x);
            (
                leaves,
                Box::new(move |g: &mut Graph<f64>| {
                    let h = lin.apply(g, x).unwrap();
                    let ce = g.cross_entropy(h, &classes).unwrap();
                    let first = g.gather(h, &[0]).unwrap();
                    let col = g.reshape(first, &[1, 4]).unwrap();
                    let s = g.sum_axis(col, 1, false).unwrap();
                    let bce = g.bce_with_logits(s, &bce_targets[..1]).unwrap();
                    let tot = g.add(ce, bce).unwrap();
                    g.mean_all(tot)
                }),
            )
        });
    }
}

/// Every block sweep, paired with its name, for callers that run the whole
/// battery at once.
pub fn all_sweeps() -> Vec<(&'static str, fn())> {
    vec![
        ("mha", mha_gradients_match_finite_differences),
        ("transformer_block", transformer_block_gradients_match_finite_differences),
        ("msab", msab_gradients_match_finite_differences),
        ("pma", pma_gradients_match_finite_differences),
        ("rn_block", rn_block_gradients_match_finite_differences),
        ("rff_encoder", rff_encoder_gradients_match_finite_differences),
        ("multichannel_mha", multichannel_mha_gradients_match_finite_differences),
        ("multichannel_block", multichannel_block_gradients_match_finite_differences),
        ("multichannel_msab", multichannel_msab_gradients_match_finite_differences),
        ("linear_and_losses", linear_and_losses_match_finite_differences),
    ]
}
