//! Unbiased squared-MMD estimators: plain, weighted-marginal (the loss that
//! fits the density-ratio network) and weighted-joint (the distribution
//! matching loss that trains the representation), plus the empirical witness
//! function. Each estimator can return analytic gradients with respect to
//! source embeddings, target embeddings, and source weights.
//!
//! Negative values are legal: the estimators are unbiased and never clamped.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernels::{joint_embed, KernelBank};

/// Which gradients an estimator call should populate.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MmdOptions {
    pub grad_embeddings: bool,
    pub grad_weights: bool,
}

impl MmdOptions {
    pub fn value_only() -> Self {
        MmdOptions::default()
    }

    pub fn with_embedding_grads() -> Self {
        MmdOptions {
            grad_embeddings: true,
            grad_weights: false,
        }
    }

    pub fn with_weight_grads() -> Self {
        MmdOptions {
            grad_embeddings: false,
            grad_weights: true,
        }
    }
}

/// Squared-MMD estimate with whichever gradients were requested. Gradient
/// arrays always match the shapes of the corresponding inputs.
#[derive(Debug, Clone)]
pub struct MmdValue {
    pub value: f64,
    pub grad_source: Option<Vec<Vec<f64>>>,
    pub grad_target: Option<Vec<Vec<f64>>>,
    pub grad_weights: Option<Vec<f64>>,
}

/// Cached gram matrices for one (source, target) pair. The weight-network
/// inner loop re-evaluates the weighted estimator many times against fixed
/// embeddings; the kernels need computing once.
#[derive(Debug, Clone)]
pub struct MmdGrams {
    pub ss: Vec<Vec<f64>>,
    pub tt: Vec<Vec<f64>>,
    pub st: Vec<Vec<f64>>,
}

/// Unbiased squared MMD between two samples:
/// mean off-diagonal within-A kernel + mean off-diagonal within-B kernel
/// minus twice the mean cross kernel.
pub fn mmd_unbiased_sq(
    bank: &KernelBank,
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    opts: MmdOptions,
) -> Result<MmdValue> {
    let ones = vec![1.0; a.len()];
    let mut out = weighted_mmd_sq(bank, a, &ones, b, opts)?;
    out.grad_weights = None;
    Ok(out)
}

/// Weighted-marginal squared MMD: source kernel entries carry the product of
/// the attached sample weights, the cross term carries the source weight,
/// and the target term is unweighted:
///
/// (1/(n(n-1))) sum_{i != j} w_i w_j k(s_i, s_j)
///   + (1/(m(m-1))) sum_{i != j} k(t_i, t_j)
///   - (2/(nm)) sum_{i,j} w_i k(s_i, t_j)
pub fn weighted_mmd_sq(
    bank: &KernelBank,
    h_s: &[Vec<f64>],
    w: &[f64],
    h_t: &[Vec<f64>],
    opts: MmdOptions,
) -> Result<MmdValue> {
    validate_inputs(h_s, Some(w), h_t)?;
    if !opts.grad_embeddings {
        let grams = compute_grams(bank, h_s, h_t)?;
        return weighted_mmd_from_grams(&grams, w, opts.grad_weights);
    }

    let n = h_s.len();
    let m = h_t.len();
    let dim = h_s[0].len();
    let c_ss = 1.0 / (n * (n - 1)) as f64;
    let c_tt = 1.0 / (m * (m - 1)) as f64;
    let c_st = 2.0 / (n * m) as f64;

    let mut value = 0.0;
    let mut gs = vec![vec![0.0; dim]; n];
    let mut gt = vec![vec![0.0; dim]; m];
    let mut gw = if opts.grad_weights {
        Some(vec![0.0; n])
    } else {
        None
    };

    // Within-source pairs: i < j counted twice via the symmetric scale.
    for i in 0..n {
        for j in (i + 1)..n {
            let scale = 2.0 * c_ss * w[i] * w[j];
            let (gi, gj) = split_two(&mut gs, i, j);
            let k = bank.eval_accumulate_grad(&h_s[i], &h_s[j], scale, gi, gj);
            value += 2.0 * c_ss * w[i] * w[j] * k;
            if let Some(gw) = gw.as_mut() {
                gw[i] += 2.0 * c_ss * w[j] * k;
                gw[j] += 2.0 * c_ss * w[i] * k;
            }
        }
    }
    // Within-target pairs.
    for i in 0..m {
        for j in (i + 1)..m {
            let (gi, gj) = split_two(&mut gt, i, j);
            let k = bank.eval_accumulate_grad(&h_t[i], &h_t[j], 2.0 * c_tt, gi, gj);
            value += 2.0 * c_tt * k;
        }
    }
    // Cross pairs.
    for i in 0..n {
        for j in 0..m {
            let k = bank.eval_accumulate_grad(
                &h_s[i],
                &h_t[j],
                -c_st * w[i],
                &mut gs[i],
                &mut gt[j],
            );
            value -= c_st * w[i] * k;
            if let Some(gw) = gw.as_mut() {
                gw[i] -= c_st * k;
            }
        }
    }

    ensure_finite(value)?;
    Ok(MmdValue {
        value,
        grad_source: Some(gs),
        grad_target: Some(gt),
        grad_weights: gw,
    })
}

/// Weighted-joint squared MMD: the weighted estimator applied to the joint
/// embeddings (y h, (1-y) h) of (representation, label) pairs, with weights
/// attached to source rows only. Gradients with respect to the raw
/// representations are recovered from the label-selected embedding block.
pub fn joint_weighted_mmd_sq(
    bank: &KernelBank,
    h_s: &[Vec<f64>],
    y_s: &[u8],
    w: &[f64],
    h_t: &[Vec<f64>],
    y_t_hat: &[u8],
    opts: MmdOptions,
) -> Result<MmdValue> {
    validate_inputs(h_s, Some(w), h_t)?;
    validate_labels(y_s, h_s.len(), "source labels")?;
    validate_labels(y_t_hat, h_t.len(), "target labels")?;

    let e_s: Vec<Vec<f64>> = h_s
        .iter()
        .zip(y_s)
        .map(|(h, &y)| joint_embed(h, y))
        .collect();
    let e_t: Vec<Vec<f64>> = h_t
        .iter()
        .zip(y_t_hat)
        .map(|(h, &y)| joint_embed(h, y))
        .collect();

    let mut out = weighted_mmd_sq(bank, &e_s, w, &e_t, opts)?;
    if opts.grad_embeddings {
        let d = h_s[0].len();
        out.grad_source = Some(project_embed_grads(out.grad_source.take().unwrap(), y_s, d));
        out.grad_target = Some(project_embed_grads(
            out.grad_target.take().unwrap(),
            y_t_hat,
            d,
        ));
    }
    Ok(out)
}

/// Empirical witness at x: mean kernel value against A minus mean against B.
pub fn witness(bank: &KernelBank, a: &[Vec<f64>], b: &[Vec<f64>], x: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyInput("witness sample"));
    }
    let mut mean_a = 0.0;
    for v in a {
        mean_a += bank.eval(x, v)?;
    }
    mean_a /= a.len() as f64;
    let mut mean_b = 0.0;
    for v in b {
        mean_b += bank.eval(x, v)?;
    }
    mean_b /= b.len() as f64;
    Ok(mean_a - mean_b)
}

/// Gram matrices for fixed embeddings, for repeated weighted evaluations.
pub fn compute_grams(bank: &KernelBank, h_s: &[Vec<f64>], h_t: &[Vec<f64>]) -> Result<MmdGrams> {
    Ok(MmdGrams {
        ss: bank.gram(h_s, h_s)?,
        tt: bank.gram(h_t, h_t)?,
        st: bank.gram(h_s, h_t)?,
    })
}

/// Weighted estimator evaluated from precomputed grams; optionally returns
/// the gradient with respect to the weights.
pub fn weighted_mmd_from_grams(
    grams: &MmdGrams,
    w: &[f64],
    grad_weights: bool,
) -> Result<MmdValue> {
    let n = grams.ss.len();
    let m = grams.tt.len();
    if n < 2 || m < 2 {
        return Err(Error::invalid(
            "sample size",
            format!("need at least 2 samples per side, got n={n}, m={m}"),
        ));
    }
    if w.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: w.len(),
        });
    }
    if let Some(bad) = w.iter().find(|v| **v < 0.0 || !v.is_finite()) {
        return Err(Error::invalid("weights", format!("must be nonnegative, got {bad}")));
    }
    let c_ss = 1.0 / (n * (n - 1)) as f64;
    let c_tt = 1.0 / (m * (m - 1)) as f64;
    let c_st = 2.0 / (n * m) as f64;

    let mut s_ss = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s_ss += w[i] * w[j] * grams.ss[i][j];
            }
        }
    }
    let mut s_tt = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                s_tt += grams.tt[i][j];
            }
        }
    }
    let mut s_st = 0.0;
    for i in 0..n {
        for j in 0..m {
            s_st += w[i] * grams.st[i][j];
        }
    }
    let value = c_ss * s_ss + c_tt * s_tt - c_st * s_st;
    ensure_finite(value)?;

    let grad_weights = if grad_weights {
        let mut gw = vec![0.0; n];
        for i in 0..n {
            let mut within = 0.0;
            for j in 0..n {
                if i != j {
                    within += w[j] * grams.ss[i][j];
                }
            }
            let cross: f64 = grams.st[i].iter().sum();
            gw[i] = 2.0 * c_ss * within - c_st * cross;
        }
        Some(gw)
    } else {
        None
    };

    Ok(MmdValue {
        value,
        grad_source: None,
        grad_target: None,
        grad_weights,
    })
}

/// Null distribution summary for the unbiased estimator under random
/// re-splits of the pooled sample. Used by the statistical checks.
#[derive(Debug, Clone, Copy)]
pub struct PermutationNull {
    pub mean: f64,
    pub sd: f64,
    pub n_permutations: usize,
}

/// Pools A and B, then repeatedly re-splits the pool at the original sizes
/// and evaluates the unbiased estimator, reusing one pooled gram matrix.
pub fn permutation_null(
    bank: &KernelBank,
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    n_permutations: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PermutationNull> {
    if n_permutations == 0 {
        return Err(Error::invalid("n_permutations", "must be positive"));
    }
    validate_inputs(a, None, b)?;
    let n = a.len();
    let total = n + b.len();
    let pooled: Vec<Vec<f64>> = a.iter().chain(b.iter()).cloned().collect();
    let gram = bank.gram(&pooled, &pooled)?;
    let mut idx: Vec<usize> = (0..total).collect();
    let mut vals = Vec::with_capacity(n_permutations);
    for _ in 0..n_permutations {
        idx.shuffle(rng);
        let (ia, ib) = idx.split_at(n);
        vals.push(unbiased_from_pooled_gram(&gram, ia, ib));
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
    Ok(PermutationNull {
        mean,
        sd: var.sqrt(),
        n_permutations,
    })
}

fn unbiased_from_pooled_gram(gram: &[Vec<f64>], ia: &[usize], ib: &[usize]) -> f64 {
    let n = ia.len();
    let m = ib.len();
    let mut s_aa = 0.0;
    for (p, &i) in ia.iter().enumerate() {
        for &j in ia.iter().skip(p + 1) {
            s_aa += gram[i][j];
        }
    }
    let mut s_bb = 0.0;
    for (p, &i) in ib.iter().enumerate() {
        for &j in ib.iter().skip(p + 1) {
            s_bb += gram[i][j];
        }
    }
    let mut s_ab = 0.0;
    for &i in ia {
        for &j in ib {
            s_ab += gram[i][j];
        }
    }
    2.0 * s_aa / (n * (n - 1)) as f64 + 2.0 * s_bb / (m * (m - 1)) as f64
        - 2.0 * s_ab / (n * m) as f64
}

fn project_embed_grads(grads: Vec<Vec<f64>>, labels: &[u8], d: usize) -> Vec<Vec<f64>> {
    grads
        .into_iter()
        .zip(labels)
        .map(|(g, &y)| {
            if y == 1 {
                g[..d].to_vec()
            } else {
                g[d..].to_vec()
            }
        })
        .collect()
}

fn validate_inputs(a: &[Vec<f64>], w: Option<&[f64]>, b: &[Vec<f64>]) -> Result<()> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::invalid(
            "sample size",
            format!("need at least 2 samples per side, got n={}, m={}", a.len(), b.len()),
        ));
    }
    let dim = a[0].len();
    for v in a.iter().chain(b.iter()) {
        if v.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: v.len(),
            });
        }
    }
    if let Some(w) = w {
        if w.len() != a.len() {
            return Err(Error::DimensionMismatch {
                expected: a.len(),
                got: w.len(),
            });
        }
        if let Some(bad) = w.iter().find(|v| **v < 0.0 || !v.is_finite()) {
            return Err(Error::invalid("weights", format!("must be nonnegative, got {bad}")));
        }
    }
    Ok(())
}

fn validate_labels(y: &[u8], expected: usize, what: &'static str) -> Result<()> {
    if y.len() != expected {
        return Err(Error::DimensionMismatch {
            expected,
            got: y.len(),
        });
    }
    if y.iter().any(|&v| v > 1) {
        return Err(Error::invalid("labels", format!("{what} must be binary")));
    }
    Ok(())
}

fn ensure_finite(value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("non-finite MMD estimate: {value}")))
    }
}

fn split_two<T>(v: &mut [T], i: usize, j: usize) -> (&mut T, &mut T) {
    debug_assert!(i < j);
    let (lo, hi) = v.split_at_mut(j);
    (&mut lo[i], &mut hi[0])
}
