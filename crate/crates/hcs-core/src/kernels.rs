//! The fixed multi-kernel family used for all discrepancy estimates: one
//! linear kernel plus gaussian and rational-quadratic kernels over a shared
//! bandwidth grid, evaluated on representation vectors or on joint
//! (representation, label) embeddings.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Shared bandwidth grid for the gaussian and rational-quadratic families.
pub const BANDWIDTH_GRID: [f64; 11] = [
    0.01, 0.1, 0.25, 0.5, 1.0, 2.0, 5.0, 10.0, 50.0, 100.0, 200.0,
];

/// Gram computations switch to row-parallel evaluation above this entry
/// count. Each entry is computed independently with a fixed summation order
/// over kernels, so the result is bit-identical to the sequential loop.
const PARALLEL_GRAM_THRESHOLD: usize = 1 << 16;

/// A single kernel. Bandwidths are validated at construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KernelSpec {
    Linear,
    Gaussian { sigma: f64 },
    RationalQuadratic { alpha: f64 },
}

impl KernelSpec {
    pub fn linear() -> Self {
        KernelSpec::Linear
    }

    pub fn gaussian(sigma: f64) -> Result<Self> {
        if sigma <= 0.0 || !sigma.is_finite() {
            return Err(Error::invalid("sigma", format!("must be positive, got {sigma}")));
        }
        Ok(KernelSpec::Gaussian { sigma })
    }

    pub fn rational_quadratic(alpha: f64) -> Result<Self> {
        if alpha <= 0.0 || !alpha.is_finite() {
            return Err(Error::invalid("alpha", format!("must be positive, got {alpha}")));
        }
        Ok(KernelSpec::RationalQuadratic { alpha })
    }

    /// Kernel value for a pair of equal-dimension vectors.
    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        check_dims(x, y)?;
        Ok(self.eval_unchecked(x, y))
    }

    fn eval_unchecked(&self, x: &[f64], y: &[f64]) -> f64 {
        match *self {
            KernelSpec::Linear => dot(x, y),
            KernelSpec::Gaussian { sigma } => {
                (-sq_dist(x, y) / (2.0 * sigma * sigma)).exp()
            }
            KernelSpec::RationalQuadratic { alpha } => {
                (1.0 + sq_dist(x, y) / (2.0 * alpha)).powf(-alpha)
            }
        }
    }

    /// Value together with the derivative of the kernel with respect to the
    /// squared distance (zero for the linear kernel, which is handled through
    /// its dot-product structure instead).
    fn eval_parts(&self, sq_d: f64, lin: f64) -> (f64, f64) {
        match *self {
            KernelSpec::Linear => (lin, 0.0),
            KernelSpec::Gaussian { sigma } => {
                let s2 = 2.0 * sigma * sigma;
                let k = (-sq_d / s2).exp();
                (k, -k / s2)
            }
            KernelSpec::RationalQuadratic { alpha } => {
                let u = 1.0 + sq_d / (2.0 * alpha);
                let k = u.powf(-alpha);
                (k, -0.5 * u.powf(-alpha - 1.0))
            }
        }
    }
}

/// An ordered collection of kernels evaluated as their unweighted sum.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelBank {
    specs: Vec<KernelSpec>,
}

/// Bank value at a pair, plus the two factors needed to assemble gradients:
/// `d value / d x = radial_coef * (x - y) + linear_count * y`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct PairParts {
    pub value: f64,
    pub radial_coef: f64,
    pub linear_count: f64,
}

impl KernelBank {
    pub fn new(specs: Vec<KernelSpec>) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::EmptyInput("kernel bank"));
        }
        Ok(KernelBank { specs })
    }

    /// The fixed 23-kernel family: one linear kernel plus a gaussian and a
    /// rational-quadratic kernel for every bandwidth in [`BANDWIDTH_GRID`].
    pub fn default_bank() -> Self {
        let mut specs = vec![KernelSpec::Linear];
        for &s in &BANDWIDTH_GRID {
            specs.push(KernelSpec::Gaussian { sigma: s });
        }
        for &a in &BANDWIDTH_GRID {
            specs.push(KernelSpec::RationalQuadratic { alpha: a });
        }
        KernelBank { specs }
    }

    pub fn specs(&self) -> &[KernelSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    /// Sum of member kernel values at (x, y).
    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        check_dims(x, y)?;
        Ok(self.pair_parts(x, y).value)
    }

    pub(crate) fn pair_parts(&self, x: &[f64], y: &[f64]) -> PairParts {
        let sq_d = sq_dist(x, y);
        let lin = dot(x, y);
        let mut value = 0.0;
        let mut radial = 0.0;
        let mut linear_count = 0.0;
        for spec in &self.specs {
            let (k, dk_dsq) = spec.eval_parts(sq_d, lin);
            value += k;
            // d(sq_dist)/dx = 2 (x - y)
            radial += 2.0 * dk_dsq;
            if matches!(spec, KernelSpec::Linear) {
                linear_count += 1.0;
            }
        }
        PairParts {
            value,
            radial_coef: radial,
            linear_count,
        }
    }

    /// Bank value at (x, y); accumulates `scale * d value / d x` into `gx`
    /// and `scale * d value / d y` into `gy`.
    pub(crate) fn eval_accumulate_grad(
        &self,
        x: &[f64],
        y: &[f64],
        scale: f64,
        gx: &mut [f64],
        gy: &mut [f64],
    ) -> f64 {
        let parts = self.pair_parts(x, y);
        for i in 0..x.len() {
            let diff = x[i] - y[i];
            gx[i] += scale * (parts.radial_coef * diff + parts.linear_count * y[i]);
            gy[i] += scale * (-parts.radial_coef * diff + parts.linear_count * x[i]);
        }
        parts.value
    }

    /// Gram matrix: entry (i, j) is the bank value at (a[i], b[j]).
    pub fn gram(&self, a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if a.is_empty() || b.is_empty() {
            return Err(Error::EmptyInput("gram input"));
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
        let row = |ai: &Vec<f64>| -> Vec<f64> {
            b.iter().map(|bj| self.pair_parts(ai, bj).value).collect()
        };
        if a.len() * b.len() >= PARALLEL_GRAM_THRESHOLD {
            Ok(a.par_iter().map(row).collect())
        } else {
            Ok(a.iter().map(row).collect())
        }
    }
}

impl Default for KernelBank {
    fn default() -> Self {
        KernelBank::default_bank()
    }
}

/// Joint embedding of a representation vector with a binary label:
/// (h, y) is cast to the continuous vector (y * h, (1 - y) * h).
///
/// The label must be 0 or 1.
pub fn joint_embed(h: &[f64], y: u8) -> Vec<f64> {
    assert!(y <= 1, "joint_embed label must be binary, got {y}");
    let d = h.len();
    let mut out = vec![0.0; 2 * d];
    if y == 1 {
        out[..d].copy_from_slice(h);
    } else {
        out[d..].copy_from_slice(h);
    }
    out
}

fn check_dims(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    Ok(())
}

#[inline]
fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

#[inline]
fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn default_bank_has_23_kernels() {
        let bank = KernelBank::default_bank();
        assert_eq!(bank.len(), 23);
        let linear = bank
            .specs()
            .iter()
            .filter(|s| matches!(s, KernelSpec::Linear))
            .count();
        let gauss = bank
            .specs()
            .iter()
            .filter(|s| matches!(s, KernelSpec::Gaussian { .. }))
            .count();
        let rq = bank
            .specs()
            .iter()
            .filter(|s| matches!(s, KernelSpec::RationalQuadratic { .. }))
            .count();
        assert_eq!((linear, gauss, rq), (1, 11, 11));
    }

    #[test]
    fn gaussian_at_zero_distance_is_one() {
        let k = KernelSpec::gaussian(1.0).unwrap();
        let v = k.eval(&[0.5, 0.5], &[0.5, 0.5]).unwrap();
        assert_eq!(v, 1.0);
    }

    #[test]
    fn linear_is_dot_product() {
        let k = KernelSpec::linear();
        assert_eq!(k.eval(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), 11.0);
    }

    #[test]
    fn rational_quadratic_hand_value() {
        // alpha = 1, x = 0, y = 2: (1 + 4/2)^(-1) = 1/3
        let k = KernelSpec::rational_quadratic(1.0).unwrap();
        let v = k.eval(&[0.0], &[2.0]).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-15, "got {v}");
    }

    #[test]
    fn nonpositive_bandwidth_rejected_at_construction() {
        assert!(KernelSpec::gaussian(0.0).is_err());
        assert!(KernelSpec::gaussian(-1.0).is_err());
        assert!(KernelSpec::rational_quadratic(0.0).is_err());
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let k = KernelSpec::linear();
        assert!(k.eval(&[1.0, 2.0], &[1.0]).is_err());
        let bank = KernelBank::default_bank();
        assert!(bank.eval(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn bank_sums_members_at_zero_distance() {
        let bank = KernelBank::new(vec![
            KernelSpec::linear(),
            KernelSpec::gaussian(1.0).unwrap(),
        ])
        .unwrap();
        let g = bank.gram(&[vec![0.0]], &[vec![0.0]]).unwrap();
        assert_eq!(g, vec![vec![2.0]]);
    }

    #[test]
    fn linear_gram_is_outer_product() {
        let bank = KernelBank::new(vec![KernelSpec::linear()]).unwrap();
        let pts = vec![vec![1.0], vec![2.0]];
        let g = bank.gram(&pts, &pts).unwrap();
        assert_eq!(g, vec![vec![1.0, 2.0], vec![2.0, 4.0]]);
    }

    #[test]
    fn gram_rejects_empty_input() {
        let bank = KernelBank::default_bank();
        assert!(bank.gram(&[], &[vec![1.0]]).is_err());
        assert!(bank.gram(&[vec![1.0]], &[]).is_err());
    }

    #[test]
    fn gram_is_psd_on_random_points() {
        use rand::{Rng, SeedableRng};
        let bank = KernelBank::default_bank();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let pts: Vec<Vec<f64>> = (0..10)
                .map(|_| (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect())
                .collect();
            let g = bank.gram(&pts, &pts).unwrap();
            let m = nalgebra::DMatrix::from_fn(10, 10, |i, j| g[i][j]);
            let eigs = m.symmetric_eigen().eigenvalues;
            let min = eigs.iter().cloned().fold(f64::INFINITY, f64::min);
            assert!(min >= -1e-8, "smallest eigenvalue {min}");
        }
    }

    #[test]
    fn parallel_gram_matches_sequential_double_loop() {
        use rand::{Rng, SeedableRng};
        let bank = KernelBank::default_bank();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        // Force both code paths over the same data sizes.
        let a: Vec<Vec<f64>> = (0..300)
            .map(|_| (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let b: Vec<Vec<f64>> = (0..300)
            .map(|_| (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let g = bank.gram(&a, &b).unwrap();
        assert!(a.len() * b.len() >= super::PARALLEL_GRAM_THRESHOLD);
        for i in 0..a.len() {
            for j in 0..b.len() {
                let v = bank.pair_parts(&a[i], &b[j]).value;
                assert_eq!(g[i][j].to_bits(), v.to_bits(), "entry ({i},{j})");
            }
        }
    }

    #[test]
    fn joint_embed_definition() {
        assert_eq!(joint_embed(&[0.3, -0.2], 1), vec![0.3, -0.2, 0.0, 0.0]);
        assert_eq!(joint_embed(&[0.3, -0.2], 0), vec![0.0, 0.0, 0.3, -0.2]);
        assert_eq!(joint_embed(&[0.0, 0.0], 1), vec![0.0; 4]);
        assert_eq!(joint_embed(&[0.0, 0.0], 0), vec![0.0; 4]);
    }

    #[test]
    fn same_label_embedding_preserves_distance() {
        let h1 = [0.4, -1.2, 0.7];
        let h2 = [-0.1, 0.5, 2.0];
        let e1 = joint_embed(&h1, 1);
        let e2 = joint_embed(&h2, 1);
        let d_h: f64 = h1.iter().zip(&h2).map(|(a, b)| (a - b) * (a - b)).sum();
        let d_e: f64 = e1.iter().zip(&e2).map(|(a, b)| (a - b) * (a - b)).sum();
        assert_eq!(d_h.sqrt().to_bits(), d_e.sqrt().to_bits());
    }

    proptest! {
        #[test]
        fn radial_kernels_in_unit_interval(
            xs in proptest::collection::vec(-5.0..5.0f64, 3),
            ys in proptest::collection::vec(-5.0..5.0f64, 3),
            sigma in 0.01..50.0f64,
            alpha in 0.01..50.0f64,
        ) {
            let g = KernelSpec::gaussian(sigma).unwrap().eval(&xs, &ys).unwrap();
            let r = KernelSpec::rational_quadratic(alpha).unwrap().eval(&xs, &ys).unwrap();
            prop_assert!(g > 0.0 || xs != ys);
            prop_assert!((0.0..=1.0).contains(&g));
            prop_assert!(r > 0.0 && r <= 1.0);
            if xs == ys {
                prop_assert_eq!(g, 1.0);
                prop_assert_eq!(r, 1.0);
            }
        }

        #[test]
        fn gram_symmetric_when_inputs_swap(
            pts in proptest::collection::vec(
                proptest::collection::vec(-3.0..3.0f64, 2), 2..6),
            qts in proptest::collection::vec(
                proptest::collection::vec(-3.0..3.0f64, 2), 2..6),
        ) {
            let bank = KernelBank::default_bank();
            let g_ab = bank.gram(&pts, &qts).unwrap();
            let g_ba = bank.gram(&qts, &pts).unwrap();
            for i in 0..pts.len() {
                for j in 0..qts.len() {
                    prop_assert_eq!(g_ab[i][j].to_bits(), g_ba[j][i].to_bits());
                }
            }
        }

        #[test]
        fn joint_embed_injective_for_nonzero_h(
            h1 in proptest::collection::vec(0.1..3.0f64, 2),
            h2 in proptest::collection::vec(0.1..3.0f64, 2),
            y1 in 0u8..2,
            y2 in 0u8..2,
        ) {
            let e1 = joint_embed(&h1, y1);
            let e2 = joint_embed(&h2, y2);
            if (h1 != h2) || (y1 != y2) {
                prop_assert_ne!(e1, e2);
            }
        }
    }
}
