//! Soft orientation classification over a discrete Euler grid.
//!
//! A ground-truth orientation is smeared into a probability vector over the
//! `n^3` grid bins with a Gaussian kernel on the geodesic rotation angle. A
//! predicted vector is turned back into one rotation by weighted quaternion
//! averaging: the principal eigenvector of `M = sum_i p_i q_i q_i^T`.
//!
//! # Bin layout
//!
//! Bin `((yaw_idx * n) + pitch_idx) * n + roll_idx` holds the Euler center
//!
//! ```text
//! yaw   = -pi   + (yaw_idx   + 0.5) * 2pi / n
//! pitch = -pi/2 + (pitch_idx + 0.5) *  pi / n
//! roll  = -pi   + (roll_idx  + 0.5) * 2pi / n
//! ```
//!
//! This ordering is the contract with the orientation head's logits.

use std::f64::consts::{FRAC_PI_2, PI};

use crate::error::{Error, Result};
use crate::geometry::{euler_to_quat, EulerAngles, UnitQuaternion};

pub const DEFAULT_DELTA: f64 = 3.0;

/// Kernel support, in multiples of sigma.
const TRUNCATION_SIGMAS: f64 = 4.0;

/// Minimum separation of the two leading eigenvalues of the scatter matrix.
pub const MIN_EIGENGAP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct OrientationGrid {
    n_bins_per_dim: usize,
    delta: f64,
    bin_centers: Vec<EulerAngles>,
    bin_quats: Vec<UnitQuaternion>,
}

impl OrientationGrid {
    pub fn new(n_bins_per_dim: usize, delta: f64) -> Result<Self> {
        if n_bins_per_dim < 2 {
            return Err(Error::InvalidConfig(format!(
                "bins per dimension must be >= 2, got {n_bins_per_dim}"
            )));
        }
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::InvalidConfig(format!("delta must be > 0, got {delta}")));
        }
        let n = n_bins_per_dim;
        let yaw_step = 2.0 * PI / n as f64;
        let pitch_step = PI / n as f64;
        let mut bin_centers = Vec::with_capacity(n * n * n);
        for yi in 0..n {
            for pi in 0..n {
                for ri in 0..n {
                    bin_centers.push(EulerAngles::new(
                        -PI + (yi as f64 + 0.5) * yaw_step,
                        -FRAC_PI_2 + (pi as f64 + 0.5) * pitch_step,
                        -PI + (ri as f64 + 0.5) * yaw_step,
                    ));
                }
            }
        }
        let bin_quats = bin_centers.iter().map(|e| euler_to_quat(*e)).collect();
        Ok(Self {
            n_bins_per_dim,
            delta,
            bin_centers,
            bin_quats,
        })
    }

    pub fn n_bins_per_dim(&self) -> usize {
        self.n_bins_per_dim
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn len(&self) -> usize {
        self.bin_quats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bin_quats.is_empty()
    }

    pub fn bin_centers(&self) -> &[EulerAngles] {
        &self.bin_centers
    }

    pub fn bin_quats(&self) -> &[UnitQuaternion] {
        &self.bin_quats
    }

    pub fn index(&self, yaw_idx: usize, pitch_idx: usize, roll_idx: usize) -> usize {
        let n = self.n_bins_per_dim;
        (yaw_idx * n + pitch_idx) * n + roll_idx
    }

    /// Kernel width in radians: `delta` times the yaw bin width.
    pub fn sigma(&self) -> f64 {
        self.delta * 2.0 * PI / self.n_bins_per_dim as f64
    }

    /// Same bins with their quaternions replaced; used to exercise sign
    /// invariance of the decoder.
    pub fn with_bin_quats(&self, quats: Vec<UnitQuaternion>) -> Result<Self> {
        if quats.len() != self.len() {
            return Err(Error::shape(self.len(), quats.len()));
        }
        Ok(Self {
            bin_quats: quats,
            ..self.clone()
        })
    }
}

pub fn build_grid(n_bins_per_dim: usize, delta: f64) -> Result<OrientationGrid> {
    OrientationGrid::new(n_bins_per_dim, delta)
}

/// Non-negative weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityVector(Vec<f64>);

impl ProbabilityVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyInput);
        }
        if values.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidConfig(
                "probabilities must be finite and non-negative".into(),
            ));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidConfig(format!(
                "probabilities sum to {sum}, expected 1"
            )));
        }
        Ok(Self(values))
    }

    /// Numerically stable softmax.
    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        if logits.is_empty() {
            return Err(Error::EmptyInput);
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        Ok(Self(exps.into_iter().map(|e| e / sum).collect()))
    }

    pub fn one_hot(len: usize, index: usize) -> Self {
        let mut v = vec![0.0; len];
        v[index] = 1.0;
        Self(v)
    }

    pub fn uniform(len: usize) -> Self {
        Self(vec![1.0 / len as f64; len])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.0.iter().enumerate() {
            if *v > self.0[best] {
                best = i;
            }
        }
        best
    }

    pub fn entropy(&self) -> f64 {
        -self
            .0
            .iter()
            .filter(|p| **p > 0.0)
            .map(|p| p * p.ln())
            .sum::<f64>()
    }
}

/// Gaussian soft label of `q` over the grid.
///
/// Weights are `exp(-d^2 / (2 sigma^2))` with `d` the geodesic angle to each
/// bin, cut to zero beyond `4 sigma`. If the cut removes every bin (tiny
/// `delta`), the label collapses to one-hot on the nearest bin.
pub fn encode_soft(q: UnitQuaternion, grid: &OrientationGrid) -> ProbabilityVector {
    let sigma = grid.sigma();
    let cutoff = TRUNCATION_SIGMAS * sigma;
    let two_var = 2.0 * sigma * sigma;
    let mut nearest = (0, f64::INFINITY);
    let mut weights: Vec<f64> = grid
        .bin_quats
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let d = q.angular_distance(*b);
            if d < nearest.1 {
                nearest = (i, d);
            }
            if d > cutoff {
                0.0
            } else {
                (-d * d / two_var).exp()
            }
        })
        .collect();
    let sum: f64 = weights.iter().sum();
    if !(sum > 0.0) {
        return ProbabilityVector::one_hot(grid.len(), nearest.0);
    }
    weights.iter_mut().for_each(|w| *w /= sum);
    ProbabilityVector(weights)
}

/// Result of weighted quaternion averaging.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuaternionAverage {
    pub quaternion: UnitQuaternion,
    /// Eigenvalues of the normalized scatter matrix, descending.
    pub eigenvalues: [f64; 4],
}

impl QuaternionAverage {
    pub fn eigengap(&self) -> f64 {
        self.eigenvalues[0] - self.eigenvalues[1]
    }

    /// True when the leading eigenvalue is not separated from the next one,
    /// i.e. the average rotation is not unique.
    pub fn is_degenerate(&self) -> bool {
        self.eigengap() < MIN_EIGENGAP
    }
}

/// Weighted average rotation without the degeneracy check.
pub fn average_quaternions_unchecked(
    weights: &[f64],
    quats: &[UnitQuaternion],
) -> Result<QuaternionAverage> {
    if quats.is_empty() {
        return Err(Error::EmptyInput);
    }
    if weights.len() != quats.len() {
        return Err(Error::shape(quats.len(), weights.len()));
    }
    if weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::InvalidConfig("weights must be non-negative".into()));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::InvalidConfig("weights must have a positive sum".into()));
    }
    let mut m = [[0.0f64; 4]; 4];
    for (w, q) in weights.iter().zip(quats) {
        if *w == 0.0 {
            continue;
        }
        let a = q.to_array();
        let w = w / total;
        for i in 0..4 {
            for j in i..4 {
                m[i][j] += w * a[i] * a[j];
            }
        }
    }
    for i in 0..4 {
        for j in 0..i {
            m[i][j] = m[j][i];
        }
    }
    let (eigenvalues, vectors) = symmetric_eigen4(m);
    let v = vectors[0];
    let quaternion = UnitQuaternion::try_new(v[0], v[1], v[2], v[3])
        .expect("eigenvector has unit norm")
        .canonical();
    Ok(QuaternionAverage {
        quaternion,
        eigenvalues,
    })
}

/// Weighted average rotation (Markley et al.): principal eigenvector of
/// `sum_i w_i q_i q_i^T`, canonicalized to `w >= 0`.
///
/// Invariant to the sign of every input quaternion and to positive scaling
/// of the weights.
pub fn average_quaternions(weights: &[f64], quats: &[UnitQuaternion]) -> Result<UnitQuaternion> {
    let avg = average_quaternions_unchecked(weights, quats)?;
    if avg.is_degenerate() {
        return Err(Error::DegenerateDistribution(
            avg.eigenvalues[0],
            avg.eigenvalues[1],
        ));
    }
    Ok(avg.quaternion)
}

/// Point estimate of a predicted orientation distribution.
pub fn decode(p: &ProbabilityVector, grid: &OrientationGrid) -> Result<UnitQuaternion> {
    if p.len() != grid.len() {
        return Err(Error::shape(grid.len(), p.len()));
    }
    average_quaternions(p.values(), grid.bin_quats())
}

/// Like [`decode`] but reports the eigen spectrum instead of failing on a
/// non-unique average.
pub fn decode_detailed(p: &ProbabilityVector, grid: &OrientationGrid) -> Result<QuaternionAverage> {
    if p.len() != grid.len() {
        return Err(Error::shape(grid.len(), p.len()));
    }
    average_quaternions_unchecked(p.values(), grid.bin_quats())
}

/// Cyclic Jacobi eigensolver for a symmetric 4x4 matrix. Returns eigenvalues
/// in descending order with matching unit eigenvectors.
fn symmetric_eigen4(mut a: [[f64; 4]; 4]) -> ([f64; 4], [[f64; 4]; 4]) {
    let mut v = [[0.0f64; 4]; 4];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for _sweep in 0..64 {
        let off: f64 = (0..4)
            .flat_map(|i| (i + 1..4).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-36 {
            break;
        }
        for p in 0..4 {
            for q in p + 1..4 {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..4 {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..4 {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                // v holds eigenvectors as columns
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let mut order = [0usize, 1, 2, 3];
    order.sort_by(|&i, &j| a[j][j].total_cmp(&a[i][i]));
    let values = order.map(|i| a[i][i]);
    let vectors = order.map(|i| [v[0][i], v[1][i], v[2][i], v[3][i]]);
    (values, vectors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::quat_to_euler;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_quat(rng: &mut ChaCha8Rng) -> UnitQuaternion {
        let n = rand_distr::StandardNormal;
        loop {
            let v: [f64; 4] = std::array::from_fn(|_| rng.sample(n));
            if let Some(q) = UnitQuaternion::try_new(v[0], v[1], v[2], v[3]) {
                return q;
            }
        }
    }

    #[test]
    fn grid_sizes_and_centers() {
        assert_eq!(build_grid(8, 3.0).unwrap().len(), 512);
        assert_eq!(build_grid(16, 3.0).unwrap().len(), 4096);
        let g = build_grid(2, 3.0).unwrap();
        assert_eq!(g.len(), 8);
        let mut yaws: Vec<f64> = g.bin_centers().iter().map(|e| e.yaw).collect();
        yaws.dedup();
        yaws.sort_by(f64::total_cmp);
        yaws.dedup();
        assert_eq!(yaws, vec![-FRAC_PI_2, FRAC_PI_2]);
        assert!(g
            .bin_centers()
            .iter()
            .all(|e| e.pitch.abs() < FRAC_PI_2 - 1e-9));
        for (e, q) in g.bin_centers().iter().zip(g.bin_quats()) {
            assert_eq!(euler_to_quat(*e), *q);
        }
        assert_eq!(build_grid(8, 3.0).unwrap(), build_grid(8, 3.0).unwrap());
    }

    #[test]
    fn grid_index_layout() {
        let g = build_grid(4, 3.0).unwrap();
        let i = g.index(1, 2, 3);
        assert_eq!(i, (4 + 2) * 4 + 3);
        let c = g.bin_centers()[i];
        let step = 2.0 * PI / 4.0;
        assert!((c.yaw - (-PI + 1.5 * step)).abs() < 1e-15);
        assert!((c.pitch - (-FRAC_PI_2 + 2.5 * PI / 4.0)).abs() < 1e-15);
        assert!((c.roll - (-PI + 3.5 * step)).abs() < 1e-15);
    }

    #[test]
    fn grid_rejects_bad_config() {
        assert!(matches!(build_grid(1, 3.0), Err(Error::InvalidConfig(_))));
        assert!(matches!(build_grid(8, 0.0), Err(Error::InvalidConfig(_))));
        assert!(matches!(build_grid(8, -1.0), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn encode_is_normalized_and_peaks_at_bin() {
        let g = build_grid(8, 3.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let p = encode_soft(random_quat(&mut rng), &g);
            assert!((p.values().iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(p.values().iter().all(|v| *v >= 0.0));
        }
        for j in [0, 77, 300, 511] {
            let q = g.bin_quats()[j];
            let p = encode_soft(q, &g);
            // Exhaustive check: the kernel is monotone in distance, so the
            // argmax must be a bin at minimal distance, which is j itself.
            let dists: Vec<f64> = g.bin_quats().iter().map(|b| q.angular_distance(*b)).collect();
            let min_other = dists
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != j)
                .map(|(_, d)| *d)
                .fold(f64::INFINITY, f64::min);
            assert!(min_other > 1e-6);
            assert_eq!(p.argmax(), j);
        }
    }

    #[test]
    fn encode_small_delta_is_one_hot() {
        let g = build_grid(8, 1e-6).unwrap();
        let j = 123;
        let p = encode_soft(g.bin_quats()[j], &g);
        assert_eq!(p, ProbabilityVector::one_hot(512, j));
        // Off-grid orientation falls back to its nearest bin.
        let q = g.bin_quats()[j] * UnitQuaternion::rot_x(0.01);
        assert_eq!(encode_soft(q, &g).argmax(), j);
    }

    #[test]
    fn encode_truncates_beyond_four_sigma() {
        let g = build_grid(16, 0.2).unwrap();
        let q = g.bin_quats()[1000];
        let p = encode_soft(q, &g);
        for (v, b) in p.values().iter().zip(g.bin_quats()) {
            if q.angular_distance(*b) > 4.0 * g.sigma() {
                assert_eq!(*v, 0.0);
            }
        }
        assert!(p.values().iter().filter(|v| **v == 0.0).count() > 0);
    }

    #[test]
    fn encode_is_equivariant_to_bin_permutation() {
        let g = build_grid(6, 3.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut perm: Vec<usize> = (0..g.len()).collect();
        perm.shuffle(&mut rng);
        let permuted = g
            .with_bin_quats(perm.iter().map(|i| g.bin_quats()[*i]).collect())
            .unwrap();
        let q = random_quat(&mut rng);
        let a = encode_soft(q, &g);
        let b = encode_soft(q, &permuted);
        for (k, i) in perm.iter().enumerate() {
            assert!((b.values()[k] - a.values()[*i]).abs() < 1e-15);
        }
    }

    #[test]
    fn decode_one_hot_returns_bin() {
        let g = build_grid(8, 3.0).unwrap();
        for j in [5, 200, 480] {
            let q = decode(&ProbabilityVector::one_hot(g.len(), j), &g).unwrap();
            assert!((q.dot(g.bin_quats()[j]).abs() - 1.0).abs() < 1e-12);
            assert!(q.w >= 0.0);
        }
    }

    #[test]
    fn decode_is_invariant_to_bin_sign_flips() {
        let g = build_grid(8, 3.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let flipped = g
            .with_bin_quats(
                g.bin_quats()
                    .iter()
                    .map(|q| if rng.random_bool(0.5) { -*q } else { *q })
                    .collect(),
            )
            .unwrap();
        for _ in 0..10 {
            let p = encode_soft(random_quat(&mut rng), &g);
            let a = decode(&p, &g).unwrap();
            let b = decode(&p, &flipped).unwrap();
            assert!(a.angular_distance(b) < 1e-9);
            assert!((a.w - b.w).abs() < 1e-9);
        }
    }

    #[test]
    fn average_cases() {
        let q = UnitQuaternion::new(0.2, -0.4, 0.1, 0.8);
        let a = average_quaternions(&[1.0], &[q]).unwrap();
        assert!((a.dot(q).abs() - 1.0).abs() < 1e-12);
        let a = average_quaternions(&[1.0, 1.0], &[q, -q]).unwrap();
        assert!((a.dot(q).abs() - 1.0).abs() < 1e-12);

        let a = average_quaternions(
            &[2.0, 1.0],
            &[UnitQuaternion::identity(), UnitQuaternion::rot_z(FRAC_PI_2)],
        )
        .unwrap();
        let e = quat_to_euler(a);
        assert!(e.pitch.abs() < 1e-12 && e.roll.abs() < 1e-12);
        assert!(e.yaw > 0.0 && e.yaw < PI / 4.0, "yaw = {}", e.yaw);
        // Closed form for two rotations about a common axis: the average
        // angle solves tan(2 phi) = w2 sin(2 theta) / (w1 + w2 cos(2 theta)),
        // with phi the half angle and 2 theta the half angle of the second.
        let half = 0.5 * (1.0f64 * (FRAC_PI_2).sin() / (2.0 + (FRAC_PI_2).cos())).atan();
        assert!((e.yaw - 2.0 * half).abs() < 1e-12);
    }

    #[test]
    fn average_errors() {
        assert!(matches!(average_quaternions(&[], &[]), Err(Error::EmptyInput)));
        let q = UnitQuaternion::identity();
        assert!(matches!(
            average_quaternions(&[1.0, 2.0], &[q]),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(average_quaternions(&[0.0], &[q]).is_err());
        // Two orthogonal rotations with equal weight have no unique mean.
        let r = UnitQuaternion::rot_x(PI);
        assert!(matches!(
            average_quaternions(&[1.0, 1.0], &[q, r]),
            Err(Error::DegenerateDistribution(..))
        ));
    }

    #[test]
    fn average_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let qs: Vec<_> = (0..6).map(|_| random_quat(&mut rng)).collect();
            let ws: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..1.0)).collect();
            let a = average_quaternions(&ws, &qs).unwrap();
            let scaled: Vec<f64> = ws.iter().map(|w| w * 37.5).collect();
            let b = average_quaternions(&scaled, &qs).unwrap();
            assert!(a.angular_distance(b) < 1e-9);
        }
    }

    #[test]
    fn uniform_distribution_is_flagged() {
        let g = build_grid(8, 3.0).unwrap();
        match decode_detailed(&ProbabilityVector::uniform(g.len()), &g) {
            Ok(avg) => assert!(avg.eigengap() < 1e-3, "spectrum {:?}", avg.eigenvalues),
            Err(e) => panic!("unexpected {e}"),
        }
        // decode() either flags it or returns a valid unit quaternion.
        match decode(&ProbabilityVector::uniform(g.len()), &g) {
            Err(Error::DegenerateDistribution(..)) => {}
            Ok(q) => assert!((q.norm() - 1.0).abs() < 1e-9),
            Err(e) => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn eigen_solver_reconstructs_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let mut m = [[0.0; 4]; 4];
            for i in 0..4 {
                for j in i..4 {
                    m[i][j] = rng.random_range(-1.0..1.0);
                    m[j][i] = m[i][j];
                }
            }
            let (vals, vecs) = symmetric_eigen4(m);
            assert!(vals.windows(2).all(|w| w[0] >= w[1]));
            for (l, v) in vals.iter().zip(vecs.iter()) {
                for i in 0..4 {
                    let mv: f64 = (0..4).map(|j| m[i][j] * v[j]).sum();
                    assert!((mv - l * v[i]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn probability_vector_validation() {
        assert!(ProbabilityVector::new(vec![0.5, 0.5]).is_ok());
        assert!(ProbabilityVector::new(vec![0.5, 0.6]).is_err());
        assert!(ProbabilityVector::new(vec![1.5, -0.5]).is_err());
        assert!(ProbabilityVector::new(vec![]).is_err());
        let p = ProbabilityVector::from_logits(&[1000.0, 1000.0]).unwrap();
        assert_eq!(p.values(), &[0.5, 0.5]);
    }
}
