//! Instance normalization, AdaIN and the shared affine-normalization kernel.

use ndarray::{Array1, Axis};
use serde::{Deserialize, Serialize};

use super::Mat;
use crate::error::{Error, Result};

/// Stabilizer inside the square root of the IN variance.
pub const IN_EPS: f64 = 1e-5;

/// Per-channel mean and standard deviation over time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

impl ChannelStats {
    /// `(0, 1)` for every channel; AdaIN with these is plain IN.
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: Array1::zeros(channels),
            std: Array1::ones(channels),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Measured stats of `x` (population variance plus [`IN_EPS`]).
    pub fn of(x: &Mat) -> Self {
        instance_norm(x).1
    }

    /// `mean ‖ std` as one vector.
    pub fn concat(&self) -> Array1<f64> {
        ndarray::concatenate![Axis(0), self.mean, self.std]
    }
}

/// Normalizes each channel over time; returns the output and the removed stats
/// with `std = sqrt(var + IN_EPS)`.
pub fn instance_norm(x: &Mat) -> (Mat, ChannelStats) {
    let t = x.nrows().max(1) as f64;
    let mean = x.sum_axis(Axis(0)) / t;
    let centered = x - &mean;
    let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / t;
    let std = var.mapv(|v| (v + IN_EPS).sqrt());
    let y = centered / &std;
    (y, ChannelStats { mean, std })
}

/// Backward of [`instance_norm`]. `y` and `stats` are its outputs; `dmean`/`dstd`
/// are upstream gradients on the returned stats, when those were consumed.
pub fn instance_norm_backward(
    y: &Mat,
    stats: &ChannelStats,
    dy: &Mat,
    dmean: Option<&Array1<f64>>,
    dstd: Option<&Array1<f64>>,
) -> Mat {
    let t = y.nrows() as f64;
    let mean_dy = dy.sum_axis(Axis(0)) / t;
    let mean_dy_y = (dy * y).sum_axis(Axis(0)) / t;
    let mut dx = (dy - &mean_dy - &(y * &mean_dy_y)) / &stats.std;
    if let Some(dm) = dmean {
        dx += &(dm / t);
    }
    if let Some(ds) = dstd {
        dx += &(y * &(ds / t));
    }
    dx
}

/// Cache for `IN(x) * scale + shift`.
pub struct AffineNormCache {
    pub normed: Mat,
    pub stats: ChannelStats,
}

/// `IN(x) * scale + shift`, per channel. AdaIN and conditional normalization both
/// reduce to this.
pub fn affine_norm(x: &Mat, scale: &Array1<f64>, shift: &Array1<f64>) -> Result<(Mat, AffineNormCache)> {
    if scale.len() != x.ncols() || shift.len() != x.ncols() {
        return Err(Error::Shape(format!(
            "affine norm: {} channels, scale {} shift {}",
            x.ncols(),
            scale.len(),
            shift.len()
        )));
    }
    let (normed, stats) = instance_norm(x);
    let y = &normed * scale + shift;
    Ok((y, AffineNormCache { normed, stats }))
}

/// Returns `(dx, dscale, dshift)`.
pub fn affine_norm_backward(
    cache: &AffineNormCache,
    scale: &Array1<f64>,
    dy: &Mat,
) -> (Mat, Array1<f64>, Array1<f64>) {
    let dshift = dy.sum_axis(Axis(0));
    let dscale = (dy * &cache.normed).sum_axis(Axis(0));
    let dn = dy * scale;
    let dx = instance_norm_backward(&cache.normed, &cache.stats, &dn, None, None);
    (dx, dscale, dshift)
}

/// `IN(x) * reference.std + reference.mean`.
pub fn adain(x: &Mat, reference: &ChannelStats) -> Result<Mat> {
    Ok(affine_norm(x, &reference.std, &reference.mean)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn random(t: usize, c: usize, seed: u64, scale: f64, offset: f64) -> Mat {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((t, c), || offset + scale * rng.random_range(-1.0..1.0))
    }

    #[test]
    fn constant_channel() {
        let x = Array2::from_elem((6, 2), 3.0);
        let (y, stats) = instance_norm(&x);
        assert!(y.iter().all(|v| v.abs() < 1e-12));
        assert!(stats.mean.iter().all(|&m| (m - 3.0).abs() < 1e-12));
        assert!(stats.std.iter().all(|&s| (s - IN_EPS.sqrt()).abs() < 1e-12));
    }

    #[test]
    fn standardized_input_is_a_fixed_point() {
        let x = ndarray::array![[-1.0], [1.0], [-1.0], [1.0]];
        let (y, _) = instance_norm(&x);
        for (a, b) in y.iter().zip(x.iter()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn random_channel_statistics() {
        let x = random(50, 4, 1, 3.0, 2.0);
        let (y, _) = instance_norm(&x);
        let (_, s) = instance_norm(&y);
        for c in 0..4 {
            assert!(s.mean[c].abs() < 1e-6);
            assert!((s.std[c] - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn adain_with_unit_stats_is_in() {
        let x = random(9, 3, 2, 1.0, 0.5);
        assert_eq!(adain(&x, &ChannelStats::identity(3)).unwrap(), instance_norm(&x).0);
    }

    #[test]
    fn adain_zero_std_gives_constant_mean() {
        let x = random(9, 2, 3, 1.0, 0.0);
        let reference = ChannelStats {
            mean: ndarray::array![1.5, -2.0],
            std: Array1::zeros(2),
        };
        let y = adain(&x, &reference).unwrap();
        for row in y.rows() {
            assert_eq!(row.to_vec(), vec![1.5, -2.0]);
        }
    }

    #[test]
    fn adain_dimension_mismatch() {
        let x = random(4, 3, 4, 1.0, 0.0);
        assert!(matches!(
            adain(&x, &ChannelStats::identity(2)),
            Err(Error::Shape(_))
        ));
    }

    proptest! {
        #[test]
        fn adain_transfers_statistics(
            seed in 0u64..10_000,
            t in 8usize..40,
            mean in proptest::collection::vec(-5.0f64..5.0, 3),
            std in proptest::collection::vec(0.05f64..4.0, 3),
        ) {
            let x = random(t, 3, seed, 2.0, 1.0);
            let (_, own) = instance_norm(&x);
            prop_assume!(own.std.iter().all(|&s| s > 0.5));
            let reference = ChannelStats { mean: Array1::from(mean), std: Array1::from(std) };
            let y = adain(&x, &reference).unwrap();
            let t_f = t as f64;
            let m = y.sum_axis(Axis(0)) / t_f;
            let v = (&y - &m).mapv(|d| d * d).sum_axis(Axis(0)) / t_f;
            for c in 0..3 {
                prop_assert!((m[c] - reference.mean[c]).abs() < 1e-4);
                prop_assert!((v[c].sqrt() - reference.std[c]).abs() < 1e-4);
            }
        }
    }
}
