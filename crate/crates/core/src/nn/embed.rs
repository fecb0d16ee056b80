use rand::Rng;

use crate::error::{config_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Sinusoidal timestep features, `[cos(t·f_0..), sin(t·f_0..)]` with
/// frequencies `f_i = 10000^(−i/half)`. Returns shape `(len(t), dim, 1, 1)`.
pub fn sinusoidal_embedding<T: Scalar>(t: &[usize], dim: usize) -> Result<Tensor<T>> {
    if dim == 0 || dim % 2 != 0 {
        return config_err(format!("timestep embedding dim {dim} must be even and positive"));
    }
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| (-(10_000f64.ln()) * i as f64 / half as f64).exp())
        .collect();
    let mut data = Vec::with_capacity(t.len() * dim);
    for &step in t {
        let step = step as f64;
        data.extend(freqs.iter().map(|f| T::of((step * f).cos())));
        data.extend(freqs.iter().map(|f| T::of((step * f).sin())));
    }
    Tensor::from_vec(Shape::vector(t.len(), dim), data)
}

/// Replaces each label by the null class (`num_classes`) with probability `p`.
///
/// Labels must be in `0..=num_classes`; `num_classes` itself is the
/// unconditional token.
pub fn drop_labels<R: Rng + ?Sized>(
    labels: &[usize],
    num_classes: usize,
    p: f64,
    rng: &mut R,
) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|&y| {
            if y > num_classes {
                return Err(Error::Usage(format!(
                    "label {y} out of range (num_classes {num_classes}, null index {num_classes})"
                )));
            }
            // Always consume one draw per label so the stream is independent of p.
            let u: f64 = rng.random();
            Ok(if u < p { num_classes } else { y })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_step_features() {
        let e: Tensor<f64> = sinusoidal_embedding(&[0], 16).unwrap();
        assert_eq!(e.shape(), Shape::vector(1, 16));
        assert!(e.data()[..8].iter().all(|&v| v == 1.0));
        assert!(e.data()[8..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn odd_dim_rejected() {
        assert!(matches!(sinusoidal_embedding::<f32>(&[1], 7), Err(Error::Config(_))));
    }

    #[test]
    fn distinct_steps_are_not_parallel() {
        let e: Tensor<f64> = sinusoidal_embedding(&[1, 500], 256).unwrap();
        let (a, b) = (e.sample(0), e.sample(1));
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(dot / (na * nb) < 1.0 - 1e-6);
    }

    #[test]
    fn dropout_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = vec![0, 1, 2, 1];
        assert_eq!(drop_labels(&y, 3, 0.0, &mut rng).unwrap(), y);
        assert_eq!(drop_labels(&y, 3, 1.0, &mut rng).unwrap(), vec![3; 4]);
        assert!(matches!(drop_labels(&[4], 3, 0.0, &mut rng), Err(Error::Usage(_))));
    }

    #[test]
    fn dropout_rate_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let labels = vec![0usize; n];
        let out = drop_labels(&labels, 10, 0.1, &mut rng).unwrap();
        let nulls = out.iter().filter(|&&y| y == 10).count() as f64;
        let sigma = (n as f64 * 0.1 * 0.9).sqrt();
        assert!((nulls - 0.1 * n as f64).abs() <= 3.0 * sigma, "{nulls}");
    }
}
