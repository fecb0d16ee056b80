use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::binio::{put_f32s, put_u32, Reader};
use crate::error::{config_err, dim_err, FormatError, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

pub const DATASET_MAGIC: &[u8; 4] = b"DIDS";
pub const DATASET_VERSION: u32 = 1;

/// Two-class stripe images: class 0 varies along columns (vertical
/// stripes), class 1 along rows (horizontal stripes).
#[derive(Clone, Debug, PartialEq)]
pub struct ToySpec {
    pub count: usize,
    pub channels: usize,
    pub size: usize,
    /// Stripe period in pixels.
    pub period: usize,
    pub amplitude: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            count: 1024,
            channels: 1,
            size: 16,
            period: 4,
            amplitude: 0.8,
            noise_std: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyDataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl ToyDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Copies the listed examples into a batch.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let s = self.images.shape();
        let mut data = Vec::with_capacity(indices.len() * s.sample_len());
        for &i in indices {
            if i >= self.len() {
                return dim_err(format!("example {i} out of range for {} examples", self.len()));
            }
            data.extend(self.images.sample(i).iter().map(|&x| T::of(f64::from(x))));
        }
        let shape = Shape::new(indices.len(), s.c, s.h, s.w);
        Ok((Tensor::from_vec(shape, data)?, indices.iter().map(|&i| self.labels[i]).collect()))
    }
}

/// Deterministic stripe dataset. Labels alternate 0, 1, 0, ... so classes are
/// balanced; each image gets a random phase and i.i.d. Gaussian pixel noise,
/// then is clipped to `[-1, 1]`.
pub fn make_toy_data(spec: &ToySpec) -> Result<ToyDataset> {
    if spec.size == 0 || spec.channels == 0 || spec.period == 0 {
        return config_err("toy data needs positive size, channels and period");
    }
    if !(spec.noise_std >= 0.0 && spec.amplitude >= 0.0) {
        return config_err("toy data noise and amplitude must be nonnegative");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let shape = Shape::new(spec.count, spec.channels, spec.size, spec.size);
    let mut data = Vec::with_capacity(shape.numel());
    let labels: Vec<usize> = (0..spec.count).map(|i| i % 2).collect();
    for &label in &labels {
        let phase = rng.random_range(0..spec.period) as f64;
        for _ in 0..spec.channels {
            for r in 0..spec.size {
                for c in 0..spec.size {
                    let pos = if label == 0 { c } else { r } as f64;
                    let z: f64 = StandardNormal.sample(&mut rng);
                    let x = spec.amplitude * (2.0 * PI * (pos + phase) / spec.period as f64).cos()
                        + spec.noise_std * z;
                    data.push(x.clamp(-1.0, 1.0) as f32);
                }
            }
        }
    }
    Ok(ToyDataset {
        images: Tensor::from_vec(shape, data)?,
        labels,
    })
}

/// Stripe orientation of one image: 0 when column means vary more than row
/// means (vertical stripes), else 1.
pub fn classify_orientation(image: &[f32], channels: usize, h: usize, w: usize) -> usize {
    let mut row = vec![0.0f64; h];
    let mut col = vec![0.0f64; w];
    for c in 0..channels {
        for r in 0..h {
            for k in 0..w {
                let x = f64::from(image[(c * h + r) * w + k]);
                row[r] += x;
                col[k] += x;
            }
        }
    }
    let var = |xs: &[f64]| {
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64
    };
    let (vr, vc) = (var(&row) / (w * w) as f64, var(&col) / (h * h) as f64);
    usize::from(vr > vc)
}

/// Mirrors each image along its width with probability `p`. One uniform
/// draw is consumed per image regardless of `p`.
pub fn hflip_augment<T: Scalar, R: Rng + ?Sized>(batch: &Tensor<T>, rng: &mut R, p: f64) -> Tensor<T> {
    let s = batch.shape();
    let mut out = batch.clone();
    for n in 0..s.n {
        let u: f64 = rng.random();
        if u >= p {
            continue;
        }
        for row in out.sample_mut(n).chunks_exact_mut(s.w) {
            row.reverse();
        }
    }
    out
}

pub fn encode_dataset(data: &ToyDataset) -> Vec<u8> {
    let s = data.images.shape();
    let mut out = Vec::with_capacity(24 + 4 * (s.n + s.numel()));
    out.extend_from_slice(DATASET_MAGIC);
    put_u32(&mut out, DATASET_VERSION);
    for d in s.dims() {
        put_u32(&mut out, d as u32);
    }
    for &l in &data.labels {
        put_u32(&mut out, l as u32);
    }
    put_f32s(&mut out, data.images.data().iter().copied());
    out
}

pub fn decode_dataset(bytes: &[u8]) -> Result<ToyDataset> {
    let mut r = Reader::new(bytes);
    r.header(DATASET_MAGIC, DATASET_VERSION)?;
    let mut dims = [0usize; 4];
    for d in &mut dims {
        *d = r.u32("dimensions")? as usize;
    }
    let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
    let labels = (0..shape.n)
        .map(|_| r.u32("labels").map(|l| l as usize))
        .collect::<Result<Vec<_>>>()?;
    let pixels = r.f32s(shape.numel(), "pixels")?;
    r.finish()?;
    if pixels.iter().any(|x| !x.is_finite()) {
        return Err(FormatError::Malformed("non-finite pixel".into()).into());
    }
    Ok(ToyDataset {
        images: Tensor::from_vec(shape, pixels)?,
        labels,
    })
}

pub fn write_dataset(path: &Path, data: &ToyDataset) -> Result<()> {
    std::fs::write(path, encode_dataset(data))?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<ToyDataset> {
    decode_dataset(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_and_deterministic() {
        let spec = ToySpec::default();
        let a = make_toy_data(&spec).unwrap();
        assert_eq!(a.labels.iter().filter(|&&l| l == 0).count(), 512);
        assert_eq!(a.labels.iter().filter(|&&l| l == 1).count(), 512);
        assert_eq!(encode_dataset(&a), encode_dataset(&make_toy_data(&spec).unwrap()));
        assert!(a.images.data().iter().all(|x| (-1.0..=1.0).contains(x)));
    }

    #[test]
    fn orientation_matches_label() {
        let d = make_toy_data(&ToySpec {
            count: 64,
            ..ToySpec::default()
        })
        .unwrap();
        for i in 0..d.len() {
            assert_eq!(classify_orientation(d.images.sample(i), 1, 16, 16), d.labels[i]);
        }
    }

    #[test]
    fn flip_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f32>::from_fn(Shape::new(2, 1, 2, 3), |n, _, h, w| (n * 10 + h * 3 + w) as f32);
        assert_eq!(hflip_augment(&x, &mut rng, 0.0), x);
        let once = hflip_augment(&x, &mut rng, 1.0);
        assert_eq!(once.at(1, 0, 1, 0), x.at(1, 0, 1, 2));
        assert_eq!(hflip_augment(&once, &mut rng, 1.0), x);
    }

    #[test]
    fn dataset_round_trip_and_errors() {
        let d = make_toy_data(&ToySpec {
            count: 6,
            ..ToySpec::default()
        })
        .unwrap();
        let bytes = encode_dataset(&d);
        assert_eq!(decode_dataset(&bytes).unwrap(), d);
        let err = decode_dataset(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(err.to_string().contains("pixels"), "{err}");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(err_is_magic(decode_dataset(&bad).unwrap_err()));
    }

    fn err_is_magic(e: crate::Error) -> bool {
        matches!(e, crate::Error::Format(FormatError::BadMagic { .. }))
    }
}
