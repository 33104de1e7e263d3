//! Two-class Gaussian data: every feature of a class-`c` sample is drawn
//! independently from `N(mean_c, std^2)`.

use alloc::vec::Vec;

use crate::mlp::{Dataset, Matrix};
use crate::numfmt::ScalarFormat;
use crate::rng::SeededRng;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DataError {
    #[error("{field} is out of range: {value}")]
    OutOfRange { field: &'static str, value: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub features: usize,
    pub mean0: f64,
    pub mean1: f64,
    pub std: f64,
    pub seed: u64,
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec { n_train: 1000, n_val: 1000, n_test: 1000, features: 5, mean0: -1.0, mean1: 1.0, std: 1.0, seed: 0 }
    }
}

// Stream offsets for train / validation / test.
const STREAM_OFFSETS: [u64; 3] = [0x0000_0000_0000_0000, 0x5851_F42D_4C95_7F2D, 0x1405_7B7E_F767_814F];

impl DataSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let counts = [("n_train", self.n_train), ("n_val", self.n_val), ("n_test", self.n_test), ("features", self.features)];
        for (field, v) in counts {
            if v == 0 {
                return Err(DataError::OutOfRange { field, value: 0.0 });
            }
        }
        if !(self.std > 0.0) || !self.std.is_finite() {
            return Err(DataError::OutOfRange { field: "std", value: self.std });
        }
        for (field, v) in [("mean0", self.mean0), ("mean1", self.mean1)] {
            if !v.is_finite() {
                return Err(DataError::OutOfRange { field, value: v });
            }
        }
        Ok(())
    }

    /// Seed of stream `k` (0 train, 1 validation, 2 test).
    pub fn stream_seed(&self, k: usize) -> u64 {
        self.seed.wrapping_add(STREAM_OFFSETS[k])
    }
}

/// Class of sample `i`: labels alternate starting with class 1, so an odd
/// count gives class 1 the extra sample.
#[inline]
pub fn label_of(i: usize) -> u8 {
    1 - (i % 2) as u8
}

/// Draws `n` samples from one stream, sample-major then feature-minor.
pub fn sample_set(spec: &DataSpec, n: usize, stream_seed: u64, format: ScalarFormat) -> Dataset {
    let mut rng = SeededRng::new(stream_seed);
    let d = spec.features;
    let mut features = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = label_of(i);
        let mean = if label == 1 { spec.mean1 } else { spec.mean0 };
        for _ in 0..d {
            features.push(mean + spec.std * rng.standard_normal());
        }
        labels.push(f64::from(label));
    }
    let x = Matrix::from_f64(n, d, &features, format).expect("sizes agree");
    let y = Matrix::from_f64(n, 1, &labels, format).expect("sizes agree");
    Dataset::new(x, y).expect("labels are 0 or 1")
}

/// Train, validation and test sets from three independent streams.
pub fn generate(spec: &DataSpec, format: ScalarFormat) -> Result<(Dataset, Dataset, Dataset), DataError> {
    spec.validate()?;
    Ok((
        sample_set(spec, spec.n_train, spec.stream_seed(0), format),
        sample_set(spec, spec.n_val, spec.stream_seed(1), format),
        sample_set(spec, spec.n_test, spec.stream_seed(2), format),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn class_means(data: &Dataset) -> [[f64; 2]; 2] {
        // [class][sum, count] over all features
        let x = data.features().to_f64();
        let y = data.labels().to_f64();
        let d = data.d();
        let mut acc = [[0.0; 2]; 2];
        for i in 0..data.n() {
            let c = y[i] as usize;
            for v in &x[i * d..(i + 1) * d] {
                acc[c][0] += v;
                acc[c][1] += 1.0;
            }
        }
        acc
    }

    #[test]
    fn deterministic_and_balanced() {
        let spec = DataSpec { n_train: 7, seed: 3, ..DataSpec::default() };
        let a = generate(&spec, ScalarFormat::F64).unwrap();
        let b = generate(&spec, ScalarFormat::F64).unwrap();
        assert_eq!(a, b);
        let ones = a.0.labels().to_f64().iter().filter(|&&y| y == 1.0).count();
        assert_eq!(ones, 4);
        assert_eq!(a.1.labels().to_f64().iter().filter(|&&y| y == 1.0).count(), 500);
    }

    #[test]
    fn streams_are_independent_of_train_size() {
        let small = generate(&DataSpec { n_train: 10, ..DataSpec::default() }, ScalarFormat::F64).unwrap();
        let large = generate(&DataSpec { n_train: 900, ..DataSpec::default() }, ScalarFormat::F64).unwrap();
        assert_eq!(small.1, large.1);
        assert_eq!(small.2, large.2);
        assert_ne!(small.0.n(), large.0.n());
    }

    #[test]
    fn tiny_std_recovers_means() {
        let spec = DataSpec { std: 1e-9, n_train: 100, ..DataSpec::default() };
        let (train, _, _) = generate(&spec, ScalarFormat::F64).unwrap();
        let acc = class_means(&train);
        assert!((acc[0][0] / acc[0][1] + 1.0).abs() < 1e-6);
        assert!((acc[1][0] / acc[1][1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn class_means_within_clt_bound() {
        let spec = DataSpec { n_train: 2000, seed: 11, ..DataSpec::default() };
        let (train, _, _) = generate(&spec, ScalarFormat::F64).unwrap();
        let x = train.features().to_f64();
        let y = train.labels().to_f64();
        for c in 0..2 {
            let mean = if c == 1 { 1.0 } else { -1.0 };
            for j in 0..5 {
                let vals: Vec<f64> =
                    (0..train.n()).filter(|&i| y[i] as usize == c).map(|i| x[i * 5 + j]).collect();
                let m = vals.iter().sum::<f64>() / vals.len() as f64;
                assert!((m - mean).abs() <= 4.0 / libm::sqrt(vals.len() as f64), "class {c} feature {j}: {m}");
            }
        }
    }

    #[test]
    fn linear_rule_near_bayes_accuracy() {
        let spec = DataSpec { n_train: 100_000, seed: 5, ..DataSpec::default() };
        let (train, _, _) = generate(&spec, ScalarFormat::F64).unwrap();
        let x = train.features().to_f64();
        let y = train.labels().to_f64();
        let correct = (0..train.n())
            .filter(|&i| {
                let s: f64 = x[i * 5..i * 5 + 5].iter().sum();
                (if s >= 0.0 { 1.0 } else { 0.0 }) == y[i]
            })
            .count();
        let acc = correct as f64 / train.n() as f64;
        // 1 - Phi(-sqrt 5)
        let bayes = 1.0 - 0.5 * libm::erfc(libm::sqrt(5.0) / libm::sqrt(2.0));
        assert!((acc - bayes).abs() < 0.015, "{acc} vs {bayes}");
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(DataSpec { std: -1.0, ..DataSpec::default() }.validate().is_err());
        assert!(DataSpec { std: 0.0, ..DataSpec::default() }.validate().is_err());
        assert!(DataSpec { n_val: 0, ..DataSpec::default() }.validate().is_err());
    }
}
