//! Paired input/target samples and seeded batching.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor4;

#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub x: Tensor4<T>,
    pub y: Tensor4<T>,
}

/// Samples along the leading axis of `inputs` and `targets`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    inputs: Tensor4<T>,
    targets: Tensor4<T>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(inputs: Tensor4<T>, targets: Tensor4<T>) -> Result<Self> {
        if inputs.n() != targets.n() {
            return Err(Error::Pairing {
                inputs: inputs.n(),
                targets: targets.n(),
            });
        }
        Ok(Dataset { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.n()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn inputs(&self) -> &Tensor4<T> {
        &self.inputs
    }

    pub fn targets(&self) -> &Tensor4<T> {
        &self.targets
    }

    pub fn full(&self) -> Batch<T> {
        Batch {
            x: self.inputs.clone(),
            y: self.targets.clone(),
        }
    }

    /// Batches of `batch_size` (the last may be short). With a seed the
    /// sample order is a ChaCha8 shuffle, otherwise file order.
    pub fn batches(&self, batch_size: usize, shuffle: Option<u64>) -> Result<Vec<Batch<T>>> {
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be >= 1".into()));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        if let Some(seed) = shuffle {
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        Ok(order
            .chunks(batch_size)
            .map(|idx| Batch {
                x: gather(&self.inputs, idx),
                y: gather(&self.targets, idx),
            })
            .collect())
    }
}

fn gather<T: Scalar>(t: &Tensor4<T>, idx: &[usize]) -> Tensor4<T> {
    let [_, c, h, w] = t.dims();
    let sample = c * h * w;
    let mut data = Vec::with_capacity(idx.len() * sample);
    for &i in idx {
        data.extend_from_slice(&t.data()[i * sample..(i + 1) * sample]);
    }
    Tensor4::new([idx.len(), c, h, w], data).expect("gather dims")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ten() -> Dataset<f64> {
        let x = Tensor4::from_fn([10, 1, 1, 2], |[n, _, _, w]| (n * 2 + w) as f64);
        let y = Tensor4::from_fn([10, 1, 1, 1], |[n, ..]| n as f64);
        Dataset::new(x, y).unwrap()
    }

    #[test]
    fn batch_sizes() {
        let sizes: Vec<_> = ten()
            .batches(4, None)
            .unwrap()
            .iter()
            .map(|b| b.x.n())
            .collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn shuffle_is_seeded_and_keeps_pairs() {
        let d = ten();
        let a = d.batches(3, Some(7)).unwrap();
        assert_eq!(a, d.batches(3, Some(7)).unwrap());
        assert_ne!(a, d.batches(3, None).unwrap());
        let mut seen = Vec::new();
        for b in &a {
            for k in 0..b.x.n() {
                let label = b.y[[k, 0, 0, 0]];
                assert_eq!(b.x[[k, 0, 0, 0]], 2.0 * label);
                seen.push(label as usize);
            }
        }
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn pairing_mismatch() {
        let x = Tensor4::<f64>::zeros([3, 1, 1, 1]);
        let y = Tensor4::<f64>::zeros([2, 1, 1, 1]);
        assert!(matches!(
            Dataset::new(x, y),
            Err(Error::Pairing {
                inputs: 3,
                targets: 2
            })
        ));
    }
}
