use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preprocessing {
    None,
    Gcn,
    /// GCN followed by an externally supplied whitening matrix.
    GcnWhitened,
}

/// Labeled images, `(N, C, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
    pub preprocessing: Preprocessing,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        let n = images.shape().first().copied().unwrap_or(0);
        if images.shape().len() != 4 {
            return Err(Error::input(format!(
                "images must be (N, C, H, W), got {:?}",
                images.shape()
            )));
        }
        if n == 0 || n != labels.len() {
            return Err(Error::input(format!(
                "{n} images but {} labels",
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::input(format!("label {l} outside {classes} classes")));
        }
        Ok(Self {
            images,
            labels,
            classes,
            split,
            preprocessing: Preprocessing::None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]`.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// First `n` samples (all if fewer).
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            images: self.images.slice_outer(0, n),
            labels: self.labels[..n].to_vec(),
            ..self.clone()
        }
    }

    pub fn select(&self, rows: &[usize]) -> Dataset {
        Dataset {
            images: self.images.gather_outer(rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            ..self.clone()
        }
    }
}

/// Per image: subtract its mean and divide by `max(std, epsilon)`.
pub fn gcn_normalize(ds: &Dataset, epsilon: f64) -> Dataset {
    let mut out = ds.clone();
    let per: usize = ds.sample_shape().iter().product();
    for img in out.images.data_mut().chunks_mut(per) {
        let n = img.len() as f64;
        let mean = img.iter().sum::<f64>() / n;
        let var = img.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let scale = var.sqrt().max(epsilon);
        for v in img.iter_mut() {
            *v = (*v - mean) / scale;
        }
    }
    out.preprocessing = Preprocessing::Gcn;
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ds(data: Vec<f64>, n: usize) -> Dataset {
        let per = data.len() / n;
        Dataset::new(
            Tensor::new(vec![n, 1, 1, per], data).unwrap(),
            vec![0; n],
            1,
            Split::Train,
        )
        .unwrap()
    }

    #[test]
    fn gcn_constant_image_is_zero() {
        let d = gcn_normalize(&ds(vec![0.7; 8], 2), 1e-8);
        assert!(d.images.data().iter().all(|&v| v == 0.0));
        assert_eq!(d.preprocessing, Preprocessing::Gcn);
    }

    #[test]
    fn gcn_matches_two_pass_oracle() {
        let raw: Vec<f64> = (0..24).map(|i| ((i * 7 % 11) as f64) / 10.0).collect();
        let d = gcn_normalize(&ds(raw.clone(), 2), 1e-8);
        for (img, out) in raw.chunks(12).zip(d.images.data().chunks(12)) {
            let mut sum = 0.0;
            for v in img {
                sum += v;
            }
            let mean = sum / 12.0;
            let mut ss = 0.0;
            for v in img {
                ss += (v - mean) * (v - mean);
            }
            let sd = (ss / 12.0).sqrt();
            for (a, b) in img.iter().zip(out) {
                assert!(((a - mean) / sd - b).abs() < 1e-12);
            }
            let m = out.iter().sum::<f64>() / 12.0;
            let s = (out.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 12.0).sqrt();
            assert!(m.abs() < 1e-10);
            assert!((s - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn rejects_bad_labels() {
        let t = Tensor::zeros(&[2, 1, 1, 1]);
        assert!(Dataset::new(t.clone(), vec![0, 3], 3, Split::Test).is_err());
        assert!(Dataset::new(t, vec![0], 3, Split::Test).is_err());
    }
}
