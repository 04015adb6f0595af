//! Pair distance and the contrastive objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::PairLabel;

/// Output of the embedder for one sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Embedding(self.0.iter().map(|v| v * factor).collect())
    }
}

pub fn euclidean_distance(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Domain(format!(
            "embedding dimensions differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(distance(a.as_slice(), b.as_slice()))
}

pub(crate) fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// `(1 - L) d^2 / 2 + L max(0, margin - d)^2 / 2` with `L = 0` for genuine and
/// `L = 1` for impostor pairs.
pub fn contrastive_loss(d: f64, label: PairLabel, margin: f64) -> f64 {
    match label {
        PairLabel::Genuine => 0.5 * d * d,
        PairLabel::Impostor => {
            let gap = (margin - d).max(0.0);
            0.5 * gap * gap
        }
    }
}

/// Gradient of [`contrastive_loss`] with respect to the left embedding, given
/// `diff = left - right` and `d = |diff|`. The right embedding receives the
/// negation. An impostor pair at `d = 0` has no defined direction; it gets a
/// zero gradient.
pub(crate) fn contrastive_grad_coeff(d: f64, label: PairLabel, margin: f64) -> f64 {
    match label {
        PairLabel::Genuine => 1.0,
        PairLabel::Impostor => {
            if d > 0.0 && d < margin {
                -(margin - d) / d
            } else {
                0.0
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distance_cases() {
        let a = Embedding(vec![1.0, 0.0]);
        let b = Embedding(vec![0.0, 1.0]);
        assert_eq!(euclidean_distance(&a, &a).unwrap(), 0.0);
        assert!((euclidean_distance(&a, &b).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert!(euclidean_distance(&a, &Embedding(vec![1.0])).is_err());
    }

    #[test]
    fn loss_cases() {
        assert_eq!(contrastive_loss(0.0, PairLabel::Genuine, 1.5), 0.0);
        assert_eq!(contrastive_loss(1.5, PairLabel::Impostor, 1.5), 0.0);
        assert_eq!(contrastive_loss(1.0, PairLabel::Genuine, 1.5), 0.5);
        assert_eq!(contrastive_loss(0.5, PairLabel::Impostor, 1.5), 0.5);
        assert_eq!(contrastive_loss(3.0, PairLabel::Impostor, 1.5), 0.0);
    }
}
