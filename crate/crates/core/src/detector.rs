//! Anomaly scoring head `f = σ(φ_a(z̃) + b)` and its cross-entropy objective.

use crate::autodiff::{Adam, ParamId, ParamStore, Result, Tape, Var, BCE_CLAMP};
use crate::linalg::{Matrix, Vector};
use crate::nn::{Mlp2, Scope};
use crate::rng::{self, derive_seed};

/// One scored edge of a test snapshot.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredEdge {
    pub t: usize,
    pub src: usize,
    pub dst: usize,
    pub score: f64,
    pub label: Option<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorConfig {
    pub dim: usize,
    /// Average the cross-entropy over edges instead of summing.
    pub mean_loss: bool,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detector {
    pub config: DetectorConfig,
    pub store: ParamStore,
    phi: Mlp2,
    bias: ParamId,
}

/// `−Σ[(1−y)·ln(1−f) + y·ln f]` with scores clamped to `[1e-7, 1−1e-7]`.
pub fn bce_loss(scores: &[f64], labels: &[u8]) -> f64 {
    scores
        .iter()
        .zip(labels)
        .map(|(&f, &y)| {
            let f = f.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            if y == 1 {
                -f.ln()
            } else {
                -(1.0 - f).ln()
            }
        })
        .sum()
}

impl Detector {
    pub fn new(config: DetectorConfig) -> Self {
        let mut r = rng::rng(derive_seed(config.seed, "detector-init", 0));
        let mut store = ParamStore::new();
        let d = config.dim;
        let phi = Mlp2::new(&mut store, "det.phi", (d, d, 1), false, &mut r);
        let bias = store.add("det.b", Matrix::zeros(1, 1));
        Self {
            config,
            store,
            phi,
            bias,
        }
    }

    pub fn bias(&self) -> f64 {
        self.store.value(self.bias).item()
    }

    pub fn set_bias(&mut self, b: f64) {
        self.store.value_mut(self.bias).data_mut()[0] = b;
    }

    pub(crate) fn scores_tape(&self, scope: Scope, tape: &mut Tape, z: Var) -> Result<Var> {
        let logits = self.phi.forward(scope, tape, z)?;
        let b = scope.bind(tape, self.bias);
        let logits = tape.add_row(logits, b)?;
        Ok(tape.sigmoid(logits))
    }

    /// Scores every row of `z` (rows are whitened edge embeddings).
    pub fn score_rows(&self, z: &Matrix) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let s = self.scores_tape(Scope::frozen(&self.store), &mut tape, zv)?;
        Ok(tape.value(s).data().to_vec())
    }

    pub fn score(&self, z: &Vector) -> Result<f64> {
        Ok(self.score_rows(&z.to_row_matrix())?[0])
    }

    pub(crate) fn loss_tape(
        &self,
        scope: Scope,
        tape: &mut Tape,
        z: &Matrix,
        labels: &[u8],
    ) -> Result<Var> {
        let zv = tape.constant(z.clone());
        let s = self.scores_tape(scope, tape, zv)?;
        let y: Vec<f64> = labels.iter().map(|&l| f64::from(l)).collect();
        tape.bce(s, &y, self.config.mean_loss)
    }

    /// One Adam update on the cross-entropy of `(z, labels)`; returns the loss.
    pub fn train_step(&mut self, adam: &mut Adam, z: &Matrix, labels: &[u8]) -> Result<f64> {
        let mut tape = Tape::new();
        let loss = self.loss_tape(Scope::train(&self.store), &mut tape, z, labels)?;
        tape.backward(loss, &mut self.store)?;
        adam.step(&mut self.store);
        Ok(tape.value(loss).item())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::AdamConfig;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    fn detector(d: usize) -> Detector {
        Detector::new(DetectorConfig {
            dim: d,
            mean_loss: false,
            seed: 2,
        })
    }

    #[test]
    fn zero_weights_give_half() {
        let mut det = detector(3);
        for id in det.store.ids().collect::<Vec<_>>() {
            det.store.value_mut(id).data_mut().fill(0.0);
        }
        assert_eq!(det.score(&Vector::from(vec![1.0, -4.0, 2.0])).unwrap(), 0.5);
        det.set_bias(1e3);
        assert!(det.score(&Vector::from(vec![1.0, -4.0, 2.0])).unwrap() > 1.0 - 1e-12);
    }

    #[test]
    fn bce_values() {
        assert!((bce_loss(&[0.5; 4], &[0, 1, 0, 1]) - 4.0 * 2f64.ln()).abs() < 1e-12);
        assert!(bce_loss(&[1e-9, 1.0 - 1e-9], &[0, 1]) < 1e-6);
        assert!((bce_loss(&[0.0], &[1]) + BCE_CLAMP.ln()).abs() < 1e-9);
    }

    #[test]
    fn loss_drops_on_separable_data() {
        let mut det = detector(4);
        let mut r = rng::rng(8);
        let z = Matrix::from_fn(200, 4, |i, _| {
            let e: f64 = StandardNormal.sample(&mut r);
            e + if i % 2 == 0 { 0.0 } else { 3.0 }
        });
        let labels: Vec<u8> = (0..200).map(|i| (i % 2) as u8).collect();
        let mut adam = Adam::new(&det.store, AdamConfig::with_lr(1e-2));
        let first = det.train_step(&mut adam, &z, &labels).unwrap();
        let mut last = first;
        for _ in 0..50 {
            last = det.train_step(&mut adam, &z, &labels).unwrap();
        }
        assert!(last < first);
        let s = det.score_rows(&z).unwrap();
        assert!(
            (bce_loss(&s, &labels) - det.train_step(&mut adam, &z, &labels).unwrap()).abs() < 1e-9
        );
    }

    proptest! {
        #[test]
        fn scores_bounded_and_monotone_in_bias(vals in proptest::collection::vec(-10.0f64..10.0, 3), b in -5.0f64..5.0) {
            let mut det = detector(3);
            let z = Vector::from(vals);
            det.set_bias(b);
            let s0 = det.score(&z).unwrap();
            prop_assert!(s0 > 0.0 && s0 < 1.0);
            prop_assert_eq!(s0, det.score(&z).unwrap());
            det.set_bias(b + 0.5);
            prop_assert!(det.score(&z).unwrap() > s0);
        }
    }
}
