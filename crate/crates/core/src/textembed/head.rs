//! Trainable projection on top of a frozen encoder: per-token `H → 32`
//! linear map with a sigmoid, averaged into a paragraph vector, plus a
//! `32 → 1` readout used only while training.

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::encoder::Linear;

pub const HEAD_DIM: usize = 32;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmoidPlacement {
    /// Sigmoid on every token's projection, then average.
    #[default]
    PerToken,
    /// Average the projections, then one sigmoid.
    PostAverage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferHead {
    /// `H × 32`.
    pub proj: Linear,
    /// `32 × 1`.
    pub readout: Linear,
    pub placement: SigmoidPlacement,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy on a logit, stable for large magnitudes.
pub(crate) fn bce_with_logit(logit: f64, label: f64) -> f64 {
    logit.max(0.0) - logit * label + (-logit.abs()).exp().ln_1p()
}

impl TransferHead {
    /// Projection uniform in ±1/√H, readout zero.
    pub fn init(hidden: usize, seed: u64, placement: SigmoidPlacement) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut proj = Linear::zeros(hidden, HEAD_DIM);
        proj.w.mapv_inplace(|_| rng.random_range(-bound..bound));
        proj.b.mapv_inplace(|_| rng.random_range(-bound..bound));
        Self {
            proj,
            readout: Linear::zeros(HEAD_DIM, 1),
            placement,
        }
    }

    pub fn zeros(hidden: usize, placement: SigmoidPlacement) -> Self {
        Self {
            proj: Linear::zeros(hidden, HEAD_DIM),
            readout: Linear::zeros(HEAD_DIM, 1),
            placement,
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.proj.w.nrows()
    }

    /// Paragraph vector from the selected (already masked) token rows.
    pub fn embed(&self, tokens: &Array2<f64>) -> Array1<f64> {
        let z = self.proj.forward(tokens);
        match self.placement {
            SigmoidPlacement::PerToken => z.mapv(sigmoid).mean_axis(Axis(0)).expect("non-empty"),
            SigmoidPlacement::PostAverage => z.mean_axis(Axis(0)).expect("non-empty").mapv(sigmoid),
        }
    }

    pub fn logit(&self, tokens: &Array2<f64>) -> f64 {
        let e = self.embed(tokens);
        e.dot(&self.readout.w.column(0)) + self.readout.b[0]
    }

    pub fn loss(&self, tokens: &Array2<f64>, label: f64) -> f64 {
        bce_with_logit(self.logit(tokens), label)
    }

    /// Loss on one document; adds `dL/dθ` into `grad`.
    pub fn loss_and_grad(&self, tokens: &Array2<f64>, label: f64, grad: &mut TransferHead) -> f64 {
        let t = tokens.nrows() as f64;
        let z = self.proj.forward(tokens);
        let (e, dz) = match self.placement {
            SigmoidPlacement::PerToken => {
                let s = z.mapv(sigmoid);
                let e = s.mean_axis(Axis(0)).expect("non-empty");
                (e, Some(s))
            }
            SigmoidPlacement::PostAverage => {
                (z.mean_axis(Axis(0)).expect("non-empty").mapv(sigmoid), None)
            }
        };
        let logit = e.dot(&self.readout.w.column(0)) + self.readout.b[0];
        let dlogit = sigmoid(logit) - label;

        grad.readout.w.column_mut(0).scaled_add(dlogit, &e);
        grad.readout.b[0] += dlogit;
        let de = self.readout.w.column(0).mapv(|w| w * dlogit);

        let dz = match dz {
            Some(s) => {
                // d/dz of mean_t sigmoid(z_t) = s(1-s)/T per token.
                let mut d = s.mapv(|v| v * (1.0 - v) / t);
                d *= &de.view().insert_axis(Axis(0));
                d
            }
            None => {
                let dmean = &de * &e.mapv(|v| v * (1.0 - v));
                let row = dmean / t;
                row.broadcast((tokens.nrows(), HEAD_DIM))
                    .expect("broadcast")
                    .to_owned()
            }
        };
        grad.proj.w += &tokens.t().dot(&dz);
        grad.proj.b += &dz.sum_axis(Axis(0));
        bce_with_logit(logit, label)
    }

    pub(crate) fn tensors(&self) -> Vec<&[f64]> {
        vec![
            self.proj.w.as_slice().expect("standard layout"),
            self.proj.b.as_slice().expect("standard layout"),
            self.readout.w.as_slice().expect("standard layout"),
            self.readout.b.as_slice().expect("standard layout"),
        ]
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.proj.w.as_slice_mut().expect("standard layout"),
            self.proj.b.as_slice_mut().expect("standard layout"),
            self.readout.w.as_slice_mut().expect("standard layout"),
            self.readout.b.as_slice_mut().expect("standard layout"),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_head_gives_half() {
        let head = TransferHead::zeros(4, SigmoidPlacement::PerToken);
        let tokens = Array2::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as f64);
        assert!(head.embed(&tokens).iter().all(|v| *v == 0.5));
    }

    #[test]
    fn init_bounds_and_zero_readout() {
        let head = TransferHead::init(16, 3, SigmoidPlacement::PerToken);
        assert!(head.proj.w.iter().all(|v| v.abs() <= 0.25));
        assert!(head.readout.w.iter().all(|v| *v == 0.0));
        assert_eq!(head.proj.w.dim(), (16, HEAD_DIM));
    }

    #[test]
    fn bce_is_stable() {
        assert!((bce_with_logit(0.0, 1.0) - 2f64.ln()).abs() < 1e-15);
        assert!(bce_with_logit(800.0, 1.0) < 1e-300);
        assert!((bce_with_logit(-800.0, 1.0) - 800.0).abs() < 1e-9);
    }
}
