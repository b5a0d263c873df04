//! Supervised adaptation of the text encoder on floodiness labels: full
//! fine-tuning with a sequence-classification head, or training only the
//! transfer head over frozen token states.

use std::collections::BTreeMap;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::encoder::{Encoder, EncoderWeights, Linear};
use super::head::{bce_with_logit, sigmoid, SigmoidPlacement, TransferHead};
use super::{FloodinessLabel, MaskPolicy};
use crate::error::{Error, Result};
use crate::geogrid::GridId;
use crate::textcorpus::CorpusCache;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Overrides the per-architecture default when set.
    pub learning_rate: Option<f64>,
    pub batch_size: usize,
    pub seed: u64,
    pub train_fraction: f64,
    pub mask_policy: MaskPolicy,
    pub sigmoid_placement: SigmoidPlacement,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            learning_rate: None,
            batch_size: 16,
            seed: 0,
            train_fraction: 0.7,
            mask_policy: MaskPolicy::IncludeSpecial,
            sigmoid_placement: SigmoidPlacement::PerToken,
        }
    }
}

pub const FINETUNE_LR: f64 = 2e-5;
pub const HEAD_LR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: Option<f64>,
    pub validation_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub n_train: usize,
    pub n_validation: usize,
    pub learning_rate: f64,
    pub epochs: Vec<EpochLog>,
}

/// Adam with bias correction over a flat list of parameter tensors.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, shapes: &[usize]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn update(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>, scale: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                let gj = g[j] * scale;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                p[j] -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Labeled documents split into train/validation by grid.
struct Split {
    train: Vec<(GridId, String, f64)>,
    validation: Vec<(GridId, String, f64)>,
}

fn join_and_split(
    corpus: &CorpusCache,
    labels: &[FloodinessLabel],
    cfg: &TrainConfig,
) -> Result<Split> {
    if !(0.0..=1.0).contains(&cfg.train_fraction) {
        return Err(Error::Configuration(format!(
            "train_fraction {} outside [0, 1]",
            cfg.train_fraction
        )));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Configuration("batch_size must be positive".into()));
    }
    let by_grid: BTreeMap<GridId, u8> = labels.iter().map(|l| (l.grid, l.label)).collect();
    if by_grid.is_empty() {
        return Err(Error::Join("no labeled locations".into()));
    }
    let mut docs = Vec::with_capacity(by_grid.len());
    for (&grid, &label) in &by_grid {
        let text = corpus
            .get(grid)
            .ok_or_else(|| Error::Join(format!("grid {grid} has a label but no corpus entry")))?;
        docs.push((grid, text.text.clone(), label as f64));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    docs.shuffle(&mut rng);
    let n_train = ((docs.len() as f64) * cfg.train_fraction).round() as usize;
    let validation = docs.split_off(n_train.clamp(1, docs.len()));
    Ok(Split {
        train: docs,
        validation,
    })
}

/// The sequence-classification head used while fine-tuning: `[CLS]` of the
/// last layer → `H×H` + ReLU → `H×1` logit.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub pre: Linear,
    pub out: Linear,
}

impl ClassifierHead {
    fn init(hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c1a5);
        let normal = Normal::new(0.0, 0.02).expect("positive std");
        let mut pre = Linear::zeros(hidden, hidden);
        pre.w.mapv_inplace(|_| normal.sample(&mut rng));
        let mut out = Linear::zeros(hidden, 1);
        out.w.mapv_inplace(|_| normal.sample(&mut rng));
        Self { pre, out }
    }

    fn zeros_like(&self) -> Self {
        let h = self.pre.w.nrows();
        Self {
            pre: Linear::zeros(h, h),
            out: Linear::zeros(h, 1),
        }
    }

    fn tensors(&self) -> Vec<&[f64]> {
        [&self.pre, &self.out]
            .into_iter()
            .flat_map(|l| {
                [
                    l.w.as_slice().expect("standard layout"),
                    l.b.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let (pre, out) = (&mut self.pre, &mut self.out);
        vec![
            pre.w.as_slice_mut().expect("standard layout"),
            pre.b.as_slice_mut().expect("standard layout"),
            out.w.as_slice_mut().expect("standard layout"),
            out.b.as_slice_mut().expect("standard layout"),
        ]
    }

    /// Checkpoint tensors in `out × in` layout.
    pub fn checkpoint_tensors(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let t = |l: &Linear| {
            l.w.t()
                .as_standard_layout()
                .iter()
                .copied()
                .collect::<Vec<_>>()
        };
        let h = self.pre.w.nrows();
        vec![
            ("pre_classifier.weight".into(), vec![h, h], t(&self.pre)),
            ("pre_classifier.bias".into(), vec![h], self.pre.b.to_vec()),
            ("classifier.weight".into(), vec![1, h], t(&self.out)),
            ("classifier.bias".into(), vec![1], self.out.b.to_vec()),
        ]
    }

    pub fn from_checkpoint(hidden: usize, tensors: &super::encoder::ExtraTensors) -> Option<Self> {
        let get = |n: &str| tensors.get(n);
        let (pw_shape, pw) = get("pre_classifier.weight")?;
        let (_, pb) = get("pre_classifier.bias")?;
        let (cw_shape, cw) = get("classifier.weight")?;
        let (_, cb) = get("classifier.bias")?;
        if pw_shape != &vec![hidden, hidden] || cw_shape != &vec![1, hidden] {
            return None;
        }
        let pre_w = Array2::from_shape_vec((hidden, hidden), pw.clone())
            .ok()?
            .reversed_axes();
        let out_w = Array2::from_shape_vec((1, hidden), cw.clone())
            .ok()?
            .reversed_axes();
        Some(Self {
            pre: Linear {
                w: pre_w.as_standard_layout().into_owned(),
                b: pb.clone().into(),
            },
            out: Linear {
                w: out_w.as_standard_layout().into_owned(),
                b: cb.clone().into(),
            },
        })
    }

    fn logit(&self, cls: &Array2<f64>) -> (f64, Array2<f64>, Array2<f64>) {
        let z = self.pre.forward(cls);
        let r = z.mapv(|v| v.max(0.0));
        let logit = self.out.forward(&r)[[0, 0]];
        (logit, z, r)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetunedEncoder {
    pub encoder: Encoder,
    pub classifier: ClassifierHead,
    pub log: TrainingLog,
}

fn cls_row(hidden: &Array2<f64>) -> Array2<f64> {
    hidden.row(0).to_owned().insert_axis(Axis(0))
}

/// Fine-tunes every encoder parameter plus a fresh classification head on
/// the floodiness labels. Zero epochs returns the encoder untouched.
pub fn finetune_classifier(
    base: &Encoder,
    corpus: &CorpusCache,
    labels: &[FloodinessLabel],
    cfg: &TrainConfig,
) -> Result<FinetunedEncoder> {
    let split = join_and_split(corpus, labels, cfg)?;
    let lr = cfg.learning_rate.unwrap_or(FINETUNE_LR);
    let mut encoder = base.clone();
    let mut head = ClassifierHead::init(encoder.hidden_size(), cfg.seed);
    let tokenize = |docs: &[(GridId, String, f64)], enc: &Encoder| -> Vec<(Vec<u32>, f64)> {
        docs.iter()
            .map(|(_, t, y)| (enc.token_ids(t), *y))
            .collect()
    };
    let train = tokenize(&split.train, &encoder);
    let validation = tokenize(&split.validation, &encoder);

    let sizes = |enc: &EncoderWeights, h: &ClassifierHead| -> Vec<usize> {
        enc.named_tensors()
            .iter()
            .map(|(_, t)| t.len())
            .chain(h.tensors().iter().map(|t| t.len()))
            .collect()
    };
    let mut adam = Adam::new(lr, &sizes(&encoder.weights, &head));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut log = TrainingLog {
        n_train: train.len(),
        n_validation: validation.len(),
        learning_rate: lr,
        epochs: Vec::new(),
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut g_enc = EncoderWeights::zeros(&encoder.config);
            let mut g_head = head.zeros_like();
            for &i in batch {
                let (ids, y) = &train[i];
                let trace = encoder.forward(ids);
                let last = trace.hidden.last().expect("at least one layer");
                let cls = cls_row(last);
                let (logit, z, r) = head.logit(&cls);
                total += bce_with_logit(logit, *y);
                let dlogit = Array2::from_elem((1, 1), sigmoid(logit) - y);
                let dr = head.out.backward(&r, &dlogit, &mut g_head.out);
                let dz = dr * &z.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                let dcls = head.pre.backward(&cls, &dz, &mut g_head.pre);
                let mut d_last = Array2::zeros(last.raw_dim());
                d_last.row_mut(0).assign(&dcls.row(0));
                encoder.backward(&trace, &d_last, &mut g_enc);
            }
            let scale = 1.0 / batch.len() as f64;
            let mut params = encoder.weights.tensors_mut();
            params.extend(head.tensors_mut());
            let mut grads: Vec<&[f64]> =
                g_enc.named_tensors().into_iter().map(|(_, t)| t).collect();
            grads.extend(g_head.tensors());
            adam.update(params, grads, scale);
        }
        let (val_loss, val_acc) = evaluate(&validation, |ids| {
            let trace = encoder.forward(ids);
            head.logit(&cls_row(trace.hidden.last().expect("layers"))).0
        });
        log.epochs.push(EpochLog {
            epoch: epoch + 1,
            train_loss: total / train.len().max(1) as f64,
            validation_loss: val_loss,
            validation_accuracy: val_acc,
        });
    }
    Ok(FinetunedEncoder {
        encoder,
        classifier: head,
        log,
    })
}

fn evaluate<T>(docs: &[(T, f64)], mut logit: impl FnMut(&T) -> f64) -> (Option<f64>, Option<f64>) {
    if docs.is_empty() {
        return (None, None);
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (x, y) in docs {
        let l = logit(x);
        loss += bce_with_logit(l, *y);
        if (sigmoid(l) >= 0.5) == (*y >= 0.5) {
            correct += 1;
        }
    }
    let n = docs.len() as f64;
    (Some(loss / n), Some(correct as f64 / n))
}

/// Trains only the transfer head; the backbone is borrowed immutably and
/// its token states are computed once up front.
pub fn train_transfer_head(
    backbone: &Encoder,
    corpus: &CorpusCache,
    labels: &[FloodinessLabel],
    cfg: &TrainConfig,
) -> Result<(TransferHead, TrainingLog)> {
    let split = join_and_split(corpus, labels, cfg)?;
    let lr = cfg.learning_rate.unwrap_or(HEAD_LR);
    let states = |docs: &[(GridId, String, f64)]| -> Result<Vec<(Array2<f64>, f64)>> {
        docs.iter()
            .map(|(_, text, y)| {
                let seq = super::encode_tokens(backbone, text, super::Layer::SecondToLast)?;
                Ok((super::masked_rows(&seq, cfg.mask_policy, backbone)?, *y))
            })
            .collect()
    };
    let train = states(&split.train)?;
    let validation = states(&split.validation)?;

    let mut head = TransferHead::init(backbone.hidden_size(), cfg.seed, cfg.sigmoid_placement);
    let sizes: Vec<usize> = head.tensors().iter().map(|t| t.len()).collect();
    let mut adam = Adam::new(lr, &sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut log = TrainingLog {
        n_train: train.len(),
        n_validation: validation.len(),
        learning_rate: lr,
        epochs: Vec::new(),
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grad = TransferHead::zeros(head.hidden_size(), head.placement);
            for &i in batch {
                let (tokens, y) = &train[i];
                total += head.loss_and_grad(tokens, *y, &mut grad);
            }
            adam.update(head.tensors_mut(), grad.tensors(), 1.0 / batch.len() as f64);
        }
        let (val_loss, val_acc) = evaluate(&validation, |t| head.logit(t));
        log.epochs.push(EpochLog {
            epoch: epoch + 1,
            train_loss: total / train.len().max(1) as f64,
            validation_loss: val_loss,
            validation_accuracy: val_acc,
        });
    }
    Ok((head, log))
}

/// Mean training loss of `head` over the labeled corpus under `cfg`'s split,
/// for monitoring outside the training loop.
pub fn transfer_head_train_loss(
    backbone: &Encoder,
    head: &TransferHead,
    corpus: &CorpusCache,
    labels: &[FloodinessLabel],
    cfg: &TrainConfig,
) -> Result<f64> {
    let split = join_and_split(corpus, labels, cfg)?;
    let mut total = 0.0;
    for (_, text, y) in &split.train {
        let seq = super::encode_tokens(backbone, text, super::Layer::SecondToLast)?;
        total += head.loss(&super::masked_rows(&seq, cfg.mask_policy, backbone)?, *y);
    }
    Ok(total / split.train.len() as f64)
}
