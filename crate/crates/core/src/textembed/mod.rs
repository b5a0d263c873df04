//! Paragraph embeddings per grid from its location text, under three
//! architectures: mean-pooled pretrained states, mean-pooled fine-tuned
//! states, and a trained 32-dim transfer head over frozen states.

pub mod encoder;
pub mod head;
pub mod store;
pub mod tokenizer;
pub mod train;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use encoder::{Encoder, EncoderConfig, EncoderWeights};
pub use head::{SigmoidPlacement, TransferHead, HEAD_DIM};
pub use store::{EmbeddingTable, StateSidecar};
pub use tokenizer::Tokenizer;
pub use train::{finetune_classifier, train_transfer_head, TrainConfig, TrainingLog};

use crate::error::{Error, Result};
use crate::geogrid::GridId;
use crate::ingest::{DisasterType, EventTable};
use crate::textcorpus::{CorpusCache, LocationText};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    PretrainedAvg,
    FinetunedAvg,
    TransferHead,
}

impl Architecture {
    pub const ALL: [Architecture; 3] = [
        Architecture::PretrainedAvg,
        Architecture::FinetunedAvg,
        Architecture::TransferHead,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Architecture::PretrainedAvg => "pretrained_avg",
            Architecture::FinetunedAvg => "finetuned_avg",
            Architecture::TransferHead => "transfer_head",
        }
    }

    /// Embedding width for a backbone of hidden width `hidden`.
    pub fn dimension(self, hidden: usize) -> usize {
        match self {
            Architecture::TransferHead => HEAD_DIM,
            _ => hidden,
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.as_str() == s.trim())
            .ok_or_else(|| Error::Configuration(format!("unknown architecture {s:?}")))
    }
}

/// Which hidden layer to read token states from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layer {
    #[default]
    SecondToLast,
}

/// Which tokens count when averaging.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskPolicy {
    /// Every non-padding token, `[CLS]` and `[SEP]` included.
    #[default]
    IncludeSpecial,
    ExcludeSpecial,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenEmbeddingSequence {
    /// `T × H`.
    pub matrix: Array2<f64>,
    pub attention_mask: Vec<bool>,
    /// Marks `[CLS]`/`[SEP]` rows.
    pub special: Vec<bool>,
}

impl TokenEmbeddingSequence {
    pub fn new(matrix: Array2<f64>, attention_mask: Vec<bool>) -> Result<Self> {
        if matrix.nrows() == 0 || matrix.nrows() != attention_mask.len() {
            return Err(Error::Degenerate(format!(
                "sequence of {} rows with mask of length {}",
                matrix.nrows(),
                attention_mask.len()
            )));
        }
        let special = vec![false; attention_mask.len()];
        Ok(Self {
            matrix,
            attention_mask,
            special,
        })
    }

    pub fn len(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.nrows() == 0
    }

    /// The attention mask with `policy` applied.
    pub fn effective_mask(&self, policy: MaskPolicy) -> Vec<bool> {
        self.attention_mask
            .iter()
            .zip(&self.special)
            .map(|(&m, &s)| m && !(s && policy == MaskPolicy::ExcludeSpecial))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub architecture: Architecture,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FloodinessLabel {
    pub grid: GridId,
    pub label: u8,
}

/// Per-token states of `text` from `layer`, `[CLS]` and `[SEP]` included.
pub fn encode_tokens(
    encoder: &Encoder,
    text: &str,
    layer: Layer,
) -> Result<TokenEmbeddingSequence> {
    if text.trim().is_empty() {
        return Err(Error::Degenerate("cannot encode empty text".into()));
    }
    let ids = encoder.token_ids(text);
    let trace = encoder.forward(&ids);
    let Layer::SecondToLast = layer;
    let matrix = trace.hidden[trace.hidden.len() - 2].clone();
    let n = ids.len();
    let special = (0..n).map(|i| i == 0 || i + 1 == n).collect();
    Ok(TokenEmbeddingSequence {
        matrix,
        attention_mask: vec![true; n],
        special,
    })
}

/// Arithmetic mean of the rows whose mask entry is true.
pub fn mean_pool(seq: &TokenEmbeddingSequence) -> Result<Vec<f64>> {
    pool_with(seq, &seq.attention_mask)
}

fn pool_with(seq: &TokenEmbeddingSequence, mask: &[bool]) -> Result<Vec<f64>> {
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(Error::Degenerate("attention mask selects no tokens".into()));
    }
    let mut out = vec![0.0; seq.matrix.ncols()];
    for (row, _) in seq.matrix.rows().into_iter().zip(mask).filter(|(_, &m)| m) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|o| *o /= n as f64);
    Ok(out)
}

/// Rows selected by the mask under `policy`, as a `T' × H` matrix.
pub(crate) fn masked_rows(
    seq: &TokenEmbeddingSequence,
    policy: MaskPolicy,
    _encoder: &Encoder,
) -> Result<Array2<f64>> {
    let mask = seq.effective_mask(policy);
    let keep: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    if keep.is_empty() {
        return Err(Error::Degenerate("attention mask selects no tokens".into()));
    }
    Ok(seq.matrix.select(ndarray::Axis(0), &keep))
}

/// Label 1 iff the grid has more than two flood events in the table.
pub fn label_floodiness(table: &EventTable, grids: &BTreeSet<GridId>) -> Vec<FloodinessLabel> {
    let floods = table.counts_by_grid(DisasterType::Flood);
    grids
        .iter()
        .map(|&grid| FloodinessLabel {
            grid,
            label: u8::from(floods.get(&grid).copied().unwrap_or(0) > 2),
        })
        .collect()
}

/// What an architecture needs beyond the pretrained backbone.
#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum TrainedState {
    Pretrained,
    Finetuned(Box<Encoder>),
    Head(TransferHead),
}

impl TrainedState {
    pub fn architecture(&self) -> Architecture {
        match self {
            TrainedState::Pretrained => Architecture::PretrainedAvg,
            TrainedState::Finetuned(_) => Architecture::FinetunedAvg,
            TrainedState::Head(_) => Architecture::TransferHead,
        }
    }
}

/// Paragraph embedding of one location under `architecture`.
pub fn embed_grid(
    backbone: &Encoder,
    text: &LocationText,
    architecture: Architecture,
    state: &TrainedState,
    policy: MaskPolicy,
) -> Result<EmbeddingVector> {
    if state.architecture() != architecture {
        return Err(Error::Configuration(format!(
            "{architecture} cannot use a {} state",
            state.architecture()
        )));
    }
    let values = match state {
        TrainedState::Pretrained => {
            let seq = encode_tokens(backbone, &text.text, Layer::SecondToLast)?;
            pool_with(&seq, &seq.effective_mask(policy))?
        }
        TrainedState::Finetuned(enc) => {
            let seq = encode_tokens(enc, &text.text, Layer::SecondToLast)?;
            pool_with(&seq, &seq.effective_mask(policy))?
        }
        TrainedState::Head(head) => {
            if head.hidden_size() != backbone.hidden_size() {
                return Err(Error::Configuration(format!(
                    "head expects width {}, backbone has {}",
                    head.hidden_size(),
                    backbone.hidden_size()
                )));
            }
            let seq = encode_tokens(backbone, &text.text, Layer::SecondToLast)?;
            head.embed(&masked_rows(&seq, policy, backbone)?).to_vec()
        }
    };
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate(format!(
            "non-finite embedding for grid {}",
            text.grid
        )));
    }
    Ok(EmbeddingVector {
        values,
        architecture,
    })
}

/// Embeds every entry of `corpus` restricted to `grids`.
pub fn embed_corpus(
    backbone: &Encoder,
    corpus: &CorpusCache,
    grids: &BTreeSet<GridId>,
    state: &TrainedState,
    policy: MaskPolicy,
    seed: u64,
) -> Result<EmbeddingTable> {
    let architecture = state.architecture();
    let mut table = EmbeddingTable::new(
        architecture,
        architecture.dimension(backbone.hidden_size()),
        backbone.checksum(),
        seed,
    );
    for &grid in grids {
        let text = corpus
            .get(grid)
            .ok_or_else(|| Error::Join(format!("grid {grid} has no corpus entry")))?;
        let v = embed_grid(backbone, text, architecture, state, policy)?;
        table.insert(grid, v.values)?;
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::GeoEvent;
    use crate::textcorpus::TextSource;
    use ndarray::array;
    use proptest::prelude::*;

    fn seq(m: Array2<f64>, mask: Vec<bool>) -> TokenEmbeddingSequence {
        TokenEmbeddingSequence::new(m, mask).unwrap()
    }

    #[test]
    fn mean_pool_examples() {
        let s = seq(array![[1.0, 3.0], [3.0, 5.0]], vec![true, true]);
        assert_eq!(mean_pool(&s).unwrap(), vec![2.0, 4.0]);
        let s = seq(array![[1.5, -2.0]], vec![true]);
        assert_eq!(mean_pool(&s).unwrap(), vec![1.5, -2.0]);
        let s = seq(array![[1.0, 1.0], [9.0, 9.0]], vec![true, false]);
        assert_eq!(mean_pool(&s).unwrap(), vec![1.0, 1.0]);
        let s = seq(array![[1.0, 1.0], [9.0, 9.0]], vec![false, false]);
        assert!(matches!(mean_pool(&s), Err(Error::Degenerate(_))));
    }

    proptest! {
        #[test]
        fn mean_pool_of_equal_rows_is_exact(v in prop::collection::vec(-1e6f64..1e6, 1..8), t in 1usize..20) {
            let m = Array2::from_shape_fn((t, v.len()), |(_, j)| v[j]);
            let s = seq(m, vec![true; t]);
            let pooled = mean_pool(&s).unwrap();
            // Sums of t equal values divided by t may round; bound it tightly.
            for (p, x) in pooled.iter().zip(&v) {
                prop_assert!((p - x).abs() <= x.abs() * 1e-15 * t as f64);
            }
        }
    }

    #[test]
    fn encode_tokens_contract() {
        let enc = Encoder::tiny(1);
        let s = encode_tokens(&enc, "missing", Layer::SecondToLast).unwrap();
        assert!(!s.is_empty());
        assert_eq!(s.matrix.ncols(), enc.hidden_size());
        assert!(s.matrix.iter().all(|v| v.is_finite()));
        let again = encode_tokens(&enc, "missing", Layer::SecondToLast).unwrap();
        assert_eq!(s, again);
        let long = "a".repeat(5) + &" river".repeat(2000);
        let s = encode_tokens(&enc, &long, Layer::SecondToLast).unwrap();
        assert_eq!(s.len(), enc.max_len());
        assert!(matches!(
            encode_tokens(&enc, "  ", Layer::SecondToLast),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn second_to_last_layer_is_read() {
        let enc = Encoder::tiny(2);
        let ids = enc.token_ids("river delta");
        let trace = enc.forward(&ids);
        let s = encode_tokens(&enc, "river delta", Layer::SecondToLast).unwrap();
        assert_eq!(s.matrix, trace.hidden[enc.config.n_layers - 1]);
        assert_ne!(s.matrix, trace.hidden[enc.config.n_layers]);
    }

    #[test]
    fn exclude_special_drops_first_and_last() {
        let enc = Encoder::tiny(3);
        let s = encode_tokens(&enc, "river delta", Layer::SecondToLast).unwrap();
        let mask = s.effective_mask(MaskPolicy::ExcludeSpecial);
        assert_eq!(mask, vec![false, true, true, false]);
        let pooled = pool_with(&s, &mask).unwrap();
        let expect: Vec<f64> = (0..s.matrix.ncols())
            .map(|j| (s.matrix[[1, j]] + s.matrix[[2, j]]) / 2.0)
            .collect();
        assert_eq!(pooled, expect);
    }

    fn text(grid: u32, t: &str) -> LocationText {
        LocationText {
            grid: GridId::new(grid).unwrap(),
            location_name: "X".into(),
            text: t.into(),
            source: TextSource::GeographySection,
            fetched_at: chrono::DateTime::UNIX_EPOCH,
        }
    }

    #[test]
    fn embed_grid_shapes_and_ranges() {
        let enc = Encoder::tiny(4);
        let t = text(10, "The river floods the delta every monsoon.");
        let a = embed_grid(
            &enc,
            &t,
            Architecture::PretrainedAvg,
            &TrainedState::Pretrained,
            MaskPolicy::default(),
        )
        .unwrap();
        assert_eq!(a.values.len(), enc.hidden_size());
        let b = embed_grid(
            &enc,
            &t,
            Architecture::PretrainedAvg,
            &TrainedState::Pretrained,
            MaskPolicy::default(),
        )
        .unwrap();
        assert_eq!(a, b);

        let head = TrainedState::Head(TransferHead::init(
            enc.hidden_size(),
            9,
            SigmoidPlacement::PerToken,
        ));
        let h = embed_grid(
            &enc,
            &t,
            Architecture::TransferHead,
            &head,
            MaskPolicy::default(),
        )
        .unwrap();
        assert_eq!(h.values.len(), HEAD_DIM);
        assert!(h.values.iter().all(|v| *v > 0.0 && *v < 1.0));

        let zero = TrainedState::Head(TransferHead::zeros(
            enc.hidden_size(),
            SigmoidPlacement::PerToken,
        ));
        let z = embed_grid(
            &enc,
            &t,
            Architecture::TransferHead,
            &zero,
            MaskPolicy::default(),
        )
        .unwrap();
        assert!(z.values.iter().all(|v| *v == 0.5));

        let err = embed_grid(
            &enc,
            &t,
            Architecture::FinetunedAvg,
            &TrainedState::Pretrained,
            MaskPolicy::default(),
        );
        assert!(matches!(err, Err(Error::Configuration(_))));
    }

    #[test]
    fn floodiness_labels() {
        let mk = |id: &str, kind: DisasterType, lat: f64| GeoEvent {
            record_id: id.into(),
            disaster_type: kind,
            year: 2000,
            lat,
            lon: 0.5,
            location_name: "P".into(),
            country: None,
            damage_cost: None,
            grid: crate::geogrid::locate(lat, 0.5).unwrap(),
        };
        let mut events = Vec::new();
        for i in 0..3 {
            events.push(mk(&format!("a{i}"), DisasterType::Flood, 0.5));
        }
        for i in 0..2 {
            events.push(mk(&format!("b{i}"), DisasterType::Flood, 1.5));
        }
        for i in 0..5 {
            events.push(mk(&format!("c{i}"), DisasterType::Storm, 2.5));
        }
        let table = EventTable::from_events(events).unwrap();
        let grids = crate::ingest::unique_grids(&table);
        let labels = label_floodiness(&table, &grids);
        let by: Vec<(f64, u8)> = labels
            .iter()
            .map(|l| (l.grid.cell().lat_floor() as f64 + 0.5, l.label))
            .collect();
        assert_eq!(by, vec![(0.5, 1), (1.5, 0), (2.5, 0)]);
    }
}
