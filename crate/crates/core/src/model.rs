//! Encoder + CNN head wired into one classifier, plus encoded datasets.

use std::collections::BTreeSet;

use crate::cnn::{init_head, predict, CnnHead, CnnHeadConfig};
use crate::encoder::{init_weights, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::metrics::{summarize, Metrics};
use crate::tape::{Tape, Var};
use crate::tensor::Real;
use crate::text::{encode, Dataset, TaskKind, Vocabulary};
use crate::weights::{Bound, ParamMap};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedExample {
    pub ids: Vec<usize>,
    pub valid_length: usize,
    /// Sorted gold label indices; exactly one for single-label tasks.
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedDataset {
    pub name: String,
    pub task_kind: TaskKind,
    pub label_space: Vec<String>,
    pub train: Vec<EncodedExample>,
    pub test: Vec<EncodedExample>,
}

impl EncodedDataset {
    pub fn classes(&self) -> usize {
        self.label_space.len()
    }
}

pub fn encode_dataset(dataset: &Dataset, vocab: &Vocabulary, max_len: usize) -> Result<EncodedDataset> {
    let enc = |split: &[crate::text::LabeledExample]| -> Result<Vec<EncodedExample>> {
        split
            .iter()
            .map(|e| {
                let x = encode(&e.text, vocab, max_len)?;
                Ok(EncodedExample {
                    ids: x.ids,
                    valid_length: x.valid_length,
                    labels: dataset.label_indices(e),
                })
            })
            .collect()
    };
    Ok(EncodedDataset {
        name: dataset.name.clone(),
        task_kind: dataset.task_kind,
        label_space: dataset.label_space.clone(),
        train: enc(&dataset.train)?,
        test: enc(&dataset.test)?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classifier<T: Real = f32> {
    pub encoder: Encoder<T>,
    pub head: CnnHead<T>,
}

impl<T: Real> Classifier<T> {
    pub fn new(encoder: Encoder<T>, head: CnnHead<T>) -> Result<Self> {
        if encoder.config.hidden != head.config.hidden {
            return Err(Error::InvalidConfig(format!(
                "encoder width {} does not match head input {}",
                encoder.config.hidden, head.config.hidden
            )));
        }
        Ok(Self { encoder, head })
    }

    /// Pairs `encoder` with a freshly initialized head.
    pub fn with_new_head(encoder: Encoder<T>, head: CnnHeadConfig, seed: u64) -> Result<Self> {
        let weights = init_head(&head, seed)?.cast();
        Self::new(encoder, CnnHead::new(head, weights)?)
    }

    /// Random encoder and head, each from its own seed.
    pub fn random(encoder: EncoderConfig, encoder_seed: u64, head: CnnHeadConfig, head_seed: u64) -> Result<Self> {
        let weights = init_weights(&encoder, encoder_seed)?.cast();
        Self::with_new_head(Encoder::new(encoder, weights)?, head, head_seed)
    }

    pub fn param_count(&self) -> usize {
        self.encoder.weights.param_count() + self.head.weights.param_count()
    }

    pub fn cast<U: Real>(&self) -> Classifier<U> {
        Classifier {
            encoder: self.encoder.cast(),
            head: self.head.cast(),
        }
    }

    /// Encoder and head weights in one map (names are prefixed per owner).
    pub fn weights(&self) -> Result<ParamMap<T>> {
        let mut all = self.encoder.weights.clone();
        all.merge(self.head.weights.clone())?;
        Ok(all)
    }

    /// Positions actually computed for an example. Hidden rows past the valid
    /// length never reach the logits (attention masks them as keys and the head
    /// skips windows that touch them), so only the prefix is encoded. Inputs
    /// shorter than the widest kernel are extended into their padding.
    pub fn span(&self, ids: &[usize], valid_length: usize) -> Result<usize> {
        let span = valid_length.max(self.head.config.max_kernel()).min(ids.len());
        if span < self.head.config.max_kernel() {
            return Err(Error::InvalidArgument(format!(
                "sequence of {} ids is shorter than kernel size {}",
                ids.len(),
                self.head.config.max_kernel()
            )));
        }
        Ok(span)
    }

    /// Hidden states on `tape`. With `encoder` bound on the tape the encoder is
    /// recorded for backward; otherwise it runs on a throwaway inference tape
    /// and only its output is kept, as a constant.
    pub fn hidden_states(
        &self,
        tape: &mut Tape<'_, T>,
        encoder: Option<&Bound>,
        ids: &[usize],
        valid_length: usize,
    ) -> Result<(Var, usize)> {
        let span = self.span(ids, valid_length)?;
        let valid = valid_length.min(span);
        let hidden = match encoder {
            Some(b) => self.encoder.forward(tape, b, &ids[..span], valid)?,
            None => {
                let mut scratch = tape.scratch();
                let b = self.encoder.bind(&mut scratch);
                let h = self.encoder.forward(&mut scratch, &b, &ids[..span], valid)?;
                let value = scratch.into_value(h);
                tape.constant(value)
            }
        };
        Ok((hidden, span))
    }

    pub fn logits(
        &self,
        tape: &mut Tape<'_, T>,
        encoder: Option<&Bound>,
        head: &Bound,
        ids: &[usize],
        valid_length: usize,
    ) -> Result<Var> {
        let (hidden, span) = self.hidden_states(tape, encoder, ids, valid_length)?;
        self.head.forward(tape, head, hidden, span)
    }

    /// Logits `[B x C]` for a minibatch.
    pub fn batch_logits(
        &self,
        tape: &mut Tape<'_, T>,
        encoder: Option<&Bound>,
        head: &Bound,
        batch: &[&EncodedExample],
    ) -> Result<Var> {
        let rows = batch
            .iter()
            .map(|ex| self.logits(tape, encoder, head, &ex.ids, ex.valid_length))
            .collect::<Result<Vec<_>>>()?;
        tape.stack(&rows)
    }

    /// Logits without recording anything for backward.
    pub fn infer(&self, ids: &[usize], valid_length: usize) -> Result<Vec<T>> {
        let mut tape = Tape::inference();
        let head = self.head.bind(&mut tape);
        let y = self.logits(&mut tape, None, &head, ids, valid_length)?;
        Ok(tape.value(y).data().to_vec())
    }
}

/// Predicts every example and scores against its gold labels.
pub fn evaluate<T: Real>(
    model: &Classifier<T>,
    examples: &[EncodedExample],
    task: TaskKind,
    threshold: f64,
) -> Result<Metrics> {
    let mut preds = Vec::with_capacity(examples.len());
    let mut golds = Vec::with_capacity(examples.len());
    for ex in examples {
        let logits = model.infer(&ex.ids, ex.valid_length)?;
        preds.push(predict(&logits, task, threshold).into_iter().collect::<BTreeSet<_>>());
        golds.push(ex.labels.iter().copied().collect::<BTreeSet<_>>());
    }
    summarize(&preds, &golds)
}
