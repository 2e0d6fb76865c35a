//! Evaluation metrics: exact match, token-level ROUGE-L, and the
//! round-aggregate MTA / MTAL figures.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fraction of predictions equal to the reference token sequence.
pub fn exact_match_accuracy(predictions: &[Vec<usize>], references: &[Vec<usize>]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::Invalid("exact_match_accuracy: empty example set".into()));
    }
    if predictions.len() != references.len() {
        return Err(Error::Invalid(format!(
            "exact_match_accuracy: {} predictions vs {} references",
            predictions.len(),
            references.len()
        )));
    }
    let hits = predictions.iter().zip(references).filter(|(p, r)| p == r).count();
    Ok(hits as f64 / predictions.len() as f64)
}

fn lcs_len(a: &[usize], b: &[usize]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for &x in a {
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Token-level ROUGE-L F1 (beta = 1): P = LCS/|hyp|, R = LCS/|ref|.
pub fn rouge_l(hypothesis: &[usize], reference: &[usize]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Invalid("rouge_l: empty reference".into()));
    }
    if hypothesis.is_empty() {
        return Ok(0.0);
    }
    let lcs = lcs_len(hypothesis, reference);
    if lcs == 0 {
        return Ok(0.0);
    }
    let p = lcs as f64 / hypothesis.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    Ok(2.0 * p * r / (p + r))
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MetricRecord {
    pub round: usize,
    /// acc_i for client i, in client order.
    pub client_acc: Vec<f64>,
    /// mean local training loss per client this round (empty when not trained)
    pub client_loss: Vec<f64>,
    /// number of domain experts assigned per client this round
    pub experts_assigned: Vec<usize>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct MetricLog {
    pub records: Vec<MetricRecord>,
}

impl MetricLog {
    pub fn push(&mut self, record: MetricRecord) -> Result<()> {
        let expected = self.records.len() + 1;
        if record.round != expected {
            return Err(Error::Invalid(format!(
                "metric log: expected round {}, got {}",
                expected, record.round
            )));
        }
        Ok(self.records.push(record))
    }

    /// Mean test accuracy across clients at round t (1-based).
    pub fn mta(&self, t: usize) -> Result<f64> {
        let rec = self
            .records
            .get(t.checked_sub(1).ok_or_else(|| Error::Invalid("mta: rounds are 1-based".into()))?)
            .ok_or_else(|| Error::Invalid(format!("mta: no record for round {}", t)))?;
        if rec.client_acc.is_empty() {
            return Err(Error::Invalid("mta: record has no client accuracies".into()));
        }
        Ok(rec.client_acc.iter().sum::<f64>() / rec.client_acc.len() as f64)
    }

    /// MTA at the final round.
    pub fn mtal(&self) -> Result<f64> {
        if self.records.is_empty() {
            return Err(Error::Invalid("mtal: empty log".into()));
        }
        self.mta(self.records.len())
    }
}
