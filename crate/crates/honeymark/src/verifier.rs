//! Black-box verification: loss-gap queries, threshold calibration, and
//! per-sample verdicts.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasets::ImageSample;
use crate::diffnet::{cross_entropy, forward, Classifier, PredictionVector};
use crate::error::{Error, Result};
use crate::honeygen::HoneySet;

/// Anything that answers one prediction query per image, as a suspicious
/// third-party service would.
pub trait BlackBoxModel: Sync {
    fn predict(&self, sample: &ImageSample) -> Result<PredictionVector>;
}

/// In-process adapter around a local classifier.
pub struct ClassifierAdapter<'a>(pub &'a Classifier);

impl BlackBoxModel for ClassifierAdapter<'_> {
    fn predict(&self, sample: &ImageSample) -> Result<PredictionVector> {
        forward(self.0, sample)
    }
}

/// Adapter replaying previously recorded responses by sample id.
pub struct ReplayAdapter {
    responses: HashMap<String, Vec<f64>>,
}

impl ReplayAdapter {
    pub fn new(responses: HashMap<String, Vec<f64>>) -> Self {
        Self { responses }
    }

    /// Reads a recorded-response CSV with columns `sample_id, p_0..p_{K-1}`.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .comment(Some(b'#'))
            .from_path(path)?;
        let mut responses = HashMap::new();
        for row in reader.records() {
            let row = row?;
            if row.len() < 2 {
                return Err(Error::Protocol(format!(
                    "recorded response row has {} fields",
                    row.len()
                )));
            }
            let id = row[0].to_string();
            let probs = row
                .iter()
                .skip(1)
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|e| Error::Protocol(format!("bad probability {v}: {e}")))
                })
                .collect::<Result<Vec<f64>>>()?;
            responses.insert(id, probs);
        }
        Ok(Self { responses })
    }
}

impl BlackBoxModel for ReplayAdapter {
    fn predict(&self, sample: &ImageSample) -> Result<PredictionVector> {
        let probs = self
            .responses
            .get(&sample.id)
            .ok_or_else(|| Error::Protocol(format!("no recorded response for {}", sample.id)))?;
        PredictionVector::new(probs.clone())
    }
}

/// Records one model's responses over `samples` as a replayable CSV.
/// Probabilities print in shortest round-trip form, so replays are
/// bit-exact.
pub fn record_responses(
    model: &dyn BlackBoxModel,
    samples: &[ImageSample],
    num_classes: usize,
    path: &Path,
) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    let mut header = vec!["sample_id".to_string()];
    header.extend((0..num_classes).map(|k| format!("p_{k}")));
    writer.write_record(&header)?;
    for s in samples {
        let pred = model.predict(s)?;
        let mut row = vec![s.id.clone()];
        row.extend(pred.probs.iter().map(|p| p.to_string()));
        writer.write_record(&row)?;
    }
    writer.flush()?;
    Ok(())
}

/// Loss gap (the verification statistic): cross-entropy under the
/// owner's rest-model minus cross-entropy under the suspicious model's
/// response. Large gaps mean the suspicious model knows the sample.
pub fn loss_gap(
    x: &ImageSample,
    rest_model: &Classifier,
    suspicious: &dyn BlackBoxModel,
) -> Result<f64> {
    let rest = cross_entropy(&forward(rest_model, x)?, x.label)?;
    let response = suspicious.predict(x)?;
    if response.num_classes() != rest_model.arch.num_classes {
        return Err(Error::Protocol(format!(
            "suspicious model returned {} classes, expected {}",
            response.num_classes(),
            rest_model.arch.num_classes
        )));
    }
    let sus = cross_entropy(&response, x.label)?;
    Ok(rest - sus)
}

/// Calibrates the decision threshold as the (1 - target_fpr) nearest-rank
/// quantile of honey loss gaps pooled over owner-side models trained
/// without the honey samples.
pub fn calibrate_threshold(
    rest_model: &Classifier,
    calibration_models: &[Classifier],
    honey: &HoneySet,
    target_fpr: f64,
) -> Result<f64> {
    if calibration_models.is_empty() {
        return Err(Error::RejectedInput("empty calibration pool".into()));
    }
    if !(target_fpr > 0.0 && target_fpr < 1.0) {
        return Err(Error::RejectedInput(format!(
            "target_fpr must lie in (0, 1), got {target_fpr}"
        )));
    }
    let mut gaps = Vec::with_capacity(calibration_models.len() * honey.records.len());
    for model in calibration_models {
        let adapter = ClassifierAdapter(model);
        for record in &honey.records {
            gaps.push(loss_gap(&record.current, rest_model, &adapter)?);
        }
    }
    Ok(nearest_rank_quantile(&mut gaps, 1.0 - target_fpr))
}

/// Nearest-rank quantile: the ceil(q * n)-th smallest value (1-based).
fn nearest_rank_quantile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = values.len();
    let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
    values[rank - 1]
}

/// Verdict for one queried sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationDecision {
    pub sample_id: String,
    pub loss_gap: f64,
    pub threshold: f64,
    /// 1 = the sample was used in training, 0 = it was not.
    pub verdict: u8,
}

/// Per-model verification outcome: one decision per honey record, with
/// protocol failures kept separately so aggregates can exclude them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub suspicious_model_tag: String,
    pub threshold: f64,
    pub decisions: Vec<VerificationDecision>,
    pub protocol_errors: Vec<(String, String)>,
    /// Queries issued: exactly one per honey record.
    pub query_count: usize,
}

/// Queries the suspicious model once per honey record (using the
/// perturbed version) and applies the threshold rule
/// `verdict = (gap > threshold)`.
pub fn verify(
    honey: &HoneySet,
    rest_model: &Classifier,
    suspicious: &dyn BlackBoxModel,
    threshold: f64,
    tag: impl Into<String>,
) -> Result<VerificationReport> {
    if honey.records.is_empty() {
        return Err(Error::RejectedInput("empty honey set".into()));
    }
    let mut decisions = Vec::with_capacity(honey.records.len());
    let mut protocol_errors = Vec::new();
    for record in &honey.records {
        match loss_gap(&record.current, rest_model, suspicious) {
            Ok(gap) => decisions.push(VerificationDecision {
                sample_id: record.sample_id.clone(),
                loss_gap: gap,
                threshold,
                verdict: u8::from(gap > threshold),
            }),
            Err(Error::Protocol(detail)) => {
                protocol_errors.push((record.sample_id.clone(), detail));
            }
            Err(other) => return Err(other),
        }
    }
    Ok(VerificationReport {
        suspicious_model_tag: tag.into(),
        threshold,
        decisions,
        protocol_errors,
        query_count: honey.records.len(),
    })
}

impl VerificationReport {
    /// Fraction of decided samples with verdict 1.
    pub fn positive_rate(&self) -> f64 {
        if self.decisions.is_empty() {
            return 0.0;
        }
        self.decisions.iter().filter(|d| d.verdict == 1).count() as f64
            / self.decisions.len() as f64
    }

    pub fn gaps(&self) -> Vec<f64> {
        self.decisions.iter().map(|d| d.loss_gap).collect()
    }

    /// Writes the per-sample report CSV:
    /// sample_id, loss_gap, threshold, verdict.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut writer = csv::Writer::from_path(path)?;
        writer.write_record(["sample_id", "loss_gap", "threshold", "verdict"])?;
        for d in &self.decisions {
            writer.write_record([
                d.sample_id.as_str(),
                &d.loss_gap.to_string(),
                &d.threshold.to_string(),
                &d.verdict.to_string(),
            ])?;
        }
        writer.flush()?;
        Ok(())
    }

    /// Reads a report CSV written by [`write_csv`].
    pub fn read_csv(path: &Path, tag: impl Into<String>) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .comment(Some(b'#'))
            .from_path(path)?;
        let mut decisions = Vec::new();
        let mut threshold = f64::NAN;
        for row in reader.records() {
            let row = row?;
            let parse = |i: usize| -> Result<f64> {
                row[i]
                    .parse::<f64>()
                    .map_err(|e| Error::Format {
                        field: format!("report column {i}"),
                        detail: e.to_string(),
                    })
            };
            threshold = parse(2)?;
            decisions.push(VerificationDecision {
                sample_id: row[0].to_string(),
                loss_gap: parse(1)?,
                threshold,
                verdict: row[3]
                    .parse::<u8>()
                    .map_err(|e| Error::Format {
                        field: "verdict".into(),
                        detail: e.to_string(),
                    })?,
            });
        }
        let query_count = decisions.len();
        Ok(Self {
            suspicious_model_tag: tag.into(),
            threshold,
            decisions,
            protocol_errors: Vec::new(),
            query_count,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::Shape;
    use crate::diffnet::{ArchDescriptor, Schedule, TrainConfig};
    use crate::honeygen::{HoneyGenConfig, HoneyRecord};

    fn sample(id: &str, value: f64, label: usize) -> ImageSample {
        ImageSample::new(id, Shape::new(1, 2, 2), vec![value; 4], label).unwrap()
    }

    fn toy_honey(rest_model: &Classifier, n: usize) -> HoneySet {
        let records = (0..n)
            .map(|i| {
                let s = sample(&format!("h{i}"), 0.1 + 0.8 * i as f64 / n.max(2) as f64, i % 2);
                HoneyRecord {
                    sample_id: s.id.clone(),
                    original: s.clone(),
                    current: s,
                    delta_loss_trace: vec![],
                }
            })
            .collect();
        HoneySet {
            records,
            rest_model: rest_model.clone(),
            config: HoneyGenConfig {
                iterations: 0,
                epsilon: 0.0,
                step_size: 0.1,
                inner_train: TrainConfig {
                    learning_rate: 0.01,
                    weight_decay: 0.0,
                    batch_size: 1,
                    epochs: 1,
                    schedule: Schedule::Constant,
                    seed: 0,
                },
                seed: 0,
            },
        }
    }

    #[test]
    fn loss_gap_against_self_is_zero() {
        let arch = ArchDescriptor::mlp(Shape::new(1, 2, 2), vec![4], 2).unwrap();
        let model = Classifier::init(arch, 5).unwrap();
        let x = sample("x", 0.4, 1);
        let gap = loss_gap(&x, &model, &ClassifierAdapter(&model)).unwrap();
        assert_eq!(gap, 0.0);
    }

    #[test]
    fn verdicts_follow_threshold_exactly() {
        let arch = ArchDescriptor::mlp(Shape::new(1, 2, 2), vec![4], 2).unwrap();
        let rest = Classifier::init(arch.clone(), 1).unwrap();
        let sus = Classifier::init(arch, 2).unwrap();
        let honey = toy_honey(&rest, 6);
        let low = verify(&honey, &rest, &ClassifierAdapter(&sus), f64::NEG_INFINITY, "s").unwrap();
        assert!(low.decisions.iter().all(|d| d.verdict == 1));
        let high = verify(&honey, &rest, &ClassifierAdapter(&sus), f64::INFINITY, "s").unwrap();
        assert!(high.decisions.iter().all(|d| d.verdict == 0));
        for d in &low.decisions {
            assert_eq!(d.verdict, u8::from(d.loss_gap > low.threshold));
        }
        assert_eq!(low.query_count, 6);
    }

    #[test]
    fn quantile_is_nearest_rank() {
        let mut gaps: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        // 95th percentile of 1..=100 by nearest rank is the 95th value.
        assert_eq!(nearest_rank_quantile(&mut gaps, 0.95), 95.0);
        let mut constant = vec![2.5; 10];
        assert_eq!(nearest_rank_quantile(&mut constant, 0.95), 2.5);
    }

    #[test]
    fn calibration_rejects_bad_inputs() {
        let arch = ArchDescriptor::mlp(Shape::new(1, 2, 2), vec![4], 2).unwrap();
        let rest = Classifier::init(arch.clone(), 1).unwrap();
        let cal = Classifier::init(arch, 2).unwrap();
        let honey = toy_honey(&rest, 4);
        assert!(calibrate_threshold(&rest, &[], &honey, 0.05).is_err());
        assert!(calibrate_threshold(&rest, &[cal.clone()], &honey, 0.0).is_err());
        assert!(calibrate_threshold(&rest, &[cal], &honey, 0.05).is_ok());
    }

    #[test]
    fn replay_adapter_reproduces_recorded_gaps_bitwise() {
        let arch = ArchDescriptor::mlp(Shape::new(1, 2, 2), vec![4], 2).unwrap();
        let rest = Classifier::init(arch.clone(), 1).unwrap();
        let sus = Classifier::init(arch, 9).unwrap();
        let honey = toy_honey(&rest, 5);
        let samples = honey.current_samples();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("responses.csv");
        record_responses(&ClassifierAdapter(&sus), &samples, 2, &path).unwrap();
        let replay = ReplayAdapter::from_csv(&path).unwrap();

        let live = verify(&honey, &rest, &ClassifierAdapter(&sus), 0.5, "live").unwrap();
        let replayed = verify(&honey, &rest, &replay, 0.5, "replay").unwrap();
        for (a, b) in live.decisions.iter().zip(&replayed.decisions) {
            assert_eq!(a.loss_gap.to_bits(), b.loss_gap.to_bits());
        }
    }

    #[test]
    fn unknown_sample_is_a_protocol_error_and_excluded() {
        let arch = ArchDescriptor::mlp(Shape::new(1, 2, 2), vec![4], 2).unwrap();
        let rest = Classifier::init(arch, 1).unwrap();
        let honey = toy_honey(&rest, 3);
        let replay = ReplayAdapter::new(
            honey
                .records
                .iter()
                .take(2)
                .map(|r| (r.sample_id.clone(), vec![0.5, 0.5]))
                .collect(),
        );
        let report = verify(&honey, &rest, &replay, 0.0, "replay").unwrap();
        assert_eq!(report.decisions.len(), 2);
        assert_eq!(report.protocol_errors.len(), 1);
        assert_eq!(report.query_count, 3);
    }

    #[test]
    fn report_csv_round_trips() {
        let arch = ArchDescriptor::mlp(Shape::new(1, 2, 2), vec![4], 2).unwrap();
        let rest = Classifier::init(arch.clone(), 1).unwrap();
        let sus = Classifier::init(arch, 2).unwrap();
        let honey = toy_honey(&rest, 4);
        let report = verify(&honey, &rest, &ClassifierAdapter(&sus), 0.25, "tag").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.csv");
        report.write_csv(&path).unwrap();
        let loaded = VerificationReport::read_csv(&path, "tag").unwrap();
        assert_eq!(report.decisions, loaded.decisions);
    }
}
