//! Metrics recomputation from persisted artifacts.
//!
//! Everything here reads CSVs and manifests only, never a model
//! checkpoint, so `report` reproduces the full run's metrics without any
//! model access.

use std::collections::HashMap;
use std::fs::File;
use std::io::Write as IoWrite;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datasets::load_manifest;
use crate::error::{Error, Result};
use crate::metrics::{auroc, stealthiness, ScoredOutcome};
use crate::verifier::VerificationReport;

use super::config::{ExperimentConfig, Method};

/// Metrics for one (method, model pair).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub method: String,
    pub pair: usize,
    pub tpr: f64,
    pub tnr: f64,
    pub auroc: f64,
    pub hl: Option<f64>,
    pub stl: Option<f64>,
    pub threshold: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub protocol_error_count: usize,
}

/// Per-method averages over the model pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub pairs: usize,
    pub tpr: f64,
    pub tnr: f64,
    pub auroc: f64,
    pub hl: Option<f64>,
    pub stl: Option<f64>,
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn mean_opt(values: &[Option<f64>]) -> Option<f64> {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    if present.is_empty() {
        None
    } else {
        Some(mean(&present))
    }
}

fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Reads a recorded-responses CSV into (sample_id -> argmax class), with
/// ties resolved to the lowest class index.
fn read_response_argmax(path: &Path) -> Result<HashMap<String, usize>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .from_path(path)?;
    let mut result = HashMap::new();
    for row in reader.records() {
        let row = row?;
        let mut best = 0usize;
        let mut best_p = f64::NEG_INFINITY;
        for (k, field) in row.iter().skip(1).enumerate() {
            let p: f64 = field.parse().map_err(|e| Error::Format {
                field: format!("response p_{k}"),
                detail: format!("{e}"),
            })?;
            if p > best_p {
                best_p = p;
                best = k;
            }
        }
        result.insert(row[0].to_string(), best);
    }
    Ok(result)
}

struct HoneyMeta {
    labels: HashMap<String, usize>,
    count: usize,
}

fn read_honey_meta(path: &Path) -> Result<HoneyMeta> {
    #[derive(Deserialize)]
    struct RecordMeta {
        sample_id: String,
        label: usize,
    }
    #[derive(Deserialize)]
    struct Manifest {
        records: Vec<RecordMeta>,
    }
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    Ok(HoneyMeta {
        count: manifest.records.len(),
        labels: manifest
            .records
            .into_iter()
            .map(|r| (r.sample_id, r.label))
            .collect(),
    })
}

/// Recomputes all metrics from the verify-stage artifacts and writes the
/// per-pair JSONs, the method summary CSV, and (when honey ran) the
/// loss-gap medians. Returns the files written.
pub fn write_report(
    cfg: &ExperimentConfig,
    out_root: &Path,
    report_dir: &Path,
    config_hash: &str,
) -> Result<Vec<PathBuf>> {
    let verify_dir = out_root.join("verify");
    let mut files = Vec::new();
    let mut summaries = Vec::new();

    for method in &cfg.methods {
        let method_verify = verify_dir.join(method.name());
        let method_report = report_dir.join(method.name());
        std::fs::create_dir_all(&method_report)?;

        // Method-wide integrity inputs.
        let honey_inputs = if *method == Method::Honeyimage {
            let honey_dir = out_root.join("honey");
            let meta_path = honey_dir.join("honey.json");
            if !meta_path.exists() {
                return Err(Error::MissingArtifact(meta_path.display().to_string()));
            }
            let meta = read_honey_meta(&meta_path)?;
            let originals = load_manifest(&honey_dir.join("original.json"))?;
            let currents = load_manifest(&honey_dir.join("current.json"))?;
            let stl_values: Vec<f64> = originals
                .samples
                .iter()
                .map(|orig| {
                    let current = currents.get(&orig.id).ok_or_else(|| {
                        Error::MissingArtifact(format!("current honey {}", orig.id))
                    })?;
                    stealthiness(orig, current, cfg.metrics.distance_kind, cfg.metrics.lambda)
                })
                .collect::<Result<Vec<f64>>>()?;
            Some((meta, mean(&stl_values)))
        } else {
            None
        };

        let badnets_inputs = if *method == Method::Badnets {
            let path = method_verify.join("hl_samples.csv");
            if !path.exists() {
                return Err(Error::MissingArtifact(path.display().to_string()));
            }
            let mut reader = csv::ReaderBuilder::new()
                .has_headers(true)
                .comment(Some(b'#'))
                .from_path(&path)?;
            let mut labels = HashMap::new();
            let mut stl_values = Vec::new();
            for row in reader.records() {
                let row = row?;
                labels.insert(
                    row[0].to_string(),
                    row[1].parse::<usize>().map_err(|e| Error::Format {
                        field: "original_label".into(),
                        detail: e.to_string(),
                    })?,
                );
                stl_values.push(row[2].parse::<f64>().map_err(|e| Error::Format {
                    field: "stl".into(),
                    detail: e.to_string(),
                })?);
            }
            Some((labels, mean(&stl_values)))
        } else {
            None
        };

        let mut per_pair = Vec::new();
        for pair in 0..cfg.num_model_pairs {
            let inf_path = method_verify.join(format!("pair_{pair}_infringing.csv"));
            if !inf_path.exists() {
                return Err(Error::MissingArtifact(inf_path.display().to_string()));
            }
            let infringing = VerificationReport::read_csv(&inf_path, "infringing")?;
            let comp_path = method_verify.join(format!("pair_{pair}_compliant.csv"));
            if !comp_path.exists() {
                return Err(Error::MissingArtifact(comp_path.display().to_string()));
            }
            let compliant = VerificationReport::read_csv(&comp_path, "compliant")?;

            let tpr = infringing.positive_rate();
            let tnr = 1.0 - compliant.positive_rate();
            let outcomes: Vec<ScoredOutcome> = infringing
                .gaps()
                .into_iter()
                .map(|score| ScoredOutcome { score, truth: true })
                .chain(compliant.gaps().into_iter().map(|score| ScoredOutcome {
                    score,
                    truth: false,
                }))
                .collect();
            let pair_auroc = auroc(&outcomes)?;

            let hl = match method {
                Method::Honeyimage => {
                    let (meta, _) = honey_inputs.as_ref().expect("honey inputs");
                    let responses = read_response_argmax(
                        &method_verify.join(format!("pair_{pair}_infringing_responses.csv")),
                    )?;
                    Some(accuracy_against(&responses, &meta.labels)?)
                }
                Method::Badnets => {
                    let (labels, _) = badnets_inputs.as_ref().expect("badnets inputs");
                    let responses = read_response_argmax(
                        &method_verify.join(format!("pair_{pair}_hl_responses.csv")),
                    )?;
                    Some(accuracy_against(&responses, labels)?)
                }
                Method::MiLoss => None,
            };
            let stl = match method {
                Method::Honeyimage => honey_inputs.as_ref().map(|(_, stl)| *stl),
                Method::Badnets => badnets_inputs.as_ref().map(|(_, stl)| *stl),
                Method::MiLoss => None,
            };

            let expected = match method {
                Method::Honeyimage => honey_inputs.as_ref().map(|(m, _)| m.count).unwrap_or(0),
                _ => {
                    // MI and badnets verify exactly budget-many samples.
                    let plan: crate::datasets::SplitPlan = serde_json::from_str(
                        &std::fs::read_to_string(out_root.join("split").join("split.json"))?,
                    )?;
                    plan.verification_budget
                }
            };

            let metrics = PairMetrics {
                method: method.name().to_string(),
                pair,
                tpr,
                tnr,
                auroc: pair_auroc,
                hl,
                stl,
                threshold: infringing.threshold,
                n_pos: infringing.decisions.len(),
                n_neg: compliant.decisions.len(),
                protocol_error_count: expected.saturating_sub(infringing.decisions.len())
                    + expected.saturating_sub(compliant.decisions.len()),
            };
            let doc = serde_json::json!({
                "provenance": {"config_hash": config_hash, "master_seed": cfg.master_seed},
                "metrics": metrics,
            });
            let path = method_report.join(format!("pair_{pair}.json"));
            let mut text = serde_json::to_string_pretty(&doc)?;
            text.push('\n');
            std::fs::write(&path, text)?;
            files.push(path);
            per_pair.push(metrics);
        }

        summaries.push(MethodSummary {
            method: method.name().to_string(),
            pairs: per_pair.len(),
            tpr: mean(&per_pair.iter().map(|m| m.tpr).collect::<Vec<_>>()),
            tnr: mean(&per_pair.iter().map(|m| m.tnr).collect::<Vec<_>>()),
            auroc: mean(&per_pair.iter().map(|m| m.auroc).collect::<Vec<_>>()),
            hl: mean_opt(&per_pair.iter().map(|m| m.hl).collect::<Vec<_>>()),
            stl: mean_opt(&per_pair.iter().map(|m| m.stl).collect::<Vec<_>>()),
        });
    }

    // Summary CSV.
    let summary_path = report_dir.join("summary.csv");
    let mut file = File::create(&summary_path)?;
    writeln!(
        file,
        "# config_hash={} master_seed={}",
        config_hash, cfg.master_seed
    )?;
    let mut writer = csv::Writer::from_writer(file);
    writer.write_record(["method", "pairs", "tpr", "tnr", "auroc", "hl", "stl"])?;
    for s in &summaries {
        writer.write_record([
            s.method.as_str(),
            &s.pairs.to_string(),
            &s.tpr.to_string(),
            &s.tnr.to_string(),
            &s.auroc.to_string(),
            &s.hl.map(|v| v.to_string()).unwrap_or_default(),
            &s.stl.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    writer.flush()?;
    drop(writer);
    files.push(summary_path);

    // Loss-gap medians per pair (honey vs random draws).
    if cfg.methods.contains(&Method::Honeyimage) {
        let gap_path = verify_dir.join("gap_analysis.csv");
        if !gap_path.exists() {
            return Err(Error::MissingArtifact(gap_path.display().to_string()));
        }
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .comment(Some(b'#'))
            .from_path(&gap_path)?;
        let mut honey_gaps: HashMap<usize, Vec<f64>> = HashMap::new();
        let mut random_gaps: HashMap<usize, Vec<f64>> = HashMap::new();
        for row in reader.records() {
            let row = row?;
            let pair: usize = row[0].parse().map_err(|e| Error::Format {
                field: "pair".into(),
                detail: format!("{e}"),
            })?;
            let gap: f64 = row[3].parse().map_err(|e| Error::Format {
                field: "loss_gap".into(),
                detail: format!("{e}"),
            })?;
            match &row[1] {
                "honey" => honey_gaps.entry(pair).or_default().push(gap),
                "random" => random_gaps.entry(pair).or_default().push(gap),
                other => {
                    return Err(Error::Format {
                        field: "kind".into(),
                        detail: format!("unknown kind {other}"),
                    })
                }
            }
        }
        let gap_summary_path = report_dir.join("gap_summary.csv");
        let mut file = File::create(&gap_summary_path)?;
        writeln!(
            file,
            "# config_hash={} master_seed={}",
            config_hash, cfg.master_seed
        )?;
        let mut writer = csv::Writer::from_writer(file);
        writer.write_record(["pair", "median_honey_gap", "median_random_gap"])?;
        for pair in 0..cfg.num_model_pairs {
            let honey = honey_gaps.remove(&pair).unwrap_or_default();
            let random = random_gaps.remove(&pair).unwrap_or_default();
            if honey.is_empty() || random.is_empty() {
                return Err(Error::MissingArtifact(format!(
                    "gap analysis rows for pair {pair}"
                )));
            }
            writer.write_record([
                &pair.to_string(),
                &median(honey).to_string(),
                &median(random).to_string(),
            ])?;
        }
        writer.flush()?;
        drop(writer);
        files.push(gap_summary_path);
    }

    Ok(files)
}

fn accuracy_against(
    responses: &HashMap<String, usize>,
    labels: &HashMap<String, usize>,
) -> Result<f64> {
    if responses.is_empty() {
        return Err(Error::MissingArtifact("empty response file".into()));
    }
    let mut correct = 0usize;
    for (id, predicted) in responses {
        let label = labels
            .get(id)
            .ok_or_else(|| Error::MissingArtifact(format!("label for sample {id}")))?;
        if predicted == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / responses.len() as f64)
}

/// Reads the summary CSV back; empty hl/stl fields map to None.
pub fn read_summary_csv(path: &Path) -> Result<Vec<MethodSummary>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .from_path(path)?;
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row?;
        let parse = |i: usize| -> Result<f64> {
            row[i].parse::<f64>().map_err(|e| Error::Format {
                field: format!("summary column {i}"),
                detail: e.to_string(),
            })
        };
        let parse_opt = |i: usize| -> Result<Option<f64>> {
            if row[i].is_empty() {
                Ok(None)
            } else {
                parse(i).map(Some)
            }
        };
        out.push(MethodSummary {
            method: row[0].to_string(),
            pairs: row[1].parse().map_err(|e| Error::Format {
                field: "pairs".into(),
                detail: format!("{e}"),
            })?,
            tpr: parse(2)?,
            tnr: parse(3)?,
            auroc: parse(4)?,
            hl: parse_opt(5)?,
            stl: parse_opt(6)?,
        });
    }
    Ok(out)
}
