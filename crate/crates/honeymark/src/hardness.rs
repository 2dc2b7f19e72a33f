//! Out-of-training difficulty scoring and hard-sample selection.
//!
//! Two proxy models are trained on disjoint halves of the private split;
//! each sample is scored by the cross-entropy of the proxy that never saw
//! it, and the top-N scores become the hard set.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasets::{Dataset, SplitPlan};
use crate::diffnet::{forward, cross_entropy, train, ArchDescriptor, Classifier, TrainConfig};
use crate::error::{Error, Result};
use crate::rng::derive_seed;

/// Which fold's proxy produced a score (always the fold that does NOT
/// contain the sample).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoringFold {
    A,
    B,
}

/// Difficulty score for one private sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardnessRecord {
    pub sample_id: String,
    pub score: f64,
    pub scoring_fold: ScoringFold,
}

/// The selected hard ids (descending score) and the remaining ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardSelection {
    pub hard_ids: Vec<String>,
    pub rest_ids: Vec<String>,
}

/// Trains the two fold proxies. Seeds derive from `cfg.seed` with
/// counters 0 (fold A) and 1 (fold B).
pub fn train_fold_proxies(
    private: &Dataset,
    plan: &SplitPlan,
    arch: &ArchDescriptor,
    cfg: &TrainConfig,
) -> Result<(Classifier, Classifier)> {
    let fold_a = private.select(&plan.fold_a_ids)?;
    let fold_b = private.select(&plan.fold_b_ids)?;
    if fold_a.is_empty() || fold_b.is_empty() {
        return Err(Error::RejectedInput("empty hardness fold".into()));
    }
    let cfg_a = cfg.clone().with_seed(derive_seed(cfg.seed, "fold-proxy", 0));
    let cfg_b = cfg.clone().with_seed(derive_seed(cfg.seed, "fold-proxy", 1));
    let proxy_a = train(arch, &fold_a, &cfg_a)?;
    let proxy_b = train(arch, &fold_b, &cfg_b)?;
    Ok((proxy_a, proxy_b))
}

/// Scores every private sample with the proxy trained on the opposite
/// fold. One record per private sample, in the plan's private id order.
pub fn score_with_proxies(
    private: &Dataset,
    plan: &SplitPlan,
    proxy_a: &Classifier,
    proxy_b: &Classifier,
) -> Result<Vec<HardnessRecord>> {
    let fold_a: HashSet<&str> = plan.fold_a_ids.iter().map(String::as_str).collect();
    let fold_b: HashSet<&str> = plan.fold_b_ids.iter().map(String::as_str).collect();
    plan.private_ids
        .iter()
        .map(|id| {
            let sample = private
                .get(id)
                .ok_or_else(|| Error::RejectedInput(format!("private id {id} not in dataset")))?;
            // The out-of-training model: fold A samples -> proxy B.
            let (proxy, scoring_fold) = if fold_a.contains(id.as_str()) {
                (proxy_b, ScoringFold::B)
            } else if fold_b.contains(id.as_str()) {
                (proxy_a, ScoringFold::A)
            } else {
                return Err(Error::RejectedInput(format!(
                    "private id {id} missing from both folds"
                )));
            };
            let score = cross_entropy(&forward(proxy, sample)?, sample.label)?;
            Ok(HardnessRecord {
                sample_id: id.clone(),
                score,
                scoring_fold,
            })
        })
        .collect()
}

/// Trains fold proxies and scores the whole private split.
pub fn score_hardness(
    private: &Dataset,
    plan: &SplitPlan,
    arch: &ArchDescriptor,
    cfg: &TrainConfig,
) -> Result<Vec<HardnessRecord>> {
    let (proxy_a, proxy_b) = train_fold_proxies(private, plan, arch, cfg)?;
    score_with_proxies(private, plan, &proxy_a, &proxy_b)
}

/// Sorts descending by score (ties ascending by id) and takes the first
/// `n` records as the hard set.
pub fn select_top_n(records: &[HardnessRecord], n: usize) -> Result<HardSelection> {
    if n == 0 {
        return Err(Error::RejectedInput("n must be positive".into()));
    }
    if n > records.len() {
        return Err(Error::RejectedInput(format!(
            "n = {n} exceeds {} scored records",
            records.len()
        )));
    }
    let mut sorted: Vec<&HardnessRecord> = records.iter().collect();
    sorted.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.sample_id.cmp(&b.sample_id))
    });
    Ok(HardSelection {
        hard_ids: sorted[..n].iter().map(|r| r.sample_id.clone()).collect(),
        rest_ids: sorted[n..].iter().map(|r| r.sample_id.clone()).collect(),
    })
}

/// Writes the hardness report CSV: sample_id, score, scoring_fold, rank
/// (rank 1 = hardest).
pub fn write_hardness_csv(records: &[HardnessRecord], path: &Path) -> Result<()> {
    let mut sorted: Vec<&HardnessRecord> = records.iter().collect();
    sorted.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.sample_id.cmp(&b.sample_id))
    });
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["sample_id", "score", "scoring_fold", "rank"])?;
    for (rank, r) in sorted.iter().enumerate() {
        let fold = match r.scoring_fold {
            ScoringFold::A => "a",
            ScoringFold::B => "b",
        };
        writer.write_record([
            r.sample_id.as_str(),
            &r.score.to_string(),
            fold,
            &(rank + 1).to_string(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, score: f64) -> HardnessRecord {
        HardnessRecord {
            sample_id: id.into(),
            score,
            scoring_fold: ScoringFold::A,
        }
    }

    #[test]
    fn top_n_sorts_by_score_descending() {
        let records = vec![record("a", 3.0), record("b", 1.0), record("c", 2.0)];
        let sel = select_top_n(&records, 2).unwrap();
        assert_eq!(sel.hard_ids, vec!["a", "c"]);
        assert_eq!(sel.rest_ids, vec!["b"]);
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let records = vec![record("z", 1.0), record("m", 1.0), record("a", 1.0)];
        let sel = select_top_n(&records, 1).unwrap();
        assert_eq!(sel.hard_ids, vec!["a"]);
    }

    #[test]
    fn n_equal_to_records_leaves_rest_empty() {
        let records = vec![record("a", 1.0), record("b", 2.0)];
        let sel = select_top_n(&records, 2).unwrap();
        assert!(sel.rest_ids.is_empty());
        assert_eq!(sel.hard_ids.len(), 2);
    }

    #[test]
    fn invalid_n_rejected() {
        let records = vec![record("a", 1.0)];
        assert!(select_top_n(&records, 0).is_err());
        assert!(select_top_n(&records, 2).is_err());
    }
}
