//! Pipeline stages and their artifact tree.
//!
//! Every stage consumes the previous stage's artifacts by path and writes
//! its own directory under the run's output root, together with a
//! `stage.json` marker recording the config hash, master seed, and a
//! digest of every file produced. Rerunning a completed stage with an
//! unchanged config is a no-op.

use std::collections::HashSet;
use std::fs::File;
use std::io::Write as IoWrite;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{
    badnets_poison, badnets_probe_indicators, mi_loss_scores_with_references,
    train_out_references, MIConfig, TriggerConfig,
};
use crate::datasets::{
    generate_synthetic, load_idx, load_manifest, load_png_dir, make_split, save_manifest,
    Dataset, ImageSample, SplitPlan,
};
use crate::diffnet::{
    load_checkpoint, save_checkpoint, train, ArchDescriptor, Classifier,
};
use crate::error::{Error, Result};
use crate::hardness::{score_with_proxies, select_top_n, write_hardness_csv, HardSelection};
use crate::honeygen::{generate_honey, HoneyGenConfig, HoneyRecord, HoneySet};
use crate::metrics::stealthiness;
use crate::rng::{derive_seed, SplitMix64};
use crate::verifier::{
    calibrate_threshold, record_responses, verify, ClassifierAdapter, VerificationReport,
};

use super::config::{DatasetSource, ExperimentConfig, Method};
use super::summary::write_report;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Split,
    TrainProxies,
    ScoreHardness,
    GenerateHoney,
    TrainPairs,
    Verify,
    Report,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Split => "split",
            Stage::TrainProxies => "train-proxies",
            Stage::ScoreHardness => "score-hardness",
            Stage::GenerateHoney => "generate-honey",
            Stage::TrainPairs => "train-pair",
            Stage::Verify => "verify",
            Stage::Report => "report",
        }
    }
}

/// Exclusive-writer guard on the output directory.
struct RunLock {
    path: PathBuf,
}

impl RunLock {
    fn acquire(out: &Path) -> Result<Self> {
        std::fs::create_dir_all(out)?;
        let path = out.join("run.lock");
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "output directory {} is locked by another run (remove {} if stale)",
                out.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct FileDigest {
    name: String,
    sha256: String,
}

/// Per-stage completion marker.
#[derive(Debug, Serialize, Deserialize)]
struct StageMarker {
    stage: String,
    config_hash: String,
    master_seed: u64,
    files: Vec<FileDigest>,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Run state shared by the stage implementations.
struct RunContext<'a> {
    cfg: &'a ExperimentConfig,
    out: PathBuf,
    hash: String,
}

impl<'a> RunContext<'a> {
    fn new(cfg: &'a ExperimentConfig) -> Self {
        Self {
            cfg,
            out: cfg.output_dir.clone(),
            hash: cfg.config_hash(),
        }
    }

    fn stage_dir(&self, stage: Stage) -> PathBuf {
        let name = match stage {
            Stage::Split => "split",
            Stage::TrainProxies => "proxies",
            Stage::ScoreHardness => "hardness",
            Stage::GenerateHoney => "honey",
            Stage::TrainPairs => "pairs",
            Stage::Verify => "verify",
            Stage::Report => "metrics",
        };
        self.out.join(name)
    }

    /// True when the stage's marker matches the config and every file it
    /// recorded is still present and unmodified.
    fn stage_is_complete(&self, stage: Stage) -> bool {
        let dir = self.stage_dir(stage);
        let Ok(text) = std::fs::read_to_string(dir.join("stage.json")) else {
            return false;
        };
        let Ok(marker) = serde_json::from_str::<StageMarker>(&text) else {
            return false;
        };
        if marker.config_hash != self.hash || marker.master_seed != self.cfg.master_seed {
            return false;
        }
        marker.files.iter().all(|f| {
            sha256_file(&dir.join(&f.name))
                .map(|h| h == f.sha256)
                .unwrap_or(false)
        })
    }

    /// Writes the stage marker over the files just produced.
    fn finish_stage(&self, stage: Stage, files: &[PathBuf]) -> Result<()> {
        let dir = self.stage_dir(stage);
        let mut digests = Vec::with_capacity(files.len());
        for f in files {
            digests.push(FileDigest {
                name: f
                    .strip_prefix(&dir)
                    .unwrap_or(f)
                    .to_string_lossy()
                    .into_owned(),
                sha256: sha256_file(f)?,
            });
        }
        let marker = StageMarker {
            stage: stage.name().to_string(),
            config_hash: self.hash.clone(),
            master_seed: self.cfg.master_seed,
            files: digests,
        };
        write_json(&dir.join("stage.json"), &marker)
    }

    fn require(&self, path: PathBuf) -> Result<PathBuf> {
        if path.exists() {
            Ok(path)
        } else {
            Err(Error::MissingArtifact(path.display().to_string()))
        }
    }

    fn seed(&self, label: &str, counter: u64) -> u64 {
        derive_seed(self.cfg.master_seed, label, counter)
    }

    // ---- artifact loaders ----

    fn load_dataset(&self) -> Result<Dataset> {
        let path = self.require(self.stage_dir(Stage::Split).join("dataset.json"))?;
        load_manifest(&path)
    }

    fn load_split(&self) -> Result<SplitPlan> {
        let path = self.require(self.stage_dir(Stage::Split).join("split.json"))?;
        read_json(&path)
    }

    fn load_selection(&self) -> Result<HardSelection> {
        let path = self.require(self.stage_dir(Stage::ScoreHardness).join("selection.json"))?;
        read_json(&path)
    }

    fn load_honey(&self) -> Result<HoneySet> {
        let dir = self.stage_dir(Stage::GenerateHoney);
        let meta_path = self.require(dir.join("honey.json"))?;
        let meta: HoneyManifest = read_json(&meta_path)?;
        let currents = load_manifest(&self.require(dir.join("current.json"))?)?;
        let originals = load_manifest(&self.require(dir.join("original.json"))?)?;
        let rest_model = load_checkpoint(&self.require(dir.join(&meta.rest_model_checkpoint))?)?;
        let records = meta
            .records
            .iter()
            .map(|r| {
                let original = originals
                    .get(&r.sample_id)
                    .ok_or_else(|| Error::MissingArtifact(format!("original {}", r.sample_id)))?;
                let current = currents
                    .get(&r.sample_id)
                    .ok_or_else(|| Error::MissingArtifact(format!("current {}", r.sample_id)))?;
                Ok(HoneyRecord {
                    sample_id: r.sample_id.clone(),
                    original: original.clone(),
                    current: current.clone(),
                    delta_loss_trace: r.delta_loss_trace.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(HoneySet {
            records,
            rest_model,
            config: meta.config,
        })
    }

    fn private_dataset(&self, data: &Dataset, plan: &SplitPlan) -> Result<Dataset> {
        Dataset::new(
            "private",
            data.num_classes,
            data.select(&plan.private_ids)?,
        )
    }

    // ---- deterministic verification-sample draws ----

    /// Budget-size random draw from the private ids under a labeled seed,
    /// optionally excluding some ids.
    fn budget_draw(
        &self,
        plan: &SplitPlan,
        label: &str,
        exclude: &HashSet<&str>,
        budget: usize,
    ) -> Vec<String> {
        let mut ids: Vec<&String> = plan
            .private_ids
            .iter()
            .filter(|id| !exclude.contains(id.as_str()))
            .collect();
        let mut rng = SplitMix64::new(self.seed(label, 0));
        rng.shuffle(&mut ids);
        ids.into_iter().take(budget).cloned().collect()
    }

    fn poison_ids(&self, plan: &SplitPlan) -> Vec<String> {
        let count = ((plan.private_ids.len() as f64) * self.cfg.badnets.poison_fraction).round()
            as usize;
        let mut ids: Vec<&String> = plan.private_ids.iter().collect();
        let mut rng = SplitMix64::new(self.seed("badnets-poison", 0));
        rng.shuffle(&mut ids);
        ids.into_iter().take(count.max(1)).cloned().collect()
    }

    fn trigger_config(&self, poison_ids: Vec<String>) -> TriggerConfig {
        TriggerConfig {
            patch_size: self.cfg.badnets.patch_size,
            patch_value: self.cfg.badnets.patch_value,
            corner: self.cfg.badnets.corner,
            target_label: self.cfg.badnets.target_label,
            poison_ids,
        }
    }

    // ---- stages ----

    fn run_split(&self) -> Result<()> {
        let dir = self.stage_dir(Stage::Split);
        std::fs::create_dir_all(&dir)?;
        let data = match &self.cfg.dataset {
            DatasetSource::Synthetic { spec } => {
                generate_synthetic(spec, self.seed("dataset", 0))?
            }
            DatasetSource::Idx { images, labels } => load_idx(images, labels)?,
            DatasetSource::PngDir { root } => load_png_dir(root)?,
        };
        if !data.has_full_class_coverage() {
            return Err(Error::Config(format!(
                "dataset {} is missing samples for some classes",
                data.name
            )));
        }
        let plan = make_split(
            &data,
            self.cfg.public_fraction,
            self.cfg.verification_fraction,
            self.seed("split", 0),
        )?;
        let dataset_path = dir.join("dataset.json");
        save_manifest(&data, &dataset_path)?;
        let split_path = dir.join("split.json");
        write_json_with_provenance(&split_path, &plan, &self.hash, self.cfg.master_seed)?;
        self.finish_stage(
            Stage::Split,
            &[dataset_path.clone(), dir.join("dataset.bin"), split_path],
        )
    }

    fn run_train_proxies(&self) -> Result<()> {
        let dir = self.stage_dir(Stage::TrainProxies);
        std::fs::create_dir_all(&dir)?;
        let data = self.load_dataset()?;
        let plan = self.load_split()?;
        let private = self.private_dataset(&data, &plan)?;
        let arch = self
            .cfg
            .proxy
            .arch_for(data.shape(), data.num_classes)?;
        let cfg = self
            .cfg
            .proxy
            .train
            .to_config(self.seed("hardness", 0));
        let (proxy_a, proxy_b) =
            crate::hardness::train_fold_proxies(&private, &plan, &arch, &cfg)?;
        let a_path = dir.join("proxy_a.ckpt");
        let b_path = dir.join("proxy_b.ckpt");
        save_checkpoint(&proxy_a, &a_path)?;
        save_checkpoint(&proxy_b, &b_path)?;
        self.finish_stage(Stage::TrainProxies, &[a_path, b_path])
    }

    fn run_score_hardness(&self) -> Result<()> {
        let dir = self.stage_dir(Stage::ScoreHardness);
        std::fs::create_dir_all(&dir)?;
        let data = self.load_dataset()?;
        let plan = self.load_split()?;
        let private = self.private_dataset(&data, &plan)?;
        let proxies_dir = self.stage_dir(Stage::TrainProxies);
        let proxy_a = load_checkpoint(&self.require(proxies_dir.join("proxy_a.ckpt"))?)?;
        let proxy_b = load_checkpoint(&self.require(proxies_dir.join("proxy_b.ckpt"))?)?;
        let records = score_with_proxies(&private, &plan, &proxy_a, &proxy_b)?;
        let selection = select_top_n(&records, plan.verification_budget)?;

        let csv_path = dir.join("hardness.csv");
        write_hardness_csv(&records, &csv_path)?;
        prepend_provenance(&csv_path, &self.hash, self.cfg.master_seed)?;
        let sel_path = dir.join("selection.json");
        write_json_with_provenance(&sel_path, &selection, &self.hash, self.cfg.master_seed)?;
        self.finish_stage(Stage::ScoreHardness, &[csv_path, sel_path])
    }

    fn run_generate_honey(&self) -> Result<()> {
        let dir = self.stage_dir(Stage::GenerateHoney);
        std::fs::create_dir_all(&dir)?;
        let data = self.load_dataset()?;
        let plan = self.load_split()?;
        let private = self.private_dataset(&data, &plan)?;
        let selection = self.load_selection()?;
        let hard = private.select(&selection.hard_ids)?;
        let rest = private.select(&selection.rest_ids)?;
        let arch = self
            .cfg
            .proxy
            .arch_for(data.shape(), data.num_classes)?;
        let gen_cfg = HoneyGenConfig {
            iterations: self.cfg.honey.iterations,
            epsilon: self.cfg.honey.epsilon,
            step_size: self.cfg.honey.step_size,
            inner_train: self.cfg.proxy.train.to_config(0),
            seed: self.seed("honey", 0),
        };
        let honey = generate_honey(&hard, &rest, &arch, &gen_cfg)?;
        let files = self.persist_honey(&dir, &honey)?;
        self.finish_stage(Stage::GenerateHoney, &files)
    }

    fn persist_honey(&self, dir: &Path, honey: &HoneySet) -> Result<Vec<PathBuf>> {
        let rest_path = dir.join("rest_model.ckpt");
        save_checkpoint(&honey.rest_model, &rest_path)?;

        let currents = Dataset::new(
            "honey_current",
            honey.rest_model.arch.num_classes,
            honey.current_samples(),
        )?;
        let originals = Dataset::new(
            "honey_original",
            honey.rest_model.arch.num_classes,
            honey.records.iter().map(|r| r.original.clone()).collect(),
        )?;
        let current_path = dir.join("current.json");
        let original_path = dir.join("original.json");
        save_manifest(&currents, &current_path)?;
        save_manifest(&originals, &original_path)?;

        let manifest = HoneyManifest {
            provenance: Provenance {
                config_hash: self.hash.clone(),
                master_seed: self.cfg.master_seed,
            },
            config: honey.config.clone(),
            rest_model_checkpoint: "rest_model.ckpt".into(),
            records: honey
                .records
                .iter()
                .map(|r| HoneyRecordMeta {
                    sample_id: r.sample_id.clone(),
                    label: r.original.label,
                    linf_offset_actual: r.current.linf_distance(&r.original),
                    delta_loss_trace: r.delta_loss_trace.clone(),
                })
                .collect(),
        };
        let meta_path = dir.join("honey.json");
        write_json(&meta_path, &manifest)?;

        let trace_path = dir.join("trace.csv");
        let mut file = File::create(&trace_path)?;
        writeln!(
            file,
            "# config_hash={} master_seed={}",
            self.hash, self.cfg.master_seed
        )?;
        let mut writer = csv::Writer::from_writer(file);
        writer.write_record(["sample_id", "iteration", "delta_loss"])?;
        for r in &honey.records {
            for (t, d) in r.delta_loss_trace.iter().enumerate() {
                writer.write_record([r.sample_id.as_str(), &t.to_string(), &d.to_string()])?;
            }
        }
        writer.flush()?;
        drop(writer);

        Ok(vec![
            rest_path,
            current_path,
            dir.join("current.bin"),
            original_path,
            dir.join("original.bin"),
            meta_path,
            trace_path,
        ])
    }

    /// Training set of the infringing model for one method: public plus
    /// the method's view of the private split.
    fn infringing_training_set(
        &self,
        method: Method,
        data: &Dataset,
        plan: &SplitPlan,
    ) -> Result<Vec<ImageSample>> {
        let mut set = data.select(&plan.public_ids)?;
        match method {
            Method::Honeyimage => {
                let selection = self.load_selection()?;
                let honey = self.load_honey()?;
                let private = self.private_dataset(data, plan)?;
                set.extend(private.select(&selection.rest_ids)?);
                set.extend(honey.records.iter().map(|r| r.current.clone()));
            }
            Method::MiLoss => {
                set.extend(data.select(&plan.private_ids)?);
            }
            Method::Badnets => {
                let private = self.private_dataset(data, plan)?;
                let cfg = self.trigger_config(self.poison_ids(plan));
                let poisoned = badnets_poison(&private, &cfg)?;
                set.extend(poisoned.samples);
            }
        }
        Ok(set)
    }

    fn run_train_pairs(&self, only_pair: Option<usize>) -> Result<()> {
        let dir = self.stage_dir(Stage::TrainPairs);
        std::fs::create_dir_all(&dir)?;
        let data = self.load_dataset()?;
        let plan = self.load_split()?;
        let arch = self
            .cfg
            .suspicious
            .arch_for(data.shape(), data.num_classes)?;
        let public = data.select(&plan.public_ids)?;
        let pairs: Vec<usize> = match only_pair {
            Some(i) => {
                if i >= self.cfg.num_model_pairs {
                    return Err(Error::Config(format!(
                        "pair index {i} out of range (num_model_pairs = {})",
                        self.cfg.num_model_pairs
                    )));
                }
                vec![i]
            }
            None => (0..self.cfg.num_model_pairs).collect(),
        };

        // Method training sets are pair-independent; build them once.
        let mut method_sets = Vec::new();
        for method in &self.cfg.methods {
            method_sets.push((*method, self.infringing_training_set(*method, &data, &plan)?));
        }

        let files: Vec<PathBuf> = pairs
            .par_iter()
            .map(|&i| -> Result<Vec<PathBuf>> {
                let pair_dir = dir.join(format!("pair_{i}"));
                std::fs::create_dir_all(&pair_dir)?;
                let mut produced = Vec::new();
                let compliant = train(
                    &arch,
                    &public,
                    &self
                        .cfg
                        .suspicious
                        .train
                        .to_config(self.seed("pair-compliant", i as u64)),
                )?;
                let path = pair_dir.join("compliant.ckpt");
                save_checkpoint(&compliant, &path)?;
                produced.push(path);
                for (method, training_set) in &method_sets {
                    let seed_label = format!("pair-infringing-{}", method.name());
                    let infringing = train(
                        &arch,
                        training_set,
                        &self.cfg.suspicious.train.to_config(self.seed(&seed_label, i as u64)),
                    )?;
                    let path = pair_dir.join(format!("infringing_{}.ckpt", method.name()));
                    save_checkpoint(&infringing, &path)?;
                    produced.push(path);
                }
                Ok(produced)
            })
            .collect::<Result<Vec<Vec<PathBuf>>>>()?
            .into_iter()
            .flatten()
            .collect();

        if only_pair.is_none() {
            self.finish_stage(Stage::TrainPairs, &files)?;
        }
        Ok(())
    }

    fn pair_checkpoint(&self, pair: usize, name: &str) -> Result<Classifier> {
        let path = self.require(
            self.stage_dir(Stage::TrainPairs)
                .join(format!("pair_{pair}"))
                .join(format!("{name}.ckpt")),
        )?;
        load_checkpoint(&path)
    }

    fn run_verify(&self) -> Result<()> {
        let dir = self.stage_dir(Stage::Verify);
        std::fs::create_dir_all(&dir)?;
        let data = self.load_dataset()?;
        let plan = self.load_split()?;
        let private = self.private_dataset(&data, &plan)?;
        let budget = plan.verification_budget;
        let mut files = Vec::new();

        // Owner-side calibration models (never trained on honey).
        let suspicious_arch = self
            .cfg
            .suspicious
            .arch_for(data.shape(), data.num_classes)?;
        let public = data.select(&plan.public_ids)?;
        let calibration: Vec<Classifier> = (0..self.cfg.metrics.num_calibration_models)
            .into_par_iter()
            .map(|j| {
                train(
                    &suspicious_arch,
                    &public,
                    &self
                        .cfg
                        .suspicious
                        .train
                        .to_config(self.seed("calibration", j as u64)),
                )
            })
            .collect::<Result<Vec<_>>>()?;

        let mut calibration_record = CalibrationRecord {
            provenance: Provenance {
                config_hash: self.hash.clone(),
                master_seed: self.cfg.master_seed,
            },
            target_fpr: self.cfg.metrics.target_fpr,
            tau_honeyimage: None,
            tau_mi_loss: None,
            badnets_decision_threshold: None,
        };

        for method in &self.cfg.methods {
            let method_dir = dir.join(method.name());
            std::fs::create_dir_all(&method_dir)?;
            match method {
                Method::Honeyimage => self.verify_honeyimage(
                    &method_dir,
                    &data,
                    &plan,
                    &private,
                    &calibration,
                    &mut calibration_record,
                    &mut files,
                )?,
                Method::MiLoss => self.verify_mi_loss(
                    &plan,
                    &private,
                    &method_dir,
                    &calibration,
                    &mut calibration_record,
                    &mut files,
                )?,
                Method::Badnets => self.verify_badnets(
                    &plan,
                    &private,
                    &method_dir,
                    budget,
                    &mut calibration_record,
                    &mut files,
                )?,
            }
        }

        let cal_path = dir.join("calibration.json");
        write_json(&cal_path, &calibration_record)?;
        files.push(cal_path);
        self.finish_stage(Stage::Verify, &files)
    }

    #[allow(clippy::too_many_arguments)]
    fn verify_honeyimage(
        &self,
        method_dir: &Path,
        data: &Dataset,
        plan: &SplitPlan,
        private: &Dataset,
        calibration: &[Classifier],
        calibration_record: &mut CalibrationRecord,
        files: &mut Vec<PathBuf>,
    ) -> Result<()> {
        let honey = self.load_honey()?;
        let rest_model = &honey.rest_model;
        let tau = calibrate_threshold(rest_model, calibration, &honey, self.cfg.metrics.target_fpr)?;
        calibration_record.tau_honeyimage = Some(tau);

        // Random non-honey private draw for the loss-gap analysis.
        let honey_ids: HashSet<&str> = honey.records.iter().map(|r| r.sample_id.as_str()).collect();
        let random_ids =
            self.budget_draw(plan, "gap-analysis-draw", &honey_ids, honey.records.len());
        let random_samples = private.select(&random_ids)?;

        let gap_path = self.stage_dir(Stage::Verify).join("gap_analysis.csv");
        let mut gap_file = File::create(&gap_path)?;
        writeln!(
            gap_file,
            "# config_hash={} master_seed={}",
            self.hash, self.cfg.master_seed
        )?;
        let mut gap_writer = csv::Writer::from_writer(gap_file);
        gap_writer.write_record(["pair", "kind", "sample_id", "loss_gap"])?;

        for pair in 0..self.cfg.num_model_pairs {
            for role in ["infringing", "compliant"] {
                let model = if role == "infringing" {
                    self.pair_checkpoint(pair, "infringing_honeyimage")?
                } else {
                    self.pair_checkpoint(pair, "compliant")?
                };
                let adapter = ClassifierAdapter(&model);
                let report = verify(
                    &honey,
                    rest_model,
                    &adapter,
                    tau,
                    format!("pair_{pair}_{role}"),
                )?;
                let report_path = method_dir.join(format!("pair_{pair}_{role}.csv"));
                report.write_csv(&report_path)?;
                prepend_provenance(&report_path, &self.hash, self.cfg.master_seed)?;
                files.push(report_path);

                let responses_path = method_dir.join(format!("pair_{pair}_{role}_responses.csv"));
                record_responses(
                    &adapter,
                    &honey.current_samples(),
                    data.num_classes,
                    &responses_path,
                )?;
                prepend_provenance(&responses_path, &self.hash, self.cfg.master_seed)?;
                files.push(responses_path);

                if role == "infringing" {
                    for d in &report.decisions {
                        gap_writer.write_record([
                            &pair.to_string(),
                            "honey",
                            d.sample_id.as_str(),
                            &d.loss_gap.to_string(),
                        ])?;
                    }
                    for s in &random_samples {
                        let gap = crate::verifier::loss_gap(s, rest_model, &adapter)?;
                        gap_writer.write_record([
                            &pair.to_string(),
                            "random",
                            s.id.as_str(),
                            &gap.to_string(),
                        ])?;
                    }
                }
            }
        }
        gap_writer.flush()?;
        drop(gap_writer);
        files.push(gap_path);
        Ok(())
    }

    fn verify_mi_loss(
        &self,
        plan: &SplitPlan,
        private: &Dataset,
        method_dir: &Path,
        calibration: &[Classifier],
        calibration_record: &mut CalibrationRecord,
        files: &mut Vec<PathBuf>,
    ) -> Result<()> {
        let budget = plan.verification_budget;
        let sample_ids = self.budget_draw(plan, "mi-draw", &HashSet::new(), budget);
        let samples = private.select(&sample_ids)?;
        let chosen: HashSet<&str> = sample_ids.iter().map(String::as_str).collect();
        let pool_samples: Vec<ImageSample> = private
            .samples
            .iter()
            .filter(|s| !chosen.contains(s.id.as_str()))
            .cloned()
            .collect();
        let pool = Dataset::new("mi-pool", private.num_classes, pool_samples)?;

        let mi_cfg = MIConfig {
            reference_arch: self
                .cfg
                .proxy
                .arch_for(private.shape(), private.num_classes)?,
            reference_train: self
                .cfg
                .proxy
                .train
                .to_config(self.seed("mi-references", 0)),
            num_reference_pairs: self.cfg.mi.num_reference_pairs,
        };
        let references = train_out_references(&mi_cfg, &pool)?;

        // Calibrate the MI threshold the same way as the honey threshold:
        // quantile of scores against owner-side compliant models.
        let mut calibration_scores = Vec::new();
        for model in calibration {
            calibration_scores.extend(mi_loss_scores_with_references(
                &samples,
                &ClassifierAdapter(model),
                &references,
                &pool,
            )?);
        }
        calibration_scores
            .sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        let rank = (((1.0 - self.cfg.metrics.target_fpr) * calibration_scores.len() as f64).ceil()
            as usize)
            .clamp(1, calibration_scores.len());
        let tau_mi = calibration_scores[rank - 1];
        calibration_record.tau_mi_loss = Some(tau_mi);

        for pair in 0..self.cfg.num_model_pairs {
            for role in ["infringing", "compliant"] {
                let model = if role == "infringing" {
                    self.pair_checkpoint(pair, "infringing_mi_loss")?
                } else {
                    self.pair_checkpoint(pair, "compliant")?
                };
                let scores = mi_loss_scores_with_references(
                    &samples,
                    &ClassifierAdapter(&model),
                    &references,
                    &pool,
                )?;
                let report_path = method_dir.join(format!("pair_{pair}_{role}.csv"));
                let mut file = File::create(&report_path)?;
                writeln!(
                    file,
                    "# config_hash={} master_seed={}",
                    self.hash, self.cfg.master_seed
                )?;
                let mut writer = csv::Writer::from_writer(file);
                writer.write_record(["sample_id", "loss_gap", "threshold", "verdict"])?;
                for (s, score) in samples.iter().zip(&scores) {
                    writer.write_record([
                        s.id.as_str(),
                        &score.to_string(),
                        &tau_mi.to_string(),
                        &u8::from(*score > tau_mi).to_string(),
                    ])?;
                }
                writer.flush()?;
                drop(writer);
                files.push(report_path);
            }
        }
        Ok(())
    }

    fn verify_badnets(
        &self,
        plan: &SplitPlan,
        private: &Dataset,
        method_dir: &Path,
        budget: usize,
        calibration_record: &mut CalibrationRecord,
        files: &mut Vec<PathBuf>,
    ) -> Result<()> {
        let poison_ids = self.poison_ids(plan);
        let trigger = self.trigger_config(poison_ids.clone());

        // Attack-success probes: clean private images without the target
        // label, triggered at query time.
        let target = self.cfg.badnets.target_label;
        let target_label_ids: HashSet<&str> = private
            .samples
            .iter()
            .filter(|s| s.label == target)
            .map(|s| s.id.as_str())
            .collect();
        let probe_ids = self.budget_draw(plan, "badnets-draw", &target_label_ids, budget);
        let probes = private.select(&probe_ids)?;

        let base_rate = 1.0 / private.num_classes as f64;
        let decision_threshold = base_rate + self.cfg.badnets.decision_margin;
        calibration_record.badnets_decision_threshold = Some(decision_threshold);

        // Harmlessness samples: a budget-size draw from the poisoned set,
        // measured against their original labels.
        let poison_set: HashSet<&str> = poison_ids.iter().map(String::as_str).collect();
        let all_except_poison: HashSet<&str> = plan
            .private_ids
            .iter()
            .map(String::as_str)
            .filter(|id| !poison_set.contains(id))
            .collect();
        let hl_ids = self.budget_draw(plan, "badnets-hl-draw", &all_except_poison, budget);
        let hl_originals = private.select(&hl_ids)?;
        let hl_poisoned: Vec<ImageSample> = hl_originals
            .iter()
            .map(|s| {
                let mut p = trigger.apply_trigger(s);
                p.label = trigger.target_label;
                p
            })
            .collect();

        // Per-sample integrity rows: original label and stealthiness of
        // the poisoning edit.
        let integrity_path = method_dir.join("hl_samples.csv");
        let mut file = File::create(&integrity_path)?;
        writeln!(
            file,
            "# config_hash={} master_seed={}",
            self.hash, self.cfg.master_seed
        )?;
        let mut writer = csv::Writer::from_writer(file);
        writer.write_record(["sample_id", "original_label", "stl"])?;
        for (orig, poisoned) in hl_originals.iter().zip(&hl_poisoned) {
            let stl = stealthiness(
                orig,
                poisoned,
                self.cfg.metrics.distance_kind,
                self.cfg.metrics.lambda,
            )?;
            writer.write_record([
                orig.id.as_str(),
                &orig.label.to_string(),
                &stl.to_string(),
            ])?;
        }
        writer.flush()?;
        drop(writer);
        files.push(integrity_path);

        for pair in 0..self.cfg.num_model_pairs {
            for role in ["infringing", "compliant"] {
                let model = if role == "infringing" {
                    self.pair_checkpoint(pair, "infringing_badnets")?
                } else {
                    self.pair_checkpoint(pair, "compliant")?
                };
                let adapter = ClassifierAdapter(&model);
                let indicators = badnets_probe_indicators(&adapter, &probes, &trigger)?;
                let report_path = method_dir.join(format!("pair_{pair}_{role}.csv"));
                let mut file = File::create(&report_path)?;
                writeln!(
                    file,
                    "# config_hash={} master_seed={}",
                    self.hash, self.cfg.master_seed
                )?;
                let mut writer = csv::Writer::from_writer(file);
                writer.write_record(["sample_id", "loss_gap", "threshold", "verdict"])?;
                for (probe, ind) in probes.iter().zip(&indicators) {
                    writer.write_record([
                        probe.id.as_str(),
                        &ind.to_string(),
                        &"0.5".to_string(),
                        &u8::from(*ind > 0.5).to_string(),
                    ])?;
                }
                writer.flush()?;
                drop(writer);
                files.push(report_path);

                if role == "infringing" {
                    let responses_path =
                        method_dir.join(format!("pair_{pair}_hl_responses.csv"));
                    record_responses(
                        &adapter,
                        &hl_poisoned,
                        private.num_classes,
                        &responses_path,
                    )?;
                    prepend_provenance(&responses_path, &self.hash, self.cfg.master_seed)?;
                    files.push(responses_path);
                }
            }
        }
        Ok(())
    }

    fn run_report(&self) -> Result<()> {
        let dir = self.stage_dir(Stage::Report);
        std::fs::create_dir_all(&dir)?;
        let files = write_report(
            self.cfg,
            &self.out,
            &dir,
            &self.hash,
        )?;
        self.finish_stage(Stage::Report, &files)
    }
}

/// Runs a single stage (with dependency checks) under the output lock.
pub fn run_stage(cfg: &ExperimentConfig, stage: Stage, only_pair: Option<usize>) -> Result<()> {
    cfg.validate()?;
    let ctx = RunContext::new(cfg);
    let _lock = RunLock::acquire(&ctx.out)?;
    write_config_echo(&ctx)?;
    dispatch_stage(&ctx, stage, only_pair)
}

fn dispatch_stage(ctx: &RunContext, stage: Stage, only_pair: Option<usize>) -> Result<()> {
    if only_pair.is_none() && ctx.stage_is_complete(stage) {
        return Ok(());
    }
    match stage {
        Stage::Split => ctx.run_split(),
        Stage::TrainProxies => ctx.run_train_proxies(),
        Stage::ScoreHardness => ctx.run_score_hardness(),
        Stage::GenerateHoney => ctx.run_generate_honey(),
        Stage::TrainPairs => ctx.run_train_pairs(only_pair),
        Stage::Verify => ctx.run_verify(),
        Stage::Report => ctx.run_report(),
    }
}

/// Runs the full pipeline: split, hardness, honey, model pairs,
/// verification, and the metrics report.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<()> {
    cfg.validate()?;
    let ctx = RunContext::new(cfg);
    let _lock = RunLock::acquire(&ctx.out)?;
    write_config_echo(&ctx)?;
    let honeyimage = cfg.methods.contains(&Method::Honeyimage);
    let stages: Vec<Stage> = [
        Some(Stage::Split),
        honeyimage.then_some(Stage::TrainProxies),
        honeyimage.then_some(Stage::ScoreHardness),
        honeyimage.then_some(Stage::GenerateHoney),
        Some(Stage::TrainPairs),
        Some(Stage::Verify),
        Some(Stage::Report),
    ]
    .into_iter()
    .flatten()
    .collect();
    for stage in stages {
        if let Err(err) = dispatch_stage(&ctx, stage, None) {
            let record = serde_json::json!({
                "stage": stage.name(),
                "error": err.to_string(),
                "exit_code": err.exit_code(),
            });
            let _ = write_json(&ctx.out.join("error.json"), &record);
            return Err(err);
        }
    }
    // A clean run leaves no stale error record behind.
    let _ = std::fs::remove_file(ctx.out.join("error.json"));
    Ok(())
}

/// Verifies one external checkpoint against the generated honey set,
/// writing a report CSV next to the run's verify artifacts.
pub fn verify_checkpoint(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    tag: &str,
) -> Result<VerificationReport> {
    cfg.validate()?;
    let ctx = RunContext::new(cfg);
    let _lock = RunLock::acquire(&ctx.out)?;
    let honey = ctx.load_honey()?;
    let suspicious = load_checkpoint(checkpoint)?;
    let cal_path = ctx.require(ctx.stage_dir(Stage::Verify).join("calibration.json"))?;
    let calibration: CalibrationRecord = read_json(&cal_path)?;
    let tau = calibration.tau_honeyimage.ok_or_else(|| {
        Error::MissingArtifact("calibration.json lacks tau_honeyimage".into())
    })?;
    let report = verify(
        &honey,
        &honey.rest_model,
        &ClassifierAdapter(&suspicious),
        tau,
        tag,
    )?;
    let dir = ctx.stage_dir(Stage::Verify).join("adhoc");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join(format!("{tag}.csv"));
    report.write_csv(&path)?;
    prepend_provenance(&path, &ctx.hash, cfg.master_seed)?;
    Ok(report)
}

// ---- shared artifact plumbing ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct Provenance {
    pub config_hash: String,
    pub master_seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct HoneyRecordMeta {
    sample_id: String,
    label: usize,
    linf_offset_actual: f64,
    delta_loss_trace: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct HoneyManifest {
    provenance: Provenance,
    config: HoneyGenConfig,
    rest_model_checkpoint: String,
    records: Vec<HoneyRecordMeta>,
}

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct CalibrationRecord {
    provenance: Provenance,
    pub target_fpr: f64,
    pub tau_honeyimage: Option<f64>,
    pub tau_mi_loss: Option<f64>,
    pub badnets_decision_threshold: Option<f64>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Wraps a value with run provenance before writing.
fn write_json_with_provenance<T: Serialize>(
    path: &Path,
    value: &T,
    hash: &str,
    seed: u64,
) -> Result<()> {
    let mut doc = serde_json::to_value(value)?;
    if let Some(map) = doc.as_object_mut() {
        map.insert(
            "provenance".into(),
            serde_json::json!({"config_hash": hash, "master_seed": seed}),
        );
    }
    write_json(path, &doc)
}

/// Inserts the provenance comment line at the top of an existing CSV.
fn prepend_provenance(path: &Path, hash: &str, seed: u64) -> Result<()> {
    let body = std::fs::read_to_string(path)?;
    if body.starts_with("# config_hash=") {
        return Ok(());
    }
    let mut text = format!("# config_hash={hash} master_seed={seed}\n");
    text.push_str(&body);
    std::fs::write(path, text)?;
    Ok(())
}

fn write_config_echo(ctx: &RunContext) -> Result<()> {
    let echo = serde_json::json!({
        "config_hash": ctx.hash,
        "master_seed": ctx.cfg.master_seed,
        "config": ctx.cfg,
    });
    write_json(&ctx.out.join("config.json"), &echo)
}
