//! Manual end-to-end pass over the desk-scale experiment, used to
//! calibrate dataset difficulty and check the verification signals
//! before wiring the pipeline.

use std::time::Instant;

use honeymark::baselines::{mi_loss_scores_with_references, train_out_references, MIConfig};
use honeymark::datasets::{generate_synthetic, make_split, Dataset, Shape, SyntheticSpec};
use honeymark::diffnet::{accuracy, train, ArchDescriptor, TrainConfig};
use honeymark::hardness::{score_hardness, select_top_n};
use honeymark::honeygen::{differential_loss, generate_honey, HoneyGenConfig};
use honeymark::metrics::{auroc, harmlessness, stealthiness, DistanceKind, ScoredOutcome};
use honeymark::rng::{derive_seed, SplitMix64};
use honeymark::verifier::{loss_gap, ClassifierAdapter};

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

fn env_f64(name: &str, default: f64) -> f64 {
    std::env::var(name)
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(default)
}

fn main() {
    let master = env_f64("DR_SEED", 42.0) as u64;
    let t0 = Instant::now();
    let spec = SyntheticSpec {
        num_classes: 10,
        samples_per_class: 300,
        image_side: 16,
        class_separation: env_f64("DR_SEP", 1.5),
        noise_sigma: env_f64("DR_NOISE", 0.12),
    };
    let data = generate_synthetic(&spec, derive_seed(master, "dataset", 0)).unwrap();
    let plan = make_split(&data, 2.0 / 3.0, 0.01, derive_seed(master, "split", 0)).unwrap();
    println!(
        "split: public {} private {} budget {}",
        plan.public_ids.len(),
        plan.private_ids.len(),
        plan.verification_budget
    );

    let shape = Shape::new(1, 16, 16);
    let arch = ArchDescriptor::desk_mlp(shape, 10).unwrap();
    let train_cfg = TrainConfig::desk_preset(0);

    let public = data.select(&plan.public_ids).unwrap();
    let private = Dataset::new("private", 10, data.select(&plan.private_ids).unwrap()).unwrap();

    // Hardness.
    let t = Instant::now();
    let records = score_hardness(
        &private,
        &plan,
        &arch,
        &train_cfg.clone().with_seed(derive_seed(master, "hardness", 0)),
    )
    .unwrap();
    let selection = select_top_n(&records, plan.verification_budget).unwrap();
    println!("hardness: {:?}", t.elapsed());

    // Honey generation.
    let hard = private.select(&selection.hard_ids).unwrap();
    let rest = private.select(&selection.rest_ids).unwrap();
    let honey_cfg = HoneyGenConfig {
        iterations: 10,
        epsilon: 4.0 / 255.0,
        step_size: 0.4 / 255.0,
        inner_train: train_cfg.clone(),
        seed: derive_seed(master, "honey", 0),
    };
    let t = Instant::now();
    let honey = generate_honey(&hard, &rest, &arch, &honey_cfg).unwrap();
    println!("honey generation: {:?}", t.elapsed());
    let mean_first: f64 = honey
        .records
        .iter()
        .map(|r| r.delta_loss_trace[0])
        .sum::<f64>()
        / honey.records.len() as f64;
    let mean_last: f64 = honey
        .records
        .iter()
        .map(|r| *r.delta_loss_trace.last().unwrap())
        .sum::<f64>()
        / honey.records.len() as f64;
    println!("mean delta-loss trace: first {mean_first:.3} last {mean_last:.3}");

    // Oracle for honey effectiveness: independently retrained pair,
    // originals vs finals.
    let pair_seed = derive_seed(master, "oracle-pair", 0);
    let mut inset: Vec<_> = rest.clone();
    inset.extend(honey.records.iter().map(|r| r.current.clone()));
    let in_model = train(&arch, &inset, &train_cfg.clone().with_seed(pair_seed)).unwrap();
    let rest_eval = &honey.rest_model;
    let d_final: f64 = honey
        .records
        .iter()
        .map(|r| differential_loss(&r.current, rest_eval, &in_model).unwrap())
        .sum::<f64>()
        / honey.records.len() as f64;
    let d_orig: f64 = honey
        .records
        .iter()
        .map(|r| differential_loss(&r.original, rest_eval, &in_model).unwrap())
        .sum::<f64>()
        / honey.records.len() as f64;
    println!("oracle pair: mean dL originals {d_orig:.3} finals {d_final:.3}");

    // One compliant/infringing pair.
    let t = Instant::now();
    let compliant = train(
        &arch,
        &public,
        &train_cfg.clone().with_seed(derive_seed(master, "pair-c", 0)),
    )
    .unwrap();
    let mut infringing_set = public.clone();
    infringing_set.extend(rest.iter().cloned());
    infringing_set.extend(honey.records.iter().map(|r| r.current.clone()));
    let infringing = train(
        &arch,
        &infringing_set,
        &train_cfg.clone().with_seed(derive_seed(master, "pair-i", 0)),
    )
    .unwrap();
    println!(
        "pair training: {:?}; compliant acc {:.3}, infringing acc {:.3}",
        t.elapsed(),
        accuracy(&compliant, &public).unwrap(),
        accuracy(&infringing, &infringing_set).unwrap()
    );

    // Loss gaps.
    let rest_model = &honey.rest_model;
    let gaps_inf: Vec<f64> = honey
        .records
        .iter()
        .map(|r| loss_gap(&r.current, rest_model, &ClassifierAdapter(&infringing)).unwrap())
        .collect();
    let gaps_comp: Vec<f64> = honey
        .records
        .iter()
        .map(|r| loss_gap(&r.current, rest_model, &ClassifierAdapter(&compliant)).unwrap())
        .collect();

    // Random private (non-honey) draw for the gap-analysis contrast.
    let mut rng = SplitMix64::new(derive_seed(master, "random-draw", 0));
    let mut rest_pool_ids = selection.rest_ids.clone();
    rng.shuffle(&mut rest_pool_ids);
    let random_samples = private
        .select(&rest_pool_ids[..plan.verification_budget])
        .unwrap();
    let gaps_random: Vec<f64> = random_samples
        .iter()
        .map(|s| loss_gap(s, rest_model, &ClassifierAdapter(&infringing)).unwrap())
        .collect();

    println!(
        "median gaps: honey/infringing {:.4}, honey/compliant {:.4}, random/infringing {:.4}",
        median(gaps_inf.clone()),
        median(gaps_comp.clone()),
        median(gaps_random.clone())
    );

    let outcomes: Vec<ScoredOutcome> = gaps_inf
        .iter()
        .map(|g| ScoredOutcome {
            score: *g,
            truth: true,
        })
        .chain(gaps_comp.iter().map(|g| ScoredOutcome {
            score: *g,
            truth: false,
        }))
        .collect();
    println!("honeyimage AUROC: {:.4}", auroc(&outcomes).unwrap());

    let (hl, _) = harmlessness(&honey, &ClassifierAdapter(&infringing)).unwrap();
    let stl_mean: f64 = honey
        .records
        .iter()
        .map(|r| stealthiness(&r.original, &r.current, DistanceKind::MeanAbs, 10.0).unwrap())
        .sum::<f64>()
        / honey.records.len() as f64;
    println!("HL {hl:.3}  STL(mean_abs) {stl_mean:.4}");

    // MI baseline on the same pair.
    let t = Instant::now();
    let mut mi_ids = plan.private_ids.clone();
    let mut rng = SplitMix64::new(derive_seed(master, "mi-draw", 0));
    rng.shuffle(&mut mi_ids);
    let mi_samples = private.select(&mi_ids[..plan.verification_budget]).unwrap();
    let mi_pool_samples: Vec<_> = private
        .samples
        .iter()
        .filter(|s| !mi_ids[..plan.verification_budget].contains(&s.id))
        .cloned()
        .collect();
    let mi_pool = Dataset::new("mi-pool", 10, mi_pool_samples).unwrap();
    let mi_cfg = MIConfig {
        reference_arch: arch.clone(),
        reference_train: train_cfg.clone().with_seed(derive_seed(master, "mi-ref", 0)),
        num_reference_pairs: 2,
    };
    let references = train_out_references(&mi_cfg, &mi_pool).unwrap();
    let mi_inf = mi_loss_scores_with_references(
        &mi_samples,
        &ClassifierAdapter(&infringing),
        &references,
        &mi_pool,
    )
    .unwrap();
    let mi_comp = mi_loss_scores_with_references(
        &mi_samples,
        &ClassifierAdapter(&compliant),
        &references,
        &mi_pool,
    )
    .unwrap();
    let mi_outcomes: Vec<ScoredOutcome> = mi_inf
        .iter()
        .map(|g| ScoredOutcome {
            score: *g,
            truth: true,
        })
        .chain(mi_comp.iter().map(|g| ScoredOutcome {
            score: *g,
            truth: false,
        }))
        .collect();
    println!(
        "MI baseline AUROC: {:.4} ({:?})",
        auroc(&mi_outcomes).unwrap(),
        t.elapsed()
    );

    println!("total: {:?}", t0.elapsed());
}
