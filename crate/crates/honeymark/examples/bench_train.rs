//! Rough training-throughput measurement used to size the desk configs.

use std::time::Instant;

use honeymark::datasets::{generate_synthetic, Shape, SyntheticSpec};
use honeymark::diffnet::{accuracy, train, ArchDescriptor, Schedule, TrainConfig};

fn main() {
    let spec = SyntheticSpec {
        num_classes: 10,
        samples_per_class: 300,
        image_side: 16,
        class_separation: 1.5,
        noise_sigma: 0.12,
    };
    let t = Instant::now();
    let data = generate_synthetic(&spec, 1).unwrap();
    println!("synthetic gen: {:?} ({} samples)", t.elapsed(), data.len());

    let cfg = TrainConfig {
        learning_rate: 0.05,
        weight_decay: 5e-4,
        batch_size: 64,
        epochs: 10,
        schedule: Schedule::Cosine,
        seed: 3,
    };

    let mlp = ArchDescriptor::desk_mlp(Shape::new(1, 16, 16), 10).unwrap();
    let t = Instant::now();
    let model = train(&mlp, &data.samples, &cfg).unwrap();
    let dt = t.elapsed();
    let steps = data.len() * cfg.epochs;
    println!(
        "mlp({} params): {:?} for {} sample-steps = {:.1} us/step, train acc {:.3}",
        mlp.param_count(),
        dt,
        steps,
        dt.as_micros() as f64 / steps as f64,
        accuracy(&model, &data.samples).unwrap()
    );

    let cnn = ArchDescriptor::small_cnn(Shape::new(1, 16, 16), 10).unwrap();
    let t = Instant::now();
    let model = train(&cnn, &data.samples, &cfg).unwrap();
    let dt = t.elapsed();
    println!(
        "cnn({} params): {:?} for {} sample-steps = {:.1} us/step, train acc {:.3}",
        cnn.param_count(),
        dt,
        steps,
        dt.as_micros() as f64 / steps as f64,
        accuracy(&model, &data.samples).unwrap()
    );
}
