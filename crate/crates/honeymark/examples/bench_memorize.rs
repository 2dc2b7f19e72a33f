//! Probes how many epochs the desk mlp needs to memorize the synthetic
//! training set (the membership signal depends on it).

use honeymark::datasets::{generate_synthetic, Shape, SyntheticSpec};
use honeymark::diffnet::{accuracy, train, ArchDescriptor, Schedule, TrainConfig};

fn main() {
    let spec = SyntheticSpec {
        num_classes: 10,
        samples_per_class: 300,
        image_side: 16,
        class_separation: std::env::var("DR_SEP")
            .ok()
            .and_then(|v| v.parse().ok())
            .unwrap_or(2.5),
        noise_sigma: 0.10,
    };
    let data = generate_synthetic(&spec, 1).unwrap();
    let arch = ArchDescriptor::desk_mlp(Shape::new(1, 16, 16), 10).unwrap();
    for (epochs, lr, batch_size) in [
        (60, 0.2, 32),
        (80, 0.2, 32),
        (60, 0.3, 32),
        (80, 0.25, 32),
        (100, 0.2, 32),
        (80, 0.2, 16),
    ] {
        let cfg = TrainConfig {
            learning_rate: lr,
            weight_decay: 5e-4,
            batch_size,
            epochs,
            schedule: Schedule::Cosine,
            seed: 3,
        };
        let t = std::time::Instant::now();
        let model = train(&arch, &data.samples, &cfg).unwrap();
        println!(
            "epochs {epochs:3} lr {lr} batch {batch_size}: train acc {:.4} in {:?}",
            accuracy(&model, &data.samples).unwrap(),
            t.elapsed()
        );
    }
}
