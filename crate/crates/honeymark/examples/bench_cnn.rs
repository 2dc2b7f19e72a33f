//! Sizes the reduced transfer experiment: can the small cnn memorize a
//! small testbed quickly enough?

use honeymark::datasets::{generate_synthetic, Shape, SyntheticSpec};
use honeymark::diffnet::{accuracy, train, ArchDescriptor, Schedule, TrainConfig};

fn main() {
    for (side, per_class, epochs, lr, batch) in [
        (10usize, 120usize, 60usize, 0.15, 16usize),
        (10, 120, 60, 0.25, 16),
        (8, 120, 60, 0.15, 16),
        (8, 120, 80, 0.25, 16),
    ] {
        let spec = SyntheticSpec {
            num_classes: 10,
            samples_per_class: per_class,
            image_side: side,
            class_separation: 2.5,
            noise_sigma: 0.10,
        };
        let data = generate_synthetic(&spec, 1).unwrap();
        let arch = ArchDescriptor::small_cnn(Shape::new(1, side, side), 10).unwrap();
        let cfg = TrainConfig {
            learning_rate: lr,
            weight_decay: 5e-4,
            batch_size: batch,
            epochs,
            schedule: Schedule::Cosine,
            seed: 3,
        };
        let t = std::time::Instant::now();
        match train(&arch, &data.samples, &cfg) {
            Ok(model) => println!(
                "side {side} n {} epochs {epochs} lr {lr} batch {batch}: cnn train acc {:.4} in {:?}",
                data.len(),
                accuracy(&model, &data.samples).unwrap(),
                t.elapsed()
            ),
            Err(e) => println!("side {side} epochs {epochs} lr {lr}: DIVERGED: {e}"),
        }
    }
}
