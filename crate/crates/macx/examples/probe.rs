//! Dev probe: xor3 learning curve and runtime at acceptance scale.

use macx::data::Modality;
use macx::model::{self, ModelConfig, Precision, TrainOptions};
use macx::synth::{generate_dataset, split, SyntheticSpec, Task};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mods: Vec<Modality> = match args.get(1).map(String::as_str) {
        Some("V") => vec![Modality::Visual],
        Some("none") => vec![],
        _ => Modality::ALL.to_vec(),
    };
    let task = match args.get(2).map(String::as_str) {
        Some("biased") => Task::Biased,
        Some("copy") => Task::Copy,
        _ => Task::Xor3,
    };
    let epochs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(10);

    let spec = SyntheticSpec { task, instances: 2400, seed: 42, ..Default::default() };
    let t0 = Instant::now();
    let data = generate_dataset(&spec).unwrap();
    let (train_set, val_set) = split(data, 2000.0 / 2400.0, 7).unwrap();
    println!("gen {} train / {} val in {:?}", train_set.len(), val_set.len(), t0.elapsed());

    let fusion = match args.get(4).map(String::as_str) {
        Some("late") => macx::model::Fusion::Late,
        _ => macx::model::Fusion::Mid,
    };
    let config = ModelConfig {
        p: 4,
        d: 64,
        modalities: mods,
        fusion,
        precision: Precision::F32,
        widths: model::widths_from_instance(&train_set[0]),
        ..Default::default()
    };
    let opts = TrainOptions { batch_size: 32, lr: 1e-3, epochs, seed: 1 };
    let t1 = Instant::now();
    let out = model::train::<f32>(&config, &opts, &train_set, &val_set).unwrap();
    for h in &out.history {
        println!(
            "epoch {:2}  loss {:.4}  val_a2 {:.4}  val_a4 {:.4}  ({:?} elapsed)",
            h.epoch, h.mean_loss, h.val_a2, h.val_a4, t1.elapsed()
        );
    }
    println!("best epoch {}  total {:?}", out.best_epoch, t1.elapsed());

    // attention localization: mass at the bit-carrying timestep vs uniform
    let all = macx::synth::generate_dataset(&spec).unwrap();
    let (_, val_with_latents) = macx::synth::split(all, 2000.0 / 2400.0, 7).unwrap();
    let mut per_mod = [0.0f64; 3];
    let mut base = [0.0f64; 3];
    let n = 100.min(val_with_latents.len());
    for inst in val_with_latents.iter().take(n) {
        let latent = inst.latent.as_ref().unwrap();
        let pred = macx::model::forward(&out.params, inst).unwrap();
        for rollout in &pred.rollouts {
            for step in &rollout.steps {
                for (mi, m) in macx::data::Modality::ALL.iter().enumerate() {
                    if let Some((_, attn)) = step.reads.iter().find(|(tag, _)| tag == m) {
                        per_mod[mi] += attn[latent.positions[mi]] / n as f64;
                        let valid = inst.modality(*m).unwrap().valid_len() as f64;
                        base[mi] += 1.0 / valid / n as f64;
                    }
                }
            }
        }
    }
    for (mi, m) in macx::data::Modality::ALL.iter().enumerate() {
        println!("read {} mass at bit step {:.3} vs uniform {:.3}", m, per_mod[mi], base[mi]);
    }
}
