// end-to-end probe at acceptance scale: does the full method hit AUC >= 0.95
// within the epoch budget, and how long does an epoch take?
use aga3d_core::pipeline::*;
use aga3d_core::net::NetConfig;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let lambda: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0.5);
    let delta: f32 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(3.0);
    let noise: f32 = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let patients: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(150);
    let epochs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(8);

    let spec = PhantomSpec {
        dims: (64, 64, 32),
        num_regions: 8,
        region_radius: 5.0,
        lesion_region: 0,
        lesion_delta: delta,
        lesion_radius: (2.0, 4.0),
        positive_prob: 0.5,
        negative_blob_prob: 1.0,
        noise_stddev: noise,
        patients,
        scans_per_patient: (1, 1),
        seed: 41,
    };
    let cfg = TrainConfig {
        learning_rate: lr,
        batch_size: 4,
        epochs,
        patience: 5,
        grounding_k: 1,
        embed_dim: 64,
        lambda,
        tau: 0.07,
        net: NetConfig { input_dims: spec.dims, seed: 41, ..NetConfig::default() },
        seed: 41,
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let ds = generate_phantoms(&spec).unwrap();
    let samples = prepare_samples(&ds, &cfg).unwrap();
    println!("data ready in {:.1}s ({} scans)", t0.elapsed().as_secs_f64(), samples.len());
    let t1 = Instant::now();
    let out = train_prepared(&cfg, &samples).unwrap();
    for r in &out.log {
        println!("epoch {:>2} lr {:.2e} loss {:.5} val_auc {:?} val_acc {:.3}", r.epoch, r.lr, r.train_loss, r.val.auc, r.val.acc);
    }
    let test = evaluate(&out.params, &samples, &out.split.test, 0.5).unwrap();
    println!("TRAIN TIME {:.1}s | test auc {:?} acc {:.3}", t1.elapsed().as_secs_f64(), test.auc, test.acc);
}
