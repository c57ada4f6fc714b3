// hyperparameter search at ablation scale
use aga3d_core::pipeline::*;
use aga3d_core::net::NetConfig;
use std::time::Instant;

fn main() {
    let a: Vec<String> = std::env::args().collect();
    let lr: f64 = a.get(1).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let epochs: usize = a.get(2).and_then(|s| s.parse().ok()).unwrap_or(30);
    let lambda: f64 = a.get(3).and_then(|s| s.parse().ok()).unwrap_or(0.0);
    let delta: f32 = a.get(4).and_then(|s| s.parse().ok()).unwrap_or(2.5);
    let noise: f32 = a.get(5).and_then(|s| s.parse().ok()).unwrap_or(0.8);
    let patients: usize = a.get(6).and_then(|s| s.parse().ok()).unwrap_or(60);
    let seed: u64 = a.get(7).and_then(|s| s.parse().ok()).unwrap_or(1);
    let sigma: f64 = a.get(8).and_then(|s| s.parse().ok()).unwrap_or(3.0);
    let neg_blob: f64 = a.get(9).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let regions: usize = a.get(10).and_then(|s| s.parse().ok()).unwrap_or(8);
    let region_r: f64 = a.get(11).and_then(|s| s.parse().ok()).unwrap_or(3.5);
    let blob_lo: f64 = a.get(12).and_then(|s| s.parse().ok()).unwrap_or(1.4);
    let blob_hi: f64 = a.get(13).and_then(|s| s.parse().ok()).unwrap_or(2.4);
    let batch: usize = a.get(14).and_then(|s| s.parse().ok()).unwrap_or(4);

    let spec = PhantomSpec {
        dims: (32, 32, 16),
        num_regions: regions,
        region_radius: region_r,
        lesion_region: 0,
        lesion_delta: delta,
        lesion_radius: (blob_lo, blob_hi),
        positive_prob: 0.5,
        negative_blob_prob: neg_blob,
        noise_stddev: noise,
        patients,
        scans_per_patient: (2, 2),
        seed,
    };
    let cfg = TrainConfig {
        learning_rate: lr,
        batch_size: batch,
        epochs,
        patience: epochs,
        grounding_k: 1,
        embed_dim: 64,
        lambda,
        tau: 0.07,
        net: NetConfig {
            input_dims: spec.dims,
            d_h: 32,
            embedding_dim: 128,
            head_hidden: 32,
            seed,
            ..NetConfig::default()
        },
        prior: aga3d_core::prior::PriorParams { sigma, ..Default::default() },
        seed,
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let ds = generate_phantoms(&spec).unwrap();
    let samples = prepare_samples(&ds, &cfg).unwrap();
    let out = train_prepared(&cfg, &samples).unwrap();
    for r in out.log.iter().step_by(4) {
        println!("epoch {:>2} loss {:.5} val_auc {:?}", r.epoch, r.train_loss, r.val.auc);
    }
    let last = out.log.last().unwrap();
    let test = evaluate(&out.params, &samples, &out.split.test, 0.5).unwrap();
    println!("last epoch {} loss {:.5} | best {} | TEST auc {:?} acc {:.3} | {:.0}s",
        last.epoch, last.train_loss, out.best_epoch, test.auc, test.acc, t0.elapsed().as_secs_f64());
}
