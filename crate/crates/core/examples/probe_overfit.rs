// overfit probe: repeated Adam steps on one fixed batch must drive the loss down
use aga3d_core::pipeline::*;
use aga3d_core::net::NetConfig;

fn main() {
    let spec = PhantomSpec {
        dims: (16, 16, 12),
        num_regions: 4,
        region_radius: 3.0,
        lesion_radius: (1.2, 2.0),
        lesion_delta: 3.0,
        noise_stddev: 0.3,
        patients: 4,
        scans_per_patient: (1, 1),
        positive_prob: 0.5,
        seed: 3,
        ..PhantomSpec::default()
    };
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        lr_floor: 1e-3,
        batch_size: 4,
        epochs: 60,
        patience: 1000,
        fractions: (0.5, 0.25, 0.25),
        grounding_k: 1,
        embed_dim: 16,
        lambda: 0.0,
        net: NetConfig {
            input_dims: (16, 16, 12),
            channels: 8,
            d_h: 16,
            embedding_dim: 64,
            head_hidden: 16,
            seed: 3,
            ..NetConfig::default()
        },
        seed: 3,
        ..TrainConfig::default()
    };
    let ds = generate_phantoms(&spec).unwrap();
    let out = train(&cfg, &ds).unwrap();
    let first = out.log.first().unwrap().train_loss;
    let last = out.log.last().unwrap().train_loss;
    for r in out.log.iter().step_by(10) {
        println!("epoch {:>3} loss {:.6}", r.epoch, r.train_loss);
    }
    println!("first {first:.6} -> last {last:.6}");
    assert!(last < first * 0.5, "optimizer failed to reduce loss");
    println!("overfit probe OK");
}
