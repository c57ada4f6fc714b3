// quick probe: does training reduce loss on an easy separable task?
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
        patients: 20,
        scans_per_patient: (1, 1),
        seed: 3,
        ..PhantomSpec::default()
    };
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        epochs: 8,
        patience: 20,
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
    for r in &out.log {
        println!("epoch {} lr {:.2e} loss {:.5} val_auc {:?}", r.epoch, r.lr, r.train_loss, r.val.auc);
    }
}
