// timing probe at acceptance scale
use aga3d_core::pipeline::*;
use std::time::Instant;

fn main() {
    let spec = PhantomSpec {
        patients: 8,
        scans_per_patient: (1, 1),
        seed: 3,
        ..PhantomSpec::default()
    };
    let cfg = TrainConfig {
        epochs: 1,
        grounding_k: 1,
        seed: 3,
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let ds = generate_phantoms(&spec).unwrap();
    println!("generate: {:.2}s ({} scans at {:?})", t0.elapsed().as_secs_f64(), ds.scans.len(), spec.dims);
    let t1 = Instant::now();
    let samples = prepare_samples(&ds, &cfg).unwrap();
    println!("prepare (zscore+grounding+prior): {:.2}s", t1.elapsed().as_secs_f64());
    let t2 = Instant::now();
    let out = train_prepared(&cfg, &samples).unwrap();
    let dt = t2.elapsed().as_secs_f64();
    let n_train = out.split.train.len();
    println!("1 epoch over {n_train} scans: {:.2}s -> {:.3}s per train scan (fwd+bwd+val)", dt, dt / n_train as f64);
}
