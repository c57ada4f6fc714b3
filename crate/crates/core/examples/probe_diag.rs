// diagnostic probe: where does the discriminative signal die?
use aga3d_core::autodiff::Graph;
use aga3d_core::net::{self, NetConfig};
use aga3d_core::objective::{focal_loss_op, FocalParams};
use aga3d_core::pipeline::*;

fn main() {
    let spec = PhantomSpec {
        dims: (64, 64, 32),
        num_regions: 8,
        region_radius: 5.0,
        lesion_delta: 4.0,
        lesion_radius: (2.0, 4.0),
        noise_stddev: 0.5,
        patients: 24,
        scans_per_patient: (1, 1),
        seed: 41,
        ..PhantomSpec::default()
    };
    let cfg = TrainConfig {
        grounding_k: 1,
        embed_dim: 64,
        net: NetConfig { input_dims: spec.dims, seed: 41, ..NetConfig::default() },
        seed: 41,
        ..TrainConfig::default()
    };
    let ds = generate_phantoms(&spec).unwrap();
    let samples = prepare_samples(&ds, &cfg).unwrap();

    // 0) oracle feature: sum(ch1 * ch2) should separate the classes
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for s in &samples {
        let overlap: f64 = s
            .mri
            .data
            .iter()
            .zip(&s.prior.data)
            .map(|(&a, &b)| (a as f64) * (b as f64))
            .sum();
        if s.label { pos.push(overlap) } else { neg.push(overlap) }
    }
    pos.sort_by(|a, b| a.partial_cmp(b).unwrap());
    neg.sort_by(|a, b| a.partial_cmp(b).unwrap());
    println!("oracle overlap feature: pos range [{:.1}, {:.1}], neg range [{:.1}, {:.1}]",
        pos.first().unwrap(), pos.last().unwrap(), neg.first().unwrap(), neg.last().unwrap());

    // 1) embedding spread at init
    let params = net::ModelParams::init(&cfg.net).unwrap();
    let graph = Graph::new();
    let bound = net::bind(&graph, &params);
    let mut zs: Vec<Vec<f64>> = Vec::new();
    let mut ps = Vec::new();
    for s in samples.iter().take(12) {
        let x = net::input_tensor(&graph, &s.mri, &s.prior).unwrap();
        let out = net::forward(&x, &bound, &cfg.net).unwrap();
        zs.push(out.z.value().to_vec());
        ps.push(out.p.scalar());
    }
    let d = zs[0].len();
    let mut mean = vec![0.0; d];
    for z in &zs { for i in 0..d { mean[i] += z[i] / zs.len() as f64; } }
    let mut var = vec![0.0; d];
    for z in &zs { for i in 0..d { var[i] += (z[i] - mean[i]).powi(2) / zs.len() as f64; } }
    let mean_abs: f64 = mean.iter().map(|m| m.abs()).sum::<f64>() / d as f64;
    let per_branch = |lo: usize, hi: usize| -> (f64, f64) {
        let ma: f64 = mean[lo..hi].iter().map(|m| m.abs()).sum::<f64>() / (hi - lo) as f64;
        let sd: f64 = (var[lo..hi].iter().sum::<f64>() / (hi - lo) as f64).sqrt();
        (ma, sd)
    };
    println!("z across 12 samples: mean |z| {:.4}", mean_abs);
    for (name, lo) in [("axial", 0), ("coronal", 128), ("sagittal", 256), ("volumetric", 384)] {
        let (ma, sd) = per_branch(lo, lo + 128);
        println!("  {name:<11} mean|z| {:.5} cross-sample std {:.6} (ratio {:.4})", ma, sd, sd / ma.max(1e-12));
    }
    println!("p at init: {:?}", ps.iter().map(|p| (p * 1e4).round() / 1e4).collect::<Vec<_>>());

    // 2) gradient norms per parameter group for one mixed batch
    let graph = Graph::new();
    let bound = net::bind(&graph, &params);
    let mut loss_acc = None;
    let mut used = 0;
    for s in &samples {
        if used >= 4 { break; }
        let x = net::input_tensor(&graph, &s.mri, &s.prior).unwrap();
        let out = net::forward(&x, &bound, &cfg.net).unwrap();
        let term = focal_loss_op(&out.p, s.label, &FocalParams::default()).unwrap();
        loss_acc = Some(match loss_acc {
            None => term,
            Some(acc) => aga3d_core::autodiff::add(&acc, &term).unwrap(),
        });
        used += 1;
    }
    let loss = aga3d_core::autodiff::scale(&loss_acc.unwrap(), 0.25);
    let grads = graph.backward(&loss).unwrap();
    let mut groups: std::collections::BTreeMap<String, f64> = Default::default();
    for (name, t) in &bound.tensors {
        if let Some(g) = grads.get(t) {
            let norm: f64 = g.iter().map(|x| x * x).sum::<f64>();
            let group = name.split('.').take(2).collect::<Vec<_>>().join(".");
            *groups.entry(group).or_insert(0.0) += norm;
        }
    }
    for (g, n) in groups {
        println!("grad norm {:<22} {:.3e}", g, n.sqrt());
    }
}
