// logistic regression on the hand-computed overlap feature, through the same
// autodiff + Adam machinery the trainer uses. Must reach near-zero loss.
use aga3d_core::autodiff::{self, Graph};
use aga3d_core::pipeline::*;
use aga3d_core::net::NetConfig;
use aga3d_core::rng::Rng;

fn main() {
    let spec = PhantomSpec {
        dims: (32, 32, 16),
        num_regions: 8,
        region_radius: 3.5,
        lesion_delta: 2.5,
        lesion_radius: (1.4, 2.4),
        noise_stddev: 0.6,
        patients: 105,
        scans_per_patient: (2, 2),
        negative_blob_prob: 0.3,
        seed: 1,
        ..PhantomSpec::default()
    };
    let cfg = TrainConfig {
        grounding_k: 1,
        embed_dim: 64,
        prior: aga3d_core::prior::PriorParams { sigma: 1.5, ..Default::default() },
        net: NetConfig { input_dims: spec.dims, d_h: 32, embedding_dim: 128, head_hidden: 32, seed: 1, ..NetConfig::default() },
        seed: 1,
        ..TrainConfig::default()
    };
    let ds = generate_phantoms(&spec).unwrap();
    let samples = prepare_samples(&ds, &cfg).unwrap();
    let split = split_prepared(&samples, (0.7, 0.15, 0.15), 1).unwrap();

    // features: overlap = sum(ch1 * ch2), scaled to O(1)
    let feats: Vec<f64> = samples
        .iter()
        .map(|s| {
            s.mri.data.iter().zip(&s.prior.data).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>() / 50.0
        })
        .collect();

    let mut w = vec![0.1f64];
    let mut b = vec![0.0f64];
    let (mut mw, mut vw) = (vec![0.0], vec![0.0]);
    let (mut mb, mut vb) = (vec![0.0], vec![0.0]);
    let mut t = 0;
    let mut order = split.train.clone();
    let mut shuffle_rng = Rng::new(2);
    for epoch in 0..12 {
        shuffle_rng.shuffle(&mut order);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(8) {
            let graph = Graph::new();
            let wt = graph.param(vec![1, 1], w.clone());
            let bt = graph.param(vec![1], b.clone());
            let mut acc: Option<autodiff::Tensor> = None;
            for &i in chunk {
                let x = graph.constant(vec![1], vec![feats[i]]);
                let p = autodiff::sigmoid(&autodiff::linear(&x, &wt, &bt).unwrap());
                let y = samples[i].label;
                let lp = autodiff::log(&p).unwrap();
                let one_minus = autodiff::add(&autodiff::scale(&p, -1.0), &graph.constant(vec![1], vec![1.0])).unwrap();
                let lq = autodiff::log(&one_minus).unwrap();
                let term = if y { autodiff::scale(&lp, -1.0) } else { autodiff::scale(&lq, -1.0) };
                acc = Some(match acc { None => term, Some(a) => autodiff::add(&a, &term).unwrap() });
            }
            let loss = autodiff::scale(&acc.unwrap(), 1.0 / chunk.len() as f64);
            total += loss.scalar();
            batches += 1;
            let grads = graph.backward(&loss).unwrap();
            t += 1;
            let lr = 0.05;
            let mut upd = |theta: &mut [f64], m: &mut [f64], v: &mut [f64], g: &[f64]| {
                for i in 0..theta.len() {
                    m[i] = 0.9 * m[i] + 0.1 * g[i];
                    v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
                    theta[i] -= lr * (m[i] / (1.0 - 0.9f64.powi(t))) / ((v[i] / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
                }
            };
            upd(&mut w, &mut mw, &mut vw, grads.get(&wt).unwrap());
            upd(&mut b, &mut mb, &mut vb, grads.get(&bt).unwrap());
        }
        // val auc
        let scores: Vec<f64> = split.val.iter().map(|&i| w[0] * feats[i] + b[0]).collect();
        let labels: Vec<bool> = split.val.iter().map(|&i| samples[i].label).collect();
        println!("epoch {epoch} loss {:.4} w {:.3} b {:.3} val_auc {:?}",
            total / batches as f64, w[0], b[0], aga3d_core::objective::auc_rank(&scores, &labels));
    }
}
