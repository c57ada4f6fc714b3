// minimal conjunction learner: conv1 -> relu -> global mean pool -> linear.
// If this cannot learn blob-on-prior vs blob-off-prior, the representation
// hypothesis itself is wrong.
use aga3d_core::autodiff::{self, Graph};
use aga3d_core::net::input_tensor;
use aga3d_core::pipeline::*;
use aga3d_core::net::NetConfig;
use aga3d_core::rng::Rng;

fn main() {
    let spec = PhantomSpec {
        dims: (32, 32, 16),
        num_regions: 8,
        region_radius: 3.5,
        lesion_delta: 4.0,
        lesion_radius: (1.4, 2.4),
        noise_stddev: 0.4,
        patients: 60,
        scans_per_patient: (2, 2),
        seed: 9,
        ..PhantomSpec::default()
    };
    let cfg = TrainConfig {
        grounding_k: 1,
        embed_dim: 64,
        prior: aga3d_core::prior::PriorParams { sigma: 1.5, ..Default::default() },
        net: NetConfig { input_dims: spec.dims, d_h: 32, embedding_dim: 128, head_hidden: 32, seed: 9, ..NetConfig::default() },
        seed: 9,
        ..TrainConfig::default()
    };
    let ds = generate_phantoms(&spec).unwrap();
    let samples = prepare_samples(&ds, &cfg).unwrap();
    let split = split_prepared(&samples, (0.7, 0.15, 0.15), 9).unwrap();

    let c_out = 8usize;
    let k = 3usize;
    let mut rng = Rng::new(1);
    let mut w = (0..c_out * 2 * 27).map(|_| rng.uniform(-0.14, 0.14)).collect::<Vec<f64>>();
    let mut b = vec![0.0; c_out];
    let mut wh = (0..c_out).map(|_| rng.uniform(-0.3, 0.3)).collect::<Vec<f64>>();
    let mut bh = vec![0.0];
    let (mut m1, mut v1) = (vec![0.0; w.len()], vec![0.0; w.len()]);
    let (mut m2, mut v2) = (vec![0.0; b.len()], vec![0.0; b.len()]);
    let (mut m3, mut v3) = (vec![0.0; wh.len()], vec![0.0; wh.len()]);
    let (mut m4, mut v4) = (vec![0.0; 1], vec![0.0; 1]);
    let mut t = 0;

    let batch = 16usize;
    let mut order: Vec<usize> = split.train.clone();
    let mut shuffle_rng = Rng::new(2);
    for epoch in 0..12 {
        shuffle_rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(batch) {
            let graph = Graph::new();
            let wt = graph.param(vec![c_out, 2, k, k, k], w.clone());
            let bt = graph.param(vec![c_out], b.clone());
            let wht = graph.param(vec![1, c_out], wh.clone());
            let bht = graph.param(vec![1], bh.clone());
            let mut loss_acc: Option<aga3d_core::autodiff::Tensor> = None;
            for &i in chunk {
                let s = &samples[i];
                let x = input_tensor(&graph, &s.mri, &s.prior).unwrap();
                let conv = autodiff::relu(&autodiff::conv3d(&x, &wt, &bt, 2, 1).unwrap());
                let pooled = autodiff::mean_pool(&conv, &[1, 2, 3]).unwrap();
                let logit = autodiff::linear(&pooled, &wht, &bht).unwrap();
                let p = autodiff::sigmoid(&logit);
                let lp = autodiff::log(&p).unwrap();
                let lq = autodiff::log(&autodiff::add(&autodiff::scale(&p, -1.0), &graph.constant(vec![1], vec![1.0])).unwrap()).unwrap();
                let term = if s.label { autodiff::scale(&lp, -1.0) } else { autodiff::scale(&lq, -1.0) };
                loss_acc = Some(match loss_acc { None => term, Some(acc) => autodiff::add(&acc, &term).unwrap() });
            }
            let loss = autodiff::scale(&loss_acc.unwrap(), 1.0 / chunk.len() as f64);
            epoch_loss += loss.scalar();
            steps += 1;
            let grads = graph.backward(&loss).unwrap();
            t += 1;
            let lr = 3e-3;
            let mut upd = |theta: &mut [f64], m: &mut [f64], v: &mut [f64], g: &[f64]| {
                for i in 0..theta.len() {
                    m[i] = 0.9 * m[i] + 0.1 * g[i];
                    v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
                    let mh = m[i] / (1.0 - 0.9f64.powi(t));
                    let vh = v[i] / (1.0 - 0.999f64.powi(t));
                    theta[i] -= lr * mh / (vh.sqrt() + 1e-8);
                }
            };
            upd(&mut w, &mut m1, &mut v1, grads.get(&wt).unwrap());
            upd(&mut b, &mut m2, &mut v2, grads.get(&bt).unwrap());
            upd(&mut wh, &mut m3, &mut v3, grads.get(&wht).unwrap());
            upd(&mut bh, &mut m4, &mut v4, grads.get(&bht).unwrap());
        }
        // val AUC
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for &i in &split.val {
            let s = &samples[i];
            let graph = Graph::new();
            let wt = graph.constant(vec![c_out, 2, k, k, k], w.clone());
            let bt = graph.constant(vec![c_out], b.clone());
            let wht = graph.constant(vec![1, c_out], wh.clone());
            let bht = graph.constant(vec![1], bh.clone());
            let x = input_tensor(&graph, &s.mri, &s.prior).unwrap();
            let conv = autodiff::relu(&autodiff::conv3d(&x, &wt, &bt, 2, 1).unwrap());
            let pooled = autodiff::mean_pool(&conv, &[1, 2, 3]).unwrap();
            let logit = autodiff::linear(&pooled, &wht, &bht).unwrap();
            scores.push(autodiff::sigmoid(&logit).scalar());
            labels.push(s.label);
        }
        let auc = aga3d_core::objective::auc_rank(&scores, &labels);
        println!("epoch {epoch} loss {:.4} val_auc {:?}", epoch_loss / steps as f64, auc);
    }
}
