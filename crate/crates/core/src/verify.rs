//! Gradient verification suites: central finite differences against the
//! reverse-mode path for every layer op, plus a sampled whole-model check.

use serde::Serialize;

use crate::autodiff::{self, grad_check, Graph, MlstmLayerParams, Tensor};
use crate::error::Result;
use crate::net::{self, NetConfig};
use crate::objective::{focal_loss_op, supcon_loss_op, FocalParams};
use crate::rng::Rng;

pub const OP_TOLERANCE: f64 = 1e-6;
pub const MODEL_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, Serialize)]
pub struct OpCheck {
    pub op: String,
    pub seeds: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

fn leaf(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> (Vec<usize>, Vec<f64>) {
    let n: usize = shape.iter().product();
    (shape.to_vec(), (0..n).map(|_| rng.uniform(lo, hi)).collect())
}

type BuildFn = Box<dyn Fn(&Graph, &[Tensor]) -> Result<Tensor>>;

fn scalarize(t: &Tensor) -> Result<Tensor> {
    let axes: Vec<usize> = (0..t.shape().len()).collect();
    autodiff::mean_pool(t, &axes)
}

/// One named case: leaves plus a builder producing a scalar objective.
struct Case {
    leaves: Vec<(Vec<usize>, Vec<f64>)>,
    build: BuildFn,
}

fn op_case(name: &str, rng: &mut Rng) -> Case {
    match name {
        "add" => Case {
            leaves: vec![leaf(rng, &[3, 4], -1.0, 1.0), leaf(rng, &[3, 4], -1.0, 1.0)],
            build: Box::new(|_, ts| scalarize(&autodiff::add(&ts[0], &ts[1])?)),
        },
        "mul" => Case {
            leaves: vec![leaf(rng, &[7], -1.0, 1.0), leaf(rng, &[7], -1.0, 1.0)],
            build: Box::new(|_, ts| scalarize(&autodiff::mul_same(&ts[0], &ts[1]))),
        },
        "scale" => Case {
            leaves: vec![leaf(rng, &[5], -1.0, 1.0)],
            build: Box::new(|_, ts| scalarize(&autodiff::scale(&ts[0], -1.7))),
        },
        "relu" => Case {
            // keep values away from the kink
            leaves: vec![{
                let (s, mut v) = leaf(rng, &[9], -1.0, 1.0);
                for x in v.iter_mut() {
                    if x.abs() < 0.05 {
                        *x += 0.1;
                    }
                }
                (s, v)
            }],
            build: Box::new(|_, ts| scalarize(&autodiff::relu(&ts[0]))),
        },
        "sigmoid" => Case {
            leaves: vec![leaf(rng, &[9], -2.0, 2.0)],
            build: Box::new(|_, ts| scalarize(&autodiff::sigmoid(&ts[0]))),
        },
        "exp" => Case {
            leaves: vec![leaf(rng, &[6], -1.0, 1.0)],
            build: Box::new(|_, ts| scalarize(&autodiff::exp(&ts[0]))),
        },
        "log" => Case {
            leaves: vec![leaf(rng, &[6], 0.3, 3.0)],
            build: Box::new(|_, ts| scalarize(&autodiff::log(&ts[0])?)),
        },
        "linear" => Case {
            leaves: vec![
                leaf(rng, &[3, 5], -1.0, 1.0),
                leaf(rng, &[4, 5], -0.8, 0.8),
                leaf(rng, &[4], -0.5, 0.5),
            ],
            build: Box::new(|_, ts| scalarize(&autodiff::linear(&ts[0], &ts[1], &ts[2])?)),
        },
        "conv3d" => Case {
            leaves: vec![
                leaf(rng, &[2, 5, 4, 6], -1.0, 1.0),
                leaf(rng, &[3, 2, 3, 3, 3], -0.5, 0.5),
                leaf(rng, &[3], -0.3, 0.3),
            ],
            build: Box::new(|_, ts| {
                scalarize(&autodiff::conv3d(&ts[0], &ts[1], &ts[2], 2, 1)?)
            }),
        },
        "conv3d_stride1" => Case {
            leaves: vec![
                leaf(rng, &[1, 4, 4, 4], -1.0, 1.0),
                leaf(rng, &[2, 1, 3, 3, 3], -0.5, 0.5),
                leaf(rng, &[2], -0.3, 0.3),
            ],
            build: Box::new(|_, ts| {
                scalarize(&autodiff::conv3d(&ts[0], &ts[1], &ts[2], 1, 1)?)
            }),
        },
        "mean_pool" => Case {
            leaves: vec![leaf(rng, &[3, 4, 5], -1.0, 1.0)],
            build: Box::new(|_, ts| scalarize(&autodiff::mean_pool(&ts[0], &[1])?)),
        },
        "adaptive_avg_pool3d" => Case {
            leaves: vec![leaf(rng, &[2, 5, 6, 3], -1.0, 1.0)],
            build: Box::new(|_, ts| {
                scalarize(&autodiff::adaptive_avg_pool3d(&ts[0], (2, 3, 4))?)
            }),
        },
        "layer_norm" => Case {
            leaves: vec![
                leaf(rng, &[4, 6], -1.0, 1.0),
                leaf(rng, &[6], 0.5, 1.5),
                leaf(rng, &[6], -0.5, 0.5),
            ],
            build: Box::new(|_, ts| scalarize(&autodiff::layer_norm(&ts[0], &ts[1], &ts[2])?)),
        },
        "reshape_permute" => Case {
            leaves: vec![leaf(rng, &[2, 3, 4], -1.0, 1.0)],
            build: Box::new(|g, ts| {
                let p = autodiff::permute(&ts[0], &[2, 0, 1])?;
                let r = autodiff::reshape(&p, vec![4, 6])?;
                // weight positions unevenly so transposition errors surface
                let w_data: Vec<f64> = (0..24).map(|i| (i as f64 + 1.0) * 0.1).collect();
                let w = autodiff::mul_same(&r, &g.constant(vec![4, 6], w_data));
                scalarize(&w)
            }),
        },
        "concat_l2norm" => Case {
            leaves: vec![leaf(rng, &[3], -1.0, 1.0), leaf(rng, &[5], -1.0, 1.0)],
            build: Box::new(|g, ts| {
                let z = autodiff::concat_vecs(&[&ts[0], &ts[1]])?;
                let zh = autodiff::l2_normalize(&z)?;
                let w_data: Vec<f64> = (0..8).map(|i| (i as f64 - 3.5) * 0.3).collect();
                let w = autodiff::mul_same(&zh, &g.constant(vec![8], w_data));
                scalarize(&w)
            }),
        },
        "gather_rows" => Case {
            leaves: vec![leaf(rng, &[5, 3], -1.0, 1.0)],
            build: Box::new(|g, ts| {
                let rows = autodiff::gather_rows(&ts[0], &[4, 2, 0, 1, 3])?;
                let w_data: Vec<f64> = (0..15).map(|i| (i as f64 + 1.0) * 0.2).collect();
                scalarize(&autodiff::mul_same(&rows, &g.constant(vec![5, 3], w_data)))
            }),
        },
        "mlstm_layer" => {
            let d_in = 3;
            let d_h = 4;
            let steps = 5;
            Case {
                leaves: vec![
                    leaf(rng, &[steps, d_in], -1.0, 1.0),
                    leaf(rng, &[d_h, d_in], -0.6, 0.6),
                    leaf(rng, &[d_h], -0.4, 0.4),
                    leaf(rng, &[d_h, d_in], -0.6, 0.6),
                    leaf(rng, &[d_h], -0.4, 0.4),
                    leaf(rng, &[d_h, d_in], -0.6, 0.6),
                    leaf(rng, &[d_h], -0.4, 0.4),
                    leaf(rng, &[d_in], -0.6, 0.6),
                    leaf(rng, &[1], -0.5, 0.5),
                    leaf(rng, &[d_in], -0.6, 0.6),
                    leaf(rng, &[1], 0.5, 1.5),
                    leaf(rng, &[d_h, d_in], -0.6, 0.6),
                    leaf(rng, &[d_h], -0.4, 0.4),
                ],
                build: Box::new(|_, ts| {
                    let p = MlstmLayerParams {
                        w_q: ts[1].clone(),
                        b_q: ts[2].clone(),
                        w_k: ts[3].clone(),
                        b_k: ts[4].clone(),
                        w_v: ts[5].clone(),
                        b_v: ts[6].clone(),
                        w_i: ts[7].clone(),
                        b_i: ts[8].clone(),
                        w_f: ts[9].clone(),
                        b_f: ts[10].clone(),
                        w_o: ts[11].clone(),
                        b_o: ts[12].clone(),
                    };
                    scalarize(&autodiff::mlstm_sequence_layer(&ts[0], &p)?)
                }),
            }
        }
        "focal" => {
            let y = rng.bool_with_prob(0.5);
            let p0 = rng.uniform(0.1, 0.9);
            Case {
                leaves: vec![(vec![1], vec![p0])],
                build: Box::new(move |_, ts| {
                    focal_loss_op(&ts[0], y, &FocalParams::default())
                }),
            }
        }
        "supcon" => {
            let n = 5;
            let d = 6;
            let labels = vec![true, false, true, false, true];
            let leaves: Vec<(Vec<usize>, Vec<f64>)> =
                (0..n).map(|_| leaf(rng, &[d], -1.0, 1.0)).collect();
            Case {
                leaves,
                build: Box::new(move |_, ts| {
                    let zs: Vec<Tensor> = ts
                        .iter()
                        .map(autodiff::l2_normalize)
                        .collect::<Result<_>>()?;
                    supcon_loss_op(&zs, &labels, 0.07)
                }),
            }
        }
        other => panic!("unknown op case {other}"),
    }
}

pub const OP_NAMES: [&str; 19] = [
    "add",
    "mul",
    "scale",
    "relu",
    "sigmoid",
    "exp",
    "log",
    "linear",
    "conv3d",
    "conv3d_stride1",
    "mean_pool",
    "adaptive_avg_pool3d",
    "layer_norm",
    "reshape_permute",
    "concat_l2norm",
    "gather_rows",
    "mlstm_layer",
    "focal",
    "supcon",
];

pub fn check_op(name: &str, seeds: usize) -> Result<OpCheck> {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut rng = Rng::new(0xC0FFEE ^ (seed as u64 * 7919 + 1));
        let case = op_case(name, &mut rng);
        let err = grad_check(|g, ts| (case.build)(g, ts), &case.leaves, 1e-5)?;
        worst = worst.max(err);
    }
    Ok(OpCheck {
        op: name.to_string(),
        seeds,
        max_rel_err: worst,
        tolerance: OP_TOLERANCE,
        pass: worst < OP_TOLERANCE,
    })
}

pub fn run_op_suite(seeds: usize) -> Result<Vec<OpCheck>> {
    OP_NAMES.iter().map(|name| check_op(name, seeds)).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct ModelCheck {
    pub params_total: usize,
    pub params_sampled: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Reduced-width but structurally complete network used for the sampled
/// whole-model check.
pub fn reduced_model_config(seed: u64) -> NetConfig {
    NetConfig {
        input_dims: (16, 16, 8),
        channels: 32,
        d_h: 32,
        embedding_dim: 128,
        head_hidden: 32,
        seed,
        ..NetConfig::default()
    }
}

/// Sampled central-difference check of the combined objective (focal +
/// contrastive over a 3-sample batch) against reverse-mode gradients for
/// `sample_fraction` of all parameter coordinates.
pub fn full_model_check(cfg: &NetConfig, sample_fraction: f64, seed: u64) -> Result<ModelCheck> {
    cfg.validate()?;
    let mut params = net::ModelParams::init(cfg)?;
    params.config = cfg.clone();
    let mut rng = Rng::new(seed ^ 0xFEED);
    let (nx, ny, nz) = cfg.input_dims;
    let vol = nx * ny * nz;
    let labels = [true, true, false];
    let inputs: Vec<Vec<f64>> = (0..labels.len())
        .map(|_| (0..2 * vol).map(|_| rng.uniform(-1.0, 1.0)).collect())
        .collect();

    let eval = |params: &net::ModelParams| -> Result<f64> {
        let graph = Graph::new();
        let bound = net::bind(&graph, params);
        let mut focal_sum: Option<Tensor> = None;
        let mut zhats = Vec::new();
        for (input, &y) in inputs.iter().zip(&labels) {
            let x = graph.constant(vec![2, nx, ny, nz], input.clone());
            let out = net::forward(&x, &bound, cfg)?;
            let term = focal_loss_op(&out.p, y, &FocalParams::default())?;
            focal_sum = Some(match focal_sum {
                None => term,
                Some(acc) => autodiff::add(&acc, &term)?,
            });
            zhats.push(out.zhat);
        }
        let focal_mean = autodiff::scale(&focal_sum.expect("batch nonempty"), 1.0 / labels.len() as f64);
        let supcon = supcon_loss_op(&zhats, &labels, 0.07)?;
        let loss = autodiff::add(&autodiff::scale(&supcon, 0.5), &focal_mean)?;
        Ok(loss.scalar())
    };

    // analytic gradients once
    let graph = Graph::new();
    let bound = net::bind(&graph, &params);
    let mut focal_sum: Option<Tensor> = None;
    let mut zhats = Vec::new();
    for (input, &y) in inputs.iter().zip(&labels) {
        let x = graph.constant(vec![2, nx, ny, nz], input.clone());
        let out = net::forward(&x, &bound, cfg)?;
        let term = focal_loss_op(&out.p, y, &FocalParams::default())?;
        focal_sum = Some(match focal_sum {
            None => term,
            Some(acc) => autodiff::add(&acc, &term)?,
        });
        zhats.push(out.zhat);
    }
    let focal_mean = autodiff::scale(&focal_sum.expect("batch nonempty"), 1.0 / labels.len() as f64);
    let supcon = supcon_loss_op(&zhats, &labels, 0.07)?;
    let loss = autodiff::add(&autodiff::scale(&supcon, 0.5), &focal_mean)?;
    let mut grads = graph.backward(&loss)?;
    let analytic: std::collections::BTreeMap<String, Vec<f64>> = bound
        .tensors
        .iter()
        .map(|(name, t)| {
            let g = grads
                .take(t)
                .unwrap_or_else(|| vec![0.0; t.numel()]);
            (name.clone(), g)
        })
        .collect();

    let total: usize = params.tensors.values().map(|t| t.data.len()).sum();
    let target = ((total as f64 * sample_fraction).ceil() as usize).max(1);
    // deterministic coordinate sample across all tensors
    let names: Vec<String> = params.tensors.keys().cloned().collect();
    let mut coords: Vec<(String, usize)> = Vec::with_capacity(target);
    let mut sample_rng = Rng::new(seed ^ 0xAB1E);
    while coords.len() < target {
        let name = &names[sample_rng.below(names.len())];
        let n = params.tensors[name].data.len();
        coords.push((name.clone(), sample_rng.below(n)));
    }

    const EPS: f64 = 1e-5;
    // The loss is O(1); a full forward pass carries ~1e7 flops of rounding,
    // so central differences resolve gradients no finer than ~1e-7. The
    // denominator floor keeps that noise from masquerading as error on
    // coordinates whose true gradient is negligible.
    const DENOM_FLOOR: f64 = 1e-2;
    let mut worst = 0.0f64;
    for (name, idx) in &coords {
        let orig = params.tensors[name].data[*idx];
        params.tensors.get_mut(name).unwrap().data[*idx] = orig + EPS;
        let plus = eval(&params)?;
        params.tensors.get_mut(name).unwrap().data[*idx] = orig - EPS;
        let minus = eval(&params)?;
        params.tensors.get_mut(name).unwrap().data[*idx] = orig;
        let numeric = (plus - minus) / (2.0 * EPS);
        let a = analytic[name][*idx];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(DENOM_FLOOR);
        if rel > worst {
            worst = rel;
        }
    }
    Ok(ModelCheck {
        params_total: total,
        params_sampled: coords.len(),
        max_rel_err: worst,
        tolerance: MODEL_TOLERANCE,
        pass: worst < MODEL_TOLERANCE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_with_three_seeds() {
        for check in run_op_suite(3).unwrap() {
            assert!(
                check.pass,
                "{} failed: rel err {} >= {}",
                check.op, check.max_rel_err, check.tolerance
            );
        }
    }

    #[test]
    fn tiny_model_sampled_check_passes() {
        let cfg = NetConfig {
            input_dims: (8, 8, 8),
            channels: 4,
            d_h: 8,
            embedding_dim: 32,
            head_hidden: 8,
            seed: 5,
            ..NetConfig::default()
        };
        let check = full_model_check(&cfg, 0.02, 5).unwrap();
        assert!(check.pass, "rel err {}", check.max_rel_err);
        assert!(check.params_sampled >= 1);
    }
}
