//! Model assembly: two-channel volumetric input, three-layer residual CNN
//! backbone pooled to a fixed 8x8x4 grid, four view sequences through
//! per-branch mLSTM stacks, concatenated embedding, and a sigmoid head.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{
    adaptive_avg_pool3d, add, concat_vecs, conv3d, gather_rows, l2_normalize, linear, mean_pool,
    mlstm_sequence, permute, relu, reshape, sigmoid, Graph, MlstmBlockParams, MlstmLayerParams,
    Tensor,
};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::volgrid::Volume3D;

/// Spatial grid every backbone output is pooled to.
pub const BACKBONE_GRID: (usize, usize, usize) = (8, 8, 4);

pub const VIEW_NAMES: [&str; 4] = ["axial", "coronal", "sagittal", "volumetric"];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetConfig {
    pub input_dims: (usize, usize, usize),
    pub channels: usize,
    pub strides: [usize; 3],
    pub kernel: usize,
    pub d_h: usize,
    pub mlstm_depth: usize,
    pub embedding_dim: usize,
    pub head_hidden: usize,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            input_dims: (64, 64, 32),
            channels: 32,
            strides: [2, 2, 2],
            kernel: 3,
            d_h: 128,
            mlstm_depth: 2,
            embedding_dim: 512,
            head_hidden: 128,
            seed: 0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim != 4 * self.d_h {
            return Err(Error::Contract(format!(
                "embedding_dim {} must equal 4 * d_h = {}",
                self.embedding_dim,
                4 * self.d_h
            )));
        }
        if self.channels == 0
            || self.d_h == 0
            || self.mlstm_depth == 0
            || self.head_hidden == 0
            || self.kernel == 0
            || self.kernel % 2 == 0
            || self.strides.iter().any(|&s| s == 0)
        {
            return Err(Error::Contract(format!("invalid net config {self:?}")));
        }
        let (a, b, d) = self.input_dims;
        if a == 0 || b == 0 || d == 0 {
            return Err(Error::Contract("input dims must be >= 1".into()));
        }
        Ok(())
    }

    /// Spatial dims after the three strided convolutions, before pooling.
    pub fn pre_pool_dims(&self) -> (usize, usize, usize) {
        let pad = self.kernel / 2;
        let step = |n: usize, s: usize| (n + 2 * pad - self.kernel) / s + 1;
        let (mut a, mut b, mut d) = self.input_dims;
        for s in self.strides {
            a = step(a, s);
            b = step(b, s);
            d = step(d, s);
        }
        (a, b, d)
    }

    fn view_input_dim(&self) -> usize {
        self.channels
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// All learnable weights, keyed by name; map order fixes serialization and
/// update order.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: NetConfig,
    pub tensors: BTreeMap<String, ParamTensor>,
}

fn mlstm_param_shapes(d_in: usize, d_h: usize) -> Vec<(&'static str, Vec<usize>)> {
    vec![
        ("ln.gain", vec![d_in]),
        ("ln.bias", vec![d_in]),
        ("w_q", vec![d_h, d_in]),
        ("b_q", vec![d_h]),
        ("w_k", vec![d_h, d_in]),
        ("b_k", vec![d_h]),
        ("w_v", vec![d_h, d_in]),
        ("b_v", vec![d_h]),
        ("w_i", vec![d_in]),
        ("b_i", vec![1]),
        ("w_f", vec![d_in]),
        ("b_f", vec![1]),
        ("w_o", vec![d_h, d_in]),
        ("b_o", vec![d_h]),
    ]
}

impl ModelParams {
    /// Seeded initialization: weights uniform in +-1/sqrt(fan_in), all
    /// biases zero (exponential gates start neutral), layer-norm gain one.
    pub fn init(config: &NetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(config.seed);
        let mut tensors = BTreeMap::new();
        let c = config.channels;
        let k = config.kernel;

        let conv = |name: &str, c_out: usize, c_in: usize, rng: &mut Rng, tensors: &mut BTreeMap<String, ParamTensor>| {
            let fan_in = c_in * k * k * k;
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w: Vec<f64> = (0..c_out * c_in * k * k * k)
                .map(|_| rng.uniform(-bound, bound))
                .collect();
            tensors.insert(
                format!("{name}.w"),
                ParamTensor {
                    shape: vec![c_out, c_in, k, k, k],
                    data: w,
                },
            );
            tensors.insert(
                format!("{name}.b"),
                ParamTensor {
                    shape: vec![c_out],
                    data: vec![0.0; c_out],
                },
            );
        };
        conv("backbone.conv1", c, 2, &mut rng, &mut tensors);
        conv("backbone.res", c, c, &mut rng, &mut tensors);
        conv("backbone.conv2", c, c, &mut rng, &mut tensors);
        conv("backbone.conv3", c, c, &mut rng, &mut tensors);

        for branch in VIEW_NAMES {
            for layer in 0..config.mlstm_depth {
                let d_in = if layer == 0 { config.view_input_dim() } else { config.d_h };
                for (suffix, shape) in mlstm_param_shapes(d_in, config.d_h) {
                    let name = format!("mlstm.{branch}.l{layer}.{suffix}");
                    let n: usize = shape.iter().product();
                    let data = match suffix {
                        "ln.gain" => vec![1.0; n],
                        "ln.bias" | "b_q" | "b_k" | "b_v" | "b_o" => vec![0.0; n],
                        // neutral gate biases: with exponential gating a
                        // positive forget bias amplifies the oldest tokens by
                        // e^T and the readout stops seeing the sequence
                        "b_i" => vec![0.0],
                        "b_f" => vec![0.0],
                        _ => {
                            let fan_in = *shape.last().unwrap_or(&1);
                            let fan_in = if shape.len() == 2 { shape[1] } else { fan_in };
                            // query/key projections start small so the
                            // normalizer's floor governs the readout until
                            // the gates have learned where to attend
                            let gain = match suffix {
                                "w_q" | "w_k" => 0.25,
                                _ => 1.0,
                            };
                            let bound = gain / (fan_in as f64).sqrt();
                            (0..n).map(|_| rng.uniform(-bound, bound)).collect()
                        }
                    };
                    tensors.insert(name, ParamTensor { shape, data });
                }
            }
        }

        let dense = |name: &str, d_out: usize, d_in: usize, rng: &mut Rng, tensors: &mut BTreeMap<String, ParamTensor>| {
            let bound = 1.0 / (d_in as f64).sqrt();
            let w: Vec<f64> = (0..d_out * d_in).map(|_| rng.uniform(-bound, bound)).collect();
            tensors.insert(
                format!("{name}.w"),
                ParamTensor {
                    shape: vec![d_out, d_in],
                    data: w,
                },
            );
            tensors.insert(
                format!("{name}.b"),
                ParamTensor {
                    shape: vec![d_out],
                    data: vec![0.0; d_out],
                },
            );
        };
        dense("head.fc1", config.head_hidden, config.embedding_dim, &mut rng, &mut tensors);
        dense("head.fc2", 1, config.head_hidden, &mut rng, &mut tensors);

        Ok(ModelParams {
            config: config.clone(),
            tensors,
        })
    }

    pub fn num_params(&self) -> usize {
        self.tensors.values().map(|t| t.data.len()).sum()
    }

    /// Binary checkpoint: magic "AGAP", version, tensor count, then
    /// (name, shape, little-endian float64 payload) per tensor in map order.
    pub fn save_agap(&self, path: &Path) -> Result<()> {
        let mut out: Vec<u8> = Vec::new();
        out.extend_from_slice(b"AGAP");
        out.extend_from_slice(&1u32.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load_agap(config: &NetConfig, path: &Path) -> Result<Self> {
        config.validate()?;
        let name = path.display().to_string();
        let mut file = fs::File::open(path).map_err(|e| Error::io(name.clone(), e))?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)
            .map_err(|e| Error::io(name.clone(), e))?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(Error::format(
                    name.clone(),
                    *pos as u64,
                    "checkpoint truncated".to_string(),
                ));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 4)? != b"AGAP" {
            return Err(Error::format(name.clone(), 0, "bad magic, expected AGAP"));
        }
        let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        if version != 1 {
            return Err(Error::format(name.clone(), 4, format!("unsupported version {version}")));
        }
        let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let tname = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|e| Error::format(name.clone(), pos as u64, e.to_string()))?;
            let ndim = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
            }
            let n: usize = shape.iter().product();
            let payload = take(&mut pos, n * 8)?;
            let data: Vec<f64> = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.insert(tname, ParamTensor { shape, data });
        }
        let loaded = ModelParams {
            config: config.clone(),
            tensors,
        };
        let expected = ModelParams::init(config)?;
        for (name_t, t) in &expected.tensors {
            match loaded.tensors.get(name_t) {
                Some(l) if l.shape == t.shape => {}
                Some(l) => {
                    return Err(Error::format(
                        name,
                        0,
                        format!("tensor {name_t} has shape {:?}, expected {:?}", l.shape, t.shape),
                    ))
                }
                None => return Err(Error::format(name, 0, format!("missing tensor {name_t}"))),
            }
        }
        Ok(loaded)
    }
}

/// Parameters bound into one graph for a forward/backward pass.
pub struct BoundParams {
    pub tensors: BTreeMap<String, Tensor>,
}

pub fn bind(graph: &Graph, params: &ModelParams) -> BoundParams {
    let tensors = params
        .tensors
        .iter()
        .map(|(name, t)| {
            (
                name.clone(),
                graph.param(t.shape.clone(), t.data.clone()),
            )
        })
        .collect();
    BoundParams { tensors }
}

impl BoundParams {
    fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))
    }

    fn mlstm_blocks(&self, branch: &str, depth: usize) -> Result<Vec<MlstmBlockParams>> {
        (0..depth)
            .map(|layer| {
                let p = |suffix: &str| self.get(&format!("mlstm.{branch}.l{layer}.{suffix}")).cloned();
                Ok(MlstmBlockParams {
                    ln_gain: p("ln.gain")?,
                    ln_bias: p("ln.bias")?,
                    cell: MlstmLayerParams {
                        w_q: p("w_q")?,
                        b_q: p("b_q")?,
                        w_k: p("w_k")?,
                        b_k: p("b_k")?,
                        w_v: p("w_v")?,
                        b_v: p("b_v")?,
                        w_i: p("w_i")?,
                        b_i: p("b_i")?,
                        w_f: p("w_f")?,
                        b_f: p("b_f")?,
                        w_o: p("w_o")?,
                        b_o: p("b_o")?,
                    },
                })
            })
            .collect()
    }
}

/// Pack MRI (channel 1) and prior (channel 2) volumes into a `[2, X, Y, Z]`
/// input tensor.
pub fn input_tensor(graph: &Graph, mri: &Volume3D, prior: &Volume3D) -> Result<Tensor> {
    if mri.dims != prior.dims {
        return Err(Error::shape(
            "input_tensor",
            format!("mri {:?} vs prior {:?}", mri.dims, prior.dims),
        ));
    }
    let (nx, ny, nz) = mri.dims;
    let vol = nx * ny * nz;
    let mut data = vec![0.0f64; 2 * vol];
    for (ch, v) in [mri, prior].into_iter().enumerate() {
        let base = ch * vol;
        for x in 0..nx {
            for y in 0..ny {
                for z in 0..nz {
                    data[base + (x * ny + y) * nz + z] = v.at(x, y, z) as f64;
                }
            }
        }
    }
    Ok(graph.constant(vec![2, nx, ny, nz], data))
}

/// Three strided conv layers with a residual pathway off layer 1 fused into
/// layer 2's pre-activation, then adaptive pooling to the fixed grid.
pub fn backbone_forward(x: &Tensor, bound: &BoundParams, cfg: &NetConfig) -> Result<Tensor> {
    if x.shape().first() != Some(&2) {
        return Err(Error::shape(
            "backbone_forward",
            format!("expected 2 input channels, got shape {:?}", x.shape()),
        ));
    }
    let pad = cfg.kernel / 2;
    let a1 = relu(&conv3d(
        x,
        bound.get("backbone.conv1.w")?,
        bound.get("backbone.conv1.b")?,
        cfg.strides[0],
        pad,
    )?);
    let r = relu(&conv3d(
        &a1,
        bound.get("backbone.res.w")?,
        bound.get("backbone.res.b")?,
        cfg.strides[1],
        pad,
    )?);
    let pre2 = conv3d(
        &a1,
        bound.get("backbone.conv2.w")?,
        bound.get("backbone.conv2.b")?,
        cfg.strides[1],
        pad,
    )?;
    let a2 = relu(&add(&pre2, &r)?);
    let a3 = relu(&conv3d(
        &a2,
        bound.get("backbone.conv3.w")?,
        bound.get("backbone.conv3.b")?,
        cfg.strides[2],
        pad,
    )?);
    adaptive_avg_pool3d(&a3, BACKBONE_GRID)
}

/// Slice-token sequences from the pooled feature map: per-slice means along
/// each spatial axis plus the full x-fastest voxel sequence.
pub struct ViewSequences {
    pub axial: Tensor,
    pub coronal: Tensor,
    pub sagittal: Tensor,
    pub volumetric: Tensor,
}

pub fn to_view_sequences(f: &Tensor) -> Result<ViewSequences> {
    let (ga, gb, gd) = BACKBONE_GRID;
    match f.shape() {
        [_, a, b, d] if (*a, *b, *d) == (ga, gb, gd) => {}
        other => {
            return Err(Error::shape(
                "to_view_sequences",
                format!("expected [C, {ga}, {gb}, {gd}], got {other:?}"),
            ))
        }
    }
    let axial = permute(&mean_pool(f, &[2, 3])?, &[1, 0])?;
    let coronal = permute(&mean_pool(f, &[1, 3])?, &[1, 0])?;
    let sagittal = permute(&mean_pool(f, &[1, 2])?, &[1, 0])?;
    let c = f.shape()[0];
    // x-fastest token order: permute spatial to [D, B, A] so the row-major
    // flatten walks x first
    let vol = reshape(&permute(f, &[3, 2, 1, 0])?, vec![ga * gb * gd, c])?;
    Ok(ViewSequences {
        axial,
        coronal,
        sagittal,
        volumetric: vol,
    })
}

#[derive(Default)]
pub struct ForwardOpts {
    /// Reorders the volumetric token sequence; used to probe order
    /// sensitivity of the recurrence.
    pub volumetric_perm: Option<Vec<usize>>,
}

pub struct NetOutputs {
    /// Sigmoid probability, scalar tensor.
    pub p: Tensor,
    /// Concatenated 4-branch embedding.
    pub z: Tensor,
    /// L2-normalized copy of `z` for the contrastive objective.
    pub zhat: Tensor,
}

pub fn forward(x: &Tensor, bound: &BoundParams, cfg: &NetConfig) -> Result<NetOutputs> {
    forward_with_opts(x, bound, cfg, &ForwardOpts::default())
}

pub fn forward_with_opts(
    x: &Tensor,
    bound: &BoundParams,
    cfg: &NetConfig,
    opts: &ForwardOpts,
) -> Result<NetOutputs> {
    let f = backbone_forward(x, bound, cfg)?;
    let views = to_view_sequences(&f)?;
    let mut volumetric = views.volumetric;
    if let Some(perm) = &opts.volumetric_perm {
        volumetric = gather_rows(&volumetric, perm)?;
    }
    let mut branch_vecs = Vec::with_capacity(4);
    for (name, seq) in VIEW_NAMES
        .iter()
        .zip([&views.axial, &views.coronal, &views.sagittal, &volumetric])
    {
        let blocks = bound.mlstm_blocks(name, cfg.mlstm_depth)?;
        let h = mlstm_sequence(seq, &blocks)?;
        branch_vecs.push(mean_pool(&h, &[0])?);
    }
    let refs: Vec<&Tensor> = branch_vecs.iter().collect();
    let z = concat_vecs(&refs)?;
    let zhat = l2_normalize(&z)?;
    let h1 = relu(&linear(&z, bound.get("head.fc1.w")?, bound.get("head.fc1.b")?)?);
    let logit = linear(&h1, bound.get("head.fc2.w")?, bound.get("head.fc2.b")?)?;
    let p = sigmoid(&logit);
    Ok(NetOutputs { p, z, zhat })
}

/// Decision rule shared by prediction and metrics: positive at or above the
/// threshold.
pub fn classify(p: f64, threshold: f64) -> bool {
    p >= threshold
}

/// Single-volume inference. An all-zero prior channel simply degrades to
/// MRI-only input.
pub fn predict(
    mri: &Volume3D,
    prior: &Volume3D,
    params: &ModelParams,
    threshold: f64,
) -> Result<(bool, f64)> {
    let graph = Graph::new();
    let x = input_tensor(&graph, mri, prior)?;
    let bound = bind(&graph, params);
    let out = forward(&x, &bound, &params.config)?;
    let p = out.p.scalar();
    Ok((classify(p, threshold), p))
}
