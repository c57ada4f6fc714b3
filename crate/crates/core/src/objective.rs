//! Training objectives (focal + supervised contrastive) and evaluation
//! metrics. Each loss exists both as a plain function and as a graph op with
//! a hand-derived backward; the plain forms double as references in tests.

use serde::{Deserialize, Serialize};

use crate::autodiff::{acc_grad, Tensor};
use crate::error::{Error, Result};

const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FocalParams {
    /// Class-balance weight in [0, 1].
    pub alpha_f: f64,
    /// Focusing exponent, >= 0.
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams {
            alpha_f: 0.25,
            gamma: 2.0,
        }
    }
}

impl FocalParams {
    pub fn bce() -> Self {
        FocalParams {
            alpha_f: 1.0,
            gamma: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if (0.0..=1.0).contains(&self.alpha_f) && self.gamma >= 0.0 && self.gamma.is_finite() {
            Ok(())
        } else {
            Err(Error::Contract(format!("invalid focal params {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda >= 0.0 && self.lambda.is_finite() {
            Ok(())
        } else {
            Err(Error::Contract(format!("lambda must be finite and >= 0, got {}", self.lambda)))
        }
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// `-alpha (1 - p_t)^gamma ln(p_t)` with `p_t = p` for positives and `1 - p`
/// for negatives; probabilities are clamped to `[eps, 1-eps]` first.
pub fn focal_loss(p: f64, y: bool, fp: &FocalParams) -> f64 {
    let p = clamp_prob(p);
    let pt = if y { p } else { 1.0 - p };
    let u = 1.0 - pt;
    -fp.alpha_f * u.powf(fp.gamma) * pt.ln()
}

/// d(focal)/d(p_t); zero when the clamp is active.
fn focal_grad_pt(pt: f64, fp: &FocalParams) -> f64 {
    let u = 1.0 - pt;
    let mut g = -fp.alpha_f * u.powf(fp.gamma) / pt;
    if fp.gamma > 0.0 {
        g += fp.alpha_f * fp.gamma * u.powf(fp.gamma - 1.0) * pt.ln();
    }
    g
}

/// Graph op over a scalar probability tensor.
pub fn focal_loss_op(p: &Tensor, y: bool, fp: &FocalParams) -> Result<Tensor> {
    fp.validate()?;
    if p.numel() != 1 {
        return Err(Error::shape("focal_loss", format!("{:?}", p.shape())));
    }
    let raw = p.scalar();
    let out = focal_loss(raw, y, fp);
    let requires = p.requires_grad();
    let backward = requires.then(|| {
        let id = p.id();
        let fp = *fp;
        Box::new(move |g: &[f64], grads: &mut [Option<Vec<f64>>]| {
            let clamped = raw > PROB_EPS && raw < 1.0 - PROB_EPS;
            if !clamped {
                return;
            }
            let pt = if y { raw } else { 1.0 - raw };
            let dpt = focal_grad_pt(pt, &fp);
            let dp = if y { dpt } else { -dpt };
            acc_grad(grads, id, 1)[0] += g[0] * dp;
        }) as crate::autodiff::BackwardFn
    });
    Ok(p.graph().push_node(vec![1], vec![out], requires, false, backward))
}

/// Batch of L2-normalized embeddings with binary labels.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    pub embeddings: Vec<Vec<f64>>,
    pub labels: Vec<bool>,
    pub temperature: f64,
}

impl ContrastiveBatch {
    pub fn validate(&self) -> Result<()> {
        if self.embeddings.len() != self.labels.len() {
            return Err(Error::Contract("embeddings/labels length mismatch".into()));
        }
        if self.embeddings.len() < 2 {
            return Err(Error::Contract("contrastive batch needs N >= 2".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Contract(format!("temperature must be > 0, got {}", self.temperature)));
        }
        let d = self.embeddings[0].len();
        for (i, z) in self.embeddings.iter().enumerate() {
            if z.len() != d {
                return Err(Error::Contract(format!("embedding {i} has length {}, expected {d}", z.len())));
            }
            let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::Contract(format!("embedding {i} has norm {norm}, expected 1")));
            }
        }
        Ok(())
    }
}

/// Supervised InfoNCE over normalized embeddings, implemented exactly as the
/// double sum with the `1/(N_c |P(i)|)` weight inside the anchor sum.
/// Anchors with no positives are skipped and `N_c` counts contributing
/// anchors; a batch where every anchor is positive-free is degenerate.
pub fn supcon_loss(batch: &ContrastiveBatch) -> Result<f64> {
    batch.validate()?;
    supcon_core(&batch.embeddings, &batch.labels, batch.temperature, None)
}

fn supcon_core(
    z: &[Vec<f64>],
    labels: &[bool],
    tau: f64,
    mut grad_out: Option<&mut [Vec<f64>]>,
) -> Result<f64> {
    let n = z.len();
    let dot = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| x * y).sum() };

    let mut positives: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        for p in 0..n {
            if p != i && labels[p] == labels[i] {
                positives[i].push(p);
            }
        }
    }
    let contributing: Vec<usize> = (0..n).filter(|&i| !positives[i].is_empty()).collect();
    if contributing.is_empty() {
        return Err(Error::DegenerateBatch(
            "no anchor has a same-label positive".into(),
        ));
    }
    let n_c = contributing.len() as f64;

    let mut sims = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                sims[i * n + j] = (dot(&z[i], &z[j]) / tau).exp();
            }
        }
    }

    let mut loss = 0.0f64;
    for &i in &contributing {
        let denom: f64 = (0..n).filter(|&a| a != i).map(|a| sims[i * n + a]).sum();
        let w = 1.0 / (n_c * positives[i].len() as f64);
        for &p in &positives[i] {
            loss -= w * (sims[i * n + p] / denom).ln();
        }
        if let Some(gz) = grad_out.as_deref_mut() {
            // d/dz_i and the positive/denominator sides, accumulated per pair
            let np = positives[i].len() as f64;
            for &p in &positives[i] {
                for d in 0..z[0].len() {
                    gz[i][d] -= w / tau * z[p][d];
                    gz[p][d] -= w / tau * z[i][d];
                }
            }
            for a in 0..n {
                if a == i {
                    continue;
                }
                let soft = sims[i * n + a] / denom;
                let coeff = w * np * soft / tau;
                for d in 0..z[0].len() {
                    gz[i][d] += coeff * z[a][d];
                    gz[a][d] += coeff * z[i][d];
                }
            }
        }
    }
    Ok(loss)
}

/// Graph op version over per-sample embedding tensors.
pub fn supcon_loss_op(embeddings: &[Tensor], labels: &[bool], tau: f64) -> Result<Tensor> {
    if embeddings.is_empty() {
        return Err(Error::Contract("supcon needs embeddings".into()));
    }
    let z: Vec<Vec<f64>> = embeddings.iter().map(|t| t.value().to_vec()).collect();
    let batch = ContrastiveBatch {
        embeddings: z.clone(),
        labels: labels.to_vec(),
        temperature: tau,
    };
    batch.validate()?;
    let loss = supcon_core(&z, labels, tau, None)?;
    let requires = embeddings.iter().any(|t| t.requires_grad());
    let backward = requires.then(|| {
        let ids: Vec<(usize, bool, usize)> = embeddings
            .iter()
            .map(|t| (t.id(), t.requires_grad(), t.numel()))
            .collect();
        let labels = labels.to_vec();
        Box::new(move |g: &[f64], grads: &mut [Option<Vec<f64>>]| {
            let mut gz: Vec<Vec<f64>> = z.iter().map(|zi| vec![0.0; zi.len()]).collect();
            supcon_core(&z, &labels, tau, Some(&mut gz)).expect("validated at construction");
            for ((id, req, len), gzi) in ids.iter().zip(&gz) {
                if *req {
                    let dst = acc_grad(grads, *id, *len);
                    for (d, &s) in dst.iter_mut().zip(gzi) {
                        *d += g[0] * s;
                    }
                }
            }
        }) as crate::autodiff::BackwardFn
    });
    Ok(embeddings[0]
        .graph()
        .push_node(vec![1], vec![loss], requires, false, backward))
}

/// `lambda * supcon + focal`.
pub fn combined_loss(focal_sum: f64, supcon: f64, w: &LossWeights) -> Result<f64> {
    w.validate()?;
    if !focal_sum.is_finite() || !supcon.is_finite() {
        return Err(Error::Numerical("non-finite loss component".into()));
    }
    Ok(w.lambda * supcon + focal_sum)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc: f64,
    /// None when the labels contain a single class.
    pub auc: Option<f64>,
    pub precision: f64,
    pub recall: f64,
    pub f1_macro: f64,
    pub confusion: ConfusionCounts,
    pub threshold: f64,
}

/// Threshold metrics plus rank-based AUC (Mann-Whitney with ties counted
/// as one half).
pub fn compute_metrics(scores: &[f64], labels: &[bool], threshold: f64) -> Result<MetricsReport> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::Contract(format!(
            "scores/labels must be nonempty and aligned: {} vs {}",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numerical("non-finite score".into()));
    }
    let mut counts = ConfusionCounts {
        tp: 0,
        fp: 0,
        tn: 0,
        fn_: 0,
    };
    for (&s, &y) in scores.iter().zip(labels) {
        let pred = s >= threshold;
        match (pred, y) {
            (true, true) => counts.tp += 1,
            (true, false) => counts.fp += 1,
            (false, false) => counts.tn += 1,
            (false, true) => counts.fn_ += 1,
        }
    }
    let total = scores.len() as f64;
    let acc = (counts.tp + counts.tn) as f64 / total;
    let precision = ratio(counts.tp, counts.tp + counts.fp);
    let recall = ratio(counts.tp, counts.tp + counts.fn_);
    let f1_pos = f1(precision, recall);
    let neg_precision = ratio(counts.tn, counts.tn + counts.fn_);
    let neg_recall = ratio(counts.tn, counts.tn + counts.fp);
    let f1_neg = f1(neg_precision, neg_recall);
    let f1_macro = 0.5 * (f1_pos + f1_neg);
    Ok(MetricsReport {
        acc,
        auc: auc_rank(scores, labels),
        precision,
        recall,
        f1_macro,
        confusion: counts,
        threshold,
    })
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// AUC from average ranks; equals pair counting with ties worth 0.5.
/// Returns None when either class is absent.
pub fn auc_rank(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&y| y).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut ranks = vec![0.0f64; scores.len()];
    let mut i = 0usize;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg_rank;
        }
        i = j + 1;
    }
    let rank_sum_pos: f64 = labels
        .iter()
        .zip(&ranks)
        .filter(|(&y, _)| y)
        .map(|(_, &r)| r)
        .sum();
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// One CSV row per report; used to assemble result tables.
pub fn metrics_csv_header() -> &'static str {
    "acc,auc,precision,recall,f1_macro,tp,fp,tn,fn,threshold"
}

pub fn metrics_csv_row(m: &MetricsReport) -> String {
    format!(
        "{:.6},{},{:.6},{:.6},{:.6},{},{},{},{},{:.4}",
        m.acc,
        m.auc.map(|a| format!("{a:.6}")).unwrap_or_else(|| "undefined".into()),
        m.precision,
        m.recall,
        m.f1_macro,
        m.confusion.tp,
        m.confusion.fp,
        m.confusion.tn,
        m.confusion.fn_,
        m.threshold,
    )
}
