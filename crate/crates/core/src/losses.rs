//! Identity cross-entropy, circle loss, the shielding alignment loss, and
//! their weighted sum.

use std::fmt;
use std::str::FromStr;

use log::warn;

use crate::error::{Result, SavsError};
use crate::tensor::{dot, l2_norm};

/// Circle-loss scale and optima.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CircleLossConfig {
    pub gamma: f64,
    pub positive_optimum: f64,
    pub negative_optimum: f64,
}

impl CircleLossConfig {
    /// `O_p = 1 + m`, `O_n = -m`.
    pub fn from_margin(gamma: f64, margin: f64) -> Result<Self> {
        Self::new(gamma, 1.0 + margin, -margin)
    }

    pub fn new(gamma: f64, positive_optimum: f64, negative_optimum: f64) -> Result<Self> {
        if !(gamma > 0.0) {
            return Err(SavsError::Config(format!("circle gamma must be positive, got {gamma}")));
        }
        if !(positive_optimum > negative_optimum) {
            return Err(SavsError::Config(format!(
                "positive optimum {positive_optimum} must exceed negative optimum {negative_optimum}"
            )));
        }
        Ok(CircleLossConfig {
            gamma,
            positive_optimum,
            negative_optimum,
        })
    }
}

impl Default for CircleLossConfig {
    fn default() -> Self {
        CircleLossConfig::from_margin(32.0, 0.25).unwrap()
    }
}

/// How the self-paced weights enter the gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AlphaGradient {
    /// Weights are treated as constants (the usual circle-loss training
    /// rule, which keeps pulling positives towards 1 and negatives down).
    #[default]
    Detached,
    /// Exact derivative of the loss value, weights included.
    Full,
}

/// Similarities of one anchor to its positives and negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityBundle {
    pub s_p: Vec<f64>,
    pub s_n: Vec<f64>,
}

impl SimilarityBundle {
    pub fn contributes(&self) -> bool {
        !self.s_p.is_empty() && !self.s_n.is_empty()
    }
}

/// A bundle plus the batch indices its similarities came from.
#[derive(Debug, Clone, PartialEq)]
pub struct MinedAnchor {
    pub anchor: usize,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
    pub bundle: SimilarityBundle,
}

/// Relative weight of each loss term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub id: f64,
    pub circle: f64,
    pub semantic: f64,
}

impl LossWeights {
    pub fn new(id: f64, circle: f64, semantic: f64) -> Result<Self> {
        let w = LossWeights { id, circle, semantic };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.id, self.circle, self.semantic];
        if all.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(SavsError::Config(format!(
                "loss weights must be non-negative: {self:?}"
            )));
        }
        if all.iter().all(|v| *v == 0.0) {
            return Err(SavsError::Config("loss weights are all zero".into()));
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            id: 1.0,
            circle: 1.0,
            semantic: 1.0,
        }
    }
}

/// Form of the alignment loss between original and shielded features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SemanticLossKind {
    /// Batch mean of `‖F_o − F_s‖₂`.
    #[default]
    L2,
    /// Batch mean of `‖F_o − F_s‖₂² / C` (element-wise mean squared error).
    Mse,
}

impl fmt::Display for SemanticLossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SemanticLossKind::L2 => "l2",
            SemanticLossKind::Mse => "mse",
        })
    }
}

impl FromStr for SemanticLossKind {
    type Err = SavsError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "l2" => Ok(SemanticLossKind::L2),
            "mse" => Ok(SemanticLossKind::Mse),
            other => Err(SavsError::Config(format!("unknown semantic loss `{other}` (l2 | mse)"))),
        }
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// `ln(1 + e^t)` without overflow.
fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

fn check_labels(n_classes: usize, labels: &[usize]) -> Result<()> {
    if let Some(l) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(SavsError::InvalidArgument(format!("label {l} outside 0..{n_classes}")));
    }
    Ok(())
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn id_loss_with_grad(logits: &[Vec<f64>], labels: &[usize]) -> Result<(f64, Vec<Vec<f64>>)> {
    if logits.len() != labels.len() || logits.is_empty() {
        return Err(SavsError::InvalidArgument(format!(
            "{} logit rows for {} labels",
            logits.len(),
            labels.len()
        )));
    }
    let b = logits.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(logits.len());
    for (row, &label) in logits.iter().zip(labels) {
        check_labels(row.len(), &[label])?;
        let lse = log_sum_exp(row);
        total += lse - row[label];
        let mut g: Vec<f64> = row.iter().map(|z| (z - lse).exp() / b).collect();
        g[label] -= 1.0 / b;
        grads.push(g);
    }
    Ok((total / b, grads))
}

pub fn id_loss(logits: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    Ok(id_loss_with_grad(logits, labels)?.0)
}

/// Circle loss of a single anchor; an anchor without positives or negatives
/// yields 0.
pub fn circle_loss(bundle: &SimilarityBundle, cfg: &CircleLossConfig) -> f64 {
    circle_loss_with_grad(bundle, cfg, AlphaGradient::Full).0
}

/// Loss plus gradients with respect to each `s_p` and `s_n`.
pub fn circle_loss_with_grad(
    bundle: &SimilarityBundle,
    cfg: &CircleLossConfig,
    mode: AlphaGradient,
) -> (f64, Vec<f64>, Vec<f64>) {
    if !bundle.contributes() {
        return (0.0, vec![0.0; bundle.s_p.len()], vec![0.0; bundle.s_n.len()]);
    }
    let g = cfg.gamma;
    let alpha_p: Vec<f64> = bundle.s_p.iter().map(|s| (cfg.positive_optimum - s).max(0.0)).collect();
    let alpha_n: Vec<f64> = bundle.s_n.iter().map(|s| (s - cfg.negative_optimum).max(0.0)).collect();
    // exponent(i, j) = a_j - b_i
    let a: Vec<f64> = alpha_n.iter().zip(&bundle.s_n).map(|(al, s)| g * al * s).collect();
    let neg_b: Vec<f64> = alpha_p.iter().zip(&bundle.s_p).map(|(al, s)| -g * al * s).collect();
    let lse_a = log_sum_exp(&a);
    let lse_b = log_sum_exp(&neg_b);
    let t = lse_a + lse_b;
    let loss = softplus(t);
    let outer = 1.0 / (1.0 + (-t).exp());

    let d_sn = bundle
        .s_n
        .iter()
        .zip(&a)
        .zip(&alpha_n)
        .map(|((s, aj), al)| {
            let slope = match mode {
                AlphaGradient::Detached => *al,
                AlphaGradient::Full if *s > cfg.negative_optimum => al + s,
                AlphaGradient::Full => 0.0,
            };
            outer * (aj - lse_a).exp() * g * slope
        })
        .collect();
    let d_sp = bundle
        .s_p
        .iter()
        .zip(&neg_b)
        .zip(&alpha_p)
        .map(|((s, bi), al)| {
            let slope = match mode {
                AlphaGradient::Detached => *al,
                AlphaGradient::Full if *s < cfg.positive_optimum => al - s,
                AlphaGradient::Full => 0.0,
            };
            -outer * (bi - lse_b).exp() * g * slope
        })
        .collect();
    (loss, d_sp, d_sn)
}

/// Mean circle loss over the anchors that have both positives and
/// negatives.
pub fn circle_loss_batch(bundles: &[SimilarityBundle], cfg: &CircleLossConfig) -> Result<f64> {
    let losses: Vec<f64> = bundles
        .iter()
        .filter(|b| b.contributes())
        .map(|b| circle_loss(b, cfg))
        .collect();
    if losses.is_empty() {
        return Err(SavsError::InvalidArgument(
            "no anchor has both positives and negatives".into(),
        ));
    }
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Cosine similarities of every anchor to its same-label (excluding itself)
/// and different-label batch members.
pub fn mine_similarities(embeddings: &[Vec<f64>], labels: &[usize]) -> Result<Vec<MinedAnchor>> {
    if embeddings.len() != labels.len() {
        return Err(SavsError::InvalidArgument(format!(
            "{} embeddings for {} labels",
            embeddings.len(),
            labels.len()
        )));
    }
    let sims = cosine_table(embeddings);
    Ok((0..embeddings.len())
        .map(|i| {
            let positives: Vec<usize> = (0..labels.len())
                .filter(|&j| j != i && labels[j] == labels[i])
                .collect();
            let negatives: Vec<usize> = (0..labels.len()).filter(|&j| labels[j] != labels[i]).collect();
            let bundle = SimilarityBundle {
                s_p: positives.iter().map(|&j| sims[i][j]).collect(),
                s_n: negatives.iter().map(|&j| sims[i][j]).collect(),
            };
            MinedAnchor {
                anchor: i,
                positives,
                negatives,
                bundle,
            }
        })
        .collect())
}

fn cosine_table(embeddings: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let sq: Vec<f64> = embeddings.iter().map(|e| dot(e, e)).collect();
    if sq.contains(&0.0) {
        warn!("zero-norm embedding in batch; its similarities are set to 0");
    }
    let n = embeddings.len();
    let mut t = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            if sq[i] > 0.0 && sq[j] > 0.0 {
                // sqrt of the product keeps identical rows at exactly 1
                t[i][j] = (dot(&embeddings[i], &embeddings[j]) / (sq[i] * sq[j]).sqrt()).clamp(-1.0, 1.0);
            }
        }
    }
    t
}

/// Batch circle loss on raw embeddings, with gradients through the cosine
/// normalization.
pub fn circle_loss_embeddings(
    embeddings: &[Vec<f64>],
    labels: &[usize],
    cfg: &CircleLossConfig,
    mode: AlphaGradient,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mined = mine_similarities(embeddings, labels)?;
    let contributing: Vec<&MinedAnchor> = mined.iter().filter(|m| m.bundle.contributes()).collect();
    if contributing.is_empty() {
        return Err(SavsError::InvalidArgument(
            "no anchor has both positives and negatives".into(),
        ));
    }
    let scale = 1.0 / contributing.len() as f64;
    let dim = embeddings.first().map_or(0, Vec::len);
    let norms: Vec<f64> = embeddings.iter().map(|e| l2_norm(e)).collect();
    let units: Vec<Vec<f64>> = embeddings
        .iter()
        .zip(&norms)
        .map(|(e, n)| {
            if *n > 0.0 {
                e.iter().map(|v| v / n).collect()
            } else {
                vec![0.0; dim]
            }
        })
        .collect();
    // dL/ds for every ordered pair, then one pass through the cosine.
    let n = embeddings.len();
    let mut d_sim = vec![vec![0.0; n]; n];
    let mut total = 0.0;
    for m in contributing {
        let (loss, d_sp, d_sn) = circle_loss_with_grad(&m.bundle, cfg, mode);
        total += loss;
        for (&j, d) in m.positives.iter().zip(&d_sp) {
            d_sim[m.anchor][j] += d * scale;
        }
        for (&j, d) in m.negatives.iter().zip(&d_sn) {
            d_sim[m.anchor][j] += d * scale;
        }
    }
    let mut grads = vec![vec![0.0; dim]; n];
    for i in 0..n {
        for j in 0..n {
            let d = d_sim[i][j];
            if d == 0.0 || norms[i] == 0.0 || norms[j] == 0.0 {
                continue;
            }
            let s = dot(&units[i], &units[j]);
            // ds/dx_i = (u_j - s u_i) / |x_i|, symmetric for x_j
            for k in 0..dim {
                grads[i][k] += d * (units[j][k] - s * units[i][k]) / norms[i];
                grads[j][k] += d * (units[i][k] - s * units[j][k]) / norms[j];
            }
        }
    }
    Ok((total * scale, grads))
}

fn check_pairs(fo: &[Vec<f64>], fs: &[Vec<f64>]) -> Result<()> {
    if fo.len() != fs.len() || fo.is_empty() {
        return Err(SavsError::InvalidArgument(format!(
            "semantic loss needs equal non-empty batches, got {} and {}",
            fo.len(),
            fs.len()
        )));
    }
    for (a, b) in fo.iter().zip(fs) {
        if a.len() != b.len() {
            return Err(SavsError::ShapeMismatch(format!(
                "feature lengths {} and {}",
                a.len(),
                b.len()
            )));
        }
    }
    Ok(())
}

/// Alignment loss and its gradients with respect to both feature batches.
pub fn semantic_loss_with_grad(
    fo: &[Vec<f64>],
    fs: &[Vec<f64>],
    kind: SemanticLossKind,
) -> Result<(f64, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    check_pairs(fo, fs)?;
    let b = fo.len() as f64;
    let mut total = 0.0;
    let mut d_fo = Vec::with_capacity(fo.len());
    let mut d_fs = Vec::with_capacity(fo.len());
    for (a, s) in fo.iter().zip(fs) {
        let diff: Vec<f64> = a.iter().zip(s).map(|(x, y)| x - y).collect();
        let g: Vec<f64> = match kind {
            SemanticLossKind::L2 => {
                let n = l2_norm(&diff);
                total += n;
                if n > 0.0 {
                    diff.iter().map(|d| d / (n * b)).collect()
                } else {
                    vec![0.0; diff.len()]
                }
            }
            SemanticLossKind::Mse => {
                let c = diff.len().max(1) as f64;
                total += dot(&diff, &diff) / c;
                diff.iter().map(|d| 2.0 * d / (c * b)).collect()
            }
        };
        d_fs.push(g.iter().map(|v| -v).collect());
        d_fo.push(g);
    }
    Ok((total / b, d_fo, d_fs))
}

pub fn semantic_loss(fo: &[Vec<f64>], fs: &[Vec<f64>], kind: SemanticLossKind) -> Result<f64> {
    Ok(semantic_loss_with_grad(fo, fs, kind)?.0)
}

/// Weighted sum of the three terms; a non-finite term is reported by name.
pub fn total_loss(l_id: f64, l_cir: f64, l_sem: f64, w: &LossWeights) -> Result<f64> {
    for (name, v) in [("id loss", l_id), ("circle loss", l_cir), ("semantic loss", l_sem)] {
        if !v.is_finite() {
            return Err(SavsError::NonFinite {
                component: name.to_string(),
            });
        }
    }
    Ok(w.id * l_id + w.circle * l_cir + w.semantic * l_sem)
}
