//! The full model: backbone, optional attention branch + head, classifier.

use std::collections::hash_map::DefaultHasher;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::str::FromStr;

use rand::Rng;

use super::extractor::{ConvExtractor, ExtractorConfig, FeatureExtractor};
use super::hsa::{gap, AttentionWeights, HsaCache, HsaParams};
use crate::error::{Result, SavsError};
use crate::semantic_encoder::Image;
use crate::tensor::{gemm, FeatureMap, Param};

/// Which mechanisms are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Ablation {
    /// Backbone only; the embedding is `gap(F_o)`.
    Baseline,
    /// Backbone with foreground-driven channel attention.
    Hsa,
    /// Attention plus the shielded stream and its alignment loss.
    #[default]
    HsaVcs,
}

impl Ablation {
    pub fn uses_hsa(self) -> bool {
        self != Ablation::Baseline
    }

    pub fn uses_vcs(self) -> bool {
        self == Ablation::HsaVcs
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::Baseline => "baseline",
            Ablation::Hsa => "hsa",
            Ablation::HsaVcs => "hsa_vcs",
        })
    }
}

impl FromStr for Ablation {
    type Err = SavsError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "baseline" => Ok(Ablation::Baseline),
            "hsa" => Ok(Ablation::Hsa),
            "hsa_vcs" | "full" => Ok(Ablation::HsaVcs),
            other => Err(SavsError::Config(format!(
                "unknown ablation `{other}` (baseline | hsa | hsa_vcs)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub extractor: ExtractorConfig,
    pub reduction: usize,
    pub num_classes: usize,
    pub ablation: Ablation,
}

/// Fully connected layer, `y = Wᵀx + b` with `W` stored in × out.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn zeros(name: &str, inputs: usize, outputs: usize) -> Self {
        Linear {
            weight: Param::zeros(format!("{name}.weight"), &[inputs, outputs]),
            bias: Param::zeros(format!("{name}.bias"), &[outputs]),
        }
    }

    pub fn new(name: &str, inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let mut l = Self::zeros(name, inputs, outputs);
        let bound = (3.0 / inputs as f64).sqrt();
        for w in &mut l.weight.data {
            *w = rng.random_range(-bound..bound);
        }
        l
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.bias.data.clone();
        gemm(
            1,
            self.inputs(),
            self.outputs(),
            x,
            false,
            &self.weight.data,
            false,
            1.0,
            &mut y,
        );
        y
    }

    /// Accumulates into `grads` = [weight, bias]; returns `dL/dx`.
    fn backward(&self, x: &[f64], dy: &[f64], grads: &mut [Vec<f64>]) -> Vec<f64> {
        let (gw, gb) = grads.split_at_mut(1);
        gemm(self.inputs(), 1, self.outputs(), x, false, dy, false, 1.0, &mut gw[0]);
        crate::tensor::add_assign(&mut gb[0], dy);
        let mut dx = vec![0.0; self.inputs()];
        gemm(
            1,
            self.outputs(),
            self.inputs(),
            dy,
            false,
            &self.weight.data,
            true,
            0.0,
            &mut dx,
        );
        dx
    }
}

/// Pooled outputs of one training forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamOutputs {
    /// `gap(F_o)`.
    pub original: Vec<f64>,
    /// `F_w ⊙ gap(F_o)`, or `gap(F_o)` without attention.
    pub enhanced: Vec<f64>,
    /// `gap(backbone(shielded))` when a shielded image was supplied.
    pub shielded: Option<Vec<f64>>,
    pub weights: Option<AttentionWeights>,
    /// Classifier scores computed from `enhanced`.
    pub logits: Vec<f64>,
}

/// Everything the backward pass needs from a forward pass.
pub struct ForwardCache<E: FeatureExtractor> {
    original: E::Cache,
    original_pooled: Vec<f64>,
    map_dims: (usize, usize, usize),
    attention: Option<(E::Cache, HsaCache, Vec<f64>, (usize, usize, usize))>,
    shielded: Option<E::Cache>,
    enhanced: Vec<f64>,
}

/// Loss gradients with respect to the pooled outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputGrads {
    pub enhanced: Vec<f64>,
    pub original: Vec<f64>,
    pub shielded: Option<Vec<f64>>,
    pub logits: Vec<f64>,
}

/// Parameter gradients aligned with [`SavsModel::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Vec<f64>>);

impl Gradients {
    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            crate::tensor::add_assign(a, b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in self.0.iter_mut().flatten() {
            *v *= s;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }
}

/// Backbone, attention branch, attention head and classifier.
///
/// The original and the shielded stream both run through `backbone`; there
/// is no second copy of its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SavsModel<E: FeatureExtractor = ConvExtractor> {
    ablation: Ablation,
    backbone: E,
    attention: Option<E>,
    hsa: Option<HsaParams>,
    classifier: Linear,
}

fn spread_over_positions(d_pooled: &[f64], dims: (usize, usize, usize)) -> FeatureMap {
    let (h, w, c) = dims;
    let n = (h * w) as f64;
    let row: Vec<f64> = d_pooled.iter().map(|g| g / n).collect();
    FeatureMap {
        height: h,
        width: w,
        channels: c,
        data: row.repeat(h * w),
    }
}

impl SavsModel<ConvExtractor> {
    /// Randomly initialized model with the default convolutional extractor.
    pub fn new(config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let backbone = ConvExtractor::new(config.extractor.clone(), "backbone", rng)?;
        let (attention, hsa) = if config.ablation.uses_hsa() {
            let attention = ConvExtractor::new(config.extractor.clone(), "attention", rng)?;
            let c = attention.output_shape().2;
            (Some(attention), Some(HsaParams::new(c, config.reduction, rng)?))
        } else {
            (None, None)
        };
        let c = backbone.output_shape().2;
        let classifier = Linear::new("classifier", c, config.num_classes, rng);
        Self::from_parts(config.ablation, backbone, attention, hsa, classifier)
    }

    /// Same architecture as [`SavsModel::new`] with every parameter zero.
    pub fn zeroed(config: &ModelConfig) -> Result<Self> {
        let backbone = ConvExtractor::zeroed(config.extractor.clone(), "backbone")?;
        let c = backbone.output_shape().2;
        let (attention, hsa) = if config.ablation.uses_hsa() {
            (
                Some(ConvExtractor::zeroed(config.extractor.clone(), "attention")?),
                Some(HsaParams::zeros(c, config.reduction)?),
            )
        } else {
            (None, None)
        };
        let classifier = Linear::zeros("classifier", c, config.num_classes);
        Self::from_parts(config.ablation, backbone, attention, hsa, classifier)
    }
}

impl<E: FeatureExtractor> SavsModel<E> {
    pub fn from_parts(
        ablation: Ablation,
        backbone: E,
        attention: Option<E>,
        hsa: Option<HsaParams>,
        classifier: Linear,
    ) -> Result<Self> {
        let c = backbone.output_shape().2;
        if ablation.uses_hsa() != (attention.is_some() && hsa.is_some()) {
            return Err(SavsError::Config(format!(
                "ablation `{ablation}` needs attention branch and head present: {}",
                ablation.uses_hsa()
            )));
        }
        if let (Some(a), Some(h)) = (&attention, &hsa) {
            if a.output_shape().2 != c || h.channels() != c {
                return Err(SavsError::Config(format!(
                    "attention branch ({}) and head ({}) must match backbone channels ({c})",
                    a.output_shape().2,
                    h.channels()
                )));
            }
            if a.input_dims() != backbone.input_dims() {
                return Err(SavsError::Config("branches disagree on input size".into()));
            }
        }
        if classifier.inputs() != c {
            return Err(SavsError::Config(format!(
                "classifier takes {} inputs, backbone yields {c}",
                classifier.inputs()
            )));
        }
        Ok(SavsModel {
            ablation,
            backbone,
            attention,
            hsa,
            classifier,
        })
    }

    pub fn ablation(&self) -> Ablation {
        self.ablation
    }

    pub fn embedding_dim(&self) -> usize {
        self.backbone.output_shape().2
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.outputs()
    }

    pub fn input_dims(&self) -> (usize, usize) {
        self.backbone.input_dims()
    }

    pub fn backbone(&self) -> &E {
        &self.backbone
    }

    pub fn attention(&self) -> Option<&E> {
        self.attention.as_ref()
    }

    pub fn hsa(&self) -> Option<&HsaParams> {
        self.hsa.as_ref()
    }

    pub fn hsa_mut(&mut self) -> Option<&mut HsaParams> {
        self.hsa.as_mut()
    }

    pub fn attention_mut(&mut self) -> Option<&mut E> {
        self.attention.as_mut()
    }

    pub fn classifier(&self) -> &Linear {
        &self.classifier
    }

    /// Extractor used for the original image.
    pub fn original_stream(&self) -> &E {
        &self.backbone
    }

    /// Extractor used for the shielded image.
    pub fn shielded_stream(&self) -> &E {
        &self.backbone
    }

    /// Parameters in a fixed order: backbone, attention branch, head,
    /// classifier.
    pub fn params(&self) -> Vec<&Param> {
        let mut out = self.backbone.params();
        if let Some(a) = &self.attention {
            out.extend(a.params());
        }
        if let Some(h) = &self.hsa {
            out.extend(h.params());
        }
        out.push(&self.classifier.weight);
        out.push(&self.classifier.bias);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.backbone.params_mut();
        if let Some(a) = &mut self.attention {
            out.extend(a.params_mut());
        }
        if let Some(h) = &mut self.hsa {
            out.extend(h.params_mut());
        }
        out.push(&mut self.classifier.weight);
        out.push(&mut self.classifier.bias);
        out
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients(self.params().iter().map(|p| vec![0.0; p.len()]).collect())
    }

    fn attention_parts(&self) -> Option<(&E, &HsaParams)> {
        self.attention.as_ref().zip(self.hsa.as_ref())
    }

    /// Training forward pass. `shielded` is only consumed by the shielded
    /// stream; the original map is computed once and reused for the
    /// enhanced feature.
    pub fn forward_train(
        &self,
        original: &Image,
        foreground: &Image,
        shielded: Option<&Image>,
    ) -> Result<(StreamOutputs, ForwardCache<E>)> {
        let (fo, fo_cache) = self.backbone.forward_cached(original)?;
        let pooled = gap(&fo);
        let (enhanced, weights, attention) = match self.attention_parts() {
            Some((branch, head)) => {
                let (fa, fa_cache) = branch.forward_cached(foreground)?;
                let (w, hsa_cache) = head.forward_pooled(&gap(&fa))?;
                let enhanced: Vec<f64> = pooled.iter().zip(w.iter()).map(|(m, w)| m * w).collect();
                let fa_dims = (fa.height, fa.width, fa.channels);
                let wv = w.to_vec();
                (enhanced, Some(w), Some((fa_cache, hsa_cache, wv, fa_dims)))
            }
            None => (pooled.clone(), None, None),
        };
        let (shielded_vec, shielded_cache) = match shielded {
            Some(img) => {
                let (fs, cache) = self.backbone.forward_cached(img)?;
                (Some(gap(&fs)), Some(cache))
            }
            None => (None, None),
        };
        let logits = self.classifier.forward(&enhanced);
        let outputs = StreamOutputs {
            original: pooled.clone(),
            enhanced: enhanced.clone(),
            shielded: shielded_vec,
            weights,
            logits,
        };
        let cache = ForwardCache {
            original: fo_cache,
            original_pooled: pooled,
            map_dims: (fo.height, fo.width, fo.channels),
            attention,
            shielded: shielded_cache,
            enhanced,
        };
        Ok((outputs, cache))
    }

    /// Retrieval embedding: the enhanced feature (original feature for the
    /// baseline).
    pub fn forward_test(&self, original: &Image, foreground: &Image) -> Result<Vec<f64>> {
        Ok(self.forward_train(original, foreground, None)?.0.enhanced)
    }

    /// Original and (optionally) attention feature maps, for diagnostics.
    pub fn feature_maps(&self, original: &Image, foreground: &Image) -> Result<(FeatureMap, Option<AttentionWeights>)> {
        let fo = self.backbone.forward(original)?;
        let w = match self.attention_parts() {
            Some((branch, head)) => Some(super::hsa::hsa_weights(&branch.forward(foreground)?, head)?),
            None => None,
        };
        Ok((fo, w))
    }

    /// Accumulates parameter gradients for one sample into `grads`.
    pub fn backward(&self, cache: &ForwardCache<E>, dout: &OutputGrads, grads: &mut Gradients) {
        let nb = self.backbone.params().len();
        let na = self.attention.as_ref().map_or(0, |a| a.params().len());
        let nh = if self.hsa.is_some() { 4 } else { 0 };
        let (g_backbone, rest) = grads.0.split_at_mut(nb);
        let (g_attention, rest) = rest.split_at_mut(na);
        let (g_hsa, g_cls) = rest.split_at_mut(nh);

        let mut d_enhanced = self.classifier.backward(&cache.enhanced, &dout.logits, g_cls);
        crate::tensor::add_assign(&mut d_enhanced, &dout.enhanced);

        let mut d_pooled = dout.original.clone();
        match (self.attention_parts(), &cache.attention) {
            (Some((branch, head)), Some((fa_cache, hsa_cache, w, fa_dims))) => {
                let mut d_w = vec![0.0; w.len()];
                for c in 0..w.len() {
                    d_pooled[c] += d_enhanced[c] * w[c];
                    d_w[c] = d_enhanced[c] * cache.original_pooled[c];
                }
                let d_fa_pooled = head.backward(hsa_cache, &d_w, g_hsa);
                branch.backward(fa_cache, &spread_over_positions(&d_fa_pooled, *fa_dims), g_attention);
            }
            _ => crate::tensor::add_assign(&mut d_pooled, &d_enhanced),
        }
        self.backbone.backward(
            &cache.original,
            &spread_over_positions(&d_pooled, cache.map_dims),
            g_backbone,
        );
        if let (Some(sc), Some(ds)) = (&cache.shielded, &dout.shielded) {
            self.backbone
                .backward(sc, &spread_over_positions(ds, cache.map_dims), g_backbone);
        }
    }
}

/// Order-sensitive hash of parameter bit patterns.
pub fn param_fingerprint(params: &[&Param]) -> u64 {
    let mut h = DefaultHasher::new();
    for p in params {
        p.name.hash(&mut h);
        for v in &p.data {
            v.to_bits().hash(&mut h);
        }
    }
    h.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::extractor::ConvSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_config(ablation: Ablation) -> ModelConfig {
        ModelConfig {
            extractor: ExtractorConfig {
                input_height: 8,
                input_width: 8,
                layers: vec![
                    ConvSpec {
                        kernel: 2,
                        stride: 2,
                        out_channels: 4,
                    },
                    ConvSpec {
                        kernel: 2,
                        stride: 1,
                        out_channels: 8,
                    },
                ],
                input_mean: 0.5,
                input_std: 0.25,
            },
            reduction: 2,
            num_classes: 3,
            ablation,
        }
    }

    fn image(seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(
            8,
            8,
            (0..64).map(|_| [rng.random(), rng.random(), rng.random()]).collect(),
        )
        .unwrap()
    }

    fn model(ablation: Ablation, seed: u64) -> SavsModel {
        SavsModel::new(&tiny_config(ablation), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn identical_shielded_input_reproduces_original_feature() {
        let m = model(Ablation::HsaVcs, 1);
        let img = image(2);
        let (out, _) = m.forward_train(&img, &image(3), Some(&img)).unwrap();
        assert_eq!(out.shielded.unwrap(), out.original);
    }

    #[test]
    fn zeroed_attention_halves_the_original_feature() {
        let mut m = model(Ablation::HsaVcs, 1);
        for p in m.attention_mut().unwrap().params_mut() {
            p.data.iter_mut().for_each(|v| *v = 0.0);
        }
        for p in m.hsa_mut().unwrap().params_mut() {
            p.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let (out, _) = m.forward_train(&image(2), &image(3), None).unwrap();
        for (e, o) in out.enhanced.iter().zip(&out.original) {
            assert_eq!(*e, 0.5 * o);
        }
    }

    #[test]
    fn test_path_equals_training_enhanced_feature() {
        let m = model(Ablation::HsaVcs, 4);
        let (a, b) = (image(5), image(6));
        let (out, _) = m.forward_train(&a, &b, Some(&image(7))).unwrap();
        let t1 = m.forward_test(&a, &b).unwrap();
        let t2 = m.forward_test(&a, &b).unwrap();
        assert_eq!(t1, out.enhanced);
        assert_eq!(t1, t2);
        let n_e: f64 = t1.iter().map(|v| v * v).sum::<f64>().sqrt();
        let n_o: f64 = out.original.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(n_e <= n_o);
    }

    #[test]
    fn baseline_has_no_attention_groups() {
        let m = model(Ablation::Baseline, 1);
        assert!(m.attention().is_none() && m.hsa().is_none());
        assert!(m
            .params()
            .iter()
            .all(|p| p.name.starts_with("backbone") || p.name.starts_with("classifier")));
        let (out, _) = m.forward_train(&image(1), &image(2), None).unwrap();
        assert_eq!(out.enhanced, out.original);
        assert!(out.weights.is_none());
    }

    #[test]
    fn streams_share_one_backbone() {
        let m = model(Ablation::HsaVcs, 1);
        assert!(std::ptr::eq(m.original_stream(), m.shielded_stream()));
    }

    #[test]
    fn mismatched_input_is_rejected() {
        let m = model(Ablation::HsaVcs, 1);
        let small = Image::filled(4, 4, [0.5; 3]);
        assert!(matches!(
            m.forward_train(&small, &small, None),
            Err(SavsError::InvalidArgument(_))
        ));
    }

    #[test]
    fn ablation_names_roundtrip() {
        for a in [Ablation::Baseline, Ablation::Hsa, Ablation::HsaVcs] {
            assert_eq!(a.to_string().parse::<Ablation>().unwrap(), a);
        }
        assert!("both".parse::<Ablation>().is_err());
    }

    /// Scalar objective over all outputs, differentiated by hand below.
    fn objective(out: &StreamOutputs, r: &[Vec<f64>]) -> f64 {
        let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        d(&out.enhanced, &r[0])
            + d(&out.original, &r[1])
            + d(out.shielded.as_ref().unwrap(), &r[2])
            + d(&out.logits, &r[3])
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = model(Ablation::HsaVcs, 8);
        let (a, b, c) = (image(1), image(2), image(3));
        let r: Vec<Vec<f64>> = [8, 8, 8, 3]
            .iter()
            .map(|&n| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let (_, cache) = m.forward_train(&a, &b, Some(&c)).unwrap();
        let mut grads = m.zero_grads();
        m.backward(
            &cache,
            &OutputGrads {
                enhanced: r[0].clone(),
                original: r[1].clone(),
                shielded: Some(r[2].clone()),
                logits: r[3].clone(),
            },
            &mut grads,
        );
        let h = 1e-6;
        let names: Vec<String> = m.params().iter().map(|p| p.name.clone()).collect();
        for (pi, name) in names.iter().enumerate() {
            for idx in (0..grads.0[pi].len()).step_by(3) {
                let mut plus = m.clone();
                plus.params_mut()[pi].data[idx] += h;
                let mut minus = m.clone();
                minus.params_mut()[pi].data[idx] -= h;
                let fp = objective(&plus.forward_train(&a, &b, Some(&c)).unwrap().0, &r);
                let fm = objective(&minus.forward_train(&a, &b, Some(&c)).unwrap().0, &r);
                let fd = (fp - fm) / (2.0 * h);
                let an = grads.0[pi][idx];
                assert!(
                    (fd - an).abs() <= 1e-5 * (1.0 + an.abs()),
                    "{name}[{idx}]: fd {fd} vs analytic {an}"
                );
            }
        }
    }
}
