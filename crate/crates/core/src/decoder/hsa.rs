//! Human semantic attention: channel weights computed from the foreground
//! stream rescale the original feature map.
//!
//! `F_w = sigmoid(W2 · relu(W1 · gap(F_A) + b1) + b2)` and the enhanced
//! feature is `gap(F_w ⊗ F_o)`. Channel scaling commutes with the spatial
//! mean, so the pooled form `F_w ⊙ gap(F_o)` is what training uses.

use std::ops::Deref;

use rand::Rng;

use crate::error::{Result, SavsError};
use crate::tensor::{gemm, FeatureMap, Param};

/// Global average pooling over the spatial positions.
pub fn gap(fm: &FeatureMap) -> Vec<f64> {
    let mut out = vec![0.0; fm.channels];
    for row in fm.data.chunks_exact(fm.channels) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    let n = fm.positions() as f64;
    for o in &mut out {
        *o /= n;
    }
    out
}

/// Channel weights, every component strictly inside (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights(Vec<f64>);

impl AttentionWeights {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
            return Err(SavsError::InvalidArgument(format!(
                "attention weight {v} outside (0, 1)"
            )));
        }
        Ok(AttentionWeights(values))
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for AttentionWeights {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Logistic function kept strictly inside (0, 1) even where f64 would round
/// to an endpoint.
fn sigmoid(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// The two fully connected layers of the attention head.
#[derive(Debug, Clone, PartialEq)]
pub struct HsaParams {
    channels: usize,
    reduction: usize,
    /// C × (C/r)
    pub fc1_weight: Param,
    pub fc1_bias: Param,
    /// (C/r) × C
    pub fc2_weight: Param,
    pub fc2_bias: Param,
}

#[derive(Debug, Clone)]
pub struct HsaCache {
    pooled: Vec<f64>,
    hidden: Vec<f64>,
    weights: Vec<f64>,
}

impl HsaParams {
    pub fn zeros(channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || channels == 0 || !channels.is_multiple_of(reduction) {
            return Err(SavsError::Config(format!(
                "{channels} channels are not divisible by reduction {reduction}"
            )));
        }
        let hidden = channels / reduction;
        Ok(HsaParams {
            channels,
            reduction,
            fc1_weight: Param::zeros("hsa.fc1.weight", &[channels, hidden]),
            fc1_bias: Param::zeros("hsa.fc1.bias", &[hidden]),
            fc2_weight: Param::zeros("hsa.fc2.weight", &[hidden, channels]),
            fc2_bias: Param::zeros("hsa.fc2.bias", &[channels]),
        })
    }

    pub fn new(channels: usize, reduction: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut p = Self::zeros(channels, reduction)?;
        let b1 = (6.0 / channels as f64).sqrt();
        let b2 = (3.0 / p.hidden() as f64).sqrt();
        for w in &mut p.fc1_weight.data {
            *w = rng.random_range(-b1..b1);
        }
        for w in &mut p.fc2_weight.data {
            *w = rng.random_range(-b2..b2);
        }
        Ok(p)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn reduction(&self) -> usize {
        self.reduction
    }

    pub fn hidden(&self) -> usize {
        self.channels / self.reduction
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.fc1_weight, &self.fc1_bias, &self.fc2_weight, &self.fc2_bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.fc1_weight,
            &mut self.fc1_bias,
            &mut self.fc2_weight,
            &mut self.fc2_bias,
        ]
    }

    /// Weights from an already pooled attention-branch vector.
    pub fn forward_pooled(&self, pooled: &[f64]) -> Result<(AttentionWeights, HsaCache)> {
        if pooled.len() != self.channels {
            return Err(SavsError::ShapeMismatch(format!(
                "attention input has {} channels, head expects {}",
                pooled.len(),
                self.channels
            )));
        }
        let h = self.hidden();
        let mut hidden = self.fc1_bias.data.clone();
        gemm(
            1,
            self.channels,
            h,
            pooled,
            false,
            &self.fc1_weight.data,
            false,
            1.0,
            &mut hidden,
        );
        for v in &mut hidden {
            *v = v.max(0.0);
        }
        let mut logits = self.fc2_bias.data.clone();
        gemm(
            1,
            h,
            self.channels,
            &hidden,
            false,
            &self.fc2_weight.data,
            false,
            1.0,
            &mut logits,
        );
        let weights: Vec<f64> = logits.into_iter().map(sigmoid).collect();
        let cache = HsaCache {
            pooled: pooled.to_vec(),
            hidden,
            weights: weights.clone(),
        };
        Ok((AttentionWeights(weights), cache))
    }

    /// Accumulates parameter gradients (order of [`HsaParams::params`]) and
    /// returns the gradient with respect to the pooled input.
    pub fn backward(&self, cache: &HsaCache, d_weights: &[f64], grads: &mut [Vec<f64>]) -> Vec<f64> {
        assert_eq!(grads.len(), 4, "gradient slots");
        let h = self.hidden();
        let c = self.channels;
        let d_logits: Vec<f64> = d_weights
            .iter()
            .zip(&cache.weights)
            .map(|(g, s)| g * s * (1.0 - s))
            .collect();
        let (g1, g2) = grads.split_at_mut(2);
        gemm(h, 1, c, &cache.hidden, false, &d_logits, false, 1.0, &mut g2[0]);
        crate::tensor::add_assign(&mut g2[1], &d_logits);
        let mut d_hidden = vec![0.0; h];
        gemm(
            1,
            c,
            h,
            &d_logits,
            false,
            &self.fc2_weight.data,
            true,
            0.0,
            &mut d_hidden,
        );
        for (d, a) in d_hidden.iter_mut().zip(&cache.hidden) {
            if *a <= 0.0 {
                *d = 0.0;
            }
        }
        gemm(c, 1, h, &cache.pooled, false, &d_hidden, false, 1.0, &mut g1[0]);
        crate::tensor::add_assign(&mut g1[1], &d_hidden);
        let mut d_pooled = vec![0.0; c];
        gemm(
            1,
            h,
            c,
            &d_hidden,
            false,
            &self.fc1_weight.data,
            true,
            0.0,
            &mut d_pooled,
        );
        d_pooled
    }
}

/// Attention weights from the attention-branch feature map.
pub fn hsa_weights(fa: &FeatureMap, p: &HsaParams) -> Result<AttentionWeights> {
    if fa.channels != p.channels {
        return Err(SavsError::ShapeMismatch(format!(
            "feature map has {} channels, attention head expects {}",
            fa.channels, p.channels
        )));
    }
    Ok(p.forward_pooled(&gap(fa))?.0)
}

/// Pooled reweighting: `weights[c] · gap(fo)[c]`.
///
/// Accepts any weight slice so callers can inject weights outside (0, 1).
pub fn hsa_reweight(fo: &FeatureMap, weights: &[f64]) -> Result<Vec<f64>> {
    check_channels(fo, weights)?;
    Ok(gap(fo).iter().zip(weights).map(|(m, w)| m * w).collect())
}

/// Spatial reweighting `weights ⊗ fo`, kept for attention maps.
pub fn hsa_reweight_spatial(fo: &FeatureMap, weights: &[f64]) -> Result<FeatureMap> {
    check_channels(fo, weights)?;
    let data = fo
        .data
        .chunks_exact(fo.channels)
        .flat_map(|row| row.iter().zip(weights).map(|(v, w)| v * w))
        .collect();
    FeatureMap::new(fo.height, fo.width, fo.channels, data)
}

fn check_channels(fo: &FeatureMap, weights: &[f64]) -> Result<()> {
    if fo.channels != weights.len() {
        return Err(SavsError::ShapeMismatch(format!(
            "feature map has {} channels, got {} weights",
            fo.channels,
            weights.len()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn constant_map(h: usize, w: usize, c: usize, v: f64) -> FeatureMap {
        FeatureMap::new(h, w, c, vec![v; h * w * c]).unwrap()
    }

    #[test]
    fn gap_cases() {
        assert_eq!(gap(&constant_map(3, 2, 4, 1.5)), vec![1.5; 4]);
        let one = FeatureMap::new(1, 1, 3, vec![1.0, -2.0, 7.0]).unwrap();
        assert_eq!(gap(&one), vec![1.0, -2.0, 7.0]);
        let m = FeatureMap::new(2, 2, 1, vec![1.0, 2.0, 3.0, 5.0]).unwrap();
        assert_eq!(gap(&m), vec![2.75]);
    }

    #[test]
    fn zero_head_gives_one_half() {
        let p = HsaParams::zeros(32, 16).unwrap();
        let w = hsa_weights(&constant_map(7, 7, 32, 3.0), &p).unwrap();
        assert!(w.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn bias_pushes_weights_towards_one() {
        let mut last = 0.5;
        for b in [1.0, 2.0, 4.0, 8.0, 16.0] {
            let mut p = HsaParams::zeros(4, 2).unwrap();
            p.fc2_bias.data = vec![b; 4];
            let w = hsa_weights(&constant_map(2, 2, 4, 1.0), &p).unwrap();
            assert!(w[0] > last && w[0] < 1.0);
            last = w[0];
        }
    }

    #[test]
    fn hand_set_head_matches_scalar_chain() {
        // C = 2, r = 2: one hidden unit.
        let mut p = HsaParams::zeros(2, 2).unwrap();
        p.fc1_weight.data = vec![0.5, -0.25];
        p.fc1_bias.data = vec![0.1];
        p.fc2_weight.data = vec![1.5, -2.0];
        p.fc2_bias.data = vec![0.2, 0.3];
        let fa = FeatureMap::new(2, 2, 2, [0.8, 0.4].repeat(4)).unwrap();
        let w = hsa_weights(&fa, &p).unwrap();
        let hidden = (0.5f64 * 0.8 - 0.25 * 0.4 + 0.1).max(0.0);
        let s = |z: f64| 1.0 / (1.0 + (-z).exp());
        assert!((w[0] - s(1.5 * hidden + 0.2)).abs() < 1e-12);
        assert!((w[1] - s(-2.0 * hidden + 0.3)).abs() < 1e-12);
    }

    #[test]
    fn reweight_cases() {
        let fo = FeatureMap::new(1, 2, 2, vec![3.0, 1.0, 5.0, 5.0]).unwrap();
        assert_eq!(hsa_reweight(&fo, &[1.0, 1.0]).unwrap(), gap(&fo));
        assert_eq!(hsa_reweight(&fo, &[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(hsa_reweight(&fo, &[0.5, 2.0]).unwrap(), vec![2.0, 6.0]);
        assert!(hsa_reweight(&fo, &[1.0]).is_err());
        assert!(hsa_weights(&fo, &HsaParams::zeros(4, 2).unwrap()).is_err());
    }

    #[test]
    fn reduction_must_divide_channels() {
        assert!(HsaParams::zeros(10, 4).is_err());
        assert!(HsaParams::zeros(8, 0).is_err());
        assert_eq!(HsaParams::zeros(128, 16).unwrap().hidden(), 8);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = HsaParams::new(8, 2, &mut rng).unwrap();
        let pooled: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = |p: &HsaParams, x: &[f64]| -> f64 {
            let (w, _) = p.forward_pooled(x).unwrap();
            w.iter().zip(&r).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = p.forward_pooled(&pooled).unwrap();
        let mut grads: Vec<Vec<f64>> = p.params().iter().map(|q| vec![0.0; q.len()]).collect();
        let d_in = p.backward(&cache, &r, &mut grads);
        let h = 1e-6;
        for pi in 0..4 {
            for i in 0..grads[pi].len() {
                let mut a = p.clone();
                a.params_mut()[pi].data[i] += h;
                let mut b = p.clone();
                b.params_mut()[pi].data[i] -= h;
                let fd = (f(&a, &pooled) - f(&b, &pooled)) / (2.0 * h);
                assert!((fd - grads[pi][i]).abs() < 1e-7, "{pi}[{i}] {fd} {}", grads[pi][i]);
            }
        }
        for i in 0..8 {
            let mut a = pooled.clone();
            a[i] += h;
            let mut b = pooled.clone();
            b[i] -= h;
            let fd = (f(&p, &a) - f(&p, &b)) / (2.0 * h);
            assert!((fd - d_in[i]).abs() < 1e-7);
        }
    }

    proptest! {
        #[test]
        fn weights_stay_inside_unit_interval(scale in -1e6f64..1e6, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = HsaParams::new(16, 4, &mut rng).unwrap();
            let data: Vec<f64> = (0..4 * 16).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
            let w = hsa_weights(&FeatureMap::new(2, 2, 16, data).unwrap(), &p).unwrap();
            prop_assert!(w.iter().all(|&v| v > 0.0 && v < 1.0));
            prop_assert!(AttentionWeights::new(w.to_vec()).is_ok());
        }

        #[test]
        fn pooled_and_spatial_reweighting_commute(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let fo = FeatureMap::new(7, 7, 6, (0..7 * 7 * 6).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let w: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..1.0)).collect();
            let spatial = gap(&hsa_reweight_spatial(&fo, &w).unwrap());
            let pooled = hsa_reweight(&fo, &w).unwrap();
            for (a, b) in spatial.iter().zip(&pooled) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
        }
    }
}
