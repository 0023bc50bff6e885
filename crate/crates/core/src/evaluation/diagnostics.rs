use std::fmt;
use std::path::Path;
use std::str::FromStr;

use image::imageops::{self, FilterType};
use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::data::LoadedSample;
use crate::decoder::{FeatureExtractor, SavsModel};
use crate::error::{Result, SavsError};
use crate::semantic_encoder::{shielding_mask, ShieldClasses};
use crate::tensor::{dot, l2_normalize, FeatureMap};
use crate::training::shield_batch;

/// Pairwise cosine similarities. Exactly symmetric; zero rows give 0.
pub fn similarity_matrix(embeddings: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    if embeddings.len() < 2 {
        return Err(SavsError::InvalidArgument(
            "a similarity matrix needs at least two images".into(),
        ));
    }
    let units: Vec<Vec<f64>> = embeddings.iter().map(|e| l2_normalize(e)).collect();
    let n = units.len();
    let mut s = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let v = dot(&units[i], &units[j]);
            s[i][j] = v;
            s[j][i] = v;
        }
    }
    Ok(s)
}

/// Diverging ramp: −1 → blue (0,0,255), 0 → white, +1 → red (255,0,0),
/// linear in between. Values outside [−1, 1] are clamped.
pub fn heat_color(s: f64) -> [u8; 3] {
    let s = if s.is_nan() { 0.0 } else { s.clamp(-1.0, 1.0) };
    let fade = ((1.0 - s.abs()) * 255.0).round() as u8;
    if s >= 0.0 {
        [255, fade, fade]
    } else {
        [fade, fade, 255]
    }
}

/// Heat map with one `cell`×`cell` block per matrix entry.
pub fn render_similarity(matrix: &[Vec<f64>], cell: usize) -> RgbImage {
    let n = matrix.len() as u32;
    let cell = cell.max(1) as u32;
    RgbImage::from_fn(n * cell, n * cell, |x, y| {
        Rgb(heat_color(matrix[(y / cell) as usize][(x / cell) as usize]))
    })
}

/// Which mechanism an attention dump visualizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionStage {
    /// Channel-weighted energy `Σ_c |F_w[c] · F_o[y, x, c]|`.
    Hsa,
    /// Alignment residual `Σ_c |F_o[y, x, c] − F_s[y, x, c]|`.
    HsaVcs,
}

impl fmt::Display for AttentionStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionStage::Hsa => "hsa",
            AttentionStage::HsaVcs => "hsa_vcs",
        })
    }
}

impl FromStr for AttentionStage {
    type Err = SavsError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "hsa" => Ok(AttentionStage::Hsa),
            "hsa_vcs" => Ok(AttentionStage::HsaVcs),
            other => Err(SavsError::Config(format!("unknown stage `{other}` (hsa | hsa_vcs)"))),
        }
    }
}

/// Diagnostic heat map, min-max normalized to [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
    /// Raw energy on the feature grid, row-major.
    pub energy: Vec<f64>,
    pub energy_dims: (usize, usize),
}

impl AttentionMap {
    pub fn to_gray8(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let v = self.values[y as usize * self.width + x as usize];
            Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_gray8().save(path).map_err(|e| SavsError::image(path, e))
    }
}

fn energy(fm: &FeatureMap, per_channel: impl Fn(usize, usize, usize, f64) -> f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(fm.positions());
    for y in 0..fm.height {
        for x in 0..fm.width {
            out.push(
                (0..fm.channels)
                    .map(|c| per_channel(y, x, c, fm.at(y, x, c)).abs())
                    .sum(),
            );
        }
    }
    out
}

fn upsample_normalized(energy: &[f64], dims: (usize, usize), out: (usize, usize)) -> Vec<f32> {
    let lo = energy.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = energy.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; out.0 * out.1];
    }
    let normalized: Vec<f32> = energy.iter().map(|v| ((v - lo) / (hi - lo)) as f32).collect();
    let small: ImageBuffer<Luma<f32>, Vec<f32>> =
        ImageBuffer::from_raw(dims.1 as u32, dims.0 as u32, normalized).expect("sized above");
    imageops::resize(&small, out.1 as u32, out.0 as u32, FilterType::Triangle)
        .into_raw()
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0))
        .collect()
}

/// Renders the requested stage for one sample. The shielded image of the
/// `HsaVcs` stage draws from a pool built from the sample alone.
pub fn dump_attention<E: FeatureExtractor>(
    model: &SavsModel<E>,
    sample: &LoadedSample,
    stage: AttentionStage,
    shield: &ShieldClasses,
    seed: u64,
) -> Result<AttentionMap> {
    let (fo, weights) = model.feature_maps(&sample.image, &sample.foreground)?;
    let energy = match stage {
        AttentionStage::Hsa => {
            let w = weights.ok_or_else(|| {
                SavsError::Unavailable(format!("stage hsa needs attention; model is `{}`", model.ablation()))
            })?;
            energy(&fo, |_, _, c, v| w[c] * v)
        }
        AttentionStage::HsaVcs => {
            if !model.ablation().uses_vcs() {
                return Err(SavsError::Unavailable(format!(
                    "stage hsa_vcs needs the shielded stream; model is `{}`",
                    model.ablation()
                )));
            }
            let mask = shielding_mask(&sample.semantic, shield);
            let shielded = if mask.count_ones() == 0 {
                sample.image.clone()
            } else {
                let seed2 = seed.wrapping_add(1);
                shield_batch(&[&sample.image], vec![mask], seed, seed2, Default::default())?.remove(0)
            };
            let fs = model.shielded_stream().forward(&shielded)?;
            energy(&fo, |y, x, c, v| v - fs.at(y, x, c))
        }
    };
    let (h, w) = sample.image.dims();
    Ok(AttentionMap {
        height: h,
        width: w,
        values: upsample_normalized(&energy, (fo.height, fo.width), (h, w)),
        energy,
        energy_dims: (fo.height, fo.width),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{SampleRecord, Split};
    use crate::decoder::{Ablation, ConvSpec, ExtractorConfig, ModelConfig};
    use crate::semantic_encoder::{Image, SemanticMap};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample(seed: u64) -> LoadedSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pixels = (0..256).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let labels: Vec<u8> = (0..256).map(|i| ((i / 16) % 7) as u8).collect();
        LoadedSample::new(
            SampleRecord {
                split: Split::Query,
                person_id: 0,
                clothing_id: 0,
                seq: 0,
                image_path: "q.png".into(),
                mask_path: "q.mask.png".into(),
            },
            Image::new(16, 16, pixels).unwrap(),
            SemanticMap::from_indices(16, 16, &labels).unwrap(),
        )
        .unwrap()
    }

    fn config(ablation: Ablation) -> ModelConfig {
        ModelConfig {
            extractor: ExtractorConfig {
                input_height: 16,
                input_width: 16,
                layers: vec![
                    ConvSpec {
                        kernel: 4,
                        stride: 2,
                        out_channels: 4,
                    },
                    ConvSpec {
                        kernel: 3,
                        stride: 2,
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

    #[test]
    fn similarity_cases() {
        let same = similarity_matrix(&vec![vec![1.0, 2.0]; 3]).unwrap();
        assert!(same.iter().flatten().all(|v| (v - 1.0).abs() < 1e-12));
        let rows = vec![vec![1.0, 0.0, 2.0], vec![-1.0, 3.0, 0.5], vec![0.2, 0.2, -4.0]];
        let s = similarity_matrix(&rows).unwrap();
        for i in 0..3 {
            assert!((s[i][i] - 1.0).abs() < 1e-12);
            for j in 0..3 {
                assert_eq!(s[i][j], s[j][i]);
                let (a, b) = (&rows[i], &rows[j]);
                let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let n = |v: &Vec<f64>| v.iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!((s[i][j] - d / (n(a) * n(b))).abs() < 1e-12);
            }
        }
        assert!(similarity_matrix(&rows[..1]).is_err());
    }

    #[test]
    fn color_ramp_endpoints() {
        assert_eq!(heat_color(-1.0), [0, 0, 255]);
        assert_eq!(heat_color(0.0), [255, 255, 255]);
        assert_eq!(heat_color(1.0), [255, 0, 0]);
        assert_eq!(heat_color(0.5), [255, 128, 128]);
        let img = render_similarity(&[vec![1.0, -1.0], vec![-1.0, 1.0]], 4);
        assert_eq!(img.dimensions(), (8, 8));
        assert_eq!(img.get_pixel(5, 1).0, [0, 0, 255]);
    }

    #[test]
    fn zero_model_gives_uniform_map_of_input_size() {
        let model = SavsModel::zeroed(&config(Ablation::HsaVcs)).unwrap();
        for stage in [AttentionStage::Hsa, AttentionStage::HsaVcs] {
            let m = dump_attention(&model, &sample(1), stage, &ShieldClasses::default(), 0).unwrap();
            assert_eq!((m.height, m.width), (16, 16));
            assert!(m.values.iter().all(|&v| v == m.values[0]));
        }
    }

    #[test]
    fn energy_matches_straight_line_recomputation() {
        let model = SavsModel::new(&config(Ablation::HsaVcs), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let s = sample(2);
        let m = dump_attention(&model, &s, AttentionStage::Hsa, &ShieldClasses::default(), 0).unwrap();
        let fo = model.backbone().forward(&s.image).unwrap();
        let fa = model.attention().unwrap().forward(&s.foreground).unwrap();
        let w = crate::decoder::hsa_weights(&fa, model.hsa().unwrap()).unwrap();
        let mut k = 0;
        for y in 0..fo.height {
            for x in 0..fo.width {
                let mut e = 0.0;
                for c in 0..fo.channels {
                    e += (w[c] * fo.data[(y * fo.width + x) * fo.channels + c]).abs();
                }
                assert!((m.energy[k] - e).abs() < 1e-12);
                k += 1;
            }
        }
        assert!(m.values.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(m.values.iter().any(|&v| v > 0.5));
    }

    #[test]
    fn stages_require_their_mechanism() {
        let base = SavsModel::zeroed(&config(Ablation::Baseline)).unwrap();
        let hsa = SavsModel::zeroed(&config(Ablation::Hsa)).unwrap();
        let shield = ShieldClasses::default();
        assert!(matches!(
            dump_attention(&base, &sample(0), AttentionStage::Hsa, &shield, 0),
            Err(SavsError::Unavailable(_))
        ));
        assert!(dump_attention(&hsa, &sample(0), AttentionStage::Hsa, &shield, 0).is_ok());
        assert!(matches!(
            dump_attention(&hsa, &sample(0), AttentionStage::HsaVcs, &shield, 0),
            Err(SavsError::Unavailable(_))
        ));
    }
}
