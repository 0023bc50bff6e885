//! Feature extractor contract and the default strided-convolution stack.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Result, SavsError};
use crate::semantic_encoder::Image;
use crate::tensor::{gemm, FeatureMap, Param};

/// Image → spatial feature map, with a hand-written backward pass.
///
/// Implementations must be deterministic; `backward` accumulates parameter
/// gradients into `grads`, which is aligned with [`FeatureExtractor::params`].
pub trait FeatureExtractor: Send + Sync {
    type Cache: Send + Sync;

    fn input_dims(&self) -> (usize, usize);

    /// (height, width, channels) of the produced map.
    fn output_shape(&self) -> (usize, usize, usize);

    fn forward_cached(&self, image: &Image) -> Result<(FeatureMap, Self::Cache)>;

    fn forward(&self, image: &Image) -> Result<FeatureMap> {
        Ok(self.forward_cached(image)?.0)
    }

    fn backward(&self, cache: &Self::Cache, grad: &FeatureMap, grads: &mut [Vec<f64>]);

    fn params(&self) -> Vec<&Param>;

    fn params_mut(&mut self) -> Vec<&mut Param>;
}

/// One convolution: square kernel, no padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub out_channels: usize,
}

impl fmt::Display for ConvSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "k{}s{}c{}", self.kernel, self.stride, self.out_channels)
    }
}

impl FromStr for ConvSpec {
    type Err = SavsError;

    /// `k<kernel>s<stride>c<channels>`, e.g. `k4s2c128`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || SavsError::Config(format!("bad layer spec `{s}` (want k<n>s<n>c<n>)"));
        let rest = s.trim().strip_prefix('k').ok_or_else(bad)?;
        let (k, rest) = rest.split_once('s').ok_or_else(bad)?;
        let (st, c) = rest.split_once('c').ok_or_else(bad)?;
        let spec = ConvSpec {
            kernel: k.parse().map_err(|_| bad())?,
            stride: st.parse().map_err(|_| bad())?,
            out_channels: c.parse().map_err(|_| bad())?,
        };
        if spec.kernel == 0 || spec.stride == 0 || spec.out_channels == 0 {
            return Err(bad());
        }
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub layers: Vec<ConvSpec>,
    /// Inputs are mapped to `(x - mean) / std` before the first layer.
    pub input_mean: f64,
    pub input_std: f64,
}

impl ExtractorConfig {
    /// Desk-scale default: 64×64 input, a 4×4/4 patch embedding to 16
    /// channels and a 4×4/2 convolution to a 7×7×128 map.
    pub fn toy() -> Self {
        ExtractorConfig {
            input_height: 64,
            input_width: 64,
            layers: vec![
                ConvSpec {
                    kernel: 4,
                    stride: 4,
                    out_channels: 16,
                },
                ConvSpec {
                    kernel: 4,
                    stride: 2,
                    out_channels: 128,
                },
            ],
            input_mean: 0.5,
            input_std: 0.25,
        }
    }

    pub fn layers_string(&self) -> String {
        self.layers
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn parse_layers(s: &str) -> Result<Vec<ConvSpec>> {
        s.split(',').map(str::parse).collect()
    }

    /// Per-layer (in_h, in_w, in_c, out_h, out_w).
    fn geometry(&self) -> Result<Vec<(usize, usize, usize, usize, usize)>> {
        if self.layers.is_empty() {
            return Err(SavsError::Config("extractor needs at least one layer".into()));
        }
        if !(self.input_std > 0.0) {
            return Err(SavsError::Config("input_std must be positive".into()));
        }
        let (mut h, mut w, mut c) = (self.input_height, self.input_width, 3);
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            if h < l.kernel || w < l.kernel {
                return Err(SavsError::Config(format!(
                    "layer {i}: {h}x{w} input is smaller than kernel {}",
                    l.kernel
                )));
            }
            let oh = (h - l.kernel) / l.stride + 1;
            let ow = (w - l.kernel) / l.stride + 1;
            out.push((h, w, c, oh, ow));
            h = oh;
            w = ow;
            c = l.out_channels;
        }
        Ok(out)
    }

    pub fn output_shape(&self) -> Result<(usize, usize, usize)> {
        let g = self.geometry()?;
        let (_, _, _, oh, ow) = *g.last().unwrap();
        Ok((oh, ow, self.layers.last().unwrap().out_channels))
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ConvLayer {
    spec: ConvSpec,
    in_h: usize,
    in_w: usize,
    in_c: usize,
    out_h: usize,
    out_w: usize,
    /// (kernel·kernel·in_c) × out_c, rows ordered (ky, kx, ci).
    weight: Param,
    bias: Param,
}

impl ConvLayer {
    fn patch_len(&self) -> usize {
        self.spec.kernel * self.spec.kernel * self.in_c
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    fn im2col(&self, input: &[f64]) -> Vec<f64> {
        let k = self.spec.kernel;
        let s = self.spec.stride;
        let c = self.in_c;
        let row_len = k * c;
        let mut cols = Vec::with_capacity(self.positions() * self.patch_len());
        for oy in 0..self.out_h {
            for ox in 0..self.out_w {
                for ky in 0..k {
                    let start = ((oy * s + ky) * self.in_w + ox * s) * c;
                    cols.extend_from_slice(&input[start..start + row_len]);
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let k = self.spec.kernel;
        let s = self.spec.stride;
        let c = self.in_c;
        let row_len = k * c;
        let mut out = vec![0.0; self.in_h * self.in_w * c];
        let mut src = cols.chunks_exact(row_len);
        for oy in 0..self.out_h {
            for ox in 0..self.out_w {
                for ky in 0..k {
                    let start = ((oy * s + ky) * self.in_w + ox * s) * c;
                    let chunk = src.next().expect("column count");
                    for (d, v) in out[start..start + row_len].iter_mut().zip(chunk) {
                        *d += v;
                    }
                }
            }
        }
        out
    }
}

/// Stack of strided convolutions with ReLU between layers (the last layer is
/// linear).
#[derive(Debug, Clone, PartialEq)]
pub struct ConvExtractor {
    config: ExtractorConfig,
    prefix: String,
    layers: Vec<ConvLayer>,
}

/// Per-layer im2col buffers and post-ReLU activations of hidden layers.
#[derive(Debug, Clone)]
pub struct ConvCache {
    patches: Vec<Vec<f64>>,
    hidden: Vec<Vec<f64>>,
}

impl ConvExtractor {
    /// Fan-in uniform initialization with zero biases. Parameter names are
    /// `<prefix>.conv<i>.weight` / `.bias`.
    pub fn new(config: ExtractorConfig, prefix: &str, rng: &mut impl Rng) -> Result<Self> {
        let mut ex = Self::zeroed(config, prefix)?;
        let n = ex.layers.len();
        for (i, layer) in ex.layers.iter_mut().enumerate() {
            let gain = if i + 1 < n { 6.0 } else { 3.0 };
            let bound = (gain / layer.patch_len() as f64).sqrt();
            for w in &mut layer.weight.data {
                *w = rng.random_range(-bound..bound);
            }
        }
        Ok(ex)
    }

    pub fn zeroed(config: ExtractorConfig, prefix: &str) -> Result<Self> {
        let geometry = config.geometry()?;
        let layers = config
            .layers
            .iter()
            .zip(geometry)
            .enumerate()
            .map(|(i, (&spec, (in_h, in_w, in_c, out_h, out_w)))| ConvLayer {
                spec,
                in_h,
                in_w,
                in_c,
                out_h,
                out_w,
                weight: Param::zeros(
                    format!("{prefix}.conv{i}.weight"),
                    &[spec.kernel * spec.kernel * in_c, spec.out_channels],
                ),
                bias: Param::zeros(format!("{prefix}.conv{i}.bias"), &[spec.out_channels]),
            })
            .collect();
        Ok(ConvExtractor {
            config,
            prefix: prefix.to_string(),
            layers,
        })
    }

    pub fn config(&self) -> &ExtractorConfig {
        &self.config
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    fn normalized_input(&self, image: &Image) -> Result<Vec<f64>> {
        let want = (self.config.input_height, self.config.input_width);
        if image.dims() != want {
            return Err(SavsError::InvalidArgument(format!(
                "image is {:?}, extractor expects {:?}",
                image.dims(),
                want
            )));
        }
        let (mean, std) = (self.config.input_mean, self.config.input_std);
        Ok(image
            .pixels()
            .iter()
            .flatten()
            .map(|&v| (v as f64 - mean) / std)
            .collect())
    }
}

impl FeatureExtractor for ConvExtractor {
    type Cache = ConvCache;

    fn input_dims(&self) -> (usize, usize) {
        (self.config.input_height, self.config.input_width)
    }

    fn output_shape(&self) -> (usize, usize, usize) {
        let last = self.layers.last().unwrap();
        (last.out_h, last.out_w, last.spec.out_channels)
    }

    fn forward_cached(&self, image: &Image) -> Result<(FeatureMap, ConvCache)> {
        let mut act = self.normalized_input(image)?;
        let mut cache = ConvCache {
            patches: Vec::with_capacity(self.layers.len()),
            hidden: Vec::with_capacity(self.layers.len() - 1),
        };
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            let patches = layer.im2col(&act);
            let cout = layer.spec.out_channels;
            let mut out: Vec<f64> = layer
                .bias
                .data
                .iter()
                .copied()
                .cycle()
                .take(layer.positions() * cout)
                .collect();
            gemm(
                layer.positions(),
                layer.patch_len(),
                cout,
                &patches,
                false,
                &layer.weight.data,
                false,
                1.0,
                &mut out,
            );
            cache.patches.push(patches);
            if i + 1 < n {
                for v in &mut out {
                    *v = v.max(0.0);
                }
                cache.hidden.push(out.clone());
            }
            act = out;
        }
        let (h, w, c) = self.output_shape();
        Ok((FeatureMap::new(h, w, c, act)?, cache))
    }

    fn backward(&self, cache: &ConvCache, grad: &FeatureMap, grads: &mut [Vec<f64>]) {
        assert_eq!(grads.len(), 2 * self.layers.len(), "gradient slots");
        let mut g = grad.data.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let p = layer.positions();
            let kk = layer.patch_len();
            let cout = layer.spec.out_channels;
            let (gw, gb) = grads[2 * i..2 * i + 2].split_at_mut(1);
            gemm(kk, p, cout, &cache.patches[i], true, &g, false, 1.0, &mut gw[0]);
            for row in g.chunks_exact(cout) {
                for (b, v) in gb[0].iter_mut().zip(row) {
                    *b += v;
                }
            }
            if i > 0 {
                let mut dcols = vec![0.0; p * kk];
                gemm(p, cout, kk, &g, false, &layer.weight.data, true, 0.0, &mut dcols);
                let mut dinput = layer.col2im(&dcols);
                for (d, a) in dinput.iter_mut().zip(&cache.hidden[i - 1]) {
                    if *a <= 0.0 {
                        *d = 0.0;
                    }
                }
                g = dinput;
            }
        }
    }

    fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}
