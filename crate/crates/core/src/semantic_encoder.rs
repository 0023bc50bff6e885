//! Semantic encoder: label recombination, foreground extraction, clothing
//! shielding masks, and batch-level pixel-pool rendering.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use image::imageops::{self, FilterType};
use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SavsError};

/// Number of canonical semantic classes.
pub const NUM_CLASSES: usize = 7;

/// The canonical seven-part label space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum SemanticClass {
    Background = 0,
    Head = 1,
    Torso = 2,
    Pants = 3,
    Arms = 4,
    Legs = 5,
    Belongings = 6,
}

impl SemanticClass {
    pub const ALL: [SemanticClass; NUM_CLASSES] = [
        SemanticClass::Background,
        SemanticClass::Head,
        SemanticClass::Torso,
        SemanticClass::Pants,
        SemanticClass::Arms,
        SemanticClass::Legs,
        SemanticClass::Belongings,
    ];

    pub fn from_index(v: u8) -> Option<Self> {
        Self::ALL.get(v as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            SemanticClass::Background => "background",
            SemanticClass::Head => "head",
            SemanticClass::Torso => "torso",
            SemanticClass::Pants => "pants",
            SemanticClass::Arms => "arms",
            SemanticClass::Legs => "legs",
            SemanticClass::Belongings => "belongings",
        }
    }
}

/// RGB image with channels in `[0, 1]`, stored row-major as `[r, g, b]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<[f32; 3]>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<[f32; 3]>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(SavsError::InvalidArgument("image must be non-empty".into()));
        }
        if pixels.len() != height * width {
            return Err(SavsError::ShapeMismatch(format!(
                "{height}x{width} image needs {} pixels, got {}",
                height * width,
                pixels.len()
            )));
        }
        if pixels.iter().flatten().any(|v| !v.is_finite()) {
            return Err(SavsError::InvalidArgument("image contains non-finite values".into()));
        }
        Ok(Image { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        Image {
            height,
            width,
            pixels: vec![rgb; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> &[[f32; 3]] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [[f32; 3]] {
        &mut self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> [f32; 3] {
        self.pixels[y * self.width + x]
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let pixels = img
            .pixels()
            .map(|p| [p[0] as f32 / 255.0, p[1] as f32 / 255.0, p[2] as f32 / 255.0])
            .collect();
        Image {
            height: img.height() as usize,
            width: img.width() as usize,
            pixels,
        }
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let mut out = RgbImage::new(self.width as u32, self.height as u32);
        for (dst, src) in out.pixels_mut().zip(&self.pixels) {
            *dst = Rgb(src.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        }
        out
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| SavsError::image(path, e))?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path).map_err(|e| SavsError::image(path, e))
    }

    /// Bilinear resize.
    pub fn resized(&self, height: usize, width: usize) -> Image {
        if (height, width) == self.dims() {
            return self.clone();
        }
        let buf: ImageBuffer<Rgb<f32>, Vec<f32>> = ImageBuffer::from_raw(
            self.width as u32,
            self.height as u32,
            self.pixels.iter().flatten().copied().collect(),
        )
        .expect("buffer length matches dimensions");
        let out = imageops::resize(&buf, width as u32, height as u32, FilterType::Triangle);
        Image {
            height,
            width,
            pixels: out.pixels().map(|p| p.0).collect(),
        }
    }
}

/// Binary per-pixel mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(SavsError::ShapeMismatch(format!(
                "{height}x{width} mask needs {} entries, got {}",
                height * width,
                bits.len()
            )));
        }
        Ok(BinaryMask { height, width, bits })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }
}

/// Label map in the source parser's label space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawLabelMap {
    height: usize,
    width: usize,
    labels: Vec<u32>,
    label_space_size: usize,
}

impl RawLabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u32>, label_space_size: usize) -> Result<Self> {
        if labels.len() != height * width {
            return Err(SavsError::ShapeMismatch(format!(
                "{height}x{width} label map needs {} labels, got {}",
                height * width,
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= label_space_size) {
            return Err(SavsError::LabelOutOfDomain {
                label: bad,
                domain: label_space_size,
            });
        }
        Ok(RawLabelMap {
            height,
            width,
            labels,
            label_space_size,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn label_space_size(&self) -> usize {
        self.label_space_size
    }

    pub fn load_png(path: &Path, label_space_size: usize) -> Result<Self> {
        let img = image::open(path).map_err(|e| SavsError::image(path, e))?.to_luma8();
        RawLabelMap::new(
            img.height() as usize,
            img.width() as usize,
            img.pixels().map(|p| p[0] as u32).collect(),
            label_space_size,
        )
    }
}

/// Total function from a source label space onto the canonical classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMapping {
    table: Vec<SemanticClass>,
}

/// Labels of the common 20-label human-parsing space, in index order.
pub const PARSING20_LABELS: [&str; 20] = [
    "background",
    "hat",
    "hair",
    "glove",
    "sunglasses",
    "upper-clothes",
    "dress",
    "coat",
    "socks",
    "pants",
    "jumpsuits",
    "scarf",
    "skirt",
    "face",
    "left-arm",
    "right-arm",
    "left-leg",
    "right-leg",
    "left-shoe",
    "right-shoe",
];

impl LabelMapping {
    pub fn new(table: Vec<SemanticClass>) -> Result<Self> {
        if table.is_empty() {
            return Err(SavsError::InvalidArgument("label mapping is empty".into()));
        }
        Ok(LabelMapping { table })
    }

    /// Identity on the canonical space.
    pub fn identity() -> Self {
        LabelMapping {
            table: SemanticClass::ALL.to_vec(),
        }
    }

    /// Default recombination of the 20-label human-parsing space.
    ///
    /// This grouping is a reconstruction; parsers with other label sets
    /// should ship their own mapping file.
    pub fn parsing20() -> Self {
        use SemanticClass::*;
        let table = PARSING20_LABELS
            .iter()
            .map(|name| match *name {
                "hat" | "hair" | "face" => Head,
                "upper-clothes" | "dress" | "coat" | "scarf" => Torso,
                "pants" | "skirt" | "jumpsuits" => Pants,
                "glove" | "left-arm" | "right-arm" => Arms,
                "socks" | "left-leg" | "right-leg" | "left-shoe" | "right-shoe" => Legs,
                "sunglasses" => Belongings,
                _ => Background,
            })
            .collect();
        LabelMapping { table }
    }

    pub fn domain_size(&self) -> usize {
        self.table.len()
    }

    pub fn table(&self) -> &[SemanticClass] {
        &self.table
    }

    pub fn map(&self, label: u32) -> Result<SemanticClass> {
        self.table
            .get(label as usize)
            .copied()
            .ok_or(SavsError::LabelOutOfDomain {
                label,
                domain: self.table.len(),
            })
    }

    /// Parses `src_label -> canonical_class` lines. Blank lines and `#`
    /// comments are ignored; every source label below the largest one listed
    /// must be present.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = || SavsError::Config(format!("mapping line {}: `{line}`", lineno + 1));
            let (src, dst) = line.split_once("->").ok_or_else(bad)?;
            let src: usize = src.trim().parse().map_err(|_| bad())?;
            let dst: u8 = dst.trim().parse().map_err(|_| bad())?;
            let class = SemanticClass::from_index(dst).ok_or_else(bad)?;
            entries.push((src, class));
        }
        let size = entries.iter().map(|(s, _)| s + 1).max().unwrap_or(0);
        let mut table = vec![None; size];
        for (src, class) in entries {
            if table[src].replace(class).is_some() {
                return Err(SavsError::Config(format!("source label {src} mapped twice")));
            }
        }
        let table = table
            .into_iter()
            .enumerate()
            .map(|(i, c)| c.ok_or_else(|| SavsError::Config(format!("source label {i} is unmapped"))))
            .collect::<Result<Vec<_>>>()?;
        LabelMapping::new(table)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SavsError::io(path, e))?;
        Self::parse(&text)
    }
}

impl fmt::Display for LabelMapping {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (src, class) in self.table.iter().enumerate() {
            writeln!(f, "{src} -> {}", *class as u8)?;
        }
        Ok(())
    }
}

/// Per-pixel canonical class map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemanticMap {
    height: usize,
    width: usize,
    labels: Vec<SemanticClass>,
}

impl SemanticMap {
    pub fn new(height: usize, width: usize, labels: Vec<SemanticClass>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(SavsError::ShapeMismatch(format!(
                "{height}x{width} semantic map needs {} labels, got {}",
                height * width,
                labels.len()
            )));
        }
        Ok(SemanticMap { height, width, labels })
    }

    pub fn filled(height: usize, width: usize, class: SemanticClass) -> Self {
        SemanticMap {
            height,
            width,
            labels: vec![class; height * width],
        }
    }

    pub fn from_indices(height: usize, width: usize, labels: &[u8]) -> Result<Self> {
        let labels = labels
            .iter()
            .map(|&l| {
                SemanticClass::from_index(l).ok_or(SavsError::LabelOutOfDomain {
                    label: l as u32,
                    domain: NUM_CLASSES,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(height, width, labels)
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn labels(&self) -> &[SemanticClass] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> SemanticClass {
        self.labels[y * self.width + x]
    }

    pub fn to_gray8(&self) -> GrayImage {
        let mut out = GrayImage::new(self.width as u32, self.height as u32);
        for (dst, src) in out.pixels_mut().zip(&self.labels) {
            *dst = Luma([*src as u8]);
        }
        out
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_gray8().save(path).map_err(|e| SavsError::image(path, e))
    }

    /// Loads a mask PNG. Without a mapping the values must already be
    /// canonical (0..=6).
    pub fn load_png(path: &Path, mapping: Option<&LabelMapping>) -> Result<Self> {
        match mapping {
            Some(m) => {
                let raw = RawLabelMap::load_png(path, m.domain_size())?;
                recombine_labels(&raw, m)
            }
            None => {
                let img = image::open(path).map_err(|e| SavsError::image(path, e))?.to_luma8();
                let values: Vec<u8> = img.pixels().map(|p| p[0]).collect();
                Self::from_indices(img.height() as usize, img.width() as usize, &values)
            }
        }
    }

    /// Nearest-neighbour resize.
    pub fn resized(&self, height: usize, width: usize) -> SemanticMap {
        if (height, width) == self.dims() {
            return self.clone();
        }
        let mut labels = Vec::with_capacity(height * width);
        for y in 0..height {
            let sy = (((y as f64 + 0.5) * self.height as f64 / height as f64) as usize).min(self.height - 1);
            for x in 0..width {
                let sx = (((x as f64 + 0.5) * self.width as f64 / width as f64) as usize).min(self.width - 1);
                labels.push(self.get(sy, sx));
            }
        }
        SemanticMap { height, width, labels }
    }
}

/// Set of non-background classes whose pixels get shielded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShieldClasses(BTreeSet<SemanticClass>);

impl ShieldClasses {
    pub fn new(classes: impl IntoIterator<Item = SemanticClass>) -> Result<Self> {
        let set: BTreeSet<_> = classes.into_iter().collect();
        if set.contains(&SemanticClass::Background) {
            return Err(SavsError::InvalidArgument(
                "background cannot be a shielded class".into(),
            ));
        }
        Ok(ShieldClasses(set))
    }

    /// Shields nothing; the rendered image equals its source.
    pub fn none() -> Self {
        ShieldClasses(BTreeSet::new())
    }

    pub fn contains(&self, class: SemanticClass) -> bool {
        self.0.contains(&class)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = SemanticClass> + '_ {
        self.0.iter().copied()
    }
}

impl Default for ShieldClasses {
    /// Upper clothes and pants.
    fn default() -> Self {
        ShieldClasses([SemanticClass::Torso, SemanticClass::Pants].into_iter().collect())
    }
}

impl fmt::Display for ShieldClasses {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|c| (*c as u8).to_string()).collect();
        write!(f, "{}", parts.join(","))
    }
}

impl FromStr for ShieldClasses {
    type Err = SavsError;

    /// Comma-separated class indices; an empty string shields nothing.
    fn from_str(s: &str) -> Result<Self> {
        let mut classes = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let idx: u8 = part
                .parse()
                .map_err(|_| SavsError::Config(format!("bad shield class `{part}`")))?;
            let class = SemanticClass::from_index(idx)
                .ok_or_else(|| SavsError::Config(format!("shield class {idx} out of range")))?;
            classes.push(class);
        }
        ShieldClasses::new(classes)
    }
}

/// How clothing pixels are drawn from the pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DrawMode {
    #[default]
    WithReplacement,
    WithoutReplacement,
}

/// Shuffled multiset of clothing pixels harvested from one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelPool {
    pixels: Vec<[f32; 3]>,
    source_count: usize,
}

impl PixelPool {
    pub fn pixels(&self) -> &[[f32; 3]] {
        &self.pixels
    }

    pub fn source_count(&self) -> usize {
        self.source_count
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }
}

/// Batch of shielded images plus the masks that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedBatch {
    pub images: Vec<Image>,
    pub masks: Vec<BinaryMask>,
}

pub fn recombine_labels(raw: &RawLabelMap, mapping: &LabelMapping) -> Result<SemanticMap> {
    let labels = raw.labels.iter().map(|&l| mapping.map(l)).collect::<Result<Vec<_>>>()?;
    SemanticMap::new(raw.height, raw.width, labels)
}

pub fn foreground_mask(sem: &SemanticMap) -> BinaryMask {
    BinaryMask {
        height: sem.height,
        width: sem.width,
        bits: sem.labels.iter().map(|&c| c != SemanticClass::Background).collect(),
    }
}

/// Copies foreground pixels and zeroes the background.
pub fn extract_foreground(img: &Image, sem: &SemanticMap) -> Result<Image> {
    if img.dims() != sem.dims() {
        return Err(SavsError::ShapeMismatch(format!(
            "image {:?} vs semantic map {:?}",
            img.dims(),
            sem.dims()
        )));
    }
    let pixels = img
        .pixels
        .iter()
        .zip(&sem.labels)
        .map(|(&p, &c)| if c == SemanticClass::Background { [0.0; 3] } else { p })
        .collect();
    Ok(Image {
        height: img.height,
        width: img.width,
        pixels,
    })
}

pub fn shielding_mask(sem: &SemanticMap, shield: &ShieldClasses) -> BinaryMask {
    BinaryMask {
        height: sem.height,
        width: sem.width,
        bits: sem.labels.iter().map(|&c| shield.contains(c)).collect(),
    }
}

fn check_batch(images: &[Image], masks: &[BinaryMask]) -> Result<()> {
    if images.is_empty() {
        return Err(SavsError::InvalidArgument("batch is empty".into()));
    }
    if images.len() != masks.len() {
        return Err(SavsError::ShapeMismatch(format!(
            "{} images but {} masks",
            images.len(),
            masks.len()
        )));
    }
    for (i, (img, mask)) in images.iter().zip(masks).enumerate() {
        if img.dims() != mask.dims() {
            return Err(SavsError::ShapeMismatch(format!(
                "batch element {i}: image {:?} vs mask {:?}",
                img.dims(),
                mask.dims()
            )));
        }
    }
    Ok(())
}

/// Collects every masked pixel of the batch (image order, then row-major)
/// and shuffles the result with a seeded RNG.
pub fn build_pixel_pool(images: &[Image], masks: &[BinaryMask], seed: u64) -> Result<PixelPool> {
    check_batch(images, masks)?;
    let mut pixels: Vec<[f32; 3]> = images
        .iter()
        .zip(masks)
        .flat_map(|(img, mask)| img.pixels.iter().zip(&mask.bits).filter(|(_, &m)| m).map(|(p, _)| *p))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pixels.shuffle(&mut rng);
    Ok(PixelPool {
        source_count: pixels.len(),
        pixels,
    })
}

/// Replaces every masked pixel with a draw from `pool`; unmasked pixels are
/// copied unchanged.
pub fn render_shielded(
    images: &[Image],
    masks: &[BinaryMask],
    pool: &PixelPool,
    seed: u64,
    mode: DrawMode,
) -> Result<RenderedBatch> {
    check_batch(images, masks)?;
    let needed: usize = masks.iter().map(BinaryMask::count_ones).sum();
    if needed > 0 && pool.is_empty() {
        return Err(SavsError::EmptyPool(needed));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut remaining = match mode {
        DrawMode::WithReplacement => Vec::new(),
        DrawMode::WithoutReplacement => {
            if needed > pool.len() {
                return Err(SavsError::InvalidArgument(format!(
                    "{needed} draws without replacement from a pool of {}",
                    pool.len()
                )));
            }
            let mut order = pool.pixels.clone();
            order.shuffle(&mut rng);
            order
        }
    };
    let mut out = Vec::with_capacity(images.len());
    for (img, mask) in images.iter().zip(masks) {
        let mut rendered = img.clone();
        for (p, _) in rendered.pixels.iter_mut().zip(&mask.bits).filter(|(_, &m)| m) {
            *p = match mode {
                DrawMode::WithReplacement => pool.pixels[rng.random_range(0..pool.len())],
                DrawMode::WithoutReplacement => remaining.pop().expect("checked pool size"),
            };
        }
        out.push(rendered);
    }
    Ok(RenderedBatch {
        images: out,
        masks: masks.to_vec(),
    })
}
