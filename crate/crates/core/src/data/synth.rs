//! Deterministic "paper-doll" dataset generator.
//!
//! Every person id has fixed identity attributes (head colour, build, arm
//! tone, leg pattern, optional carried marker). Each clothing variant only
//! colours the torso and pants. With probability `confound_strength` a
//! clothing colour comes from a two-colour palette shared by all ids, so
//! clothing colour is useless (and, across the query/gallery split,
//! misleading) for identification.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{sample_file_name, Split};
use crate::error::{Result, SavsError};
use crate::semantic_encoder::{Image, SemanticClass, SemanticMap};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SynthSpec {
    pub num_ids: u32,
    pub clothes_per_id: u32,
    pub images_per_combination: u32,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub confound_strength: f64,
    /// Uniform per-channel noise amplitude added after painting.
    pub noise: f32,
    /// Fraction of ids used for training; the rest form query/gallery.
    pub train_fraction: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_ids: 16,
            clothes_per_id: 2,
            images_per_combination: 6,
            height: 64,
            width: 64,
            seed: 0,
            confound_strength: 0.75,
            noise: 0.03,
            train_fraction: 0.8,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_ids < 2 {
            return Err(SavsError::Config("synthetic data needs at least 2 ids".into()));
        }
        if self.clothes_per_id < 2 {
            return Err(SavsError::Config(
                "synthetic data needs at least 2 clothing variants".into(),
            ));
        }
        if self.images_per_combination == 0 {
            return Err(SavsError::Config("images_per_combination must be positive".into()));
        }
        if self.height < 24 || self.width < 16 {
            return Err(SavsError::Config("synthetic images must be at least 24x16".into()));
        }
        if !(0.0..=1.0).contains(&self.confound_strength) {
            return Err(SavsError::Config("confound_strength must lie in [0, 1]".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(SavsError::Config("train_fraction must lie in (0, 1)".into()));
        }
        if !(0.0..0.5).contains(&self.noise) {
            return Err(SavsError::Config("noise must lie in [0, 0.5)".into()));
        }
        Ok(())
    }

    pub fn num_train_ids(&self) -> u32 {
        ((self.num_ids as f64 * self.train_fraction).floor() as u32).clamp(1, self.num_ids - 1)
    }

    /// Clothing ids of held-out persons that go to the query split; the
    /// remaining variants go to the gallery.
    pub fn query_clothes(&self) -> u32 {
        self.clothes_per_id / 2
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IdentityAttributes {
    pub person_id: u32,
    pub head: [f32; 3],
    pub arms: [f32; 3],
    pub legs: [[f32; 3]; 2],
    /// 0 solid, 1 horizontal stripes, 2 vertical stripes, 3 checks.
    pub leg_pattern: u8,
    pub torso_width: f64,
    pub head_radius: f64,
    pub height_fraction: f64,
    /// Colour and side (false = left) of a carried bag.
    pub marker: Option<([f32; 3], bool)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClothingColors {
    pub person_id: u32,
    pub clothing_id: u32,
    pub torso: [f32; 3],
    pub pants: [f32; 3],
}

/// What was generated, also written to `synth_manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SynthManifest {
    pub spec: SynthSpec,
    pub palette: [[f32; 3]; 2],
    pub train_ids: Vec<u32>,
    pub held_out_ids: Vec<u32>,
    pub identities: Vec<IdentityAttributes>,
    pub clothing: Vec<ClothingColors>,
}

fn hsv(h: f64, s: f64, v: f64) -> [f32; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor() as u32 % 6;
    let f = h - h.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    let (r, g, b) = match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [r as f32, g as f32, b as f32]
}

/// Quantize to what an 8-bit PNG stores, so manifest colours equal the
/// decoded pixels.
fn quantize(c: [f32; 3]) -> [f32; 3] {
    c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

fn random_color(rng: &mut impl Rng) -> [f32; 3] {
    quantize(hsv(
        rng.random(),
        rng.random_range(0.4..1.0),
        rng.random_range(0.35..1.0),
    ))
}

fn mix_seed(parts: &[u64]) -> u64 {
    // splitmix64 over the parts
    let mut x: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        x ^= p
            .wrapping_add(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(x << 6)
            .wrapping_add(x >> 2);
        x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x ^= x >> 31;
    }
    x
}

const IDENTITY_HUES: usize = 8;

fn identity_color(slot: usize, bright: bool) -> [f32; 3] {
    let v = if bright { 0.95 } else { 0.55 };
    quantize(hsv(slot as f64 / IDENTITY_HUES as f64, 0.85, v))
}

fn background_color(rng: &mut impl Rng) -> [f32; 3] {
    quantize(hsv(
        rng.random(),
        rng.random_range(0.0..0.25),
        rng.random_range(0.3..0.8),
    ))
}

/// Identity attributes are combinations drawn from small shared sets, and
/// any two ids differ in at least two of (head hue, leg hue, leg pattern).
fn identities(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<IdentityAttributes> {
    let n = spec.num_ids as usize;
    let mut codes: Vec<[usize; 3]> = Vec::with_capacity(n);
    let mut attempts = 0;
    while codes.len() < n {
        let code = [
            rng.random_range(0..IDENTITY_HUES),
            rng.random_range(0..IDENTITY_HUES),
            rng.random_range(0..4),
        ];
        let min_gap = if attempts < 10_000 { 2 } else { 1 };
        attempts += 1;
        let far = codes
            .iter()
            .all(|c| c.iter().zip(&code).filter(|(a, b)| a != b).count() >= min_gap);
        if far {
            codes.push(code);
        }
    }
    codes
        .into_iter()
        .enumerate()
        .map(|(pid, [head_hue, leg_hue, pattern])| {
            let arms = quantize(hsv(
                rng.random_range(0.03..0.11),
                rng.random_range(0.25..0.65),
                rng.random_range(0.45..0.95),
            ));
            let marker = rng.random_bool(0.5).then(|| {
                (
                    identity_color(rng.random_range(0..IDENTITY_HUES), true),
                    rng.random_bool(0.5),
                )
            });
            IdentityAttributes {
                person_id: pid as u32,
                head: identity_color(head_hue, true),
                arms,
                legs: [identity_color(leg_hue, true), identity_color(leg_hue, false)],
                leg_pattern: pattern as u8,
                torso_width: rng.random_range(0.30..0.44),
                head_radius: rng.random_range(0.10..0.12),
                height_fraction: rng.random_range(0.84..0.94),
                marker,
            }
        })
        .collect()
}

struct Canvas {
    height: usize,
    width: usize,
    rgb: Vec<[f32; 3]>,
    labels: Vec<SemanticClass>,
}

impl Canvas {
    fn fill_rect(
        &mut self,
        y0: i64,
        y1: i64,
        x0: i64,
        x1: i64,
        class: SemanticClass,
        color: impl Fn(usize, usize) -> [f32; 3],
    ) {
        let (h, w) = (self.height as i64, self.width as i64);
        for y in y0.max(0)..y1.min(h) {
            for x in x0.max(0)..x1.min(w) {
                let i = (y * w + x) as usize;
                self.rgb[i] = color(y as usize, x as usize);
                self.labels[i] = class;
            }
        }
    }

    fn fill_disc(&mut self, cy: f64, cx: f64, r: f64, class: SemanticClass, color: [f32; 3]) {
        let (h, w) = (self.height as i64, self.width as i64);
        for y in ((cy - r).floor() as i64).max(0)..((cy + r).ceil() as i64 + 1).min(h) {
            for x in ((cx - r).floor() as i64).max(0)..((cx + r).ceil() as i64 + 1).min(w) {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                if dy * dy + dx * dx <= r * r {
                    let i = (y * w + x) as usize;
                    self.rgb[i] = color;
                    self.labels[i] = class;
                }
            }
        }
    }
}

/// Paints one person. Returns the noiseless image and its mask.
fn render_person(
    spec: &SynthSpec,
    id: &IdentityAttributes,
    clothing: &ClothingColors,
    rng: &mut ChaCha8Rng,
) -> (Vec<[f32; 3]>, Vec<SemanticClass>) {
    use SemanticClass::*;
    let (h, w) = (spec.height, spec.width);
    let (hf, wf) = (h as f64, w as f64);
    let mut canvas = Canvas {
        height: h,
        width: w,
        rgb: vec![background_color(rng); h * w],
        labels: vec![Background; h * w],
    };
    for _ in 0..rng.random_range(3..7) {
        let (y0, x0) = (rng.random_range(0..h) as i64, rng.random_range(0..w) as i64);
        let (rh, rw) = (
            rng.random_range(h / 8..h / 2) as i64,
            rng.random_range(w / 8..w / 2) as i64,
        );
        let c = background_color(rng);
        canvas.fill_rect(y0, y0 + rh, x0, x0 + rw, Background, |_, _| c);
    }

    let dy = rng.random_range(-2..=2) as f64;
    let dx = rng.random_range(-3..=3) as f64;
    let total = id.height_fraction * hf;
    let top = (hf - total) / 2.0 + dy;
    let cx = wf / 2.0 + dx;
    let head_r = id.head_radius * hf;
    let torso_w = id.torso_width * wf;
    let torso_y0 = top + 2.0 * head_r - 1.0;
    let torso_h = 0.32 * total;
    let pants_y0 = torso_y0 + torso_h;
    let pants_h = 0.22 * total;
    let legs_y0 = pants_y0 + pants_h;
    let bottom = top + total;
    let arm_w = (0.08 * wf).max(2.0);
    let r = |v: f64| v.round() as i64;

    let leg_w = 0.38 * torso_w;
    let legs = id.legs;
    let pattern = id.leg_pattern;
    let leg_color = move |y: usize, x: usize| {
        let alt = match pattern {
            1 => (y / 3) % 2 == 1,
            2 => (x / 2) % 2 == 1,
            3 => ((y / 3) + (x / 3)) % 2 == 1,
            _ => false,
        };
        legs[alt as usize]
    };
    canvas.fill_rect(
        r(legs_y0),
        r(bottom),
        r(cx - torso_w / 2.0),
        r(cx - torso_w / 2.0 + leg_w),
        Legs,
        leg_color,
    );
    canvas.fill_rect(
        r(legs_y0),
        r(bottom),
        r(cx + torso_w / 2.0 - leg_w),
        r(cx + torso_w / 2.0),
        Legs,
        leg_color,
    );
    canvas.fill_rect(
        r(pants_y0),
        r(legs_y0),
        r(cx - torso_w / 2.0),
        r(cx + torso_w / 2.0),
        Pants,
        |_, _| clothing.pants,
    );
    canvas.fill_rect(
        r(torso_y0),
        r(pants_y0),
        r(cx - torso_w / 2.0),
        r(cx + torso_w / 2.0),
        Torso,
        |_, _| clothing.torso,
    );
    let arm_y1 = torso_y0 + 0.9 * torso_h;
    let arms = id.arms;
    canvas.fill_rect(
        r(torso_y0 + 1.0),
        r(arm_y1),
        r(cx - torso_w / 2.0 - arm_w),
        r(cx - torso_w / 2.0),
        Arms,
        |_, _| arms,
    );
    canvas.fill_rect(
        r(torso_y0 + 1.0),
        r(arm_y1),
        r(cx + torso_w / 2.0),
        r(cx + torso_w / 2.0 + arm_w),
        Arms,
        |_, _| arms,
    );
    canvas.fill_disc(top + head_r, cx, head_r, Head, id.head);
    if let Some((color, right)) = id.marker {
        let side = (0.13 * wf).max(3.0);
        let x0 = if right {
            cx + torso_w / 2.0 + arm_w - 1.0
        } else {
            cx - torso_w / 2.0 - arm_w - side + 1.0
        };
        canvas.fill_rect(
            r(arm_y1 - side / 2.0),
            r(arm_y1 + side / 2.0),
            r(x0),
            r(x0 + side),
            Belongings,
            |_, _| color,
        );
    }
    (canvas.rgb, canvas.labels)
}

/// Writes the dataset under `root` and returns what was generated.
pub fn generate_synthetic(spec: &SynthSpec, root: &Path) -> Result<SynthManifest> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[spec.seed, 0x5EED]));
    let palette = loop {
        let a = random_color(&mut rng);
        let b = random_color(&mut rng);
        if a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f32>() > 0.6 {
            break [a, b];
        }
    };
    let ids = identities(spec, &mut rng);
    let mut order: Vec<u32> = (0..spec.num_ids).collect();
    order.shuffle(&mut rng);
    let n_train = spec.num_train_ids() as usize;
    let mut train_ids = order[..n_train].to_vec();
    let mut held_out_ids = order[n_train..].to_vec();
    train_ids.sort_unstable();
    held_out_ids.sort_unstable();

    let mut clothing = Vec::new();
    for pid in 0..spec.num_ids {
        for cid in 0..spec.clothes_per_id {
            let pick = |rng: &mut ChaCha8Rng| {
                if rng.random_bool(spec.confound_strength) {
                    palette[rng.random_range(0..2)]
                } else {
                    random_color(rng)
                }
            };
            let torso = pick(&mut rng);
            let pants = pick(&mut rng);
            clothing.push(ClothingColors {
                person_id: pid,
                clothing_id: cid,
                torso,
                pants,
            });
        }
    }

    for split in Split::ALL {
        for sub in ["images", "masks"] {
            let d = root.join(split.dir_name()).join(sub);
            fs::create_dir_all(&d).map_err(|e| SavsError::io(&d, e))?;
        }
    }
    for c in &clothing {
        let split = if train_ids.contains(&c.person_id) {
            Split::Train
        } else if c.clothing_id < spec.query_clothes() {
            Split::Query
        } else {
            Split::Gallery
        };
        let id = &ids[c.person_id as usize];
        for seq in 0..spec.images_per_combination {
            let mut img_rng = ChaCha8Rng::seed_from_u64(mix_seed(&[
                spec.seed,
                c.person_id as u64,
                c.clothing_id as u64,
                seq as u64,
            ]));
            let (mut rgb, labels) = render_person(spec, id, c, &mut img_rng);
            if spec.noise > 0.0 {
                for p in &mut rgb {
                    for v in p.iter_mut() {
                        *v = (*v + img_rng.random_range(-spec.noise..spec.noise)).clamp(0.0, 1.0);
                    }
                }
            }
            let name = sample_file_name(c.person_id, c.clothing_id, seq);
            let dir = root.join(split.dir_name());
            Image::new(spec.height, spec.width, rgb)?.save_png(&dir.join("images").join(&name))?;
            SemanticMap::new(spec.height, spec.width, labels)?.save_png(&dir.join("masks").join(&name))?;
        }
    }

    let manifest = SynthManifest {
        spec: spec.clone(),
        palette,
        train_ids,
        held_out_ids,
        identities: ids,
        clothing,
    };
    let path = root.join("synth_manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(|e| SavsError::io(&path, e))?;
    Ok(manifest)
}
