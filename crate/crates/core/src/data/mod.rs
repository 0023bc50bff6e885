//! Dataset directory codec and in-memory sample loading.
//!
//! Layout: `root/{train,query,gallery}/images/<pid>_<clothid>_<seq>.png`
//! with a same-named single-channel mask under `masks/`.

mod synth;

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

pub use synth::{generate_synthetic, ClothingColors, IdentityAttributes, SynthManifest, SynthSpec};

use crate::error::{Result, SavsError};
use crate::exec::Exec;
use crate::semantic_encoder::{extract_foreground, Image, LabelMapping, SemanticMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Query, Split::Gallery];

    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

impl FromStr for Split {
    type Err = SavsError;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.dir_name() == s)
            .ok_or_else(|| SavsError::Dataset(format!("unknown split `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct SampleRecord {
    pub split: Split,
    pub person_id: u32,
    pub clothing_id: u32,
    pub seq: u32,
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
}

/// `<pid>_<clothid>_<seq>.png` with zero-padded decimal fields.
pub fn sample_file_name(person_id: u32, clothing_id: u32, seq: u32) -> String {
    format!("{person_id:04}_{clothing_id:02}_{seq:03}.png")
}

/// Parses a sample file name into (pid, clothid, seq).
pub fn parse_sample_name(name: &str) -> Option<(u32, u32, u32)> {
    let stem = name.strip_suffix(".png")?;
    let mut parts = stem.split('_');
    let mut field = || -> Option<u32> {
        let p = parts.next()?;
        if p.is_empty() || !p.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        p.parse().ok()
    };
    let out = (field()?, field()?, field()?);
    parts.next().is_none().then_some(out)
}

fn png_names(dir: &Path) -> Result<BTreeSet<String>> {
    if !dir.exists() {
        return Ok(BTreeSet::new());
    }
    let mut out = BTreeSet::new();
    for entry in fs::read_dir(dir).map_err(|e| SavsError::io(dir, e))? {
        let entry = entry.map_err(|e| SavsError::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.ends_with(".png") {
            out.insert(name);
        }
    }
    Ok(out)
}

/// Lists every image/mask pair under `root`. Missing split directories are
/// treated as empty.
pub fn scan_dataset(root: &Path) -> Result<Vec<SampleRecord>> {
    let mut records = Vec::new();
    let mut problems = Vec::new();
    for split in Split::ALL {
        let images_dir = root.join(split.dir_name()).join("images");
        let masks_dir = root.join(split.dir_name()).join("masks");
        let images = png_names(&images_dir)?;
        let masks = png_names(&masks_dir)?;
        for orphan in masks.difference(&images) {
            problems.push(format!("mask without image: {}", masks_dir.join(orphan).display()));
        }
        for name in &images {
            if !masks.contains(name) {
                problems.push(format!("image without mask: {}", images_dir.join(name).display()));
                continue;
            }
            match parse_sample_name(name) {
                Some((person_id, clothing_id, seq)) => records.push(SampleRecord {
                    split,
                    person_id,
                    clothing_id,
                    seq,
                    image_path: images_dir.join(name),
                    mask_path: masks_dir.join(name),
                }),
                None => problems.push(format!("malformed file name: {}", images_dir.join(name).display())),
            }
        }
    }
    if !problems.is_empty() {
        return Err(SavsError::Dataset(problems.join("\n")));
    }
    records.sort();
    Ok(records)
}

/// Decoded image, canonical semantic map and foreground image of a record.
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub record: SampleRecord,
    pub image: Image,
    pub semantic: SemanticMap,
    pub foreground: Image,
}

impl LoadedSample {
    pub fn new(record: SampleRecord, image: Image, semantic: SemanticMap) -> Result<Self> {
        let foreground = extract_foreground(&image, &semantic)?;
        Ok(LoadedSample {
            record,
            image,
            semantic,
            foreground,
        })
    }
}

/// Reads one image/mask pair, resizing both to `dims` (bilinear for the
/// image, nearest for the mask) when they differ.
pub fn load_sample(
    record: &SampleRecord,
    dims: (usize, usize),
    mapping: Option<&LabelMapping>,
) -> Result<LoadedSample> {
    if !record.mask_path.exists() {
        return Err(SavsError::Dataset(format!(
            "missing mask {} for {}",
            record.mask_path.display(),
            record.image_path.display()
        )));
    }
    let image = Image::load_png(&record.image_path)?;
    let semantic = SemanticMap::load_png(&record.mask_path, mapping)?;
    if image.dims() != semantic.dims() {
        return Err(SavsError::ShapeMismatch(format!(
            "{}: image {:?} vs mask {:?}",
            record.image_path.display(),
            image.dims(),
            semantic.dims()
        )));
    }
    LoadedSample::new(
        record.clone(),
        image.resized(dims.0, dims.1),
        semantic.resized(dims.0, dims.1),
    )
}

pub fn load_samples(
    records: &[SampleRecord],
    dims: (usize, usize),
    mapping: Option<&LabelMapping>,
    exec: Exec,
) -> Result<Vec<LoadedSample>> {
    exec.try_map(records.len(), |i| load_sample(&records[i], dims, mapping))
}

pub fn records_in(records: &[SampleRecord], split: Split) -> Vec<SampleRecord> {
    records.iter().filter(|r| r.split == split).cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_name_grammar() {
        assert_eq!(sample_file_name(3, 1, 12), "0003_01_012.png");
        assert_eq!(parse_sample_name("0003_01_012.png"), Some((3, 1, 12)));
        assert_eq!(parse_sample_name("12_3_4.png"), Some((12, 3, 4)));
        for bad in [
            "0003_01.png",
            "a_01_002.png",
            "0003_01_002_9.png",
            "0003_01_002.jpg",
            "_1_2.png",
        ] {
            assert_eq!(parse_sample_name(bad), None, "{bad}");
        }
    }

    #[test]
    fn empty_directories_scan_to_nothing() {
        let dir = tempfile::tempdir().unwrap();
        for s in Split::ALL {
            fs::create_dir_all(dir.path().join(s.dir_name()).join("images")).unwrap();
            fs::create_dir_all(dir.path().join(s.dir_name()).join("masks")).unwrap();
        }
        assert!(scan_dataset(dir.path()).unwrap().is_empty());
    }

    fn write_pair(root: &Path, split: &str, name: &str, image: bool, mask: bool) {
        let d = root.join(split);
        fs::create_dir_all(d.join("images")).unwrap();
        fs::create_dir_all(d.join("masks")).unwrap();
        if image {
            Image::filled(4, 4, [0.5; 3])
                .save_png(&d.join("images").join(name))
                .unwrap();
        }
        if mask {
            SemanticMap::from_indices(4, 4, &[2; 16])
                .unwrap()
                .save_png(&d.join("masks").join(name))
                .unwrap();
        }
    }

    #[test]
    fn single_pair_is_parsed() {
        let dir = tempfile::tempdir().unwrap();
        write_pair(dir.path(), "query", "0007_02_001.png", true, true);
        let recs = scan_dataset(dir.path()).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(
            (recs[0].split, recs[0].person_id, recs[0].clothing_id, recs[0].seq),
            (Split::Query, 7, 2, 1)
        );
        let loaded = load_sample(&recs[0], (8, 8), None).unwrap();
        assert_eq!(loaded.image.dims(), (8, 8));
        assert_eq!(loaded.semantic.dims(), (8, 8));
    }

    #[test]
    fn orphans_and_bad_names_are_listed() {
        let dir = tempfile::tempdir().unwrap();
        write_pair(dir.path(), "train", "0001_00_000.png", true, false);
        write_pair(dir.path(), "train", "0002_00_000.png", false, true);
        write_pair(dir.path(), "gallery", "person.png", true, true);
        let err = scan_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("image without mask") && err.contains("0001_00_000.png"));
        assert!(err.contains("mask without image") && err.contains("0002_00_000.png"));
        assert!(err.contains("malformed") && err.contains("person.png"));
    }

    #[test]
    fn missing_mask_is_an_error_at_load() {
        let rec = SampleRecord {
            split: Split::Gallery,
            person_id: 0,
            clothing_id: 0,
            seq: 0,
            image_path: "/nonexistent/a.png".into(),
            mask_path: "/nonexistent/mask.png".into(),
        };
        assert!(matches!(load_sample(&rec, (4, 4), None), Err(SavsError::Dataset(_))));
    }
}
