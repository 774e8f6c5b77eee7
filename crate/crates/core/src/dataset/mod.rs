//! Image datasets: directory-per-class loading, the synthetic motif generator,
//! splits and inverse-frequency class weights.

mod synthetic;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use synthetic::{
    generate, generate_synthetic, placements, MotifPlacement, Shape, SyntheticSpec,
};

/// Channel-major (CHW) raster with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Raster {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Raster {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn from_rgb(img: &image::RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let (w, h) = (w as usize, h as usize);
        let mut r = Raster::zeros(3, h, w);
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                r.set(c, y as usize, x as usize, px.0[c] as f64 / 255.0);
            }
        }
        r
    }

    pub fn to_rgb(&self) -> image::RgbImage {
        let mut img = image::RgbImage::new(self.width as u32, self.height as u32);
        for (x, y, px) in img.enumerate_pixels_mut() {
            for c in 0..3.min(self.channels) {
                let v = self.at(c, y as usize, x as usize).clamp(0.0, 1.0);
                px.0[c] = (v * 255.0).round() as u8;
            }
        }
        img
    }
}

/// Per-pixel concept ids; 0 is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConceptMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u16>,
}

impl ConceptMask {
    #[inline]
    pub fn at(&self, y: usize, x: usize) -> u16 {
        self.data[y * self.width + x]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub id: String,
    pub label: usize,
    pub pixels: Raster,
    pub mask: Option<ConceptMask>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.7,
            validation: 0.1,
            test: 0.2,
        }
    }
}

impl SplitFractions {
    pub fn new(train: f64, validation: f64, test: f64) -> Result<Self> {
        let s = SplitFractions {
            train,
            validation,
            test,
        };
        s.validate()?;
        Ok(s)
    }

    fn validate(&self) -> Result<()> {
        let parts = [self.train, self.validation, self.test];
        if parts.iter().any(|f| !(0.0..=1.0).contains(f)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "split fractions must be in [0,1] and sum to 1, got {:?}",
                parts
            )));
        }
        Ok(())
    }

    /// (train, validation, test) counts for a class with `n` images.
    pub fn counts(&self, n: usize) -> (usize, usize, usize) {
        let train = ((self.train * n as f64).round() as usize).min(n);
        let val = ((self.validation * n as f64).round() as usize).min(n - train);
        (train, val, n - train - val)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<LabeledImage>,
    pub validation: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
    pub class_names: Vec<String>,
    pub class_weights: Vec<f64>,
    /// Concept vocabulary for masks, indexed by concept id (0 = background).
    pub concept_names: Vec<String>,
}

impl DatasetSplit {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn split(&self, name: SplitName) -> &[LabeledImage] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Validation => &self.validation,
            SplitName::Test => &self.test,
        }
    }

    pub fn has_masks(&self) -> bool {
        self.all_images().all(|im| im.mask.is_some())
    }

    pub fn all_images(&self) -> impl Iterator<Item = &LabeledImage> {
        self.train.iter().chain(&self.validation).chain(&self.test)
    }

    /// Image id → split name.
    pub fn manifest(&self) -> BTreeMap<String, SplitName> {
        let mut m = BTreeMap::new();
        for (name, imgs) in [
            (SplitName::Train, &self.train),
            (SplitName::Validation, &self.validation),
            (SplitName::Test, &self.test),
        ] {
            for im in imgs {
                m.insert(im.id.clone(), name);
            }
        }
        m
    }

    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.manifest())?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Checks the split invariants: labels index class names, weights are
    /// positive, pixels lie in [0,1], masks match the raster size and ids are
    /// unique across splits.
    pub fn validate(&self) -> Result<()> {
        let c = self.class_names.len();
        if self.class_weights.len() != c {
            return Err(Error::Dataset(format!(
                "{} class weights for {} classes",
                self.class_weights.len(),
                c
            )));
        }
        if let Some(w) = self.class_weights.iter().find(|w| !(**w > 0.0)) {
            return Err(Error::Dataset(format!("non-positive class weight {w}")));
        }
        let mut seen = BTreeSet::new();
        for im in self.all_images() {
            if im.label >= c {
                return Err(Error::Dataset(format!("{}: label {} >= {}", im.id, im.label, c)));
            }
            if !seen.insert(im.id.as_str()) {
                return Err(Error::Dataset(format!("duplicate image id {}", im.id)));
            }
            if im.pixels.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Dataset(format!("{}: pixel outside [0,1]", im.id)));
            }
            if let Some(m) = &im.mask {
                if m.height != im.pixels.height || m.width != im.pixels.width {
                    return Err(Error::Dataset(format!(
                        "{}: mask {}x{} does not match image {}x{}",
                        im.id, m.height, m.width, im.pixels.height, im.pixels.width
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Inverse-frequency weights `N / (C * count_c)`; classes absent from
/// `labels` get weight 1.
pub fn class_weights(labels: impl IntoIterator<Item = usize>, num_classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; num_classes];
    let mut n = 0usize;
    for l in labels {
        counts[l] += 1;
        n += 1;
    }
    counts
        .iter()
        .map(|&k| {
            if k == 0 {
                1.0
            } else {
                n as f64 / (num_classes as f64 * k as f64)
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct LoadOptions {
    pub image_size: usize,
    /// Parallel directory of single-channel PNG masks, same `class/stem.png` layout.
    pub masks_root: Option<PathBuf>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            image_size: 32,
            masks_root: None,
        }
    }
}

fn is_image_file(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

fn load_mask(path: &Path, size: usize) -> Result<ConceptMask> {
    let img = image::open(path)?.to_luma8();
    let img = image::imageops::resize(&img, size as u32, size as u32, FilterType::Nearest);
    Ok(ConceptMask {
        height: size,
        width: size,
        data: img.pixels().map(|p| p.0[0] as u16).collect(),
    })
}

/// Loads a directory-per-class image folder and splits each class with a
/// seeded shuffle. Class names are the sorted subdirectory names.
pub fn load_image_folder(
    root: &Path,
    fractions: SplitFractions,
    seed: u64,
    opts: &LoadOptions,
) -> Result<DatasetSplit> {
    fractions.validate()?;
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.is_empty() {
        return Err(Error::Dataset(format!("{} has no class directories", root.display())));
    }
    let class_names: Vec<String> = class_dirs
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();

    let size = opts.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut validation, mut test) = (Vec::new(), Vec::new(), Vec::new());
    let mut max_concept = 0u16;

    for (label, (dir, name)) in class_dirs.iter().zip(&class_names).enumerate() {
        let files: Vec<PathBuf> = sorted_entries(dir)?.into_iter().filter(|p| is_image_file(p)).collect();
        if files.is_empty() {
            return Err(Error::Dataset(format!("class directory {} is empty", dir.display())));
        }
        let mut images = Vec::with_capacity(files.len());
        for file in &files {
            let decoded = match image::open(file) {
                Ok(img) => img.to_rgb8(),
                Err(e) => {
                    warn!("skipping undecodable image {}: {e}", file.display());
                    continue;
                }
            };
            let resized = image::imageops::resize(&decoded, size as u32, size as u32, FilterType::Triangle);
            let stem = file.file_stem().unwrap().to_string_lossy().into_owned();
            let mask = match &opts.masks_root {
                Some(mroot) => {
                    let mpath = mroot.join(name).join(format!("{stem}.png"));
                    let m = load_mask(&mpath, size)?;
                    max_concept = max_concept.max(m.data.iter().copied().max().unwrap_or(0));
                    Some(m)
                }
                None => None,
            };
            images.push(LabeledImage {
                id: format!("{name}/{stem}"),
                label,
                pixels: Raster::from_rgb(&resized),
                mask,
            });
        }
        if images.is_empty() {
            return Err(Error::Dataset(format!(
                "class {name} has no decodable images"
            )));
        }
        images.shuffle(&mut rng);
        let (n_train, n_val, _) = fractions.counts(images.len());
        let mut rest = images.split_off(n_train);
        let rest_test = rest.split_off(n_val);
        train.extend(images);
        validation.extend(rest);
        test.extend(rest_test);
    }

    for split in [&mut train, &mut validation, &mut test] {
        split.sort_by(|a, b| a.id.cmp(&b.id));
    }

    let concept_names = match &opts.masks_root {
        Some(mroot) => load_concept_names(mroot, max_concept)?,
        None => vec!["background".to_string()],
    };
    let class_weights = class_weights(train.iter().map(|im| im.label), class_names.len());
    let ds = DatasetSplit {
        train,
        validation,
        test,
        class_names,
        class_weights,
        concept_names,
    };
    ds.validate()?;
    Ok(ds)
}

/// Reads `concepts.json` (a list of names indexed by concept id) from the mask
/// root when present, otherwise names concepts `concept{id}`.
fn load_concept_names(mask_root: &Path, max_id: u16) -> Result<Vec<String>> {
    let path = mask_root.join("concepts.json");
    if path.exists() {
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let names: Vec<String> = serde_json::from_str(&text)?;
        if names.len() <= max_id as usize {
            return Err(Error::Dataset(format!(
                "{} names {} concepts but masks use id {}",
                path.display(),
                names.len(),
                max_id
            )));
        }
        return Ok(names);
    }
    let mut names = vec!["background".to_string()];
    names.extend((1..=max_id).map(|i| format!("concept{i}")));
    Ok(names)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_folder(root: &Path, classes: &[&str], per_class: usize) {
        for (ci, c) in classes.iter().enumerate() {
            let dir = root.join(c);
            fs::create_dir_all(&dir).unwrap();
            for k in 0..per_class {
                let img = image::RgbImage::from_fn(8, 8, |x, y| {
                    image::Rgb([(x * 20) as u8, (y * 20) as u8, (ci * 100 + k) as u8])
                });
                img.save(dir.join(format!("img{k:02}.png"))).unwrap();
            }
        }
    }

    #[test]
    fn folder_split_is_deterministic() {
        let tmp = tempfile::tempdir().unwrap();
        write_folder(tmp.path(), &["b", "a"], 10);
        let f = SplitFractions::new(0.8, 0.0, 0.2).unwrap();
        let opts = LoadOptions {
            image_size: 16,
            masks_root: None,
        };
        let a = load_image_folder(tmp.path(), f, 7, &opts).unwrap();
        let b = load_image_folder(tmp.path(), f, 7, &opts).unwrap();
        assert_eq!(a.train.len(), 16);
        assert_eq!(a.test.len(), 4);
        assert!(a.validation.is_empty());
        assert_eq!(a.class_names, vec!["a", "b"]);
        assert_eq!(a.class_weights, vec![1.0, 1.0]);
        assert_eq!(a.manifest(), b.manifest());
        assert_eq!(a.train[0].pixels, b.train[0].pixels);
        assert_eq!(a.train[0].pixels.height, 16);
    }

    #[test]
    fn eighty_twenty_split_counts() {
        let f = SplitFractions::new(0.8, 0.0, 0.2).unwrap();
        assert_eq!(f.counts(5000), (4000, 0, 1000));
    }

    #[test]
    fn undecodable_images_are_skipped_but_empty_class_is_fatal() {
        let tmp = tempfile::tempdir().unwrap();
        write_folder(tmp.path(), &["a"], 3);
        fs::write(tmp.path().join("a/broken.png"), b"not a png").unwrap();
        let opts = LoadOptions::default();
        let ds = load_image_folder(tmp.path(), SplitFractions::default(), 1, &opts).unwrap();
        assert_eq!(ds.all_images().count(), 3);

        fs::create_dir_all(tmp.path().join("b")).unwrap();
        fs::write(tmp.path().join("b/broken.png"), b"junk").unwrap();
        let err = load_image_folder(tmp.path(), SplitFractions::default(), 1, &opts).unwrap_err();
        assert!(err.to_string().contains("class b"), "{err}");

        fs::remove_file(tmp.path().join("b/broken.png")).unwrap();
        let err = load_image_folder(tmp.path(), SplitFractions::default(), 1, &opts).unwrap_err();
        assert!(err.to_string().contains("empty"), "{err}");
    }

    #[test]
    fn masks_load_alongside_images() {
        let tmp = tempfile::tempdir().unwrap();
        let data = tmp.path().join("data");
        let masks = tmp.path().join("masks");
        write_folder(&data, &["a", "b"], 2);
        for c in ["a", "b"] {
            fs::create_dir_all(masks.join(c)).unwrap();
            for k in 0..2 {
                let m = image::GrayImage::from_fn(8, 8, |x, _| image::Luma([if x < 4 { 0 } else { 2 }]));
                m.save(masks.join(c).join(format!("img{k:02}.png"))).unwrap();
            }
        }
        let opts = LoadOptions {
            image_size: 8,
            masks_root: Some(masks),
        };
        let ds = load_image_folder(&data, SplitFractions::new(0.5, 0.0, 0.5).unwrap(), 3, &opts).unwrap();
        assert!(ds.has_masks());
        assert_eq!(ds.concept_names, vec!["background", "concept1", "concept2"]);
        let m = ds.train[0].mask.as_ref().unwrap();
        assert_eq!(m.at(0, 0), 0);
        assert_eq!(m.at(0, 7), 2);
    }

    #[test]
    fn imbalanced_weights_restore_total() {
        let labels = [0, 0, 0, 1, 2, 2];
        let w = class_weights(labels, 3);
        let total: f64 = labels.iter().map(|&l| w[l]).sum();
        assert!((total - labels.len() as f64).abs() < 1e-12);
        assert!((w[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn validate_rejects_overlapping_ids() {
        let mut ds = generate_synthetic(2, 10, 16, 0, false).unwrap();
        let dup = ds.train[0].clone();
        ds.test.push(dup);
        assert!(ds.validate().is_err());
    }
}
