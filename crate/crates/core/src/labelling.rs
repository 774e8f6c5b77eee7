//! Filter labelling from concept masks, and top-activation overlays.
//!
//! A filter's label comes from the images that activate it most: each
//! feature map is upsampled to image size, pixels at or above half the map's
//! maximum form the active region, and the mask concepts under that region
//! are counted.

use std::collections::BTreeMap;
use std::path::Path;

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Luma};
use log::warn;
use serde::{Deserialize, Serialize};

use crate::backbone::{l2_norm, BackboneModel, FeatureMaps};
use crate::binarization::binarize_features;
use crate::dataset::{DatasetSplit, LabeledImage, Raster};
use crate::rules::{Head, Pred, RuleSet};
use crate::sparsity::{activations_from_norms, ThresholdTensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelConfig {
    /// Images consulted per filter.
    pub top_m: usize,
    /// Active region: upsampled map >= `active_fraction` · max.
    pub active_fraction: f64,
    /// Concepts scoring above this enter the rendered name.
    pub cutoff: f64,
}

impl Default for LabelConfig {
    fn default() -> Self {
        LabelConfig {
            top_m: 10,
            active_fraction: 0.5,
            cutoff: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptScore {
    pub concept: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterLabel {
    pub filter: usize,
    /// Descending by score; background is not ranked.
    pub concepts: Vec<ConceptScore>,
    pub name: String,
    pub images: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Overlay {
    pub image_id: String,
    pub norm: f64,
    /// Upsampled map scaled to [0, 1], row-major at image resolution.
    pub heatmap: Vec<f64>,
    pub blended: Raster,
}

impl Overlay {
    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.blended.to_rgb().save(path)?;
        Ok(())
    }
}

/// Indices of `norms` sorted by descending value, ties by ascending id.
pub fn rank_by_norm(norms: &[f64], ids: &[&str]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..norms.len()).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then_with(|| ids[a].cmp(ids[b])));
    order
}

/// One feature map scaled to [0, 1] by its maximum and bilinearly upsampled
/// to `size × size`. An all-zero map stays zero.
pub fn upsample(map: ndarray::ArrayView2<'_, f64>, size: usize) -> Vec<f64> {
    let (h, w) = map.dim();
    let max = map.iter().copied().fold(0.0, f64::max);
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    let buf: ImageBuffer<Luma<f32>, Vec<f32>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([(map[[y as usize, x as usize]] * scale).max(0.0) as f32])
    });
    let up = imageops::resize(&buf, size as u32, size as u32, FilterType::Triangle);
    up.pixels().map(|p| p.0[0] as f64).collect()
}

fn blend(img: &Raster, heat: &[f64], alpha: f64) -> Raster {
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            let a = alpha * heat[y * img.width + x];
            for c in 0..img.channels {
                let hot = if c == 0 { 1.0 } else { 0.0 };
                out.set(c, y, x, (1.0 - a) * img.at(c, y, x) + a * hot);
            }
        }
    }
    out
}

/// The `m` images with the largest L2 norm for `filter`, with overlays.
pub fn top_activations(model: &BackboneModel, images: &[LabeledImage], filter: usize, m: usize) -> Result<Vec<Overlay>> {
    if filter >= model.config.filters {
        return Err(Error::InvalidArgument(format!(
            "filter {filter} out of range (F = {})",
            model.config.filters
        )));
    }
    let rasters: Vec<&Raster> = images.iter().map(|im| &im.pixels).collect();
    let fm = model.feature_maps(&rasters)?;
    let all: Vec<usize> = (0..images.len()).collect();
    Ok(overlays(&fm, images, &all, filter, m, model.config.image_size))
}

fn overlays(fm: &FeatureMaps, images: &[LabeledImage], candidates: &[usize], filter: usize, m: usize, size: usize) -> Vec<Overlay> {
    if m > candidates.len() {
        warn!("asked for {m} images for filter {filter}, only {} available", candidates.len());
    }
    let norms = l2_norm(fm);
    let cand_norms: Vec<f64> = candidates.iter().map(|&i| norms[[i, filter]]).collect();
    let ids: Vec<&str> = candidates.iter().map(|&i| images[i].id.as_str()).collect();
    rank_by_norm(&cand_norms, &ids)
        .into_iter()
        .take(m)
        .map(|k| {
            let i = candidates[k];
            let heatmap = upsample(fm.map(i, filter), size);
            Overlay {
                image_id: images[i].id.clone(),
                norm: cand_norms[k],
                blended: blend(&images[i].pixels, &heatmap, 0.5),
                heatmap,
            }
        })
        .collect()
}

/// Concept frequencies inside the active regions of the given overlays.
fn concept_scores(overlays: &[Overlay], images: &BTreeMap<&str, &LabeledImage>, concept_names: &[String], active_fraction: f64) -> Vec<ConceptScore> {
    let mut counts = vec![0usize; concept_names.len().max(1)];
    let mut total = 0usize;
    for ov in overlays {
        let mask = images[ov.image_id.as_str()].mask.as_ref().expect("masks checked");
        let max = ov.heatmap.iter().copied().fold(0.0, f64::max);
        if max <= 0.0 {
            continue;
        }
        for (p, &h) in ov.heatmap.iter().enumerate() {
            if h >= active_fraction * max {
                let c = mask.data[p] as usize;
                if c >= counts.len() {
                    counts.resize(c + 1, 0);
                }
                counts[c] += 1;
                total += 1;
            }
        }
    }
    let mut scores: Vec<ConceptScore> = counts
        .iter()
        .enumerate()
        .skip(1)
        .filter(|(_, &n)| n > 0)
        .map(|(c, &n)| ConceptScore {
            concept: concept_names.get(c).cloned().unwrap_or_else(|| format!("concept{c}")),
            score: n as f64 / total as f64,
        })
        .collect();
    scores.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.concept.cmp(&b.concept)));
    scores
}

/// Labels every filter predicate of `rs` using the training images' masks.
/// Candidate images for a filter are those where it binarizes to 1; when
/// there are none, all training images are ranked.
pub fn label_filters(
    model: &BackboneModel,
    dataset: &DatasetSplit,
    thresholds: Option<&ThresholdTensor>,
    rs: &RuleSet,
    cfg: &LabelConfig,
) -> Result<Vec<FilterLabel>> {
    let images = &dataset.train;
    if images.is_empty() || images.iter().any(|im| im.mask.is_none()) {
        return Err(Error::Dataset(
            "labelling needs a concept mask for every training image; skip the label step or supply masks".into(),
        ));
    }
    let rasters: Vec<&Raster> = images.iter().map(|im| &im.pixels).collect();
    let fm = model.feature_maps(&rasters)?;
    let bits = binarize_features(&activations_from_norms(&l2_norm(&fm), thresholds));
    let by_id: BTreeMap<&str, &LabeledImage> = images.iter().map(|im| (im.id.as_str(), im)).collect();
    let mut uses: BTreeMap<String, usize> = BTreeMap::new();
    let mut out = Vec::new();
    for filter in rs.filters() {
        if filter >= model.config.filters {
            return Err(Error::InvalidArgument(format!("rule-set mentions filter {filter} beyond F")));
        }
        let mut candidates: Vec<usize> = (0..images.len()).filter(|&i| bits[[i, filter]] == 1).collect();
        if candidates.is_empty() {
            candidates = (0..images.len()).collect();
        }
        let ovs = overlays(&fm, images, &candidates, filter, cfg.top_m, model.config.image_size);
        let concepts = concept_scores(&ovs, &by_id, &dataset.concept_names, cfg.active_fraction);
        let parts: Vec<String> = concepts
            .iter()
            .filter(|c| c.score > cfg.cutoff)
            .map(|c| {
                let n = uses.entry(c.concept.clone()).or_insert(0);
                *n += 1;
                format!("{}{}", c.concept, n)
            })
            .collect();
        let name = if parts.is_empty() {
            filter.to_string()
        } else {
            parts.join("_")
        };
        out.push(FilterLabel {
            filter,
            concepts,
            name,
            images: ovs.into_iter().map(|o| o.image_id).collect(),
        });
    }
    Ok(out)
}

pub fn label_map(labels: &[FilterLabel]) -> BTreeMap<usize, String> {
    labels.iter().map(|l| (l.filter, l.name.clone())).collect()
}

/// Per class, the first non-negated filter predicate of its first rule.
pub fn top_filter_per_class(rs: &RuleSet) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for r in &rs.class_rules {
        let Head::Class(c) = &r.head else { continue };
        if out.contains_key(c) {
            continue;
        }
        let first = r.body.iter().find_map(|l| match (l.pred, l.negated) {
            (Pred::Filter(f), false) => Some(f),
            _ => None,
        });
        if let Some(f) = first {
            out.insert(c.clone(), f);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ConceptMask;
    use crate::rules::parse_program;

    #[test]
    fn ties_rank_by_id() {
        let order = rank_by_norm(&[0.0, 2.0, 0.0, 2.0], &["d", "c", "a", "b"]);
        assert_eq!(order, vec![3, 1, 2, 0]);
    }

    #[test]
    fn upsample_constant_map() {
        let map = ndarray::Array2::from_elem((4, 4), 2.5);
        let up = upsample(map.view(), 16);
        assert_eq!(up.len(), 256);
        assert!(up.iter().all(|v| (v - 1.0).abs() < 1e-6));
        let zero = upsample(ndarray::Array2::zeros((4, 4)).view(), 8);
        assert!(zero.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_concept_scores_one() {
        let mask = ConceptMask {
            height: 2,
            width: 2,
            data: vec![2, 2, 0, 0],
        };
        let im = LabeledImage {
            id: "x".into(),
            label: 0,
            pixels: Raster::zeros(3, 2, 2),
            mask: Some(mask),
        };
        let ov = Overlay {
            image_id: "x".into(),
            norm: 1.0,
            heatmap: vec![1.0, 0.8, 0.1, 0.0],
            blended: Raster::zeros(3, 2, 2),
        };
        let by_id = BTreeMap::from([("x", &im)]);
        let names: Vec<String> = ["background", "a", "b"].iter().map(|s| s.to_string()).collect();
        let s = concept_scores(&[ov], &by_id, &names, 0.5);
        assert_eq!(s, vec![ConceptScore { concept: "b".into(), score: 1.0 }]);
    }

    #[test]
    fn top_filter_skips_negated() {
        let rs = parse_program(
            "target(X,'A') :- not 3(X), 5(X).\ntarget(X,'A') :- 1(X).\ntarget(X,'B') :- 2(X), 7(X).",
            None,
        )
        .unwrap();
        let top = top_filter_per_class(&rs);
        assert_eq!(top["A"], 5);
        assert_eq!(top["B"], 2);
    }
}
