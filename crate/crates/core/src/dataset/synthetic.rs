//! Desk-scale synthetic dataset: one colored shape motif per class on a noisy
//! gray background, with optional concept masks marking the motif pixels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{class_weights, ConceptMask, DatasetSplit, LabeledImage, Raster, SplitFractions};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Cross,
    Diamond,
    HBar,
    Ring,
    Square,
    Triangle,
    VBar,
}

/// Alphabetical, so class index order equals lexicographic name order.
const SHAPES: [Shape; 8] = [
    Shape::Circle,
    Shape::Cross,
    Shape::Diamond,
    Shape::HBar,
    Shape::Ring,
    Shape::Square,
    Shape::Triangle,
    Shape::VBar,
];

impl Shape {
    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Cross => "cross",
            Shape::Diamond => "diamond",
            Shape::HBar => "hbar",
            Shape::Ring => "ring",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::VBar => "vbar",
        }
    }

    /// Whether offset `(dx, dy)` from the motif center lies inside a motif of
    /// radius `r`. Image y grows downwards.
    pub fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        let (ax, ay) = (dx.abs(), dy.abs());
        let arm = r / 3.0;
        match self {
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Cross => (ax <= arm && ay <= r) || (ay <= arm && ax <= r),
            Shape::Diamond => ax + ay <= r,
            Shape::HBar => ay <= arm && ax <= r,
            Shape::Ring => {
                let d2 = dx * dx + dy * dy;
                d2 <= r * r && d2 >= 0.25 * r * r
            }
            Shape::Square => ax <= 0.8 * r && ay <= 0.8 * r,
            Shape::Triangle => {
                // apex (0,-r), base corners (-r,r) and (r,r)
                dy <= r && 2.0 * ax <= dy + r
            }
            Shape::VBar => ax <= arm && ay <= r,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotifPlacement {
    pub class: usize,
    pub shape: Shape,
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    pub color: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    pub seed: u64,
    pub with_masks: bool,
    #[serde(default)]
    pub fractions: SplitFractions,
}

impl SyntheticSpec {
    pub fn new(classes: usize, per_class: usize, image_size: usize, seed: u64) -> Self {
        SyntheticSpec {
            classes,
            per_class,
            image_size,
            seed,
            with_masks: false,
            fractions: SplitFractions::default(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.per_class < 10 || self.image_size < 16 {
            return Err(Error::InvalidArgument(format!(
                "synthetic dataset needs classes >= 2, per_class >= 10, image_size >= 16 (got {}, {}, {})",
                self.classes, self.per_class, self.image_size
            )));
        }
        self.fractions.validate()
    }

    pub fn class_names(&self) -> Vec<String> {
        if self.classes <= SHAPES.len() {
            SHAPES[..self.classes].iter().map(|s| s.name().to_string()).collect()
        } else {
            (0..self.classes).map(|c| format!("m{c:03}")).collect()
        }
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor() as usize % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Motif placements in generation order (class-major), a pure function of the spec.
pub fn placements(spec: &SyntheticSpec) -> Vec<MotifPlacement> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let size = spec.image_size as f64;
    let mut out = Vec::with_capacity(spec.classes * spec.per_class);
    for class in 0..spec.classes {
        let shape = SHAPES[class % SHAPES.len()];
        let base = hsv_to_rgb(class as f64 / spec.classes as f64, 0.75, 0.9);
        for _ in 0..spec.per_class {
            let radius = size * rng.random_range(0.22..0.32);
            let lo = radius + 1.0;
            let hi = (size - radius - 1.0).max(lo + 1e-9);
            let cx = rng.random_range(lo..hi);
            let cy = rng.random_range(lo..hi);
            let jitter: f64 = rng.random_range(0.9..1.0);
            let color = base.map(|v| v * jitter);
            out.push(MotifPlacement {
                class,
                shape,
                cx,
                cy,
                radius,
                color,
            });
        }
    }
    out
}

fn render(p: &MotifPlacement, size: usize, rng: &mut ChaCha8Rng) -> (Raster, ConceptMask) {
    let mut raster = Raster::zeros(3, size, size);
    let mut mask = ConceptMask {
        height: size,
        width: size,
        data: vec![0; size * size],
    };
    for y in 0..size {
        for x in 0..size {
            let dx = x as f64 + 0.5 - p.cx;
            let dy = y as f64 + 0.5 - p.cy;
            if p.shape.contains(dx, dy, p.radius) {
                mask.data[y * size + x] = (p.class + 1) as u16;
                for c in 0..3 {
                    let v = p.color[c] * rng.random_range(0.85..1.0);
                    raster.set(c, y, x, v.clamp(0.0, 1.0));
                }
            } else {
                let v = rng.random_range(0.2..0.6);
                for c in 0..3 {
                    raster.set(c, y, x, v);
                }
            }
        }
    }
    (raster, mask)
}

pub fn generate(spec: &SyntheticSpec) -> Result<DatasetSplit> {
    spec.validate()?;
    let class_names = spec.class_names();
    let mut noise = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9e37_79b9_7f4a_7c15);
    let (n_train, n_val, _) = spec.fractions.counts(spec.per_class);
    let (mut train, mut validation, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (i, p) in placements(spec).iter().enumerate() {
        let k = i % spec.per_class;
        let (pixels, mask) = render(p, spec.image_size, &mut noise);
        let img = LabeledImage {
            id: format!("{}/{k:04}", class_names[p.class]),
            label: p.class,
            pixels,
            mask: spec.with_masks.then_some(mask),
        };
        if k < n_train {
            train.push(img);
        } else if k < n_train + n_val {
            validation.push(img);
        } else {
            test.push(img);
        }
    }
    let mut concept_names = vec!["background".to_string()];
    concept_names.extend(class_names.iter().cloned());
    let class_weights = class_weights(train.iter().map(|im| im.label), spec.classes);
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

pub fn generate_synthetic(
    classes: usize,
    per_class: usize,
    image_size: usize,
    seed: u64,
    with_masks: bool,
) -> Result<DatasetSplit> {
    let mut spec = SyntheticSpec::new(classes, per_class, image_size, seed);
    spec.with_masks = with_masks;
    generate(&spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_and_motifs() {
        let ds = generate_synthetic(3, 40, 32, 0, false).unwrap();
        assert_eq!(ds.all_images().count(), 120);
        assert_eq!(ds.class_names, vec!["circle", "cross", "diamond"]);
        assert_eq!(ds.train.len(), 84);
        assert_eq!(ds.validation.len(), 12);
        assert_eq!(ds.test.len(), 24);
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = generate_synthetic(3, 10, 16, 5, true).unwrap();
        let b = generate_synthetic(3, 10, 16, 5, true).unwrap();
        for (x, y) in a.all_images().zip(b.all_images()) {
            assert_eq!(x.id, y.id);
            let xb: Vec<u64> = x.pixels.data.iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u64> = y.pixels.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
            assert_eq!(x.mask, y.mask);
        }
        let c = generate_synthetic(3, 10, 16, 6, true).unwrap();
        assert_ne!(a.train[0].pixels, c.train[0].pixels);
    }

    #[test]
    fn rejects_small_specs() {
        assert!(generate_synthetic(1, 10, 16, 0, false).is_err());
        assert!(generate_synthetic(2, 9, 16, 0, false).is_err());
        assert!(generate_synthetic(2, 10, 15, 0, false).is_err());
    }

    #[test]
    fn many_classes_get_sorted_names() {
        let spec = SyntheticSpec::new(12, 10, 16, 0);
        let names = spec.class_names();
        let mut sorted = names.clone();
        sorted.sort();
        assert_eq!(names, sorted);
    }
}
