//! Binarization table: one row of rounded filter activations per image.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneModel;
use crate::dataset::{DatasetSplit, LabeledImage};
use crate::sparsity::{sigmoid_activations, ThresholdTensor};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableRow {
    pub id: String,
    pub features: Vec<u8>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinarizationTable {
    pub num_features: usize,
    pub class_names: Vec<String>,
    pub rows: Vec<TableRow>,
}

impl BinarizationTable {
    pub fn new(num_features: usize, class_names: Vec<String>, rows: Vec<TableRow>) -> Result<Self> {
        let t = BinarizationTable {
            num_features,
            class_names,
            rows,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r.label).collect()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, r) in self.rows.iter().enumerate() {
            if r.features.len() != self.num_features {
                return Err(Error::ShapeMismatch {
                    context: "binarization row",
                    expected: self.num_features.to_string(),
                    actual: format!("{} (row {i})", r.features.len()),
                });
            }
            if r.features.iter().any(|&v| v > 1) {
                return Err(Error::InvalidArgument(format!("row {i} ({}) has a non-binary feature", r.id)));
            }
            if r.label >= self.class_names.len() {
                return Err(Error::InvalidArgument(format!("row {i} ({}) has label index {}", r.id, r.label)));
            }
        }
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        let mut header = vec!["image_id".to_string()];
        header.extend((0..self.num_features).map(|j| format!("f{j}")));
        header.push("label".into());
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = Vec::with_capacity(self.num_features + 2);
            rec.push(r.id.clone());
            rec.extend(r.features.iter().map(|v| v.to_string()));
            rec.push(self.class_names[r.label].clone());
            w.write_record(&rec)?;
        }
        let mut file = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
        file.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads a table written by [`write_csv`](Self::write_csv). Class names are
    /// the sorted distinct labels found in the file.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let p = path.display().to_string();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = csv::ReaderBuilder::new().flexible(true).from_reader(file);
        let header = r.headers()?.clone();
        let n = header.len();
        if n < 2 || &header[0] != "image_id" || &header[n - 1] != "label" {
            return Err(Error::parse(&p, 1, "header must be image_id,f0..,label"));
        }
        for (j, h) in header.iter().skip(1).take(n - 2).enumerate() {
            if h != format!("f{j}") {
                return Err(Error::parse(&p, 1, format!("column {} should be f{j}, found '{h}'", j + 1)));
            }
        }
        let f = n - 2;
        let mut raw = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| Error::parse(&p, line, e.to_string()))?;
            if rec.len() != n {
                return Err(Error::parse(&p, line, format!("expected {n} cells, got {}", rec.len())));
            }
            let mut features = Vec::with_capacity(f);
            for (j, cell) in rec.iter().skip(1).take(f).enumerate() {
                match cell {
                    "0" => features.push(0),
                    "1" => features.push(1),
                    other => {
                        return Err(Error::parse(&p, line, format!("f{j} has non-binary value '{other}'")));
                    }
                }
            }
            raw.push((rec[0].to_string(), features, rec[n - 1].to_string()));
        }
        let class_names: Vec<String> = raw
            .iter()
            .map(|(_, _, l)| l.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let rows = raw
            .into_iter()
            .map(|(id, features, l)| TableRow {
                id,
                features,
                label: class_names.binary_search(&l).expect("collected above"),
            })
            .collect();
        BinarizationTable::new(f, class_names, rows)
    }
}

/// Rounds activations half-up: exactly 0.5 becomes 1.
pub fn binarize_features(activations: &Array2<f64>) -> Array2<u8> {
    activations.mapv(|a| u8::from(a >= 0.5))
}

/// Binarizes arbitrary images; rows come back ordered by image id.
pub fn binarize_images(
    model: &BackboneModel,
    images: &[LabeledImage],
    thresholds: Option<&ThresholdTensor>,
    class_names: &[String],
) -> Result<BinarizationTable> {
    let mut order: Vec<&LabeledImage> = images.iter().collect();
    order.sort_by(|a, b| a.id.cmp(&b.id));
    let raster: Vec<_> = order.iter().map(|im| &im.pixels).collect();
    let fm = model.feature_maps(&raster)?;
    let bits = binarize_features(&sigmoid_activations(&fm, thresholds)?);
    let rows = order
        .iter()
        .zip(bits.rows())
        .map(|(im, b)| TableRow {
            id: im.id.clone(),
            features: b.to_vec(),
            label: im.label,
        })
        .collect();
    BinarizationTable::new(model.config.filters, class_names.to_vec(), rows)
}

/// The table the rule learner consumes: one row per training image.
pub fn binarize_dataset(
    dataset: &DatasetSplit,
    model: &BackboneModel,
    thresholds: Option<&ThresholdTensor>,
) -> Result<BinarizationTable> {
    binarize_images(model, &dataset.train, thresholds, &dataset.class_names)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn half_rounds_up() {
        let b = binarize_features(&array![[0.5, 0.4999, 0.0, 1.0]]);
        assert_eq!(b, array![[1, 0, 0, 1]]);
    }

    fn table(n: usize) -> BinarizationTable {
        let rows = (0..n)
            .map(|i| TableRow {
                id: format!("img{i:04}"),
                features: vec![(i % 2) as u8, ((i / 2) % 2) as u8, 1],
                label: i % 3,
            })
            .collect();
        BinarizationTable::new(3, vec!["a".into(), "b".into(), "c".into()], rows).unwrap()
    }

    #[test]
    fn csv_round_trip_and_line_count() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let t = table(1000);
        t.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1001);
        assert!(text.starts_with("image_id,f0,f1,f2,label\n"));
        assert_eq!(BinarizationTable::read_csv(&path).unwrap(), t);
    }

    #[test]
    fn bad_cell_names_row() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        std::fs::write(&path, "image_id,f0,f1,label\nx,0,1,a\ny,2,0,b\n").unwrap();
        let err = BinarizationTable::read_csv(&path).unwrap_err().to_string();
        assert!(err.contains(":3"), "{err}");
        assert!(err.contains("'2'"), "{err}");
        std::fs::write(&path, "image_id,f0,f1,label\nx,0,a\n").unwrap();
        assert!(BinarizationTable::read_csv(&path).is_err());
    }
}
