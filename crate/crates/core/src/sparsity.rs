//! Class-specific filter targets, per-filter thresholds and the sparsity loss
//! that pushes last-layer filter activations towards binary values.
//!
//! For image `n` and filter `j` the loss compares `σ(‖f_nj‖₂ − t_j)` against
//! the target `P[class(n)][j]` with binary cross-entropy, averaged over all
//! `N·F` pairs. `P` marks `K` filters per class, chosen either from the
//! cumulative mean-absolute activation per class or uniformly at random.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{l2_norm, mean_abs_norm, BackboneModel, FeatureMaps};
use crate::dataset::LabeledImage;
use crate::{Error, Result};


#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PMethod {
    ActivationFrequency,
    Random,
}

impl PMethod {
    fn as_str(self) -> &'static str {
        match self {
            PMethod::ActivationFrequency => "activation_frequency",
            PMethod::Random => "random",
        }
    }
}

/// Binary `C×F` matrix of filter targets; each row has exactly `k` ones.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilterProbabilityMatrix {
    pub values: Array2<u8>,
    pub k: usize,
    pub method: PMethod,
}

impl FilterProbabilityMatrix {
    pub fn num_classes(&self) -> usize {
        self.values.nrows()
    }

    pub fn num_filters(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_target(&self, class: usize, filter: usize) -> bool {
        self.values[[class, filter]] == 1
    }

    pub fn validate(&self) -> Result<()> {
        for (c, row) in self.values.rows().into_iter().enumerate() {
            if row.iter().any(|&v| v > 1) {
                return Err(Error::InvalidArgument(format!("P row {c} has a non-binary entry")));
            }
            let s: usize = row.iter().map(|&v| v as usize).sum();
            if s != self.k {
                return Err(Error::InvalidArgument(format!("P row {c} sums to {s}, expected K={}", self.k)));
            }
        }
        Ok(())
    }

    pub fn to_csv(&self, class_names: &[String]) -> String {
        let mut out = format!("# method={},k={}\nclass", self.method.as_str(), self.k);
        for j in 0..self.num_filters() {
            let _ = write!(out, ",f{j}");
        }
        out.push('\n');
        for (c, row) in self.values.rows().into_iter().enumerate() {
            out.push_str(class_names.get(c).map(String::as_str).unwrap_or("?"));
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path, class_names: &[String]) -> Result<()> {
        fs::write(path, self.to_csv(class_names)).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<(Self, Vec<String>)> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let p = path.display().to_string();
        let mut lines = text.lines().enumerate();
        let (_, meta) = lines.next().ok_or_else(|| Error::parse(&p, 1, "empty file"))?;
        let meta = meta
            .strip_prefix("# ")
            .ok_or_else(|| Error::parse(&p, 1, "missing '# method=..,k=..' line"))?;
        let (mut method, mut k) = (None, None);
        for kv in meta.split(',') {
            match kv.split_once('=') {
                Some(("method", "random")) => method = Some(PMethod::Random),
                Some(("method", "activation_frequency")) => method = Some(PMethod::ActivationFrequency),
                Some(("k", v)) => k = v.parse::<usize>().ok(),
                _ => return Err(Error::parse(&p, 1, format!("unexpected field '{kv}'"))),
            }
        }
        let (method, k) = match (method, k) {
            (Some(m), Some(k)) => (m, k),
            _ => return Err(Error::parse(&p, 1, "method and k are required")),
        };
        let (_, header) = lines.next().ok_or_else(|| Error::parse(&p, 2, "missing header"))?;
        let f = header.split(',').count() - 1;
        let mut names = Vec::new();
        let mut flat = Vec::new();
        for (i, line) in lines {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != f + 1 {
                return Err(Error::parse(&p, i + 1, format!("expected {} cells, got {}", f + 1, cells.len())));
            }
            names.push(cells[0].to_string());
            for c in &cells[1..] {
                match *c {
                    "0" => flat.push(0u8),
                    "1" => flat.push(1u8),
                    other => return Err(Error::parse(&p, i + 1, format!("non-binary cell '{other}'"))),
                }
            }
        }
        let values = Array2::from_shape_vec((names.len(), f), flat).expect("row arity checked");
        let pm = FilterProbabilityMatrix { values, k, method };
        pm.validate()?;
        Ok((pm, names))
    }
}

/// Per-class sums of mean-absolute filter norms over the training images.
#[derive(Debug, Clone, PartialEq)]
pub struct CumulativeActivationMatrix(pub Array2<f64>);

/// Marks the `k` largest entries of each row of `d`; ties go to the lower
/// filter index.
pub fn top_k_from_cumulative(d: &Array2<f64>, k: usize) -> Result<FilterProbabilityMatrix> {
    let (c, f) = d.dim();
    check_k(k, f)?;
    let mut values = Array2::zeros((c, f));
    for (ci, row) in d.rows().into_iter().enumerate() {
        let mut idx: Vec<usize> = (0..f).collect();
        idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        for &j in &idx[..k] {
            values[[ci, j]] = 1;
        }
    }
    let p = FilterProbabilityMatrix {
        values,
        k,
        method: PMethod::ActivationFrequency,
    };
    p.validate()?;
    Ok(p)
}

fn check_k(k: usize, f: usize) -> Result<()> {
    if k == 0 || k > f {
        return Err(Error::InvalidArgument(format!("K={k} must be in [1, F={f}]")));
    }
    Ok(())
}

fn rasters(images: &[LabeledImage]) -> Vec<&crate::dataset::Raster> {
    images.iter().map(|im| &im.pixels).collect()
}

/// Top-K filters per class by cumulative activation over `train`.
pub fn compute_p_method1(
    model: &BackboneModel,
    train: &[LabeledImage],
    k: usize,
) -> Result<(FilterProbabilityMatrix, CumulativeActivationMatrix)> {
    let (c, f) = (model.config.classes, model.config.filters);
    check_k(k, f)?;
    let norms = mean_abs_norm(&model.feature_maps(&rasters(train))?);
    let mut d = Array2::zeros((c, f));
    let mut counts = vec![0usize; c];
    for (i, im) in train.iter().enumerate() {
        counts[im.label] += 1;
        for j in 0..f {
            d[[im.label, j]] += norms[[i, j]];
        }
    }
    if let Some(empty) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Dataset(format!("class {empty} has no training images")));
    }
    Ok((top_k_from_cumulative(&d, k)?, CumulativeActivationMatrix(d)))
}

/// `k` filters per class drawn uniformly without replacement.
pub fn compute_p_method2(classes: usize, filters: usize, k: usize, seed: u64) -> Result<FilterProbabilityMatrix> {
    check_k(k, filters)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Array2::zeros((classes, filters));
    for c in 0..classes {
        for j in rand::seq::index::sample(&mut rng, filters, k) {
            values[[c, j]] = 1;
        }
    }
    let p = FilterProbabilityMatrix {
        values,
        k,
        method: PMethod::Random,
    };
    p.validate()?;
    Ok(p)
}

/// Per-filter binarization thresholds `h1·μ + h2·σ` over training L2 norms,
/// using the population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTensor {
    pub values: Vec<f64>,
    pub h1: f64,
    pub h2: f64,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl ThresholdTensor {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let join = |v: &[f64], sep: &str| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(sep);
        let header = (0..self.len()).map(|j| format!("f{j}")).collect::<Vec<_>>().join(",");
        format!(
            "# h1={},h2={}\n# mu={}\n# sigma={}\n{}\n{}\n",
            self.h1,
            self.h2,
            join(&self.mu, ";"),
            join(&self.sigma, ";"),
            header,
            join(&self.values, ",")
        )
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let p = path.display().to_string();
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < 5 {
            return Err(Error::parse(&p, lines.len(), "truncated threshold file"));
        }
        let num = |s: &str, line: usize| -> Result<f64> {
            s.trim().parse::<f64>().map_err(|_| Error::parse(&p, line, format!("bad number '{s}'")))
        };
        let list = |s: &str, sep: char, line: usize| -> Result<Vec<f64>> {
            if s.is_empty() {
                return Ok(Vec::new());
            }
            s.split(sep).map(|x| num(x, line)).collect()
        };
        let hs = lines[0]
            .strip_prefix("# h1=")
            .and_then(|r| r.split_once(",h2="))
            .ok_or_else(|| Error::parse(&p, 1, "expected '# h1=..,h2=..'"))?;
        let mu = lines[1].strip_prefix("# mu=").ok_or_else(|| Error::parse(&p, 2, "expected '# mu='"))?;
        let sigma = lines[2]
            .strip_prefix("# sigma=")
            .ok_or_else(|| Error::parse(&p, 3, "expected '# sigma='"))?;
        let t = ThresholdTensor {
            h1: num(hs.0, 1)?,
            h2: num(hs.1, 1)?,
            mu: list(mu, ';', 2)?,
            sigma: list(sigma, ';', 3)?,
            values: list(lines[4], ',', 5)?,
        };
        let f = lines[3].split(',').count();
        if t.values.len() != f || t.mu.len() != f || t.sigma.len() != f {
            return Err(Error::parse(&p, 5, format!("expected {f} thresholds with matching mu/sigma")));
        }
        Ok(t)
    }
}

pub fn thresholds_from_norms(norms: &Array2<f64>, h1: f64, h2: f64) -> Result<ThresholdTensor> {
    let (n, f) = norms.dim();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("thresholds need at least 2 images, got {n}")));
    }
    let mut mu = vec![0.0; f];
    let mut sigma = vec![0.0; f];
    for j in 0..f {
        let col = norms.column(j);
        let m = col.sum() / n as f64;
        let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
        mu[j] = m;
        sigma[j] = var.sqrt();
    }
    let values = mu.iter().zip(&sigma).map(|(m, s)| h1 * m + h2 * s).collect();
    Ok(ThresholdTensor {
        values,
        h1,
        h2,
        mu,
        sigma,
    })
}

pub fn compute_thresholds(model: &BackboneModel, train: &[LabeledImage], h1: f64, h2: f64) -> Result<ThresholdTensor> {
    let norms = l2_norm(&model.feature_maps(&rasters(train))?);
    thresholds_from_norms(&norms, h1, h2)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_thresholds(fm: &FeatureMaps, thresholds: Option<&ThresholdTensor>) -> Result<()> {
    if let Some(t) = thresholds {
        if t.len() != fm.num_filters() {
            return Err(Error::ShapeMismatch {
                context: "threshold tensor",
                expected: fm.num_filters().to_string(),
                actual: t.len().to_string(),
            });
        }
    }
    Ok(())
}

/// Sigmoid of the threshold-adjusted L2 norms; with no thresholds the sigmoid
/// is applied to the raw norms.
pub fn activations_from_norms(norms: &Array2<f64>, thresholds: Option<&ThresholdTensor>) -> Array2<f64> {
    let mut out = norms.clone();
    for ((_, j), v) in out.indexed_iter_mut() {
        let t = thresholds.map_or(0.0, |t| t.values[j]);
        *v = sigmoid(*v - t);
    }
    out
}

pub fn sigmoid_activations(fm: &FeatureMaps, thresholds: Option<&ThresholdTensor>) -> Result<Array2<f64>> {
    check_thresholds(fm, thresholds)?;
    Ok(activations_from_norms(&l2_norm(fm), thresholds))
}

#[cfg(test)]
fn bce(s: f64, target: f64) -> f64 {
    -(target * s.ln() + (1.0 - target) * (1.0 - s).ln())
}

/// BCE of `sigmoid(z)` against `target`, computed from the logit so that
/// saturated activations keep full precision.
fn bce_logit(z: f64, target: f64) -> f64 {
    z.max(0.0) - z * target + (-z.abs()).exp().ln_1p()
}

/// Mean binary cross-entropy between filter activations and the class
/// targets from `p`, with its gradient w.r.t. every feature-map entry.
///
/// The gradient of `‖f‖₂` is taken as zero for an all-zero map.
pub fn sparsity_loss(
    fm: &FeatureMaps,
    labels: &[usize],
    p: &FilterProbabilityMatrix,
    thresholds: Option<&ThresholdTensor>,
) -> Result<(f64, Array4<f64>)> {
    let (n, f, _, _) = fm.dims();
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            context: "sparsity_loss labels",
            expected: n.to_string(),
            actual: labels.len().to_string(),
        });
    }
    if p.num_filters() != f {
        return Err(Error::ShapeMismatch {
            context: "filter probability matrix",
            expected: format!("{f} filters"),
            actual: format!("{} filters", p.num_filters()),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= p.num_classes()) {
        return Err(Error::InvalidArgument(format!("label {bad} has no row in P")));
    }
    check_thresholds(fm, thresholds)?;
    let norms = l2_norm(fm);
    let act = activations_from_norms(&norms, thresholds);
    if act.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("sparsity activations"));
    }
    let scale = 1.0 / (n * f) as f64;
    let mut loss = 0.0;
    let mut grad = Array4::zeros(fm.0.raw_dim());
    for (i, &label) in labels.iter().enumerate() {
        for j in 0..f {
            let target = p.values[[label, j]] as f64;
            let s = act[[i, j]];
            let norm = norms[[i, j]];
            loss += bce_logit(norm - thresholds.map_or(0.0, |t| t.values[j]), target);
            if norm > 0.0 {
                let d_norm = (s - target) * scale / norm;
                let mut g = grad.slice_mut(ndarray::s![i, j, .., ..]);
                g.zip_mut_with(&fm.map(i, j), |gv, &fv| *gv = d_norm * fv);
            }
        }
    }
    Ok((loss * scale, grad))
}

pub fn total_loss(cross_entropy: f64, sparsity: f64, alpha: f64, beta: f64) -> f64 {
    alpha * cross_entropy + beta * sparsity
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SparsityConfig {
    /// Filters per class marked as targets.
    pub k: usize,
    pub h1: f64,
    pub h2: f64,
    pub alpha: f64,
    pub beta: f64,
    pub seed: u64,
}

impl Default for SparsityConfig {
    fn default() -> Self {
        SparsityConfig {
            k: 5,
            h1: 0.6,
            h2: 0.7,
            alpha: 1.0,
            beta: 5.0,
            seed: 0,
        }
    }
}

impl SparsityConfig {
    pub fn validate(&self, filters: usize) -> Result<()> {
        check_k(self.k, filters)?;
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "alpha and beta must be non-negative (got {}, {})",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn top_k_hand_example_and_ties() {
        let d = arr2(&[[5.0, 1.0, 2.0], [0.0, 4.0, 4.0]]);
        let p = top_k_from_cumulative(&d, 1).unwrap();
        assert_eq!(p.values, arr2(&[[1u8, 0, 0], [0, 1, 0]]));
        let all = top_k_from_cumulative(&d, 3).unwrap();
        assert!(all.values.iter().all(|&v| v == 1));
        assert!(top_k_from_cumulative(&d, 4).is_err());
        assert!(top_k_from_cumulative(&d, 0).is_err());
    }

    #[test]
    fn method2_rows_and_determinism() {
        let a = compute_p_method2(4, 10, 3, 9).unwrap();
        let b = compute_p_method2(4, 10, 3, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.values.rows().into_iter().all(|r| r.sum() == 3));
        assert!(compute_p_method2(2, 3, 4, 0).is_err());
    }

    #[test]
    fn thresholds_on_hand_examples() {
        let t = thresholds_from_norms(&arr2(&[[3.0], [5.0]]), 0.6, 0.7).unwrap();
        assert!((t.values[0] - 3.1).abs() < 1e-12);
        assert_eq!(t.mu, vec![4.0]);
        assert_eq!(t.sigma, vec![1.0]);
        let t = thresholds_from_norms(&arr2(&[[2.5], [2.5], [2.5]]), 0.6, 0.7).unwrap();
        assert!((t.values[0] - 1.5).abs() < 1e-12);
        assert!(thresholds_from_norms(&arr2(&[[1.0]]), 0.6, 0.7).is_err());
    }

    fn one_map(values: [[f64; 2]; 2]) -> FeatureMaps {
        FeatureMaps(arr2(&values).into_shape_with_order((1, 1, 2, 2)).unwrap())
    }

    fn tensor(values: Vec<f64>) -> ThresholdTensor {
        let f = values.len();
        ThresholdTensor {
            values,
            h1: 0.6,
            h2: 0.7,
            mu: vec![0.0; f],
            sigma: vec![0.0; f],
        }
    }

    #[test]
    fn sigmoid_activation_examples() {
        let fm = one_map([[3.0, 4.0], [0.0, 0.0]]);
        let a = sigmoid_activations(&fm, Some(&tensor(vec![5.0]))).unwrap();
        assert_eq!(a[[0, 0]], 0.5);
        let a = sigmoid_activations(&fm, Some(&tensor(vec![4.3]))).unwrap();
        let oracle = 1.0 / (1.0 + (-0.7f64).exp());
        assert!((a[[0, 0]] - oracle).abs() < 1e-12);
        assert!((a[[0, 0]] - 0.66819).abs() < 1e-5);
        let a = sigmoid_activations(&one_map([[0.0; 2]; 2]), None).unwrap();
        assert_eq!(a[[0, 0]], 0.5);
        assert!(sigmoid_activations(&fm, Some(&tensor(vec![1.0, 2.0]))).is_err());
    }

    #[test]
    fn sparsity_loss_examples() {
        let p = FilterProbabilityMatrix {
            values: arr2(&[[1u8]]),
            k: 1,
            method: PMethod::Random,
        };
        let fm = one_map([[3.0, 4.0], [0.0, 0.0]]);
        let (loss, _) = sparsity_loss(&fm, &[0], &p, Some(&tensor(vec![5.0]))).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn bce_two_entry_example() {
        let expected = (-(0.9f64).ln() - (0.8f64).ln()) / 2.0;
        let got = (bce(0.9, 1.0) + bce(0.2, 0.0)) / 2.0;
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 0.16425).abs() < 1e-5);
    }

    #[test]
    fn total_loss_weights() {
        assert_eq!(total_loss(0.7, 0.2, 1.0, 0.0), 0.7);
        assert_eq!(total_loss(0.7, 0.2, 0.0, 5.0), 1.0);
        let d = SparsityConfig::default();
        assert_eq!((d.alpha, d.beta, d.h1, d.h2), (1.0, 5.0, 0.6, 0.7));
    }

    #[test]
    fn p_csv_round_trip_and_validation() {
        let tmp = tempfile::tempdir().unwrap();
        let p = compute_p_method2(3, 6, 2, 4).unwrap();
        let names: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let path = tmp.path().join("p.csv");
        p.write_csv(&path, &names).unwrap();
        let (back, back_names) = FilterProbabilityMatrix::read_csv(&path).unwrap();
        assert_eq!(back, p);
        assert_eq!(back_names, names);
        fs::write(&path, "# method=random,k=1\nclass,f0,f1\na,1,1\n").unwrap();
        assert!(FilterProbabilityMatrix::read_csv(&path).is_err());
    }

    #[test]
    fn threshold_csv_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let t = thresholds_from_norms(&arr2(&[[0.1, 3.3], [0.7, 1.0 / 3.0], [2.0, 9.0]]), 0.6, 0.7).unwrap();
        let path = tmp.path().join("t.csv");
        t.write_csv(&path).unwrap();
        assert_eq!(ThresholdTensor::read_csv(&path).unwrap(), t);
    }
}
