//! Small convolutional backbone with hand-rolled backpropagation.
//!
//! Architecture: a stack of `3x3 conv -> ReLU -> 2x2 max-pool` hidden blocks,
//! then the last `3x3 conv -> ReLU` layer whose `F` output maps are the
//! filters the rest of the crate reasons about, then global average pooling
//! and a linear head producing `C` logits. All convolutions use zero "same"
//! padding and stride 1.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array4, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::Raster;
use crate::{Error, Result};

const K: usize = 3;

/// Keeps last-layer filters alive at initialization.
pub const LAST_BIAS_INIT: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub in_channels: usize,
    pub image_size: usize,
    pub hidden_channels: Vec<usize>,
    /// Filter count `F` of the last convolutional layer.
    pub filters: usize,
    pub classes: usize,
    /// Pixels enter the first convolution as `(x - input_mean) / input_std`.
    #[serde(default = "default_input_mean")]
    pub input_mean: f64,
    #[serde(default = "default_input_std")]
    pub input_std: f64,
}

fn default_input_mean() -> f64 {
    0.5
}

fn default_input_std() -> f64 {
    0.25
}

impl ArchConfig {
    /// conv(3→16)-pool, conv(16→32)-pool, conv(32→F).
    pub fn reference(image_size: usize, filters: usize, classes: usize) -> Self {
        ArchConfig {
            in_channels: 3,
            image_size,
            hidden_channels: vec![16, 32],
            filters,
            classes,
            input_mean: default_input_mean(),
            input_std: default_input_std(),
        }
    }

    /// Spatial size of the last-layer feature maps.
    pub fn map_size(&self) -> usize {
        self.image_size >> self.hidden_channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let pools = self.hidden_channels.len() as u32;
        if self.in_channels == 0 || self.filters == 0 || self.classes == 0 {
            return Err(Error::InvalidArgument("architecture dimensions must be positive".into()));
        }
        if self.image_size == 0 || self.image_size % (1 << pools) != 0 {
            return Err(Error::InvalidArgument(format!(
                "image size {} must be a positive multiple of {}",
                self.image_size,
                1 << pools
            )));
        }
        if !(self.input_std > 0.0 && self.input_mean.is_finite()) {
            return Err(Error::InvalidArgument("input_std must be positive".into()));
        }
        if self.hidden_channels.contains(&0) {
            return Err(Error::InvalidArgument("hidden channel counts must be positive".into()));
        }
        Ok(())
    }

    fn conv_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::new();
        let mut c = self.in_channels;
        for &h in &self.hidden_channels {
            shapes.push((c, h));
            c = h;
        }
        shapes.push((c, self.filters));
        shapes
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `[out][in][3][3]`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Model parameters; the same shape doubles as a gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub convs: Vec<ConvLayer>,
    /// `[C][F]`
    pub head_weight: Vec<f64>,
    pub head_bias: Vec<f64>,
}

impl Params {
    pub fn zeros(config: &ArchConfig) -> Self {
        Params {
            convs: config
                .conv_shapes()
                .into_iter()
                .map(|(i, o)| ConvLayer {
                    in_channels: i,
                    out_channels: o,
                    weight: vec![0.0; o * i * K * K],
                    bias: vec![0.0; o],
                })
                .collect(),
            head_weight: vec![0.0; config.classes * config.filters],
            head_bias: vec![0.0; config.classes],
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.blocks_mut().into_iter().for_each(|b| b.fill(0.0));
        z
    }

    /// Named parameter blocks in a fixed order, with their shapes.
    pub fn blocks(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        for (l, c) in self.convs.iter().enumerate() {
            out.push((format!("conv{l}.weight"), vec![c.out_channels, c.in_channels, K, K], &c.weight[..]));
            out.push((format!("conv{l}.bias"), vec![c.out_channels], &c.bias[..]));
        }
        let classes = self.head_bias.len();
        out.push((
            "head.weight".to_string(),
            vec![classes, self.head_weight.len() / classes.max(1)],
            &self.head_weight[..],
        ));
        out.push(("head.bias".to_string(), vec![classes], &self.head_bias[..]));
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for c in &mut self.convs {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        out.push(&mut self.head_weight);
        out.push(&mut self.head_bias);
        out
    }

    pub fn len(&self) -> usize {
        self.blocks().iter().map(|b| b.2.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn add_assign(&mut self, other: &Params) {
        let rhs = other.blocks();
        for (dst, (_, _, src)) in self.blocks_mut().into_iter().zip(rhs) {
            dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for b in self.blocks_mut() {
            b.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn sum_squares(&self) -> f64 {
        self.blocks().iter().flat_map(|b| b.2.iter()).map(|v| v * v).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.2.iter().all(|v| v.is_finite()))
    }
}

/// Last-layer activations indexed `(image, filter, row, col)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMaps(pub Array4<f64>);

impl FeatureMaps {
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.0.dim()
    }

    pub fn num_images(&self) -> usize {
        self.0.dim().0
    }

    pub fn num_filters(&self) -> usize {
        self.0.dim().1
    }

    /// The `(h, w)` map of one filter for one image, row-major.
    pub fn map(&self, n: usize, j: usize) -> ArrayView2<'_, f64> {
        self.0.slice(ndarray::s![n, j, .., ..])
    }
}

struct LayerCache {
    input: Vec<f64>,
    pre: Vec<f64>,
    /// Index into `relu(pre)` of each pooled output; absent for the last layer.
    pool_argmax: Option<Vec<usize>>,
    size: usize,
}

struct ImageCache {
    layers: Vec<LayerCache>,
    pooled: Vec<f64>,
}

/// Intermediate activations kept by [`BackboneModel::forward_cached`].
pub struct ForwardCache {
    images: Vec<ImageCache>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneModel {
    pub config: ArchConfig,
    pub params: Params,
}

fn conv3x3_forward(input: &[f64], size: usize, layer: &ConvLayer, out: &mut [f64]) {
    let hw = size * size;
    for o in 0..layer.out_channels {
        let out_o = &mut out[o * hw..(o + 1) * hw];
        out_o.fill(layer.bias[o]);
        for i in 0..layer.in_channels {
            let in_i = &input[i * hw..(i + 1) * hw];
            let wbase = (o * layer.in_channels + i) * K * K;
            for ky in 0..K {
                let (y0, y1) = (usize::from(ky == 0), size - usize::from(ky == 2));
                for kx in 0..K {
                    let (x0, x1) = (usize::from(kx == 0), size - usize::from(kx == 2));
                    let wv = layer.weight[wbase + ky * K + kx];
                    for y in y0..y1 {
                        let sy = y + ky - 1;
                        let orow = &mut out_o[y * size + x0..y * size + x1];
                        let irow = &in_i[sy * size + x0 + kx - 1..sy * size + x1 + kx - 1];
                        for (a, b) in orow.iter_mut().zip(irow) {
                            *a += wv * b;
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates weight/bias gradients into `grad` and returns the input gradient.
fn conv3x3_backward(input: &[f64], size: usize, layer: &ConvLayer, dout: &[f64], grad: &mut ConvLayer) -> Vec<f64> {
    let hw = size * size;
    let mut dinput = vec![0.0; input.len()];
    for o in 0..layer.out_channels {
        let d_o = &dout[o * hw..(o + 1) * hw];
        grad.bias[o] += d_o.iter().sum::<f64>();
        for i in 0..layer.in_channels {
            let in_i = &input[i * hw..(i + 1) * hw];
            let wbase = (o * layer.in_channels + i) * K * K;
            for ky in 0..K {
                let (y0, y1) = (usize::from(ky == 0), size - usize::from(ky == 2));
                for kx in 0..K {
                    let (x0, x1) = (usize::from(kx == 0), size - usize::from(kx == 2));
                    let wv = layer.weight[wbase + ky * K + kx];
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let sy = y + ky - 1;
                        let drow = &d_o[y * size + x0..y * size + x1];
                        let lo = sy * size + x0 + kx - 1;
                        let irow = &in_i[lo..lo + (x1 - x0)];
                        acc += drow.iter().zip(irow).map(|(a, b)| a * b).sum::<f64>();
                        let dirow = &mut dinput[i * hw + lo..i * hw + lo + (x1 - x0)];
                        for (a, b) in dirow.iter_mut().zip(drow) {
                            *a += wv * b;
                        }
                    }
                    grad.weight[wbase + ky * K + kx] += acc;
                }
            }
        }
    }
    dinput
}

fn maxpool2(input: &[f64], channels: usize, size: usize) -> (Vec<f64>, Vec<usize>) {
    let half = size / 2;
    let mut out = vec![0.0; channels * half * half];
    let mut arg = vec![0usize; out.len()];
    for c in 0..channels {
        for y in 0..half {
            for x in 0..half {
                let mut best = usize::MAX;
                let mut best_v = f64::NEG_INFINITY;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let idx = (c * size + 2 * y + dy) * size + 2 * x + dx;
                    if input[idx] > best_v {
                        best_v = input[idx];
                        best = idx;
                    }
                }
                let o = (c * half + y) * half + x;
                out[o] = best_v;
                arg[o] = best;
            }
        }
    }
    (out, arg)
}

impl BackboneModel {
    /// He-normal convolution kernels, scaled-normal head, zero biases.
    pub fn new(config: ArchConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::zeros(&config);
        for layer in &mut params.convs {
            let std = (2.0 / (layer.in_channels * K * K) as f64).sqrt();
            let dist = Normal::new(0.0, std).expect("finite std");
            layer.weight.iter_mut().for_each(|w| *w = dist.sample(&mut rng));
        }
        if let Some(last) = params.convs.last_mut() {
            last.bias.iter_mut().for_each(|b| *b = LAST_BIAS_INIT);
        }
        let dist = Normal::new(0.0, (1.0 / config.filters as f64).sqrt()).expect("finite std");
        params.head_weight.iter_mut().for_each(|w| *w = dist.sample(&mut rng));
        Ok(BackboneModel { config, params })
    }

    pub fn zeros(config: ArchConfig) -> Result<Self> {
        config.validate()?;
        let params = Params::zeros(&config);
        Ok(BackboneModel { config, params })
    }

    fn check_input(&self, img: &Raster) -> Result<()> {
        let c = &self.config;
        if img.channels != c.in_channels || img.height != c.image_size || img.width != c.image_size {
            return Err(Error::ShapeMismatch {
                context: "backbone input",
                expected: format!("{}x{}x{}", c.in_channels, c.image_size, c.image_size),
                actual: format!("{}x{}x{}", img.channels, img.height, img.width),
            });
        }
        Ok(())
    }

    fn forward_one(&self, img: &Raster) -> ImageCache {
        let mut size = self.config.image_size;
        let (mean, std) = (self.config.input_mean, self.config.input_std);
        let mut x: Vec<f64> = img.data.iter().map(|v| (v - mean) / std).collect();
        let last = self.params.convs.len() - 1;
        let mut layers = Vec::with_capacity(self.params.convs.len());
        for (l, conv) in self.params.convs.iter().enumerate() {
            let mut pre = vec![0.0; conv.out_channels * size * size];
            conv3x3_forward(&x, size, conv, &mut pre);
            let act: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
            if l < last {
                let (pooled, arg) = maxpool2(&act, conv.out_channels, size);
                layers.push(LayerCache {
                    input: std::mem::replace(&mut x, pooled),
                    pre,
                    pool_argmax: Some(arg),
                    size,
                });
                size /= 2;
            } else {
                layers.push(LayerCache {
                    input: std::mem::replace(&mut x, act),
                    pre,
                    pool_argmax: None,
                    size,
                });
            }
        }
        let f = self.config.filters;
        let hw = (size * size) as f64;
        let pooled = (0..f)
            .map(|j| x[j * size * size..(j + 1) * size * size].iter().sum::<f64>() / hw)
            .collect();
        ImageCache { layers, pooled }
    }

    /// Runs the network, returning last-layer feature maps, logits and the
    /// activations needed for [`BackboneModel::backward`].
    pub fn forward_cached(&self, images: &[&Raster]) -> Result<(FeatureMaps, Array2<f64>, ForwardCache)> {
        for img in images {
            self.check_input(img)?;
        }
        let (n, f, c) = (images.len(), self.config.filters, self.config.classes);
        let s = self.config.map_size();
        let mut fm = Array4::zeros((n, f, s, s));
        let mut logits = Array2::zeros((n, c));
        let mut caches = Vec::with_capacity(n);
        for (i, img) in images.iter().enumerate() {
            let cache = self.forward_one(img);
            let last = cache.layers.last().unwrap();
            for (v, p) in fm.slice_mut(ndarray::s![i, .., .., ..]).iter_mut().zip(&last.pre) {
                *v = p.max(0.0);
            }
            for k in 0..c {
                let w = &self.params.head_weight[k * f..(k + 1) * f];
                logits[[i, k]] = self.params.head_bias[k] + w.iter().zip(&cache.pooled).map(|(a, b)| a * b).sum::<f64>();
            }
            caches.push(cache);
        }
        Ok((FeatureMaps(fm), logits, ForwardCache { images: caches }))
    }

    /// Inference-only forward pass; evaluates in chunks so intermediate
    /// activations of large image lists are not all held at once.
    pub fn forward(&self, images: &[&Raster]) -> Result<(FeatureMaps, Array2<f64>)> {
        const CHUNK: usize = 64;
        let s = self.config.map_size();
        let mut fm = Array4::zeros((images.len(), self.config.filters, s, s));
        let mut logits = Array2::zeros((images.len(), self.config.classes));
        for (k, chunk) in images.chunks(CHUNK).enumerate() {
            let (f, l, _) = self.forward_cached(chunk)?;
            let lo = k * CHUNK;
            let hi = lo + chunk.len();
            fm.slice_mut(ndarray::s![lo..hi, .., .., ..]).assign(&f.0);
            logits.slice_mut(ndarray::s![lo..hi, ..]).assign(&l);
        }
        Ok((FeatureMaps(fm), logits))
    }

    pub fn feature_maps(&self, images: &[&Raster]) -> Result<FeatureMaps> {
        Ok(self.forward(images)?.0)
    }

    /// Arg-max class per image.
    pub fn predict(&self, images: &[&Raster]) -> Result<Vec<usize>> {
        let (_, logits) = self.forward(images)?;
        Ok(logits
            .rows()
            .into_iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (k, &v)| if v > best.1 { (k, v) } else { best })
                    .0
            })
            .collect())
    }

    /// Backpropagates gradients given w.r.t. the feature maps and/or logits.
    pub fn backward(&self, cache: &ForwardCache, d_maps: Option<&Array4<f64>>, d_logits: Option<&Array2<f64>>) -> Params {
        let mut grad = self.params.zeros_like();
        let f = self.config.filters;
        let c = self.config.classes;
        let s = self.config.map_size();
        let hw = s * s;
        for (n, ic) in cache.images.iter().enumerate() {
            let mut d_act = vec![0.0; f * hw];
            if let Some(dm) = d_maps {
                for (a, b) in d_act.iter_mut().zip(dm.slice(ndarray::s![n, .., .., ..]).iter()) {
                    *a += b;
                }
            }
            if let Some(dl) = d_logits {
                let mut d_pooled = vec![0.0; f];
                for k in 0..c {
                    let g = dl[[n, k]];
                    if g == 0.0 {
                        continue;
                    }
                    grad.head_bias[k] += g;
                    for j in 0..f {
                        grad.head_weight[k * f + j] += g * ic.pooled[j];
                        d_pooled[j] += g * self.params.head_weight[k * f + j];
                    }
                }
                for j in 0..f {
                    let g = d_pooled[j] / hw as f64;
                    d_act[j * hw..(j + 1) * hw].iter_mut().for_each(|v| *v += g);
                }
            }
            for (l, lc) in ic.layers.iter().enumerate().rev() {
                let mut d_pre = match &lc.pool_argmax {
                    None => d_act,
                    Some(arg) => {
                        let mut d = vec![0.0; lc.pre.len()];
                        for (o, &src) in arg.iter().enumerate() {
                            d[src] += d_act[o];
                        }
                        d
                    }
                };
                for (d, p) in d_pre.iter_mut().zip(&lc.pre) {
                    if *p <= 0.0 {
                        *d = 0.0;
                    }
                }
                d_act = conv3x3_backward(&lc.input, lc.size, &self.params.convs[l], &d_pre, &mut grad.convs[l]);
            }
        }
        grad
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            arch: self.config.clone(),
            params: self
                .params
                .blocks()
                .into_iter()
                .map(|(name, shape, data)| NamedArray {
                    name,
                    shape,
                    data: data.to_vec(),
                })
                .collect(),
        };
        let text = serde_json::to_string(&ck)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::parse(
                path.display().to_string(),
                1,
                format!("unsupported checkpoint {} v{}", ck.format, ck.version),
            ));
        }
        let mut model = BackboneModel::zeros(ck.arch)?;
        let expected: Vec<(String, Vec<usize>)> =
            model.params.blocks().into_iter().map(|(n, s, _)| (n, s)).collect();
        if expected.len() != ck.params.len() {
            return Err(Error::ShapeMismatch {
                context: "checkpoint parameter count",
                expected: expected.len().to_string(),
                actual: ck.params.len().to_string(),
            });
        }
        for ((dst, (name, shape)), arr) in model.params.blocks_mut().into_iter().zip(expected).zip(ck.params) {
            if arr.name != name || arr.shape != shape || arr.data.len() != dst.len() {
                return Err(Error::ShapeMismatch {
                    context: "checkpoint parameter",
                    expected: format!("{name} {shape:?}"),
                    actual: format!("{} {:?} ({} values)", arr.name, arr.shape, arr.data.len()),
                });
            }
            dst.copy_from_slice(&arr.data);
        }
        Ok(model)
    }
}

pub const CHECKPOINT_FORMAT: &str = "nesy-backbone";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct NamedArray {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    arch: ArchConfig,
    params: Vec<NamedArray>,
}

/// `Σ_{h,w} |f| / (H·W)` per image and filter.
pub fn mean_abs_norm(fm: &FeatureMaps) -> Array2<f64> {
    let (n, f, h, w) = fm.dims();
    let area = (h * w) as f64;
    Array2::from_shape_fn((n, f), |(i, j)| fm.map(i, j).iter().map(|v| v.abs()).sum::<f64>() / area)
}

/// `sqrt(Σ_{h,w} f²)` per image and filter.
pub fn l2_norm(fm: &FeatureMaps) -> Array2<f64> {
    let (n, f, _, _) = fm.dims();
    Array2::from_shape_fn((n, f), |(i, j)| fm.map(i, j).iter().map(|v| v * v).sum::<f64>().sqrt())
}

/// Class-weighted mean of `-log softmax(logits)[label]`, normalised by the
/// sum of the per-sample weights, with its gradient w.r.t. the logits.
pub fn cross_entropy(logits: &Array2<f64>, labels: &[usize], class_weights: &[f64]) -> Result<(f64, Array2<f64>)> {
    let (n, c) = logits.dim();
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            context: "cross_entropy labels",
            expected: n.to_string(),
            actual: labels.len().to_string(),
        });
    }
    if class_weights.len() != c {
        return Err(Error::ShapeMismatch {
            context: "cross_entropy class weights",
            expected: c.to_string(),
            actual: class_weights.len().to_string(),
        });
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range for {c} classes")));
    }
    let total_w: f64 = labels.iter().map(|&l| class_weights[l]).sum();
    let mut loss = 0.0;
    let mut grad = Array2::zeros((n, c));
    for (i, &label) in labels.iter().enumerate() {
        let row = logits.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        let log_z = m + z.ln();
        let w = class_weights[label] / total_w;
        loss += w * (log_z - row[label]);
        for k in 0..c {
            let p = (row[k] - log_z).exp();
            grad[[i, k]] = w * (p - if k == label { 1.0 } else { 0.0 });
        }
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn maps_from(values: &[[f64; 2]; 2]) -> FeatureMaps {
        let a = arr2(values);
        FeatureMaps(a.into_shape_with_order((1, 1, 2, 2)).unwrap())
    }

    #[test]
    fn norms_on_hand_examples() {
        assert_eq!(mean_abs_norm(&maps_from(&[[1.0, -1.0], [1.0, -1.0]]))[[0, 0]], 1.0);
        assert_eq!(mean_abs_norm(&maps_from(&[[0.0, 0.0], [0.0, 0.0]]))[[0, 0]], 0.0);
        assert_eq!(mean_abs_norm(&maps_from(&[[3.0, 4.0], [0.0, 0.0]]))[[0, 0]], 1.75);
        assert_eq!(l2_norm(&maps_from(&[[3.0, 4.0], [0.0, 0.0]]))[[0, 0]], 5.0);
        assert_eq!(l2_norm(&maps_from(&[[0.0, 0.0], [0.0, 0.0]]))[[0, 0]], 0.0);
        assert!((l2_norm(&maps_from(&[[6.0, 8.0], [0.0, 0.0]]))[[0, 0]] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_logits_give_log_c() {
        let logits = Array2::zeros((4, 3));
        let (loss, _) = cross_entropy(&logits, &[0, 1, 2, 0], &[1.0, 1.0, 1.0]).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-12);
        let (loss, _) = cross_entropy(&logits, &[0, 1, 2, 0], &[0.5, 2.0, 1.0]).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_margin_drives_loss_to_zero() {
        let mut prev = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 50.0] {
            let logits = arr2(&[[margin, 0.0, 0.0]]);
            let (loss, _) = cross_entropy(&logits, &[0], &[1.0; 3]).unwrap();
            assert!(loss < prev);
            prev = loss;
        }
        assert!(prev < 1e-20);
    }

    #[test]
    fn cross_entropy_matches_direct_formula() {
        let logits = arr2(&[[0.3, -1.2, 2.0], [1.5, 0.1, -0.7]]);
        let labels = [2, 0];
        let weights = [1.0, 2.0, 0.5];
        let direct = |row: [f64; 3], y: usize| {
            let s: f64 = row.iter().map(|v| v.exp()).sum();
            -(row[y].exp() / s).ln()
        };
        let l0 = direct([0.3, -1.2, 2.0], 2);
        let l1 = direct([1.5, 0.1, -0.7], 0);
        let expected = (0.5 * l0 + 1.0 * l1) / 1.5;
        let (loss, grad) = cross_entropy(&logits, &labels, &weights).unwrap();
        assert!((loss - expected).abs() < 1e-8);
        let h = 1e-6;
        for i in 0..2 {
            for k in 0..3 {
                let mut lp = logits.clone();
                lp[[i, k]] += h;
                let mut lm = logits.clone();
                lm[[i, k]] -= h;
                let fd = (cross_entropy(&lp, &labels, &weights).unwrap().0
                    - cross_entropy(&lm, &labels, &weights).unwrap().0)
                    / (2.0 * h);
                assert!((fd - grad[[i, k]]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn cross_entropy_rejects_non_finite() {
        let logits = arr2(&[[f64::NAN, 0.0]]);
        assert!(matches!(cross_entropy(&logits, &[0], &[1.0, 1.0]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn zero_model_gives_zero_maps() {
        let cfg = ArchConfig::reference(16, 4, 2);
        let model = BackboneModel::zeros(cfg).unwrap();
        let mut img = Raster::zeros(3, 16, 16);
        img.data.iter_mut().enumerate().for_each(|(i, v)| *v = (i % 7) as f64 / 7.0);
        let (fm, logits) = model.forward(&[&img]).unwrap();
        assert!(fm.0.iter().all(|&v| v == 0.0));
        assert!(logits.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch_names_dimensions() {
        let model = BackboneModel::new(ArchConfig::reference(16, 4, 2), 0).unwrap();
        let img = Raster::zeros(3, 8, 8);
        let err = model.forward(&[&img]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("3x16x16") && msg.contains("3x8x8"), "{msg}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = BackboneModel::new(ArchConfig::reference(16, 4, 3), 11).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("model.json");
        model.save(&p).unwrap();
        let back = BackboneModel::load(&p).unwrap();
        assert_eq!(model, back);
    }

    #[test]
    fn same_seed_same_model() {
        let a = BackboneModel::new(ArchConfig::reference(16, 4, 3), 3).unwrap();
        let b = BackboneModel::new(ArchConfig::reference(16, 4, 3), 3).unwrap();
        assert_eq!(a, b);
    }
}
