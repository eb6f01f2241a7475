//! Reconstruction MSE, Fréchet distance over a pluggable feature extractor,
//! the discriminator training-curve probe and segmentation ARI.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::hex;
use crate::error::{invalid, shape_err, Error, Result};
use crate::image::{batch_tensor, Image};
use crate::nn::{Conv2d, Init, Linear};
use crate::rng::RandomSource;
use crate::tensor::{no_grad, Adam, ParamStore, Tensor, Vars};

/// Per-image sum of squared errors over pixels and channels, averaged over
/// images.
pub fn mse_metric(originals: &[Image], reconstructions: &[Image]) -> Result<f64> {
    if originals.len() != reconstructions.len() || originals.is_empty() {
        return invalid(format!(
            "unpaired sets: {} originals, {} reconstructions",
            originals.len(),
            reconstructions.len()
        ));
    }
    let mut total = 0.0;
    for (a, b) in originals.iter().zip(reconstructions) {
        if (a.height(), a.width()) != (b.height(), b.width()) {
            return shape_err(format!(
                "image {}x{} vs {}x{}",
                a.height(),
                a.width(),
                b.height(),
                b.width()
            ));
        }
        total += a.pixels().iter().zip(b.pixels()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    }
    Ok(total / originals.len() as f64)
}

pub const FRECHET_JITTER: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianSummary {
    pub mean: Vec<f64>,
    /// Row-major `F×F` covariance.
    pub covariance: Vec<f64>,
    pub count: usize,
}

impl GaussianSummary {
    /// Sample mean and unbiased covariance.
    pub fn fit(features: &[Vec<f64>]) -> Result<Self> {
        let n = features.len();
        if n < 2 {
            return invalid(format!("need at least 2 feature vectors, got {n}"));
        }
        let f = features[0].len();
        if f == 0 || features.iter().any(|x| x.len() != f) {
            return shape_err("ragged or empty feature vectors");
        }
        if features.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature vectors".into()));
        }
        let mut mean = vec![0.0; f];
        for x in features {
            for (m, v) in mean.iter_mut().zip(x) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = vec![0.0; f * f];
        for x in features {
            for i in 0..f {
                let di = x[i] - mean[i];
                for j in i..f {
                    cov[i * f + j] += di * (x[j] - mean[j]);
                }
            }
        }
        for i in 0..f {
            for j in i..f {
                let c = cov[i * f + j] / (n - 1) as f64;
                cov[i * f + j] = c;
                cov[j * f + i] = c;
            }
        }
        Ok(GaussianSummary {
            mean,
            covariance: cov,
            count: n,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn jittered(&self) -> DMatrix<f64> {
        let f = self.dim();
        DMatrix::from_row_slice(f, f, &self.covariance) + DMatrix::identity(f, f) * FRECHET_JITTER
    }
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `‖μa−μb‖² + Tr(Σa + Σb − 2(Σa Σb)^{1/2})` with both covariances jittered,
/// using `Tr((Σa Σb)^{1/2}) = Tr((Sa Σb Sa)^{1/2})` for `Sa = Σa^{1/2}`.
pub fn frechet_distance(a: &GaussianSummary, b: &GaussianSummary) -> Result<f64> {
    if a.dim() != b.dim() || a.covariance.len() != a.dim() * a.dim() || b.covariance.len() != b.dim() * b.dim() {
        return shape_err(format!("summaries over {} and {} features", a.dim(), b.dim()));
    }
    let finite = |s: &GaussianSummary| s.mean.iter().chain(&s.covariance).all(|v| v.is_finite());
    if !finite(a) || !finite(b) {
        return Err(Error::NonFinite("Gaussian summary".into()));
    }
    let (ca, cb) = (a.jittered(), b.jittered());
    let sa = sqrt_psd(&ca);
    let cross = sqrt_psd(&(&sa * &cb * &sa)).trace();
    let d2: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let value = d2 + ca.trace() + cb.trace() - 2.0 * cross;
    if !value.is_finite() {
        return Err(Error::NonFinite("Fréchet distance".into()));
    }
    Ok(value.max(0.0))
}

/// Deterministic image embedding with a fixed output width.
pub trait FeatureExtractor {
    fn name(&self) -> &str;
    /// Identifies architecture and weights; reports embed it.
    fn hash(&self) -> String;
    fn dim(&self) -> usize;
    fn extract(&self, images: &[Image]) -> Result<Vec<Vec<f64>>>;
}

/// Small convolutional embedder with fixed pseudo-random weights, for
/// offline use. Inputs are brought to 32×32 first.
pub struct ConvEmbedder {
    store: ParamStore,
    convs: Vec<Conv2d>,
    hash: String,
}

pub const EMBEDDER_SEED: u64 = 0x51_07_F1_D0;
const EMBED_SIZE: usize = 32;
const EMBED_CHANNELS: [usize; 4] = [3, 16, 32, 32];

impl ConvEmbedder {
    pub fn new() -> Self {
        let mut store = ParamStore::new();
        let mut rng = RandomSource::seed(EMBEDDER_SEED);
        let mut init = Init::new(&mut store, &mut rng, "embedder");
        let convs = EMBED_CHANNELS
            .windows(2)
            .enumerate()
            .map(|(i, c)| Conv2d::new(&mut init, &format!("conv{i}"), c[0], c[1], 3, 1, 1))
            .collect();
        let mut h = Sha256::new();
        h.update(format!("conv-embedder-v1 {EMBED_SIZE} {EMBED_CHANNELS:?}"));
        for e in store.entries() {
            h.update(e.name.as_bytes());
            for v in e.data.iter() {
                h.update(v.to_le_bytes());
            }
        }
        ConvEmbedder {
            store,
            convs,
            hash: hex(&h.finalize()),
        }
    }

    fn prepare(images: &[Image]) -> Result<Tensor> {
        let mut resized = Vec::with_capacity(images.len());
        let mut pool = None;
        for im in images {
            let (h, w) = (im.height(), im.width());
            if h == w && h >= EMBED_SIZE && h % EMBED_SIZE == 0 {
                pool = Some(h / EMBED_SIZE);
                resized.push(im.clone());
            } else {
                resized.push(im.resize_nearest(EMBED_SIZE, EMBED_SIZE));
            }
        }
        let x = batch_tensor(&resized)?;
        Ok(match pool {
            Some(k) if k > 1 => x.avg_pool2d(k, k, 0, false),
            _ => x,
        })
    }
}

impl Default for ConvEmbedder {
    fn default() -> Self {
        Self::new()
    }
}

impl FeatureExtractor for ConvEmbedder {
    fn name(&self) -> &str {
        "conv-embedder-v1"
    }

    fn hash(&self) -> String {
        self.hash.clone()
    }

    fn dim(&self) -> usize {
        2 * EMBED_CHANNELS[EMBED_CHANNELS.len() - 1]
    }

    fn extract(&self, images: &[Image]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(images.len());
        let v = self.store.bind_frozen();
        for chunk in images.chunks(64) {
            let x = Self::prepare(chunk)?;
            let feats = no_grad(|| {
                let mut h = x;
                for (i, c) in self.convs.iter().enumerate() {
                    h = c.forward(&v, &h).relu();
                    if i + 1 < self.convs.len() {
                        h = h.avg_pool2d(2, 2, 0, false);
                    }
                }
                let (b, c, hh, ww) = (h.dim(0), h.dim(1), h.dim(2), h.dim(3));
                let mean = h.reshape(&[b, c, hh * ww]).mean_axis(2, false);
                let max = h.max_pool2d(hh, hh, 0).reshape(&[b, c]);
                Tensor::cat(&[mean, max], 1)
            });
            let d = feats.dim(1);
            out.extend(feats.data().chunks(d).map(|r| r.to_vec()));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidReport {
    pub value: f64,
    pub n_real: usize,
    pub n_generated: usize,
    pub feature_dim: usize,
    pub extractor: String,
    pub extractor_hash: String,
    pub warning: Option<String>,
}

pub fn fid(real: &[Image], generated: &[Image], extractor: &dyn FeatureExtractor) -> Result<FidReport> {
    if real.is_empty() || generated.is_empty() {
        return invalid("FID needs non-empty image sets");
    }
    let f = extractor.dim();
    let warning = (real.len().min(generated.len()) < f).then(|| {
        format!(
            "{} real / {} generated samples for {f} features: covariance is rank deficient and only regularized by jitter",
            real.len(),
            generated.len()
        )
    });
    if let Some(w) = &warning {
        log::warn!("{w}");
    }
    let a = GaussianSummary::fit(&extractor.extract(real)?)?;
    let b = GaussianSummary::fit(&extractor.extract(generated)?)?;
    Ok(FidReport {
        value: frechet_distance(&a, &b)?,
        n_real: real.len(),
        n_generated: generated.len(),
        feature_dim: f,
        extractor: extractor.name().to_string(),
        extractor_hash: extractor.hash(),
        warning,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Held-out fraction of each class.
    pub holdout: f64,
    pub eval_every: usize,
    /// Inputs are resized to this square size.
    pub input_size: usize,
    pub channels: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            steps: 500,
            batch_size: 16,
            lr: 2e-3,
            holdout: 0.5,
            eval_every: 10,
            input_size: 32,
            channels: 8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbePoint {
    pub step: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub curve: Vec<ProbePoint>,
    /// First evaluated step with held-out accuracy above 0.9.
    pub steps_to_90: Option<usize>,
    pub degenerate: bool,
    pub n_train: usize,
    pub n_heldout: usize,
    pub seed: u64,
}

struct Discriminator {
    store: ParamStore,
    c1: Conv2d,
    c2: Conv2d,
    head: Linear,
}

impl Discriminator {
    fn new(channels: usize, rng: &mut RandomSource) -> Self {
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, rng, "disc");
        let c1 = Conv2d::new(&mut init, "conv1", 3, channels, 3, 2, 1);
        let c2 = Conv2d::new(&mut init, "conv2", channels, 2 * channels, 3, 2, 1);
        let head = Linear::new(&mut init, "head", 2 * channels, 2, true);
        Discriminator { store, c1, c2, head }
    }

    fn logits(&self, v: &Vars, x: &Tensor) -> Tensor {
        let h = self.c2.forward(v, &self.c1.forward(v, x).relu()).relu();
        let (b, c) = (h.dim(0), h.dim(1));
        let pooled = h.reshape(&[b, c, h.dim(2) * h.dim(3)]).mean_axis(2, false);
        self.head.forward(v, &pooled)
    }
}

fn same_image(a: &Image, b: &Image) -> bool {
    a.height() == b.height() && a.width() == b.width() && a.pixels() == b.pixels()
}

/// Flags sets sharing an identical image, or a set whose images are all
/// identical.
pub fn degenerate_sets(real: &[Image], generated: &[Image]) -> bool {
    let constant = |s: &[Image]| s.len() > 1 && s.iter().all(|x| same_image(x, &s[0]));
    constant(real) || constant(generated) || real.iter().any(|r| generated.iter().any(|g| same_image(r, g)))
}

/// Trains a small CNN to tell `real` (label 0) from `generated` (label 1)
/// and records the held-out accuracy curve.
pub fn discriminator_probe(real: &[Image], generated: &[Image], cfg: &ProbeConfig, seed: u64) -> Result<ProbeReport> {
    if real.len() != generated.len() || real.len() < 4 {
        return invalid(format!(
            "probe needs balanced sets of at least 4 images, got {} and {}",
            real.len(),
            generated.len()
        ));
    }
    if cfg.batch_size == 0 || cfg.eval_every == 0 || !(0.0..1.0).contains(&cfg.holdout) || cfg.holdout <= 0.0 {
        return invalid(format!("probe configuration {cfg:?}"));
    }
    let degenerate = degenerate_sets(real, generated);
    if degenerate {
        log::warn!("discriminator probe on degenerate sets");
    }
    let size = cfg.input_size;
    let prep = |s: &[Image]| -> Vec<Image> { s.iter().map(|im| im.resize_nearest(size, size)).collect() };
    let (real, generated) = (prep(real), prep(generated));
    let mut rng = RandomSource::stream(seed, 0);
    let n = real.len();
    let n_held = ((n as f64 * cfg.holdout).round() as usize).clamp(1, n - 1);
    let mut train = Vec::new();
    let mut held = Vec::new();
    for (label, set) in [(0usize, &real), (1, &generated)] {
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        for (k, &i) in order.iter().enumerate() {
            let item = (&set[i], label);
            if k < n_held {
                held.push(item);
            } else {
                train.push(item);
            }
        }
    }
    let held_x = batch_tensor(&held.iter().map(|(im, _)| (*im).clone()).collect::<Vec<_>>())?;
    let held_y: Vec<usize> = held.iter().map(|(_, l)| *l).collect();
    let mut model = Discriminator::new(cfg.channels, &mut RandomSource::stream(seed, 1));
    let mut opt = Adam::new(&model.store);
    let mut curve = Vec::new();
    let mut steps_to_90 = None;
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    for step in 1..=cfg.steps {
        let mut idx = Vec::with_capacity(cfg.batch_size);
        while idx.len() < cfg.batch_size {
            if cursor == order.len() {
                order = (0..train.len()).collect();
                rng.shuffle(&mut order);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let x = batch_tensor(&idx.iter().map(|&i| train[i].0.clone()).collect::<Vec<_>>())?;
        let y: Vec<usize> = idx.iter().map(|&i| train[i].1).collect();
        let vars = model.store.bind();
        let loss = model.logits(&vars, &x).log_softmax_last().gather_last(&y).mean_all().mul_scalar(-1.0);
        let grads = vars.grads(&loss.backward());
        let lr = cfg.lr;
        opt.update(&mut model.store, &grads, |_| lr);
        if step % cfg.eval_every == 0 || step == cfg.steps {
            let v = model.store.bind_frozen();
            let logits = no_grad(|| model.logits(&v, &held_x));
            let correct = logits
                .data()
                .chunks(2)
                .zip(&held_y)
                .filter(|(l, &y)| usize::from(l[1] > l[0]) == y)
                .count();
            let accuracy = correct as f64 / held_y.len() as f64;
            if accuracy > 0.9 && steps_to_90.is_none() {
                steps_to_90 = Some(step);
            }
            curve.push(ProbePoint {
                step,
                loss: loss.item(),
                accuracy,
            });
        }
    }
    Ok(ProbeReport {
        curve,
        steps_to_90,
        degenerate,
        n_train: train.len(),
        n_heldout: held.len(),
        seed,
    })
}

fn choose2(n: u64) -> f64 {
    (n as f64) * (n as f64 - 1.0) / 2.0
}

/// Adjusted Rand index between two labelings of the same items. Two
/// single-cluster labelings score 1.
pub fn adjusted_rand_index(truth: &[usize], pred: &[usize]) -> Result<f64> {
    if truth.len() != pred.len() || truth.is_empty() {
        return invalid(format!("labelings of {} and {} items", truth.len(), pred.len()));
    }
    let rows = truth.iter().max().map_or(0, |m| m + 1);
    let cols = pred.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![0u64; rows * cols];
    for (&t, &p) in truth.iter().zip(pred) {
        table[t * cols + p] += 1;
    }
    let index: f64 = table.iter().map(|&c| choose2(c)).sum();
    let a: f64 = (0..rows).map(|r| choose2(table[r * cols..(r + 1) * cols].iter().sum())).sum();
    let b: f64 = (0..cols).map(|c| choose2((0..rows).map(|r| table[r * cols + c]).sum())).sum();
    let total = choose2(truth.len() as u64);
    let expected = if total > 0.0 { a * b / total } else { 0.0 };
    let max = (a + b) / 2.0;
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

/// ARI restricted to pixels with a nonzero ground-truth label.
pub fn foreground_ari(truth: &[usize], pred: &[usize]) -> Result<f64> {
    if truth.len() != pred.len() {
        return invalid("labelings differ in length");
    }
    let (t, p): (Vec<usize>, Vec<usize>) = truth.iter().zip(pred).filter(|(&t, _)| t != 0).map(|(&t, &p)| (t, p)).unzip();
    if t.is_empty() {
        return invalid("no foreground pixels");
    }
    adjusted_rand_index(&t, &p)
}

/// Per-pixel argmax slot of token-grid attention maps (`maps[n][t]`)
/// upsampled by nearest neighbour to `size×size`.
pub fn attention_segmentation(maps: &[Vec<f64>], grid: usize, size: usize) -> Result<Vec<usize>> {
    if maps.is_empty() || maps.iter().any(|m| m.len() != grid * grid) || grid == 0 {
        return shape_err(format!("attention maps for a {grid}x{grid} grid"));
    }
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let cell = (y * grid / size) * grid + x * grid / size;
            let mut best = 0;
            for (n, m) in maps.iter().enumerate() {
                if m[cell] > maps[best][cell] {
                    best = n;
                }
            }
            out.push(best);
        }
    }
    Ok(out)
}

/// Pixel labels from instance masks: 0 for background, `i+1` for mask `i`.
pub fn label_map(masks: &[Vec<bool>], pixels: usize) -> Result<Vec<usize>> {
    let mut labels = vec![0; pixels];
    for (i, m) in masks.iter().enumerate() {
        if m.len() != pixels {
            return shape_err("mask size");
        }
        for (l, _) in labels.iter_mut().zip(m).filter(|(_, &v)| v) {
            *l = i + 1;
        }
    }
    Ok(labels)
}

/// One record of a metric report file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    pub n_real: Option<usize>,
    pub n_generated: Option<usize>,
    pub extractor_hash: Option<String>,
    pub seed: Option<u64>,
    pub note: Option<String>,
}

impl MetricReport {
    pub fn new(metric: &str, value: f64) -> Self {
        MetricReport {
            metric: metric.to_string(),
            value,
            n_real: None,
            n_generated: None,
            extractor_hash: None,
            seed: None,
            note: None,
        }
    }

    pub fn of_fid(r: &FidReport, seed: Option<u64>) -> Self {
        MetricReport {
            metric: "fid".into(),
            value: r.value,
            n_real: Some(r.n_real),
            n_generated: Some(r.n_generated),
            extractor_hash: Some(r.extractor_hash.clone()),
            seed,
            note: r.warning.clone(),
        }
    }
}

pub fn write_reports(path: &Path, reports: &[MetricReport]) -> Result<()> {
    let mut text = String::new();
    for r in reports {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `step,value` lines.
pub fn write_curve(path: &Path, points: &[(usize, f64)]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "step,value").map_err(|e| Error::io(path, e))?;
    for (s, v) in points {
        writeln!(f, "{s},{v}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
