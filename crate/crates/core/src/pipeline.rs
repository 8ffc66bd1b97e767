//! Dataset ingestion, image-to-point-cloud conversion, the training and
//! evaluation loops, the post-training exact batch-statistics pass, and
//! checkpoint persistence.

use crate::autodiff::{adam_step, AdamState, Tape};
use crate::conv2d::BnStats;
use crate::error::{Error, Result};
use crate::fourier::FeatureMap;
use crate::model::{BnMode, Model, ModelConfig};
use crate::scalar::Scalar;
use num_complex::Complex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};
use std::path::Path;

/// Row counts of the reference rotated-digits dataset splits; used for
/// sanity warnings when loading real data.
pub const MNIST_ROT_TRAIN_ROWS: usize = 12_000;
pub const MNIST_ROT_TEST_ROWS: usize = 50_000;

/// A set of same-sized grayscale images with class labels.
#[derive(Debug, Clone)]
pub struct LabeledImages<T> {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> LabeledImages<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[T] {
        let n = self.width * self.height;
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let n = self.width * self.height;
        let mut pixels = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Self {
            width: self.width,
            height: self.height,
            pixels,
            labels,
        }
    }
}

/// Parse the whitespace-separated text format: one row per image, 784 pixel
/// intensities followed by the class label (785 decimal values).
pub fn load_amat<T: Scalar>(path: &Path) -> Result<LabeledImages<T>> {
    let text = std::fs::read_to_string(path)?;
    parse_amat(&text)
}

pub fn parse_amat<T: Scalar>(text: &str) -> Result<LabeledImages<T>> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    let mut rows = 0usize;
    for (row, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut vals = Vec::with_capacity(785);
        for tok in line.split_whitespace() {
            let v: f64 = tok.parse().map_err(|e| Error::Parse {
                row,
                msg: format!("bad decimal literal '{tok}': {e}"),
            })?;
            vals.push(v);
        }
        if vals.len() != 785 {
            return Err(Error::Parse {
                row,
                msg: format!("expected 785 values per row, found {}", vals.len()),
            });
        }
        let label = vals[784];
        if label < 0.0 || label > 9.0 || label.fract() != 0.0 {
            return Err(Error::Parse {
                row,
                msg: format!("label must be an integer in 0..=9, got {label}"),
            });
        }
        pixels.extend(vals[..784].iter().map(|&v| T::of(v)));
        labels.push(label as usize);
        rows += 1;
    }
    let _ = rows;
    Ok(LabeledImages {
        width: 28,
        height: 28,
        pixels,
        labels,
    })
}

/// Grid coordinates for a width×height image, centered on the image center
/// with spacing 1 (28×28 spans -13.5..13.5), plus intrinsic lattice indices.
pub fn image_grid<T: Scalar>(width: usize, height: usize) -> (Vec<[T; 2]>, Vec<[i64; 2]>) {
    let cx = (width as f64 - 1.0) / 2.0;
    let cy = (height as f64 - 1.0) / 2.0;
    let mut coords = Vec::with_capacity(width * height);
    let mut lattice = Vec::with_capacity(width * height);
    for row in 0..height {
        for col in 0..width {
            let lx = col as i64;
            let ly = (height - 1 - row) as i64;
            coords.push([T::of(lx as f64 - cx), T::of(ly as f64 - cy)]);
            lattice.push([lx, ly]);
        }
    }
    (coords, lattice)
}

/// Single image as a point cloud: one point per pixel, a single channel with
/// band limit 0 and z_0 set to the pixel value.
pub fn image_to_pointcloud<T: Scalar>(
    image: &[T],
    width: usize,
    height: usize,
) -> Result<crate::conv2d::PointCloud2D<T>> {
    if image.len() != width * height {
        return Err(Error::DimensionMismatch(format!(
            "{} pixels for a {width}x{height} grid",
            image.len()
        )));
    }
    let (coords, lattice) = image_grid::<T>(width, height);
    let features = images_to_features(image, 1, width * height);
    crate::conv2d::PointCloud2D::new(coords, Some(lattice), features)
}

/// Batched feature map over the shared image grid.
pub fn images_to_features<T: Scalar>(pixels: &[T], batch: usize, points: usize) -> FeatureMap<T> {
    let mut f = FeatureMap::zeros(batch, points, 1, 0);
    for (z, &v) in f.data_mut().iter_mut().zip(pixels.iter()) {
        *z = Complex::new(v, T::zero());
    }
    f
}

// ---------------------------------------------------------------------------
// Synthetic rotated-glyph dataset
// ---------------------------------------------------------------------------

/// Procedurally generated 10-class dataset of rotated glyphs on a 28×28
/// grid. The classes are distinguished by shape topology (rings, bars,
/// crosses, arcs, dot patterns), each sample drawn at a uniformly random
/// global rotation with center jitter, so the task requires
/// rotation-insensitive recognition while staying fully offline and seeded.
pub fn synthetic_glyphs<T: Scalar>(count: usize, seed: u64) -> LabeledImages<T> {
    let (w, h) = (28usize, 28usize);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = Vec::with_capacity(count * w * h);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let label = i % 10;
        let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let jx: f64 = rng.random_range(-1.5..1.5);
        let jy: f64 = rng.random_range(-1.5..1.5);
        let img = render_glyph(label, theta, jx, jy, &mut rng);
        pixels.extend(img.into_iter().map(T::of));
        labels.push(label);
    }
    LabeledImages {
        width: w,
        height: h,
        pixels,
        labels,
    }
}

enum Prim {
    Segment([f64; 2], [f64; 2], f64),
    Ring(f64, f64, f64, f64), // cx, cy, radius, width
    Arc(f64, f64),            // radius, half-span (centered on +x before rotation)
    Dot(f64, f64, f64),
}

fn render_glyph(label: usize, theta: f64, jx: f64, jy: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let prims: Vec<Prim> = match label {
        0 => vec![Prim::Ring(0.0, 0.0, 6.0, 1.1)],
        1 => vec![Prim::Segment([-6.5, 0.0], [6.5, 0.0], 1.0)],
        2 => vec![
            Prim::Segment([-6.0, -3.0], [6.0, -3.0], 1.0),
            Prim::Segment([-6.0, 3.0], [6.0, 3.0], 1.0),
        ],
        3 => vec![
            Prim::Segment([-6.5, 0.0], [6.5, 0.0], 1.0),
            Prim::Segment([0.0, -6.5], [0.0, 6.5], 1.0),
        ],
        4 => (0..3)
            .map(|a| {
                let phi = a as f64 * std::f64::consts::TAU / 3.0;
                Prim::Segment([0.0, 0.0], [7.0 * phi.cos(), 7.0 * phi.sin()], 1.0)
            })
            .collect(),
        5 => vec![
            Prim::Ring(0.0, 0.0, 6.0, 1.1),
            Prim::Dot(0.0, 0.0, 1.6),
        ],
        6 => vec![
            Prim::Segment([-6.0, 0.0], [4.0, 0.0], 1.0),
            Prim::Dot(6.0, 0.0, 1.8),
        ],
        7 => vec![Prim::Arc(6.0, std::f64::consts::FRAC_PI_2)],
        8 => vec![
            Prim::Ring(0.0, 0.0, 3.2, 1.0),
            Prim::Ring(0.0, 0.0, 7.0, 1.0),
        ],
        _ => (0..3)
            .map(|a| {
                let phi = a as f64 * std::f64::consts::TAU / 3.0;
                Prim::Dot(5.0 * phi.cos(), 5.0 * phi.sin(), 1.7)
            })
            .collect(),
    };

    let (s, c) = theta.sin_cos();
    let rot = |p: [f64; 2]| [c * p[0] - s * p[1] + jx, s * p[0] + c * p[1] + jy];
    let mut img = vec![0.0f64; 28 * 28];
    for row in 0..28usize {
        for col in 0..28usize {
            // matches the point-cloud convention: y grows upward
            let x = col as f64 - 13.5;
            let y = (27 - row) as f64 - 13.5;
            let mut v: f64 = 0.0;
            for p in &prims {
                v += match p {
                    Prim::Segment(a, b, w) => {
                        let (ra, rb) = (rot(*a), rot(*b));
                        let d = dist_to_segment([x, y], ra, rb);
                        (-d * d / (2.0 * w * w)).exp()
                    }
                    Prim::Ring(cx, cy, r, w) => {
                        let ctr = rot([*cx, *cy]);
                        let d = ((x - ctr[0]).powi(2) + (y - ctr[1]).powi(2)).sqrt() - r;
                        (-d * d / (2.0 * w * w)).exp()
                    }
                    Prim::Arc(r, half) => {
                        let px = x - jx;
                        let py = y - jy;
                        let ang = py.atan2(px) - theta;
                        let ang = (ang + std::f64::consts::PI).rem_euclid(std::f64::consts::TAU)
                            - std::f64::consts::PI;
                        if ang.abs() <= *half {
                            let d = (px * px + py * py).sqrt() - r;
                            (-d * d / (2.0 * 1.1f64 * 1.1)).exp()
                        } else {
                            0.0
                        }
                    }
                    Prim::Dot(cx, cy, w) => {
                        let ctr = rot([*cx, *cy]);
                        let d2 = (x - ctr[0]).powi(2) + (y - ctr[1]).powi(2);
                        (-d2 / (2.0 * w * w)).exp()
                    }
                };
            }
            img[row * 28 + col] = v.min(1.0) + rng.random_range(0.0..0.02);
        }
    }
    img
}

fn dist_to_segment(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let q = [a[0] + t * ab[0], a[1] + t * ab[1]];
    ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
}

/// Write a labeled image set in the amat text format.
pub fn write_amat<T: Scalar>(images: &LabeledImages<T>, path: &Path) -> Result<()> {
    let mut out = String::new();
    for i in 0..images.len() {
        let img = images.image(i);
        for v in img {
            out.push_str(&format!("{} ", v.to_f64_()));
        }
        out.push_str(&format!("{}\n", images.labels[i]));
    }
    std::fs::write(path, out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Optimization protocol: Adam with betas (0.9, 0.999) and eps 1e-8, fixed
/// learning rate for the first `decay_after` epochs, then an exponential
/// decay factor per epoch.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub decay: f64,
    pub decay_after: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 64,
            lr: 0.015,
            decay: 0.8,
            decay_after: 16,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Learning rate for a 1-based epoch index.
    pub fn lr_for_epoch(&self, epoch: usize) -> f64 {
        if epoch <= self.decay_after {
            self.lr
        } else {
            self.lr * self.decay.powi((epoch - self.decay_after) as i32)
        }
    }
}

#[derive(Debug, Clone)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub test_error: f64,
}

/// Train the model on labeled images; evaluates the test split after every
/// epoch (using exponentially averaged statistics mid-training) and runs the
/// exact batch-statistics pass when training finishes.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    train_set: &LabeledImages<T>,
    test_set: &LabeledImages<T>,
    cfg: &TrainConfig,
) -> Result<Vec<EpochMetrics>> {
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let (coords, lattice) = image_grid::<T>(train_set.width, train_set.height);
    let geom = model.plan_geometry(&coords, Some(&lattice))?;
    let points = train_set.width * train_set.height;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(&model.store);
    let mut metrics = Vec::with_capacity(cfg.epochs);
    // statistics staleness compounds through the normalization stack, so
    // per-epoch evaluation recomputes exact statistics on a training subset
    let stat_subset: Vec<usize> = (0..train_set.len().min(512)).collect();
    let stat_set = train_set.subset(&stat_subset);

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr_for_epoch(epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut steps = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < cfg.batch_size && steps > 0 {
                break; // drop the trailing partial batch
            }
            let sub = train_set.subset(chunk);
            let input = images_to_features(&sub.pixels, chunk.len(), points);
            let mut tape = Tape::new(&model.store);
            let pass = model.forward(&mut tape, input, &geom, BnMode::Batch, Some(&mut rng))?;
            let loss = tape.log_softmax_nll(pass.logits, sub.labels.clone());
            let loss_val = tape.value(loss).scalar().to_f64_();
            if !loss_val.is_finite() {
                return Err(Error::Diverged { epoch, step: steps });
            }
            loss_sum += loss_val;
            steps += 1;

            let grads = tape.backward(loss)?;
            adam_step(&mut model.store, &grads, &mut adam, T::of(lr));
        }

        exact_bn_pass(model, &stat_set, cfg.batch_size)?;
        let test_error = evaluate(model, test_set, cfg.batch_size.max(64))?;
        metrics.push(EpochMetrics {
            epoch,
            lr,
            train_loss: loss_sum / steps.max(1) as f64,
            test_error,
        });
    }

    exact_bn_pass(model, train_set, cfg.batch_size)?;
    Ok(metrics)
}

/// Classification error rate under the model's stored statistics.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    data: &LabeledImages<T>,
    batch_size: usize,
) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let (coords, lattice) = image_grid::<T>(data.width, data.height);
    let geom = model.plan_geometry(&coords, Some(&lattice))?;
    let points = data.width * data.height;
    let mut wrong = 0usize;
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(batch_size) {
        let sub = data.subset(chunk);
        let input = images_to_features(&sub.pixels, chunk.len(), points);
        let mut tape = Tape::new(&model.store);
        let pass = model.forward::<ChaCha8Rng>(&mut tape, input, &geom, BnMode::Running, None)?;
        let logits = tape.value(pass.logits).real();
        for (r, &label) in sub.labels.iter().enumerate() {
            let row = logits.row(r);
            let mut best = 0usize;
            let mut best_v = T::neg_infinity();
            for (c, &v) in row.iter().enumerate() {
                if v > best_v {
                    best_v = v;
                    best = c;
                }
            }
            if best != label {
                wrong += 1;
            }
        }
    }
    Ok(wrong as f64 / data.len() as f64)
}

/// One pass over the training set without touching trainable weights:
/// every batch normalization layer gets its statistics replaced by the
/// average of the exact per-batch statistics. Repeating the pass reproduces
/// the same values (the collected statistics do not depend on the stored
/// ones).
pub fn exact_bn_pass<T: Scalar>(
    model: &mut Model<T>,
    data: &LabeledImages<T>,
    batch_size: usize,
) -> Result<()> {
    if data.is_empty() {
        return Err(Error::InvalidArgument(
            "statistics pass needs a nonempty set".into(),
        ));
    }
    let (coords, lattice) = image_grid::<T>(data.width, data.height);
    let geom = model.plan_geometry(&coords, Some(&lattice))?;
    let points = data.width * data.height;
    let mut acc: Vec<BnStats<T>> = model
        .bn_stats
        .iter()
        .map(|s| BnStats {
            mean: vec![T::zero(); s.mean.len()],
            var: vec![T::zero(); s.var.len()],
        })
        .collect();
    let mut batches = 0usize;
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(batch_size) {
        let sub = data.subset(chunk);
        let input = images_to_features(&sub.pixels, chunk.len(), points);
        let mut tape = Tape::new(&model.store);
        let pass = model.forward::<ChaCha8Rng>(&mut tape, input, &geom, BnMode::Batch, None)?;
        let stats = model.bn_stats_from_pass(&tape, &pass);
        for (a, s) in acc.iter_mut().zip(stats) {
            for (x, y) in a.mean.iter_mut().zip(s.mean) {
                *x += y;
            }
            for (x, y) in a.var.iter_mut().zip(s.var) {
                *x += y;
            }
        }
        batches += 1;
    }
    let inv = T::one() / T::from_usize(batches).unwrap();
    for a in acc.iter_mut() {
        for x in a.mean.iter_mut() {
            *x *= inv;
        }
        for x in a.var.iter_mut() {
            *x *= inv;
        }
    }
    model.set_bn_stats(acc);
    Ok(())
}

/// Append epoch metrics as CSV (epoch, lr, train_loss, test_error).
pub fn write_metrics_csv(metrics: &[EpochMetrics], path: &Path) -> Result<()> {
    let mut out = String::from("epoch,lr,train_loss,test_error\n");
    for m in metrics {
        out.push_str(&format!(
            "{},{},{},{}\n",
            m.epoch, m.lr, m.train_loss, m.test_error
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 8] = b"SNETCKPT";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(serde::Serialize, serde::Deserialize)]
struct CheckpointHeader {
    version: u32,
    dtype: String,
    seed: u64,
    total_params: usize,
    config: ModelConfig,
    param_lens: Vec<(String, usize)>,
    bn_lens: Vec<usize>,
}

/// Little-endian binary container with a JSON header: magic, version,
/// header length, header, then the raw parameter and statistics values.
pub fn save_checkpoint<T: Scalar>(model: &Model<T>, seed: u64, path: &Path) -> Result<()> {
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        dtype: T::DTYPE.to_string(),
        seed,
        total_params: model.num_parameters(),
        config: model.config.clone(),
        param_lens: model
            .store
            .entries
            .iter()
            .map(|e| (e.name.clone(), e.data.len()))
            .collect(),
        bn_lens: model.bn_stats.iter().map(|s| s.mean.len()).collect(),
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut blob = Vec::new();
    for e in &model.store.entries {
        for &v in &e.data {
            v.write_le(&mut blob);
        }
    }
    for s in &model.bn_stats {
        for &v in &s.mean {
            v.write_le(&mut blob);
        }
        for &v in &s.var {
            v.write_le(&mut blob);
        }
    }

    let mut file = std::fs::File::create(path)?;
    file.write_all(CHECKPOINT_MAGIC)?;
    file.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    file.write_all(&(header_json.len() as u32).to_le_bytes())?;
    file.write_all(&header_json)?;
    file.write_all(&blob)?;
    Ok(())
}

/// Load a checkpoint saved with the same element precision.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(Model<T>, u64)> {
    let mut file = std::fs::File::open(path)?;
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)
        .map_err(|_| Error::CheckpointFormat("file too short for magic".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::CheckpointFormat("bad magic bytes".into()));
    }
    let mut word = [0u8; 4];
    file.read_exact(&mut word)
        .map_err(|_| Error::CheckpointFormat("missing version".into()))?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    file.read_exact(&mut word)
        .map_err(|_| Error::CheckpointFormat("missing header length".into()))?;
    let header_len = u32::from_le_bytes(word) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)
        .map_err(|_| Error::CheckpointFormat("truncated header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::CheckpointFormat(format!("header is not valid JSON: {e}")))?;
    if header.dtype != T::DTYPE {
        return Err(Error::CheckpointFormat(format!(
            "checkpoint holds {} values, loader expects {}",
            header.dtype,
            T::DTYPE
        )));
    }

    let mut blob = Vec::new();
    file.read_to_end(&mut blob)?;
    let mut need = 0usize;
    for (_, len) in &header.param_lens {
        need += len;
    }
    for len in &header.bn_lens {
        need += 2 * len;
    }
    if blob.len() != need * T::BYTE_WIDTH {
        return Err(Error::CheckpointFormat(format!(
            "value blob holds {} bytes, expected {}",
            blob.len(),
            need * T::BYTE_WIDTH
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(header.seed);
    let mut model = Model::<T>::new(header.config.clone(), &mut rng)?;
    if model.store.entries.len() != header.param_lens.len() {
        return Err(Error::CheckpointFormat(
            "parameter table does not match the config".into(),
        ));
    }

    let mut off = 0usize;
    let mut take = |n: usize, blob: &[u8]| -> Vec<T> {
        let out = blob[off..off + n * T::BYTE_WIDTH]
            .chunks_exact(T::BYTE_WIDTH)
            .map(T::read_le)
            .collect();
        off += n * T::BYTE_WIDTH;
        out
    };
    for (i, (name, len)) in header.param_lens.iter().enumerate() {
        if model.store.entries[i].name != *name || model.store.entries[i].data.len() != *len {
            return Err(Error::CheckpointFormat(format!(
                "parameter {i} mismatch: {name} (len {len})"
            )));
        }
        model.store.entries[i].data = take(*len, &blob);
    }
    let mut stats = Vec::new();
    for len in &header.bn_lens {
        let mean = take(*len, &blob);
        let var = take(*len, &blob);
        stats.push(BnStats { mean, var });
    }
    model.set_bn_stats(stats);
    Ok((model, header.seed))
}
