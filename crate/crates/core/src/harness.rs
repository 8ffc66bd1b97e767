//! Equivariance-error measurement harness.
//!
//! Protocol: compute per-layer activations for a batch of unrotated inputs,
//! freeze the batch normalization statistics (they are rotation invariant),
//! then run each input again under R random rotations, rotate the resulting
//! coefficients back and accumulate |difference| statistics per layer,
//! normalized by the batch-mean per-signal ℓ1 norm of the unrotated
//! activations at that layer.

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::fourier::FeatureMap;
use crate::model::{BnMode, Model};
use crate::pipeline::{image_grid, images_to_features, LabeledImages};
use crate::scalar::Scalar;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

/// Per-layer error record of one sweep configuration.
#[derive(Debug, Clone)]
pub struct ErrorRecord {
    pub layer: String,
    pub pad: usize,
    pub activation: String,
    pub mean_rel_err: f64,
    pub max_rel_err: f64,
    /// batch-mean per-signal ℓ1 norm used as the normalizer
    pub normalizer: f64,
    pub samples: u64,
}

#[derive(Debug, Clone, Default)]
pub struct ErrorReport {
    pub records: Vec<ErrorRecord>,
}

impl ErrorReport {
    /// Records of one pad, in layer order.
    pub fn for_pad(&self, pad: usize) -> Vec<&ErrorRecord> {
        self.records.iter().filter(|r| r.pad == pad).collect()
    }
}

#[derive(Debug, Default, Clone, Copy)]
struct Accum {
    sum_abs: f64,
    max_abs: f64,
    count: u64,
}

impl Accum {
    fn add_features(&mut self, a: &FeatureMap<impl Scalar>, b: &FeatureMap<impl Scalar>) {
        for (x, y) in a.data().iter().zip(b.data()) {
            let dre = x.re.to_f64_() - y.re.to_f64_();
            let dim = x.im.to_f64_() - y.im.to_f64_();
            let d = (dre * dre + dim * dim).sqrt();
            self.sum_abs += d;
            self.max_abs = self.max_abs.max(d);
            self.count += 1;
        }
    }

    fn add_reals<T: Scalar>(&mut self, a: &ndarray::Array2<T>, b: &ndarray::Array2<T>) {
        for (x, y) in a.iter().zip(b.iter()) {
            let d = (x.to_f64_() - y.to_f64_()).abs();
            self.sum_abs += d;
            self.max_abs = self.max_abs.max(d);
            self.count += 1;
        }
    }
}

/// Measure rotate-then-evaluate vs evaluate-then-rotate deviations for every
/// equivariant layer (and the invariant map) across the given FFT pads.
/// Angles are drawn uniformly from [0, 2π); each of the `rotations` rounds
/// applies one fresh angle to the whole batch.
pub fn equivariance_sweep<T: Scalar>(
    model: &Model<T>,
    images: &LabeledImages<T>,
    rotations: usize,
    pads: &[usize],
    seed: u64,
) -> Result<ErrorReport> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("sweep needs at least one image".into()));
    }
    let batch = images.len();
    let points = images.width * images.height;
    let (coords, lattice) = image_grid::<T>(images.width, images.height);
    let n_layers = model.config.conv_layers.len();
    let mut report = ErrorReport::default();

    for &pad in pads {
        let mut m = model.clone();
        m.config.fft_pad = pad;

        // Unrotated batch pass; its batch statistics are rotation invariant
        // and get frozen for all measurement passes.
        let geom = m.plan_geometry(&coords, Some(&lattice))?;
        let input = images_to_features(&images.pixels, batch, points);
        let mut base_tape = Tape::new(&m.store);
        let base_pass =
            m.forward::<ChaCha8Rng>(&mut base_tape, input.clone(), &geom, BnMode::Batch, None)?;
        let stats = m.bn_stats_from_pass(&base_tape, &base_pass);
        m.set_bn_stats(stats);

        let base_taps: Vec<FeatureMap<T>> = base_pass
            .taps
            .iter()
            .map(|&id| base_tape.value(id).features().clone())
            .collect();
        let base_invariant = base_tape.value(base_pass.invariant).real().clone();
        let normalizers: Vec<f64> = base_taps.iter().map(|f| f.mean_l1()).collect();
        let inv_norm = base_invariant.iter().map(|v| v.to_f64_().abs()).sum::<f64>()
            / base_invariant.len() as f64;

        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (pad as u64).wrapping_mul(0x9e3779b9));
        let mut accums = vec![Accum::default(); n_layers + 1];

        for _ in 0..rotations {
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            let t = T::of(theta);
            let (sin, cos) = t.sin_cos();
            let rot_coords: Vec<[T; 2]> = coords
                .iter()
                .map(|p| [cos * p[0] - sin * p[1], sin * p[0] + cos * p[1]])
                .collect();
            let rot_geom = m.plan_geometry(&rot_coords, Some(&lattice))?;
            let feat = input.rotate_all(t);
            let mut tape = Tape::new(&m.store);
            let pass =
                m.forward::<ChaCha8Rng>(&mut tape, feat, &rot_geom, BnMode::Running, None)?;
            for (l, &tap) in pass.taps.iter().enumerate() {
                let back = tape.value(tap).features().rotate_all(-t);
                accums[l].add_features(&back, &base_taps[l]);
            }
            let inv = tape.value(pass.invariant).real();
            accums[n_layers].add_reals(inv, &base_invariant);
        }

        for l in 0..n_layers {
            let a = &accums[l];
            let norm = normalizers[l].max(1e-300);
            report.records.push(ErrorRecord {
                layer: format!("{}", l + 1),
                pad,
                activation: model.config.activation.name().to_string(),
                mean_rel_err: a.sum_abs / a.count as f64 / norm,
                max_rel_err: a.max_abs / norm,
                normalizer: normalizers[l],
                samples: a.count,
            });
        }
        let a = &accums[n_layers];
        report.records.push(ErrorRecord {
            layer: "invariant".into(),
            pad,
            activation: model.config.activation.name().to_string(),
            mean_rel_err: a.sum_abs / a.count as f64 / inv_norm.max(1e-300),
            max_rel_err: a.max_abs / inv_norm.max(1e-300),
            normalizer: inv_norm,
            samples: a.count,
        });
    }
    Ok(report)
}

/// Deterministic CSV emission. Errors are the mean and max of per-coefficient
/// |Δ| over all stored coefficients, points, channels, images and rotations,
/// divided by the layer's batch-mean per-signal ℓ1 norm.
pub fn write_error_csv(report: &ErrorReport, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(
        "# per-coefficient |delta| aggregated over points/channels/images/rotations, \
         relative to the batch-mean per-signal l1 norm of the unrotated activations\n",
    );
    out.push_str("layer,pad,activation,mean_rel_err,max_rel_err,n\n");
    for r in &report.records {
        out.push_str(&format!(
            "{},{},{},{:e},{:e},{}\n",
            r.layer, r.pad, r.activation, r.mean_rel_err, r.max_rel_err, r.samples
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Oracle and gradient-check runners (shared by the CLI and the tests)
// ---------------------------------------------------------------------------

/// FFT-vs-direct polynomial comparison over random signals: max and mean
/// coefficient deviation per pad.
pub fn poly_oracle(degree: usize, coeffs: usize, pads: &[usize], seed: u64) -> Result<Vec<(usize, f64, f64)>> {
    use crate::activations::{apply_fft, apply_poly_direct, fit_poly_relu, Activation};
    use crate::fourier::BandLimitedSignal;
    use num_complex::Complex;

    if coeffs % 2 == 0 {
        return Err(Error::InvalidArgument("coefficient count must be odd".into()));
    }
    let k = (coeffs - 1) / 2;
    let poly = fit_poly_relu::<f64>(degree, 5.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let signals: Vec<BandLimitedSignal<f64>> = (0..64)
        .map(|_| {
            let mut c = vec![Complex::new(rng.random_range(-1.0..1.0), 0.0)];
            for _ in 1..=k {
                c.push(Complex::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ));
            }
            BandLimitedSignal::new(c).unwrap()
        })
        .collect();

    let mut rows = Vec::new();
    for &pad in pads {
        let mut max_dev = 0.0f64;
        let mut sum_dev = 0.0f64;
        let mut count = 0usize;
        for s in &signals {
            let direct = apply_poly_direct(s, &poly);
            let fftd = apply_fft(s, &Activation::Poly(poly.clone()), pad)?;
            let scale = direct
                .coeffs()
                .iter()
                .map(|z| z.norm())
                .fold(1.0f64, f64::max);
            for (a, b) in direct.coeffs().iter().zip(fftd.coeffs()) {
                let d = (a - b).norm() / scale;
                max_dev = max_dev.max(d);
                sum_dev += d;
                count += 1;
            }
        }
        rows.push((pad, max_dev, sum_dev / count as f64));
    }
    Ok(rows)
}

pub fn write_oracle_csv(rows: &[(usize, f64, f64)], degree: usize, coeffs: usize, path: &Path) -> Result<()> {
    let mut out = format!("# degree {degree}, {coeffs} coefficients, 64 random signals\n");
    out.push_str("pad,max_rel_dev,mean_rel_dev\n");
    for (pad, mx, mean) in rows {
        out.push_str(&format!("{pad},{mx:e},{mean:e}\n"));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Finite-difference check of the full 2D stack (double precision): a small
/// random batch through a thin version of the architecture, a spread of
/// randomly chosen parameters per layer, central differences at the given
/// step.
pub fn full_stack_gradcheck(
    picks: usize,
    step: f64,
    seed: u64,
) -> Result<crate::autodiff::GradCheckReport> {
    use crate::autodiff::{grad_check, ParamId};
    use crate::model::{ActivationKind, InvariantMap, ModelConfig};
    use crate::pipeline::synthetic_glyphs;

    let mut cfg = ModelConfig::mnist_stack(
        5,
        3,
        ActivationKind::Silu,
        InvariantMap::Norm,
        10,
        0.15,
    );
    cfg.dropout = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Model::<f64>::new(cfg, &mut rng)?;
    let data = synthetic_glyphs::<f64>(4, seed ^ 0xabcd);
    let (coords, lattice) = image_grid::<f64>(28, 28);
    let geom = model.plan_geometry(&coords, Some(&lattice))?;
    let input = images_to_features(&data.pixels, 4, 784);
    let labels = data.labels.clone();

    let mut tape = Tape::new(&model.store);
    let pass = model.forward::<ChaCha8Rng>(&mut tape, input.clone(), &geom, BnMode::Batch, None)?;
    let loss = tape.log_softmax_nll(pass.logits, labels.clone());
    let grads = tape.backward(loss)?;

    let n_entries = model.store.entries.len();
    let picks: Vec<(ParamId, usize)> = (0..picks)
        .map(|_| {
            let p = rng.random_range(0..n_entries);
            let i = rng.random_range(0..model.store.entries[p].data.len());
            (ParamId(p), i)
        })
        .collect();

    let mut store = model.store.clone();
    let report = grad_check(&mut store, &grads, &picks, step, |s| {
        let mut m = model.clone();
        m.store = s.clone();
        let mut t = Tape::new(s);
        let p = m
            .forward::<ChaCha8Rng>(&mut t, input.clone(), &geom, BnMode::Batch, None)
            .unwrap();
        let l = t.log_softmax_nll(p.logits, labels.clone());
        t.value(l).scalar()
    });
    Ok(report)
}

/// Single-layer surfel network on a synthetic sphere: invariant readout
/// (z_0 output channels averaged over all points) compared across random
/// rotations. Returns the max relative deviation.
pub fn surfel_sphere_demo(num_surfels: usize, num_rotations: usize, seed: u64) -> Result<f64> {
    use crate::conv2d::{conv2triv, LayerParams};
    use crate::surfel::{fibonacci_sphere, random_rotation, surfel_conv, StackFilterSpec, SurfelCloud};
    use num_complex::Complex;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let surfels = fibonacci_sphere::<f64>(num_surfels, 1.0);
    let spacing = (4.0 * std::f64::consts::PI / num_surfels as f64).sqrt();
    let stack = StackFilterSpec::equidistant(
        spacing,
        -spacing,
        spacing,
        spacing,
        StackFilterSpec::sigma_from_fwhm(spacing),
    )?;
    let d_out = 16usize;
    let layout = stack.layout(0, 4, 1, d_out);
    let params = LayerParams::<f64>::init(layout, &mut rng);
    let mut features = FeatureMap::<f64>::zeros(1, num_surfels, 1, 0);
    for p in 0..num_surfels {
        features.signal_mut(0, p, 0)[0] = Complex::new(1.0, 0.0);
    }
    let cloud = SurfelCloud::new(surfels, features)?;

    let readout = |c: &SurfelCloud<f64>| -> Result<Vec<f64>> {
        let out = surfel_conv(c, &stack, &params, &c.surfels)?;
        let triv = conv2triv(&out.features);
        let n = out.features.num_points();
        Ok((0..d_out)
            .map(|o| (0..n).map(|p| triv[[0, p * d_out + o]]).sum::<f64>() / n as f64)
            .collect())
    };

    let base = readout(&cloud)?;
    let scale = base.iter().map(|v| v.abs()).fold(1e-300, f64::max);
    let mut worst = 0.0f64;
    for _ in 0..num_rotations {
        let m = random_rotation::<f64, _>(&mut rng);
        let rotated = cloud.transformed(&m, &[0.0, 0.0, 0.0]);
        let got = readout(&rotated)?;
        for (a, b) in got.iter().zip(&base) {
            worst = worst.max((a - b).abs() / scale);
        }
    }
    Ok(worst)
}
