//! Pointwise nonlinearities on band-limited signals.
//!
//! Three routes:
//! - [`apply_poly_direct`]: iterated discrete convolution of the coefficient
//!   band, exact for polynomials, O(K²D²) time.
//! - [`apply_fft`]: sample the angular domain on N = (2K+1) + pad points,
//!   apply the scalar function, re-encode. Exact for a degree-D polynomial
//!   once N ≥ 2DK+1; a tunable approximation otherwise (harmonics beyond the
//!   sampling rate alias back and break equivariance).
//! - [`apply_norm`]: act on coefficient magnitudes only; equivariant by
//!   construction and FFT-free.

use crate::error::{Error, Result};
use crate::fourier::BandLimitedSignal;
use crate::scalar::Scalar;
use num_complex::Complex;

/// Real polynomial t_0 + t_1 x + ... + t_D x^D.
#[derive(Debug, Clone, PartialEq)]
pub struct Polynomial<T> {
    coeffs: Vec<T>,
}

impl<T: Scalar> Polynomial<T> {
    pub fn new(coeffs: Vec<T>) -> Result<Self> {
        if coeffs.is_empty() {
            return Err(Error::InvalidArgument("polynomial needs t_0".into()));
        }
        if coeffs.len() > 1 && *coeffs.last().unwrap() == T::zero() {
            return Err(Error::InvalidArgument(
                "leading polynomial coefficient must be nonzero".into(),
            ));
        }
        Ok(Self { coeffs })
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn coeffs(&self) -> &[T] {
        &self.coeffs
    }

    pub fn eval(&self, x: T) -> T {
        let mut acc = T::zero();
        for &c in self.coeffs.iter().rev() {
            acc = acc * x + c;
        }
        acc
    }

    pub fn derivative_eval(&self, x: T) -> T {
        let mut acc = T::zero();
        for (j, &c) in self.coeffs.iter().enumerate().skip(1).rev() {
            acc = acc * x + c * T::from_usize(j).unwrap();
        }
        acc
    }

    pub fn cast<U: Scalar>(&self) -> Polynomial<U> {
        Polynomial {
            coeffs: self.coeffs.iter().map(|&c| U::of(c.to_f64_())).collect(),
        }
    }
}

/// Scalar function used inside norm-only nonlinearities. Restricted to
/// functions with non-negative output so the coefficient magnitude stays a
/// magnitude.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum NormInner {
    Relu,
    Sigmoid,
}

impl NormInner {
    pub fn eval<T: Scalar>(self, x: T) -> T {
        match self {
            NormInner::Relu => {
                if x > T::zero() {
                    x
                } else {
                    T::zero()
                }
            }
            NormInner::Sigmoid => T::one() / (T::one() + (-x).exp()),
        }
    }

    pub fn derivative<T: Scalar>(self, x: T) -> T {
        match self {
            NormInner::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            NormInner::Sigmoid => {
                let s = self.eval(x);
                s * (T::one() - s)
            }
        }
    }
}

/// Activation function choice for a network layer.
#[derive(Debug, Clone, PartialEq)]
pub enum Activation<T> {
    Relu,
    LeakyRelu(T),
    Silu,
    Elu,
    Tanh,
    Sigmoid,
    Poly(Polynomial<T>),
    /// Acts on coefficient magnitudes only, with a trainable per-channel bias
    /// added to the magnitude before the inner function.
    NormOnly(NormInner),
}

impl<T: Scalar> Activation<T> {
    pub fn is_norm_only(&self) -> bool {
        matches!(self, Activation::NormOnly(_))
    }

    /// Pointwise value; not defined for norm-only activations.
    pub fn eval(&self, x: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    x
                } else {
                    T::zero()
                }
            }
            Activation::LeakyRelu(slope) => {
                if x > T::zero() {
                    x
                } else {
                    *slope * x
                }
            }
            Activation::Silu => x / (T::one() + (-x).exp()),
            Activation::Elu => {
                if x > T::zero() {
                    x
                } else {
                    x.exp() - T::one()
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => T::one() / (T::one() + (-x).exp()),
            Activation::Poly(p) => p.eval(x),
            Activation::NormOnly(_) => panic!("norm-only activation has no pointwise value"),
        }
    }

    /// Pointwise derivative. The ReLU subgradient at 0 is fixed to 0.
    pub fn derivative(&self, x: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::LeakyRelu(slope) => {
                if x > T::zero() {
                    T::one()
                } else {
                    *slope
                }
            }
            Activation::Silu => {
                let s = T::one() / (T::one() + (-x).exp());
                s * (T::one() + x * (T::one() - s))
            }
            Activation::Elu => {
                if x > T::zero() {
                    T::one()
                } else {
                    x.exp()
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                T::one() - t * t
            }
            Activation::Sigmoid => {
                let s = T::one() / (T::one() + (-x).exp());
                s * (T::one() - s)
            }
            Activation::Poly(p) => p.derivative_eval(x),
            Activation::NormOnly(_) => panic!("norm-only activation has no pointwise derivative"),
        }
    }
}

/// Smallest pad making the FFT route exact for a degree-D polynomial at band
/// limit K: total length 2DK+1, i.e. pad = 2K(D-1).
pub fn minimal_exact_pad(max_freq: usize, degree: usize) -> usize {
    assert!(degree >= 1, "degree must be at least 1");
    2 * max_freq * (degree - 1)
}

/// Apply a pointwise nonlinearity by oversampled FFT with `pad` extra
/// angular samples beyond the critical 2K+1.
///
/// A degree-D polynomial produces a band-DK output, so N = 2DK+1 samples
/// represent it exactly. Because the result is truncated back to K, the kept
/// bins are free of aliasing as soon as N > DK+K: the lowest folded
/// frequency k ± N then lies outside the created band.
pub fn apply_fft<T: Scalar>(
    signal: &BandLimitedSignal<T>,
    activation: &Activation<T>,
    pad: usize,
) -> Result<BandLimitedSignal<T>> {
    if activation.is_norm_only() {
        return Err(Error::InvalidArgument(
            "norm-only activations do not go through the FFT route".into(),
        ));
    }
    let k = signal.max_freq();
    let n = 2 * k + 1 + pad;
    let mut samples = signal.to_angular(n)?;
    for s in &mut samples {
        *s = activation.eval(*s);
    }
    BandLimitedSignal::from_angular(&samples, k)
}

/// Apply a polynomial exactly by iterated discrete convolution of the full
/// coefficient band. The intermediate band grows to jK at power j; the result
/// is truncated to the input band limit at the end.
pub fn apply_poly_direct<T: Scalar>(
    signal: &BandLimitedSignal<T>,
    poly: &Polynomial<T>,
) -> BandLimitedSignal<T> {
    let k = signal.max_freq();
    let t = poly.coeffs();
    let d = poly.degree();
    if d == 0 {
        return BandLimitedSignal::constant(t[0], k);
    }
    let full = signal.full_band();
    // Horner over the convolution algebra: acc ← acc ⊗ z + t_j δ_0.
    let mut acc: Vec<Complex<T>> = vec![Complex::new(t[d], T::zero())];
    for j in (0..d).rev() {
        acc = convolve_full(&acc, &full);
        let center = acc.len() / 2;
        acc[center] = acc[center] + Complex::new(t[j], T::zero());
    }
    let center = acc.len() / 2;
    let coeffs: Vec<Complex<T>> = (0..=k).map(|i| acc[center + i]).collect();
    BandLimitedSignal::from_coeffs_lossy(coeffs)
}

fn convolve_full<T: Scalar>(a: &[Complex<T>], b: &[Complex<T>]) -> Vec<Complex<T>> {
    let mut out = vec![Complex::new(T::zero(), T::zero()); a.len() + b.len() - 1];
    for (i, &ai) in a.iter().enumerate() {
        for (j, &bj) in b.iter().enumerate() {
            out[i + j] = out[i + j] + ai * bj;
        }
    }
    out
}

/// Norm-only nonlinearity: phases untouched, magnitudes pushed through the
/// inner scalar function after a bias shift. z_0 (real) is transformed
/// directly.
pub fn apply_norm<T: Scalar>(
    signal: &BandLimitedSignal<T>,
    inner: NormInner,
    bias: T,
) -> BandLimitedSignal<T> {
    let k = signal.max_freq();
    let mut coeffs = Vec::with_capacity(k + 1);
    coeffs.push(Complex::new(inner.eval(signal.coeff(0).re + bias), T::zero()));
    for i in 1..=k {
        let z = signal.coeff(i);
        let m = z.norm();
        if m > T::zero() {
            let scale = inner.eval(m + bias) / m;
            coeffs.push(z * scale);
        } else {
            coeffs.push(Complex::new(T::zero(), T::zero()));
        }
    }
    BandLimitedSignal::from_coeffs_lossy(coeffs)
}

/// Least-squares fit of ReLU on a dense uniform grid over [-c, c].
///
/// Degrees 2 and 4 reproduce the low-degree approximations used as polynomial
/// activations; the grid (10,001 points by default) pins the fit so the
/// coefficients are reproducible. The fit runs in f64 regardless of `T`.
pub fn fit_poly_relu<T: Scalar>(degree: usize, half_range: f64) -> Result<Polynomial<T>> {
    fit_poly_relu_grid(degree, half_range, 10_001)
}

pub fn fit_poly_relu_grid<T: Scalar>(
    degree: usize,
    half_range: f64,
    grid_points: usize,
) -> Result<Polynomial<T>> {
    if !(degree == 2 || degree == 4) {
        return Err(Error::InvalidArgument(format!(
            "ReLU polynomial fit supports degrees 2 and 4, got {degree}"
        )));
    }
    if half_range <= 0.0 || grid_points < degree + 1 {
        return Err(Error::InvalidArgument("bad fit range or grid".into()));
    }
    let m = degree + 1;
    // Fit in the normalized variable u = x / c for conditioning, then rescale.
    let mut gram = vec![vec![0.0f64; m]; m];
    let mut rhs = vec![0.0f64; m];
    for i in 0..grid_points {
        let u = -1.0 + 2.0 * i as f64 / (grid_points - 1) as f64;
        let y = (u * half_range).max(0.0);
        let mut pw = [0.0f64; 16];
        pw[0] = 1.0;
        for j in 1..2 * m - 1 {
            pw[j] = pw[j - 1] * u;
        }
        for r in 0..m {
            for c in 0..m {
                gram[r][c] += pw[r + c];
            }
            rhs[r] += y * pw[r];
        }
    }
    let sol = solve_dense(&mut gram, &mut rhs)?;
    let coeffs: Vec<T> = sol
        .iter()
        .enumerate()
        .map(|(j, &a)| T::of(a / half_range.powi(j as i32)))
        .collect();
    Polynomial::new(coeffs)
}

/// Gaussian elimination with partial pivoting for the small normal-equation
/// systems of the polynomial fit.
fn solve_dense(a: &mut [Vec<f64>], b: &mut [f64]) -> Result<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        if a[pivot][col].abs() < 1e-300 {
            return Err(Error::InvalidArgument("singular fit system".into()));
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for c in col..n {
                a[row][c] -= f * a[col][c];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0f64; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for c in row + 1..n {
            acc -= a[row][c] * x[c];
        }
        x[row] = acc / a[row][row];
    }
    Ok(x)
}

// ---------------------------------------------------------------------------
// Batched feature-map kernels (forward + reverse mode)
// ---------------------------------------------------------------------------

use crate::fft;
use crate::fourier::FeatureMap;
use rayon::prelude::*;

/// Oversampled-FFT activation over every signal of a feature map. Returns
/// the transformed map and the pre-activation angular samples (needed for
/// the backward pass).
pub fn apply_fft_map<T: Scalar>(
    x: &FeatureMap<T>,
    activation: &Activation<T>,
    pad: usize,
) -> Result<(FeatureMap<T>, Vec<T>)> {
    if activation.is_norm_only() {
        return Err(Error::InvalidArgument(
            "norm-only activations do not go through the FFT route".into(),
        ));
    }
    let k = x.max_freq();
    let n = 2 * k + 1 + pad;
    let kw = k + 1;
    let inv = fft::plan::<T>(n, true);
    let fwd = fft::plan::<T>(n, false);
    let inv_n = T::one() / T::from_usize(n).unwrap();

    let mut out = x.clone();
    let mut samples = vec![T::zero(); x.num_signals() * n];
    out.data_mut()
        .par_chunks_mut(kw)
        .zip(samples.par_chunks_mut(n))
        .for_each(|(sig, smp)| {
            let zero = Complex::new(T::zero(), T::zero());
            let mut buf = vec![zero; n];
            let mut scratch = Vec::new();
            buf[0] = sig[0];
            for i in 1..=k {
                buf[i] = sig[i];
                buf[n - i] = sig[i].conj();
            }
            fft::process(&inv, &mut buf, &mut scratch);
            for (s, b) in smp.iter_mut().zip(buf.iter()) {
                *s = b.re;
            }
            for b in buf.iter_mut() {
                *b = Complex::new(activation.eval(b.re), T::zero());
            }
            fft::process(&fwd, &mut buf, &mut scratch);
            sig[0] = Complex::new(buf[0].re * inv_n, T::zero());
            for i in 1..=k {
                sig[i] = buf[i] * inv_n;
            }
        });
    Ok((out, samples))
}

/// Reverse-mode pass of [`apply_fft_map`]: the FFT pair is linear, only the
/// scalar function contributes pointwise derivatives.
pub fn apply_fft_map_backward<T: Scalar>(
    grad_out: &FeatureMap<T>,
    samples: &[T],
    activation: &Activation<T>,
    pad: usize,
) -> FeatureMap<T> {
    let k = grad_out.max_freq();
    let n = 2 * k + 1 + pad;
    let kw = k + 1;
    let inv = fft::plan::<T>(n, true);
    let fwd = fft::plan::<T>(n, false);
    let inv_n = T::one() / T::from_usize(n).unwrap();
    let two = T::of(2.0);

    let mut grad_in = grad_out.clone();
    grad_in
        .data_mut()
        .par_chunks_mut(kw)
        .zip(samples.par_chunks(n))
        .for_each(|(g, smp)| {
            let zero = Complex::new(T::zero(), T::zero());
            let mut buf = vec![zero; n];
            let mut scratch = Vec::new();
            // da_j = (1/N) Re(Σ_k g_k e^{ikα_j}), no conjugate mirroring
            buf[0] = Complex::new(g[0].re, T::zero());
            for i in 1..=k {
                buf[i] = g[i];
            }
            fft::process(&inv, &mut buf, &mut scratch);
            for (b, &s) in buf.iter_mut().zip(smp.iter()) {
                let da = b.re * inv_n;
                *b = Complex::new(da * activation.derivative(s), T::zero());
            }
            fft::process(&fwd, &mut buf, &mut scratch);
            g[0] = Complex::new(buf[0].re, T::zero());
            for i in 1..=k {
                g[i] = buf[i] * two;
            }
        });
    grad_in
}

/// Per-signal ℓ1 clipping over a feature map; returns the applied scales.
pub fn clip_l1_map<T: Scalar>(x: &FeatureMap<T>, cap: T) -> (FeatureMap<T>, Vec<T>) {
    let kw = x.max_freq() + 1;
    let mut out = x.clone();
    let mut scales = vec![T::one(); x.num_signals()];
    out.data_mut()
        .chunks_exact_mut(kw)
        .zip(scales.iter_mut())
        .for_each(|(sig, sc)| {
            let mut norm = sig[0].re.abs();
            for z in &sig[1..] {
                let m = z.norm();
                norm += m + m;
            }
            if norm > cap {
                let s = cap / norm;
                *sc = s;
                for z in sig.iter_mut() {
                    *z = *z * s;
                }
            }
        });
    (out, scales)
}

/// Reverse-mode pass of [`clip_l1_map`].
pub fn clip_l1_map_backward<T: Scalar>(
    grad_out: &FeatureMap<T>,
    input: &FeatureMap<T>,
    scales: &[T],
    cap: T,
) -> FeatureMap<T> {
    let kw = grad_out.max_freq() + 1;
    let mut grad_in = grad_out.clone();
    grad_in
        .data_mut()
        .chunks_exact_mut(kw)
        .zip(input.data().chunks_exact(kw))
        .zip(scales.iter())
        .for_each(|((g, x), &sc)| {
            if sc == T::one() {
                return;
            }
            // y = (cap/S) x with S = |x_0| + 2 Σ|x_k|; sc = cap/S
            let s_norm = cap / sc;
            let mut pair = g[0].re * x[0].re;
            for (gi, xi) in g[1..].iter().zip(&x[1..]) {
                pair += gi.re * xi.re + gi.im * xi.im;
            }
            let coef = cap / (s_norm * s_norm) * pair;
            // dS/dx_0 = sign(x_0); dS/dx_k = 2 x_k / |x_k|
            let d0 = x[0].re.signum();
            g[0] = Complex::new(sc * g[0].re - coef * d0, T::zero());
            for (gi, xi) in g[1..].iter_mut().zip(&x[1..]) {
                let m = xi.norm();
                if m > T::zero() {
                    let ds = Complex::new(
                        two_over(m) * xi.re,
                        two_over(m) * xi.im,
                    );
                    *gi = Complex::new(
                        sc * gi.re - coef * ds.re,
                        sc * gi.im - coef * ds.im,
                    );
                } else {
                    *gi = *gi * sc;
                }
            }
        });
    grad_in
}

#[inline]
fn two_over<T: Scalar>(m: T) -> T {
    T::of(2.0) / m
}

/// Norm-only activation over a feature map with a per-channel bias.
pub fn apply_norm_map<T: Scalar>(
    x: &FeatureMap<T>,
    inner: NormInner,
    bias: &[T],
) -> FeatureMap<T> {
    assert_eq!(bias.len(), x.num_channels());
    let kw = x.max_freq() + 1;
    let d = x.num_channels();
    let mut out = x.clone();
    out.data_mut()
        .chunks_exact_mut(kw)
        .enumerate()
        .for_each(|(sig_idx, sig)| {
            let b = bias[sig_idx % d];
            sig[0] = Complex::new(inner.eval(sig[0].re + b), T::zero());
            for z in sig[1..].iter_mut() {
                let m = z.norm();
                if m > T::zero() {
                    let s = inner.eval(m + b) / m;
                    *z = *z * s;
                } else {
                    *z = Complex::new(T::zero(), T::zero());
                }
            }
        });
    out
}

/// Reverse-mode pass of [`apply_norm_map`]; returns (input grad, bias grad).
pub fn apply_norm_map_backward<T: Scalar>(
    grad_out: &FeatureMap<T>,
    input: &FeatureMap<T>,
    inner: NormInner,
    bias: &[T],
) -> (FeatureMap<T>, Vec<T>) {
    let kw = grad_out.max_freq() + 1;
    let d = grad_out.num_channels();
    let mut grad_in = grad_out.clone();
    let mut grad_bias = vec![T::zero(); d];
    for (sig_idx, (g, x)) in grad_in
        .data_mut()
        .chunks_exact_mut(kw)
        .zip(input.data().chunks_exact(kw))
        .enumerate()
    {
        let c = sig_idx % d;
        let b = bias[c];
        let h0 = inner.derivative(x[0].re + b);
        grad_bias[c] += h0 * g[0].re;
        g[0] = Complex::new(h0 * g[0].re, T::zero());
        for (gi, xi) in g[1..].iter_mut().zip(&x[1..]) {
            let n = xi.norm();
            if n > T::zero() {
                let f = inner.eval(n + b);
                let h = inner.derivative(n + b);
                let r = f / n;
                let w = (h * n - f) / (n * n * n);
                let gre = gi.re;
                let gim = gi.im;
                let dre = gre * (r + xi.re * xi.re * w) + gim * (xi.re * xi.im * w);
                let dim = gre * (xi.re * xi.im * w) + gim * (r + xi.im * xi.im * w);
                grad_bias[c] += (gre * xi.re + gim * xi.im) * h / n;
                *gi = Complex::new(dre, dim);
            } else {
                *gi = Complex::new(T::zero(), T::zero());
            }
        }
    }
    (grad_in, grad_bias)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_signal(rng: &mut ChaCha8Rng, max_freq: usize) -> BandLimitedSignal<f64> {
        let mut coeffs = vec![Complex::new(rng.random_range(-1.0..1.0), 0.0)];
        for _ in 1..=max_freq {
            coeffs.push(Complex::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ));
        }
        BandLimitedSignal::new(coeffs).unwrap()
    }

    fn max_coeff_dev(a: &BandLimitedSignal<f64>, b: &BandLimitedSignal<f64>) -> f64 {
        let scale = a
            .coeffs()
            .iter()
            .chain(b.coeffs())
            .map(|z| z.norm())
            .fold(1.0f64, f64::max);
        a.coeffs()
            .iter()
            .zip(b.coeffs())
            .map(|(x, y)| (x - y).norm())
            .fold(0.0, f64::max)
            / scale
    }

    #[test]
    fn relu_of_negative_constant_is_zero() {
        let s = BandLimitedSignal::constant(-1.0f64, 3);
        for pad in [0, 5, 32] {
            let out = apply_fft(&s, &Activation::Relu, pad).unwrap();
            for k in 0..=3 {
                assert_abs_diff_eq!(out.coeff(k).norm(), 0.0, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn poly_identity_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = random_signal(&mut rng, 4);
        let ident = Polynomial::new(vec![0.0, 1.0]).unwrap();
        let out = apply_poly_direct(&s, &ident);
        assert!(max_coeff_dev(&s, &out) < 1e-15);
    }

    #[test]
    fn poly_square_creates_second_harmonic() {
        // x(α) = 2 cos α, x² = 2 + 2 cos 2α.
        let s = BandLimitedSignal::new(vec![
            Complex::new(0.0, 0.0),
            Complex::new(1.0, 0.0),
            Complex::new(0.0, 0.0),
        ])
        .unwrap();
        let square = Polynomial::new(vec![0.0, 0.0, 1.0]).unwrap();
        let out = apply_poly_direct(&s, &square);
        assert_abs_diff_eq!(out.coeff(0).re, 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(out.coeff(1).norm(), 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(out.coeff(2).re, 1.0, epsilon = 1e-14);
    }

    #[test]
    fn poly_direct_matches_dense_angular_oracle() {
        // Oracle: evaluate φ(x(α)) on 1000 angles and project coefficients by
        // explicit DFT sums, independent of the library FFT path.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = random_signal(&mut rng, 4);
        let p = fit_poly_relu_grid::<f64>(2, 5.0, 10_001).unwrap();
        let out = apply_poly_direct(&s, &p);
        let n = 1000;
        for k in 0..=4 {
            let mut acc = Complex::new(0.0, 0.0);
            for j in 0..n {
                let a = 2.0 * PI * j as f64 / n as f64;
                let v = p.eval(s.evaluate(a));
                acc += Complex::from_polar(v, -(k as f64) * a);
            }
            acc /= n as f64;
            assert!(
                (acc - out.coeff(k)).norm() < 1e-12,
                "k={k}: oracle {acc} vs direct {:?}",
                out.coeff(k)
            );
        }
    }

    #[test]
    fn fft_route_exact_at_minimal_pad() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (degree, pad) in [(2usize, 8usize), (4, 24)] {
            assert_eq!(minimal_exact_pad(4, degree), pad);
            let p = fit_poly_relu_grid::<f64>(degree, 5.0, 10_001).unwrap();
            for _ in 0..20 {
                let s = random_signal(&mut rng, 4);
                let direct = apply_poly_direct(&s, &p);
                let fftd = apply_fft(&s, &Activation::Poly(p.clone()), pad).unwrap();
                assert!(
                    max_coeff_dev(&direct, &fftd) < 1e-12,
                    "degree {degree} pad {pad}"
                );
                // More pad only moves the result at rounding level.
                let more = apply_fft(&s, &Activation::Poly(p.clone()), pad + 13).unwrap();
                assert!(max_coeff_dev(&direct, &more) < 1e-12);
            }
        }
    }

    #[test]
    fn minimal_pad_values() {
        assert_eq!(minimal_exact_pad(4, 2), 8);
        assert_eq!(minimal_exact_pad(4, 4), 24);
        assert_eq!(minimal_exact_pad(7, 1), 0);
    }

    #[test]
    fn norm_activation_edge_cases() {
        let zero = BandLimitedSignal::<f64>::zeros(3);
        let out = apply_norm(&zero, NormInner::Relu, 0.0);
        for k in 0..=3 {
            assert_eq!(out.coeff(k).norm(), 0.0);
        }

        // |z_1| = 2 with bias -3: ReLU(-1) = 0 gates the coefficient off.
        let s = BandLimitedSignal::new(vec![
            Complex::new(0.0, 0.0),
            Complex::new(1.2, 1.6),
        ])
        .unwrap();
        let gated = apply_norm(&s, NormInner::Relu, -3.0);
        assert_eq!(gated.coeff(1).norm(), 0.0);
    }

    #[test]
    fn norm_activation_commutes_with_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let s = random_signal(&mut rng, 4);
            let theta = rng.random_range(-PI..PI);
            let a = apply_norm(&s.rotate(theta), NormInner::Relu, 0.1);
            let b = apply_norm(&s, NormInner::Relu, 0.1).rotate(theta);
            assert!(max_coeff_dev(&a, &b) < 1e-14);
        }
    }

    #[test]
    fn relu_fit_quality() {
        let p2 = fit_poly_relu::<f64>(2, 5.0).unwrap();
        let p4 = fit_poly_relu::<f64>(4, 5.0).unwrap();

        assert!(p2.eval(0.0) > 0.0);
        assert!((p2.eval(5.0) - 5.0).abs() < 0.5);

        let rms = |p: &Polynomial<f64>| {
            let mut acc = 0.0;
            let n = 2001;
            for i in 0..n {
                let x = -5.0 + 10.0 * i as f64 / (n - 1) as f64;
                let d = p.eval(x) - x.max(0.0);
                acc += d * d;
            }
            (acc / n as f64).sqrt()
        };
        let r2 = rms(&p2);
        let r4 = rms(&p4);
        assert!(r2 < 0.35, "degree-2 residual {r2}");
        assert!(r4 < r2, "degree-4 residual {r4} not below degree-2 {r2}");

        // The continuous-limit fit for degree 2 has a closed form; the dense
        // grid must land on it.
        assert_abs_diff_eq!(p2.coeffs()[1], 0.5, epsilon = 1e-3);
        assert_abs_diff_eq!(p2.coeffs()[0], 0.46875, epsilon = 1e-3);
        assert_abs_diff_eq!(p2.coeffs()[2], 0.09375, epsilon = 1e-4);
    }

    #[test]
    fn clip_then_poly_stays_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let p = fit_poly_relu::<f64>(4, 5.0).unwrap();
        for _ in 0..50 {
            let mut coeffs = vec![Complex::new(rng.random_range(-100.0..100.0), 0.0)];
            for _ in 1..=4 {
                coeffs.push(Complex::new(
                    rng.random_range(-100.0..100.0),
                    rng.random_range(-100.0..100.0),
                ));
            }
            let s = BandLimitedSignal::new(coeffs).unwrap();
            let clipped = s.clip_l1(5.0).unwrap();
            let out = apply_fft(&clipped, &Activation::Poly(p.clone()), 24).unwrap();
            for k in 0..=4 {
                assert!(out.coeff(k).re.is_finite() && out.coeff(k).im.is_finite());
            }
        }
    }

    #[test]
    fn fft_route_rejects_norm_only() {
        let s = BandLimitedSignal::<f64>::zeros(2);
        assert!(apply_fft(&s, &Activation::NormOnly(NormInner::Relu), 4).is_err());
    }

    #[test]
    fn batched_maps_agree_with_per_signal_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let (b, n, d, k) = (2usize, 3usize, 2usize, 3usize);
        let mut fm = FeatureMap::<f64>::zeros(b, n, d, k);
        for bi in 0..b {
            for p in 0..n {
                for c in 0..d {
                    fm.set_signal(bi, p, c, &random_signal(&mut rng, k));
                }
            }
        }
        let (out, _) = apply_fft_map(&fm, &Activation::Silu, 5).unwrap();
        let (clipped, _) = clip_l1_map(&fm, 1.5);
        let bias = [0.2, -0.1];
        let normed = apply_norm_map(&fm, NormInner::Relu, &bias);
        for bi in 0..b {
            for p in 0..n {
                for c in 0..d {
                    let s = fm.get_signal(bi, p, c);
                    let a = apply_fft(&s, &Activation::Silu, 5).unwrap();
                    for kk in 0..=k {
                        assert!((a.coeff(kk) - out.signal(bi, p, c)[kk]).norm() < 1e-13);
                    }
                    let cl = s.clip_l1(1.5).unwrap();
                    for kk in 0..=k {
                        assert!((cl.coeff(kk) - clipped.signal(bi, p, c)[kk]).norm() < 1e-13);
                    }
                    let nm = apply_norm(&s, NormInner::Relu, bias[c]);
                    for kk in 0..=k {
                        assert!((nm.coeff(kk) - normed.signal(bi, p, c)[kk]).norm() < 1e-13);
                    }
                }
            }
        }
    }
}
