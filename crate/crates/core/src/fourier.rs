//! Band-limited real periodic functions represented by truncated complex
//! Fourier series.
//!
//! A signal x(α) = Σ_{k=-K..K} z_k e^{ikα} with z_{-k} = conj(z_k) is stored
//! as the K+1 coefficients z_0..z_K; the negative half of the spectrum is
//! implied by conjugate symmetry and materialized on demand. The imaginary
//! part of z_0 is kept at exactly zero.
//!
//! Conventions fixed once and used everywhere:
//! - rotate(s, θ) maps z_k to z_k e^{-ikθ}, i.e. the represented pattern is
//!   rotated by +θ (new(α) = old(α - θ)).
//! - the forward coefficient transform carries 1/N, the inverse none, so
//!   `to_angular` samples agree with `evaluate` directly.

use crate::error::{Error, Result};
use crate::fft;
use crate::scalar::Scalar;
use num_complex::Complex;

/// Real band-limited periodic function; coefficients z_0..z_K.
#[derive(Debug, Clone, PartialEq)]
pub struct BandLimitedSignal<T> {
    coeffs: Vec<Complex<T>>,
}

impl<T: Scalar> BandLimitedSignal<T> {
    /// Build from coefficients z_0..z_K. Fails if the mean coefficient has a
    /// nonzero imaginary part.
    pub fn new(coeffs: Vec<Complex<T>>) -> Result<Self> {
        if coeffs.is_empty() {
            return Err(Error::InvalidArgument(
                "signal needs at least the z_0 coefficient".into(),
            ));
        }
        if coeffs[0].im != T::zero() {
            return Err(Error::NonRealMean(coeffs[0].im.to_f64_()));
        }
        Ok(Self { coeffs })
    }

    /// Zero signal with band limit `max_freq`.
    pub fn zeros(max_freq: usize) -> Self {
        Self {
            coeffs: vec![Complex::new(T::zero(), T::zero()); max_freq + 1],
        }
    }

    /// Constant signal x(α) = c.
    pub fn constant(c: T, max_freq: usize) -> Self {
        let mut s = Self::zeros(max_freq);
        s.coeffs[0] = Complex::new(c, T::zero());
        s
    }

    /// Coefficients z_0..z_K, dropping any rounding residue on Im(z_0).
    pub fn from_coeffs_lossy(mut coeffs: Vec<Complex<T>>) -> Self {
        assert!(!coeffs.is_empty());
        coeffs[0].im = T::zero();
        Self { coeffs }
    }

    pub fn max_freq(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn coeffs(&self) -> &[Complex<T>] {
        &self.coeffs
    }

    pub fn coeff(&self, k: usize) -> Complex<T> {
        self.coeffs[k]
    }

    pub fn set_coeff(&mut self, k: usize, z: Complex<T>) {
        if k == 0 {
            debug_assert!(z.im == T::zero(), "z_0 must stay real");
        }
        self.coeffs[k] = z;
    }

    /// Full spectrum z_{-K}..z_K (index 0 holds z_{-K}).
    pub fn full_band(&self) -> Vec<Complex<T>> {
        let k = self.max_freq();
        let mut out = Vec::with_capacity(2 * k + 1);
        for i in (1..=k).rev() {
            out.push(self.coeffs[i].conj());
        }
        out.extend_from_slice(&self.coeffs);
        out
    }

    /// x(angle) = Σ_k z_k e^{ik·angle}; the imaginary residue cancels by
    /// conjugate symmetry and is discarded.
    pub fn evaluate(&self, angle: T) -> T {
        let mut acc = self.coeffs[0].re;
        let rot = Complex::from_polar(T::one(), angle);
        let mut phase = Complex::new(T::one(), T::zero());
        for k in 1..self.coeffs.len() {
            phase = phase * rot;
            // z_k e^{ikα} + conj both: 2 Re(z_k e^{ikα})
            let term = self.coeffs[k] * phase;
            acc = acc + (term.re + term.re);
        }
        acc
    }

    /// Equidistant samples x(2πj/N), j = 0..N-1, via zero-padded inverse DFT.
    pub fn to_angular(&self, num_samples: usize) -> Result<Vec<T>> {
        let k = self.max_freq();
        if num_samples < 2 * k + 1 {
            return Err(Error::Undersampled {
                samples: num_samples,
                max_freq: k,
            });
        }
        let mut spectrum = vec![Complex::new(T::zero(), T::zero()); num_samples];
        spectrum[0] = self.coeffs[0];
        for i in 1..=k {
            spectrum[i] = self.coeffs[i];
            spectrum[num_samples - i] = self.coeffs[i].conj();
        }
        let plan = fft::plan::<T>(num_samples, true);
        let mut scratch = Vec::new();
        fft::process(&plan, &mut spectrum, &mut scratch);
        Ok(spectrum.into_iter().map(|z| z.re).collect())
    }

    /// Recover coefficients z_0..K from equidistant samples; frequencies above
    /// K are truncated. z_k = (1/N) Σ_j s_j e^{-i2πkj/N}.
    pub fn from_angular(samples: &[T], max_freq: usize) -> Result<Self> {
        let n = samples.len();
        if n < 2 * max_freq + 1 {
            return Err(Error::Undersampled {
                samples: n,
                max_freq,
            });
        }
        let mut buf: Vec<Complex<T>> = samples
            .iter()
            .map(|&s| Complex::new(s, T::zero()))
            .collect();
        let plan = fft::plan::<T>(n, false);
        let mut scratch = Vec::new();
        fft::process(&plan, &mut buf, &mut scratch);
        let inv_n = T::one() / T::from_usize(n).unwrap();
        let coeffs: Vec<Complex<T>> = buf[..=max_freq].iter().map(|&z| z * inv_n).collect();
        Ok(Self::from_coeffs_lossy(coeffs))
    }

    /// Rotate the represented pattern by +θ: z_k ← z_k e^{-ikθ}.
    pub fn rotate(&self, theta: T) -> Self {
        let rot = Complex::from_polar(T::one(), -theta);
        let mut phase = Complex::new(T::one(), T::zero());
        let mut coeffs = Vec::with_capacity(self.coeffs.len());
        coeffs.push(self.coeffs[0]);
        for k in 1..self.coeffs.len() {
            phase = phase * rot;
            coeffs.push(self.coeffs[k] * phase);
        }
        Self { coeffs }
    }

    /// ℓ1 norm over the full band: |z_0| + 2 Σ_{k≥1} |z_k|. This bounds
    /// max_α |x(α)| and the bound is tight for aligned phases.
    pub fn l1_norm(&self) -> T {
        let mut acc = self.coeffs[0].re.abs();
        for z in &self.coeffs[1..] {
            let m = z.norm();
            acc = acc + (m + m);
        }
        acc
    }

    /// Rescale all coefficients so the ℓ1 norm does not exceed `cap`.
    pub fn clip_l1(&self, cap: T) -> Result<Self> {
        if cap <= T::zero() {
            return Err(Error::InvalidArgument(format!(
                "l1 cap must be positive, got {cap}"
            )));
        }
        let norm = self.l1_norm();
        if norm <= cap {
            return Ok(self.clone());
        }
        let scale = cap / norm;
        Ok(Self {
            coeffs: self.coeffs.iter().map(|&z| z * scale).collect(),
        })
    }

    /// l2 norm of the stored coefficients (k ≥ 0 half only).
    pub fn coeff_l2(&self) -> T {
        self.coeffs
            .iter()
            .map(|z| z.norm_sqr())
            .fold(T::zero(), |a, b| a + b)
            .sqrt()
    }
}

/// Batched per-(point, channel) signal stack: the activation tensor of a
/// network layer. All signals share the band limit; layout is
/// [batch][point][channel][k] with the k axis innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    batch: usize,
    num_points: usize,
    num_channels: usize,
    max_freq: usize,
    data: Vec<Complex<T>>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn zeros(batch: usize, num_points: usize, num_channels: usize, max_freq: usize) -> Self {
        Self {
            batch,
            num_points,
            num_channels,
            max_freq,
            data: vec![
                Complex::new(T::zero(), T::zero());
                batch * num_points * num_channels * (max_freq + 1)
            ],
        }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn num_points(&self) -> usize {
        self.num_points
    }

    pub fn num_channels(&self) -> usize {
        self.num_channels
    }

    pub fn max_freq(&self) -> usize {
        self.max_freq
    }

    pub fn coeffs_per_signal(&self) -> usize {
        self.max_freq + 1
    }

    pub fn num_signals(&self) -> usize {
        self.batch * self.num_points * self.num_channels
    }

    pub fn data(&self) -> &[Complex<T>] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex<T>] {
        &mut self.data
    }

    #[inline]
    pub fn signal_offset(&self, b: usize, p: usize, c: usize) -> usize {
        ((b * self.num_points + p) * self.num_channels + c) * (self.max_freq + 1)
    }

    pub fn signal(&self, b: usize, p: usize, c: usize) -> &[Complex<T>] {
        let off = self.signal_offset(b, p, c);
        &self.data[off..off + self.max_freq + 1]
    }

    pub fn signal_mut(&mut self, b: usize, p: usize, c: usize) -> &mut [Complex<T>] {
        let off = self.signal_offset(b, p, c);
        let w = self.max_freq + 1;
        &mut self.data[off..off + w]
    }

    pub fn set_signal(&mut self, b: usize, p: usize, c: usize, s: &BandLimitedSignal<T>) {
        assert_eq!(s.max_freq(), self.max_freq, "band limit mismatch");
        self.signal_mut(b, p, c).copy_from_slice(s.coeffs());
    }

    pub fn get_signal(&self, b: usize, p: usize, c: usize) -> BandLimitedSignal<T> {
        BandLimitedSignal::from_coeffs_lossy(self.signal(b, p, c).to_vec())
    }

    /// Rotate every signal by the same angle (the batched group action).
    pub fn rotate_all(&self, theta: T) -> Self {
        let kw = self.max_freq + 1;
        let rot = Complex::from_polar(T::one(), -theta);
        let mut phases = Vec::with_capacity(kw);
        let mut p = Complex::new(T::one(), T::zero());
        phases.push(p);
        for _ in 1..kw {
            p = p * rot;
            phases.push(p);
        }
        let mut out = self.clone();
        for (i, z) in out.data.iter_mut().enumerate() {
            *z = *z * phases[i % kw];
        }
        out
    }

    /// Keep only the listed points (crop / subsampling).
    pub fn select_points(&self, keep: &[usize]) -> Self {
        let kw = self.max_freq + 1;
        let row = self.num_channels * kw;
        let mut out = Self::zeros(self.batch, keep.len(), self.num_channels, self.max_freq);
        for b in 0..self.batch {
            for (pi, &p) in keep.iter().enumerate() {
                let src = (b * self.num_points + p) * row;
                let dst = (b * keep.len() + pi) * row;
                out.data[dst..dst + row].copy_from_slice(&self.data[src..src + row]);
            }
        }
        out
    }

    /// Mean per-signal ℓ1 norm over the whole batch (the sweep normalizer).
    pub fn mean_l1(&self) -> f64 {
        let kw = self.max_freq + 1;
        let mut acc = 0.0f64;
        for s in self.data.chunks_exact(kw) {
            acc += s[0].re.abs().to_f64_();
            for z in &s[1..] {
                acc += 2.0 * z.norm().to_f64_();
            }
        }
        acc / self.num_signals() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    pub(crate) fn random_signal(rng: &mut ChaCha8Rng, max_freq: usize) -> BandLimitedSignal<f64> {
        let mut coeffs = Vec::with_capacity(max_freq + 1);
        coeffs.push(Complex::new(rng.random_range(-1.0..1.0), 0.0));
        for _ in 1..=max_freq {
            coeffs.push(Complex::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ));
        }
        BandLimitedSignal::new(coeffs).unwrap()
    }

    #[test]
    fn evaluate_constant() {
        let s = BandLimitedSignal::constant(2.0f64, 0);
        for &a in &[0.0, 0.4, -2.0, 17.0] {
            assert_abs_diff_eq!(s.evaluate(a), 2.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn evaluate_cosine_peak() {
        // z_1 = 1: x(α) = 2 cos α, peak 2 at α = 0.
        let s = BandLimitedSignal::new(vec![Complex::new(0.0, 0.0), Complex::new(1.0, 0.0)])
            .unwrap();
        assert_abs_diff_eq!(s.evaluate(0.0), 2.0, epsilon = 1e-15);
    }

    #[test]
    fn evaluate_matches_direct_sum_oracle() {
        // Independent oracle: z_0 + Σ_k 2 Re(z_k e^{ikα}) with per-term polar
        // evaluation, no recurrence.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = random_signal(&mut rng, 4);
        for j in 0..100 {
            let a = 2.0 * PI * (j as f64) / 100.0 - PI;
            let mut oracle = s.coeff(0).re;
            for k in 1..=4 {
                let term = s.coeff(k) * Complex::from_polar(1.0, k as f64 * a);
                oracle += 2.0 * term.re;
            }
            assert_abs_diff_eq!(s.evaluate(a), oracle, epsilon = 1e-12);
        }
    }

    #[test]
    fn to_angular_constant() {
        let s = BandLimitedSignal::constant(1.0f64, 0);
        let samples = s.to_angular(4).unwrap();
        assert_eq!(samples.len(), 4);
        for v in samples {
            assert_abs_diff_eq!(v, 1.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn to_angular_cosine_quarters() {
        // K=1, z_1 = 0.5: x(α) = cos α sampled at 0, π/2, π, 3π/2.
        let s = BandLimitedSignal::new(vec![Complex::new(0.0, 0.0), Complex::new(0.5, 0.0)])
            .unwrap();
        let samples = s.to_angular(4).unwrap();
        let expected = [1.0, 0.0, -1.0, 0.0];
        for (got, want) in samples.iter().zip(expected) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-14);
        }
    }

    #[test]
    fn to_angular_refuses_undersampling() {
        let s = BandLimitedSignal::<f64>::zeros(4);
        assert!(matches!(
            s.to_angular(8),
            Err(Error::Undersampled { samples: 8, max_freq: 4 })
        ));
        assert!(BandLimitedSignal::<f64>::from_angular(&[0.0; 8], 4).is_err());
    }

    #[test]
    fn roundtrip_critical_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = random_signal(&mut rng, 4);
        let back =
            BandLimitedSignal::from_angular(&s.to_angular(9).unwrap(), 4).unwrap();
        for k in 0..=4 {
            assert_abs_diff_eq!(back.coeff(k).re, s.coeff(k).re, epsilon = 1e-12);
            assert_abs_diff_eq!(back.coeff(k).im, s.coeff(k).im, epsilon = 1e-12);
        }
    }

    #[test]
    fn from_angular_constant_any_length() {
        let samples = vec![3.25f64; 7];
        let s = BandLimitedSignal::from_angular(&samples, 0).unwrap();
        assert_abs_diff_eq!(s.coeff(0).re, 3.25, epsilon = 1e-14);
    }

    #[test]
    fn truncation_matches_analytic_drop() {
        // Sampling a K=8 signal densely and truncating to K=4 must equal
        // dropping the high coefficients outright.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let s = random_signal(&mut rng, 8);
        let samples = s.to_angular(17).unwrap();
        let truncated = BandLimitedSignal::from_angular(&samples, 4).unwrap();
        for k in 0..=4 {
            assert_abs_diff_eq!(truncated.coeff(k).re, s.coeff(k).re, epsilon = 1e-12);
            assert_abs_diff_eq!(truncated.coeff(k).im, s.coeff(k).im, epsilon = 1e-12);
        }
    }

    #[test]
    fn rotate_group_law() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let s = random_signal(&mut rng, 5);
        let full_turn = s.rotate(2.0 * PI);
        for k in 0..=5 {
            assert_abs_diff_eq!(full_turn.coeff(k).re, s.coeff(k).re, epsilon = 1e-14);
            assert_abs_diff_eq!(full_turn.coeff(k).im, s.coeff(k).im, epsilon = 1e-14);
        }
        assert_eq!(s.rotate(0.0), s);
        let a = 0.7;
        let b = -1.9;
        let two_step = s.rotate(a).rotate(b);
        let one_step = s.rotate(a + b);
        for k in 0..=5 {
            assert_abs_diff_eq!(two_step.coeff(k).re, one_step.coeff(k).re, epsilon = 1e-12);
            assert_abs_diff_eq!(two_step.coeff(k).im, one_step.coeff(k).im, epsilon = 1e-12);
        }
    }

    #[test]
    fn rotate_shifts_samples_cyclically() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let s = random_signal(&mut rng, 3);
        let n = 12;
        let m = 5;
        let theta = 2.0 * PI * m as f64 / n as f64;
        let base = s.to_angular(n).unwrap();
        let shifted = s.rotate(theta).to_angular(n).unwrap();
        for j in 0..n {
            assert_abs_diff_eq!(shifted[(j + m) % n], base[j], epsilon = 1e-11);
        }
    }

    #[test]
    fn l1_norm_examples() {
        let s = BandLimitedSignal::new(vec![Complex::new(1.0, 0.0), Complex::new(1.0, 0.0)])
            .unwrap();
        assert_abs_diff_eq!(s.l1_norm(), 3.0, epsilon = 1e-15);

        // Norm already under the cap: identity.
        let clipped = s.clip_l1(5.0).unwrap();
        assert_eq!(clipped, s);
    }

    #[test]
    fn clip_scales_and_bounds_samples() {
        let s = BandLimitedSignal::new(vec![Complex::new(0.0, 0.0), Complex::new(3.0, 0.0)])
            .unwrap();
        assert_abs_diff_eq!(s.l1_norm(), 6.0, epsilon = 1e-15);
        let clipped = s.clip_l1(5.0).unwrap();
        assert_abs_diff_eq!(clipped.coeff(1).re, 3.0 * 5.0 / 6.0, epsilon = 1e-14);
        assert_abs_diff_eq!(clipped.l1_norm(), 5.0, epsilon = 1e-12);
        for j in 0..1000 {
            let a = 2.0 * PI * j as f64 / 1000.0;
            assert!(clipped.evaluate(a).abs() <= 5.0 + 1e-12);
        }
    }

    #[test]
    fn non_real_mean_rejected() {
        assert!(matches!(
            BandLimitedSignal::new(vec![Complex::new(1.0, 0.5)]),
            Err(Error::NonRealMean(_))
        ));
    }

    #[test]
    fn feature_map_select_and_rotate() {
        let mut fm = FeatureMap::<f64>::zeros(2, 3, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for b in 0..2 {
            for p in 0..3 {
                for c in 0..2 {
                    fm.set_signal(b, p, c, &random_signal(&mut rng, 2));
                }
            }
        }
        let sel = fm.select_points(&[2, 0]);
        assert_eq!(sel.num_points(), 2);
        assert_eq!(sel.signal(1, 0, 1), fm.signal(1, 2, 1));
        assert_eq!(sel.signal(0, 1, 0), fm.signal(0, 0, 0));

        let rot = fm.rotate_all(0.3);
        let direct = fm.get_signal(1, 2, 0).rotate(0.3);
        for k in 0..=2 {
            assert_abs_diff_eq!(rot.signal(1, 2, 0)[k].re, direct.coeff(k).re, epsilon = 1e-14);
        }
    }

    proptest! {
        #[test]
        fn prop_sampling_bijection(seed in 0u64..1000, k in 0usize..8, extra in 0usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_signal(&mut rng, k);
            let n = 2 * k + 1 + extra;
            let back = BandLimitedSignal::from_angular(&s.to_angular(n).unwrap(), k).unwrap();
            for i in 0..=k {
                prop_assert!((back.coeff(i) - s.coeff(i)).norm() <= 1e-12 * (1.0 + s.coeff(i).norm()));
            }
        }

        #[test]
        fn prop_rotation_unitary(seed in 0u64..1000, k in 0usize..8, theta in -10.0f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_signal(&mut rng, k);
            let r = s.rotate(theta);
            prop_assert!((r.coeff_l2() - s.coeff_l2()).abs() <= 1e-14 * (1.0 + s.coeff_l2()));
        }

        #[test]
        fn prop_l1_bounds_samples(seed in 0u64..1000, k in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_signal(&mut rng, k);
            let bound = s.l1_norm();
            for j in 0..200 {
                let a = 2.0 * PI * j as f64 / 200.0;
                prop_assert!(s.evaluate(a).abs() <= bound + 1e-12);
            }
        }
    }
}
