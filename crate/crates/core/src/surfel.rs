//! SE(3)-equivariant convolution on oriented point clouds (surfels).
//!
//! Each surfel carries a right-handed orthonormal frame (x, y, n). Angular
//! features live in the tangent plane and map to directions via
//! v = x cos α - y sin α. Features of different surfels are related by the
//! common-tangent alignment: rotate the angular origin onto the common
//! tangent u = n₁×n₂, scale the imaginary parts by ⟨n₁, n₂⟩, rotate into the
//! target frame. For rotation order 1 this is exactly the projection of the
//! feature's tangent vector into the target tangent plane.

use crate::conv2d::{caxpy, mix_point, repack_full_band, QLayout, RingFilterSpec, RingSpec};
use crate::error::{Error, Result};
use crate::fourier::{BandLimitedSignal, FeatureMap};
use crate::scalar::Scalar;
use num_complex::Complex;
use rand::Rng;
use rayon::prelude::*;

pub type V3<T> = [T; 3];

pub fn dot<T: Scalar>(a: &V3<T>, b: &V3<T>) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross<T: Scalar>(a: &V3<T>, b: &V3<T>) -> V3<T> {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm<T: Scalar>(a: &V3<T>) -> T {
    dot(a, a).sqrt()
}

pub fn scale<T: Scalar>(a: &V3<T>, s: T) -> V3<T> {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn sub<T: Scalar>(a: &V3<T>, b: &V3<T>) -> V3<T> {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn mat_apply<T: Scalar>(m: &[V3<T>; 3], v: &V3<T>) -> V3<T> {
    [dot(&m[0], v), dot(&m[1], v), dot(&m[2], v)]
}

/// Uniform random rotation matrix (rows) from a Gaussian quaternion.
pub fn random_rotation<T: Scalar, R: Rng + ?Sized>(rng: &mut R) -> [V3<T>; 3] {
    let q: Vec<f64> = (0..4).map(|_| f64::sample_normal(rng)).collect();
    let n = (q.iter().map(|x| x * x).sum::<f64>()).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    let m = [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ];
    m.map(|row| row.map(T::of))
}

/// Right-handed orthonormal tangent frame (x, y, n) with y = n × x.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame<T> {
    pub x: V3<T>,
    pub y: V3<T>,
    pub normal: V3<T>,
}

impl<T: Scalar> Frame<T> {
    pub fn new(x: V3<T>, y: V3<T>, normal: V3<T>) -> Result<Self> {
        let tol = T::of(1e-10);
        let one = T::one();
        for v in [&x, &y, &normal] {
            if (norm(v) - one).abs() > tol {
                return Err(Error::DegenerateGeometry(
                    "frame vectors must be unit length".into(),
                ));
            }
        }
        if dot(&x, &y).abs() > tol || dot(&x, &normal).abs() > tol || dot(&y, &normal).abs() > tol
        {
            return Err(Error::DegenerateGeometry(
                "frame vectors must be pairwise orthogonal".into(),
            ));
        }
        // right-handedness: det[x y n] = ⟨x × y, n⟩ = +1
        if (dot(&cross(&x, &y), &normal) - one).abs() > tol {
            return Err(Error::DegenerateGeometry("frame must be right-handed".into()));
        }
        Ok(Self { x, y, normal })
    }

    /// Apply a rotation to all three axes.
    pub fn rotated(&self, m: &[V3<T>; 3]) -> Self {
        Self {
            x: mat_apply(m, &self.x),
            y: mat_apply(m, &self.y),
            normal: mat_apply(m, &self.normal),
        }
    }
}

/// Deterministic tangent frame for a unit normal: project the canonical axis
/// least aligned with n onto the tangent plane, then y = n × x.
pub fn make_frame<T: Scalar>(normal: V3<T>) -> Result<Frame<T>> {
    let len = norm(&normal);
    if len < T::of(1e-12) {
        return Err(Error::DegenerateGeometry("zero normal".into()));
    }
    if (len - T::one()).abs() > T::of(1e-6) {
        return Err(Error::InvalidArgument(format!(
            "normal must be unit length, |n| = {len}"
        )));
    }
    let n = scale(&normal, T::one() / len);
    let axes: [V3<T>; 3] = [
        [T::one(), T::zero(), T::zero()],
        [T::zero(), T::one(), T::zero()],
        [T::zero(), T::zero(), T::one()],
    ];
    let mut best = 0usize;
    let mut best_align = T::infinity();
    for (i, a) in axes.iter().enumerate() {
        let al = dot(a, &n).abs();
        if al < best_align {
            best_align = al;
            best = i;
        }
    }
    let a = axes[best];
    let proj = sub(&a, &scale(&n, dot(&a, &n)));
    let x = scale(&proj, T::one() / norm(&proj));
    let y = cross(&n, &x);
    Frame::new(x, y, n)
}

/// Surface element: position plus tangent frame.
#[derive(Debug, Clone)]
pub struct Surfel<T> {
    pub position: V3<T>,
    pub frame: Frame<T>,
}

impl<T: Scalar> Surfel<T> {
    pub fn new(position: V3<T>, frame: Frame<T>) -> Self {
        Self { position, frame }
    }

    /// Rigid motion: rotate by `m` (rows), then translate.
    pub fn transformed(&self, m: &[V3<T>; 3], t: &V3<T>) -> Self {
        let p = mat_apply(m, &self.position);
        Self {
            position: [p[0] + t[0], p[1] + t[1], p[2] + t[2]],
            frame: self.frame.rotated(m),
        }
    }
}

/// Oriented point cloud carrying a Fourier feature map.
#[derive(Debug, Clone)]
pub struct SurfelCloud<T> {
    pub surfels: Vec<Surfel<T>>,
    pub features: FeatureMap<T>,
}

impl<T: Scalar> SurfelCloud<T> {
    pub fn new(surfels: Vec<Surfel<T>>, features: FeatureMap<T>) -> Result<Self> {
        if surfels.len() != features.num_points() {
            return Err(Error::DimensionMismatch(format!(
                "{} surfels vs {} feature points",
                surfels.len(),
                features.num_points()
            )));
        }
        Ok(Self { surfels, features })
    }

    /// Rigid motion of the whole cloud; the features are attached to the
    /// frames and do not change.
    pub fn transformed(&self, m: &[V3<T>; 3], t: &V3<T>) -> Self {
        Self {
            surfels: self.surfels.iter().map(|s| s.transformed(m, t)).collect(),
            features: self.features.clone(),
        }
    }
}

// ---------------------------------------------------------------------------
// Common-tangent alignment
// ---------------------------------------------------------------------------

/// Alignment parameters between two frames: the imaginary-part scale and the
/// angular positions e^{iψ} of the common tangent in both frames.
pub(crate) fn align_params<T: Scalar>(
    from: &Frame<T>,
    to: &Frame<T>,
) -> (T, Complex<T>, Complex<T>) {
    let c = dot(&from.normal, &to.normal);
    let u_raw = cross(&from.normal, &to.normal);
    let len = norm(&u_raw);
    let (u, im_scale) = if len < T::of(1e-8) {
        // Parallel or antiparallel normals: the tangent planes coincide, any
        // in-plane vector is common; use the target x-axis projected into the
        // source plane. The imaginary parts pick up sign(⟨n₁,n₂⟩).
        let p = sub(&to.x, &scale(&from.normal, dot(&to.x, &from.normal)));
        let pl = norm(&p);
        (scale(&p, T::one() / pl), c.signum())
    } else {
        (scale(&u_raw, T::one() / len), c)
    };
    let psi_from = dot(&u, &from.y).atan2(dot(&u, &from.x));
    let psi_to = dot(&u, &to.y).atan2(dot(&u, &to.x));
    (
        im_scale,
        Complex::from_polar(T::one(), psi_from),
        Complex::from_polar(T::one(), psi_to),
    )
}

#[inline]
pub(crate) fn align_one<T: Scalar>(
    z: Complex<T>,
    im_scale: T,
    a: Complex<T>, // conj(p_from)^k
    b: Complex<T>, // p_to^k
) -> Complex<T> {
    let v = z * a;
    Complex::new(v.re, v.im * im_scale) * b
}

/// Move a signal from one tangent frame into another: rotate the angular
/// origin onto the common tangent, scale the imaginary parts by ⟨n₁,n₂⟩,
/// rotate into the target frame's origin.
pub fn align_coefficients<T: Scalar>(
    signal: &BandLimitedSignal<T>,
    from: &Frame<T>,
    to: &Frame<T>,
) -> BandLimitedSignal<T> {
    let (im_scale, p1, p2) = align_params(from, to);
    let k_max = signal.max_freq();
    let mut coeffs = Vec::with_capacity(k_max + 1);
    let mut a = Complex::new(T::one(), T::zero());
    let mut b = Complex::new(T::one(), T::zero());
    let p1c = p1.conj();
    for k in 0..=k_max {
        if k > 0 {
            a = a * p1c;
            b = b * p2;
        }
        coeffs.push(align_one(signal.coeff(k), im_scale, a, b));
    }
    BandLimitedSignal::from_coeffs_lossy(coeffs)
}

// ---------------------------------------------------------------------------
// Stacked-ring surfel filters
// ---------------------------------------------------------------------------

/// One level of the vertical filter stack: a ring of `radius` in the tangent
/// plane, displaced by `height` along the normal.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StackLevel {
    pub height: f64,
    pub radius: f64,
}

/// Vertical stack of radial filters in the tangent plane. One Gaussian width
/// is shared between the radial and vertical directions.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StackFilterSpec {
    pub levels: Vec<StackLevel>,
    pub sigma: f64,
}

impl StackFilterSpec {
    /// Equidistant levels from `h_start` to `h_end` (inclusive) with the
    /// given step, all sharing one ring radius.
    pub fn equidistant(
        radius: f64,
        h_start: f64,
        h_end: f64,
        h_step: f64,
        sigma: f64,
    ) -> Result<Self> {
        if sigma <= 0.0 || h_step <= 0.0 {
            return Err(Error::InvalidArgument(
                "stack sigma and step must be positive".into(),
            ));
        }
        let mut levels = Vec::new();
        let mut h = h_start;
        while h <= h_end + 1e-9 {
            levels.push(StackLevel { height: h, radius });
            h += h_step;
        }
        Ok(Self { levels, sigma })
    }

    /// σ = FWHM / √(8 ln 2).
    pub fn sigma_from_fwhm(fwhm: f64) -> f64 {
        fwhm / (8.0 * std::f64::consts::LN_2).sqrt()
    }

    pub fn weight(&self, level: usize, r: f64, h: f64) -> f64 {
        let l = &self.levels[level];
        let dr = r - l.radius;
        let dh = h - l.height;
        (-(dr * dr + dh * dh) / (2.0 * self.sigma * self.sigma)).exp()
    }

    /// Weight layout for a surfel layer: one slot group per level; no
    /// frequency-set restriction, so every k' - k offset is admissible.
    pub fn layout(&self, k_in: usize, k_out: usize, d_in: usize, d_out: usize) -> QLayout {
        let max_order = (k_in + k_out) as i32;
        let rings: Vec<RingSpec> = self
            .levels
            .iter()
            .map(|l| RingSpec::new(l.radius.max(f64::MIN_POSITIVE), self.sigma, max_order))
            .collect();
        let spec = RingFilterSpec::new(rings).expect("stack levels build a valid ring spec");
        QLayout::new(spec, k_in, k_out, d_in, d_out)
    }
}

/// Precomputed pair data for one surfel layer: neighbor lists, per-level
/// radial-vertical weights, in-plane phases and alignment parameters.
#[derive(Debug)]
pub struct SurfelPlan<T> {
    pub n_in: usize,
    pub n_out: usize,
    offsets: Vec<u32>,
    nbr: Vec<u32>,
    level_w: Vec<T>,
    phases: Vec<Complex<T>>,
    align_c: Vec<T>,
    align_p1: Vec<Complex<T>>,
    align_p2: Vec<Complex<T>>,
    deltas: Vec<i32>,
    slot_delta_idx: Vec<usize>,
    n_levels: usize,
}

pub fn build_surfel_plan<T: Scalar>(
    inputs: &[Surfel<T>],
    outputs: &[Surfel<T>],
    stack: &StackFilterSpec,
    layout: &QLayout,
) -> SurfelPlan<T> {
    let n_levels = stack.levels.len();
    let mut deltas: Vec<i32> = layout.slots.iter().map(|s| s.delta).collect();
    deltas.sort_unstable();
    deltas.dedup();
    let slot_delta_idx: Vec<usize> = layout
        .slots
        .iter()
        .map(|s| deltas.binary_search(&s.delta).unwrap())
        .collect();
    let max_abs_delta = deltas.iter().map(|d| d.unsigned_abs()).max().unwrap_or(0) as usize;

    let mut offsets = vec![0u32];
    let mut nbr = Vec::new();
    let mut level_w: Vec<T> = Vec::new();
    let mut phases: Vec<Complex<T>> = Vec::new();
    let mut align_c = Vec::new();
    let mut align_p1 = Vec::new();
    let mut align_p2 = Vec::new();
    let mut pow_buf = vec![Complex::new(T::one(), T::zero()); max_abs_delta + 1];

    for out in outputs {
        for (j, inp) in inputs.iter().enumerate() {
            let d = sub(&inp.position, &out.position);
            let h = dot(&d, &out.frame.normal);
            let rho = sub(&d, &scale(&out.frame.normal, h));
            let r = norm(&rho);
            let (rf, hf) = (r.to_f64_(), h.to_f64_());
            let mut any = false;
            let base = level_w.len();
            level_w.resize(base + n_levels, T::zero());
            for l in 0..n_levels {
                let w = stack.weight(l, rf, hf);
                if w >= crate::conv2d::RING_CUTOFF {
                    any = true;
                }
                level_w[base + l] = T::of(w);
            }
            if !any {
                level_w.truncate(base);
                continue;
            }
            nbr.push(j as u32);

            if r > T::zero() {
                // e^{iθ_cw} with θ_cw = -atan2(⟨ρ,y⟩, ⟨ρ,x⟩)
                let ux = dot(&rho, &out.frame.x) / r;
                let uy = dot(&rho, &out.frame.y) / r;
                let unit = Complex::new(ux, -uy);
                pow_buf[0] = Complex::new(T::one(), T::zero());
                for p in 1..=max_abs_delta {
                    pow_buf[p] = pow_buf[p - 1] * unit;
                }
                for &dd in &deltas {
                    let p = pow_buf[dd.unsigned_abs() as usize];
                    phases.push(if dd >= 0 { p } else { p.conj() });
                }
            } else {
                // in-plane direction undefined: only δ = 0 survives
                for &dd in &deltas {
                    phases.push(if dd == 0 {
                        Complex::new(T::one(), T::zero())
                    } else {
                        Complex::new(T::zero(), T::zero())
                    });
                }
            }

            let (c, p1, p2) = align_params(&inp.frame, &out.frame);
            align_c.push(c);
            align_p1.push(p1);
            align_p2.push(p2);
        }
        offsets.push(nbr.len() as u32);
    }

    SurfelPlan {
        n_in: inputs.len(),
        n_out: outputs.len(),
        offsets,
        nbr,
        level_w,
        phases,
        align_c,
        align_p1,
        align_p2,
        deltas,
        slot_delta_idx,
        n_levels,
    }
}

/// Align one full-band row into the output frame.
fn align_row<T: Scalar>(
    src: &[Complex<T>],
    dst: &mut [Complex<T>],
    k_in: usize,
    lane: usize,
    c: T,
    p1: Complex<T>,
    p2: Complex<T>,
) {
    let p1c = p1.conj();
    let mut a = Complex::new(T::one(), T::zero());
    let mut b = Complex::new(T::one(), T::zero());
    let mid = k_in;
    for (d, s) in dst[mid * lane..(mid + 1) * lane]
        .iter_mut()
        .zip(&src[mid * lane..(mid + 1) * lane])
    {
        *d = align_one(*s, c, a, b);
    }
    for k in 1..=k_in {
        a = a * p1c;
        b = b * p2;
        let hi = mid + k;
        for (d, s) in dst[hi * lane..(hi + 1) * lane]
            .iter_mut()
            .zip(&src[hi * lane..(hi + 1) * lane])
        {
            *d = align_one(*s, c, a, b);
        }
        let lo = mid - k;
        let (ac, bc) = (a.conj(), b.conj());
        for (d, s) in dst[lo * lane..(lo + 1) * lane]
            .iter_mut()
            .zip(&src[lo * lane..(lo + 1) * lane])
        {
            *d = align_one(*s, c, ac, bc);
        }
    }
}

/// Adjoint of [`align_row`] (the alignment is real-linear); accumulates.
fn align_row_adjoint<T: Scalar>(
    src: &[Complex<T>],
    dst: &mut [Complex<T>],
    k_in: usize,
    lane: usize,
    c: T,
    p1: Complex<T>,
    p2: Complex<T>,
) {
    let p2c = p2.conj();
    let mut a = Complex::new(T::one(), T::zero());
    let mut b = Complex::new(T::one(), T::zero());
    let mid = k_in;
    for (d, s) in dst[mid * lane..(mid + 1) * lane]
        .iter_mut()
        .zip(&src[mid * lane..(mid + 1) * lane])
    {
        *d += align_one(*s, c, b, a);
    }
    for k in 1..=k_in {
        a = a * p1;
        b = b * p2c;
        let hi = mid + k;
        for (d, s) in dst[hi * lane..(hi + 1) * lane]
            .iter_mut()
            .zip(&src[hi * lane..(hi + 1) * lane])
        {
            *d += align_one(*s, c, b, a);
        }
        let lo = mid - k;
        let (ac, bc) = (a.conj(), b.conj());
        for (d, s) in dst[lo * lane..(lo + 1) * lane]
            .iter_mut()
            .zip(&src[lo * lane..(lo + 1) * lane])
        {
            *d += align_one(*s, c, bc, ac);
        }
    }
}

/// Forward surfel convolution: align each neighbor's coefficients into the
/// output frame, then gather with radial-vertical weights and in-plane
/// steering phases, then mix through the weights.
pub fn surfel_conv_kernel<T: Scalar>(
    plan: &SurfelPlan<T>,
    layout: &QLayout,
    q_dense: &[Complex<T>],
    input: &FeatureMap<T>,
) -> Result<FeatureMap<T>> {
    if input.num_points() != plan.n_in {
        return Err(Error::DimensionMismatch(format!(
            "plan expects {} input surfels, features have {}",
            plan.n_in,
            input.num_points()
        )));
    }
    if input.num_channels() != layout.d_in || input.max_freq() != layout.k_in {
        return Err(Error::DimensionMismatch(
            "surfel layer channel or band-limit mismatch".into(),
        ));
    }
    let b_n = input.batch();
    let (d_in, d_out) = (layout.d_in, layout.d_out);
    let (k_in, k_out) = (layout.k_in, layout.k_out);
    let band = 2 * k_in + 1;
    let lane = b_n * d_in;
    let out_row = (k_out + 1) * b_n * d_out;

    let z_full = repack_full_band(input);
    let mut out_work = vec![Complex::new(T::zero(), T::zero()); plan.n_out * out_row];

    out_work
        .par_chunks_mut(out_row)
        .enumerate()
        .for_each(|(i, out_i)| {
            let zero = Complex::new(T::zero(), T::zero());
            let mut y = vec![zero; layout.y_lanes * lane];
            let mut aligned = vec![zero; band * lane];
            let start = plan.offsets[i] as usize;
            let end = plan.offsets[i + 1] as usize;
            for pair in start..end {
                let j = plan.nbr[pair] as usize;
                align_row(
                    &z_full[j * band * lane..(j + 1) * band * lane],
                    &mut aligned,
                    k_in,
                    lane,
                    plan.align_c[pair],
                    plan.align_p1[pair],
                    plan.align_p2[pair],
                );
                let lw = &plan.level_w[pair * plan.n_levels..(pair + 1) * plan.n_levels];
                let ph = &plan.phases[pair * plan.deltas.len()..(pair + 1) * plan.deltas.len()];
                for (s, slot) in layout.slots.iter().enumerate() {
                    let w = ph[plan.slot_delta_idx[s]] * lw[slot.ring];
                    let k0 = (slot.k_lo + k_in as i32) as usize;
                    let x = &aligned[k0 * lane..(k0 + slot.k_len) * lane];
                    let dst = &mut y[slot.y_off * lane..(slot.y_off + slot.k_len) * lane];
                    caxpy(w, x, dst);
                }
            }
            mix_point(layout, q_dense, &y, out_i, b_n, d_in, d_out);
        });

    let mut out = FeatureMap::zeros(b_n, plan.n_out, d_out, k_out);
    for p in 0..plan.n_out {
        for kf in 0..=k_out {
            let row = (p * (k_out + 1) + kf) * b_n * d_out;
            for b in 0..b_n {
                for o in 0..d_out {
                    let mut z = out_work[row + b * d_out + o];
                    if kf == 0 {
                        z.im = T::zero();
                    }
                    out.signal_mut(b, p, o)[kf] = z;
                }
            }
        }
    }
    Ok(out)
}

/// Reverse-mode kernel for the surfel convolution.
pub fn surfel_conv_backward_kernel<T: Scalar>(
    plan: &SurfelPlan<T>,
    layout: &QLayout,
    q_dense: &[Complex<T>],
    input: &FeatureMap<T>,
    grad_out: &FeatureMap<T>,
    need_input_grad: bool,
) -> (Option<FeatureMap<T>>, Vec<Complex<T>>) {
    let b_n = input.batch();
    let (d_in, d_out) = (layout.d_in, layout.d_out);
    let (k_in, k_out) = (layout.k_in, layout.k_out);
    let band = 2 * k_in + 1;
    let lane = b_n * d_in;
    let out_row = (k_out + 1) * b_n * d_out;
    let zero = Complex::new(T::zero(), T::zero());

    let z_full = repack_full_band(input);

    let n_threads = rayon::current_num_threads().max(1);
    let chunk = plan.n_out.div_ceil(n_threads * 4).max(1);

    let (dz_full, dq_dense) = (0..plan.n_out.div_ceil(chunk))
        .into_par_iter()
        .map(|ci| {
            let i0 = ci * chunk;
            let i1 = ((ci + 1) * chunk).min(plan.n_out);
            let mut y = vec![zero; layout.y_lanes * lane];
            let mut dy = vec![zero; layout.y_lanes * lane];
            let mut aligned = vec![zero; band * lane];
            let mut d_aligned = vec![zero; band * lane];
            let mut dq = vec![zero; layout.dense_len];
            let mut dz = if need_input_grad {
                vec![zero; z_full.len()]
            } else {
                Vec::new()
            };
            let mut g_i = vec![zero; out_row];
            for i in i0..i1 {
                for kf in 0..=k_out {
                    for b in 0..b_n {
                        for o in 0..d_out {
                            let mut z = grad_out.signal(b, i, o)[kf];
                            if kf == 0 {
                                z.im = T::zero();
                            }
                            g_i[(kf * b_n + b) * d_out + o] = z;
                        }
                    }
                }

                for v in y.iter_mut() {
                    *v = zero;
                }
                let start = plan.offsets[i] as usize;
                let end = plan.offsets[i + 1] as usize;
                for pair in start..end {
                    let j = plan.nbr[pair] as usize;
                    align_row(
                        &z_full[j * band * lane..(j + 1) * band * lane],
                        &mut aligned,
                        k_in,
                        lane,
                        plan.align_c[pair],
                        plan.align_p1[pair],
                        plan.align_p2[pair],
                    );
                    let lw = &plan.level_w[pair * plan.n_levels..(pair + 1) * plan.n_levels];
                    let ph =
                        &plan.phases[pair * plan.deltas.len()..(pair + 1) * plan.deltas.len()];
                    for (s, slot) in layout.slots.iter().enumerate() {
                        let w = ph[plan.slot_delta_idx[s]] * lw[slot.ring];
                        let k0 = (slot.k_lo + k_in as i32) as usize;
                        let x = &aligned[k0 * lane..(k0 + slot.k_len) * lane];
                        let dst = &mut y[slot.y_off * lane..(slot.y_off + slot.k_len) * lane];
                        caxpy(w, x, dst);
                    }
                }

                for v in dy.iter_mut() {
                    *v = zero;
                }
                for slot in &layout.slots {
                    for ki in 0..slot.k_len {
                        let k = slot.k_lo + ki as i32;
                        let kf_out = (k + slot.delta) as usize;
                        let qb = &q_dense[slot.dense_off + ki * d_out * d_in..];
                        let yb = &y[(slot.y_off + ki) * lane..(slot.y_off + ki + 1) * lane];
                        let dyb =
                            &mut dy[(slot.y_off + ki) * lane..(slot.y_off + ki + 1) * lane];
                        let dqb = &mut dq[slot.dense_off + ki * d_out * d_in
                            ..slot.dense_off + (ki + 1) * d_out * d_in];
                        let gb = &g_i[kf_out * b_n * d_out..(kf_out + 1) * b_n * d_out];
                        for b in 0..b_n {
                            let gv = &gb[b * d_out..(b + 1) * d_out];
                            let yv = &yb[b * d_in..(b + 1) * d_in];
                            let dyv = &mut dyb[b * d_in..(b + 1) * d_in];
                            for o in 0..d_out {
                                let g = gv[o];
                                let qr = &qb[o * d_in..o * d_in + d_in];
                                let dqr = &mut dqb[o * d_in..o * d_in + d_in];
                                for c in 0..d_in {
                                    let q = qr[c];
                                    dyv[c].re += q.re * g.re + q.im * g.im;
                                    dyv[c].im += q.re * g.im - q.im * g.re;
                                    let yc = yv[c];
                                    dqr[c].re += g.re * yc.re + g.im * yc.im;
                                    dqr[c].im += g.im * yc.re - g.re * yc.im;
                                }
                            }
                        }
                    }
                }

                if need_input_grad {
                    for pair in start..end {
                        let j = plan.nbr[pair] as usize;
                        for v in d_aligned.iter_mut() {
                            *v = zero;
                        }
                        let lw =
                            &plan.level_w[pair * plan.n_levels..(pair + 1) * plan.n_levels];
                        let ph = &plan.phases
                            [pair * plan.deltas.len()..(pair + 1) * plan.deltas.len()];
                        for (s, slot) in layout.slots.iter().enumerate() {
                            let w = ph[plan.slot_delta_idx[s]] * lw[slot.ring];
                            let k0 = (slot.k_lo + k_in as i32) as usize;
                            let src = &dy[slot.y_off * lane..(slot.y_off + slot.k_len) * lane];
                            let dst = &mut d_aligned[k0 * lane..(k0 + slot.k_len) * lane];
                            caxpy(w.conj(), src, dst);
                        }
                        align_row_adjoint(
                            &d_aligned,
                            &mut dz[j * band * lane..(j + 1) * band * lane],
                            k_in,
                            lane,
                            plan.align_c[pair],
                            plan.align_p1[pair],
                            plan.align_p2[pair],
                        );
                    }
                }
            }
            (dz, dq)
        })
        .collect::<Vec<_>>()
        .into_iter()
        // sequential merge keeps float accumulation order independent of
        // thread scheduling, so training runs are bit-reproducible
        .fold(
            (Vec::new(), vec![zero; layout.dense_len]),
            |(mut az, mut aq), (bz, bq)| {
                if az.is_empty() {
                    az = bz;
                } else if !bz.is_empty() {
                    for (a, b) in az.iter_mut().zip(bz) {
                        *a += b;
                    }
                }
                for (a, b) in aq.iter_mut().zip(bq) {
                    *a += b;
                }
                (az, aq)
            },
        );

    let grad_in = if need_input_grad {
        let mut g = FeatureMap::zeros(b_n, input.num_points(), d_in, k_in);
        for p in 0..input.num_points() {
            for b in 0..b_n {
                for c in 0..d_in {
                    let sig = g.signal_mut(b, p, c);
                    for k in 0..=k_in {
                        let pos = ((p * band + (k_in + k)) * b_n + b) * d_in + c;
                        let mut acc = dz_full[pos];
                        if k > 0 {
                            let neg = ((p * band + (k_in - k)) * b_n + b) * d_in + c;
                            acc += dz_full[neg].conj();
                        } else {
                            acc.im = T::zero();
                        }
                        sig[k] = acc;
                    }
                }
            }
        }
        Some(g)
    } else {
        None
    };

    (grad_in, dq_dense)
}

/// Surfel convolution with explicit output surfels.
pub fn surfel_conv<T: Scalar>(
    input: &SurfelCloud<T>,
    stack: &StackFilterSpec,
    params: &crate::conv2d::LayerParams<T>,
    outputs: &[Surfel<T>],
) -> Result<SurfelCloud<T>> {
    let plan = build_surfel_plan(&input.surfels, outputs, stack, &params.layout);
    let features = surfel_conv_kernel(&plan, &params.layout, &params.dense(), &input.features)?;
    SurfelCloud::new(outputs.to_vec(), features)
}

// ---------------------------------------------------------------------------
// Synthetic geometry
// ---------------------------------------------------------------------------

/// Fibonacci sphere sampling with outward normals.
pub fn fibonacci_sphere<T: Scalar>(n: usize, radius: f64) -> Vec<Surfel<T>> {
    let golden = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            let normal = [r * phi.cos(), r * phi.sin(), z];
            let position = [
                T::of(radius * normal[0]),
                T::of(radius * normal[1]),
                T::of(radius * normal[2]),
            ];
            let frame = make_frame(normal.map(T::of)).expect("sphere normals are unit");
            Surfel::new(position, frame)
        })
        .collect()
}

/// Flat grid of surfels in the z = 0 plane with identical canonical frames.
pub fn plane_grid<T: Scalar>(side: usize, spacing: f64) -> Vec<Surfel<T>> {
    let c0 = (side as f64 - 1.0) / 2.0;
    let mut out = Vec::with_capacity(side * side);
    for yi in 0..side {
        for xi in 0..side {
            let position = [
                T::of((xi as f64 - c0) * spacing),
                T::of((yi as f64 - c0) * spacing),
                T::zero(),
            ];
            let frame = Frame::new(
                [T::one(), T::zero(), T::zero()],
                [T::zero(), T::one(), T::zero()],
                [T::zero(), T::zero(), T::one()],
            )
            .unwrap();
            out.push(Surfel::new(position, frame));
        }
    }
    out
}

/// Torus sampling with analytic normals.
pub fn torus<T: Scalar>(n: usize, major: f64, minor: f64) -> Vec<Surfel<T>> {
    let golden = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
    (0..n)
        .map(|i| {
            let u = golden * i as f64;
            let v = 2.0 * std::f64::consts::PI * (i as f64 + 0.5) / n as f64 * 7.0;
            let (cu, su) = (u.cos(), u.sin());
            let (cv, sv) = (v.cos(), v.sin());
            let position = [
                (major + minor * cv) * cu,
                (major + minor * cv) * su,
                minor * sv,
            ];
            let normal = [cv * cu, cv * su, sv];
            let frame = make_frame(normal.map(T::of)).expect("torus normals are unit");
            Surfel::new(position.map(T::of), frame)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv2d::{build_conv_plan, conv_forward_kernel, LayerParams};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_unit<T: Scalar>(rng: &mut ChaCha8Rng) -> V3<T> {
        loop {
            let v = [
                f64::sample_normal(rng),
                f64::sample_normal(rng),
                f64::sample_normal(rng),
            ];
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if n > 1e-3 {
                return [T::of(v[0] / n), T::of(v[1] / n), T::of(v[2] / n)];
            }
        }
    }

    fn random_signal(rng: &mut ChaCha8Rng, k: usize) -> BandLimitedSignal<f64> {
        let mut coeffs = vec![Complex::new(rng.random_range(-1.0..1.0), 0.0)];
        for _ in 1..=k {
            coeffs.push(Complex::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ));
        }
        BandLimitedSignal::new(coeffs).unwrap()
    }

    #[test]
    fn make_frame_canonical() {
        let f = make_frame([0.0, 0.0, 1.0f64]).unwrap();
        assert_eq!(f.x, [1.0, 0.0, 0.0]);
        assert_eq!(f.y, [0.0, 1.0, 0.0]);
    }

    #[test]
    fn make_frame_invariants_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let n: V3<f64> = random_unit(&mut rng);
            let f = make_frame(n).unwrap();
            let g = make_frame([-n[0], -n[1], -n[2]]).unwrap();
            assert_abs_diff_eq!(dot(&g.normal, &n), -1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(dot(&cross(&f.x, &f.y), &f.normal), 1.0, epsilon = 1e-12);
        }
        assert!(make_frame([0.0f64, 0.0, 0.0]).is_err());
        assert!(make_frame([0.0f64, 0.0, 1.01]).is_err());
    }

    #[test]
    fn align_identity_for_equal_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let f = make_frame::<f64>(random_unit(&mut rng)).unwrap();
            let s = random_signal(&mut rng, 4);
            let out = align_coefficients(&s, &f, &f);
            for k in 0..=4 {
                assert!((out.coeff(k) - s.coeff(k)).norm() < 1e-14);
            }
        }
    }

    #[test]
    fn align_k1_matches_tangent_projection_oracle() {
        // A k=1 signal is the tangent vector t = Re(z₁)x + Im(z₁)y. Aligning
        // must equal projecting t into the target plane and reading it in the
        // target basis.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let f1 = make_frame::<f64>(random_unit(&mut rng)).unwrap();
            let f2 = make_frame::<f64>(random_unit(&mut rng)).unwrap();
            let z1 = Complex::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let s = BandLimitedSignal::new(vec![Complex::new(0.0, 0.0), z1]).unwrap();
            let aligned = align_coefficients(&s, &f1, &f2);

            let t = [
                z1.re * f1.x[0] + z1.im * f1.y[0],
                z1.re * f1.x[1] + z1.im * f1.y[1],
                z1.re * f1.x[2] + z1.im * f1.y[2],
            ];
            let tp = sub(&t, &scale(&f2.normal, dot(&t, &f2.normal)));
            let want = Complex::new(dot(&tp, &f2.x), dot(&tp, &f2.y));
            assert!(
                (aligned.coeff(1) - want).norm() < 1e-12,
                "projection oracle: {want} vs {:?}",
                aligned.coeff(1)
            );
        }
    }

    #[test]
    fn align_is_rotation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let f1 = make_frame::<f64>(random_unit(&mut rng)).unwrap();
            let f2 = make_frame::<f64>(random_unit(&mut rng)).unwrap();
            let s = random_signal(&mut rng, 4);
            let base = align_coefficients(&s, &f1, &f2);
            let m = random_rotation::<f64, _>(&mut rng);
            let rotated = align_coefficients(&s, &f1.rotated(&m), &f2.rotated(&m));
            for k in 0..=4 {
                assert!((base.coeff(k) - rotated.coeff(k)).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn align_roundtrip_scales_u_frame_imaginaries() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let f1 = make_frame::<f64>(random_unit(&mut rng)).unwrap();
            let f2 = make_frame::<f64>(random_unit(&mut rng)).unwrap();
            let s = random_signal(&mut rng, 4);
            let round = align_coefficients(&align_coefficients(&s, &f1, &f2), &f2, &f1);

            let (c, p1, _) = align_params(&f1, &f2);
            let c2 = c * c;
            let mut a = Complex::new(1.0, 0.0);
            for k in 0..=4 {
                if k > 0 {
                    a *= p1.conj();
                }
                // roundtrip = rotate to u, scale Im by ⟨n₁,n₂⟩², rotate back
                let v = s.coeff(k) * a;
                let want = Complex::new(v.re, v.im * c2) * a.conj();
                assert!(
                    (round.coeff(k) - want).norm() < 1e-12,
                    "k={k}: {want} vs {:?}",
                    round.coeff(k)
                );
            }
        }
    }

    #[test]
    fn align_roundtrip_identity_when_u_frame_imag_zero() {
        // Frame 1 built with x along the common tangent: a real coefficient
        // then has Im = 0 in the u frame and the roundtrip is the identity.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let n1: V3<f64> = random_unit(&mut rng);
            let n2: V3<f64> = random_unit(&mut rng);
            let u_raw = cross(&n1, &n2);
            if norm(&u_raw) < 1e-3 {
                continue;
            }
            let u = scale(&u_raw, 1.0 / norm(&u_raw));
            let y1 = cross(&n1, &u);
            let f1 = Frame::new(u, y1, n1).unwrap();
            let f2 = make_frame(n2).unwrap();
            let s = BandLimitedSignal::new(vec![
                Complex::new(0.3, 0.0),
                Complex::new(-0.7, 0.0),
                Complex::new(0.2, 0.0),
            ])
            .unwrap();
            let round = align_coefficients(&align_coefficients(&s, &f1, &f2), &f2, &f1);
            for k in 0..=2 {
                assert!((round.coeff(k) - s.coeff(k)).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn align_degenerate_normals() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let n: V3<f64> = random_unit(&mut rng);
        let f1 = make_frame(n).unwrap();
        let s = random_signal(&mut rng, 3);

        let out = align_coefficients(&s, &f1, &f1);
        for k in 0..=3 {
            assert!((out.coeff(k) - s.coeff(k)).norm() < 1e-13);
        }

        // antiparallel: planes coincide, projection oracle still applies
        let f2 = make_frame([-n[0], -n[1], -n[2]]).unwrap();
        let out = align_coefficients(&s, &f1, &f2);
        let z1 = s.coeff(1);
        let t = [
            z1.re * f1.x[0] + z1.im * f1.y[0],
            z1.re * f1.x[1] + z1.im * f1.y[1],
            z1.re * f1.x[2] + z1.im * f1.y[2],
        ];
        let want = Complex::new(dot(&t, &f2.x), dot(&t, &f2.y));
        assert!((out.coeff(1) - want).norm() < 1e-12);
    }

    #[test]
    fn planar_stack_degenerates_to_conv2d() {
        // Coplanar surfels with identical frames and a single level at h = 0:
        // the surfel layer must match the 2D layer with the same ring.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let side = 5;
        let surfels: Vec<Surfel<f64>> = plane_grid(side, 1.0);
        let stack = StackFilterSpec {
            levels: vec![StackLevel {
                height: 0.0,
                radius: 1.0,
            }],
            sigma: 0.6,
        };
        let (k, d_in, d_out) = (2usize, 2usize, 3usize);
        let layout = stack.layout(k, k, d_in, d_out);
        let params = LayerParams::<f64>::init(layout.clone(), &mut rng);

        let features = crate::conv2d::tests::random_features(&mut rng, 2, side * side, d_in, k);
        let cloud = SurfelCloud::new(surfels.clone(), features.clone()).unwrap();
        let out3d = surfel_conv(&cloud, &stack, &params, &surfels).unwrap();

        let coords2d: Vec<[f64; 2]> = surfels
            .iter()
            .map(|s| [s.position[0], s.position[1]])
            .collect();
        let plan2d = build_conv_plan(&coords2d, &coords2d, &layout);
        let out2d = conv_forward_kernel(&plan2d, &layout, &params.dense(), &features).unwrap();

        let scale = out2d.data().iter().map(|z| z.norm()).fold(1e-12, f64::max);
        for (a, b) in out3d.features.data().iter().zip(out2d.data()) {
            assert!(
                (a - b).norm() / scale < 1e-10,
                "planar degeneration mismatch: {a} vs {b}"
            );
        }
    }

    #[test]
    fn surfel_conv_is_se3_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let surfels: Vec<Surfel<f64>> = fibonacci_sphere(60, 1.0);
        let stack = StackFilterSpec::equidistant(0.4, -0.4, 0.4, 0.4, 0.17).unwrap();
        let (k, d_in, d_out) = (2usize, 2usize, 2usize);
        let layout = stack.layout(k, k, d_in, d_out);
        let params = LayerParams::<f64>::init(layout, &mut rng);
        let features = crate::conv2d::tests::random_features(&mut rng, 1, 60, d_in, k);
        let cloud = SurfelCloud::new(surfels.clone(), features).unwrap();

        let base = surfel_conv(&cloud, &stack, &params, &surfels).unwrap();
        for _ in 0..8 {
            let m = random_rotation::<f64, _>(&mut rng);
            let t = [
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            ];
            let moved = cloud.transformed(&m, &t);
            let out = surfel_conv(&moved, &stack, &params, &moved.surfels).unwrap();
            let scale = base
                .features
                .data()
                .iter()
                .map(|z| z.norm())
                .fold(1e-12, f64::max);
            for (a, b) in out.features.data().iter().zip(base.features.data()) {
                assert!(
                    (a - b).norm() / scale < 1e-9,
                    "rigid motion changed coefficients: {a} vs {b}"
                );
            }
        }
    }

    #[test]
    fn sphere_single_layer_invariant_readout() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let surfels: Vec<Surfel<f64>> = fibonacci_sphere(200, 1.0);
        let stack = StackFilterSpec::equidistant(0.2, -0.2, 0.2, 0.2, 0.0849).unwrap();
        let (d_in, d_out) = (1usize, 8usize);
        let layout = stack.layout(0, 4, d_in, d_out);
        let params = LayerParams::<f64>::init(layout, &mut rng);
        let mut features = FeatureMap::<f64>::zeros(1, 200, 1, 0);
        for p in 0..200 {
            features.signal_mut(0, p, 0)[0] = Complex::new(1.0, 0.0);
        }
        let cloud = SurfelCloud::new(surfels.clone(), features).unwrap();

        let readout = |c: &SurfelCloud<f64>| -> Vec<f64> {
            let out = surfel_conv(c, &stack, &params, &c.surfels).unwrap();
            let triv = crate::conv2d::conv2triv(&out.features);
            let n = out.features.num_points();
            (0..d_out)
                .map(|o| (0..n).map(|p| triv[[0, p * d_out + o]]).sum::<f64>() / n as f64)
                .collect()
        };

        let base = readout(&cloud);
        let scale = base.iter().map(|v| v.abs()).fold(1e-12, f64::max);
        for _ in 0..20 {
            let m = random_rotation::<f64, _>(&mut rng);
            let rotated = cloud.transformed(&m, &[0.0, 0.0, 0.0]);
            let got = readout(&rotated);
            for (a, b) in got.iter().zip(&base) {
                assert!(
                    (a - b).abs() / scale < 1e-4,
                    "sphere readout not SO(3)-invariant: {a} vs {b}"
                );
            }
        }
    }
}
