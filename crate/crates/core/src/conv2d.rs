//! SE(2)-equivariant convolution on 2D point clouds with Gaussian-ring
//! steerable kernels, plus Fourier batch normalization, spatial average
//! pooling, cropping and invariant output maps.
//!
//! The kernel attached to each output point is a set of concentric rings
//! ω_m(r) = exp(-(r - r_m)² / 2σ_m²), each carrying a symmetric set of
//! angular frequencies F_m. The trainable tensor q mixes input frequency k
//! into output frequency k' only where k' - k ∈ F_m; this steerability
//! constraint is what makes the layer equivariant.
//!
//! Angle convention: the angular coordinate of a displacement d reads
//! directions as v = x cos α - y sin α, so θ(d) = -atan2(d_y, d_x). With the
//! rotation action `rotate(s, θ)` (coefficients z_k e^{-ikθ}) applied to both
//! coordinates and signals, conv(rot(cloud)) = rot(conv(cloud)).

use crate::error::{Error, Result};
use crate::fourier::FeatureMap;
use crate::scalar::Scalar;
use ndarray::Array2;
use num_complex::Complex;
use rand::Rng;
use rayon::prelude::*;

/// Pairs whose radial weight is below this on every ring are dropped from
/// the neighbor lists.
pub const RING_CUTOFF: f64 = 1e-4;

/// One Gaussian ring of the filter basis: radius, width and the symmetric
/// set of angular frequencies it carries.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RingSpec {
    pub radius: f64,
    pub sigma: f64,
    pub freqs: Vec<i32>,
}

impl RingSpec {
    /// Ring carrying frequencies -max_order..=max_order.
    pub fn new(radius: f64, sigma: f64, max_order: i32) -> Self {
        Self {
            radius,
            sigma,
            freqs: (-max_order..=max_order).collect(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.sigma <= 0.0 {
            return Err(Error::InvalidArgument("ring sigma must be positive".into()));
        }
        for &f in &self.freqs {
            if !self.freqs.contains(&-f) {
                return Err(Error::InvalidArgument(format!(
                    "ring frequency set must be symmetric, missing {}",
                    -f
                )));
            }
        }
        if self.radius == 0.0 && self.freqs != vec![0] {
            return Err(Error::InvalidArgument(
                "a radius-0 ring can only carry frequency 0".into(),
            ));
        }
        Ok(())
    }

    pub fn weight(&self, r: f64) -> f64 {
        let d = r - self.radius;
        (-d * d / (2.0 * self.sigma * self.sigma)).exp()
    }

    fn cutoff_radius(&self) -> f64 {
        self.radius + self.sigma * (2.0 * (1.0 / RING_CUTOFF).ln()).sqrt()
    }
}

/// Steerable kernel geometry: the list of rings.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RingFilterSpec {
    pub rings: Vec<RingSpec>,
}

impl RingFilterSpec {
    pub fn new(rings: Vec<RingSpec>) -> Result<Self> {
        if rings.is_empty() {
            return Err(Error::InvalidArgument("need at least one ring".into()));
        }
        for r in &rings {
            r.validate()?;
        }
        Ok(Self { rings })
    }

    pub fn cutoff_radius(&self) -> f64 {
        self.rings
            .iter()
            .map(RingSpec::cutoff_radius)
            .fold(0.0, f64::max)
    }
}

// ---------------------------------------------------------------------------
// Trainable weight layout
// ---------------------------------------------------------------------------

/// One admissible (ring, δ = k'-k) combination with its contiguous range of
/// input frequencies.
#[derive(Debug, Clone)]
pub struct QSlot {
    pub ring: usize,
    pub delta: i32,
    /// lowest input frequency k of the slot (full band, may be negative)
    pub k_lo: i32,
    pub k_len: usize,
    /// offset into the dense weight vector, in complex entries
    pub dense_off: usize,
    /// offset into the gather scratch, in lanes
    pub y_off: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BlockKind {
    /// k' = 0, k = 0: a single real degree of freedom per (out, in) entry.
    Real,
    /// unconstrained complex entry
    Complex,
    /// k' = 0, k > 0: complex entry whose (k' = 0, -k) partner is its
    /// conjugate, stored once.
    ComplexTied { partner_dense_off: usize },
}

#[derive(Debug, Clone)]
struct BlockDesc {
    kind: BlockKind,
    dense_off: usize,
    raw_off: usize,
    k_out: i32,
}

/// Enumerates the admissible entries of the trainable tensor q for one layer
/// and maps between the raw real parameter vector (the true degrees of
/// freedom) and the dense complex slot representation used by the kernels.
///
/// Entries with k' = 0 satisfy q(m, 0, -k) = conj(q(m, 0, k)) and
/// q(m, 0, 0) real, which guarantees real-valued output functions.
#[derive(Debug, Clone)]
pub struct QLayout {
    pub spec: RingFilterSpec,
    pub k_in: usize,
    pub k_out: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub slots: Vec<QSlot>,
    blocks: Vec<BlockDesc>,
    pub dense_len: usize,
    pub raw_len: usize,
    /// gather lanes (sum of slot k_len)
    pub y_lanes: usize,
}

impl QLayout {
    pub fn new(spec: RingFilterSpec, k_in: usize, k_out: usize, d_in: usize, d_out: usize) -> Self {
        let mut slots = Vec::new();
        let mut dense_off = 0usize;
        let mut y_off = 0usize;
        let block_entries = d_out * d_in;
        for (ring, rs) in spec.rings.iter().enumerate() {
            for &delta in &rs.freqs {
                let k_lo = (-(k_in as i32)).max(-delta);
                let k_hi = (k_in as i32).min(k_out as i32 - delta);
                if k_lo > k_hi {
                    continue;
                }
                let k_len = (k_hi - k_lo + 1) as usize;
                slots.push(QSlot {
                    ring,
                    delta,
                    k_lo,
                    k_len,
                    dense_off,
                    y_off,
                });
                dense_off += k_len * block_entries;
                y_off += k_len;
            }
        }

        // Dense offsets of every (slot, k) block, for partner lookups.
        let locate = |slots: &[QSlot], ring: usize, delta: i32, k: i32| -> Option<usize> {
            slots.iter().find_map(|s| {
                if s.ring == ring && s.delta == delta {
                    let ki = k - s.k_lo;
                    if ki >= 0 && (ki as usize) < s.k_len {
                        return Some(s.dense_off + ki as usize * block_entries);
                    }
                }
                None
            })
        };

        let mut blocks = Vec::new();
        let mut raw_off = 0usize;
        for s in &slots {
            for ki in 0..s.k_len {
                let k = s.k_lo + ki as i32;
                let k_out_freq = k + s.delta;
                let off = s.dense_off + ki * block_entries;
                if k_out_freq > 0 {
                    blocks.push(BlockDesc {
                        kind: BlockKind::Complex,
                        dense_off: off,
                        raw_off,
                        k_out: k_out_freq,
                    });
                    raw_off += 2 * block_entries;
                } else if k == 0 {
                    blocks.push(BlockDesc {
                        kind: BlockKind::Real,
                        dense_off: off,
                        raw_off,
                        k_out: 0,
                    });
                    raw_off += block_entries;
                } else if k > 0 {
                    let partner = locate(&slots, s.ring, k, -k)
                        .expect("symmetric frequency sets guarantee the conjugate partner slot");
                    blocks.push(BlockDesc {
                        kind: BlockKind::ComplexTied {
                            partner_dense_off: partner,
                        },
                        dense_off: off,
                        raw_off,
                        k_out: 0,
                    });
                    raw_off += 2 * block_entries;
                }
                // k < 0 at k' = 0 carries no degrees of freedom: it is the
                // conjugate of its positive-k partner.
            }
        }

        let y_lanes = y_off;
        Self {
            spec,
            k_in,
            k_out,
            d_in,
            d_out,
            slots,
            blocks,
            dense_len: dense_off,
            raw_len: raw_off,
            y_lanes,
        }
    }

    /// Number of trainable real parameters.
    pub fn dof(&self) -> usize {
        self.raw_len
    }

    /// Admissible (ring, input-frequency) pairs feeding output frequency k',
    /// times input channels: the fan-in used for He-style initialization.
    pub fn fan_in(&self, k_out: i32) -> usize {
        let mut pairs = 0usize;
        for s in &self.slots {
            let k = k_out - s.delta;
            if k >= s.k_lo && k < s.k_lo + s.k_len as i32 {
                pairs += 1;
            }
        }
        pairs * self.d_in
    }

    /// Expand raw parameters into the dense complex slot vector.
    pub fn materialize<T: Scalar>(&self, raw: &[T]) -> Vec<Complex<T>> {
        assert_eq!(raw.len(), self.raw_len);
        let ne = self.d_out * self.d_in;
        let mut dense = vec![Complex::new(T::zero(), T::zero()); self.dense_len];
        for b in &self.blocks {
            match b.kind {
                BlockKind::Real => {
                    for e in 0..ne {
                        dense[b.dense_off + e] = Complex::new(raw[b.raw_off + e], T::zero());
                    }
                }
                BlockKind::Complex => {
                    for e in 0..ne {
                        dense[b.dense_off + e] =
                            Complex::new(raw[b.raw_off + 2 * e], raw[b.raw_off + 2 * e + 1]);
                    }
                }
                BlockKind::ComplexTied { partner_dense_off } => {
                    for e in 0..ne {
                        let z = Complex::new(raw[b.raw_off + 2 * e], raw[b.raw_off + 2 * e + 1]);
                        dense[b.dense_off + e] = z;
                        dense[partner_dense_off + e] = z.conj();
                    }
                }
            }
        }
        dense
    }

    /// Fold a gradient over the dense representation back onto the raw
    /// degrees of freedom.
    pub fn fold_grad<T: Scalar>(&self, dense_grad: &[Complex<T>], raw_grad: &mut [T]) {
        assert_eq!(dense_grad.len(), self.dense_len);
        assert_eq!(raw_grad.len(), self.raw_len);
        let ne = self.d_out * self.d_in;
        for b in &self.blocks {
            match b.kind {
                BlockKind::Real => {
                    for e in 0..ne {
                        raw_grad[b.raw_off + e] += dense_grad[b.dense_off + e].re;
                    }
                }
                BlockKind::Complex => {
                    for e in 0..ne {
                        raw_grad[b.raw_off + 2 * e] += dense_grad[b.dense_off + e].re;
                        raw_grad[b.raw_off + 2 * e + 1] += dense_grad[b.dense_off + e].im;
                    }
                }
                BlockKind::ComplexTied { partner_dense_off } => {
                    for e in 0..ne {
                        let g =
                            dense_grad[b.dense_off + e] + dense_grad[partner_dense_off + e].conj();
                        raw_grad[b.raw_off + 2 * e] += g.re;
                        raw_grad[b.raw_off + 2 * e + 1] += g.im;
                    }
                }
            }
        }
    }

    /// Raw vector whose dense expansion has every admissible entry equal to
    /// `value` (real). Handy for oracles with unit weights.
    pub fn uniform_raw<T: Scalar>(&self, value: T) -> Vec<T> {
        let ne = self.d_out * self.d_in;
        let mut raw = vec![T::zero(); self.raw_len];
        for b in &self.blocks {
            match b.kind {
                BlockKind::Real => {
                    for e in 0..ne {
                        raw[b.raw_off + e] = value;
                    }
                }
                _ => {
                    for e in 0..ne {
                        raw[b.raw_off + 2 * e] = value;
                    }
                }
            }
        }
        raw
    }

    /// He-style initialization on the real and imaginary parts, with the
    /// variance set by the fan-in of each output frequency.
    pub fn init_raw<T: Scalar, R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<T> {
        let ne = self.d_out * self.d_in;
        let mut raw = vec![T::zero(); self.raw_len];
        for b in &self.blocks {
            let fan = self.fan_in(b.k_out).max(1);
            let sigma = T::of((1.0 / fan as f64).sqrt());
            let n = match b.kind {
                BlockKind::Real => ne,
                _ => 2 * ne,
            };
            for e in 0..n {
                raw[b.raw_off + e] = T::sample_normal(rng) * sigma;
            }
        }
        raw
    }
}

/// Trainable parameters of one convolution layer: the raw degrees of freedom
/// of the complex tensor q.
#[derive(Debug, Clone)]
pub struct LayerParams<T> {
    pub layout: QLayout,
    pub raw: Vec<T>,
}

impl<T: Scalar> LayerParams<T> {
    pub fn init<R: Rng + ?Sized>(layout: QLayout, rng: &mut R) -> Self {
        let raw = layout.init_raw(rng);
        Self { layout, raw }
    }

    pub fn dense(&self) -> Vec<Complex<T>> {
        self.layout.materialize(&self.raw)
    }
}

// ---------------------------------------------------------------------------
// Geometry plan
// ---------------------------------------------------------------------------

/// Precomputed pair geometry for one (input coords, output coords, layout)
/// combination: neighbor lists within the ring cutoff, per-pair radial
/// weights and per-pair phase powers e^{iδθ}.
#[derive(Debug)]
pub struct ConvPlan<T> {
    pub n_in: usize,
    pub n_out: usize,
    offsets: Vec<u32>,
    nbr: Vec<u32>,
    /// [pair * n_rings]
    ring_w: Vec<T>,
    /// [pair * n_deltas]
    phases: Vec<Complex<T>>,
    deltas: Vec<i32>,
    n_rings: usize,
    /// per slot: index into `deltas`
    slot_delta_idx: Vec<usize>,
}

pub fn build_conv_plan<T: Scalar>(
    in_coords: &[[T; 2]],
    out_coords: &[[T; 2]],
    layout: &QLayout,
) -> ConvPlan<T> {
    let rings = &layout.spec.rings;
    let n_rings = rings.len();
    let cutoff = layout.spec.cutoff_radius();
    let cutoff2 = T::of(cutoff * cutoff);

    let mut deltas: Vec<i32> = layout.slots.iter().map(|s| s.delta).collect();
    deltas.sort_unstable();
    deltas.dedup();
    let slot_delta_idx: Vec<usize> = layout
        .slots
        .iter()
        .map(|s| deltas.binary_search(&s.delta).unwrap())
        .collect();
    let max_abs_delta = deltas.iter().map(|d| d.unsigned_abs()).max().unwrap_or(0) as usize;

    let mut offsets = Vec::with_capacity(out_coords.len() + 1);
    let mut nbr: Vec<u32> = Vec::new();
    let mut ring_w: Vec<T> = Vec::new();
    let mut phases: Vec<Complex<T>> = Vec::new();
    offsets.push(0u32);

    // Powers of e^{iθ_cw} up to the largest |δ|; θ_cw = -atan2(dy, dx), so
    // e^{iθ_cw} = (dx - i dy) / r without trigonometry.
    let mut pow_buf = vec![Complex::new(T::one(), T::zero()); max_abs_delta + 1];
    for q in out_coords.iter() {
        for (j, p) in in_coords.iter().enumerate() {
            let dx = p[0] - q[0];
            let dy = p[1] - q[1];
            let r2 = dx * dx + dy * dy;
            if r2 > cutoff2 {
                continue;
            }
            let r = r2.sqrt();
            let rf = r.to_f64_();
            let mut any = false;
            let base = ring_w.len();
            ring_w.resize(base + n_rings, T::zero());
            for (m, rs) in rings.iter().enumerate() {
                let w = rs.weight(rf);
                if w >= RING_CUTOFF {
                    any = true;
                }
                ring_w[base + m] = T::of(w);
            }
            if !any {
                ring_w.truncate(base);
                continue;
            }
            nbr.push(j as u32);
            if r > T::zero() {
                let unit = Complex::new(dx / r, -dy / r);
                pow_buf[0] = Complex::new(T::one(), T::zero());
                for p in 1..=max_abs_delta {
                    pow_buf[p] = pow_buf[p - 1] * unit;
                }
                for &d in &deltas {
                    let p = pow_buf[d.unsigned_abs() as usize];
                    phases.push(if d >= 0 { p } else { p.conj() });
                }
            } else {
                // The angular basis is undefined at zero displacement; only
                // the δ = 0 component survives there. Keeping e^{iδ·0} = 1
                // instead would break equivariance through the self-pair.
                for &d in &deltas {
                    phases.push(if d == 0 {
                        Complex::new(T::one(), T::zero())
                    } else {
                        Complex::new(T::zero(), T::zero())
                    });
                }
            }
        }
        offsets.push(nbr.len() as u32);
    }

    ConvPlan {
        n_in: in_coords.len(),
        n_out: out_coords.len(),
        offsets,
        nbr,
        ring_w,
        phases,
        deltas,
        n_rings,
        slot_delta_idx,
    }
}

#[inline]
pub(crate) fn caxpy<T: Scalar>(w: Complex<T>, x: &[Complex<T>], y: &mut [Complex<T>]) {
    for (yi, xi) in y.iter_mut().zip(x.iter()) {
        let re = w.re * xi.re - w.im * xi.im;
        let im = w.re * xi.im + w.im * xi.re;
        yi.re += re;
        yi.im += im;
    }
}

/// Materialize the full band -K..K for every point: [point][k+K][batch][chan].
pub(crate) fn repack_full_band<T: Scalar>(x: &FeatureMap<T>) -> Vec<Complex<T>> {
    let (b_n, n, d, k) = (x.batch(), x.num_points(), x.num_channels(), x.max_freq());
    let band = 2 * k + 1;
    let mut out = vec![Complex::new(T::zero(), T::zero()); n * band * b_n * d];
    for p in 0..n {
        for kf in 0..band {
            let kk = kf as i32 - k as i32;
            let row = (p * band + kf) * b_n * d;
            for b in 0..b_n {
                for c in 0..d {
                    let z = x.signal(b, p, c)[kk.unsigned_abs() as usize];
                    out[row + b * d + c] = if kk < 0 { z.conj() } else { z };
                }
            }
        }
    }
    out
}

/// Split real/imaginary planes of the full band -K..K for every point:
/// layout [point][k+K][batch][chan]. Separate planes keep the hot gather and
/// mix loops on contiguous real streams the compiler can turn into FMAs.
pub(crate) fn repack_full_band_split<T: Scalar>(
    x: &FeatureMap<T>,
    b0: usize,
    b1: usize,
) -> (Vec<T>, Vec<T>) {
    let (n, d, k) = (x.num_points(), x.num_channels(), x.max_freq());
    let bc = b1 - b0;
    let band = 2 * k + 1;
    let len = n * band * bc * d;
    let mut re = vec![T::zero(); len];
    let mut im = vec![T::zero(); len];
    for p in 0..n {
        for kf in 0..band {
            let kk = kf as i32 - k as i32;
            let row = (p * band + kf) * bc * d;
            // channel-outer, batch-inner: the mix then runs contiguous
            // batch-length updates instead of short channel dots
            for c in 0..d {
                for b in 0..bc {
                    let z = x.signal(b0 + b, p, c)[kk.unsigned_abs() as usize];
                    re[row + c * bc + b] = z.re;
                    im[row + c * bc + b] = if kk < 0 { -z.im } else { z.im };
                }
            }
        }
    }
    (re, im)
}

/// Batch slice width keeping the per-output gather working set inside L2.
fn batch_chunk_width(d_in: usize, band: usize) -> usize {
    // ~70 neighbors × band × chunk × d_in × 8 bytes within the outer caches,
    // and at least two SIMD vectors of batch lanes for the mix
    let per_b = 70 * band * d_in * 8;
    (1024 * 1024 / per_b.max(1)).clamp(16, 64)
}

#[inline]
fn caxpy_split<T: Scalar>(wr: T, wi: T, xr: &[T], xi: &[T], yr: &mut [T], yi: &mut [T]) {
    for (((yr, yi), xr), xi) in yr.iter_mut().zip(yi.iter_mut()).zip(xr).zip(xi) {
        let r = *xr;
        let i = *xi;
        *yr += wr * r - wi * i;
        *yi += wr * i + wi * r;
    }
}

#[inline]
#[allow(clippy::too_many_arguments)]
fn gather_point_split<T: Scalar>(
    plan: &ConvPlan<T>,
    layout: &QLayout,
    z_re: &[T],
    z_im: &[T],
    i: usize,
    band: usize,
    lane: usize,
    y_re: &mut [T],
    y_im: &mut [T],
) {
    for v in y_re.iter_mut() {
        *v = T::zero();
    }
    for v in y_im.iter_mut() {
        *v = T::zero();
    }
    let start = plan.offsets[i] as usize;
    let end = plan.offsets[i + 1] as usize;
    let k_in = layout.k_in as i32;
    for pair in start..end {
        let j = plan.nbr[pair] as usize;
        let rw = &plan.ring_w[pair * plan.n_rings..(pair + 1) * plan.n_rings];
        let ph = &plan.phases[pair * plan.deltas.len()..(pair + 1) * plan.deltas.len()];
        let row = j * band * lane;
        for (s, slot) in layout.slots.iter().enumerate() {
            let w = ph[plan.slot_delta_idx[s]] * rw[slot.ring];
            let k0 = (slot.k_lo + k_in) as usize;
            let seg = row + k0 * lane..row + (k0 + slot.k_len) * lane;
            let dst = slot.y_off * lane..(slot.y_off + slot.k_len) * lane;
            caxpy_split(
                w.re,
                w.im,
                &z_re[seg.clone()],
                &z_im[seg],
                &mut y_re[dst.clone()],
                &mut y_im[dst],
            );
        }
    }
}

#[inline]
#[allow(clippy::too_many_arguments)]
fn mix_point_split<T: Scalar>(
    layout: &QLayout,
    q_re: &[T],
    q_im: &[T],
    y_re: &[T],
    y_im: &[T],
    out_re: &mut [T],
    out_im: &mut [T],
    b_n: usize,
    d_in: usize,
    d_out: usize,
) {
    let lane = b_n * d_in;
    for slot in &layout.slots {
        for ki in 0..slot.k_len {
            let k = slot.k_lo + ki as i32;
            let kf_out = (k + slot.delta) as usize;
            let qoff = slot.dense_off + ki * d_out * d_in;
            let ybase = (slot.y_off + ki) * lane;
            let obase = kf_out * d_out * b_n;
            for o in 0..d_out {
                let or = obase + o * b_n;
                for c in 0..d_in {
                    let qr = q_re[qoff + o * d_in + c];
                    let qi = q_im[qoff + o * d_in + c];
                    let yb = ybase + c * b_n;
                    caxpy_split(
                        qr,
                        qi,
                        &y_re[yb..yb + b_n],
                        &y_im[yb..yb + b_n],
                        &mut out_re[or..or + b_n],
                        &mut out_im[or..or + b_n],
                    );
                }
            }
        }
    }
}

fn split_q<T: Scalar>(q_dense: &[Complex<T>]) -> (Vec<T>, Vec<T>) {
    (
        q_dense.iter().map(|z| z.re).collect(),
        q_dense.iter().map(|z| z.im).collect(),
    )
}

/// Forward convolution: gathers ring-weighted, phase-shifted neighbor
/// coefficients per output point and mixes them through the dense weights.
pub fn conv_forward_kernel<T: Scalar>(
    plan: &ConvPlan<T>,
    layout: &QLayout,
    q_dense: &[Complex<T>],
    input: &FeatureMap<T>,
) -> Result<FeatureMap<T>> {
    check_dims(plan, layout, input)?;
    let b_n = input.batch();
    let (d_in, d_out) = (layout.d_in, layout.d_out);
    let k_in = layout.k_in;
    let k_out = layout.k_out;
    let band = 2 * k_in + 1;
    let lane = b_n * d_in;
    let out_row = (k_out + 1) * b_n * d_out;

    let (q_re, q_im) = split_q(q_dense);
    let mut out = FeatureMap::zeros(b_n, plan.n_out, d_out, k_out);
    let n_threads = rayon::current_num_threads().max(1);
    let bw = batch_chunk_width(d_in, band);

    let mut b0 = 0usize;
    while b0 < b_n {
        let b1 = (b0 + bw).min(b_n);
        let bc = b1 - b0;
        let lane_c = bc * d_in;
        let row_c = (k_out + 1) * bc * d_out;
        let (z_re, z_im) = repack_full_band_split(input, b0, b1);
        let mut out_re = vec![T::zero(); plan.n_out * row_c];
        let mut out_im = vec![T::zero(); plan.n_out * row_c];

        let chunk = plan.n_out.div_ceil(n_threads * 4).max(1);
        out_re
            .par_chunks_mut(chunk * row_c)
            .zip(out_im.par_chunks_mut(chunk * row_c))
            .enumerate()
            .for_each(|(ci, (ore, oim))| {
                let i0 = ci * chunk;
                let mut y_re = vec![T::zero(); layout.y_lanes * lane_c];
                let mut y_im = vec![T::zero(); layout.y_lanes * lane_c];
                for ii in 0..ore.len() / row_c {
                    let i = i0 + ii;
                    gather_point_split(
                        plan, layout, &z_re, &z_im, i, band, lane_c, &mut y_re, &mut y_im,
                    );
                    mix_point_split(
                        layout,
                        &q_re,
                        &q_im,
                        &y_re,
                        &y_im,
                        &mut ore[ii * row_c..(ii + 1) * row_c],
                        &mut oim[ii * row_c..(ii + 1) * row_c],
                        bc,
                        d_in,
                        d_out,
                    );
                }
            });

        // Fold back to canonical layout; Im(z'_0) is exactly zero by the
        // k'=0 weight symmetry, discard its rounding residue.
        for p in 0..plan.n_out {
            for kf in 0..=k_out {
                let row = (p * (k_out + 1) + kf) * bc * d_out;
                for o in 0..d_out {
                    for b in 0..bc {
                        let re = out_re[row + o * bc + b];
                        let im = if kf == 0 {
                            T::zero()
                        } else {
                            out_im[row + o * bc + b]
                        };
                        out.signal_mut(b0 + b, p, o)[kf] = Complex::new(re, im);
                    }
                }
            }
        }
        b0 = b1;
    }
    let _ = lane;
    let _ = out_row;
    Ok(out)
}

#[inline]
pub(crate) fn mix_point<T: Scalar>(
    layout: &QLayout,
    q_dense: &[Complex<T>],
    y: &[Complex<T>],
    out_i: &mut [Complex<T>],
    b_n: usize,
    d_in: usize,
    d_out: usize,
) {
    let lane = b_n * d_in;
    for slot in &layout.slots {
        for ki in 0..slot.k_len {
            let k = slot.k_lo + ki as i32;
            let kf_out = (k + slot.delta) as usize;
            let q = &q_dense[slot.dense_off + ki * d_out * d_in..];
            let yb = &y[(slot.y_off + ki) * lane..(slot.y_off + ki + 1) * lane];
            let ob = &mut out_i[kf_out * b_n * d_out..(kf_out + 1) * b_n * d_out];
            for b in 0..b_n {
                let yv = &yb[b * d_in..(b + 1) * d_in];
                let ov = &mut ob[b * d_out..(b + 1) * d_out];
                for (o, ovo) in ov.iter_mut().enumerate() {
                    let qr = &q[o * d_in..o * d_in + d_in];
                    let mut acc_re = T::zero();
                    let mut acc_im = T::zero();
                    for (qv, zv) in qr.iter().zip(yv.iter()) {
                        acc_re += qv.re * zv.re - qv.im * zv.im;
                        acc_im += qv.re * zv.im + qv.im * zv.re;
                    }
                    ovo.re += acc_re;
                    ovo.im += acc_im;
                }
            }
        }
    }
}

/// Reverse-mode kernel: gradients for the input features and the dense
/// weights given the gradient of the output features. The gather scratch is
/// recomputed rather than saved.
pub fn conv_backward_kernel<T: Scalar>(
    plan: &ConvPlan<T>,
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

    let (q_re, q_im) = split_q(q_dense);
    let n_threads = rayon::current_num_threads().max(1);
    let dense_len = layout.dense_len;
    let bw = batch_chunk_width(d_in, band);

    let mut dq_re_total = vec![T::zero(); dense_len];
    let mut dq_im_total = vec![T::zero(); dense_len];
    let mut grad_in = if need_input_grad {
        Some(FeatureMap::zeros(b_n, input.num_points(), d_in, k_in))
    } else {
        None
    };

    let mut b0 = 0usize;
    while b0 < b_n {
    let b1 = (b0 + bw).min(b_n);
    let bc = b1 - b0;
    let lane = bc * d_in;
    let out_row = (k_out + 1) * bc * d_out;
    let (z_re, z_im) = repack_full_band_split(input, b0, b1);

    // Working-layout copy of the output gradient; Im(z'_0) is not a degree of
    // freedom, so its gradient is dropped.
    let mut g_re = vec![T::zero(); plan.n_out * out_row];
    let mut g_im = vec![T::zero(); plan.n_out * out_row];
    for p in 0..plan.n_out {
        for kf in 0..=k_out {
            let row = (p * (k_out + 1) + kf) * bc * d_out;
            for o in 0..d_out {
                for b in 0..bc {
                    let z = grad_out.signal(b0 + b, p, o)[kf];
                    g_re[row + o * bc + b] = z.re;
                    g_im[row + o * bc + b] = if kf == 0 { T::zero() } else { z.im };
                }
            }
        }
    }

    let chunk = plan.n_out.div_ceil(n_threads * 2).max(1);

    let (dz_re, dz_im, dq_re, dq_im) = (0..plan.n_out.div_ceil(chunk))
        .into_par_iter()
        .map(|ci| {
            let i0 = ci * chunk;
            let i1 = ((ci + 1) * chunk).min(plan.n_out);
            let mut y_re = vec![T::zero(); layout.y_lanes * lane];
            let mut y_im = vec![T::zero(); layout.y_lanes * lane];
            let mut dy_re = vec![T::zero(); layout.y_lanes * lane];
            let mut dy_im = vec![T::zero(); layout.y_lanes * lane];
            let mut dq_re = vec![T::zero(); dense_len];
            let mut dq_im = vec![T::zero(); dense_len];
            let (mut dz_re, mut dz_im) = if need_input_grad {
                (vec![T::zero(); z_re.len()], vec![T::zero(); z_im.len()])
            } else {
                (Vec::new(), Vec::new())
            };
            for i in i0..i1 {
                gather_point_split(plan, layout, &z_re, &z_im, i, band, lane, &mut y_re, &mut y_im);
                let gr = &g_re[i * out_row..(i + 1) * out_row];
                let gi = &g_im[i * out_row..(i + 1) * out_row];

                for v in dy_re.iter_mut() {
                    *v = T::zero();
                }
                for v in dy_im.iter_mut() {
                    *v = T::zero();
                }
                for slot in &layout.slots {
                    for ki in 0..slot.k_len {
                        let k = slot.k_lo + ki as i32;
                        let kf_out = (k + slot.delta) as usize;
                        let qoff = slot.dense_off + ki * d_out * d_in;
                        let ybase = (slot.y_off + ki) * lane;
                        let obase = kf_out * d_out * bc;
                        for o in 0..d_out {
                            let grv = &gr[obase + o * bc..obase + (o + 1) * bc];
                            let giv = &gi[obase + o * bc..obase + (o + 1) * bc];
                            for c in 0..d_in {
                                let qr = q_re[qoff + o * d_in + c];
                                let qi = q_im[qoff + o * d_in + c];
                                let yb = ybase + c * bc;
                                // dY += conj(q)·g
                                caxpy_split(
                                    qr,
                                    -qi,
                                    grv,
                                    giv,
                                    &mut dy_re[yb..yb + bc],
                                    &mut dy_im[yb..yb + bc],
                                );
                                // dq += g·conj(Y): reduce over the batch
                                let yr = &y_re[yb..yb + bc];
                                let yi = &y_im[yb..yb + bc];
                                let mut acc_re = T::zero();
                                let mut acc_im = T::zero();
                                for (((g_r, g_i), y_r), y_i) in
                                    grv.iter().zip(giv).zip(yr).zip(yi)
                                {
                                    acc_re += *g_r * *y_r + *g_i * *y_i;
                                    acc_im += *g_i * *y_r - *g_r * *y_i;
                                }
                                dq_re[qoff + o * d_in + c] += acc_re;
                                dq_im[qoff + o * d_in + c] += acc_im;
                            }
                        }
                    }
                }

                if need_input_grad {
                    let start = plan.offsets[i] as usize;
                    let end = plan.offsets[i + 1] as usize;
                    for pair in start..end {
                        let j = plan.nbr[pair] as usize;
                        let rw = &plan.ring_w[pair * plan.n_rings..(pair + 1) * plan.n_rings];
                        let ph = &plan.phases
                            [pair * plan.deltas.len()..(pair + 1) * plan.deltas.len()];
                        let row = j * band * lane;
                        for (s, slot) in layout.slots.iter().enumerate() {
                            let w = ph[plan.slot_delta_idx[s]] * rw[slot.ring];
                            let k0 = (slot.k_lo + k_in as i32) as usize;
                            let srcr = slot.y_off * lane..(slot.y_off + slot.k_len) * lane;
                            let dst = row + k0 * lane..row + (k0 + slot.k_len) * lane;
                            caxpy_split(
                                w.re,
                                -w.im,
                                &dy_re[srcr.clone()],
                                &dy_im[srcr],
                                &mut dz_re[dst.clone()],
                                &mut dz_im[dst],
                            );
                        }
                    }
                }
            }
            (dz_re, dz_im, dq_re, dq_im)
        })
        .collect::<Vec<_>>()
        .into_iter()
        // sequential merge keeps float accumulation order independent of
        // thread scheduling, so training runs are bit-reproducible
        .fold(
            (
                Vec::new(),
                Vec::new(),
                vec![T::zero(); dense_len],
                vec![T::zero(); dense_len],
            ),
            |(mut azr, mut azi, mut aqr, mut aqi), (bzr, bzi, bqr, bqi)| {
                if azr.is_empty() {
                    azr = bzr;
                    azi = bzi;
                } else if !bzr.is_empty() {
                    for (a, b) in azr.iter_mut().zip(bzr) {
                        *a += b;
                    }
                    for (a, b) in azi.iter_mut().zip(bzi) {
                        *a += b;
                    }
                }
                for (a, b) in aqr.iter_mut().zip(bqr) {
                    *a += b;
                }
                for (a, b) in aqi.iter_mut().zip(bqi) {
                    *a += b;
                }
                (azr, azi, aqr, aqi)
            },
        );

    for (a, b) in dq_re_total.iter_mut().zip(dq_re) {
        *a += b;
    }
    for (a, b) in dq_im_total.iter_mut().zip(dq_im) {
        *a += b;
    }
    if let Some(g) = grad_in.as_mut() {
        for p in 0..input.num_points() {
            for b in 0..bc {
                for c in 0..d_in {
                    let sig = g.signal_mut(b0 + b, p, c);
                    for k in 0..=k_in {
                        let pos = ((p * band + (k_in + k)) * d_in + c) * bc + b;
                        let mut re = dz_re[pos];
                        let mut im = dz_im[pos];
                        if k > 0 {
                            let neg = ((p * band + (k_in - k)) * d_in + c) * bc + b;
                            re += dz_re[neg];
                            im -= dz_im[neg];
                        } else {
                            im = T::zero();
                        }
                        sig[k] = Complex::new(re, im);
                    }
                }
            }
        }
    }
    b0 = b1;
    }

    let dq_dense: Vec<Complex<T>> = dq_re_total
        .into_iter()
        .zip(dq_im_total)
        .map(|(r, i)| Complex::new(r, i))
        .collect();

    (grad_in, dq_dense)
}

fn check_dims<T: Scalar>(
    plan: &ConvPlan<T>,
    layout: &QLayout,
    input: &FeatureMap<T>,
) -> Result<()> {
    if input.num_points() != plan.n_in {
        return Err(Error::DimensionMismatch(format!(
            "plan expects {} input points, features have {}",
            plan.n_in,
            input.num_points()
        )));
    }
    if input.num_channels() != layout.d_in {
        return Err(Error::DimensionMismatch(format!(
            "layer expects {} input channels, features have {}",
            layout.d_in,
            input.num_channels()
        )));
    }
    if input.max_freq() != layout.k_in {
        return Err(Error::DimensionMismatch(format!(
            "layer expects band limit {}, features have {}",
            layout.k_in,
            input.max_freq()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Point cloud
// ---------------------------------------------------------------------------

/// 2D point cloud carrying a batched Fourier feature map. Points may carry
/// integer lattice indices (assigned when converting a pixel grid); pooling
/// and cropping operate on the lattice so they commute with arbitrary
/// rotations of the coordinates.
#[derive(Debug, Clone)]
pub struct PointCloud2D<T> {
    pub coords: Vec<[T; 2]>,
    pub lattice: Option<Vec<[i64; 2]>>,
    pub features: FeatureMap<T>,
}

impl<T: Scalar> PointCloud2D<T> {
    pub fn new(
        coords: Vec<[T; 2]>,
        lattice: Option<Vec<[i64; 2]>>,
        features: FeatureMap<T>,
    ) -> Result<Self> {
        if features.num_points() != coords.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} coordinates vs {} feature points",
                coords.len(),
                features.num_points()
            )));
        }
        if let Some(l) = &lattice {
            if l.len() != coords.len() {
                return Err(Error::DimensionMismatch(
                    "lattice length differs from coordinates".into(),
                ));
            }
        }
        for c in &coords {
            if !(c[0].is_finite() && c[1].is_finite()) {
                return Err(Error::InvalidArgument("non-finite coordinate".into()));
            }
        }
        Ok(Self {
            coords,
            lattice,
            features,
        })
    }

    pub fn num_points(&self) -> usize {
        self.coords.len()
    }

    /// The rotation action: coordinates rotated by +θ about the origin,
    /// every signal rotated along. Lattice indices are intrinsic structure
    /// and stay put.
    pub fn rotate(&self, theta: T) -> Self {
        let (s, c) = theta.sin_cos();
        let coords = self
            .coords
            .iter()
            .map(|p| [c * p[0] - s * p[1], s * p[0] + c * p[1]])
            .collect();
        Self {
            coords,
            lattice: self.lattice.clone(),
            features: self.features.rotate_all(theta),
        }
    }
}

/// Convolution with explicit output coordinates (plan built on the fly).
pub fn conv_forward<T: Scalar>(
    input: &PointCloud2D<T>,
    spec: &RingFilterSpec,
    params: &LayerParams<T>,
    out_coords: &[[T; 2]],
) -> Result<PointCloud2D<T>> {
    if *spec != params.layout.spec {
        return Err(Error::DimensionMismatch(
            "filter spec differs from the one the parameters were built for".into(),
        ));
    }
    let plan = build_conv_plan(&input.coords, out_coords, &params.layout);
    let features = conv_forward_kernel(&plan, &params.layout, &params.dense(), &input.features)?;
    PointCloud2D::new(out_coords.to_vec(), None, features)
}

/// Block structure for 2x2 average pooling.
#[derive(Debug, Clone)]
pub struct PoolPlan<T> {
    /// member point indices per block (CSR)
    pub offsets: Vec<u32>,
    pub members: Vec<u32>,
    pub out_coords: Vec<[T; 2]>,
    pub out_lattice: Vec<[i64; 2]>,
}

/// Partition points into 2x2 lattice blocks (floor(l/2)); averaging Fourier
/// coefficients is safe because the transform is linear. Output coordinates
/// are the block means halved, keeping the grid spacing at 1.
pub fn build_pool_plan<T: Scalar>(cloud: &PointCloud2D<T>) -> Result<PoolPlan<T>> {
    build_pool_plan_from(&cloud.coords, cloud.lattice.as_deref())
}

pub fn build_pool_plan_from<T: Scalar>(
    coords: &[[T; 2]],
    lattice: Option<&[[i64; 2]]>,
) -> Result<PoolPlan<T>> {
    let lattice = lattice.ok_or(Error::NonGridCoords)?;
    let mut keys: Vec<([i64; 2], u32)> = lattice
        .iter()
        .enumerate()
        .map(|(i, l)| ([l[0].div_euclid(2), l[1].div_euclid(2)], i as u32))
        .collect();
    keys.sort_unstable();

    let mut offsets = vec![0u32];
    let mut members = Vec::with_capacity(keys.len());
    let mut out_coords = Vec::new();
    let mut out_lattice = Vec::new();
    let half = T::of(0.5);
    let mut idx = 0usize;
    while idx < keys.len() {
        let key = keys[idx].0;
        let mut sum = [T::zero(); 2];
        let start = idx;
        while idx < keys.len() && keys[idx].0 == key {
            let p = keys[idx].1 as usize;
            sum[0] += coords[p][0];
            sum[1] += coords[p][1];
            members.push(keys[idx].1);
            idx += 1;
        }
        let cnt = T::from_usize(idx - start).unwrap();
        out_coords.push([sum[0] / cnt * half, sum[1] / cnt * half]);
        out_lattice.push(key);
        offsets.push(members.len() as u32);
    }
    Ok(PoolPlan {
        offsets,
        members,
        out_coords,
        out_lattice,
    })
}

/// Average the features of each pool block.
pub fn avg_pool_features<T: Scalar>(plan: &PoolPlan<T>, x: &FeatureMap<T>) -> FeatureMap<T> {
    let n_out = plan.out_coords.len();
    let mut out = FeatureMap::zeros(x.batch(), n_out, x.num_channels(), x.max_freq());
    let row = x.num_channels() * (x.max_freq() + 1);
    for g in 0..n_out {
        let start = plan.offsets[g] as usize;
        let end = plan.offsets[g + 1] as usize;
        let inv = T::one() / T::from_usize(end - start).unwrap();
        for b in 0..x.batch() {
            let dst_off = (b * n_out + g) * row;
            for &m in &plan.members[start..end] {
                let src_off = (b * x.num_points() + m as usize) * row;
                for e in 0..row {
                    let z = x.data()[src_off + e] * inv;
                    out.data_mut()[dst_off + e] += z;
                }
            }
        }
    }
    out
}

/// Backward of [`avg_pool_features`].
pub fn avg_pool_backward<T: Scalar>(
    plan: &PoolPlan<T>,
    n_in: usize,
    grad_out: &FeatureMap<T>,
) -> FeatureMap<T> {
    let mut g = FeatureMap::zeros(
        grad_out.batch(),
        n_in,
        grad_out.num_channels(),
        grad_out.max_freq(),
    );
    let row = grad_out.num_channels() * (grad_out.max_freq() + 1);
    let n_out = plan.out_coords.len();
    for gi in 0..n_out {
        let start = plan.offsets[gi] as usize;
        let end = plan.offsets[gi + 1] as usize;
        let inv = T::one() / T::from_usize(end - start).unwrap();
        for b in 0..grad_out.batch() {
            let src_off = (b * n_out + gi) * row;
            for &m in &plan.members[start..end] {
                let dst_off = (b * n_in + m as usize) * row;
                for e in 0..row {
                    let z = grad_out.data()[src_off + e] * inv;
                    g.data_mut()[dst_off + e] += z;
                }
            }
        }
    }
    g
}

/// 2x2 average pooling: block-average coefficients, halve coordinates.
pub fn avg_pool<T: Scalar>(cloud: &PointCloud2D<T>) -> Result<PointCloud2D<T>> {
    let plan = build_pool_plan(cloud)?;
    let features = avg_pool_features(&plan, &cloud.features);
    Ok(PointCloud2D {
        coords: plan.out_coords.clone(),
        lattice: Some(plan.out_lattice.clone()),
        features,
    })
}

/// Indices surviving a crop of `margin` on each side of the bounding box.
/// Lattice bounds are used when present so the selection is intrinsic.
pub fn crop_indices<T: Scalar>(cloud: &PointCloud2D<T>, margin: usize) -> Vec<usize> {
    crop_indices_from(&cloud.coords, cloud.lattice.as_deref(), margin)
}

pub fn crop_indices_from<T: Scalar>(
    coords: &[[T; 2]],
    lattice: Option<&[[i64; 2]]>,
    margin: usize,
) -> Vec<usize> {
    if let Some(lat) = lattice {
        let (mut lo, mut hi) = ([i64::MAX; 2], [i64::MIN; 2]);
        for l in lat {
            for a in 0..2 {
                lo[a] = lo[a].min(l[a]);
                hi[a] = hi[a].max(l[a]);
            }
        }
        let m = margin as i64;
        lat.iter()
            .enumerate()
            .filter(|(_, l)| (0..2).all(|a| l[a] >= lo[a] + m && l[a] <= hi[a] - m))
            .map(|(i, _)| i)
            .collect()
    } else {
        let (mut lo, mut hi) = ([T::infinity(); 2], [T::neg_infinity(); 2]);
        for c in coords {
            for a in 0..2 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
        }
        let m = T::from_usize(margin).unwrap();
        let eps = T::of(1e-9);
        coords
            .iter()
            .enumerate()
            .filter(|(_, c)| (0..2).all(|a| c[a] >= lo[a] + m - eps && c[a] <= hi[a] - m + eps))
            .map(|(i, _)| i)
            .collect()
    }
}

/// Discard points within `margin` of the bounding box edge on each side.
pub fn crop<T: Scalar>(cloud: &PointCloud2D<T>, margin: usize) -> PointCloud2D<T> {
    let keep = crop_indices(cloud, margin);
    PointCloud2D {
        coords: keep.iter().map(|&i| cloud.coords[i]).collect(),
        lattice: cloud
            .lattice
            .as_ref()
            .map(|l| keep.iter().map(|&i| l[i]).collect()),
        features: cloud.features.select_points(&keep),
    }
}

// ---------------------------------------------------------------------------
// Invariant maps
// ---------------------------------------------------------------------------

/// Keep only the rotation-invariant coefficient z_0 per (point, channel).
pub fn conv2triv<T: Scalar>(x: &FeatureMap<T>) -> Array2<T> {
    let (b_n, n, d) = (x.batch(), x.num_points(), x.num_channels());
    let mut out = Array2::zeros((b_n, n * d));
    for b in 0..b_n {
        for p in 0..n {
            for c in 0..d {
                out[[b, p * d + c]] = x.signal(b, p, c)[0].re;
            }
        }
    }
    out
}

/// Invariant map: z_0 plus the magnitude of every complex coefficient,
/// (K+1)·d reals per point.
pub fn norm_map<T: Scalar>(x: &FeatureMap<T>) -> Array2<T> {
    let (b_n, n, d, k) = (x.batch(), x.num_points(), x.num_channels(), x.max_freq());
    let w = k + 1;
    let mut out = Array2::zeros((b_n, n * d * w));
    for b in 0..b_n {
        for p in 0..n {
            for c in 0..d {
                let s = x.signal(b, p, c);
                let base = (p * d + c) * w;
                out[[b, base]] = s[0].re;
                for kk in 1..=k {
                    out[[b, base + kk]] = s[kk].norm();
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Fourier batch normalization
// ---------------------------------------------------------------------------

/// Per-channel normalization statistics.
#[derive(Debug, Clone)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> BnStats<T> {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

/// Batch statistics of a Fourier feature map: the mean comes from the z_0
/// coefficients, the variance from the power spectrum over the full band.
pub fn fourier_bn_batch_stats<T: Scalar>(x: &FeatureMap<T>) -> BnStats<T> {
    let (b_n, n, d) = (x.batch(), x.num_points(), x.num_channels());
    let m = T::from_usize(b_n * n).unwrap();
    let mut mean = vec![T::zero(); d];
    let mut pow = vec![T::zero(); d];
    for b in 0..b_n {
        for p in 0..n {
            for c in 0..d {
                let s = x.signal(b, p, c);
                mean[c] += s[0].re;
                let mut pw = s[0].re * s[0].re;
                for zk in &s[1..] {
                    let q = zk.norm_sqr();
                    pw += q + q;
                }
                pow[c] += pw;
            }
        }
    }
    let mut var = vec![T::zero(); d];
    for c in 0..d {
        mean[c] /= m;
        var[c] = pow[c] / m - mean[c] * mean[c];
    }
    BnStats { mean, var }
}

/// Normalize: z_0 ← γ (z_0 - μ)/√(v+ε) + β; z_k ← γ z_k/√(v+ε) for k ≥ 1.
/// The shift only moves the angular mean, so rotation equivariance is exact.
pub fn fourier_bn_apply<T: Scalar>(
    x: &FeatureMap<T>,
    stats: &BnStats<T>,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> FeatureMap<T> {
    let (b_n, n, d, k) = (x.batch(), x.num_points(), x.num_channels(), x.max_freq());
    let mut out = x.clone();
    let scale: Vec<T> = (0..d)
        .map(|c| gamma[c] / (stats.var[c] + eps).sqrt())
        .collect();
    for b in 0..b_n {
        for p in 0..n {
            for c in 0..d {
                let s = out.signal_mut(b, p, c);
                s[0].re = scale[c] * (s[0].re - stats.mean[c]) + beta[c];
                for kk in 1..=k {
                    s[kk] = s[kk] * scale[c];
                }
            }
        }
    }
    out
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    pub(crate) fn random_features(
        rng: &mut ChaCha8Rng,
        b: usize,
        n: usize,
        d: usize,
        k: usize,
    ) -> FeatureMap<f64> {
        let mut fm = FeatureMap::zeros(b, n, d, k);
        for z in fm.data_mut().iter_mut() {
            *z = Complex::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        }
        for bi in 0..b {
            for p in 0..n {
                for c in 0..d {
                    fm.signal_mut(bi, p, c)[0].im = 0.0;
                }
            }
        }
        fm
    }

    fn grid_coords(w: usize) -> (Vec<[f64; 2]>, Vec<[i64; 2]>) {
        let mut coords = Vec::new();
        let mut lat = Vec::new();
        let c0 = (w as f64 - 1.0) / 2.0;
        for y in 0..w {
            for x in 0..w {
                coords.push([x as f64 - c0, y as f64 - c0]);
                lat.push([x as i64, y as i64]);
            }
        }
        (coords, lat)
    }

    fn test_spec() -> RingFilterSpec {
        RingFilterSpec::new(vec![
            RingSpec::new(0.0, 0.005, 0),
            RingSpec::new(1.0, 0.6, 2),
            RingSpec::new(2.0, 0.6, 3),
        ])
        .unwrap()
    }

    fn conv_simple(
        input: &PointCloud2D<f64>,
        out_coords: &[[f64; 2]],
        params: &LayerParams<f64>,
    ) -> FeatureMap<f64> {
        let plan = build_conv_plan(&input.coords, out_coords, &params.layout);
        conv_forward_kernel(&plan, &params.layout, &params.dense(), &input.features).unwrap()
    }

    #[test]
    fn degenerate_self_pair_is_channel_mix() {
        // One input point on top of the only output point, only the r=0 ring:
        // the layer reduces to a per-point channel mix with ω(0) = 1.
        let spec = RingFilterSpec::new(vec![RingSpec::new(0.0, 0.005, 0)]).unwrap();
        let layout = QLayout::new(spec, 2, 2, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = LayerParams::<f64>::init(layout, &mut rng);
        let features = random_features(&mut rng, 1, 1, 3, 2);
        let cloud = PointCloud2D::new(vec![[0.0, 0.0]], None, features.clone()).unwrap();
        let out = conv_simple(&cloud, &[[0.0, 0.0]], &params);

        let dense = params.dense();
        let layout = &params.layout;
        for o in 0..2 {
            for kf in 0..=2usize {
                let mut want = Complex::new(0.0, 0.0);
                for slot in &layout.slots {
                    let k = kf as i32 - slot.delta;
                    if k < slot.k_lo || k >= slot.k_lo + slot.k_len as i32 {
                        continue;
                    }
                    let ki = (k - slot.k_lo) as usize;
                    for c in 0..3 {
                        let q = dense[slot.dense_off + (ki * 2 + o) * 3 + c];
                        let z = features.signal(0, 0, c);
                        let zv = if k < 0 {
                            z[(-k) as usize].conj()
                        } else {
                            z[k as usize]
                        };
                        want += q * zv;
                    }
                }
                if kf == 0 {
                    want.im = 0.0;
                }
                let got = out.signal(0, 0, o)[kf];
                assert_abs_diff_eq!((got - want).norm(), 0.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn quadrature_oracle_two_points() {
        // Independent oracle: evaluate the layer as a double numerical
        // integration over the angular domain instead of coefficient mixing.
        let spec = RingFilterSpec::new(vec![RingSpec::new(1.0, 0.6, 1)]).unwrap();
        let k_out = 2usize;
        let layout = QLayout::new(spec.clone(), 0, k_out, 1, 1);
        let params = LayerParams {
            raw: layout.uniform_raw(1.0),
            layout,
        };
        for z in &params.dense() {
            assert_abs_diff_eq!(z.re, 1.0, epsilon = 1e-15);
            assert_abs_diff_eq!(z.im, 0.0, epsilon = 1e-15);
        }

        let in_coords = vec![[0.7, 0.4], [-0.3, 0.9]];
        let out_coords = vec![[0.1, -0.2]];
        let mut features = FeatureMap::zeros(1, 2, 1, 0);
        features.signal_mut(0, 0, 0)[0] = Complex::new(1.0, 0.0);
        features.signal_mut(0, 1, 0)[0] = Complex::new(1.0, 0.0);
        let cloud = PointCloud2D::new(in_coords.clone(), None, features).unwrap();
        let out = conv_simple(&cloud, &out_coords, &params);

        // Oracle: x'(β) = Σ_j Σ_m ω_m(r_j) (1/2π)∫ κ_m(α+θ_j, β+θ_j) x_j(α) dα
        // with κ_m(a, b) = Σ_{(k',k)} q e^{ik'b} e^{-ika}, then project z'_{k'}
        // by dense quadrature in β.
        let nq = 512;
        let ring = &spec.rings[0];
        for kk in 0..=k_out {
            let mut acc = Complex::new(0.0, 0.0);
            for bi in 0..nq {
                let beta = 2.0 * PI * bi as f64 / nq as f64;
                let mut xb = Complex::new(0.0, 0.0);
                for j in 0..2 {
                    let dx = in_coords[j][0] - out_coords[0][0];
                    let dy = in_coords[j][1] - out_coords[0][1];
                    let r = (dx * dx + dy * dy).sqrt();
                    let theta = -dy.atan2(dx);
                    let w = ring.weight(r);
                    // inner integral over α of κ(α+θ, β+θ)·x_j(α); x_j ≡ 1
                    let mut inner = Complex::new(0.0, 0.0);
                    for ai in 0..nq {
                        let alpha = 2.0 * PI * ai as f64 / nq as f64;
                        let mut kappa = Complex::new(0.0, 0.0);
                        for slot in &params.layout.slots {
                            for ki in 0..slot.k_len {
                                let k = slot.k_lo + ki as i32;
                                let kp = k + slot.delta;
                                kappa += Complex::from_polar(
                                    1.0,
                                    kp as f64 * (beta + theta) - k as f64 * (alpha + theta),
                                );
                            }
                        }
                        inner += kappa;
                    }
                    inner /= nq as f64;
                    xb += inner * w;
                }
                acc += xb * Complex::from_polar(1.0, -(kk as f64) * beta);
            }
            acc /= nq as f64;
            let got = out.signal(0, 0, 0)[kk];
            assert!(
                (got - acc).norm() < 1e-6,
                "k'={kk}: kernel {got} vs quadrature {acc}"
            );
        }
    }

    #[test]
    fn conv_is_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let layout = QLayout::new(test_spec(), 3, 3, 2, 3);
        let params = LayerParams::<f64>::init(layout, &mut rng);
        let n = 30;
        let coords: Vec<[f64; 2]> = (0..n)
            .map(|_| [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)])
            .collect();
        let features = random_features(&mut rng, 2, n, 2, 3);
        let cloud = PointCloud2D::new(coords.clone(), None, features).unwrap();

        let base = conv_simple(&cloud, &coords, &params);
        for _ in 0..12 {
            let theta = rng.random_range(0.0..2.0 * PI);
            let rotated = cloud.rotate(theta);
            let out_rot = conv_simple(&rotated, &rotated.coords, &params);
            let expected = base.rotate_all(theta);
            let scale = base.data().iter().map(|z| z.norm()).fold(1e-12, f64::max);
            for (a, b) in out_rot.data().iter().zip(expected.data()) {
                assert!(
                    (a - b).norm() / scale < 1e-10,
                    "equivariance violated at θ={theta}: {a} vs {b}"
                );
            }
        }
    }

    #[test]
    fn conv_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let layout = QLayout::new(test_spec(), 2, 2, 2, 2);
        let params = LayerParams::<f64>::init(layout, &mut rng);
        let n = 12;
        let coords: Vec<[f64; 2]> = (0..n)
            .map(|_| [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)])
            .collect();
        let fa = random_features(&mut rng, 1, n, 2, 2);
        let fb = random_features(&mut rng, 1, n, 2, 2);
        let (a, b) = (0.7, -1.3);

        let mut combo = fa.clone();
        for (z, (x, y)) in combo
            .data_mut()
            .iter_mut()
            .zip(fa.data().iter().zip(fb.data()))
        {
            *z = x * a + y * b;
        }
        let cloud = |f: FeatureMap<f64>| PointCloud2D::new(coords.clone(), None, f).unwrap();
        let out_combo = conv_simple(&cloud(combo), &coords, &params);
        let out_a = conv_simple(&cloud(fa), &coords, &params);
        let out_b = conv_simple(&cloud(fb), &coords, &params);
        for i in 0..out_combo.data().len() {
            let want = out_a.data()[i] * a + out_b.data()[i] * b;
            assert!((out_combo.data()[i] - want).norm() < 1e-12);
        }
    }

    #[test]
    fn output_mean_coefficient_is_real() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let layout = QLayout::new(test_spec(), 3, 3, 2, 2);
        let params = LayerParams::<f64>::init(layout, &mut rng);
        let coords: Vec<[f64; 2]> = (0..10)
            .map(|_| [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)])
            .collect();
        let features = random_features(&mut rng, 1, 10, 2, 3);
        let cloud = PointCloud2D::new(coords.clone(), None, features).unwrap();
        let out = conv_simple(&cloud, &coords, &params);
        for p in 0..10 {
            for o in 0..2 {
                assert_eq!(out.signal(0, p, o)[0].im, 0.0);
            }
        }
    }

    #[test]
    fn crop_28_to_20() {
        let (coords, lat) = grid_coords(28);
        let features = FeatureMap::<f64>::zeros(1, 784, 1, 0);
        let cloud = PointCloud2D::new(coords, Some(lat), features).unwrap();
        let cropped = crop(&cloud, 4);
        assert_eq!(cropped.num_points(), 400);
        let xs: Vec<f64> = cropped.coords.iter().map(|c| c[0]).collect();
        let w = xs.iter().cloned().fold(f64::MIN, f64::max)
            - xs.iter().cloned().fold(f64::MAX, f64::min);
        assert_abs_diff_eq!(w, 19.0, epsilon = 1e-12);
    }

    #[test]
    fn pool_20_to_10_constant_blocks() {
        let (coords, lat) = grid_coords(20);
        let mut features = FeatureMap::<f64>::zeros(1, 400, 1, 2);
        for p in 0..400 {
            features.signal_mut(0, p, 0)[0] = Complex::new(2.5, 0.0);
        }
        let cloud = PointCloud2D::new(coords, Some(lat), features).unwrap();
        let pooled = avg_pool(&cloud).unwrap();
        assert_eq!(pooled.num_points(), 100);
        for p in 0..100 {
            assert_abs_diff_eq!(pooled.features.signal(0, p, 0)[0].re, 2.5, epsilon = 1e-14);
        }
        // spacing stays 1 after halving
        let mut xs: Vec<f64> = pooled.coords.iter().map(|c| c[0]).collect();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        xs.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
        assert_eq!(xs.len(), 10);
        assert_abs_diff_eq!(xs[1] - xs[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn pool_commutes_with_quarter_turns() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (coords, lat) = grid_coords(8);
        let features = random_features(&mut rng, 1, 64, 2, 2);
        let cloud = PointCloud2D::new(coords, Some(lat), features).unwrap();
        for m in 1..4 {
            let theta = m as f64 * PI / 2.0;
            let a = avg_pool(&cloud.rotate(theta)).unwrap();
            let b_cloud = avg_pool(&cloud).unwrap().rotate(theta);
            // compare as coordinate → signal multisets
            for (i, ca) in a.coords.iter().enumerate() {
                let j = b_cloud
                    .coords
                    .iter()
                    .position(|cb| (ca[0] - cb[0]).abs() < 1e-9 && (ca[1] - cb[1]).abs() < 1e-9)
                    .expect("matching pooled point");
                for c in 0..2 {
                    for (za, zb) in a
                        .features
                        .signal(0, i, c)
                        .iter()
                        .zip(b_cloud.features.signal(0, j, c))
                    {
                        assert!((za - zb).norm() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn invariant_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let features = random_features(&mut rng, 2, 3, 4, 4);
        let theta = 1.234;
        let rotated = features.rotate_all(theta);

        let a = conv2triv(&features);
        let b = conv2triv(&rotated);
        for (x, y) in a.iter().zip(b.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-14);
        }
        let a = norm_map(&features);
        let b = norm_map(&rotated);
        for (x, y) in a.iter().zip(b.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-13);
        }

        // z_1 = 3+4i → norm entry 5
        let mut f = FeatureMap::<f64>::zeros(1, 1, 1, 1);
        f.signal_mut(0, 0, 0)[1] = Complex::new(3.0, 4.0);
        assert_abs_diff_eq!(norm_map(&f)[[0, 1]], 5.0, epsilon = 1e-14);

        // output width: d=96, K=4 → 480 per point
        let f = FeatureMap::<f64>::zeros(1, 1, 96, 4);
        assert_eq!(norm_map(&f).shape(), &[1, 480]);
    }

    #[test]
    fn batch_norm_basics() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        // constant channel: output z_0 = β everywhere
        let mut f = FeatureMap::<f64>::zeros(2, 5, 1, 2);
        for b in 0..2 {
            for p in 0..5 {
                f.signal_mut(b, p, 0)[0] = Complex::new(3.0, 0.0);
            }
        }
        let stats = fourier_bn_batch_stats(&f);
        let out = fourier_bn_apply(&f, &stats, &[1.0], &[0.25], 1e-8);
        for b in 0..2 {
            for p in 0..5 {
                assert_abs_diff_eq!(out.signal(b, p, 0)[0].re, 0.25, epsilon = 1e-6);
            }
        }

        // post-normalization statistics: mean(z_0) = 0, mean power = 1
        let f = random_features(&mut rng, 4, 7, 3, 3);
        let stats = fourier_bn_batch_stats(&f);
        let out = fourier_bn_apply(&f, &stats, &[1.0; 3], &[0.0; 3], 1e-8);
        let post = fourier_bn_batch_stats(&out);
        for c in 0..3 {
            assert_abs_diff_eq!(post.mean[c], 0.0, epsilon = 1e-6);
            assert_abs_diff_eq!(
                post.var[c] + post.mean[c] * post.mean[c],
                1.0,
                epsilon = 1e-6
            );
        }
    }

    #[test]
    fn batch_norm_commutes_with_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let f = random_features(&mut rng, 3, 6, 2, 3);
        let gamma = [1.3, 0.8];
        let beta = [0.1, -0.2];
        let theta = 0.77;

        let stats_a = fourier_bn_batch_stats(&f.rotate_all(theta));
        let a = fourier_bn_apply(&f.rotate_all(theta), &stats_a, &gamma, &beta, 1e-8);
        let stats_b = fourier_bn_batch_stats(&f);
        let b = fourier_bn_apply(&f, &stats_b, &gamma, &beta, 1e-8).rotate_all(theta);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).norm() < 1e-13);
        }
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let layout = QLayout::new(test_spec(), 2, 2, 3, 2);
        let params = LayerParams::<f64>::init(layout, &mut rng);
        let coords = vec![[0.0, 0.0], [1.0, 0.0]];
        let features = random_features(&mut rng, 1, 2, 2, 2); // wrong channels
        let plan = build_conv_plan(&coords, &coords, &params.layout);
        let err = conv_forward_kernel(&plan, &params.layout, &params.dense(), &features);
        assert!(matches!(err, Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn avg_pool_refuses_without_lattice() {
        let features = FeatureMap::<f64>::zeros(1, 4, 1, 0);
        let cloud = PointCloud2D::new(
            vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]],
            None,
            features,
        )
        .unwrap();
        assert!(matches!(avg_pool(&cloud), Err(Error::NonGridCoords)));
    }
}
