//! Shared FFT plan cache.
//!
//! Plans are immutable once built and cheap to share; the cache is keyed by
//! (element type, length, direction) so batched transforms fetch their plan
//! once and reuse it across all lanes.

use num_complex::Complex;
use rustfft::{Fft, FftNum, FftPlanner};
use std::any::{Any, TypeId};
use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

type Key = (TypeId, usize, bool);

fn cache() -> &'static Mutex<HashMap<Key, Arc<dyn Any + Send + Sync>>> {
    static CACHE: OnceLock<Mutex<HashMap<Key, Arc<dyn Any + Send + Sync>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Fetch (or plan) an FFT of length `n`. `inverse` selects the e^{+i2πjk/N}
/// kernel; neither direction carries a normalization factor.
pub fn plan<T: FftNum>(n: usize, inverse: bool) -> Arc<dyn Fft<T>> {
    let key = (TypeId::of::<T>(), n, inverse);
    let mut map = cache().lock().unwrap();
    let entry = map.entry(key).or_insert_with(|| {
        let mut planner = FftPlanner::<T>::new();
        let fft = if inverse {
            planner.plan_fft_inverse(n)
        } else {
            planner.plan_fft_forward(n)
        };
        let arc: Arc<dyn Any + Send + Sync> = Arc::new(fft);
        arc
    });
    let any: Arc<dyn Any + Send + Sync> = entry.clone();
    let inner = any
        .downcast::<Arc<dyn Fft<T>>>()
        .expect("fft cache holds plans keyed by element type");
    (*inner).clone()
}

/// In-place unnormalized transform using a cached plan and caller scratch.
pub fn process<T: FftNum>(
    fft: &Arc<dyn Fft<T>>,
    buf: &mut [Complex<T>],
    scratch: &mut Vec<Complex<T>>,
) {
    let need = fft.get_inplace_scratch_len();
    if scratch.len() < need {
        scratch.resize(need, Complex::new(T::zero(), T::zero()));
    }
    fft.process_with_scratch(buf, scratch);
}
