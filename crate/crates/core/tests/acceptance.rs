//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line
//! (run with `cargo test --test acceptance -- --nocapture` to see them).

use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;
use steernet::activations::{
    apply_fft, apply_poly_direct, fit_poly_relu, minimal_exact_pad, Activation, NormInner,
};
use steernet::autodiff::{grad_check, ParamId, ParamStore, Tape};
use steernet::conv2d::{build_conv_plan, QLayout, RingFilterSpec, RingSpec};
use steernet::fourier::BandLimitedSignal;
use steernet::harness::{equivariance_sweep, full_stack_gradcheck, surfel_sphere_demo};
use steernet::model::{ActivationKind, InvariantMap, Model, ModelConfig};
use steernet::pipeline::{evaluate, synthetic_glyphs, train, TrainConfig};
use steernet::scalar::Scalar;
use steernet::surfel::{
    align_coefficients, build_surfel_plan, dot, make_frame, scale, sub, StackFilterSpec,
};

fn random_signal<T: Scalar>(rng: &mut ChaCha8Rng, k: usize) -> BandLimitedSignal<T> {
    let mut coeffs = vec![Complex::new(T::of(rng.random_range(-1.0..1.0)), T::zero())];
    for _ in 1..=k {
        coeffs.push(Complex::new(
            T::of(rng.random_range(-1.0..1.0)),
            T::of(rng.random_range(-1.0..1.0)),
        ));
    }
    BandLimitedSignal::new(coeffs).unwrap()
}

fn max_rel_dev<T: Scalar>(a: &BandLimitedSignal<T>, b: &BandLimitedSignal<T>) -> f64 {
    let scale = a
        .coeffs()
        .iter()
        .chain(b.coeffs())
        .map(|z| z.norm().to_f64_())
        .fold(1.0f64, f64::max);
    a.coeffs()
        .iter()
        .zip(b.coeffs())
        .map(|(x, y)| {
            let d = Complex::new(
                x.re.to_f64_() - y.re.to_f64_(),
                x.im.to_f64_() - y.im.to_f64_(),
            );
            d.norm()
        })
        .fold(0.0, f64::max)
        / scale
}

fn poly_route_dev<T: Scalar>(degree: usize, pad: usize, trials: usize, seed: u64) -> f64 {
    let poly = fit_poly_relu::<T>(degree, 5.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let s: BandLimitedSignal<T> = random_signal(&mut rng, 4);
        let direct = apply_poly_direct(&s, &poly);
        let fftd = apply_fft(&s, &Activation::Poly(poly.clone()), pad).unwrap();
        worst = worst.max(max_rel_dev(&direct, &fftd));
    }
    worst
}

#[test]
fn criterion_1_polynomial_exactness() {
    let start = std::time::Instant::now();
    // K = 4: the reference pads 8 (degree 2) and 24 (degree 4)
    assert_eq!(minimal_exact_pad(4, 2), 8);
    assert_eq!(minimal_exact_pad(4, 4), 24);

    let mut ok = true;
    for (degree, pad) in [(2usize, 8usize), (4, 24)] {
        let dev64 = poly_route_dev::<f64>(degree, pad, 32, 11);
        let dev32 = poly_route_dev::<f32>(degree, pad, 32, 11);
        println!("  degree {degree} pad {pad}: double {dev64:.3e} (<1e-11), single {dev32:.3e} (<1e-5)");
        ok &= dev64 < 1e-11 && dev32 < 1e-5;
    }

    // The aliasing transition: the output is truncated to K, so its kept
    // bins stay clean down to pad K(D-1); one pad below that, folded
    // harmonics land inside the band and the deviation jumps.
    for (degree, tight) in [(2usize, 4usize), (4, 12)] {
        let below = poly_route_dev::<f64>(degree, tight - 1, 32, 13);
        let at = poly_route_dev::<f64>(degree, tight, 32, 13);
        println!(
            "  degree {degree}: aliasing boundary pad {tight}: below {:.3e} (>1e-6), at {:.3e} (<1e-11)",
            below, at
        );
        ok &= below > 1e-6 && at < 1e-11;
        // one below the full-band reference pad the kept bins are already
        // alias-free; report the measured value for transparency
        let ref_pad = minimal_exact_pad(4, degree);
        let under_ref = poly_route_dev::<f64>(degree, ref_pad - 1, 32, 13);
        println!(
            "  degree {degree}: pad {} (reference-1) measures {:.3e}: kept bins k ≤ 4 cannot fold at N = {}",
            ref_pad - 1,
            under_ref,
            2 * 4 + 1 + ref_pad - 1
        );
    }

    println!(
        "CRITERION 1 {}: polynomial FFT route exact at reference pads, sharp aliasing transition at the truncated-band boundary ({:.2}s)",
        if ok { "PASS" } else { "FAIL" },
        start.elapsed().as_secs_f64()
    );
    assert!(ok);
}

#[test]
fn criterion_2_equivariance_floor() {
    let start = std::time::Instant::now();
    let images = synthetic_glyphs::<f32>(8, 21);

    let make = |kind: ActivationKind, pad: usize| {
        let cfg = ModelConfig::mnist_stack(9, pad, kind, InvariantMap::Norm, 10, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        Model::<f32>::new(cfg, &mut rng).unwrap()
    };

    let crelu = make(ActivationKind::CRelu, 0);
    let crelu_report = equivariance_sweep(&crelu, &images, 36, &[0], 5).unwrap();
    let poly = make(ActivationKind::Poly2, 8);
    let poly_report = equivariance_sweep(&poly, &images, 36, &[8], 5).unwrap();

    let mut ok = true;
    let layers = crelu.config.conv_layers.len();
    for l in 0..layers {
        let floor = crelu_report.records[l].mean_rel_err;
        let poly_err = poly_report.records[l].mean_rel_err;
        let layer_ok = floor < 1e-5 && poly_err < 3.0 * floor;
        println!(
            "  layer {}: C-ReLU floor {:.3e} (<1e-5), Poly(2)/pad 8 {:.3e} (<3x floor) {}",
            l + 1,
            floor,
            poly_err,
            if layer_ok { "ok" } else { "VIOLATED" }
        );
        ok &= layer_ok;
    }
    println!(
        "CRITERION 2 {}: single-precision equivariance floor, batch 8, 36 rotations ({:.1}s)",
        if ok { "PASS" } else { "FAIL" },
        start.elapsed().as_secs_f64()
    );
    assert!(ok);
}

#[test]
fn criterion_3_relu_padding_convergence() {
    let start = std::time::Instant::now();
    let images = synthetic_glyphs::<f32>(8, 22);
    let cfg = ModelConfig::mnist_stack(9, 0, ActivationKind::Relu, InvariantMap::Norm, 10, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let model = Model::<f32>::new(cfg, &mut rng).unwrap();

    let report = equivariance_sweep(&model, &images, 36, &[0, 127], 7).unwrap();
    let mut ok = true;
    for l in 0..model.config.conv_layers.len() {
        let e0 = report.for_pad(0)[l].mean_rel_err;
        let e127 = report.for_pad(127)[l].mean_rel_err;
        let layer_ok = e127 < e0 / 10.0;
        println!(
            "  layer {}: pad 0 {:.3e} -> pad 127 {:.3e} (ratio {:.1}) {}",
            l + 1,
            e0,
            e127,
            e0 / e127,
            if layer_ok { "ok" } else { "VIOLATED" }
        );
        ok &= layer_ok;
    }
    println!(
        "CRITERION 3 {}: ReLU mean error at pad 127 at least 10x below pad 0 at every layer ({:.1}s)",
        if ok { "PASS" } else { "FAIL" },
        start.elapsed().as_secs_f64()
    );
    assert!(ok);
}

#[test]
fn criterion_4_gradient_integrity() {
    let start = std::time::Instant::now();
    let mut ok = true;

    // every feature op in one chain: conv -> clip -> fft(relu biased off the
    // kink) -> norm-map tail handled by the full stack below; here the two
    // named routes get explicit micro-checks
    {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = RingFilterSpec::new(vec![
            RingSpec::new(0.0, 0.005, 0),
            RingSpec::new(1.0, 0.6, 2),
        ])
        .unwrap();
        let layout = Arc::new(QLayout::new(spec, 2, 2, 2, 2));
        let coords: Vec<[f64; 2]> = (0..8)
            .map(|_| [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)])
            .collect();
        let plan = Arc::new(build_conv_plan(&coords, &coords, &layout));
        let mut store = ParamStore::<f64>::new();
        let x: Vec<f64> = (0..8 * 2 * 5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let pid_x = store.add("x", x);
        let pid_q = store.add("q", layout.init_raw::<f64, _>(&mut rng));

        let build = |s: &ParamStore<f64>, t: &mut Tape<f64>| {
            let x = t.leaf_features_param(s, pid_x, 1, 8, 2, 2);
            let y = t.conv2d(x, s, pid_q, plan.clone(), layout.clone()).unwrap();
            let y = t.fft_activation(y, Activation::Silu, 7).unwrap();
            t.sum_squares(y)
        };
        let mut tape = Tape::new(&store);
        let loss = build(&store, &mut tape);
        let grads = tape.backward(loss).unwrap();
        let picks: Vec<(ParamId, usize)> = (0..20)
            .map(|_| {
                let p = rng.random_range(0..store.entries.len());
                let i = rng.random_range(0..store.entries[p].data.len());
                (ParamId(p), i)
            })
            .collect();
        let report = grad_check(&mut store, &grads, &picks, 1e-5, |s| {
            let mut t = Tape::new(s);
            let l = build(s, &mut t);
            t.value(l).scalar()
        });
        println!(
            "  conv2d + FFT activation chain: max rel dev {:.3e}",
            report.max_rel_dev()
        );
        ok &= report.max_rel_dev() < 1e-4;
    }

    {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let surfels = steernet::surfel::fibonacci_sphere::<f64>(12, 1.0);
        let stack = StackFilterSpec::equidistant(0.5, -0.5, 0.5, 0.5, 0.25).unwrap();
        let layout = Arc::new(stack.layout(2, 2, 2, 2));
        let plan = Arc::new(build_surfel_plan(&surfels, &surfels, &stack, &layout));
        let mut store = ParamStore::<f64>::new();
        let x: Vec<f64> = (0..12 * 2 * 5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let pid_x = store.add("x", x);
        let pid_q = store.add("q", layout.init_raw::<f64, _>(&mut rng));
        let pid_b = store.add("bias", vec![0.3, 0.2]);

        let build = |s: &ParamStore<f64>, t: &mut Tape<f64>| {
            let x = t.leaf_features_param(s, pid_x, 1, 12, 2, 2);
            let y = t.surfel_conv(x, s, pid_q, plan.clone(), layout.clone()).unwrap();
            let y = t.norm_activation(y, s, NormInner::Sigmoid, pid_b);
            t.sum_squares(y)
        };
        let mut tape = Tape::new(&store);
        let loss = build(&store, &mut tape);
        let grads = tape.backward(loss).unwrap();
        let picks: Vec<(ParamId, usize)> = (0..20)
            .map(|_| {
                let p = rng.random_range(0..store.entries.len());
                let i = rng.random_range(0..store.entries[p].data.len());
                (ParamId(p), i)
            })
            .collect();
        let report = grad_check(&mut store, &grads, &picks, 1e-5, |s| {
            let mut t = Tape::new(s);
            let l = build(s, &mut t);
            t.value(l).scalar()
        });
        println!(
            "  surfel_conv + norm activation chain: max rel dev {:.3e}",
            report.max_rel_dev()
        );
        ok &= report.max_rel_dev() < 1e-4;
    }

    // the full 2D stack with 50 randomly placed parameter picks
    let report = full_stack_gradcheck(50, 1e-5, 7).unwrap();
    println!(
        "  full stack (4-image batch, 50 picks): max rel dev {:.3e}",
        report.max_rel_dev()
    );
    ok &= report.max_rel_dev() < 1e-4;

    println!(
        "CRITERION 4 {}: central differences within 1e-4 relative (h = 1e-5, double) ({:.1}s)",
        if ok { "PASS" } else { "FAIL" },
        start.elapsed().as_secs_f64()
    );
    assert!(ok);
}

#[test]
fn criterion_5_surfel_oracle() {
    let start = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst_align = 0.0f64;
    for _ in 0..500 {
        let rand_unit = |rng: &mut ChaCha8Rng| {
            let v = [
                f64::sample_normal(rng),
                f64::sample_normal(rng),
                f64::sample_normal(rng),
            ];
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            [v[0] / n, v[1] / n, v[2] / n]
        };
        let f1 = make_frame(rand_unit(&mut rng)).unwrap();
        let f2 = make_frame(rand_unit(&mut rng)).unwrap();
        let z1 = Complex::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let s = BandLimitedSignal::new(vec![Complex::new(0.0, 0.0), z1]).unwrap();
        let aligned = align_coefficients(&s, &f1, &f2);

        // the k = 1 coefficient is the tangent vector Re(z)x + Im(z)y;
        // alignment must equal its projection into the target plane
        let t = [
            z1.re * f1.x[0] + z1.im * f1.y[0],
            z1.re * f1.x[1] + z1.im * f1.y[1],
            z1.re * f1.x[2] + z1.im * f1.y[2],
        ];
        let tp = sub(&t, &scale(&f2.normal, dot(&t, &f2.normal)));
        let want = Complex::new(dot(&tp, &f2.x), dot(&tp, &f2.y));
        worst_align = worst_align.max((aligned.coeff(1) - want).norm());
    }
    println!("  k=1 alignment vs 3D projection oracle: max |delta| {worst_align:.3e} (<1e-12)");

    let worst_sphere = surfel_sphere_demo(200, 20, 23).unwrap();
    println!(
        "  200-surfel sphere, single layer + invariant readout over 20 rotations: max rel dev {worst_sphere:.3e} (<1e-4)"
    );
    let ok = worst_align < 1e-12 && worst_sphere < 1e-4;
    println!(
        "CRITERION 5 {}: common-tangent alignment and SO(3)-invariant sphere readout ({:.1}s)",
        if ok { "PASS" } else { "FAIL" },
        start.elapsed().as_secs_f64()
    );
    assert!(ok);
}

#[test]
fn criterion_6_training_smoke() {
    let start = std::time::Instant::now();
    let train_set = synthetic_glyphs::<f32>(2000, 101);
    let test_set = synthetic_glyphs::<f32>(2000, 102);
    let cfg = ModelConfig::mnist_desk(ActivationKind::Relu, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut model = Model::<f32>::new(cfg, &mut rng).unwrap();
    let tcfg = TrainConfig {
        epochs: 10,
        batch_size: 64,
        lr: 0.015,
        decay: 0.8,
        decay_after: 16,
        seed: 33,
    };
    let metrics = train(&mut model, &train_set, &test_set, &tcfg).unwrap();
    let final_error = evaluate(&model, &test_set, 128).unwrap();

    for m in &metrics {
        println!(
            "  epoch {:>2}: lr {:.4} train_loss {:.4} test_error {:.2}%",
            m.epoch,
            m.lr,
            m.train_loss,
            m.test_error * 100.0
        );
    }
    let monotone =
        metrics[0].train_loss > metrics[1].train_loss && metrics[1].train_loss > metrics[2].train_loss;
    let ok = final_error < 0.05 && monotone;
    println!(
        "CRITERION 6 {}: desk-scale training, final test error {:.2}% (<5%), first-3-epoch loss monotone: {} ({:.0}s)",
        if ok { "PASS" } else { "FAIL" },
        final_error * 100.0,
        monotone,
        start.elapsed().as_secs_f64()
    );
    assert!(ok);
}

#[test]
fn criterion_7_randomized_suites() {
    let start = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(77);

    // sampling bijection, 10,000 randomized trials
    let mut worst_round = 0.0f64;
    for _ in 0..10_000 {
        let k = rng.random_range(0..=8usize);
        let extra = rng.random_range(0..=24usize);
        let s: BandLimitedSignal<f64> = random_signal(&mut rng, k);
        let n = 2 * k + 1 + extra;
        let back = BandLimitedSignal::from_angular(&s.to_angular(n).unwrap(), k).unwrap();
        worst_round = worst_round.max(max_rel_dev(&s, &back));
    }
    println!("  sampling bijection, 10,000 trials: max rel dev {worst_round:.3e} (<1e-12)");

    // ℓ1 bound, 10,000 randomized trials with aligned-phase tightness
    let mut bound_ok = true;
    let mut worst_gap = 0.0f64;
    for trial in 0..10_000 {
        let k = rng.random_range(1..=8usize);
        let s: BandLimitedSignal<f64> = random_signal(&mut rng, k);
        let bound = s.l1_norm();
        let angles = if trial % 100 == 0 { 10_000 } else { 128 };
        for j in 0..angles {
            let a = std::f64::consts::TAU * j as f64 / angles as f64;
            if s.evaluate(a).abs() > bound + 1e-12 {
                bound_ok = false;
            }
        }
        // aligned phases: all coefficients real positive, peak at angle 0
        let aligned = BandLimitedSignal::new(
            s.coeffs()
                .iter()
                .map(|z| Complex::new(z.norm(), 0.0))
                .collect(),
        )
        .unwrap();
        worst_gap = worst_gap.max((aligned.l1_norm() - aligned.evaluate(0.0)).abs());
    }
    println!("  l1 bound holds on all trials: {bound_ok}; aligned-phase tightness gap {worst_gap:.3e} (<1e-9)");

    let ok = worst_round < 1e-12 && bound_ok && worst_gap < 1e-9;
    println!(
        "CRITERION 7 {}: 10,000-trial sampling-bijection and l1-bound suites ({:.1}s)",
        if ok { "PASS" } else { "FAIL" },
        start.elapsed().as_secs_f64()
    );
    assert!(ok);
}

#[test]
fn criterion_8_parameter_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let config = ModelConfig::mnist_full(ActivationKind::Relu, 127, InvariantMap::Norm);
    let model = Model::<f32>::new(config, &mut rng).unwrap();
    let n = model.num_parameters();
    let reference = 1_394_986usize;
    let rel = (n as f64 - reference as f64).abs() / reference as f64;
    let ok = rel < 0.05;
    println!(
        "CRITERION 8 {}: full-width model counts {} parameters vs reference {} ({:+.2}%, must be within 5%; exact match remains a stretch goal of the weight parameterization)",
        if ok { "PASS" } else { "FAIL" },
        n,
        reference,
        (n as f64 - reference as f64) / reference as f64 * 100.0
    );
    assert!(ok);
}
