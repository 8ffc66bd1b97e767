//! Python bindings: band-limited signals, the three nonlinearity routes,
//! tangent-frame alignment and the measurement demos.

use num_complex::Complex;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use steernet::activations;
use steernet::error::Error;
use steernet::fourier::BandLimitedSignal;
use steernet::harness;
use steernet::model::ActivationKind;
use steernet::surfel;

fn err_to_py(e: Error) -> PyErr {
    match e {
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn parse_activation(name: &str) -> PyResult<activations::Activation<f64>> {
    ActivationKind::parse(name)
        .and_then(|k| k.build::<f64>())
        .map_err(err_to_py)
}

/// Real band-limited periodic function stored as complex coefficients
/// z_0..z_K (negative frequencies implied by conjugate symmetry).
#[pyclass(name = "BandLimitedSignal", from_py_object)]
#[derive(Clone)]
struct PySignal {
    inner: BandLimitedSignal<f64>,
}

#[pymethods]
impl PySignal {
    #[new]
    fn new(coeffs: Vec<Complex<f64>>) -> PyResult<Self> {
        Ok(Self {
            inner: BandLimitedSignal::new(coeffs).map_err(err_to_py)?,
        })
    }

    #[staticmethod]
    fn from_angular(samples: Vec<f64>, max_freq: usize) -> PyResult<Self> {
        Ok(Self {
            inner: BandLimitedSignal::from_angular(&samples, max_freq).map_err(err_to_py)?,
        })
    }

    /// x(angle) = Σ_k z_k e^{ik·angle}
    fn evaluate(&self, angle: f64) -> f64 {
        self.inner.evaluate(angle)
    }

    /// Equidistant samples x(2πj/N) via zero-padded inverse DFT.
    fn to_angular(&self, num_samples: usize) -> PyResult<Vec<f64>> {
        self.inner.to_angular(num_samples).map_err(err_to_py)
    }

    /// Rotate the represented pattern by +θ (z_k ← z_k e^{-ikθ}).
    fn rotate(&self, theta: f64) -> Self {
        Self {
            inner: self.inner.rotate(theta),
        }
    }

    /// |z_0| + 2 Σ_{k≥1} |z_k|, a tight bound on max |x(α)|.
    fn l1_norm(&self) -> f64 {
        self.inner.l1_norm()
    }

    fn clip_l1(&self, cap: f64) -> PyResult<Self> {
        Ok(Self {
            inner: self.inner.clip_l1(cap).map_err(err_to_py)?,
        })
    }

    fn coeffs(&self) -> Vec<Complex<f64>> {
        self.inner.coeffs().to_vec()
    }

    #[getter]
    fn max_freq(&self) -> usize {
        self.inner.max_freq()
    }

    fn __repr__(&self) -> String {
        format!(
            "BandLimitedSignal(K={}, coeffs={:?})",
            self.inner.max_freq(),
            self.inner.coeffs()
        )
    }
}

/// Real polynomial t_0 + t_1 x + ... + t_D x^D.
#[pyclass(name = "Polynomial", from_py_object)]
#[derive(Clone)]
struct PyPolynomial {
    inner: activations::Polynomial<f64>,
}

#[pymethods]
impl PyPolynomial {
    #[new]
    fn new(coeffs: Vec<f64>) -> PyResult<Self> {
        Ok(Self {
            inner: activations::Polynomial::new(coeffs).map_err(err_to_py)?,
        })
    }

    fn eval(&self, x: f64) -> f64 {
        self.inner.eval(x)
    }

    fn coeffs(&self) -> Vec<f64> {
        self.inner.coeffs().to_vec()
    }

    #[getter]
    fn degree(&self) -> usize {
        self.inner.degree()
    }
}

/// Right-handed orthonormal tangent frame (x, y, n).
#[pyclass(name = "Frame", from_py_object)]
#[derive(Clone)]
struct PyFrame {
    inner: surfel::Frame<f64>,
}

#[pymethods]
impl PyFrame {
    #[new]
    fn new(x: [f64; 3], y: [f64; 3], normal: [f64; 3]) -> PyResult<Self> {
        Ok(Self {
            inner: surfel::Frame::new(x, y, normal).map_err(err_to_py)?,
        })
    }

    #[getter]
    fn x(&self) -> [f64; 3] {
        self.inner.x
    }

    #[getter]
    fn y(&self) -> [f64; 3] {
        self.inner.y
    }

    #[getter]
    fn normal(&self) -> [f64; 3] {
        self.inner.normal
    }
}

/// Least-squares ReLU fit of the given degree (2 or 4) on [-c, c].
#[pyfunction]
#[pyo3(signature = (degree, half_range = 5.0))]
fn fit_poly_relu(degree: usize, half_range: f64) -> PyResult<PyPolynomial> {
    Ok(PyPolynomial {
        inner: activations::fit_poly_relu(degree, half_range).map_err(err_to_py)?,
    })
}

/// Smallest pad making the FFT route exact for a degree-D polynomial.
#[pyfunction]
fn minimal_exact_pad(max_freq: usize, degree: usize) -> usize {
    activations::minimal_exact_pad(max_freq, degree)
}

/// Oversampled-FFT application of a named pointwise activation
/// (relu, leaky_relu, silu, elu, tanh, sigmoid, poly2, poly4).
#[pyfunction]
fn apply_fft(signal: &PySignal, activation: &str, pad: usize) -> PyResult<PySignal> {
    let act = parse_activation(activation)?;
    Ok(PySignal {
        inner: activations::apply_fft(&signal.inner, &act, pad).map_err(err_to_py)?,
    })
}

/// Exact polynomial application by iterated coefficient-band convolution.
#[pyfunction]
fn apply_poly_direct(signal: &PySignal, poly: &PyPolynomial) -> PySignal {
    PySignal {
        inner: activations::apply_poly_direct(&signal.inner, &poly.inner),
    }
}

/// Norm-only nonlinearity (inner "relu" or "sigmoid") with a magnitude bias.
#[pyfunction]
fn apply_norm(signal: &PySignal, inner: &str, bias: f64) -> PyResult<PySignal> {
    let f = match inner {
        "relu" => activations::NormInner::Relu,
        "sigmoid" => activations::NormInner::Sigmoid,
        other => {
            return Err(PyValueError::new_err(format!(
                "norm-only inner function must be relu or sigmoid, got '{other}'"
            )))
        }
    };
    Ok(PySignal {
        inner: activations::apply_norm(&signal.inner, f, bias),
    })
}

/// Deterministic tangent frame for a unit normal.
#[pyfunction]
fn make_frame(normal: [f64; 3]) -> PyResult<PyFrame> {
    Ok(PyFrame {
        inner: surfel::make_frame(normal).map_err(err_to_py)?,
    })
}

/// Move a signal between tangent frames via the common-tangent alignment.
#[pyfunction]
fn align_coefficients(signal: &PySignal, from: &PyFrame, to: &PyFrame) -> PySignal {
    PySignal {
        inner: surfel::align_coefficients(&signal.inner, &from.inner, &to.inner),
    }
}

/// FFT-vs-direct polynomial comparison; returns (pad, max_dev, mean_dev).
#[pyfunction]
#[pyo3(signature = (degree, coeffs, pads, seed = 0))]
fn poly_oracle(
    degree: usize,
    coeffs: usize,
    pads: Vec<usize>,
    seed: u64,
) -> PyResult<Vec<(usize, f64, f64)>> {
    harness::poly_oracle(degree, coeffs, &pads, seed).map_err(err_to_py)
}

/// Single-layer surfel network on a synthetic sphere: max relative deviation
/// of the invariant readout over random SO(3) rotations.
#[pyfunction]
#[pyo3(signature = (num_surfels = 200, num_rotations = 20, seed = 0))]
fn sphere_invariance(num_surfels: usize, num_rotations: usize, seed: u64) -> PyResult<f64> {
    harness::surfel_sphere_demo(num_surfels, num_rotations, seed).map_err(err_to_py)
}

#[pymodule]
fn steernet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySignal>()?;
    m.add_class::<PyPolynomial>()?;
    m.add_class::<PyFrame>()?;
    m.add_function(wrap_pyfunction!(fit_poly_relu, m)?)?;
    m.add_function(wrap_pyfunction!(minimal_exact_pad, m)?)?;
    m.add_function(wrap_pyfunction!(apply_fft, m)?)?;
    m.add_function(wrap_pyfunction!(apply_poly_direct, m)?)?;
    m.add_function(wrap_pyfunction!(apply_norm, m)?)?;
    m.add_function(wrap_pyfunction!(make_frame, m)?)?;
    m.add_function(wrap_pyfunction!(align_coefficients, m)?)?;
    m.add_function(wrap_pyfunction!(poly_oracle, m)?)?;
    m.add_function(wrap_pyfunction!(sphere_invariance, m)?)?;
    Ok(())
}
