//! Complex and real FFTs of arbitrary length.
//!
//! Lengths whose prime factors are all at most [`MAX_DIRECT_RADIX`] use a
//! recursive mixed-radix decimation-in-time Cooley–Tukey transform with
//! dedicated radix-2 and radix-4 butterflies and a generic O(p²) butterfly
//! for other primes. Lengths with a larger prime factor go through
//! Bluestein's chirp-z algorithm on a power-of-two convolution.
//!
//! Sign convention: forward `X[k] = Σ x[t]·exp(−2πi·k·t/n)`, inverse carries
//! the `1/n` factor.

use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::rc::Rc;

use num_complex::Complex64;

use crate::error::{param_err, shape_err, Result};
use crate::tensor::{axis_split, Tensor};

/// Largest prime handled by the mixed-radix path.
pub const MAX_DIRECT_RADIX: usize = 31;

/// Precomputed transform of one length.
pub struct FftPlan {
    n: usize,
    kind: PlanKind,
}

enum PlanKind {
    MixedRadix {
        factors: Vec<usize>,
        // exp(−2πi·j/n) for j in 0..n
        twiddles: Vec<Complex64>,
    },
    Bluestein {
        chirp: Vec<Complex64>,
        kernel_spectrum: Vec<Complex64>,
        inner: Rc<FftPlan>,
    },
}

fn factorize(mut n: usize) -> Vec<usize> {
    let mut factors = Vec::new();
    while n.is_multiple_of(4) {
        factors.push(4);
        n /= 4;
    }
    let mut p = 2;
    while n > 1 {
        while n.is_multiple_of(p) {
            factors.push(p);
            n /= p;
        }
        p += 1;
        if p * p > n && n > 1 {
            factors.push(n);
            break;
        }
    }
    factors
}

fn twiddle(j: usize, n: usize) -> Complex64 {
    let angle = -2.0 * PI * j as f64 / n as f64;
    Complex64::new(angle.cos(), angle.sin())
}

impl FftPlan {
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "FFT length must be positive");
        let factors = factorize(n);
        if factors.iter().all(|&p| p <= MAX_DIRECT_RADIX) {
            let twiddles = (0..n).map(|j| twiddle(j, n)).collect();
            return Self {
                n,
                kind: PlanKind::MixedRadix { factors, twiddles },
            };
        }
        let m = (2 * n - 1).next_power_of_two();
        let inner = Rc::new(FftPlan::new(m));
        // k² is reduced mod 2n before scaling so the chirp angle stays exact.
        let chirp: Vec<Complex64> = (0..n)
            .map(|k| {
                let k2 = (k as u128 * k as u128 % (2 * n as u128)) as f64;
                let angle = -PI * k2 / n as f64;
                Complex64::new(angle.cos(), angle.sin())
            })
            .collect();
        let mut kernel = vec![Complex64::new(0.0, 0.0); m];
        kernel[0] = chirp[0].conj();
        for k in 1..n {
            kernel[k] = chirp[k].conj();
            kernel[m - k] = chirp[k].conj();
        }
        inner.forward(&mut kernel);
        Self {
            n,
            kind: PlanKind::Bluestein {
                chirp,
                kernel_spectrum: kernel,
                inner,
            },
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn uses_bluestein(&self) -> bool {
        matches!(self.kind, PlanKind::Bluestein { .. })
    }

    /// In-place forward transform.
    pub fn forward(&self, data: &mut [Complex64]) {
        assert_eq!(data.len(), self.n, "FFT buffer length");
        match &self.kind {
            PlanKind::MixedRadix { factors, twiddles } => {
                if self.n == 1 {
                    return;
                }
                let input = data.to_vec();
                dit(&input, 0, 1, data, factors, twiddles, 1);
            }
            PlanKind::Bluestein {
                chirp,
                kernel_spectrum,
                inner,
            } => {
                let m = inner.len();
                let mut work = vec![Complex64::new(0.0, 0.0); m];
                for k in 0..self.n {
                    work[k] = data[k] * chirp[k];
                }
                inner.forward(&mut work);
                for (w, k) in work.iter_mut().zip(kernel_spectrum) {
                    *w *= k;
                }
                inner.inverse(&mut work);
                for k in 0..self.n {
                    data[k] = work[k] * chirp[k];
                }
            }
        }
    }

    /// In-place inverse transform including the `1/n` factor.
    pub fn inverse(&self, data: &mut [Complex64]) {
        for v in data.iter_mut() {
            *v = v.conj();
        }
        self.forward(data);
        let scale = 1.0 / self.n as f64;
        for v in data.iter_mut() {
            *v = v.conj() * scale;
        }
    }
}

/// Decimation in time over `input[offset + stride·i]`, writing `out`.
/// `tw_step` maps this sub-length's roots onto the full twiddle table.
fn dit(
    input: &[Complex64],
    offset: usize,
    stride: usize,
    out: &mut [Complex64],
    factors: &[usize],
    twiddles: &[Complex64],
    tw_step: usize,
) {
    let n = out.len();
    if n == 1 {
        out[0] = input[offset];
        return;
    }
    let p = factors[0];
    let m = n / p;
    for j in 0..p {
        dit(
            input,
            offset + j * stride,
            stride * p,
            &mut out[j * m..(j + 1) * m],
            &factors[1..],
            twiddles,
            tw_step * p,
        );
    }
    let full = twiddles.len();
    match p {
        2 => {
            for k in 0..m {
                let a = out[k];
                let b = out[k + m] * twiddles[k * tw_step];
                out[k] = a + b;
                out[k + m] = a - b;
            }
        }
        4 => {
            for k in 0..m {
                let a0 = out[k];
                let a1 = out[k + m] * twiddles[k * tw_step];
                let a2 = out[k + 2 * m] * twiddles[2 * k * tw_step];
                let a3 = out[k + 3 * m] * twiddles[3 * k * tw_step];
                let s02 = a0 + a2;
                let d02 = a0 - a2;
                let s13 = a1 + a3;
                // −i·(a1 − a3)
                let d13 = a1 - a3;
                let d13 = Complex64::new(d13.im, -d13.re);
                out[k] = s02 + s13;
                out[k + m] = d02 + d13;
                out[k + 2 * m] = s02 - s13;
                out[k + 3 * m] = d02 - d13;
            }
        }
        _ => {
            let mut t = vec![Complex64::new(0.0, 0.0); p];
            for k in 0..m {
                for (j, tj) in t.iter_mut().enumerate() {
                    *tj = out[k + j * m] * twiddles[(j * k * tw_step) % full];
                }
                for q in 0..p {
                    let mut acc = t[0];
                    for (j, tj) in t.iter().enumerate().skip(1) {
                        acc += tj * twiddles[(j * q * m * tw_step) % full];
                    }
                    out[k + q * m] = acc;
                }
            }
        }
    }
}

thread_local! {
    static PLANS: RefCell<HashMap<usize, Rc<FftPlan>>> = RefCell::new(HashMap::new());
}

/// Cached plan for length `n` on the current thread.
pub fn plan(n: usize) -> Rc<FftPlan> {
    PLANS.with(|plans| {
        plans
            .borrow_mut()
            .entry(n)
            .or_insert_with(|| Rc::new(FftPlan::new(n)))
            .clone()
    })
}

pub fn fft_1d(x: &[Complex64]) -> Vec<Complex64> {
    let mut buf = x.to_vec();
    plan(x.len()).forward(&mut buf);
    buf
}

pub fn ifft_1d(x: &[Complex64]) -> Vec<Complex64> {
    let mut buf = x.to_vec();
    plan(x.len()).inverse(&mut buf);
    buf
}

/// Half spectrum (`⌊n/2⌋ + 1` bins) of a real sequence.
pub fn rfft_1d(x: &[f64]) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    plan(x.len()).forward(&mut buf);
    buf.truncate(x.len() / 2 + 1);
    buf
}

/// Real sequence of length `n` from a half spectrum, assuming Hermitian
/// symmetry. Imaginary parts of the DC and (even `n`) Nyquist bins are
/// ignored.
pub fn irfft_1d(spec: &[Complex64], n: usize) -> Vec<f64> {
    assert_eq!(spec.len(), n / 2 + 1, "irfft spectrum length");
    let mut full = vec![Complex64::new(0.0, 0.0); n];
    full[..spec.len()].copy_from_slice(spec);
    for k in 1..spec.len() {
        if n - k != k {
            full[n - k] = spec[k].conj();
        }
    }
    plan(n).inverse(&mut full);
    full.into_iter().map(|c| c.re).collect()
}

/// Complex array with real and imaginary planes of one shape.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrum {
    pub re: Tensor,
    pub im: Tensor,
}

impl ComplexSpectrum {
    pub fn new(re: Tensor, im: Tensor) -> Result<Self> {
        if re.shape() != im.shape() {
            return Err(shape_err("ComplexSpectrum::new", re.shape(), im.shape()));
        }
        Ok(Self { re, im })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            re: Tensor::zeros(shape),
            im: Tensor::zeros(shape),
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.re.shape()
    }

    pub fn get(&self, flat: usize) -> Complex64 {
        Complex64::new(self.re.data()[flat], self.im.data()[flat])
    }
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(param_err(op, format!("axis {axis} out of range for shape {shape:?}")));
    }
    if shape[axis] == 0 {
        return Err(param_err(op, "transform length must be at least 1"));
    }
    Ok(())
}

/// Real FFT along `axis`; that axis shrinks to `⌊n/2⌋ + 1`.
pub fn rfft(x: &Tensor, axis: usize) -> Result<ComplexSpectrum> {
    check_axis("rfft", x.shape(), axis)?;
    let (outer, n, inner) = axis_split(x.shape(), axis);
    let h = n / 2 + 1;
    let mut out_shape = x.shape().to_vec();
    out_shape[axis] = h;
    let mut re = Tensor::zeros(&out_shape);
    let mut im = Tensor::zeros(&out_shape);
    let plan = plan(n);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let src = x.data();
    for o in 0..outer {
        for i in 0..inner {
            for (t, b) in buf.iter_mut().enumerate() {
                *b = Complex64::new(src[(o * n + t) * inner + i], 0.0);
            }
            plan.forward(&mut buf);
            for (k, b) in buf.iter().take(h).enumerate() {
                let flat = (o * h + k) * inner + i;
                re.data_mut()[flat] = b.re;
                im.data_mut()[flat] = b.im;
            }
        }
    }
    Ok(ComplexSpectrum { re, im })
}

/// Inverse of [`rfft`] producing `n` real samples along `axis`.
pub fn irfft(spec: &ComplexSpectrum, n: usize, axis: usize) -> Result<Tensor> {
    check_axis("irfft", spec.shape(), axis)?;
    let (outer, h, inner) = axis_split(spec.shape(), axis);
    if n == 0 || h != n / 2 + 1 {
        return Err(shape_err("irfft", spec.shape(), &[n / 2 + 1]));
    }
    let mut out_shape = spec.shape().to_vec();
    out_shape[axis] = n;
    let mut out = Tensor::zeros(&out_shape);
    let mut half = vec![Complex64::new(0.0, 0.0); h];
    for o in 0..outer {
        for i in 0..inner {
            for (k, c) in half.iter_mut().enumerate() {
                *c = spec.get((o * h + k) * inner + i);
            }
            let y = irfft_1d(&half, n);
            for (t, v) in y.into_iter().enumerate() {
                out.data_mut()[(o * n + t) * inner + i] = v;
            }
        }
    }
    Ok(out)
}
