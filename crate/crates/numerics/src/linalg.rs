//! Matrix products and factorizations.

use crate::error::{param_err, shape_err, NumericsError, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;

/// `c = alpha·op(a)·op(b) + beta·c` for row-major storage.
///
/// `op(a)` is `m×k`: `a` is stored `m×k`, or `k×m` when `ta`. Likewise
/// `op(b)` is `k×p`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    p: usize,
    alpha: f64,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * p);
    assert_eq!(c.len(), m * p);
    if m == 0 || p == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (p as isize, 1) };
    // SAFETY: the asserts above bound every index the kernel touches by the
    // slice lengths given these dimensions and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            p,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            p as isize,
            1,
        );
    }
}

/// Shape bookkeeping for a batched product `op(a)·op(b)`.
#[derive(Debug, Clone)]
pub struct MatmulDims {
    pub batch: Vec<usize>,
    pub m: usize,
    pub k: usize,
    pub p: usize,
    /// `a` carries batch dimensions (otherwise it is shared).
    pub a_batched: bool,
    pub b_batched: bool,
}

impl MatmulDims {
    pub fn batch_count(&self) -> usize {
        self.batch.iter().product()
    }

    pub fn out_shape(&self) -> Vec<usize> {
        let mut s = self.batch.clone();
        s.push(self.m);
        s.push(self.p);
        s
    }
}

pub fn matmul_dims(a: &[usize], b: &[usize], ta: bool, tb: bool) -> Result<MatmulDims> {
    if a.len() < 2 || b.len() < 2 {
        return Err(shape_err("matmul", a, b));
    }
    let (ar, ac) = (a[a.len() - 2], a[a.len() - 1]);
    let (br, bc) = (b[b.len() - 2], b[b.len() - 1]);
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, p) = if tb { (bc, br) } else { (br, bc) };
    let a_batch = &a[..a.len() - 2];
    let b_batch = &b[..b.len() - 2];
    if k != k2 {
        return Err(shape_err("matmul", a, b));
    }
    let batch = match (a_batch.is_empty(), b_batch.is_empty()) {
        (_, true) => a_batch.to_vec(),
        (true, false) => b_batch.to_vec(),
        (false, false) if a_batch == b_batch => a_batch.to_vec(),
        _ => return Err(shape_err("matmul", a, b)),
    };
    Ok(MatmulDims {
        batch,
        m,
        k,
        p,
        a_batched: !a_batch.is_empty(),
        b_batched: !b_batch.is_empty(),
    })
}

/// Batched `op(a)·op(b)`. Leading dimensions must match, or one operand is
/// a plain matrix shared across the batch.
pub fn matmul_t(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Result<Tensor> {
    let dims = matmul_dims(a.shape(), b.shape(), ta, tb)?;
    let (m, k, p) = (dims.m, dims.k, dims.p);
    let mut out = Tensor::zeros(&dims.out_shape());
    if ta || dims.b_batched {
        for bi in 0..dims.batch_count() {
            let a_off = if dims.a_batched { bi * m * k } else { 0 };
            let b_off = if dims.b_batched { bi * k * p } else { 0 };
            gemm(
                m,
                k,
                p,
                1.0,
                &a.data()[a_off..a_off + m * k],
                ta,
                &b.data()[b_off..b_off + k * p],
                tb,
                0.0,
                &mut out.data_mut()[bi * m * p..(bi + 1) * m * p],
            );
        }
    } else {
        // Shared right operand and untransposed left: fold the batch into rows.
        let rows = dims.batch_count() * m;
        gemm(rows, k, p, 1.0, a.data(), false, b.data(), tb, 0.0, out.data_mut());
    }
    Ok(out)
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    matmul_t(a, b, false, false)
}

/// Orthonormal basis of the column space of a full-column-rank `n×r`
/// matrix (modified Gram–Schmidt with one reorthogonalization pass).
pub fn orthonormalize(a: &Tensor) -> Result<Tensor> {
    let (n, r) = (a.rows(), a.cols());
    let mut cols: Vec<Vec<f64>> = (0..r).map(|j| (0..n).map(|i| a.at(&[i, j])).collect()).collect();
    for j in 0..r {
        for _pass in 0..2 {
            for i in 0..j {
                let (head, tail) = cols.split_at_mut(j);
                let (ci, cj) = (&head[i], &mut tail[0]);
                let proj: f64 = ci.iter().zip(cj.iter()).map(|(a, b)| a * b).sum();
                for (b, a) in cj.iter_mut().zip(ci) {
                    *b -= proj * a;
                }
            }
        }
        let norm = cols[j].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-300 {
            return Err(param_err("orthonormalize", format!("column {j} is linearly dependent")));
        }
        cols[j].iter_mut().for_each(|v| *v /= norm);
    }
    Ok(Tensor::from_fn(&[n, r], |f| cols[f % r][f / r]))
}

/// `n×r` matrix with orthonormal columns drawn from the Haar measure
/// (orthonormalized Gaussian).
pub fn random_orthonormal(n: usize, r: usize, rng: &mut RngState) -> Tensor {
    loop {
        let g = Tensor::new(&[n, r], rng.normal_vec(n * r, 1.0)).expect("shape");
        if let Ok(q) = orthonormalize(&g) {
            return q;
        }
    }
}

/// Compact SVD `a = W·diag(sigma)·Vᵀ` with `min(n, d)` components sorted
/// descending. Columns of `W` belonging to zero singular values are
/// completed to an orthonormal set.
#[derive(Debug, Clone)]
pub struct Svd {
    pub w: Tensor,
    pub sigma: Vec<f64>,
    pub v: Tensor,
}

impl Svd {
    /// Numerical rank under the truncation threshold
    /// `max(n, d)·σ_max·1e-12`.
    pub fn rank(&self) -> usize {
        let tau = self.threshold();
        self.sigma.iter().filter(|&&s| s > tau).count()
    }

    pub fn threshold(&self) -> f64 {
        let dim = self.w.rows().max(self.v.rows()) as f64;
        dim * self.sigma.first().copied().unwrap_or(0.0) * 1e-12
    }

    pub fn reconstruct(&self) -> Tensor {
        let (n, d, r) = (self.w.rows(), self.v.rows(), self.sigma.len());
        let ws = Tensor::from_fn(&[n, r], |f| self.w.data()[f] * self.sigma[f % r]);
        matmul_t(&ws, &self.v, false, true)
            .expect("svd factor shapes")
            .into_reshape(&[n, d])
            .unwrap()
    }
}

const JACOBI_MAX_SWEEPS: usize = 80;

/// One-sided (Hestenes) Jacobi SVD.
pub fn svd(a: &Tensor) -> Result<Svd> {
    if a.rank() != 2 {
        return Err(param_err(
            "svd",
            format!("expected a matrix, got shape {:?}", a.shape()),
        ));
    }
    a.validate_finite("svd")?;
    let (n, d) = (a.rows(), a.cols());
    if n < d {
        let s = svd(&a.t())?;
        return Ok(Svd {
            w: s.v,
            sigma: s.sigma,
            v: s.w,
        });
    }
    // Columns of `u` are rotated until mutually orthogonal; `v` accumulates
    // the rotations. Column-major working copies.
    let mut u: Vec<Vec<f64>> = (0..d).map(|j| (0..n).map(|i| a.at(&[i, j])).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..d)
        .map(|j| (0..d).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let tol = (n as f64) * f64::EPSILON;
    // Columns whose energy is below round-off of the whole matrix carry no
    // signal; their angle to other columns never settles, so skip them.
    let fro2: f64 = u.iter().flatten().map(|x| x * x).sum();
    let negligible = fro2 * f64::EPSILON * f64::EPSILON;
    let mut converged = false;
    let mut off = 0.0;
    for _sweep in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        off = 0.0f64;
        for p in 0..d {
            for q in p + 1..d {
                let (alpha, beta, gamma) = {
                    let (up, uq) = (&u[p], &u[q]);
                    let mut al = 0.0;
                    let mut be = 0.0;
                    let mut ga = 0.0;
                    for t in 0..n {
                        al += up[t] * up[t];
                        be += uq[t] * uq[t];
                        ga += up[t] * uq[t];
                    }
                    (al, be, ga)
                };
                if alpha <= negligible || beta <= negligible {
                    continue;
                }
                let ratio = gamma.abs() / (alpha * beta).sqrt();
                off = off.max(ratio);
                if ratio <= tol {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut u, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(NumericsError::NoConvergence {
            op: "svd",
            iterations: JACOBI_MAX_SWEEPS,
            residual: off,
        });
    }
    let mut sigma: Vec<f64> = u.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| sigma[j].total_cmp(&sigma[i]));
    let mut w_cols: Vec<Vec<f64>> = Vec::with_capacity(d);
    let mut v_cols: Vec<Vec<f64>> = Vec::with_capacity(d);
    let mut sorted_sigma = Vec::with_capacity(d);
    for &j in &order {
        let s = sigma[j];
        // Converged columns are pairwise orthogonal to `tol`; negligible
        // ones were never rotated against and get a completed direction.
        if s * s > negligible {
            w_cols.push(u[j].iter().map(|x| x / s).collect());
        } else {
            w_cols.push(Vec::new());
        }
        v_cols.push(std::mem::take(&mut v[j]));
        sorted_sigma.push(s);
    }
    complete_basis(&mut w_cols, n);
    sigma = sorted_sigma;
    let w = Tensor::from_fn(&[n, d], |f| w_cols[f % d][f / d]);
    let vt = Tensor::from_fn(&[d, d], |f| v_cols[f % d][f / d]);
    Ok(Svd { w, sigma, v: vt })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Replaces empty entries of `cols` by unit vectors orthogonal to the rest.
fn complete_basis(cols: &mut [Vec<f64>], n: usize) {
    let mut candidate = 0;
    for j in 0..cols.len() {
        if !cols[j].is_empty() {
            continue;
        }
        while candidate < n {
            let mut e = vec![0.0; n];
            e[candidate] = 1.0;
            candidate += 1;
            for _pass in 0..2 {
                for other in cols.iter().filter(|c| !c.is_empty()) {
                    let proj: f64 = other.iter().zip(&e).map(|(a, b)| a * b).sum();
                    e.iter_mut().zip(other).for_each(|(x, o)| *x -= proj * o);
                }
            }
            let norm = e.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                e.iter_mut().for_each(|x| *x /= norm);
                cols[j] = e;
                break;
            }
        }
    }
}

/// Moore–Penrose pseudo-inverse with singular values at or below
/// `max(n, d)·σ_max·1e-12` treated as zero.
pub fn pinv(a: &Tensor) -> Result<Tensor> {
    let s = svd(a)?;
    let (n, d) = (a.rows(), a.cols());
    let r = s.sigma.len();
    let tau = s.threshold();
    // V·Σ⁺ then (V·Σ⁺)·Wᵀ
    let inv: Vec<f64> = s.sigma.iter().map(|&x| if x > tau { 1.0 / x } else { 0.0 }).collect();
    let vs = Tensor::from_fn(&[d, r], |f| s.v.data()[f] * inv[f % r]);
    let out = matmul_t(&vs, &s.w, false, true)?;
    debug_assert_eq!(out.shape(), &[d, n]);
    Ok(out)
}

/// Largest singular value by power iteration on `aᵀa`.
///
/// Stops when the estimate changes by less than `tol` relative, or after
/// `max_iter` iterations (the last estimate is returned).
pub fn spectral_norm(a: &Tensor, tol: f64, max_iter: usize) -> f64 {
    let (n, d) = (a.rows(), a.cols());
    if n == 0 || d == 0 {
        return 0.0;
    }
    let data = a.data();
    let mut rng = RngState::new(0x005E_ED0F_5EC7);
    let mut v: Vec<f64> = (0..d).map(|_| 1.0 + 0.5 * rng.normal()).collect();
    let mut av = vec![0.0; n];
    let mut estimate = 0.0;
    for _ in 0..max_iter {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        for (i, out) in av.iter_mut().enumerate() {
            *out = data[i * d..(i + 1) * d].iter().zip(&v).map(|(x, y)| x * y).sum();
        }
        let next = av.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (j, vj) in v.iter_mut().enumerate() {
            *vj = (0..n).map(|i| data[i * d + j] * av[i]).sum();
        }
        let converged = (next - estimate).abs() <= tol * next;
        estimate = next;
        if converged || next == 0.0 {
            break;
        }
    }
    estimate
}
