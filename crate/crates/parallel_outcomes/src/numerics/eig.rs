//! Eigendecomposition of a real square matrix with possibly complex
//! spectrum.
//!
//! The implementation follows the classic EISPACK route, the same one used
//! by Jama and numerous ports of it: orthogonal reduction to upper
//! Hessenberg form, then the shifted double QR iteration with accumulation
//! of the transformations, then back substitution for the eigenvectors of
//! the quasi-triangular form. Matrices here are small contingency-scale
//! objects, so the dense textbook algorithm is the right tool.

use nalgebra::{Complex, DMatrix};

use crate::error::{Error, Result};

/// Eigenvalues and matching right eigenvectors of a real square matrix.
///
/// `values[j]` pairs with column `j` of `vectors`. Pairs are sorted by
/// ascending real part (ties broken by imaginary part). Each column has
/// unit l1 norm of entry moduli, and the first entry of nonnegligible
/// modulus is rotated onto the positive real axis, so real eigenvectors
/// have a positive leading entry.
#[derive(Debug, Clone)]
pub struct EigenPairs {
    pub values: Vec<Complex<f64>>,
    pub vectors: DMatrix<Complex<f64>>,
}

impl EigenPairs {
    /// Largest eigenvalue modulus.
    pub fn spectral_radius(&self) -> f64 {
        self.values.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    /// Largest absolute imaginary part across eigenvalues.
    pub fn max_imag(&self) -> f64 {
        self.values.iter().map(|v| v.im.abs()).fold(0.0, f64::max)
    }
}

const MAX_ITER_PER_ROOT: usize = 100;

/// Full eigendecomposition of a real square matrix.
///
/// Fails with `NonConvergence` when the QR iteration stalls or a computed
/// pair violates the residual bound |A v - lambda v|_inf <= 1e-8 |A|_inf.
pub fn eig_real(a: &DMatrix<f64>) -> Result<EigenPairs> {
    let n = a.nrows();
    if n == 0 || a.ncols() != n {
        return Err(Error::Validation(format!(
            "eig_real needs a nonempty square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation(
            "eig_real input has a non-finite entry".into(),
        ));
    }

    if n == 1 {
        return Ok(EigenPairs {
            values: vec![Complex::new(a[(0, 0)], 0.0)],
            vectors: DMatrix::from_element(1, 1, Complex::new(1.0, 0.0)),
        });
    }

    let mut h = a.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    let mut d = vec![0.0f64; n];
    let mut e = vec![0.0f64; n];

    hessenberg(&mut h, &mut v);
    if !schur_with_vectors(&mut h, &mut v, &mut d, &mut e) {
        return Err(Error::NonConvergence {
            dim: n,
            residual: f64::INFINITY,
        });
    }

    let pairs = assemble_complex(&v, &d, &e);
    let pairs = sort_pairs(pairs);
    let residual = max_residual(a, &pairs);
    let bound = 1e-8 * inf_norm(a).max(f64::MIN_POSITIVE);
    if !residual.is_finite() || residual > bound {
        return Err(Error::NonConvergence { dim: n, residual });
    }
    Ok(pairs)
}

/// Operator infinity norm: maximal absolute row sum.
pub fn inf_norm(a: &DMatrix<f64>) -> f64 {
    (0..a.nrows())
        .map(|i| (0..a.ncols()).map(|j| a[(i, j)].abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

fn max_residual(a: &DMatrix<f64>, pairs: &EigenPairs) -> f64 {
    let n = a.nrows();
    let mut worst = 0.0f64;
    for (j, lambda) in pairs.values.iter().enumerate() {
        for i in 0..n {
            let mut av = Complex::new(0.0, 0.0);
            for k in 0..n {
                av += Complex::new(a[(i, k)], 0.0) * pairs.vectors[(k, j)];
            }
            let r = (av - lambda * pairs.vectors[(i, j)]).norm();
            worst = worst.max(r);
        }
    }
    worst
}

/// Householder reduction to upper Hessenberg form, accumulating the
/// orthogonal similarity into `v`.
fn hessenberg(h: &mut DMatrix<f64>, v: &mut DMatrix<f64>) {
    let n = h.nrows();
    let low = 0usize;
    let high = n - 1;
    let mut ort = vec![0.0f64; n];

    for m in (low + 1)..high {
        let mut scale = 0.0;
        for i in m..=high {
            scale += h[(i, m - 1)].abs();
        }
        if scale == 0.0 {
            continue;
        }

        let mut hsum = 0.0;
        for i in (m..=high).rev() {
            ort[i] = h[(i, m - 1)] / scale;
            hsum += ort[i] * ort[i];
        }
        let mut g = hsum.sqrt();
        if ort[m] > 0.0 {
            g = -g;
        }
        hsum -= ort[m] * g;
        ort[m] -= g;

        // Similarity transform H <- (I - u u'/h) H (I - u u'/h).
        for j in m..n {
            let mut f = 0.0;
            for i in (m..=high).rev() {
                f += ort[i] * h[(i, j)];
            }
            f /= hsum;
            for i in m..=high {
                h[(i, j)] -= f * ort[i];
            }
        }
        for i in 0..=high {
            let mut f = 0.0;
            for j in (m..=high).rev() {
                f += ort[j] * h[(i, j)];
            }
            f /= hsum;
            for j in m..=high {
                h[(i, j)] -= f * ort[j];
            }
        }
        ort[m] *= scale;
        h[(m, m - 1)] = scale * g;
    }

    // Accumulate the stored reflections in reverse order.
    for m in ((low + 1)..high).rev() {
        if h[(m, m - 1)] == 0.0 {
            continue;
        }
        for i in (m + 1)..=high {
            ort[i] = h[(i, m - 1)];
        }
        for j in m..=high {
            let mut g = 0.0;
            for i in m..=high {
                g += ort[i] * v[(i, j)];
            }
            // Double division avoids possible underflow.
            g = (g / ort[m]) / h[(m, m - 1)];
            for i in m..=high {
                v[(i, j)] += g * ort[i];
            }
        }
    }
}

/// Shifted double QR iteration on a Hessenberg matrix, followed by back
/// substitution for eigenvectors. Returns false when the iteration budget
/// for some eigenvalue is exhausted.
#[allow(clippy::needless_range_loop)]
fn schur_with_vectors(
    h: &mut DMatrix<f64>,
    v: &mut DMatrix<f64>,
    d: &mut [f64],
    e: &mut [f64],
) -> bool {
    let nn = h.nrows();
    let low = 0isize;
    let high = nn as isize - 1;
    let eps = f64::EPSILON;
    let mut exshift = 0.0f64;
    let (mut p, mut q, mut r, mut s, mut z) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let (mut t, mut w, mut x, mut y): (f64, f64, f64, f64);

    let mut norm = 0.0f64;
    for i in 0..nn {
        for j in i.saturating_sub(1)..nn {
            norm += h[(i, j)].abs();
        }
    }

    let mut n = nn as isize - 1;
    let mut iter = 0usize;
    while n >= low {
        // Look for a single small subdiagonal element.
        let mut l = n;
        while l > low {
            s = h[(l as usize - 1, l as usize - 1)].abs() + h[(l as usize, l as usize)].abs();
            if s == 0.0 {
                s = norm;
            }
            if h[(l as usize, l as usize - 1)].abs() < eps * s {
                break;
            }
            l -= 1;
        }

        if l == n {
            // One root found.
            let nu = n as usize;
            h[(nu, nu)] += exshift;
            d[nu] = h[(nu, nu)];
            e[nu] = 0.0;
            n -= 1;
            iter = 0;
        } else if l == n - 1 {
            // Two roots found.
            let nu = n as usize;
            w = h[(nu, nu - 1)] * h[(nu - 1, nu)];
            p = (h[(nu - 1, nu - 1)] - h[(nu, nu)]) / 2.0;
            q = p * p + w;
            z = q.abs().sqrt();
            h[(nu, nu)] += exshift;
            h[(nu - 1, nu - 1)] += exshift;
            x = h[(nu, nu)];

            if q >= 0.0 {
                // Real pair.
                z = if p >= 0.0 { p + z } else { p - z };
                d[nu - 1] = x + z;
                d[nu] = d[nu - 1];
                if z != 0.0 {
                    d[nu] = x - w / z;
                }
                e[nu - 1] = 0.0;
                e[nu] = 0.0;
                x = h[(nu, nu - 1)];
                s = x.abs() + z.abs();
                p = x / s;
                q = z / s;
                r = (p * p + q * q).sqrt();
                p /= r;
                q /= r;
                for j in (nu - 1)..nn {
                    z = h[(nu - 1, j)];
                    h[(nu - 1, j)] = q * z + p * h[(nu, j)];
                    h[(nu, j)] = q * h[(nu, j)] - p * z;
                }
                for i in 0..=nu {
                    z = h[(i, nu - 1)];
                    h[(i, nu - 1)] = q * z + p * h[(i, nu)];
                    h[(i, nu)] = q * h[(i, nu)] - p * z;
                }
                for i in low as usize..=high as usize {
                    z = v[(i, nu - 1)];
                    v[(i, nu - 1)] = q * z + p * v[(i, nu)];
                    v[(i, nu)] = q * v[(i, nu)] - p * z;
                }
            } else {
                // Complex pair.
                d[nu - 1] = x + p;
                d[nu] = x + p;
                e[nu - 1] = z;
                e[nu] = -z;
            }
            n -= 2;
            iter = 0;
        } else {
            // No convergence yet; form a shift and run a double QR step.
            let nu = n as usize;
            x = h[(nu, nu)];
            y = 0.0;
            w = 0.0;
            if l < n {
                y = h[(nu - 1, nu - 1)];
                w = h[(nu, nu - 1)] * h[(nu - 1, nu)];
            }

            if iter == 10 {
                exshift += x;
                for i in low..=n {
                    let iu = i as usize;
                    h[(iu, iu)] -= x;
                }
                s = h[(nu, nu - 1)].abs() + h[(nu - 1, nu - 2)].abs();
                x = 0.75 * s;
                y = x;
                w = -0.4375 * s * s;
            }
            if iter == 30 {
                s = (y - x) / 2.0;
                s = s * s + w;
                if s > 0.0 {
                    s = s.sqrt();
                    if y < x {
                        s = -s;
                    }
                    s = x - w / ((y - x) / 2.0 + s);
                    for i in low..=n {
                        let iu = i as usize;
                        h[(iu, iu)] -= s;
                    }
                    exshift += s;
                    x = 0.964;
                    y = 0.964;
                    w = 0.964;
                }
            }

            iter += 1;
            if iter > MAX_ITER_PER_ROOT {
                return false;
            }

            // Look for two consecutive small subdiagonal elements.
            let mut m = n - 2;
            while m >= l {
                let mu = m as usize;
                z = h[(mu, mu)];
                r = x - z;
                s = y - z;
                p = (r * s - w) / h[(mu + 1, mu)] + h[(mu, mu + 1)];
                q = h[(mu + 1, mu + 1)] - z - r - s;
                r = h[(mu + 2, mu + 1)];
                s = p.abs() + q.abs() + r.abs();
                p /= s;
                q /= s;
                r /= s;
                if m == l {
                    break;
                }
                if h[(mu, mu - 1)].abs() * (q.abs() + r.abs())
                    < eps
                        * (p.abs()
                            * (h[(mu - 1, mu - 1)].abs() + z.abs() + h[(mu + 1, mu + 1)].abs()))
                {
                    break;
                }
                m -= 1;
            }

            for i in (m + 2)..=n {
                let iu = i as usize;
                h[(iu, iu - 2)] = 0.0;
                if i > m + 2 {
                    h[(iu, iu - 3)] = 0.0;
                }
            }

            // Double QR step on rows l..=n, columns m..=n.
            for k in m..=(n - 1) {
                let ku = k as usize;
                let notlast = k != n - 1;
                if k != m {
                    p = h[(ku, ku - 1)];
                    q = h[(ku + 1, ku - 1)];
                    r = if notlast { h[(ku + 2, ku - 1)] } else { 0.0 };
                    x = p.abs() + q.abs() + r.abs();
                    if x == 0.0 {
                        continue;
                    }
                    p /= x;
                    q /= x;
                    r /= x;
                }
                s = (p * p + q * q + r * r).sqrt();
                if p < 0.0 {
                    s = -s;
                }
                if s == 0.0 {
                    continue;
                }
                if k != m {
                    h[(ku, ku - 1)] = -s * x;
                } else if l != m {
                    h[(ku, ku - 1)] = -h[(ku, ku - 1)];
                }
                p += s;
                x = p / s;
                y = q / s;
                z = r / s;
                q /= p;
                r /= p;

                for j in ku..nn {
                    p = h[(ku, j)] + q * h[(ku + 1, j)];
                    if notlast {
                        p += r * h[(ku + 2, j)];
                        h[(ku + 2, j)] -= p * z;
                    }
                    h[(ku, j)] -= p * x;
                    h[(ku + 1, j)] -= p * y;
                }
                for i in 0..=(n.min(k + 3) as usize) {
                    p = x * h[(i, ku)] + y * h[(i, ku + 1)];
                    if notlast {
                        p += z * h[(i, ku + 2)];
                        h[(i, ku + 2)] -= p * r;
                    }
                    h[(i, ku)] -= p;
                    h[(i, ku + 1)] -= p * q;
                }
                for i in low as usize..=high as usize {
                    p = x * v[(i, ku)] + y * v[(i, ku + 1)];
                    if notlast {
                        p += z * v[(i, ku + 2)];
                        v[(i, ku + 2)] -= p * r;
                    }
                    v[(i, ku)] -= p;
                    v[(i, ku + 1)] -= p * q;
                }
            }
        }
    }

    if norm == 0.0 {
        return true;
    }

    // Back substitution: eigenvectors of the quasi-triangular form.
    for nb in (0..nn).rev() {
        p = d[nb];
        q = e[nb];

        if q == 0.0 {
            // Real eigenvector.
            let mut l = nb;
            h[(nb, nb)] = 1.0;
            for i in (0..nb).rev() {
                w = h[(i, i)] - p;
                r = 0.0;
                for j in l..=nb {
                    r += h[(i, j)] * h[(j, nb)];
                }
                if e[i] < 0.0 {
                    z = w;
                    s = r;
                } else {
                    l = i;
                    if e[i] == 0.0 {
                        h[(i, nb)] = if w != 0.0 { -r / w } else { -r / (eps * norm) };
                    } else {
                        // Solve the 2x2 real block.
                        x = h[(i, i + 1)];
                        y = h[(i + 1, i)];
                        q = (d[i] - p) * (d[i] - p) + e[i] * e[i];
                        t = (x * s - z * r) / q;
                        h[(i, nb)] = t;
                        h[(i + 1, nb)] = if x.abs() > z.abs() {
                            (-r - w * t) / x
                        } else {
                            (-s - y * t) / z
                        };
                    }
                    // Overflow control.
                    t = h[(i, nb)].abs();
                    if (eps * t) * t > 1.0 {
                        for j in i..=nb {
                            h[(j, nb)] /= t;
                        }
                    }
                }
            }
        } else if q < 0.0 {
            // Complex eigenvector, stored as (real, imag) column pair.
            let mut l = nb - 1;

            if h[(nb, nb - 1)].abs() > h[(nb - 1, nb)].abs() {
                h[(nb - 1, nb - 1)] = q / h[(nb, nb - 1)];
                h[(nb - 1, nb)] = -(h[(nb, nb)] - p) / h[(nb, nb - 1)];
            } else {
                let (re, im) = cdiv(0.0, -h[(nb - 1, nb)], h[(nb - 1, nb - 1)] - p, q);
                h[(nb - 1, nb - 1)] = re;
                h[(nb - 1, nb)] = im;
            }
            h[(nb, nb - 1)] = 0.0;
            h[(nb, nb)] = 1.0;
            for i in (0..nb - 1).rev() {
                let mut ra = 0.0;
                let mut sa = 0.0;
                for j in l..=nb {
                    ra += h[(i, j)] * h[(j, nb - 1)];
                    sa += h[(i, j)] * h[(j, nb)];
                }
                w = h[(i, i)] - p;

                if e[i] < 0.0 {
                    z = w;
                    r = ra;
                    s = sa;
                } else {
                    l = i;
                    if e[i] == 0.0 {
                        let (re, im) = cdiv(-ra, -sa, w, q);
                        h[(i, nb - 1)] = re;
                        h[(i, nb)] = im;
                    } else {
                        // Solve the complex 2x2 block.
                        x = h[(i, i + 1)];
                        y = h[(i + 1, i)];
                        let mut vr = (d[i] - p) * (d[i] - p) + e[i] * e[i] - q * q;
                        let vi = (d[i] - p) * 2.0 * q;
                        if vr == 0.0 && vi == 0.0 {
                            vr = eps
                                * norm
                                * (w.abs() + q.abs() + x.abs() + y.abs() + z.abs());
                        }
                        let (re, im) =
                            cdiv(x * r - z * ra + q * sa, x * s - z * sa - q * ra, vr, vi);
                        h[(i, nb - 1)] = re;
                        h[(i, nb)] = im;
                        if x.abs() > z.abs() + q.abs() {
                            h[(i + 1, nb - 1)] =
                                (-ra - w * h[(i, nb - 1)] + q * h[(i, nb)]) / x;
                            h[(i + 1, nb)] = (-sa - w * h[(i, nb)] - q * h[(i, nb - 1)]) / x;
                        } else {
                            let (re, im) =
                                cdiv(-r - y * h[(i, nb - 1)], -s - y * h[(i, nb)], z, q);
                            h[(i + 1, nb - 1)] = re;
                            h[(i + 1, nb)] = im;
                        }
                    }
                    // Overflow control.
                    t = h[(i, nb - 1)].abs().max(h[(i, nb)].abs());
                    if (eps * t) * t > 1.0 {
                        for j in i..=nb {
                            h[(j, nb - 1)] /= t;
                            h[(j, nb)] /= t;
                        }
                    }
                }
            }
        }
    }

    // Back transformation to eigenvectors of the original matrix.
    for j in (0..nn).rev() {
        for i in 0..nn {
            z = 0.0;
            for k in 0..=j {
                z += v[(i, k)] * h[(k, j)];
            }
            v[(i, j)] = z;
        }
    }

    true
}

/// Complex scalar division (xr + i xi) / (yr + i yi) in a form that avoids
/// overflow.
fn cdiv(xr: f64, xi: f64, yr: f64, yi: f64) -> (f64, f64) {
    if yr.abs() > yi.abs() {
        let r = yi / yr;
        let den = yr + r * yi;
        ((xr + r * xi) / den, (xi - r * xr) / den)
    } else {
        let r = yr / yi;
        let den = yi + r * yr;
        ((r * xr + xi) / den, (r * xi - xr) / den)
    }
}

/// Expand the packed real representation into complex values and columns,
/// applying the l1 and phase normalization.
fn assemble_complex(v: &DMatrix<f64>, d: &[f64], e: &[f64]) -> EigenPairs {
    let n = d.len();
    let mut values = Vec::with_capacity(n);
    let mut vectors = DMatrix::from_element(n, n, Complex::new(0.0, 0.0));

    let mut j = 0;
    while j < n {
        if e[j] == 0.0 {
            values.push(Complex::new(d[j], 0.0));
            for i in 0..n {
                vectors[(i, j)] = Complex::new(v[(i, j)], 0.0);
            }
            j += 1;
        } else {
            // Conjugate pair: columns j (real part) and j+1 (imag part).
            values.push(Complex::new(d[j], e[j]));
            values.push(Complex::new(d[j + 1], e[j + 1]));
            for i in 0..n {
                vectors[(i, j)] = Complex::new(v[(i, j)], v[(i, j + 1)]);
                vectors[(i, j + 1)] = Complex::new(v[(i, j)], -v[(i, j + 1)]);
            }
            j += 2;
        }
    }

    for j in 0..n {
        normalize_column(&mut vectors, j);
    }
    EigenPairs { values, vectors }
}

/// Scale a column to unit l1 norm of moduli and rotate its phase so the
/// first nonnegligible entry is real positive.
fn normalize_column(vectors: &mut DMatrix<Complex<f64>>, j: usize) {
    let n = vectors.nrows();
    let l1: f64 = (0..n).map(|i| vectors[(i, j)].norm()).sum();
    if l1 > 0.0 {
        for i in 0..n {
            vectors[(i, j)] /= Complex::new(l1, 0.0);
        }
    }
    let maxmod = (0..n).map(|i| vectors[(i, j)].norm()).fold(0.0, f64::max);
    if maxmod == 0.0 {
        return;
    }
    for i in 0..n {
        let m = vectors[(i, j)].norm();
        if m > 1e-12 * maxmod {
            let phase = vectors[(i, j)] / Complex::new(m, 0.0);
            let rot = phase.conj();
            for k in 0..n {
                vectors[(k, j)] *= rot;
            }
            break;
        }
    }
}

fn sort_pairs(pairs: EigenPairs) -> EigenPairs {
    let n = pairs.values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let (va, vb) = (pairs.values[a], pairs.values[b]);
        va.re
            .partial_cmp(&vb.re)
            .unwrap()
            .then(va.im.partial_cmp(&vb.im).unwrap())
    });
    let values: Vec<_> = order.iter().map(|&i| pairs.values[i]).collect();
    let mut vectors = DMatrix::from_element(n, n, Complex::new(0.0, 0.0));
    for (newj, &oldj) in order.iter().enumerate() {
        for i in 0..n {
            vectors[(i, newj)] = pairs.vectors[(i, oldj)];
        }
    }
    EigenPairs { values, vectors }
}
