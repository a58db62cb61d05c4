//! Small dense kernels on row-major slices.
//!
//! These run once per ensemble point inside the solver sweeps, so they work
//! in place on caller buffers instead of allocating matrix objects.

use crate::error::{Error, Result};

/// Solve `a x = b` for `nrhs` right-hand sides stored row-major in `b` (n x nrhs).
/// `a` is overwritten by its LU factors.
pub fn solve_in_place(n: usize, a: &mut [f64], b: &mut [f64], nrhs: usize) -> Result<()> {
    for col in 0..n {
        let mut piv = col;
        let mut best = a[col * n + col].abs();
        for r in col + 1..n {
            let v = a[r * n + col].abs();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if best < 1e-300 {
            return Err(Error::Singular("dense solve"));
        }
        if piv != col {
            for j in 0..n {
                a.swap(col * n + j, piv * n + j);
            }
            for j in 0..nrhs {
                b.swap(col * nrhs + j, piv * nrhs + j);
            }
        }
        let d = a[col * n + col];
        for r in col + 1..n {
            let f = a[r * n + col] / d;
            if f == 0.0 {
                continue;
            }
            for j in col..n {
                a[r * n + j] -= f * a[col * n + j];
            }
            for j in 0..nrhs {
                b[r * nrhs + j] -= f * b[col * nrhs + j];
            }
        }
    }
    for col in (0..n).rev() {
        let d = a[col * n + col];
        for j in 0..nrhs {
            let mut s = b[col * nrhs + j];
            for c in col + 1..n {
                s -= a[col * n + c] * b[c * nrhs + j];
            }
            b[col * nrhs + j] = s / d;
        }
    }
    Ok(())
}

pub fn inverse(n: usize, a: &[f64]) -> Result<Vec<f64>> {
    let mut lu = a.to_vec();
    let mut id = identity(n);
    solve_in_place(n, &mut lu, &mut id, n)?;
    Ok(id)
}

pub fn identity(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
    }
    m
}

/// `out = a b` with a: r x m, b: m x c.
pub fn matmul(r: usize, m: usize, c: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    for i in 0..r {
        for j in 0..c {
            let mut s = 0.0;
            for l in 0..m {
                s += a[i * m + l] * b[l * c + j];
            }
            out[i * c + j] = s;
        }
    }
}

/// `out = a x` for square a.
pub fn matvec(n: usize, a: &[f64], x: &[f64], out: &mut [f64]) {
    for i in 0..n {
        let row = &a[i * n..(i + 1) * n];
        out[i] = row.iter().zip(x).map(|(p, q)| p * q).sum();
    }
}

/// `out += a x` for square a.
pub fn matvec_add(n: usize, a: &[f64], x: &[f64], out: &mut [f64]) {
    for i in 0..n {
        let row = &a[i * n..(i + 1) * n];
        out[i] += row.iter().zip(x).map(|(p, q)| p * q).sum::<f64>();
    }
}

/// `out += a^T x` for square a.
pub fn matvec_t_add(n: usize, a: &[f64], x: &[f64], out: &mut [f64]) {
    for j in 0..n {
        let mut s = 0.0;
        for i in 0..n {
            s += a[i * n + j] * x[i];
        }
        out[j] += s;
    }
}

pub fn transpose(n: usize, a: &[f64]) -> Vec<f64> {
    let mut t = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            t[j * n + i] = a[i * n + j];
        }
    }
    t
}

/// Spectral norm by power iteration on `a^T a`.
pub fn operator_norm(n: usize, a: &[f64]) -> f64 {
    let ata = {
        let t = transpose(n, a);
        let mut out = vec![0.0; n * n];
        matmul(n, n, n, &t, a, &mut out);
        out
    };
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut w = vec![0.0; n];
    let mut lam = 0.0;
    for _ in 0..200 {
        matvec(n, &ata, &v, &mut w);
        let nw = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nw == 0.0 {
            return 0.0;
        }
        v.iter_mut().zip(&w).for_each(|(vi, wi)| *vi = wi / nw);
        if (nw - lam).abs() <= 1e-14 * nw {
            lam = nw;
            break;
        }
        lam = nw;
    }
    lam.sqrt()
}

/// Smallest eigenvalue of the symmetric part by Jacobi rotations.
pub fn min_sym_eigenvalue(n: usize, a: &[f64]) -> f64 {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            m[i * n + j] = 0.5 * (a[i * n + j] + a[j * n + i]);
        }
    }
    for _ in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += m[i * n + j].powi(2);
            }
        }
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = m[k * n + p];
                    let akq = m[k * n + q];
                    m[k * n + p] = c * akp - s * akq;
                    m[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m[p * n + k];
                    let aqk = m[q * n + k];
                    m[p * n + k] = c * apk - s * aqk;
                    m[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| m[i * n + i]).fold(f64::INFINITY, f64::min)
}

/// In-place Cholesky factor (lower) of an SPD matrix.
pub fn cholesky(n: usize, a: &mut [f64]) -> Result<()> {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if d <= 0.0 {
            return Err(Error::Singular("cholesky"));
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
        for k in j + 1..n {
            a[j * n + k] = 0.0;
        }
    }
    Ok(())
}

/// Solve `L L^T x = b` for `nrhs` columns stored row-major in `b`.
pub fn cholesky_solve(n: usize, l: &[f64], b: &mut [f64], nrhs: usize) {
    for c in 0..nrhs {
        for i in 0..n {
            let mut s = b[i * nrhs + c];
            for k in 0..i {
                s -= l[i * n + k] * b[k * nrhs + c];
            }
            b[i * nrhs + c] = s / l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = b[i * nrhs + c];
            for k in i + 1..n {
                s -= l[k * n + i] * b[k * nrhs + c];
            }
            b[i * nrhs + c] = s / l[i * n + i];
        }
    }
}
