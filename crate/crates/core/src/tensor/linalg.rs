//! Small dense kernels shared by the tape and the flow layers.

use super::Tensor;
use crate::error::{Error, Result};
use rand::Rng;

/// `out += a[m,k] · b[k,n]`.
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a[m,n] · b[k,n]ᵀ`.
pub(crate) fn gemm_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let dot: f64 = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            out[i * k + p] += dot;
        }
    }
}

/// `out += a[m,k]ᵀ · b[m,n]`.
pub(crate) fn gemm_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub(crate) fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// LU factorization with partial pivoting of a square matrix.
struct Lu {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
    sign: f64,
}

fn lu(a: &Tensor) -> Result<Lu> {
    let (n, c) = a.dims2()?;
    if n != c {
        return Err(Error::Shape {
            op: "lu",
            lhs: a.shape().to_vec(),
            rhs: vec![],
        });
    }
    let mut lu = a.data().to_vec();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut sign = 1.0;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&x, &y| lu[x * n + col].abs().total_cmp(&lu[y * n + col].abs()))
            .unwrap_or(col);
        if pivot != col {
            for j in 0..n {
                lu.swap(col * n + j, pivot * n + j);
            }
            perm.swap(col, pivot);
            sign = -sign;
        }
        let d = lu[col * n + col];
        if d == 0.0 {
            continue;
        }
        for r in col + 1..n {
            let f = lu[r * n + col] / d;
            lu[r * n + col] = f;
            for j in col + 1..n {
                lu[r * n + j] -= f * lu[col * n + j];
            }
        }
    }
    Ok(Lu { n, lu, perm, sign })
}

pub fn det(a: &Tensor) -> Result<f64> {
    let f = lu(a)?;
    Ok(f.sign * (0..f.n).map(|i| f.lu[i * f.n + i]).product::<f64>())
}

/// `log|det a|`, failing when `|det a|` falls below `1e-12`.
pub fn log_abs_det(a: &Tensor) -> Result<f64> {
    let f = lu(a)?;
    let mut acc = 0.0;
    for i in 0..f.n {
        let d = f.lu[i * f.n + i].abs();
        if d == 0.0 {
            return Err(Error::Singular(0.0));
        }
        acc += d.ln();
    }
    if acc < 1e-12f64.ln() {
        return Err(Error::Singular(acc.exp()));
    }
    Ok(acc)
}

pub fn inverse(a: &Tensor) -> Result<Tensor> {
    log_abs_det(a)?;
    let f = lu(a)?;
    let n = f.n;
    let mut inv = vec![0.0; n * n];
    for col in 0..n {
        // Solve L U x = P e_col.
        let mut x: Vec<f64> = (0..n)
            .map(|i| if f.perm[i] == col { 1.0 } else { 0.0 })
            .collect();
        for i in 0..n {
            for j in 0..i {
                x[i] -= f.lu[i * n + j] * x[j];
            }
        }
        for i in (0..n).rev() {
            for j in i + 1..n {
                x[i] -= f.lu[i * n + j] * x[j];
            }
            x[i] /= f.lu[i * n + i];
        }
        for i in 0..n {
            inv[i * n + col] = x[i];
        }
    }
    Tensor::new(vec![n, n], inv)
}

/// Random orthogonal matrix from Gram–Schmidt on a Gaussian matrix.
pub fn random_rotation<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Tensor {
    loop {
        let g = Tensor::randn(&[n, n], 1.0, rng);
        let mut q: Vec<Vec<f64>> = Vec::with_capacity(n);
        let mut ok = true;
        for i in 0..n {
            let mut v = g.row(i).to_vec();
            for u in &q {
                let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                for (vi, ui) in v.iter_mut().zip(u) {
                    *vi -= d * ui;
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-6 {
                ok = false;
                break;
            }
            v.iter_mut().for_each(|x| *x /= norm);
            q.push(v);
        }
        if ok {
            return Tensor::from_rows(&q).expect("square rows");
        }
    }
}
