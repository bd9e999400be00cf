use super::tensor::Tensor;
use super::{invalid, NumError, Result};

/// Solves `a . x = b` for symmetric positive definite `a` via Cholesky.
/// The result satisfies `|a.x - b|_inf < 1e-8 * |b|_inf`.
pub fn solve_spd(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, n2) = a.dims2()?;
    if n != n2 {
        return Err(NumError::ShapeMismatch {
            op: "solve_spd",
            detail: format!("matrix must be square, got {:?}", a.shape()),
        });
    }
    let (nb, m) = b.dims2()?;
    if nb != n {
        return Err(NumError::ShapeMismatch {
            op: "solve_spd",
            detail: format!("rhs rows {nb} vs matrix order {n}"),
        });
    }
    let scale = a.data().iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    for i in 0..n {
        for j in (i + 1)..n {
            if (a.at2(i, j) - a.at2(j, i)).abs() > 1e-9 * scale.max(1.0) {
                return invalid(format!("solve_spd: matrix not symmetric at ({i},{j})"));
            }
        }
    }
    let l = cholesky(a)?;

    // forward substitution L z = b, then back substitution L^T x = z
    let mut x = b.data().to_vec();
    for i in 0..n {
        for k in 0..i {
            let lik = l.at2(i, k);
            if lik == 0.0 {
                continue;
            }
            for j in 0..m {
                x[i * m + j] -= lik * x[k * m + j];
            }
        }
        let d = l.at2(i, i);
        for j in 0..m {
            x[i * m + j] /= d;
        }
    }
    for i in (0..n).rev() {
        for k in (i + 1)..n {
            let lki = l.at2(k, i);
            if lki == 0.0 {
                continue;
            }
            for j in 0..m {
                x[i * m + j] -= lki * x[k * m + j];
            }
        }
        let d = l.at2(i, i);
        for j in 0..m {
            x[i * m + j] /= d;
        }
    }
    let x = Tensor::new(vec![n, m], x)?;

    let b_inf = b.data().iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let mut r_inf = 0.0f64;
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for k in 0..n {
                s += a.at2(i, k) * x.at2(k, j);
            }
            r_inf = r_inf.max((s - b.at2(i, j)).abs());
        }
    }
    if r_inf >= 1e-8 * b_inf.max(f64::MIN_POSITIVE) {
        return invalid(format!(
            "solve_spd: residual {r_inf:.3e} exceeds 1e-8 * |b|_inf = {:.3e}",
            1e-8 * b_inf
        ));
    }
    Ok(x)
}

/// Lower-triangular Cholesky factor; fails with the offending pivot index
/// when the matrix is not positive definite.
pub fn cholesky(a: &Tensor) -> Result<Tensor> {
    let (n, _) = a.dims2()?;
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a.at2(i, j);
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return Err(NumError::NotPositiveDefinite { pivot: i });
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Tensor::new(vec![n, n], l)
}

/// Output of [`pca_reduce`]: orthonormal projection columns ordered by
/// decreasing explained variance.
#[derive(Debug, Clone)]
pub struct PcaResult {
    pub projection: Tensor,
    pub reduced: Tensor,
    pub explained_variance: Vec<f64>,
    pub column_means: Vec<f64>,
}

/// Principal component analysis of `x[n x p]` down to `k` dimensions.
/// Columns are centered internally; the projection applies to centered data.
pub fn pca_reduce(x: &Tensor, k: usize) -> Result<PcaResult> {
    let (n, p) = x.dims2()?;
    if k == 0 || k > n.min(p) {
        return invalid(format!("pca_reduce: k={k} invalid for {n}x{p} input"));
    }
    let mut means = vec![0.0; p];
    for i in 0..n {
        for j in 0..p {
            means[j] += x.at2(i, j);
        }
    }
    for m in means.iter_mut() {
        *m /= n as f64;
    }
    let mut centered = vec![0.0; n * p];
    for i in 0..n {
        for j in 0..p {
            centered[i * p + j] = x.at2(i, j) - means[j];
        }
    }
    if centered.iter().all(|&v| v.abs() < 1e-300) {
        return invalid("pca_reduce: degenerate all-constant input");
    }
    // sample covariance (n-1 in the denominator)
    let denom = (n.max(2) - 1) as f64;
    let mut cov = vec![0.0; p * p];
    for r in 0..n {
        for i in 0..p {
            let v = centered[r * p + i];
            if v == 0.0 {
                continue;
            }
            for j in i..p {
                cov[i * p + j] += v * centered[r * p + j];
            }
        }
    }
    for i in 0..p {
        for j in i..p {
            cov[i * p + j] /= denom;
            cov[j * p + i] = cov[i * p + j];
        }
    }

    let (mut eigvals, mut eigvecs) = jacobi_eigen(&cov, p);
    // sort descending by eigenvalue, stable on index
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eigvals[b].partial_cmp(&eigvals[a]).unwrap().then(a.cmp(&b)));
    eigvals = order.iter().map(|&i| eigvals[i]).collect();
    eigvecs = {
        let mut sorted = vec![0.0; p * p];
        for (newc, &oldc) in order.iter().enumerate() {
            for r in 0..p {
                sorted[r * p + newc] = eigvecs[r * p + oldc];
            }
        }
        sorted
    };

    let mut projection = vec![0.0; p * k];
    for c in 0..k {
        // canonical sign: the entry with the largest magnitude is positive
        let mut best = 0;
        for r in 1..p {
            if eigvecs[r * p + c].abs() > eigvecs[best * p + c].abs() {
                best = r;
            }
        }
        let flip = if eigvecs[best * p + c] < 0.0 { -1.0 } else { 1.0 };
        for r in 0..p {
            projection[r * k + c] = flip * eigvecs[r * p + c];
        }
    }
    let projection = Tensor::new(vec![p, k], projection)?;

    let mut reduced = vec![0.0; n * k];
    for i in 0..n {
        for c in 0..k {
            let mut s = 0.0;
            for j in 0..p {
                s += centered[i * p + j] * projection.at2(j, c);
            }
            reduced[i * k + c] = s;
        }
    }
    Ok(PcaResult {
        projection,
        reduced: Tensor::new(vec![n, k], reduced)?,
        explained_variance: eigvals[..k].to_vec(),
        column_means: means,
    })
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
/// Returns (eigenvalues, eigenvectors-as-columns), unsorted.
fn jacobi_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[i * n + j] * m[i * n + j];
            }
        }
        if off.sqrt() < 1e-14 * (1.0 + frobenius(&m, n)) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eig = (0..n).map(|i| m[i * n + i]).collect();
    (eig, v)
}

fn frobenius(m: &[f64], n: usize) -> f64 {
    m.iter().take(n * n).map(|v| v * v).sum::<f64>().sqrt()
}

/// Per-column Pearson correlation between two `n x v` matrices.
/// Zero-variance columns on either side map to 0.
pub fn pearson_columns(a: &Tensor, b: &Tensor) -> Result<Vec<f64>> {
    let (n, v) = a.dims2()?;
    if b.shape() != a.shape() {
        return Err(NumError::ShapeMismatch {
            op: "pearson_columns",
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    if n < 2 {
        return invalid("pearson_columns: need at least 2 rows");
    }
    let mut out = vec![0.0; v];
    for j in 0..v {
        let mut ma = 0.0;
        let mut mb = 0.0;
        for i in 0..n {
            ma += a.at2(i, j);
            mb += b.at2(i, j);
        }
        ma /= n as f64;
        mb /= n as f64;
        let mut cov = 0.0;
        let mut va = 0.0;
        let mut vb = 0.0;
        for i in 0..n {
            let da = a.at2(i, j) - ma;
            let db = b.at2(i, j) - mb;
            cov += da * db;
            va += da * da;
            vb += db * db;
        }
        out[j] = if va <= 0.0 || vb <= 0.0 {
            0.0
        } else {
            (cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0)
        };
    }
    Ok(out)
}
