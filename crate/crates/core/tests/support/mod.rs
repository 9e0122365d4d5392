//! Test-side oracles. Deliberately naive: row-vector storage, Gaussian
//! elimination, no nalgebra decompositions, so they share no code path with
//! the library.

#![allow(dead_code)]

use orthokit::{Matrix, Vector};

pub type Dense = Vec<Vec<f64>>;

pub fn to_dense(m: &Matrix) -> Dense {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
}

pub fn transpose(a: &Dense) -> Dense {
    let cols = a.first().map_or(0, Vec::len);
    (0..cols).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn matmul(a: &Dense, b: &Dense) -> Dense {
    let inner = b.len();
    let cols = b.first().map_or(0, Vec::len);
    a.iter()
        .map(|r| (0..cols).map(|j| (0..inner).map(|k| r[k] * b[k][j]).sum()).collect())
        .collect()
}

pub fn matvec(a: &Dense, v: &[f64]) -> Vec<f64> {
    a.iter().map(|r| r.iter().zip(v).map(|(x, y)| x * y).sum()).collect()
}

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
pub fn solve(a: &Dense, b: &[f64]) -> Vec<f64> {
    let n = a.len();
    let mut m: Dense = a.iter().zip(b).map(|(r, &bi)| {
        let mut row = r.clone();
        row.push(bi);
        row
    }).collect();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
            .unwrap();
        m.swap(col, piv);
        assert!(m[col][col].abs() > 1e-300, "singular system in oracle");
        for i in col + 1..n {
            let f = m[i][col] / m[col][col];
            for j in col..=n {
                m[i][j] -= f * m[col][j];
            }
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|j| m[i][j] * x[j]).sum();
        x[i] = (m[i][n] - s) / m[i][i];
    }
    x
}

/// Inverse by solving against each unit vector.
pub fn inverse(a: &Dense) -> Dense {
    let n = a.len();
    let cols: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let e: Vec<f64> = (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect();
            solve(a, &e)
        })
        .collect();
    transpose(&cols)
}

/// `I - X (XᵀX)⁻¹ Xᵀ` as an explicit n x n matrix.
pub fn complement_projector(x: &Dense) -> Dense {
    let xt = transpose(x);
    let hat = matmul(&matmul(x, &inverse(&matmul(&xt, x))), &xt);
    let n = x.len();
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 } - hat[i][j]).collect())
        .collect()
}

/// `A ⊗ B`.
pub fn kron(a: &Dense, b: &Dense) -> Dense {
    let (ar, ac) = (a.len(), a[0].len());
    let (br, bc) = (b.len(), b[0].len());
    let mut out = vec![vec![0.0; ac * bc]; ar * br];
    for i in 0..ar {
        for j in 0..ac {
            for k in 0..br {
                for l in 0..bc {
                    out[i * br + k][j * bc + l] = a[i][j] * b[k][l];
                }
            }
        }
    }
    out
}

pub fn identity(n: usize) -> Dense {
    (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect()
}

/// Canonical-link GLM pieces written out per family.
#[derive(Clone, Copy, Debug)]
pub enum Fam {
    Gaussian,
    Bernoulli,
    Poisson,
}

impl Fam {
    pub fn mean(self, eta: f64) -> f64 {
        match self {
            Fam::Gaussian => eta,
            Fam::Bernoulli => 1.0 / (1.0 + (-eta).exp()),
            Fam::Poisson => eta.exp(),
        }
    }

    /// `dμ/dη`, which equals the Fisher weight for a canonical link.
    pub fn slope(self, eta: f64) -> f64 {
        match self {
            Fam::Gaussian => 1.0,
            Fam::Bernoulli => {
                let m = self.mean(eta);
                m * (1.0 - m)
            }
            Fam::Poisson => eta.exp(),
        }
    }

    pub fn nll(self, y: f64, eta: f64) -> f64 {
        match self {
            Fam::Gaussian => 0.5 * (y - eta) * (y - eta),
            Fam::Bernoulli => (1.0 + eta.exp()).ln() - y * eta,
            Fam::Poisson => eta.exp() - y * eta,
        }
    }

    pub fn link(self, mu: f64) -> f64 {
        match self {
            Fam::Gaussian => mu,
            Fam::Bernoulli => (mu / (1.0 - mu)).ln(),
            Fam::Poisson => mu.ln(),
        }
    }
}

pub fn total_nll(fam: Fam, d: &Dense, y: &[f64], beta: &[f64]) -> f64 {
    matvec(d, beta).iter().zip(y).map(|(&e, &yi)| fam.nll(yi, e)).sum()
}

/// Full Newton on the summed negative log-likelihood with backtracking,
/// iterated until the score is at rounding level.
pub fn newton_glm(fam: Fam, d: &Dense, y: &[f64]) -> Vec<f64> {
    let k = d[0].len();
    let mut beta = vec![0.0; k];
    for _ in 0..200 {
        let eta = matvec(d, &beta);
        let mut grad = vec![0.0; k];
        let mut hess = vec![vec![0.0; k]; k];
        for (i, row) in d.iter().enumerate() {
            let r = fam.mean(eta[i]) - y[i];
            let w = fam.slope(eta[i]);
            for a in 0..k {
                grad[a] += row[a] * r;
                for b in 0..k {
                    hess[a][b] += w * row[a] * row[b];
                }
            }
        }
        if grad.iter().all(|g| g.abs() < 1e-11) {
            break;
        }
        let step = solve(&hess, &grad);
        let base = total_nll(fam, d, y, &beta);
        let mut t = 1.0;
        loop {
            let cand: Vec<f64> = beta.iter().zip(&step).map(|(b, s)| b - t * s).collect();
            if total_nll(fam, d, y, &cand) <= base + 1e-12 * base.abs() || t < 1e-10 {
                beta = cand;
                break;
            }
            t *= 0.5;
        }
    }
    beta
}

pub fn vec_of(v: &Vector) -> Vec<f64> {
    v.iter().copied().collect()
}
