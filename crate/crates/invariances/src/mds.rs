//! Classical (Torgerson) multi-dimensional scaling.
//!
//! Given a symmetric distance matrix `D`, double-center the squared
//! distances, `B = −½ J D² J` with `J = I − (1/n)𝟙𝟙ᵀ`, extract the top
//! eigenpairs of `B` by power iteration with deflation, and place point `p`
//! at `(v₁[p]·√λ₁, v₂[p]·√λ₂, …)`. For distances that are realizable in the
//! requested dimension the embedding reproduces them up to rigid motion;
//! otherwise it is the best low-rank approximation classical MDS affords.

use crate::error::{Error, Result};
use crate::rng;

/// Power-iteration budget per eigenpair.
const POWER_ITERS: usize = 1000;
/// Convergence tolerance on the iterate change (and the eigenvalue cutoff
/// below which a coordinate column is zeroed).
const POWER_TOL: f64 = 1e-10;

/// A low-dimensional point configuration recovered from distances.
#[derive(Debug, Clone)]
pub struct MdsEmbedding {
    /// `n × out_dim` coordinates, row-major.
    pub coords: Vec<f64>,
    pub n: usize,
    pub out_dim: usize,
    /// Eigenvalues of the double-centered matrix, one per output dimension,
    /// in extraction order.
    pub eigenvalues: Vec<f64>,
    /// Largest absolute row sum of `B` (exact double-centering gives 0).
    pub centering_residual: f64,
}

impl MdsEmbedding {
    /// Coordinates of point `p`.
    pub fn point(&self, p: usize) -> &[f64] {
        &self.coords[p * self.out_dim..(p + 1) * self.out_dim]
    }

    /// Euclidean distance between embedded points.
    pub fn embedded_distance(&self, a: usize, b: usize) -> f64 {
        self.point(a)
            .iter()
            .zip(self.point(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    }
}

fn validate_distances(d: &[f64], n: usize) -> Result<()> {
    if n == 0 || d.len() != n * n {
        return Err(Error::invalid(
            "classical_mds",
            format!("expected {n}x{n} matrix, got {} entries", d.len()),
        ));
    }
    for i in 0..n {
        if d[i * n + i] != 0.0 {
            return Err(Error::invalid("classical_mds", "diagonal must be zero"));
        }
        for j in 0..n {
            let v = d[i * n + j];
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(
                    "classical_mds",
                    "distances must be finite and non-negative",
                ));
            }
            if v != d[j * n + i] {
                return Err(Error::invalid("classical_mds", "matrix must be symmetric"));
            }
        }
    }
    Ok(())
}

/// `B = −½ J D² J`, returned with its largest absolute row sum.
fn double_center(d: &[f64], n: usize) -> (Vec<f64>, f64) {
    let sq = |v: f64| v * v;
    let mut row_mean = vec![0.0; n];
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            row_mean[i] += sq(d[i * n + j]);
        }
        total += row_mean[i];
        row_mean[i] /= n as f64;
    }
    total /= (n * n) as f64;
    let mut b = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            b[i * n + j] = -0.5 * (sq(d[i * n + j]) - row_mean[i] - row_mean[j] + total);
        }
    }
    let residual = (0..n)
        .map(|i| (0..n).map(|j| b[i * n + j]).sum::<f64>().abs())
        .fold(0.0, f64::max);
    (b, residual)
}

/// Dominant eigenpair of symmetric `b` by power iteration. Returns
/// `(eigenvalue, eigenvector)`; a numerically zero matrix yields λ = 0.
fn power_iteration(b: &[f64], n: usize, rng: &mut impl rand::Rng) -> (f64, Vec<f64>) {
    let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let norm = |x: &[f64]| x.iter().map(|&e| e * e).sum::<f64>().sqrt();
    let nv = norm(&v);
    v.iter_mut().for_each(|e| *e /= nv);
    let mut bv = vec![0.0; n];
    for _ in 0..POWER_ITERS {
        for i in 0..n {
            bv[i] = (0..n).map(|j| b[i * n + j] * v[j]).sum();
        }
        let m = norm(&bv);
        if m < POWER_TOL {
            return (0.0, v);
        }
        // align sign so convergence of ±-alternating iterates (negative
        // eigenvalues) is detected
        let dot: f64 = bv.iter().zip(&v).map(|(a, c)| a * c).sum();
        let sign = if dot < 0.0 { -1.0 } else { 1.0 };
        let next: Vec<f64> = bv.iter().map(|&e| sign * e / m).collect();
        let delta = next
            .iter()
            .zip(&v)
            .map(|(a, c)| (a - c) * (a - c))
            .sum::<f64>()
            .sqrt();
        v = next;
        if delta < POWER_TOL {
            break;
        }
    }
    // Rayleigh quotient (v is unit)
    let mut lambda = 0.0;
    for i in 0..n {
        let bi: f64 = (0..n).map(|j| b[i * n + j] * v[j]).sum();
        lambda += v[i] * bi;
    }
    (lambda, v)
}

/// Classical MDS of a symmetric non-negative distance matrix (`d` is
/// `n × n` row-major) into `out_dim` coordinates. Deterministic: the power
/// iteration starts from a fixed internal stream.
pub fn classical_mds(d: &[f64], n: usize, out_dim: usize) -> Result<MdsEmbedding> {
    validate_distances(d, n)?;
    if out_dim == 0 {
        return Err(Error::invalid("classical_mds", "out_dim must be positive"));
    }
    let (mut b, centering_residual) = double_center(d, n);
    let mut rng = rng::stream(0, "mds-power");
    let mut coords = vec![0.0; n * out_dim];
    let mut eigenvalues = Vec::with_capacity(out_dim);
    for dim in 0..out_dim {
        let (lambda, v) = power_iteration(&b, n, &mut rng);
        eigenvalues.push(lambda);
        if lambda > POWER_TOL {
            let scale = lambda.sqrt();
            for p in 0..n {
                coords[p * out_dim + dim] = v[p] * scale;
            }
        }
        // deflate: B ← B − λ v vᵀ
        for i in 0..n {
            for j in 0..n {
                b[i * n + j] -= lambda * v[i] * v[j];
            }
        }
    }
    Ok(MdsEmbedding {
        coords,
        n,
        out_dim,
        eigenvalues,
        centering_residual,
    })
}

/// Kruskal stress-1 of an embedding against the input distances:
/// `√(Σ(d̂ᵢⱼ − dᵢⱼ)² / Σ dᵢⱼ²)`. Zero for a perfect reconstruction; an
/// all-zero input yields zero by convention.
pub fn stress(d: &[f64], embedding: &MdsEmbedding) -> f64 {
    let n = embedding.n;
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let dij = d[i * n + j];
            let eij = embedding.embedded_distance(i, j);
            num += (eij - dij) * (eij - dij);
            den += dij * dij;
        }
    }
    if den == 0.0 {
        if num == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (num / den).sqrt()
    }
}
