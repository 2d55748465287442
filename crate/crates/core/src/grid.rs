//! One-electron grid representation and dense symmetric eigensolvers.
//!
//! Wavefunctions are plain coefficient vectors normalized as `Σ ψ_i² = 1`;
//! no spacing weight enters any expectation value.

use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// Equidistant 1D grid centered on the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid1D {
    spacing: f64,
    points: Vec<f64>,
}

impl Grid1D {
    pub fn new(n_points: usize, spacing: f64) -> Result<Self> {
        if n_points < 3 {
            return Err(Error::invalid(format!("grid needs at least 3 points, got {n_points}")));
        }
        if !(spacing > 0.0) || !spacing.is_finite() {
            return Err(Error::invalid(format!("grid spacing must be positive, got {spacing}")));
        }
        let center = (n_points - 1) as f64 / 2.0;
        let points = (0..n_points).map(|i| (i as f64 - center) * spacing).collect();
        Ok(Self { spacing, points })
    }

    pub fn n_points(&self) -> usize {
        self.points.len()
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn extent(&self) -> (f64, f64) {
        (self.points[0], self.points[self.points.len() - 1])
    }

    /// Position operator r̂, diagonal in the grid basis.
    pub fn position_operator(&self) -> DenseOperator {
        DenseOperator::diagonal(&self.points)
    }
}

/// Shorthand for [`Grid1D::new`].
pub fn make_grid(n_points: usize, spacing: f64) -> Result<Grid1D> {
    Grid1D::new(n_points, spacing)
}

/// Real symmetric matrix in the grid basis, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseOperator {
    dim: usize,
    data: Vec<f64>,
}

impl DenseOperator {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            data: vec![0.0; dim * dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut op = Self::zeros(dim);
        for i in 0..dim {
            op.data[i * dim + i] = 1.0;
        }
        op
    }

    pub fn diagonal(values: &[f64]) -> Self {
        let mut op = Self::zeros(values.len());
        op.add_diagonal(values);
        op
    }

    pub fn from_fn(dim: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(dim * dim);
        for i in 0..dim {
            for j in 0..dim {
                data.push(f(i, j));
            }
        }
        Self { dim, data }
    }

    /// Builds an operator from row-major data, rejecting non-symmetric input.
    pub fn from_row_major(dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != dim * dim {
            return Err(Error::DimensionMismatch {
                expected: dim * dim,
                got: data.len(),
            });
        }
        let op = Self { dim, data };
        if !op.is_symmetric(1e-12) {
            return Err(Error::invalid("operator is not symmetric"));
        }
        Ok(op)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn diagonal_values(&self) -> Vec<f64> {
        (0..self.dim).map(|i| self.get(i, i)).collect()
    }

    pub fn add_diagonal(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.dim, "diagonal length must match operator");
        for (i, v) in values.iter().enumerate() {
            self.data[i * self.dim + i] += v;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Symmetry relative to the largest entry.
    pub fn is_symmetric(&self, rel_tol: f64) -> bool {
        let scale = self.max_abs().max(f64::MIN_POSITIVE);
        (0..self.dim).all(|i| (0..i).all(|j| (self.get(i, j) - self.get(j, i)).abs() <= rel_tol * scale))
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.data
            .chunks_exact(self.dim)
            .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// Normalized real coefficient vector.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveFunction1D {
    amplitudes: Vec<f64>,
}

impl WaveFunction1D {
    /// Normalizes `amplitudes`; fails on a zero or non-finite vector.
    pub fn new(mut amplitudes: Vec<f64>) -> Result<Self> {
        let norm = amplitudes.iter().map(|a| a * a).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::invalid("wavefunction has zero or non-finite norm"));
        }
        amplitudes.iter_mut().for_each(|a| *a /= norm);
        Ok(Self { amplitudes })
    }

    pub fn amplitudes(&self) -> &[f64] {
        &self.amplitudes
    }

    pub fn len(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.amplitudes.is_empty()
    }

    pub fn density(&self) -> impl Iterator<Item = f64> + '_ {
        self.amplitudes.iter().map(|a| a * a)
    }

    /// Σ_i |ψ_i|² f_i for a diagonal operator f.
    pub fn diagonal_expectation(&self, diag: &[f64]) -> f64 {
        self.density().zip(diag).map(|(p, f)| p * f).sum()
    }

    pub fn overlap(&self, other: &WaveFunction1D) -> f64 {
        self.amplitudes.iter().zip(&other.amplitudes).map(|(a, b)| a * b).sum()
    }
}

#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Vec<WaveFunction1D>,
}

/// Sinc-DVR (Colbert-Miller) kinetic energy matrix on an equidistant grid.
pub fn kinetic_operator(grid: &Grid1D, mass: f64) -> Result<DenseOperator> {
    if !(mass > 0.0) {
        return Err(Error::invalid(format!("mass must be positive, got {mass}")));
    }
    let scale = 1.0 / (mass * grid.spacing() * grid.spacing());
    Ok(DenseOperator::from_fn(grid.n_points(), |i, j| {
        if i == j {
            scale * PI * PI / 6.0
        } else {
            let d = i as f64 - j as f64;
            let sign = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
            sign * scale / (d * d)
        }
    }))
}

/// Full spectrum, ascending, with orthonormal eigenvectors.
pub fn diagonalize(op: &DenseOperator) -> Result<EigenDecomposition> {
    let n = op.dim();
    let m = DMatrix::from_row_slice(n, n, op.as_slice());
    let eig = SymmetricEigen::try_new(m, f64::EPSILON, 10_000)
        .ok_or_else(|| Error::NumericalFailure(format!("symmetric QR did not converge for {n}x{n} operator")))?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let eigenvalues = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let eigenvectors = order
        .iter()
        .map(|&k| WaveFunction1D::new(eig.eigenvectors.column(k).iter().copied().collect()))
        .collect::<Result<Vec<_>>>()?;
    Ok(EigenDecomposition {
        eigenvalues,
        eigenvectors,
    })
}

/// ψᵀ A ψ.
pub fn expectation(op: &DenseOperator, psi: &WaveFunction1D) -> Result<f64> {
    if psi.len() != op.dim() {
        return Err(Error::DimensionMismatch {
            expected: op.dim(),
            got: psi.len(),
        });
    }
    let a = psi.amplitudes();
    Ok(op.apply(a).iter().zip(a).map(|(x, y)| x * y).sum())
}

/// Lowest eigenpair of a dense symmetric operator.
///
/// Householder reduction to tridiagonal form, Sturm-sequence bisection for
/// the smallest eigenvalue and inverse iteration for its vector. Only the
/// ground state is needed in the SCF loop, and this is several times
/// cheaper than the full decomposition. The sign is fixed so that the
/// largest-magnitude amplitude is positive.
pub fn ground_state(op: &DenseOperator) -> Result<(f64, WaveFunction1D)> {
    let n = op.dim();
    if n == 0 {
        return Err(Error::invalid("empty operator"));
    }
    if n == 1 {
        return Ok((op.get(0, 0), WaveFunction1D::new(vec![1.0])?));
    }
    let mut a = op.as_slice().to_vec();
    let mut diag = vec![0.0; n];
    let mut off = vec![0.0; n - 1];
    let mut reflectors: Vec<(usize, Vec<f64>)> = Vec::with_capacity(n.saturating_sub(2));
    tridiagonalize(n, &mut a, &mut diag, &mut off, &mut reflectors);

    let (lo, hi) = lowest_eigenvalue_bracket(&diag, &off);
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::NumericalFailure("non-finite eigenvalue bracket".into()));
    }
    let mut y = tridiagonal_inverse_iteration(&diag, &off, 0.5 * (lo + hi))?;
    let lambda = tridiagonal_rayleigh(&diag, &off, &y);
    if !(lambda >= lo - (hi - lo) && lambda <= hi + (hi - lo)) {
        return Err(Error::NumericalFailure(format!(
            "inverse iteration left the ground-state bracket [{lo}, {hi}]: {lambda}"
        )));
    }
    for (k, v) in reflectors.iter().rev() {
        let dot: f64 = v.iter().zip(&y[*k..]).map(|(p, q)| p * q).sum();
        for (yi, vi) in y[*k..].iter_mut().zip(v) {
            *yi -= 2.0 * dot * vi;
        }
    }
    fix_sign(&mut y);
    Ok((lambda, WaveFunction1D::new(y)?))
}

/// Dot product with four independent accumulators so the loop vectorizes.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Lowest eigenpair, warm-started from a nearby vector.
///
/// The guess's Rayleigh quotient ρ is an upper bound on the ground-state
/// energy; a Cholesky factorization of `A − σI` with σ < ρ succeeds only when
/// σ lies below the whole spectrum, and inverse iteration with that shift
/// then converges to the ground state. The result is accepted once the
/// residual ‖Aψ − λψ‖ drops below `1e-11·max(1, ‖A‖_max)`; otherwise this
/// falls back to [`ground_state`].
pub fn ground_state_near(op: &DenseOperator, guess: &WaveFunction1D) -> Result<(f64, WaveFunction1D)> {
    let n = op.dim();
    if guess.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: guess.len(),
        });
    }
    let tol = 1e-11 * op.max_abs().max(1.0);
    let mut x = guess.amplitudes().to_vec();
    let rho = rayleigh(op, &x);
    let mut chol = vec![0.0; n * n];
    let mut ax = vec![0.0; n];
    for shift in [5e-4, 5e-3, 5e-2] {
        let sigma = rho - shift;
        if !cholesky_shifted(op, sigma, &mut chol) {
            continue;
        }
        for _ in 0..12 {
            cholesky_solve(n, &chol, &mut x);
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm > 0.0) || !norm.is_finite() {
                break;
            }
            x.iter_mut().for_each(|v| *v /= norm);
            matvec(op, &x, &mut ax);
            let lambda: f64 = ax.iter().zip(&x).map(|(a, b)| a * b).sum();
            let res = ax
                .iter()
                .zip(&x)
                .map(|(a, b)| (a - lambda * b) * (a - lambda * b))
                .sum::<f64>()
                .sqrt();
            if res <= tol {
                fix_sign(&mut x);
                return Ok((lambda, WaveFunction1D::new(x)?));
            }
        }
        x.copy_from_slice(guess.amplitudes());
    }
    ground_state(op)
}

fn rayleigh(op: &DenseOperator, x: &[f64]) -> f64 {
    op.as_slice()
        .chunks_exact(op.dim())
        .zip(x)
        .map(|(row, xi)| xi * dot(row, x))
        .sum()
}

fn matvec(op: &DenseOperator, x: &[f64], out: &mut [f64]) {
    for (o, row) in out.iter_mut().zip(op.as_slice().chunks_exact(op.dim())) {
        *o = dot(row, x);
    }
}

fn fix_sign(x: &mut [f64]) {
    let (imax, _) = x.iter().enumerate().fold(
        (0, 0.0_f64),
        |acc, (i, v)| if v.abs() > acc.1 { (i, v.abs()) } else { acc },
    );
    if x[imax] < 0.0 {
        x.iter_mut().for_each(|v| *v = -*v);
    }
}

/// Lower Cholesky factor of `A − σI` into `l` (row-major); false if the
/// shifted matrix is not positive definite.
fn cholesky_shifted(op: &DenseOperator, sigma: f64, l: &mut [f64]) -> bool {
    let n = op.dim();
    let a = op.as_slice();
    for i in 0..n {
        for j in 0..=i {
            let (ri, rj) = (&l[i * n..i * n + j], &l[j * n..j * n + j]);
            let d = dot(ri, rj);
            let mut s = a[i * n + j] - d;
            if i == j {
                s -= sigma;
                if !(s > 0.0) {
                    return false;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    true
}

/// Solves `L Lᵀ x = b` in place.
fn cholesky_solve(n: usize, l: &[f64], x: &mut [f64]) {
    for i in 0..n {
        let d = dot(&l[i * n..i * n + i], &x[..i]);
        x[i] = (x[i] - d) / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = x[i];
        for k in i + 1..n {
            s -= l[k * n + i] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
}

/// In-place Householder reduction. `a` is overwritten; each stored
/// reflector `(k, v)` acts on indices `k..n` as `I − 2 v vᵀ`.
fn tridiagonalize(n: usize, a: &mut [f64], diag: &mut [f64], off: &mut [f64], reflectors: &mut Vec<(usize, Vec<f64>)>) {
    let mut pbuf = vec![0.0; n];
    for k in 0..n - 2 {
        let start = k + 1;
        let m = n - start;
        let mut v: Vec<f64> = (start..n).map(|i| a[i * n + k]).collect();
        let xnorm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if xnorm == 0.0 {
            diag[k] = a[k * n + k];
            off[k] = 0.0;
            continue;
        }
        let alpha = if v[0] > 0.0 { -xnorm } else { xnorm };
        v[0] -= alpha;
        let vnorm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if vnorm == 0.0 {
            diag[k] = a[k * n + k];
            off[k] = alpha;
            continue;
        }
        v.iter_mut().for_each(|x| *x /= vnorm);

        // p = 2 A22 v, w = p − (vᵀp) v, A22 ← A22 − v wᵀ − w vᵀ
        let p = &mut pbuf[..m];
        for (i, pi) in p.iter_mut().enumerate() {
            let row = &a[(start + i) * n + start..(start + i + 1) * n];
            *pi = 2.0 * dot(row, &v);
        }
        let kdot: f64 = v.iter().zip(p.iter()).map(|(x, y)| x * y).sum();
        p.iter_mut().zip(&v).for_each(|(pi, vi)| *pi -= kdot * vi);
        for i in 0..m {
            let (vi, wi) = (v[i], p[i]);
            let row = &mut a[(start + i) * n + start..(start + i + 1) * n];
            for ((x, pj), vj) in row.iter_mut().zip(p.iter()).zip(&v) {
                *x -= vi * pj + wi * vj;
            }
        }
        diag[k] = a[k * n + k];
        off[k] = alpha;
        reflectors.push((start, v));
    }
    diag[n - 2] = a[(n - 2) * n + n - 2];
    diag[n - 1] = a[(n - 1) * n + n - 1];
    off[n - 2] = a[(n - 1) * n + n - 2];
}

/// Number of eigenvalues of the tridiagonal matrix strictly below `x`.
fn sturm_count(diag: &[f64], off: &[f64], x: f64) -> usize {
    let mut count = 0;
    let mut q = diag[0] - x;
    if q < 0.0 {
        count += 1;
    }
    for i in 1..diag.len() {
        let denom = if q == 0.0 {
            f64::EPSILON * (off[i - 1].abs() + 1.0)
        } else {
            q
        };
        q = diag[i] - x - off[i - 1] * off[i - 1] / denom;
        if q < 0.0 {
            count += 1;
        }
    }
    count
}

/// Bracket of width `~1e-7·scale` around the smallest eigenvalue.
fn lowest_eigenvalue_bracket(diag: &[f64], off: &[f64]) -> (f64, f64) {
    let n = diag.len();
    let radius = |i: usize| {
        let left = if i > 0 { off[i - 1].abs() } else { 0.0 };
        let right = if i + 1 < n { off[i].abs() } else { 0.0 };
        left + right
    };
    // Gershgorin lower bound; the smallest diagonal entry is a Rayleigh-quotient upper bound.
    let mut lo = (0..n).map(|i| diag[i] - radius(i)).fold(f64::INFINITY, f64::min);
    let mut hi = diag.iter().copied().fold(f64::INFINITY, f64::min);
    let scale = lo.abs().max(hi.abs()).max(f64::MIN_POSITIVE);
    lo -= f64::EPSILON * scale;
    hi += f64::EPSILON * scale;
    while hi - lo > 1e-7 * scale {
        let mid = 0.5 * (lo + hi);
        if sturm_count(diag, off, mid) >= 1 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    (lo, hi)
}

fn tridiagonal_rayleigh(diag: &[f64], off: &[f64], x: &[f64]) -> f64 {
    let mut s: f64 = diag.iter().zip(x).map(|(d, v)| d * v * v).sum();
    for i in 0..off.len() {
        s += 2.0 * off[i] * x[i] * x[i + 1];
    }
    s
}

/// Inverse iteration on `T − λ I` using Gaussian elimination
/// with partial pivoting (the shifted matrix is nearly singular by design).
fn tridiagonal_inverse_iteration(diag: &[f64], off: &[f64], lambda: f64) -> Result<Vec<f64>> {
    let n = diag.len();
    let scale = diag
        .iter()
        .chain(off)
        .fold(0.0_f64, |m, v| m.max(v.abs()))
        .max(f64::MIN_POSITIVE);
    let tiny = f64::EPSILON * scale;

    // LU of the tridiagonal matrix with row interchanges: rows carry up to
    // three nonzeros (main, first and second super-diagonal).
    let mut u0 = vec![0.0; n];
    let mut u1 = vec![0.0; n];
    let mut u2 = vec![0.0; n];
    let mut mult = vec![0.0; n];
    let mut swapped = vec![false; n];
    let mut cur = [diag[0] - lambda, if n > 1 { off[0] } else { 0.0 }, 0.0];
    for i in 0..n {
        if i + 1 == n {
            u0[i] = if cur[0].abs() < tiny { tiny } else { cur[0] };
            break;
        }
        let below = [off[i], diag[i + 1] - lambda, if i + 2 < n { off[i + 1] } else { 0.0 }];
        let (pivot, other, swap) = if below[0].abs() > cur[0].abs() {
            (below, cur, true)
        } else {
            (cur, below, false)
        };
        let p0 = if pivot[0].abs() < tiny { tiny } else { pivot[0] };
        let l = other[0] / p0;
        u0[i] = p0;
        u1[i] = pivot[1];
        u2[i] = pivot[2];
        mult[i] = l;
        swapped[i] = swap;
        cur = [other[1] - l * pivot[1], other[2] - l * pivot[2], 0.0];
    }

    let mut x = vec![1.0; n];
    for _ in 0..2 {
        // forward elimination on the right-hand side
        let mut b = x.clone();
        for i in 0..n - 1 {
            if swapped[i] {
                b.swap(i, i + 1);
            }
            b[i + 1] -= mult[i] * b[i];
        }
        // back substitution
        for i in (0..n).rev() {
            let mut s = b[i];
            if i + 1 < n {
                s -= u1[i] * b[i + 1];
            }
            if i + 2 < n {
                s -= u2[i] * b[i + 2];
            }
            b[i] = s / u0[i];
        }
        let norm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::NumericalFailure("inverse iteration broke down".into()));
        }
        x = b.into_iter().map(|v| v / norm).collect();
    }
    Ok(x)
}
