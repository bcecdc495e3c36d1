//! Small dense linear algebra and a bounded Levenberg-Marquardt solver.
//!
//! Problem sizes here are tiny (at most a handful of parameters, a few
//! thousand residuals), so everything is plain row-major `Vec` storage.

use std::ops::{Index, IndexMut};

use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols;
        &mut self.data[i * c..(i + 1) * c]
    }

    /// `J^T J` for `self = J`.
    pub fn gram(&self) -> Matrix<T> {
        let n = self.cols;
        let mut g = Matrix::zeros(n, n);
        for r in 0..self.rows {
            let row = self.row(r);
            for i in 0..n {
                let ri = row[i];
                if ri == T::zero() {
                    continue;
                }
                for j in i..n {
                    g[(i, j)] = g[(i, j)] + ri * row[j];
                }
            }
        }
        for i in 0..n {
            for j in 0..i {
                g[(i, j)] = g[(j, i)];
            }
        }
        g
    }

    /// `J^T v`.
    pub fn t_mul_vec(&self, v: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.cols];
        for (r, &vr) in v.iter().enumerate().take(self.rows) {
            let row = self.row(r);
            for (o, &a) in out.iter_mut().zip(row) {
                *o = *o + a * vr;
            }
        }
        out
    }

    pub fn mul_vec(&self, v: &[T]) -> Vec<T> {
        (0..self.rows)
            .map(|r| self.row(r).iter().zip(v).map(|(&a, &b)| a * b).sum())
            .collect()
    }

    /// Quadratic form `v^T M v`.
    pub fn quad_form(&self, v: &[T]) -> T {
        self.mul_vec(v).iter().zip(v).map(|(&a, &b)| a * b).sum()
    }
}

impl<T> Index<(usize, usize)> for Matrix<T> {
    type Output = T;
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for Matrix<T> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

/// Cholesky factor `L` of a symmetric positive definite matrix.
pub fn cholesky<T: Real>(a: &Matrix<T>) -> Option<Matrix<T>> {
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[(i, j)];
            for k in 0..j {
                s = s - l[(i, k)] * l[(j, k)];
            }
            if i == j {
                if !(s > T::zero()) || !s.is_finite() {
                    return None;
                }
                l[(i, i)] = s.sqrt();
            } else {
                l[(i, j)] = s / l[(j, j)];
            }
        }
    }
    Some(l)
}

pub fn cholesky_solve<T: Real>(a: &Matrix<T>, b: &[T]) -> Option<Vec<T>> {
    cholesky(a).map(|l| solve_factored(&l, b))
}

fn solve_factored<T: Real>(l: &Matrix<T>, b: &[T]) -> Vec<T> {
    let n = b.len();
    let mut y = vec![T::zero(); n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s = s - l[(i, k)] * y[k];
        }
        y[i] = s / l[(i, i)];
    }
    let mut x = vec![T::zero(); n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s = s - l[(k, i)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
    x
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues and the matrix whose columns are the eigenvectors.
pub fn sym_eigen<T: Real>(a: &Matrix<T>) -> (Vec<T>, Matrix<T>) {
    let n = a.rows();
    let mut m = a.clone();
    let mut v = Matrix::identity(n);
    for _sweep in 0..100 {
        let off: T = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)] * m[(i, j)])
            .sum();
        let diag: T = (0..n).map(|i| m[(i, i)] * m[(i, i)]).sum();
        if off <= T::epsilon() * T::epsilon() * diag || off == T::zero() {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq == T::zero() {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (T::lit(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| m[(i, i)]).collect(), v)
}

/// Inverse of a symmetric positive semidefinite matrix.
///
/// The matrix is first scaled to unit diagonal. Cholesky is tried first;
/// on failure the Moore-Penrose pseudo-inverse drops eigen-directions below
/// `rcond` times the largest eigenvalue.
pub fn sym_inverse<T: Real>(a: &Matrix<T>, rcond: T) -> Matrix<T> {
    let n = a.rows();
    let scale: Vec<T> = (0..n)
        .map(|i| {
            let d = a[(i, i)];
            if d > T::zero() {
                T::one() / d.sqrt()
            } else {
                T::zero()
            }
        })
        .collect();
    let mut s = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            s[(i, j)] = a[(i, j)] * scale[i] * scale[j];
        }
    }
    let mut inv = Matrix::zeros(n, n);
    let mut done = false;
    if scale.iter().all(|&x| x > T::zero()) {
        let well_conditioned = |l: &Matrix<T>| (0..n).all(|i| l[(i, i)] * l[(i, i)] > rcond);
        if let Some(l) = cholesky(&s).filter(well_conditioned) {
            for j in 0..n {
                let mut e = vec![T::zero(); n];
                e[j] = T::one();
                let col = solve_factored(&l, &e);
                for i in 0..n {
                    inv[(i, j)] = col[i];
                }
            }
            done = true;
        }
    }
    if !done {
        let (vals, vecs) = sym_eigen(&s);
        let vmax = vals.iter().fold(T::zero(), |m, &v| m.max(v.abs()));
        inv = Matrix::zeros(n, n);
        for (k, &lam) in vals.iter().enumerate() {
            if lam > rcond * vmax && lam > T::zero() {
                for i in 0..n {
                    for j in 0..n {
                        inv[(i, j)] = inv[(i, j)] + vecs[(i, k)] * vecs[(j, k)] / lam;
                    }
                }
            }
        }
    }
    for i in 0..n {
        for j in 0..n {
            inv[(i, j)] = inv[(i, j)] * scale[i] * scale[j];
        }
    }
    inv
}

/// Nonlinear least-squares problem `min sum r_i(p)^2`.
pub trait LeastSquares<T: Real> {
    fn n_params(&self) -> usize;
    fn n_residuals(&self) -> usize;
    fn residuals(&self, p: &[T], out: &mut [T]);

    /// Jacobian `d r_i / d p_j`. Forward differences unless overridden.
    fn jacobian(&self, p: &[T], jac: &mut Matrix<T>) {
        let m = self.n_residuals();
        let mut r0 = vec![T::zero(); m];
        let mut r1 = vec![T::zero(); m];
        self.residuals(p, &mut r0);
        let mut x = p.to_vec();
        for j in 0..p.len() {
            let h = T::epsilon().sqrt() * p[j].abs().max(T::one());
            x[j] = p[j] + h;
            self.residuals(&x, &mut r1);
            x[j] = p[j];
            for i in 0..m {
                jac[(i, j)] = (r1[i] - r0[i]) / h;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct LmOptions<T> {
    pub max_iter: usize,
    /// Relative cost reduction below which an accepted step ends the search.
    pub ftol: T,
    /// Relative step size below which the search ends.
    pub xtol: T,
    /// Cosine between residual and Jacobian columns below which the search ends.
    pub gtol: T,
    /// Cost (sum of squares) at or below which the search ends.
    pub abs_cost: T,
    pub lower: Option<Vec<T>>,
    pub upper: Option<Vec<T>>,
}

impl<T: Real> Default for LmOptions<T> {
    fn default() -> Self {
        Self {
            max_iter: 200,
            ftol: T::epsilon() * T::lit(4.0),
            xtol: T::epsilon() * T::lit(4.0),
            gtol: T::epsilon() * T::lit(4.0),
            abs_cost: T::zero(),
            lower: None,
            upper: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    CostReduction,
    StepSize,
    Gradient,
    AbsoluteCost,
    /// Damping grew without finding a better point.
    Stalled,
    MaxIterations,
    NonFinite,
}

#[derive(Debug, Clone)]
pub struct LmReport<T> {
    pub params: Vec<T>,
    pub residuals: Vec<T>,
    pub jacobian: Matrix<T>,
    /// Sum of squared residuals.
    pub cost: T,
    pub iterations: usize,
    pub termination: Termination,
}

impl<T: Real> LmReport<T> {
    pub fn converged(&self) -> bool {
        !matches!(
            self.termination,
            Termination::MaxIterations | Termination::NonFinite
        )
    }

    /// `s^2 (J^T J)^{-1}` with `s^2 = cost / (m - n)`.
    pub fn covariance(&self) -> Matrix<T> {
        let m = self.residuals.len();
        let n = self.params.len();
        let dof = if m > n { m - n } else { 1 };
        let s2 = self.cost / T::from_usize_lossy(dof);
        let mut c = sym_inverse(&self.jacobian.gram(), T::lit(1e-13));
        for i in 0..n {
            for j in 0..n {
                c[(i, j)] = c[(i, j)] * s2;
            }
        }
        c
    }
}

fn project<T: Real>(x: &mut [T], opts: &LmOptions<T>) {
    if let Some(lo) = &opts.lower {
        for (v, &l) in x.iter_mut().zip(lo) {
            if *v < l {
                *v = l;
            }
        }
    }
    if let Some(hi) = &opts.upper {
        for (v, &h) in x.iter_mut().zip(hi) {
            if *v > h {
                *v = h;
            }
        }
    }
}

/// Parameters sitting on a bound whose descent direction points outward.
fn active_bounds<T: Real>(x: &[T], g: &[T], opts: &LmOptions<T>) -> Vec<bool> {
    (0..x.len())
        .map(|j| {
            let at_lo = opts.lower.as_ref().is_some_and(|lo| x[j] <= lo[j]);
            let at_hi = opts.upper.as_ref().is_some_and(|hi| x[j] >= hi[j]);
            (at_lo && g[j] > T::zero()) || (at_hi && g[j] < T::zero())
        })
        .collect()
}

fn sum_sq<T: Real>(r: &[T]) -> T {
    r.iter().map(|&v| v * v).sum()
}

pub fn levenberg_marquardt<T: Real, P: LeastSquares<T> + ?Sized>(
    problem: &P,
    x0: &[T],
    opts: &LmOptions<T>,
) -> LmReport<T> {
    let n = problem.n_params();
    let m = problem.n_residuals();
    let mut x = x0.to_vec();
    project(&mut x, opts);
    let mut r = vec![T::zero(); m];
    problem.residuals(&x, &mut r);
    let mut cost = sum_sq(&r);
    let mut jac = Matrix::zeros(m, n);
    problem.jacobian(&x, &mut jac);

    let report = |x: Vec<T>, r: Vec<T>, jac: Matrix<T>, cost, it, term| LmReport {
        params: x,
        residuals: r,
        jacobian: jac,
        cost,
        iterations: it,
        termination: term,
    };

    if !cost.is_finite() {
        return report(x, r, jac, cost, 0, Termination::NonFinite);
    }
    if cost <= opts.abs_cost {
        return report(x, r, jac, cost, 0, Termination::AbsoluteCost);
    }

    let mut lambda = T::lit(1e-3);
    let mut r_new = vec![T::zero(); m];
    for it in 1..=opts.max_iter {
        let a = jac.gram();
        let g = jac.t_mul_vec(&r);
        let active = active_bounds(&x, &g, opts);

        // gradient test: max_j |J_j . r| / (|J_j| |r|) over free parameters
        let rnorm = cost.sqrt();
        let gcos = (0..n)
            .filter(|&j| !active[j])
            .map(|j| {
                let d = a[(j, j)].sqrt();
                if d > T::zero() && rnorm > T::zero() {
                    g[j].abs() / (d * rnorm)
                } else {
                    T::zero()
                }
            })
            .fold(T::zero(), T::max);
        if gcos <= opts.gtol {
            return report(x, r, jac, cost, it, Termination::Gradient);
        }

        loop {
            let mut damped = a.clone();
            for j in 0..n {
                let d = a[(j, j)].max(T::min_positive_value().sqrt());
                damped[(j, j)] = a[(j, j)] + lambda * d;
            }
            let mut neg_g: Vec<T> = g.iter().map(|&v| -v).collect();
            // parameters held at a bound take no step
            for j in (0..n).filter(|&j| active[j]) {
                for k in 0..n {
                    damped[(j, k)] = T::zero();
                    damped[(k, j)] = T::zero();
                }
                damped[(j, j)] = T::one();
                neg_g[j] = T::zero();
            }
            let step = cholesky_solve(&damped, &neg_g);
            let Some(step) = step else {
                lambda = lambda * T::lit(10.0);
                if lambda > T::lit(1e20) {
                    return report(x, r, jac, cost, it, Termination::Stalled);
                }
                continue;
            };
            let mut x_new: Vec<T> = x.iter().zip(&step).map(|(&a, &b)| a + b).collect();
            project(&mut x_new, opts);
            problem.residuals(&x_new, &mut r_new);
            let cost_new = sum_sq(&r_new);
            if cost_new.is_finite() && cost_new < cost {
                let step_norm = x_new
                    .iter()
                    .zip(&x)
                    .map(|(&a, &b)| (a - b) * (a - b))
                    .sum::<T>()
                    .sqrt();
                let x_norm = x.iter().map(|&v| v * v).sum::<T>().sqrt();
                let reduction = (cost - cost_new) / cost;
                x = x_new;
                std::mem::swap(&mut r, &mut r_new);
                cost = cost_new;
                problem.jacobian(&x, &mut jac);
                lambda = (lambda / T::lit(3.0)).max(T::lit(1e-15));
                if cost <= opts.abs_cost {
                    return report(x, r, jac, cost, it, Termination::AbsoluteCost);
                }
                if reduction <= opts.ftol {
                    return report(x, r, jac, cost, it, Termination::CostReduction);
                }
                if step_norm <= opts.xtol * (x_norm + opts.xtol) {
                    return report(x, r, jac, cost, it, Termination::StepSize);
                }
                break;
            }
            lambda = lambda * T::lit(4.0);
            if lambda > T::lit(1e20) {
                return report(x, r, jac, cost, it, Termination::Stalled);
            }
        }
    }
    let it = opts.max_iter;
    report(x, r, jac, cost, it, Termination::MaxIterations)
}
