//! Weighted nonlinear least squares by Levenberg–Marquardt.
//!
//! Minimizes `χ² = Σ ((f(xᵢ; p) − yᵢ)/σᵢ)²`. Parameters marked
//! [`Bound::Positive`] are optimized as `ln p`. The Jacobian is built by
//! forward differences (relative step 1e−6); once the forward-difference
//! gradient looks converged, or the damped step stalls, the solver switches to
//! central differences, and convergence is only declared on the central
//! gradient `‖∇χ²‖ < 1e−8·(1 + χ²)`. The gradient is taken with respect to
//! parameters rescaled so that each Jacobian column has unit norm.

use nalgebra::{DMatrix, DVector};
use serde::ser::{SerializeMap, SerializeStruct};
use serde::{Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error("underdetermined fit: {points} points for {params} parameters")]
    Underdetermined { points: usize, params: usize },
    #[error("x, y and sigma have different lengths ({x}, {y}, {sigma})")]
    LengthMismatch { x: usize, y: usize, sigma: usize },
    #[error("sigma[{index}] = {value} is not a positive finite number")]
    BadSigma { index: usize, value: f64 },
    #[error("non-finite data at index {0}")]
    BadData(usize),
    #[error("initial value {value} for {name} is invalid")]
    BadInit { name: String, value: f64 },
    #[error("model is not finite at the initial parameters")]
    ModelNotFinite,
    #[error("{0}")]
    Precondition(String),
    #[error("inconsistent series: {0}")]
    InconsistentSeries(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bound {
    Free,
    /// Strictly positive; optimized in log space.
    Positive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub init: f64,
    pub bound: Bound,
}

impl ParamSpec {
    pub fn free(name: &str, init: f64) -> Self {
        ParamSpec { name: name.to_string(), init, bound: Bound::Free }
    }

    pub fn positive(name: &str, init: f64) -> Self {
        ParamSpec { name: name.to_string(), init, bound: Bound::Positive }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl Dataset {
    pub fn new(x: Vec<f64>, y: Vec<f64>, sigma: Vec<f64>) -> Result<Self, FitError> {
        let d = Dataset { x, y, sigma };
        d.validate()?;
        Ok(d)
    }

    /// Unit weights.
    pub fn unweighted(x: Vec<f64>, y: Vec<f64>) -> Result<Self, FitError> {
        let sigma = vec![1.0; y.len()];
        Dataset::new(x, y, sigma)
    }

    /// Poisson weights `σ = √max(y, 1)`.
    pub fn poisson(x: Vec<f64>, y: Vec<f64>) -> Result<Self, FitError> {
        let sigma = y.iter().map(|&c| c.max(1.0).sqrt()).collect();
        Dataset::new(x, y, sigma)
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    fn validate(&self) -> Result<(), FitError> {
        if self.x.len() != self.y.len() || self.y.len() != self.sigma.len() {
            return Err(FitError::LengthMismatch { x: self.x.len(), y: self.y.len(), sigma: self.sigma.len() });
        }
        for (i, (&x, &y)) in self.x.iter().zip(&self.y).enumerate() {
            if !(x.is_finite() && y.is_finite()) {
                return Err(FitError::BadData(i));
            }
        }
        for (index, &value) in self.sigma.iter().enumerate() {
            if !(value.is_finite() && value > 0.0) {
                return Err(FitError::BadSigma { index, value });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub max_iter: usize,
    pub grad_tol: f64,
    /// Relative forward-difference step.
    pub fd_step: f64,
    /// Relative central-difference step.
    pub central_step: f64,
    /// Multiply the covariance by the reduced χ².
    pub scale_covariance: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { max_iter: 200, grad_tol: 1e-8, fd_step: 1e-6, central_step: 1e-5, scale_covariance: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitParam {
    pub name: String,
    pub value: f64,
    /// 1σ; `None` unless the fit converged.
    pub sigma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub params: Vec<FitParam>,
    pub chi2: f64,
    pub chi2_red: f64,
    pub dof: usize,
    pub converged: bool,
    pub iters: usize,
    /// The normal matrix was rank-deficient; the covariance is a pseudo-inverse.
    pub singular: bool,
    /// Natural-coordinate covariance; `None` unless converged.
    pub covariance: Option<Vec<Vec<f64>>>,
    pub grad_norm: f64,
}

impl FitResult {
    pub fn values(&self) -> Vec<f64> {
        self.params.iter().map(|p| p.value).collect()
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn value(&self, name: &str) -> Option<f64> {
        self.index(name).map(|i| self.params[i].value)
    }

    pub fn sigma(&self, name: &str) -> Option<f64> {
        self.index(name).and_then(|i| self.params[i].sigma)
    }

    pub fn cov(&self, i: usize, j: usize) -> Option<f64> {
        self.covariance.as_ref().map(|c| c[i][j])
    }

    /// Rebuilds parameters and covariance under a linear change of variables
    /// `p' = values`, `C' = T·C·Tᵀ`.
    pub(crate) fn reparameterize(&mut self, names: &[&str], values: &[f64], t: &DMatrix<f64>) {
        let cov = self.covariance.as_ref().map(|c| {
            let n = c.len();
            let m = DMatrix::from_fn(n, n, |i, j| c[i][j]);
            let out = t * m * t.transpose();
            (0..out.nrows()).map(|i| (0..out.ncols()).map(|j| out[(i, j)]).collect()).collect()
        });
        self.params = names
            .iter()
            .zip(values)
            .enumerate()
            .map(|(i, (n, &v))| FitParam {
                name: n.to_string(),
                value: v,
                sigma: cov.as_ref().map(|c: &Vec<Vec<f64>>| c[i][i].max(0.0).sqrt()),
            })
            .collect();
        self.covariance = cov;
    }
}

struct ParamJson<'a>(&'a FitParam);

impl Serialize for ParamJson<'_> {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut st = s.serialize_struct("param", 2)?;
        st.serialize_field("value", &self.0.value)?;
        st.serialize_field("sigma", &self.0.sigma)?;
        st.end()
    }
}

struct ParamsJson<'a>(&'a [FitParam]);

impl Serialize for ParamsJson<'_> {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut m = s.serialize_map(Some(self.0.len()))?;
        for p in self.0 {
            m.serialize_entry(&p.name, &ParamJson(p))?;
        }
        m.end()
    }
}

/// `{params:{name:{value,sigma}}, chi2_red, converged, iters, singular}`.
impl Serialize for FitResult {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut st = s.serialize_struct("FitResult", 5)?;
        st.serialize_field("params", &ParamsJson(&self.params))?;
        st.serialize_field("chi2_red", &self.chi2_red)?;
        st.serialize_field("converged", &self.converged)?;
        st.serialize_field("iters", &self.iters)?;
        st.serialize_field("singular", &self.singular)?;
        st.end()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Difference {
    Forward,
    Central,
}

/// Finite-difference Jacobian `∂f/∂p` (rows = outputs) of `f` at `p`.
pub fn jacobian<F>(f: F, p: &[f64], step: f64, scheme: Difference) -> DMatrix<f64>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let f0 = f(p);
    let mut j = DMatrix::zeros(f0.len(), p.len());
    let mut q = p.to_vec();
    for k in 0..p.len() {
        let h = step * p[k].abs().max(1.0);
        match scheme {
            Difference::Forward => {
                q[k] = p[k] + h;
                let fp = f(&q);
                let dh = q[k] - p[k];
                for i in 0..f0.len() {
                    j[(i, k)] = (fp[i] - f0[i]) / dh;
                }
            }
            Difference::Central => {
                q[k] = p[k] + h;
                let fp = f(&q);
                let up = q[k];
                q[k] = p[k] - h;
                let fm = f(&q);
                let dh = up - q[k];
                for i in 0..f0.len() {
                    j[(i, k)] = (fp[i] - fm[i]) / dh;
                }
            }
        }
        q[k] = p[k];
    }
    j
}

struct Problem<'a, F> {
    model: &'a F,
    data: &'a Dataset,
    bounds: Vec<Bound>,
}

impl<F> Problem<'_, F>
where
    F: Fn(&[f64], &[f64]) -> Vec<f64>,
{
    fn to_natural(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(&self.bounds)
            .map(|(&v, b)| match b {
                Bound::Free => v,
                Bound::Positive => v.exp(),
            })
            .collect()
    }

    fn residuals(&self, u: &[f64]) -> Vec<f64> {
        let p = self.to_natural(u);
        let f = (self.model)(&self.data.x, &p);
        f.iter().zip(&self.data.y).zip(&self.data.sigma).map(|((fi, yi), si)| (fi - yi) / si).collect()
    }
}

fn cost_of(r: &[f64]) -> f64 {
    let c: f64 = r.iter().map(|v| v * v).sum();
    if c.is_finite() {
        c
    } else {
        f64::INFINITY
    }
}

fn solve_damped(a: &DMatrix<f64>, d: &DVector<f64>, lambda: f64, rhs: &DVector<f64>) -> DVector<f64> {
    let mut m = a.clone();
    for i in 0..m.nrows() {
        m[(i, i)] += lambda * d[i];
    }
    if let Some(ch) = m.clone().cholesky() {
        return ch.solve(rhs);
    }
    let svd = m.svd(true, true);
    svd.solve(rhs, 1e-14 * svd.singular_values.max()).unwrap_or_else(|_| DVector::zeros(rhs.len()))
}

/// Fits `model(x, p)` to `data`.
///
/// Non-convergence is reported through [`FitResult::converged`], not as an
/// error; a non-converged result carries no uncertainties.
pub fn minimize<F>(model: F, data: &Dataset, params: &[ParamSpec], opts: &FitOptions) -> Result<FitResult, FitError>
where
    F: Fn(&[f64], &[f64]) -> Vec<f64>,
{
    data.validate()?;
    let n = params.len();
    if data.len() < n || n == 0 {
        return Err(FitError::Underdetermined { points: data.len(), params: n });
    }
    let mut u0 = Vec::with_capacity(n);
    for p in params {
        let ok = p.init.is_finite() && (p.bound == Bound::Free || p.init > 0.0);
        if !ok {
            return Err(FitError::BadInit { name: p.name.clone(), value: p.init });
        }
        u0.push(match p.bound {
            Bound::Free => p.init,
            Bound::Positive => p.init.ln(),
        });
    }
    let prob = Problem { model: &model, data, bounds: params.iter().map(|p| p.bound).collect() };

    let mut u = u0;
    let mut r = prob.residuals(&u);
    let mut cost = cost_of(&r);
    if !cost.is_finite() {
        return Err(FitError::ModelNotFinite);
    }

    let jac_u = |u: &[f64], scheme: Difference| -> DMatrix<f64> {
        let step = match scheme {
            Difference::Forward => opts.fd_step,
            Difference::Central => opts.central_step,
        };
        jacobian(|v| prob.residuals(v), u, step, scheme)
    };
    let grad_of = |j: &DMatrix<f64>, r: &[f64]| -> DVector<f64> { 2.0 * j.transpose() * DVector::from_column_slice(r) };
    // Gradient w.r.t. parameters rescaled so every Jacobian column has unit
    // norm; this makes the tolerance independent of units and weights.
    let scaled_norm = |j: &DMatrix<f64>, g: &DVector<f64>| -> f64 {
        g.iter()
            .enumerate()
            .map(|(k, gk)| {
                let c = j.column(k).norm();
                if c > 0.0 {
                    (gk / c).powi(2)
                } else {
                    0.0
                }
            })
            .sum::<f64>()
            .sqrt()
    };
    let tol = |cost: f64| opts.grad_tol * (1.0 + cost);

    let mut scheme = Difference::Forward;
    let mut lambda = 1e-3;
    let mut nu = 2.0;
    let mut converged = false;
    let mut iters = 0;
    let mut grad_norm = f64::INFINITY;

    while iters < opts.max_iter {
        iters += 1;
        let mut j = jac_u(&u, scheme);
        let mut g = grad_of(&j, &r);
        grad_norm = scaled_norm(&j, &g);
        if grad_norm < tol(cost) {
            if scheme == Difference::Central {
                converged = true;
                break;
            }
            scheme = Difference::Central;
            j = jac_u(&u, scheme);
            g = grad_of(&j, &r);
            grad_norm = scaled_norm(&j, &g);
            if grad_norm < tol(cost) {
                converged = true;
                break;
            }
        }

        let a = j.transpose() * &j;
        let dmax = a.diagonal().max();
        let floor = (1e-12 * dmax).max(1e-300);
        let d = a.diagonal().map(|v| v.max(floor));
        let rhs = -0.5 * &g;

        let mut accepted = false;
        for _ in 0..60 {
            let delta = solve_damped(&a, &d, lambda, &rhs);
            let u_new: Vec<f64> = u.iter().zip(delta.iter()).map(|(a, b)| a + b).collect();
            let r_new = prob.residuals(&u_new);
            let cost_new = cost_of(&r_new);
            let scaled: DVector<f64> = delta.component_mul(&d) * lambda;
            let pred = delta.dot(&(scaled + &rhs));
            if cost_new < cost {
                let rho = if pred > 0.0 { (cost - cost_new) / pred } else { 1.0 };
                lambda *= (1.0 - (2.0 * rho - 1.0).powi(3)).max(1.0 / 3.0);
                lambda = lambda.max(1e-15);
                nu = 2.0;
                let tiny = (cost - cost_new) <= 1e-15 * cost
                    && delta.iter().zip(&u).all(|(d, v)| d.abs() <= 1e-14 * (v.abs() + 1e-14));
                u = u_new;
                r = r_new;
                cost = cost_new;
                accepted = !tiny;
                break;
            }
            lambda *= nu;
            nu *= 2.0;
            if lambda > 1e16 {
                break;
            }
        }
        if !accepted {
            if scheme == Difference::Forward {
                scheme = Difference::Central;
                lambda = 1e-3;
                nu = 2.0;
                continue;
            }
            break;
        }
    }

    if !converged {
        let j = jac_u(&u, Difference::Central);
        grad_norm = scaled_norm(&j, &grad_of(&j, &r));
        converged = grad_norm < tol(cost);
    }

    let p = prob.to_natural(&u);
    let dof = (data.len() - n).max(1);
    let chi2_red = cost / dof as f64;
    let (covariance, singular) = {
        let natural = |q: &[f64]| {
            let f = model(&data.x, q);
            f.iter().zip(&data.sigma).map(|(fi, si)| fi / si).collect::<Vec<f64>>()
        };
        let j = jacobian(natural, &p, opts.central_step, Difference::Central);
        let (mut cov, singular) = pseudo_inverse_normal(&j);
        if opts.scale_covariance {
            cov *= chi2_red;
        }
        (cov, singular)
    };
    let cov_rows: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|k| covariance[(i, k)]).collect()).collect();
    let params_out = params
        .iter()
        .zip(&p)
        .enumerate()
        .map(|(i, (spec, &value))| FitParam {
            name: spec.name.clone(),
            value,
            sigma: converged.then(|| cov_rows[i][i].max(0.0).sqrt()),
        })
        .collect();
    Ok(FitResult {
        params: params_out,
        chi2: cost,
        chi2_red,
        dof,
        converged,
        iters,
        singular,
        covariance: converged.then_some(cov_rows),
        grad_norm,
    })
}

/// `(JᵀJ)⁺` with column equilibration, plus a rank-deficiency flag.
pub(crate) fn pseudo_inverse_normal(j: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let n = j.ncols();
    let scale: Vec<f64> = (0..n)
        .map(|k| {
            let s = j.column(k).norm();
            if s > 0.0 && s.is_finite() {
                1.0 / s
            } else {
                0.0
            }
        })
        .collect();
    let mut singular = scale.contains(&0.0);
    let js = DMatrix::from_fn(j.nrows(), n, |i, k| j[(i, k)] * scale[k]);
    let a = js.transpose() * js;
    let eig = a.symmetric_eigen();
    let emax = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let thresh = 1e-14 * emax.max(f64::MIN_POSITIVE);
    let mut inv = DMatrix::zeros(n, n);
    for (k, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam > thresh {
            let v = eig.eigenvectors.column(k);
            inv += (v * v.transpose()) / lam;
        } else {
            singular = true;
        }
    }
    let cov = DMatrix::from_fn(n, n, |i, k| inv[(i, k)] * scale[i] * scale[k]);
    (cov, singular)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_exact_recovery() {
        let x: Vec<f64> = (0..10).map(f64::from).collect();
        let y: Vec<f64> = x.iter().map(|v| 3.0 - 0.5 * v).collect();
        let d = Dataset::unweighted(x, y).unwrap();
        let model = |x: &[f64], p: &[f64]| x.iter().map(|v| p[0] + p[1] * v).collect();
        let r = minimize(model, &d, &[ParamSpec::free("a", 0.0), ParamSpec::free("b", 0.0)], &FitOptions::default())
            .unwrap();
        assert!(r.converged);
        assert!((r.values()[0] - 3.0).abs() < 1e-9);
        assert!((r.values()[1] + 0.5).abs() < 1e-9);
        assert!(r.chi2 < 1e-16);
    }

    #[test]
    fn quadratic_bowl_converges_quickly() {
        // residuals p − c: a bowl in 4 dimensions
        let c = [1.5, -2.0, 7.0, 0.25];
        let d = Dataset::unweighted(vec![0.0; 4], c.to_vec()).unwrap();
        let model = |_: &[f64], p: &[f64]| p.to_vec();
        let r = minimize(
            model,
            &d,
            &[
                ParamSpec::free("a", 40.0),
                ParamSpec::free("b", -13.0),
                ParamSpec::free("c", 0.0),
                ParamSpec::positive("d", 9.0),
            ],
            &FitOptions::default(),
        )
        .unwrap();
        assert!(r.converged);
        assert!(r.iters <= 50, "{} iterations", r.iters);
        for (v, t) in r.values().iter().zip(c) {
            assert!((v - t).abs() < 1e-8);
        }
    }

    #[test]
    fn underdetermined_and_bad_inputs() {
        let d = Dataset::unweighted(vec![1.0], vec![2.0]).unwrap();
        let model = |x: &[f64], p: &[f64]| x.iter().map(|v| p[0] * v + p[1]).collect();
        let e = minimize(model, &d, &[ParamSpec::free("a", 1.0), ParamSpec::free("b", 1.0)], &FitOptions::default());
        assert!(matches!(e, Err(FitError::Underdetermined { points: 1, params: 2 })));
        assert!(Dataset::new(vec![1.0], vec![1.0], vec![0.0]).is_err());
        assert!(Dataset::new(vec![1.0, 2.0], vec![1.0], vec![1.0]).is_err());
        let d = Dataset::unweighted(vec![1.0, 2.0], vec![1.0, 2.0]).unwrap();
        let e = minimize(model, &d, &[ParamSpec::positive("a", -1.0)], &FitOptions::default());
        assert!(matches!(e, Err(FitError::BadInit { .. })));
    }

    #[test]
    fn non_converged_has_no_sigma() {
        let x: Vec<f64> = (0..20).map(|i| i as f64 * 0.3).collect();
        let y: Vec<f64> = x.iter().map(|v| 5.0 * (-v / 1.3f64).exp()).collect();
        let d = Dataset::unweighted(x, y).unwrap();
        let model = |x: &[f64], p: &[f64]| x.iter().map(|v| p[0] * (-v / p[1]).exp()).collect::<Vec<_>>();
        let opts = FitOptions { max_iter: 1, ..FitOptions::default() };
        let r = minimize(model, &d, &[ParamSpec::free("a", 1.0), ParamSpec::positive("tau", 10.0)], &opts).unwrap();
        assert!(!r.converged);
        assert!(r.params.iter().all(|p| p.sigma.is_none()));
        assert!(r.covariance.is_none());
        let full =
            minimize(model, &d, &[ParamSpec::free("a", 1.0), ParamSpec::positive("tau", 10.0)], &FitOptions::default())
                .unwrap();
        assert!(full.converged);
        assert!((full.value("tau").unwrap() - 1.3).abs() < 1e-8);
    }

    #[test]
    fn covariance_matches_linear_theory() {
        // straight line with σ = 2: Var(b) = σ²/Σ(x − x̄)²
        let x: Vec<f64> = (0..11).map(f64::from).collect();
        let y: Vec<f64> = x.iter().map(|v| 1.0 + 2.0 * v + if *v as i64 % 2 == 0 { 0.3 } else { -0.3 }).collect();
        let d = Dataset::new(x.clone(), y, vec![2.0; 11]).unwrap();
        let model = |x: &[f64], p: &[f64]| x.iter().map(|v| p[0] + p[1] * v).collect();
        let r = minimize(model, &d, &[ParamSpec::free("a", 0.0), ParamSpec::free("b", 0.0)], &FitOptions::default())
            .unwrap();
        let sxx: f64 = x.iter().map(|v| (v - 5.0).powi(2)).sum();
        assert!((r.sigma("b").unwrap() - 2.0 / sxx.sqrt()).abs() < 1e-6);
        assert!(!r.singular);
    }

    #[test]
    fn rank_deficiency_is_flagged() {
        // p0 and p1 only enter as their sum
        let x: Vec<f64> = (0..6).map(f64::from).collect();
        let y: Vec<f64> = x.iter().map(|v| 3.0 + v).collect();
        let d = Dataset::unweighted(x, y).unwrap();
        let model = |x: &[f64], p: &[f64]| x.iter().map(|v| p[0] + p[1] + v).collect();
        let r = minimize(model, &d, &[ParamSpec::free("a", 1.0), ParamSpec::free("b", 1.0)], &FitOptions::default())
            .unwrap();
        assert!(r.converged);
        assert!(r.singular);
        assert!((r.values()[0] + r.values()[1] - 3.0).abs() < 1e-9);
    }

    #[test]
    fn json_shape() {
        let d = Dataset::unweighted(vec![0.0, 1.0, 2.0], vec![1.0, 1.0, 1.0]).unwrap();
        let r = minimize(
            |x: &[f64], p: &[f64]| vec![p[0]; x.len()],
            &d,
            &[ParamSpec::free("c", 0.0)],
            &FitOptions::default(),
        )
        .unwrap();
        let v = serde_json::to_value(&r).unwrap();
        assert!((v["params"]["c"]["value"].as_f64().unwrap() - 1.0).abs() < 1e-8);
        assert!(v["params"]["c"]["sigma"].is_number());
        assert!(v["converged"].as_bool().unwrap());
        assert!(v["iters"].is_u64());
        assert!(v["chi2_red"].is_number());
    }
}
