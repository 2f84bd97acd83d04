//! Weighted nonlinear least squares for the two converter curve shapes.
//!
//! The solver is Levenberg-Marquardt on the normal equations with additive
//! damping μ·I, started at 10⁻³ of the largest normal-matrix diagonal and
//! scaled by 10 on every rejected or accepted step.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phasematch::sinc;

pub const MAX_ITERATIONS: usize = 200;
pub const STEP_TOLERANCE: f64 = 1e-8;
pub const GRADIENT_TOLERANCE: f64 = 1e-10;
const SERIES_BRANCH: f64 = 1e-4;
/// Relative singular-value floor below which the normal matrix counts as singular.
const SINGULAR_RCOND: f64 = 1e-13;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Model {
    /// η_max·sin²(L·√(η_n·P)); x is pump power in W.
    Sin2SqrtPower,
    /// A·sinc²(κ·(x − x₀)).
    Sinc2Detuning,
}

impl Model {
    pub fn parameter_names(self) -> [&'static str; 3] {
        match self {
            Model::Sin2SqrtPower => ["eta_max", "eta_n", "length"],
            Model::Sinc2Detuning => ["amplitude", "center", "kappa"],
        }
    }

    pub fn eval(self, x: f64, theta: &[f64]) -> f64 {
        match self {
            Model::Sin2SqrtPower => {
                let s = (theta[2] * (theta[1] * x).sqrt()).sin();
                theta[0] * s * s
            }
            Model::Sinc2Detuning => {
                let s = sinc(theta[2] * (x - theta[1]));
                theta[0] * s * s
            }
        }
    }

    /// Analytic ∂f/∂θ, finite at every parameter value including zeros.
    pub fn gradient(self, x: f64, theta: &[f64]) -> [f64; 3] {
        match self {
            Model::Sin2SqrtPower => {
                let (eta_max, eta_n, length) = (theta[0], theta[1], theta[2]);
                let root = (eta_n * x).sqrt();
                let u = length * root;
                let s = u.sin();
                [
                    s * s,
                    // η_max·sin(2u)·u/(2η_n) rewritten without the 1/η_n.
                    eta_max * length * length * x * sinc(2.0 * u),
                    eta_max * (2.0 * u).sin() * root,
                ]
            }
            Model::Sinc2Detuning => {
                let (a, x0, kappa) = (theta[0], theta[1], theta[2]);
                let z = kappa * (x - x0);
                let s = sinc(z);
                let df_dz = 2.0 * a * s * sinc_prime(z);
                [s * s, -kappa * df_dz, (x - x0) * df_dz]
            }
        }
    }
}

/// d/dz sin(z)/z.
fn sinc_prime(z: f64) -> f64 {
    if z.abs() < SERIES_BRANCH {
        -z / 3.0 + z * z * z / 30.0
    } else {
        (z * z.cos() - z.sin()) / (z * z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DataPoint {
    pub x: f64,
    pub y: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitProblem {
    pub model: Model,
    pub data: Vec<DataPoint>,
    /// Pinned parameters by name.
    pub fixed: BTreeMap<String, f64>,
    /// Full parameter vector; pinned entries are overridden by `fixed`.
    pub initial_guess: Vec<f64>,
}

impl FitProblem {
    pub fn new(model: Model, data: Vec<DataPoint>, initial_guess: Vec<f64>) -> Self {
        Self {
            model,
            data,
            fixed: BTreeMap::new(),
            initial_guess,
        }
    }

    pub fn pin(mut self, name: &str, value: f64) -> Self {
        self.fixed.insert(name.to_string(), value);
        self
    }

    /// Starting vector with pins applied, and the free-parameter mask.
    fn start(&self) -> Result<(Vec<f64>, Vec<bool>)> {
        let names = self.model.parameter_names();
        if self.initial_guess.len() != names.len() {
            return Err(Error::Invalid(format!(
                "{:?} takes {} parameters, got {}",
                self.model,
                names.len(),
                self.initial_guess.len()
            )));
        }
        let mut theta = self.initial_guess.clone();
        let mut free = vec![true; names.len()];
        for (name, &v) in &self.fixed {
            let i = names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::Invalid(format!("unknown parameter `{name}` (expected one of {names:?})")))?;
            theta[i] = v;
            free[i] = false;
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::Invalid("initial guess must be finite".into()));
        }
        Ok((theta, free))
    }

    pub fn validate(&self) -> Result<()> {
        let (_, free) = self.start()?;
        let n_free = free.iter().filter(|&&f| f).count();
        if self.data.len() < n_free + 2 {
            return Err(Error::Invalid(format!(
                "{} data points for {n_free} free parameters; need at least {}",
                self.data.len(),
                n_free + 2
            )));
        }
        for (i, d) in self.data.iter().enumerate() {
            if !(d.sigma > 0.0) || !d.x.is_finite() || !d.y.is_finite() {
                return Err(Error::Invalid(format!("data point {i}: need finite x, y and sigma > 0")));
            }
            if self.model == Model::Sin2SqrtPower && d.x < 0.0 {
                return Err(Error::Invalid(format!("data point {i}: negative pump power {}", d.x)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitResult {
    pub model: Model,
    pub names: Vec<String>,
    pub parameters: Vec<f64>,
    /// Standard errors; zero for pinned parameters.
    pub errors: Vec<f64>,
    pub free: Vec<bool>,
    /// Covariance of the free parameters, in the order they appear.
    pub covariance: Vec<Vec<f64>>,
    pub chi2: f64,
    pub reduced_chi2: f64,
    pub converged: bool,
    pub iterations: usize,
    pub gradient_norm: f64,
    /// The normal matrix at the solution is singular; some parameters are unconstrained.
    pub degenerate: bool,
}

impl FitResult {
    pub fn parameter(&self, name: &str) -> Option<(f64, f64)> {
        let i = self.names.iter().position(|n| n == name)?;
        Some((self.parameters[i], self.errors[i]))
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.model.eval(x, &self.parameters)
    }

    /// One-sigma width of the fitted curve at `x` from the linearized covariance.
    pub fn band(&self, x: f64) -> f64 {
        let g = self.model.gradient(x, &self.parameters);
        let g: Vec<f64> = g.iter().zip(&self.free).filter(|(_, &f)| f).map(|(g, _)| *g).collect();
        let mut var = 0.0;
        for (i, gi) in g.iter().enumerate() {
            for (j, gj) in g.iter().enumerate() {
                var += gi * self.covariance[i][j] * gj;
            }
        }
        var.max(0.0).sqrt()
    }
}

struct Linearization {
    chi2: f64,
    normal: DMatrix<f64>,
    gradient: DVector<f64>,
}

fn linearize(problem: &FitProblem, theta: &[f64], free: &[usize]) -> Linearization {
    let k = free.len();
    let mut normal = DMatrix::zeros(k, k);
    let mut gradient = DVector::zeros(k);
    let mut chi2 = 0.0;
    for d in &problem.data {
        let r = (d.y - problem.model.eval(d.x, theta)) / d.sigma;
        let full = problem.model.gradient(d.x, theta);
        let row: Vec<f64> = free.iter().map(|&j| full[j] / d.sigma).collect();
        chi2 += r * r;
        for a in 0..k {
            gradient[a] += row[a] * r;
            for b in 0..k {
                normal[(a, b)] += row[a] * row[b];
            }
        }
    }
    Linearization { chi2, normal, gradient }
}

fn chi2(problem: &FitProblem, theta: &[f64]) -> f64 {
    problem
        .data
        .iter()
        .map(|d| ((d.y - problem.model.eval(d.x, theta)) / d.sigma).powi(2))
        .sum()
}

/// Index of the free column that spans the null space of a singular matrix, if any.
fn singular_column(m: &DMatrix<f64>) -> Option<usize> {
    let k = m.nrows();
    if let Some(j) = (0..k).find(|&j| m[(j, j)] == 0.0) {
        return Some(j);
    }
    let svd = m.clone().svd(false, true);
    let s = &svd.singular_values;
    let max = s.max();
    let (imin, &min) = s.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1))?;
    if max == 0.0 || min <= SINGULAR_RCOND * max {
        let v_t = svd.v_t.as_ref()?;
        let row = v_t.row(imin);
        row.iter().enumerate().max_by(|a, b| a.1.abs().total_cmp(&b.1.abs())).map(|(j, _)| j)
    } else {
        None
    }
}

/// Pseudo-inverse of a symmetric positive semi-definite matrix.
fn pseudo_inverse(m: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = m.clone().svd(true, true);
    let max = svd.singular_values.max();
    svd.pseudo_inverse(SINGULAR_RCOND * max.max(f64::MIN_POSITIVE))
        .unwrap_or_else(|_| DMatrix::zeros(m.nrows(), m.ncols()))
}

/// Minimizes Σ((y − f(x; θ))/σ)² over the free parameters.
pub fn fit(problem: &FitProblem) -> Result<FitResult> {
    problem.validate()?;
    let (mut theta, free_mask) = problem.start()?;
    let free: Vec<usize> = (0..theta.len()).filter(|&j| free_mask[j]).collect();
    let mut lin = linearize(problem, &theta, &free);
    if let Some(col) = singular_column(&lin.normal) {
        return Err(Error::RankDeficient { column: free[col] });
    }
    let max_diag = (0..free.len()).map(|j| lin.normal[(j, j)]).fold(0.0, f64::max);
    let mut mu = 1e-3 * max_diag;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        if lin.gradient.norm() < GRADIENT_TOLERANCE {
            converged = true;
            break;
        }
        iterations += 1;
        let theta_norm = free.iter().map(|&j| theta[j] * theta[j]).sum::<f64>().sqrt();
        let mut stalled = false;
        loop {
            let damped = &lin.normal + DMatrix::identity(free.len(), free.len()) * mu;
            let step = match damped.cholesky() {
                Some(c) => c.solve(&lin.gradient),
                None => {
                    mu = (mu * 10.0).max(f64::MIN_POSITIVE);
                    continue;
                }
            };
            let small = step.norm() <= STEP_TOLERANCE * (theta_norm + STEP_TOLERANCE);
            let mut trial = theta.clone();
            for (a, &j) in free.iter().enumerate() {
                trial[j] += step[a];
            }
            let c = chi2(problem, &trial);
            if c.is_finite() && c <= lin.chi2 {
                theta = trial;
                mu /= 10.0;
                if small {
                    converged = true;
                }
                break;
            }
            if small {
                converged = true;
                break;
            }
            mu *= 10.0;
            if !mu.is_finite() || mu > 1e300 {
                stalled = true;
                break;
            }
        }
        lin = linearize(problem, &theta, &free);
        if converged || stalled {
            converged = converged || lin.gradient.norm() < GRADIENT_TOLERANCE;
            break;
        }
    }
    let dof = problem.data.len() - free.len();
    let reduced = lin.chi2 / dof as f64;
    let degenerate = singular_column(&lin.normal).is_some();
    let inverse = if degenerate {
        pseudo_inverse(&lin.normal)
    } else {
        lin.normal
            .clone()
            .try_inverse()
            .unwrap_or_else(|| pseudo_inverse(&lin.normal))
    };
    let cov = inverse * reduced;
    let mut errors = vec![0.0; theta.len()];
    for (a, &j) in free.iter().enumerate() {
        errors[j] = cov[(a, a)].max(0.0).sqrt();
    }
    let covariance = (0..free.len())
        .map(|a| (0..free.len()).map(|b| cov[(a, b)]).collect())
        .collect();
    Ok(FitResult {
        model: problem.model,
        names: problem.model.parameter_names().iter().map(|s| s.to_string()).collect(),
        parameters: theta,
        errors,
        free: free_mask,
        covariance,
        chi2: lin.chi2,
        reduced_chi2: reduced,
        converged,
        iterations,
        gradient_norm: lin.gradient.norm(),
        degenerate,
    })
}

/// Worst relative deviation between the analytic Jacobian and central
/// finite differences (step 10⁻⁶ relative, 10⁻⁶ absolute near zero) over
/// the problem's x values.
pub fn jacobian_check(problem: &FitProblem, theta: &[f64]) -> f64 {
    let mut worst: f64 = 0.0;
    for d in &problem.data {
        let analytic = problem.model.gradient(d.x, theta);
        let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for j in 0..theta.len() {
            let h = 1e-6 * theta[j].abs().max(1.0);
            let mut up = theta.to_vec();
            let mut down = theta.to_vec();
            up[j] += h;
            down[j] -= h;
            let (f_up, f_down) = (problem.model.eval(d.x, &up), problem.model.eval(d.x, &down));
            // At a domain edge (η_n = 0) the backward point is undefined; go one-sided.
            let fd = if f_down.is_finite() {
                (f_up - f_down) / (2.0 * h)
            } else {
                (f_up - problem.model.eval(d.x, theta)) / h
            };
            let a = analytic[j];
            // Components far below the row's scale are compared against that
            // scale; their finite differences are pure rounding noise.
            let denom = a.abs().max(fd.abs()).max(1e-4 * scale).max(1e-300);
            let dev = (a - fd).abs() / denom;
            if dev.is_finite() {
                worst = worst.max(dev);
            } else {
                return f64::INFINITY;
            }
        }
    }
    worst
}

/// Reads `x,y,sigma` CSV with a header row. `#` lines are comments.
pub fn read_csv<R: Read>(input: R) -> Result<Vec<DataPoint>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(input);
    reader
        .deserialize()
        .enumerate()
        .map(|(i, row)| row.map_err(|e| Error::Format(format!("data row {}: {e}", i + 1))))
        .collect()
}

pub fn write_csv<W: Write>(data: &[DataPoint], mut out: W) -> std::io::Result<()> {
    writeln!(out, "x,y,sigma")?;
    for d in data {
        writeln!(out, "{},{},{}", d.x, d.y, d.sigma)?;
    }
    Ok(())
}
