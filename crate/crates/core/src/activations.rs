//! Parametric activation functions.
//!
//! Every family exposes its value, the first derivative in `x`, the partial
//! derivatives in `alpha` and `beta`, and the second derivative in `x`. All
//! are closed-form; the autodiff graph calls them directly so a shared
//! parameter collects gradient from every activation site.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{sigmoid, Tensor};

/// Smallest `alpha` accepted for PSoftplus; the `1/alpha` prefactor blows up at 0.
pub const PSOFTPLUS_ALPHA_MIN: f64 = 0.05;
/// Smallest `alpha` PSSiLU is clamped to after an optimizer step.
pub const PSSILU_ALPHA_MIN: f64 = 1e-3;
/// Largest `beta` accepted for PSSiLU; keeps `1 - beta` away from 0.
pub const PSSILU_BETA_MAX: f64 = 0.99;

const SOFTPLUS_LINEAR_CUTOFF: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Relu,
    Elu,
    Silu,
    Softplus,
    Prelu,
    Pelu,
    Psilu,
    Psoftplus,
    PreluPlus,
    Reblu,
    Pssilu,
}

impl Family {
    pub const ALL: [Family; 11] = [
        Family::Relu,
        Family::Elu,
        Family::Silu,
        Family::Softplus,
        Family::Prelu,
        Family::Pelu,
        Family::Psilu,
        Family::Psoftplus,
        Family::PreluPlus,
        Family::Reblu,
        Family::Pssilu,
    ];

    pub const PARAMETRIC: [Family; 7] = [
        Family::Prelu,
        Family::Pelu,
        Family::Psilu,
        Family::Psoftplus,
        Family::PreluPlus,
        Family::Reblu,
        Family::Pssilu,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Relu => "relu",
            Family::Elu => "elu",
            Family::Silu => "silu",
            Family::Softplus => "softplus",
            Family::Prelu => "prelu",
            Family::Pelu => "pelu",
            Family::Psilu => "psilu",
            Family::Psoftplus => "psoftplus",
            Family::PreluPlus => "prelu_plus",
            Family::Reblu => "reblu",
            Family::Pssilu => "pssilu",
        }
    }

    pub fn parse(s: &str) -> Option<Family> {
        Family::ALL.into_iter().find(|f| f.name() == s.to_ascii_lowercase())
    }

    /// Number of shape parameters the family carries (0, 1 or 2).
    pub fn param_count(self) -> usize {
        match self {
            Family::Relu | Family::Elu | Family::Silu | Family::Softplus => 0,
            Family::Pssilu => 2,
            _ => 1,
        }
    }

    pub fn is_parametric(self) -> bool {
        self.param_count() > 0
    }

    /// Families defined piecewise with a break at `x = 0`.
    pub fn is_piecewise(self) -> bool {
        matches!(
            self,
            Family::Relu | Family::Elu | Family::Prelu | Family::Pelu | Family::PreluPlus | Family::Reblu
        )
    }

    /// The nonparametric shape each family is initialized to, and the
    /// `(alpha, beta)` that reproduce it.
    pub fn anchor(self) -> (Family, f64, f64) {
        match self {
            Family::Prelu => (Family::Relu, 0.0, 0.0),
            Family::Pelu => (Family::Elu, 1.0, 0.0),
            Family::Psilu => (Family::Silu, 1.0, 0.0),
            Family::Psoftplus => (Family::Softplus, 1.0, 0.0),
            Family::PreluPlus => (Family::Relu, 1.0, 0.0),
            Family::Reblu => (Family::Relu, 0.0, 0.0),
            Family::Pssilu => (Family::Silu, 1.0, 0.0),
            f => (f, 1.0, 0.0),
        }
    }

    pub fn eval(self, x: f64, alpha: f64, beta: f64) -> f64 {
        match self {
            Family::Relu => relu(x),
            Family::Elu => elu(x, 1.0),
            Family::Silu => x * sigmoid(x),
            Family::Softplus => softplus(x, 1.0),
            Family::Prelu => {
                if x <= 0.0 {
                    alpha * x
                } else {
                    x
                }
            }
            Family::Pelu => elu(x, alpha),
            Family::Psilu => x * sigmoid(alpha * x),
            Family::Psoftplus => softplus(x, alpha),
            Family::PreluPlus => {
                if x <= 0.0 {
                    0.0
                } else {
                    alpha * x
                }
            }
            Family::Reblu => {
                if x <= 0.0 {
                    0.0
                } else {
                    alpha * ((x * x + 1.0).sqrt() - 1.0) + x
                }
            }
            Family::Pssilu => x * (sigmoid(alpha * x) - beta) / (1.0 - beta),
        }
    }

    /// `d/dx`. At `x = 0` the ReLU-type families (ReLU, PReLU, PReLU⁺, ReBLU)
    /// return 0; ELU-type families use the `x <= 0` branch.
    pub fn grad_x(self, x: f64, alpha: f64, beta: f64) -> f64 {
        match self {
            Family::Relu => step(x),
            Family::Elu => elu_grad(x, 1.0),
            Family::Silu => silu_grad(x, 1.0),
            Family::Softplus => sigmoid(x),
            Family::Prelu => {
                if x < 0.0 {
                    alpha
                } else if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Family::Pelu => elu_grad(x, alpha),
            Family::Psilu => silu_grad(x, alpha),
            Family::Psoftplus => sigmoid(alpha * x),
            Family::PreluPlus => alpha * step(x),
            Family::Reblu => {
                if x > 0.0 {
                    alpha * x / (x * x + 1.0).sqrt() + 1.0
                } else {
                    0.0
                }
            }
            Family::Pssilu => (silu_grad(x, alpha) - beta) / (1.0 - beta),
        }
    }

    pub fn grad_alpha(self, x: f64, alpha: f64, beta: f64) -> f64 {
        match self {
            Family::Prelu => {
                if x <= 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Family::Pelu => {
                if x <= 0.0 {
                    x.exp_m1()
                } else {
                    0.0
                }
            }
            Family::Psilu => {
                let s = sigmoid(alpha * x);
                x * x * s * (1.0 - s)
            }
            Family::Psoftplus => -softplus(x, alpha) / alpha + x * sigmoid(alpha * x) / alpha,
            Family::PreluPlus => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Family::Reblu => {
                if x > 0.0 {
                    (x * x + 1.0).sqrt() - 1.0
                } else {
                    0.0
                }
            }
            Family::Pssilu => {
                let s = sigmoid(alpha * x);
                x * x * s * (1.0 - s) / (1.0 - beta)
            }
            _ => 0.0,
        }
    }

    pub fn grad_beta(self, x: f64, alpha: f64, beta: f64) -> f64 {
        match self {
            Family::Pssilu => {
                let s = sigmoid(alpha * x);
                x * (s - 1.0) / ((1.0 - beta) * (1.0 - beta))
            }
            _ => 0.0,
        }
    }

    /// `d²/dx²`; errors exactly at the break point of a piecewise family.
    pub fn second(self, x: f64, alpha: f64, beta: f64) -> Result<f64> {
        if self.is_piecewise() && x == 0.0 {
            return Err(Error::Kink { family: self.name(), x });
        }
        Ok(match self {
            Family::Relu | Family::Prelu | Family::PreluPlus => 0.0,
            Family::Elu => elu_second(x, 1.0),
            Family::Pelu => elu_second(x, alpha),
            Family::Silu => silu_second(x, 1.0),
            Family::Psilu => silu_second(x, alpha),
            Family::Softplus => softplus_second(x, 1.0),
            Family::Psoftplus => softplus_second(x, alpha),
            Family::Reblu => {
                if x > 0.0 {
                    alpha / (x * x + 1.0).powf(1.5)
                } else {
                    0.0
                }
            }
            Family::Pssilu => silu_second(x, alpha) / (1.0 - beta),
        })
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn relu(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        x
    }
}

fn step(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}

fn elu(x: f64, alpha: f64) -> f64 {
    if x <= 0.0 {
        alpha * x.exp_m1()
    } else {
        x
    }
}

fn elu_grad(x: f64, alpha: f64) -> f64 {
    if x <= 0.0 {
        alpha * x.exp()
    } else {
        1.0
    }
}

fn elu_second(x: f64, alpha: f64) -> f64 {
    if x < 0.0 {
        alpha * x.exp()
    } else {
        0.0
    }
}

fn silu_grad(x: f64, alpha: f64) -> f64 {
    let s = sigmoid(alpha * x);
    s + alpha * x * s * (1.0 - s)
}

fn silu_second(x: f64, alpha: f64) -> f64 {
    let s = sigmoid(alpha * x);
    let ds = s * (1.0 - s);
    2.0 * alpha * ds + alpha * alpha * x * ds * (1.0 - 2.0 * s)
}

/// `(1/alpha) ln(1 + e^{alpha x})`, switching to asymptotic forms past |alpha x| = 30.
fn softplus(x: f64, alpha: f64) -> f64 {
    let z = alpha * x;
    if z > SOFTPLUS_LINEAR_CUTOFF {
        x + (-z).exp() / alpha
    } else if z < -SOFTPLUS_LINEAR_CUTOFF {
        z.exp() / alpha
    } else {
        z.exp().ln_1p() / alpha
    }
}

fn softplus_second(x: f64, alpha: f64) -> f64 {
    let s = sigmoid(alpha * x);
    alpha * s * (1.0 - s)
}

/// A family together with its current parameter values and learnability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActivationSpec {
    family: Family,
    alpha: f64,
    beta: f64,
    alpha_learnable: bool,
    beta_learnable: bool,
}

impl ActivationSpec {
    /// A spec with every parameter of the family learnable.
    pub fn new(family: Family, alpha: f64, beta: f64) -> Result<Self> {
        let n = family.param_count();
        Self::with_flags(family, alpha, beta, n >= 1, n >= 2)
    }

    /// Parameters held fixed (for sweeps over activation shape).
    pub fn fixed(family: Family, alpha: f64, beta: f64) -> Result<Self> {
        Self::with_flags(family, alpha, beta, false, false)
    }

    pub fn with_flags(
        family: Family,
        alpha: f64,
        beta: f64,
        alpha_learnable: bool,
        beta_learnable: bool,
    ) -> Result<Self> {
        let n = family.param_count();
        let (alpha, beta) = match n {
            0 => (1.0, 0.0),
            1 => (alpha, 0.0),
            _ => (alpha, beta),
        };
        let spec = Self {
            family,
            alpha,
            beta,
            alpha_learnable: alpha_learnable && n >= 1,
            beta_learnable: beta_learnable && n >= 2,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn nonparametric(family: Family) -> Self {
        Self {
            family,
            alpha: 1.0,
            beta: 0.0,
            alpha_learnable: false,
            beta_learnable: false,
        }
    }

    /// The family at its nonparametric-anchor parameters, all learnable.
    pub fn at_anchor(family: Family) -> Self {
        let (_, a, b) = family.anchor();
        Self::new(family, a, b).expect("anchor parameters are in domain")
    }

    pub fn validate(&self) -> Result<()> {
        let (a, b) = (self.alpha, self.beta);
        if !a.is_finite() || !b.is_finite() {
            return Err(Error::InvalidParameter(format!("{}: non-finite parameter", self.family)));
        }
        match self.family {
            Family::Psoftplus if a < PSOFTPLUS_ALPHA_MIN => Err(Error::InvalidParameter(format!(
                "psoftplus needs alpha >= {PSOFTPLUS_ALPHA_MIN}, got {a}"
            ))),
            Family::Pssilu if a <= 0.0 => {
                Err(Error::InvalidParameter(format!("pssilu needs alpha > 0, got {a}")))
            }
            Family::Pssilu if !(0.0..=PSSILU_BETA_MAX).contains(&b) => Err(Error::InvalidParameter(
                format!("pssilu needs 0 <= beta <= {PSSILU_BETA_MAX}, got {b}"),
            )),
            _ => Ok(()),
        }
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn alpha_learnable(&self) -> bool {
        self.alpha_learnable
    }

    pub fn beta_learnable(&self) -> bool {
        self.beta_learnable
    }

    pub fn learnable_count(&self) -> usize {
        self.alpha_learnable as usize + self.beta_learnable as usize
    }

    /// Replaces the parameter values, projecting them into the family's domain.
    pub fn set_params_clamped(&mut self, alpha: f64, beta: f64) {
        let (a, b) = clamp_params(self.family, alpha, beta);
        match self.family.param_count() {
            0 => {}
            1 => self.alpha = a,
            _ => {
                self.alpha = a;
                self.beta = b;
            }
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.family.eval(x, self.alpha, self.beta)
    }

    pub fn derivative(&self, x: f64) -> f64 {
        self.family.grad_x(x, self.alpha, self.beta)
    }

    pub fn second_derivative(&self, x: f64) -> Result<f64> {
        self.family.second(x, self.alpha, self.beta)
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        map_tensor(x, |v| self.eval(v))
    }

    pub fn derivative_tensor(&self, x: &Tensor) -> Tensor {
        map_tensor(x, |v| self.derivative(v))
    }

    pub fn second_derivative_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let data = x.data().iter().map(|&v| self.second_derivative(v)).collect::<Result<Vec<_>>>()?;
        Tensor::new(x.shape().to_vec(), data)
    }
}

impl fmt::Display for ActivationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.family.param_count() {
            0 => write!(f, "{}", self.family),
            1 => write!(f, "{}(alpha={})", self.family, self.alpha),
            _ => write!(f, "{}(alpha={}, beta={})", self.family, self.alpha, self.beta),
        }
    }
}

/// Projects parameter values into the family's domain.
pub fn clamp_params(family: Family, alpha: f64, beta: f64) -> (f64, f64) {
    match family {
        Family::Psoftplus => (alpha.max(PSOFTPLUS_ALPHA_MIN), beta),
        Family::Pssilu => (alpha.max(PSSILU_ALPHA_MIN), beta.clamp(0.0, PSSILU_BETA_MAX)),
        _ => (alpha, beta),
    }
}

fn map_tensor(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = x.data().iter().map(|&v| f(v)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// Evenly spaced points `lo + (hi - lo) * i / (n - 1)`, endpoints included.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl Grid {
    pub fn new(lo: f64, hi: f64, n: usize) -> Result<Self> {
        if n < 2 || !(lo < hi) {
            return Err(Error::EmptyGrid);
        }
        Ok(Self { lo, hi, n })
    }

    pub fn points(&self) -> impl Iterator<Item = f64> + '_ {
        let span = self.hi - self.lo;
        let last = (self.n - 1) as f64;
        (0..self.n).map(move |i| self.lo + span * i as f64 / last)
    }
}

impl Default for Grid {
    /// 2001 points over [-5, 5].
    fn default() -> Self {
        Self {
            lo: -5.0,
            hi: 5.0,
            n: 2001,
        }
    }
}

/// Maximum of the second derivative over the grid.
pub fn curvature(spec: &ActivationSpec, grid: &Grid) -> Result<f64> {
    let grid = Grid::new(grid.lo, grid.hi, grid.n)?;
    let mut best = f64::NEG_INFINITY;
    for x in grid.points() {
        best = best.max(spec.second_derivative(x)?);
    }
    Ok(best)
}

/// `max |a(x) - b(x)|` over the grid.
pub fn identity_reduction_check(a: &ActivationSpec, b: &ActivationSpec, grid: &Grid) -> f64 {
    grid.points().map(|x| (a.eval(x) - b.eval(x)).abs()).fold(0.0, f64::max)
}

/// `(x, f(x))` pairs on the grid.
pub fn sample_shape(spec: &ActivationSpec, grid: &Grid) -> Vec<(f64, f64)> {
    grid.points().map(|x| (x, spec.eval(x))).collect()
}

/// Writes the curve as CSV with header `x,y`.
pub fn write_shape_csv<W: Write>(spec: &ActivationSpec, grid: &Grid, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["x", "y"])?;
    for (x, y) in sample_shape(spec, grid) {
        w.serialize((x, y))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(f: Family, a: f64, b: f64) -> ActivationSpec {
        ActivationSpec::new(f, a, b).unwrap()
    }

    #[test]
    fn forward_reference_values() {
        assert_eq!(spec(Family::Prelu, -0.5, 0.0).eval(-2.0), 1.0);
        assert!((spec(Family::Pssilu, 1.0, 0.3).eval(-2.0) - 0.516_563_2).abs() < 1e-6);
        assert!((spec(Family::Reblu, 1.0, 0.0).eval(3.0) - 5.162_277_7).abs() < 1e-6);
        assert!((spec(Family::Psoftplus, 1.0, 0.0).eval(0.0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((spec(Family::Pelu, 0.5, 0.0).eval(-1.0) + 0.316_060_3).abs() < 1e-6);
    }

    #[test]
    fn derivative_reference_values() {
        let silu = ActivationSpec::nonparametric(Family::Silu);
        assert_eq!(silu.derivative(0.0), 0.5);
        let relu = ActivationSpec::nonparametric(Family::Relu);
        assert_eq!(relu.derivative(-1.0), 0.0);
        assert_eq!(relu.derivative(1.0), 1.0);
        assert_eq!(relu.derivative(0.0), 0.0);
        assert_eq!(spec(Family::Prelu, -0.3, 0.0).derivative(0.0), 0.0);
    }

    #[test]
    fn second_derivative_reference_values() {
        let sp = ActivationSpec::nonparametric(Family::Softplus);
        assert_eq!(sp.second_derivative(0.0).unwrap(), 0.25);
        assert_eq!(spec(Family::Prelu, 0.2, 0.0).second_derivative(-3.0).unwrap(), 0.0);
        assert_eq!(spec(Family::Prelu, 0.2, 0.0).second_derivative(2.0).unwrap(), 0.0);
        assert!(matches!(
            spec(Family::Prelu, 0.2, 0.0).second_derivative(0.0),
            Err(Error::Kink { .. })
        ));
    }

    #[test]
    fn domain_checks() {
        assert!(ActivationSpec::new(Family::Pssilu, 1.0, 1.0).is_err());
        assert!(ActivationSpec::new(Family::Pssilu, 1.0, -0.1).is_err());
        assert!(ActivationSpec::new(Family::Pssilu, 0.0, 0.1).is_err());
        assert!(ActivationSpec::new(Family::Pssilu, 1.0, 0.0).is_ok());
        assert!(ActivationSpec::new(Family::Psoftplus, 0.01, 0.0).is_err());
        assert!(ActivationSpec::new(Family::Psoftplus, 0.05, 0.0).is_ok());
        assert!(ActivationSpec::new(Family::Psilu, f64::NAN, 0.0).is_err());
    }

    #[test]
    fn nonparametric_flags_and_counts() {
        for f in Family::ALL {
            let s = ActivationSpec::at_anchor(f);
            assert_eq!(s.learnable_count(), f.param_count(), "{f}");
        }
        let r = ActivationSpec::new(Family::Relu, 5.0, 0.5).unwrap();
        assert!(!r.alpha_learnable() && !r.beta_learnable());
    }

    #[test]
    fn curvature_values() {
        let relu = ActivationSpec::nonparametric(Family::Relu);
        let g = Grid::new(-10.0, 10.0, 2000).unwrap();
        assert_eq!(curvature(&relu, &g).unwrap(), 0.0);
        let g_odd = Grid::new(-10.0, 10.0, 2001).unwrap();
        assert!(curvature(&relu, &g_odd).is_err());
        let psp = spec(Family::Psoftplus, 1.0, 0.0);
        assert!((curvature(&psp, &g_odd).unwrap() - 0.25).abs() < 1e-12);
        let c1 = curvature(&spec(Family::Psilu, 1.0, 0.0), &g_odd).unwrap();
        let c4 = curvature(&spec(Family::Psilu, 4.0, 0.0), &g_odd).unwrap();
        assert!(c4 > c1);
        assert!(Grid::new(0.0, 1.0, 1).is_err());
    }

    #[test]
    fn clamp_projects_into_domain() {
        let mut s = spec(Family::Pssilu, 1.0, 0.1);
        s.set_params_clamped(-2.0, -0.4);
        assert_eq!((s.alpha(), s.beta()), (PSSILU_ALPHA_MIN, 0.0));
        s.set_params_clamped(1.5, 3.0);
        assert_eq!(s.beta(), PSSILU_BETA_MAX);
        let mut p = spec(Family::Psoftplus, 1.0, 0.0);
        p.set_params_clamped(0.0, 0.0);
        assert_eq!(p.alpha(), PSOFTPLUS_ALPHA_MIN);
        assert!(p.validate().is_ok());
    }

    #[test]
    fn shape_csv_has_header_and_rows() {
        let mut buf = Vec::new();
        let g = Grid::new(-1.0, 1.0, 3).unwrap();
        write_shape_csv(&ActivationSpec::nonparametric(Family::Relu), &g, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "x,y\n-1.0,0.0\n0.0,0.0\n1.0,1.0\n");
    }

    #[test]
    fn family_names_round_trip() {
        for f in Family::ALL {
            assert_eq!(Family::parse(f.name()), Some(f));
        }
        assert_eq!(Family::parse("swish"), None);
    }
}
