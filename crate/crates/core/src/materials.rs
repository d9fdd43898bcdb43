//! Periodic elastic and hardening densities and validators for their
//! growth and Lipschitz hypotheses.
//!
//! Points `x ∈ R^3` are wrapped into the unit cell `Q = [0, 1)^3`. Phase
//! boundaries use half-open intervals `[0, θ)`, `[θ, 1)`.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::finsler::{distance_to_identity_within, sample_in_k, MinkowskiNorm};
use crate::{Mat3, SL3Element};

/// Piecewise-constant Q-periodic weight `a(x)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightField {
    Homogeneous { weight: f64 },
    TwoPhaseLaminate { a: f64, b: f64, axis: usize, fraction: f64 },
    Checkerboard { a: f64, b: f64 },
}

/// Wraps a coordinate into `[0, 1)`.
pub fn frac(v: f64) -> f64 {
    let f = v - v.floor();
    // v.floor() can round so that f == 1.0 for tiny negative v
    if f >= 1.0 {
        0.0
    } else {
        f
    }
}

impl WeightField {
    pub fn eval(&self, x: &[f64; 3]) -> f64 {
        match *self {
            WeightField::Homogeneous { weight } => weight,
            WeightField::TwoPhaseLaminate { a, b, axis, fraction } => {
                if frac(x[axis]) < fraction {
                    a
                } else {
                    b
                }
            }
            WeightField::Checkerboard { a, b } => {
                let parity: u32 = x.iter().map(|v| (2.0 * frac(*v)).floor() as u32).sum();
                if parity % 2 == 0 {
                    a
                } else {
                    b
                }
            }
        }
    }

    pub fn min(&self) -> f64 {
        match *self {
            WeightField::Homogeneous { weight } => weight,
            WeightField::TwoPhaseLaminate { a, b, .. } | WeightField::Checkerboard { a, b } => {
                a.min(b)
            }
        }
    }

    pub fn max(&self) -> f64 {
        match *self {
            WeightField::Homogeneous { weight } => weight,
            WeightField::TwoPhaseLaminate { a, b, .. } | WeightField::Checkerboard { a, b } => {
                a.max(b)
            }
        }
    }

    /// Exact unit-cell average.
    pub fn mean(&self) -> f64 {
        match *self {
            WeightField::Homogeneous { weight } => weight,
            WeightField::TwoPhaseLaminate { a, b, fraction, .. } => {
                fraction * a + (1.0 - fraction) * b
            }
            WeightField::Checkerboard { a, b } => 0.5 * (a + b),
        }
    }

    fn validate(&self) -> Result<()> {
        let positive = |v: f64, name: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidInput(format!("{name} must be positive, got {v}")))
            }
        };
        match *self {
            WeightField::Homogeneous { weight } => positive(weight, "weight"),
            WeightField::TwoPhaseLaminate { a, b, axis, fraction } => {
                positive(a, "a")?;
                positive(b, "b")?;
                if axis > 2 {
                    return Err(Error::InvalidInput(format!("axis {axis} is not in 0..3")));
                }
                if !(fraction > 0.0 && fraction < 1.0) {
                    return Err(Error::InvalidInput(format!(
                        "volume fraction must lie in (0, 1), got {fraction}"
                    )));
                }
                Ok(())
            }
            WeightField::Checkerboard { a, b } => {
                positive(a, "a")?;
                positive(b, "b")
            }
        }
    }
}

/// Growth and Lipschitz constants of an elastic density:
/// `c1|F|^2 <= W <= c2(|F|^2 + 1)`, `|W(F1) - W(F2)| <= c3(1 + |F1| + |F2|)|F1 - F2|`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrowthConstants {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
}

/// Elastic energy density `W(x, F)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ElasticDensity {
    HomogeneousQuadratic { weight: f64 },
    TwoPhaseLaminate { a: f64, b: f64, axis: usize, fraction: f64 },
    Checkerboard { a: f64, b: f64 },
    /// `w |F|^p` with user-declared constants; outside the shipped catalog.
    PowerLaw { weight: f64, exponent: f64, growth: GrowthConstants },
}

impl ElasticDensity {
    /// Weight field of the quadratic catalog `a(x)|F|^2`.
    pub fn weights(&self) -> Option<WeightField> {
        match *self {
            ElasticDensity::HomogeneousQuadratic { weight } => {
                Some(WeightField::Homogeneous { weight })
            }
            ElasticDensity::TwoPhaseLaminate { a, b, axis, fraction } => {
                Some(WeightField::TwoPhaseLaminate { a, b, axis, fraction })
            }
            ElasticDensity::Checkerboard { a, b } => Some(WeightField::Checkerboard { a, b }),
            ElasticDensity::PowerLaw { .. } => None,
        }
    }

    /// Quadratic in `F` for every `x`.
    pub fn is_quadratic(&self) -> bool {
        match self {
            ElasticDensity::PowerLaw { exponent, .. } => *exponent == 2.0,
            _ => true,
        }
    }

    pub fn eval(&self, x: &[f64; 3], f: &Mat3) -> f64 {
        match self {
            ElasticDensity::PowerLaw { weight, exponent, .. } => {
                weight * f.norm().powf(*exponent)
            }
            _ => self.weights().expect("quadratic catalog").eval(x) * f.norm_sq(),
        }
    }

    /// `∂W/∂F`.
    pub fn grad(&self, x: &[f64; 3], f: &Mat3) -> Mat3 {
        match self {
            ElasticDensity::PowerLaw { weight, exponent, .. } => {
                let n = f.norm();
                if n == 0.0 {
                    return Mat3::zeros();
                }
                f.scale(weight * exponent * n.powf(exponent - 2.0))
            }
            _ => f.scale(2.0 * self.weights().expect("quadratic catalog").eval(x)),
        }
    }

    /// Declared constants; derived for the quadratic catalog.
    pub fn growth(&self) -> GrowthConstants {
        match self {
            ElasticDensity::PowerLaw { growth, .. } => *growth,
            _ => {
                let w = self.weights().expect("quadratic catalog");
                GrowthConstants {
                    c1: w.min(),
                    c2: w.max() + 1.0,
                    c3: w.max(),
                }
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            ElasticDensity::PowerLaw { weight, exponent, growth } => {
                if !(*weight > 0.0 && *exponent > 0.0) {
                    return Err(Error::InvalidInput(
                        "power-law weight and exponent must be positive".into(),
                    ));
                }
                if !(growth.c1 > 0.0 && growth.c1 <= growth.c2 && growth.c3 > 0.0) {
                    return Err(Error::InvalidInput(
                        "declared growth constants need 0 < c1 <= c2 and c3 > 0".into(),
                    ));
                }
                Ok(())
            }
            _ => self.weights().expect("quadratic catalog").validate(),
        }
    }
}

/// Hardening density `H(x, P)`, finite exactly on K.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HardeningDensity {
    /// `a(x) |P - I|^2` on K.
    QuadraticDistanceToIdentity { weights: WeightField },
}

impl HardeningDensity {
    pub fn weights(&self) -> &WeightField {
        match self {
            HardeningDensity::QuadraticDistanceToIdentity { weights } => weights,
        }
    }

    /// Value ignoring the effective-domain restriction.
    pub fn eval_unchecked(&self, x: &[f64; 3], p: &Mat3) -> f64 {
        self.weights().eval(x) * (*p - Mat3::identity()).norm_sq()
    }
}

fn default_norm() -> MinkowskiNorm {
    MinkowskiNorm::Frobenius
}

/// The integrand triple `(W, H, q)` together with the hardening domain K.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaterialModel {
    #[serde(rename = "W")]
    pub elastic: ElasticDensity,
    #[serde(rename = "H")]
    pub hardening: HardeningDensity,
    pub q: f64,
    #[serde(rename = "K_radius", default = "default_k_radius")]
    pub k_radius: f64,
    #[serde(default = "default_norm")]
    pub norm: MinkowskiNorm,
}

fn default_k_radius() -> f64 {
    0.5
}

impl MaterialModel {
    pub fn new(elastic: ElasticDensity, hardening: HardeningDensity, q: f64, k_radius: f64) -> Result<Self> {
        let model = Self {
            elastic,
            hardening,
            q,
            k_radius,
            norm: MinkowskiNorm::Frobenius,
        };
        model.validate()?;
        Ok(model)
    }

    /// Quadratic elastic density and unit-weight hardening, `q = 4`, `r = 0.5`.
    pub fn quadratic(elastic_weights: WeightField, hardening_weights: WeightField) -> Result<Self> {
        let elastic = match elastic_weights {
            WeightField::Homogeneous { weight } => ElasticDensity::HomogeneousQuadratic { weight },
            WeightField::TwoPhaseLaminate { a, b, axis, fraction } => {
                ElasticDensity::TwoPhaseLaminate { a, b, axis, fraction }
            }
            WeightField::Checkerboard { a, b } => ElasticDensity::Checkerboard { a, b },
        };
        Self::new(
            elastic,
            HardeningDensity::QuadraticDistanceToIdentity {
                weights: hardening_weights,
            },
            4.0,
            0.5,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.q > 3.0 && self.q.is_finite()) {
            return Err(Error::InvalidInput(format!("q must exceed 3, got {}", self.q)));
        }
        if !(self.k_radius > 0.0 && self.k_radius.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "K_radius must be positive, got {}",
                self.k_radius
            )));
        }
        self.norm.validate()?;
        self.elastic.validate()?;
        self.hardening.weights().validate()
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let model: MaterialModel = serde_json::from_str(s)?;
        model.validate()?;
        Ok(model)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    /// `W(frac(x), F)`.
    pub fn eval_w(&self, x: &[f64; 3], f: &Mat3) -> f64 {
        self.elastic.eval(x, f)
    }

    /// Whether `D_sym(I, P) <= K_radius`.
    pub fn in_k(&self, p: &SL3Element) -> bool {
        distance_to_identity_within(&self.norm, p, self.k_radius).unwrap_or(false)
    }

    /// `H(frac(x), P)`; `f64::INFINITY` outside K.
    pub fn eval_h(&self, x: &[f64; 3], p: &SL3Element) -> f64 {
        if !self.in_k(p) {
            return f64::INFINITY;
        }
        self.hardening.eval_unchecked(x, p.value())
    }

    /// Bound on `|A|` for left-trivialized velocities reaching K.
    fn velocity_radius(&self) -> f64 {
        self.k_radius / self.norm.bounds().0
    }

    /// Bound on the operator norm of `P` and `P^{-1}` over K.
    pub fn p_op_bound(&self) -> f64 {
        self.velocity_radius().exp()
    }

    /// `sup_K |P - I|`. With `P = e^{A^T} e^{A - A^T}` and `|A| <= R`,
    /// `|P - I| <= (e^R - 1) + |A - A^T| <= e^R - 1 + 2R`.
    pub fn k_deviation_bound(&self) -> f64 {
        let r = self.velocity_radius();
        r.exp() - 1.0 + 2.0 * r
    }

    /// `c_K` with `|P| + |P^{-1}| <= c_K` on K (Frobenius norms).
    pub fn c_k(&self) -> f64 {
        2.0 * 3f64.sqrt() * self.p_op_bound()
    }

    /// Upper bound of `H` on K.
    pub fn hardening_max(&self) -> f64 {
        self.hardening.weights().max() * self.k_deviation_bound().powi(2)
    }

    /// Lipschitz constant of `H(x, ·)` on K, uniform in `x`.
    pub fn hardening_lipschitz(&self) -> f64 {
        2.0 * self.hardening.weights().max() * self.k_deviation_bound()
    }
}

/// Worst observed constants from a Monte-Carlo check of the hypotheses.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ValidationReport {
    pub samples: usize,
    pub declared: GrowthConstants,
    pub declared_h_lipschitz: f64,
    /// `min W / |F|^2`.
    pub observed_c1: f64,
    /// `max W / (|F|^2 + 1)`.
    pub observed_c2: f64,
    /// `max |W1 - W2| / ((1 + |F1| + |F2|)|F1 - F2|)`.
    pub observed_c3: f64,
    pub observed_h_lipschitz: f64,
}

const VALIDATION_SLACK: f64 = 1e-9;
const SAMPLE_SCALES: [f64; 5] = [0.05, 0.5, 1.0, 3.0, 10.0];

fn random_matrix<R: Rng + ?Sized>(rng: &mut R, scale: f64) -> Mat3 {
    let mut m = Mat3::zeros();
    for i in 0..3 {
        for j in 0..3 {
            m.m[i][j] = rng.gen_range(-1.0..1.0);
        }
    }
    let n = m.norm();
    m.scale(scale / n)
}

fn witness(x: &[f64; 3], f1: &Mat3, f2: &Mat3) -> String {
    format!(
        "x = {:?}, F1 = {:?}, F2 = {:?}",
        x,
        f1.to_row_vec(),
        f2.to_row_vec()
    )
}

/// Samples `(x, F1, F2)` triples and checks growth (lower/upper), the
/// Lipschitz bound of `W`, and the Lipschitz bound of `H` on K.
pub fn validate_assumptions<R: Rng + ?Sized>(
    model: &MaterialModel,
    samples: usize,
    rng: &mut R,
) -> Result<ValidationReport> {
    if samples == 0 {
        return Err(Error::InvalidInput("validation needs at least one sample".into()));
    }
    let declared = model.elastic.growth();
    let declared_h = model.hardening_lipschitz();
    let mut c1 = f64::INFINITY;
    let mut c2: f64 = 0.0;
    let mut c3: f64 = 0.0;
    let mut h_lip: f64 = 0.0;
    for k in 0..samples {
        let x = [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
        let scale = SAMPLE_SCALES[k % SAMPLE_SCALES.len()];
        let f1 = random_matrix(rng, scale);
        let step = scale * rng.gen_range(0.01..1.0);
        let f2 = f1 + random_matrix(rng, step);
        let (n1, n2) = (f1.norm(), f2.norm());
        let (w1, w2) = (model.eval_w(&x, &f1), model.eval_w(&x, &f2));

        let lower = w1 / (n1 * n1);
        c1 = c1.min(lower);
        if lower < declared.c1 * (1.0 - VALIDATION_SLACK) {
            return Err(Error::AssumptionViolated {
                inequality: "elastic lower bound c1|F|^2 <= W".into(),
                witness: witness(&x, &f1, &f2),
            });
        }
        let upper = w1 / (n1 * n1 + 1.0);
        c2 = c2.max(upper);
        if upper > declared.c2 * (1.0 + VALIDATION_SLACK) {
            return Err(Error::AssumptionViolated {
                inequality: "elastic upper bound W <= c2(|F|^2 + 1)".into(),
                witness: witness(&x, &f1, &f2),
            });
        }
        let lip = (w1 - w2).abs() / ((1.0 + n1 + n2) * (f1 - f2).norm());
        c3 = c3.max(lip);
        if lip > declared.c3 * (1.0 + VALIDATION_SLACK) {
            return Err(Error::AssumptionViolated {
                inequality: "elastic continuity |W(F1) - W(F2)| <= c3(1 + |F1| + |F2|)|F1 - F2|".into(),
                witness: witness(&x, &f1, &f2),
            });
        }

        let p1 = sample_in_k(rng, &model.norm, model.k_radius);
        let p2 = sample_in_k(rng, &model.norm, model.k_radius);
        let dp = (*p1.value() - *p2.value()).norm();
        if dp > 0.0 {
            let hl = (model.eval_h(&x, &p1) - model.eval_h(&x, &p2)).abs() / dp;
            h_lip = h_lip.max(hl);
            if !(hl <= declared_h * (1.0 + VALIDATION_SLACK)) {
                return Err(Error::AssumptionViolated {
                    inequality: "hardening Lipschitz continuity on K".into(),
                    witness: witness(&x, p1.value(), p2.value()),
                });
            }
        }
    }
    Ok(ValidationReport {
        samples,
        declared,
        declared_h_lipschitz: declared_h,
        observed_c1: c1,
        observed_c2: c2,
        observed_c3: c3,
        observed_h_lipschitz: h_lip,
    })
}
