//! Cell problems for the homogenized densities
//! `W_hom(F, G) = lim (1/λ^d) inf { ∫_{(0,λ)^d} W(x, (F + ∇y) G⁻¹) : y = 0 on the boundary }`
//! and `H_hom(F) = ∫_Q H(z, F) dz`.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::energy::{CellPlastic, Functional, Integrand};
use crate::error::{Error, Result};
use crate::grid::{DofMap, GridDomain, GridField};
use crate::materials::MaterialModel;
use crate::optim::{minimize, OptimizerConfig};
use crate::{Mat3, SL3Element};

/// Boundary condition of the cell fluctuation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fluctuation {
    /// Zero boundary values, as in the defining formula.
    #[default]
    Dirichlet,
    /// Periodic fluctuations; an extension for convergence comparison.
    Periodic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CellProblemConfig {
    pub dim: usize,
    pub lambdas: Vec<f64>,
    /// Cells per unit length.
    pub resolution: usize,
    pub fluctuation: Fluctuation,
    pub optimizer: OptimizerConfig,
}

impl Default for CellProblemConfig {
    fn default() -> Self {
        Self {
            dim: 2,
            lambdas: vec![1.0, 2.0, 4.0, 8.0],
            resolution: 8,
            fluctuation: Fluctuation::Dirichlet,
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl CellProblemConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.dim) {
            return Err(Error::InvalidInput(format!("dim must be 1, 2 or 3, got {}", self.dim)));
        }
        if self.resolution < 8 {
            return Err(Error::InvalidInput(format!(
                "resolution must be >= 8, got {}",
                self.resolution
            )));
        }
        if self.lambdas.is_empty() {
            return Err(Error::InvalidInput("lambda ladder is empty".into()));
        }
        if self.lambdas.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidInput("lambda ladder must be strictly increasing".into()));
        }
        for &l in &self.lambdas {
            self.cells_for(l)?;
        }
        Ok(())
    }

    fn cells_for(&self, lambda: f64) -> Result<usize> {
        let c = lambda * self.resolution as f64;
        if !(lambda > 0.0) || (c - c.round()).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!(
                "lambda {lambda} times resolution {} is not a whole number of cells",
                self.resolution
            )));
        }
        Ok(c.round() as usize)
    }
}

/// Minimizer of one cell problem.
#[derive(Clone, Debug)]
pub struct CellSolution {
    pub lambda: f64,
    /// `(1/λ^d) · min`.
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
    pub domain: GridDomain,
    pub fluctuation: GridField,
}

/// Solves the cell problem on `(0, λ)^d` with the cell plastic value fixed
/// to `G`; reports non-convergence in the flag.
pub fn solve_cell<I: Integrand + ?Sized>(
    integrand: &I,
    f: &Mat3,
    g: &SL3Element,
    lambda: f64,
    config: &CellProblemConfig,
) -> Result<CellSolution> {
    config.validate()?;
    let cells = config.cells_for(lambda)?;
    let domain = GridDomain::cube(config.dim, lambda, cells)?;
    let functional = Functional::fluctuation(integrand, &domain, 1.0, *f)?;
    let cp = vec![CellPlastic::from_element(g); functional.active_cells().len()];
    let d = config.dim;
    let dofs = match config.fluctuation {
        Fluctuation::Dirichlet => DofMap::dirichlet(&domain, d),
        Fluctuation::Periodic => DofMap::periodic(&domain, d),
    };
    let zero = GridField::zeros(&domain, d);
    let r = minimize(
        |x| {
            let y = dofs.expand(x, &zero);
            let (e, grad) = functional.elastic_with_grad(&y, &cp);
            (e, dofs.reduce(&grad))
        },
        vec![0.0; dofs.n_dofs()],
        &config.optimizer,
    );
    let scale = lambda.powi(d as i32);
    let fluctuation = dofs.expand(&r.x, &zero);
    log::debug!(
        "cell lambda={lambda} cells={cells} value={} iterations={} converged={}",
        r.value / scale,
        r.iterations,
        r.converged
    );
    Ok(CellSolution {
        lambda,
        value: r.value / scale,
        iterations: r.iterations,
        converged: r.converged,
        domain,
        fluctuation,
    })
}

fn check_g(model: &MaterialModel, g: &SL3Element) -> Result<()> {
    if model.in_k(g) {
        Ok(())
    } else {
        Err(Error::OutsideK {
            distance: crate::finsler::sym_distance(&model.norm, &SL3Element::identity(), g)
                .unwrap_or(f64::INFINITY),
            radius: model.k_radius,
        })
    }
}

/// `(1/λ^d) inf ∫ W(x, (F + ∇y) G⁻¹)` at one cell size.
pub fn whom_cell(
    model: &MaterialModel,
    f: &Mat3,
    g: &SL3Element,
    lambda: f64,
    config: &CellProblemConfig,
) -> Result<f64> {
    check_g(model, g)?;
    let s = solve_cell(model, f, g, lambda, config)?;
    if !s.converged {
        return Err(Error::NoConvergence {
            iterations: s.iterations,
            residual: f64::NAN,
        });
    }
    Ok(s.value)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RungResult {
    pub lambda: f64,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WhomResult {
    pub f: Mat3,
    pub g: Mat3,
    pub rungs: Vec<RungResult>,
    /// Value at the largest λ.
    pub value: f64,
    /// Relative change between the last two rungs; 0 for a single rung.
    pub spread: f64,
    #[serde(skip)]
    pub minimizer: Option<(GridDomain, GridField)>,
}

impl WhomResult {
    pub fn converged(&self) -> bool {
        self.rungs.iter().all(|r| r.converged)
    }

    pub fn ensure_converged(&self) -> Result<()> {
        match self.rungs.iter().find(|r| !r.converged) {
            Some(r) => Err(Error::NoConvergence {
                iterations: r.iterations,
                residual: f64::NAN,
            }),
            None => Ok(()),
        }
    }

    /// CSV header matching [`WhomResult::csv_rows`].
    pub fn csv_header() -> Vec<String> {
        let mut h = Vec::new();
        for p in ["F", "G"] {
            for i in 1..=3 {
                for j in 1..=3 {
                    h.push(format!("{p}{i}{j}"));
                }
            }
        }
        h.extend(["lambda", "value", "iterations", "converged"].map(String::from));
        h
    }

    pub fn csv_rows(&self) -> Vec<Vec<String>> {
        self.rungs
            .iter()
            .map(|r| {
                let mut row: Vec<String> = self
                    .f
                    .to_row_vec()
                    .into_iter()
                    .chain(self.g.to_row_vec())
                    .map(|v| format!("{v:e}"))
                    .collect();
                row.push(format!("{}", r.lambda));
                row.push(format!("{:e}", r.value));
                row.push(r.iterations.to_string());
                row.push(r.converged.to_string());
                row
            })
            .collect()
    }

    /// Appends the rungs to a CSV file, writing the header for a new file.
    pub fn append_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let exists = path.exists() && std::fs::metadata(path)?.len() > 0;
        let file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        let mut w = csv::Writer::from_writer(file);
        if !exists {
            w.write_record(Self::csv_header())?;
        }
        for row in self.csv_rows() {
            w.write_record(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs the λ ladder in parallel.
pub fn whom(model: &MaterialModel, f: &Mat3, g: &SL3Element, config: &CellProblemConfig) -> Result<WhomResult> {
    check_g(model, g)?;
    config.validate()?;
    let mut sols = config
        .lambdas
        .par_iter()
        .map(|&l| solve_cell(model, f, g, l, config))
        .collect::<Result<Vec<_>>>()?;
    let rungs: Vec<RungResult> = sols
        .iter()
        .map(|s| RungResult {
            lambda: s.lambda,
            value: s.value,
            iterations: s.iterations,
            converged: s.converged,
        })
        .collect();
    let value = rungs.last().expect("non-empty ladder").value;
    let spread = if rungs.len() >= 2 {
        let prev = rungs[rungs.len() - 2].value;
        (value - prev).abs() / value.abs().max(f64::MIN_POSITIVE)
    } else {
        0.0
    };
    let last = sols.pop().expect("non-empty ladder");
    Ok(WhomResult {
        f: *f,
        g: *g.value(),
        rungs,
        value,
        spread,
        minimizer: Some((last.domain, last.fluctuation)),
    })
}

/// `∫_Q H(z, F) dz` by cell-center quadrature with `resolution` cells per axis.
pub fn hhom(model: &MaterialModel, f: &SL3Element, resolution: usize) -> Result<f64> {
    check_g(model, f)?;
    if resolution == 0 {
        return Err(Error::InvalidInput("resolution must be positive".into()));
    }
    let n = resolution;
    let h = 1.0 / n as f64;
    let dist = (*f.value() - Mat3::identity()).norm_sq();
    let w = model.hardening.weights();
    let parts: Vec<f64> = (0..n * n)
        .into_par_iter()
        .map(|ij| {
            let (i, j) = (ij / n, ij % n);
            (0..n)
                .map(|k| w.eval(&[(i as f64 + 0.5) * h, (j as f64 + 0.5) * h, (k as f64 + 0.5) * h]))
                .sum::<f64>()
        })
        .collect();
    Ok(crate::grid::pairwise_sum(&parts) * dist / (n * n * n) as f64)
}
