//! Desk-scale Γ-convergence experiments: minimize `F_ε` along an ε ladder and
//! compare the minimum values with the minimum of the homogenized functional.
//!
//! Only minimum values are compared. Γ-convergence is not directly computable;
//! convergence of minima under a coercive model is its observable shadow.

use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cell::{solve_cell, CellProblemConfig, Fluctuation};
use crate::energy::{kuhn_simplices, sobolev_seminorms, CellPlastic, EnergyBreakdown, Functional, Integrand, Step};
use crate::error::{Error, Result};
use crate::finsler::{exp_map, log_map};
use crate::grid::{pairwise_sum, DofMap, GridDomain, GridField, PlasticField};
use crate::materials::MaterialModel;
use crate::optim::{minimize, OptimizerConfig};
use crate::tensor::{mat_exp, mat_log, retract_sl3, DetPolicy};
use crate::{Mat3, SL3Element};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlasticMode {
    /// `P ≡ P_bc` everywhere.
    #[default]
    Fixed,
    /// `P = P_bc` on boundary nodes, free inside.
    Clamped,
    Free,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlasticBc {
    pub mode: PlasticMode,
    pub p_bc: [[f64; 3]; 3],
}

impl Default for PlasticBc {
    fn default() -> Self {
        Self {
            mode: PlasticMode::Fixed,
            p_bc: Mat3::identity().m,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TableConfig {
    /// Nodes per non-degenerate table axis.
    pub nodes_per_axis: usize,
    /// Relative margin around the boundary data.
    pub margin: f64,
    /// Cells per period of the cell problems.
    pub resolution: usize,
}

impl Default for TableConfig {
    fn default() -> Self {
        Self {
            nodes_per_axis: 3,
            margin: 0.5,
            resolution: 8,
        }
    }
}

fn default_model() -> MaterialModel {
    MaterialModel::quadratic(
        crate::materials::WeightField::Homogeneous { weight: 1.0 },
        crate::materials::WeightField::Homogeneous { weight: 1.0 },
    )
    .expect("homogeneous model is valid")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub model: MaterialModel,
    pub dim: usize,
    pub origin: Vec<f64>,
    pub extent: Vec<f64>,
    /// Affine boundary map `y = F_bc x + b_bc`.
    pub f_bc: [[f64; 3]; 3],
    pub b_bc: [f64; 3],
    pub plastic: PlasticBc,
    pub eps_ladder: Vec<f64>,
    pub cells_per_period: usize,
    /// Cells per axis for the homogenized problem; defaults to the finest ladder grid.
    pub hom_resolution: Option<usize>,
    pub seed: u64,
    /// Alternating minimization stops below this relative decrease.
    pub tolerance: f64,
    pub max_outer: usize,
    pub p_steps: usize,
    pub optimizer: OptimizerConfig,
    pub table: TableConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: default_model(),
            dim: 2,
            origin: vec![0.0; 2],
            extent: vec![1.0; 2],
            f_bc: Mat3::identity().m,
            b_bc: [0.0; 3],
            plastic: PlasticBc::default(),
            eps_ladder: vec![0.5, 0.25, 0.125, 0.0625],
            cells_per_period: 8,
            hom_resolution: None,
            seed: 0,
            tolerance: 1e-8,
            max_outer: 100,
            p_steps: 20,
            optimizer: OptimizerConfig::default(),
            table: TableConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn f_bc(&self) -> Mat3 {
        Mat3::new(self.f_bc)
    }

    pub fn p_bc(&self) -> Result<SL3Element> {
        SL3Element::new(Mat3::new(self.plastic.p_bc), DetPolicy::Retract)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(1..=3).contains(&self.dim) || self.origin.len() != self.dim || self.extent.len() != self.dim {
            return Err(Error::InvalidInput(format!(
                "dim {} needs origin and extent of that length",
                self.dim
            )));
        }
        if self.eps_ladder.is_empty() {
            return Err(Error::InvalidInput("eps ladder is empty".into()));
        }
        if self.cells_per_period < 8 {
            return Err(Error::InvalidInput(format!(
                "cells_per_period must be >= 8, got {}",
                self.cells_per_period
            )));
        }
        for &eps in &self.eps_ladder {
            self.cells_for(eps)?;
        }
        if !self.f_bc().is_finite() || self.b_bc.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("boundary data must be finite".into()));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::InvalidInput("tolerance must be positive".into()));
        }
        if self.table.nodes_per_axis < 2 || self.table.resolution < 8 || !(self.table.margin >= 0.0) {
            return Err(Error::InvalidInput(
                "table needs nodes_per_axis >= 2, resolution >= 8 and a non-negative margin".into(),
            ));
        }
        let p = self.p_bc()?;
        if !self.model.in_k(&p) {
            return Err(Error::OutsideK {
                distance: crate::finsler::sym_distance(&self.model.norm, &SL3Element::identity(), &p)
                    .unwrap_or(f64::INFINITY),
                radius: self.model.k_radius,
            });
        }
        Ok(())
    }

    /// Cells per axis at period `eps`; errors unless every extent holds a
    /// whole number of periods.
    pub fn cells_for(&self, eps: f64) -> Result<Vec<usize>> {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::EpsNonPositive(eps));
        }
        self.extent
            .iter()
            .map(|&e| {
                let periods = e / eps;
                if (periods - periods.round()).abs() > 1e-9 * periods.max(1.0) || periods.round() < 1.0 {
                    return Err(Error::InvalidInput(format!(
                        "eps {eps} does not divide the extent {e} a whole number of times"
                    )));
                }
                Ok(periods.round() as usize * self.cells_per_period)
            })
            .collect()
    }

    pub fn domain_for(&self, eps: f64) -> Result<GridDomain> {
        GridDomain::new(self.origin.clone(), self.extent.clone(), self.cells_for(eps)?)
    }

    fn hom_domain(&self) -> Result<GridDomain> {
        match self.hom_resolution {
            Some(n) => GridDomain::new(self.origin.clone(), self.extent.clone(), vec![n; self.dim]),
            None => {
                let finest = self.eps_ladder.iter().cloned().fold(f64::INFINITY, f64::min);
                self.domain_for(finest)
            }
        }
    }
}

/// Fields and value of an (approximate) minimizer.
#[derive(Clone, Debug)]
pub struct MinimizeOutcome {
    pub domain: GridDomain,
    pub y: GridField,
    pub p: PlasticField,
    pub breakdown: EnergyBreakdown,
    pub value: f64,
    pub iterations: usize,
    pub outer_iterations: usize,
    pub converged: bool,
}

impl MinimizeOutcome {
    pub fn ensure_converged(&self) -> Result<()> {
        if self.converged {
            Ok(())
        } else {
            Err(Error::NoConvergence {
                iterations: self.iterations,
                residual: f64::NAN,
            })
        }
    }
}

/// Basis of the tangent directions used for plastic updates.
fn sl_basis(dim: usize) -> Vec<Mat3> {
    let e = Mat3::unit;
    if dim >= 3 {
        vec![
            e(0, 0) - e(2, 2),
            e(1, 1) - e(2, 2),
            e(0, 1),
            e(0, 2),
            e(1, 0),
            e(1, 2),
            e(2, 0),
            e(2, 1),
        ]
    } else if dim == 2 {
        vec![e(0, 0) - e(1, 1), e(0, 1), e(1, 0)]
    } else {
        vec![e(0, 0) - e(1, 1)]
    }
}

/// Nearest point of K along the geodesic from the identity, at `0.999 r`.
fn project_to_k(model: &MaterialModel, p: &SL3Element) -> Result<SL3Element> {
    if model.in_k(p) {
        return Ok(*p);
    }
    let id = SL3Element::identity();
    let m = log_map(&model.norm, &id, p)?;
    let len = model.norm.delta_i_projected(&m);
    exp_map(&model.norm, &id, &m.scale(0.999 * model.k_radius / len))
}

struct Problem<'a, I: Integrand + ?Sized> {
    integrand: &'a I,
    model: &'a MaterialModel,
    functional: Functional<'a, I>,
    domain: &'a GridDomain,
    simplices: Vec<Vec<Step>>,
}

impl<I: Integrand + ?Sized> Problem<'_, I> {
    /// Energy of the cells around `node` with `P(node)` replaced by `pn`,
    /// hardening taken without the K constraint.
    fn local_energy(&self, node: usize, pn: &SL3Element, y: &GridField, p: &[SL3Element]) -> Result<f64> {
        let d = self.domain.dim();
        let nc = self.domain.n_corners();
        let m = self.domain.node_multi(node);
        let mut total = 0.0;
        for s in 0..(1usize << d) {
            let mut cm = [0usize; 3];
            let mut ok = true;
            for a in 0..d {
                let off = (s >> a) & 1;
                if m[a] < off || m[a] - off >= self.domain.cells()[a] {
                    ok = false;
                    break;
                }
                cm[a] = m[a] - off;
            }
            if !ok {
                continue;
            }
            let c = self.domain.cell_index(&cm[..d]);
            if !self.domain.cell_active(c) {
                continue;
            }
            let corners = self.domain.cell_corners(c);
            let local: Vec<Mat3> = corners[..nc]
                .iter()
                .map(|&k| if k == node { *pn.value() } else { *p[k].value() })
                .collect();
            let mut mean = Mat3::zeros();
            for v in &local {
                mean += *v;
            }
            let cp = CellPlastic::from_element(&retract_sl3(&mean.scale(1.0 / nc as f64))?);
            let z = self.functional.z(c);
            let vol = self.domain.cell_volume();
            let hard: f64 = local.iter().map(|v| self.integrand.hardening(&z, v)).sum::<f64>() * vol / nc as f64;
            let svol = vol / self.simplices.len() as f64;
            let half_q = 0.5 * self.integrand.q();
            let reg: f64 = self
                .simplices
                .iter()
                .map(|steps| {
                    let sq: f64 = steps
                        .iter()
                        .map(|st| (local[st.to] - local[st.from]).norm_sq() / self.domain.spacing(st.axis).powi(2))
                        .sum();
                    svol * sq.powf(half_q)
                })
                .sum();
            total += self.functional.cell_elastic(c, y, &cp) + hard + reg;
        }
        Ok(total)
    }

    fn total(&self, y: &GridField, p: &PlasticField) -> Result<EnergyBreakdown> {
        self.functional.breakdown(y, p)
    }

    /// Minimizes in `y` with the boundary values of `y` held fixed.
    fn y_step(&self, y: &GridField, p: &PlasticField, cfg: &OptimizerConfig) -> Result<(GridField, usize, bool)> {
        let d = self.domain.dim();
        let dofs = DofMap::dirichlet(self.domain, d);
        let cp = self.functional.cell_plastic(p)?;
        let r = minimize(
            |x| {
                let yy = dofs.expand(x, y);
                let (e, g) = self.functional.elastic_with_grad(&yy, &cp);
                (e, dofs.reduce(&g))
            },
            dofs.restrict(y),
            cfg,
        );
        Ok((dofs.expand(&r.x, y), r.iterations, r.converged))
    }

    /// Projected gradient steps in the chart `P exp(V)` on the free nodes.
    fn p_step(
        &self,
        y: &GridField,
        p: &PlasticField,
        free: &[usize],
        steps: usize,
        tol: f64,
        alpha: &mut f64,
    ) -> Result<(PlasticField, usize)> {
        let basis = sl_basis(self.domain.dim());
        let mut p = p.clone();
        let mut e = self.total(y, &p)?.total;
        let mut taken = 0;
        for _ in 0..steps {
            let h = 1e-6;
            let grads = free
                .par_iter()
                .map(|&n| {
                    basis
                        .iter()
                        .map(|b| {
                            let plus = retract_sl3(&(*p.nodes[n].value() * mat_exp(&b.scale(h))))?;
                            let minus = retract_sl3(&(*p.nodes[n].value() * mat_exp(&b.scale(-h))))?;
                            Ok((self.local_energy(n, &plus, y, &p.nodes)? - self.local_energy(n, &minus, y, &p.nodes)?)
                                / (2.0 * h))
                        })
                        .collect::<Result<Vec<f64>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            let gsq: f64 = grads.iter().flatten().map(|g| g * g).sum();
            if gsq == 0.0 {
                break;
            }
            let mut accepted = None;
            let mut a = *alpha;
            for _ in 0..50 {
                let mut trial = p.clone();
                for (&n, g) in free.iter().zip(&grads) {
                    let mut v = Mat3::zeros();
                    for (b, gi) in basis.iter().zip(g) {
                        v += b.scale(-a * gi);
                    }
                    trial.nodes[n] = project_to_k(self.model, &retract_sl3(&(*p.nodes[n].value() * mat_exp(&v)))?)?;
                }
                let et = self.total(y, &trial)?.total;
                if et.is_finite() && et <= e - 1e-4 * a * gsq {
                    accepted = Some((trial, et));
                    break;
                }
                a *= 0.5;
            }
            let Some((trial, et)) = accepted else { break };
            taken += 1;
            *alpha = a * 2.0;
            let decrease = e - et;
            p = trial;
            e = et;
            if decrease <= tol * e.abs().max(1e-300) {
                break;
            }
        }
        Ok((p, taken))
    }
}

fn boundary_values(domain: &GridDomain, f: &Mat3, b: &[f64; 3]) -> GridField {
    GridField::affine(domain, f, b)
}

/// Alternating minimization of a functional with affine Dirichlet data on `y`.
#[allow(clippy::too_many_arguments)]
pub fn minimize_functional<I: Integrand + ?Sized>(
    integrand: &I,
    model: &MaterialModel,
    domain: &GridDomain,
    eps: f64,
    config: &ExperimentConfig,
) -> Result<MinimizeOutcome> {
    let functional = Functional::new(integrand, domain, eps)?;
    let problem = Problem {
        integrand,
        model,
        functional,
        domain,
        simplices: kuhn_simplices(domain.dim()),
    };
    let p_bc = config.p_bc()?;
    let mut p = PlasticField::constant(domain, p_bc);
    let mut y = boundary_values(domain, &config.f_bc(), &config.b_bc);
    let d = domain.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let h = (0..d).map(|a| domain.spacing(a)).fold(f64::INFINITY, f64::min);
    for k in 0..domain.n_nodes() {
        if !domain.is_boundary_node(k) {
            for v in y.node_mut(k) {
                *v += 1e-3 * h * rng.gen_range(-1.0..1.0);
            }
        }
    }
    let free: Vec<usize> = match config.plastic.mode {
        PlasticMode::Fixed => Vec::new(),
        PlasticMode::Clamped => (0..domain.n_nodes()).filter(|&k| !domain.is_boundary_node(k)).collect(),
        PlasticMode::Free => (0..domain.n_nodes()).collect(),
    };

    let mut iterations = 0;
    let mut outer = 0;
    let mut converged = false;
    let mut alpha = 1.0;
    let mut prev = f64::INFINITY;
    while outer < config.max_outer {
        outer += 1;
        let (ny, it, ok) = problem.y_step(&y, &p, &config.optimizer)?;
        y = ny;
        iterations += it;
        if free.is_empty() {
            converged = ok;
            break;
        }
        let (np, taken) = problem.p_step(&y, &p, &free, config.p_steps, config.tolerance, &mut alpha)?;
        p = np;
        iterations += taken;
        let e = problem.total(&y, &p)?.total;
        if prev.is_finite() && prev - e <= config.tolerance * e.abs().max(1e-300) && ok {
            converged = true;
            break;
        }
        prev = e;
    }
    let breakdown = problem.total(&y, &p)?;
    if !converged {
        log::warn!("alternating minimization stopped after {outer} outer iterations without convergence");
    }
    Ok(MinimizeOutcome {
        domain: domain.clone(),
        y,
        p,
        value: breakdown.total,
        breakdown,
        iterations,
        outer_iterations: outer,
        converged,
    })
}

/// Minimizes `F_ε` at one period `eps` of the ladder.
pub fn minimize_feps(config: &ExperimentConfig, eps: f64) -> Result<MinimizeOutcome> {
    config.validate()?;
    let domain = config.domain_for(eps)?;
    minimize_functional(&config.model, &config.model, &domain, eps, config)
}

/// Coordinates of `log G` in the basis `E00 - E11`, `E00 + E11 - 2 E22`,
/// and the off-diagonal units `E01, E02, E10, E12, E20, E21`. In 2D the
/// in-plane directions are coordinates 0, 2 and 4.
fn log_coords(g: &Mat3) -> Result<[f64; 8]> {
    let x = mat_log(g)?;
    Ok([
        0.5 * (x.m[0][0] - x.m[1][1]),
        -0.5 * x.m[2][2],
        x.m[0][1],
        x.m[0][2],
        x.m[1][0],
        x.m[1][2],
        x.m[2][0],
        x.m[2][1],
    ])
}

fn from_log_coords(c: &[f64; 8]) -> Result<SL3Element> {
    let x = Mat3::new([
        [c[0] + c[1], c[2], c[3]],
        [c[4], -c[0] + c[1], c[5]],
        [c[6], c[7], -2.0 * c[1]],
    ]);
    retract_sl3(&mat_exp(&x))
}

/// One table axis: `nodes` equally spaced points on `[lo, hi]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub nodes: usize,
}

impl Axis {
    fn point(&self, k: usize) -> f64 {
        if self.nodes == 1 {
            self.lo
        } else {
            self.lo + (self.hi - self.lo) * k as f64 / (self.nodes - 1) as f64
        }
    }

    /// Bracketing node, local coordinate and whether `v` was inside the range.
    fn locate(&self, v: f64) -> (usize, f64, bool) {
        let tol = 1e-9 * (1.0 + self.lo.abs().max(self.hi.abs()));
        let inside = v >= self.lo - tol && v <= self.hi + tol;
        if self.nodes == 1 {
            return (0, 0.0, inside);
        }
        let s = ((v - self.lo) / (self.hi - self.lo) * (self.nodes - 1) as f64).clamp(0.0, (self.nodes - 1) as f64);
        let k = (s.floor() as usize).min(self.nodes - 2);
        (k, s - k as f64, inside)
    }

    fn step(&self) -> f64 {
        if self.nodes == 1 {
            0.0
        } else {
            (self.hi - self.lo) / (self.nodes - 1) as f64
        }
    }
}

/// `W_hom(·, G)` at one G node, as a function of the active entries of F.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum FModel {
    /// `c + b·x + x^T A x / 2`, exact for quadratic densities.
    Quadratic { c: f64, b: Vec<f64>, a: Vec<Vec<f64>> },
    /// Values on the F grid, interpolated multilinearly.
    Grid { values: Vec<f64> },
}

/// Tabulated homogenized elastic density.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WhomTable {
    pub dim: usize,
    /// Base matrix: `F = base + Σ x_i E_{entry_i}`; 1 on unused diagonal entries.
    pub base: [[f64; 3]; 3],
    pub f_axes: Vec<Axis>,
    pub g_axes: Vec<Axis>,
    pub g_models: Vec<FModel>,
    pub cell_solves: usize,
}

fn active_entries(dim: usize) -> Vec<(usize, usize)> {
    (0..dim).flat_map(|i| (0..dim).map(move |j| (i, j))).collect()
}

fn multi_index(dims: &[usize], mut idx: usize) -> Vec<usize> {
    let mut out = vec![0; dims.len()];
    for a in (0..dims.len()).rev() {
        out[a] = idx % dims[a];
        idx /= dims[a];
    }
    out
}

fn flat_index(dims: &[usize], m: &[usize]) -> usize {
    m.iter().zip(dims).fold(0, |acc, (&k, &n)| acc * n + k)
}

impl WhomTable {
    /// Builds the table from periodic unit-cell problems over a box around
    /// the boundary data.
    pub fn build(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let dim = config.dim;
        let model = &config.model;
        let margin = config.table.margin;
        let nodes = config.table.nodes_per_axis;
        let f_bc = config.f_bc();
        let entries = active_entries(dim);
        let scale = entries.iter().map(|&(i, j)| f_bc.m[i][j].abs()).fold(1.0, f64::max);
        let f_axes: Vec<Axis> = entries
            .iter()
            .map(|&(i, j)| Axis {
                lo: f_bc.m[i][j] - margin * scale,
                hi: f_bc.m[i][j] + margin * scale,
                nodes,
            })
            .collect();
        let mut base = Mat3::zeros();
        for a in dim..3 {
            base.m[a][a] = 1.0;
        }

        let center = log_coords(&Mat3::new(config.plastic.p_bc))?;
        let in_plane: Vec<bool> = (0..8)
            .map(|k| match dim {
                3 => true,
                2 => matches!(k, 0 | 2 | 4),
                _ => false,
            })
            .collect();
        let half = (1.0 + margin) * model.k_radius / model.norm.bounds().0;
        let g_axes: Vec<Axis> = (0..8)
            .map(|k| match config.plastic.mode {
                PlasticMode::Fixed => Axis {
                    lo: center[k],
                    hi: center[k],
                    nodes: 1,
                },
                _ if in_plane[k] => Axis {
                    lo: -half,
                    hi: half,
                    nodes,
                },
                _ => Axis { lo: 0.0, hi: 0.0, nodes: 1 },
            })
            .collect();

        let cell_cfg = CellProblemConfig {
            dim,
            lambdas: vec![1.0],
            resolution: config.table.resolution,
            fluctuation: Fluctuation::Periodic,
            optimizer: config.optimizer.clone(),
        };
        let g_dims: Vec<usize> = g_axes.iter().map(|a| a.nodes).collect();
        let n_g: usize = g_dims.iter().product();
        let quadratic = model.elastic.is_quadratic();
        let f_dims: Vec<usize> = f_axes.iter().map(|a| a.nodes).collect();
        let n_f: usize = f_dims.iter().product();
        if !quadratic && n_f * n_g > 100_000 {
            return Err(Error::InvalidInput(format!(
                "homogenized table would need {} cell problems",
                n_f * n_g
            )));
        }

        let solve = |f: &Mat3, g: &SL3Element| -> Result<f64> {
            let s = solve_cell(model, f, g, 1.0, &cell_cfg)?;
            if !s.converged {
                return Err(Error::NoConvergence {
                    iterations: s.iterations,
                    residual: f64::NAN,
                });
            }
            Ok(s.value)
        };
        let m = entries.len();
        let with = |x: &[f64]| {
            let mut f = base;
            for (k, &(i, j)) in entries.iter().enumerate() {
                f.m[i][j] += x[k];
            }
            f
        };
        let g_models = (0..n_g)
            .into_par_iter()
            .map(|gi| {
                let gm = multi_index(&g_dims, gi);
                let mut c = [0.0; 8];
                for k in 0..8 {
                    c[k] = g_axes[k].point(gm[k]);
                }
                let g = from_log_coords(&c)?;
                if quadratic {
                    let unit = |k: usize, s: f64| {
                        let mut x = vec![0.0; m];
                        x[k] = s;
                        x
                    };
                    let c0 = solve(&with(&vec![0.0; m]), &g)?;
                    let plus: Vec<f64> = (0..m).map(|k| solve(&with(&unit(k, 1.0)), &g)).collect::<Result<_>>()?;
                    let minus: Vec<f64> = (0..m).map(|k| solve(&with(&unit(k, -1.0)), &g)).collect::<Result<_>>()?;
                    let mut a = vec![vec![0.0; m]; m];
                    let b: Vec<f64> = (0..m).map(|k| 0.5 * (plus[k] - minus[k])).collect();
                    for k in 0..m {
                        a[k][k] = plus[k] + minus[k] - 2.0 * c0;
                        for l in 0..k {
                            let mut x = vec![0.0; m];
                            x[k] = 1.0;
                            x[l] = 1.0;
                            let v = solve(&with(&x), &g)?;
                            a[k][l] = v - plus[k] - plus[l] + c0;
                            a[l][k] = a[k][l];
                        }
                    }
                    Ok(FModel::Quadratic { c: c0, b, a })
                } else {
                    let values = (0..n_f)
                        .map(|fi| {
                            let fm = multi_index(&f_dims, fi);
                            let x: Vec<f64> = (0..m).map(|k| f_axes[k].point(fm[k]) - base.m[entries[k].0][entries[k].1]).collect();
                            solve(&with(&x), &g)
                        })
                        .collect::<Result<Vec<f64>>>()?;
                    Ok(FModel::Grid { values })
                }
            })
            .collect::<Result<Vec<FModel>>>()?;
        let per_g = if quadratic { 1 + 2 * m + m * (m - 1) / 2 } else { n_f };
        Ok(Self {
            dim,
            base: base.m,
            f_axes,
            g_axes,
            g_models,
            cell_solves: per_g * n_g,
        })
    }

    fn f_offsets(&self, f: &Mat3) -> Vec<f64> {
        active_entries(self.dim)
            .iter()
            .map(|&(i, j)| f.m[i][j] - self.base[i][j])
            .collect()
    }

    fn eval_f_model(&self, model: &FModel, x: &[f64], f: &Mat3) -> (f64, Vec<f64>, bool) {
        match model {
            FModel::Quadratic { c, b, a } => {
                let m = x.len();
                let mut grad = b.clone();
                let mut v = *c;
                for k in 0..m {
                    let ax: f64 = (0..m).map(|l| a[k][l] * x[l]).sum();
                    grad[k] += ax;
                    v += b[k] * x[k] + 0.5 * x[k] * ax;
                }
                let inside = active_entries(self.dim)
                    .iter()
                    .zip(&self.f_axes)
                    .all(|(&(i, j), ax)| ax.locate(f.m[i][j]).2);
                (v, grad, inside)
            }
            FModel::Grid { values } => {
                let entries = active_entries(self.dim);
                let dims: Vec<usize> = self.f_axes.iter().map(|a| a.nodes).collect();
                let loc: Vec<(usize, f64, bool)> = entries
                    .iter()
                    .zip(&self.f_axes)
                    .map(|(&(i, j), ax)| ax.locate(f.m[i][j]))
                    .collect();
                let inside = loc.iter().all(|l| l.2);
                let m = entries.len();
                let mut v = 0.0;
                let mut grad = vec![0.0; m];
                for corner in 0..(1usize << m) {
                    let idx: Vec<usize> = (0..m).map(|k| loc[k].0 + ((corner >> k) & 1)).collect();
                    let val = values[flat_index(&dims, &idx)];
                    let w: Vec<f64> = (0..m)
                        .map(|k| if (corner >> k) & 1 == 1 { loc[k].1 } else { 1.0 - loc[k].1 })
                        .collect();
                    v += val * w.iter().product::<f64>();
                    for k in 0..m {
                        let dw = if (corner >> k) & 1 == 1 { 1.0 } else { -1.0 } / self.f_axes[k].step();
                        let others: f64 = (0..m).filter(|&l| l != k).map(|l| w[l]).product();
                        grad[k] += val * dw * others;
                    }
                }
                (v, grad, inside)
            }
        }
    }

    /// `W_hom(F, G)` and its derivative in F; the flag is false outside the table.
    pub fn eval(&self, f: &Mat3, g: &Mat3) -> Result<(f64, Mat3, bool)> {
        let c = log_coords(g)?;
        let dims: Vec<usize> = self.g_axes.iter().map(|a| a.nodes).collect();
        let loc: Vec<(usize, f64, bool)> = self.g_axes.iter().zip(&c).map(|(a, &v)| a.locate(v)).collect();
        let mut inside = loc.iter().all(|l| l.2);
        let varying: Vec<usize> = (0..8).filter(|&k| dims[k] > 1).collect();
        let x = self.f_offsets(f);
        let mut value = 0.0;
        let mut grad = vec![0.0; x.len()];
        for corner in 0..(1usize << varying.len()) {
            let mut idx: Vec<usize> = loc.iter().map(|l| l.0).collect();
            let mut w = 1.0;
            for (bit, &k) in varying.iter().enumerate() {
                if (corner >> bit) & 1 == 1 {
                    idx[k] += 1;
                    w *= loc[k].1;
                } else {
                    w *= 1.0 - loc[k].1;
                }
            }
            if w == 0.0 {
                continue;
            }
            let (v, gr, ok) = self.eval_f_model(&self.g_models[flat_index(&dims, &idx)], &x, f);
            inside &= ok;
            value += w * v;
            for (a, b) in grad.iter_mut().zip(&gr) {
                *a += w * b;
            }
        }
        let mut gm = Mat3::zeros();
        for (k, &(i, j)) in active_entries(self.dim).iter().enumerate() {
            gm.m[i][j] = grad[k];
        }
        Ok((value, gm, inside))
    }
}

/// `W_hom(F, P) + H_hom(P)` with `H_hom = mean hardening weight · |P - I|²`.
pub struct HomogenizedIntegrand<'a> {
    pub table: &'a WhomTable,
    pub model: &'a MaterialModel,
    pub hardening_weight: f64,
    out_of_range: AtomicBool,
}

impl<'a> HomogenizedIntegrand<'a> {
    pub fn new(table: &'a WhomTable, model: &'a MaterialModel) -> Self {
        Self {
            table,
            model,
            hardening_weight: model.hardening.weights().mean(),
            out_of_range: AtomicBool::new(false),
        }
    }

    pub fn take_out_of_range(&self) -> bool {
        self.out_of_range.swap(false, Ordering::Relaxed)
    }

    fn lookup(&self, f: &Mat3, p: &CellPlastic) -> (f64, Mat3) {
        match self.table.eval(f, &p.p) {
            Ok((v, g, inside)) => {
                if !inside {
                    self.out_of_range.store(true, Ordering::Relaxed);
                }
                (v, g)
            }
            Err(_) => {
                self.out_of_range.store(true, Ordering::Relaxed);
                (f64::INFINITY, Mat3::zeros())
            }
        }
    }
}

impl Integrand for HomogenizedIntegrand<'_> {
    fn elastic(&self, _z: &[f64; 3], f: &Mat3, p: &CellPlastic) -> f64 {
        self.lookup(f, p).0
    }

    fn elastic_grad(&self, _z: &[f64; 3], f: &Mat3, p: &CellPlastic) -> Mat3 {
        self.lookup(f, p).1
    }

    fn hardening(&self, _z: &[f64; 3], p: &Mat3) -> f64 {
        self.hardening_weight * (*p - Mat3::identity()).norm_sq()
    }

    fn in_k(&self, p: &SL3Element) -> bool {
        self.model.in_k(p)
    }

    fn q(&self) -> f64 {
        self.model.q
    }
}

/// Minimizes the homogenized functional with a prebuilt table.
pub fn minimize_fhom_with(config: &ExperimentConfig, table: &WhomTable) -> Result<MinimizeOutcome> {
    config.validate()?;
    let domain = config.hom_domain()?;
    let integrand = HomogenizedIntegrand::new(table, &config.model);
    let out = minimize_functional(&integrand, &config.model, &domain, 1.0, config)?;
    integrand.take_out_of_range();
    let check = Functional::new(&integrand, &domain, 1.0)?.breakdown(&out.y, &out.p)?;
    if integrand.take_out_of_range() {
        return Err(Error::TableOutOfRange(format!(
            "minimizer leaves the tabulated box (F axes {:?})",
            table.f_axes.iter().map(|a| (a.lo, a.hi)).collect::<Vec<_>>()
        )));
    }
    debug_assert!((check.total - out.value).abs() <= 1e-12 * out.value.abs().max(1.0));
    Ok(out)
}

pub fn minimize_fhom(config: &ExperimentConfig) -> Result<(MinimizeOutcome, WhomTable)> {
    let table = WhomTable::build(config)?;
    Ok((minimize_fhom_with(config, &table)?, table))
}

/// One rung of the ε ladder.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub eps: f64,
    pub min_f_eps: f64,
    pub min_f_hom: f64,
    /// `|min F_ε - min F_hom|`.
    pub gap: f64,
    pub iterations: usize,
    pub converged: bool,
    pub cells: Vec<usize>,
    pub wall_time_s: f64,
    /// `min F_ε >= (c1 / c_K²) ‖∇y‖²` at the minimizer.
    pub coercivity_ok: bool,
}

/// Cauchy differences between consecutive rungs, on the coarsest grid nodes.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TauDiagnostics {
    pub y_l2: Vec<f64>,
    pub p_sup: Vec<f64>,
    pub p_inv_sup: Vec<f64>,
    /// `sup |P⁻¹ - Q⁻¹| <= c_K² sup |P - Q|` on every pair.
    pub inverse_bound_ok: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub rows: Vec<ConvergenceRow>,
    pub min_f_hom: f64,
    pub hom_breakdown: EnergyBreakdown,
    pub hom_converged: bool,
    pub table_cell_solves: usize,
    /// Gaps non-increasing along the ladder within 10% slack.
    pub monotone_trend: bool,
    /// Final gap relative to `min F_hom`.
    pub final_gap_ratio: f64,
    pub diagnostics: TauDiagnostics,
}

/// Multilinear interpolation of a nodal field at `x`.
fn sample(domain: &GridDomain, field: &GridField, x: &[f64; 3]) -> Vec<f64> {
    let d = domain.dim();
    let mut base = [0usize; 3];
    let mut t = [0.0; 3];
    for a in 0..d {
        let s = ((x[a] - domain.origin()[a]) / domain.spacing(a)).clamp(0.0, domain.cells()[a] as f64);
        let k = (s.floor() as usize).min(domain.cells()[a] - 1);
        base[a] = k;
        t[a] = s - k as f64;
    }
    let mut out = vec![0.0; field.components];
    for corner in 0..(1usize << d) {
        let mut m = base;
        let mut w = 1.0;
        for a in 0..d {
            if (corner >> a) & 1 == 1 {
                m[a] += 1;
                w *= t[a];
            } else {
                w *= 1.0 - t[a];
            }
        }
        if w == 0.0 {
            continue;
        }
        for (o, v) in out.iter_mut().zip(field.node(domain.node_index(&m[..d]))) {
            *o += w * v;
        }
    }
    out
}

fn tau_diagnostics(outcomes: &[MinimizeOutcome], c_k: f64) -> TauDiagnostics {
    let mut diag = TauDiagnostics {
        inverse_bound_ok: true,
        ..Default::default()
    };
    let Some(coarse) = outcomes.iter().min_by_key(|o| o.domain.n_nodes()) else {
        return diag;
    };
    let pts: Vec<[f64; 3]> = (0..coarse.domain.n_nodes()).map(|k| coarse.domain.node_coord(k)).collect();
    let node_vol = coarse.domain.cell_volume();
    for w in outcomes.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        let (pa, pb) = (a.p.to_grid_field(), b.p.to_grid_field());
        let mut y2 = 0.0;
        let mut ps: f64 = 0.0;
        let mut pis: f64 = 0.0;
        for x in &pts {
            let (ya, yb) = (sample(&a.domain, &a.y, x), sample(&b.domain, &b.y, x));
            y2 += node_vol * ya.iter().zip(&yb).map(|(u, v)| (u - v).powi(2)).sum::<f64>();
            let ma = Mat3::from_row_slice(&sample(&a.domain, &pa, x)).expect("nine components");
            let mb = Mat3::from_row_slice(&sample(&b.domain, &pb, x)).expect("nine components");
            ps = ps.max((ma - mb).norm());
            if let (Ok(ia), Ok(ib)) = (ma.inverse(), mb.inverse()) {
                pis = pis.max((ia - ib).norm());
            }
        }
        diag.y_l2.push(y2.sqrt());
        diag.p_sup.push(ps);
        diag.p_inv_sup.push(pis);
        if pis > c_k * c_k * ps + 1e-12 {
            diag.inverse_bound_ok = false;
        }
    }
    diag
}

/// Runs the ε ladder (in parallel) and the homogenized problem.
pub fn convergence_table(config: &ExperimentConfig) -> Result<ConvergenceReport> {
    config.validate()?;
    let mut ladder = config.eps_ladder.clone();
    ladder.sort_by(|a, b| b.partial_cmp(a).expect("finite eps"));
    let (hom, table) = minimize_fhom(config)?;
    let results = ladder
        .par_iter()
        .map(|&eps| {
            let start = Instant::now();
            let out = minimize_feps(config, eps)?;
            Ok((out, start.elapsed().as_secs_f64()))
        })
        .collect::<Result<Vec<_>>>()?;
    let c1 = config.model.elastic.growth().c1;
    let c_k = config.model.c_k();
    let mut rows = Vec::new();
    for (&eps, (out, wall)) in ladder.iter().zip(&results) {
        let grad = sobolev_seminorms(&out.y, &out.p, &out.domain, config.model.q)?.grad_y_sq;
        rows.push(ConvergenceRow {
            eps,
            min_f_eps: out.value,
            min_f_hom: hom.value,
            gap: (out.value - hom.value).abs(),
            iterations: out.iterations,
            converged: out.converged,
            cells: out.domain.cells().to_vec(),
            wall_time_s: *wall,
            coercivity_ok: out.value >= 0.0 && out.value >= c1 / (c_k * c_k) * grad * (1.0 - 1e-12),
        });
    }
    let monotone_trend = rows.windows(2).all(|w| w[1].gap <= 1.1 * w[0].gap + 1e-12);
    let final_gap_ratio = rows.last().map(|r| r.gap / hom.value.abs().max(1e-300)).unwrap_or(0.0);
    let outcomes: Vec<MinimizeOutcome> = results.into_iter().map(|(o, _)| o).collect();
    Ok(ConvergenceReport {
        diagnostics: tau_diagnostics(&outcomes, c_k),
        rows,
        min_f_hom: hom.value,
        hom_breakdown: hom.breakdown,
        hom_converged: hom.converged,
        table_cell_solves: table.cell_solves,
        monotone_trend,
        final_gap_ratio,
    })
}

impl ConvergenceReport {
    /// Rows followed by the homogenized row (`eps = 0`). Wall time is left out
    /// so that reruns produce identical files.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["eps", "min_f_eps", "min_f_hom", "gap", "iterations", "converged"])?;
        for r in &self.rows {
            w.write_record([
                format!("{:e}", r.eps),
                format!("{:e}", r.min_f_eps),
                format!("{:e}", r.min_f_hom),
                format!("{:e}", r.gap),
                r.iterations.to_string(),
                r.converged.to_string(),
            ])?;
        }
        w.write_record([
            "0".to_string(),
            format!("{:e}", self.min_f_hom),
            format!("{:e}", self.min_f_hom),
            "0".to_string(),
            "0".to_string(),
            self.hom_converged.to_string(),
        ])?;
        w.flush()?;
        Ok(())
    }

    /// Plot-ready `(eps, gap)` pairs.
    pub fn write_gap_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["eps", "gap"])?;
        for r in &self.rows {
            w.write_record([format!("{:e}", r.eps), format!("{:e}", r.gap)])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Sum of per-rung values, used by tests to compare reruns.
pub fn ladder_checksum(report: &ConvergenceReport) -> f64 {
    pairwise_sum(&report.rows.iter().map(|r| r.min_f_eps).collect::<Vec<_>>())
}
