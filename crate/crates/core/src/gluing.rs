//! Gluing of two admissible pairs across an annular transition region and a
//! numerical check of the resulting energy inequality.
//!
//! Regions are cell masks on one grid. Distances to `A'` are exact Euclidean
//! distances to the closed union of its cells.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::energy::{kuhn_simplices, EnergyBreakdown, Functional, Step};
use crate::error::{Error, Result};
use crate::finsler::{sample_in_k, InterpMode, Interpolator};
use crate::grid::{mask_difference, mask_intersection, mask_union, pairwise_sum, GridDomain, GridField, PlasticField};
use crate::materials::MaterialModel;
use crate::tensor::{mat_exp, project_sl3, retract_sl3};
use crate::{Mat3, SL3Element};

fn cell_box(domain: &GridDomain, cell: usize) -> ([f64; 3], [f64; 3]) {
    let m = domain.cell_multi(cell);
    let mut lo = [0.0; 3];
    let mut hi = [0.0; 3];
    for a in 0..domain.dim() {
        let h = domain.spacing(a);
        lo[a] = domain.origin()[a] + m[a] as f64 * h;
        hi[a] = lo[a] + h;
    }
    (lo, hi)
}

fn point_box_distance(d: usize, x: &[f64; 3], lo: &[f64; 3], hi: &[f64; 3]) -> f64 {
    (0..d)
        .map(|a| (lo[a] - x[a]).max(x[a] - hi[a]).max(0.0).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn box_box_distance(d: usize, a: &([f64; 3], [f64; 3]), b: &([f64; 3], [f64; 3])) -> f64 {
    (0..d)
        .map(|k| (b.0[k] - a.1[k]).max(a.0[k] - b.1[k]).max(0.0).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Cells of the mask with a face neighbour outside the mask or the grid.
fn boundary_cells(domain: &GridDomain, mask: &[bool]) -> Vec<usize> {
    let d = domain.dim();
    (0..domain.n_cells())
        .filter(|&c| mask[c])
        .filter(|&c| {
            let m = domain.cell_multi(c);
            (0..d).any(|a| {
                [-1i64, 1].iter().any(|&s| {
                    let k = m[a] as i64 + s;
                    if k < 0 || k >= domain.cells()[a] as i64 {
                        return true;
                    }
                    let mut n = m;
                    n[a] = k as usize;
                    !mask[domain.cell_index(&n[..d])]
                })
            })
        })
        .collect()
}

fn half_diagonal(domain: &GridDomain) -> f64 {
    0.5 * (0..domain.dim()).map(|a| domain.spacing(a).powi(2)).sum::<f64>().sqrt()
}

fn max_spacing(domain: &GridDomain) -> f64 {
    (0..domain.dim()).map(|a| domain.spacing(a)).fold(0.0, f64::max)
}

/// Layers `C_0 = A' ⊂ C_1 ⊂ ... ⊂ C_N ⊂ A` with
/// `C_j = {cells of A with center distance to A' below jδ/N}`.
#[derive(Clone, Debug)]
pub struct AnnulusDecomposition {
    pub n_layers: usize,
    /// `dist(A', ∂A)`, also bounded by the distance to the grid boundary.
    pub delta: f64,
    /// Layer width `δ/N`.
    pub width: f64,
    /// Cell masks of `C_0, ..., C_N`.
    pub layers: Vec<Vec<bool>>,
    pub node_dist: Vec<f64>,
    pub cell_dist: Vec<f64>,
}

impl AnnulusDecomposition {
    /// Cell mask of `D_j = C_j \ C_{j-1}`, `1 <= j <= N`.
    pub fn annulus(&self, j: usize) -> Vec<bool> {
        mask_difference(&self.layers[j], &self.layers[j - 1])
    }
}

fn check_mask(domain: &GridDomain, mask: &[bool], name: &str) -> Result<()> {
    if mask.len() != domain.n_cells() {
        return Err(Error::InvalidInput(format!(
            "mask {name} has {} entries, grid has {} cells",
            mask.len(),
            domain.n_cells()
        )));
    }
    Ok(())
}

/// Distances to `A'` and `δ = dist(A', ∂A)`.
fn distances(domain: &GridDomain, a_prime: &[bool], a: &[bool]) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    check_mask(domain, a_prime, "A'")?;
    check_mask(domain, a, "A")?;
    if !a_prime.iter().any(|&v| v) {
        return Err(Error::InvalidInput("A' is empty".into()));
    }
    if a_prime.iter().zip(a).any(|(&p, &q)| p && !q) {
        return Err(Error::InvalidInput("A' is not a subset of A".into()));
    }
    let d = domain.dim();
    let edge: Vec<([f64; 3], [f64; 3])> = boundary_cells(domain, a_prime)
        .into_iter()
        .map(|c| cell_box(domain, c))
        .collect();

    let mut inside_node = vec![false; domain.n_nodes()];
    for c in (0..domain.n_cells()).filter(|&c| a_prime[c]) {
        for &k in &domain.cell_corners(c)[..domain.n_corners()] {
            inside_node[k] = true;
        }
    }
    let dist_to = |x: &[f64; 3]| edge.iter().map(|b| point_box_distance(d, x, &b.0, &b.1)).fold(f64::INFINITY, f64::min);
    let node_dist: Vec<f64> = (0..domain.n_nodes())
        .into_par_iter()
        .map(|k| if inside_node[k] { 0.0 } else { dist_to(&domain.node_coord(k)) })
        .collect();
    let cell_dist: Vec<f64> = (0..domain.n_cells())
        .into_par_iter()
        .map(|c| if a_prime[c] { 0.0 } else { dist_to(&domain.cell_center(c)) })
        .collect();

    let outside: Vec<([f64; 3], [f64; 3])> = (0..domain.n_cells())
        .filter(|&c| !a[c])
        .map(|c| cell_box(domain, c))
        .collect();
    let mut delta = outside
        .par_iter()
        .map(|b| edge.iter().map(|e| box_box_distance(d, e, b)).fold(f64::INFINITY, f64::min))
        .reduce(|| f64::INFINITY, f64::min);
    for e in &edge {
        for k in 0..d {
            let lo = domain.origin()[k];
            let hi = lo + domain.extent()[k];
            delta = delta.min(e.0[k] - lo).min(hi - e.1[k]);
        }
    }
    Ok((node_dist, cell_dist, delta))
}

/// Builds the `N` annuli between `A'` and `A`. Fails with
/// `NotCompactlyContained` when `δ` is at most two cell widths.
pub fn build_annuli(domain: &GridDomain, a_prime: &[bool], a: &[bool], n: usize) -> Result<AnnulusDecomposition> {
    if n == 0 {
        return Err(Error::InvalidInput("number of layers must be positive".into()));
    }
    let (node_dist, cell_dist, delta) = distances(domain, a_prime, a)?;
    let min = 2.0 * max_spacing(domain);
    if delta <= min {
        return Err(Error::NotCompactlyContained { delta, min });
    }
    let width = delta / n as f64;
    let mut layers = vec![a_prime.to_vec()];
    for j in 1..=n {
        let r = j as f64 * width;
        layers.push((0..domain.n_cells()).map(|c| a[c] && (a_prime[c] || cell_dist[c] < r)).collect());
    }
    Ok(AnnulusDecomposition {
        n_layers: n,
        delta,
        width,
        layers,
        node_dist,
        cell_dist,
    })
}

/// Smallest layer width for which the nodal ramp stays inside its annulus
/// and keeps the simplex gradient below `2N/δ = 2/w`.
pub fn min_layer_width(domain: &GridDomain) -> f64 {
    let d = domain.dim() as f64;
    4.0 * half_diagonal(domain) / (2.0 - d.sqrt())
}

/// Nodal cut-off equal to 1 on `C_{j-1}` and 0 outside `C_j`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CutoffField {
    pub layer: usize,
    pub phi: Vec<f64>,
    /// Largest simplex gradient norm of the piecewise-linear interpolant.
    pub gradient_max: f64,
    /// `2N/δ`.
    pub gradient_bound: f64,
}

fn simplex_gradient_sq(domain: &GridDomain, steps: &[Step], corners: &[usize; 8], v: &[f64]) -> f64 {
    steps
        .iter()
        .map(|s| ((v[corners[s.to]] - v[corners[s.from]]) / domain.spacing(s.axis)).powi(2))
        .sum()
}

/// Linear ramp in the distance to `A'` across layer `j`, shrunk by half a
/// cell diagonal on both sides so that every cell where the cut-off is not
/// constant has its center in `D_j`.
pub fn build_cutoff(domain: &GridDomain, dec: &AnnulusDecomposition, j: usize) -> Result<CutoffField> {
    if j == 0 || j > dec.n_layers {
        return Err(Error::InvalidInput(format!("layer {j} outside 1..={}", dec.n_layers)));
    }
    let w = dec.width;
    let r = half_diagonal(domain);
    if w <= 2.0 * r {
        return Err(Error::InvalidInput(format!(
            "layer width {w} does not exceed a cell diagonal {}",
            2.0 * r
        )));
    }
    let outer = j as f64 * w - r;
    let phi: Vec<f64> = dec
        .node_dist
        .iter()
        .map(|&dist| ((outer - dist) / (w - 2.0 * r)).clamp(0.0, 1.0))
        .collect();
    let simplices = kuhn_simplices(domain.dim());
    let gradient_max = (0..domain.n_cells())
        .into_par_iter()
        .map(|c| {
            let corners = domain.cell_corners(c);
            simplices
                .iter()
                .map(|s| simplex_gradient_sq(domain, s, &corners, &phi))
                .fold(0.0, f64::max)
        })
        .reduce(|| 0.0, f64::max)
        .sqrt();
    let gradient_bound = 2.0 / w;
    if gradient_max > gradient_bound * (1.0 + 1e-12) {
        return Err(Error::InvalidInput(format!(
            "cut-off gradient {gradient_max} exceeds 2N/δ = {gradient_bound}; layers are too thin for the grid"
        )));
    }
    Ok(CutoffField {
        layer: j,
        phi,
        gradient_max,
        gradient_bound,
    })
}

/// `(φ y1 + (1 - φ) y2, γ(φ, P2, P1))`.
#[derive(Clone, Debug)]
pub struct GluedPair {
    pub y: GridField,
    pub p: PlasticField,
    pub max_det_drift: f64,
}

pub fn glue(
    interp: &Interpolator,
    phi: &[f64],
    y1: &GridField,
    p1: &PlasticField,
    y2: &GridField,
    p2: &PlasticField,
) -> Result<GluedPair> {
    let n = phi.len();
    if y1.n_nodes() != n || y2.n_nodes() != n || p1.nodes.len() != n || p2.nodes.len() != n {
        return Err(Error::InvalidInput("glued fields do not share a grid".into()));
    }
    if y1.components != y2.components {
        return Err(Error::InvalidInput("deformations have different component counts".into()));
    }
    let mut y = y1.clone();
    for k in 0..n {
        let t = phi[k];
        let (a, b) = (y1.node(k), y2.node(k));
        for (i, v) in y.node_mut(k).iter_mut().enumerate() {
            *v = t * a[i] + (1.0 - t) * b[i];
        }
    }
    let nodes = (0..n)
        .into_par_iter()
        .map(|k| {
            let t = phi[k];
            if t > 0.0 && t < 1.0 {
                interp.check_in_k(&p1.nodes[k])?;
                interp.check_in_k(&p2.nodes[k])?;
            }
            interp.eval_in_k(t, &p2.nodes[k], &p1.nodes[k])
        })
        .collect::<Result<Vec<_>>>()?;
    let p = PlasticField { nodes };
    let max_det_drift = p.max_det_drift();
    Ok(GluedPair { y, p, max_det_drift })
}

/// Ingredients of the gluing constant `c`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FeConstants {
    pub c1: f64,
    pub c2: f64,
    pub q: f64,
    pub c_k: f64,
    /// Bound on `|P|` and `|P^{-1}|` in operator norm over K.
    pub p_op_bound: f64,
    pub hardening_max: f64,
    /// `sup |∂_t γ(t, F, G)| / |G - F|` over sampled pairs, with margin.
    pub gamma_velocity: f64,
    /// Endpoint Lipschitz constant of `γ` over sampled pairs, with margin.
    pub gamma_lipschitz: f64,
    pub probe_samples: usize,
    pub probe_seed: u64,
}

/// Safety factor on probed constants.
pub const PROBE_MARGIN: f64 = 1.25;

impl FeConstants {
    pub fn instantiate(model: &MaterialModel, mode: InterpMode, samples: usize, seed: u64) -> Result<Self> {
        let interp = Interpolator::new(model.norm, model.k_radius, mode);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut lv: f64 = 0.0;
        let mut le: f64 = 0.0;
        let r = model.k_radius;
        for _ in 0..samples.max(1) {
            let f = sample_in_k(&mut rng, &model.norm, 0.9 * r);
            let g = sample_in_k(&mut rng, &model.norm, 0.9 * r);
            lv = lv.max(interp.velocity_ratio(&f, &g, 32)?);
            let t: f64 = rng.gen_range(0.05..0.95);
            let base = interp.eval_in_k(t, &f, &g)?;
            let df = perturb(&mut rng, &f, 1e-5)?;
            let dg = perturb(&mut rng, &g, 1e-5)?;
            let moved = interp.eval_in_k(t, &df, &dg)?;
            let step = (*df.value() - *f.value()).norm() + (*dg.value() - *g.value()).norm();
            if step > 0.0 {
                le = le.max((*moved.value() - *base.value()).norm() / step);
            }
        }
        Ok(Self {
            c1: model.elastic.growth().c1,
            c2: model.elastic.growth().c2,
            q: model.q,
            c_k: model.c_k(),
            p_op_bound: model.p_op_bound(),
            hardening_max: model.hardening_max(),
            gamma_velocity: PROBE_MARGIN * lv.max(1.0),
            gamma_lipschitz: PROBE_MARGIN * le.max(1.0),
            probe_samples: samples.max(1),
            probe_seed: seed,
        })
    }

    /// Coefficients `α_0..α_4` of the per-cell transition bound in dimension `d`
    /// and the resulting `c`.
    pub fn c(&self, d: usize) -> (Vec<f64>, f64) {
        let e2 = self.p_op_bound.powi(2);
        let corners = (1usize << d) as f64;
        let pq = 3f64.powf(self.q - 1.0);
        let alpha = vec![
            self.c2 * (e2 * (3 - d) as f64 + 1.0) + self.hardening_max,
            3.0 * self.c2 * e2,
            pq * self.gamma_lipschitz.powf(self.q),
            3.0 * self.c2 * e2 * corners,
            pq * self.gamma_velocity.powf(self.q) * corners,
        ];
        let kappa = (e2 / self.c1).max(1.0);
        let c = [alpha[0], alpha[1] * kappa, alpha[2], alpha[3], alpha[4]]
            .into_iter()
            .fold(0.0, f64::max);
        (alpha, c)
    }
}

fn perturb<R: Rng>(rng: &mut R, p: &SL3Element, size: f64) -> Result<SL3Element> {
    let mut m = Mat3::zeros();
    for i in 0..3 {
        for j in 0..3 {
            m.m[i][j] = rng.gen_range(-1.0..1.0);
        }
    }
    let x = project_sl3(&m).into_inner();
    let x = x.scale(size / x.norm().max(1e-300));
    retract_sl3(&(*p.value() * mat_exp(&x)))
}

#[derive(Clone, Debug)]
pub struct FeSettings {
    pub mode: InterpMode,
    /// Replaces the layer count derived from `c` and `σ`.
    pub n_override: Option<usize>,
    pub constants: Option<FeConstants>,
    pub probe_samples: usize,
    pub probe_seed: u64,
}

impl Default for FeSettings {
    fn default() -> Self {
        Self {
            mode: InterpMode::GroupExp,
            n_override: None,
            constants: None,
            probe_samples: 64,
            probe_seed: 7,
        }
    }
}

/// Cell masks of `A'`, `A` and `B`.
#[derive(Clone, Debug)]
pub struct FeRegions {
    pub a_prime: Vec<bool>,
    pub a: Vec<bool>,
    pub b: Vec<bool>,
}

/// The two admissible pairs, `(y1, P1)` on `A` and `(y2, P2)` on `B`.
#[derive(Clone, Copy, Debug)]
pub struct FePair<'a> {
    pub y1: &'a GridField,
    pub p1: &'a PlasticField,
    pub y2: &'a GridField,
    pub p2: &'a PlasticField,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FEReport {
    pub sigma: f64,
    pub delta: f64,
    pub n_layers: usize,
    /// Layer count satisfying `c/N < σ` and `2c vol/N < σ`.
    pub n_proof: usize,
    /// Largest layer count the grid resolves.
    pub n_grid_max: usize,
    pub proof_conditions_met: bool,
    pub layer: usize,
    pub layer_integrals: Vec<f64>,
    pub transition_total: f64,
    pub pigeonhole_ok: bool,
    pub cutoff_gradient: f64,
    pub cutoff_bound: f64,
    pub constants: FeConstants,
    pub alpha: Vec<f64>,
    pub c: f64,
    pub m_sigma: f64,
    pub lhs: EnergyBreakdown,
    pub energy_a: EnergyBreakdown,
    pub energy_b: EnergyBreakdown,
    pub cross_y: f64,
    pub cross_p: f64,
    #[serde(with = "crate::energy::extended_real")]
    pub rhs: f64,
    pub max_det_drift: f64,
    pub satisfied: bool,
}

fn masked(domain: &GridDomain, mask: &[bool]) -> Result<GridDomain> {
    domain.without_mask().with_mask(mask.to_vec())
}

/// Per-cell `vol + ∫(|∇y1|² + |∇y2|² + |∇P1|^q + |∇P2|^q)` with the simplex rule.
fn transition_density(domain: &GridDomain, q: f64, fields: &FePair) -> Vec<f64> {
    let simplices = kuhn_simplices(domain.dim());
    let vol = domain.cell_volume();
    let svol = vol / simplices.len() as f64;
    let d = domain.dim();
    (0..domain.n_cells())
        .into_par_iter()
        .map(|c| {
            let corners = domain.cell_corners(c);
            let mut sum = vol;
            for steps in &simplices {
                let mut gy = 0.0;
                let mut gp1 = 0.0;
                let mut gp2 = 0.0;
                for s in steps {
                    let h2 = domain.spacing(s.axis).powi(2);
                    for y in [fields.y1, fields.y2] {
                        let (a, b) = (y.node(corners[s.from]), y.node(corners[s.to]));
                        gy += (0..d).map(|i| (b[i] - a[i]).powi(2)).sum::<f64>() / h2;
                    }
                    let (f, t) = (corners[s.from], corners[s.to]);
                    gp1 += (*fields.p1.nodes[t].value() - *fields.p1.nodes[f].value()).norm_sq() / h2;
                    gp2 += (*fields.p2.nodes[t].value() - *fields.p2.nodes[f].value()).norm_sq() / h2;
                }
                sum += svol * (gy + gp1.powf(0.5 * q) + gp2.powf(0.5 * q));
            }
            sum
        })
        .collect()
}

/// Corner-average quadrature of `|y1 - y2|²` and `|P1 - P2|^q` over a mask.
fn cross_terms(domain: &GridDomain, q: f64, mask: &[bool], fields: &FePair) -> (f64, f64) {
    let n = domain.n_corners();
    let vol = domain.cell_volume();
    let parts: Vec<(f64, f64)> = (0..domain.n_cells())
        .into_par_iter()
        .filter(|&c| mask[c])
        .map(|c| {
            let corners = domain.cell_corners(c);
            let (mut sy, mut sp) = (0.0, 0.0);
            for &k in &corners[..n] {
                let (a, b) = (fields.y1.node(k), fields.y2.node(k));
                sy += a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum::<f64>();
                sp += (*fields.p1.nodes[k].value() - *fields.p2.nodes[k].value()).norm().powf(q);
            }
            (vol * sy / n as f64, vol * sp / n as f64)
        })
        .collect();
    let ys: Vec<f64> = parts.iter().map(|p| p.0).collect();
    let ps: Vec<f64> = parts.iter().map(|p| p.1).collect();
    (pairwise_sum(&ys), pairwise_sum(&ps))
}

/// Glues `(y1, P1)` and `(y2, P2)` across the cheapest annulus and evaluates
/// `F(glued; A' ∪ B) <= (1+σ)(F(y1,P1;A) + F(y2,P2;B)) + M_σ ∫(|y1-y2|² + |P1-P2|^q) + σ`,
/// the integral taken over `(A ∩ B) \ A'`.
pub fn fe_check(
    model: &MaterialModel,
    eps: f64,
    domain: &GridDomain,
    regions: &FeRegions,
    fields: FePair,
    sigma: f64,
    settings: &FeSettings,
) -> Result<FEReport> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidInput(format!("sigma must be positive, got {sigma}")));
    }
    let domain = domain.without_mask();
    check_mask(&domain, &regions.b, "B")?;
    let d = domain.dim();
    fields.y1.check_conforms(&domain, d)?;
    fields.y2.check_conforms(&domain, d)?;
    fields.p1.check_conforms(&domain)?;
    fields.p2.check_conforms(&domain)?;

    let constants = match &settings.constants {
        Some(c) => c.clone(),
        None => FeConstants::instantiate(model, settings.mode, settings.probe_samples, settings.probe_seed)?,
    };
    let (alpha, c) = constants.c(d);

    let (_, _, delta) = distances(&domain, &regions.a_prime, &regions.a)?;
    let min = 2.0 * max_spacing(&domain);
    if delta <= min {
        return Err(Error::NotCompactlyContained { delta, min });
    }
    let annulus_region = mask_intersection(&mask_difference(&regions.a, &regions.a_prime), &regions.b);
    let region_vol = annulus_region.iter().filter(|&&v| v).count() as f64 * domain.cell_volume();
    let n_proof = ((c / sigma).max(2.0 * c * region_vol / sigma).floor() as usize + 1).max(2);
    let n_grid_max = (delta / min_layer_width(&domain)).floor() as usize;
    let n = match settings.n_override {
        Some(n) => n,
        None => {
            if n_grid_max < 2 {
                return Err(Error::InvalidInput(format!(
                    "grid too coarse: δ = {delta} resolves fewer than two layers"
                )));
            }
            n_proof.min(n_grid_max)
        }
    };
    if n < 1 {
        return Err(Error::InvalidInput("number of layers must be positive".into()));
    }
    if n < n_proof {
        log::info!("using {n} layers; the proof conditions need {n_proof}");
    }
    let proof_conditions_met = c / (n as f64) < sigma && 2.0 * c * region_vol / (n as f64) < sigma;

    let dec = build_annuli(&domain, &regions.a_prime, &regions.a, n)?;
    let density = transition_density(&domain, model.q, &fields);
    let layer_sum = |mask: &[bool]| {
        let v: Vec<f64> = (0..domain.n_cells())
            .filter(|&k| mask[k] && regions.b[k])
            .map(|k| density[k])
            .collect();
        pairwise_sum(&v)
    };
    let layer_integrals: Vec<f64> = (1..=n).map(|j| layer_sum(&dec.annulus(j))).collect();
    let transition_total = layer_sum(&mask_difference(&regions.a, &regions.a_prime));
    let mut layer = 1;
    for j in 2..=n {
        if layer_integrals[j - 1] < layer_integrals[layer - 1] {
            layer = j;
        }
    }
    let pigeonhole_ok =
        layer_integrals[layer - 1] <= transition_total / n as f64 + 1e-9 * transition_total.max(1.0);

    let cutoff = build_cutoff(&domain, &dec, layer)?;
    let interp = Interpolator::new(model.norm, model.k_radius, settings.mode);
    let glued = glue(&interp, &cutoff.phi, fields.y1, fields.p1, fields.y2, fields.p2)?;

    let eval = |mask: &[bool], y: &GridField, p: &PlasticField| -> Result<EnergyBreakdown> {
        if !mask.iter().any(|&v| v) {
            return Ok(EnergyBreakdown::zero());
        }
        let dom = masked(&domain, mask)?;
        Functional::new(model, &dom, eps)?.breakdown(y, p)
    };
    let lhs = eval(&mask_union(&regions.a_prime, &regions.b), &glued.y, &glued.p)?;
    let energy_a = eval(&regions.a, fields.y1, fields.p1)?;
    let energy_b = eval(&regions.b, fields.y2, fields.p2)?;

    let cross_mask = mask_difference(&mask_intersection(&regions.a, &regions.b), &regions.a_prime);
    let (cross_y, cross_p) = cross_terms(&domain, model.q, &cross_mask, &fields);
    let g = 2.0 * n as f64 / dec.delta;
    let m_sigma = c * (g * g + g.powf(model.q));
    let rhs = (1.0 + sigma) * (energy_a.total + energy_b.total) + m_sigma * (cross_y + cross_p) + sigma;
    let satisfied = lhs.total <= rhs + 1e-9 * rhs.abs().max(1.0);

    Ok(FEReport {
        sigma,
        delta: dec.delta,
        n_layers: n,
        n_proof,
        n_grid_max,
        proof_conditions_met,
        layer,
        layer_integrals,
        transition_total,
        pigeonhole_ok,
        cutoff_gradient: cutoff.gradient_max,
        cutoff_bound: cutoff.gradient_bound,
        constants,
        alpha,
        c,
        m_sigma,
        lhs,
        energy_a,
        energy_b,
        cross_y,
        cross_p,
        rhs,
        max_det_drift: glued.max_det_drift,
        satisfied,
    })
}

/// Axis-aligned box `(lo, hi)`; its cell mask holds the cells whose centers
/// lie strictly inside.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxSpec {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxSpec {
    fn shifted(&self, by: &[f64]) -> BoxSpec {
        BoxSpec {
            lo: self.lo.iter().zip(by).map(|(a, b)| a + b).collect(),
            hi: self.hi.iter().zip(by).map(|(a, b)| a + b).collect(),
        }
    }

    fn mask(&self, domain: &GridDomain) -> Vec<bool> {
        crate::grid::box_mask(domain, &self.lo, &self.hi)
    }
}

/// Randomized fundamental-estimate trials on a 2D unit square.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GlueCheckConfig {
    pub sigmas: Vec<f64>,
    pub eps: f64,
    pub resolution: usize,
    pub a_prime: BoxSpec,
    pub a: BoxSpec,
    pub b: BoxSpec,
    /// Uniform random shift of the three boxes per trial, per axis.
    pub jitter: f64,
    pub trials: usize,
    pub seed: u64,
    /// Amplitude of the smooth perturbation of the identity deformation.
    pub y_amplitude: f64,
    /// Bound on `|log P|` of the random plastic fields.
    pub p_amplitude: f64,
    /// The second pair is `(1 - s)` times the first plus `s` times an
    /// independent one, with `log10 s` uniform in this range.
    pub log10_difference: (f64, f64),
    pub n_override: Option<usize>,
    pub mode: InterpMode,
    pub probe_samples: usize,
}

impl Default for GlueCheckConfig {
    fn default() -> Self {
        Self {
            sigmas: vec![0.5, 0.1],
            eps: 0.25,
            resolution: 96,
            a_prime: BoxSpec { lo: vec![0.2, 0.2], hi: vec![0.5, 0.8] },
            a: BoxSpec { lo: vec![0.0, 0.0], hi: vec![0.72, 1.0] },
            b: BoxSpec { lo: vec![0.4, 0.0], hi: vec![1.0, 1.0] },
            jitter: 0.02,
            trials: 100,
            seed: 2024,
            y_amplitude: 0.2,
            p_amplitude: 0.2,
            log10_difference: (-6.0, 0.0),
            n_override: None,
            mode: InterpMode::GroupExp,
            probe_samples: 64,
        }
    }
}

/// Smooth random deformation near the identity and plastic field `exp X(x)`
/// with `|X| <= p_amplitude`, on a 2D grid.
pub fn random_fields<R: Rng>(domain: &GridDomain, rng: &mut R, y_amplitude: f64, p_amplitude: f64) -> (GridField, PlasticField) {
    let k: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let y = GridField::from_fn(domain, 2, |x| {
        vec![
            x[0] + y_amplitude * (k[0] * (3.0 * x[1] + k[8]).sin() + k[1] * x[0] * x[1]),
            x[1] + y_amplitude * (k[2] * (2.0 * x[0] + k[9]).cos() + k[3] * x[1] * x[1]),
        ]
    });
    let p = PlasticField::from_fn(domain, |x| {
        let s = [
            (k[4] * 4.0 * x[0] + k[10] * 3.0 * x[1] + k[11]).sin(),
            (k[5] * 3.0 * x[1] + k[12]).cos(),
            (k[6] * 2.0 * x[0] * x[1] + k[13]).sin(),
        ];
        let mut m = Mat3::zeros();
        m.m[0][0] = s[0] / 2f64.sqrt();
        m.m[1][1] = -s[0] / 2f64.sqrt();
        m.m[0][1] = s[1];
        m.m[1][0] = s[2];
        retract_sl3(&mat_exp(&m.scale(p_amplitude / 3f64.sqrt()))).expect("exponential has unit determinant")
    });
    (y, p)
}

/// One gluecheck trial.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GlueTrial {
    pub trial: usize,
    pub difference: f64,
    pub report: FEReport,
}

/// Runs `trials × sigmas` checks; trials are deterministic in the seed.
pub fn run_gluecheck(model: &MaterialModel, cfg: &GlueCheckConfig) -> Result<Vec<GlueTrial>> {
    if cfg.sigmas.is_empty() || cfg.trials == 0 {
        return Err(Error::InvalidInput("gluecheck needs sigmas and at least one trial".into()));
    }
    let domain = GridDomain::cube(2, 1.0, cfg.resolution)?;
    let constants = FeConstants::instantiate(model, cfg.mode, cfg.probe_samples, cfg.seed)?;
    let settings = FeSettings {
        mode: cfg.mode,
        n_override: cfg.n_override,
        constants: Some(constants),
        probe_samples: cfg.probe_samples,
        probe_seed: cfg.seed,
    };
    let interp = Interpolator::new(model.norm, model.k_radius, cfg.mode);
    let mut out = Vec::new();
    for trial in 0..cfg.trials {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(trial as u64 * 0x9E37_79B9));
        let shift: Vec<f64> = (0..2).map(|_| rng.gen_range(-cfg.jitter..=cfg.jitter)).collect();
        let regions = FeRegions {
            a_prime: cfg.a_prime.shifted(&shift).mask(&domain),
            a: cfg.a.shifted(&shift).mask(&domain),
            b: cfg.b.shifted(&shift).mask(&domain),
        };
        let (y1, p1) = random_fields(&domain, &mut rng, cfg.y_amplitude, cfg.p_amplitude);
        let (yo, po) = random_fields(&domain, &mut rng, cfg.y_amplitude, cfg.p_amplitude);
        let s = 10f64.powf(rng.gen_range(cfg.log10_difference.0..=cfg.log10_difference.1));
        let mut y2 = y1.clone();
        for (v, o) in y2.data.iter_mut().zip(&yo.data) {
            *v = (1.0 - s) * *v + s * o;
        }
        let p2 = PlasticField {
            nodes: p1
                .nodes
                .iter()
                .zip(&po.nodes)
                .map(|(a, b)| interp.eval(s, a, b))
                .collect::<Result<Vec<_>>>()?,
        };
        let fields = FePair { y1: &y1, p1: &p1, y2: &y2, p2: &p2 };
        for &sigma in &cfg.sigmas {
            let report = fe_check(model, cfg.eps, &domain, &regions, fields, sigma, &settings)?;
            out.push(GlueTrial { trial, difference: s, report });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::finsler::MinkowskiNorm;
    use crate::grid::box_mask;
    use crate::materials::WeightField;

    fn unit_square(res: usize) -> GridDomain {
        GridDomain::cube(2, 1.0, res).unwrap()
    }

    fn model() -> MaterialModel {
        MaterialModel::quadratic(
            WeightField::Homogeneous { weight: 1.0 },
            WeightField::Homogeneous { weight: 1.0 },
        )
        .unwrap()
    }

    #[test]
    fn annuli_of_centered_square() {
        let dom = unit_square(64);
        let ap = box_mask(&dom, &[0.25, 0.25], &[0.75, 0.75]);
        let a = vec![true; dom.n_cells()];
        let dec = build_annuli(&dom, &ap, &a, 4).unwrap();
        assert!((dec.delta - 0.25).abs() < 1e-12);
        assert!((dec.width - 0.0625).abs() < 1e-12);
        // each annulus is a square ring four cells wide (Chebyshev ring
        // with rounded corners in the Euclidean distance)
        for j in 1..=4 {
            let ring = dec.annulus(j);
            let count = ring.iter().filter(|&&v| v).count();
            assert!(count > 0);
            for c in (0..dom.n_cells()).filter(|&c| ring[c]) {
                let dist = dec.cell_dist[c];
                assert!(dist >= (j - 1) as f64 * 0.0625 - 1e-12 && dist < j as f64 * 0.0625);
            }
        }
        // the layers telescope to A minus the part beyond δ
        let mut total = dec.layers[0].iter().filter(|&&v| v).count();
        for j in 1..=4 {
            total += dec.annulus(j).iter().filter(|&&v| v).count();
        }
        assert_eq!(total, dec.layers[4].iter().filter(|&&v| v).count());
        for j in 1..=4 {
            assert!(dec.layers[j - 1].iter().zip(&dec.layers[j]).all(|(&a, &b)| !a || b));
        }
    }

    #[test]
    fn boundary_distance_oracle() {
        // brute force over all A' cells against the boundary-cell shortcut
        let dom = unit_square(24);
        let mut ap = box_mask(&dom, &[0.3, 0.3], &[0.7, 0.6]);
        ap = mask_union(&ap, &box_mask(&dom, &[0.45, 0.2], &[0.55, 0.75]));
        let a = box_mask(&dom, &[0.05, 0.05], &[0.95, 0.95]);
        let dec = build_annuli(&dom, &ap, &a, 2).unwrap();
        for k in 0..dom.n_nodes() {
            let x = dom.node_coord(k);
            let brute = (0..dom.n_cells())
                .filter(|&c| ap[c])
                .map(|c| {
                    let (lo, hi) = cell_box(&dom, c);
                    point_box_distance(2, &x, &lo, &hi)
                })
                .fold(f64::INFINITY, f64::min);
            assert!((brute - dec.node_dist[k]).abs() < 1e-12);
        }
        // δ: nearest non-A cell is the outer ring at 0.05 (rounded to cells)
        let h = 1.0 / 24.0;
        let lo = (0.3f64 / h).floor() * h;
        let expected = (0..dom.n_cells())
            .filter(|&c| !a[c])
            .flat_map(|c| {
                let b = cell_box(&dom, c);
                (0..dom.n_cells()).filter(|&e| ap[e]).map(move |e| (b, e))
            })
            .map(|(b, e)| box_box_distance(2, &cell_box(&dom, e), &b))
            .fold(lo, f64::min);
        assert!((dec.delta - expected).abs() < 1e-12);
    }

    #[test]
    fn thin_margin_is_rejected() {
        let dom = unit_square(16);
        let ap = box_mask(&dom, &[0.1, 0.1], &[0.9, 0.9]);
        let a = vec![true; dom.n_cells()];
        match build_annuli(&dom, &ap, &a, 2) {
            Err(Error::NotCompactlyContained { delta, .. }) => assert!(delta <= 2.0 / 16.0 + 1e-12),
            other => panic!("expected NotCompactlyContained, got {other:?}"),
        }
    }

    #[test]
    fn cutoff_is_supported_in_its_layer() {
        let dom = unit_square(128);
        let ap = box_mask(&dom, &[0.3, 0.3], &[0.7, 0.7]);
        let a = box_mask(&dom, &[0.02, 0.02], &[0.98, 0.98]);
        let n = 3;
        let dec = build_annuli(&dom, &ap, &a, n).unwrap();
        assert!(dec.width >= min_layer_width(&dom));
        for j in 1..=n {
            let cut = build_cutoff(&dom, &dec, j).unwrap();
            assert!(cut.gradient_max <= cut.gradient_bound);
            assert!(cut.phi.iter().all(|&v| (0.0..=1.0).contains(&v)));
            let ring = dec.annulus(j);
            for c in 0..dom.n_cells() {
                let corners = dom.cell_corners(c);
                let vals: Vec<f64> = corners[..4].iter().map(|&k| cut.phi[k]).collect();
                if dec.layers[j - 1][c] {
                    assert!(vals.iter().all(|&v| v == 1.0));
                }
                if !dec.layers[j][c] {
                    assert!(vals.iter().all(|&v| v == 0.0));
                }
                if vals.iter().any(|&v| v != vals[0]) {
                    assert!(ring[c]);
                }
            }
        }
        // width below a cell diagonal
        let thin = build_annuli(&dom, &ap, &a, 30).unwrap();
        assert!(build_cutoff(&dom, &thin, 5).is_err());
    }

    fn smooth_pair(dom: &GridDomain, seed: u64, amp: f64) -> (GridField, PlasticField) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y = GridField::from_fn(dom, 2, |x| {
            vec![
                x[0] + amp * (k[0] * (3.0 * x[1]).sin() + k[1] * x[0] * x[1]),
                x[1] + amp * (k[2] * (2.0 * x[0]).cos() + k[3] * x[1] * x[1]),
            ]
        });
        let p = PlasticField::from_fn(dom, |x| {
            let mut m = Mat3::zeros();
            m.m[0][1] = 0.15 * (k[4] * x[0] + k[5] * x[1]).sin();
            m.m[0][0] = 0.1 * k[6] * x[1];
            m.m[1][1] = -0.1 * k[6] * x[1];
            m.m[1][0] = 0.1 * k[7] * x[0];
            retract_sl3(&mat_exp(&m)).unwrap()
        });
        (y, p)
    }

    #[test]
    fn glue_reproduces_identical_inputs() {
        let dom = unit_square(16);
        let (y, p) = smooth_pair(&dom, 1, 0.1);
        let interp = Interpolator::new(MinkowskiNorm::Frobenius, 0.5, InterpMode::GeodesicExact);
        let phi: Vec<f64> = (0..dom.n_nodes()).map(|k| dom.node_coord(k)[0]).collect();
        let g = glue(&interp, &phi, &y, &p, &y, &p).unwrap();
        assert!(g.y.data.iter().zip(&y.data).all(|(a, b)| (a - b).abs() < 1e-14));
        for (a, b) in g.p.nodes.iter().zip(&p.nodes) {
            assert!((*a.value() - *b.value()).norm() < 1e-9);
        }
        assert!(g.max_det_drift <= 1e-9);
        let (y2, p2) = smooth_pair(&dom, 2, 0.1);
        let ones = vec![1.0; dom.n_nodes()];
        let g = glue(&interp, &ones, &y, &p, &y2, &p2).unwrap();
        assert_eq!(g.y.data, y.data);
        assert!(g.p.nodes.iter().zip(&p.nodes).all(|(a, b)| a.value() == b.value()));
    }

    fn regions(dom: &GridDomain) -> FeRegions {
        FeRegions {
            a_prime: box_mask(dom, &[0.2, 0.2], &[0.5, 0.8]),
            a: box_mask(dom, &[0.0, 0.0], &[0.72, 1.0]),
            b: box_mask(dom, &[0.4, 0.0], &[1.0, 1.0]),
        }
    }

    #[test]
    fn fe_check_degenerate_pair() {
        let dom = unit_square(96);
        let m = model();
        let (y, p) = smooth_pair(&dom, 3, 0.2);
        let fields = FePair { y1: &y, p1: &p, y2: &y, p2: &p };
        let r = fe_check(&m, 0.25, &dom, &regions(&dom), fields, 0.1, &FeSettings::default()).unwrap();
        assert!(r.satisfied);
        assert!(r.pigeonhole_ok);
        assert_eq!(r.cross_y, 0.0);
        // glued field equals the input, so lhs is its energy on A' ∪ B
        let union = mask_union(&regions(&dom).a_prime, &regions(&dom).b);
        let dm = dom.with_mask(union).unwrap();
        let direct = Functional::new(&m, &dm, 0.25).unwrap().breakdown(&y, &p).unwrap();
        assert!((r.lhs.total - direct.total).abs() < 1e-9 * direct.total);
        assert!(r.n_proof > r.n_layers && !r.proof_conditions_met);
    }

    #[test]
    fn fe_check_random_pairs() {
        let dom = unit_square(96);
        let m = model();
        let settings = FeSettings {
            constants: Some(FeConstants::instantiate(&m, InterpMode::GroupExp, 32, 5).unwrap()),
            ..Default::default()
        };
        for seed in 0..4 {
            let (y1, p1) = smooth_pair(&dom, 10 + seed, 0.2);
            let (y2, p2) = smooth_pair(&dom, 20 + seed, 0.2);
            let fields = FePair { y1: &y1, p1: &p1, y2: &y2, p2: &p2 };
            let r = fe_check(&m, 0.25, &dom, &regions(&dom), fields, 0.5, &settings).unwrap();
            assert!(r.satisfied && r.pigeonhole_ok, "{r:?}");
            assert!(r.cutoff_gradient <= r.cutoff_bound);
            assert!(r.max_det_drift <= 1e-9);
        }
    }

    #[test]
    fn disjoint_overlap_has_no_cross_term() {
        // B touches A only outside the annuli: the cross region is empty
        let dom = unit_square(64);
        let regs = FeRegions {
            a_prime: box_mask(&dom, &[0.2, 0.2], &[0.4, 0.8]),
            a: box_mask(&dom, &[0.0, 0.0], &[0.62, 1.0]),
            b: box_mask(&dom, &[0.62, 0.0], &[1.0, 1.0]),
        };
        let m = model();
        let (y1, p1) = smooth_pair(&dom, 4, 0.2);
        let (y2, p2) = smooth_pair(&dom, 5, 0.2);
        let fields = FePair { y1: &y1, p1: &p1, y2: &y2, p2: &p2 };
        let r = fe_check(&m, 0.25, &dom, &regs, fields, 0.1, &FeSettings::default()).unwrap();
        assert_eq!(r.cross_y, 0.0);
        assert_eq!(r.transition_total, 0.0);
        assert!(r.satisfied);
    }

    #[test]
    fn constants_grow_with_dimension() {
        let k = FeConstants::instantiate(&model(), InterpMode::GroupExp, 16, 1).unwrap();
        let (a2, c2) = k.c(2);
        let (a3, c3) = k.c(3);
        assert!(c3 >= c2 && a3[3] == 2.0 * a2[3]);
        assert!(k.gamma_velocity >= PROBE_MARGIN && k.gamma_lipschitz >= PROBE_MARGIN);
    }
}
