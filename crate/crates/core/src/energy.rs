//! Discrete localized functional
//! `∫_A W(x/ε, ∇y P⁻¹) + H(x/ε, P) + |∇P|^q`.
//!
//! Each cell is split into `dim!` Kuhn simplices. Nodal fields are linear on
//! every simplex, so gradients are exact for affine fields and the energy is
//! smooth in the nodal values. Integrand weights are taken at cell centers,
//! the plastic value of a cell is the retracted mean of its corners, and the
//! hardening term is the corner average of `H`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{pairwise_sum, GridDomain, GridField, PlasticField};
use crate::materials::MaterialModel;
use crate::{Mat3, SL3Element};

/// Plastic value of a cell and its inverse.
#[derive(Clone, Copy, Debug)]
pub struct CellPlastic {
    pub p: Mat3,
    pub inv: Mat3,
}

impl CellPlastic {
    pub fn identity() -> Self {
        Self {
            p: Mat3::identity(),
            inv: Mat3::identity(),
        }
    }

    pub fn from_element(p: &SL3Element) -> Self {
        Self {
            p: *p.value(),
            inv: *p.inverse().value(),
        }
    }
}

/// Integrand of the functional, evaluated at the rescaled point `z = x/ε`.
pub trait Integrand: Sync {
    /// Elastic density at total deformation gradient `f` and cell plastic value.
    fn elastic(&self, z: &[f64; 3], f: &Mat3, p: &CellPlastic) -> f64;
    /// Derivative of [`Integrand::elastic`] in `f`.
    fn elastic_grad(&self, z: &[f64; 3], f: &Mat3, p: &CellPlastic) -> Mat3;
    /// Hardening density ignoring the effective domain.
    fn hardening(&self, z: &[f64; 3], p: &Mat3) -> f64;
    fn in_k(&self, p: &SL3Element) -> bool;
    fn q(&self) -> f64;
}

impl Integrand for MaterialModel {
    fn elastic(&self, z: &[f64; 3], f: &Mat3, p: &CellPlastic) -> f64 {
        self.eval_w(z, &(*f * p.inv))
    }

    fn elastic_grad(&self, z: &[f64; 3], f: &Mat3, p: &CellPlastic) -> Mat3 {
        self.elastic.grad(z, &(*f * p.inv)) * p.inv.transpose()
    }

    fn hardening(&self, z: &[f64; 3], p: &Mat3) -> f64 {
        self.hardening.eval_unchecked(z, p)
    }

    fn in_k(&self, p: &SL3Element) -> bool {
        MaterialModel::in_k(self, p)
    }

    fn q(&self) -> f64 {
        self.q
    }
}

/// The three integrals; `f64::INFINITY` marks hardening outside K and is
/// absorbed by the total.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub elastic: f64,
    #[serde(with = "extended_real")]
    pub hardening: f64,
    pub regularization: f64,
    #[serde(with = "extended_real")]
    pub total: f64,
}

/// Serializes `+∞` as the string `"Infinite"`, which JSON cannot carry as a number.
pub mod extended_real {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str("Infinite")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(serde::Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Str(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) if s == "Infinite" => Ok(f64::INFINITY),
            Repr::Str(s) => Err(serde::de::Error::custom(format!("unexpected value {s}"))),
        }
    }
}

impl EnergyBreakdown {
    pub fn new(elastic: f64, hardening: f64, regularization: f64) -> Self {
        Self {
            elastic,
            hardening,
            regularization,
            total: elastic + hardening + regularization,
        }
    }

    pub fn zero() -> Self {
        Self::new(0.0, 0.0, 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
    }

    pub fn add(&self, other: &EnergyBreakdown) -> EnergyBreakdown {
        Self::new(
            self.elastic + other.elastic,
            self.hardening + other.hardening,
            self.regularization + other.regularization,
        )
    }
}

/// One step of a Kuhn simplex: corners `from -> to` differ along `axis`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Step {
    pub(crate) from: usize,
    pub(crate) to: usize,
    pub(crate) axis: usize,
}

fn permutations(d: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, rest: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if rest.is_empty() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..rest.len() {
            let v = rest.remove(i);
            prefix.push(v);
            rec(prefix, rest, out);
            prefix.pop();
            rest.insert(i, v);
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut (0..d).collect(), &mut out);
    out
}

pub(crate) fn kuhn_simplices(d: usize) -> Vec<Vec<Step>> {
    permutations(d)
        .into_iter()
        .map(|perm| {
            let mut v = 0usize;
            perm.iter()
                .map(|&axis| {
                    let to = v | (1 << axis);
                    let s = Step { from: v, to, axis };
                    v = to;
                    s
                })
                .collect()
        })
        .collect()
}

/// The discretized functional on a grid for a given integrand and `ε`.
pub struct Functional<'a, I: Integrand + ?Sized> {
    integrand: &'a I,
    domain: &'a GridDomain,
    eps: f64,
    base: Mat3,
    simplices: Vec<Vec<Step>>,
    cells: Vec<usize>,
}

impl<'a, I: Integrand + ?Sized> Functional<'a, I> {
    /// Deformation mode: the total gradient is `∇y` in the leading block and
    /// 1 on the remaining diagonal (plane strain in 2D).
    pub fn new(integrand: &'a I, domain: &'a GridDomain, eps: f64) -> Result<Self> {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::EpsNonPositive(eps));
        }
        let d = domain.dim();
        let mut base = Mat3::zeros();
        for a in d..3 {
            base.m[a][a] = 1.0;
        }
        Ok(Self {
            integrand,
            domain,
            eps,
            base,
            simplices: kuhn_simplices(d),
            cells: domain.active_cells(),
        })
    }

    /// Fluctuation mode: the total gradient is `F + ∇y` with `∇y` padded by zeros.
    pub fn fluctuation(integrand: &'a I, domain: &'a GridDomain, eps: f64, f: Mat3) -> Result<Self> {
        let mut s = Self::new(integrand, domain, eps)?;
        s.base = f;
        Ok(s)
    }

    pub fn domain(&self) -> &GridDomain {
        self.domain
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn active_cells(&self) -> &[usize] {
        &self.cells
    }

    fn simplex_volume(&self) -> f64 {
        self.domain.cell_volume() / self.simplices.len() as f64
    }

    pub fn z(&self, cell: usize) -> [f64; 3] {
        let x = self.domain.cell_center(cell);
        [x[0] / self.eps, x[1] / self.eps, x[2] / self.eps]
    }

    fn total_gradient(&self, steps: &[Step], corners: &[usize; 8], y: &GridField) -> Mat3 {
        let d = self.domain.dim();
        let mut f = self.base;
        for s in steps {
            let h = self.domain.spacing(s.axis);
            let (a, b) = (y.node(corners[s.from]), y.node(corners[s.to]));
            for i in 0..d {
                f.m[i][s.axis] += (b[i] - a[i]) / h;
            }
        }
        f
    }

    /// Plastic value of every active cell, in the order of [`Self::active_cells`].
    pub fn cell_plastic(&self, p: &PlasticField) -> Result<Vec<CellPlastic>> {
        p.check_conforms(self.domain)?;
        let n = self.domain.n_corners();
        self.cells
            .par_iter()
            .map(|&c| {
                let corners = self.domain.cell_corners(c);
                let mean = p.mean_of(&corners[..n])?;
                Ok(CellPlastic::from_element(&mean))
            })
            .collect()
    }

    /// K membership of every node.
    pub fn k_flags(&self, p: &PlasticField) -> Vec<bool> {
        p.nodes.par_iter().map(|n| self.integrand.in_k(n)).collect()
    }

    pub fn cell_elastic(&self, cell: usize, y: &GridField, cp: &CellPlastic) -> f64 {
        let corners = self.domain.cell_corners(cell);
        let z = self.z(cell);
        let vol = self.simplex_volume();
        self.simplices
            .iter()
            .map(|steps| vol * self.integrand.elastic(&z, &self.total_gradient(steps, &corners, y), cp))
            .sum()
    }

    /// Cell hardening: corner average of `H`, infinite if a corner leaves K.
    pub fn cell_hardening(&self, cell: usize, p: &[SL3Element], flags: &[bool]) -> f64 {
        let n = self.domain.n_corners();
        let corners = self.domain.cell_corners(cell);
        if corners[..n].iter().any(|&k| !flags[k]) {
            return f64::INFINITY;
        }
        let z = self.z(cell);
        let sum: f64 = corners[..n]
            .iter()
            .map(|&k| self.integrand.hardening(&z, p[k].value()))
            .sum();
        self.domain.cell_volume() * sum / n as f64
    }

    pub fn cell_regularization(&self, cell: usize, p: &[SL3Element]) -> f64 {
        let corners = self.domain.cell_corners(cell);
        let vol = self.simplex_volume();
        let half_q = 0.5 * self.integrand.q();
        self.simplices
            .iter()
            .map(|steps| {
                let sq: f64 = steps
                    .iter()
                    .map(|s| {
                        let h = self.domain.spacing(s.axis);
                        (*p[corners[s.to]].value() - *p[corners[s.from]].value()).norm_sq() / (h * h)
                    })
                    .sum();
                vol * sq.powf(half_q)
            })
            .sum()
    }

    pub fn elastic(&self, y: &GridField, cp: &[CellPlastic]) -> f64 {
        let parts: Vec<f64> = self
            .cells
            .par_iter()
            .zip(cp.par_iter())
            .map(|(&c, p)| self.cell_elastic(c, y, p))
            .collect();
        pairwise_sum(&parts)
    }

    /// Elastic energy and its gradient in every nodal value of `y`
    /// (layout `node * dim + component`).
    pub fn elastic_with_grad(&self, y: &GridField, cp: &[CellPlastic]) -> (f64, Vec<f64>) {
        let d = self.domain.dim();
        let vol = self.simplex_volume();
        let local: Vec<(f64, [f64; 24])> = self
            .cells
            .par_iter()
            .zip(cp.par_iter())
            .map(|(&c, p)| {
                let corners = self.domain.cell_corners(c);
                let z = self.z(c);
                let mut g = [0.0; 24];
                let mut e = 0.0;
                for steps in &self.simplices {
                    let f = self.total_gradient(steps, &corners, y);
                    e += vol * self.integrand.elastic(&z, &f, p);
                    let dw = self.integrand.elastic_grad(&z, &f, p);
                    for s in steps {
                        let h = self.domain.spacing(s.axis);
                        for i in 0..d {
                            let v = vol * dw.m[i][s.axis] / h;
                            g[s.to * 3 + i] += v;
                            g[s.from * 3 + i] -= v;
                        }
                    }
                }
                (e, g)
            })
            .collect();
        let mut grad = vec![0.0; self.domain.n_nodes() * d];
        let n = self.domain.n_corners();
        for (&c, (_, g)) in self.cells.iter().zip(&local) {
            let corners = self.domain.cell_corners(c);
            for k in 0..n {
                for i in 0..d {
                    grad[corners[k] * d + i] += g[k * 3 + i];
                }
            }
        }
        let energies: Vec<f64> = local.iter().map(|(e, _)| *e).collect();
        (pairwise_sum(&energies), grad)
    }

    pub fn hardening(&self, p: &PlasticField, flags: &[bool]) -> f64 {
        let parts: Vec<f64> = self
            .cells
            .par_iter()
            .map(|&c| self.cell_hardening(c, &p.nodes, flags))
            .collect();
        if parts.iter().any(|v| v.is_infinite()) {
            return f64::INFINITY;
        }
        pairwise_sum(&parts)
    }

    pub fn regularization(&self, p: &PlasticField) -> f64 {
        let parts: Vec<f64> = self
            .cells
            .par_iter()
            .map(|&c| self.cell_regularization(c, &p.nodes))
            .collect();
        pairwise_sum(&parts)
    }

    pub fn breakdown(&self, y: &GridField, p: &PlasticField) -> Result<EnergyBreakdown> {
        y.check_conforms(self.domain, self.domain.dim())?;
        let cp = self.cell_plastic(p)?;
        let flags = self.k_flags(p);
        Ok(EnergyBreakdown::new(
            self.elastic(y, &cp),
            self.hardening(p, &flags),
            self.regularization(p),
        ))
    }
}

/// `F_ε(y, P, A)` with `A` the domain mask (the whole box if unmasked).
pub fn energy_total(
    model: &MaterialModel,
    eps: f64,
    y: &GridField,
    p: &PlasticField,
    domain: &GridDomain,
) -> Result<EnergyBreakdown> {
    Functional::new(model, domain, eps)?.breakdown(y, p)
}

/// Discrete norms entering the convergence diagnostics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Seminorms {
    /// `‖∇y‖²_{L²}`.
    pub grad_y_sq: f64,
    /// `‖∇P‖_q^q`.
    pub grad_p_q: f64,
    /// `‖y‖²_{L²}`.
    pub y_sq: f64,
    /// `max_nodes |P − I|`.
    pub p_sup_dist_identity: f64,
}

struct Unit {
    q: f64,
}

impl Integrand for Unit {
    fn elastic(&self, _: &[f64; 3], f: &Mat3, _: &CellPlastic) -> f64 {
        f.norm_sq()
    }
    fn elastic_grad(&self, _: &[f64; 3], f: &Mat3, _: &CellPlastic) -> Mat3 {
        f.scale(2.0)
    }
    fn hardening(&self, _: &[f64; 3], _: &Mat3) -> f64 {
        0.0
    }
    fn in_k(&self, _: &SL3Element) -> bool {
        true
    }
    fn q(&self) -> f64 {
        self.q
    }
}

fn l2_sq_cells(domain: &GridDomain, value: impl Fn(usize) -> f64 + Sync) -> f64 {
    let n = domain.n_corners();
    let parts: Vec<f64> = domain
        .active_cells()
        .par_iter()
        .map(|&c| {
            let corners = domain.cell_corners(c);
            corners[..n].iter().map(|&k| value(k)).sum::<f64>() / n as f64 * domain.cell_volume()
        })
        .collect();
    pairwise_sum(&parts)
}

/// Seminorms over the active cells, by the quadrature of the functional.
pub fn sobolev_seminorms(y: &GridField, p: &PlasticField, domain: &GridDomain, q: f64) -> Result<Seminorms> {
    y.check_conforms(domain, domain.dim())?;
    p.check_conforms(domain)?;
    let unit = Unit { q };
    let f = Functional::fluctuation(&unit, domain, 1.0, Mat3::zeros())?;
    let id = vec![CellPlastic::identity(); f.active_cells().len()];
    Ok(Seminorms {
        grad_y_sq: f.elastic(y, &id),
        grad_p_q: f.regularization(p),
        y_sq: l2_sq_cells(domain, |k| y.node(k).iter().map(|v| v * v).sum()),
        p_sup_dist_identity: p
            .nodes
            .iter()
            .map(|n| (*n.value() - Mat3::identity()).norm())
            .fold(0.0, f64::max),
    })
}

/// `‖y₁ − y₂‖²_{L²}` over the active cells.
pub fn l2_distance_sq(y1: &GridField, y2: &GridField, domain: &GridDomain) -> f64 {
    let c = y1.components;
    l2_sq_cells(domain, |k| {
        (0..c)
            .map(|i| (y1.node(k)[i] - y2.node(k)[i]).powi(2))
            .sum()
    })
}

/// `max_nodes |P₁ − P₂|`.
pub fn sup_distance(p1: &PlasticField, p2: &PlasticField) -> f64 {
    p1.nodes
        .iter()
        .zip(&p2.nodes)
        .map(|(a, b)| (*a.value() - *b.value()).norm())
        .fold(0.0, f64::max)
}

/// `max_nodes |P₁⁻¹ − P₂⁻¹|`.
pub fn sup_inverse_distance(p1: &PlasticField, p2: &PlasticField) -> f64 {
    p1.nodes
        .iter()
        .zip(&p2.nodes)
        .map(|(a, b)| (*a.inverse().value() - *b.inverse().value()).norm())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::finsler::{point_at_distance, sample_in_k, MinkowskiNorm};
    use crate::grid::box_mask;
    use crate::materials::WeightField;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn homogeneous() -> MaterialModel {
        MaterialModel::quadratic(
            WeightField::Homogeneous { weight: 1.0 },
            WeightField::Homogeneous { weight: 1.0 },
        )
        .unwrap()
    }

    fn laminate() -> MaterialModel {
        MaterialModel::quadratic(
            WeightField::TwoPhaseLaminate { a: 1.0, b: 4.0, axis: 0, fraction: 0.5 },
            WeightField::TwoPhaseLaminate { a: 1.0, b: 3.0, axis: 1, fraction: 0.5 },
        )
        .unwrap()
    }

    fn smooth_plastic(domain: &GridDomain, rng: &mut ChaCha8Rng, amp: f64) -> PlasticField {
        let dirs: Vec<Mat3> = (0..2)
            .map(|_| {
                let mut m = Mat3::zeros();
                for i in 0..3 {
                    for j in 0..3 {
                        m.m[i][j] = rng.gen_range(-1.0..1.0);
                    }
                }
                m
            })
            .collect();
        let two_d = domain.dim() == 2;
        PlasticField::from_fn(domain, |x| {
            let mut a = dirs[0].scale(amp * (3.0 * x[0]).sin()) + dirs[1].scale(amp * (2.0 * x[1] + 1.0).cos());
            if two_d {
                for k in 0..3 {
                    a.m[2][k] = 0.0;
                    a.m[k][2] = 0.0;
                }
            }
            crate::tensor::retract_sl3(&crate::tensor::mat_exp(&crate::tensor::project_sl3(&a).into_inner()))
                .unwrap()
        })
    }

    fn random_y(domain: &GridDomain, rng: &mut ChaCha8Rng) -> GridField {
        let mut y = GridField::affine(domain, &Mat3::identity(), &[0.0; 3]);
        for v in y.data.iter_mut() {
            *v += rng.gen_range(-0.05..0.05);
        }
        y
    }

    #[test]
    fn identity_breakdown() {
        for dim in [2, 3] {
            let d = GridDomain::cube(dim, 1.0, 4).unwrap();
            let y = GridField::affine(&d, &Mat3::identity(), &[0.0; 3]);
            let b = energy_total(&homogeneous(), 0.5, &y, &PlasticField::identity(&d), &d).unwrap();
            assert!((b.elastic - 3.0).abs() < 1e-12);
            assert_eq!(b.hardening, 0.0);
            assert_eq!(b.regularization, 0.0);
            assert!((b.total - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn eps_must_be_positive() {
        let d = GridDomain::cube(2, 1.0, 4).unwrap();
        let y = GridField::zeros(&d, 2);
        let r = energy_total(&homogeneous(), 0.0, &y, &PlasticField::identity(&d), &d);
        assert!(matches!(r, Err(Error::EpsNonPositive(_))));
    }

    #[test]
    fn node_outside_k_gives_infinite_total() {
        let d = GridDomain::cube(2, 1.0, 4).unwrap();
        let y = GridField::affine(&d, &Mat3::identity(), &[0.0; 3]);
        let mut p = PlasticField::identity(&d);
        p.nodes[7] = point_at_distance(&MinkowskiNorm::Frobenius, &Mat3::diag(1.0, -1.0, 0.0), 0.8).unwrap();
        let b = energy_total(&homogeneous(), 1.0, &y, &p, &d).unwrap();
        assert_eq!(b.hardening, f64::INFINITY);
        assert_eq!(b.total, f64::INFINITY);
        assert!(b.elastic.is_finite());
        let json = serde_json::to_string(&b).unwrap();
        assert!(json.contains("Infinite"));
        let back: EnergyBreakdown = serde_json::from_str(&json).unwrap();
        assert_eq!(back.total, f64::INFINITY);
    }

    #[test]
    fn laminate_elastic_is_mean_weight() {
        let d = GridDomain::cube(3, 1.0, 64).unwrap();
        let y = GridField::affine(&d, &Mat3::identity(), &[0.0; 3]);
        let b = energy_total(&laminate(), 0.25, &y, &PlasticField::identity(&d), &d).unwrap();
        let exact = 3.0 * 2.5;
        assert!((b.elastic - exact).abs() <= 0.01 * exact);
        // hardening weights {1,3} vanish at P = I
        assert_eq!(b.hardening, 0.0);
    }

    #[test]
    fn mask_additivity_and_monotonicity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let full = GridDomain::cube(2, 1.0, 12).unwrap();
        let y = random_y(&full, &mut rng);
        let p = smooth_plastic(&full, &mut rng, 0.08);
        let a = box_mask(&full, &[0.0, 0.0], &[0.5, 1.0]);
        let b = box_mask(&full, &[0.5, 0.0], &[1.0, 0.6]);
        let ab: Vec<bool> = a.iter().zip(&b).map(|(x, y)| *x || *y).collect();
        let m = laminate();
        let eval = |mask: &Vec<bool>| {
            let d = full.clone().with_mask(mask.clone()).unwrap();
            energy_total(&m, 0.25, &y, &p, &d).unwrap()
        };
        let (ea, eb, eab) = (eval(&a), eval(&b), eval(&ab));
        assert!(eab.is_finite());
        for (x, y) in [
            (eab.elastic, ea.elastic + eb.elastic),
            (eab.hardening, ea.hardening + eb.hardening),
            (eab.regularization, ea.regularization + eb.regularization),
        ] {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
        for small in [ea, eb] {
            assert!(small.elastic <= eab.elastic);
            assert!(small.hardening <= eab.hardening);
            assert!(small.regularization <= eab.regularization);
        }
    }

    #[test]
    fn elastic_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for dim in [2, 3] {
            let d = GridDomain::cube(dim, 1.0, 4).unwrap();
            let m = laminate();
            let f = Functional::new(&m, &d, 0.5).unwrap();
            let y = random_y(&d, &mut rng);
            let p = smooth_plastic(&d, &mut rng, 0.1);
            let cp = f.cell_plastic(&p).unwrap();
            let (_, g) = f.elastic_with_grad(&y, &cp);
            let h = 1e-6;
            let mut err = 0.0;
            let mut norm = 0.0;
            for k in 0..y.data.len() {
                let mut yp = y.clone();
                yp.data[k] += h;
                let mut ym = y.clone();
                ym.data[k] -= h;
                let fd = (f.elastic(&yp, &cp) - f.elastic(&ym, &cp)) / (2.0 * h);
                err += (fd - g[k]).powi(2);
                norm += fd * fd;
            }
            assert!((err / norm).sqrt() < 1e-5);
        }
    }

    #[test]
    fn coercivity_witness() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let m = laminate();
        let d = GridDomain::cube(2, 1.0, 8).unwrap();
        for _ in 0..5 {
            let y = random_y(&d, &mut rng);
            let p = PlasticField::from_fn(&d, |_| SL3Element::identity());
            let mut p2 = p.clone();
            for n in p2.nodes.iter_mut() {
                *n = sample_in_k(&mut rng, &m.norm, 0.3);
            }
            for pf in [p, p2] {
                let b = energy_total(&m, 0.5, &y, &pf, &d).unwrap();
                let s = sobolev_seminorms(&y, &pf, &d, m.q).unwrap();
                let c1 = m.elastic.growth().c1;
                assert!(b.elastic >= c1 / m.c_k().powi(2) * s.grad_y_sq);
            }
        }
    }

    #[test]
    fn seminorm_cases() {
        let d = GridDomain::cube(2, 1.0, 8).unwrap();
        let zero = sobolev_seminorms(
            &GridField::from_fn(&d, 2, |_| vec![0.3, -1.0]),
            &PlasticField::identity(&d),
            &d,
            4.0,
        )
        .unwrap();
        assert_eq!(zero.grad_y_sq, 0.0);
        assert_eq!(zero.grad_p_q, 0.0);
        assert_eq!(zero.p_sup_dist_identity, 0.0);
        assert!((zero.y_sq - 1.09).abs() < 1e-12);

        let a = Mat3::new([[1.0, 2.0, 0.0], [-0.5, 0.25, 0.0], [0.0, 0.0, 0.0]]);
        let s = sobolev_seminorms(&GridField::affine(&d, &a, &[1.0, 0.0, 0.0]), &PlasticField::identity(&d), &d, 4.0)
            .unwrap();
        assert!((s.grad_y_sq - a.norm_sq()).abs() < 1e-12);
    }

    #[test]
    fn seminorms_match_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let coef: Vec<f64> = (0..6).map(|_| rng.gen_range(0.5..1.5)).collect();
        let yf = |x: &[f64; 3]| {
            vec![
                coef[0] * (2.0 * x[0] + x[1]).sin() + coef[1] * x[1] * x[1],
                coef[2] * (x[0] * x[1]).cos() + coef[3] * (3.0 * x[1]).sin(),
            ]
        };
        let pf = |x: &[f64; 3]| {
            let a = Mat3::new([
                [coef[4] * 0.2 * (2.0 * x[0]).sin(), 0.1 * coef[5] * x[1], 0.0],
                [0.05 * x[0], -coef[4] * 0.2 * (2.0 * x[0]).sin(), 0.0],
                [0.0, 0.0, 0.0],
            ]);
            crate::tensor::retract_sl3(&crate::tensor::mat_exp(&a)).unwrap()
        };
        let eval = |cells: usize| {
            let d = GridDomain::cube(2, 1.0, cells).unwrap();
            sobolev_seminorms(&GridField::from_fn(&d, 2, yf), &PlasticField::from_fn(&d, pf), &d, 4.0).unwrap()
        };
        let (coarse, dense) = (eval(64), eval(256));
        for (a, b) in [
            (coarse.grad_y_sq, dense.grad_y_sq),
            (coarse.grad_p_q, dense.grad_p_q),
            (coarse.y_sq, dense.y_sq),
            (coarse.p_sup_dist_identity, dense.p_sup_dist_identity),
        ] {
            assert!((a - b).abs() <= 0.005 * b, "{a} vs {b}");
        }
    }

    #[test]
    fn kuhn_simplices_tile_the_cell() {
        assert_eq!(kuhn_simplices(1).len(), 1);
        assert_eq!(kuhn_simplices(2).len(), 2);
        let s3 = kuhn_simplices(3);
        assert_eq!(s3.len(), 6);
        for s in &s3 {
            assert_eq!(s.last().unwrap().to, 7);
        }
    }
}
