//! Left-invariant Finsler structure on SL(3).
//!
//! The Minkowski norm `Δ_I` on sl(3) is translated to `T_F SL(3)` by
//! `Δ(F, M) = Δ_I(F^{-1} M)`. Distances come from minimizing the length of
//! discrete paths ([`geodesic`]). For the shipped norms (both multiples of
//! the Frobenius norm) geodesics through `F` with left-trivialized velocity
//! `A` also have the closed form `F exp(t A^T) exp(t (A - A^T))`, which backs
//! [`exp_map`], [`log_map`] and the exact interpolation mode.

use std::collections::HashMap;
use std::sync::Mutex;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{log_frechet, mat_exp, mat_log, project_sl3, retract_sl3};
use crate::{Mat3, SL3Element, Sl3Tangent};

/// Tangency tolerance accepted by [`delta`].
pub const TANGENT_TOL: f64 = 1e-6;
/// Slack on the K radius when deciding membership of interpolation endpoints.
pub const K_SLACK: f64 = 1e-6;

/// Minkowski norm on sl(3).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MinkowskiNorm {
    #[default]
    Frobenius,
    /// Von Mises flavoured: `w_d |dev M|`; on sl(3) `dev M = M`.
    WeightedDeviatoric { weight: f64 },
}

impl MinkowskiNorm {
    pub fn validate(&self) -> Result<()> {
        match self {
            MinkowskiNorm::Frobenius => Ok(()),
            MinkowskiNorm::WeightedDeviatoric { weight } if *weight > 0.0 && weight.is_finite() => {
                Ok(())
            }
            MinkowskiNorm::WeightedDeviatoric { weight } => Err(Error::InvalidInput(format!(
                "deviatoric weight must be positive, got {weight}"
            ))),
        }
    }

    fn weight(&self) -> f64 {
        match self {
            MinkowskiNorm::Frobenius => 1.0,
            MinkowskiNorm::WeightedDeviatoric { weight } => *weight,
        }
    }

    /// Coercivity and growth constants `(c4, c5)` with `c4|M| <= Δ_I(M) <= c5|M|`.
    pub fn bounds(&self) -> (f64, f64) {
        let w = self.weight();
        (w, w)
    }

    /// Whether `Δ_I(-M) = Δ_I(M)`, making the induced distance symmetric.
    pub fn is_symmetric(&self) -> bool {
        true
    }

    /// `Δ_I(M)` on a trace-free argument.
    pub fn delta_i(&self, m: &Sl3Tangent) -> f64 {
        self.weight() * m.value().norm()
    }

    /// `Δ_I` of the sl(3) projection of an arbitrary matrix.
    pub fn delta_i_projected(&self, m: &Mat3) -> f64 {
        self.delta_i(&project_sl3(m))
    }

    /// Gradient of `Δ_I(M)^2` with respect to `M` (Frobenius pairing).
    pub fn grad_sq(&self, m: &Mat3) -> Mat3 {
        let w = self.weight();
        project_sl3(m).into_inner().scale(2.0 * w * w)
    }

    /// Curvature scale of `Δ_I^2`, used to precondition path descent.
    fn hessian_scale(&self) -> f64 {
        let w = self.weight();
        2.0 * w * w
    }
}

/// `Δ_I(M)`.
pub fn delta_i(norm: &MinkowskiNorm, m: &Sl3Tangent) -> f64 {
    norm.delta_i(m)
}

/// `Δ(F, M) = Δ_I(F^{-1} M)` for `M ∈ T_F SL(3)`.
pub fn delta(norm: &MinkowskiNorm, f: &SL3Element, m: &Mat3) -> Result<f64> {
    let v = *f.inverse().value() * *m;
    let tr = v.trace();
    if tr.abs() > TANGENT_TOL * (1.0 + v.max_abs()) {
        return Err(Error::NotTangent { trace: tr });
    }
    Ok(norm.delta_i_projected(&v))
}

/// Sampled curve in SL(3) on the uniform parameter grid `i / n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscretePath {
    nodes: Vec<SL3Element>,
}

impl DiscretePath {
    pub fn new(nodes: Vec<SL3Element>) -> Result<Self> {
        if nodes.len() < 2 {
            return Err(Error::InvalidInput(
                "a discrete path needs at least two nodes".into(),
            ));
        }
        Ok(Self { nodes })
    }

    pub fn nodes(&self) -> &[SL3Element] {
        &self.nodes
    }

    /// Number of segments `n`.
    pub fn segments(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn first(&self) -> &SL3Element {
        &self.nodes[0]
    }

    pub fn last(&self) -> &SL3Element {
        &self.nodes[self.nodes.len() - 1]
    }

    /// Path `self` followed by `other`; the shared node appears once.
    pub fn concat(&self, other: &DiscretePath) -> DiscretePath {
        let mut nodes = self.nodes.clone();
        nodes.extend_from_slice(&other.nodes[1..]);
        DiscretePath { nodes }
    }

    pub fn reversed(&self) -> DiscretePath {
        let mut nodes = self.nodes.clone();
        nodes.reverse();
        DiscretePath { nodes }
    }

    /// Doubles the resolution by inserting the one-parameter-subgroup midpoint
    /// of every segment; the discrete length is unchanged.
    pub fn refined(&self) -> Result<DiscretePath> {
        let mut nodes = Vec::with_capacity(2 * self.nodes.len() - 1);
        for w in self.nodes.windows(2) {
            let step = mat_log(&(*w[0].inverse().value() * *w[1].value()))?;
            let mid = retract_sl3(&(*w[0].value() * mat_exp(&step.scale(0.5))))?;
            nodes.push(w[0]);
            nodes.push(mid);
        }
        nodes.push(*self.last());
        Ok(DiscretePath { nodes })
    }

    /// Largest `|det - 1|` over the nodes.
    pub fn max_det_drift(&self) -> f64 {
        self.nodes
            .iter()
            .map(|p| (p.value().det() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

fn segment_log(a: &SL3Element, b: &SL3Element) -> Result<Mat3> {
    mat_log(&(*a.inverse().value() * *b.value()))
}

/// Discrete Finsler length: each segment contributes the length of the
/// one-parameter subgroup joining its endpoints,
/// `Δ(Φ_i, n log(Φ_i^{-1} Φ_{i+1})) / n = Δ_I(log(Φ_i^{-1} Φ_{i+1}))`.
pub fn finsler_length(norm: &MinkowskiNorm, path: &DiscretePath) -> Result<f64> {
    let mut total = 0.0;
    for w in path.nodes.windows(2) {
        total += norm.delta_i_projected(&segment_log(&w[0], &w[1])?);
    }
    Ok(total)
}

/// Outcome of a shortest-path solve.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GeodesicResult {
    pub path: DiscretePath,
    pub length: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Iteration cap of the path descent.
pub const GEODESIC_MAX_ITERATIONS: usize = 10_000;
const GEODESIC_REL_TOL: f64 = 1e-10;

/// Shortest discrete path from `f0` to `f1` with `n` segments.
///
/// Starts from the group path `t ↦ F0 exp(t log(F0^{-1} F1))` and runs a
/// preconditioned descent on the discrete path energy `n Σ Δ_I(X_i)^2`,
/// `X_i = log(Φ_i^{-1} Φ_{i+1})`, over the interior nodes. Each node is moved
/// along `Φ_i exp(V_i)` and retracted, so every iterate lies on SL(3).
/// Since the start has equal segments, the reported length never exceeds the
/// group-path length.
pub fn geodesic(
    norm: &MinkowskiNorm,
    f0: &SL3Element,
    f1: &SL3Element,
    n: usize,
) -> Result<GeodesicResult> {
    if n < 8 {
        return Err(Error::InvalidInput(format!(
            "geodesic needs at least 8 segments, got {n}"
        )));
    }
    let step = segment_log(f0, f1)?;
    let mut nodes = Vec::with_capacity(n + 1);
    nodes.push(*f0);
    for i in 1..n {
        let t = i as f64 / n as f64;
        nodes.push(retract_sl3(&(*f0.value() * mat_exp(&step.scale(t))))?);
    }
    nodes.push(*f1);
    descend(norm, DiscretePath { nodes })
}

/// Re-solves at twice the resolution, warm-started from the subgroup
/// refinement of `coarse` (whose length is preserved by the injection).
pub fn refine_geodesic(norm: &MinkowskiNorm, coarse: &GeodesicResult) -> Result<GeodesicResult> {
    descend(norm, coarse.path.refined()?)
}

fn path_energy(norm: &MinkowskiNorm, nodes: &[SL3Element]) -> Result<(f64, f64)> {
    let n = (nodes.len() - 1) as f64;
    let mut energy = 0.0;
    let mut length = 0.0;
    for w in nodes.windows(2) {
        let l = norm.delta_i_projected(&segment_log(&w[0], &w[1])?);
        energy += l * l;
        length += l;
    }
    Ok((n * energy, length))
}

fn descend(norm: &MinkowskiNorm, path: DiscretePath) -> Result<GeodesicResult> {
    let mut nodes = path.nodes;
    let n = nodes.len() - 1;
    let interior = n - 1;
    let (mut energy, mut length) = path_energy(norm, &nodes)?;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < GEODESIC_MAX_ITERATIONS {
        iterations += 1;
        // segment quantities
        let mut seg_a = Vec::with_capacity(n);
        let mut seg_g = Vec::with_capacity(n);
        for w in nodes.windows(2) {
            let a = *w[0].inverse().value() * *w[1].value();
            let x = mat_log(&a)?;
            seg_g.push(norm.grad_sq(&x));
            seg_a.push(a);
        }
        let nf = n as f64;
        let mut grad = vec![Mat3::zeros(); interior];
        for (k, g) in grad.iter_mut().enumerate() {
            let i = k + 1;
            let a_prev = seg_a[i - 1].transpose();
            let left = a_prev * log_frechet(&a_prev, &seg_g[i - 1])?;
            let a_next = seg_a[i].transpose();
            let right = log_frechet(&a_next, &seg_g[i])? * a_next;
            *g = project_sl3(&(left - right).scale(nf)).into_inner();
        }
        let gnorm_sq: f64 = grad.iter().map(Mat3::norm_sq).sum();
        if gnorm_sq.sqrt() <= 1e-14 * (1.0 + energy) {
            converged = true;
            break;
        }
        let dir = precondition(&grad, nf * norm.hessian_scale());
        let slope: f64 = grad.iter().zip(&dir).map(|(g, d)| g.dot(d)).sum();
        if slope >= 0.0 {
            // preconditioner is SPD, so this only happens at round-off level
            converged = true;
            break;
        }
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..50 {
            let trial = shifted(&nodes, &dir, alpha);
            if let Ok(trial) = trial {
                if let Ok((e, l)) = path_energy(norm, &trial) {
                    if e <= energy + 1e-4 * alpha * slope {
                        accepted = Some((trial, e, l));
                        break;
                    }
                }
            }
            alpha *= 0.5;
        }
        let Some((trial, e, l)) = accepted else {
            converged = true;
            break;
        };
        let decrease = (length - l) / length.max(f64::MIN_POSITIVE);
        nodes = trial;
        energy = e;
        length = l;
        if decrease.abs() < GEODESIC_REL_TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence {
            iterations,
            residual: energy,
        });
    }
    let path = DiscretePath { nodes };
    let length = finsler_length(norm, &path)?;
    Ok(GeodesicResult {
        path,
        length,
        converged,
        iterations,
    })
}

fn shifted(nodes: &[SL3Element], dir: &[Mat3], alpha: f64) -> Result<Vec<SL3Element>> {
    let mut out = nodes.to_vec();
    for (k, d) in dir.iter().enumerate() {
        let p = &nodes[k + 1];
        out[k + 1] = retract_sl3(&(*p.value() * mat_exp(&d.scale(alpha))))?;
    }
    Ok(out)
}

/// Solves `scale · tridiag(-1, 2, -1) Z = -g` entrywise (Thomas algorithm).
fn precondition(grad: &[Mat3], scale: f64) -> Vec<Mat3> {
    let m = grad.len();
    let mut c = vec![0.0; m];
    let mut d = vec![Mat3::zeros(); m];
    for i in 0..m {
        let (c_prev, d_prev) = if i > 0 { (c[i - 1], d[i - 1]) } else { (0.0, Mat3::zeros()) };
        let denom = 2.0 + c_prev;
        c[i] = -1.0 / denom;
        d[i] = (grad[i].scale(-1.0 / scale) + d_prev).scale(1.0 / denom);
    }
    for i in (0..m.saturating_sub(1)).rev() {
        let next = d[i + 1];
        d[i] -= next.scale(c[i]);
    }
    d
}

/// Closed-form geodesic from the identity for the left-invariant Frobenius
/// metric: `exp(A^T) exp(A - A^T)`.
fn geodesic_from_identity(a: &Mat3) -> Mat3 {
    mat_exp(&a.transpose()) * mat_exp(&(*a - a.transpose()))
}

fn sl3_basis() -> [Mat3; 8] {
    [
        Mat3::unit(0, 1),
        Mat3::unit(0, 2),
        Mat3::unit(1, 0),
        Mat3::unit(1, 2),
        Mat3::unit(2, 0),
        Mat3::unit(2, 1),
        Mat3::diag(1.0, -1.0, 0.0),
        Mat3::diag(0.0, 1.0, -1.0),
    ]
}

fn coords(m: &Mat3) -> [f64; 8] {
    // inverse of the basis map for trace-free m
    [
        m[(0, 1)],
        m[(0, 2)],
        m[(1, 0)],
        m[(1, 2)],
        m[(2, 0)],
        m[(2, 1)],
        m[(0, 0)],
        -m[(2, 2)],
    ]
}

fn from_coords(c: &[f64; 8]) -> Mat3 {
    let basis = sl3_basis();
    let mut out = Mat3::zeros();
    for (b, x) in basis.iter().zip(c) {
        out += b.scale(*x);
    }
    out
}

/// Solves a small dense system in place by partial-pivot elimination.
fn solve_small<const N: usize>(mut a: [[f64; N]; N], mut b: [f64; N]) -> Option<[f64; N]> {
    for c in 0..N {
        let p = (c..N).max_by(|&x, &y| a[x][c].abs().total_cmp(&a[y][c].abs()))?;
        if a[p][c].abs() < 1e-300 {
            return None;
        }
        a.swap(c, p);
        b.swap(c, p);
        for r in c + 1..N {
            let f = a[r][c] / a[c][c];
            for k in c..N {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = [0.0; N];
    for r in (0..N).rev() {
        let mut s = b[r];
        for k in r + 1..N {
            s -= a[r][k] * x[k];
        }
        x[r] = s / a[r][r];
    }
    Some(x)
}

/// Left-trivialized initial velocity `A ∈ sl(3)` of the geodesic from the
/// identity to `target`, by Newton iteration on the closed form.
fn log_coordinates(target: &Mat3) -> Result<Mat3> {
    let mut a = project_sl3(&mat_log(target)?).into_inner();
    let residual = |a: &Mat3| -> Result<[f64; 8]> {
        let g = geodesic_from_identity(a);
        let r = mat_log(&(g.inverse()? * *target))?;
        Ok(coords(&project_sl3(&r).into_inner()))
    };
    let basis = sl3_basis();
    let mut r = residual(&a)?;
    for _ in 0..60 {
        let rn = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        if rn < 1e-14 * (1.0 + a.norm()) {
            return Ok(a);
        }
        let h = 1e-7;
        let mut jac = [[0.0; 8]; 8];
        for (k, b) in basis.iter().enumerate() {
            let rp = residual(&(a + b.scale(h)))?;
            let rm = residual(&(a - b.scale(h)))?;
            for row in 0..8 {
                jac[row][k] = (rp[row] - rm[row]) / (2.0 * h);
            }
        }
        let neg: [f64; 8] = r.map(|x| -x);
        let step = solve_small(jac, neg)
            .ok_or_else(|| Error::LogDivergence("singular geodesic Jacobian".into()))?;
        let mut t = 1.0;
        loop {
            let cand = a + from_coords(&step).scale(t);
            if let Ok(rc) = residual(&cand) {
                let rcn = rc.iter().map(|x| x * x).sum::<f64>().sqrt();
                if rcn < rn || t < 1e-3 {
                    a = cand;
                    r = rc;
                    break;
                }
            }
            t *= 0.5;
        }
    }
    let rn = r.iter().map(|x| x * x).sum::<f64>().sqrt();
    if rn < 1e-10 {
        return Ok(a);
    }
    Err(Error::NoConvergence {
        iterations: 60,
        residual: rn,
    })
}

/// Endpoint of the unit-time geodesic from `f` with velocity `m ∈ T_F SL(3)`.
pub fn exp_map(norm: &MinkowskiNorm, f: &SL3Element, m: &Mat3) -> Result<SL3Element> {
    norm.validate()?;
    let v = *f.inverse().value() * *m;
    if v.trace().abs() > TANGENT_TOL * (1.0 + v.max_abs()) {
        return Err(Error::NotTangent { trace: v.trace() });
    }
    if v.max_abs() == 0.0 {
        return Ok(*f);
    }
    let v = project_sl3(&v).into_inner();
    retract_sl3(&(*f.value() * geodesic_from_identity(&v)))
}

/// Initial velocity at `f` (in `T_F SL(3)`) of the shortest path to `g`;
/// `Δ(F, log_map(F, G)) = D(F, G)`.
pub fn log_map(norm: &MinkowskiNorm, f: &SL3Element, g: &SL3Element) -> Result<Mat3> {
    norm.validate()?;
    let a = log_coordinates(&(*f.inverse().value() * *g.value()))?;
    Ok(*f.value() * a)
}

/// `D(F0, F1)` through the exponential-map inverse.
pub fn distance(norm: &MinkowskiNorm, f0: &SL3Element, f1: &SL3Element) -> Result<f64> {
    let a = log_coordinates(&(*f0.inverse().value() * *f1.value()))?;
    Ok(norm.delta_i_projected(&a))
}

/// `(D(A, B) + D(B, A)) / 2`.
pub fn sym_distance(norm: &MinkowskiNorm, a: &SL3Element, b: &SL3Element) -> Result<f64> {
    let ab = distance(norm, a, b)?;
    if norm.is_symmetric() {
        return Ok(ab);
    }
    Ok(0.5 * (ab + distance(norm, b, a)?))
}

/// Symmetrized distance to the identity, with a cheap acceptance test first:
/// the group path is admissible, so `D(I, P) <= Δ_I(log P)`.
pub fn distance_to_identity_within(
    norm: &MinkowskiNorm,
    p: &SL3Element,
    radius: f64,
) -> Result<bool> {
    if let Ok(l) = mat_log(p.value()) {
        if norm.is_symmetric() && norm.delta_i_projected(&l) <= radius {
            return Ok(true);
        }
    }
    match sym_distance(norm, &SL3Element::identity(), p) {
        Ok(d) => Ok(d <= radius),
        Err(Error::NoConvergence { .. }) | Err(Error::LogDivergence(_)) => Ok(false),
        Err(e) => Err(e),
    }
}

/// Interpolation scheme for [`gamma_interp`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum InterpMode {
    /// Sample the shortest path between the endpoints.
    GeodesicExact,
    /// `F exp(t log(F^{-1} G))`: same endpoints, cheaper.
    #[default]
    GroupExp,
}

impl std::str::FromStr for InterpMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "geodesic-exact" => Ok(InterpMode::GeodesicExact),
            "group-exp" => Ok(InterpMode::GroupExp),
            other => Err(Error::InvalidInput(format!(
                "unknown mode {other:?} (expected geodesic-exact or group-exp)"
            ))),
        }
    }
}

/// Path `γ(t, F, G)` between points of K with a per-pair cache of the
/// geodesic's initial velocity.
#[derive(Debug)]
pub struct Interpolator {
    pub norm: MinkowskiNorm,
    pub k_radius: f64,
    pub mode: InterpMode,
    cache: Mutex<HashMap<[u64; 18], Mat3>>,
}

fn pair_key(f: &SL3Element, g: &SL3Element) -> [u64; 18] {
    let mut key = [0u64; 18];
    for (k, x) in f
        .value()
        .to_row_vec()
        .into_iter()
        .chain(g.value().to_row_vec())
        .enumerate()
    {
        key[k] = x.to_bits();
    }
    key
}

impl Interpolator {
    pub fn new(norm: MinkowskiNorm, k_radius: f64, mode: InterpMode) -> Self {
        Self {
            norm,
            k_radius,
            mode,
            cache: Mutex::new(HashMap::new()),
        }
    }

    /// Errors with `OutsideK` unless `D_sym(I, p) <= radius + K_SLACK`.
    pub fn check_in_k(&self, p: &SL3Element) -> Result<()> {
        if distance_to_identity_within(&self.norm, p, self.k_radius + K_SLACK)? {
            return Ok(());
        }
        let d = sym_distance(&self.norm, &SL3Element::identity(), p).unwrap_or(f64::INFINITY);
        Err(Error::OutsideK {
            distance: d,
            radius: self.k_radius,
        })
    }

    /// `γ(t, F, G)` with K-membership checks on both endpoints.
    pub fn eval(&self, t: f64, f: &SL3Element, g: &SL3Element) -> Result<SL3Element> {
        self.check_in_k(f)?;
        self.check_in_k(g)?;
        self.eval_in_k(t, f, g)
    }

    /// `γ(t, F, G)` for endpoints already known to lie in K.
    pub fn eval_in_k(&self, t: f64, f: &SL3Element, g: &SL3Element) -> Result<SL3Element> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidInput(format!("t = {t} outside [0, 1]")));
        }
        if t == 0.0 {
            return Ok(*f);
        }
        if t == 1.0 {
            return Ok(*g);
        }
        match self.mode {
            InterpMode::GroupExp => group_interp(t, f, g),
            InterpMode::GeodesicExact => {
                let a = self.velocity(f, g)?;
                retract_sl3(&(*f.value() * geodesic_from_identity(&a.scale(t))))
            }
        }
    }

    fn velocity(&self, f: &SL3Element, g: &SL3Element) -> Result<Mat3> {
        let key = pair_key(f, g);
        if let Some(a) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok(*a);
        }
        let a = log_coordinates(&(*f.inverse().value() * *g.value()))?;
        self.cache.lock().expect("cache lock").insert(key, a);
        Ok(a)
    }

    pub fn cache_len(&self) -> usize {
        self.cache.lock().expect("cache lock").len()
    }

    /// `max_t |γ̇(t)| / |G - F|` by central differences on `samples` intervals.
    pub fn velocity_ratio(&self, f: &SL3Element, g: &SL3Element, samples: usize) -> Result<f64> {
        let gap = (*g.value() - *f.value()).norm();
        if gap == 0.0 {
            return Ok(0.0);
        }
        let dt = 1.0 / samples as f64;
        let pts = (0..=samples)
            .map(|k| self.eval_in_k(k as f64 * dt, f, g).map(SL3Element::into_inner))
            .collect::<Result<Vec<_>>>()?;
        let mut best: f64 = 0.0;
        for k in 0..=samples {
            let v = if k == 0 {
                (pts[1] - pts[0]).scale(1.0 / dt)
            } else if k == samples {
                (pts[k] - pts[k - 1]).scale(1.0 / dt)
            } else {
                (pts[k + 1] - pts[k - 1]).scale(0.5 / dt)
            };
            best = best.max(v.norm());
        }
        Ok(best / gap)
    }
}

/// `F exp(t log(F^{-1} G))`, retracted.
pub fn group_interp(t: f64, f: &SL3Element, g: &SL3Element) -> Result<SL3Element> {
    let step = segment_log(f, g)?;
    retract_sl3(&(*f.value() * mat_exp(&step.scale(t))))
}

/// `γ(t, F, G)` without a cache.
pub fn gamma_interp(
    norm: &MinkowskiNorm,
    k_radius: f64,
    t: f64,
    f: &SL3Element,
    g: &SL3Element,
    mode: InterpMode,
) -> Result<SL3Element> {
    Interpolator::new(*norm, k_radius, mode).eval(t, f, g)
}

/// Velocity constant of a discrete path, `max_i n |Φ_{i+1} - Φ_i| / |Φ_n - Φ_0|`.
pub fn path_velocity_ratio(path: &DiscretePath) -> f64 {
    let n = path.segments() as f64;
    let gap = (*path.last().value() - *path.first().value()).norm();
    if gap == 0.0 {
        return 0.0;
    }
    path.nodes
        .windows(2)
        .map(|w| (*w[1].value() - *w[0].value()).norm() * n)
        .fold(0.0, f64::max)
        / gap
}

/// Draws a point of `{D_sym(I, ·) <= radius}` as the geodesic image of a
/// random sl(3) direction with length at most `radius`.
pub fn sample_in_k<R: Rng + ?Sized>(
    rng: &mut R,
    norm: &MinkowskiNorm,
    radius: f64,
) -> SL3Element {
    let mut m = Mat3::zeros();
    for i in 0..3 {
        for j in 0..3 {
            m.m[i][j] = rng.gen_range(-1.0..1.0);
        }
    }
    let dir = project_sl3(&m).into_inner();
    let len = radius * rng.gen_range(0.0f64..1.0).powf(1.0 / 8.0);
    let a = dir.scale(len / norm.delta_i_projected(&dir));
    retract_sl3(&geodesic_from_identity(&a)).expect("geodesic image has unit determinant")
}

/// Point at exact distance `dist` from the identity along a fixed direction.
pub fn point_at_distance(norm: &MinkowskiNorm, direction: &Mat3, dist: f64) -> Result<SL3Element> {
    let dir = project_sl3(direction).into_inner();
    let a = dir.scale(dist / norm.delta_i_projected(&dir));
    retract_sl3(&geodesic_from_identity(&a))
}

/// Failure record for [`convexity_probe`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProbeFailure {
    pub pair: usize,
    pub f: Mat3,
    pub g: Mat3,
    pub excursion: f64,
}

/// Empirical geodesic-convexity report for the ball K.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProbeReport {
    pub k_radius: f64,
    pub pairs: usize,
    pub passed: usize,
    pub pass_rate: f64,
    /// Largest `D_sym(I, node) - radius` over all nodes (negative when inside).
    pub worst_excursion: f64,
    pub failures: Vec<ProbeFailure>,
}

/// Tolerance on node excursions outside K in [`convexity_probe`].
pub const PROBE_TOL: f64 = 1e-4;

/// Solves geodesics between random pairs of K and checks that every path
/// node stays in K.
pub fn convexity_probe<R: Rng + ?Sized>(
    norm: &MinkowskiNorm,
    k_radius: f64,
    pairs: usize,
    segments: usize,
    rng: &mut R,
) -> Result<ProbeReport> {
    if pairs == 0 {
        return Err(Error::InvalidInput("probe needs at least one pair".into()));
    }
    let id = SL3Element::identity();
    let mut passed = 0;
    let mut worst = f64::NEG_INFINITY;
    let mut failures = Vec::new();
    for pair in 0..pairs {
        let f = sample_in_k(rng, norm, k_radius);
        let g = sample_in_k(rng, norm, k_radius);
        let geo = geodesic(norm, &f, &g, segments)?;
        let mut excursion = f64::NEG_INFINITY;
        for node in geo.path.nodes() {
            let d = sym_distance(norm, &id, node).unwrap_or(f64::INFINITY);
            excursion = excursion.max(d - k_radius);
        }
        worst = worst.max(excursion);
        if excursion <= PROBE_TOL {
            passed += 1;
        } else {
            failures.push(ProbeFailure {
                pair,
                f: *f.value(),
                g: *g.value(),
                excursion,
            });
        }
    }
    Ok(ProbeReport {
        k_radius,
        pairs,
        passed,
        pass_rate: passed as f64 / pairs as f64,
        worst_excursion: worst,
        failures,
    })
}
