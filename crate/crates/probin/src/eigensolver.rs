//! Principal eigenpair of the mixed Dirichlet–Robin p-Laplacian and of the
//! two-phase coated problem.
//!
//! Outer scheme: inverse-power iteration. Given u_k, minimize the strictly
//! convex inner energy
//!
//! ```text
//! E(v) = (1/p)∫ σ|∇v|^p + (1/p)∫_γ h|v|^p − ∫ |u_k|^{p-2}u_k v
//! ```
//!
//! over {v = 0 on the essential boundary}, then normalize u_{k+1} = v/‖v‖_p
//! and set λ_{k+1} = energy(u_{k+1}). At a fixed point v = λ^{-1/(p-1)}u, so
//! the iteration converges to the discrete weak eigenpair. A positive
//! initializer keeps every iterate positive, selecting the principal branch.
//!
//! Inner solves use damped Newton: the gradient is exact (raw |∇v|^{p-2}∇v),
//! the Hessian uses the δ-regularized coefficient so it stays definite at
//! critical points of v; for p = 2 the Hessian is exact and one step solves
//! the problem. The regularization is a solver detail: it shifts the inner
//! minimizer by o(tolerance) and the converged eigenpair is δ-independent.

use crate::domain::{BoundaryLabel, DiscreteDomain, RegionTag};
use crate::error::{Error, Result};
use crate::linalg::{factor_spd, pcg, SparseSym};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Nonnegative Robin coefficient h on γ: one value per Robin face, or one
/// value per mesh node (read only on γ).
#[derive(Debug, Clone, PartialEq)]
pub enum RobinField {
    PerFace(Vec<f64>),
    Nodal(Vec<f64>),
}

impl RobinField {
    pub fn constant(domain: &DiscreteDomain, value: f64) -> Result<Self> {
        let f = RobinField::PerFace(vec![value; domain.robin_faces().count()]);
        f.validate(domain)?;
        Ok(f)
    }

    pub fn validate(&self, domain: &DiscreteDomain) -> Result<()> {
        let (vals, expect) = match self {
            RobinField::PerFace(v) => (v, domain.robin_faces().count()),
            RobinField::Nodal(v) => (v, domain.n_nodes()),
        };
        if vals.len() != expect {
            return Err(Error::InvalidParameter(format!(
                "Robin field has {} values, domain needs {}",
                vals.len(),
                expect
            )));
        }
        if vals.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidParameter(
                "Robin coefficient must be finite and nonnegative".into(),
            ));
        }
        Ok(())
    }

    /// Value at a quadrature point of Robin face `face_idx` (position
    /// `robin_pos` in Robin-face order) with face basis values `bas`.
    pub(crate) fn at(
        &self,
        domain: &DiscreteDomain,
        robin_pos: usize,
        face_idx: usize,
        bas: &[f64; 2],
    ) -> f64 {
        match self {
            RobinField::PerFace(v) => v[robin_pos],
            RobinField::Nodal(v) => {
                let ns = domain.faces()[face_idx].node_slice();
                ns.iter()
                    .zip(bas)
                    .map(|(&n, &b)| v[n as usize] * b)
                    .sum()
            }
        }
    }

    /// Per-Robin-face mean values (PerFace values as-is, Nodal averaged over
    /// each face's nodes), in Robin-face order.
    pub fn face_means(&self, domain: &DiscreteDomain) -> Vec<f64> {
        match self {
            RobinField::PerFace(v) => v.clone(),
            RobinField::Nodal(v) => domain
                .robin_faces()
                .map(|f| {
                    let ns = domain.faces()[f].node_slice();
                    ns.iter().map(|&n| v[n as usize]).sum::<f64>() / ns.len() as f64
                })
                .collect(),
        }
    }

    /// Shape and finiteness check for a signed direction field; unlike
    /// `validate`, negative values are allowed.
    pub fn validate_direction(&self, domain: &DiscreteDomain) -> Result<()> {
        let (vals, expect) = match self {
            RobinField::PerFace(v) => (v, domain.robin_faces().count()),
            RobinField::Nodal(v) => (v, domain.n_nodes()),
        };
        if vals.len() != expect {
            return Err(Error::InvalidParameter(format!(
                "boundary field has {} values, domain needs {}",
                vals.len(),
                expect
            )));
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "boundary field must be finite".into(),
            ));
        }
        Ok(())
    }

    /// self + t·xi; both fields must share representation and length.
    pub fn try_axpy(&self, t: f64, xi: &RobinField) -> Result<RobinField> {
        match (self, xi) {
            (RobinField::PerFace(a), RobinField::PerFace(b)) if a.len() == b.len() => Ok(
                RobinField::PerFace(a.iter().zip(b).map(|(x, y)| x + t * y).collect()),
            ),
            (RobinField::Nodal(a), RobinField::Nodal(b)) if a.len() == b.len() => Ok(
                RobinField::Nodal(a.iter().zip(b).map(|(x, y)| x + t * y).collect()),
            ),
            _ => Err(Error::InvalidParameter(
                "Robin fields have mismatched representations".into(),
            )),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EigenSolveSettings {
    /// Relative eigenvalue stopping tolerance.
    pub tol_lambda: f64,
    /// Sup-norm stopping tolerance on the normalized iterate step.
    pub tol_u: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    /// Hessian regularization for the inner Newton solves; `None` picks
    /// 1e-8 times the mesh-scale gradient estimate (1/mesh size).
    pub delta_inner: Option<f64>,
    /// Line-search backtracking factor in (0, 1).
    pub backtrack: f64,
    /// Seed for the random positive initializer.
    pub seed: u64,
}

impl Default for EigenSolveSettings {
    fn default() -> Self {
        EigenSolveSettings {
            tol_lambda: 1e-10,
            tol_u: 1e-8,
            max_outer: 400,
            max_inner: 60,
            delta_inner: None,
            backtrack: 0.5,
            seed: 0,
        }
    }
}

impl EigenSolveSettings {
    fn validate(&self) -> Result<()> {
        if !(self.tol_lambda > 0.0 && self.tol_u > 0.0) {
            return Err(Error::InvalidParameter("tolerances must be positive".into()));
        }
        if !(self.backtrack > 0.0 && self.backtrack < 1.0) {
            return Err(Error::InvalidParameter("backtrack factor must be in (0, 1)".into()));
        }
        if self.max_outer == 0 || self.max_inner == 0 {
            return Err(Error::InvalidParameter("iteration limits must be positive".into()));
        }
        if let Some(d) = self.delta_inner {
            if !(d > 0.0 && d.is_finite()) {
                return Err(Error::InvalidParameter("delta_inner must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Normalized positive principal eigenpair.
#[derive(Debug, Clone)]
pub struct Eigenpair {
    pub lambda: f64,
    pub u: Vec<f64>,
    pub p: f64,
    /// ℓ2 norm of the discrete weak-form residual over free nodes.
    pub residual_norm: f64,
    pub iterations: usize,
}

/// Eigenpair of the coated two-phase problem.
#[derive(Debug, Clone)]
pub struct TwoPhaseResult {
    pub lambda1: f64,
    /// Nodal eigenfunction on the merged domain Ω_ε.
    pub phi: Vec<f64>,
    /// ∫_{Σ_ε} |Φ|^p over the coating layer.
    pub coating_mass: f64,
    /// Φ restricted to the substrate nodes (base-domain indexing).
    pub substrate_restriction: Vec<f64>,
    pub residual_norm: f64,
    pub iterations: usize,
}

fn check_p(p: f64) -> Result<()> {
    if !(p > 1.0 && p.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "exponent p must lie in (1, inf), got {p}"
        )));
    }
    Ok(())
}

fn check_constrained(domain: &DiscreteDomain, u: &[f64]) -> Result<()> {
    if u.len() != domain.n_nodes() {
        return Err(Error::InvalidParameter(format!(
            "vector has {} entries, domain has {} nodes",
            u.len(),
            domain.n_nodes()
        )));
    }
    let scale = u.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    for n in domain.essential_nodes() {
        if u[n as usize].abs() > 1e-12 * (1.0 + scale) {
            return Err(Error::ConstraintViolation(format!(
                "vector is nonzero at constrained node {n}"
            )));
        }
    }
    Ok(())
}

/// Σ_q over all elements of w·r·f(value, element) — shared quadrature loop.
pub(crate) fn per_element_weighted_volume(domain: &DiscreteDomain, e: usize) -> f64 {
    (0..domain.quad_points_per_elem())
        .map(|q| domain.qp_weight(e, q) * domain.qp_radial(e, q))
        .sum()
}

/// ∫_Ω |u|^p by element quadrature of the P1 interpolant.
pub fn lp_volume_integral(domain: &DiscreteDomain, p: f64, u: &[f64]) -> f64 {
    let mut total = 0.0;
    for e in 0..domain.n_elems() {
        for q in 0..domain.quad_points_per_elem() {
            let v = domain.value_at(e, q, u);
            total += domain.qp_weight(e, q) * domain.qp_radial(e, q) * v.abs().powf(p);
        }
    }
    total
}

/// ∫_γ h|u|^p by face quadrature.
pub(crate) fn robin_form_value(
    domain: &DiscreteDomain,
    p: f64,
    h: &RobinField,
    u: &[f64],
) -> f64 {
    let mut total = 0.0;
    for (pos, f) in domain.robin_faces().enumerate() {
        let ns = domain.faces()[f].node_slice();
        for (w, bas) in domain.face_quadrature(f) {
            let hv = h.at(domain, pos, f, &bas);
            let uv: f64 = ns.iter().zip(&bas).map(|(&n, &b)| u[n as usize] * b).sum();
            total += w * hv * uv.abs().powf(p);
        }
    }
    total
}

/// ∫ σ|∇u|^p with per-element conductivity.
fn conduction_energy(domain: &DiscreteDomain, p: f64, sigma: &[f64], u: &[f64]) -> f64 {
    let mut total = 0.0;
    for e in 0..domain.n_elems() {
        let g = domain.grad_of(e, u);
        let gn = (g[0] * g[0] + g[1] * g[1]).sqrt();
        total += sigma[e] * gn.powf(p) * per_element_weighted_volume(domain, e);
    }
    total
}

/// b_i = ∫ |u|^{p-2} u φ_i (the normalized power-iteration source; also the
/// vector m of the mass pairing).
pub(crate) fn weighted_source(domain: &DiscreteDomain, p: f64, u: &[f64]) -> Vec<f64> {
    let mut b = vec![0.0; domain.n_nodes()];
    for e in 0..domain.n_elems() {
        let en = domain.elem(e);
        for q in 0..domain.quad_points_per_elem() {
            let v = domain.value_at(e, q, u);
            let w = domain.qp_weight(e, q) * domain.qp_radial(e, q) * v.abs().powf(p - 2.0) * v;
            for (a, &n) in en.iter().enumerate() {
                b[n as usize] += w * domain.qp_basis(e, q)[a];
            }
        }
    }
    b
}

/// g_i = ∫_γ ξ |u|^{p-2} u φ_i for a boundary field ξ.
pub(crate) fn robin_weighted_source(
    domain: &DiscreteDomain,
    p: f64,
    xi: &RobinField,
    u: &[f64],
) -> Vec<f64> {
    let mut g = vec![0.0; domain.n_nodes()];
    for (pos, f) in domain.robin_faces().enumerate() {
        let ns = domain.faces()[f].node_slice();
        for (w, bas) in domain.face_quadrature(f) {
            let xv = xi.at(domain, pos, f, &bas);
            let uv: f64 = ns.iter().zip(&bas).map(|(&n, &b)| u[n as usize] * b).sum();
            let c = w * xv * uv.abs().powf(p - 2.0) * uv;
            for (k, &n) in ns.iter().enumerate() {
                g[n as usize] += c * bas[k];
            }
        }
    }
    g
}

/// Full (unconstrained) weak-form residual rows:
/// R_i = ∫ σ|∇u|^{p-2}∇u·∇φ_i + ∫_γ h|u|^{p-2}u φ_i − λ∫ |u|^{p-2}u φ_i.
pub(crate) fn weak_residual(
    domain: &DiscreteDomain,
    p: f64,
    sigma: &[f64],
    h: Option<&RobinField>,
    lambda: f64,
    u: &[f64],
) -> Vec<f64> {
    let mut r = raw_gradient(domain, p, sigma, h, u);
    let b = weighted_source(domain, p, u);
    for i in 0..r.len() {
        r[i] -= lambda * b[i];
    }
    r
}

/// Gradient of the p-energy (exact, unregularized):
/// G_i = ∫ σ|∇v|^{p-2}∇v·∇φ_i + ∫_γ h|v|^{p-2}v φ_i.
fn raw_gradient(
    domain: &DiscreteDomain,
    p: f64,
    sigma: &[f64],
    h: Option<&RobinField>,
    v: &[f64],
) -> Vec<f64> {
    let dim = domain.coord_dim();
    let mut grad = vec![0.0; domain.n_nodes()];
    for e in 0..domain.n_elems() {
        let g = domain.grad_of(e, v);
        let gn = (g[0] * g[0] + g[1] * g[1]).sqrt();
        if gn == 0.0 && p < 2.0 {
            continue; // |∇v|^{p-2}∇v extends by 0 at ∇v = 0 for p > 1
        }
        let coef = sigma[e] * gn.powf(p - 2.0) * per_element_weighted_volume(domain, e);
        let en = domain.elem(e);
        let gr = domain.elem_grads(e);
        for (a, &n) in en.iter().enumerate() {
            let mut dot = 0.0;
            for c in 0..dim {
                dot += g[c] * gr[a * dim + c];
            }
            grad[n as usize] += coef * dot;
        }
    }
    if let Some(h) = h {
        let bg = robin_weighted_source(domain, p, h, v);
        for i in 0..grad.len() {
            grad[i] += bg[i];
        }
    }
    grad
}

/// Regularized Hessian triplets of the inner energy at v.
fn hessian_triplets(
    domain: &DiscreteDomain,
    p: f64,
    sigma: &[f64],
    h: Option<&RobinField>,
    v: &[f64],
    delta: f64,
    essential: &[bool],
) -> Vec<(u32, u32, f64)> {
    let dim = domain.coord_dim();
    let k = domain.elem_nodes();
    let mut trips: Vec<(u32, u32, f64)> = Vec::with_capacity(domain.n_elems() * k * k + 64);
    for e in 0..domain.n_elems() {
        let g = domain.grad_of(e, v);
        let g2 = g[0] * g[0] + g[1] * g[1];
        let s2 = g2 + delta * delta;
        let s = s2.sqrt();
        // A_δ(ξ) = s^{p-2} I + (p−2) s^{p-4} ξξᵀ, s² = |ξ|² + δ²
        let c_iso = s.powf(p - 2.0);
        let c_dir = (p - 2.0) * s.powf(p - 4.0);
        let wv = sigma[e] * per_element_weighted_volume(domain, e);
        let en = domain.elem(e);
        let gr = domain.elem_grads(e);
        for a in 0..k {
            let na = en[a];
            if essential[na as usize] {
                continue;
            }
            let mut ga_dot_g = 0.0;
            for c in 0..dim {
                ga_dot_g += gr[a * dim + c] * g[c];
            }
            for b in 0..k {
                let nb = en[b];
                if essential[nb as usize] {
                    continue;
                }
                let mut gab = 0.0;
                let mut gb_dot_g = 0.0;
                for c in 0..dim {
                    gab += gr[a * dim + c] * gr[b * dim + c];
                    gb_dot_g += gr[b * dim + c] * g[c];
                }
                let val = wv * (c_iso * gab + c_dir * ga_dot_g * gb_dot_g);
                trips.push((na, nb, val));
            }
        }
    }
    if let Some(h) = h {
        for (pos, f) in domain.robin_faces().enumerate() {
            let ns = domain.faces()[f].node_slice();
            for (w, bas) in domain.face_quadrature(f) {
                let hv = h.at(domain, pos, f, &bas);
                if hv == 0.0 {
                    continue;
                }
                let uv: f64 = ns.iter().zip(&bas).map(|(&n, &b)| v[n as usize] * b).sum();
                let sb = (uv * uv + delta * delta).sqrt();
                let coef = w * hv * (p - 1.0) * sb.powf(p - 2.0);
                for (a, &na) in ns.iter().enumerate() {
                    if essential[na as usize] {
                        continue;
                    }
                    for (b, &nb) in ns.iter().enumerate() {
                        if essential[nb as usize] {
                            continue;
                        }
                        trips.push((na, nb, coef * bas[a] * bas[b]));
                    }
                }
            }
        }
    }
    for (i, &ess) in essential.iter().enumerate() {
        if ess {
            trips.push((i as u32, i as u32, 1.0));
        }
    }
    trips
}

/// Inner energy E(v) = (1/p)∫σ|∇v|^p + (1/p)∫_γ h|v|^p − b·v.
fn inner_energy(
    domain: &DiscreteDomain,
    p: f64,
    sigma: &[f64],
    h: Option<&RobinField>,
    b: &[f64],
    v: &[f64],
) -> f64 {
    let mut e = conduction_energy(domain, p, sigma, v) / p;
    if let Some(h) = h {
        e += robin_form_value(domain, p, h, v) / p;
    }
    e - b.iter().zip(v).map(|(x, y)| x * y).sum::<f64>()
}

fn solve_linear_system(mat: &SparseSym, rhs: &[f64]) -> Result<Vec<f64>> {
    match factor_spd(mat) {
        Ok(f) => {
            let mut x = vec![0.0; rhs.len()];
            f.solve_into(rhs, &mut x);
            if f.is_direct() {
                return Ok(x);
            }
            // Jacobi factor: use it as a PCG preconditioner instead
            let fr = &f;
            pcg(
                |v, out| mat.matvec(v, out),
                move |r, z| fr.solve_into(r, z),
                rhs,
                1e-13,
                40 * rhs.len() + 200,
            )
            .map(|(x, _)| x)
            .map_err(Error::LinearizationNotInvertible)
        }
        Err(_) => Err(Error::LinearizationNotInvertible(
            "inner Newton matrix is not positive definite".into(),
        )),
    }
}

struct InnerOutcome {
    v: Vec<f64>,
    grad_norm: f64,
    converged: bool,
}

#[allow(clippy::too_many_arguments)]
fn inner_minimize(
    domain: &DiscreteDomain,
    p: f64,
    sigma: &[f64],
    h: Option<&RobinField>,
    essential: &[bool],
    b: &[f64],
    v0: Vec<f64>,
    delta: f64,
    settings: &EigenSolveSettings,
) -> Result<InnerOutcome> {
    let n = domain.n_nodes();
    let mut v = v0;
    let scale = b.iter().fold(0.0_f64, |m, x| m.max(x.abs())).max(1.0);
    let tol = 1e-13 * scale;
    let mut grad_norm = f64::INFINITY;
    for _ in 0..settings.max_inner {
        let mut g = raw_gradient(domain, p, sigma, h, &v);
        for i in 0..n {
            if essential[i] {
                g[i] = 0.0;
            } else {
                g[i] -= b[i];
            }
        }
        grad_norm = g.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
        if grad_norm <= tol {
            return Ok(InnerOutcome { v, grad_norm, converged: true });
        }
        let trips = hessian_triplets(domain, p, sigma, h, &v, delta, essential);
        let mat = SparseSym::from_triplets(n, trips);
        let mut d = solve_linear_system(&mat, &g)?;
        for x in d.iter_mut() {
            *x = -*x;
        }
        let gd: f64 = g.iter().zip(&d).map(|(a, c)| a * c).sum();
        if !(gd < 0.0) {
            // fall back to steepest descent if the regularized direction fails
            d = g.iter().map(|x| -x).collect();
        }
        let gd: f64 = g.iter().zip(&d).map(|(a, c)| a * c).sum();
        let e0 = inner_energy(domain, p, sigma, h, b, &v);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let trial: Vec<f64> = v.iter().zip(&d).map(|(x, y)| x + t * y).collect();
            let et = inner_energy(domain, p, sigma, h, b, &trial);
            if et <= e0 + 1e-4 * t * gd {
                v = trial;
                accepted = true;
                break;
            }
            t *= settings.backtrack;
        }
        if !accepted {
            // line search stalled at machine precision
            return Ok(InnerOutcome { v, grad_norm, converged: grad_norm <= 1e3 * tol });
        }
    }
    let converged = grad_norm <= 1e3 * tol;
    Ok(InnerOutcome { v, grad_norm, converged })
}

fn positive_initializer(domain: &DiscreteDomain, p: f64, essential: &[bool], seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u: Vec<f64> = (0..domain.n_nodes())
        .map(|_| 0.5 + rng.gen::<f64>())
        .collect();
    for (i, &ess) in essential.iter().enumerate() {
        if ess {
            u[i] = 0.0;
        }
    }
    let nrm = lp_volume_integral(domain, p, &u).powf(1.0 / p);
    for x in u.iter_mut() {
        *x /= nrm;
    }
    u
}

fn solve_core(
    domain: &DiscreteDomain,
    p: f64,
    sigma: &[f64],
    h: Option<&RobinField>,
    settings: &EigenSolveSettings,
) -> Result<Eigenpair> {
    check_p(p)?;
    settings.validate()?;
    if let Some(h) = h {
        h.validate(domain)?;
    }
    let essential = domain.essential_mask();
    if !essential.iter().any(|&e| e) {
        return Err(Error::UnsupportedProblem(
            "the essential boundary is empty; the problem has no principal eigenvalue gap".into(),
        ));
    }
    let delta = settings
        .delta_inner
        .unwrap_or(1e-8 / domain.mesh_size().max(f64::MIN_POSITIVE));
    let mut u = positive_initializer(domain, p, &essential, settings.seed);
    // the Rayleigh quotient is the bare numerator: ∫|u|^p = 1 by the initializer
    let mut lambda = conduction_energy(domain, p, sigma, &u)
        + h.map_or(0.0, |h| robin_form_value(domain, p, h, &u));
    let mut last_grad_norm = f64::INFINITY;
    for outer in 1..=settings.max_outer {
        let b = weighted_source(domain, p, &u);
        let warm: Vec<f64> = u
            .iter()
            .map(|x| x * lambda.max(f64::MIN_POSITIVE).powf(-1.0 / (p - 1.0)))
            .collect();
        let inner = inner_minimize(domain, p, sigma, h, &essential, &b, warm, delta, settings)?;
        last_grad_norm = inner.grad_norm;
        let mut v = inner.v;
        if v.iter().sum::<f64>() < 0.0 {
            for x in v.iter_mut() {
                *x = -*x;
            }
        }
        let nrm = lp_volume_integral(domain, p, &v).powf(1.0 / p);
        if !(nrm > 0.0 && nrm.is_finite()) {
            return Err(Error::DegenerateInput(
                "inverse-power iterate collapsed to zero".into(),
            ));
        }
        for x in v.iter_mut() {
            *x /= nrm;
        }
        let new_lambda = conduction_energy(domain, p, sigma, &v)
            + h.map_or(0.0, |h| robin_form_value(domain, p, h, &v));
        let du = u
            .iter()
            .zip(&v)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
        let dl = (new_lambda - lambda).abs();
        u = v;
        lambda = new_lambda;
        // A bitwise-stationary iterate is a fixed point of this deterministic map:
        // no later iteration can differ, so the inner optimizer's flag is moot.
        let frozen = dl == 0.0 && du == 0.0;
        if (inner.converged || frozen)
            && dl <= settings.tol_lambda * lambda.max(1e-300)
            && du <= settings.tol_u
        {
            let res = weak_residual(domain, p, sigma, h, lambda, &u);
            let residual_norm = res
                .iter()
                .enumerate()
                .filter(|(i, _)| !essential[*i])
                .map(|(_, r)| r * r)
                .sum::<f64>()
                .sqrt();
            let interior_ok = (0..domain.n_nodes()).all(|i| essential[i] || u[i] > 0.0);
            if !interior_ok {
                break; // positivity lost: report NoConvergence below
            }
            return Ok(Eigenpair {
                lambda,
                u,
                p,
                residual_norm,
                iterations: outer,
            });
        }
    }
    let res = weak_residual(domain, p, sigma, h, lambda, &u);
    let residual_norm = res
        .iter()
        .enumerate()
        .filter(|(i, _)| !essential[*i])
        .map(|(_, r)| r * r)
        .sum::<f64>()
        .sqrt();
    let _ = last_grad_norm;
    Err(Error::NoConvergence {
        best: Box::new(Eigenpair {
            lambda,
            u,
            p,
            residual_norm,
            iterations: settings.max_outer,
        }),
    })
}

/// ∫_Ω |∇u|^p dx + ∫_γ h|u|^p dσ for a vector vanishing on the essential
/// boundary.
pub fn energy(domain: &DiscreteDomain, p: f64, h: &RobinField, u: &[f64]) -> Result<f64> {
    check_p(p)?;
    h.validate(domain)?;
    check_constrained(domain, u)?;
    let sigma = vec![1.0; domain.n_elems()];
    Ok(conduction_energy(domain, p, &sigma, u) + robin_form_value(domain, p, h, u))
}

/// energy(u) / ∫|u|^p.
pub fn rayleigh_quotient(domain: &DiscreteDomain, p: f64, h: &RobinField, u: &[f64]) -> Result<f64> {
    let num = energy(domain, p, h, u)?;
    let den = lp_volume_integral(domain, p, u);
    if !(den > 0.0 && den.is_finite()) {
        return Err(Error::DegenerateInput(
            "Rayleigh quotient of a vector with zero L^p norm".into(),
        ));
    }
    Ok(num / den)
}

/// Normalized positive principal eigenpair of the mixed problem.
pub fn principal_eigenpair(
    domain: &DiscreteDomain,
    p: f64,
    h: &RobinField,
    settings: &EigenSolveSettings,
) -> Result<Eigenpair> {
    if domain.dirichlet_faces().next().is_none() {
        return Err(Error::UnsupportedProblem(
            "the Dirichlet part of the boundary is empty".into(),
        ));
    }
    let sigma = vec![1.0; domain.n_elems()];
    solve_core(domain, p, &sigma, Some(h), settings)
}

/// Principal eigenpair of the two-phase coated problem: conductivity 1 on the
/// substrate and ε^{p-1} in the coating, Dirichlet on the whole outer
/// boundary of Ω_ε.
pub fn two_phase_eigenpair(
    coated: &crate::domain::CoatedDomain,
    p: f64,
    settings: &EigenSolveSettings,
) -> Result<TwoPhaseResult> {
    check_p(p)?;
    let m = &coated.merged;
    let sig_c = coated.epsilon.powf(p - 1.0);
    let sigma: Vec<f64> = (0..m.n_elems())
        .map(|e| match m.region(e) {
            RegionTag::Substrate => 1.0,
            RegionTag::Coating => sig_c,
        })
        .collect();
    let pair = solve_core(m, p, &sigma, None, settings)?;
    let mut coating_mass = 0.0;
    for &e in &coated.layer_elements {
        let e = e as usize;
        for q in 0..m.quad_points_per_elem() {
            let v = m.value_at(e, q, &pair.u);
            coating_mass += m.qp_weight(e, q) * m.qp_radial(e, q) * v.abs().powf(p);
        }
    }
    let substrate_restriction = pair.u[..coated.n_base_nodes].to_vec();
    Ok(TwoPhaseResult {
        lambda1: pair.lambda,
        phi: pair.u,
        coating_mass,
        substrate_restriction,
        residual_norm: pair.residual_norm,
        iterations: pair.iterations,
    })
}

/// Consistent (variational) boundary flux q = σ|∇u|^{p-2}∂u/∂ν per face of
/// `label` (face order as stored). At each boundary node i outside ζ the flux
/// is [K_p(u) − λW(u)]_i divided by the lumped boundary measure of φ_i; a
/// face's value is the mean over its non-ζ nodes.
pub fn boundary_flux(
    domain: &DiscreteDomain,
    p: f64,
    pair: &Eigenpair,
    label: BoundaryLabel,
) -> Result<Vec<f64>> {
    check_p(p)?;
    let sigma = vec![1.0; domain.n_elems()];
    // interior residual pairing: no boundary form, no h
    let r = weak_residual(domain, p, &sigma, None, pair.lambda, &pair.u);
    face_averaged_trace(domain, &r, label)
}

/// Per-face averages of the nodal quantity r_i / m_i, where m_i is the lumped
/// boundary measure of node i over ALL boundary faces containing it. Faces are
/// reported in storage order restricted to `label`; nodes shared with an
/// essential face (ζ) are excluded from the average unless the face has no
/// other node.
pub(crate) fn face_averaged_trace(
    domain: &DiscreteDomain,
    r: &[f64],
    label: BoundaryLabel,
) -> Result<Vec<f64>> {
    let faces: Vec<usize> = domain
        .faces()
        .iter()
        .enumerate()
        .filter(|(_, f)| f.label == label)
        .map(|(i, _)| i)
        .collect();
    if faces.is_empty() {
        return Err(Error::InvalidParameter(format!(
            "no boundary faces labeled {label:?}"
        )));
    }
    let mut measure = vec![0.0; domain.n_nodes()];
    for f in domain.faces() {
        let ns = f.node_slice();
        for &n in ns {
            measure[n as usize] += f.measure / ns.len() as f64;
        }
    }
    let zeta = domain.zeta_nodes();
    let node_flux = |i: u32| r[i as usize] / measure[i as usize];
    let mut out = Vec::with_capacity(faces.len());
    for &f in &faces {
        let ns = domain.faces()[f].node_slice();
        let valid: Vec<u32> = ns
            .iter()
            .copied()
            .filter(|n| zeta.binary_search(n).is_err())
            .collect();
        let val = if valid.is_empty() {
            ns.iter().map(|&n| node_flux(n)).sum::<f64>() / ns.len() as f64
        } else {
            valid.iter().map(|&n| node_flux(n)).sum::<f64>() / valid.len() as f64
        };
        out.push(val);
    }
    Ok(out)
}
