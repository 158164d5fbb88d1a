//! First-order sensitivity of the principal eigenpair with respect to the
//! Robin coefficient: the linearized coefficient matrix of the p-Laplacian,
//! its δ-regularization with an explicit ellipticity window, and the bordered
//! saddle solve producing the eigenvalue and eigenfunction derivatives along
//! a boundary perturbation direction.

use crate::domain::{BoundaryLabel, DiscreteDomain};
use crate::eigensolver::{
    face_averaged_trace, lp_volume_integral, per_element_weighted_volume, robin_form_value,
    robin_weighted_source, weighted_source, Eigenpair, RobinField,
};
use crate::error::{Error, Result};
use crate::linalg::{factor_spd, solve_bordered, SparseSym, SpdFactor};

/// Symmetric 2×2 coefficient matrix. In the one-dimensional modes gradients
/// have no second component, so only `xx` enters assembly there; it carries
/// the scalar coefficient (p−1)|s|^{p-2}.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SymMat2 {
    pub xx: f64,
    pub xy: f64,
    pub yy: f64,
}

impl SymMat2 {
    pub const ZERO: SymMat2 = SymMat2 {
        xx: 0.0,
        xy: 0.0,
        yy: 0.0,
    };
    pub const IDENTITY: SymMat2 = SymMat2 {
        xx: 1.0,
        xy: 0.0,
        yy: 1.0,
    };

    pub fn apply(&self, v: [f64; 2]) -> [f64; 2] {
        [
            self.xx * v[0] + self.xy * v[1],
            self.xy * v[0] + self.yy * v[1],
        ]
    }

    /// (λ_min, λ_max) in closed form.
    pub fn eigen_bounds(&self) -> (f64, f64) {
        let mid = 0.5 * (self.xx + self.yy);
        let rad = (0.25 * (self.xx - self.yy).powi(2) + self.xy * self.xy).sqrt();
        (mid - rad, mid + rad)
    }

    fn scaled_add(&mut self, c: f64, other: SymMat2) {
        self.xx += c * other.xx;
        self.xy += c * other.xy;
        self.yy += c * other.yy;
    }
}

fn check_exponent(p: f64) -> Result<()> {
    if !(p.is_finite() && p > 1.0) {
        return Err(Error::InvalidParameter(format!(
            "exponent p must be finite and > 1, got {p}"
        )));
    }
    if p < 2.0 {
        return Err(Error::UnsupportedExponent(format!(
            "the linearized coefficient degenerates for p < 2 (got p = {p}); \
             sensitivity analysis requires p ≥ 2"
        )));
    }
    Ok(())
}

/// Derivative matrix of the vector field ξ ↦ |ξ|^{p-2}ξ:
///   DF(ξ) = |ξ|^{p-2} I + (p−2)|ξ|^{p-4} ξξᵀ.
/// Conventions at ξ = 0: the zero matrix for p > 2 (the field is
/// differentiable there with derivative 0) and the identity for p = 2.
/// Exponents p < 2 are rejected: DF blows up at ξ = 0.
pub fn linearized_matrix(grad_u: [f64; 2], p: f64) -> Result<SymMat2> {
    check_exponent(p)?;
    if !(grad_u[0].is_finite() && grad_u[1].is_finite()) {
        return Err(Error::InvalidParameter("gradient must be finite".into()));
    }
    if p == 2.0 {
        return Ok(SymMat2::IDENTITY);
    }
    let g2 = grad_u[0] * grad_u[0] + grad_u[1] * grad_u[1];
    let s = g2.sqrt();
    if s == 0.0 {
        return Ok(SymMat2::ZERO);
    }
    let c_iso = s.powf(p - 2.0);
    let c_dir = (p - 2.0) * s.powf(p - 4.0);
    Ok(SymMat2 {
        xx: c_iso + c_dir * grad_u[0] * grad_u[0],
        xy: c_dir * grad_u[0] * grad_u[1],
        yy: c_iso + c_dir * grad_u[1] * grad_u[1],
    })
}

/// Quintic cutoff: 1 on [0, δ], 0 on [2δ, ∞), monotone in between with
/// |χ'| ≤ 15/(8δ) < 2/δ.
pub fn default_cutoff(t: f64, delta: f64) -> f64 {
    if t <= delta {
        return 1.0;
    }
    if t >= 2.0 * delta {
        return 0.0;
    }
    let x = (t - delta) / delta;
    1.0 - x * x * x * (10.0 + x * (-15.0 + 6.0 * x))
}

/// Regularized coefficient matrix
///   A_δ(ξ) = s^{p-2} I + (p−2) s^{p-4} ξξᵀ,  s² = |ξ|² + δ²·χ(|ξ|),
/// with a caller-supplied cutoff χ (1 near zero, 0 beyond 2δ). Where the
/// cutoff vanishes the function delegates to `linearized_matrix`, so
/// A_δ(ξ) = DF(ξ) entry-for-entry exactly there.
pub fn regularized_matrix(
    grad_u: [f64; 2],
    p: f64,
    delta: f64,
    cutoff: impl Fn(f64) -> f64,
) -> Result<SymMat2> {
    check_exponent(p)?;
    if !(delta.is_finite() && delta > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "regularization δ must be finite and positive, got {delta}"
        )));
    }
    if !(grad_u[0].is_finite() && grad_u[1].is_finite()) {
        return Err(Error::InvalidParameter("gradient must be finite".into()));
    }
    if p == 2.0 {
        return Ok(SymMat2::IDENTITY);
    }
    let g2 = grad_u[0] * grad_u[0] + grad_u[1] * grad_u[1];
    let chi = cutoff(g2.sqrt());
    if !(chi.is_finite() && (0.0..=1.0).contains(&chi)) {
        return Err(Error::InvalidParameter(format!(
            "cutoff value {chi} outside [0, 1]"
        )));
    }
    if chi == 0.0 {
        return linearized_matrix(grad_u, p);
    }
    let s = (g2 + delta * delta * chi).sqrt();
    let c_iso = s.powf(p - 2.0);
    let c_dir = (p - 2.0) * s.powf(p - 4.0);
    Ok(SymMat2 {
        xx: c_iso + c_dir * grad_u[0] * grad_u[0],
        xy: c_dir * grad_u[0] * grad_u[1],
        yy: c_iso + c_dir * grad_u[1] * grad_u[1],
    })
}

/// `regularized_matrix` with the default quintic cutoff.
pub fn regularized_matrix_default(grad_u: [f64; 2], p: f64, delta: f64) -> Result<SymMat2> {
    regularized_matrix(grad_u, p, delta, |t| default_cutoff(t, delta))
}

/// Uniform ellipticity window of A_δ over gradients bounded by `grad_bound`:
///   θ_δ = min(1, p−1)·δ^{p-2},  Θ_δ = max(1, p−1)·(grad_bound + δ)^{p-2}.
/// Every eigenvalue of A_δ(ξ) with |ξ| ≤ grad_bound lies in [θ_δ, Θ_δ].
pub fn ellipticity_window(p: f64, delta: f64, grad_bound: f64) -> Result<(f64, f64)> {
    check_exponent(p)?;
    if !(delta.is_finite() && delta > 0.0) || !(grad_bound.is_finite() && grad_bound >= 0.0) {
        return Err(Error::InvalidParameter(
            "ellipticity window needs δ > 0 and a finite nonnegative gradient bound".into(),
        ));
    }
    let lo = (p - 1.0).min(1.0) * delta.powf(p - 2.0);
    let hi = (p - 1.0).max(1.0) * (grad_bound + delta).powf(p - 2.0);
    Ok((lo, hi))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoefficientKind {
    /// Exact linearization DF(∇u).
    Exact,
    /// δ-regularized A_δ(∇u).
    Regularized,
    /// Line-average of DF along the segment between two gradients.
    PathAveraged,
}

/// Per-element symmetric coefficient field (element gradients are constant,
/// so one matrix per element covers every quadrature point).
#[derive(Debug, Clone)]
pub struct CoefficientField {
    pub kind: CoefficientKind,
    /// Regularization scale; 0 for exact and path-averaged fields.
    pub delta: f64,
    pub per_element: Vec<SymMat2>,
}

impl CoefficientField {
    pub fn exact(domain: &DiscreteDomain, p: f64, u: &[f64]) -> Result<CoefficientField> {
        let per_element = (0..domain.n_elems())
            .map(|e| linearized_matrix(domain.grad_of(e, u), p))
            .collect::<Result<Vec<_>>>()?;
        Ok(CoefficientField {
            kind: CoefficientKind::Exact,
            delta: 0.0,
            per_element,
        })
    }

    pub fn regularized(
        domain: &DiscreteDomain,
        p: f64,
        u: &[f64],
        delta: f64,
    ) -> Result<CoefficientField> {
        let per_element = (0..domain.n_elems())
            .map(|e| regularized_matrix_default(domain.grad_of(e, u), p, delta))
            .collect::<Result<Vec<_>>>()?;
        Ok(CoefficientField {
            kind: CoefficientKind::Regularized,
            delta,
            per_element,
        })
    }
}

/// Elementwise ellipticity summary of the path-averaged coefficient
///   Ā_e = ∫₀¹ DF((1−t)∇u₂ + t∇u₁) dt.
#[derive(Debug, Clone, Copy)]
pub struct PathEllipticityReport {
    /// Smallest eigenvalue of Ā_e over all elements.
    pub theta_min: f64,
    /// Largest eigenvalue of Ā_e over all elements.
    pub theta_max: f64,
    /// min_e ∫₀¹ |(1−t)∇u₂ + t∇u₁|^{p-2} dt; theta_min ≥ min(1, p−1) times
    /// this because λ_min is concave over symmetric matrices.
    pub lower_bound_integral: f64,
}

const PATH_QUAD: usize = 32;

/// Ellipticity report for the averaged coefficient matrix along the straight
/// path between two eigenfunctions on the same domain. This is the matrix
/// that controls uniqueness of the linearization between two states.
pub fn path_matrix_report(
    domain: &DiscreteDomain,
    u1: &Eigenpair,
    u2: &Eigenpair,
    p: f64,
) -> Result<PathEllipticityReport> {
    check_exponent(p)?;
    if u1.p != p || u2.p != p {
        return Err(Error::InvalidParameter(format!(
            "path report at p = {p} but eigenpairs carry p = {} and {}",
            u1.p, u2.p
        )));
    }
    let n = domain.n_nodes();
    if u1.u.len() != n || u2.u.len() != n {
        return Err(Error::InvalidParameter(
            "eigenpairs do not match the domain node count".into(),
        ));
    }
    let one_dim = domain.coord_dim() == 1;
    let wq = 1.0 / PATH_QUAD as f64;
    let mut theta_min = f64::INFINITY;
    let mut theta_max = f64::NEG_INFINITY;
    let mut lower = f64::INFINITY;
    for e in 0..domain.n_elems() {
        let g1 = domain.grad_of(e, &u1.u);
        let g2 = domain.grad_of(e, &u2.u);
        let mut abar = SymMat2::ZERO;
        let mut lb = 0.0;
        for k in 0..PATH_QUAD {
            let t = (k as f64 + 0.5) * wq;
            let xi = [
                g2[0] + t * (g1[0] - g2[0]),
                g2[1] + t * (g1[1] - g2[1]),
            ];
            let norm = (xi[0] * xi[0] + xi[1] * xi[1]).sqrt();
            lb += wq * norm.powf(p - 2.0);
            if one_dim {
                // scalar coefficient (p−1)|ξ|^{p-2}; store it in xx
                abar.xx += wq * (p - 1.0) * norm.powf(p - 2.0);
            } else {
                abar.scaled_add(wq, linearized_matrix(xi, p)?);
            }
        }
        let (lo, hi) = if one_dim {
            (abar.xx, abar.xx)
        } else {
            abar.eigen_bounds()
        };
        theta_min = theta_min.min(lo);
        theta_max = theta_max.max(hi);
        lower = lower.min(lb);
    }
    Ok(PathEllipticityReport {
        theta_min,
        theta_max,
        lower_bound_integral: lower,
    })
}

/// Derivative of the eigenpair along a Robin perturbation direction ξ.
#[derive(Debug, Clone)]
pub struct LinearizedSolution {
    /// Nodal eigenfunction derivative; vanishes on the essential set and is
    /// L^p-orthogonal to the base: ∫|u|^{p-2}u·u' = 0.
    pub u_prime: Vec<f64>,
    /// Eigenvalue derivative (the Lagrange multiplier of the saddle solve).
    pub lambda_prime: f64,
    /// The perturbation direction the solution belongs to.
    pub xi: RobinField,
    /// |∫|u|^{p-2}u·u'| after the solve.
    pub constraint_residual: f64,
    /// Regularization scale actually used for the coefficient matrix.
    pub delta: f64,
}

struct SaddleAssembly {
    /// Constrained operator M = K_{A_δ} + (p−1)B_h[u] − λ(p−1)W[u].
    m: SparseSym,
    /// SPD preconditioner part P = K_{A_δ} + (p−1)B_h[u].
    p_mat: SparseSym,
}

fn assemble_saddle(
    domain: &DiscreteDomain,
    p: f64,
    h: &RobinField,
    base: &Eigenpair,
    field: &CoefficientField,
    essential: &[bool],
) -> SaddleAssembly {
    let dim = domain.coord_dim();
    let k = domain.elem_nodes();
    let n = domain.n_nodes();
    let lambda = base.lambda;
    let u = &base.u;
    let mut trips_m: Vec<(u32, u32, f64)> = Vec::with_capacity(domain.n_elems() * k * k + 64);
    let mut trips_p: Vec<(u32, u32, f64)> = Vec::with_capacity(trips_m.capacity());
    for e in 0..domain.n_elems() {
        let a = field.per_element[e];
        let wv = per_element_weighted_volume(domain, e);
        let en = domain.elem(e);
        let gr = domain.elem_grads(e);
        let grad_at = |i: usize| -> [f64; 2] {
            if dim == 1 {
                [gr[i], 0.0]
            } else {
                [gr[i * dim], gr[i * dim + 1]]
            }
        };
        for ia in 0..k {
            let na = en[ia];
            if essential[na as usize] {
                continue;
            }
            let aga = a.apply(grad_at(ia));
            for ib in 0..k {
                let nb = en[ib];
                if essential[nb as usize] {
                    continue;
                }
                let gb = grad_at(ib);
                let val = wv * (aga[0] * gb[0] + aga[1] * gb[1]);
                trips_m.push((na, nb, val));
                trips_p.push((na, nb, val));
            }
        }
        // −λ(p−1) ∫ |u|^{p-2} φ_a φ_b (mass shift, only in M)
        for q in 0..domain.quad_points_per_elem() {
            let v = domain.value_at(e, q, u);
            let c = -lambda
                * (p - 1.0)
                * domain.qp_weight(e, q)
                * domain.qp_radial(e, q)
                * v.abs().powf(p - 2.0);
            let bas = domain.qp_basis(e, q);
            for ia in 0..k {
                let na = en[ia];
                if essential[na as usize] {
                    continue;
                }
                for ib in 0..k {
                    let nb = en[ib];
                    if essential[nb as usize] {
                        continue;
                    }
                    trips_m.push((na, nb, c * bas[ia] * bas[ib]));
                }
            }
        }
    }
    // (p−1) ∫_γ h |u|^{p-2} φ_a φ_b
    for (pos, f) in domain.robin_faces().enumerate() {
        let ns = domain.faces()[f].node_slice();
        for (w, bas) in domain.face_quadrature(f) {
            let hv = h.at(domain, pos, f, &bas);
            if hv == 0.0 {
                continue;
            }
            let uv: f64 = ns.iter().zip(&bas).map(|(&n, &b)| u[n as usize] * b).sum();
            let c = w * hv * (p - 1.0) * uv.abs().powf(p - 2.0);
            for (ia, &na) in ns.iter().enumerate() {
                if essential[na as usize] {
                    continue;
                }
                for (ib, &nb) in ns.iter().enumerate() {
                    if essential[nb as usize] {
                        continue;
                    }
                    trips_m.push((na, nb, c * bas[ia] * bas[ib]));
                    trips_p.push((na, nb, c * bas[ia] * bas[ib]));
                }
            }
        }
    }
    for (i, &ess) in essential.iter().enumerate() {
        if ess {
            trips_m.push((i as u32, i as u32, 1.0));
            trips_p.push((i as u32, i as u32, 1.0));
        }
    }
    SaddleAssembly {
        m: SparseSym::from_triplets(n, trips_m),
        p_mat: SparseSym::from_triplets(n, trips_p),
    }
}

fn validate_base(domain: &DiscreteDomain, p: f64, base: &Eigenpair) -> Result<()> {
    if base.p != p {
        return Err(Error::InvalidParameter(format!(
            "linearization at p = {p} but the base eigenpair was solved at p = {}",
            base.p
        )));
    }
    if base.u.len() != domain.n_nodes() {
        return Err(Error::InvalidParameter(
            "base eigenpair does not match the domain node count".into(),
        ));
    }
    if !base.lambda.is_finite() {
        return Err(Error::InvalidParameter("base eigenvalue is not finite".into()));
    }
    let mass = lp_volume_integral(domain, p, &base.u);
    if (mass - 1.0).abs() > 1e-8 {
        return Err(Error::ConstraintViolation(format!(
            "base eigenfunction is not L^p-normalized: ∫|u|^p = {mass}"
        )));
    }
    Ok(())
}

/// Largest element gradient magnitude of u.
fn max_element_gradient(domain: &DiscreteDomain, u: &[f64]) -> f64 {
    (0..domain.n_elems())
        .map(|e| {
            let g = domain.grad_of(e, u);
            (g[0] * g[0] + g[1] * g[1]).sqrt()
        })
        .fold(0.0, f64::max)
}

/// Assembled and factored linearization at a fixed base eigenpair. Solving
/// for several perturbation directions (Jacobian columns) reuses the matrix
/// and the preconditioner factorization; directions only change the
/// right-hand side.
pub struct LinearizedOperator<'a> {
    domain: &'a DiscreteDomain,
    p: f64,
    base: &'a Eigenpair,
    delta: f64,
    sys: SaddleAssembly,
    precond: SpdFactor,
    /// Constraint vector m_i = ∫|u|^{p-2}u φ_i, zeroed on the essential set.
    c: Vec<f64>,
    rho: f64,
    essential: Vec<bool>,
}

impl<'a> LinearizedOperator<'a> {
    /// Assemble M = K_{A_δ}(∇u) + (p−1)B_h[u] − λ(p−1)W[u] and factor the SPD
    /// part K_{A_δ} + (p−1)B_h[u] as preconditioner. δ defaults to
    /// 1e-3·max_e|∇u|.
    pub fn new(
        domain: &'a DiscreteDomain,
        p: f64,
        h: &RobinField,
        base: &'a Eigenpair,
        delta_reg: Option<f64>,
    ) -> Result<Self> {
        check_exponent(p)?;
        h.validate(domain)?;
        validate_base(domain, p, base)?;
        let gmax = max_element_gradient(domain, &base.u);
        let delta = match delta_reg {
            Some(d) => d,
            None => 1e-3 * gmax,
        };
        if !(delta.is_finite() && delta > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "regularization δ must be finite and positive, got {delta}"
            )));
        }
        let field = CoefficientField::regularized(domain, p, &base.u, delta)?;
        let essential = domain.essential_mask();
        let sys = assemble_saddle(domain, p, h, base, &field, &essential);
        let mut c = weighted_source(domain, p, &base.u);
        for (i, &ess) in essential.iter().enumerate() {
            if ess {
                c[i] = 0.0;
            }
        }
        let rho = (1.0 + base.lambda.abs()) * (p - 1.0);
        let precond = factor_spd(&sys.p_mat).map_err(Error::LinearizationNotInvertible)?;
        Ok(LinearizedOperator {
            domain,
            p,
            base,
            delta,
            sys,
            precond,
            c,
            rho,
            essential,
        })
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Solve  M u' − λ' m = −g,  mᵀu' = 0  for the direction ξ, where
    /// g_i = ∫_γ ξ|u|^{p-2}u φ_i. The bordered system is solved by PCG on
    /// M + ρmmᵀ.
    pub fn solve_direction(&self, xi: &RobinField) -> Result<LinearizedSolution> {
        xi.validate_direction(self.domain)?;
        let mut b = robin_weighted_source(self.domain, self.p, xi, &self.base.u);
        for (i, &ess) in self.essential.iter().enumerate() {
            if ess {
                b[i] = 0.0;
            }
            b[i] = -b[i];
        }
        let (u_prime, mu) = solve_bordered(&self.sys.m, &self.c, &b, self.rho, &self.precond)
            .map_err(Error::LinearizationNotInvertible)?;
        let constraint_residual = self
            .c
            .iter()
            .zip(&u_prime)
            .map(|(ci, xi)| ci * xi)
            .sum::<f64>()
            .abs();
        Ok(LinearizedSolution {
            u_prime,
            lambda_prime: -mu,
            xi: xi.clone(),
            constraint_residual,
            delta: self.delta,
        })
    }
}

/// One-shot convenience around `LinearizedOperator` for a single direction.
pub fn solve_linearized(
    domain: &DiscreteDomain,
    p: f64,
    h: &RobinField,
    base: &Eigenpair,
    xi: &RobinField,
    delta_reg: Option<f64>,
) -> Result<LinearizedSolution> {
    LinearizedOperator::new(domain, p, h, base, delta_reg)?.solve_direction(xi)
}

/// Hadamard-type boundary formula for the eigenvalue derivative along ξ:
///   λ'(h; ξ) = ∫_γ ξ |u|^p dσ,
/// evaluated with the same face quadrature as the Robin form.
pub fn lambda_derivative(
    base: &Eigenpair,
    xi: &RobinField,
    domain: &DiscreteDomain,
) -> Result<f64> {
    xi.validate_direction(domain)?;
    if base.u.len() != domain.n_nodes() {
        return Err(Error::InvalidParameter(
            "base eigenpair does not match the domain node count".into(),
        ));
    }
    Ok(robin_form_value(domain, base.p, xi, &base.u))
}

/// Derivative of the consistent boundary flux on `label`-faces along the
/// perturbation solved in `sol`: per-face averages of
///   [K_{A_δ}(∇u)u' − λ(p−1)W[u]u' − λ' m]_i / measure_i,
/// the exact linearization of the discrete flux map when the cutoff is
/// inactive. Face order matches `boundary_flux`.
pub fn linearized_flux(
    domain: &DiscreteDomain,
    p: f64,
    base: &Eigenpair,
    sol: &LinearizedSolution,
    label: BoundaryLabel,
) -> Result<Vec<f64>> {
    check_exponent(p)?;
    validate_base(domain, p, base)?;
    if sol.u_prime.len() != domain.n_nodes() {
        return Err(Error::InvalidParameter(
            "linearized solution does not match the domain node count".into(),
        ));
    }
    let field = CoefficientField::regularized(domain, p, &base.u, sol.delta)?;
    let n = domain.n_nodes();
    let dim = domain.coord_dim();
    let mut r = vec![0.0; n];
    for e in 0..domain.n_elems() {
        let wv = per_element_weighted_volume(domain, e);
        let gp = domain.grad_of(e, &sol.u_prime);
        let agp = field.per_element[e].apply(gp);
        let en = domain.elem(e);
        let gr = domain.elem_grads(e);
        for (ia, &na) in en.iter().enumerate() {
            let mut dot = agp[0] * gr[ia * dim];
            if dim > 1 {
                dot += agp[1] * gr[ia * dim + 1];
            }
            r[na as usize] += wv * dot;
        }
        for q in 0..domain.quad_points_per_elem() {
            let v = domain.value_at(e, q, &base.u);
            let vp = domain.value_at(e, q, &sol.u_prime);
            let c = -base.lambda
                * (p - 1.0)
                * domain.qp_weight(e, q)
                * domain.qp_radial(e, q)
                * v.abs().powf(p - 2.0)
                * vp;
            let bas = domain.qp_basis(e, q);
            for (ia, &na) in en.iter().enumerate() {
                r[na as usize] += c * bas[ia];
            }
        }
    }
    let m = weighted_source(domain, p, &base.u);
    for i in 0..n {
        r[i] -= sol.lambda_prime * m[i];
    }
    face_averaged_trace(domain, &r, label)
}
