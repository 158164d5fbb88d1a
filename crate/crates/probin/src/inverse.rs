//! The measurement map h ↦ (λ₁(h), flux on Γ_D), its Jacobian through
//! linearized solves, Tikhonov–Gauss–Newton recovery of the Robin coefficient
//! from boundary data, and empirical stability and uniqueness diagnostics.

use crate::domain::{BoundaryLabel, DiscreteDomain};
use crate::eigensolver::{
    boundary_flux, principal_eigenpair, EigenSolveSettings, Eigenpair, RobinField,
};
use crate::error::{Error, Result};
use crate::linalg::solve_dense_spd;
use crate::sensitivity::{lambda_derivative, linearized_flux, LinearizedOperator};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

/// Discrete surrogate for the dual flux norm: face-measure-weighted ℓ^{p'}
/// of consistent nodal fluxes. The only kind implemented.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FluxNormKind {
    DiscreteDual,
}

/// Boundary measurement (λ₁, consistent flux on Γ_D).
#[derive(Debug, Clone)]
pub struct Measurement {
    pub lambda: f64,
    /// Consistent flux per Γ_D face, in boundary storage order.
    pub flux_trace: Vec<f64>,
    /// Global face indices the trace lives on.
    pub face_ids: Vec<u32>,
    /// Face measures, the weights of the dual norm.
    pub face_weights: Vec<f64>,
    pub p: f64,
    pub flux_norm_kind: FluxNormKind,
}

fn dirichlet_face_table(domain: &DiscreteDomain) -> (Vec<u32>, Vec<f64>) {
    let mut ids = Vec::new();
    let mut weights = Vec::new();
    for (i, f) in domain.faces().iter().enumerate() {
        if f.label == BoundaryLabel::Dirichlet {
            ids.push(i as u32);
            weights.push(f.measure);
        }
    }
    (ids, weights)
}

/// Solve the eigenproblem and extract the measurement (λ₁, Γ_D flux).
pub fn forward_measure(
    domain: &DiscreteDomain,
    p: f64,
    h: &RobinField,
    settings: &EigenSolveSettings,
) -> Result<Measurement> {
    let pair = principal_eigenpair(domain, p, h, settings)?;
    let flux_trace = boundary_flux(domain, p, &pair, BoundaryLabel::Dirichlet)?;
    let (face_ids, face_weights) = dirichlet_face_table(domain);
    Ok(Measurement {
        lambda: pair.lambda,
        flux_trace,
        face_ids,
        face_weights,
        p,
        flux_norm_kind: FluxNormKind::DiscreteDual,
    })
}

/// |λ₁ − λ₂| + (Σ_f w_f |q₁ − q₂|^{p'})^{1/p'} with w_f the face measures and
/// p' the conjugate exponent. Symmetric, triangle inequality, zero iff equal.
pub fn measurement_distance(m1: &Measurement, m2: &Measurement) -> Result<f64> {
    if m1.p != m2.p
        || m1.face_ids != m2.face_ids
        || m1
            .face_weights
            .iter()
            .zip(&m2.face_weights)
            .any(|(a, b)| (a - b).abs() > 1e-12 * a.abs())
    {
        return Err(Error::InvalidParameter(
            "measurements live on different partitions".into(),
        ));
    }
    let pc = m1.p / (m1.p - 1.0);
    let flux: f64 = m1
        .flux_trace
        .iter()
        .zip(&m2.flux_trace)
        .zip(&m1.face_weights)
        .map(|((a, b), w)| w * (a - b).abs().powf(pc))
        .sum();
    Ok((m1.lambda - m2.lambda).abs() + flux.powf(1.0 / pc))
}

/// Finite-dimensional basis on γ, evaluated in the arclength parameter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RobinBasis {
    /// k indicator functions of contiguous equal arclength chunks.
    PiecewiseConstant { k: usize },
    /// k B-spline basis functions of the given degree on an open uniform
    /// knot vector over [0, 1]; a partition of unity.
    BSpline { k: usize, degree: usize },
}

impl RobinBasis {
    pub fn len(&self) -> usize {
        match self {
            RobinBasis::PiecewiseConstant { k } => *k,
            RobinBasis::BSpline { k, .. } => *k,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All k basis values at arclength parameter s ∈ [0, 1].
    pub fn values(&self, s: f64) -> Vec<f64> {
        match self {
            RobinBasis::PiecewiseConstant { k } => {
                let mut v = vec![0.0; *k];
                let j = ((s * *k as f64).floor() as usize).min(k - 1);
                v[j] = 1.0;
                v
            }
            RobinBasis::BSpline { k, degree } => bspline_basis(*k, *degree, s),
        }
    }
}

/// Cox–de Boor evaluation of all k basis functions of the open uniform
/// B-spline space of the given degree at s ∈ [0, 1].
fn bspline_basis(k: usize, degree: usize, s: f64) -> Vec<f64> {
    let s = s.clamp(0.0, 1.0);
    let knot = |i: usize| -> f64 {
        if i <= degree {
            0.0
        } else if i >= k {
            1.0
        } else {
            (i - degree) as f64 / (k - degree) as f64
        }
    };
    let mut n = vec![0.0; k + degree];
    for (i, v) in n.iter_mut().enumerate() {
        let lo = knot(i);
        let hi = knot(i + 1);
        *v = if (lo <= s && s < hi) || (s == 1.0 && lo < 1.0 && hi == 1.0) {
            1.0
        } else {
            0.0
        };
    }
    for d in 1..=degree {
        for i in 0..(k + degree - d) {
            let t_i = knot(i);
            let t_id = knot(i + d);
            let t_i1 = knot(i + 1);
            let t_id1 = knot(i + d + 1);
            let a = if t_id > t_i {
                (s - t_i) / (t_id - t_i) * n[i]
            } else {
                0.0
            };
            let b = if t_id1 > t_i1 {
                (t_id1 - s) / (t_id1 - t_i1) * n[i + 1]
            } else {
                0.0
            };
            n[i] = a + b;
        }
    }
    n.truncate(k);
    n
}

pub const DEFAULT_H_MIN: f64 = 1e-3;

/// h = Σ_j c_j φ_j on γ, constrained to stay at or above h_min.
#[derive(Debug, Clone)]
pub struct RobinParameterization {
    pub basis: RobinBasis,
    pub coefficients: Vec<f64>,
    pub h_min: f64,
}

impl RobinParameterization {
    pub fn new(basis: RobinBasis, coefficients: Vec<f64>, h_min: f64) -> Result<Self> {
        let k = basis.len();
        if k == 0 {
            return Err(Error::InvalidParameter("empty Robin basis".into()));
        }
        if let RobinBasis::BSpline { k, degree } = basis {
            if k < degree + 1 {
                return Err(Error::InvalidParameter(format!(
                    "B-spline basis needs k ≥ degree + 1, got k = {k}, degree = {degree}"
                )));
            }
        }
        if coefficients.len() != k {
            return Err(Error::InvalidParameter(format!(
                "basis has {k} functions but {} coefficients were given",
                coefficients.len()
            )));
        }
        if coefficients.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidParameter("coefficients must be finite".into()));
        }
        if !(h_min.is_finite() && h_min >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "h_min must be finite and nonnegative, got {h_min}"
            )));
        }
        Ok(RobinParameterization {
            basis,
            coefficients,
            h_min,
        })
    }

    pub fn k(&self) -> usize {
        self.basis.len()
    }

    pub fn with_coefficients(&self, coefficients: Vec<f64>) -> Result<Self> {
        RobinParameterization::new(self.basis.clone(), coefficients, self.h_min)
    }

    /// Per-face h values at the γ-face arclength midpoints. Fails if the
    /// synthesized field dips below h_min anywhere.
    pub fn synthesize(&self, domain: &DiscreteDomain) -> Result<RobinField> {
        let mids = domain.robin_arc_midpoints();
        if mids.is_empty() {
            return Err(Error::UnsupportedProblem(
                "domain has no Robin faces to parameterize".into(),
            ));
        }
        let vals: Vec<f64> = mids
            .iter()
            .map(|&s| {
                self.basis
                    .values(s)
                    .iter()
                    .zip(&self.coefficients)
                    .map(|(b, c)| b * c)
                    .sum()
            })
            .collect();
        if let Some(v) = vals
            .iter()
            .find(|v| !v.is_finite() || **v < self.h_min - 1e-12)
        {
            return Err(Error::ConstraintViolation(format!(
                "synthesized coefficient {v} drops below h_min = {}",
                self.h_min
            )));
        }
        Ok(RobinField::PerFace(vals))
    }

    /// Basis direction φ_j as a per-face field.
    pub fn basis_field(&self, domain: &DiscreteDomain, j: usize) -> Result<RobinField> {
        if j >= self.k() {
            return Err(Error::InvalidParameter(format!(
                "basis index {j} out of range (k = {})",
                self.k()
            )));
        }
        let mids = domain.robin_arc_midpoints();
        Ok(RobinField::PerFace(
            mids.iter().map(|&s| self.basis.values(s)[j]).collect(),
        ))
    }
}

/// Additive Gaussian noise with relative scales; flux and λ are perturbed
/// independently.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    pub flux_rel: f64,
    pub lambda_rel: f64,
}

impl NoiseModel {
    pub const NONE: NoiseModel = NoiseModel {
        flux_rel: 0.0,
        lambda_rel: 0.0,
    };

    pub fn is_none(&self) -> bool {
        self.flux_rel == 0.0 && self.lambda_rel == 0.0
    }

    /// Perturbed copy of the measurement, deterministic in the seed.
    pub fn apply(&self, m: &Measurement, seed: u64) -> Measurement {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = m.clone();
        out.lambda += self.lambda_rel * m.lambda.abs() * rng.sample::<f64, _>(StandardNormal);
        for q in &mut out.flux_trace {
            *q += self.flux_rel * q.abs() * rng.sample::<f64, _>(StandardNormal);
        }
        out
    }

    /// Expected weighted-ℓ² magnitude of the noise on a measurement, the
    /// reference level for the discrepancy criterion.
    pub fn level(&self, m: &Measurement) -> f64 {
        let flux2: f64 = m
            .flux_trace
            .iter()
            .zip(&m.face_weights)
            .map(|(q, w)| w * (self.flux_rel * q).powi(2))
            .sum();
        ((self.lambda_rel * m.lambda).powi(2) + flux2).sqrt()
    }
}

/// Jacobian of the measurement map in a Robin basis. Row 0 is the eigenvalue
/// derivative; the remaining rows are Γ_D-face flux derivatives.
#[derive(Debug, Clone)]
pub struct MeasurementJacobian {
    pub rows: usize,
    pub cols: usize,
    /// Row-major entries.
    pub data: Vec<f64>,
}

impl MeasurementJacobian {
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

fn jacobian_at(
    domain: &DiscreteDomain,
    p: f64,
    h: &RobinField,
    base: &Eigenpair,
    param: &RobinParameterization,
    delta_reg: Option<f64>,
) -> Result<MeasurementJacobian> {
    let k = param.k();
    let op = LinearizedOperator::new(domain, p, h, base, delta_reg)?;
    let cols: Vec<Vec<f64>> = (0..k)
        .into_par_iter()
        .map(|j| -> Result<Vec<f64>> {
            let xi = param.basis_field(domain, j)?;
            let sol = op.solve_direction(&xi)?;
            let mut col = Vec::with_capacity(1 + domain.dirichlet_faces().count());
            // row 0 from the boundary quadrature formula, exact for the
            // discrete eigenvalue map
            col.push(lambda_derivative(base, &xi, domain)?);
            col.extend(linearized_flux(
                domain,
                p,
                base,
                &sol,
                BoundaryLabel::Dirichlet,
            )?);
            Ok(col)
        })
        .collect::<Result<Vec<_>>>()?;
    let rows = cols[0].len();
    let mut data = vec![0.0; rows * k];
    for (j, col) in cols.iter().enumerate() {
        for (r, v) in col.iter().enumerate() {
            data[r * k + j] = *v;
        }
    }
    Ok(MeasurementJacobian {
        rows,
        cols: k,
        data,
    })
}

/// Jacobian of the measurement map at h0, one column per basis direction.
/// Columns are independent linearized solves and run concurrently.
pub fn jacobian(
    domain: &DiscreteDomain,
    p: f64,
    h0: &RobinField,
    param: &RobinParameterization,
    delta_reg: Option<f64>,
    settings: &EigenSolveSettings,
) -> Result<MeasurementJacobian> {
    let base = principal_eigenpair(domain, p, h0, settings)?;
    jacobian_at(domain, p, h0, &base, param, delta_reg)
}

/// Output of the Gauss–Newton reconstruction.
#[derive(Debug, Clone)]
pub struct ReconstructionResult {
    pub c_hat: Vec<f64>,
    /// Weighted data misfit, initial value followed by one entry per
    /// accepted step; non-increasing.
    pub residual_history: Vec<f64>,
    pub regularization_weight: f64,
    pub converged: bool,
    /// Accepted Gauss–Newton steps.
    pub iterations: usize,
}

const GN_MAX_ITER: usize = 50;
const GN_ARMIJO: f64 = 1e-4;
const GN_MAX_BACKTRACK: usize = 30;

struct GnEval {
    phi: f64,
    residual: Vec<f64>,
    h: RobinField,
}

fn gn_eval(
    domain: &DiscreteDomain,
    p: f64,
    data: &Measurement,
    param: &RobinParameterization,
    c: &[f64],
    weights: &[f64],
    settings: &EigenSolveSettings,
) -> Result<GnEval> {
    let h = param.with_coefficients(c.to_vec())?.synthesize(domain)?;
    let m = forward_measure(domain, p, &h, settings)?;
    let mut residual = Vec::with_capacity(1 + data.flux_trace.len());
    residual.push(data.lambda - m.lambda);
    for (d, q) in data.flux_trace.iter().zip(&m.flux_trace) {
        residual.push(d - q);
    }
    let phi = 0.5
        * residual
            .iter()
            .zip(weights)
            .map(|(r, w)| w * r * r)
            .sum::<f64>();
    Ok(GnEval { phi, residual, h })
}

fn project(c: &mut [f64], h_min: f64) {
    for v in c.iter_mut() {
        *v = v.max(h_min);
    }
}

/// Tikhonov–Gauss–Newton reconstruction of Robin coefficients from boundary
/// data: iterates (JᵀWJ + reg·I)Δc = JᵀWr with W the measurement weights
/// (weighted ℓ² even for p ≠ 2; the p' norm enters only reported distances),
/// projects onto {c ≥ h_min}, and backtracks on the misfit. Stops when the
/// misfit reaches the noise floor (discrepancy criterion at 1.1× the noise
/// level) or stagnates.
#[allow(clippy::too_many_arguments)]
pub fn gauss_newton_reconstruct(
    domain: &DiscreteDomain,
    p: f64,
    data: &Measurement,
    param: &RobinParameterization,
    h_init: &[f64],
    reg_weight: f64,
    noise: &NoiseModel,
    settings: &EigenSolveSettings,
) -> Result<ReconstructionResult> {
    if p < 2.0 {
        return Err(Error::UnsupportedExponent(
            "reconstruction needs the linearization, restricted to p ≥ 2".into(),
        ));
    }
    if data.p != p {
        return Err(Error::InvalidParameter(format!(
            "data was measured at p = {}, reconstruction asked for p = {p}",
            data.p
        )));
    }
    let (ids, _) = dirichlet_face_table(domain);
    if data.face_ids != ids {
        return Err(Error::InvalidParameter(
            "measurement faces do not match the domain's Dirichlet faces".into(),
        ));
    }
    if h_init.len() != param.k() {
        return Err(Error::InvalidParameter(format!(
            "initial guess has {} entries, basis has {}",
            h_init.len(),
            param.k()
        )));
    }
    if !(reg_weight.is_finite() && reg_weight >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "regularization weight must be finite and nonnegative, got {reg_weight}"
        )));
    }
    let k = param.k();
    let mut weights = Vec::with_capacity(1 + data.face_weights.len());
    weights.push(1.0);
    weights.extend_from_slice(&data.face_weights);

    let mut c = h_init.to_vec();
    project(&mut c, param.h_min);
    let mut eval = gn_eval(domain, p, data, param, &c, &weights, settings)?;
    let mut history = vec![(2.0 * eval.phi).sqrt()];
    let noise_floor = (1.1 * noise.level(data)).max(1e-9 * (1.0 + data.lambda.abs()));
    let mut converged = false;
    let mut iterations = 0;

    let result = |c: &[f64], history: &[f64], converged: bool, iterations: usize| {
        ReconstructionResult {
            c_hat: c.to_vec(),
            residual_history: history.to_vec(),
            regularization_weight: reg_weight,
            converged,
            iterations,
        }
    };

    for _ in 0..GN_MAX_ITER {
        let misfit = *history.last().unwrap();
        if misfit <= noise_floor {
            converged = true;
            break;
        }
        let base = principal_eigenpair(domain, p, &eval.h, settings)?;
        let jac = jacobian_at(domain, p, &eval.h, &base, param, None)?;
        // normal equations (JᵀWJ + reg·I)Δ = JᵀWr
        let mut a = vec![0.0; k * k];
        let mut rhs = vec![0.0; k];
        for r in 0..jac.rows {
            let w = weights[r];
            for i in 0..k {
                let ji = jac.at(r, i);
                rhs[i] += w * ji * eval.residual[r];
                for j in 0..k {
                    a[i * k + j] += w * ji * jac.at(r, j);
                }
            }
        }
        for i in 0..k {
            a[i * k + i] += reg_weight;
        }
        let step = solve_dense_spd(k, &a, &rhs).map_err(|_| Error::NoDescentDirection {
            best: Box::new(result(&c, &history, false, iterations)),
        })?;
        let descent: f64 = rhs.iter().zip(&step).map(|(g, d)| g * d).sum();
        if !(descent > 0.0 && descent.is_finite()) {
            return Err(Error::NoDescentDirection {
                best: Box::new(result(&c, &history, false, iterations)),
            });
        }
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..GN_MAX_BACKTRACK {
            let mut ct: Vec<f64> = c.iter().zip(&step).map(|(ci, d)| ci + alpha * d).collect();
            project(&mut ct, param.h_min);
            let et = gn_eval(domain, p, data, param, &ct, &weights, settings)?;
            if et.phi <= eval.phi - GN_ARMIJO * alpha * descent {
                accepted = Some((ct, et));
                break;
            }
            alpha *= 0.5;
        }
        let Some((ct, et)) = accepted else {
            return Err(Error::NoDescentDirection {
                best: Box::new(result(&c, &history, false, iterations)),
            });
        };
        c = ct;
        eval = et;
        iterations += 1;
        history.push((2.0 * eval.phi).sqrt());
        let prev = history[history.len() - 2];
        let now = history[history.len() - 1];
        if prev - now <= 1e-12 * prev.max(1e-300) {
            converged = true;
            break;
        }
    }
    Ok(result(&c, &history, converged, iterations))
}

/// Discrepancy-principle sweep: runs the reconstruction for each candidate
/// weight (descending) and returns the largest whose final misfit is at or
/// below 1.1× the noise level, falling back to the smallest candidate.
#[allow(clippy::too_many_arguments)]
pub fn pick_regularization_weight(
    domain: &DiscreteDomain,
    p: f64,
    data: &Measurement,
    param: &RobinParameterization,
    h_init: &[f64],
    candidates: &[f64],
    noise: &NoiseModel,
    settings: &EigenSolveSettings,
) -> Result<ReconstructionResult> {
    if candidates.is_empty() {
        return Err(Error::InvalidParameter(
            "no regularization weights to choose from".into(),
        ));
    }
    let mut sorted = candidates.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let level = 1.1 * noise.level(data);
    let mut last = None;
    for &w in &sorted {
        let rec = gauss_newton_reconstruct(domain, p, data, param, h_init, w, noise, settings)?;
        let misfit = *rec.residual_history.last().unwrap();
        if misfit <= level {
            return Ok(rec);
        }
        last = Some(rec);
    }
    Ok(last.unwrap())
}

/// Log–log stability fit between data distance and coefficient distance.
#[derive(Debug, Clone)]
pub struct StabilityProbeResult {
    /// (δ_j, e_j) = (measurement distance, ‖h_j − h₀‖_{L²(γ)}) per draw.
    pub pairs: Vec<(f64, f64)>,
    /// Fitted exponent of log e = α̂ log δ + const.
    pub alpha_hat: f64,
    /// The C¹-ball radius enforced on the perturbations.
    pub m_used: f64,
    /// Margin constant: e ≤ c0·M^{1-α̂}·δ^{α̂} on the fit half of the pairs.
    pub c0: f64,
}

/// Empirical stability probe: draws seeded random perturbations of h₀ at the
/// requested L²(γ) radii, measures how the data distance shrinks with the
/// coefficient distance, and fits the Hölder-type exponent.
#[allow(clippy::too_many_arguments)]
pub fn stability_probe(
    domain: &DiscreteDomain,
    p: f64,
    h0: &RobinField,
    param: &RobinParameterization,
    radii: &[f64],
    m_ball: f64,
    settings: &EigenSolveSettings,
    seed: u64,
) -> Result<StabilityProbeResult> {
    if !(m_ball.is_finite() && m_ball > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "C¹-ball radius must be positive, got {m_ball}"
        )));
    }
    if radii.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
        return Err(Error::InvalidParameter(
            "perturbation radii must be finite and nonnegative".into(),
        ));
    }
    let m0 = forward_measure(domain, p, h0, settings)?;
    let h0_faces = h0.face_means(domain);
    let gamma_w: Vec<f64> = domain
        .robin_faces()
        .map(|f| domain.faces()[f].measure)
        .collect();
    let l2_gamma = |d: &[f64]| -> f64 {
        d.iter()
            .zip(&gamma_w)
            .map(|(v, w)| w * v * v)
            .sum::<f64>()
            .sqrt()
    };
    let k = param.k();
    let draws: Vec<Option<(f64, f64)>> = radii
        .par_iter()
        .enumerate()
        .map(|(j, &r)| -> Result<Option<(f64, f64)>> {
            if r == 0.0 {
                return Ok(None);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(j as u64));
            let coeffs: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mids = domain.robin_arc_midpoints();
            let dir: Vec<f64> = mids
                .iter()
                .map(|&s| {
                    param
                        .basis
                        .values(s)
                        .iter()
                        .zip(&coeffs)
                        .map(|(b, c)| b * c)
                        .sum()
                })
                .collect();
            let norm = l2_gamma(&dir);
            if norm == 0.0 {
                return Ok(None);
            }
            let scale = r / norm;
            if dir.iter().any(|d| (scale * d).abs() > m_ball) {
                // outside the C¹ ball the estimate does not apply
                return Ok(None);
            }
            let hj: Vec<f64> = h0_faces
                .iter()
                .zip(&dir)
                .map(|(h, d)| (h + scale * d).max(param.h_min))
                .collect();
            let diff: Vec<f64> = hj.iter().zip(&h0_faces).map(|(a, b)| a - b).collect();
            let e = l2_gamma(&diff);
            if e == 0.0 {
                return Ok(None);
            }
            let mj = forward_measure(domain, p, &RobinField::PerFace(hj), settings)?;
            let delta = measurement_distance(&mj, &m0)?;
            if delta <= 0.0 {
                return Ok(None);
            }
            Ok(Some((delta, e)))
        })
        .collect::<Result<Vec<_>>>()?;
    let pairs: Vec<(f64, f64)> = draws.into_iter().flatten().collect();
    if pairs.len() < 5 {
        return Err(Error::InsufficientData(format!(
            "stability fit needs at least 5 valid perturbation pairs, got {}",
            pairs.len()
        )));
    }
    let xs: Vec<f64> = pairs.iter().map(|(d, _)| d.ln()).collect();
    let ys: Vec<f64> = pairs.iter().map(|(_, e)| e.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(Error::InsufficientData(
            "all perturbations produced the same data distance".into(),
        ));
    }
    let alpha_hat = sxy / sxx;
    // fit the margin constant on even-indexed pairs; odd ones are held out
    let mut c0_fit: f64 = 0.0;
    for (j, (delta, e)) in pairs.iter().enumerate() {
        if j % 2 == 0 {
            c0_fit = c0_fit.max(e / (m_ball.powf(1.0 - alpha_hat) * delta.powf(alpha_hat)));
        }
    }
    Ok(StabilityProbeResult {
        pairs,
        alpha_hat,
        m_used: m_ball,
        c0: 1.2 * c0_fit,
    })
}

/// Minimum pairwise measurement distance over a grid of coefficients; a
/// strictly positive value is the discrete signature of injectivity.
pub fn uniqueness_probe(
    domain: &DiscreteDomain,
    p: f64,
    h_grid: &[RobinField],
    settings: &EigenSolveSettings,
) -> Result<f64> {
    if h_grid.len() < 2 {
        return Err(Error::InvalidParameter(
            "uniqueness probe needs at least two coefficients".into(),
        ));
    }
    let ms: Vec<Measurement> = h_grid
        .par_iter()
        .map(|h| forward_measure(domain, p, h, settings))
        .collect::<Result<Vec<_>>>()?;
    let mut min = f64::INFINITY;
    for i in 0..ms.len() {
        for j in (i + 1)..ms.len() {
            min = min.min(measurement_distance(&ms[i], &ms[j])?);
        }
    }
    Ok(min)
}

const MAX_CSV_COLUMNS: usize = 1_000_000;

/// One-row CSV with header `lambda,<face_id>,...`; flux columns ordered by
/// face id. Round-trips through `parse_measurement_csv`.
pub fn write_measurement_csv(m: &Measurement) -> String {
    let mut s = String::from("lambda");
    for id in &m.face_ids {
        s.push(',');
        s.push_str(&id.to_string());
    }
    s.push('\n');
    s.push_str(&format!("{:.16e}", m.lambda));
    for q in &m.flux_trace {
        s.push_str(&format!(",{:.16e}", q));
    }
    s.push('\n');
    s
}

/// Parse a measurement CSV against the domain that defines its faces and
/// weights. The header's face ids must match the domain's Γ_D faces exactly.
pub fn parse_measurement_csv(
    text: &str,
    domain: &DiscreteDomain,
    p: f64,
) -> Result<Measurement> {
    if !(p.is_finite() && p > 1.0) {
        return Err(Error::InvalidParameter(format!(
            "exponent p must be finite and > 1, got {p}"
        )));
    }
    let mut lines = text.lines().map(|l| l.trim_end_matches('\r'));
    let header = lines
        .next()
        .ok_or_else(|| Error::InvalidParameter("empty measurement file".into()))?;
    let mut head = header.split(',');
    if head.next().map(str::trim) != Some("lambda") {
        return Err(Error::InvalidParameter(
            "measurement header must start with 'lambda'".into(),
        ));
    }
    let mut face_ids = Vec::new();
    for tok in head {
        if face_ids.len() >= MAX_CSV_COLUMNS {
            return Err(Error::InvalidParameter("too many flux columns".into()));
        }
        let id: u32 = tok.trim().parse().map_err(|_| {
            Error::InvalidParameter(format!("face id '{}' is not an integer", tok.trim()))
        })?;
        face_ids.push(id);
    }
    let (expect_ids, face_weights) = dirichlet_face_table(domain);
    if face_ids != expect_ids {
        return Err(Error::InvalidParameter(format!(
            "measurement faces {face_ids:?} do not match the domain's Dirichlet faces {expect_ids:?}"
        )));
    }
    let row = lines
        .next()
        .ok_or_else(|| Error::InvalidParameter("measurement file has no data row".into()))?;
    let vals: Vec<f64> = row
        .split(',')
        .map(|tok| {
            tok.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidParameter(format!("bad number '{}'", tok.trim())))
        })
        .collect::<Result<Vec<_>>>()?;
    if vals.len() != 1 + face_ids.len() {
        return Err(Error::InvalidParameter(format!(
            "data row has {} values, header promises {}",
            vals.len(),
            1 + face_ids.len()
        )));
    }
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter(
            "measurement values must be finite".into(),
        ));
    }
    for rest in lines {
        if !rest.trim().is_empty() {
            return Err(Error::InvalidParameter(
                "measurement file has more than one data row".into(),
            ));
        }
    }
    Ok(Measurement {
        lambda: vals[0],
        flux_trace: vals[1..].to_vec(),
        face_ids,
        face_weights,
        p,
        flux_norm_kind: FluxNormKind::DiscreteDual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{
        build_interval_domain, build_planar_annulus, build_planar_square, GammaEnd,
    };

    fn tight() -> EigenSolveSettings {
        EigenSolveSettings {
            tol_lambda: 1e-12,
            tol_u: 1e-10,
            max_outer: 1500,
            ..EigenSolveSettings::default()
        }
    }

    #[test]
    fn forward_measure_matches_frozen_values() {
        let d = build_interval_domain(2048, GammaEnd::Right).unwrap();
        let h = RobinField::constant(&d, 1.0).unwrap();
        let m = forward_measure(&d, 2.0, &h, &tight()).unwrap();
        assert!((m.lambda - 4.115858365694523).abs() < 1e-3);
        assert_eq!(m.flux_trace.len(), 1);
        assert!((m.flux_trace[0] - (-2.6240720482373195)).abs() < 1e-2);
        // λ strictly increases with h
        let m0 = forward_measure(&d, 2.0, &RobinField::constant(&d, 0.0).unwrap(), &tight())
            .unwrap();
        assert!(m0.lambda < m.lambda);
        // determinism across seeds up to solver tolerance
        let mut s2 = tight();
        s2.seed = 99;
        let m2 = forward_measure(&d, 2.0, &h, &s2).unwrap();
        assert!(measurement_distance(&m, &m2).unwrap() <= 1e-8);
    }

    #[test]
    fn distance_is_a_metric_on_samples() {
        let d = build_planar_square(6).unwrap();
        let h = RobinField::constant(&d, 1.0).unwrap();
        let m = forward_measure(&d, 2.0, &h, &tight()).unwrap();
        assert_eq!(measurement_distance(&m, &m).unwrap(), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise = NoiseModel {
            flux_rel: 0.1,
            lambda_rel: 0.1,
        };
        for i in 0..50 {
            let a = noise.apply(&m, rng.gen());
            let b = noise.apply(&m, rng.gen());
            let dab = measurement_distance(&a, &b).unwrap();
            let dba = measurement_distance(&b, &a).unwrap();
            assert_eq!(dab, dba, "asymmetric at sample {i}");
            let c = noise.apply(&m, rng.gen());
            let dac = measurement_distance(&a, &c).unwrap();
            let dcb = measurement_distance(&c, &b).unwrap();
            assert!(dab <= dac + dcb + 1e-12);
        }
        // λ-only difference
        let mut shifted = m.clone();
        shifted.lambda += 0.5;
        assert!((measurement_distance(&m, &shifted).unwrap() - 0.5).abs() < 1e-14);
        // partition mismatch
        let d2 = build_planar_square(5).unwrap();
        let m3 = forward_measure(
            &d2,
            2.0,
            &RobinField::constant(&d2, 1.0).unwrap(),
            &tight(),
        )
        .unwrap();
        assert!(matches!(
            measurement_distance(&m, &m3),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn bases_partition_unity_and_synthesize() {
        let d = build_planar_square(8).unwrap();
        for basis in [
            RobinBasis::PiecewiseConstant { k: 4 },
            RobinBasis::BSpline { k: 5, degree: 2 },
        ] {
            let k = basis.len();
            // partition of unity on a parameter sweep
            for i in 0..=200 {
                let s = i as f64 / 200.0;
                let v = basis.values(s);
                assert_eq!(v.len(), k);
                assert!(v.iter().all(|x| *x >= 0.0));
                let sum: f64 = v.iter().sum();
                assert!((sum - 1.0).abs() < 1e-12, "{basis:?} at s={s}: sum {sum}");
            }
            // constant coefficients synthesize a constant field
            let par = RobinParameterization::new(basis, vec![2.5; k], DEFAULT_H_MIN).unwrap();
            let f = par.synthesize(&d).unwrap();
            let means = f.face_means(&d);
            assert!(means.iter().all(|v| (v - 2.5).abs() < 1e-12));
        }
        // below h_min is rejected
        let par = RobinParameterization::new(
            RobinBasis::PiecewiseConstant { k: 2 },
            vec![1.0, 1e-5],
            1e-3,
        )
        .unwrap();
        assert!(matches!(
            par.synthesize(&d),
            Err(Error::ConstraintViolation(_))
        ));
        // basis fields sum to the all-ones field
        let par = RobinParameterization::new(
            RobinBasis::BSpline { k: 4, degree: 1 },
            vec![1.0; 4],
            0.0,
        )
        .unwrap();
        let mut acc = vec![0.0; d.robin_faces().count()];
        for j in 0..4 {
            if let RobinField::PerFace(v) = par.basis_field(&d, j).unwrap() {
                for (a, b) in acc.iter_mut().zip(&v) {
                    *a += b;
                }
            }
        }
        assert!(acc.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn jacobian_first_row_is_the_boundary_formula_and_fd_checks() {
        let d = build_planar_square(8).unwrap();
        let s = tight();
        let par = RobinParameterization::new(
            RobinBasis::PiecewiseConstant { k: 2 },
            vec![1.0, 1.0],
            DEFAULT_H_MIN,
        )
        .unwrap();
        let h0 = par.synthesize(&d).unwrap();
        let base = principal_eigenpair(&d, 2.0, &h0, &s).unwrap();
        let jac = jacobian(&d, 2.0, &h0, &par, None, &s).unwrap();
        assert_eq!(jac.cols, 2);
        assert_eq!(jac.rows, 1 + d.dirichlet_faces().count());
        let t = 1e-4;
        for j in 0..2 {
            let xi = par.basis_field(&d, j).unwrap();
            let formula = lambda_derivative(&base, &xi, &d).unwrap();
            assert!(
                (jac.at(0, j) - formula).abs() <= 1e-12 * (1.0 + formula.abs()),
                "row 0 col {j}"
            );
            let mp = forward_measure(&d, 2.0, &h0.try_axpy(t, &xi).unwrap(), &s).unwrap();
            let mm = forward_measure(&d, 2.0, &h0.try_axpy(-t, &xi).unwrap(), &s).unwrap();
            let fd_l = (mp.lambda - mm.lambda) / (2.0 * t);
            assert!(
                (fd_l - jac.at(0, j)).abs() <= 1e-4 * (1.0 + fd_l.abs()),
                "λ fd col {j}: {fd_l} vs {}",
                jac.at(0, j)
            );
            for r in 0..mp.flux_trace.len() {
                let fd_q = (mp.flux_trace[r] - mm.flux_trace[r]) / (2.0 * t);
                assert!(
                    (fd_q - jac.at(1 + r, j)).abs() <= 1e-3 * (1.0 + fd_q.abs()),
                    "flux fd row {r} col {j}: {fd_q} vs {}",
                    jac.at(1 + r, j)
                );
            }
        }
    }

    #[test]
    fn reconstruction_recovers_scalar_coefficient() {
        let d = build_interval_domain(256, GammaEnd::Right).unwrap();
        let s = tight();
        let par = RobinParameterization::new(
            RobinBasis::PiecewiseConstant { k: 1 },
            vec![1.0],
            DEFAULT_H_MIN,
        )
        .unwrap();
        let c_star = [1.3];
        let h_star = par.with_coefficients(c_star.to_vec()).unwrap();
        let data =
            forward_measure(&d, 2.0, &h_star.synthesize(&d).unwrap(), &s).unwrap();
        let rec = gauss_newton_reconstruct(
            &d,
            2.0,
            &data,
            &par,
            &[0.65],
            1e-12,
            &NoiseModel::NONE,
            &s,
        )
        .unwrap();
        assert!(rec.converged);
        let rel = (rec.c_hat[0] - c_star[0]).abs() / c_star[0];
        assert!(rel <= 1e-6, "recovered {} vs {}", rec.c_hat[0], c_star[0]);
        for w in rec.residual_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-15, "misfit increased: {w:?}");
        }
        // starting at the truth: converged with zero accepted steps
        let rec0 = gauss_newton_reconstruct(
            &d,
            2.0,
            &data,
            &par,
            &c_star,
            1e-12,
            &NoiseModel::NONE,
            &s,
        )
        .unwrap();
        assert!(rec0.converged);
        assert_eq!(rec0.iterations, 0);
        assert_eq!(rec0.c_hat, c_star.to_vec());
    }

    #[test]
    fn reconstruction_recovers_three_chunks_on_annulus() {
        let d = build_planar_annulus(24, 3, 1.0, 2.0).unwrap();
        let s = tight();
        let par = RobinParameterization::new(
            RobinBasis::PiecewiseConstant { k: 3 },
            vec![1.0; 3],
            DEFAULT_H_MIN,
        )
        .unwrap();
        let c_star = [0.8, 1.5, 1.1];
        let h_star = par.with_coefficients(c_star.to_vec()).unwrap();
        let data =
            forward_measure(&d, 2.0, &h_star.synthesize(&d).unwrap(), &s).unwrap();
        let init: Vec<f64> = c_star.iter().map(|c| 0.5 * c).collect();
        let rec = gauss_newton_reconstruct(
            &d,
            2.0,
            &data,
            &par,
            &init,
            1e-10,
            &NoiseModel::NONE,
            &s,
        )
        .unwrap();
        let err: f64 = rec
            .c_hat
            .iter()
            .zip(&c_star)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
            / c_star.iter().map(|c| c * c).sum::<f64>().sqrt();
        assert!(err <= 1e-3, "c_hat = {:?}, relative error {err}", rec.c_hat);
        assert!(rec.converged);
    }

    #[test]
    fn stability_probe_fits_a_positive_exponent() {
        let d = build_interval_domain(192, GammaEnd::Right).unwrap();
        let s = tight();
        let h0 = RobinField::constant(&d, 1.0).unwrap();
        let par = RobinParameterization::new(
            RobinBasis::PiecewiseConstant { k: 1 },
            vec![1.0],
            DEFAULT_H_MIN,
        )
        .unwrap();
        let radii: Vec<f64> = (0..10).map(|i| 1e-3 * 1.8f64.powi(i)).collect();
        let probe = stability_probe(&d, 2.0, &h0, &par, &radii, 10.0, &s, 42).unwrap();
        assert!(probe.pairs.len() >= 5);
        assert!(probe.alpha_hat.is_finite());
        assert!(
            probe.alpha_hat > 0.0 && probe.alpha_hat <= 1.05,
            "α̂ = {}",
            probe.alpha_hat
        );
        // held-out pairs satisfy the fitted bound
        for (j, (delta, e)) in probe.pairs.iter().enumerate() {
            if j % 2 == 1 {
                let bound =
                    probe.c0 * probe.m_used.powf(1.0 - probe.alpha_hat) * delta.powf(probe.alpha_hat);
                assert!(*e <= bound, "holdout pair {j}: e = {e}, bound = {bound}");
            }
        }
        // degenerate radii
        assert!(matches!(
            stability_probe(&d, 2.0, &h0, &par, &[0.0; 8], 10.0, &s, 42),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn uniqueness_probe_separates_constants() {
        let d = build_interval_domain(384, GammaEnd::Right).unwrap();
        let s = tight();
        let grid: Vec<RobinField> = [0.5, 1.0, 2.0]
            .iter()
            .map(|&v| RobinField::constant(&d, v).unwrap())
            .collect();
        let min = uniqueness_probe(&d, 2.0, &grid, &s).unwrap();
        assert!(min > 1e-2, "min pairwise distance {min}");
        let twice = vec![grid[0].clone(), grid[0].clone()];
        let zero = uniqueness_probe(&d, 2.0, &twice, &s).unwrap();
        assert!(zero <= 1e-10);
        assert!(matches!(
            uniqueness_probe(&d, 2.0, &grid[..1], &s),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn equal_mean_profiles_still_separate() {
        let d = build_planar_annulus(24, 3, 1.0, 2.0).unwrap();
        let s = tight();
        let n = d.robin_faces().count();
        let mut a = vec![0.6; n];
        let mut b = vec![0.6; n];
        for i in 0..n {
            if i < n / 2 {
                a[i] = 1.4;
            } else {
                b[i] = 1.4;
            }
        }
        let grid = vec![RobinField::PerFace(a), RobinField::PerFace(b)];
        let min = uniqueness_probe(&d, 2.0, &grid, &s).unwrap();
        assert!(min > 1e-7, "flux should separate equal-mean profiles: {min}");
    }

    #[test]
    fn measurement_csv_round_trips_and_rejects_malformed() {
        let d = build_planar_square(5).unwrap();
        let h = RobinField::constant(&d, 1.0).unwrap();
        let m = forward_measure(&d, 2.0, &h, &tight()).unwrap();
        let text = write_measurement_csv(&m);
        let back = parse_measurement_csv(&text, &d, 2.0).unwrap();
        assert_eq!(back.lambda.to_bits(), m.lambda.to_bits());
        for (a, b) in back.flux_trace.iter().zip(&m.flux_trace) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(back.face_ids, m.face_ids);
        // second trip is byte-identical
        assert_eq!(write_measurement_csv(&back), text);

        let cases = [
            ("", "empty"),
            ("flux,1,2\n1.0,2.0,3.0\n", "header"),
            ("lambda,9999\n1.0,2.0\n", "do not match"),
        ];
        for (bad, needle) in cases {
            let err = parse_measurement_csv(bad, &d, 2.0).unwrap_err();
            let msg = err.to_string();
            assert!(
                msg.contains(needle),
                "input {bad:?}: message {msg:?} missing {needle:?}"
            );
        }
        // missing data row, wrong arity, NaN, extra rows
        let ids: Vec<String> = m.face_ids.iter().map(|i| i.to_string()).collect();
        let head = format!("lambda,{}", ids.join(","));
        let err = parse_measurement_csv(&format!("{head}\n"), &d, 2.0).unwrap_err();
        assert!(err.to_string().contains("no data row"));
        assert!(parse_measurement_csv(&format!("{head}\n1.0\n"), &d, 2.0).is_err());
        let row: Vec<String> = (0..=m.face_ids.len()).map(|_| "nan".to_string()).collect();
        assert!(
            parse_measurement_csv(&format!("{head}\n{}\n", row.join(",")), &d, 2.0).is_err()
        );
        let row: Vec<String> = (0..=m.face_ids.len()).map(|i| i.to_string()).collect();
        let two = format!("{head}\n{r}\n{r}\n", r = row.join(","));
        assert!(parse_measurement_csv(&two, &d, 2.0).is_err());
    }
}
