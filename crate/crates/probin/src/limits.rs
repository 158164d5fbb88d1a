//! Limit studies: the thin-coating effective-coefficient law h = ρ^{1-p} and
//! its small-ε convergence rate, the closed-form behavior of h as p → 1⁺ and
//! p → ∞, eigenvalue continuity in p, and 1D sup-norm / bounded-variation
//! Rayleigh quotients for the extreme-exponent ground states.
//!
//! No solve is attempted at p = 1 or p = ∞; those regimes are probed through
//! the closed-form coefficient and through scans at moderate p.

use crate::domain::{attach_coating, DimMode, DiscreteDomain, ThicknessProfile};
use crate::eigensolver::{
    principal_eigenpair, two_phase_eigenpair, EigenSolveSettings, RobinField,
};
use crate::error::{Error, Result};
use rayon::prelude::*;
use std::fmt;

/// Adjacent-jump anomaly threshold: a one-step jump is anomalous when it
/// exceeds JUMP_FACTOR times the centered two-neighbor prediction plus the
/// absolute floor (which guards exactly flat curves).
const JUMP_FACTOR: f64 = 5.0;
const JUMP_FLOOR: f64 = 1e-9;

/// One parameter scan: a strictly monotone grid (p or ε values), one primary
/// observable per grid point, an optional secondary observable, an optional
/// limit value the observables approach, and an optional fitted log–log rate.
#[derive(Debug, Clone)]
pub struct LimitScanResult {
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    /// Secondary per-point observable where the scan defines one (the coating
    /// sweep stores ∫_{Σ_ε}|Φ|^p here); empty otherwise.
    pub aux: Vec<f64>,
    pub limit_value: Option<f64>,
    pub rate: Option<f64>,
}

impl LimitScanResult {
    pub fn new(
        grid: Vec<f64>,
        values: Vec<f64>,
        aux: Vec<f64>,
        limit_value: Option<f64>,
        rate: Option<f64>,
    ) -> Result<Self> {
        if grid.is_empty() {
            return Err(Error::InvalidParameter("scan grid is empty".into()));
        }
        if !grid.iter().all(|x| x.is_finite()) {
            return Err(Error::InvalidParameter("scan grid must be finite".into()));
        }
        let inc = grid.windows(2).all(|w| w[0] < w[1]);
        let dec = grid.windows(2).all(|w| w[0] > w[1]);
        if !(inc || dec) {
            return Err(Error::InvalidParameter(
                "scan grid must be strictly monotone".into(),
            ));
        }
        if values.len() != grid.len() {
            return Err(Error::InvalidParameter(format!(
                "scan has {} grid points but {} observables",
                grid.len(),
                values.len()
            )));
        }
        if !aux.is_empty() && aux.len() != grid.len() {
            return Err(Error::InvalidParameter(format!(
                "scan has {} grid points but {} secondary observables",
                grid.len(),
                aux.len()
            )));
        }
        let finite = values.iter().chain(&aux).all(|v| v.is_finite())
            && limit_value.is_none_or(|v| v.is_finite())
            && rate.is_none_or(|r| r.is_finite());
        if !finite {
            return Err(Error::InvalidParameter(
                "scan observables must be finite".into(),
            ));
        }
        Ok(LimitScanResult {
            grid,
            values,
            aux,
            limit_value,
            rate,
        })
    }

    /// Largest |v_{i+1} − v_i| over the grid; None on a single-point grid.
    pub fn max_adjacent_jump(&self) -> Option<f64> {
        if self.values.len() < 2 {
            return None;
        }
        Some(
            self.values
                .windows(2)
                .map(|w| (w[1] - w[0]).abs())
                .fold(0.0, f64::max),
        )
    }

    /// Worst excess of an actual one-step jump J_i = |v_i − v_{i−1}| over the
    /// centered prediction P_i = |v_{i+1} − v_{i−1}|/2, as J_i − (5P_i + floor)
    /// maximized over interior points. Non-positive means every jump is within
    /// five times what its neighbors predict: no discontinuity signature.
    /// None when the grid has fewer than three points.
    pub fn jump_anomaly(&self) -> Option<f64> {
        let v = &self.values;
        if v.len() < 3 {
            return None;
        }
        let mut worst = f64::NEG_INFINITY;
        for i in 1..v.len() - 1 {
            let actual = (v[i] - v[i - 1]).abs();
            let predicted = (v[i + 1] - v[i - 1]).abs() / 2.0;
            worst = worst.max(actual - (JUMP_FACTOR * predicted + JUMP_FLOOR));
        }
        Some(worst)
    }
}

/// Effective Robin coefficient induced by a coating of relative thickness ρ:
/// face-wise h = ρ^{-(p-1)}. Exact closed form, no solve involved.
pub fn effective_h(rho: &ThicknessProfile, p: f64) -> Result<RobinField> {
    if !(p.is_finite() && p >= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "effective coefficient needs p in [1, inf), got {p}"
        )));
    }
    Ok(RobinField::PerFace(
        rho.values().iter().map(|r| r.powf(-(p - 1.0))).collect(),
    ))
}

fn fit_log_log(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return None;
    }
    Some(sxy / sxx)
}

/// Coated-problem sweep: for each ε solve the two-phase eigenproblem on
/// Ω ∪ Σ_ε, solve the limit Robin problem with h = ρ^{1-p} once, and fit the
/// log–log rate of |Λ₁(ε) − μ₁| against ε.
///
/// `grid` = ε values, `values` = Λ₁(ε), `aux` = coating mass per ε,
/// `limit_value` = μ₁. Grid points whose gap has fallen below ten times the
/// solver's eigenvalue tolerance are excluded from the rate fit (the gap is
/// then solver noise, not coating asymptotics); the rate is None when fewer
/// than two points survive.
pub fn coating_sweep(
    base: &DiscreteDomain,
    rho: &ThicknessProfile,
    p: f64,
    epsilons: &[f64],
    n_layer_cells: usize,
    settings: &EigenSolveSettings,
) -> Result<LimitScanResult> {
    if epsilons.is_empty() {
        return Err(Error::InvalidParameter("sweep needs at least one ε".into()));
    }
    if !epsilons.iter().all(|e| e.is_finite() && *e > 0.0) {
        return Err(Error::InvalidParameter(
            "sweep thicknesses must be positive and finite".into(),
        ));
    }
    if !epsilons.windows(2).all(|w| w[0] > w[1]) {
        return Err(Error::InvalidParameter(
            "sweep thicknesses must be strictly decreasing".into(),
        ));
    }
    let h_lim = effective_h(rho, p)?;
    let mu1 = principal_eigenpair(base, p, &h_lim, settings)?.lambda;
    let solved: Vec<(f64, f64)> = epsilons
        .par_iter()
        .map(|&eps| {
            let coated = attach_coating(base, rho, eps, n_layer_cells)?;
            let r = two_phase_eigenpair(&coated, p, settings)?;
            Ok((r.lambda1, r.coating_mass))
        })
        .collect::<Result<_>>()?;
    let lambdas: Vec<f64> = solved.iter().map(|s| s.0).collect();
    let masses: Vec<f64> = solved.iter().map(|s| s.1).collect();
    let gap_floor = 10.0 * settings.tol_lambda * mu1.abs().max(1.0);
    let mut fx = Vec::new();
    let mut fy = Vec::new();
    for (&eps, &l) in epsilons.iter().zip(&lambdas) {
        let gap = (l - mu1).abs();
        if gap >= gap_floor {
            fx.push(eps);
            fy.push(gap);
        }
    }
    let rate = fit_log_log(&fx, &fy);
    LimitScanResult::new(epsilons.to_vec(), lambdas, masses, Some(mu1), rate)
}

/// Deviation of the effective coefficient from 1 as p → 1⁺: records, per grid
/// p, the sup over the given ρ values of |ρ^{-(p-1)} − 1|. The deviation is
/// thickness-independent in the limit: it tends to 0 for every positive ρ.
pub fn p_limit_scan_one(rho_values: &[f64], p_grid: &[f64]) -> Result<LimitScanResult> {
    if rho_values.is_empty() {
        return Err(Error::InvalidParameter("scan needs at least one ρ".into()));
    }
    if !rho_values.iter().all(|r| r.is_finite() && *r > 0.0) {
        return Err(Error::InvalidParameter(
            "thickness values must be positive and finite".into(),
        ));
    }
    if p_grid.is_empty() {
        return Err(Error::InvalidParameter("scan grid is empty".into()));
    }
    if !p_grid.iter().all(|p| *p > 1.0 && *p <= 2.0) {
        return Err(Error::InvalidParameter(
            "the p → 1 scan expects a grid inside (1, 2]".into(),
        ));
    }
    if !p_grid.windows(2).all(|w| w[0] > w[1]) {
        return Err(Error::InvalidParameter(
            "the p → 1 scan expects a strictly decreasing grid".into(),
        ));
    }
    let values: Vec<f64> = p_grid
        .iter()
        .map(|&p| {
            rho_values
                .iter()
                .map(|r| (r.powf(-(p - 1.0)) - 1.0).abs())
                .fold(0.0, f64::max)
        })
        .collect();
    LimitScanResult::new(p_grid.to_vec(), values, Vec::new(), None, None)
}

/// Large-p classification of the effective coefficient at one boundary point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PLimitClass {
    /// h → 0: the coating insulates (ρ > 1).
    NeumannLimit,
    /// h ≡ 1 for every p (ρ = 1).
    UnitLimit,
    /// h → ∞: the coating pins the trace (ρ < 1).
    DirichletLimit,
}

impl fmt::Display for PLimitClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PLimitClass::NeumannLimit => "NEUMANN_LIMIT",
            PLimitClass::UnitLimit => "UNIT_LIMIT",
            PLimitClass::DirichletLimit => "DIRICHLET_LIMIT",
        })
    }
}

/// Classify the p → ∞ regime from the trend of h = ρ^{-(p-1)} along an
/// increasing p grid: the limit is governed entirely by the local thickness,
/// through the sign of ρ − 1.
pub fn p_limit_classify_inf(rho_value: f64, p_grid: &[f64]) -> Result<PLimitClass> {
    if !(rho_value.is_finite() && rho_value > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "thickness must be positive and finite, got {rho_value}"
        )));
    }
    if p_grid.len() < 2 {
        return Err(Error::InvalidParameter(
            "classification needs at least two grid points".into(),
        ));
    }
    if !p_grid.iter().all(|p| p.is_finite() && *p > 1.0) {
        return Err(Error::InvalidParameter(
            "the p → ∞ grid must lie in (1, inf)".into(),
        ));
    }
    if !p_grid.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::InvalidParameter(
            "the p → ∞ grid must be strictly increasing".into(),
        ));
    }
    let hs: Vec<f64> = p_grid.iter().map(|&p| rho_value.powf(-(p - 1.0))).collect();
    if hs.iter().all(|&h| h == 1.0) {
        Ok(PLimitClass::UnitLimit)
    } else if hs.windows(2).all(|w| w[0] > w[1]) {
        Ok(PLimitClass::NeumannLimit)
    } else if hs.windows(2).all(|w| w[0] < w[1]) {
        Ok(PLimitClass::DirichletLimit)
    } else {
        Err(Error::InvalidParameter(
            "coefficient trend is not monotone along the grid".into(),
        ))
    }
}

/// λ₁(p) along a p grid bracketing p0, for continuity checks: the scan
/// records the eigenvalue per grid point; jump diagnostics come from
/// [`LimitScanResult::max_adjacent_jump`] and [`LimitScanResult::jump_anomaly`].
pub fn p_continuity_scan(
    domain: &DiscreteDomain,
    h: &RobinField,
    p0: f64,
    p_grid: &[f64],
    settings: &EigenSolveSettings,
) -> Result<LimitScanResult> {
    h.validate(domain)?;
    if p_grid.is_empty() {
        return Err(Error::InvalidParameter("scan grid is empty".into()));
    }
    if !p_grid.iter().all(|p| p.is_finite() && *p > 1.0) {
        return Err(Error::InvalidParameter(
            "the continuity grid must lie in (1, inf)".into(),
        ));
    }
    let inc = p_grid.windows(2).all(|w| w[0] < w[1]);
    let dec = p_grid.windows(2).all(|w| w[0] > w[1]);
    if !(inc || dec) {
        return Err(Error::InvalidParameter(
            "the continuity grid must be strictly monotone".into(),
        ));
    }
    let (lo, hi) = p_grid
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &p| {
            (l.min(p), h.max(p))
        });
    if !(p0.is_finite() && lo <= p0 && p0 <= hi) {
        return Err(Error::InvalidParameter(format!(
            "p0 = {p0} lies outside the scan interval [{lo}, {hi}]"
        )));
    }
    let values: Vec<f64> = p_grid
        .par_iter()
        .map(|&p| Ok(principal_eigenpair(domain, p, h, settings)?.lambda))
        .collect::<Result<_>>()?;
    LimitScanResult::new(p_grid.to_vec(), values, Vec::new(), None, None)
}

fn require_interval(domain: &DiscreteDomain, what: &str) -> Result<()> {
    if domain.mode != DimMode::Interval {
        return Err(Error::UnsupportedProblem(format!(
            "{what} is evaluated on interval domains only"
        )));
    }
    Ok(())
}

/// Sup-norm Rayleigh quotient of a nodal profile vanishing on the essential
/// boundary: max{‖u′‖_∞, sup_γ|u|} / ‖u‖_∞. Scale-invariant by the internal
/// normalization; the minimizer over admissible profiles on the unit interval
/// with γ = {1} is u(x) = x with value 1.
pub fn linf_rayleigh_eval(domain: &DiscreteDomain, u: &[f64]) -> Result<f64> {
    require_interval(domain, "the sup-norm quotient")?;
    if u.len() != domain.n_nodes() {
        return Err(Error::InvalidParameter(format!(
            "profile has {} entries, domain has {} nodes",
            u.len(),
            domain.n_nodes()
        )));
    }
    if !u.iter().all(|x| x.is_finite()) {
        return Err(Error::InvalidParameter("profile must be finite".into()));
    }
    for n in domain.essential_nodes() {
        if u[n as usize] != 0.0 {
            return Err(Error::ConstraintViolation(format!(
                "profile is {} at essential node {n}; admissible profiles vanish there",
                u[n as usize]
            )));
        }
    }
    let umax = u.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    if umax == 0.0 {
        return Err(Error::DegenerateInput(
            "the zero profile has no quotient".into(),
        ));
    }
    let mut grad_sup = 0.0_f64;
    for e in 0..domain.n_elems() {
        grad_sup = grad_sup.max(domain.grad_of(e, u)[0].abs());
    }
    let mut trace_sup = 0.0_f64;
    for f in domain.robin_faces() {
        for &n in domain.faces()[f].node_slice() {
            trace_sup = trace_sup.max(u[n as usize].abs());
        }
    }
    Ok(grad_sup.max(trace_sup) / umax)
}

/// Bounded-variation candidate on the unit interval: either a continuous
/// piecewise-linear nodal profile on the mesh, or a piecewise-constant
/// function given by interior breakpoints and one value per piece.
#[derive(Debug, Clone)]
pub enum BvCandidate {
    Nodal(Vec<f64>),
    Step {
        breakpoints: Vec<f64>,
        values: Vec<f64>,
    },
}

/// Relaxed bounded-variation Rayleigh quotient
/// (|Du|(Ω) + |trace at Γ_D| + ∫_γ|u|) / ∫|u|: the essential condition is
/// enforced through the boundary-jump penalty, so a candidate that does not
/// vanish at Γ_D pays its trace there. Over step functions 1 on (a, 1] with
/// Γ_D = {0}, γ = {1} the quotient is 2/(1 − a), minimized at a = 0 with
/// value 2.
pub fn bv_quotient_eval(domain: &DiscreteDomain, candidate: &BvCandidate) -> Result<f64> {
    require_interval(domain, "the bounded-variation quotient")?;
    let (x_lo, x_hi) = (0..domain.n_nodes()).fold(
        (f64::INFINITY, f64::NEG_INFINITY),
        |(l, h), i| {
            let x = domain.node(i)[0];
            (l.min(x), h.max(x))
        },
    );
    let mut variation = 0.0;
    let mut trace = 0.0;
    let denom;
    match candidate {
        BvCandidate::Nodal(u) => {
            if u.len() != domain.n_nodes() {
                return Err(Error::InvalidParameter(format!(
                    "profile has {} entries, domain has {} nodes",
                    u.len(),
                    domain.n_nodes()
                )));
            }
            if !u.iter().all(|x| x.is_finite()) {
                return Err(Error::InvalidParameter("profile must be finite".into()));
            }
            let mut integral = 0.0;
            for e in 0..domain.n_elems() {
                let en = domain.elem(e);
                let (a, b) = (u[en[0] as usize], u[en[1] as usize]);
                let len = domain.elem_volume(e);
                variation += (b - a).abs();
                // exact ∫|linear| over the element, sign change included
                integral += if a * b >= 0.0 {
                    len * (a.abs() + b.abs()) / 2.0
                } else {
                    len * (a * a + b * b) / (2.0 * (a.abs() + b.abs()))
                };
            }
            for f in domain.dirichlet_faces() {
                for &n in domain.faces()[f].node_slice() {
                    variation += u[n as usize].abs();
                }
            }
            for f in domain.robin_faces() {
                for &n in domain.faces()[f].node_slice() {
                    trace += u[n as usize].abs();
                }
            }
            denom = integral;
        }
        BvCandidate::Step {
            breakpoints,
            values,
        } => {
            if values.len() != breakpoints.len() + 1 {
                return Err(Error::InvalidParameter(format!(
                    "{} breakpoints need {} piece values, got {}",
                    breakpoints.len(),
                    breakpoints.len() + 1,
                    values.len()
                )));
            }
            if !breakpoints.iter().all(|x| x.is_finite() && x_lo < *x && *x < x_hi) {
                return Err(Error::InvalidParameter(format!(
                    "breakpoints must lie strictly inside ({x_lo}, {x_hi})"
                )));
            }
            if !breakpoints.windows(2).all(|w| w[0] < w[1]) {
                return Err(Error::InvalidParameter(
                    "breakpoints must be strictly increasing".into(),
                ));
            }
            if !values.iter().all(|v| v.is_finite()) {
                return Err(Error::InvalidParameter(
                    "piece values must be finite".into(),
                ));
            }
            for w in values.windows(2) {
                variation += (w[1] - w[0]).abs();
            }
            let mut integral = 0.0;
            let mut left = x_lo;
            for (j, &v) in values.iter().enumerate() {
                let right = breakpoints.get(j).copied().unwrap_or(x_hi);
                integral += v.abs() * (right - left);
                left = right;
            }
            let end_value = |x: f64| -> f64 {
                if x == x_lo {
                    values[0]
                } else {
                    values[values.len() - 1]
                }
            };
            for f in domain.dirichlet_faces() {
                let n = domain.faces()[f].node_slice()[0];
                variation += end_value(domain.node(n as usize)[0]).abs();
            }
            for f in domain.robin_faces() {
                let n = domain.faces()[f].node_slice()[0];
                trace += end_value(domain.node(n as usize)[0]).abs();
            }
            denom = integral;
        }
    }
    if denom == 0.0 {
        return Err(Error::DegenerateInput(
            "the candidate vanishes almost everywhere".into(),
        ));
    }
    Ok((variation + trace) / denom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{build_interval_domain, build_planar_square, GammaEnd};

    /// Mixed Dirichlet-Robin interval eigenvalue at p = 2, h = 1, frozen from
    /// the transcendental-root oracle.
    const LAMBDA_P2_H1: f64 = 4.115858365694523;

    fn unit_interval(n: usize) -> DiscreteDomain {
        build_interval_domain(n, GammaEnd::Right).unwrap()
    }

    #[test]
    fn scan_result_checks_its_invariants() {
        assert!(matches!(
            LimitScanResult::new(vec![], vec![], vec![], None, None),
            Err(Error::InvalidParameter(_))
        ));
        assert!(matches!(
            LimitScanResult::new(vec![1.0, 1.0], vec![0.0, 0.0], vec![], None, None),
            Err(Error::InvalidParameter(_))
        ));
        assert!(matches!(
            LimitScanResult::new(vec![1.0, 2.0], vec![0.0, f64::NAN], vec![], None, None),
            Err(Error::InvalidParameter(_))
        ));
        assert!(matches!(
            LimitScanResult::new(vec![1.0, 2.0], vec![0.0, 1.0], vec![3.0], None, None),
            Err(Error::InvalidParameter(_))
        ));
        let single = LimitScanResult::new(vec![2.0], vec![5.0], vec![], None, None).unwrap();
        assert!(single.max_adjacent_jump().is_none());
        assert!(single.jump_anomaly().is_none());
        let two = LimitScanResult::new(vec![1.0, 2.0], vec![5.0, 4.0], vec![], None, None).unwrap();
        assert_eq!(two.max_adjacent_jump(), Some(1.0));
        assert!(two.jump_anomaly().is_none());
        // a flat curve with one spike is flagged, a linear curve is not
        let spike =
            LimitScanResult::new(vec![1.0, 2.0, 3.0], vec![0.0, 1.0, 0.0], vec![], None, None)
                .unwrap();
        assert!(spike.jump_anomaly().unwrap() > 0.0);
        let line =
            LimitScanResult::new(vec![1.0, 2.0, 3.0], vec![0.0, 1.0, 2.0], vec![], None, None)
                .unwrap();
        assert!(line.jump_anomaly().unwrap() <= 0.0);
    }

    #[test]
    fn effective_coefficient_closed_form_and_monotonicity() {
        let d = unit_interval(8);
        let rho2 = ThicknessProfile::constant(&d, 2.0).unwrap();
        let rho1 = ThicknessProfile::constant(&d, 1.0).unwrap();
        let rho_half = ThicknessProfile::constant(&d, 0.5).unwrap();
        let vals = |f: &RobinField| -> Vec<f64> {
            match f {
                RobinField::PerFace(v) => v.clone(),
                RobinField::Nodal(_) => panic!("expected a per-face field"),
            }
        };
        assert!(vals(&effective_h(&rho2, 3.0).unwrap())
            .iter()
            .all(|&h| h == 0.25));
        assert!(vals(&effective_h(&rho2, 2.0).unwrap())
            .iter()
            .all(|&h| h == 0.5));
        for p in [1.0, 1.5, 2.0, 7.0] {
            assert!(vals(&effective_h(&rho1, p).unwrap()).iter().all(|&h| h == 1.0));
        }
        let grid = [1.2, 1.5, 2.0, 3.0, 4.0];
        let on_grid = |rho: &ThicknessProfile| -> Vec<f64> {
            grid.iter()
                .map(|&p| vals(&effective_h(rho, p).unwrap())[0])
                .collect()
        };
        let thick = on_grid(&rho2);
        assert!(thick.windows(2).all(|w| w[0] > w[1]), "{thick:?}");
        let thin = on_grid(&rho_half);
        assert!(thin.windows(2).all(|w| w[0] < w[1]), "{thin:?}");
        assert!(matches!(
            effective_h(&rho2, 0.9),
            Err(Error::InvalidParameter(_))
        ));
        assert!(matches!(
            effective_h(&rho2, f64::NAN),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn coating_sweep_converges_at_first_order() {
        let base = unit_interval(512);
        let eps = [0.1, 0.05, 0.025, 0.0125];
        let settings = EigenSolveSettings::default();
        for (p, rho_v) in [(2.0, 1.0), (2.0, 2.0), (3.0, 2.0), (1.5, 1.0)] {
            let rho = ThicknessProfile::constant(&base, rho_v).unwrap();
            let scan = coating_sweep(&base, &rho, p, &eps, 16, &settings).unwrap();
            let mu = scan.limit_value.unwrap();
            if p == 2.0 && rho_v == 1.0 {
                assert!(
                    (mu - LAMBDA_P2_H1).abs() < 1e-3,
                    "limit eigenvalue {mu} is off the oracle value"
                );
            }
            let gaps: Vec<f64> = scan.values.iter().map(|l| (l - mu).abs()).collect();
            assert!(
                gaps.windows(2).all(|w| w[0] > w[1]),
                "p={p} rho={rho_v}: gaps not decreasing: {gaps:?}"
            );
            assert!(scan.values.iter().all(|&l| l < mu), "coated eigenvalue should sit below the limit");
            let rate = scan.rate.expect("four usable points for the rate fit");
            assert!(rate >= 0.8, "p={p} rho={rho_v}: rate {rate}");
            let ratios: Vec<f64> = scan.aux.iter().zip(&eps).map(|(m, e)| m / e).collect();
            let (lo, hi) = ratios
                .iter()
                .fold((f64::INFINITY, 0.0_f64), |(l, h), &r| (l.min(r), h.max(r)));
            assert!(lo > 0.0 && hi <= 3.0 * lo, "coating mass ratios spread too far: {ratios:?}");
        }
        let rho = ThicknessProfile::constant(&base, 1.0).unwrap();
        for bad in [vec![], vec![0.05, 0.1], vec![-0.1, -0.2]] {
            assert!(matches!(
                coating_sweep(&base, &rho, 2.0, &bad, 8, &settings),
                Err(Error::InvalidParameter(_))
            ));
        }
    }

    #[test]
    fn deviation_scan_near_one_matches_closed_form() {
        let scan = p_limit_scan_one(&[0.5, 2.0], &[2.0, 1.5, 1.2, 1.1, 1.05]).unwrap();
        let direct = |p: f64| -> f64 {
            let a = (2.0_f64.powf(-(p - 1.0)) - 1.0).abs();
            let b = (0.5_f64.powf(-(p - 1.0)) - 1.0).abs();
            a.max(b)
        };
        for (i, &p) in [2.0, 1.5, 1.2, 1.1, 1.05].iter().enumerate() {
            assert_eq!(scan.values[i], direct(p));
        }
        assert!(scan.values[4] <= 0.05, "deviation at p = 1.05: {}", scan.values[4]);
        let thick_only = p_limit_scan_one(&[2.0], &[2.0, 1.5, 1.2, 1.1, 1.05]).unwrap();
        assert_eq!(thick_only.values[0], 0.5);
        assert!(
            thick_only.values.windows(2).all(|w| w[0] > w[1]),
            "deviation should shrink toward p = 1: {:?}",
            thick_only.values
        );
        assert!(matches!(
            p_limit_scan_one(&[2.0], &[2.5, 1.5]),
            Err(Error::InvalidParameter(_))
        ));
        assert!(matches!(
            p_limit_scan_one(&[2.0], &[1.1, 1.5]),
            Err(Error::InvalidParameter(_))
        ));
        assert!(matches!(
            p_limit_scan_one(&[-1.0], &[1.5, 1.2]),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn large_p_classification_covers_all_regimes() {
        let grid = [1.5, 2.0, 4.0, 8.0];
        assert_eq!(p_limit_classify_inf(2.0, &grid).unwrap(), PLimitClass::NeumannLimit);
        assert_eq!(p_limit_classify_inf(1.0, &grid).unwrap(), PLimitClass::UnitLimit);
        assert_eq!(p_limit_classify_inf(0.5, &grid).unwrap(), PLimitClass::DirichletLimit);
        assert_eq!(PLimitClass::NeumannLimit.to_string(), "NEUMANN_LIMIT");
        assert_eq!(PLimitClass::UnitLimit.to_string(), "UNIT_LIMIT");
        assert_eq!(PLimitClass::DirichletLimit.to_string(), "DIRICHLET_LIMIT");
        assert!(matches!(
            p_limit_classify_inf(0.0, &grid),
            Err(Error::InvalidParameter(_))
        ));
        assert!(matches!(
            p_limit_classify_inf(2.0, &[2.0]),
            Err(Error::InvalidParameter(_))
        ));
        assert!(matches!(
            p_limit_classify_inf(2.0, &[2.0, 1.5]),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn continuity_scan_sees_no_jump_across_two() {
        let d = unit_interval(128);
        let h = RobinField::constant(&d, 1.0).unwrap();
        let grid: Vec<f64> = (0..9).map(|i| 1.8 + 0.05 * i as f64).collect();
        let scan =
            p_continuity_scan(&d, &h, 2.0, &grid, &EigenSolveSettings::default()).unwrap();
        assert!(
            (scan.values[4] - LAMBDA_P2_H1).abs() < 1e-3,
            "eigenvalue at p = 2: {}",
            scan.values[4]
        );
        assert!(
            scan.jump_anomaly().unwrap() <= 0.0,
            "adjacent jumps exceed the neighbor prediction: {:?}",
            scan.values
        );
        assert!(scan.max_adjacent_jump().unwrap() < 0.5);
        let single = p_continuity_scan(&d, &h, 2.0, &[2.0], &EigenSolveSettings::default()).unwrap();
        assert!(single.max_adjacent_jump().is_none());
        assert!(single.jump_anomaly().is_none());
        assert!(matches!(
            p_continuity_scan(&d, &h, 3.0, &grid, &EigenSolveSettings::default()),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn eigenvalue_trends_to_the_step_level_near_one() {
        let d = unit_interval(48);
        let h = RobinField::constant(&d, 1.0).unwrap();
        // Exponents this close to 1 need the inner Hessian cap far below the
        // flux granularity floor so the zero-crossing element is overdamped
        // locally instead of the whole Newton step stalling; see delta_inner.
        let s = EigenSolveSettings {
            tol_lambda: 1e-8,
            tol_u: 1e-6,
            max_outer: 2000,
            max_inner: 200,
            delta_inner: Some(1e-12),
            ..EigenSolveSettings::default()
        };
        let scan = p_continuity_scan(&d, &h, 1.2, &[1.3, 1.2, 1.1], &s).unwrap();
        // brute-force step-function minimum over jump locations
        let coarse = unit_interval(16);
        let mut step_min = f64::INFINITY;
        for k in 0..18 {
            let a = 0.05 * k as f64;
            let cand = if a == 0.0 {
                BvCandidate::Step { breakpoints: vec![], values: vec![1.0] }
            } else {
                BvCandidate::Step { breakpoints: vec![a], values: vec![0.0, 1.0] }
            };
            step_min = step_min.min(bv_quotient_eval(&coarse, &cand).unwrap());
        }
        assert_eq!(step_min, 2.0);
        let gaps: Vec<f64> = scan.values.iter().map(|l| l - step_min).collect();
        assert!(gaps.iter().all(|&g| g > 0.0), "{gaps:?}");
        assert!(
            gaps.windows(2).all(|w| w[0] > w[1]),
            "gap to the step level should shrink as p drops: {gaps:?}"
        );
    }

    #[test]
    fn sup_norm_quotient_examples() {
        let d = unit_interval(10);
        let x: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
        let v = linf_rayleigh_eval(&d, &x).unwrap();
        assert!((v - 1.0).abs() < 1e-13, "{v}");
        let kink: Vec<f64> = x.iter().map(|&t| (2.0 * t).min(1.0)).collect();
        let v = linf_rayleigh_eval(&d, &kink).unwrap();
        assert!((v - 2.0).abs() < 1e-13, "{v}");
        let scaled: Vec<f64> = kink.iter().map(|u| u * 3.7e9).collect();
        let vs = linf_rayleigh_eval(&d, &scaled).unwrap();
        assert!((vs - v).abs() <= 1e-14 * v.abs());
        assert!(matches!(
            linf_rayleigh_eval(&d, &[0.0; 11]),
            Err(Error::DegenerateInput(_))
        ));
        let mut lifted = x.clone();
        lifted[0] = 0.5;
        assert!(matches!(
            linf_rayleigh_eval(&d, &lifted),
            Err(Error::ConstraintViolation(_))
        ));
        assert!(matches!(
            linf_rayleigh_eval(&d, &x[..5]),
            Err(Error::InvalidParameter(_))
        ));
        let planar = build_planar_square(3).unwrap();
        assert!(matches!(
            linf_rayleigh_eval(&planar, &vec![0.0; planar.n_nodes()]),
            Err(Error::UnsupportedProblem(_))
        ));
    }

    #[test]
    fn sup_norm_quotient_is_minimized_by_the_identity_profile() {
        let n = 100;
        let d = unit_interval(n);
        let xs: Vec<f64> = (0..=n).map(|i| i as f64 / n as f64).collect();
        let mut best = f64::INFINITY;
        let mut best_knee = (0.0, 0.0);
        for ka in 1..19 {
            let a = 0.05 * ka as f64;
            for kb in 1..30 {
                let b = 0.05 * kb as f64;
                let profile: Vec<f64> = xs
                    .iter()
                    .map(|&t| {
                        if t <= a {
                            b * t / a
                        } else {
                            b + (1.0 - b) * (t - a) / (1.0 - a)
                        }
                    })
                    .collect();
                let q = linf_rayleigh_eval(&d, &profile).unwrap();
                if q < best {
                    best = q;
                    best_knee = (a, b);
                }
            }
        }
        assert!((best - 1.0).abs() <= 1e-12, "minimum {best} at {best_knee:?}");
        assert!(
            (best_knee.0 - best_knee.1).abs() <= 1e-12,
            "the minimizing knee should sit on the diagonal, got {best_knee:?}"
        );
    }

    #[test]
    fn bounded_variation_quotient_examples() {
        let d = unit_interval(16);
        // steps 1 on (a, 1]: quotient 2/(1 - a), minimized at a = 0
        for k in 1..=9 {
            let a = 0.1 * k as f64;
            let q = bv_quotient_eval(
                &d,
                &BvCandidate::Step { breakpoints: vec![a], values: vec![0.0, 1.0] },
            )
            .unwrap();
            assert!((q - 2.0 / (1.0 - a)).abs() < 1e-12, "a={a}: {q}");
        }
        let q0 = bv_quotient_eval(
            &d,
            &BvCandidate::Step { breakpoints: vec![], values: vec![1.0] },
        )
        .unwrap();
        assert_eq!(q0, 2.0);
        let xs: Vec<f64> = (0..=16).map(|i| i as f64 / 16.0).collect();
        let q = bv_quotient_eval(&d, &BvCandidate::Nodal(xs.clone())).unwrap();
        assert!((q - 4.0).abs() < 1e-12, "{q}");
        // sign change inside an element is integrated exactly
        let tiny = unit_interval(2);
        let qt = bv_quotient_eval(&tiny, &BvCandidate::Nodal(vec![-1.0, 1.0, 3.0])).unwrap();
        assert!((qt - 6.4).abs() < 1e-12, "{qt}");
        let scaled: Vec<f64> = xs.iter().map(|u| u * 2.5e7).collect();
        let qs = bv_quotient_eval(&d, &BvCandidate::Nodal(scaled)).unwrap();
        assert!((qs - q).abs() <= 1e-14 * q, "amplitude changed the quotient: {qs} vs {q}");
        assert!(matches!(
            bv_quotient_eval(&d, &BvCandidate::Nodal(vec![0.0; 17])),
            Err(Error::DegenerateInput(_))
        ));
        assert!(matches!(
            bv_quotient_eval(
                &d,
                &BvCandidate::Step { breakpoints: vec![0.5, 0.3], values: vec![0.0, 1.0, 2.0] }
            ),
            Err(Error::InvalidParameter(_))
        ));
        assert!(matches!(
            bv_quotient_eval(
                &d,
                &BvCandidate::Step { breakpoints: vec![0.5], values: vec![1.0] }
            ),
            Err(Error::InvalidParameter(_))
        ));
        assert!(matches!(
            bv_quotient_eval(
                &d,
                &BvCandidate::Step { breakpoints: vec![1.5], values: vec![0.0, 1.0] }
            ),
            Err(Error::InvalidParameter(_))
        ));
        let planar = build_planar_square(3).unwrap();
        assert!(matches!(
            bv_quotient_eval(&planar, &BvCandidate::Nodal(vec![1.0; planar.n_nodes()])),
            Err(Error::UnsupportedProblem(_))
        ));
    }
}
