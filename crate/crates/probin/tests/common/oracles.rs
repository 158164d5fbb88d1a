//! Independent oracles for the integration suites.
//!
//! Nothing here touches the library: eigenvalues come from bisection on
//! transcendental equations, from shooting with a hand-rolled RK4 integrator,
//! or from a transfer-matrix reduction of the piecewise-linear two-phase ODE.
//! Frozen constants were produced by these same routines at high precision and
//! are asserted against them in `oracle_consistency.rs`.

#![allow(dead_code)]

use std::f64::consts::PI;

/// First root of h·sin k + k·cos k = 0 in (π/2, π), frozen for h = 1.
pub const K_ROBIN_H1: f64 = 2.028757838110434;
/// λ = k² for the mixed Dirichlet(0)/Robin(1) problem at p = 2, h = 1.
pub const LAMBDA_ROBIN_H1: f64 = 4.115858365694523;
/// Same problem, h = 0.5.
pub const LAMBDA_ROBIN_H05: f64 = 3.3730892866262106;
/// Same problem, h = 2.
pub const LAMBDA_ROBIN_H2: f64 = 5.239199300195525;
/// Pure Dirichlet p = 2 on (0,1).
pub const LAMBDA_DIRICHLET_P2: f64 = 9.869604401089358;
/// Mixed Dirichlet/Neumann (h = 0) p = 2 on (0,1): (π/2)².
pub const LAMBDA_MIXED_DN_P2: f64 = 2.4674011002723395;
/// Pure Dirichlet p = 3 on (0,1): (p−1)·π_p^p with π_p = 2π/(p sin(π/p)).
pub const LAMBDA_DIRICHLET_P3: f64 = 28.288761976002555;
/// Boundary flux at x = 0 for p = 2, h = 1: −k/‖sin(k·)‖_{L²}.
pub const FLUX_AT_0_H1: f64 = -2.6240720482373195;
/// dλ/dh[ξ≡1] at h = 1, p = 2: sin²k / ∫₀¹ sin²(kx) dx.
pub const DLAMBDA_DH_H1: f64 = 1.3459626170486445;

/// Two-phase (coated) eigenvalues, p = 2, ρ = 1, from the transfer matrix.
pub const TWO_PHASE_P2_RHO1: [(f64, f64); 4] = [
    (0.1, 3.9299665324514104),
    (0.05, 4.023168639427907),
    (0.025, 4.0695971201362955),
    (0.0125, 4.09275103768504),
];

/// Plain bisection; `f` must change sign on [a, b].
pub fn bisect(mut a: f64, mut b: f64, f: impl Fn(f64) -> f64) -> f64 {
    let (fa, fb) = (f(a), f(b));
    assert!(
        fa * fb <= 0.0,
        "bisect: no sign change on [{a}, {b}] ({fa}, {fb})"
    );
    let mut sa = fa.signum();
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        let fm = f(m);
        if fm == 0.0 {
            return m;
        }
        if fm.signum() == sa {
            a = m;
            sa = fm.signum();
        } else {
            b = m;
        }
        if (b - a).abs() <= 1e-15 * (a.abs() + b.abs()) {
            break;
        }
    }
    0.5 * (a + b)
}

/// λ₁ of −u″ = λu, u(0) = 0, u′(1) + h·u(1) = 0: k² with h sin k + k cos k = 0.
pub fn robin_eigenvalue_linear(h: f64) -> f64 {
    assert!(h >= 0.0);
    if h == 0.0 {
        return (PI / 2.0) * (PI / 2.0);
    }
    let k = bisect(PI / 2.0 + 1e-9, PI - 1e-9, |k| h * k.sin() + k * k.cos());
    k * k
}

/// π_p = 2π / (p sin(π/p)); λ₁ of the pure Dirichlet 1D p-Laplacian is (p−1)π_p^p.
pub fn pi_p(p: f64) -> f64 {
    2.0 * PI / (p * (PI / p).sin())
}

/// Closed-form pure Dirichlet 1D p-Laplacian principal eigenvalue on (0,1).
pub fn dirichlet_plaplace_closed_form(p: f64) -> f64 {
    (p - 1.0) * pi_p(p).powf(p)
}

/// RK4 integration of the shooting system for −(|u′|^{p−2}u′)′ = λ|u|^{p−2}u:
/// state (u, w) with w = |u′|^{p−2}u′, so u′ = sign(w)|w|^{1/(p−1)} and
/// w′ = −λ|u|^{p−2}u. Returns (u(1), w(1)).
pub fn shoot(p: f64, lambda: f64, steps: usize) -> (f64, f64) {
    let qexp = 1.0 / (p - 1.0);
    let du = |w: f64| w.signum() * w.abs().powf(qexp);
    let dw = |u: f64| -lambda * u.abs().powf(p - 2.0) * u;
    let h = 1.0 / steps as f64;
    let (mut u, mut w) = (0.0_f64, 1.0_f64);
    for _ in 0..steps {
        let (k1u, k1w) = (du(w), dw(u));
        let (k2u, k2w) = (du(w + 0.5 * h * k1w), dw(u + 0.5 * h * k1u));
        let (k3u, k3w) = (du(w + 0.5 * h * k2w), dw(u + 0.5 * h * k2u));
        let (k4u, k4w) = (du(w + h * k3w), dw(u + h * k3u));
        u += h / 6.0 * (k1u + 2.0 * k2u + 2.0 * k3u + k4u);
        w += h / 6.0 * (k1w + 2.0 * k2w + 2.0 * k3w + k4w);
    }
    (u, w)
}

/// Shooting + eigenvalue bisection for the pure Dirichlet problem on (0,1):
/// the principal λ is the first zero of λ ↦ u(1; λ). The bracket is grown
/// multiplicatively from below so bisection sees exactly one sign change
/// (u(1; λ) oscillates in sign above the first eigenvalue).
pub fn dirichlet_plaplace_shooting(p: f64) -> f64 {
    let steps = 40_000;
    let g = |lam: f64| shoot(p, lam, steps).0;
    let mut lo = 1.0;
    let mut glo = g(lo);
    loop {
        assert!(lo < 1e5, "no sign change while growing the shooting bracket");
        let hi = lo * 1.15;
        let ghi = g(hi);
        if glo.signum() != ghi.signum() {
            return bisect(lo, hi, g);
        }
        lo = hi;
        glo = ghi;
    }
}

/// Shooting + bisection for the mixed problem u(0) = 0 with Robin data at 1:
/// w(1) + h|u(1)|^{p−2}u(1) = 0. The principal λ is the first sign change,
/// which sits below the pure Dirichlet eigenvalue.
pub fn mixed_robin_plaplace_shooting(p: f64, h: f64) -> f64 {
    let steps = 40_000;
    let g = |lam: f64| {
        let (u1, w1) = shoot(p, lam, steps);
        w1 + h * u1.abs().powf(p - 2.0) * u1
    };
    let hi = dirichlet_plaplace_shooting(p) - 1e-6;
    bisect(1e-6, hi, g)
}

/// Transfer-matrix eigenvalue of the linear (p = 2) two-phase ODE:
/// −(σ(x)Φ′)′ = ΛΦ on (0, 1+ερ), Φ(0) = Φ(1+ερ) = 0, σ = 1 on (0,1) and
/// σ = ε on the coating. Matching sine branches across the interface leaves
/// √ε sin(k) cos(k√ε ρ) + cos(k) sin(k√ε ρ) = 0, Λ = k².
pub fn two_phase_lambda_linear(eps: f64, rho: f64) -> f64 {
    let se = eps.sqrt();
    let g = |k: f64| se * k.sin() * (k * se * rho).cos() + k.cos() * (k * se * rho).sin();
    let k = bisect(PI / 2.0 + 1e-9, PI - 1e-9, g);
    k * k
}

/// Least-squares slope of y against x (used for log–log rate fits in tests).
pub fn ls_slope(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}
