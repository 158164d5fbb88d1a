//! Minimal symmetric linear algebra for the P1 assemblies: a triplet-built
//! sparse symmetric matrix, direct factorizations for the tridiagonal (1D) and
//! small dense cases, preconditioned conjugate gradients for the rest, and a
//! bordered solver for the one-constraint saddle systems of the linearized
//! eigenproblem.

/// Symmetric sparse matrix in CSR form; both triangles stored so mat-vec needs
/// no branching. Built deterministically from sorted triplets.
#[derive(Debug, Clone)]
pub struct SparseSym {
    pub n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<u32>,
    vals: Vec<f64>,
}

impl SparseSym {
    /// Build from (i, j, v) triplets; duplicates are summed. Only provide each
    /// unordered pair once with both (i,j) and (j,i), or provide symmetric
    /// triplets consistently — the builder stores exactly what it is given.
    pub fn from_triplets(n: usize, mut trips: Vec<(u32, u32, f64)>) -> Self {
        trips.sort_unstable_by_key(|t| (t.0, t.1));
        let mut row_ptr = vec![0usize; n + 1];
        let mut col_idx: Vec<u32> = Vec::with_capacity(trips.len());
        let mut vals: Vec<f64> = Vec::with_capacity(trips.len());
        let mut cur_row = 0usize;
        for &(i, j, v) in &trips {
            debug_assert!((i as usize) < n && (j as usize) < n);
            while cur_row < i as usize {
                cur_row += 1;
                row_ptr[cur_row] = col_idx.len();
            }
            if col_idx.len() > row_ptr[cur_row] && *col_idx.last().unwrap() == j {
                *vals.last_mut().unwrap() += v;
            } else {
                col_idx.push(j);
                vals.push(v);
            }
        }
        while cur_row < n {
            cur_row += 1;
            row_ptr[cur_row] = col_idx.len();
        }
        SparseSym {
            n,
            row_ptr,
            col_idx,
            vals,
        }
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n);
        for i in 0..self.n {
            let mut s = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                s += self.vals[k] * x[self.col_idx[k] as usize];
            }
            y[i] = s;
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.n];
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                if self.col_idx[k] as usize == i {
                    d[i] += self.vals[k];
                }
            }
        }
        d
    }

    /// Half-bandwidth of the stored pattern.
    pub fn bandwidth(&self) -> usize {
        let mut b = 0usize;
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                b = b.max((self.col_idx[k] as isize - i as isize).unsigned_abs());
            }
        }
        b
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut a = vec![0.0; self.n * self.n];
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                a[i * self.n + self.col_idx[k] as usize] += self.vals[k];
            }
        }
        a
    }

    pub fn to_tridiag(&self) -> (Vec<f64>, Vec<f64>) {
        debug_assert!(self.bandwidth() <= 1);
        let mut d = vec![0.0; self.n];
        let mut e = vec![0.0; self.n.saturating_sub(1)];
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                let j = self.col_idx[k] as usize;
                if j == i {
                    d[i] += self.vals[k];
                } else if j == i + 1 {
                    e[i] += self.vals[k];
                }
            }
        }
        (d, e)
    }
}

/// A factored SPD matrix ready for repeated solves.
pub enum SpdFactor {
    /// LDLᵀ of a symmetric tridiagonal matrix: diag of D and subdiagonal of L.
    Tridiag { d: Vec<f64>, l: Vec<f64> },
    /// Dense lower-triangular Cholesky factor, row-major.
    Dense { n: usize, l: Vec<f64> },
    /// Jacobi (diagonal) preconditioner; not a direct solve.
    Jacobi { inv_d: Vec<f64> },
}

const DENSE_LIMIT: usize = 2000;

/// Factor an SPD matrix: tridiagonal LDLᵀ when the pattern is tridiagonal,
/// dense Cholesky for small systems, Jacobi fallback otherwise (callers then
/// use PCG). Fails on a non-positive pivot.
pub fn factor_spd(a: &SparseSym) -> Result<SpdFactor, String> {
    if a.bandwidth() <= 1 {
        let (diag, e) = a.to_tridiag();
        let n = a.n;
        let mut d = vec![0.0; n];
        let mut l = vec![0.0; n.saturating_sub(1)];
        d[0] = diag[0];
        if d[0] <= 0.0 {
            return Err("non-positive pivot in tridiagonal factorization".into());
        }
        for i in 1..n {
            l[i - 1] = e[i - 1] / d[i - 1];
            d[i] = diag[i] - l[i - 1] * e[i - 1];
            if d[i] <= 0.0 {
                return Err(format!("non-positive pivot at row {i}"));
            }
        }
        Ok(SpdFactor::Tridiag { d, l })
    } else if a.n <= DENSE_LIMIT {
        let n = a.n;
        let mut m = a.to_dense();
        for j in 0..n {
            let mut s = m[j * n + j];
            for k in 0..j {
                s -= m[j * n + k] * m[j * n + k];
            }
            if s <= 0.0 {
                return Err(format!("non-positive pivot at column {j}"));
            }
            let diag = s.sqrt();
            m[j * n + j] = diag;
            for i in (j + 1)..n {
                let mut s = m[i * n + j];
                for k in 0..j {
                    s -= m[i * n + k] * m[j * n + k];
                }
                m[i * n + j] = s / diag;
            }
        }
        Ok(SpdFactor::Dense { n, l: m })
    } else {
        let d = a.diagonal();
        if d.iter().any(|&x| x <= 0.0) {
            return Err("non-positive diagonal".into());
        }
        Ok(SpdFactor::Jacobi {
            inv_d: d.iter().map(|&x| 1.0 / x).collect(),
        })
    }
}

impl SpdFactor {
    pub fn solve_into(&self, b: &[f64], x: &mut Vec<f64>) {
        x.clear();
        x.extend_from_slice(b);
        match self {
            SpdFactor::Tridiag { d, l } => {
                let n = d.len();
                for i in 1..n {
                    x[i] -= l[i - 1] * x[i - 1];
                }
                for i in 0..n {
                    x[i] /= d[i];
                }
                for i in (0..n.saturating_sub(1)).rev() {
                    x[i] -= l[i] * x[i + 1];
                }
            }
            SpdFactor::Dense { n, l } => {
                let n = *n;
                for i in 0..n {
                    let mut s = x[i];
                    for k in 0..i {
                        s -= l[i * n + k] * x[k];
                    }
                    x[i] = s / l[i * n + i];
                }
                for i in (0..n).rev() {
                    let mut s = x[i];
                    for k in (i + 1)..n {
                        s -= l[k * n + i] * x[k];
                    }
                    x[i] = s / l[i * n + i];
                }
            }
            SpdFactor::Jacobi { inv_d } => {
                for (xi, di) in x.iter_mut().zip(inv_d) {
                    *xi *= di;
                }
            }
        }
    }

    pub fn is_direct(&self) -> bool {
        !matches!(self, SpdFactor::Jacobi { .. })
    }
}

/// Solve an SPD system: direct when the factorization is direct, otherwise
/// PCG with the Jacobi preconditioner refined to near machine precision.
pub fn solve_spd(a: &SparseSym, b: &[f64]) -> Result<Vec<f64>, String> {
    let f = factor_spd(a)?;
    if f.is_direct() {
        let mut x = Vec::new();
        f.solve_into(b, &mut x);
        Ok(x)
    } else {
        pcg(
            |x, y| a.matvec(x, y),
            |r, z| f.solve_into(r, z),
            b,
            1e-14,
            40 * a.n + 100,
        )
        .map(|(x, _)| x)
    }
}

/// Preconditioned conjugate gradients. `apply` computes y = A x; `precond`
/// computes z = M⁻¹ r. Returns (x, iterations) or an error on breakdown
/// (non-SPD operator) or stagnation.
pub fn pcg(
    apply: impl Fn(&[f64], &mut [f64]),
    precond: impl Fn(&[f64], &mut Vec<f64>),
    b: &[f64],
    rel_tol: f64,
    max_iter: usize,
) -> Result<(Vec<f64>, usize), String> {
    let n = b.len();
    let bnorm = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if bnorm == 0.0 {
        return Ok((vec![0.0; n], 0));
    }
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut z = Vec::new();
    precond(&r, &mut z);
    let mut p = z.clone();
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    let mut ap = vec![0.0; n];
    for it in 0..max_iter {
        apply(&p, &mut ap);
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        if !(pap > 0.0) {
            return Err(format!("pcg breakdown: pᵀAp = {pap} at iteration {it}"));
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rnorm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        if rnorm <= rel_tol * bnorm {
            return Ok((x, it + 1));
        }
        precond(&r, &mut z);
        let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err("pcg did not converge".into())
}

/// Solve the bordered saddle system
///   M x + μ c = b,   cᵀ x = 0
/// where M is symmetric (possibly singular along a direction transversal to c)
/// but M + ρ ccᵀ is positive definite. Uses PCG on M + ρ ccᵀ with the supplied
/// SPD preconditioner, then eliminates the border:
///   x = x_b − μ x_c,  μ = cᵀx_b / cᵀx_c,  with x_b = (M+ρccᵀ)⁻¹b, x_c = …⁻¹c.
/// Returns (x, μ).
pub fn solve_bordered(
    m: &SparseSym,
    c: &[f64],
    b: &[f64],
    rho: f64,
    precond: &SpdFactor,
) -> Result<(Vec<f64>, f64), String> {
    let n = m.n;
    debug_assert_eq!(c.len(), n);
    let apply = |x: &[f64], y: &mut [f64]| {
        m.matvec(x, y);
        let cx: f64 = c.iter().zip(x).map(|(a, b)| a * b).sum();
        for i in 0..n {
            y[i] += rho * cx * c[i];
        }
    };
    let pc = |r: &[f64], z: &mut Vec<f64>| precond.solve_into(r, z);
    let (xb, _) = pcg(apply, pc, b, 1e-14, 60 * n + 400)?;
    let (xc, _) = pcg(apply, pc, c, 1e-14, 60 * n + 400)?;
    let cxb: f64 = c.iter().zip(&xb).map(|(a, b)| a * b).sum();
    let cxc: f64 = c.iter().zip(&xc).map(|(a, b)| a * b).sum();
    if cxc.abs() <= 1e-300 {
        return Err("constraint direction annihilated by the operator".into());
    }
    let mu = cxb / cxc;
    let x: Vec<f64> = xb.iter().zip(&xc).map(|(bi, ci)| bi - mu * ci).collect();
    Ok((x, mu))
}

/// Dense symmetric solve for small k×k normal-equation systems (Cholesky).
pub fn solve_dense_spd(n: usize, a: &[f64], b: &[f64]) -> Result<Vec<f64>, String> {
    debug_assert_eq!(a.len(), n * n);
    let mut trips = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let v = a[i * n + j];
            if v != 0.0 {
                trips.push((i as u32, j as u32, v));
            }
        }
    }
    // route through the shared dense Cholesky; bandwidth check is harmless at k ≤ 3
    let sp = SparseSym::from_triplets(n, trips);
    let f = match factor_spd(&sp)? {
        SpdFactor::Jacobi { .. } => return Err("system too large for dense solve".into()),
        f => f,
    };
    let mut x = Vec::new();
    f.solve_into(b, &mut x);
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn laplace_1d(n: usize) -> SparseSym {
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i as u32, i as u32, 2.0));
            if i + 1 < n {
                t.push((i as u32, i as u32 + 1, -1.0));
                t.push((i as u32 + 1, i as u32, -1.0));
            }
        }
        SparseSym::from_triplets(n, t)
    }

    #[test]
    fn tridiagonal_direct_solve_is_exact() {
        let n = 257;
        let a = laplace_1d(n);
        let xstar: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut b = vec![0.0; n];
        a.matvec(&xstar, &mut b);
        let x = solve_spd(&a, &b).unwrap();
        let err = x
            .iter()
            .zip(&xstar)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-10, "err = {err}");
    }

    #[test]
    fn dense_cholesky_handles_general_spd() {
        let n = 40;
        // A = L Lᵀ + I from a fixed pseudo-random L
        let mut a = vec![0.0; n * n];
        let mut s = 123456789u64;
        let mut rnd = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        };
        let l: Vec<f64> = (0..n * n).map(|_| rnd() * 0.3).collect();
        for i in 0..n {
            for j in 0..n {
                let mut v = if i == j { 1.0 } else { 0.0 };
                for k in 0..n {
                    v += l[i * n + k] * l[j * n + k];
                }
                a[i * n + j] = v;
            }
        }
        let mut trips = Vec::new();
        for i in 0..n {
            for j in 0..n {
                trips.push((i as u32, j as u32, a[i * n + j]));
            }
        }
        let sp = SparseSym::from_triplets(n, trips);
        let xstar: Vec<f64> = (0..n).map(|i| (i as f64).cos()).collect();
        let mut b = vec![0.0; n];
        sp.matvec(&xstar, &mut b);
        let x = solve_spd(&sp, &b).unwrap();
        let err = x
            .iter()
            .zip(&xstar)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-9, "err = {err}");
    }

    #[test]
    fn bordered_solver_enforces_constraint_on_singular_block() {
        // M = K − μ₁ I is singular along the lowest mode of K; the border c is
        // not orthogonal to that mode, so M + ρccᵀ is SPD and the saddle system
        // has a unique solution with cᵀx = 0.
        let n = 64;
        let a = laplace_1d(n);
        use std::f64::consts::PI;
        let h = 1.0 / (n as f64 + 1.0);
        let mu1 = 2.0 - 2.0 * (PI * h).cos();
        let mut trips = Vec::new();
        for i in 0..n {
            trips.push((i as u32, i as u32, -mu1));
        }
        let shift = SparseSym::from_triplets(n, trips);
        let mut m_trips = Vec::new();
        for i in 0..n {
            for k in a.row_ptr[i]..a.row_ptr[i + 1] {
                m_trips.push((i as u32, a.col_idx[k], a.vals[k]));
            }
            for k in shift.row_ptr[i]..shift.row_ptr[i + 1] {
                m_trips.push((i as u32, shift.col_idx[k], shift.vals[k]));
            }
        }
        let m = SparseSym::from_triplets(n, m_trips);
        let c: Vec<f64> = (0..n)
            .map(|i| (PI * (i + 1) as f64 * h).sin())
            .collect();
        let b: Vec<f64> = (0..n).map(|i| ((i * 7 % 5) as f64) - 2.0).collect();
        let precond = factor_spd(&a).unwrap();
        let (x, _mu) = solve_bordered(&m, &c, &b, 1.0, &precond).unwrap();
        let cx: f64 = c.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!(cx.abs() < 1e-9 * c.len() as f64, "cᵀx = {cx}");
        // residual check: Mx + μc should reproduce b
        let mut mx = vec![0.0; n];
        m.matvec(&x, &mut mx);
        let (_, mu) = solve_bordered(&m, &c, &b, 7.5, &precond).unwrap();
        let res = mx
            .iter()
            .zip(&c)
            .zip(&b)
            .map(|((mx, c), b)| (mx + mu * c - b).abs())
            .fold(0.0, f64::max);
        assert!(res < 1e-8, "residual = {res}");
    }
}
