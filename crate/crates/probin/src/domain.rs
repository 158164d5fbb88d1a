//! Discretized domains for the mixed Dirichlet–Robin eigenvalue problem.
//!
//! Three geometry modes share one P1 representation:
//!
//! * `Interval` — uniform or file-given 1D meshes of an interval, boundary
//!   points with unit measure;
//! * `Radial { space_dim: n }` — 1D meshes in the radius of an n-ball or
//!   annulus; volume quadrature carries the weight ω_{n−1} r^{n−1} and sphere
//!   boundaries carry measure ω_{n−1} r^{n−1};
//! * `Planar` — conforming triangulations with per-edge boundary labels.
//!
//! A domain is immutable once assembled: quadrature tables, element gradients
//! and the Dirichlet/Robin interface node set ζ are precomputed. The coating
//! extension extrudes every Robin face outward by ε·ρ into `n_layer` sublayers
//! tagged `Coating`, relabels the new outer boundary as `Outer` (Dirichlet for
//! the two-phase solve), and keeps substrate node indices unchanged.

pub mod mesh_text;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DimMode {
    Interval,
    Radial { space_dim: u32 },
    Planar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegionTag {
    Substrate,
    Coating,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundaryLabel {
    Dirichlet,
    Robin,
    Outer,
}

impl BoundaryLabel {
    /// Labels whose nodes are constrained to zero in the solves.
    pub fn is_essential(self) -> bool {
        matches!(self, BoundaryLabel::Dirichlet | BoundaryLabel::Outer)
    }
}

/// A boundary face: a point in the 1D modes, an edge in planar mode.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryFace {
    nodes: [u32; 2],
    pub normal: [f64; 2],
    pub measure: f64,
    pub label: BoundaryLabel,
}

const NO_NODE: u32 = u32::MAX;

impl BoundaryFace {
    pub fn node_slice(&self) -> &[u32] {
        if self.nodes[1] == NO_NODE {
            &self.nodes[..1]
        } else {
            &self.nodes
        }
    }
}

/// Positive per-Robin-face coating thickness (the profile ρ, scaled by ε).
#[derive(Debug, Clone, PartialEq)]
pub struct ThicknessProfile {
    values: Vec<f64>,
}

impl ThicknessProfile {
    /// One value per Robin face of the target domain, in Robin-face order.
    pub fn per_face(domain: &DiscreteDomain, values: Vec<f64>) -> Result<Self> {
        let n = domain.robin_faces().count();
        if values.len() != n {
            return Err(Error::InvalidParameter(format!(
                "thickness profile has {} values for {} Robin faces",
                values.len(),
                n
            )));
        }
        if values.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidParameter(
                "thickness profile must be positive and finite everywhere".into(),
            ));
        }
        Ok(ThicknessProfile { values })
    }

    pub fn constant(domain: &DiscreteDomain, value: f64) -> Result<Self> {
        let n = domain.robin_faces().count();
        Self::per_face(domain, vec![value; n])
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

const GAUSS4_X: [f64; 4] = [
    0.06943184420297371,
    0.33000947820757187,
    0.6699905217924281,
    0.9305681557970263,
];
const GAUSS4_W: [f64; 4] = [
    0.17392742256872692,
    0.32607257743127305,
    0.32607257743127305,
    0.17392742256872692,
];

// 6-point degree-4 triangle rule (barycentric pairs + weights summing to 1).
const TRI6: [(f64, f64, f64); 6] = [
    (0.445948490915965, 0.445948490915965, 0.223381589678011),
    (0.108103018168070, 0.445948490915965, 0.223381589678011),
    (0.445948490915965, 0.108103018168070, 0.223381589678011),
    (0.091576213509771, 0.091576213509771, 0.109951743655322),
    (0.816847572980459, 0.091576213509771, 0.109951743655322),
    (0.091576213509771, 0.816847572980459, 0.109951743655322),
];

/// Largest accepted ambient dimension for radial meshes. Keeps the sphere
/// area and the r^{n-1} weights inside the comfortable f64 range.
pub const MAX_RADIAL_DIM: u32 = 64;

/// Surface area of the unit sphere S^{n−1} in ℝⁿ: 2π^{n/2}/Γ(n/2).
pub fn unit_sphere_area(n: u32) -> f64 {
    use std::f64::consts::PI;
    if n > MAX_RADIAL_DIM {
        // beyond the mesh cap both π^{n/2} and Γ(n/2) can overflow, so work
        // in logs; the area underflows to 0 for very large n, as it should
        let mut ln_g = if n % 2 == 1 { PI.sqrt().ln() } else { 0.0 };
        let mut j = if n % 2 == 1 { 1 } else { 2 };
        while j < n {
            ln_g += (j as f64 / 2.0).ln();
            j += 2;
        }
        return (2.0f64.ln() + n as f64 / 2.0 * PI.ln() - ln_g).exp();
    }
    // Γ(k/2) for integer k ≥ 1, by the upward recurrence
    let gamma_half = |k: u32| -> f64 {
        let mut g = if k % 2 == 1 { PI.sqrt() } else { 1.0 };
        let mut j = if k % 2 == 1 { 1 } else { 2 };
        while j < k {
            g *= j as f64 / 2.0;
            j += 2;
        }
        g
    };
    2.0 * PI.powf(n as f64 / 2.0) / gamma_half(n)
}

fn check_radial_dim(n: u32) -> Result<()> {
    if n < 2 {
        return Err(Error::InvalidMesh("radial mode needs space_dim >= 2".into()));
    }
    if n > MAX_RADIAL_DIM {
        return Err(Error::InvalidMesh(format!(
            "radial dimension {n} exceeds the supported maximum {MAX_RADIAL_DIM}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct DiscreteDomain {
    pub mode: DimMode,
    coords: Vec<f64>,
    elems: Vec<u32>,
    region: Vec<RegionTag>,
    faces: Vec<BoundaryFace>,
    zeta: Vec<u32>,
    evol: Vec<f64>,
    egrad: Vec<f64>,
    qp_w: Vec<f64>,
    qp_r: Vec<f64>,
    qp_bas: Vec<f64>,
}

impl PartialEq for DiscreteDomain {
    fn eq(&self, other: &Self) -> bool {
        self.mode == other.mode
            && self.coords == other.coords
            && self.elems == other.elems
            && self.region == other.region
            && self.faces == other.faces
    }
}

impl DiscreteDomain {
    pub fn coord_dim(&self) -> usize {
        match self.mode {
            DimMode::Planar => 2,
            _ => 1,
        }
    }

    pub fn elem_nodes(&self) -> usize {
        match self.mode {
            DimMode::Planar => 3,
            _ => 2,
        }
    }

    pub fn quad_points_per_elem(&self) -> usize {
        match self.mode {
            DimMode::Planar => 6,
            _ => 4,
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.coords.len() / self.coord_dim()
    }

    pub fn n_elems(&self) -> usize {
        self.elems.len() / self.elem_nodes()
    }

    pub fn node(&self, i: usize) -> &[f64] {
        let d = self.coord_dim();
        &self.coords[i * d..(i + 1) * d]
    }

    pub fn elem(&self, e: usize) -> &[u32] {
        let k = self.elem_nodes();
        &self.elems[e * k..(e + 1) * k]
    }

    pub fn region(&self, e: usize) -> RegionTag {
        self.region[e]
    }

    /// Geometric element volume (length in 1D modes, area in planar mode).
    pub fn elem_volume(&self, e: usize) -> f64 {
        self.evol[e]
    }

    /// Basis gradients on element `e`: `elem_nodes()` rows of `coord_dim()`.
    pub fn elem_grads(&self, e: usize) -> &[f64] {
        let k = self.elem_nodes() * self.coord_dim();
        &self.egrad[e * k..(e + 1) * k]
    }

    /// Geometric quadrature weight (includes the unit-sphere factor ω_{n−1} in
    /// radial mode). Multiply by `qp_radial` for the full volume weight.
    pub fn qp_weight(&self, e: usize, q: usize) -> f64 {
        self.qp_w[e * self.quad_points_per_elem() + q]
    }

    /// Radial weight r^{n−1} at the quadrature point (1 outside radial mode).
    pub fn qp_radial(&self, e: usize, q: usize) -> f64 {
        self.qp_r[e * self.quad_points_per_elem() + q]
    }

    /// P1 basis values at the quadrature point.
    pub fn qp_basis(&self, e: usize, q: usize) -> &[f64] {
        let k = self.elem_nodes();
        let nq = self.quad_points_per_elem();
        &self.qp_bas[(e * nq + q) * k..(e * nq + q + 1) * k]
    }

    /// Gradient of a nodal field on element `e` (element-constant for P1).
    pub fn grad_of(&self, e: usize, u: &[f64]) -> [f64; 2] {
        let k = self.elem_nodes();
        let d = self.coord_dim();
        let g = self.elem_grads(e);
        let en = self.elem(e);
        let mut out = [0.0; 2];
        for (a, &node) in en.iter().enumerate().take(k) {
            let uv = u[node as usize];
            for c in 0..d {
                out[c] += uv * g[a * d + c];
            }
        }
        out
    }

    /// Value of a nodal field at quadrature point (e, q).
    pub fn value_at(&self, e: usize, q: usize, u: &[f64]) -> f64 {
        let bas = self.qp_basis(e, q);
        self.elem(e)
            .iter()
            .zip(bas)
            .map(|(&n, &b)| u[n as usize] * b)
            .sum()
    }

    pub fn faces(&self) -> &[BoundaryFace] {
        &self.faces
    }

    /// Interface node set ζ = closure(Γ_D) ∩ closure(γ), sorted.
    pub fn zeta_nodes(&self) -> &[u32] {
        &self.zeta
    }

    pub fn robin_faces(&self) -> impl Iterator<Item = usize> + '_ {
        self.faces
            .iter()
            .enumerate()
            .filter(|(_, f)| f.label == BoundaryLabel::Robin)
            .map(|(i, _)| i)
    }

    pub fn dirichlet_faces(&self) -> impl Iterator<Item = usize> + '_ {
        self.faces
            .iter()
            .enumerate()
            .filter(|(_, f)| f.label == BoundaryLabel::Dirichlet)
            .map(|(i, _)| i)
    }

    /// Sorted node ids constrained to zero (Dirichlet and Outer labels).
    pub fn essential_nodes(&self) -> Vec<u32> {
        let mut v: Vec<u32> = self
            .faces
            .iter()
            .filter(|f| f.label.is_essential())
            .flat_map(|f| f.node_slice().iter().copied())
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Node-indexed mask of essential (constrained) nodes.
    pub fn essential_mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.n_nodes()];
        for n in self.essential_nodes() {
            m[n as usize] = true;
        }
        m
    }

    /// Quadrature points on a boundary face: point evaluation in the 1D modes,
    /// 2-point Gauss along the edge in planar mode. Returns (weight, basis
    /// values aligned with `node_slice()`).
    pub fn face_quadrature(&self, f: usize) -> Vec<(f64, [f64; 2])> {
        let face = &self.faces[f];
        match self.mode {
            DimMode::Interval | DimMode::Radial { .. } => {
                vec![(face.measure, [1.0, 0.0])]
            }
            DimMode::Planar => {
                let g = 1.0 / 3.0_f64.sqrt();
                [-g, g]
                    .iter()
                    .map(|&t| {
                        let s = 0.5 * (1.0 + t);
                        (0.5 * face.measure, [1.0 - s, s])
                    })
                    .collect()
            }
        }
    }

    /// Sum of face-measure-weighted per-face integrand values over a label.
    pub fn integrate_boundary(&self, label: BoundaryLabel, integrand: &[f64]) -> Result<f64> {
        let faces: Vec<usize> = self
            .faces
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
        if integrand.len() != faces.len() {
            return Err(Error::InvalidParameter(format!(
                "integrand has {} values for {} faces",
                integrand.len(),
                faces.len()
            )));
        }
        Ok(faces
            .iter()
            .zip(integrand)
            .map(|(&f, v)| self.faces[f].measure * v)
            .sum())
    }

    /// Arc-length midpoint parameter in [0, 1) of each Robin face, aligned
    /// with `robin_faces()` order. Planar faces are first chained along γ by
    /// shared nodes (γ may be an open arc or a closed loop), so the parameter
    /// is monotone along the boundary regardless of face storage order.
    pub fn robin_arc_midpoints(&self) -> Vec<f64> {
        let ridx: Vec<usize> = self.robin_faces().collect();
        let chain = self.chain_robin_faces(&ridx);
        let total: f64 = ridx.iter().map(|&f| self.faces[f].measure).sum();
        let mut acc = 0.0;
        let mut mid_by_pos = vec![0.0; ridx.len()];
        for &pos in &chain {
            let m = self.faces[ridx[pos]].measure;
            mid_by_pos[pos] = (acc + 0.5 * m) / total;
            acc += m;
        }
        mid_by_pos
    }

    /// Order the Robin faces (given as indices into `faces`) into a walk along
    /// γ. Returns positions into `ridx`. Open chains start at an endpoint,
    /// closed loops at the smallest face index; disconnected components are
    /// concatenated in order of their smallest face index.
    fn chain_robin_faces(&self, ridx: &[usize]) -> Vec<usize> {
        use std::collections::BTreeMap;
        if self.coord_dim() == 1 {
            return (0..ridx.len()).collect();
        }
        let mut node_faces: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (pos, &f) in ridx.iter().enumerate() {
            for &nd in self.faces[f].node_slice() {
                node_faces.entry(nd).or_default().push(pos);
            }
        }
        let mut visited = vec![false; ridx.len()];
        let mut order = Vec::with_capacity(ridx.len());
        for start in 0..ridx.len() {
            if visited[start] {
                continue;
            }
            // walk backward from `start` to a component endpoint (or around
            // the loop back to `start`); step bound guards pinched boundaries
            let mut head = start;
            let mut from = self.faces[ridx[start]].nodes[1];
            for _ in 0..ridx.len() {
                let back = self.faces[ridx[head]]
                    .node_slice()
                    .iter()
                    .find(|&&n| n != from)
                    .copied();
                let Some(back) = back else { break };
                let prev = node_faces[&back].iter().find(|&&p| p != head).copied();
                match prev {
                    Some(p) if p != start => {
                        from = back;
                        head = p;
                    }
                    _ => break,
                }
            }
            // walk forward from the head, marking; leave each face through
            // whichever node (other than the entry node) continues the chain
            let mut cur = head;
            let mut entry: Option<u32> = None;
            loop {
                visited[cur] = true;
                order.push(cur);
                let face = &self.faces[ridx[cur]];
                let mut next = None;
                for &nd in face.node_slice() {
                    if Some(nd) == entry {
                        continue;
                    }
                    if let Some(&p) = node_faces[&nd].iter().find(|&&p| p != cur && !visited[p]) {
                        next = Some((p, nd));
                        break;
                    }
                }
                match next {
                    Some((p, nd)) => {
                        entry = Some(nd);
                        cur = p;
                    }
                    None => break,
                }
            }
        }
        order
    }

    /// Scale of the mesh: max element diameter.
    pub fn mesh_size(&self) -> f64 {
        (0..self.n_elems())
            .map(|e| match self.mode {
                DimMode::Planar => {
                    let en = self.elem(e);
                    let mut d = 0.0_f64;
                    for a in 0..3 {
                        for b in (a + 1)..3 {
                            let pa = self.node(en[a] as usize);
                            let pb = self.node(en[b] as usize);
                            d = d.max(((pa[0] - pb[0]).powi(2) + (pa[1] - pb[1]).powi(2)).sqrt());
                        }
                    }
                    d
                }
                _ => self.evol[e],
            })
            .fold(0.0, f64::max)
    }

    fn assemble(
        mode: DimMode,
        coords: Vec<f64>,
        elems: Vec<u32>,
        region: Vec<RegionTag>,
        faces: Vec<BoundaryFace>,
    ) -> Result<Self> {
        let mut d = DiscreteDomain {
            mode,
            coords,
            elems,
            region,
            faces,
            zeta: Vec::new(),
            evol: Vec::new(),
            egrad: Vec::new(),
            qp_w: Vec::new(),
            qp_r: Vec::new(),
            qp_bas: Vec::new(),
        };
        let n = d.n_nodes();
        if n == 0 || d.n_elems() == 0 {
            return Err(Error::InvalidMesh("empty mesh".into()));
        }
        if d.coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidMesh("non-finite node coordinate".into()));
        }
        if d.elems.iter().any(|&i| i as usize >= n) {
            return Err(Error::InvalidMesh("element node index out of range".into()));
        }
        for f in &d.faces {
            if f.node_slice().iter().any(|&i| i as usize >= n) {
                return Err(Error::InvalidMesh("boundary node index out of range".into()));
            }
        }
        if d.region.len() != d.n_elems() {
            return Err(Error::InvalidMesh("region tag count mismatch".into()));
        }
        let mut referenced = vec![false; n];
        for &i in &d.elems {
            referenced[i as usize] = true;
        }
        if referenced.iter().any(|r| !r) {
            return Err(Error::InvalidMesh("isolated node".into()));
        }
        d.build_tables()?;
        d.zeta = {
            let mut dir: Vec<u32> = d
                .faces
                .iter()
                .filter(|f| f.label.is_essential())
                .flat_map(|f| f.node_slice().iter().copied())
                .collect();
            dir.sort_unstable();
            dir.dedup();
            let mut rob: Vec<u32> = d
                .faces
                .iter()
                .filter(|f| f.label == BoundaryLabel::Robin)
                .flat_map(|f| f.node_slice().iter().copied())
                .collect();
            rob.sort_unstable();
            rob.dedup();
            dir.into_iter().filter(|x| rob.binary_search(x).is_ok()).collect()
        };
        Ok(d)
    }

    fn build_tables(&mut self) -> Result<()> {
        let ne = self.n_elems();
        let k = self.elem_nodes();
        let dim = self.coord_dim();
        let nq = self.quad_points_per_elem();
        self.evol = vec![0.0; ne];
        self.egrad = vec![0.0; ne * k * dim];
        self.qp_w = vec![0.0; ne * nq];
        self.qp_r = vec![1.0; ne * nq];
        self.qp_bas = vec![0.0; ne * nq * k];
        let omega = match self.mode {
            DimMode::Radial { space_dim } => unit_sphere_area(space_dim),
            _ => 1.0,
        };
        for e in 0..ne {
            match self.mode {
                DimMode::Interval | DimMode::Radial { .. } => {
                    let en = [self.elems[e * 2] as usize, self.elems[e * 2 + 1] as usize];
                    let (xl, xr) = (self.coords[en[0]], self.coords[en[1]]);
                    let len = xr - xl;
                    if !(len > 0.0) {
                        return Err(Error::InvalidMesh(format!(
                            "element {e} has non-positive length {len}"
                        )));
                    }
                    self.evol[e] = len;
                    self.egrad[e * 2] = -1.0 / len;
                    self.egrad[e * 2 + 1] = 1.0 / len;
                    for q in 0..nq {
                        let t = GAUSS4_X[q];
                        let x = xl + t * len;
                        self.qp_w[e * nq + q] = GAUSS4_W[q] * len * omega;
                        if let DimMode::Radial { space_dim } = self.mode {
                            if x < 0.0 {
                                return Err(Error::InvalidMesh(
                                    "radial coordinate must be nonnegative".into(),
                                ));
                            }
                            self.qp_r[e * nq + q] = x.powi(space_dim as i32 - 1);
                        }
                        self.qp_bas[(e * nq + q) * 2] = 1.0 - t;
                        self.qp_bas[(e * nq + q) * 2 + 1] = t;
                    }
                }
                DimMode::Planar => {
                    let en = [
                        self.elems[e * 3] as usize,
                        self.elems[e * 3 + 1] as usize,
                        self.elems[e * 3 + 2] as usize,
                    ];
                    let p: Vec<&[f64]> = en.iter().map(|&i| &self.coords[i * 2..i * 2 + 2]).collect();
                    let det = (p[1][0] - p[0][0]) * (p[2][1] - p[0][1])
                        - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]);
                    if !(det > 0.0) {
                        return Err(Error::InvalidMesh(format!(
                            "element {e} has non-positive area {}",
                            det / 2.0
                        )));
                    }
                    let area = det / 2.0;
                    self.evol[e] = area;
                    let g = &mut self.egrad[e * 6..e * 6 + 6];
                    g[0] = (p[1][1] - p[2][1]) / det;
                    g[1] = (p[2][0] - p[1][0]) / det;
                    g[2] = (p[2][1] - p[0][1]) / det;
                    g[3] = (p[0][0] - p[2][0]) / det;
                    g[4] = (p[0][1] - p[1][1]) / det;
                    g[5] = (p[1][0] - p[0][0]) / det;
                    for (q, &(xi, eta, w)) in TRI6.iter().enumerate() {
                        self.qp_w[e * nq + q] = w * area;
                        let b = &mut self.qp_bas[(e * nq + q) * 3..(e * nq + q) * 3 + 3];
                        b[0] = 1.0 - xi - eta;
                        b[1] = xi;
                        b[2] = eta;
                    }
                }
            }
        }
        if self.qp_w.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::InvalidMesh("non-positive quadrature weight".into()));
        }
        if let DimMode::Radial { .. } = self.mode {
            if self.qp_r.iter().any(|r| !(*r > 0.0)) {
                return Err(Error::InvalidMesh(
                    "radial weight must be positive at quadrature points".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Endpoint choice for the Robin boundary of an interval domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GammaEnd {
    Left,
    Right,
    Both,
    None,
}

/// Uniform mesh of (0, 1) with endpoints labeled by `gamma_end`; endpoints not
/// labeled Robin are Dirichlet. Endpoint boundary measure is 1.
pub fn build_interval_domain(n_cells: usize, gamma_end: GammaEnd) -> Result<DiscreteDomain> {
    if n_cells < 2 {
        return Err(Error::InvalidMesh(format!(
            "interval mesh needs at least 2 cells, got {n_cells}"
        )));
    }
    let coords: Vec<f64> = (0..=n_cells).map(|i| i as f64 / n_cells as f64).collect();
    interval_from_parts(DimMode::Interval, coords, gamma_end_labels(gamma_end))
}

fn gamma_end_labels(gamma_end: GammaEnd) -> (BoundaryLabel, BoundaryLabel) {
    use BoundaryLabel::*;
    match gamma_end {
        GammaEnd::Left => (Robin, Dirichlet),
        GammaEnd::Right => (Dirichlet, Robin),
        GammaEnd::Both => (Robin, Robin),
        GammaEnd::None => (Dirichlet, Dirichlet),
    }
}

fn interval_from_parts(
    mode: DimMode,
    coords: Vec<f64>,
    labels: (BoundaryLabel, BoundaryLabel),
) -> Result<DiscreteDomain> {
    let n = coords.len();
    let elems: Vec<u32> = (0..n - 1)
        .flat_map(|i| [i as u32, i as u32 + 1])
        .collect();
    let region = vec![RegionTag::Substrate; n - 1];
    let omega_r = |r: f64| match mode {
        DimMode::Radial { space_dim } => unit_sphere_area(space_dim) * r.powi(space_dim as i32 - 1),
        _ => 1.0,
    };
    let mut faces = Vec::new();
    let left_measure = omega_r(coords[0]);
    // a zero-measure inner sphere (ball center) carries no boundary face
    if left_measure > 0.0 {
        faces.push(BoundaryFace {
            nodes: [0, NO_NODE],
            normal: [-1.0, 0.0],
            measure: left_measure,
            label: labels.0,
        });
    }
    faces.push(BoundaryFace {
        nodes: [(n - 1) as u32, NO_NODE],
        normal: [1.0, 0.0],
        measure: omega_r(coords[n - 1]),
        label: labels.1,
    });
    DiscreteDomain::assemble(mode, coords, elems, region, faces)
}

/// Which sphere of a radial annulus carries the Robin label; the other is
/// Dirichlet. For a ball (`r_inner = 0`) the center is unlabeled and the outer
/// sphere takes the requested label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RadialPartition {
    GammaOuter,
    GammaInner,
}

/// 1D radial mesh on [r_inner, r_outer] for the n-ball/annulus reduction.
pub fn build_radial_domain(
    n_cells: usize,
    r_inner: f64,
    r_outer: f64,
    space_dim: u32,
    partition: RadialPartition,
) -> Result<DiscreteDomain> {
    if n_cells < 2 {
        return Err(Error::InvalidMesh(format!(
            "radial mesh needs at least 2 cells, got {n_cells}"
        )));
    }
    if !(r_inner >= 0.0 && r_inner < r_outer && r_outer.is_finite()) {
        return Err(Error::InvalidMesh(format!(
            "need 0 <= r_inner < r_outer, got [{r_inner}, {r_outer}]"
        )));
    }
    check_radial_dim(space_dim)?;
    let coords: Vec<f64> = (0..=n_cells)
        .map(|i| r_inner + (r_outer - r_inner) * i as f64 / n_cells as f64)
        .collect();
    let labels = match partition {
        RadialPartition::GammaOuter => (BoundaryLabel::Dirichlet, BoundaryLabel::Robin),
        RadialPartition::GammaInner => (BoundaryLabel::Robin, BoundaryLabel::Dirichlet),
    };
    interval_from_parts(DimMode::Radial { space_dim }, coords, labels)
}

/// 1D mesh from explicit nodes, elements and labeled boundary points (the
/// text-format path). Elements must be coordinate-increasing pairs; every
/// degree-1 node must carry a label, except a radial node at r = 0 (the ball
/// center carries no boundary face and must stay unlabeled).
pub(crate) fn one_dim_from_file(
    mode: DimMode,
    coords: Vec<f64>,
    elems: Vec<u32>,
    bfaces: &[(u32, BoundaryLabel)],
) -> Result<DiscreteDomain> {
    if let DimMode::Radial { space_dim } = mode {
        check_radial_dim(space_dim)?;
    }
    let n = coords.len();
    let mut degree = vec![0usize; n];
    for &i in &elems {
        if i as usize >= n {
            return Err(Error::InvalidMesh("element node index out of range".into()));
        }
        degree[i as usize] += 1;
    }
    if degree.iter().any(|&d| d > 2) {
        return Err(Error::InvalidMesh(
            "a 1D node is shared by more than two elements".into(),
        ));
    }
    let omega_r = |r: f64| match mode {
        DimMode::Radial { space_dim } => unit_sphere_area(space_dim) * r.powi(space_dim as i32 - 1),
        _ => 1.0,
    };
    let mut labeled = vec![false; n];
    let mut faces = Vec::with_capacity(bfaces.len());
    for &(node, label) in bfaces {
        let ni = node as usize;
        if ni >= n {
            return Err(Error::InvalidMesh("boundary node index out of range".into()));
        }
        if degree[ni] != 1 {
            return Err(Error::InvalidMesh(format!(
                "node {node} is labeled but is not a mesh endpoint"
            )));
        }
        if labeled[ni] {
            return Err(Error::InvalidMesh(format!("node {node} labeled twice")));
        }
        labeled[ni] = true;
        let pos = elems
            .iter()
            .position(|&e| e == node)
            .expect("degree-1 node appears in an element");
        let normal = if pos % 2 == 0 { [-1.0, 0.0] } else { [1.0, 0.0] };
        let measure = omega_r(coords[ni]);
        if !(measure > 0.0) {
            return Err(Error::InvalidMesh(format!(
                "node {node} carries a zero-measure boundary face"
            )));
        }
        faces.push(BoundaryFace {
            nodes: [node, NO_NODE],
            normal,
            measure,
            label,
        });
    }
    for (i, &d) in degree.iter().enumerate() {
        if d == 1 && !labeled[i] {
            let at_center = matches!(mode, DimMode::Radial { .. }) && coords[i] == 0.0;
            if !at_center {
                return Err(Error::InvalidMesh(format!("endpoint node {i} is unlabeled")));
            }
        }
    }
    let region = vec![RegionTag::Substrate; elems.len() / 2];
    DiscreteDomain::assemble(mode, coords, elems, region, faces)
}

/// Conforming planar triangulation with labeled boundary edges. Triangles may
/// be given in either orientation (they are normalized to counterclockwise);
/// every boundary edge must appear exactly once in `edge_labels`, keyed by its
/// node pair in either order.
pub fn build_planar_domain(
    vertices: Vec<[f64; 2]>,
    triangles: Vec<[u32; 3]>,
    edge_labels: &[([u32; 2], BoundaryLabel)],
) -> Result<DiscreteDomain> {
    let nv = vertices.len();
    if nv < 3 || triangles.is_empty() {
        return Err(Error::InvalidMesh("planar mesh needs vertices and triangles".into()));
    }
    let mut elems = Vec::with_capacity(triangles.len() * 3);
    for (t, tri) in triangles.iter().enumerate() {
        if tri.iter().any(|&i| i as usize >= nv) {
            return Err(Error::InvalidMesh(format!("triangle {t} references missing vertex")));
        }
        if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
            return Err(Error::InvalidMesh(format!("triangle {t} has repeated vertices")));
        }
        let p: Vec<[f64; 2]> = tri.iter().map(|&i| vertices[i as usize]).collect();
        let det = (p[1][0] - p[0][0]) * (p[2][1] - p[0][1])
            - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]);
        if det == 0.0 || !det.is_finite() {
            return Err(Error::InvalidMesh(format!("triangle {t} is degenerate")));
        }
        if det > 0.0 {
            elems.extend_from_slice(tri);
        } else {
            elems.extend_from_slice(&[tri[0], tri[2], tri[1]]);
        }
    }
    // count edge incidences
    use std::collections::BTreeMap;
    let mut edge_count: BTreeMap<(u32, u32), (u32, usize, [u32; 2])> = BTreeMap::new();
    for t in 0..triangles.len() {
        let tri = &elems[t * 3..t * 3 + 3];
        for a in 0..3 {
            let (i, j) = (tri[a], tri[(a + 1) % 3]);
            let key = (i.min(j), i.max(j));
            let entry = edge_count.entry(key).or_insert((0, t, [i, j]));
            entry.0 += 1;
            entry.1 = t;
            entry.2 = [i, j];
        }
    }
    if edge_count.values().any(|(c, _, _)| *c > 2) {
        return Err(Error::InvalidMesh(
            "non-conforming mesh: an edge is shared by more than two triangles".into(),
        ));
    }
    let mut label_map: BTreeMap<(u32, u32), BoundaryLabel> = BTreeMap::new();
    for &([a, b], label) in edge_labels {
        let key = (a.min(b), a.max(b));
        if label_map.insert(key, label).is_some() {
            return Err(Error::InvalidMesh(format!("edge ({a}, {b}) labeled twice")));
        }
    }
    let mut faces = Vec::new();
    for (key, (count, tri_idx, oriented)) in &edge_count {
        if *count == 1 {
            let label = label_map.remove(key).ok_or_else(|| {
                Error::InvalidMesh(format!("boundary edge ({}, {}) not labeled", key.0, key.1))
            })?;
            // oriented = (i, j) walked counterclockwise around its triangle, so
            // the outward normal is the right-hand perpendicular of j − i
            let pi = vertices[oriented[0] as usize];
            let pj = vertices[oriented[1] as usize];
            let (dx, dy) = (pj[0] - pi[0], pj[1] - pi[1]);
            let len = (dx * dx + dy * dy).sqrt();
            if !(len > 0.0) {
                return Err(Error::InvalidMesh("zero-length boundary edge".into()));
            }
            let _ = tri_idx;
            faces.push(BoundaryFace {
                nodes: [oriented[0], oriented[1]],
                normal: [dy / len, -dx / len],
                measure: len,
                label,
            });
        }
    }
    if let Some(((a, b), _)) = label_map.iter().next() {
        return Err(Error::InvalidMesh(format!(
            "labeled edge ({a}, {b}) is not a boundary edge"
        )));
    }
    let region = vec![RegionTag::Substrate; triangles.len()];
    let coords: Vec<f64> = vertices.iter().flat_map(|p| [p[0], p[1]]).collect();
    DiscreteDomain::assemble(DimMode::Planar, coords, elems, region, faces)
}

/// Structured unit-square mesh, `n × n` cells split into triangles; the bottom
/// edge is Robin, the other three sides Dirichlet (the two bottom corners form
/// the interface set ζ).
pub fn build_planar_square(n: usize) -> Result<DiscreteDomain> {
    if n < 2 {
        return Err(Error::InvalidMesh("square mesh needs at least 2 cells per side".into()));
    }
    let id = |i: usize, j: usize| (j * (n + 1) + i) as u32;
    let mut vertices = Vec::with_capacity((n + 1) * (n + 1));
    for j in 0..=n {
        for i in 0..=n {
            vertices.push([i as f64 / n as f64, j as f64 / n as f64]);
        }
    }
    let mut triangles = Vec::with_capacity(2 * n * n);
    for j in 0..n {
        for i in 0..n {
            triangles.push([id(i, j), id(i + 1, j), id(i + 1, j + 1)]);
            triangles.push([id(i, j), id(i + 1, j + 1), id(i, j + 1)]);
        }
    }
    let mut labels = Vec::new();
    for i in 0..n {
        labels.push(([id(i, 0), id(i + 1, 0)], BoundaryLabel::Robin));
        labels.push(([id(i, n), id(i + 1, n)], BoundaryLabel::Dirichlet));
    }
    for j in 0..n {
        labels.push(([id(0, j), id(0, j + 1)], BoundaryLabel::Dirichlet));
        labels.push(([id(n, j), id(n, j + 1)], BoundaryLabel::Dirichlet));
    }
    build_planar_domain(vertices, triangles, &labels)
}

/// Structured polygonal annulus: `n_theta` angular sectors × `n_r` radial
/// layers of quads split into triangles; the inner circle is Dirichlet and the
/// outer circle Robin (the inverse problem's accessible/inaccessible split;
/// here ζ is empty because the two circles do not meet).
pub fn build_planar_annulus(
    n_theta: usize,
    n_r: usize,
    r_inner: f64,
    r_outer: f64,
) -> Result<DiscreteDomain> {
    if n_theta < 3 || n_r < 1 {
        return Err(Error::InvalidMesh("annulus needs n_theta >= 3 and n_r >= 1".into()));
    }
    if !(0.0 < r_inner && r_inner < r_outer && r_outer.is_finite()) {
        return Err(Error::InvalidMesh(format!(
            "need 0 < r_inner < r_outer, got [{r_inner}, {r_outer}]"
        )));
    }
    let id = |ir: usize, it: usize| (ir * n_theta + (it % n_theta)) as u32;
    let mut vertices = Vec::with_capacity((n_r + 1) * n_theta);
    for ir in 0..=n_r {
        let r = r_inner + (r_outer - r_inner) * ir as f64 / n_r as f64;
        for it in 0..n_theta {
            let th = 2.0 * std::f64::consts::PI * it as f64 / n_theta as f64;
            vertices.push([r * th.cos(), r * th.sin()]);
        }
    }
    let mut triangles = Vec::with_capacity(2 * n_r * n_theta);
    for ir in 0..n_r {
        for it in 0..n_theta {
            triangles.push([id(ir, it), id(ir, it + 1), id(ir + 1, it + 1)]);
            triangles.push([id(ir, it), id(ir + 1, it + 1), id(ir + 1, it)]);
        }
    }
    let mut labels = Vec::new();
    for it in 0..n_theta {
        labels.push(([id(0, it), id(0, it + 1)], BoundaryLabel::Dirichlet));
        labels.push(([id(n_r, it), id(n_r, it + 1)], BoundaryLabel::Robin));
    }
    build_planar_domain(vertices, triangles, &labels)
}

/// The ε-coating extension Ω_ε = Ω ∪ Σ_ε.
#[derive(Debug, Clone)]
pub struct CoatedDomain {
    pub base: DiscreteDomain,
    /// Merged mesh: substrate elements first (same node indices as the base),
    /// then the coating layers; boundary = base Dirichlet faces + new Outer.
    pub merged: DiscreteDomain,
    pub epsilon: f64,
    /// Element indices (into `merged`) tagged `Coating`.
    pub layer_elements: Vec<u32>,
    /// Face indices (into `merged.faces()`) labeled `Outer`.
    pub outer_faces: Vec<u32>,
    pub n_base_nodes: usize,
}

/// Extrude every Robin face of `base` outward by ε·ρ into `n_layer_cells`
/// sublayers of Coating elements; the new outer boundary is labeled Outer.
pub fn attach_coating(
    base: &DiscreteDomain,
    rho: &ThicknessProfile,
    epsilon: f64,
    n_layer_cells: usize,
) -> Result<CoatedDomain> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "coating thickness scale must be positive, got {epsilon}"
        )));
    }
    if n_layer_cells < 1 {
        return Err(Error::InvalidParameter("need at least one coating layer cell".into()));
    }
    let gamma: Vec<usize> = base.robin_faces().collect();
    if gamma.is_empty() {
        return Err(Error::InvalidParameter("base domain has no Robin boundary to coat".into()));
    }
    if rho.values().len() != gamma.len() {
        return Err(Error::InvalidParameter(
            "thickness profile does not match the Robin face count".into(),
        ));
    }
    if base.region.contains(&RegionTag::Coating) {
        return Err(Error::InvalidParameter("base domain is already coated".into()));
    }
    match base.mode {
        DimMode::Interval | DimMode::Radial { .. } => {
            coat_one_dimensional(base, rho, epsilon, n_layer_cells, &gamma)
        }
        DimMode::Planar => coat_planar(base, rho, epsilon, n_layer_cells, &gamma),
    }
}

fn coat_one_dimensional(
    base: &DiscreteDomain,
    rho: &ThicknessProfile,
    epsilon: f64,
    n_layer: usize,
    gamma: &[usize],
) -> Result<CoatedDomain> {
    let mut coords = base.coords.clone();
    let mut elems = base.elems.clone();
    let mut region = base.region.clone();
    let mut faces: Vec<BoundaryFace> = base
        .faces
        .iter()
        .filter(|f| f.label != BoundaryLabel::Robin)
        .cloned()
        .collect();
    let mut layer_elements = Vec::new();
    for (gi, &f) in gamma.iter().enumerate() {
        let face = &base.faces[f];
        let node = face.node_slice()[0] as usize;
        let x0 = base.coords[node];
        let dir = face.normal[0];
        let thickness = epsilon * rho.values()[gi];
        if let DimMode::Radial { .. } = base.mode {
            if x0 + dir * thickness <= 0.0 {
                return Err(Error::MeshFoldover(
                    "coating extrusion crosses the radial origin".into(),
                ));
            }
        }
        let mut prev = node as u32;
        for l in 1..=n_layer {
            let x = x0 + dir * thickness * l as f64 / n_layer as f64;
            coords.push(x);
            let new = (coords.len() - 1) as u32;
            // keep element node order increasing in the coordinate
            if dir > 0.0 {
                elems.extend_from_slice(&[prev, new]);
            } else {
                elems.extend_from_slice(&[new, prev]);
            }
            region.push(RegionTag::Coating);
            layer_elements.push((elems.len() / 2 - 1) as u32);
            prev = new;
        }
        let omega_r = |r: f64| match base.mode {
            DimMode::Radial { space_dim } => {
                unit_sphere_area(space_dim) * r.powi(space_dim as i32 - 1)
            }
            _ => 1.0,
        };
        faces.push(BoundaryFace {
            nodes: [prev, NO_NODE],
            normal: face.normal,
            measure: omega_r(x0 + dir * thickness),
            label: BoundaryLabel::Outer,
        });
    }
    let outer_faces: Vec<u32> = faces
        .iter()
        .enumerate()
        .filter(|(_, f)| f.label == BoundaryLabel::Outer)
        .map(|(i, _)| i as u32)
        .collect();
    let merged = DiscreteDomain::assemble(base.mode, coords, elems, region, faces)?;
    Ok(CoatedDomain {
        base: base.clone(),
        merged,
        epsilon,
        layer_elements,
        outer_faces,
        n_base_nodes: base.n_nodes(),
    })
}

fn coat_planar(
    base: &DiscreteDomain,
    rho: &ThicknessProfile,
    epsilon: f64,
    n_layer: usize,
    gamma: &[usize],
) -> Result<CoatedDomain> {
    use std::collections::BTreeMap;
    // per-node offset direction: normalized average of adjacent γ-face normals,
    // scaled by the mean adjacent thickness (straight offsets; curvature enters
    // through the resulting element geometry)
    let mut node_info: BTreeMap<u32, ([f64; 2], f64, usize)> = BTreeMap::new();
    for (gi, &f) in gamma.iter().enumerate() {
        let face = &base.faces[f];
        for &nd in face.node_slice() {
            let e = node_info.entry(nd).or_insert(([0.0; 2], 0.0, 0));
            e.0[0] += face.normal[0];
            e.0[1] += face.normal[1];
            e.1 += epsilon * rho.values()[gi];
            e.2 += 1;
        }
    }
    let mut coords = base.coords.clone();
    let mut elems = base.elems.clone();
    let mut region = base.region.clone();
    let mut new_ids: BTreeMap<(u32, usize), u32> = BTreeMap::new();
    for (&nd, &(nsum, tsum, cnt)) in &node_info {
        let nlen = (nsum[0] * nsum[0] + nsum[1] * nsum[1]).sqrt();
        if !(nlen > 0.0) {
            return Err(Error::MeshFoldover(
                "opposing face normals cancel at a coating node".into(),
            ));
        }
        let dir = [nsum[0] / nlen, nsum[1] / nlen];
        let thick = tsum / cnt as f64;
        let p = [coords[nd as usize * 2], coords[nd as usize * 2 + 1]];
        for l in 1..=n_layer {
            let t = thick * l as f64 / n_layer as f64;
            coords.push(p[0] + t * dir[0]);
            coords.push(p[1] + t * dir[1]);
            new_ids.insert((nd, l), (coords.len() / 2 - 1) as u32);
        }
    }
    let at = |nd: u32, l: usize, ids: &BTreeMap<(u32, usize), u32>| -> u32 {
        if l == 0 {
            nd
        } else {
            ids[&(nd, l)]
        }
    };
    let mut layer_elements = Vec::new();
    let mut faces: Vec<BoundaryFace> = base
        .faces
        .iter()
        .filter(|f| f.label != BoundaryLabel::Robin)
        .cloned()
        .collect();
    // lateral sides: γ-nodes incident to exactly one γ-face that are also on
    // the essential boundary (the ζ set) spawn boundary columns
    let mut gamma_node_count: BTreeMap<u32, usize> = BTreeMap::new();
    for &f in gamma {
        for &nd in base.faces[f].node_slice() {
            *gamma_node_count.entry(nd).or_insert(0) += 1;
        }
    }
    for &f in gamma {
        let face = &base.faces[f];
        let (a, b) = (face.node_slice()[0], face.node_slice()[1]);
        // orient so the strip extrudes to positive area
        let pa = [coords[a as usize * 2], coords[a as usize * 2 + 1]];
        let pb = [coords[b as usize * 2], coords[b as usize * 2 + 1]];
        // order (a, b) so that extruding along the normal yields positive
        // triangle areas: require (b − a) × n > 0
        let cross = (pb[0] - pa[0]) * face.normal[1] - (pb[1] - pa[1]) * face.normal[0];
        let (a, b) = if cross > 0.0 { (a, b) } else { (b, a) };
        for l in 1..=n_layer {
            let (a0, b0, a1, b1) = (
                at(a, l - 1, &new_ids),
                at(b, l - 1, &new_ids),
                at(a, l, &new_ids),
                at(b, l, &new_ids),
            );
            for tri in [[a0, b0, b1], [a0, b1, a1]] {
                let p: Vec<[f64; 2]> = tri
                    .iter()
                    .map(|&i| [coords[i as usize * 2], coords[i as usize * 2 + 1]])
                    .collect();
                let det = (p[1][0] - p[0][0]) * (p[2][1] - p[0][1])
                    - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]);
                if !(det > 0.0) {
                    return Err(Error::MeshFoldover(format!(
                        "coating extrusion self-intersects (signed area {})",
                        det / 2.0
                    )));
                }
                elems.extend_from_slice(&tri);
                region.push(RegionTag::Coating);
                layer_elements.push((elems.len() / 3 - 1) as u32);
            }
        }
        // top edge becomes Outer boundary
        let (ta, tb) = (at(a, n_layer, &new_ids), at(b, n_layer, &new_ids));
        let p0 = [coords[ta as usize * 2], coords[ta as usize * 2 + 1]];
        let p1 = [coords[tb as usize * 2], coords[tb as usize * 2 + 1]];
        let (dx, dy) = (p1[0] - p0[0], p1[1] - p0[1]);
        let len = (dx * dx + dy * dy).sqrt();
        faces.push(BoundaryFace {
            nodes: [ta, tb],
            normal: [dy / len, -dx / len],
            measure: len,
            label: BoundaryLabel::Outer,
        });
    }
    for (&nd, &cnt) in &gamma_node_count {
        if cnt == 1 {
            // column of lateral edges at an open end of γ
            for l in 1..=n_layer {
                let (n0, n1) = (at(nd, l - 1, &new_ids), at(nd, l, &new_ids));
                let p0 = [coords[n0 as usize * 2], coords[n0 as usize * 2 + 1]];
                let p1 = [coords[n1 as usize * 2], coords[n1 as usize * 2 + 1]];
                let (dx, dy) = (p1[0] - p0[0], p1[1] - p0[1]);
                let len = (dx * dx + dy * dy).sqrt();
                // lateral normal direction is irrelevant to the solves (the
                // faces are essential); keep the right-hand perpendicular
                faces.push(BoundaryFace {
                    nodes: [n0, n1],
                    normal: [dy / len, -dx / len],
                    measure: len,
                    label: BoundaryLabel::Outer,
                });
            }
        }
    }
    let outer_faces: Vec<u32> = faces
        .iter()
        .enumerate()
        .filter(|(_, f)| f.label == BoundaryLabel::Outer)
        .map(|(i, _)| i as u32)
        .collect();
    let merged = DiscreteDomain::assemble(DimMode::Planar, coords, elems, region, faces)?;
    Ok(CoatedDomain {
        base: base.clone(),
        merged,
        epsilon,
        layer_elements,
        outer_faces,
        n_base_nodes: base.n_nodes(),
    })
}

impl CoatedDomain {
    /// Volume of the coating layer Σ_ε (with the radial weight in radial mode).
    pub fn coating_volume(&self) -> f64 {
        let d = &self.merged;
        let nq = d.quad_points_per_elem();
        self.layer_elements
            .iter()
            .map(|&e| {
                (0..nq)
                    .map(|q| d.qp_weight(e as usize, q) * d.qp_radial(e as usize, q))
                    .sum::<f64>()
            })
            .sum()
    }

    /// Thickness of the coating above Robin face `gi` (indexed in the base's
    /// Robin-face order), measured between face midpoints.
    pub fn layer_thickness(&self, gi: usize) -> f64 {
        let base_face_idx: Vec<usize> = self.base.robin_faces().collect();
        let bf = &self.base.faces[base_face_idx[gi]];
        let of = &self.merged.faces[self.outer_faces[gi] as usize];
        let mid = |d: &DiscreteDomain, f: &BoundaryFace| -> [f64; 2] {
            let ns = f.node_slice();
            let dim = d.coord_dim();
            let mut m = [0.0; 2];
            for &n in ns {
                for c in 0..dim {
                    m[c] += d.node(n as usize)[c] / ns.len() as f64;
                }
            }
            m
        };
        let a = mid(&self.base, bf);
        let b = mid(&self.merged, of);
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
    }
}
