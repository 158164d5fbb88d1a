//! Plain-text mesh format.
//!
//! ```text
//! # full-line and trailing comments start with '#'
//! mesh planar 2
//! nodes 4
//! 0 0
//! 1 0
//! 0 1
//! 1 1
//! elements 2
//! 0 1 2
//! 1 3 2
//! boundary 4
//! 0 1 ROBIN
//! 1 3 DIRICHLET
//! 2 3 DIRICHLET
//! 0 2 DIRICHLET
//! ```
//!
//! The header is `mesh interval 1`, `mesh radial <n>` (n >= 2 is the ambient
//! space dimension of the radial reduction), or `mesh planar 2`. Node indices
//! are 0-based; labels are DIRICHLET, ROBIN or OUTER; boundary entries list
//! one node (1D modes) or an edge's two nodes (planar). Coordinates are
//! written with shortest round-trip formatting, so write then parse
//! reproduces a domain exactly.

use super::*;

/// Upper bound on section counts; keeps hostile inputs from exhausting memory.
const MAX_COUNT: usize = 5_000_000;

fn bad(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::InvalidMesh(format!("line {line}: {msg}"))
}

pub fn parse_mesh_text(text: &str) -> Result<DiscreteDomain> {
    let mut lines = text.lines().enumerate().filter_map(|(i, raw)| {
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            None
        } else {
            Some((i + 1, body))
        }
    });

    let (hline, header) = lines
        .next()
        .ok_or_else(|| bad(0, "missing `mesh <mode> <dim>` header"))?;
    let toks: Vec<&str> = header.split_whitespace().collect();
    if toks.len() != 3 || toks[0] != "mesh" {
        return Err(bad(hline, "expected header `mesh <mode> <dim>`"));
    }
    let dim: u32 = toks[2]
        .parse()
        .map_err(|_| bad(hline, format!("bad dimension `{}`", toks[2])))?;
    let mode = match (toks[1], dim) {
        ("interval", 1) => DimMode::Interval,
        ("interval", d) => return Err(bad(hline, format!("interval mode needs dim 1, got {d}"))),
        ("radial", d) if (2..=MAX_RADIAL_DIM).contains(&d) => DimMode::Radial { space_dim: d },
        ("radial", d) if d > MAX_RADIAL_DIM => {
            return Err(bad(hline, format!("radial dim {d} exceeds the maximum {MAX_RADIAL_DIM}")))
        }
        ("radial", d) => return Err(bad(hline, format!("radial mode needs dim >= 2, got {d}"))),
        ("planar", 2) => DimMode::Planar,
        ("planar", d) => return Err(bad(hline, format!("planar mode needs dim 2, got {d}"))),
        (m, _) => return Err(bad(hline, format!("unknown mode `{m}`"))),
    };
    let cdim = if mode == DimMode::Planar { 2 } else { 1 };
    let enodes = if mode == DimMode::Planar { 3 } else { 2 };
    let bnodes = if mode == DimMode::Planar { 2 } else { 1 };

    let section = |lines: &mut dyn Iterator<Item = (usize, &str)>, name: &str| -> Result<usize> {
        let (ln, s) = lines
            .next()
            .ok_or_else(|| bad(0, format!("missing `{name} <count>` section")))?;
        let t: Vec<&str> = s.split_whitespace().collect();
        if t.len() != 2 || t[0] != name {
            return Err(bad(ln, format!("expected `{name} <count>`")));
        }
        let count: usize = t[1]
            .parse()
            .map_err(|_| bad(ln, format!("bad count `{}`", t[1])))?;
        if count > MAX_COUNT {
            return Err(bad(ln, format!("count {count} exceeds the limit {MAX_COUNT}")));
        }
        Ok(count)
    };

    let n_nodes = section(&mut lines, "nodes")?;
    let mut coords = Vec::with_capacity(n_nodes.saturating_mul(cdim));
    for _ in 0..n_nodes {
        let (ln, s) = lines.next().ok_or_else(|| bad(0, "unexpected end of node list"))?;
        let t: Vec<&str> = s.split_whitespace().collect();
        if t.len() != cdim {
            return Err(bad(ln, format!("expected {cdim} coordinate(s)")));
        }
        for tok in t {
            let v: f64 = tok
                .parse()
                .map_err(|_| bad(ln, format!("bad coordinate `{tok}`")))?;
            if !v.is_finite() {
                return Err(bad(ln, format!("non-finite coordinate `{tok}`")));
            }
            coords.push(v);
        }
    }

    let n_elems = section(&mut lines, "elements")?;
    let mut elems = Vec::with_capacity(n_elems.saturating_mul(enodes));
    for _ in 0..n_elems {
        let (ln, s) = lines.next().ok_or_else(|| bad(0, "unexpected end of element list"))?;
        let t: Vec<&str> = s.split_whitespace().collect();
        if t.len() != enodes {
            return Err(bad(ln, format!("expected {enodes} node indices")));
        }
        for tok in t {
            let v: u32 = tok
                .parse()
                .map_err(|_| bad(ln, format!("bad node index `{tok}`")))?;
            elems.push(v);
        }
    }

    let n_faces = section(&mut lines, "boundary")?;
    let mut bfaces: Vec<([u32; 2], BoundaryLabel)> = Vec::with_capacity(n_faces);
    for _ in 0..n_faces {
        let (ln, s) = lines.next().ok_or_else(|| bad(0, "unexpected end of boundary list"))?;
        let t: Vec<&str> = s.split_whitespace().collect();
        if t.len() != bnodes + 1 {
            return Err(bad(ln, format!("expected {bnodes} node index(es) and a label")));
        }
        let mut nodes = [0u32; 2];
        for (k, tok) in t[..bnodes].iter().enumerate() {
            nodes[k] = tok
                .parse()
                .map_err(|_| bad(ln, format!("bad node index `{tok}`")))?;
        }
        let label = match t[bnodes] {
            "DIRICHLET" => BoundaryLabel::Dirichlet,
            "ROBIN" => BoundaryLabel::Robin,
            "OUTER" => BoundaryLabel::Outer,
            other => return Err(bad(ln, format!("unknown boundary label `{other}`"))),
        };
        bfaces.push((nodes, label));
    }

    if let Some((ln, s)) = lines.next() {
        return Err(bad(ln, format!("unexpected trailing content `{s}`")));
    }

    match mode {
        DimMode::Planar => {
            let vertices: Vec<[f64; 2]> = coords.chunks(2).map(|c| [c[0], c[1]]).collect();
            let triangles: Vec<[u32; 3]> = elems.chunks(3).map(|e| [e[0], e[1], e[2]]).collect();
            let labels: Vec<([u32; 2], BoundaryLabel)> = bfaces;
            build_planar_domain(vertices, triangles, &labels)
        }
        _ => {
            let pts: Vec<(u32, BoundaryLabel)> =
                bfaces.into_iter().map(|(n, l)| (n[0], l)).collect();
            one_dim_from_file(mode, coords, elems, &pts)
        }
    }
}

pub fn write_mesh_text(d: &DiscreteDomain) -> Result<String> {
    use std::fmt::Write as _;
    if (0..d.n_elems()).any(|e| d.region(e) == RegionTag::Coating) {
        return Err(Error::InvalidParameter(
            "coated meshes are runtime constructions and cannot be serialized".into(),
        ));
    }
    let (mode_s, dim) = match d.mode {
        DimMode::Interval => ("interval", 1),
        DimMode::Radial { space_dim } => ("radial", space_dim),
        DimMode::Planar => ("planar", 2),
    };
    let mut s = String::new();
    writeln!(s, "mesh {mode_s} {dim}").unwrap();
    writeln!(s, "nodes {}", d.n_nodes()).unwrap();
    for i in 0..d.n_nodes() {
        let p = d.node(i);
        for (c, v) in p.iter().enumerate() {
            if c > 0 {
                s.push(' ');
            }
            write!(s, "{v}").unwrap();
        }
        s.push('\n');
    }
    writeln!(s, "elements {}", d.n_elems()).unwrap();
    for e in 0..d.n_elems() {
        for (c, v) in d.elem(e).iter().enumerate() {
            if c > 0 {
                s.push(' ');
            }
            write!(s, "{v}").unwrap();
        }
        s.push('\n');
    }
    writeln!(s, "boundary {}", d.faces().len()).unwrap();
    for f in d.faces() {
        for &n in f.node_slice() {
            write!(s, "{n} ").unwrap();
        }
        let label = match f.label {
            BoundaryLabel::Dirichlet => "DIRICHLET",
            BoundaryLabel::Robin => "ROBIN",
            BoundaryLabel::Outer => "OUTER",
        };
        writeln!(s, "{label}").unwrap();
    }
    Ok(s)
}
