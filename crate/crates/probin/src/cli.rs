//! Experiment runner: flat `key = value` configs, subcommand dispatch,
//! deterministic artifact emission.
//!
//! A run reads one configuration (file plus flag overrides), writes the fully
//! resolved configuration back to the output directory as `resolved_config`,
//! executes one subcommand, and records a `run_manifest.txt` with the inputs
//! hash, seed, versions, wall time, and a machine-readable error code on
//! failure. Identical (config, seed) runs produce byte-identical artifacts;
//! only the manifest carries timing. Exit status: 0 success, 2 solver
//! failure, 3 configuration error.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use sha2::{Digest, Sha256};

use crate::domain::{
    build_interval_domain, build_planar_annulus, build_planar_square, build_radial_domain,
    mesh_text, BoundaryLabel, DiscreteDomain, GammaEnd, RadialPartition, ThicknessProfile,
    MAX_RADIAL_DIM,
};
use crate::eigensolver::{boundary_flux, principal_eigenpair, EigenSolveSettings, RobinField};
use crate::error::{Error, Result};
use crate::inverse::{
    forward_measure, gauss_newton_reconstruct, parse_measurement_csv, stability_probe,
    Measurement, NoiseModel, RobinBasis, RobinParameterization,
};
use crate::limits::{
    bv_quotient_eval, coating_sweep, linf_rayleigh_eval, p_continuity_scan, p_limit_classify_inf,
    p_limit_scan_one, BvCandidate,
};
use crate::sensitivity::{lambda_derivative, solve_linearized};

/// Which experiment a run executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subcommand {
    Solve,
    CoatingSweep,
    DerivativeCheck,
    Reconstruct,
    StabilityProbe,
    LimitsScan,
}

impl fmt::Display for Subcommand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Subcommand::Solve => "solve",
            Subcommand::CoatingSweep => "coating-sweep",
            Subcommand::DerivativeCheck => "derivative-check",
            Subcommand::Reconstruct => "reconstruct",
            Subcommand::StabilityProbe => "stability-probe",
            Subcommand::LimitsScan => "limits-scan",
        })
    }
}

impl FromStr for Subcommand {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "solve" => Ok(Subcommand::Solve),
            "coating-sweep" => Ok(Subcommand::CoatingSweep),
            "derivative-check" => Ok(Subcommand::DerivativeCheck),
            "reconstruct" => Ok(Subcommand::Reconstruct),
            "stability-probe" => Ok(Subcommand::StabilityProbe),
            "limits-scan" => Ok(Subcommand::LimitsScan),
            _ => Err(Error::ConfigError(format!(
                "unknown subcommand `{s}`; expected solve | coating-sweep | derivative-check \
                 | reconstruct | stability-probe | limits-scan"
            ))),
        }
    }
}

/// Which limit study a `limits-scan` run performs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LimitsMode {
    P1,
    PInf,
    Continuity,
    Linf,
    Bv,
}

impl fmt::Display for LimitsMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LimitsMode::P1 => "p1",
            LimitsMode::PInf => "pinf",
            LimitsMode::Continuity => "continuity",
            LimitsMode::Linf => "linf",
            LimitsMode::Bv => "bv",
        })
    }
}

impl FromStr for LimitsMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "p1" => Ok(LimitsMode::P1),
            "pinf" => Ok(LimitsMode::PInf),
            "continuity" => Ok(LimitsMode::Continuity),
            "linf" => Ok(LimitsMode::Linf),
            "bv" => Ok(LimitsMode::Bv),
            _ => Err(Error::ConfigError(format!(
                "unknown limits-scan mode `{s}`; expected p1 | pinf | continuity | linf | bv"
            ))),
        }
    }
}

/// Scalar-or-list value, used for h, rho, xi, and coefficient vectors.
#[derive(Debug, Clone, PartialEq)]
pub enum ValueSpec {
    Constant(f64),
    List(Vec<f64>),
}

impl ValueSpec {
    fn broadcast(&self, n: usize) -> Vec<f64> {
        match self {
            ValueSpec::Constant(c) => vec![*c; n],
            ValueSpec::List(v) => v.clone(),
        }
    }
}

/// Mesh selection: a built-in family or a mesh file.
#[derive(Debug, Clone, PartialEq)]
pub enum DomainSpec {
    Interval {
        cells: usize,
        gamma: GammaEnd,
    },
    Radial {
        cells: usize,
        space_dim: u32,
        r_inner: f64,
        r_outer: f64,
        partition: RadialPartition,
    },
    PlanarSquare {
        cells: usize,
    },
    PlanarAnnulus {
        n_theta: usize,
        n_radial: usize,
        r_inner: f64,
        r_outer: f64,
    },
    MeshFile {
        path: PathBuf,
    },
}

impl DomainSpec {
    pub fn build(&self) -> Result<DiscreteDomain> {
        match self {
            DomainSpec::Interval { cells, gamma } => build_interval_domain(*cells, *gamma),
            DomainSpec::Radial {
                cells,
                space_dim,
                r_inner,
                r_outer,
                partition,
            } => build_radial_domain(*cells, *r_inner, *r_outer, *space_dim, *partition),
            DomainSpec::PlanarSquare { cells } => build_planar_square(*cells),
            DomainSpec::PlanarAnnulus {
                n_theta,
                n_radial,
                r_inner,
                r_outer,
            } => build_planar_annulus(*n_theta, *n_radial, *r_inner, *r_outer),
            DomainSpec::MeshFile { path } => {
                let text = std::fs::read_to_string(path)?;
                mesh_text::parse_mesh_text(&text)
            }
        }
    }
}

/// Eigensolver knobs, a config-file mirror of `EigenSolveSettings` (the run
/// seed lives in `[run]`).
#[derive(Debug, Clone, PartialEq)]
pub struct SolverSpec {
    pub tol_lambda: f64,
    pub tol_u: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    pub delta_inner: Option<f64>,
    pub backtrack: f64,
}

impl Default for SolverSpec {
    fn default() -> Self {
        let s = EigenSolveSettings::default();
        SolverSpec {
            tol_lambda: s.tol_lambda,
            tol_u: s.tol_u,
            max_outer: s.max_outer,
            max_inner: s.max_inner,
            delta_inner: s.delta_inner,
            backtrack: s.backtrack,
        }
    }
}

impl SolverSpec {
    pub fn to_settings(&self, seed: u64) -> EigenSolveSettings {
        EigenSolveSettings {
            tol_lambda: self.tol_lambda,
            tol_u: self.tol_u,
            max_outer: self.max_outer,
            max_inner: self.max_inner,
            delta_inner: self.delta_inner,
            backtrack: self.backtrack,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoatingSpec {
    pub epsilons: Vec<f64>,
    pub rho: ValueSpec,
    pub layer_cells: usize,
}

impl Default for CoatingSpec {
    fn default() -> Self {
        CoatingSpec {
            epsilons: vec![0.1, 0.05, 0.025, 0.0125],
            rho: ValueSpec::Constant(1.0),
            layer_cells: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeSpec {
    pub xi: ValueSpec,
    pub delta_reg: Option<f64>,
    pub fd_step: f64,
}

impl Default for DerivativeSpec {
    fn default() -> Self {
        DerivativeSpec {
            xi: ValueSpec::Constant(1.0),
            delta_reg: None,
            fd_step: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BasisKind {
    Piecewise,
    Bspline,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructSpec {
    pub k: usize,
    pub basis: BasisKind,
    pub degree: usize,
    pub h_true: ValueSpec,
    pub h_init: ValueSpec,
    pub reg_weight: f64,
    pub h_min: f64,
    pub noise_flux: f64,
    pub noise_lambda: f64,
    /// Measured data replacing the synthetic forward pass; checked for
    /// existence at parse time, read at run time.
    pub data_file: Option<PathBuf>,
}

impl Default for ReconstructSpec {
    fn default() -> Self {
        ReconstructSpec {
            k: 1,
            basis: BasisKind::Piecewise,
            degree: 2,
            h_true: ValueSpec::Constant(1.3),
            h_init: ValueSpec::Constant(0.65),
            reg_weight: 1e-10,
            h_min: crate::inverse::DEFAULT_H_MIN,
            noise_flux: 0.0,
            noise_lambda: 0.0,
            data_file: None,
        }
    }
}

impl ReconstructSpec {
    fn robin_basis(&self) -> RobinBasis {
        match self.basis {
            BasisKind::Piecewise => RobinBasis::PiecewiseConstant { k: self.k },
            BasisKind::Bspline => RobinBasis::BSpline {
                k: self.k,
                degree: self.degree,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSpec {
    pub radii: Vec<f64>,
    pub m_ball: f64,
}

impl Default for ProbeSpec {
    fn default() -> Self {
        ProbeSpec {
            radii: (0..10).map(|i| 1e-3 * 1.8f64.powi(i)).collect(),
            m_ball: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LimitsSpec {
    pub mode: LimitsMode,
    pub p_grid: Vec<f64>,
    pub rho: f64,
    pub rho_values: Vec<f64>,
    pub p0: f64,
}

fn default_p_grid(mode: LimitsMode) -> Vec<f64> {
    match mode {
        LimitsMode::P1 => vec![2.0, 1.8, 1.6, 1.4, 1.2, 1.05],
        LimitsMode::PInf => vec![2.0, 3.0, 4.0, 6.0, 8.0],
        _ => vec![1.8, 1.85, 1.9, 1.95, 2.0, 2.05, 2.1, 2.15, 2.2],
    }
}

/// Fully resolved run description. Emitting and re-parsing a `RunConfig` is
/// the identity, which is what makes the `resolved_config` echo replayable.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub subcommand: Subcommand,
    pub out: PathBuf,
    pub seed: u64,
    pub threads: usize,
    pub domain: DomainSpec,
    pub p: f64,
    pub h: ValueSpec,
    pub solver: SolverSpec,
    pub coating: CoatingSpec,
    pub derivative: DerivativeSpec,
    pub reconstruct: ReconstructSpec,
    pub probe: ProbeSpec,
    pub limits: LimitsSpec,
}

impl RunConfig {
    fn h_field(&self, domain: &DiscreteDomain) -> Result<RobinField> {
        let f = match &self.h {
            ValueSpec::Constant(c) => {
                RobinField::PerFace(vec![*c; domain.robin_faces().count()])
            }
            ValueSpec::List(v) => RobinField::PerFace(v.clone()),
        };
        f.validate(domain)?;
        Ok(f)
    }

    fn settings(&self) -> EigenSolveSettings {
        self.solver.to_settings(self.seed)
    }
}

/// Flag-level overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct CliOverrides {
    pub subcommand: Option<Subcommand>,
    pub limits_mode: Option<LimitsMode>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
}

// Key registry: one entry per section, listing every key the parser accepts.
const KNOWN_KEYS: &[(&str, &[&str])] = &[
    ("run", &["subcommand", "out", "seed", "threads"]),
    (
        "domain",
        &[
            "mode", "cells", "gamma", "space_dim", "r_inner", "r_outer", "partition", "n_theta",
            "n_radial", "mesh_file",
        ],
    ),
    ("problem", &["p", "h", "h_values", "h_file"]),
    (
        "solver",
        &["tol_lambda", "tol_u", "max_outer", "max_inner", "delta_inner", "backtrack"],
    ),
    ("coating", &["epsilons", "rho", "rho_values", "layer_cells"]),
    ("derivative", &["xi", "xi_values", "delta_reg", "fd_step"]),
    (
        "reconstruct",
        &[
            "k", "basis", "degree", "h_true", "h_true_values", "h_init", "h_init_values",
            "reg_weight", "h_min", "noise_flux", "noise_lambda", "data_file",
        ],
    ),
    ("probe", &["radii", "m_ball"]),
    ("limits", &["mode", "p_grid", "rho", "rho_values", "p0"]),
];

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::ConfigError(msg.into())
}

/// Raw section/key/value view of the config text. Syntax only; typing and
/// range checks happen in `RunConfig::from_raw`.
struct RawConfig {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl RawConfig {
    fn parse(text: &str) -> Result<RawConfig> {
        let mut sections: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
        let mut current: Option<String> = None;
        for (idx, raw_line) in text.lines().enumerate() {
            let line = raw_line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| cfg_err(format!("line {}: unterminated section header", idx + 1)))?
                    .trim();
                if !KNOWN_KEYS.iter().any(|(s, _)| *s == name) {
                    return Err(cfg_err(format!("line {}: unknown section `{name}`", idx + 1)));
                }
                sections.entry(name.to_string()).or_default();
                current = Some(name.to_string());
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                cfg_err(format!(
                    "line {}: expected `key = value` or `[section]`, got `{line}`",
                    idx + 1
                ))
            })?;
            let key = key.trim();
            let value = value.trim();
            if key.is_empty() {
                return Err(cfg_err(format!("line {}: empty key", idx + 1)));
            }
            let section = current
                .as_ref()
                .ok_or_else(|| cfg_err(format!("line {}: `{key}` appears before any [section]", idx + 1)))?;
            let keys = KNOWN_KEYS
                .iter()
                .find(|(s, _)| s == section)
                .map(|(_, ks)| *ks)
                .unwrap();
            if !keys.contains(&key) {
                return Err(cfg_err(format!("unknown key `{section}.{key}`")));
            }
            let prev = sections
                .get_mut(section)
                .unwrap()
                .insert(key.to_string(), value.to_string());
            if prev.is_some() {
                return Err(cfg_err(format!("duplicate key `{section}.{key}`")));
            }
        }
        Ok(RawConfig { sections })
    }

    fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections.get(section).and_then(|s| s.get(key)).map(|v| v.as_str())
    }

    fn f64(&self, section: &str, key: &str) -> Result<Option<f64>> {
        match self.get(section, key) {
            None => Ok(None),
            Some(v) => v
                .parse::<f64>()
                .map(Some)
                .map_err(|_| cfg_err(format!("{section}.{key}: expected a number, got `{v}`"))),
        }
    }

    fn f64_or(&self, section: &str, key: &str, default: f64) -> Result<f64> {
        Ok(self.f64(section, key)?.unwrap_or(default))
    }

    /// Optional float where `none` (or an absent key) means None.
    fn opt_f64(&self, section: &str, key: &str, default: Option<f64>) -> Result<Option<f64>> {
        match self.get(section, key) {
            None => Ok(default),
            Some("none") => Ok(None),
            Some(v) => v.parse::<f64>().map(Some).map_err(|_| {
                cfg_err(format!("{section}.{key}: expected a number or `none`, got `{v}`"))
            }),
        }
    }

    fn usize_or(&self, section: &str, key: &str, default: usize) -> Result<usize> {
        match self.get(section, key) {
            None => Ok(default),
            Some(v) => v.parse::<usize>().map_err(|_| {
                cfg_err(format!(
                    "{section}.{key}: expected an unsigned integer, got `{v}`"
                ))
            }),
        }
    }

    fn u64_or(&self, section: &str, key: &str, default: u64) -> Result<u64> {
        match self.get(section, key) {
            None => Ok(default),
            Some(v) => v.parse::<u64>().map_err(|_| {
                cfg_err(format!(
                    "{section}.{key}: expected an unsigned integer, got `{v}`"
                ))
            }),
        }
    }

    fn list_f64(&self, section: &str, key: &str) -> Result<Option<Vec<f64>>> {
        match self.get(section, key) {
            None => Ok(None),
            Some(v) => {
                let mut out = Vec::new();
                for part in v.split(',') {
                    let part = part.trim();
                    out.push(part.parse::<f64>().map_err(|_| {
                        cfg_err(format!(
                            "{section}.{key}: expected comma-separated numbers, got `{part}`"
                        ))
                    })?);
                }
                Ok(Some(out))
            }
        }
    }
}

fn check_finite(section: &str, key: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(cfg_err(format!("{section}.{key} must be finite")))
    }
}

/// Resolve a file reference against the config directory; the file must exist
/// at parse time.
fn resolve_file(base: &Path, section: &str, key: &str, value: &str) -> Result<PathBuf> {
    let p = PathBuf::from(value);
    let p = if p.is_absolute() { p } else { base.join(p) };
    if !p.is_file() {
        return Err(cfg_err(format!(
            "{section}.{key}: file `{}` does not exist",
            p.display()
        )));
    }
    Ok(p)
}

/// One-of-many selector for constant/list/file forms of a field.
fn pick_value_spec(
    raw: &RawConfig,
    base: &Path,
    section: &str,
    scalar_key: &str,
    list_key: &str,
    file_key: Option<&str>,
    default: ValueSpec,
) -> Result<ValueSpec> {
    let mut given: Vec<&str> = Vec::new();
    if raw.get(section, scalar_key).is_some() {
        given.push(scalar_key);
    }
    if raw.get(section, list_key).is_some() {
        given.push(list_key);
    }
    if let Some(fk) = file_key {
        if raw.get(section, fk).is_some() {
            given.push(fk);
        }
    }
    if given.len() > 1 {
        return Err(cfg_err(format!(
            "{section}: give only one of {}",
            given
                .iter()
                .map(|k| format!("`{k}`"))
                .collect::<Vec<_>>()
                .join(", ")
        )));
    }
    match given.first() {
        None => Ok(default),
        Some(&k) if k == scalar_key => {
            Ok(ValueSpec::Constant(raw.f64(section, scalar_key)?.unwrap()))
        }
        Some(&k) if k == list_key => {
            let v = raw.list_f64(section, list_key)?.unwrap();
            if v.is_empty() {
                return Err(cfg_err(format!("{section}.{list_key} must not be empty")));
            }
            Ok(ValueSpec::List(v))
        }
        Some(&fk) => {
            let path = resolve_file(base, section, fk, raw.get(section, fk).unwrap())?;
            let text = std::fs::read_to_string(&path)?;
            let mut v = Vec::new();
            for tok in text.split_whitespace() {
                v.push(tok.parse::<f64>().map_err(|_| {
                    cfg_err(format!(
                        "{section}.{fk}: `{}` holds a non-numeric token `{tok}`",
                        path.display()
                    ))
                })?);
            }
            if v.is_empty() {
                return Err(cfg_err(format!(
                    "{section}.{fk}: `{}` holds no values",
                    path.display()
                )));
            }
            Ok(ValueSpec::List(v))
        }
    }
}

fn parse_domain_spec(raw: &RawConfig, base: &Path) -> Result<DomainSpec> {
    let mode = raw.get("domain", "mode").unwrap_or("interval");
    match mode {
        "interval" => {
            let cells = raw.usize_or("domain", "cells", 256)?;
            let gamma = match raw.get("domain", "gamma").unwrap_or("right") {
                "left" => GammaEnd::Left,
                "right" => GammaEnd::Right,
                "both" => GammaEnd::Both,
                "none" => GammaEnd::None,
                other => {
                    return Err(cfg_err(format!(
                        "domain.gamma: expected left | right | both | none, got `{other}`"
                    )))
                }
            };
            Ok(DomainSpec::Interval { cells, gamma })
        }
        "radial" => {
            let cells = raw.usize_or("domain", "cells", 256)?;
            let sd = raw.usize_or("domain", "space_dim", 2)?;
            if !(2..=MAX_RADIAL_DIM as usize).contains(&sd) {
                return Err(cfg_err(format!(
                    "domain.space_dim must lie in 2..={MAX_RADIAL_DIM}, got {sd}"
                )));
            }
            let space_dim = sd as u32;
            let r_inner = check_finite("domain", "r_inner", raw.f64_or("domain", "r_inner", 0.0)?)?;
            let r_outer = check_finite("domain", "r_outer", raw.f64_or("domain", "r_outer", 1.0)?)?;
            let partition = match raw.get("domain", "partition").unwrap_or("outer") {
                "outer" => RadialPartition::GammaOuter,
                "inner" => RadialPartition::GammaInner,
                other => {
                    return Err(cfg_err(format!(
                        "domain.partition: expected outer | inner, got `{other}`"
                    )))
                }
            };
            Ok(DomainSpec::Radial {
                cells,
                space_dim,
                r_inner,
                r_outer,
                partition,
            })
        }
        "planar-square" => Ok(DomainSpec::PlanarSquare {
            cells: raw.usize_or("domain", "cells", 24)?,
        }),
        "planar-annulus" => Ok(DomainSpec::PlanarAnnulus {
            n_theta: raw.usize_or("domain", "n_theta", 24)?,
            n_radial: raw.usize_or("domain", "n_radial", 3)?,
            r_inner: check_finite("domain", "r_inner", raw.f64_or("domain", "r_inner", 1.0)?)?,
            r_outer: check_finite("domain", "r_outer", raw.f64_or("domain", "r_outer", 2.0)?)?,
        }),
        "mesh-file" => {
            let value = raw
                .get("domain", "mesh_file")
                .ok_or_else(|| cfg_err("domain.mesh_file is required when mode = mesh-file"))?;
            Ok(DomainSpec::MeshFile {
                path: resolve_file(base, "domain", "mesh_file", value)?,
            })
        }
        other => Err(cfg_err(format!(
            "domain.mode: expected interval | radial | planar-square | planar-annulus | \
             mesh-file, got `{other}`"
        ))),
    }
}

fn validate_h_spec(h: &ValueSpec) -> Result<()> {
    let check = |v: f64| -> Result<()> {
        if !v.is_finite() {
            return Err(cfg_err("h must be finite"));
        }
        if v < 0.0 {
            return Err(cfg_err("h must be nonnegative"));
        }
        Ok(())
    };
    match h {
        ValueSpec::Constant(c) => check(*c),
        ValueSpec::List(v) => v.iter().try_for_each(|x| check(*x)),
    }
}

fn validate_positive_spec(section: &str, name: &str, s: &ValueSpec) -> Result<()> {
    let check = |v: f64| -> Result<()> {
        if !(v.is_finite() && v > 0.0) {
            return Err(cfg_err(format!("{section}.{name} must be positive and finite")));
        }
        Ok(())
    };
    match s {
        ValueSpec::Constant(c) => check(*c),
        ValueSpec::List(v) => v.iter().try_for_each(|x| check(*x)),
    }
}

fn validate_finite_spec(section: &str, name: &str, s: &ValueSpec) -> Result<()> {
    let all_finite = match s {
        ValueSpec::Constant(c) => c.is_finite(),
        ValueSpec::List(v) => v.iter().all(|x| x.is_finite()),
    };
    if all_finite {
        Ok(())
    } else {
        Err(cfg_err(format!("{section}.{name} must be finite")))
    }
}

/// Parse and fully validate a configuration. `base` anchors relative file
/// references; `cli` carries the flag overrides, which win over file keys.
pub fn parse_config_text(text: &str, base: &Path, cli: &CliOverrides) -> Result<RunConfig> {
    let raw = RawConfig::parse(text)?;

    let subcommand = match cli.subcommand {
        Some(s) => s,
        None => raw
            .get("run", "subcommand")
            .ok_or_else(|| cfg_err("run.subcommand is required (or pass a subcommand flag)"))?
            .parse::<Subcommand>()?,
    };
    let out = cli
        .out
        .clone()
        .or_else(|| raw.get("run", "out").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    let seed = match cli.seed {
        Some(s) => s,
        None => raw.u64_or("run", "seed", 0)?,
    };
    let threads = match cli.threads {
        Some(t) => t,
        None => raw.usize_or("run", "threads", 0)?,
    };

    let domain = parse_domain_spec(&raw, base)?;

    let p = check_finite("problem", "p", raw.f64_or("problem", "p", 2.0)?)?;
    if !(p > 1.0) {
        return Err(cfg_err("p must lie in (1, \u{221e})"));
    }
    let h = pick_value_spec(
        &raw,
        base,
        "problem",
        "h",
        "h_values",
        Some("h_file"),
        ValueSpec::Constant(1.0),
    )?;
    validate_h_spec(&h)?;

    let solver = {
        let d = SolverSpec::default();
        let tol_lambda = raw.f64_or("solver", "tol_lambda", d.tol_lambda)?;
        let tol_u = raw.f64_or("solver", "tol_u", d.tol_u)?;
        if !(tol_lambda.is_finite() && tol_lambda > 0.0 && tol_u.is_finite() && tol_u > 0.0) {
            return Err(cfg_err("solver tolerances must be positive and finite"));
        }
        let max_outer = raw.usize_or("solver", "max_outer", d.max_outer)?;
        let max_inner = raw.usize_or("solver", "max_inner", d.max_inner)?;
        if max_outer == 0 || max_inner == 0 {
            return Err(cfg_err("solver iteration limits must be positive"));
        }
        let delta_inner = raw.opt_f64("solver", "delta_inner", d.delta_inner)?;
        if let Some(di) = delta_inner {
            if !(di.is_finite() && di > 0.0) {
                return Err(cfg_err("solver.delta_inner must be positive and finite"));
            }
        }
        let backtrack = raw.f64_or("solver", "backtrack", d.backtrack)?;
        if !(backtrack > 0.0 && backtrack < 1.0) {
            return Err(cfg_err("solver.backtrack must lie in (0, 1)"));
        }
        SolverSpec {
            tol_lambda,
            tol_u,
            max_outer,
            max_inner,
            delta_inner,
            backtrack,
        }
    };

    let coating = {
        let d = CoatingSpec::default();
        let epsilons = raw.list_f64("coating", "epsilons")?.unwrap_or(d.epsilons);
        if epsilons.is_empty()
            || !epsilons.iter().all(|e| e.is_finite() && *e > 0.0)
            || !epsilons.windows(2).all(|w| w[1] < w[0])
        {
            return Err(cfg_err(
                "coating.epsilons must be positive, finite, and strictly decreasing",
            ));
        }
        let rho = pick_value_spec(&raw, base, "coating", "rho", "rho_values", None, d.rho)?;
        validate_positive_spec("coating", "rho", &rho)?;
        let layer_cells = raw.usize_or("coating", "layer_cells", d.layer_cells)?;
        if layer_cells == 0 {
            return Err(cfg_err("coating.layer_cells must be positive"));
        }
        CoatingSpec {
            epsilons,
            rho,
            layer_cells,
        }
    };

    let derivative = {
        let d = DerivativeSpec::default();
        let xi = pick_value_spec(&raw, base, "derivative", "xi", "xi_values", None, d.xi)?;
        validate_finite_spec("derivative", "xi", &xi)?;
        let delta_reg = raw.opt_f64("derivative", "delta_reg", d.delta_reg)?;
        if let Some(dr) = delta_reg {
            if !(dr.is_finite() && dr > 0.0) {
                return Err(cfg_err("derivative.delta_reg must be positive and finite"));
            }
        }
        let fd_step = raw.f64_or("derivative", "fd_step", d.fd_step)?;
        if !(fd_step.is_finite() && fd_step > 0.0) {
            return Err(cfg_err("derivative.fd_step must be positive and finite"));
        }
        DerivativeSpec {
            xi,
            delta_reg,
            fd_step,
        }
    };

    let reconstruct = {
        let d = ReconstructSpec::default();
        let k = raw.usize_or("reconstruct", "k", d.k)?;
        if k == 0 {
            return Err(cfg_err("reconstruct.k must be positive"));
        }
        let basis = match raw.get("reconstruct", "basis").unwrap_or("piecewise") {
            "piecewise" => BasisKind::Piecewise,
            "bspline" => BasisKind::Bspline,
            other => {
                return Err(cfg_err(format!(
                    "reconstruct.basis: expected piecewise | bspline, got `{other}`"
                )))
            }
        };
        let degree = raw.usize_or("reconstruct", "degree", d.degree)?;
        if basis == BasisKind::Bspline && k < degree + 1 {
            return Err(cfg_err(format!(
                "reconstruct.k must be at least degree + 1 = {} for the bspline basis",
                degree + 1
            )));
        }
        let h_true = pick_value_spec(
            &raw,
            base,
            "reconstruct",
            "h_true",
            "h_true_values",
            None,
            d.h_true,
        )?;
        let h_init = pick_value_spec(
            &raw,
            base,
            "reconstruct",
            "h_init",
            "h_init_values",
            None,
            d.h_init,
        )?;
        for (name, spec) in [("h_true", &h_true), ("h_init", &h_init)] {
            validate_finite_spec("reconstruct", name, spec)?;
            if let ValueSpec::List(v) = spec {
                if v.len() != k {
                    return Err(cfg_err(format!(
                        "reconstruct.{name}_values must have exactly k = {k} entries, got {}",
                        v.len()
                    )));
                }
            }
        }
        let reg_weight = raw.f64_or("reconstruct", "reg_weight", d.reg_weight)?;
        if !(reg_weight.is_finite() && reg_weight >= 0.0) {
            return Err(cfg_err("reconstruct.reg_weight must be nonnegative and finite"));
        }
        let h_min = raw.f64_or("reconstruct", "h_min", d.h_min)?;
        if !(h_min.is_finite() && h_min >= 0.0) {
            return Err(cfg_err("reconstruct.h_min must be nonnegative and finite"));
        }
        let noise_flux = raw.f64_or("reconstruct", "noise_flux", d.noise_flux)?;
        let noise_lambda = raw.f64_or("reconstruct", "noise_lambda", d.noise_lambda)?;
        if !(noise_flux.is_finite() && noise_flux >= 0.0 && noise_lambda.is_finite() && noise_lambda >= 0.0)
        {
            return Err(cfg_err("reconstruct noise levels must be nonnegative and finite"));
        }
        let data_file = match raw.get("reconstruct", "data_file") {
            None => None,
            Some(v) => Some(resolve_file(base, "reconstruct", "data_file", v)?),
        };
        ReconstructSpec {
            k,
            basis,
            degree,
            h_true,
            h_init,
            reg_weight,
            h_min,
            noise_flux,
            noise_lambda,
            data_file,
        }
    };

    if subcommand == Subcommand::Reconstruct && p < 2.0 {
        return Err(cfg_err(
            "reconstruct needs p \u{2265} 2 (the linearization is not available below 2)",
        ));
    }

    let probe = {
        let d = ProbeSpec::default();
        let radii = raw.list_f64("probe", "radii")?.unwrap_or(d.radii);
        if radii.is_empty() || !radii.iter().all(|r| r.is_finite() && *r >= 0.0) {
            return Err(cfg_err("probe.radii must be nonnegative and finite"));
        }
        let m_ball = raw.f64_or("probe", "m_ball", d.m_ball)?;
        if !(m_ball.is_finite() && m_ball > 0.0) {
            return Err(cfg_err("probe.m_ball must be positive and finite"));
        }
        ProbeSpec { radii, m_ball }
    };

    let limits = {
        let mode = match cli.limits_mode {
            Some(m) => m,
            None => match raw.get("limits", "mode") {
                None => LimitsMode::Continuity,
                Some(v) => v.parse::<LimitsMode>()?,
            },
        };
        let p_grid = raw
            .list_f64("limits", "p_grid")?
            .unwrap_or_else(|| default_p_grid(mode));
        if p_grid.is_empty() || !p_grid.iter().all(|g| g.is_finite()) {
            return Err(cfg_err("limits.p_grid must be nonempty and finite"));
        }
        let rho = raw.f64_or("limits", "rho", 2.0)?;
        if !(rho.is_finite() && rho > 0.0) {
            return Err(cfg_err("limits.rho must be positive and finite"));
        }
        let rho_values = raw
            .list_f64("limits", "rho_values")?
            .unwrap_or_else(|| vec![0.5, 2.0]);
        if rho_values.is_empty() || !rho_values.iter().all(|r| r.is_finite() && *r > 0.0) {
            return Err(cfg_err("limits.rho_values must be positive and finite"));
        }
        let p0 = raw.f64_or("limits", "p0", 2.0)?;
        if !(p0.is_finite() && p0 > 1.0) {
            return Err(cfg_err("limits.p0 must be finite and exceed 1"));
        }
        if subcommand == Subcommand::LimitsScan {
            match mode {
                LimitsMode::P1 => {
                    if !p_grid.iter().all(|g| *g > 1.0 && *g <= 2.0)
                        || !p_grid.windows(2).all(|w| w[1] < w[0])
                    {
                        return Err(cfg_err(
                            "limits.p_grid for the p1 scan must be strictly decreasing inside (1, 2]",
                        ));
                    }
                }
                LimitsMode::PInf => {
                    if p_grid.len() < 2
                        || !p_grid.iter().all(|g| *g > 1.0)
                        || !p_grid.windows(2).all(|w| w[1] > w[0])
                    {
                        return Err(cfg_err(
                            "limits.p_grid for the pinf scan must be strictly increasing with \
                             at least two points above 1",
                        ));
                    }
                }
                LimitsMode::Continuity => {
                    let increasing = p_grid.windows(2).all(|w| w[1] > w[0]);
                    let decreasing = p_grid.windows(2).all(|w| w[1] < w[0]);
                    if !p_grid.iter().all(|g| *g > 1.0) || !(increasing || decreasing) {
                        return Err(cfg_err(
                            "limits.p_grid for the continuity scan must be strictly monotone \
                             and stay above 1",
                        ));
                    }
                    let (lo, hi) = (
                        p_grid.iter().cloned().fold(f64::INFINITY, f64::min),
                        p_grid.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                    );
                    if !(lo <= p0 && p0 <= hi) {
                        return Err(cfg_err(
                            "limits.p0 must lie inside the span of limits.p_grid",
                        ));
                    }
                }
                LimitsMode::Linf | LimitsMode::Bv => {}
            }
        }
        LimitsSpec {
            mode,
            p_grid,
            rho,
            rho_values,
            p0,
        }
    };

    Ok(RunConfig {
        subcommand,
        out,
        seed,
        threads,
        domain,
        p,
        h,
        solver,
        coating,
        derivative,
        reconstruct,
        probe,
        limits,
    })
}

/// Parse a config file from disk (file references resolve against its
/// directory).
pub fn parse_config(path: &Path, cli: &CliOverrides) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| cfg_err(format!("cannot read config `{}`: {e}", path.display())))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    parse_config_text(&text, base, cli)
}

fn fmt_float(v: f64) -> String {
    format!("{v:e}")
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| fmt_float(*x)).collect::<Vec<_>>().join(",")
}

fn emit_value_spec(out: &mut String, scalar_key: &str, list_key: &str, spec: &ValueSpec) {
    match spec {
        ValueSpec::Constant(c) => writeln!(out, "{scalar_key} = {}", fmt_float(*c)).unwrap(),
        ValueSpec::List(v) => writeln!(out, "{list_key} = {}", fmt_list(v)).unwrap(),
    }
}

/// Serialize a resolved config. `parse(emit(c)) == c`; floats use the
/// shortest round-trip form, so the echo is both diffable and replayable.
pub fn emit_config(c: &RunConfig) -> String {
    let mut s = String::new();
    writeln!(s, "[run]").unwrap();
    writeln!(s, "subcommand = {}", c.subcommand).unwrap();
    writeln!(s, "out = {}", c.out.display()).unwrap();
    writeln!(s, "seed = {}", c.seed).unwrap();
    writeln!(s, "threads = {}", c.threads).unwrap();
    writeln!(s).unwrap();

    writeln!(s, "[domain]").unwrap();
    match &c.domain {
        DomainSpec::Interval { cells, gamma } => {
            writeln!(s, "mode = interval").unwrap();
            writeln!(s, "cells = {cells}").unwrap();
            let g = match gamma {
                GammaEnd::Left => "left",
                GammaEnd::Right => "right",
                GammaEnd::Both => "both",
                GammaEnd::None => "none",
            };
            writeln!(s, "gamma = {g}").unwrap();
        }
        DomainSpec::Radial {
            cells,
            space_dim,
            r_inner,
            r_outer,
            partition,
        } => {
            writeln!(s, "mode = radial").unwrap();
            writeln!(s, "cells = {cells}").unwrap();
            writeln!(s, "space_dim = {space_dim}").unwrap();
            writeln!(s, "r_inner = {}", fmt_float(*r_inner)).unwrap();
            writeln!(s, "r_outer = {}", fmt_float(*r_outer)).unwrap();
            let part = match partition {
                RadialPartition::GammaOuter => "outer",
                RadialPartition::GammaInner => "inner",
            };
            writeln!(s, "partition = {part}").unwrap();
        }
        DomainSpec::PlanarSquare { cells } => {
            writeln!(s, "mode = planar-square").unwrap();
            writeln!(s, "cells = {cells}").unwrap();
        }
        DomainSpec::PlanarAnnulus {
            n_theta,
            n_radial,
            r_inner,
            r_outer,
        } => {
            writeln!(s, "mode = planar-annulus").unwrap();
            writeln!(s, "n_theta = {n_theta}").unwrap();
            writeln!(s, "n_radial = {n_radial}").unwrap();
            writeln!(s, "r_inner = {}", fmt_float(*r_inner)).unwrap();
            writeln!(s, "r_outer = {}", fmt_float(*r_outer)).unwrap();
        }
        DomainSpec::MeshFile { path } => {
            writeln!(s, "mode = mesh-file").unwrap();
            writeln!(s, "mesh_file = {}", path.display()).unwrap();
        }
    }
    writeln!(s).unwrap();

    writeln!(s, "[problem]").unwrap();
    writeln!(s, "p = {}", fmt_float(c.p)).unwrap();
    emit_value_spec(&mut s, "h", "h_values", &c.h);
    writeln!(s).unwrap();

    writeln!(s, "[solver]").unwrap();
    writeln!(s, "tol_lambda = {}", fmt_float(c.solver.tol_lambda)).unwrap();
    writeln!(s, "tol_u = {}", fmt_float(c.solver.tol_u)).unwrap();
    writeln!(s, "max_outer = {}", c.solver.max_outer).unwrap();
    writeln!(s, "max_inner = {}", c.solver.max_inner).unwrap();
    match c.solver.delta_inner {
        Some(d) => writeln!(s, "delta_inner = {}", fmt_float(d)).unwrap(),
        None => writeln!(s, "delta_inner = none").unwrap(),
    }
    writeln!(s, "backtrack = {}", fmt_float(c.solver.backtrack)).unwrap();
    writeln!(s).unwrap();

    writeln!(s, "[coating]").unwrap();
    writeln!(s, "epsilons = {}", fmt_list(&c.coating.epsilons)).unwrap();
    emit_value_spec(&mut s, "rho", "rho_values", &c.coating.rho);
    writeln!(s, "layer_cells = {}", c.coating.layer_cells).unwrap();
    writeln!(s).unwrap();

    writeln!(s, "[derivative]").unwrap();
    emit_value_spec(&mut s, "xi", "xi_values", &c.derivative.xi);
    match c.derivative.delta_reg {
        Some(d) => writeln!(s, "delta_reg = {}", fmt_float(d)).unwrap(),
        None => writeln!(s, "delta_reg = none").unwrap(),
    }
    writeln!(s, "fd_step = {}", fmt_float(c.derivative.fd_step)).unwrap();
    writeln!(s).unwrap();

    writeln!(s, "[reconstruct]").unwrap();
    writeln!(s, "k = {}", c.reconstruct.k).unwrap();
    let basis = match c.reconstruct.basis {
        BasisKind::Piecewise => "piecewise",
        BasisKind::Bspline => "bspline",
    };
    writeln!(s, "basis = {basis}").unwrap();
    writeln!(s, "degree = {}", c.reconstruct.degree).unwrap();
    emit_value_spec(&mut s, "h_true", "h_true_values", &c.reconstruct.h_true);
    emit_value_spec(&mut s, "h_init", "h_init_values", &c.reconstruct.h_init);
    writeln!(s, "reg_weight = {}", fmt_float(c.reconstruct.reg_weight)).unwrap();
    writeln!(s, "h_min = {}", fmt_float(c.reconstruct.h_min)).unwrap();
    writeln!(s, "noise_flux = {}", fmt_float(c.reconstruct.noise_flux)).unwrap();
    writeln!(s, "noise_lambda = {}", fmt_float(c.reconstruct.noise_lambda)).unwrap();
    if let Some(path) = &c.reconstruct.data_file {
        writeln!(s, "data_file = {}", path.display()).unwrap();
    }
    writeln!(s).unwrap();

    writeln!(s, "[probe]").unwrap();
    writeln!(s, "radii = {}", fmt_list(&c.probe.radii)).unwrap();
    writeln!(s, "m_ball = {}", fmt_float(c.probe.m_ball)).unwrap();
    writeln!(s).unwrap();

    writeln!(s, "[limits]").unwrap();
    writeln!(s, "mode = {}", c.limits.mode).unwrap();
    writeln!(s, "p_grid = {}", fmt_list(&c.limits.p_grid)).unwrap();
    writeln!(s, "rho = {}", fmt_float(c.limits.rho)).unwrap();
    writeln!(s, "rho_values = {}", fmt_list(&c.limits.rho_values)).unwrap();
    writeln!(s, "p0 = {}", fmt_float(c.limits.p0)).unwrap();
    s
}

/// 17 significant digits, the CSV cell format.
fn sci(v: f64) -> String {
    format!("{v:.16e}")
}

struct Artifact {
    name: &'static str,
    text: String,
}

/// Failure stage: configuration and input assembly exit 3, numerical work
/// exits 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Config,
    Run,
}

type ExecResult = std::result::Result<Vec<Artifact>, (Phase, Error)>;

fn at_config(e: Error) -> (Phase, Error) {
    (Phase::Config, e)
}

fn at_run(e: Error) -> (Phase, Error) {
    (Phase::Run, e)
}

fn run_solve(c: &RunConfig) -> ExecResult {
    let d = c.domain.build().map_err(at_config)?;
    let h = c.h_field(&d).map_err(at_config)?;
    let settings = c.settings();
    let pair = principal_eigenpair(&d, c.p, &h, &settings).map_err(at_run)?;
    let flux = boundary_flux(&d, c.p, &pair, BoundaryLabel::Dirichlet).map_err(at_run)?;

    let mut eig = String::from("node,u\n");
    for (i, u) in pair.u.iter().enumerate() {
        writeln!(eig, "{i},{}", sci(*u)).unwrap();
    }
    let mut summary = String::from("lambda,residual,iterations\n");
    writeln!(
        summary,
        "{},{},{}",
        sci(pair.lambda),
        sci(pair.residual_norm),
        pair.iterations
    )
    .unwrap();
    let mut fx = String::from("face,flux\n");
    for (f, q) in d.dirichlet_faces().zip(&flux) {
        writeln!(fx, "{f},{}", sci(*q)).unwrap();
    }
    Ok(vec![
        Artifact { name: "eigenpair.csv", text: eig },
        Artifact { name: "summary.csv", text: summary },
        Artifact { name: "flux.csv", text: fx },
    ])
}

fn run_coating_sweep(c: &RunConfig) -> ExecResult {
    let d = c.domain.build().map_err(at_config)?;
    if d.robin_faces().next().is_none() {
        return Err(at_config(cfg_err(
            "coating-sweep needs a domain with a nonempty Robin boundary",
        )));
    }
    let rho = match &c.coating.rho {
        ValueSpec::Constant(v) => ThicknessProfile::constant(&d, *v),
        ValueSpec::List(v) => ThicknessProfile::per_face(&d, v.clone()),
    }
    .map_err(at_config)?;
    let settings = c.settings();
    let scan = coating_sweep(&d, &rho, c.p, &c.coating.epsilons, c.coating.layer_cells, &settings)
        .map_err(at_run)?;

    let mu1 = scan.limit_value.expect("coating sweep always carries its limit");
    let mut sweep = String::from("epsilon,Lambda1,coating_mass,mu1,abs_gap\n");
    for ((eps, lam), mass) in scan.grid.iter().zip(&scan.values).zip(&scan.aux) {
        writeln!(
            sweep,
            "{},{},{},{},{}",
            sci(*eps),
            sci(*lam),
            sci(*mass),
            sci(mu1),
            sci((lam - mu1).abs())
        )
        .unwrap();
    }
    let rate = match scan.rate {
        Some(r) => format!("rate = {}\n", sci(r)),
        None => String::from("rate = none\n"),
    };
    Ok(vec![
        Artifact { name: "sweep.csv", text: sweep },
        Artifact { name: "rate.txt", text: rate },
    ])
}

fn run_derivative_check(c: &RunConfig) -> ExecResult {
    let d = c.domain.build().map_err(at_config)?;
    let h = c.h_field(&d).map_err(at_config)?;
    let n_gamma = d.robin_faces().count();
    let xi = match &c.derivative.xi {
        ValueSpec::Constant(v) => RobinField::PerFace(vec![*v; n_gamma]),
        ValueSpec::List(v) => RobinField::PerFace(v.clone()),
    };
    xi.validate_direction(&d).map_err(at_config)?;
    let settings = c.settings();

    let pair = principal_eigenpair(&d, c.p, &h, &settings).map_err(at_run)?;
    let lp_formula = lambda_derivative(&pair, &xi, &d).map_err(at_run)?;
    let sol = solve_linearized(&d, c.p, &h, &pair, &xi, c.derivative.delta_reg).map_err(at_run)?;

    let hm = h.face_means(&d);
    let xm = xi.face_means(&d);
    let t = c.derivative.fd_step;
    let shifted = |sign: f64| -> RobinField {
        RobinField::PerFace(hm.iter().zip(&xm).map(|(a, b)| a + sign * t * b).collect())
    };
    let lam_plus = principal_eigenpair(&d, c.p, &shifted(1.0), &settings)
        .map_err(at_run)?
        .lambda;
    let lam_minus = principal_eigenpair(&d, c.p, &shifted(-1.0), &settings)
        .map_err(at_run)?
        .lambda;
    let lp_fd = (lam_plus - lam_minus) / (2.0 * t);

    let mut csv = String::from("quantity,value\n");
    let rows = [
        ("lambda", pair.lambda),
        ("lambda_prime_formula", lp_formula),
        ("lambda_prime_saddle", sol.lambda_prime),
        ("formula_saddle_gap", (lp_formula - sol.lambda_prime).abs()),
        ("lambda_prime_fd", lp_fd),
        (
            "fd_rel_gap",
            (lp_formula - lp_fd).abs() / lp_formula.abs().max(1.0),
        ),
        ("constraint_residual", sol.constraint_residual),
        ("delta_used", sol.delta),
    ];
    for (name, v) in rows {
        writeln!(csv, "{name},{}", sci(v)).unwrap();
    }
    Ok(vec![Artifact { name: "derivative.csv", text: csv }])
}

fn run_reconstruct(c: &RunConfig) -> ExecResult {
    let d = c.domain.build().map_err(at_config)?;
    let r = &c.reconstruct;
    let h_init = r.h_init.broadcast(r.k);
    let param = RobinParameterization::new(r.robin_basis(), h_init.clone(), r.h_min)
        .map_err(at_config)?;
    let settings = c.settings();
    let noise = NoiseModel {
        flux_rel: r.noise_flux,
        lambda_rel: r.noise_lambda,
    };

    let (data, truth): (Measurement, Option<Vec<f64>>) = match &r.data_file {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| at_config(Error::Io(e)))?;
            let m = parse_measurement_csv(&text, &d, c.p).map_err(at_config)?;
            (m, None)
        }
        None => {
            let c_star = r.h_true.broadcast(r.k);
            let h_star = param
                .with_coefficients(c_star.clone())
                .and_then(|p| p.synthesize(&d))
                .map_err(at_config)?;
            let m = forward_measure(&d, c.p, &h_star, &settings).map_err(at_run)?;
            (m, Some(c_star))
        }
    };
    let observed = if noise.is_none() {
        data
    } else {
        noise.apply(&data, c.seed)
    };

    let rec = gauss_newton_reconstruct(
        &d,
        c.p,
        &observed,
        &param,
        &h_init,
        r.reg_weight,
        &noise,
        &settings,
    )
    .map_err(at_run)?;

    let mut chat = String::new();
    match &truth {
        Some(c_star) => {
            chat.push_str("index,c_hat,c_true\n");
            for (j, (a, b)) in rec.c_hat.iter().zip(c_star).enumerate() {
                writeln!(chat, "{j},{},{}", sci(*a), sci(*b)).unwrap();
            }
        }
        None => {
            chat.push_str("index,c_hat\n");
            for (j, a) in rec.c_hat.iter().enumerate() {
                writeln!(chat, "{j},{}", sci(*a)).unwrap();
            }
        }
    }
    let mut hist = String::from("iteration,residual\n");
    for (i, r) in rec.residual_history.iter().enumerate() {
        writeln!(hist, "{i},{}", sci(*r)).unwrap();
    }
    let final_residual = *rec.residual_history.last().unwrap();
    let mut summary = String::new();
    match &truth {
        Some(c_star) => {
            let num: f64 = rec
                .c_hat
                .iter()
                .zip(c_star)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let den: f64 = c_star.iter().map(|b| b * b).sum::<f64>().sqrt();
            let rel = if den > 0.0 { num / den } else { num };
            summary.push_str("converged,iterations,regularization_weight,final_residual,rel_error\n");
            writeln!(
                summary,
                "{},{},{},{},{}",
                rec.converged as u8,
                rec.iterations,
                sci(rec.regularization_weight),
                sci(final_residual),
                sci(rel)
            )
            .unwrap();
        }
        None => {
            summary.push_str("converged,iterations,regularization_weight,final_residual\n");
            writeln!(
                summary,
                "{},{},{},{}",
                rec.converged as u8,
                rec.iterations,
                sci(rec.regularization_weight),
                sci(final_residual)
            )
            .unwrap();
        }
    }
    Ok(vec![
        Artifact { name: "c_hat.csv", text: chat },
        Artifact { name: "history.csv", text: hist },
        Artifact { name: "summary.csv", text: summary },
    ])
}

fn run_stability_probe(c: &RunConfig) -> ExecResult {
    let d = c.domain.build().map_err(at_config)?;
    let h0 = c.h_field(&d).map_err(at_config)?;
    let r = &c.reconstruct;
    let param = RobinParameterization::new(r.robin_basis(), vec![1.0; r.k], r.h_min)
        .map_err(at_config)?;
    let settings = c.settings();
    let probe = stability_probe(
        &d,
        c.p,
        &h0,
        &param,
        &c.probe.radii,
        c.probe.m_ball,
        &settings,
        c.seed,
    )
    .map_err(at_run)?;

    let mut pairs = String::from("delta,error\n");
    for (delta, e) in &probe.pairs {
        writeln!(pairs, "{},{}", sci(*delta), sci(*e)).unwrap();
    }
    let mut summary = String::from("alpha_hat,c0,m_used,pairs\n");
    writeln!(
        summary,
        "{},{},{},{}",
        sci(probe.alpha_hat),
        sci(probe.c0),
        sci(probe.m_used),
        probe.pairs.len()
    )
    .unwrap();
    Ok(vec![
        Artifact { name: "probe.csv", text: pairs },
        Artifact { name: "summary.csv", text: summary },
    ])
}

// Candidate grids for the brute-force quotient scans; coarse on purpose.
// The knee grid includes a = 1, the identity profile, where the sup-norm
// quotient attains its minimum of exactly 1.
const KNEE_A: usize = 20;
const KNEE_B: usize = 30;
const STEP_A: usize = 20;

fn run_limits_scan(c: &RunConfig) -> ExecResult {
    let l = &c.limits;
    match l.mode {
        LimitsMode::P1 => {
            let scan = p_limit_scan_one(&l.rho_values, &l.p_grid).map_err(at_config)?;
            let mut csv = String::from("p,sup_deviation\n");
            for (p, v) in scan.grid.iter().zip(&scan.values) {
                writeln!(csv, "{},{}", sci(*p), sci(*v)).unwrap();
            }
            Ok(vec![Artifact { name: "scan.csv", text: csv }])
        }
        LimitsMode::PInf => {
            let class = p_limit_classify_inf(l.rho, &l.p_grid).map_err(at_config)?;
            let mut csv = String::from("p,h_value\n");
            for p in &l.p_grid {
                writeln!(csv, "{},{}", sci(*p), sci(l.rho.powf(-(p - 1.0)))).unwrap();
            }
            Ok(vec![
                Artifact { name: "scan.csv", text: csv },
                Artifact { name: "classification.txt", text: format!("{class}\n") },
            ])
        }
        LimitsMode::Continuity => {
            let d = c.domain.build().map_err(at_config)?;
            let h = c.h_field(&d).map_err(at_config)?;
            let settings = c.settings();
            let scan =
                p_continuity_scan(&d, &h, l.p0, &l.p_grid, &settings).map_err(at_run)?;
            let mut csv = String::from("p,lambda\n");
            for (p, v) in scan.grid.iter().zip(&scan.values) {
                writeln!(csv, "{},{}", sci(*p), sci(*v)).unwrap();
            }
            let mut jumps = String::new();
            match scan.max_adjacent_jump() {
                Some(j) => writeln!(jumps, "max_adjacent_jump = {}", sci(j)).unwrap(),
                None => writeln!(jumps, "max_adjacent_jump = none").unwrap(),
            }
            match scan.jump_anomaly() {
                Some(a) => writeln!(jumps, "jump_anomaly = {}", sci(a)).unwrap(),
                None => writeln!(jumps, "jump_anomaly = none").unwrap(),
            }
            Ok(vec![
                Artifact { name: "scan.csv", text: csv },
                Artifact { name: "jumps.txt", text: jumps },
            ])
        }
        LimitsMode::Linf => {
            let d = c.domain.build().map_err(at_config)?;
            let mut csv = String::from("a,b,quotient\n");
            let mut best = (f64::INFINITY, 0.0, 0.0);
            for ia in 1..=KNEE_A {
                let a = ia as f64 * 0.05;
                for ib in 1..=KNEE_B {
                    let b = ib as f64 * 0.05;
                    let u: Vec<f64> = (0..d.n_nodes())
                        .map(|i| {
                            let x = d.node(i)[0];
                            b * (x / a).min(1.0)
                        })
                        .collect();
                    let q = linf_rayleigh_eval(&d, &u).map_err(at_run)?;
                    writeln!(csv, "{},{},{}", sci(a), sci(b), sci(q)).unwrap();
                    if q < best.0 {
                        best = (q, a, b);
                    }
                }
            }
            let mut summary = String::from("min_quotient,argmin_a,argmin_b\n");
            writeln!(summary, "{},{},{}", sci(best.0), sci(best.1), sci(best.2)).unwrap();
            Ok(vec![
                Artifact { name: "knee.csv", text: csv },
                Artifact { name: "summary.csv", text: summary },
            ])
        }
        LimitsMode::Bv => {
            let d = c.domain.build().map_err(at_config)?;
            let mut csv = String::from("a,quotient\n");
            let mut best = (f64::INFINITY, 0.0);
            for ia in 0..STEP_A {
                let a = ia as f64 * 0.05;
                let cand = if ia == 0 {
                    BvCandidate::Step {
                        breakpoints: vec![],
                        values: vec![1.0],
                    }
                } else {
                    BvCandidate::Step {
                        breakpoints: vec![a],
                        values: vec![0.0, 1.0],
                    }
                };
                let q = bv_quotient_eval(&d, &cand).map_err(at_run)?;
                writeln!(csv, "{},{}", sci(a), sci(q)).unwrap();
                if q < best.0 {
                    best = (q, a);
                }
            }
            let mut summary = String::from("min_quotient,argmin_a\n");
            writeln!(summary, "{},{}", sci(best.0), sci(best.1)).unwrap();
            Ok(vec![
                Artifact { name: "steps.csv", text: csv },
                Artifact { name: "summary.csv", text: summary },
            ])
        }
    }
}

fn execute(c: &RunConfig) -> ExecResult {
    match c.subcommand {
        Subcommand::Solve => run_solve(c),
        Subcommand::CoatingSweep => run_coating_sweep(c),
        Subcommand::DerivativeCheck => run_derivative_check(c),
        Subcommand::Reconstruct => run_reconstruct(c),
        Subcommand::StabilityProbe => run_stability_probe(c),
        Subcommand::LimitsScan => run_limits_scan(c),
    }
}

fn sha256_hex(text: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        write!(out, "{b:02x}").unwrap();
    }
    out
}

fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn write_manifest(
    dir: &Path,
    c: &RunConfig,
    config_hash: &str,
    wall_ms: u128,
    failure: Option<&(Phase, Error)>,
) {
    let mut m = String::new();
    writeln!(m, "[manifest]").unwrap();
    writeln!(m, "package = {}", env!("CARGO_PKG_NAME")).unwrap();
    writeln!(m, "version = {}", env!("CARGO_PKG_VERSION")).unwrap();
    writeln!(m, "format = 1").unwrap();
    writeln!(m, "subcommand = {}", c.subcommand).unwrap();
    if c.subcommand == Subcommand::LimitsScan {
        writeln!(m, "mode = {}", c.limits.mode).unwrap();
    }
    writeln!(m, "seed = {}", c.seed).unwrap();
    writeln!(m, "threads = {}", c.threads).unwrap();
    writeln!(m, "config_sha256 = {config_hash}").unwrap();
    writeln!(m, "wall_ms = {wall_ms}").unwrap();
    writeln!(m, "timestamp_unix = {}", unix_now()).unwrap();
    match failure {
        None => writeln!(m, "status = ok").unwrap(),
        Some((phase, e)) => {
            writeln!(m, "status = error").unwrap();
            writeln!(m, "error_code = {}", e.code()).unwrap();
            let ph = match phase {
                Phase::Config => "config",
                Phase::Run => "run",
            };
            writeln!(m, "error_phase = {ph}").unwrap();
            writeln!(m, "error_message = {e}").unwrap();
        }
    }
    let _ = std::fs::write(dir.join("run_manifest.txt"), m);
}

/// Execute a resolved config: echo it, run the subcommand, write artifacts
/// and the manifest, and map the outcome to the exit code contract.
pub fn run(c: &RunConfig) -> i32 {
    let started = Instant::now();
    if c.threads > 0 {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(c.threads)
            .build_global();
    }
    if let Err(e) = std::fs::create_dir_all(&c.out) {
        eprintln!("cannot create output directory `{}`: {e}", c.out.display());
        return 3;
    }
    let resolved = emit_config(c);
    let config_hash = sha256_hex(&resolved);
    if let Err(e) = std::fs::write(c.out.join("resolved_config"), &resolved) {
        eprintln!("cannot write resolved_config: {e}");
        return 3;
    }

    let outcome = execute(c);
    let wall_ms = started.elapsed().as_millis();
    match outcome {
        Ok(artifacts) => {
            for a in &artifacts {
                if let Err(e) = std::fs::write(c.out.join(a.name), &a.text) {
                    eprintln!("cannot write {}: {e}", a.name);
                    let fail = (Phase::Run, Error::Io(e));
                    write_manifest(&c.out, c, &config_hash, wall_ms, Some(&fail));
                    return 2;
                }
            }
            write_manifest(&c.out, c, &config_hash, wall_ms, None);
            0
        }
        Err(fail) => {
            eprintln!("{}: {}", fail.1.code(), fail.1);
            write_manifest(&c.out, c, &config_hash, wall_ms, Some(&fail));
            match fail.0 {
                Phase::Config => 3,
                Phase::Run => 2,
            }
        }
    }
}

#[derive(clap::Parser)]
#[command(
    name = "probin",
    version,
    about = "Mixed Dirichlet-Robin p-Laplacian eigenvalue laboratory",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: CliCommand,
    /// Configuration file (flat key = value with [section] headers).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides [run] out.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// RNG seed; overrides [run] seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads, 0 = automatic; PROBIN_THREADS overrides this flag.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(clap::Subcommand)]
enum CliCommand {
    /// Principal eigenpair and Dirichlet boundary flux.
    Solve,
    /// Thin-coating sweep against the effective Robin limit.
    CoatingSweep,
    /// Eigenvalue derivative: boundary formula, saddle solve, finite differences.
    DerivativeCheck,
    /// Robin coefficient recovery from (lambda, flux) data.
    Reconstruct,
    /// Empirical stability exponent of the inverse map.
    StabilityProbe,
    /// Limit studies: p1 | pinf | continuity | linf | bv.
    LimitsScan {
        /// Which limit study to run.
        mode: String,
    },
}

/// Full command-line entry point; returns the process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match <Cli as clap::Parser>::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 3,
            };
            let _ = e.print();
            return code;
        }
    };

    let (subcommand, limits_mode) = match &cli.command {
        CliCommand::Solve => (Subcommand::Solve, None),
        CliCommand::CoatingSweep => (Subcommand::CoatingSweep, None),
        CliCommand::DerivativeCheck => (Subcommand::DerivativeCheck, None),
        CliCommand::Reconstruct => (Subcommand::Reconstruct, None),
        CliCommand::StabilityProbe => (Subcommand::StabilityProbe, None),
        CliCommand::LimitsScan { mode } => match mode.parse::<LimitsMode>() {
            Ok(m) => (Subcommand::LimitsScan, Some(m)),
            Err(e) => {
                eprintln!("{}: {e}", e.code());
                return 3;
            }
        },
    };

    let threads_env = match std::env::var("PROBIN_THREADS") {
        Err(_) => None,
        Ok(v) => match v.parse::<usize>() {
            Ok(t) => Some(t),
            Err(_) => {
                eprintln!("CONFIG_ERROR: PROBIN_THREADS must be an unsigned integer, got `{v}`");
                return 3;
            }
        },
    };

    let overrides = CliOverrides {
        subcommand: Some(subcommand),
        limits_mode,
        out: cli.out.clone(),
        seed: cli.seed,
        threads: threads_env.or(cli.threads),
    };

    let parsed = match &cli.config {
        Some(path) => parse_config(path, &overrides),
        None => parse_config_text("", Path::new("."), &overrides),
    };
    match parsed {
        Ok(rc) => run(&rc),
        Err(e) => {
            eprintln!("{}: {e}", e.code());
            3
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig> {
        parse_config_text(text, Path::new("."), &CliOverrides::default())
    }

    #[test]
    fn defaults_fill_and_echo_the_documented_values() {
        let rc = parse("[run]\nsubcommand = solve\n").unwrap();
        assert_eq!(rc.subcommand, Subcommand::Solve);
        assert_eq!(rc.seed, 0);
        assert_eq!(rc.threads, 0);
        assert_eq!(rc.p, 2.0);
        assert_eq!(rc.h, ValueSpec::Constant(1.0));
        assert_eq!(
            rc.domain,
            DomainSpec::Interval {
                cells: 256,
                gamma: GammaEnd::Right
            }
        );
        let echo = emit_config(&rc);
        assert!(echo.contains("tol_lambda = 1e-10"), "echo:\n{echo}");
        assert!(echo.contains("subcommand = solve"));
        assert!(echo.contains("delta_inner = none"));
    }

    #[test]
    fn emitted_config_reparses_to_the_same_value() {
        let texts = [
            "[run]\nsubcommand = solve\n",
            "[run]\nsubcommand = coating-sweep\nseed = 7\nthreads = 2\n\
             [domain]\nmode = interval\ncells = 64\ngamma = left\n\
             [problem]\np = 1.5\nh_values = 0.25, 1.75\n\
             [solver]\ndelta_inner = 1e-12\nmax_inner = 200\n\
             [coating]\nepsilons = 0.2,0.1,0.05\nrho_values = 0.5,2\nlayer_cells = 8\n",
            "[run]\nsubcommand = derivative-check\n\
             [domain]\nmode = radial\ncells = 96\nspace_dim = 3\nr_inner = 0.5\nr_outer = 2\npartition = inner\n\
             [derivative]\nxi_values = -1, 0.5\ndelta_reg = 0.01\nfd_step = 1e-5\n",
            "[run]\nsubcommand = reconstruct\n\
             [domain]\nmode = planar-annulus\nn_theta = 16\nn_radial = 2\n\
             [reconstruct]\nk = 3\nbasis = bspline\ndegree = 2\nh_true_values = 0.8,1.5,1.1\n\
             h_init = 0.5\nreg_weight = 1e-9\nnoise_flux = 0.01\n",
            "[run]\nsubcommand = stability-probe\n\
             [domain]\nmode = planar-square\ncells = 12\n\
             [probe]\nradii = 1e-3, 2e-3, 4e-3\nm_ball = 5\n",
            "[run]\nsubcommand = limits-scan\n[limits]\nmode = p1\nrho_values = 0.5, 2\n",
            "[run]\nsubcommand = limits-scan\n[limits]\nmode = pinf\nrho = 0.5\n",
            "[run]\nsubcommand = limits-scan\n[limits]\nmode = continuity\np0 = 2\n",
        ];
        for text in texts {
            let rc = parse(text).unwrap();
            let echo = emit_config(&rc);
            let rc2 = parse(&echo).unwrap_or_else(|e| panic!("reparse failed: {e}\n{echo}"));
            assert_eq!(rc, rc2, "round trip drifted for:\n{text}");
            // emission is stable, not merely equivalent
            assert_eq!(echo, emit_config(&rc2));
        }
    }

    #[test]
    fn range_violations_carry_the_constraint_text() {
        let err = parse("[run]\nsubcommand = solve\n[problem]\np = 0.5\n").unwrap_err();
        assert!(
            err.to_string().contains("p must lie in (1, \u{221e})"),
            "got: {err}"
        );
        let err = parse("[run]\nsubcommand = solve\n[problem]\nh = -1\n").unwrap_err();
        assert!(err.to_string().contains("h must be nonnegative"), "got: {err}");
        let err = parse("[run]\nsubcommand = solve\n[problem]\np = nan\n").unwrap_err();
        assert!(err.to_string().contains("must be finite"), "got: {err}");
        let err = parse("[run]\nsubcommand = solve\n[domain]\nmode = radial\nspace_dim = 70\n")
            .unwrap_err();
        assert!(err.to_string().contains("domain.space_dim"), "got: {err}");
    }

    #[test]
    fn unknown_keys_and_sections_are_named() {
        let err = parse("[run]\nsubcommand = solve\n[solver]\ntol = 1\n").unwrap_err();
        assert!(err.to_string().contains("`solver.tol`"), "got: {err}");
        let err = parse("[solve]\nx = 1\n").unwrap_err();
        assert!(err.to_string().contains("`solve`"), "got: {err}");
        let err = parse("[run]\nsubcommand = solve\nsubcommand = solve\n").unwrap_err();
        assert!(err.to_string().contains("duplicate key"), "got: {err}");
        let err = parse("just words\n").unwrap_err();
        assert!(err.to_string().contains("line 1"), "got: {err}");
    }

    #[test]
    fn exclusive_field_forms_are_enforced() {
        let err =
            parse("[run]\nsubcommand = solve\n[problem]\nh = 1\nh_values = 1,2\n").unwrap_err();
        assert!(err.to_string().contains("only one of"), "got: {err}");
        let err = parse("[run]\nsubcommand = reconstruct\n[reconstruct]\nk = 2\nh_true_values = 1\n")
            .unwrap_err();
        assert!(err.to_string().contains("exactly k = 2"), "got: {err}");
    }

    #[test]
    fn limits_grids_are_validated_per_mode() {
        let err = parse(
            "[run]\nsubcommand = limits-scan\n[limits]\nmode = p1\np_grid = 1.05,1.2\n",
        )
        .unwrap_err();
        assert!(err.to_string().contains("strictly decreasing"), "got: {err}");
        let err = parse(
            "[run]\nsubcommand = limits-scan\n[limits]\nmode = pinf\np_grid = 3,2\n",
        )
        .unwrap_err();
        assert!(err.to_string().contains("strictly increasing"), "got: {err}");
        let err = parse(
            "[run]\nsubcommand = limits-scan\n[limits]\nmode = continuity\np_grid = 1.5,1.6\np0 = 3\n",
        )
        .unwrap_err();
        assert!(err.to_string().contains("span"), "got: {err}");
        // the same grid is fine when the subcommand is not limits-scan
        parse("[run]\nsubcommand = solve\n[limits]\nmode = p1\np_grid = 1.05,1.2\n").unwrap();
    }

    #[test]
    fn reconstruction_exponent_gate_applies_at_parse_time() {
        let err = parse("[run]\nsubcommand = reconstruct\n[problem]\np = 1.5\n").unwrap_err();
        assert!(err.to_string().contains("p \u{2265} 2"), "got: {err}");
        parse("[run]\nsubcommand = solve\n[problem]\np = 1.5\n").unwrap();
    }

    #[test]
    fn flag_overrides_win_over_file_keys() {
        let cli = CliOverrides {
            subcommand: Some(Subcommand::Solve),
            limits_mode: None,
            out: Some(PathBuf::from("elsewhere")),
            seed: Some(9),
            threads: Some(4),
        };
        let rc = parse_config_text(
            "[run]\nsubcommand = reconstruct\nout = here\nseed = 1\nthreads = 1\n",
            Path::new("."),
            &cli,
        )
        .unwrap();
        assert_eq!(rc.subcommand, Subcommand::Solve);
        assert_eq!(rc.out, PathBuf::from("elsewhere"));
        assert_eq!(rc.seed, 9);
        assert_eq!(rc.threads, 4);
    }

    #[test]
    fn file_references_must_exist_at_parse_time() {
        let err = parse(
            "[run]\nsubcommand = solve\n[domain]\nmode = mesh-file\nmesh_file = no-such-mesh.txt\n",
        )
        .unwrap_err();
        assert!(err.to_string().contains("does not exist"), "got: {err}");
        let err = parse("[run]\nsubcommand = solve\n[problem]\nh_file = nowhere.txt\n").unwrap_err();
        assert!(err.to_string().contains("does not exist"), "got: {err}");
    }
}
