//! Command-line front end: INI run configurations, the `simulate`,
//! `converge`, `check` and `list-systems` commands, CSV/JSON output.
//!
//! Config grammar: `[section]` headers, `key = value` lines, `#` or `;`
//! comments, blank lines ignored. Lists are comma-separated. Every key must
//! appear in the schema of the selected system; anything else is rejected
//! with its line number.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::error::Error;
use crate::integrator::{run_trajectory, JacobianMode, NewtonSettings, StepState, TrajectoryRecord};
use crate::liegroup::GroupTag;
use crate::model::HoSystemModel;
use crate::systems::{
    beanie_control_initial_state, beanie_first_order_initial_state, build_beanie_model, build_electron_model,
    electron_initial_state, omega_from_group, BeanieParams, BeaniePotential, BeanieVariant, ElectronParams,
    ElectronPotential, PeriodicSpline,
};
use crate::verify::{
    beanie_first_order_convergence, derivative_check, electron_convergence, kkt_oracle, kkt_residual,
    monitor_trajectory, random_windows, regularity_sweep, ConservationReport, ConvergenceReport, ErrorNorm,
    KktBoundary, KktPoint, Monitor,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_STEP_FAILURE: i32 = 2;
pub const EXIT_BAND: i32 = 3;

// ------------------------------------------------------------------ errors

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub key: Option<String>,
    pub message: String,
}

impl ConfigError {
    fn at(line: usize, key: Option<&str>, message: impl Into<String>) -> Self {
        ConfigError {
            line: Some(line),
            key: key.map(str::to_string),
            message: message.into(),
        }
    }

    fn key(key: &str, message: impl Into<String>) -> Self {
        ConfigError {
            line: None,
            key: Some(key.to_string()),
            message: message.into(),
        }
    }

    fn plain(message: impl Into<String>) -> Self {
        ConfigError {
            line: None,
            key: None,
            message: message.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config error")?;
        if let Some(l) = self.line {
            write!(f, " at line {l}")?;
        }
        if let Some(k) = &self.key {
            write!(f, " (key `{k}`)")?;
        }
        write!(f, ": {}", self.message)
    }
}

impl std::error::Error for ConfigError {}

// --------------------------------------------------------------- INI layer

#[derive(Debug, Clone, PartialEq)]
pub struct IniEntry {
    pub section: String,
    pub key: String,
    pub value: String,
    pub line: usize,
}

pub fn parse_ini(text: &str) -> Result<Vec<IniEntry>, ConfigError> {
    let mut section: Option<String> = None;
    let mut out: Vec<IniEntry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let s = raw.trim();
        if s.is_empty() || s.starts_with('#') || s.starts_with(';') {
            continue;
        }
        if let Some(rest) = s.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| ConfigError::at(line, None, "section header is missing `]`"))?
                .trim();
            if name.is_empty() {
                return Err(ConfigError::at(line, None, "empty section name"));
            }
            section = Some(name.to_string());
            continue;
        }
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| ConfigError::at(line, None, format!("expected `key = value`, found `{s}`")))?;
        let key = k.trim();
        if key.is_empty() {
            return Err(ConfigError::at(line, None, "empty key"));
        }
        let sec = section
            .clone()
            .ok_or_else(|| ConfigError::at(line, Some(key), "key appears before any [section] header"))?;
        if let Some(prev) = out.iter().find(|e| e.section == sec && e.key == key) {
            return Err(ConfigError::at(
                line,
                Some(key),
                format!("duplicate key in [{sec}] (first set at line {})", prev.line),
            ));
        }
        out.push(IniEntry {
            section: sec,
            key: key.to_string(),
            value: v.trim().to_string(),
            line,
        });
    }
    Ok(out)
}

// ------------------------------------------------------------------ schema

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SystemKind {
    Electron,
    BeanieFirstOrder,
    BeanieOptimalControl,
}

impl SystemKind {
    pub const ALL: [SystemKind; 3] = [
        SystemKind::Electron,
        SystemKind::BeanieFirstOrder,
        SystemKind::BeanieOptimalControl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SystemKind::Electron => "electron",
            SystemKind::BeanieFirstOrder => "beanie-first-order",
            SystemKind::BeanieOptimalControl => "beanie-optimal-control",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    fn summary(self) -> &'static str {
        match self {
            SystemKind::Electron => {
                "charged particle in a constant magnetic field; k = 2, shape R^3, SO(2) charge slot, 1 constraint"
            }
            SystemKind::BeanieFirstOrder => {
                "two planar rigid bodies on a common pivot, free flow; k = 1, shape S^1, group SE(2), no constraints"
            }
            SystemKind::BeanieOptimalControl => {
                "two planar rigid bodies, optimal control of the relative angle; k = 2, shape S^1, group SE(2), 3 constraints"
            }
        }
    }

    fn is_beanie(self) -> bool {
        self != SystemKind::Electron
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct KeySpec {
    pub section: &'static str,
    pub key: &'static str,
    pub required: bool,
    pub help: &'static str,
}

const fn req(section: &'static str, key: &'static str, help: &'static str) -> KeySpec {
    KeySpec {
        section,
        key,
        required: true,
        help,
    }
}

const fn opt(section: &'static str, key: &'static str, help: &'static str) -> KeySpec {
    KeySpec {
        section,
        key,
        required: false,
        help,
    }
}

const COMMON_KEYS: &[KeySpec] = &[
    req("system", "name", "system name"),
    req("system", "h", "time step, > 0"),
    req("system", "steps", "number of steps N, >= 1"),
    opt("newton", "tolerance", "scaled sup-norm residual tolerance (default 1e-10)"),
    opt("newton", "max_iterations", "Newton iterations per step (default 50)"),
    opt("newton", "damping", "initial step length in (0, 1] (default 1)"),
    opt("newton", "jacobian", "assembled | finite-difference (default assembled)"),
    opt("output", "trajectory", "trajectory CSV path (overridden by --out)"),
    opt("output", "report", "JSON run report path (default <trajectory>.report.json)"),
    opt("output", "monitors", "true | false: include conservation monitors in the report (default true)"),
    opt("converge", "h_list", "comma-separated step sizes, strictly decreasing"),
    opt("converge", "band", "accepted fitted order range lo, hi (default 0.8, 1.2)"),
    opt("converge", "horizon", "final time T (default 1)"),
    opt("converge", "oracle_factor", "RK4 oracle refinement relative to the finest h, >= 100 (default 100)"),
    opt("converge", "norm", "sup | rms (default sup)"),
    opt("check", "windows", "random windows for the derivative check (default 50)"),
    opt("check", "tolerance", "relative derivative tolerance (default 1e-5)"),
    opt("check", "kkt_starts", "KKT oracle starts (default 4)"),
];

const ELECTRON_KEYS: &[KeySpec] = &[
    opt("params", "mass", "particle mass m > 0 (default 1)"),
    opt("params", "charge", "charge e (default 1)"),
    opt("params", "light_speed", "c > 0 (default 1); |e/c| < pi"),
    opt("params", "field", "magnetic field B as bx, by, bz (default 0, 0, 1)"),
    opt("params", "potential", "quadratic | none (default quadratic)"),
    req("initial", "x0", "initial position, 3 values"),
    req("initial", "v0", "initial velocity, 3 values"),
    req("initial", "a0", "initial acceleration, 3 values"),
    req("initial", "j0", "initial jerk, 3 values"),
    opt("initial", "lambda0", "constant multiplier value (default 0)"),
];

const BEANIE_PARAM_KEYS: &[KeySpec] = &[
    opt("params", "mass", "total mass m > 0 (default 1)"),
    opt("params", "i1", "inertia I1 > 0 (default 1)"),
    opt("params", "i2", "inertia I2 > 0 (default 0.5)"),
    opt("params", "potential", "zero | cosine | tabulated (default cosine)"),
    opt("params", "v0", "well depth of the cosine potential (default 1)"),
    opt("params", "table", "equally spaced samples of V over one period (tabulated potential)"),
    opt("params", "epsilon_sign", "factor on the constraint group gradients (default 1)"),
];

const BEANIE_FIRST_KEYS: &[KeySpec] = &[
    req("initial", "psi0", "initial relative angle"),
    req("initial", "psi_dot0", "initial relative angle rate"),
    req("initial", "omega0", "initial body rates Omega1, Omega2, Omega3"),
];

const BEANIE_CONTROL_KEYS: &[KeySpec] = &[
    req("initial", "psi", "first four relative angle samples"),
    req("initial", "omega0", "initial body rates Omega1, Omega2, Omega3"),
    opt("initial", "lambda0", "first multiplier vector, 3 values (default 0)"),
    opt("initial", "lambda1", "second multiplier vector, 3 values (default 0)"),
];

pub fn schema(kind: SystemKind) -> Vec<KeySpec> {
    let mut v = COMMON_KEYS.to_vec();
    match kind {
        SystemKind::Electron => v.extend_from_slice(ELECTRON_KEYS),
        SystemKind::BeanieFirstOrder => {
            v.extend_from_slice(BEANIE_PARAM_KEYS);
            v.extend_from_slice(BEANIE_FIRST_KEYS);
        }
        SystemKind::BeanieOptimalControl => {
            v.extend_from_slice(BEANIE_PARAM_KEYS);
            v.extend_from_slice(BEANIE_CONTROL_KEYS);
        }
    }
    v
}

// ------------------------------------------------------------- run config

#[derive(Debug, Clone)]
pub enum SystemParams {
    Electron(ElectronParams),
    Beanie(BeanieParams),
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitialData {
    /// Position and its first three derivatives, bootstrapped with RK4.
    Electron { state: [f64; 12], lambda0: f64 },
    BeanieFirstOrder { psi0: f64, psi_dot0: f64, omega0: [f64; 3] },
    BeanieControl { psi: [f64; 4], omega0: [f64; 3], lambdas: [[f64; 3]; 2] },
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputConfig {
    pub trajectory: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub monitors: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergeConfig {
    pub h_list: Option<Vec<f64>>,
    pub band: (f64, f64),
    pub horizon: f64,
    pub oracle_factor: usize,
    pub norm: ErrorNorm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckConfig {
    pub windows: usize,
    pub tolerance: f64,
    pub kkt_starts: usize,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub system: SystemKind,
    pub h: f64,
    pub steps: usize,
    pub params: SystemParams,
    pub initial: InitialData,
    pub newton: NewtonSettings,
    pub output: OutputConfig,
    pub converge: ConvergeConfig,
    pub check: CheckConfig,
}

struct Lookup<'a> {
    entries: &'a [IniEntry],
}

impl<'a> Lookup<'a> {
    fn get(&self, section: &str, key: &str) -> Option<&'a IniEntry> {
        self.entries.iter().find(|e| e.section == section && e.key == key)
    }

    fn f64_or(&self, section: &str, key: &str, default: f64) -> Result<f64, ConfigError> {
        match self.get(section, key) {
            Some(e) => parse_f64(e),
            None => Ok(default),
        }
    }

    fn f64_req(&self, section: &str, key: &str) -> Result<f64, ConfigError> {
        parse_f64(self.required(section, key)?)
    }

    fn list_or<const N: usize>(&self, section: &str, key: &str, default: [f64; N]) -> Result<[f64; N], ConfigError> {
        match self.get(section, key) {
            Some(e) => parse_array(e),
            None => Ok(default),
        }
    }

    fn list_req<const N: usize>(&self, section: &str, key: &str) -> Result<[f64; N], ConfigError> {
        parse_array(self.required(section, key)?)
    }

    fn usize_or(&self, section: &str, key: &str, default: usize) -> Result<usize, ConfigError> {
        match self.get(section, key) {
            Some(e) => parse_usize(e),
            None => Ok(default),
        }
    }

    fn required(&self, section: &str, key: &str) -> Result<&'a IniEntry, ConfigError> {
        self.get(section, key)
            .ok_or_else(|| ConfigError::key(key, format!("required key missing from [{section}]")))
    }
}

fn parse_f64(e: &IniEntry) -> Result<f64, ConfigError> {
    let v: f64 = e
        .value
        .parse()
        .map_err(|_| ConfigError::at(e.line, Some(&e.key), format!("expected a number, found `{}`", e.value)))?;
    if !v.is_finite() {
        return Err(ConfigError::at(e.line, Some(&e.key), "value must be finite"));
    }
    Ok(v)
}

fn parse_usize(e: &IniEntry) -> Result<usize, ConfigError> {
    e.value.parse().map_err(|_| {
        ConfigError::at(
            e.line,
            Some(&e.key),
            format!("expected a non-negative integer, found `{}`", e.value),
        )
    })
}

fn parse_list(e: &IniEntry) -> Result<Vec<f64>, ConfigError> {
    e.value
        .split(',')
        .map(|s| {
            let s = s.trim();
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| ConfigError::at(e.line, Some(&e.key), format!("bad list entry `{s}`")))
        })
        .collect()
}

fn parse_array<const N: usize>(e: &IniEntry) -> Result<[f64; N], ConfigError> {
    let v = parse_list(e)?;
    v.clone()
        .try_into()
        .map_err(|_| ConfigError::at(e.line, Some(&e.key), format!("expected {N} values, found {}", v.len())))
}

fn parse_bool(e: &IniEntry) -> Result<bool, ConfigError> {
    match e.value.as_str() {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        other => Err(ConfigError::at(e.line, Some(&e.key), format!("expected true or false, found `{other}`"))),
    }
}

/// Turns a parameter error from a constructor into a config error on `key`.
fn param_error(lookup: &Lookup, section: &str, key: &str, err: Error) -> ConfigError {
    match lookup.get(section, key) {
        Some(e) => ConfigError::at(e.line, Some(key), err.to_string()),
        None => ConfigError::key(key, err.to_string()),
    }
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path)
            .map_err(|e| ConfigError::plain(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let entries = parse_ini(text)?;
        let lk = Lookup { entries: &entries };
        let name_entry = lk.required("system", "name")?;
        let system = SystemKind::from_name(&name_entry.value).ok_or_else(|| {
            ConfigError::at(
                name_entry.line,
                Some("name"),
                format!(
                    "unknown system `{}`; known: {}",
                    name_entry.value,
                    SystemKind::ALL.map(|k| k.name()).join(", ")
                ),
            )
        })?;
        let spec = schema(system);
        for e in &entries {
            if !spec.iter().any(|s| s.section == e.section && s.key == e.key) {
                return Err(ConfigError::at(
                    e.line,
                    Some(&e.key),
                    format!("unknown key in [{}] for system {}", e.section, system.name()),
                ));
            }
        }
        for s in spec.iter().filter(|s| s.required) {
            lk.required(s.section, s.key)?;
        }

        let h_entry = lk.required("system", "h")?;
        let h = parse_f64(h_entry)?;
        if h <= 0.0 {
            return Err(ConfigError::at(h_entry.line, Some("h"), format!("time step must be > 0, got {h}")));
        }
        let steps_entry = lk.required("system", "steps")?;
        let steps = parse_usize(steps_entry)?;
        if steps == 0 {
            return Err(ConfigError::at(steps_entry.line, Some("steps"), "need at least one step"));
        }

        let (params, initial) = match system {
            SystemKind::Electron => {
                let d = ElectronParams::default();
                let potential = match lk.get("params", "potential") {
                    None => d.potential,
                    Some(e) => match e.value.as_str() {
                        "quadratic" => ElectronPotential::Quadratic,
                        "none" => ElectronPotential::None,
                        other => {
                            return Err(ConfigError::at(
                                e.line,
                                Some("potential"),
                                format!("expected quadratic or none, found `{other}`"),
                            ))
                        }
                    },
                };
                let p = ElectronParams {
                    mass: lk.f64_or("params", "mass", d.mass)?,
                    charge: lk.f64_or("params", "charge", d.charge)?,
                    light_speed: lk.f64_or("params", "light_speed", d.light_speed)?,
                    field: lk.list_or("params", "field", d.field)?,
                    potential,
                };
                p.validate().map_err(|e| {
                    let key = match &e {
                        Error::Parameter(m) if m.contains("mass") => "mass",
                        Error::Parameter(m) if m.contains("speed") => "light_speed",
                        _ => "charge",
                    };
                    param_error(&lk, "params", key, e)
                })?;
                let x0: [f64; 3] = lk.list_req("initial", "x0")?;
                let v0: [f64; 3] = lk.list_req("initial", "v0")?;
                let a0: [f64; 3] = lk.list_req("initial", "a0")?;
                let j0: [f64; 3] = lk.list_req("initial", "j0")?;
                let mut state = [0.0; 12];
                for (i, block) in [x0, v0, a0, j0].iter().enumerate() {
                    state[3 * i..3 * i + 3].copy_from_slice(block);
                }
                (
                    SystemParams::Electron(p),
                    InitialData::Electron {
                        state,
                        lambda0: lk.f64_or("initial", "lambda0", 0.0)?,
                    },
                )
            }
            _ => {
                let d = BeanieParams::default();
                let potential = match lk.get("params", "potential").map(|e| (e, e.value.as_str())) {
                    None | Some((_, "cosine")) => BeaniePotential::Cosine {
                        v0: lk.f64_or("params", "v0", 1.0)?,
                    },
                    Some((_, "zero")) => BeaniePotential::Zero,
                    Some((_, "tabulated")) => {
                        let t = lk.required("params", "table")?;
                        let spline = PeriodicSpline::new(parse_list(t)?)
                            .map_err(|e| ConfigError::at(t.line, Some("table"), e.to_string()))?;
                        BeaniePotential::Tabulated(spline)
                    }
                    Some((e, other)) => {
                        return Err(ConfigError::at(
                            e.line,
                            Some("potential"),
                            format!("expected zero, cosine or tabulated, found `{other}`"),
                        ))
                    }
                };
                let p = BeanieParams {
                    mass: lk.f64_or("params", "mass", d.mass)?,
                    i1: lk.f64_or("params", "i1", d.i1)?,
                    i2: lk.f64_or("params", "i2", d.i2)?,
                    potential,
                    epsilon_sign: lk.f64_or("params", "epsilon_sign", d.epsilon_sign)?,
                };
                p.validate().map_err(|e| {
                    let key = match &e {
                        Error::Parameter(m) if m.contains("mass") => "mass",
                        Error::Parameter(m) if m.contains("I1") || m.contains("i1") => "i1",
                        Error::Parameter(m) if m.contains("I2") || m.contains("i2") => "i2",
                        _ => "potential",
                    };
                    param_error(&lk, "params", key, e)
                })?;
                let initial = if system == SystemKind::BeanieFirstOrder {
                    InitialData::BeanieFirstOrder {
                        psi0: lk.f64_req("initial", "psi0")?,
                        psi_dot0: lk.f64_req("initial", "psi_dot0")?,
                        omega0: lk.list_req("initial", "omega0")?,
                    }
                } else {
                    InitialData::BeanieControl {
                        psi: lk.list_req("initial", "psi")?,
                        omega0: lk.list_req("initial", "omega0")?,
                        lambdas: [
                            lk.list_or("initial", "lambda0", [0.0; 3])?,
                            lk.list_or("initial", "lambda1", [0.0; 3])?,
                        ],
                    }
                };
                (SystemParams::Beanie(p), initial)
            }
        };

        let dn = NewtonSettings::default();
        let jacobian = match lk.get("newton", "jacobian") {
            None => dn.jacobian,
            Some(e) => match e.value.as_str() {
                "assembled" => JacobianMode::Assembled,
                "finite-difference" => JacobianMode::FiniteDifference,
                other => {
                    return Err(ConfigError::at(
                        e.line,
                        Some("jacobian"),
                        format!("expected assembled or finite-difference, found `{other}`"),
                    ))
                }
            },
        };
        let newton = NewtonSettings {
            tolerance: lk.f64_or("newton", "tolerance", dn.tolerance)?,
            max_iterations: lk.usize_or("newton", "max_iterations", dn.max_iterations)?,
            damping: lk.f64_or("newton", "damping", dn.damping)?,
            jacobian,
        };
        newton.validate().map_err(|e| {
            let key = match &e {
                Error::Parameter(m) if m.contains("tolerance") => "tolerance",
                Error::Parameter(m) if m.contains("max_iterations") => "max_iterations",
                _ => "damping",
            };
            param_error(&lk, "newton", key, e)
        })?;

        let output = OutputConfig {
            trajectory: lk.get("output", "trajectory").map(|e| PathBuf::from(&e.value)),
            report: lk.get("output", "report").map(|e| PathBuf::from(&e.value)),
            monitors: match lk.get("output", "monitors") {
                Some(e) => parse_bool(e)?,
                None => true,
            },
        };

        let band = match lk.get("converge", "band") {
            Some(e) => {
                let [lo, hi] = parse_array::<2>(e)?;
                if lo > hi {
                    return Err(ConfigError::at(e.line, Some("band"), "band needs lo <= hi"));
                }
                (lo, hi)
            }
            None => (0.8, 1.2),
        };
        let norm = match lk.get("converge", "norm") {
            None => ErrorNorm::Sup,
            Some(e) => match e.value.as_str() {
                "sup" => ErrorNorm::Sup,
                "rms" => ErrorNorm::Rms,
                other => {
                    return Err(ConfigError::at(e.line, Some("norm"), format!("expected sup or rms, found `{other}`")))
                }
            },
        };
        let horizon = lk.f64_or("converge", "horizon", 1.0)?;
        if horizon <= 0.0 {
            let line = lk.get("converge", "horizon").map(|e| e.line).unwrap_or(0);
            return Err(ConfigError::at(line, Some("horizon"), "horizon must be > 0"));
        }
        let converge = ConvergeConfig {
            h_list: lk.get("converge", "h_list").map(parse_list).transpose()?,
            band,
            horizon,
            oracle_factor: lk.usize_or("converge", "oracle_factor", 100)?,
            norm,
        };
        let check = CheckConfig {
            windows: lk.usize_or("check", "windows", 50)?,
            tolerance: lk.f64_or("check", "tolerance", 1e-5)?,
            kkt_starts: lk.usize_or("check", "kkt_starts", 4)?,
        };

        Ok(RunConfig {
            system,
            h,
            steps,
            params,
            initial,
            newton,
            output,
            converge,
            check,
        })
    }

    pub fn model(&self) -> crate::Result<HoSystemModel> {
        self.model_at(self.h)
    }

    fn model_at(&self, h: f64) -> crate::Result<HoSystemModel> {
        match (&self.params, self.system) {
            (SystemParams::Electron(p), _) => build_electron_model(p, h),
            (SystemParams::Beanie(p), SystemKind::BeanieFirstOrder) => {
                build_beanie_model(p, h, BeanieVariant::FirstOrder)
            }
            (SystemParams::Beanie(p), _) => build_beanie_model(p, h, BeanieVariant::OptimalControl),
        }
    }

    pub fn initial_state(&self) -> crate::Result<StepState> {
        match (&self.params, &self.initial) {
            (SystemParams::Electron(p), InitialData::Electron { state, lambda0 }) => {
                electron_initial_state(p, self.h, state, *lambda0)
            }
            (SystemParams::Beanie(p), InitialData::BeanieFirstOrder { psi0, psi_dot0, omega0 }) => {
                beanie_first_order_initial_state(p, self.h, *psi0, *psi_dot0, *omega0)
            }
            (SystemParams::Beanie(p), InitialData::BeanieControl { psi, omega0, lambdas }) => {
                beanie_control_initial_state(p, self.h, *psi, *omega0, *lambdas)
            }
            _ => Err(Error::Inconsistent("initial data does not match the system".into())),
        }
    }

    /// Group coordinates written to the trajectory file: the charge slot for
    /// the electron, body rates `Omega` for the beanie.
    fn group_columns(&self, rec: &TrajectoryRecord, n: usize) -> Vec<f64> {
        let w = &rec.windows[n];
        match &self.params {
            SystemParams::Beanie(p) if w.tag() == GroupTag::Se2 => {
                let dpsi = w.shape(1)[0] - w.shape(0)[0];
                omega_from_group(w.group(0), dpsi, p.coupling(), self.h).to_vec()
            }
            _ => vec![w.group(0).angle()],
        }
    }
}

// ----------------------------------------------------------------- output

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::InvalidInput, "output path has no file name"))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })
}

fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// One row per solved step. Row `n` holds the leading samples of window
/// `a_n`: shape point `p_n`, group coordinates of `g~_n`, multiplier
/// `lambda_n`, and the Newton report of the step that produced `a_n`.
pub fn trajectory_csv(cfg: &RunConfig, model: &HoSystemModel, rec: &TrajectoryRecord) -> String {
    let r = model.shape_dim();
    let d = cfg.group_columns(rec, 0).len();
    let m = model.n_constraints();
    let mut cols = vec!["n".to_string(), "t".to_string()];
    cols.extend((1..=r).map(|i| format!("p_{i}")));
    cols.extend((1..=d).map(|i| format!("omega_{i}")));
    cols.extend((1..=m).map(|i| format!("lambda_{i}")));
    cols.extend(["residual", "newton_iters", "cond_estimate"].map(String::from));
    let mut out = cols.join(",");
    out.push('\n');
    for rep in &rec.reports {
        let n = rep.step;
        let w = &rec.windows[n];
        let mut row = vec![n.to_string(), fmt_float(n as f64 * cfg.h)];
        row.extend(w.shape(0).iter().map(|v| fmt_float(*v)));
        row.extend(cfg.group_columns(rec, n).into_iter().map(fmt_float));
        row.extend(rec.lambdas[n].iter().map(|v| fmt_float(*v)));
        row.push(fmt_float(rep.residual));
        row.push(rep.iterations.to_string());
        row.push(fmt_float(rep.cond_estimate));
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

#[derive(Debug, Serialize)]
struct FailureSummary {
    step: usize,
    iterations: usize,
    residual: f64,
    message: String,
}

#[derive(Debug, Serialize)]
struct RunReport {
    system: &'static str,
    h: f64,
    steps_requested: usize,
    steps_completed: usize,
    max_residual: f64,
    max_cond_estimate: f64,
    total_newton_iterations: usize,
    warnings: Vec<String>,
    failure: Option<FailureSummary>,
    monitors: Option<ConservationReport>,
}

fn run_report(cfg: &RunConfig, model: &HoSystemModel, rec: &TrajectoryRecord) -> RunReport {
    let monitors = if cfg.output.monitors {
        monitor_trajectory(model, rec).ok()
    } else {
        None
    };
    RunReport {
        system: cfg.system.name(),
        h: cfg.h,
        steps_requested: cfg.steps,
        steps_completed: rec.reports.len(),
        max_residual: rec.reports.iter().map(|r| r.residual).fold(0.0, f64::max),
        max_cond_estimate: rec.reports.iter().map(|r| r.cond_estimate).fold(0.0, f64::max),
        total_newton_iterations: rec.reports.iter().map(|r| r.iterations).sum(),
        warnings: rec.reports.iter().filter_map(|r| r.warning.clone()).collect(),
        failure: rec.failure.as_ref().map(|f| FailureSummary {
            step: f.report.step,
            iterations: f.report.iterations,
            residual: f.report.residual,
            message: f.error.to_string(),
        }),
        monitors,
    }
}

// --------------------------------------------------------------- commands

#[derive(Debug, Parser)]
#[command(name = "lpvi", version, about = "Variational integrators for constrained higher-order reduced systems")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// March a trajectory and write it as CSV, plus a JSON run report.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Trajectory CSV path; stdout if neither this nor [output] trajectory is set.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Convergence study against the continuous RK4 oracle.
    Converge {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides [converge] h_list, e.g. `0.04,0.02,0.01`.
        #[arg(long, value_delimiter = ',')]
        h_list: Option<Vec<f64>>,
    },
    /// Derivative, regularity, monitor and (for short runs) KKT checks.
    Check {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        json: bool,
        /// Seed for random windows and KKT starts.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the available systems with their configuration keys.
    ListSystems {
        #[arg(long)]
        json: bool,
    },
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                write!(err, "{text}")
            } else {
                write!(out, "{text}")
            };
            return code;
        }
    };
    let result = match cli.command {
        Command::Simulate { config, out: path } => load(&config).and_then(|c| cmd_simulate(&c, path.as_deref(), out, err)),
        Command::Converge {
            config,
            out: path,
            h_list,
        } => load(&config).and_then(|c| cmd_converge(&c, h_list, path.as_deref(), out, err)),
        Command::Check {
            config,
            out: path,
            json,
            seed,
        } => load(&config).and_then(|c| cmd_check(&c, seed, json, path.as_deref(), out, err)),
        Command::ListSystems { json } => cmd_list_systems(json, out),
    };
    match result {
        Ok(code) => code,
        Err(CliError::Config(e)) => {
            let _ = writeln!(err, "{e}");
            EXIT_CONFIG
        }
        Err(CliError::Io(e)) => {
            let _ = writeln!(err, "output error: {e}");
            EXIT_CONFIG
        }
    }
}

#[derive(Debug)]
enum CliError {
    Config(ConfigError),
    Io(std::io::Error),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e)
    }
}

fn load(path: &Path) -> Result<RunConfig, CliError> {
    Ok(RunConfig::from_path(path)?)
}

/// Model construction and starting data are part of the configuration.
fn setup(cfg: &RunConfig) -> Result<(HoSystemModel, StepState), CliError> {
    let model = cfg.model().map_err(|e| ConfigError::plain(format!("cannot build model: {e}")))?;
    let state = cfg
        .initial_state()
        .map_err(|e| ConfigError::plain(format!("cannot build initial windows from [initial]: {e}")))?;
    Ok((model, state))
}

fn march(cfg: &RunConfig, model: &HoSystemModel, state: &StepState) -> Result<TrajectoryRecord, CliError> {
    run_trajectory(model, state, cfg.steps, &cfg.newton)
        .map_err(|e| CliError::Config(ConfigError::plain(format!("cannot start the run: {e}"))))
}

fn emit(path: Option<&Path>, text: &str, out: &mut dyn Write) -> Result<(), CliError> {
    match path {
        Some(p) => write_atomic(p, text.as_bytes())?,
        None => out.write_all(text.as_bytes())?,
    }
    Ok(())
}

fn report_failure(rec: &TrajectoryRecord, err: &mut dyn Write) {
    if let Some(f) = &rec.failure {
        let _ = writeln!(
            err,
            "step failure at step {} after {} Newton iterations (residual {:.3e}): {}",
            f.report.step, f.report.iterations, f.report.residual, f.error
        );
    }
}

fn cmd_simulate(
    cfg: &RunConfig,
    out_path: Option<&Path>,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<i32, CliError> {
    let (model, state) = setup(cfg)?;
    let rec = march(cfg, &model, &state)?;
    let csv = trajectory_csv(cfg, &model, &rec);
    let traj = out_path.map(Path::to_path_buf).or_else(|| cfg.output.trajectory.clone());
    emit(traj.as_deref(), &csv, out)?;
    let report_path = cfg.output.report.clone().or_else(|| {
        traj.as_ref().map(|p| {
            let mut s = p.as_os_str().to_owned();
            s.push(".report.json");
            PathBuf::from(s)
        })
    });
    if let Some(rp) = report_path {
        let report = run_report(cfg, &model, &rec);
        let text = serde_json::to_string_pretty(&report).expect("report serializes");
        write_atomic(&rp, text.as_bytes())?;
    }
    for w in rec.reports.iter().filter_map(|r| r.warning.as_ref()) {
        let _ = writeln!(err, "warning: {w}");
    }
    if rec.completed() {
        Ok(EXIT_OK)
    } else {
        report_failure(&rec, err);
        Ok(EXIT_STEP_FAILURE)
    }
}

fn cmd_converge(
    cfg: &RunConfig,
    h_override: Option<Vec<f64>>,
    out_path: Option<&Path>,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<i32, CliError> {
    let h_list = h_override
        .or_else(|| cfg.converge.h_list.clone())
        .ok_or_else(|| ConfigError::key("h_list", "no step sizes: set [converge] h_list or pass --h-list"))?;
    if h_list.len() < 2 {
        return Err(ConfigError::key("h_list", format!("need at least 2 step sizes, got {}", h_list.len())).into());
    }
    if h_list.iter().any(|h| !(*h > 0.0)) {
        return Err(ConfigError::key("h_list", "step sizes must be > 0").into());
    }
    let c = &cfg.converge;
    let study = match (&cfg.params, &cfg.initial) {
        (SystemParams::Electron(p), InitialData::Electron { state, .. }) => {
            electron_convergence(p, state, &h_list, c.horizon, &cfg.newton, c.oracle_factor, c.norm)
        }
        (SystemParams::Beanie(p), InitialData::BeanieFirstOrder { psi0, psi_dot0, omega0 }) => {
            beanie_first_order_convergence(p, *psi0, *psi_dot0, *omega0, &h_list, c.horizon, &cfg.newton, c.oracle_factor)
        }
        _ => {
            return Err(ConfigError::key(
                "name",
                format!("no continuous oracle is available for {}", cfg.system.name()),
            )
            .into())
        }
    };
    let report: ConvergenceReport = study.map_err(|e| ConfigError::key("h_list", e.to_string()))?;
    let text = serde_json::to_string_pretty(&json!({
        "system": cfg.system.name(),
        "band": [c.band.0, c.band.1],
        "within_band": report.within(c.band),
        "report": report,
    }))
    .expect("report serializes");
    emit(out_path, &(text + "\n"), out)?;
    if let Some(flag) = &report.flag {
        let _ = writeln!(err, "convergence study flagged: {flag}");
        return Ok(EXIT_STEP_FAILURE);
    }
    if report.within(c.band) {
        Ok(EXIT_OK)
    } else {
        let _ = writeln!(
            err,
            "fitted order {:.4} outside band [{}, {}]",
            report.fitted_order, c.band.0, c.band.1
        );
        Ok(EXIT_BAND)
    }
}

#[derive(Debug, Serialize)]
struct SuiteResult {
    suite: &'static str,
    passed: bool,
    details: Vec<String>,
}

const MONITOR_TOL: f64 = 1e-8;

fn monitor_suite(cfg: &RunConfig, rep: &ConservationReport) -> SuiteResult {
    let mut passed = true;
    let mut details = Vec::new();
    let mut gate = |name: &str, m: &Monitor, enforce: bool, details: &mut Vec<String>| match m {
        Monitor::NotApplicable { note } => details.push(format!("{name}: not applicable ({note})")),
        Monitor::Active(s) => {
            let ok = !enforce || s.max_deviation <= MONITOR_TOL;
            passed &= ok;
            let tag = if !enforce {
                "recorded"
            } else if ok {
                "ok"
            } else {
                "FAILED"
            };
            details.push(format!("{name}: max deviation {:.3e} ({tag})", s.max_deviation));
        }
    };
    let unconstrained = cfg.system == SystemKind::BeanieFirstOrder;
    gate("charge", &rep.charge, true, &mut details);
    gate("multiplier drift", &rep.multiplier_drift, cfg.system == SystemKind::Electron, &mut details);
    gate("omega3", &rep.omega3, unconstrained, &mut details);
    gate("momentum transport", &rep.transport, true, &mut details);
    gate("constraints", &rep.constraints, true, &mut details);
    SuiteResult {
        suite: "monitors",
        passed,
        details,
    }
}

fn cmd_check(
    cfg: &RunConfig,
    seed: u64,
    as_json: bool,
    out_path: Option<&Path>,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<i32, CliError> {
    let (model, state) = setup(cfg)?;
    let mut suites = Vec::new();

    let windows = random_windows(&model, cfg.check.windows.max(1), seed);
    match derivative_check(&model, &windows) {
        Ok(rep) => {
            let fails = rep.failures(cfg.check.tolerance);
            let mut details: Vec<String> = fails
                .iter()
                .map(|f| format!("{} slot {}: relative error {:.3e}", f.func, f.slot, f.worst_relative_error))
                .collect();
            if let Some(w) = rep.worst() {
                details.push(format!(
                    "worst over {} windows: {} slot {} at {:.3e} (tolerance {:.1e})",
                    rep.windows, w.func, w.slot, w.worst_relative_error, cfg.check.tolerance
                ));
            }
            suites.push(SuiteResult {
                suite: "derivatives",
                passed: fails.is_empty(),
                details,
            });
        }
        Err(e) => suites.push(SuiteResult {
            suite: "derivatives",
            passed: false,
            details: vec![e.to_string()],
        }),
    }

    let rec = march(cfg, &model, &state)?;
    let sweep = regularity_sweep(&rec);
    let max_cond = sweep.estimates.iter().copied().fold(0.0, f64::max);
    suites.push(SuiteResult {
        suite: "regularity",
        passed: sweep.flagged.is_empty(),
        details: vec![format!(
            "{} steps, max condition estimate {:.3e}, flagged steps {:?}",
            sweep.steps.len(),
            max_cond,
            sweep.flagged
        )],
    });

    match monitor_trajectory(&model, &rec) {
        Ok(rep) => suites.push(monitor_suite(cfg, &rep)),
        Err(e) => suites.push(SuiteResult {
            suite: "monitors",
            passed: false,
            details: vec![e.to_string()],
        }),
    }

    let k = model.order();
    let horizon = rec.windows.len() + k - 1;
    if rec.completed() && horizon <= 6 && horizon >= 2 * k {
        suites.push(kkt_suite(&model, &rec, seed, cfg.check.kkt_starts));
    } else {
        suites.push(SuiteResult {
            suite: "kkt",
            passed: true,
            details: vec![format!("skipped: horizon N = {horizon} (runs only for 2k <= N <= 6)")],
        });
    }

    if !rec.completed() {
        report_failure(&rec, err);
    }
    let all = suites.iter().all(|s| s.passed);
    let text = if as_json {
        serde_json::to_string_pretty(&json!({
            "system": cfg.system.name(),
            "passed": all,
            "suites": suites,
        }))
        .expect("check report serializes")
            + "\n"
    } else {
        let mut t = String::new();
        for s in &suites {
            t.push_str(&format!("{} {}\n", if s.passed { "PASS" } else { "FAIL" }, s.suite));
            for d in &s.details {
                t.push_str(&format!("    {d}\n"));
            }
        }
        t
    };
    emit(out_path, &text, out)?;
    if !rec.completed() {
        Ok(EXIT_STEP_FAILURE)
    } else if all {
        Ok(EXIT_OK)
    } else {
        Ok(EXIT_BAND)
    }
}

fn kkt_suite(model: &HoSystemModel, rec: &TrajectoryRecord, seed: u64, starts: usize) -> SuiteResult {
    let point = KktPoint::from_record(model, rec);
    let run = || -> crate::Result<SuiteResult> {
        let march_res = kkt_residual(model, &point)?.amax();
        let b = KktBoundary::from_point(model, &point);
        let o = kkt_oracle(model, &b, Some(&point), seed, starts)?;
        let mut details = vec![format!("marching trajectory KKT residual {march_res:.3e}")];
        let mut passed = march_res <= MONITOR_TOL;
        if o.converged {
            passed &= o.step_residual <= MONITOR_TOL;
            details.push(format!(
                "oracle: {}/{} starts converged, step residual {:.3e}, distance to marching {:.3e}",
                o.converged_starts,
                o.starts,
                o.step_residual,
                o.deviation_from_reference.unwrap_or(f64::NAN)
            ));
        } else {
            details.push(o.note.unwrap_or_else(|| "oracle inconclusive".into()));
        }
        Ok(SuiteResult {
            suite: "kkt",
            passed,
            details,
        })
    };
    run().unwrap_or_else(|e| SuiteResult {
        suite: "kkt",
        passed: false,
        details: vec![e.to_string()],
    })
}

fn cmd_list_systems(as_json: bool, out: &mut dyn Write) -> Result<i32, CliError> {
    if as_json {
        let list: Vec<_> = SystemKind::ALL
            .iter()
            .map(|k| {
                let keys = schema(*k);
                json!({
                    "name": k.name(),
                    "description": k.summary(),
                    "required": keys.iter().filter(|s| s.required).collect::<Vec<_>>(),
                    "optional": keys.iter().filter(|s| !s.required).collect::<Vec<_>>(),
                })
            })
            .collect();
        writeln!(out, "{}", serde_json::to_string_pretty(&list).expect("registry serializes"))?;
    } else {
        for k in SystemKind::ALL {
            writeln!(out, "{}\n  {}", k.name(), k.summary())?;
            for (label, required) in [("required", true), ("optional", false)] {
                writeln!(out, "  {label}:")?;
                for s in schema(k).iter().filter(|s| s.required == required) {
                    writeln!(out, "    [{}] {:<15} {}", s.section, s.key, s.help)?;
                }
            }
            if k.is_beanie() {
                writeln!(out, "  group columns: omega_1..omega_3 = body rates")?;
            } else {
                writeln!(out, "  group columns: omega_1 = charge slot")?;
            }
        }
    }
    Ok(EXIT_OK)
}
