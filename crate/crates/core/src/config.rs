//! Line-oriented model configuration format.
//!
//! ```text
//! # comment
//! [spectrum]
//! levels = 0, 1
//! degeneracies = 2, 6
//! cutoff = 0.5
//!
//! [transitions]
//! lambdas = 0.055, 0.055
//! omega = 0
//! neighbor_only = true
//! M = 0 3; 1 2
//!
//! [pauli.H]
//! spins = 11
//! -0.25 * Z5 Z6
//!
//! [pauli.V]
//! spins = 11
//! 0.055 * X0 X5
//!
//! [run]
//! z = 0, -0.25
//! orders = 2..6
//! eta = 1e-6
//! trace = false
//! ```
//!
//! Rows of `M` are separated by `;`. Pauli terms are `coeff * P<spin> ...`;
//! a bare coefficient is a multiple of the identity. `cutoff` defaults to
//! `E_1/2` and `z` to `0`.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, SubsystemSpectrum, TransitionModel};
use crate::oracle::{Pauli, PauliTerm};

/// Shortest decimal that parses back to the same `f64`; switches to
/// exponent notation for very small or very large magnitudes.
pub fn format_f64(x: f64) -> String {
    let a = x.abs();
    if x == 0.0 {
        "0".to_string()
    } else if !x.is_finite() {
        if x.is_nan() {
            "NaN".to_string()
        } else if x > 0.0 {
            "inf".to_string()
        } else {
            "-inf".to_string()
        }
    } else if (1e-5..1e16).contains(&a) {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

/// A Pauli-string operator on `spins` qubits.
#[derive(Debug, Clone, PartialEq)]
pub struct PauliSection {
    pub spins: usize,
    pub terms: Vec<PauliTerm>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigFile {
    /// Model at the first `z` of `z_values`.
    pub model: ModelConfig,
    pub z_values: Vec<f64>,
    pub orders: Vec<usize>,
    pub eta: Option<f64>,
    pub trace: bool,
    pub hamiltonian: Option<PauliSection>,
    pub perturbation: Option<PauliSection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Section {
    Spectrum,
    Transitions,
    PauliH,
    PauliV,
    Run,
}

fn err(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("line {line}: {msg}"))
}

fn parse_f64(line: usize, field: &str, s: &str) -> Result<f64> {
    let s = s.trim();
    match s {
        "inf" | "+inf" => return Ok(f64::INFINITY),
        "-inf" => return Ok(f64::NEG_INFINITY),
        _ => {}
    }
    s.parse::<f64>()
        .map_err(|_| err(line, format!("field `{field}`: `{s}` is not a number")))
}

fn parse_list(line: usize, field: &str, s: &str) -> Result<Vec<f64>> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',').map(|x| parse_f64(line, field, x)).collect()
}

fn parse_usize(line: usize, field: &str, s: &str) -> Result<usize> {
    s.trim()
        .parse::<usize>()
        .map_err(|_| err(line, format!("field `{field}`: `{}` is not a nonnegative integer", s.trim())))
}

fn parse_bool(line: usize, field: &str, s: &str) -> Result<bool> {
    match s.trim() {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(err(line, format!("field `{field}`: expected true or false, got `{other}`"))),
    }
}

/// Parses `2..8` (inclusive) or `2, 3, 5`; empty means no orders.
pub fn parse_orders(s: &str) -> std::result::Result<Vec<usize>, String> {
    let s = s.trim();
    if s.is_empty() {
        return Ok(Vec::new());
    }
    if let Some((a, b)) = s.split_once("..") {
        let lo: usize = a.trim().parse().map_err(|_| format!("bad range start `{a}`"))?;
        let hi: usize = b.trim().trim_start_matches('=').parse().map_err(|_| format!("bad range end `{b}`"))?;
        return Ok((lo..=hi).collect());
    }
    s.split(',')
        .map(|x| x.trim().parse::<usize>().map_err(|_| format!("bad order `{x}`")))
        .collect()
}

pub fn parse_pauli_term(s: &str) -> std::result::Result<PauliTerm, String> {
    let (coeff, ops) = match s.split_once('*') {
        Some((c, ops)) => (c.trim(), ops.trim()),
        None => (s.trim(), ""),
    };
    let coefficient: f64 = coeff.parse().map_err(|_| format!("bad coefficient `{coeff}`"))?;
    let mut factors = Vec::new();
    for tok in ops.split_whitespace() {
        let mut chars = tok.chars();
        let axis = match chars.next() {
            Some('X') => Pauli::X,
            Some('Y') => Pauli::Y,
            Some('Z') => Pauli::Z,
            Some('I') if chars.as_str().is_empty() => continue,
            _ => return Err(format!("bad Pauli factor `{tok}`")),
        };
        let spin: usize = chars
            .as_str()
            .parse()
            .map_err(|_| format!("bad spin index in `{tok}`"))?;
        factors.push((spin, axis));
    }
    PauliTerm::new(coefficient, factors).map_err(|e| e.to_string())
}

fn parse_matrix(line: usize, s: &str) -> Result<Vec<Vec<u32>>> {
    s.split(';')
        .map(|row| {
            row.split_whitespace()
                .map(|x| {
                    x.parse::<u32>()
                        .map_err(|_| err(line, format!("field `M`: `{x}` is not a nonnegative integer")))
                })
                .collect()
        })
        .collect()
}

#[derive(Default)]
struct Draft {
    levels: Option<Vec<f64>>,
    degeneracies: Option<Vec<usize>>,
    cutoff: Option<f64>,
    lambdas: Option<Vec<f64>>,
    omega: Option<f64>,
    neighbor_only: Option<bool>,
    matrix: Option<Vec<Vec<u32>>>,
    h: Option<PauliSection>,
    v: Option<PauliSection>,
    z: Option<Vec<f64>>,
    orders: Option<Vec<usize>>,
    eta: Option<f64>,
    trace: Option<bool>,
}

pub fn parse_config(text: &str) -> Result<ConfigFile> {
    let mut d = Draft::default();
    let mut section: Option<Section> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(name) = content.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            section = Some(match name.trim() {
                "spectrum" => Section::Spectrum,
                "transitions" => Section::Transitions,
                "pauli.H" => Section::PauliH,
                "pauli.V" => Section::PauliV,
                "run" => Section::Run,
                other => return Err(err(line, format!("unknown section `[{other}]`"))),
            });
            if let Some(Section::PauliH) = section {
                d.h.get_or_insert(PauliSection { spins: 0, terms: Vec::new() });
            }
            if let Some(Section::PauliV) = section {
                d.v.get_or_insert(PauliSection { spins: 0, terms: Vec::new() });
            }
            continue;
        }
        let Some(sec) = section else {
            return Err(err(line, "content before the first section header"));
        };
        if matches!(sec, Section::PauliH | Section::PauliV) {
            let target = if sec == Section::PauliH { d.h.as_mut() } else { d.v.as_mut() }
                .expect("section initialised on header");
            if let Some((key, value)) = content.split_once('=') {
                if key.trim() != "spins" {
                    return Err(err(line, format!("unknown key `{}` in Pauli section", key.trim())));
                }
                target.spins = parse_usize(line, "spins", value)?;
            } else {
                target.terms.push(parse_pauli_term(content).map_err(|e| err(line, e))?);
            }
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(err(line, format!("expected `key = value`, got `{content}`")));
        };
        let key = key.trim();
        match (sec, key) {
            (Section::Spectrum, "levels") => d.levels = Some(parse_list(line, key, value)?),
            (Section::Spectrum, "degeneracies") => {
                d.degeneracies = Some(
                    value
                        .split(',')
                        .map(|x| parse_usize(line, key, x))
                        .collect::<Result<_>>()?,
                )
            }
            (Section::Spectrum, "cutoff") => d.cutoff = Some(parse_f64(line, key, value)?),
            (Section::Transitions, "lambdas") => d.lambdas = Some(parse_list(line, key, value)?),
            (Section::Transitions, "omega") => d.omega = Some(parse_f64(line, key, value)?),
            (Section::Transitions, "neighbor_only") => d.neighbor_only = Some(parse_bool(line, key, value)?),
            (Section::Transitions, "M") => d.matrix = Some(parse_matrix(line, value)?),
            (Section::Run, "z") => d.z = Some(parse_list(line, key, value)?),
            (Section::Run, "orders") => d.orders = Some(parse_orders(value).map_err(|e| err(line, e))?),
            (Section::Run, "eta") => d.eta = Some(parse_f64(line, key, value)?),
            (Section::Run, "trace") => d.trace = Some(parse_bool(line, key, value)?),
            _ => return Err(err(line, format!("unknown key `{key}` in this section"))),
        }
    }

    let levels = d
        .levels
        .ok_or_else(|| Error::Config("[spectrum] is missing `levels`".into()))?;
    let mut spectrum = SubsystemSpectrum::new(levels)?;
    if let Some(deg) = d.degeneracies {
        spectrum = spectrum.with_degeneracies(deg)?;
    }
    let lambdas = d
        .lambdas
        .ok_or_else(|| Error::Config("[transitions] is missing `lambdas`".into()))?;
    let matrix = d
        .matrix
        .ok_or_else(|| Error::Config("[transitions] is missing `M`".into()))?;
    let omega = d.omega.unwrap_or(0.0);
    let transitions = if d.neighbor_only.unwrap_or(true) {
        TransitionModel::new(lambdas, omega, matrix)?
    } else {
        TransitionModel::unrestricted(lambdas, omega, matrix)?
    };
    let z_values = d.z.unwrap_or_else(|| vec![0.0]);
    let z0 = z_values.first().copied().unwrap_or(0.0);
    let cutoff = d.cutoff.unwrap_or(spectrum.gap() / 2.0);
    let model = ModelConfig::with_cutoff(spectrum, transitions, z0, cutoff)?;
    Ok(ConfigFile {
        model,
        z_values,
        orders: d.orders.unwrap_or_default(),
        eta: d.eta,
        trace: d.trace.unwrap_or(false),
        hamiltonian: d.h,
        perturbation: d.v,
    })
}

fn join(xs: &[f64]) -> String {
    xs.iter().map(|&x| format_f64(x)).collect::<Vec<_>>().join(", ")
}

pub fn write_config(cfg: &ConfigFile) -> String {
    let mut out = String::new();
    let model = &cfg.model;
    let _ = writeln!(out, "[spectrum]");
    let _ = writeln!(out, "levels = {}", join(model.spectrum().levels()));
    if let Some(deg) = model.spectrum().degeneracies() {
        let deg: Vec<String> = deg.iter().map(|d| d.to_string()).collect();
        let _ = writeln!(out, "degeneracies = {}", deg.join(", "));
    }
    let _ = writeln!(out, "cutoff = {}", format_f64(model.cutoff()));
    let _ = writeln!(out);
    let t = model.transitions();
    let _ = writeln!(out, "[transitions]");
    let _ = writeln!(out, "lambdas = {}", join(t.lambdas()));
    let _ = writeln!(out, "omega = {}", format_f64(t.omega()));
    let _ = writeln!(out, "neighbor_only = {}", t.neighbor_only());
    let rows: Vec<String> = t
        .matrix()
        .iter()
        .map(|r| r.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" "))
        .collect();
    let _ = writeln!(out, "M = {}", rows.join("; "));
    for (name, sec) in [("H", &cfg.hamiltonian), ("V", &cfg.perturbation)] {
        if let Some(sec) = sec {
            let _ = writeln!(out);
            let _ = writeln!(out, "[pauli.{name}]");
            let _ = writeln!(out, "spins = {}", sec.spins);
            for term in &sec.terms {
                let _ = writeln!(out, "{term}");
            }
        }
    }
    let _ = writeln!(out);
    let _ = writeln!(out, "[run]");
    let _ = writeln!(out, "z = {}", join(&cfg.z_values));
    let orders: Vec<String> = cfg.orders.iter().map(|o| o.to_string()).collect();
    let _ = writeln!(out, "orders = {}", orders.join(", "));
    if let Some(eta) = cfg.eta {
        let _ = writeln!(out, "eta = {}", format_f64(eta));
    }
    let _ = writeln!(out, "trace = {}", cfg.trace);
    out
}
