use std::collections::{BTreeMap, HashMap};
use std::f64::consts::TAU;
use std::fmt;

use serde::{Deserialize, Serialize};
use wavekin::acceptance::Mutation;
use wavekin::kinetic::DeltaKind;
use wavekin::multimode_pdf::Closure;

#[derive(Debug, Clone, PartialEq)]
pub enum ConfigError {
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    Duplicate {
        key: String,
        first: usize,
        second: usize,
    },
    Range {
        key: String,
        message: String,
    },
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Syntax {
                line,
                column,
                message,
            } => write!(f, "line {line}, column {column}: {message}"),
            Self::Duplicate { key, first, second } => {
                write!(f, "duplicate key `{key}` on lines {first} and {second}")
            }
            Self::Range { key, message } => write!(f, "`{key}`: {message}"),
        }
    }
}

impl std::error::Error for ConfigError {}

/// A named model with numeric parameters, e.g.
/// `{ name = "power_law", params = { alpha = 1.5 } }`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Model {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

impl Model {
    pub fn param_list(&self) -> Vec<(String, f64)> {
        self.params.iter().map(|(k, v)| (k.clone(), *v)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SystemSection {
    pub d: usize,
    #[serde(rename = "L")]
    pub length: f64,
    #[serde(rename = "B")]
    pub half_width: i64,
    pub dispersion: Model,
    pub coupling: Model,
    pub epsilon: f64,
}

impl Default for SystemSection {
    fn default() -> Self {
        Self {
            d: 1,
            length: TAU,
            half_width: 4,
            dispersion: Model {
                name: "power_law".into(),
                params: [("alpha".to_string(), 1.5)].into(),
            },
            coupling: Model {
                name: "constant".into(),
                params: [("v0".to_string(), 1.0)].into(),
            },
            epsilon: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DynamicsSection {
    pub dt: f64,
    pub t_end: f64,
    /// Time of the perturbation-series check; the system default when absent.
    #[serde(rename = "T_expansion", skip_serializing_if = "Option::is_none")]
    pub t_expansion: Option<f64>,
    /// Members whose full fields are written per snapshot.
    pub dump_members: usize,
}

impl Default for DynamicsSection {
    fn default() -> Self {
        Self {
            dt: 0.04,
            t_end: 10.0,
            t_expansion: None,
            dump_members: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LawKind {
    Exponential,
    Deterministic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case", deny_unknown_fields)]
pub enum SpectrumSpec {
    /// `scale / (1 + |k|)`.
    InverseOnePlusK { scale: f64 },
    /// `T / ω_k`.
    Equilibrium { temperature: f64 },
    /// One value per grid mode in index order; the zero mode entry must be 0.
    Values { values: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LawSpec {
    pub kind: LawKind,
    pub spectrum: SpectrumSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleSection {
    #[serde(rename = "R")]
    pub members: usize,
    pub master_seed: u64,
    pub amplitude_law: LawSpec,
    pub snapshot_times: Vec<f64>,
}

impl Default for EnsembleSection {
    fn default() -> Self {
        Self {
            members: 2000,
            master_seed: 1,
            amplitude_law: LawSpec {
                kind: LawKind::Exponential,
                spectrum: SpectrumSpec::InverseOnePlusK { scale: 1.0 },
            },
            snapshot_times: vec![0.0, 5.0, 10.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KineticSection {
    /// Broadening width; `0.1 · median |detuning|` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub width: Option<f64>,
    pub kind: DeltaKind,
    /// Step; `T_NL / 200` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    /// Horizon; one nonlinear time when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_end: Option<f64>,
    pub record_every: usize,
}

impl Default for KineticSection {
    fn default() -> Self {
        Self {
            width: None,
            kind: DeltaKind::Lorentzian,
            dt: None,
            t_end: None,
            record_every: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OnemodeSection {
    /// Wavevector of the mode whose PDF is evolved.
    pub mode: Vec<i32>,
    pub s_max_over_n: f64,
    pub cells: usize,
    /// Step; the stability fraction of the explicit limit when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(rename = "F0")]
    pub flux: f64,
    /// Initial exponential mean as a fraction of `η/γ`.
    pub initial_fraction: f64,
    /// Horizon in units of `1/γ`.
    pub t_end_over_relaxation: f64,
    pub snapshots: usize,
}

impl Default for OnemodeSection {
    fn default() -> Self {
        Self {
            mode: vec![1],
            s_max_over_n: 20.0,
            cells: 200,
            dt: None,
            flux: 0.0,
            initial_fraction: 0.5,
            t_end_over_relaxation: 3.0,
            snapshots: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PeierlsSection {
    /// Wavevectors of the active modes.
    pub active_modes: Vec<Vec<i32>>,
    pub cells_per_dim: usize,
    pub s_max_over_n: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    pub closure: String,
    /// Horizon in nonlinear times.
    pub t_end_over_tnl: f64,
    /// Integrate outside modes as a frozen exponential bath.
    pub frozen_bath: bool,
}

impl Default for PeierlsSection {
    fn default() -> Self {
        Self {
            active_modes: vec![vec![1], vec![2], vec![3]],
            cells_per_dim: 24,
            s_max_over_n: 8.0,
            dt: None,
            closure: "gamma".into(),
            t_end_over_tnl: 0.05,
            frozen_bath: true,
        }
    }
}

impl PeierlsSection {
    pub fn closure(&self) -> Result<Closure, ConfigError> {
        self.closure.parse().map_err(|message| ConfigError::Range {
            key: "peierls.closure".into(),
            message,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhaseSection {
    pub t_end: f64,
    pub dt: f64,
    pub toy_samples: usize,
    pub toy_lo: i64,
    pub toy_hi: i64,
}

impl Default for PhaseSection {
    fn default() -> Self {
        Self {
            t_end: 6.0,
            dt: 0.02,
            toy_samples: 100_000,
            toy_lo: -3,
            toy_hi: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySection {
    pub closed_form_b: Vec<i64>,
    pub battery_b: i64,
    pub valence_b: Vec<i64>,
    pub t: f64,
}

impl Default for VerifySection {
    fn default() -> Self {
        Self {
            closed_form_b: vec![2, 3],
            battery_b: 2,
            valence_b: vec![4, 8, 16],
            t: 1.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AcceptSection {
    pub criteria: Vec<u8>,
    pub mutation: Mutation,
}

impl Default for AcceptSection {
    fn default() -> Self {
        Self {
            criteria: wavekin::acceptance::CRITERIA.to_vec(),
            mutation: Mutation::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Output directory, relative to the working directory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<String>,
    pub system: SystemSection,
    pub dynamics: DynamicsSection,
    pub ensemble: EnsembleSection,
    pub kinetic: KineticSection,
    pub onemode: OnemodeSection,
    pub peierls: PeierlsSection,
    pub phase: PhaseSection,
    pub verify: VerifySection,
    pub accept: AcceptSection,
    /// From `WAVEKIN_WORKERS`; never part of the file.
    #[serde(skip)]
    pub workers: Option<usize>,
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, column)
}

/// Reports a repeated `key =` within a section with both line numbers.
/// Inline tables and arrays are left to the parser.
fn find_duplicates(text: &str) -> Result<(), ConfigError> {
    let mut section = String::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut depth = 0i32;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if depth == 0 && line.starts_with('[') && !line.starts_with("[[") {
            section = line
                .trim_matches(|c| c == '[' || c == ']')
                .trim()
                .to_string();
            continue;
        }
        if depth == 0 {
            if let Some((key, _)) = line.split_once('=') {
                let key = key.trim().trim_matches('"');
                if !key.is_empty() {
                    let full = if section.is_empty() {
                        key.to_string()
                    } else {
                        format!("{section}.{key}")
                    };
                    if let Some(&first) = seen.get(&full) {
                        return Err(ConfigError::Duplicate {
                            key: full,
                            first,
                            second: i + 1,
                        });
                    }
                    seen.insert(full, i + 1);
                }
            }
        }
        depth += line.matches(['[', '{']).count() as i32 - line.matches([']', '}']).count() as i32;
        depth = depth.max(0);
    }
    Ok(())
}

pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    find_duplicates(text)?;
    let cfg: RunConfig = toml::from_str(text).map_err(|e| {
        let (line, column) = e.span().map_or((0, 0), |s| line_col(text, s.start));
        ConfigError::Syntax {
            line,
            column,
            message: e.message().to_string(),
        }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn to_toml(cfg: &RunConfig) -> String {
    toml::to_string(cfg).expect("configs serialize")
}

fn range(key: &str, ok: bool, message: &str) -> Result<(), ConfigError> {
    if ok {
        Ok(())
    } else {
        Err(ConfigError::Range {
            key: key.into(),
            message: message.into(),
        })
    }
}

fn positive(key: &str, v: f64) -> Result<(), ConfigError> {
    range(
        key,
        v.is_finite() && v > 0.0,
        &format!("must be positive and finite, got {v}"),
    )
}

fn positive_opt(key: &str, v: Option<f64>) -> Result<(), ConfigError> {
    v.map_or(Ok(()), |v| positive(key, v))
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let s = &self.system;
        range(
            "system.d",
            (1..=3).contains(&s.d),
            &format!("must be 1, 2 or 3, got {}", s.d),
        )?;
        positive("system.L", s.length)?;
        range(
            "system.B",
            s.half_width >= 1,
            &format!("must be at least 1, got {}", s.half_width),
        )?;
        positive("system.epsilon", s.epsilon)?;
        for (m, key) in [
            (&s.dispersion, "system.dispersion"),
            (&s.coupling, "system.coupling"),
        ] {
            for (p, v) in &m.params {
                range(
                    &format!("{key}.params.{p}"),
                    v.is_finite(),
                    "must be finite",
                )?;
            }
        }

        let d = &self.dynamics;
        positive("dynamics.dt", d.dt)?;
        positive("dynamics.t_end", d.t_end)?;
        positive_opt("dynamics.T_expansion", d.t_expansion)?;

        let e = &self.ensemble;
        range(
            "ensemble.master_seed",
            i64::try_from(e.master_seed).is_ok(),
            "TOML integers stop at 2^63 - 1; larger seeds go through --seed",
        )?;
        range(
            "ensemble.R",
            e.members >= 2,
            &format!("needs at least 2 members, got {}", e.members),
        )?;
        range(
            "ensemble.snapshot_times",
            !e.snapshot_times.is_empty()
                && e.snapshot_times.iter().all(|t| t.is_finite() && *t >= 0.0)
                && e.snapshot_times.windows(2).all(|w| w[0] < w[1]),
            "must be a nonempty, strictly increasing list of times >= 0",
        )?;
        match &e.amplitude_law.spectrum {
            SpectrumSpec::InverseOnePlusK { scale } => {
                positive("ensemble.amplitude_law.spectrum.scale", *scale)?
            }
            SpectrumSpec::Equilibrium { temperature } => {
                positive("ensemble.amplitude_law.spectrum.temperature", *temperature)?
            }
            SpectrumSpec::Values { values } => range(
                "ensemble.amplitude_law.spectrum.values",
                values.iter().all(|v| v.is_finite() && *v >= 0.0),
                "must be finite and nonnegative",
            )?,
        }

        let k = &self.kinetic;
        positive_opt("kinetic.width", k.width)?;
        positive_opt("kinetic.dt", k.dt)?;
        positive_opt("kinetic.t_end", k.t_end)?;
        range(
            "kinetic.record_every",
            k.record_every >= 1,
            "must be at least 1",
        )?;

        let o = &self.onemode;
        range(
            "onemode.mode",
            o.mode.len() == s.d,
            "needs one component per dimension",
        )?;
        positive("onemode.s_max_over_n", o.s_max_over_n)?;
        range("onemode.cells", o.cells >= 2, "needs at least 2 cells")?;
        positive_opt("onemode.dt", o.dt)?;
        range(
            "onemode.F0",
            o.flux.is_finite() && o.flux >= 0.0,
            "must be finite and nonnegative",
        )?;
        positive("onemode.initial_fraction", o.initial_fraction)?;
        positive("onemode.t_end_over_relaxation", o.t_end_over_relaxation)?;
        range("onemode.snapshots", o.snapshots >= 1, "must be at least 1")?;

        let p = &self.peierls;
        range(
            "peierls.active_modes",
            (1..=wavekin::multimode_pdf::MAX_ACTIVE).contains(&p.active_modes.len())
                && p.active_modes.iter().all(|m| m.len() == s.d),
            "needs 1 to 4 modes with one component per dimension",
        )?;
        range(
            "peierls.cells_per_dim",
            p.cells_per_dim >= 2,
            "needs at least 2 cells",
        )?;
        positive("peierls.s_max_over_n", p.s_max_over_n)?;
        positive_opt("peierls.dt", p.dt)?;
        positive("peierls.t_end_over_tnl", p.t_end_over_tnl)?;
        p.closure()?;

        let ph = &self.phase;
        positive("phase.t_end", ph.t_end)?;
        positive("phase.dt", ph.dt)?;
        range(
            "phase.toy_samples",
            ph.toy_samples >= 10_000,
            "needs at least 10000 samples",
        )?;
        range(
            "phase.toy_hi",
            ph.toy_lo <= ph.toy_hi,
            "must not be below toy_lo",
        )?;

        let v = &self.verify;
        positive("verify.t", v.t)?;
        range(
            "verify.closed_form_b",
            !v.closed_form_b.is_empty() && v.closed_form_b.iter().all(|&b| (1..=3).contains(&b)),
            "half-widths must lie in 1..=3",
        )?;
        range(
            "verify.battery_b",
            (1..=3).contains(&v.battery_b),
            "must lie in 1..=3",
        )?;
        range(
            "verify.valence_b",
            v.valence_b.len() >= 2 && v.valence_b.iter().all(|&b| b >= 1),
            "needs at least two half-widths >= 1",
        )?;

        range(
            "accept.criteria",
            self.accept
                .criteria
                .iter()
                .all(|c| wavekin::acceptance::CRITERIA.contains(c)),
            "criteria are numbered 1 to 11",
        )?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg = parse_config("[system]\nB = 4\n").unwrap();
        let mut want = RunConfig::default();
        want.system.half_width = 4;
        assert_eq!(cfg, want);
        assert_eq!(parse_config("[system]\n").unwrap(), RunConfig::default());
    }

    #[test]
    fn negative_epsilon_is_named() {
        let err = parse_config("[system]\nepsilon = -0.1\n").unwrap_err();
        assert!(
            matches!(&err, ConfigError::Range { key, .. } if key == "system.epsilon"),
            "{err}"
        );
        assert!(err.to_string().contains("epsilon"));
    }

    #[test]
    fn duplicate_key_reports_both_lines() {
        let text = "[system]\nB = 4\n# comment\nepsilon = 0.1\nB = 3\n";
        let err = parse_config(text).unwrap_err();
        assert_eq!(
            err,
            ConfigError::Duplicate {
                key: "system.B".into(),
                first: 2,
                second: 5
            }
        );
        // the same key in different sections is fine
        parse_config("[dynamics]\ndt = 0.01\n[phase]\ndt = 0.01\n").unwrap();
    }

    #[test]
    fn unknown_key_has_location() {
        let err = parse_config("[system]\nB = 4\n\n[kinetic]\nwidht = 0.3\n").unwrap_err();
        match err {
            ConfigError::Syntax { line, message, .. } => {
                assert_eq!(line, 5);
                assert!(message.contains("widht"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn syntax_error_has_line_and_column() {
        let err = parse_config("[system]\nB = = 4\n").unwrap_err();
        assert!(
            matches!(err, ConfigError::Syntax { line: 2, column, .. } if column > 1),
            "{err:?}"
        );
    }

    #[test]
    fn models_and_laws_parse() {
        let text = r#"
[system]
dispersion = { name = "power_law", params = { alpha = 2.0 } }
coupling = { name = "product", params = { v0 = 0.5, beta = 0.25 } }

[ensemble]
amplitude_law = { kind = "deterministic", spectrum = { shape = "equilibrium", temperature = 2.0 } }

[kinetic]
kind = "gaussian"
width = 0.2

[accept]
criteria = [1, 4]
mutation = "flip_eta"
"#;
        let cfg = parse_config(text).unwrap();
        assert_eq!(cfg.system.coupling.params["beta"], 0.25);
        assert_eq!(cfg.kinetic.kind, DeltaKind::Gaussian);
        assert_eq!(cfg.accept.mutation, Mutation::FlipEta);
        assert_eq!(
            cfg.ensemble.amplitude_law.spectrum,
            SpectrumSpec::Equilibrium { temperature: 2.0 }
        );
        assert_eq!(parse_config(&to_toml(&cfg)).unwrap(), cfg);
    }

    #[test]
    fn default_round_trips() {
        let cfg = RunConfig::default();
        assert_eq!(parse_config(&to_toml(&cfg)).unwrap(), cfg);
    }

    proptest! {
        #[test]
        fn round_trip(
            eps in 1e-4f64..1.0,
            b in 1i64..8,
            dt in 1e-3f64..0.5,
            r in 2usize..100_000,
            width in proptest::option::of(1e-3f64..2.0),
            cells in 2usize..1000,
            seed in 0..=i64::MAX as u64,
        ) {
            let mut cfg = RunConfig::default();
            cfg.system.epsilon = eps;
            cfg.system.half_width = b;
            cfg.dynamics.dt = dt;
            cfg.ensemble.members = r;
            cfg.ensemble.master_seed = seed;
            cfg.kinetic.width = width;
            cfg.onemode.cells = cells;
            prop_assert_eq!(parse_config(&to_toml(&cfg)).unwrap(), cfg);
        }
    }
}
