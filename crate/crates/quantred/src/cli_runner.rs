//! JSON scenarios and the pipeline behind the `quantred` command.
//!
//! A scenario names a model, a torus action, a list of tensor powers and the
//! quantities to compute. [`validate`] resolves defaults and reports every
//! violation at once; [`run`] writes the requested reports into the output
//! directory together with a manifest of content hashes; [`describe`] gives
//! a cheap preview before any heavy computation.
//!
//! # Schema
//!
//! ```json
//! {
//!   "name": "E2",
//!   "example": "E2",
//!   "model": { "factors": [2], "bundle_degrees": [1] },
//!   "action": { "rank": 1, "weights": [[1, -1, 0]], "shift": [0] },
//!   "k_list": [4, 8, 16],
//!   "twist": "plain",
//!   "norm_defs": [1, 2],
//!   "quad": { "samples": 20000, "stderr_target": 0.01, "slice_nodes": 96 },
//!   "seed": 17,
//!   "output_dir": "out",
//!   "quantities": { "strata": true, "gram": true, "density": true,
//!                   "residual": true, "unitarity": true, "consistency": true },
//!   "conventions": { "density_points": 10, "radius_rel_tol": 0.25,
//!                    "fd_step": 1e-4, "sampler_samples": 64 }
//! }
//! ```
//!
//! `example` (`E1`, `E2`, `E3`) fills in `model` and `action` when they are
//! omitted. `twist` is `plain`, `halfform` or `both` (default: `both` when
//! the model admits a half-form bundle, else `plain`). Shifts may be
//! integers, `"p/q"` strings or `[p, q]` pairs. Everything except the model,
//! the action and `k_list` has a default.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::asymptotics_lab::{
    defect_from_grams, density_i, density_j, qnsr_consistency_with, residual_ii_with, select_radius_with,
    tail_certificate, ConsistencyReport, CurvePoint, DefectReport, DensityCurve, Quantity, TailCertificate,
};
use crate::catalog;
use crate::hilbert_spaces::{basis_sections, invariant_basis, GramMatrix, StratifiedPlan};
use crate::kahler_models::{check_prequantum_with_step, frame_at, make_model, Model, ModelSpec};
use crate::numerics::{derive_seed, label_seed, Estimate, QuadConfig};
use crate::reduction_maps::{newnorm_factor, reduced_gram_with};
use crate::strata_flow::{enumerate_strata, pattern_name, sample_stratum, SamplerConfig, StratumLabel, StratumTarget};
use crate::torus_actions::{orbit_volume_with, Twist, WeightAction, WeightActionSpec};
use crate::{Error, Result};

/// Quantity groups that can be switched on and off.
pub const QUANTITY_NAMES: [&str; 6] = ["strata", "gram", "density", "residual", "unitarity", "consistency"];

/// Which section bundles a scenario covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TwistSelection {
    Plain,
    Halfform,
    Both,
}

impl TwistSelection {
    pub fn twists(self) -> Vec<Twist> {
        match self {
            TwistSelection::Plain => vec![Twist::Plain],
            TwistSelection::Halfform => vec![Twist::Halfform],
            TwistSelection::Both => vec![Twist::Plain, Twist::Halfform],
        }
    }
}

fn yes() -> bool {
    true
}

/// Quantity selection flags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Quantities {
    #[serde(default = "yes")]
    pub strata: bool,
    #[serde(default = "yes")]
    pub gram: bool,
    #[serde(default = "yes")]
    pub density: bool,
    #[serde(default = "yes")]
    pub residual: bool,
    #[serde(default = "yes")]
    pub unitarity: bool,
    #[serde(default = "yes")]
    pub consistency: bool,
}

impl Default for Quantities {
    fn default() -> Self {
        Quantities::all(true)
    }
}

impl Quantities {
    pub fn all(on: bool) -> Quantities {
        Quantities { strata: on, gram: on, density: on, residual: on, unitarity: on, consistency: on }
    }

    /// Only the named groups (names from [`QUANTITY_NAMES`]).
    pub fn only(names: &[String]) -> std::result::Result<Quantities, String> {
        let mut q = Quantities::all(false);
        for n in names {
            match n.trim() {
                "strata" => q.strata = true,
                "gram" => q.gram = true,
                "density" => q.density = true,
                "residual" => q.residual = true,
                "unitarity" => q.unitarity = true,
                "consistency" => q.consistency = true,
                other => {
                    return Err(format!("unknown quantity {other:?} (expected one of {})", QUANTITY_NAMES.join(", ")))
                }
            }
        }
        Ok(q)
    }

    fn curves(&self) -> bool {
        self.density || self.residual || self.unitarity
    }
}

/// Numerical conventions exposed as overridable keys.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Conventions {
    /// Quotient-measure sample points per stratum slice for density curves.
    #[serde(default = "default_density_points")]
    pub density_points: usize,
    /// Relative error allowed for the quadratic model of `f` when selecting
    /// the truncation radius.
    #[serde(default = "default_radius_rel_tol")]
    pub radius_rel_tol: f64,
    /// Central-difference step for the curvature residual checks.
    #[serde(default = "default_fd_step")]
    pub fd_step: f64,
    /// Random flow samples used to cross-check the stratification.
    #[serde(default = "default_sampler_samples")]
    pub sampler_samples: usize,
}

fn default_density_points() -> usize {
    10
}
fn default_radius_rel_tol() -> f64 {
    0.25
}
fn default_fd_step() -> f64 {
    1e-4
}
fn default_sampler_samples() -> usize {
    64
}

impl Default for Conventions {
    fn default() -> Self {
        Conventions {
            density_points: default_density_points(),
            radius_rel_tol: default_radius_rel_tol(),
            fd_step: default_fd_step(),
            sampler_samples: default_sampler_samples(),
        }
    }
}

/// Default sample budget of a scenario.
pub const DEFAULT_SAMPLES: usize = 20_000;
/// Default seed of a scenario.
pub const DEFAULT_SEED: u64 = 17;

/// A fully resolved scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub model: Model,
    pub action: WeightActionSpec,
    pub k_list: Vec<u32>,
    pub twist: TwistSelection,
    pub norm_defs: Vec<u8>,
    /// Quadrature budget; its seed always equals [`Scenario::seed`].
    pub quad: QuadConfig,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub quantities: Quantities,
    pub conventions: Conventions,
}

impl Scenario {
    pub fn action(&self) -> Result<WeightAction> {
        WeightAction::from_spec(self.model.clone(), &self.action)
    }

    /// SHA-256 of the canonical JSON form of the resolved scenario (the
    /// output directory does not enter the hash).
    pub fn config_hash(&self) -> String {
        let mut s = self.clone();
        s.output_dir = PathBuf::new();
        sha256_hex(serde_json::to_string(&s).expect("scenario serializes").as_bytes())
    }
}

/// One validation failure, located by a JSON path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigIssue {
    pub path: String,
    pub message: String,
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

fn issue(path: impl Into<String>, message: impl Into<String>) -> ConfigIssue {
    ConfigIssue { path: path.into(), message: message.into() }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawQuad {
    samples: Option<usize>,
    stderr_target: Option<f64>,
    slice_nodes: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    name: Option<String>,
    example: Option<String>,
    model: Option<ModelSpec>,
    action: Option<WeightActionSpec>,
    k_list: Option<Vec<u32>>,
    twist: Option<TwistSelection>,
    norm_defs: Option<Vec<u8>>,
    quad: Option<RawQuad>,
    seed: Option<u64>,
    output_dir: Option<PathBuf>,
    quantities: Option<Quantities>,
    conventions: Option<Conventions>,
}

/// Command-line overrides applied before semantic validation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub k_list: Option<Vec<u32>>,
    pub output_dir: Option<PathBuf>,
    pub only: Option<Quantities>,
}

/// Parse and validate a scenario, applying defaults.
pub fn validate(config_text: &str) -> std::result::Result<Scenario, Vec<ConfigIssue>> {
    validate_with(config_text, &Overrides::default())
}

/// [`validate`] with command-line overrides.
pub fn validate_with(config_text: &str, overrides: &Overrides) -> std::result::Result<Scenario, Vec<ConfigIssue>> {
    let raw: RawScenario = serde_json::from_str(config_text).map_err(|e| {
        vec![issue("$", format!("invalid scenario JSON at line {} column {}: {e}", e.line(), e.column()))]
    })?;
    let mut errs = Vec::new();

    let example = match raw.example.as_deref() {
        Some(n) => {
            let a = catalog::by_name(n);
            if a.is_none() {
                errs.push(issue("example", format!("unknown example {n:?} (expected E1, E2 or E3)")));
            }
            a
        }
        None => None,
    };

    let model = match (&raw.model, &example) {
        (Some(spec), _) => match make_model(&spec.factors, &spec.bundle_degrees) {
            Ok(m) => Some(m),
            Err(e) => {
                errs.push(issue("model", strip(&e)));
                None
            }
        },
        (None, Some(a)) => Some(a.model.clone()),
        (None, None) => {
            errs.push(issue("model", "missing (give a model or an example name)"));
            None
        }
    };

    let action = match (&raw.action, &example, &model) {
        (Some(spec), _, Some(m)) => match WeightAction::from_spec(m.clone(), spec) {
            Ok(a) => Some(a),
            Err(e) => {
                errs.push(issue("action", strip(&e)));
                None
            }
        },
        (None, Some(a), Some(m)) => {
            if raw.model.is_some() {
                match WeightAction::from_spec(m.clone(), &a.to_spec()) {
                    Ok(a) => Some(a),
                    Err(e) => {
                        errs.push(issue("action", strip(&e)));
                        None
                    }
                }
            } else {
                Some(a.clone())
            }
        }
        (None, None, _) => {
            errs.push(issue("action", "missing (give an action or an example name)"));
            None
        }
        _ => None,
    };
    if let Some(a) = &action {
        if let Err(e) = crate::strata_flow::strata_combinatorial(a) {
            errs.push(issue("action.shift", strip(&e)));
        }
    }

    let k_list = overrides.k_list.clone().or(raw.k_list.clone());
    let k_list = match k_list {
        None => {
            errs.push(issue("k_list", "missing"));
            Vec::new()
        }
        Some(ks) => {
            if ks.is_empty() {
                errs.push(issue("k_list", "empty k_list"));
            }
            for (i, k) in ks.iter().enumerate() {
                if *k == 0 {
                    errs.push(issue(format!("k_list[{i}]"), "tensor power must be at least 1"));
                }
            }
            if ks.windows(2).any(|w| w[1] <= w[0]) {
                errs.push(issue("k_list", "must be strictly increasing"));
            }
            ks
        }
    };

    let twist = raw.twist.unwrap_or(match &model {
        Some(m) if m.metaplectic_allowed => TwistSelection::Both,
        _ => TwistSelection::Plain,
    });
    if let Some(m) = &model {
        if twist != TwistSelection::Plain && !m.metaplectic_allowed {
            errs.push(issue(
                "twist",
                "metaplectic parity: the half-form bundle needs every factor dimension n_j odd",
            ));
        }
    }
    if let (Some(a), Some(m)) = (&action, &model) {
        for (i, &k) in k_list.iter().enumerate().filter(|(_, k)| **k > 0) {
            if let Err(e) = a.check_lift(k) {
                errs.push(issue(format!("k_list[{i}]"), strip(&e)));
                continue;
            }
            if twist != TwistSelection::Plain && m.metaplectic_allowed {
                if let Err(e) = m.section_degrees(k, true) {
                    errs.push(issue(format!("k_list[{i}]"), strip(&e)));
                } else if let Err(e) = crate::hilbert_spaces::invariance_target(a, k, Twist::Halfform) {
                    errs.push(issue(format!("k_list[{i}]"), strip(&e)));
                }
            }
        }
    }

    let norm_defs = raw.norm_defs.clone().unwrap_or_else(|| vec![1, 2]);
    if norm_defs.is_empty() {
        errs.push(issue("norm_defs", "empty"));
    }
    for (i, d) in norm_defs.iter().enumerate() {
        if !(1..=2).contains(d) {
            errs.push(issue(format!("norm_defs[{i}]"), format!("unknown norm definition {d} (expected 1 or 2)")));
        }
    }
    if norm_defs.windows(2).any(|w| w[1] <= w[0]) {
        errs.push(issue("norm_defs", "must be strictly increasing"));
    }

    let seed = overrides.seed.or(raw.seed).unwrap_or(DEFAULT_SEED);
    let rq = raw.quad.clone().unwrap_or_default();
    let defaults = QuadConfig::default();
    let quad = QuadConfig {
        samples: rq.samples.unwrap_or(DEFAULT_SAMPLES),
        seed,
        stderr_target: rq.stderr_target.unwrap_or(defaults.stderr_target),
        slice_nodes: rq.slice_nodes.unwrap_or(defaults.slice_nodes),
    };
    if let Err(e) = quad.validate() {
        errs.push(issue("quad", strip(&e)));
    }

    let conventions = raw.conventions.unwrap_or_default();
    if conventions.density_points == 0 {
        errs.push(issue("conventions.density_points", "must be positive"));
    }
    if !(conventions.radius_rel_tol > 0.0) {
        errs.push(issue("conventions.radius_rel_tol", "must be positive"));
    }
    if !(conventions.fd_step > 0.0 && conventions.fd_step < 0.1) {
        errs.push(issue("conventions.fd_step", "must lie in (0, 0.1)"));
    }
    if conventions.sampler_samples == 0 {
        errs.push(issue("conventions.sampler_samples", "must be positive"));
    }

    if !errs.is_empty() {
        return Err(errs);
    }
    let model = model.expect("checked");
    let action = action.expect("checked");
    Ok(Scenario {
        name: raw.name.or(raw.example).unwrap_or_else(|| "scenario".into()),
        model,
        action: action.to_spec(),
        k_list,
        twist,
        norm_defs,
        quad,
        seed,
        output_dir: overrides.output_dir.clone().or(raw.output_dir).unwrap_or_else(|| PathBuf::from("out")),
        quantities: overrides.only.or(raw.quantities).unwrap_or_default(),
        conventions,
    })
}

/// Error message without the variant prefix.
fn strip(e: &Error) -> String {
    match e {
        Error::Config(s) | Error::Invalid(s) | Error::Numerical(s) | Error::Stratification(s) => s.clone(),
    }
}

fn model_name(m: &Model) -> String {
    m.factors
        .iter()
        .zip(&m.bundle_degrees)
        .map(|(n, l)| format!("CP^{n}(ℓ={l})"))
        .collect::<Vec<_>>()
        .join(" × ")
}

fn kind_label(s: &StratumLabel) -> String {
    let k = s.kind();
    if k.starts_with('Z') {
        format!("finite {k}")
    } else {
        k
    }
}

/// `2^{−m/2}vol(G·x)` at a stratum point.
fn plain_limit(action: &WeightAction, s: &StratumLabel, x: &crate::kahler_models::PointM) -> f64 {
    let vol = orbit_volume_with(action, &s.isotropy, x).value;
    newnorm_factor(&s.isotropy, vol)
}

/// Human-readable preview: Hilbert-space dimensions, strata and the
/// predicted density limits.
pub fn describe(scenario: &Scenario) -> Result<String> {
    use std::fmt::Write;
    let action = scenario.action()?;
    let mut out = String::new();
    let mut warnings = Vec::new();
    let w = &mut out;
    writeln!(w, "scenario {}: {}", scenario.name, model_name(&scenario.model)).unwrap();
    writeln!(w, "torus rank {}, weights {:?}, shift {:?}", action.rank, action.weights, action.shift.iter().map(|c| c.to_string()).collect::<Vec<_>>()).unwrap();
    writeln!(w, "k_list {:?}, twist {:?}, norm_defs {:?}, seed {}", scenario.k_list, scenario.twist, scenario.norm_defs, scenario.seed).unwrap();
    writeln!(w, "Hilbert spaces:").unwrap();
    for &k in &scenario.k_list {
        for tw in scenario.twist.twists() {
            let all = basis_sections(&scenario.model, k, tw)?.len();
            let inv = invariant_basis(&action, k, tw)?.len();
            writeln!(w, "  k={k} {}: dim H = {all}; dim H^G = {inv}", tw.name()).unwrap();
            if inv == 0 {
                warnings.push(format!("warning: no invariant sections at k={k} ({})", tw.name()));
            }
        }
    }
    let plan = StratifiedPlan::new(&action)?;
    let kinds: Vec<String> = plan.strata.iter().map(kind_label).collect();
    writeln!(w, "strata: {} ({})", plan.strata.len(), kinds.join(", ")).unwrap();
    writeln!(w, "  {:<16} {:<10} {:>5} {:>6} {:>6}  patterns", "name", "kind", "dim_S", "dim_up", "pieces").unwrap();
    for (s, (_, extra)) in plan.strata.iter().zip(&plan.decomposition) {
        let pats: Vec<String> = s.patterns.iter().map(|p| pattern_name(&scenario.model, p)).collect();
        writeln!(
            w,
            "  {:<16} {:<10} {:>5} {:>6} {:>6}  {}",
            s.name,
            s.kind(),
            s.dim_s,
            s.dim_upstairs,
            extra.len(),
            pats.join(" ")
        )
        .unwrap();
    }
    let top = plan.strata.iter().map(|s| s.dim_s).max().unwrap_or(0);
    if top == 0 && plan.strata.len() == 1 {
        writeln!(w, "M₀ = point").unwrap();
    } else {
        writeln!(w, "M₀: complex dimension {top}, {} strata", plan.strata.len()).unwrap();
    }
    writeln!(w, "predicted limits (k → ∞):").unwrap();
    for s in &plan.strata {
        if s.isotropy.is_full {
            writeln!(w, "  {}: fixed points, I_k = J_k = 1", s.name).unwrap();
            continue;
        }
        let pts = sample_stratum(&action, StratumTarget::Stratum(s), scenario.conventions.density_points, scenario.seed)?;
        let lims: Vec<f64> = pts.iter().map(|p| plain_limit(&action, s, &p.point)).collect();
        let lo = lims.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = lims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        writeln!(
            w,
            "  {}: I_k → 2^(-{}/2)·vol(G·x) ∈ [{lo:.6}, {hi:.6}]; J_k → 1",
            s.name,
            s.isotropy.dim_m()
        )
        .unwrap();
    }
    for warn in warnings {
        writeln!(out, "{warn}").unwrap();
    }
    Ok(out)
}

/// One produced file in the run manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub sha256: String,
    pub bytes: usize,
}

/// Contents of `run_manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub scenario: String,
    pub seed: u64,
    pub config_sha256: String,
    pub versions: BTreeMap<String, String>,
    pub quantities: Quantities,
    pub files: Vec<ManifestEntry>,
    pub warnings: Vec<String>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

struct Writer {
    dir: PathBuf,
    files: Vec<ManifestEntry>,
}

impl Writer {
    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, contents).map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))?;
        self.files.push(ManifestEntry {
            file: name.to_string(),
            sha256: sha256_hex(contents.as_bytes()),
            bytes: contents.len(),
        });
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(value).map_err(|e| Error::Numerical(format!("cannot serialize {name}: {e}")))?;
        self.write(name, &(text + "\n"))
    }
}

/// In-memory CSV table.
struct Csv(csv::Writer<Vec<u8>>);

impl Csv {
    fn new(header: &[&str]) -> Csv {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header).expect("writing to memory");
        Csv(w)
    }

    fn row(&mut self, fields: &[String]) -> Result<()> {
        self.0.write_record(fields).map_err(|e| Error::Numerical(format!("csv: {e}")))
    }

    fn finish(self) -> Result<String> {
        let bytes = self.0.into_inner().map_err(|e| Error::Numerical(format!("csv: {e}")))?;
        String::from_utf8(bytes).map_err(|e| Error::Numerical(format!("csv: {e}")))
    }
}

#[derive(Serialize)]
struct StratumReport<'a> {
    name: &'a str,
    kind: String,
    dim_s: usize,
    dim_upstairs: usize,
    finite_part: u64,
    isotropy: &'a crate::torus_actions::IsotropyDescriptor,
    patterns: Vec<String>,
    top_patterns: Vec<String>,
    representative: &'a crate::kahler_models::PointM,
    sample_count: usize,
    extra_pieces: &'a [crate::strata_flow::ExtraPiece],
    /// `max |curvature − kω|` at the representative (first `k`).
    prequantum_residual: f64,
    /// Compatibility residual of `(ω, J, B)` at the representative.
    compatibility_residual: f64,
}

#[derive(Serialize)]
struct StrataFile<'a> {
    scenario: &'a str,
    model: &'a Model,
    action: &'a WeightActionSpec,
    open_stratum: &'a str,
    strata: Vec<StratumReport<'a>>,
}

#[derive(Serialize)]
struct GramFile<'a> {
    k: u32,
    grams: Vec<&'a GramMatrix>,
}

/// Per-`(twist, k)` results.
struct Cell {
    twist: Twist,
    k: u32,
    up: Vec<GramMatrix>,
    down: Vec<GramMatrix>,
    defects: Vec<(u8, u8, Option<DefectReport>)>,
    residuals: Vec<(String, Estimate)>,
    consistency: Option<ConsistencyReport>,
}

/// Density values at the sampled points of one stratum.
struct DensityCell {
    twist: Twist,
    stratum: String,
    k: u32,
    value: Estimate,
}

#[derive(Serialize)]
struct StratumPoints {
    stratum: String,
    points: usize,
    /// Quotient-measure mean of `2^{−m/2}vol(G·x)` (limit of the `I` curve).
    plain_limit: f64,
    radius: Option<f64>,
    tail_certificate: Option<TailCertificate>,
}

#[derive(Serialize)]
struct CurvesFile {
    curves: Vec<DensityCurve>,
    strata: Vec<StratumPoints>,
}

#[derive(Serialize)]
struct ConsistencyFile {
    reports: Vec<ConsistencyReport>,
    max_z: f64,
}

fn weighted_mean(values: &[f64], weights: &[f64]) -> Estimate {
    let wsum: f64 = weights.iter().sum();
    let mean = values.iter().zip(weights).map(|(v, w)| v * w).sum::<f64>() / wsum;
    let var: f64 = values.iter().zip(weights).map(|(v, w)| (w * (v - mean)).powi(2)).sum::<f64>();
    Estimate::new(mean, var.sqrt() / wsum)
}

/// Execute a scenario, writing its outputs into `scenario.output_dir`.
pub fn run(scenario: &Scenario) -> Result<RunManifest> {
    let action = scenario.action()?;
    let q = scenario.quantities;
    let quad = QuadConfig { seed: scenario.seed, ..scenario.quad };
    fs::create_dir_all(&scenario.output_dir)
        .map_err(|e| Error::Config(format!("cannot create {}: {e}", scenario.output_dir.display())))?;
    let mut out = Writer { dir: scenario.output_dir.clone(), files: Vec::new() };
    let mut warnings = Vec::new();

    let sampler = SamplerConfig { samples: scenario.conventions.sampler_samples, seed: scenario.seed };
    let strata = enumerate_strata(&action, &sampler).map_err(|e| context("stratification", e))?;
    let plan = StratifiedPlan::from_strata(&action, strata).map_err(|e| context("stratification", e))?;

    if q.strata {
        let k0 = scenario.k_list[0];
        let mut reports = Vec::new();
        for (s, (_, extra)) in plan.strata.iter().zip(&plan.decomposition) {
            let x = &s.representative;
            reports.push(StratumReport {
                name: &s.name,
                kind: s.kind(),
                dim_s: s.dim_s,
                dim_upstairs: s.dim_upstairs,
                finite_part: s.isotropy.finite_part,
                isotropy: &s.isotropy,
                patterns: s.patterns.iter().map(|p| pattern_name(&action.model, p)).collect(),
                top_patterns: s.top_patterns.iter().map(|p| pattern_name(&action.model, p)).collect(),
                representative: x,
                sample_count: s.sample_count,
                extra_pieces: extra,
                prequantum_residual: check_prequantum_with_step(&action.model, k0, x, scenario.conventions.fd_step)?,
                compatibility_residual: frame_at(&action.model, x)?.compatibility_residual(),
            });
        }
        out.json(
            "strata.json",
            &StrataFile {
                scenario: &scenario.name,
                model: &scenario.model,
                action: &scenario.action,
                open_stratum: &plan.strata[plan.open].name,
                strata: reports,
            },
        )?;
    }

    let twists = scenario.twist.twists();
    let grid: Vec<(Twist, u32)> = twists.iter().flat_map(|&t| scenario.k_list.iter().map(move |&k| (t, k))).collect();
    for &(t, k) in &grid {
        if invariant_basis(&action, k, t)?.is_empty() {
            warnings.push(format!("no invariant sections at k={k} ({})", t.name()));
        }
    }

    let need_grams = q.gram || q.unitarity;
    let cells: Vec<Cell> = grid
        .par_iter()
        .map(|&(twist, k)| -> Result<Cell> {
            let ctx = |e| context(&format!("k={k} {}", twist.name()), e);
            let mut cell = Cell { twist, k, up: vec![], down: vec![], defects: vec![], residuals: vec![], consistency: None };
            if invariant_basis(&action, k, twist).map_err(ctx)?.is_empty() {
                // zero-dimensional spaces: nothing to integrate, defect 0
                for &u in &scenario.norm_defs {
                    for &d in &scenario.norm_defs {
                        cell.defects.push((u, d, None));
                    }
                }
                cell.residuals = plan.strata.iter().map(|s| (s.name.clone(), Estimate::exact(0.0))).collect();
                if q.consistency {
                    cell.consistency = Some(ConsistencyReport { k, twist, lines: vec![], max_z: 0.0 });
                }
                return Ok(cell);
            }
            if need_grams {
                for &d in &scenario.norm_defs {
                    cell.up.push(plan.gram_upstairs(&action, k, twist, d, &quad).map_err(ctx)?);
                    cell.down.push(reduced_gram_with(&action, &plan, k, twist, d, &quad).map_err(ctx)?.gram);
                }
            }
            if q.unitarity {
                for (iu, u) in cell.up.iter().enumerate() {
                    for (id, dn) in cell.down.iter().enumerate() {
                        let rep = defect_from_grams(u, dn).map_err(ctx)?;
                        cell.defects.push((scenario.norm_defs[iu], scenario.norm_defs[id], Some(rep)));
                    }
                }
            }
            if q.residual {
                for s in &plan.strata {
                    let r = residual_ii_with(&action, &plan, s, k, twist, &quad).map_err(ctx)?;
                    cell.residuals.push((s.name.clone(), r.total));
                }
            }
            if q.consistency {
                cell.consistency = Some(qnsr_consistency_with(&action, &plan, k, twist, &quad).map_err(ctx)?);
            }
            Ok(cell)
        })
        .collect::<Result<Vec<_>>>()?;

    // density samples: one fixed point set per stratum, shared by all k
    let mut stratum_points = Vec::new();
    let mut densities: Vec<DensityCell> = Vec::new();
    if q.density {
        for s in &plan.strata {
            if s.isotropy.is_full {
                stratum_points.push(StratumPoints { stratum: s.name.clone(), points: 1, plain_limit: 1.0, radius: None, tail_certificate: None });
                for &(twist, k) in &grid {
                    densities.push(DensityCell { twist, stratum: s.name.clone(), k, value: Estimate::exact(1.0) });
                }
                continue;
            }
            let seed = derive_seed(scenario.seed, label_seed(&format!("density/{}", s.name)));
            let pts = sample_stratum(&action, StratumTarget::Stratum(s), scenario.conventions.density_points, seed)?;
            let weights: Vec<f64> = pts.iter().map(|p| p.weight).collect();
            let limits: Vec<f64> = pts.iter().map(|p| plain_limit(&action, s, &p.point)).collect();
            let x0 = &pts[0].point;
            let radius = select_radius_with(&action, s, x0, scenario.conventions.radius_rel_tol).ok();
            let ks: Vec<f64> = scenario.k_list.iter().map(|&k| k as f64).collect();
            let cert = match radius {
                Some(r) => tail_certificate(&action, s, x0, r, &ks).ok(),
                None => None,
            };
            stratum_points.push(StratumPoints {
                stratum: s.name.clone(),
                points: pts.len(),
                plain_limit: weighted_mean(&limits, &weights).value,
                radius,
                tail_certificate: cert,
            });
            let rows: Vec<DensityCell> = grid
                .par_iter()
                .map(|&(twist, k)| -> Result<DensityCell> {
                    let vals = pts
                        .iter()
                        .map(|p| match twist {
                            Twist::Plain => density_i(&action, s, &p.point, k as f64).map(|e| e.value),
                            Twist::Halfform => density_j(&action, s, &p.point, k as f64).map(|e| e.value),
                        })
                        .collect::<Result<Vec<f64>>>()
                        .map_err(|e| context(&format!("density {} k={k}", s.name), e))?;
                    Ok(DensityCell { twist, stratum: s.name.clone(), k, value: weighted_mean(&vals, &weights) })
                })
                .collect::<Result<Vec<_>>>()?;
            densities.extend(rows);
        }
    }

    if q.gram {
        for &k in &scenario.k_list {
            let pick = |f: fn(&Cell) -> &Vec<GramMatrix>| -> Vec<&GramMatrix> {
                cells.iter().filter(|c| c.k == k).flat_map(|c| f(c).iter()).collect()
            };
            out.json(&format!("gram_up_{k}.json"), &GramFile { k, grams: pick(|c| &c.up) })?;
            out.json(&format!("gram_down_{k}.json"), &GramFile { k, grams: pick(|c| &c.down) })?;
        }
    }

    if q.curves() {
        let mut curves = Vec::new();
        let mut csv = Csv::new(&["quantity", "stratum", "k", "value", "stderr"]);
        for &twist in &twists {
            if q.density {
                let quantity = if twist.is_halfform() { Quantity::J } else { Quantity::I };
                for sp in &stratum_points {
                    let pts: Vec<CurvePoint> = densities
                        .iter()
                        .filter(|d| d.twist == twist && d.stratum == sp.stratum)
                        .map(|d| CurvePoint { k: d.k as f64, value: d.value.value, stderr: d.value.stderr })
                        .collect();
                    let mut c = DensityCurve::new(quantity, sp.stratum.clone(), pts)?;
                    c.fit_rate(if twist.is_halfform() { 1.0 } else { sp.plain_limit });
                    curves.push(c);
                }
            }
            if q.residual {
                let quantity = if twist.is_halfform() { Quantity::IITilde } else { Quantity::II };
                for s in &plan.strata {
                    let pts: Vec<CurvePoint> = cells
                        .iter()
                        .filter(|c| c.twist == twist)
                        .filter_map(|c| {
                            let (_, e) = c.residuals.iter().find(|(n, _)| *n == s.name)?;
                            Some(CurvePoint { k: c.k as f64, value: e.value, stderr: e.stderr })
                        })
                        .collect();
                    let mut c = DensityCurve::new(quantity, s.name.clone(), pts)?;
                    c.fit_rate(0.0);
                    curves.push(c);
                }
            }
            if q.unitarity {
                let quantity = if twist.is_halfform() { Quantity::DefectB } else { Quantity::DefectA };
                for &u in &scenario.norm_defs {
                    for &d in &scenario.norm_defs {
                        let pts: Vec<CurvePoint> = cells
                            .iter()
                            .filter(|c| c.twist == twist)
                            .map(|c| {
                                let e = defect_value(c, u, d);
                                CurvePoint { k: c.k as f64, value: e.value, stderr: e.stderr }
                            })
                            .collect();
                        let mut c = DensityCurve::new(quantity, format!("up{u}/down{d}"), pts)?;
                        c.fit_rate(0.0);
                        curves.push(c);
                    }
                }
            }
        }
        for c in &curves {
            for p in &c.points {
                csv.row(&[c.quantity.name().to_string(), c.reference.clone(), p.k.to_string(), p.value.to_string(), p.stderr.to_string()])?;
            }
        }
        out.write("curves.csv", &csv.finish()?)?;
        out.json("curves.json", &CurvesFile { curves, strata: stratum_points })?;
    }

    if q.unitarity {
        let mut csv = Csv::new(&[
            "quantity",
            "twist",
            "k",
            "norm_def_up",
            "norm_def_down",
            "dim",
            "value",
            "stderr",
            "min_eigenvalue",
            "max_eigenvalue",
            "flagged",
        ]);
        for c in &cells {
            let quantity = if c.twist.is_halfform() { Quantity::DefectB } else { Quantity::DefectA };
            let dim = c.up.first().map(|g| g.basis_ids.len()).unwrap_or(0);
            for (u, d, rep) in &c.defects {
                let e = defect_value(c, *u, *d);
                let (lo, hi, flagged) = match rep {
                    Some(r) => (
                        r.eigenvalues.first().map(|v| v.value).unwrap_or(f64::NAN),
                        r.eigenvalues.last().map(|v| v.value).unwrap_or(f64::NAN),
                        r.flagged.len(),
                    ),
                    None => (1.0, 1.0, 0),
                };
                csv.row(&[
                    quantity.name().to_string(),
                    c.twist.name().to_string(),
                    c.k.to_string(),
                    u.to_string(),
                    d.to_string(),
                    dim.to_string(),
                    e.value.to_string(),
                    e.stderr.to_string(),
                    lo.to_string(),
                    hi.to_string(),
                    flagged.to_string(),
                ])?;
            }
        }
        out.write("defects.csv", &csv.finish()?)?;
    }

    if q.consistency {
        let reports: Vec<ConsistencyReport> = cells.iter().filter_map(|c| c.consistency.clone()).collect();
        let max_z = reports.iter().map(|r| r.max_z).fold(0.0, f64::max);
        out.json("consistency.json", &ConsistencyFile { reports, max_z })?;
    }

    let mut versions = BTreeMap::new();
    versions.insert("quantred".to_string(), env!("CARGO_PKG_VERSION").to_string());
    versions.insert("manifest_format".to_string(), "1".to_string());
    let manifest = RunManifest {
        scenario: scenario.name.clone(),
        seed: scenario.seed,
        config_sha256: scenario.config_hash(),
        versions,
        quantities: q,
        files: out.files.clone(),
        warnings,
    };
    out.json("run_manifest.json", &manifest)?;
    Ok(manifest)
}

/// Defect of one pairing; an empty invariant space has defect 0.
fn defect_value(c: &Cell, up: u8, down: u8) -> Estimate {
    c.defects
        .iter()
        .find(|(u, d, _)| *u == up && *d == down)
        .and_then(|(_, _, r)| r.as_ref().map(|r| r.defect))
        .unwrap_or(Estimate::exact(0.0))
}

fn context(what: &str, e: Error) -> Error {
    match e {
        Error::Config(s) => Error::Config(format!("{what}: {s}")),
        Error::Invalid(s) => Error::Invalid(format!("{what}: {s}")),
        Error::Numerical(s) => Error::Numerical(format!("{what}: {s}")),
        Error::Stratification(s) => Error::Stratification(format!("{what}: {s}")),
    }
}

/// Read a scenario file and validate it with overrides.
pub fn load(path: &Path, overrides: &Overrides) -> std::result::Result<Scenario, Vec<ConfigIssue>> {
    let text = fs::read_to_string(path).map_err(|e| vec![issue("$", format!("cannot read {}: {e}", path.display()))])?;
    validate_with(&text, overrides)
}
