//! Experiment harness behind the `trinode` binary: configuration loading
//! and validation, seeded batch execution, reference reproductions and
//! result bundles with provenance.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::Error;
use crate::linkmodel::{self, LinkParams};
use crate::noise::{self, DecayPoint, FitOptions, MemoryDecayParams, ReadoutModel};
use crate::phasestab::{self, LinkId, PhaseStabConfig, SegmentId};
use crate::protocol::{self, ProtocolConfig, ProtocolKind};
use crate::qstate::PauliString;
use crate::tomo::{self, BellLabel, CountVector, Estimate, GhzCorrelators};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_ACCEPTANCE: i32 = 2;
pub const EXIT_IO: i32 = 3;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Reference configurations shipped with the binary.
pub const BUNDLED_CONFIGS: [(&str, &str); 8] = [
    ("budget.toml", include_str!("../configs/budget.toml")),
    ("link.toml", include_str!("../configs/link.toml")),
    (
        "double_link.toml",
        include_str!("../configs/double_link.toml"),
    ),
    ("ghz.toml", include_str!("../configs/ghz.toml")),
    ("swap.toml", include_str!("../configs/swap.toml")),
    ("memory.toml", include_str!("../configs/memory.toml")),
    ("phase.toml", include_str!("../configs/phase.toml")),
    ("tomo.toml", include_str!("../configs/tomo.toml")),
];

pub fn bundled_config(name: &str) -> Option<&'static str> {
    BUNDLED_CONFIGS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| *text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Link,
    Memory,
    Phase,
    DoubleLink,
    Ghz,
    Swap,
    Tomo,
    Budget,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Link => "link",
            ExperimentKind::Memory => "memory",
            ExperimentKind::Phase => "phase",
            ExperimentKind::DoubleLink => "double-link",
            ExperimentKind::Ghz => "ghz",
            ExperimentKind::Swap => "swap",
            ExperimentKind::Tomo => "tomo",
            ExperimentKind::Budget => "budget",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Write every run record as JSON lines plus the event log as CSV.
    pub records: bool,
    /// Write the full phase trace of a phase experiment.
    pub trace: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinksSection {
    pub ab: LinkParams,
    pub bc: LinkParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemorySection {
    pub params: MemoryDecayParams,
    /// Measured decay curve; synthetic data is generated when absent.
    pub data_csv: Option<PathBuf>,
    pub max_attempts: u64,
    pub n_points: usize,
    pub noise_sigma: f64,
    pub add_noise: bool,
    pub absolute_sigma: bool,
}

impl Default for MemorySection {
    fn default() -> Self {
        Self {
            params: MemoryDecayParams::with_entanglement(),
            data_csv: None,
            max_attempts: 4000,
            n_points: 17,
            noise_sigma: 0.01,
            add_noise: true,
            absolute_sigma: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseSection {
    pub duration_s: f64,
    pub config: PhaseStabConfig,
}

impl Default for PhaseSection {
    fn default() -> Self {
        Self {
            duration_s: 0.2,
            config: PhaseStabConfig::calibrated(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TomoSetting {
    /// Measurement axis per qubit, e.g. `XYY`.
    pub label: String,
    #[serde(default)]
    pub counts: Option<BTreeMap<String, u64>>,
    #[serde(default)]
    pub counts_csv: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TomoSection {
    /// `ghz` or a Bell label such as `phi+` or `psi-`.
    pub target: String,
    pub readout: Vec<ReadoutModel>,
    pub settings: Vec<TomoSetting>,
    #[serde(default = "default_mc_samples")]
    pub mc_samples: usize,
}

fn default_mc_samples() -> usize {
    2000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    #[serde(default)]
    pub n_runs: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub links: Option<LinksSection>,
    #[serde(default)]
    pub protocol: Option<ProtocolConfig>,
    #[serde(default)]
    pub memory: Option<MemorySection>,
    #[serde(default)]
    pub phase: Option<PhaseSection>,
    #[serde(default)]
    pub tomo: Option<TomoSection>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    /// Every violated invariant, prefixed with the section it sits in.
    pub fn diagnostics(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(l) = &self.links {
            check(&mut out, "links.ab", l.ab.validate());
            check(&mut out, "links.bc", l.bc.validate());
        }
        if let Some(p) = &self.protocol {
            let before = out.len();
            check(&mut out, "protocol.link_ab", p.link_ab.validate());
            check(&mut out, "protocol.link_bc", p.link_bc.validate());
            check(&mut out, "protocol.memory", p.memory.validate());
            check(&mut out, "protocol.nuclear", p.nuclear.validate());
            check(
                &mut out,
                "protocol.readout_alice",
                p.readout_alice.validate(),
            );
            check(&mut out, "protocol.readout_bob", p.readout_bob.validate());
            check(
                &mut out,
                "protocol.readout_charlie",
                p.readout_charlie.validate(),
            );
            check(&mut out, "protocol.timing", p.timing.validate());
            if out.len() == before {
                if let Err(e) = p.validate() {
                    out.push(format!("protocol: {e}"));
                }
            }
        }
        if let Some(m) = &self.memory {
            check(&mut out, "memory.params", m.params.validate());
            if m.data_csv.is_none() {
                if m.n_points < 4 {
                    check(
                        &mut out,
                        "memory",
                        Err(Error::param("n_points", "must be at least 4")),
                    );
                }
                if !(m.noise_sigma > 0.0) {
                    check(
                        &mut out,
                        "memory",
                        Err(Error::param("noise_sigma", "must be positive")),
                    );
                }
            }
        }
        if let Some(ph) = &self.phase {
            check(&mut out, "phase.config", ph.config.validate());
            if !(ph.duration_s > 0.0) {
                check(
                    &mut out,
                    "phase",
                    Err(Error::param("duration_s", "must be positive")),
                );
            }
        }
        if let Some(t) = &self.tomo {
            for (i, r) in t.readout.iter().enumerate() {
                check(&mut out, &format!("tomo.readout[{i}]"), r.validate());
            }
            if t.target != "ghz" && t.target.parse::<BellLabel>().is_err() {
                check(
                    &mut out,
                    "tomo",
                    Err(Error::param(
                        "target",
                        format!("unknown target `{}`", t.target),
                    )),
                );
            }
            for s in &t.settings {
                if s.counts.is_some() == s.counts_csv.is_some() {
                    check(
                        &mut out,
                        "tomo",
                        Err(Error::param(
                            "settings",
                            format!(
                                "setting {} needs exactly one of counts, counts_csv",
                                s.label
                            ),
                        )),
                    );
                }
            }
        }
        let needs =
            |name: &str, present: bool| (!present).then(|| format!("{name}: section required"));
        let missing = match self.experiment {
            ExperimentKind::DoubleLink
            | ExperimentKind::Ghz
            | ExperimentKind::Swap
            | ExperimentKind::Budget => needs("protocol", self.protocol.is_some()),
            ExperimentKind::Tomo => needs("tomo", self.tomo.is_some()),
            _ => None,
        };
        out.extend(missing);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_sha256: String,
    pub seed: u64,
    pub version: String,
    pub name: String,
    pub n_runs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Value>>,
}

impl Table {
    pub fn new(name: &str, columns: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Value>) {
        self.rows.push(row);
    }

    pub fn to_csv(&self, prov: &Provenance) -> crate::Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::Io(e.to_string());
        w.write_record(&self.columns).map_err(io)?;
        for r in &self.rows {
            let cells: Vec<String> = r
                .iter()
                .map(|v| match v {
                    Value::String(s) => s.clone(),
                    Value::Null => String::new(),
                    other => other.to_string(),
                })
                .collect();
            w.write_record(&cells).map_err(io)?;
        }
        let body = String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.to_string()))?)
            .map_err(|e| Error::Io(e.to_string()))?;
        Ok(format!(
            "# name={} config_sha256={} seed={} version={}\n{body}",
            prov.name, prov.config_sha256, prov.seed, prov.version
        ))
    }
}

/// One modeled quantity against its reference value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub quantity: String,
    pub reference: f64,
    pub modeled: f64,
    pub abs_diff: f64,
    /// Relative to `reference` when `relative` is set.
    pub tolerance: f64,
    pub relative: bool,
    pub pass: bool,
}

impl Comparison {
    pub fn absolute(quantity: &str, reference: f64, modeled: f64, tolerance: f64) -> Self {
        let d = (modeled - reference).abs();
        Self {
            quantity: quantity.to_string(),
            reference,
            modeled,
            abs_diff: d,
            tolerance,
            relative: false,
            pass: d <= tolerance,
        }
    }

    pub fn relative(quantity: &str, reference: f64, modeled: f64, tolerance: f64) -> Self {
        let d = (modeled - reference).abs();
        Self {
            quantity: quantity.to_string(),
            reference,
            modeled,
            abs_diff: d,
            tolerance,
            relative: true,
            pass: d <= tolerance * reference.abs(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attachment {
    pub file_name: String,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultBundle {
    pub provenance: Provenance,
    pub summary: Value,
    pub tables: Vec<Table>,
    pub comparisons: Vec<Comparison>,
    #[serde(skip)]
    pub attachments: Vec<Attachment>,
}

impl ResultBundle {
    fn new(provenance: Provenance) -> Self {
        Self {
            provenance,
            summary: json!({}),
            tables: Vec::new(),
            comparisons: Vec::new(),
            attachments: Vec::new(),
        }
    }

    pub fn all_pass(&self) -> bool {
        self.comparisons.iter().all(|c| c.pass)
    }

    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }

    pub fn comparison(&self, quantity: &str) -> Option<&Comparison> {
        self.comparisons.iter().find(|c| c.quantity == quantity)
    }

    fn set(&mut self, key: &str, v: Value) {
        if let Value::Object(m) = &mut self.summary {
            m.insert(key.to_string(), v);
        }
    }

    fn comparisons_table(&self) -> Table {
        let mut t = Table::new(
            "comparison",
            &[
                "quantity",
                "reference",
                "modeled",
                "abs_diff",
                "tolerance",
                "relative",
                "pass",
            ],
        );
        for c in &self.comparisons {
            t.push(vec![
                json!(c.quantity),
                json!(c.reference),
                json!(c.modeled),
                json!(c.abs_diff),
                json!(c.tolerance),
                json!(c.relative),
                json!(c.pass),
            ]);
        }
        t
    }
}

fn check(out: &mut Vec<String>, section: &str, r: crate::Result<()>) {
    if let Err(e) = r {
        out.push(format!("{section}: {e}"));
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Failure classes mapped onto exit codes.
#[derive(Debug)]
pub enum CliError {
    Invalid(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) => EXIT_INVALID,
            CliError::Io(_) => EXIT_IO,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Io(m) => CliError::Io(m),
            other => CliError::Invalid(other.to_string()),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Invalid(m) => write!(f, "invalid input: {m}"),
            CliError::Io(m) => write!(f, "I/O error: {m}"),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Reads, parses and validates an experiment file.
pub fn load_config(path: &Path) -> CliResult<(ExperimentConfig, String)> {
    let text =
        fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let cfg = ExperimentConfig::parse(&text).map_err(CliError::Invalid)?;
    let diags = cfg.diagnostics();
    if !diags.is_empty() {
        return Err(CliError::Invalid(diags.join("\n")));
    }
    Ok((cfg, sha256_hex(text.as_bytes())))
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Executes the experiment named in `cfg`. Relative data paths resolve
/// against `base_dir`.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    config_sha256: &str,
    base_dir: &Path,
) -> CliResult<ResultBundle> {
    let diags = cfg.diagnostics();
    if !diags.is_empty() {
        return Err(CliError::Invalid(diags.join("\n")));
    }
    let mut b = ResultBundle::new(Provenance {
        config_sha256: config_sha256.to_string(),
        seed: cfg.seed,
        version: VERSION.to_string(),
        name: cfg.experiment.name().to_string(),
        n_runs: cfg.n_runs,
    });
    match cfg.experiment {
        ExperimentKind::Link => link_experiment(cfg, &mut b)?,
        ExperimentKind::Budget => budget_experiment(cfg, &mut b)?,
        ExperimentKind::Memory => memory_experiment(cfg, base_dir, &mut b)?,
        ExperimentKind::Phase => phase_experiment(cfg, &mut b)?,
        ExperimentKind::DoubleLink => protocol_experiment(cfg, ProtocolKind::DoubleLink, &mut b)?,
        ExperimentKind::Ghz => protocol_experiment(cfg, ProtocolKind::Ghz, &mut b)?,
        ExperimentKind::Swap => protocol_experiment(cfg, ProtocolKind::Swap, &mut b)?,
        ExperimentKind::Tomo => tomo_experiment(cfg, base_dir, &mut b)?,
    }
    Ok(b)
}

fn links_of(cfg: &ExperimentConfig) -> (LinkParams, LinkParams) {
    if let Some(l) = &cfg.links {
        (l.ab, l.bc)
    } else if let Some(p) = &cfg.protocol {
        (p.link_ab, p.link_bc)
    } else {
        (LinkParams::reference_ab(), LinkParams::reference_bc())
    }
}

fn budget_table(name: &str, p: &LinkParams) -> CliResult<(Table, linkmodel::ErrorBudget)> {
    let budget = linkmodel::error_budget(p)?;
    let mut t = Table::new(name, &["source", "infidelity"]);
    for e in &budget.entries {
        t.push(vec![json!(e.source), json!(e.infidelity)]);
    }
    t.push(vec![json!("combined"), json!(budget.combined)]);
    Ok((t, budget))
}

fn link_experiment(cfg: &ExperimentConfig, b: &mut ResultBundle) -> CliResult<()> {
    let (ab, bc) = links_of(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut links = serde_json::Map::new();
    for (name, p) in [("ab", ab), ("bc", bc)] {
        let (t, budget) = budget_table(&format!("link_{name}_budget"), &p)?;
        b.tables.push(t);
        let mut s = json!({
            "fidelity": 1.0 - budget.combined,
            "p_tot": linkmodel::success_probability(&p),
            "raw_rate_hz": linkmodel::raw_rate_hz(&p),
            "duty_cycled_rate_hz": linkmodel::duty_cycled_rate_hz(&p),
        });
        if cfg.n_runs > 0 {
            let analytic = linkmodel::populations(&p).normalized_by_index();
            let mut counts = [0u64; 4];
            let mut attempts = 0u64;
            for _ in 0..cfg.n_runs {
                let h = linkmodel::sample_herald_microstate(&p, &mut rng)?;
                counts[h.basis_index] += 1;
                attempts += h.attempts;
            }
            let n = cfg.n_runs as f64;
            let mut t = Table::new(
                &format!("link_{name}_mc_populations"),
                &["basis_index", "analytic", "sampled", "standard_error"],
            );
            for i in 0..4 {
                let f = counts[i] as f64 / n;
                t.push(vec![
                    json!(i),
                    json!(analytic[i]),
                    json!(f),
                    json!((analytic[i] * (1.0 - analytic[i]) / n).sqrt()),
                ]);
            }
            b.tables.push(t);
            s["mean_attempts_between_heralds"] = json!(attempts as f64 / n);
        }
        links.insert(name.to_string(), s);
    }
    b.set("links", Value::Object(links));
    Ok(())
}

fn protocol_budget_table(name: &str, rows: &[protocol::BudgetRow]) -> Table {
    let mut t = Table::new(name, &["source", "infidelity"]);
    for r in rows {
        t.push(vec![json!(r.label), json!(r.infidelity)]);
    }
    t
}

fn budget_experiment(cfg: &ExperimentConfig, b: &mut ResultBundle) -> CliResult<()> {
    let p = cfg.protocol.as_ref().expect("checked by diagnostics");
    b.tables.push(budget_table("link_ab_budget", &p.link_ab)?.0);
    b.tables.push(budget_table("link_bc_budget", &p.link_bc)?.0);
    let ghz = protocol::ghz_error_budget(p)?;
    let swap = protocol::swap_error_budget(p)?;
    b.tables.push(protocol_budget_table("ghz_budget", &ghz));
    b.tables.push(protocol_budget_table("swap_budget", &swap));
    b.set("ghz", serde_json::to_value(&ghz).unwrap_or(Value::Null));
    b.set("swap", serde_json::to_value(&swap).unwrap_or(Value::Null));
    Ok(())
}

/// Evenly spaced synthetic decay curve, optionally with Gaussian noise.
pub fn synthetic_decay(section: &MemorySection, seed: u64) -> crate::Result<Vec<DecayPoint>> {
    section.params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, section.noise_sigma)
        .map_err(|e| Error::param("noise_sigma", e.to_string()))?;
    let n = section.n_points.max(2);
    Ok((0..n)
        .map(|i| {
            let attempts = (section.max_attempts as f64 * i as f64 / (n - 1) as f64).round();
            let mut y = section.params.bloch_length(attempts);
            if section.add_noise {
                y += normal.sample(&mut rng);
            }
            DecayPoint {
                attempts,
                bloch_length: y,
                sigma: section.noise_sigma,
            }
        })
        .collect())
}

fn memory_experiment(cfg: &ExperimentConfig, base: &Path, b: &mut ResultBundle) -> CliResult<()> {
    let section = cfg.memory.clone().unwrap_or_default();
    let data = match &section.data_csv {
        Some(p) => noise::read_decay_csv(&resolve(base, p))?,
        None => synthetic_decay(&section, cfg.seed)?,
    };
    let fit = noise::fit_memory_decay(
        &data,
        &FitOptions {
            absolute_sigma: section.absolute_sigma,
            ..FitOptions::default()
        },
    )?;
    let fitted = fit.params(section.params.t2_star_s);
    decay_tables(b, &data, &fit, &fitted, Some(&section.params));
    b.set("fit", serde_json::to_value(fit).unwrap_or(Value::Null));
    Ok(())
}

fn decay_tables(
    b: &mut ResultBundle,
    data: &[DecayPoint],
    fit: &noise::DecayFit,
    fitted: &MemoryDecayParams,
    truth: Option<&MemoryDecayParams>,
) {
    let mut t = Table::new("decay_data", &["attempts", "bloch_length", "sigma", "fit"]);
    for d in data {
        t.push(vec![
            json!(d.attempts),
            json!(d.bloch_length),
            json!(d.sigma),
            json!(fitted.bloch_length(d.attempts)),
        ]);
    }
    b.tables.push(t);
    let n_max = data.iter().map(|d| d.attempts).fold(0.0, f64::max);
    let mut t = Table::new("fit_curve", &["attempts", "bloch_length"]);
    for i in 0..=200 {
        let n = n_max * i as f64 / 200.0;
        t.push(vec![json!(n), json!(fitted.bloch_length(n))]);
    }
    b.tables.push(t);
    let mut t = Table::new("fit_parameters", &["parameter", "value", "sigma", "input"]);
    let input =
        |f: fn(&MemoryDecayParams) -> f64| truth.map(|p| json!(f(p))).unwrap_or(Value::Null);
    t.push(vec![
        json!("A"),
        json!(fit.amplitude_a),
        json!(fit.sigma_a),
        input(|p| p.amplitude_a),
    ]);
    t.push(vec![
        json!("N_1e"),
        json!(fit.n_1e),
        json!(fit.sigma_n_1e),
        input(|p| p.n_1e),
    ]);
    t.push(vec![
        json!("n"),
        json!(fit.exponent_n),
        json!(fit.sigma_exponent_n),
        input(|p| p.exponent_n),
    ]);
    b.tables.push(t);
}

fn phase_experiment(cfg: &ExperimentConfig, b: &mut ResultBundle) -> CliResult<()> {
    let section = cfg.phase.clone().unwrap_or_default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let res = phasestab::simulate_closed_loop(
        &section.config.segments,
        &section.config.schedule,
        section.duration_s,
        &mut rng,
    )?;
    let mut t = Table::new("segment_std", &["segment", "circular_std_deg"]);
    for id in SegmentId::ALL {
        if let Some(s) = res.segment_std(id) {
            t.push(vec![json!(id.name()), json!(s)]);
        }
    }
    b.tables.push(t);
    let (ab, bc) = links_of(cfg);
    let mut t = Table::new(
        "link_sigma",
        &["link", "sigma_deg", "phase_infidelity", "link_fidelity"],
    );
    let mut summary = serde_json::Map::new();
    for (link, mut p) in [(LinkId::AB, ab), (LinkId::BC, bc)] {
        let sigma = phasestab::effective_link_phase_sigma(link, &res)?;
        p.phase_sigma_deg = sigma;
        let budget = linkmodel::error_budget(&p)?;
        let row = budget.get(linkmodel::SOURCE_PHASE).unwrap_or(f64::NAN);
        let name = format!("{link:?}");
        t.push(vec![
            json!(name),
            json!(sigma),
            json!(row),
            json!(1.0 - budget.combined),
        ]);
        summary.insert(name, json!({"sigma_deg": sigma, "phase_infidelity": row}));
    }
    b.tables.push(t);
    b.set("links", Value::Object(summary));
    b.set("n_rounds", json!(res.n_rounds));
    if cfg.output.trace {
        let mut bytes = Vec::new();
        res.write_csv_to(&mut bytes)?;
        b.attachments.push(Attachment {
            file_name: "phase_trace.csv".into(),
            bytes,
        });
    }
    Ok(())
}

fn mean_sem_json(m: &Option<protocol::MeanSem>) -> (Value, Value) {
    match m {
        Some(m) => (json!(m.mean), json!(m.sem)),
        None => (Value::Null, Value::Null),
    }
}

fn protocol_experiment(
    cfg: &ExperimentConfig,
    kind: ProtocolKind,
    b: &mut ResultBundle,
) -> CliResult<()> {
    let mut p = cfg.protocol.clone().expect("checked by diagnostics");
    p.seed = cfg.seed;
    let summary = protocol::run_batch_summary(&p, kind, cfg.n_runs)?;
    match kind {
        ProtocolKind::DoubleLink => {
            let expected = protocol::expected_memory_coherence(&p)?;
            let (fa, fc) = protocol::double_link_pair_fidelities(&p)?;
            let mut t = Table::new(
                "double_link",
                &["quantity", "monte_carlo", "standard_error", "analytic"],
            );
            let (m, s) = mean_sem_json(&summary.memory_coherence);
            let coh_analytic = if p.noise.memory_dephasing {
                expected
            } else {
                1.0
            };
            t.push(vec![json!("memory_coherence"), m, s, json!(coh_analytic)]);
            let (m, s) = mean_sem_json(&summary.attempts_bc);
            t.push(vec![json!("attempts_bc"), m, s, Value::Null]);
            t.push(vec![
                json!("pair_fidelity_alice_memory"),
                Value::Null,
                Value::Null,
                json!(fa),
            ]);
            t.push(vec![
                json!("pair_fidelity_bob_charlie"),
                Value::Null,
                Value::Null,
                json!(fc),
            ]);
            b.tables.push(t);
        }
        ProtocolKind::Ghz => {
            let an = protocol::analyze_ghz(&p)?;
            let mut t = Table::new(
                "herald_statistics",
                &[
                    "outcome",
                    "count",
                    "share",
                    "share_sem",
                    "fidelity",
                    "fidelity_sem",
                ],
            );
            for o in &summary.outcomes {
                let (f, fs) = mean_sem_json(&o.fidelity);
                t.push(vec![
                    json!(o.bits),
                    json!(o.count),
                    json!(o.share),
                    json!(o.share_sem),
                    f,
                    fs,
                ]);
            }
            b.tables.push(t);
            let mut t = Table::new(
                "ghz_correlators",
                &["correlator", "analytic", "monte_carlo"],
            );
            let mc_state = summary.mean_density_matrix().transpose()?;
            for (i, label) in GhzCorrelators::LABELS.iter().enumerate() {
                let mc = match &mc_state {
                    Some(s) => json!(s.pauli_expectation(&label.parse::<PauliString>()?)?),
                    None => Value::Null,
                };
                t.push(vec![json!(label), json!(an.correlators[i]), mc]);
            }
            b.tables.push(t);
            b.set(
                "analytic",
                json!({
                    "fidelity": an.fidelity,
                    "infidelity": an.infidelity(),
                    "herald_probability": an.herald_probability,
                }),
            );
        }
        ProtocolKind::Swap => {
            let an = protocol::analyze_swap(&p)?;
            let mut t = Table::new(
                "bsm_outcomes",
                &[
                    "outcome",
                    "count",
                    "share",
                    "share_sem",
                    "fidelity",
                    "fidelity_sem",
                    "analytic_share",
                    "analytic_fidelity",
                ],
            );
            for (o, a) in summary.outcomes.iter().zip(&an.outcomes) {
                let (f, fs) = mean_sem_json(&o.fidelity);
                t.push(vec![
                    json!(o.bits),
                    json!(o.count),
                    json!(o.share),
                    json!(o.share_sem),
                    f,
                    fs,
                    json!(a.share),
                    json!(a.fidelity),
                ]);
            }
            let (f, fs) = mean_sem_json(&summary.fidelity);
            t.push(vec![
                json!("any"),
                json!(summary.n_success),
                json!(1.0),
                json!(0.0),
                f,
                fs,
                json!(1.0),
                json!(an.fidelity_any),
            ]);
            b.tables.push(t);
            b.set(
                "analytic",
                json!({
                    "fidelity_00": an.outcomes[0].fidelity,
                    "fidelity_any": an.fidelity_any,
                    "shares": an.shares(),
                }),
            );
        }
    }
    b.set(
        "monte_carlo",
        serde_json::to_value(&summary).unwrap_or(Value::Null),
    );
    if cfg.output.records {
        let records = protocol::run_batch(&p, kind, cfg.n_runs)?;
        let mut jsonl = Vec::new();
        protocol::write_jsonl(&records, &mut jsonl)?;
        let mut events = Vec::new();
        protocol::write_events_csv(&records, &mut events)?;
        b.attachments.push(Attachment {
            file_name: "runs.jsonl".into(),
            bytes: jsonl,
        });
        b.attachments.push(Attachment {
            file_name: "events.csv".into(),
            bytes: events,
        });
    }
    Ok(())
}

fn tomo_experiment(cfg: &ExperimentConfig, base: &Path, b: &mut ResultBundle) -> CliResult<()> {
    let t = cfg.tomo.as_ref().expect("checked by diagnostics");
    let k = t.readout.len();
    let mut labels = Vec::new();
    let mut counts = Vec::new();
    for s in &t.settings {
        let label: PauliString = s.label.parse()?;
        if label.len() != k {
            return Err(CliError::Invalid(format!(
                "tomo: setting {} has {} qubits, readout lists {k}",
                s.label,
                label.len()
            )));
        }
        let cv = match (&s.counts, &s.counts_csv) {
            (Some(m), None) => {
                CountVector::from_bitstrings(m.iter().map(|(b, c)| (b.as_str(), *c)))?
            }
            (None, Some(p)) => tomo::read_counts_csv(&resolve(base, p))?,
            _ => unreachable!("checked by diagnostics"),
        };
        if cv.n_qubits() != k {
            return Err(CliError::Invalid(format!(
                "tomo: counts of {} have the wrong width",
                s.label
            )));
        }
        labels.push(label);
        counts.push(cv);
    }
    let masks: Vec<usize> = labels.iter().map(tomo::setting_mask).collect();
    let names: Vec<String> = labels.iter().map(|l| l.to_string()).collect();
    let fidelity_of = fidelity_function(&t.target, &names)?;
    let corrected: Vec<Vec<f64>> = counts
        .iter()
        .map(|c| tomo::correct_multi(c, &t.readout).map(|p| p.probabilities))
        .collect::<crate::Result<_>>()?;
    let correlators: Vec<f64> = corrected
        .iter()
        .zip(&masks)
        .map(|(p, m)| tomo::parity_expectation(p, *m))
        .collect();
    let point = fidelity_of(&correlators);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut table = Table::new(
        "correlators",
        &[
            "setting", "value", "mc_mean", "mc_std", "p16", "p84", "p2_5", "p97_5",
        ],
    );
    for (i, name) in names.iter().enumerate() {
        let m = masks[i];
        let mc =
            tomo::monte_carlo_uncertainty(&counts[i], &t.readout, t.mc_samples, &mut rng, |p| {
                tomo::parity_expectation(p, m)
            })?;
        table.push(vec![
            json!(name),
            json!(correlators[i]),
            json!(mc.mean),
            json!(mc.std),
            json!(mc.p16),
            json!(mc.p84),
            json!(mc.p2_5),
            json!(mc.p97_5),
        ]);
    }
    b.tables.push(table);
    let masks_c = masks.clone();
    let mc = tomo::monte_carlo_uncertainty_sets(
        &counts,
        &t.readout,
        t.mc_samples,
        &mut rng,
        move |pops| {
            let v: Vec<f64> = pops
                .iter()
                .zip(&masks_c)
                .map(|(p, m)| tomo::parity_expectation(p, *m))
                .collect();
            fidelity_of(&v)
        },
    )?;
    b.set("fidelity", json!(point));
    b.set(
        "fidelity_mc",
        serde_json::to_value(mc).unwrap_or(Value::Null),
    );
    Ok(())
}

type FidelityFn = Box<dyn Fn(&[f64]) -> f64 + Send + Sync>;

fn fidelity_function(target: &str, names: &[String]) -> CliResult<FidelityFn> {
    let find = |label: &str| {
        names.iter().position(|n| n == label).ok_or_else(|| {
            CliError::Invalid(format!("tomo: target {target} needs setting {label}"))
        })
    };
    if target == "ghz" {
        let idx: Vec<usize> = GhzCorrelators::LABELS
            .iter()
            .map(|l| find(l))
            .collect::<CliResult<_>>()?;
        return Ok(Box::new(move |v: &[f64]| {
            let mut a = [0.0; 7];
            for (slot, &i) in a.iter_mut().zip(&idx) {
                *slot = v[i];
            }
            tomo::ghz_fidelity_values(&a)
        }));
    }
    let label: BellLabel = target.parse()?;
    let (xx, yy, zz) = (find("XX")?, find("YY")?, find("ZZ")?);
    Ok(Box::new(move |v: &[f64]| {
        tomo::bell_fidelity(
            Estimate::exact(v[xx]),
            Estimate::exact(v[yy]),
            Estimate::exact(v[zz]),
            label,
        )
        .value
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Target {
    TableS2,
    TableS3Fit,
    TableS4,
    TableS5,
    #[value(name = "fig-2e")]
    Fig2e,
    #[value(name = "fig-3")]
    Fig3,
    #[value(name = "fig-5c")]
    Fig5c,
    BsmShares,
    All,
}

impl Target {
    pub const EACH: [Target; 8] = [
        Target::TableS2,
        Target::TableS3Fit,
        Target::TableS4,
        Target::TableS5,
        Target::Fig2e,
        Target::Fig3,
        Target::Fig5c,
        Target::BsmShares,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Target::TableS2 => "table-s2",
            Target::TableS3Fit => "table-s3-fit",
            Target::TableS4 => "table-s4",
            Target::TableS5 => "table-s5",
            Target::Fig2e => "fig-2e",
            Target::Fig3 => "fig-3",
            Target::Fig5c => "fig-5c",
            Target::BsmShares => "bsm-shares",
            Target::All => "all",
        }
    }
}

pub const DEFAULT_REPRODUCE_RUNS: u64 = 100_000;

fn bundled(name: &str) -> CliResult<(ExperimentConfig, String)> {
    let text = bundled_config(name)
        .ok_or_else(|| CliError::Io(format!("bundled config {name} missing")))?;
    let cfg = ExperimentConfig::parse(text).map_err(CliError::Invalid)?;
    Ok((cfg, sha256_hex(text.as_bytes())))
}

/// Runs one reference reproduction with its bundled configuration and
/// attaches a reference-versus-model comparison.
pub fn reproduce(target: Target, seed: Option<u64>, runs: Option<u64>) -> CliResult<ResultBundle> {
    if target == Target::All {
        let mut out = ResultBundle::new(Provenance {
            config_sha256: sha256_hex(
                BUNDLED_CONFIGS
                    .iter()
                    .flat_map(|(_, t)| t.bytes())
                    .collect::<Vec<u8>>()
                    .as_slice(),
            ),
            seed: seed.unwrap_or(0),
            version: VERSION.to_string(),
            name: "all".into(),
            n_runs: runs.unwrap_or(DEFAULT_REPRODUCE_RUNS),
        });
        for t in Target::EACH {
            let b = reproduce(t, seed, runs)?;
            out.set(t.name(), b.summary.clone());
            for mut table in b.tables {
                table.name = format!("{}_{}", t.name().replace('-', "_"), table.name);
                out.tables.push(table);
            }
            for mut c in b.comparisons {
                c.quantity = format!("{}: {}", t.name(), c.quantity);
                out.comparisons.push(c);
            }
        }
        return Ok(out);
    }
    let file = match target {
        Target::TableS2 | Target::TableS4 | Target::TableS5 => "budget.toml",
        Target::TableS3Fit | Target::Fig3 => "memory.toml",
        Target::Fig2e => "link.toml",
        Target::Fig5c | Target::BsmShares => "swap.toml",
        Target::All => unreachable!(),
    };
    let (mut cfg, hash) = bundled(file)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let n_runs = runs.unwrap_or(DEFAULT_REPRODUCE_RUNS);
    let mut b = ResultBundle::new(Provenance {
        config_sha256: hash,
        seed: cfg.seed,
        version: VERSION.to_string(),
        name: target.name().to_string(),
        n_runs: 0,
    });
    match target {
        Target::TableS2 => {
            let p = cfg
                .protocol
                .as_ref()
                .ok_or_else(|| CliError::Invalid("protocol section missing".into()))?;
            let refs: [(&str, [f64; 6]); 2] = [
                ("A-B", [6.1e-2, 6.0e-2, 5.5e-2, 2.4e-2, 5e-3, 0.191]),
                ("B-C", [8.0e-2, 1.5e-2, 7.0e-2, 2.3e-2, 5e-3, 0.186]),
            ];
            for ((label, r), link) in refs.iter().zip([&p.link_ab, &p.link_bc]) {
                let (t, budget) = budget_table(
                    &format!("link_{}_budget", label.replace('-', "").to_lowercase()),
                    link,
                )?;
                b.tables.push(t);
                for (i, src) in [
                    linkmodel::SOURCE_DOUBLE_EMISSION,
                    linkmodel::SOURCE_PHASE,
                    linkmodel::SOURCE_DOUBLE_EXCITATION,
                    linkmodel::SOURCE_DISTINGUISHABILITY,
                    linkmodel::SOURCE_DARK_COUNTS,
                ]
                .iter()
                .enumerate()
                {
                    let v = budget.get(src).unwrap_or(f64::NAN);
                    b.comparisons.push(Comparison::absolute(
                        &format!("{label} {src}"),
                        r[i],
                        v,
                        0.005,
                    ));
                }
                b.comparisons.push(Comparison::absolute(
                    &format!("{label} combined"),
                    r[5],
                    budget.combined,
                    0.005,
                ));
            }
        }
        Target::TableS3Fit => {
            let base = cfg.memory.clone().unwrap_or_default();
            for (label, params) in [
                ("with entanglement", MemoryDecayParams::with_entanglement()),
                (
                    "without entanglement",
                    MemoryDecayParams::without_entanglement(),
                ),
            ] {
                let section = MemorySection {
                    params,
                    add_noise: false,
                    ..base.clone()
                };
                let data = synthetic_decay(&section, cfg.seed)?;
                let fit = noise::fit_memory_decay(&data, &FitOptions::default())?;
                b.comparisons.push(Comparison::relative(
                    &format!("{label} A"),
                    params.amplitude_a,
                    fit.amplitude_a,
                    1e-3,
                ));
                b.comparisons.push(Comparison::relative(
                    &format!("{label} N_1e"),
                    params.n_1e,
                    fit.n_1e,
                    1e-3,
                ));
                b.comparisons.push(Comparison::relative(
                    &format!("{label} n"),
                    params.exponent_n,
                    fit.exponent_n,
                    1e-3,
                ));
                b.set(label, serde_json::to_value(fit).unwrap_or(Value::Null));
            }
        }
        Target::TableS4 => {
            let p = cfg
                .protocol
                .clone()
                .ok_or_else(|| CliError::Invalid("protocol section missing".into()))?;
            let rows = protocol::ghz_error_budget(&p)?;
            b.tables.push(protocol_budget_table("ghz_budget", &rows));
            let refs = [
                (protocol::ROW_PSI_AB, 0.191, 0.005),
                (protocol::ROW_PSI_BC, 0.186, 0.005),
                (protocol::ROW_DEPHASING, 2.8e-2, 0.005),
                (protocol::ROW_DEPOLARIZING, 8.3e-2, 0.005),
                (protocol::ROW_FEEDFORWARD, 6e-3, 0.005),
                (protocol::ROW_BELLS, 0.337, 0.01),
                (protocol::ROW_COMBINED, 0.406, 0.01),
            ];
            for (label, r, tol) in refs {
                let v = protocol::find_row(&rows, label).unwrap_or(f64::NAN);
                b.comparisons.push(Comparison::absolute(label, r, v, tol));
            }
            let mut pm = p.clone();
            pm.seed = cfg.seed;
            let mc = protocol::run_batch_summary(&pm, ProtocolKind::Ghz, n_runs)?;
            b.provenance.n_runs = n_runs;
            if let Some(f) = mc.fidelity {
                b.comparisons.push(Comparison::absolute(
                    "combined (Monte Carlo)",
                    0.406,
                    1.0 - f.mean,
                    0.015,
                ));
            }
            let modeled = protocol::find_row(&rows, protocol::ROW_COMBINED).unwrap_or(f64::NAN);
            // measured value exceeds the model; reported, not gated
            b.set(
                "measured_consistency",
                json!({
                    "measured_infidelity": 0.462,
                    "measured_sigma": 0.018,
                    "modeled_infidelity": modeled,
                    "z_score": (0.462 - modeled) / 0.018,
                }),
            );
            b.set(
                "monte_carlo",
                serde_json::to_value(&mc).unwrap_or(Value::Null),
            );
        }
        Target::TableS5 => {
            let p = cfg
                .protocol
                .clone()
                .ok_or_else(|| CliError::Invalid("protocol section missing".into()))?;
            let rows = protocol::swap_error_budget(&p)?;
            b.tables.push(protocol_budget_table("swap_budget", &rows));
            let refs = [
                (protocol::ROW_PSI_AB, 0.191, 0.005),
                (protocol::ROW_PSI_BC, 0.186, 0.005),
                (protocol::ROW_DEPHASING, 2.8e-2, 0.005),
                (protocol::ROW_DEPOLARIZING, 8.2e-2, 0.005),
                (protocol::ROW_FEEDFORWARD_00, 1.3e-2, 0.005),
                (protocol::ROW_FEEDFORWARD_ANY, 7.5e-2, 0.005),
                (protocol::ROW_COMBINED_00, 0.398, 0.01),
                (protocol::ROW_COMBINED_ANY, 0.428, 0.01),
            ];
            for (label, r, tol) in refs {
                let v = protocol::find_row(&rows, label).unwrap_or(f64::NAN);
                b.comparisons.push(Comparison::absolute(label, r, v, tol));
            }
        }
        Target::Fig2e => {
            let p = cfg
                .protocol
                .clone()
                .unwrap_or_else(ProtocolConfig::reference);
            let (ab, bc) = links_of(&cfg);
            let mut bars = Table::new(
                "outcome_probabilities",
                &["link", "setting", "outcome", "measured", "corrected"],
            );
            for (name, link, models, reference) in [
                ("A-B", ab, [p.readout_alice, p.readout_bob], 1.0 - 0.191),
                ("B-C", bc, [p.readout_bob, p.readout_charlie], 1.0 - 0.186),
            ] {
                let rho = linkmodel::heralded_state(&link, linkmodel::DetectorSign::Plus)?.state;
                let mut corr = [0.0; 3];
                for (i, label) in ["XX", "YY", "ZZ"].iter().enumerate() {
                    let setting: PauliString = label.parse()?;
                    let truth = tomo::setting_probabilities(&rho, &setting)?;
                    let measured = noise::apply_readout_error(&truth, &models)?;
                    let corrected = tomo::invert_frequencies(&measured, &models)?;
                    for (j, (m, c)) in measured.iter().zip(&corrected).enumerate() {
                        bars.push(vec![
                            json!(name),
                            json!(label),
                            json!(tomo::index_bitstring(j, 2)),
                            json!(m),
                            json!(c),
                        ]);
                    }
                    corr[i] = tomo::parity_expectation(&corrected, tomo::setting_mask(&setting));
                }
                let f = tomo::bell_fidelity(
                    Estimate::exact(corr[0]),
                    Estimate::exact(corr[1]),
                    Estimate::exact(corr[2]),
                    BellLabel::PsiPlus,
                )
                .value;
                b.comparisons.push(Comparison::absolute(
                    &format!("{name} Psi+ fidelity"),
                    reference,
                    f,
                    0.01,
                ));
                b.set(
                    name,
                    json!({"xx": corr[0], "yy": corr[1], "zz": corr[2], "fidelity": f}),
                );
            }
            b.tables.push(bars);
        }
        Target::Fig3 => {
            let section = cfg.memory.clone().unwrap_or_default();
            let data = synthetic_decay(&section, cfg.seed)?;
            let fit = noise::fit_memory_decay(&data, &FitOptions::default())?;
            let fitted = fit.params(section.params.t2_star_s);
            decay_tables(&mut b, &data, &fit, &fitted, Some(&section.params));
            let t = &section.params;
            b.comparisons.push(Comparison::absolute(
                "A",
                t.amplitude_a,
                fit.amplitude_a,
                3.0 * fit.sigma_a,
            ));
            b.comparisons.push(Comparison::absolute(
                "N_1e",
                t.n_1e,
                fit.n_1e,
                3.0 * fit.sigma_n_1e,
            ));
            b.comparisons.push(Comparison::absolute(
                "n",
                t.exponent_n,
                fit.exponent_n,
                3.0 * fit.sigma_exponent_n,
            ));
            b.set("fit", serde_json::to_value(fit).unwrap_or(Value::Null));
        }
        Target::Fig5c | Target::BsmShares => {
            let mut p = cfg
                .protocol
                .clone()
                .ok_or_else(|| CliError::Invalid("protocol section missing".into()))?;
            p.seed = cfg.seed;
            let mc = protocol::run_batch_summary(&p, ProtocolKind::Swap, n_runs)?;
            b.provenance.n_runs = n_runs;
            if target == Target::Fig5c {
                let mut t = Table::new(
                    "fidelity_per_outcome",
                    &["outcome", "count", "fidelity", "fidelity_sem"],
                );
                for o in &mc.outcomes {
                    let (f, s) = mean_sem_json(&o.fidelity);
                    t.push(vec![json!(o.bits), json!(o.count), f, s]);
                }
                let (f, s) = mean_sem_json(&mc.fidelity);
                t.push(vec![json!("any"), json!(mc.n_success), f, s]);
                b.tables.push(t);
                if let Some(o) = mc.outcomes.first().and_then(|o| o.fidelity) {
                    b.comparisons.push(Comparison::absolute(
                        "fidelity (00)",
                        1.0 - 0.398,
                        o.mean,
                        0.01,
                    ));
                }
                if let Some(f) = mc.fidelity {
                    b.comparisons.push(Comparison::absolute(
                        "fidelity (any)",
                        1.0 - 0.428,
                        f.mean,
                        0.01,
                    ));
                }
            } else {
                let reference = [0.23, 0.25, 0.25, 0.27];
                let mut t = Table::new(
                    "shares",
                    &["outcome", "count", "share", "share_sem", "reference"],
                );
                for (o, r) in mc.outcomes.iter().zip(reference) {
                    t.push(vec![
                        json!(o.bits),
                        json!(o.count),
                        json!(o.share),
                        json!(o.share_sem),
                        json!(r),
                    ]);
                    b.comparisons.push(Comparison::absolute(
                        &format!("share {}", o.bits),
                        r,
                        o.share,
                        3.0 * o.share_sem,
                    ));
                }
                b.tables.push(t);
            }
            b.set(
                "monte_carlo",
                serde_json::to_value(&mc).unwrap_or(Value::Null),
            );
        }
        Target::All => unreachable!(),
    }
    if !b.comparisons.is_empty() {
        let t = b.comparisons_table();
        b.tables.push(t);
    }
    Ok(b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Args)]
pub struct OutputArgs {
    /// Directory for the JSON summary, CSV tables and record files.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Format printed to stdout.
    #[arg(long, value_enum, default_value = "json")]
    pub format: Format,
    /// Worker threads for batch runs (default: all cores).
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Parser)]
#[command(
    name = "trinode",
    version,
    about = "Three-node quantum network simulator and analysis toolkit"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the experiment described by a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        runs: Option<u64>,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Check a config file against every module invariant.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Reproduce a reference table or figure with the bundled configs.
    Reproduce {
        #[arg(value_enum)]
        target: Target,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        runs: Option<u64>,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Fit the stretched-exponential memory decay to a CSV curve
    /// (columns attempts, bloch_length, sigma).
    Fit {
        #[arg(long)]
        data: PathBuf,
        /// Rescale the covariance by the reduced chi-square.
        #[arg(long)]
        relative_sigma: bool,
        #[command(flatten)]
        output: OutputArgs,
    },
}

fn emit(bundle: &ResultBundle, output: &OutputArgs) -> CliResult<()> {
    match output.format {
        Format::Json => {
            let s =
                serde_json::to_string_pretty(bundle).map_err(|e| CliError::Io(e.to_string()))?;
            println!("{s}");
        }
        Format::Csv => {
            for t in &bundle.tables {
                println!("# table={}", t.name);
                print!("{}", t.to_csv(&bundle.provenance)?);
            }
        }
    }
    if let Some(dir) = &output.out {
        write_bundle(bundle, dir)?;
    }
    Ok(())
}

/// Writes `<name>.json`, one CSV per table and any attachments.
pub fn write_bundle(bundle: &ResultBundle, dir: &Path) -> CliResult<()> {
    let io = |p: &Path, e: std::io::Error| CliError::Io(format!("{}: {e}", p.display()));
    fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    let stem = bundle.provenance.name.replace('-', "_");
    let path = dir.join(format!("{stem}.json"));
    let json = serde_json::to_string_pretty(bundle).map_err(|e| CliError::Io(e.to_string()))?;
    fs::write(&path, json).map_err(|e| io(&path, e))?;
    for t in &bundle.tables {
        let path = dir.join(format!("{stem}_{}.csv", t.name));
        fs::write(&path, t.to_csv(&bundle.provenance)?).map_err(|e| io(&path, e))?;
    }
    for a in &bundle.attachments {
        let path = dir.join(format!("{stem}_{}", a.file_name));
        fs::write(&path, &a.bytes).map_err(|e| io(&path, e))?;
    }
    Ok(())
}

fn with_jobs<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> CliResult<T> {
    match jobs {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| CliError::Invalid(e.to_string()))?;
            Ok(pool.install(f))
        }
        None => Ok(f()),
    }
}

fn dispatch(cmd: Command) -> CliResult<i32> {
    match cmd {
        Command::Validate { config } => {
            let text = fs::read_to_string(&config)
                .map_err(|e| CliError::Io(format!("{}: {e}", config.display())))?;
            let cfg = ExperimentConfig::parse(&text).map_err(CliError::Invalid)?;
            let diags = cfg.diagnostics();
            if diags.is_empty() {
                println!("ok");
                Ok(EXIT_OK)
            } else {
                for d in &diags {
                    eprintln!("{d}");
                }
                Ok(EXIT_INVALID)
            }
        }
        Command::Run {
            config,
            seed,
            runs,
            output,
        } => {
            let (mut cfg, hash) = load_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(n) = runs {
                cfg.n_runs = n;
            }
            let base = config.parent().map(Path::to_path_buf).unwrap_or_default();
            let bundle = with_jobs(output.jobs, || run_experiment(&cfg, &hash, &base))??;
            emit(&bundle, &output)?;
            Ok(EXIT_OK)
        }
        Command::Reproduce {
            target,
            seed,
            runs,
            output,
        } => {
            let bundle = with_jobs(output.jobs, || reproduce(target, seed, runs))??;
            emit(&bundle, &output)?;
            for c in &bundle.comparisons {
                eprintln!(
                    "{} {}: reference {:.4e} modeled {:.4e} |diff| {:.2e} tol {:.2e}{}",
                    if c.pass { "PASS" } else { "FAIL" },
                    c.quantity,
                    c.reference,
                    c.modeled,
                    c.abs_diff,
                    c.tolerance,
                    if c.relative { " (relative)" } else { "" }
                );
            }
            Ok(if bundle.all_pass() {
                EXIT_OK
            } else {
                EXIT_ACCEPTANCE
            })
        }
        Command::Fit {
            data,
            relative_sigma,
            output,
        } => {
            let bytes =
                fs::read(&data).map_err(|e| CliError::Io(format!("{}: {e}", data.display())))?;
            let points = noise::read_decay_csv(&data)?;
            let fit = noise::fit_memory_decay(
                &points,
                &FitOptions {
                    absolute_sigma: !relative_sigma,
                    ..FitOptions::default()
                },
            )?;
            let mut b = ResultBundle::new(Provenance {
                config_sha256: sha256_hex(&bytes),
                seed: 0,
                version: VERSION.to_string(),
                name: "fit".into(),
                n_runs: 0,
            });
            let fitted = fit.params(MemoryDecayParams::with_entanglement().t2_star_s);
            decay_tables(&mut b, &points, &fit, &fitted, None);
            b.set("fit", serde_json::to_value(fit).unwrap_or(Value::Null));
            emit(&b, &output)?;
            Ok(EXIT_OK)
        }
    }
}

/// Entry point shared by the binary and the tests; returns the exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() {
                EXIT_INVALID
            } else {
                EXIT_OK
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
