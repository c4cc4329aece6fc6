//! Python bindings. Structured results cross the boundary as JSON and come
//! out as plain dicts and lists.

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

use trinode_core::cli::{self, CliError, Target};
use trinode_core::linkmodel::{self, LinkParams};
use trinode_core::noise::{self, DecayPoint, FitOptions, ReadoutModel};
use trinode_core::protocol::{self, ProtocolConfig, ProtocolKind};
use trinode_core::tomo::{self, CountVector, Estimate};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn cli_err(e: CliError) -> PyErr {
    match e {
        CliError::Io(m) => PyOSError::new_err(m),
        CliError::Invalid(m) => PyValueError::new_err(m),
    }
}

fn to_py<'py>(py: Python<'py>, v: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let s = serde_json::to_string(v).map_err(value_err)?;
    py.import("json")?.call_method1("loads", (s,))
}

fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let s: String = obj
        .py()
        .import("json")?
        .call_method1("dumps", (obj,))?
        .extract()?;
    serde_json::from_str(&s).map_err(value_err)
}

fn protocol_config(config: Option<&Bound<'_, PyAny>>) -> PyResult<ProtocolConfig> {
    let cfg = match config {
        Some(c) => from_py(c)?,
        None => ProtocolConfig::reference(),
    };
    cfg.validate().map_err(value_err)?;
    Ok(cfg)
}

#[pymodule]
mod trinode {
    use super::*;

    #[pyfunction]
    fn version() -> &'static str {
        cli::VERSION
    }

    /// Reference parameters of both links and the three nodes, as a dict
    /// that can be edited and passed back as `config`.
    #[pyfunction]
    fn reference_config(py: Python<'_>) -> PyResult<Bound<'_, PyAny>> {
        to_py(py, &ProtocolConfig::reference())
    }

    /// Error budget, fidelity and rates of one heralded link. `params`
    /// overrides the reference parameters of `link` ("ab" or "bc").
    #[pyfunction]
    #[pyo3(signature = (link = "ab", params = None))]
    fn link_budget<'py>(
        py: Python<'py>,
        link: &str,
        params: Option<&Bound<'py, PyAny>>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let p: LinkParams = match (params, link.to_ascii_lowercase().as_str()) {
            (Some(p), _) => from_py(p)?,
            (None, "ab") => LinkParams::reference_ab(),
            (None, "bc") => LinkParams::reference_bc(),
            (None, other) => return Err(value_err(format!("unknown link {other:?}"))),
        };
        let budget = linkmodel::error_budget(&p).map_err(value_err)?;
        to_py(
            py,
            &serde_json::json!({
                "entries": budget.entries,
                "combined": budget.combined,
                "fidelity": 1.0 - budget.combined,
                "p_tot": linkmodel::success_probability(&p),
                "raw_rate_hz": linkmodel::raw_rate_hz(&p),
                "duty_cycled_rate_hz": linkmodel::duty_cycled_rate_hz(&p),
            }),
        )
    }

    #[pyfunction]
    #[pyo3(signature = (config = None))]
    fn analyze_ghz<'py>(
        py: Python<'py>,
        config: Option<&Bound<'py, PyAny>>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let a = protocol::analyze_ghz(&protocol_config(config)?).map_err(value_err)?;
        let correlators: serde_json::Map<String, serde_json::Value> = tomo::GhzCorrelators::LABELS
            .iter()
            .zip(a.correlators)
            .map(|(l, v)| (l.to_string(), v.into()))
            .collect();
        to_py(
            py,
            &serde_json::json!({
                "fidelity": a.fidelity,
                "infidelity": a.infidelity(),
                "herald_probability": a.herald_probability,
                "correlators": correlators,
            }),
        )
    }

    #[pyfunction]
    #[pyo3(signature = (config = None))]
    fn analyze_swap<'py>(
        py: Python<'py>,
        config: Option<&Bound<'py, PyAny>>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let a = protocol::analyze_swap(&protocol_config(config)?).map_err(value_err)?;
        let fid: Vec<f64> = a.outcomes.iter().map(|o| o.fidelity).collect();
        to_py(
            py,
            &serde_json::json!({
                "fidelity_00": a.outcomes[0].fidelity,
                "fidelity_any": a.fidelity_any,
                "shares": a.shares(),
                "outcome_fidelities": fid,
            }),
        )
    }

    /// Rows of the GHZ or swap error budget.
    #[pyfunction]
    #[pyo3(signature = (kind, config = None))]
    fn error_budget<'py>(
        py: Python<'py>,
        kind: &str,
        config: Option<&Bound<'py, PyAny>>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let cfg = protocol_config(config)?;
        let rows = match kind.parse::<ProtocolKind>().map_err(value_err)? {
            ProtocolKind::Ghz => protocol::ghz_error_budget(&cfg),
            ProtocolKind::Swap => protocol::swap_error_budget(&cfg),
            ProtocolKind::DoubleLink => {
                return Err(value_err("budgets exist for ghz and swap only"))
            }
        }
        .map_err(value_err)?;
        to_py(py, &rows)
    }

    /// Seeded Monte Carlo batch of `n_runs` protocol runs, reduced to
    /// summary statistics.
    #[pyfunction]
    #[pyo3(signature = (kind, n_runs, seed = 0, config = None))]
    fn run_batch_summary<'py>(
        py: Python<'py>,
        kind: &str,
        n_runs: u64,
        seed: u64,
        config: Option<&Bound<'py, PyAny>>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let kind: ProtocolKind = kind.parse().map_err(value_err)?;
        let cfg = ProtocolConfig {
            seed,
            ..protocol_config(config)?
        };
        let s = py
            .detach(|| protocol::run_batch_summary(&cfg, kind, n_runs))
            .map_err(value_err)?;
        to_py(py, &s)
    }

    /// Readout-corrected populations from outcome counts (index bit q is
    /// qubit q) and one `(f0, f1)` pair per qubit.
    #[pyfunction]
    fn correct_readout<'py>(
        py: Python<'py>,
        counts: Vec<u64>,
        models: Vec<(f64, f64)>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let counts = CountVector::new(counts).map_err(value_err)?;
        let models: Vec<ReadoutModel> = models
            .into_iter()
            .map(|(f0, f1)| ReadoutModel::new(f0, f1))
            .collect::<Result<_, _>>()
            .map_err(value_err)?;
        let c = tomo::correct_multi(&counts, &models).map_err(value_err)?;
        to_py(py, &c)
    }

    /// `(1 + <IZZ> + <ZIZ> + <ZZI> + <XXX> - <XYY> - <YXY> - <YYX>) / 8`.
    #[pyfunction]
    fn ghz_fidelity(correlators: [f64; 7]) -> f64 {
        tomo::ghz_fidelity_values(&correlators)
    }

    #[pyfunction]
    #[pyo3(signature = (xx, yy, zz, target = "psi+"))]
    fn bell_fidelity(xx: f64, yy: f64, zz: f64, target: &str) -> PyResult<f64> {
        let label = target.parse().map_err(value_err)?;
        Ok(tomo::bell_fidelity(
            Estimate::exact(xx),
            Estimate::exact(yy),
            Estimate::exact(zz),
            label,
        )
        .value)
    }

    /// Weighted fit of `A exp(-(N/N_1e)^n)`.
    #[pyfunction]
    #[pyo3(signature = (attempts, bloch_length, sigma, absolute_sigma = true))]
    fn fit_memory_decay<'py>(
        py: Python<'py>,
        attempts: Vec<f64>,
        bloch_length: Vec<f64>,
        sigma: Vec<f64>,
        absolute_sigma: bool,
    ) -> PyResult<Bound<'py, PyAny>> {
        if attempts.len() != bloch_length.len() || attempts.len() != sigma.len() {
            return Err(value_err(
                "attempts, bloch_length and sigma differ in length",
            ));
        }
        let data: Vec<DecayPoint> = attempts
            .iter()
            .zip(&bloch_length)
            .zip(&sigma)
            .map(|((&a, &b), &s)| DecayPoint {
                attempts: a,
                bloch_length: b,
                sigma: s,
            })
            .collect();
        let fit = noise::fit_memory_decay(
            &data,
            &FitOptions {
                absolute_sigma,
                ..FitOptions::default()
            },
        )
        .map_err(value_err)?;
        to_py(py, &fit)
    }

    /// Reference reproduction by target name, e.g. "table-s4" or "all".
    #[pyfunction]
    #[pyo3(signature = (target, seed = None, runs = None))]
    fn reproduce<'py>(
        py: Python<'py>,
        target: &str,
        seed: Option<u64>,
        runs: Option<u64>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let t = Target::EACH
            .into_iter()
            .chain([Target::All])
            .find(|t| t.name() == target)
            .ok_or_else(|| value_err(format!("unknown target {target:?}")))?;
        let bundle = py
            .detach(|| cli::reproduce(t, seed, runs))
            .map_err(cli_err)?;
        to_py(py, &bundle)
    }
}
