//! Memory dephasing, depolarizing noise, readout error maps and the
//! stretched-exponential memory-decay fit.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qstate::{CMatrix, KrausChannel, Pauli, PauliString};

/// Stretched-exponential memory decay `A exp(-(N/N_1e)^n)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryDecayParams {
    pub amplitude_a: f64,
    pub n_1e: f64,
    pub exponent_n: f64,
    pub t2_star_s: f64,
}

impl MemoryDecayParams {
    /// Decay under network activity.
    pub fn with_entanglement() -> Self {
        Self {
            amplitude_a: 0.895,
            n_1e: 1843.0,
            exponent_n: 1.37,
            t2_star_s: 11.6e-3,
        }
    }

    /// Intrinsic decay, in equivalent attempts of free evolution.
    pub fn without_entanglement() -> Self {
        Self {
            amplitude_a: 0.885,
            n_1e: 2042.0,
            exponent_n: 1.61,
            t2_star_s: 11.6e-3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.amplitude_a > 0.0 && self.amplitude_a <= 1.0) {
            return Err(Error::param("amplitude_a", "must lie in (0, 1]"));
        }
        for (field, v) in [
            ("n_1e", self.n_1e),
            ("exponent_n", self.exponent_n),
            ("t2_star_s", self.t2_star_s),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::param(field, "must be positive"));
            }
        }
        Ok(())
    }

    /// `exp(-(N/N_1e)^n)`, without the amplitude.
    pub fn coherence_factor(&self, n_attempts: f64) -> f64 {
        (-(n_attempts.max(0.0) / self.n_1e).powf(self.exponent_n)).exp()
    }

    /// Full decay curve including the amplitude.
    pub fn bloch_length(&self, n_attempts: f64) -> f64 {
        self.amplitude_a * self.coherence_factor(n_attempts)
    }

    /// Coherence after free evolution of `elapsed_s`, with the time mapped
    /// to equivalent attempts of `attempt_duration_s`.
    pub fn intrinsic_coherence(&self, elapsed_s: f64, attempt_duration_s: f64) -> f64 {
        self.coherence_factor(elapsed_s / attempt_duration_s)
    }
}

pub fn memory_dephasing_channel(
    n_attempts: u64,
    params: &MemoryDecayParams,
) -> Result<KrausChannel> {
    params.validate()?;
    KrausChannel::dephasing(params.coherence_factor(n_attempts as f64))
}

/// `rho -> (1 - p) rho + p I / 2^k`, built from the k-qubit Pauli basis.
pub fn depolarizing_channel(p: f64, k_qubits: usize) -> Result<KrausChannel> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::param("p", "must lie in [0, 1]"));
    }
    if k_qubits == 0 || k_qubits > crate::qstate::MAX_QUBITS {
        return Err(Error::RegisterSize(k_qubits));
    }
    let n_ops = 1usize << (2 * k_qubits);
    let w_rest = p / n_ops as f64;
    let w_id = 1.0 - p + w_rest;
    let paulis = [Pauli::I, Pauli::X, Pauli::Y, Pauli::Z];
    let mut ops: Vec<CMatrix> = Vec::with_capacity(n_ops);
    for code in 0..n_ops {
        let w = if code == 0 { w_id } else { w_rest };
        if w == 0.0 {
            continue;
        }
        let s = PauliString(
            (0..k_qubits)
                .map(|q| paulis[(code >> (2 * q)) & 3])
                .collect(),
        );
        ops.push(s.matrix().map(|z| z * w.sqrt()));
    }
    KrausChannel::new(ops)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReadoutModel {
    pub f0: f64,
    pub f1: f64,
    #[serde(default)]
    pub sigma_f0: f64,
    #[serde(default)]
    pub sigma_f1: f64,
}

impl ReadoutModel {
    pub fn perfect() -> Self {
        Self {
            f0: 1.0,
            f1: 1.0,
            sigma_f0: 0.0,
            sigma_f1: 0.0,
        }
    }

    pub fn new(f0: f64, f1: f64) -> Result<Self> {
        let m = Self {
            f0,
            f1,
            sigma_f0: 0.0,
            sigma_f1: 0.0,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.f0 + self.f1 <= 1.0 {
            return Err(Error::SingularReadout(self.f0 + self.f1));
        }
        for (field, v) in [("f0", self.f0), ("f1", self.f1)] {
            if !(v > 0.5 && v <= 1.0) {
                return Err(Error::param(field, "must lie in (0.5, 1]"));
            }
        }
        for (field, v) in [("sigma_f0", self.sigma_f0), ("sigma_f1", self.sigma_f1)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::param(field, "must be non-negative"));
            }
        }
        Ok(())
    }

    /// Column-stochastic map from true to measured populations.
    pub fn matrix(&self) -> [[f64; 2]; 2] {
        [[self.f0, 1.0 - self.f1], [1.0 - self.f0, self.f1]]
    }

    pub fn inverse_matrix(&self) -> Result<[[f64; 2]; 2]> {
        let det = self.f0 + self.f1 - 1.0;
        if det <= 0.0 {
            return Err(Error::SingularReadout(self.f0 + self.f1));
        }
        Ok([
            [self.f1 / det, -(1.0 - self.f1) / det],
            [-(1.0 - self.f0) / det, self.f0 / det],
        ])
    }

    /// Probability of reporting `reported` given the true bit `actual`.
    pub fn report_probability(&self, actual: u8, reported: u8) -> f64 {
        self.matrix()[reported as usize][actual as usize]
    }
}

/// Applies one 2x2 matrix per qubit along that qubit's tensor axis of a
/// little-endian probability vector.
pub fn apply_per_qubit(v: &[f64], mats: &[[[f64; 2]; 2]]) -> Result<Vec<f64>> {
    if v.len() != 1usize << mats.len() {
        return Err(Error::DimensionMismatch {
            expected: 1usize << mats.len(),
            got: v.len(),
        });
    }
    let mut cur = v.to_vec();
    for (q, m) in mats.iter().enumerate() {
        let bit = 1usize << q;
        let mut next = vec![0.0; cur.len()];
        for i in 0..cur.len() {
            if i & bit != 0 {
                continue;
            }
            let (a, b) = (cur[i], cur[i | bit]);
            next[i] = m[0][0] * a + m[0][1] * b;
            next[i | bit] = m[1][0] * a + m[1][1] * b;
        }
        cur = next;
    }
    Ok(cur)
}

pub fn apply_readout_error(true_probs: &[f64], models: &[ReadoutModel]) -> Result<Vec<f64>> {
    let total: f64 = true_probs.iter().sum();
    if (total - 1.0).abs() > 1e-9 || true_probs.iter().any(|p| !p.is_finite()) {
        return Err(Error::param(
            "true_probs",
            format!("must sum to 1 (got {total})"),
        ));
    }
    for m in models {
        m.validate()?;
    }
    let mats: Vec<_> = models.iter().map(|m| m.matrix()).collect();
    apply_per_qubit(true_probs, &mats)
}

/// Electron-state-dependent precession of the memory nuclear spin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NuclearSpinParams {
    pub omega0_hz: f64,
    pub omega1_hz: f64,
    pub a_par_hz: f64,
    pub tau_larmor_s: f64,
}

impl Default for NuclearSpinParams {
    fn default() -> Self {
        Self {
            omega0_hz: 2025e3,
            omega1_hz: 2056e3,
            a_par_hz: 30e3,
            tau_larmor_s: 490e-9,
        }
    }
}

impl NuclearSpinParams {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("omega0_hz", self.omega0_hz),
            ("omega1_hz", self.omega1_hz),
            ("a_par_hz", self.a_par_hz),
            ("tau_larmor_s", self.tau_larmor_s),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::param(field, "must be positive"));
            }
        }
        let split = self.omega1_hz - self.omega0_hz;
        if (self.a_par_hz - split).abs() > 0.05 * split.abs().max(self.a_par_hz) {
            return Err(Error::param(
                "a_par_hz",
                format!("must match omega1_hz - omega0_hz = {split} within 5%"),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayPoint {
    pub attempts: f64,
    pub bloch_length: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Treat the sigmas as absolute (true) or rescale the covariance by the
    /// reduced chi-square (false), for error bars of unknown provenance.
    pub absolute_sigma: bool,
    pub max_iterations: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            absolute_sigma: true,
            max_iterations: 500,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub amplitude_a: f64,
    pub n_1e: f64,
    pub exponent_n: f64,
    pub sigma_a: f64,
    pub sigma_n_1e: f64,
    pub sigma_exponent_n: f64,
    pub chi2: f64,
    pub dof: usize,
    pub iterations: usize,
}

impl DecayFit {
    /// Parameter record with the fitted values and the given `T2*`.
    pub fn params(&self, t2_star_s: f64) -> MemoryDecayParams {
        MemoryDecayParams {
            amplitude_a: self.amplitude_a,
            n_1e: self.n_1e,
            exponent_n: self.exponent_n,
            t2_star_s,
        }
    }
}

const A_MAX: f64 = 1.2;
const N_MIN: f64 = 0.5;
const N_MAX: f64 = 3.0;

fn clamp_params(p: Vector3<f64>) -> Vector3<f64> {
    Vector3::new(
        p[0].clamp(1e-9, A_MAX),
        p[1].max(1e-9),
        p[2].clamp(N_MIN + 1e-9, N_MAX),
    )
}

fn model_and_grad(p: &Vector3<f64>, x: f64) -> (f64, Vector3<f64>) {
    let (a, n1e, n) = (p[0], p[1], p[2]);
    if x <= 0.0 {
        return (a, Vector3::new(1.0, 0.0, 0.0));
    }
    let r = x / n1e;
    let u = r.powf(n);
    let e = (-u).exp();
    (
        a * e,
        Vector3::new(e, a * e * u * n / n1e, -a * e * u * r.ln()),
    )
}

fn chi2(p: &Vector3<f64>, data: &[DecayPoint]) -> f64 {
    data.iter()
        .map(|d| ((model_and_grad(p, d.attempts).0 - d.bloch_length) / d.sigma).powi(2))
        .sum()
}

fn initial_guess(data: &[DecayPoint]) -> Vector3<f64> {
    let y_max = data.iter().map(|d| d.bloch_length).fold(f64::MIN, f64::max);
    let a0 = (y_max * 1.02).clamp(1e-3, A_MAX);
    // ln(-ln(y/A)) = n ln N - n ln N_1e on the usable points
    let pts: Vec<(f64, f64)> = data
        .iter()
        .filter(|d| d.attempts > 0.0)
        .filter_map(|d| {
            let r = d.bloch_length / a0;
            (r > 1e-6 && r < 0.999).then(|| (d.attempts.ln(), (-r.ln()).ln()))
        })
        .collect();
    let x_mid = {
        let xs: Vec<f64> = data.iter().map(|d| d.attempts).collect();
        let hi = xs.iter().cloned().fold(f64::MIN, f64::max);
        (hi * 0.5).max(1.0)
    };
    if pts.len() >= 2 {
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        if sxx > 0.0 {
            let slope = sxy / sxx;
            if slope > 0.0 {
                let n1e = (mx - my / slope).exp();
                if n1e.is_finite() && n1e > 0.0 {
                    return clamp_params(Vector3::new(a0, n1e, slope));
                }
            }
        }
    }
    clamp_params(Vector3::new(a0, x_mid, 1.5))
}

/// Weighted least-squares fit of `A exp(-(N/N_1e)^n)` by a damped
/// Gauss-Newton (Levenberg-Marquardt) iteration with an analytic Jacobian
/// and box bounds `A in (0, 1.2]`, `n in (0.5, 3]`, `N_1e > 0`.
pub fn fit_memory_decay(data: &[DecayPoint], opts: &FitOptions) -> Result<DecayFit> {
    if data.len() < 4 {
        return Err(Error::InsufficientSamples(format!(
            "decay fit needs at least 4 points, got {}",
            data.len()
        )));
    }
    for d in data {
        if !(d.sigma > 0.0 && d.sigma.is_finite()) {
            return Err(Error::param("sigma", "uncertainties must be positive"));
        }
        if !(d.attempts >= 0.0 && d.attempts.is_finite() && d.bloch_length.is_finite()) {
            return Err(Error::param("attempts", "must be finite and non-negative"));
        }
    }
    let first = data[0].attempts;
    let distinct = {
        let mut xs: Vec<f64> = data.iter().map(|d| d.attempts).collect();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        xs.dedup();
        xs.len()
    };
    if data.iter().all(|d| d.attempts == first) || distinct < 3 {
        return Err(Error::DegenerateData(
            "need at least three distinct attempt counts".into(),
        ));
    }

    let normal_eqs = |p: &Vector3<f64>| {
        let mut jtj = Matrix3::zeros();
        let mut jtr = Vector3::zeros();
        for d in data {
            let (f, g) = model_and_grad(p, d.attempts);
            let w = 1.0 / (d.sigma * d.sigma);
            jtj += g * g.transpose() * w;
            jtr += g * ((d.bloch_length - f) * w);
        }
        (jtj, jtr)
    };

    let mut p = initial_guess(data);
    let mut cost = chi2(&p, data);
    let mut lambda = 1e-3;
    let mut last_step = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iterations {
        iterations += 1;
        let (jtj, jtr) = normal_eqs(&p);
        let mut accepted = false;
        for _ in 0..40 {
            let mut damped = jtj;
            for i in 0..3 {
                damped[(i, i)] *= 1.0 + lambda;
            }
            let Some(step) = damped.cholesky().map(|ch| ch.solve(&jtr)) else {
                lambda *= 10.0;
                continue;
            };
            let trial = clamp_params(p + step);
            let trial_cost = chi2(&trial, data);
            if trial_cost <= cost {
                last_step = (0..3)
                    .map(|i| ((trial[i] - p[i]) / p[i].abs().max(1e-12)).abs())
                    .fold(0.0, f64::max);
                let improvement = cost - trial_cost;
                p = trial;
                cost = trial_cost;
                lambda = (lambda / 10.0).max(1e-12);
                accepted = true;
                if last_step < 1e-12 || improvement <= 1e-14 * cost.max(1e-300) {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            // no downhill step exists at any damping: a minimum within bounds
            converged = true;
            last_step = 0.0;
        }
        if converged {
            break;
        }
    }
    if !converged {
        return Err(Error::NonConvergence {
            iterations,
            last_step,
        });
    }
    let (jtj, _) = normal_eqs(&p);
    let cov = jtj
        .try_inverse()
        .ok_or_else(|| Error::DegenerateData("singular Jacobian at the optimum".into()))?;
    let dof = data.len().saturating_sub(3);
    let scale = if opts.absolute_sigma || dof == 0 {
        1.0
    } else {
        cost / dof as f64
    };
    Ok(DecayFit {
        amplitude_a: p[0],
        n_1e: p[1],
        exponent_n: p[2],
        sigma_a: (cov[(0, 0)] * scale).sqrt(),
        sigma_n_1e: (cov[(1, 1)] * scale).sqrt(),
        sigma_exponent_n: (cov[(2, 2)] * scale).sqrt(),
        chi2: cost,
        dof,
        iterations,
    })
}

pub fn read_decay_csv(path: &Path) -> Result<Vec<DecayPoint>> {
    let mut rdr =
        csv::Reader::from_path(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    rdr.deserialize()
        .map(|r| r.map_err(|e| Error::Io(e.to_string())))
        .collect()
}

pub fn write_decay_csv(path: &Path, data: &[DecayPoint]) -> Result<()> {
    let mut w =
        csv::Writer::from_path(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    for d in data {
        w.serialize(d).map_err(|e| Error::Io(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::Io(e.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qstate::{c, DensityMatrix};

    fn plus() -> DensityMatrix {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        DensityMatrix::from_pure(&[c(h, 0.0), c(h, 0.0)]).unwrap()
    }

    #[test]
    fn zero_attempts_is_identity() {
        let ch = memory_dephasing_channel(0, &MemoryDecayParams::with_entanglement()).unwrap();
        let out = plus().apply_channel(&ch, &[0]).unwrap();
        assert!(crate::qstate::max_abs_diff(out.matrix(), plus().matrix()) < 1e-15);
    }

    #[test]
    fn coherence_at_decay_constant_is_inverse_e() {
        for n in [0.7, 1.37, 2.5] {
            let p = MemoryDecayParams {
                exponent_n: n,
                ..MemoryDecayParams::with_entanglement()
            };
            assert!((p.coherence_factor(p.n_1e) - (-1.0f64).exp()).abs() < 1e-12);
        }
    }

    #[test]
    fn coherence_at_timeout() {
        let p = MemoryDecayParams::with_entanglement();
        let direct = (-(450.0f64 / 1843.0).powf(1.37)).exp();
        assert!((p.coherence_factor(450.0) - direct).abs() < 1e-15);
        assert!((direct - 0.8651).abs() < 1e-4);
    }

    #[test]
    fn depolarizing_limits() {
        let out = plus()
            .apply_channel(&depolarizing_channel(0.0, 1).unwrap(), &[0])
            .unwrap();
        assert!(crate::qstate::max_abs_diff(out.matrix(), plus().matrix()) < 1e-15);
        let out = plus()
            .apply_channel(&depolarizing_channel(1.0, 1).unwrap(), &[0])
            .unwrap();
        let mm = DensityMatrix::maximally_mixed(1).unwrap();
        assert!(crate::qstate::max_abs_diff(out.matrix(), mm.matrix()) < 1e-15);
        assert!(depolarizing_channel(1.5, 1).is_err());
    }

    #[test]
    fn readout_first_column() {
        let m = ReadoutModel::new(0.95, 0.99).unwrap();
        let out = apply_readout_error(&[1.0, 0.0], &[m]).unwrap();
        assert!((out[0] - 0.95).abs() < 1e-15 && (out[1] - 0.05).abs() < 1e-15);
        let out = apply_readout_error(&[0.3, 0.7], &[ReadoutModel::perfect()]).unwrap();
        assert_eq!(out, vec![0.3, 0.7]);
        assert!(apply_readout_error(&[0.3, 0.6], &[m]).is_err());
    }

    #[test]
    fn singular_readout_rejected() {
        assert!(ReadoutModel::new(0.5, 0.5).is_err());
        let m = ReadoutModel {
            f0: 0.6,
            f1: 0.3,
            sigma_f0: 0.0,
            sigma_f1: 0.0,
        };
        assert!(m.validate().is_err());
    }

    #[test]
    fn nuclear_consistency_check() {
        NuclearSpinParams::default().validate().unwrap();
        let bad = NuclearSpinParams {
            a_par_hz: 60e3,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn fit_rejects_degenerate_input() {
        let pt = |n: f64| DecayPoint {
            attempts: n,
            bloch_length: 0.5,
            sigma: 0.01,
        };
        assert!(matches!(
            fit_memory_decay(&[pt(1.0), pt(2.0)], &FitOptions::default()),
            Err(Error::InsufficientSamples(_))
        ));
        assert!(matches!(
            fit_memory_decay(&[pt(5.0); 6], &FitOptions::default()),
            Err(Error::DegenerateData(_))
        ));
    }

    #[test]
    fn csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("decay.csv");
        let data = vec![
            DecayPoint {
                attempts: 0.0,
                bloch_length: 0.9,
                sigma: 0.01,
            },
            DecayPoint {
                attempts: 100.0,
                bloch_length: 0.85,
                sigma: 0.02,
            },
        ];
        write_decay_csv(&path, &data).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("attempts,bloch_length,sigma"));
        assert_eq!(read_decay_csv(&path).unwrap(), data);
    }
}
