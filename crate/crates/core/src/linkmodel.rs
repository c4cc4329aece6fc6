//! Single-photon heralded entanglement link: heralded two-qubit state,
//! success probability, rates and per-source error budget.
//!
//! Qubit 0 of the heralded state is the first node of the link, qubit 1 the
//! second. Basis state `|0>` is the bright (emitting) state, so the
//! population `p01` (first node bright, second dark) sits at basis index 2.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qstate::{c, CMatrix, DensityMatrix};

/// Coherence reduction per unit double-excitation probability. The phase and
/// double-excitation state maps are calibrated stand-ins; this coefficient
/// was fitted once to the reference A-B and B-C standalone budget rows and
/// is kept fixed.
pub const DOUBLE_EXCITATION_COHERENCE_COEFF: f64 = 1.935;

fn default_duty() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkParams {
    pub alpha_a: f64,
    pub alpha_b: f64,
    pub pdet_a: f64,
    pub pdet_b: f64,
    pub p_dc: f64,
    pub visibility: f64,
    pub phase_sigma_deg: f64,
    pub p_double: f64,
    pub attempt_duration_s: f64,
    /// Fraction of wall-clock time spent on entanglement attempts.
    #[serde(default = "default_duty")]
    pub duty_factor: f64,
}

impl LinkParams {
    /// A-B link of the reference setup.
    pub fn reference_ab() -> Self {
        Self {
            alpha_a: 0.07,
            alpha_b: 0.05,
            pdet_a: 3.6e-4,
            pdet_b: 4.4e-4,
            p_dc: 1.5e-7,
            visibility: 0.90,
            phase_sigma_deg: 30.0,
            p_double: 0.06,
            attempt_duration_s: 3.8e-6,
            duty_factor: 0.72,
        }
    }

    /// B-C link of the reference setup.
    pub fn reference_bc() -> Self {
        Self {
            alpha_a: 0.05,
            alpha_b: 0.10,
            pdet_a: 4.2e-4,
            pdet_b: 3.0e-4,
            p_dc: 1.5e-7,
            visibility: 0.90,
            phase_sigma_deg: 15.0,
            p_double: 0.08,
            attempt_duration_s: 5.0e-6,
            duty_factor: 0.68,
        }
    }

    /// Same link with every error source except double emission removed.
    pub fn ideal_except_alpha(&self) -> Self {
        Self {
            p_dc: 0.0,
            visibility: 1.0,
            phase_sigma_deg: 0.0,
            p_double: 0.0,
            ..*self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let open_unit = |field: &str, v: f64| {
            if v.is_finite() && (0.0..1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::param(field, "must lie in [0, 1)"))
            }
        };
        open_unit("alpha_a", self.alpha_a)?;
        open_unit("alpha_b", self.alpha_b)?;
        open_unit("p_double", self.p_double)?;
        for (field, v) in [("pdet_a", self.pdet_a), ("pdet_b", self.pdet_b)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::param(field, "must lie in (0, 1]"));
            }
        }
        if !(self.p_dc >= 0.0 && self.p_dc < 0.1 * self.pdet_a.min(self.pdet_b)) {
            return Err(Error::param(
                "p_dc",
                "must be non-negative and below 0.1 x min(pdet_a, pdet_b)",
            ));
        }
        if !(0.0..=1.0).contains(&self.visibility) {
            return Err(Error::param("visibility", "must lie in [0, 1]"));
        }
        if !(self.phase_sigma_deg >= 0.0 && self.phase_sigma_deg.is_finite()) {
            return Err(Error::param("phase_sigma_deg", "must be non-negative"));
        }
        if !(self.attempt_duration_s > 0.0 && self.attempt_duration_s.is_finite()) {
            return Err(Error::param("attempt_duration_s", "must be positive"));
        }
        if !(self.duty_factor > 0.0 && self.duty_factor <= 1.0) {
            return Err(Error::param("duty_factor", "must lie in (0, 1]"));
        }
        if self.alpha_a == 0.0 && self.alpha_b == 0.0 && self.p_dc == 0.0 {
            return Err(Error::param("alpha_a", "link can never herald"));
        }
        Ok(())
    }
}

/// Which of the two beam-splitter output detectors clicked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DetectorSign {
    Plus,
    Minus,
}

impl DetectorSign {
    pub fn value(self) -> f64 {
        match self {
            DetectorSign::Plus => 1.0,
            DetectorSign::Minus => -1.0,
        }
    }

    pub fn flip(self) -> Self {
        match self {
            DetectorSign::Plus => DetectorSign::Minus,
            DetectorSign::Minus => DetectorSign::Plus,
        }
    }

    pub const BOTH: [DetectorSign; 2] = [DetectorSign::Plus, DetectorSign::Minus];
}

/// Unnormalized per-attempt herald probabilities of the four basis states.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Populations {
    pub p00: f64,
    pub p01: f64,
    pub p10: f64,
    pub p11: f64,
}

impl Populations {
    pub fn total(&self) -> f64 {
        self.p00 + self.p01 + self.p10 + self.p11
    }

    /// Normalized values in little-endian basis order (index = q0 + 2 q1).
    pub fn normalized_by_index(&self) -> [f64; 4] {
        let t = self.total();
        [self.p00 / t, self.p10 / t, self.p01 / t, self.p11 / t]
    }
}

pub fn populations(p: &LinkParams) -> Populations {
    let (aa, ab) = (p.alpha_a, p.alpha_b);
    Populations {
        p00: aa * ab * (p.pdet_a + p.pdet_b + 2.0 * p.p_dc),
        p01: aa * (1.0 - ab) * (p.pdet_a + 2.0 * p.p_dc),
        p10: ab * (1.0 - aa) * (p.pdet_b + 2.0 * p.p_dc),
        p11: 2.0 * (1.0 - aa) * (1.0 - ab) * p.p_dc,
    }
}

pub fn success_probability(p: &LinkParams) -> f64 {
    populations(p).total()
}

/// Multiplicative coherence factor from Gaussian optical phase noise.
pub fn phase_coherence_factor(sigma_deg: f64) -> f64 {
    let s = sigma_deg.to_radians();
    (-0.5 * s * s).exp()
}

pub fn double_excitation_factor(p_double: f64) -> f64 {
    (1.0 - DOUBLE_EXCITATION_COHERENCE_COEFF * p_double).max(0.0)
}

#[derive(Debug, Clone)]
pub struct HeraldedLinkResult {
    pub state: DensityMatrix,
    pub p_tot: f64,
    pub detector_sign: DetectorSign,
    pub rate_hz: f64,
}

pub fn heralded_state(p: &LinkParams, sign: DetectorSign) -> Result<HeraldedLinkResult> {
    p.validate()?;
    let pops = populations(p);
    let p_tot = pops.total();
    // dark-count contributions to the coherence are neglected
    let coherence = sign.value()
        * (p.visibility * pops.p01 * pops.p10).sqrt()
        * phase_coherence_factor(p.phase_sigma_deg)
        * double_excitation_factor(p.p_double);
    let mut m = CMatrix::zeros(4, 4);
    let diag = pops.normalized_by_index();
    for (i, d) in diag.iter().enumerate() {
        m[(i, i)] = c(*d, 0.0);
    }
    m[(1, 2)] = c(coherence / p_tot, 0.0);
    m[(2, 1)] = c(coherence / p_tot, 0.0);
    Ok(HeraldedLinkResult {
        state: DensityMatrix::from_raw(m),
        p_tot,
        detector_sign: sign,
        rate_hz: p_tot / p.attempt_duration_s,
    })
}

/// `(|01> + sign |10>)/sqrt(2)`.
pub fn psi_target(sign: DetectorSign) -> Vec<num_complex::Complex64> {
    let h = std::f64::consts::FRAC_1_SQRT_2;
    vec![
        c(0.0, 0.0),
        c(h, 0.0),
        c(sign.value() * h, 0.0),
        c(0.0, 0.0),
    ]
}

pub fn link_fidelity(p: &LinkParams) -> Result<f64> {
    let r = heralded_state(p, DetectorSign::Plus)?;
    r.state.fidelity_with_pure(&psi_target(DetectorSign::Plus))
}

pub fn raw_rate_hz(p: &LinkParams) -> f64 {
    success_probability(p) / p.attempt_duration_s
}

pub fn duty_cycled_rate_hz(p: &LinkParams) -> f64 {
    raw_rate_hz(p) * p.duty_factor
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetEntry {
    pub source: String,
    pub infidelity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBudget {
    pub entries: Vec<BudgetEntry>,
    pub combined: f64,
}

impl ErrorBudget {
    pub fn get(&self, source: &str) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.source == source)
            .map(|e| e.infidelity)
    }
}

pub const SOURCE_DOUBLE_EMISSION: &str = "double emission";
pub const SOURCE_PHASE: &str = "phase uncertainty";
pub const SOURCE_DOUBLE_EXCITATION: &str = "double excitation";
pub const SOURCE_DISTINGUISHABILITY: &str = "distinguishability";
pub const SOURCE_DARK_COUNTS: &str = "dark counts";

/// Each entry is the infidelity added by that source on top of the
/// unavoidable double-emission error; the double-emission entry itself is
/// the infidelity with every other source off.
pub fn error_budget(p: &LinkParams) -> Result<ErrorBudget> {
    p.validate()?;
    let base = p.ideal_except_alpha();
    let f_base = 1.0 - link_fidelity(&base)?;
    let with = |q: LinkParams| -> Result<f64> { Ok(1.0 - link_fidelity(&q)? - f_base) };
    let entries = vec![
        (SOURCE_DOUBLE_EMISSION, f_base),
        (
            SOURCE_PHASE,
            with(LinkParams {
                phase_sigma_deg: p.phase_sigma_deg,
                ..base
            })?,
        ),
        (
            SOURCE_DOUBLE_EXCITATION,
            with(LinkParams {
                p_double: p.p_double,
                ..base
            })?,
        ),
        (
            SOURCE_DISTINGUISHABILITY,
            with(LinkParams {
                visibility: p.visibility,
                ..base
            })?,
        ),
        (
            SOURCE_DARK_COUNTS,
            with(LinkParams {
                p_dc: p.p_dc,
                ..base
            })?,
        ),
    ];
    Ok(ErrorBudget {
        entries: entries
            .into_iter()
            .map(|(s, v)| BudgetEntry {
                source: s.to_string(),
                infidelity: v,
            })
            .collect(),
        combined: 1.0 - link_fidelity(p)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttemptOutcome {
    pub success: bool,
    /// Attempt on which the link heralded, or the timeout on failure.
    pub attempts: u64,
}

/// Geometric number of attempts until the first herald, cut off at `timeout`.
pub fn sample_attempts_until_success<R: Rng + ?Sized>(
    p_tot: f64,
    rng: &mut R,
    timeout: u64,
) -> Result<AttemptOutcome> {
    check_attempt_args(p_tot, timeout)?;
    if p_tot >= 1.0 {
        return Ok(AttemptOutcome {
            success: true,
            attempts: 1,
        });
    }
    let u: f64 = 1.0 - rng.random::<f64>();
    let n = (u.ln() / (-p_tot).ln_1p()).ceil().max(1.0);
    if n > timeout as f64 {
        Ok(AttemptOutcome {
            success: false,
            attempts: timeout,
        })
    } else {
        Ok(AttemptOutcome {
            success: true,
            attempts: n as u64,
        })
    }
}

/// Attempt count drawn from the geometric law conditioned on heralding
/// within `timeout`.
pub fn sample_attempts_given_success<R: Rng + ?Sized>(
    p_tot: f64,
    rng: &mut R,
    timeout: u64,
) -> Result<u64> {
    check_attempt_args(p_tot, timeout)?;
    if p_tot >= 1.0 {
        return Ok(1);
    }
    let lq = (-p_tot).ln_1p();
    let cdf_t = -(lq * timeout as f64).exp_m1();
    let u: f64 = rng.random::<f64>();
    let n = ((-u * cdf_t).ln_1p() / lq)
        .ceil()
        .clamp(1.0, timeout as f64);
    Ok(n as u64)
}

fn check_attempt_args(p_tot: f64, timeout: u64) -> Result<()> {
    if timeout == 0 {
        return Err(Error::param("timeout_attempts", "must be at least 1"));
    }
    if !(p_tot > 0.0 && p_tot <= 1.0) {
        return Err(Error::param("p_tot", "must lie in (0, 1]"));
    }
    Ok(())
}

/// Probability that a block of `timeout` attempts heralds.
pub fn block_success_probability(p_tot: f64, timeout: u64) -> f64 {
    -((-p_tot).ln_1p() * timeout as f64).exp_m1()
}

/// One heralded attempt resolved at the level of emitters and detector clicks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeraldSample {
    /// Basis index of the emitter configuration (bit set = dark node).
    pub basis_index: usize,
    pub detector_sign: DetectorSign,
    /// Attempts spent up to and including this herald.
    pub attempts: u64,
}

/// Samples emitter brightness, photon detection and dark counts attempt by
/// attempt and returns the first attempt with exactly one detector click.
/// Attempts without any click are skipped with a geometric draw, so the
/// cost is independent of how small the click probability is.
pub fn sample_herald_microstate<R: Rng + ?Sized>(
    p: &LinkParams,
    rng: &mut R,
) -> Result<HeraldSample> {
    p.validate()?;
    let configs: [(usize, bool, bool); 4] = [
        (0, true, true),
        (1, false, true),
        (2, true, false),
        (3, false, false),
    ];
    let config_prob = |bright_a: bool, bright_b: bool| {
        (if bright_a { p.alpha_a } else { 1.0 - p.alpha_a })
            * (if bright_b { p.alpha_b } else { 1.0 - p.alpha_b })
    };
    let source_probs = |bright_a: bool, bright_b: bool| -> [f64; 4] {
        [
            if bright_a { p.pdet_a } else { 0.0 },
            if bright_b { p.pdet_b } else { 0.0 },
            p.p_dc,
            p.p_dc,
        ]
    };
    let none_fires = |q: &[f64]| q.iter().map(|x| 1.0 - x).product::<f64>();
    let weights: Vec<f64> = configs
        .iter()
        .map(|&(_, a, b)| config_prob(a, b) * (1.0 - none_fires(&source_probs(a, b))))
        .collect();
    let p_click: f64 = weights.iter().sum();

    let mut attempts = 0u64;
    loop {
        // attempts until the next attempt with at least one click
        let u: f64 = 1.0 - rng.random::<f64>();
        attempts += (u.ln() / (-p_click).ln_1p()).ceil().max(1.0) as u64;

        let mut r = rng.random::<f64>() * p_click;
        let mut chosen = configs[3];
        for (cfg, w) in configs.iter().zip(&weights) {
            if r < *w {
                chosen = *cfg;
                break;
            }
            r -= w;
        }
        let (index, bright_a, bright_b) = chosen;
        let q = source_probs(bright_a, bright_b);

        // sources: photon A, photon B, dark count on +, dark count on -
        let mut fired = [false; 4];
        let mut any = false;
        for i in 0..4 {
            fired[i] = if any {
                rng.random::<f64>() < q[i]
            } else {
                let rest = 1.0 - none_fires(&q[i..]);
                rest > 0.0 && rng.random::<f64>() < q[i] / rest
            };
            any |= fired[i];
        }
        let mut plus = fired[2];
        let mut minus = fired[3];
        for &photon in &fired[..2] {
            if photon {
                if rng.random::<bool>() {
                    plus = true;
                } else {
                    minus = true;
                }
            }
        }
        if plus != minus {
            let detector_sign = if plus {
                DetectorSign::Plus
            } else {
                DetectorSign::Minus
            };
            return Ok(HeraldSample {
                basis_index: index,
                detector_sign,
                attempts,
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn symmetric(alpha: f64, pdet: f64) -> LinkParams {
        LinkParams {
            alpha_a: alpha,
            alpha_b: alpha,
            pdet_a: pdet,
            pdet_b: pdet,
            p_dc: 0.0,
            visibility: 1.0,
            phase_sigma_deg: 0.0,
            p_double: 0.0,
            attempt_duration_s: 5e-6,
            duty_factor: 1.0,
        }
    }

    #[test]
    fn symmetric_ideal_fidelity_is_one_minus_alpha() {
        let f = link_fidelity(&symmetric(0.05, 4e-4)).unwrap();
        assert!((f - 0.95).abs() < 1e-12);
    }

    #[test]
    fn success_probability_direct_formula() {
        let (a, pd) = (0.05, 4e-4);
        let expected = a * a * 2.0 * pd + 2.0 * a * (1.0 - a) * pd;
        let got = success_probability(&symmetric(a, pd));
        assert!(((got - expected) / expected).abs() < 1e-12);
    }

    #[test]
    fn only_node_b_emits() {
        let p = LinkParams {
            alpha_a: 0.0,
            ..symmetric(0.05, 4e-4)
        };
        assert!((success_probability(&p) - 0.05 * 4e-4).abs() < 1e-18);
    }

    #[test]
    fn reference_herald_probabilities() {
        let ab = success_probability(&LinkParams::reference_ab());
        assert!((ab - 4.75e-5).abs() < 0.05e-5, "{ab}");
        let bc = success_probability(&LinkParams::reference_bc());
        assert!((bc - 5.13e-5).abs() < 0.05e-5, "{bc}");
    }

    #[test]
    fn zz_correlator_of_reference_state() {
        let p = LinkParams::reference_ab();
        let r = heralded_state(&p, DetectorSign::Plus).unwrap();
        let pops = populations(&p);
        let zz = r.state.pauli_expectation(&"ZZ".parse().unwrap()).unwrap();
        let expected = (pops.p00 + pops.p11 - pops.p01 - pops.p10) / pops.total();
        assert!((zz - expected).abs() < 1e-12);
        assert!((zz + 0.871).abs() < 0.005, "{zz}");
        // anticorrelated share of the heralded events
        assert!(((pops.p01 + pops.p10) / pops.total() - 0.935).abs() < 0.005);
    }

    #[test]
    fn detector_sign_only_flips_coherence() {
        let p = LinkParams::reference_bc();
        let a = heralded_state(&p, DetectorSign::Plus).unwrap().state;
        let b = heralded_state(&p, DetectorSign::Minus).unwrap().state;
        assert_eq!(a.populations(), b.populations());
        assert_eq!(a.element(1, 2), -b.element(1, 2));
        b.check_invariants().unwrap();
    }

    #[test]
    fn all_ideal_budget_is_zero() {
        let mut p = symmetric(1e-9, 4e-4);
        p.alpha_a = 1e-12;
        p.alpha_b = 1e-12;
        let b = error_budget(&p).unwrap();
        for e in &b.entries {
            assert!(e.infidelity.abs() < 1e-8, "{e:?}");
        }
        assert!(b.combined.abs() < 1e-8);
    }

    #[test]
    fn invalid_params_rejected() {
        let mut p = LinkParams::reference_ab();
        p.p_dc = 1e-4;
        assert!(p.validate().is_err());
        let mut p = LinkParams::reference_ab();
        p.visibility = 1.5;
        assert!(heralded_state(&p, DetectorSign::Plus).is_err());
    }

    #[test]
    fn certain_success_on_first_attempt() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let o = sample_attempts_until_success(1.0, &mut rng, 450).unwrap();
            assert_eq!(
                o,
                AttemptOutcome {
                    success: true,
                    attempts: 1
                }
            );
        }
    }

    #[test]
    fn block_success_probability_matches_closed_form() {
        let p = 4.7e-5;
        let exact = 1.0 - (1.0f64 - p).powi(450);
        assert!((block_success_probability(p, 450) - exact).abs() < 1e-12);
        assert!((exact - 0.021).abs() < 0.001);
    }

    #[test]
    fn conditioned_sampler_stays_within_timeout() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10_000 {
            let n = sample_attempts_given_success(5e-5, &mut rng, 450).unwrap();
            assert!((1..=450).contains(&n));
        }
        assert!(sample_attempts_given_success(5e-5, &mut rng, 0).is_err());
    }
}
