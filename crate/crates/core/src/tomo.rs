//! Readout correction of measured counts and fidelity assembly from
//! correlators.
//!
//! Outcome bitstrings are written with character `i` giving the bit of
//! qubit `i`; count vectors are indexed little-endian like density matrices.

use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::{apply_per_qubit, ReadoutModel};
use crate::qstate::{gates, DensityMatrix, Pauli, PauliString};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountVector {
    counts: Vec<u64>,
}

impl CountVector {
    pub fn new(counts: Vec<u64>) -> Result<Self> {
        if counts.len() < 2 || !counts.len().is_power_of_two() {
            return Err(Error::DimensionMismatch {
                expected: 2,
                got: counts.len(),
            });
        }
        Ok(Self { counts })
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn n_qubits(&self) -> usize {
        self.counts.len().trailing_zeros() as usize
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn frequencies(&self) -> Result<Vec<f64>> {
        let n = self.total();
        if n == 0 {
            return Err(Error::InsufficientSamples("count vector is empty".into()));
        }
        Ok(self.counts.iter().map(|&c| c as f64 / n as f64).collect())
    }

    /// Builds a count vector from `(bitstring, count)` pairs.
    pub fn from_bitstrings<'a>(entries: impl IntoIterator<Item = (&'a str, u64)>) -> Result<Self> {
        let entries: Vec<(&str, u64)> = entries.into_iter().collect();
        let k = entries
            .first()
            .map(|(b, _)| b.len())
            .ok_or_else(|| Error::InsufficientSamples("no count entries".into()))?;
        let mut counts = vec![0u64; 1usize << k];
        for (bits, n) in entries {
            counts[bitstring_index(bits, k)?] += n;
        }
        Self::new(counts)
    }
}

pub fn bitstring_index(bits: &str, k: usize) -> Result<usize> {
    if bits.len() != k {
        return Err(Error::UnknownLabel(bits.to_string()));
    }
    bits.chars()
        .enumerate()
        .try_fold(0usize, |acc, (q, ch)| match ch {
            '0' => Ok(acc),
            '1' => Ok(acc | (1 << q)),
            _ => Err(Error::UnknownLabel(bits.to_string())),
        })
}

pub fn index_bitstring(index: usize, k: usize) -> String {
    (0..k)
        .map(|q| if (index >> q) & 1 == 1 { '1' } else { '0' })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct CountRow {
    bitstring: String,
    count: u64,
}

pub fn read_counts_csv(path: &Path) -> Result<CountVector> {
    let mut rdr =
        csv::Reader::from_path(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let rows: Vec<CountRow> = rdr
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Io(e.to_string()))?;
    CountVector::from_bitstrings(rows.iter().map(|r| (r.bitstring.as_str(), r.count)))
}

pub fn write_counts_csv(path: &Path, counts: &CountVector) -> Result<()> {
    let mut w =
        csv::Writer::from_path(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let k = counts.n_qubits();
    for (i, &c) in counts.counts().iter().enumerate() {
        w.serialize(CountRow {
            bitstring: index_bitstring(i, k),
            count: c,
        })
        .map_err(|e| Error::Io(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::Io(e.to_string()))
}

/// Readout-corrected populations. Values are not clipped to `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectedPopulations {
    pub probabilities: Vec<f64>,
    pub sigma: Vec<f64>,
    /// Propagated multinomial covariance (readout-fidelity uncertainty is
    /// only included in the diagonal for the single-qubit case).
    pub covariance: Vec<Vec<f64>>,
}

impl CorrectedPopulations {
    /// Euclidean projection onto the probability simplex, for reporting
    /// physical values only.
    pub fn clipped(&self) -> Vec<f64> {
        project_to_simplex(&self.probabilities)
    }
}

pub fn project_to_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (i, x) in u.iter().enumerate() {
        cumsum += x;
        let t = (cumsum - 1.0) / (i + 1) as f64;
        if x - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

pub fn correct_single(counts: &CountVector, model: &ReadoutModel) -> Result<CorrectedPopulations> {
    if counts.n_qubits() != 1 {
        return Err(Error::DimensionMismatch {
            expected: 2,
            got: counts.counts().len(),
        });
    }
    model.validate()?;
    let n = counts.total() as f64;
    let m0 = counts.frequencies()?[0];
    let d = model.f0 + model.f1 - 1.0;
    let p0 = (model.f1 + m0 - 1.0) / d;
    let sigma_m = (m0 * (1.0 - m0) / n).sqrt();
    let var = (sigma_m / d).powi(2)
        + (p0 * model.sigma_f0 / d).powi(2)
        + ((1.0 - p0) * model.sigma_f1 / d).powi(2);
    Ok(CorrectedPopulations {
        probabilities: vec![p0, 1.0 - p0],
        sigma: vec![var.sqrt(); 2],
        covariance: vec![vec![var, -var], vec![-var, var]],
    })
}

/// Inverts the per-qubit readout maps on the measured frequencies.
pub fn invert_frequencies(m: &[f64], models: &[ReadoutModel]) -> Result<Vec<f64>> {
    let inv: Vec<_> = models
        .iter()
        .map(|r| r.inverse_matrix())
        .collect::<Result<_>>()?;
    apply_per_qubit(m, &inv)
}

pub fn correct_multi(
    counts: &CountVector,
    models: &[ReadoutModel],
) -> Result<CorrectedPopulations> {
    if models.len() != counts.n_qubits() {
        return Err(Error::DimensionMismatch {
            expected: counts.n_qubits(),
            got: models.len(),
        });
    }
    for m in models {
        m.validate()?;
    }
    let freq = counts.frequencies()?;
    let n = counts.total() as f64;
    let dim = freq.len();
    let probabilities = invert_frequencies(&freq, models)?;

    // columns of the inverse map
    let mut a = vec![vec![0.0; dim]; dim];
    for j in 0..dim {
        let mut e = vec![0.0; dim];
        e[j] = 1.0;
        let col = invert_frequencies(&e, models)?;
        for i in 0..dim {
            a[i][j] = col[i];
        }
    }
    let cov_m = |i: usize, j: usize| {
        if i == j {
            freq[i] * (1.0 - freq[i]) / n
        } else {
            -freq[i] * freq[j] / n
        }
    };
    let mut covariance = vec![vec![0.0; dim]; dim];
    for (i, row) in covariance.iter_mut().enumerate() {
        for (j, out) in row.iter_mut().enumerate() {
            let mut s = 0.0;
            for k in 0..dim {
                for l in 0..dim {
                    s += a[i][k] * cov_m(k, l) * a[j][l];
                }
            }
            *out = s;
        }
    }
    let sigma = (0..dim).map(|i| covariance[i][i].max(0.0).sqrt()).collect();
    Ok(CorrectedPopulations {
        probabilities,
        sigma,
        covariance,
    })
}

/// Outcome probabilities when every qubit is read out along the axis named
/// in `setting` (identity positions are read out in Z). Outcome 0 is the
/// +1 eigenvalue.
pub fn setting_probabilities(rho: &DensityMatrix, setting: &PauliString) -> Result<Vec<f64>> {
    if setting.len() != rho.n_qubits() {
        return Err(Error::DimensionMismatch {
            expected: rho.n_qubits(),
            got: setting.len(),
        });
    }
    let mut r = rho.clone();
    for (q, p) in setting.0.iter().enumerate() {
        let u = match p {
            Pauli::X => gates::ry(-std::f64::consts::FRAC_PI_2),
            Pauli::Y => gates::rx(std::f64::consts::FRAC_PI_2),
            Pauli::I | Pauli::Z => continue,
        };
        r = r.apply_unitary(&u, &[q])?;
    }
    Ok(r.populations().into_iter().map(|x| x.max(0.0)).collect())
}

/// Bit mask of the non-identity positions of `setting`.
pub fn setting_mask(setting: &PauliString) -> usize {
    setting
        .0
        .iter()
        .enumerate()
        .filter(|(_, p)| **p != Pauli::I)
        .fold(0, |m, (q, _)| m | (1 << q))
}

/// Expectation of the Z-parity over the qubits in `mask`.
pub fn parity_expectation(probs: &[f64], mask: usize) -> f64 {
    probs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            if (i & mask).count_ones() % 2 == 0 {
                *p
            } else {
                -p
            }
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub sigma: f64,
}

impl Estimate {
    pub fn new(value: f64, sigma: f64) -> Self {
        Self { value, sigma }
    }

    pub fn exact(value: f64) -> Self {
        Self { value, sigma: 0.0 }
    }
}

/// Empirical distribution summary of a Monte Carlo statistic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    pub n_samples: usize,
    pub mean: f64,
    pub std: f64,
    pub median: f64,
    /// 15.87 / 84.13 percentiles (1-sigma-equivalent interval).
    pub p16: f64,
    pub p84: f64,
    pub p2_5: f64,
    pub p97_5: f64,
}

impl McSummary {
    pub fn from_samples(mut v: Vec<f64>) -> Result<Self> {
        if v.is_empty() {
            return Err(Error::InsufficientSamples("no Monte Carlo samples".into()));
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = if v.len() > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let pct = |q: f64| {
            let pos = q * (v.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
        };
        Ok(Self {
            n_samples: v.len(),
            mean,
            std,
            median: pct(0.5),
            p16: pct(0.158_655_253_931_457_05),
            p84: pct(0.841_344_746_068_542_9),
            p2_5: pct(0.025),
            p97_5: pct(0.975),
        })
    }

    /// Half-width of the 16/84 percentile interval.
    pub fn half_width(&self) -> f64 {
        0.5 * (self.p84 - self.p16)
    }
}

pub const MIN_MC_SAMPLES: usize = 1000;
const MC_BLOCK: usize = 256;

pub fn sample_multinomial<R: Rng + ?Sized>(n: u64, probs: &[f64], rng: &mut R) -> Vec<u64> {
    let mut out = vec![0u64; probs.len()];
    let mut remaining = n;
    let mut mass = 1.0;
    for (i, &p) in probs.iter().enumerate() {
        if remaining == 0 {
            break;
        }
        if i + 1 == probs.len() || mass <= 0.0 {
            out[i] = remaining;
            break;
        }
        let q = (p / mass).clamp(0.0, 1.0);
        let k = Binomial::new(remaining, q)
            .expect("valid binomial")
            .sample(rng);
        out[i] = k;
        remaining -= k;
        mass -= p;
    }
    out
}

fn sample_fidelity<R: Rng + ?Sized>(mean: f64, sigma: f64, rng: &mut R) -> f64 {
    if sigma == 0.0 {
        return mean;
    }
    let normal = Normal::new(mean, sigma).expect("valid normal");
    for _ in 0..10_000 {
        let x = normal.sample(rng);
        if x > 0.5 && x <= 1.0 {
            return x;
        }
    }
    mean
}

fn resample_model<R: Rng + ?Sized>(m: &ReadoutModel, rng: &mut R) -> ReadoutModel {
    ReadoutModel {
        f0: sample_fidelity(m.f0, m.sigma_f0, rng),
        f1: sample_fidelity(m.f1, m.sigma_f1, rng),
        ..*m
    }
}

/// Propagates count and readout-fidelity uncertainty into an arbitrary
/// statistic of the corrected populations of several measurement settings.
/// Counts are resampled multinomially; each fidelity is drawn once per
/// sample from a normal truncated to `(0.5, 1]` and shared across settings.
/// The work is split into fixed blocks with seeds drawn from `rng`, so the
/// result does not depend on the thread count.
pub fn monte_carlo_uncertainty_sets<R, F>(
    settings: &[CountVector],
    models: &[ReadoutModel],
    n_samples: usize,
    rng: &mut R,
    statistic: F,
) -> Result<McSummary>
where
    R: Rng + ?Sized,
    F: Fn(&[Vec<f64>]) -> f64 + Sync,
{
    if n_samples < MIN_MC_SAMPLES {
        return Err(Error::InsufficientSamples(format!(
            "Monte Carlo needs at least {MIN_MC_SAMPLES} samples, got {n_samples}"
        )));
    }
    for s in settings {
        if s.n_qubits() != models.len() {
            return Err(Error::DimensionMismatch {
                expected: models.len(),
                got: s.n_qubits(),
            });
        }
        if s.total() == 0 {
            return Err(Error::InsufficientSamples("empty count vector".into()));
        }
    }
    for m in models {
        m.validate()?;
    }
    let freqs: Vec<Vec<f64>> = settings
        .iter()
        .map(|s| s.frequencies())
        .collect::<Result<_>>()?;
    let n_blocks = n_samples.div_ceil(MC_BLOCK);
    let seeds: Vec<u64> = (0..n_blocks).map(|_| rng.random()).collect();
    let blocks: Vec<Vec<f64>> = seeds
        .par_iter()
        .enumerate()
        .map(|(b, &seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let len = MC_BLOCK.min(n_samples - b * MC_BLOCK);
            (0..len)
                .map(|_| {
                    let ms: Vec<ReadoutModel> =
                        models.iter().map(|m| resample_model(m, &mut rng)).collect();
                    let pops: Vec<Vec<f64>> = settings
                        .iter()
                        .zip(&freqs)
                        .map(|(s, f)| {
                            let n = s.total();
                            let c = sample_multinomial(n, f, &mut rng);
                            let m: Vec<f64> = c.iter().map(|&x| x as f64 / n as f64).collect();
                            invert_frequencies(&m, &ms).expect("validated models")
                        })
                        .collect();
                    statistic(&pops)
                })
                .collect()
        })
        .collect();
    McSummary::from_samples(blocks.into_iter().flatten().collect())
}

pub fn monte_carlo_uncertainty<R, F>(
    counts: &CountVector,
    models: &[ReadoutModel],
    n_samples: usize,
    rng: &mut R,
    statistic: F,
) -> Result<McSummary>
where
    R: Rng + ?Sized,
    F: Fn(&[f64]) -> f64 + Sync,
{
    monte_carlo_uncertainty_sets(std::slice::from_ref(counts), models, n_samples, rng, |p| {
        statistic(&p[0])
    })
}

/// The seven correlators entering the three-qubit GHZ fidelity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GhzCorrelators {
    pub izz: Estimate,
    pub ziz: Estimate,
    pub zzi: Estimate,
    pub xxx: Estimate,
    pub xyy: Estimate,
    pub yxy: Estimate,
    pub yyx: Estimate,
}

impl GhzCorrelators {
    pub const LABELS: [&'static str; 7] = ["IZZ", "ZIZ", "ZZI", "XXX", "XYY", "YXY", "YYX"];
    pub const SIGNS: [f64; 7] = [1.0, 1.0, 1.0, 1.0, -1.0, -1.0, -1.0];

    pub fn as_array(&self) -> [Estimate; 7] {
        [
            self.izz, self.ziz, self.zzi, self.xxx, self.xyy, self.yxy, self.yyx,
        ]
    }

    pub fn from_values(v: [f64; 7]) -> Self {
        let e = |i: usize| Estimate::exact(v[i]);
        Self {
            izz: e(0),
            ziz: e(1),
            zzi: e(2),
            xxx: e(3),
            xyy: e(4),
            yxy: e(5),
            yyx: e(6),
        }
    }
}

pub fn ghz_fidelity_values(v: &[f64; 7]) -> f64 {
    (1.0 + v
        .iter()
        .zip(GhzCorrelators::SIGNS)
        .map(|(x, s)| s * x)
        .sum::<f64>())
        / 8.0
}

/// `(1 + <IZZ> + <ZIZ> + <ZZI> + <XXX> - <XYY> - <YXY> - <YYX>) / 8` with
/// uncertainties added in quadrature.
pub fn ghz_fidelity(c: &GhzCorrelators) -> Estimate {
    let arr = c.as_array();
    let values: [f64; 7] = std::array::from_fn(|i| arr[i].value);
    let var: f64 = arr.iter().map(|e| (e.sigma / 8.0).powi(2)).sum();
    Estimate::new(ghz_fidelity_values(&values), var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BellLabel {
    PhiPlus,
    PhiMinus,
    PsiPlus,
    PsiMinus,
}

impl BellLabel {
    /// Signs of `<XX>`, `<YY>`, `<ZZ>` for the ideal state.
    pub fn signs(self) -> [f64; 3] {
        match self {
            BellLabel::PhiPlus => [1.0, -1.0, 1.0],
            BellLabel::PhiMinus => [-1.0, 1.0, 1.0],
            BellLabel::PsiPlus => [1.0, 1.0, -1.0],
            BellLabel::PsiMinus => [-1.0, -1.0, -1.0],
        }
    }
}

impl FromStr for BellLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s
            .chars()
            .filter(|c| !c.is_whitespace() && *c != '_')
            .collect::<String>()
            .to_ascii_lowercase();
        match norm.as_str() {
            "phi+" | "phiplus" => Ok(BellLabel::PhiPlus),
            "phi-" | "phiminus" => Ok(BellLabel::PhiMinus),
            "psi+" | "psiplus" => Ok(BellLabel::PsiPlus),
            "psi-" | "psiminus" => Ok(BellLabel::PsiMinus),
            _ => Err(Error::UnknownLabel(s.to_string())),
        }
    }
}

/// `(1 + s_x <XX> + s_y <YY> + s_z <ZZ>) / 4`.
pub fn bell_fidelity(xx: Estimate, yy: Estimate, zz: Estimate, target: BellLabel) -> Estimate {
    let s = target.signs();
    let value = (1.0 + s[0] * xx.value + s[1] * yy.value + s[2] * zz.value) / 4.0;
    let sigma = ((xx.sigma.powi(2) + yy.sigma.powi(2) + zz.sigma.powi(2)).sqrt()) / 4.0;
    Estimate::new(value, sigma)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_readout_single() {
        let c = CountVector::new(vec![70, 30]).unwrap();
        let r = correct_single(&c, &ReadoutModel::perfect()).unwrap();
        assert!((r.probabilities[0] - 0.7).abs() < 1e-15);
        assert!((r.sigma[0] - (0.21f64 / 100.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn single_direct_formula() {
        let c = CountVector::new(vec![500, 500]).unwrap();
        let m = ReadoutModel::new(0.95, 0.99).unwrap();
        let r = correct_single(&c, &m).unwrap();
        assert!((r.probabilities[0] - 0.49 / 0.94).abs() < 1e-12);
        assert!((r.probabilities[0] - 0.5213).abs() < 1e-4);
    }

    #[test]
    fn multi_with_perfect_models_is_identity() {
        let c = CountVector::new(vec![10, 20, 30, 40]).unwrap();
        let r = correct_multi(&c, &[ReadoutModel::perfect(); 2]).unwrap();
        for (p, m) in r.probabilities.iter().zip([0.1, 0.2, 0.3, 0.4]) {
            assert!((p - m).abs() < 1e-15);
        }
        assert!((r.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn singular_model_rejected() {
        let c = CountVector::new(vec![10, 20]).unwrap();
        let m = ReadoutModel {
            f0: 0.5,
            f1: 0.5,
            sigma_f0: 0.0,
            sigma_f1: 0.0,
        };
        assert!(correct_single(&c, &m).is_err());
    }

    #[test]
    fn bitstring_convention() {
        assert_eq!(bitstring_index("10", 2).unwrap(), 1);
        assert_eq!(bitstring_index("011", 3).unwrap(), 6);
        assert_eq!(index_bitstring(6, 3), "011");
        assert!(bitstring_index("1x", 2).is_err());
    }

    #[test]
    fn ghz_fidelity_limits() {
        let ideal = GhzCorrelators::from_values([1.0, 1.0, 1.0, 1.0, -1.0, -1.0, -1.0]);
        assert!((ghz_fidelity(&ideal).value - 1.0).abs() < 1e-15);
        let mixed = GhzCorrelators::from_values([0.0; 7]);
        assert!((ghz_fidelity(&mixed).value - 0.125).abs() < 1e-15);
    }

    #[test]
    fn bell_fidelity_ideal_and_labels() {
        let e = Estimate::exact;
        let f = bell_fidelity(e(1.0), e(1.0), e(-1.0), "Psi+".parse().unwrap());
        assert!((f.value - 1.0).abs() < 1e-15);
        assert!("chi+".parse::<BellLabel>().is_err());
    }

    #[test]
    fn simplex_projection() {
        let p = project_to_simplex(&[1.05, -0.05]);
        assert!((p[0] - 1.0).abs() < 1e-15 && p[1] == 0.0);
        let q = project_to_simplex(&[0.3, 0.7]);
        assert!((q[0] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn mc_rejects_small_sample_counts() {
        let c = CountVector::new(vec![5, 5]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(
            monte_carlo_uncertainty(&c, &[ReadoutModel::perfect()], 10, &mut rng, |p| p[0])
                .is_err()
        );
    }

    #[test]
    fn mc_degenerate_vertex() {
        let c = CountVector::new(vec![100, 0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = monte_carlo_uncertainty(&c, &[ReadoutModel::perfect()], 1000, &mut rng, |p| p[0])
            .unwrap();
        assert_eq!((s.mean, s.std, s.p16, s.p84), (1.0, 0.0, 1.0, 1.0));
    }

    #[test]
    fn setting_parity_matches_pauli_expectation() {
        use crate::qstate::c;
        let h = 0.5;
        let psi = [c(h, 0.0), c(0.0, h), c(h, 0.0), c(0.0, -h)];
        let rho = DensityMatrix::from_pure(&psi).unwrap();
        for label in ["XX", "YY", "ZZ", "XY", "YZ", "IX", "YI"] {
            let s: PauliString = label.parse().unwrap();
            let probs = setting_probabilities(&rho, &s).unwrap();
            let parity = parity_expectation(&probs, setting_mask(&s));
            let direct = rho.pauli_expectation(&s).unwrap();
            assert!(
                (parity - direct).abs() < 1e-12,
                "{label}: {parity} vs {direct}"
            );
        }
    }
}
