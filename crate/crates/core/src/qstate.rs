//! Dense density-matrix engine for registers of one to four qubits.
//!
//! Basis ordering is little-endian: qubit `q` is bit `q` of the basis index,
//! so `|q3 q2 q1 q0>` has index `q0 + 2 q1 + 4 q2 + 8 q3`. Every k-qubit
//! operator passed to this module uses the same convention locally: the
//! first entry of `targets` is the least significant bit of the operator's
//! own index.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type CMatrix = DMatrix<Complex64>;

pub const MAX_QUBITS: usize = 4;

/// Numerical tolerances shared by every state operation and property test.
#[derive(Debug, Clone, Copy)]
pub struct Tolerances {
    pub trace: f64,
    pub hermitian: f64,
    pub psd: f64,
    pub unitary: f64,
    pub trace_preserving: f64,
    pub probability: f64,
}

pub const TOL: Tolerances = Tolerances {
    trace: 1e-10,
    hermitian: 1e-12,
    psd: 1e-9,
    unitary: 1e-10,
    trace_preserving: 1e-10,
    probability: 1e-12,
};

pub fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Pauli {
    I,
    X,
    Y,
    Z,
}

impl Pauli {
    pub fn matrix(self) -> CMatrix {
        let (o, z, i) = (c(1.0, 0.0), c(0.0, 0.0), c(0.0, 1.0));
        match self {
            Pauli::I => CMatrix::from_row_slice(2, 2, &[o, z, z, o]),
            Pauli::X => CMatrix::from_row_slice(2, 2, &[z, o, o, z]),
            Pauli::Y => CMatrix::from_row_slice(2, 2, &[z, -i, i, z]),
            Pauli::Z => CMatrix::from_row_slice(2, 2, &[o, z, z, -o]),
        }
    }

    fn from_char(ch: char) -> Option<Self> {
        match ch.to_ascii_uppercase() {
            'I' => Some(Pauli::I),
            'X' => Some(Pauli::X),
            'Y' => Some(Pauli::Y),
            'Z' => Some(Pauli::Z),
            _ => None,
        }
    }
}

/// One Pauli symbol per qubit. Character `i` of the textual form acts on
/// qubit `i`, so `"XYZ"` is X on qubit 0, Y on qubit 1 and Z on qubit 2.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PauliString(pub Vec<Pauli>);

impl PauliString {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn matrix(&self) -> CMatrix {
        self.0
            .iter()
            .fold(CMatrix::from_element(1, 1, c(1.0, 0.0)), |acc, p| {
                p.matrix().kronecker(&acc)
            })
    }
}

impl FromStr for PauliString {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.chars()
            .map(|ch| Pauli::from_char(ch).ok_or_else(|| Error::UnknownLabel(s.to_string())))
            .collect::<Result<Vec<_>>>()
            .map(PauliString)
    }
}

impl fmt::Display for PauliString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in &self.0 {
            write!(f, "{:?}", p)?;
        }
        Ok(())
    }
}

/// Completely positive map given by its Kraus operators on `n_targets` qubits.
#[derive(Debug, Clone)]
pub struct KrausChannel {
    operators: Vec<CMatrix>,
    n_targets: usize,
}

impl KrausChannel {
    pub fn new(operators: Vec<CMatrix>) -> Result<Self> {
        let first = operators
            .first()
            .ok_or_else(|| Error::param("operators", "at least one Kraus operator required"))?;
        let dim = first.nrows();
        let n_targets = register_size(dim)?;
        let mut sum = CMatrix::zeros(dim, dim);
        for k in &operators {
            if k.nrows() != dim || k.ncols() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: k.nrows(),
                });
            }
            sum += k.adjoint() * k;
        }
        let dev = max_abs_diff(&sum, &CMatrix::identity(dim, dim));
        if dev > TOL.trace_preserving {
            return Err(Error::NotTracePreserving(dev));
        }
        Ok(Self {
            operators,
            n_targets,
        })
    }

    pub fn identity(n_targets: usize) -> Self {
        let dim = 1 << n_targets;
        Self {
            operators: vec![CMatrix::identity(dim, dim)],
            n_targets,
        }
    }

    pub fn from_unitary(u: CMatrix) -> Result<Self> {
        check_unitary(&u)?;
        Self::new(vec![u])
    }

    /// Single-qubit phase damping that scales the X/Y Bloch components by
    /// `coherence` and leaves Z untouched.
    pub fn dephasing(coherence: f64) -> Result<Self> {
        if !(-1.0..=1.0).contains(&coherence) {
            return Err(Error::param("coherence", "must lie in [-1, 1]"));
        }
        let a = ((1.0 + coherence) / 2.0).sqrt();
        let b = ((1.0 - coherence) / 2.0).sqrt();
        Self::new(vec![
            Pauli::I.matrix().map(|z| z * a),
            Pauli::Z.matrix().map(|z| z * b),
        ])
    }

    pub fn operators(&self) -> &[CMatrix] {
        &self.operators
    }

    pub fn n_targets(&self) -> usize {
        self.n_targets
    }
}

/// Outcome of a sampled projective measurement.
#[derive(Debug, Clone)]
pub struct Measurement {
    pub outcome: u8,
    pub probability: f64,
    pub post_state: DensityMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    n_qubits: usize,
    data: CMatrix,
}

impl DensityMatrix {
    /// Validates the matrix against the density-matrix invariants.
    pub fn new(matrix: CMatrix) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() {
            return Err(Error::DimensionMismatch {
                expected: matrix.nrows(),
                got: matrix.ncols(),
            });
        }
        let n_qubits = register_size(matrix.nrows())?;
        let rho = Self {
            n_qubits,
            data: matrix,
        };
        rho.check_invariants()?;
        Ok(rho)
    }

    pub(crate) fn from_raw(data: CMatrix) -> Self {
        let n_qubits = data.nrows().trailing_zeros() as usize;
        Self { n_qubits, data }
    }

    /// `|0...0><0...0|`.
    pub fn zero_state(n_qubits: usize) -> Result<Self> {
        let dim = dim_for(n_qubits)?;
        let mut data = CMatrix::zeros(dim, dim);
        data[(0, 0)] = c(1.0, 0.0);
        Ok(Self { n_qubits, data })
    }

    pub fn maximally_mixed(n_qubits: usize) -> Result<Self> {
        let dim = dim_for(n_qubits)?;
        let data = CMatrix::identity(dim, dim).map(|z| z / dim as f64);
        Ok(Self { n_qubits, data })
    }

    /// `|psi><psi|` for a normalized state vector.
    pub fn from_pure(psi: &[Complex64]) -> Result<Self> {
        let n_qubits = register_size(psi.len())?;
        let norm: f64 = psi.iter().map(|a| a.norm_sqr()).sum();
        if (norm - 1.0).abs() > TOL.trace {
            return Err(Error::param("psi", format!("norm^2 = {norm}, expected 1")));
        }
        let v = nalgebra::DVector::from_column_slice(psi);
        let data = &v * v.adjoint();
        Ok(Self { n_qubits, data })
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.data
    }

    pub fn element(&self, row: usize, col: usize) -> Complex64 {
        self.data[(row, col)]
    }

    pub fn trace(&self) -> Complex64 {
        self.data.trace()
    }

    /// Diagonal in the computational basis.
    pub fn populations(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.data[(i, i)].re).collect()
    }

    pub fn check_invariants(&self) -> Result<()> {
        let herm = max_abs_diff(&self.data, &self.data.adjoint());
        if herm > TOL.hermitian {
            return Err(Error::InvalidState(format!(
                "not Hermitian (max deviation {herm:.3e})"
            )));
        }
        let tr = self.trace();
        if (tr.re - 1.0).abs() > TOL.trace || tr.im.abs() > TOL.trace {
            return Err(Error::InvalidState(format!("trace {tr} != 1")));
        }
        let min_eig = self.min_eigenvalue();
        if min_eig < -TOL.psd {
            return Err(Error::InvalidState(format!(
                "negative eigenvalue {min_eig:.3e}"
            )));
        }
        Ok(())
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        // symmetrise so tiny anti-Hermitian noise cannot upset the solver
        let h = (&self.data + self.data.adjoint()).map(|z| z * 0.5);
        let mut ev: Vec<f64> = h.symmetric_eigenvalues().iter().copied().collect();
        ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
        ev
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues().first().copied().unwrap_or(0.0)
    }

    /// Tensor product with `self` on the low qubits and `high` on the
    /// qubits above them.
    pub fn tensor(&self, high: &DensityMatrix) -> Result<Self> {
        let n_qubits = self.n_qubits + high.n_qubits;
        dim_for(n_qubits)?;
        Ok(Self {
            n_qubits,
            data: high.data.kronecker(&self.data),
        })
    }

    fn check_targets(&self, targets: &[usize]) -> Result<()> {
        for (i, &t) in targets.iter().enumerate() {
            if t >= self.n_qubits {
                return Err(Error::QubitOutOfRange {
                    index: t,
                    n_qubits: self.n_qubits,
                });
            }
            if targets[..i].contains(&t) {
                return Err(Error::DuplicateQubit(t));
            }
        }
        Ok(())
    }

    /// Returns `U rho U^dagger` with `U` acting on `targets`.
    pub fn apply_unitary(&self, u: &CMatrix, targets: &[usize]) -> Result<Self> {
        self.check_targets(targets)?;
        expect_dim(u, targets.len())?;
        check_unitary(u)?;
        Ok(Self {
            n_qubits: self.n_qubits,
            data: conjugate_local(&self.data, u, targets),
        })
    }

    /// Returns `sum_k K rho K^dagger`.
    pub fn apply_channel(&self, ch: &KrausChannel, targets: &[usize]) -> Result<Self> {
        self.check_targets(targets)?;
        if ch.n_targets != targets.len() {
            return Err(Error::DimensionMismatch {
                expected: ch.n_targets,
                got: targets.len(),
            });
        }
        let mut iter = ch.operators.iter();
        let first = iter.next().expect("channel has operators");
        let mut acc = conjugate_local(&self.data, first, targets);
        for k in iter {
            acc += conjugate_local(&self.data, k, targets);
        }
        Ok(Self {
            n_qubits: self.n_qubits,
            data: acc,
        })
    }

    /// Probability of `outcome` (0 for the +1 eigenvalue) when `qubit` is
    /// measured along `axis`.
    pub fn outcome_probability(&self, qubit: usize, axis: Pauli, outcome: u8) -> Result<f64> {
        let (projected, _) = self.project_unnormalized(qubit, axis, outcome)?;
        Ok(projected.trace().re)
    }

    fn project_unnormalized(
        &self,
        qubit: usize,
        axis: Pauli,
        outcome: u8,
    ) -> Result<(CMatrix, ())> {
        self.check_targets(&[qubit])?;
        if outcome > 1 {
            return Err(Error::param("outcome", "must be 0 or 1"));
        }
        let proj = axis_projector(axis, outcome)?;
        Ok((conjugate_local(&self.data, &proj, &[qubit]), ()))
    }

    /// Deterministically selects one measurement branch. The returned state
    /// is renormalized and keeps the measured qubit in the projected
    /// eigenstate.
    pub fn project(&self, qubit: usize, axis: Pauli, outcome: u8) -> Result<(Self, f64)> {
        let (m, _) = self.project_unnormalized(qubit, axis, outcome)?;
        let p = m.trace().re;
        if p <= TOL.probability {
            return Err(Error::ZeroProbability);
        }
        Ok((
            Self {
                n_qubits: self.n_qubits,
                data: m.map(|z| z / p),
            },
            p,
        ))
    }

    /// Unnormalized projection; the trace of the result is the branch
    /// probability. Used to build classical mixtures over branches.
    pub fn project_weighted(&self, qubit: usize, axis: Pauli, outcome: u8) -> Result<CMatrix> {
        Ok(self.project_unnormalized(qubit, axis, outcome)?.0)
    }

    /// Samples a projective measurement with Born probabilities.
    pub fn measure_projective<R: Rng + ?Sized>(
        &self,
        qubit: usize,
        axis: Pauli,
        rng: &mut R,
    ) -> Result<Measurement> {
        if axis == Pauli::I {
            return Err(Error::param("axis", "identity is not a measurement basis"));
        }
        let p0 = self.outcome_probability(qubit, axis, 0)?.clamp(0.0, 1.0);
        let outcome = if rng.random::<f64>() < p0 { 0 } else { 1 };
        let (post_state, probability) = self.project(qubit, axis, outcome)?;
        Ok(Measurement {
            outcome,
            probability,
            post_state,
        })
    }

    /// Reduced state on `keep`; qubit `j` of the result is `keep[j]`.
    pub fn partial_trace(&self, keep: &[usize]) -> Result<Self> {
        if keep.is_empty() {
            return Err(Error::EmptyKeep);
        }
        self.check_targets(keep)?;
        let traced: Vec<usize> = (0..self.n_qubits).filter(|q| !keep.contains(q)).collect();
        let k = keep.len();
        let out_dim = 1usize << k;
        let mut out = CMatrix::zeros(out_dim, out_dim);
        let scatter = |local: usize, env: usize| -> usize {
            let mut idx = 0usize;
            for (j, &q) in keep.iter().enumerate() {
                idx |= ((local >> j) & 1) << q;
            }
            for (j, &q) in traced.iter().enumerate() {
                idx |= ((env >> j) & 1) << q;
            }
            idx
        };
        for env in 0..(1usize << traced.len()) {
            for r in 0..out_dim {
                let gr = scatter(r, env);
                for cc in 0..out_dim {
                    out[(r, cc)] += self.data[(gr, scatter(cc, env))];
                }
            }
        }
        Ok(Self {
            n_qubits: k,
            data: out,
        })
    }

    /// `<psi|rho|psi>`, clipped into `[0, 1]` for reporting.
    pub fn fidelity_with_pure(&self, psi: &[Complex64]) -> Result<f64> {
        if psi.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: psi.len(),
            });
        }
        let mut acc = c(0.0, 0.0);
        for r in 0..self.dim() {
            if psi[r] == c(0.0, 0.0) {
                continue;
            }
            for cc in 0..self.dim() {
                acc += psi[r].conj() * self.data[(r, cc)] * psi[cc];
            }
        }
        Ok(acc.re.clamp(0.0, 1.0))
    }

    /// `Tr(rho P)`.
    pub fn pauli_expectation(&self, p: &PauliString) -> Result<f64> {
        if p.len() != self.n_qubits {
            return Err(Error::DimensionMismatch {
                expected: self.n_qubits,
                got: p.len(),
            });
        }
        // P is a signed permutation: P|j> = phase(j) |j ^ flip>
        let flip =
            p.0.iter()
                .enumerate()
                .filter(|(_, s)| matches!(s, Pauli::X | Pauli::Y))
                .fold(0usize, |m, (q, _)| m | (1 << q));
        let mut acc = c(0.0, 0.0);
        for j in 0..self.dim() {
            let mut phase = c(1.0, 0.0);
            for (q, s) in p.0.iter().enumerate() {
                let bit = (j >> q) & 1;
                phase *= match (s, bit) {
                    (Pauli::I, _) | (Pauli::X, _) => c(1.0, 0.0),
                    (Pauli::Z, 0) => c(1.0, 0.0),
                    (Pauli::Z, _) => c(-1.0, 0.0),
                    (Pauli::Y, 0) => c(0.0, 1.0),
                    (Pauli::Y, _) => c(0.0, -1.0),
                };
            }
            // Tr(rho P) = sum_j <j|rho P|j> = sum_j phase(j) rho[j, j ^ flip]
            acc += self.data[(j, j ^ flip)] * phase;
        }
        Ok(acc.re)
    }

    /// Classical mixture `sum_i w_i rho_i`; the weights must sum to one.
    pub fn mixture(parts: &[(f64, &DensityMatrix)]) -> Result<Self> {
        let (_, first) = parts
            .first()
            .ok_or_else(|| Error::param("parts", "empty mixture"))?;
        let mut data = CMatrix::zeros(first.dim(), first.dim());
        let mut total = 0.0;
        for (w, rho) in parts {
            if rho.dim() != first.dim() {
                return Err(Error::DimensionMismatch {
                    expected: first.dim(),
                    got: rho.dim(),
                });
            }
            data += rho.data.map(|z| z * *w);
            total += w;
        }
        if (total - 1.0).abs() > TOL.trace {
            return Err(Error::param(
                "weights",
                format!("sum to {total}, expected 1"),
            ));
        }
        Ok(Self {
            n_qubits: first.n_qubits,
            data,
        })
    }
}

/// Row-major serializable form of a density matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateRecord {
    pub n_qubits: usize,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl From<&DensityMatrix> for StateRecord {
    fn from(rho: &DensityMatrix) -> Self {
        let dim = rho.dim();
        let mut re = Vec::with_capacity(dim * dim);
        let mut im = Vec::with_capacity(dim * dim);
        for r in 0..dim {
            for cc in 0..dim {
                re.push(rho.data[(r, cc)].re);
                im.push(rho.data[(r, cc)].im);
            }
        }
        Self {
            n_qubits: rho.n_qubits,
            re,
            im,
        }
    }
}

impl TryFrom<&StateRecord> for DensityMatrix {
    type Error = Error;

    fn try_from(rec: &StateRecord) -> Result<Self> {
        let dim = dim_for(rec.n_qubits)?;
        if rec.re.len() != dim * dim || rec.im.len() != dim * dim {
            return Err(Error::DimensionMismatch {
                expected: dim * dim,
                got: rec.re.len(),
            });
        }
        let data = CMatrix::from_fn(dim, dim, |r, cc| {
            c(rec.re[r * dim + cc], rec.im[r * dim + cc])
        });
        DensityMatrix::new(data)
    }
}

fn dim_for(n_qubits: usize) -> Result<usize> {
    if n_qubits == 0 || n_qubits > MAX_QUBITS {
        return Err(Error::RegisterSize(n_qubits));
    }
    Ok(1 << n_qubits)
}

fn register_size(dim: usize) -> Result<usize> {
    if !dim.is_power_of_two() || dim < 2 {
        return Err(Error::DimensionMismatch {
            expected: 2,
            got: dim,
        });
    }
    let n = dim.trailing_zeros() as usize;
    dim_for(n)?;
    Ok(n)
}

fn expect_dim(u: &CMatrix, k: usize) -> Result<()> {
    let dim = 1usize << k;
    if u.nrows() != dim || u.ncols() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: u.nrows(),
        });
    }
    Ok(())
}

pub(crate) fn max_abs_diff(a: &CMatrix, b: &CMatrix) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).norm())
        .fold(0.0, f64::max)
}

pub fn check_unitary(u: &CMatrix) -> Result<()> {
    let dev = max_abs_diff(&(u.adjoint() * u), &CMatrix::identity(u.nrows(), u.ncols()));
    if dev > TOL.unitary {
        return Err(Error::NonUnitary(dev));
    }
    Ok(())
}

fn axis_projector(axis: Pauli, outcome: u8) -> Result<CMatrix> {
    if axis == Pauli::I {
        return Err(Error::param("axis", "identity is not a measurement basis"));
    }
    let sign = if outcome == 0 { 0.5 } else { -0.5 };
    let id = Pauli::I.matrix().map(|z| z * 0.5);
    Ok(id + axis.matrix().map(|z| z * sign))
}

/// `A rho A^dagger` where `A` acts on `targets` and the identity elsewhere.
fn conjugate_local(rho: &CMatrix, a: &CMatrix, targets: &[usize]) -> CMatrix {
    let dim = rho.nrows();
    let k = targets.len();
    let local = 1usize << k;
    let mask = targets.iter().fold(0usize, |m, &t| m | (1 << t));
    let offsets: Vec<usize> = (0..local)
        .map(|l| {
            targets
                .iter()
                .enumerate()
                .fold(0usize, |acc, (j, &t)| acc | (((l >> j) & 1) << t))
        })
        .collect();
    let bases: Vec<usize> = (0..dim).filter(|i| i & mask == 0).collect();

    let mut left = CMatrix::zeros(dim, dim);
    let mut buf = vec![c(0.0, 0.0); local];
    for col in 0..dim {
        for &base in &bases {
            for l in 0..local {
                buf[l] = rho[(base | offsets[l], col)];
            }
            for r in 0..local {
                let mut acc = c(0.0, 0.0);
                for l in 0..local {
                    acc += a[(r, l)] * buf[l];
                }
                left[(base | offsets[r], col)] = acc;
            }
        }
    }
    let mut out = CMatrix::zeros(dim, dim);
    for row in 0..dim {
        for &base in &bases {
            for l in 0..local {
                buf[l] = left[(row, base | offsets[l])];
            }
            for r in 0..local {
                let mut acc = c(0.0, 0.0);
                for l in 0..local {
                    acc += buf[l] * a[(r, l)].conj();
                }
                out[(row, base | offsets[r])] = acc;
            }
        }
    }
    out
}

/// Standard gates in the local little-endian convention.
pub mod gates {
    use super::{c, CMatrix, Pauli};

    pub fn hadamard() -> CMatrix {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        CMatrix::from_row_slice(2, 2, &[c(h, 0.0), c(h, 0.0), c(h, 0.0), c(-h, 0.0)])
    }

    pub fn pauli_x() -> CMatrix {
        Pauli::X.matrix()
    }

    pub fn pauli_z() -> CMatrix {
        Pauli::Z.matrix()
    }

    /// `exp(-i angle Z / 2)`.
    pub fn rz(angle: f64) -> CMatrix {
        let h = angle / 2.0;
        CMatrix::from_row_slice(
            2,
            2,
            &[
                c(h.cos(), -h.sin()),
                c(0.0, 0.0),
                c(0.0, 0.0),
                c(h.cos(), h.sin()),
            ],
        )
    }

    /// `exp(-i angle X / 2)`.
    pub fn rx(angle: f64) -> CMatrix {
        let h = angle / 2.0;
        CMatrix::from_row_slice(
            2,
            2,
            &[
                c(h.cos(), 0.0),
                c(0.0, -h.sin()),
                c(0.0, -h.sin()),
                c(h.cos(), 0.0),
            ],
        )
    }

    /// `exp(-i angle Y / 2)`.
    pub fn ry(angle: f64) -> CMatrix {
        let h = angle / 2.0;
        CMatrix::from_row_slice(
            2,
            2,
            &[
                c(h.cos(), 0.0),
                c(-h.sin(), 0.0),
                c(h.sin(), 0.0),
                c(h.cos(), 0.0),
            ],
        )
    }

    /// Two-qubit gate applying `on_zero` to the target (local qubit 1) when
    /// the control (local qubit 0) is `|0>` and `on_one` when it is `|1>`.
    pub fn controlled_pair(on_zero: &CMatrix, on_one: &CMatrix) -> CMatrix {
        let mut u = CMatrix::zeros(4, 4);
        for (ctrl, g) in [(0usize, on_zero), (1usize, on_one)] {
            for t_out in 0..2 {
                for t_in in 0..2 {
                    u[(ctrl + 2 * t_out, ctrl + 2 * t_in)] = g[(t_out, t_in)];
                }
            }
        }
        u
    }

    /// CNOT with the control on local qubit 0 and the target on local qubit 1.
    pub fn cnot() -> CMatrix {
        controlled_pair(&Pauli::I.matrix(), &Pauli::X.matrix())
    }
}
