//! Three-node protocol engine: double-link establishment, GHZ distribution
//! and entanglement swapping, with serial classical messaging, the
//! feed-forward decision tables and nuclear-spin phase feed-forward.
//!
//! Register layout of the four-qubit working state: Alice's communication
//! qubit is qubit 0, Bob's memory qubit 1, Bob's communication qubit 2 and
//! Charlie's communication qubit 3.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::f64::consts::{PI, TAU};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linkmodel::{self, DetectorSign, LinkParams};
use crate::noise::{self, MemoryDecayParams, NuclearSpinParams, ReadoutModel};
use crate::phasestab::LinkId;
use crate::qstate::{c, gates, CMatrix, DensityMatrix, Pauli, StateRecord};
use crate::tomo::GhzCorrelators;

pub const QUBIT_ALICE: usize = 0;
pub const QUBIT_MEMORY: usize = 1;
pub const QUBIT_BOB: usize = 2;
pub const QUBIT_CHARLIE: usize = 3;

pub const MAX_PAYLOAD_BITS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NodeId {
    Alice,
    Bob,
    Charlie,
}

impl NodeId {
    pub fn has_memory(self) -> bool {
        self == NodeId::Bob
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            NodeId::Alice => "Alice",
            NodeId::Bob => "Bob",
            NodeId::Charlie => "Charlie",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProtocolKind {
    DoubleLink,
    Ghz,
    Swap,
}

impl FromStr for ProtocolKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "double-link" | "double_link" => Ok(ProtocolKind::DoubleLink),
            "ghz" => Ok(ProtocolKind::Ghz),
            "swap" => Ok(ProtocolKind::Swap),
            _ => Err(Error::UnknownLabel(s.to_string())),
        }
    }
}

/// Pauli correction applied at Charlie. `ZX` applies X first, then Z.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Correction {
    I,
    X,
    Z,
    ZX,
}

impl Correction {
    pub fn matrix(self) -> CMatrix {
        match self {
            Correction::I => CMatrix::identity(2, 2),
            Correction::X => gates::pauli_x(),
            Correction::Z => gates::pauli_z(),
            Correction::ZX => gates::pauli_z() * gates::pauli_x(),
        }
    }

    /// Two-bit code sent from Bob to Charlie.
    pub fn code(self) -> [u8; 2] {
        match self {
            Correction::I => [0, 0],
            Correction::X => [0, 1],
            Correction::Z => [1, 0],
            Correction::ZX => [1, 1],
        }
    }

    pub fn from_code(bits: &[u8]) -> Result<Self> {
        match bits {
            [0, 0] => Ok(Correction::I),
            [0, 1] => Ok(Correction::X),
            [1, 0] => Ok(Correction::Z),
            [1, 1] => Ok(Correction::ZX),
            _ => Err(Error::param("payload_bits", "not a correction code")),
        }
    }
}

use DetectorSign::{Minus as M, Plus as P};

/// GHZ branches keyed by (A-B sign, B-C sign, Bob's reported outcome).
pub const GHZ_FEEDFORWARD: [((DetectorSign, DetectorSign, u8), Correction); 8] = [
    ((P, P, 0), Correction::X),
    ((P, P, 1), Correction::I),
    ((P, M, 0), Correction::ZX),
    ((P, M, 1), Correction::Z),
    ((M, P, 0), Correction::ZX),
    ((M, P, 1), Correction::Z),
    ((M, M, 0), Correction::X),
    ((M, M, 1), Correction::I),
];

/// Swap branches keyed by (A-B sign, B-C sign, memory bit, comm bit).
pub const SWAP_FEEDFORWARD: [((DetectorSign, DetectorSign, u8, u8), Correction); 16] = [
    ((P, P, 0, 0), Correction::X),
    ((P, P, 0, 1), Correction::I),
    ((P, P, 1, 0), Correction::ZX),
    ((P, P, 1, 1), Correction::Z),
    ((P, M, 0, 0), Correction::ZX),
    ((P, M, 0, 1), Correction::Z),
    ((P, M, 1, 0), Correction::X),
    ((P, M, 1, 1), Correction::I),
    ((M, P, 0, 0), Correction::ZX),
    ((M, P, 0, 1), Correction::Z),
    ((M, P, 1, 0), Correction::X),
    ((M, P, 1, 1), Correction::I),
    ((M, M, 0, 0), Correction::X),
    ((M, M, 0, 1), Correction::I),
    ((M, M, 1, 0), Correction::ZX),
    ((M, M, 1, 1), Correction::Z),
];

pub fn ghz_correction(sign_ab: DetectorSign, sign_bc: DetectorSign, outcome: u8) -> Correction {
    GHZ_FEEDFORWARD
        .iter()
        .find(|(k, _)| *k == (sign_ab, sign_bc, outcome))
        .map(|(_, v)| *v)
        .expect("table covers every branch")
}

pub fn swap_correction(sign_ab: DetectorSign, sign_bc: DetectorSign, m: u8, b: u8) -> Correction {
    SWAP_FEEDFORWARD
        .iter()
        .find(|(k, _)| *k == (sign_ab, sign_bc, m, b))
        .map(|(_, v)| *v)
        .expect("table covers every branch")
}

/// `(|000> + |111>)/sqrt(2)` on (Alice, memory, Charlie).
pub fn ghz_target() -> Vec<Complex64> {
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let mut v = vec![c(0.0, 0.0); 8];
    v[0] = c(h, 0.0);
    v[7] = c(h, 0.0);
    v
}

/// `(|00> + |11>)/sqrt(2)` on (Alice, Charlie).
pub fn phi_plus() -> Vec<Complex64> {
    let h = std::f64::consts::FRAC_1_SQRT_2;
    vec![c(h, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(h, 0.0)]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NuclearFeedForward {
    pub acquired_rad: f64,
    pub delay_s: f64,
    pub rotation_rad: f64,
    /// Net phase left on the memory after compensation, in `(-pi, pi]`.
    pub quantization_error_rad: f64,
}

/// Compensation of the memory precession acquired during `n_attempts`
/// entangling attempts. The compensating rotation is implemented as a wait
/// of an integer number of `resolution_s` steps, so it is quantized to
/// `2 pi resolution_s / tau_L`.
pub fn nuclear_phase_feedforward(
    n_attempts: u64,
    attempt_duration_s: f64,
    nuclear: &NuclearSpinParams,
    resolution_s: f64,
) -> Result<NuclearFeedForward> {
    let tau = nuclear.tau_larmor_s;
    if !(tau > 0.0) {
        return Err(Error::param("tau_larmor_s", "must be positive"));
    }
    if !(resolution_s > 0.0) {
        return Err(Error::param("feedforward_resolution_s", "must be positive"));
    }
    if resolution_s > tau {
        return Err(Error::ResolutionTooCoarse {
            resolution_s,
            tau_larmor_s: tau,
        });
    }
    if !(attempt_duration_s >= 0.0) {
        return Err(Error::param("attempt_duration_s", "must be non-negative"));
    }
    let turns = (n_attempts as f64 * attempt_duration_s / tau).fract();
    let acquired = TAU * turns;
    let needed_turns = (1.0 - turns).fract();
    let steps = (needed_turns * tau / resolution_s).round();
    let delay_s = steps * resolution_s;
    let rotation = TAU * delay_s / tau;
    Ok(NuclearFeedForward {
        acquired_rad: acquired,
        delay_s,
        rotation_rad: rotation,
        quantization_error_rad: wrap_rad(acquired + rotation),
    })
}

fn wrap_rad(x: f64) -> f64 {
    let r = (x + PI).rem_euclid(TAU) - PI;
    if r == -PI {
        PI
    } else {
        r
    }
}

/// Serial line timing between the node controllers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimingConfig {
    pub bit_interval_s: f64,
    pub decode_delay_s: f64,
    /// Added before every (re)started sequence.
    pub restart_preparation_s: f64,
    /// Swap of Bob's communication qubit into the memory.
    pub memory_swap_s: f64,
    /// One gate-plus-readout step on Bob.
    pub bob_readout_s: f64,
    pub cr_check_s: f64,
}

impl Default for TimingConfig {
    fn default() -> Self {
        Self {
            bit_interval_s: 60e-9,
            decode_delay_s: 2e-6,
            restart_preparation_s: 0.0,
            memory_swap_s: 500e-6,
            bob_readout_s: 50e-6,
            cr_check_s: 100e-6,
        }
    }
}

impl TimingConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("bit_interval_s", self.bit_interval_s),
            ("decode_delay_s", self.decode_delay_s),
            ("restart_preparation_s", self.restart_preparation_s),
            ("memory_swap_s", self.memory_swap_s),
            ("bob_readout_s", self.bob_readout_s),
            ("cr_check_s", self.cr_check_s),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::param(field, "must be a non-negative duration"));
            }
        }
        if self.bit_interval_s > 60e-9 + 1e-15 {
            return Err(Error::param("bit_interval_s", "must not exceed 60 ns"));
        }
        if self.decode_delay_s > 2e-6 + 1e-15 {
            return Err(Error::param("decode_delay_s", "must not exceed 2 us"));
        }
        Ok(())
    }

    fn message_latency(&self, bits: usize) -> f64 {
        bits as f64 * self.bit_interval_s + self.decode_delay_s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassicalMessage {
    pub sender: NodeId,
    pub receiver: NodeId,
    pub payload_bits: Vec<u8>,
    pub send_time_s: f64,
    pub delivery_time_s: f64,
}

impl ClassicalMessage {
    pub fn new(
        sender: NodeId,
        receiver: NodeId,
        payload_bits: Vec<u8>,
        send_time_s: f64,
        timing: &TimingConfig,
    ) -> Result<Self> {
        if payload_bits.is_empty() || payload_bits.len() > MAX_PAYLOAD_BITS {
            return Err(Error::param("payload_bits", "must hold 1 to 5 bits"));
        }
        if payload_bits.iter().any(|&b| b > 1) {
            return Err(Error::param("payload_bits", "bits must be 0 or 1"));
        }
        if sender == receiver {
            return Err(Error::param("receiver", "must differ from the sender"));
        }
        let delivery_time_s = send_time_s + timing.message_latency(payload_bits.len());
        Ok(Self {
            sender,
            receiver,
            payload_bits,
            send_time_s,
            delivery_time_s,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EventKind {
    SequenceStart {
        restarts: u64,
    },
    LinkHerald {
        link: LinkId,
        attempts: u64,
        sign: DetectorSign,
    },
    MemorySwap,
    NuclearFeedForward {
        rotation_rad: f64,
        quantization_error_rad: f64,
    },
    MessageSent {
        receiver: NodeId,
        bits: Vec<u8>,
        delivery_time_s: f64,
    },
    MessageDelivered {
        sender: NodeId,
        bits: Vec<u8>,
    },
    Readout {
        qubit: usize,
        reported: u8,
    },
    CrCheck {
        passed: bool,
    },
    FeedForward {
        correction: Correction,
    },
    Heralded {
        success: bool,
    },
    RestartLimit {
        restarts: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time_s: f64,
    pub seq: u64,
    pub node: NodeId,
    pub kind: EventKind,
}

struct Scheduled(Event);

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    // reversed so the max-heap pops the earliest event
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .0
            .time_s
            .total_cmp(&self.0.time_s)
            .then(other.0.seq.cmp(&self.0.seq))
    }
}

/// Time-ordered event queue. Ties are broken by scheduling order.
#[derive(Default)]
pub struct EventQueue {
    heap: BinaryHeap<Scheduled>,
    next_seq: u64,
    // busy windows of Bob's OR-merged input port
    bob_port: Vec<(f64, f64)>,
}

impl EventQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn schedule(&mut self, time_s: f64, node: NodeId, kind: EventKind) -> u64 {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Scheduled(Event {
            time_s,
            seq,
            node,
            kind,
        }));
        seq
    }

    /// Schedules the send and delivery events of `msg`. A message reaching
    /// Bob while another is still being received or decoded is a collision.
    pub fn serial_comm(&mut self, msg: &ClassicalMessage) -> Result<f64> {
        if msg.receiver == NodeId::Bob {
            let window = (msg.send_time_s, msg.delivery_time_s);
            if let Some(&(start, _)) = self
                .bob_port
                .iter()
                .find(|(s, e)| window.0 < *e && *s < window.1)
            {
                return Err(Error::MessageCollision {
                    receiver: msg.receiver.to_string(),
                    first_s: start,
                    second_s: msg.send_time_s,
                });
            }
            self.bob_port.push(window);
        }
        self.schedule(
            msg.send_time_s,
            msg.sender,
            EventKind::MessageSent {
                receiver: msg.receiver,
                bits: msg.payload_bits.clone(),
                delivery_time_s: msg.delivery_time_s,
            },
        );
        self.schedule(
            msg.delivery_time_s,
            msg.receiver,
            EventKind::MessageDelivered {
                sender: msg.sender,
                bits: msg.payload_bits.clone(),
            },
        );
        Ok(msg.delivery_time_s)
    }

    pub fn pop(&mut self) -> Option<Event> {
        self.heap.pop().map(|s| s.0)
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn into_log(mut self) -> Vec<Event> {
        let mut out = Vec::with_capacity(self.heap.len());
        while let Some(e) = self.pop() {
            out.push(e);
        }
        out
    }
}

/// Which error sources are active. Switching one off replaces it by its
/// ideal counterpart (pure Bell pair, no dephasing, perfect readout, ...).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSwitches {
    pub link_ab: bool,
    pub link_bc: bool,
    pub memory_dephasing: bool,
    pub nuclear_quantization: bool,
    pub depolarizing: bool,
    pub readout: bool,
}

impl Default for NoiseSwitches {
    fn default() -> Self {
        Self::all(true)
    }
}

impl NoiseSwitches {
    pub fn all(on: bool) -> Self {
        Self {
            link_ab: on,
            link_bc: on,
            memory_dephasing: on,
            nuclear_quantization: on,
            depolarizing: on,
            readout: on,
        }
    }
}

fn default_timeout() -> u64 {
    450
}
fn default_cr() -> f64 {
    0.9
}
fn default_resolution() -> f64 {
    2e-9
}
fn default_max_restarts() -> u64 {
    10_000_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    pub link_ab: LinkParams,
    pub link_bc: LinkParams,
    #[serde(default = "default_timeout")]
    pub timeout_attempts: u64,
    pub memory: MemoryDecayParams,
    #[serde(default)]
    pub nuclear: NuclearSpinParams,
    pub readout_alice: ReadoutModel,
    pub readout_bob: ReadoutModel,
    pub readout_charlie: ReadoutModel,
    pub swap_gate_depolarizing_p: f64,
    #[serde(default = "default_cr")]
    pub cr_check_pass_prob: f64,
    #[serde(default)]
    pub ghz_herald_outcome: u8,
    #[serde(default = "default_resolution")]
    pub feedforward_resolution_s: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_max_restarts")]
    pub max_restarts: u64,
    /// Replaces the per-attempt success probability of both links.
    #[serde(default)]
    pub p_tot_override: Option<f64>,
    /// Optional exponential dephasing of the waiting communication qubits.
    #[serde(default)]
    pub comm_t2_s: Option<f64>,
    #[serde(default)]
    pub noise: NoiseSwitches,
    #[serde(default)]
    pub timing: TimingConfig,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self::reference()
    }
}

impl ProtocolConfig {
    /// Reference network parameters.
    pub fn reference() -> Self {
        Self {
            link_ab: LinkParams::reference_ab(),
            link_bc: LinkParams::reference_bc(),
            timeout_attempts: 450,
            memory: MemoryDecayParams::with_entanglement(),
            nuclear: NuclearSpinParams::default(),
            readout_alice: ReadoutModel::new(0.95, 0.995).expect("valid"),
            readout_bob: ReadoutModel::new(0.928, 0.994).expect("valid"),
            readout_charlie: ReadoutModel::new(0.95, 0.995).expect("valid"),
            swap_gate_depolarizing_p: 0.083 * 4.0 / 3.0,
            cr_check_pass_prob: 0.9,
            ghz_herald_outcome: 0,
            feedforward_resolution_s: 2e-9,
            seed: 0,
            max_restarts: default_max_restarts(),
            p_tot_override: None,
            comm_t2_s: None,
            noise: NoiseSwitches::default(),
            timing: TimingConfig::default(),
        }
    }

    /// Every error source off and deterministic heralding.
    pub fn ideal() -> Self {
        Self {
            noise: NoiseSwitches::all(false),
            p_tot_override: Some(1.0),
            cr_check_pass_prob: 1.0,
            ..Self::reference()
        }
    }

    /// Copy with only the listed sources enabled.
    pub fn isolated(&self, sources: &[ErrorSource]) -> Self {
        let mut out = self.clone();
        out.noise = NoiseSwitches::all(false);
        for s in sources {
            match s {
                ErrorSource::LinkAB => out.noise.link_ab = true,
                ErrorSource::LinkBC => out.noise.link_bc = true,
                ErrorSource::MemoryDephasing => {
                    out.noise.memory_dephasing = true;
                    out.noise.nuclear_quantization = true;
                }
                ErrorSource::Depolarizing => out.noise.depolarizing = true,
                ErrorSource::Readout => out.noise.readout = true,
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.link_ab.validate()?;
        self.link_bc.validate()?;
        if self.timeout_attempts < 1 {
            return Err(Error::param("timeout_attempts", "must be at least 1"));
        }
        self.memory.validate()?;
        self.nuclear.validate()?;
        for r in [
            &self.readout_alice,
            &self.readout_bob,
            &self.readout_charlie,
        ] {
            r.validate()?;
        }
        if !(0.0..=1.0).contains(&self.swap_gate_depolarizing_p) {
            return Err(Error::param(
                "swap_gate_depolarizing_p",
                "must lie in [0, 1]",
            ));
        }
        if !(0.0..=1.0).contains(&self.cr_check_pass_prob) {
            return Err(Error::param("cr_check_pass_prob", "must lie in [0, 1]"));
        }
        if self.ghz_herald_outcome > 1 {
            return Err(Error::param("ghz_herald_outcome", "must be 0 or 1"));
        }
        if !(self.feedforward_resolution_s > 0.0) {
            return Err(Error::param("feedforward_resolution_s", "must be positive"));
        }
        if self.feedforward_resolution_s > self.nuclear.tau_larmor_s {
            return Err(Error::ResolutionTooCoarse {
                resolution_s: self.feedforward_resolution_s,
                tau_larmor_s: self.nuclear.tau_larmor_s,
            });
        }
        if let Some(p) = self.p_tot_override {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::param("p_tot_override", "must lie in (0, 1]"));
            }
        }
        if let Some(t2) = self.comm_t2_s {
            if !(t2 > 0.0) {
                return Err(Error::param("comm_t2_s", "must be positive"));
            }
        }
        self.timing.validate()
    }

    pub fn p_tot_ab(&self) -> f64 {
        self.p_tot_override
            .unwrap_or_else(|| linkmodel::success_probability(&self.link_ab))
    }

    pub fn p_tot_bc(&self) -> f64 {
        self.p_tot_override
            .unwrap_or_else(|| linkmodel::success_probability(&self.link_bc))
    }

    fn effective_bob_readout(&self) -> ReadoutModel {
        if self.noise.readout {
            self.readout_bob
        } else {
            ReadoutModel::perfect()
        }
    }

    fn block_time(&self, link: &LinkParams, attempts: u64) -> f64 {
        attempts as f64 * link.attempt_duration_s / link.duty_factor
    }

    /// Time from the B-C herald until Charlie has applied the correction.
    fn post_herald_s(&self, kind: ProtocolKind) -> f64 {
        let t = &self.timing;
        match kind {
            ProtocolKind::DoubleLink => 0.0,
            ProtocolKind::Ghz => t.bob_readout_s + t.message_latency(2),
            ProtocolKind::Swap => 2.0 * t.bob_readout_s + t.cr_check_s + t.message_latency(2),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ErrorSource {
    LinkAB,
    LinkBC,
    MemoryDephasing,
    Depolarizing,
    Readout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppliedCorrection {
    pub node: NodeId,
    pub correction: Correction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub kind: ProtocolKind,
    pub run_index: u64,
    pub success: bool,
    pub restarts: u64,
    pub attempts_ab: Option<u64>,
    pub attempts_bc: Option<u64>,
    pub sign_ab: Option<DetectorSign>,
    pub sign_bc: Option<DetectorSign>,
    /// Reported outcome bits of Bob's measurements, in measurement order.
    pub bsm_bits: Vec<u8>,
    pub cr_check_passed: Option<bool>,
    pub feedforward: Vec<AppliedCorrection>,
    pub nuclear: Option<NuclearFeedForward>,
    pub memory_coherence: Option<f64>,
    pub final_state: Option<StateRecord>,
    pub target_fidelity: Option<f64>,
    pub duration_s: f64,
    pub events: Vec<Event>,
}

impl RunRecord {
    pub fn final_density_matrix(&self) -> Option<Result<DensityMatrix>> {
        self.final_state.as_ref().map(DensityMatrix::try_from)
    }

    /// Outcome index used for share statistics: the reported bits read as a
    /// binary number, first bit most significant.
    pub fn outcome_index(&self) -> Option<usize> {
        if self.bsm_bits.is_empty() {
            return None;
        }
        Some(
            self.bsm_bits
                .iter()
                .fold(0usize, |acc, &b| (acc << 1) | b as usize),
        )
    }
}

pub fn write_jsonl<W: Write>(records: &[RunRecord], mut w: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::Io(e.to_string()))?;
        w.write_all(b"\n").map_err(|e| Error::Io(e.to_string()))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct EventRow<'a> {
    run_index: u64,
    time_s: f64,
    seq: u64,
    node: NodeId,
    event: &'a str,
    detail: String,
}

pub fn write_events_csv<W: Write>(records: &[RunRecord], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in records {
        for e in &r.events {
            let value = serde_json::to_value(&e.kind).map_err(|e| Error::Io(e.to_string()))?;
            let event = value
                .get("type")
                .and_then(|v| v.as_str())
                .unwrap_or("")
                .to_string();
            out.serialize(EventRow {
                run_index: r.run_index,
                time_s: e.time_s,
                seq: e.seq,
                node: e.node,
                event: &event,
                detail: value.to_string(),
            })
            .map_err(|e| Error::Io(e.to_string()))?;
        }
    }
    out.flush().map_err(|e| Error::Io(e.to_string()))
}

fn sign_index(s: DetectorSign) -> usize {
    match s {
        DetectorSign::Plus => 0,
        DetectorSign::Minus => 1,
    }
}

/// Per-configuration precomputation shared by many runs.
pub struct Prepared {
    cfg: ProtocolConfig,
    // [sign_ab][sign_bc], before any memory waiting
    base: [[DensityMatrix; 2]; 2],
    p_ab: f64,
    p_bc: f64,
    bob_readout: ReadoutModel,
}

impl Prepared {
    pub fn new(cfg: &ProtocolConfig) -> Result<Self> {
        cfg.validate()?;
        let pair = |link: &LinkParams, on: bool, s: DetectorSign| -> Result<DensityMatrix> {
            if on {
                Ok(linkmodel::heralded_state(link, s)?.state)
            } else {
                DensityMatrix::from_pure(&linkmodel::psi_target(s))
            }
        };
        let depol = if cfg.noise.depolarizing && cfg.swap_gate_depolarizing_p > 0.0 {
            Some(noise::depolarizing_channel(
                cfg.swap_gate_depolarizing_p,
                1,
            )?)
        } else {
            None
        };
        let build = |s1: DetectorSign, s2: DetectorSign| -> Result<DensityMatrix> {
            let mut am = pair(&cfg.link_ab, cfg.noise.link_ab, s1)?;
            if let Some(ch) = &depol {
                am = am.apply_channel(ch, &[1])?;
            }
            let bc = pair(&cfg.link_bc, cfg.noise.link_bc, s2)?;
            am.tensor(&bc)
        };
        let base = [[build(P, P)?, build(P, M)?], [build(M, P)?, build(M, M)?]];
        Ok(Self {
            cfg: cfg.clone(),
            base,
            p_ab: cfg.p_tot_ab(),
            p_bc: cfg.p_tot_bc(),
            bob_readout: cfg.effective_bob_readout(),
        })
    }

    pub fn config(&self) -> &ProtocolConfig {
        &self.cfg
    }

    fn memory_factor(&self, n_bc: u64) -> Result<(Complex64, Option<NuclearFeedForward>)> {
        let cfg = &self.cfg;
        let coherence = if cfg.noise.memory_dephasing {
            cfg.memory.coherence_factor(n_bc as f64)
        } else {
            1.0
        };
        let ff = nuclear_phase_feedforward(
            n_bc,
            cfg.link_bc.attempt_duration_s,
            &cfg.nuclear,
            cfg.feedforward_resolution_s,
        )?;
        let residual = if cfg.noise.nuclear_quantization {
            ff.quantization_error_rad
        } else {
            0.0
        };
        // Rz(residual) on the memory maps rho_01 -> exp(-i residual) rho_01
        Ok((Complex64::from_polar(coherence, -residual), Some(ff)))
    }

    fn comm_factor(&self, wait_s: f64) -> f64 {
        match self.cfg.comm_t2_s {
            Some(t2) => (-wait_s / t2).exp(),
            None => 1.0,
        }
    }

    fn wait_table(
        &self,
        kind: ProtocolKind,
        n_bc: u64,
    ) -> Result<(WaitTable, Option<NuclearFeedForward>)> {
        let (kappa, ff) = self.memory_factor(n_bc)?;
        let post = self.cfg.post_herald_s(kind);
        let alice_wait =
            self.cfg.timing.memory_swap_s + self.cfg.block_time(&self.cfg.link_bc, n_bc) + post;
        Ok((
            WaitTable::single(self.comm_factor(alice_wait), kappa, self.comm_factor(post)),
            ff,
        ))
    }

    /// Expected wait table over the attempt-count distribution of a
    /// heralded B-C block.
    fn averaged_wait_table(&self, kind: ProtocolKind) -> Result<WaitTable> {
        let t = self.cfg.timeout_attempts;
        let p = self.p_bc;
        let mut acc = WaitTable::zero();
        if p >= 1.0 {
            return Ok(self.wait_table(kind, 1)?.0);
        }
        let lq = (-p).ln_1p();
        let norm = -(lq * t as f64).exp_m1();
        for n in 1..=t {
            let w = p * (lq * (n - 1) as f64).exp() / norm;
            let (tab, _) = self.wait_table(kind, n)?;
            acc.add_scaled(&tab, w);
        }
        Ok(acc)
    }

    fn pre_state(&self, s1: DetectorSign, s2: DetectorSign, table: &WaitTable) -> DensityMatrix {
        let base = &self.base[sign_index(s1)][sign_index(s2)];
        DensityMatrix::from_raw(table.apply(base.matrix()))
    }
}

/// Elementwise factors picked up by the four-qubit state while qubits wait.
/// Entry `[da][mem]` multiplies elements whose Alice bits differ (`da`) and
/// whose memory bits are equal (`mem = 0`), go 0 -> 1 (`1`) or 1 -> 0 (`2`).
#[derive(Debug, Clone, Copy)]
struct WaitTable {
    f: [[Complex64; 3]; 2],
    charlie: f64,
}

impl WaitTable {
    fn zero() -> Self {
        Self {
            f: [[c(0.0, 0.0); 3]; 2],
            charlie: 0.0,
        }
    }

    fn single(alice: f64, kappa: Complex64, charlie: f64) -> Self {
        let mem = [c(1.0, 0.0), kappa, kappa.conj()];
        Self {
            f: [mem, mem.map(|z| z * alice)],
            charlie,
        }
    }

    fn add_scaled(&mut self, other: &WaitTable, w: f64) {
        for a in 0..2 {
            for m in 0..3 {
                self.f[a][m] += other.f[a][m] * w;
            }
        }
        // Charlie's wait does not depend on the attempt count
        self.charlie += other.charlie * w;
    }

    fn apply(&self, rho: &CMatrix) -> CMatrix {
        let mut out = rho.clone();
        for i in 0..16usize {
            for j in 0..16usize {
                let da = ((i ^ j) >> QUBIT_ALICE) & 1;
                let mi = (i >> QUBIT_MEMORY) & 1;
                let mj = (j >> QUBIT_MEMORY) & 1;
                let mem = match (mi, mj) {
                    (0, 1) => 1,
                    (1, 0) => 2,
                    _ => 0,
                };
                let mut f = self.f[da][mem];
                if ((i ^ j) >> QUBIT_CHARLIE) & 1 == 1 {
                    f *= self.charlie;
                }
                out[(i, j)] *= f;
            }
        }
        out
    }
}

fn ghz_entangle(rho: &DensityMatrix) -> Result<DensityMatrix> {
    rho.apply_unitary(&gates::pauli_x(), &[QUBIT_MEMORY])?
        .apply_unitary(&gates::cnot(), &[QUBIT_MEMORY, QUBIT_BOB])
}

fn swap_entangle(rho: &DensityMatrix) -> Result<DensityMatrix> {
    ghz_entangle(rho)?.apply_unitary(&gates::hadamard(), &[QUBIT_MEMORY])
}

fn reported_branch(
    rho: &DensityMatrix,
    qubit: usize,
    reported: u8,
    readout: &ReadoutModel,
) -> Result<DensityMatrix> {
    let mut acc = CMatrix::zeros(rho.dim(), rho.dim());
    for actual in 0..2u8 {
        let w = readout.report_probability(actual, reported);
        if w == 0.0 {
            continue;
        }
        acc += rho.project_weighted(qubit, Pauli::Z, actual)? * c(w, 0.0);
    }
    Ok(DensityMatrix::from_raw(acc))
}

fn normalized(rho: DensityMatrix) -> Result<(DensityMatrix, f64)> {
    let p = rho.trace().re;
    if p <= 0.0 {
        return Err(Error::ZeroProbability);
    }
    Ok((DensityMatrix::from_raw(rho.matrix().map(|z| z / p)), p))
}

/// One feed-forward branch of the analytic model.
#[derive(Debug, Clone)]
pub struct Branch {
    pub sign_ab: DetectorSign,
    pub sign_bc: DetectorSign,
    /// Reported outcome bits (GHZ: one bit; swap: memory bit, comm bit).
    pub reported: Vec<u8>,
    pub correction: Correction,
    /// Probability of the reported bits given the two detector signs.
    pub probability: f64,
    pub state: DensityMatrix,
    pub fidelity: f64,
}

fn ghz_branches_with(prep: &Prepared, table: &WaitTable) -> Result<Vec<Branch>> {
    let mut out = Vec::with_capacity(8);
    for s1 in DetectorSign::BOTH {
        for s2 in DetectorSign::BOTH {
            let rho = ghz_entangle(&prep.pre_state(s1, s2, table))?;
            for r in 0..2u8 {
                let corr = ghz_correction(s1, s2, r);
                let branch = reported_branch(&rho, QUBIT_BOB, r, &prep.bob_readout)?
                    .apply_unitary(&corr.matrix(), &[QUBIT_CHARLIE])?
                    .partial_trace(&[QUBIT_ALICE, QUBIT_MEMORY, QUBIT_CHARLIE])?;
                let (state, p) = normalized(branch)?;
                let fidelity = state.fidelity_with_pure(&ghz_target())?;
                out.push(Branch {
                    sign_ab: s1,
                    sign_bc: s2,
                    reported: vec![r],
                    correction: corr,
                    probability: p,
                    state,
                    fidelity,
                });
            }
        }
    }
    Ok(out)
}

fn swap_branches_with(prep: &Prepared, table: &WaitTable) -> Result<Vec<Branch>> {
    let mut out = Vec::with_capacity(16);
    for s1 in DetectorSign::BOTH {
        for s2 in DetectorSign::BOTH {
            let rho = swap_entangle(&prep.pre_state(s1, s2, table))?;
            for m in 0..2u8 {
                let rm = reported_branch(&rho, QUBIT_MEMORY, m, &prep.bob_readout)?;
                for b in 0..2u8 {
                    let corr = swap_correction(s1, s2, m, b);
                    let branch = reported_branch(&rm, QUBIT_BOB, b, &prep.bob_readout)?
                        .apply_unitary(&corr.matrix(), &[QUBIT_CHARLIE])?
                        .partial_trace(&[QUBIT_ALICE, QUBIT_CHARLIE])?;
                    let (state, p) = normalized(branch)?;
                    let fidelity = state.fidelity_with_pure(&phi_plus())?;
                    out.push(Branch {
                        sign_ab: s1,
                        sign_bc: s2,
                        reported: vec![m, b],
                        correction: corr,
                        probability: p,
                        state,
                        fidelity,
                    });
                }
            }
        }
    }
    Ok(out)
}

/// All eight GHZ branches, averaged over the B-C attempt distribution.
pub fn ghz_branches(cfg: &ProtocolConfig) -> Result<Vec<Branch>> {
    let prep = Prepared::new(cfg)?;
    let table = prep.averaged_wait_table(ProtocolKind::Ghz)?;
    ghz_branches_with(&prep, &table)
}

/// All sixteen swap branches, averaged over the B-C attempt distribution.
pub fn swap_branches(cfg: &ProtocolConfig) -> Result<Vec<Branch>> {
    let prep = Prepared::new(cfg)?;
    let table = prep.averaged_wait_table(ProtocolKind::Swap)?;
    swap_branches_with(&prep, &table)
}

fn mix_branches<'a>(branches: impl Iterator<Item = &'a Branch>) -> Result<(DensityMatrix, f64)> {
    let mut acc: Option<CMatrix> = None;
    let mut total = 0.0;
    for b in branches {
        // detector signs are equally likely
        let w = 0.25 * b.probability;
        let m = b.state.matrix().map(|z| z * w);
        acc = Some(match acc {
            Some(a) => a + m,
            None => m,
        });
        total += w;
    }
    let acc = acc.ok_or(Error::ZeroProbability)?;
    if total <= 0.0 {
        return Err(Error::ZeroProbability);
    }
    Ok((DensityMatrix::from_raw(acc.map(|z| z / total)), total))
}

#[derive(Debug, Clone)]
pub struct GhzAnalysis {
    /// Probability that Bob reports the heralding outcome after both links
    /// are established.
    pub herald_probability: f64,
    pub state: DensityMatrix,
    pub fidelity: f64,
    pub correlators: [f64; 7],
    pub branches: Vec<Branch>,
}

impl GhzAnalysis {
    pub fn infidelity(&self) -> f64 {
        1.0 - self.fidelity
    }

    pub fn correlator_set(&self) -> GhzCorrelators {
        GhzCorrelators::from_values(self.correlators)
    }
}

pub fn analyze_ghz(cfg: &ProtocolConfig) -> Result<GhzAnalysis> {
    let branches = ghz_branches(cfg)?;
    let (state, p) = mix_branches(
        branches
            .iter()
            .filter(|b| b.reported[0] == cfg.ghz_herald_outcome),
    )?;
    let fidelity = state.fidelity_with_pure(&ghz_target())?;
    let mut correlators = [0.0; 7];
    for (slot, label) in correlators.iter_mut().zip(GhzCorrelators::LABELS) {
        *slot = state.pauli_expectation(&label.parse()?)?;
    }
    Ok(GhzAnalysis {
        herald_probability: p,
        state,
        fidelity,
        correlators,
        branches,
    })
}

#[derive(Debug, Clone)]
pub struct SwapOutcome {
    /// Reported (memory, comm) bits.
    pub bits: [u8; 2],
    pub share: f64,
    pub state: DensityMatrix,
    pub fidelity: f64,
}

#[derive(Debug, Clone)]
pub struct SwapAnalysis {
    /// Indexed by `2 m + b`.
    pub outcomes: Vec<SwapOutcome>,
    pub state_any: DensityMatrix,
    pub fidelity_any: f64,
    pub branches: Vec<Branch>,
}

impl SwapAnalysis {
    pub fn infidelity_00(&self) -> f64 {
        1.0 - self.outcomes[0].fidelity
    }

    pub fn infidelity_any(&self) -> f64 {
        1.0 - self.fidelity_any
    }

    pub fn shares(&self) -> [f64; 4] {
        [0, 1, 2, 3].map(|i| self.outcomes[i].share)
    }
}

pub fn analyze_swap(cfg: &ProtocolConfig) -> Result<SwapAnalysis> {
    let branches = swap_branches(cfg)?;
    let mut outcomes = Vec::with_capacity(4);
    for m in 0..2u8 {
        for b in 0..2u8 {
            let (state, share) = mix_branches(branches.iter().filter(|x| x.reported == [m, b]))?;
            let fidelity = state.fidelity_with_pure(&phi_plus())?;
            outcomes.push(SwapOutcome {
                bits: [m, b],
                share,
                state,
                fidelity,
            });
        }
    }
    let (state_any, _) = mix_branches(branches.iter())?;
    let fidelity_any = state_any.fidelity_with_pure(&phi_plus())?;
    Ok(SwapAnalysis {
        outcomes,
        state_any,
        fidelity_any,
        branches,
    })
}

/// Mean memory coherence `E[c(N)]` over heralded B-C blocks.
pub fn expected_memory_coherence(cfg: &ProtocolConfig) -> Result<f64> {
    let t = cfg.timeout_attempts;
    let p = cfg.p_tot_bc();
    if p >= 1.0 {
        return Ok(cfg.memory.coherence_factor(1.0));
    }
    let lq = (-p).ln_1p();
    let norm = -(lq * t as f64).exp_m1();
    Ok((1..=t)
        .map(|n| p * (lq * (n - 1) as f64).exp() / norm * cfg.memory.coherence_factor(n as f64))
        .sum())
}

/// Fidelities of the two stored pairs to their Bell targets after the
/// double-link stage, averaged over signs and attempt counts.
pub fn double_link_pair_fidelities(cfg: &ProtocolConfig) -> Result<(f64, f64)> {
    let prep = Prepared::new(cfg)?;
    let table = prep.averaged_wait_table(ProtocolKind::DoubleLink)?;
    let (mut fa, mut fc) = (0.0, 0.0);
    for s1 in DetectorSign::BOTH {
        for s2 in DetectorSign::BOTH {
            let rho = prep.pre_state(s1, s2, &table);
            fa += 0.25
                * rho
                    .partial_trace(&[QUBIT_ALICE, QUBIT_MEMORY])?
                    .fidelity_with_pure(&linkmodel::psi_target(s1))?;
            fc += 0.25
                * rho
                    .partial_trace(&[QUBIT_BOB, QUBIT_CHARLIE])?
                    .fidelity_with_pure(&linkmodel::psi_target(s2))?;
        }
    }
    Ok((fa, fc))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetRow {
    pub label: String,
    pub infidelity: f64,
}

pub const ROW_PSI_AB: &str = "Psi_AB";
pub const ROW_PSI_BC: &str = "Psi_BC";
pub const ROW_DEPHASING: &str = "memory dephasing";
pub const ROW_DEPOLARIZING: &str = "memory depolarizing";
pub const ROW_FEEDFORWARD: &str = "feed-forward";
pub const ROW_FEEDFORWARD_00: &str = "feed-forward (00)";
pub const ROW_FEEDFORWARD_ANY: &str = "feed-forward (any)";
pub const ROW_BELLS: &str = "Psi_AB and Psi_BC combined";
pub const ROW_COMBINED: &str = "combined";
pub const ROW_COMBINED_00: &str = "combined (00)";
pub const ROW_COMBINED_ANY: &str = "combined (any)";

pub fn find_row(rows: &[BudgetRow], label: &str) -> Option<f64> {
    rows.iter().find(|r| r.label == label).map(|r| r.infidelity)
}

const ALL_SOURCES: [ErrorSource; 5] = [
    ErrorSource::LinkAB,
    ErrorSource::LinkBC,
    ErrorSource::MemoryDephasing,
    ErrorSource::Depolarizing,
    ErrorSource::Readout,
];

fn row(label: &str, infidelity: f64) -> BudgetRow {
    BudgetRow {
        label: label.to_string(),
        infidelity,
    }
}

/// GHZ infidelity with each error source alone, the two link errors
/// together, and everything combined.
pub fn ghz_error_budget(cfg: &ProtocolConfig) -> Result<Vec<BudgetRow>> {
    let inf = |sources: &[ErrorSource]| -> Result<f64> {
        Ok(analyze_ghz(&cfg.isolated(sources))?.infidelity())
    };
    use ErrorSource::*;
    Ok(vec![
        row(ROW_PSI_AB, inf(&[LinkAB])?),
        row(ROW_PSI_BC, inf(&[LinkBC])?),
        row(ROW_DEPHASING, inf(&[MemoryDephasing])?),
        row(ROW_DEPOLARIZING, inf(&[Depolarizing])?),
        row(ROW_FEEDFORWARD, inf(&[Readout])?),
        row(ROW_BELLS, inf(&[LinkAB, LinkBC])?),
        row(ROW_COMBINED, inf(&ALL_SOURCES)?),
    ])
}

/// Swap budget for the `00` outcome and for all outcomes accepted.
pub fn swap_error_budget(cfg: &ProtocolConfig) -> Result<Vec<BudgetRow>> {
    use ErrorSource::*;
    let an = |sources: &[ErrorSource]| analyze_swap(&cfg.isolated(sources));
    let ab = an(&[LinkAB])?;
    let bc = an(&[LinkBC])?;
    let deph = an(&[MemoryDephasing])?;
    let depol = an(&[Depolarizing])?;
    let ro = an(&[Readout])?;
    let bells = an(&[LinkAB, LinkBC])?;
    let all = an(&ALL_SOURCES)?;
    Ok(vec![
        row(ROW_PSI_AB, ab.infidelity_any()),
        row(ROW_PSI_BC, bc.infidelity_any()),
        row(ROW_DEPHASING, deph.infidelity_any()),
        row(ROW_DEPOLARIZING, depol.infidelity_any()),
        row(ROW_FEEDFORWARD_00, ro.infidelity_00()),
        row(ROW_FEEDFORWARD_ANY, ro.infidelity_any()),
        row(ROW_BELLS, bells.infidelity_any()),
        row(ROW_COMBINED_00, all.infidelity_00()),
        row(ROW_COMBINED_ANY, all.infidelity_any()),
    ])
}

struct Established {
    state: DensityMatrix,
    sign_ab: DetectorSign,
    sign_bc: DetectorSign,
    attempts_ab: u64,
    attempts_bc: u64,
    memory_coherence: f64,
    nuclear: Option<NuclearFeedForward>,
    t_bc: f64,
}

enum Stage {
    Established(Box<Established>),
    GaveUp,
}

fn establish<R: Rng + ?Sized>(
    prep: &Prepared,
    kind: ProtocolKind,
    rng: &mut R,
    q: &mut EventQueue,
    restarts: &mut u64,
    clock: &mut f64,
) -> Result<Stage> {
    let cfg = &prep.cfg;
    let t_out = cfg.timeout_attempts;
    loop {
        if *restarts > cfg.max_restarts {
            q.schedule(
                *clock,
                NodeId::Bob,
                EventKind::RestartLimit {
                    restarts: *restarts,
                },
            );
            return Ok(Stage::GaveUp);
        }
        let t0 = *clock;
        let mut t = t0 + cfg.timing.restart_preparation_s;
        let ab = linkmodel::sample_attempts_until_success(prep.p_ab, rng, t_out)?;
        if !ab.success {
            *clock = t + cfg.block_time(&cfg.link_ab, t_out);
            *restarts += 1;
            continue;
        }
        let t_ab = t + cfg.block_time(&cfg.link_ab, ab.attempts);
        t = t_ab + cfg.timing.memory_swap_s;
        let bc = linkmodel::sample_attempts_until_success(prep.p_bc, rng, t_out)?;
        if !bc.success {
            *clock = t + cfg.block_time(&cfg.link_bc, t_out);
            *restarts += 1;
            continue;
        }
        let t_bc = t + cfg.block_time(&cfg.link_bc, bc.attempts);
        let sign_ab = if rng.random::<bool>() { P } else { M };
        let sign_bc = if rng.random::<bool>() { P } else { M };

        q.schedule(
            t0,
            NodeId::Bob,
            EventKind::SequenceStart {
                restarts: *restarts,
            },
        );
        q.schedule(
            t_ab,
            NodeId::Bob,
            EventKind::LinkHerald {
                link: LinkId::AB,
                attempts: ab.attempts,
                sign: sign_ab,
            },
        );
        // link-ready notice from Alice; the B-C notice below reaches the
        // same OR-merged port at least one memory swap later
        q.serial_comm(&ClassicalMessage::new(
            NodeId::Alice,
            NodeId::Bob,
            vec![1],
            t_ab,
            &cfg.timing,
        )?)?;
        q.schedule(
            t_ab + cfg.timing.memory_swap_s,
            NodeId::Bob,
            EventKind::MemorySwap,
        );
        q.schedule(
            t_bc,
            NodeId::Bob,
            EventKind::LinkHerald {
                link: LinkId::BC,
                attempts: bc.attempts,
                sign: sign_bc,
            },
        );
        q.serial_comm(&ClassicalMessage::new(
            NodeId::Charlie,
            NodeId::Bob,
            vec![1],
            t_bc,
            &cfg.timing,
        )?)?;

        let (table, ff) = prep.wait_table(kind, bc.attempts)?;
        if let Some(f) = &ff {
            q.schedule(
                t_bc,
                NodeId::Bob,
                EventKind::NuclearFeedForward {
                    rotation_rad: f.rotation_rad,
                    quantization_error_rad: if cfg.noise.nuclear_quantization {
                        f.quantization_error_rad
                    } else {
                        0.0
                    },
                },
            );
        }
        let memory_coherence = if cfg.noise.memory_dephasing {
            cfg.memory.coherence_factor(bc.attempts as f64)
        } else {
            1.0
        };
        *clock = t_bc;
        return Ok(Stage::Established(Box::new(Established {
            state: prep.pre_state(sign_ab, sign_bc, &table),
            sign_ab,
            sign_bc,
            attempts_ab: ab.attempts,
            attempts_bc: bc.attempts,
            memory_coherence,
            nuclear: ff,
            t_bc,
        })));
    }
}

fn report<R: Rng + ?Sized>(actual: u8, readout: &ReadoutModel, rng: &mut R) -> u8 {
    let correct = if actual == 0 { readout.f0 } else { readout.f1 };
    if rng.random::<f64>() < correct {
        actual
    } else {
        1 - actual
    }
}

fn empty_record(kind: ProtocolKind, run_index: u64) -> RunRecord {
    RunRecord {
        kind,
        run_index,
        success: false,
        restarts: 0,
        attempts_ab: None,
        attempts_bc: None,
        sign_ab: None,
        sign_bc: None,
        bsm_bits: Vec::new(),
        cr_check_passed: None,
        feedforward: Vec::new(),
        nuclear: None,
        memory_coherence: None,
        final_state: None,
        target_fidelity: None,
        duration_s: 0.0,
        events: Vec::new(),
    }
}

/// One complete protocol run, restarting after timeouts until both links
/// are established or `max_restarts` is exceeded.
pub fn run_with<R: Rng + ?Sized>(
    prep: &Prepared,
    kind: ProtocolKind,
    run_index: u64,
    rng: &mut R,
) -> Result<RunRecord> {
    let cfg = &prep.cfg;
    let mut q = EventQueue::new();
    let mut rec = empty_record(kind, run_index);
    let mut restarts = 0;
    let mut clock = 0.0;
    let est = match establish(prep, kind, rng, &mut q, &mut restarts, &mut clock)? {
        Stage::GaveUp => {
            q.schedule(clock, NodeId::Bob, EventKind::Heralded { success: false });
            rec.restarts = restarts;
            rec.duration_s = clock;
            rec.events = q.into_log();
            return Ok(rec);
        }
        Stage::Established(e) => *e,
    };
    rec.restarts = restarts;
    rec.attempts_ab = Some(est.attempts_ab);
    rec.attempts_bc = Some(est.attempts_bc);
    rec.sign_ab = Some(est.sign_ab);
    rec.sign_bc = Some(est.sign_bc);
    rec.nuclear = est.nuclear;
    rec.memory_coherence = Some(est.memory_coherence);
    let readout = &prep.bob_readout;
    let t = est.t_bc;

    let (final_state, target, success, end) = match kind {
        ProtocolKind::DoubleLink => (Some(est.state), None, true, t),
        ProtocolKind::Ghz => {
            let rho = ghz_entangle(&est.state)?;
            let meas = rho.measure_projective(QUBIT_BOB, Pauli::Z, rng)?;
            let r = report(meas.outcome, readout, rng);
            let t_m = t + cfg.timing.bob_readout_s;
            q.schedule(
                t_m,
                NodeId::Bob,
                EventKind::Readout {
                    qubit: QUBIT_BOB,
                    reported: r,
                },
            );
            rec.bsm_bits = vec![r];
            let corr = ghz_correction(est.sign_ab, est.sign_bc, r);
            let msg = ClassicalMessage::new(
                NodeId::Bob,
                NodeId::Charlie,
                corr.code().to_vec(),
                t_m,
                &cfg.timing,
            )?;
            let t_ff = q.serial_comm(&msg)?;
            // Charlie decodes the code it actually received
            let applied = Correction::from_code(&msg.payload_bits)?;
            q.schedule(
                t_ff,
                NodeId::Charlie,
                EventKind::FeedForward {
                    correction: applied,
                },
            );
            rec.feedforward.push(AppliedCorrection {
                node: NodeId::Charlie,
                correction: applied,
            });
            let heralded = r == cfg.ghz_herald_outcome;
            let state = if heralded {
                Some(
                    meas.post_state
                        .apply_unitary(&applied.matrix(), &[QUBIT_CHARLIE])?
                        .partial_trace(&[QUBIT_ALICE, QUBIT_MEMORY, QUBIT_CHARLIE])?,
                )
            } else {
                None
            };
            (state, Some(ghz_target()), heralded, t_ff)
        }
        ProtocolKind::Swap => {
            let rho = swap_entangle(&est.state)?;
            let mm = rho.measure_projective(QUBIT_MEMORY, Pauli::Z, rng)?;
            let rm = report(mm.outcome, readout, rng);
            let t_m = t + cfg.timing.bob_readout_s;
            q.schedule(
                t_m,
                NodeId::Bob,
                EventKind::Readout {
                    qubit: QUBIT_MEMORY,
                    reported: rm,
                },
            );
            let mb = mm.post_state.measure_projective(QUBIT_BOB, Pauli::Z, rng)?;
            let rb = report(mb.outcome, readout, rng);
            let t_b = t_m + cfg.timing.bob_readout_s;
            q.schedule(
                t_b,
                NodeId::Bob,
                EventKind::Readout {
                    qubit: QUBIT_BOB,
                    reported: rb,
                },
            );
            rec.bsm_bits = vec![rm, rb];
            let passed = rng.random::<f64>() < cfg.cr_check_pass_prob;
            let t_cr = t_b + cfg.timing.cr_check_s;
            q.schedule(t_cr, NodeId::Bob, EventKind::CrCheck { passed });
            rec.cr_check_passed = Some(passed);
            let corr = swap_correction(est.sign_ab, est.sign_bc, rm, rb);
            let msg = ClassicalMessage::new(
                NodeId::Bob,
                NodeId::Charlie,
                corr.code().to_vec(),
                t_cr,
                &cfg.timing,
            )?;
            let t_ff = q.serial_comm(&msg)?;
            let applied = Correction::from_code(&msg.payload_bits)?;
            q.schedule(
                t_ff,
                NodeId::Charlie,
                EventKind::FeedForward {
                    correction: applied,
                },
            );
            rec.feedforward.push(AppliedCorrection {
                node: NodeId::Charlie,
                correction: applied,
            });
            let state = if passed {
                Some(
                    mb.post_state
                        .apply_unitary(&applied.matrix(), &[QUBIT_CHARLIE])?
                        .partial_trace(&[QUBIT_ALICE, QUBIT_CHARLIE])?,
                )
            } else {
                None
            };
            (state, Some(phi_plus()), passed, t_ff)
        }
    };
    q.schedule(end, NodeId::Charlie, EventKind::Heralded { success });
    rec.success = success;
    if let Some(s) = &final_state {
        if let Some(psi) = &target {
            rec.target_fidelity = Some(s.fidelity_with_pure(psi)?);
        }
        rec.final_state = Some(StateRecord::from(s));
    }
    rec.duration_s = end;
    rec.events = q.into_log();
    Ok(rec)
}

pub fn run_double_link<R: Rng + ?Sized>(cfg: &ProtocolConfig, rng: &mut R) -> Result<RunRecord> {
    run_with(&Prepared::new(cfg)?, ProtocolKind::DoubleLink, 0, rng)
}

pub fn run_ghz<R: Rng + ?Sized>(cfg: &ProtocolConfig, rng: &mut R) -> Result<RunRecord> {
    run_with(&Prepared::new(cfg)?, ProtocolKind::Ghz, 0, rng)
}

pub fn run_swap<R: Rng + ?Sized>(cfg: &ProtocolConfig, rng: &mut R) -> Result<RunRecord> {
    run_with(&Prepared::new(cfg)?, ProtocolKind::Swap, 0, rng)
}

/// Generator for run `run_index` of a batch: the configured seed selects
/// the key and the run index selects the ChaCha stream.
pub fn run_rng(seed: u64, run_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(run_index);
    rng
}

/// Runs `n_runs` independent runs in parallel and returns them in index
/// order.
pub fn run_batch(cfg: &ProtocolConfig, kind: ProtocolKind, n_runs: u64) -> Result<Vec<RunRecord>> {
    let prep = Prepared::new(cfg)?;
    (0..n_runs)
        .into_par_iter()
        .map(|i| run_with(&prep, kind, i, &mut run_rng(cfg.seed, i)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSem {
    pub mean: f64,
    pub sem: f64,
    pub n: u64,
}

#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    n: u64,
    sum: f64,
    sum_sq: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.n += 1;
        self.sum += x;
        self.sum_sq += x * x;
    }

    fn merge(&mut self, o: &Moments) {
        self.n += o.n;
        self.sum += o.sum;
        self.sum_sq += o.sum_sq;
    }

    fn summary(&self) -> Option<MeanSem> {
        if self.n == 0 {
            return None;
        }
        let n = self.n as f64;
        let mean = self.sum / n;
        let var = if self.n > 1 {
            ((self.sum_sq - n * mean * mean) / (n - 1.0)).max(0.0)
        } else {
            0.0
        };
        Some(MeanSem {
            mean,
            sem: (var / n).sqrt(),
            n: self.n,
        })
    }
}

#[derive(Debug, Clone)]
struct Accumulator {
    n_runs: u64,
    n_established: u64,
    n_success: u64,
    restarts: u64,
    duration_s: f64,
    attempts_ab: Moments,
    attempts_bc: Moments,
    coherence: Moments,
    fidelity: Moments,
    outcome_counts: Vec<u64>,
    outcome_fidelity: Vec<Moments>,
    state_sum: Option<CMatrix>,
    cr_failures: u64,
}

impl Accumulator {
    fn new(n_outcomes: usize) -> Self {
        Self {
            n_runs: 0,
            n_established: 0,
            n_success: 0,
            restarts: 0,
            duration_s: 0.0,
            attempts_ab: Moments::default(),
            attempts_bc: Moments::default(),
            coherence: Moments::default(),
            fidelity: Moments::default(),
            outcome_counts: vec![0; n_outcomes],
            outcome_fidelity: vec![Moments::default(); n_outcomes],
            state_sum: None,
            cr_failures: 0,
        }
    }

    fn push(&mut self, r: &RunRecord) -> Result<()> {
        self.n_runs += 1;
        self.restarts += r.restarts;
        self.duration_s += r.duration_s;
        if let (Some(a), Some(b)) = (r.attempts_ab, r.attempts_bc) {
            self.n_established += 1;
            self.attempts_ab.push(a as f64);
            self.attempts_bc.push(b as f64);
        }
        if let Some(cf) = r.memory_coherence {
            self.coherence.push(cf);
        }
        if r.cr_check_passed == Some(false) {
            self.cr_failures += 1;
        }
        let idx = r.outcome_index();
        if let Some(i) = idx {
            // GHZ shares count every reported outcome, swap shares count
            // runs that passed the CR check
            if r.kind == ProtocolKind::Ghz || r.success {
                self.outcome_counts[i] += 1;
            }
        }
        if r.success {
            self.n_success += 1;
            if let Some(f) = r.target_fidelity {
                self.fidelity.push(f);
                if let Some(i) = idx {
                    self.outcome_fidelity[i].push(f);
                }
            }
            if let Some(s) = r.final_density_matrix() {
                let m = s?.matrix().clone();
                self.state_sum = Some(match self.state_sum.take() {
                    Some(a) => a + m,
                    None => m,
                });
            }
        }
        Ok(())
    }

    fn merge(&mut self, o: Accumulator) {
        self.n_runs += o.n_runs;
        self.n_established += o.n_established;
        self.n_success += o.n_success;
        self.restarts += o.restarts;
        self.duration_s += o.duration_s;
        self.attempts_ab.merge(&o.attempts_ab);
        self.attempts_bc.merge(&o.attempts_bc);
        self.coherence.merge(&o.coherence);
        self.fidelity.merge(&o.fidelity);
        for (a, b) in self.outcome_counts.iter_mut().zip(&o.outcome_counts) {
            *a += b;
        }
        for (a, b) in self.outcome_fidelity.iter_mut().zip(&o.outcome_fidelity) {
            a.merge(b);
        }
        if let Some(m) = o.state_sum {
            self.state_sum = Some(match self.state_sum.take() {
                Some(a) => a + m,
                None => m,
            });
        }
        self.cr_failures += o.cr_failures;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeStat {
    pub bits: String,
    pub count: u64,
    pub share: f64,
    pub share_sem: f64,
    pub fidelity: Option<MeanSem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub kind: ProtocolKind,
    pub seed: u64,
    pub n_runs: u64,
    pub n_established: u64,
    pub n_success: u64,
    pub total_restarts: u64,
    pub simulated_time_s: f64,
    /// Heralded deliveries per simulated second.
    pub rate_hz: Option<f64>,
    pub attempts_ab: Option<MeanSem>,
    pub attempts_bc: Option<MeanSem>,
    pub memory_coherence: Option<MeanSem>,
    pub fidelity: Option<MeanSem>,
    pub outcomes: Vec<OutcomeStat>,
    pub cr_failures: u64,
    /// Average delivered state.
    pub mean_state: Option<StateRecord>,
}

impl BatchSummary {
    pub fn mean_density_matrix(&self) -> Option<Result<DensityMatrix>> {
        self.mean_state.as_ref().map(DensityMatrix::try_from)
    }

    pub fn shares(&self) -> Vec<f64> {
        self.outcomes.iter().map(|o| o.share).collect()
    }
}

const BATCH_CHUNK: u64 = 1024;

/// Parallel batch reduced to summary statistics without keeping the
/// records. Chunks are merged in index order, so the result does not
/// depend on the number of worker threads.
pub fn run_batch_summary(
    cfg: &ProtocolConfig,
    kind: ProtocolKind,
    n_runs: u64,
) -> Result<BatchSummary> {
    let prep = Prepared::new(cfg)?;
    let n_outcomes = match kind {
        ProtocolKind::DoubleLink => 0,
        ProtocolKind::Ghz => 2,
        ProtocolKind::Swap => 4,
    };
    let n_chunks = n_runs.div_ceil(BATCH_CHUNK);
    let parts: Vec<Result<Accumulator>> = (0..n_chunks)
        .into_par_iter()
        .map(|ci| {
            let mut acc = Accumulator::new(n_outcomes);
            let end = ((ci + 1) * BATCH_CHUNK).min(n_runs);
            for i in ci * BATCH_CHUNK..end {
                let r = run_with(&prep, kind, i, &mut run_rng(cfg.seed, i))?;
                acc.push(&r)?;
            }
            Ok(acc)
        })
        .collect();
    let mut total = Accumulator::new(n_outcomes);
    for p in parts {
        total.merge(p?);
    }
    let counted: u64 = total.outcome_counts.iter().sum();
    let width = if n_outcomes == 4 { 2 } else { 1 };
    let outcomes = (0..n_outcomes)
        .map(|i| {
            let count = total.outcome_counts[i];
            let share = if counted > 0 {
                count as f64 / counted as f64
            } else {
                0.0
            };
            let share_sem = if counted > 0 {
                (share * (1.0 - share) / counted as f64).sqrt()
            } else {
                0.0
            };
            OutcomeStat {
                bits: format!("{i:0width$b}"),
                count,
                share,
                share_sem,
                fidelity: total.outcome_fidelity[i].summary(),
            }
        })
        .collect();
    let mean_state = match (&total.state_sum, total.n_success) {
        (Some(m), n) if n > 0 => Some(StateRecord::from(&DensityMatrix::from_raw(
            m.map(|z| z / n as f64),
        ))),
        _ => None,
    };
    Ok(BatchSummary {
        kind,
        seed: cfg.seed,
        n_runs: total.n_runs,
        n_established: total.n_established,
        n_success: total.n_success,
        total_restarts: total.restarts,
        simulated_time_s: total.duration_s,
        rate_hz: if total.duration_s > 0.0 {
            Some(total.n_success as f64 / total.duration_s)
        } else {
            None
        },
        attempts_ab: total.attempts_ab.summary(),
        attempts_bc: total.attempts_bc.summary(),
        memory_coherence: total.coherence.summary(),
        fidelity: total.fidelity.summary(),
        outcomes,
        cr_failures: total.cr_failures,
        mean_state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn nuclear_feedforward_zero_attempts() {
        let ff = nuclear_phase_feedforward(0, 5e-6, &NuclearSpinParams::default(), 2e-9).unwrap();
        assert_eq!(ff.rotation_rad, 0.0);
        assert_eq!(ff.quantization_error_rad, 0.0);
    }

    #[test]
    fn nuclear_feedforward_rejects_coarse_resolution() {
        let r = nuclear_phase_feedforward(3, 5e-6, &NuclearSpinParams::default(), 600e-9);
        assert!(matches!(r, Err(Error::ResolutionTooCoarse { .. })));
    }

    #[test]
    fn message_latency() {
        let t = TimingConfig::default();
        let m = ClassicalMessage::new(NodeId::Alice, NodeId::Bob, vec![1, 0, 1, 1, 0], 0.0, &t)
            .unwrap();
        assert_abs_diff_eq!(m.delivery_time_s, 300e-9 + 2e-6, epsilon = 1e-15);
        let m = ClassicalMessage::new(NodeId::Bob, NodeId::Charlie, vec![1], 0.0, &t).unwrap();
        assert_abs_diff_eq!(m.delivery_time_s - t.decode_delay_s, 60e-9, epsilon = 1e-15);
        assert!(ClassicalMessage::new(NodeId::Bob, NodeId::Charlie, vec![0; 6], 0.0, &t).is_err());
        assert!(ClassicalMessage::new(NodeId::Bob, NodeId::Charlie, vec![], 0.0, &t).is_err());
    }

    #[test]
    fn bob_port_collision() {
        let t = TimingConfig::default();
        let mut q = EventQueue::new();
        q.serial_comm(
            &ClassicalMessage::new(NodeId::Alice, NodeId::Bob, vec![1], 0.0, &t).unwrap(),
        )
        .unwrap();
        let late = ClassicalMessage::new(NodeId::Charlie, NodeId::Bob, vec![1], 1e-6, &t).unwrap();
        assert!(matches!(
            q.serial_comm(&late),
            Err(Error::MessageCollision { .. })
        ));
        let ok = ClassicalMessage::new(NodeId::Charlie, NodeId::Bob, vec![1], 3e-6, &t).unwrap();
        q.serial_comm(&ok).unwrap();
        // messages to other nodes never collide
        let other = ClassicalMessage::new(NodeId::Bob, NodeId::Charlie, vec![1], 0.0, &t).unwrap();
        q.serial_comm(&other).unwrap();
        let log = q.into_log();
        assert_eq!(log.len(), 6);
        assert!(log.windows(2).all(|w| w[0].time_s <= w[1].time_s));
    }

    #[test]
    fn correction_codes_round_trip() {
        for c in [Correction::I, Correction::X, Correction::Z, Correction::ZX] {
            assert_eq!(Correction::from_code(&c.code()).unwrap(), c);
        }
    }

    #[test]
    fn ideal_branches_reach_targets() {
        let cfg = ProtocolConfig::ideal();
        for b in ghz_branches(&cfg).unwrap() {
            assert!(
                b.fidelity > 1.0 - 1e-10,
                "{:?} {:?}",
                b.reported,
                b.fidelity
            );
        }
        for b in swap_branches(&cfg).unwrap() {
            assert!(
                b.fidelity > 1.0 - 1e-10,
                "{:?} {:?}",
                b.reported,
                b.fidelity
            );
        }
    }

    #[test]
    fn ideal_double_link_is_product_of_bell_pairs() {
        let cfg = ProtocolConfig::ideal();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = run_double_link(&cfg, &mut rng).unwrap();
        assert!(r.success);
        assert_eq!(r.attempts_ab, Some(1));
        let rho = r.final_density_matrix().unwrap().unwrap();
        let a = DensityMatrix::from_pure(&linkmodel::psi_target(r.sign_ab.unwrap())).unwrap();
        let b = DensityMatrix::from_pure(&linkmodel::psi_target(r.sign_bc.unwrap())).unwrap();
        let expect = a.tensor(&b).unwrap();
        let diff = crate::qstate::max_abs_diff(rho.matrix(), expect.matrix());
        assert!(diff < 1e-12);
    }
}
