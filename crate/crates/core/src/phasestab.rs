//! Phase detection and the time-multiplexed stabilization loop of the six
//! interferometer segments that make up the two optical links.
//!
//! Segment phases are tracked as deviations from their setpoints, in
//! degrees. The simulation advances on a fixed 10 us grid.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SIM_STEP_S: f64 = 10e-6;
pub const MIN_ROUNDS: usize = 100;

/// Phase from a homodyne intensity difference,
/// `arccos((I3 - I4) / (4 sqrt(I1 I2)))`, in degrees.
pub fn homodyne_phase(i1: f64, i2: f64, i3_minus_i4: f64) -> Result<f64> {
    if !(i1 > 0.0 && i2 > 0.0) {
        return Err(Error::param("i1, i2", "intensities must be positive"));
    }
    let bound = 4.0 * (i1 * i2).sqrt();
    if !(i3_minus_i4.abs() <= bound * (1.0 + 1e-12)) {
        return Err(Error::InconsistentIntensity {
            diff: i3_minus_i4,
            bound,
        });
    }
    Ok((i3_minus_i4 / bound).clamp(-1.0, 1.0).acos().to_degrees())
}

/// Output intensities `(I3, I4)` of the homodyne interferometer.
pub fn homodyne_outputs(i1: f64, i2: f64, phase_deg: f64) -> (f64, f64) {
    let x = 2.0 * (i1 * i2).sqrt() * phase_deg.to_radians().cos();
    (i1 + i2 + x, i1 + i2 - x)
}

pub fn wrap_deg(x: f64) -> f64 {
    let y = (x + 180.0).rem_euclid(360.0) - 180.0;
    if y == -180.0 {
        180.0
    } else {
        y
    }
}

/// Phase of the beat note relative to the electronic reference, by
/// quadrature demodulation of both signals at `beat_freq_hz` with a Hann
/// window. For `beat = A cos(2 pi f t - phi)` and `reference = cos(2 pi f t)`
/// the result is `phi` in degrees, wrapped to `(-180, 180]`.
pub fn heterodyne_phase(
    beat_samples: &[f64],
    reference: &[f64],
    beat_freq_hz: f64,
    sample_rate_hz: f64,
) -> Result<f64> {
    if beat_samples.len() != reference.len() {
        return Err(Error::DimensionMismatch {
            expected: reference.len(),
            got: beat_samples.len(),
        });
    }
    if !(beat_freq_hz > 0.0 && sample_rate_hz >= 10.0 * beat_freq_hz) {
        return Err(Error::InsufficientSamples(format!(
            "sample rate {sample_rate_hz} Hz is below 10x the beat frequency {beat_freq_hz} Hz"
        )));
    }
    let n = beat_samples.len();
    let periods = n as f64 * beat_freq_hz / sample_rate_hz;
    if periods < 2.0 {
        return Err(Error::InsufficientSamples(format!(
            "{periods:.2} beat periods recorded, need at least 2"
        )));
    }
    let demod = |x: &[f64]| -> (Complex64, f64) {
        let mean = x.iter().sum::<f64>() / n as f64;
        let mut z = Complex64::new(0.0, 0.0);
        let mut energy = 0.0;
        for (k, &v) in x.iter().enumerate() {
            let w = 0.5 - 0.5 * (2.0 * PI * k as f64 / (n - 1) as f64).cos();
            let t = k as f64 / sample_rate_hz;
            let arg = -2.0 * PI * beat_freq_hz * t;
            z += Complex64::from_polar(w * (v - mean), arg);
            energy += (v - mean).powi(2);
        }
        (z, energy)
    };
    let (zb, eb) = demod(beat_samples);
    let (zr, _) = demod(reference);
    if zb.norm() <= 1e-12 * eb.sqrt().max(1e-300) || zb.norm() == 0.0 {
        return Err(Error::DegenerateData("beat signal has no amplitude".into()));
    }
    if zr.norm() == 0.0 {
        return Err(Error::DegenerateData("reference has no amplitude".into()));
    }
    Ok(wrap_deg((zr.arg() - zb.arg()).to_degrees()))
}

/// Circular standard deviation `sqrt(-2 ln R)` of angles in degrees.
pub fn circular_std_deg(angles_deg: &[f64]) -> f64 {
    if angles_deg.is_empty() {
        return 0.0;
    }
    let z: Complex64 = angles_deg
        .iter()
        .map(|a| Complex64::from_polar(1.0, a.to_radians()))
        .sum::<Complex64>()
        / angles_deg.len() as f64;
    let r = z.norm().min(1.0);
    if r <= 0.0 {
        return f64::INFINITY;
    }
    (-2.0 * r.ln()).max(0.0).sqrt().to_degrees()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SegmentId {
    #[serde(rename = "local-A")]
    LocalA,
    #[serde(rename = "local-B_A")]
    LocalBA,
    #[serde(rename = "global-AB")]
    GlobalAB,
    #[serde(rename = "local-C")]
    LocalC,
    #[serde(rename = "local-B_C")]
    LocalBC,
    #[serde(rename = "global-BC")]
    GlobalBC,
}

impl SegmentId {
    pub const ALL: [SegmentId; 6] = [
        SegmentId::LocalA,
        SegmentId::LocalBA,
        SegmentId::GlobalAB,
        SegmentId::LocalC,
        SegmentId::LocalBC,
        SegmentId::GlobalBC,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SegmentId::LocalA => "local-A",
            SegmentId::LocalBA => "local-B_A",
            SegmentId::GlobalAB => "global-AB",
            SegmentId::LocalC => "local-C",
            SegmentId::LocalBC => "local-B_C",
            SegmentId::GlobalBC => "global-BC",
        }
    }

    pub fn is_global(self) -> bool {
        matches!(self, SegmentId::GlobalAB | SegmentId::GlobalBC)
    }

    pub fn link(self) -> LinkId {
        match self {
            SegmentId::LocalA | SegmentId::LocalBA | SegmentId::GlobalAB => LinkId::AB,
            _ => LinkId::BC,
        }
    }
}

impl fmt::Display for SegmentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SegmentId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SegmentId::ALL
            .into_iter()
            .find(|id| id.name() == s)
            .ok_or_else(|| Error::UnknownLabel(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LinkId {
    AB,
    BC,
}

impl LinkId {
    pub fn segments(self) -> [SegmentId; 3] {
        match self {
            LinkId::AB => [SegmentId::LocalA, SegmentId::LocalBA, SegmentId::GlobalAB],
            LinkId::BC => [SegmentId::LocalC, SegmentId::LocalBC, SegmentId::GlobalBC],
        }
    }
}

impl FromStr for LinkId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('-', "").as_str() {
            "AB" => Ok(LinkId::AB),
            "BC" => Ok(LinkId::BC),
            _ => Err(Error::UnknownLabel(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectionKind {
    Homodyne,
    Heterodyne,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sinusoid {
    pub frequency_hz: f64,
    pub amplitude_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpectrum {
    #[serde(default)]
    pub components: Vec<Sinusoid>,
    /// One-sided white-noise density; per-step std is `w / sqrt(2 dt)`.
    #[serde(default)]
    pub white_deg_per_sqrt_hz: f64,
    #[serde(default)]
    pub random_walk_deg_per_sqrt_s: f64,
    #[serde(default)]
    pub drift_deg_per_hour: f64,
}

impl NoiseSpectrum {
    pub fn validate(&self) -> Result<()> {
        for s in &self.components {
            if !(s.amplitude_deg >= 0.0 && s.frequency_hz >= 0.0) {
                return Err(Error::param(
                    "components",
                    "amplitudes and frequencies must be non-negative",
                ));
            }
        }
        if !(self.white_deg_per_sqrt_hz >= 0.0) {
            return Err(Error::param(
                "white_deg_per_sqrt_hz",
                "must be non-negative",
            ));
        }
        if !(self.random_walk_deg_per_sqrt_s >= 0.0) {
            return Err(Error::param(
                "random_walk_deg_per_sqrt_s",
                "must be non-negative",
            ));
        }
        if !self.drift_deg_per_hour.is_finite() {
            return Err(Error::param("drift_deg_per_hour", "must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeedbackConfig {
    pub gain: f64,
    pub setpoint_deg: f64,
    pub actuator_range_deg: f64,
    pub measurement_integration_s: f64,
}

impl FeedbackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gain >= 0.0) {
            return Err(Error::param("gain", "must be non-negative"));
        }
        if !(self.actuator_range_deg > 0.0) {
            return Err(Error::param("actuator_range_deg", "must be positive"));
        }
        if !(self.measurement_integration_s >= 0.0) {
            return Err(Error::param(
                "measurement_integration_s",
                "must be non-negative",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterferometerSegment {
    pub id: SegmentId,
    pub detection_kind: DetectionKind,
    pub noise: NoiseSpectrum,
    pub actuator: FeedbackConfig,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SlotKind {
    Experiment,
    Stabilize { segments: Vec<SegmentId> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Slot {
    #[serde(flatten)]
    pub kind: SlotKind,
    pub duration_s: f64,
}

/// One repeating cycle of slots. Segments listed in the same stabilize slot
/// are measured and corrected concurrently.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StabilizationSchedule {
    pub cycle: Vec<Slot>,
    /// Stabilization-only cycles run before the first experiment window.
    #[serde(default)]
    pub startup_rounds: usize,
}

impl StabilizationSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.cycle.is_empty() {
            return Err(Error::param("cycle", "schedule needs at least one slot"));
        }
        if !self.cycle.iter().any(|s| s.kind == SlotKind::Experiment) {
            return Err(Error::param("cycle", "schedule needs an experiment slot"));
        }
        for s in &self.cycle {
            if !(s.duration_s >= SIM_STEP_S) {
                return Err(Error::param(
                    "duration_s",
                    "slots must last at least one 10 us step",
                ));
            }
            if let SlotKind::Stabilize { segments } = &s.kind {
                for (i, id) in segments.iter().enumerate() {
                    if segments[..i].contains(id) {
                        return Err(Error::param(
                            "segments",
                            format!("{id} listed twice in one slot"),
                        ));
                    }
                }
                // global interferometers share the heralding detectors
                if segments.contains(&SegmentId::GlobalAB)
                    && segments.contains(&SegmentId::GlobalBC)
                {
                    return Err(Error::param(
                        "segments",
                        "global-AB and global-BC share detectors and cannot be measured together",
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn cycle_duration_s(&self) -> f64 {
        self.cycle.iter().map(|s| s.duration_s).sum()
    }

    /// Cycle `[stabilize A-B set, stabilize B-C set, experiment]`.
    pub fn interleaved(stab_s: f64, experiment_s: f64, startup_rounds: usize) -> Self {
        Self {
            cycle: vec![
                Slot {
                    kind: SlotKind::Stabilize {
                        segments: LinkId::AB.segments().to_vec(),
                    },
                    duration_s: stab_s,
                },
                Slot {
                    kind: SlotKind::Stabilize {
                        segments: LinkId::BC.segments().to_vec(),
                    },
                    duration_s: stab_s,
                },
                Slot {
                    kind: SlotKind::Experiment,
                    duration_s: experiment_s,
                },
            ],
            startup_rounds,
        }
    }
}

impl Default for StabilizationSchedule {
    fn default() -> Self {
        Self::interleaved(100e-6, 800e-6, 3)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseStabConfig {
    pub segments: Vec<InterferometerSegment>,
    pub schedule: StabilizationSchedule,
}

impl PhaseStabConfig {
    pub fn validate(&self) -> Result<()> {
        let locals = self.segments.iter().filter(|s| !s.id.is_global()).count();
        let globals = self.segments.len() - locals;
        for (i, s) in self.segments.iter().enumerate() {
            if self.segments[..i].iter().any(|o| o.id == s.id) {
                return Err(Error::param(
                    "segments",
                    format!("duplicate segment {}", s.id),
                ));
            }
            s.noise.validate()?;
            s.actuator.validate()?;
        }
        if locals != 4 || globals != 2 {
            return Err(Error::param(
                "segments",
                "three-node layout needs 4 local and 2 global segments",
            ));
        }
        self.schedule.validate()
    }

    /// Calibrated defaults: the stabilized link phases come out at about
    /// 30 deg (A-B) and 15 deg (B-C). Node A's local stage carries strong
    /// broadband noise above the 500 Hz loop bandwidth; the A-B fiber is
    /// dominated by strong low-frequency noise that the loop removes.
    /// Fast noise is white rather than tonal: a pure tone above the loop
    /// rate aliases, and its residual then oscillates with the schedule.
    pub fn calibrated() -> Self {
        let fb = |setpoint: f64| FeedbackConfig {
            gain: 1.0,
            setpoint_deg: setpoint,
            actuator_range_deg: 720.0,
            measurement_integration_s: 20e-6,
        };
        let seg = |id: SegmentId, components: Vec<(f64, f64)>, white: f64, rw: f64| {
            InterferometerSegment {
                id,
                detection_kind: if id.is_global() {
                    DetectionKind::Homodyne
                } else {
                    DetectionKind::Heterodyne
                },
                noise: NoiseSpectrum {
                    components: components
                        .into_iter()
                        .map(|(f, a)| Sinusoid {
                            frequency_hz: f,
                            amplitude_deg: a,
                        })
                        .collect(),
                    white_deg_per_sqrt_hz: white,
                    random_walk_deg_per_sqrt_s: rw,
                    drift_deg_per_hour: 0.0,
                },
                actuator: fb(if id.is_global() { 90.0 } else { 0.0 }),
            }
        };
        Self {
            segments: vec![
                seg(SegmentId::LocalA, vec![(35.0, 10.6)], 0.088, 15.9),
                seg(
                    SegmentId::LocalBA,
                    vec![(60.0, 10.6), (320.0, 2.1)],
                    0.035,
                    14.2,
                ),
                seg(
                    SegmentId::GlobalAB,
                    vec![(8.0, 110.4), (25.0, 55.2), (180.0, 9.2)],
                    0.046,
                    110.4,
                ),
                seg(
                    SegmentId::LocalC,
                    vec![(70.0, 8.9), (410.0, 3.6), (900.0, 3.6)],
                    0.030,
                    11.9,
                ),
                seg(
                    SegmentId::LocalBC,
                    vec![(60.0, 8.2), (320.0, 1.6)],
                    0.027,
                    10.9,
                ),
                seg(
                    SegmentId::GlobalBC,
                    vec![(12.0, 17.2), (150.0, 4.6), (1100.0, 2.9)],
                    0.029,
                    23.0,
                ),
            ],
            schedule: StabilizationSchedule::default(),
        }
    }

    pub fn segment_mut(&mut self, id: SegmentId) -> Option<&mut InterferometerSegment> {
        self.segments.iter_mut().find(|s| s.id == id)
    }
}

/// Output of a closed-loop run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopResult {
    pub dt_s: f64,
    pub segment_ids: Vec<SegmentId>,
    /// Per-segment deviation from setpoint at every step, wrapped to
    /// `(-180, 180]` degrees.
    pub phases_deg: Vec<Vec<f64>>,
    /// Experiment-window round index of each step, `None` outside windows.
    pub round: Vec<Option<usize>>,
    pub n_rounds: usize,
    /// Circular std per segment over all experiment windows.
    pub segment_std_deg: Vec<f64>,
}

impl ClosedLoopResult {
    fn series(&self, id: SegmentId) -> Option<&[f64]> {
        self.segment_ids
            .iter()
            .position(|s| *s == id)
            .map(|i| self.phases_deg[i].as_slice())
    }

    pub fn segment_std(&self, id: SegmentId) -> Option<f64> {
        self.segment_ids
            .iter()
            .position(|s| *s == id)
            .map(|i| self.segment_std_deg[i])
    }

    /// Summed link phase during experiment windows.
    pub fn link_phases(&self, link: LinkId) -> Result<Vec<f64>> {
        let parts: Vec<&[f64]> = link
            .segments()
            .iter()
            .map(|id| {
                self.series(*id)
                    .ok_or_else(|| Error::UnknownLabel(id.name().to_string()))
            })
            .collect::<Result<_>>()?;
        Ok(self
            .round
            .iter()
            .enumerate()
            .filter(|(_, r)| r.is_some())
            .map(|(k, _)| wrap_deg(parts.iter().map(|p| p[k]).sum()))
            .collect())
    }

    /// Circular std of the link phase within each experiment window.
    pub fn per_round_link_std(&self, link: LinkId) -> Result<Vec<f64>> {
        let phases = self.link_phases(link)?;
        let mut rounds: Vec<Vec<f64>> = vec![Vec::new(); self.n_rounds];
        for (r, p) in self.round.iter().flatten().zip(phases) {
            rounds[*r].push(p);
        }
        Ok(rounds.iter().map(|r| circular_std_deg(r)).collect())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        self.write_csv_to(std::io::BufWriter::new(f))
    }

    /// Long-format trace: one row per step and segment.
    pub fn write_csv_to<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| Error::Io(e.to_string());
        w.write_record(["time_s", "segment_id", "phase_deg"])
            .map_err(io)?;
        for k in 0..self.round.len() {
            let t = format!("{:.6e}", k as f64 * self.dt_s);
            for (i, id) in self.segment_ids.iter().enumerate() {
                w.write_record([
                    t.as_str(),
                    id.name(),
                    &format!("{:.6}", self.phases_deg[i][k]),
                ])
                .map_err(io)?;
            }
        }
        w.flush().map_err(|e| Error::Io(e.to_string()))
    }
}

struct SegmentState<'a> {
    seg: &'a InterferometerSegment,
    rng: ChaCha8Rng,
    sin_phases: Vec<f64>,
    random_walk: f64,
    actuator: f64,
    white: Option<Normal<f64>>,
    walk: Option<Normal<f64>>,
    integ: Vec<f64>,
}

impl<'a> SegmentState<'a> {
    fn new(seg: &'a InterferometerSegment, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sin_phases = seg
            .noise
            .components
            .iter()
            .map(|_| rng.random::<f64>() * 2.0 * PI)
            .collect();
        let sd_white = seg.noise.white_deg_per_sqrt_hz / (2.0 * SIM_STEP_S).sqrt();
        let sd_walk = seg.noise.random_walk_deg_per_sqrt_s * SIM_STEP_S.sqrt();
        Self {
            seg,
            rng,
            sin_phases,
            random_walk: 0.0,
            actuator: 0.0,
            white: (sd_white > 0.0).then(|| Normal::new(0.0, sd_white).unwrap()),
            walk: (sd_walk > 0.0).then(|| Normal::new(0.0, sd_walk).unwrap()),
            integ: Vec::new(),
        }
    }

    /// Advances the noise by one step and returns the wrapped deviation.
    fn step(&mut self, t: f64) -> f64 {
        if let Some(d) = &self.walk {
            self.random_walk += d.sample(&mut self.rng);
        }
        let white = self.white.as_ref().map_or(0.0, |d| d.sample(&mut self.rng));
        let sines: f64 = self
            .seg
            .noise
            .components
            .iter()
            .zip(&self.sin_phases)
            .map(|(s, ph)| s.amplitude_deg * (2.0 * PI * s.frequency_hz * t + ph).sin())
            .sum();
        let drift = self.seg.noise.drift_deg_per_hour * t / 3600.0;
        wrap_deg(sines + self.random_walk + white + drift + self.actuator)
    }

    /// Phase estimate from the detector model, as a deviation from setpoint.
    fn measure(&self, deviation: f64) -> f64 {
        match self.seg.detection_kind {
            DetectionKind::Heterodyne => deviation,
            DetectionKind::Homodyne => {
                let setpoint = self.seg.actuator.setpoint_deg;
                let (i3, i4) = homodyne_outputs(1.0, 1.0, setpoint + deviation);
                let est = homodyne_phase(1.0, 1.0, (i3 - i4).clamp(-4.0, 4.0))
                    .expect("difference clamped into range");
                est - setpoint
            }
        }
    }

    fn correct(&mut self) {
        if self.integ.is_empty() {
            return;
        }
        let z: Complex64 = self
            .integ
            .iter()
            .map(|a| Complex64::from_polar(1.0, a.to_radians()))
            .sum();
        let mean = z.arg().to_degrees();
        self.integ.clear();
        let fb = &self.seg.actuator;
        let range = fb.actuator_range_deg;
        self.actuator = (self.actuator - fb.gain * mean).clamp(-range, range);
    }
}

struct Recorder {
    phases: Vec<Vec<f64>>,
    round: Vec<Option<usize>>,
}

fn stabilize_slot(
    states: &mut [SegmentState],
    ids: &[SegmentId],
    len: usize,
    integ_steps: &[usize],
    t: &mut f64,
    mut rec: Option<&mut Recorder>,
) {
    for k in 0..len {
        for (i, st) in states.iter_mut().enumerate() {
            let dev = st.step(*t);
            // the estimate integrates over the end of the slot
            if ids.contains(&st.seg.id) && k + integ_steps[i] >= len {
                let m = st.measure(dev);
                st.integ.push(m);
            }
            if let Some(r) = rec.as_deref_mut() {
                r.phases[i].push(dev);
            }
        }
        if let Some(r) = rec.as_deref_mut() {
            r.round.push(None);
        }
        *t += SIM_STEP_S;
    }
    for st in states.iter_mut() {
        if ids.contains(&st.seg.id) {
            st.correct();
        }
    }
}

/// Runs the segments through `duration_s` of the repeating schedule.
/// Each segment draws its noise from its own stream seeded from `rng` in
/// segment order, so changing one segment's feedback leaves the noise of
/// the others untouched.
pub fn simulate_closed_loop<R: Rng + ?Sized>(
    segments: &[InterferometerSegment],
    schedule: &StabilizationSchedule,
    duration_s: f64,
    rng: &mut R,
) -> Result<ClosedLoopResult> {
    schedule.validate()?;
    for s in segments {
        s.noise.validate()?;
        s.actuator.validate()?;
    }
    let mut states: Vec<SegmentState> = segments
        .iter()
        .map(|s| SegmentState::new(s, rng.random()))
        .collect();

    // slot boundaries in whole steps
    let slots: Vec<(SlotKind, usize)> = schedule
        .cycle
        .iter()
        .map(|s| {
            (
                s.kind.clone(),
                (s.duration_s / SIM_STEP_S).round().max(1.0) as usize,
            )
        })
        .collect();
    let integ_steps: Vec<usize> = segments
        .iter()
        .map(|s| ((s.actuator.measurement_integration_s / SIM_STEP_S).round() as usize).max(1))
        .collect();

    let mut t = 0.0;
    for _ in 0..schedule.startup_rounds {
        for (kind, len) in &slots {
            if let SlotKind::Stabilize { segments: ids } = kind {
                stabilize_slot(&mut states, ids, *len, &integ_steps, &mut t, None);
            }
        }
    }

    let total_steps = (duration_s.max(0.0) / SIM_STEP_S).round() as usize;
    let mut rec = Recorder {
        phases: vec![Vec::with_capacity(total_steps); segments.len()],
        round: Vec::with_capacity(total_steps),
    };
    let mut n_rounds = 0usize;
    'outer: loop {
        for (kind, len) in &slots {
            if rec.round.len() >= total_steps {
                break 'outer;
            }
            let len = (*len).min(total_steps - rec.round.len());
            match kind {
                SlotKind::Stabilize { segments: ids } => {
                    stabilize_slot(&mut states, ids, len, &integ_steps, &mut t, Some(&mut rec));
                }
                SlotKind::Experiment => {
                    for _ in 0..len {
                        for (i, st) in states.iter_mut().enumerate() {
                            rec.phases[i].push(st.step(t));
                        }
                        rec.round.push(Some(n_rounds));
                        t += SIM_STEP_S;
                    }
                    n_rounds += 1;
                }
            }
        }
    }
    let Recorder { phases, round } = rec;
    let segment_std_deg = phases
        .iter()
        .map(|p| {
            let sel: Vec<f64> = p
                .iter()
                .zip(&round)
                .filter(|(_, r)| r.is_some())
                .map(|(x, _)| *x)
                .collect();
            circular_std_deg(&sel)
        })
        .collect();
    Ok(ClosedLoopResult {
        dt_s: SIM_STEP_S,
        segment_ids: segments.iter().map(|s| s.id).collect(),
        phases_deg: phases,
        round,
        n_rounds,
        segment_std_deg,
    })
}

/// Circular std of the summed link phase over all experiment windows.
pub fn effective_link_phase_sigma(link: LinkId, result: &ClosedLoopResult) -> Result<f64> {
    if result.n_rounds < MIN_ROUNDS {
        return Err(Error::InsufficientSamples(format!(
            "{} stabilization rounds simulated, need at least {MIN_ROUNDS}",
            result.n_rounds
        )));
    }
    Ok(circular_std_deg(&result.link_phases(link)?))
}
