//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria listed in `KNOWN_RED` still run and still print FAIL when they
//! fail; they do not fail the process because their disagreement with the
//! reference is explained in the README. Any other FAIL exits nonzero, and
//! a known-red criterion that starts passing is reported as such.

use std::f64::consts::PI;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Normal};

use trinode_core::cli::{self, ExperimentConfig};
use trinode_core::linkmodel::{self, LinkParams};
use trinode_core::noise::{self, DecayPoint, FitOptions, MemoryDecayParams, ReadoutModel};
use trinode_core::phasestab::{
    self, DetectionKind, FeedbackConfig, InterferometerSegment, LinkId, NoiseSpectrum,
    PhaseStabConfig, SegmentId, Slot, SlotKind, StabilizationSchedule,
};
use trinode_core::protocol::{self, ProtocolConfig, ProtocolKind};
use trinode_core::tomo::{self, CountVector};

const SEED: u64 = 20240101;
const MC_RUNS: u64 = 100_000;

/// Bob's asymmetric readout puts the 00 share at about 0.217 instead of 0.23.
const KNOWN_RED: &[u32] = &[6];

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn within(x: f64, target: f64, tol: f64) -> bool {
    (x - target).abs() <= tol
}

fn c1_link_budget() -> Outcome {
    let sources = [
        linkmodel::SOURCE_DOUBLE_EMISSION,
        linkmodel::SOURCE_PHASE,
        linkmodel::SOURCE_DOUBLE_EXCITATION,
        linkmodel::SOURCE_DISTINGUISHABILITY,
        linkmodel::SOURCE_DARK_COUNTS,
    ];
    let cases = [
        (
            "A-B",
            LinkParams::reference_ab(),
            [6.1e-2, 6.0e-2, 5.5e-2, 2.4e-2, 5e-3],
            0.191,
        ),
        (
            "B-C",
            LinkParams::reference_bc(),
            [8.0e-2, 1.5e-2, 7.0e-2, 2.3e-2, 5e-3],
            0.186,
        ),
    ];
    let mut pass = true;
    let mut worst: f64 = 0.0;
    let mut combined = Vec::new();
    for (name, p, rows, total) in cases {
        let b = linkmodel::error_budget(&p).expect("reference params are valid");
        for (src, r) in sources.iter().zip(rows) {
            let d = (b.get(src).unwrap() - r).abs();
            worst = worst.max(d);
            pass &= d <= 0.005;
        }
        let d = (b.combined - total).abs();
        worst = worst.max(d);
        pass &= d <= 0.005;
        combined.push(format!("{name} {:.4}", b.combined));
    }
    Outcome::new(
        pass,
        format!(
            "combined {}, largest row deviation {worst:.2e} (tol 5e-3)",
            combined.join(", ")
        ),
    )
}

fn c2_link_limit() -> Outcome {
    let mut pass = true;
    let mut worst_f: f64 = 0.0;
    for alpha in [0.01, 0.05, 0.1, 0.2, 0.3] {
        let p = LinkParams {
            alpha_a: alpha,
            alpha_b: alpha,
            pdet_a: 4e-4,
            pdet_b: 4e-4,
            p_dc: 0.0,
            visibility: 1.0,
            phase_sigma_deg: 0.0,
            p_double: 0.0,
            attempt_duration_s: 5e-6,
            duty_factor: 1.0,
        };
        let f = linkmodel::link_fidelity(&p).unwrap();
        worst_f = worst_f.max((f - (1.0 - alpha)).abs());
    }
    pass &= worst_f <= 1e-12;
    let mut worst_p: f64 = 0.0;
    for p in [LinkParams::reference_ab(), LinkParams::reference_bc()] {
        let (aa, ab) = (p.alpha_a, p.alpha_b);
        let direct = aa * ab * (p.pdet_a + p.pdet_b + 2.0 * p.p_dc)
            + aa * (1.0 - ab) * (p.pdet_a + 2.0 * p.p_dc)
            + (1.0 - aa) * ab * (p.pdet_b + 2.0 * p.p_dc)
            + 2.0 * (1.0 - aa) * (1.0 - ab) * p.p_dc;
        worst_p = worst_p.max((linkmodel::success_probability(&p) - direct).abs());
    }
    pass &= worst_p <= 1e-12;
    Outcome::new(
        pass,
        format!("max |F - (1 - alpha)| {worst_f:.1e}, max |p_tot - direct| {worst_p:.1e}"),
    )
}

fn truncated_geometric_mean(p: f64, t: u64) -> f64 {
    let q = 1.0 - p;
    let mut num = 0.0;
    let mut den = 0.0;
    let mut w = p;
    for n in 1..=t {
        num += n as f64 * w;
        den += w;
        w *= q;
    }
    num / den
}

fn c3_link_sampling() -> Outcome {
    let n = 100_000u64;
    let mut pass = true;
    let mut details = Vec::new();
    for (name, p, seed) in [
        ("A-B", LinkParams::reference_ab(), 1u64),
        ("B-C", LinkParams::reference_bc(), 2),
    ] {
        let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ seed);
        let mut counts = [0u64; 4];
        for _ in 0..n {
            let h = linkmodel::sample_herald_microstate(&p, &mut rng).unwrap();
            counts[h.basis_index] += 1;
        }
        let analytic = linkmodel::populations(&p).normalized_by_index();
        let mut worst_z: f64 = 0.0;
        for i in 0..4 {
            let f = counts[i] as f64 / n as f64;
            let se = (analytic[i] * (1.0 - analytic[i]) / n as f64).sqrt();
            if se > 0.0 {
                worst_z = worst_z.max((f - analytic[i]).abs() / se);
            } else {
                pass &= counts[i] == 0;
            }
        }
        pass &= worst_z <= 4.0;

        let p_tot = linkmodel::success_probability(&p);
        let t = 450;
        let draws: Vec<f64> = (0..n)
            .map(|_| linkmodel::sample_attempts_given_success(p_tot, &mut rng, t).unwrap() as f64)
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let oracle = truncated_geometric_mean(p_tot, t);
        let z_attempts = (mean - oracle).abs() / (var / n as f64).sqrt();
        pass &= z_attempts <= 4.0;
        details.push(format!(
            "{name}: populations max z {worst_z:.2}, mean attempts {mean:.2} vs {oracle:.2} (z {z_attempts:.2})"
        ));
    }
    Outcome::new(pass, details.join("; "))
}

fn c4_ghz_budget() -> Outcome {
    let mut cfg = ProtocolConfig::reference();
    cfg.seed = SEED;
    let rows = protocol::ghz_error_budget(&cfg).unwrap();
    let combined = protocol::find_row(&rows, protocol::ROW_COMBINED).unwrap();
    let bells = protocol::find_row(&rows, protocol::ROW_BELLS).unwrap();
    let mc = protocol::run_batch_summary(&cfg, ProtocolKind::Ghz, MC_RUNS).unwrap();
    let f = mc.fidelity.expect("heralded runs");
    let mc_inf = 1.0 - f.mean;
    let pass =
        within(combined, 0.406, 0.01) && within(bells, 0.337, 0.01) && within(mc_inf, 0.406, 0.015);
    let z = (0.462 - combined) / 0.018;
    Outcome::new(
        pass,
        format!(
            "analytic {combined:.4}, Bell errors only {bells:.4}, Monte Carlo {mc_inf:.4} +/- {:.4} over {} heralds; measured 0.462(18) sits {z:.2} sigma above the model (informational)",
            f.sem, f.n
        ),
    )
}

fn c5_swap_budget() -> Outcome {
    let cfg = ProtocolConfig::reference();
    let rows = protocol::swap_error_budget(&cfg).unwrap();
    let get = |l: &str| protocol::find_row(&rows, l).unwrap();
    let c00 = get(protocol::ROW_COMBINED_00);
    let cany = get(protocol::ROW_COMBINED_ANY);
    let ff00 = get(protocol::ROW_FEEDFORWARD_00);
    let ffany = get(protocol::ROW_FEEDFORWARD_ANY);
    let pass = within(c00, 0.398, 0.01)
        && within(cany, 0.428, 0.01)
        && within(ff00, 1.3e-2, 0.005)
        && within(ffany, 7.5e-2, 0.005);
    Outcome::new(
        pass,
        format!("combined 00 {c00:.4}, any {cany:.4}; feed-forward 00 {ff00:.4}, any {ffany:.4}"),
    )
}

fn c6_bsm_shares() -> Outcome {
    let mut cfg = ProtocolConfig::reference();
    cfg.seed = SEED;
    let mc = protocol::run_batch_summary(&cfg, ProtocolKind::Swap, MC_RUNS).unwrap();
    let reference = [0.23, 0.25, 0.25, 0.27];
    let mut pass = true;
    let mut parts = Vec::new();
    for (o, r) in mc.outcomes.iter().zip(reference) {
        let z = (o.share - r) / o.share_sem;
        pass &= z.abs() <= 3.0;
        parts.push(format!("{} {:.4} (z {z:+.1})", o.bits, o.share));
    }
    Outcome::new(
        pass,
        format!(
            "{} against 0.23:0.25:0.25:0.27 over {} checked runs",
            parts.join(", "),
            mc.outcomes.iter().map(|o| o.count).sum::<u64>()
        ),
    )
}

fn decay_data(
    truth: &MemoryDecayParams,
    n_points: usize,
    sigma: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> Vec<DecayPoint> {
    let normal = Normal::new(0.0, sigma).unwrap();
    let mut rng = rng;
    (0..n_points)
        .map(|i| {
            let attempts = 4000.0 * i as f64 / (n_points - 1) as f64;
            let mut y = truth.bloch_length(attempts);
            if let Some(r) = rng.as_deref_mut() {
                y += normal.sample(r);
            }
            DecayPoint {
                attempts,
                bloch_length: y,
                sigma,
            }
        })
        .collect()
}

fn c7_memory_fit() -> Outcome {
    let truth = MemoryDecayParams::with_entanglement();
    let fit = noise::fit_memory_decay(&decay_data(&truth, 20, 0.01, None), &FitOptions::default())
        .unwrap();
    let rel = [
        (fit.amplitude_a - truth.amplitude_a).abs() / truth.amplitude_a,
        (fit.n_1e - truth.n_1e).abs() / truth.n_1e,
        (fit.exponent_n - truth.exponent_n).abs() / truth.exponent_n,
    ];
    let worst_rel = rel.iter().cloned().fold(0.0, f64::max);
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut covered = 0;
    for _ in 0..100 {
        let data = decay_data(&truth, 20, 0.01, Some(&mut rng));
        let f = noise::fit_memory_decay(&data, &FitOptions::default()).unwrap();
        if (f.amplitude_a - truth.amplitude_a).abs() <= 3.0 * f.sigma_a
            && (f.n_1e - truth.n_1e).abs() <= 3.0 * f.sigma_n_1e
            && (f.exponent_n - truth.exponent_n).abs() <= 3.0 * f.sigma_exponent_n
        {
            covered += 1;
        }
    }
    Outcome::new(
        worst_rel <= 1e-3 && covered >= 95,
        format!("noiseless max relative error {worst_rel:.1e}; 3 sigma coverage {covered}/100"),
    )
}

fn c8_feedforward() -> Outcome {
    let cfg = ProtocolConfig::ideal();
    let ghz = protocol::ghz_branches(&cfg).unwrap();
    let swap = protocol::swap_branches(&cfg).unwrap();
    let worst = ghz
        .iter()
        .chain(&swap)
        .map(|b| 1.0 - b.fidelity)
        .fold(0.0, f64::max);
    Outcome::new(
        ghz.len() == 8 && swap.len() == 16 && worst <= 1e-10,
        format!(
            "{} GHZ and {} swap branches, max infidelity {worst:.1e}",
            ghz.len(),
            swap.len()
        ),
    )
}

fn c9_nuclear() -> Outcome {
    let nuclear = noise::NuclearSpinParams::default();
    let res = 2e-9;
    let bound = PI * res / nuclear.tau_larmor_s;
    let mut worst: f64 = 0.0;
    let mut n_checked = 0;
    // 1 ns attempts walk one full precession period in 490 steps
    let durations = [(1e-9, 490u64), (3.8e-6, 10_000), (5e-6, 10_000)];
    for (dur, n_max) in durations {
        for n in 0..=n_max {
            let ff = protocol::nuclear_phase_feedforward(n, dur, &nuclear, res).unwrap();
            worst = worst.max(ff.quantization_error_rad.abs());
            n_checked += 1;
        }
    }
    Outcome::new(
        worst <= bound + 1e-12,
        format!(
            "max residual {:.4} deg over {n_checked} attempt counts, bound {:.4} deg",
            worst.to_degrees(),
            bound.to_degrees()
        ),
    )
}

fn random_simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

fn c10_readout() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut worst: f64 = 0.0;
    for trial in 0..300 {
        let k = 1 + trial % 3;
        let models: Vec<ReadoutModel> = (0..k)
            .map(|_| {
                ReadoutModel::new(rng.random_range(0.8..1.0), rng.random_range(0.8..1.0)).unwrap()
            })
            .collect();
        let p = random_simplex(&mut rng, 1 << k);
        let m = noise::apply_readout_error(&p, &models).unwrap();
        let back = tomo::invert_frequencies(&m, &models).unwrap();
        for (a, b) in p.iter().zip(&back) {
            worst = worst.max((a - b).abs());
        }
    }
    let (f0, f1, n) = (0.95, 0.99, 1000u64);
    let counts = CountVector::new(vec![600, 400]).unwrap();
    let model = ReadoutModel::new(f0, f1).unwrap();
    let m0 = 0.6;
    let analytic = (m0 * (1.0 - m0) / n as f64).sqrt() / (f0 + f1 - 1.0);
    let mut mc_rng = ChaCha8Rng::seed_from_u64(SEED + 1);
    let mc =
        tomo::monte_carlo_uncertainty(&counts, &[model], 10_000, &mut mc_rng, |p| p[0]).unwrap();
    let rel = (mc.std - analytic).abs() / analytic;
    Outcome::new(
        worst <= 1e-10 && rel <= 0.1,
        format!(
            "round trip max error {worst:.1e}; single-qubit sigma {:.5} vs analytic {analytic:.5} ({:.1}%)",
            mc.std,
            rel * 100.0
        ),
    )
}

fn heterodyne_signal(phase_deg: f64, amp: f64) -> (Vec<f64>, Vec<f64>) {
    let (n, f, fs) = (2000, 10e6, 200e6);
    let beat = (0..n)
        .map(|k| 3.0 + amp * (2.0 * PI * f * k as f64 / fs - phase_deg.to_radians()).cos())
        .collect();
    let reference = (0..n)
        .map(|k| (2.0 * PI * f * k as f64 / fs).cos())
        .collect();
    (beat, reference)
}

fn walk_only_segment(gain: f64) -> InterferometerSegment {
    InterferometerSegment {
        id: SegmentId::GlobalAB,
        detection_kind: DetectionKind::Heterodyne,
        noise: NoiseSpectrum {
            random_walk_deg_per_sqrt_s: 100.0,
            ..NoiseSpectrum::default()
        },
        actuator: FeedbackConfig {
            gain,
            setpoint_deg: 0.0,
            actuator_range_deg: 720.0,
            measurement_integration_s: 20e-6,
        },
    }
}

/// Ensemble std of a free random walk at several times, fitted to `c t^k`.
fn random_walk_growth() -> (f64, f64) {
    let seg = vec![walk_only_segment(0.0)];
    let schedule = StabilizationSchedule {
        cycle: vec![Slot {
            kind: SlotKind::Experiment,
            duration_s: 1e-3,
        }],
        startup_rounds: 0,
    };
    let steps = [250usize, 500, 1000, 2000, 4000, 8000];
    let mut sq = vec![0.0; steps.len()];
    let n_seeds = 100;
    for seed in 0..n_seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = phasestab::simulate_closed_loop(&seg, &schedule, 0.08, &mut rng).unwrap();
        for (j, &k) in steps.iter().enumerate() {
            sq[j] += r.phases_deg[0][k - 1].powi(2);
        }
    }
    let xs: Vec<f64> = steps
        .iter()
        .map(|&k| (k as f64 * phasestab::SIM_STEP_S).ln())
        .collect();
    let ys: Vec<f64> = sq
        .iter()
        .map(|s| (s / n_seeds as f64).sqrt().ln())
        .collect();
    let mx = xs.iter().sum::<f64>() / xs.len() as f64;
    let my = ys.iter().sum::<f64>() / ys.len() as f64;
    let slope = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (x - mx) * (y - my))
        .sum::<f64>()
        / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    let prefactor = (my - slope * mx).exp();
    (slope, prefactor)
}

fn c11_phase() -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;

    let mut homodyne_dev: f64 = 0.0;
    for scale in [0.8, 1.0, 1.2] {
        let (i3, i4) = phasestab::homodyne_outputs(scale, 1.0, 90.0);
        homodyne_dev = homodyne_dev
            .max((phasestab::homodyne_phase(scale, 1.0, i3 - i4).unwrap() - 90.0).abs());
    }
    pass &= homodyne_dev <= 1e-9;
    notes.push(format!("homodyne setpoint shift {homodyne_dev:.1e} deg"));

    let est = |amp: f64| {
        let (b, r) = heterodyne_signal(37.0, amp);
        phasestab::heterodyne_phase(&b, &r, 10e6, 200e6).unwrap()
    };
    let (e1, e10) = (est(0.4), est(4.0));
    pass &= (e1 - 37.0).abs() <= 0.1 && (e10 - e1).abs() <= 0.1;
    notes.push(format!("heterodyne {e1:.3} / {e10:.3} deg"));

    let (slope, prefactor) = random_walk_growth();
    pass &= within(slope, 0.5, 0.05) && within(prefactor / 100.0, 1.0, 0.1);
    notes.push(format!(
        "free walk exponent {slope:.3}, prefactor {prefactor:.1} deg/sqrt(s)"
    ));

    let cfg = PhaseStabConfig::calibrated();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let r = phasestab::simulate_closed_loop(&cfg.segments, &cfg.schedule, 0.2, &mut rng).unwrap();
    let sab = phasestab::effective_link_phase_sigma(LinkId::AB, &r).unwrap();
    let sbc = phasestab::effective_link_phase_sigma(LinkId::BC, &r).unwrap();
    pass &= within(sab, 30.0, 3.0) && within(sbc, 15.0, 2.0);
    let row = |mut p: LinkParams, s: f64| {
        p.phase_sigma_deg = s;
        linkmodel::error_budget(&p)
            .unwrap()
            .get(linkmodel::SOURCE_PHASE)
            .unwrap()
    };
    let (rab, rbc) = (
        row(LinkParams::reference_ab(), sab),
        row(LinkParams::reference_bc(), sbc),
    );
    pass &= within(rab, 6.0e-2, 0.005) && within(rbc, 1.5e-2, 0.005);
    notes.push(format!(
        "stabilized sigma A-B {sab:.1} deg (phase row {rab:.4}), B-C {sbc:.1} deg (phase row {rbc:.4})"
    ));
    Outcome::new(pass, notes.join("; "))
}

fn c12_rates() -> Outcome {
    let rab = linkmodel::raw_rate_hz(&LinkParams::reference_ab());
    let rbc = linkmodel::raw_rate_hz(&LinkParams::reference_bc());
    let mut cfg = ExperimentConfig::parse(cli::bundled_config("ghz.toml").unwrap()).unwrap();
    let mut p = cfg.protocol.take().unwrap();
    p.seed = SEED;
    let mc = protocol::run_batch_summary(&p, ProtocolKind::Ghz, 20_000).unwrap();
    let period = 1.0 / mc.rate_hz.unwrap();
    let pass = (5.0..=20.0).contains(&rab)
        && (5.0..=20.0).contains(&rbc)
        && (30.0..=270.0).contains(&period);
    Outcome::new(
        pass,
        format!(
            "raw link rates {rab:.1} / {rbc:.1} Hz; GHZ every {period:.0} s with {:.3} s restart preparation (target 90 s, factor 3)",
            p.timing.restart_preparation_s
        ),
    )
}

fn c13_determinism() -> Outcome {
    let mut mismatched = Vec::new();
    for (name, text) in cli::BUNDLED_CONFIGS {
        let mut cfg = ExperimentConfig::parse(text).unwrap();
        cfg.n_runs = cfg.n_runs.min(2000);
        if let Some(t) = cfg.tomo.as_mut() {
            t.mc_samples = 1000;
        }
        let hash = cli::sha256_hex(text.as_bytes());
        let base = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
        let a = serde_json::to_string(&cli::run_experiment(&cfg, &hash, &base).unwrap()).unwrap();
        let b = serde_json::to_string(&cli::run_experiment(&cfg, &hash, &base).unwrap()).unwrap();
        if a != b {
            mismatched.push(name);
        }
    }
    let cfg = ProtocolConfig {
        seed: SEED,
        ..ProtocolConfig::reference()
    };
    let r1 = protocol::run_batch(&cfg, ProtocolKind::Swap, 200).unwrap();
    let r2 = protocol::run_batch(&cfg, ProtocolKind::Swap, 200).unwrap();
    let records_equal = serde_json::to_string(&r1).unwrap() == serde_json::to_string(&r2).unwrap();
    Outcome::new(
        mismatched.is_empty() && records_equal,
        if mismatched.is_empty() {
            format!(
                "{} bundled experiments and 200 swap run records identical on rerun",
                cli::BUNDLED_CONFIGS.len()
            )
        } else {
            format!("summaries differ for {mismatched:?}")
        },
    )
}

fn main() -> ExitCode {
    let criteria: [(u32, &str, fn() -> Outcome); 13] = [
        (1, "link error budget", c1_link_budget),
        (2, "link fidelity limit", c2_link_limit),
        (3, "Monte Carlo link sampling", c3_link_sampling),
        (4, "GHZ error budget", c4_ghz_budget),
        (5, "swap error budget", c5_swap_budget),
        (6, "BSM outcome shares", c6_bsm_shares),
        (7, "memory model fit", c7_memory_fit),
        (8, "feed-forward completeness", c8_feedforward),
        (9, "nuclear phase feed-forward", c9_nuclear),
        (10, "readout correction", c10_readout),
        (11, "phase stabilization", c11_phase),
        (12, "rates", c12_rates),
        (13, "determinism", c13_determinism),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut unexpected = 0;
    for (id, name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|s| name.contains(s.as_str())) {
            continue;
        }
        let t = Instant::now();
        let o = f();
        let known = KNOWN_RED.contains(&id);
        let tag = match (o.pass, known) {
            (true, false) => "PASS",
            (false, false) => {
                unexpected += 1;
                "FAIL"
            }
            (false, true) => "FAIL (known red, see README)",
            (true, true) => "PASS (listed as known red; update KNOWN_RED)",
        };
        println!(
            "{tag} criterion {id:>2} {name}: {} [{:.1} s]",
            o.detail,
            t.elapsed().as_secs_f64()
        );
    }
    if unexpected > 0 {
        println!("{unexpected} criterion(s) failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
