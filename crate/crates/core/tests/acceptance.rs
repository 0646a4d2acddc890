//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the binary exits non-zero if any fails.

use std::f64::consts::{PI, TAU};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use num_complex::Complex64 as C;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use polqkd::calibration::calibrate_all;
use polqkd::chain::{OpticalChain, Topology, ALICE_PHASES, BOB_PHASES};
use polqkd::jones::{alice_section, bb84_states, bob_section, swap_section};
use polqkd::optics::AttenuatorMode;
use polqkd::protocol::{encode, sift, Basis, BobChoice, PulseRecord, Transmitter};
use polqkd::pulse::{coherency, swap_compensation_chain, PulseParams};
use polqkd::scenario::{preset, simulate, Scenario};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn lab() -> Scenario {
    preset("lab_50km").expect("bundled").expect("valid")
}

fn urban() -> Scenario {
    preset("urban_30km").expect("bundled").expect("valid")
}

fn calibrated_lab_chain(seed: u64) -> (OpticalChain, bool) {
    let s = Scenario { seed, ..lab() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chain = s.build_chain(&mut rng).unwrap();
    let report = calibrate_all(&mut chain, &s.calibration, s.effective_clock_hz, &mut rng).unwrap();
    (chain, report.converged)
}

// Plain complex arithmetic, independent of the library's Jones types.
fn inner(u: [C; 2], v: [C; 2]) -> C {
    u[0].conj() * v[0] + u[1].conj() * v[1]
}

fn matmul(a: [[C; 2]; 2], b: [[C; 2]; 2]) -> [[C; 2]; 2] {
    let mut out = [[C::new(0.0, 0.0); 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    out
}

fn acc1_state_algebra() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut worst_orth, mut worst_unbiased, mut worst_meridian, mut worst_spacing) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let phi1 = rng.random_range(0.0..TAU);
        // ψ₁, ψ₂, χ₁, χ₂
        let states = bb84_states(phi1).map(|s| [s.a_o, s.a_e]);
        let ov = |i: usize, j: usize| inner(states[i], states[j]).norm_sqr();
        worst_orth = worst_orth.max(ov(0, 1)).max(ov(2, 3));
        for (i, j) in [(0, 2), (0, 3), (1, 2), (1, 3)] {
            worst_unbiased = worst_unbiased.max((ov(i, j) - 0.5).abs());
        }
        let stokes = states.map(|[o, e]| {
            let n = o.norm_sqr() + e.norm_sqr();
            let x = o.conj() * e;
            [(o.norm_sqr() - e.norm_sqr()) / n, 2.0 * x.re / n, 2.0 * x.im / n]
        });
        // The great circle through the circular poles with S1 = 0.
        for s in &stokes {
            worst_meridian = worst_meridian.max(s[0].abs());
        }
        // Going around: ψ₁ → χ₁ → ψ₂ → χ₂ → ψ₁ in quarter turns.
        let longitude = |s: &[f64; 3]| s[2].atan2(s[1]);
        let order = [0, 2, 1, 3];
        for k in 0..4 {
            let a = longitude(&stokes[order[k]]);
            let b = longitude(&stokes[order[(k + 1) % 4]]);
            let step = (b - a).rem_euclid(TAU);
            worst_spacing = worst_spacing.max((step - PI / 2.0).abs());
        }
    }
    let pass = worst_orth <= 1e-12 && worst_unbiased <= 1e-12 && worst_meridian <= 1e-12 && worst_spacing <= 1e-9;
    verdict(
        pass,
        format!(
            "max same-basis overlap {worst_orth:.1e}, max |cross-basis overlap − 0.5| {worst_unbiased:.1e}, \
             max |S1| {worst_meridian:.1e}, max spacing error {worst_spacing:.1e} rad"
        ),
    )
}

fn acc2_closure() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let (mut worst_off, mut worst_unit) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let phi1 = rng.random_range(-PI..PI);
        let phi2 = rng.random_range(-PI..PI);
        let phi3 = -phi1 - phi2;
        let m = matmul(bob_section(phi3).m, matmul(swap_section(phi2).m, alice_section(phi1).m));
        worst_off = worst_off.max(m[0][1].norm()).max(m[1][0].norm());
        worst_unit = worst_unit
            .max((m[0][0].norm() - 1.0).abs())
            .max((m[1][1].norm() - 1.0).abs());
    }
    verdict(
        worst_off <= 1e-12 && worst_unit <= 1e-12,
        format!("max off-diagonal {worst_off:.1e}, max |diagonal| − 1 {worst_unit:.1e} over 1000 draws"),
    )
}

fn acc3_extinction() -> Verdict {
    const PULSES_PER_STATE: u64 = 100_000;
    let seeds = [1u64, 2, 3, 4, 5];
    let mut lines = Vec::new();
    let mut pass = true;
    for seed in seeds {
        let (mut chain, converged) = calibrated_lab_chain(seed);
        chain.attenuator.mode = AttenuatorMode::Calibration;
        let tx = Transmitter::new(&chain).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let mut worst = 1.0f64;
        for bit in [0u8, 1] {
            for basis in [Basis::Linear, Basis::Circular] {
                let (mut right, mut wrong) = (0u64, 0u64);
                for i in 0..PULSES_PER_STATE {
                    let r = tx.transmit(i, encode(bit, basis), BobChoice::new(basis), &mut rng);
                    let (intended, other) = if bit == 0 {
                        (r.click1, r.click2)
                    } else {
                        (r.click2, r.click1)
                    };
                    right += intended as u64;
                    wrong += other as u64;
                }
                worst = worst.min(right as f64 / (right + wrong) as f64);
            }
        }
        pass &= converged && worst >= 0.98;
        lines.push(format!(
            "seed {seed}: {worst:.4}{}",
            if converged { "" } else { " (not converged)" }
        ));
    }
    verdict(
        pass,
        format!("worst per-state extinction, 1e5 pulses per state: {}", lines.join(", ")),
    )
}

fn acc4_pmd() -> Verdict {
    let params = PulseParams::default();
    let compensated = PulseParams {
        compensation: true,
        ..params
    }
    .intrinsic_qber()
    .unwrap();
    let uncompensated = PulseParams {
        compensation: false,
        ..params
    }
    .intrinsic_qber()
    .unwrap();
    // Both crystals delay the same axis, so a Gaussian field
    // exp(−a·t² + i·c·t²) meets a diagonal analyzer with overlap
    // exp(−a·τ²/2 − c²·τ²/(2a)) between its delayed and undelayed halves.
    let a = 2.0 * std::f64::consts::LN_2 / params.fwhm_s.powi(2);
    let tau = params.alice_delay_s + params.bob_delay_s;
    let c = params.chirp;
    let oracle = 0.5 * (1.0 - (-a * tau * tau / 2.0 - c * c * tau * tau / (2.0 * a)).exp());
    let knee = (2.0 * a).sqrt() / tau;

    let launched = params.launch().unwrap();
    let restored =
        swap_compensation_chain(&launched, params.alice_delay_s, &swap_section(0.0), params.bob_delay_s).unwrap();
    let dop = coherency(&restored).unwrap().dop();

    let pass = c > knee
        && uncompensated >= 10.0 * compensated
        && (uncompensated - oracle).abs() <= 1e-6
        && (dop - 1.0).abs() <= 1e-9;
    verdict(
        pass,
        format!(
            "chirp {c:.1e} rad/s² (knee {knee:.1e}): uncompensated {uncompensated:.4} (closed form {oracle:.4}), \
             compensated {compensated:.1e}; DOP after swap {dop:.12}"
        ),
    )
}

fn acc5_convergence() -> Verdict {
    let s = lab();
    let base = s.build_chain(&mut ChaCha8Rng::seed_from_u64(s.seed)).unwrap();
    let results: Vec<(f64, bool)> = (0..100u64)
        .into_par_iter()
        .map(|init| {
            let mut rng = ChaCha8Rng::seed_from_u64(5000 + init);
            let mut chain = base.clone();
            for &slot in chain.tunable_slots() {
                let pc = chain.controller_mut(slot).unwrap();
                *pc = pc.random_voltages(&mut rng);
            }
            let report = calibrate_all(&mut chain, &s.calibration, s.effective_clock_hz, &mut rng).unwrap();
            (Transmitter::new(&chain).unwrap().expected().qber, report.converged)
        })
        .collect();
    let below = results.iter().filter(|(q, _)| *q <= 0.05).count();
    let reached_target = results.iter().filter(|(_, c)| *c).count();

    let splice = Scenario {
        topology: Topology::Splice45,
        ..s.clone()
    };
    let splice_ok: Vec<bool> = (0..20u64)
        .into_par_iter()
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut chain = splice.build_chain(&mut rng).unwrap();
            let before = (chain.section1, chain.section3);
            let report = calibrate_all(&mut chain, &splice.calibration, splice.effective_clock_hz, &mut rng).unwrap();
            let only_pc2 = chain.tunable_slots().len() == 1
                && report.controllers.keys().all(|k| k == "Pc2")
                && (chain.section1, chain.section3) == before;
            only_pc2 && report.converged && Transmitter::new(&chain).unwrap().expected().qber <= 0.05
        })
        .collect();
    let splice_pass = splice_ok.iter().filter(|&&ok| ok).count();

    verdict(
        below >= 95 && splice_pass == splice_ok.len(),
        format!(
            "{below}/100 random initializations at QBER ≤ 5% ({reached_target} reached the calibration target); \
             splice: {splice_pass}/{} converged tuning PC2 alone",
            splice_ok.len()
        ),
    )
}

/// Sifted-bit probability per pulse from Poissonian single-click statistics.
fn sifted_oracle(chain: &OpticalChain) -> f64 {
    let mu = chain.mean_photons_at_detector();
    let e = chain.intrinsic_error;
    let mut total = 0.0;
    for (ai, &a) in ALICE_PHASES.iter().enumerate() {
        let b = BOB_PHASES[ai % 2];
        let out = chain.output_state(a, b).unwrap();
        let n = out.a_o.norm_sqr() + out.a_e.norm_sqr();
        let (q1, q2) = (out.a_o.norm_sqr() / n, out.a_e.norm_sqr() / n);
        let (p1, p2) = (q1 * (1.0 - e) + q2 * e, q2 * (1.0 - e) + q1 * e);
        let silent =
            |p: f64, det: usize| (1.0 - chain.dark_prob(det)) * (-mu * chain.detectors[det].efficiency * p).exp();
        let (s1, s2) = (silent(p1, 0), silent(p2, 1));
        total += (1.0 - s1) * s2 + (1.0 - s2) * s1;
    }
    // A pulse lands in each matched cell with probability 1/8.
    total / 8.0
}

fn acc6_lab() -> Verdict {
    let s = lab();
    let run = simulate(&s).unwrap().summary;
    let st = &run.stats;
    let mean = run.mean_window_qber.unwrap_or(f64::NAN);
    let rate_ok = (250.0..=1000.0).contains(&st.sifted_rate);
    let qber_ok = st.qber <= 0.05 && (0.01..=0.03).contains(&mean);

    const PULSES: u64 = 10_000_000;
    let (chain, _) = calibrated_lab_chain(s.seed);
    let tx = Transmitter::new(&chain).unwrap();
    let p = sifted_oracle(&chain);
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let mut sifted = 0u64;
    let chunk = 1_000_000;
    for start in (0..PULSES).step_by(chunk) {
        let records: Vec<PulseRecord> = (start..start + chunk as u64)
            .map(|i| tx.transmit_random(i, &mut rng))
            .collect();
        sifted += sift(&records).len() as u64;
    }
    let expected = p * PULSES as f64;
    let sigma = (PULSES as f64 * p * (1.0 - p)).sqrt();
    let z = (sifted as f64 - expected) / sigma;
    let mc_ok = z.abs() <= 3.0;
    let mc_rate = sifted as f64 / PULSES as f64 * s.effective_clock_hz;

    verdict(
        rate_ok && qber_ok && mc_ok,
        format!(
            "session: {:.0} bit/s, QBER {:.4}, mean windowed {mean:.4}; per-pulse run: {sifted} sifted of 1e7 \
             ({mc_rate:.0} bit/s at {:.0e} Hz) vs closed form {expected:.0} ± {sigma:.0} (z = {z:+.2})",
            st.sifted_rate, st.qber, s.effective_clock_hz
        ),
    )
}

fn acc7_urban() -> Verdict {
    let run = simulate(&urban()).unwrap().summary;
    let st = &run.stats;
    let mean = run.mean_window_qber.unwrap_or(f64::NAN);
    let pass = (50.0..=220.0).contains(&st.sifted_rate)
        && (0.035..=0.075).contains(&mean)
        && (st.duty_cycle_data - 0.8).abs() <= 0.1;
    verdict(
        pass,
        format!(
            "{:.1} bit/s, mean windowed QBER {mean:.4} over {} windows, data duty {:.3} with {} recalibrations",
            st.sifted_rate,
            st.qber_series.len(),
            st.duty_cycle_data,
            st.recalibrations
        ),
    )
}

fn acc8_sifting() -> Verdict {
    use Basis::{Circular as Circ, Linear as Lin};
    let bits = [0u8, 1, 1, 0, 0, 1, 1, 0];
    let alice = [Circ, Lin, Circ, Lin, Circ, Lin, Circ, Lin];
    let bob = [Lin, Lin, Lin, Lin, Circ, Circ, Circ, Circ];

    // A bright, dark-count-free, perfectly aligned link: every matched pulse
    // fires the detector of Alice's bit, mismatched ones fire at random.
    let mut s = lab();
    s.mu_key = 1e4;
    s.mu_cal = 1e4;
    s.misalignment = 0.0;
    s.detector.dark_prob = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut chain = s.build_chain(&mut rng).unwrap();
    chain.tune_ideal().unwrap();
    let tx = Transmitter::new(&chain).unwrap();
    let records: Vec<PulseRecord> = (0..8)
        .map(|i| tx.transmit(i as u64, encode(bits[i], alice[i]), BobChoice::new(bob[i]), &mut rng))
        .collect();

    let key = sift(&records);
    let mut row = vec!["−".to_string(); 8];
    for (&i, &b) in key.indices.iter().zip(&key.bob_bits) {
        row[i as usize] = b.to_string();
    }
    let expected = ["−", "1", "−", "0", "0", "−", "1", "−"];
    verdict(row == expected, format!("sifted row {{{}}}", row.join(",")))
}

fn main() -> ExitCode {
    type Check = fn() -> Verdict;
    let criteria: [(&str, Check, Duration); 8] = [
        ("ACC1 state algebra", acc1_state_algebra, Duration::from_secs(1)),
        ("ACC2 closure", acc2_closure, Duration::from_secs(1)),
        ("ACC3 extinction", acc3_extinction, Duration::from_secs(60)),
        ("ACC4 PMD compensation", acc4_pmd, Duration::from_secs(10)),
        (
            "ACC5 calibration convergence",
            acc5_convergence,
            Duration::from_secs(600),
        ),
        ("ACC6 lab scenario", acc6_lab, Duration::from_secs(300)),
        ("ACC7 urban scenario", acc7_urban, Duration::from_secs(300)),
        ("ACC8 sifting", acc8_sifting, Duration::from_secs(1)),
    ];
    let mut failed = 0;
    for (name, check, budget) in criteria {
        let start = Instant::now();
        let v = check();
        let took = start.elapsed();
        let pass = v.pass && took <= budget;
        failed += !pass as usize;
        println!(
            "{} {name}: {} [{:.2} s, budget {} s]",
            if pass { "PASS" } else { "FAIL" },
            v.detail,
            took.as_secs_f64(),
            budget.as_secs()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
