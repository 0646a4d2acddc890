//! BB84 session engine.
//!
//! Alice's modulator phase is `bit·π + (circular ? π/2 : 0)`; Bob applies 0
//! (linear basis) or π/2 (circular basis). With the link aligned the
//! relative phase is 0 for bit 0 and π for bit 1, which the analyzer routes
//! to SPD1 and SPD2 respectively: Bob's bit is 0 on an SPD1 click.

use std::f64::consts::{FRAC_PI_2, PI};
use std::ops::{Add, AddAssign};

use rand::Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::{
    calibrate_all, supervise, Action, CalibrationError, CalibrationParams, CalibrationReport, SessionState,
};
use crate::chain::{OpticalChain, OutcomeProbs};
use crate::optics::OpticsError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("QBER window of {0} sifted bits is below the minimum of 100")]
    WindowTooSmall(usize),
    #[error("invalid session setting: {0}")]
    Invalid(String),
    #[error(transparent)]
    Optics(#[from] OpticsError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Basis {
    Linear,
    Circular,
}

impl Basis {
    pub fn index(self) -> usize {
        match self {
            Basis::Linear => 0,
            Basis::Circular => 1,
        }
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        if rng.random::<bool>() {
            Basis::Circular
        } else {
            Basis::Linear
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AliceSymbol {
    pub bit: u8,
    pub basis: Basis,
    pub phase: f64,
}

impl AliceSymbol {
    /// Index into the calibration phase list `[0, π/2, π, 3π/2]`.
    pub fn phase_index(&self) -> usize {
        2 * self.bit as usize + self.basis.index()
    }
}

pub fn encode(bit: u8, basis: Basis) -> AliceSymbol {
    let bit = bit & 1;
    let offset = match basis {
        Basis::Linear => 0.0,
        Basis::Circular => FRAC_PI_2,
    };
    AliceSymbol {
        bit,
        basis,
        phase: bit as f64 * PI + offset,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BobChoice {
    pub basis: Basis,
    pub phase: f64,
}

impl BobChoice {
    pub fn new(basis: Basis) -> Self {
        let phase = match basis {
            Basis::Linear => 0.0,
            Basis::Circular => FRAC_PI_2,
        };
        Self { basis, phase }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PulseRecord {
    pub index: u64,
    pub alice: AliceSymbol,
    pub bob: BobChoice,
    pub click1: bool,
    pub click2: bool,
}

/// Click probabilities for the eight (Alice phase, Bob phase) combinations
/// of a fixed chain state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transmitter {
    clicks: [[[f64; 2]; 2]; 4],
    outcomes: [[OutcomeProbs; 2]; 4],
}

impl Transmitter {
    pub fn new(chain: &OpticalChain) -> Result<Self, OpticsError> {
        let prop = chain.propagator()?;
        let mut clicks = [[[0.0; 2]; 2]; 4];
        let mut outcomes = [[OutcomeProbs {
            none: 1.0,
            only1: 0.0,
            only2: 0.0,
            both: 0.0,
        }; 2]; 4];
        for (ai, &a) in crate::chain::ALICE_PHASES.iter().enumerate() {
            for (bi, &b) in crate::chain::BOB_PHASES.iter().enumerate() {
                let state = prop.output_state(a, b);
                clicks[ai][bi] = chain.click_probabilities(&state);
                outcomes[ai][bi] = chain.outcome_probs(&state);
            }
        }
        Ok(Self { clicks, outcomes })
    }

    pub fn click_probabilities(&self, alice: &AliceSymbol, bob: &BobChoice) -> [f64; 2] {
        self.clicks[alice.phase_index()][bob.basis.index()]
    }

    pub fn transmit<R: Rng + ?Sized>(
        &self,
        index: u64,
        alice: AliceSymbol,
        bob: BobChoice,
        rng: &mut R,
    ) -> PulseRecord {
        let [c1, c2] = self.click_probabilities(&alice, &bob);
        PulseRecord {
            index,
            alice,
            bob,
            click1: rng.random::<f64>() < c1,
            click2: rng.random::<f64>() < c2,
        }
    }

    /// Draws one pulse with uniformly random bit and bases.
    pub fn transmit_random<R: Rng + ?Sized>(&self, index: u64, rng: &mut R) -> PulseRecord {
        let alice = encode(rng.random::<bool>() as u8, Basis::random(rng));
        let bob = BobChoice::new(Basis::random(rng));
        self.transmit(index, alice, bob, rng)
    }

    /// Exact per-pulse sifting probability and error rate for uniformly
    /// random bits and bases.
    pub fn expected(&self) -> Expectation {
        let (mut sift, mut err) = (0.0, 0.0);
        for ai in 0..4 {
            let bi = ai % 2;
            let o = &self.outcomes[ai][bi];
            let wrong = if ai / 2 == 0 { o.only2 } else { o.only1 };
            sift += (o.only1 + o.only2) / 8.0;
            err += wrong / 8.0;
        }
        Expectation {
            sifted_per_pulse: sift,
            qber: if sift > 0.0 { err / sift } else { 0.0 },
        }
    }

    /// Tallies `pulses` uniformly random pulses. Cell occupancies and outcome
    /// counts are drawn from their exact multinomial distributions.
    pub fn sample_block<R: Rng + ?Sized>(&self, pulses: u64, rng: &mut R) -> Tally {
        let mut tally = Tally {
            sent: pulses,
            ..Default::default()
        };
        let mut remaining = pulses;
        let mut cells_left = 8u64;
        for ai in 0..4 {
            for bi in 0..2 {
                let n = if cells_left == 1 {
                    remaining
                } else {
                    binomial(remaining, 1.0 / cells_left as f64, rng)
                };
                remaining -= n;
                cells_left -= 1;
                let o = &self.outcomes[ai][bi];
                let only1 = binomial(n, o.only1, rng);
                let only2 = binomial(n - only1, conditional(o.only2, o.only1), rng);
                let both = binomial(n - only1 - only2, conditional(o.both, o.only1 + o.only2), rng);
                tally.double_clicks += both;
                if ai % 2 == bi {
                    let bit = ai / 2;
                    let (right, wrong) = if bit == 0 { (only1, only2) } else { (only2, only1) };
                    tally.sifted += right + wrong;
                    tally.errors += wrong;
                }
            }
        }
        tally
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Expectation {
    pub sifted_per_pulse: f64,
    pub qber: f64,
}

fn conditional(p: f64, used: f64) -> f64 {
    let rest = 1.0 - used;
    if rest <= 0.0 {
        0.0
    } else {
        (p / rest).clamp(0.0, 1.0)
    }
}

fn binomial<R: Rng + ?Sized>(n: u64, p: f64, rng: &mut R) -> u64 {
    if n == 0 || p <= 0.0 {
        0
    } else if p >= 1.0 {
        n
    } else {
        Binomial::new(n, p).expect("p in (0, 1)").sample(rng)
    }
}

/// Propagates one pulse through `chain` and samples both detectors.
pub fn transmit_one<R: Rng + ?Sized>(
    index: u64,
    alice: AliceSymbol,
    bob: BobChoice,
    chain: &OpticalChain,
    rng: &mut R,
) -> Result<PulseRecord, OpticsError> {
    Ok(Transmitter::new(chain)?.transmit(index, alice, bob, rng))
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SiftedKey {
    pub indices: Vec<u64>,
    pub alice_bits: Vec<u8>,
    pub bob_bits: Vec<u8>,
}

impl SiftedKey {
    pub fn len(&self) -> usize {
        self.alice_bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alice_bits.is_empty()
    }

    pub fn errors(&self) -> usize {
        self.alice_bits
            .iter()
            .zip(&self.bob_bits)
            .filter(|(a, b)| a != b)
            .count()
    }
}

/// Bob's bit for a single click, `None` for no click or a double click.
pub fn bob_bit(record: &PulseRecord) -> Option<u8> {
    match (record.click1, record.click2) {
        (true, false) => Some(0),
        (false, true) => Some(1),
        _ => None,
    }
}

/// Keeps pulses with matching bases and exactly one click.
pub fn sift(records: &[PulseRecord]) -> SiftedKey {
    let mut key = SiftedKey::default();
    for r in records {
        if r.alice.basis != r.bob.basis {
            continue;
        }
        if let Some(b) = bob_bit(r) {
            key.indices.push(r.index);
            key.alice_bits.push(r.alice.bit);
            key.bob_bits.push(b);
        }
    }
    key
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QberPoint {
    pub t_seconds: f64,
    pub qber: f64,
    pub window_sifted_bits: u64,
}

pub const MIN_WINDOW_BITS: usize = 100;

/// QBER over consecutive windows of `window` sifted bits, time-stamped at
/// the last pulse of each window. A trailing partial window is dropped.
pub fn qber_window(records: &[PulseRecord], window: usize, clock_hz: f64) -> Result<Vec<QberPoint>, ProtocolError> {
    if window < MIN_WINDOW_BITS {
        return Err(ProtocolError::WindowTooSmall(window));
    }
    let key = sift(records);
    let points = key
        .alice_bits
        .chunks_exact(window)
        .zip(key.bob_bits.chunks_exact(window))
        .zip(key.indices.chunks_exact(window))
        .map(|((a, b), idx)| {
            let errors = a.iter().zip(b).filter(|(x, y)| x != y).count();
            QberPoint {
                t_seconds: (*idx.last().expect("non-empty chunk") + 1) as f64 / clock_hz,
                qber: errors as f64 / window as f64,
                window_sifted_bits: window as u64,
            }
        })
        .collect();
    Ok(points)
}

/// Additive pulse statistics; merging is associative and commutative so
/// pulse batches can be tallied independently.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Tally {
    pub sent: u64,
    pub sifted: u64,
    pub errors: u64,
    pub double_clicks: u64,
}

impl Tally {
    pub fn qber(&self) -> f64 {
        if self.sifted == 0 {
            0.0
        } else {
            self.errors as f64 / self.sifted as f64
        }
    }

    pub fn record(&mut self, r: &PulseRecord) {
        self.sent += 1;
        if r.click1 && r.click2 {
            self.double_clicks += 1;
        }
        if r.alice.basis == r.bob.basis {
            if let Some(b) = bob_bit(r) {
                self.sifted += 1;
                if b != r.alice.bit {
                    self.errors += 1;
                }
            }
        }
    }
}

impl Add for Tally {
    type Output = Tally;

    fn add(self, o: Tally) -> Tally {
        Tally {
            sent: self.sent + o.sent,
            sifted: self.sifted + o.sifted,
            errors: self.errors + o.errors,
            double_clicks: self.double_clicks + o.double_clicks,
        }
    }
}

impl AddAssign for Tally {
    fn add_assign(&mut self, o: Tally) {
        *self = *self + o;
    }
}

/// Timing and supervision settings of a key-sharing session.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub duration_s: f64,
    /// Pulse rate actually processed for key generation.
    pub effective_clock_hz: f64,
    /// Key-sharing time simulated per drift step.
    pub block_s: f64,
    pub window_bits: u64,
    pub qber_threshold: f64,
}

impl SessionConfig {
    pub fn validate(&self) -> Result<(), ProtocolError> {
        if !(self.duration_s >= 0.0) {
            return Err(ProtocolError::Invalid("duration_s must be ≥ 0".into()));
        }
        if !(self.effective_clock_hz > 0.0) || !(self.block_s > 0.0) {
            return Err(ProtocolError::Invalid(
                "effective_clock_hz and block_s must be > 0".into(),
            ));
        }
        if (self.window_bits as usize) < MIN_WINDOW_BITS {
            return Err(ProtocolError::WindowTooSmall(self.window_bits as usize));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionStats {
    pub sent: u64,
    pub sifted: u64,
    pub errors: u64,
    pub qber: f64,
    /// Sifted bits per second of total wall time, calibration included.
    pub sifted_rate: f64,
    pub duty_cycle_data: f64,
    pub data_time_s: f64,
    pub calibration_time_s: f64,
    pub recalibrations: usize,
    pub qber_series: Vec<QberPoint>,
}

impl SessionStats {
    pub fn mean_window_qber(&self) -> Option<f64> {
        if self.qber_series.is_empty() {
            return None;
        }
        Some(self.qber_series.iter().map(|p| p.qber).sum::<f64>() / self.qber_series.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionOutcome {
    pub stats: SessionStats,
    pub calibrations: Vec<CalibrationReport>,
}

/// Runs key sharing on `chain` for `config.duration_s` of wall time,
/// drifting the channel and recalibrating whenever a completed QBER window
/// exceeds the threshold.
pub fn run_session<R: Rng + ?Sized>(
    config: &SessionConfig,
    calibration: &CalibrationParams,
    chain: &mut OpticalChain,
    rng: &mut R,
) -> Result<SessionOutcome, ProtocolError> {
    config.validate()?;
    let mut state = SessionState::default();
    let mut total = Tally::default();
    let mut window = Tally::default();
    let mut series = Vec::new();
    let mut calibrations = Vec::new();
    let mut t = 0.0;
    let mut pending = Action::Continue;

    while t < config.duration_s {
        if pending == Action::Recalibrate {
            let report = calibrate_all(chain, calibration, config.effective_clock_hz, rng)?;
            let spent = report.elapsed_s.min(config.duration_s - t);
            state.calibration_time_s += spent;
            state.recalibrations += 1;
            t += report.elapsed_s;
            calibrations.push(report);
            window = Tally::default();
            state.window_qber = None;
            pending = Action::Continue;
            continue;
        }
        let dt = config.block_s.min(config.duration_s - t);
        let pulses = (dt * config.effective_clock_hz).round() as u64;
        let block = Transmitter::new(chain)?.sample_block(pulses, rng);
        total += block;
        window += block;
        state.data_time_s += dt;
        t += dt;
        chain.advance(dt, rng);
        if window.sifted >= config.window_bits {
            series.push(QberPoint {
                t_seconds: t,
                qber: window.qber(),
                window_sifted_bits: window.sifted,
            });
            state.window_qber = Some(window.qber());
            pending = supervise(&state, config.qber_threshold);
            window = Tally::default();
        }
    }

    let wall = state.data_time_s + state.calibration_time_s;
    let stats = SessionStats {
        sent: total.sent,
        sifted: total.sifted,
        errors: total.errors,
        qber: total.qber(),
        sifted_rate: if wall > 0.0 { total.sifted as f64 / wall } else { 0.0 },
        duty_cycle_data: state.duty_cycle_data(),
        data_time_s: state.data_time_s,
        calibration_time_s: state.calibration_time_s,
        recalibrations: state.recalibrations,
        qber_series: series,
    };
    Ok(SessionOutcome { stats, calibrations })
}
