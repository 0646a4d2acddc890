//! Autonomous controller tuning from detector click statistics.
//!
//! Alice cycles her four modulator phases, Bob his two, and the eight
//! resulting click histograms drive one objective per controller:
//!
//! * PC2 equalizes the four pairs of cells that share the same relative
//!   phase `Δ_A − Δ_B`. They coincide only when section 2 exchanges the
//!   crystal axes.
//! * PC1 maximizes the bit-0/bit-1 contrast in matched bases (the objective
//!   is the negated contrast).
//! * PC3 minimizes the measured error rate.
//!
//! Each controller is tuned channel by channel with a central-difference
//! gradient step on one voltage at a time.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{ControllerSlot, OpticalChain, Topology, ALICE_PHASES, BOB_PHASES};
use crate::optics::{AttenuatorMode, OpticsError, PolarizationController};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibrationError {
    #[error("no detector clicks in any histogram cell")]
    NoClicks,
    #[error("no sifted events in the calibration burst")]
    NoSiftedEvents,
    #[error("attenuator must be in calibration mode")]
    WrongMode,
    #[error("channel index {0} out of range (expected 0..3)")]
    BadChannel(usize),
    #[error("{0:?} is not a tunable controller in this layout")]
    NoController(ControllerSlot),
    #[error(transparent)]
    Optics(#[from] OpticsError),
}

/// Descent and measurement knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationParams {
    pub pulses_per_cell: u64,
    /// Histograms averaged per objective evaluation.
    pub averaging: usize,
    /// Finite-difference probe half-width δ, volts.
    pub probe_step_v: f64,
    /// Step gain γ, volts² per objective unit.
    pub learning_rate: f64,
    /// Largest single voltage step, volts.
    pub max_step_v: f64,
    /// Stop a channel when the objective changes by less than this.
    pub tolerance: f64,
    pub max_iters: usize,
    /// Passes over the three channels per controller and outer loop.
    pub sweeps_per_controller: usize,
    pub max_outer_loops: usize,
    /// Calibration succeeds once the measured error rate is at or below this.
    pub target_qber: f64,
    /// When the best error rate reached so far is still above this after an
    /// outer loop, the descent restarts from fresh controller voltages.
    pub restart_qber: f64,
    /// Piezo settling and readout overhead per objective evaluation, seconds.
    pub settle_s: f64,
}

impl Default for CalibrationParams {
    fn default() -> Self {
        Self {
            pulses_per_cell: 20_000,
            averaging: 1,
            probe_step_v: 3.0,
            learning_rate: 300.0,
            max_step_v: 12.0,
            tolerance: 1e-4,
            max_iters: 12,
            sweeps_per_controller: 2,
            max_outer_loops: 12,
            target_qber: 0.01,
            restart_qber: 0.035,
            settle_s: 0.05,
        }
    }
}

impl CalibrationParams {
    pub fn validate(&self) -> Result<(), String> {
        let checks: [(bool, &str); 8] = [
            (self.pulses_per_cell > 0, "pulses_per_cell must be > 0"),
            (self.averaging >= 1, "averaging must be ≥ 1"),
            (self.probe_step_v > 0.0, "probe_step_v must be > 0"),
            (self.learning_rate >= 0.0, "learning_rate must be ≥ 0"),
            (self.max_step_v > 0.0, "max_step_v must be > 0"),
            (
                self.max_iters >= 1 && self.max_outer_loops >= 1,
                "iteration budgets must be ≥ 1",
            ),
            (
                (0.0..=0.5).contains(&self.target_qber) && self.restart_qber >= self.target_qber,
                "target_qber must lie in [0, 0.5] and not exceed restart_qber",
            ),
            (
                self.settle_s >= 0.0 && self.tolerance >= 0.0,
                "settle_s and tolerance must be ≥ 0",
            ),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(msg.to_string()),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CellCounts {
    pub n_spd1: u64,
    pub n_spd2: u64,
}

impl CellCounts {
    /// Share of clicks on SPD1; 1/2 for an empty cell.
    pub fn fraction_spd1(&self) -> f64 {
        let n = self.n_spd1 + self.n_spd2;
        if n == 0 {
            0.5
        } else {
            self.n_spd1 as f64 / n as f64
        }
    }
}

/// Click counts per (Alice phase index, Bob phase index) cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Histogram8 {
    pub counts: [[CellCounts; 2]; 4],
    pub pulses_per_cell: u64,
}

impl Histogram8 {
    pub fn cell(&self, alice: usize, bob: usize) -> CellCounts {
        self.counts[alice][bob]
    }

    pub fn total_clicks(&self) -> u64 {
        self.counts.iter().flatten().map(|c| c.n_spd1 + c.n_spd2).sum()
    }
}

/// Cell pairs with equal relative phase `Δ_A − Δ_B`, as (alice, bob) indices.
pub const INDISTINGUISHABLE_PAIRS: [((usize, usize), (usize, usize)); 4] =
    [((0, 0), (1, 1)), ((1, 0), (2, 1)), ((2, 0), (3, 1)), ((3, 0), (0, 1))];

/// Matched-basis cells as (bit-0 cell, bit-1 cell) per basis.
pub const MATCHED_CELLS: [((usize, usize), (usize, usize)); 2] = [((0, 0), (2, 0)), ((1, 1), (3, 1))];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveValue {
    pub value: f64,
    pub samples_averaged: usize,
}

impl ObjectiveValue {
    pub fn single(value: f64) -> Self {
        Self {
            value,
            samples_averaged: 1,
        }
    }

    pub fn mean(values: &[ObjectiveValue]) -> Self {
        let n: usize = values.iter().map(|v| v.samples_averaged).sum();
        let sum: f64 = values.iter().map(|v| v.value * v.samples_averaged as f64).sum();
        Self {
            value: sum / n.max(1) as f64,
            samples_averaged: n.max(1),
        }
    }
}

fn sample_binomial<R: Rng + ?Sized>(n: u64, p: f64, rng: &mut R) -> u64 {
    if n == 0 || p <= 0.0 {
        return 0;
    }
    if p >= 1.0 {
        return n;
    }
    Binomial::new(n, p).expect("p in (0, 1)").sample(rng)
}

/// Cycles the eight phase pairs for `pulses_per_cell` pulses each.
pub fn collect_histogram<R: Rng + ?Sized>(
    chain: &OpticalChain,
    pulses_per_cell: u64,
    rng: &mut R,
) -> Result<Histogram8, CalibrationError> {
    if chain.attenuator.mode != AttenuatorMode::Calibration {
        return Err(CalibrationError::WrongMode);
    }
    let prop = chain.propagator()?;
    let mut counts = [[CellCounts::default(); 2]; 4];
    for (ai, &a) in ALICE_PHASES.iter().enumerate() {
        for (bi, &b) in BOB_PHASES.iter().enumerate() {
            let [c1, c2] = chain.click_probabilities(&prop.output_state(a, b));
            counts[ai][bi] = CellCounts {
                n_spd1: sample_binomial(pulses_per_cell, c1, rng),
                n_spd2: sample_binomial(pulses_per_cell, c2, rng),
            };
        }
    }
    let h = Histogram8 {
        counts,
        pulses_per_cell,
    };
    if h.total_clicks() == 0 {
        return Err(CalibrationError::NoClicks);
    }
    Ok(h)
}

/// Mean squared difference of SPD click shares over the four
/// indistinguishable pairs and both detectors.
pub fn pc2_objective(h: &Histogram8) -> ObjectiveValue {
    let mut acc = 0.0;
    for ((a1, b1), (a2, b2)) in INDISTINGUISHABLE_PAIRS {
        let f = h.cell(a1, b1).fraction_spd1();
        let g = h.cell(a2, b2).fraction_spd1();
        // SPD2 shares are 1 − f and 1 − g: identical squared difference
        acc += 2.0 * (f - g).powi(2);
    }
    ObjectiveValue::single(acc / 8.0)
}

/// Negated bit contrast summed over both matched bases. With bit 0 routed
/// to SPD1 a perfect chain scores −2; relabelling the detectors flips the
/// sign.
pub fn pc1_objective(h: &Histogram8) -> ObjectiveValue {
    let contrast: f64 = MATCHED_CELLS
        .iter()
        .map(|&((a0, b0), (a1, b1))| h.cell(a0, b0).fraction_spd1() - h.cell(a1, b1).fraction_spd1())
        .sum();
    ObjectiveValue::single(-contrast)
}

/// Singles in the matched-basis cells of a calibration burst.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BurstCounts {
    pub correct: u64,
    pub wrong: u64,
}

impl BurstCounts {
    pub fn qber(&self) -> Option<f64> {
        let n = self.correct + self.wrong;
        (n > 0).then(|| self.wrong as f64 / n as f64)
    }
}

/// Sends `pulses` pulses through each matched-basis cell and counts single
/// clicks on the intended and the wrong detector.
pub fn sample_burst<R: Rng + ?Sized>(
    chain: &OpticalChain,
    pulses: u64,
    rng: &mut R,
) -> Result<BurstCounts, CalibrationError> {
    let prop = chain.propagator()?;
    let mut out = BurstCounts::default();
    for &((a0, b0), (a1, b1)) in &MATCHED_CELLS {
        for (cell, bit) in [((a0, b0), 0), ((a1, b1), 1)] {
            let state = prop.output_state(ALICE_PHASES[cell.0], BOB_PHASES[cell.1]);
            let o = chain.outcome_probs(&state);
            let only1 = sample_binomial(pulses, o.only1, rng);
            let rest = 1.0 - o.only1;
            let only2 = if rest > 0.0 {
                sample_binomial(pulses - only1, (o.only2 / rest).min(1.0), rng)
            } else {
                0
            };
            if bit == 0 {
                out.correct += only1;
                out.wrong += only2;
            } else {
                out.correct += only2;
                out.wrong += only1;
            }
        }
    }
    Ok(out)
}

/// Error rate over a calibration burst.
pub fn pc3_objective<R: Rng + ?Sized>(
    chain: &OpticalChain,
    pulses: u64,
    rng: &mut R,
) -> Result<ObjectiveValue, CalibrationError> {
    let burst = sample_burst(chain, pulses, rng)?;
    burst
        .qber()
        .map(ObjectiveValue::single)
        .ok_or(CalibrationError::NoSiftedEvents)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DescentStep {
    pub voltage: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DescentTrace {
    pub channel: usize,
    pub iterations: usize,
    /// Objective at each accepted centre point, starting point first.
    pub steps: Vec<DescentStep>,
    /// Running minimum of the centre-point values.
    pub best_seen: Vec<f64>,
}

/// Maps a proposed voltage back into range, using the 2π-equivalent voltage
/// when it exists and clipping otherwise.
fn fold_voltage(pc: &PolarizationController, channel: usize, v: f64) -> f64 {
    let stage = &pc.stages[channel];
    let wrap = stage.wrap_voltage();
    if v > stage.max_voltage {
        if v - wrap >= 0.0 {
            v - wrap
        } else {
            stage.max_voltage
        }
    } else if v < 0.0 {
        if v + wrap <= stage.max_voltage {
            v + wrap
        } else {
            0.0
        }
    } else {
        v
    }
}

/// Central-difference descent on one voltage of `controller`:
/// `v ← v − γ·(f(v+δ) − f(v−δ))/(2δ)`, probes clipped to range, until the
/// objective moves by less than `tolerance` or `max_iters` is reached. γ
/// starts at `learning_rate` and adapts to the objective's curvature.
/// Returns the controller at the best centre point seen.
pub fn descend_channel<F>(
    objective: &mut F,
    controller: &PolarizationController,
    channel_index: usize,
    params: &CalibrationParams,
) -> Result<(PolarizationController, DescentTrace), CalibrationError>
where
    F: FnMut(&PolarizationController) -> Result<ObjectiveValue, CalibrationError>,
{
    if channel_index > 2 {
        return Err(CalibrationError::BadChannel(channel_index));
    }
    let max_v = controller.stages[channel_index].max_voltage;
    let at = |v: f64| {
        let mut pc = *controller;
        pc.voltages[channel_index] = v;
        pc
    };
    let mut trace = DescentTrace {
        channel: channel_index,
        ..Default::default()
    };
    let mut v = controller.voltages[channel_index].clamp(0.0, max_v);
    let mut f_v = objective(&at(v))?.value;
    let mut best = (f_v, v);
    trace.steps.push(DescentStep { voltage: v, value: f_v });
    trace.best_seen.push(f_v);

    let mut gamma = params.learning_rate;
    for _ in 0..params.max_iters {
        trace.iterations += 1;
        let vp = (v + params.probe_step_v).min(max_v);
        let vm = (v - params.probe_step_v).max(0.0);
        let fp = objective(&at(vp))?.value;
        let fm = objective(&at(vm))?.value;
        let grad = (fp - fm) / (vp - vm);
        let step = (-gamma * grad).clamp(-params.max_step_v, params.max_step_v);
        if step == 0.0 {
            break;
        }
        let v_new = fold_voltage(controller, channel_index, v + step);
        let f_new = objective(&at(v_new))?.value;
        if f_new < best.0 {
            best = (f_new, v_new);
        }
        trace.steps.push(DescentStep {
            voltage: v_new,
            value: f_new,
        });
        trace.best_seen.push(best.0);
        let settled = (f_new - f_v).abs() < params.tolerance;
        // the objective scale differs between controllers and with the
        // state of the others, so the rate adapts: grow after an improving
        // step, halve and stay put after a worsening one
        if f_new <= f_v {
            v = v_new;
            f_v = f_new;
            gamma *= 1.5;
        } else {
            gamma *= 0.5;
        }
        if settled {
            break;
        }
    }
    Ok((at(best.1), trace))
}

/// Measurement state shared by the objectives while a calibration runs.
/// Every evaluation consumes pulses and wall time, during which the channel
/// keeps drifting.
pub struct CalibrationRun<'a, R: Rng + ?Sized> {
    pub chain: &'a mut OpticalChain,
    pub params: CalibrationParams,
    pub clock_hz: f64,
    pub rng: &'a mut R,
    pub pulses_consumed: u64,
    pub evaluations: u64,
    pub elapsed_s: f64,
}

impl<'a, R: Rng + ?Sized> CalibrationRun<'a, R> {
    pub fn new(chain: &'a mut OpticalChain, params: CalibrationParams, clock_hz: f64, rng: &'a mut R) -> Self {
        Self {
            chain,
            params,
            clock_hz,
            rng,
            pulses_consumed: 0,
            evaluations: 0,
            elapsed_s: 0.0,
        }
    }

    fn spend(&mut self, pulses: u64) {
        self.pulses_consumed += pulses;
        self.evaluations += 1;
        let dt = self.params.settle_s + pulses as f64 / self.clock_hz;
        self.elapsed_s += dt;
        self.chain.advance(dt, self.rng);
    }

    /// Objective of `slot` with `candidate` installed in that slot.
    pub fn evaluate(
        &mut self,
        slot: ControllerSlot,
        kind: ObjectiveKind,
        candidate: &PolarizationController,
    ) -> Result<ObjectiveValue, CalibrationError> {
        let saved = *self
            .chain
            .controller(slot)
            .ok_or(CalibrationError::NoController(slot))?;
        *self.chain.controller_mut(slot).expect("checked above") = *candidate;
        let result = self.measure(kind);
        *self.chain.controller_mut(slot).expect("checked above") = saved;
        result
    }

    pub fn measure(&mut self, kind: ObjectiveKind) -> Result<ObjectiveValue, CalibrationError> {
        let ppc = self.params.pulses_per_cell;
        let mut values = Vec::with_capacity(self.params.averaging);
        for _ in 0..self.params.averaging {
            let value = match kind {
                ObjectiveKind::Indistinguishability => pc2_objective(&collect_histogram(self.chain, ppc, self.rng)?),
                ObjectiveKind::Contrast => pc1_objective(&collect_histogram(self.chain, ppc, self.rng)?),
                ObjectiveKind::ErrorRate => pc3_objective(self.chain, 2 * ppc, self.rng)?,
            };
            self.spend(8 * ppc);
            values.push(value);
        }
        Ok(ObjectiveValue::mean(&values))
    }

    pub fn qber(&mut self) -> Result<f64, CalibrationError> {
        Ok(self.measure(ObjectiveKind::ErrorRate)?.value)
    }

    /// Tunes one controller against `kind`, channel by channel.
    pub fn tune(&mut self, slot: ControllerSlot, kind: ObjectiveKind) -> Result<(usize, f64, f64), CalibrationError> {
        let mut pc = *self
            .chain
            .controller(slot)
            .ok_or(CalibrationError::NoController(slot))?;
        let params = self.params;
        let mut iterations = 0;
        let mut first = None;
        let mut last = f64::NAN;
        for _ in 0..params.sweeps_per_controller {
            for channel in 0..3 {
                let mut f = |c: &PolarizationController| self.evaluate(slot, kind, c);
                let (next, trace) = descend_channel(&mut f, &pc, channel, &params)?;
                iterations += trace.iterations;
                first.get_or_insert(trace.steps[0].value);
                last = *trace.best_seen.last().expect("non-empty trace");
                pc = next;
                *self.chain.controller_mut(slot).expect("checked above") = pc;
            }
        }
        Ok((iterations, first.unwrap_or(f64::NAN), last))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    Indistinguishability,
    Contrast,
    ErrorRate,
}

/// Objective each controller minimizes in a given layout.
pub fn objective_for(topology: Topology, slot: ControllerSlot) -> ObjectiveKind {
    match (topology, slot) {
        (Topology::ThreePc, ControllerSlot::Pc2) => ObjectiveKind::Indistinguishability,
        (Topology::ThreePc, ControllerSlot::Pc1) => ObjectiveKind::Contrast,
        _ => ObjectiveKind::ErrorRate,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerReport {
    pub iterations: usize,
    pub initial_objective: f64,
    pub final_objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub controllers: BTreeMap<String, ControllerReport>,
    pub outer_loops: usize,
    pub initial_qber: f64,
    pub final_qber: f64,
    pub pulses_consumed: u64,
    pub evaluations: u64,
    pub elapsed_s: f64,
    /// Fresh starts after an outer loop ended far from the target.
    pub restarts: usize,
    pub converged: bool,
}

/// Full tuning pass: raises the attenuator to calibration intensity, tunes
/// the controllers in order (PC2, then PC1, then PC3) until the measured
/// error rate reaches `target_qber`, and always restores key-sharing mode.
pub fn calibrate_all<R: Rng + ?Sized>(
    chain: &mut OpticalChain,
    params: &CalibrationParams,
    clock_hz: f64,
    rng: &mut R,
) -> Result<CalibrationReport, CalibrationError> {
    chain.attenuator.mode = AttenuatorMode::Calibration;
    let result = calibrate_inner(chain, params, clock_hz, rng);
    chain.attenuator.mode = AttenuatorMode::KeySharing;
    result
}

fn calibrate_inner<R: Rng + ?Sized>(
    chain: &mut OpticalChain,
    params: &CalibrationParams,
    clock_hz: f64,
    rng: &mut R,
) -> Result<CalibrationReport, CalibrationError> {
    let topology = chain.topology;
    let slots = chain.tunable_slots();
    let mut run = CalibrationRun::new(chain, *params, clock_hz, rng);
    let initial_qber = run.qber()?;
    let mut final_qber = initial_qber;
    let mut controllers: BTreeMap<String, ControllerReport> = BTreeMap::new();
    let mut outer_loops = 1;
    let mut converged = initial_qber <= params.target_qber;

    // The indistinguishability objective samples Alice's phase at only four
    // points, so with unbalanced PC1/PC3 it has zeros away from the swap and
    // the coupled descent can settle where every objective is flat. Loops
    // therefore never keep a worse state, and a start that stays far from
    // the target or stops improving is abandoned for fresh voltages.
    let mut best = (initial_qber, snapshot(run.chain, slots));
    let mut restarts = 0;
    if !converged {
        for outer in 1..=params.max_outer_loops {
            outer_loops = outer;
            for &slot in slots {
                let (iters, first, last) = run.tune(slot, objective_for(topology, slot))?;
                let entry = controllers.entry(format!("{slot:?}")).or_insert(ControllerReport {
                    iterations: 0,
                    initial_objective: first,
                    final_objective: last,
                });
                entry.iterations += iters;
                entry.final_objective = last;
            }
            final_qber = run.qber()?;
            if final_qber <= params.target_qber {
                converged = true;
                break;
            }
            let stalled = final_qber > STALL_RATIO * best.0;
            if final_qber < best.0 {
                best = (final_qber, snapshot(run.chain, slots));
            } else {
                restore(run.chain, &best.1);
                final_qber = best.0;
            }
            if (stalled || best.0 > params.restart_qber) && outer < params.max_outer_loops {
                for &slot in slots {
                    let pc = run.chain.controller_mut(slot).expect("tunable slot");
                    *pc = pc.random_voltages(run.rng);
                }
                restarts += 1;
            }
        }
    }
    Ok(CalibrationReport {
        controllers,
        outer_loops,
        initial_qber,
        final_qber,
        pulses_consumed: run.pulses_consumed,
        evaluations: run.evaluations,
        elapsed_s: run.elapsed_s,
        restarts,
        converged,
    })
}

/// An outer loop that does not bring the best error rate below this fraction
/// of itself is treated as stuck in a local minimum.
const STALL_RATIO: f64 = 0.8;

fn snapshot(chain: &OpticalChain, slots: &[ControllerSlot]) -> Vec<(ControllerSlot, PolarizationController)> {
    slots
        .iter()
        .map(|&s| (s, *chain.controller(s).expect("tunable slot")))
        .collect()
}

fn restore(chain: &mut OpticalChain, saved: &[(ControllerSlot, PolarizationController)]) {
    for &(slot, pc) in saved {
        *chain.controller_mut(slot).expect("tunable slot") = pc;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Continue,
    Recalibrate,
}

/// Time bookkeeping of a running session.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SessionState {
    pub data_time_s: f64,
    pub calibration_time_s: f64,
    pub window_qber: Option<f64>,
    pub recalibrations: usize,
}

impl SessionState {
    /// Fraction of wall time spent in key-sharing mode.
    pub fn duty_cycle_data(&self) -> f64 {
        let total = self.data_time_s + self.calibration_time_s;
        if total > 0.0 {
            self.data_time_s / total
        } else {
            1.0
        }
    }
}

/// Requests recalibration once the latest windowed error rate exceeds the
/// threshold.
pub fn supervise(state: &SessionState, qber_threshold: f64) -> Action {
    match state.window_qber {
        Some(q) if q > qber_threshold => Action::Recalibrate,
        _ => Action::Continue,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optics::{Attenuator, Detector, DetectorLabel, FiberChannel};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn chain(topology: Topology, seed: u64) -> OpticalChain {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        OpticalChain::random(
            topology,
            Attenuator::new(0.1, 5.0).unwrap(),
            FiberChannel::new(10.0, 0.0, 0.0).unwrap(),
            2.0,
            [
                Detector::new(0.06, 1e-6, DetectorLabel::Spd1).unwrap(),
                Detector::new(0.06, 1e-6, DetectorLabel::Spd2).unwrap(),
            ],
            0.0,
            &mut rng,
        )
    }

    fn in_cal_mode(mut c: OpticalChain) -> OpticalChain {
        c.attenuator.mode = AttenuatorMode::Calibration;
        c
    }

    fn histogram_from(shares: [[f64; 2]; 4]) -> Histogram8 {
        let mut counts = [[CellCounts::default(); 2]; 4];
        for a in 0..4 {
            for b in 0..2 {
                let n1 = (shares[a][b] * 1000.0).round() as u64;
                counts[a][b] = CellCounts {
                    n_spd1: n1,
                    n_spd2: 1000 - n1,
                };
            }
        }
        Histogram8 {
            counts,
            pulses_per_cell: 1000,
        }
    }

    #[test]
    fn tuned_chain_histogram_has_high_extinction() {
        let mut c = in_cal_mode(chain(Topology::ThreePc, 1));
        c.tune_ideal().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = collect_histogram(&c, 50_000, &mut rng).unwrap();
        assert!(h.cell(0, 0).fraction_spd1() >= 0.98);
        assert!(h.cell(2, 0).fraction_spd1() <= 0.02);
    }

    #[test]
    fn histogram_requires_calibration_mode_and_light() {
        let c = chain(Topology::ThreePc, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert_eq!(collect_histogram(&c, 100, &mut rng), Err(CalibrationError::WrongMode));
        let mut dark = in_cal_mode(c);
        dark.detectors[0].dark_prob = 0.0;
        dark.detectors[1].dark_prob = 0.0;
        // a fully blocking attenuator
        dark.attenuator.mu_cal = 0.0;
        assert_eq!(
            collect_histogram(&dark, 1000, &mut rng),
            Err(CalibrationError::NoClicks)
        );
    }

    #[test]
    fn histogram_is_reproducible() {
        let c = in_cal_mode(chain(Topology::ThreePc, 4));
        let h1 = collect_histogram(&c, 5000, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let h2 = collect_histogram(&c, 5000, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        assert_eq!(h1, h2);
    }

    #[test]
    fn pc2_objective_zero_for_identical_pairs() {
        let h = histogram_from([[0.3, 0.7], [0.2, 0.3], [0.9, 0.2], [0.7, 0.9]]);
        assert_eq!(pc2_objective(&h).value, 0.0);
        let h = histogram_from([[1.0, 0.0], [0.5, 0.5], [0.0, 0.5], [0.5, 0.5]]);
        // pair differences 0.5, 0, 0.5, 0.5 → mean of squares
        assert!((pc2_objective(&h).value - 0.75 / 4.0).abs() < 1e-12);
    }

    #[test]
    fn pc1_objective_examples() {
        let perfect = histogram_from([[1.0, 0.5], [0.5, 1.0], [0.0, 0.5], [0.5, 0.0]]);
        assert_eq!(pc1_objective(&perfect).value, -2.0);
        let flat = histogram_from([[0.5; 2]; 4]);
        assert_eq!(pc1_objective(&flat).value, 0.0);
        // detector relabelling flips the sign
        let mut swapped = perfect;
        for row in &mut swapped.counts {
            for c in row {
                std::mem::swap(&mut c.n_spd1, &mut c.n_spd2);
            }
        }
        assert_eq!(pc1_objective(&swapped).value, 2.0);
    }

    #[test]
    fn pc1_objective_vanishes_without_modulation_contrast() {
        // all light on one crystal axis at Alice's modulator: Δφ only adds a
        // global phase, so every cell has identical statistics
        let mut c = in_cal_mode(chain(Topology::ThreePc, 6));
        c.tune_ideal().unwrap();
        let on_axis = crate::jones::JonesMatrix::identity() * c.source_fiber.adjoint();
        let pc1 = c.controller_mut(ControllerSlot::Pc1).unwrap();
        pc1.voltages = pc1.solve(&on_axis).unwrap();
        let prop = c.propagator().unwrap();
        let first = crate::optics::route_pbs(&prop.output_state(0.0, 0.0)).0;
        for &a in &ALICE_PHASES {
            let p = crate::optics::route_pbs(&prop.output_state(a, 0.0)).0;
            assert!((p - first).abs() < 1e-12);
        }
        let h = collect_histogram(&c, 200_000, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(pc1_objective(&h).value.abs() < 0.05);
    }

    #[test]
    fn pc3_objective_examples() {
        let mut c = in_cal_mode(chain(Topology::ThreePc, 3));
        c.tune_ideal().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        assert!(pc3_objective(&c, 20_000, &mut rng).unwrap().value <= 0.02);
        let mut detuned = c.clone();
        detuned.controller_mut(ControllerSlot::Pc3).unwrap().voltages = [0.0; 3];
        assert!(pc3_objective(&detuned, 20_000, &mut rng).unwrap().value > 0.05);
        let burst = BurstCounts { correct: 95, wrong: 5 };
        assert_eq!(burst.qber(), Some(0.05));
        assert_eq!(BurstCounts::default().qber(), None);
    }

    #[test]
    fn descent_finds_quadratic_minimum() {
        let params = CalibrationParams {
            learning_rate: 40.0,
            probe_step_v: 1.0,
            max_step_v: 50.0,
            tolerance: 1e-10,
            max_iters: 50,
            ..Default::default()
        };
        let pc = PolarizationController::default().with_voltages([10.0, 20.0, 30.0]);
        let mut f = |c: &PolarizationController| Ok(ObjectiveValue::single(0.01 * (c.voltages[1] - 57.0).powi(2)));
        let (out, trace) = descend_channel(&mut f, &pc, 1, &params).unwrap();
        assert!((out.voltages[1] - 57.0).abs() < 1e-3, "{}", out.voltages[1]);
        assert!(trace.iterations <= 50);
        assert_eq!(out.voltages[0], 10.0);
        assert_eq!(out.voltages[2], 30.0);
    }

    #[test]
    fn zero_learning_rate_leaves_controller_unchanged() {
        let params = CalibrationParams {
            learning_rate: 0.0,
            ..Default::default()
        };
        let pc = PolarizationController::default().with_voltages([10.0, 20.0, 30.0]);
        let mut f = |c: &PolarizationController| Ok(ObjectiveValue::single(c.voltages[0].sin()));
        let (out, trace) = descend_channel(&mut f, &pc, 0, &params).unwrap();
        assert_eq!(out, pc);
        assert_eq!(trace.iterations, 1);
    }

    #[test]
    fn descent_stays_in_range_and_propagates_errors() {
        let params = CalibrationParams::default();
        let pc = PolarizationController::default().with_voltages([1.0, 149.0, 75.0]);
        for ch in 0..3 {
            let mut f = |c: &PolarizationController| {
                assert!(c.voltages.iter().all(|v| (0.0..=150.0).contains(v)));
                // pulls toward negative voltages: forces folding at the edge
                Ok(ObjectiveValue::single(c.voltages[ch] * 0.05))
            };
            descend_channel(&mut f, &pc, ch, &params).unwrap();
        }
        let mut failing = |_: &PolarizationController| Err(CalibrationError::NoSiftedEvents);
        assert_eq!(
            descend_channel(&mut failing, &pc, 0, &params).unwrap_err(),
            CalibrationError::NoSiftedEvents
        );
        let mut f = |_: &PolarizationController| Ok(ObjectiveValue::single(0.0));
        assert_eq!(
            descend_channel(&mut f, &pc, 3, &params).unwrap_err(),
            CalibrationError::BadChannel(3)
        );
    }

    #[test]
    fn noisy_descent_best_seen_is_monotone() {
        let params = CalibrationParams::default();
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pc = PolarizationController::default().with_voltages([40.0, 40.0, 40.0]);
            let mut f = |c: &PolarizationController| {
                let x = c.voltages[2] * crate::optics::DEFAULT_GAIN;
                let noise: f64 = rng.random_range(-0.01..0.01);
                Ok(ObjectiveValue::single(0.5 * (1.0 - x.cos()) + noise))
            };
            let (_, trace) = descend_channel(&mut f, &pc, 2, &params).unwrap();
            assert!(trace.best_seen.windows(2).all(|w| w[1] <= w[0]));
            assert!(trace.best_seen.last().unwrap() < &trace.best_seen[0]);
        }
    }

    #[test]
    fn calibrated_chain_needs_one_trivial_loop() {
        let mut c = chain(Topology::ThreePc, 9);
        c.tune_ideal().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let report = calibrate_all(&mut c, &CalibrationParams::default(), 5e6, &mut rng).unwrap();
        assert!(report.converged);
        assert_eq!(report.outer_loops, 1);
        assert!(report.controllers.is_empty());
        assert_eq!(c.attenuator.mode, AttenuatorMode::KeySharing);
    }

    #[test]
    fn attenuator_restored_on_failure() {
        let mut c = chain(Topology::ThreePc, 9);
        c.detectors[0].dark_prob = 0.0;
        c.detectors[1].dark_prob = 0.0;
        c.attenuator.mu_cal = 0.0;
        c.attenuator.mu_key = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(calibrate_all(&mut c, &CalibrationParams::default(), 5e6, &mut rng).is_err());
        assert_eq!(c.attenuator.mode, AttenuatorMode::KeySharing);
    }

    #[test]
    fn calibration_converges_from_random_start() {
        for seed in 0..5 {
            let mut c = chain(Topology::ThreePc, 100 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let report = calibrate_all(&mut c, &CalibrationParams::default(), 5e6, &mut rng).unwrap();
            let exact = crate::protocol::Transmitter::new(&c).unwrap().expected().qber;
            assert!(exact <= 0.05, "seed {seed}: {report:?}");
            if report.converged {
                assert!(report.final_qber <= CalibrationParams::default().target_qber);
                assert!(c.closure().unwrap().off_diagonal() <= 0.15, "seed {seed}");
            }
        }
    }

    #[test]
    fn supervisor_threshold() {
        let mut s = SessionState {
            window_qber: Some(0.02),
            ..Default::default()
        };
        assert_eq!(supervise(&s, 0.05), Action::Continue);
        s.window_qber = Some(0.06);
        assert_eq!(supervise(&s, 0.05), Action::Recalibrate);
        s.window_qber = None;
        assert_eq!(supervise(&s, 0.05), Action::Continue);
        s.data_time_s = 80.0;
        s.calibration_time_s = 20.0;
        assert!((s.duty_cycle_data() - 0.8).abs() < 1e-12);
    }
}
