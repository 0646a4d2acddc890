//! The full link: laser → section 1 → PM1 → VOA → channel → PC2 → PM2 →
//! section 3 → PBS → SPD1/SPD2.
//!
//! Sections 1 and 3 are either piezo controllers (three-controller layout)
//! or fixed PMF elements (free-space half-wave plates, 45° splices).

use std::f64::consts::{FRAC_PI_4, FRAC_PI_8, PI, TAU};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::jones::{alice_section, bob_section, phase_modulator_matrix, swap_section, JonesMatrix, JonesVector, Pbs};
use crate::optics::{
    click_probability, mean_photons, pc_matrix, random_unitary, route_pbs, splice_matrix, Attenuator, Detector,
    FiberChannel, OpticsError, PolarizationController,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    ThreePc,
    FreespacePlates,
    Splice45,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ControllerSlot {
    Pc1,
    Pc2,
    Pc3,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Section {
    Controller(PolarizationController),
    Fixed(JonesMatrix),
}

impl Section {
    fn matrix(&self) -> Result<JonesMatrix, OpticsError> {
        match self {
            Section::Controller(pc) => pc_matrix(pc),
            Section::Fixed(m) => Ok(*m),
        }
    }
}

/// Zero-voltage phases of a LiNbO₃ modulator.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PhaseModulator {
    pub phi_or: f64,
    pub phi_ex: f64,
}

impl PhaseModulator {
    pub fn matrix(&self, delta_phi: f64) -> JonesMatrix {
        phase_modulator_matrix(delta_phi, self.phi_or, self.phi_ex)
    }
}

/// Probabilities of the four detector outcomes in one window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutcomeProbs {
    pub none: f64,
    pub only1: f64,
    pub only2: f64,
    pub both: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpticalChain {
    pub topology: Topology,
    /// Fixed birefringence between the laser and section 1.
    pub source_fiber: JonesMatrix,
    pub section1: Section,
    pub alice_pm: PhaseModulator,
    pub attenuator: Attenuator,
    pub channel: FiberChannel,
    pub pc2: PolarizationController,
    pub bob_pm: PhaseModulator,
    pub section3: Section,
    /// Fixed birefringence between section 3 and the PBS.
    pub analyzer_fiber: JonesMatrix,
    pub bob_loss_db: f64,
    pub detectors: [Detector; 2],
    /// Per-photon probability of landing in the wrong port regardless of
    /// alignment (intra-pulse depolarization plus component imperfections).
    pub intrinsic_error: f64,
}

impl OpticalChain {
    /// Builds a chain with random fixed fibers, modulator phases and
    /// controller voltages drawn from `rng`.
    pub fn random<R: Rng + ?Sized>(
        topology: Topology,
        attenuator: Attenuator,
        channel: FiberChannel,
        bob_loss_db: f64,
        detectors: [Detector; 2],
        intrinsic_error: f64,
        rng: &mut R,
    ) -> Self {
        let mut pm = || PhaseModulator {
            phi_or: rng.random_range(0.0..TAU),
            phi_ex: rng.random_range(0.0..TAU),
        };
        let alice_pm = pm();
        let bob_pm = pm();
        let channel = channel.with_unitary(random_unitary(rng));
        let pc = PolarizationController::default();
        let (source_fiber, section1, section3, analyzer_fiber) = match topology {
            Topology::ThreePc => (
                random_unitary(rng),
                Section::Controller(pc.random_voltages(rng)),
                Section::Controller(pc.random_voltages(rng)),
                random_unitary(rng),
            ),
            Topology::FreespacePlates => (
                JonesMatrix::identity(),
                Section::Fixed(JonesMatrix::half_wave_plate(FRAC_PI_8)),
                Section::Fixed(JonesMatrix::half_wave_plate(FRAC_PI_8)),
                JonesMatrix::identity(),
            ),
            Topology::Splice45 => (
                JonesMatrix::identity(),
                Section::Fixed(splice_matrix(FRAC_PI_4)),
                Section::Fixed(splice_matrix(FRAC_PI_4)),
                JonesMatrix::identity(),
            ),
        };
        Self {
            topology,
            source_fiber,
            section1,
            alice_pm,
            attenuator,
            channel,
            pc2: pc.random_voltages(rng),
            bob_pm,
            section3,
            analyzer_fiber,
            bob_loss_db,
            detectors,
            intrinsic_error,
        }
    }

    /// Controllers tuned by calibration, in tuning order.
    pub fn tunable_slots(&self) -> &'static [ControllerSlot] {
        match self.topology {
            Topology::ThreePc => &[ControllerSlot::Pc2, ControllerSlot::Pc1, ControllerSlot::Pc3],
            _ => &[ControllerSlot::Pc2],
        }
    }

    pub fn controller(&self, slot: ControllerSlot) -> Option<&PolarizationController> {
        match slot {
            ControllerSlot::Pc1 => match &self.section1 {
                Section::Controller(pc) => Some(pc),
                Section::Fixed(_) => None,
            },
            ControllerSlot::Pc2 => Some(&self.pc2),
            ControllerSlot::Pc3 => match &self.section3 {
                Section::Controller(pc) => Some(pc),
                Section::Fixed(_) => None,
            },
        }
    }

    pub fn controller_mut(&mut self, slot: ControllerSlot) -> Option<&mut PolarizationController> {
        match slot {
            ControllerSlot::Pc1 => match &mut self.section1 {
                Section::Controller(pc) => Some(pc),
                Section::Fixed(_) => None,
            },
            ControllerSlot::Pc2 => Some(&mut self.pc2),
            ControllerSlot::Pc3 => match &mut self.section3 {
                Section::Controller(pc) => Some(pc),
                Section::Fixed(_) => None,
            },
        }
    }

    /// Effective section matrices at zero modulation voltage:
    /// laser→PM1, PM1→PM2, PM2→PBS.
    pub fn section_matrices(&self) -> Result<[JonesMatrix; 3], OpticsError> {
        let s1 = self.section1.matrix()? * self.source_fiber;
        let s2 = pc_matrix(&self.pc2)? * self.channel.current_unitary * self.alice_pm.matrix(0.0);
        let s3 = self.analyzer_fiber * self.section3.matrix()? * self.bob_pm.matrix(0.0);
        Ok([s1, s2, s3])
    }

    /// Full chain product at zero modulation; diagonal when aligned.
    pub fn closure(&self) -> Result<JonesMatrix, OpticsError> {
        let [s1, s2, s3] = self.section_matrices()?;
        Ok(s3 * s2 * s1)
    }

    /// Precomputes the voltage-independent parts of the chain.
    pub fn propagator(&self) -> Result<Propagator, OpticsError> {
        let s1 = self.section1.matrix()? * self.source_fiber;
        let alice_in = s1.apply(&JonesVector::horizontal());
        let s2 = pc_matrix(&self.pc2)? * self.channel.current_unitary;
        let s3 = self.analyzer_fiber * self.section3.matrix()?;
        Ok(Propagator {
            alice_in,
            alice_pm: self.alice_pm,
            middle: s2,
            bob_pm: self.bob_pm,
            analyzer: s3,
        })
    }

    pub fn output_state(&self, alice_phase: f64, bob_phase: f64) -> Result<JonesVector<Pbs>, OpticsError> {
        Ok(self.propagator()?.output_state(alice_phase, bob_phase))
    }

    /// Total loss from Alice's output to the detectors.
    pub fn loss_db(&self) -> f64 {
        self.channel.loss_db + self.bob_loss_db
    }

    /// Mean photon number arriving at the PBS in the current attenuator mode.
    pub fn mean_photons_at_detector(&self) -> f64 {
        mean_photons(&self.attenuator, self.loss_db())
    }

    pub fn dark_prob(&self, detector: usize) -> f64 {
        let d = self.detectors[detector].dark_prob;
        let b = self.channel.background_rate;
        1.0 - (1.0 - d) * (1.0 - b)
    }

    /// SPD port probabilities after the intrinsic error flip.
    pub fn port_probabilities(&self, state: &JonesVector<Pbs>) -> (f64, f64) {
        let (p1, p2) = route_pbs(state);
        let e = self.intrinsic_error;
        (p1 * (1.0 - e) + p2 * e, p2 * (1.0 - e) + p1 * e)
    }

    /// Click probabilities of SPD1/SPD2. Poisson splitting makes the two
    /// detectors independent given the port probabilities.
    pub fn click_probabilities(&self, state: &JonesVector<Pbs>) -> [f64; 2] {
        let mu = self.mean_photons_at_detector();
        let (p1, p2) = self.port_probabilities(state);
        [
            click_probability(mu * p1, self.detectors[0].efficiency, self.dark_prob(0)),
            click_probability(mu * p2, self.detectors[1].efficiency, self.dark_prob(1)),
        ]
    }

    pub fn outcome_probs(&self, state: &JonesVector<Pbs>) -> OutcomeProbs {
        let [c1, c2] = self.click_probabilities(state);
        OutcomeProbs {
            none: (1.0 - c1) * (1.0 - c2),
            only1: c1 * (1.0 - c2),
            only2: c2 * (1.0 - c1),
            both: c1 * c2,
        }
    }

    /// Applies channel drift for `dt` seconds.
    pub fn advance<R: Rng + ?Sized>(&mut self, dt: f64, rng: &mut R) {
        self.channel = self.channel.drift_step(dt, rng);
    }

    /// Sets every tunable controller to an exact solution of the alignment
    /// goal for the current channel state.
    pub fn tune_ideal(&mut self) -> Result<(), OpticsError> {
        match self.topology {
            Topology::ThreePc => {
                let pc1_target = alice_section(0.0) * self.source_fiber.adjoint();
                let pc2_target =
                    swap_section(0.0) * self.alice_pm.matrix(0.0).adjoint() * self.channel.current_unitary.adjoint();
                let pc3_target = self.analyzer_fiber.adjoint() * bob_section(0.0) * self.bob_pm.matrix(0.0).adjoint();
                for (slot, target) in [
                    (ControllerSlot::Pc1, pc1_target),
                    (ControllerSlot::Pc2, pc2_target),
                    (ControllerSlot::Pc3, pc3_target),
                ] {
                    let pc = self.controller_mut(slot).expect("three-controller layout");
                    pc.voltages = pc.solve(&target)?;
                }
            }
            _ => {
                // Section 2 must be an axis swap making the full product
                // diagonal; scan the free diagonal phase of the product.
                let s1 = self.section1.matrix()? * self.source_fiber;
                let s3 = self.analyzer_fiber * self.section3.matrix()? * self.bob_pm.matrix(0.0);
                let section2_for = |gamma: f64| {
                    s3.adjoint()
                        * JonesMatrix::diag(
                            crate::jones::C64::new(1.0, 0.0),
                            crate::jones::C64::from_polar(1.0, gamma),
                        )
                        * s1.adjoint()
                };
                let diag_weight = |m: &JonesMatrix| m.m[0][0].norm() + m.m[1][1].norm();
                let mut best = (f64::INFINITY, 0.0);
                for k in 0..3600 {
                    let g = k as f64 * TAU / 3600.0;
                    let w = diag_weight(&section2_for(g));
                    if w < best.0 {
                        best = (w, g);
                    }
                }
                let (mut lo, mut hi) = (best.1 - TAU / 3600.0, best.1 + TAU / 3600.0);
                for _ in 0..100 {
                    let m1 = lo + (hi - lo) / 3.0;
                    let m2 = hi - (hi - lo) / 3.0;
                    if diag_weight(&section2_for(m1)) < diag_weight(&section2_for(m2)) {
                        hi = m2;
                    } else {
                        lo = m1;
                    }
                }
                let s2 = section2_for(0.5 * (lo + hi));
                let target = s2 * self.alice_pm.matrix(0.0).adjoint() * self.channel.current_unitary.adjoint();
                self.pc2.voltages = self.pc2.solve(&target)?;
            }
        }
        Ok(())
    }
}

/// Voltage-independent pieces of the chain, for fast repeated evaluation.
#[derive(Debug, Clone, Copy)]
pub struct Propagator {
    alice_in: JonesVector,
    alice_pm: PhaseModulator,
    middle: JonesMatrix,
    bob_pm: PhaseModulator,
    analyzer: JonesMatrix,
}

impl Propagator {
    pub fn output_state(&self, alice_phase: f64, bob_phase: f64) -> JonesVector<Pbs> {
        let v = self.alice_pm.matrix(alice_phase).apply(&self.alice_in);
        let v = self.middle.apply(&v);
        let v = self.bob_pm.matrix(bob_phase).apply(&v);
        self.analyzer.apply(&v).reframe()
    }
}

/// Alice's four modulator phases in cell order.
pub const ALICE_PHASES: [f64; 4] = [0.0, PI / 2.0, PI, 3.0 * PI / 2.0];
/// Bob's two modulator phases in cell order.
pub const BOB_PHASES: [f64; 2] = [0.0, PI / 2.0];
