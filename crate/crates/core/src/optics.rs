//! Element models: piezo polarization controllers, fiber splices, the
//! drifting fiber channel, the two-mode attenuator and gated single-photon
//! detectors.

use std::f64::consts::{FRAC_PI_4, PI, TAU};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::jones::{JonesMatrix, JonesVector, Pbs, C64};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OpticsError {
    #[error("voltage {voltage} V on stage {stage} is outside [0, {max}] V")]
    VoltageOutOfRange { stage: usize, voltage: f64, max: f64 },
    #[error("invalid {field}: {reason}")]
    Invalid { field: &'static str, reason: String },
}

/// One fiber-squeezer stage: a variable linear retarder with a fixed axis
/// and linear voltage→retardance response.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetarderStage {
    /// Fast axis angle, radians.
    pub axis: f64,
    /// Retardance per volt, rad/V.
    pub gain: f64,
    pub max_voltage: f64,
}

impl RetarderStage {
    /// Voltage that adds one full 2π of retardance.
    pub fn wrap_voltage(&self) -> f64 {
        TAU / self.gain
    }

    pub fn matrix(&self, voltage: f64) -> JonesMatrix {
        JonesMatrix::retarder(self.axis, self.gain * voltage)
    }
}

/// Default stage: 2π per 100 V over a 0..150 V drive range (3π span).
pub const DEFAULT_GAIN: f64 = TAU / 100.0;
pub const DEFAULT_MAX_VOLTAGE: f64 = 150.0;

/// Three-stage piezo polarization controller, axes 0°/45°/0°.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolarizationController {
    pub stages: [RetarderStage; 3],
    pub voltages: [f64; 3],
}

impl Default for PolarizationController {
    fn default() -> Self {
        Self::new(DEFAULT_GAIN, DEFAULT_MAX_VOLTAGE)
    }
}

impl PolarizationController {
    pub fn new(gain: f64, max_voltage: f64) -> Self {
        let stage = |axis| RetarderStage {
            axis,
            gain,
            max_voltage,
        };
        Self {
            stages: [stage(0.0), stage(FRAC_PI_4), stage(0.0)],
            voltages: [0.0; 3],
        }
    }

    pub fn with_voltages(mut self, voltages: [f64; 3]) -> Self {
        self.voltages = voltages;
        self
    }

    pub fn random_voltages<R: Rng + ?Sized>(mut self, rng: &mut R) -> Self {
        for (v, s) in self.voltages.iter_mut().zip(&self.stages) {
            *v = rng.random_range(0.0..=s.max_voltage);
        }
        self
    }

    pub fn in_range(&self, stage: usize, voltage: f64) -> bool {
        (0.0..=self.stages[stage].max_voltage).contains(&voltage)
    }

    /// Fails unless each stage covers a full 2π of retardance.
    pub fn validate(&self) -> Result<(), OpticsError> {
        for (i, s) in self.stages.iter().enumerate() {
            if !(s.gain > 0.0 && s.max_voltage > 0.0) || s.gain * s.max_voltage < TAU {
                return Err(OpticsError::Invalid {
                    field: "controller",
                    reason: format!("stage {i} must span at least 2π of retardance"),
                });
            }
        }
        Ok(())
    }

    /// Finds in-range voltages realizing `target` up to global phase.
    ///
    /// Decomposes the target as rotations about s1, s2, s1 on the Poincaré
    /// sphere (the stage axes) and folds each retardance into [0, 2π).
    pub fn solve(&self, target: &JonesMatrix) -> Result<[f64; 3], OpticsError> {
        self.validate()?;
        let det = target.determinant();
        let scale = det.sqrt();
        let u = [
            [target.m[0][0] / scale, target.m[0][1] / scale],
            [target.m[1][0] / scale, target.m[1][1] / scale],
        ];
        let b = 2.0 * u[0][1].norm().atan2(u[0][0].norm());
        let sum = if u[0][0].norm() > 1e-12 {
            -2.0 * u[0][0].arg()
        } else {
            0.0
        };
        let diff = if u[0][1].norm() > 1e-12 {
            2.0 * (u[0][1].arg() + PI / 2.0)
        } else {
            0.0
        };
        let retardances = [(sum + diff) / 2.0, b, (sum - diff) / 2.0];
        let mut voltages = [0.0; 3];
        for (i, r) in retardances.iter().enumerate() {
            let folded = r.rem_euclid(TAU);
            voltages[i] = folded / self.stages[i].gain;
        }
        Ok(voltages)
    }
}

/// Product of the three stage retarders; stage 0 acts first.
pub fn pc_matrix(pc: &PolarizationController) -> Result<JonesMatrix, OpticsError> {
    let mut m = JonesMatrix::identity();
    for (i, (stage, &v)) in pc.stages.iter().zip(&pc.voltages).enumerate() {
        if !pc.in_range(i, v) {
            return Err(OpticsError::VoltageOutOfRange {
                stage: i,
                voltage: v,
                max: stage.max_voltage,
            });
        }
        m = stage.matrix(v) * m;
    }
    Ok(m)
}

/// PMF splice with the slow axes rotated by `angle`.
pub fn splice_matrix(angle: f64) -> JonesMatrix {
    JonesMatrix::rotation(angle)
}

/// Haar-distributed random unitary (uniform unit quaternion).
pub fn random_unitary<R: Rng + ?Sized>(rng: &mut R) -> JonesMatrix {
    let mut q = [0.0f64; 4];
    for x in &mut q {
        *x = rng.sample(StandardNormal);
    }
    let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    let [a, b, c, d] = q.map(|x| x / n);
    JonesMatrix::new([[C64::new(a, b), C64::new(c, d)], [C64::new(-c, d), C64::new(a, -b)]])
}

fn random_direction<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        ];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-12 {
            return v.map(|x| x / n);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FiberChannel {
    pub loss_db: f64,
    /// Random-walk scale of the Poincaré rotation angle, rad/√s.
    pub drift_rate: f64,
    pub current_unitary: JonesMatrix,
    /// Stray-light clicks per detection window.
    pub background_rate: f64,
}

impl FiberChannel {
    pub fn new(loss_db: f64, drift_rate: f64, background_rate: f64) -> Result<Self, OpticsError> {
        if !(loss_db >= 0.0) {
            return Err(invalid("channel_loss_db", "must be ≥ 0"));
        }
        if !(drift_rate >= 0.0) {
            return Err(invalid("drift_rate", "must be ≥ 0"));
        }
        if !(0.0..1.0).contains(&background_rate) {
            return Err(invalid("background_rate", "must lie in [0, 1)"));
        }
        Ok(Self {
            loss_db,
            drift_rate,
            current_unitary: JonesMatrix::identity(),
            background_rate,
        })
    }

    pub fn with_unitary(mut self, u: JonesMatrix) -> Self {
        self.current_unitary = u;
        self
    }

    /// Advances the polarization drift by `dt` seconds.
    pub fn drift_step<R: Rng + ?Sized>(&self, dt: f64, rng: &mut R) -> Self {
        let mut next = *self;
        if self.drift_rate == 0.0 || dt <= 0.0 {
            return next;
        }
        let sigma = self.drift_rate * dt.sqrt();
        let angle = sigma * rng.sample::<f64, _>(StandardNormal);
        let axis = random_direction(rng);
        let kick = JonesMatrix::poincare_rotation(axis, angle);
        next.current_unitary = (kick * self.current_unitary).reunitarize();
        next
    }
}

fn invalid(field: &'static str, reason: &str) -> OpticsError {
    OpticsError::Invalid {
        field,
        reason: reason.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttenuatorMode {
    KeySharing,
    Calibration,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Attenuator {
    pub mode: AttenuatorMode,
    pub mu_key: f64,
    pub mu_cal: f64,
}

impl Attenuator {
    pub fn new(mu_key: f64, mu_cal: f64) -> Result<Self, OpticsError> {
        if !(mu_key > 0.0) {
            return Err(invalid("mu_key", "must be > 0"));
        }
        if !(mu_cal >= mu_key) {
            return Err(invalid("mu_cal", "must be ≥ mu_key"));
        }
        Ok(Self {
            mode: AttenuatorMode::KeySharing,
            mu_key,
            mu_cal,
        })
    }

    /// Photons per pulse leaving Alice in the current mode.
    pub fn mu(&self) -> f64 {
        match self.mode {
            AttenuatorMode::KeySharing => self.mu_key,
            AttenuatorMode::Calibration => self.mu_cal,
        }
    }
}

/// Mean photon number after `chain_loss_db` of loss.
pub fn mean_photons(att: &Attenuator, chain_loss_db: f64) -> f64 {
    att.mu() * 10f64.powf(-chain_loss_db / 10.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DetectorLabel {
    Spd1,
    Spd2,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detector {
    pub efficiency: f64,
    /// Dark-click probability per detection window.
    pub dark_prob: f64,
    pub label: DetectorLabel,
}

impl Detector {
    pub fn new(efficiency: f64, dark_prob: f64, label: DetectorLabel) -> Result<Self, OpticsError> {
        if !(efficiency > 0.0 && efficiency <= 1.0) {
            return Err(invalid("efficiency", "must lie in (0, 1]"));
        }
        if !(0.0..1.0).contains(&dark_prob) {
            return Err(invalid("dark_prob", "must lie in [0, 1)"));
        }
        Ok(Self {
            efficiency,
            dark_prob,
            label,
        })
    }

    /// `1 − (1 − p_dark)·exp(−η·μ)` for Poissonian input with mean `mu`.
    pub fn click_probability(&self, mu: f64) -> f64 {
        click_probability(mu, self.efficiency, self.dark_prob)
    }
}

pub fn click_probability(mu: f64, efficiency: f64, dark_prob: f64) -> f64 {
    -(1.0 - dark_prob) * (-efficiency * mu).exp_m1() + dark_prob
}

pub fn detect<R: Rng + ?Sized>(mean_photons_at_detector: f64, det: &Detector, rng: &mut R) -> bool {
    let p = det.click_probability(mean_photons_at_detector);
    p > 0.0 && rng.random::<f64>() < p
}

/// Port probabilities `(|a_o|², |a_e|²)` behind the PBS.
pub fn route_pbs(v: &JonesVector<Pbs>) -> (f64, f64) {
    let n = v.norm_sqr();
    debug_assert!(n > 0.0);
    (v.a_o.norm_sqr() / n, v.a_e.norm_sqr() / n)
}
