//! Time-resolved two-component field for chirp × crystal-birefringence
//! depolarization and its cancellation by exchanging the crystal axes
//! between Alice's and Bob's modulators.
//!
//! Fractional-sample delays use a frequency-domain phase ramp on a
//! zero-padded power-of-two FFT grid. The operation is deterministic and
//! exact for band-limited fields that vanish at the window edges.

use std::f64::consts::{FRAC_1_SQRT_2, LN_2, PI};

use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::jones::{swap_section, JonesMatrix, JonesVector, C64};

/// Minimum samples across the intensity FWHM.
pub const MIN_SAMPLES_PER_FWHM: f64 = 64.0;
/// Window half-width in units of the FWHM.
const WINDOW_HALF_FWHM: f64 = 4.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PulseError {
    #[error("sampling too coarse: {0:.1} samples across the FWHM (need ≥ 64)")]
    TooCoarse(f64),
    #[error("chirp aliases at this sampling: peak instantaneous frequency {0:.3e} rad/s exceeds Nyquist")]
    Undersampled(f64),
    #[error("delay {delay:e} s exceeds the pulse window {window:e} s")]
    DelayTooLarge { delay: f64, window: f64 },
    #[error("pulse carries no energy")]
    ZeroEnergy,
    #[error("invalid pulse parameter: {0}")]
    Invalid(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrystalAxis {
    Ordinary,
    Extraordinary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledPulse {
    /// Seconds per sample.
    pub dt: f64,
    /// Time of the first sample.
    pub t0: f64,
    /// `(e_o, e_e)` per sample.
    pub samples: Vec<(C64, C64)>,
}

impl SampledPulse {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt
    }

    pub fn energy(&self) -> f64 {
        self.samples
            .iter()
            .map(|(o, e)| o.norm_sqr() + e.norm_sqr())
            .sum::<f64>()
            * self.dt
    }

    pub fn window(&self) -> f64 {
        self.len() as f64 * self.dt
    }

    pub fn sample_state(&self, k: usize) -> JonesVector {
        let (o, e) = self.samples[k];
        JonesVector::new(o, e)
    }

    /// Applies the same Jones matrix to every sample.
    pub fn rotate(&self, m: &JonesMatrix) -> SampledPulse {
        let samples = self
            .samples
            .iter()
            .map(|&(o, e)| {
                let v = m.apply(&JonesVector::new(o, e));
                (v.a_o, v.a_e)
            })
            .collect();
        SampledPulse {
            dt: self.dt,
            t0: self.t0,
            samples,
        }
    }
}

/// Gaussian pulse with intensity FWHM `duration_fwhm` and quadratic phase
/// `exp(i·chirp·t²)` shared by both components.
pub fn chirped_pulse(duration_fwhm: f64, chirp: f64, sop: &JonesVector, dt: f64) -> Result<SampledPulse, PulseError> {
    if !(duration_fwhm > 0.0) || !(dt > 0.0) {
        return Err(PulseError::Invalid("duration and dt must be positive"));
    }
    if !sop.is_normalized() {
        return Err(PulseError::Invalid("sop must be normalized"));
    }
    let per_fwhm = duration_fwhm / dt;
    if per_fwhm < MIN_SAMPLES_PER_FWHM {
        return Err(PulseError::TooCoarse(per_fwhm));
    }
    let half = WINDOW_HALF_FWHM * duration_fwhm;
    let peak_omega = 2.0 * chirp.abs() * half;
    if peak_omega * dt >= PI {
        return Err(PulseError::Undersampled(peak_omega));
    }
    let n_half = (half / dt).ceil() as i64;
    let a = 2.0 * LN_2 / (duration_fwhm * duration_fwhm);
    let samples = (-n_half..=n_half)
        .map(|k| {
            let t = k as f64 * dt;
            let field = C64::from_polar((-a * t * t).exp(), chirp * t * t);
            (field * sop.a_o, field * sop.a_e)
        })
        .collect();
    Ok(SampledPulse {
        dt,
        t0: -(n_half as f64) * dt,
        samples,
    })
}

/// Closed-form energy of [`chirped_pulse`]: `T·√(π / (4 ln 2))`.
pub fn gaussian_energy(duration_fwhm: f64) -> f64 {
    duration_fwhm * (PI / (4.0 * LN_2)).sqrt()
}

/// Delays one component by `delay` seconds (negative advances it).
pub fn apply_pmd(p: &SampledPulse, delay: f64, delayed_axis: CrystalAxis) -> Result<SampledPulse, PulseError> {
    if delay == 0.0 {
        return Ok(p.clone());
    }
    if delay.abs() > p.window() {
        return Err(PulseError::DelayTooLarge {
            delay,
            window: p.window(),
        });
    }
    let component: Vec<C64> = p
        .samples
        .iter()
        .map(|&(o, e)| match delayed_axis {
            CrystalAxis::Ordinary => o,
            CrystalAxis::Extraordinary => e,
        })
        .collect();
    let shifted = fractional_delay(&component, delay / p.dt);
    let samples = p
        .samples
        .iter()
        .zip(shifted)
        .map(|(&(o, e), s)| match delayed_axis {
            CrystalAxis::Ordinary => (s, e),
            CrystalAxis::Extraordinary => (o, s),
        })
        .collect();
    Ok(SampledPulse {
        dt: p.dt,
        t0: p.t0,
        samples,
    })
}

/// `y[k] = x(k − shift)` by band-limited interpolation.
fn fractional_delay(x: &[C64], shift: f64) -> Vec<C64> {
    let n = x.len();
    let size = (2 * n).next_power_of_two();
    let mut buf = vec![C64::new(0.0, 0.0); size];
    buf[..n].copy_from_slice(x);
    let mut planner = FftPlanner::<f64>::new();
    planner.plan_fft_forward(size).process(&mut buf);
    for (k, z) in buf.iter_mut().enumerate() {
        let signed = if k <= size / 2 {
            k as f64
        } else {
            k as f64 - size as f64
        };
        let phase = -2.0 * PI * signed * shift / size as f64;
        *z *= C64::from_polar(1.0 / size as f64, phase);
    }
    planner.plan_fft_inverse(size).process(&mut buf);
    buf.truncate(n);
    buf
}

/// Trace-normalized 2×2 coherency (polarization) matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoherencyMatrix {
    pub m: [[C64; 2]; 2],
}

impl CoherencyMatrix {
    pub fn pure(v: &JonesVector) -> Self {
        let n = v.norm_sqr();
        let c = [v.a_o, v.a_e];
        let mut m = [[C64::new(0.0, 0.0); 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                m[i][j] = c[i] * c[j].conj() / n;
            }
        }
        Self { m }
    }

    pub fn trace(&self) -> f64 {
        (self.m[0][0] + self.m[1][1]).re
    }

    pub fn hermiticity_defect(&self) -> f64 {
        let mut d: f64 = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                d = d.max((self.m[i][j] - self.m[j][i].conj()).norm());
            }
        }
        d
    }

    pub fn determinant(&self) -> f64 {
        (self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0]).re
    }

    /// Eigenvalues in descending order with their unit eigenvectors.
    pub fn eigen(&self) -> ([f64; 2], [JonesVector; 2]) {
        let a = self.m[0][0].re;
        let d = self.m[1][1].re;
        let b = self.m[0][1];
        let mean = 0.5 * (a + d);
        let gap = (0.25 * (a - d) * (a - d) + b.norm_sqr()).sqrt();
        let l1 = mean + gap;
        let l2 = mean - gap;
        let vectors = if b.norm() < 1e-300 {
            if a >= d {
                [JonesVector::horizontal(), JonesVector::vertical()]
            } else {
                [JonesVector::vertical(), JonesVector::horizontal()]
            }
        } else {
            let v1 = JonesVector::new(b, C64::new(l1 - a, 0.0));
            let v2 = JonesVector::new(b, C64::new(l2 - a, 0.0));
            [v1.normalized().unwrap(), v2.normalized().unwrap()]
        };
        ([l1, l2], vectors)
    }

    /// Degree of polarization `√(1 − 4 det J)`.
    pub fn dop(&self) -> f64 {
        let t = self.trace();
        (1.0 - 4.0 * self.determinant() / (t * t)).max(0.0).sqrt()
    }

    /// Conjugates by a Jones matrix: `M J M†`.
    pub fn transformed(&self, mat: &JonesMatrix) -> CoherencyMatrix {
        let mm = &mat.m;
        let mut out = [[C64::new(0.0, 0.0); 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                let mut acc = C64::new(0.0, 0.0);
                for k in 0..2 {
                    for l in 0..2 {
                        acc += mm[i][k] * self.m[k][l] * mm[j][l].conj();
                    }
                }
                out[i][j] = acc;
            }
        }
        CoherencyMatrix { m: out }
    }
}

/// Energy-weighted average of the instantaneous outer products.
pub fn coherency(p: &SampledPulse) -> Result<CoherencyMatrix, PulseError> {
    let mut m = [[C64::new(0.0, 0.0); 2]; 2];
    for &(o, e) in &p.samples {
        m[0][0] += o * o.conj();
        m[0][1] += o * e.conj();
        m[1][0] += e * o.conj();
        m[1][1] += e * e.conj();
    }
    let tr = (m[0][0] + m[1][1]).re;
    if !(tr > 0.0) {
        return Err(PulseError::ZeroEnergy);
    }
    for row in &mut m {
        for z in row {
            *z /= tr;
        }
    }
    Ok(CoherencyMatrix { m })
}

/// Energy fraction reaching SPD2 after `measurement_matrix` and the PBS.
/// The measurement is expected to route the intended state to SPD1.
pub fn pulse_qber(p: &SampledPulse, measurement_matrix: &JonesMatrix) -> f64 {
    let mut wrong = 0.0;
    let mut total = 0.0;
    for &(o, e) in &p.samples {
        let v = measurement_matrix.apply(&JonesVector::new(o, e));
        wrong += v.a_e.norm_sqr();
        total += v.norm_sqr();
    }
    if total > 0.0 {
        wrong / total
    } else {
        0.0
    }
}

/// Alice's crystal, a per-sample rotation, then Bob's crystal, each delaying
/// the extraordinary axis.
pub fn swap_compensation_chain(
    p: &SampledPulse,
    tau_alice: f64,
    rotation: &JonesMatrix,
    tau_bob: f64,
) -> Result<SampledPulse, PulseError> {
    let after_alice = apply_pmd(p, tau_alice, CrystalAxis::Extraordinary)?;
    let rotated = after_alice.rotate(rotation);
    apply_pmd(&rotated, tau_bob, CrystalAxis::Extraordinary)
}

/// Measurement sending the 45° launch state `(1, 1)/√2` to SPD1.
pub fn diagonal_analyzer() -> JonesMatrix {
    let s = C64::new(FRAC_1_SQRT_2, 0.0);
    JonesMatrix::new([[s, s], [s, -s]])
}

/// Pulse and crystal settings of a scenario.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PulseParams {
    pub fwhm_s: f64,
    /// Quadratic phase coefficient, rad/s².
    pub chirp: f64,
    pub alice_delay_s: f64,
    pub bob_delay_s: f64,
    pub dt_s: f64,
    /// Whether the link rotates the crystal axes by 90° between modulators.
    pub compensation: bool,
}

impl Default for PulseParams {
    fn default() -> Self {
        Self {
            fwhm_s: 1e-9,
            chirp: 5e20,
            alice_delay_s: 2e-12,
            bob_delay_s: 2e-12,
            dt_s: 0.5e-12,
            compensation: true,
        }
    }
}

impl PulseParams {
    pub fn launch(&self) -> Result<SampledPulse, PulseError> {
        let sop = JonesVector::from_amplitudes(FRAC_1_SQRT_2, FRAC_1_SQRT_2, 0.0);
        chirped_pulse(self.fwhm_s, self.chirp, &sop, self.dt_s)
    }

    /// Intra-pulse error probability after both modulators: with the axis
    /// swap when `compensation` is set, with aligned axes otherwise.
    pub fn intrinsic_qber(&self) -> Result<f64, PulseError> {
        let p = self.launch()?;
        let rotation = if self.compensation {
            swap_section(0.0)
        } else {
            JonesMatrix::identity()
        };
        let out = swap_compensation_chain(&p, self.alice_delay_s, &rotation, self.bob_delay_s)?;
        Ok(pulse_qber(&out, &diagonal_analyzer()))
    }

    /// Error probability with Alice's crystal only.
    pub fn single_pass_qber(&self) -> Result<f64, PulseError> {
        let p = self.launch()?;
        let out = apply_pmd(&p, self.alice_delay_s, CrystalAxis::Extraordinary)?;
        Ok(pulse_qber(&out, &diagonal_analyzer()))
    }
}
