//! Scenario files, bundled presets, run artifacts and parameter sweeps.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::{calibrate_all, CalibrationError, CalibrationParams, CalibrationReport};
use crate::chain::{OpticalChain, Topology};
use crate::optics::{Attenuator, Detector, DetectorLabel, FiberChannel, OpticsError};
use crate::protocol::{run_session, ProtocolError, QberPoint, SessionConfig, SessionStats, MIN_WINDOW_BITS};
use crate::pulse::{PulseError, PulseParams};

pub const VERSION: &str = concat!("polqkd ", env!("CARGO_PKG_VERSION"));

pub const PRESETS: [(&str, &str); 2] = [
    ("lab_50km", include_str!("../presets/lab_50km.toml")),
    ("urban_30km", include_str!("../presets/urban_30km.toml")),
];

pub const SERIES_HEADER: &str = "t_seconds,qber,window_sifted_bits";

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{origin}: {message}")]
    Parse { origin: String, message: String },
    #[error("invalid `{field}`: {reason}")]
    Invalid { field: String, reason: String },
    #[error("`{0}` is neither a readable file nor a bundled preset (try `presets list`)")]
    UnknownConfig(String),
    #[error("unknown sweep parameter `{0}`")]
    UnknownParameter(String),
    #[error("sweep needs at least one value")]
    EmptyValues,
    #[error(transparent)]
    Pulse(#[from] PulseError),
    #[error(transparent)]
    Optics(#[from] OpticsError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
}

fn invalid(field: &str, reason: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid {
        field: field.to_string(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorParams {
    pub efficiency: f64,
    /// Dark-click probability per detection window.
    pub dark_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    pub seed: u64,
    pub topology: Topology,
    /// Nominal laser repetition rate.
    pub clock_hz: f64,
    /// Rate at which pulses are actually processed.
    pub effective_clock_hz: f64,
    pub mu_key: f64,
    pub mu_cal: f64,
    pub channel_loss_db: f64,
    pub bob_loss_db: f64,
    /// Channel polarization random-walk scale, rad/√s.
    pub drift_rate: f64,
    #[serde(default)]
    pub background_rate: f64,
    /// Residual per-pulse flip probability from imperfect components.
    pub misalignment: f64,
    pub qber_threshold: f64,
    pub window_bits: u64,
    pub block_s: f64,
    pub duration_s: f64,
    pub detector: DetectorParams,
    #[serde(default)]
    pub pulse: PulseParams,
    #[serde(default)]
    pub calibration: CalibrationParams,
}

impl Scenario {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let positive = [
            ("clock_hz", self.clock_hz),
            ("effective_clock_hz", self.effective_clock_hz),
            ("mu_key", self.mu_key),
            ("block_s", self.block_s),
            ("pulse.fwhm_s", self.pulse.fwhm_s),
            ("pulse.dt_s", self.pulse.dt_s),
        ];
        for (field, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(field, format!("must be a positive number, got {v}")));
            }
        }
        let non_negative = [
            ("channel_loss_db", self.channel_loss_db),
            ("bob_loss_db", self.bob_loss_db),
            ("drift_rate", self.drift_rate),
            ("duration_s", self.duration_s),
            ("pulse.alice_delay_s", self.pulse.alice_delay_s),
            ("pulse.bob_delay_s", self.pulse.bob_delay_s),
        ];
        for (field, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(field, format!("must be ≥ 0, got {v}")));
            }
        }
        if self.effective_clock_hz > self.clock_hz {
            return Err(invalid("effective_clock_hz", "cannot exceed clock_hz"));
        }
        if !(self.mu_cal >= self.mu_key) {
            return Err(invalid("mu_cal", "must be ≥ mu_key"));
        }
        if !(0.0..1.0).contains(&self.background_rate) {
            return Err(invalid("background_rate", "must lie in [0, 1)"));
        }
        if !(0.0..=0.5).contains(&self.misalignment) {
            return Err(invalid("misalignment", "must lie in [0, 0.5]"));
        }
        if !(self.qber_threshold > 0.0 && self.qber_threshold <= 0.5) {
            return Err(invalid("qber_threshold", "must lie in (0, 0.5]"));
        }
        if (self.window_bits as usize) < MIN_WINDOW_BITS {
            return Err(invalid("window_bits", format!("must be ≥ {MIN_WINDOW_BITS}")));
        }
        if !(self.detector.efficiency > 0.0 && self.detector.efficiency <= 1.0) {
            return Err(invalid("detector.efficiency", "must lie in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.detector.dark_prob) {
            return Err(invalid("detector.dark_prob", "must lie in [0, 1)"));
        }
        self.calibration
            .validate()
            .map_err(|reason| invalid("calibration", reason))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario fields are TOML-representable")
    }

    /// Per-pulse flip probability: the pulse-level PMD error combined with
    /// the residual misalignment as two independent flips.
    pub fn intrinsic_error(&self) -> Result<f64, ScenarioError> {
        let pmd = self.pulse.intrinsic_qber()?;
        let m = self.misalignment;
        Ok(pmd + m - 2.0 * pmd * m)
    }

    pub fn session_config(&self) -> SessionConfig {
        SessionConfig {
            duration_s: self.duration_s,
            effective_clock_hz: self.effective_clock_hz,
            block_s: self.block_s,
            window_bits: self.window_bits,
            qber_threshold: self.qber_threshold,
        }
    }

    /// A link with random fixed fibers and uncalibrated controllers.
    pub fn build_chain(&self, rng: &mut ChaCha8Rng) -> Result<OpticalChain, ScenarioError> {
        let detector = |label| Detector::new(self.detector.efficiency, self.detector.dark_prob, label);
        Ok(OpticalChain::random(
            self.topology,
            Attenuator::new(self.mu_key, self.mu_cal)?,
            FiberChannel::new(self.channel_loss_db, self.drift_rate, self.background_rate)?,
            self.bob_loss_db,
            [detector(DetectorLabel::Spd1)?, detector(DetectorLabel::Spd2)?],
            self.intrinsic_error()?,
            rng,
        ))
    }
}

pub fn parse_scenario(text: &str, origin: &str) -> Result<Scenario, ScenarioError> {
    let scenario: Scenario = toml::from_str(text).map_err(|e| ScenarioError::Parse {
        origin: origin.to_string(),
        message: e.to_string(),
    })?;
    scenario.validate()?;
    Ok(scenario)
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario, ScenarioError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_scenario(&text, &path.display().to_string())
}

pub fn preset(name: &str) -> Option<Result<Scenario, ScenarioError>> {
    PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(n, text)| parse_scenario(text, &format!("preset {n}")))
}

/// Loads `config` as a file when one exists at that path, else as a preset.
pub fn resolve(config: &str) -> Result<Scenario, ScenarioError> {
    if Path::new(config).is_file() {
        return load_scenario(config);
    }
    preset(config).unwrap_or_else(|| Err(ScenarioError::UnknownConfig(config.to_string())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub version: String,
    pub scenario: String,
    pub seed: u64,
    pub intrinsic_error: f64,
    pub mean_window_qber: Option<f64>,
    /// Alignment from the random initial state, before the session clock
    /// starts.
    pub startup_calibration: Option<CalibrationReport>,
    pub stats: SessionStats,
    pub calibrations: Vec<CalibrationReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifact {
    pub summary: Summary,
    pub config_toml: String,
}

/// Simulates the scenario without touching the filesystem.
pub fn simulate(scenario: &Scenario) -> Result<RunArtifact, ScenarioError> {
    scenario.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let mut chain = scenario.build_chain(&mut rng)?;
    let config = scenario.session_config();
    let startup_calibration = if scenario.duration_s > 0.0 {
        Some(calibrate_all(
            &mut chain,
            &scenario.calibration,
            config.effective_clock_hz,
            &mut rng,
        )?)
    } else {
        None
    };
    let outcome = run_session(&config, &scenario.calibration, &mut chain, &mut rng)?;
    Ok(RunArtifact {
        summary: Summary {
            version: VERSION.to_string(),
            scenario: scenario.name.clone(),
            seed: scenario.seed,
            intrinsic_error: chain.intrinsic_error,
            mean_window_qber: outcome.stats.mean_window_qber(),
            startup_calibration,
            stats: outcome.stats,
            calibrations: outcome.calibrations,
        },
        config_toml: scenario.to_toml(),
    })
}

/// Simulates and writes `summary.json`, `qber_series.csv`, `config.toml`
/// and `qber.svg` into `out_dir`.
pub fn run(scenario: &Scenario, out_dir: impl AsRef<Path>) -> Result<RunArtifact, ScenarioError> {
    let artifact = simulate(scenario)?;
    write_artifact(&artifact, scenario.qber_threshold, out_dir.as_ref())?;
    Ok(artifact)
}

fn write_file(path: PathBuf, contents: &str) -> Result<(), ScenarioError> {
    fs::write(&path, contents).map_err(|source| ScenarioError::Io { path, source })
}

pub fn write_artifact(artifact: &RunArtifact, threshold: f64, out_dir: &Path) -> Result<(), ScenarioError> {
    fs::create_dir_all(out_dir).map_err(|source| ScenarioError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let json = serde_json::to_string_pretty(&artifact.summary).expect("summary serializes");
    write_file(out_dir.join("summary.json"), &(json + "\n"))?;
    write_file(
        out_dir.join("qber_series.csv"),
        &series_csv(&artifact.summary.stats.qber_series),
    )?;
    write_file(out_dir.join("config.toml"), &artifact.config_toml)?;
    write_file(
        out_dir.join("qber.svg"),
        &qber_svg(&artifact.summary.stats.qber_series, threshold),
    )
}

pub fn series_csv(series: &[QberPoint]) -> String {
    let mut out = String::from(SERIES_HEADER);
    out.push('\n');
    for p in series {
        writeln!(out, "{},{},{}", p.t_seconds, p.qber, p.window_sifted_bits).expect("write to string");
    }
    out
}

/// QBER-versus-time line plot with the recalibration threshold dashed.
pub fn qber_svg(series: &[QberPoint], threshold: f64) -> String {
    let (w, h, margin) = (720.0, 360.0, 50.0);
    let t_max = series.last().map_or(1.0, |p| p.t_seconds).max(1e-9);
    let q_max = series.iter().map(|p| p.qber).fold(threshold * 1.25, f64::max).max(1e-3);
    let x = |t: f64| margin + (w - 2.0 * margin) * t / t_max;
    let y = |q: f64| h - margin - (h - 2.0 * margin) * q / q_max;
    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
    writeln!(
        svg,
        r#"<path d="M{m} {m} V{b} H{r}" fill="none" stroke="black"/>"#,
        m = margin,
        b = h - margin,
        r = w - margin
    )
    .unwrap();
    writeln!(
        svg,
        r#"<line x1="{}" y1="{ty:.2}" x2="{}" y2="{ty:.2}" stroke="red" stroke-dasharray="6 4"/>"#,
        margin,
        w - margin,
        ty = y(threshold)
    )
    .unwrap();
    if !series.is_empty() {
        let points: Vec<String> = series
            .iter()
            .map(|p| format!("{:.2},{:.2}", x(p.t_seconds), y(p.qber)))
            .collect();
        writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="1.5"/>"#,
            points.join(" ")
        )
        .unwrap();
    }
    writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">time (s), 0 – {t_max:.0}</text>"#,
        w / 2.0,
        h - 15.0
    )
    .unwrap();
    writeln!(
        svg,
        r#"<text x="15" y="{}" transform="rotate(-90 15 {})" text-anchor="middle">QBER, 0 – {:.1}%</text>"#,
        h / 2.0,
        h / 2.0,
        q_max * 100.0
    )
    .unwrap();
    svg.push_str("</svg>\n");
    svg
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: String,
    pub sent: u64,
    pub sifted: u64,
    pub qber: f64,
    pub sifted_rate: f64,
    pub duty_cycle_data: f64,
    pub recalibrations: usize,
    pub mean_window_qber: Option<f64>,
}

fn set_dotted(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<(), ScenarioError> {
    let unknown = || ScenarioError::UnknownParameter(key.to_string());
    let mut node = root;
    let mut parts = key.split('.').peekable();
    while let Some(part) = parts.next() {
        let table = node.as_table_mut().ok_or_else(unknown)?;
        let slot = table.get_mut(part).ok_or_else(unknown)?;
        if parts.peek().is_none() {
            *slot = value;
            return Ok(());
        }
        node = slot;
    }
    Err(unknown())
}

fn parse_value(raw: &str) -> toml::Value {
    match raw {
        "on" => return toml::Value::Boolean(true),
        "off" => return toml::Value::Boolean(false),
        _ => {}
    }
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// The scenario with `param` (dotted for nested tables, e.g.
/// `pulse.compensation`) replaced by `raw`.
pub fn with_parameter(scenario: &Scenario, param: &str, raw: &str) -> Result<Scenario, ScenarioError> {
    let mut value = toml::Value::try_from(scenario).expect("scenario converts to TOML");
    set_dotted(&mut value, param, parse_value(raw))?;
    let edited: Scenario = value.try_into().map_err(|e: toml::de::Error| ScenarioError::Parse {
        origin: format!("{param} = {raw}"),
        message: e.to_string(),
    })?;
    edited.validate()?;
    Ok(edited)
}

/// One run per value, in parallel, each with the scenario's seed. Writes the
/// per-run artifacts under `out_dir/<param>=<value>/` and a `sweep.csv`.
pub fn sweep(
    scenario: &Scenario,
    param: &str,
    values: &[String],
    out_dir: impl AsRef<Path>,
) -> Result<Vec<SweepRow>, ScenarioError> {
    if values.is_empty() {
        return Err(ScenarioError::EmptyValues);
    }
    let scenarios = values
        .iter()
        .map(|v| with_parameter(scenario, param, v))
        .collect::<Result<Vec<_>, _>>()?;
    let out_dir = out_dir.as_ref();
    let rows = scenarios
        .par_iter()
        .zip(values.par_iter())
        .map(|(s, v)| {
            let art = run(s, out_dir.join(format!("{param}={v}")))?;
            let stats = &art.summary.stats;
            Ok(SweepRow {
                value: v.clone(),
                sent: stats.sent,
                sifted: stats.sifted,
                qber: stats.qber,
                sifted_rate: stats.sifted_rate,
                duty_cycle_data: stats.duty_cycle_data,
                recalibrations: stats.recalibrations,
                mean_window_qber: art.summary.mean_window_qber,
            })
        })
        .collect::<Result<Vec<_>, ScenarioError>>()?;
    write_file(out_dir.join("sweep.csv"), &sweep_csv(param, &rows))?;
    Ok(rows)
}

pub fn sweep_csv(param: &str, rows: &[SweepRow]) -> String {
    let mut out =
        String::from("param,value,sent,sifted,qber,sifted_rate,duty_cycle_data,recalibrations,mean_window_qber\n");
    for r in rows {
        let quoted = if r.value.contains([',', '"']) {
            format!("\"{}\"", r.value.replace('"', "\"\""))
        } else {
            r.value.clone()
        };
        writeln!(
            out,
            "{param},{quoted},{},{},{},{},{},{},{}",
            r.sent,
            r.sifted,
            r.qber,
            r.sifted_rate,
            r.duty_cycle_data,
            r.recalibrations,
            r.mean_window_qber.map(|q| q.to_string()).unwrap_or_default()
        )
        .expect("write to string");
    }
    out
}
