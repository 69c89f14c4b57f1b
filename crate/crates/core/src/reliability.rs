//! Difference-arrival rate estimate and the stop/continue decision.
//!
//! Inter-difference times are modelled as exponential with rate λ.
//! λ̂ = (N−1)/ΣTᵢ, se(λ̂) = √(λ̂²/(N−2)) with λ̂ plugged in for λ, and
//! P(T > t) = e^(−λ̂·t).

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ReliabilityError {
    #[error("need at least {needed} observations, have {have}")]
    InsufficientData { needed: usize, have: usize },
    #[error("observation {index} is {value}; durations must be positive and finite")]
    InvalidDuration { index: usize, value: f64 },
    #[error("required time must be non-negative and finite, got {0}")]
    InvalidHorizon(f64),
    #[error("threshold must lie in [0, 1], got {0}")]
    InvalidThreshold(f64),
    #[error("observations file {path}: {message}")]
    File { path: String, message: String },
}

/// One line of the observations file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub run_index: u64,
    pub duration_seconds: f64,
    /// Differences classified as expected during the run, when recorded.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_differences: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ObservationLog {
    pub durations: Vec<f64>,
    pub expected_differences: u64,
}

impl ObservationLog {
    pub fn new(durations: Vec<f64>) -> Result<Self, ReliabilityError> {
        let log = ObservationLog {
            durations,
            expected_differences: 0,
        };
        log.validate()?;
        Ok(log)
    }

    pub fn len(&self) -> usize {
        self.durations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.durations.is_empty()
    }

    fn validate(&self) -> Result<(), ReliabilityError> {
        for (index, &value) in self.durations.iter().enumerate() {
            if !(value.is_finite() && value > 0.0) {
                return Err(ReliabilityError::InvalidDuration { index, value });
            }
        }
        Ok(())
    }

    /// Reads a JSON-lines observations file. Lines are taken in file order.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ReliabilityError> {
        let path = path.as_ref();
        let file_err = |message: String| ReliabilityError::File {
            path: path.display().to_string(),
            message,
        };
        let text = fs::read_to_string(path).map_err(|e| file_err(e.to_string()))?;
        let mut log = ObservationLog::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let obs: Observation = serde_json::from_str(line)
                .map_err(|e| file_err(format!("line {}: {e}", i + 1)))?;
            log.durations.push(obs.duration_seconds);
            log.expected_differences += obs.expected_differences.unwrap_or(0);
        }
        log.validate()?;
        Ok(log)
    }
}

/// Appends one observation line, creating the file if needed.
pub fn append_observation(path: impl AsRef<Path>, obs: &Observation) -> std::io::Result<()> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut line = serde_json::to_vec(obs).map_err(std::io::Error::other)?;
    line.push(b'\n');
    f.write_all(&line)
}

/// Number of runs already recorded in an observations file.
pub fn recorded_runs(path: impl AsRef<Path>) -> u64 {
    fs::read_to_string(path)
        .map(|t| t.lines().filter(|l| !l.trim().is_empty()).count() as u64)
        .unwrap_or(0)
}

pub fn estimate_lambda(obs: &ObservationLog) -> Result<f64, ReliabilityError> {
    obs.validate()?;
    let n = obs.len();
    if n < 2 {
        return Err(ReliabilityError::InsufficientData { needed: 2, have: n });
    }
    let total: f64 = obs.durations.iter().sum();
    Ok((n - 1) as f64 / total)
}

pub fn standard_error(lambda_hat: f64, n: usize) -> Result<f64, ReliabilityError> {
    if n < 3 {
        return Err(ReliabilityError::InsufficientData { needed: 3, have: n });
    }
    Ok((lambda_hat * lambda_hat / (n - 2) as f64).sqrt())
}

pub fn survival_probability(lambda_hat: f64, t_required: f64) -> Result<f64, ReliabilityError> {
    if !(t_required.is_finite() && t_required >= 0.0) {
        return Err(ReliabilityError::InvalidHorizon(t_required));
    }
    Ok((-lambda_hat * t_required).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Continue,
    Stop,
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Decision::Continue => "continue",
            Decision::Stop => "stop",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityEstimate {
    pub lambda_hat: f64,
    pub standard_error: Option<f64>,
    pub t_required: f64,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionReport {
    pub observations: usize,
    pub total_seconds: f64,
    #[serde(flatten)]
    pub estimate: ReliabilityEstimate,
    pub threshold: f64,
    pub decision: Decision,
    /// P at λ̂ − se and λ̂ + se; the lower rate is clamped at zero.
    pub sensitivity: Option<(f64, f64)>,
    pub expected_differences: u64,
}

pub fn decision_report(obs: &ObservationLog, t_required: f64, threshold: f64) -> Result<DecisionReport, ReliabilityError> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(ReliabilityError::InvalidThreshold(threshold));
    }
    let lambda_hat = estimate_lambda(obs)?;
    let probability = survival_probability(lambda_hat, t_required)?;
    let se = standard_error(lambda_hat, obs.len()).ok();
    let sensitivity = match se {
        Some(se) => Some((
            survival_probability((lambda_hat - se).max(0.0), t_required)?,
            survival_probability(lambda_hat + se, t_required)?,
        )),
        None => None,
    };
    Ok(DecisionReport {
        observations: obs.len(),
        total_seconds: obs.durations.iter().sum(),
        estimate: ReliabilityEstimate {
            lambda_hat,
            standard_error: se,
            t_required,
            probability,
        },
        threshold,
        decision: if probability >= threshold {
            Decision::Stop
        } else {
            Decision::Continue
        },
        sensitivity,
        expected_differences: obs.expected_differences,
    })
}

fn human(seconds: f64) -> String {
    if seconds.is_finite() && seconds >= 0.0 && seconds < 1e12 {
        let d = std::time::Duration::from_secs_f64(seconds);
        let rounded = std::time::Duration::from_millis(d.as_millis() as u64);
        if rounded.is_zero() {
            return format!("{seconds}s");
        }
        humantime::format_duration(rounded).to_string()
    } else {
        format!("{seconds}s")
    }
}

impl fmt::Display for DecisionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let e = &self.estimate;
        writeln!(f, "observations:        {} (total {})", self.observations, human(self.total_seconds))?;
        writeln!(f, "lambda_hat:          {:.6} per second", e.lambda_hat)?;
        match e.standard_error {
            Some(se) => writeln!(f, "standard_error:      {se:.6} (plug-in, lambda_hat for lambda)")?,
            None => writeln!(f, "standard_error:      unavailable (needs at least 3 observations)")?,
        }
        writeln!(f, "t_required:          {} ({}s)", human(e.t_required), e.t_required)?;
        writeln!(f, "P(T > t_required):   {:.4}", e.probability)?;
        writeln!(f, "threshold:           {}", self.threshold)?;
        writeln!(f, "verdict:             {}", self.decision)?;
        if let Some((lo, hi)) = self.sensitivity {
            writeln!(f, "sensitivity:         P = {lo:.4} at lambda_hat - se, {hi:.4} at lambda_hat + se")?;
        }
        write!(f, "expected_differences: {}", self.expected_differences)
    }
}
