//! Task recognition (y) against demo similarity (x).

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::backend::{CaptureRequest, LanguageModel};
use crate::error::{Error, Result};
use crate::lens::{rank_profile, LogitLens, ProfileRecord, TaskToken};
use crate::prompt::{locate_label_positions, PromptSpec};
use crate::similarity::{demo_similarity, Embedder, SimilarityScore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    pub tau_y: f64,
    pub tau_x: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { tau_y: 0.05, tau_x: 0.5 }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        for (name, value) in [("tau_y", self.tau_y), ("tau_x", self.tau_x)] {
            if !(value > 0.0 && value < 1.0) {
                return Err(Error::ThresholdOutOfRange { name, value });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Quadrant {
    Q1,
    Q2,
    Q3,
    Q4,
}

impl Quadrant {
    /// Zero counts as negative on both axes.
    pub fn of(x: f64, y: f64) -> Self {
        match (x > 0.0, y > 0.0) {
            (true, true) => Quadrant::Q1,
            (false, true) => Quadrant::Q2,
            (false, false) => Quadrant::Q3,
            (true, false) => Quadrant::Q4,
        }
    }
}

impl fmt::Display for Quadrant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coordinate {
    pub x: f64,
    pub y: f64,
    pub quadrant: Quadrant,
    pub raw_pir: f64,
    pub raw_sim: f64,
    pub thresholds: Thresholds,
}

/// Piecewise-linear map of `[0,1]` onto `[-1,1]` sending `tau` to 0.
pub fn rescale(raw: f64, tau: f64) -> f64 {
    if raw >= tau {
        (raw - tau) / (1.0 - tau)
    } else {
        (raw - tau) / tau
    }
}

pub fn place(raw_pir: f64, raw_sim: f64, thresholds: Thresholds) -> Result<Coordinate> {
    thresholds.validate()?;
    if !(raw_pir > 0.0 && raw_pir <= 1.0) {
        return Err(Error::OutOfRange(format!("raw_pir {raw_pir} outside (0, 1]")));
    }
    if !(0.0..=1.0).contains(&raw_sim) {
        return Err(Error::OutOfRange(format!("raw_sim {raw_sim} outside [0, 1]")));
    }
    let y = rescale(raw_pir, thresholds.tau_y);
    let x = rescale(raw_sim, thresholds.tau_x);
    Ok(Coordinate {
        x,
        y,
        quadrant: Quadrant::of(x, y),
        raw_pir,
        raw_sim,
        thresholds,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Evidence {
    pub profiles: Vec<ProfileRecord>,
    pub similarities: Vec<SimilarityScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadrantReport {
    pub x: f64,
    pub y: f64,
    pub quadrant: Quadrant,
    pub raw_pir: f64,
    pub raw_sim: f64,
    pub thresholds: Thresholds,
    pub evidence: Evidence,
}

impl QuadrantReport {
    pub fn coordinate(&self) -> Coordinate {
        Coordinate {
            x: self.x,
            y: self.y,
            quadrant: self.quadrant,
            raw_pir: self.raw_pir,
            raw_sim: self.raw_sim,
            thresholds: self.thresholds,
        }
    }
}

/// Rank profiles of `task_token` at the final sub-token of every demo label.
pub fn demo_label_profiles(
    spec: &PromptSpec,
    task_token: &TaskToken,
    model: &dyn LanguageModel,
) -> Result<Vec<ProfileRecord>> {
    let tokens = model.tokenize(&spec.render()?)?;
    let positions = locate_label_positions(spec, &tokens, model.tokenizer())?;
    let capture = model.forward_capture(&tokens, &CaptureRequest::at(positions.demo_labels.iter().copied()))?;
    let lens = LogitLens::for_model(model);
    positions
        .demo_labels
        .iter()
        .map(|&p| rank_profile(&capture, &lens, p, task_token)?.record())
        .collect()
}

/// Places one prompt: the best PIR over its demo label positions against
/// the highest demo similarity.
pub fn diagnose(
    spec: &PromptSpec,
    task_token: &TaskToken,
    model: &dyn LanguageModel,
    embedder: Option<&dyn Embedder>,
    thresholds: Thresholds,
) -> Result<QuadrantReport> {
    thresholds.validate()?;
    if spec.demos.is_empty() {
        return Err(Error::EmptyInput("demonstrations"));
    }
    let profiles = demo_label_profiles(spec, task_token, model)?;
    let raw_pir = profiles.iter().map(|p| p.pir).fold(0.0, f64::max);
    let sim = demo_similarity(&spec.test_input, spec, embedder)?;
    let c = place(raw_pir, sim.prompt_max, thresholds)?;
    Ok(QuadrantReport {
        x: c.x,
        y: c.y,
        quadrant: c.quadrant,
        raw_pir,
        raw_sim: c.raw_sim,
        thresholds,
        evidence: Evidence {
            profiles,
            similarities: sim.scores,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boundary_is_q3() {
        let c = place(0.05, 0.5, Thresholds::default()).unwrap();
        assert_eq!((c.x, c.y), (0.0, 0.0));
        assert_eq!(c.quadrant, Quadrant::Q3);
    }

    #[test]
    fn saturated_is_q1() {
        let c = place(1.0, 1.0, Thresholds::default()).unwrap();
        assert_eq!((c.x, c.y, c.quadrant), (1.0, 1.0, Quadrant::Q1));
    }

    #[test]
    fn partial_recognition_is_positive() {
        let c = place(0.083, 0.0, Thresholds::default()).unwrap();
        assert!((c.y - 0.033 / 0.95).abs() < 1e-12);
        assert!(c.y > 0.0);
        assert_eq!(c.x, -1.0);
        assert_eq!(c.quadrant, Quadrant::Q2);
    }

    #[test]
    fn bad_inputs() {
        let t = Thresholds { tau_y: 1.0, tau_x: 0.5 };
        assert!(matches!(place(0.5, 0.5, t), Err(Error::ThresholdOutOfRange { name: "tau_y", .. })));
        assert!(place(0.0, 0.5, Thresholds::default()).is_err());
        assert!(place(0.5, 1.1, Thresholds::default()).is_err());
    }

    #[test]
    fn quadrant_signs() {
        assert_eq!(Quadrant::of(0.1, -0.1), Quadrant::Q4);
        assert_eq!(Quadrant::of(-0.1, 0.1), Quadrant::Q2);
        assert_eq!(Quadrant::of(0.0, 0.1), Quadrant::Q2);
    }
}
