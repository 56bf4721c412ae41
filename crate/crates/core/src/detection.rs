//! Total detection probability from the dark/bright decomposition.
//!
//! The bright subspace is detected with certainty and the dark subspace is
//! never detected, so `P_det = <phi|P_bright|phi> = 1 - <phi|P_dark|phi>`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{InitialState, WalkModel};
use crate::spectral::{levels_of, Classification};

/// Allowed overshoot outside `[0, 1]` before a probability is clamped.
pub const PROBABILITY_SLACK: f64 = 1e-9;
/// Levels with `<d|E_k|d>` below this carry no weight on the detector site.
pub const RANK1_DENOMINATOR_FLOOR: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelOverlap {
    pub level: usize,
    pub energy: f64,
    /// `|<eta_k^j|phi>|^2` for each bright vector of the level.
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectralDetectionResult {
    pub p_det: f64,
    pub p_sur: f64,
    pub overlaps: Vec<LevelOverlap>,
    pub method: &'static str,
}

fn clamp_probability(p: f64) -> f64 {
    debug_assert!(
        (-PROBABILITY_SLACK..=1.0 + PROBABILITY_SLACK).contains(&p),
        "probability {p} outside [0, 1]"
    );
    p.clamp(0.0, 1.0)
}

fn check_dim(c: &Classification, phi0: &InitialState) -> Result<()> {
    if c.dim() != phi0.dim() {
        return Err(Error::DimensionMismatch(format!(
            "initial state of dimension {}, classification of dimension {}",
            phi0.dim(),
            c.dim()
        )));
    }
    Ok(())
}

fn bright_overlaps(c: &Classification, phi0: &InitialState) -> Vec<LevelOverlap> {
    c.levels
        .iter()
        .map(|l| LevelOverlap {
            level: l.level,
            energy: l.energy,
            weights: l.bright.iter().map(|b| b.dotc(phi0.vector()).norm_sqr()).collect(),
        })
        .collect()
}

/// `P_det` as the total weight of the initial state on the bright states.
pub fn pdet_bright(c: &Classification, phi0: &InitialState) -> Result<SpectralDetectionResult> {
    check_dim(c, phi0)?;
    let overlaps = bright_overlaps(c, phi0);
    let p = clamp_probability(overlaps.iter().flat_map(|o| o.weights.iter()).sum());
    Ok(SpectralDetectionResult {
        p_det: p,
        p_sur: 1.0 - p,
        overlaps,
        method: "spectral",
    })
}

/// `P_det` as one minus the weight of the initial state on the dark states.
pub fn pdet_dark(c: &Classification, phi0: &InitialState) -> Result<SpectralDetectionResult> {
    check_dim(c, phi0)?;
    let dark_weight: f64 = c.dark_states().map(|z| z.dotc(phi0.vector()).norm_sqr()).sum();
    let p = clamp_probability(1.0 - dark_weight);
    Ok(SpectralDetectionResult {
        p_det: p,
        p_sur: 1.0 - p,
        overlaps: bright_overlaps(c, phi0),
        method: "spectral",
    })
}

/// `sum_k |<s|E_k|d>|^2 / <d|E_k|d>` for a single detector site `d` and a
/// localized initial state `s`.
pub fn pdet_rank1_closed_form(model: &WalkModel, d: usize, s: usize) -> Result<f64> {
    if !model.has_analytic_spectrum() {
        return Err(Error::Unsupported(
            "rank-one closed form needs a built-in ring model".into(),
        ));
    }
    let size = model.size();
    for site in [d, s] {
        if site >= size {
            return Err(Error::SiteOutOfRange { site, size });
        }
    }
    let spectrum = model.spectrum()?;
    let p: f64 = levels_of(&spectrum)
        .iter()
        .filter_map(|l| {
            let denom = l.projector[(d, d)].re;
            (denom >= RANK1_DENOMINATOR_FLOOR).then(|| l.projector[(s, d)].norm_sqr() / denom)
        })
        .sum();
    Ok(clamp_probability(p))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BrightCoefficient {
    pub level: usize,
    pub j: usize,
    pub re: f64,
    pub im: f64,
}

impl BrightCoefficient {
    pub fn weight(&self) -> f64 {
        self.re * self.re + self.im * self.im
    }
}

/// Nonzero coefficients `<eta_k^j|phi>` of the initial state on the bright basis.
pub fn bright_expansion(c: &Classification, phi0: &InitialState) -> Vec<BrightCoefficient> {
    const NEGLIGIBLE: f64 = 1e-14;
    let mut out = Vec::new();
    for l in &c.levels {
        for (j, b) in l.bright.iter().enumerate() {
            let z = b.dotc(phi0.vector());
            if z.norm() > NEGLIGIBLE {
                out.push(BrightCoefficient {
                    level: l.level,
                    j,
                    re: z.re,
                    im: z.im,
                });
            }
        }
    }
    out
}
