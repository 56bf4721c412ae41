//! Direct simulation of stroboscopic detection.
//!
//! Between measurements the walker evolves with `U(tau)`; each measurement
//! either detects it on the detector sites or projects it onto the
//! complement. The propagator here is built by Taylor scaling-and-squaring
//! of `-i H tau` and shares nothing with the spectral code, so the series
//! serves as an independent check of the other methods.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Detector, InitialState, WalkModel};
use crate::numerics::{ComplexMatrix, ComplexVector, C64, ZERO};
use crate::output::fmt_g;

/// Number of consecutive sub-tolerance increments that ends a series early.
pub const CONVERGENCE_WINDOW: usize = 100;
pub const DEFAULT_N_MAX: usize = 10_000;
pub const DEFAULT_CONV_TOL: f64 = 1e-8;
/// Below this truncated `P_det` the mean measurement count is undefined.
pub const PDET_FLOOR: f64 = 1e-10;

/// `exp(-i H tau)` by scaling and squaring of a truncated Taylor series.
pub fn direct_propagator(hamiltonian: &ComplexMatrix, tau: f64) -> Result<ComplexMatrix> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidTau(tau));
    }
    if !hamiltonian.is_square() {
        return Err(Error::DimensionMismatch("Hamiltonian must be square".into()));
    }
    let n = hamiltonian.nrows();
    let a = hamiltonian * C64::new(0.0, -tau);
    let norm1 = (0..n)
        .map(|j| a.column(j).iter().map(|z| z.norm()).sum::<f64>())
        .fold(0.0, f64::max);
    let squarings = if norm1 > 0.5 {
        (norm1 / 0.5).log2().ceil() as u32
    } else {
        0
    };
    let scaled = a.unscale(2f64.powi(squarings as i32));

    let mut result = ComplexMatrix::identity(n, n);
    let mut term = ComplexMatrix::identity(n, n);
    for k in 1..=30 {
        term = &term * &scaled / C64::new(k as f64, 0.0);
        result += &term;
        if term.iter().all(|z| z.norm() < 1e-18) {
            break;
        }
    }
    for _ in 0..squarings {
        result = &result * &result;
    }
    Ok(result)
}

/// `(I - D) U`
pub fn survival_operator(det: &Detector, u: &ComplexMatrix) -> Result<ComplexMatrix> {
    if u.shape() != (det.size(), det.size()) {
        return Err(Error::DimensionMismatch(format!(
            "unitary {:?} for detector on {} sites",
            u.shape(),
            det.size()
        )));
    }
    let mut s = u.clone();
    for &d in det.sites() {
        s.row_mut(d).fill(ZERO);
    }
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeriesOptions {
    pub n_max: usize,
    /// Zero disables early stopping.
    pub conv_tol: f64,
}

impl Default for SeriesOptions {
    fn default() -> Self {
        SeriesOptions {
            n_max: DEFAULT_N_MAX,
            conv_tol: DEFAULT_CONV_TOL,
        }
    }
}

impl SeriesOptions {
    pub fn fixed(n_max: usize) -> Self {
        SeriesOptions { n_max, conv_tol: 0.0 }
    }
}

/// First-detection probabilities `F_n` and survival probabilities `S_n`, `n = 1..len`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FnSeries {
    pub tau: f64,
    pub f: Vec<f64>,
    pub s: Vec<f64>,
    pub partial_pdet: Vec<f64>,
    pub n_max: usize,
    pub converged: bool,
    pub conv_tol: f64,
}

impl FnSeries {
    pub fn len(&self) -> usize {
        self.f.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,F_n,S_n,cumulative\n");
        for i in 0..self.f.len() {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                i + 1,
                fmt_g(self.f[i]),
                fmt_g(self.s[i]),
                fmt_g(self.partial_pdet[i])
            );
        }
        out
    }
}

/// Iterates the measurement protocol with the model's Hamiltonian.
pub fn fn_series(
    model: &WalkModel,
    det: &Detector,
    phi0: &InitialState,
    tau: f64,
    opts: SeriesOptions,
) -> Result<FnSeries> {
    let u = direct_propagator(model.hamiltonian(), tau)?;
    fn_series_with_unitary(&u, det, phi0, tau, opts)
}

/// Iterates `|phi(n)> = U [(I - D) U]^{n-1} |phi(0)>` one matrix-vector
/// product per step.
///
/// With a positive `conv_tol` the series stops once `CONVERGENCE_WINDOW`
/// consecutive `F_n` fall below it. The window only opens after the first
/// `F_n >= conv_tol`, so a slow start at small `tau` is not mistaken for
/// convergence.
pub fn fn_series_with_unitary(
    u: &ComplexMatrix,
    det: &Detector,
    phi0: &InitialState,
    tau: f64,
    opts: SeriesOptions,
) -> Result<FnSeries> {
    let dim = det.size();
    if u.shape() != (dim, dim) || phi0.dim() != dim {
        return Err(Error::DimensionMismatch(format!(
            "unitary {:?}, state of dimension {}, detector on {dim} sites",
            u.shape(),
            phi0.dim()
        )));
    }
    if opts.n_max == 0 {
        return Err(Error::InvalidSize {
            kind: "series",
            size: 0,
            min: 1,
        });
    }

    let mut psi: ComplexVector = phi0.vector().clone();
    let mut f = Vec::with_capacity(opts.n_max.min(1 << 20));
    let mut s = Vec::with_capacity(f.capacity());
    let mut partial = Vec::with_capacity(f.capacity());
    let mut cumulative = 0.0;
    let mut armed = false;
    let mut quiet = 0usize;
    let mut converged = false;

    for _ in 0..opts.n_max {
        let mut phi = u * &psi;
        let mut fn_ = 0.0;
        for &d in det.sites() {
            fn_ += phi[d].norm_sqr();
            phi[d] = ZERO;
        }
        psi = phi;
        cumulative += fn_;
        f.push(fn_);
        s.push(psi.norm_squared());
        partial.push(cumulative);

        if opts.conv_tol > 0.0 {
            if fn_ >= opts.conv_tol {
                armed = true;
                quiet = 0;
            } else if armed {
                quiet += 1;
                if quiet >= CONVERGENCE_WINDOW {
                    converged = true;
                    break;
                }
            }
        }
    }

    Ok(FnSeries {
        tau,
        f,
        s,
        partial_pdet: partial,
        n_max: opts.n_max,
        converged,
        conv_tol: opts.conv_tol,
    })
}

/// `sum_n F_n` over the computed range.
pub fn pdet_truncated(series: &FnSeries) -> f64 {
    series.partial_pdet.last().copied().unwrap_or(0.0)
}

/// `sum_n n F_n / sum_n F_n` over the computed range.
pub fn nbar_truncated(series: &FnSeries) -> Result<f64> {
    let p = pdet_truncated(series);
    if p <= PDET_FLOOR {
        return Err(Error::UndefinedForDarkState);
    }
    let weighted: f64 = series
        .f
        .iter()
        .enumerate()
        .map(|(i, fi)| (i + 1) as f64 * fi)
        .sum();
    Ok(weighted / p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_detector, build_nn, evolution};
    use crate::numerics::{max_abs_diff, real_matrix};

    #[test]
    fn propagator_matches_spectral_unitary() {
        let m = build_nn(10, 1.0).unwrap();
        for tau in [0.1, 1.0, 7.3] {
            let direct = direct_propagator(m.hamiltonian(), tau).unwrap();
            let spectral = evolution(&m, tau).unwrap().matrix;
            assert!(max_abs_diff(&direct, &spectral) < 1e-12, "tau={tau}");
        }
    }

    #[test]
    fn propagator_of_diagonal() {
        let h = real_matrix(2, 2, &[1.0, 0.0, 0.0, -3.0]);
        let u = direct_propagator(&h, 2.0).unwrap();
        assert!((u[(0, 0)] - C64::from_polar(1.0, -2.0)).norm() < 1e-14);
        assert!((u[(1, 1)] - C64::from_polar(1.0, 6.0)).norm() < 1e-14);
        assert!(matches!(direct_propagator(&h, 0.0), Err(Error::InvalidTau(_))));
    }

    #[test]
    fn survival_operator_examples() {
        let det = build_detector(4, &[0]).unwrap();
        let s = survival_operator(&det, &ComplexMatrix::identity(4, 4)).unwrap();
        assert!(max_abs_diff(&s, &det.complement()) < 1e-15);

        let big = build_detector(4, &[0, 1, 2]).unwrap();
        let u = evolution(&build_nn(4, 1.0).unwrap(), 0.7).unwrap().matrix;
        let s = survival_operator(&big, &u).unwrap();
        assert!(crate::numerics::svd_rank(&s, 1e-12) <= 1);
        assert!(crate::numerics::singular_values(&s)[0] <= 1.0 + 1e-12);

        assert!(survival_operator(&det, &ComplexMatrix::identity(3, 3)).is_err());
    }

    #[test]
    fn first_return_step() {
        let m = build_nn(10, 1.0).unwrap();
        let det = build_detector(10, &[0]).unwrap();
        let phi = InitialState::localized(10, 0).unwrap();
        let series = fn_series(&m, &det, &phi, 1.0, SeriesOptions::fixed(5)).unwrap();
        let u = direct_propagator(m.hamiltonian(), 1.0).unwrap();
        assert!((series.f[0] - u[(0, 0)].norm_sqr()).abs() < 1e-15);
        for i in 0..series.len() {
            assert!((series.s[i] + series.partial_pdet[i] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn return_problem_mean() {
        let m = build_nn(10, 1.0).unwrap();
        let phi = InitialState::localized(10, 0).unwrap();
        let single = build_detector(10, &[0]).unwrap();
        let series = fn_series(&m, &single, &phi, 1.0, SeriesOptions::fixed(100_000)).unwrap();
        assert!((nbar_truncated(&series).unwrap() - 6.0).abs() < 5e-2);
        let pair = build_detector(10, &[0, 1]).unwrap();
        let series = fn_series(&m, &pair, &phi, 1.0, SeriesOptions::fixed(100_000)).unwrap();
        assert!((nbar_truncated(&series).unwrap() - 5.0).abs() < 5e-2);
    }

    #[test]
    fn truncated_half_detection() {
        let m = build_nn(10, 1.0).unwrap();
        let det = build_detector(10, &[0]).unwrap();
        let phi = InitialState::localized(10, 3).unwrap();
        let series = fn_series(&m, &det, &phi, 1.0, SeriesOptions::default()).unwrap();
        let p = pdet_truncated(&series);
        assert!(p <= 0.5 + 1e-9 && 0.5 - p < 1e-2, "p={p}");
    }

    #[test]
    fn dark_start_is_undefined() {
        let m = build_nn(10, 1.0).unwrap();
        let det = build_detector(10, &[0]).unwrap();
        let e1 = crate::model::plane_wave(10, 1);
        let e9 = crate::model::plane_wave(10, 9);
        let dark = InitialState::normalized(&e1 - &e9).unwrap();
        let series = fn_series(&m, &det, &dark, 1.0, SeriesOptions::fixed(500)).unwrap();
        assert!(series.f.iter().all(|&x| x < 1e-12));
        assert!(pdet_truncated(&series) < 1e-9);
        assert_eq!(nbar_truncated(&series), Err(Error::UndefinedForDarkState));
    }

    #[test]
    fn early_stop_waits_for_first_detection() {
        let m = build_nn(10, 1.0).unwrap();
        let det = build_detector(10, &[0]).unwrap();
        let phi = InitialState::localized(10, 5).unwrap();
        let opts = SeriesOptions {
            n_max: 100_000,
            conv_tol: 1e-8,
        };
        let series = fn_series(&m, &det, &phi, 0.01, opts).unwrap();
        assert!(series.len() > CONVERGENCE_WINDOW);
        assert!(pdet_truncated(&series) > 0.5);
    }

    #[test]
    fn csv_layout() {
        let m = build_nn(4, 1.0).unwrap();
        let det = build_detector(4, &[0]).unwrap();
        let phi = InitialState::localized(4, 0).unwrap();
        let csv = fn_series(&m, &det, &phi, 1.0, SeriesOptions::fixed(3)).unwrap().to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "n,F_n,S_n,cumulative");
        assert_eq!(lines.len(), 4);
        assert!(lines[3].starts_with("3,"));
    }
}
