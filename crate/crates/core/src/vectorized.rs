//! Closed-form detection statistics on the vectorized (`L^2`-dimensional) space.
//!
//! In the energy eigenbasis `{|e_p>}` the protocol is carried by diagonal
//! matrices: `S = diag(<e_p|phi0>)`, `T_j = diag(<e_p|d_j>)`, `U = diag(exp(-i e_p tau))`,
//! the all-ones `W`, and `C = I - sum_j T_j W T_j^*`, which is `I - D` written
//! in the energy basis. With `X̄ = X^* ⊗ X` and `𝓛 = I - Ū C̄`:
//!
//! ```text
//! F_n   = sum_i Tr[(Ū C̄)^{n-1} Ū S̄ W̄ T̄_i^*]
//! P_det = sum_i Tr[𝓛⁺ Ū S̄ W̄ T̄_i^*]
//! n̄     = sum_i Tr[𝓛⁺² Ū S̄ W̄ T̄_i^*] / P_det
//! ```
//!
//! `W̄` has rank one, so every trace collapses to `yᵀ A x` with
//! `x = conj(u∘s) ⊗ (u∘s)` and `y = sum_i t_i ⊗ conj(t_i)`; nothing larger
//! than a matrix-vector product is formed per term.

use std::f64::consts::TAU;
use std::fmt::Write as _;
use std::sync::{Arc, OnceLock};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Detector, InitialState, Spectrum, WalkModel};
use crate::numerics::{
    kron, pseudoinverse, ComplexMatrix, ComplexVector, C64, DEFAULT_RANK_TOL, ONE,
};
use crate::output::fmt_g;
use crate::spectral::default_group_tol;

/// Distance to a critical time inside which divergence is tested.
pub const CRITICAL_DELTA: f64 = 1e-9;
/// `|n̄|` beyond which a probed critical time counts as divergent.
pub const DIVERGENCE_THRESHOLD: f64 = 1e6;
/// Offset from a critical time at which `n̄` is probed.
pub const DIVERGENCE_PROBE_OFFSET: f64 = 3e-5;
/// Smallest measurement period accepted by [`nbar_profile`].
pub const ZENO_TAU_MIN: f64 = 1e-3;
/// `n̄(tau_min / 2) / n̄(tau_min)` above this flags the Zeno divergence.
pub const ZENO_RATIO: f64 = 2.0;
pub const IMAG_RESIDUE_TOL: f64 = 1e-8;
/// Below this `P_det` the mean measurement count is undefined.
pub const PDET_FLOOR: f64 = 1e-10;
const CRITICAL_DEDUP_TOL: f64 = 1e-9;

/// Everything that depends on the model, detector and period but not on the initial state.
#[derive(Debug)]
struct Core {
    tau: f64,
    energies: Vec<f64>,
    vectors: ComplexMatrix,
    sites: Vec<usize>,
    u: ComplexVector,
    /// `t_i[p] = <e_p|d_i>`
    t: Vec<ComplexVector>,
    c: ComplexMatrix,
    /// `Ū C̄`
    propagator: ComplexMatrix,
    y: ComplexVector,
    lop: ComplexMatrix,
    pinv: OnceLock<ComplexMatrix>,
}

fn bar(m: &ComplexMatrix) -> ComplexMatrix {
    kron(&m.map(|z| z.conj()), m)
}

fn kron_vec(a: &ComplexVector, b: &ComplexVector) -> ComplexVector {
    ComplexVector::from_iterator(a.len() * b.len(), a.iter().flat_map(|ai| b.iter().map(move |bj| ai * bj)))
}

impl Core {
    fn new(energies: &[f64], vectors: &ComplexMatrix, sites: &[usize], tau: f64, shift: f64) -> Self {
        let dim = energies.len();
        let u = ComplexVector::from_iterator(dim, energies.iter().map(|&e| C64::from_polar(1.0, -e * tau)));
        let t: Vec<ComplexVector> = sites
            .iter()
            .map(|&d| vectors.row(d).transpose().map(|z| z.conj()))
            .collect();
        let mut c = ComplexMatrix::identity(dim, dim);
        for ti in &t {
            c -= ti * ti.adjoint();
        }
        let mut uc = c.clone();
        for (p, up) in u.iter().enumerate() {
            for q in 0..dim {
                uc[(p, q)] *= up;
            }
        }
        let propagator = bar(&uc);
        let mut y = ComplexVector::zeros(dim * dim);
        for ti in &t {
            y += kron_vec(ti, &ti.map(|z| z.conj()));
        }
        let mut lop = ComplexMatrix::identity(dim * dim, dim * dim) - &propagator;
        if shift != 0.0 {
            for i in 0..dim * dim {
                lop[(i, i)] += C64::new(shift, 0.0);
            }
        }
        Core {
            tau,
            energies: energies.to_vec(),
            vectors: vectors.clone(),
            sites: sites.to_vec(),
            u,
            t,
            c,
            propagator,
            y,
            lop,
            pinv: OnceLock::new(),
        }
    }

    fn pinv(&self) -> &ComplexMatrix {
        self.pinv.get_or_init(|| pseudoinverse(&self.lop, DEFAULT_RANK_TOL))
    }
}

/// Vectorized operators for one `(model, detector, tau)` and one initial state.
///
/// Cloning or swapping the initial state shares the state-independent part,
/// including the cached pseudoinverse of `𝓛`.
#[derive(Debug, Clone)]
pub struct VectorizedOperators {
    core: Arc<Core>,
    s: ComplexVector,
    x: ComplexVector,
}

/// Builds the operators from the model spectrum (analytic for the ring models).
pub fn build_operators(
    model: &WalkModel,
    det: &Detector,
    phi0: &InitialState,
    tau: f64,
) -> Result<VectorizedOperators> {
    let spectrum = model.spectrum()?;
    VectorizedOperators::from_spectrum(&spectrum, det, phi0, tau)
}

impl VectorizedOperators {
    pub fn from_spectrum(
        spectrum: &Spectrum,
        det: &Detector,
        phi0: &InitialState,
        tau: f64,
    ) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::InvalidTau(tau));
        }
        if det.size() != spectrum.dim() {
            return Err(Error::DimensionMismatch(format!(
                "detector on {} sites, spectrum of dimension {}",
                det.size(),
                spectrum.dim()
            )));
        }
        let core = Core::new(&spectrum.energies, &spectrum.vectors, det.sites(), tau, 0.0);
        Self::with_core(Arc::new(core), phi0)
    }

    fn with_core(core: Arc<Core>, phi0: &InitialState) -> Result<Self> {
        let dim = core.energies.len();
        if phi0.dim() != dim {
            return Err(Error::DimensionMismatch(format!(
                "initial state of dimension {}, operators of dimension {dim}",
                phi0.dim()
            )));
        }
        let s = core.vectors.ad_mul(phi0.vector());
        let us = s.component_mul(&core.u);
        let x = kron_vec(&us.map(|z| z.conj()), &us);
        Ok(VectorizedOperators { core, s, x })
    }

    /// Same model, detector and period with a different initial state.
    pub fn with_initial_state(&self, phi0: &InitialState) -> Result<Self> {
        Self::with_core(Arc::clone(&self.core), phi0)
    }

    /// Rebuilds the state-independent part at another period.
    pub fn at_tau(&self, tau: f64) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::InvalidTau(tau));
        }
        let c = &self.core;
        let core = Core::new(&c.energies, &c.vectors, &c.sites, tau, 0.0);
        let phi0 = InitialState::from_vector(&c.vectors * &self.s)
            .or_else(|_| InitialState::normalized(&c.vectors * &self.s))?;
        Self::with_core(Arc::new(core), &phi0)
    }

    /// Copy with `𝓛` shifted by `shift * I`; used to check that verification catches a corrupted operator.
    #[doc(hidden)]
    pub fn with_shifted_lop(&self, shift: f64) -> Self {
        let c = &self.core;
        let core = Core::new(&c.energies, &c.vectors, &c.sites, c.tau, shift);
        VectorizedOperators {
            core: Arc::new(core),
            s: self.s.clone(),
            x: self.x.clone(),
        }
    }

    pub fn tau(&self) -> f64 {
        self.core.tau
    }

    pub fn dim(&self) -> usize {
        self.core.energies.len()
    }

    pub fn energies(&self) -> &[f64] {
        &self.core.energies
    }

    pub fn s_matrix(&self) -> ComplexMatrix {
        ComplexMatrix::from_diagonal(&self.s)
    }

    pub fn w_matrix(&self) -> ComplexMatrix {
        DMatrix::from_element(self.dim(), self.dim(), ONE)
    }

    pub fn t_matrices(&self) -> Vec<ComplexMatrix> {
        self.core.t.iter().map(ComplexMatrix::from_diagonal).collect()
    }

    pub fn u_matrix(&self) -> ComplexMatrix {
        ComplexMatrix::from_diagonal(&self.core.u)
    }

    pub fn c_matrix(&self) -> &ComplexMatrix {
        &self.core.c
    }

    /// `𝓛 = I - Ū C̄`
    pub fn lop(&self) -> &ComplexMatrix {
        &self.core.lop
    }

    pub fn lop_pinv(&self) -> &ComplexMatrix {
        self.core.pinv()
    }

    /// `Ū C̄`
    pub fn propagator(&self) -> &ComplexMatrix {
        &self.core.propagator
    }

    /// `Ū S̄ W̄ T̄_i^*` assembled from explicit Kronecker products.
    pub fn trace_term_matrix(&self, i: usize) -> ComplexMatrix {
        let t_conj = ComplexMatrix::from_diagonal(&self.core.t[i].map(|z| z.conj()));
        bar(&self.u_matrix()) * bar(&self.s_matrix()) * bar(&self.w_matrix()) * bar(&t_conj)
    }

    fn contract(&self, v: &ComplexVector) -> C64 {
        self.core.y.iter().zip(v.iter()).map(|(a, b)| a * b).sum()
    }
}

/// `F_n` for a single `n >= 1`.
pub fn fn_closed_form(ops: &VectorizedOperators, n: usize) -> f64 {
    assert!(n >= 1, "measurement index starts at 1");
    let mut v = ops.x.clone();
    for _ in 1..n {
        v = &ops.core.propagator * v;
    }
    ops.contract(&v).re
}

/// `F_1 .. F_{n_max}` by repeated application of `Ū C̄`.
pub fn fn_closed_form_series(ops: &VectorizedOperators, n_max: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n_max);
    let mut v = ops.x.clone();
    for n in 1..=n_max {
        if n > 1 {
            v = &ops.core.propagator * v;
        }
        out.push(ops.contract(&v).re);
    }
    out
}

fn pdet_complex(ops: &VectorizedOperators) -> (C64, ComplexVector) {
    let z = ops.lop_pinv() * &ops.x;
    (ops.contract(&z), z)
}

fn checked_real(z: C64, what: &str) -> Result<f64> {
    if z.im.abs() > IMAG_RESIDUE_TOL {
        return Err(Error::NumericalResidue(format!(
            "{what} has imaginary part {:.3e}",
            z.im
        )));
    }
    Ok(z.re)
}

/// Total detection probability from the pseudoinverse of `𝓛`.
pub fn pdet_matrix(ops: &VectorizedOperators) -> Result<f64> {
    let p = checked_real(pdet_complex(ops).0, "P_det")?;
    if !(-IMAG_RESIDUE_TOL..=1.0 + IMAG_RESIDUE_TOL).contains(&p) {
        return Err(Error::NumericalResidue(format!("P_det = {p} outside [0, 1]")));
    }
    Ok(p.clamp(0.0, 1.0))
}

/// `(P_det, n̄)` with no critical-time handling; `None` for `n̄` when `P_det` vanishes.
pub fn nbar_raw(ops: &VectorizedOperators) -> Result<(f64, Option<f64>)> {
    let (p, second) = traces(ops);
    let p = checked_real(p, "P_det")?;
    Ok((p, (p >= PDET_FLOOR).then(|| second.re / p)))
}

/// `(Tr[𝓛⁺ ..], Tr[𝓛⁺² ..])` as complex numbers.
fn traces(ops: &VectorizedOperators) -> (C64, C64) {
    let (p, z) = pdet_complex(ops);
    let second = ops.lop_pinv() * z;
    (p, ops.contract(&second))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Nbar {
    Finite { value: f64 },
    /// At a critical time where `n̄` blows up; `probe` is `max |n̄(tau_c ± h)|`.
    Divergent { tau_c: f64, probe: f64 },
    /// The initial state is never detected.
    Undefined,
}

impl Nbar {
    pub fn value(&self) -> Option<f64> {
        match self {
            Nbar::Finite { value } => Some(*value),
            _ => None,
        }
    }

    pub fn is_divergent(&self) -> bool {
        matches!(self, Nbar::Divergent { .. })
    }
}

fn distinct_energies(energies: &[f64]) -> Vec<f64> {
    let tol = default_group_tol(energies);
    let mut sorted = energies.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut out: Vec<f64> = Vec::new();
    for e in sorted {
        if out.last().map_or(true, |&last| e - last > tol) {
            out.push(e);
        }
    }
    out
}

/// Closest critical time to `tau` over all gaps of the spectrum.
fn nearest_critical(levels: &[f64], tau: f64) -> Option<f64> {
    let mut best: Option<f64> = None;
    for a in 0..levels.len() {
        for b in a + 1..levels.len() {
            let gap = levels[b] - levels[a];
            let n = (gap * tau / TAU).round().max(1.0);
            let tc = TAU * n / gap;
            if best.map_or(true, |bt| (tau - tc).abs() < (tau - bt).abs()) {
                best = Some(tc);
            }
        }
    }
    best
}

/// `max |n̄(tau_c ± h)|`, zero when the state is never detected.
///
/// Beside a divergent critical time `𝓛` is nearly singular and the traces
/// carry imaginary roundoff well above `IMAG_RESIDUE_TOL`; only their
/// magnitude matters here, so no residue check is applied.
pub fn divergence_probe(ops: &VectorizedOperators, tau_c: f64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for tau in [tau_c - DIVERGENCE_PROBE_OFFSET, tau_c + DIVERGENCE_PROBE_OFFSET] {
        let (p, second) = traces(&ops.at_tau(tau)?);
        if p.norm() < PDET_FLOOR {
            return Ok(0.0);
        }
        worst = worst.max((second / p).norm());
    }
    Ok(worst)
}

/// Mean number of measurements until detection, conditioned on detection.
///
/// Divergence is decided by two factors: `tau` lies within `CRITICAL_DELTA`
/// of a critical time and `n̄` probed just beside it exceeds
/// `DIVERGENCE_THRESHOLD`. Critical times that fail the probe report the
/// pseudoinverse value.
pub fn nbar_matrix(ops: &VectorizedOperators) -> Result<Nbar> {
    let levels = distinct_energies(ops.energies());
    if let Some(tc) = nearest_critical(&levels, ops.tau()) {
        if (tc - ops.tau()).abs() <= CRITICAL_DELTA {
            let probe = divergence_probe(ops, tc)?;
            if probe > DIVERGENCE_THRESHOLD {
                return Ok(Nbar::Divergent { tau_c: tc, probe });
            }
        }
    }
    Ok(match nbar_raw(ops)?.1 {
        Some(value) => Nbar::Finite { value },
        None => Nbar::Undefined,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CriticalPair {
    /// Index of the higher level among the distinct energies.
    pub upper: usize,
    pub lower: usize,
    pub n: u32,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CriticalTime {
    pub tau: f64,
    /// Every level pair and winding number generating this period.
    pub pairs: Vec<CriticalPair>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CriticalTimes {
    pub tau_max: f64,
    pub levels: Vec<f64>,
    pub entries: Vec<CriticalTime>,
}

impl CriticalTimes {
    pub fn taus(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.tau).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn nearest(&self, tau: f64) -> Option<f64> {
        self.entries
            .iter()
            .map(|e| e.tau)
            .min_by(|a, b| (a - tau).abs().total_cmp(&(b - tau).abs()))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("tau_c,upper_energy,lower_energy,n\n");
        for e in &self.entries {
            for p in &e.pairs {
                let _ = writeln!(
                    out,
                    "{},{},{},{}",
                    fmt_g(e.tau),
                    fmt_g(self.levels[p.upper]),
                    fmt_g(self.levels[p.lower]),
                    p.n
                );
            }
        }
        out
    }
}

/// All `tau_c = 2 pi n / |e' - e|` in `(0, tau_max]` over distinct energy pairs.
pub fn critical_times_from_energies(energies: &[f64], tau_max: f64) -> Result<CriticalTimes> {
    if !(tau_max > 0.0) || !tau_max.is_finite() {
        return Err(Error::InvalidTau(tau_max));
    }
    let levels = distinct_energies(energies);
    let mut raw: Vec<(f64, CriticalPair)> = Vec::new();
    for lower in 0..levels.len() {
        for upper in lower + 1..levels.len() {
            let gap = levels[upper] - levels[lower];
            let mut n = 1u32;
            loop {
                let tau = TAU * n as f64 / gap;
                if tau > tau_max + CRITICAL_DEDUP_TOL {
                    break;
                }
                raw.push((tau, CriticalPair { upper, lower, n, gap }));
                n += 1;
            }
        }
    }
    raw.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut entries: Vec<CriticalTime> = Vec::new();
    for (tau, pair) in raw {
        match entries.last_mut() {
            Some(last) if tau - last.tau <= CRITICAL_DEDUP_TOL => last.pairs.push(pair),
            _ => entries.push(CriticalTime { tau, pairs: vec![pair] }),
        }
    }
    Ok(CriticalTimes {
        tau_max,
        levels,
        entries,
    })
}

pub fn critical_times(model: &WalkModel, tau_max: f64) -> Result<CriticalTimes> {
    critical_times_from_energies(&model.spectrum()?.energies, tau_max)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NbarPoint {
    pub tau: f64,
    pub nbar: Nbar,
    pub nearest_tau_c: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NbarProfile {
    pub points: Vec<NbarPoint>,
    /// Critical times in `(0, max grid tau]` whose probe exceeds the threshold.
    pub divergent_critical_times: Vec<f64>,
    /// `n̄` grows like `1/tau^2` as `tau -> 0`.
    pub zeno_divergent: bool,
    /// `(tau*, n̄*)` minimizing the finite values on the grid.
    pub minimum: Option<(f64, f64)>,
}

impl NbarProfile {
    /// Divergent critical times plus the Zeno point when present.
    pub fn divergence_count(&self) -> usize {
        self.divergent_critical_times.len() + usize::from(self.zeno_divergent)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("tau,nbar,divergent_flag,nearest_tau_c\n");
        for p in &self.points {
            let (value, flag) = match p.nbar {
                Nbar::Finite { value } => (fmt_g(value), 0),
                Nbar::Divergent { .. } => ("inf".to_string(), 1),
                Nbar::Undefined => ("nan".to_string(), 0),
            };
            let nearest = p.nearest_tau_c.map_or_else(|| "nan".to_string(), fmt_g);
            let _ = writeln!(out, "{},{},{},{}", fmt_g(p.tau), value, flag, nearest);
        }
        out
    }
}

/// Ratio test for the Zeno divergence: `n̄(tau_min / 2) / n̄(tau_min) > ZENO_RATIO`.
pub fn zeno_divergent(ops: &VectorizedOperators) -> Result<bool> {
    let at = |tau| nbar_raw(&ops.at_tau(tau)?).map(|r| r.1);
    match (at(ZENO_TAU_MIN)?, at(ZENO_TAU_MIN / 2.0)?) {
        (Some(a), Some(b)) => Ok(b / a > ZENO_RATIO),
        _ => Ok(false),
    }
}

/// `n̄` over a grid of periods plus a census of divergent critical times.
pub fn nbar_profile(
    model: &WalkModel,
    det: &Detector,
    phi0: &InitialState,
    tau_grid: &[f64],
) -> Result<NbarProfile> {
    if let Some(&bad) = tau_grid.iter().find(|&&t| !(t > ZENO_TAU_MIN) || !t.is_finite()) {
        return Err(Error::InvalidTau(bad));
    }
    let Some(tau_max) = tau_grid.iter().copied().reduce(f64::max) else {
        return Err(Error::InvalidSize {
            kind: "tau grid",
            size: 0,
            min: 1,
        });
    };
    let spectrum = model.spectrum()?;
    let crit = critical_times_from_energies(&spectrum.energies, tau_max)?;
    let base = VectorizedOperators::from_spectrum(&spectrum, det, phi0, tau_grid[0])?;

    let points = tau_grid
        .par_iter()
        .map(|&tau| {
            let ops = base.at_tau(tau)?;
            Ok(NbarPoint {
                tau,
                nbar: nbar_matrix(&ops)?,
                nearest_tau_c: crit.nearest(tau),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let probes = crit
        .entries
        .par_iter()
        .map(|e| divergence_probe(&base, e.tau).map(|m| (e.tau, m)))
        .collect::<Result<Vec<_>>>()?;
    let divergent_critical_times = probes
        .into_iter()
        .filter(|&(_, m)| m > DIVERGENCE_THRESHOLD)
        .map(|(t, _)| t)
        .collect();

    let minimum = points
        .iter()
        .filter_map(|p| p.nbar.value().map(|v| (p.tau, v)))
        .min_by(|a, b| a.1.total_cmp(&b.1));

    Ok(NbarProfile {
        points,
        divergent_critical_times,
        zeno_divergent: zeno_divergent(&base)?,
        minimum,
    })
}

/// Evenly spaced grid of `steps` points from `start` to `stop` inclusive.
pub fn linear_grid(start: f64, stop: f64, steps: usize) -> Vec<f64> {
    match steps {
        0 => Vec::new(),
        1 => vec![start],
        _ => (0..steps)
            .map(|i| start + (stop - start) * i as f64 / (steps - 1) as f64)
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_detector, build_nn, build_nnn, plane_wave};
    use crate::numerics::{max_abs, max_abs_diff};
    use crate::stroboscopic::{fn_series, SeriesOptions};

    fn ops(model: &WalkModel, sites: &[usize], s: usize, tau: f64) -> VectorizedOperators {
        let det = build_detector(model.size(), sites).unwrap();
        let phi = InitialState::localized(model.size(), s).unwrap();
        build_operators(model, &det, &phi, tau).unwrap()
    }

    #[test]
    fn operator_shapes_and_identities() {
        let m = build_nn(10, 1.0).unwrap();
        let o = ops(&m, &[0], 3, 1.0);
        let t = &o.t_matrices()[0];
        for p in 0..10 {
            assert!((t[(p, p)].norm() - 1.0 / 10f64.sqrt()).abs() < 1e-14);
        }
        let v = &o.core.vectors;
        let back = v * o.c_matrix() * v.adjoint();
        let det = build_detector(10, &[0]).unwrap();
        assert!(max_abs_diff(&back, &det.complement()) < 1e-10);
        let u = o.u_matrix();
        assert!(max_abs_diff(&(&u * u.adjoint()), &ComplexMatrix::identity(10, 10)) < 1e-12);
        assert_eq!(crate::numerics::svd_rank(&o.w_matrix(), 1e-12), 1);
    }

    #[test]
    fn ground_state_gives_unit_s() {
        let m = build_nn(10, 1.0).unwrap();
        let det = build_detector(10, &[0]).unwrap();
        let phi = InitialState::from_vector(plane_wave(10, 0)).unwrap();
        let o = build_operators(&m, &det, &phi, 1.0).unwrap();
        let s = o.s_matrix();
        assert!((s[(0, 0)].norm() - 1.0).abs() < 1e-12);
        assert!(max_abs(&s) - 1.0 < 1e-12);
        assert!((1..10).all(|p| s[(p, p)].norm() < 1e-12));
    }

    #[test]
    fn literal_trace_matches_contraction() {
        let m = build_nn(4, 1.0).unwrap();
        let o = ops(&m, &[0, 1], 2, 0.9);
        let prop = o.propagator().clone();
        let mut power = ComplexMatrix::identity(16, 16);
        for n in 1..=6 {
            let literal: C64 = (0..2).map(|i| (&power * o.trace_term_matrix(i)).trace()).sum();
            assert!((literal.re - fn_closed_form(&o, n)).abs() < 1e-13);
            assert!(literal.im.abs() < 1e-13);
            power = &power * &prop;
        }
        let literal_p: C64 = (0..2).map(|i| (o.lop_pinv() * o.trace_term_matrix(i)).trace()).sum();
        assert!((literal_p.re - pdet_matrix(&o).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn closed_form_matches_direct_series() {
        let m = build_nn(10, 1.0).unwrap();
        let det = build_detector(10, &[0, 3]).unwrap();
        let phi = InitialState::localized(10, 7).unwrap();
        let o = build_operators(&m, &det, &phi, 1.3).unwrap();
        let direct = fn_series(&m, &det, &phi, 1.3, SeriesOptions::fixed(200)).unwrap();
        let closed = fn_closed_form_series(&o, 200);
        for n in 0..200 {
            assert!((direct.f[n] - closed[n]).abs() < 1e-10, "n={}", n + 1);
        }
        assert!((fn_closed_form(&o, 17) - closed[16]).abs() < 1e-15);
    }

    #[test]
    fn matrix_pdet_examples() {
        let nn = build_nn(10, 1.0).unwrap();
        assert!((pdet_matrix(&ops(&nn, &[0, 5], 2, 1.0)).unwrap() - 0.5).abs() < 1e-8);
        let nnn = build_nnn(10, 1.0).unwrap();
        assert!((pdet_matrix(&ops(&nnn, &[0, 5], 2, 1.0)).unwrap() - 0.375).abs() < 1e-8);
        assert!((pdet_matrix(&ops(&nnn, &[0, 3], 1, 1.0)).unwrap() - 2.0 / 3.0).abs() < 1e-8);
    }

    #[test]
    fn return_means() {
        let m = build_nn(10, 1.0).unwrap();
        let single = nbar_matrix(&ops(&m, &[0], 0, 1.0)).unwrap();
        assert!((single.value().unwrap() - 6.0).abs() < 1e-6);
        let pair = nbar_matrix(&ops(&m, &[0, 1], 0, 1.0)).unwrap();
        assert!((pair.value().unwrap() - 5.0).abs() < 1e-6);
    }

    #[test]
    fn dark_start_is_undefined() {
        let m = build_nn(10, 1.0).unwrap();
        let det = build_detector(10, &[0]).unwrap();
        let dark = InitialState::normalized(plane_wave(10, 1) - plane_wave(10, 9)).unwrap();
        let o = build_operators(&m, &det, &dark, 1.0).unwrap();
        assert_eq!(nbar_matrix(&o).unwrap(), Nbar::Undefined);
        assert!(fn_closed_form_series(&o, 50).iter().all(|f| f.abs() < 1e-12));
    }

    #[test]
    fn critical_time_enumeration() {
        let m = build_nn(10, 1.0).unwrap();
        let crit = critical_times(&m, TAU).unwrap();
        let taus = crit.taus();
        assert_eq!(taus.len(), 16);
        assert!(taus.iter().any(|t| (t - TAU / 4.0).abs() < 1e-12));
        assert!(taus.windows(2).all(|w| w[1] - w[0] > 1e-9));
        for e in &crit.entries {
            for p in &e.pairs {
                let gap = crit.levels[p.upper] - crit.levels[p.lower];
                assert!((gap * e.tau - TAU * p.n as f64).abs() < 1e-9);
            }
        }
        let flat = critical_times_from_energies(&[2.0, 2.0, 2.0], 100.0).unwrap();
        assert!(flat.is_empty());
    }

    #[test]
    fn divergence_at_critical_time() {
        let m = build_nn(10, 1.0).unwrap();
        let o = ops(&m, &[0], 3, TAU / 4.0);
        assert!(nbar_matrix(&o).unwrap().is_divergent());
        let calm = ops(&m, &[0], 0, TAU / 4.0);
        assert!(!nbar_matrix(&calm).unwrap().is_divergent());
    }

    #[test]
    fn profile_rejects_zeno_region() {
        let m = build_nn(10, 1.0).unwrap();
        let det = build_detector(10, &[0]).unwrap();
        let phi = InitialState::localized(10, 0).unwrap();
        assert!(matches!(
            nbar_profile(&m, &det, &phi, &[1e-3, 1.0]),
            Err(Error::InvalidTau(_))
        ));
    }

    #[test]
    fn profile_csv_and_minimum() {
        let m = build_nn(10, 1.0).unwrap();
        let det = build_detector(10, &[0, 1, 2]).unwrap();
        let phi = InitialState::localized(10, 1).unwrap();
        let grid = linear_grid(0.1, 3.0, 30);
        let prof = nbar_profile(&m, &det, &phi, &grid).unwrap();
        assert_eq!(prof.points.len(), 30);
        assert!(prof.minimum.is_some());
        assert!(!prof.zeno_divergent);
        let csv = prof.to_csv();
        assert!(csv.starts_with("tau,nbar,divergent_flag,nearest_tau_c\n"));
        assert_eq!(csv.lines().count(), 31);
    }

    #[test]
    fn grid_endpoints() {
        let g = linear_grid(1.0, 2.0, 5);
        assert_eq!(g, vec![1.0, 1.25, 1.5, 1.75, 2.0]);
        assert_eq!(linear_grid(1.0, 2.0, 1), vec![1.0]);
    }
}
