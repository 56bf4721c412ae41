//! Parameter sweeps over detectors, initial sites and periods, plus the
//! cross-method verification harness.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detection::pdet_bright;
use crate::error::{Error, Result};
use crate::model::{build_detector, build_nn, build_nnn, load_custom, Detector, InitialState, Spectrum, WalkModel};
use crate::output::{fmt_2dp, fmt_g};
use crate::spectral::{classify_spectrum, deterministic_certificate, Classification};
use crate::stroboscopic::{
    direct_propagator, fn_series_with_unitary, pdet_truncated, SeriesOptions, DEFAULT_CONV_TOL, DEFAULT_N_MAX,
};
use crate::vectorized::{fn_closed_form_series, linear_grid, nbar_profile, pdet_matrix, NbarProfile, VectorizedOperators};

/// Largest tolerated spectral/matrix `P_det` disagreement.
pub const PDET_AGREEMENT_TOL: f64 = 1e-8;
/// Largest tolerated termwise direct/closed-form `F_n` disagreement.
pub const FN_AGREEMENT_TOL: f64 = 1e-10;
/// Number of leading `F_n` compared termwise.
pub const FN_COMPARE_TERMS: usize = 200;
/// Largest tolerated shortfall of the truncated sum below the exact `P_det`.
pub const TRUNCATION_GAP_TOL: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Spectral,
    #[default]
    Matrix,
    Direct,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spectral" => Ok(Method::Spectral),
            "matrix" => Ok(Method::Matrix),
            "direct" => Ok(Method::Direct),
            other => Err(Error::Parse(format!("unknown method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TauGrid {
    pub start: f64,
    pub stop: f64,
    pub steps: usize,
}

impl TauGrid {
    pub fn points(&self) -> Vec<f64> {
        linear_grid(self.start, self.stop, self.steps)
    }
}

impl std::str::FromStr for TauGrid {
    type Err = Error;

    /// `start:stop:steps`
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || Error::Parse(format!("tau grid '{s}' is not start:stop:steps"));
        if parts.len() != 3 {
            return Err(bad());
        }
        Ok(TauGrid {
            start: parts[0].trim().parse().map_err(|_| bad())?,
            stop: parts[1].trim().parse().map_err(|_| bad())?,
            steps: parts[2].trim().parse().map_err(|_| bad())?,
        })
    }
}

/// A sweep description; every field has a default so spec files may be partial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    /// `nn`, `nnn` or `custom:<path>`.
    pub model: String,
    pub size: usize,
    pub gamma: f64,
    /// Explicit detector sites; takes precedence over `rank`.
    pub detector: Option<Vec<usize>>,
    /// Generate every detector `{0, d_2, .., d_rank}` with `0 < d_2 < .. < d_rank < L`.
    pub rank: Option<usize>,
    /// Initial sites; all sites when absent.
    pub initial: Option<Vec<usize>>,
    pub tau: f64,
    pub tau_grid: Option<TauGrid>,
    pub method: Method,
    pub n_max: usize,
    pub tol: f64,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            model: "nn".into(),
            size: 10,
            gamma: 1.0,
            detector: None,
            rank: None,
            initial: None,
            tau: 1.0,
            tau_grid: None,
            method: Method::Matrix,
            n_max: DEFAULT_N_MAX,
            tol: DEFAULT_CONV_TOL,
        }
    }
}

impl SweepSpec {
    pub fn from_json(json: &str) -> Result<Self> {
        serde_json::from_str(json).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn build_model(&self) -> Result<WalkModel> {
        match self.model.as_str() {
            "nn" => build_nn(self.size, self.gamma),
            "nnn" => build_nnn(self.size, self.gamma),
            other => match other.strip_prefix("custom:") {
                Some(path) => load_custom(Path::new(path)),
                None => Err(Error::Parse(format!("unknown model '{other}'"))),
            },
        }
    }

    /// Detector variants: the explicit one, the rank generator, or the single site `{0}`.
    pub fn detectors(&self, size: usize) -> Result<Vec<Detector>> {
        if let Some(sites) = &self.detector {
            return Ok(vec![build_detector(size, sites)?]);
        }
        let rank = self.rank.unwrap_or(1);
        if rank == 0 || rank >= size {
            return Err(Error::InvalidSize {
                kind: "detector rank",
                size: rank,
                min: 1,
            });
        }
        generate_detectors(size, rank).iter().map(|s| build_detector(size, s)).collect()
    }

    pub fn initial_sites(&self, size: usize) -> Result<Vec<usize>> {
        let sites = self.initial.clone().unwrap_or_else(|| (0..size).collect());
        if let Some(&bad) = sites.iter().find(|&&s| s >= size) {
            return Err(Error::SiteOutOfRange { site: bad, size });
        }
        Ok(sites)
    }

    fn series_options(&self) -> SeriesOptions {
        SeriesOptions {
            n_max: self.n_max,
            conv_tol: self.tol,
        }
    }
}

/// `{0, d_2, .., d_rank}` for every increasing choice of the remaining sites.
pub fn generate_detectors(size: usize, rank: usize) -> Vec<Vec<usize>> {
    fn extend(size: usize, left: usize, current: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if left == 0 {
            out.push(current.clone());
            return;
        }
        let from = current.last().map_or(0, |&d| d + 1);
        for d in from..size {
            current.push(d);
            extend(size, left - 1, current, out);
            current.pop();
        }
    }
    let mut out = Vec::new();
    if rank >= 1 && rank <= size {
        extend(size, rank - 1, &mut vec![0], &mut out);
    }
    out
}

fn sites_label(sites: &[usize]) -> String {
    sites.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(";")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeatmapResult {
    pub method: Method,
    /// Detector sites of each row.
    pub detectors: Vec<Vec<usize>>,
    /// Initial site of each column.
    pub initial: Vec<usize>,
    pub pdet: Vec<Vec<f64>>,
    /// Total dark-state count of each row's detector.
    pub n_dark: Vec<usize>,
    /// Largest spectral/matrix disagreement when the cross-check ran.
    pub cross_check_delta: Option<f64>,
}

impl HeatmapResult {
    pub fn cell(&self, row: usize, col: usize) -> f64 {
        self.pdet[row][col]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("detector,s,p_det,p_det_2dp,n_dark_total\n");
        for (r, det) in self.detectors.iter().enumerate() {
            for (c, s) in self.initial.iter().enumerate() {
                let p = self.pdet[r][c];
                let _ = writeln!(
                    out,
                    "{},{},{},{},{}",
                    sites_label(det),
                    s,
                    fmt_g(p),
                    fmt_2dp(p),
                    self.n_dark[r]
                );
            }
        }
        out
    }
}

fn heatmap_row(
    spectrum: &Spectrum,
    model: &WalkModel,
    det: &Detector,
    initial: &[usize],
    spec: &SweepSpec,
) -> Result<(Vec<f64>, usize, Option<f64>)> {
    let size = spectrum.dim();
    let classification = classify_spectrum(spectrum, det)?;
    let states: Vec<InitialState> =
        initial.iter().map(|&s| InitialState::localized(size, s)).collect::<Result<_>>()?;
    let spectral: Vec<f64> = states
        .iter()
        .map(|phi| pdet_bright(&classification, phi).map(|r| r.p_det))
        .collect::<Result<_>>()?;

    let (row, delta) = match spec.method {
        Method::Spectral => (spectral, None),
        Method::Matrix => {
            let base = VectorizedOperators::from_spectrum(spectrum, det, &states[0], spec.tau)?;
            let mut row = Vec::with_capacity(states.len());
            let mut delta: f64 = 0.0;
            for (phi, ps) in states.iter().zip(&spectral) {
                let p = pdet_matrix(&base.with_initial_state(phi)?)?;
                delta = delta.max((p - ps).abs());
                row.push(p);
            }
            if delta > PDET_AGREEMENT_TOL {
                return Err(Error::VerificationFailed(format!(
                    "detector {{{}}}: spectral and matrix P_det differ by {delta:.3e}",
                    sites_label(det.sites())
                )));
            }
            (row, Some(delta))
        }
        Method::Direct => {
            let u = direct_propagator(model.hamiltonian(), spec.tau)?;
            let row = states
                .iter()
                .map(|phi| fn_series_with_unitary(&u, det, phi, spec.tau, spec.series_options()).map(|s| pdet_truncated(&s)))
                .collect::<Result<_>>()?;
            (row, None)
        }
    };
    Ok((row, classification.n_dark_total, delta))
}

/// `P_det` over every (detector variant, initial site) pair.
pub fn run_pdet_heatmap(spec: &SweepSpec) -> Result<HeatmapResult> {
    let model = spec.build_model()?;
    let spectrum = model.spectrum()?;
    let detectors = spec.detectors(model.size())?;
    let initial = spec.initial_sites(model.size())?;
    if initial.is_empty() {
        return Err(Error::InvalidSize {
            kind: "initial site list",
            size: 0,
            min: 1,
        });
    }
    let rows = detectors
        .par_iter()
        .map(|det| heatmap_row(&spectrum, &model, det, &initial, spec))
        .collect::<Result<Vec<_>>>()?;

    let mut pdet = Vec::with_capacity(rows.len());
    let mut n_dark = Vec::with_capacity(rows.len());
    let mut cross: Option<f64> = None;
    for (row, dark, delta) in rows {
        pdet.push(row);
        n_dark.push(dark);
        if let Some(d) = delta {
            cross = Some(cross.map_or(d, |c: f64| c.max(d)));
        }
    }
    Ok(HeatmapResult {
        method: spec.method,
        detectors: detectors.iter().map(|d| d.sites().to_vec()).collect(),
        initial,
        pdet,
        n_dark,
        cross_check_delta: cross,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DarkCountRow {
    pub d2: usize,
    pub n_dark_total: usize,
    pub p_det: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DarkCountFamily {
    pub n_dark_total: usize,
    pub p_det: f64,
    pub d2: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DarkCountTable {
    pub size: usize,
    pub initial: usize,
    pub rows: Vec<DarkCountRow>,
}

impl DarkCountTable {
    /// Rows grouped by equal dark count and `P_det` (to 1e-8), ordered by dark count.
    pub fn families(&self) -> Vec<DarkCountFamily> {
        let mut out: Vec<DarkCountFamily> = Vec::new();
        for r in &self.rows {
            match out
                .iter_mut()
                .find(|f| f.n_dark_total == r.n_dark_total && (f.p_det - r.p_det).abs() < 1e-8)
            {
                Some(f) => f.d2.push(r.d2),
                None => out.push(DarkCountFamily {
                    n_dark_total: r.n_dark_total,
                    p_det: r.p_det,
                    d2: vec![r.d2],
                }),
            }
        }
        out.sort_by(|a, b| a.n_dark_total.cmp(&b.n_dark_total).then(b.p_det.total_cmp(&a.p_det)));
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("d2,n_dark_total,p_det,p_det_2dp\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", r.d2, r.n_dark_total, fmt_g(r.p_det), fmt_2dp(r.p_det));
        }
        out
    }
}

/// Dark-state count and `P_det` for every two-site detector `{0, d2}` and a fixed initial site.
pub fn run_table_dark_count(model: &WalkModel, initial: usize) -> Result<DarkCountTable> {
    let size = model.size();
    let spectrum = model.spectrum()?;
    let phi = InitialState::localized(size, initial)?;
    let rows = (1..size)
        .into_par_iter()
        .map(|d2| {
            let det = build_detector(size, &[0, d2])?;
            let c = classify_spectrum(&spectrum, &det)?;
            Ok(DarkCountRow {
                d2,
                n_dark_total: c.n_dark_total,
                p_det: pdet_bright(&c, &phi)?.p_det,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DarkCountTable { size, initial, rows })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScanResult {
    pub detector: Vec<usize>,
    pub initial: usize,
    pub profile: NbarProfile,
}

impl ScanResult {
    pub fn summary(&self) -> String {
        let mut out = format!(
            "detector {{{}}}, s = {}: {} divergences ({} critical times{})",
            sites_label(&self.detector).replace(';', ","),
            self.initial,
            self.profile.divergence_count(),
            self.profile.divergent_critical_times.len(),
            if self.profile.zeno_divergent { " + Zeno limit" } else { "" },
        );
        if let Some((tau, nbar)) = self.profile.minimum {
            let _ = write!(out, "; minimum n̄ = {} at tau = {}", fmt_g(nbar), fmt_g(tau));
        }
        out
    }
}

/// `n̄` profile over the spec's tau grid for its first detector and initial site.
pub fn run_nbar_scan(spec: &SweepSpec) -> Result<ScanResult> {
    let model = spec.build_model()?;
    let det = spec.detectors(model.size())?.remove(0);
    let initial = spec.initial_sites(model.size())?.first().copied().unwrap_or(0);
    let grid = spec
        .tau_grid
        .ok_or_else(|| Error::Parse("scan needs a tau grid".into()))?
        .points();
    let phi = InitialState::localized(model.size(), initial)?;
    let profile = nbar_profile(&model, &det, &phi, &grid)?;
    Ok(ScanResult {
        detector: det.sites().to_vec(),
        initial,
        profile,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct VerifyOptions {
    /// Perturb the superoperator before the matrix method runs (harness self-test).
    pub inject_fault: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub configurations: usize,
    pub max_pdet_delta: f64,
    pub max_fn_delta: f64,
    /// Largest `P_det(matrix) - P_det(truncated)`.
    pub max_truncation_gap: f64,
    pub certified_detectors: usize,
    pub failures: Vec<String>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn summary(&self) -> String {
        format!(
            "{} configurations, {} certified detectors; max |dP_det| = {}, max |dF_n| = {}, max truncation gap = {}; {} failures",
            self.configurations,
            self.certified_detectors,
            fmt_g(self.max_pdet_delta),
            fmt_g(self.max_fn_delta),
            fmt_g(self.max_truncation_gap),
            self.failures.len()
        )
    }
}

struct DetectorCheck {
    configurations: usize,
    pdet_delta: f64,
    fn_delta: f64,
    truncation_gap: f64,
    certified: bool,
    failures: Vec<String>,
}

fn verify_detector(
    model: &WalkModel,
    spectrum: &Spectrum,
    u: &crate::numerics::ComplexMatrix,
    det: &Detector,
    initial: &[usize],
    spec: &SweepSpec,
    opts: VerifyOptions,
) -> Result<DetectorCheck> {
    let size = model.size();
    let label = sites_label(det.sites()).replace(';', ",");
    let classification: Classification = classify_spectrum(spectrum, det)?;
    let certified = deterministic_certificate(&classification, det).certified;
    let mut check = DetectorCheck {
        configurations: 0,
        pdet_delta: 0.0,
        fn_delta: 0.0,
        truncation_gap: 0.0,
        certified,
        failures: Vec::new(),
    };
    let mut base: Option<VectorizedOperators> = None;
    for &s in initial {
        let phi = InitialState::localized(size, s)?;
        let ops = match &base {
            Some(b) => b.with_initial_state(&phi)?,
            None => {
                let mut b = VectorizedOperators::from_spectrum(spectrum, det, &phi, spec.tau)?;
                if opts.inject_fault {
                    b = b.with_shifted_lop(1e-3);
                }
                base = Some(b.clone());
                b
            }
        };
        check.configurations += 1;
        let spectral = pdet_bright(&classification, &phi)?.p_det;
        let matrix = match pdet_matrix(&ops) {
            Ok(p) => p,
            Err(e) => {
                check.failures.push(format!("detector {{{label}}}, s = {s}: {e}"));
                continue;
            }
        };
        let delta = (spectral - matrix).abs();
        check.pdet_delta = check.pdet_delta.max(delta);
        if delta > PDET_AGREEMENT_TOL {
            check.failures.push(format!(
                "detector {{{label}}}, s = {s}: spectral {spectral} vs matrix {matrix}"
            ));
        }

        let direct = fn_series_with_unitary(u, det, &phi, spec.tau, spec.series_options())?;
        let closed = fn_closed_form_series(&ops, FN_COMPARE_TERMS.min(direct.len()));
        let fn_delta = closed
            .iter()
            .zip(&direct.f)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        check.fn_delta = check.fn_delta.max(fn_delta);
        if fn_delta > FN_AGREEMENT_TOL {
            check.failures.push(format!(
                "detector {{{label}}}, s = {s}: F_n differs by {fn_delta:.3e}"
            ));
        }

        let truncated = pdet_truncated(&direct);
        let gap = matrix - truncated;
        check.truncation_gap = check.truncation_gap.max(gap);
        if gap > TRUNCATION_GAP_TOL || gap < -1e-9 {
            check.failures.push(format!(
                "detector {{{label}}}, s = {s}: truncated sum {truncated} vs {matrix}"
            ));
        }

        if certified && (1.0 - spectral).abs() > PDET_AGREEMENT_TOL {
            check.failures.push(format!(
                "detector {{{label}}} certified but s = {s} has P_det = {spectral}"
            ));
        }
    }
    Ok(check)
}

/// Runs every cross-method check over the spec's detectors and initial sites.
///
/// Without an explicit detector or rank, ranks 1 to 3 are all generated.
pub fn verify(spec: &SweepSpec, opts: VerifyOptions) -> Result<VerifyReport> {
    let model = spec.build_model()?;
    let spectrum = model.spectrum()?;
    let size = model.size();
    let detectors: Vec<Detector> = if spec.detector.is_some() || spec.rank.is_some() {
        spec.detectors(size)?
    } else {
        (1..=3.min(size - 1))
            .flat_map(|r| generate_detectors(size, r))
            .map(|s| build_detector(size, &s))
            .collect::<Result<_>>()?
    };
    let initial = spec.initial_sites(size)?;
    let u = direct_propagator(model.hamiltonian(), spec.tau)?;

    let checks = detectors
        .par_iter()
        .map(|det| verify_detector(&model, &spectrum, &u, det, &initial, spec, opts))
        .collect::<Result<Vec<_>>>()?;

    let mut report = VerifyReport {
        configurations: 0,
        max_pdet_delta: 0.0,
        max_fn_delta: 0.0,
        max_truncation_gap: 0.0,
        certified_detectors: 0,
        failures: Vec::new(),
    };
    for c in checks {
        report.configurations += c.configurations;
        report.max_pdet_delta = report.max_pdet_delta.max(c.pdet_delta);
        report.max_fn_delta = report.max_fn_delta.max(c.fn_delta);
        report.max_truncation_gap = report.max_truncation_gap.max(c.truncation_gap);
        report.certified_detectors += usize::from(c.certified);
        report.failures.extend(c.failures);
    }
    Ok(report)
}

/// [`verify`], failing with the first offending configuration.
pub fn run_verify(spec: &SweepSpec, opts: VerifyOptions) -> Result<VerifyReport> {
    let report = verify(spec, opts)?;
    match report.failures.first() {
        None => Ok(report),
        Some(first) => Err(Error::VerificationFailed(format!(
            "{first} ({} failures in total)",
            report.failures.len()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detector_generator() {
        assert_eq!(generate_detectors(4, 1), vec![vec![0]]);
        assert_eq!(generate_detectors(4, 2), vec![vec![0, 1], vec![0, 2], vec![0, 3]]);
        assert_eq!(generate_detectors(10, 3).len(), 36);
    }

    #[test]
    fn tau_grid_parsing() {
        let g: TauGrid = "0.1:1.0:10".parse().unwrap();
        assert_eq!(g.points().len(), 10);
        assert!("0.1:1.0".parse::<TauGrid>().is_err());
        assert!("a:b:c".parse::<TauGrid>().is_err());
    }

    #[test]
    fn partial_spec_file() {
        let spec = SweepSpec::from_json(r#"{"model": "nnn", "rank": 2}"#).unwrap();
        assert_eq!(spec.size, 10);
        assert_eq!(spec.method, Method::Matrix);
        assert!(SweepSpec::from_json(r#"{"colour": 1}"#).is_err());
    }

    #[test]
    fn rank_two_heatmap_pattern() {
        let spec = SweepSpec {
            rank: Some(2),
            ..Default::default()
        };
        let h = run_pdet_heatmap(&spec).unwrap();
        assert_eq!(h.pdet.len(), 9);
        assert!(h.cross_check_delta.unwrap() < 1e-8);
        for (r, det) in h.detectors.iter().enumerate() {
            for s in 0..10 {
                let expect = if det[1] == 5 && s != 0 && s != 5 { 0.5 } else { 1.0 };
                assert!((h.cell(r, s) - expect).abs() < 1e-8);
            }
        }
        let csv = h.to_csv();
        assert!(csv.lines().nth(1).unwrap().starts_with("0;1,0,1,1.00,"));
    }

    #[test]
    fn direct_method_heatmap() {
        let spec = SweepSpec {
            detector: Some(vec![0]),
            initial: Some(vec![0, 3]),
            method: Method::Direct,
            ..Default::default()
        };
        let h = run_pdet_heatmap(&spec).unwrap();
        assert!((h.cell(0, 0) - 1.0).abs() < 1e-2);
        assert!((h.cell(0, 1) - 0.5).abs() < 1e-2);
    }

    #[test]
    fn verify_passes_and_catches_fault() {
        let spec = SweepSpec {
            rank: Some(2),
            initial: Some(vec![0, 2, 5]),
            ..Default::default()
        };
        let report = run_verify(&spec, VerifyOptions::default()).unwrap();
        assert_eq!(report.configurations, 27);
        let fault = run_verify(&spec, VerifyOptions { inject_fault: true });
        assert!(matches!(fault, Err(Error::VerificationFailed(_))));
    }
}
