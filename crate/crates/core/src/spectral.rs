//! Degenerate-level grouping and dark/bright classification.
//!
//! Each energy level `E_k` with eigenvectors `|E_{k,m}>` is probed by the
//! overlap matrix `A_k[i][m] = <d_i|E_{k,m}>`. Its null space gives the dark
//! states of the level (never detected), and the Gram-Schmidt orthonormalized
//! projections `E_k|d_i>` give the bright states (detected with certainty).

use std::f64::consts::TAU;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Detector, Spectrum};
use crate::numerics::{
    self, gram_schmidt, null_space_basis, projector_onto, row_space_basis, svd_rank,
    ComplexMatrix, ComplexVector, C64, DEFAULT_DROP_TOL, DEFAULT_RANK_TOL, ZERO,
};

/// Phase distance on the unit circle below which two levels count as degenerate under `U(tau)`.
pub const DEFAULT_PHASE_TOL: f64 = 1e-9;
/// Overlap matrices with every singular value below this are treated as exactly zero.
pub const ZERO_OVERLAP_TOL: f64 = 1e-10;
/// Largest degeneracy accepted by [`dark_basis_via_determinant`].
pub const MAX_DETERMINANT_DEGENERACY: usize = 6;

/// `1e-9 * (1 + max|e|)`
pub fn default_group_tol(energies: &[f64]) -> f64 {
    1e-9 * (1.0 + energies.iter().fold(0.0_f64, |a, e| a.max(e.abs())))
}

#[derive(Debug, Clone)]
pub struct EnergyLevel {
    pub index: usize,
    pub energy: f64,
    /// `L x g` matrix of orthonormal eigenvectors spanning the level.
    pub vectors: ComplexMatrix,
    pub projector: ComplexMatrix,
    /// Distinct Hamiltonian energies folded into this level; more than one
    /// only after phase regrouping.
    pub energies: Vec<f64>,
}

impl EnergyLevel {
    fn new(index: usize, energies: Vec<f64>, vectors: ComplexMatrix) -> Self {
        let projector = &vectors * vectors.adjoint();
        EnergyLevel {
            index,
            energy: energies[0],
            vectors,
            projector,
            energies,
        }
    }

    pub fn degeneracy(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn vector(&self, m: usize) -> ComplexVector {
        self.vectors.column(m).into_owned()
    }
}

fn columns_to_matrix(dim: usize, cols: &[ComplexVector]) -> ComplexMatrix {
    let mut m = DMatrix::from_element(dim, cols.len(), ZERO);
    for (j, c) in cols.iter().enumerate() {
        m.set_column(j, c);
    }
    m
}

/// Merges consecutive sorted eigenvalues closer than `group_tol` into levels
/// and re-orthonormalizes the eigenvectors within each level.
pub fn group_levels(energies: &[f64], vectors: &ComplexMatrix, group_tol: f64) -> Vec<EnergyLevel> {
    assert_eq!(energies.len(), vectors.ncols(), "one eigenvector per eigenvalue");
    let dim = vectors.nrows();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (i, &e) in energies.iter().enumerate() {
        match groups.last_mut() {
            Some(g) if (e - energies[*g.last().unwrap()]).abs() <= group_tol => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
        .into_iter()
        .enumerate()
        .map(|(k, members)| {
            let cols: Vec<ComplexVector> =
                members.iter().map(|&i| vectors.column(i).into_owned()).collect();
            let ortho = gram_schmidt(&cols, DEFAULT_DROP_TOL);
            EnergyLevel::new(k, vec![energies[members[0]]], columns_to_matrix(dim, &ortho))
        })
        .collect()
}

/// Levels of a spectrum with the default grouping tolerance.
pub fn levels_of(spectrum: &Spectrum) -> Vec<EnergyLevel> {
    group_levels(
        &spectrum.energies,
        &spectrum.vectors,
        default_group_tol(&spectrum.energies),
    )
}

fn phase_distance(e1: f64, e2: f64, tau: f64) -> f64 {
    (C64::from_polar(1.0, -e1 * tau) - C64::from_polar(1.0, -e2 * tau)).norm()
}

/// Pairs of distinct levels whose `U(tau)` phases coincide within `phase_tol`.
pub fn phase_collisions(levels: &[EnergyLevel], tau: f64, phase_tol: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for a in 0..levels.len() {
        for b in a + 1..levels.len() {
            if phase_distance(levels[a].energy, levels[b].energy, tau) < phase_tol {
                out.push((a, b));
            }
        }
    }
    out
}

/// Regroups levels by the eigenphases `exp(-i E_k tau)` of the evolution unitary.
///
/// At a critical period two or more Hamiltonian levels share a phase and are
/// merged into one level of `U(tau)`. Merged levels are ordered by their
/// lowest member.
pub fn group_levels_by_phase(levels: &[EnergyLevel], tau: f64, phase_tol: f64) -> Vec<EnergyLevel> {
    let n = levels.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while parent[r] != r {
            r = parent[r];
        }
        parent[x] = r;
        r
    }
    for (a, b) in phase_collisions(levels, tau, phase_tol) {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra.max(rb)] = ra.min(rb);
        }
    }
    let mut merged: Vec<(usize, Vec<usize>)> = Vec::new();
    for i in 0..n {
        let root = find(&mut parent, i);
        match merged.iter_mut().find(|(r, _)| *r == root) {
            Some((_, members)) => members.push(i),
            None => merged.push((root, vec![i])),
        }
    }
    let dim = levels.first().map_or(0, |l| l.vectors.nrows());
    merged
        .into_iter()
        .enumerate()
        .map(|(k, (_, members))| {
            let mut cols = Vec::new();
            let mut energies = Vec::new();
            for &i in &members {
                energies.push(levels[i].energy);
                cols.extend((0..levels[i].degeneracy()).map(|m| levels[i].vector(m)));
            }
            EnergyLevel::new(k, energies, columns_to_matrix(dim, &cols))
        })
        .collect()
}

/// `A_k`, shape `rank(D) x g_k`.
#[derive(Debug, Clone)]
pub struct OverlapMatrix {
    pub level: usize,
    pub matrix: ComplexMatrix,
}

pub fn overlap_matrix(level: &EnergyLevel, det: &Detector) -> OverlapMatrix {
    let g = level.degeneracy();
    let sites = det.sites();
    let matrix = DMatrix::from_fn(sites.len(), g, |i, m| level.vectors[(sites[i], m)]);
    OverlapMatrix {
        level: level.index,
        matrix,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassifyTolerances {
    /// Relative singular-value cutoff for `rank(A_k)`.
    pub rank_tol: f64,
    /// Gram-Schmidt drop tolerance for the bright basis.
    pub drop_tol: f64,
    /// Absolute cutoff below which `A_k` counts as the zero matrix.
    pub zero_tol: f64,
}

impl Default for ClassifyTolerances {
    fn default() -> Self {
        ClassifyTolerances {
            rank_tol: DEFAULT_RANK_TOL,
            drop_tol: DEFAULT_DROP_TOL,
            zero_tol: ZERO_OVERLAP_TOL,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LevelClassification {
    pub level: usize,
    pub energy: f64,
    pub degeneracy: usize,
    pub rank: usize,
    pub n_dark: usize,
    pub dark: Vec<ComplexVector>,
    pub bright: Vec<ComplexVector>,
}

/// Dark and bright bases of one level.
///
/// The dark states are `sum_m alpha_m |E_{k,m}>` for `alpha` in the null
/// space of `A_k`; the bright states are the orthonormalized `E_k|d_i>`,
/// exactly `rank(A_k)` of them.
pub fn classify_level(
    level: &EnergyLevel,
    det: &Detector,
    tol: &ClassifyTolerances,
) -> LevelClassification {
    let g = level.degeneracy();
    let a = overlap_matrix(level, det).matrix;
    let sigma_max = numerics::singular_values(&a).first().copied().unwrap_or(0.0);

    if sigma_max < tol.zero_tol {
        // Every overlap vanishes: the whole level is dark.
        return LevelClassification {
            level: level.index,
            energy: level.energy,
            degeneracy: g,
            rank: 0,
            n_dark: g,
            dark: (0..g).map(|m| level.vector(m)).collect(),
            bright: Vec::new(),
        };
    }

    let rank = svd_rank(&a, tol.rank_tol);
    let dark: Vec<ComplexVector> = null_space_basis(&a, tol.rank_tol)
        .iter()
        .map(|alpha| &level.vectors * alpha)
        .collect();

    let projected: Vec<ComplexVector> = det
        .sites()
        .iter()
        .map(|&d| level.projector.column(d).into_owned())
        .collect();
    let mut bright = gram_schmidt(&projected, tol.drop_tol);
    if bright.len() != rank {
        // Nearly dependent projections: take the row space of A_k instead.
        bright = row_space_basis(&a.map(|z| z.conj()), tol.rank_tol)
            .iter()
            .map(|beta| &level.vectors * beta)
            .collect();
    }

    LevelClassification {
        level: level.index,
        energy: level.energy,
        degeneracy: g,
        rank,
        n_dark: g - rank,
        dark,
        bright,
    }
}

/// Row echelon form of `a` by Gaussian elimination with partial pivoting.
/// Returns the nonzero rows and the pivot column of each.
fn row_echelon(a: &ComplexMatrix, tol: f64) -> (Vec<Vec<C64>>, Vec<usize>) {
    let (rows, cols) = a.shape();
    let mut m: Vec<Vec<C64>> = (0..rows).map(|i| a.row(i).iter().copied().collect()).collect();
    let mut pivots = Vec::new();
    let mut r = 0;
    for c in 0..cols {
        if r == rows {
            break;
        }
        let (best, mag) = (r..rows)
            .map(|i| (i, m[i][c].norm()))
            .fold((r, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
        if mag <= tol {
            continue;
        }
        m.swap(r, best);
        for i in r + 1..rows {
            let factor = m[i][c] / m[r][c];
            for j in c..cols {
                let sub = factor * m[r][j];
                m[i][j] -= sub;
            }
            m[i][c] = ZERO;
        }
        pivots.push(c);
        r += 1;
    }
    m.truncate(r);
    (m, pivots)
}

/// Coefficients `c_j = (-1)^j det(M without column j)` for an `(n-1) x n`
/// matrix `M`; the cofactor expansion of `det([e; M])` along its first row.
fn cofactor_row(rows: &[Vec<C64>]) -> Vec<C64> {
    let n = rows.len() + 1;
    (0..n)
        .map(|skip| {
            let minor = DMatrix::from_fn(n - 1, n - 1, |i, j| {
                let col = if j < skip { j } else { j + 1 };
                rows[i][col]
            });
            let det = if n == 1 { numerics::ONE } else { minor.determinant() };
            if skip % 2 == 0 {
                det
            } else {
                -det
            }
        })
        .collect()
}

/// Dark states built from determinants of the row-reduced overlap matrix.
///
/// `A_k` is row-reduced and its columns ordered so the pivots lead. The
/// first dark state is the determinant whose first row holds the level
/// eigenvectors and whose remaining rows are the reduced rows restricted to
/// `rank + 1` columns; every further state adds one column and one row of
/// overlaps with the dark states already built, which makes it orthogonal to
/// them. Only the spanned subspace is comparable with [`classify_level`];
/// the individual vectors differ.
pub fn dark_basis_via_determinant(level: &EnergyLevel, det: &Detector) -> Result<Vec<ComplexVector>> {
    let g = level.degeneracy();
    if g > MAX_DETERMINANT_DEGENERACY {
        return Err(Error::Unsupported(format!(
            "determinant construction for degeneracy {g} (max {MAX_DETERMINANT_DEGENERACY})"
        )));
    }
    let a = overlap_matrix(level, det).matrix;
    let scale = numerics::max_abs(&a);
    if scale < ZERO_OVERLAP_TOL {
        return Ok((0..g).map(|m| level.vector(m)).collect());
    }
    let (reduced, pivots) = row_echelon(&a, 1e-10 * scale);
    let rank = pivots.len();
    let mut order: Vec<usize> = pivots.clone();
    order.extend((0..g).filter(|c| !pivots.contains(c)));

    let mut coeffs: Vec<Vec<C64>> = Vec::new(); // each indexed in original column order
    let mut used: Vec<usize> = order[..rank].to_vec();
    let mut spare: Vec<usize> = order[rank..].to_vec();

    while coeffs.len() < g - rank {
        let mut found = None;
        for (pos, &candidate) in spare.iter().enumerate() {
            let mut cols = used.clone();
            cols.push(candidate);
            let mut rows: Vec<Vec<C64>> =
                reduced.iter().map(|r| cols.iter().map(|&c| r[c]).collect()).collect();
            for prev in &coeffs {
                rows.push(cols.iter().map(|&c| prev[c].conj()).collect());
            }
            let cof = cofactor_row(&rows);
            let norm = cof.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            let row_scale: f64 = rows
                .iter()
                .map(|r| r.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt())
                .product();
            if norm > 1e-10 * row_scale.max(f64::MIN_POSITIVE) {
                let mut full = vec![ZERO; g];
                for (&c, z) in cols.iter().zip(&cof) {
                    full[c] = z / norm;
                }
                found = Some((pos, full));
                break;
            }
        }
        let (pos, full) = found.ok_or_else(|| {
            Error::NumericalResidue("determinant construction degenerated".into())
        })?;
        used.push(spare.remove(pos));
        coeffs.push(full);
    }

    Ok(coeffs
        .iter()
        .map(|alpha| &level.vectors * ComplexVector::from_column_slice(alpha))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    /// Levels of the Hamiltonian.
    Energy,
    /// Levels of `U(tau)`: Hamiltonian levels with equal phases merged.
    Phase,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "warning", rename_all = "snake_case")]
pub enum ClassificationWarning {
    /// `tau` makes distinct levels degenerate under `U(tau)`.
    CriticalTau { tau: f64, colliding: Vec<(f64, f64)> },
}

#[derive(Debug, Clone)]
pub struct ClassifyOptions {
    pub tau: Option<f64>,
    /// Regroup by `U(tau)` phases when `tau` is critical.
    pub regroup_at_critical: bool,
    /// Defaults to [`default_group_tol`] of the spectrum.
    pub group_tol: Option<f64>,
    pub phase_tol: f64,
    pub tolerances: ClassifyTolerances,
}

impl Default for ClassifyOptions {
    fn default() -> Self {
        ClassifyOptions {
            tau: None,
            regroup_at_critical: false,
            group_tol: None,
            phase_tol: DEFAULT_PHASE_TOL,
            tolerances: ClassifyTolerances::default(),
        }
    }
}

impl ClassifyOptions {
    pub fn at_tau(tau: f64, regroup: bool) -> Self {
        ClassifyOptions {
            tau: Some(tau),
            regroup_at_critical: regroup,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct Classification {
    pub levels: Vec<LevelClassification>,
    pub dark_projector: ComplexMatrix,
    pub bright_projector: ComplexMatrix,
    pub n_dark_total: usize,
    pub n_bright_total: usize,
    pub grouping: Grouping,
    pub warnings: Vec<ClassificationWarning>,
}

impl Classification {
    pub fn dim(&self) -> usize {
        self.dark_projector.nrows()
    }

    pub fn dark_states(&self) -> impl Iterator<Item = &ComplexVector> {
        self.levels.iter().flat_map(|l| l.dark.iter())
    }

    pub fn bright_states(&self) -> impl Iterator<Item = &ComplexVector> {
        self.levels.iter().flat_map(|l| l.bright.iter())
    }

    pub fn is_critical(&self) -> bool {
        !self.warnings.is_empty()
    }
}

/// Classifies every level of the spectrum with respect to the detector and
/// assembles the dark and bright projectors.
pub fn classify(spectrum: &Spectrum, det: &Detector, opts: &ClassifyOptions) -> Result<Classification> {
    let dim = spectrum.dim();
    if det.size() != dim {
        return Err(Error::DimensionMismatch(format!(
            "detector on {} sites, spectrum of dimension {dim}",
            det.size()
        )));
    }
    let group_tol = opts.group_tol.unwrap_or_else(|| default_group_tol(&spectrum.energies));
    let mut levels = group_levels(&spectrum.energies, &spectrum.vectors, group_tol);
    let mut warnings = Vec::new();
    let mut grouping = Grouping::Energy;

    if let Some(tau) = opts.tau {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::InvalidTau(tau));
        }
        let collisions = phase_collisions(&levels, tau, opts.phase_tol);
        if !collisions.is_empty() {
            warnings.push(ClassificationWarning::CriticalTau {
                tau,
                colliding: collisions
                    .iter()
                    .map(|&(a, b)| (levels[a].energy, levels[b].energy))
                    .collect(),
            });
            if opts.regroup_at_critical {
                levels = group_levels_by_phase(&levels, tau, opts.phase_tol);
                grouping = Grouping::Phase;
            }
        }
    }

    Ok(assemble(dim, &levels, det, &opts.tolerances, grouping, warnings))
}

fn assemble(
    dim: usize,
    levels: &[EnergyLevel],
    det: &Detector,
    tol: &ClassifyTolerances,
    grouping: Grouping,
    warnings: Vec<ClassificationWarning>,
) -> Classification {
    let classified: Vec<LevelClassification> =
        levels.par_iter().map(|l| classify_level(l, det, tol)).collect();
    let dark: Vec<ComplexVector> = classified.iter().flat_map(|l| l.dark.clone()).collect();
    let bright: Vec<ComplexVector> = classified.iter().flat_map(|l| l.bright.clone()).collect();
    Classification {
        n_dark_total: dark.len(),
        n_bright_total: bright.len(),
        dark_projector: projector_onto(&dark, dim),
        bright_projector: projector_onto(&bright, dim),
        levels: classified,
        grouping,
        warnings,
    }
}

/// Classification at the default tolerances, grouped by Hamiltonian energy.
pub fn classify_spectrum(spectrum: &Spectrum, det: &Detector) -> Result<Classification> {
    classify(spectrum, det, &ClassifyOptions::default())
}

/// Whether the detector finds every localized initial state with certainty.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CertificateReport {
    /// Every non-degenerate level overlaps some detector site.
    pub c1_holds: bool,
    /// `rank(A_k) = g_k` on every degenerate level.
    pub c2_holds: bool,
    /// Energies of non-degenerate levels that are dark.
    pub c1_failures: Vec<f64>,
    /// Energies of degenerate levels with rank deficit.
    pub c2_failures: Vec<f64>,
    pub detector_rank: usize,
    pub max_degeneracy: usize,
    /// `rank(D) >= max_k g_k`; informational only.
    pub rank_covers_degeneracy: bool,
    pub n_dark_total: usize,
    pub certified: bool,
}

pub fn deterministic_certificate(classification: &Classification, det: &Detector) -> CertificateReport {
    let mut c1_failures = Vec::new();
    let mut c2_failures = Vec::new();
    for l in &classification.levels {
        if l.n_dark == 0 {
            continue;
        }
        if l.degeneracy == 1 {
            c1_failures.push(l.energy);
        } else {
            c2_failures.push(l.energy);
        }
    }
    let max_degeneracy = classification.levels.iter().map(|l| l.degeneracy).max().unwrap_or(0);
    CertificateReport {
        c1_holds: c1_failures.is_empty(),
        c2_holds: c2_failures.is_empty(),
        c1_failures,
        c2_failures,
        detector_rank: det.rank(),
        max_degeneracy,
        rank_covers_degeneracy: det.rank() >= max_degeneracy,
        n_dark_total: classification.n_dark_total,
        certified: classification.n_dark_total == 0,
    }
}

fn interleave(v: &ComplexVector) -> Vec<f64> {
    v.iter().flat_map(|z| [z.re, z.im]).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct LevelExport {
    pub index: usize,
    pub energy: f64,
    pub degeneracy: usize,
    pub rank: usize,
    pub n_dark: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dark: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bright: Option<Vec<Vec<f64>>>,
}

/// JSON-facing view of a [`Classification`]; vectors are interleaved `(re, im)` arrays.
#[derive(Debug, Clone, Serialize)]
pub struct ClassificationExport {
    pub levels: Vec<LevelExport>,
    pub n_dark_total: usize,
    pub n_bright_total: usize,
    pub grouping: Grouping,
    pub warnings: Vec<ClassificationWarning>,
}

impl ClassificationExport {
    pub fn new(c: &Classification, with_vectors: bool) -> Self {
        let vecs = |vs: &[ComplexVector]| with_vectors.then(|| vs.iter().map(interleave).collect());
        ClassificationExport {
            levels: c
                .levels
                .iter()
                .map(|l| LevelExport {
                    index: l.level,
                    energy: l.energy,
                    degeneracy: l.degeneracy,
                    rank: l.rank,
                    n_dark: l.n_dark,
                    dark: vecs(&l.dark),
                    bright: vecs(&l.bright),
                })
                .collect(),
            n_dark_total: c.n_dark_total,
            n_bright_total: c.n_bright_total,
            grouping: c.grouping,
            warnings: c.warnings.clone(),
        }
    }
}

/// `2 pi / |e1 - e2|`, the shortest period at which two energies share a phase.
pub fn first_collision_period(e1: f64, e2: f64) -> f64 {
    TAU / (e1 - e2).abs()
}
