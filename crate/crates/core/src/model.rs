//! Walk models, detectors, initial states and the evolution unitary.

use std::f64::consts::TAU;
use std::fmt;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    self, basis_vector, hermitian_eig, max_abs, ComplexMatrix, ComplexVector, C64, ZERO,
};

/// Hermiticity tolerance applied to every model Hamiltonian.
const MODEL_HERMITIAN_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Ring with nearest-neighbour hopping.
    Nn,
    /// Ring with nearest- and next-nearest-neighbour hopping.
    Nnn,
    Custom,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Nn => "nn",
            ModelKind::Nnn => "nnn",
            ModelKind::Custom => "custom",
        })
    }
}

/// Conditions that are allowed but fall outside the regime the ring formulas
/// were worked out for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "warning", rename_all = "snake_case")]
pub enum ModelWarning {
    /// `L = 2`: both hopping directions land on the same bond.
    CoincidentNeighbours { size: usize },
    /// Odd ring; the closed-form ring analysis assumes an even size.
    OddSize { size: usize },
    /// NNN ring whose size is not a multiple of ten.
    SizeNotMultipleOfTen { size: usize },
}

impl fmt::Display for ModelWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelWarning::CoincidentNeighbours { size } => {
                write!(f, "L={size}: forward and backward hops coincide")
            }
            ModelWarning::OddSize { size } => write!(f, "L={size} is odd"),
            ModelWarning::SizeNotMultipleOfTen { size } => {
                write!(f, "L={size} is not a multiple of 10")
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct WalkModel {
    size: usize,
    kind: ModelKind,
    gamma: f64,
    hamiltonian: ComplexMatrix,
    warnings: Vec<ModelWarning>,
}

impl WalkModel {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn hamiltonian(&self) -> &ComplexMatrix {
        &self.hamiltonian
    }

    pub fn warnings(&self) -> &[ModelWarning] {
        &self.warnings
    }

    pub fn has_analytic_spectrum(&self) -> bool {
        self.kind != ModelKind::Custom
    }

    /// Wraps an arbitrary Hermitian matrix as a custom model.
    pub fn from_hamiltonian(hamiltonian: ComplexMatrix) -> Result<Self> {
        if !hamiltonian.is_square() {
            return Err(Error::DimensionMismatch(format!(
                "Hamiltonian is {}x{}",
                hamiltonian.nrows(),
                hamiltonian.ncols()
            )));
        }
        check_hermitian(&hamiltonian)?;
        let size = hamiltonian.nrows();
        if size < 2 {
            return Err(Error::InvalidSize {
                kind: "custom",
                size,
                min: 2,
            });
        }
        Ok(WalkModel {
            size,
            kind: ModelKind::Custom,
            gamma: 1.0,
            hamiltonian,
            warnings: Vec::new(),
        })
    }

    /// Spectrum of the model: exact plane waves for the rings, numerical
    /// diagonalization otherwise.
    pub fn spectrum(&self) -> Result<Spectrum> {
        match analytic_spectrum(self) {
            Some(s) => Ok(s),
            None => numeric_spectrum(&self.hamiltonian),
        }
    }
}

fn check_hermitian(h: &ComplexMatrix) -> Result<()> {
    let deviation = numerics::hermitian_deviation(h);
    if deviation > MODEL_HERMITIAN_TOL * max_abs(h).max(1.0) {
        return Err(Error::NonHermitian { deviation });
    }
    Ok(())
}

fn ring_hamiltonian(size: usize, gamma: f64, offsets: &[usize]) -> ComplexMatrix {
    let mut h = DMatrix::from_element(size, size, ZERO);
    for &off in offsets {
        for i in 0..size {
            let j = (i + off) % size;
            h[(j, i)] -= C64::new(gamma, 0.0);
            h[(i, j)] -= C64::new(gamma, 0.0);
        }
    }
    h
}

/// Ring of `size` sites with hopping `-gamma` between neighbours.
pub fn build_nn(size: usize, gamma: f64) -> Result<WalkModel> {
    if size < 2 {
        return Err(Error::InvalidSize {
            kind: "nn",
            size,
            min: 2,
        });
    }
    let mut warnings = Vec::new();
    if size == 2 {
        warnings.push(ModelWarning::CoincidentNeighbours { size });
    }
    if size % 2 == 1 {
        warnings.push(ModelWarning::OddSize { size });
    }
    Ok(WalkModel {
        size,
        kind: ModelKind::Nn,
        gamma,
        hamiltonian: ring_hamiltonian(size, gamma, &[1]),
        warnings,
    })
}

/// Ring with both nearest- and next-nearest-neighbour hopping `-gamma`.
pub fn build_nnn(size: usize, gamma: f64) -> Result<WalkModel> {
    if size < 5 {
        return Err(Error::InvalidSize {
            kind: "nnn",
            size,
            min: 5,
        });
    }
    let mut warnings = Vec::new();
    if size % 10 != 0 {
        warnings.push(ModelWarning::SizeNotMultipleOfTen { size });
    }
    Ok(WalkModel {
        size,
        kind: ModelKind::Nnn,
        gamma,
        hamiltonian: ring_hamiltonian(size, gamma, &[1, 2]),
        warnings,
    })
}

#[derive(Debug, Deserialize)]
struct CustomFile {
    #[serde(rename = "L")]
    size: usize,
    entries: Vec<[f64; 4]>,
}

/// Parses the JSON Hamiltonian format `{ "L": n, "entries": [[i, j, re, im], ...] }`.
///
/// Entries are summed into an `L x L` matrix exactly as listed; nothing is
/// mirrored, so both `(i, j)` and `(j, i)` must be present.
pub fn parse_custom(json: &str) -> Result<WalkModel> {
    let file: CustomFile = serde_json::from_str(json).map_err(|e| Error::Parse(e.to_string()))?;
    let size = file.size;
    let mut h = DMatrix::from_element(size, size, ZERO);
    for (k, entry) in file.entries.iter().enumerate() {
        let [i, j, re, im] = *entry;
        let as_index = |x: f64| -> Result<usize> {
            if x.fract() != 0.0 || x < 0.0 || !x.is_finite() {
                return Err(Error::Parse(format!("entry {k}: index {x} is not a non-negative integer")));
            }
            Ok(x as usize)
        };
        let (row, col) = (as_index(i)?, as_index(j)?);
        if row >= size || col >= size {
            return Err(Error::IndexOutOfRange { row, col, size });
        }
        if !re.is_finite() || !im.is_finite() {
            return Err(Error::NonFinite { row, col });
        }
        h[(row, col)] += C64::new(re, im);
    }
    WalkModel::from_hamiltonian(h)
}

pub fn load_custom(path: &Path) -> Result<WalkModel> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    parse_custom(&text)
}

/// Serializes a Hamiltonian in the format read by [`parse_custom`].
pub fn custom_json(hamiltonian: &ComplexMatrix) -> String {
    let mut entries = Vec::new();
    for i in 0..hamiltonian.nrows() {
        for j in 0..hamiltonian.ncols() {
            let z = hamiltonian[(i, j)];
            if z != ZERO {
                entries.push(serde_json::json!([i, j, z.re, z.im]));
            }
        }
    }
    serde_json::json!({ "L": hamiltonian.nrows(), "entries": entries }).to_string()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpectrumSource {
    Analytic,
    Numeric,
}

/// Eigenpairs sorted by ascending energy.
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub energies: Vec<f64>,
    /// Column `i` is the eigenvector of `energies[i]`.
    pub vectors: ComplexMatrix,
    /// Plane-wave momentum index `p` of each column for the ring models.
    pub momenta: Option<Vec<usize>>,
    pub source: SpectrumSource,
}

impl Spectrum {
    pub fn dim(&self) -> usize {
        self.energies.len()
    }

    pub fn vector(&self, i: usize) -> ComplexVector {
        self.vectors.column(i).into_owned()
    }
}

/// Ring dispersion; `p` is folded so that `p` and `L - p` give bit-identical energies.
fn ring_energy(kind: ModelKind, size: usize, gamma: f64, p: usize) -> f64 {
    let q = p.min(size - p) as f64;
    let n = size as f64;
    match kind {
        ModelKind::Nn => -2.0 * gamma * (TAU * q / n).cos(),
        ModelKind::Nnn => -2.0 * gamma * ((TAU * q / n).cos() + (2.0 * TAU * q / n).cos()),
        ModelKind::Custom => unreachable!("custom models have no dispersion"),
    }
}

/// `(1/sqrt(L)) sum_j exp(i 2 pi p j / L) |j>`
pub fn plane_wave(size: usize, p: usize) -> ComplexVector {
    let norm = 1.0 / (size as f64).sqrt();
    ComplexVector::from_iterator(
        size,
        (0..size).map(|j| C64::from_polar(norm, TAU * ((p * j) % size) as f64 / size as f64)),
    )
}

/// Closed-form spectrum of the ring models; `None` for custom models.
///
/// Columns are sorted by energy, ties broken by increasing momentum `p`.
pub fn analytic_spectrum(model: &WalkModel) -> Option<Spectrum> {
    if !model.has_analytic_spectrum() {
        return None;
    }
    let size = model.size;
    let mut labelled: Vec<(f64, usize)> = (0..size)
        .map(|p| (ring_energy(model.kind, size, model.gamma, p), p))
        .collect();
    labelled.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let mut vectors = DMatrix::from_element(size, size, ZERO);
    for (col, &(_, p)) in labelled.iter().enumerate() {
        vectors.set_column(col, &plane_wave(size, p));
    }
    Some(Spectrum {
        energies: labelled.iter().map(|x| x.0).collect(),
        vectors,
        momenta: Some(labelled.iter().map(|x| x.1).collect()),
        source: SpectrumSource::Analytic,
    })
}

pub fn numeric_spectrum(hamiltonian: &ComplexMatrix) -> Result<Spectrum> {
    let eig = hermitian_eig(hamiltonian)?;
    Ok(Spectrum {
        energies: eig.values,
        vectors: eig.vectors,
        momenta: None,
        source: SpectrumSource::Numeric,
    })
}

/// Projective detector `D = sum_i |d_i><d_i|` on a set of lattice sites.
#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    size: usize,
    sites: Vec<usize>,
    projector: ComplexMatrix,
}

impl Detector {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn sites(&self) -> &[usize] {
        &self.sites
    }

    pub fn rank(&self) -> usize {
        self.sites.len()
    }

    pub fn projector(&self) -> &ComplexMatrix {
        &self.projector
    }

    /// `I - D`
    pub fn complement(&self) -> ComplexMatrix {
        ComplexMatrix::identity(self.size, self.size) - &self.projector
    }

    pub fn contains(&self, site: usize) -> bool {
        self.sites.contains(&site)
    }

    /// Same detector shifted by `shift` sites around the ring.
    pub fn shifted(&self, shift: usize) -> Detector {
        let sites: Vec<usize> = self.sites.iter().map(|&d| (d + shift) % self.size).collect();
        build_detector(self.size, &sites).expect("shift preserves validity")
    }
}

pub fn build_detector(size: usize, sites: &[usize]) -> Result<Detector> {
    if sites.is_empty() {
        return Err(Error::EmptyDetector);
    }
    for (k, &site) in sites.iter().enumerate() {
        if site >= size {
            return Err(Error::SiteOutOfRange { site, size });
        }
        if sites[..k].contains(&site) {
            return Err(Error::DuplicateSite(site));
        }
    }
    if sites.len() >= size {
        return Err(Error::FullSpaceDetector(size));
    }
    let mut projector = DMatrix::from_element(size, size, ZERO);
    for &d in sites {
        projector[(d, d)] = numerics::ONE;
    }
    Ok(Detector {
        size,
        sites: sites.to_vec(),
        projector,
    })
}

/// Normalized initial state, optionally labelled by the site it is localized on.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialState {
    vector: ComplexVector,
    label: Option<usize>,
}

const NORM_TOL: f64 = 1e-12;

impl InitialState {
    pub fn localized(size: usize, site: usize) -> Result<Self> {
        if site >= size {
            return Err(Error::SiteOutOfRange { site, size });
        }
        Ok(InitialState {
            vector: basis_vector(size, site),
            label: Some(site),
        })
    }

    /// Accepts a vector that is already normalized to within `1e-12`.
    pub fn from_vector(vector: ComplexVector) -> Result<Self> {
        let norm = vector.norm();
        if (norm - 1.0).abs() > NORM_TOL {
            return Err(Error::NotNormalized(norm));
        }
        if vector.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::NonFinite { row: 0, col: 0 });
        }
        Ok(InitialState { vector, label: None })
    }

    /// Normalizes `vector`; fails on a zero vector.
    pub fn normalized(vector: ComplexVector) -> Result<Self> {
        let norm = vector.norm();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::NotNormalized(norm));
        }
        Self::from_vector(vector.unscale(norm))
    }

    pub fn vector(&self) -> &ComplexVector {
        &self.vector
    }

    pub fn label(&self) -> Option<usize> {
        self.label
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

/// `U(tau) = exp(-i H tau)`
#[derive(Debug, Clone)]
pub struct EvolutionUnitary {
    pub tau: f64,
    pub matrix: ComplexMatrix,
}

/// Builds `U(tau)` from the model spectrum as `V diag(exp(-i e_p tau)) V^dagger`.
pub fn evolution(model: &WalkModel, tau: f64) -> Result<EvolutionUnitary> {
    let spectrum = model.spectrum()?;
    evolution_from_spectrum(&spectrum, tau)
}

pub fn evolution_from_spectrum(spectrum: &Spectrum, tau: f64) -> Result<EvolutionUnitary> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidTau(tau));
    }
    let phases = ComplexVector::from_iterator(
        spectrum.dim(),
        spectrum.energies.iter().map(|&e| C64::from_polar(1.0, -e * tau)),
    );
    let v = &spectrum.vectors;
    let matrix = v * ComplexMatrix::from_diagonal(&phases) * v.adjoint();
    Ok(EvolutionUnitary { tau, matrix })
}
