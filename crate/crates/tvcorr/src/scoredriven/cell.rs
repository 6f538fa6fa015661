//! Correlation cells: the independent sub-matrices a correlation filter
//! reconstructs, differentiates and evaluates at every step.
//!
//! A block structure partitions the assets into contiguous cells such that
//! the correlation matrix is block-diagonal across cells. Each cell carries
//! its own slice of the log-domain state vector:
//!
//! * a **dense** cell's state is the strict-lower half of the cell's matrix
//!   logarithm (one channel per asset pair);
//! * a **block** cell's state is the reduced log-domain vector of its block
//!   pattern (one channel per free block cell).
//!
//! Both kinds reconstruct through the shared spectral machinery of
//! [`crate::matcorr`], so the chain rule for the cell square root — needed
//! by the score recursion — is a single code path: push the state basis
//! directions through the diagonal-corrected Fréchet derivative of `exp`,
//! then through the Sylvester solve onto the square-root scale.

use nalgebra::{DMatrix, DVector, DVectorView};

use crate::blockcorr::{canonical_of_eta, BlockSpec, CanonicalSpectrum, Structure};
use crate::convt::{self, ConvolutionT};
use crate::error::{Error, Result};
use crate::indexmaps::{vecl_len, vecl_pairs};
use crate::matcorr::{dcorr_directions, spectrum_of_gamma, CorrSpectrum, GammaVec};

/// The parametrization of one diagonal cell of the correlation matrix.
#[derive(Debug, Clone)]
pub enum CellKind {
    /// Dense cell: state is the strict lower triangle of `log C`.
    Dense {
        /// Number of assets in the cell.
        n: usize,
    },
    /// Block-patterned cell: state is the reduced block parameter of `spec`
    /// (always a single-sector full-block pattern).
    Block {
        /// The block pattern within the cell.
        spec: BlockSpec,
    },
}

/// One diagonal cell of the correlation matrix: a contiguous asset range
/// plus the parametrization of its interior.
#[derive(Debug, Clone)]
pub struct CorrCell {
    /// Global index of the first asset in the cell.
    pub first: usize,
    /// Interior parametrization.
    pub kind: CellKind,
}

impl CorrCell {
    /// Number of assets in the cell.
    pub fn n(&self) -> usize {
        match &self.kind {
            CellKind::Dense { n } => *n,
            CellKind::Block { spec } => spec.n(),
        }
    }

    /// Number of state channels the cell consumes.
    pub fn n_state(&self) -> usize {
        match &self.kind {
            CellKind::Dense { n } => vecl_len(*n),
            CellKind::Block { spec } => spec.eta_len(),
        }
    }

    /// Global asset range covered by the cell.
    pub fn range(&self) -> std::ops::Range<usize> {
        self.first..self.first + self.n()
    }
}

/// Splits a block structure into its independent diagonal cells, in asset
/// order. The concatenation of the cells' state slices reproduces the
/// structure's log-domain parameter vector exactly.
///
/// * `unrestricted` → one dense cell over all assets;
/// * `fbc` → one block cell over all groups;
/// * `sbc` → one block cell per sector;
/// * `dbc` → one cell per group (equicorrelation interior).
///
/// Single-asset cells carry zero state channels.
pub fn cells_for(spec: &BlockSpec) -> Result<Vec<CorrCell>> {
    let mut out = Vec::new();
    match spec.structure {
        Structure::Unrestricted => {
            out.push(CorrCell {
                first: 0,
                kind: CellKind::Dense { n: spec.n() },
            });
        }
        Structure::FullBlock => {
            let sub = BlockSpec::single_sector(spec.group_sizes.clone(), Structure::FullBlock)?;
            out.push(CorrCell {
                first: 0,
                kind: CellKind::Block { spec: sub },
            });
        }
        Structure::SparseBlock => {
            let sector_assets = spec.sector_asset_ranges();
            for (s, range) in sector_assets.iter().enumerate() {
                let sub = spec.sector_subspec(s, Structure::FullBlock)?;
                if sub.n() == 1 {
                    out.push(CorrCell {
                        first: range.start,
                        kind: CellKind::Dense { n: 1 },
                    });
                } else {
                    out.push(CorrCell {
                        first: range.start,
                        kind: CellKind::Block { spec: sub },
                    });
                }
            }
        }
        Structure::DiagonalBlock => {
            for range in spec.group_ranges() {
                let sz = range.len();
                if sz == 1 {
                    out.push(CorrCell {
                        first: range.start,
                        kind: CellKind::Dense { n: 1 },
                    });
                } else {
                    let sub = BlockSpec::single_sector(vec![sz], Structure::FullBlock)?;
                    out.push(CorrCell {
                        first: range.start,
                        kind: CellKind::Block { spec: sub },
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Restricts a tail partition to the given cells, erroring if any tail
/// group straddles a cell boundary (the per-cell factorization of the
/// density would then be invalid).
pub(crate) fn split_tails(tails: &ConvolutionT, cells: &[CorrCell]) -> Result<Vec<ConvolutionT>> {
    let ranges = tails.group_ranges();
    let nus = tails.nu();
    let sizes = tails.group_sizes();
    let mut out = Vec::with_capacity(cells.len());
    for cell in cells {
        let cr = cell.range();
        let mut cell_sizes = Vec::new();
        let mut cell_nus = Vec::new();
        for (g, gr) in ranges.iter().enumerate() {
            if gr.start >= cr.start && gr.end <= cr.end {
                cell_sizes.push(sizes[g]);
                cell_nus.push(nus[g]);
            } else if gr.start < cr.end && gr.end > cr.start {
                return Err(Error::Unsupported(format!(
                    "tail group {g} (assets {}..{}) straddles the correlation cell \
                     covering assets {}..{}; use the decoupled estimator, whose \
                     residual stage handles globally coupled tails",
                    gr.start, gr.end, cr.start, cr.end
                )));
            }
        }
        if cell_sizes.iter().sum::<usize>() != cr.len() {
            return Err(Error::BlockStructure {
                what: "tail partition",
                detail: format!(
                    "tail groups do not tile the correlation cell covering assets {}..{}",
                    cr.start, cr.end
                ),
            });
        }
        out.push(ConvolutionT::new(cell_sizes, cell_nus)?);
    }
    Ok(out)
}

/// Per-cell machinery fixed across filter steps: the state basis directions
/// in the log domain.
#[derive(Debug, Clone)]
pub(crate) struct CellEngine {
    pub cell: CorrCell,
    /// Log-domain direction matrix for each state channel (cell-local).
    bases: Vec<DMatrix<f64>>,
}

impl CellEngine {
    pub fn new(cell: CorrCell) -> Self {
        let bases = state_bases(&cell.kind);
        Self { cell, bases }
    }

    /// Reconstructs the cell at the given state slice: correlation spectrum,
    /// square roots, log-determinant and the square-root derivative along
    /// every state channel.
    pub fn reconstruct(&self, state: DVectorView<'_, f64>) -> Result<CellState> {
        let n = self.cell.n();
        if state.len() != self.cell.n_state() {
            return Err(Error::DimensionMismatch {
                what: "cell state slice",
                expected: self.cell.n_state(),
                got: state.len(),
            });
        }
        let (spectrum, sqrt, inv_sqrt, log_det) = match &self.cell.kind {
            CellKind::Dense { n } => {
                let gamma = GammaVec::new(*n, state.clone_owned())?;
                let spectrum = spectrum_of_gamma(&gamma)?;
                let sqrt = spectrum.sqrt();
                let inv_sqrt = spectrum.inv_sqrt();
                let log_det = spectrum.log_det();
                (spectrum, sqrt, inv_sqrt, log_det)
            }
            CellKind::Block { spec } => {
                let canonical = canonical_of_eta(&state.clone_owned(), spec)?;
                let cs = CanonicalSpectrum::new(&canonical, spec)?;
                let sqrt = cs.sqrt_dense(spec);
                let inv_sqrt = cs.inv_sqrt_dense(spec);
                let log_det = cs.log_det(spec);
                (cs.corr_spectrum(spec), sqrt, inv_sqrt, log_det)
            }
        };
        let dsqrt = if self.bases.is_empty() {
            Vec::new()
        } else {
            let dirs = dcorr_directions(&spectrum, &self.bases)?;
            dirs.iter().map(|d| spectrum.dsqrt_solve(d)).collect()
        };
        debug_assert_eq!(sqrt.nrows(), n);
        Ok(CellState {
            spectrum,
            sqrt,
            inv_sqrt,
            log_det,
            dsqrt,
        })
    }
}

/// One reconstructed cell: everything a filter step needs.
#[derive(Debug, Clone)]
pub(crate) struct CellState {
    pub spectrum: CorrSpectrum,
    pub sqrt: DMatrix<f64>,
    pub inv_sqrt: DMatrix<f64>,
    pub log_det: f64,
    /// `∂C^{1/2}/∂θ_p` for each state channel `p` of the cell.
    pub dsqrt: Vec<DMatrix<f64>>,
}

impl CellState {
    /// Whitened observation `V = C^{-1/2} x`.
    pub fn whiten(&self, x: DVectorView<'_, f64>) -> DVector<f64> {
        &self.inv_sqrt * x
    }

    /// `H_p = C^{-1/2} ∂C^{1/2}/∂θ_p` for each state channel: the scaled
    /// square-root derivatives entering the information metric. These do not
    /// depend on any diagonal standard-deviation scaling of the cell.
    pub fn h_state(&self) -> Vec<DMatrix<f64>> {
        self.dsqrt.iter().map(|d| &self.inv_sqrt * d).collect()
    }
}

/// Likelihood and score pieces of one cell under its own tail partition.
#[derive(Debug, Clone)]
pub(crate) struct CellEval {
    /// Whitened observation `V = C^{-1/2} x`.
    pub v: DVector<f64>,
    /// Per-coordinate tail weights `w_i = (ν_g + m_g)/(ν_g − 2 + ‖V_g‖²)`.
    pub weights: DVector<f64>,
    /// Cell log-density contribution `−½ log|C| + Σ_g c_g − …`.
    pub loglik: f64,
    /// `P = C^{-1/2}((w∘V)V' − I)`: the correlation-scale score matrix.
    /// The full matrix-scale score is `Λ⁻¹ P` for a cell scaled by
    /// standard deviations `Λ`, and `P` itself for a pure correlation cell.
    pub p_mat: DMatrix<f64>,
}

/// Evaluates one cell: whitens `x`, accumulates the group log-densities and
/// forms the score matrix `P`. Requires the tail partition to live entirely
/// within the cell.
pub(crate) fn evaluate_cell(
    state: &CellState,
    tails: &ConvolutionT,
    x: DVectorView<'_, f64>,
) -> CellEval {
    let n = x.len();
    let v = state.whiten(x);
    let mut loglik = -0.5 * state.log_det;
    let mut weights = DVector::zeros(n);
    for (g, gr) in tails.group_ranges().iter().enumerate() {
        let m = gr.len();
        let nu = tails.nu()[g];
        let vsq: f64 = gr.clone().map(|i| v[i] * v[i]).sum();
        loglik += convt::group_log_density(nu, m, vsq);
        let w = convt::tail_weight(nu, m, vsq);
        for i in gr.clone() {
            weights[i] = w;
        }
    }
    let p_mat = score_matrix(state, &v, &weights);
    CellEval {
        v,
        weights,
        loglik,
        p_mat,
    }
}

/// `P = C^{-1/2}((w∘V)V' − I)` for an already-whitened observation.
pub(crate) fn score_matrix(
    state: &CellState,
    v: &DVector<f64>,
    weights: &DVector<f64>,
) -> DMatrix<f64> {
    let n = v.len();
    let wv = DVector::from_fn(n, |i, _| weights[i] * v[i]);
    let mut inner = &wv * v.transpose();
    for i in 0..n {
        inner[(i, i)] -= 1.0;
    }
    &state.inv_sqrt * inner
}

/// Gradient of the cell log-density with respect to the cell's state
/// channels: `∇_p = ⟨∂C^{1/2}/∂θ_p, P⟩`.
pub(crate) fn state_gradient(state: &CellState, p_mat: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_fn(state.dsqrt.len(), |p, _| state.dsqrt[p].dot(p_mat))
}

#[cfg(test)]
fn state_bases_for_tests(kind: &CellKind) -> Vec<DMatrix<f64>> {
    state_bases(kind)
}

/// Log-domain direction matrices for the cell's state channels.
fn state_bases(kind: &CellKind) -> Vec<DMatrix<f64>> {
    match kind {
        CellKind::Dense { n } => vecl_pairs(*n)
            .iter()
            .map(|&(r, c)| {
                let mut b = DMatrix::zeros(*n, *n);
                b[(r, c)] = 1.0;
                b[(c, r)] = 1.0;
                b
            })
            .collect(),
        CellKind::Block { spec } => {
            let n = spec.n();
            let ranges = spec.group_ranges();
            spec.eta_layout()
                .iter()
                .map(|&(k, l)| {
                    let mut b = DMatrix::zeros(n, n);
                    for i in ranges[k].clone() {
                        for j in ranges[l].clone() {
                            if i != j {
                                b[(i, j)] = 1.0;
                                b[(j, i)] = 1.0;
                            }
                        }
                    }
                    b
                })
                .collect()
        }
    }
}
