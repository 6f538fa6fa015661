//! Block-structured correlation matrices and their canonical form.
//!
//! A block-constant correlation matrix — constant within and between groups
//! of exchangeable assets — is fully described by a small `K × K` core.
//! With groups of sizes `n_1, …, n_K`, the canonical representation is
//!
//! `C = Q · blkdiag(A, δ_1 I_{n_1−1}, …, δ_K I_{n_K−1}) · Q'`,
//!
//! where the first `K` columns of the orthonormal `Q` are normalized group
//! indicators, the rest are within-group (Helmert) contrasts, `A` collects
//! the group-level covariance `A_kk = 1 + (n_k−1)ϱ_kk`,
//! `A_kl = ϱ_kl √(n_k n_l)`, and `δ_k = 1 − ϱ_kk`. Every spectral
//! computation on `C` then reduces to the `K × K` core.
//!
//! The log-domain parameter `η` generalizes `γ = vecl(log C)`: the matrix
//! logarithm of a block matrix is block-constant with the same pattern, and
//! `η` stacks its distinct values (scaled to match the dense log entries).
//! Three nested patterns are supported: a dense block pattern
//! ([`Structure::FullBlock`]), block-diagonal by sector
//! ([`Structure::SparseBlock`]), and block-diagonal by group
//! ([`Structure::DiagonalBlock`], equicorrelation within groups). The
//! reconstruction `η → C` runs the same unit-diagonal fixed point as the
//! dense case, but entirely in the `K`-dimensional canonical space.

use nalgebra::{DMatrix, DVector, DVectorView};
use serde::{Deserialize, Serialize};

use crate::indexmaps::vecl_pairs;
use crate::matcorr::{sym_eigen, CorrMatrix, CorrSpectrum};
use crate::{Error, Result};

/// Tolerance for block-constancy checks on ingested matrices.
const BLOCK_TOL: f64 = 1e-10;
/// Tolerance on the unit-diagonal residual of the canonical fixed point.
const FIXED_POINT_TOL: f64 = 1e-12;
/// Iteration cap for the canonical fixed point.
const FIXED_POINT_MAX_ITERS: usize = 500;

/// Which block pattern the log-domain parameter vector ranges over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Structure {
    /// No block structure: the parameter is the dense `γ = vecl(log C)`.
    #[serde(rename = "unrestricted")]
    Unrestricted,
    /// All `K(K+1)/2` block cells free (minus singleton diagonal cells).
    #[serde(rename = "fbc")]
    FullBlock,
    /// Block-diagonal by sector: cells between different sectors are zero.
    #[serde(rename = "sbc")]
    SparseBlock,
    /// Block-diagonal by group: only within-group equicorrelation cells.
    #[serde(rename = "dbc")]
    DiagonalBlock,
}

/// Partition of `n` assets into `K` exchangeable groups, each group
/// belonging to a sector, together with the block pattern in force.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    /// Number of assets in each group (all ≥ 1).
    pub group_sizes: Vec<usize>,
    /// Sector index of each group; must be nondecreasing starting at 0
    /// with no gaps, so sectors are contiguous runs of groups.
    pub sector_of_group: Vec<usize>,
    /// Block pattern for the log-domain parameter.
    pub structure: Structure,
}

impl BlockSpec {
    /// Validates and builds a block specification.
    pub fn new(
        group_sizes: Vec<usize>,
        sector_of_group: Vec<usize>,
        structure: Structure,
    ) -> Result<Self> {
        if group_sizes.is_empty() {
            return Err(Error::domain("block specification has no groups"));
        }
        if group_sizes.iter().any(|&s| s == 0) {
            return Err(Error::domain("group sizes must all be at least 1"));
        }
        if sector_of_group.len() != group_sizes.len() {
            return Err(Error::DimensionMismatch {
                what: "sector map length",
                expected: group_sizes.len(),
                got: sector_of_group.len(),
            });
        }
        let mut prev = 0usize;
        for (k, &s) in sector_of_group.iter().enumerate() {
            if k == 0 && s != 0 {
                return Err(Error::domain("sector indices must start at 0"));
            }
            if k > 0 && (s < prev || s > prev + 1) {
                return Err(Error::domain(
                    "sector indices must be nondecreasing without gaps",
                ));
            }
            prev = s;
        }
        Ok(BlockSpec {
            group_sizes,
            sector_of_group,
            structure,
        })
    }

    /// Convenience constructor with every group in one sector.
    pub fn single_sector(group_sizes: Vec<usize>, structure: Structure) -> Result<Self> {
        let sectors = vec![0; group_sizes.len()];
        BlockSpec::new(group_sizes, sectors, structure)
    }

    /// Total number of assets.
    pub fn n(&self) -> usize {
        self.group_sizes.iter().sum()
    }

    /// Number of groups.
    pub fn n_groups(&self) -> usize {
        self.group_sizes.len()
    }

    /// Number of sectors.
    pub fn n_sectors(&self) -> usize {
        self.sector_of_group.last().map_or(0, |&s| s + 1)
    }

    /// Asset index range of each group.
    pub fn group_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut out = Vec::with_capacity(self.n_groups());
        let mut start = 0;
        for &sz in &self.group_sizes {
            out.push(start..start + sz);
            start += sz;
        }
        out
    }

    /// Group index of each asset.
    pub fn group_of_asset(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.n());
        for (k, &sz) in self.group_sizes.iter().enumerate() {
            out.extend(std::iter::repeat(k).take(sz));
        }
        out
    }

    /// Group index range of each sector.
    pub fn sector_group_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut out: Vec<std::ops::Range<usize>> = Vec::new();
        for (k, &s) in self.sector_of_group.iter().enumerate() {
            if s == out.len() {
                out.push(k..k + 1);
            } else {
                out[s].end = k + 1;
            }
        }
        out
    }

    /// Asset index range of each sector.
    pub fn sector_asset_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let ranges = self.group_ranges();
        self.sector_group_ranges()
            .into_iter()
            .map(|gr| ranges[gr.start].start..ranges[gr.end - 1].end)
            .collect()
    }

    /// The sub-specification covering one sector (single-sector, same
    /// structure semantics within the sector).
    pub fn sector_subspec(&self, sector: usize, structure: Structure) -> Result<BlockSpec> {
        let gr = self
            .sector_group_ranges()
            .get(sector)
            .cloned()
            .ok_or_else(|| Error::domain(format!("sector {sector} out of range")))?;
        BlockSpec::single_sector(self.group_sizes[gr].to_vec(), structure)
    }

    /// Number of free log-domain parameters under the declared structure.
    pub fn eta_len(&self) -> usize {
        self.eta_layout().len()
    }

    /// The block cell `(k, l)` (group indices, `k ≥ l`) of each η entry, in
    /// parameter order: column-major lower triangle including the diagonal
    /// over group pairs, restricted by the structure, with diagonal cells of
    /// singleton groups dropped (a single asset has no within-group
    /// correlation).
    ///
    /// [`Structure::SparseBlock`] concatenates per-sector layouts in sector
    /// order; [`Structure::DiagonalBlock`] keeps only diagonal cells.
    pub fn eta_layout(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        match self.structure {
            Structure::Unrestricted => {
                // Dense γ handles this case; the block layout is not used.
            }
            Structure::FullBlock => {
                push_vech_cells(&mut out, 0..self.n_groups(), &self.group_sizes);
            }
            Structure::SparseBlock => {
                for gr in self.sector_group_ranges() {
                    push_vech_cells(&mut out, gr, &self.group_sizes);
                }
            }
            Structure::DiagonalBlock => {
                for (k, &sz) in self.group_sizes.iter().enumerate() {
                    if sz >= 2 {
                        out.push((k, k));
                    }
                }
            }
        }
        out
    }

    /// Maps each `vecl` position of the dense log-domain matrix to the η
    /// entry it replicates (`None` for structurally zero positions).
    ///
    /// The resulting expansion is the 0/1 matrix `B` with `γ = B η`: each
    /// η value is copied into every position of its block cell, and cells
    /// outside the declared pattern are zero.
    pub fn eta_expansion(&self) -> EtaExpansion {
        let n = self.n();
        let layout = self.eta_layout();
        let mut cell_to_col = std::collections::HashMap::new();
        for (col, &cell) in layout.iter().enumerate() {
            cell_to_col.insert(cell, col);
        }
        let groups = self.group_of_asset();
        let col_of_pair = vecl_pairs(n)
            .into_iter()
            .map(|(i, j)| {
                let (gi, gj) = (groups[i], groups[j]);
                let cell = if gi >= gj { (gi, gj) } else { (gj, gi) };
                cell_to_col.get(&cell).copied()
            })
            .collect();
        EtaExpansion {
            n,
            cols: layout.len(),
            col_of_pair,
        }
    }
}

/// Appends the vech-ordered cells over the group range, skipping diagonal
/// cells of singleton groups.
fn push_vech_cells(
    out: &mut Vec<(usize, usize)>,
    groups: std::ops::Range<usize>,
    sizes: &[usize],
) {
    for l in groups.clone() {
        for k in l..groups.end {
            if k == l && sizes[k] < 2 {
                continue;
            }
            out.push((k, l));
        }
    }
}

/// The 0/1 expansion `γ = B η` as an index map over `vecl` positions.
#[derive(Debug, Clone)]
pub struct EtaExpansion {
    /// Dense dimension `n`.
    pub n: usize,
    /// Number of η entries (columns of `B`).
    pub cols: usize,
    /// For each `vecl` position, the η entry it replicates, if any.
    pub col_of_pair: Vec<Option<usize>>,
}

impl EtaExpansion {
    /// Expands η into the dense `γ` vector.
    pub fn expand(&self, eta: &DVector<f64>) -> DVector<f64> {
        assert_eq!(eta.len(), self.cols);
        DVector::from_iterator(
            self.col_of_pair.len(),
            self.col_of_pair
                .iter()
                .map(|c| c.map_or(0.0, |col| eta[col])),
        )
    }

    /// The dense `B` matrix (rows: `vecl` positions, columns: η entries);
    /// intended for tests and small problems.
    pub fn dense(&self) -> DMatrix<f64> {
        let mut b = DMatrix::zeros(self.col_of_pair.len(), self.cols);
        for (row, c) in self.col_of_pair.iter().enumerate() {
            if let Some(col) = c {
                b[(row, *col)] = 1.0;
            }
        }
        b
    }
}

/// The canonical core of a block-constant correlation matrix: the group
/// covariance `A` and the within-group contrast eigenvalues `δ`.
///
/// For singleton groups `δ_k` is unused and stored as `1.0`.
#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalBlock {
    /// `K × K` group-level matrix.
    pub a: DMatrix<f64>,
    /// Within-group eigenvalue `δ_k = 1 − ϱ_kk`, one per group.
    pub delta: Vec<f64>,
}

impl CanonicalBlock {
    /// Within-group correlation `ϱ_kk` of group `k` (size `n_k ≥ 2`).
    pub fn within_rho(&self, k: usize, n_k: usize) -> f64 {
        (self.a[(k, k)] - 1.0) / (n_k as f64 - 1.0)
    }
}

/// Eigendecomposition of the canonical core, the block analogue of
/// [`CorrSpectrum`]: one `K × K` symmetric eigendecomposition serves every
/// matrix function of the full `n × n` block matrix.
#[derive(Debug, Clone)]
pub struct CanonicalSpectrum {
    /// Eigenvectors of `A`.
    pub qa: DMatrix<f64>,
    /// Eigenvalues of `A` (all positive for a valid block correlation).
    pub a_eigs: DVector<f64>,
    /// Within-group eigenvalues `δ_k` (placeholder `1.0` for singletons).
    pub delta: Vec<f64>,
}

impl CanonicalSpectrum {
    /// Decomposes the canonical core, checking positive definiteness of the
    /// implied correlation matrix (`A` positive definite and all `δ_k > 0`).
    pub fn new(canonical: &CanonicalBlock, spec: &BlockSpec) -> Result<Self> {
        let (qa, a_eigs) = sym_eigen(&canonical.a);
        let min_a = a_eigs.min();
        let min_delta = canonical
            .delta
            .iter()
            .zip(&spec.group_sizes)
            .filter(|(_, &sz)| sz >= 2)
            .map(|(&d, _)| d)
            .fold(f64::INFINITY, f64::min);
        let min_eig = min_a.min(min_delta);
        if min_eig <= 1e-12 {
            return Err(Error::NotPositiveDefinite {
                min_eigenvalue: min_eig,
            });
        }
        Ok(CanonicalSpectrum {
            qa,
            a_eigs,
            delta: canonical.delta.clone(),
        })
    }

    /// `log |C| = log |A| + Σ_k (n_k − 1) log δ_k`.
    pub fn log_det(&self, spec: &BlockSpec) -> f64 {
        let mut out: f64 = self.a_eigs.iter().map(|a| a.ln()).sum();
        for (k, &sz) in spec.group_sizes.iter().enumerate() {
            if sz >= 2 {
                out += (sz as f64 - 1.0) * self.delta[k].ln();
            }
        }
        out
    }

    /// Applies a spectral power of `A` to a `K`-vector: `A^p y`.
    pub fn a_power_apply(&self, p: f64, y: &DVector<f64>) -> DVector<f64> {
        let mut inner = self.qa.transpose() * y;
        for i in 0..inner.len() {
            inner[i] *= self.a_eigs[i].powf(p);
        }
        &self.qa * inner
    }

    /// Dense spectral power of `A` as a `K × K` matrix.
    pub fn a_power(&self, p: f64) -> DMatrix<f64> {
        let k = self.a_eigs.len();
        let mut scaled = self.qa.clone();
        for j in 0..k {
            let f = self.a_eigs[j].powf(p);
            scaled.column_mut(j).scale_mut(f);
        }
        &scaled * self.qa.transpose()
    }

    /// Reconstructs the dense block-constant `C` (or any cell-constant
    /// spectral function with group-mean part `M` and contrast weights `w`).
    fn assemble_dense(&self, spec: &BlockSpec, m: &DMatrix<f64>, w: &[f64]) -> DMatrix<f64> {
        let n = spec.n();
        let ranges = spec.group_ranges();
        let mut out = DMatrix::zeros(n, n);
        for (k, rk) in ranges.iter().enumerate() {
            let nk = spec.group_sizes[k] as f64;
            for (l, rl) in ranges.iter().enumerate() {
                let cell = m[(k, l)] / (nk * spec.group_sizes[l] as f64).sqrt();
                for i in rk.clone() {
                    for j in rl.clone() {
                        out[(i, j)] = cell;
                    }
                }
            }
            // Contrast part: add w_k (I − ιι'/n_k) on the diagonal block.
            for i in rk.clone() {
                out[(i, i)] += w[k];
                for j in rk.clone() {
                    out[(i, j)] -= w[k] / nk;
                }
            }
        }
        out
    }

    /// Dense `C`.
    pub fn corr_dense(&self, spec: &BlockSpec) -> DMatrix<f64> {
        self.assemble_dense(spec, &self.a_power(1.0), &self.delta)
    }

    /// Dense symmetric square root `C^{1/2}`.
    pub fn sqrt_dense(&self, spec: &BlockSpec) -> DMatrix<f64> {
        let w: Vec<f64> = self.delta.iter().map(|d| d.sqrt()).collect();
        self.assemble_dense(spec, &self.a_power(0.5), &w)
    }

    /// Dense matrix logarithm `log C`, which carries the same block
    /// pattern as `C` itself: `log A` in the group-mean part and `log δ_k`
    /// on the within-group contrasts.
    pub fn log_dense(&self, spec: &BlockSpec) -> DMatrix<f64> {
        let k = self.a_eigs.len();
        let mut scaled = self.qa.clone();
        for j in 0..k {
            let f = self.a_eigs[j].ln();
            scaled.column_mut(j).scale_mut(f);
        }
        let m = &scaled * self.qa.transpose();
        let w: Vec<f64> = self.delta.iter().map(|d| d.ln()).collect();
        self.assemble_dense(spec, &m, &w)
    }

    /// Dense symmetric inverse square root `C^{-1/2}`.
    pub fn inv_sqrt_dense(&self, spec: &BlockSpec) -> DMatrix<f64> {
        let w: Vec<f64> = self.delta.iter().map(|d| 1.0 / d.sqrt()).collect();
        self.assemble_dense(spec, &self.a_power(-0.5), &w)
    }

    /// Builds the full-dimensional spectrum of `C` (shared eigenbasis of
    /// `C` and `log C`): eigenvectors are the group-mean columns rotated by
    /// `Q_A` followed by the within-group contrasts; eigenvalues are those
    /// of `A` followed by each `δ_k` with multiplicity `n_k − 1`.
    pub fn corr_spectrum(&self, spec: &BlockSpec) -> CorrSpectrum {
        let n = spec.n();
        let kk = spec.n_groups();
        let ranges = spec.group_ranges();
        let mut q = DMatrix::zeros(n, n);
        let mut log_eigs = DVector::zeros(n);
        for j in 0..kk {
            log_eigs[j] = self.a_eigs[j].ln();
            for (k, rk) in ranges.iter().enumerate() {
                let v = self.qa[(k, j)] / (spec.group_sizes[k] as f64).sqrt();
                for i in rk.clone() {
                    q[(i, j)] = v;
                }
            }
        }
        let mut col = kk;
        for (k, rk) in ranges.iter().enumerate() {
            let nk = spec.group_sizes[k];
            for j in 1..nk {
                // Helmert contrast: +1 on the first j in-group slots,
                // −j on slot j, normalized.
                let norm = 1.0 / ((j * (j + 1)) as f64).sqrt();
                for (pos, i) in rk.clone().enumerate() {
                    q[(i, col)] = if pos < j {
                        norm
                    } else if pos == j {
                        -(j as f64) * norm
                    } else {
                        0.0
                    };
                }
                log_eigs[col] = self.delta[k].ln();
                col += 1;
            }
        }
        CorrSpectrum { q, log_eigs }
    }
}

/// Group-mean/contrast coordinates of an `n`-vector: the canonical rotation
/// applied without materializing `Q`.
#[derive(Debug, Clone)]
pub struct Rotated {
    /// Scaled group sums `y0_k = ι' x_k / √n_k`.
    pub y0: DVector<f64>,
    /// Within-group deviations `x − x̄_k ι` (zero for singletons).
    pub centered: DVector<f64>,
    /// Squared norms of the deviations per group (`= ‖contrast coords‖²`).
    pub dev_sq: Vec<f64>,
}

/// Rotates `x` into canonical coordinates.
pub fn rotate(spec: &BlockSpec, x: DVectorView<'_, f64>) -> Rotated {
    let kk = spec.n_groups();
    let mut y0 = DVector::zeros(kk);
    let mut centered = DVector::zeros(spec.n());
    let mut dev_sq = vec![0.0; kk];
    for (k, r) in spec.group_ranges().into_iter().enumerate() {
        let nk = spec.group_sizes[k] as f64;
        let sum: f64 = r.clone().map(|i| x[i]).sum();
        y0[k] = sum / nk.sqrt();
        let mean = sum / nk;
        let mut sq = 0.0;
        for i in r {
            let d = x[i] - mean;
            centered[i] = d;
            sq += d * d;
        }
        dev_sq[k] = sq;
    }
    Rotated {
        y0,
        centered,
        dev_sq,
    }
}

/// Extracts the canonical core from a dense correlation matrix, verifying
/// block constancy within `1e-10` (and, for sparse/diagonal structures,
/// that out-of-pattern cells are zero).
pub fn canonical_of_corr(c: &CorrMatrix, spec: &BlockSpec) -> Result<CanonicalBlock> {
    let n = spec.n();
    if c.dim() != n {
        return Err(Error::DimensionMismatch {
            what: "correlation dimension vs block specification",
            expected: n,
            got: c.dim(),
        });
    }
    let kk = spec.n_groups();
    let ranges = spec.group_ranges();
    let values = c.values();
    let mut a = DMatrix::zeros(kk, kk);
    let mut delta = vec![1.0; kk];
    for k in 0..kk {
        let nk = spec.group_sizes[k] as f64;
        for l in 0..=k {
            // Mean and max deviation over the cell (off-diagonal entries
            // only when k == l).
            let mut sum = 0.0;
            let mut count = 0.0;
            for i in ranges[k].clone() {
                for j in ranges[l].clone() {
                    if k == l && i == j {
                        continue;
                    }
                    sum += values[(i, j)];
                    count += 1.0;
                }
            }
            if count == 0.0 {
                continue; // singleton diagonal cell: no correlation to read
            }
            let mean = sum / count;
            let mut max_dev = 0.0f64;
            for i in ranges[k].clone() {
                for j in ranges[l].clone() {
                    if k == l && i == j {
                        continue;
                    }
                    max_dev = max_dev.max((values[(i, j)] - mean).abs());
                }
            }
            if max_dev > BLOCK_TOL {
                return Err(Error::BlockStructure {
                    what: "correlation matrix",
                    detail: format!(
                        "cell ({k},{l}) deviates from constancy by {max_dev:.3e}"
                    ),
                });
            }
            let out_of_pattern = match spec.structure {
                Structure::DiagonalBlock => k != l,
                Structure::SparseBlock => spec.sector_of_group[k] != spec.sector_of_group[l],
                _ => false,
            };
            if out_of_pattern && mean.abs() > BLOCK_TOL {
                return Err(Error::BlockStructure {
                    what: "correlation matrix",
                    detail: format!(
                        "cell ({k},{l}) must be zero under the declared structure, found {mean:.3e}"
                    ),
                });
            }
            if k == l {
                a[(k, k)] = 1.0 + (nk - 1.0) * mean;
                delta[k] = 1.0 - mean;
            } else {
                let v = mean * (nk * spec.group_sizes[l] as f64).sqrt();
                a[(k, l)] = v;
                a[(l, k)] = v;
            }
        }
        if spec.group_sizes[k] == 1 {
            a[(k, k)] = 1.0;
        }
    }
    Ok(CanonicalBlock { a, delta })
}

/// Log-domain block parameters from the canonical core.
///
/// With `W = log A − log Λ_δ` (the δ-logs subtracted on the diagonal),
/// the entries are `η_kl = W_kl / √(n_k n_l)` in the order given by
/// [`BlockSpec::eta_layout`]. Sparse and diagonal structures compute their
/// cells from the per-sector (per-group) sub-matrices.
pub fn eta_of_canonical(canonical: &CanonicalBlock, spec: &BlockSpec) -> Result<DVector<f64>> {
    match spec.structure {
        Structure::Unrestricted => Err(Error::Unsupported(
            "unrestricted structure has no block parameter; use the dense log-domain vector"
                .to_string(),
        )),
        Structure::FullBlock => eta_of_canonical_full(canonical, spec, 0..spec.n_groups()),
        Structure::SparseBlock => {
            let mut out = Vec::new();
            for gr in spec.sector_group_ranges() {
                let sub = eta_of_canonical_full(canonical, spec, gr)?;
                out.extend(sub.iter().copied());
            }
            Ok(DVector::from_vec(out))
        }
        Structure::DiagonalBlock => {
            let mut out = Vec::new();
            for (k, &sz) in spec.group_sizes.iter().enumerate() {
                if sz >= 2 {
                    let rho = canonical.within_rho(k, sz);
                    out.push(equicorr_eta(rho, sz)?);
                }
            }
            Ok(DVector::from_vec(out))
        }
    }
}

/// Full-block η over a contiguous group range (the whole matrix, or one
/// sector's diagonal block).
fn eta_of_canonical_full(
    canonical: &CanonicalBlock,
    spec: &BlockSpec,
    groups: std::ops::Range<usize>,
) -> Result<DVector<f64>> {
    let kk = groups.len();
    let mut sub_a = DMatrix::zeros(kk, kk);
    for (ki, k) in groups.clone().enumerate() {
        for (li, l) in groups.clone().enumerate() {
            sub_a[(ki, li)] = canonical.a[(k, l)];
        }
    }
    let (qa, a_eigs) = sym_eigen(&sub_a);
    let min_eig = a_eigs.min();
    if min_eig <= 1e-12 {
        return Err(Error::NotPositiveDefinite {
            min_eigenvalue: min_eig,
        });
    }
    let mut scaled = qa.clone();
    for j in 0..kk {
        let f = a_eigs[j].ln();
        scaled.column_mut(j).scale_mut(f);
    }
    let log_a = &scaled * qa.transpose();

    let mut out = Vec::new();
    for (li, l) in groups.clone().enumerate() {
        for (ki, k) in groups.clone().enumerate().skip(li) {
            let (nk, nl) = (spec.group_sizes[k] as f64, spec.group_sizes[l] as f64);
            if k == l {
                if spec.group_sizes[k] < 2 {
                    continue;
                }
                if canonical.delta[k] <= 0.0 {
                    return Err(Error::NotPositiveDefinite {
                        min_eigenvalue: canonical.delta[k],
                    });
                }
                out.push((log_a[(ki, ki)] - canonical.delta[k].ln()) / nk);
            } else {
                out.push(log_a[(ki, li)] / (nk * nl).sqrt());
            }
        }
    }
    Ok(DVector::from_vec(out))
}

/// Reconstructs the canonical core from the log-domain block parameters by
/// the unit-diagonal fixed point run in canonical space.
///
/// The off-diagonal entries of `log A` are fixed by `η`; the diagonal
/// (together with `log δ`, tied to it by the known `W` diagonal) is moved
/// until the implied diagonal of `C` is one: each sweep shifts group `k`'s
/// log-diagonal by `−log C_kk`, exactly the dense fixed point restricted to
/// the block-constant subspace. Tolerance `1e-12` on `max_k |log C_kk|`,
/// at most 500 sweeps.
pub fn canonical_of_eta(eta: &DVector<f64>, spec: &BlockSpec) -> Result<CanonicalBlock> {
    let layout = spec.eta_layout();
    if eta.len() != layout.len() {
        return Err(Error::DimensionMismatch {
            what: "eta vector length",
            expected: layout.len(),
            got: eta.len(),
        });
    }
    if eta.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("eta vector has non-finite entries"));
    }
    match spec.structure {
        Structure::Unrestricted => Err(Error::Unsupported(
            "unrestricted structure has no block parameter; use the dense log-domain vector"
                .to_string(),
        )),
        Structure::DiagonalBlock => {
            let kk = spec.n_groups();
            let mut a = DMatrix::identity(kk, kk);
            let mut delta = vec![1.0; kk];
            let mut pos = 0;
            for (k, &sz) in spec.group_sizes.iter().enumerate() {
                if sz >= 2 {
                    let rho = equicorr_rho(eta[pos], sz);
                    pos += 1;
                    a[(k, k)] = 1.0 + (sz as f64 - 1.0) * rho;
                    delta[k] = 1.0 - rho;
                }
            }
            Ok(CanonicalBlock { a, delta })
        }
        Structure::FullBlock => {
            canonical_of_eta_full(eta.as_view(), spec, 0..spec.n_groups())
        }
        Structure::SparseBlock => {
            let kk = spec.n_groups();
            let mut a = DMatrix::identity(kk, kk);
            let mut delta = vec![1.0; kk];
            let mut pos = 0;
            for gr in spec.sector_group_ranges() {
                let sub_spec = spec.sector_subspec(spec.sector_of_group[gr.start], Structure::FullBlock)?;
                let len = sub_spec.eta_len();
                let sub = canonical_of_eta_full(eta.rows(pos, len), &sub_spec, 0..gr.len())?;
                pos += len;
                for (ki, k) in gr.clone().enumerate() {
                    delta[k] = sub.delta[ki];
                    for (li, l) in gr.clone().enumerate() {
                        a[(k, l)] = sub.a[(ki, li)];
                    }
                }
            }
            Ok(CanonicalBlock { a, delta })
        }
    }
}

/// Full-block fixed point over a contiguous group range with local η.
fn canonical_of_eta_full(
    eta: DVectorView<'_, f64>,
    spec: &BlockSpec,
    groups: std::ops::Range<usize>,
) -> Result<CanonicalBlock> {
    let kk = groups.len();
    let sizes: Vec<usize> = groups.clone().map(|k| spec.group_sizes[k]).collect();

    // Known off-diagonal of log A and known diagonal of W = log A − log Λ_δ.
    let mut log_a = DMatrix::zeros(kk, kk);
    let mut w_diag = vec![0.0; kk];
    let mut pos = 0;
    for l in 0..kk {
        for k in l..kk {
            if k == l {
                if sizes[k] < 2 {
                    continue;
                }
                w_diag[k] = eta[pos] * sizes[k] as f64;
                pos += 1;
            } else {
                let v = eta[pos] * ((sizes[k] * sizes[l]) as f64).sqrt();
                log_a[(k, l)] = v;
                log_a[(l, k)] = v;
                pos += 1;
            }
        }
    }
    debug_assert_eq!(pos, eta.len());

    // Unknown log-domain diagonal, initialized at the η values themselves
    // (exact when the matrix is diagonal).
    for k in 0..kk {
        log_a[(k, k)] = if sizes[k] >= 2 { w_diag[k] } else { 0.0 };
    }

    let mut residual = f64::INFINITY;
    for _ in 0..FIXED_POINT_MAX_ITERS {
        let (qa, eigs) = sym_eigen(&log_a);
        let mut scaled = qa.clone();
        for j in 0..kk {
            let f = eigs[j].exp();
            scaled.column_mut(j).scale_mut(f);
        }
        let a = &scaled * qa.transpose();
        residual = 0.0;
        let mut shifts = vec![0.0; kk];
        for k in 0..kk {
            let nk = sizes[k] as f64;
            let c_kk = if sizes[k] >= 2 {
                let delta_k = (log_a[(k, k)] - w_diag[k]).exp();
                (a[(k, k)] + (nk - 1.0) * delta_k) / nk
            } else {
                a[(k, k)]
            };
            if !(c_kk > 0.0) {
                return Err(Error::NoConvergence {
                    what: "block reconstruction fixed point",
                    iterations: FIXED_POINT_MAX_ITERS,
                    residual: f64::INFINITY,
                });
            }
            let log_c = c_kk.ln();
            residual = residual.max(log_c.abs());
            shifts[k] = -log_c;
        }
        if residual < FIXED_POINT_TOL {
            let delta = (0..kk)
                .map(|k| {
                    if sizes[k] >= 2 {
                        (log_a[(k, k)] - w_diag[k]).exp()
                    } else {
                        1.0
                    }
                })
                .collect();
            return Ok(CanonicalBlock { a, delta });
        }
        for k in 0..kk {
            log_a[(k, k)] += shifts[k];
        }
    }
    Err(Error::NoConvergence {
        what: "block reconstruction fixed point",
        iterations: FIXED_POINT_MAX_ITERS,
        residual,
    })
}

/// Reconstructs the dense correlation matrix from block parameters.
pub fn corr_of_eta(eta: &DVector<f64>, spec: &BlockSpec) -> Result<CorrMatrix> {
    let canonical = canonical_of_eta(eta, spec)?;
    let spectrum = CanonicalSpectrum::new(&canonical, spec)?;
    let mut c = spectrum.corr_dense(spec);
    for i in 0..spec.n() {
        c[(i, i)] = 1.0;
    }
    Ok(CorrMatrix::from_valid(c))
}

/// Extracts the block parameters from a dense (block-constant) correlation
/// matrix.
pub fn eta_of_corr(c: &CorrMatrix, spec: &BlockSpec) -> Result<DVector<f64>> {
    let canonical = canonical_of_corr(c, spec)?;
    eta_of_canonical(&canonical, spec)
}

/// Closed-form log-domain parameter of an `n ≥ 2` equicorrelation block:
/// `η = (1/n) log(1 + nϱ/(1 − ϱ))`.
pub fn equicorr_eta(rho: f64, n: usize) -> Result<f64> {
    let nf = n as f64;
    if !(rho < 1.0 && rho > -1.0 / (nf - 1.0)) {
        return Err(Error::domain(format!(
            "equicorrelation {rho} outside (-1/{}, 1) for block size {n}",
            nf - 1.0
        )));
    }
    Ok((1.0 + nf * rho / (1.0 - rho)).ln() / nf)
}

/// Inverse of [`equicorr_eta`]: `ϱ = (e^{nη} − 1)/(e^{nη} + n − 1)`.
pub fn equicorr_rho(eta: f64, n: usize) -> f64 {
    let nf = n as f64;
    let e = (nf * eta).exp();
    (e - 1.0) / (e + nf - 1.0)
}

/// Derivative `dη/dϱ = 1/((1 − ϱ)(1 + (n−1)ϱ))` of the log-domain
/// equicorrelation coordinate with respect to the correlation itself.
/// Its reciprocal `dϱ/dη` converts equicorrelation scores and information
/// onto the η scale.
pub fn equicorr_eta_jacobian(rho: f64, n: usize) -> Result<f64> {
    let nf = n as f64;
    if !(rho < 1.0 && rho > -1.0 / (nf - 1.0)) {
        return Err(Error::domain(format!(
            "equicorrelation {rho} outside (-1/{}, 1) for block size {n}",
            nf - 1.0
        )));
    }
    Ok(1.0 / ((1.0 - rho) * (1.0 + (nf - 1.0) * rho)))
}
