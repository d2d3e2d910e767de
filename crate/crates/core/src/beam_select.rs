//! Analog beam selection and spectral-efficiency evaluation.
//!
//! The transmitter routes `n_rf_tx` RF chains onto a subset of the `N_t`
//! beamspace beams through a binary selection matrix `S_t` (one 1 per
//! column); the receiver does the same with `S_r`. A baseband digital stage
//! (`F_BB`, `W_BB`) built from the SVD of the selected submatrix closes the
//! link. Achievable spectral efficiency of a selection is
//!
//! ```text
//! SE = log2 | I + rho/(sigma^2 Ns) * R_n^-1 * W^H S_r^H H_b S_t F F^H S_t^H H_b^H S_r W |
//! R_n = W^H S_r^H S_r W
//! ```
//!
//! The oracle enumerates every combination of candidate beams on both sides
//! and keeps the SE-maximizing pair; a greedy per-beam-energy heuristic and a
//! fully digital SVD benchmark bracket it from below and above.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative singular-value threshold below which a dimension is treated as
/// numerically rank-deficient.
const RANK_TOL: f64 = 1e-12;

/// RF-chain counts, stream count, and enumeration limits for beam selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionConfig {
    /// Transmit RF chains `N_t^RF`.
    pub n_rf_tx: usize,
    /// Receive RF chains `N_r^RF`.
    pub n_rf_rx: usize,
    /// Parallel streams `N_s`; must equal `min(n_rf_tx, n_rf_rx)`.
    pub n_streams: usize,
    /// Number of highest-energy transmit beams eligible for selection.
    /// `None` selects automatically: full enumeration for arrays up to 16
    /// elements, `4 * n_rf_tx` beams beyond that.
    #[serde(default)]
    pub candidate_pool_tx: Option<usize>,
    /// Receive-side candidate pool; same convention as `candidate_pool_tx`.
    #[serde(default)]
    pub candidate_pool_rx: Option<usize>,
    /// Upper bound on the number of enumerated selection pairs.
    #[serde(default = "default_budget")]
    pub enumeration_budget: u64,
    /// Operating SNR at which the oracle ranks candidate selections.
    #[serde(default = "default_oracle_snr_db")]
    pub oracle_snr_db: f64,
}

fn default_budget() -> u64 {
    10_000_000
}

fn default_oracle_snr_db() -> f64 {
    10.0
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig::symmetric(4)
    }
}

impl SelectionConfig {
    /// Same RF chain count on both sides, full automatic pools.
    pub fn symmetric(n_rf: usize) -> Self {
        SelectionConfig {
            n_rf_tx: n_rf,
            n_rf_rx: n_rf,
            n_streams: n_rf,
            candidate_pool_tx: None,
            candidate_pool_rx: None,
            enumeration_budget: default_budget(),
            oracle_snr_db: default_oracle_snr_db(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_rf_tx == 0 || self.n_rf_rx == 0 {
            return Err(Error::invalid("RF chain counts must be positive"));
        }
        if self.n_streams != self.n_rf_tx.min(self.n_rf_rx) {
            return Err(Error::invalid(format!(
                "n_streams must equal min(n_rf_tx, n_rf_rx) = {}, got {}",
                self.n_rf_tx.min(self.n_rf_rx),
                self.n_streams
            )));
        }
        if let Some(p) = self.candidate_pool_tx {
            if p < self.n_rf_tx {
                return Err(Error::invalid("candidate_pool_tx < n_rf_tx"));
            }
        }
        if let Some(p) = self.candidate_pool_rx {
            if p < self.n_rf_rx {
                return Err(Error::invalid("candidate_pool_rx < n_rf_rx"));
            }
        }
        if !self.oracle_snr_db.is_finite() {
            return Err(Error::invalid("oracle_snr_db must be finite"));
        }
        Ok(())
    }

    /// Resolves the candidate pool sizes against concrete array dimensions.
    /// An explicit pool larger than the array is an error; the automatic
    /// policy enumerates everything on small arrays and caps the pool at
    /// `4 * n_rf` highest-energy beams on large ones.
    pub fn resolved_pools(&self, n_rx: usize, n_tx: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let auto = |dim: usize, n_rf: usize| {
            if dim <= 16 {
                dim
            } else {
                (4 * n_rf).min(dim)
            }
        };
        let pool_tx = match self.candidate_pool_tx {
            Some(p) if p > n_tx => {
                return Err(Error::invalid(format!(
                    "candidate_pool_tx {p} exceeds array size {n_tx}"
                )))
            }
            Some(p) => p,
            None => auto(n_tx, self.n_rf_tx),
        };
        let pool_rx = match self.candidate_pool_rx {
            Some(p) if p > n_rx => {
                return Err(Error::invalid(format!(
                    "candidate_pool_rx {p} exceeds array size {n_rx}"
                )))
            }
            Some(p) => p,
            None => auto(n_rx, self.n_rf_rx),
        };
        if pool_tx < self.n_rf_tx || pool_rx < self.n_rf_rx {
            return Err(Error::invalid(
                "resolved candidate pool smaller than RF chain count",
            ));
        }
        Ok((pool_tx, pool_rx))
    }
}

/// A concrete analog selection: which beams feed the RF chains on each side.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BeamSelection {
    /// Transmit beam indices, one per transmit RF chain.
    pub tx_beams: Vec<usize>,
    /// Receive beam indices, one per receive RF chain.
    pub rx_beams: Vec<usize>,
}

impl BeamSelection {
    pub fn new(tx_beams: Vec<usize>, rx_beams: Vec<usize>) -> Self {
        BeamSelection { tx_beams, rx_beams }
    }

    /// Checks distinctness and range against the beamspace dimensions.
    pub fn validate(&self, n_rx: usize, n_tx: usize) -> Result<()> {
        let check = |beams: &[usize], dim: usize, side: &str| -> Result<()> {
            if beams.is_empty() {
                return Err(Error::InvalidSelection(format!("{side} selection empty")));
            }
            let mut seen = vec![false; dim];
            for &b in beams {
                if b >= dim {
                    return Err(Error::InvalidSelection(format!(
                        "{side} beam {b} out of range [0, {dim})"
                    )));
                }
                if seen[b] {
                    return Err(Error::InvalidSelection(format!(
                        "{side} beam {b} selected twice"
                    )));
                }
                seen[b] = true;
            }
            Ok(())
        };
        check(&self.tx_beams, n_tx, "tx")?;
        check(&self.rx_beams, n_rx, "rx")
    }

    /// The `N_t x n_rf_tx` binary selection matrix `S_t` (complex-typed so it
    /// composes directly with channel algebra).
    pub fn s_t(&self, n_tx: usize) -> DMatrix<Complex64> {
        selection_matrix(&self.tx_beams, n_tx)
    }

    /// The `N_r x n_rf_rx` binary selection matrix `S_r`.
    pub fn s_r(&self, n_rx: usize) -> DMatrix<Complex64> {
        selection_matrix(&self.rx_beams, n_rx)
    }

    /// Extracts the selected submatrix `H_sel = S_r^H H_b S_t`
    /// (`n_rf_rx x n_rf_tx`).
    pub fn selected_submatrix(&self, h_b: &DMatrix<Complex64>) -> DMatrix<Complex64> {
        DMatrix::from_fn(self.rx_beams.len(), self.tx_beams.len(), |i, j| {
            h_b[(self.rx_beams[i], self.tx_beams[j])]
        })
    }
}

fn selection_matrix(beams: &[usize], dim: usize) -> DMatrix<Complex64> {
    let mut s = DMatrix::<Complex64>::zeros(dim, beams.len());
    for (col, &b) in beams.iter().enumerate() {
        s[(b, col)] = Complex64::new(1.0, 0.0);
    }
    s
}

/// Baseband digital precoder/combiner pair.
#[derive(Debug, Clone, PartialEq)]
pub struct DigitalStage {
    /// Precoder, `n_rf_tx x n_streams`; `||S_t F_BB||_F^2 = n_streams`.
    pub f_bb: DMatrix<Complex64>,
    /// Combiner, `n_rf_rx x n_streams`.
    pub w_bb: DMatrix<Complex64>,
}

/// Builds the digital stage from the SVD of the selected submatrix: `F_BB`
/// takes the top-`n_streams` right singular vectors, `W_BB` the left ones.
/// Columns are unit-norm, so power splits equally across streams and the
/// total-power invariant `||S_t F_BB||_F^2 = n_streams` holds exactly.
pub fn build_digital_stage(h_sel: &DMatrix<Complex64>, n_streams: usize) -> Result<DigitalStage> {
    let (rows, cols) = h_sel.shape();
    if n_streams == 0 || n_streams > rows.min(cols) {
        return Err(Error::invalid(format!(
            "n_streams {n_streams} out of range for a {rows}x{cols} submatrix"
        )));
    }
    let svd = h_sel.clone().svd(true, true);
    let sv = &svd.singular_values;
    if sv[0] <= 0.0 || sv[n_streams - 1] <= RANK_TOL * sv[0] {
        return Err(Error::DegenerateChannel(format!(
            "selected submatrix has numerical rank < {n_streams} (singular values {:?})",
            sv.as_slice()
        )));
    }
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let f_bb = v_t.rows(0, n_streams).adjoint();
    let w_bb = u.columns(0, n_streams).clone_owned();
    Ok(DigitalStage { f_bb, w_bb })
}

/// Spectral efficiency of a (selection, digital stage) pair in bits/s/Hz,
/// evaluated from the full formula including the combined-noise covariance
/// `R_n`. `snr_db` is interpreted as `rho/sigma^2 = 10^(snr_db/10)`.
pub fn spectral_efficiency(
    h_b: &DMatrix<Complex64>,
    sel: &BeamSelection,
    dig: &DigitalStage,
    snr_db: f64,
) -> Result<f64> {
    if !snr_db.is_finite() {
        return Err(Error::invalid("snr_db must be finite"));
    }
    sel.validate(h_b.nrows(), h_b.ncols())?;
    let n_streams = dig.f_bb.ncols();
    if dig.w_bb.ncols() != n_streams
        || dig.f_bb.nrows() != sel.tx_beams.len()
        || dig.w_bb.nrows() != sel.rx_beams.len()
    {
        return Err(Error::invalid("digital stage dimensions disagree with selection"));
    }
    let s_t = sel.s_t(h_b.ncols());
    let s_r = sel.s_r(h_b.nrows());
    // Effective stream-domain channel W^H S_r^H H_b S_t F.
    let eff = dig.w_bb.adjoint() * s_r.adjoint() * h_b * &s_t * &dig.f_bb;
    let g = &eff * eff.adjoint();
    let r_n = dig.w_bb.adjoint() * s_r.adjoint() * s_r * &dig.w_bb;
    let c = 10f64.powf(snr_db / 10.0) / n_streams as f64;

    let lu = r_n.lu();
    let x = lu
        .solve(&g)
        .ok_or_else(|| Error::InvalidSelection("combined-noise covariance R_n is singular".into()))?;
    let mut a = x * Complex64::new(c, 0.0);
    for i in 0..n_streams {
        a[(i, i)] += Complex64::new(1.0, 0.0);
    }
    // R_n^-1 G is similar to a PSD matrix, so det(I + c R_n^-1 G) is real and
    // >= 1; the imaginary residue is numerical noise.
    let det = a.lu().determinant();
    Ok(det.re.max(1.0).log2())
}

/// Frobenius-distance objective of the selection problem,
/// `|| H_b - S_r W_BB F_BB^H S_t^H ||_F^2`, exposed for cross-checking the
/// SE-based oracle against the matrix-approximation view of the same task.
pub fn frobenius_objective(
    h_b: &DMatrix<Complex64>,
    sel: &BeamSelection,
    dig: &DigitalStage,
) -> Result<f64> {
    sel.validate(h_b.nrows(), h_b.ncols())?;
    let s_t = sel.s_t(h_b.ncols());
    let s_r = sel.s_r(h_b.nrows());
    let approx = s_r * &dig.w_bb * dig.f_bb.adjoint() * s_t.adjoint();
    let diff = h_b - approx;
    Ok(diff.iter().map(|z| z.norm_sqr()).sum())
}

/// Per-beam transmit energies: squared column norms of `H_b`.
pub fn tx_beam_energies(h_b: &DMatrix<Complex64>) -> Vec<f64> {
    (0..h_b.ncols())
        .map(|j| h_b.column(j).iter().map(|z| z.norm_sqr()).sum())
        .collect()
}

/// Per-beam receive energies: squared row norms of `H_b`.
pub fn rx_beam_energies(h_b: &DMatrix<Complex64>) -> Vec<f64> {
    (0..h_b.nrows())
        .map(|i| h_b.row(i).iter().map(|z| z.norm_sqr()).sum())
        .collect()
}

/// Indices of the `k` highest-energy beams, ties resolved toward the lower
/// index, returned in ascending index order.
fn top_k_by_energy(energies: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..energies.len()).collect();
    order.sort_by(|&a, &b| {
        energies[b]
            .partial_cmp(&energies[a])
            .expect("beam energies must not be NaN")
            .then(a.cmp(&b))
    });
    let mut picked: Vec<usize> = order.into_iter().take(k).collect();
    picked.sort_unstable();
    picked
}

/// Greedy baseline: the `n_rf` highest-energy beams on each side.
pub fn greedy_energy_select(
    h_b: &DMatrix<Complex64>,
    cfg: &SelectionConfig,
) -> Result<BeamSelection> {
    cfg.validate()?;
    if cfg.n_rf_tx > h_b.ncols() || cfg.n_rf_rx > h_b.nrows() {
        return Err(Error::invalid("more RF chains than beams"));
    }
    Ok(BeamSelection {
        tx_beams: top_k_by_energy(&tx_beam_energies(h_b), cfg.n_rf_tx),
        rx_beams: top_k_by_energy(&rx_beam_energies(h_b), cfg.n_rf_rx),
    })
}

/// Candidate beam pools for the oracle: the `pool` highest-energy beams per
/// side, in ascending index order.
pub fn candidate_pools(
    h_b: &DMatrix<Complex64>,
    cfg: &SelectionConfig,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let (pool_tx, pool_rx) = cfg.resolved_pools(h_b.nrows(), h_b.ncols())?;
    if cfg.n_rf_tx > h_b.ncols() || cfg.n_rf_rx > h_b.nrows() {
        return Err(Error::invalid("more RF chains than beams"));
    }
    Ok((
        top_k_by_energy(&tx_beam_energies(h_b), pool_tx),
        top_k_by_energy(&rx_beam_energies(h_b), pool_rx),
    ))
}

fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.saturating_mul((n - i) as u128) / (i as u128 + 1);
    }
    acc
}

/// Visits all k-combinations of `0..n` in lexicographic order.
fn for_each_combination(n: usize, k: usize, f: &mut impl FnMut(&[usize])) {
    fn rec(start: usize, n: usize, left: usize, combo: &mut Vec<usize>, f: &mut impl FnMut(&[usize])) {
        if left == 0 {
            f(combo);
            return;
        }
        for i in start..=(n - left) {
            combo.push(i);
            rec(i + 1, n, left - 1, combo, f);
            combo.pop();
        }
    }
    if k > n {
        return;
    }
    let mut combo = Vec::with_capacity(k);
    rec(0, n, k, &mut combo, f);
}

/// Computes `log2 det(I_d + c * G)` in place for a Hermitian PSD `G` stored
/// as a full row-major `d x d` buffer (only the upper triangle is read; the
/// buffer is overwritten by the Cholesky factor). Since `I + cG` dominates
/// the identity, the factorization cannot break down for `c >= 0`.
fn log2_det_eye_plus_scaled(g: &mut [Complex64], d: usize, c: f64) -> f64 {
    debug_assert_eq!(g.len(), d * d);
    let mut log2_det = 0.0;
    for i in 0..d {
        // A[i][j] = delta_ij + c*G[i][j] minus the contributions of previous
        // Cholesky rows; row i of the factor is finalized in this pass.
        for j in i..d {
            let mut s = g[i * d + j] * c;
            if i == j {
                s += 1.0;
            }
            for m in 0..i {
                s -= g[m * d + i].conj() * g[m * d + j];
            }
            if i == j {
                // Schur complements of I + PSD stay >= I, so the pivot is
                // >= 1 up to roundoff.
                let diag = s.re.max(f64::MIN_POSITIVE).sqrt();
                log2_det += 2.0 * diag.log2();
                g[i * d + i] = Complex64::new(diag, 0.0);
            } else {
                g[i * d + j] = s / g[i * d + i].re;
            }
        }
    }
    log2_det
}

/// Spectral efficiency achieved by a beam selection under the standard
/// SVD-built digital stage with equal per-stream power, computed in closed
/// form. With `F = V_s`, `W = U_s` the formula collapses to
/// `sum_i log2(1 + c sigma_i^2)` over the top `n_streams` singular values of
/// the selected submatrix; when `n_streams` equals the smaller selection
/// dimension that sum equals `log2 det(I + c H_sel^H H_sel)`, evaluated here
/// by a small Cholesky factorization without forming any SVD.
///
/// The Gram accumulation mirrors [`oracle_select`]'s enumeration term for
/// term, so for ascending-ordered selections the value is bit-identical to
/// what the oracle computed for the same combination — exact dominance
/// comparisons against the oracle are safe.
pub fn selection_spectral_efficiency(
    h_b: &DMatrix<Complex64>,
    sel: &BeamSelection,
    n_streams: usize,
    snr_db: f64,
) -> Result<f64> {
    if !snr_db.is_finite() {
        return Err(Error::invalid("snr_db must be finite"));
    }
    sel.validate(h_b.nrows(), h_b.ncols())?;
    let (kr, kt) = (sel.rx_beams.len(), sel.tx_beams.len());
    if n_streams == 0 || n_streams > kr.min(kt) {
        return Err(Error::invalid(format!(
            "n_streams {n_streams} out of range for a {kr}x{kt} selection"
        )));
    }
    let c = 10f64.powf(snr_db / 10.0) / n_streams as f64;
    if n_streams == kr.min(kt) {
        // Transmit-side Gram G = H_sel^H H_sel = sum_r v_r^H v_r with
        // v_r = H_b[r, tx_beams], summed over receive beams in the order
        // given. det(I + c H H^H) = det(I + c H^H H), so the value is the
        // same as a receive-side Gram would give.
        let mut gram = vec![Complex64::new(0.0, 0.0); kt * kt];
        for &r in &sel.rx_beams {
            for a in 0..kt {
                let va_conj = h_b[(r, sel.tx_beams[a])].conj();
                for b in a..kt {
                    gram[a * kt + b] += va_conj * h_b[(r, sel.tx_beams[b])];
                }
            }
        }
        Ok(log2_det_eye_plus_scaled(&mut gram, kt, c))
    } else {
        let h_sel = sel.selected_submatrix(h_b);
        let sv = h_sel.svd(false, false).singular_values;
        Ok((0..n_streams)
            .map(|i| (1.0 + c * sv[i] * sv[i]).log2())
            .sum())
    }
}

/// Exhaustive SE-maximizing search over the candidate pools, evaluating each
/// combination through the closed form of [`selection_spectral_efficiency`].
/// Combinations are visited in lexicographic `(tx_beams, rx_beams)` order and
/// only strict improvements are kept, so ties resolve to the smallest tuple.
pub fn oracle_select(
    h_b: &DMatrix<Complex64>,
    cfg: &SelectionConfig,
) -> Result<(BeamSelection, f64)> {
    let (tx_pool, rx_pool) = candidate_pools(h_b, cfg)?;
    let count = binomial(tx_pool.len(), cfg.n_rf_tx) * binomial(rx_pool.len(), cfg.n_rf_rx);
    if count > cfg.enumeration_budget as u128 {
        return Err(Error::BudgetExceeded {
            count,
            budget: cfg.enumeration_budget as u128,
        });
    }
    let c = 10f64.powf(cfg.oracle_snr_db / 10.0) / cfg.n_streams as f64;
    let kt = cfg.n_rf_tx;
    let kr = cfg.n_rf_rx;

    let mut best_se = f64::NEG_INFINITY;
    let mut best: Option<(Vec<usize>, Vec<usize>)> = None;

    // Reused buffers: per-receive-beam row slices of the current tx combo,
    // one running Gram per recursion depth, and a Cholesky scratch.
    let mut rows = vec![Complex64::new(0.0, 0.0); rx_pool.len() * kt];
    let mut grams = vec![vec![Complex64::new(0.0, 0.0); kt * kt]; kr + 1];
    let mut scratch = vec![Complex64::new(0.0, 0.0); kt * kt];
    let mut rx_combo: Vec<usize> = Vec::with_capacity(kr);

    for_each_combination(tx_pool.len(), kt, &mut |tx_idx| {
        // Materialize H_b[r, T] for every receive candidate r.
        for (ri, &r) in rx_pool.iter().enumerate() {
            for (ci, &ti) in tx_idx.iter().enumerate() {
                rows[ri * kt + ci] = h_b[(r, tx_pool[ti])];
            }
        }
        // Enumerate receive combinations, extending the tx-side Gram
        // G = sum_r v_r^H v_r one beam at a time (upper triangle only).
        fn rec(
            depth: usize,
            start: usize,
            rx_pool: &[usize],
            rows: &[Complex64],
            kt: usize,
            kr: usize,
            c: f64,
            grams: &mut [Vec<Complex64>],
            scratch: &mut [Complex64],
            rx_combo: &mut Vec<usize>,
            tx_idx: &[usize],
            tx_pool: &[usize],
            best_se: &mut f64,
            best: &mut Option<(Vec<usize>, Vec<usize>)>,
        ) {
            if depth == kr {
                scratch.copy_from_slice(&grams[depth]);
                let se = log2_det_eye_plus_scaled(scratch, kt, c);
                if se > *best_se {
                    *best_se = se;
                    *best = Some((
                        tx_idx.iter().map(|&i| tx_pool[i]).collect(),
                        rx_combo.iter().map(|&i| rx_pool[i]).collect(),
                    ));
                }
                return;
            }
            for i in start..=(rx_pool.len() - (kr - depth)) {
                let (prev, next) = grams.split_at_mut(depth + 1);
                let (src, dst) = (&prev[depth], &mut next[0]);
                let v = &rows[i * kt..(i + 1) * kt];
                for a in 0..kt {
                    for b in a..kt {
                        dst[a * kt + b] = src[a * kt + b] + v[a].conj() * v[b];
                    }
                }
                rx_combo.push(i);
                rec(
                    depth + 1,
                    i + 1,
                    rx_pool,
                    rows,
                    kt,
                    kr,
                    c,
                    grams,
                    scratch,
                    rx_combo,
                    tx_idx,
                    tx_pool,
                    best_se,
                    best,
                );
                rx_combo.pop();
            }
        }
        rec(
            0,
            0,
            &rx_pool,
            &rows,
            kt,
            kr,
            c,
            &mut grams,
            &mut scratch,
            &mut rx_combo,
            tx_idx,
            &tx_pool,
            &mut best_se,
            &mut best,
        );
    });

    let (tx_beams, rx_beams) = best.expect("pools guarantee at least one combination");
    Ok((BeamSelection { tx_beams, rx_beams }, best_se))
}

/// Oracle search with a caller-supplied digital-stage builder, evaluating
/// each combination through the full [`spectral_efficiency`] formula.
/// Combinations whose builder reports a degenerate channel are skipped. This
/// route is substantially slower than [`oracle_select`] (which is exact for
/// the standard SVD stage) and exists for alternative stage constructions and
/// cross-checking.
pub fn oracle_select_with<F>(
    h_b: &DMatrix<Complex64>,
    cfg: &SelectionConfig,
    dig_builder: F,
) -> Result<(BeamSelection, f64)>
where
    F: Fn(&DMatrix<Complex64>, usize) -> Result<DigitalStage>,
{
    let (tx_pool, rx_pool) = candidate_pools(h_b, cfg)?;
    let count = binomial(tx_pool.len(), cfg.n_rf_tx) * binomial(rx_pool.len(), cfg.n_rf_rx);
    if count > cfg.enumeration_budget as u128 {
        return Err(Error::BudgetExceeded {
            count,
            budget: cfg.enumeration_budget as u128,
        });
    }

    let mut best_se = f64::NEG_INFINITY;
    let mut best: Option<BeamSelection> = None;
    let mut failure: Option<Error> = None;

    for_each_combination(tx_pool.len(), cfg.n_rf_tx, &mut |tx_idx| {
        let tx_beams: Vec<usize> = tx_idx.iter().map(|&i| tx_pool[i]).collect();
        for_each_combination(rx_pool.len(), cfg.n_rf_rx, &mut |rx_idx| {
            if failure.is_some() {
                return;
            }
            let sel = BeamSelection {
                tx_beams: tx_beams.clone(),
                rx_beams: rx_idx.iter().map(|&i| rx_pool[i]).collect(),
            };
            let h_sel = sel.selected_submatrix(h_b);
            let dig = match dig_builder(&h_sel, cfg.n_streams) {
                Ok(d) => d,
                Err(Error::DegenerateChannel(_)) => return,
                Err(e) => {
                    failure = Some(e);
                    return;
                }
            };
            match spectral_efficiency(h_b, &sel, &dig, cfg.oracle_snr_db) {
                Ok(se) if se > best_se => {
                    best_se = se;
                    best = Some(sel);
                }
                Ok(_) => {}
                Err(e) => failure = Some(e),
            }
        });
    });

    if let Some(e) = failure {
        return Err(e);
    }
    match best {
        Some(sel) => Ok((sel, best_se)),
        None => Err(Error::DegenerateChannel(
            "every candidate selection was numerically rank-deficient".into(),
        )),
    }
}

/// Fully digital benchmark: SVD eigen-beamforming over the complete
/// beamspace matrix with equal power across `n_streams` streams. In this
/// single-user setting zero-forcing collapses to this structure, and it
/// upper-bounds every same-stream-count analog selection because singular
/// values of submatrices interlace those of the full matrix.
pub fn zf_benchmark(h_b: &DMatrix<Complex64>, snr_db: f64, n_streams: usize) -> Result<f64> {
    if !snr_db.is_finite() {
        return Err(Error::invalid("snr_db must be finite"));
    }
    if n_streams == 0 || n_streams > h_b.nrows().min(h_b.ncols()) {
        return Err(Error::invalid(format!(
            "n_streams {n_streams} out of range for a {}x{} channel",
            h_b.nrows(),
            h_b.ncols()
        )));
    }
    let sv = h_b.clone().svd(false, false).singular_values;
    if sv[0] <= 0.0 || sv[n_streams - 1] <= RANK_TOL * sv[0] {
        return Err(Error::DegenerateChannel(format!(
            "channel has numerical rank < {n_streams}"
        )));
    }
    let c = 10f64.powf(snr_db / 10.0) / n_streams as f64;
    Ok((0..n_streams)
        .map(|i| (1.0 + c * sv[i] * sv[i]).log2())
        .sum())
}

/// One exported evaluation row; see `docs/FORMATS.md` for the CSV schema.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub realization_id: u64,
    pub strategy: String,
    pub snr_db: f64,
    pub n_streams: usize,
    /// Space-separated ascending beam indices.
    pub tx_beams: String,
    pub rx_beams: String,
    pub se_bits: f64,
}

impl SelectionRecord {
    pub fn new(
        realization_id: u64,
        strategy: &str,
        snr_db: f64,
        n_streams: usize,
        sel: &BeamSelection,
        se_bits: f64,
    ) -> Self {
        let join = |v: &[usize]| {
            v.iter()
                .map(|b| b.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        };
        SelectionRecord {
            realization_id,
            strategy: strategy.to_string(),
            snr_db,
            n_streams,
            tx_beams: join(&sel.tx_beams),
            rx_beams: join(&sel.rx_beams),
            se_bits,
        }
    }
}

/// Writes selection/SE rows as CSV with a header.
pub fn write_selection_csv(path: &std::path::Path, rows: &[SelectionRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    for row in rows {
        w.serialize(row).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{self, ChannelConfig};

    fn random_beamspace(seed: u64, n_tx: usize, n_rx: usize) -> DMatrix<Complex64> {
        let cfg = ChannelConfig::desk(n_tx, n_rx, seed);
        channel::generate_batch(&cfg, 1).unwrap().remove(0).beamspace
    }

    fn small_cfg(n_rf: usize) -> SelectionConfig {
        SelectionConfig::symmetric(n_rf)
    }

    #[test]
    fn digital_stage_of_identity_is_orthonormal() {
        let h = DMatrix::<Complex64>::identity(2, 2);
        let dig = build_digital_stage(&h, 2).unwrap();
        // Power invariant and per-stream normalization.
        let total: f64 = dig.f_bb.iter().map(|z| z.norm_sqr()).sum();
        assert!((total - 2.0).abs() < 1e-12);
        let eff = dig.w_bb.adjoint() * &h * &dig.f_bb;
        for i in 0..2 {
            for j in 0..2 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((eff[(i, j)].norm() - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn digital_stage_picks_dominant_direction() {
        let h = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![
            Complex64::new(2.0, 0.0),
            Complex64::new(1.0, 0.0),
        ]));
        let dig = build_digital_stage(&h, 1).unwrap();
        assert!((dig.f_bb[(0, 0)].norm() - 1.0).abs() < 1e-12);
        assert!(dig.f_bb[(1, 0)].norm() < 1e-12);
    }

    #[test]
    fn digital_stage_diagonalizes_random_submatrix() {
        let h = random_beamspace(5, 8, 4);
        let sel = BeamSelection::new(vec![0, 2, 5, 7], vec![0, 1, 2, 3]);
        let h_sel = sel.selected_submatrix(&h);
        let dig = build_digital_stage(&h_sel, 4).unwrap();
        let eff = dig.w_bb.adjoint() * &h_sel * &dig.f_bb;
        let mut off_mass = 0.0;
        let mut prev = f64::INFINITY;
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    off_mass += eff[(i, j)].norm_sqr();
                }
            }
            // Diagonal carries the singular values in descending order.
            assert!(eff[(i, i)].re <= prev + 1e-9);
            prev = eff[(i, i)].re;
        }
        assert!(off_mass.sqrt() < 1e-9, "off-diagonal mass {off_mass}");
    }

    #[test]
    fn rank_deficient_submatrix_is_rejected() {
        // Outer product => rank 1.
        let col = nalgebra::DVector::from_vec(vec![
            Complex64::new(1.0, 0.5),
            Complex64::new(-0.3, 0.2),
        ]);
        let row = nalgebra::DVector::from_vec(vec![
            Complex64::new(0.7, -0.1),
            Complex64::new(0.2, 0.9),
        ]);
        let h = &col * row.adjoint();
        match build_digital_stage(&h, 2) {
            Err(Error::DegenerateChannel(_)) => {}
            other => panic!("expected degenerate-channel error, got {other:?}"),
        }
    }

    #[test]
    fn scalar_se_matches_closed_form() {
        let h = DMatrix::from_element(1, 1, Complex64::new(1.0, 0.0));
        let sel = BeamSelection::new(vec![0], vec![0]);
        let dig = DigitalStage {
            f_bb: DMatrix::from_element(1, 1, Complex64::new(1.0, 0.0)),
            w_bb: DMatrix::from_element(1, 1, Complex64::new(1.0, 0.0)),
        };
        let se = spectral_efficiency(&h, &sel, &dig, 0.0).unwrap();
        assert!((se - 1.0).abs() < 1e-12, "SE {se}");
    }

    #[test]
    fn se_vanishes_at_deeply_negative_snr_and_grows_with_snr() {
        let h = random_beamspace(9, 8, 4);
        let sel = greedy_energy_select(&h, &small_cfg(2)).unwrap();
        let dig = build_digital_stage(&sel.selected_submatrix(&h), 2).unwrap();
        let lo = spectral_efficiency(&h, &sel, &dig, -300.0).unwrap();
        assert!(lo >= 0.0 && lo < 1e-9, "SE at -300 dB: {lo}");
        let a = spectral_efficiency(&h, &sel, &dig, 10.0).unwrap();
        let b = spectral_efficiency(&h, &sel, &dig, 20.0).unwrap();
        assert!(b > a, "SE must grow with SNR: {a} vs {b}");
    }

    #[test]
    fn formula_and_closed_form_paths_agree() {
        for seed in 0..20u64 {
            let h = random_beamspace(seed, 8, 4);
            let cfg = small_cfg(2);
            let sel = greedy_energy_select(&h, &cfg).unwrap();
            let dig = build_digital_stage(&sel.selected_submatrix(&h), 2).unwrap();
            for snr in [0.0, 10.0, 30.0] {
                let a = spectral_efficiency(&h, &sel, &dig, snr).unwrap();
                let b = selection_spectral_efficiency(&h, &sel, 2, snr).unwrap();
                assert!((a - b).abs() < 1e-10, "seed {seed} snr {snr}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn beam_order_does_not_change_se() {
        let h = random_beamspace(13, 8, 4);
        let a = selection_spectral_efficiency(
            &h,
            &BeamSelection::new(vec![1, 4, 6], vec![0, 2, 3]),
            3,
            15.0,
        )
        .unwrap();
        let b = selection_spectral_efficiency(
            &h,
            &BeamSelection::new(vec![6, 1, 4], vec![3, 0, 2]),
            3,
            15.0,
        )
        .unwrap();
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn oracle_prefers_stronger_single_beam() {
        // Diagonal-ish 1x2 channel: beam 0 has column norm 2, beam 1 norm 1.
        let h = DMatrix::from_row_slice(
            1,
            2,
            &[Complex64::new(2.0, 0.0), Complex64::new(1.0, 0.0)],
        );
        let cfg = SelectionConfig {
            n_rf_tx: 1,
            n_rf_rx: 1,
            n_streams: 1,
            ..SelectionConfig::symmetric(1)
        };
        let (sel, _) = oracle_select(&h, &cfg).unwrap();
        assert_eq!(sel.tx_beams, vec![0]);
        assert_eq!(sel.rx_beams, vec![0]);
    }

    #[test]
    fn forced_pool_returns_unique_combination() {
        let h = random_beamspace(3, 8, 4);
        let cfg = SelectionConfig {
            candidate_pool_tx: Some(2),
            candidate_pool_rx: Some(2),
            ..small_cfg(2)
        };
        let (sel, _) = oracle_select(&h, &cfg).unwrap();
        let (pool_tx, pool_rx) = candidate_pools(&h, &cfg).unwrap();
        assert_eq!(sel.tx_beams, pool_tx);
        assert_eq!(sel.rx_beams, pool_rx);
    }

    #[test]
    fn fast_oracle_matches_builder_route() {
        for seed in 0..10u64 {
            let h = random_beamspace(seed + 40, 8, 4);
            let cfg = small_cfg(2);
            let (sel_fast, se_fast) = oracle_select(&h, &cfg).unwrap();
            let (sel_gen, se_gen) =
                oracle_select_with(&h, &cfg, build_digital_stage).unwrap();
            assert_eq!(sel_fast, sel_gen, "seed {seed}");
            assert!((se_fast - se_gen).abs() < 1e-10, "seed {seed}");
        }
    }

    #[test]
    fn greedy_tie_breaks_and_order_statistics() {
        // Column energies 3, 1, 2 on a single-row channel.
        let h = DMatrix::from_row_slice(
            1,
            3,
            &[
                Complex64::new(3f64.sqrt(), 0.0),
                Complex64::new(1.0, 0.0),
                Complex64::new(2f64.sqrt(), 0.0),
            ],
        );
        let cfg = SelectionConfig {
            n_rf_tx: 2,
            n_rf_rx: 1,
            n_streams: 1,
            ..SelectionConfig::symmetric(1)
        };
        let sel = greedy_energy_select(&h, &cfg).unwrap();
        assert_eq!(sel.tx_beams, vec![0, 2]);

        // All-equal energies resolve to the lowest indices.
        let h = DMatrix::from_element(2, 4, Complex64::new(1.0, 0.0));
        let cfg = SelectionConfig {
            n_rf_tx: 2,
            n_rf_rx: 2,
            n_streams: 2,
            ..SelectionConfig::symmetric(2)
        };
        let sel = greedy_energy_select(&h, &cfg).unwrap();
        assert_eq!(sel.tx_beams, vec![0, 1]);
        assert_eq!(sel.rx_beams, vec![0, 1]);
    }

    #[test]
    fn greedy_never_beats_oracle() {
        for seed in 0..15u64 {
            let h = random_beamspace(seed + 100, 8, 4);
            let cfg = small_cfg(2);
            let (_, oracle_se) = oracle_select(&h, &cfg).unwrap();
            let greedy = greedy_energy_select(&h, &cfg).unwrap();
            let greedy_se =
                selection_spectral_efficiency(&h, &greedy, 2, cfg.oracle_snr_db).unwrap();
            assert!(
                greedy_se <= oracle_se,
                "seed {seed}: greedy {greedy_se} > oracle {oracle_se}"
            );
        }
    }

    #[test]
    fn zf_closed_form_and_dominance() {
        let h = DMatrix::<Complex64>::identity(2, 2);
        let se = zf_benchmark(&h, 0.0, 2).unwrap();
        assert!((se - 2.0 * 1.5f64.log2()).abs() < 1e-12);

        for seed in 0..10u64 {
            let h = random_beamspace(seed + 60, 8, 4);
            let cfg = small_cfg(2);
            let (_, oracle_se) = oracle_select(&h, &cfg).unwrap();
            let zf = zf_benchmark(&h, cfg.oracle_snr_db, 2).unwrap();
            assert!(zf >= oracle_se, "seed {seed}: zf {zf} < oracle {oracle_se}");
        }
    }

    #[test]
    fn zf_equals_best_pair_on_grid_aligned_rank_one_channel() {
        // Single grid-aligned path: all energy in one beamspace entry, so the
        // best 1x1 selection captures everything the full channel offers.
        let cfg = ChannelConfig {
            n_clusters: 1,
            n_rays: 1,
            ..ChannelConfig::desk(8, 4, 0)
        };
        let paths = vec![crate::channel::PathComponent {
            cluster_id: 0,
            ray_id: 0,
            gain: Complex64::new(0.8, 0.3),
            aod: channel::codebook_frequency(6, 8),
            aoa: channel::codebook_frequency(1, 4),
        }];
        let h = channel::assemble_spatial(&cfg, &paths).unwrap();
        let h_b = channel::spatial_to_beamspace(&h).unwrap();
        let sel = BeamSelection::new(vec![6], vec![1]);
        let hybrid = selection_spectral_efficiency(&h_b, &sel, 1, 10.0).unwrap();
        let zf = zf_benchmark(&h_b, 10.0, 1).unwrap();
        assert!((hybrid - zf).abs() < 1e-10, "hybrid {hybrid} vs zf {zf}");
    }

    #[test]
    fn budget_overflow_is_reported() {
        let h = random_beamspace(1, 16, 8);
        let cfg = SelectionConfig {
            enumeration_budget: 10,
            ..small_cfg(4)
        };
        match oracle_select(&h, &cfg) {
            Err(Error::BudgetExceeded { count, budget }) => {
                assert_eq!(budget, 10);
                assert_eq!(count, 1820 * 70);
            }
            other => panic!("expected budget error, got {other:?}"),
        }
    }

    #[test]
    fn invalid_selections_are_rejected() {
        let h = random_beamspace(2, 8, 4);
        let dup = BeamSelection::new(vec![1, 1], vec![0, 2]);
        assert!(matches!(
            selection_spectral_efficiency(&h, &dup, 2, 10.0),
            Err(Error::InvalidSelection(_))
        ));
        let oob = BeamSelection::new(vec![0, 8], vec![0, 1]);
        assert!(oob.validate(4, 8).is_err());
        let cfg = SelectionConfig {
            n_streams: 1, // != min(2, 2)
            ..small_cfg(2)
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn singular_combined_noise_is_detected() {
        let h = random_beamspace(8, 8, 4);
        let sel = BeamSelection::new(vec![0, 1], vec![0, 1]);
        let dig = DigitalStage {
            f_bb: DMatrix::identity(2, 2),
            w_bb: DMatrix::zeros(2, 2),
        };
        assert!(matches!(
            spectral_efficiency(&h, &sel, &dig, 10.0),
            Err(Error::InvalidSelection(_))
        ));
    }

    #[test]
    fn frobenius_objective_is_finite_and_consistent() {
        let h = random_beamspace(77, 8, 4);
        let cfg = small_cfg(2);
        let (sel, _) = oracle_select(&h, &cfg).unwrap();
        let dig = build_digital_stage(&sel.selected_submatrix(&h), 2).unwrap();
        let obj = frobenius_objective(&h, &sel, &dig).unwrap();
        let total: f64 = h.iter().map(|z| z.norm_sqr()).sum();
        assert!(obj.is_finite() && obj >= 0.0);
        // The approximation only keeps energy inside the selection; the
        // objective can never exceed total energy plus the approximant mass.
        assert!(obj <= 4.0 * total);
    }

    #[test]
    fn selection_csv_roundtrip_shape() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sel.csv");
        let sel = BeamSelection::new(vec![0, 3], vec![1, 2]);
        let rows = vec![SelectionRecord::new(7, "oracle", 10.0, 2, &sel, 3.25)];
        write_selection_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "realization_id,strategy,snr_db,n_streams,tx_beams,rx_beams,se_bits"
        );
        assert_eq!(lines.next().unwrap(), "7,oracle,10.0,2,0 3,1 2,3.25");
    }
}
