//! Synthetic clustered millimeter-wave/THz channel generation.
//!
//! Channels follow the narrowband clustered (Saleh-Valenzuela style) model
//!
//! ```text
//! H = sqrt(N_t * N_r / (N_cl * N_ray)) * sum_{l,u} alpha_{l,u} a_r(phi_r) a_t(phi_t)^H
//! ```
//!
//! with uniform linear arrays at both ends. Spatial frequencies `phi` are
//! drawn uniformly from `[-1/2, 1/2)` and complex path gains from the unit
//! circular Gaussian. The beamspace representation projects `H` onto unitary
//! DFT codebooks at both ends: `H_b = A_r^H * H * A_t`.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util;

/// Parameters of the synthetic channel ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChannelConfig {
    /// Transmit array size `N_t`.
    pub n_tx: usize,
    /// Receive array size `N_r`.
    pub n_rx: usize,
    /// Number of scattering clusters `N_cl`.
    pub n_clusters: usize,
    /// Rays per cluster `N_ray`.
    pub n_rays: usize,
    /// Carrier wavelength (model units). The default mirrors a THz-band
    /// configuration; it only matters relative to `antenna_spacing`.
    pub wavelength: f64,
    /// Inter-element spacing; defaults to half a wavelength.
    pub antenna_spacing: f64,
    /// Master seed for the ensemble. Realization `k` uses an independent
    /// substream derived from this seed, so any prefix of a batch is stable
    /// regardless of batch size.
    pub seed: u64,
    /// Transmit power window in dB; each realization draws a power uniformly
    /// from this closed interval. Recorded as a dataset feature.
    #[serde(default = "default_tx_power_db")]
    pub tx_power_db: (f64, f64),
}

fn default_tx_power_db() -> (f64, f64) {
    (0.0, 30.0)
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self::desk(16, 8, 1)
    }
}

impl ChannelConfig {
    /// Desk-scale configuration: small arrays that keep exhaustive beam
    /// enumeration cheap while exercising every code path.
    pub fn desk(n_tx: usize, n_rx: usize, seed: u64) -> Self {
        ChannelConfig {
            n_tx,
            n_rx,
            n_clusters: 4,
            n_rays: 2,
            wavelength: 1.36,
            antenna_spacing: 1.36 / 2.0,
            seed,
            tx_power_db: default_tx_power_db(),
        }
    }

    /// Number of path components per realization (`N_cl * N_ray`).
    pub fn path_count(&self) -> usize {
        self.n_clusters * self.n_rays
    }

    /// Checks structural validity of the configuration.
    pub fn validate(&self) -> Result<()> {
        if self.n_tx == 0 || self.n_rx == 0 {
            return Err(Error::invalid("array sizes must be positive"));
        }
        if self.n_tx < self.n_rx {
            return Err(Error::invalid(format!(
                "expected n_tx >= n_rx, got {} < {}",
                self.n_tx, self.n_rx
            )));
        }
        if self.n_clusters == 0 || self.n_rays == 0 {
            return Err(Error::invalid("cluster and ray counts must be positive"));
        }
        if !(self.wavelength > 0.0) || !(self.antenna_spacing > 0.0) {
            return Err(Error::invalid("wavelength and spacing must be positive"));
        }
        if !(self.tx_power_db.0 <= self.tx_power_db.1)
            || !self.tx_power_db.0.is_finite()
            || !self.tx_power_db.1.is_finite()
        {
            return Err(Error::invalid("tx power window must be a finite interval"));
        }
        Ok(())
    }
}

/// One resolvable propagation path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathComponent {
    pub cluster_id: usize,
    pub ray_id: usize,
    /// Complex small-scale gain `alpha ~ CN(0, 1)`.
    pub gain: Complex64,
    /// Departure spatial frequency in `[-1/2, 1/2)`.
    pub aod: f64,
    /// Arrival spatial frequency in `[-1/2, 1/2)`.
    pub aoa: f64,
}

/// A single channel draw: path parameters plus the assembled spatial and
/// beamspace matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    pub config: ChannelConfig,
    pub paths: Vec<PathComponent>,
    /// `N_r x N_t` spatial-domain channel matrix.
    pub spatial: DMatrix<Complex64>,
    /// `N_r x N_t` beamspace-domain channel matrix.
    pub beamspace: DMatrix<Complex64>,
    /// Transmit power drawn for this realization, in dB.
    pub tx_power_db: f64,
}

/// Unit-norm ULA steering vector `a(phi)_k = exp(-j 2 pi phi k) / sqrt(n)`.
///
/// `phi` is the spatial frequency `d/lambda * sin(theta)`; callers working
/// with physical angles fold the geometry in before calling.
pub fn array_response(phi: f64, n: usize) -> Result<DVector<Complex64>> {
    if n == 0 {
        return Err(Error::invalid("array size must be positive"));
    }
    if !phi.is_finite() {
        return Err(Error::invalid("spatial frequency must be finite"));
    }
    let scale = 1.0 / (n as f64).sqrt();
    Ok(DVector::from_fn(n, |k, _| {
        let angle = -2.0 * PI * phi * k as f64;
        Complex64::from_polar(scale, angle)
    }))
}

/// Unitary DFT beam codebook for an `n`-element ULA. Column `i` is the
/// steering vector at grid frequency `phi_i = (i - (n - 1) / 2) / n`, so the
/// grid is symmetric around broadside and the columns are orthonormal.
pub fn dft_codebook(n: usize) -> DMatrix<Complex64> {
    assert!(n > 0, "codebook size must be positive");
    let scale = 1.0 / (n as f64).sqrt();
    let offset = (n as f64 - 1.0) / 2.0;
    DMatrix::from_fn(n, n, |k, i| {
        let phi = (i as f64 - offset) / n as f64;
        Complex64::from_polar(scale, -2.0 * PI * phi * k as f64)
    })
}

/// Grid frequency of codebook column `i` for an `n`-element array.
pub fn codebook_frequency(i: usize, n: usize) -> f64 {
    (i as f64 - (n as f64 - 1.0) / 2.0) / n as f64
}

/// Projects a spatial channel onto the beamspace: `H_b = A_r^H * H * A_t`.
///
/// Because both codebooks are unitary the transform preserves Frobenius norm
/// and singular values; a path aligned with grid frequencies concentrates all
/// of its energy in a single beamspace entry.
pub fn spatial_to_beamspace(h: &DMatrix<Complex64>) -> Result<DMatrix<Complex64>> {
    if h.nrows() == 0 || h.ncols() == 0 {
        return Err(Error::invalid("channel matrix must be non-empty"));
    }
    let a_r = dft_codebook(h.nrows());
    let a_t = dft_codebook(h.ncols());
    Ok(a_r.adjoint() * h * a_t)
}

/// Inverse of [`spatial_to_beamspace`]: `H = A_r * H_b * A_t^H`.
pub fn beamspace_to_spatial(h_b: &DMatrix<Complex64>) -> Result<DMatrix<Complex64>> {
    if h_b.nrows() == 0 || h_b.ncols() == 0 {
        return Err(Error::invalid("channel matrix must be non-empty"));
    }
    let a_r = dft_codebook(h_b.nrows());
    let a_t = dft_codebook(h_b.ncols());
    Ok(a_r * h_b * a_t.adjoint())
}

/// Assembles the spatial matrix from explicit path components.
pub fn assemble_spatial(
    cfg: &ChannelConfig,
    paths: &[PathComponent],
) -> Result<DMatrix<Complex64>> {
    cfg.validate()?;
    if paths.len() != cfg.path_count() {
        return Err(Error::invalid(format!(
            "expected {} paths, got {}",
            cfg.path_count(),
            paths.len()
        )));
    }
    let gamma = ((cfg.n_tx * cfg.n_rx) as f64 / cfg.path_count() as f64).sqrt();
    let mut h = DMatrix::<Complex64>::zeros(cfg.n_rx, cfg.n_tx);
    for p in paths {
        let a_r = array_response(p.aoa, cfg.n_rx)?;
        let a_t = array_response(p.aod, cfg.n_tx)?;
        // gamma * alpha * a_r * a_t^H, accumulated without temporaries.
        let scaled = p.gain * gamma;
        for (j, at_j) in a_t.iter().enumerate() {
            let col_factor = scaled * at_j.conj();
            for (i, ar_i) in a_r.iter().enumerate() {
                h[(i, j)] += ar_i * col_factor;
            }
        }
    }
    Ok(h)
}

/// Draws one channel realization from the given RNG. The draw order is fixed
/// (per path: AoD, AoA, Re gain, Im gain; then the power) so generated
/// ensembles are reproducible byte-for-byte.
pub fn generate_realization(
    cfg: &ChannelConfig,
    rng: &mut impl Rng,
) -> Result<ChannelRealization> {
    cfg.validate()?;
    let gain_dist = Normal::new(0.0, 0.5f64.sqrt()).expect("valid normal");
    let mut paths = Vec::with_capacity(cfg.path_count());
    for cluster_id in 0..cfg.n_clusters {
        for ray_id in 0..cfg.n_rays {
            let aod = rng.random_range(-0.5..0.5);
            let aoa = rng.random_range(-0.5..0.5);
            let re = gain_dist.sample(rng);
            let im = gain_dist.sample(rng);
            paths.push(PathComponent {
                cluster_id,
                ray_id,
                gain: Complex64::new(re, im),
                aod,
                aoa,
            });
        }
    }
    let tx_power_db = if cfg.tx_power_db.0 == cfg.tx_power_db.1 {
        cfg.tx_power_db.0
    } else {
        rng.random_range(cfg.tx_power_db.0..cfg.tx_power_db.1)
    };
    let spatial = assemble_spatial(cfg, &paths)?;
    let beamspace = spatial_to_beamspace(&spatial)?;
    Ok(ChannelRealization {
        config: cfg.clone(),
        paths,
        spatial,
        beamspace,
        tx_power_db,
    })
}

/// Generates `count` realizations. Realization `k` is drawn from its own
/// ChaCha substream seeded by `derive_seed(cfg.seed, k)`, which makes the
/// ensemble independent of iteration order and stable under prefixing.
pub fn generate_batch(cfg: &ChannelConfig, count: usize) -> Result<Vec<ChannelRealization>> {
    cfg.validate()?;
    (0..count)
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(util::derive_seed(cfg.seed, k as u64));
            generate_realization(cfg, &mut rng)
        })
        .collect()
}

// --- binary serialization ----------------------------------------------------
//
// Realization files ("BSMC", version 1) hold one homogeneous batch. See
// docs/FORMATS.md for the exact field-by-field layout. A JSON sidecar with the
// generating configuration is written next to the binary file.

const MAGIC: &[u8; 4] = b"BSMC";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct RealizationSidecar {
    schema: String,
    config: ChannelConfig,
    record_count: u64,
}

fn write_complex_matrix<W: Write>(w: &mut W, m: &DMatrix<Complex64>) -> Result<()> {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            let z = m[(i, j)];
            util::write_f64(w, z.re)?;
            util::write_f64(w, z.im)?;
        }
    }
    Ok(())
}

fn read_complex_matrix<R: Read>(r: &mut R, rows: usize, cols: usize) -> Result<DMatrix<Complex64>> {
    let mut m = DMatrix::<Complex64>::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            let re = util::read_f64(r)?;
            let im = util::read_f64(r)?;
            m[(i, j)] = Complex64::new(re, im);
        }
    }
    Ok(m)
}

/// Sidecar path for a realization or dataset artifact: same stem, `.json`.
pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    path.with_extension("json")
}

/// Writes a batch of realizations (all drawn from the same configuration)
/// plus its JSON sidecar.
pub fn write_realizations(path: &Path, batch: &[ChannelRealization]) -> Result<()> {
    let cfg = match batch.first() {
        Some(r) => &r.config,
        None => return Err(Error::invalid("cannot write an empty realization batch")),
    };
    if batch.iter().any(|r| r.config != *cfg) {
        return Err(Error::invalid(
            "realization batch mixes different configurations",
        ));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    util::write_u32(&mut w, VERSION)?;
    util::write_u32(&mut w, cfg.n_rx as u32)?;
    util::write_u32(&mut w, cfg.n_tx as u32)?;
    util::write_u32(&mut w, cfg.n_clusters as u32)?;
    util::write_u32(&mut w, cfg.n_rays as u32)?;
    util::write_u64(&mut w, batch.len() as u64)?;
    for r in batch {
        util::write_f64(&mut w, r.tx_power_db)?;
        for p in &r.paths {
            util::write_f64(&mut w, p.aod)?;
            util::write_f64(&mut w, p.aoa)?;
            util::write_f64(&mut w, p.gain.re)?;
            util::write_f64(&mut w, p.gain.im)?;
        }
        write_complex_matrix(&mut w, &r.spatial)?;
        write_complex_matrix(&mut w, &r.beamspace)?;
    }
    w.flush()?;

    let sidecar = RealizationSidecar {
        schema: format!("bsmc/{VERSION}"),
        config: cfg.clone(),
        record_count: batch.len() as u64,
    };
    let json = serde_json::to_string_pretty(&sidecar)?;
    std::fs::write(sidecar_path(path), json)?;
    Ok(())
}

/// Reads a realization batch written by [`write_realizations`]. The sidecar
/// supplies fields that are not part of the binary layout (seed, wavelength);
/// the binary header stays authoritative for dimensions.
pub fn read_realizations(path: &Path) -> Result<Vec<ChannelRealization>> {
    let sidecar_raw = std::fs::read_to_string(sidecar_path(path)).map_err(|e| {
        Error::Format(format!(
            "missing sidecar for {}: {e}",
            path.display()
        ))
    })?;
    let sidecar: RealizationSidecar = serde_json::from_str(&sidecar_raw)?;

    let mut r = BufReader::new(File::open(path)?);
    util::expect_magic(&mut r, MAGIC, "realization file")?;
    util::expect_version(&mut r, VERSION, "realization file")?;
    let n_rx = util::read_u32(&mut r)? as usize;
    let n_tx = util::read_u32(&mut r)? as usize;
    let n_clusters = util::read_u32(&mut r)? as usize;
    let n_rays = util::read_u32(&mut r)? as usize;
    let record_count = util::read_u64(&mut r)? as usize;

    let cfg = sidecar.config;
    if cfg.n_rx != n_rx || cfg.n_tx != n_tx || cfg.n_clusters != n_clusters || cfg.n_rays != n_rays
    {
        return Err(Error::Format(
            "sidecar configuration disagrees with binary header".into(),
        ));
    }

    let mut batch = Vec::with_capacity(record_count);
    for _ in 0..record_count {
        let tx_power_db = util::read_f64(&mut r)?;
        let mut paths = Vec::with_capacity(n_clusters * n_rays);
        for cluster_id in 0..n_clusters {
            for ray_id in 0..n_rays {
                let aod = util::read_f64(&mut r)?;
                let aoa = util::read_f64(&mut r)?;
                let re = util::read_f64(&mut r)?;
                let im = util::read_f64(&mut r)?;
                paths.push(PathComponent {
                    cluster_id,
                    ray_id,
                    gain: Complex64::new(re, im),
                    aod,
                    aoa,
                });
            }
        }
        let spatial = read_complex_matrix(&mut r, n_rx, n_tx)?;
        let beamspace = read_complex_matrix(&mut r, n_rx, n_tx)?;
        batch.push(ChannelRealization {
            config: cfg.clone(),
            paths,
            spatial,
            beamspace,
            tx_power_db,
        });
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_cfg(seed: u64) -> ChannelConfig {
        ChannelConfig::desk(8, 4, seed)
    }

    #[test]
    fn steering_vector_has_unit_norm_and_phase_ramp() {
        let a = array_response(0.17, 8).unwrap();
        assert!((a.norm() - 1.0).abs() < 1e-12);
        // Element k carries phase -2 pi phi k.
        let expected = Complex64::from_polar(1.0 / 8f64.sqrt(), -2.0 * PI * 0.17 * 3.0);
        assert!((a[3] - expected).norm() < 1e-12);
    }

    #[test]
    fn orthogonal_frequencies_give_orthogonal_steering_vectors() {
        // Frequencies spaced by 1/n are exactly orthogonal on an n-element ULA:
        // <a(0.25), a(-0.25)> on 4 elements sums the 4th roots of unity.
        let a = array_response(0.25, 4).unwrap();
        let b = array_response(-0.25, 4).unwrap();
        let ip: Complex64 = a.dotc(&b);
        assert!(ip.norm() < 1e-12, "inner product {ip}");
    }

    #[test]
    fn codebook_is_unitary() {
        for n in [1usize, 2, 5, 16] {
            let a = dft_codebook(n);
            let gram = a.adjoint() * &a;
            let eye = DMatrix::<Complex64>::identity(n, n);
            assert!((gram - eye).norm() < 1e-12, "n = {n}");
        }
    }

    #[test]
    fn grid_aligned_path_concentrates_in_one_beam() {
        // A single path whose frequencies sit exactly on codebook points
        // must put all channel energy into a single beamspace entry.
        let cfg = ChannelConfig {
            n_clusters: 1,
            n_rays: 1,
            ..unit_cfg(0)
        };
        let paths = vec![PathComponent {
            cluster_id: 0,
            ray_id: 0,
            gain: Complex64::new(1.0, -0.5),
            aod: codebook_frequency(5, cfg.n_tx),
            aoa: codebook_frequency(2, cfg.n_rx),
        }];
        let h = assemble_spatial(&cfg, &paths).unwrap();
        let h_b = spatial_to_beamspace(&h).unwrap();
        let total: f64 = h_b.iter().map(|z| z.norm_sqr()).sum();
        let peak = h_b[(2, 5)].norm_sqr();
        assert!(
            (peak - total).abs() < 1e-9 * total,
            "peak {peak} vs total {total}"
        );
    }

    #[test]
    fn beamspace_roundtrip_and_norm_preservation() {
        let batch = generate_batch(&unit_cfg(7), 4).unwrap();
        for r in &batch {
            let back = beamspace_to_spatial(&r.beamspace).unwrap();
            assert!((&back - &r.spatial).norm() < 1e-12 * r.spatial.norm().max(1.0));
            assert!((r.beamspace.norm() - r.spatial.norm()).abs() < 1e-10);
        }
    }

    #[test]
    fn generation_is_deterministic_and_prefix_stable() {
        let cfg = unit_cfg(99);
        let a = generate_batch(&cfg, 5).unwrap();
        let b = generate_batch(&cfg, 5).unwrap();
        assert_eq!(a, b);
        // A shorter batch is a prefix of a longer one.
        let c = generate_batch(&cfg, 3).unwrap();
        assert_eq!(&a[..3], &c[..]);
    }

    #[test]
    fn angles_and_power_stay_in_their_windows() {
        let batch = generate_batch(&unit_cfg(3), 50).unwrap();
        for r in &batch {
            for p in &r.paths {
                assert!((-0.5..0.5).contains(&p.aod));
                assert!((-0.5..0.5).contains(&p.aoa));
            }
            assert!(r.tx_power_db >= 0.0 && r.tx_power_db < 30.0);
        }
    }

    #[test]
    fn rank_is_bounded_by_path_count() {
        // 2 paths on an 8x4 array: at most 2 nonzero singular values.
        let cfg = ChannelConfig {
            n_clusters: 2,
            n_rays: 1,
            ..unit_cfg(11)
        };
        let r = generate_batch(&cfg, 1).unwrap().remove(0);
        let svd = r.spatial.clone().svd(false, false);
        let s = &svd.singular_values;
        let tol = 1e-10 * s[0];
        let rank = s.iter().filter(|&&v| v > tol).count();
        assert!(rank <= 2, "rank {rank}, singular values {s:?}");
    }

    #[test]
    fn file_roundtrip_preserves_batch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("batch.bsmc");
        let batch = generate_batch(&unit_cfg(21), 3).unwrap();
        write_realizations(&path, &batch).unwrap();
        let back = read_realizations(&path).unwrap();
        assert_eq!(batch, back);
        assert!(sidecar_path(&path).exists());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = unit_cfg(0);
        cfg.n_rx = 16; // larger than n_tx = 8
        assert!(matches!(
            cfg.validate(),
            Err(Error::InvalidArgument(_))
        ));
        let mut cfg = unit_cfg(0);
        cfg.n_clusters = 0;
        assert!(cfg.validate().is_err());
        assert!(array_response(f64::NAN, 4).is_err());
        assert!(array_response(0.1, 0).is_err());
    }
}
