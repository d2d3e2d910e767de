//! Labeled per-beam datasets for beam-selection classifiers.
//!
//! Each channel realization contributes one sample per candidate beam and
//! side. A sample's base features describe the realization —
//! `[tx_power_db, path_gain, AoDs, AoAs, Re(alpha), Im(alpha)]`, length
//! `4 * N_cl * N_ray + 2` — and a 2-real beam descriptor (normalized beam
//! index, beam energy fraction) distinguishes the beams of one realization.
//! The label is 0 for an unassigned beam or the 1-based RF-chain index the
//! oracle assigned it to. Base features are normalized per column to zero
//! mean and unit range across the dataset.

pub mod gmm;
pub mod image;

pub use image::{EmbedKind, ImageTensor};

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::beam_select::{self, BeamSelection, SelectionConfig};
use crate::channel::{ChannelConfig, ChannelRealization};
use crate::error::{Error, Result};
use crate::util;

/// Which link end a dataset describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Tx,
    Rx,
}

impl std::fmt::Display for Side {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Side::Tx => "tx",
            Side::Rx => "rx",
        })
    }
}

/// One labeled per-beam sample. `features` holds the normalized base vector
/// with the 2-real beam descriptor appended (the descriptor is already in
/// `[0, 1]` and is not re-normalized).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub realization_id: u64,
    /// Beamspace beam this sample describes.
    pub beam_index: usize,
    /// 0 = unassigned; `k >= 1` = assigned to RF chain `k`.
    pub label: u8,
    pub features: Vec<f64>,
}

impl LabeledSample {
    /// Base features (everything before the descriptor).
    pub fn base(&self) -> &[f64] {
        &self.features[..self.features.len() - 2]
    }

    /// `[normalized beam index, beam energy fraction]`.
    pub fn descriptor(&self) -> [f64; 2] {
        let n = self.features.len();
        [self.features[n - 2], self.features[n - 1]]
    }
}

/// Per-column statistics captured during normalization so that fresh samples
/// (e.g. evaluation-time realizations) can be mapped into the same space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

/// Optional dataset construction knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetOptions {
    /// Append the flattened per-realization GMM descriptor to the base
    /// features.
    #[serde(default)]
    pub append_gmm: bool,
    /// Mixture components for the GMM descriptor; defaults to `N_cl`.
    #[serde(default)]
    pub gmm_components: Option<usize>,
    #[serde(default = "default_gmm_tol")]
    pub gmm_tol: f64,
    #[serde(default = "default_gmm_max_iter")]
    pub gmm_max_iter: usize,
}

fn default_gmm_tol() -> f64 {
    1e-8
}

fn default_gmm_max_iter() -> usize {
    200
}

impl Default for DatasetOptions {
    fn default() -> Self {
        DatasetOptions {
            append_gmm: false,
            gmm_components: None,
            gmm_tol: default_gmm_tol(),
            gmm_max_iter: default_gmm_max_iter(),
        }
    }
}

/// A labeled dataset for one side of the link, plus everything needed to
/// reproduce or extend it (configs, normalization statistics, layout).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub side: Side,
    pub channel: ChannelConfig,
    pub selection: SelectionConfig,
    /// Total per-sample feature count (base + 2 descriptor entries).
    pub feature_count: usize,
    pub base_feature_count: usize,
    /// `n_rf + 1` classes: unassigned plus one per RF chain.
    pub class_count: usize,
    /// Array size on this side; descriptor indices normalize against it.
    pub beam_count: usize,
    pub n_realizations: usize,
    pub feature_names: Vec<String>,
    /// Base columns that were constant across the dataset (zeroed by the
    /// normalization guard) — reported so callers can warn.
    pub constant_features: Vec<usize>,
    pub stats: NormalizationStats,
    pub samples: Vec<LabeledSample>,
}

impl Dataset {
    /// Unique realization ids in first-appearance order.
    pub fn realization_ids(&self) -> Vec<u64> {
        let mut seen = BTreeSet::new();
        let mut ids = Vec::new();
        for s in &self.samples {
            if seen.insert(s.realization_id) {
                ids.push(s.realization_id);
            }
        }
        ids
    }

    /// Sample counts per class label.
    pub fn label_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0usize; self.class_count];
        for s in &self.samples {
            hist[s.label as usize] += 1;
        }
        hist
    }

    /// Expands sample `index` into an image tensor for a convolutional
    /// classifier.
    pub fn image(&self, index: usize, target: usize, kind: EmbedKind) -> Result<ImageTensor> {
        image::expand_features_to_image(
            &self.samples[index].features,
            index as u64,
            target,
            kind,
        )
    }
}

/// Raw (unnormalized) realization features:
/// `[tx_power_db, ||H||_F, AoDs..., AoAs..., Re(alpha)..., Im(alpha)...]`.
pub fn raw_features(real: &ChannelRealization) -> Vec<f64> {
    let lu = real.paths.len();
    let mut v = Vec::with_capacity(2 + 4 * lu);
    v.push(real.tx_power_db);
    v.push(real.spatial.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt());
    v.extend(real.paths.iter().map(|p| p.aod));
    v.extend(real.paths.iter().map(|p| p.aoa));
    v.extend(real.paths.iter().map(|p| p.gain.re));
    v.extend(real.paths.iter().map(|p| p.gain.im));
    v
}

fn base_feature_names(path_count: usize, gmm_components: usize) -> Vec<String> {
    let mut names = vec!["tx_power_db".to_string(), "path_gain".to_string()];
    for prefix in ["aod", "aoa", "re_alpha", "im_alpha"] {
        names.extend((0..path_count).map(|i| format!("{prefix}_{i}")));
    }
    if gmm_components > 0 {
        names.push("gmm_amplitude".to_string());
        for k in 0..gmm_components {
            for field in ["w", "mu_phir", "mu_phit", "mu_alpha", "s_phir", "s_phit", "s_alpha"] {
                names.push(format!("gmm_{field}_{k}"));
            }
        }
    }
    names
}

/// Normalizes each column of `rows` to zero mean and unit range:
/// `a_bar = (a - mean(a)) / (max(a) - min(a))`. Constant columns are zeroed
/// (division guard) and reported in the returned index list.
pub fn normalize(rows: &mut [Vec<f64>]) -> Result<(NormalizationStats, Vec<usize>)> {
    if rows.len() < 2 {
        return Err(Error::invalid("normalization needs at least 2 rows"));
    }
    let f = rows[0].len();
    if rows.iter().any(|r| r.len() != f) {
        return Err(Error::invalid("ragged feature matrix"));
    }
    let m = rows.len() as f64;
    let mut mean = vec![0.0; f];
    let mut min = vec![f64::INFINITY; f];
    let mut max = vec![f64::NEG_INFINITY; f];
    for row in rows.iter() {
        for (j, &v) in row.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::invalid(format!("non-finite value in column {j}")));
            }
            mean[j] += v;
            min[j] = min[j].min(v);
            max[j] = max[j].max(v);
        }
    }
    for mu in &mut mean {
        *mu /= m;
    }
    let mut constant = Vec::new();
    for j in 0..f {
        if max[j] == min[j] {
            constant.push(j);
        }
    }
    let stats = NormalizationStats { mean, min, max };
    for row in rows.iter_mut() {
        apply_normalization(row, &stats);
    }
    Ok((stats, constant))
}

/// Applies previously captured normalization statistics to one row (used for
/// samples generated after the dataset was built).
pub fn apply_normalization(row: &mut [f64], stats: &NormalizationStats) {
    for (j, v) in row.iter_mut().enumerate() {
        let range = stats.max[j] - stats.min[j];
        *v = if range == 0.0 {
            0.0
        } else {
            (*v - stats.mean[j]) / range
        };
    }
}

/// Per-beam labels and descriptors for one realization and side, before any
/// normalization. Wraps the oracle; see [`label_with_selection`] for the
/// labeling rule itself.
pub fn label_realization(
    real: &ChannelRealization,
    cfg: &SelectionConfig,
    side: Side,
) -> Result<Vec<LabeledSample>> {
    let (selection, _) = beam_select::oracle_select(&real.beamspace, cfg)?;
    label_with_selection(real, cfg, side, &selection, 0)
}

/// Labels every candidate beam of `side` against an already computed oracle
/// selection: a selected beam gets the 1-based index of its RF chain (chains
/// ordered by ascending beam index), everything else gets class 0. Features
/// are raw at this stage.
pub fn label_with_selection(
    real: &ChannelRealization,
    cfg: &SelectionConfig,
    side: Side,
    selection: &BeamSelection,
    realization_id: u64,
) -> Result<Vec<LabeledSample>> {
    let h_b = &real.beamspace;
    let (tx_pool, rx_pool) = beam_select::candidate_pools(h_b, cfg)?;
    let (pool, selected, energies, dim) = match side {
        Side::Tx => (
            tx_pool,
            &selection.tx_beams,
            beam_select::tx_beam_energies(h_b),
            h_b.ncols(),
        ),
        Side::Rx => (
            rx_pool,
            &selection.rx_beams,
            beam_select::rx_beam_energies(h_b),
            h_b.nrows(),
        ),
    };
    let mut ordered = selected.clone();
    ordered.sort_unstable();
    if ordered.len() > u8::MAX as usize {
        return Err(Error::invalid("more than 255 RF chains"));
    }
    let total_energy: f64 = energies.iter().sum();
    let base = raw_features(real);
    let mut samples = Vec::with_capacity(pool.len());
    for beam in pool {
        let label = match ordered.iter().position(|&b| b == beam) {
            Some(pos) => (pos + 1) as u8,
            None => 0,
        };
        let idx_norm = if dim > 1 {
            beam as f64 / (dim as f64 - 1.0)
        } else {
            0.0
        };
        let energy_frac = if total_energy > 0.0 {
            energies[beam] / total_energy
        } else {
            0.0
        };
        let mut features = base.clone();
        features.push(idx_norm);
        features.push(energy_frac);
        samples.push(LabeledSample {
            realization_id,
            beam_index: beam,
            label,
            features,
        });
    }
    Ok(samples)
}

/// Builds the labeled dataset for one side. Runs the oracle once per
/// realization; see [`build_datasets_both`] to amortize that work across
/// both sides.
pub fn build_dataset(
    realizations: &[ChannelRealization],
    cfg: &SelectionConfig,
    side: Side,
    opts: &DatasetOptions,
) -> Result<Dataset> {
    let (tx, rx) = build_datasets_both(realizations, cfg, opts)?;
    Ok(match side {
        Side::Tx => tx,
        Side::Rx => rx,
    })
}

/// Builds transmit- and receive-side datasets in one pass, sharing a single
/// oracle run per realization.
pub fn build_datasets_both(
    realizations: &[ChannelRealization],
    cfg: &SelectionConfig,
    opts: &DatasetOptions,
) -> Result<(Dataset, Dataset)> {
    if realizations.is_empty() {
        return Err(Error::invalid("cannot build a dataset from 0 realizations"));
    }
    cfg.validate()?;
    let channel_cfg = realizations[0].config.clone();
    let gmm_k = if opts.append_gmm {
        opts.gmm_components.unwrap_or(channel_cfg.n_clusters)
    } else {
        0
    };

    let mut tx_samples: Vec<LabeledSample> = Vec::new();
    let mut rx_samples: Vec<LabeledSample> = Vec::new();
    for (id, real) in realizations.iter().enumerate() {
        if real.config != channel_cfg {
            return Err(Error::invalid(
                "realization batch mixes different configurations",
            ));
        }
        let (selection, _) = beam_select::oracle_select(&real.beamspace, cfg)?;
        let gmm_tail: Vec<f64> = if gmm_k > 0 {
            let points: Vec<[f64; 3]> = real
                .paths
                .iter()
                .map(|p| [p.aoa, p.aod, p.gain.norm()])
                .collect();
            gmm::fit_gmm(&points, gmm_k, opts.gmm_tol, opts.gmm_max_iter)?.flatten()
        } else {
            Vec::new()
        };
        for (side, sink) in [(Side::Tx, &mut tx_samples), (Side::Rx, &mut rx_samples)] {
            let mut labeled =
                label_with_selection(real, cfg, side, &selection, id as u64)?;
            if !gmm_tail.is_empty() {
                for s in &mut labeled {
                    // Descriptor stays last: splice the GMM block before it.
                    let at = s.features.len() - 2;
                    s.features.splice(at..at, gmm_tail.iter().cloned());
                }
            }
            sink.append(&mut labeled);
        }
    }

    let path_count = channel_cfg.path_count();
    let base_len = 2 + 4 * path_count + if gmm_k > 0 { 1 + 7 * gmm_k } else { 0 };
    let mut names = base_feature_names(path_count, gmm_k);
    names.push("beam_index_norm".to_string());
    names.push("beam_energy_frac".to_string());

    let finish = |samples: Vec<LabeledSample>, side: Side, beam_count: usize, n_rf: usize| -> Result<Dataset> {
        let mut samples = samples;
        let mut rows: Vec<Vec<f64>> = samples
            .iter()
            .map(|s| s.features[..base_len].to_vec())
            .collect();
        let (stats, constant) = normalize(&mut rows)?;
        for (s, row) in samples.iter_mut().zip(rows) {
            s.features[..base_len].copy_from_slice(&row);
        }
        Ok(Dataset {
            side,
            channel: channel_cfg.clone(),
            selection: cfg.clone(),
            feature_count: base_len + 2,
            base_feature_count: base_len,
            class_count: n_rf + 1,
            beam_count,
            n_realizations: realizations.len(),
            feature_names: names.clone(),
            constant_features: constant,
            stats,
            samples,
        })
    };

    let tx = finish(tx_samples, Side::Tx, channel_cfg.n_tx, cfg.n_rf_tx)?;
    let rx = finish(rx_samples, Side::Rx, channel_cfg.n_rx, cfg.n_rf_rx)?;
    Ok((tx, rx))
}

/// True when two channel configurations describe the same generative model,
/// ignoring the seed (evaluation batches deliberately use a fresh one).
pub(crate) fn same_channel_family(a: &ChannelConfig, b: &ChannelConfig) -> bool {
    a.n_tx == b.n_tx
        && a.n_rx == b.n_rx
        && a.n_clusters == b.n_clusters
        && a.n_rays == b.n_rays
        && a.wavelength == b.wavelength
        && a.antenna_spacing == b.antenna_spacing
        && a.tx_power_db == b.tx_power_db
}

/// Labels one fresh realization against the oracle and maps its features
/// into the normalized space of already-built datasets, so models trained on
/// those datasets can consume it. Returns per-beam samples for both sides
/// plus the oracle selection for reuse.
pub fn eval_realization_samples(
    real: &ChannelRealization,
    tx_space: &Dataset,
    rx_space: &Dataset,
    opts: &DatasetOptions,
    realization_id: u64,
) -> Result<(Vec<LabeledSample>, Vec<LabeledSample>, BeamSelection)> {
    if tx_space.selection != rx_space.selection {
        return Err(Error::Mismatch(
            "tx and rx datasets disagree on the selection configuration".into(),
        ));
    }
    for space in [tx_space, rx_space] {
        if !same_channel_family(&real.config, &space.channel) {
            return Err(Error::Mismatch(
                "realization comes from a different channel family than the dataset".into(),
            ));
        }
    }
    let cfg = &tx_space.selection;
    let (selection, _) = beam_select::oracle_select(&real.beamspace, cfg)?;

    // Recover the GMM block width from the stored layout and check it against
    // the requested options.
    let p = real.config.path_count();
    let plain = 2 + 4 * p;
    let extra = tx_space.base_feature_count as isize - plain as isize;
    let gmm_k = match extra {
        0 => 0,
        e if e > 0 && (e - 1) % 7 == 0 => ((e - 1) / 7) as usize,
        _ => {
            return Err(Error::Mismatch(
                "dataset feature layout does not match the channel's path count".into(),
            ))
        }
    };
    if opts.append_gmm != (gmm_k > 0) {
        return Err(Error::Mismatch(
            "gmm options disagree with the dataset's stored feature layout".into(),
        ));
    }
    let gmm_tail: Vec<f64> = if gmm_k > 0 {
        let points: Vec<[f64; 3]> = real
            .paths
            .iter()
            .map(|p| [p.aoa, p.aod, p.gain.norm()])
            .collect();
        gmm::fit_gmm(&points, gmm_k, opts.gmm_tol, opts.gmm_max_iter)?.flatten()
    } else {
        Vec::new()
    };

    let mut out: Vec<Vec<LabeledSample>> = Vec::with_capacity(2);
    for (side, space) in [(Side::Tx, tx_space), (Side::Rx, rx_space)] {
        let mut labeled = label_with_selection(real, cfg, side, &selection, realization_id)?;
        for s in &mut labeled {
            if !gmm_tail.is_empty() {
                let at = s.features.len() - 2;
                s.features.splice(at..at, gmm_tail.iter().cloned());
            }
            if s.features.len() != space.feature_count {
                return Err(Error::Mismatch(format!(
                    "evaluation sample has {} features, dataset expects {}",
                    s.features.len(),
                    space.feature_count
                )));
            }
            apply_normalization(&mut s.features[..space.base_feature_count], &space.stats);
        }
        out.push(labeled);
    }
    let rx = out.pop().expect("two sides");
    let tx = out.pop().expect("two sides");
    Ok((tx, rx, selection))
}

/// Splits a dataset into train/validation parts by realization: ids are
/// shuffled with `seed`, the first `floor(R * train_fraction)` (clamped to
/// keep both sides non-empty) become training realizations, and every sample
/// follows its realization.
pub fn split_dataset(ds: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid("train_fraction must lie strictly in (0, 1)"));
    }
    let mut ids = ds.realization_ids();
    if ids.len() < 2 {
        return Err(Error::invalid("need at least 2 realizations to split"));
    }
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let n_train = ((ids.len() as f64 * train_fraction).floor() as usize)
        .clamp(1, ids.len() - 1);
    let train_ids: BTreeSet<u64> = ids[..n_train].iter().cloned().collect();

    let make = |want_train: bool| {
        let samples: Vec<LabeledSample> = ds
            .samples
            .iter()
            .filter(|s| train_ids.contains(&s.realization_id) == want_train)
            .cloned()
            .collect();
        let n_real = if want_train {
            n_train
        } else {
            ids.len() - n_train
        };
        Dataset {
            samples,
            n_realizations: n_real,
            ..ds.clone()
        }
    };
    Ok((make(true), make(false)))
}

// --- serialization -----------------------------------------------------------

const MAGIC: &[u8; 4] = b"BSDS";
const VERSION: u32 = 1;

/// Everything about a dataset except the sample payload; stored as the JSON
/// sidecar next to the binary file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSidecar {
    pub schema: String,
    pub side: Side,
    pub channel: ChannelConfig,
    pub selection: SelectionConfig,
    pub feature_count: usize,
    pub base_feature_count: usize,
    pub class_count: usize,
    pub beam_count: usize,
    pub n_realizations: usize,
    pub sample_count: u64,
    pub feature_names: Vec<String>,
    pub constant_features: Vec<usize>,
    pub stats: NormalizationStats,
}

/// Writes the dataset binary ("BSDS") plus its JSON sidecar.
pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    util::write_u32(&mut w, VERSION)?;
    util::write_u32(&mut w, ds.feature_count as u32)?;
    util::write_u32(&mut w, ds.class_count as u32)?;
    util::write_u64(&mut w, ds.samples.len() as u64)?;
    for s in &ds.samples {
        if s.features.len() != ds.feature_count {
            return Err(Error::invalid("sample feature length mismatch"));
        }
        util::write_u64(&mut w, s.realization_id)?;
        util::write_u8(&mut w, s.label)?;
        for &v in &s.features {
            util::write_f64(&mut w, v)?;
        }
    }
    w.flush()?;

    let sidecar = DatasetSidecar {
        schema: format!("bsds/{VERSION}"),
        side: ds.side,
        channel: ds.channel.clone(),
        selection: ds.selection.clone(),
        feature_count: ds.feature_count,
        base_feature_count: ds.base_feature_count,
        class_count: ds.class_count,
        beam_count: ds.beam_count,
        n_realizations: ds.n_realizations,
        sample_count: ds.samples.len() as u64,
        feature_names: ds.feature_names.clone(),
        constant_features: ds.constant_features.clone(),
        stats: ds.stats.clone(),
    };
    std::fs::write(
        crate::channel::sidecar_path(path),
        serde_json::to_string_pretty(&sidecar)?,
    )?;
    Ok(())
}

/// Reads a dataset written by [`write_dataset`]; the binary header must
/// agree with the sidecar.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let sidecar_raw = std::fs::read_to_string(crate::channel::sidecar_path(path))
        .map_err(|e| Error::Format(format!("missing sidecar for {}: {e}", path.display())))?;
    let sc: DatasetSidecar = serde_json::from_str(&sidecar_raw)?;

    let mut r = BufReader::new(File::open(path)?);
    util::expect_magic(&mut r, MAGIC, "dataset file")?;
    util::expect_version(&mut r, VERSION, "dataset file")?;
    let feature_count = util::read_u32(&mut r)? as usize;
    let class_count = util::read_u32(&mut r)? as usize;
    let sample_count = util::read_u64(&mut r)?;
    if feature_count != sc.feature_count
        || class_count != sc.class_count
        || sample_count != sc.sample_count
    {
        return Err(Error::Mismatch(
            "dataset binary header disagrees with sidecar".into(),
        ));
    }

    let mut samples = Vec::with_capacity(sample_count as usize);
    for _ in 0..sample_count {
        let realization_id = util::read_u64(&mut r)?;
        let label = util::read_u8(&mut r)?;
        if (label as usize) >= class_count {
            return Err(Error::Format(format!(
                "label {label} out of range for {class_count} classes"
            )));
        }
        let mut features = Vec::with_capacity(feature_count);
        for _ in 0..feature_count {
            features.push(util::read_f64(&mut r)?);
        }
        let beam_index = (features[feature_count - 2] * (sc.beam_count as f64 - 1.0))
            .round()
            .max(0.0) as usize;
        samples.push(LabeledSample {
            realization_id,
            beam_index,
            label,
            features,
        });
    }
    Ok(Dataset {
        side: sc.side,
        channel: sc.channel,
        selection: sc.selection,
        feature_count,
        base_feature_count: sc.base_feature_count,
        class_count,
        beam_count: sc.beam_count,
        n_realizations: sc.n_realizations,
        feature_names: sc.feature_names,
        constant_features: sc.constant_features,
        stats: sc.stats,
        samples,
    })
}

/// CSV mirror of the dataset (same columns as the binary records plus the
/// reconstructed beam index).
pub fn write_dataset_csv(path: &Path, ds: &Dataset) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "realization_id,label,beam_index")?;
    for name in &ds.feature_names {
        write!(w, ",{name}")?;
    }
    writeln!(w)?;
    for s in &ds.samples {
        write!(w, "{},{},{}", s.realization_id, s.label, s.beam_index)?;
        for &v in &s.features {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}
