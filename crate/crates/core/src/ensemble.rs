//! Ensembles of weak classifiers: sequential training on random subsets
//! with misclassified-sample forwarding, stagewise weight selection by a
//! 0-1-error line search, and weighted majority voting.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::image::ImageTensor;
use crate::error::{Error, Result};
use crate::neuralnet::{
    self, ClassifierModel, ImageSource, NetworkSpec, SubsetSource, TrainConfig,
};
use crate::util;

/// A stagewise weight is rejected (set to 0) if its best grid value would
/// raise the fit-slice error by more than this.
pub const GREEDY_TOLERANCE: f64 = 0.005;

/// Fraction of the training set held out from every weak-learner subset and
/// used only to select voting weights.
const FIT_SLICE_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnsembleConfig {
    /// Number of weak learners.
    pub m1: usize,
    /// Share of the learner pool drawn (uniformly, without replacement) as
    /// each learner's fresh subset.
    pub subset_fraction: f64,
    /// Candidate voting weights for the stagewise line search.
    pub weight_grid: Vec<f64>,
    pub seed: u64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            m1: 5,
            subset_fraction: 0.6,
            weight_grid: vec![0.25, 0.5, 0.75, 1.0],
            seed: 0,
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m1 == 0 {
            return Err(Error::invalid("ensemble needs at least one learner"));
        }
        if !(self.subset_fraction > 0.0 && self.subset_fraction <= 1.0) {
            return Err(Error::invalid("subset_fraction must lie in (0, 1]"));
        }
        if self.weight_grid.is_empty() {
            return Err(Error::invalid("weight grid must be nonempty"));
        }
        if self.weight_grid.iter().any(|&c| !c.is_finite() || c < 0.0) {
            return Err(Error::invalid("weights must be finite and nonnegative"));
        }
        if self.weight_grid.iter().all(|&c| c == 0.0) {
            return Err(Error::invalid("weight grid needs a positive entry"));
        }
        Ok(())
    }
}

/// A trained ensemble. Skipped learners (divergence, or a rejected greedy
/// step) stay in the list with weight 0 so positions remain meaningful.
#[derive(Debug, Clone)]
pub struct EnsembleModel {
    pub learners: Vec<ClassifierModel>,
    pub weights: Vec<f64>,
    /// Indices of learners carrying weight 0 and why.
    pub skipped: Vec<(usize, SkipReason)>,
    /// Fit-slice 0-1 error after each stage (length m1).
    pub fit_errors: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    Diverged,
    GreedyRejected,
}

impl EnsembleModel {
    pub fn n_classes(&self) -> usize {
        self.learners.first().map_or(0, |l| l.spec.n_classes)
    }

    pub fn active_learners(&self) -> usize {
        self.weights.iter().filter(|&&w| w > 0.0).count()
    }
}

/// Weighted vote masses for one sample: `mass[w] = sum_m c_m * 1[vote_m = w]`.
/// Returns the argmax class (ties toward the lower index) and the full mass
/// vector; the total mass always equals the sum of the weights.
pub fn weighted_vote(weights: &[f64], votes: &[u8], n_classes: usize) -> (u8, Vec<f64>) {
    debug_assert_eq!(weights.len(), votes.len());
    let mut mass = vec![0.0; n_classes];
    for (&c, &v) in weights.iter().zip(votes) {
        mass[v as usize] += c;
    }
    let mut best = 0usize;
    for (j, &m) in mass.iter().enumerate().skip(1) {
        if m > mass[best] {
            best = j;
        }
    }
    (best as u8, mass)
}

/// Ensemble predictions over a set: each active learner casts its argmax
/// class once per sample, then [`weighted_vote`] combines them.
pub fn predict_batch(ens: &EnsembleModel, set: &dyn ImageSource) -> Result<Vec<u8>> {
    if ens.learners.is_empty() {
        return Err(Error::invalid("empty ensemble"));
    }
    let n_classes = ens.n_classes();
    let mut per_learner: Vec<(f64, Vec<u8>)> = Vec::new();
    for (learner, &w) in ens.learners.iter().zip(&ens.weights) {
        if w > 0.0 {
            per_learner.push((w, neuralnet::predict(learner, set)?));
        }
    }
    if per_learner.is_empty() {
        return Err(Error::EnsembleFailed("no active learners".into()));
    }
    let mut out = Vec::with_capacity(set.len());
    let weights: Vec<f64> = per_learner.iter().map(|(w, _)| *w).collect();
    let mut votes = vec![0u8; per_learner.len()];
    for i in 0..set.len() {
        for (m, (_, preds)) in per_learner.iter().enumerate() {
            votes[m] = preds[i];
        }
        out.push(weighted_vote(&weights, &votes, n_classes).0);
    }
    Ok(out)
}

/// Per-sample vote-mass vectors: entry `w` holds the summed weight of the
/// active learners that voted class `w`. Rows sum to the total active
/// weight, so `mass / mass.sum()` is a distribution over classes.
pub fn predict_masses(ens: &EnsembleModel, set: &dyn ImageSource) -> Result<Vec<Vec<f64>>> {
    if ens.learners.is_empty() {
        return Err(Error::invalid("empty ensemble"));
    }
    let n_classes = ens.n_classes();
    let mut per_learner: Vec<(f64, Vec<u8>)> = Vec::new();
    for (learner, &w) in ens.learners.iter().zip(&ens.weights) {
        if w > 0.0 {
            per_learner.push((w, neuralnet::predict(learner, set)?));
        }
    }
    if per_learner.is_empty() {
        return Err(Error::EnsembleFailed("no active learners".into()));
    }
    let weights: Vec<f64> = per_learner.iter().map(|(w, _)| *w).collect();
    let mut votes = vec![0u8; per_learner.len()];
    let mut out = Vec::with_capacity(set.len());
    for i in 0..set.len() {
        for (m, (_, preds)) in per_learner.iter().enumerate() {
            votes[m] = preds[i];
        }
        out.push(weighted_vote(&weights, &votes, n_classes).1);
    }
    Ok(out)
}

/// Prediction for a single image.
pub fn predict_one(ens: &EnsembleModel, image: &ImageTensor, label_hint: u8) -> Result<u8> {
    let set = neuralnet::TensorSet {
        images: vec![image.clone()],
        labels: vec![label_hint],
        class_count: ens.n_classes(),
    };
    Ok(predict_batch(ens, &set)?[0])
}

/// 0-1 misclassification rate of the ensemble over a set.
pub fn ensemble_error(ens: &EnsembleModel, set: &dyn ImageSource) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty set"));
    }
    let preds = predict_batch(ens, set)?;
    let wrong = preds
        .iter()
        .enumerate()
        .filter(|&(i, &p)| p != set.label(i))
        .count();
    Ok(wrong as f64 / set.len() as f64)
}

/// 0-1 error from cached per-learner votes (avoids re-running the networks
/// during the weight line search).
fn error_from_votes(
    weights: &[f64],
    votes: &[Vec<u8>],
    labels: &[u8],
    n_classes: usize,
) -> f64 {
    let active: Vec<usize> = weights
        .iter()
        .enumerate()
        .filter(|(_, &w)| w > 0.0)
        .map(|(m, _)| m)
        .collect();
    let mut wrong = 0usize;
    let mut sample_votes = vec![0u8; active.len()];
    let mut w = vec![0.0; active.len()];
    for (k, &m) in active.iter().enumerate() {
        w[k] = weights[m];
    }
    for (i, &label) in labels.iter().enumerate() {
        for (k, &m) in active.iter().enumerate() {
            sample_votes[k] = votes[m][i];
        }
        if weighted_vote(&w, &sample_votes, n_classes).0 != label {
            wrong += 1;
        }
    }
    wrong as f64 / labels.len().max(1) as f64
}

/// Trains `m1` weak learners sequentially. Each learner sees a fresh random
/// subset of the pool unioned with the samples the current ensemble gets
/// wrong (capped at twice the subset size); its voting weight is the grid
/// value minimizing the fit-slice 0-1 error, or 0 if every candidate would
/// worsen it beyond [`GREEDY_TOLERANCE`] or training diverged.
pub fn train_ensemble(
    train_set: &dyn ImageSource,
    val_set: &dyn ImageSource,
    cfg: &EnsembleConfig,
    net_spec: &NetworkSpec,
    train_cfg: &TrainConfig,
) -> Result<EnsembleModel> {
    cfg.validate()?;
    net_spec.validate()?;
    train_cfg.validate()?;
    if train_set.len() < 2 {
        return Err(Error::invalid("ensemble training needs at least 2 samples"));
    }
    let n_classes = net_spec.n_classes;

    // Hold out the fit slice used only for weight selection.
    let mut rng = ChaCha8Rng::seed_from_u64(util::derive_seed(cfg.seed, 0));
    let mut all: Vec<usize> = (0..train_set.len()).collect();
    all.shuffle(&mut rng);
    let fit_n = ((train_set.len() as f64 * FIT_SLICE_FRACTION).round() as usize)
        .clamp(1, train_set.len() - 1);
    let fit_idx: Vec<usize> = all[..fit_n].to_vec();
    let pool_idx: Vec<usize> = all[fit_n..].to_vec();
    let fit_view = SubsetSource::new(train_set, fit_idx.clone());
    let pool_view = SubsetSource::new(train_set, pool_idx.clone());
    let fit_labels: Vec<u8> = (0..fit_view.len()).map(|i| fit_view.label(i)).collect();
    let pool_labels: Vec<u8> = (0..pool_view.len()).map(|i| pool_view.label(i)).collect();

    let subset_size = ((pool_idx.len() as f64 * cfg.subset_fraction).round() as usize)
        .clamp(1, pool_idx.len());

    let mut learners: Vec<ClassifierModel> = Vec::with_capacity(cfg.m1);
    let mut weights: Vec<f64> = Vec::with_capacity(cfg.m1);
    let mut skipped: Vec<(usize, SkipReason)> = Vec::new();
    let mut fit_errors: Vec<f64> = Vec::with_capacity(cfg.m1);
    // Cached votes per learner (empty for weight-0 learners).
    let mut votes_fit: Vec<Vec<u8>> = Vec::with_capacity(cfg.m1);
    let mut votes_pool: Vec<Vec<u8>> = Vec::with_capacity(cfg.m1);
    // Pool positions the current ensemble misclassifies.
    let mut misclassified: Vec<usize> = Vec::new();
    let mut current_err = 1.0;

    for m in 0..cfg.m1 {
        let mut draw_rng = ChaCha8Rng::seed_from_u64(util::derive_seed(cfg.seed, 1 + m as u64));
        let mut pool_positions: Vec<usize> = (0..pool_view.len()).collect();
        pool_positions.shuffle(&mut draw_rng);
        let mut chosen: Vec<usize> = pool_positions[..subset_size].to_vec();

        // Forward the ensemble's current mistakes, capped at 2x the subset
        // size by down-sampling the addition.
        let mut extra: Vec<usize> = misclassified
            .iter()
            .cloned()
            .filter(|p| !chosen.contains(p))
            .collect();
        let room = subset_size; // cap = 2 * subset_size total
        if extra.len() > room {
            extra.shuffle(&mut draw_rng);
            extra.truncate(room);
        }
        chosen.extend(extra);
        chosen.sort_unstable();
        let learner_train =
            SubsetSource::new(train_set, chosen.iter().map(|&p| pool_idx[p]).collect());

        let mut tc = train_cfg.clone();
        tc.seed = util::derive_seed(train_cfg.seed, m as u64);
        let (_, trained) =
            neuralnet::train_with_options(net_spec, None, None, &learner_train, val_set, &tc);
        let learner = match trained {
            Ok(model) => model,
            Err(Error::TrainingDiverged(_)) => {
                // Keep the untrained initialization as a weight-0 placeholder.
                let init_seed = util::derive_seed(tc.seed, 0);
                learners.push(ClassifierModel::new(net_spec.clone(), init_seed)?);
                weights.push(0.0);
                skipped.push((m, SkipReason::Diverged));
                votes_fit.push(Vec::new());
                votes_pool.push(Vec::new());
                fit_errors.push(current_err);
                continue;
            }
            Err(e) => return Err(e),
        };

        // Stagewise line search over the weight grid (first minimum wins).
        let learner_votes_fit = neuralnet::predict(&learner, &fit_view)?;
        let mut best: Option<(f64, f64)> = None; // (error, weight)
        for &c in &cfg.weight_grid {
            if c == 0.0 {
                continue;
            }
            let mut trial_weights = weights.clone();
            trial_weights.push(c);
            let mut trial_votes: Vec<Vec<u8>> = votes_fit.clone();
            trial_votes.push(learner_votes_fit.clone());
            let err = error_from_votes(&trial_weights, &trial_votes, &fit_labels, n_classes);
            if best.map_or(true, |(e, _)| err < e) {
                best = Some((err, c));
            }
        }
        let (best_err, best_c) = best.expect("validated grid has a positive entry");

        if !weights.is_empty() && best_err > current_err + GREEDY_TOLERANCE {
            learners.push(learner);
            weights.push(0.0);
            skipped.push((m, SkipReason::GreedyRejected));
            votes_fit.push(Vec::new());
            votes_pool.push(Vec::new());
            fit_errors.push(current_err);
            continue;
        }

        votes_pool.push(neuralnet::predict(&learner, &pool_view)?);
        votes_fit.push(learner_votes_fit);
        learners.push(learner);
        weights.push(best_c);
        current_err = best_err;
        fit_errors.push(current_err);

        misclassified = {
            let preds_err = |i: usize| {
                let votes: Vec<u8> = votes_pool
                    .iter()
                    .zip(&weights)
                    .filter(|(v, &w)| w > 0.0 && !v.is_empty())
                    .map(|(v, _)| v[i])
                    .collect();
                let w: Vec<f64> = weights.iter().cloned().filter(|&w| w > 0.0).collect();
                weighted_vote(&w, &votes, n_classes).0 != pool_labels[i]
            };
            (0..pool_view.len()).filter(|&i| preds_err(i)).collect()
        };
    }

    if weights.iter().all(|&w| w == 0.0) {
        return Err(Error::EnsembleFailed(
            "every weak learner was skipped".into(),
        ));
    }
    Ok(EnsembleModel { learners, weights, skipped, fit_errors })
}

// --- serialization ---------------------------------------------------------------

const MAGIC: &[u8; 4] = b"BSEN";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    schema: String,
    weights: Vec<f64>,
    skipped: Vec<(usize, SkipReason)>,
    fit_errors: Vec<f64>,
}

/// Container checkpoint: JSON manifest plus each learner's model blob.
pub fn write_ensemble(path: &Path, ens: &EnsembleModel) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    util::write_u32(&mut w, VERSION)?;
    let manifest = Manifest {
        schema: format!("bsen/{VERSION}"),
        weights: ens.weights.clone(),
        skipped: ens.skipped.clone(),
        fit_errors: ens.fit_errors.clone(),
    };
    let manifest_json = serde_json::to_vec(&manifest)?;
    util::write_u64(&mut w, manifest_json.len() as u64)?;
    w.write_all(&manifest_json)?;
    util::write_u32(&mut w, ens.learners.len() as u32)?;
    for learner in &ens.learners {
        let mut blob = Vec::new();
        neuralnet::write_model_to(&mut blob, learner)?;
        util::write_u64(&mut w, blob.len() as u64)?;
        w.write_all(&blob)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_ensemble(path: &Path) -> Result<EnsembleModel> {
    let mut r = BufReader::new(File::open(path)?);
    util::expect_magic(&mut r, MAGIC, "ensemble checkpoint")?;
    util::expect_version(&mut r, VERSION, "ensemble checkpoint")?;
    let mlen = util::read_u64(&mut r)? as usize;
    let mut mbuf = vec![0u8; mlen];
    r.read_exact(&mut mbuf)?;
    let manifest: Manifest = serde_json::from_slice(&mbuf)?;
    let count = util::read_u32(&mut r)? as usize;
    if count != manifest.weights.len() {
        return Err(Error::Mismatch(
            "ensemble manifest disagrees with learner count".into(),
        ));
    }
    let mut learners = Vec::with_capacity(count);
    for _ in 0..count {
        let blen = util::read_u64(&mut r)? as usize;
        let mut blob = vec![0u8; blen];
        r.read_exact(&mut blob)?;
        learners.push(neuralnet::read_model_from(&mut std::io::Cursor::new(blob))?);
    }
    Ok(EnsembleModel {
        learners,
        weights: manifest.weights,
        skipped: manifest.skipped,
        fit_errors: manifest.fit_errors,
    })
}
