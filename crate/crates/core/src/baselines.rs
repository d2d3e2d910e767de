//! Reference classifiers for the comparative study: k-nearest neighbors,
//! a linear one-vs-rest SVM, and a small MLP. All three consume flat
//! feature vectors directly, with no image expansion.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::neuralnet::{self, Optimizer, OptimizerKind};
use crate::util;

/// Flat design matrix and label vector of a dataset, in sample order.
pub fn design_matrix(ds: &Dataset) -> (Vec<Vec<f64>>, Vec<u8>) {
    let features = ds.samples.iter().map(|s| s.features.clone()).collect();
    let labels = ds.samples.iter().map(|s| s.label).collect();
    (features, labels)
}

fn check_matrix(features: &[Vec<f64>], labels: &[u8], class_count: usize) -> Result<usize> {
    if features.is_empty() {
        return Err(Error::invalid("training data must be nonempty"));
    }
    if features.len() != labels.len() {
        return Err(Error::invalid("feature and label counts differ"));
    }
    if class_count < 2 {
        return Err(Error::invalid("need at least two classes"));
    }
    let dim = features[0].len();
    if dim == 0 || features.iter().any(|f| f.len() != dim) {
        return Err(Error::invalid("feature rows must be nonempty and equal-length"));
    }
    if labels.iter().any(|&l| (l as usize) >= class_count) {
        return Err(Error::invalid("label outside class range"));
    }
    Ok(dim)
}

// --- k-nearest neighbors ------------------------------------------------------

#[derive(Debug, Clone)]
pub struct KnnModel {
    pub k: usize,
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
    pub class_count: usize,
}

pub fn knn_fit(
    features: Vec<Vec<f64>>,
    labels: Vec<u8>,
    class_count: usize,
    k: usize,
) -> Result<KnnModel> {
    check_matrix(&features, &labels, class_count)?;
    if k == 0 || k > features.len() {
        return Err(Error::invalid(format!(
            "k must lie in [1, {}], got {k}",
            features.len()
        )));
    }
    Ok(KnnModel { k, features, labels, class_count })
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Vote counts per class among the `k` nearest training points by Euclidean
/// distance. Distance ties resolve toward the lower training index.
pub fn knn_class_votes(model: &KnnModel, sample: &[f64]) -> Vec<usize> {
    let mut ranked: Vec<(f64, usize)> = model
        .features
        .iter()
        .enumerate()
        .map(|(i, f)| (squared_distance(sample, f), i))
        .collect();
    let k = model.k;
    ranked.select_nth_unstable_by(k - 1, |a, b| {
        a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
    });
    let mut votes = vec![0usize; model.class_count];
    for &(_, i) in &ranked[..k] {
        votes[model.labels[i] as usize] += 1;
    }
    votes
}

/// Majority label among the `k` nearest training points; vote ties resolve
/// toward the lower class.
pub fn knn_predict(model: &KnnModel, sample: &[f64]) -> u8 {
    let votes = knn_class_votes(model, sample);
    let mut best = 0usize;
    for (c, &v) in votes.iter().enumerate().skip(1) {
        if v > votes[best] {
            best = c;
        }
    }
    best as u8
}

pub fn knn_predict_batch(model: &KnnModel, samples: &[Vec<f64>]) -> Vec<u8> {
    samples.iter().map(|s| knn_predict(model, s)).collect()
}

// --- linear one-vs-rest SVM ---------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SvmConfig {
    /// Coefficient of the `lambda * |w|^2` regularizer.
    pub lambda: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub initial_lr: f64,
    pub seed: u64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        SvmConfig { lambda: 1e-3, epochs: 100, minibatch: 32, initial_lr: 0.1, seed: 0 }
    }
}

impl SvmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::invalid("lambda must be finite and nonnegative"));
        }
        if self.epochs == 0 || self.minibatch == 0 {
            return Err(Error::invalid("epochs and minibatch must be positive"));
        }
        if !(self.initial_lr.is_finite() && self.initial_lr > 0.0) {
            return Err(Error::invalid("initial_lr must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearSvmModel {
    /// One weight vector per class, each of feature dimensionality.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
    pub lambda: f64,
    pub feature_count: usize,
    pub class_count: usize,
}

/// Per-class decision values `w_c . x + b_c`.
pub fn svm_decision_values(model: &LinearSvmModel, sample: &[f64]) -> Vec<f64> {
    model
        .weights
        .iter()
        .zip(&model.biases)
        .map(|(w, &b)| w.iter().zip(sample).map(|(wi, xi)| wi * xi).sum::<f64>() + b)
        .collect()
}

pub fn svm_predict(model: &LinearSvmModel, sample: &[f64]) -> u8 {
    neuralnet::argmax(&svm_decision_values(model, sample)) as u8
}

pub fn svm_predict_batch(model: &LinearSvmModel, samples: &[Vec<f64>]) -> Vec<u8> {
    samples.iter().map(|s| svm_predict(model, s)).collect()
}

/// One-vs-rest hinge loss with an `lambda * |w|^2` penalty, minimized by
/// minibatch subgradient descent (shuffled per epoch, deterministic given
/// the seed). The decay `lr_t = lr0 / (1 + lambda * lr0 * t)` is the usual
/// regularized-SGD schedule.
pub fn svm_train(
    features: &[Vec<f64>],
    labels: &[u8],
    class_count: usize,
    cfg: &SvmConfig,
) -> Result<LinearSvmModel> {
    cfg.validate()?;
    let dim = check_matrix(features, labels, class_count)?;
    if features.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("features must be finite"));
    }

    let mut weights = vec![vec![0.0; dim]; class_count];
    let mut biases = vec![0.0; class_count];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..features.len()).collect();
    let mut step = 0u64;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.minibatch) {
            step += 1;
            let lr = cfg.initial_lr / (1.0 + cfg.lambda * cfg.initial_lr * step as f64);
            let scale = lr / batch.len() as f64;
            for c in 0..class_count {
                let (w, b) = (&mut weights[c], &mut biases[c]);
                // Shrink from the regularizer, then add margin violators.
                let shrink = 1.0 - 2.0 * lr * cfg.lambda;
                for wi in w.iter_mut() {
                    *wi *= shrink;
                }
                for &i in batch {
                    let x = &features[i];
                    let y = if labels[i] as usize == c { 1.0 } else { -1.0 };
                    let margin =
                        y * (w.iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>() + *b);
                    if margin < 1.0 {
                        for (wi, xi) in w.iter_mut().zip(x) {
                            *wi += scale * y * xi;
                        }
                        *b += scale * y;
                    }
                }
            }
        }
    }
    Ok(LinearSvmModel {
        weights,
        biases,
        lambda: cfg.lambda,
        feature_count: dim,
        class_count,
    })
}

// --- multilayer perceptron ------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpConfig {
    /// Hidden-layer widths, input to output.
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub minibatch: usize,
    pub initial_lr: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            hidden: vec![64, 32],
            epochs: 30,
            minibatch: 64,
            initial_lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            seed: 0,
        }
    }
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::invalid("hidden widths must be nonempty and positive"));
        }
        if self.epochs == 0 || self.minibatch == 0 {
            return Err(Error::invalid("epochs and minibatch must be positive"));
        }
        if !(self.initial_lr.is_finite() && self.initial_lr > 0.0) {
            return Err(Error::invalid("initial_lr must be positive"));
        }
        Ok(())
    }
}

/// Fully connected ReLU network with a softmax head, sharing its class
/// count with the convolutional classifier.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpModel {
    /// Layer widths including input and output: `[d, hidden..., K]`.
    pub widths: Vec<usize>,
    /// Flat parameters, `[W1 | b1 | W2 | b2 | ...]` with row-major weights.
    pub params: Vec<f64>,
}

impl MlpModel {
    pub fn feature_count(&self) -> usize {
        self.widths[0]
    }
    pub fn class_count(&self) -> usize {
        *self.widths.last().unwrap()
    }
    fn param_count(widths: &[usize]) -> usize {
        widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

/// He-uniform weights, zero biases, one seeded stream in layout order.
fn mlp_init(widths: &[usize], seed: u64) -> Vec<f64> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::with_capacity(MlpModel::param_count(widths));
    for w in widths.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let limit = (6.0 / fan_in as f64).sqrt();
        for _ in 0..fan_in * fan_out {
            params.push(rng.random_range(-limit..limit));
        }
        params.extend(std::iter::repeat_n(0.0, fan_out));
    }
    params
}

/// Forward pass; fills per-layer pre-activations and returns the class
/// probabilities in `probs`.
fn mlp_forward(model: &MlpModel, x: &[f64], pre: &mut [Vec<f64>], probs: &mut [f64]) {
    let mut offset = 0;
    let n_layers = model.widths.len() - 1;
    for l in 0..n_layers {
        let (fan_in, fan_out) = (model.widths[l], model.widths[l + 1]);
        let w = &model.params[offset..offset + fan_in * fan_out];
        let b = &model.params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
        offset += fan_in * fan_out + fan_out;
        let (done, rest) = pre.split_at_mut(l);
        let input: &[f64] = if l == 0 { x } else { &done[l - 1] };
        let out = &mut rest[0];
        for (j, o) in out.iter_mut().enumerate() {
            let row = &w[j * fan_in..(j + 1) * fan_in];
            *o = row.iter().zip(input).map(|(wi, xi)| wi * xi).sum::<f64>() + b[j];
        }
        if l + 1 < n_layers {
            // Hidden ReLU applied in place; the buffer doubles as the next
            // layer's input. NaN must pass through, not clamp to zero.
            for v in out.iter_mut() {
                if !(*v > 0.0 || v.is_nan()) {
                    *v = 0.0;
                }
            }
        }
    }
    neuralnet::softmax_into(&pre[n_layers - 1], probs);
}

/// Backpropagation for one sample; accumulates into `grads`.
fn mlp_backward(
    model: &MlpModel,
    x: &[f64],
    label: u8,
    pre: &[Vec<f64>],
    probs: &[f64],
    grads: &mut [f64],
    deltas: &mut [Vec<f64>],
) {
    let n_layers = model.widths.len() - 1;
    for (j, d) in deltas[n_layers - 1].iter_mut().enumerate() {
        *d = probs[j] - if j == label as usize { 1.0 } else { 0.0 };
    }
    // Layer offsets, innermost first when walking backwards.
    let mut offsets = Vec::with_capacity(n_layers);
    let mut offset = 0;
    for l in 0..n_layers {
        offsets.push(offset);
        offset += model.widths[l] * model.widths[l + 1] + model.widths[l + 1];
    }
    for l in (0..n_layers).rev() {
        let (fan_in, fan_out) = (model.widths[l], model.widths[l + 1]);
        let off = offsets[l];
        let input: &[f64] = if l == 0 { x } else { &pre[l - 1] };
        for j in 0..fan_out {
            let g = deltas[l][j];
            let wrow = &mut grads[off + j * fan_in..off + (j + 1) * fan_in];
            for (gw, &xi) in wrow.iter_mut().zip(input) {
                *gw += g * xi;
            }
            grads[off + fan_in * fan_out + j] += g;
        }
        if l > 0 {
            let w = &model.params[off..off + fan_in * fan_out];
            let (lower, upper) = deltas.split_at_mut(l);
            let d_out = &upper[0];
            let d_in = &mut lower[l - 1];
            for (i, di) in d_in.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (j, dj) in d_out.iter().enumerate() {
                    acc += w[j * fan_in + i] * dj;
                }
                // ReLU gate at the hidden pre-activation (stored activated;
                // activation > 0 iff pre-activation > 0 for ReLU).
                *di = if pre[l - 1][i] > 0.0 { acc } else { 0.0 };
            }
        }
    }
}

pub fn mlp_train(
    features: &[Vec<f64>],
    labels: &[u8],
    class_count: usize,
    cfg: &MlpConfig,
) -> Result<MlpModel> {
    cfg.validate()?;
    let dim = check_matrix(features, labels, class_count)?;
    let mut widths = vec![dim];
    widths.extend_from_slice(&cfg.hidden);
    widths.push(class_count);
    let params = mlp_init(&widths, util::derive_seed(cfg.seed, 0));
    let mut model = MlpModel { widths: widths.clone(), params };

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(util::derive_seed(cfg.seed, 1));
    let mut order: Vec<usize> = (0..features.len()).collect();
    let total = model.params.len();
    let mut optimizer = Optimizer::new(cfg.optimizer, total);
    let mut grads = vec![0.0; total];
    let mut pre: Vec<Vec<f64>> = widths[1..].iter().map(|&w| vec![0.0; w]).collect();
    let mut deltas = pre.clone();
    let mut probs = vec![0.0; class_count];

    for _ in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for batch in order.chunks(cfg.minibatch) {
            grads.iter_mut().for_each(|g| *g = 0.0);
            for &i in batch {
                mlp_forward(&model, &features[i], &mut pre, &mut probs);
                let p = probs[labels[i] as usize];
                if !neuralnet::ce_term(p).is_finite() {
                    return Err(Error::TrainingDiverged(
                        "mlp loss became non-finite".into(),
                    ));
                }
                mlp_backward(
                    &model,
                    &features[i],
                    labels[i],
                    &pre,
                    &probs,
                    &mut grads,
                    &mut deltas,
                );
            }
            let inv = 1.0 / batch.len() as f64;
            grads.iter_mut().for_each(|g| *g *= inv);
            optimizer.step(&mut model.params, &grads, cfg.initial_lr);
        }
    }
    if model.params.iter().any(|p| !p.is_finite()) {
        return Err(Error::TrainingDiverged("mlp parameters became non-finite".into()));
    }
    Ok(model)
}

/// Class probabilities for one sample.
pub fn mlp_probs(model: &MlpModel, sample: &[f64]) -> Vec<f64> {
    let mut pre: Vec<Vec<f64>> = model.widths[1..].iter().map(|&w| vec![0.0; w]).collect();
    let mut probs = vec![0.0; model.class_count()];
    mlp_forward(model, sample, &mut pre, &mut probs);
    probs
}

pub fn mlp_predict(model: &MlpModel, sample: &[f64]) -> u8 {
    neuralnet::argmax(&mlp_probs(model, sample)) as u8
}

pub fn mlp_predict_batch(model: &MlpModel, samples: &[Vec<f64>]) -> Vec<u8> {
    let mut pre: Vec<Vec<f64>> = model.widths[1..].iter().map(|&w| vec![0.0; w]).collect();
    let mut probs = vec![0.0; model.class_count()];
    samples
        .iter()
        .map(|s| {
            mlp_forward(model, s, &mut pre, &mut probs);
            neuralnet::argmax(&probs) as u8
        })
        .collect()
}

/// 0-1 accuracy of any predictor against reference labels.
pub fn accuracy(predictions: &[u8], labels: &[u8]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

/// Mean per-class recall over the classes present in `labels`; immune to
/// class imbalance, unlike plain accuracy.
pub fn balanced_accuracy(predictions: &[u8], labels: &[u8], class_count: usize) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let mut totals = vec![0usize; class_count];
    let mut hits = vec![0usize; class_count];
    for (&p, &l) in predictions.iter().zip(labels) {
        totals[l as usize] += 1;
        if p == l {
            hits[l as usize] += 1;
        }
    }
    let mut sum = 0.0;
    let mut present = 0usize;
    for c in 0..class_count {
        if totals[c] > 0 {
            sum += hits[c] as f64 / totals[c] as f64;
            present += 1;
        }
    }
    sum / present as f64
}

// --- serialization --------------------------------------------------------------

const MAGIC: &[u8; 4] = b"BSBL";
const VERSION: u32 = 1;

const TAG_KNN: u8 = 1;
const TAG_SVM: u8 = 2;
const TAG_MLP: u8 = 3;

#[derive(Debug, Clone)]
pub enum BaselineModel {
    Knn(KnnModel),
    Svm(LinearSvmModel),
    Mlp(MlpModel),
}

/// Same container shape as the network checkpoints — magic, version, and a
/// type tag followed by a JSON header and the raw numbers.
pub fn write_baseline(path: &Path, model: &BaselineModel) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    util::write_u32(&mut w, VERSION)?;
    match model {
        BaselineModel::Knn(m) => {
            w.write_all(&[TAG_KNN])?;
            let header = serde_json::to_vec(&serde_json::json!({
                "k": m.k,
                "class_count": m.class_count,
                "feature_count": m.features[0].len(),
                "n": m.features.len(),
            }))?;
            util::write_u64(&mut w, header.len() as u64)?;
            w.write_all(&header)?;
            w.write_all(&m.labels)?;
            for row in &m.features {
                for &v in row {
                    util::write_f64(&mut w, v)?;
                }
            }
        }
        BaselineModel::Svm(m) => {
            w.write_all(&[TAG_SVM])?;
            let header = serde_json::to_vec(m)?;
            util::write_u64(&mut w, header.len() as u64)?;
            w.write_all(&header)?;
        }
        BaselineModel::Mlp(m) => {
            w.write_all(&[TAG_MLP])?;
            let header = serde_json::to_vec(&m.widths)?;
            util::write_u64(&mut w, header.len() as u64)?;
            w.write_all(&header)?;
            for &v in &m.params {
                util::write_f64(&mut w, v)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_baseline(path: &Path) -> Result<BaselineModel> {
    let mut r = BufReader::new(File::open(path)?);
    util::expect_magic(&mut r, MAGIC, "baseline checkpoint")?;
    util::expect_version(&mut r, VERSION, "baseline checkpoint")?;
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag)?;
    let hlen = util::read_u64(&mut r)? as usize;
    let mut hbuf = vec![0u8; hlen];
    r.read_exact(&mut hbuf)?;
    match tag[0] {
        TAG_KNN => {
            let header: serde_json::Value = serde_json::from_slice(&hbuf)?;
            let get = |key: &str| -> Result<usize> {
                header[key]
                    .as_u64()
                    .map(|v| v as usize)
                    .ok_or_else(|| Error::Format(format!("knn header missing {key}")))
            };
            let (k, class_count, dim, n) =
                (get("k")?, get("class_count")?, get("feature_count")?, get("n")?);
            let mut labels = vec![0u8; n];
            r.read_exact(&mut labels)?;
            let mut features = Vec::with_capacity(n);
            for _ in 0..n {
                let mut row = Vec::with_capacity(dim);
                for _ in 0..dim {
                    row.push(util::read_f64(&mut r)?);
                }
                features.push(row);
            }
            Ok(BaselineModel::Knn(knn_fit(features, labels, class_count, k)?))
        }
        TAG_SVM => Ok(BaselineModel::Svm(serde_json::from_slice(&hbuf)?)),
        TAG_MLP => {
            let widths: Vec<usize> = serde_json::from_slice(&hbuf)?;
            if widths.len() < 2 {
                return Err(Error::Format("mlp header needs at least two widths".into()));
            }
            let total = MlpModel::param_count(&widths);
            let mut params = Vec::with_capacity(total);
            for _ in 0..total {
                params.push(util::read_f64(&mut r)?);
            }
            Ok(BaselineModel::Mlp(MlpModel { widths, params }))
        }
        t => Err(Error::Format(format!("unknown baseline tag {t}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Two Gaussian blobs separated along a random direction.
    fn separable_blobs(n: usize, dim: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<u8>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dir: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
        let mut features = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = (i % 2) as u8;
            let sign = if class == 0 { -1.0 } else { 1.0 };
            let row: Vec<f64> = dir
                .iter()
                .map(|&d| sign * 2.0 * d / norm + rng.random_range(-0.3..0.3))
                .collect();
            features.push(row);
            labels.push(class);
        }
        (features, labels)
    }

    #[test]
    fn knn_exact_match_wins_at_k1() {
        let features = vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![2.0, 0.5]];
        let labels = vec![2, 0, 1];
        let model = knn_fit(features.clone(), labels, 3, 1).unwrap();
        for (f, want) in features.iter().zip([2u8, 0, 1]) {
            assert_eq!(knn_predict(&model, f), want);
        }
    }

    #[test]
    fn knn_majority_among_three() {
        // Neighbors at distances 1, 2, 3 labeled {1, 1, 2}; a fourth point
        // far away cannot enter the vote.
        let features = vec![
            vec![1.0, 0.0],
            vec![2.0, 0.0],
            vec![3.0, 0.0],
            vec![100.0, 0.0],
        ];
        let labels = vec![1, 1, 2, 0];
        let model = knn_fit(features, labels, 3, 3).unwrap();
        assert_eq!(knn_predict(&model, &[0.0, 0.0]), 1);
    }

    #[test]
    fn knn_distance_tie_takes_lower_training_index() {
        // Both points sit at distance 1 from the query; only one fits in
        // the k = 1 neighborhood, so index order decides.
        let features = vec![vec![1.0, 0.0], vec![-1.0, 0.0]];
        let labels = vec![1, 0];
        let model = knn_fit(features, labels, 2, 1).unwrap();
        assert_eq!(knn_predict(&model, &[0.0, 0.0]), 1);
    }

    #[test]
    fn knn_vote_tie_takes_lower_class() {
        let features = vec![vec![1.0], vec![-1.0]];
        let labels = vec![2, 1];
        let model = knn_fit(features, labels, 3, 2).unwrap();
        assert_eq!(knn_predict(&model, &[0.0]), 1);
    }

    #[test]
    fn knn_with_full_k_returns_global_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 40;
        let features: Vec<Vec<f64>> = (0..n)
            .map(|_| vec![rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)])
            .collect();
        // Class 2 holds a strict plurality.
        let labels: Vec<u8> = (0..n).map(|i| if i % 3 == 0 { 2 } else { (i % 2) as u8 }).collect();
        let mut counts = [0usize; 3];
        for &l in &labels {
            counts[l as usize] += 1;
        }
        let mode = (0..3).max_by_key(|&c| counts[c]).unwrap() as u8;
        let model = knn_fit(features, labels, 3, n).unwrap();
        for _ in 0..10 {
            let q = vec![rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
            assert_eq!(knn_predict(&model, &q), mode);
        }
    }

    #[test]
    fn knn_fit_rejects_bad_k() {
        let features = vec![vec![0.0], vec![1.0]];
        assert!(knn_fit(features.clone(), vec![0, 1], 2, 0).is_err());
        assert!(knn_fit(features.clone(), vec![0, 1], 2, 3).is_err());
        assert!(knn_fit(features, vec![0, 1], 2, 2).is_ok());
    }

    #[test]
    fn svm_separates_blobs() {
        let (features, labels) = separable_blobs(200, 6, 11);
        let model = svm_train(&features, &labels, 2, &SvmConfig::default()).unwrap();
        let acc = accuracy(&svm_predict_batch(&model, &features), &labels);
        assert!(acc >= 0.99, "training accuracy {acc}");
    }

    #[test]
    fn svm_argmax_invariant_under_shared_rescaling() {
        let (features, labels) = separable_blobs(60, 4, 13);
        let model = svm_train(&features, &labels, 2, &SvmConfig::default()).unwrap();
        let mut scaled = model.clone();
        for w in &mut scaled.weights {
            for v in w.iter_mut() {
                *v *= 37.5;
            }
        }
        for b in &mut scaled.biases {
            *b *= 37.5;
        }
        for f in &features {
            assert_eq!(svm_predict(&model, f), svm_predict(&scaled, f));
        }
    }

    #[test]
    fn svm_single_class_degenerate_is_forced() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let features: Vec<Vec<f64>> =
            (0..30).map(|_| vec![rng.random_range(-1.0..1.0); 3]).collect();
        let labels = vec![2u8; 30];
        let model = svm_train(&features, &labels, 4, &SvmConfig::default()).unwrap();
        for f in &features {
            assert_eq!(svm_predict(&model, f), 2);
        }
    }

    #[test]
    fn svm_training_is_deterministic() {
        let (features, labels) = separable_blobs(80, 5, 19);
        let cfg = SvmConfig { seed: 42, ..Default::default() };
        let a = svm_train(&features, &labels, 2, &cfg).unwrap();
        let b = svm_train(&features, &labels, 2, &cfg).unwrap();
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.biases, b.biases);
    }

    #[test]
    fn svm_rejects_invalid_inputs() {
        assert!(svm_train(&[], &[], 2, &SvmConfig::default()).is_err());
        let features = vec![vec![0.0], vec![1.0]];
        assert!(svm_train(&features, &[0], 2, &SvmConfig::default()).is_err());
        assert!(svm_train(&features, &[0, 5], 2, &SvmConfig::default()).is_err());
        assert!(svm_train(&features, &[0, 1], 1, &SvmConfig::default()).is_err());
        let nan = vec![vec![f64::NAN], vec![1.0]];
        assert!(svm_train(&nan, &[0, 1], 2, &SvmConfig::default()).is_err());
        let bad = SvmConfig { initial_lr: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let widths = vec![4, 5, 3];
        let params = mlp_init(&widths, 24);
        let model = MlpModel { widths: widths.clone(), params };
        let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let label = 1u8;
        let mut pre: Vec<Vec<f64>> = widths[1..].iter().map(|&w| vec![0.0; w]).collect();
        let mut deltas = pre.clone();
        let mut probs = vec![0.0; 3];
        mlp_forward(&model, &x, &mut pre, &mut probs);
        let mut grads = vec![0.0; model.params.len()];
        mlp_backward(&model, &x, label, &pre, &probs, &mut grads, &mut deltas);

        let loss_at = |params: &[f64]| {
            let m = MlpModel { widths: widths.clone(), params: params.to_vec() };
            let mut pre: Vec<Vec<f64>> = widths[1..].iter().map(|&w| vec![0.0; w]).collect();
            let mut probs = vec![0.0; 3];
            mlp_forward(&m, &x, &mut pre, &mut probs);
            -probs[label as usize].ln()
        };
        let h = 1e-5;
        for i in (0..model.params.len()).step_by(3) {
            let mut plus = model.params.clone();
            plus[i] += h;
            let mut minus = model.params.clone();
            minus[i] -= h;
            let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
            if grads[i].abs() < 1e-8 && fd.abs() < 1e-8 {
                continue;
            }
            let rel = (grads[i] - fd).abs() / grads[i].abs().max(fd.abs());
            assert!(rel < 1e-5, "param {i}: analytic {} vs fd {fd}", grads[i]);
        }
    }

    #[test]
    fn mlp_learns_separable_blobs() {
        let (features, labels) = separable_blobs(160, 6, 29);
        let cfg = MlpConfig { hidden: vec![16, 8], epochs: 40, seed: 30, ..Default::default() };
        let model = mlp_train(&features, &labels, 2, &cfg).unwrap();
        let acc = accuracy(&mlp_predict_batch(&model, &features), &labels);
        assert!(acc >= 0.95, "training accuracy {acc}");
    }

    #[test]
    fn mlp_class_count_matches_head() {
        let (features, labels) = separable_blobs(40, 3, 31);
        let cfg = MlpConfig { hidden: vec![8], epochs: 2, seed: 32, ..Default::default() };
        let model = mlp_train(&features, &labels, 5, &cfg).unwrap();
        assert_eq!(model.class_count(), 5);
        assert_eq!(model.feature_count(), 3);
        assert_eq!(model.widths, vec![3, 8, 5]);
    }

    #[test]
    fn mlp_divergence_is_reported() {
        let (mut features, labels) = separable_blobs(40, 3, 33);
        features[0][0] = f64::NAN;
        let cfg = MlpConfig { hidden: vec![8], epochs: 3, seed: 34, ..Default::default() };
        let res = mlp_train(&features, &labels, 2, &cfg);
        assert!(matches!(res, Err(Error::TrainingDiverged(_))));
    }

    #[test]
    fn mlp_training_is_deterministic() {
        let (features, labels) = separable_blobs(60, 4, 35);
        let cfg = MlpConfig { hidden: vec![8], epochs: 5, seed: 36, ..Default::default() };
        let a = mlp_train(&features, &labels, 2, &cfg).unwrap();
        let b = mlp_train(&features, &labels, 2, &cfg).unwrap();
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn baseline_checkpoints_roundtrip() {
        let (features, labels) = separable_blobs(50, 4, 37);
        let dir = tempfile::tempdir().unwrap();

        let knn = knn_fit(features.clone(), labels.clone(), 2, 5).unwrap();
        let p = dir.path().join("knn.bsbl");
        write_baseline(&p, &BaselineModel::Knn(knn.clone())).unwrap();
        let BaselineModel::Knn(knn2) = read_baseline(&p).unwrap() else {
            panic!("wrong tag")
        };
        assert_eq!(knn2.k, knn.k);
        assert_eq!(knn2.labels, knn.labels);
        assert_eq!(knn2.features, knn.features);

        let svm = svm_train(&features, &labels, 2, &SvmConfig::default()).unwrap();
        let p = dir.path().join("svm.bsbl");
        write_baseline(&p, &BaselineModel::Svm(svm.clone())).unwrap();
        let BaselineModel::Svm(svm2) = read_baseline(&p).unwrap() else {
            panic!("wrong tag")
        };
        assert_eq!(svm2.weights, svm.weights);
        assert_eq!(svm2.biases, svm.biases);

        let cfg = MlpConfig { hidden: vec![8], epochs: 2, seed: 38, ..Default::default() };
        let mlp = mlp_train(&features, &labels, 2, &cfg).unwrap();
        let p = dir.path().join("mlp.bsbl");
        write_baseline(&p, &BaselineModel::Mlp(mlp.clone())).unwrap();
        let BaselineModel::Mlp(mlp2) = read_baseline(&p).unwrap() else {
            panic!("wrong tag")
        };
        assert_eq!(mlp2.widths, mlp.widths);
        assert_eq!(mlp2.params, mlp.params);
        assert_eq!(
            mlp_predict_batch(&mlp2, &features),
            mlp_predict_batch(&mlp, &features)
        );
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.bsbl");
        std::fs::write(&p, b"NOPE____________").unwrap();
        assert!(read_baseline(&p).is_err());
    }

    #[test]
    fn knn_votes_sum_to_k_and_agree_with_predict() {
        let (features, labels) = separable_blobs(30, 3, 39);
        let model = knn_fit(features.clone(), labels, 2, 7).unwrap();
        for f in &features {
            let votes = knn_class_votes(&model, f);
            assert_eq!(votes.iter().sum::<usize>(), 7);
            let pred = knn_predict(&model, f) as usize;
            assert!(votes.iter().all(|&v| v <= votes[pred]));
        }
    }

    #[test]
    fn mlp_probs_form_a_distribution() {
        let (features, labels) = separable_blobs(40, 4, 45);
        let cfg = MlpConfig { hidden: vec![6], epochs: 3, seed: 46, ..Default::default() };
        let model = mlp_train(&features, &labels, 3, &cfg).unwrap();
        for f in features.iter().take(10) {
            let p = mlp_probs(&model, f);
            assert_eq!(p.len(), 3);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(p.iter().all(|&v| v >= 0.0));
            assert_eq!(neuralnet::argmax(&p) as u8, mlp_predict(&model, f));
        }
    }

    #[test]
    fn balanced_accuracy_averages_per_class_recall() {
        // Class 0: 3 of 4 right; class 1: 1 of 2 right; class 2 absent.
        let labels = vec![0, 0, 0, 0, 1, 1];
        let preds = vec![0, 0, 0, 1, 1, 0];
        let got = balanced_accuracy(&preds, &labels, 3);
        assert!((got - (0.75 + 0.5) / 2.0).abs() < 1e-12);
        // Plain accuracy weights by count instead.
        assert!((accuracy(&preds, &labels) - 4.0 / 6.0).abs() < 1e-12);
    }
}
