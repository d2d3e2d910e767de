//! Acceptance suite: one test per release gate, each with an explicit
//! runtime budget. The numbered prefixes keep the report order stable and
//! make the one-line pass/fail output easy to scan.
//!
//! The heavyweight desk-scale dataset (1000 realizations, both learning
//! gates) is built once and shared through a `OnceLock`.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use beamselect::baselines::{accuracy, balanced_accuracy};
use beamselect::beam_select::{
    greedy_energy_select, oracle_select, selection_spectral_efficiency, zf_benchmark,
    BeamSelection, SelectionConfig,
};
use beamselect::channel::{generate_batch, ChannelConfig};
use beamselect::dataset::gmm::fit_gmm;
use beamselect::dataset::image::bicubic_resize;
use beamselect::dataset::{
    build_datasets_both, split_dataset, Dataset, DatasetOptions, EmbedKind, ImageTensor,
};
use beamselect::ensemble::{predict_batch, train_ensemble, EnsembleConfig};
use beamselect::harness::{cmd_evaluate, cmd_gen_data, cmd_report, cmd_train, Strategy};
use beamselect::neuralnet::{
    backward, predict, swish, train, ActivationKind, ClassifierModel, DatasetImages, ImageSource,
    InceptionSpec, NetworkSpec, OptimizerKind, TrainConfig,
};

fn assert_budget(t0: Instant, budget_s: u64, what: &str) {
    let elapsed = t0.elapsed();
    assert!(
        elapsed.as_secs() < budget_s,
        "{what} took {elapsed:?}, budget {budget_s}s"
    );
}

// --- 1: activation unit checks ---------------------------------------------------

#[test]
fn a01_swish_unit_suite() {
    let t0 = Instant::now();

    assert_eq!(swish(0.0), 0.0);
    // sigmoid(1) = e/(1+e), evaluated independently to 18 digits.
    let swish_at_one = 0.731_058_578_630_004_879;
    assert!((swish(1.0) - swish_at_one).abs() < 1e-9, "swish(1) = {}", swish(1.0));

    // Central finite differences across [-20, 20]. Relative error, so both
    // the near-linear positive tail and the tiny negative tail are held to
    // the same standard.
    let act = ActivationKind::Swish;
    let h = 1e-5;
    let mut x = -20.0f64;
    while x <= 20.0 {
        let fd = (act.apply(x + h) - act.apply(x - h)) / (2.0 * h);
        let grad = act.grad(x);
        let rel = (fd - grad).abs() / grad.abs().max(1e-300);
        assert!(rel < 1e-6, "swish grad at {x}: analytic {grad}, fd {fd}, rel {rel}");
        x += 0.25;
    }

    assert_budget(t0, 1, "swish unit suite");
}

// --- 2: beamspace transform -----------------------------------------------------

#[test]
fn a02_beamspace_preserves_frobenius_norm() {
    let t0 = Instant::now();

    let cfg = ChannelConfig::desk(64, 16, 3);
    let batch = generate_batch(&cfg, 100).unwrap();
    for (i, r) in batch.iter().enumerate() {
        let spatial = r.spatial.norm();
        let beam = r.beamspace.norm();
        let rel = (spatial - beam).abs() / spatial;
        assert!(rel < 1e-10, "realization {i}: |H|={spatial} |Hb|={beam} rel {rel}");
    }

    assert_budget(t0, 5, "beamspace unitarity");
}

// --- 3: oracle vs exhaustive enumeration -----------------------------------------

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, k, &mut Vec::with_capacity(k), &mut out);
    out
}

#[test]
fn a03_oracle_matches_exhaustive_enumeration() {
    let t0 = Instant::now();

    let ch = ChannelConfig::desk(8, 4, 5);
    let sel_cfg = SelectionConfig::symmetric(2);
    let batch = generate_batch(&ch, 50).unwrap();
    let tx_combos = combinations(8, 2);
    let rx_combos = combinations(4, 2);
    assert_eq!(tx_combos.len() * rx_combos.len(), 28 * 6);

    for (i, r) in batch.iter().enumerate() {
        let (sel, se) = oracle_select(&r.beamspace, &sel_cfg).unwrap();

        // Reference search: same lexicographic order, same strict-improvement
        // rule, but driven through the public per-selection SE evaluator.
        let mut best_se = f64::NEG_INFINITY;
        let mut best: Option<&(Vec<usize>, Vec<usize>)> = None;
        let mut pairs = Vec::new();
        for tx in &tx_combos {
            for rx in &rx_combos {
                pairs.push((tx.clone(), rx.clone()));
            }
        }
        for pair in &pairs {
            let cand = BeamSelection::new(pair.0.clone(), pair.1.clone());
            let cand_se = selection_spectral_efficiency(
                &r.beamspace,
                &cand,
                sel_cfg.n_streams,
                sel_cfg.oracle_snr_db,
            )
            .unwrap();
            if cand_se > best_se {
                best_se = cand_se;
                best = Some(pair);
            }
        }
        let best = best.unwrap();

        assert_eq!(sel.tx_beams, best.0, "instance {i}: tx tuple diverged");
        assert_eq!(sel.rx_beams, best.1, "instance {i}: rx tuple diverged");
        assert!(
            (se - best_se).abs() <= 1e-12,
            "instance {i}: oracle SE {se} vs exhaustive {best_se}"
        );
    }

    assert_budget(t0, 30, "oracle equivalence");
}

// --- 4: dominance and monotonicity ------------------------------------------------

#[test]
fn a04_selection_dominance_and_monotonicity() {
    let t0 = Instant::now();

    let ch = ChannelConfig::desk(16, 8, 2);
    let sel_cfg = SelectionConfig::default();
    let ns = sel_cfg.n_streams;
    let batch = generate_batch(&ch, 100).unwrap();
    let snr_grid = [0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0];

    let mut oracle_sum = 0.0;
    let mut zf_sum = 0.0;
    for (i, r) in batch.iter().enumerate() {
        let (osel, _) = oracle_select(&r.beamspace, &sel_cfg).unwrap();
        let gsel = greedy_energy_select(&r.beamspace, &sel_cfg).unwrap();
        let ose =
            selection_spectral_efficiency(&r.beamspace, &osel, ns, sel_cfg.oracle_snr_db).unwrap();
        let gse =
            selection_spectral_efficiency(&r.beamspace, &gsel, ns, sel_cfg.oracle_snr_db).unwrap();
        assert!(gse <= ose, "realization {i}: greedy {gse} above oracle {ose}");

        for sel in [&osel, &gsel] {
            let mut prev = f64::NEG_INFINITY;
            for &snr in &snr_grid {
                let se = selection_spectral_efficiency(&r.beamspace, sel, ns, snr).unwrap();
                assert!(se >= prev, "realization {i}: SE fell from {prev} to {se} at {snr} dB");
                prev = se;
            }
        }

        oracle_sum += ose;
        zf_sum += zf_benchmark(&r.beamspace, sel_cfg.oracle_snr_db, ns).unwrap();
    }
    let n = batch.len() as f64;
    assert!(
        zf_sum / n >= oracle_sum / n,
        "mean ZF {} below mean oracle {}",
        zf_sum / n,
        oracle_sum / n
    );

    assert_budget(t0, 30, "dominance and monotonicity");
}

// --- 5: backprop gradient check ---------------------------------------------------

#[test]
fn a05_backprop_matches_finite_differences() {
    let t0 = Instant::now();

    let spec = NetworkSpec {
        input_side: 8,
        input_channels: 3,
        stem_width: 3,
        inception_blocks: vec![
            InceptionSpec { b1: 2, b3: 3, b5: 2, pool_proj: 2 },
            InceptionSpec { b1: 2, b3: 3, b5: 2, pool_proj: 2 },
        ],
        dropout_rate: 0.3,
        n_classes: 4,
        activation: ActivationKind::Swish,
    };
    let model = ClassifierModel::new(spec.clone(), 17).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let batch: Vec<ImageTensor> = (0..3)
        .map(|i| {
            let s = spec.input_side;
            let mut data = vec![0.0; 3 * s * s];
            for v in &mut data {
                *v = rng.random_range(-1.0..1.0);
            }
            ImageTensor { height: s, width: s, data, source_sample_id: i }
        })
        .collect();
    let labels = [0u8, 2, 3];

    let (_, grads) = backward(&model, &batch, &labels).unwrap();
    let loss_at = |params: &[f64]| -> f64 {
        let m = ClassifierModel {
            spec: spec.clone(),
            params: params.to_vec(),
            training_log: Default::default(),
        };
        backward(&m, &batch, &labels).unwrap().0
    };

    let h = 1e-5;
    let mut checked = 0usize;
    while checked < 200 {
        let i = rng.random_range(0..model.params.len());
        let mut hi = model.params.clone();
        let mut lo = model.params.clone();
        hi[i] += h;
        lo[i] -= h;
        let fd = (loss_at(&hi) - loss_at(&lo)) / (2.0 * h);
        // A coordinate whose gradient vanishes (dead branch for this batch)
        // has no meaningful relative error; pick another.
        if fd.abs().max(grads[i].abs()) < 1e-8 {
            continue;
        }
        let rel = (fd - grads[i]).abs() / fd.abs().max(grads[i].abs());
        assert!(rel < 1e-4, "param {i}: fd {fd} vs analytic {} (rel {rel})", grads[i]);
        checked += 1;
    }

    assert_budget(t0, 60, "gradient check");
}

// --- 6: EM fitting ----------------------------------------------------------------

#[test]
fn a06_em_loglikelihood_and_recovery() {
    let t0 = Instant::now();

    // Log-likelihood must never decrease, on arbitrary point clouds.
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for fit in 0..20 {
        let k = 1 + fit % 3;
        let n = 30 + 5 * (fit % 4);
        let pts: Vec<[f64; 3]> = (0..n)
            .map(|_| {
                [
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(0.0..4.0),
                ]
            })
            .collect();
        let model = fit_gmm(&pts, k, 0.0, 60).unwrap();
        for (step, w) in model.ll_trace.windows(2).enumerate() {
            assert!(
                w[1] >= w[0] - 1e-9,
                "fit {fit}: log-likelihood fell {} -> {} at step {step}",
                w[0],
                w[1]
            );
        }
    }

    // Well-separated two-component mixture: recover means and weights.
    let truth = [[-2.0, -1.5, -2.5], [2.0, 2.5, 1.5]];
    let mut rng = ChaCha8Rng::seed_from_u64(47);
    let pts: Vec<[f64; 3]> = (0..500)
        .map(|i| {
            let mu = truth[i % 2];
            std::array::from_fn(|a| {
                let z: f64 = rng.sample(StandardNormal);
                mu[a] + 0.35 * z
            })
        })
        .collect();
    let model = fit_gmm(&pts, 2, 1e-10, 500).unwrap();
    let mut matched = [false; 2];
    for c in &model.components {
        let target = if (c.mean[0] - truth[0][0]).abs() < (c.mean[0] - truth[1][0]).abs() {
            0
        } else {
            1
        };
        assert!(!matched[target], "both components matched the same mode");
        matched[target] = true;
        for a in 0..3 {
            assert!(
                (c.mean[a] - truth[target][a]).abs() <= 0.05,
                "mean axis {a}: {} vs {}",
                c.mean[a],
                truth[target][a]
            );
        }
        assert!((c.weight - 0.5).abs() <= 0.05, "weight {} vs 0.5", c.weight);
    }

    assert_budget(t0, 10, "EM properties");
}

// --- 7: bicubic interpolation -------------------------------------------------------

#[test]
fn a07_bicubic_constant_affine_corners() {
    let t0 = Instant::now();

    // Constant maps to constant.
    let src = vec![0.37; 7 * 5];
    let out = bicubic_resize(&src, 7, 5, 16, 11).unwrap();
    for &v in &out {
        assert!((v - 0.37).abs() < 1e-9, "constant image produced {v}");
    }

    // Affine ramps survive resampling.
    let (h, w, oh, ow) = (9usize, 8usize, 21usize, 13usize);
    let ramp: Vec<f64> = (0..h * w)
        .map(|i| {
            let (r, c) = (i / w, i % w);
            0.2 + 0.5 * r as f64 - 0.25 * c as f64
        })
        .collect();
    let out = bicubic_resize(&ramp, h, w, oh, ow).unwrap();
    for r in 0..oh {
        for c in 0..ow {
            let rs = r as f64 * (h - 1) as f64 / (oh - 1) as f64;
            let cs = c as f64 * (w - 1) as f64 / (ow - 1) as f64;
            let expect = 0.2 + 0.5 * rs - 0.25 * cs;
            let got = out[r * ow + c];
            assert!((got - expect).abs() < 1e-6, "ramp at ({r},{c}): {got} vs {expect}");
        }
    }

    // Corners align exactly.
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let src: Vec<f64> = (0..6 * 7).map(|_| rng.random_range(-2.0..2.0)).collect();
    let out = bicubic_resize(&src, 6, 7, 15, 9).unwrap();
    let corners = [
        (out[0], src[0]),
        (out[8], src[6]),
        (out[14 * 9], src[5 * 7]),
        (out[15 * 9 - 1], src[6 * 7 - 1]),
    ];
    for (i, (got, want)) in corners.iter().enumerate() {
        assert!((got - want).abs() < 1e-9, "corner {i}: {got} vs {want}");
    }

    assert_budget(t0, 1, "bicubic properties");
}

// --- 8 & 9: desk-scale learning ----------------------------------------------------

struct DeskData {
    train: Dataset,
    val: Dataset,
}

fn desk_data() -> &'static DeskData {
    static DESK: OnceLock<DeskData> = OnceLock::new();
    DESK.get_or_init(|| {
        let ch = ChannelConfig::desk(16, 8, 1);
        let batch = generate_batch(&ch, 1000).unwrap();
        let (tx, _rx) =
            build_datasets_both(&batch, &SelectionConfig::default(), &DatasetOptions::default())
                .unwrap();
        assert_eq!(tx.samples.len(), 16_000);
        let (train, val) = split_dataset(&tx, 0.7, 101).unwrap();
        DeskData { train, val }
    })
}

#[test]
fn a08_desk_classifier_reaches_balanced_accuracy() {
    let t0 = Instant::now();

    let data = desk_data();
    let spec = NetworkSpec::desk(5, ActivationKind::Swish);
    let train_imgs = DatasetImages::new(&data.train, spec.input_side, EmbedKind::OuterProduct);
    let val_imgs = DatasetImages::new(&data.val, spec.input_side, EmbedKind::OuterProduct);
    let cfg = TrainConfig { validation_frequency: 50, ..TrainConfig::default() };
    assert_eq!((cfg.max_epochs, cfg.minibatch, cfg.initial_lr), (6, 128, 1e-3));

    let model = train(&spec, &train_imgs, &val_imgs, &cfg).unwrap();
    let preds = predict(&model, &val_imgs).unwrap();
    let labels: Vec<u8> = (0..val_imgs.len()).map(|i| val_imgs.label(i)).collect();
    let plain = accuracy(&preds, &labels);
    let balanced = balanced_accuracy(&preds, &labels, spec.n_classes);
    println!("desk classifier: accuracy {plain:.3}, balanced accuracy {balanced:.3}");

    assert!(
        balanced >= 0.45,
        "validation balanced accuracy {balanced:.3} below 0.45 (plain {plain:.3})"
    );

    assert_budget(t0, 600, "desk-scale training");
}

#[test]
fn a09_ensemble_lifts_over_best_weak_learner() {
    let t0 = Instant::now();

    let data = desk_data();
    let spec = NetworkSpec::compact(5, ActivationKind::Swish);
    let train_imgs = DatasetImages::new(&data.train, spec.input_side, EmbedKind::OuterProduct);
    let val_imgs = DatasetImages::new(&data.val, spec.input_side, EmbedKind::OuterProduct);
    let labels: Vec<u8> = (0..val_imgs.len()).map(|i| val_imgs.label(i)).collect();

    let mut ensemble_accs = Vec::new();
    let mut best_single_accs = Vec::new();
    let mut strict_wins = 0usize;
    for seed in 1..=5u64 {
        let ecfg = EnsembleConfig { seed, ..EnsembleConfig::default() };
        let tcfg = TrainConfig { validation_frequency: 1000, seed, ..TrainConfig::default() };
        let ens = train_ensemble(&train_imgs, &val_imgs, &ecfg, &spec, &tcfg).unwrap();

        let preds = predict_batch(&ens, &val_imgs).unwrap();
        let ens_acc = balanced_accuracy(&preds, &labels, spec.n_classes);
        let best = ens
            .learners
            .iter()
            .map(|l| {
                let p = predict(l, &val_imgs).unwrap();
                balanced_accuracy(&p, &labels, spec.n_classes)
            })
            .fold(f64::NEG_INFINITY, f64::max);
        println!("seed {seed}: ensemble {ens_acc:.3}, best weak learner {best:.3}");
        if ens_acc > best {
            strict_wins += 1;
        }
        ensemble_accs.push(ens_acc);
        best_single_accs.push(best);
    }

    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let (me, mb) = (mean(&ensemble_accs), mean(&best_single_accs));
    println!("mean ensemble {me:.4}, mean best single {mb:.4}, strict wins {strict_wins}/5");
    assert!(
        me >= mb - 0.005,
        "mean ensemble balanced accuracy {me:.4} more than 0.5pp below best single {mb:.4}"
    );
    assert!(strict_wins >= 3, "ensemble beat its best weak learner on only {strict_wins}/5 seeds");

    assert_budget(t0, 2700, "ensemble lift");
}

// --- 10 & 11: pipeline artifacts -----------------------------------------------------

const PIPELINE_CONFIG: &str = r#"schema_version = 1

[channel]
n_tx = 8
n_rx = 4
seed = 7

[selection]
n_rf_tx = 2
n_rf_rx = 2
n_streams = 2

[dataset]
n_realizations = 40
train_fraction = 0.7
split_seed = 11
eval_realizations = 10
eval_seed = 9007

[net]
input_side = 16
input_channels = 3
stem_width = 4
dropout_rate = 0.2
n_classes = 3
activation = "swish"

[[net.inception_blocks]]
b1 = 3
b3 = 4
b5 = 2
pool_proj = 2

[ensemble_net]
input_side = 16
input_channels = 3
stem_width = 3
dropout_rate = 0.2
n_classes = 3
activation = "relu"

[[ensemble_net.inception_blocks]]
b1 = 2
b3 = 3
b5 = 2
pool_proj = 2

[train]
max_epochs = 2
minibatch = 16
initial_lr = 1e-3
validation_frequency = 50
optimizer = "adam"
seed = 3

[ensemble]
m1 = 2
subset_fraction = 0.6
seed = 5

[baselines]
knn_k = 3

[baselines.svm]
epochs = 30
seed = 13

[baselines.mlp]
hidden = [16]
epochs = 8
seed = 17

[sweeps]
snr_db = [0.0, 10.0, 20.0, 30.0]
n_streams = [1, 2]
strategies = ["zf", "oracle", "greedy", "cnn", "ensemble", "knn", "svm", "mlp"]
"#;

fn run_pipeline(dir: &Path, with_variants: bool) -> PathBuf {
    let config = dir.join("config.toml");
    std::fs::write(&config, PIPELINE_CONFIG).unwrap();
    cmd_gen_data(&config, dir, None).unwrap();
    cmd_train(&config, dir, None, None, None, None).unwrap();
    if with_variants {
        for act in [ActivationKind::Relu, ActivationKind::Swish] {
            for opt in [OptimizerKind::Sgdm, OptimizerKind::Adam, OptimizerKind::Rmsprop] {
                cmd_train(&config, dir, Some(Strategy::Cnn), Some(act), Some(opt), None).unwrap();
            }
        }
    }
    cmd_evaluate(&config, dir, None, None, Some(1)).unwrap();
    config
}

#[test]
fn a10_report_emits_matrix_and_curves() {
    let t0 = Instant::now();

    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    std::fs::create_dir_all(&dir).unwrap();
    run_pipeline(&dir, true);

    let results = std::fs::read_to_string(dir.join("results.csv")).unwrap();
    for strategy in ["zf", "oracle", "cnn", "ensemble", "knn", "svm", "mlp"] {
        let curve_points = results
            .lines()
            .filter(|l| l.starts_with(&format!("{strategy},snr_db,")))
            .count();
        assert_eq!(curve_points, 4, "{strategy}: SE-vs-SNR curve incomplete\n{results}");
    }
    assert!(dir.join("se_vs_snr.svg").is_file(), "missing SE-vs-SNR plot");

    let report_dir = tmp.path().join("report");
    std::fs::create_dir_all(&report_dir).unwrap();
    cmd_report(&[dir.clone()], &report_dir).unwrap();
    let report = std::fs::read_to_string(report_dir.join("report.md")).unwrap();

    // The activation x optimizer matrix: exactly one row per activation,
    // with every optimizer column populated.
    assert!(report.contains("| activation | sgdm | adam | rmsprop |"), "matrix header:\n{report}");
    for act in ["relu", "swish"] {
        let row = report
            .lines()
            .find(|l| l.starts_with(&format!("| {act} |")))
            .unwrap_or_else(|| panic!("no {act} matrix row"));
        assert!(!row.contains("—"), "unfilled matrix cell in {row}");
    }
    // Seed-averaged activation and classifier orderings are reported.
    assert!(report.contains("Swish"), "missing activation comparison:\n{report}");
    assert!(report.contains("CNN"), "missing classifier comparison:\n{report}");
    assert!(report_dir.join("report_se_vs_snr.svg").is_file(), "missing report SE plot");

    assert_budget(t0, 3600, "comparative report");
}

#[test]
fn a11_pipeline_is_byte_deterministic() {
    let t0 = Instant::now();

    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        std::fs::create_dir_all(dir).unwrap();
        run_pipeline(dir, false);
    }

    for file in [
        "channels.bsmc",
        "dataset_tx.bsds",
        "dataset_rx.bsds",
        "dataset_tx.csv",
        "dataset_rx.csv",
        "results.csv",
        "selections.csv",
    ] {
        let bytes_a = std::fs::read(a.join(file)).unwrap();
        let bytes_b = std::fs::read(b.join(file)).unwrap();
        assert!(bytes_a == bytes_b, "{file} differs between identical runs");
    }

    assert_budget(t0, 3600, "pipeline determinism");
}
