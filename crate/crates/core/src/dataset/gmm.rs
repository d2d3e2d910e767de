//! Gaussian mixture summaries of a realization's spatial structure.
//!
//! Each propagation path contributes a `(phi_r, phi_t, |alpha|)` triple; a
//! K-component mixture with diagonal (per-axis) variances is fitted by
//! expectation-maximization. The flattened parameter vector
//! `q = [A, w_1, mu..., sigma..., w_2, ...]` can be appended to the feature
//! set as a compact channel-distribution descriptor.

use crate::error::{Error, Result};

/// Axis count of the fitted space: (phi_r, phi_t, |alpha|).
const AXES: usize = 3;
/// Variance floor; a component pinching below this on an axis where the data
/// itself has spread is treated as collapsed.
const SIGMA_FLOOR: f64 = 1e-6;
/// Data spread below which an axis is considered degenerate, so the floor
/// applies silently instead of signalling collapse.
const DEGENERATE_AXIS_STD: f64 = 1e-5;

/// One mixture component with diagonal covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmComponent {
    pub weight: f64,
    pub mean: [f64; AXES],
    pub std: [f64; AXES],
}

/// A fitted mixture plus the amplitude used by the flattened descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel {
    /// Maximum mixture density over the fitted points.
    pub amplitude: f64,
    pub components: Vec<GmmComponent>,
    /// Log-likelihood after each EM iteration (nondecreasing).
    pub ll_trace: Vec<f64>,
}

impl GmmModel {
    /// Proper mixture density at a point.
    pub fn density(&self, p: &[f64; AXES]) -> f64 {
        self.components
            .iter()
            .map(|c| c.weight * component_pdf(c, p))
            .sum()
    }

    /// Flattened descriptor `[A, w_1, mu_r, mu_t, mu_a, s_r, s_t, s_a, w_2, ...]`,
    /// length `1 + 7K`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut q = Vec::with_capacity(1 + 7 * self.components.len());
        q.push(self.amplitude);
        for c in &self.components {
            q.push(c.weight);
            q.extend_from_slice(&c.mean);
            q.extend_from_slice(&c.std);
        }
        q
    }
}

fn component_pdf(c: &GmmComponent, p: &[f64; AXES]) -> f64 {
    component_log_pdf(c, p).exp()
}

fn component_log_pdf(c: &GmmComponent, p: &[f64; AXES]) -> f64 {
    let mut acc = -(AXES as f64) * 0.5 * (2.0 * std::f64::consts::PI).ln();
    for a in 0..AXES {
        let z = (p[a] - c.mean[a]) / c.std[a];
        acc -= 0.5 * z * z + c.std[a].ln();
    }
    acc
}

fn per_axis_stats(points: &[[f64; AXES]]) -> ([f64; AXES], [f64; AXES]) {
    let n = points.len() as f64;
    let mut mean = [0.0; AXES];
    for p in points {
        for a in 0..AXES {
            mean[a] += p[a];
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut std = [0.0; AXES];
    for p in points {
        for a in 0..AXES {
            let d = p[a] - mean[a];
            std[a] += d * d;
        }
    }
    for s in &mut std {
        *s = (*s / n).sqrt();
    }
    (mean, std)
}

/// Deterministic farthest-point means initialization: start from the point
/// nearest the global mean, then repeatedly take the point farthest from the
/// chosen set. Ties resolve to the lower index.
fn init_means(points: &[[f64; AXES]], k: usize) -> Vec<[f64; AXES]> {
    let (mean, _) = per_axis_stats(points);
    let dist2 = |a: &[f64; AXES], b: &[f64; AXES]| -> f64 {
        (0..AXES).map(|i| (a[i] - b[i]) * (a[i] - b[i])).sum()
    };
    let first = (0..points.len())
        .min_by(|&i, &j| {
            dist2(&points[i], &mean)
                .partial_cmp(&dist2(&points[j], &mean))
                .unwrap()
                .then(i.cmp(&j))
        })
        .unwrap();
    let mut chosen = vec![first];
    while chosen.len() < k {
        let next = (0..points.len())
            .max_by(|&i, &j| {
                let di = chosen.iter().map(|&c| dist2(&points[i], &points[c])).fold(f64::INFINITY, f64::min);
                let dj = chosen.iter().map(|&c| dist2(&points[j], &points[c])).fold(f64::INFINITY, f64::min);
                di.partial_cmp(&dj).unwrap().then(j.cmp(&i))
            })
            .unwrap();
        chosen.push(next);
    }
    chosen.into_iter().map(|i| points[i]).collect()
}

/// Fits a K-component diagonal-covariance Gaussian mixture by EM.
///
/// The log-likelihood is nondecreasing across iterations; fitting stops when
/// the improvement drops below `tol` or after `max_iter` iterations. A
/// component whose std pinches below `1e-6` on an axis where the data has
/// real spread is reinitialized once (mean moved to the point the model
/// explains worst); a second collapse aborts with an error. On axes where
/// the data itself is degenerate the floor applies silently, so fitting a
/// single component to identical points succeeds with `mu` at that point.
pub fn fit_gmm(
    points: &[[f64; AXES]],
    k: usize,
    tol: f64,
    max_iter: usize,
) -> Result<GmmModel> {
    if k == 0 {
        return Err(Error::invalid("component count must be positive"));
    }
    if points.len() < k {
        return Err(Error::invalid(format!(
            "need at least {k} points to fit {k} components, got {}",
            points.len()
        )));
    }
    if !(tol >= 0.0) || max_iter == 0 {
        return Err(Error::invalid("tol must be >= 0 and max_iter positive"));
    }
    let n = points.len();
    let (_, global_std) = per_axis_stats(points);
    let init_std: [f64; AXES] = std::array::from_fn(|a| global_std[a].max(SIGMA_FLOOR));

    let mut comps: Vec<GmmComponent> = init_means(points, k)
        .into_iter()
        .map(|mean| GmmComponent {
            weight: 1.0 / k as f64,
            mean,
            std: init_std,
        })
        .collect();

    let mut resp = vec![0.0; n * k];
    let mut ll_trace = Vec::new();
    let mut reinitialized = vec![false; k];

    for _ in 0..max_iter {
        // E-step with log-sum-exp for numerical stability.
        let mut ll = 0.0;
        for (i, p) in points.iter().enumerate() {
            let logs: Vec<f64> = comps
                .iter()
                .map(|c| c.weight.max(f64::MIN_POSITIVE).ln() + component_log_pdf(c, p))
                .collect();
            let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum_exp: f64 = logs.iter().map(|&l| (l - m).exp()).sum();
            ll += m + sum_exp.ln();
            for (j, &l) in logs.iter().enumerate() {
                resp[i * k + j] = (l - m).exp() / sum_exp;
            }
        }

        // M-step: weighted means and per-axis population variances.
        for j in 0..k {
            let nk: f64 = (0..n).map(|i| resp[i * k + j]).sum();
            let nk_safe = nk.max(f64::MIN_POSITIVE);
            let mut mean = [0.0; AXES];
            for (i, p) in points.iter().enumerate() {
                for a in 0..AXES {
                    mean[a] += resp[i * k + j] * p[a];
                }
            }
            for m in &mut mean {
                *m /= nk_safe;
            }
            let mut var = [0.0; AXES];
            for (i, p) in points.iter().enumerate() {
                for a in 0..AXES {
                    let d = p[a] - mean[a];
                    var[a] += resp[i * k + j] * d * d;
                }
            }
            let mut collapsed = false;
            let mut std = [0.0; AXES];
            for a in 0..AXES {
                std[a] = (var[a] / nk_safe).sqrt();
                if std[a] < SIGMA_FLOOR {
                    if global_std[a] < DEGENERATE_AXIS_STD {
                        std[a] = SIGMA_FLOOR;
                    } else {
                        collapsed = true;
                    }
                }
            }
            if collapsed {
                if reinitialized[j] {
                    return Err(Error::ComponentCollapse(format!(
                        "component {j} collapsed twice (std {std:?})"
                    )));
                }
                reinitialized[j] = true;
                // Restart at the point the current model explains worst.
                let worst = (0..n)
                    .min_by(|&i, &l| {
                        let di: f64 = (0..k).map(|c| resp[i * k + c] * comps[c].weight).sum();
                        let dl: f64 = (0..k).map(|c| resp[l * k + c] * comps[c].weight).sum();
                        di.partial_cmp(&dl).unwrap().then(i.cmp(&l))
                    })
                    .unwrap();
                comps[j] = GmmComponent {
                    weight: 1.0 / k as f64,
                    mean: points[worst],
                    std: init_std,
                };
                continue;
            }
            comps[j] = GmmComponent {
                weight: nk / n as f64,
                mean,
                std,
            };
        }
        // Renormalize weights (guards the reinitialization path).
        let wsum: f64 = comps.iter().map(|c| c.weight).sum();
        for c in &mut comps {
            c.weight /= wsum;
        }

        let improved = match ll_trace.last() {
            Some(&prev) => ll - prev,
            None => f64::INFINITY,
        };
        ll_trace.push(ll);
        if improved.abs() < tol {
            break;
        }
    }

    let mut model = GmmModel {
        amplitude: 0.0,
        components: comps,
        ll_trace,
    };
    model.amplitude = points
        .iter()
        .map(|p| model.density(p))
        .fold(0.0, f64::max);
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn gaussian_cloud(
        rng: &mut impl Rng,
        center: [f64; 3],
        std: f64,
        count: usize,
    ) -> Vec<[f64; 3]> {
        let d = Normal::new(0.0, std).unwrap();
        (0..count)
            .map(|_| std::array::from_fn(|a| center[a] + d.sample(rng)))
            .collect()
    }

    #[test]
    fn identical_points_single_component() {
        let points = vec![[0.3, -0.1, 1.2]; 6];
        let model = fit_gmm(&points, 1, 1e-9, 50).unwrap();
        assert_eq!(model.components.len(), 1);
        let c = &model.components[0];
        assert!((c.weight - 1.0).abs() < 1e-12);
        for a in 0..3 {
            assert!((c.mean[a] - points[0][a]).abs() < 1e-12);
            assert!(c.std[a] >= SIGMA_FLOOR);
        }
    }

    #[test]
    fn single_component_matches_sample_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let points = gaussian_cloud(&mut rng, [0.1, -0.2, 0.8], 0.3, 400);
        let model = fit_gmm(&points, 1, 1e-12, 100).unwrap();
        let (mean, std) = per_axis_stats(&points);
        let c = &model.components[0];
        for a in 0..3 {
            assert!((c.mean[a] - mean[a]).abs() < 1e-9, "axis {a} mean");
            assert!((c.std[a] - std[a]).abs() < 1e-9, "axis {a} std");
        }
    }

    #[test]
    fn recovers_two_separated_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let c1 = [-0.3, -0.3, 0.5];
        let c2 = [0.35, 0.3, 1.5];
        let mut points = gaussian_cloud(&mut rng, c1, 0.02, 300);
        points.extend(gaussian_cloud(&mut rng, c2, 0.02, 100));
        let model = fit_gmm(&points, 2, 1e-10, 200).unwrap();
        let mut comps = model.components.clone();
        comps.sort_by(|a, b| a.mean[0].partial_cmp(&b.mean[0]).unwrap());
        for a in 0..3 {
            assert!((comps[0].mean[a] - c1[a]).abs() < 0.05);
            assert!((comps[1].mean[a] - c2[a]).abs() < 0.05);
        }
        assert!((comps[0].weight - 0.75).abs() < 0.05);
        assert!((comps[1].weight - 0.25).abs() < 0.05);
    }

    #[test]
    fn log_likelihood_is_nondecreasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut points = gaussian_cloud(&mut rng, [-0.2, 0.0, 1.0], 0.1, 60);
        points.extend(gaussian_cloud(&mut rng, [0.25, 0.1, 0.4], 0.15, 40));
        let model = fit_gmm(&points, 3, 0.0, 60).unwrap();
        for w in model.ll_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-9, "LL decreased: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn model_invariants_and_flatten_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let points = gaussian_cloud(&mut rng, [0.0, 0.0, 1.0], 0.2, 120);
        let model = fit_gmm(&points, 2, 1e-9, 100).unwrap();
        let wsum: f64 = model.components.iter().map(|c| c.weight).sum();
        assert!((wsum - 1.0).abs() < 1e-9);
        for c in &model.components {
            assert!(c.weight >= 0.0 && c.weight <= 1.0);
            assert!(c.std.iter().all(|&s| s > 0.0));
        }
        let q = model.flatten();
        assert_eq!(q.len(), 1 + 7 * 2);
        assert_eq!(q[0], model.amplitude);
        assert_eq!(q[1], model.components[0].weight);
        // Amplitude equals the max density over the fitted points.
        let max_d = points
            .iter()
            .map(|p| model.density(p))
            .fold(0.0, f64::max);
        assert_eq!(model.amplitude, max_d);
    }

    #[test]
    fn rejects_bad_arguments() {
        let points = vec![[0.0, 0.0, 0.0]; 3];
        assert!(fit_gmm(&points, 0, 1e-9, 10).is_err());
        assert!(fit_gmm(&points, 4, 1e-9, 10).is_err());
        assert!(fit_gmm(&points, 1, -1.0, 10).is_err());
        assert!(fit_gmm(&points, 1, 1e-9, 0).is_err());
    }

    #[test]
    fn persistent_collapse_is_an_error() {
        // A lone outlier far from a tight cluster keeps capturing one
        // component exactly; after the single allowed reinitialization the
        // fit must give up rather than loop.
        let mut points = vec![[0.0, 0.0, 0.0]; 40];
        // Perturb the cluster so the axes are not globally degenerate.
        for (i, p) in points.iter_mut().enumerate() {
            let t = i as f64 * 1e-3;
            *p = [t, -t, t];
        }
        points.push([100.0, 100.0, 100.0]);
        match fit_gmm(&points, 2, 1e-12, 300) {
            Err(Error::ComponentCollapse(_)) => {}
            other => panic!("expected collapse error, got {other:?}"),
        }
    }
}
