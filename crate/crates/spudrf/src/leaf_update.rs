//! Closed-form leaf updates: weighted EM on the forest's Gaussian mixture
//! with the routing (and therefore the backbone) held fixed.
//!
//! Each iteration computes, per sample, the posterior over (tree, leaf)
//! pairs — the tree responsibility times the within-tree leaf posterior —
//! scales it by the sample's selection weight `v`, and refits every leaf's
//! mean and variance from the accumulated sufficient statistics. Because
//! this is exact EM on the density the objective scores, the weighted forest
//! log-likelihood never decreases; the per-iteration values are returned so
//! callers can check that.
//!
//! The variance refit uses the freshly updated mean; variances are clamped
//! below by a floor, which keeps the M-step a constrained maximum and
//! preserves monotonicity. Leaves that receive almost no responsibility mass
//! keep their previous parameters.

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::forest::{
    leaf_reach_probabilities, log_sum_exp, tree_posterior, ForestModel, LOG_DENSITY_FLOOR,
};

/// Leaves with accumulated weight below this keep their old parameters.
const MIN_STAT_WEIGHT: f64 = 1e-12;

/// Datasets at least this large default to mini-batch accumulation.
const AUTO_BATCH_THRESHOLD: usize = 5000;
const AUTO_BATCH_COUNT: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct LeafUpdateConfig {
    /// Number of EM iterations per update round.
    pub iterations: usize,
    /// Number of mini-batches to accumulate statistics over; `None` picks
    /// full batch for small datasets and 50 batches for large ones. Batching
    /// only regroups the summation — parameters are written once per
    /// iteration either way.
    pub mini_batches: Option<usize>,
    /// Lower clamp for every refitted variance.
    pub variance_floor: f64,
}

impl Default for LeafUpdateConfig {
    fn default() -> Self {
        LeafUpdateConfig {
            iterations: 20,
            mini_batches: None,
            variance_floor: 1e-4,
        }
    }
}

impl LeafUpdateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("leaf update needs >= 1 iteration".into()));
        }
        if self.mini_batches == Some(0) {
            return Err(Error::Config("mini-batch count must be >= 1".into()));
        }
        if !(self.variance_floor > 0.0) || !self.variance_floor.is_finite() {
            return Err(Error::Config(format!(
                "variance floor must be positive and finite, got {}",
                self.variance_floor
            )));
        }
        Ok(())
    }

    fn effective_batches(&self, n_active: usize) -> usize {
        let requested = self
            .mini_batches
            .unwrap_or(if n_active >= AUTO_BATCH_THRESHOLD {
                AUTO_BATCH_COUNT
            } else {
                1
            });
        requested.clamp(1, n_active.max(1))
    }
}

/// Per-iteration diagnostics from one update round.
#[derive(Debug, Clone)]
pub struct LeafUpdateStats {
    /// Weighted forest log-likelihood before each iteration, plus the value
    /// after the final one; length is `iterations + 1`. Non-decreasing.
    pub log_likelihood_trace: Vec<f64>,
}

/// Posterior over one tree's leaves for target `y`: responsibility of each
/// leaf, proportional to `omega_l * N(y; mu_l, var_l)`.
pub fn leaf_posteriors(y: f64, omega: &[f64], leaves: &[crate::forest::LeafParams]) -> Vec<f64> {
    tree_posterior(y, omega, leaves).1
}

struct ActiveSample {
    weight: f64,
    target: f64,
    /// Routing probabilities per tree, cached once since the backbone does
    /// not change during the update.
    omegas: Vec<Vec<f64>>,
}

/// Refit every leaf Gaussian by weighted EM. `weights` are the per-sample
/// selection weights in `[0, 1]`; zero-weight samples are skipped entirely,
/// so removing them from the dataset gives bit-identical results.
pub fn update_leaves(
    data: &Dataset,
    weights: &[f64],
    model: &mut ForestModel,
    config: &LeafUpdateConfig,
) -> Result<LeafUpdateStats> {
    config.validate()?;
    if weights.len() != data.len() {
        return Err(Error::Usage(format!(
            "{} weights for {} samples",
            weights.len(),
            data.len()
        )));
    }
    if weights
        .iter()
        .any(|w| !w.is_finite() || !(0.0..=1.0).contains(w))
    {
        return Err(Error::Usage("sample weights must lie in [0, 1]".into()));
    }
    let mut active = Vec::new();
    for (sample, &w) in data.samples.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        let (features, _) = model.backbone.forward(&sample.features)?;
        let omegas = model
            .trees
            .iter()
            .map(|t| leaf_reach_probabilities(&features, &t.topology))
            .collect::<Result<Vec<_>>>()?;
        active.push(ActiveSample {
            weight: w,
            target: sample.target,
            omegas,
        });
    }
    if active.is_empty() {
        return Err(Error::Schedule(
            "every sample weight is zero; nothing to fit leaves on".into(),
        ));
    }

    let tree_count = model.trees.len();
    let batches = config.effective_batches(active.len());
    let batch_size = active.len().div_ceil(batches);
    let mut trace = Vec::with_capacity(config.iterations + 1);

    for _ in 0..config.iterations {
        // Accumulated (weight, weight*y, weight*y^2) per (tree, leaf).
        let mut stats: Vec<Vec<[f64; 3]>> = model
            .trees
            .iter()
            .map(|t| vec![[0.0; 3]; t.leaves.len()])
            .collect();
        let mut log_likelihood = 0.0;
        for chunk in active.chunks(batch_size) {
            let mut batch_stats: Vec<Vec<[f64; 3]>> = model
                .trees
                .iter()
                .map(|t| vec![[0.0; 3]; t.leaves.len()])
                .collect();
            for sample in chunk {
                let y = sample.target;
                let mut tree_logs = Vec::with_capacity(tree_count);
                let mut posteriors = Vec::with_capacity(tree_count);
                for (tree, omega) in model.trees.iter().zip(&sample.omegas) {
                    let (log_p, posterior) = tree_posterior(y, omega, &tree.leaves);
                    tree_logs.push(log_p);
                    posteriors.push(posterior);
                }
                let lse = log_sum_exp(&tree_logs);
                let forest_ll = if lse.is_finite() {
                    lse - (tree_count as f64).ln()
                } else {
                    LOG_DENSITY_FLOOR
                };
                log_likelihood += sample.weight * forest_ll;
                for (k, posterior) in posteriors.iter().enumerate() {
                    // Responsibility of tree k for this sample; uniform when
                    // every tree underflowed.
                    let a = if lse.is_finite() {
                        (tree_logs[k] - lse).exp()
                    } else {
                        1.0 / tree_count as f64
                    };
                    let scale = sample.weight * a;
                    if scale == 0.0 {
                        continue;
                    }
                    for (l, &zeta) in posterior.iter().enumerate() {
                        let u = scale * zeta;
                        batch_stats[k][l][0] += u;
                        batch_stats[k][l][1] += u * y;
                        batch_stats[k][l][2] += u * y * y;
                    }
                }
            }
            for (total, batch) in stats.iter_mut().zip(&batch_stats) {
                for (t, b) in total.iter_mut().zip(batch) {
                    t[0] += b[0];
                    t[1] += b[1];
                    t[2] += b[2];
                }
            }
        }
        trace.push(log_likelihood);
        for (tree, tree_stats) in model.trees.iter_mut().zip(&stats) {
            for (leaf, s) in tree.leaves.iter_mut().zip(tree_stats) {
                let mass = s[0];
                if mass < MIN_STAT_WEIGHT {
                    continue;
                }
                let mean = s[1] / mass;
                // Equals sum(u * (y - mean)^2) / mass with the fresh mean.
                let variance = s[2] / mass - mean * mean;
                leaf.mean = mean;
                leaf.variance = variance.max(config.variance_floor);
            }
        }
    }

    // Log-likelihood under the final parameters closes the trace.
    let mut final_ll = 0.0;
    for sample in &active {
        let tree_logs: Vec<f64> = model
            .trees
            .iter()
            .zip(&sample.omegas)
            .map(|(tree, omega)| tree_posterior(sample.target, omega, &tree.leaves).0)
            .collect();
        let lse = log_sum_exp(&tree_logs);
        final_ll += sample.weight
            * if lse.is_finite() {
                lse - (tree_count as f64).ln()
            } else {
                LOG_DENSITY_FLOOR
            };
    }
    trace.push(final_ll);

    Ok(LeafUpdateStats {
        log_likelihood_trace: trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{Activation, BackboneParams, Layer};
    use crate::dataset::Sample;
    use crate::forest::{LeafParams, RegressionTree, TreeTopology};
    use rand::Rng;

    /// Model whose backbone passes features straight through, so tests can
    /// set routing logits directly.
    fn passthrough_model(feature_dim: usize, trees: Vec<RegressionTree>) -> ForestModel {
        let layer = Layer {
            weights: (0..feature_dim)
                .map(|i| {
                    (0..feature_dim)
                        .map(|j| if i == j { 1.0 } else { 0.0 })
                        .collect()
                })
                .collect(),
            bias: vec![0.0; feature_dim],
            activation: Activation::Identity,
        };
        ForestModel {
            backbone: BackboneParams::new(vec![layer]).unwrap(),
            trees,
        }
    }

    fn leaf(mean: f64, variance: f64) -> LeafParams {
        LeafParams { mean, variance }
    }

    fn random_case(seed: u64, n: usize) -> (Dataset, Vec<f64>, ForestModel) {
        let mut rng = crate::rng::stream(seed, 0xAB, 0);
        let samples = (0..n)
            .map(|i| Sample {
                id: i as u64,
                features: vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)],
                target: rng.random_range(-5.0..5.0),
                origin_id: None,
            })
            .collect();
        let weights = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
        let tree = |s: u64| {
            RegressionTree::new(
                TreeTopology::with_sampled_features(2, 2, s).unwrap(),
                vec![leaf(-1.0, 1.0), leaf(1.0, 1.0)],
            )
            .unwrap()
        };
        let model = passthrough_model(2, vec![tree(seed), tree(seed + 1)]);
        (Dataset::new(samples).unwrap(), weights, model)
    }

    #[test]
    fn posteriors_match_hand_case() {
        // Equidistant target: posterior follows the equal weights.
        let leaves = [leaf(0.0, 1.0), leaf(2.0, 1.0)];
        let p = leaf_posteriors(1.0, &[0.5, 0.5], &leaves);
        assert!((p[0] - 0.5).abs() < 1e-12 && (p[1] - 0.5).abs() < 1e-12);
        // Log-density gap of exactly 1 gives the logistic of 1.
        let p = leaf_posteriors(0.5, &[0.5, 0.5], &leaves);
        assert!((p[0] - 0.7310585786300049).abs() < 1e-12);
        assert!((p[0] + p[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn posteriors_fall_back_to_routing_when_everything_underflows() {
        // A target this far out overflows the squared distance, so every
        // log-term is -inf and the posterior reverts to the routing weights.
        let leaves = [leaf(0.0, 1e-4), leaf(1.0, 1e-4)];
        let p = leaf_posteriors(1e200, &[0.25, 0.75], &leaves);
        assert!((p[0] - 0.25).abs() < 1e-12);
        assert!((p[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn log_likelihood_is_monotone_over_iterations() {
        for seed in 0..5 {
            let (data, weights, mut model) = random_case(seed, 120);
            let stats = update_leaves(
                &data,
                &weights,
                &mut model,
                &LeafUpdateConfig {
                    iterations: 15,
                    ..LeafUpdateConfig::default()
                },
            )
            .unwrap();
            for pair in stats.log_likelihood_trace.windows(2) {
                assert!(
                    pair[1] >= pair[0] - 1e-9,
                    "seed {seed}: LL dropped {} -> {}",
                    pair[0],
                    pair[1]
                );
            }
        }
    }

    #[test]
    fn zero_weight_samples_are_equivalent_to_deletion() {
        let (data, mut weights, model) = random_case(9, 60);
        for i in (0..60).step_by(3) {
            weights[i] = 0.0;
        }
        let mut with_zeros = model.clone();
        update_leaves(
            &data,
            &weights,
            &mut with_zeros,
            &LeafUpdateConfig::default(),
        )
        .unwrap();

        let kept: Vec<usize> = (0..60).filter(|i| weights[*i] > 0.0).collect();
        let reduced = Dataset {
            samples: kept.iter().map(|&i| data.samples[i].clone()).collect(),
        };
        let reduced_weights: Vec<f64> = kept.iter().map(|&i| weights[i]).collect();
        let mut without = model;
        update_leaves(
            &reduced,
            &reduced_weights,
            &mut without,
            &LeafUpdateConfig::default(),
        )
        .unwrap();

        for (a, b) in with_zeros.trees.iter().zip(&without.trees) {
            for (la, lb) in a.leaves.iter().zip(&b.leaves) {
                assert_eq!(la.mean, lb.mean);
                assert_eq!(la.variance, lb.variance);
            }
        }
    }

    #[test]
    fn all_zero_weights_is_a_scheduling_error() {
        let (data, _, mut model) = random_case(2, 10);
        let err = update_leaves(
            &data,
            &vec![0.0; 10],
            &mut model,
            &LeafUpdateConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Schedule(_)));
    }

    #[test]
    fn starved_leaves_keep_their_parameters() {
        // A huge routing logit saturates the split, so leaf 1 gets zero mass.
        let tree = RegressionTree::new(
            TreeTopology::new(2, vec![0], 1).unwrap(),
            vec![leaf(0.0, 1.0), leaf(123.0, 45.0)],
        )
        .unwrap();
        let mut model = passthrough_model(1, vec![tree]);
        let data = Dataset::new(
            (0..20)
                .map(|i| Sample {
                    id: i,
                    features: vec![800.0],
                    target: i as f64 / 10.0,
                    origin_id: None,
                })
                .collect(),
        )
        .unwrap();
        update_leaves(
            &data,
            &vec![1.0; 20],
            &mut model,
            &LeafUpdateConfig::default(),
        )
        .unwrap();
        assert_ne!(model.trees[0].leaves[0].mean, 0.0);
        assert_eq!(model.trees[0].leaves[1].mean, 123.0);
        assert_eq!(model.trees[0].leaves[1].variance, 45.0);
    }

    #[test]
    fn variances_never_drop_below_the_floor() {
        // All targets identical: the unconstrained variance would be 0.
        let tree = RegressionTree::new(
            TreeTopology::new(2, vec![0], 1).unwrap(),
            vec![leaf(1.0, 1.0), leaf(2.0, 1.0)],
        )
        .unwrap();
        let mut model = passthrough_model(1, vec![tree]);
        let data = Dataset::new(
            (0..10)
                .map(|i| Sample {
                    id: i,
                    features: vec![0.0],
                    target: 3.0,
                    origin_id: None,
                })
                .collect(),
        )
        .unwrap();
        update_leaves(
            &data,
            &vec![1.0; 10],
            &mut model,
            &LeafUpdateConfig::default(),
        )
        .unwrap();
        for leaf in &model.trees[0].leaves {
            assert!((leaf.mean - 3.0).abs() < 1e-9);
            assert_eq!(leaf.variance, 1e-4);
        }
    }

    #[test]
    fn mini_batching_only_regroups_the_sums() {
        let (data, weights, model) = random_case(4, 101);
        let mut full = model.clone();
        update_leaves(
            &data,
            &weights,
            &mut full,
            &LeafUpdateConfig {
                mini_batches: Some(1),
                ..LeafUpdateConfig::default()
            },
        )
        .unwrap();
        let mut batched = model;
        update_leaves(
            &data,
            &weights,
            &mut batched,
            &LeafUpdateConfig {
                mini_batches: Some(7),
                ..LeafUpdateConfig::default()
            },
        )
        .unwrap();
        for (a, b) in full.trees.iter().zip(&batched.trees) {
            for (la, lb) in a.leaves.iter().zip(&b.leaves) {
                assert!((la.mean - lb.mean).abs() < 1e-9);
                assert!((la.variance - lb.variance).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rejects_malformed_weights() {
        let (data, _, mut model) = random_case(5, 10);
        let too_few = update_leaves(&data, &[1.0; 9], &mut model, &LeafUpdateConfig::default());
        assert!(too_few.is_err());
        let out_of_range =
            update_leaves(&data, &[2.0; 10], &mut model, &LeafUpdateConfig::default());
        assert!(out_of_range.is_err());
    }
}
