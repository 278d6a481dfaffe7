//! Soft-routed regression trees over a shared feature backbone.
//!
//! Each tree is a perfect binary tree. Split node `n` looks up one backbone
//! output through the tree's feature assignment and turns it into a routing
//! probability `s_n = sigmoid(f[phi(n)])`; a sample reaches leaf `l` with
//! probability `omega_l`, the product of the branch probabilities along the
//! root-to-leaf path. Every leaf carries a Gaussian over the target, so a
//! tree is a mixture density and the forest is the uniform mixture of its
//! trees. Predictions are mixture means; uncertainty is summarized by a
//! closed-form lower bound on the mixture's differential entropy.
//!
//! Nodes use breadth-first indexing: splits occupy `0..split_count`, the
//! children of split `n` are `2n+1` and `2n+2`, and leaf `l` is node
//! `split_count + l`. This makes routing a single forward sweep over one
//! probability array.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backbone::{sigmoid, BackboneParams, Layer};
use crate::error::{Error, Result};
use crate::rng::{salt, stream};

/// Log-densities below this are clamped; keeps hopeless samples finite.
pub const LOG_DENSITY_FLOOR: f64 = -700.0;

/// Natural log of 2*pi, halved where the Gaussian formulas need it.
const LN_TWO_PI: f64 = 1.8378770664093453;

/// Shape of one tree: its depth and the backbone output assigned to each
/// split node. Depth counts levels, so depth 1 is a single leaf.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeTopology {
    depth: usize,
    feature_index: Vec<usize>,
}

impl TreeTopology {
    pub const MAX_DEPTH: usize = 16;

    /// Build from an explicit feature assignment (one entry per split node,
    /// each a valid index into a `feature_dim`-wide feature vector).
    pub fn new(depth: usize, feature_index: Vec<usize>, feature_dim: usize) -> Result<Self> {
        if depth == 0 || depth > Self::MAX_DEPTH {
            return Err(Error::Config(format!(
                "tree depth must be in 1..={}, got {depth}",
                Self::MAX_DEPTH
            )));
        }
        let splits = (1usize << (depth - 1)) - 1;
        if feature_index.len() != splits {
            return Err(Error::Config(format!(
                "depth {depth} needs {splits} split assignments, got {}",
                feature_index.len()
            )));
        }
        if let Some(&bad) = feature_index.iter().find(|&&i| i >= feature_dim) {
            return Err(Error::Config(format!(
                "split feature index {bad} out of range for feature dim {feature_dim}"
            )));
        }
        Ok(TreeTopology {
            depth,
            feature_index,
        })
    }

    /// Sample a feature assignment without replacement, deterministically in
    /// `seed`. Fails if the tree has more splits than there are features.
    pub fn with_sampled_features(depth: usize, feature_dim: usize, seed: u64) -> Result<Self> {
        if depth == 0 || depth > Self::MAX_DEPTH {
            return Err(Error::Config(format!(
                "tree depth must be in 1..={}, got {depth}",
                Self::MAX_DEPTH
            )));
        }
        let splits = (1usize << (depth - 1)) - 1;
        if splits > feature_dim {
            return Err(Error::Config(format!(
                "tree with {splits} split nodes cannot draw distinct features from {feature_dim}"
            )));
        }
        let mut rng = stream(seed, salt::TREE_FEATURES, 0);
        let mut pool: Vec<usize> = (0..feature_dim).collect();
        for i in 0..splits {
            let j = rng.random_range(i..feature_dim);
            pool.swap(i, j);
        }
        pool.truncate(splits);
        TreeTopology::new(depth, pool, feature_dim)
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn split_count(&self) -> usize {
        self.feature_index.len()
    }

    pub fn leaf_count(&self) -> usize {
        1usize << (self.depth - 1)
    }

    /// Backbone output feeding split node `n`.
    pub fn feature_index(&self, node: usize) -> usize {
        self.feature_index[node]
    }

    pub fn feature_indices(&self) -> &[usize] {
        &self.feature_index
    }
}

/// Gaussian held by one leaf.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LeafParams {
    #[serde(rename = "mu")]
    pub mean: f64,
    #[serde(rename = "var")]
    pub variance: f64,
}

/// One tree: shape plus leaf Gaussians.
#[derive(Debug, Clone)]
pub struct RegressionTree {
    pub topology: TreeTopology,
    pub leaves: Vec<LeafParams>,
}

impl RegressionTree {
    pub fn new(topology: TreeTopology, leaves: Vec<LeafParams>) -> Result<Self> {
        if leaves.len() != topology.leaf_count() {
            return Err(Error::Config(format!(
                "tree of depth {} needs {} leaves, got {}",
                topology.depth(),
                topology.leaf_count(),
                leaves.len()
            )));
        }
        for (i, leaf) in leaves.iter().enumerate() {
            if !leaf.mean.is_finite() || !leaf.variance.is_finite() || leaf.variance <= 0.0 {
                return Err(Error::Config(format!(
                    "leaf {i} has invalid parameters (mu {}, var {})",
                    leaf.mean, leaf.variance
                )));
            }
        }
        Ok(RegressionTree { topology, leaves })
    }
}

/// Backbone plus trees; everything a prediction needs.
#[derive(Debug, Clone)]
pub struct ForestModel {
    pub backbone: BackboneParams,
    pub trees: Vec<RegressionTree>,
}

impl ForestModel {
    /// Fresh model: seeded backbone, per-tree feature assignments, leaf means
    /// uniform over the observed target range, leaf variances set to the
    /// target variance (floored).
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        input_dim: usize,
        hidden: &[usize],
        feature_dim: usize,
        tree_count: usize,
        depth: usize,
        target_range: (f64, f64),
        target_variance: f64,
        variance_floor: f64,
        seed: u64,
    ) -> Result<Self> {
        if tree_count == 0 {
            return Err(Error::Config("forest needs at least one tree".into()));
        }
        if !(variance_floor > 0.0) || !variance_floor.is_finite() {
            return Err(Error::Config(format!(
                "variance floor must be positive and finite, got {variance_floor}"
            )));
        }
        let (lo, hi) = target_range;
        if !lo.is_finite() || !hi.is_finite() || hi < lo {
            return Err(Error::Config(format!(
                "invalid target range [{lo}, {hi}] for leaf initialization"
            )));
        }
        let backbone = BackboneParams::init(input_dim, hidden, feature_dim, seed)?;
        let variance = variance_floor.max(target_variance);
        let mut trees = Vec::with_capacity(tree_count);
        for k in 0..tree_count {
            let topology =
                TreeTopology::with_sampled_features(depth, feature_dim, mixed_seed(seed, k))?;
            let mut leaf_rng = stream(seed, salt::LEAF_INIT, k as u64);
            let leaves = (0..topology.leaf_count())
                .map(|_| LeafParams {
                    mean: if hi > lo {
                        leaf_rng.random_range(lo..hi)
                    } else {
                        lo
                    },
                    variance,
                })
                .collect();
            trees.push(RegressionTree::new(topology, leaves)?);
        }
        Ok(ForestModel { backbone, trees })
    }

    /// Build a forest whose leaf means are bootstrap draws from `targets`.
    ///
    /// Seeding means by the empirical target distribution hands each region
    /// capacity proportional to its data: a sparse stretch of the target axis
    /// gets few leaves, so whichever leaf claims it must straddle a wide
    /// slice and report a wide variance. Uniform-over-range seeding instead
    /// gives the emptiest stretches the most capacity per sample, and the
    /// leaf update then shaves their variances below anything the data
    /// supports. The initial variance is the sample variance of `targets`
    /// (floored), matching [`ForestModel::init`].
    #[allow(clippy::too_many_arguments)]
    pub fn init_from_targets(
        input_dim: usize,
        hidden: &[usize],
        feature_dim: usize,
        tree_count: usize,
        depth: usize,
        targets: &[f64],
        variance_floor: f64,
        seed: u64,
    ) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::Config(
                "leaf initialization needs at least one target".into(),
            ));
        }
        if targets.iter().any(|t| !t.is_finite()) {
            return Err(Error::Config(
                "leaf initialization targets must be finite".into(),
            ));
        }
        let mean = targets.iter().sum::<f64>() / targets.len() as f64;
        let variance =
            targets.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / targets.len() as f64;
        let (lo, hi) = targets
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &t| {
                (lo.min(t), hi.max(t))
            });
        let mut model = Self::init(
            input_dim,
            hidden,
            feature_dim,
            tree_count,
            depth,
            (lo, hi),
            variance,
            variance_floor,
            seed,
        )?;
        for (k, tree) in model.trees.iter_mut().enumerate() {
            let mut leaf_rng = stream(seed, salt::LEAF_INIT, k as u64);
            for leaf in &mut tree.leaves {
                leaf.mean = targets[leaf_rng.random_range(0..targets.len())];
            }
        }
        Ok(model)
    }

    pub fn tree_count(&self) -> usize {
        self.trees.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.backbone.feature_dim()
    }
}

/// Per-tree seeds derive from the run seed and the tree index so tree count
/// changes don't reshuffle the backbone stream.
fn mixed_seed(seed: u64, tree: usize) -> u64 {
    seed ^ ((tree as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Routing probability of split node `node` for a feature vector.
pub fn split_probability(features: &[f64], tree: &TreeTopology, node: usize) -> Result<f64> {
    if node >= tree.split_count() {
        return Err(Error::Usage(format!(
            "split node {node} out of range for {} split nodes",
            tree.split_count()
        )));
    }
    let idx = tree.feature_index(node);
    if idx >= features.len() {
        return Err(Error::Usage(format!(
            "tree expects feature index {idx} but the vector has {} entries",
            features.len()
        )));
    }
    Ok(sigmoid(features[idx]))
}

/// Routing probabilities of every split node, in node order.
pub fn split_probabilities(features: &[f64], tree: &TreeTopology) -> Result<Vec<f64>> {
    (0..tree.split_count())
        .map(|n| split_probability(features, tree, n))
        .collect()
}

/// Probability of reaching each leaf: products of branch probabilities along
/// the root paths. Sums to 1 by construction.
pub fn leaf_reach_probabilities(features: &[f64], tree: &TreeTopology) -> Result<Vec<f64>> {
    let splits = split_probabilities(features, tree)?;
    Ok(leaf_probabilities_from_splits(&splits, tree.depth()))
}

/// Same sweep, starting from precomputed split probabilities.
pub fn leaf_probabilities_from_splits(splits: &[f64], depth: usize) -> Vec<f64> {
    let split_count = splits.len();
    let leaf_count = 1usize << (depth - 1);
    let mut reach = vec![0.0; split_count + leaf_count];
    reach[0] = 1.0;
    for (n, &s) in splits.iter().enumerate() {
        reach[2 * n + 1] = reach[n] * s;
        reach[2 * n + 2] = reach[n] * (1.0 - s);
    }
    reach.split_off(split_count)
}

/// Log-density of a Gaussian at `y`.
pub fn log_gaussian(y: f64, mean: f64, variance: f64) -> f64 {
    let d = y - mean;
    -0.5 * (LN_TWO_PI + variance.ln()) - d * d / (2.0 * variance)
}

/// Stable log(sum(exp(values))); minus infinity for an empty or all-`-inf`
/// input.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Log-density of one tree's mixture at `y`, floored at
/// [`LOG_DENSITY_FLOOR`]. The flag reports whether the floor was hit.
/// Zero-probability leaves are skipped rather than producing `ln 0`.
pub fn tree_log_density(y: f64, omega: &[f64], leaves: &[LeafParams]) -> (f64, bool) {
    let (log_p, _) = tree_posterior(y, omega, leaves);
    if log_p <= LOG_DENSITY_FLOOR {
        (LOG_DENSITY_FLOOR, true)
    } else {
        (log_p, false)
    }
}

/// Unfloored tree log-density together with the per-leaf posterior
/// (responsibility of each leaf for `y`). Shared by density evaluation and
/// the leaf updates so the two can never disagree.
pub(crate) fn tree_posterior(y: f64, omega: &[f64], leaves: &[LeafParams]) -> (f64, Vec<f64>) {
    debug_assert_eq!(omega.len(), leaves.len());
    let terms: Vec<f64> = omega
        .iter()
        .zip(leaves)
        .map(|(&w, leaf)| {
            if w > 0.0 {
                w.ln() + log_gaussian(y, leaf.mean, leaf.variance)
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let log_p = log_sum_exp(&terms);
    let posterior = if log_p.is_finite() {
        terms.iter().map(|t| (t - log_p).exp()).collect()
    } else {
        // Degenerate: every term underflowed. Fall back to the routing
        // weights so downstream updates still see a distribution.
        let total: f64 = omega.iter().sum();
        omega.iter().map(|&w| w / total).collect()
    };
    (log_p, posterior)
}

/// What one forward pass says about one labeled sample.
#[derive(Debug, Clone, Copy)]
pub struct SampleEval {
    /// Forest log-likelihood of the target, floored.
    pub log_likelihood: f64,
    /// Mixture-mean prediction.
    pub prediction: f64,
    /// Entropy lower bound, averaged over trees.
    pub entropy: f64,
    /// True when the floored log-likelihood was clamped.
    pub floored: bool,
}

/// Evaluate log-likelihood, prediction, and entropy in one backbone pass.
pub fn evaluate_sample(model: &ForestModel, input: &[f64], y: f64) -> Result<SampleEval> {
    if !y.is_finite() {
        return Err(Error::Input(format!("non-finite target {y}")));
    }
    let (features, _) = model.backbone.forward(input)?;
    let k = model.trees.len() as f64;
    let mut tree_logs = Vec::with_capacity(model.trees.len());
    let mut prediction = 0.0;
    let mut entropy = 0.0;
    for tree in &model.trees {
        let omega = leaf_reach_probabilities(&features, &tree.topology)?;
        let (log_p, _) = tree_posterior(y, &omega, &tree.leaves);
        tree_logs.push(log_p.max(LOG_DENSITY_FLOOR));
        prediction += mixture_mean(&omega, &tree.leaves) / k;
        entropy += tree_entropy(&omega, &tree.leaves) / k;
    }
    let raw = log_sum_exp(&tree_logs) - k.ln();
    let floored = raw <= LOG_DENSITY_FLOOR;
    Ok(SampleEval {
        log_likelihood: if floored { LOG_DENSITY_FLOOR } else { raw },
        prediction,
        entropy,
        floored,
    })
}

/// Forest log-likelihood of `(input, y)`: the average of the tree densities,
/// in log space, floored.
pub fn forest_log_likelihood(model: &ForestModel, input: &[f64], y: f64) -> Result<f64> {
    Ok(evaluate_sample(model, input, y)?.log_likelihood)
}

/// Point prediction: mean of the forest mixture.
pub fn predict(model: &ForestModel, input: &[f64]) -> Result<f64> {
    let (features, _) = model.backbone.forward(input)?;
    let mut total = 0.0;
    for tree in &model.trees {
        let omega = leaf_reach_probabilities(&features, &tree.topology)?;
        total += mixture_mean(&omega, &tree.leaves);
    }
    Ok(total / model.trees.len() as f64)
}

fn mixture_mean(omega: &[f64], leaves: &[LeafParams]) -> f64 {
    omega
        .iter()
        .zip(leaves)
        .map(|(&w, leaf)| w * leaf.mean)
        .sum()
}

/// Closed-form lower bound on the differential entropy of one tree's
/// mixture: the routing-weighted average of the per-leaf Gaussian entropies,
/// `sum_l omega_l * 0.5*(ln(2*pi*var_l) + 1)`. This is the conditional
/// entropy of the target given the leaf, hence never exceeds the true
/// mixture entropy; the two coincide when one leaf holds all the mass.
pub fn tree_entropy(omega: &[f64], leaves: &[LeafParams]) -> f64 {
    omega
        .iter()
        .zip(leaves)
        .map(|(&w, leaf)| w * 0.5 * (LN_TWO_PI + leaf.variance.ln() + 1.0))
        .sum()
}

/// Entropy lower bound for a whole input: average of the tree bounds.
pub fn forest_entropy(model: &ForestModel, input: &[f64]) -> Result<f64> {
    let (features, _) = model.backbone.forward(input)?;
    let mut total = 0.0;
    for tree in &model.trees {
        let omega = leaf_reach_probabilities(&features, &tree.topology)?;
        total += tree_entropy(&omega, &tree.leaves);
    }
    Ok(total / model.trees.len() as f64)
}

/// Monte-Carlo estimate of the true mixture entropy `E[-ln p(y)]`, returned
/// as `(estimate, standard_error)`. Draws from the mixture itself, so it is
/// an unbiased reference for checking the closed-form lower bound.
pub fn mc_entropy_oracle(
    omega: &[f64],
    leaves: &[LeafParams],
    n_samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if n_samples < 1000 {
        return Err(Error::Usage(format!(
            "Monte-Carlo entropy needs >= 1000 samples, got {n_samples}"
        )));
    }
    if omega.len() != leaves.len() || omega.is_empty() {
        return Err(Error::Usage(
            "mixture weights and leaves must align and be non-empty".into(),
        ));
    }
    let total: f64 = omega.iter().sum();
    if (total - 1.0).abs() > 1e-6 || omega.iter().any(|&w| !(0.0..=1.0).contains(&w)) {
        return Err(Error::Usage(format!(
            "mixture weights must form a distribution, sum is {total}"
        )));
    }
    let mut cumulative = Vec::with_capacity(omega.len());
    let mut acc = 0.0;
    for &w in omega {
        acc += w;
        cumulative.push(acc);
    }
    let mut rng = stream(seed, salt::MC_ORACLE, 0);
    // Welford accumulation of -ln p over mixture draws.
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for i in 0..n_samples {
        let u: f64 = rng.random_range(0.0..total);
        let comp = cumulative.partition_point(|&c| c <= u).min(omega.len() - 1);
        let z: f64 = rng.sample(StandardNormal);
        let y = leaves[comp].mean + z * leaves[comp].variance.sqrt();
        let (log_p, _) = tree_posterior(y, omega, leaves);
        let value = -log_p;
        let delta = value - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (value - mean);
    }
    let variance = m2 / (n_samples - 1) as f64;
    Ok((mean, (variance / n_samples as f64).sqrt()))
}

// --- model file -------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerFile {
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TreeFile {
    phi: Vec<usize>,
    leaves: Vec<LeafParams>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    layers: Vec<LayerFile>,
    feature_dim: usize,
    trees: Vec<TreeFile>,
}

impl ForestModel {
    /// Serialize to the model-file JSON layout. Layer activations are
    /// positional (hidden sigmoid, final identity) and therefore not stored.
    pub fn to_json(&self) -> String {
        let file = ModelFile {
            layers: self
                .backbone
                .layers()
                .iter()
                .map(|l| LayerFile {
                    w: l.weights.clone(),
                    b: l.bias.clone(),
                })
                .collect(),
            feature_dim: self.backbone.feature_dim(),
            trees: self
                .trees
                .iter()
                .map(|t| TreeFile {
                    phi: t.topology.feature_indices().to_vec(),
                    leaves: t.leaves.clone(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("model serialization cannot fail")
    }

    /// Parse and validate the model-file JSON layout.
    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("model file: {e}")))?;
        if file.layers.is_empty() {
            return Err(Error::Config("model file has no layers".into()));
        }
        let last = file.layers.len() - 1;
        let layers: Vec<Layer> = file
            .layers
            .into_iter()
            .enumerate()
            .map(|(i, l)| Layer {
                weights: l.w,
                bias: l.b,
                activation: if i == last {
                    crate::backbone::Activation::Identity
                } else {
                    crate::backbone::Activation::Sigmoid
                },
            })
            .collect();
        let backbone = BackboneParams::new(layers)?;
        if backbone.feature_dim() != file.feature_dim {
            return Err(Error::Config(format!(
                "feature_dim {} does not match final layer width {}",
                file.feature_dim,
                backbone.feature_dim()
            )));
        }
        if file.trees.is_empty() {
            return Err(Error::Config("model file has no trees".into()));
        }
        let trees = file
            .trees
            .into_iter()
            .map(|t| {
                let leaf_count = t.leaves.len();
                if leaf_count == 0 || !leaf_count.is_power_of_two() {
                    return Err(Error::Config(format!(
                        "tree has {leaf_count} leaves; must be a power of two"
                    )));
                }
                let depth = leaf_count.trailing_zeros() as usize + 1;
                let topology = TreeTopology::new(depth, t.phi, file.feature_dim)?;
                RegressionTree::new(topology, t.leaves)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ForestModel { backbone, trees })
    }

    /// Write the model file.
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    /// Read and validate a model file.
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
