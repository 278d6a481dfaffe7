//! Self-paced sample selection with an uncertainty bonus.
//!
//! Each pace scores every training sample as
//! `score_i = log_likelihood_i + gamma * entropy_i` and admits the
//! best-scoring ones. A growing per-pace quota takes the schedule from an
//! initial fraction to the whole set; `gamma` decays geometrically and is
//! forced to zero at the final pace. Admission is expressed through a
//! threshold `lambda` (hard weights: `v = 1` iff `score > -lambda`) or a
//! threshold pair `lambda > lambda' > 0` (soft weights: 1 above `-lambda'`,
//! 0 below `-lambda`, and a hyperbolic ramp in between).
//!
//! Thresholds are *calibrated from the quota*: samples are ranked by score
//! (ties broken by position), the boundary is placed halfway between the
//! last admitted and first rejected score, and the ranked index sets are
//! returned alongside. The sets are authoritative — when scores tie exactly
//! at a boundary no scalar threshold can reproduce an exact count, so
//! weights are assigned from the sets while the thresholds remain the
//! faithful scalar description everywhere else. If a boundary lands at or
//! below zero, a recorded shift is added to every score so the positivity
//! constraint on the thresholds holds; selection is shift-invariant.

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Sample};
use crate::error::{Error, Result};

/// Knobs of the pace schedule and curriculum step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PaceConfig {
    /// Total number of paces; the last admits every sample.
    pub pace_count: usize,
    /// Fraction admitted at the first pace.
    pub initial_fraction: f64,
    /// Fraction of the admitted set placed in the soft band.
    pub soft_fraction: f64,
    /// Uncertainty bonus at the first pace.
    pub gamma_initial: f64,
    /// Geometric decay of the bonus per pace.
    pub gamma_decay: f64,
    /// Number of highest-entropy samples duplicated each pace (0 disables).
    pub curriculum_count: usize,
    /// Copies appended per duplicated sample.
    pub curriculum_copies: usize,
    /// Alternative curriculum rule: duplicate samples with entropy strictly
    /// above this value. Mutually exclusive with `curriculum_count`.
    pub curriculum_threshold: Option<f64>,
}

impl Default for PaceConfig {
    fn default() -> Self {
        PaceConfig {
            pace_count: 10,
            initial_fraction: 0.5,
            soft_fraction: 0.10,
            gamma_initial: 15.0,
            gamma_decay: 0.5,
            // Each pace re-emphasizes the 30 most uncertain samples; larger
            // counts keep shrinking rare-region error but start costing
            // overall accuracy (the duplicates crowd the gradient).
            curriculum_count: 30,
            curriculum_copies: 1,
            curriculum_threshold: None,
        }
    }
}

impl PaceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pace_count == 0 {
            return Err(Error::Config("pace_count must be >= 1".into()));
        }
        if !(self.initial_fraction > 0.0 && self.initial_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "initial_fraction must be in (0, 1], got {}",
                self.initial_fraction
            )));
        }
        if !(self.soft_fraction > 0.0 && self.soft_fraction < 1.0) {
            return Err(Error::Config(format!(
                "soft_fraction must be in (0, 1), got {}",
                self.soft_fraction
            )));
        }
        if !self.gamma_initial.is_finite() || self.gamma_initial < 0.0 {
            return Err(Error::Config(format!(
                "gamma_initial must be finite and >= 0, got {}",
                self.gamma_initial
            )));
        }
        if !(0.0..=1.0).contains(&self.gamma_decay) {
            return Err(Error::Config(format!(
                "gamma_decay must be in [0, 1], got {}",
                self.gamma_decay
            )));
        }
        if self.curriculum_copies == 0 {
            return Err(Error::Config("curriculum_copies must be >= 1".into()));
        }
        if let Some(t) = self.curriculum_threshold {
            if !t.is_finite() {
                return Err(Error::Config("curriculum_threshold must be finite".into()));
            }
            if self.curriculum_count > 0 {
                return Err(Error::Config(
                    "set curriculum_count or curriculum_threshold, not both".into(),
                ));
            }
        }
        Ok(())
    }
}

/// How admitted samples are weighted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightScheme {
    /// Binary weights from a single threshold.
    Hard,
    /// Fractional weights in a band between two thresholds.
    Soft,
}

/// Per-sample selection scores: `log_likelihood + gamma * entropy`.
pub fn selection_scores(
    log_likelihoods: &[f64],
    entropies: &[f64],
    gamma: f64,
) -> Result<Vec<f64>> {
    if log_likelihoods.len() != entropies.len() {
        return Err(Error::Usage(format!(
            "{} log-likelihoods vs {} entropies",
            log_likelihoods.len(),
            entropies.len()
        )));
    }
    if !gamma.is_finite() || gamma < 0.0 {
        return Err(Error::Usage(format!(
            "gamma must be finite and >= 0, got {gamma}"
        )));
    }
    if log_likelihoods
        .iter()
        .chain(entropies)
        .any(|v| !v.is_finite())
    {
        return Err(Error::Usage(
            "scores need finite log-likelihoods and entropies".into(),
        ));
    }
    Ok(log_likelihoods
        .iter()
        .zip(entropies)
        .map(|(&ll, &h)| ll + gamma * h)
        .collect())
}

/// Binary admission: weight 1 exactly when `score > -lambda`.
pub fn hard_weights(scores: &[f64], lambda: f64) -> Vec<f64> {
    scores
        .iter()
        .map(|&s| if s > -lambda { 1.0 } else { 0.0 })
        .collect()
}

/// Normalizer of the soft ramp; requires `lambda > lambda_prime > 0`.
pub fn zeta(lambda: f64, lambda_prime: f64) -> f64 {
    1.0 / (1.0 / lambda_prime - 1.0 / lambda)
}

/// Soft admission weight: 1 at or above `-lambda_prime`, 0 at or below
/// `-lambda`, and `-zeta/score - zeta/lambda` in between. Continuous at both
/// edges and non-decreasing in the score.
pub fn soft_weight(score: f64, lambda: f64, lambda_prime: f64) -> f64 {
    if score >= -lambda_prime {
        1.0
    } else if score <= -lambda {
        0.0
    } else {
        let z = zeta(lambda, lambda_prime);
        (-z / score - z / lambda).clamp(0.0, 1.0)
    }
}

/// [`soft_weight`] over a slice.
pub fn soft_weights(scores: &[f64], lambda: f64, lambda_prime: f64) -> Vec<f64> {
    scores
        .iter()
        .map(|&s| soft_weight(s, lambda, lambda_prime))
        .collect()
}

/// Indices ranked by score descending, ties broken by lower index first.
fn rank_by_score(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("scores validated finite")
            .then(a.cmp(&b))
    });
    order
}

fn check_scores(scores: &[f64]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::Usage(
            "cannot calibrate on an empty score set".into(),
        ));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Usage("scores must be finite".into()));
    }
    Ok(())
}

/// An admission threshold with its authoritative index set (rank order).
#[derive(Debug, Clone)]
pub struct LambdaCut {
    pub lambda: f64,
    pub selected: Vec<usize>,
}

/// Calibrate `lambda` so exactly `ceil(target_fraction * n)` samples are
/// admitted: the threshold sits halfway between the last admitted and the
/// first rejected score (one below the minimum when everything is admitted).
pub fn calibrate_lambda(scores: &[f64], target_fraction: f64) -> Result<LambdaCut> {
    if !(target_fraction > 0.0 && target_fraction <= 1.0) {
        return Err(Error::Usage(format!(
            "target fraction must be in (0, 1], got {target_fraction}"
        )));
    }
    let m = (target_fraction * scores.len() as f64).ceil() as usize;
    calibrate_lambda_count(scores, m.clamp(1, scores.len()))
}

/// [`calibrate_lambda`] with an explicit admission count.
pub fn calibrate_lambda_count(scores: &[f64], count: usize) -> Result<LambdaCut> {
    check_scores(scores)?;
    if count == 0 || count > scores.len() {
        return Err(Error::Usage(format!(
            "admission count {count} out of range for {} samples",
            scores.len()
        )));
    }
    let order = rank_by_score(scores);
    let boundary = scores[order[count - 1]];
    let lambda = if count < scores.len() {
        -0.5 * (boundary + scores[order[count]])
    } else {
        -(boundary - 1.0)
    };
    Ok(LambdaCut {
        lambda,
        selected: order[..count].to_vec(),
    })
}

/// The soft band: its threshold and the (rank-ordered) indices inside it.
#[derive(Debug, Clone)]
pub struct SoftBand {
    pub lambda_prime: f64,
    pub soft: Vec<usize>,
}

/// Place `lambda_prime` so the lowest-ranked `ceil(soft_fraction * m)` of
/// the admitted samples fall in the fractional band.
pub fn calibrate_lambda_prime(
    scores: &[f64],
    cut: &LambdaCut,
    soft_fraction: f64,
) -> Result<SoftBand> {
    check_scores(scores)?;
    if !(soft_fraction > 0.0 && soft_fraction < 1.0) {
        return Err(Error::Usage(format!(
            "soft fraction must be in (0, 1), got {soft_fraction}"
        )));
    }
    let m = cut.selected.len();
    if m == 0 {
        return Err(Error::Usage(
            "soft band needs a non-empty admitted set".into(),
        ));
    }
    let band = ((soft_fraction * m as f64).ceil() as usize).clamp(1, m);
    let soft = cut.selected[m - band..].to_vec();
    let lambda_prime = if band < m {
        let last_full = scores[cut.selected[m - band - 1]];
        let first_soft = scores[cut.selected[m - band]];
        -0.5 * (last_full + first_soft)
    } else {
        // Whole admitted set is fractional: the threshold sits above the top
        // score.
        -(scores[cut.selected[0]] + 1.0)
    };
    Ok(SoftBand { lambda_prime, soft })
}

/// A fully calibrated pace selection.
#[derive(Debug, Clone)]
pub struct Calibration {
    pub lambda: f64,
    pub lambda_prime: Option<f64>,
    pub zeta: Option<f64>,
    /// Offset added to every score before thresholding so that
    /// `lambda > lambda_prime > 0`; zero when no shift was needed.
    pub score_shift: f64,
    /// Per-sample weights, assigned from the ranked sets.
    pub weights: Vec<f64>,
    /// Admitted indices, best first.
    pub selected: Vec<usize>,
    /// The softly weighted suffix of `selected` (empty under [`WeightScheme::Hard`]).
    pub soft: Vec<usize>,
}

/// Calibrate thresholds for an admission count and produce weights.
pub fn calibrate_selection(
    scores: &[f64],
    count: usize,
    scheme: WeightScheme,
    soft_fraction: f64,
) -> Result<Calibration> {
    let cut = calibrate_lambda_count(scores, count)?;
    let mut weights = vec![0.0; scores.len()];
    match scheme {
        WeightScheme::Hard => {
            let score_shift = if cut.lambda > 0.0 {
                0.0
            } else {
                cut.lambda - 1.0
            };
            for &i in &cut.selected {
                weights[i] = 1.0;
            }
            Ok(Calibration {
                lambda: cut.lambda - score_shift,
                lambda_prime: None,
                zeta: None,
                score_shift,
                weights,
                selected: cut.selected,
                soft: Vec::new(),
            })
        }
        WeightScheme::Soft => {
            let band = calibrate_lambda_prime(scores, &cut, soft_fraction)?;
            let score_shift = if band.lambda_prime > 0.0 {
                0.0
            } else {
                band.lambda_prime - 1.0
            };
            let mut lambda = cut.lambda - score_shift;
            let lambda_prime = band.lambda_prime - score_shift;
            if lambda <= lambda_prime {
                // Complete tie across both boundaries; any larger lambda
                // describes the same (set-assigned) weights.
                lambda = lambda_prime + 1.0;
            }
            let z = zeta(lambda, lambda_prime);
            let full = cut.selected.len() - band.soft.len();
            for &i in &cut.selected[..full] {
                weights[i] = 1.0;
            }
            for &i in &band.soft {
                weights[i] = soft_weight(scores[i] + score_shift, lambda, lambda_prime);
            }
            Ok(Calibration {
                lambda,
                lambda_prime: Some(lambda_prime),
                zeta: Some(z),
                score_shift,
                weights,
                selected: cut.selected,
                soft: band.soft,
            })
        }
    }
}

/// Admission fraction at a (1-based) pace; exactly 1 at the final pace.
pub fn fraction_for_pace(config: &PaceConfig, pace_index: usize) -> f64 {
    if pace_index >= config.pace_count {
        return 1.0;
    }
    let p = (pace_index - 1) as f64;
    config.initial_fraction + p * (1.0 - config.initial_fraction) / (config.pace_count - 1) as f64
}

/// Admission count at a pace. Evaluated as
/// `ceil(n*f0 + n*(p-1)*(1-f0)/(P-1))` — the count-domain form of
/// [`fraction_for_pace`] times `n`, with the multiplication by `n` done
/// before the division so the evenly divisible cases come out exact.
pub fn selected_count_for_pace(config: &PaceConfig, pace_index: usize, n: usize) -> usize {
    if pace_index >= config.pace_count {
        return n;
    }
    let nf = n as f64;
    let p = (pace_index - 1) as f64;
    let exact = nf * config.initial_fraction
        + nf * p * (1.0 - config.initial_fraction) / (config.pace_count - 1) as f64;
    (exact.ceil() as usize).clamp(1, n)
}

/// Uncertainty bonus at a pace: geometric decay, zero at the final pace.
pub fn gamma_for_pace(config: &PaceConfig, pace_index: usize) -> f64 {
    if pace_index >= config.pace_count {
        return 0.0;
    }
    config.gamma_initial * config.gamma_decay.powi((pace_index - 1) as i32)
}

/// Everything one pace's selection decided.
#[derive(Debug, Clone, Serialize)]
pub struct SelectionState {
    /// 1-based pace number.
    pub pace_index: usize,
    pub scheme: WeightScheme,
    /// The bonus the scores for this pace were computed with.
    pub gamma: f64,
    pub lambda: f64,
    pub lambda_prime: Option<f64>,
    pub zeta: Option<f64>,
    pub score_shift: f64,
    pub n_selected: usize,
    pub n_soft: usize,
    /// Weight per sample, aligned with the scored set.
    pub weights: Vec<f64>,
}

impl SelectionState {
    /// Calibrate the first pace. `scores` must have been computed with
    /// `gamma_for_pace(config, 1)`.
    pub fn first_pace(config: &PaceConfig, scores: &[f64], scheme: WeightScheme) -> Result<Self> {
        Self::for_pace(config, 1, scores, scheme)
    }

    fn for_pace(
        config: &PaceConfig,
        pace_index: usize,
        scores: &[f64],
        scheme: WeightScheme,
    ) -> Result<Self> {
        config.validate()?;
        let count = selected_count_for_pace(config, pace_index, scores.len());
        let cal = calibrate_selection(scores, count, scheme, config.soft_fraction)?;
        Ok(SelectionState {
            pace_index,
            scheme,
            gamma: gamma_for_pace(config, pace_index),
            lambda: cal.lambda,
            lambda_prime: cal.lambda_prime,
            zeta: cal.zeta,
            score_shift: cal.score_shift,
            n_selected: cal.selected.len(),
            n_soft: cal.soft.len(),
            weights: cal.weights,
        })
    }
}

/// Move to the next pace, recalibrating on freshly computed `scores` (which
/// must use `gamma_for_pace(config, state.pace_index + 1)`). Errors once the
/// schedule is exhausted.
pub fn advance_pace(
    state: &SelectionState,
    config: &PaceConfig,
    scores: &[f64],
) -> Result<SelectionState> {
    if state.pace_index >= config.pace_count {
        return Err(Error::Schedule(format!(
            "pace {} is the last of {}; cannot advance",
            state.pace_index, config.pace_count
        )));
    }
    SelectionState::for_pace(config, state.pace_index + 1, scores, state.scheme)
}

/// Append duplicates of the most uncertain samples. Selection is by entropy
/// rank (ties broken by lower id) when `curriculum_count` is set, or by the
/// strict threshold when `curriculum_threshold` is. Duplicates keep the
/// original order of their sources, receive fresh ids above the current
/// maximum, and link back through `origin_id`.
pub fn curriculum_reconstruction(
    dataset: &Dataset,
    entropies: &[f64],
    config: &PaceConfig,
) -> Result<Dataset> {
    config.validate()?;
    if entropies.len() != dataset.len() {
        return Err(Error::Usage(format!(
            "{} entropies for {} samples",
            entropies.len(),
            dataset.len()
        )));
    }
    if entropies.iter().any(|h| !h.is_finite()) {
        return Err(Error::Usage("entropies must be finite".into()));
    }
    let mut chosen: Vec<usize> = match config.curriculum_threshold {
        Some(threshold) => (0..dataset.len())
            .filter(|&i| entropies[i] > threshold)
            .collect(),
        None => {
            if config.curriculum_count > dataset.len() {
                return Err(Error::Usage(format!(
                    "cannot duplicate {} of {} samples",
                    config.curriculum_count,
                    dataset.len()
                )));
            }
            let mut order: Vec<usize> = (0..dataset.len()).collect();
            order.sort_by(|&a, &b| {
                entropies[b]
                    .partial_cmp(&entropies[a])
                    .expect("validated finite")
                    .then(dataset.samples[a].id.cmp(&dataset.samples[b].id))
            });
            order.truncate(config.curriculum_count);
            order
        }
    };
    chosen.sort_unstable();
    let mut next_id = dataset
        .samples
        .iter()
        .map(|s| s.id)
        .max()
        .map_or(0, |m| m + 1);
    let mut samples = dataset.samples.clone();
    for &i in &chosen {
        let source = &dataset.samples[i];
        for _ in 0..config.curriculum_copies {
            samples.push(Sample {
                id: next_id,
                features: source.features.clone(),
                target: source.target,
                origin_id: Some(source.id),
            });
            next_id += 1;
        }
    }
    Ok(Dataset { samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn default_pace() -> PaceConfig {
        PaceConfig::default()
    }

    #[test]
    fn scores_combine_likelihood_and_entropy() {
        let s = selection_scores(&[-3.0, -1.0], &[2.0, 0.5], 15.0).unwrap();
        assert_eq!(s, vec![27.0, 6.5]);
        let no_bonus = selection_scores(&[-3.0, -1.0], &[2.0, 0.5], 0.0).unwrap();
        assert_eq!(no_bonus, vec![-3.0, -1.0]);
        assert!(selection_scores(&[1.0], &[1.0, 2.0], 1.0).is_err());
        assert!(selection_scores(&[f64::NAN], &[1.0], 1.0).is_err());
    }

    #[test]
    fn hard_weights_use_a_strict_inequality() {
        let w = hard_weights(&[-2.0, -1.0, 0.0], 1.0);
        assert_eq!(w, vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn soft_weight_hand_case_and_boundaries() {
        // lambda 2, lambda' 1: zeta = 2, and the midpoint score -1.5 maps to 1/3.
        assert!((zeta(2.0, 1.0) - 2.0).abs() < 1e-15);
        assert!((soft_weight(-1.5, 2.0, 1.0) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(soft_weight(-1.0, 2.0, 1.0), 1.0);
        assert_eq!(soft_weight(-2.0, 2.0, 1.0), 0.0);
        // Continuity at both edges.
        assert!((soft_weight(-1.0 - 1e-12, 2.0, 1.0) - 1.0).abs() < 1e-9);
        assert!(soft_weight(-2.0 + 1e-12, 2.0, 1.0) < 1e-9);
    }

    #[test]
    fn soft_weight_is_monotone_in_the_score() {
        let mut rng = crate::rng::stream(0, 0xCC, 0);
        for _ in 0..200 {
            let lp = rng.random_range(0.1..5.0);
            let l = lp + rng.random_range(0.1..5.0);
            let mut prev = -1.0;
            for k in 0..=1000 {
                let s = -l - 0.5 + (l - lp + 1.0) * k as f64 / 1000.0;
                let v = soft_weight(s, l, lp);
                assert!(v >= prev - 1e-12, "not monotone at score {s}");
                assert!((0.0..=1.0).contains(&v));
                prev = v;
            }
        }
    }

    #[test]
    fn zeta_satisfies_its_defining_identity() {
        let mut rng = crate::rng::stream(1, 0xCC, 0);
        for _ in 0..100 {
            let lp = rng.random_range(0.01..10.0);
            let l = lp + rng.random_range(0.01..10.0);
            let z = zeta(l, lp);
            assert!((z * (1.0 / lp - 1.0 / l) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn calibration_admits_exact_counts_even_with_ties() {
        let scores = vec![3.0, 1.0, 1.0, 1.0, -2.0];
        let cut = calibrate_lambda(&scores, 0.5).unwrap();
        assert_eq!(cut.selected.len(), 3); // ceil(0.5 * 5)
        assert_eq!(cut.selected, vec![0, 1, 2]); // ties broken by index
                                                 // Boundary midpoint between the tied scores is 1, so lambda = -1.
        assert_eq!(cut.lambda, -1.0);
        let all = calibrate_lambda(&scores, 1.0).unwrap();
        assert_eq!(all.selected.len(), 5);
        assert!(all.lambda > 2.0); // strictly admits the minimum score
        assert_eq!(hard_weights(&scores, all.lambda), vec![1.0; 5]);
    }

    #[test]
    fn calibrated_threshold_reproduces_the_set_without_ties() {
        let mut rng = crate::rng::stream(2, 0xCC, 0);
        for trial in 0..50 {
            let n = rng.random_range(3..40);
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(-30.0..10.0)).collect();
            let count = rng.random_range(1..=n);
            let cut = calibrate_lambda_count(&scores, count).unwrap();
            let w = hard_weights(&scores, cut.lambda);
            let admitted: Vec<usize> = (0..n).filter(|&i| w[i] == 1.0).collect();
            let mut expected = cut.selected.clone();
            expected.sort_unstable();
            assert_eq!(admitted, expected, "trial {trial}");
        }
    }

    #[test]
    fn soft_calibration_sizes_the_band_by_ceil() {
        let scores: Vec<f64> = (0..20).map(|i| -(i as f64)).collect();
        let cal = calibrate_selection(&scores, 10, WeightScheme::Soft, 0.10).unwrap();
        assert_eq!(cal.selected.len(), 10);
        assert_eq!(cal.soft.len(), 1); // ceil(0.1 * 10)
        assert_eq!(cal.soft, vec![9]);
        // Tiny positive fractions still produce a one-sample band.
        let cal = calibrate_selection(&scores, 10, WeightScheme::Soft, 1e-9).unwrap();
        assert_eq!(cal.soft.len(), 1);
        // Weights: full set 1, soft fractional, rest 0.
        for &i in &cal.selected[..9] {
            assert_eq!(cal.weights[i], 1.0);
        }
        let soft_w = cal.weights[cal.soft[0]];
        assert!(soft_w > 0.0 && soft_w < 1.0, "soft weight {soft_w}");
        for i in 10..20 {
            assert_eq!(cal.weights[i], 0.0);
        }
    }

    #[test]
    fn positive_scores_trigger_a_recorded_shift() {
        // All scores positive: raw thresholds would be negative.
        let scores = vec![27.0, 20.0, 13.0, 6.0];
        let cal = calibrate_selection(&scores, 2, WeightScheme::Soft, 0.5).unwrap();
        assert!(cal.score_shift < 0.0);
        let lp = cal.lambda_prime.unwrap();
        assert!(cal.lambda > lp && lp > 0.0, "{} > {lp} > 0", cal.lambda);
        assert_eq!(cal.weights[0], 1.0);
        assert!(cal.weights[1] > 0.0 && cal.weights[1] < 1.0);
        assert_eq!(cal.weights[2], 0.0);
        // Hard scheme shifts too.
        let hard = calibrate_selection(&scores, 2, WeightScheme::Hard, 0.5).unwrap();
        assert!(hard.lambda > 0.0);
        assert_eq!(hard.weights, vec![1.0, 1.0, 0.0, 0.0]);
        // And the shifted thresholds still reproduce the set on shifted scores.
        let shifted: Vec<f64> = scores.iter().map(|s| s + hard.score_shift).collect();
        assert_eq!(hard_weights(&shifted, hard.lambda), hard.weights);
    }

    #[test]
    fn fully_tied_scores_still_calibrate() {
        let scores = vec![5.0; 6];
        let cal = calibrate_selection(&scores, 3, WeightScheme::Soft, 0.34).unwrap();
        assert_eq!(cal.selected, vec![0, 1, 2]);
        assert_eq!(cal.soft, vec![1, 2]); // ceil(0.34 * 3) = 2
        let lp = cal.lambda_prime.unwrap();
        assert!(cal.lambda > lp && lp > 0.0);
        assert_eq!(&cal.weights[3..], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn schedule_counts_are_integer_exact() {
        let config = default_pace();
        let counts: Vec<usize> = (1..=10)
            .map(|p| selected_count_for_pace(&config, p, 180))
            .collect();
        assert_eq!(
            counts,
            vec![90, 100, 110, 120, 130, 140, 150, 160, 170, 180]
        );
        let counts: Vec<usize> = (1..=10)
            .map(|p| selected_count_for_pace(&config, p, 2000))
            .collect();
        assert_eq!(
            counts,
            vec![1000, 1112, 1223, 1334, 1445, 1556, 1667, 1778, 1889, 2000]
        );
    }

    #[test]
    fn fractions_interpolate_and_end_at_one() {
        let config = default_pace();
        assert_eq!(fraction_for_pace(&config, 1), 0.5);
        assert_eq!(fraction_for_pace(&config, 10), 1.0);
        let single = PaceConfig {
            pace_count: 1,
            ..config
        };
        assert_eq!(fraction_for_pace(&single, 1), 1.0);
    }

    #[test]
    fn gamma_halves_and_ends_at_zero() {
        let config = default_pace();
        assert_eq!(gamma_for_pace(&config, 1), 15.0);
        assert_eq!(gamma_for_pace(&config, 2), 7.5);
        assert_eq!(gamma_for_pace(&config, 3), 3.75);
        assert_eq!(gamma_for_pace(&config, 10), 0.0);
        let three = PaceConfig {
            pace_count: 3,
            ..config
        };
        assert_eq!(gamma_for_pace(&three, 3), 0.0);
    }

    #[test]
    fn paces_advance_until_exhausted() {
        let config = PaceConfig {
            pace_count: 3,
            curriculum_count: 0,
            ..default_pace()
        };
        let scores: Vec<f64> = (0..12).map(|i| -(i as f64)).collect();
        let first = SelectionState::first_pace(&config, &scores, WeightScheme::Hard).unwrap();
        assert_eq!(first.pace_index, 1);
        assert_eq!(first.n_selected, 6);
        assert_eq!(first.gamma, 15.0);
        let second = advance_pace(&first, &config, &scores).unwrap();
        assert_eq!(second.n_selected, 9);
        assert_eq!(second.gamma, 7.5);
        let third = advance_pace(&second, &config, &scores).unwrap();
        assert_eq!(third.n_selected, 12);
        assert_eq!(third.gamma, 0.0);
        assert_eq!(third.weights, vec![1.0; 12]);
        let err = advance_pace(&third, &config, &scores).unwrap_err();
        assert!(matches!(err, Error::Schedule(_)));
    }

    fn toy_dataset(targets: &[f64]) -> Dataset {
        Dataset::new(
            targets
                .iter()
                .enumerate()
                .map(|(i, &t)| Sample {
                    id: i as u64 * 10, // non-contiguous ids on purpose
                    features: vec![t],
                    target: t,
                    origin_id: None,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn curriculum_duplicates_top_entropy_samples() {
        let data = toy_dataset(&[1.0, 2.0, 3.0, 4.0]);
        let config = PaceConfig {
            curriculum_count: 2,
            ..default_pace()
        };
        let out = curriculum_reconstruction(&data, &[0.5, 2.0, 0.1, 2.0], &config).unwrap();
        assert_eq!(out.len(), 6);
        // Originals untouched and in order.
        assert_eq!(&out.samples[..4], &data.samples[..]);
        // Duplicates of ids 10 and 30 (the two entropy-2.0 samples), fresh
        // ids above the previous maximum, linked to their sources.
        let dup_a = &out.samples[4];
        let dup_b = &out.samples[5];
        assert_eq!(dup_a.origin_id, Some(10));
        assert_eq!(dup_b.origin_id, Some(30));
        assert_eq!(dup_a.id, 31);
        assert_eq!(dup_b.id, 32);
        assert_eq!(dup_a.target, 2.0);
        out.validate().unwrap();
    }

    #[test]
    fn curriculum_threshold_mode_and_disabled_mode() {
        let data = toy_dataset(&[1.0, 2.0, 3.0]);
        let threshold = PaceConfig {
            curriculum_count: 0,
            curriculum_threshold: Some(1.0),
            ..default_pace()
        };
        let out = curriculum_reconstruction(&data, &[1.0, 1.5, 0.2], &threshold).unwrap();
        assert_eq!(out.len(), 4); // only the strictly-above sample
        assert_eq!(out.samples[3].origin_id, Some(10));
        let disabled = PaceConfig {
            curriculum_count: 0,
            ..default_pace()
        };
        let same = curriculum_reconstruction(&data, &[1.0, 1.5, 0.2], &disabled).unwrap();
        assert_eq!(same, data);
    }

    #[test]
    fn curriculum_copies_multiply_duplicates() {
        let data = toy_dataset(&[1.0, 2.0]);
        let config = PaceConfig {
            curriculum_count: 1,
            curriculum_copies: 3,
            ..default_pace()
        };
        let out = curriculum_reconstruction(&data, &[2.0, 1.0], &config).unwrap();
        assert_eq!(out.len(), 5);
        for dup in &out.samples[2..] {
            assert_eq!(dup.origin_id, Some(0));
        }
        out.validate().unwrap();
    }

    #[test]
    fn curriculum_rejects_inconsistent_requests() {
        let data = toy_dataset(&[1.0, 2.0]);
        let too_many = PaceConfig {
            curriculum_count: 3,
            ..default_pace()
        };
        assert!(curriculum_reconstruction(&data, &[1.0, 2.0], &too_many).is_err());
        assert!(curriculum_reconstruction(&data, &[1.0], &default_pace()).is_err());
        let both = PaceConfig {
            curriculum_count: 1,
            curriculum_threshold: Some(0.5),
            ..default_pace()
        };
        assert!(both.validate().is_err());
    }
}
