//! Datasets: in-memory samples, CSV persistence, train/test splitting, and
//! the imbalanced synthetic benchmark generator.
//!
//! The synthetic task hides a scalar target behind a bank of phase-shifted
//! sinusoids plus noise. Targets come from a truncated Gaussian bulk around
//! the middle of the range with a small uniform mass at the top end, so the
//! upper region is heavily underrepresented — the regime the self-paced
//! entropy term is supposed to help with.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{salt, stream};

/// One labeled example. `origin_id` is set on curriculum duplicates and
/// points at the sample they were copied from; it is not persisted to CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub features: Vec<f64>,
    pub target: f64,
    pub origin_id: Option<u64>,
}

/// An ordered collection of samples with consistent feature width.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        let ds = Dataset { samples };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Feature width; zero for an empty dataset.
    pub fn feature_dim(&self) -> usize {
        self.samples.first().map_or(0, |s| s.features.len())
    }

    pub fn targets(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.target).collect()
    }

    /// Check id uniqueness, width consistency, and finiteness.
    pub fn validate(&self) -> Result<()> {
        let dim = self.feature_dim();
        let mut seen = HashSet::with_capacity(self.samples.len());
        for sample in &self.samples {
            if !seen.insert(sample.id) {
                return Err(Error::Input(format!("duplicate sample id {}", sample.id)));
            }
            if sample.features.len() != dim {
                return Err(Error::Input(format!(
                    "sample {} has {} features, expected {dim}",
                    sample.id,
                    sample.features.len()
                )));
            }
            if !sample.target.is_finite() || sample.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::Input(format!(
                    "sample {} contains a non-finite value",
                    sample.id
                )));
            }
        }
        Ok(())
    }
}

/// Parameters of the synthetic benchmark.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    /// Number of samples.
    pub n: usize,
    /// Width of the sinusoid feature bank.
    pub feature_dim: usize,
    /// Mean of the majority (bulk) target component.
    pub majority_mean: f64,
    /// Standard deviation of the bulk component.
    pub majority_sd: f64,
    /// Bulk draws outside `[target_min, target_max]` are rejected.
    pub target_min: f64,
    pub target_max: f64,
    /// The rare component is uniform on `[rare_min, rare_max]`.
    pub rare_min: f64,
    pub rare_max: f64,
    /// Probability that a sample comes from the rare component.
    pub rare_mass: f64,
    /// Standard deviation of the additive feature noise.
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n: 2000,
            feature_dim: 8,
            majority_mean: 30.0,
            majority_sd: 8.0,
            target_min: 0.0,
            target_max: 80.0,
            rare_min: 60.0,
            rare_max: 80.0,
            rare_mass: 0.05,
            noise_sd: 0.05,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n < 10 {
            return Err(Error::Config(format!(
                "synthetic spec: n must be >= 10, got {}",
                self.n
            )));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config(
                "synthetic spec: feature_dim must be >= 1".into(),
            ));
        }
        if !(self.rare_mass > 0.0 && self.rare_mass < 0.5) {
            return Err(Error::Config(format!(
                "synthetic spec: rare_mass must be in (0, 0.5), got {}",
                self.rare_mass
            )));
        }
        if !(self.majority_sd > 0.0) || !(self.noise_sd >= 0.0) {
            return Err(Error::Config(
                "synthetic spec: majority_sd must be > 0 and noise_sd >= 0".into(),
            ));
        }
        if self.target_max <= self.target_min {
            return Err(Error::Config(format!(
                "synthetic spec: target range [{}, {}] is empty",
                self.target_min, self.target_max
            )));
        }
        if self.rare_max < self.rare_min
            || self.rare_min < self.target_min
            || self.rare_max > self.target_max
        {
            return Err(Error::Config(format!(
                "synthetic spec: rare range [{}, {}] must sit inside the target range",
                self.rare_min, self.rare_max
            )));
        }
        Ok(())
    }
}

/// The noiseless feature bank: `x_j = sin((j+1) * (pi*y/1200 + pi/4))`.
///
/// Two properties are deliberate. First, the map is injective over the
/// default `[0, 80]` target range — the phase sweeps a small arc, distances
/// in feature space grow steadily with target distance, and nothing in the
/// bulk folds onto the rare tail. Second, its sensitivity is calibrated
/// against the default feature noise (sd 0.05) so that each observation
/// carries roughly ±1.7..2.1 target units of irreducible ambiguity. Dense
/// regions average that ambiguity away; scarce regions cannot. Predictive
/// uncertainty therefore tracks data density, which is the property the
/// imbalance benchmark exists to exercise.
pub fn synthetic_feature_map(target: f64, feature_dim: usize) -> Vec<f64> {
    (0..feature_dim)
        .map(|j| {
            let k = (j + 1) as f64;
            (std::f64::consts::PI * k * target / 1200.0 + k * std::f64::consts::PI / 4.0).sin()
        })
        .collect()
}

/// Draw the benchmark dataset. Deterministic in `spec.seed`; ids are `0..n`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = stream(spec.seed, salt::DATASET, 0);
    let mut samples = Vec::with_capacity(spec.n);
    for id in 0..spec.n as u64 {
        let target = if rng.random::<f64>() < spec.rare_mass {
            rng.random_range(spec.rare_min..spec.rare_max)
        } else {
            // Rejection-sample the truncated bulk component.
            loop {
                let z: f64 = rng.sample(StandardNormal);
                let y = spec.majority_mean + spec.majority_sd * z;
                if y >= spec.target_min && y <= spec.target_max {
                    break y;
                }
            }
        };
        let features = synthetic_feature_map(target, spec.feature_dim)
            .into_iter()
            .map(|x| x + spec.noise_sd * rng.sample::<f64, _>(StandardNormal))
            .collect();
        samples.push(Sample {
            id,
            features,
            target,
            origin_id: None,
        });
    }
    Dataset::new(samples)
}

/// Split into disjoint train/test parts by a seeded permutation. The train
/// side gets `floor(n * train_fraction)` samples, clamped so neither side is
/// empty; both sides keep the original dataset order.
pub fn split_train_test(
    dataset: &Dataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if dataset.len() < 2 {
        return Err(Error::Usage(format!(
            "cannot split {} samples into two non-empty parts",
            dataset.len()
        )));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Usage(format!(
            "train fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    let n = dataset.len();
    let train_len = ((n as f64 * train_fraction).floor() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = stream(seed, salt::SPLIT, 0);
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let chosen: HashSet<usize> = order[..train_len].iter().copied().collect();
    let mut train = Vec::with_capacity(train_len);
    let mut test = Vec::with_capacity(n - train_len);
    for (i, sample) in dataset.samples.iter().enumerate() {
        if chosen.contains(&i) {
            train.push(sample.clone());
        } else {
            test.push(sample.clone());
        }
    }
    Ok((Dataset { samples: train }, Dataset { samples: test }))
}

/// Write `id,y,x0,...` CSV. Floats print in shortest-roundtrip form.
pub fn save_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::from("id,y");
    for j in 0..dataset.feature_dim() {
        write!(out, ",x{j}").expect("string write");
    }
    out.push('\n');
    for sample in &dataset.samples {
        write!(out, "{},{}", sample.id, sample.target).expect("string write");
        for x in &sample.features {
            write!(out, ",{x}").expect("string write");
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Read a dataset written by [`save_csv`]. Errors carry 1-based line
/// numbers; non-finite values and duplicate ids are rejected.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text)
}

fn parse_csv(text: &str) -> Result<Dataset> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        message: "empty file".into(),
    })?;
    let columns: Vec<&str> = header.split(',').collect();
    if columns.len() < 2 || columns[0] != "id" || columns[1] != "y" {
        return Err(Error::Parse {
            line: 1,
            message: format!("header must start with 'id,y', got '{header}'"),
        });
    }
    for (j, col) in columns[2..].iter().enumerate() {
        if *col != format!("x{j}") {
            return Err(Error::Parse {
                line: 1,
                message: format!("feature column {} must be named 'x{j}', got '{col}'", j + 2),
            });
        }
    }
    let width = columns.len();
    let mut samples = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != width {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected {width} fields, found {}", fields.len()),
            });
        }
        let id: u64 = fields[0].parse().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("invalid id '{}'", fields[0]),
        })?;
        if !seen.insert(id) {
            return Err(Error::Parse {
                line: line_no,
                message: format!("duplicate sample id {id}"),
            });
        }
        let mut values = Vec::with_capacity(width - 1);
        for field in &fields[1..] {
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("invalid number '{field}'"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("non-finite value '{field}'"),
                });
            }
            values.push(v);
        }
        let target = values[0];
        let features = values.split_off(1);
        samples.push(Sample {
            id,
            features,
            target,
            origin_id: None,
        });
    }
    if samples.is_empty() {
        return Err(Error::Parse {
            line: 1,
            message: "file has a header but no data rows".into(),
        });
    }
    Ok(Dataset { samples })
}
