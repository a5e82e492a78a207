//! Synthetic experiments: blobs with planted outliers, toy gradient-matching
//! attacks, and the `defend-sim` pipeline configuration.

use serde::{Deserialize, Serialize};

use crate::data::{BlobSpec, DatasetState};
use crate::epic_defense::{run_defense, DefenseConfig};
use crate::error::{Error, Result};
use crate::gradient_proxy::{DistanceOracle, ProxyMode};
use crate::poison_forge::{
    apply_perturbations, craft, train_victim, AttackObjective, AttackResult, AttackSpec, VictimConfig,
};
use crate::rng::derive_seed;
use crate::toy_trainer::{evaluate, proxies_for, Architecture, BatchMode, LrSchedule, ToyModel, TrainTrace, Trainer};

const TAG_TRAIN: u64 = 0x0074_7261_696e;
const TAG_TEST: u64 = 0x7465_7374;
const TAG_SURROGATE: u64 = 0x7375_7272;
const TAG_TRIAL: u64 = 0x0074_7269_616c;

/// Far-away points of one class planted on the opposite side of the blobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutlierSpec {
    #[serde(default = "default_outlier_count")]
    pub count: usize,
    /// Distance of each outlier from the origin.
    pub distance: f64,
    /// Label carried by the outliers.
    #[serde(default)]
    pub class: usize,
    /// Angular spacing between consecutive outliers, in radians.
    #[serde(default = "default_outlier_spacing")]
    pub spacing: f64,
}

fn default_outlier_count() -> usize {
    3
}

fn default_outlier_spacing() -> f64 {
    0.5
}

impl OutlierSpec {
    /// Outlier positions, fanned around the direction opposite the class center.
    pub fn positions(&self, blobs: &BlobSpec) -> Result<Vec<Vec<f64>>> {
        if blobs.dim < 2 {
            return Err(Error::invalid("planted outliers need at least two input dimensions"));
        }
        if self.class >= blobs.classes {
            return Err(Error::invalid(format!("outlier class {} out of range", self.class)));
        }
        let c = blobs.center(self.class);
        let base = c[1].atan2(c[0]) + std::f64::consts::PI;
        let mid = (self.count as f64 - 1.0) / 2.0;
        Ok((0..self.count)
            .map(|j| {
                let angle = base + (j as f64 - mid) * self.spacing;
                let mut p = vec![0.0; blobs.dim];
                p[0] = self.distance * angle.cos();
                p[1] = self.distance * angle.sin();
                p
            })
            .collect())
    }

    /// Appends the outliers after the clean points and marks them in the poison mask.
    pub fn plant(&self, clean: &DatasetState<f64>, blobs: &BlobSpec) -> Result<DatasetState<f64>> {
        let mut rows: Vec<Vec<f64>> = (0..clean.len()).map(|i| clean.x(i).to_vec()).collect();
        let mut labels = clean.labels().to_vec();
        let mut mask = clean.poison_mask().map_or_else(|| vec![false; clean.len()], <[bool]>::to_vec);
        for p in self.positions(blobs)? {
            rows.push(p);
            labels.push(self.class);
            mask.push(true);
        }
        DatasetState::from_rows(&rows, labels, clean.classes())?.with_poison_mask(mask)
    }
}

/// Two 2-D blobs of 100 points each plus three far outliers labeled 0,
/// defended with last-layer proxies: two rounds, at epochs 10 and 12.
#[derive(Debug, Clone, PartialEq)]
pub struct OutlierScenario {
    pub blobs: BlobSpec,
    pub outliers: OutlierSpec,
    pub data: DatasetState<f64>,
    pub model: ToyModel<f64>,
    pub defense: DefenseConfig,
    pub schedule: LrSchedule,
    pub epochs: usize,
}

impl OutlierScenario {
    pub fn new(seed: u64) -> Result<Self> {
        let blobs = BlobSpec { classes: 2, dim: 2, per_class: 100, spread: 1.0, separation: 3.0 };
        let outliers = OutlierSpec { count: 3, distance: 60.0, class: 0, spacing: 0.5 };
        let data = outliers.plant(&blobs.generate(derive_seed(seed, TAG_TRAIN))?, &blobs)?;
        let model = ToyModel::init(Architecture::Linear, 2, 2, derive_seed(seed, TAG_SURROGATE))?;
        let defense = DefenseConfig { proxy_mode: ProxyMode::LastLayerFull, seed, ..DefenseConfig::preset(0.1) };
        let epochs = defense.warmup_epochs + defense.interval_epochs + 1;
        Ok(Self { blobs, outliers, data, model, defense, schedule: LrSchedule::constant(0.1), epochs })
    }

    /// Runs the defended training; returns the trace, final state and model.
    pub fn run(&self) -> Result<(TrainTrace<f64>, DatasetState<f64>, ToyModel<f64>)> {
        let mut state = self.data.clone();
        let mut model = self.model.clone();
        let mut trainer = Trainer::new(self.schedule.clone(), BatchMode::Full)?;
        let trace = run_defense(&mut state, &mut model, &self.defense, &mut trainer, self.epochs)?;
        Ok((trace, state, model))
    }

    /// Original indices of the planted outliers.
    pub fn outlier_indices(&self) -> Vec<usize> {
        (self.data.len() - self.outliers.count..self.data.len()).collect()
    }
}

/// Separation between the flagged points and the rest of their class in proxy space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Displacement {
    /// Smallest distance from a flagged proxy to any unflagged proxy of its class.
    pub min_gap: f64,
    /// Largest pairwise distance among unflagged proxies of a class.
    pub clean_diameter: f64,
}

impl Displacement {
    pub fn ratio(&self) -> f64 {
        self.min_gap / self.clean_diameter
    }
}

/// Measures how far the poison-masked points sit from their clean classmates.
pub fn proxy_displacement(model: &ToyModel<f64>, data: &DatasetState<f64>, mode: ProxyMode) -> Result<Displacement> {
    let mask = data.poison_mask().ok_or_else(|| Error::invalid("displacement needs a poison mask"))?;
    let mut out = Displacement { min_gap: f64::INFINITY, clean_diameter: 0.0 };
    for class in data.populated_classes() {
        let members: Vec<usize> = data.all_indices().into_iter().filter(|&i| data.label(i) == class).collect();
        let proxies = proxies_for(model, data, &members, mode)?;
        let oracle = DistanceOracle::auto(&proxies);
        let (flagged, clean): (Vec<usize>, Vec<usize>) = (0..members.len()).partition(|&r| mask[members[r]]);
        for (a, &i) in clean.iter().enumerate() {
            for &j in &clean[a + 1..] {
                out.clean_diameter = out.clean_diameter.max(oracle.dist(i, j));
            }
        }
        for &f in &flagged {
            for &c in &clean {
                out.min_gap = out.min_gap.min(oracle.dist(f, c));
            }
        }
    }
    Ok(out)
}

/// Gradient-matching attack settings for [`SimConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    #[serde(default)]
    pub objective: AttackObjective,
    pub poisons: usize,
    pub epsilon: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub step_size: Option<f64>,
    #[serde(default)]
    pub target_class: usize,
    #[serde(default = "default_adversarial_class")]
    pub adversarial_class: usize,
    /// Lowest surrogate logit margin allowed for the chosen target.
    #[serde(default)]
    pub min_target_margin: f64,
}

fn default_steps() -> usize {
    250
}

fn default_adversarial_class() -> usize {
    1
}

/// Where the data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub blobs: BlobSpec,
    #[serde(default = "default_test_per_class")]
    pub test_per_class: usize,
    #[serde(default)]
    pub outliers: Option<OutlierSpec>,
}

fn default_test_per_class() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub schedule: LrSchedule,
    #[serde(default)]
    pub batch_size: Option<usize>,
}

/// The `defend-sim` configuration document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    #[serde(default)]
    pub seed: u64,
    pub data: DataConfig,
    #[serde(default)]
    pub model: Architecture,
    pub training: TrainingConfig,
    #[serde(default)]
    pub attack: Option<AttackConfig>,
    #[serde(default)]
    pub defense: Option<DefenseConfig>,
    /// Also run without the defense when one is configured.
    #[serde(default = "default_true")]
    pub compare_undefended: bool,
    #[serde(default = "default_trials")]
    pub trials: usize,
    /// Record per-epoch poison and target proxy cosines in the defended run.
    #[serde(default)]
    pub cosine_trace: bool,
    /// Run the instrumented full-batch bound check on the training data.
    #[serde(default)]
    pub theorem_check: bool,
}

fn default_true() -> bool {
    true
}

fn default_trials() -> usize {
    1
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.blobs.validate()?;
        self.training.schedule.validate()?;
        if self.training.epochs == 0 {
            return Err(Error::Config { key: "training.epochs".into(), message: "must be at least 1".into() });
        }
        if self.trials == 0 {
            return Err(Error::Config { key: "trials".into(), message: "must be at least 1".into() });
        }
        if self.data.test_per_class == 0 {
            return Err(Error::Config { key: "data.test_per_class".into(), message: "must be at least 1".into() });
        }
        if self.training.batch_size == Some(0) {
            return Err(Error::Config { key: "training.batch_size".into(), message: "must be positive".into() });
        }
        if let Some(d) = &self.defense {
            d.validate()?;
        }
        if let Some(a) = &self.attack {
            let classes = self.data.blobs.classes;
            if a.target_class >= classes || a.adversarial_class >= classes || a.target_class == a.adversarial_class {
                return Err(Error::Config {
                    key: "attack.adversarial_class".into(),
                    message: "target and adversarial classes must be distinct and in range".into(),
                });
            }
            if !(a.epsilon.is_finite() && a.epsilon >= 0.0) {
                return Err(Error::Config { key: "attack.epsilon".into(), message: "must be finite and ≥ 0".into() });
            }
            if a.poisons == 0 {
                return Err(Error::Config { key: "attack.poisons".into(), message: "must be at least 1".into() });
            }
        }
        Ok(())
    }

    pub fn victim(&self) -> VictimConfig {
        VictimConfig {
            arch: self.model,
            schedule: self.training.schedule.clone(),
            epochs: self.training.epochs,
            batch_size: self.training.batch_size,
            defense: None,
        }
    }

    /// Per-trial victim seeds.
    pub fn trial_seeds(&self) -> Vec<u64> {
        (0..self.trials as u64).map(|i| derive_seed(self.seed, TAG_TRIAL + i)).collect()
    }

    /// Training data (with any planted outliers) and the held-out test set.
    pub fn datasets(&self) -> Result<(DatasetState<f64>, DatasetState<f64>)> {
        let blobs = self.data.blobs;
        let mut train = blobs.generate::<f64>(derive_seed(self.seed, TAG_TRAIN))?;
        if let Some(o) = &self.data.outliers {
            train = o.plant(&train, &blobs)?;
        }
        let test_spec = BlobSpec { per_class: self.data.test_per_class, ..blobs };
        let test = test_spec.generate::<f64>(derive_seed(self.seed, TAG_TEST))?;
        Ok((train, test))
    }
}

/// A crafted attack ready for victim evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedAttack {
    /// Index of the target within the test set.
    pub target_index: usize,
    pub target_label: usize,
    pub target_margin: f64,
    pub spec: AttackSpec<f64>,
    pub result: AttackResult<f64>,
}

/// Logit margin of the true class over the strongest rival.
pub fn margin(model: &ToyModel<f64>, x: &[f64], label: usize) -> f64 {
    let logits = model.forward(x).logits;
    let rival =
        logits.iter().enumerate().filter(|&(c, _)| c != label).map(|(_, &v)| v).fold(f64::NEG_INFINITY, f64::max);
    logits[label] - rival
}

/// Trains a clean surrogate, picks the least-confident correctly classified
/// test point of the target class whose margin clears the threshold, and
/// crafts perturbations on the adversarial-class training points nearest it.
pub fn plant_attack(
    config: &SimConfig,
    attack: &AttackConfig,
    train: &DatasetState<f64>,
    test: &DatasetState<f64>,
) -> Result<(PlantedAttack, DatasetState<f64>)> {
    let surrogate = train_victim(train, &config.victim(), derive_seed(config.seed, TAG_SURROGATE))?.model;
    let target_index = (0..test.len())
        .filter(|&i| test.label(i) == attack.target_class)
        .map(|i| (i, margin(&surrogate, test.x(i), attack.target_class)))
        .filter(|&(_, m)| m > 0.0 && m >= attack.min_target_margin)
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .ok_or(Error::DegenerateTarget)?;
    let target = test.x(target_index.0).to_vec();
    let mut candidates: Vec<(usize, f64)> = (0..train.len())
        .filter(|&i| train.label(i) == attack.adversarial_class && train.is_poison(i) != Some(true))
        .map(|i| (i, crate::scalar::l2_distance(train.x(i), &target)))
        .collect();
    if candidates.len() < attack.poisons {
        return Err(Error::invalid("not enough adversarial-class examples to poison"));
    }
    candidates.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let mut base_indices: Vec<usize> = candidates[..attack.poisons].iter().map(|c| c.0).collect();
    base_indices.sort_unstable();
    let spec = AttackSpec {
        base_indices,
        target,
        adversarial_label: attack.adversarial_class,
        epsilon: attack.epsilon,
        steps: attack.steps,
        step_size: attack.step_size,
        objective: attack.objective,
    };
    let result = craft(&spec, &surrogate, train)?;
    let poisoned = apply_perturbations(train, &spec.base_indices, &result.perturbations)?;
    let planted = PlantedAttack {
        target_index: target_index.0,
        target_label: attack.target_class,
        target_margin: target_index.1,
        spec,
        result,
    };
    Ok((planted, poisoned))
}

/// Test accuracy of a model on every example of `test`.
pub fn test_accuracy(model: &ToyModel<f64>, test: &DatasetState<f64>) -> f64 {
    evaluate(model, test, &test.all_indices()).1
}
