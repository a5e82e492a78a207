//! JSON run reports and their plot-ready CSV series.
//!
//! Everything outside [`RunReport::timings`] is a pure function of the
//! configuration, so two runs of the same config serialize identically.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{DatasetState, DropRecord};
use crate::epic_defense::{cluster_histogram, cosine_alignment_trace, ClusterHistogram, CosineTrace, DefenseConfig};
use crate::error::{Error, Result};
use crate::gradient_proxy::{ProxyMatrix, ProxyMode};
use crate::poison_forge::{evaluate_attack, train_victim_observed, AttackOutcome, VictimConfig};
use crate::rng::derive_seed;
use crate::scenario::{plant_attack, test_accuracy, PlantedAttack, SimConfig};
use crate::theory_bench::{instrumented_run, theorem_report, DropPolicy, TheoremReport, BOUND_TOLERANCE};
use crate::toy_trainer::{proxies_for, ToyModel, TrainTrace};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub train: usize,
    pub test: usize,
    pub classes: usize,
    pub dim: usize,
    /// Training points carrying the poison flag (planted outliers or crafted
    /// poisons), when the data has a poison mask.
    pub flagged: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundHistogram {
    pub round: usize,
    pub epoch: usize,
    pub histogram: ClusterHistogram,
}

/// One victim configuration: the traced first trial plus any attack outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSection {
    pub name: String,
    pub defense: Option<DefenseConfig>,
    pub seed: u64,
    pub trace: TrainTrace<f64>,
    pub test_accuracy: f64,
    /// Every removed example with its provenance.
    pub dropped: Vec<DropRecord>,
    pub histograms: Vec<RoundHistogram>,
    pub outcome: Option<AttackOutcome>,
}

/// Wall-clock seconds per pipeline stage. Not reproducible.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub seconds: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub config: SimConfig,
    pub data: DataSummary,
    pub attack: Option<PlantedAttack>,
    pub runs: Vec<RunSection>,
    pub cosine: Option<CosineTrace>,
    pub theorem: Option<TheoremReport>,
    pub timings: Timings,
}

/// Full `defend-sim` pipeline.
pub fn run_simulation(config: &SimConfig) -> Result<RunReport> {
    config.validate()?;
    let mut timings = Timings::default();
    let mut clock = Instant::now();
    let mut lap = |timings: &mut Timings, name: &str| {
        timings.seconds.insert(name.to_string(), clock.elapsed().as_secs_f64());
        clock = Instant::now();
    };

    let (train, test) = config.datasets()?;
    let (attack, data) = match &config.attack {
        Some(a) => {
            let (planted, poisoned) = plant_attack(config, a, &train, &test)?;
            (Some(planted), poisoned)
        }
        None => (None, train),
    };
    lap(&mut timings, "data");

    let mut variants: Vec<(&str, Option<DefenseConfig>)> = Vec::new();
    if config.defense.is_none() || config.compare_undefended {
        variants.push(("undefended", None));
    }
    if let Some(d) = &config.defense {
        variants.push(("defended", Some(d.clone())));
    }
    let seeds = config.trial_seeds();
    let mut runs = Vec::new();
    let mut cosine = None;
    for (name, defense) in variants {
        let victim = VictimConfig { defense: defense.clone(), ..config.victim() };
        let record_cosine = config.cosine_trace && defense.is_some() && attack.is_some();
        let proxy_mode = defense.as_ref().map_or(ProxyMode::default(), |d| d.proxy_mode);
        let poisons: Vec<usize> =
            data.poison_mask().map_or_else(Vec::new, |m| (0..m.len()).filter(|&i| m[i]).collect());
        let mut frames: Vec<ProxyMatrix<f64>> = Vec::new();
        let mut targets: Vec<Vec<f64>> = Vec::new();
        let run = train_victim_observed(
            &data,
            &victim,
            seeds[0],
            &mut |_, model: &ToyModel<f64>, state: &DatasetState<f64>| {
                if let (true, Some(a)) = (record_cosine, &attack) {
                    frames.push(proxies_for(model, state, &poisons, proxy_mode)?);
                    targets.push(model.proxy(&a.spec.target, a.spec.adversarial_label, proxy_mode)?);
                }
                Ok(())
            },
        )?;
        if record_cosine && !poisons.is_empty() {
            cosine = Some(cosine_alignment_trace(&frames, &vec![true; poisons.len()], &targets)?);
        }
        let outcome = match &attack {
            Some(a) => {
                Some(evaluate_attack(&data, &victim, &a.spec.target, a.spec.adversarial_label, &seeds, Some(&test))?)
            }
            None => None,
        };
        let histograms = run
            .trace
            .rounds
            .iter()
            .map(|r| RoundHistogram { round: r.round, epoch: r.epoch, histogram: cluster_histogram(r, None) })
            .collect();
        runs.push(RunSection {
            name: name.to_string(),
            defense,
            seed: seeds[0],
            test_accuracy: test_accuracy(&run.model, &test),
            dropped: run.state.dropped().to_vec(),
            trace: run.trace,
            histograms,
            outcome,
        });
        lap(&mut timings, name);
    }

    let theorem = if config.theorem_check {
        let policy = match &config.defense {
            Some(d) => DropPolicy::Epic(DefenseConfig { seed: derive_seed(seeds[0], 3), ..d.clone() }),
            None => DropPolicy::None,
        };
        let model = ToyModel::init(config.model, data.classes(), data.dim(), derive_seed(seeds[0], 1))?;
        let run = instrumented_run(&data, &model, config.training.schedule.base, config.training.epochs, &policy)?;
        let report = theorem_report(&run, BOUND_TOLERANCE)?;
        lap(&mut timings, "theorem");
        Some(report)
    } else {
        None
    };

    let flagged = data.poison_mask().map(|m| (0..m.len()).filter(|&i| m[i]).collect());
    Ok(RunReport {
        schema_version: SCHEMA_VERSION,
        config: config.clone(),
        data: DataSummary { train: data.len(), test: test.len(), classes: data.classes(), dim: data.dim(), flagged },
        attack,
        runs,
        cosine,
        theorem,
        timings,
    })
}

/// A named table ready for CSV output.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Series {
    fn new(header: &[&str]) -> Self {
        Self { header: header.iter().map(|h| h.to_string()).collect(), rows: Vec::new() }
    }

    fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::invalid(format!("csv: {e}"));
        w.write_record(&self.header).map_err(io)?;
        for row in &self.rows {
            w.write_record(row).map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: Self = serde_json::from_str(text)?;
        if report.schema_version != SCHEMA_VERSION {
            return Err(Error::invalid(format!("unsupported report schema version {}", report.schema_version)));
        }
        Ok(report)
    }

    /// The defended run when present, otherwise the first run.
    pub fn primary_run(&self) -> Option<&RunSection> {
        self.runs.iter().find(|r| r.defense.is_some()).or_else(|| self.runs.first())
    }

    pub fn series_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        if let Some(primary) = self.primary_run() {
            names.extend(["loss", "accuracy", "drops"].map(String::from));
            names.extend(primary.histograms.iter().map(|h| format!("cluster_hist_round_{}", h.round)));
        }
        for run in &self.runs {
            names.push(format!("{}_loss", run.name));
            names.push(format!("{}_accuracy", run.name));
        }
        if self.runs.iter().any(|r| r.outcome.is_some()) {
            names.push("attack".into());
        }
        if self.cosine.is_some() {
            names.push("cosine".into());
        }
        if self.theorem.as_ref().is_some_and(|t| t.check.is_some()) {
            names.push("theorem".into());
        }
        names
    }

    pub fn series(&self, name: &str) -> Result<Series> {
        let unknown = || Error::Config {
            key: "series".into(),
            message: format!("unknown series `{name}`; available: {}", self.series_names().join(", ")),
        };
        let run_named = |n: &str| self.runs.iter().find(|r| r.name == n);
        let epoch_series = |run: &RunSection, column: &str| {
            let mut s = Series::new(&["epoch", column]);
            for e in &run.trace.epochs {
                let v = if column == "loss" { e.loss } else { e.accuracy };
                s.push(vec![e.epoch.to_string(), v.to_string()]);
            }
            s
        };
        match name {
            "loss" | "accuracy" => Ok(epoch_series(self.primary_run().ok_or_else(unknown)?, name)),
            "drops" => {
                let run = self.primary_run().ok_or_else(unknown)?;
                let mask = self.data.flagged.as_ref();
                let mut s = Series::new(&["epoch", "class", "index", "medoid_rank", "poison"]);
                for d in &run.dropped {
                    s.push(vec![
                        d.epoch.to_string(),
                        d.class.to_string(),
                        d.index.to_string(),
                        d.medoid_rank.to_string(),
                        opt(mask.as_ref().map(|m| m.contains(&d.index))),
                    ]);
                }
                Ok(s)
            }
            "attack" => {
                let mut s = Series::new(&[
                    "run",
                    "seed",
                    "prediction",
                    "success",
                    "test_accuracy",
                    "dropped",
                    "dropped_poison",
                ]);
                for run in &self.runs {
                    for t in run.outcome.iter().flat_map(|o| &o.trials) {
                        s.push(vec![
                            run.name.clone(),
                            t.seed.to_string(),
                            t.prediction.to_string(),
                            t.success.to_string(),
                            opt(t.test_accuracy),
                            t.dropped.to_string(),
                            opt(t.dropped_poison),
                        ]);
                    }
                }
                Ok(s)
            }
            "cosine" => {
                let c = self.cosine.as_ref().ok_or_else(unknown)?;
                let mut s = Series::new(&["epoch", "poison_poison", "poison_target"]);
                for (e, (pp, pt)) in c.poison_poison.iter().zip(&c.poison_target).enumerate() {
                    s.push(vec![e.to_string(), opt(*pp), opt(*pt)]);
                }
                Ok(s)
            }
            "theorem" => {
                let check = self.theorem.as_ref().and_then(|t| t.check.as_ref()).ok_or_else(unknown)?;
                let mut s = Series::new(&["t", "loss", "contraction", "additive", "bound", "holds"]);
                for b in &check.checks {
                    s.push(vec![
                        b.t.to_string(),
                        b.loss.to_string(),
                        b.contraction.to_string(),
                        b.additive.to_string(),
                        b.bound.to_string(),
                        b.holds.to_string(),
                    ]);
                }
                Ok(s)
            }
            _ => {
                if let Some(round) = name.strip_prefix("cluster_hist_round_") {
                    let run = self.primary_run().ok_or_else(unknown)?;
                    let h = run.histograms.iter().find(|h| h.round.to_string() == round).ok_or_else(unknown)?;
                    let labeled = h.histogram.labeled;
                    let mut s = if labeled {
                        Series::new(&["size", "clean", "poison"])
                    } else {
                        Series::new(&["size", "unknown"])
                    };
                    for b in &h.histogram.buckets {
                        if labeled {
                            s.push(vec![b.size.to_string(), b.clean.to_string(), b.poison.to_string()]);
                        } else {
                            s.push(vec![b.size.to_string(), b.unknown.to_string()]);
                        }
                    }
                    return Ok(s);
                }
                for suffix in ["_loss", "_accuracy"] {
                    if let Some(run) = name.strip_suffix(suffix).and_then(run_named) {
                        return Ok(epoch_series(run, &suffix[1..]));
                    }
                }
                Err(unknown())
            }
        }
    }
}
