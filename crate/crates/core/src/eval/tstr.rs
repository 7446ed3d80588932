use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{auroc, bootstrap_ci, mann_whitney_one_sided, BootstrapCi, MannWhitney};
use crate::data::{Cohort, Splits};
use crate::error::{Error, Result};
use crate::generator::{plan_composition, synthesize_cohort, CompositionPlan, PlanMode, SequenceGenerator};
use crate::grud::{grud_fit, GrudConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TstrConfig {
    /// Classifier initialisations per arm; the best on the arm's own
    /// validation split is kept.
    pub seeds: usize,
    pub grud: GrudConfig,
    pub bootstrap: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for TstrConfig {
    fn default() -> Self {
        TstrConfig {
            seeds: 5,
            grud: GrudConfig::default(),
            bootstrap: 30,
            alpha: 0.05,
            seed: 0,
        }
    }
}

impl TstrConfig {
    fn classifier_seed(&self, k: usize) -> u64 {
        self.seed.wrapping_mul(1000).wrapping_add(k as u64)
    }
}

/// One classifier arm: trained on some cohort, scored on the real test split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    /// `real` or a generator id.
    pub source: String,
    pub train_size: usize,
    /// AUROC of the selected classifier on the real test split.
    pub auroc: f64,
    pub ci: BootstrapCi,
    pub best_seed: usize,
    pub val_aurocs: Vec<Option<f64>>,
    /// Test probabilities of the selected classifier, in test-split order.
    pub scores: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub generator: String,
    /// `e`, trained on real data.
    pub real: ArmResult,
    /// `ê`, trained on synthetic data.
    pub synthetic: ArmResult,
    /// `e − ê`
    pub gap: f64,
    /// Paired per-resample gaps; both arms share the resample indices.
    pub gap_samples: Vec<f64>,
}

/// Trains GRU-D `config.seeds` times on `train`, picks the initialisation
/// with the best validation AUROC and scores the real test split with it.
pub fn run_arm(
    source: &str,
    train_cohort: &Cohort,
    train: &[usize],
    val: &[usize],
    real: &Cohort,
    task: &str,
    config: &TstrConfig,
) -> Result<ArmResult> {
    if config.seeds == 0 {
        return Err(Error::InvalidParam("tstr needs at least one classifier seed".into()));
    }
    let label = real.label_index(task)?;
    let test = real.select(&real.splits.test);
    let labels: Vec<u8> = test.iter().map(|r| r.y[label]).collect();
    let fits: Vec<_> = (0..config.seeds)
        .into_par_iter()
        .map(|k| grud_fit(train_cohort, train, val, task, &config.grud, config.classifier_seed(k)))
        .collect::<Result<_>>()?;
    let val_aurocs: Vec<Option<f64>> = fits.iter().map(|f| f.best_val_auroc).collect();
    let best_seed = (0..fits.len())
        .max_by(|&a, &b| {
            let key = |i: usize| val_aurocs[i].unwrap_or(f64::NEG_INFINITY);
            key(a).total_cmp(&key(b)).then(b.cmp(&a))
        })
        .unwrap();
    let scores = fits[best_seed].model.predict(&test, label)?;
    let point = auroc(&scores, &labels)?;
    let ci = bootstrap_ci(&scores, &labels, config.bootstrap, config.alpha, config.seed)?;
    Ok(ArmResult {
        source: source.to_string(),
        train_size: train.len(),
        auroc: point,
        ci,
        best_seed,
        val_aurocs,
        scores,
    })
}

/// The real-data reference arm.
pub fn real_arm(real: &Cohort, task: &str, config: &TstrConfig) -> Result<ArmResult> {
    run_arm("real", real, &real.splits.train, &real.splits.val, real, task, config)
}

/// Train on synthetic, test on real. The synthetic arm only ever sees the
/// synthetic cohort; `real` contributes its test split.
pub fn tstr_run(real: &Cohort, synthetic: &Cohort, task: &str, config: &TstrConfig) -> Result<EvalReport> {
    let reference = real_arm(real, task, config)?;
    tstr_against(real, reference, synthetic, task, config)
}

/// Like [`tstr_run`] with a precomputed real arm, so several generators can
/// share one reference.
pub fn tstr_against(
    real: &Cohort,
    reference: ArmResult,
    synthetic: &Cohort,
    task: &str,
    config: &TstrConfig,
) -> Result<EvalReport> {
    let generator = match &synthetic.provenance {
        crate::data::Provenance::Synthetic { generator, .. } => generator.clone(),
        crate::data::Provenance::Real => "real-copy".to_string(),
    };
    let arm = run_arm(
        &generator,
        synthetic,
        &synthetic.splits.train,
        &synthetic.splits.val,
        real,
        task,
        config,
    )?;
    let gap_samples = reference.ci.samples.iter().zip(&arm.ci.samples).map(|(e, s)| e - s).collect();
    Ok(EvalReport {
        task: task.to_string(),
        generator,
        gap: reference.auroc - arm.auroc,
        real: reference,
        synthetic: arm,
        gap_samples,
    })
}

/// One-sided test that generator `worse` has larger gaps than `better`.
pub fn compare_gaps(worse: &EvalReport, better: &EvalReport) -> Result<MannWhitney> {
    mann_whitney_one_sided(&worse.gap_samples, &better.gap_samples)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubgroupRow {
    pub category: String,
    pub n: usize,
    pub positives: usize,
    /// `None` when the category is empty or has a single class.
    pub auroc: Option<f64>,
    pub ci: Option<BootstrapCi>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairwiseTest {
    /// Category with the higher mean bootstrap AUROC.
    pub higher: String,
    pub lower: String,
    pub u: f64,
    pub p: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubgroupReport {
    pub variable: String,
    pub rows: Vec<SubgroupRow>,
    pub pairwise: Vec<PairwiseTest>,
    pub log: Vec<String>,
}

impl SubgroupReport {
    pub fn row(&self, category: &str) -> Option<&SubgroupRow> {
        self.rows.iter().find(|r| r.category == category)
    }
}

/// AUROC within each category of `variable` on the real test split, using
/// the arm's scores. Pairwise tests compare bootstrap AUROC samples.
pub fn subgroup_report(real: &Cohort, arm: &ArmResult, task: &str, variable: &str, config: &TstrConfig) -> Result<SubgroupReport> {
    let label = real.label_index(task)?;
    let var = real.vocab.variable_index(variable).ok_or_else(|| Error::Unknown {
        kind: "static variable".into(),
        name: variable.to_string(),
    })?;
    let test = real.select(&real.splits.test);
    if arm.scores.len() != test.len() {
        return Err(Error::shape("subgroup scores", test.len(), arm.scores.len()));
    }
    let mut rows = Vec::new();
    let mut log = Vec::new();
    for (k, name) in real.vocab.variables[var].categories.iter().enumerate() {
        let idx: Vec<usize> = (0..test.len()).filter(|&i| test[i].s[var] as usize == k).collect();
        let scores: Vec<f64> = idx.iter().map(|&i| arm.scores[i]).collect();
        let labels: Vec<u8> = idx.iter().map(|&i| test[i].y[label]).collect();
        let positives = labels.iter().filter(|&&l| l == 1).count();
        let (point, ci) = match auroc(&scores, &labels) {
            Ok(a) => (Some(a), Some(bootstrap_ci(&scores, &labels, config.bootstrap, config.alpha, config.seed)?)),
            Err(Error::UndefinedAuroc { .. }) => {
                log.push(format!(
                    "{variable}={name}: {positives} positives of {} test records, AUROC undefined",
                    idx.len()
                ));
                (None, None)
            }
            Err(e) => return Err(e),
        };
        rows.push(SubgroupRow {
            category: name.clone(),
            n: idx.len(),
            positives,
            auroc: point,
            ci,
        });
    }
    let mut pairwise = Vec::new();
    let defined: Vec<&SubgroupRow> = rows.iter().filter(|r| r.ci.is_some()).collect();
    for i in 0..defined.len() {
        for j in i + 1..defined.len() {
            let (a, b) = (defined[i], defined[j]);
            let (ca, cb) = (a.ci.as_ref().unwrap(), b.ci.as_ref().unwrap());
            let (hi, lo, chi, clo) = if ca.point >= cb.point { (a, b, ca, cb) } else { (b, a, cb, ca) };
            let t = mann_whitney_one_sided(&chi.samples, &clo.samples)?;
            pairwise.push(PairwiseTest {
                higher: hi.category.clone(),
                lower: lo.category.clone(),
                u: t.u,
                p: t.p,
            });
        }
    }
    Ok(SubgroupReport {
        variable: variable.to_string(),
        rows,
        pairwise,
        log,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryDelta {
    pub category: String,
    pub before: Option<f64>,
    pub after: Option<f64>,
    pub delta: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationReport {
    pub task: String,
    pub generator: String,
    pub plan: CompositionPlan,
    pub union_size: usize,
    pub before: ArmResult,
    pub after: ArmResult,
    pub before_groups: SubgroupReport,
    pub after_groups: SubgroupReport,
    pub deltas: Vec<CategoryDelta>,
}

/// Real training split plus synthetic records planned to bring every
/// category of `variable` to the size of the largest. Validation and test
/// splits stay real.
pub fn augmented_cohort<G: SequenceGenerator>(
    real: &Cohort,
    generator: &G,
    variable: &str,
    seed: u64,
) -> Result<(Cohort, CompositionPlan)> {
    let labels = generator.schema().labels.clone();
    let mode = PlanMode::AugmentToParity {
        variable: variable.to_string(),
    };
    let plan = plan_composition(real, &real.splits.train, &labels, &mode)?;
    let mut union = real.clone();
    if plan.total() > 0 {
        let synthetic = synthesize_cohort(generator, &plan, seed)?;
        let label_map: Vec<usize> = real
            .label_names
            .iter()
            .map(|l| labels.iter().position(|g| g == l))
            .collect::<Option<_>>()
            .ok_or_else(|| Error::InvalidParam("augmentation needs a generator conditioned on every cohort label".into()))?;
        let start = union.records.len();
        for mut r in synthetic.records {
            r.y = label_map.iter().map(|&j| r.y[j]).collect();
            union.records.push(r);
        }
        union.splits = Splits {
            train: real.splits.train.iter().copied().chain(start..union.records.len()).collect(),
            val: real.splits.val.clone(),
            test: real.splits.test.clone(),
        };
        union.provenance = crate::data::Provenance::Synthetic {
            generator: generator.generator_id(),
            plan: serde_json::to_value(&plan)?,
        };
    }
    union.validate()?;
    Ok((union, plan))
}

/// GRU-D on real data before and after augmenting to parity over `variable`,
/// with per-category AUROC changes on the real test split.
pub fn augmentation_experiment<G: SequenceGenerator>(
    real: &Cohort,
    generator: &G,
    variable: &str,
    task: &str,
    config: &TstrConfig,
) -> Result<AugmentationReport> {
    let before = real_arm(real, task, config)?;
    let (union, plan) = augmented_cohort(real, generator, variable, config.seed)?;
    let after = run_arm(
        &generator.generator_id(),
        &union,
        &union.splits.train,
        &union.splits.val,
        real,
        task,
        config,
    )?;
    let before_groups = subgroup_report(real, &before, task, variable, config)?;
    let after_groups = subgroup_report(real, &after, task, variable, config)?;
    let deltas = before_groups
        .rows
        .iter()
        .map(|b| {
            let after = after_groups.row(&b.category).and_then(|r| r.auroc);
            CategoryDelta {
                category: b.category.clone(),
                before: b.auroc,
                after,
                delta: b.auroc.zip(after).map(|(x, y)| y - x),
            }
        })
        .collect();
    Ok(AugmentationReport {
        task: task.to_string(),
        generator: generator.generator_id(),
        union_size: union.len(),
        plan,
        before,
        after,
        before_groups,
        after_groups,
        deltas,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::testutil::random_cohort;
    use crate::data::Provenance;

    fn small_config() -> TstrConfig {
        TstrConfig {
            seeds: 2,
            grud: GrudConfig {
                hidden: 4,
                epochs: 2,
                batch: 16,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn real_copy_gives_identical_auroc() {
        let real = random_cohort(80, 4, 3, 2);
        let mut copy = real.clone();
        copy.provenance = Provenance::Synthetic {
            generator: "copy".into(),
            plan: serde_json::Value::Null,
        };
        let r = tstr_run(&real, &copy, "vent", &small_config()).unwrap();
        assert_eq!(r.real.auroc, r.synthetic.auroc);
        assert_eq!(r.gap, 0.0);
        assert!(r.gap_samples.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn synthetic_arm_never_reads_real_training_records() {
        let real = random_cohort(80, 4, 3, 2);
        let synthetic = random_cohort(60, 4, 3, 9);
        let mut poisoned = real.clone();
        for &i in &poisoned.splits.train.clone() {
            let r = &mut poisoned.records[i];
            r.m.fill(1);
            r.x.fill(1e6);
        }
        let cfg = small_config();
        let a = run_arm("s", &synthetic, &synthetic.splits.train, &synthetic.splits.val, &real, "vent", &cfg).unwrap();
        let b = run_arm("s", &synthetic, &synthetic.splits.train, &synthetic.splits.val, &poisoned, "vent", &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_category_has_no_pairwise_tests() {
        let mut real = random_cohort(60, 4, 3, 2);
        for r in &mut real.records {
            r.s[0] = 1;
        }
        let cfg = small_config();
        let arm = real_arm(&real, "vent", &cfg).unwrap();
        let rep = subgroup_report(&real, &arm, "vent", "insurance", &cfg).unwrap();
        assert_eq!(rep.rows.len(), real.vocab.variables[0].categories.len());
        for (k, row) in rep.rows.iter().enumerate() {
            if k == 1 {
                assert!(row.n > 0);
            } else {
                assert_eq!((row.n, row.auroc), (0, None));
            }
        }
        assert!(rep.pairwise.is_empty());
    }

    #[test]
    fn category_without_positives_is_undefined() {
        let mut real = random_cohort(90, 4, 3, 2);
        for r in &mut real.records {
            if r.s[0] == 2 {
                r.y[0] = 0;
            }
        }
        let cfg = small_config();
        let arm = real_arm(&real, "vent", &cfg).unwrap();
        let rep = subgroup_report(&real, &arm, "vent", "insurance", &cfg).unwrap();
        let row = rep.row("c").unwrap();
        assert!(row.auroc.is_none());
        assert!(rep.log.iter().any(|l| l.starts_with("insurance=c")));
        assert!(rep.pairwise.iter().all(|p| p.higher != "c" && p.lower != "c"));
    }
}
