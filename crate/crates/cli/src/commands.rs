use std::path::{Path, PathBuf};

use healthgen::data::{load_archive, save_archive, Cohort};
use healthgen::eval::{
    audit_panel_rows, augmentation_experiment, augmentation_figure_rows, compare_gaps, memorization_audit,
    metric_rows, real_arm, subgroup_figure_rows, subgroup_report, summary_text, tstr_against, tstr_figure_rows,
    write_csv, ArmResult, AugmentationReport, AuditResult, EvalReport, FigureRow, SubgroupReport,
};
use healthgen::generator::{plan_composition, synthesize_cohort, CompositionPlan, SequenceGenerator};
use healthgen::model::{fit, write_curve_csv, HealthGen};
use healthgen::pipeline::{build_cohort, ingest_csv, toy_cohort, CohortSpec};
use healthgen::srnn::{srnn_fit, Srnn};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::{DataSource, ExperimentConfig, ModelSpec};
use crate::manifest::{sha256_hex, Recorder};
use crate::CliError;

const COHORT: &str = "cohort";

fn generator_dir(out: &Path, name: &str) -> PathBuf {
    out.join("generators").join(name)
}

fn synthetic_dir(out: &Path, name: &str) -> PathBuf {
    out.join("synthetic").join(name)
}

/// One-sided test that `worse` has the larger TSTR gap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapComparison {
    pub worse: String,
    pub better: String,
    pub u: f64,
    pub p: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TstrOutput {
    pub task: String,
    pub real: ArmResult,
    /// One per model, in config order.
    pub models: Vec<String>,
    pub reports: Vec<EvalReport>,
    pub comparisons: Vec<GapComparison>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FairnessEntry {
    /// `real` or a model name.
    pub model: String,
    pub report: SubgroupReport,
}

/// One cell of an exported generated series, raw units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub record_id: String,
    pub mask_rate: f64,
    pub step: usize,
    pub feature: String,
    pub value: Option<f64>,
}

struct Run<'a> {
    cfg: &'a ExperimentConfig,
    out: PathBuf,
    rec: Recorder,
}

impl Run<'_> {
    fn mkdir(&self, dir: &Path) -> Result<(), CliError> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
    }

    fn require(&self, path: PathBuf, producer: &'static str) -> Result<PathBuf, CliError> {
        if path.exists() {
            Ok(path)
        } else {
            Err(CliError::MissingArtifact { path, producer })
        }
    }

    fn load_cohort(&mut self) -> Result<Cohort, CliError> {
        let path = self.require(self.out.join(COHORT), "prepare-data")?;
        self.rec.input(&path)?;
        Ok(load_archive(&path)?)
    }

    fn load_synthetic(&mut self, name: &str) -> Result<Cohort, CliError> {
        let path = self.require(synthetic_dir(&self.out, name), "generate")?;
        self.rec.input(&path)?;
        Ok(load_archive(&path)?)
    }

    fn load_generator(&mut self, name: &str) -> Result<Generator, CliError> {
        let dir = self.require(generator_dir(&self.out, name), "train-gen")?;
        self.rec.input(&dir.join("checkpoint"))?;
        let ckpt = dir.join("checkpoint");
        Ok(match name {
            healthgen::srnn::SRNN_TAG => Generator::Srnn(Srnn::load(&ckpt)?),
            _ => Generator::HealthGen(HealthGen::load(&ckpt)?),
        })
    }

    fn read_json<T: DeserializeOwned>(&mut self, path: PathBuf, producer: &'static str) -> Result<T, CliError> {
        let path = self.require(path, producer)?;
        self.rec.input(&path)?;
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        Ok(serde_json::from_str(&text).map_err(healthgen::Error::from)?)
    }

    fn write_json<T: Serialize>(&mut self, path: PathBuf, value: &T) -> Result<(), CliError> {
        if let Some(dir) = path.parent() {
            self.mkdir(dir)?;
        }
        let mut text = serde_json::to_string_pretty(value).map_err(healthgen::Error::from)?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        self.rec.output(&path)
    }

    fn write_text(&mut self, path: PathBuf, text: &str) -> Result<(), CliError> {
        std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        self.rec.output(&path)
    }

    fn write_rows<T: Serialize>(&mut self, path: PathBuf, rows: &[T]) -> Result<(), CliError> {
        if let Some(dir) = path.parent() {
            self.mkdir(dir)?;
        }
        write_csv(&path, rows)?;
        self.rec.output(&path)
    }

    fn save_cohort(&mut self, cohort: &Cohort, path: PathBuf) -> Result<(), CliError> {
        if path.exists() {
            std::fs::remove_dir_all(&path).map_err(|e| CliError::io(&path, e))?;
        }
        save_archive(cohort, &path)?;
        self.rec.output(&path)
    }
}

enum Generator {
    HealthGen(HealthGen),
    Srnn(Srnn),
}

impl Generator {
    fn synthesize(&self, plan: &CompositionPlan, seed: u64) -> healthgen::Result<Cohort> {
        match self {
            Generator::HealthGen(g) => synthesize_cohort(g, plan, seed),
            Generator::Srnn(g) => synthesize_cohort(g, plan, seed),
        }
    }

    fn labels(&self) -> &[String] {
        match self {
            Generator::HealthGen(g) => &g.schema().labels,
            Generator::Srnn(g) => &g.schema().labels,
        }
    }
}

pub(crate) fn execute(command: &str, cfg: &ExperimentConfig) -> Result<PathBuf, CliError> {
    let out = cfg.out_dir();
    std::fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
    let mut run = Run {
        cfg,
        out: out.clone(),
        rec: Recorder::new(&out),
    };
    match command {
        "prepare-data" => prepare_data(&mut run)?,
        "train-gen" => train_gen(&mut run)?,
        "generate" => generate(&mut run)?,
        "tstr" => tstr(&mut run)?,
        "fairness" => fairness(&mut run)?,
        "augment" => augment(&mut run)?,
        "audit-privacy" => audit_privacy(&mut run)?,
        "export-figures" => export_figures(&mut run)?,
        other => return Err(CliError::Config(format!("unknown command {other}"))),
    }
    let mut hashed = cfg.clone();
    hashed.out = None;
    let config_hash = sha256_hex(&serde_json::to_vec(&hashed).map_err(healthgen::Error::from)?);
    run.rec.finish(command, cfg.seed, config_hash)
}

fn prepare_data(run: &mut Run) -> Result<(), CliError> {
    let cfg = run.cfg;
    let cohort = match &cfg.data {
        DataSource::Toy(params) => toy_cohort(params)?.0,
        DataSource::Archive(path) => {
            run.rec.input(path)?;
            load_archive(path)?
        }
        DataSource::Csv(src) => {
            for p in [&src.events, &src.statics, &src.interventions] {
                run.rec.input(p)?;
            }
            let manifest = healthgen::data::FeatureManifest::new(
                src.features.clone(),
                1.0 / src.window.steps_per_hour as f64,
                src.window.observation_points(),
            )?;
            let streams = ingest_csv(
                &src.events,
                &src.statics,
                &src.interventions,
                &manifest,
                &src.vocab,
                &src.labels,
            )?;
            let spec = CohortSpec {
                manifest: &manifest,
                vocab: &src.vocab,
                label_names: &src.labels,
                window: src.window,
                task_label: src.labels.iter().position(|l| *l == cfg.task).unwrap_or(0),
                split_seed: cfg.seed,
            };
            let (cohort, rejected) = build_cohort(&streams, &spec)?;
            #[derive(Serialize)]
            struct RejectionRow<'a> {
                patient: &'a str,
                reason: &'a str,
            }
            let rows: Vec<RejectionRow> = rejected
                .iter()
                .map(|r| RejectionRow {
                    patient: &r.patient,
                    reason: &r.reason,
                })
                .collect();
            run.write_rows(run.out.join("rejections.csv"), &rows)?;
            cohort
        }
    };
    cohort.label_index(&cfg.task)?;
    run.save_cohort(&cohort, run.out.join(COHORT))
}

fn train_gen(run: &mut Run) -> Result<(), CliError> {
    let cfg = run.cfg;
    let cohort = run.load_cohort()?;
    let labels = cfg.labels();
    for spec in &cfg.models {
        let dir = generator_dir(&run.out, spec.name());
        run.mkdir(&dir)?;
        let ckpt = dir.join("checkpoint");
        let curve = match spec {
            ModelSpec::Healthgen(c) => {
                let f = fit(&cohort, c, &labels, cfg.seed)?;
                f.model.save(&ckpt, cfg.seed, f.best_epoch)?;
                f.curve
            }
            ModelSpec::Srnn(c) => {
                let f = srnn_fit(&cohort, c, &labels, cfg.seed)?;
                f.model.save(&ckpt, cfg.seed, f.best_epoch)?;
                f.curve
            }
        };
        run.rec.output(&ckpt)?;
        let curve_path = dir.join("curve.csv");
        write_curve_csv(&curve_path, &curve)?;
        run.rec.output(&curve_path)?;
    }
    Ok(())
}

fn generate(run: &mut Run) -> Result<(), CliError> {
    let cfg = run.cfg;
    let cohort = run.load_cohort()?;
    for spec in &cfg.models {
        let generator = run.load_generator(spec.name())?;
        let plan = plan_composition(&cohort, &cohort.splits.train, generator.labels(), &cfg.plan)?;
        let synthetic = generator.synthesize(&plan, cfg.seed)?;
        run.save_cohort(&synthetic, synthetic_dir(&run.out, spec.name()))?;
        run.write_json(run.out.join("synthetic").join(format!("{}-plan.json", spec.name())), &plan)?;
    }
    Ok(())
}

fn tstr(run: &mut Run) -> Result<(), CliError> {
    let cfg = run.cfg;
    let cohort = run.load_cohort()?;
    let real = real_arm(&cohort, &cfg.task, &cfg.tstr)?;
    let mut reports = Vec::new();
    let mut models = Vec::new();
    for spec in &cfg.models {
        let synthetic = run.load_synthetic(spec.name())?;
        reports.push(tstr_against(&cohort, real.clone(), &synthetic, &cfg.task, &cfg.tstr)?);
        models.push(spec.name().to_string());
    }
    let mut comparisons = Vec::new();
    for (i, a) in reports.iter().enumerate() {
        for (j, b) in reports.iter().enumerate() {
            if i != j && a.gap > b.gap {
                let t = compare_gaps(a, b)?;
                comparisons.push(GapComparison {
                    worse: models[i].clone(),
                    better: models[j].clone(),
                    u: t.u,
                    p: t.p,
                });
            }
        }
    }
    let dir = run.out.join("tstr");
    run.mkdir(&dir)?;
    let metrics: Vec<_> = reports.iter().flat_map(metric_rows).collect();
    run.write_rows(dir.join("metrics.csv"), &metrics)?;
    let pairs: Vec<_> = comparisons
        .iter()
        .map(|c| (c.worse.clone(), c.better.clone(), c.u, c.p))
        .collect();
    run.write_text(dir.join("summary.txt"), &summary_text(&reports, &pairs))?;
    let output = TstrOutput {
        task: cfg.task.clone(),
        real,
        models,
        reports,
        comparisons,
    };
    run.write_json(dir.join("report.json"), &output)
}

fn fairness(run: &mut Run) -> Result<(), CliError> {
    let cfg = run.cfg;
    let cohort = run.load_cohort()?;
    let tstr: TstrOutput = run.read_json(run.out.join("tstr").join("report.json"), "tstr")?;
    let mut arms = vec![("real".to_string(), &tstr.real)];
    arms.extend(tstr.models.iter().cloned().zip(tstr.reports.iter().map(|r| &r.synthetic)));
    let entries = arms
        .into_iter()
        .map(|(model, arm)| {
            let report = subgroup_report(&cohort, arm, &cfg.task, &cfg.fairness.variable, &cfg.tstr)?;
            Ok(FairnessEntry { model, report })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let log: Vec<String> = entries
        .iter()
        .flat_map(|e| e.report.log.iter().map(move |l| format!("{}: {l}", e.model)))
        .collect();
    let dir = run.out.join("fairness");
    run.write_json(dir.join("report.json"), &entries)?;
    run.write_text(dir.join("log.txt"), &(log.join("\n") + "\n"))
}

fn augment(run: &mut Run) -> Result<(), CliError> {
    let cfg = run.cfg;
    let cohort = run.load_cohort()?;
    let name = cfg.augment.model.clone();
    if cfg.model(&name).is_none() {
        return Err(CliError::Config(format!("augment.model {name:?} is not among the configured models")));
    }
    let generator = run.load_generator(&name)?;
    let (variable, task, tc) = (&cfg.augment.variable, &cfg.task, &cfg.tstr);
    let report: AugmentationReport = match &generator {
        Generator::HealthGen(g) => augmentation_experiment(&cohort, g, variable, task, tc)?,
        Generator::Srnn(g) => augmentation_experiment(&cohort, g, variable, task, tc)?,
    };
    let dir = run.out.join("augment");
    run.write_json(dir.join("report.json"), &report)?;
    run.write_rows(dir.join("deltas.csv"), &report.deltas)
}

/// The leading `n` records of a synthetic cohort.
fn queries(synthetic: &Cohort, n: usize) -> Cohort {
    let mut q = synthetic.clone();
    q.records.truncate(n);
    q
}

fn healthgen_name(cfg: &ExperimentConfig) -> Result<&'static str, CliError> {
    cfg.models
        .iter()
        .find(|m| matches!(m, ModelSpec::Healthgen(_)))
        .map(ModelSpec::name)
        .ok_or_else(|| CliError::Config("the privacy audit needs a healthgen model".into()))
}

fn audit_privacy(run: &mut Run) -> Result<(), CliError> {
    let cfg = run.cfg;
    let name = healthgen_name(cfg)?;
    let cohort = run.load_cohort()?;
    let model = match run.load_generator(name)? {
        Generator::HealthGen(m) => m,
        Generator::Srnn(_) => unreachable!("healthgen_name only returns healthgen models"),
    };
    let synthetic = run.load_synthetic(name)?;
    let q = queries(&synthetic, cfg.audit.queries);
    let results = memorization_audit(&model, &q, &cohort, cfg.audit.k)?;
    run.write_json(run.out.join("privacy").join("audit.json"), &results)
}

fn export_figures(run: &mut Run) -> Result<(), CliError> {
    let cfg = run.cfg;
    let dir = run.out.join("figures");
    for figure in &cfg.export.figures {
        match figure.as_str() {
            "tstr" => {
                let t: TstrOutput = run.read_json(run.out.join("tstr").join("report.json"), "tstr")?;
                let mut rows = tstr_figure_rows(&t.reports);
                if rows.is_empty() {
                    rows.push(FigureRow {
                        group: t.task.clone(),
                        model: "real".into(),
                        point: Some(t.real.auroc),
                        ci_lo: Some(t.real.ci.lower),
                        ci_hi: Some(t.real.ci.upper),
                        pairwise_p: None,
                    });
                }
                for (row, name) in rows.iter_mut().skip(1).zip(&t.models) {
                    row.model = name.clone();
                }
                run.write_rows(dir.join("tstr.csv"), &rows)?;
            }
            "fairness" => {
                let entries: Vec<FairnessEntry> =
                    run.read_json(run.out.join("fairness").join("report.json"), "fairness")?;
                let rows: Vec<FigureRow> = entries
                    .iter()
                    .flat_map(|e| subgroup_figure_rows(&e.report, &e.model))
                    .collect();
                run.write_rows(dir.join("fairness.csv"), &rows)?;
            }
            "augment" => {
                let report: AugmentationReport =
                    run.read_json(run.out.join("augment").join("report.json"), "augment")?;
                run.write_rows(dir.join("augment.csv"), &augmentation_figure_rows(&report))?;
            }
            "privacy" => {
                let name = healthgen_name(cfg)?;
                let results: Vec<AuditResult> =
                    run.read_json(run.out.join("privacy").join("audit.json"), "audit-privacy")?;
                let cohort = run.load_cohort()?;
                let synthetic = run.load_synthetic(name)?;
                let q = queries(&synthetic, results.len());
                run.write_rows(dir.join("privacy.csv"), &audit_panel_rows(&results, &q, &cohort)?)?;
            }
            "samples" => {
                for spec in &cfg.models {
                    let synthetic = run.load_synthetic(spec.name())?;
                    let rows = sample_rows(&synthetic, cfg.export.samples, cfg.export.preselect_low_missingness);
                    run.write_rows(dir.join(format!("samples_{}.csv", spec.name())), &rows)?;
                }
            }
            other => return Err(CliError::Config(format!("unknown figure {other}"))),
        }
    }
    Ok(())
}

/// Long-format series of the first `limit` records, optionally only those
/// with a mask rate below the cohort mean.
pub(crate) fn sample_rows(cohort: &Cohort, limit: usize, preselect: bool) -> Vec<SampleRow> {
    let rates: Vec<f64> = cohort.records.iter().map(|r| r.mask_rate()).collect();
    let mean = rates.iter().sum::<f64>() / rates.len().max(1) as f64;
    let mut rows = Vec::new();
    let chosen = cohort
        .records
        .iter()
        .zip(&rates)
        .filter(|(_, &rate)| !preselect || rate < mean)
        .take(limit);
    for (r, &rate) in chosen {
        for ((t, d), &m) in r.m.indexed_iter() {
            rows.push(SampleRow {
                record_id: r.id.clone(),
                mask_rate: rate,
                step: t,
                feature: cohort.manifest.feature_names[d].clone(),
                value: (m == 1).then(|| cohort.standardizer.inverse(d, r.x[[t, d]] as f64)),
            });
        }
    }
    rows
}
