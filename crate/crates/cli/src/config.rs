//! Experiment configuration: one JSON document, unknown keys rejected.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use healthgen::data::StaticVocabulary;
use healthgen::eval::TstrConfig;
use healthgen::generator::PlanMode;
use healthgen::model::HealthGenConfig;
use healthgen::pipeline::{LabelWindowSpec, ToyProcessParams};
use healthgen::srnn::SrnnConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const DEFAULT_OUT: &str = "healthgen-out";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Optional guard: when present it must name the invoked subcommand.
    pub command: Option<String>,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub data: DataSource,
    /// Downstream task label; the cohort split is stratified on it.
    pub task: String,
    /// Labels the generators condition on; empty means just `task`.
    pub labels: Vec<String>,
    pub models: Vec<ModelSpec>,
    pub plan: PlanMode,
    pub tstr: TstrConfig,
    pub fairness: FairnessConfig,
    pub augment: AugmentConfig,
    pub audit: AuditConfig,
    pub export: ExportConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            command: None,
            seed: 0,
            out: None,
            data: DataSource::default(),
            task: "vent".into(),
            labels: Vec::new(),
            models: vec![ModelSpec::Healthgen(HealthGenConfig::default())],
            plan: PlanMode::MirrorReal,
            tstr: TstrConfig::default(),
            fairness: FairnessConfig::default(),
            augment: AugmentConfig::default(),
            audit: AuditConfig::default(),
            export: ExportConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// The bundled ground-truth process. Its `seed` is replaced by the
    /// experiment seed.
    Toy(ToyProcessParams),
    /// An existing cohort archive, copied into the run directory.
    Archive(PathBuf),
    Csv(CsvSource),
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Toy(ToyProcessParams::default())
    }
}

/// Pre-extracted tables; see `healthgen::pipeline::ingest_csv` for headers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSource {
    pub events: PathBuf,
    pub statics: PathBuf,
    pub interventions: PathBuf,
    pub features: Vec<String>,
    #[serde(default)]
    pub vocab: StaticVocabulary,
    pub labels: Vec<String>,
    #[serde(default)]
    pub window: LabelWindowSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Healthgen(HealthGenConfig),
    Srnn(SrnnConfig),
}

impl ModelSpec {
    /// Directory name under `generators/` and `synthetic/`.
    pub fn name(&self) -> &'static str {
        match self {
            ModelSpec::Healthgen(_) => healthgen::model::MODEL_TAG,
            ModelSpec::Srnn(_) => healthgen::srnn::SRNN_TAG,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FairnessConfig {
    pub variable: String,
}

impl Default for FairnessConfig {
    fn default() -> Self {
        FairnessConfig {
            variable: "insurance".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Name of the generator used for the top-up.
    pub model: String,
    pub variable: String,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            model: healthgen::model::MODEL_TAG.into(),
            variable: "insurance".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuditConfig {
    /// Leading synthetic records used as queries.
    pub queries: usize,
    pub k: usize,
}

impl Default for AuditConfig {
    fn default() -> Self {
        AuditConfig { queries: 100, k: 3 }
    }
}

pub const FIGURES: [&str; 5] = ["tstr", "fairness", "augment", "privacy", "samples"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExportConfig {
    pub figures: Vec<String>,
    /// Keep only generated records whose mask rate is below their cohort's
    /// mean.
    pub preselect_low_missingness: bool,
    /// Records per sample-series export.
    pub samples: usize,
}

impl Default for ExportConfig {
    fn default() -> Self {
        ExportConfig {
            figures: FIGURES.map(String::from).to_vec(),
            preselect_low_missingness: false,
            samples: 10,
        }
    }
}

/// Values given on the command line.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub preselect_low_missingness: bool,
}

impl ExperimentConfig {
    /// Reads the file; relative paths inside it resolve against its directory.
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.data {
            DataSource::Archive(p) => fix(p),
            DataSource::Csv(c) => {
                fix(&mut c.events);
                fix(&mut c.statics);
                fix(&mut c.interventions);
            }
            DataSource::Toy(_) => {}
        }
        if let Some(p) = &mut self.out {
            fix(p);
        }
    }

    /// Flags beat `HEALTHGEN_OUT`, which beats the file, which beats the
    /// default.
    pub fn apply(&mut self, flags: &Overrides, env_out: Option<PathBuf>) {
        if let Some(seed) = flags.seed {
            self.seed = seed;
        }
        if let Some(out) = flags.out.clone().or(env_out) {
            self.out = Some(out);
        }
        if flags.preselect_low_missingness {
            self.export.preselect_low_missingness = true;
        }
        if let DataSource::Toy(p) = &mut self.data {
            p.seed = self.seed;
        }
        self.tstr.seed = self.seed;
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
    }

    pub fn labels(&self) -> Vec<String> {
        if self.labels.is_empty() {
            vec![self.task.clone()]
        } else {
            self.labels.clone()
        }
    }

    pub fn model(&self, name: &str) -> Option<&ModelSpec> {
        self.models.iter().find(|m| m.name() == name)
    }

    /// Everything that can be checked without touching data.
    pub fn validate(&self, command: &str) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Config(msg));
        if let Some(c) = &self.command {
            if c != command {
                return bad(format!("config is for command {c:?}, invoked {command:?}"));
            }
        }
        if self.task.is_empty() {
            return bad("task label is empty".into());
        }
        let mut names = BTreeSet::new();
        for m in &self.models {
            if !names.insert(m.name()) {
                return bad(format!("model {} listed twice", m.name()));
            }
            let checked = match m {
                ModelSpec::Healthgen(c) => c.validate(),
                ModelSpec::Srnn(c) => c.validate(),
            };
            checked.map_err(|e| CliError::Config(format!("model {}: {e}", m.name())))?;
        }
        self.tstr
            .grud
            .validate()
            .map_err(|e| CliError::Config(format!("tstr.grud: {e}")))?;
        if self.tstr.seeds == 0 || self.tstr.bootstrap == 0 || !(self.tstr.alpha > 0.0 && self.tstr.alpha < 1.0) {
            return bad("tstr needs seeds > 0, bootstrap > 0 and alpha in (0, 1)".into());
        }
        if self.audit.k == 0 || self.audit.queries == 0 {
            return bad("audit needs k > 0 and queries > 0".into());
        }
        if let Some(f) = self.export.figures.iter().find(|f| !FIGURES.contains(&f.as_str())) {
            return bad(format!("unknown figure {f:?}; known: {FIGURES:?}"));
        }
        let labels = self.labels();
        match &self.data {
            DataSource::Toy(p) => {
                p.validate().map_err(|e| CliError::Config(format!("data.toy: {e}")))?;
                let names = p.label_names();
                if names.first() != Some(&self.task) {
                    return bad(format!("toy cohorts split on their first label {names:?}; task is {:?}", self.task));
                }
                if let Some(l) = labels.iter().find(|l| !names.contains(l)) {
                    return bad(format!("label {l:?} not produced by the toy process"));
                }
            }
            DataSource::Csv(c) => {
                if !c.labels.contains(&self.task) {
                    return bad(format!("task {:?} not among csv labels {:?}", self.task, c.labels));
                }
                if let Some(l) = labels.iter().find(|l| !c.labels.contains(l)) {
                    return bad(format!("label {l:?} not among csv labels"));
                }
            }
            DataSource::Archive(_) => {}
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg: ExperimentConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        cfg.validate("tstr").unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        for doc in [
            r#"{"sed": 1}"#,
            r#"{"tstr": {"boot": 3}}"#,
            r#"{"models": [{"healthgen": {"dimv": 3}}]}"#,
            r#"{"data": {"toy": {"n": 10, "kapa": 0.1}}}"#,
        ] {
            assert!(serde_json::from_str::<ExperimentConfig>(doc).is_err(), "{doc}");
        }
    }

    #[test]
    fn flags_beat_env_beat_file() {
        let mut cfg: ExperimentConfig = serde_json::from_str(r#"{"seed": 4, "out": "file"}"#).unwrap();
        cfg.apply(&Overrides::default(), Some("env".into()));
        assert_eq!(cfg.out_dir(), PathBuf::from("env"));
        assert_eq!(cfg.seed, 4);
        let flags = Overrides {
            seed: Some(9),
            out: Some("flag".into()),
            preselect_low_missingness: true,
        };
        cfg.apply(&flags, Some("env".into()));
        assert_eq!(cfg.out_dir(), PathBuf::from("flag"));
        assert_eq!((cfg.seed, cfg.tstr.seed), (9, 9));
        assert!(cfg.export.preselect_low_missingness);
        match &cfg.data {
            DataSource::Toy(p) => assert_eq!(p.seed, 9),
            _ => unreachable!(),
        }
    }

    #[test]
    fn validation_catches_inconsistent_sections() {
        let cases = [
            r#"{"command": "tstr"}"#,
            r#"{"task": "dialysis"}"#,
            r#"{"models": [{"srnn": {}}, {"srnn": {}}]}"#,
            r#"{"models": [{"healthgen": {"dim_v": 0}}]}"#,
            r#"{"export": {"figures": ["tstr", "heatmap"]}}"#,
            r#"{"audit": {"k": 0}}"#,
        ];
        for doc in cases {
            let cfg: ExperimentConfig = serde_json::from_str(doc).unwrap();
            assert!(matches!(cfg.validate("generate"), Err(CliError::Config(_))), "{doc}");
        }
    }
}
