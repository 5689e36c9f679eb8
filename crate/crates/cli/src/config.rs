//! Declarative experiment config: a built-in profile, overlaid by an optional
//! TOML file, overlaid by `--set key=value` pairs, then bound strictly.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use ledet::pipeline::AugmentSettings;
use ledet::data::SyntheticSceneSpec;
use ledet::detector::{DetectorConfig, ParamGroup};
use ledet::entreg::EntRegConfig;
use ledet::pipeline::protocol::Protocol;
use ledet::pipeline::{FreezePolicy, Method, NovelInit, Schedule, Stage, TrainingConfig};
use ledet::semisup::SemiSupConfig;

/// Overrides relative `output_dir` values.
pub const OUTPUT_ROOT_ENV: &str = "LEDET_OUTPUT_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Desk,
    Coco,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    /// Generated by the `synth` command under `<output_dir>/data`.
    Synthetic,
    /// COCO-format annotation files plus image directories.
    Coco,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub source: DatasetSource,
    pub synth: SyntheticSceneSpec,
    pub n_train: usize,
    pub n_test: usize,
    pub train_annotations: PathBuf,
    pub train_images: PathBuf,
    pub test_annotations: PathBuf,
    pub test_images: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSection {
    pub base_classes: Vec<u64>,
    pub novel_classes: Vec<u64>,
    pub labeled_percent: f64,
    pub k_shot: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSchedule {
    /// `supervised` keeps the stage supervised whatever the experiment method.
    pub method: Method,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub burn_in: usize,
    /// Entropy regression in this stage for `soft_er_teacher` runs.
    pub entreg: bool,
    pub trainable: Vec<ParamGroup>,
    pub sgd: Schedule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub method: Method,
    pub novel_init_std: f64,
    pub novel_head_includes_base: bool,
    pub pretrain: StageSchedule,
    pub novel_head: StageSchedule,
    pub finetune: StageSchedule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Checkpoint whose proposals `proposals` dumps.
    pub proposal_stage: Stage,
    /// Proposals kept per image in the dump.
    pub proposal_budget: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub profile: Profile,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetSection,
    pub split: SplitSection,
    pub augment: AugmentSettings,
    pub detector: DetectorConfig,
    pub semisup: SemiSupConfig,
    pub entreg: EntRegConfig,
    pub schedule: ScheduleSection,
    pub eval: EvalSection,
}

fn stage_schedule(c: &TrainingConfig, entreg: bool) -> StageSchedule {
    StageSchedule {
        method: c.method,
        batch_labeled: c.batch_labeled,
        batch_unlabeled: c.batch_unlabeled,
        burn_in: c.burn_in,
        entreg,
        trainable: c.freeze.trainable.iter().copied().collect(),
        sgd: c.schedule.clone(),
    }
}

impl ExperimentConfig {
    pub fn profile(profile: Profile) -> Self {
        let p = match profile {
            Profile::Desk => Protocol::desk(),
            Profile::Coco => Protocol::coco(),
        };
        let (source, root) = match profile {
            Profile::Desk => (DatasetSource::Synthetic, PathBuf::new()),
            Profile::Coco => (DatasetSource::Coco, PathBuf::from("coco")),
        };
        ExperimentConfig {
            profile,
            seed: 0,
            output_dir: PathBuf::from(format!("runs/{}", match profile {
                Profile::Desk => "desk",
                Profile::Coco => "coco",
            })),
            dataset: DatasetSection {
                source,
                synth: p.synth.clone(),
                n_train: p.n_train,
                n_test: p.n_test,
                train_annotations: root.join("annotations/instances_train2017.json"),
                train_images: root.join("train2017"),
                test_annotations: root.join("annotations/instances_val2017.json"),
                test_images: root.join("val2017"),
            },
            split: SplitSection {
                base_classes: p.base_classes.clone(),
                novel_classes: p.novel_classes.clone(),
                labeled_percent: p.labeled_percent,
                k_shot: p.k_shot,
            },
            augment: p.pretrain.augment.clone(),
            detector: p.detector.clone(),
            semisup: p.pretrain.semisup.clone(),
            entreg: p.pretrain.entreg.clone(),
            schedule: ScheduleSection {
                method: p.pretrain.method,
                novel_init_std: p.novel_init.std,
                novel_head_includes_base: p.novel_head_includes_base,
                pretrain: stage_schedule(&p.pretrain, true),
                novel_head: stage_schedule(&p.novel_head, p.novel_head_entreg),
                finetune: stage_schedule(&p.finetune, p.finetune_entreg),
            },
            eval: EvalSection {
                proposal_stage: Stage::BasePretrain,
                proposal_budget: 1000,
            },
        }
    }

    fn training(&self, stage: Stage, s: &StageSchedule) -> TrainingConfig {
        TrainingConfig {
            stage,
            method: s.method,
            batch_labeled: s.batch_labeled,
            batch_unlabeled: s.batch_unlabeled,
            burn_in: s.burn_in,
            schedule: s.sgd.clone(),
            freeze: FreezePolicy::only(&s.trainable),
            seed: self.seed,
            augment: self.augment.clone(),
            semisup: self.semisup.clone(),
            entreg: self.entreg.clone(),
        }
    }

    pub fn protocol(&self) -> Protocol {
        let s = &self.schedule;
        Protocol {
            synth: self.dataset.synth.clone(),
            n_train: self.dataset.n_train,
            n_test: self.dataset.n_test,
            base_classes: self.split.base_classes.clone(),
            novel_classes: self.split.novel_classes.clone(),
            labeled_percent: self.split.labeled_percent,
            k_shot: self.split.k_shot,
            detector: self.detector.clone(),
            pretrain: self.training(Stage::BasePretrain, &s.pretrain),
            novel_head: self.training(Stage::NovelHead, &s.novel_head),
            finetune: self.training(Stage::BalancedFinetune, &s.finetune),
            novel_init: NovelInit {
                std: s.novel_init_std,
                seed: 0,
            },
            novel_head_entreg: s.novel_head.entreg,
            finetune_entreg: s.finetune.entreg,
            novel_head_includes_base: s.novel_head_includes_base,
        }
    }

    /// Checks that do not depend on artifacts.
    pub fn validate(&self) -> Result<()> {
        self.detector.validate().context("detector")?;
        self.augment.validate().context("augment")?;
        self.semisup.validate().context("semisup")?;
        if self.dataset.source == DatasetSource::Synthetic {
            self.dataset.synth.validate().context("dataset.synth")?;
            let n = self.dataset.synth.shapes.len() as u64;
            if let Some(c) = self.split.base_classes.iter().chain(&self.split.novel_classes).find(|&&c| c == 0 || c > n) {
                bail!("split: class {c} is not one of the {n} synthetic categories");
            }
        }
        let p = self.protocol();
        for (key, c) in [("schedule.pretrain", &p.pretrain), ("schedule.novel_head", &p.novel_head), ("schedule.finetune", &p.finetune)] {
            c.validate().with_context(|| key.to_string())?;
        }
        Ok(())
    }

    /// Resolved output directory, honoring the output-root variable for relative paths.
    pub fn output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if self.output_dir.is_relative() => Path::new(&root).join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }
}

/// Recursively overlays `top` onto `base`; tables merge, everything else replaces.
fn merge(base: &mut toml::Value, top: toml::Value) {
    match (base, top) {
        (toml::Value::Table(b), toml::Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses `value` as a TOML literal, falling back to a bare string.
fn parse_value(value: &str) -> toml::Value {
    let doc = format!("v = {value}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(value.into())),
        Err(_) => toml::Value::String(value.into()),
    }
}

fn set_path(root: &mut toml::Value, assignment: &str) -> Result<()> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| anyhow!("override '{assignment}' is not key=value"))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("override key '{key}' has an empty segment");
    }
    let mut cur = root;
    for (i, part) in parts.iter().enumerate() {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| anyhow!("override key '{key}': '{}' is not a table", parts[..i].join(".")))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), parse_value(value.trim()));
            return Ok(());
        }
        cur = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    unreachable!("split yields at least one segment")
}

/// Profile, optional file text and overrides to a validated config. Errors
/// name the failing key path.
pub fn resolve(profile: Option<Profile>, file: Option<&str>, overrides: &[String]) -> Result<ExperimentConfig> {
    let file_value: Option<toml::Value> = match file {
        Some(text) => Some(toml::Value::Table(text.parse::<toml::Table>().context("config file is not valid TOML")?)),
        None => None,
    };
    let file_profile = match file_value.as_ref().and_then(|v| v.get("profile")) {
        Some(v) => Some(
            Profile::deserialize(v.clone()).map_err(|e| anyhow!("invalid config at 'profile': {e}"))?,
        ),
        None => None,
    };
    let profile = profile.or(file_profile).unwrap_or(Profile::Desk);
    let mut value = toml::Value::try_from(ExperimentConfig::profile(profile))?;
    if let Some(f) = file_value {
        merge(&mut value, f);
    }
    // the command-line profile wins over the file's
    if let Some(t) = value.as_table_mut() {
        t.insert("profile".into(), toml::Value::try_from(profile)?);
    }
    for o in overrides {
        set_path(&mut value, o)?;
    }
    let config: ExperimentConfig = serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        anyhow!("invalid config at '{path}': {}", e.into_inner())
    })?;
    config.validate()?;
    Ok(config)
}
