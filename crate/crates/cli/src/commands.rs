//! Subcommand bodies. Every artifact lives under the resolved output
//! directory, and every command rewrites `config.toml` there first.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _, Result};
use serde::{Deserialize, Serialize};

use ledet::data::{load_coco_json, Dataset, FewShotSplit};
use ledet::detector::{Checkpoint, ImagePass};
use ledet::eval::{emit_plots, generalized_report, EvalReport, Plot, PlotKind, Series, PROPOSAL_BUDGETS};
use ledet::pipeline::log::{append_csv, read_csv};
use ledet::pipeline::protocol::{run_few_shot, run_pretrain, stage_config, Protocol, ProtocolData};
use ledet::pipeline::stages::config_hash;
use ledet::pipeline::{Stage, StepLog};

use crate::config::{DatasetSource, ExperimentConfig};

/// Image-level label partition written by `split`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSplit {
    pub percent: f64,
    pub seed: u64,
    pub labeled: Vec<u64>,
    pub unlabeled: Vec<u64>,
}

#[derive(Serialize)]
struct ProposalLine {
    image_id: u64,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    score: f64,
}

pub struct Context {
    cfg: ExperimentConfig,
    protocol: Protocol,
    root: PathBuf,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?)
}

fn write_log(path: &Path, rows: &[StepLog]) -> Result<()> {
    if path.exists() {
        std::fs::remove_file(path).with_context(|| format!("replacing {}", path.display()))?;
    }
    Ok(append_csv(path, rows)?)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "checkpoint".into())
}

impl Context {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        let root = cfg.output_dir();
        std::fs::create_dir_all(&root).with_context(|| format!("creating {}", root.display()))?;
        let path = root.join("config.toml");
        std::fs::write(&path, cfg.to_toml()?).with_context(|| format!("writing {}", path.display()))?;
        Ok(Context {
            protocol: cfg.protocol(),
            cfg,
            root,
        })
    }

    fn dir(&self, name: &str) -> Result<PathBuf> {
        let d = self.root.join(name);
        std::fs::create_dir_all(&d).with_context(|| format!("creating {}", d.display()))?;
        Ok(d)
    }

    fn checkpoint_path(&self, stage: Stage) -> PathBuf {
        self.root.join("checkpoints").join(format!("{}.ckpt", stage.name()))
    }

    fn datasets(&self) -> Result<(Dataset, Dataset)> {
        let d = &self.cfg.dataset;
        let (train_ann, train_root, test_ann, test_root) = match d.source {
            DatasetSource::Synthetic => {
                let data = self.root.join("data");
                if !data.join("train/annotations.json").exists() {
                    bail!("no synthetic data under {}; run `ledet synth` first", data.display());
                }
                (data.join("train/annotations.json"), data.join("train"), data.join("test/annotations.json"), data.join("test"))
            }
            DatasetSource::Coco => (d.train_annotations.clone(), d.train_images.clone(), d.test_annotations.clone(), d.test_images.clone()),
        };
        let load = |ann: &Path, root: &Path| -> Result<Dataset> {
            let index = load_coco_json(ann).with_context(|| format!("loading {}", ann.display()))?;
            Ok(Dataset::load(index, root)?)
        };
        Ok((load(&train_ann, &train_root)?, load(&test_ann, &test_root)?))
    }

    fn split_paths(&self) -> (PathBuf, PathBuf) {
        let d = self.root.join("split");
        (d.join("labeled.json"), d.join("few_shot.json"))
    }

    /// Datasets plus the splits written by `split`.
    fn data(&self) -> Result<ProtocolData> {
        let (labeled_path, few_shot_path) = self.split_paths();
        if !labeled_path.exists() || !few_shot_path.exists() {
            bail!("no splits under {}; run `ledet split` first", self.root.join("split").display());
        }
        let labeled: LabeledSplit = read_json(&labeled_path)?;
        let split = FewShotSplit::load(&few_shot_path)?;
        let (train, test) = self.datasets()?;
        Ok(ProtocolData {
            train,
            test,
            labeled_ids: labeled.labeled,
            unlabeled_ids: labeled.unlabeled,
            split,
        })
    }

    /// Identity of a stage's inputs: its config, the detector, and the split files.
    fn stage_hash(&self, stage: Stage, upstream: &str) -> Result<String> {
        let (labeled_path, few_shot_path) = self.split_paths();
        let split_text = [std::fs::read_to_string(labeled_path)?, std::fs::read_to_string(few_shot_path)?];
        let p = &self.protocol;
        let (training, entreg) = match stage {
            Stage::BasePretrain => (&p.pretrain, true),
            Stage::NovelHead => (&p.novel_head, p.novel_head_entreg),
            Stage::BalancedFinetune => (&p.finetune, p.finetune_entreg),
        };
        let method = self.cfg.schedule.method;
        let value = (
            stage_config(training, method, entreg, self.cfg.seed),
            &p.detector,
            &self.cfg.dataset,
            &self.cfg.split,
            &self.cfg.schedule,
            split_text,
            upstream,
        );
        Ok(config_hash(&value)?)
    }

    /// Existing checkpoint with the expected hash, if any. A mismatching one
    /// is an error unless `force`.
    fn reusable(&self, stage: Stage, hash: &str, force: bool) -> Result<Option<Checkpoint>> {
        let path = self.checkpoint_path(stage);
        if !path.exists() {
            return Ok(None);
        }
        let ck = Checkpoint::load(&path)?;
        if ck.config_hash == hash {
            println!("{}: reusing {}", stage.name(), path.display());
            return Ok(Some(ck));
        }
        if force {
            return Ok(None);
        }
        bail!("{} was produced by a different config; pass --force to retrain", path.display())
    }

    pub fn synth(&self) -> Result<()> {
        if self.cfg.dataset.source != DatasetSource::Synthetic {
            bail!("dataset.source is not synthetic");
        }
        let (train, test) = ProtocolData::synthesize(&self.protocol, self.cfg.seed)?;
        let data = self.dir("data")?;
        train.save(&data.join("train"))?;
        test.save(&data.join("test"))?;
        println!(
            "synth: {} train / {} test images, {} / {} objects -> {}",
            train.index.images.len(),
            test.index.images.len(),
            train.index.annotations.len(),
            test.index.annotations.len(),
            data.display()
        );
        Ok(())
    }

    pub fn split(&self) -> Result<()> {
        let (train, test) = self.datasets()?;
        let data = ProtocolData::from_datasets(&self.protocol, train, test, self.cfg.seed)?;
        let dir = self.dir("split")?;
        let labeled = LabeledSplit {
            percent: self.protocol.labeled_percent,
            seed: self.cfg.seed,
            labeled: data.labeled_ids.clone(),
            unlabeled: data.unlabeled_ids.clone(),
        };
        let (labeled_path, few_shot_path) = self.split_paths();
        write_json(&labeled_path, &labeled)?;
        data.split.save(&few_shot_path)?;
        println!(
            "split: {} labeled / {} unlabeled images, {}-shot over {} classes -> {}",
            labeled.labeled.len(),
            labeled.unlabeled.len(),
            data.split.k,
            data.split.shot_instances.len(),
            dir.display()
        );
        Ok(())
    }

    fn base_checkpoint(&self, force: bool, data: &ProtocolData) -> Result<Checkpoint> {
        let hash = self.stage_hash(Stage::BasePretrain, "")?;
        if let Some(ck) = self.reusable(Stage::BasePretrain, &hash, force)? {
            return Ok(ck);
        }
        let (out, mut ck) = run_pretrain(&self.protocol, data, self.cfg.seed, self.cfg.schedule.method)?;
        ck.config_hash = hash;
        self.dir("checkpoints")?;
        let path = self.checkpoint_path(Stage::BasePretrain);
        ck.save(&path)?;
        write_log(&self.dir("logs")?.join("base_pretrain.csv"), &out.log)?;
        println!("base_pretrain: {} steps -> {}", out.log.len(), path.display());
        Ok(ck)
    }

    pub fn pretrain(&self, force: bool) -> Result<()> {
        let data = self.data()?;
        self.base_checkpoint(force, &data).map(|_| ())
    }

    pub fn finetune(&self, force: bool) -> Result<()> {
        let data = self.data()?;
        let base = self.base_checkpoint(false, &data)?;
        let hash = self.stage_hash(Stage::BalancedFinetune, &base.config_hash)?;
        if self.reusable(Stage::BalancedFinetune, &hash, force)?.is_some() {
            return Ok(());
        }
        let [(nh, mut nh_ck), (ft, mut ft_ck)] = run_few_shot(&self.protocol, &data, self.cfg.seed, self.cfg.schedule.method, &base)?;
        nh_ck.config_hash = self.stage_hash(Stage::NovelHead, &base.config_hash)?;
        ft_ck.config_hash = hash;
        self.dir("checkpoints")?;
        let logs = self.dir("logs")?;
        for (stage, out, ck) in [(Stage::NovelHead, &nh, &nh_ck), (Stage::BalancedFinetune, &ft, &ft_ck)] {
            let path = self.checkpoint_path(stage);
            ck.save(&path)?;
            write_log(&logs.join(format!("{}.csv", stage.name())), &out.log)?;
            println!("{}: {} steps -> {}", stage.name(), out.log.len(), path.display());
        }
        Ok(())
    }

    fn test_and_split(&self) -> Result<(Dataset, FewShotSplit)> {
        let (_, few_shot_path) = self.split_paths();
        let split = if few_shot_path.exists() {
            FewShotSplit::load(&few_shot_path)?
        } else {
            // class groups alone suffice for evaluation
            FewShotSplit {
                base_class_ids: self.cfg.split.base_classes.iter().copied().collect(),
                novel_class_ids: self.cfg.split.novel_classes.iter().copied().collect(),
                k: self.cfg.split.k_shot,
                seed: self.cfg.seed,
                shot_instances: Default::default(),
            }
        };
        let (_, test) = self.datasets()?;
        Ok((test, split))
    }

    pub fn eval(&self, checkpoint: Option<&Path>) -> Result<()> {
        let (test, split) = self.test_and_split()?;
        let reports = self.dir("reports")?;
        let emit = |name: &str, report: &EvalReport| -> Result<()> {
            let path = reports.join(format!("{name}.json"));
            report.save(&path)?;
            let fmt = |v: Option<f64>| v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
            println!(
                "{name}: base AP {} novel AP {} overall AP {} AR@300 {} -> {}",
                fmt(report.base_ap),
                fmt(report.novel_ap),
                fmt(report.overall_ap),
                fmt(report.proposal_recall.ar_300),
                path.display()
            );
            Ok(())
        };
        if let Some(path) = checkpoint {
            let ck = Checkpoint::load(path)?;
            return emit(&stem(path), &generalized_report(&ck, &test, &split, None)?);
        }
        let base_path = self.checkpoint_path(Stage::BasePretrain);
        if !base_path.exists() {
            bail!("no checkpoint at {}; run `ledet pretrain` first", base_path.display());
        }
        let base = generalized_report(&Checkpoint::load(&base_path)?, &test, &split, None)?;
        emit(Stage::BasePretrain.name(), &base)?;
        let ft_path = self.checkpoint_path(Stage::BalancedFinetune);
        if ft_path.exists() {
            let ft = generalized_report(&Checkpoint::load(&ft_path)?, &test, &split, base.base_ap)?;
            emit(Stage::BalancedFinetune.name(), &ft)?;
        }
        Ok(())
    }

    pub fn proposals(&self, checkpoint: Option<&Path>) -> Result<()> {
        let (path, name) = match checkpoint {
            Some(p) => (p.to_path_buf(), stem(p)),
            None => (self.checkpoint_path(self.cfg.eval.proposal_stage), self.cfg.eval.proposal_stage.name().to_string()),
        };
        if !path.exists() {
            bail!("no checkpoint at {}", path.display());
        }
        let ck = Checkpoint::load(&path)?;
        let params = ck.teacher.as_ref().unwrap_or(&ck.student);
        let (test, _) = self.test_and_split()?;
        let out_path = self.dir("proposals")?.join(format!("{name}.jsonl"));
        let file = std::fs::File::create(&out_path).with_context(|| format!("creating {}", out_path.display()))?;
        let mut w = std::io::BufWriter::new(file);
        let mut n = 0;
        for rec in &test.index.images {
            let pass = ImagePass::forward(params, test.image(rec.id));
            for p in pass.proposals(params, self.cfg.eval.proposal_budget) {
                let b = p.bbox;
                let line = ProposalLine {
                    image_id: rec.id,
                    bbox: [b.x1, b.y1, b.x2, b.y2],
                    score: p.score,
                };
                writeln!(w, "{}", serde_json::to_string(&line)?)?;
                n += 1;
            }
        }
        w.flush()?;
        println!("proposals: {n} over {} images -> {}", test.index.images.len(), out_path.display());
        Ok(())
    }

    pub fn plot(&self) -> Result<()> {
        let mut plots = Vec::new();
        for stage in [Stage::BasePretrain, Stage::NovelHead, Stage::BalancedFinetune] {
            let path = self.root.join("logs").join(format!("{}.csv", stage.name()));
            if !path.exists() {
                continue;
            }
            let rows = read_csv(&path)?;
            if rows.is_empty() {
                continue;
            }
            let series = |label: &str, f: fn(&StepLog) -> f64| Series {
                label: label.into(),
                points: rows.iter().map(|r| (r.step as f64, f(r))).collect(),
            };
            plots.push(Plot {
                name: format!("losses_{}", stage.name()),
                x_label: "step".into(),
                y_label: "loss".into(),
                kind: PlotKind::Line,
                series: vec![
                    series("total", |r| r.total),
                    series("L_sup", |r| r.l_sup),
                    series("L_cls_soft", |r| r.l_cls_soft),
                    series("L_reg_soft", |r| r.l_reg_soft),
                    series("L_ent", |r| r.l_ent),
                    series("L_iou", |r| r.l_iou),
                ],
            });
        }
        let mut recall = Vec::new();
        let mut per_class = Vec::new();
        for stage in [Stage::BasePretrain, Stage::BalancedFinetune] {
            let path = self.root.join("reports").join(format!("{}.json", stage.name()));
            if !path.exists() {
                continue;
            }
            let r = EvalReport::load(&path)?;
            let ars = [r.proposal_recall.ar_100, r.proposal_recall.ar_300, r.proposal_recall.ar_1000];
            let points: Vec<(f64, f64)> = PROPOSAL_BUDGETS.iter().zip(ars).filter_map(|(&b, ar)| ar.map(|a| (b as f64, a))).collect();
            if !points.is_empty() {
                recall.push(Series {
                    label: stage.name().into(),
                    points,
                });
            }
            if !r.per_class_ap.is_empty() {
                per_class.push(Series {
                    label: stage.name().into(),
                    points: r.per_class_ap.iter().map(|(&c, &ap)| (c as f64, ap)).collect(),
                });
            }
        }
        if !recall.is_empty() {
            plots.push(Plot {
                name: "proposal_recall".into(),
                x_label: "proposals".into(),
                y_label: "AR".into(),
                kind: PlotKind::Line,
                series: recall,
            });
        }
        if !per_class.is_empty() {
            plots.push(Plot {
                name: "per_class_ap".into(),
                x_label: "category".into(),
                y_label: "AP".into(),
                kind: PlotKind::Scatter,
                series: per_class,
            });
        }
        if plots.is_empty() {
            bail!("nothing to plot under {}; run training or eval first", self.root.display());
        }
        let written = emit_plots(&plots, &self.dir("plots")?)?;
        let names: BTreeSet<String> = written.iter().filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned())).collect();
        println!("plot: {}", names.into_iter().collect::<Vec<_>>().join(" "));
        Ok(())
    }
}
