use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{RunConfig, PROXY_SCORES_ENV};
use super::variant::Variant;
use crate::error::{Error, Result};
use crate::lab::{BuiltinProxies, Corpus, DomainTag, ExternalProxyScores, PairOracle};
use crate::model::{load_checkpoint, Model};
use crate::train::{evaluate_stage3, run_stage1, run_stage2, run_stage3, RunOutput, Stage, StagePlan, StageReport};

/// Proxy oracle for Stage-1 labels: the score file named by the environment, or the built-in proxies.
pub fn proxy_oracle() -> Result<Box<dyn PairOracle>> {
    match std::env::var_os(PROXY_SCORES_ENV) {
        Some(p) if !p.is_empty() => {
            let path = PathBuf::from(p);
            let scores = ExternalProxyScores::load(&path)
                .map_err(|e| Error::Config(format!("{PROXY_SCORES_ENV}={}: {e}", path.display())))?;
            Ok(Box::new(scores))
        }
        _ => Ok(Box::new(BuiltinProxies)),
    }
}

/// Generates all three corpora and writes them under the corpus directory.
pub fn synth(cfg: &RunConfig) -> Result<Corpus> {
    let cfg = cfg.resolved()?;
    let dir = cfg.corpora_dir()?;
    let corpus = Corpus::build(&cfg.corpus, cfg.seed, proxy_oracle()?.as_ref())?;
    corpus.write(&dir)?;
    Ok(corpus)
}

pub fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    let dir = cfg.corpora_dir()?;
    if !dir.join("corpus.json").exists() {
        return Err(Error::Missing(format!("no corpus at {}; run synth first", dir.display())));
    }
    Corpus::read(&dir)
}

/// Checkpoint a stage starts from, if any.
fn prerequisite(variant: Variant, stage: Stage) -> Result<Option<Stage>> {
    match stage {
        Stage::S1RankPretrain => Ok(None),
        Stage::S2Diagnostic if !variant.has_diagnostics() => {
            Err(Error::Config(format!("variant {variant} has no Stage 2")))
        }
        Stage::S2Diagnostic => Ok(Some(Stage::S1RankPretrain)),
        Stage::S3Joint if variant.has_diagnostics() => Ok(Some(Stage::S2Diagnostic)),
        Stage::S3Joint => Ok(Some(Stage::S1RankPretrain)),
    }
}

/// Runs one stage on `model`, applying its freeze plan first.
pub fn run_stage(stage: Stage, model: &mut Model, corpus: &Corpus, cfg: &RunConfig, out: Option<&RunOutput>) -> Result<StageReport> {
    match stage {
        Stage::S1RankPretrain => run_stage1(model, corpus, &cfg.train, out),
        Stage::S2Diagnostic => {
            StagePlan::for_model(stage, model).apply(model)?;
            run_stage2(model, corpus, &cfg.train, out)
        }
        Stage::S3Joint => {
            StagePlan::for_model(stage, model).apply(model)?;
            run_stage3(model, corpus, &cfg.train, out)
        }
    }
}

/// Trains `stage`, or every stage of the variant when `None`, from the corpus on disk.
/// Prerequisites are checked before anything is written.
pub fn train(cfg: &RunConfig, stage: Option<Stage>) -> Result<Vec<StageReport>> {
    let cfg = cfg.resolved()?;
    let out = RunOutput::new(cfg.out_dir()?);
    let stages = match stage {
        Some(s) => {
            prerequisite(cfg.variant, s)?;
            vec![s]
        }
        None => cfg.variant.stages(),
    };
    let mut model = match prerequisite(cfg.variant, stages[0])? {
        None => Model::new(cfg.model.clone(), cfg.seed)?,
        Some(prev) => {
            let path = out.final_checkpoint(prev);
            if !path.join("index.json").exists() {
                return Err(Error::Missing(format!(
                    "{stages0} needs the {prev} checkpoint at {}",
                    path.display(),
                    stages0 = stages[0]
                )));
            }
            let (m, _) = load_checkpoint(&path)?;
            if m.config != cfg.model {
                return Err(Error::Config(format!("checkpoint {} was trained with a different model config", path.display())));
            }
            m
        }
    };
    let corpus = cfg.variant.restrict(&load_corpus(&cfg)?);
    stages.into_iter().map(|s| run_stage(s, &mut model, &corpus, &cfg, Some(&out))).collect()
}

/// Final checkpoint of the latest stage present under `checkpoints`.
pub fn latest_checkpoint(checkpoints: &Path) -> Result<PathBuf> {
    [3, 2, 1]
        .iter()
        .map(|n| checkpoints.join(format!("stage{n}")).join("final"))
        .find(|p| p.join("index.json").exists())
        .ok_or_else(|| Error::Missing(format!("no final checkpoint under {}", checkpoints.display())))
}

/// Result of training one configuration end to end.
#[derive(Clone, Debug)]
pub struct PipelineRun {
    pub model: Model,
    pub reports: Vec<StageReport>,
    /// Held-out Stage-3 metrics: `srocc`, `plcc`, `srocc_{domain}`.
    pub heldout: BTreeMap<String, f64>,
}

impl PipelineRun {
    pub fn report(&self, stage: Stage) -> Option<&StageReport> {
        self.reports.iter().find(|r| r.stage == stage)
    }

    /// Held-out SROCC of one domain's videos; absent when that subset is degenerate.
    pub fn domain_srocc(&self, d: DomainTag) -> Result<f64> {
        self.heldout
            .get(&format!("srocc_{d}"))
            .copied()
            .ok_or_else(|| Error::Degenerate(format!("held-out {d} videos give no rank correlation")))
    }

    /// Held-out SROCC averaged over the three domains.
    pub fn mean_domain_srocc(&self) -> Result<f64> {
        Ok(DomainTag::ALL.iter().map(|&d| self.domain_srocc(d)).sum::<Result<f64>>()? / 3.0)
    }
}

/// Trains every stage of `cfg`'s variant on an in-memory corpus. `out` receives
/// checkpoints and logs when given.
pub fn run_pipeline(cfg: &RunConfig, corpus: &Corpus, out: Option<&RunOutput>) -> Result<PipelineRun> {
    let cfg = cfg.resolved()?;
    let corpus = cfg.variant.restrict(corpus);
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    let reports = cfg.variant.stages().into_iter().map(|s| run_stage(s, &mut model, &corpus, &cfg, out)).collect::<Result<_>>()?;
    let heldout = evaluate_stage3(&model, &corpus)?;
    Ok(PipelineRun { model, reports, heldout })
}

/// One trained (variant, seed) cell of the ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub variant: Variant,
    pub seed: u64,
    /// Held-out SROCC per domain.
    pub srocc: BTreeMap<DomainTag, f64>,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    pub cells: Vec<AblationCell>,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let sd = if x.len() > 1 { (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    (m, sd)
}

impl AblationTable {
    fn column(&self, v: Variant, f: impl Fn(&AblationCell) -> f64) -> (f64, f64) {
        let x: Vec<f64> = self.cells.iter().filter(|c| c.variant == v).map(f).collect();
        mean_std(&x)
    }

    /// Seed-averaged mean-over-domains SROCC of a variant.
    pub fn mean_srocc(&self, v: Variant) -> f64 {
        self.column(v, |c| c.mean).0
    }

    /// Aligned text table, one row per variant, `mean±std` at 4 decimals.
    pub fn render(&self) -> String {
        let headers = ["variant", "spatial", "color", "temporal", "mean"];
        let mut rows = vec![headers.map(String::from).to_vec()];
        for &v in &self.variants {
            let mut row = vec![v.tag().to_string()];
            for d in DomainTag::ALL {
                let (m, s) = self.column(v, |c| c.srocc[&d]);
                row.push(format!("{m:.4}±{s:.4}"));
            }
            let (m, s) = self.column(v, |c| c.mean);
            row.push(format!("{m:.4}±{s:.4}"));
            rows.push(row);
        }
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        format!("held-out SROCC over seeds [{}]\n{}", seeds.join(", "), super::eval::align(&rows))
    }
}

/// Trains each variant on the same per-seed corpora and tabulates held-out SROCC per domain.
/// Writes `corpora/seed-N`, `checkpoints/<variant>/seed-N`, `logs/<variant>-seed-N.jsonl`
/// and `reports/ablation.{json,txt}`.
pub fn ablate(cfg: &RunConfig, variants: &[Variant]) -> Result<AblationTable> {
    cfg.validate()?;
    if variants.is_empty() {
        return Err(Error::Config("no variants to ablate".into()));
    }
    let root = cfg.out_dir()?.to_path_buf();
    let oracle = proxy_oracle()?;
    let mut cells = Vec::new();
    for &seed in &cfg.ablation_seeds {
        let base = RunConfig { seed, variant: Variant::Full, ..cfg.clone() };
        let corpus = Corpus::build(&base.corpus, seed, oracle.as_ref())?;
        corpus.write(&root.join("corpora").join(format!("seed-{seed}")))?;
        for &v in variants {
            let run_cfg = RunConfig { variant: v, ..base.clone() };
            let out = RunOutput::with_paths(
                root.join("checkpoints").join(v.tag()).join(format!("seed-{seed}")),
                root.join("logs").join(format!("{}-seed-{seed}.jsonl", v.tag())),
            );
            let run = run_pipeline(&run_cfg, &corpus, Some(&out))?;
            let srocc = DomainTag::ALL.iter().map(|&d| Ok((d, run.domain_srocc(d)?))).collect::<Result<_>>()?;
            cells.push(AblationCell { variant: v, seed, srocc, mean: run.mean_domain_srocc()? });
        }
    }
    let table = AblationTable { variants: variants.to_vec(), seeds: cfg.ablation_seeds.clone(), cells };
    let reports = root.join("reports");
    fs::create_dir_all(&reports)?;
    fs::write(reports.join("ablation.json"), serde_json::to_string_pretty(&table)?)?;
    fs::write(reports.join("ablation.txt"), table.render())?;
    Ok(table)
}

/// Corpus counts, last-epoch metrics per stage from the metric log, and the reports present.
pub fn summarize(cfg: &RunConfig) -> Result<String> {
    let root = cfg.out_dir()?;
    let mut text = String::new();
    let corpora = cfg.corpora_dir()?;
    if corpora.join("corpus.json").exists() {
        text += &format!("corpus {}\n{}\n", corpora.display(), Corpus::read(&corpora)?.summary());
    }
    let log = cfg.logs_dir()?.join("metrics.jsonl");
    if log.exists() {
        let mut last: BTreeMap<u8, serde_json::Value> = BTreeMap::new();
        for line in fs::read_to_string(&log)?.lines().filter(|l| !l.trim().is_empty()) {
            let v: serde_json::Value = serde_json::from_str(line)?;
            let stage = v["stage"].as_u64().unwrap_or(0) as u8;
            last.insert(stage, v);
        }
        for (stage, v) in last {
            text += &format!("stage {stage} epoch {}:", v["epoch"]);
            if let Some(m) = v["metrics"].as_object() {
                for (k, x) in m {
                    text += &format!(" {k}={:.4}", x.as_f64().unwrap_or(f64::NAN));
                }
            }
            text.push('\n');
        }
    }
    if let Ok(ckpt) = latest_checkpoint(&cfg.checkpoints_dir()?) {
        let (m, meta) = load_checkpoint(&ckpt)?;
        let p = cfg.corpus.lab.patch_height;
        text += &format!("checkpoint {} (stage {}, epoch {})\n{}", ckpt.display(), meta.stage, meta.epoch, m.summarize(p, cfg.corpus.lab.patch_width).render());
    }
    let reports = cfg.reports_dir()?;
    if reports.is_dir() {
        let mut names: Vec<String> = fs::read_dir(&reports)?.filter_map(|e| e.ok()).map(|e| e.file_name().to_string_lossy().into_owned()).collect();
        names.sort();
        text += &format!("reports: {}\n", names.join(", "));
    }
    if text.is_empty() {
        return Err(Error::Missing(format!("nothing to summarize under {}", root.display())));
    }
    Ok(text)
}
