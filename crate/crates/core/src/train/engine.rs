use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{stage_lr, DecayMode, Interleave, TrainConfig};
use super::loss::{artifact_loss_grad, global_loss_grad, rank_loss_grad, total_loss};
use super::plan::{Stage, StagePlan};
use crate::error::{Error, Result};
use crate::lab::{derive_seed, Corpus, DistortionKind, DomainTag, KernelParams, MosRecord, ARTIFACTS};
use crate::metrics::{f1_accuracy_auc, plcc, srocc, BinaryOutcomes};
use crate::model::{assemble_input, save_checkpoint, CheckpointMeta, Mode, Model, ModelInput, Routing};
use crate::nn::Adam;
use crate::pipeline::segment_clips;
use crate::video::FrameSequence;

/// Artifacts the diagnostic head is expected to separate cleanly on synthetic data.
pub const SEPARABLE_ARTIFACTS: [DistortionKind; 3] =
    [DistortionKind::BlackFrame, DistortionKind::Blockiness, DistortionKind::Banding];

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: u8,
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    pub losses: BTreeMap<String, f64>,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageReport {
    pub stage: Stage,
    pub epochs: Vec<EpochRecord>,
    /// `(group, hash)` of every frozen group, identical before and after the stage.
    pub frozen_hashes: Vec<(String, String)>,
}

impl StageReport {
    pub fn last(&self) -> &EpochRecord {
        self.epochs.last().expect("at least one epoch")
    }
}

/// Where a run writes checkpoints (`stage{n}/epoch-NNN`, `stage{n}/final`) and its
/// append-only JSONL metric log.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub checkpoints: PathBuf,
    pub log: PathBuf,
    /// Echo one line per epoch to stderr.
    pub verbose: bool,
}

impl RunOutput {
    /// `root/checkpoints` and `root/logs/metrics.jsonl`.
    pub fn new(root: impl Into<PathBuf>) -> Self {
        let root = root.into();
        Self::with_paths(root.join("checkpoints"), root.join("logs").join("metrics.jsonl"))
    }

    pub fn with_paths(checkpoints: impl Into<PathBuf>, log: impl Into<PathBuf>) -> Self {
        Self { checkpoints: checkpoints.into(), log: log.into(), verbose: false }
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.checkpoints.join(format!("stage{}", stage.number()))
    }

    pub fn epoch_checkpoint(&self, stage: Stage, epoch: usize) -> PathBuf {
        self.stage_dir(stage).join(format!("epoch-{epoch:03}"))
    }

    pub fn final_checkpoint(&self, stage: Stage) -> PathBuf {
        self.stage_dir(stage).join("final")
    }

    pub fn log_path(&self) -> PathBuf {
        self.log.clone()
    }

    fn record(&self, model: &Model, cfg: &TrainConfig, stage: Stage, rec: &EpochRecord, last: bool) -> Result<()> {
        let meta = CheckpointMeta {
            stage: stage.number(),
            epoch: rec.epoch,
            seed: cfg.seed,
            provenance: [("stage".to_string(), stage.key().to_string())].into(),
        };
        save_checkpoint(&self.epoch_checkpoint(stage, rec.epoch), model, &meta)?;
        if last {
            save_checkpoint(&self.final_checkpoint(stage), model, &meta)?;
        }
        append_jsonl(&self.log_path(), rec)?;
        if self.verbose {
            eprintln!("{}", serde_json::to_string(rec)?);
        }
        Ok(())
    }
}

fn append_jsonl<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{}", serde_json::to_string(value)?)?;
    Ok(())
}

fn input(model: &Model, dist: &FrameSequence, reference: &FrameSequence) -> Result<ModelInput> {
    match model.config.mode {
        Mode::Fr => assemble_input(dist, Some(reference), Mode::Fr),
        Mode::Nr => assemble_input(dist, None, Mode::Nr),
    }
}

fn optimizer(cfg: &TrainConfig) -> Adam {
    let weight_decay = match cfg.decay_mode {
        DecayMode::StepDecay => 0.0,
        DecayMode::WeightDecay => cfg.lr_decay_factor,
    };
    Adam { beta1: cfg.adam_beta1, beta2: cfg.adam_beta2, weight_decay, ..Adam::default() }
}

/// Checks frozen gradients, updates trainable groups, clears every gradient.
fn step(model: &mut Model, plan: &StagePlan, adam: &Adam, lr: f64) -> Result<()> {
    plan.check_frozen_gradients(model)?;
    model.visit_mut(&mut |g, _, p| {
        if plan.trainable_groups.iter().any(|t| t == g) {
            adam.update(p, lr);
        }
    });
    model.zero_grad();
    Ok(())
}

fn verify_frozen(plan: &StagePlan, model: &Model, before: &[(String, String)]) -> Result<()> {
    let after = plan.frozen_hashes(model);
    for ((g, h0), (_, h1)) in before.iter().zip(&after) {
        if h0 != h1 {
            return Err(Error::Contract(format!("{}: frozen group {g} changed", plan.stage)));
        }
    }
    Ok(())
}

/// Per-epoch bookkeeping shared by the three stages.
struct Epochs<'a> {
    cfg: &'a TrainConfig,
    stage: Stage,
    out: Option<&'a RunOutput>,
    records: Vec<EpochRecord>,
}

impl Epochs<'_> {
    fn finish(&mut self, model: &Model, epoch: usize, lr: f64, steps: usize, losses: BTreeMap<String, f64>, metrics: BTreeMap<String, f64>) -> Result<()> {
        let rec = EpochRecord { stage: self.stage.number(), epoch, lr, steps, losses, metrics };
        if let Some(out) = self.out {
            out.record(model, self.cfg, self.stage, &rec, epoch + 1 == self.cfg.epochs_for(self.stage))?;
        }
        self.records.push(rec);
        Ok(())
    }
}

fn mean(sum: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Batches of pair indices for one Stage-1 epoch, as `(domain, indices)`.
fn stage1_schedule<R: Rng>(sizes: &[(DomainTag, usize)], batch: usize, mode: Interleave, rng: &mut R) -> Vec<(DomainTag, Vec<usize>)> {
    let mut perms: Vec<Vec<usize>> = sizes
        .iter()
        .map(|&(_, n)| {
            let mut p: Vec<usize> = (0..n).collect();
            p.shuffle(rng);
            p
        })
        .collect();
    let batches_of = |n: usize| n.div_ceil(batch);
    match mode {
        Interleave::RoundRobin => {
            let rounds = sizes.iter().map(|&(_, n)| batches_of(n)).max().unwrap_or(0);
            let mut cursors = vec![0usize; sizes.len()];
            let mut out = Vec::new();
            for _ in 0..rounds {
                for (k, &(d, n)) in sizes.iter().enumerate() {
                    let mut idx = Vec::with_capacity(batch);
                    while idx.len() < batch.min(n) {
                        if cursors[k] == n {
                            perms[k].shuffle(rng);
                            cursors[k] = 0;
                        }
                        idx.push(perms[k][cursors[k]]);
                        cursors[k] += 1;
                    }
                    out.push((d, idx));
                }
            }
            out
        }
        Interleave::Proportional => {
            let mut keyed: Vec<(f64, usize, DomainTag, Vec<usize>)> = Vec::new();
            for (k, &(d, n)) in sizes.iter().enumerate() {
                let nb = batches_of(n);
                for (b, chunk) in perms[k].chunks(batch).enumerate() {
                    keyed.push(((b as f64 + 0.5) / nb as f64, k, d, chunk.to_vec()));
                }
            }
            keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            keyed.into_iter().map(|(_, _, d, idx)| (d, idx)).collect()
        }
    }
}

/// Stage 1: ranking pre-training, each batch routed to one domain's expert.
///
/// Sets the Stage-1 freeze flags itself.
pub fn run_stage1(model: &mut Model, corpus: &Corpus, cfg: &TrainConfig, out: Option<&RunOutput>) -> Result<StageReport> {
    cfg.validate()?;
    let train = &corpus.stage1.train;
    if let crate::model::ExpertLayout::PerDomain { domains } = &model.config.experts {
        if let Some(d) = domains.iter().find(|d| train.get(d).is_none_or(|v| v.is_empty())) {
            return Err(Error::Config(format!("no Stage-1 corpus for configured domain {d}")));
        }
    }
    let sizes: Vec<(DomainTag, usize)> = train.iter().filter(|(_, v)| !v.is_empty()).map(|(&d, v)| (d, v.len())).collect();
    if sizes.is_empty() {
        return Err(Error::Config("Stage-1 corpus is empty".into()));
    }
    let stage = Stage::S1RankPretrain;
    let plan = StagePlan::for_model(stage, model);
    plan.apply(model)?;
    model.reset_optimizer();
    model.zero_grad();
    let before = plan.frozen_hashes(model);
    let adam = optimizer(cfg);
    let kernels = &corpus.config.lab.kernels;
    let sources = &corpus.patch_sources.train;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[1]));
    let mut log = Epochs { cfg, stage, out, records: Vec::new() };

    for epoch in 0..cfg.epochs_for(stage) {
        let lr = stage_lr(epoch, cfg.base_lr(stage), cfg);
        let schedule = stage1_schedule(&sizes, cfg.batch_size, cfg.interleave, &mut rng);
        let mut sums: BTreeMap<DomainTag, (f64, usize)> = BTreeMap::new();
        for (domain, idx) in &schedule {
            let scale = 1.0 / idx.len() as f64;
            for &i in idx {
                let rec = &train[domain][i];
                let (a, b, reference) = rec.materialize(sources, kernels)?;
                let routing = Routing::Domain(*domain);
                let (pa, ca) = model.forward_train(&input(model, &a, &reference)?, routing, Some(&mut rng))?;
                let (pb, cb) = model.forward_train(&input(model, &b, &reference)?, routing, Some(&mut rng))?;
                let (loss, g) = rank_loss_grad(pa.q, pb.q, rec.v_binary, cfg.bce_epsilon);
                model.backward(&ca, g * scale, None);
                model.backward(&cb, -g * scale, None);
                let s = sums.entry(*domain).or_default();
                s.0 += loss;
                s.1 += 1;
            }
            step(model, &plan, &adam, lr)?;
        }
        let mut losses: BTreeMap<String, f64> = sums.iter().map(|(d, &(s, n))| (format!("rank_{d}"), mean(s, n))).collect();
        let (s, n) = sums.values().fold((0.0, 0), |acc, &(s, n)| (acc.0 + s, acc.1 + n));
        losses.insert("rank".into(), mean(s, n));
        let metrics = evaluate_stage1(model, corpus)?;
        log.finish(model, epoch, lr, schedule.len(), losses, metrics)?;
    }
    verify_frozen(&plan, model, &before)?;
    Ok(StageReport { stage, epochs: log.records, frozen_hashes: before })
}

/// Held-out pairwise ranking accuracy per domain (`acc_{domain}`), with domain routing.
pub fn evaluate_stage1(model: &Model, corpus: &Corpus) -> Result<BTreeMap<String, f64>> {
    let kernels = &corpus.config.lab.kernels;
    let sources = &corpus.patch_sources.val;
    let mut out = BTreeMap::new();
    for (&domain, pairs) in &corpus.stage1.val {
        if pairs.is_empty() || corpus.stage1.train.get(&domain).is_none_or(|v| v.is_empty()) {
            continue;
        }
        let mut correct = 0usize;
        for rec in pairs {
            let (a, b, reference) = rec.materialize(sources, kernels)?;
            let qa = model.forward(&input(model, &a, &reference)?, Routing::Domain(domain))?.q;
            let qb = model.forward(&input(model, &b, &reference)?, Routing::Domain(domain))?.q;
            if u8::from(qa > qb) == rec.v_binary {
                correct += 1;
            }
        }
        out.insert(format!("acc_{domain}"), correct as f64 / pairs.len() as f64);
    }
    Ok(out)
}

/// Fused representations and labels of Stage-2 patches.
fn stage2_features(model: &Model, records: &[crate::lab::ArtifactRecord], sources: &[FrameSequence], kernels: &KernelParams) -> Result<(Array2<f64>, Vec<Vec<u8>>)> {
    let mut z = Array2::zeros((records.len(), model.config.fused_dim()));
    let mut labels = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let (patch, reference) = r.materialize(sources, kernels)?;
        let s = model.streams(&input(model, &patch, &reference)?, Routing::All)?;
        z.row_mut(i).assign(&model.fuse(&s)?.row(0));
        labels.push(r.labels.bits().to_vec());
    }
    Ok((z, labels))
}

/// Per-artifact F1 (`f1_{name}`), `macro_f1` over all classes and
/// `macro_f1_separable` over [`SEPARABLE_ARTIFACTS`].
fn detection_metrics(probs: &[Vec<f64>], labels: &[Vec<u8>]) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    let (mut all, mut sep) = (0.0, 0.0);
    for (i, kind) in ARTIFACTS.iter().enumerate() {
        let o = BinaryOutcomes::from_bits(probs.iter().map(|p| p[i]).collect(), &labels.iter().map(|l| l[i]).collect::<Vec<_>>())?;
        let f1 = f1_accuracy_auc(&o).f1;
        out.insert(format!("f1_{}", kind.name()), f1);
        all += f1;
        if SEPARABLE_ARTIFACTS.contains(kind) {
            sep += f1;
        }
    }
    out.insert("macro_f1".into(), all / ARTIFACTS.len() as f64);
    out.insert("macro_f1_separable".into(), sep / SEPARABLE_ARTIFACTS.len() as f64);
    Ok(out)
}

/// Stage 2: trains `head_A` on weak labels over frozen representations.
///
/// The model's freeze flags must already match the Stage-2 plan.
pub fn run_stage2(model: &mut Model, corpus: &Corpus, cfg: &TrainConfig, out: Option<&RunOutput>) -> Result<StageReport> {
    cfg.validate()?;
    let stage = Stage::S2Diagnostic;
    let plan = StagePlan::for_model(stage, model);
    plan.check(model)?;
    if corpus.stage2.train.is_empty() || corpus.stage2.val.is_empty() {
        return Err(Error::Config("Stage-2 corpus needs train and val patches".into()));
    }
    model.reset_optimizer();
    model.zero_grad();
    let before = plan.frozen_hashes(model);
    let adam = optimizer(cfg);
    let kernels = &corpus.config.lab.kernels;
    let (z_train, y_train) = stage2_features(model, &corpus.stage2.train, &corpus.patch_sources.train, kernels)?;
    let (z_val, y_val) = stage2_features(model, &corpus.stage2.val, &corpus.patch_sources.val, kernels)?;
    model.head_a.input.fit(&z_train);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[2]));
    let mut log = Epochs { cfg, stage, out, records: Vec::new() };
    let mut order: Vec<usize> = (0..y_train.len()).collect();

    for epoch in 0..cfg.epochs_for(stage) {
        let lr = stage_lr(epoch, cfg.base_lr(stage), cfg);
        order.shuffle(&mut rng);
        let (mut sum, mut steps) = (0.0, 0);
        for idx in order.chunks(cfg.batch_size) {
            let z = z_train.select(Axis(0), idx);
            let (preds, cache) = model.predict_cached(&z, Some(&mut rng))?;
            let mut da = Vec::with_capacity(idx.len());
            for (p, &i) in preds.iter().zip(idx) {
                let (l, g) = artifact_loss_grad(&p.a, &y_train[i], cfg.bce_epsilon)?;
                sum += l;
                da.push(g.into_iter().map(|g| g / idx.len() as f64).collect());
            }
            model.backward_head_a(&cache, &da);
            step(model, &plan, &adam, lr)?;
            steps += 1;
        }
        let losses = [("artifact".to_string(), mean(sum, y_train.len()))].into();
        let probs: Vec<Vec<f64>> = model.predict(&z_val)?.into_iter().map(|p| p.a).collect();
        let metrics = detection_metrics(&probs, &y_val)?;
        log.finish(model, epoch, lr, steps, losses, metrics)?;
    }
    verify_frozen(&plan, model, &before)?;
    Ok(StageReport { stage, epochs: log.records, frozen_hashes: before })
}

/// A Stage-3 video reduced to cached extractor embeddings, one per clip.
struct CachedVideo {
    clips: Vec<Array2<f64>>,
    tokens: usize,
    mos: f64,
    labels: Vec<u8>,
    domain: DomainTag,
}

fn cache_videos(model: &Model, records: &[MosRecord], sources: &[FrameSequence], kernels: &KernelParams) -> Result<Vec<CachedVideo>> {
    let len = model.config.clip_len;
    records
        .iter()
        .map(|r| {
            let (reference, dist) = r.materialize(sources, kernels)?;
            let (dc, rc) = (segment_clips(&dist, len)?, segment_clips(&reference, len)?);
            let mut clips = Vec::with_capacity(dc.len());
            let mut tokens = 0;
            for (d, rf) in dc.iter().zip(&rc) {
                let x = input(model, d, rf)?;
                tokens = x.tokens(model.config.patch_size);
                clips.push(model.embed(&x)?);
            }
            Ok(CachedVideo { clips, tokens, mos: r.mos.score, labels: r.labels.bits().to_vec(), domain: r.domain })
        })
        .collect()
}

fn video_quality(model: &Model, v: &CachedVideo) -> Result<f64> {
    let mut q = 0.0;
    for e in &v.clips {
        let z = model.fuse(&model.streams_from(e, v.tokens, Routing::All))?;
        q += model.predict(&z)?[0].q;
    }
    Ok(q / v.clips.len() as f64)
}

/// Rescales head_Q's output layer so training-video predictions match the MOS mean
/// and spread. The sign is kept, so the ranking is unchanged.
fn calibrate_quality(model: &mut Model, videos: &[CachedVideo]) -> Result<()> {
    let q: Vec<f64> = videos.iter().map(|v| video_quality(model, v)).collect::<Result<_>>()?;
    let s: Vec<f64> = videos.iter().map(|v| v.mos).collect();
    let moments = |x: &[f64]| {
        let m = x.iter().sum::<f64>() / x.len() as f64;
        (m, (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.len() as f64).sqrt())
    };
    let ((mq, sq), (ms, ss)) = (moments(&q), moments(&s));
    if sq < 1e-9 || ss < 1e-9 {
        return Ok(());
    }
    let a = ss / sq;
    let out = &mut model.head_q.out;
    out.w.value *= a;
    out.b.value.mapv_inplace(|b| a * b + ms - a * mq);
    Ok(())
}

/// `srocc`, `plcc` and per-domain `srocc_{domain}` of video quality against MOS.
fn stage3_metrics(model: &Model, videos: &[CachedVideo]) -> Result<BTreeMap<String, f64>> {
    let q: Vec<f64> = videos.iter().map(|v| video_quality(model, v)).collect::<Result<_>>()?;
    let s: Vec<f64> = videos.iter().map(|v| v.mos).collect();
    let mut out = BTreeMap::new();
    out.insert("srocc".to_string(), srocc(&q, &s)?);
    out.insert("plcc".to_string(), plcc(&q, &s)?);
    for d in DomainTag::ALL {
        let (qd, sd): (Vec<f64>, Vec<f64>) = videos.iter().zip(&q).filter(|(v, _)| v.domain == d).map(|(v, &q)| (q, v.mos)).unzip();
        if qd.len() >= 2 {
            if let Ok(r) = srocc(&qd, &sd) {
                out.insert(format!("srocc_{d}"), r);
            }
        }
    }
    Ok(out)
}

/// Held-out Stage-3 metrics of `model` on the corpus validation videos.
pub fn evaluate_stage3(model: &Model, corpus: &Corpus) -> Result<BTreeMap<String, f64>> {
    let videos = cache_videos(model, &corpus.stage3.val, &corpus.video_sources.val, &corpus.config.lab.kernels)?;
    stage3_metrics(model, &videos)
}

/// Held-out Stage-2 detection metrics.
pub fn evaluate_stage2(model: &Model, corpus: &Corpus) -> Result<BTreeMap<String, f64>> {
    let (z, y) = stage2_features(model, &corpus.stage2.val, &corpus.patch_sources.val, &corpus.config.lab.kernels)?;
    let probs: Vec<Vec<f64>> = model.predict(&z)?.into_iter().map(|p| p.a).collect();
    detection_metrics(&probs, &y)
}

/// Forward state of one video inside a Stage-3 step.
struct VideoPass {
    q: f64,
    clips: Vec<(crate::model::FusionCache, crate::model::HeadsCache, Vec<f64>)>,
}

fn video_pass<R: Rng>(model: &Model, v: &CachedVideo, rng: &mut R) -> Result<VideoPass> {
    let mut q = 0.0;
    let mut clips = Vec::with_capacity(v.clips.len());
    for e in &v.clips {
        let (z, fusion) = model.fuse_cached(&model.streams_from(e, v.tokens, Routing::All))?;
        let (mut p, heads) = model.predict_cached(&z, Some(&mut *rng))?;
        let p = p.remove(0);
        q += p.q;
        clips.push((fusion, heads, p.a));
    }
    Ok(VideoPass { q: q / v.clips.len() as f64, clips })
}

/// Artifact loss averaged over clips and its per-clip gradients.
fn video_artifact_loss(pass: &VideoPass, labels: &[u8], eps: f64) -> Result<(f64, Vec<Vec<f64>>)> {
    let n = pass.clips.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(pass.clips.len());
    for (_, _, a) in &pass.clips {
        let (l, g) = artifact_loss_grad(a, labels, eps)?;
        total += l / n;
        grads.push(g.into_iter().map(|g| g / n).collect());
    }
    Ok((total, grads))
}

/// Backprop of `dq` (with respect to video quality) and per-clip artifact gradients
/// into the aggregator and heads. Nothing reaches the frozen extractor or experts.
fn video_backward(model: &mut Model, pass: &VideoPass, dq: f64, da: Option<&[Vec<f64>]>) {
    let n = pass.clips.len() as f64;
    for (k, (fusion, heads, _)) in pass.clips.iter().enumerate() {
        let da_k = da.map(|d| vec![d[k].clone()]);
        let dz = model.backward_heads(heads, &[dq / n], da_k.as_deref());
        model.backward_fusion(fusion, &dz);
    }
}

/// Stage 3: joint fine-tuning of aggregator and both heads on opinion-score differences.
///
/// The model's freeze flags must already match the Stage-3 plan.
pub fn run_stage3(model: &mut Model, corpus: &Corpus, cfg: &TrainConfig, out: Option<&RunOutput>) -> Result<StageReport> {
    cfg.validate()?;
    let stage = Stage::S3Joint;
    let plan = StagePlan::for_model(stage, model);
    plan.check(model)?;
    if corpus.stage3.train.len() < 2 || corpus.stage3.val.len() < 2 {
        return Err(Error::Config("Stage-3 corpus needs at least two train and two val videos".into()));
    }
    model.reset_optimizer();
    model.zero_grad();
    let before = plan.frozen_hashes(model);
    let adam = optimizer(cfg);
    let kernels = &corpus.config.lab.kernels;
    let train = cache_videos(model, &corpus.stage3.train, &corpus.video_sources.train, kernels)?;
    let val = cache_videos(model, &corpus.stage3.val, &corpus.video_sources.val, kernels)?;
    calibrate_quality(model, &train)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[3]));
    let mut log = Epochs { cfg, stage, out, records: Vec::new() };
    let n = train.len();

    for epoch in 0..cfg.epochs_for(stage) {
        let lr = stage_lr(epoch, cfg.base_lr(stage), cfg);
        let mut pairs = Vec::with_capacity(n * cfg.stage3_pairs_per_video);
        for _ in 0..cfg.stage3_pairs_per_video {
            let mut xs: Vec<usize> = (0..n).collect();
            xs.shuffle(&mut rng);
            for x in xs {
                let y = (x + rng.random_range(1..n)) % n;
                pairs.push((x, y));
            }
        }
        let (mut sg, mut sa, mut st, mut steps) = (0.0, 0.0, 0.0, 0);
        for batch in pairs.chunks(cfg.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            for &(x, y) in batch {
                let (vx, vy) = (&train[x], &train[y]);
                let px = video_pass(model, vx, &mut rng)?;
                let py = video_pass(model, vy, &mut rng)?;
                let (lg, g) = global_loss_grad(px.q, py.q, vx.mos, vy.mos);
                let (lax, gax) = video_artifact_loss(&px, &vx.labels, cfg.bce_epsilon)?;
                let (lay, gay) = video_artifact_loss(&py, &vy.labels, cfg.bce_epsilon)?;
                let la = 0.5 * (lax + lay);
                sg += lg;
                sa += la;
                st += total_loss(lg, la, cfg);
                let wa = 0.5 * cfg.lambda_a * scale;
                let da = |gs: Vec<Vec<f64>>| -> Vec<Vec<f64>> { gs.into_iter().map(|g| g.into_iter().map(|v| v * wa).collect()).collect() };
                let (dax, day) = (da(gax), da(gay));
                let use_a = cfg.lambda_a > 0.0;
                video_backward(model, &px, cfg.lambda_g * g * scale, use_a.then_some(dax.as_slice()));
                video_backward(model, &py, -cfg.lambda_g * g * scale, use_a.then_some(day.as_slice()));
            }
            step(model, &plan, &adam, lr)?;
            steps += 1;
        }
        let np = pairs.len();
        let losses = [("global", mean(sg, np)), ("artifact", mean(sa, np)), ("total", mean(st, np))]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        let metrics = stage3_metrics(model, &val)?;
        log.finish(model, epoch, lr, steps, losses, metrics)?;
    }
    verify_frozen(&plan, model, &before)?;
    Ok(StageReport { stage, epochs: log.records, frozen_hashes: before })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_robin_gives_every_domain_equal_turns() {
        let sizes = [(DomainTag::Spatial, 11), (DomainTag::Color, 2), (DomainTag::Temporal, 5)];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = stage1_schedule(&sizes, 4, Interleave::RoundRobin, &mut rng);
        assert_eq!(s.len(), 9);
        for (k, (d, idx)) in s.iter().enumerate() {
            assert_eq!(*d, sizes[k % 3].0);
            assert_eq!(idx.len(), 4.min(sizes[k % 3].1));
        }
        let p = stage1_schedule(&sizes, 4, Interleave::Proportional, &mut rng);
        assert_eq!(p.len(), 3 + 1 + 2);
        for (d, n) in sizes {
            let mut seen: Vec<usize> = p.iter().filter(|(e, _)| *e == d).flat_map(|(_, i)| i.clone()).collect();
            seen.sort_unstable();
            assert_eq!(seen, (0..n).collect::<Vec<_>>());
        }
    }
}
