//! Training: losses, Adam, the learning-rate schedule, stage plans with
//! their freezing rules, and the resumable stage driver.

mod loss;
mod optim;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use loss::{load_balance_loss, mean_aux_loss, stage1_loss, stage2_loss, LossParts};
pub use optim::{Adam, AdamConfig, LinearSchedule, Moments};

use crate::data::prompt::{training_rows, PromptRow, PromptTemplate};
use crate::data::sample::ConversationSample;
use crate::data::vocab::Vocab;
use crate::error::{Error, Result};
use crate::model::{Checkpoint, Stage, TouchLanguageModel};
use crate::nn::{Module, Param, ParamGroup};
use crate::rng::Rng;
use crate::tensor::{no_grad, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainStage {
    #[serde(rename = "I")]
    One,
    #[serde(rename = "II")]
    Two,
}

impl TrainStage {
    pub fn label(self) -> &'static str {
        match self {
            TrainStage::One => "I",
            TrainStage::Two => "II",
        }
    }
}

/// Which parameter groups a stage updates. Everything else is frozen.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stage: TrainStage,
    pub trainable: BTreeSet<ParamGroup>,
}

impl StagePlan {
    /// Tactile alignment: only the adapter learns.
    pub fn stage1() -> Self {
        StagePlan { stage: TrainStage::One, trainable: [ParamGroup::Adapter].into() }
    }

    /// MoE fine-tuning.
    pub fn stage2() -> Self {
        use ParamGroup::*;
        StagePlan { stage: TrainStage::Two, trainable: [Adapter, Router, Experts, Lora, Head].into() }
    }

    /// Fine-tuning a dense model in place of the MoE one: the dense FFN is
    /// trained where the experts would be.
    pub fn stage2_dense() -> Self {
        use ParamGroup::*;
        StagePlan { stage: TrainStage::Two, trainable: [Adapter, Ffn, Lora, Head].into() }
    }

    pub fn frozen(&self) -> BTreeSet<ParamGroup> {
        ParamGroup::ALL.into_iter().filter(|g| !self.trainable.contains(g)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        for g in [ParamGroup::TouchEncoder, ParamGroup::WordEmbedding] {
            if self.trainable.contains(&g) {
                return Err(Error::Config { field: "plan".into(), message: format!("{g:?} must stay frozen") });
            }
        }
        Ok(())
    }

    fn check_model(&self, model: &TouchLanguageModel) -> Result<()> {
        match (self.stage, model.stage()) {
            (TrainStage::One, Stage::Moe) => Err(Error::Stage("stage I trains the dense model".into())),
            (TrainStage::Two, Stage::Dense) if !self.trainable.contains(&ParamGroup::Ffn) => {
                Err(Error::Stage("stage II needs an upcycled model".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Optimization settings for one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub warmup_ratio: f64,
    pub scheduler: String,
    /// Rows per optimizer step. Rows are run one at a time and their
    /// gradients accumulated, so memory does not grow with the batch.
    pub batch_size: usize,
    /// Optional cap on optimizer steps.
    #[serde(default)]
    pub max_steps: Option<usize>,
    #[serde(default)]
    pub adam: AdamConfig,
}

impl StageConfig {
    pub fn stage1_default() -> Self {
        StageConfig {
            learning_rate: 5e-4,
            weight_decay: 0.001,
            epochs: 1,
            warmup_ratio: 0.1,
            scheduler: "linear".into(),
            batch_size: 16,
            max_steps: None,
            adam: AdamConfig::default(),
        }
    }

    pub fn stage2_default() -> Self {
        StageConfig { learning_rate: 2e-5, ..Self::stage1_default() }
    }

    pub fn validate(&self, section: &str) -> Result<()> {
        let bad = |field: &str, message: String| Err(Error::Config { field: format!("{section}.{field}"), message });
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", format!("{} is not a positive number", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", "must be nonnegative".into());
        }
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return bad("warmup_ratio", format!("{} is outside [0, 1)", self.warmup_ratio));
        }
        if self.scheduler != "linear" {
            return bad("scheduler", format!("unsupported scheduler `{}` (only `linear`)", self.scheduler));
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        Ok(())
    }
}

/// One teacher-forced training row with its cached tactile features.
#[derive(Debug, Clone)]
pub struct Example {
    pub sample: usize,
    /// Pooled frozen-encoder output, `P × C_enc`.
    pub pooled: Tensor,
    pub row: PromptRow,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
    /// Number of supervised positions.
    pub tokens: usize,
}

/// One row per reference answer. The frozen encoder runs once per sample.
pub fn prepare_examples(
    model: &TouchLanguageModel,
    samples: &[ConversationSample],
    template: &PromptTemplate,
    vocab: &Vocab,
) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let pooled = model.encode_tactile(&s.tactile)?;
        let p = pooled.shape()[0];
        for row in training_rows(s, template, vocab, p, model.config().max_seq)? {
            out.push(example_from_row(i, pooled.clone(), row, p));
        }
    }
    Ok(out)
}

pub fn example_from_row(sample: usize, pooled: Tensor, row: PromptRow, patches: usize) -> Example {
    let (targets, mask) = row.targets(patches);
    let tokens = mask.iter().filter(|&&m| m).count();
    Example { sample, pooled, row, targets, mask, tokens }
}

/// Token-weighted mean cross-entropy over the answer tokens of `examples`.
pub fn eval_ce(model: &TouchLanguageModel, examples: &[Example]) -> Result<f64> {
    no_grad(|| {
        let mut total = 0.0;
        let mut tokens = 0;
        for ex in examples {
            if ex.tokens == 0 {
                continue;
            }
            let logits = model.forward_row(&ex.pooled, &ex.row, false)?.logits;
            total += logits.cross_entropy(&ex.targets, &ex.mask)?.item() * ex.tokens as f64;
            tokens += ex.tokens;
        }
        if tokens == 0 {
            return Err(Error::EmptyLoss("no supervised tokens".into()));
        }
        Ok(total / tokens as f64)
    })
}

/// SHA-256 of every parameter group's values, in parameter order.
pub fn group_hashes(model: &TouchLanguageModel) -> BTreeMap<ParamGroup, String> {
    let mut hashers: BTreeMap<ParamGroup, Sha256> = BTreeMap::new();
    model.visit("", &mut |name, p| {
        let h = hashers.entry(p.group).or_default();
        h.update(name.as_bytes());
        for v in p.tensor.data().iter() {
            h.update(v.to_bits().to_le_bytes());
        }
    });
    hashers.into_iter().map(|(g, h)| (g, hex::encode(h.finalize()))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: TrainStage,
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub ce: f64,
    pub aux: f64,
    pub total: f64,
}

/// Resumable driver for one training stage.
pub struct Trainer<'a> {
    plan: StagePlan,
    config: StageConfig,
    model: TouchLanguageModel,
    params: Vec<(String, Param)>,
    adam: Adam,
    schedule: LinearSchedule,
    examples: &'a [Example],
    seed: u64,
    step: usize,
    order: Option<(usize, Vec<usize>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ResumeMeta {
    plan: StagePlan,
    config: StageConfig,
    seed: u64,
    step: usize,
    adam_t: u64,
}

impl<'a> Trainer<'a> {
    pub fn new(
        model: TouchLanguageModel,
        plan: StagePlan,
        config: StageConfig,
        examples: &'a [Example],
        seed: u64,
    ) -> Result<Self> {
        plan.validate()?;
        plan.check_model(&model)?;
        config.validate("stage")?;
        if examples.is_empty() {
            return Err(Error::EmptyLoss("no training rows".into()));
        }
        model.set_trainable(&plan.trainable);
        let params = model.named_params();
        let steps_per_epoch = examples.len().div_ceil(config.batch_size);
        let mut total = config.epochs * steps_per_epoch;
        if let Some(cap) = config.max_steps {
            total = total.min(cap);
        }
        let schedule = LinearSchedule::new(config.learning_rate, total, config.warmup_ratio);
        let adam = Adam::new(config.adam.clone(), config.weight_decay);
        Ok(Trainer { plan, config, model, params, adam, schedule, examples, seed, step: 0, order: None })
    }

    /// Continues a run from a checkpoint written by [`Trainer::checkpoint`].
    /// The plan, stage settings and seed must match the original run.
    pub fn resume(
        checkpoint: &Checkpoint,
        plan: StagePlan,
        config: StageConfig,
        examples: &'a [Example],
        seed: u64,
    ) -> Result<Self> {
        let meta: ResumeMeta = serde_json::from_value(checkpoint.header.meta["resume"].clone())
            .map_err(|e| Error::Format(format!("checkpoint carries no resumable state: {e}")))?;
        let mut diffs = Vec::new();
        if meta.plan != plan {
            diffs.push(format!("plan: expected {plan:?}, found {:?}", meta.plan));
        }
        if meta.config != config {
            diffs.push(format!("stage: expected {config:?}, found {:?}", meta.config));
        }
        if meta.seed != seed {
            diffs.push(format!("seed: expected {seed}, found {}", meta.seed));
        }
        if !diffs.is_empty() {
            return Err(Error::ConfigMismatch(diffs));
        }
        let mut t = Trainer::new(checkpoint.to_model()?, plan, config, examples, seed)?;
        t.step = meta.step;
        t.adam.t = meta.adam_t;
        for (name, p) in &t.params {
            let (Some(m), Some(v)) =
                (checkpoint.state.get(&format!("adam.m.{name}")), checkpoint.state.get(&format!("adam.v.{name}")))
            else {
                continue;
            };
            if m.len() != p.tensor.numel() || v.len() != m.len() {
                return Err(Error::Format(format!("optimizer state for `{name}` has the wrong size")));
            }
            t.adam.moments.insert(name.clone(), Moments { m: m.clone(), v: v.clone() });
        }
        Ok(t)
    }

    pub fn model(&self) -> &TouchLanguageModel {
        &self.model
    }

    pub fn into_model(self) -> TouchLanguageModel {
        self.model
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn total_steps(&self) -> usize {
        self.schedule.total
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.schedule.total
    }

    fn steps_per_epoch(&self) -> usize {
        self.examples.len().div_ceil(self.config.batch_size)
    }

    fn epoch_order(&mut self, epoch: usize) -> &[usize] {
        if self.order.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut idx: Vec<usize> = (0..self.examples.len()).collect();
            let label = format!("shuffle-{}", self.plan.stage.label());
            Rng::new(self.seed).split_named(&label).split(epoch as u64).shuffle(&mut idx);
            self.order = Some((epoch, idx));
        }
        &self.order.as_ref().unwrap().1
    }

    /// One optimizer step over the next batch.
    pub fn step(&mut self) -> Result<StepRecord> {
        if self.is_done() {
            return Err(Error::State("stage already finished".into()));
        }
        let spe = self.steps_per_epoch();
        let (epoch, b) = (self.step / spe, self.step % spe);
        let bs = self.config.batch_size;
        let batch: Vec<usize> = {
            let order = self.epoch_order(epoch);
            order[b * bs..((b + 1) * bs).min(order.len())].to_vec()
        };
        let tokens: usize = batch.iter().map(|&i| self.examples[i].tokens).sum();
        if tokens == 0 {
            return Err(Error::EmptyLoss(format!("batch {b} of epoch {epoch} has no answer tokens")));
        }
        for (_, p) in &self.params {
            if p.tensor.requires_grad() {
                p.tensor.reset_grad();
            }
        }
        let (token_w, row_w) = (1.0 / tokens as f64, 1.0 / batch.len() as f64);
        let mut parts = LossParts { ce: 0.0, aux: 0.0, total: 0.0 };
        for &i in &batch {
            let (loss, p) = loss::weighted_row_loss(&self.model, &self.examples[i], token_w, row_w)?;
            loss.backward()?;
            parts.ce += p.ce;
            parts.aux += p.aux;
            parts.total += p.total;
        }
        if !parts.total.is_finite() {
            return Err(Error::Degenerate(format!("non-finite loss at step {}", self.step)));
        }
        let lr = self.schedule.lr(self.step);
        self.adam.step(&self.params, lr)?;
        let record = StepRecord {
            stage: self.plan.stage,
            step: self.step,
            epoch,
            lr,
            ce: parts.ce,
            aux: parts.aux,
            total: parts.total,
        };
        self.step += 1;
        Ok(record)
    }

    /// Runs until the stage ends or `until` steps have been taken in total.
    pub fn run(&mut self, until: Option<usize>, sink: &mut dyn FnMut(&StepRecord)) -> Result<Vec<StepRecord>> {
        let end = until.unwrap_or(usize::MAX).min(self.schedule.total);
        let mut log = Vec::new();
        while self.step < end {
            let r = self.step()?;
            sink(&r);
            log.push(r);
        }
        for (_, p) in &self.params {
            p.tensor.zero_grad();
        }
        Ok(log)
    }

    /// Model, optimizer moments and position in the run.
    pub fn checkpoint(&self, vocab: Option<&Vocab>) -> Checkpoint {
        let mut ck = Checkpoint::from_model(&self.model, vocab);
        let meta = ResumeMeta {
            plan: self.plan.clone(),
            config: self.config.clone(),
            seed: self.seed,
            step: self.step,
            adam_t: self.adam.t,
        };
        ck.header.meta = serde_json::json!({ "stage": self.plan.stage, "resume": meta });
        for (name, m) in &self.adam.moments {
            ck.add_state(format!("adam.m.{name}"), vec![m.m.len()], m.m.clone());
            ck.add_state(format!("adam.v.{name}"), vec![m.v.len()], m.v.clone());
        }
        ck
    }
}

pub struct StageOutcome {
    pub model: TouchLanguageModel,
    pub log: Vec<StepRecord>,
    /// Largest logit change caused by upcycling, measured before training.
    pub upcycle_delta: Option<f64>,
}

/// Tolerance of the upcycle self-check.
pub const UPCYCLE_TOLERANCE: f64 = 1e-9;

/// Trains the adapter of a dense model.
pub fn run_stage1(
    model: TouchLanguageModel,
    examples: &[Example],
    config: &StageConfig,
    seed: u64,
    sink: &mut dyn FnMut(&StepRecord),
) -> Result<StageOutcome> {
    let mut t = Trainer::new(model, StagePlan::stage1(), config.clone(), examples, seed)?;
    let log = t.run(None, sink)?;
    Ok(StageOutcome { model: t.into_model(), log, upcycle_delta: None })
}

/// Upcycles the stage I model, checks that upcycling left the logits
/// unchanged, then fine-tunes.
pub fn run_stage2(
    stage1: Option<&TouchLanguageModel>,
    examples: &[Example],
    config: &StageConfig,
    seed: u64,
    sink: &mut dyn FnMut(&StepRecord),
) -> Result<StageOutcome> {
    let dense = stage1.ok_or_else(|| Error::Dependency("stage II starts from a stage I model".into()))?;
    let moe = dense.upcycle()?;
    let delta = upcycle_delta(dense, &moe, &examples[..examples.len().min(8)])?;
    if !(delta < UPCYCLE_TOLERANCE) {
        return Err(Error::Consistency(format!("upcycling changed the logits by {delta:e}")));
    }
    let mut t = Trainer::new(moe, StagePlan::stage2(), config.clone(), examples, seed)?;
    let log = t.run(None, sink)?;
    Ok(StageOutcome { model: t.into_model(), log, upcycle_delta: Some(delta) })
}

/// Fine-tunes a dense model with LoRA and a trainable FFN instead of
/// upcycling it.
pub fn run_stage2_dense(
    stage1: &TouchLanguageModel,
    examples: &[Example],
    config: &StageConfig,
    seed: u64,
    sink: &mut dyn FnMut(&StepRecord),
) -> Result<StageOutcome> {
    let mut model = stage1.deep_clone();
    model.attach_lora()?;
    let mut t = Trainer::new(model, StagePlan::stage2_dense(), config.clone(), examples, seed)?;
    let log = t.run(None, sink)?;
    Ok(StageOutcome { model: t.into_model(), log, upcycle_delta: None })
}

/// Largest absolute logit difference between two models over `examples`.
pub fn upcycle_delta(a: &TouchLanguageModel, b: &TouchLanguageModel, examples: &[Example]) -> Result<f64> {
    no_grad(|| {
        let mut max = 0.0f64;
        for ex in examples {
            let la = a.forward_row(&ex.pooled, &ex.row, false)?.logits;
            let lb = b.forward_row(&ex.pooled, &ex.row, false)?.logits;
            for (x, y) in la.data().iter().zip(lb.data().iter()) {
                max = max.max((x - y).abs());
            }
        }
        Ok(max)
    })
}
