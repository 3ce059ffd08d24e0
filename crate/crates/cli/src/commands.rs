use std::collections::BTreeMap;
use std::path::Path;

use log::{info, warn};
use serde_json::{json, Value};
use touchmoe_core::analytics::{self, collect_traces, ExportFormat};
use touchmoe_core::config::{load_toml, RunConfig};
use touchmoe_core::data::{generate_synthetic, load_dataset, save_dataset, ConversationSample, GeneratorSpec, PromptTemplate, Task, Vocab};
use touchmoe_core::eval::{run_benchmark, Judge, JudgeConfig, MetricSelection};
use touchmoe_core::model::{config_diff, Checkpoint, Stage, TouchLanguageModel};
use touchmoe_core::train::{
    eval_ce, group_hashes, prepare_examples, upcycle_delta, Example, StageConfig, StagePlan, StepRecord, Trainer,
    UPCYCLE_TOLERANCE,
};
use touchmoe_core::{Error, Result};

use crate::rundir::{JsonLines, RunDir};
use crate::{AnalyzeArgs, EvalArgs, Format, GenDataArgs, Stage2Args, TrainArgs};

/// Prompts used for the upcycle identity check.
const UPCYCLE_CHECK_ROWS: usize = 50;

pub fn gen_data(args: GenDataArgs, level: log::LevelFilter) -> Result<()> {
    let mut spec: GeneratorSpec = load_toml(&args.spec)?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    spec.validate()?;
    let mut run = RunDir::create(&args.out, "gen-data", Some(spec.seed), level)?;
    let samples = generate_synthetic(&spec)?;
    save_dataset(&samples, &run.path("dataset.jsonl"))?;
    let text = toml::to_string_pretty(&spec).map_err(|e| Error::Format(e.to_string()))?;
    run.write_text("spec.toml", &text)?;
    let count = |t: Task| samples.iter().filter(|s| s.task == t).count();
    let (fpu, tip, cdr) = (count(Task::Fpu), count(Task::Tip), count(Task::Cdr));
    info!("wrote {} samples (FPU {fpu}, TIP {tip}, CDR {cdr}) to {}", samples.len(), run.path("dataset.jsonl").display());
    run.event("generated", json!({ "samples": samples.len(), "fpu": fpu, "tip": tip, "cdr": cdr }))
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let mut config = RunConfig::load(path)?;
    if let Some(seed) = seed {
        config.seed = seed;
        config.model.seed = seed;
    }
    Ok(config)
}

fn load_samples(path: &Path) -> Result<Vec<ConversationSample>> {
    let samples = load_dataset(path)?;
    if samples.is_empty() {
        return Err(Error::Format(format!("{}: dataset is empty", path.display())));
    }
    info!("loaded {} samples from {}", samples.len(), path.display());
    Ok(samples)
}

/// Every word of the questions, answers and template.
fn build_vocab(samples: &[ConversationSample], template: &PromptTemplate) -> Vocab {
    Vocab::build(
        samples
            .iter()
            .flat_map(|s| std::iter::once(s.question.as_str()).chain(s.answers.iter().map(String::as_str)))
            .chain(std::iter::once(template.text())),
    )
}

fn checkpoint_vocab(ck: &Checkpoint, path: &Path) -> Result<Vocab> {
    ck.header.vocab.clone().ok_or_else(|| Error::Format(format!("{}: checkpoint carries no vocabulary", path.display())))
}

fn checkpoint_template(ck: &Checkpoint) -> Result<PromptTemplate> {
    match ck.header.meta.get("template").and_then(Value::as_str) {
        Some(t) => PromptTemplate::new(t),
        None => {
            warn!("checkpoint records no prompt template; using the default");
            Ok(PromptTemplate::default())
        }
    }
}

fn check_config(ck: &Checkpoint, config: &RunConfig) -> Result<()> {
    let diff = config_diff(&config.model, &ck.header.config);
    if diff.is_empty() {
        Ok(())
    } else {
        Err(Error::ConfigMismatch(diff))
    }
}

struct TrainJob<'a> {
    run: &'a mut RunDir,
    args: &'a TrainArgs,
    config: &'a RunConfig,
    stage: StageConfig,
    plan: StagePlan,
    vocab: &'a Vocab,
    examples: &'a [Example],
    ckpt_name: &'a str,
}

impl TrainJob<'_> {
    /// Trains from `start` (or from `--resume`), writing the step log,
    /// periodic checkpoints and the final checkpoint.
    fn run(self, start: Option<TouchLanguageModel>, mut summary: serde_json::Map<String, Value>) -> Result<()> {
        let TrainJob { run, args, config, stage, plan, vocab, examples, ckpt_name } = self;
        let mut trainer = match &args.resume {
            Some(path) => {
                let ck = Checkpoint::load(path)?;
                check_config(&ck, config)?;
                let t = Trainer::resume(&ck, plan.clone(), stage.clone(), examples, config.seed)?;
                info!("resuming {} at step {} of {}", path.display(), t.step_index(), t.total_steps());
                t
            }
            None => Trainer::new(start.expect("fresh runs supply a model"), plan.clone(), stage.clone(), examples, config.seed)?,
        };
        let before = group_hashes(trainer.model());
        let ce_before = eval_ce(trainer.model(), examples)?;
        info!("stage {}: {} rows, {} steps, CE before {ce_before:.4}", plan.stage.label(), examples.len(), trainer.total_steps());

        let total = trainer.total_steps();
        let target = args.max_steps.map_or(total, |m| m.min(total));
        let every = args.checkpoint_every.filter(|&n| n > 0);
        let log_every = (total / 20).max(1);
        let mut log = JsonLines::append(run.path("train_log.jsonl"))?;
        let mut write_err = None;
        while trainer.step_index() < target {
            let until = every.map_or(target, |n| ((trainer.step_index() / n + 1) * n).min(target));
            trainer.run(Some(until), &mut |r: &StepRecord| {
                if let Err(e) = log.write(r) {
                    write_err.get_or_insert(e);
                }
                if r.step % log_every == 0 || r.step + 1 == total {
                    info!("step {}/{total} epoch {} lr {:.3e} ce {:.4} aux {:.5}", r.step + 1, r.epoch, r.lr, r.ce, r.aux);
                }
            })?;
            if let Some(e) = write_err.take() {
                return Err(e);
            }
            log.flush()?;
            let step = trainer.step_index();
            if every.is_some_and(|n| step % n == 0) && step < total {
                let name = format!("checkpoint-step{step:06}.ckpt");
                annotate(trainer.checkpoint(Some(vocab)), config, examples).save(&run.path(&name))?;
                run.event("checkpoint", json!({ "step": step, "file": name }))?;
            }
        }

        let ce_after = eval_ce(trainer.model(), examples)?;
        let after = group_hashes(trainer.model());
        let frozen = plan.frozen();
        let changed: Vec<String> = frozen
            .iter()
            .filter(|g| before.get(*g) != after.get(*g))
            .map(|g| format!("{g:?}"))
            .collect();
        if !changed.is_empty() {
            return Err(Error::Consistency(format!("frozen groups changed during training: {}", changed.join(", "))));
        }
        let step = trainer.step_index();
        info!("stage {} CE {ce_before:.4} -> {ce_after:.4} after {step} steps; frozen groups unchanged", plan.stage.label());
        if step < total {
            warn!("stopped at step {step} of {total}; resume with --resume {}", run.path(ckpt_name).display());
        }
        let ck = annotate(trainer.checkpoint(Some(vocab)), config, examples);
        ck.save(&run.path(ckpt_name))?;
        summary.insert("stage".into(), json!(plan.stage));
        summary.insert("steps".into(), json!(step));
        summary.insert("total_steps".into(), json!(total));
        summary.insert("complete".into(), json!(step == total));
        summary.insert("ce_before".into(), json!(ce_before));
        summary.insert("ce_after".into(), json!(ce_after));
        summary.insert("frozen_hashes".into(), json!(frozen.iter().filter_map(|g| Some((format!("{g:?}"), after.get(g)?))).collect::<BTreeMap<_, _>>()));
        summary.insert("checkpoint".into(), json!(ckpt_name));
        run.write_json("summary.json", &Value::Object(summary.clone()))?;
        run.event("finished", Value::Object(summary))
    }
}

fn annotate(mut ck: Checkpoint, config: &RunConfig, examples: &[Example]) -> Checkpoint {
    ck.header.meta["template"] = json!(config.template.text());
    ck.header.meta["examples"] = json!(examples.len());
    ck
}

fn write_effective_config(run: &RunDir, config: &RunConfig) -> Result<()> {
    run.write_text("effective_config.toml", &config.to_toml()?)
}

pub fn train_stage1(args: TrainArgs, level: log::LevelFilter) -> Result<()> {
    let mut config = load_config(&args.config, args.seed)?;
    let mut run = RunDir::create(&args.out, "train-stage1", Some(config.seed), level)?;
    let samples = load_samples(&args.data)?;
    let vocab = match &args.resume {
        Some(path) => checkpoint_vocab(&Checkpoint::load(path)?, path)?,
        None => build_vocab(&samples, &config.template),
    };
    config.model.vocab_size = vocab.len();
    config.validate()?;
    write_effective_config(&run, &config)?;
    let model = TouchLanguageModel::new(config.model.clone())?;
    let examples = prepare_examples(&model, &samples, &config.template, &vocab)?;
    let stage = config.stage1.clone();
    let job = TrainJob {
        run: &mut run,
        args: &args,
        config: &config,
        stage,
        plan: StagePlan::stage1(),
        vocab: &vocab,
        examples: &examples,
        ckpt_name: "stage1.ckpt",
    };
    let start = args.resume.is_none().then_some(model);
    job.run(start, serde_json::Map::new())
}

pub fn train_stage2(args: Stage2Args, level: log::LevelFilter) -> Result<()> {
    let Stage2Args { train: args, from, skip_stage1, dense } = args;
    if from.is_none() && !skip_stage1 && args.resume.is_none() {
        return Err(Error::Dependency(
            "stage II starts from a stage I checkpoint: pass --from <stage1.ckpt>, or --skip-stage1 for the ablation".into(),
        ));
    }
    let mut config = load_config(&args.config, args.seed)?;
    let mut run = RunDir::create(&args.out, "train-stage2", Some(config.seed), level)?;
    let samples = load_samples(&args.data)?;

    let source = args.resume.as_ref().or(from.as_ref());
    let (vocab, stage1) = match source {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            (checkpoint_vocab(&ck, path)?, Some(ck))
        }
        None => (build_vocab(&samples, &config.template), None),
    };
    config.model.vocab_size = vocab.len();
    config.validate()?;
    write_effective_config(&run, &config)?;

    let plan = if dense { StagePlan::stage2_dense() } else { StagePlan::stage2() };
    let mut summary = serde_json::Map::new();
    summary.insert("variant".into(), json!(if dense { "dense" } else { "moe" }));
    summary.insert("from".into(), json!(from.as_ref().map(|p| p.display().to_string())));

    if args.resume.is_some() {
        let model = TouchLanguageModel::new(config.model.clone())?;
        let examples = prepare_examples(&model, &samples, &config.template, &vocab)?;
        let job = stage2_job(&mut run, &args, &config, plan, &vocab, &examples);
        return job.run(None, summary);
    }

    let base = match (&stage1, &from) {
        (Some(ck), Some(path)) => {
            if ck.header.stage != Stage::Dense || ck.header.lora {
                return Err(Error::Stage(format!("{} is not a stage I checkpoint", path.display())));
            }
            if ck.header.meta.get("stage").and_then(Value::as_str) != Some("I") {
                warn!("{} was not written by train-stage1", path.display());
            }
            check_config(ck, &config)?;
            ck.to_model()?
        }
        _ => {
            warn!("--skip-stage1: stage II starts from an untrained adapter");
            TouchLanguageModel::new(config.model.clone())?
        }
    };
    let examples = prepare_examples(&base, &samples, &config.template, &vocab)?;

    let start = if dense {
        let mut m = base.deep_clone();
        m.attach_lora()?;
        m
    } else {
        let moe = base.upcycle()?;
        let rows = &examples[..examples.len().min(UPCYCLE_CHECK_ROWS)];
        let delta = upcycle_delta(&base, &moe, rows)?;
        let pass = delta < UPCYCLE_TOLERANCE;
        let line = format!(
            "{} upcycle identity: max |Δlogit| = {delta:.3e} over {} prompts (tolerance {UPCYCLE_TOLERANCE:e})",
            if pass { "PASS" } else { "FAIL" },
            rows.len()
        );
        println!("{line}");
        info!("{line}");
        run.event("upcycle_check", json!({ "pass": pass, "max_abs_delta": delta, "prompts": rows.len() }))?;
        summary.insert("upcycle_delta".into(), json!(delta));
        if !pass {
            return Err(Error::Consistency(format!("upcycling changed the logits by {delta:e}")));
        }
        moe
    };
    let job = stage2_job(&mut run, &args, &config, plan, &vocab, &examples);
    job.run(Some(start), summary)
}

fn stage2_job<'a>(
    run: &'a mut RunDir,
    args: &'a TrainArgs,
    config: &'a RunConfig,
    plan: StagePlan,
    vocab: &'a Vocab,
    examples: &'a [Example],
) -> TrainJob<'a> {
    TrainJob { run, args, config, stage: config.stage2.clone(), plan, vocab, examples, ckpt_name: "stage2.ckpt" }
}

fn load_trained(path: &Path) -> Result<(TouchLanguageModel, Vocab, PromptTemplate)> {
    let ck = Checkpoint::load(path)?;
    let vocab = checkpoint_vocab(&ck, path)?;
    let template = checkpoint_template(&ck)?;
    Ok((ck.to_model()?, vocab, template))
}

/// Judge configs name their fixture relative to the config file.
fn load_judge(path: &Path) -> Result<Judge> {
    let mut config: JudgeConfig = load_toml(path)?;
    if let Some(f) = &config.fixture {
        if f.is_relative() {
            config.fixture = Some(path.parent().unwrap_or(Path::new(".")).join(f));
        }
    }
    Judge::new(config)
}

pub fn eval(args: EvalArgs, level: log::LevelFilter) -> Result<()> {
    let mut selection = MetricSelection::parse(&args.metrics)
        .map_err(|e| Error::Config { field: "--metrics".into(), message: e.to_string() })?;
    selection.bleu_smoothing = args.bleu_smoothing;
    let mut judges = args.judge.iter().map(|p| load_judge(p)).collect::<Result<Vec<_>>>()?;
    let mut names: Vec<&str> = judges.iter().map(|j| j.config.name.as_str()).collect();
    names.sort();
    if names.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Config { field: "judge.name".into(), message: "judge names must be distinct".into() });
    }
    let mut run = RunDir::create(&args.out, "eval", None, level)?;
    let (model, vocab, template) = load_trained(&args.ckpt)?;
    let samples = load_samples(&args.data)?;
    if judges.is_empty() {
        info!("no judge configured; scoring offline");
    }
    let report = run_benchmark(&model, &samples, &template, &vocab, &selection, &mut judges, args.max_new)?;
    report.save(&run.root)?;
    for j in &judges {
        j.save_raw(&run.path(&format!("judge_raw_{}.jsonl", j.config.name)))?;
    }
    for (k, v) in &report.overall.means {
        info!("{k}: {v:.3}");
    }
    for s in &report.judges {
        if s.missing > 0 {
            warn!("judge {}: {} of {} samples unscored", s.judge, s.missing, s.missing + s.scored);
        }
    }
    run.event("evaluated", json!({ "samples": report.overall.samples, "overall": report.overall.means }))
}

pub fn analyze(args: AnalyzeArgs, level: log::LevelFilter) -> Result<()> {
    let mut run = RunDir::create(&args.out, "analyze", None, level)?;
    let (model, vocab, template) = load_trained(&args.ckpt)?;
    if model.stage() != Stage::Moe {
        return Err(Error::Stage(format!("{} holds a dense model; routing analysis needs a stage II MoE checkpoint", args.ckpt.display())));
    }
    let samples = load_samples(&args.data)?;
    let examples = prepare_examples(&model, &samples, &template, &vocab)?;
    // One row per sample: the first reference answer.
    let mut first: Vec<Example> = Vec::new();
    for ex in examples {
        if first.last().is_none_or(|e| e.sample != ex.sample) {
            first.push(ex);
        }
    }
    let traces = collect_traces(&model, &first)?;
    traces.save_json(&run.path("traces.json"))?;
    let report = analytics::analyze(&traces, args.pathways)?;
    let formats: &[ExportFormat] = match args.format {
        Format::Csv => &[ExportFormat::Csv],
        Format::Json => &[ExportFormat::Json],
        Format::Both => &[ExportFormat::Csv, ExportFormat::Json],
    };
    for &f in formats {
        analytics::export(&report, &run.root, f)?;
    }
    info!("traced {} tokens over {} MoE layers; wrote {} pathways", traces.tokens.len(), traces.layers.len(), report.pathways.len());
    run.event("analyzed", json!({ "tokens": traces.tokens.len(), "pathways": report.pathways.len() }))
}
