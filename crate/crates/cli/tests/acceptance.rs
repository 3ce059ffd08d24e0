//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! Contract criteria fail the run. The two training probes (6 and 7) are
//! direction-only comparisons: their verdict and seed-level numbers are
//! printed either way, and a FAIL there does not fail the run.
//!
//! `cargo test --test acceptance -- 3 9` runs only criteria 3 and 9.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use serde::Deserialize;
use touchmoe_core::analytics::{collect_traces, expert_distribution, top_pathways, fix_sign, Pca, TokenTrace, TraceSet};
use touchmoe_core::data::prompt::PromptRow;
use touchmoe_core::data::vocab::{BOS, EOS, TOUCH};
use touchmoe_core::data::{generate_synthetic, GeneratorSpec, PromptTemplate, TaskCounts, Vocab};
use touchmoe_core::eval::{align, bleu4, cider, meteor_pair, metric_tokens, score_outputs, MetricSelection};
use touchmoe_core::frontend::{num_patches, EncoderConfig, Sensor, TactileClip, TouchEncoder};
use touchmoe_core::model::{moe_route, Modality, ModelConfig, MoELayer, TouchLanguageModel};
use touchmoe_core::nn::{Param, ParamGroup, SwiGlu};
use touchmoe_core::tensor::gradcheck;
use touchmoe_core::train::{
    eval_ce, example_from_row, group_hashes, load_balance_loss, prepare_examples, run_stage1, run_stage2,
    run_stage2_dense, stage2_loss, upcycle_delta, Example, StageConfig, StagePlan,
};
use touchmoe_core::{no_grad, Rng, Tensor};

const GRAD_STEP: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;
const GRAD_MAX_PARAMS: usize = 5_000;
const UPCYCLE_PROMPTS: usize = 50;
const UPCYCLE_TOL: f64 = 1e-9;
const ROUTED_TOKENS: usize = 10_000;
const PROB_SUM_TOL: f64 = 1e-9;
const LOGIT_SCALES: [f64; 3] = [0.5, 2.0, 10.0];
const BALANCE_TOL: f64 = 1e-9;
const BALANCE_DRAWS: usize = 1_000;
const METRIC_TOL: f64 = 1e-6;
const METRIC_MIN_CASES: usize = 10;
const PCA_TOL: f64 = 1e-8;
const PATHWAYS: usize = 10;
const DIST_SUM_TOL: f64 = 1e-12;

// Training probes (criteria 6 and 7).
const PROBE_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const PROBE_SAMPLES: usize = 500;
const PROBE_EVAL_FRACTION: f64 = 0.2;
const PROBE_STAGE1_LR: f64 = 1e-2;
const PROBE_STAGE1_EPOCHS: usize = 3;
const PROBE_STAGE2_LR: f64 = 3e-3;
const PROBE_STAGE2_EPOCHS: usize = 4;
const PROBE_BATCH: usize = 16;
const TWO_STAGE_MIN_WINS: usize = 4;
const TWO_STAGE_BUDGET_SECS: f64 = 30.0 * 60.0;
const MOE_MIN_WINS: usize = 3;
const ACTIVE_PARAM_TOL: f64 = 0.01;

const PIPELINE_BUDGET_SECS: f64 = 10.0 * 60.0;

struct Verdict {
    pass: bool,
    summary: String,
    details: Vec<String>,
}

impl Verdict {
    fn new(pass: bool, summary: impl Into<String>) -> Self {
        Verdict { pass, summary: summary.into(), details: Vec::new() }
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Kind {
    Contract,
    Probe,
}

type Check = fn() -> Verdict;

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(usize, &str, Kind, Check); 11] = [
        (1, "gradient correctness", Kind::Contract, gradients),
        (2, "upcycle identity", Kind::Contract, upcycle_identity),
        (3, "routing contract", Kind::Contract, routing_contract),
        (4, "load-balance loss oracle", Kind::Contract, load_balance),
        (5, "freezing contract", Kind::Contract, freezing),
        (6, "two-stage benefit", Kind::Probe, two_stage_benefit),
        (7, "MoE vs dense at matched active parameters", Kind::Probe, moe_vs_dense),
        (8, "metric oracles", Kind::Contract, metric_oracles),
        (9, "input unification", Kind::Contract, input_unification),
        (10, "routing analytics", Kind::Contract, analytics),
        (11, "end-to-end reproducibility", Kind::Contract, reproducibility),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut contract_failures = Vec::new();
    let mut probe_failures = Vec::new();
    for (n, name, kind, check) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| f == &n.to_string()) {
            continue;
        }
        let start = Instant::now();
        let verdict = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Verdict::new(false, format!("error: {msg}"))
        });
        let label = if verdict.pass { "PASS" } else { "FAIL" };
        println!("{label} {n:>2} {name} [{:.1}s]: {}", start.elapsed().as_secs_f64(), verdict.summary);
        for d in &verdict.details {
            println!("         {d}");
        }
        if !verdict.pass {
            match kind {
                Kind::Contract => contract_failures.push(n),
                Kind::Probe => probe_failures.push(n),
            }
        }
    }
    if !probe_failures.is_empty() {
        println!("direction-only probes not met: {probe_failures:?}");
    }
    if !contract_failures.is_empty() {
        println!("contract criteria failed: {contract_failures:?}");
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- helpers

fn repo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn toy_model_config(vocab_size: usize, ffn_mult: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        hidden: 32,
        layers: 2,
        heads: 4,
        vocab_size,
        ffn_mult,
        experts: 4,
        top_k: 2,
        lora_rank: 4,
        lora_alpha: 8.0,
        max_seq: 128,
        encoder: EncoderConfig { width: 32, blocks: 2, heads: 4, max_patches: 256, seed: 7 },
        seed,
        ..Default::default()
    }
}

fn corpus(seed: u64, counts: TaskCounts, frames: [usize; 2]) -> (Vec<touchmoe_core::data::ConversationSample>, Vocab) {
    let mut spec = GeneratorSpec::new(seed, counts);
    spec.frame_size = 28;
    spec.frames = frames;
    let samples = generate_synthetic(&spec).expect("generator");
    let vocab = Vocab::build(
        samples.iter().flat_map(|s| std::iter::once(s.question.as_str()).chain(s.answers.iter().map(String::as_str))),
    );
    (samples, vocab)
}

fn stage(lr: f64, epochs: usize) -> StageConfig {
    StageConfig { learning_rate: lr, epochs, batch_size: PROBE_BATCH, ..StageConfig::stage1_default() }
}

fn project(t: &Tensor, seed: u64) -> Tensor {
    let mut rng = Rng::new(seed);
    let w = Tensor::new(rng.normal_vec(t.numel(), 1.0), t.shape()).unwrap();
    t.mul(&w).unwrap().sum()
}

fn param(rng: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::param(rng.normal_vec(shape.iter().product(), 1.0), shape).unwrap()
}

// ------------------------------------------------------------ criterion 1

/// Gap between the k-th and (k+1)-th largest entry of every row.
fn top_k_margin(t: &Tensor, k: usize) -> f64 {
    let width = *t.shape().last().unwrap();
    t.to_vec()
        .chunks(width)
        .map(|row| {
            let mut r = row.to_vec();
            r.sort_by(|a, b| b.total_cmp(a));
            if k < width { r[k - 1] - r[k] } else { f64::INFINITY }
        })
        .fold(f64::INFINITY, f64::min)
}

fn gradients() -> Verdict {
    let mut rng = Rng::new(2024);
    let a = param(&mut rng, &[3, 4]);
    let b = param(&mut rng, &[3, 4]);
    let c = param(&mut rng, &[4, 5]);
    let d = param(&mut rng, &[5, 4]);
    let bias = param(&mut rng, &[4]);
    let gain = param(&mut rng, &[4]);
    let s = param(&mut rng, &[3, 1]);
    let table = param(&mut rng, &[6, 4]);
    let z3 = param(&mut rng, &[3, 2, 4]);
    let logits = param(&mut rng, &[5, 6]);
    assert!(top_k_margin(&a, 2) > 1e-3 && top_k_margin(&logits, 3) > 1e-3, "random inputs too close to a top-k tie");
    let targets = [0usize, 5, 2, 2, 1];
    let mask = [true, false, true, true, true];
    let weights = [0.5, 0.0, 1.5, 0.25, 1.0];

    type Case = (&'static str, Vec<Tensor>, Box<dyn Fn() -> Tensor>);
    let cases: Vec<Case> = vec![
        ("matmul", vec![a.clone(), c.clone()], Box::new({ let (a, c) = (a.clone(), c.clone()); move || project(&a.matmul(&c).unwrap(), 1) })),
        ("matmul_nt", vec![a.clone(), d.clone()], Box::new({ let (a, d) = (a.clone(), d.clone()); move || project(&a.matmul_nt(&d).unwrap(), 2) })),
        ("add", vec![a.clone(), b.clone()], Box::new({ let (a, b) = (a.clone(), b.clone()); move || project(&a.add(&b).unwrap(), 3) })),
        ("add_row", vec![a.clone(), bias.clone()], Box::new({ let (a, x) = (a.clone(), bias.clone()); move || project(&a.add_row(&x).unwrap(), 4) })),
        ("mul", vec![a.clone(), b.clone()], Box::new({ let (a, b) = (a.clone(), b.clone()); move || project(&a.mul(&b).unwrap(), 5) })),
        ("row_scale", vec![a.clone(), s.clone()], Box::new({ let (a, s) = (a.clone(), s.clone()); move || project(&a.row_scale(&s).unwrap(), 6) })),
        ("scale", vec![a.clone()], Box::new({ let a = a.clone(); move || project(&a.scale(-1.7), 7) })),
        ("silu", vec![a.clone()], Box::new({ let a = a.clone(); move || project(&a.silu(), 8) })),
        ("rms_norm", vec![a.clone(), gain.clone()], Box::new({ let (a, g) = (a.clone(), gain.clone()); move || project(&a.rms_norm(&g, 1e-6).unwrap(), 9) })),
        ("softmax rows", vec![a.clone()], Box::new({ let a = a.clone(); move || project(&a.softmax(1).unwrap(), 10) })),
        ("softmax cols", vec![a.clone()], Box::new({ let a = a.clone(); move || project(&a.softmax(0).unwrap(), 11) })),
        ("top_k softmax", vec![a.clone()], Box::new({ let a = a.clone(); move || project(&a.top_k_mask(2).unwrap().softmax(1).unwrap(), 12) })),
        ("cross_entropy", vec![logits.clone()], Box::new({ let l = logits.clone(); move || l.cross_entropy(&targets, &mask).unwrap() })),
        ("cross_entropy_weighted", vec![logits.clone()], Box::new({ let l = logits.clone(); move || l.cross_entropy_weighted(&targets, &weights).unwrap() })),
        ("embedding", vec![table.clone()], Box::new({ let t = table.clone(); move || project(&t.embedding(&[1, 5, 1]).unwrap(), 13) })),
        ("mean_axis", vec![z3.clone()], Box::new({ let z = z3.clone(); move || project(&z.mean_axis(0).unwrap(), 14) })),
        ("sum", vec![a.clone()], Box::new({ let a = a.clone(); move || a.mul(&a).unwrap().sum() })),
        ("concat_rows", vec![a.clone(), b.clone()], Box::new({ let (a, b) = (a.clone(), b.clone()); move || project(&Tensor::concat_rows(&[a.clone(), b.clone()]).unwrap(), 15) })),
        ("slice_cols concat_cols", vec![a.clone(), b.clone()], Box::new({
            let (a, b) = (a.clone(), b.clone());
            move || project(&Tensor::concat_cols(&[b.slice_cols(1, 4).unwrap(), a.slice_cols(0, 2).unwrap()]).unwrap(), 16)
        })),
        ("index_rows scatter_add_rows", vec![a.clone()], Box::new({
            let a = a.clone();
            move || project(&Tensor::scatter_add_rows(4, 4, vec![(a.index_rows(&[2, 0, 2]).unwrap(), vec![1, 3, 3])]).unwrap(), 17)
        })),
        ("gather_elems", vec![a.clone()], Box::new({ let a = a.clone(); move || project(&a.gather_elems(&[(0, 1), (2, 3), (0, 1)]).unwrap(), 18) })),
        ("transpose", vec![a.clone()], Box::new({ let a = a.clone(); move || project(&a.transpose().unwrap(), 19) })),
        ("reshape", vec![z3.clone()], Box::new({ let z = z3.clone(); move || project(&z.reshape(&[6, 4]).unwrap(), 20) })),
    ];
    let mut worst = 0.0f64;
    let mut worst_name = "";
    let mut bad = Vec::new();
    for (name, inputs, f) in &cases {
        let err = gradcheck(inputs, GRAD_STEP, f);
        if err >= GRAD_TOL {
            bad.push(format!("{name}: {err:.2e}"));
        }
        if err > worst {
            worst = err;
            worst_name = name;
        }
    }

    // Full stage II loss on a small upcycled model.
    let config = ModelConfig {
        hidden: 8,
        layers: 2,
        heads: 2,
        vocab_size: 16,
        ffn_mult: 1,
        experts: 4,
        top_k: 2,
        lora_rank: 2,
        lora_alpha: 4.0,
        max_seq: 16,
        aux_alpha: 0.1,
        encoder: EncoderConfig { width: 2, blocks: 1, heads: 1, max_patches: 1, seed: 3 },
        seed: 5,
        ..Default::default()
    };
    let model = TouchLanguageModel::new(config).unwrap().upcycle().unwrap();
    let params = model.param_count(|_| true);
    assert!(params <= GRAD_MAX_PARAMS, "toy model has {params} parameters");
    model.set_trainable(&StagePlan::stage2().trainable);
    // Move LoRA and experts off their upcycled values so every path carries gradient.
    let mut noise = Rng::new(77);
    let mut trainable = Vec::new();
    for (name, p) in model.named_params() {
        if !p.tensor.requires_grad() {
            continue;
        }
        if matches!(p.group, ParamGroup::Lora | ParamGroup::Experts) {
            let n = p.tensor.numel();
            for (v, e) in p.tensor.data_mut().iter_mut().zip(noise.normal_vec(n, 0.3)) {
                *v += e;
            }
        }
        if p.group == ParamGroup::Router {
            let n = p.tensor.numel();
            p.tensor.data_mut().copy_from_slice(&noise.normal_vec(n, 1.0));
        }
        trainable.push((name, p.tensor.clone()));
    }
    let mut img_rng = Rng::new(9);
    let clip = TactileClip::from_image((0..14 * 14 * 3).map(|_| img_rng.uniform()).collect(), 14, 14, Sensor::GelSight).unwrap();
    let pooled = model.encode_tactile(&clip).unwrap();
    let row = PromptRow {
        ids: vec![BOS, TOUCH, 7, 9, 4, 12, 5, 11, 6, EOS],
        touch_slot: 1,
        loss_mask: vec![false, false, false, false, false, true, true, true, true, true],
    };
    let ex = example_from_row(0, pooled, row, 1);
    let baseline: Vec<Vec<usize>> = model.forward_row(&ex.pooled, &ex.row, true).unwrap().routing.iter().map(|r| r.selected.clone()).collect();
    let crossings = std::cell::Cell::new(0usize);
    let inputs: Vec<Tensor> = trainable.iter().map(|(_, t)| t.clone()).collect();
    let loss_err = gradcheck(&inputs, GRAD_STEP, || {
        let sel: Vec<Vec<usize>> = no_grad(|| model.forward_row(&ex.pooled, &ex.row, true).unwrap().routing.iter().map(|r| r.selected.clone()).collect());
        if sel != baseline {
            crossings.set(crossings.get() + 1);
        }
        stage2_loss(&model, &ex).unwrap().0
    });
    let (_, parts) = stage2_loss(&model, &ex).unwrap();
    if loss_err >= GRAD_TOL {
        bad.push(format!("stage II loss: {loss_err:.2e}"));
    }
    let pass = bad.is_empty() && crossings.get() == 0 && parts.aux > 0.0;
    let mut v = Verdict::new(
        pass,
        format!(
            "{} ops worst {worst:.2e} ({worst_name}); stage II loss on {params}-parameter model {loss_err:.2e}; tolerance {GRAD_TOL:e}, h = {GRAD_STEP:e}",
            cases.len()
        ),
    );
    v.details.push(format!("{} trainable tensors checked; top-k selection changes under perturbation: {}; aux term {:.4}", trainable.len(), crossings.get(), parts.aux));
    v.details.extend(bad);
    v
}

// ------------------------------------------------------------ criterion 2

fn upcycle_identity() -> Verdict {
    let (samples, vocab) = corpus(11, TaskCounts { fpu: 25, tip: 15, cdr: 10 }, [1, 3]);
    let config = toy_model_config(vocab.len(), 2, 11);
    let dense = TouchLanguageModel::new(config).unwrap();
    let examples = prepare_examples(&dense, &samples, &PromptTemplate::default(), &vocab).unwrap();
    let trained = run_stage1(dense, &examples, &stage(1e-2, 1), 11, &mut |_| {}).unwrap().model;
    let moe = trained.upcycle().unwrap();
    let mut prompts: Vec<Example> = Vec::new();
    for ex in &examples {
        if prompts.last().is_none_or(|p| p.sample != ex.sample) {
            prompts.push(ex.clone());
        }
    }
    prompts.truncate(UPCYCLE_PROMPTS);
    let delta = upcycle_delta(&trained, &moe, &prompts).unwrap();
    Verdict::new(
        prompts.len() == UPCYCLE_PROMPTS && delta < UPCYCLE_TOL,
        format!("max |Δlogit| = {delta:.3e} over {} prompts after stage I (tolerance {UPCYCLE_TOL:e})", prompts.len()),
    )
}

// ------------------------------------------------------------ criterion 3

fn routing_contract() -> Verdict {
    let configs: Vec<(usize, usize)> = [2usize, 4, 8].iter().flat_map(|&e| [1usize, 2].map(|k| (e, k))).collect();
    let per_config = ROUTED_TOKENS.div_ceil(configs.len());
    let d = 8;
    let mut tokens = 0;
    let mut bad_support = 0;
    let mut worst_sum = 0.0f64;
    let mut changed = 0;
    no_grad(|| {
        for (i, &(experts, top_k)) in configs.iter().enumerate() {
            let mut rng = Rng::new(300 + i as u64);
            let router: Vec<f64> = rng.normal_vec(d * experts, 1.0);
            let ffns: Vec<SwiGlu> = (0..experts).map(|_| SwiGlu::new(&mut rng, d, d, ParamGroup::Experts)).collect();
            let layer = |scale: f64| MoELayer {
                router: Param::new(Tensor::param(router.iter().map(|w| w * scale).collect(), &[d, experts]).unwrap(), ParamGroup::Router),
                experts: ffns.clone(),
                top_k,
            };
            let x = Tensor::new(rng.normal_vec(per_config * d, 1.0), &[per_config, d]).unwrap();
            let modalities: Vec<Modality> = (0..per_config).map(|t| if t % 3 == 0 { Modality::Tactile } else { Modality::Text }).collect();
            let base = moe_route(&x, &layer(1.0), 0, &modalities, true).unwrap();
            for r in &base.records {
                tokens += 1;
                if r.probs.iter().filter(|&&p| p != 0.0).count() != top_k {
                    bad_support += 1;
                }
                worst_sum = worst_sum.max((r.probs.iter().sum::<f64>() - 1.0).abs());
            }
            for c in LOGIT_SCALES {
                let scaled = moe_route(&x, &layer(c), 0, &modalities, true).unwrap();
                for (a, b) in base.records.iter().zip(&scaled.records) {
                    let sa: BTreeSet<usize> = a.selected.iter().copied().collect();
                    let sb: BTreeSet<usize> = b.selected.iter().copied().collect();
                    if sa != sb {
                        changed += 1;
                    }
                }
            }
        }
    });
    Verdict::new(
        tokens >= ROUTED_TOKENS && bad_support == 0 && worst_sum <= PROB_SUM_TOL && changed == 0,
        format!(
            "{tokens} tokens over K∈{{2,4,8}} × k∈{{1,2}}: {bad_support} with ≠k nonzeros, worst |Σp−1| = {worst_sum:.1e}, {changed} selection changes under logit scales {LOGIT_SCALES:?}"
        ),
    )
}

// ------------------------------------------------------------ criterion 4

fn aux(f: &[f64], g: &[f64], alpha: f64) -> f64 {
    load_balance_loss(f, &Tensor::new(g.to_vec(), &[1, g.len()]).unwrap(), alpha).unwrap().item()
}

fn load_balance() -> Verdict {
    let alpha = 0.01;
    let mut worst_uniform = 0.0f64;
    let mut worst_onehot = 0.0f64;
    let mut worst_oracle = 0.0f64;
    let mut below = 0;
    let mut near_uniform_equal = 0;
    let mut rng = Rng::new(44);
    for k in [2usize, 3, 4, 8, 16] {
        let u = vec![1.0 / k as f64; k];
        worst_uniform = worst_uniform.max((aux(&u, &u, alpha) - alpha).abs());
        for hot in 0..k {
            let mut e = vec![0.0; k];
            e[hot] = 1.0;
            worst_onehot = worst_onehot.max((aux(&e, &e, alpha) - alpha * k as f64).abs());
        }
        for _ in 0..BALANCE_DRAWS / 5 {
            let raw: Vec<f64> = (0..k).map(|_| rng.uniform() + 1e-3).collect();
            let total: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|x| x / total).collect();
            let l = aux(&p, &p, alpha);
            // alpha * K * sum p_i^2, summed directly
            let oracle = alpha * k as f64 * p.iter().map(|x| x * x).sum::<f64>();
            worst_oracle = worst_oracle.max((l - oracle).abs());
            if l < alpha - BALANCE_TOL {
                below += 1;
            }
            let dist = p.iter().map(|x| (x - 1.0 / k as f64).abs()).fold(0.0, f64::max);
            if (l - alpha).abs() <= BALANCE_TOL && dist > 1e-4 {
                near_uniform_equal += 1;
            }
        }
    }
    Verdict::new(
        worst_uniform <= BALANCE_TOL && worst_onehot <= BALANCE_TOL && below == 0 && near_uniform_equal == 0 && worst_oracle <= BALANCE_TOL,
        format!(
            "uniform |L−α| ≤ {worst_uniform:.1e}, one-hot |L−αK| ≤ {worst_onehot:.1e}; {BALANCE_DRAWS} draws: {below} below α, {near_uniform_equal} non-uniform at equality, |L−αKΣp²| ≤ {worst_oracle:.1e}"
        ),
    )
}

// ------------------------------------------------------------ criterion 5

fn freezing() -> Verdict {
    let (samples, vocab) = corpus(5, TaskCounts { fpu: 12, tip: 8, cdr: 4 }, [1, 2]);
    let model = TouchLanguageModel::new(toy_model_config(vocab.len(), 2, 5)).unwrap();
    let examples = prepare_examples(&model, &samples, &PromptTemplate::default(), &vocab).unwrap();
    let h0 = group_hashes(&model);
    let s1 = run_stage1(model, &examples, &stage(1e-2, 1), 5, &mut |_| {}).unwrap().model;
    let h1 = group_hashes(&s1);
    let s2 = run_stage2(Some(&s1), &examples, &stage(3e-3, 1), 5, &mut |_| {}).unwrap().model;
    let h2 = group_hashes(&s2);

    let mut problems = Vec::new();
    for g in [ParamGroup::TouchEncoder, ParamGroup::WordEmbedding] {
        if h0[&g] != h2[&g] {
            problems.push(format!("{g:?} changed over the full run"));
        }
    }
    for (g, h) in &h0 {
        let changed = h1[g] != *h;
        if *g == ParamGroup::Adapter && !changed {
            problems.push("stage I left the adapter untouched".into());
        }
        if *g != ParamGroup::Adapter && changed {
            problems.push(format!("stage I changed {g:?}"));
        }
    }
    for g in [ParamGroup::Router, ParamGroup::Experts, ParamGroup::Lora, ParamGroup::Head] {
        if h2.get(&g).is_none() || h2.get(&g) == h0.get(&g) {
            problems.push(format!("stage II did not train {g:?}"));
        }
    }
    let short = |g: ParamGroup| h2.get(&g).map(|h| h[..12].to_string()).unwrap_or_default();
    let mut v = Verdict::new(
        problems.is_empty(),
        format!(
            "encoder {} and word embedding {} bit-identical after stage I + II; stage I touched only the adapter",
            short(ParamGroup::TouchEncoder),
            short(ParamGroup::WordEmbedding)
        ),
    );
    v.details = problems;
    v
}

// -------------------------------------------------------- criteria 6 and 7

struct SeedRun {
    seed: u64,
    two_stage: f64,
    scratch: f64,
    dense: f64,
    moe_active: usize,
    dense_active: usize,
    secs: f64,
}

fn probe_runs() -> &'static Vec<SeedRun> {
    static RUNS: OnceLock<Vec<SeedRun>> = OnceLock::new();
    RUNS.get_or_init(|| PROBE_SEEDS.iter().map(|&s| probe_seed(s)).collect())
}

/// Stage I → II, stage II from an untrained adapter, and a dense model of
/// the same active size trained the same way. Eval CE on a held-out split.
fn probe_seed(seed: u64) -> SeedRun {
    let start = Instant::now();
    let (samples, vocab) = corpus(seed, TaskCounts::from_total(PROBE_SAMPLES), [1, 4]);
    let split = samples.len() - (samples.len() as f64 * PROBE_EVAL_FRACTION).round() as usize;
    let template = PromptTemplate::default();
    let s1 = stage(PROBE_STAGE1_LR, PROBE_STAGE1_EPOCHS);
    let s2 = stage(PROBE_STAGE2_LR, PROBE_STAGE2_EPOCHS);

    let base = TouchLanguageModel::new(toy_model_config(vocab.len(), 2, seed)).unwrap();
    let train = prepare_examples(&base, &samples[..split], &template, &vocab).unwrap();
    let eval = prepare_examples(&base, &samples[split..], &template, &vocab).unwrap();
    let stage1 = run_stage1(base.deep_clone(), &train, &s1, seed, &mut |_| {}).unwrap().model;
    let two_stage = run_stage2(Some(&stage1), &train, &s2, seed, &mut |_| {}).unwrap().model;
    let scratch = run_stage2(Some(&base), &train, &s2, seed, &mut |_| {}).unwrap().model;

    let wide = TouchLanguageModel::new(toy_model_config(vocab.len(), 4, seed)).unwrap();
    let wide1 = run_stage1(wide, &train, &s1, seed, &mut |_| {}).unwrap().model;
    let dense = run_stage2_dense(&wide1, &train, &s2, seed, &mut |_| {}).unwrap().model;

    SeedRun {
        seed,
        two_stage: eval_ce(&two_stage, &eval).unwrap(),
        scratch: eval_ce(&scratch, &eval).unwrap(),
        dense: eval_ce(&dense, &eval).unwrap(),
        moe_active: two_stage.active_param_count(),
        dense_active: dense.active_param_count(),
        secs: start.elapsed().as_secs_f64(),
    }
}

fn probe_setup() -> String {
    format!(
        "{PROBE_SAMPLES} samples ({:.0}% held out), stage I lr {PROBE_STAGE1_LR:e} × {PROBE_STAGE1_EPOCHS} epochs, stage II lr {PROBE_STAGE2_LR:e} × {PROBE_STAGE2_EPOCHS} epochs, batch {PROBE_BATCH}",
        PROBE_EVAL_FRACTION * 100.0
    )
}

fn two_stage_benefit() -> Verdict {
    let runs = probe_runs();
    let wins = runs.iter().filter(|r| r.two_stage < r.scratch).count();
    // Each seed's time covers the dense arm too, so this bounds the probe from above.
    let secs: f64 = runs.iter().map(|r| r.secs).sum();
    let mut v = Verdict::new(
        wins >= TWO_STAGE_MIN_WINS && secs < TWO_STAGE_BUDGET_SECS,
        format!("stage I → II beats stage II alone on eval CE in {wins}/{} seeds (need {TWO_STAGE_MIN_WINS}); {secs:.0}s", runs.len()),
    );
    v.details.push(probe_setup());
    for r in runs {
        v.details.push(format!(
            "seed {}: two-stage {:.4}  stage II only {:.4}  {}",
            r.seed,
            r.two_stage,
            r.scratch,
            if r.two_stage < r.scratch { "win" } else { "loss" }
        ));
    }
    v
}

fn moe_vs_dense() -> Verdict {
    let runs = probe_runs();
    let wins = runs.iter().filter(|r| r.two_stage <= r.dense).count();
    let worst_gap = runs
        .iter()
        .map(|r| (r.moe_active as f64 - r.dense_active as f64).abs() / r.dense_active as f64)
        .fold(0.0, f64::max);
    let mut v = Verdict::new(
        wins >= MOE_MIN_WINS && worst_gap <= ACTIVE_PARAM_TOL,
        format!(
            "K=4/k=2 MoE ≤ dense on eval CE in {wins}/{} seeds (need {MOE_MIN_WINS}); active parameters {} vs {} ({:.2}% apart)",
            runs.len(),
            runs[0].moe_active,
            runs[0].dense_active,
            worst_gap * 100.0
        ),
    );
    v.details.push(probe_setup());
    for r in runs {
        v.details.push(format!(
            "seed {}: MoE {:.4}  dense {:.4}  {}",
            r.seed,
            r.two_stage,
            r.dense,
            if r.two_stage <= r.dense { "win" } else { "loss" }
        ));
    }
    v
}

// ------------------------------------------------------------ criterion 8

#[derive(Deserialize)]
struct BleuCase {
    candidate: String,
    references: Vec<String>,
    smoothing: bool,
    expected: f64,
}

#[derive(Deserialize)]
struct CiderCase {
    candidates: Vec<String>,
    references: Vec<Vec<String>>,
    expected: Vec<f64>,
}

#[derive(Deserialize)]
struct MeteorCase {
    candidate: String,
    reference: String,
    matches: usize,
    chunks: usize,
    expected: f64,
}

#[derive(Deserialize)]
struct MetricCases {
    bleu4: Vec<BleuCase>,
    cider: Vec<CiderCase>,
    meteor: Vec<MeteorCase>,
}

fn metric_oracles() -> Verdict {
    let path = repo().join("crates/core/tests/fixtures/metric_cases.json");
    let cases: MetricCases = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    let toks = |s: &str| metric_tokens(s);

    let mut bleu_err = 0.0f64;
    for c in &cases.bleu4 {
        let refs: Vec<Vec<String>> = c.references.iter().map(|r| toks(r)).collect();
        bleu_err = bleu_err.max((bleu4(&toks(&c.candidate), &refs, c.smoothing) - c.expected).abs());
    }
    let mut cider_err = 0.0f64;
    let mut cider_n = 0;
    for c in &cases.cider {
        let cands: Vec<Vec<String>> = c.candidates.iter().map(|s| toks(s)).collect();
        let refs: Vec<Vec<Vec<String>>> = c.references.iter().map(|rs| rs.iter().map(|r| toks(r)).collect()).collect();
        let got = cider(&cands, &refs);
        for (g, e) in got.per_sample.iter().zip(&c.expected) {
            cider_err = cider_err.max((g - e).abs());
            cider_n += 1;
        }
    }
    let mut meteor_err = 0.0f64;
    let mut align_bad = 0;
    for c in &cases.meteor {
        let (cand, reference) = (toks(&c.candidate), toks(&c.reference));
        let al = align(&cand, &reference);
        if al.matches != c.matches || al.chunks != c.chunks {
            align_bad += 1;
        }
        meteor_err = meteor_err.max((meteor_pair(&cand, &reference) - c.expected).abs());
    }

    // Echo model: every output is a reference answer.
    let (samples, _) = corpus(8, TaskCounts { fpu: 8, tip: 6, cdr: 4 }, [1, 1]);
    let outputs: Vec<String> = samples.iter().map(|s| s.answers[0].clone()).collect();
    let selection = MetricSelection::parse("bleu4").unwrap();
    let report = score_outputs(&samples, &outputs, &selection, &mut []).unwrap();
    let echo = report.overall.means["bleu4"];

    let counts = (cases.bleu4.len(), cider_n, cases.meteor.len());
    let enough = counts.0 >= METRIC_MIN_CASES && counts.1 >= METRIC_MIN_CASES && counts.2 >= METRIC_MIN_CASES;
    Verdict::new(
        enough && bleu_err <= METRIC_TOL && cider_err <= METRIC_TOL && meteor_err <= METRIC_TOL && align_bad == 0 && echo == 100.0,
        format!(
            "BLEU-4 {} cases ≤ {bleu_err:.1e}, CIDEr {} values ≤ {cider_err:.1e}, METEOR-lite {} cases ≤ {meteor_err:.1e} ({align_bad} alignment mismatches); echo BLEU-4 = {echo}",
            counts.0, counts.1, counts.2
        ),
    )
}

// ------------------------------------------------------------ criterion 9

fn input_unification() -> Verdict {
    let encoder = TouchEncoder::new(EncoderConfig { width: 8, blocks: 1, heads: 2, max_patches: 256, seed: 21 }).unwrap();
    let mut rng = Rng::new(31);
    let mut problems = Vec::new();
    let mut sizes = Vec::new();
    for (side, expected) in [(14usize, 1usize), (56, 16), (224, 256)] {
        let pixels = side * side * 3;
        let p = num_patches(side, side);
        let image: Vec<f64> = (0..pixels).map(|_| rng.uniform()).collect();
        let direct = encoder.encode_image(&image, side, side).unwrap();
        let as_video = encoder.encode_clip(&TactileClip::from_image(image.clone(), side, side, Sensor::GelSightMini).unwrap()).unwrap();
        if direct.to_vec().iter().zip(as_video.to_vec()).any(|(a, b)| a.to_bits() != b.to_bits()) || direct.shape() != as_video.shape() {
            problems.push(format!("{side}×{side}: image and one-frame video differ"));
        }
        if p != expected || direct.shape()[0] != expected || p != side * side / 196 {
            problems.push(format!("{side}×{side}: {p} patches, encoder gave {}", direct.shape()[0]));
        }
        sizes.push(format!("{side}→{}", direct.shape()[0]));

        // N-frame pooling against a plain elementwise mean of per-frame tokens.
        let n = 3;
        let frames: Vec<f64> = (0..n * pixels).map(|_| rng.uniform()).collect();
        let clip = TactileClip::new(frames.clone(), n, side, side, Sensor::GelSight).unwrap();
        let pooled = encoder.encode_clip(&clip).unwrap().to_vec();
        let per_frame: Vec<Vec<f64>> = (0..n).map(|i| encoder.encode_image(&frames[i * pixels..(i + 1) * pixels], side, side).unwrap().to_vec()).collect();
        let oracle: Vec<f64> = (0..pooled.len()).map(|j| per_frame.iter().map(|f| f[j]).sum::<f64>() / n as f64).collect();
        if pooled.iter().zip(&oracle).any(|(a, b)| a.to_bits() != b.to_bits()) {
            problems.push(format!("{side}×{side}: {n}-frame pooling differs from the elementwise mean"));
        }
    }
    let mut v = Verdict::new(
        problems.is_empty(),
        format!("image ≡ one-frame video bitwise; 3-frame pooling ≡ elementwise mean bitwise; patches {}", sizes.join(", ")),
    );
    v.details = problems;
    v
}

// ----------------------------------------------------------- criterion 10

/// Two clusters of pathways over two MoE layers with 4 experts, top-2.
fn two_cluster_traces(seed: u64, n: usize) -> TraceSet {
    let mut rng = Rng::new(seed);
    let mut traces = TraceSet::new(4, 2, vec![0, 1]);
    for t in 0..n {
        let cluster = t % 2;
        let mut probs = Vec::new();
        let mut selected = Vec::new();
        for layer in 0..2 {
            let (a, b) = if cluster == 0 { (layer, layer + 1) } else { (3 - layer, 2 - layer) };
            let p = rng.uniform_range(0.55, 0.95);
            let mut row = vec![0.0; 4];
            row[a] = p;
            row[b] = 1.0 - p;
            probs.push(row);
            selected.push(vec![a, b]);
        }
        traces.tokens.push(TokenTrace {
            sequence: t / 8,
            position: t % 8,
            modality: if t % 3 == 0 { Modality::Tactile } else { Modality::Text },
            vocab_id: None,
            probs,
            selected,
        });
    }
    traces
}

fn analytics() -> Verdict {
    let mut problems = Vec::new();

    // Distributions from a real upcycled model.
    let (samples, vocab) = corpus(6, TaskCounts { fpu: 6, tip: 4, cdr: 2 }, [1, 2]);
    let dense = TouchLanguageModel::new(toy_model_config(vocab.len(), 2, 6)).unwrap();
    let moe = dense.upcycle().unwrap();
    let examples = prepare_examples(&moe, &samples, &PromptTemplate::default(), &vocab).unwrap();
    let traces = collect_traces(&moe, &examples).unwrap();
    let mut worst_sum = 0.0f64;
    let mut vectors = 0;
    for layer in traces.layers.clone() {
        for (m, dist) in expert_distribution(&traces, layer).unwrap() {
            vectors += 1;
            let s: f64 = dist.iter().sum();
            worst_sum = worst_sum.max((s - 1.0).abs());
            if dist.iter().any(|&x| x < 0.0) {
                problems.push(format!("layer {layer} {m:?}: negative share"));
            }
        }
    }

    // PCA pathways against an SVD of the centered pathway matrix.
    let synth = two_cluster_traces(17, 60);
    let rows = synth.pathway_matrix();
    let (n, m) = (rows.len(), rows[0].len());
    let mean: Vec<f64> = (0..m).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let centered = nalgebra::DMatrix::from_fn(n, m, |i, j| rows[i][j] - mean[j]);
    let svd = centered.clone().svd(false, true);
    let vt = svd.v_t.unwrap();
    let (top, _) = svd.singular_values.iter().enumerate().fold((0, f64::MIN), |acc, (i, &s)| if s > acc.1 { (i, s) } else { acc });
    let mut pc1: Vec<f64> = vt.row(top).iter().copied().collect();
    fix_sign(&mut pc1);
    let pca = Pca::fit(&rows).unwrap();
    let comp_err = pca.components[0].iter().zip(&pc1).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let var_oracle = svd.singular_values[top].powi(2) / (n - 1) as f64;
    let var_err = (pca.variances[0] - var_oracle).abs();
    let oracle_scores: Vec<f64> = (0..n).map(|i| centered.row(i).iter().zip(&pc1).map(|(a, b)| a * b).sum::<f64>().abs()).collect();
    let pathways = top_pathways(&synth, PATHWAYS).unwrap();
    let mut score_err = 0.0f64;
    for p in &pathways {
        score_err = score_err.max((p.score - oracle_scores[p.token]).abs());
    }
    let mut oracle_order: Vec<usize> = (0..n).collect();
    oracle_order.sort_by(|&a, &b| oracle_scores[b].total_cmp(&oracle_scores[a]).then(a.cmp(&b)));
    let kth = oracle_scores[oracle_order[PATHWAYS - 1]];
    let chosen_ok = pathways.iter().all(|p| oracle_scores[p.token] >= kth - PCA_TOL);
    // The clusters must separate along PC1.
    let proj: Vec<f64> = rows.iter().map(|r| pca.project(r, 0)).collect();
    let separated = (0..n).all(|i| (proj[i] > 0.0) == (proj[0] > 0.0) || i % 2 == 1)
        && (0..n).filter(|i| i % 2 == 1).all(|i| (proj[i] > 0.0) != (proj[0] > 0.0));

    if pathways.len() != PATHWAYS {
        problems.push(format!("{} pathways returned", pathways.len()));
    }
    if !chosen_ok {
        problems.push("pathway selection differs from the SVD ranking".into());
    }
    if !separated {
        problems.push("two clusters do not separate along PC1".into());
    }
    let pass = problems.is_empty() && worst_sum <= DIST_SUM_TOL && comp_err <= PCA_TOL && var_err <= PCA_TOL && score_err <= PCA_TOL;
    let mut v = Verdict::new(
        pass,
        format!(
            "{vectors} distribution vectors, worst |Σ−1| = {worst_sum:.1e}; PC1 vs SVD {comp_err:.1e}, variance {var_err:.1e}, scores {score_err:.1e} (tolerance {PCA_TOL:e}); {} pathways",
            pathways.len()
        ),
    );
    v.details = problems;
    v
}

// ----------------------------------------------------------- criterion 11

const ARTIFACTS: [&str; 12] = [
    "data/dataset.jsonl",
    "data/spec.toml",
    "s1/stage1.ckpt",
    "s1/train_log.jsonl",
    "s2/stage2.ckpt",
    "s2/train_log.jsonl",
    "ev/report.json",
    "ev/report.csv",
    "an/traces.json",
    "an/distribution.csv",
    "an/pathways.csv",
    "an/analysis.json",
];

fn run_pipeline(root: &Path) {
    let bin = env!("CARGO_BIN_EXE_touchmoe");
    let config = repo().join("configs/toy.toml");
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let data = root.join("data/dataset.jsonl");
    let steps: Vec<Vec<String>> = vec![
        vec!["gen-data".into(), "--spec".into(), s(&repo().join("configs/toy-data.toml")), "--out".into(), s(&root.join("data"))],
        vec!["train-stage1".into(), "--config".into(), s(&config), "--data".into(), s(&data), "--out".into(), s(&root.join("s1"))],
        vec![
            "train-stage2".into(), "--config".into(), s(&config), "--data".into(), s(&data),
            "--from".into(), s(&root.join("s1/stage1.ckpt")), "--out".into(), s(&root.join("s2")),
        ],
        vec![
            "eval".into(), "--ckpt".into(), s(&root.join("s2/stage2.ckpt")), "--data".into(), s(&data),
            "--out".into(), s(&root.join("ev")), "--metrics".into(), "bleu4,cider,meteor,conclusion".into(), "--max-new".into(), "24".into(),
        ],
        vec!["analyze".into(), "--ckpt".into(), s(&root.join("s2/stage2.ckpt")), "--data".into(), s(&data), "--out".into(), s(&root.join("an"))],
    ];
    for args in steps {
        let out = Command::new(bin).arg("-q").args(&args).output().unwrap();
        assert!(out.status.success(), "{} failed: {}", args[0], String::from_utf8_lossy(&out.stderr));
    }
}

fn frame_files(root: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(root.join("data/frames"))
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect()
}

fn reproducibility() -> Verdict {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let start = Instant::now();
    run_pipeline(dirs[0].path());
    let once = start.elapsed().as_secs_f64();
    run_pipeline(dirs[1].path());
    let mut differing: Vec<String> = ARTIFACTS
        .iter()
        .filter(|a| std::fs::read(dirs[0].path().join(a)).unwrap() != std::fs::read(dirs[1].path().join(a)).unwrap())
        .map(|a| a.to_string())
        .collect();
    let (fa, fb) = (frame_files(dirs[0].path()), frame_files(dirs[1].path()));
    if fa != fb {
        differing.push("data/frames".into());
    }
    let mut v = Verdict::new(
        differing.is_empty() && once < PIPELINE_BUDGET_SECS,
        format!(
            "gen-data → stage I → stage II → eval → analyze twice on the toy configs: {} artifacts and {} frame files byte-identical, {once:.1}s per run",
            ARTIFACTS.len() - differing.iter().filter(|d| *d != "data/frames").count(),
            fa.len()
        ),
    );
    v.details = differing.into_iter().map(|d| format!("differs: {d}")).collect();
    v
}
