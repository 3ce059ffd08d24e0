use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use touchmoe_core::data::{generate_synthetic, GeneratorSpec, PromptTemplate, TaskCounts, Vocab};
use touchmoe_core::eval::{cider, metric_tokens};
use touchmoe_core::frontend::{EncoderConfig, TouchEncoder};
use touchmoe_core::model::{moe_route, Modality, ModelConfig, MoELayer, TouchLanguageModel};
use touchmoe_core::nn::{Param, ParamGroup, SwiGlu};
use touchmoe_core::train::{prepare_examples, StageConfig, StagePlan, Trainer};
use touchmoe_core::{no_grad, Rng, Tensor};

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [32usize, 64, 128] {
        let mut rng = Rng::new(1);
        let a = Tensor::new(rng.normal_vec(n * n, 1.0), &[n, n]).unwrap();
        let b = Tensor::new(rng.normal_vec(n * n, 1.0), &[n, n]).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| no_grad(|| a.matmul(&b).unwrap()))
        });
    }
    group.finish();
}

fn encoder(c: &mut Criterion) {
    let enc = TouchEncoder::new(EncoderConfig { width: 32, blocks: 2, heads: 4, max_patches: 256, seed: 7 }).unwrap();
    let mut group = c.benchmark_group("encode_image");
    for side in [56usize, 224] {
        let mut rng = Rng::new(2);
        let frame: Vec<f64> = (0..side * side * 3).map(|_| rng.uniform()).collect();
        group.bench_with_input(BenchmarkId::from_parameter(side), &side, |bench, &s| {
            bench.iter(|| no_grad(|| enc.encode_image(black_box(&frame), s, s).unwrap()))
        });
    }
    group.finish();
}

fn routing(c: &mut Criterion) {
    let (d, experts, tokens) = (32, 8, 256);
    let mut rng = Rng::new(3);
    let layer = MoELayer {
        router: Param::new(Tensor::param(rng.normal_vec(d * experts, 0.02), &[d, experts]).unwrap(), ParamGroup::Router),
        experts: (0..experts).map(|_| SwiGlu::new(&mut rng, d, 2 * d, ParamGroup::Experts)).collect(),
        top_k: 2,
    };
    let x = Tensor::new(rng.normal_vec(tokens * d, 1.0), &[tokens, d]).unwrap();
    let modalities = vec![Modality::Text; tokens];
    c.bench_function("moe_route 256x32 K=8 k=2", |bench| {
        bench.iter(|| no_grad(|| moe_route(&x, &layer, 0, &modalities, false).unwrap()))
    });
}

fn train_step(c: &mut Criterion) {
    let mut spec = GeneratorSpec::new(4, TaskCounts { fpu: 16, tip: 8, cdr: 8 });
    spec.frame_size = 28;
    let samples = generate_synthetic(&spec).unwrap();
    let vocab = Vocab::build(samples.iter().flat_map(|s| std::iter::once(s.question.as_str()).chain(s.answers.iter().map(String::as_str))));
    let config = ModelConfig {
        hidden: 32,
        layers: 2,
        heads: 4,
        vocab_size: vocab.len(),
        ffn_mult: 2,
        experts: 4,
        top_k: 2,
        lora_rank: 4,
        lora_alpha: 8.0,
        max_seq: 128,
        encoder: EncoderConfig { width: 32, blocks: 2, heads: 4, max_patches: 256, seed: 7 },
        seed: 4,
        ..Default::default()
    };
    let model = TouchLanguageModel::new(config).unwrap().upcycle().unwrap();
    let examples = prepare_examples(&model, &samples, &PromptTemplate::default(), &vocab).unwrap();
    let stage = StageConfig { epochs: 1_000_000, batch_size: 8, ..StageConfig::stage2_default() };
    let mut trainer = Trainer::new(model, StagePlan::stage2(), stage, &examples, 4).unwrap();
    c.bench_function("stage II step, batch 8", |bench| bench.iter(|| trainer.step().unwrap()));
}

fn metrics(c: &mut Criterion) {
    let mut rng = Rng::new(5);
    let words = ["the", "surface", "is", "rough", "smooth", "hard", "soft", "and", "slightly", "grainy"];
    let sentence = |rng: &mut Rng| (0..12).map(|_| *rng.choose(&words)).collect::<Vec<_>>().join(" ");
    let cands: Vec<Vec<String>> = (0..200).map(|_| metric_tokens(&sentence(&mut rng))).collect();
    let refs: Vec<Vec<Vec<String>>> = (0..200).map(|_| (0..3).map(|_| metric_tokens(&sentence(&mut rng))).collect()).collect();
    c.bench_function("cider 200 samples x 3 refs", |bench| bench.iter(|| cider(black_box(&cands), black_box(&refs))));
}

criterion_group!(benches, matmul, encoder, routing, train_step, metrics);
criterion_main!(benches);
