use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use pdos_bench::{default_model, retrieval_fixture, titles};
use pdos_core::oracle::isolated_branch_body;
use pdos_core::pipeline::step_head;
use pdos_core::{
    build_layout, run_pipeline, tree_mask, DecodeConfig, DecodeSession, ForwardEngine, ForwardRequest, Mode, Skeleton,
    TokenId,
};

fn forward(c: &mut Criterion) {
    let model = default_model(0);
    let tokens: Vec<TokenId> = (0..128).map(|i| i % 200).collect();
    c.bench_function("forward/prefill_128", |b| {
        b.iter(|| {
            let mut cache = model.new_cache();
            model.forward(&ForwardRequest::causal(0, &tokens), &mut cache).unwrap()
        })
    });
}

/// Branch bodies decoded together under the tree mask versus one at a time.
fn branches(c: &mut Criterion) {
    let model = default_model(1);
    let prefix: Vec<TokenId> = (0..64).map(|i| 32 + i % 90).collect();
    let config = DecodeConfig { max_steps_per_branch: 24, ..Default::default() };
    let mut group = c.benchmark_group("branches");
    for n in [2, 4, 8] {
        let titles = titles(n);
        group.bench_with_input(BenchmarkId::new("parallel", n), &titles, |b, titles| {
            b.iter(|| {
                let mut s = DecodeSession::new(&model, config.clone(), &prefix, Mode::Parallel).unwrap();
                let skeleton =
                    Skeleton { preamble: vec![], branches: titles.clone(), block_start: prefix.len(), terminated: true };
                s.run_stage2(&skeleton, prefix.len()).unwrap()
            })
        });
        group.bench_with_input(BenchmarkId::new("isolated", n), &titles, |b, titles| {
            b.iter(|| {
                let first = (prefix.len() + 4) as u32;
                titles
                    .iter()
                    .map(|t| isolated_branch_body(&model, &prefix, &step_head(t), first, 24).unwrap())
                    .collect::<Vec<_>>()
            })
        });
    }
    group.finish();
}

fn scripted_pipeline(c: &mut Criterion) {
    let (engine, prompt) = retrieval_fixture(10, 0);
    let config = DecodeConfig::default();
    let mut group = c.benchmark_group("retrieval_scripted");
    group.sample_size(20);
    for mode in [Mode::Normal, Mode::Parallel] {
        group.bench_function(format!("{mode:?}").to_lowercase(), |b| {
            b.iter(|| run_pipeline(&engine, &prompt, &config, mode).unwrap())
        });
    }
    group.finish();
}

fn mask(c: &mut Criterion) {
    c.bench_function("tree_mask/8x16", |b| {
        b.iter(|| {
            let mut layout = build_layout(128, &[6; 8]).unwrap();
            for _ in 0..16 {
                layout.push_step(&[true; 8]).unwrap();
            }
            tree_mask(&layout).rows()
        })
    });
}

criterion_group!(benches, forward, branches, scripted_pipeline, mask);
criterion_main!(benches);
