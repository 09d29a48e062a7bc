mod common;

use common::{equal_body_task, random_task, short_instruction, tiny_config, two_block_task};
use pdos_core::harness::{gen_retrieval_task, Branch, Segment, TaskKind, TaskScript};
use pdos_core::model::{scripted_engine, Script};
use pdos_core::oracle::isolated_branch_body;
use pdos_core::pipeline::{step_head, ContinuationEnd, Stage1Outcome};
use pdos_core::vocab::{self, TokenId, EOS, MARK, TERM};
use pdos_core::{
    argmax, init_model, run_pipeline, DecodeConfig, DecodeSession, ForwardEngine, ForwardRequest, GuidedEngine,
    Instruction, Mode, ScriptedEngine, Skeleton,
};

fn run(task: &TaskScript, mode: Mode) -> (String, pdos_core::DecodeTrace) {
    let script = task.compile(&short_instruction());
    let prompt = script.prompt().to_vec();
    run_pipeline(ScriptedEngine::new(script), &prompt, &DecodeConfig::default(), mode).unwrap()
}

#[test]
fn single_branch_matches_plain_causal_decode() {
    let model = init_model(tiny_config(4)).unwrap();
    let prefix: Vec<TokenId> = vocab::encode("shared prefix");
    let title = vocab::encode("only");
    let mut session =
        DecodeSession::new(&model, DecodeConfig { max_steps_per_branch: 20, ..Default::default() }, &prefix, Mode::Parallel)
            .unwrap();
    let skeleton = Skeleton { preamble: vec![], branches: vec![title.clone()], block_start: prefix.len(), terminated: true };
    let block = session.run_stage2(&skeleton, prefix.len()).unwrap();

    // plain causal decode of prefix + head with ordinary positions
    let mut seq = prefix.clone();
    seq.extend(step_head(&title));
    let mut cache = model.new_cache();
    let mut logits = model.forward(&ForwardRequest::causal(0, &seq), &mut cache).unwrap();
    let mut body = Vec::new();
    loop {
        let t = argmax(logits.last());
        if matches!(t, MARK | TERM | EOS) || body.len() == 20 {
            break;
        }
        body.push(t);
        if body.len() == 20 {
            break;
        }
        logits = model.forward(&ForwardRequest::causal(cache.len(), &[t]), &mut cache).unwrap();
    }
    assert_eq!(block.bodies[0], body);
    let first = pdos_core::step_positions(&block.layout, 0);
    assert_eq!(first as usize, seq.len());
    assert_eq!(isolated_branch_body(&model, &prefix, &step_head(&title), first, 20).unwrap(), body);
}

#[test]
fn four_equal_bodies_take_26_parallel_passes() {
    let task = equal_body_task(4, 25);
    let (text, trace) = run(&task, Mode::Parallel);
    assert_eq!(text, task.answer_text());
    let block = &trace.blocks[0];
    assert_eq!(block.body_lens, vec![25; 4]);
    // one head prefill that yields each first body token, then 25 passes,
    // the last of which yields every marker
    assert_eq!(trace.parallel.prefill_passes, 1);
    assert_eq!(trace.parallel.decode_passes, 25);
    assert_eq!(block.passes, 26);
    assert_eq!(trace.parallel.tokens_emitted, 100);
    assert_eq!(block.position_law_violations(), 0);
}

#[test]
fn empty_bodies_still_complete() {
    let task = TaskScript::new(
        TaskKind::Custom,
        "List names.",
        vec![
            Segment::Block(vec![
                Branch { title: "x".into(), body: String::new() },
                Branch { title: "y".into(), body: String::new() },
            ]),
            Segment::Text(" fin".into()),
        ],
        None,
    )
    .unwrap();
    let (text, trace) = run(&task, Mode::Parallel);
    assert_eq!(text, "####x:####y:####%%%% fin");
    assert_eq!(trace.blocks[0].passes, 1);
    assert_eq!(trace.block_count, 1);
}

#[test]
fn second_marker_opens_second_block() {
    let task = two_block_task();
    let (text, trace) = run(&task, Mode::Parallel);
    assert_eq!(trace.block_count, 2);
    assert_eq!(trace.blocks.len(), 2);
    assert_eq!(trace.blocks[1].n_branches, 3);
    assert_eq!(text, task.answer_text());
}

#[test]
fn retrieval_skeleton_has_ten_name_titles() {
    let task = gen_retrieval_task(10, 7, 20, 5).unwrap();
    let script = task.compile(&Instruction::builtin());
    let prompt = script.prompt().to_vec();
    let mut session =
        DecodeSession::new(ScriptedEngine::new(script), DecodeConfig::default(), &prompt, Mode::Parallel).unwrap();
    let Stage1Outcome::Skeleton { skeleton, block_start, .. } = session.run_stage1().unwrap() else {
        panic!("no skeleton")
    };
    let Segment::Block(branches) = &task.segments[1] else { panic!() };
    let titles: Vec<String> = skeleton.branches.iter().map(|t| vocab::decode(t)).collect();
    assert_eq!(titles, branches.iter().map(|b| b.title.clone()).collect::<Vec<_>>());
    assert!(skeleton.terminated);
    assert_eq!(vocab::decode(&skeleton.preamble), "Check each GPA against ".to_string() + &titles_range(&task));
    assert_eq!(block_start, prompt.len() + skeleton.preamble.len());
}

fn titles_range(task: &TaskScript) -> String {
    let Segment::Text(t) = &task.segments[0] else { panic!() };
    t.trim_start_matches("Check each GPA against ").to_string()
}

#[test]
fn no_marker_falls_back_to_plain_decoding() {
    let prompt = vocab::encode("say hi");
    let script = move |v: &[TokenId]| {
        let out = v.len().saturating_sub(6);
        Some(*b"hello: world".map(|b| b as TokenId).get(out).unwrap_or(&EOS))
    };
    let mut session =
        DecodeSession::new(scripted_engine(script), DecodeConfig::default(), &prompt, Mode::Parallel).unwrap();
    assert!(matches!(session.run_stage1().unwrap(), Stage1Outcome::NoMark { .. }));
    assert_eq!(session.tokens(), &prompt[..]);

    let (text, trace) = run_pipeline(scripted_engine(script), &prompt, &DecodeConfig::default(), Mode::Parallel).unwrap();
    assert_eq!(text, "hello: world");
    assert!(trace.fallback);
    assert_eq!(trace.block_count, 0);
}

#[test]
fn final_text_is_preamble_blocks_and_conclusion() {
    for seed in 0..40 {
        let task = random_task(seed);
        let (par, trace) = run(&task, Mode::Parallel);
        let (norm, _) = run(&task, Mode::Normal);
        assert_eq!(par, task.answer_text(), "seed {seed}");
        assert_eq!(par, norm, "seed {seed}");
        assert_eq!(vocab::decode(&vocab::encode(&par)), par);
        assert_eq!(trace.block_count, task.n_blocks());
        let (n, p) = task.analytic_passes();
        assert_eq!(trace.total_passes(), p, "seed {seed}");
        let (_, ntrace) = run(&task, Mode::Normal);
        assert_eq!(ntrace.total_passes(), n);
    }
}

#[test]
fn branch_order_follows_titles() {
    let task = random_task(3);
    let script = task.compile(&short_instruction());
    let prompt = script.prompt().to_vec();
    let mut session =
        DecodeSession::new(ScriptedEngine::new(script), DecodeConfig::default(), &prompt, Mode::Parallel).unwrap();
    let Stage1Outcome::Skeleton { skeleton, block_start, .. } = session.run_stage1().unwrap() else { panic!() };
    let block = session.run_stage2(&skeleton, block_start).unwrap();
    assert_eq!(block.titles, skeleton.branches);
    let flat = block.flatten();
    let Segment::Block(branches) = &task.segments[1] else { panic!() };
    let mut expected = Vec::new();
    for b in branches {
        expected.push(MARK);
        expected.extend(vocab::encode(&b.title));
        expected.push(vocab::COLON);
        expected.extend(vocab::encode(&b.body));
    }
    expected.extend([MARK, TERM]);
    assert_eq!(flat, expected);
    let out = session.run_stage3(&block).unwrap();
    let expected_end = if task.n_blocks() == 1 { ContinuationEnd::Eos } else { ContinuationEnd::NewBlock };
    assert_eq!(out.end, expected_end);
}

#[test]
fn single_branch_has_no_speedup() {
    let task = equal_body_task(1, 30);
    let (n_text, n) = run(&task, Mode::Normal);
    let (p_text, p) = run(&task, Mode::Parallel);
    assert_eq!(n_text, p_text);
    let ratio = (p.output_tokens as f64 / p.total_passes() as f64) / (n.output_tokens as f64 / n.total_passes() as f64);
    assert!(ratio <= 1.0, "{ratio}");
}

#[test]
fn step_cap_marks_branch_without_failing() {
    let task = equal_body_task(3, 12);
    let script = task.compile(&short_instruction());
    let prompt = script.prompt().to_vec();
    let config = DecodeConfig { max_steps_per_branch: 5, ..Default::default() };
    let mut session = DecodeSession::new(ScriptedEngine::new(script), config, &prompt, Mode::Parallel).unwrap();
    let Stage1Outcome::Skeleton { skeleton, block_start, .. } = session.run_stage1().unwrap() else { panic!() };
    let block = session.run_stage2(&skeleton, block_start).unwrap();
    assert!(block.bodies.iter().all(|b| b.len() == 5));
    let trace = &session.trace().blocks[0];
    assert_eq!(trace.capped, vec![true; 3]);
    assert_eq!(trace.passes, trace.expected_passes());
    assert_eq!(trace.passes, 5);
}

#[test]
fn guided_transformer_runs_both_modes_alike() {
    let model = std::sync::Arc::new(init_model(tiny_config(9)).unwrap());
    for seed in 0..5 {
        let task = random_task(100 + seed);
        let script = task.compile(&short_instruction());
        let prompt = script.prompt().to_vec();
        let engine = GuidedEngine::new(model.clone(), script);
        let (a, ta) = run_pipeline(&engine, &prompt, &DecodeConfig::default(), Mode::Parallel).unwrap();
        let (b, _) = run_pipeline(&engine, &prompt, &DecodeConfig::default(), Mode::Normal).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, task.answer_text());
        assert_eq!(ta.position_law_violations(), 0);
    }
}

#[test]
fn trace_serializes_to_json() {
    let (_, trace) = run(&two_block_task(), Mode::Parallel);
    let json = serde_json::to_value(&trace).unwrap();
    assert_eq!(json["block_count"], 2);
    assert_eq!(json["mode"], "parallel");
    assert!(json["parallel"]["prefill_passes"].as_u64().unwrap() >= 2);
    let back: pdos_core::DecodeTrace = serde_json::from_value(json).unwrap();
    assert_eq!(back.blocks, trace.blocks);
    assert_eq!(back.final_text, trace.final_text);
}

#[test]
fn script_trait_is_usable_directly() {
    let task = two_block_task();
    let c = task.compile(&Instruction::builtin());
    assert_eq!(c.next_token(c.prompt()), Some(b'F' as TokenId));
}
