//! Fixtures shared by the criterion benches.

use pdos_core::harness::{gen_retrieval_task, CompiledTask};
use pdos_core::{init_model, Instruction, ModelConfig, ScriptedEngine, TokenId, Transformer};

/// Scripted engine and prompt for the retrieval task with `n` branches.
pub fn retrieval_fixture(n: usize, seed: u64) -> (ScriptedEngine<CompiledTask>, Vec<TokenId>) {
    let task = gen_retrieval_task(n, seed, 20, 5).expect("valid task parameters");
    let script = task.compile(&Instruction::builtin());
    let prompt = script.prompt().to_vec();
    (ScriptedEngine::new(script), prompt)
}

/// The default-sized transformer.
pub fn default_model(seed: u64) -> Transformer {
    init_model(ModelConfig { seed, ..Default::default() }).expect("default config is valid")
}

/// `n` distinct short byte titles.
pub fn titles(n: usize) -> Vec<Vec<TokenId>> {
    (0..n).map(|i| vec![b'a' as TokenId + i as TokenId, b'0' as TokenId]).collect()
}
