// Scores every token of a few synthetic sequences and prints the
// surprisal, cross-task rarity, fused score and assigned budget.

use privcl::corpus::{compute_corpus_stats, Corpus};
use privcl::model::{init_lm, ModelDims};
use privcl::privacy::PrivacyConfig;
use privcl::sensitivity::{build_profile, SensitivityConfig};
use privcl::synth::{self, SynthConfig};

pub fn run_example() -> privcl::Result<()> {
    let records = synth::generate(&SynthConfig {
        train_per_task: 40,
        eval_per_task: 5,
        ..SynthConfig::default()
    })?;
    let corpus = Corpus::from_records(&records, 4096)?;
    let stats = compute_corpus_stats(&corpus.tasks, 0.2)?;
    let dims = ModelDims {
        vocab: corpus.vocab.len(),
        d_emb: 16,
        n_ctx: 4,
        d_hidden: 32,
    };
    let model = init_lm(dims, 7)?;
    let config = SensitivityConfig::default();
    let privacy = PrivacyConfig::default();

    let planted = synth::sensitive_surfaces(3);
    let seq = corpus.tasks[0]
        .train
        .iter()
        .find(|s| s.tokens.iter().any(|&t| planted.contains(&corpus.vocab.surface(t))))
        .expect("some sequence carries a planted token");
    let profile = build_profile(&model, None, &stats, &corpus.vocab, seq, &config, &privacy)?;

    println!("{:<14} {:>8} {:>8} {:>8} {:>8} {:>8}", "token", "score1", "score2", "score", "eps", "sigma");
    for e in &profile.entries {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.3}"));
        println!(
            "{:<14} {:>8.3} {:>8.3} {:>8.3} {:>8} {:>8}",
            corpus.vocab.surface(e.token),
            e.score1,
            e.score2,
            e.score,
            opt(e.epsilon),
            opt(e.sigma)
        );
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> privcl::Result<()> {
    run_example()
}
