// Maps scores to budgets and noise scales, perturbs one embedding and
// composes the resulting ledger.

use privcl::corpus::{StopwordSet, TokenizedSequence, Vocabulary};
use privcl::model::{init_lm, ModelDims};
use privcl::privacy::{
    allocate_budget, compose_sequence, noise_sigma, perturb_embedding, Exposure, NoiseSource, PrivacyConfig,
    PrivacyLedger,
};
use privcl::sensitivity::TokenSensitivity;

pub fn run_example() -> privcl::Result<()> {
    let config = PrivacyConfig::default();
    println!("{:>6} {:>8} {:>8}", "score", "eps", "sigma");
    for score in [0.05, 0.25, 0.5, 0.75, 0.95] {
        let eps = allocate_budget(score, &config)?;
        let sigma = noise_sigma(eps, config.delta, config.clip_norm, config.variant)?;
        println!("{score:>6.2} {eps:>8.3} {sigma:>8.3}");
    }

    let vocab = Vocabulary::build(["wire 4417 to okonkwo"], ["transfer"], 32);
    let ids = vocab.tokenize("wire 4417 to okonkwo").into_iter().map(|t| t.id).collect();
    let seq = TokenizedSequence::new(0, 1, ids, vocab.label_id("transfer").unwrap());
    let model = init_lm(
        ModelDims {
            vocab: vocab.len(),
            d_emb: 8,
            n_ctx: 4,
            d_hidden: 8,
        },
        1,
    )?;

    let stop = StopwordSet::bundled();
    let mut noise = NoiseSource::new(42);
    let mut ledger = PrivacyLedger::new(config.delta, config.delta_prime);
    for epoch in 0..3 {
        for (position, &token) in seq.tokens.iter().enumerate() {
            let score = if stop.contains(vocab.surface(token)) { 0.0 } else { 0.8 };
            let eps = allocate_budget(score, &config)?;
            let entry = TokenSensitivity {
                token,
                score1: 0.0,
                score2: 0.0,
                score,
                epsilon: (score > 0.0).then_some(eps),
                sigma: (score > 0.0).then(|| noise_sigma(eps, config.delta, config.clip_norm, config.variant).unwrap()),
                is_stopword: score == 0.0,
            };
            let exposure = Exposure {
                sequence_id: seq.id,
                position,
                epoch,
            };
            perturb_embedding(model.embedding_row(token), &entry, &config, &mut noise, &mut ledger, exposure)?;
        }
    }
    let total = compose_sequence(&ledger, config.delta_prime)?;
    println!(
        "records={} epsilon_total={:.3} delta_total={:e}",
        total.count, total.epsilon_total, total.delta_total
    );
    Ok(())
}

#[allow(dead_code)]
fn main() -> privcl::Result<()> {
    run_example()
}
