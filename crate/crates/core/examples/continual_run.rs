// Trains three synthetic tasks in sequence with the private method and with
// plain sequential fine-tuning, then compares forgetting.

use privcl::config::parse_config;
use privcl::corpus::Corpus;
use privcl::privacy::compose_sequence;
use privcl::synth;
use privcl::trainer::{avg_acc, bwt, last_acc, run_continual, Mode};

const CONFIG: &str = include_str!(concat!(env!("CARGO_MANIFEST_DIR"), "/configs/desk.json"));

pub fn run_example() -> privcl::Result<()> {
    let (_, base) = parse_config(CONFIG)?;
    let corpus = Corpus::from_records(&synth::generate(&base.synth_config())?, base.vocab_cap)?;
    for mode in [Mode::Seqft, Mode::Pecl] {
        let run = privcl::trainer::RunConfig { mode, ..base.clone() };
        let out = run_continual(&run, &corpus)?;
        println!("{}:", mode.as_str());
        for row in out.matrix.rows() {
            let cells: Vec<String> = row.iter().map(|a| format!("{a:.2}")).collect();
            println!("  {}", cells.join(" "));
        }
        println!(
            "  bwt={:.3} last={:.3} avg={:.3}",
            bwt(&out.matrix)?,
            last_acc(&out.matrix)?,
            avg_acc(&out.matrix)?
        );
        if !out.ledger.is_empty() {
            let c = compose_sequence(&out.ledger, run.privacy.delta_prime)?;
            println!("  perturbations={} epsilon_total={:.1}", c.count, c.epsilon_total);
        }
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> privcl::Result<()> {
    run_example()
}
