// Writes a synthetic corpus as JSON lines, reloads it, and saves and
// restores a model checkpoint.

use privcl::checkpoint::Checkpoint;
use privcl::corpus::{load_corpus, write_records, CorpusFormat};
use privcl::model::{init_lm, LoraAdapter, ModelDims};
use privcl::synth::{self, SynthConfig};

pub fn run_example() -> privcl::Result<()> {
    let tmp = tempfile::tempdir().expect("temp dir");
    let dir = tmp.path();
    let path = dir.join("corpus.jsonl");
    let records = synth::generate(&SynthConfig {
        train_per_task: 20,
        eval_per_task: 5,
        ..SynthConfig::default()
    })?;
    write_records(&path, &records)?;
    let corpus = load_corpus(&path, CorpusFormat::JsonLines, 4096)?;
    for task in &corpus.tasks {
        println!("task {}: {} train, {} eval, {} labels", task.task_id, task.train.len(), task.eval.len(), task.label_set.len());
    }

    let dims = ModelDims {
        vocab: corpus.vocab.len(),
        d_emb: 8,
        n_ctx: 4,
        d_hidden: 16,
    };
    let ckpt = Checkpoint {
        model: init_lm(dims, 3)?,
        adapter: Some(LoraAdapter::new(&dims, 4, 1, 4)?),
        task_id: 1,
    };
    let ckpt_path = dir.join("model.ckpt");
    ckpt.save(&ckpt_path)?;
    assert_eq!(Checkpoint::load(&ckpt_path)?, ckpt);
    println!("checkpoint: {} bytes", ckpt.to_bytes().len());
    Ok(())
}

#[allow(dead_code)]
fn main() -> privcl::Result<()> {
    run_example()
}
