// Compares the analytic adapter gradient of the full loss against central
// differences on a tiny model with noisy inputs.

use privcl::corpus::TokenizedSequence;
use privcl::model::{init_lm, Example, InputPerturbation, LoraAdapter, LossSpec, ModelDims, ParamId, SequenceNoise, Trainable, UnlearnSpec};

pub fn run_example() -> privcl::Result<()> {
    let dims = ModelDims {
        vocab: 6,
        d_emb: 3,
        n_ctx: 2,
        d_hidden: 4,
    };
    let model = init_lm(dims, 5)?;
    let mut adapter = LoraAdapter::new(&dims, 2, 1, 6)?;
    for (i, v) in adapter.b.as_mut_slice().iter_mut().enumerate() {
        *v = 0.1 * (i as f64 % 3.0 - 1.0);
    }
    let seq = TokenizedSequence::new(0, 1, vec![2, 4, 3], 5);
    let mut noise = SequenceNoise::clean(seq.len());
    noise.positions[1] = Some(InputPerturbation {
        clip_scale: 0.8,
        noise: vec![0.3, -0.2, 0.1],
    });
    let scores = vec![0.0, 0.9, 0.4, 0.1];
    let batch = [Example {
        seq: &seq,
        noise: Some(&noise),
        scores: Some(&scores),
    }];
    let spec = LossSpec {
        unlearn: Some(UnlearnSpec { theta: 0.3, lambda: 1.0 }),
        reg: None,
        trainable: Trainable::AdapterOnly,
    };

    let analytic = model.backward(Some(&adapter), &batch, &spec)?.grads.get(ParamId::LoraB).unwrap().to_vec();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..analytic.len() {
        let mut plus = adapter.clone();
        plus.b.as_mut_slice()[i] += h;
        let mut minus = adapter.clone();
        minus.b.as_mut_slice()[i] -= h;
        let fd = (model.total_loss_value(Some(&plus), &batch, &spec)?
            - model.total_loss_value(Some(&minus), &batch, &spec)?)
            / (2.0 * h);
        worst = worst.max((fd - analytic[i]).abs() / fd.abs().max(1e-6));
    }
    println!("B entries={} worst relative error={worst:.2e}", analytic.len());
    assert!(worst < 1e-4);
    Ok(())
}

#[allow(dead_code)]
fn main() -> privcl::Result<()> {
    run_example()
}
