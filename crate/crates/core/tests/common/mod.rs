//! Shared fixtures and brute-force oracles for the integration tests.
#![allow(dead_code)]

use privcl::config::{parse_config, FileConfig};
use privcl::corpus::{TaskCorpus, TokenId, TokenizedSequence};
use privcl::linalg::Matrix;
use privcl::model::{
    init_lm, Example, InputPerturbation, LossSpec, LoraAdapter, ModelDims, ParamId, Params, RegSpec, SequenceNoise,
    TinyLm, Trainable, UnlearnSpec,
};
use privcl::trainer::RunConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const DESK_CONFIG: &str = include_str!("../../configs/desk.json");

pub fn desk_config() -> (FileConfig, RunConfig) {
    parse_config(DESK_CONFIG).expect("desk config parses")
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------------------
// gradient fixtures

pub const GRAD_DIMS: ModelDims = ModelDims {
    vocab: 6,
    d_emb: 4,
    n_ctx: 3,
    d_hidden: 5,
};
pub const GRAD_RANK: usize = 2;
pub const FD_STEP: f64 = 1e-5;

/// A small model, a non-trivial adapter, a batch with noise and scores, and a snapshot.
pub struct GradCase {
    pub model: TinyLm,
    pub adapter: LoraAdapter,
    pub seqs: Vec<TokenizedSequence>,
    pub noises: Vec<SequenceNoise>,
    pub scores: Vec<Vec<f64>>,
    pub snapshot: Matrix,
}

impl GradCase {
    pub fn new(seed: u64) -> Self {
        let mut r = rng(seed);
        let model = init_lm(GRAD_DIMS, seed).unwrap();
        let mut adapter = LoraAdapter::new(&GRAD_DIMS, GRAD_RANK, 1, seed + 1).unwrap();
        // B starts at zero; give it mass so every adapter path carries gradient
        for v in adapter.b.as_mut_slice() {
            *v = r.random_range(-0.5..0.5);
        }
        let mut seqs = Vec::new();
        let mut noises = Vec::new();
        let mut scores = Vec::new();
        for id in 0..3 {
            let len = r.random_range(3..=6);
            let tokens: Vec<TokenId> = (0..len).map(|_| r.random_range(0..GRAD_DIMS.vocab)).collect();
            let positions = (0..len)
                .map(|_| {
                    r.random_bool(0.5).then(|| InputPerturbation {
                        clip_scale: r.random_range(0.3..1.0),
                        noise: (0..GRAD_DIMS.d_emb).map(|_| r.random_range(-0.3..0.3)).collect(),
                    })
                })
                .collect();
            scores.push((0..len).map(|_| r.random_range(0.0..1.0)).collect());
            noises.push(SequenceNoise { positions });
            seqs.push(TokenizedSequence { id, task_id: 1, tokens });
        }
        let mut snapshot = Matrix::zeros(GRAD_DIMS.d_hidden, GRAD_DIMS.input_dim());
        for v in snapshot.as_mut_slice() {
            *v = r.random_range(-0.2..0.2);
        }
        Self {
            model,
            adapter,
            seqs,
            noises,
            scores,
            snapshot,
        }
    }

    pub fn batch(&self, with_noise: bool) -> Vec<Example<'_>> {
        self.seqs
            .iter()
            .zip(&self.noises)
            .zip(&self.scores)
            .map(|((seq, noise), s)| Example {
                seq,
                noise: with_noise.then_some(noise),
                scores: Some(s.as_slice()),
            })
            .collect()
    }

    pub fn task_spec(&self, trainable: Trainable) -> LossSpec<'_> {
        LossSpec {
            unlearn: None,
            reg: None,
            trainable,
        }
    }

    pub fn reg_spec(&self, trainable: Trainable) -> LossSpec<'_> {
        LossSpec {
            unlearn: None,
            reg: Some(RegSpec {
                snapshot: &self.snapshot,
                lambda_dyn: 2.5,
                omega_bar: 1.7,
            }),
            trainable,
        }
    }

    pub fn full_spec(&self, trainable: Trainable) -> LossSpec<'_> {
        LossSpec {
            unlearn: Some(UnlearnSpec { theta: 0.4, lambda: 1.3 }),
            ..self.reg_spec(trainable)
        }
    }
}

/// Relative error with a floor on the denominator.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Worst relative error between analytic and central-difference gradients over
/// every element of every parameter that receives a gradient.
pub fn max_grad_error(
    model: &TinyLm,
    adapter: Option<&LoraAdapter>,
    batch: &[Example<'_>],
    spec: &LossSpec<'_>,
) -> (f64, String, usize) {
    let analytic = model.backward(adapter, batch, spec).unwrap();
    let mut worst = (0.0, String::new(), 0usize);
    let mut checked = 0;
    for id in ParamId::ALL {
        let Some(g) = analytic.grads.get(id) else { continue };
        for i in 0..g.len() {
            let eval = |delta: f64| {
                let mut m = model.clone();
                let mut ad = adapter.cloned();
                {
                    let mut p = Params {
                        model: &mut m,
                        adapter: ad.as_mut(),
                    };
                    p.slice_mut(id).unwrap()[i] += delta;
                }
                m.total_loss_value(ad.as_ref(), batch, spec).unwrap()
            };
            let numeric = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
            let e = rel_err(g[i], numeric);
            checked += 1;
            if e > worst.0 {
                worst = (e, format!("{}[{i}]: analytic {} numeric {}", id.name(), g[i], numeric), 0);
            }
        }
    }
    worst.2 = checked;
    worst
}

// ---------------------------------------------------------------------------
// brute-force oracles

/// Random task streams as plain token lists: `tasks[n][s]` is one training sequence.
pub fn random_streams(r: &mut ChaCha8Rng, vocab: usize) -> Vec<Vec<Vec<TokenId>>> {
    let n_tasks = r.random_range(1..=5);
    (0..n_tasks)
        .map(|_| {
            let n_seq = r.random_range(1..=4);
            (0..n_seq)
                .map(|_| {
                    let len = r.random_range(1..=7);
                    (0..len).map(|_| r.random_range(0..vocab)).collect()
                })
                .collect()
        })
        .collect()
}

pub fn to_corpora(streams: &[Vec<Vec<TokenId>>]) -> Vec<TaskCorpus> {
    let mut id = 0;
    streams
        .iter()
        .enumerate()
        .map(|(n, seqs)| TaskCorpus {
            task_id: n as u32 + 1,
            train: seqs
                .iter()
                .map(|tokens| {
                    id += 1;
                    TokenizedSequence {
                        id,
                        task_id: n as u32 + 1,
                        tokens: tokens.clone(),
                    }
                })
                .collect(),
            eval: Vec::new(),
            label_set: Default::default(),
        })
        .collect()
}

/// f_n(t) by linear scan.
pub fn brute_count(task: &[Vec<TokenId>], t: TokenId) -> usize {
    task.iter().flatten().filter(|&&x| x == t).count()
}

/// p_n(t) = f_n(t) / max_u f_n(u), with the max found by scanning every token of the task.
pub fn brute_salience(task: &[Vec<TokenId>], t: TokenId) -> f64 {
    let max = task.iter().flatten().map(|&u| brute_count(task, u)).max().unwrap();
    brute_count(task, t) as f64 / max as f64
}

pub fn brute_support(streams: &[Vec<Vec<TokenId>>], t: TokenId, tau: f64) -> usize {
    streams.iter().filter(|task| brute_salience(task, t) >= tau).count()
}

/// Score₂ straight from the definition.
pub fn brute_score2(streams: &[Vec<Vec<TokenId>>], t: TokenId, tau: f64, clamp: bool) -> f64 {
    let n = streams.len() as f64;
    let d = brute_support(streams, t, tau) as f64;
    let mut sum = 0.0;
    for task in streams {
        sum += brute_salience(task, t) * (n / (1.0 + d)).ln();
    }
    let v = sum / n;
    if clamp {
        v.max(0.0)
    } else {
        v
    }
}

/// Random lower-triangular accuracy rows, N ≤ 8.
pub fn random_matrix(r: &mut ChaCha8Rng, min_n: usize) -> Vec<Vec<f64>> {
    let n = r.random_range(min_n..=8);
    (0..n).map(|k| (0..=k).map(|_| r.random_range(0.0..=1.0)).collect()).collect()
}

pub fn brute_bwt(rows: &[Vec<f64>]) -> f64 {
    let n = rows.len();
    let mut total = 0.0;
    for i in 0..n - 1 {
        total += rows[n - 1][i] - rows[i][i];
    }
    total / (n - 1) as f64
}

pub fn brute_last(rows: &[Vec<f64>]) -> f64 {
    let n = rows.len();
    let mut total = 0.0;
    for i in 0..n {
        total += rows[n - 1][i];
    }
    total / n as f64
}

pub fn brute_avg(rows: &[Vec<f64>]) -> f64 {
    let n = rows.len();
    let mut outer = 0.0;
    for k in 0..n {
        let mut inner = 0.0;
        for i in 0..=k {
            inner += rows[k][i];
        }
        outer += inner / (k + 1) as f64;
    }
    outer / n as f64
}

pub fn brute_mean(xs: &[f64]) -> f64 {
    let mut s = 0.0;
    for x in xs {
        s += x;
    }
    s / xs.len() as f64
}

/// Forward pass written out element by element, no shared matrix helpers.
pub fn brute_forward(model: &TinyLm, adapter: Option<&LoraAdapter>, context: &[TokenId]) -> Vec<f64> {
    let d = model.dims;
    let mut x = Vec::new();
    for slot in 0..d.n_ctx {
        let pad = d.n_ctx - context.len();
        let tok = if slot < pad { 0 } else { context[slot - pad] };
        for j in 0..d.d_emb {
            x.push(model.embedding[(tok, j)]);
        }
    }
    let mut h = vec![0.0; d.d_hidden];
    for (o, hv) in h.iter_mut().enumerate() {
        let mut acc = model.hidden_bias[o];
        for (i, xv) in x.iter().enumerate() {
            let mut w = model.hidden_weight[(o, i)];
            if let Some(ad) = adapter {
                for k in 0..ad.rank() {
                    w += ad.b[(o, k)] * ad.a[(k, i)];
                }
            }
            acc += w * xv;
        }
        *hv = acc.tanh();
    }
    let mut logits = vec![0.0; d.vocab];
    for (v, l) in logits.iter_mut().enumerate() {
        let mut acc = model.output_bias[v];
        for (o, hv) in h.iter().enumerate() {
            acc += model.output_weight[(v, o)] * hv;
        }
        *l = acc;
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    logits.iter().map(|l| (l - max).exp() / z).collect()
}
