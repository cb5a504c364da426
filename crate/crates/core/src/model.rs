//! A fixed-context MLP language model with a single low-rank adapted layer.
//!
//! The model concatenates the embeddings of the previous `n_ctx` tokens
//! (left-padded with [`PAD`]), applies one tanh hidden layer whose weight is
//! `W0 + B·A` when an adapter is attached, and projects to a softmax over the
//! vocabulary. Forward and backward passes are written out by hand so every
//! gradient can be checked against finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{TokenId, TokenizedSequence, PAD};
use crate::error::{ensure_finite, Error, Result};
use crate::linalg::{softmax, Matrix};
use crate::sculpt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelDims {
    pub vocab: usize,
    pub d_emb: usize,
    pub n_ctx: usize,
    pub d_hidden: usize,
}

impl ModelDims {
    pub fn input_dim(&self) -> usize {
        self.n_ctx * self.d_emb
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("vocab", self.vocab),
            ("d_emb", self.d_emb),
            ("n_ctx", self.n_ctx),
            ("d_hidden", self.d_hidden),
        ] {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("model dimension {name} must be >= 1")));
            }
        }
        Ok(())
    }
}

/// Identifies one trainable tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamId {
    Embedding,
    HiddenWeight,
    HiddenBias,
    OutputWeight,
    OutputBias,
    LoraA,
    LoraB,
}

impl ParamId {
    pub const ALL: [ParamId; 7] = [
        ParamId::Embedding,
        ParamId::HiddenWeight,
        ParamId::HiddenBias,
        ParamId::OutputWeight,
        ParamId::OutputBias,
        ParamId::LoraA,
        ParamId::LoraB,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamId::Embedding => "embedding",
            ParamId::HiddenWeight => "hidden_weight",
            ParamId::HiddenBias => "hidden_bias",
            ParamId::OutputWeight => "output_weight",
            ParamId::OutputBias => "output_bias",
            ParamId::LoraA => "lora_a",
            ParamId::LoraB => "lora_b",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyLm {
    pub dims: ModelDims,
    pub seed: u64,
    /// vocab × d_emb
    pub embedding: Matrix,
    /// d_hidden × (n_ctx·d_emb)
    pub hidden_weight: Matrix,
    pub hidden_bias: Vec<f64>,
    /// vocab × d_hidden
    pub output_weight: Matrix,
    pub output_bias: Vec<f64>,
}

fn uniform_fill(rng: &mut ChaCha8Rng, n: usize, fan_in: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

/// Initializes a model with parameters drawn from U(-1/√fan_in, 1/√fan_in).
pub fn init_lm(dims: ModelDims, seed: u64) -> Result<TinyLm> {
    dims.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ModelDims {
        vocab,
        d_emb,
        d_hidden,
        ..
    } = dims;
    let d_in = dims.input_dim();
    let embedding = Matrix::from_vec(vocab, d_emb, uniform_fill(&mut rng, vocab * d_emb, d_emb))?;
    let hidden_weight = Matrix::from_vec(d_hidden, d_in, uniform_fill(&mut rng, d_hidden * d_in, d_in))?;
    let hidden_bias = uniform_fill(&mut rng, d_hidden, d_in);
    let output_weight = Matrix::from_vec(vocab, d_hidden, uniform_fill(&mut rng, vocab * d_hidden, d_hidden))?;
    let output_bias = uniform_fill(&mut rng, vocab, d_hidden);
    Ok(TinyLm {
        dims,
        seed,
        embedding,
        hidden_weight,
        hidden_bias,
        output_weight,
        output_bias,
    })
}

/// Low-rank update `ΔW = B·A` on the hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub task_id: u32,
    /// rank × d_in
    pub a: Matrix,
    /// d_out × rank
    pub b: Matrix,
}

impl LoraAdapter {
    /// `A` uniform in ±1/√d_in, `B` zero, so the fresh adapter is a no-op.
    pub fn new(dims: &ModelDims, rank: usize, task_id: u32, seed: u64) -> Result<Self> {
        let d_in = dims.input_dim();
        let d_out = dims.d_hidden;
        if rank == 0 || rank > d_in.min(d_out) {
            return Err(Error::InvalidArgument(format!(
                "adapter rank {rank} must lie in 1..={}",
                d_in.min(d_out)
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Matrix::from_vec(rank, d_in, uniform_fill(&mut rng, rank * d_in, d_in))?;
        Ok(Self {
            task_id,
            a,
            b: Matrix::zeros(d_out, rank),
        })
    }

    pub fn from_parts(task_id: u32, a: Matrix, b: Matrix) -> Result<Self> {
        if b.cols() != a.rows() {
            return Err(Error::Shape(format!(
                "B is {:?} but A is {:?}",
                b.shape(),
                a.shape()
            )));
        }
        Ok(Self { task_id, a, b })
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn delta(&self) -> Result<Matrix> {
        lora_delta(self)
    }

    fn check_against(&self, dims: &ModelDims) -> Result<()> {
        if self.a.cols() != dims.input_dim() || self.b.rows() != dims.d_hidden || self.b.cols() != self.a.rows() {
            return Err(Error::Shape(format!(
                "adapter A {:?} / B {:?} does not fit hidden layer {}x{}",
                self.a.shape(),
                self.b.shape(),
                dims.d_hidden,
                dims.input_dim()
            )));
        }
        Ok(())
    }
}

/// `ΔW = B·A`.
pub fn lora_delta(adapter: &LoraAdapter) -> Result<Matrix> {
    adapter.b.matmul(&adapter.a)
}

/// Embedding perturbation for one input position: the effective input is
/// `clip_scale · e + noise`, where `e` is the embedding row of the token.
#[derive(Debug, Clone, PartialEq)]
pub struct InputPerturbation {
    pub clip_scale: f64,
    pub noise: Vec<f64>,
}

/// Per-position perturbations for one sequence; `None` entries use the clean embedding.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SequenceNoise {
    pub positions: Vec<Option<InputPerturbation>>,
}

impl SequenceNoise {
    pub fn clean(len: usize) -> Self {
        Self {
            positions: vec![None; len],
        }
    }

    pub fn noised_count(&self) -> usize {
        self.positions.iter().filter(|p| p.is_some()).count()
    }
}

/// Which parameters receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Trainable {
    /// Only adapter `A`, `B`.
    #[default]
    AdapterOnly,
    /// Every base parameter plus the adapter; `W0` stays frozen while an adapter is attached.
    Full,
}

impl Trainable {
    pub fn includes(self, id: ParamId, has_adapter: bool) -> bool {
        match (self, id) {
            (_, ParamId::LoraA | ParamId::LoraB) => has_adapter,
            (Trainable::AdapterOnly, _) => false,
            (Trainable::Full, ParamId::HiddenWeight) => !has_adapter,
            (Trainable::Full, _) => true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnlearnSpec {
    pub theta: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct RegSpec<'a> {
    pub snapshot: &'a Matrix,
    pub lambda_dyn: f64,
    pub omega_bar: f64,
}

impl RegSpec<'_> {
    fn coefficient(&self) -> f64 {
        self.lambda_dyn * self.omega_bar
    }
}

/// Assembly parameters for `L_total = L_task + L_reg + λ_unlearn · L_unlearn`.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossSpec<'a> {
    pub unlearn: Option<UnlearnSpec>,
    pub reg: Option<RegSpec<'a>>,
    pub trainable: Trainable,
}

/// One training example: a sequence, its optional input noise, and its
/// per-position fused sensitivity scores (needed only for the unlearning term).
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub seq: &'a TokenizedSequence,
    pub noise: Option<&'a SequenceNoise>,
    pub scores: Option<&'a [f64]>,
}

impl<'a> Example<'a> {
    pub fn clean(seq: &'a TokenizedSequence) -> Self {
        Self {
            seq,
            noise: None,
            scores: None,
        }
    }
}

/// Gradients for every parameter that was trainable in the pass.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Gradients {
    pub embedding: Option<Vec<f64>>,
    pub hidden_weight: Option<Vec<f64>>,
    pub hidden_bias: Option<Vec<f64>>,
    pub output_weight: Option<Vec<f64>>,
    pub output_bias: Option<Vec<f64>>,
    pub lora_a: Option<Vec<f64>>,
    pub lora_b: Option<Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        match id {
            ParamId::Embedding => self.embedding.as_deref(),
            ParamId::HiddenWeight => self.hidden_weight.as_deref(),
            ParamId::HiddenBias => self.hidden_bias.as_deref(),
            ParamId::OutputWeight => self.output_weight.as_deref(),
            ParamId::OutputBias => self.output_bias.as_deref(),
            ParamId::LoraA => self.lora_a.as_deref(),
            ParamId::LoraB => self.lora_b.as_deref(),
        }
    }

    fn slot(&mut self, id: ParamId) -> &mut Option<Vec<f64>> {
        match id {
            ParamId::Embedding => &mut self.embedding,
            ParamId::HiddenWeight => &mut self.hidden_weight,
            ParamId::HiddenBias => &mut self.hidden_bias,
            ParamId::OutputWeight => &mut self.output_weight,
            ParamId::OutputBias => &mut self.output_bias,
            ParamId::LoraA => &mut self.lora_a,
            ParamId::LoraB => &mut self.lora_b,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        ParamId::ALL.into_iter().filter_map(|id| self.get(id).map(|g| (id, g)))
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|(_, g)| g.iter().all(|v| v.is_finite()))
    }

    pub fn norm(&self) -> f64 {
        self.iter()
            .flat_map(|(_, g)| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// Result of a backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub grads: Gradients,
    /// ℓ(t_i) for every predicted position of every batch sequence.
    pub token_losses: Vec<Vec<f64>>,
    pub l_task: f64,
    pub l_reg: f64,
    pub l_unlearn: f64,
    pub total: f64,
}

/// Mutable view over the model and its adapter, addressed by [`ParamId`].
pub struct Params<'a> {
    pub model: &'a mut TinyLm,
    pub adapter: Option<&'a mut LoraAdapter>,
}

impl Params<'_> {
    pub fn slice_mut(&mut self, id: ParamId) -> Option<&mut [f64]> {
        Some(match id {
            ParamId::Embedding => self.model.embedding.as_mut_slice(),
            ParamId::HiddenWeight => self.model.hidden_weight.as_mut_slice(),
            ParamId::HiddenBias => &mut self.model.hidden_bias,
            ParamId::OutputWeight => self.model.output_weight.as_mut_slice(),
            ParamId::OutputBias => &mut self.model.output_bias,
            ParamId::LoraA => self.adapter.as_deref_mut()?.a.as_mut_slice(),
            ParamId::LoraB => self.adapter.as_deref_mut()?.b.as_mut_slice(),
        })
    }
}

/// Cached activations of one prediction window.
struct Window {
    x: Vec<f64>,
    u: Vec<f64>,
    h: Vec<f64>,
    p: Vec<f64>,
}

impl TinyLm {
    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        match id {
            ParamId::Embedding => Some(self.embedding.as_slice()),
            ParamId::HiddenWeight => Some(self.hidden_weight.as_slice()),
            ParamId::HiddenBias => Some(&self.hidden_bias),
            ParamId::OutputWeight => Some(self.output_weight.as_slice()),
            ParamId::OutputBias => Some(&self.output_bias),
            ParamId::LoraA | ParamId::LoraB => None,
        }
    }

    pub fn is_finite(&self) -> bool {
        [
            ParamId::Embedding,
            ParamId::HiddenWeight,
            ParamId::HiddenBias,
            ParamId::OutputWeight,
            ParamId::OutputBias,
        ]
        .into_iter()
        .all(|id| self.param(id).unwrap().iter().all(|v| v.is_finite()))
    }

    pub fn embedding_row(&self, token: TokenId) -> &[f64] {
        self.embedding.row(token)
    }

    fn check_token(&self, token: TokenId) -> Result<()> {
        if token >= self.dims.vocab {
            return Err(Error::InvalidArgument(format!(
                "token id {token} out of range for vocabulary of {}",
                self.dims.vocab
            )));
        }
        Ok(())
    }

    fn check_adapter(&self, adapter: Option<&LoraAdapter>) -> Result<()> {
        adapter.map_or(Ok(()), |a| a.check_against(&self.dims))
    }

    /// Runs the dense part of the network on an already assembled input vector.
    fn forward_input(&self, adapter: Option<&LoraAdapter>, x: Vec<f64>) -> Window {
        let mut pre = self.hidden_weight.matvec(&x);
        let u = match adapter {
            Some(ad) => {
                let u = ad.a.matvec(&x);
                for (p, d) in pre.iter_mut().zip(ad.b.matvec(&u)) {
                    *p += d;
                }
                u
            }
            None => Vec::new(),
        };
        let h: Vec<f64> = pre
            .iter()
            .zip(&self.hidden_bias)
            .map(|(a, b)| (a + b).tanh())
            .collect();
        let mut logits = self.output_weight.matvec(&h);
        for (z, b) in logits.iter_mut().zip(&self.output_bias) {
            *z += b;
        }
        Window {
            x,
            u,
            h,
            p: softmax(&logits),
        }
    }

    /// Effective input vector of sequence position `pos`.
    fn position_input<'s>(&'s self, token: TokenId, pert: Option<&InputPerturbation>, buf: &'s mut Vec<f64>) -> &'s [f64] {
        let e = self.embedding.row(token);
        match pert {
            None => e,
            Some(p) => {
                buf.clear();
                buf.extend(e.iter().zip(&p.noise).map(|(v, n)| v * p.clip_scale + n));
                buf
            }
        }
    }

    /// Input vector for predicting `tokens[target]` from its left context.
    fn window_input(&self, tokens: &[TokenId], target: usize, noise: Option<&SequenceNoise>) -> Vec<f64> {
        let n_ctx = self.dims.n_ctx;
        let mut x = Vec::with_capacity(self.dims.input_dim());
        let mut buf = Vec::with_capacity(self.dims.d_emb);
        for slot in 0..n_ctx {
            let offset = n_ctx - slot;
            if offset > target {
                x.extend_from_slice(self.embedding.row(PAD));
            } else {
                let pos = target - offset;
                let pert = noise.and_then(|n| n.positions.get(pos)).and_then(Option::as_ref);
                x.extend_from_slice(self.position_input(tokens[pos], pert, &mut buf));
            }
        }
        x
    }

    /// Next-token distribution given up to `n_ctx` context ids.
    ///
    /// `noisy_embeddings`, when given, holds one vector per context position
    /// and replaces the embedding lookup for those positions.
    pub fn forward(
        &self,
        adapter: Option<&LoraAdapter>,
        context: &[TokenId],
        noisy_embeddings: Option<&[Vec<f64>]>,
    ) -> Result<Vec<f64>> {
        self.check_adapter(adapter)?;
        let n_ctx = self.dims.n_ctx;
        if context.len() > n_ctx {
            return Err(Error::InvalidArgument(format!(
                "context of {} tokens exceeds n_ctx = {n_ctx}",
                context.len()
            )));
        }
        for &t in context {
            self.check_token(t)?;
        }
        if let Some(noisy) = noisy_embeddings {
            if noisy.len() != context.len() {
                return Err(Error::Shape(format!(
                    "{} noisy embeddings for {} context positions",
                    noisy.len(),
                    context.len()
                )));
            }
            if let Some(bad) = noisy.iter().find(|v| v.len() != self.dims.d_emb) {
                return Err(Error::Shape(format!(
                    "noisy embedding has dimension {}, expected {}",
                    bad.len(),
                    self.dims.d_emb
                )));
            }
        }
        let pad = n_ctx - context.len();
        let mut x = Vec::with_capacity(self.dims.input_dim());
        for _ in 0..pad {
            x.extend_from_slice(self.embedding.row(PAD));
        }
        for (i, &t) in context.iter().enumerate() {
            match noisy_embeddings {
                Some(noisy) => x.extend_from_slice(&noisy[i]),
                None => x.extend_from_slice(self.embedding.row(t)),
            }
        }
        Ok(self.forward_input(adapter, x).p)
    }

    /// Distribution over `seq[target]` given everything before it (clean or perturbed inputs).
    pub fn predict_at(
        &self,
        adapter: Option<&LoraAdapter>,
        tokens: &[TokenId],
        target: usize,
        noise: Option<&SequenceNoise>,
    ) -> Vec<f64> {
        self.forward_input(adapter, self.window_input(tokens, target, noise)).p
    }

    fn check_sequence(&self, seq: &TokenizedSequence, noise: Option<&SequenceNoise>) -> Result<()> {
        if seq.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "sequence {} has {} token(s); at least 2 are needed to predict",
                seq.id,
                seq.len()
            )));
        }
        for &t in &seq.tokens {
            self.check_token(t)?;
        }
        if let Some(n) = noise {
            if n.positions.len() != seq.len() {
                return Err(Error::Shape(format!(
                    "noise covers {} positions, sequence has {}",
                    n.positions.len(),
                    seq.len()
                )));
            }
            for p in n.positions.iter().flatten() {
                if p.noise.len() != self.dims.d_emb {
                    return Err(Error::Shape(format!(
                        "noise vector of dimension {}, expected {}",
                        p.noise.len(),
                        self.dims.d_emb
                    )));
                }
            }
        }
        Ok(())
    }

    /// Per-position cross-entropy ℓ(t_i) = −ln P(t_i | t_<i) for positions 1.. and their mean.
    pub fn token_losses(
        &self,
        adapter: Option<&LoraAdapter>,
        seq: &TokenizedSequence,
        noise: Option<&SequenceNoise>,
    ) -> Result<(Vec<f64>, f64)> {
        self.check_adapter(adapter)?;
        self.check_sequence(seq, noise)?;
        let losses: Vec<f64> = (1..seq.len())
            .map(|i| -self.predict_at(adapter, &seq.tokens, i, noise)[seq.tokens[i]].ln())
            .collect();
        let mean = losses.iter().sum::<f64>() / losses.len() as f64;
        Ok((losses, mean))
    }

    /// Exact gradients of the assembled total loss over a batch.
    ///
    /// Input noise is a constant of the pass; a noised position passes
    /// `clip_scale · dL/dx` back to its embedding row.
    pub fn backward(
        &self,
        adapter: Option<&LoraAdapter>,
        batch: &[Example<'_>],
        spec: &LossSpec<'_>,
    ) -> Result<GradientBundle> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        self.check_adapter(adapter)?;
        let has_adapter = adapter.is_some();
        if spec.reg.is_some() && !has_adapter {
            return Err(Error::InvalidArgument("regularization requires an adapter".into()));
        }
        let train = |id| spec.trainable.includes(id, has_adapter);
        let dims = self.dims;
        let d_in = dims.input_dim();

        let mut grads = Gradients::default();
        for id in ParamId::ALL {
            if train(id) {
                let len = match id {
                    ParamId::LoraA | ParamId::LoraB => {
                        let ad = adapter.unwrap();
                        if id == ParamId::LoraA {
                            ad.a.as_slice().len()
                        } else {
                            ad.b.as_slice().len()
                        }
                    }
                    _ => self.param(id).unwrap().len(),
                };
                *grads.slot(id) = Some(vec![0.0; len]);
            }
        }
        let need_dx = train(ParamId::Embedding);
        let mut g_emb = grads.embedding.take().map(|v| Matrix::from_vec(dims.vocab, dims.d_emb, v).unwrap());
        let mut g_w0 = grads.hidden_weight.take().map(|v| Matrix::from_vec(dims.d_hidden, d_in, v).unwrap());
        let mut g_wout = grads.output_weight.take().map(|v| Matrix::from_vec(dims.vocab, dims.d_hidden, v).unwrap());
        let mut g_a = grads.lora_a.take().map(|v| Matrix::from_vec(adapter.unwrap().rank(), d_in, v).unwrap());
        let mut g_b = grads.lora_b.take().map(|v| Matrix::from_vec(dims.d_hidden, adapter.unwrap().rank(), v).unwrap());

        let n_batch = batch.len() as f64;
        let mut token_losses = Vec::with_capacity(batch.len());
        let mut l_task = 0.0;
        let mut l_unlearn = 0.0;

        for ex in batch {
            let seq = ex.seq;
            self.check_sequence(seq, ex.noise)?;
            let m = (seq.len() - 1) as f64;
            let scores = match (spec.unlearn, ex.scores) {
                (Some(_), Some(s)) if s.len() != seq.len() => {
                    return Err(Error::Shape(format!(
                        "{} scores for sequence of length {}",
                        s.len(),
                        seq.len()
                    )))
                }
                (Some(_), None) => {
                    return Err(Error::InvalidArgument(format!(
                        "unlearning term needs sensitivity scores for sequence {}",
                        seq.id
                    )))
                }
                (_, s) => s,
            };
            let mut losses = Vec::with_capacity(seq.len() - 1);
            for i in 1..seq.len() {
                let target = seq.tokens[i];
                let w = self.forward_input(adapter, self.window_input(&seq.tokens, i, ex.noise));
                let loss = -w.p[target].ln();
                losses.push(loss);

                let mut weight = 1.0 / m;
                if let (Some(un), Some(s)) = (spec.unlearn, scores) {
                    if s[i] > un.theta {
                        weight += un.lambda * (s[i] - un.theta) / m;
                    }
                }
                weight /= n_batch;

                // dL/dz = weight · (p − onehot)
                let mut dz = w.p.clone();
                dz[target] -= 1.0;
                for v in &mut dz {
                    *v *= weight;
                }
                if let Some(g) = grads.output_bias.as_mut() {
                    for (gi, d) in g.iter_mut().zip(&dz) {
                        *gi += d;
                    }
                }
                if let Some(g) = g_wout.as_mut() {
                    g.add_outer(1.0, &dz, &w.h);
                }
                let dh = self.output_weight.matvec_t(&dz);
                let da: Vec<f64> = dh.iter().zip(&w.h).map(|(d, h)| d * (1.0 - h * h)).collect();
                if let Some(g) = grads.hidden_bias.as_mut() {
                    for (gi, d) in g.iter_mut().zip(&da) {
                        *gi += d;
                    }
                }
                if let Some(g) = g_w0.as_mut() {
                    g.add_outer(1.0, &da, &w.x);
                }
                let mut du = Vec::new();
                if let Some(ad) = adapter {
                    if let Some(g) = g_b.as_mut() {
                        g.add_outer(1.0, &da, &w.u);
                    }
                    du = ad.b.matvec_t(&da);
                    if let Some(g) = g_a.as_mut() {
                        g.add_outer(1.0, &du, &w.x);
                    }
                }
                if need_dx {
                    let mut dx = self.hidden_weight.matvec_t(&da);
                    if let Some(ad) = adapter {
                        for (d, v) in dx.iter_mut().zip(ad.a.matvec_t(&du)) {
                            *d += v;
                        }
                    }
                    let g = g_emb.as_mut().unwrap();
                    let n_ctx = dims.n_ctx;
                    for slot in 0..n_ctx {
                        let offset = n_ctx - slot;
                        let (token, scale) = if offset > i {
                            (PAD, 1.0)
                        } else {
                            let pos = i - offset;
                            let scale = ex
                                .noise
                                .and_then(|n| n.positions[pos].as_ref())
                                .map_or(1.0, |p| p.clip_scale);
                            (seq.tokens[pos], scale)
                        };
                        let chunk = &dx[slot * dims.d_emb..(slot + 1) * dims.d_emb];
                        for (gi, d) in g.row_mut(token).iter_mut().zip(chunk) {
                            *gi += scale * d;
                        }
                    }
                }
            }
            let seq_task = losses.iter().sum::<f64>() / m;
            ensure_finite("task loss", seq_task)?;
            l_task += seq_task / n_batch;
            if let (Some(un), Some(s)) = (spec.unlearn, scores) {
                l_unlearn += sculpt::unlearn_loss(&s[1..], &losses, un.theta)? / n_batch;
            }
            token_losses.push(losses);
        }

        let mut l_reg = 0.0;
        if let (Some(reg), Some(ad)) = (spec.reg, adapter) {
            let delta = ad.delta()?;
            l_reg = sculpt::reg_loss(&delta, reg.snapshot, reg.lambda_dyn, reg.omega_bar)?;
            let diff = delta.sub(reg.snapshot)?;
            let c = 2.0 * reg.coefficient();
            if let Some(g) = g_b.as_mut() {
                // dL/dB = 2c (ΔW − S) Aᵀ
                let gb = diff.matmul(&ad.a.transpose())?.scaled(c);
                for (gi, v) in g.as_mut_slice().iter_mut().zip(gb.as_slice()) {
                    *gi += v;
                }
            }
            if let Some(g) = g_a.as_mut() {
                // dL/dA = 2c Bᵀ (ΔW − S)
                let ga = ad.b.transpose().matmul(&diff)?.scaled(c);
                for (gi, v) in g.as_mut_slice().iter_mut().zip(ga.as_slice()) {
                    *gi += v;
                }
            }
        }

        let lambda_unlearn = spec.unlearn.map_or(0.0, |u| u.lambda);
        let total = sculpt::total_loss(l_task, l_reg, l_unlearn, lambda_unlearn)?;

        grads.embedding = g_emb.map(|m| m.as_slice().to_vec());
        grads.hidden_weight = g_w0.map(|m| m.as_slice().to_vec());
        grads.output_weight = g_wout.map(|m| m.as_slice().to_vec());
        grads.lora_a = g_a.map(|m| m.as_slice().to_vec());
        grads.lora_b = g_b.map(|m| m.as_slice().to_vec());

        Ok(GradientBundle {
            grads,
            token_losses,
            l_task,
            l_reg,
            l_unlearn,
            total,
        })
    }

    /// Scalar value of the total loss without gradients; used by finite-difference checks.
    pub fn total_loss_value(
        &self,
        adapter: Option<&LoraAdapter>,
        batch: &[Example<'_>],
        spec: &LossSpec<'_>,
    ) -> Result<f64> {
        let n_batch = batch.len() as f64;
        let mut l_task = 0.0;
        let mut l_unlearn = 0.0;
        for ex in batch {
            let (losses, mean) = self.token_losses(adapter, ex.seq, ex.noise)?;
            l_task += mean / n_batch;
            if let (Some(un), Some(s)) = (spec.unlearn, ex.scores) {
                l_unlearn += sculpt::unlearn_loss(&s[1..], &losses, un.theta)? / n_batch;
            }
        }
        let l_reg = match (spec.reg, adapter) {
            (Some(reg), Some(ad)) => sculpt::reg_loss(&ad.delta()?, reg.snapshot, reg.lambda_dyn, reg.omega_bar)?,
            _ => 0.0,
        };
        sculpt::total_loss(l_task, l_reg, l_unlearn, spec.unlearn.map_or(0.0, |u| u.lambda))
    }
}

/// `p ← p − lr·g` for every parameter that has a gradient.
pub fn sgd_step(model: &mut TinyLm, adapter: Option<&mut LoraAdapter>, grads: &Gradients, lr: f64) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::InvalidArgument(format!("learning rate must be non-negative, got {lr}")));
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradient contains a non-finite entry".into()));
    }
    let mut params = Params { model, adapter };
    for (id, g) in grads.iter() {
        let p = params
            .slice_mut(id)
            .ok_or_else(|| Error::InvalidArgument(format!("gradient for missing parameter {}", id.name())))?;
        if p.len() != g.len() {
            return Err(Error::Shape(format!("{} gradient length mismatch", id.name())));
        }
        for (pi, gi) in p.iter_mut().zip(g) {
            *pi -= lr * gi;
        }
    }
    Ok(())
}
