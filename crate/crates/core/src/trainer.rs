//! Sequential multi-task training, per-task evaluation, and continual-learning metrics.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{compute_corpus_stats, Corpus, CorpusStats, StopwordSet, TaskCorpus, TokenizedSequence, DEFAULT_TAU, DEFAULT_VOCAB_CAP};
use crate::error::{Error, Result};
use crate::model::{
    init_lm, Example, InputPerturbation, LossSpec, LoraAdapter, ModelDims, RegSpec, SequenceNoise, TinyLm, Trainable,
    UnlearnSpec,
};
use crate::optim::{Optimizer, OptimizerKind};
use crate::privacy::{gaussian_mechanism, noise_sigma, perturb_embedding, Exposure, LedgerRecord, NoiseSource, PrivacyConfig, PrivacyLedger};
use crate::sculpt::{
    dynamic_lambda, mean_task_sensitivity, task_importance, update_running_importance, AdapterSnapshot, ImportanceState,
    SculptConfig,
};
use crate::seed::derive_seed;
use crate::sensitivity::{build_profile, SensitivityConfig, SensitivityProfile};
use crate::synth::SynthConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Dynamic token-level noise plus regularization and unlearning.
    #[default]
    Pecl,
    /// Plain sequential fine-tuning: no noise, task loss only.
    Seqft,
    /// Fixed-ε noise on every non-stopword input token, task loss only.
    UniformDp,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Pecl => "pecl",
            Mode::Seqft => "seqft",
            Mode::UniformDp => "uniform_dp",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pecl" => Ok(Mode::Pecl),
            "seqft" => Ok(Mode::Seqft),
            "uniform_dp" => Ok(Mode::UniformDp),
            other => Err(Error::config("mode", format!("unknown mode `{other}` (expected pecl, seqft, or uniform_dp)"))),
        }
    }
}

/// Which tasks feed the cross-task statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StatsScope {
    /// Tasks seen so far, refreshed at each task arrival.
    #[default]
    Seen,
    /// Every task in the order, computed up front.
    All,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    /// Empty means ascending task id.
    pub task_order: Vec<u32>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub seed: u64,
    pub sensitivity: SensitivityConfig,
    pub privacy: PrivacyConfig,
    pub sculpt: SculptConfig,
    /// ε used for every noised token in `uniform_dp` mode.
    pub uniform_epsilon: f64,
    pub tau: f64,
    pub stats_scope: StatsScope,
    pub d_emb: usize,
    pub n_ctx: usize,
    pub d_hidden: usize,
    pub rank: usize,
    pub full_finetune: bool,
    pub vocab_cap: usize,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let privacy = PrivacyConfig::default();
        Self {
            mode: Mode::Pecl,
            task_order: Vec::new(),
            epochs: 3,
            batch_size: 32,
            lr: 5e-4,
            optimizer: OptimizerKind::Sgd,
            weight_decay: 0.01,
            seed: 0,
            sensitivity: SensitivityConfig::default(),
            uniform_epsilon: privacy.eps_lower,
            privacy,
            sculpt: SculptConfig::default(),
            tau: DEFAULT_TAU,
            stats_scope: StatsScope::Seen,
            d_emb: 32,
            n_ctx: 8,
            d_hidden: 64,
            rank: 4,
            full_finetune: false,
            vocab_cap: DEFAULT_VOCAB_CAP,
            synth: SynthConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", format!("must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        self.sensitivity.validate()?;
        self.privacy.validate()?;
        self.sculpt.validate()?;
        if !(self.uniform_epsilon > 0.0 && self.uniform_epsilon.is_finite()) {
            return Err(Error::config("uniform_epsilon", "must be positive"));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::config("tau", format!("must lie in (0,1), got {}", self.tau)));
        }
        for (key, v) in [("d_emb", self.d_emb), ("n_ctx", self.n_ctx), ("d_hidden", self.d_hidden), ("rank", self.rank)] {
            if v == 0 {
                return Err(Error::config(key, "must be at least 1"));
            }
        }
        if self.rank > self.d_hidden.min(self.n_ctx * self.d_emb) {
            return Err(Error::config("rank", "must not exceed min(d_hidden, n_ctx*d_emb)"));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = self.task_order.iter().find(|t| !seen.insert(**t)) {
            return Err(Error::config("task_order", format!("task {dup} appears twice")));
        }
        Ok(())
    }

    pub fn dims(&self, vocab: usize) -> ModelDims {
        ModelDims {
            vocab,
            d_emb: self.d_emb,
            n_ctx: self.n_ctx,
            d_hidden: self.d_hidden,
        }
    }

    /// The task order to train in, checked against the corpus.
    pub fn resolve_order(&self, corpus: &Corpus) -> Result<Vec<u32>> {
        if self.task_order.is_empty() {
            return Ok(corpus.task_ids());
        }
        for t in &self.task_order {
            if corpus.task(*t).is_none() {
                return Err(Error::Data(format!("task {t} in task_order is missing from the corpus")));
            }
        }
        Ok(self.task_order.clone())
    }

    /// Synthetic stream configuration with its seed derived from the run seed.
    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            seed: derive_seed(self.seed, "synth"),
            ..self.synth
        }
    }

    pub fn stopwords(&self) -> &StopwordSet {
        &self.sensitivity.stopwords
    }
}

/// Lower-triangular accuracy matrix: `R[k][i]` is the accuracy on the i-th task
/// of the order after training the first k+1 tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub task_ids: Vec<u32>,
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new(task_ids: Vec<u32>) -> Self {
        Self {
            task_ids,
            rows: Vec::new(),
        }
    }

    pub fn from_rows(task_ids: Vec<u32>, rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = Self::new(task_ids);
        for r in rows {
            m.push_row(r)?;
        }
        Ok(m)
    }

    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let k = self.rows.len();
        if k >= self.task_ids.len() {
            return Err(Error::Shape("accuracy matrix already complete".into()));
        }
        if row.len() != k + 1 {
            return Err(Error::Shape(format!("row {} needs {} entries, got {}", k + 1, k + 1, row.len())));
        }
        if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("accuracy {v} outside [0,1]")));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.task_ids.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn get(&self, k: usize, i: usize) -> f64 {
        self.rows[k][i]
    }

    pub fn is_complete(&self) -> bool {
        !self.task_ids.is_empty() && self.rows.len() == self.task_ids.len()
    }

    fn require_complete(&self) -> Result<()> {
        if self.is_complete() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "accuracy matrix has {} of {} rows",
                self.rows.len(),
                self.task_ids.len()
            )))
        }
    }

    /// `k,<task ids...>` header, one row per training step, blanks above the diagonal.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k");
        for t in &self.task_ids {
            out.push_str(&format!(",task_{t}"));
        }
        out.push('\n');
        for (k, row) in self.rows.iter().enumerate() {
            out.push_str(&(k + 1).to_string());
            for i in 0..self.n() {
                out.push(',');
                if let Some(v) = row.get(i) {
                    out.push_str(&v.to_string());
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(raw: &str) -> Result<Self> {
        let mut lines = raw.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Data("empty matrix file".into()))?;
        let mut cols = header.split(',');
        if cols.next() != Some("k") {
            return Err(Error::Data("matrix header must start with `k`".into()));
        }
        let task_ids = cols
            .map(|c| {
                c.strip_prefix("task_")
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| Error::Data(format!("bad matrix column `{c}`")))
            })
            .collect::<Result<Vec<u32>>>()?;
        let mut m = Self::new(task_ids);
        for (k, line) in lines.enumerate() {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != m.n() + 1 {
                return Err(Error::Data(format!("matrix row {} has {} cells", k + 1, cells.len())));
            }
            let row = cells[1..=k + 1]
                .iter()
                .map(|c| c.parse::<f64>().map_err(|_| Error::Data(format!("bad accuracy `{c}` in row {}", k + 1))))
                .collect::<Result<Vec<_>>>()?;
            if cells[k + 2..].iter().any(|c| !c.is_empty()) {
                return Err(Error::Data(format!("row {} has entries above the diagonal", k + 1)));
            }
            m.push_row(row)?;
        }
        Ok(m)
    }
}

/// BWT = (1/(N−1)) Σ_{i<N} (R[N][i] − R[i][i]).
pub fn bwt(r: &AccuracyMatrix) -> Result<f64> {
    r.require_complete()?;
    let n = r.n();
    if n < 2 {
        return Err(Error::InvalidArgument("backward transfer needs at least two tasks".into()));
    }
    let sum: f64 = (0..n - 1).map(|i| r.get(n - 1, i) - r.get(i, i)).sum();
    Ok(sum / (n - 1) as f64)
}

/// Mean of the final row.
pub fn last_acc(r: &AccuracyMatrix) -> Result<f64> {
    r.require_complete()?;
    let last = &r.rows[r.n() - 1];
    Ok(last.iter().sum::<f64>() / last.len() as f64)
}

/// Mean over steps of the running mean accuracy on tasks seen so far.
pub fn avg_acc(r: &AccuracyMatrix) -> Result<f64> {
    r.require_complete()?;
    let sum: f64 = r
        .rows
        .iter()
        .map(|row| row.iter().sum::<f64>() / row.len() as f64)
        .sum();
    Ok(sum / r.n() as f64)
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = i;
        }
    }
    best
}

/// Whether the model's argmax at the label position is the true label (clean inputs).
pub fn predicts_label(model: &TinyLm, adapter: Option<&LoraAdapter>, seq: &TokenizedSequence) -> bool {
    let target = seq.len() - 1;
    argmax(&model.predict_at(adapter, &seq.tokens, target, None)) == seq.label_token()
}

/// Fraction of eval sequences whose label-position argmax is the true label.
pub fn evaluate(model: &TinyLm, adapter: Option<&LoraAdapter>, task: &TaskCorpus) -> Result<f64> {
    if task.eval.is_empty() {
        return Err(Error::Data(format!("task {} has no eval sequences", task.task_id)));
    }
    let correct = task.eval.iter().filter(|s| predicts_label(model, adapter, s)).count();
    Ok(correct as f64 / task.eval.len() as f64)
}

/// Sculpting diagnostics for one completed task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SculptReport {
    pub task_id: u32,
    pub omega: f64,
    pub omega_bar: f64,
    pub s_bar: Option<f64>,
    pub lambda_dyn: Option<f64>,
    /// Mean over the final epoch's batches.
    pub l_reg: f64,
    pub l_unlearn: f64,
    pub l_task: f64,
}

pub const SCULPT_COLUMNS: [&str; 7] = ["task_id", "omega", "omega_bar", "s_bar", "lambda_dyn", "l_reg", "l_unlearn"];

pub fn sculpt_reports_csv(reports: &[SculptReport]) -> String {
    let mut out = SCULPT_COLUMNS.join(",");
    out.push('\n');
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.task_id,
            r.omega,
            r.omega_bar,
            opt(r.s_bar),
            opt(r.lambda_dyn),
            r.l_reg,
            r.l_unlearn
        ));
    }
    out
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub matrix: AccuracyMatrix,
    pub ledger: PrivacyLedger,
    pub reports: Vec<SculptReport>,
    pub model: TinyLm,
    pub adapter: LoraAdapter,
    pub importance: ImportanceState,
    /// Sensitivity profiles of each task's training set (pecl mode only).
    pub profiles: BTreeMap<u32, Vec<SensitivityProfile>>,
}

/// Per-position noise budget for one training sequence.
enum NoisePlan<'a> {
    Clean,
    Profile(&'a SensitivityProfile),
    Uniform { mask: Vec<bool>, epsilon: f64, sigma: f64 },
}

struct Trainer<'a> {
    config: &'a RunConfig,
    corpus: &'a Corpus,
    model: TinyLm,
    noise: NoiseSource,
    shuffle: ChaCha8Rng,
    ledger: PrivacyLedger,
}

impl Trainer<'_> {
    fn sequence_noise(&mut self, seq: &TokenizedSequence, plan: &NoisePlan<'_>, epoch: usize) -> Result<Option<SequenceNoise>> {
        if matches!(plan, NoisePlan::Clean) {
            return Ok(None);
        }
        let c = self.config.privacy.clip_norm;
        let mut positions: Vec<Option<InputPerturbation>> = vec![None; seq.len()];
        // the final (label) position is never consumed as input
        for pos in 0..seq.len() - 1 {
            let e = self.model.embedding_row(seq.tokens[pos]);
            let exposure = Exposure {
                sequence_id: seq.id,
                position: pos,
                epoch,
            };
            positions[pos] = match plan {
                NoisePlan::Clean => None,
                NoisePlan::Profile(profile) => {
                    perturb_embedding(e, &profile.entries[pos], &self.config.privacy, &mut self.noise, &mut self.ledger, exposure)?
                        .map(|(_, p)| p)
                }
                NoisePlan::Uniform { mask, epsilon, sigma } => {
                    if mask[pos] {
                        let (_, p) = gaussian_mechanism(e, *sigma, c, &mut self.noise)?;
                        self.ledger.push(LedgerRecord {
                            sequence_id: seq.id,
                            position: pos,
                            epoch,
                            epsilon: *epsilon,
                            sigma: *sigma,
                        });
                        Some(p)
                    } else {
                        None
                    }
                }
            };
        }
        Ok(Some(SequenceNoise { positions }))
    }
}

/// Mean clean ‖x‖₂ at the adapted layer over every prediction window of the sequences.
pub fn mean_activation_norm(model: &TinyLm, seqs: &[TokenizedSequence], state: &mut ImportanceState) -> f64 {
    state.reset_activations();
    let n_ctx = model.dims.n_ctx;
    for seq in seqs {
        for target in 1..seq.len() {
            let mut sq = 0.0;
            for slot in 0..n_ctx {
                let offset = n_ctx - slot;
                let tok = if offset > target { crate::corpus::PAD } else { seq.tokens[target - offset] };
                let e = model.embedding_row(tok);
                sq += e.iter().map(|v| v * v).sum::<f64>();
            }
            state.observe_activation(sq.sqrt());
        }
    }
    state.activation_norm()
}

/// Trains the task stream in order and evaluates after every task.
pub fn run_continual(config: &RunConfig, corpus: &Corpus) -> Result<RunOutcome> {
    config.validate()?;
    let order = config.resolve_order(corpus)?;
    let tasks: Vec<&TaskCorpus> = order.iter().map(|t| corpus.task(*t).unwrap()).collect();
    let dims = config.dims(corpus.vocab.len());
    let stop_mask: Vec<bool> = corpus
        .vocab
        .surfaces()
        .iter()
        .map(|s| config.stopwords().contains(s))
        .collect();

    let mut tr = Trainer {
        config,
        corpus,
        model: init_lm(dims, derive_seed(config.seed, "init"))?,
        noise: NoiseSource::new(derive_seed(config.seed, "noise")),
        shuffle: ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "shuffle")),
        ledger: PrivacyLedger::new(config.privacy.delta, config.privacy.delta_prime),
    };
    let mut adapter = LoraAdapter::new(&dims, config.rank, order[0], derive_seed(config.seed, "adapter"))?;
    let mut snapshot: Option<AdapterSnapshot> = None;
    let mut importance = ImportanceState::default();
    let mut matrix = AccuracyMatrix::new(order.clone());
    let mut reports = Vec::new();
    let mut all_profiles = BTreeMap::new();
    let trainable = if config.full_finetune { Trainable::Full } else { Trainable::AdapterOnly };

    let all_stats = match (config.mode, config.stats_scope) {
        (Mode::Pecl, StatsScope::All) => Some(compute_corpus_stats(tasks.iter().copied(), config.tau)?),
        _ => None,
    };

    for (k, task) in tasks.iter().enumerate() {
        // warm start from the previous task's adapter
        adapter.task_id = task.task_id;
        let profiles: Vec<SensitivityProfile> = if config.mode == Mode::Pecl {
            let seen_stats;
            let stats: &CorpusStats = match &all_stats {
                Some(s) => s,
                None => {
                    seen_stats = compute_corpus_stats(tasks[..=k].iter().copied(), config.tau)?;
                    &seen_stats
                }
            };
            task.train
                .iter()
                .map(|seq| {
                    build_profile(
                        &tr.model,
                        Some(&adapter),
                        stats,
                        &tr.corpus.vocab,
                        seq,
                        &config.sensitivity,
                        &config.privacy,
                    )
                })
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let score_vecs: Vec<Vec<f64>> = profiles.iter().map(SensitivityProfile::scores).collect();

        let (s_bar, lambda_dyn) = if config.mode == Mode::Pecl {
            let s = mean_task_sensitivity(&profiles)?;
            (Some(s), Some(dynamic_lambda(s, &config.sculpt)?))
        } else {
            (None, None)
        };

        let uniform_sigma = noise_sigma(
            config.uniform_epsilon,
            config.privacy.delta,
            config.privacy.clip_norm,
            config.privacy.variant,
        )?;

        let snapshot_delta = snapshot.as_ref().map(|s| s.delta().clone());
        let spec = LossSpec {
            unlearn: (config.mode == Mode::Pecl).then_some(UnlearnSpec {
                theta: config.sculpt.theta,
                lambda: config.sculpt.lambda_unlearn,
            }),
            reg: match (&snapshot_delta, lambda_dyn) {
                (Some(d), Some(l)) => Some(RegSpec {
                    snapshot: d,
                    lambda_dyn: l,
                    omega_bar: importance.omega_bar(),
                }),
                _ => None,
            },
            trainable,
        };

        let n = task.train.len();
        let steps_per_epoch = n.div_ceil(config.batch_size);
        let mut optimizer = Optimizer::new(config.optimizer, config.lr, config.weight_decay, config.epochs * steps_per_epoch);
        let mut indices: Vec<usize> = (0..n).collect();
        let mut final_epoch = (0.0, 0.0, 0.0, 0usize);

        for epoch in 0..config.epochs {
            indices.shuffle(&mut tr.shuffle);
            final_epoch = (0.0, 0.0, 0.0, 0);
            for chunk in indices.chunks(config.batch_size) {
                let mut noises = Vec::with_capacity(chunk.len());
                for &i in chunk {
                    let seq = &task.train[i];
                    let plan = match config.mode {
                        Mode::Seqft => NoisePlan::Clean,
                        Mode::Pecl => NoisePlan::Profile(&profiles[i]),
                        Mode::UniformDp => NoisePlan::Uniform {
                            mask: seq.tokens.iter().map(|&t| !stop_mask[t]).collect(),
                            epsilon: config.uniform_epsilon,
                            sigma: uniform_sigma,
                        },
                    };
                    noises.push(tr.sequence_noise(seq, &plan, epoch)?);
                }
                let batch: Vec<Example<'_>> = chunk
                    .iter()
                    .zip(&noises)
                    .map(|(&i, noise)| Example {
                        seq: &task.train[i],
                        noise: noise.as_ref(),
                        scores: score_vecs.get(i).map(Vec::as_slice),
                    })
                    .collect();
                let bundle = tr.model.backward(Some(&adapter), &batch, &spec).map_err(|e| match e {
                    Error::NonFinite(msg) => Error::NonFinite(format!("task {} epoch {epoch}: {msg}", task.task_id)),
                    other => other,
                })?;
                if !bundle.total.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "task {} epoch {epoch}: total loss is {}",
                        task.task_id, bundle.total
                    )));
                }
                optimizer.step(&mut tr.model, Some(&mut adapter), &bundle.grads)?;
                final_epoch.0 += bundle.l_task;
                final_epoch.1 += bundle.l_reg;
                final_epoch.2 += bundle.l_unlearn;
                final_epoch.3 += 1;
            }
        }
        if !tr.model.is_finite() || !adapter.a.is_finite() || !adapter.b.is_finite() {
            return Err(Error::NonFinite(format!("parameters diverged while training task {}", task.task_id)));
        }

        let x_norm = mean_activation_norm(&tr.model, &task.train, &mut importance);
        let delta = adapter.delta()?;
        let omega = task_importance(&delta, x_norm)?;
        update_running_importance(&mut importance, omega)?;
        snapshot = Some(AdapterSnapshot::new(task.task_id, delta));

        let row = tasks[..=k]
            .iter()
            .map(|t| evaluate(&tr.model, Some(&adapter), t))
            .collect::<Result<Vec<_>>>()?;
        matrix.push_row(row)?;

        let batches = final_epoch.3.max(1) as f64;
        reports.push(SculptReport {
            task_id: task.task_id,
            omega,
            omega_bar: importance.omega_bar(),
            s_bar,
            lambda_dyn,
            l_reg: final_epoch.1 / batches,
            l_unlearn: final_epoch.2 / batches,
            l_task: final_epoch.0 / batches,
        });
        if config.mode == Mode::Pecl {
            all_profiles.insert(task.task_id, profiles);
        }
    }

    Ok(RunOutcome {
        matrix,
        ledger: tr.ledger,
        reports,
        model: tr.model,
        adapter,
        importance,
        profiles: all_profiles,
    })
}

/// Largest composed budget over individual sequences in the ledger.
pub fn max_sequence_budget(ledger: &PrivacyLedger) -> Option<f64> {
    let mut per_seq: HashMap<usize, Vec<f64>> = HashMap::new();
    for r in ledger.records() {
        per_seq.entry(r.sequence_id).or_default().push(r.epsilon);
    }
    per_seq
        .values()
        .filter_map(|eps| crate::privacy::compose_epsilons(eps, ledger.delta, ledger.delta_prime).ok())
        .map(|c| c.epsilon_total)
        .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))))
}

/// Mean clean ℓ(t) over the (sequence, position) pairs selected by `select`.
pub fn mean_token_loss<F>(
    model: &TinyLm,
    adapter: Option<&LoraAdapter>,
    seqs: &[TokenizedSequence],
    mut select: F,
) -> Result<Option<f64>>
where
    F: FnMut(&TokenizedSequence, usize) -> bool,
{
    let mut sum = 0.0;
    let mut n = 0usize;
    for seq in seqs {
        let positions: Vec<usize> = (1..seq.len()).filter(|&i| select(seq, i)).collect();
        if positions.is_empty() {
            continue;
        }
        let (losses, _) = model.token_losses(adapter, seq, None)?;
        for i in positions {
            sum += losses[i - 1];
            n += 1;
        }
    }
    Ok((n > 0).then(|| sum / n as f64))
}
