//! Acceptance gate: one PASS/FAIL line per criterion, non-zero exit if any fails.
//!
//! Runs without the libtest harness so the criterion lines always print.

mod common;

use std::collections::HashSet;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use common::*;
use privcl::cli::load_run_corpus;
use privcl::corpus::{compute_corpus_stats, Corpus, StopwordSet, TokenizedSequence};
use privcl::linalg::Matrix;
use privcl::model::Trainable;
use privcl::privacy::{
    allocate_budget, clip, compose_epsilons, gaussian_mechanism, noise_sigma, NoiseSource, PrivacyConfig,
    SensitivityVariant,
};
use privcl::sculpt::{
    dynamic_lambda, reg_loss, task_importance, total_loss, unlearn_loss, update_running_importance, ImportanceState,
    SculptConfig,
};
use privcl::sensitivity::{contextual_score, fuse_scores};
use privcl::synth;
use privcl::trainer::{avg_acc, bwt, last_acc, mean_token_loss, run_continual, AccuracyMatrix, Mode, RunConfig};
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn within_budget(start: Instant, limit: Duration, detail: &mut String) -> bool {
    let took = start.elapsed();
    detail.push_str(&format!(" [{:.2}s / limit {}s]", took.as_secs_f64(), limit.as_secs()));
    took <= limit
}

fn rel(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        a.abs()
    } else {
        ((a - b) / b).abs()
    }
}

// ---------------------------------------------------------------------------

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let privacy = PrivacyConfig::default();
    let sculpt = SculptConfig::default();
    let mut checks: Vec<(&str, f64, f64)> = Vec::new();

    checks.push(("allocate_budget(0.5)", allocate_budget(0.5, &privacy).unwrap(), 3.25));
    checks.push(("allocate_budget(0)", allocate_budget(0.0, &privacy).unwrap(), 10.0));
    checks.push(("allocate_budget(1)", allocate_budget(1.0, &privacy).unwrap(), 1.0));
    checks.push((
        "noise_sigma main_text",
        noise_sigma(1.0, 1e-6, 1.0, SensitivityVariant::MainText).unwrap(),
        5.298802526850474,
    ));
    checks.push((
        "noise_sigma appendix",
        noise_sigma(1.0, 1e-6, 1.0, SensitivityVariant::Appendix).unwrap(),
        10.597605053700947,
    ));
    checks.push(("fuse_scores(2,0,0.5)", fuse_scores(2.0, 0.0, 0.5).unwrap(), 0.6321205588285577));
    checks.push(("fuse_scores(0,0,0.5)", fuse_scores(0.0, 0.0, 0.5).unwrap(), 0.0));

    // N=6: token 2 is the most frequent token of task 1 only
    let six: Vec<Vec<Vec<usize>>> = (0..6)
        .map(|n| if n == 0 { vec![vec![2, 2, 3]] } else { vec![vec![3 + n]] })
        .collect();
    let stats = compute_corpus_stats(&to_corpora(&six), 0.2).unwrap();
    checks.push(("contextual_score N=6 d=1", contextual_score(&stats, 2, true), 0.18310204811135164));
    checks.push(("contextual_score absent", contextual_score(&stats, 40, true), 0.0));
    let two = vec![vec![vec![2]], vec![vec![2]]];
    let stats = compute_corpus_stats(&to_corpora(&two), 0.2).unwrap();
    checks.push(("contextual_score clamped", contextual_score(&stats, 2, true), 0.0));
    checks.push(("contextual_score raw", contextual_score(&stats, 2, false), -0.40546510810816444));

    checks.push(("dynamic_lambda(0.5)", dynamic_lambda(0.5, &sculpt).unwrap(), 5.5));
    checks.push(("dynamic_lambda(0)", dynamic_lambda(0.0, &sculpt).unwrap(), 10.0));
    checks.push(("dynamic_lambda(1)", dynamic_lambda(1.0, &sculpt).unwrap(), 1.0));
    checks.push((
        "unlearn_loss M=4",
        unlearn_loss(&[0.8, 0.1, 0.5, 0.6], &[2.0, 1.0, 1.0, 1.0], 0.6).unwrap(),
        0.1,
    ));
    let ones = Matrix::from_vec(2, 2, vec![1.0; 4]).unwrap();
    let zeros = Matrix::zeros(2, 2);
    checks.push(("reg_loss ones", reg_loss(&ones, &zeros, 2.0, 3.0).unwrap(), 24.0));
    checks.push(("reg_loss equal", reg_loss(&ones, &ones, 2.0, 3.0).unwrap(), 0.0));
    checks.push((
        "task_importance I2 x3",
        task_importance(&Matrix::identity(2), 3.0).unwrap(),
        4.242640687119286,
    ));
    checks.push(("task_importance zero", task_importance(&zeros, 3.0).unwrap(), 0.0));
    checks.push(("total_loss", total_loss(1.0, 0.5, 0.1, 1.0).unwrap(), 1.6));
    let mut state = ImportanceState::default();
    update_running_importance(&mut state, 1.0).unwrap();
    update_running_importance(&mut state, 3.0).unwrap();
    checks.push(("running importance (1,3)", state.omega_bar(), 2.0));

    let r = AccuracyMatrix::from_rows(vec![1, 2], vec![vec![0.5], vec![0.4, 0.6]]).unwrap();
    checks.push(("bwt", bwt(&r).unwrap(), -0.1));
    checks.push(("last", last_acc(&r).unwrap(), 0.5));
    checks.push(("avg", avg_acc(&r).unwrap(), 0.5));
    checks.push(("compose L=1", compose_epsilons(&[2.0], 1e-6, 1e-6).unwrap().epsilon_total, 12.513043539513864));
    checks.push((
        "compose L=2",
        compose_epsilons(&[1.0, 2.0], 1e-6, 1e-6).unwrap().epsilon_total,
        17.867688755399353,
    ));
    let c = clip(&[3.0, 4.0], 1.0).unwrap();
    checks.push(("clip x", c[0], 0.6));
    checks.push(("clip y", c[1], 0.8));

    let worst = checks
        .iter()
        .map(|(name, got, want)| (name, rel(*got, *want)))
        .fold(("", 0.0), |acc, (n, e)| if e > acc.1 { (n, e) } else { acc });
    let mut detail = format!("{} examples, worst relative error {:.2e} ({})", checks.len(), worst.1, worst.0);
    let fast = within_budget(start, Duration::from_secs(1), &mut detail);
    outcome(worst.1 <= 1e-9 && fast, detail)
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut r = rng(2);
    let n = 100_000;
    let mut failures = Vec::new();
    for _ in 0..n {
        let s1 = r.random_range(0.0..50.0);
        let s2 = r.random_range(0.0..5.0);
        let alpha = r.random_range(0.0..=1.0);
        let score = fuse_scores(s1, s2, alpha).unwrap();
        if !(0.0..1.0).contains(&score) {
            failures.push(format!("score {score} for ({s1}, {s2}, {alpha})"));
        }

        let lo = r.random_range(0.01..20.0);
        let hi = lo + r.random_range(0.0..50.0);
        let cfg = PrivacyConfig {
            eps_lower: lo,
            eps_upper: hi,
            ..PrivacyConfig::default()
        };
        let eps = allocate_budget(score, &cfg).unwrap();
        if !(lo..=hi).contains(&eps) {
            failures.push(format!("epsilon {eps} outside [{lo}, {hi}]"));
        }

        let (a, b) = (r.random_range(0.0..1.0), r.random_range(0.0..1.0));
        let (sa, sb) = if a < b { (a, b) } else { (b, a) };
        if sb - sa > 1e-9 {
            let p = PrivacyConfig::default();
            let sigma = |s: f64| noise_sigma(allocate_budget(s, &p).unwrap(), p.delta, p.clip_norm, p.variant).unwrap();
            if sigma(sa) >= sigma(sb) {
                failures.push(format!("sigma not increasing between scores {sa} and {sb}"));
            }
        }

        let lmin = r.random_range(0.0..10.0);
        let sc = SculptConfig {
            lambda_min: lmin,
            lambda_max: lmin + r.random_range(0.0..20.0),
            ..SculptConfig::default()
        };
        let l = dynamic_lambda(r.random_range(0.0..=1.0), &sc).unwrap();
        if !(sc.lambda_min..=sc.lambda_max).contains(&l) {
            failures.push(format!("lambda_dyn {l} outside [{}, {}]", sc.lambda_min, sc.lambda_max));
        }
    }
    let mut detail = match failures.first() {
        None => format!("{n} random inputs, all ranges and monotonicity hold"),
        Some(f) => format!("{} violations, first: {f}", failures.len()),
    };
    let fast = within_budget(start, Duration::from_secs(5), &mut detail);
    outcome(failures.is_empty() && fast, detail)
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let c = 1.0;
    let sigma = noise_sigma(1.0, 1e-6, c, SensitivityVariant::Appendix).unwrap();
    let e = [0.9, -1.2, 0.3, 2.0, 0.0, -0.4];
    let target = clip(&e, c).unwrap();
    let n = 100_000;
    let mut noise = NoiseSource::new(3);
    let mut sum = vec![0.0; e.len()];
    let mut sq = vec![0.0; e.len()];
    for _ in 0..n {
        let (out, _) = gaussian_mechanism(&e, sigma, c, &mut noise).unwrap();
        for j in 0..e.len() {
            let d = out[j] - target[j];
            sum[j] += d;
            sq[j] += d * d;
        }
    }
    let mut worst_mean: f64 = 0.0;
    let mut worst_std: f64 = 0.0;
    for j in 0..e.len() {
        let m = sum[j] / n as f64;
        let var = (sq[j] - n as f64 * m * m) / (n - 1) as f64;
        worst_mean = worst_mean.max(m.abs() / (3.0 * sigma / (n as f64).sqrt()));
        worst_std = worst_std.max((var.sqrt() - sigma).abs() / sigma);
    }
    let stats_ok = worst_mean < 1.0 && worst_std <= 0.02;

    let mut r = rng(33);
    let mut worst_gap: f64 = 0.0;
    let pairs = 1_000_000;
    for _ in 0..pairs {
        let dim = r.random_range(1..=8);
        let scale_a = 10f64.powf(r.random_range(-2.0..2.0));
        let scale_b = 10f64.powf(r.random_range(-2.0..2.0));
        let a: Vec<f64> = (0..dim).map(|_| r.random_range(-1.0..1.0) * scale_a).collect();
        let b: Vec<f64> = (0..dim).map(|_| r.random_range(-1.0..1.0) * scale_b).collect();
        let (ca, cb) = (clip(&a, c).unwrap(), clip(&b, c).unwrap());
        let gap = ca.iter().zip(&cb).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        worst_gap = worst_gap.max(gap);
    }
    let bound_ok = worst_gap <= 2.0 * c;
    let mut detail = format!(
        "sigma {sigma:.4}; worst |mean| at {worst_mean:.3} of the 3-sigma/sqrt(n) band; worst std error {:.3}%; \
         max clip gap {worst_gap:.6} over {pairs} pairs (bound {})",
        worst_std * 100.0,
        2.0 * c
    );
    let fast = within_budget(start, Duration::from_secs(30), &mut detail);
    outcome(stats_ok && bound_ok && fast, detail)
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let mut worst = (0.0, String::new());
    let mut checked = 0;
    for seed in 0..3 {
        let case = GradCase::new(seed);
        for trainable in [Trainable::AdapterOnly, Trainable::Full] {
            let batch = case.batch(true);
            for (name, spec) in [
                ("L_task", case.task_spec(trainable)),
                ("L_task+L_reg", case.reg_spec(trainable)),
                ("L_total", case.full_spec(trainable)),
            ] {
                let (e, at, n) = max_grad_error(&case.model, Some(&case.adapter), &batch, &spec);
                checked += n;
                if e > worst.0 {
                    worst = (e, format!("{name} {trainable:?} seed {seed}: {at}"));
                }
            }
        }
        // without an adapter every base parameter, W0 included, is trainable
        let (e, at, n) = max_grad_error(&case.model, None, &case.batch(true), &case.task_spec(Trainable::Full));
        checked += n;
        if e > worst.0 {
            worst = (e, format!("base model seed {seed}: {at}"));
        }
    }
    let mut detail = format!("{checked} parameter entries, worst relative error {:.2e}", worst.0);
    if worst.0 > 0.0 {
        detail.push_str(&format!(" at {}", worst.1));
    }
    let fast = within_budget(start, Duration::from_secs(60), &mut detail);
    outcome(worst.0 <= 1e-4 && fast, detail)
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let mut r = rng(5);
    let mut worst: f64 = 0.0;
    let mut support_mismatch = 0;
    let tau = 0.2;
    for _ in 0..1000 {
        let vocab = r.random_range(2..10);
        let streams = random_streams(&mut r, vocab);
        let corpora = to_corpora(&streams);
        let stats = compute_corpus_stats(&corpora, tau).unwrap();
        for t in 0..vocab + 1 {
            for (n, task) in streams.iter().enumerate() {
                worst = worst.max((stats.salience(n, t) - brute_salience(task, t)).abs());
            }
            if stats.support(t) != brute_support(&streams, t, tau) {
                support_mismatch += 1;
            }
        }

        let history: Vec<f64> = (0..r.random_range(1..=100)).map(|_| r.random_range(0.0..100.0)).collect();
        let mut state = ImportanceState::default();
        for &o in &history {
            update_running_importance(&mut state, o).unwrap();
        }
        worst = worst.max(rel(state.omega_bar(), brute_mean(&history)));

        let rows = random_matrix(&mut r, 2);
        let m = AccuracyMatrix::from_rows((1..=rows.len() as u32).collect(), rows.clone()).unwrap();
        worst = worst.max((bwt(&m).unwrap() - brute_bwt(&rows)).abs());
        worst = worst.max((last_acc(&m).unwrap() - brute_last(&rows)).abs());
        worst = worst.max((avg_acc(&m).unwrap() - brute_avg(&rows)).abs());
    }
    let mut detail = format!("1000 instances, worst deviation {worst:.2e}, support mismatches {support_mismatch}");
    let fast = within_budget(start, Duration::from_secs(30), &mut detail);
    outcome(worst <= 1e-12 && support_mismatch == 0 && fast, detail)
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("desk.json");
    std::fs::write(&config, DESK_CONFIG).unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_privcl"))
            .args(["run", "--config", config.to_str().unwrap(), "--seed", "7", "--out", out.to_str().unwrap()])
            .output()
            .unwrap();
        (status.status.success(), out)
    };
    let (ok_a, a) = run("a");
    let (ok_b, b) = run("b");
    let same = |f: &str| {
        let read = |d: &Path| std::fs::read(d.join(f)).unwrap_or_default();
        let (x, y) = (read(&a), read(&b));
        !x.is_empty() && x == y
    };
    let identical = ok_a && ok_b && same("metrics.json") && same("matrix.csv");
    let mut detail = format!(
        "two pecl runs, seed 7: metrics.json {}, matrix.csv {}",
        if same("metrics.json") { "identical" } else { "differs" },
        if same("matrix.csv") { "identical" } else { "differs" }
    );
    let fast = within_budget(start, Duration::from_secs(300), &mut detail);
    outcome(identical && fast, detail)
}

/// (sequence, position) pairs whose token is a planted sensitive surface with score > θ.
fn sensitive_positions(corpus: &Corpus, outcome: &privcl::trainer::RunOutcome, theta: f64) -> HashSet<(usize, usize)> {
    let planted: HashSet<&str> = synth::sensitive_surfaces(synth::MAX_TASKS).into_iter().collect();
    let mut out = HashSet::new();
    for profiles in outcome.profiles.values() {
        for p in profiles {
            for (pos, e) in p.entries.iter().enumerate() {
                if pos >= 1 && e.score > theta && planted.contains(corpus.vocab.surface(e.token)) {
                    out.insert((p.sequence_id, pos));
                }
            }
        }
    }
    out
}

fn criterion_7() -> (Outcome, Outcome) {
    let start = Instant::now();
    let (file, base) = desk_config();
    let seeds = [1u64, 2, 3];
    let mut bwt_pecl = Vec::new();
    let mut bwt_seqft = Vec::new();
    let mut loss_pecl = Vec::new();
    let mut loss_ablation = Vec::new();
    let mut selected = 0;
    for &seed in &seeds {
        let with = |mode: Mode, lambda_unlearn: f64| RunConfig {
            mode,
            seed,
            sculpt: SculptConfig {
                lambda_unlearn,
                ..base.sculpt
            },
            ..base.clone()
        };
        let pecl_cfg = with(Mode::Pecl, base.sculpt.lambda_unlearn);
        let corpus = load_run_corpus(&file, &pecl_cfg).unwrap();
        let pecl = run_continual(&pecl_cfg, &corpus).unwrap();
        let seqft = run_continual(&with(Mode::Seqft, base.sculpt.lambda_unlearn), &corpus).unwrap();
        let ablation = run_continual(&with(Mode::Pecl, 0.0), &corpus).unwrap();
        bwt_pecl.push(bwt(&pecl.matrix).unwrap());
        bwt_seqft.push(bwt(&seqft.matrix).unwrap());

        let positions = sensitive_positions(&corpus, &pecl, base.sculpt.theta);
        selected += positions.len();
        let train: Vec<TokenizedSequence> = corpus.tasks.iter().flat_map(|t| t.train.clone()).collect();
        let pick = |s: &TokenizedSequence, i: usize| positions.contains(&(s.id, i));
        let lp = mean_token_loss(&pecl.model, Some(&pecl.adapter), &train, pick).unwrap();
        let la = mean_token_loss(&ablation.model, Some(&ablation.adapter), &train, pick).unwrap();
        if let (Some(lp), Some(la)) = (lp, la) {
            loss_pecl.push(lp);
            loss_ablation.push(la);
        }
    }
    let took = start.elapsed();
    let budget_ok = took <= Duration::from_secs(900);
    let timing = format!(" [{:.2}s / limit 900s]", took.as_secs_f64());

    let (mp, ms) = (brute_mean(&bwt_pecl), brute_mean(&bwt_seqft));
    let a = outcome(
        mp >= ms && budget_ok,
        format!("mean BWT over seeds {seeds:?}: pecl {mp:.4} vs seqft {ms:.4}; per seed pecl {bwt_pecl:.3?} seqft {bwt_seqft:.3?}{timing}"),
    );
    let b = if loss_pecl.len() == seeds.len() {
        let (lp, la) = (brute_mean(&loss_pecl), brute_mean(&loss_ablation));
        outcome(
            lp > la && budget_ok,
            format!(
                "mean loss on {selected} planted sensitive positions with score > theta: pecl {lp:.4} vs lambda_unlearn=0 {la:.4}; \
                 per seed pecl {loss_pecl:.3?} ablation {loss_ablation:.3?}{timing}"
            ),
        )
    } else {
        outcome(false, format!("no planted sensitive token exceeded theta in some seed{timing}"))
    };
    (a, b)
}

fn criterion_8() -> Outcome {
    let start = Instant::now();
    let (_, base) = desk_config();
    let cfg = RunConfig {
        mode: Mode::Pecl,
        epochs: 5,
        seed: 8,
        ..base
    };
    let records = synth::stopword_only(3, 40, 8);
    let corpus = Corpus::from_records(&records, cfg.vocab_cap).unwrap();
    let stop = StopwordSet::bundled();
    let all_stop = corpus.vocab.surfaces()[2..].iter().all(|s| stop.contains(s));
    let run = run_continual(&cfg, &corpus);
    let mut detail;
    let pass = match run {
        Ok(out) => {
            let unlearn_zero = out.reports.iter().all(|r| r.l_unlearn == 0.0);
            let scores_zero = out.profiles.values().flatten().all(|p| p.scores().iter().all(|&s| s == 0.0));
            detail = format!(
                "3 stopword-only tasks: ledger records {}, L_unlearn per task {:?}, all scores zero {scores_zero}",
                out.ledger.len(),
                out.reports.iter().map(|r| r.l_unlearn).collect::<Vec<_>>()
            );
            all_stop && out.ledger.is_empty() && unlearn_zero && scores_zero
        }
        Err(e) => {
            detail = format!("run failed: {e}");
            false
        }
    };
    let fast = within_budget(start, Duration::from_secs(60), &mut detail);
    outcome(pass && fast, detail)
}

fn main() {
    // libtest passes flags such as --list or a filter; the gate always runs in full
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let mut results: Vec<(&str, Outcome)> = vec![
        ("1 formula fidelity", criterion_1()),
        ("2 range and monotonicity", criterion_2()),
        ("3 mechanism statistics", criterion_3()),
        ("4 gradient correctness", criterion_4()),
        ("5 oracle equivalence", criterion_5()),
        ("6 determinism", criterion_6()),
    ];
    let (a, b) = criterion_7();
    results.push(("7a forgetting: pecl BWT >= seqft BWT", a));
    results.push(("7b unlearning: sensitive-token loss above ablation", b));
    results.push(("8 zero-score bypass", criterion_8()));

    let mut failed = 0;
    for (name, o) in &results {
        println!("criterion {name}: {} | {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
