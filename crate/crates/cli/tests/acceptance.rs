//! Acceptance report. Every test writes one `PASS`, `FAIL` or `WARN` line
//! straight to stderr so the verdicts show up even when output is captured.
//!
//! Property and contract criteria panic on failure. The empirical
//! reproduction criteria (model orderings on synthetic drift data) print
//! their verdict with the measured numbers and do not panic: their outcome
//! is a finding about the method, not a defect in the code under test.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use temporec::dataset::{
    build_dataset, group_by_user, sample_negatives, temporal_split, IndexedSplit, Interaction,
    SplitConfig,
};
use temporec::encoder::HashEncoder;
use temporec::eval::{evaluate, ndcg_at_k, recall_at_k, recall_key, top_k_indices, EvalReport, Recommender};
use temporec::experiment::{
    catalog_embeddings, encode_profiles, generate_profiles, train_run, Embedded, ExperimentConfig, Method, Run,
};
use temporec::fusion::{alphas_from_logits, attention_forward, AttentionParams};
use temporec::model::train::epoch_pairs;
use temporec::model::{Features, ScorerModel, ScoringInputs, ScoringVariant, TrainConfig, TrainPair, UserVectors};
use temporec::profiles::{ProfileCache, ProfileGenerator, TemplateBackend};
use temporec::synth::{generate, SynthConfig};

fn verdict(status: &str, criterion: &str, detail: &str) {
    let line = format!("ACCEPTANCE {status} {criterion}: {detail}\n");
    std::io::stderr().write_all(line.as_bytes()).expect("stderr is writable");
}

fn report(pass: bool, criterion: &str, detail: &str) {
    verdict(if pass { "PASS" } else { "FAIL" }, criterion, detail);
}

// ---------------------------------------------------------------------------
// Gradients against central differences of an independent dense forward pass.

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Mean BCE of `batch`, computed from the raw parameters with no library
/// forward code.
fn reference_loss(m: &ScorerModel, batch: &[TrainPair]) -> f64 {
    let inputs = m.inputs();
    let (d, h) = (inputs.dim, m.mlp.hidden);
    let total: f64 = batch
        .iter()
        .map(|p| {
            let user = &inputs.users[p.user];
            let e_i = &inputs.items[p.item].values;
            let s = &user.short.as_ref().expect("short").values;
            let l = &user.long.as_ref().expect("long").values;
            let e_u: Vec<f64> = match m.variant {
                ScoringVariant::Full | ScoringVariant::DotProduct => {
                    let zs: f64 = m.attention.w_a.iter().zip(s).map(|(w, x)| w * x).sum();
                    let zl: f64 = m.attention.w_a.iter().zip(l).map(|(w, x)| w * x).sum();
                    let a = zs.exp() / (zs.exp() + zl.exp());
                    s.iter().zip(l).map(|(x, y)| a * x + (1.0 - a) * y).collect()
                }
                ScoringVariant::ShortOnly => s.clone(),
                ScoringVariant::LongOnly => l.clone(),
                ScoringVariant::GeneralOnly => user.general.as_ref().expect("general").values.clone(),
            };
            let y_hat = if m.variant == ScoringVariant::DotProduct {
                sigmoid(e_u.iter().zip(e_i).map(|(a, b)| a * b).sum())
            } else {
                let x: Vec<f64> = e_u.iter().chain(e_i).copied().collect();
                let mut logit = m.mlp.b2;
                for k in 0..h {
                    let z: f64 = m.mlp.b1[k] + (0..2 * d).map(|j| x[j] * m.mlp.w1[j * h + k]).sum::<f64>();
                    logit += m.mlp.w2[k] * z.max(0.0);
                }
                sigmoid(logit)
            };
            -(p.label * y_hat.ln() + (1.0 - p.label) * (1.0 - y_hat).ln())
        })
        .sum();
    total / batch.len() as f64
}

fn random_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Worst relative error over every trainable parameter of one instance.
fn gradient_instance(variant: ScoringVariant, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.gen_range(2..=8);
    let h = rng.gen_range(1..=4);
    let (n_users, n_items) = (3, 5);
    let users = (0..n_users)
        .map(|_| UserVectors {
            short: Some(Features::new(random_vec(&mut rng, d))),
            long: Some(Features::new(random_vec(&mut rng, d))),
            general: Some(Features::new(random_vec(&mut rng, d))),
        })
        .collect();
    let items = (0..n_items).map(|_| Features::new(random_vec(&mut rng, d))).collect();
    let inputs = Arc::new(ScoringInputs::new(d, users, items).expect("valid inputs"));
    let cfg = TrainConfig {
        hidden: h,
        seed,
        ..TrainConfig::default()
    };
    let mut model = ScorerModel::new(variant, inputs, &cfg).expect("model builds");
    model.attention.w_a.iter_mut().for_each(|w| *w *= 3.0);
    let batch: Vec<TrainPair> = (0..8)
        .map(|_| TrainPair {
            user: rng.gen_range(0..n_users),
            item: rng.gen_range(0..n_items),
            label: f64::from(rng.gen_bool(0.5)),
        })
        .collect();
    model.accumulate_gradients(&batch, None);

    let step = 1e-6;
    let mut worst: f64 = 0.0;
    let mut check = |set: &dyn Fn(&mut ScorerModel, f64), value: f64, analytic: f64| {
        let mut probe = model.clone();
        set(&mut probe, value + step);
        let up = reference_loss(&probe, &batch);
        set(&mut probe, value - step);
        let down = reference_loss(&probe, &batch);
        let numeric = (up - down) / (2.0 * step);
        let scale = numeric.abs().max(analytic.abs()).max(1e-6);
        worst = worst.max((numeric - analytic).abs() / scale);
    };
    if variant.uses_mlp() {
        for j in 0..model.mlp.w1.len() {
            check(&|m, v| m.mlp.w1[j] = v, model.mlp.w1[j], model.mlp.grad_w1[j]);
        }
        for k in 0..h {
            check(&|m, v| m.mlp.b1[k] = v, model.mlp.b1[k], model.mlp.grad_b1[k]);
            check(&|m, v| m.mlp.w2[k] = v, model.mlp.w2[k], model.mlp.grad_w2[k]);
        }
        check(&|m, v| m.mlp.b2 = v, model.mlp.b2, model.mlp.grad_b2);
    }
    if variant.uses_attention() {
        for j in 0..d {
            check(&|m, v| m.attention.w_a[j] = v, model.attention.w_a[j], model.attention.grad_w_a[j]);
        }
    }
    worst
}

#[test]
fn gradient_suite() {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut instances = 0;
    for variant in ScoringVariant::ALL {
        for seed in 0..24 {
            worst = worst.max(gradient_instance(variant, seed));
            instances += 1;
        }
    }
    let elapsed = start.elapsed();
    let pass = worst < 1e-4 && elapsed < Duration::from_secs(10);
    report(
        pass,
        "gradient suite",
        &format!(
            "{instances} instances over all five variants, worst relative error {worst:.2e}, {:.2}s",
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// Ranking metrics against a brute-force evaluator.

fn brute_ranking(scores: &[f64], excluded: &[bool]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).filter(|&i| !excluded[i]).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    order
}

fn brute_recall(ranking: &[usize], test: &[usize], k: usize) -> f64 {
    let top = &ranking[..k.min(ranking.len())];
    test.iter().filter(|t| top.contains(t)).count() as f64 / test.len() as f64
}

fn brute_ndcg(ranking: &[usize], test: &[usize], k: usize) -> f64 {
    let gain = |pos: usize| std::f64::consts::LN_2 / ((pos + 2) as f64).ln();
    let dcg: f64 = (0..k.min(ranking.len())).filter(|&p| test.contains(&ranking[p])).map(gain).sum();
    let ideal: f64 = (0..k.min(test.len())).map(gain).sum();
    dcg / ideal
}

struct FixedScores(Vec<Vec<f64>>);

impl Recommender for FixedScores {
    fn method(&self) -> String {
        "fixed".into()
    }

    fn score_all(&self, user: usize, out: &mut [f64]) {
        out.copy_from_slice(&self.0[user]);
    }
}

/// One randomized instance: a small split with tied scores, checked through
/// both the ranking kernels and the full evaluator. Returns mismatches.
fn metric_instance(seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_items = rng.gen_range(12..40);
    let n_users = rng.gen_range(1..5);
    let mut interactions = Vec::new();
    for u in 0..n_users {
        let n = rng.gen_range(4..=10);
        let mut items: Vec<usize> = (0..n_items).collect();
        for t in 0..n {
            let pick = items.swap_remove(rng.gen_range(0..items.len()));
            interactions.push(Interaction {
                user_id: format!("u{u}"),
                item_id: format!("i{pick:03}"),
                timestamp: t as i64 * 10 + rng.gen_range(0..3),
            });
        }
    }
    for i in 0..n_items {
        interactions.push(Interaction {
            user_id: "catalog".into(),
            item_id: format!("i{i:03}"),
            timestamp: i as i64,
        });
    }
    let histories = group_by_user(interactions);
    let split = temporal_split(&histories, &SplitConfig::default()).expect("split");
    let indexed = IndexedSplit::new(&split);
    let n = indexed.n_items();
    let scores: Vec<Vec<f64>> = (0..indexed.n_users())
        .map(|_| (0..n).map(|_| f64::from(rng.gen_range(0..6)) / 5.0).collect())
        .collect();
    let ks = [1, 3, 5, 10];
    let evaluated = evaluate(&FixedScores(scores.clone()), &indexed, &ks).expect("evaluate");
    let mut mismatches = 0;
    let mut reported = evaluated.per_user.iter();
    for (u, user) in indexed.users.iter().enumerate() {
        if user.test.is_empty() {
            continue;
        }
        let row = reported.next().expect("one row per user with test items");
        let mut excluded = vec![false; n];
        for &i in user.train.iter().chain(&user.validation) {
            excluded[i] = true;
        }
        let ranking = brute_ranking(&scores[u], &excluded);
        let test_set: HashSet<usize> = user.test.iter().copied().collect();
        for &k in &ks {
            let fast = top_k_indices(&scores[u], &excluded, k).expect("ranking");
            if fast != ranking[..k.min(ranking.len())] {
                mismatches += 1;
            }
            let recall = brute_recall(&ranking, &user.test, k);
            let ndcg = brute_ndcg(&ranking, &user.test, k);
            if recall_at_k(&fast, &test_set) != recall || row.metrics[&recall_key(k)] != recall {
                mismatches += 1;
            }
            let kernel = ndcg_at_k(&fast, &test_set, k);
            let via_report = row.metrics[&temporec::eval::ndcg_key(k)];
            if (kernel - ndcg).abs() > 1e-9 || (via_report - ndcg).abs() > 1e-9 {
                mismatches += 1;
            }
        }
    }
    mismatches
}

#[test]
fn metric_oracle_suite() {
    let start = Instant::now();
    let mismatches: usize = (0..200).map(metric_instance).sum();
    let single: HashSet<&str> = ["a"].into();
    let half = ndcg_at_k(&["x", "a"], &single, 2);
    let pair: HashSet<&str> = ["a", "b"].into();
    let mixed = ndcg_at_k(&["a", "x", "b"], &pair, 3);
    let worked = (half - 0.630_929_753_571_457_4).abs() < 1e-12 && (mixed - 1.5 / (1.0 + 1.0 / 3f64.log2())).abs() < 1e-12;
    let elapsed = start.elapsed();
    let pass = mismatches == 0 && worked && elapsed < Duration::from_secs(5);
    report(
        pass,
        "metric oracle suite",
        &format!(
            "200 instances, {mismatches} mismatches; 1/log2(3) = {half:.4}, two-hit example = {mixed:.5}; {:.2}s",
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// Attention invariants.

#[test]
fn attention_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut violations = 0;
    for case in 0..1000 {
        let d = rng.gen_range(1..=16);
        let scale = [0.1, 1.0, 10.0, 100.0][case % 4];
        let s: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0) * scale).collect();
        let l: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0) * scale).collect();
        let params = AttentionParams {
            w_a: (0..d).map(|_| rng.gen_range(-1.0..1.0) * scale).collect(),
            grad_w_a: vec![0.0; d],
        };
        let out = attention_forward(&s, &l, &params).expect("dims match");
        if out.alpha_short + out.alpha_long != 1.0 || !(0.0..=1.0).contains(&out.alpha_short) {
            violations += 1;
        }
        for j in 0..d {
            let (lo, hi) = (s[j].min(l[j]), s[j].max(l[j]));
            let tol = 1e-12 * hi.abs().max(lo.abs()).max(1.0);
            if out.e_u[j] < lo - tol || out.e_u[j] > hi + tol {
                violations += 1;
            }
        }
        let zero = AttentionParams::zeros(d);
        let even = attention_forward(&s, &l, &zero).expect("dims match");
        if even.alpha_short != 0.5 || even.alpha_long != 0.5 {
            violations += 1;
        }
        let shift = rng.gen_range(-50.0..50.0);
        let (a, b) = alphas_from_logits(out.short_logit, out.long_logit);
        let (sa, sb) = alphas_from_logits(out.short_logit + shift, out.long_logit + shift);
        if (a - sa).abs() > 1e-9 || (b - sb).abs() > 1e-9 {
            violations += 1;
        }
    }
    report(violations == 0, "attention invariants", &format!("1000 cases, {violations} violations"));
    assert_eq!(violations, 0);
}

// ---------------------------------------------------------------------------
// Temporal split leakage and negative purity.

#[test]
fn split_leakage_suite() {
    let data = generate(&SynthConfig {
        n_users: 1000,
        seed: 11,
        ..SynthConfig::default()
    })
    .expect("synth");
    let (split, _) = build_dataset(data.interactions, data.items, 0, &SplitConfig::default()).expect("split");
    let mut order_violations = 0;
    let mut contamination = 0;
    for (u, user) in split.users.iter().enumerate() {
        let max_train = user.train.iter().map(|i| i.timestamp).max();
        let min_val = user.validation.iter().map(|i| i.timestamp).min();
        let max_val = user.validation.iter().map(|i| i.timestamp).max();
        let min_test = user.test.iter().map(|i| i.timestamp).min();
        let later = |a: Option<i64>, b: Option<i64>| matches!((a, b), (Some(a), Some(b)) if a > b);
        if later(max_train, min_val) || later(max_val, min_test) || later(max_train, min_test) {
            order_violations += 1;
        }
        let seen: HashSet<&str> = user.all().map(|i| i.item_id.as_str()).collect();
        let negatives = sample_negatives(&split, &user.user_id, 4, u as u64).expect("negatives");
        contamination += negatives.iter().filter(|n| seen.contains(n.item_id.as_str())).count();
    }
    let indexed = IndexedSplit::new(&split);
    let cfg = TrainConfig::default();
    for epoch in 0..3 {
        for pair in epoch_pairs(&indexed, &cfg, epoch).iter().filter(|p| p.label == 0.0) {
            let user = &indexed.users[pair.user];
            if user.train.iter().chain(&user.validation).chain(&user.test).any(|&i| i == pair.item) {
                contamination += 1;
            }
        }
    }
    let pass = order_violations == 0 && contamination == 0 && split.users.len() == 1000;
    report(
        pass,
        "split leakage suite",
        &format!(
            "{} synthetic users, {order_violations} ordering violations, {contamination} contaminated negatives",
            split.users.len()
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// Directional reproduction on synthetic drift data.

const SEEDS: [u64; 3] = [0, 1, 2];

/// Configuration used for every reproduction run: the library defaults with
/// a batch of 256, which keeps enough optimizer steps per epoch at this
/// dataset size.
fn experiment_config(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.train.seed = seed;
    cfg.train.batch_size = 256;
    cfg
}

fn prepare(drift_prob: f64, seed: u64) -> Embedded {
    let data = generate(&SynthConfig {
        drift_prob,
        seed,
        ..SynthConfig::default()
    })
    .expect("synth");
    let cfg = experiment_config(seed);
    let (split, meta) = build_dataset(data.interactions, data.items, 0, &SplitConfig::default()).expect("split");
    let encoder = HashEncoder::new(384).expect("encoder");
    let cache = ProfileCache::in_memory();
    let generator = ProfileGenerator::with_builtin_templates(&TemplateBackend, &cache);
    let profiles = generate_profiles(&generator, &split, &meta, &cfg, 1).expect("profiles");
    let indexed = IndexedSplit::new(&split);
    let items = catalog_embeddings(&indexed, &meta, &encoder).expect("items");
    let encoded = encode_profiles(&profiles, &encoder).expect("profile embeddings");
    Embedded::new(indexed, items, encoded).expect("aligned embeddings")
}

const COMPARISON_RUNS: [Run; 3] = [
    Run::Method(Method::LlmTp),
    Run::Method(Method::Centric),
    Run::Method(Method::Popularity),
];

const VARIANT_RUNS: [Run; 4] = [
    Run::Variant(ScoringVariant::ShortOnly),
    Run::Variant(ScoringVariant::LongOnly),
    Run::Variant(ScoringVariant::GeneralOnly),
    Run::Variant(ScoringVariant::DotProduct),
];

const SCOMPARISON_RUNS: [Run; 2] = [Run::Method(Method::LlmTp), Run::Method(Method::Centric)];

struct Measured {
    /// Reports keyed by drift label and run name, one per seed in order.
    reports: BTreeMap<(&'static str, &'static str), Vec<EvalReport>>,
    /// Wall time of the method comparison phase: data generation, profiles,
    /// encoding, and training plus evaluation of LLM-TP, Centric and
    /// Popularity for every seed.
    table_time: Duration,
}

impl Measured {
    fn pooled(&self, drift: &'static str, run: &'static str) -> EvalReport {
        let per_seed: Vec<(String, EvalReport)> = SEEDS
            .iter()
            .zip(&self.reports[&(drift, run)])
            .map(|(s, r)| (format!("seed{s}"), r.clone()))
            .collect();
        EvalReport::pooled(&per_seed).expect("poolable")
    }

    fn mean(&self, drift: &'static str, run: &'static str, metric: &str) -> f64 {
        self.pooled(drift, run).aggregate[metric]
    }

    fn per_seed(&self, drift: &'static str, run: &'static str, metric: &str) -> String {
        let values: Vec<String> = self.reports[&(drift, run)]
            .iter()
            .map(|r| format!("{:.4}", r.aggregate[metric]))
            .collect();
        values.join("/")
    }
}

fn run_all(data: &Embedded, seed: u64, runs: &[Run]) -> Vec<(Run, EvalReport)> {
    let cfg = experiment_config(seed);
    runs.iter()
        .map(|&run| {
            let trained = train_run(data, run, &cfg).expect("training");
            let mut report = trained.evaluate(&data.split, &cfg.ks).expect("evaluation");
            report.method = run.name().to_owned();
            (run, report)
        })
        .collect()
}

/// Runs one closure per seed on its own thread and collects the results in
/// seed order.
fn per_seed<T: Send>(f: impl Fn(usize, u64) -> T + Sync) -> Vec<T> {
    std::thread::scope(|scope| {
        let handles: Vec<_> = SEEDS
            .iter()
            .enumerate()
            .map(|(i, &seed)| {
                let f = &f;
                scope.spawn(move || f(i, seed))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("experiment thread")).collect()
    })
}

fn measured() -> &'static Measured {
    static CELL: OnceLock<Measured> = OnceLock::new();
    CELL.get_or_init(|| {
        let start = Instant::now();
        let table: Vec<(Embedded, Vec<(Run, EvalReport)>)> = per_seed(|_, seed| {
            let data = prepare(0.8, seed);
            let reports = run_all(&data, seed, &COMPARISON_RUNS);
            (data, reports)
        });
        let table_time = start.elapsed();
        let rest: Vec<(Vec<(Run, EvalReport)>, Vec<(Run, EvalReport)>)> = per_seed(|i, seed| {
            let variants = run_all(&table[i].0, seed, &VARIANT_RUNS);
            let stable = run_all(&prepare(0.0, seed), seed, &SCOMPARISON_RUNS);
            (variants, stable)
        });
        let mut reports: BTreeMap<(&'static str, &'static str), Vec<EvalReport>> = BTreeMap::new();
        for ((_, table_runs), (variants, stable)) in table.into_iter().zip(rest) {
            for (run, report) in table_runs.into_iter().chain(variants) {
                reports.entry(("drift", run.name())).or_default().push(report);
            }
            for (run, report) in stable {
                reports.entry(("stable", run.name())).or_default().push(report);
            }
        }
        Measured { reports, table_time }
    })
}

#[test]
fn directional_comparison() {
    let m = measured();
    let r10 = recall_key(10);
    let llm = m.mean("drift", "llm_tp", &r10);
    let centric = m.mean("drift", "centric", &r10);
    let popularity = m.mean("drift", "popularity", &r10);
    let mut pooled = m.pooled("drift", "llm_tp");
    pooled.attach_significance(&m.pooled("drift", "centric"), 0.05).expect("paired test");
    let p = pooled.significance_for(&r10).expect("recall@10 tested").p_value;
    let minutes = m.table_time.as_secs_f64() / 60.0;
    let pass = llm > centric && llm > popularity && p < 0.05 && minutes < 5.0;
    report(
        pass,
        "directional method comparison (drift 0.8, seeds 0-2)",
        &format!(
            "Recall@10 LLM-TP {llm:.4} [{}] vs Centric {centric:.4} [{}] vs Popularity {popularity:.4}; \
             paired t-test p = {p:.3e}; wall time {minutes:.1} min",
            m.per_seed("drift", "llm_tp", &r10),
            m.per_seed("drift", "centric", &r10),
        ),
    );
}

#[test]
fn directional_ablation() {
    let m = measured();
    let r20 = recall_key(20);
    let full = m.mean("drift", "llm_tp", &r20);
    let variants = ["short_only", "long_only", "general_only", "dot_product"];
    let values: Vec<(&str, f64)> = variants.iter().map(|&v| (v, m.mean("drift", v, &r20))).collect();
    let pass = values.iter().all(|&(_, v)| full > v);
    let listing: Vec<String> = values.iter().map(|(n, v)| format!("{n} {v:.4}")).collect();
    report(
        pass,
        "directional ablation (Recall@20, mean of seeds 0-2)",
        &format!("full {full:.4} vs {}", listing.join(", ")),
    );
    let dp = values[3].1;
    let dp_worst = values[..3].iter().all(|&(_, v)| dp < v) && dp < full;
    verdict(
        "INFO",
        "dot-product worst among learned variants",
        &format!("{} (dot_product {dp:.4})", if dp_worst { "yes" } else { "no" }),
    );
}

#[test]
fn stability_gap_shrinks() {
    let m = measured();
    let r10 = recall_key(10);
    let drift_gap = m.mean("drift", "llm_tp", &r10) - m.mean("drift", "centric", &r10);
    let stable_gap = m.mean("stable", "llm_tp", &r10) - m.mean("stable", "centric", &r10);
    let detail = format!(
        "gap LLM-TP minus Centric: drift 0.8 {drift_gap:+.4}, drift 0 {stable_gap:+.4} \
         (stable LLM-TP [{}], Centric [{}])",
        m.per_seed("stable", "llm_tp", &r10),
        m.per_seed("stable", "centric", &r10),
    );
    if drift_gap > 0.0 {
        let ratio = stable_gap / drift_gap;
        let ok = ratio < 0.5;
        verdict(if ok { "PASS" } else { "WARN" }, "stability gap ratio (soft)", &format!("ratio {ratio:.3}; {detail}"));
    } else {
        verdict("WARN", "stability gap ratio (soft)", &format!("undefined, no positive gap under drift; {detail}"));
    }
}

// ---------------------------------------------------------------------------
// Pipeline determinism and offline completeness, through the binary.

const STAGES: [&str; 8] = ["synth", "ingest", "profile", "encode", "train", "evaluate", "ablate", "report"];

fn small_config(dir: &Path) -> PathBuf {
    let path = dir.join("config.json");
    let cfg = serde_json::json!({
        "dim": 64,
        "seeds": [3],
        "synth": {"n_users": 80, "n_items": 120, "seed": 3},
        "train": {"max_epochs": 4, "batch_size": 256, "hidden": 16},
    });
    std::fs::write(&path, cfg.to_string()).expect("config written");
    path
}

fn run_pipeline(dir: &Path) -> Vec<String> {
    let config = small_config(dir);
    let mut failures = Vec::new();
    for stage in STAGES {
        let out = Command::new(env!("CARGO_BIN_EXE_temporec"))
            .args([stage, "--config"])
            .arg(&config)
            .env("TEMPOREC_API_BASE", "http://127.0.0.1:9")
            .env("TEMPOREC_EMBED_BASE", "http://127.0.0.1:9")
            .env_remove("TEMPOREC_API_KEY")
            .output()
            .expect("binary runs");
        if !out.status.success() {
            failures.push(format!("{stage}: {}", String::from_utf8_lossy(&out.stderr).trim()));
        }
    }
    failures
}

/// Every file under `root` except wall-clock timings and the profile cache,
/// keyed by relative path.
fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).expect("readable dir") {
            let path = entry.expect("dir entry").path();
            let rel = path.strip_prefix(root).expect("under root").to_path_buf();
            if rel.starts_with("timings") || rel.starts_with("cache") {
                continue;
            }
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                out.insert(rel, std::fs::read(&path).expect("readable file"));
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

#[test]
fn pipeline_determinism() {
    let a = tempfile::tempdir().expect("tempdir");
    let b = tempfile::tempdir().expect("tempdir");
    let failures: Vec<String> = run_pipeline(a.path()).into_iter().chain(run_pipeline(b.path())).collect();
    assert!(failures.is_empty(), "pipeline failed: {failures:?}");
    let (sa, sb) = (snapshot(&a.path().join("run")), snapshot(&b.path().join("run")));
    let differing: Vec<&PathBuf> = sa.keys().filter(|k| sa.get(*k) != sb.get(*k)).collect();
    let count = |ext: &str| sa.keys().filter(|k| k.extension().is_some_and(|e| e == ext)).count();
    let pass = differing.is_empty() && sa.len() == sb.len() && count("tmlp") > 0;
    report(
        pass,
        "determinism",
        &format!(
            "{} artifacts compared ({} checkpoints, {} manifests and reports in JSON), {} differ",
            sa.len(),
            count("tmlp"),
            count("json"),
            differing.len()
        ),
    );
    assert!(pass, "differing artifacts: {differing:?}");
}

#[test]
fn offline_completeness() {
    let dir = tempfile::tempdir().expect("tempdir");
    let failures = run_pipeline(dir.path());
    let tables = ["comparison.txt", "ablation.txt"]
        .iter()
        .all(|t| dir.path().join("run/report").join(t).exists());
    let pass = failures.is_empty() && tables;
    report(
        pass,
        "offline completeness",
        &format!(
            "all {} stages with template profiles and hash encoder, remote endpoints unreachable: {}",
            STAGES.len(),
            if pass { "completed".to_owned() } else { format!("{failures:?}") }
        ),
    );
    assert!(pass);
}
