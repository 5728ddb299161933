//! Acceptance criteria, one `[PASS]`/`[FAIL]`/`[SKIP]` line each. The process
//! exits non-zero if any criterion that ran failed.
//!
//! The synthetic end-to-end criteria (6, 7) train dozens of models and only run
//! when asked: `cargo test --release -p cotrans-core --test acceptance -- --ignored`.

mod common;

use std::time::Instant;

use cotrans_core::compression::{gumbel_sigmoid, l_kl, sigmoid, BatchStats};
use cotrans_core::config::TrainConfig;
use cotrans_core::data::{generate_synthetic, load_bundle, DatasetPaths, SynthSpec};
use cotrans_core::encoder::{propagate, Readout};
use cotrans_core::evaluation::{robustness_sweep, run_ablation, Experiment, Variant};
use cotrans_core::graph::{normalize_symmetric, SparseGraph};
use cotrans_core::metrics::{rank_of, Metric, RankingResult};
use cotrans_core::model::TrainingData;
use cotrans_core::training::{fit, gradient_check, write_checkpoint};
use cotrans_core::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(id: &str, name: &str, pass: bool, detail: String) {
    let tag = if pass { "PASS" } else { "FAIL" };
    println!("[{tag}] {id} {name}: {detail}");
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn c1_gradient_exactness() -> bool {
    const WANTED: usize = 100;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut smooth, mut skipped, mut worst) = (0, 0, 0.0f64);
    while smooth < WANTED && smooth + skipped < 4 * WANTED {
        let inst = common::random_instance(&mut rng, true, false);
        let r = gradient_check(
            &inst.params,
            &inst.data,
            &inst.cfg,
            &inst.batch,
            &inst.draws,
            1e-5,
            1e-6,
        )
        .unwrap();
        if r.non_smooth {
            skipped += 1;
            continue;
        }
        smooth += 1;
        worst = worst.max(r.max_rel_error);
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = smooth == WANTED && worst <= 1e-4 && secs < 60.0;
    report(
        "1",
        "gradient exactness",
        pass,
        format!(
            "max rel err {worst:.2e} over {smooth} instances (tol 1e-4), {skipped} clamp-boundary instances skipped, {secs:.1}s (limit 60s)"
        ),
    );
    pass
}

/// Independent dense oracle: `(D^-1/2 A D^-1/2)^L E0` built from the raw edge list.
fn dense_power(n: usize, edges: &[(usize, usize)], e0: &Matrix, layers: usize) -> Matrix {
    let mut a = vec![vec![0.0f64; n]; n];
    for &(x, y) in edges {
        if x != y {
            a[x][y] = 1.0;
            a[y][x] = 1.0;
        }
    }
    let deg: Vec<f64> = a.iter().map(|r| r.iter().sum()).collect();
    let mut norm = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            if a[i][j] != 0.0 {
                norm[i][j] = 1.0 / (deg[i] * deg[j]).sqrt();
            }
        }
    }
    let d = e0.cols();
    let mut cur: Vec<Vec<f64>> = (0..n).map(|i| e0.row(i).to_vec()).collect();
    for _ in 0..layers {
        let mut next = vec![vec![0.0; d]; n];
        for i in 0..n {
            for j in 0..n {
                if norm[i][j] != 0.0 {
                    for k in 0..d {
                        next[i][k] += norm[i][j] * cur[j][k];
                    }
                }
            }
        }
        cur = next;
    }
    Matrix::from_rows(&cur).unwrap()
}

fn c2_encoder_matches_dense_oracle() -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst = 0.0f64;
    let mut cases = 0;
    for _ in 0..50 {
        let users = rng.random_range(1..=15);
        let items = rng.random_range(1..=15);
        let entities = rng.random_range(0..=20);
        let n = users + items + entities;
        let edge_count = rng.random_range(0..=3 * n);
        let edges: Vec<(usize, usize)> = (0..edge_count)
            .map(|_| (rng.random_range(0..n), rng.random_range(0..n)))
            .collect();
        let (adj, _) = SparseGraph::from_undirected(users, items, entities, &edges).unwrap();
        let graph = normalize_symmetric(&adj);
        let e0 = Matrix::random_normal(n, 4, 1.0, &mut rng);
        for layers in 0..=3 {
            let state = propagate(&graph, &e0, layers, Readout::Last).unwrap();
            let oracle = dense_power(n, &edges, &e0, layers).slice_rows(0, users + items);
            worst = worst.max(state.z.max_abs_diff(&oracle).unwrap());
            cases += 1;
        }
    }
    let pass = worst <= 1e-10;
    report(
        "2",
        "encoder oracle equivalence",
        pass,
        format!("max abs diff {worst:.2e} over {cases} (graph, L) cases (tol 1e-10)"),
    );
    pass
}

fn c3_kl_bound_exceeds_gaussian_kl_by_half() -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let lambda: f64 = rng.random_range(0.001..0.999);
        let h: f64 = rng.random_range(-5.0..5.0);
        let mu: f64 = rng.random_range(-3.0..3.0);
        let sigma: f64 = rng.random_range(0.05..4.0);
        let stats = BatchStats {
            mean: vec![mu],
            std: vec![sigma],
        };
        let bound = l_kl(&[lambda], &Matrix::from_rows(&[vec![h]]).unwrap(), &stats, 1e-12)
            .unwrap()
            .value;
        let m1 = lambda * h + (1.0 - lambda) * mu;
        let s1 = (1.0 - lambda) * sigma;
        let kl = (sigma / s1).ln() + (s1 * s1 + (m1 - mu).powi(2)) / (2.0 * sigma * sigma) - 0.5;
        worst = worst.max((bound - kl - 0.5).abs());
    }
    let pass = worst <= 1e-10;
    report(
        "3",
        "KL bound vs closed form",
        pass,
        format!("max |bound - KL - 0.5| = {worst:.2e} over 1000 draws (tol 1e-10)"),
    );
    pass
}

fn c4_gumbel_sigmoid_frequencies() -> bool {
    const DRAWS: usize = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let z: f64 = rng.random_range(-4.0..4.0);
        let mut above = 0usize;
        for _ in 0..DRAWS {
            let m = loop {
                let m: f64 = rng.random();
                if m > 0.0 {
                    break m;
                }
            };
            if gumbel_sigmoid(z, m, 0.05).unwrap() > 0.5 {
                above += 1;
            }
        }
        worst = worst.max((above as f64 / DRAWS as f64 - sigmoid(z)).abs());
    }
    let pass = worst <= 0.01;
    report(
        "4",
        "Gumbel-sigmoid frequencies",
        pass,
        format!("max |freq - sigmoid(z)| = {worst:.4} over 20 logits x 1e5 draws at t=0.05 (tol 0.01)"),
    );
    pass
}

fn c5_metrics_match_brute_force() -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ks = [10, 100];
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = rng.random_range(2..=400);
        // Coarse rounding forces ties.
        let scores: Vec<f64> = (0..n)
            .map(|_| (rng.random_range(-3.0..3.0f64) * 8.0).round() / 8.0)
            .collect();
        let held_out = rng.random_range(0..n);
        let mut excluded: Vec<usize> = (0..n).filter(|&i| i != held_out && rng.random_bool(0.2)).collect();
        excluded.sort_unstable();

        let mut candidates: Vec<usize> = (0..n).filter(|i| excluded.binary_search(i).is_err()).collect();
        candidates.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        let rank = candidates.iter().position(|&i| i == held_out).unwrap() + 1;

        let result = RankingResult::new(0, held_out, rank_of(&scores, held_out, &excluded), &ks);
        for k in ks {
            let hit = if rank <= k { 1.0 } else { 0.0 };
            let expect = [
                (Metric::Ndcg, hit / ((rank + 1) as f64).log2()),
                (Metric::Hit, hit),
                (Metric::Mrr, hit / rank as f64),
            ];
            for (m, v) in expect {
                if result.get(m, k) != Some(v) {
                    mismatches += 1;
                }
            }
        }
    }
    let pass = mismatches == 0;
    report(
        "5",
        "metric identities",
        pass,
        format!("{mismatches} mismatches over 1000 score vectors x 3 metrics x k in {{10, 100}} (exact)"),
    );
    pass
}

/// Training preset for the synthetic end-to-end criteria.
fn synthetic_preset(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 64,
        max_epochs: 1000,
        learning_rate: 0.5,
        patience: 150,
        seed,
        ..TrainConfig::default()
    }
}

const SYNTH_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

fn synthetic_experiment(seed: u64) -> Experiment {
    let synth = generate_synthetic(&SynthSpec {
        seed,
        ..SynthSpec::default()
    })
    .unwrap();
    let b = synth.bundle;
    Experiment::new(b.source, &b.target, b.kg, seed).unwrap()
}

fn c6_synthetic_end_to_end_gain() -> bool {
    let variants = [Variant::Full, Variant::TargetOnly, Variant::NoKl, Variant::TargetOnlyKg];
    let mut scores = vec![Vec::new(); variants.len()];
    let mut slowest = 0.0f64;
    for seed in SYNTH_SEEDS {
        let exp = synthetic_experiment(seed);
        for (v, out) in variants.iter().zip(scores.iter_mut()) {
            let start = Instant::now();
            let r = run_ablation(*v, &synthetic_preset(seed), &exp, &[10]).unwrap();
            slowest = slowest.max(start.elapsed().as_secs_f64());
            let ndcg = r.test.aggregate(Metric::Ndcg, 10).unwrap();
            println!(
                "    seed {seed} {v}: NDCG@10 {ndcg:.3} (best epoch {})",
                r.fit.best_epoch
            );
            out.push(ndcg);
        }
    }
    let med: Vec<f64> = scores.into_iter().map(median).collect();
    let (full, target_only, no_kl, target_only_kg) = (med[0], med[1], med[2], med[3]);
    let a = full > target_only;
    let b = full > no_kl;
    let timing = slowest < 300.0;
    report(
        "6a",
        "synthetic gain over target-only",
        a,
        format!("median NDCG@10 full {full:.3} vs target-only {target_only:.3}"),
    );
    report(
        "6b",
        "synthetic gain over no-kl",
        b,
        format!("median NDCG@10 full {full:.3} vs no-kl {no_kl:.3}"),
    );
    report(
        "6t",
        "synthetic run time",
        timing,
        format!("slowest run {slowest:.1}s (limit 300s)"),
    );
    println!("    (diagnostic) target-only with the entity bridge: median NDCG@10 {target_only_kg:.3}");
    a && b && timing
}

fn c7_robustness_ordering() -> bool {
    let ratios = [0.05, 0.10, 0.15, 0.20];
    let mut full_deg = Vec::new();
    let mut no_kl_deg = Vec::new();
    for seed in SYNTH_SEEDS {
        let exp = synthetic_experiment(seed);
        let points = robustness_sweep(
            &synthetic_preset(seed),
            &exp,
            &[Variant::Full, Variant::NoKl],
            &ratios,
            seed,
        )
        .unwrap();
        for p in &points {
            println!(
                "    seed {seed} {} ratio {:.2}: NDCG@10 {:.3}, degradation {:.4}",
                p.variant, p.ratio, p.ndcg10, p.degradation
            );
        }
        let at = |v: Variant| {
            points
                .iter()
                .find(|p| p.variant == v && (p.ratio - 0.20).abs() < 1e-12)
                .unwrap()
                .degradation
        };
        full_deg.push(at(Variant::Full));
        no_kl_deg.push(at(Variant::NoKl));
    }
    let (full, no_kl) = (median(full_deg), median(no_kl_deg));
    let pass = full <= no_kl;
    report(
        "7",
        "robustness ordering",
        pass,
        format!("median relative NDCG@10 degradation at ratio 0.20: full {full:.4} vs no-kl {no_kl:.4}"),
    );
    pass
}

fn c8_checkpoints_are_byte_identical() -> bool {
    let synth = generate_synthetic(&SynthSpec {
        users: 60,
        source_items: 40,
        target_items: 40,
        source_per_user: 8,
        target_per_user: 5,
        seed: 8,
        ..SynthSpec::default()
    })
    .unwrap();
    let b = synth.bundle;
    let exp = Experiment::new(b.source, &b.target, b.kg, 8).unwrap();
    let cfg = TrainConfig {
        embedding_dim: 8,
        batch_size: 16,
        max_epochs: 3,
        learning_rate: 0.1,
        seed: 8,
        ..TrainConfig::default()
    };
    let bytes = || {
        let data: TrainingData = exp.training_data(&cfg).unwrap();
        let outcome = fit(&cfg, &data, &exp.split.validation, |_| {}).unwrap();
        let mut out = Vec::new();
        write_checkpoint(&outcome.best, &mut out).unwrap();
        out
    };
    let (first, second) = (bytes(), bytes());
    let pass = first == second;
    report(
        "8",
        "determinism",
        pass,
        format!("two runs, {} checkpoint bytes each, identical: {pass}", first.len()),
    );
    pass
}

fn c9_loader_sanity() -> bool {
    let Some(dir) = std::env::var_os("COTRANS_AMAZON_DIR") else {
        println!("[SKIP] 9 loader sanity: COTRANS_AMAZON_DIR not set");
        return true;
    };
    let paths = DatasetPaths::in_dir(std::path::Path::new(&dir));
    let (bundle, _) = load_bundle(&paths, 1).unwrap();
    let users = bundle.users.len();
    let mut items = [bundle.source_items.len(), bundle.target_items.len()];
    items.sort_unstable();
    let pass = users == 11_240 && items == [16_100, 47_377];
    report(
        "9",
        "loader sanity",
        pass,
        format!(
            "{users} users, {} / {} items (want 11240 users, 16100 / 47377 items)",
            items[0], items[1]
        ),
    );
    pass
}

type Criterion = (&'static str, fn() -> bool);

const FAST: [Criterion; 7] = [
    ("c1_gradient_exactness", c1_gradient_exactness),
    ("c2_encoder_matches_dense_oracle", c2_encoder_matches_dense_oracle),
    (
        "c3_kl_bound_exceeds_gaussian_kl_by_half",
        c3_kl_bound_exceeds_gaussian_kl_by_half,
    ),
    ("c4_gumbel_sigmoid_frequencies", c4_gumbel_sigmoid_frequencies),
    ("c5_metrics_match_brute_force", c5_metrics_match_brute_force),
    ("c8_checkpoints_are_byte_identical", c8_checkpoints_are_byte_identical),
    ("c9_loader_sanity", c9_loader_sanity),
];

const HEAVY: [Criterion; 2] = [
    ("c6_synthetic_end_to_end_gain", c6_synthetic_end_to_end_gain),
    ("c7_robustness_ordering", c7_robustness_ordering),
];

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        for (name, _) in FAST.iter().chain(&HEAVY) {
            println!("{name}: test");
        }
        return;
    }
    let heavy = args.iter().any(|a| a == "--ignored" || a == "--include-ignored");
    let filters: Vec<&String> = args.iter().filter(|a| !a.starts_with('-')).collect();
    let selected = |name: &str| filters.is_empty() || filters.iter().any(|f| name.contains(f.as_str()));

    let mut failed = Vec::new();
    for (name, run) in FAST {
        if selected(name) && !run() {
            failed.push(name);
        }
    }
    for (name, run) in HEAVY {
        if !selected(name) {
            continue;
        }
        if heavy {
            if !run() {
                failed.push(name);
            }
        } else {
            println!("[SKIP] {name}: trains many synthetic models; run with -- --ignored");
        }
    }
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
