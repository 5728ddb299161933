//! Leave-one-out splitting, full-catalog ranking evaluation, ablation variants
//! and the source-noise robustness protocol.

use std::collections::HashSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::graph::{InteractionGraph, KnowledgeLinkage};
use crate::metrics::{aggregate, rank_of, Metric, RankingResult};
use crate::model::{infer, Inference, ModelParameters, TrainingData};
use crate::training::{fit, stream, FitOutcome};

const TAG_SPLIT: u64 = 11;

/// A held-out target-domain interaction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeldOut {
    pub user: usize,
    pub item: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub target_train: InteractionGraph,
    pub validation: Vec<HeldOut>,
    pub test: Vec<HeldOut>,
    /// Users without more than three interactions in both domains. They are
    /// not evaluated; their interactions stay in training.
    pub excluded: usize,
}

/// Holds out one validation and one test target interaction for every user
/// with more than three distinct items in both domains.
pub fn split_leave_one_out(source: &InteractionGraph, target: &InteractionGraph, seed: u64) -> Result<Split> {
    if source.user_count != target.user_count {
        return Err(Error::Shape {
            context: "split_leave_one_out users",
            expected: (source.user_count, 0),
            actual: (target.user_count, 0),
        });
    }
    let distinct = |g: &InteractionGraph| -> Vec<Vec<usize>> {
        let mut by_user = g.items_by_user();
        for items in &mut by_user {
            let mut seen = HashSet::new();
            items.retain(|i| seen.insert(*i));
        }
        by_user
    };
    let source_items = distinct(source);
    let target_items = distinct(target);
    let mut rng = stream(seed, TAG_SPLIT, 0, 0, 0);
    let mut held: HashSet<(usize, usize)> = HashSet::new();
    let mut validation = Vec::new();
    let mut test = Vec::new();
    let mut excluded = 0;
    for u in 0..target.user_count {
        if source_items[u].len() <= 3 || target_items[u].len() <= 3 {
            excluded += 1;
            continue;
        }
        let picked: Vec<usize> = target_items[u].choose_multiple(&mut rng, 2).copied().collect();
        validation.push(HeldOut {
            user: u,
            item: picked[0],
        });
        test.push(HeldOut {
            user: u,
            item: picked[1],
        });
        held.insert((u, picked[0]));
        held.insert((u, picked[1]));
    }
    let edges = target.edges.iter().copied().filter(|e| !held.contains(e)).collect();
    let (target_train, _) = InteractionGraph::new(target.domain, target.user_count, target.item_count, edges)?;
    Ok(Split {
        target_train,
        validation,
        test,
        excluded,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub ks: Vec<usize>,
    pub per_user: Vec<RankingResult>,
    /// `(metric, k, mean × 100)`.
    pub aggregates: Vec<(Metric, usize, f64)>,
}

impl EvalReport {
    pub fn aggregate(&self, metric: Metric, k: usize) -> Option<f64> {
        self.aggregates
            .iter()
            .find(|(m, kk, _)| *m == metric && *kk == k)
            .map(|t| t.2)
    }
}

/// Ranks each held-out item against every target item outside the user's
/// training set.
pub fn evaluate(inference: &Inference, train_positives: &[Vec<usize>], cases: &[HeldOut], ks: &[usize]) -> EvalReport {
    let per_user: Vec<RankingResult> = cases
        .par_iter()
        .map(|c| {
            let scores = inference.scores(c.user);
            let rank = rank_of(&scores, c.item, &train_positives[c.user]);
            RankingResult::new(c.user, c.item, rank, ks)
        })
        .collect();
    let aggregates = aggregate(&per_user, ks);
    EvalReport {
        ks: ks.to_vec(),
        per_user,
        aggregates,
    }
}

/// Adds `ceil(ratio · |E|)` uniformly drawn user–item pairs that are not
/// already edges. Existing edges keep their order and come first.
pub fn inject_source_noise<R: Rng + ?Sized>(
    graph: &InteractionGraph,
    ratio: f64,
    rng: &mut R,
) -> Result<InteractionGraph> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::invalid("ratio", format!("must lie in [0, 1], got {ratio}")));
    }
    let existing: HashSet<(usize, usize)> = graph.edges.iter().copied().collect();
    let wanted = (ratio * existing.len() as f64 - 1e-9).ceil().max(0.0) as usize;
    let total = graph.user_count * graph.item_count;
    let free = total - existing.len();
    if wanted > free {
        return Err(Error::Infeasible(format!(
            "{wanted} noise edges requested but only {free} free pairs remain"
        )));
    }
    let mut added = Vec::with_capacity(wanted);
    if wanted > 0 && wanted * 2 > free {
        let mut pool: Vec<(usize, usize)> = (0..graph.user_count)
            .flat_map(|u| (0..graph.item_count).map(move |i| (u, i)))
            .filter(|e| !existing.contains(e))
            .collect();
        pool.shuffle(rng);
        pool.truncate(wanted);
        added = pool;
    } else {
        let mut seen = existing.clone();
        while added.len() < wanted {
            let e = (
                rng.random_range(0..graph.user_count),
                rng.random_range(0..graph.item_count),
            );
            if seen.insert(e) {
                added.push(e);
            }
        }
    }
    let mut edges = graph.edges.clone();
    edges.extend(added);
    let (out, _) = InteractionGraph::new(graph.domain, graph.user_count, graph.item_count, edges)?;
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    NoPredS,
    NoKl,
    NoCl,
    NoKg,
    /// Single-domain LightGCN on the target interactions, item ID embeddings.
    TargetOnly,
    /// Target-only, but keeping the entity bridge in the target encoder.
    TargetOnlyKg,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::NoPredS,
        Variant::NoKl,
        Variant::NoCl,
        Variant::NoKg,
        Variant::TargetOnly,
        Variant::TargetOnlyKg,
    ];

    /// The configuration this variant trains with.
    pub fn apply(self, cfg: &TrainConfig) -> TrainConfig {
        let mut cfg = cfg.clone();
        match self {
            Variant::Full => {}
            Variant::NoPredS => cfg.alphas.source_pred = 0.0,
            Variant::NoKl => cfg.alphas.kl = 0.0,
            Variant::NoCl => cfg.alphas.contrast = 0.0,
            Variant::NoKg => cfg.use_kg = false,
            Variant::TargetOnly => {
                cfg.target_only = true;
                cfg.use_kg = false;
            }
            Variant::TargetOnlyKg => cfg.target_only = true,
        }
        cfg
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.to_string() == s)
            .ok_or_else(|| Error::invalid("variant", format!("unknown variant {s:?}")))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Full => "full",
            Variant::NoPredS => "no-pred-s",
            Variant::NoKl => "no-kl",
            Variant::NoCl => "no-cl",
            Variant::NoKg => "no-kg",
            Variant::TargetOnly => "target-only",
            Variant::TargetOnlyKg => "target-only-kg",
        })
    }
}

/// Everything a training run needs besides the configuration.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub source: InteractionGraph,
    pub split: Split,
    pub kg: KnowledgeLinkage,
}

impl Experiment {
    pub fn new(
        source: InteractionGraph,
        target: &InteractionGraph,
        kg: KnowledgeLinkage,
        split_seed: u64,
    ) -> Result<Self> {
        let split = split_leave_one_out(&source, target, split_seed)?;
        Ok(Experiment { source, split, kg })
    }

    pub fn training_data(&self, cfg: &TrainConfig) -> Result<TrainingData> {
        TrainingData::new(&self.source, &self.split.target_train, &self.kg, cfg.use_kg)
    }

    /// Same split and KG with a different source graph.
    pub fn with_source(&self, source: InteractionGraph) -> Self {
        Experiment {
            source,
            split: self.split.clone(),
            kg: self.kg.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub config: TrainConfig,
    pub fit: FitOutcome,
    pub test: EvalReport,
}

pub fn test_report(
    params: &ModelParameters,
    data: &TrainingData,
    cfg: &TrainConfig,
    test: &[HeldOut],
    ks: &[usize],
) -> Result<EvalReport> {
    let inference = infer(params, data, cfg)?;
    Ok(evaluate(&inference, &data.target.positives, test, ks))
}

/// Fits on the experiment and evaluates the best parameters on the test cases.
pub fn run(cfg: &TrainConfig, experiment: &Experiment, ks: &[usize]) -> Result<RunResult> {
    let data = experiment.training_data(cfg)?;
    let fit = fit(cfg, &data, &experiment.split.validation, |_| {})?;
    let test = test_report(&fit.best, &data, cfg, &experiment.split.test, ks)?;
    Ok(RunResult {
        config: cfg.clone(),
        fit,
        test,
    })
}

pub fn run_ablation(variant: Variant, cfg: &TrainConfig, experiment: &Experiment, ks: &[usize]) -> Result<RunResult> {
    run(&variant.apply(cfg), experiment, ks)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessPoint {
    pub variant: Variant,
    pub ratio: f64,
    pub ndcg10: f64,
    /// `(clean - noisy) / clean`; zero at ratio 0.
    pub degradation: f64,
}

/// Trains each variant on the clean source graph and on copies with injected
/// noise at every ratio, reporting NDCG@10 on the test cases.
pub fn robustness_sweep(
    cfg: &TrainConfig,
    experiment: &Experiment,
    variants: &[Variant],
    ratios: &[f64],
    noise_seed: u64,
) -> Result<Vec<RobustnessPoint>> {
    let mut noisy = Vec::with_capacity(ratios.len());
    for (n, &ratio) in ratios.iter().enumerate() {
        let mut rng = stream(noise_seed, TAG_SPLIT + 1, n as u64, 0, 0);
        let source = inject_source_noise(&experiment.source, ratio, &mut rng)?;
        noisy.push((ratio, experiment.with_source(source)));
    }
    let mut points = Vec::new();
    for &variant in variants {
        let clean = run_ablation(variant, cfg, experiment, &[10])?
            .test
            .aggregate(Metric::Ndcg, 10)
            .unwrap_or(0.0);
        points.push(RobustnessPoint {
            variant,
            ratio: 0.0,
            ndcg10: clean,
            degradation: 0.0,
        });
        for (ratio, exp) in &noisy {
            if *ratio == 0.0 {
                continue;
            }
            let v = run_ablation(variant, cfg, exp, &[10])?
                .test
                .aggregate(Metric::Ndcg, 10)
                .unwrap_or(0.0);
            let degradation = if clean > 0.0 { (clean - v) / clean } else { 0.0 };
            points.push(RobustnessPoint {
                variant,
                ratio: *ratio,
                ndcg10: v,
                degradation,
            });
        }
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Domain;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn graph(domain: Domain, users: usize, items: usize, per_user: &[usize]) -> InteractionGraph {
        let edges = per_user
            .iter()
            .enumerate()
            .flat_map(|(u, &n)| (0..n).map(move |i| (u, i)))
            .collect();
        InteractionGraph::new(domain, users, items, edges).unwrap().0
    }

    #[test]
    fn split_thresholds() {
        let s = graph(Domain::Source, 3, 10, &[4, 4, 4]);
        let t = graph(Domain::Target, 3, 10, &[4, 3, 6]);
        let split = split_leave_one_out(&s, &t, 5).unwrap();
        assert_eq!(split.excluded, 1);
        assert_eq!(split.validation.len(), 2);
        let train = split.target_train.items_by_user();
        assert_eq!(train[0].len(), 2);
        assert_eq!(train[1].len(), 3);
        assert_eq!(train[2].len(), 4);
        for (v, t) in split.validation.iter().zip(&split.test) {
            assert_ne!(v.item, t.item);
            assert!(!train[v.user].contains(&v.item) && !train[t.user].contains(&t.item));
        }
        assert_eq!(split, split_leave_one_out(&s, &t, 5).unwrap());
    }

    #[test]
    fn noise_counts() {
        let g = graph(Domain::Source, 50, 40, &[20; 50]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(inject_source_noise(&g, 0.0, &mut rng).unwrap(), g);
        let noisy = inject_source_noise(&g, 0.1, &mut rng).unwrap();
        assert_eq!(noisy.edges.len(), 1100);
        assert_eq!(noisy.edges[..1000], g.edges[..]);
        let unique: HashSet<_> = noisy.edges.iter().collect();
        assert_eq!(unique.len(), 1100);
        let full = inject_source_noise(&g, 1.0, &mut rng).unwrap();
        assert_eq!(full.edges.len(), 2000);
        assert!(inject_source_noise(&full, 1.0, &mut rng).is_err());
        assert!(inject_source_noise(&g, 1.5, &mut rng).is_err());
    }

    #[test]
    fn variant_names_roundtrip() {
        for v in Variant::ALL {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
        assert!("bogus".parse::<Variant>().is_err());
        let cfg = Variant::NoKl.apply(&TrainConfig::default());
        assert_eq!(cfg.alphas.kl, 0.0);
    }
}
