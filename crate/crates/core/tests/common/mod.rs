#![allow(dead_code)]

use cotrans_core::compression::CompressionConfig;
use cotrans_core::config::TrainConfig;
use cotrans_core::graph::{Domain, InteractionGraph, KnowledgeLinkage};
use cotrans_core::model::{Batch, Draws, ModelParameters, Pair, TrainingData};
use cotrans_core::training::step_draws;
use rand::Rng;

/// A random small model instance: at most 16 users, `d = 8`, and each domain
/// graph below 100 nodes.
pub struct Instance {
    pub data: TrainingData,
    pub cfg: TrainConfig,
    pub params: ModelParameters,
    pub batch: Batch,
    pub draws: Draws,
}

fn random_edges<R: Rng>(rng: &mut R, users: usize, items: usize, per_user: usize) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for u in 0..users {
        for _ in 0..rng.random_range(1..=per_user) {
            edges.push((u, rng.random_range(0..items)));
        }
    }
    edges
}

pub fn random_instance<R: Rng>(rng: &mut R, use_kg: bool, target_only: bool) -> Instance {
    let users = rng.random_range(3..=16);
    let source_items = rng.random_range(3..=20);
    let target_items = rng.random_range(3..=20);
    let entities = rng.random_range(2..=12);
    let (source, _) = InteractionGraph::new(
        Domain::Source,
        users,
        source_items,
        random_edges(rng, users, source_items, 4),
    )
    .unwrap();
    let (target, _) = InteractionGraph::new(
        Domain::Target,
        users,
        target_items,
        random_edges(rng, users, target_items, 3),
    )
    .unwrap();
    let links = |rng: &mut R, items: usize| -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..items {
            if rng.random_bool(0.8) {
                out.push((i, rng.random_range(0..entities)));
            }
        }
        out
    };
    let mut entity_edges = Vec::new();
    for _ in 0..entities {
        entity_edges.push((rng.random_range(0..entities), rng.random_range(0..entities)));
    }
    let source_links = links(rng, source_items);
    let target_links = links(rng, target_items);
    let kg = KnowledgeLinkage {
        entity_count: entities,
        entity_edges,
        source_items: source_links,
        target_items: target_links,
    };
    let data = TrainingData::new(&source, &target, &kg, use_kg).unwrap();
    let cfg = TrainConfig {
        embedding_dim: 8,
        layers: rng.random_range(1..=3),
        init_std: 0.5,
        target_only,
        compression: CompressionConfig {
            hidden: 6,
            ..Default::default()
        },
        ..Default::default()
    };
    let params = ModelParameters::init(&data, &cfg, rng);
    let batch_users: Vec<usize> = (0..users).filter(|_| rng.random_bool(0.8)).collect();
    let batch_users = if batch_users.len() < 2 { vec![0, 1] } else { batch_users };
    let pairs = |rng: &mut R, positives: &[Vec<usize>], items: usize| -> Vec<Pair> {
        batch_users
            .iter()
            .enumerate()
            .filter(|(_, &u)| !positives[u].is_empty())
            .map(|(row, &u)| Pair {
                row,
                pos: positives[u][rng.random_range(0..positives[u].len())],
                neg: rng.random_range(0..items),
            })
            .collect()
    };
    let batch = Batch {
        target_pairs: pairs(rng, &data.target.positives, target_items),
        source_pairs: pairs(rng, &data.source.positives, source_items),
        users: batch_users,
    };
    let draws = step_draws(rng.random(), 0, 0, &batch.users, 8);
    Instance {
        data,
        cfg,
        params,
        batch,
        draws,
    }
}
