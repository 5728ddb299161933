//! File ingestion with string-to-index maps, bundle writing, and the
//! synthetic cross-domain generator.
//!
//! Interaction files hold `user<TAB>item` lines, item maps `item<TAB>entity`,
//! and the KG either `head<TAB>tail` or `head<TAB>relation<TAB>tail`. Blank
//! lines and lines starting with `#` are skipped.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::distr::{Distribution, Open01};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::graph::{Domain, InteractionGraph, KnowledgeLinkage};
use crate::training::stream;

/// Dense indices assigned to string IDs in first-seen order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IdMap {
    ids: Vec<String>,
    index: HashMap<String, usize>,
}

impl IdMap {
    pub fn new() -> Self {
        IdMap::default()
    }

    pub fn insert(&mut self, id: &str) -> usize {
        if let Some(&i) = self.index.get(id) {
            return i;
        }
        let i = self.ids.len();
        self.ids.push(id.to_string());
        self.index.insert(id.to_string(), i);
        i
    }

    pub fn get(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn id(&self, index: usize) -> &str {
        &self.ids[index]
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// `id<TAB>index` per line, in index order.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (i, id) in self.ids.iter().enumerate() {
            let _ = writeln!(out, "{id}\t{i}");
        }
        out
    }

    pub fn from_tsv(path: &Path) -> Result<Self> {
        let rows = read_rows(path, &[2])?;
        let mut map = IdMap::new();
        let mut errors = Vec::new();
        for (line, cols) in rows {
            match cols[1].parse::<usize>() {
                Ok(i) if i == map.len() && map.get(&cols[0]).is_none() => {
                    map.insert(&cols[0]);
                }
                _ => errors.push(format!("line {line}: expected next index {}", map.len())),
            }
        }
        if !errors.is_empty() {
            return Err(parse_error(path, errors));
        }
        Ok(map)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub source: InteractionGraph,
    pub target: InteractionGraph,
    pub kg: KnowledgeLinkage,
    pub users: IdMap,
    pub source_items: IdMap,
    pub target_items: IdMap,
    pub entities: IdMap,
}

impl DatasetBundle {
    pub fn item_map(&self, domain: Domain) -> &IdMap {
        match domain {
            Domain::Source => &self.source_items,
            Domain::Target => &self.target_items,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct DatasetPaths {
    pub source: PathBuf,
    pub target: PathBuf,
    pub kg: Option<PathBuf>,
    pub map_source: Option<PathBuf>,
    pub map_target: Option<PathBuf>,
    /// Directory with persisted `users.tsv`, `source_items.tsv`,
    /// `target_items.tsv` and `entities.tsv`; when present they fix indices.
    pub id_maps: Option<PathBuf>,
}

impl DatasetPaths {
    /// Standard file names inside a bundle directory.
    pub fn in_dir(dir: &Path) -> Self {
        let opt = |name: &str| {
            let p = dir.join(name);
            p.exists().then_some(p)
        };
        DatasetPaths {
            source: dir.join("source.tsv"),
            target: dir.join("target.tsv"),
            kg: opt("kg.tsv"),
            map_source: opt("map_source.tsv"),
            map_target: opt("map_target.tsv"),
            id_maps: dir.join("users.tsv").exists().then(|| dir.to_path_buf()),
        }
    }

    pub fn files(&self) -> Vec<&Path> {
        let mut out = vec![self.source.as_path(), self.target.as_path()];
        out.extend(
            [&self.kg, &self.map_source, &self.map_target]
                .into_iter()
                .flatten()
                .map(PathBuf::as_path),
        );
        out
    }
}

/// Counts of input lines that did not become edges.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub source_lines: usize,
    pub target_lines: usize,
    pub dropped_users: usize,
    /// Interaction lines belonging to users present in only one domain.
    pub dropped_edges: usize,
    pub duplicate_edges: usize,
    /// KG entities outside the hop radius of any item-linked entity.
    pub scoped_out_entities: usize,
}

fn parse_error(path: &Path, errors: Vec<String>) -> Error {
    let shown = errors.len().min(20);
    let mut report = errors[..shown].join("; ");
    if errors.len() > shown {
        let _ = write!(report, "; and {} more", errors.len() - shown);
    }
    Error::Parse {
        path: path.to_path_buf(),
        report,
    }
}

/// Reads tab-separated rows whose column count is one of `widths`. Returns
/// 1-based line numbers with the fields.
fn read_rows(path: &Path, widths: &[usize]) -> Result<Vec<(usize, Vec<String>)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    let mut errors = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<String> = line.split('\t').map(|c| c.trim().to_string()).collect();
        if !widths.contains(&cols.len()) || cols.iter().any(String::is_empty) {
            errors.push(format!(
                "line {}: expected {} tab-separated fields, got {:?}",
                n + 1,
                widths.iter().map(usize::to_string).collect::<Vec<_>>().join(" or "),
                line
            ));
            continue;
        }
        rows.push((n + 1, cols));
    }
    if !errors.is_empty() {
        return Err(parse_error(path, errors));
    }
    Ok(rows)
}

fn read_pairs(path: &Path) -> Result<Vec<(String, String)>> {
    Ok(read_rows(path, &[2])?
        .into_iter()
        .map(|(_, mut c)| {
            let b = c.pop().unwrap_or_default();
            let a = c.pop().unwrap_or_default();
            (a, b)
        })
        .collect())
}

/// Loads interactions, item maps and KG; keeps only users present in both
/// domains and KG entities within `kg_radius` hops of a linked entity.
pub fn load_bundle(paths: &DatasetPaths, kg_radius: usize) -> Result<(DatasetBundle, LoadReport)> {
    let source_lines = read_pairs(&paths.source)?;
    let target_lines = read_pairs(&paths.target)?;
    let load_opt = |p: &Option<PathBuf>| -> Result<Vec<(String, String)>> {
        p.as_deref().map(read_pairs).unwrap_or(Ok(Vec::new()))
    };
    let map_source = load_opt(&paths.map_source)?;
    let map_target = load_opt(&paths.map_target)?;
    let kg_edges: Vec<(String, String)> = match &paths.kg {
        Some(p) => read_rows(p, &[2, 3])?
            .into_iter()
            .map(|(_, c)| (c[0].clone(), c[c.len() - 1].clone()))
            .collect(),
        None => Vec::new(),
    };

    let (mut users, mut source_items, mut target_items, mut entities) = match &paths.id_maps {
        Some(dir) => (
            IdMap::from_tsv(&dir.join("users.tsv"))?,
            IdMap::from_tsv(&dir.join("source_items.tsv"))?,
            IdMap::from_tsv(&dir.join("target_items.tsv"))?,
            IdMap::from_tsv(&dir.join("entities.tsv"))?,
        ),
        None => Default::default(),
    };

    let in_source: HashSet<&str> = source_lines.iter().map(|(u, _)| u.as_str()).collect();
    let in_target: HashSet<&str> = target_lines.iter().map(|(u, _)| u.as_str()).collect();
    let mut report = LoadReport {
        source_lines: source_lines.len(),
        target_lines: target_lines.len(),
        dropped_users: in_source.symmetric_difference(&in_target).count(),
        ..Default::default()
    };
    let shared = |u: &str| in_source.contains(u) && in_target.contains(u);

    let mut index_edges = |lines: &[(String, String)], items: &mut IdMap| -> Vec<(usize, usize)> {
        let mut edges = Vec::with_capacity(lines.len());
        for (u, i) in lines {
            if !shared(u) {
                report.dropped_edges += 1;
                continue;
            }
            edges.push((users.insert(u), items.insert(i)));
        }
        edges
    };
    let source_edges = index_edges(&source_lines, &mut source_items);
    let target_edges = index_edges(&target_lines, &mut target_items);
    if users.is_empty() {
        return Err(Error::EmptyDataset(
            "no user appears in both the source and the target interactions".into(),
        ));
    }

    let mut link = |lines: &[(String, String)], items: &mut IdMap| -> Vec<(usize, usize)> {
        lines
            .iter()
            .map(|(i, e)| (items.insert(i), entities.insert(e)))
            .collect()
    };
    let source_links = link(&map_source, &mut source_items);
    let target_links = link(&map_target, &mut target_items);
    let entity_edges: Vec<(usize, usize)> = kg_edges
        .iter()
        .map(|(h, t)| (entities.insert(h), entities.insert(t)))
        .collect();

    let user_count = users.len();
    let (source, dup_s) = InteractionGraph::new(Domain::Source, user_count, source_items.len(), source_edges)?;
    let (target, dup_t) = InteractionGraph::new(Domain::Target, user_count, target_items.len(), target_edges)?;
    report.duplicate_edges = dup_s + dup_t;

    let full = KnowledgeLinkage {
        entity_count: entities.len(),
        entity_edges,
        source_items: source_links,
        target_items: target_links,
    };
    let (kg, kept) = full.scoped(kg_radius);
    report.scoped_out_entities = full.entity_count - kept.len();
    let mut scoped_entities = IdMap::new();
    for &old in &kept {
        scoped_entities.insert(entities.id(old));
    }
    if report.dropped_users > 0 {
        log::warn!(
            "dropped {} users present in only one domain ({} interactions)",
            report.dropped_users,
            report.dropped_edges
        );
    }
    Ok((
        DatasetBundle {
            source,
            target,
            kg,
            users,
            source_items,
            target_items,
            entities: scoped_entities,
        },
        report,
    ))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn interactions_tsv(graph: &InteractionGraph, users: &IdMap, items: &IdMap) -> String {
    let mut out = String::new();
    for &(u, i) in &graph.edges {
        let _ = writeln!(out, "{}\t{}", users.id(u), items.id(i));
    }
    out
}

/// Writes interaction, map, KG and id-map files under `dir`, readable by
/// [`load_bundle`] through [`DatasetPaths::in_dir`].
pub fn write_bundle(bundle: &DatasetBundle, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let b = bundle;
    write_file(
        &dir.join("source.tsv"),
        &interactions_tsv(&b.source, &b.users, &b.source_items),
    )?;
    write_file(
        &dir.join("target.tsv"),
        &interactions_tsv(&b.target, &b.users, &b.target_items),
    )?;
    let links = |pairs: &[(usize, usize)], items: &IdMap| {
        let mut out = String::new();
        for &(i, e) in pairs {
            let _ = writeln!(out, "{}\t{}", items.id(i), b.entities.id(e));
        }
        out
    };
    write_file(&dir.join("map_source.tsv"), &links(&b.kg.source_items, &b.source_items))?;
    write_file(&dir.join("map_target.tsv"), &links(&b.kg.target_items, &b.target_items))?;
    let mut kg = String::new();
    for &(h, t) in &b.kg.entity_edges {
        let _ = writeln!(kg, "{}\t{}", b.entities.id(h), b.entities.id(t));
    }
    write_file(&dir.join("kg.tsv"), &kg)?;
    write_file(&dir.join("users.tsv"), &b.users.to_tsv())?;
    write_file(&dir.join("source_items.tsv"), &b.source_items.to_tsv())?;
    write_file(&dir.join("target_items.tsv"), &b.target_items.to_tsv())?;
    write_file(&dir.join("entities.tsv"), &b.entities.to_tsv())
}

/// Parameters of the synthetic generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub users: usize,
    pub source_items: usize,
    pub target_items: usize,
    /// Latent factor dimension.
    pub k: usize,
    pub clusters: usize,
    pub entities_per_cluster: usize,
    /// Attribute entities linked to each item's own entity.
    pub attributes_per_item: usize,
    pub source_per_user: usize,
    pub target_per_user: usize,
    /// Expected fraction of source interactions drawn uniformly at random.
    pub rho: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            users: 500,
            source_items: 300,
            target_items: 300,
            k: 8,
            clusters: 16,
            entities_per_cluster: 4,
            attributes_per_item: 3,
            source_per_user: 20,
            target_per_user: 8,
            rho: 0.3,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::invalid("rho", format!("must lie in [0, 1], got {}", self.rho)));
        }
        for (name, v) in [
            ("users", self.users),
            ("source_items", self.source_items),
            ("target_items", self.target_items),
            ("k", self.k),
            ("clusters", self.clusters),
            ("entities_per_cluster", self.entities_per_cluster),
            ("attributes_per_item", self.attributes_per_item),
            ("source_per_user", self.source_per_user),
            ("target_per_user", self.target_per_user),
        ] {
            if v == 0 {
                return Err(Error::invalid(name, "must be positive"));
            }
        }
        if self.source_per_user > self.source_items || self.target_per_user > self.target_items {
            return Err(Error::Infeasible(format!(
                "{} / {} interactions per user exceed {} / {} items",
                self.source_per_user, self.target_per_user, self.source_items, self.target_items
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub bundle: DatasetBundle,
    /// One flag per source edge, in edge order; `true` means drawn from the
    /// user's preferences.
    pub relevant: Vec<bool>,
}

impl SyntheticData {
    pub fn irrelevant_fraction(&self) -> f64 {
        let n = self.relevant.len().max(1) as f64;
        self.relevant.iter().filter(|r| !**r).count() as f64 / n
    }

    pub fn flags_tsv(&self) -> String {
        let b = &self.bundle;
        let mut out = String::new();
        for (&(u, i), &rel) in b.source.edges.iter().zip(&self.relevant) {
            let tag = if rel { "relevant" } else { "irrelevant" };
            let _ = writeln!(out, "{}\t{}\t{tag}", b.users.id(u), b.source_items.id(i));
        }
        out
    }
}

fn normal_vec<R: Rng>(k: usize, rng: &mut R) -> Vec<f64> {
    (0..k).map(|_| StandardNormal.sample(rng)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt()).max(1e-12)
}

/// `count` distinct indices drawn without replacement with probability
/// proportional to `exp(logit)` (Gumbel top-k), in draw order.
fn softmax_without_replacement<R: Rng>(logits: &[f64], count: usize, rng: &mut R) -> Vec<usize> {
    let mut keyed: Vec<(f64, usize)> = logits
        .iter()
        .enumerate()
        .map(|(i, &z)| {
            let u: f64 = Open01.sample(rng);
            (z - (-u.ln()).ln(), i)
        })
        .collect();
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    keyed.into_iter().take(count).map(|(_, i)| i).collect()
}

/// Users, items and attribute entities get Gaussian latent factors;
/// attributes sit around cluster centers and are fully connected within a
/// cluster. Every item has its own entity linked to the attributes closest to
/// it in direction, so attributes bridge the two catalogs. Preferred
/// interactions follow `softmax(⟨u, item⟩)` without replacement; each source
/// slot is instead uniform with probability `rho`.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = stream(spec.seed, 0x5eed, 0, 0, 0);
    let k = spec.k;
    let centers: Vec<Vec<f64>> = (0..spec.clusters).map(|_| normal_vec(k, &mut rng)).collect();
    let attribute_factors: Vec<Vec<f64>> = centers
        .iter()
        .flat_map(|c| {
            (0..spec.entities_per_cluster)
                .map(|_| {
                    let jitter = normal_vec(k, &mut rng);
                    c.iter().zip(jitter).map(|(a, b)| a + 0.5 * b).collect::<Vec<_>>()
                })
                .collect::<Vec<_>>()
        })
        .collect();
    let attributes = attribute_factors.len();
    let user_factors: Vec<Vec<f64>> = (0..spec.users).map(|_| normal_vec(k, &mut rng)).collect();
    let item_factors = |n: usize, rng: &mut _| -> Vec<Vec<f64>> { (0..n).map(|_| normal_vec(k, rng)).collect() };
    let source_factors = item_factors(spec.source_items, &mut rng);
    let target_factors = item_factors(spec.target_items, &mut rng);
    let per_item = spec.attributes_per_item.min(attributes);
    let closest = |f: &[f64]| -> Vec<usize> {
        let mut order: Vec<usize> = (0..attributes).collect();
        order.sort_by(|&a, &b| {
            cosine(f, &attribute_factors[b])
                .total_cmp(&cosine(f, &attribute_factors[a]))
                .then(a.cmp(&b))
        });
        order.truncate(per_item);
        order
    };

    // Entity layout: attributes, then one entity per source item, then one
    // per target item.
    let epc = spec.entities_per_cluster;
    let mut entity_edges = Vec::new();
    for c in 0..spec.clusters {
        for a in 0..epc {
            for b in a + 1..epc {
                entity_edges.push((c * epc + a, c * epc + b));
            }
        }
    }
    let mut link_items = |factors: &[Vec<f64>], first: usize| -> Vec<(usize, usize)> {
        factors
            .iter()
            .enumerate()
            .map(|(i, f)| {
                for a in closest(f) {
                    entity_edges.push((first + i, a));
                }
                (i, first + i)
            })
            .collect()
    };
    let source_links = link_items(&source_factors, attributes);
    let target_links = link_items(&target_factors, attributes + spec.source_items);

    let mut source_edges = Vec::with_capacity(spec.users * spec.source_per_user);
    let mut relevant = Vec::with_capacity(spec.users * spec.source_per_user);
    let mut target_edges = Vec::with_capacity(spec.users * spec.target_per_user);
    for (u, uf) in user_factors.iter().enumerate() {
        let irrelevant = (0..spec.source_per_user).filter(|_| rng.random_bool(spec.rho)).count();
        let logits: Vec<f64> = source_factors.iter().map(|f| dot(uf, f)).collect();
        let preferred = softmax_without_replacement(&logits, spec.source_per_user - irrelevant, &mut rng);
        let taken: HashSet<usize> = preferred.iter().copied().collect();
        let free: Vec<usize> = (0..spec.source_items).filter(|i| !taken.contains(i)).collect();
        let random: Vec<usize> = sample(&mut rng, free.len(), irrelevant)
            .into_iter()
            .map(|j| free[j])
            .collect();
        for i in preferred {
            source_edges.push((u, i));
            relevant.push(true);
        }
        for i in random {
            source_edges.push((u, i));
            relevant.push(false);
        }
        let logits: Vec<f64> = target_factors.iter().map(|f| dot(uf, f)).collect();
        for i in softmax_without_replacement(&logits, spec.target_per_user, &mut rng) {
            target_edges.push((u, i));
        }
    }

    let named = |prefix: &str, n: usize| {
        let mut m = IdMap::new();
        for i in 0..n {
            m.insert(&format!("{prefix}{i}"));
        }
        m
    };
    let (source, _) = InteractionGraph::new(Domain::Source, spec.users, spec.source_items, source_edges)?;
    let (target, _) = InteractionGraph::new(Domain::Target, spec.users, spec.target_items, target_edges)?;
    let bundle = DatasetBundle {
        source,
        target,
        kg: KnowledgeLinkage {
            entity_count: attributes + spec.source_items + spec.target_items,
            entity_edges,
            source_items: source_links,
            target_items: target_links,
        },
        users: named("u", spec.users),
        source_items: named("s", spec.source_items),
        target_items: named("t", spec.target_items),
        entities: {
            let mut m = named("a", attributes);
            for i in 0..spec.source_items {
                m.insert(&format!("es{i}"));
            }
            for i in 0..spec.target_items {
                m.insert(&format!("et{i}"));
            }
            m
        },
    };
    Ok(SyntheticData { bundle, relevant })
}
