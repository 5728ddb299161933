//! Per-domain block adjacency over users, items and knowledge-graph entities.
//!
//! Rows and columns are laid out as `[users | items | entities]`. The user–item
//! block comes from the domain's implicit feedback, the item–entity block from
//! the item linkage, and the entity–entity block from KG connectivity. Every
//! block is mirrored so the assembled matrix is structurally symmetric.

use std::collections::VecDeque;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Domain::Source => f.write_str("source"),
            Domain::Target => f.write_str("target"),
        }
    }
}

/// Binary implicit feedback of one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionGraph {
    pub domain: Domain,
    pub user_count: usize,
    pub item_count: usize,
    pub edges: Vec<(usize, usize)>,
}

impl InteractionGraph {
    /// Validates indices and collapses duplicate pairs. Returns the graph and
    /// the number of duplicates removed.
    pub fn new(
        domain: Domain,
        user_count: usize,
        item_count: usize,
        edges: Vec<(usize, usize)>,
    ) -> Result<(Self, usize)> {
        check_pairs("interactions", &edges, user_count, item_count)?;
        let before = edges.len();
        let edges = dedup_preserving_order(edges);
        let duplicates = before - edges.len();
        Ok((
            InteractionGraph {
                domain,
                user_count,
                item_count,
                edges,
            },
            duplicates,
        ))
    }

    /// Item lists per user, in edge order.
    pub fn items_by_user(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.user_count];
        for &(u, i) in &self.edges {
            out[u].push(i);
        }
        out
    }
}

/// Knowledge-graph connectivity plus the per-domain item→entity links.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KnowledgeLinkage {
    pub entity_count: usize,
    pub entity_edges: Vec<(usize, usize)>,
    pub source_items: Vec<(usize, usize)>,
    pub target_items: Vec<(usize, usize)>,
}

impl KnowledgeLinkage {
    pub fn empty() -> Self {
        KnowledgeLinkage::default()
    }

    pub fn item_map(&self, domain: Domain) -> &[(usize, usize)] {
        match domain {
            Domain::Source => &self.source_items,
            Domain::Target => &self.target_items,
        }
    }

    /// Keeps only entities within `radius` KG hops of an entity linked to some
    /// item (in either domain), and compacts the entity index space.
    ///
    /// Returns the scoped linkage and, for each retained entity, its index in
    /// `self`.
    pub fn scoped(&self, radius: usize) -> (KnowledgeLinkage, Vec<usize>) {
        let n = self.entity_count;
        let mut neighbors = vec![Vec::new(); n];
        for &(a, b) in &self.entity_edges {
            if a < n && b < n {
                neighbors[a].push(b);
                neighbors[b].push(a);
            }
        }
        let mut hops = vec![usize::MAX; n];
        let mut queue = VecDeque::new();
        for &(_, e) in self.source_items.iter().chain(&self.target_items) {
            if e < n && hops[e] == usize::MAX {
                hops[e] = 0;
                queue.push_back(e);
            }
        }
        while let Some(e) = queue.pop_front() {
            if hops[e] >= radius {
                continue;
            }
            for &nb in &neighbors[e] {
                if hops[nb] == usize::MAX {
                    hops[nb] = hops[e] + 1;
                    queue.push_back(nb);
                }
            }
        }

        let kept: Vec<usize> = (0..n).filter(|&e| hops[e] != usize::MAX).collect();
        let mut remap = vec![usize::MAX; n];
        for (new, &old) in kept.iter().enumerate() {
            remap[old] = new;
        }
        let keep_edge = |&(a, b): &(usize, usize)| -> Option<(usize, usize)> {
            let (ra, rb) = (*remap.get(a)?, *remap.get(b)?);
            (ra != usize::MAX && rb != usize::MAX).then_some((ra, rb))
        };
        let keep_link = |&(i, e): &(usize, usize)| -> Option<(usize, usize)> {
            let re = *remap.get(e)?;
            (re != usize::MAX).then_some((i, re))
        };
        let scoped = KnowledgeLinkage {
            entity_count: kept.len(),
            entity_edges: self.entity_edges.iter().filter_map(keep_edge).collect(),
            source_items: self.source_items.iter().filter_map(keep_link).collect(),
            target_items: self.target_items.iter().filter_map(keep_link).collect(),
        };
        (scoped, kept)
    }
}

/// CSR adjacency over `[users | items | entities]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseGraph {
    user_count: usize,
    item_count: usize,
    entity_count: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    values: Vec<f64>,
}

/// Bookkeeping produced while assembling an adjacency.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AssemblyReport {
    /// Undirected edges that appeared more than once across the inputs.
    pub duplicates: usize,
    /// Entity self-loops dropped to keep the diagonal empty.
    pub self_loops: usize,
}

impl SparseGraph {
    /// Builds a graph with unit values from undirected edges given in global
    /// node indices. Both directions are inserted; duplicates collapse.
    pub fn from_undirected(
        user_count: usize,
        item_count: usize,
        entity_count: usize,
        edges: &[(usize, usize)],
    ) -> Result<(Self, AssemblyReport)> {
        let n = user_count + item_count + entity_count;
        check_pairs("adjacency", edges, n, n)?;
        let mut report = AssemblyReport::default();
        let mut directed = Vec::with_capacity(edges.len() * 2);
        for &(a, b) in edges {
            if a == b {
                report.self_loops += 1;
                continue;
            }
            directed.push((a, b));
            directed.push((b, a));
        }
        directed.sort_unstable();
        let before = directed.len();
        directed.dedup();
        report.duplicates = (before - directed.len()) / 2;

        let mut row_offsets = vec![0usize; n + 1];
        for &(r, _) in &directed {
            row_offsets[r + 1] += 1;
        }
        for r in 0..n {
            row_offsets[r + 1] += row_offsets[r];
        }
        let col_indices = directed.iter().map(|&(_, c)| c).collect();
        let values = vec![1.0; directed.len()];
        Ok((
            SparseGraph {
                user_count,
                item_count,
                entity_count,
                row_offsets,
                col_indices,
                values,
            },
            report,
        ))
    }

    pub fn user_count(&self) -> usize {
        self.user_count
    }

    pub fn item_count(&self) -> usize {
        self.item_count
    }

    pub fn entity_count(&self) -> usize {
        self.entity_count
    }

    pub fn node_count(&self) -> usize {
        self.user_count + self.item_count + self.entity_count
    }

    pub fn item_offset(&self) -> usize {
        self.user_count
    }

    pub fn entity_offset(&self) -> usize {
        self.user_count + self.item_count
    }

    pub fn nnz(&self) -> usize {
        self.col_indices.len()
    }

    /// Structural nonzeros in `row`.
    pub fn degree(&self, row: usize) -> usize {
        self.row_offsets[row + 1] - self.row_offsets[row]
    }

    pub fn row(&self, row: usize) -> (&[usize], &[f64]) {
        let range = self.row_offsets[row]..self.row_offsets[row + 1];
        (&self.col_indices[range.clone()], &self.values[range])
    }

    pub fn value(&self, row: usize, col: usize) -> Option<f64> {
        let (cols, vals) = self.row(row);
        cols.binary_search(&col).ok().map(|k| vals[k])
    }

    /// Iterates `(row, col, value)` triples in row-major order.
    pub fn triples(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.node_count()).flat_map(move |r| {
            let (cols, vals) = self.row(r);
            cols.iter().zip(vals).map(move |(&c, &v)| (r, c, v))
        })
    }

    pub fn to_dense(&self) -> Matrix {
        let n = self.node_count();
        let mut dense = Matrix::zeros(n, n);
        for (r, c, v) in self.triples() {
            dense[(r, c)] = v;
        }
        dense
    }

    /// `self · x` for a dense `x` with one row per node.
    pub fn spmm(&self, x: &Matrix) -> Result<Matrix> {
        if x.rows() != self.node_count() {
            return Err(Error::Shape {
                context: "SparseGraph::spmm",
                expected: (self.node_count(), x.cols()),
                actual: x.shape(),
            });
        }
        let d = x.cols();
        let mut out = Matrix::zeros(x.rows(), d);
        if d == 0 {
            return Ok(out);
        }
        out.as_mut_slice()
            .par_chunks_mut(d)
            .enumerate()
            .for_each(|(r, out_row)| {
                let (cols, vals) = self.row(r);
                for (&c, &v) in cols.iter().zip(vals) {
                    for (o, xi) in out_row.iter_mut().zip(x.row(c)) {
                        *o += v * xi;
                    }
                }
            });
        Ok(out)
    }

    pub fn is_structurally_symmetric(&self) -> bool {
        self.triples().all(|(r, c, _)| self.value(c, r).is_some())
    }
}

/// Lays out one domain's unnormalized adjacency.
pub fn assemble_adjacency(graph: &InteractionGraph, kg: &KnowledgeLinkage) -> Result<(SparseGraph, AssemblyReport)> {
    let users = graph.user_count;
    let items = graph.item_count;
    let entities = kg.entity_count;
    check_pairs("interactions", &graph.edges, users, items)?;
    let links = kg.item_map(graph.domain);
    check_pairs("item-entity map", links, items, entities)?;
    check_pairs("entity edges", &kg.entity_edges, entities, entities)?;

    let item_base = users;
    let entity_base = users + items;
    let edges: Vec<(usize, usize)> = graph
        .edges
        .iter()
        .map(|&(u, i)| (u, item_base + i))
        .chain(links.iter().map(|&(i, e)| (item_base + i, entity_base + e)))
        .chain(kg.entity_edges.iter().map(|&(a, b)| (entity_base + a, entity_base + b)))
        .collect();
    let (adj, report) = SparseGraph::from_undirected(users, items, entities, &edges)?;
    if report.duplicates > 0 || report.self_loops > 0 {
        log::warn!(
            "{} adjacency: collapsed {} duplicate edges, dropped {} self-loops",
            graph.domain,
            report.duplicates,
            report.self_loops
        );
    }
    Ok((adj, report))
}

/// Replaces every value with `1 / sqrt(deg(a) · deg(b))`, where degrees count
/// structural nonzeros. Zero-degree rows have no entries and stay empty.
pub fn normalize_symmetric(adj: &SparseGraph) -> SparseGraph {
    let n = adj.node_count();
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|r| match adj.degree(r) {
            0 => 0.0,
            d => 1.0 / (d as f64).sqrt(),
        })
        .collect();
    let mut out = adj.clone();
    for r in 0..n {
        let range = adj.row_offsets[r]..adj.row_offsets[r + 1];
        for k in range {
            let c = adj.col_indices[k];
            out.values[k] = inv_sqrt[r] * inv_sqrt[c];
        }
    }
    out
}

fn check_pairs(context: &'static str, pairs: &[(usize, usize)], row_bound: usize, col_bound: usize) -> Result<()> {
    match pairs.iter().find(|&&(r, c)| r >= row_bound || c >= col_bound) {
        Some(&(row, col)) => Err(Error::IndexOutOfRange {
            context,
            row,
            col,
            row_bound,
            col_bound,
        }),
        None => Ok(()),
    }
}

fn dedup_preserving_order(edges: Vec<(usize, usize)>) -> Vec<(usize, usize)> {
    let mut seen = std::collections::HashSet::with_capacity(edges.len());
    edges.into_iter().filter(|e| seen.insert(*e)).collect()
}
