//! Weight-free light graph convolution.
//!
//! `E(l) = Â · E(l-1)` with `Â` the symmetrically normalized adjacency. There is
//! no feature transform and no nonlinearity, so the whole encoder is the linear
//! map `E(0) ↦ Σ_l w_l Â^l E(0)` and its adjoint is the same map applied to the
//! upstream gradient (`Â` is symmetric).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::SparseGraph;
use crate::matrix::Matrix;

/// How the per-layer outputs are combined into the final representation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Readout {
    /// Only the deepest layer `E(L)`.
    Last,
    /// Uniform mean of `E(0) .. E(L)`.
    Mean,
}

impl Readout {
    pub fn weights(self, layers: usize) -> Vec<f64> {
        match self {
            Readout::Last => {
                let mut w = vec![0.0; layers + 1];
                w[layers] = 1.0;
                w
            }
            Readout::Mean => vec![1.0 / (layers + 1) as f64; layers + 1],
        }
    }
}

impl std::str::FromStr for Readout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last" => Ok(Readout::Last),
            "mean" => Ok(Readout::Mean),
            other => Err(Error::invalid("readout", format!("unknown readout {other:?}"))),
        }
    }
}

impl std::fmt::Display for Readout {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Readout::Last => "last",
            Readout::Mean => "mean",
        })
    }
}

/// Layer outputs of one encoder pass.
#[derive(Clone, Debug)]
pub struct EmbeddingState {
    /// `E(0) ..= E(L)`, one row per graph node.
    pub layer_outputs: Vec<Matrix>,
    /// Readout over the user and item rows only.
    pub z: Matrix,
    pub user_count: usize,
    pub item_count: usize,
}

impl EmbeddingState {
    pub fn layers(&self) -> usize {
        self.layer_outputs.len() - 1
    }

    pub fn user(&self, u: usize) -> &[f64] {
        self.z.row(u)
    }

    pub fn item(&self, i: usize) -> &[f64] {
        self.z.row(self.user_count + i)
    }
}

/// Stacks `[users | items | entities]` into `E(0)`. A missing item table means
/// the item block is the constant zero matrix.
pub fn initial_embeddings(
    graph: &SparseGraph,
    users: &Matrix,
    items: Option<&Matrix>,
    entities: &Matrix,
) -> Result<Matrix> {
    let d = users.cols();
    let zero_items;
    let items = match items {
        Some(m) => m,
        None => {
            zero_items = Matrix::zeros(graph.item_count(), d);
            &zero_items
        }
    };
    let expect = |context, m: &Matrix, rows| {
        if m.shape() != (rows, d) {
            Err(Error::Shape {
                context,
                expected: (rows, d),
                actual: m.shape(),
            })
        } else {
            Ok(())
        }
    };
    expect("initial_embeddings users", users, graph.user_count())?;
    expect("initial_embeddings items", items, graph.item_count())?;
    expect("initial_embeddings entities", entities, graph.entity_count())?;
    Matrix::vstack(&[users, items, entities])
}

/// Runs `layers` rounds of propagation over a normalized graph.
pub fn propagate(graph: &SparseGraph, e0: &Matrix, layers: usize, readout: Readout) -> Result<EmbeddingState> {
    if e0.rows() != graph.node_count() {
        return Err(Error::Shape {
            context: "propagate",
            expected: (graph.node_count(), e0.cols()),
            actual: e0.shape(),
        });
    }
    let mut layer_outputs = Vec::with_capacity(layers + 1);
    layer_outputs.push(e0.clone());
    for l in 1..=layers {
        let next = graph.spmm(&layer_outputs[l - 1])?;
        layer_outputs.push(next);
    }

    let kept = graph.user_count() + graph.item_count();
    let mut z = Matrix::zeros(kept, e0.cols());
    for (w, layer) in readout.weights(layers).into_iter().zip(&layer_outputs) {
        if w != 0.0 {
            z.add_scaled(w, &layer.slice_rows(0, kept))?;
        }
    }
    Ok(EmbeddingState {
        layer_outputs,
        z,
        user_count: graph.user_count(),
        item_count: graph.item_count(),
    })
}

/// Gradient with respect to `E(0)` given the gradient at the readout.
///
/// The result has one row per graph node. Rows of the item block are returned
/// as computed; callers holding a constant item block ignore them.
pub fn backprop_propagate(
    grad_z: &Matrix,
    state: &EmbeddingState,
    graph: &SparseGraph,
    readout: Readout,
) -> Result<Matrix> {
    let kept = state.user_count + state.item_count;
    if grad_z.rows() != kept || grad_z.cols() != state.z.cols() {
        return Err(Error::Shape {
            context: "backprop_propagate",
            expected: state.z.shape(),
            actual: grad_z.shape(),
        });
    }
    let d = grad_z.cols();
    let n = graph.node_count();
    let weights = readout.weights(state.layers());

    // Horner form: g_L = w_L g; g_{l} = w_l g + Â g_{l+1}.
    let mut padded = Matrix::zeros(n, d);
    padded.as_mut_slice()[..kept * d].copy_from_slice(grad_z.as_slice());
    let mut acc = Matrix::zeros(n, d);
    for (l, &w) in weights.iter().enumerate().rev() {
        if l + 1 < weights.len() {
            acc = graph.spmm(&acc)?;
        }
        if w != 0.0 {
            acc.add_scaled(w, &padded)?;
        }
    }
    Ok(acc)
}
