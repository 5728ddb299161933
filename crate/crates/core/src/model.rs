//! The full cross-domain model: two light-convolution encoders sharing an
//! entity table, the compression gate, and the dual-domain predictors.
//!
//! [`loss_and_gradients`] runs the whole forward computation for a batch and
//! returns exact reverse-mode gradients for every parameter:
//!
//! ```text
//! E^S, E^T  = encoders          H = E^S + E^T          z = gate(H)
//! λ = gumbel_sigmoid(z, m, t)   Ĥ = λH + (1-λ)ε        f = Ĥ + E^T
//! L = pred_T(f, Z^T) + α1 pred_S(f, Z^S) + α2 L_KL(λ, H) + α3 L_CL(E^T, Ĥ)
//! ```

use rand::Rng;

use crate::compression::{
    expected_mix, l_cl, l_kl, logistic_noise, merge_representations, mix_noise, sigmoid, BatchStats, GateNetwork,
};
use crate::config::TrainConfig;
use crate::encoder::{backprop_propagate, initial_embeddings, propagate, EmbeddingState};
use crate::error::{Error, Result};
use crate::graph::{assemble_adjacency, normalize_symmetric, InteractionGraph, KnowledgeLinkage, SparseGraph};
use crate::matrix::{axpy, dot, Matrix};
use crate::transfer::{prediction_loss, total_loss, LossBundle};

/// Learnable state. Item tables exist only when the KG bridge is disabled.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParameters {
    pub user_source: Matrix,
    pub user_target: Matrix,
    pub entity: Matrix,
    pub item_source: Option<Matrix>,
    pub item_target: Option<Matrix>,
    pub gate: GateNetwork,
}

impl ModelParameters {
    pub fn init<R: Rng + ?Sized>(data: &TrainingData, cfg: &TrainConfig, rng: &mut R) -> Self {
        let d = cfg.embedding_dim;
        let std = cfg.init_std;
        let user_source = Matrix::random_normal(data.user_count, d, std, rng);
        let user_target = Matrix::random_normal(data.user_count, d, std, rng);
        let entity = Matrix::random_normal(data.entity_count, d, std, rng);
        let (item_source, item_target) = if data.item_tables {
            (
                Some(Matrix::random_normal(data.source.item_count(), d, std, rng)),
                Some(Matrix::random_normal(data.target.item_count(), d, std, rng)),
            )
        } else {
            (None, None)
        };
        let gate = GateNetwork::init(d, cfg.compression.hidden, rng);
        ModelParameters {
            user_source,
            user_target,
            entity,
            item_source,
            item_target,
            gate,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        ModelParameters {
            user_source: z(&self.user_source),
            user_target: z(&self.user_target),
            entity: z(&self.entity),
            item_source: self.item_source.as_ref().map(z),
            item_target: self.item_target.as_ref().map(z),
            gate: GateNetwork {
                w1: z(&self.gate.w1),
                b1: z(&self.gate.b1),
                w2: z(&self.gate.w2),
                b2: z(&self.gate.b2),
            },
        }
    }

    /// Named tensors in a fixed order.
    pub fn tensors(&self) -> Vec<(&'static str, &Matrix)> {
        let mut out = vec![
            ("user_source", &self.user_source),
            ("user_target", &self.user_target),
            ("entity", &self.entity),
        ];
        if let Some(m) = &self.item_source {
            out.push(("item_source", m));
        }
        if let Some(m) = &self.item_target {
            out.push(("item_target", m));
        }
        out.extend([
            ("gate.w1", &self.gate.w1),
            ("gate.b1", &self.gate.b1),
            ("gate.w2", &self.gate.w2),
            ("gate.b2", &self.gate.b2),
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        let mut out = vec![
            ("user_source", &mut self.user_source),
            ("user_target", &mut self.user_target),
            ("entity", &mut self.entity),
        ];
        if let Some(m) = &mut self.item_source {
            out.push(("item_source", m));
        }
        if let Some(m) = &mut self.item_target {
            out.push(("item_target", m));
        }
        out.extend([
            ("gate.w1", &mut self.gate.w1),
            ("gate.b1", &mut self.gate.b1),
            ("gate.w2", &mut self.gate.w2),
            ("gate.b2", &mut self.gate.b2),
        ]);
        out
    }

    pub fn from_tensors(mut tensors: Vec<(String, Matrix)>) -> Result<Self> {
        let mut take = |name: &str| -> Option<Matrix> {
            let pos = tensors.iter().position(|(n, _)| n == name)?;
            Some(tensors.swap_remove(pos).1)
        };
        let mut required = |name: &str| take(name).ok_or_else(|| Error::Checkpoint(format!("missing tensor {name:?}")));
        let user_source = required("user_source")?;
        let user_target = required("user_target")?;
        let entity = required("entity")?;
        let w1 = required("gate.w1")?;
        let b1 = required("gate.b1")?;
        let w2 = required("gate.w2")?;
        let b2 = required("gate.b2")?;
        let item_source = take("item_source");
        let item_target = take("item_target");
        Ok(ModelParameters {
            user_source,
            user_target,
            entity,
            item_source,
            item_target,
            gate: GateNetwork { w1, b1, w2, b2 },
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.as_slice().len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, m)| m.is_finite())
    }

    /// Checks tensor shapes against the graphs they will be used with.
    pub fn check_compatible(&self, data: &TrainingData) -> Result<()> {
        let d = self.user_target.cols();
        let expect = |context: &'static str, m: &Matrix, rows: usize| {
            if m.shape() == (rows, d) {
                Ok(())
            } else {
                Err(Error::Shape {
                    context,
                    expected: (rows, d),
                    actual: m.shape(),
                })
            }
        };
        expect("user_source", &self.user_source, data.user_count)?;
        expect("user_target", &self.user_target, data.user_count)?;
        expect("entity", &self.entity, data.entity_count)?;
        match (&self.item_source, &self.item_target, data.item_tables) {
            (Some(s), Some(t), true) => {
                expect("item_source", s, data.source.item_count())?;
                expect("item_target", t, data.target.item_count())?;
            }
            (None, None, false) => {}
            _ => {
                return Err(Error::Checkpoint(
                    "item tables do not match the graph layout (use_kg mismatch)".into(),
                ))
            }
        }
        if self.gate.dim() != d {
            return Err(Error::Shape {
                context: "gate.w1",
                expected: (self.gate.hidden(), d),
                actual: self.gate.w1.shape(),
            });
        }
        Ok(())
    }
}

/// One domain's normalized graph and per-user training positives.
#[derive(Clone, Debug)]
pub struct DomainData {
    pub graph: SparseGraph,
    /// Sorted training items per user.
    pub positives: Vec<Vec<usize>>,
}

impl DomainData {
    pub fn item_count(&self) -> usize {
        self.graph.item_count()
    }
}

#[derive(Clone, Debug)]
pub struct TrainingData {
    pub source: DomainData,
    pub target: DomainData,
    pub user_count: usize,
    pub entity_count: usize,
    /// Items carry learnable ID embeddings instead of the constant zero block.
    pub item_tables: bool,
}

impl TrainingData {
    /// Builds both domain graphs. Without the KG, entity rows are dropped and
    /// items get ID embeddings.
    pub fn new(
        source: &InteractionGraph,
        target_train: &InteractionGraph,
        kg: &KnowledgeLinkage,
        use_kg: bool,
    ) -> Result<Self> {
        if source.user_count != target_train.user_count {
            return Err(Error::Shape {
                context: "TrainingData users",
                expected: (source.user_count, 0),
                actual: (target_train.user_count, 0),
            });
        }
        let empty = KnowledgeLinkage::empty();
        let kg = if use_kg { kg } else { &empty };
        let domain = |g: &InteractionGraph| -> Result<DomainData> {
            let (adj, _) = assemble_adjacency(g, kg)?;
            let mut positives = g.items_by_user();
            positives.iter_mut().for_each(|p| {
                p.sort_unstable();
                p.dedup();
            });
            Ok(DomainData {
                graph: normalize_symmetric(&adj),
                positives,
            })
        };
        Ok(TrainingData {
            source: domain(source)?,
            target: domain(target_train)?,
            user_count: source.user_count,
            entity_count: kg.entity_count,
            item_tables: !use_kg,
        })
    }
}

/// A sampled `(positive, negative)` item pair for batch row `row`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pair {
    pub row: usize,
    pub pos: usize,
    pub neg: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Batch {
    pub users: Vec<usize>,
    pub target_pairs: Vec<Pair>,
    pub source_pairs: Vec<Pair>,
}

/// Stochastic inputs of one step: one uniform draw in (0, 1) and one
/// standard-normal row per batch user.
#[derive(Clone, Debug, PartialEq)]
pub struct Draws {
    pub uniform: Vec<f64>,
    pub normal: Matrix,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions<'a> {
    /// Use these statistics instead of the batch's own.
    pub frozen_stats: Option<&'a BatchStats>,
    /// Replace the relaxed gate by a constant `λ` for every user.
    pub fixed_gate: Option<f64>,
    pub skip_gradients: bool,
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub losses: LossBundle,
    pub grads: Option<ModelParameters>,
    pub stats: Option<BatchStats>,
    pub lambda: Vec<f64>,
    /// `Σ (1 - λ)²` before flooring.
    pub kl_m: f64,
    /// Smallest row norm entering a cosine similarity.
    pub min_norm: f64,
}

fn encode(
    params: &ModelParameters,
    domain: &DomainData,
    users: &Matrix,
    items: Option<&Matrix>,
    cfg: &TrainConfig,
) -> Result<EmbeddingState> {
    let e0 = initial_embeddings(&domain.graph, users, items, &params.entity)?;
    propagate(&domain.graph, &e0, cfg.layers, cfg.readout)
}

fn gather_users(state: &EmbeddingState, users: &[usize]) -> Matrix {
    let d = state.z.cols();
    let mut out = Matrix::zeros(users.len(), d);
    for (r, &u) in users.iter().enumerate() {
        out.row_mut(r).copy_from_slice(state.user(u));
    }
    out
}

/// Scores pairs against a fused batch; returns the loss and accumulates
/// `weight`-scaled gradients into `grad_fused` and the item rows of `grad_z`.
fn pair_objective(
    cfg: &TrainConfig,
    pairs: &[Pair],
    fused: &Matrix,
    state: &EmbeddingState,
    weight: f64,
    grads: Option<(&mut Matrix, &mut Matrix)>,
) -> Result<f64> {
    let pos: Vec<f64> = pairs.iter().map(|p| dot(fused.row(p.row), state.item(p.pos))).collect();
    let neg: Vec<f64> = pairs.iter().map(|p| dot(fused.row(p.row), state.item(p.neg))).collect();
    let (loss, gpos, gneg) = prediction_loss(cfg.prediction_loss, &pos, &neg)?;
    if let Some((grad_fused, grad_z)) = grads {
        if weight != 0.0 {
            let offset = state.user_count;
            for (k, p) in pairs.iter().enumerate() {
                let (gp, gn) = (weight * gpos[k], weight * gneg[k]);
                axpy(gp, state.item(p.pos), grad_fused.row_mut(p.row));
                axpy(gn, state.item(p.neg), grad_fused.row_mut(p.row));
                axpy(gp, fused.row(p.row), grad_z.row_mut(offset + p.pos));
                axpy(gn, fused.row(p.row), grad_z.row_mut(offset + p.neg));
            }
        }
    }
    Ok(loss)
}

/// Forward pass and, unless skipped, exact gradients of the total loss.
pub fn loss_and_gradients(
    params: &ModelParameters,
    data: &TrainingData,
    cfg: &TrainConfig,
    batch: &Batch,
    draws: &Draws,
    opts: ForwardOptions<'_>,
) -> Result<StepOutput> {
    let b = batch.users.len();
    let d = cfg.embedding_dim;
    if draws.uniform.len() != b || draws.normal.shape() != (b, d) {
        return Err(Error::Shape {
            context: "loss_and_gradients draws",
            expected: (b, d),
            actual: draws.normal.shape(),
        });
    }
    let want_grads = !opts.skip_gradients;
    let target_state = encode(
        params,
        &data.target,
        &params.user_target,
        params.item_target.as_ref(),
        cfg,
    )?;
    let et = gather_users(&target_state, &batch.users);
    let mut grad_zt = Matrix::zeros(target_state.z.rows(), d);

    if cfg.target_only {
        let mut grad_fused = Matrix::zeros(b, d);
        let l_t = pair_objective(
            cfg,
            &batch.target_pairs,
            &et,
            &target_state,
            1.0,
            want_grads.then_some((&mut grad_fused, &mut grad_zt)),
        )?;
        let losses = total_loss(l_t, 0.0, 0.0, 0.0, cfg.alphas)?;
        let grads = if want_grads {
            let mut grads = params.zeros_like();
            for (r, &u) in batch.users.iter().enumerate() {
                axpy(1.0, grad_fused.row(r), grad_zt.row_mut(u));
            }
            let ge0 = backprop_propagate(&grad_zt, &target_state, &data.target.graph, cfg.readout)?;
            scatter_domain(
                &ge0,
                &data.target.graph,
                &mut grads.user_target,
                grads.item_target.as_mut(),
                &mut grads.entity,
            );
            Some(grads)
        } else {
            None
        };
        return Ok(StepOutput {
            losses,
            grads,
            stats: None,
            lambda: Vec::new(),
            kl_m: f64::NAN,
            min_norm: f64::NAN,
        });
    }

    let source_state = encode(
        params,
        &data.source,
        &params.user_source,
        params.item_source.as_ref(),
        cfg,
    )?;
    let es = gather_users(&source_state, &batch.users);
    let h = merge_representations(&es, &et)?;
    let comp = &cfg.compression;
    let stats = match opts.frozen_stats {
        Some(s) => s.clone(),
        None => BatchStats::compute(&h, comp.sigma_floor),
    };
    let gate_cache = params.gate.forward(&h)?;
    let t = comp.gate_temperature;
    let lambda: Vec<f64> = match opts.fixed_gate {
        Some(v) => vec![v; b],
        None => gate_cache
            .logits
            .iter()
            .zip(&draws.uniform)
            .map(|(&z, &m)| sigmoid((z + logistic_noise(m)) / t))
            .collect(),
    };
    let (h_hat, eps) = mix_noise(&h, &lambda, &stats, &draws.normal)?;
    let kl = l_kl(&lambda, &h, &stats, comp.m_floor)?;
    let cl = l_cl(&et, &h_hat, comp.contrast_temperature, comp.norm_floor)?;
    let mut fused = h_hat.clone();
    fused.add_scaled(1.0, &et)?;

    let alphas = cfg.alphas;
    let mut grad_fused = Matrix::zeros(b, d);
    let mut grad_zs = Matrix::zeros(source_state.z.rows(), d);
    let l_t = pair_objective(
        cfg,
        &batch.target_pairs,
        &fused,
        &target_state,
        1.0,
        want_grads.then_some((&mut grad_fused, &mut grad_zt)),
    )?;
    let l_s = pair_objective(
        cfg,
        &batch.source_pairs,
        &fused,
        &source_state,
        alphas.source_pred,
        want_grads.then_some((&mut grad_fused, &mut grad_zs)),
    )?;
    let losses = total_loss(l_t, l_s, kl.value, cl.value, alphas)?;
    let min_norm = (0..b)
        .flat_map(|i| [et.row(i), h_hat.row(i)])
        .map(|r| dot(r, r).sqrt())
        .fold(f64::INFINITY, f64::min);

    let grads = if want_grads {
        let mut g_hhat = grad_fused.clone();
        g_hhat.add_scaled(alphas.contrast, &cl.grad_h_hat)?;
        let mut g_et = grad_fused;
        g_et.add_scaled(alphas.contrast, &cl.grad_target)?;

        let mut g_h = Matrix::zeros(b, d);
        let mut g_logits = vec![0.0; b];
        for i in 0..b {
            let l = lambda[i];
            let mut g_lambda = alphas.kl * kl.grad_lambda[i];
            for k in 0..d {
                g_lambda += g_hhat[(i, k)] * (h[(i, k)] - eps[(i, k)]);
                g_h[(i, k)] = l * g_hhat[(i, k)] + alphas.kl * kl.grad_h[(i, k)];
            }
            if opts.fixed_gate.is_none() {
                g_logits[i] = g_lambda * l * (1.0 - l) / t;
            }
        }
        let (gate_grads, g_h_gate) = params.gate.backward(&h, &gate_cache, &g_logits);
        g_h.add_scaled(1.0, &g_h_gate)?;
        g_et.add_scaled(1.0, &g_h)?;

        for (r, &u) in batch.users.iter().enumerate() {
            axpy(1.0, g_h.row(r), grad_zs.row_mut(u));
            axpy(1.0, g_et.row(r), grad_zt.row_mut(u));
        }
        let mut grads = params.zeros_like();
        let ge0_s = backprop_propagate(&grad_zs, &source_state, &data.source.graph, cfg.readout)?;
        let ge0_t = backprop_propagate(&grad_zt, &target_state, &data.target.graph, cfg.readout)?;
        scatter_domain(
            &ge0_s,
            &data.source.graph,
            &mut grads.user_source,
            grads.item_source.as_mut(),
            &mut grads.entity,
        );
        scatter_domain(
            &ge0_t,
            &data.target.graph,
            &mut grads.user_target,
            grads.item_target.as_mut(),
            &mut grads.entity,
        );
        grads.gate = GateNetwork {
            w1: gate_grads.w1,
            b1: gate_grads.b1,
            w2: gate_grads.w2,
            b2: gate_grads.b2,
        };
        Some(grads)
    } else {
        None
    };

    Ok(StepOutput {
        losses,
        grads,
        stats: Some(stats),
        lambda,
        kl_m: kl.m,
        min_norm,
    })
}

/// Splits an `E(0)` gradient into the user, item and entity tables. The item
/// block is dropped when items have no table.
fn scatter_domain(
    ge0: &Matrix,
    graph: &SparseGraph,
    users: &mut Matrix,
    items: Option<&mut Matrix>,
    entities: &mut Matrix,
) {
    let d = ge0.cols();
    let nu = graph.user_count();
    let ni = graph.item_count();
    let ne = graph.entity_count();
    axpy(1.0, &ge0.as_slice()[..nu * d], users.as_mut_slice());
    if let Some(items) = items {
        axpy(1.0, &ge0.as_slice()[nu * d..(nu + ni) * d], items.as_mut_slice());
    }
    axpy(
        1.0,
        &ge0.as_slice()[(nu + ni) * d..(nu + ni + ne) * d],
        entities.as_mut_slice(),
    );
}

/// Serving-time representations: the fused user vectors (gate replaced by
/// its expectation, noise by the population mean) and the target item rows.
#[derive(Clone, Debug)]
pub struct Inference {
    pub users: Matrix,
    pub items: Matrix,
    /// `sigmoid(z)` per user; empty for target-only models.
    pub reliability: Vec<f64>,
}

impl Inference {
    pub fn scores(&self, user: usize) -> Vec<f64> {
        let u = self.users.row(user);
        (0..self.items.rows()).map(|i| dot(u, self.items.row(i))).collect()
    }
}

pub fn infer(params: &ModelParameters, data: &TrainingData, cfg: &TrainConfig) -> Result<Inference> {
    params.check_compatible(data)?;
    let target_state = encode(
        params,
        &data.target,
        &params.user_target,
        params.item_target.as_ref(),
        cfg,
    )?;
    let nu = data.user_count;
    let et = target_state.z.slice_rows(0, nu);
    let items = target_state.z.slice_rows(nu, data.target.item_count());
    if cfg.target_only {
        return Ok(Inference {
            users: et,
            items,
            reliability: Vec::new(),
        });
    }
    let source_state = encode(
        params,
        &data.source,
        &params.user_source,
        params.item_source.as_ref(),
        cfg,
    )?;
    let es = source_state.z.slice_rows(0, nu);
    let h = merge_representations(&es, &et)?;
    let stats = BatchStats::compute(&h, cfg.compression.sigma_floor);
    let logits = params.gate.forward(&h)?.logits;
    let mut users = expected_mix(&h, &logits, &stats.mean);
    users.add_scaled(1.0, &et)?;
    Ok(Inference {
        users,
        items,
        reliability: logits.into_iter().map(sigmoid).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Domain;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> (TrainingData, TrainConfig) {
        let (s, _) = InteractionGraph::new(Domain::Source, 2, 2, vec![(0, 0), (1, 1), (1, 0)]).unwrap();
        let (t, _) = InteractionGraph::new(Domain::Target, 2, 3, vec![(0, 0), (1, 2)]).unwrap();
        let kg = KnowledgeLinkage {
            entity_count: 2,
            entity_edges: vec![(0, 1)],
            source_items: vec![(0, 0), (1, 1)],
            target_items: vec![(0, 0), (2, 1)],
        };
        let data = TrainingData::new(&s, &t, &kg, true).unwrap();
        let cfg = TrainConfig {
            embedding_dim: 3,
            compression: crate::compression::CompressionConfig {
                hidden: 4,
                ..Default::default()
            },
            ..Default::default()
        };
        (data, cfg)
    }

    #[test]
    fn item_rows_have_no_table_with_kg() {
        let (data, cfg) = tiny();
        let params = ModelParameters::init(&data, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(params.item_source.is_none());
        let names: Vec<_> = params.tensors().iter().map(|t| t.0).collect();
        assert_eq!(names[..3], ["user_source", "user_target", "entity"]);
        let back = ModelParameters::from_tensors(
            params
                .tensors()
                .into_iter()
                .map(|(n, m)| (n.to_string(), m.clone()))
                .collect(),
        )
        .unwrap();
        assert_eq!(back, params);
    }

    #[test]
    fn inference_matches_training_score_at_gate_expectation() {
        let (data, cfg) = tiny();
        let params = ModelParameters::init(&data, &cfg, &mut ChaCha8Rng::seed_from_u64(1));
        let inf = infer(&params, &data, &cfg).unwrap();
        assert_eq!(inf.users.shape(), (2, 3));
        assert_eq!(inf.items.shape(), (3, 3));
        assert!(inf.reliability.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn draws_shape_checked() {
        let (data, cfg) = tiny();
        let params = ModelParameters::init(&data, &cfg, &mut ChaCha8Rng::seed_from_u64(2));
        let batch = Batch {
            users: vec![0, 1],
            ..Default::default()
        };
        let draws = Draws {
            uniform: vec![0.5],
            normal: Matrix::zeros(1, 3),
        };
        assert!(loss_and_gradients(&params, &data, &cfg, &batch, &draws, Default::default()).is_err());
    }
}
