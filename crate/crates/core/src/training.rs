//! Batching, Adagrad, the epoch loop with early stopping, finite-difference
//! gradient checking and the binary checkpoint container.

use std::io::{Read, Write};
use std::path::Path;

use rand::distr::{Distribution, Open01};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, HeldOut};
use crate::matrix::Matrix;
use crate::metrics::Metric;
use crate::model::{
    infer, loss_and_gradients, Batch, DomainData, Draws, ForwardOptions, ModelParameters, Pair, TrainingData,
};
use crate::transfer::LossBundle;

const TAG_INIT: u64 = 1;
const TAG_SHUFFLE: u64 = 2;
const TAG_SAMPLE: u64 = 3;
const TAG_DRAW: u64 = 4;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Independent generator for the counter `(tag, a, b, c)` under `seed`.
pub fn stream(seed: u64, tag: u64, a: u64, b: u64, c: u64) -> ChaCha8Rng {
    let key = [tag, a, b, c].iter().fold(splitmix(seed), |h, &v| splitmix(h ^ v));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(key);
    rng
}

pub fn init_parameters(data: &TrainingData, cfg: &TrainConfig) -> ModelParameters {
    ModelParameters::init(data, cfg, &mut stream(cfg.seed, TAG_INIT, 0, 0, 0))
}

fn sample_pairs<R: Rng>(domain: &DomainData, row: usize, user: usize, count: usize, rng: &mut R, out: &mut Vec<Pair>) {
    let positives = &domain.positives[user];
    let n = domain.item_count();
    if positives.is_empty() || positives.len() >= n {
        return;
    }
    for _ in 0..count {
        let pos = positives[rng.random_range(0..positives.len())];
        let neg = loop {
            let cand = rng.random_range(0..n);
            if positives.binary_search(&cand).is_err() {
                break cand;
            }
        };
        out.push(Pair { row, pos, neg });
    }
}

/// Users shuffled once per epoch and cut into batches; each batch user gets
/// `samples_per_user` uniform (positive, negative) pairs per domain.
pub fn epoch_batches(data: &TrainingData, cfg: &TrainConfig, epoch: usize) -> Vec<Batch> {
    let mut users: Vec<usize> = (0..data.user_count)
        .filter(|&u| !data.target.positives[u].is_empty())
        .collect();
    users.shuffle(&mut stream(cfg.seed, TAG_SHUFFLE, epoch as u64, 0, 0));
    users
        .chunks(cfg.batch_size.max(1))
        .enumerate()
        .map(|(step, chunk)| {
            let mut rng = stream(cfg.seed, TAG_SAMPLE, epoch as u64, step as u64, 0);
            let mut batch = Batch {
                users: chunk.to_vec(),
                ..Default::default()
            };
            for (row, &u) in chunk.iter().enumerate() {
                sample_pairs(
                    &data.target,
                    row,
                    u,
                    cfg.samples_per_user,
                    &mut rng,
                    &mut batch.target_pairs,
                );
                sample_pairs(
                    &data.source,
                    row,
                    u,
                    cfg.samples_per_user,
                    &mut rng,
                    &mut batch.source_pairs,
                );
            }
            batch
        })
        .collect()
}

/// Gate uniforms and noise rows for a batch, one stream per `(epoch, step, user)`.
pub fn step_draws(seed: u64, epoch: usize, step: usize, users: &[usize], dim: usize) -> Draws {
    let mut uniform = Vec::with_capacity(users.len());
    let mut normal = Matrix::zeros(users.len(), dim);
    for (row, &u) in users.iter().enumerate() {
        let mut rng = stream(seed, TAG_DRAW, epoch as u64, step as u64, u as u64);
        uniform.push(Open01.sample(&mut rng));
        for x in normal.row_mut(row) {
            *x = StandardNormal.sample(&mut rng);
        }
    }
    Draws { uniform, normal }
}

/// Adagrad with per-coordinate squared-gradient accumulators.
#[derive(Clone, Debug, PartialEq)]
pub struct Adagrad {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub accumulators: ModelParameters,
}

impl Adagrad {
    pub const EPSILON: f64 = 1e-10;

    pub fn new(params: &ModelParameters, learning_rate: f64, weight_decay: f64) -> Self {
        Adagrad {
            learning_rate,
            weight_decay,
            accumulators: params.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut ModelParameters, grads: &ModelParameters) {
        let lr = self.learning_rate;
        let wd = self.weight_decay;
        let p = params.tensors_mut();
        let a = self.accumulators.tensors_mut();
        let g = grads.tensors();
        for (((_, p), (_, a)), (_, g)) in p.into_iter().zip(a).zip(g) {
            let it = p.as_mut_slice().iter_mut().zip(a.as_mut_slice()).zip(g.as_slice());
            for ((p, a), &g) in it {
                let g = g + wd * *p;
                if g == 0.0 {
                    continue;
                }
                *a += g * g;
                *p -= lr * g / (a.sqrt() + Self::EPSILON);
            }
        }
    }
}

/// One optimization step. A non-finite loss aborts before any update.
pub fn train_step(
    params: &mut ModelParameters,
    optimizer: &mut Adagrad,
    data: &TrainingData,
    cfg: &TrainConfig,
    batch: &Batch,
    epoch: usize,
    step: usize,
) -> Result<LossBundle> {
    let draws = step_draws(cfg.seed, epoch, step, &batch.users, cfg.embedding_dim);
    let out = loss_and_gradients(params, data, cfg, batch, &draws, ForwardOptions::default())?;
    let grads = out.grads.expect("gradients requested");
    if !out.losses.is_finite() || !grads.is_finite() {
        let lambda_range = out
            .lambda
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &l| {
                (lo.min(l), hi.max(l))
            });
        return Err(Error::NonFinite {
            epoch,
            step,
            diagnostics: format!(
                "losses {:?}, lambda range {:?}, kl M {}, min row norm {}",
                out.losses, lambda_range, out.kl_m, out.min_norm
            ),
        });
    }
    optimizer.step(params, &grads);
    Ok(out.losses)
}

/// Mean losses over an epoch's steps.
fn mean_losses(steps: &[LossBundle]) -> Option<LossBundle> {
    let first = steps.first()?;
    let n = steps.len() as f64;
    let avg = |f: fn(&LossBundle) -> f64| steps.iter().map(f).sum::<f64>() / n;
    Some(LossBundle {
        l_pred_t: avg(|b| b.l_pred_t),
        l_pred_s: avg(|b| b.l_pred_s),
        l_kl: avg(|b| b.l_kl),
        l_cl: avg(|b| b.l_cl),
        total: avg(|b| b.total),
        alphas: first.alphas,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean losses over the epoch; absent for the initial evaluation.
    pub losses: Option<LossBundle>,
    pub val_ndcg100: f64,
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub best: ModelParameters,
    pub best_epoch: usize,
    pub log: Vec<EpochRecord>,
}

pub fn validation_ndcg100(
    params: &ModelParameters,
    data: &TrainingData,
    cfg: &TrainConfig,
    validation: &[HeldOut],
) -> Result<f64> {
    let inference = infer(params, data, cfg)?;
    let report = evaluate(&inference, &data.target.positives, validation, &[100]);
    Ok(report.aggregate(Metric::Ndcg, 100).unwrap_or(0.0))
}

/// Trains from seeded initial parameters, evaluating validation NDCG@100
/// before the first epoch and after each one. Returns the best parameters.
/// `on_epoch` sees every record as it is produced.
pub fn fit(
    cfg: &TrainConfig,
    data: &TrainingData,
    validation: &[HeldOut],
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<FitOutcome> {
    cfg.validate()?;
    if data.target.positives.iter().all(Vec::is_empty) {
        return Err(Error::EmptyDataset("no target training interactions".into()));
    }
    let mut params = init_parameters(data, cfg);
    let mut optimizer = Adagrad::new(&params, cfg.learning_rate, cfg.weight_decay);

    let initial = EpochRecord {
        epoch: 0,
        losses: None,
        val_ndcg100: validation_ndcg100(&params, data, cfg, validation)?,
    };
    on_epoch(&initial);
    let mut best = params.clone();
    let mut best_score = initial.val_ndcg100;
    let mut best_epoch = 0;
    let mut log = vec![initial];

    for epoch in 1..=cfg.max_epochs {
        let batches = epoch_batches(data, cfg, epoch);
        let mut steps = Vec::with_capacity(batches.len());
        for (step, batch) in batches.iter().enumerate() {
            steps.push(train_step(&mut params, &mut optimizer, data, cfg, batch, epoch, step)?);
        }
        let record = EpochRecord {
            epoch,
            losses: mean_losses(&steps),
            val_ndcg100: validation_ndcg100(&params, data, cfg, validation)?,
        };
        log::debug!("epoch {epoch}: {record:?}");
        on_epoch(&record);
        if record.val_ndcg100 > best_score {
            best_score = record.val_ndcg100;
            best = params.clone();
            best_epoch = epoch;
        }
        log.push(record);
        if cfg.patience > 0 && epoch - best_epoch >= cfg.patience {
            log::info!("early stop at epoch {epoch}; best epoch {best_epoch}");
            break;
        }
    }
    Ok(FitOutcome { best, best_epoch, log })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientCheck {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, abs_floor)`.
    pub max_rel_error: f64,
    pub worst: Option<(&'static str, usize)>,
    pub compared: usize,
    /// The instance sits on a floor boundary; nothing was compared.
    pub non_smooth: bool,
}

/// Compares analytic gradients of the total loss with central differences.
/// Batch statistics and the stochastic draws are held fixed across
/// evaluations. Relative errors use `abs_floor` as the smallest denominator so
/// that coordinates with vanishing gradients are judged absolutely.
pub fn gradient_check(
    params: &ModelParameters,
    data: &TrainingData,
    cfg: &TrainConfig,
    batch: &Batch,
    draws: &Draws,
    epsilon: f64,
    abs_floor: f64,
) -> Result<GradientCheck> {
    gradient_check_at(params, data, cfg, batch, draws, epsilon, abs_floor, None)
}

/// [`gradient_check`] with the relaxed gate optionally replaced by a constant.
/// Floor proximity only marks a point non-smooth for terms that contribute.
#[allow(clippy::too_many_arguments)]
pub fn gradient_check_at(
    params: &ModelParameters,
    data: &TrainingData,
    cfg: &TrainConfig,
    batch: &Batch,
    draws: &Draws,
    epsilon: f64,
    abs_floor: f64,
    fixed_gate: Option<f64>,
) -> Result<GradientCheck> {
    let first = ForwardOptions {
        fixed_gate,
        ..ForwardOptions::default()
    };
    let base = loss_and_gradients(params, data, cfg, batch, draws, first)?;
    let comp = &cfg.compression;
    let learned_gate = fixed_gate.is_none();
    let near_floor = (learned_gate && cfg.alphas.kl > 0.0 && base.kl_m <= 10.0 * comp.m_floor)
        || (cfg.alphas.contrast > 0.0 && base.min_norm <= 10.0 * comp.norm_floor)
        || (learned_gate
            && base
                .stats
                .as_ref()
                .is_some_and(|s| s.std.iter().any(|&v| v <= comp.sigma_floor)));
    if near_floor {
        return Ok(GradientCheck {
            max_rel_error: 0.0,
            worst: None,
            compared: 0,
            non_smooth: true,
        });
    }
    let grads = base.grads.expect("gradients requested");
    let opts = ForwardOptions {
        frozen_stats: base.stats.as_ref(),
        fixed_gate,
        skip_gradients: true,
    };
    let eval =
        |p: &ModelParameters| -> Result<f64> { Ok(loss_and_gradients(p, data, cfg, batch, draws, opts)?.losses.total) };

    let mut probe = params.clone();
    let mut max_rel_error = 0.0f64;
    let mut worst = None;
    let mut compared = 0;
    let names: Vec<&'static str> = params.tensors().iter().map(|t| t.0).collect();
    for (t, name) in names.iter().enumerate() {
        let len = grads.tensors()[t].1.as_slice().len();
        for k in 0..len {
            let orig = probe.tensors()[t].1.as_slice()[k];
            probe.tensors_mut()[t].1.as_mut_slice()[k] = orig + epsilon;
            let plus = eval(&probe)?;
            probe.tensors_mut()[t].1.as_mut_slice()[k] = orig - epsilon;
            let minus = eval(&probe)?;
            probe.tensors_mut()[t].1.as_mut_slice()[k] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let analytic = grads.tensors()[t].1.as_slice()[k];
            let denom = analytic.abs().max(numeric.abs()).max(abs_floor);
            let rel = (analytic - numeric).abs() / denom;
            if rel > max_rel_error {
                max_rel_error = rel;
                worst = Some((*name, k));
            }
            compared += 1;
        }
    }
    Ok(GradientCheck {
        max_rel_error,
        worst,
        compared,
        non_smooth: false,
    })
}

const MAGIC: &[u8; 8] = b"COTRANS\0";
const VERSION: u32 = 1;

/// Serializes named tensors: magic, version, count, then per tensor the name
/// length and bytes, rows, cols and little-endian `f64` data.
pub fn write_checkpoint<W: Write>(params: &ModelParameters, mut w: W) -> std::io::Result<()> {
    let tensors = params.tensors();
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, m) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(m.rows() as u64).to_le_bytes())?;
        w.write_all(&(m.cols() as u64).to_le_bytes())?;
        for v in m.as_slice() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

fn read_exact<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Checkpoint(format!("truncated: {e}")))?;
    Ok(buf)
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ModelParameters> {
    if &read_exact::<8, _>(&mut r)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(read_exact(&mut r)?);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(read_exact(&mut r)?);
    let mut tensors = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = u32::from_le_bytes(read_exact(&mut r)?) as usize;
        if len > 256 {
            return Err(Error::Checkpoint(format!("tensor name length {len}")));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|e| Error::Checkpoint(format!("truncated: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("name not utf-8".into()))?;
        let rows = u64::from_le_bytes(read_exact(&mut r)?) as usize;
        let cols = u64::from_le_bytes(read_exact(&mut r)?) as usize;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Checkpoint("shape overflow".into()))?;
        let mut data = Vec::with_capacity(n.min(1 << 24));
        for _ in 0..n {
            data.push(f64::from_le_bytes(read_exact(&mut r)?));
        }
        tensors.push((name, Matrix::from_vec(rows, cols, data)?));
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if !rest.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
    }
    ModelParameters::from_tensors(tensors)
}

pub fn save_checkpoint(params: &ModelParameters, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(params, &mut buf).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParameters> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(bytes.as_slice())
}
