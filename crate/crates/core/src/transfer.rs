//! Dual-domain predictors over the fused user vector and the total objective.

use serde::{Deserialize, Serialize};

use crate::compression::{sigmoid, softplus};
use crate::error::{Error, Result};
use crate::matrix::dot;

/// Loss weights `(α1, α2, α3)` for the source prediction, compression bound and
/// contrastive terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Alphas {
    pub source_pred: f64,
    pub kl: f64,
    pub contrast: f64,
}

impl Alphas {
    /// Book→Movie setting from the published hyperparameter table.
    pub const BOOK_TO_MOVIE: Alphas = Alphas {
        source_pred: 0.01,
        kl: 1.0,
        contrast: 1.0,
    };

    pub fn new(source_pred: f64, kl: f64, contrast: f64) -> Result<Self> {
        let a = Alphas {
            source_pred,
            kl,
            contrast,
        };
        a.validate()?;
        Ok(a)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha1", self.source_pred),
            ("alpha2", self.kl),
            ("alpha3", self.contrast),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::invalid(name, format!("must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

impl Default for Alphas {
    fn default() -> Self {
        Alphas::BOOK_TO_MOVIE
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_pred_t: f64,
    pub l_pred_s: f64,
    pub l_kl: f64,
    pub l_cl: f64,
    pub total: f64,
    pub alphas: Alphas,
}

impl LossBundle {
    pub fn is_finite(&self) -> bool {
        [self.l_pred_t, self.l_pred_s, self.l_kl, self.l_cl, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// `⟨Ĥ_i ⊕ E^T_i, E_item⟩` with `⊕` element-wise addition.
pub fn score(h_hat_user: &[f64], target_user: &[f64], item: &[f64]) -> Result<f64> {
    if h_hat_user.len() != target_user.len() || item.len() != target_user.len() {
        return Err(Error::Shape {
            context: "score",
            expected: (1, target_user.len()),
            actual: (h_hat_user.len(), item.len()),
        });
    }
    Ok(h_hat_user
        .iter()
        .zip(target_user)
        .zip(item)
        .map(|((h, t), e)| (h + t) * e)
        .sum())
}

/// Score against an already fused user vector.
pub fn fused_score(fused_user: &[f64], item: &[f64]) -> f64 {
    dot(fused_user, item)
}

/// Mean of `softplus(neg - pos)`.
pub fn bpr_loss(pos_scores: &[f64], neg_scores: &[f64]) -> Result<f64> {
    Ok(bpr_loss_with_grad(pos_scores, neg_scores)?.0)
}

/// BPR loss and its gradient with respect to each positive score. The
/// gradient with respect to the matching negative score is the negation.
pub fn bpr_loss_with_grad(pos_scores: &[f64], neg_scores: &[f64]) -> Result<(f64, Vec<f64>)> {
    if pos_scores.len() != neg_scores.len() {
        return Err(Error::Shape {
            context: "bpr_loss",
            expected: (pos_scores.len(), 1),
            actual: (neg_scores.len(), 1),
        });
    }
    if pos_scores.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let n = pos_scores.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(pos_scores.len());
    for (p, q) in pos_scores.iter().zip(neg_scores) {
        let diff = q - p;
        loss += softplus(diff);
        grad.push(-sigmoid(diff) / n);
    }
    Ok((loss / n, grad))
}

/// Per-pair prediction objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictionLoss {
    /// Pairwise `softplus(neg - pos)`.
    Bpr,
    /// Point-wise binary cross-entropy with the positive labelled 1 and the
    /// negative labelled 0.
    Bce,
}

impl std::str::FromStr for PredictionLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bpr" => Ok(PredictionLoss::Bpr),
            "bce" => Ok(PredictionLoss::Bce),
            other => Err(Error::invalid("prediction_loss", format!("unknown loss {other:?}"))),
        }
    }
}

impl std::fmt::Display for PredictionLoss {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PredictionLoss::Bpr => "bpr",
            PredictionLoss::Bce => "bce",
        })
    }
}

/// Mean prediction loss with per-pair gradients `(∂/∂pos, ∂/∂neg)`.
pub fn prediction_loss(
    kind: PredictionLoss,
    pos_scores: &[f64],
    neg_scores: &[f64],
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    match kind {
        PredictionLoss::Bpr => {
            let (loss, gpos) = bpr_loss_with_grad(pos_scores, neg_scores)?;
            let gneg = gpos.iter().map(|g| -g).collect();
            Ok((loss, gpos, gneg))
        }
        PredictionLoss::Bce => {
            if pos_scores.len() != neg_scores.len() {
                return Err(Error::Shape {
                    context: "bce_loss",
                    expected: (pos_scores.len(), 1),
                    actual: (neg_scores.len(), 1),
                });
            }
            if pos_scores.is_empty() {
                return Ok((0.0, Vec::new(), Vec::new()));
            }
            let n = pos_scores.len() as f64;
            let loss = pos_scores
                .iter()
                .zip(neg_scores)
                .map(|(p, q)| softplus(-p) + softplus(*q))
                .sum::<f64>()
                / n;
            let gpos = pos_scores.iter().map(|p| -sigmoid(-p) / n).collect();
            let gneg = neg_scores.iter().map(|q| sigmoid(*q) / n).collect();
            Ok((loss, gpos, gneg))
        }
    }
}

/// Weighted sum `L_T + α1 L_S + α2 L_KL + α3 L_CL`.
pub fn total_loss(l_pred_t: f64, l_pred_s: f64, l_kl: f64, l_cl: f64, alphas: Alphas) -> Result<LossBundle> {
    alphas.validate()?;
    let total = l_pred_t + alphas.source_pred * l_pred_s + alphas.kl * l_kl + alphas.contrast * l_cl;
    Ok(LossBundle {
        l_pred_t,
        l_pred_s,
        l_kl,
        l_cl,
        total,
        alphas,
    })
}
