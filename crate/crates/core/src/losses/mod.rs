//! Task losses, their semantic/geometric groupings and the geometric-mean
//! multi-task objective, plus the dense target assignment they consume.

mod targets;
mod terms;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::DenseNodes;
use crate::scenegen::Sample;
use crate::tasks::{Task, TaskSet};
use crate::tensor::{Graph, NodeId, Scalar};

pub use targets::{assign_targets, centerness, AccessCounts, DenseTargets, DetTarget, LevelTargets};
pub use terms::{
    bce_logit, cross_entropy, giou_loss_dists, loss_cent, loss_cls, loss_depth, loss_id, loss_is, loss_reg, loss_seg, rmse, varifocal,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossTerm {
    Reg,
    Cls,
    Cent,
    Seg,
    Is,
    Depth,
    Id,
}

impl LossTerm {
    pub const ALL: [LossTerm; 7] =
        [LossTerm::Reg, LossTerm::Cls, LossTerm::Cent, LossTerm::Seg, LossTerm::Is, LossTerm::Depth, LossTerm::Id];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::Reg => "reg",
            LossTerm::Cls => "cls",
            LossTerm::Cent => "cent",
            LossTerm::Seg => "seg",
            LossTerm::Is => "is",
            LossTerm::Depth => "depth",
            LossTerm::Id => "id",
        }
    }

    pub fn task(self) -> Task {
        match self {
            LossTerm::Reg | LossTerm::Cls | LossTerm::Cent => Task::Od,
            LossTerm::Seg => Task::Ss,
            LossTerm::Is => Task::Is,
            LossTerm::Depth => Task::D,
            LossTerm::Id => Task::Id,
        }
    }

    /// Member of `L_semantic = L_reg + L_cls + L_seg + L_is`.
    pub fn is_semantic(self) -> bool {
        matches!(self, LossTerm::Reg | LossTerm::Cls | LossTerm::Seg | LossTerm::Is)
    }

    /// Member of `L_geometric = L_depth + L_id`.
    pub fn is_geometric(self) -> bool {
        matches!(self, LossTerm::Depth | LossTerm::Id)
    }
}

impl fmt::Display for LossTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossTerm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossTerm::ALL
            .into_iter()
            .find(|t| t.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown loss '{s}'")))
    }
}

/// Loss terms trained for a task set: OD contributes reg, cls and cent.
pub fn active_terms(tasks: TaskSet) -> Vec<LossTerm> {
    LossTerm::ALL.into_iter().filter(|t| tasks.contains(t.task())).collect()
}

/// Fixed weights `λ_i` of the multi-task objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub reg: f64,
    pub cls: f64,
    pub cent: f64,
    pub seg: f64,
    pub is: f64,
    pub depth: f64,
    pub id: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { reg: 1.0, cls: 1.0, cent: 1.0, seg: 1.0, is: 1.0, depth: 1.0, id: 1.0 }
    }
}

impl LossWeights {
    pub fn get(&self, t: LossTerm) -> f64 {
        match t {
            LossTerm::Reg => self.reg,
            LossTerm::Cls => self.cls,
            LossTerm::Cent => self.cent,
            LossTerm::Seg => self.seg,
            LossTerm::Is => self.is,
            LossTerm::Depth => self.depth,
            LossTerm::Id => self.id,
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        LossWeights {
            reg: self.reg * c,
            cls: self.cls * c,
            cent: self.cent * c,
            seg: self.seg * c,
            is: self.is * c,
            depth: self.depth * c,
            id: self.id * c,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if LossTerm::ALL.iter().all(|&t| self.get(t) > 0.0 && self.get(t).is_finite()) {
            Ok(())
        } else {
            Err(Error::Config("loss weights must be positive and finite".into()))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub weights: LossWeights,
    /// Segmentation class weights; empty means uniform.
    pub class_weights: Vec<f64>,
    pub vfl_alpha: f64,
    pub vfl_gamma: f64,
    /// Lower clamp of each weighted term inside the geometric mean.
    pub epsilon_floor: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            weights: LossWeights::default(),
            class_weights: Vec::new(),
            vfl_alpha: 0.75,
            vfl_gamma: 2.0,
            epsilon_floor: 1e-8,
        }
    }
}

/// Pixel count per segmentation class over a sample set.
pub fn class_pixel_counts<'a>(samples: impl IntoIterator<Item = &'a Sample>, num_classes: usize) -> Vec<u64> {
    let mut counts = vec![0u64; num_classes];
    for s in samples {
        for &c in s.seg.iter() {
            if (c as usize) < num_classes {
                counts[c as usize] += 1;
            }
        }
    }
    counts
}

/// ENet-style weights `1 / ln(1.02 + f_c)` renormalized to mean 1.
pub fn class_balance_weights(counts: &[u64]) -> Vec<f64> {
    let total = counts.iter().sum::<u64>().max(1) as f64;
    let raw: Vec<f64> = counts.iter().map(|&c| 1.0 / (1.02 + c as f64 / total).ln()).collect();
    let mean = raw.iter().sum::<f64>() / raw.len().max(1) as f64;
    raw.iter().map(|w| w / mean).collect()
}

/// Loss values of one evaluation; terms not computed are absent.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub terms: BTreeMap<LossTerm, f64>,
}

impl LossBundle {
    pub fn get(&self, t: LossTerm) -> Option<f64> {
        self.terms.get(&t).copied()
    }

    /// `(L_semantic, L_geometric)`; absent terms count as zero.
    pub fn grouped(&self) -> (f64, f64) {
        let sum = |f: fn(LossTerm) -> bool| self.terms.iter().filter(|(t, _)| f(**t)).map(|(_, v)| v).sum();
        (sum(LossTerm::is_semantic), sum(LossTerm::is_geometric))
    }

    /// Geometric mean of the weighted active terms with the lower clamp.
    pub fn mtl(&self, weights: &LossWeights, active: &[LossTerm], floor: f64) -> Result<f64> {
        let vals = active
            .iter()
            .map(|&t| {
                self.get(t)
                    .map(|v| (weights.get(t) * v).max(floor))
                    .ok_or_else(|| Error::Config(format!("loss {t} not computed")))
            })
            .collect::<Result<Vec<_>>>()?;
        geometric_mean(&vals)
    }
}

fn geometric_mean(vals: &[f64]) -> Result<f64> {
    if vals.is_empty() {
        return Err(Error::Config("multi-task loss needs at least one active term".into()));
    }
    Ok((vals.iter().map(|v| v.ln()).sum::<f64>() / vals.len() as f64).exp())
}

/// Free function form of the grouping.
pub fn grouped_losses(bundle: &LossBundle) -> (f64, f64) {
    bundle.grouped()
}

/// `L_MTL = Π (λ_i·L_i)^{1/n}` over `active`.
pub fn mtl_loss(bundle: &LossBundle, weights: &LossWeights, active: &[LossTerm]) -> Result<f64> {
    bundle.mtl(weights, active, LossConfig::default().epsilon_floor)
}

/// Value of `L_MTL` at `losses` and its partial derivatives `L_MTL / (n·L_i)`;
/// clamped terms get a zero derivative.
pub fn mtl_with_gradient(losses: &[(LossTerm, f64)], weights: &LossWeights, floor: f64) -> Result<(f64, Vec<f64>)> {
    let n = losses.len() as f64;
    let clamped: Vec<(f64, bool)> = losses
        .iter()
        .map(|&(t, v)| {
            let w = weights.get(t) * v;
            if w <= floor {
                (floor, true)
            } else {
                (w, false)
            }
        })
        .collect();
    let value = geometric_mean(&clamped.iter().map(|c| c.0).collect::<Vec<_>>())?;
    let grads = clamped
        .iter()
        .zip(losses)
        .map(|(&(_, c), &(_, v))| if c { 0.0 } else { value / (n * v) })
        .collect();
    Ok((value, grads))
}

/// Loss nodes of one forward pass.
#[derive(Clone, Debug, Default)]
pub struct LossNodes {
    pub nodes: Vec<(LossTerm, NodeId)>,
}

impl LossNodes {
    pub fn get(&self, t: LossTerm) -> Option<NodeId> {
        self.nodes.iter().find(|(k, _)| *k == t).map(|x| x.1)
    }

    pub fn bundle<T: Scalar>(&self, g: &Graph<T>) -> LossBundle {
        LossBundle { terms: self.nodes.iter().map(|&(t, n)| (t, g.scalar(n).as_f64())).collect() }
    }
}

fn missing(t: LossTerm) -> Error {
    Error::Config(format!("loss {t} needs outputs of task {} which were not computed", t.task()))
}

/// Builds the requested loss terms on top of a forward pass.
pub fn compute_losses<T: Scalar>(
    g: &mut Graph<T>,
    dense: &DenseNodes,
    targets: &DenseTargets,
    cfg: &LossConfig,
    terms: &[LossTerm],
) -> Result<LossNodes> {
    let mut out = LossNodes::default();
    for &t in terms {
        let has_levels = !dense.levels.is_empty();
        let node = match t {
            LossTerm::Reg | LossTerm::Cls | LossTerm::Cent if !has_levels => return Err(missing(t)),
            LossTerm::Reg => {
                let ids: Vec<_> = dense.levels.iter().map(|l| l.box_dists).collect();
                loss_reg(g, &ids, targets)
            }
            LossTerm::Cls => {
                let ids: Vec<_> = dense.levels.iter().map(|l| l.cls_logits).collect();
                loss_cls(g, &ids, targets, cfg.vfl_alpha, cfg.vfl_gamma)
            }
            LossTerm::Cent => {
                let ids: Vec<_> = dense.levels.iter().map(|l| l.centerness).collect();
                loss_cent(g, &ids, targets)
            }
            LossTerm::Seg => {
                let logits = dense.seg_logits.ok_or_else(|| missing(t))?;
                let c = g.shape(logits)[0];
                let weights = if cfg.class_weights.is_empty() { vec![1.0; c] } else { cfg.class_weights.clone() };
                if weights.len() != c {
                    return Err(Error::Config(format!("{} class weights for {c} classes", weights.len())));
                }
                loss_seg(g, logits, targets, &weights)
            }
            LossTerm::Is => {
                let ids = dense.levels.iter().map(|l| l.mask_codes).collect::<Option<Vec<_>>>();
                let ids = ids.filter(|v| !v.is_empty()).ok_or_else(|| missing(t))?;
                loss_is(g, &ids, targets)
                    .ok_or_else(|| Error::Config("instance segmentation loss needs a PCA basis".into()))?
            }
            LossTerm::Depth => {
                let d = dense.depth_map.ok_or_else(|| missing(t))?;
                loss_depth(g, d, targets)
            }
            LossTerm::Id => {
                let ids = dense.levels.iter().map(|l| l.inst_depth).collect::<Option<Vec<_>>>();
                let ids = ids.filter(|v| !v.is_empty()).ok_or_else(|| missing(t))?;
                loss_id(g, &ids, targets)
            }
        };
        out.nodes.push((t, node));
    }
    Ok(out)
}

/// Geometric-mean node over `(loss node, λ)` pairs with the lower clamp.
pub fn mtl_node<T: Scalar>(g: &mut Graph<T>, terms: &[(NodeId, f64)], floor: f64) -> Result<NodeId> {
    let n = terms.len() as f64;
    let weighted: Vec<(f64, f64)> = terms.iter().map(|&(id, w)| (g.scalar(id).as_f64(), w)).collect();
    let clamped: Vec<f64> = weighted.iter().map(|&(v, w)| (v * w).max(floor)).collect();
    let value = geometric_mean(&clamped)?;
    let coeffs: Vec<T> = weighted
        .iter()
        .map(|&(v, w)| if v * w <= floor { T::zero() } else { T::of(value / (n * v)) })
        .collect();
    let ids: Vec<NodeId> = terms.iter().map(|t| t.0).collect();
    Ok(g.apply(
        &ids,
        ndarray::ArrayD::from_elem(ndarray::IxDyn(&[]), T::of(value)),
        Box::new(move |ctx| {
            let up = *ctx.grad.iter().next().unwrap();
            coeffs.iter().map(|&c| Some(ndarray::ArrayD::from_elem(ndarray::IxDyn(&[]), c * up))).collect()
        }),
    ))
}

/// Which objective an attack maximizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossSelector {
    Mtl,
    Semantic,
    Geometric,
    #[serde(untagged)]
    Term(LossTerm),
}

impl fmt::Display for LossSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossSelector::Mtl => f.write_str("mtl"),
            LossSelector::Semantic => f.write_str("semantic"),
            LossSelector::Geometric => f.write_str("geometric"),
            LossSelector::Term(t) => write!(f, "{t}"),
        }
    }
}

impl FromStr for LossSelector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mtl" => Ok(LossSelector::Mtl),
            "semantic" => Ok(LossSelector::Semantic),
            "geometric" => Ok(LossSelector::Geometric),
            other => other.parse().map(LossSelector::Term),
        }
    }
}

impl LossSelector {
    /// Loss terms the objective reads, restricted to those available for `tasks`.
    pub fn terms(self, tasks: TaskSet) -> Result<Vec<LossTerm>> {
        let active = active_terms(tasks);
        let picked: Vec<LossTerm> = match self {
            LossSelector::Mtl => active,
            LossSelector::Semantic => active.into_iter().filter(|t| t.is_semantic()).collect(),
            LossSelector::Geometric => active.into_iter().filter(|t| t.is_geometric()).collect(),
            LossSelector::Term(t) => active.into_iter().filter(|&a| a == t).collect(),
        };
        if picked.is_empty() {
            return Err(Error::Config(format!("loss selector '{self}' has no terms for tasks {tasks}")));
        }
        Ok(picked)
    }

    /// Scalar objective node built from already computed loss nodes.
    pub fn objective<T: Scalar>(self, g: &mut Graph<T>, losses: &LossNodes, cfg: &LossConfig) -> Result<NodeId> {
        let terms: Vec<(NodeId, f64)> = losses.nodes.iter().map(|&(t, n)| (n, cfg.weights.get(t))).collect();
        match self {
            LossSelector::Mtl => mtl_node(g, &terms, cfg.epsilon_floor),
            _ => {
                let ones: Vec<(NodeId, T)> = terms.iter().map(|&(n, _)| (n, T::one())).collect();
                Ok(g.linear_combination(&ones))
            }
        }
    }
}

#[cfg(test)]
mod tests;
