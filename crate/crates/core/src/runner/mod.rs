//! Training, evaluation and attack campaigns.
//!
//! Training minimizes the geometric-mean objective over the active loss terms
//! of a task subset. The mean is taken over batch-averaged terms, so each
//! sample's contribution is a fixed linear combination of its own losses once
//! the batch averages are known.

mod campaign;
mod evaluate;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use ndarray::{Array3, ArrayD};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{
    active_terms, assign_targets, class_balance_weights, class_pixel_counts, compute_losses, mtl_with_gradient, DenseTargets,
    LossConfig, LossTerm,
};
use crate::maskcodec::{fit_pca, PcaBasis, DEFAULT_CODE_DIM, DEFAULT_MASK_SIDE};
use crate::model::{Checkpoint, DecodeParams, Model, ModelConfig};
use crate::scenegen::{Dataset, Sample, SceneSpec};
use crate::tasks::TaskSet;
use crate::tensor::Graph;

pub use campaign::{
    class_detection_losses, key_direction, read_summary, run_campaign, write_summary, AttackSpec, Campaign, CampaignCell,
    CampaignResult, CellResult, ExtraStat, HideConfig, HideHead, SummaryRow, ASPECT_MIN_SCORE,
};
pub use evaluate::{evaluate, evaluate_outputs, Evaluator};

pub const RUN_CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub tasks: TaskSet,
    pub train_data: PathBuf,
    pub val_data: Option<PathBuf>,
    /// Receives `model.ckpt`, `loss_curve.csv` and `run.json`.
    pub out_dir: PathBuf,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Epoch fractions at which the learning rate drops.
    pub lr_milestones: Vec<f64>,
    pub lr_decay: f64,
    pub batch_size: usize,
    /// Global gradient-norm clip; `None` disables it.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    /// Validate every this many epochs; 0 never.
    pub eval_every: usize,
    /// Use only the first `n` training samples.
    pub max_samples: Option<usize>,
    /// Weight segmentation classes by inverse pixel frequency.
    pub balance_classes: bool,
    pub mask_side: usize,
    pub code_dim: usize,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub decode: DecodeParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: RUN_CONFIG_VERSION,
            tasks: TaskSet::all(),
            train_data: PathBuf::from("data/train"),
            val_data: None,
            out_dir: PathBuf::from("runs/default"),
            epochs: 60,
            learning_rate: 1e-3,
            lr_milestones: vec![0.7, 0.9],
            lr_decay: 0.1,
            batch_size: 8,
            grad_clip: Some(10.0),
            seed: 0,
            eval_every: 0,
            max_samples: None,
            balance_classes: true,
            mask_side: DEFAULT_MASK_SIDE,
            code_dim: DEFAULT_CODE_DIM,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            decode: DecodeParams::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != RUN_CONFIG_VERSION {
            return Err(Error::Config(format!("run config schema {} (expected {RUN_CONFIG_VERSION})", self.schema_version)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.lr_decay > 0.0) {
            return Err(Error::Config("learning rate and decay must be positive".into()));
        }
        if self.lr_milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(Error::Config("lr milestones are epoch fractions in [0, 1]".into()));
        }
        self.loss.weights.validate()?;
        self.model.validate()
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self
            .lr_milestones
            .iter()
            .filter(|&&m| epoch >= (m * self.epochs as f64).round() as usize)
            .count();
        self.learning_rate * self.lr_decay.powi(drops as i32)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Epoch means of the objective and of every active term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub mtl: f64,
    pub terms: Vec<(LossTerm, f64)>,
    pub seconds: f64,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub curve: Vec<EpochStats>,
}

struct Adam {
    m: Vec<ArrayD<f32>>,
    v: Vec<ArrayD<f32>>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(model: &Model) -> Self {
        let zeros = || model.params().iter().map(|p| ArrayD::zeros(p.value.raw_dim())).collect();
        Adam { m: zeros(), v: zeros(), t: 0 }
    }

    fn step(&mut self, model: &mut Model, grads: &[Option<ArrayD<f32>>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        let step = (lr * c2.sqrt() / c1) as f32;
        let (b1, b2, eps) = (Self::B1 as f32, Self::B2 as f32, (Self::EPS * c2.sqrt()) as f32);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            ndarray::Zip::from(&mut model.params_mut()[i].value).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= step * *m / (v.sqrt() + eps);
            });
        }
    }
}

/// Fits the mask basis on every training instance.
pub fn fit_mask_basis(samples: &[Sample], side: usize, k: usize) -> Result<PcaBasis> {
    let fit = fit_pca(samples.iter().flat_map(|s| s.instances.iter().map(|i| (&i.mask, &i.bbox))), side, k)?;
    Ok(fit.basis)
}

fn model_config_for(cfg: &RunConfig, scene: &SceneSpec) -> ModelConfig {
    ModelConfig {
        num_stuff_classes: scene.stuff_classes.len(),
        num_thing_classes: scene.thing_classes.len(),
        mask_code_dim: cfg.code_dim,
        seed: cfg.seed,
        ..cfg.model.clone()
    }
}

/// Trains on in-memory samples. `on_epoch` sees every finished epoch.
pub fn train_on(
    cfg: &RunConfig,
    scene: &SceneSpec,
    samples: &[Sample],
    mut on_epoch: impl FnMut(&EpochStats, &Model),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let tasks = cfg.tasks;
    let terms = active_terms(tasks);
    let mut model = Model::new(model_config_for(cfg, scene))?;
    let basis = if tasks.contains(crate::Task::Is) {
        Some(fit_mask_basis(samples, cfg.mask_side, cfg.code_dim)?)
    } else {
        None
    };
    let mut loss_cfg = cfg.loss.clone();
    if tasks.contains(crate::Task::Ss) && cfg.balance_classes && loss_cfg.class_weights.is_empty() {
        loss_cfg.class_weights = class_balance_weights(&class_pixel_counts(samples, scene.num_classes()));
    }
    let targets: Vec<DenseTargets> =
        samples.iter().map(|s| assign_targets(s, &model.config, basis.as_ref())).collect::<Result<_>>()?;
    let mut adam = Adam::new(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_696e);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut mtl_sum = 0.0;
        let mut term_sums = vec![0.0; terms.len()];
        for batch in order.chunks(cfg.batch_size) {
            let (mtl, means, grads) = batch_gradients(&model, tasks, &terms, &loss_cfg, samples, &targets, batch)?;
            let grads = clip(grads, cfg.grad_clip);
            adam.step(&mut model, &grads, lr);
            mtl_sum += mtl * batch.len() as f64;
            for (s, m) in term_sums.iter_mut().zip(&means) {
                *s += m * batch.len() as f64;
            }
        }
        let n = samples.len() as f64;
        let stats = EpochStats {
            epoch,
            lr,
            mtl: mtl_sum / n,
            terms: terms.iter().copied().zip(term_sums.iter().map(|s| s / n)).collect(),
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!("epoch {epoch}: mtl {:.4} ({:.1}s)", stats.mtl, stats.seconds);
        on_epoch(&stats, &model);
        curve.push(stats);
    }
    let metadata = serde_json::json!({
        "run_config": cfg,
        "training_samples": samples.len(),
        "final_mtl": curve.last().map(|s| s.mtl),
    });
    let checkpoint = Checkpoint {
        model,
        tasks,
        basis,
        class_weights: (!loss_cfg.class_weights.is_empty())
            .then(|| loss_cfg.class_weights.iter().map(|&w| w as f32).collect()),
        scene: Some(scene.clone()),
        metadata,
    };
    Ok(TrainOutcome { checkpoint, curve })
}

type BatchGrads = (f64, Vec<f64>, Vec<Option<ArrayD<f32>>>);

/// Objective, batch term means and accumulated parameter gradients of one batch.
fn batch_gradients(
    model: &Model,
    tasks: TaskSet,
    terms: &[LossTerm],
    loss_cfg: &LossConfig,
    samples: &[Sample],
    targets: &[DenseTargets],
    batch: &[usize],
) -> Result<BatchGrads> {
    let mut passes = Vec::with_capacity(batch.len());
    let mut sums = vec![0.0; terms.len()];
    for &i in batch {
        let mut g = Graph::<f32>::new();
        let x = g.constant(samples[i].image.clone().into_dyn());
        let pass = model.forward(&mut g, x, tasks, true)?;
        let losses = compute_losses(&mut g, &pass.dense, &targets[i], loss_cfg, terms)?;
        for (k, &(t, node)) in losses.nodes.iter().enumerate() {
            let v = g.scalar(node) as f64;
            if !v.is_finite() {
                return Err(Error::NonFinite { term: t.to_string(), sample: samples[i].id.clone() });
            }
            sums[k] += v;
        }
        passes.push((g, pass.params, losses));
    }
    let b = batch.len() as f64;
    let means: Vec<f64> = sums.iter().map(|s| s / b).collect();
    let pairs: Vec<(LossTerm, f64)> = terms.iter().copied().zip(means.iter().copied()).collect();
    let (mtl, coeffs) = mtl_with_gradient(&pairs, &loss_cfg.weights, loss_cfg.epsilon_floor)?;
    let mut grads: Vec<Option<ArrayD<f32>>> = vec![None; model.params().len()];
    for (mut g, params, losses) in passes {
        let combo: Vec<_> = losses.nodes.iter().zip(&coeffs).map(|(&(_, n), &c)| (n, (c / b) as f32)).collect();
        let root = g.linear_combination(&combo);
        let mut sample_grads = g.backward(root);
        for (pi, node) in params {
            if let Some(gr) = sample_grads.take(node) {
                match &mut grads[pi] {
                    Some(acc) => *acc += &gr,
                    slot => *slot = Some(gr),
                }
            }
        }
    }
    Ok((mtl, means, grads))
}

fn clip(mut grads: Vec<Option<ArrayD<f32>>>, max_norm: Option<f64>) -> Vec<Option<ArrayD<f32>>> {
    let Some(max_norm) = max_norm else { return grads };
    let sq: f64 = grads.iter().flatten().map(|g| g.iter().map(|&v| (v as f64).powi(2)).sum::<f64>()).sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        grads.iter_mut().flatten().for_each(|g| g.mapv_inplace(|v| v * s));
    }
    grads
}

pub fn write_loss_curve(path: &Path, curve: &[EpochStats]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let terms: Vec<LossTerm> = curve.first().map(|s| s.terms.iter().map(|t| t.0).collect()).unwrap_or_default();
    let mut header = vec!["epoch".to_string(), "lr".into(), "mtl".into(), "seconds".into()];
    header.extend(terms.iter().map(|t| t.to_string()));
    w.write_record(&header)?;
    for s in curve {
        let mut row = vec![s.epoch.to_string(), s.lr.to_string(), s.mtl.to_string(), format!("{:.3}", s.seconds)];
        row.extend(s.terms.iter().map(|t| t.1.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Loads the datasets named in `cfg`, trains, and writes the checkpoint, loss
/// curve and resolved config into `cfg.out_dir`.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = Dataset::open(&cfg.train_data)?;
    let mut samples = data.load_all()?;
    if let Some(n) = cfg.max_samples {
        samples.truncate(n);
    }
    let val = match &cfg.val_data {
        Some(p) if cfg.eval_every > 0 => Some(Dataset::open(p)?.load_all()?),
        _ => None,
    };
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let mut val_error = None;
    let outcome = train_on(cfg, data.spec(), &samples, |stats, model| {
        let Some(val) = &val else { return };
        if (stats.epoch + 1) % cfg.eval_every != 0 {
            return;
        }
        let outputs: Result<Vec<_>> = val.iter().map(|s| model.predict(&s.image, cfg.tasks)).collect();
        match outputs {
            Ok(outs) => {
                let rep = evaluate_outputs(cfg.tasks, data.spec(), None, &cfg.decode, val.iter().zip(&outs));
                log::info!("epoch {} validation: {:?}", stats.epoch, rep.values);
            }
            Err(e) => val_error = Some(e),
        }
    })?;
    if let Some(e) = val_error {
        return Err(e);
    }
    outcome.checkpoint.save(&cfg.out_dir.join("model.ckpt"))?;
    write_loss_curve(&cfg.out_dir.join("loss_curve.csv"), &outcome.curve)?;
    let p = cfg.out_dir.join("run.json");
    fs::write(&p, serde_json::to_vec_pretty(cfg)?).map_err(|e| Error::io(&p, e))?;
    Ok(outcome)
}

/// Mean wall-clock time of `n` single-image forward passes on random inputs.
pub fn timing_probe(model: &Model, tasks: TaskSet, n: usize, height: usize, width: usize, seed: u64) -> Result<Duration> {
    if n == 0 {
        return Err(Error::Config("timing probe needs at least one pass".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = Duration::ZERO;
    for _ in 0..n {
        let image = Array3::from_shape_simple_fn((3, height, width), || rng.gen::<f32>());
        let t = Instant::now();
        model.predict(&image, tasks)?;
        total += t.elapsed();
    }
    Ok(total / n as u32)
}
