//! Batch attack evaluation: one clean baseline, then every cell attacks every
//! image and is scored against that baseline.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::evaluate::Evaluator;
use crate::attacks::{
    argmax_map, build_hiding_target_depth, build_hiding_target_seg, dag_swap_attack, hiding_attack, pgd_attack, AttackConfig,
    AttackOutcome, DagConfig, HidingTarget, Victim,
};
use crate::error::{Error, Result};
use crate::losses::{assign_targets, giou_loss_dists, varifocal, DenseTargets, LossConfig};
use crate::metrics::{mean_aspect_ratio, metric_ratio, Direction, MetricReport, RegionAccumulator};
use crate::model::{decode_detections, Checkpoint, DecodeParams, DenseOutputs};
use crate::scenegen::{Sample, SceneSpec};

/// Detections below this score are ignored by the shape statistics.
pub const ASPECT_MIN_SCORE: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HideHead {
    Seg,
    Depth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HideConfig {
    /// Segmentation class index to hide.
    pub class: usize,
    pub head: HideHead,
    pub epsilon: f64,
    pub alpha: f64,
    pub iterations: Option<usize>,
}

impl HideConfig {
    pub fn new(class: usize, head: HideHead) -> Self {
        HideConfig { class, head, epsilon: 2.0, alpha: 1.0, iterations: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AttackSpec {
    Pgd(AttackConfig),
    Dag(DagConfig),
    Hide(HideConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CampaignCell {
    pub name: String,
    pub attack: AttackSpec,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Campaign {
    pub cells: Vec<CampaignCell>,
    /// Worker threads; 0 uses the global pool.
    pub jobs: usize,
    /// Adversarial examples written per cell.
    pub save_examples: usize,
    pub decode: DecodeParams,
}

/// A derived statistic measured on clean and attacked predictions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtraStat {
    pub clean: Option<f64>,
    pub attacked: Option<f64>,
    pub direction: Direction,
}

impl ExtraStat {
    pub fn ratio(&self) -> Option<f64> {
        metric_ratio(self.clean?, self.attacked?, self.direction)
    }
}

#[derive(Clone, Debug)]
pub struct CellResult {
    pub name: String,
    pub attack: AttackSpec,
    /// Error message when the cell failed.
    pub report: std::result::Result<MetricReport, String>,
    pub extras: BTreeMap<String, ExtraStat>,
}

#[derive(Clone, Debug)]
pub struct CampaignResult {
    pub baseline: MetricReport,
    pub cells: Vec<CellResult>,
}

/// One line of the campaign summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub cell: String,
    pub metric: String,
    pub direction: Direction,
    pub clean: Option<f64>,
    pub attacked: Option<f64>,
    pub ratio: Option<f64>,
}

impl CampaignResult {
    pub fn cell(&self, name: &str) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.name == name)
    }

    /// Metric ratios, per-class ratios and extras of every successful cell.
    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut rows = Vec::new();
        for cell in &self.cells {
            let Ok(rep) = &cell.report else { continue };
            for (&m, &clean) in &self.baseline.values {
                let attacked = rep.get(m);
                rows.push(SummaryRow {
                    cell: cell.name.clone(),
                    metric: m.name().into(),
                    direction: m.direction(),
                    clean,
                    attacked,
                    ratio: clean.zip(attacked).and_then(|(c, a)| metric_ratio(c, a, m.direction())),
                });
            }
            for (k, &clean) in &self.baseline.per_class {
                let attacked = rep.per_class.get(k).copied().flatten();
                let direction = key_direction(k);
                rows.push(SummaryRow {
                    cell: cell.name.clone(),
                    metric: k.clone(),
                    direction,
                    clean,
                    attacked,
                    ratio: clean.zip(attacked).and_then(|(c, a)| metric_ratio(c, a, direction)),
                });
            }
            for (k, e) in &cell.extras {
                rows.push(SummaryRow {
                    cell: cell.name.clone(),
                    metric: k.clone(),
                    direction: e.direction,
                    clean: e.clean,
                    attacked: e.attacked,
                    ratio: e.ratio(),
                });
            }
        }
        rows
    }
}

/// Direction of a per-class or derived statistic, from its key prefix.
pub fn key_direction(key: &str) -> Direction {
    let lower = ["region_rmse/", "cls_loss/", "reg_loss/", "depth_rmse", "id_", "objective", "linf"];
    if lower.iter().any(|p| key.starts_with(p)) {
        Direction::LowerBetter
    } else {
        Direction::HigherBetter
    }
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record(["cell", "metric", "direction", "clean", "attacked", "ratio"])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

#[derive(Clone, Debug, Default)]
struct Extras {
    region: Option<(usize, RegionAccumulator, RegionAccumulator)>,
    /// Key → `[(sum, count); clean, attacked]`.
    means: BTreeMap<String, [(f64, usize); 2]>,
    /// Largest perturbation over the cell, 0-255 scale.
    linf_max: Option<f64>,
}

impl Extras {
    fn add(&mut self, key: &str, side: usize, sum: f64, count: usize) {
        let e = self.means.entry(key.to_string()).or_default();
        e[side].0 += sum;
        e[side].1 += count;
    }

    fn merge(&mut self, o: Extras) {
        self.linf_max = match (self.linf_max, o.linf_max) {
            (Some(a), Some(b)) => Some(a.max(b)),
            (a, b) => a.or(b),
        };
        if let Some((c, a, b)) = o.region {
            match &mut self.region {
                Some((_, x, y)) => {
                    x.merge(&a);
                    y.merge(&b);
                }
                None => self.region = Some((c, a, b)),
            }
        }
        for (k, v) in o.means {
            let e = self.means.entry(k).or_default();
            for s in 0..2 {
                e[s].0 += v[s].0;
                e[s].1 += v[s].1;
            }
        }
    }

    fn finish(self, names: &[String]) -> BTreeMap<String, ExtraStat> {
        let mut out = BTreeMap::new();
        let mean = |(s, n): (f64, usize)| (n > 0).then(|| s / n as f64);
        if let Some((c, clean, adv)) = self.region {
            let name = &names[c];
            out.insert(
                format!("region_iou/{name}"),
                ExtraStat { clean: clean.iou(), attacked: adv.iou(), direction: Direction::HigherBetter },
            );
            out.insert(
                format!("region_rmse/{name}"),
                ExtraStat { clean: clean.rmse(), attacked: adv.rmse(), direction: Direction::LowerBetter },
            );
        }
        if let Some(m) = self.linf_max {
            out.insert("linf_max".into(), ExtraStat { clean: None, attacked: Some(m), direction: Direction::LowerBetter });
        }
        for (k, v) in self.means {
            let direction = key_direction(&k);
            out.insert(k, ExtraStat { clean: mean(v[0]), attacked: mean(v[1]), direction });
        }
        out
    }
}

/// Varifocal loss of one class channel (normalized by all positives) and the
/// summed GIoU loss over positives of that class.
pub fn class_detection_losses(out: &DenseOutputs, targets: &DenseTargets, class: usize, loss: &LossConfig) -> (f64, f64, usize) {
    let norm = targets.num_positives().max(1) as f64;
    let (mut cls, mut reg, mut n) = (0.0, 0.0, 0);
    for (li, lvl) in out.levels.iter().enumerate() {
        let (_, h, w) = lvl.cls_logits.dim();
        let mut soft = vec![None; h * w];
        let det = targets.detection(li);
        for (&loc, d) in targets.levels[li].locations().iter().zip(det) {
            if d.class_id == class {
                soft[loc] = Some(d.centerness);
                let (y, x) = (loc / w, loc % w);
                let p = [0, 1, 2, 3].map(|k| lvl.box_dists[[k, y, x]] as f64);
                reg += giou_loss_dists(p, d.dists).0;
                n += 1;
            }
        }
        for (loc, q) in soft.into_iter().enumerate() {
            let z = lvl.cls_logits[[class, loc / w, loc % w]] as f64;
            cls += varifocal(z, q, loss.vfl_alpha, loss.vfl_gamma).0;
        }
    }
    (cls / norm, reg, n)
}

struct Context<'a> {
    ckpt: &'a Checkpoint,
    scene: &'a SceneSpec,
    loss: LossConfig,
    decode: &'a DecodeParams,
    names: Vec<String>,
}

impl Context<'_> {
    fn victim(&self) -> Victim<'_> {
        Victim { model: &self.ckpt.model, tasks: self.ckpt.tasks, loss: &self.loss }
    }

    fn attack_one(&self, spec: &AttackSpec, sample: &Sample, clean: &DenseOutputs) -> Result<(AttackOutcome, Extras)> {
        let victim = self.victim();
        let mut ex = Extras::default();
        let outcome = match spec {
            AttackSpec::Pgd(cfg) => {
                let targets = assign_targets(sample, &self.ckpt.model.config, self.ckpt.basis.as_ref())?;
                pgd_attack(victim, &sample.image, &targets, cfg)?
            }
            AttackSpec::Dag(cfg) => {
                let o = dag_swap_attack(victim, &sample.image, cfg)?;
                if let Some((flipped, initial)) = o.flips {
                    // pooled over images: Σ flipped / Σ initial
                    ex.add("flipped_fraction", 1, flipped as f64, initial);
                }
                let targets = assign_targets(sample, &self.ckpt.model.config, None)?;
                let nstuff = self.scene.stuff_classes.len();
                for c in [cfg.c1, cfg.c2] {
                    let name = &self.names[nstuff + c];
                    for (side, out) in [(0, &o.clean), (1, &o.attacked)] {
                        let (cls, reg, n) = class_detection_losses(out, &targets, c, &self.loss);
                        ex.add(&format!("cls_loss/{name}"), side, cls, 1);
                        ex.add(&format!("reg_loss/{name}"), side, reg, n);
                        let dets = decode_detections(out, None, self.decode);
                        let boxes: Vec<_> = dets.iter().filter(|d| d.class_id == c && d.score >= ASPECT_MIN_SCORE).collect();
                        if let Some(a) = mean_aspect_ratio(boxes.iter().copied(), c, ASPECT_MIN_SCORE) {
                            ex.add(&format!("aspect/{name}"), side, a * boxes.len() as f64, boxes.len());
                        }
                    }
                }
                o
            }
            AttackSpec::Hide(cfg) => {
                let logits = clean.seg_logits.as_ref().ok_or_else(|| Error::Config("hiding needs the segmentation head".into()))?;
                let pred_seg = argmax_map(logits);
                let target = match cfg.head {
                    HideHead::Seg => HidingTarget::Seg(build_hiding_target_seg(&pred_seg, cfg.class as u8)?),
                    HideHead::Depth => {
                        let d = clean.depth_map.as_ref().ok_or_else(|| Error::Config("hiding needs the depth head".into()))?;
                        HidingTarget::Depth(build_hiding_target_depth(&pred_seg, d, cfg.class as u8)?)
                    }
                };
                let o = hiding_attack(victim, &sample.image, &target, cfg.epsilon, cfg.alpha, cfg.iterations)?;
                let mut accs = [RegionAccumulator::default(), RegionAccumulator::default()];
                for (acc, out) in accs.iter_mut().zip([&o.clean, &o.attacked]) {
                    let seg = out.seg_logits.as_ref().map(argmax_map).unwrap_or_else(|| Array2::zeros(sample.seg.dim()));
                    acc.add(&seg, out.depth_map.as_ref(), &sample.seg, &sample.depth, cfg.class as u8);
                }
                let [a, b] = accs;
                ex.region = Some((cfg.class, a, b));
                let name = &self.names[cfg.class];
                for (side, out) in [(0, &o.clean), (1, &o.attacked)] {
                    if let Some(l) = &out.seg_logits {
                        let px = argmax_map(l).iter().filter(|&&c| c as usize == cfg.class).count();
                        ex.add(&format!("pred_pixels/{name}"), side, px as f64, 1);
                    }
                }
                o
            }
        };
        outcome.check(&sample.image)?;
        if let (Some(first), Some(last)) = (outcome.trace.first(), outcome.trace.last()) {
            ex.add("objective", 0, *first, 1);
            ex.add("objective", 1, *last, 1);
        }
        ex.add("linf", 1, outcome.linf(), 1);
        ex.linf_max = Some(outcome.linf());
        Ok((outcome, ex))
    }

    fn run_cell(
        &self,
        cell: &CampaignCell,
        samples: &[Sample],
        clean: &[DenseOutputs],
        save: Option<(&Path, usize)>,
    ) -> Result<(MetricReport, BTreeMap<String, ExtraStat>)> {
        let parts: Vec<Result<(Evaluator, Extras)>> = (0..samples.len())
            .into_par_iter()
            .map(|i| {
                let (o, ex) = self.attack_one(&cell.attack, &samples[i], &clean[i])?;
                if let Some((dir, n)) = save {
                    if i < n {
                        o.save(&dir.join(&cell.name), &samples[i].id)?;
                    }
                }
                let mut ev = Evaluator::new(self.ckpt.tasks, self.scene);
                ev.add(i, &samples[i], &o.attacked, self.ckpt.basis.as_ref(), self.decode);
                Ok((ev, ex))
            })
            .collect();
        let mut ev = Evaluator::new(self.ckpt.tasks, self.scene);
        let mut extras = Extras::default();
        for p in parts {
            let (e, x) = p?;
            ev.merge(e);
            extras.merge(x);
        }
        Ok((ev.finish(), extras.finish(&self.names)))
    }
}

/// Computes the clean baseline once, then runs every cell on the same images.
/// A failing cell records its error and the others still run. With `out_dir`,
/// writes `campaign.json`, `baseline.csv`, `cell_<name>.csv` and `summary.csv`.
pub fn run_campaign(
    ckpt: &Checkpoint,
    scene: &SceneSpec,
    samples: &[Sample],
    campaign: &Campaign,
    out_dir: Option<&Path>,
) -> Result<CampaignResult> {
    let mut loss = LossConfig::default();
    if let Some(w) = &ckpt.class_weights {
        loss.class_weights = w.iter().map(|&v| v as f64).collect();
    }
    let ctx = Context { ckpt, scene, loss, decode: &campaign.decode, names: scene.class_names() };
    let run = || -> Result<CampaignResult> {
        let clean: Vec<DenseOutputs> = samples
            .par_iter()
            .map(|s| ckpt.model.predict(&s.image, ckpt.tasks))
            .collect::<Result<_>>()?;
        let mut ev = Evaluator::new(ckpt.tasks, scene);
        for (i, (s, o)) in samples.iter().zip(&clean).enumerate() {
            ev.add(i, s, o, ckpt.basis.as_ref(), &campaign.decode);
        }
        let baseline = ev.finish();
        let examples = out_dir.map(|d| d.join("examples"));
        let save = examples.as_deref().filter(|_| campaign.save_examples > 0).map(|d| (d, campaign.save_examples));
        let cells = campaign
            .cells
            .iter()
            .map(|cell| {
                log::info!("campaign cell {}", cell.name);
                let (report, extras) = match ctx.run_cell(cell, samples, &clean, save) {
                    Ok((r, e)) => (Ok(r), e),
                    Err(e) => {
                        log::warn!("cell {} failed: {e}", cell.name);
                        (Err(e.to_string()), BTreeMap::new())
                    }
                };
                CellResult { name: cell.name.clone(), attack: cell.attack.clone(), report, extras }
            })
            .collect();
        Ok(CampaignResult { baseline, cells })
    };
    let result = if campaign.jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(campaign.jobs)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?
            .install(run)?
    } else {
        run()?
    };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: String, text: String| {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        write("campaign.json".into(), serde_json::to_string_pretty(campaign)?)?;
        write("baseline.csv".into(), result.baseline.to_csv_string("clean")?)?;
        for cell in &result.cells {
            if let Ok(rep) = &cell.report {
                write(format!("cell_{}.csv", cell.name), rep.to_csv_string(&cell.name)?)?;
            }
        }
        write_summary(&dir.join("summary.csv"), &result.summary())?;
        let failures: BTreeMap<&str, &str> =
            result.cells.iter().filter_map(|c| c.report.as_ref().err().map(|e| (c.name.as_str(), e.as_str()))).collect();
        write("failures.json".into(), serde_json::to_string_pretty(&failures)?)?;
    }
    Ok(result)
}
