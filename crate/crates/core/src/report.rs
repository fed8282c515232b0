//! Tables and static SVG plots built from campaign outputs.
//!
//! Everything here is a pure function of the campaign CSV and cell list, with
//! fixed number formatting, so regenerating from unchanged inputs gives
//! byte-identical files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Metric;
use crate::runner::{read_summary, AttackSpec, Campaign, HideHead, SummaryRow};
use crate::scenegen::SceneSpec;
use crate::tasks::Task;

/// One bar of the grouped ratio plot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioBar {
    pub cell: String,
    pub task: String,
    pub metric: String,
    pub ratio: Option<f64>,
}

/// Primary-metric ratio of every cell, grouped by task in task order.
pub fn ratio_bars(rows: &[SummaryRow]) -> Vec<RatioBar> {
    let mut cells: Vec<&str> = Vec::new();
    for r in rows {
        if !cells.contains(&r.cell.as_str()) {
            cells.push(&r.cell);
        }
    }
    let mut out = Vec::new();
    for task in Task::ALL {
        let m = Metric::primary(task);
        for &cell in &cells {
            if let Some(r) = rows.iter().find(|r| r.cell == cell && r.metric == m.name()) {
                out.push(RatioBar { cell: cell.into(), task: task.short().into(), metric: m.name().into(), ratio: r.ratio });
            }
        }
    }
    out
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

const PALETTE: [&str; 8] = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860", "#da8bc3", "#8c8c8c"];

/// Grouped bars of metric ratios per task; semantic task groups sit on a
/// green band and geometric ones on a red band. The y axis spans 0 to the
/// largest ratio (at least 1).
pub fn ratio_plot_svg(bars: &[RatioBar]) -> String {
    let (w, h, left, top, bottom) = (720.0, 360.0, 60.0, 30.0, 60.0);
    let plot_h = h - top - bottom;
    let ymax = bars.iter().filter_map(|b| b.ratio).fold(1.0f64, f64::max);
    let mut tasks: Vec<&str> = Vec::new();
    let mut cells: Vec<&str> = Vec::new();
    for b in bars {
        if !tasks.contains(&b.task.as_str()) {
            tasks.push(&b.task);
        }
        if !cells.contains(&b.cell.as_str()) {
            cells.push(&b.cell);
        }
    }
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#);
    let group_w = if tasks.is_empty() { w - left - 20.0 } else { (w - left - 20.0) / tasks.len() as f64 };
    let bar_w = if cells.is_empty() { 0.0 } else { group_w * 0.8 / cells.len() as f64 };
    let y_of = |v: f64| top + plot_h * (1.0 - v / ymax);
    for (gi, task) in tasks.iter().enumerate() {
        let x0 = left + gi as f64 * group_w;
        let semantic = task.parse::<Task>().map(|t| t.is_semantic()).unwrap_or(true);
        let fill = if semantic { "#e3f2e1" } else { "#f8e0e0" };
        let _ = writeln!(s, r#"<rect x="{x0:.2}" y="{top:.2}" width="{group_w:.2}" height="{plot_h:.2}" fill="{fill}"/>"#);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, x0 + group_w / 2.0, h - bottom + 16.0, esc(&task.to_uppercase()));
        for (ci, cell) in cells.iter().enumerate() {
            let Some(r) = bars.iter().find(|b| b.task == *task && b.cell == *cell).and_then(|b| b.ratio) else { continue };
            let x = x0 + group_w * 0.1 + ci as f64 * bar_w;
            let y = y_of(r.max(0.0));
            let _ = writeln!(
                s,
                r#"<rect x="{x:.2}" y="{y:.2}" width="{:.2}" height="{:.2}" fill="{}"><title>{} {}: {r:.4}</title></rect>"#,
                bar_w * 0.9,
                top + plot_h - y,
                PALETTE[ci % PALETTE.len()],
                esc(cell),
                esc(task)
            );
        }
    }
    let _ = writeln!(s, r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{:.2}" stroke="black"/>"#, top + plot_h);
    let _ = writeln!(s, r#"<line x1="{left}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="black"/>"#, top + plot_h, w - 20.0, top + plot_h);
    for k in 0..=4 {
        let v = ymax * k as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{v:.2}</text>"#, left - 4.0, y_of(v) + 4.0);
    }
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.2}" transform="rotate(-90 14 {:.2})" text-anchor="middle">metric ratio</text>"#,
        top + plot_h / 2.0,
        top + plot_h / 2.0
    );
    for (ci, cell) in cells.iter().enumerate() {
        let x = left + ci as f64 * 140.0;
        let _ = writeln!(s, r#"<rect x="{x:.2}" y="{:.2}" width="10" height="10" fill="{}"/>"#, h - 22.0, PALETTE[ci % PALETTE.len()]);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}">{}</text>"#, x + 14.0, h - 13.0, esc(cell));
    }
    s.push_str("</svg>\n");
    s
}

/// Per-class hiding summary: clean value, value under the segmentation-head
/// attack and under the depth-head attack, and both ratios.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HidingRow {
    pub class: String,
    pub task: String,
    pub clean: Option<f64>,
    pub hide_seg: Option<f64>,
    pub hide_depth: Option<f64>,
    pub ratio_seg: Option<f64>,
    pub ratio_depth: Option<f64>,
}

/// Builds the hiding table from the first segmentation-head and first
/// depth-head hiding cell of each class.
pub fn hiding_table(rows: &[SummaryRow], campaign: &Campaign, class_names: &[String]) -> Vec<HidingRow> {
    let mut by_class: BTreeMap<usize, (Option<&str>, Option<&str>)> = BTreeMap::new();
    for cell in &campaign.cells {
        if let AttackSpec::Hide(h) = &cell.attack {
            let e = by_class.entry(h.class).or_default();
            match h.head {
                HideHead::Seg => e.0 = e.0.or(Some(&cell.name)),
                HideHead::Depth => e.1 = e.1.or(Some(&cell.name)),
            }
        }
    }
    let find = |cell: Option<&str>, key: &str| cell.and_then(|c| rows.iter().find(|r| r.cell == c && r.metric == key));
    let mut out = Vec::new();
    for (class, (seg, depth)) in by_class {
        let name = class_names.get(class).cloned().unwrap_or_else(|| class.to_string());
        for (task, key) in [("SS (IoU)", format!("region_iou/{name}")), ("D (RMSE)", format!("region_rmse/{name}"))] {
            let (a, b) = (find(seg, &key), find(depth, &key));
            out.push(HidingRow {
                class: name.clone(),
                task: task.into(),
                clean: a.or(b).and_then(|r| r.clean),
                hide_seg: a.and_then(|r| r.attacked),
                hide_depth: b.and_then(|r| r.attacked),
                ratio_seg: a.and_then(|r| r.ratio),
                ratio_depth: b.and_then(|r| r.ratio),
            });
        }
    }
    out
}

/// One quantity of the class-swap summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwapRow {
    pub cell: String,
    pub panel: String,
    pub class: String,
    pub clean: Option<f64>,
    pub attacked: Option<f64>,
}

pub const SWAP_PANELS: [(&str, &str); 4] =
    [("ap", "ap_box/"), ("cls_loss", "cls_loss/"), ("reg_loss", "reg_loss/"), ("aspect_ratio", "aspect/")];

/// Per-class AP, classification loss, regression loss and mean aspect ratio
/// before and after every class-swap cell.
pub fn swap_summary(rows: &[SummaryRow], campaign: &Campaign, thing_names: &[String]) -> Vec<SwapRow> {
    let mut out = Vec::new();
    for cell in &campaign.cells {
        let AttackSpec::Dag(d) = &cell.attack else { continue };
        for (panel, prefix) in SWAP_PANELS {
            for c in [d.c1, d.c2] {
                let class = thing_names.get(c).cloned().unwrap_or_else(|| c.to_string());
                let key = format!("{prefix}{class}");
                let r = rows.iter().find(|r| r.cell == cell.name && r.metric == key);
                out.push(SwapRow {
                    cell: cell.name.clone(),
                    panel: panel.into(),
                    class,
                    clean: r.and_then(|r| r.clean),
                    attacked: r.and_then(|r| r.attacked),
                });
            }
        }
    }
    out
}

/// Four panels of paired clean/attacked bars, one per swap quantity.
pub fn swap_svg(rows: &[SwapRow]) -> String {
    let (pw, ph) = (300.0, 220.0);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" font-family="sans-serif" font-size="11">"#, 2.0 * pw, 2.0 * ph);
    for (pi, (panel, _)) in SWAP_PANELS.iter().enumerate() {
        let (ox, oy) = ((pi % 2) as f64 * pw, (pi / 2) as f64 * ph);
        let items: Vec<&SwapRow> = rows.iter().filter(|r| r.panel == *panel).collect();
        let ymax = items.iter().flat_map(|r| [r.clean, r.attacked]).flatten().fold(0.0f64, f64::max).max(1e-12);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, ox + pw / 2.0, oy + 16.0, esc(panel));
        let (left, top, plot_h) = (ox + 40.0, oy + 26.0, ph - 70.0);
        let _ = writeln!(s, r#"<line x1="{left:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="black"/>"#, top + plot_h, ox + pw - 10.0, top + plot_h);
        if *panel == "aspect_ratio" && ymax >= 1.0 {
            let y = top + plot_h * (1.0 - 1.0 / ymax);
            let _ = writeln!(s, r#"<line x1="{left:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="gray" stroke-dasharray="4 3"/>"#, ox + pw - 10.0);
        }
        let slot = if items.is_empty() { 0.0 } else { (pw - 60.0) / items.len() as f64 };
        for (i, r) in items.iter().enumerate() {
            let x = left + i as f64 * slot;
            for (k, (v, color)) in [(r.clean, "#4c72b0"), (r.attacked, "#c44e52")].into_iter().enumerate() {
                let Some(v) = v else { continue };
                let bh = plot_h * (v.max(0.0) / ymax);
                let _ = writeln!(
                    s,
                    r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{bh:.2}" fill="{color}"><title>{v:.4}</title></rect>"#,
                    x + 4.0 + k as f64 * slot * 0.4,
                    top + plot_h - bh,
                    slot * 0.38
                );
            }
            let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, x + slot / 2.0, top + plot_h + 14.0, esc(&r.class));
        }
    }
    s.push_str("</svg>\n");
    s
}

fn write_csv<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record(header)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads `summary.csv` (and `campaign.json` when present) from a campaign
/// directory and writes the plots and tables into `out_dir`.
pub fn write_report(campaign_dir: &Path, scene: Option<&SceneSpec>, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let summary_path = campaign_dir.join("summary.csv");
    if !summary_path.exists() {
        return Err(Error::NotFound { what: "campaign summary", name: summary_path.display().to_string() });
    }
    let rows = read_summary(&summary_path)?;
    let cpath = campaign_dir.join("campaign.json");
    let campaign: Campaign = if cpath.exists() {
        let text = fs::read_to_string(&cpath).map_err(|e| Error::io(&cpath, e))?;
        serde_json::from_str(&text).map_err(|e| Error::corrupt(&cpath, e.to_string()))?
    } else {
        Campaign::default()
    };
    let default_scene = SceneSpec::default();
    let scene = scene.unwrap_or(&default_scene);
    let thing_names: Vec<String> = scene.thing_classes.iter().map(|t| t.name.clone()).collect();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    let bars = ratio_bars(&rows);
    let p = out_dir.join("ratios.csv");
    write_csv(&p, &["cell", "task", "metric", "ratio"], &bars)?;
    written.push(p);
    let p = out_dir.join("ratios.svg");
    write_text(&p, &ratio_plot_svg(&bars))?;
    written.push(p);
    let hiding = hiding_table(&rows, &campaign, &scene.class_names());
    let p = out_dir.join("hiding_table.csv");
    write_csv(&p, &["class", "task", "clean", "hide_seg", "hide_depth", "ratio_seg", "ratio_depth"], &hiding)?;
    written.push(p);
    let swap = swap_summary(&rows, &campaign, &thing_names);
    let p = out_dir.join("swap_summary.csv");
    write_csv(&p, &["cell", "panel", "class", "clean", "attacked"], &swap)?;
    written.push(p);
    let p = out_dir.join("swap_summary.svg");
    write_text(&p, &swap_svg(&swap))?;
    written.push(p);
    Ok(written)
}
