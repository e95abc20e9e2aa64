//! Benchmark-style scoring: mask-IoU F1 and point accuracy.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::assign::solve_rows;
use crate::error::{Error, Result};
use crate::geometry::{mask_iou, rasterize_lane, Lane};
use crate::synthdata::Tag;

/// Reference lane width and image width of the mask-IoU protocol.
pub const CULANE_WIDTH: f64 = 30.0;
pub const CULANE_REF_WIDTH: f64 = 1640.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CulaneConfig {
    pub iou_thr: f64,
    pub lane_width: f64,
    pub img_w: usize,
    pub img_h: usize,
}

impl CulaneConfig {
    /// Lane width scaled from the reference resolution.
    pub fn for_image(img_w: usize, img_h: usize) -> Self {
        Self {
            iou_thr: 0.5,
            lane_width: CULANE_WIDTH * img_w as f64 / CULANE_REF_WIDTH,
            img_w,
            img_h,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TusimpleConfig {
    pub px_thr: f64,
    pub lane_thr: f64,
}

impl Default for TusimpleConfig {
    fn default() -> Self {
        Self {
            px_thr: 20.0,
            lane_thr: 0.85,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Matched ground-truth points over all ground-truth points.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fp_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fn_rate: Option<f64>,
    pub scenes: usize,
    #[serde(skip)]
    matched_points: usize,
    #[serde(skip)]
    gt_points: usize,
    #[serde(skip)]
    preds: usize,
    #[serde(skip)]
    gts: usize,
}

impl Counts {
    fn add(&mut self, tp: usize, preds: usize, gts: usize, points: Option<(usize, usize)>) {
        self.tp += tp;
        self.fp += preds - tp;
        self.fn_ += gts - tp;
        self.preds += preds;
        self.gts += gts;
        self.scenes += 1;
        if let Some((m, g)) = points {
            self.matched_points += m;
            self.gt_points += g;
            self.accuracy = Some(0.0);
        }
    }

    fn finish(&mut self) {
        self.precision = ratio(self.tp, self.tp + self.fp);
        self.recall = ratio(self.tp, self.tp + self.fn_);
        self.f1 = if self.precision + self.recall > 0.0 {
            2.0 * self.precision * self.recall / (self.precision + self.recall)
        } else {
            0.0
        };
        if self.accuracy.is_some() {
            self.accuracy = Some(ratio(self.matched_points, self.gt_points));
            self.fp_rate = Some(ratio(self.fp, self.preds));
            self.fn_rate = Some(ratio(self.fn_, self.gts));
        }
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub metric: String,
    pub total: Counts,
    pub categories: BTreeMap<String, Counts>,
}

impl EvalResult {
    pub fn tp(&self) -> usize {
        self.total.tp
    }
    pub fn fp(&self) -> usize {
        self.total.fp
    }
    pub fn fn_(&self) -> usize {
        self.total.fn_
    }
    pub fn f1(&self) -> f64 {
        self.total.f1
    }
    pub fn accuracy(&self) -> Option<f64> {
        self.total.accuracy
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned text table, one row per category.
    pub fn table(&self) -> String {
        let acc = self.total.accuracy.is_some();
        let mut s = String::new();
        let _ = write!(
            s,
            "{:<10} {:>6} {:>6} {:>6} {:>6} {:>9} {:>7} {:>7}",
            "category", "scenes", "TP", "FP", "FN", "precision", "recall", "F1"
        );
        if acc {
            let _ = write!(s, " {:>8}", "accuracy");
        }
        s.push('\n');
        let rows = std::iter::once(("total", &self.total)).chain(self.categories.iter().map(|(k, v)| (k.as_str(), v)));
        for (name, c) in rows {
            let _ = write!(
                s,
                "{:<10} {:>6} {:>6} {:>6} {:>6} {:>9.4} {:>7.4} {:>7.4}",
                name, c.scenes, c.tp, c.fp, c.fn_, c.precision, c.recall, c.f1
            );
            if let Some(a) = c.accuracy {
                let _ = write!(s, " {:>8.4}", a);
            }
            s.push('\n');
        }
        s
    }
}

fn check_lists<A, B>(preds: &[A], gts: &[B], tags: Option<&[Vec<Tag>]>) -> Result<()> {
    if preds.len() != gts.len() {
        return Err(Error::Eval(format!(
            "{} prediction scenes vs {} ground-truth scenes",
            preds.len(),
            gts.len()
        )));
    }
    if let Some(t) = tags {
        if t.len() != gts.len() {
            return Err(Error::Eval(format!("{} tag lists for {} scenes", t.len(), gts.len())));
        }
    }
    Ok(())
}

/// Pairs maximizing first the number of entries with `ok[i][j]`, then the
/// summed `score`. Rows and columns are used at most once.
pub fn max_matching(score: &[Vec<f64>], ok: &[Vec<bool>]) -> Vec<(usize, usize)> {
    let rows = score.len();
    let cols = score.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    let k = rows.min(cols) as f64;
    // Scores are in [0, 1]: any extra admissible pair outweighs all score gains.
    let weight = |i: usize, j: usize| if ok[i][j] { 1.0 + score[i][j] / (k + 1.0) } else { 0.0 };
    let pairs: Vec<(usize, usize)> = if rows <= cols {
        let cost: Vec<Vec<f64>> = (0..rows).map(|i| (0..cols).map(|j| -weight(i, j)).collect()).collect();
        solve_rows(&cost).1.into_iter().enumerate().collect()
    } else {
        let cost: Vec<Vec<f64>> = (0..cols).map(|j| (0..rows).map(|i| -weight(i, j)).collect()).collect();
        solve_rows(&cost)
            .1
            .into_iter()
            .enumerate()
            .map(|(j, i)| (i, j))
            .collect()
    };
    pairs.into_iter().filter(|&(i, j)| ok[i][j]).collect()
}

/// Per-scene true positives under the mask-IoU protocol.
pub fn culane_scene_tp(preds: &[Lane], gts: &[Lane], cfg: &CulaneConfig) -> Result<usize> {
    if preds.is_empty() || gts.is_empty() {
        return Ok(0);
    }
    let raster = |l: &Lane| rasterize_lane(l, cfg.lane_width, cfg.img_h, cfg.img_w);
    let pm: Vec<_> = preds.iter().map(raster).collect();
    let gm: Vec<_> = gts.iter().map(raster).collect();
    let mut iou = vec![vec![0.0; gts.len()]; preds.len()];
    for (i, p) in pm.iter().enumerate() {
        for (j, g) in gm.iter().enumerate() {
            iou[i][j] = mask_iou(p, g)?;
        }
    }
    let ok: Vec<Vec<bool>> = iou
        .iter()
        .map(|r| r.iter().map(|&v| v >= cfg.iou_thr).collect())
        .collect();
    Ok(max_matching(&iou, &ok).len())
}

/// Per scene: TP, predictions, ground truths and optional (correct, total)
/// point counts.
type SceneCounts = (usize, usize, usize, Option<(usize, usize)>);

fn with_categories(metric: &str, per_scene: Vec<SceneCounts>, tags: Option<&[Vec<Tag>]>) -> EvalResult {
    let mut res = EvalResult {
        metric: metric.into(),
        ..Default::default()
    };
    for (s, &(tp, np, ng, pts)) in per_scene.iter().enumerate() {
        res.total.add(tp, np, ng, pts);
        if let Some(tags) = tags {
            for t in &tags[s] {
                res.categories
                    .entry(t.as_str().to_string())
                    .or_default()
                    .add(tp, np, ng, pts);
            }
        }
    }
    res.total.finish();
    for c in res.categories.values_mut() {
        c.finish();
    }
    res
}

/// F1 over scenes: lanes are rasterized at `lane_width`, matched one-to-one
/// on mask IoU, and pairs at or above `iou_thr` count as true positives.
pub fn culane_f1(
    preds: &[Vec<Lane>],
    gts: &[Vec<Lane>],
    cfg: &CulaneConfig,
    tags: Option<&[Vec<Tag>]>,
) -> Result<EvalResult> {
    check_lists(preds, gts, tags)?;
    let per_scene = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| Ok((culane_scene_tp(p, g, cfg)?, p.len(), g.len(), None)))
        .collect::<Result<Vec<_>>>()?;
    Ok(with_categories("culane", per_scene, tags))
}

/// Point accuracy: each ground-truth lane is scored by its best prediction
/// (fraction of its points within `px_thr` on the same row); a lane whose
/// best ratio reaches `lane_thr` is a true positive.
pub fn tusimple_accuracy(
    preds: &[Vec<Lane>],
    gts: &[Vec<Lane>],
    cfg: &TusimpleConfig,
    tags: Option<&[Vec<Tag>]>,
) -> Result<EvalResult> {
    check_lists(preds, gts, tags)?;
    let mut per_scene = Vec::with_capacity(gts.len());
    for (p, g) in preds.iter().zip(gts) {
        let (mut tp, mut matched, mut total) = (0, 0, 0);
        for gt in g {
            if gt.rows() == 0 {
                return Err(Error::Eval("empty h_samples".into()));
            }
            let rows: Vec<usize> = gt.valid_rows().collect();
            let best = p
                .iter()
                .map(|pl| {
                    if pl.rows() != gt.rows() {
                        return Err(Error::Eval(format!(
                            "prediction has {} rows, ground truth {}",
                            pl.rows(),
                            gt.rows()
                        )));
                    }
                    Ok(rows
                        .iter()
                        .filter(|&&r| pl.is_row_valid(r) && (pl.xs[r] - gt.xs[r]).abs() < cfg.px_thr)
                        .count())
                })
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .max()
                .unwrap_or(0);
            matched += best;
            total += rows.len();
            if !rows.is_empty() && best as f64 / rows.len() as f64 >= cfg.lane_thr {
                tp += 1;
            }
        }
        let tp = tp.min(p.len());
        per_scene.push((tp, p.len(), g.len(), Some((matched, total))));
    }
    Ok(with_categories("tusimple", per_scene, tags))
}
