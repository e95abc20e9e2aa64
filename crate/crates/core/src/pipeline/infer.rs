//! Inference, duplicate suppression and overlay rendering.

use std::path::Path;

use srlane_numerics::Tape;

use super::config::ModelConfig;
use super::model::{Model, ProposalSource};
use crate::error::Result;
use crate::geometry::{line_iou, Lane};
use crate::image::RgbImage;

/// Radius of the LineIoU used to decide duplicates, in pixels.
pub const NMS_RADIUS: f64 = 7.5;

/// Greedy suppression in descending score order: a lane is dropped when
/// its LineIoU with an already kept lane reaches `thr`. Ties keep the
/// earlier lane.
pub fn nms(lanes: &[Lane], thr: f64) -> Result<Vec<Lane>> {
    let mut order: Vec<usize> = (0..lanes.len()).collect();
    order.sort_by(|&a, &b| lanes[b].score.total_cmp(&lanes[a].score).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let mut keep = true;
        for &k in &kept {
            if line_iou(&lanes[i], &lanes[k], NMS_RADIUS)? >= thr {
                keep = false;
                break;
            }
        }
        if keep {
            kept.push(i);
        }
    }
    Ok(kept.into_iter().map(|i| lanes[i].clone()).collect())
}

/// All refined lanes with their scores, before thresholding.
pub fn predict_all(model: &Model, image: &RgbImage) -> Result<Vec<Lane>> {
    let mut tape = Tape::<f32>::new();
    let p = model.params.bind(&mut tape);
    let x = tape.constant(image.to_tensor());
    let f = model.forward(&mut tape, &p, x, ProposalSource::Config)?;
    Ok(model.lanes(&tape, &f))
}

/// Lanes scoring at least the configured threshold, optionally deduplicated.
pub fn infer(model: &Model, image: &RgbImage) -> Result<Vec<Lane>> {
    postprocess(&predict_all(model, image)?, model.config.score_thr, &model.config)
}

/// Thresholding at `thr` followed by the configured NMS.
pub fn postprocess(all: &[Lane], thr: f64, c: &ModelConfig) -> Result<Vec<Lane>> {
    let lanes: Vec<Lane> = all
        .iter()
        .filter(|l| l.score >= thr && l.y_max > l.y_min)
        .cloned()
        .collect();
    if c.nms {
        nms(&lanes, c.nms_thr)
    } else {
        Ok(lanes)
    }
}

/// Color ramp from red (score 0) through yellow to green (score 1).
pub fn score_color(score: f64) -> [u8; 3] {
    let s = score.clamp(0.0, 1.0);
    if s < 0.5 {
        [255, (510.0 * s).round() as u8, 0]
    } else {
        [(510.0 * (1.0 - s)).round() as u8, 255, 0]
    }
}

/// Copy of `image` with each lane drawn one pixel wide through its valid
/// points, colored by score.
pub fn draw_lanes(image: &RgbImage, lanes: &[Lane]) -> RgbImage {
    let mut out = image.clone();
    let (w, h) = (image.width as f64, image.height as f64);
    for lane in lanes {
        let color = score_color(lane.score);
        let pts = lane.valid_points();
        let mut plot = |x: f64, y: f64| {
            if (0.0..w).contains(&x) && (0.0..h).contains(&y) {
                out.set(x as usize, y as usize, color);
            }
        };
        if pts.len() == 1 {
            plot(pts[0].0, pts[0].1);
        }
        for s in pts.windows(2) {
            let (a, b) = (s[0], s[1]);
            let steps = ((b.0 - a.0).abs().max(b.1 - a.1) * 2.0).ceil().max(1.0) as usize;
            for k in 0..=steps {
                let t = k as f64 / steps as f64;
                plot(a.0 + (b.0 - a.0) * t, a.1 + (b.1 - a.1) * t);
            }
        }
    }
    out
}

pub fn render_overlay(image: &RgbImage, lanes: &[Lane], out: &Path) -> Result<()> {
    draw_lanes(image, lanes).save_png(out)
}
