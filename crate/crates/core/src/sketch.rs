//! Direction maps and the lane proposals derived from them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{point_segment_dist2, row_y, Lane, Polyline};

/// Angles closer than this to horizontal are clamped before building lines.
pub const MIN_ANGLE_DEG: f64 = 10.0;
/// Supervision neighborhood, in cells.
pub const DEFAULT_TAU: f64 = 1.5;
pub const DEFAULT_GRID: (usize, usize) = (4, 10);

pub fn clamp_angle(theta: f64) -> f64 {
    theta.clamp(MIN_ANGLE_DEG, 180.0 - MIN_ANGLE_DEG)
}

/// Reduce any angle in degrees to `[0, 180)`.
pub fn wrap_angle(theta: f64) -> f64 {
    let t = theta.rem_euclid(180.0);
    if t >= 180.0 {
        0.0
    } else {
        t
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionMap {
    pub rows: usize,
    pub cols: usize,
    /// Row-major angles in degrees.
    pub angles: Vec<f64>,
    /// Cells carrying supervision, when this map is a ground-truth encoding.
    pub mask: Option<Vec<bool>>,
    pub img_w: f64,
    pub img_h: f64,
}

impl DirectionMap {
    pub fn new(rows: usize, cols: usize, angles: Vec<f64>, img_w: f64, img_h: f64) -> Result<Self> {
        if rows == 0 || cols == 0 || angles.len() != rows * cols {
            return Err(Error::Geometry(format!(
                "direction map {rows}x{cols} with {} angles",
                angles.len()
            )));
        }
        if let Some(a) = angles.iter().find(|a| !(0.0..180.0).contains(*a)) {
            return Err(Error::Geometry(format!("angle {a} outside [0, 180)")));
        }
        Ok(Self {
            rows,
            cols,
            angles,
            mask: None,
            img_w,
            img_h,
        })
    }

    pub fn uniform(rows: usize, cols: usize, theta: f64, img_w: f64, img_h: f64) -> Result<Self> {
        Self::new(rows, cols, vec![theta; rows * cols], img_w, img_h)
    }

    pub fn angle(&self, row: usize, col: usize) -> f64 {
        self.angles[row * self.cols + col]
    }

    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            (col as f64 + 0.5) * self.img_w / self.cols as f64,
            (row as f64 + 0.5) * self.img_h / self.rows as f64,
        )
    }

    pub fn masked_cells(&self) -> usize {
        self.mask.as_ref().map_or(0, |m| m.iter().filter(|&&b| b).count())
    }

    /// Mirror: columns reversed, `θ ↦ 180° − θ`.
    pub fn flipped(&self) -> Self {
        let mut angles = Vec::with_capacity(self.angles.len());
        let mut mask = self.mask.as_ref().map(|_| Vec::with_capacity(self.angles.len()));
        for r in 0..self.rows {
            for c in (0..self.cols).rev() {
                angles.push(wrap_angle(180.0 - self.angle(r, c)));
                if let (Some(out), Some(m)) = (mask.as_mut(), self.mask.as_ref()) {
                    out.push(m[r * self.cols + c]);
                }
            }
        }
        Self {
            angles,
            mask,
            ..self.clone()
        }
    }
}

/// Point at arc length `s` and the vertex index that starts its segment.
fn point_at_arc(pts: &[(f64, f64)], cum: &[f64], s: f64) -> ((f64, f64), usize) {
    let k = cum.partition_point(|&c| c <= s).clamp(1, pts.len() - 1) - 1;
    let seg = cum[k + 1] - cum[k];
    let t = if seg > 0.0 {
        ((s - cum[k]) / seg).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (a, b) = (pts[k], pts[k + 1]);
    ((a.0 + (b.0 - a.0) * t, a.1 + (b.1 - a.1) * t), k)
}

/// Split a polyline into `k` pieces of equal arc length. Each piece is
/// returned as its own vertex list.
pub fn split_equal_arc(p: &Polyline, k: usize) -> Vec<Vec<(f64, f64)>> {
    let pts = p.points();
    let mut cum = vec![0.0];
    for w in pts.windows(2) {
        cum.push(cum.last().unwrap() + (w[1].0 - w[0].0).hypot(w[1].1 - w[0].1));
    }
    let total = *cum.last().unwrap();
    (0..k)
        .map(|j| {
            let (start, ks) = point_at_arc(pts, &cum, total * j as f64 / k as f64);
            let (end, ke) = point_at_arc(pts, &cum, total * (j + 1) as f64 / k as f64);
            let mut piece = vec![start];
            piece.extend(
                pts[ks + 1..=ke.max(ks)]
                    .iter()
                    .copied()
                    .filter(|&v| v != start && v != end),
            );
            piece.push(end);
            piece
        })
        .collect()
}

/// Ground-truth direction map: every cell within `tau` cells of a lane
/// segment takes that segment's orientation. Unsupervised cells are 90° with
/// the mask cleared.
pub fn encode_direction_gt(
    gts: &[Polyline],
    rows: usize,
    cols: usize,
    k: usize,
    tau: f64,
    img_w: f64,
    img_h: f64,
) -> Result<DirectionMap> {
    if k == 0 || tau <= 0.0 {
        return Err(Error::Config(format!("need K >= 1 and tau > 0, got K={k}, tau={tau}")));
    }
    let (sx, sy) = (cols as f64 / img_w, rows as f64 / img_h);
    // (segment in grid units, angle)
    type Segment = (Vec<(f64, f64)>, f64);
    let segments: Vec<Vec<Segment>> = gts
        .iter()
        .map(|p| {
            split_equal_arc(p, k)
                .into_iter()
                .map(|piece| {
                    let (a, b) = (piece[0], piece[piece.len() - 1]);
                    let theta = wrap_angle((b.1 - a.1).atan2(b.0 - a.0).to_degrees());
                    let grid = piece.iter().map(|&(x, y)| (x * sx, y * sy)).collect();
                    (grid, theta)
                })
                .collect()
        })
        .collect();
    let mut map = DirectionMap::uniform(rows, cols, 90.0, img_w, img_h)?;
    let mut mask = vec![false; rows * cols];
    let tau2 = tau * tau;
    for r in 0..rows {
        for c in 0..cols {
            let (cx, cy) = (c as f64 + 0.5, r as f64 + 0.5);
            let mut best: Option<(f64, f64)> = None;
            for lane in &segments {
                for (piece, theta) in lane {
                    let d2 = if piece.len() == 1 {
                        point_segment_dist2(cx, cy, piece[0], piece[0])
                    } else {
                        piece
                            .windows(2)
                            .map(|w| point_segment_dist2(cx, cy, w[0], w[1]))
                            .fold(f64::INFINITY, f64::min)
                    };
                    if d2 <= tau2 && best.is_none_or(|(b, _)| d2 < b) {
                        best = Some((d2, *theta));
                    }
                }
            }
            if let Some((_, theta)) = best {
                map.angles[r * cols + c] = theta;
                mask[r * cols + c] = true;
            }
        }
    }
    map.mask = Some(mask);
    Ok(map)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Proposal {
    pub lane: Lane,
    pub origin: (f64, f64),
    pub angle: f64,
    /// All sampled x fall outside `[−0.5W, 1.5W]`.
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProposalSet {
    pub proposals: Vec<Proposal>,
}

impl ProposalSet {
    pub fn len(&self) -> usize {
        self.proposals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proposals.is_empty()
    }

    pub fn lanes(&self) -> Vec<Lane> {
        self.proposals.iter().map(|p| p.lane.clone()).collect()
    }
}

/// Straight line through `origin` with angle `theta`, sampled at `n` rows.
pub fn line_through(origin: (f64, f64), theta: f64, n: usize, h: f64, w: f64) -> Proposal {
    let theta = clamp_angle(theta);
    let tan = theta.to_radians().tan();
    let xs: Vec<f64> = (0..n).map(|i| (row_y(i, n, h) - origin.1) / tan + origin.0).collect();
    let degenerate = xs.iter().all(|&x| !(-0.5 * w..=1.5 * w).contains(&x));
    Proposal {
        lane: Lane {
            xs,
            y_min: 0.0,
            y_max: h,
            score: 1.0,
            height: h,
        },
        origin,
        angle: theta,
        degenerate,
    }
}

/// One full-height line per cell, row-major.
pub fn construct_proposals(map: &DirectionMap, n: usize, h: f64, w: f64) -> ProposalSet {
    let mut proposals = Vec::with_capacity(map.rows * map.cols);
    for r in 0..map.rows {
        for c in 0..map.cols {
            let (x, y) = map.cell_center(r, c);
            let (x, y) = (x * w / map.img_w, y * h / map.img_h);
            proposals.push(line_through((x, y), map.angle(r, c), n, h, w));
        }
    }
    ProposalSet { proposals }
}

/// Bilinear resize of doubled-angle unit vectors (half-pixel aligned).
pub fn resize_direction_map(map: &DirectionMap, rows: usize, cols: usize) -> Result<DirectionMap> {
    if rows == 0 || cols == 0 {
        return Err(Error::Config(format!("cannot resize direction map to {rows}x{cols}")));
    }
    let coord = |dst: usize, src_n: usize, dst_n: usize| -> (usize, usize, f64) {
        let s = ((dst as f64 + 0.5) * src_n as f64 / dst_n as f64 - 0.5).clamp(0.0, (src_n - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(src_n - 1);
        (i0, i1, s - i0 as f64)
    };
    let vec_at = |r: usize, c: usize| {
        let t = (2.0 * map.angle(r, c)).to_radians();
        (t.cos(), t.sin())
    };
    let mut angles = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let (r0, r1, fr) = coord(r, map.rows, rows);
        for c in 0..cols {
            let (c0, c1, fc) = coord(c, map.cols, cols);
            let mut v = (0.0, 0.0);
            for (rr, wr) in [(r0, 1.0 - fr), (r1, fr)] {
                for (cc, wc) in [(c0, 1.0 - fc), (c1, fc)] {
                    let (a, b) = vec_at(rr, cc);
                    v.0 += wr * wc * a;
                    v.1 += wr * wc * b;
                }
            }
            let exact = (fr == 0.0 || r0 == r1) && (fc == 0.0 || c0 == c1);
            let theta = if exact {
                map.angle(r0, c0)
            } else if v.0.hypot(v.1) < 1e-12 {
                let nr = if fr < 0.5 { r0 } else { r1 };
                let nc = if fc < 0.5 { c0 } else { c1 };
                map.angle(nr, nc)
            } else {
                wrap_angle(v.1.atan2(v.0).to_degrees() / 2.0)
            };
            angles.push(theta);
        }
    }
    DirectionMap::new(rows, cols, angles, map.img_w, map.img_h)
}

/// Evenly spaced straight anchors: `positions` bottom-edge origins times
/// the given angles, ordered by position then angle.
pub fn fixed_line_anchors(positions: usize, angles: &[f64], n: usize, h: f64, w: f64) -> ProposalSet {
    let mut proposals = Vec::with_capacity(positions * angles.len());
    for k in 0..positions {
        let x = (k as f64 + 0.5) * w / positions as f64;
        for &theta in angles {
            proposals.push(line_through((x, h), theta, n, h, w));
        }
    }
    ProposalSet { proposals }
}

/// The 40-anchor baseline matching the default 4×10 proposal grid.
pub const ANCHOR_ANGLES: [f64; 5] = [40.0, 65.0, 90.0, 115.0, 140.0];

pub fn default_anchors(n: usize, h: f64, w: f64) -> ProposalSet {
    fixed_line_anchors(8, &ANCHOR_ANGLES, n, h, w)
}
