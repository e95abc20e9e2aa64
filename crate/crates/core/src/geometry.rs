//! Lane representation shared by every stage: x-coordinates at `N` fixed
//! rows `y_i = i·H/(N−1)` plus a valid vertical extent.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_ROWS: usize = 72;
/// Half-width of the per-row interval used by LineIoU.
pub const DEFAULT_LINE_IOU_RADIUS: f64 = 7.5;
/// Segment distance reported when two lanes share no valid row.
pub const NO_OVERLAP_DISTANCE: f64 = 1e6;

/// Image row of lane sample `i` out of `n`.
#[inline]
pub fn row_y(i: usize, n: usize, height: f64) -> f64 {
    i as f64 * height / (n - 1) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lane {
    pub xs: Vec<f64>,
    pub y_min: f64,
    pub y_max: f64,
    pub score: f64,
    pub height: f64,
}

impl Lane {
    pub fn new(xs: Vec<f64>, y_min: f64, y_max: f64, height: f64) -> Result<Self> {
        if xs.len() < 2 {
            return Err(Error::Geometry(format!("lane needs at least 2 rows, got {}", xs.len())));
        }
        if !(0.0 <= y_min && y_min <= y_max && y_max <= height) {
            return Err(Error::Geometry(format!(
                "extent [{y_min}, {y_max}] outside [0, {height}]"
            )));
        }
        if xs.iter().any(|x| !x.is_finite()) {
            return Err(Error::Geometry("non-finite x coordinate".into()));
        }
        Ok(Self {
            xs,
            y_min,
            y_max,
            score: 1.0,
            height,
        })
    }

    /// Lane spanning the full image height.
    pub fn full(xs: Vec<f64>, height: f64) -> Result<Self> {
        Self::new(xs, 0.0, height, height)
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = score;
        self
    }

    pub fn rows(&self) -> usize {
        self.xs.len()
    }

    pub fn row_y(&self, i: usize) -> f64 {
        row_y(i, self.xs.len(), self.height)
    }

    pub fn is_row_valid(&self, i: usize) -> bool {
        let y = self.row_y(i);
        self.y_min <= y && y <= self.y_max
    }

    pub fn valid_rows(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.xs.len()).filter(|&i| self.is_row_valid(i))
    }

    pub fn valid_points(&self) -> Vec<(f64, f64)> {
        self.valid_rows().map(|i| (self.xs[i], self.row_y(i))).collect()
    }

    /// x at an arbitrary image row by linear interpolation between samples
    /// (linear extrapolation past the ends).
    pub fn x_at(&self, y: f64) -> f64 {
        let n = self.xs.len();
        let step = self.height / (n - 1) as f64;
        let t = (y / step).clamp(0.0, (n - 1) as f64);
        let i = (t.floor() as usize).min(n - 2);
        let f = y / step - i as f64;
        self.xs[i] + (self.xs[i + 1] - self.xs[i]) * f
    }

    /// Mirror about the vertical image axis: `x ↦ width − x`.
    pub fn flipped(&self, width: f64) -> Self {
        Self {
            xs: self.xs.iter().map(|x| width - x).collect(),
            ..self.clone()
        }
    }

    pub fn shifted(&self, dx: f64) -> Self {
        Self {
            xs: self.xs.iter().map(|x| x + dx).collect(),
            ..self.clone()
        }
    }

    fn check_compatible(&self, other: &Lane) -> Result<()> {
        if self.xs.len() != other.xs.len() || self.height != other.height {
            return Err(Error::Geometry(format!(
                "lanes sampled differently: {} rows / H={} vs {} rows / H={}",
                self.xs.len(),
                self.height,
                other.xs.len(),
                other.height
            )));
        }
        Ok(())
    }
}

/// Annotated lane as ordered vertices, strictly increasing in y.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Polyline {
    points: Vec<(f64, f64)>,
}

impl Polyline {
    /// Sorts vertices by y and drops exact duplicates.
    pub fn new(mut points: Vec<(f64, f64)>) -> Result<Self> {
        if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
            return Err(Error::Geometry("non-finite polyline vertex".into()));
        }
        points.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.total_cmp(&b.0)));
        points.dedup();
        if points.len() < 2 {
            return Err(Error::Geometry(format!(
                "polyline needs at least 2 distinct vertices, got {}",
                points.len()
            )));
        }
        if let Some(w) = points.windows(2).find(|w| w[0].1 == w[1].1) {
            return Err(Error::Geometry(format!(
                "polyline is not monotone in y at y = {}",
                w[0].1
            )));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn y_range(&self) -> (f64, f64) {
        (self.points[0].1, self.points[self.points.len() - 1].1)
    }

    /// Linear interpolation in y; extrapolates from the end segments.
    pub fn x_at(&self, y: f64) -> f64 {
        let p = &self.points;
        let k = p.partition_point(|v| v.1 < y).clamp(1, p.len() - 1);
        let (a, b) = (p[k - 1], p[k]);
        a.0 + (b.0 - a.0) * (y - a.1) / (b.1 - a.1)
    }

    pub fn arc_length(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1].0 - w[0].0).hypot(w[1].1 - w[0].1))
            .sum()
    }

    pub fn flipped(&self, width: f64) -> Self {
        Self {
            points: self.points.iter().map(|&(x, y)| (width - x, y)).collect(),
        }
    }
}

/// Resample a polyline at the `n` canonical rows of an image of height `h`.
pub fn lane_from_polyline(p: &Polyline, n: usize, h: f64) -> Result<Lane> {
    if n < 2 {
        return Err(Error::Geometry(format!("need at least 2 rows, got {n}")));
    }
    let (y0, y1) = p.y_range();
    let xs = (0..n).map(|i| p.x_at(row_y(i, n, h))).collect();
    Lane::new(xs, y0.clamp(0.0, h), y1.clamp(0.0, h), h)
}

fn line_iou_impl(a: &Lane, b: &Lane, radius: f64, signed: bool) -> Result<f64> {
    if radius <= 0.0 {
        return Err(Error::Geometry(format!(
            "LineIoU radius must be positive, got {radius}"
        )));
    }
    a.check_compatible(b)?;
    let (mut inter, mut union) = (0.0, 0.0);
    for i in 0..a.rows() {
        if !(a.is_row_valid(i) && b.is_row_valid(i)) {
            continue;
        }
        let (xa, xb) = (a.xs[i], b.xs[i]);
        let ov = (xa + radius).min(xb + radius) - (xa - radius).max(xb - radius);
        inter += if signed { ov } else { ov.max(0.0) };
        union += (xa + radius).max(xb + radius) - (xa - radius).min(xb - radius);
    }
    Ok(if union > 0.0 { inter / union } else { 0.0 })
}

/// Interval-overlap IoU over rows valid in both lanes, in `[0, 1]`.
pub fn line_iou(a: &Lane, b: &Lane, radius: f64) -> Result<f64> {
    line_iou_impl(a, b, radius, false)
}

/// Like [`line_iou`] but negative per-row overlaps are kept, so the value
/// keeps decreasing (below zero) as lanes move apart.
pub fn line_iou_signed(a: &Lane, b: &Lane, radius: f64) -> Result<f64> {
    line_iou_impl(a, b, radius, true)
}

/// Rows `[g·N/G, (g+1)·N/G)` of segment `g`.
pub fn segment_rows(g: usize, groups: usize, n: usize) -> std::ops::Range<usize> {
    g * n / groups..(g + 1) * n / groups
}

/// Mean |Δx| over the commonly valid rows of segment `g` of `groups`.
pub fn segment_distance(a: &Lane, b: &Lane, g: usize, groups: usize) -> f64 {
    let (mut sum, mut count) = (0.0, 0usize);
    for i in segment_rows(g, groups, a.rows().min(b.rows())) {
        if a.is_row_valid(i) && b.is_row_valid(i) {
            sum += (a.xs[i] - b.xs[i]).abs();
            count += 1;
        }
    }
    if count == 0 {
        NO_OVERLAP_DISTANCE
    } else {
        sum / count as f64
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: bool) {
        self.bits[row * self.width + col] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }
}

/// Squared distance from `(px, py)` to segment `a–b`.
pub(crate) fn point_segment_dist2(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a.0 + t * dx - px, a.1 + t * dy - py);
    qx * qx + qy * qy
}

/// Pixels whose centers `(c+0.5, r+0.5)` lie within `width/2` of the
/// polyline through the lane's valid points.
pub fn rasterize_lane(lane: &Lane, width: f64, h: usize, w: usize) -> BinaryMask {
    let mut mask = BinaryMask::new(h, w);
    let pts = lane.valid_points();
    let r = width / 2.0;
    let r2 = r * r;
    let segs: Vec<((f64, f64), (f64, f64))> = match pts.len() {
        0 => return mask,
        1 => vec![(pts[0], pts[0])],
        _ => pts.windows(2).map(|s| (s[0], s[1])).collect(),
    };
    for (a, b) in segs {
        let x0 = (a.0.min(b.0) - r - 0.5).floor().max(0.0);
        let x1 = (a.0.max(b.0) + r - 0.5).ceil().min(w as f64 - 1.0);
        let y0 = (a.1.min(b.1) - r - 0.5).floor().max(0.0);
        let y1 = (a.1.max(b.1) + r - 0.5).ceil().min(h as f64 - 1.0);
        if x0 > x1 || y0 > y1 {
            continue;
        }
        for row in y0 as usize..=y1 as usize {
            for col in x0 as usize..=x1 as usize {
                if point_segment_dist2(col as f64 + 0.5, row as f64 + 0.5, a, b) <= r2 {
                    mask.set(row, col, true);
                }
            }
        }
    }
    mask
}

/// |m1 ∧ m2| / |m1 ∨ m2|, 0 when both are empty.
pub fn mask_iou(m1: &BinaryMask, m2: &BinaryMask) -> Result<f64> {
    if (m1.height, m1.width) != (m2.height, m2.width) {
        return Err(Error::Geometry(format!(
            "mask sizes differ: {}x{} vs {}x{}",
            m1.height, m1.width, m2.height, m2.width
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&a, &b) in m1.bits.iter().zip(&m2.bits) {
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vertical(x: f64, n: usize, h: f64) -> Lane {
        Lane::full(vec![x; n], h).unwrap()
    }

    #[test]
    fn vertical_polyline_resamples_to_constant_x() {
        let p = Polyline::new(vec![(50.0, 0.0), (50.0, 64.0)]).unwrap();
        let l = lane_from_polyline(&p, 72, 64.0).unwrap();
        assert!(l.xs.iter().all(|&x| x == 50.0));
        assert_eq!(l.valid_rows().count(), 72);
    }

    #[test]
    fn diagonal_polyline_resamples_linearly() {
        let p = Polyline::new(vec![(0.0, 0.0), (100.0, 100.0)]).unwrap();
        let l = lane_from_polyline(&p, 5, 100.0).unwrap();
        assert_eq!(l.xs, vec![0.0, 25.0, 50.0, 75.0, 100.0]);
    }

    #[test]
    fn short_or_flat_polylines_are_rejected() {
        assert!(Polyline::new(vec![(1.0, 1.0)]).is_err());
        assert!(Polyline::new(vec![(1.0, 1.0), (1.0, 1.0)]).is_err());
        assert!(Polyline::new(vec![(1.0, 5.0), (3.0, 5.0)]).is_err());
    }

    #[test]
    fn rows_outside_the_polyline_are_invalid() {
        let p = Polyline::new(vec![(10.0, 20.0), (30.0, 40.0)]).unwrap();
        let l = lane_from_polyline(&p, 11, 100.0).unwrap();
        let valid: Vec<usize> = l.valid_rows().collect();
        assert_eq!(valid, vec![2, 3, 4]);
    }

    #[test]
    fn line_iou_fixtures() {
        let a = vertical(40.0, 10, 64.0);
        assert_eq!(line_iou(&a, &a, 7.5).unwrap(), 1.0);
        assert_eq!(line_iou(&a, &a.shifted(15.0), 7.5).unwrap(), 0.0);
        assert_eq!(line_iou(&a, &a.shifted(40.0), 7.5).unwrap(), 0.0);
        let third = line_iou(&a, &a.shifted(7.5), 7.5).unwrap();
        assert!((third - 1.0 / 3.0).abs() < 1e-12);
        assert!(line_iou(&a, &a, 0.0).is_err());
        assert!(line_iou_signed(&a, &a.shifted(40.0), 7.5).unwrap() < 0.0);
    }

    #[test]
    fn lanes_without_common_rows_have_zero_iou() {
        let a = Lane::new(vec![5.0; 10], 0.0, 20.0, 64.0).unwrap();
        let b = Lane::new(vec![5.0; 10], 40.0, 64.0, 64.0).unwrap();
        assert_eq!(line_iou(&a, &b, 7.5).unwrap(), 0.0);
    }

    #[test]
    fn segment_distance_fixtures() {
        let a = vertical(10.0, 12, 64.0);
        assert_eq!(segment_distance(&a, &a, 0, 6), 0.0);
        assert_eq!(segment_distance(&a, &a.shifted(5.0), 3, 6), 5.0);
        let top = Lane::new(vec![0.0; 12], 0.0, 10.0, 64.0).unwrap();
        assert_eq!(segment_distance(&top, &a, 5, 6), NO_OVERLAP_DISTANCE);
    }

    #[test]
    fn partial_validity_segment_distance_matches_row_oracle() {
        let n = 24;
        let a = Lane::new((0..n).map(|i| i as f64).collect(), 10.0, 64.0, 64.0).unwrap();
        let b = Lane::new((0..n).map(|i| 2.0 * i as f64).collect(), 0.0, 40.0, 64.0).unwrap();
        for g in 0..4 {
            let rows: Vec<usize> = (g * n / 4..(g + 1) * n / 4)
                .filter(|&i| {
                    let y = row_y(i, n, 64.0);
                    (10.0..=40.0).contains(&y)
                })
                .collect();
            let expect = if rows.is_empty() {
                NO_OVERLAP_DISTANCE
            } else {
                rows.iter().map(|&i| i as f64).sum::<f64>() / rows.len() as f64
            };
            assert!((segment_distance(&a, &b, g, 4) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn vertical_lane_width_two_is_a_two_pixel_column() {
        let l = vertical(50.0, 72, 64.0);
        let m = rasterize_lane(&l, 2.0, 64, 160);
        for row in 0..64 {
            let cols: Vec<usize> = (0..160).filter(|&c| m.get(row, c)).collect();
            assert_eq!(cols, vec![49, 50], "row {row}");
        }
    }

    #[test]
    fn lane_outside_image_rasterizes_empty() {
        let l = vertical(-100.0, 72, 64.0);
        assert!(rasterize_lane(&l, 3.0, 64, 160).is_empty());
        let none = Lane::new(vec![10.0; 5], 1.0, 2.0, 64.0).unwrap();
        assert!(rasterize_lane(&none, 3.0, 64, 160).is_empty());
    }

    #[test]
    fn mask_iou_fixtures() {
        let mut a = BinaryMask::new(4, 8);
        let mut b = BinaryMask::new(4, 8);
        for r in 0..4 {
            for c in 0..4 {
                a.set(r, c, true);
                b.set(r, c + 2, true);
            }
        }
        assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
        // 8 shared of 24 covered.
        assert!((mask_iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let mut c = BinaryMask::new(4, 8);
        c.set(0, 7, true);
        assert_eq!(mask_iou(&a, &c).unwrap(), 0.0);
        assert_eq!(mask_iou(&BinaryMask::new(4, 8), &BinaryMask::new(4, 8)).unwrap(), 0.0);
        assert!(mask_iou(&a, &BinaryMask::new(3, 8)).is_err());
    }
}
