//! Multi-level feature sampling along lane proposals with a learnable
//! per-point scale embedding, and the grouped projection to proposal
//! features.

use srlane_numerics::{Array, Real, Tape, Var};

use crate::error::{Error, Result};
use crate::geometry::Lane;

pub const DEFAULT_STRIDES: [usize; 3] = [8, 16, 32];

/// `w_s ∝ exp(−|2^z − s|)`, normalized over the given strides.
pub fn scale_weights(z: f64, strides: &[f64]) -> Vec<f64> {
    let two = z.exp2();
    let logits: Vec<f64> = strides.iter().map(|s| -(two - s).abs()).collect();
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

/// Differentiable scale weights for every entry of `z: [P]`, as `[P, S]`.
pub fn scale_weight_rows<T: Real>(tape: &mut Tape<T>, z: Var, strides: &[f64]) -> Result<Var> {
    let p = tape.shape(z)[0];
    let two = {
        let zl = tape.scale(z, std::f64::consts::LN_2);
        tape.exp(zl)
    };
    let mut cols = Vec::with_capacity(strides.len());
    for &s in strides {
        let d = tape.affine(two, 1.0, -s);
        let a = tape.abs(d);
        let n = tape.neg(a);
        cols.push(tape.reshape(n, &[p, 1])?);
    }
    let logits = tape.concat(&cols, 1)?;
    Ok(tape.softmax_rows(logits))
}

/// One pyramid level held as plain values, `[d, h, w]`.
#[derive(Clone, Debug)]
pub struct FeatureLevel<T: Real> {
    pub stride: f64,
    pub data: Array<T>,
}

impl<T: Real> FeatureLevel<T> {
    pub fn new(stride: f64, data: Array<T>) -> Result<Self> {
        if data.ndim() != 3 {
            return Err(Error::Config(format!(
                "feature level must be [d, h, w], got {:?}",
                data.shape()
            )));
        }
        Ok(Self { stride, data })
    }

    /// Bilinear lookup at an image point; cells outside the grid read zero.
    pub fn sample(&self, x: f64, y: f64) -> Vec<f64> {
        let s = self.data.shape();
        let (d, h, w) = (s[0], s[1], s[2]);
        let mut out = vec![0.0; d];
        let u = x / self.stride - 0.5;
        let v = y / self.stride - 0.5;
        if !u.is_finite() || !v.is_finite() {
            return out;
        }
        let (u0, v0) = (u.floor(), v.floor());
        let (fu, fv) = (u - u0, v - v0);
        for (dr, wr) in [(0i64, 1.0 - fv), (1, fv)] {
            for (dc, wc) in [(0i64, 1.0 - fu), (1, fu)] {
                let (r, c) = (v0 as i64 + dr, u0 as i64 + dc);
                if r < 0 || c < 0 || r >= h as i64 || c >= w as i64 {
                    continue;
                }
                for (ch, o) in out.iter_mut().enumerate() {
                    *o += wr * wc * self.data.data()[(ch * h + r as usize) * w + c as usize].as_f64();
                }
            }
        }
        out
    }
}

/// Free-standing form of the per-level lookup.
pub fn bilinear_sample<T: Real>(level: &FeatureLevel<T>, x: f64, y: f64) -> Vec<f64> {
    level.sample(x, y)
}

/// `n` points at equally spaced rows over the lane's vertical extent, top first.
pub fn sample_points(lane: &Lane, n: usize) -> Vec<(f64, f64)> {
    (0..n)
        .map(|j| {
            let t = if n > 1 { j as f64 / (n - 1) as f64 } else { 0.5 };
            let y = lane.y_min + t * (lane.y_max - lane.y_min);
            (lane.x_at(y), y)
        })
        .collect()
}

/// How each sample point combines the pyramid levels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sampling {
    /// Learned per-point mixture over all levels.
    Adaptive,
    /// Read one level only (index into the pyramid).
    SingleLevel(usize),
}

/// Features at points `(xs, ys)`, both `[P]`, as `[P, d]`. `weights` is the
/// `[P, S]` level mixture (one row per point); with a single level it may be
/// omitted.
pub fn sample_features<T: Real>(
    tape: &mut Tape<T>,
    levels: &[(f64, Var)],
    xs: Var,
    ys: Var,
    weights: Option<Var>,
) -> Result<Var> {
    match (levels, weights) {
        ([], _) => Err(Error::Config("empty feature pyramid".into())),
        ([(stride, f)], None) => Ok(tape.bilinear_sample(*f, xs, ys, *stride)?),
        (_, None) => Err(Error::Config("multi-level sampling needs level weights".into())),
        (_, Some(w)) => {
            let mut acc: Option<Var> = None;
            for (s, &(stride, f)) in levels.iter().enumerate() {
                let v = tape.bilinear_sample(f, xs, ys, stride)?;
                let ws = tape.slice(w, 1, s, s + 1)?;
                let term = tape.mul(v, ws)?;
                acc = Some(match acc {
                    None => term,
                    Some(a) => tape.add(a, term)?,
                });
            }
            Ok(acc.expect("nonempty pyramid"))
        }
    }
}

/// Sample `z.len()` points along each lane and mix levels with the shared
/// embedding `z`. Returns `[L·N_p, d]`, proposal-major.
pub fn sample_proposal_features<T: Real>(
    tape: &mut Tape<T>,
    levels: &[(f64, Var)],
    lanes: &[Lane],
    z: Var,
    mode: Sampling,
) -> Result<Var> {
    let np = tape.shape(z)[0];
    let (mut px, mut py) = (Vec::new(), Vec::new());
    for lane in lanes {
        for (x, y) in sample_points(lane, np) {
            px.push(x);
            py.push(y);
        }
    }
    let xs = tape.constant(Array::from_f64(&[px.len()], &px)?);
    let ys = tape.constant(Array::from_f64(&[py.len()], &py)?);
    sample_at(tape, levels, xs, ys, z, mode)
}

/// Like [`sample_proposal_features`] with caller-provided point coordinates
/// (`[L·N_p]`, possibly differentiable).
pub fn sample_at<T: Real>(
    tape: &mut Tape<T>,
    levels: &[(f64, Var)],
    xs: Var,
    ys: Var,
    z: Var,
    mode: Sampling,
) -> Result<Var> {
    match mode {
        Sampling::SingleLevel(k) => {
            let level = levels
                .get(k)
                .ok_or_else(|| Error::Config(format!("no pyramid level {k}")))?;
            sample_features(tape, std::slice::from_ref(level), xs, ys, None)
        }
        Sampling::Adaptive => {
            let np = tape.shape(z)[0];
            let p = tape.shape(xs)[0];
            if !p.is_multiple_of(np) {
                return Err(Error::Config(format!("{p} points is not a multiple of N_p = {np}")));
            }
            let strides: Vec<f64> = levels.iter().map(|l| l.0).collect();
            let w = scale_weight_rows(tape, z, &strides)?;
            let idx: Vec<usize> = (0..p).map(|i| i % np).collect();
            let w = tape.gather_rows(w, &idx)?;
            sample_features(tape, levels, xs, ys, Some(w))
        }
    }
}

/// Partition of sample points and channels into segment groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GroupLayout {
    pub points: usize,
    pub groups: usize,
    pub channels: usize,
}

impl GroupLayout {
    pub fn new(points: usize, groups: usize, channels: usize) -> Result<Self> {
        if groups == 0 || !channels.is_multiple_of(groups) {
            return Err(Error::Config(format!(
                "channels ({channels}) must be divisible by groups ({groups})"
            )));
        }
        if points < groups {
            return Err(Error::Config(format!(
                "{points} sample points cannot fill {groups} groups"
            )));
        }
        Ok(Self {
            points,
            groups,
            channels,
        })
    }

    /// Sample points feeding group `g`.
    pub fn point_range(&self, g: usize) -> std::ops::Range<usize> {
        g * self.points / self.groups..(g + 1) * self.points / self.groups
    }

    pub fn channel_range(&self, g: usize) -> std::ops::Range<usize> {
        let w = self.channels / self.groups;
        g * w..(g + 1) * w
    }

    pub fn group_width(&self) -> usize {
        self.channels / self.groups
    }
}

/// Per-group linear map plus ReLU from the group's sampled points to its
/// channel slice. `raw` is `[L·N_p, d]`; `params[g]` is
/// `(W_g: [|points_g|·d, c/G], b_g: [c/G])`. Returns `[L, c]`.
pub fn project_features<T: Real>(
    tape: &mut Tape<T>,
    raw: Var,
    layout: &GroupLayout,
    params: &[(Var, Var)],
) -> Result<Var> {
    let s = tape.shape(raw).to_vec();
    if s.len() != 2 || !s[0].is_multiple_of(layout.points) {
        return Err(Error::Config(format!(
            "raw features {s:?} do not hold whole proposals of {} points",
            layout.points
        )));
    }
    if params.len() != layout.groups {
        return Err(Error::Config(format!(
            "{} projection parameter sets for {} groups",
            params.len(),
            layout.groups
        )));
    }
    let (l, d) = (s[0] / layout.points, s[1]);
    let flat = tape.reshape(raw, &[l, layout.points * d])?;
    let mut outs = Vec::with_capacity(layout.groups);
    for (g, &(w, b)) in params.iter().enumerate() {
        let pr = layout.point_range(g);
        let part = tape.slice(flat, 1, pr.start * d, pr.end * d)?;
        let y = tape.matmul(part, w)?;
        let y = tape.add(y, b)?;
        outs.push(tape.relu(y));
    }
    Ok(tape.concat(&outs, 1)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_level_weight_is_one() {
        for z in [-3.0, 0.0, 2.5, 7.0] {
            assert_eq!(scale_weights(z, &[8.0]), vec![1.0]);
        }
    }

    #[test]
    fn weights_peak_at_nearest_stride() {
        let w = scale_weights(4.0, &[8.0, 16.0, 32.0]);
        assert!(w[1] > w[0] && w[1] > w[2]);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layout_partitions_points_and_channels() {
        let l = GroupLayout::new(36, 6, 192).unwrap();
        assert_eq!(l.point_range(2), 12..18);
        assert_eq!(l.channel_range(5), 160..192);
        assert!(GroupLayout::new(36, 5, 192).is_err());
    }

    #[test]
    fn sample_points_span_extent() {
        let lane = Lane::new(vec![10.0, 20.0, 30.0], 16.0, 48.0, 64.0).unwrap();
        let p = sample_points(&lane, 3);
        assert_eq!(p[0].1, 16.0);
        assert_eq!(p[2].1, 48.0);
        assert!((p[1].0 - 20.0).abs() < 1e-12);
    }
}
