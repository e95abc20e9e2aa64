//! One-to-one proposal/ground-truth matching and the training losses.

use serde::{Deserialize, Serialize};
use srlane_numerics::{Array, Real, Tape, Var};

use crate::error::{Error, Result};
use crate::geometry::{line_iou_signed, Lane};
use crate::sketch::DirectionMap;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchResult {
    /// `(proposal, gt)` pairs ordered by gt index.
    pub pairs: Vec<(usize, usize)>,
    /// One entry per proposal; true when matched.
    pub labels: Vec<bool>,
}

impl MatchResult {
    pub fn gt_of(&self, proposal: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.0 == proposal).map(|p| p.1)
    }

    pub fn positives(&self) -> usize {
        self.pairs.len()
    }
}

/// `cost[i][m] = 1 − signed LineIoU(proposal i, gt m)`.
pub fn build_cost(proposals: &[Lane], gts: &[Lane], radius: f64) -> Result<Vec<Vec<f64>>> {
    proposals
        .iter()
        .map(|p| gts.iter().map(|g| Ok(1.0 - line_iou_signed(p, g, radius)?)).collect())
        .collect()
}

/// Minimum-cost assignment of every row of `a` (n×m, n ≤ m) to a distinct
/// column. Returns the total and the column chosen for each row.
pub fn solve_rows(a: &[Vec<f64>]) -> (f64, Vec<usize>) {
    let n = a.len();
    if n == 0 {
        return (0.0, Vec::new());
    }
    let m = a[0].len();
    // Potentials formulation, 1-based with a virtual column 0.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut cols = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            cols[p[j] - 1] = j - 1;
        }
    }
    let total = cols.iter().enumerate().map(|(i, &j)| a[i][j]).sum();
    (total, cols)
}

/// Optimal one-to-one matching of the `M` columns (ground truths) of an
/// `L×M` cost matrix to distinct rows (proposals). Among optimal
/// assignments the one whose proposal list, read in gt order, is
/// lexicographically smallest is returned.
pub fn hungarian_match(cost: &[Vec<f64>]) -> Result<MatchResult> {
    let l = cost.len();
    let m = cost.first().map_or(0, |r| r.len());
    if cost.iter().any(|r| r.len() != m) {
        return Err(Error::Assignment("ragged cost matrix".into()));
    }
    if l < m {
        return Err(Error::Assignment(format!(
            "{m} ground-truth lanes but only {l} proposals; enlarge the proposal grid"
        )));
    }
    if let Some(bad) = cost.iter().flatten().find(|c| !c.is_finite()) {
        return Err(Error::Assignment(format!("non-finite cost {bad}")));
    }
    let by_gt: Vec<Vec<f64>> = (0..m).map(|g| (0..l).map(|i| cost[i][g]).collect()).collect();
    let mut chosen: Vec<usize> = Vec::with_capacity(m);
    let mut fixed_cost = 0.0;
    for g in 0..m {
        // Best completion for every still-free proposal given the choices so far.
        let totals: Vec<(usize, f64)> = (0..l)
            .filter(|i| !chosen.contains(i))
            .map(|i| {
                let free: Vec<usize> = (0..l).filter(|r| *r != i && !chosen.contains(r)).collect();
                let rest: Vec<Vec<f64>> = (g + 1..m)
                    .map(|h| free.iter().map(|&r| by_gt[h][r]).collect())
                    .collect();
                (i, fixed_cost + by_gt[g][i] + solve_rows(&rest).0)
            })
            .collect();
        let best = totals.iter().map(|t| t.1).fold(f64::INFINITY, f64::min);
        let tol = 1e-12 * (1.0 + best.abs());
        let (i, _) = *totals.iter().find(|t| t.1 <= best + tol).expect("free proposal");
        chosen.push(i);
        fixed_cost += by_gt[g][i];
    }
    let mut labels = vec![false; l];
    for &i in &chosen {
        labels[i] = true;
    }
    Ok(MatchResult {
        pairs: chosen.into_iter().enumerate().map(|(g, i)| (i, g)).collect(),
        labels,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub cls: f64,
    pub reg: f64,
    pub dir: f64,
    pub attn: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 2.0,
            reg: 1.0,
            dir: 0.05,
            attn: 0.05,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub cls: f64,
    pub reg: f64,
    pub dir: f64,
    pub attn: f64,
    pub total: f64,
}

/// Weighted sum of the four loss terms `(cls, reg, dir, attn)`.
pub fn total_loss(parts: [f64; 4], w: &LossWeights) -> Result<LossReport> {
    let names = ["classification", "regression", "direction", "attention"];
    for (v, name) in parts.iter().zip(names) {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss { term: name, value: *v });
        }
    }
    let [cls, reg, dir, attn] = parts;
    Ok(LossReport {
        cls,
        reg,
        dir,
        attn,
        total: w.cls * cls + w.reg * reg + w.dir * dir + w.attn * attn,
    })
}

pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;
pub const FOCAL_EPS: f64 = 1e-7;

/// Mean over proposals of `−α_t (1−p_t)^γ ln p_t` on scores `[L]`.
pub fn focal_loss<T: Real>(tape: &mut Tape<T>, scores: Var, labels: &[bool], alpha: f64, gamma: f64) -> Result<Var> {
    if tape.shape(scores) != [labels.len()] {
        return Err(Error::Config(format!(
            "{} labels for scores of shape {:?}",
            labels.len(),
            tape.shape(scores)
        )));
    }
    let sign: Vec<f64> = labels.iter().map(|&y| if y { 1.0 } else { -1.0 }).collect();
    let offset: Vec<f64> = labels.iter().map(|&y| if y { 0.0 } else { 1.0 }).collect();
    let alpha_t: Vec<f64> = labels
        .iter()
        .map(|&y| if y { -alpha } else { -(1.0 - alpha) })
        .collect();
    let n = labels.len();
    let p = tape.clamp(scores, FOCAL_EPS, 1.0 - FOCAL_EPS)?;
    let sign = tape.constant(Array::from_f64(&[n], &sign)?);
    let offset = tape.constant(Array::from_f64(&[n], &offset)?);
    let alpha_t = tape.constant(Array::from_f64(&[n], &alpha_t)?);
    let signed = tape.mul(p, sign)?;
    let pt = tape.add(signed, offset)?;
    let log_pt = tape.log(pt);
    let one_minus = tape.affine(pt, -1.0, 1.0);
    let modulating = tape.powf(one_minus, gamma);
    let term = tape.mul(modulating, log_pt)?;
    let term = tape.mul(term, alpha_t)?;
    Ok(tape.mean(term))
}

/// `1 − signed LineIoU` between row `row` of `pred: [L, N]` (or a plain
/// `[N]` vector with `row = 0`) and `gt`, over the rows valid in `gt`.
/// Returns the constant 1 when `gt` has no valid rows.
pub fn liou_loss_row<T: Real>(tape: &mut Tape<T>, pred: Var, row: usize, gt: &Lane, radius: f64) -> Result<Var> {
    let n = gt.rows();
    let rows: Vec<usize> = gt.valid_rows().collect();
    if rows.is_empty() {
        return Ok(tape.scalar(1.0));
    }
    let idx: Vec<usize> = rows.iter().map(|r| row * n + r).collect();
    let target: Vec<f64> = rows.iter().map(|&r| gt.xs[r]).collect();
    let x = tape.gather(pred, &idx)?;
    let t = tape.constant(Array::from_f64(&[rows.len()], &target)?);
    let diff = tape.sub(x, t)?;
    let d = tape.abs(diff);
    let inter = tape.affine(d, -1.0, 2.0 * radius);
    let union = tape.affine(d, 1.0, 2.0 * radius);
    let si = tape.sum(inter);
    let su = tape.sum(union);
    let iou = tape.div(si, su)?;
    Ok(tape.affine(iou, -1.0, 1.0))
}

pub fn liou_loss<T: Real>(tape: &mut Tape<T>, pred: Var, gt: &Lane, radius: f64) -> Result<Var> {
    liou_loss_row(tape, pred, 0, gt, radius)
}

/// L1 between predicted endpoints `ends: [L, 2]` (pixels) at `row` and the
/// ground-truth extent, both normalized by image height.
pub fn endpoint_loss_row<T: Real>(tape: &mut Tape<T>, ends: Var, row: usize, gt: &Lane) -> Result<Var> {
    let e = tape.gather(ends, &[2 * row, 2 * row + 1])?;
    let e = tape.scale(e, 1.0 / gt.height);
    let t = tape.constant(Array::from_f64(&[2], &[gt.y_min / gt.height, gt.y_max / gt.height])?);
    let diff = tape.sub(e, t)?;
    let a = tape.abs(diff);
    Ok(tape.mean(a))
}

/// Mean `|pred − gt/180|` over supervised cells. `pred` holds normalized
/// angles in `[0, 1)` laid out like the map (row-major, any shape).
pub fn direction_loss<T: Real>(tape: &mut Tape<T>, pred: Var, gt: &DirectionMap) -> Result<Var> {
    let cells = gt.rows * gt.cols;
    let pred_len: usize = tape.shape(pred).iter().product();
    if pred_len != cells {
        return Err(Error::Config(format!(
            "direction prediction {:?} vs {}x{} target",
            tape.shape(pred),
            gt.rows,
            gt.cols
        )));
    }
    let idx: Vec<usize> = match &gt.mask {
        Some(m) => (0..cells).filter(|&i| m[i]).collect(),
        None => (0..cells).collect(),
    };
    if idx.is_empty() {
        return Ok(tape.scalar(0.0));
    }
    let target: Vec<f64> = idx.iter().map(|&i| gt.angles[i] / 180.0).collect();
    let x = tape.gather(pred, &idx)?;
    let t = tape.constant(Array::from_f64(&[idx.len()], &target)?);
    let diff = tape.sub(x, t)?;
    let a = tape.abs(diff);
    Ok(tape.mean(a))
}

/// For positive proposal `i`, `targets[i]` holds the proposal each group
/// should attend to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionTarget {
    pub proposals: usize,
    pub groups: usize,
    pub targets: Vec<Option<Vec<usize>>>,
}

impl AttentionTarget {
    /// Entry `W[i, j, g]` of the dense binary target.
    pub fn weight(&self, i: usize, j: usize, g: usize) -> f64 {
        match &self.targets[i] {
            Some(t) if t[g] == j => 1.0,
            _ => 0.0,
        }
    }

    pub fn positive_mask(&self) -> Vec<bool> {
        self.targets.iter().map(Option::is_some).collect()
    }
}

/// Mean over positive `(i, g)` of the cross-entropy between
/// `softmax(logits[g][i, ·])` and the one-hot target.
pub fn attention_loss<T: Real>(tape: &mut Tape<T>, logits: &[Var], target: &AttentionTarget) -> Result<Var> {
    if logits.len() != target.groups {
        return Err(Error::Config(format!(
            "{} attention maps for {} groups",
            logits.len(),
            target.groups
        )));
    }
    let l = target.proposals;
    let mut acc: Option<Var> = None;
    let mut count = 0usize;
    for (g, &lg) in logits.iter().enumerate() {
        let idx: Vec<usize> = target
            .targets
            .iter()
            .enumerate()
            .filter_map(|(i, t)| t.as_ref().map(|t| i * l + t[g]))
            .collect();
        if idx.is_empty() {
            continue;
        }
        count += idx.len();
        let ls = tape.log_softmax_rows(lg);
        let picked = tape.gather(ls, &idx)?;
        let s = tape.sum(picked);
        acc = Some(match acc {
            None => s,
            Some(a) => tape.add(a, s)?,
        });
    }
    Ok(match acc {
        None => tape.scalar(0.0),
        Some(a) => tape.scale(a, -1.0 / count as f64),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pair_and_diagonal() {
        let m = hungarian_match(&[vec![0.3]]).unwrap();
        assert_eq!(m.pairs, vec![(0, 0)]);
        let c = vec![vec![0.0, 1.0, 1.0], vec![1.0, 0.0, 1.0], vec![1.0, 1.0, 0.0]];
        assert_eq!(hungarian_match(&c).unwrap().pairs, vec![(0, 0), (1, 1), (2, 2)]);
    }

    #[test]
    fn too_few_proposals_is_an_error() {
        let err = hungarian_match(&[vec![0.0, 1.0]]).unwrap_err();
        assert!(err.to_string().contains("enlarge"));
    }

    #[test]
    fn ties_pick_smallest_proposals() {
        let c = vec![vec![1.0, 1.0]; 4];
        assert_eq!(hungarian_match(&c).unwrap().pairs, vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn total_loss_weights() {
        let r = total_loss([1.0; 4], &LossWeights::default()).unwrap();
        assert!((r.total - 3.1).abs() < 1e-12);
        assert_eq!(total_loss([0.0; 4], &LossWeights::default()).unwrap().total, 0.0);
        let err = total_loss([0.0, f64::NAN, 0.0, 0.0], &LossWeights::default()).unwrap_err();
        assert!(err.to_string().contains("regression"));
    }
}
