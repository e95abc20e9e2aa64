//! Grouped segment attention over proposal features and the
//! classification / regression heads.

use srlane_numerics::{Array, Real, Tape, Var};

use crate::assign::{AttentionTarget, MatchResult};
use crate::error::{Error, Result};
use crate::geometry::{segment_distance, Lane};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Tape handles for one attention block.
#[derive(Clone, Debug)]
pub struct LsamParams {
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    /// Per group: `[c, c/G]`.
    pub query: Vec<Var>,
    /// Per group: `[c/G, c/G]`.
    pub key: Vec<Var>,
    pub value: Vec<Var>,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
    pub ffn: Mlp,
}

/// Two-layer perceptron `W2·relu(W1·x + b1) + b2`, rows as samples.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl Mlp {
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let h = tape.matmul(x, self.w1)?;
        let h = tape.add(h, self.b1)?;
        let h = tape.relu(h);
        let y = tape.matmul(h, self.w2)?;
        Ok(tape.add(y, self.b2)?)
    }
}

fn layer_norm<T: Real>(tape: &mut Tape<T>, x: Var, gain: Var, bias: Var) -> Result<Var> {
    let n = tape.layer_norm_rows(x, LAYER_NORM_EPS);
    let n = tape.mul(n, gain)?;
    Ok(tape.add(n, bias)?)
}

#[derive(Clone, Debug)]
pub struct LsamOutput {
    pub features: Var,
    /// Pre-softmax scores per group, `[L, L]`.
    pub logits: Vec<Var>,
    /// Attention weights per group, `[L, L]`, rows summing to one.
    pub weights: Vec<Var>,
}

/// Each proposal queries, per group, the matching segment slice of every
/// proposal; group outputs are added back to that slice, followed by a
/// feed-forward block. Both sub-blocks are pre-normalized and residual.
pub fn lsam_forward<T: Real>(tape: &mut Tape<T>, x: Var, p: &LsamParams) -> Result<LsamOutput> {
    let s = tape.shape(x).to_vec();
    let groups = p.query.len();
    if s.len() != 2 || groups == 0 || !s[1].is_multiple_of(groups) || p.key.len() != groups || p.value.len() != groups {
        return Err(Error::Config(format!(
            "attention input {s:?} incompatible with {groups} groups"
        )));
    }
    let width = s[1] / groups;
    let inv_sqrt = 1.0 / (width as f64).sqrt();
    let xn = layer_norm(tape, x, p.ln1_gain, p.ln1_bias)?;
    let mut outs = Vec::with_capacity(groups);
    let mut logits = Vec::with_capacity(groups);
    let mut weights = Vec::with_capacity(groups);
    for g in 0..groups {
        let q = tape.matmul(xn, p.query[g])?;
        let seg = tape.slice(xn, 1, g * width, (g + 1) * width)?;
        let k = tape.matmul(seg, p.key[g])?;
        let v = tape.matmul(seg, p.value[g])?;
        let kt = tape.transpose(k)?;
        let sc = tape.matmul(q, kt)?;
        let sc = tape.scale(sc, inv_sqrt);
        let a = tape.softmax_rows(sc);
        outs.push(tape.matmul(a, v)?);
        logits.push(sc);
        weights.push(a);
    }
    let attended = tape.concat(&outs, 1)?;
    let x1 = tape.add(x, attended)?;
    let xn2 = layer_norm(tape, x1, p.ln2_gain, p.ln2_bias)?;
    let f = p.ffn.forward(tape, xn2)?;
    let features = tape.add(x1, f)?;
    Ok(LsamOutput {
        features,
        logits,
        weights,
    })
}

/// For every matched proposal and group, the proposal whose segment lies
/// closest to the matched ground truth's segment (first index on ties).
pub fn attention_targets(matches: &MatchResult, proposals: &[Lane], gts: &[Lane], groups: usize) -> AttentionTarget {
    let mut targets = vec![None; proposals.len()];
    for &(i, m) in &matches.pairs {
        let gt = &gts[m];
        let per_group = (0..groups)
            .map(|g| {
                let mut best = (f64::INFINITY, 0);
                for (j, l) in proposals.iter().enumerate() {
                    let d = segment_distance(l, gt, g, groups);
                    if d < best.0 {
                        best = (d, j);
                    }
                }
                best.1
            })
            .collect();
        targets[i] = Some(per_group);
    }
    AttentionTarget {
        proposals: proposals.len(),
        groups,
        targets,
    }
}

/// Foreground logits and probabilities, both `[L]`.
pub fn classify<T: Real>(tape: &mut Tape<T>, x: Var, head: &Mlp) -> Result<(Var, Var)> {
    let l = tape.shape(x)[0];
    let out = head.forward(tape, x)?;
    let logits = tape.reshape(out, &[l])?;
    let scores = tape.sigmoid(logits);
    Ok((logits, scores))
}

#[derive(Clone, Copy, Debug)]
pub struct RegressOutput {
    /// Refined x per row, `[L, N]`.
    pub xs: Var,
    /// Ordered `(y_min, y_max)` in pixels, `[L, 2]`.
    pub ends: Var,
}

/// Per-row offsets (scaled by `dx_scale` pixels) added to the sketched
/// lanes `base: [L, N]`, plus an ordered vertical extent.
pub fn regress<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    head: &Mlp,
    base: Var,
    height: f64,
    dx_scale: f64,
) -> Result<RegressOutput> {
    let bs = tape.shape(base).to_vec();
    let (l, n) = (bs[0], bs[1]);
    let out = head.forward(tape, x)?;
    if tape.shape(out) != [l, n + 2] {
        return Err(Error::Config(format!(
            "regression head emits {:?}, expected [{l}, {}]",
            tape.shape(out),
            n + 2
        )));
    }
    let dx = tape.slice(out, 1, 0, n)?;
    let dx = tape.scale(dx, dx_scale);
    let xs = tape.add(base, dx)?;
    let raw = tape.slice(out, 1, n, n + 2)?;
    let raw = tape.sigmoid(raw);
    let raw = tape.scale(raw, height);
    let vals = tape.value(raw).data().to_vec();
    let mut idx = Vec::with_capacity(2 * l);
    for i in 0..l {
        let (a, b) = (vals[2 * i], vals[2 * i + 1]);
        if a <= b {
            idx.extend([2 * i, 2 * i + 1]);
        } else {
            idx.extend([2 * i + 1, 2 * i]);
        }
    }
    let ends = tape.gather(raw, &idx)?;
    let ends = tape.reshape(ends, &[l, 2])?;
    Ok(RegressOutput { xs, ends })
}

/// Materialize refined lanes from evaluated head outputs.
pub fn refined_lanes<T: Real>(tape: &Tape<T>, out: &RegressOutput, scores: Var, height: f64) -> Vec<Lane> {
    let xs: &Array<T> = tape.value(out.xs);
    let (l, n) = (xs.rows(), xs.cols());
    let ends = tape.value(out.ends).data();
    let sc = tape.value(scores).data();
    (0..l)
        .map(|i| {
            let y0 = ends[2 * i].as_f64().clamp(0.0, height);
            let y1 = ends[2 * i + 1].as_f64().clamp(y0, height);
            Lane {
                xs: xs.data()[i * n..(i + 1) * n].iter().map(|v| v.as_f64()).collect(),
                y_min: y0,
                y_max: y1,
                score: sc[i].as_f64(),
                height,
            }
        })
        .collect()
}
