//! Parameters and the end-to-end forward pass.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use srlane_numerics::{Array, Real, Tape, Var};

use super::config::{ModelConfig, ProposalInit, SamplingMode};
use crate::assign::{
    attention_loss, build_cost, direction_loss, endpoint_loss_row, focal_loss, hungarian_match, liou_loss_row,
    MatchResult, FOCAL_ALPHA, FOCAL_GAMMA,
};
use crate::error::{Error, Result};
use crate::geometry::{Lane, Polyline};
use crate::refine::{
    attention_targets, classify, lsam_forward, refined_lanes, regress, LsamOutput, LsamParams, Mlp, RegressOutput,
};
use crate::sampler::{project_features, sample_proposal_features, GroupLayout, Sampling};
use crate::sketch::{
    construct_proposals, default_anchors, encode_direction_gt, fixed_line_anchors, resize_direction_map, wrap_angle,
    DirectionMap, ProposalSet, ANCHOR_ANGLES,
};

pub const STRIDES: [usize; 3] = [8, 16, 32];

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    pub names: Vec<String>,
    pub values: Vec<Array<f32>>,
}

impl ParamStore {
    pub fn push(&mut self, name: impl Into<String>, value: Array<f32>) {
        self.names.push(name.into());
        self.values.push(value);
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Array<f32>> {
        self.index(name).map(|i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array<f32>> {
        self.index(name).map(move |i| &mut self.values[i])
    }

    pub fn total(&self) -> usize {
        self.values.iter().map(Array::len).sum()
    }

    /// Register every tensor as a differentiable leaf.
    pub fn bind<T: Real>(&self, tape: &mut Tape<T>) -> Bound {
        let vars = self.values.iter().map(|v| tape.param(v.cast())).collect();
        Bound {
            vars,
            index: self.names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect(),
        }
    }

    pub fn pairs(&self) -> Vec<(String, Array<f32>)> {
        self.names.iter().cloned().zip(self.values.iter().cloned()).collect()
    }
}

/// Tape handles for a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    pub vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }
}

struct Init {
    rng: ChaCha8Rng,
    store: ParamStore,
}

impl Init {
    fn uniform(&mut self, name: String, shape: &[usize], bound: f64) {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..=bound) as f32).collect();
        self.store.push(name, Array::new(shape, data).expect("nonempty shape"));
    }

    /// He-uniform weights for a layer with the given fan-in.
    fn he(&mut self, name: String, shape: &[usize], fan_in: usize) {
        self.uniform(name, shape, (6.0 / fan_in as f64).sqrt());
    }

    fn fill(&mut self, name: String, shape: &[usize], v: f32) {
        self.store.push(name, Array::full(shape, v));
    }

    fn conv(&mut self, prefix: &str, out_c: usize, in_c: usize, k: usize) {
        self.he(format!("{prefix}.w"), &[out_c, in_c, k, k], in_c * k * k);
        self.fill(format!("{prefix}.b"), &[out_c], 0.0);
    }

    fn linear(&mut self, prefix: &str, suffix: &str, fan_in: usize, fan_out: usize, scale: f64) {
        self.uniform(
            format!("{prefix}.w{suffix}"),
            &[fan_in, fan_out],
            scale * (6.0 / fan_in as f64).sqrt(),
        );
        self.fill(format!("{prefix}.b{suffix}"), &[fan_out], 0.0);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

/// Where the proposals of a forward pass come from.
#[derive(Clone, Copy, Debug)]
pub enum ProposalSource<'a> {
    /// As configured: predicted direction map or fixed anchors.
    Config,
    /// An externally supplied direction map at any resolution.
    Oracle(&'a DirectionMap),
    Fixed(&'a ProposalSet),
}

#[derive(Clone, Debug)]
pub struct Forward {
    /// Normalized angle maps `[1, H/s, W/s]` per stride.
    pub directions: Vec<Var>,
    pub proposals: ProposalSet,
    /// Sketched x per proposal row, `[L, N]`.
    pub sketch: Var,
    /// Projected proposal features before attention, `[L, c]`.
    pub features: Var,
    pub lsam: Option<LsamOutput>,
    pub logits: Var,
    pub scores: Var,
    pub reg: RegressOutput,
    /// Multiply-accumulates spent after the backbone.
    pub head_macs: u64,
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub cls: Var,
    pub reg: Var,
    pub dir: Var,
    pub attn: Var,
    pub total: Var,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(c.seed ^ 0x5eed_5eed),
            store: ParamStore::default(),
        };
        init.conv("backbone.stem0", c.stem_width, 3, 3);
        init.conv("backbone.stem1", c.stem_width, c.stem_width, 3);
        let mut prev = c.stem_width;
        for (s, &w) in STRIDES.iter().zip(&c.widths) {
            init.conv(&format!("backbone.s{s}.down"), w, prev, 3);
            init.conv(&format!("backbone.s{s}.conv"), w, w, 3);
            prev = w;
        }
        for (s, &w) in STRIDES.iter().zip(&c.widths) {
            init.conv(&format!("neck.s{s}"), c.feat_dim, w, 1);
        }
        for s in STRIDES {
            init.conv(&format!("direction.s{s}"), 1, c.feat_dim, 3);
        }
        if c.sampling == SamplingMode::Adaptive {
            init.fill("sampler.z".into(), &[c.points], c.z_init as f32);
        }
        let layout = GroupLayout::new(c.points, c.groups, c.channels)?;
        let gw = layout.group_width();
        for g in 0..c.groups {
            let pts = layout.point_range(g).len();
            init.linear("proj", &format!("{g}"), pts * c.feat_dim, gw, 1.0);
        }
        if c.lsam {
            init.fill("lsam.ln1.gain".into(), &[c.channels], 1.0);
            init.fill("lsam.ln1.bias".into(), &[c.channels], 0.0);
            for g in 0..c.groups {
                init.uniform(
                    format!("lsam.q{g}"),
                    &[c.channels, gw],
                    (3.0 / c.channels as f64).sqrt(),
                );
                init.uniform(format!("lsam.k{g}"), &[gw, gw], (3.0 / gw as f64).sqrt());
                init.uniform(format!("lsam.v{g}"), &[gw, gw], (3.0 / gw as f64).sqrt());
            }
            init.fill("lsam.ln2.gain".into(), &[c.channels], 1.0);
            init.fill("lsam.ln2.bias".into(), &[c.channels], 0.0);
            init.linear("lsam.ffn", "1", c.channels, 2 * c.channels, 1.0);
            init.linear("lsam.ffn", "2", 2 * c.channels, c.channels, 0.1);
        }
        init.linear("cls", "1", c.channels, c.cls_hidden, 1.0);
        init.linear("cls", "2", c.cls_hidden, 1, 0.1);
        // Start with a low foreground prior so the many negatives do not dominate.
        init.store.get_mut("cls.b2").expect("just added").data_mut()[0] = -(99.0f32).ln();
        init.linear("reg", "1", c.channels, c.reg_hidden, 1.0);
        init.linear("reg", "2", c.reg_hidden, c.rows + 2, 0.01);
        {
            let b = init.store.get_mut("reg.b2").expect("just added").data_mut();
            // Endpoints start near the typical horizon and the bottom edge.
            b[c.rows] = logit(0.4);
            b[c.rows + 1] = logit(0.98);
        }
        Ok(Self {
            config,
            params: init.store,
        })
    }

    pub fn layout(&self) -> GroupLayout {
        GroupLayout::new(self.config.points, self.config.groups, self.config.channels).expect("validated config")
    }

    /// Backbone pyramid (after the channel transform) and direction maps.
    pub fn backbone<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, image: Var) -> Result<(Vec<Var>, Vec<Var>)> {
        let c = &self.config;
        let s = tape.shape(image).to_vec();
        if s != [3, c.input_h, c.input_w] {
            return Err(Error::Config(format!(
                "image tensor {s:?} does not match configured input [3, {}, {}]",
                c.input_h, c.input_w
            )));
        }
        let conv = |tape: &mut Tape<T>, x: Var, name: &str, stride: usize, pad: usize| -> Result<Var> {
            let y = tape.conv2d(
                x,
                p.get(&format!("{name}.w"))?,
                Some(p.get(&format!("{name}.b"))?),
                stride,
                pad,
            )?;
            Ok(y)
        };
        let mut x = conv(tape, image, "backbone.stem0", 2, 1)?;
        x = tape.relu(x);
        x = conv(tape, x, "backbone.stem1", 2, 1)?;
        x = tape.relu(x);
        let mut levels = Vec::with_capacity(3);
        for s in STRIDES {
            let d = conv(tape, x, &format!("backbone.s{s}.down"), 2, 1)?;
            let d = tape.relu(d);
            let y = conv(tape, d, &format!("backbone.s{s}.conv"), 1, 1)?;
            let y = tape.relu(y);
            x = tape.add(d, y)?;
            levels.push(x);
        }
        let mut pyramid = Vec::with_capacity(3);
        for (s, &f) in STRIDES.iter().zip(&levels) {
            pyramid.push(conv(tape, f, &format!("neck.s{s}"), 1, 0)?);
        }
        let mut directions = Vec::with_capacity(3);
        for (s, &f) in STRIDES.iter().zip(&pyramid) {
            let d = conv(tape, f, &format!("direction.s{s}"), 1, 1)?;
            directions.push(tape.sigmoid(d));
        }
        Ok((pyramid, directions))
    }

    /// Predicted coarsest-level direction map in degrees.
    pub fn direction_map<T: Real>(&self, tape: &Tape<T>, coarse: Var) -> Result<DirectionMap> {
        let s = tape.shape(coarse);
        let (h, w) = (s[1], s[2]);
        let angles = tape
            .value(coarse)
            .data()
            .iter()
            .map(|v| wrap_angle(v.as_f64() * 180.0))
            .collect();
        DirectionMap::new(h, w, angles, self.config.input_w as f64, self.config.input_h as f64)
    }

    pub fn proposals_from(&self, map: &DirectionMap) -> Result<ProposalSet> {
        let c = &self.config;
        let m = if (map.rows, map.cols) == (c.grid_rows, c.grid_cols) {
            map.clone()
        } else {
            resize_direction_map(map, c.grid_rows, c.grid_cols)?
        };
        Ok(construct_proposals(&m, c.rows, c.input_h as f64, c.input_w as f64))
    }

    /// Straight anchors matched in count to the proposal grid.
    pub fn anchors(&self) -> ProposalSet {
        let c = &self.config;
        let (h, w) = (c.input_h as f64, c.input_w as f64);
        let l = c.proposals();
        if l == 40 {
            return default_anchors(c.rows, h, w);
        }
        let angles = &ANCHOR_ANGLES;
        let positions = l.div_ceil(angles.len());
        let mut set = fixed_line_anchors(positions, angles, c.rows, h, w);
        set.proposals.truncate(l);
        set
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        image: Var,
        source: ProposalSource<'_>,
    ) -> Result<Forward> {
        let c = &self.config;
        let (pyramid, directions) = self.backbone(tape, p, image)?;
        let macs0 = tape.macs();
        let proposals = match source {
            ProposalSource::Fixed(set) => set.clone(),
            ProposalSource::Oracle(map) => self.proposals_from(map)?,
            ProposalSource::Config => match c.proposal_init {
                ProposalInit::Anchor => self.anchors(),
                ProposalInit::Direction => self.proposals_from(&self.direction_map(tape, directions[2])?)?,
            },
        };
        let lanes = proposals.lanes();
        let l = lanes.len();
        let sketch_vals: Vec<f64> = lanes.iter().flat_map(|l| l.xs.iter().copied()).collect();
        let sketch = tape.constant(Array::from_f64(&[l, c.rows], &sketch_vals)?);
        let raw = match c.sampling {
            SamplingMode::Adaptive => {
                let levels: Vec<(f64, Var)> = STRIDES.iter().map(|&s| s as f64).zip(pyramid.iter().copied()).collect();
                sample_proposal_features(tape, &levels, &lanes, p.get("sampler.z")?, Sampling::Adaptive)?
            }
            SamplingMode::SingleLevel => {
                let fused = top_down(tape, &pyramid)?;
                let z = tape.constant(Array::zeros(&[c.points]));
                sample_proposal_features(tape, &[(STRIDES[0] as f64, fused)], &lanes, z, Sampling::SingleLevel(0))?
            }
        };
        let layout = self.layout();
        let proj: Vec<(Var, Var)> = (0..c.groups)
            .map(|g| Ok((p.get(&format!("proj.w{g}"))?, p.get(&format!("proj.b{g}"))?)))
            .collect::<Result<_>>()?;
        let features = project_features(tape, raw, &layout, &proj)?;
        let (x, lsam) = if c.lsam {
            let lp = LsamParams {
                ln1_gain: p.get("lsam.ln1.gain")?,
                ln1_bias: p.get("lsam.ln1.bias")?,
                query: (0..c.groups)
                    .map(|g| p.get(&format!("lsam.q{g}")))
                    .collect::<Result<_>>()?,
                key: (0..c.groups)
                    .map(|g| p.get(&format!("lsam.k{g}")))
                    .collect::<Result<_>>()?,
                value: (0..c.groups)
                    .map(|g| p.get(&format!("lsam.v{g}")))
                    .collect::<Result<_>>()?,
                ln2_gain: p.get("lsam.ln2.gain")?,
                ln2_bias: p.get("lsam.ln2.bias")?,
                ffn: mlp(p, "lsam.ffn")?,
            };
            let out = lsam_forward(tape, features, &lp)?;
            (out.features, Some(out))
        } else {
            (features, None)
        };
        let (logits, scores) = classify(tape, x, &mlp(p, "cls")?)?;
        let reg = regress(tape, x, &mlp(p, "reg")?, sketch, c.input_h as f64, c.dx_scale)?;
        Ok(Forward {
            directions,
            proposals,
            sketch,
            features,
            lsam,
            logits,
            scores,
            reg,
            head_macs: tape.macs() - macs0,
        })
    }

    /// Refined lanes with scores, in proposal order.
    pub fn lanes<T: Real>(&self, tape: &Tape<T>, f: &Forward) -> Vec<Lane> {
        refined_lanes(tape, &f.reg, f.scores, self.config.input_h as f64)
    }

    /// Match refined lanes to ground truth and build every loss term.
    pub fn losses<T: Real>(
        &self,
        tape: &mut Tape<T>,
        f: &Forward,
        gts: &[Polyline],
    ) -> Result<(LossVars, MatchResult)> {
        let c = &self.config;
        let (h, w) = (c.input_h as f64, c.input_w as f64);
        let gt_lanes: Vec<Lane> = gts
            .iter()
            .map(|p| crate::geometry::lane_from_polyline(p, c.rows, h))
            .collect::<Result<_>>()?;
        // Predictions are dense along rows for matching; extent is learned separately.
        let dense: Vec<Lane> = self
            .lanes(tape, f)
            .into_iter()
            .map(|l| Lane {
                y_min: 0.0,
                y_max: h,
                ..l
            })
            .collect();
        let cost = build_cost(&dense, &gt_lanes, c.loss_radius)?;
        let matches = hungarian_match(&cost)?;
        let cls = focal_loss(tape, f.scores, &matches.labels, FOCAL_ALPHA, FOCAL_GAMMA)?;
        let reg = if matches.pairs.is_empty() {
            tape.scalar(0.0)
        } else {
            let mut terms = Vec::with_capacity(2 * matches.pairs.len());
            for &(i, m) in &matches.pairs {
                terms.push(liou_loss_row(tape, f.reg.xs, i, &gt_lanes[m], c.loss_radius)?);
                terms.push(endpoint_loss_row(tape, f.reg.ends, i, &gt_lanes[m])?);
            }
            let all = tape.concat(&terms, 0)?;
            let s = tape.sum(all);
            tape.scale(s, 1.0 / matches.pairs.len() as f64)
        };
        let mut dir_terms = Vec::with_capacity(f.directions.len());
        for &d in &f.directions {
            let s = tape.shape(d).to_vec();
            let map = encode_direction_gt(gts, s[1], s[2], s[1], c.tau, w, h)?;
            dir_terms.push(direction_loss(tape, d, &map)?);
        }
        let dir_all = tape.concat(&dir_terms, 0)?;
        let dir = tape.mean(dir_all);
        let attn = match &f.lsam {
            Some(out) => {
                let target = attention_targets(&matches, &f.proposals.lanes(), &gt_lanes, c.groups);
                attention_loss(tape, &out.logits, &target)?
            }
            None => tape.scalar(0.0),
        };
        let lw = c.loss_weights();
        let mut total = tape.scale(cls, lw.cls);
        for (v, wgt) in [(reg, lw.reg), (dir, lw.dir), (attn, lw.attn)] {
            if wgt != 0.0 {
                let t = tape.scale(v, wgt);
                total = tape.add(total, t)?;
            }
        }
        Ok((
            LossVars {
                cls,
                reg,
                dir,
                attn,
                total,
            },
            matches,
        ))
    }
}

fn logit(p: f32) -> f32 {
    (p / (1.0 - p)).ln()
}

fn mlp(p: &Bound, prefix: &str) -> Result<Mlp> {
    Ok(Mlp {
        w1: p.get(&format!("{prefix}.w1"))?,
        b1: p.get(&format!("{prefix}.b1"))?,
        w2: p.get(&format!("{prefix}.w2"))?,
        b2: p.get(&format!("{prefix}.b2"))?,
    })
}

/// Nearest-neighbour 2× upsampling of `[d, h, w]`.
fn upsample2<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (d, h, w) = (s[0], s[1], s[2]);
    let mut idx = Vec::with_capacity(d * 4 * h * w);
    for c in 0..d {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                idx.push((c * h + y / 2) * w + xx / 2);
            }
        }
    }
    let g = tape.gather(x, &idx)?;
    Ok(tape.reshape(g, &[d, 2 * h, 2 * w])?)
}

/// Top-down pyramid fusion ending at the finest level.
fn top_down<T: Real>(tape: &mut Tape<T>, pyramid: &[Var]) -> Result<Var> {
    let mut acc = pyramid[pyramid.len() - 1];
    for &f in pyramid[..pyramid.len() - 1].iter().rev() {
        let up = upsample2(tape, acc)?;
        acc = tape.add(f, up)?;
    }
    Ok(acc)
}
