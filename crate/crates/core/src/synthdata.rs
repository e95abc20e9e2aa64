//! Procedural road scenes with exactly known lane geometry, and the
//! JSON-lines dataset format.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{lane_from_polyline, row_y, Lane, Polyline, DEFAULT_ROWS};
use crate::image::RgbImage;

pub const MAX_ATTEMPTS: usize = 100;
/// Sentinel x for rows where a lane is absent.
pub const ABSENT: f64 = -2.0;
pub const ANNOTATIONS: &str = "annotations.jsonl";
pub const IMAGES: &str = "images";

/// Seed offsets that keep train / val / test scenes disjoint.
pub const TRAIN_SEED_BASE: u64 = 0;
pub const VAL_SEED_BASE: u64 = 1 << 40;
pub const TEST_SEED_BASE: u64 = 2 << 40;

/// Ranges the generator samples from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    /// Annotation rows per lane.
    pub rows: usize,
    pub min_lanes: usize,
    pub max_lanes: usize,
    /// Largest sideways bend at the horizon, as a fraction of image width.
    pub curvature_max: f64,
    /// Painted width at the bottom row, pixels.
    pub mark_width: (f64, f64),
    /// Horizon row as a fraction of height.
    pub horizon: (f64, f64),
    /// Lane spacing at the bottom row as a fraction of width.
    pub spacing: (f64, f64),
    pub min_separation: f64,
    /// Shortest accepted lane, in annotation rows.
    pub min_visible_rows: usize,
    pub dashed_prob: f64,
    pub dim_prob: f64,
    pub night_prob: f64,
    /// Per-pixel noise standard deviation range (8-bit levels).
    pub noise: (f64, f64),
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 160,
            height: 64,
            rows: DEFAULT_ROWS,
            min_lanes: 1,
            max_lanes: 5,
            curvature_max: 0.25,
            mark_width: (2.0, 3.5),
            horizon: (0.3, 0.5),
            spacing: (0.3, 0.5),
            min_separation: 6.0,
            min_visible_rows: 8,
            dashed_prob: 0.3,
            dim_prob: 0.15,
            night_prob: 0.15,
            noise: (2.0, 6.0),
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.width >= 8
            && self.height >= 8
            && self.rows >= 2
            && 1 <= self.min_lanes
            && self.min_lanes <= self.max_lanes
            && self.curvature_max >= 0.0
            && self.mark_width.0 > 0.0
            && self.mark_width.0 <= self.mark_width.1
            && 0.0 < self.horizon.0
            && self.horizon.0 <= self.horizon.1
            && self.horizon.1 < 0.9
            && 0.0 < self.spacing.0
            && self.spacing.0 <= self.spacing.1
            && self.noise.0 >= 0.0
            && self.noise.0 <= self.noise.1;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid scene ranges: {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Tag {
    Straight,
    Curve,
    Dim,
    Night,
}

impl Tag {
    pub fn as_str(self) -> &'static str {
        match self {
            Tag::Straight => "straight",
            Tag::Curve => "curve",
            Tag::Dim => "dim",
            Tag::Night => "night",
        }
    }

    pub fn parse(s: &str) -> Option<Tag> {
        [Tag::Straight, Tag::Curve, Tag::Dim, Tag::Night]
            .into_iter()
            .find(|t| t.as_str() == s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedScene {
    pub image: RgbImage,
    pub gts: Vec<Polyline>,
    pub seed: u64,
    pub tags: Vec<Tag>,
}

impl AnnotatedScene {
    /// Ground truth resampled at `n` canonical rows.
    pub fn lanes(&self, n: usize) -> Result<Vec<Lane>> {
        let h = self.image.height as f64;
        self.gts.iter().map(|p| lane_from_polyline(p, n, h)).collect()
    }
}

/// Shared road shape: lanes converge at a vanishing point and bend together.
struct Road {
    vx: f64,
    vy: f64,
    bottom: f64,
    c2: f64,
    c3: f64,
}

impl Road {
    /// Depth parameter: 0 at the horizon, 1 at the bottom row.
    fn t(&self, y: f64) -> f64 {
        (y - self.vy) / (self.bottom - self.vy)
    }

    fn x(&self, xb: f64, y: f64) -> f64 {
        let t = self.t(y);
        let s = 1.0 - t;
        self.vx + (xb - self.vx) * t + self.c2 * s * s + self.c3 * s * s * s
    }

    fn slope(&self, xb: f64, y: f64) -> f64 {
        let s = 1.0 - self.t(y);
        let ds = -1.0 / (self.bottom - self.vy);
        (xb - self.vx) / (self.bottom - self.vy) + (2.0 * self.c2 * s + 3.0 * self.c3 * s * s) * ds
    }
}

struct LanePaint {
    xb: f64,
    y_top: f64,
    width: f64,
    color: [f64; 3],
    dash: Option<(f64, f64)>,
}

/// Deterministic scene for a seed.
pub fn generate_scene(seed: u64, spec: &SceneSpec) -> Result<AnnotatedScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (spec.width as f64, spec.height as f64);
    let mut last = String::new();
    for _ in 0..MAX_ATTEMPTS {
        let vy = h * rng.gen_range(spec.horizon.0..=spec.horizon.1);
        let vx = w * rng.gen_range(0.35..0.65);
        let bend = w * spec.curvature_max * rng.gen_range(-1.0..=1.0f64);
        let split = rng.gen_range(0.3..=1.0f64);
        let road = Road {
            vx,
            vy,
            bottom: h,
            c2: bend * split,
            c3: bend * (1.0 - split),
        };
        let count = rng.gen_range(spec.min_lanes..=spec.max_lanes);
        let spacing = w * rng.gen_range(spec.spacing.0..=spec.spacing.1);
        let center = w * rng.gen_range(0.4..0.6);
        let first = center - spacing * (count as f64 - 1.0) / 2.0 + rng.gen_range(-0.5..0.5) * spacing;
        let mut paints = Vec::with_capacity(count);
        let mut gts = Vec::with_capacity(count);
        let mut failed = None;
        for k in 0..count {
            let xb = first + k as f64 * spacing;
            let y_top = vy + rng.gen_range(0.06..0.12) * (h - vy);
            let pts = visible_run(&road, xb, y_top, spec);
            if pts.len() < spec.min_visible_rows {
                failed = Some(format!("lane {k} has {} visible rows", pts.len()));
                break;
            }
            gts.push(Polyline::new(pts)?);
            let yellow = rng.gen_bool(0.2);
            let base = rng.gen_range(200.0..250.0);
            paints.push(LanePaint {
                xb,
                y_top,
                width: rng.gen_range(spec.mark_width.0..=spec.mark_width.1),
                color: if yellow {
                    [base, base * 0.85, 70.0]
                } else {
                    [base, base, base]
                },
                dash: rng
                    .gen_bool(spec.dashed_prob)
                    .then(|| (rng.gen_range(0.0..1.0), rng.gen_range(0.45..0.65))),
            });
        }
        if let Some(msg) = failed {
            last = msg;
            continue;
        }
        let xs_bottom: Vec<f64> = paints.iter().map(|p| p.xb).collect();
        if xs_bottom.windows(2).any(|p| p[1] - p[0] < spec.min_separation) {
            last = "lanes too close at the bottom row".into();
            continue;
        }
        let mut tags = vec![if bend.abs() < 0.03 * w {
            Tag::Straight
        } else {
            Tag::Curve
        }];
        let lighting = rng.gen_range(0.0..1.0);
        let light = if lighting < spec.night_prob {
            tags.push(Tag::Night);
            Lighting::Night
        } else if lighting < spec.night_prob + spec.dim_prob {
            tags.push(Tag::Dim);
            Lighting::Dim
        } else {
            Lighting::Day
        };
        let image = render(&road, &paints, light, spec, &mut rng);
        return Ok(AnnotatedScene { image, gts, seed, tags });
    }
    Err(Error::Generation {
        attempts: MAX_ATTEMPTS,
        msg: last,
    })
}

/// Annotation rows from `y_top` downwards while the lane stays in the image.
fn visible_run(road: &Road, xb: f64, y_top: f64, spec: &SceneSpec) -> Vec<(f64, f64)> {
    let (w, h, n) = (spec.width as f64, spec.height as f64, spec.rows);
    let mut pts = Vec::new();
    for i in 0..n {
        let y = row_y(i, n, h);
        if y < y_top {
            continue;
        }
        let x = road.x(xb, y);
        if (0.0..w).contains(&x) {
            pts.push((x, y));
        } else if !pts.is_empty() {
            break;
        }
    }
    pts
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Lighting {
    Day,
    Dim,
    Night,
}

fn render(road: &Road, paints: &[LanePaint], light: Lighting, spec: &SceneSpec, rng: &mut ChaCha8Rng) -> RgbImage {
    let (wi, hi) = (spec.width, spec.height);
    // Road and markings scale separately: markings stay reflective at night.
    let (gain, lane_gain) = match light {
        Lighting::Day => {
            let g = rng.gen_range(0.9..1.1);
            (g, g)
        }
        Lighting::Dim => (rng.gen_range(0.5..0.65), rng.gen_range(0.55..0.7)),
        Lighting::Night => (rng.gen_range(0.22..0.32), rng.gen_range(0.5..0.65)),
    };
    let asphalt = rng.gen_range(85.0..120.0);
    let sky = [
        rng.gen_range(150.0..200.0),
        rng.gen_range(170.0..215.0),
        rng.gen_range(190.0..235.0),
    ];
    let noise_sd = rng.gen_range(spec.noise.0..=spec.noise.1) * if light == Lighting::Night { 1.5 } else { 1.0 };
    // Low-frequency blotches as a few random plane waves.
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.gen_range(0.02..0.15),
                rng.gen_range(0.02..0.3),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(2.0..7.0),
            )
        })
        .collect();
    let glow = light == Lighting::Night;
    let mut img = RgbImage::new(wi, hi);
    for r in 0..hi {
        let y = r as f64 + 0.5;
        let t = road.t(y);
        // Coverage and color of the painted marks on this row.
        let marks: Vec<(f64, f64, f64, [f64; 3])> = paints
            .iter()
            .filter(|p| y >= p.y_top && t > 0.0)
            .filter(|p| match p.dash {
                Some((phase, duty)) => ((1.0 / t) * 0.9 + phase).fract() < duty,
                None => true,
            })
            .map(|p| {
                let x = road.x(p.xb, y);
                let cos = 1.0 / (1.0 + road.slope(p.xb, y).powi(2)).sqrt();
                let half = (p.width * t).max(0.7) / 2.0;
                (x, cos, half, p.color)
            })
            .collect();
        for c in 0..wi {
            let x = c as f64 + 0.5;
            let mut px = if t <= 0.0 {
                let f = 1.0 - y / road.vy * 0.25;
                [sky[0] * f, sky[1] * f, sky[2] * f]
            } else {
                let tex: f64 = waves
                    .iter()
                    .map(|&(fx, fy, ph, a)| a * (fx * x + fy * y / t.max(0.05) + ph).sin())
                    .sum();
                let v = asphalt * (0.85 + 0.15 * t) + tex;
                [v, v, v * 1.02]
            };
            let boost = if glow && t > 0.0 {
                let dx = (x - wi as f64 / 2.0) / wi as f64;
                1.0 + 1.5 * t * t * (-dx * dx * 8.0).exp()
            } else {
                1.0
            };
            for v in px.iter_mut() {
                *v *= gain * boost;
            }
            for &(mx, cos, half, color) in &marks {
                let d = (x - mx).abs() * cos;
                let alpha = (half + 0.5 - d).clamp(0.0, 1.0);
                if alpha > 0.0 {
                    for k in 0..3 {
                        px[k] += alpha * ((color[k] * lane_gain * boost).min(255.0) - px[k]);
                    }
                }
            }
            let n: f64 = noise_sd * standard_normal(rng);
            let out = px.map(|v| (v + n).round().clamp(0.0, 255.0) as u8);
            img.set(c, r, out);
        }
    }
    img
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; one draw per call keeps the stream simple.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// One JSON-lines record. `lanes[k][r]` is the x of lane `k` at
/// `h_samples[r]`, or −2 where the lane is absent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub raw_file: String,
    pub lanes: Vec<Vec<f64>>,
    pub h_samples: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tags: Vec<Tag>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<usize>,
}

impl Record {
    /// Lanes sampled on canonical rows of an image of height `height`.
    pub fn from_lanes(raw_file: String, lanes: &[Lane], height: f64) -> Self {
        let n = lanes.first().map_or(DEFAULT_ROWS, Lane::rows);
        let h_samples: Vec<f64> = (0..n).map(|i| row_y(i, n, height)).collect();
        let scores = lanes.iter().map(|l| l.score).collect();
        Record {
            raw_file,
            lanes: lanes
                .iter()
                .map(|l| {
                    (0..l.rows())
                        .map(|i| if l.is_row_valid(i) { l.xs[i] } else { ABSENT })
                        .collect()
                })
                .collect(),
            h_samples,
            seed: None,
            tags: Vec::new(),
            scores: Some(scores),
            width: None,
            height: None,
        }
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.h_samples.is_empty() {
            return Err("empty h_samples".into());
        }
        if self.h_samples.windows(2).any(|w| w[0] >= w[1]) {
            return Err("h_samples must be strictly increasing".into());
        }
        for (k, lane) in self.lanes.iter().enumerate() {
            if lane.len() != self.h_samples.len() {
                return Err(format!(
                    "lane {k} has {} entries for {} h_samples",
                    lane.len(),
                    self.h_samples.len()
                ));
            }
        }
        if let Some(s) = &self.scores {
            if s.len() != self.lanes.len() {
                return Err(format!("{} scores for {} lanes", s.len(), self.lanes.len()));
            }
        }
        Ok(())
    }

    /// Present points of lane `k`.
    pub fn points(&self, k: usize) -> Vec<(f64, f64)> {
        self.lanes[k]
            .iter()
            .zip(&self.h_samples)
            .filter(|(x, _)| **x != ABSENT)
            .map(|(&x, &y)| (x, y))
            .collect()
    }

    pub fn polylines(&self) -> Result<Vec<Polyline>> {
        (0..self.lanes.len())
            .filter(|&k| !self.points(k).is_empty())
            .map(|k| Polyline::new(self.points(k)))
            .collect()
    }

    /// Lanes resampled at `n` canonical rows; scores attached when present.
    pub fn to_lanes(&self, n: usize, height: f64) -> Result<Vec<Lane>> {
        let mut out = Vec::new();
        for k in 0..self.lanes.len() {
            let pts = self.points(k);
            if pts.is_empty() {
                continue;
            }
            let lane = if pts.len() == 1 {
                // A single point becomes a one-row lane at its nearest canonical row.
                let (x, y) = pts[0];
                Lane::new(vec![x; n], y.clamp(0.0, height), y.clamp(0.0, height), height)?
            } else {
                lane_from_polyline(&Polyline::new(pts)?, n, height)?
            };
            let score = self.scores.as_ref().map_or(1.0, |s| s[k]);
            out.push(lane.with_score(score));
        }
        Ok(out)
    }
}

fn scene_record(scene: &AnnotatedScene, raw_file: String, spec_rows: usize) -> Record {
    let h = scene.image.height as f64;
    let h_samples: Vec<f64> = (0..spec_rows).map(|i| row_y(i, spec_rows, h)).collect();
    let lanes = scene
        .gts
        .iter()
        .map(|p| {
            let (y0, y1) = p.y_range();
            h_samples
                .iter()
                .map(|&y| {
                    if (y0..=y1).contains(&y) {
                        p.points().iter().find(|v| v.1 == y).map_or_else(|| p.x_at(y), |v| v.0)
                    } else {
                        ABSENT
                    }
                })
                .collect()
        })
        .collect();
    Record {
        raw_file,
        lanes,
        h_samples,
        seed: Some(scene.seed),
        tags: scene.tags.clone(),
        scores: None,
        width: Some(scene.image.width),
        height: Some(scene.image.height),
    }
}

/// Write images under `dir/images/` and one record per scene to
/// `dir/annotations.jsonl`.
pub fn write_dataset(scenes: &[AnnotatedScene], rows: usize, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join(IMAGES))?;
    let mut out = BufWriter::new(fs::File::create(dir.join(ANNOTATIONS))?);
    for (i, scene) in scenes.iter().enumerate() {
        let raw_file = format!("{IMAGES}/{i:06}.png");
        scene.image.save_png(&dir.join(&raw_file))?;
        serde_json::to_writer(&mut out, &scene_record(scene, raw_file, rows))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Generate `count` scenes with seeds `base_seed..` and write them.
pub fn generate_dataset(count: usize, base_seed: u64, spec: &SceneSpec, dir: &Path) -> Result<()> {
    let scenes = (0..count as u64)
        .map(|i| generate_scene(base_seed + i, spec))
        .collect::<Result<Vec<_>>>()?;
    write_dataset(&scenes, spec.rows, dir)
}

/// Parse a JSON-lines annotation or prediction file.
pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let file = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Record {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let rec: Record = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        rec.validate().map_err(err)?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_records(records: &[Record], path: &Path) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Read back a dataset written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<Vec<AnnotatedScene>> {
    let path = dir.join(ANNOTATIONS);
    let records = read_records(&path)?;
    records
        .into_iter()
        .enumerate()
        .map(|(i, rec)| {
            let image = RgbImage::load_png(&dir.join(&rec.raw_file))?;
            let gts = rec.polylines().map_err(|e| Error::Record {
                path: path.clone(),
                line: i + 1,
                msg: e.to_string(),
            })?;
            Ok(AnnotatedScene {
                image,
                gts,
                seed: rec.seed.unwrap_or(i as u64),
                tags: rec.tags,
            })
        })
        .collect()
}

/// Image paths of a dataset, in record order.
pub fn dataset_images(dir: &Path) -> Result<Vec<PathBuf>> {
    Ok(read_records(&dir.join(ANNOTATIONS))?
        .into_iter()
        .map(|r| dir.join(r.raw_file))
        .collect())
}

/// Distinct tags present in a scene list, sorted.
pub fn tag_set(scenes: &[AnnotatedScene]) -> BTreeSet<Tag> {
    scenes.iter().flat_map(|s| s.tags.iter().copied()).collect()
}
