use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use srlane::geometry::{lane_from_polyline, line_iou, Lane, Polyline};
use srlane::image::RgbImage;
use srlane::pipeline::checkpoint::{load_checkpoint, save_checkpoint};
use srlane::pipeline::infer::{draw_lanes, infer, nms, predict_all, score_color, NMS_RADIUS};
use srlane::pipeline::stats::{count_checkpoint, count_parameters, head_macs, measured_head_macs};
use srlane::pipeline::train::{train, TrainOptions, LOG_FILE};
use srlane::pipeline::*;
use srlane::sketch::encode_direction_gt;
use srlane::synthdata::{generate_scene, SceneSpec};
use srlane_numerics::gradcheck::{grad_check, GradCheckOptions};
use srlane_numerics::{Array, NumericsError, Tape};

fn small() -> ModelConfig {
    ModelConfig {
        stem_width: 4,
        widths: [4, 6, 8],
        channels: 24,
        feat_dim: 8,
        points: 12,
        cls_hidden: 8,
        reg_hidden: 8,
        ..ModelConfig::default()
    }
}

#[test]
fn backbone_shapes_and_zero_image_direction() {
    let model = Model::new(ModelConfig::default()).unwrap();
    let mut t = Tape::<f32>::new();
    let p = model.params.bind(&mut t);
    let x = t.constant(Array::zeros(&[3, 64, 160]));
    let (pyr, dirs) = model.backbone(&mut t, &p, x).unwrap();
    for (k, s) in [8, 16, 32].into_iter().enumerate() {
        assert_eq!(t.shape(pyr[k]), &[64, 64 / s, 160 / s]);
        assert_eq!(t.shape(dirs[k]), &[1, 64 / s, 160 / s]);
    }
    let map = model.direction_map(&t, dirs[2]).unwrap();
    assert!(map.angles.iter().all(|&a| a == 90.0));

    let bad = t.constant(Array::zeros(&[3, 32, 160]));
    assert!(model.backbone(&mut t, &p, bad).is_err());
}

fn to_numerics(e: srlane::Error) -> NumericsError {
    NumericsError::Invalid {
        op: "pipeline",
        msg: e.to_string(),
    }
}

#[test]
fn direction_loss_gradient_wrt_backbone() {
    let cfg = small();
    let model = Model::new(cfg.clone()).unwrap();
    let scene = generate_scene(3, &SceneSpec::default()).unwrap();
    let image: Array<f64> = scene.image.to_tensor();
    let names = model.params.names.clone();
    let picked: Vec<usize> = ["backbone.s32.conv.w", "neck.s16.w", "direction.s8.w", "direction.s32.b"]
        .iter()
        .map(|n| model.params.index(n).unwrap())
        .collect();
    let points: Vec<Array<f64>> = picked.iter().map(|&i| model.params.values[i].cast()).collect();
    let gts = scene.gts.clone();
    let f = |t: &mut Tape<f64>, vars: &[srlane_numerics::Var]| -> srlane_numerics::Result<srlane_numerics::Var> {
        let mut b = model.params.bind(t);
        for (k, &i) in picked.iter().enumerate() {
            b.vars[i] = vars[k];
        }
        let x = t.constant(image.clone());
        let (_, dirs) = model.backbone(t, &b, x).map_err(to_numerics)?;
        let mut terms = Vec::new();
        for d in dirs {
            let s = t.shape(d).to_vec();
            let map = encode_direction_gt(&gts, s[1], s[2], s[1], cfg.tau, 160.0, 64.0).map_err(to_numerics)?;
            terms.push(srlane::assign::direction_loss(t, d, &map).map_err(to_numerics)?);
        }
        let all = t.concat(&terms, 0)?;
        Ok(t.sum(all))
    };
    let opts = GradCheckOptions {
        max_coords: Some(16),
        ..Default::default()
    };
    let r = grad_check(f, &points, &opts).unwrap();
    assert!(r.passed(), "{r:?} ({names:?})");
}

#[test]
fn end_to_end_gradient_wrt_scale_embedding() {
    let cfg = small();
    let model = Model::new(cfg).unwrap();
    let scene = generate_scene(5, &SceneSpec::default()).unwrap();
    let image: Array<f64> = scene.image.to_tensor();
    let zi = model.params.index("sampler.z").unwrap();
    // Away from integer levels, where the Gaussian weights are smooth anyway.
    let z0: Vec<f64> = (0..model.config.points).map(|k| 3.3 + 0.05 * k as f64).collect();
    let points = vec![Array::from_f64(&[z0.len()], &z0).unwrap()];
    let f = |t: &mut Tape<f64>, vars: &[srlane_numerics::Var]| -> srlane_numerics::Result<srlane_numerics::Var> {
        let mut b = model.params.bind(t);
        b.vars[zi] = vars[0];
        let x = t.constant(image.clone());
        let fw = model.forward(t, &b, x, ProposalSource::Config).map_err(to_numerics)?;
        let (l, _) = model.losses(t, &fw, &scene.gts).map_err(to_numerics)?;
        Ok(l.total)
    };
    let r = grad_check(f, &points, &GradCheckOptions::default()).unwrap();
    assert!(r.passed(), "{r:?}");
}

#[test]
fn inference_contract_and_determinism() {
    let model = Model::new(ModelConfig {
        score_thr: 0.6,
        ..ModelConfig::default()
    })
    .unwrap();
    let scene = generate_scene(11, &SceneSpec::default()).unwrap();
    let a = infer(&model, &scene.image).unwrap();
    let b = infer(&model, &scene.image).unwrap();
    assert_eq!(a, b);
    // Fresh weights start with a low foreground prior.
    assert!(a.is_empty());
    let all = predict_all(&model, &scene.image).unwrap();
    assert_eq!(all.len(), 40);
    for l in &all {
        assert_eq!(l.rows(), 72);
        assert!(0.0 <= l.y_min && l.y_min <= l.y_max && l.y_max <= 64.0);
        assert!((0.0..=1.0).contains(&l.score));
    }
    let wrong = RgbImage::new(80, 32);
    assert!(infer(&model, &wrong).is_err());
}

#[test]
fn oracle_direction_covers_fixture_lanes() {
    let model = Model::new(ModelConfig::default()).unwrap();
    let c = &model.config;
    // Straight lanes through pairs of 4×10 cell centers (8 + 16k, 8 + 16r).
    let gts = vec![
        Polyline::new(vec![(40.0, 24.0), (8.0, 56.0)]).unwrap(),
        Polyline::new(vec![(72.0, 8.0), (72.0, 64.0)]).unwrap(),
        Polyline::new(vec![(104.0, 24.0), (152.0, 56.0)]).unwrap(),
    ];
    let map = encode_direction_gt(&gts, c.grid_rows, c.grid_cols, c.grid_rows, c.tau, 160.0, 64.0).unwrap();
    let image = RgbImage::new(160, 64);
    let mut t = Tape::<f32>::new();
    let p = model.params.bind(&mut t);
    let x = t.constant(image.to_tensor());
    let f = model.forward(&mut t, &p, x, ProposalSource::Oracle(&map)).unwrap();
    let props = f.proposals.lanes();
    assert_eq!(props.len(), 40);
    for gt in &gts {
        let gt = lane_from_polyline(gt, c.rows, 64.0).unwrap();
        let best = props.iter().map(|p| line_iou(p, &gt, 7.5).unwrap()).fold(0.0, f64::max);
        assert!(best >= 0.5, "best {best}");
    }
}

fn lane(x: f64, score: f64) -> Lane {
    Lane::full(vec![x; 72], 64.0).unwrap().with_score(score)
}

/// Greedy suppression recomputed from the definition.
fn nms_oracle(lanes: &[Lane], thr: f64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..lanes.len()).collect();
    idx.sort_by(|&a, &b| lanes[b].score.partial_cmp(&lanes[a].score).unwrap().then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in idx {
        if kept
            .iter()
            .all(|&k| line_iou(&lanes[i], &lanes[k], NMS_RADIUS).unwrap() < thr)
        {
            kept.push(i);
        }
    }
    kept
}

#[test]
fn nms_examples_and_oracle() {
    let dup = vec![lane(50.0, 0.9), lane(50.0, 0.8)];
    assert_eq!(nms(&dup, 0.5).unwrap(), vec![dup[0].clone()]);
    let apart = vec![lane(20.0, 0.5), lane(80.0, 0.9), lane(140.0, 0.7)];
    assert_eq!(nms(&apart, 0.5).unwrap().len(), 3);

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..300 {
        let k = rng.gen_range(0..=6);
        let lanes: Vec<Lane> = (0..k)
            .map(|_| lane(rng.gen_range(40.0..80.0), (rng.gen_range(0..5) as f64) / 4.0))
            .collect();
        let got = nms(&lanes, 0.5).unwrap();
        let want: Vec<Lane> = nms_oracle(&lanes, 0.5).into_iter().map(|i| lanes[i].clone()).collect();
        assert_eq!(got, want);
    }
}

#[test]
fn overlay_examples() {
    let mut img = RgbImage::new(40, 16);
    for y in 0..16 {
        for x in 0..40 {
            img.set(x, y, [(x * 6) as u8, (y * 15) as u8, 40]);
        }
    }
    assert_eq!(draw_lanes(&img, &[]), img);
    let out = draw_lanes(&img, &[Lane::full(vec![12.5; 9], 16.0).unwrap().with_score(1.0)]);
    for y in 0..16 {
        assert_eq!(out.get(12, y), score_color(1.0));
    }
    assert_eq!(out.get(13, 5), img.get(13, 5));
    assert_eq!(score_color(0.0), [255, 0, 0]);
    assert_eq!(score_color(0.5), [255, 255, 0]);
}

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

#[test]
fn overlay_matches_golden_image() {
    let scene = generate_scene(42, &SceneSpec::default()).unwrap();
    let lanes: Vec<Lane> = scene
        .lanes(72)
        .unwrap()
        .into_iter()
        .enumerate()
        .map(|(i, l)| l.with_score(0.3 + 0.2 * i as f64))
        .collect();
    let out = draw_lanes(&scene.image, &lanes);
    let golden = RgbImage::load_png(&fixture("overlay_seed42.png")).unwrap();
    assert_eq!(out, golden);
}

#[test]
fn parameter_counts() {
    let base = ModelConfig::default();
    let model = Model::new(base.clone()).unwrap();
    let table = count_parameters(&model);
    assert_eq!(table.total, model.params.total());
    assert_eq!(table.modules.values().sum::<usize>(), table.total);

    // Projections q, k, v scale with c² (k, v with (c/G)² per group).
    let lsam_proj = |c: usize| {
        let m = Model::new(ModelConfig {
            channels: c,
            ..base.clone()
        })
        .unwrap();
        m.params
            .names
            .iter()
            .zip(&m.params.values)
            .filter(|(n, _)| n.starts_with("lsam.q") || n.starts_with("lsam.k") || n.starts_with("lsam.v"))
            .map(|(_, v)| v.len())
            .sum::<usize>()
    };
    assert_eq!(lsam_proj(384), 4 * lsam_proj(192));

    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &model, None).unwrap();
    assert_eq!(count_checkpoint(dir.path()).unwrap(), table);
}

#[test]
fn head_macs_match_measured_counts() {
    let base = ModelConfig::default();
    for l in [40, 80] {
        assert_eq!(head_macs(&base, l), measured_head_macs(&base, l).unwrap(), "L = {l}");
    }
    // Everything but the attention scores is linear in L.
    let no_lsam = ModelConfig {
        lsam: false,
        ..base.clone()
    };
    assert_eq!(2 * head_macs(&no_lsam, 40), head_macs(&no_lsam, 80));
    let quad = head_macs(&base, 80) - 2 * head_macs(&base, 40);
    assert_eq!(quad, 2 * (80 * 80 - 2 * 40 * 40) * base.channels as u64);
}

#[test]
fn config_toml_round_trip() {
    let c = ModelConfig {
        sampling: SamplingMode::SingleLevel,
        proposal_init: ProposalInit::Anchor,
        score_thr: 0.35,
        ..ModelConfig::default()
    };
    let text = c.to_toml().unwrap();
    assert_eq!(ModelConfig::from_toml(&text).unwrap(), c);
    assert!(ModelConfig::from_toml("channels = 100\n").is_err());
    assert!(ModelConfig::from_toml("no_such_key = 1\n").is_err());
    assert_eq!(ModelConfig::from_toml("").unwrap(), ModelConfig::default());
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let model = Model::new(ModelConfig {
        seed: 9,
        ..ModelConfig::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &model, None).unwrap();
    let (back, state) = load_checkpoint(dir.path()).unwrap();
    assert_eq!(back, model);
    assert!(state.is_none() || state.unwrap().step == 0);
    std::fs::write(dir.path().join("manifest.json"), "{").unwrap();
    assert!(load_checkpoint(dir.path()).is_err());
}

fn straight_scene() -> srlane::synthdata::AnnotatedScene {
    let spec = SceneSpec {
        curvature_max: 0.0,
        ..SceneSpec::default()
    };
    generate_scene(17, &spec).unwrap()
}

#[test]
fn single_scene_overfits() {
    let cfg = ModelConfig {
        iterations: 300,
        warmup_steps: 20,
        batch_size: 1,
        flip_aug: false,
        ..ModelConfig::default()
    };
    let out = train(&cfg, &[straight_scene()], None, &TrainOptions::default()).unwrap();
    assert_eq!(out.log.len(), 300);
    let first = out.log[9].total;
    let last = out.log[290..].iter().map(|r| r.total).sum::<f64>() / 10.0;
    assert!(last < 0.1 * first, "iter 10 {first}, final {last}");
}

#[test]
fn zero_attention_weight_reports_but_excludes_term() {
    let cfg = ModelConfig {
        iterations: 2,
        batch_size: 1,
        w_attn: 0.0,
        ..ModelConfig::default()
    };
    let out = train(&cfg, &[straight_scene()], None, &TrainOptions::default()).unwrap();
    for r in &out.log {
        assert!(r.attn > 0.0);
        let sum = 2.0 * r.cls + r.reg + 0.05 * r.dir;
        assert!((r.total - sum).abs() < 1e-4 * (1.0 + sum), "{r:?}");
    }
}

#[test]
fn resume_continues_step_counter() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = vec![straight_scene()];
    let cfg = ModelConfig {
        iterations: 3,
        batch_size: 1,
        checkpoint_every: 1,
        ..small()
    };
    let opts = TrainOptions {
        out_dir: Some(dir.path().to_path_buf()),
        ..TrainOptions::default()
    };
    train(&cfg, &scenes, None, &opts).unwrap();
    let more = ModelConfig {
        iterations: 5,
        ..cfg.clone()
    };
    let resumed = TrainOptions {
        resume: true,
        ..opts.clone()
    };
    let out = train(&more, &scenes, None, &resumed).unwrap();
    assert_eq!(out.log.iter().map(|r| r.iter).collect::<Vec<_>>(), vec![4, 5]);
    let text = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
    let iters: Vec<u64> = text
        .lines()
        .map(|l| {
            serde_json::from_str::<serde_json::Value>(l).unwrap()["iter"]
                .as_u64()
                .unwrap()
        })
        .collect();
    assert_eq!(iters, vec![1, 2, 3, 4, 5]);
    let (_, state) = load_checkpoint(&dir.path().join("last")).unwrap();
    assert_eq!(state.unwrap().step, 5);
}

#[test]
fn fixed_seed_training_is_reproducible() {
    let cfg = ModelConfig {
        iterations: 4,
        batch_size: 2,
        ..small()
    };
    let scenes: Vec<_> = (0..3)
        .map(|s| generate_scene(s, &SceneSpec::default()).unwrap())
        .collect();
    let a = train(&cfg, &scenes, None, &TrainOptions::default()).unwrap();
    let b = train(&cfg, &scenes, None, &TrainOptions::default()).unwrap();
    assert_eq!(a.model, b.model);
    let la: Vec<f64> = a.log.iter().map(|r| r.total).collect();
    let lb: Vec<f64> = b.log.iter().map(|r| r.total).collect();
    assert_eq!(la, lb);
}

#[test]
fn polyline_flip_is_an_involution() {
    let p = Polyline::new(vec![(10.0, 5.0), (30.0, 40.0), (45.0, 64.0)]).unwrap();
    assert_eq!(p.flipped(160.0).flipped(160.0), p);
    let l = lane_from_polyline(&p, 72, 64.0).unwrap();
    let f = lane_from_polyline(&p.flipped(160.0), 72, 64.0).unwrap();
    for (a, b) in l.xs.iter().zip(&f.xs) {
        assert!((a + b - 160.0).abs() < 1e-9);
    }
}
