use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use srlane::geometry::{mask_iou, rasterize_lane, Lane};
use srlane::metrics::*;
use srlane::synthdata::Tag;

const N: usize = 72;
const W: usize = 160;
const H: usize = 64;

fn vertical(x: f64) -> Lane {
    Lane::full(vec![x; N], H as f64).unwrap()
}

fn cfg() -> CulaneConfig {
    CulaneConfig::for_image(W, H)
}

/// Columns whose pixel centers lie within `width/2` of a vertical line.
fn columns(x: f64, width: f64) -> Vec<usize> {
    (0..W).filter(|&c| (c as f64 + 0.5 - x).abs() <= width / 2.0).collect()
}

fn column_iou(a: f64, b: f64, width: f64) -> f64 {
    let (ca, cb) = (columns(a, width), columns(b, width));
    let inter = ca.iter().filter(|c| cb.contains(c)).count();
    (inter as f64) / (ca.len() + cb.len() - inter) as f64
}

#[test]
fn golden_tp_fp_fn_fixture() {
    let cfg = CulaneConfig {
        lane_width: 10.0,
        ..cfg()
    };
    let gts = vec![vertical(40.0), vertical(110.0)];
    let preds = vec![vertical(42.5), vertical(117.0)];
    let iou_a = column_iou(40.0, 42.5, 10.0);
    let iou_b = column_iou(110.0, 117.0, 10.0);
    assert!(
        (iou_a - 0.6).abs() < 0.03 && (iou_b - 0.2).abs() < 0.03,
        "{iou_a} {iou_b}"
    );
    for (p, g, want) in [(&preds[0], &gts[0], iou_a), (&preds[1], &gts[1], iou_b)] {
        let got = mask_iou(&rasterize_lane(p, 10.0, H, W), &rasterize_lane(g, 10.0, H, W)).unwrap();
        assert_eq!(got, want);
    }
    let r = culane_f1(&[preds], &[gts], &cfg, None).unwrap();
    assert_eq!((r.tp(), r.fp(), r.fn_()), (1, 1, 1));
    assert!((r.f1() - 0.5).abs() < 1e-12);
}

#[test]
fn culane_examples() {
    let gts = vec![vec![vertical(30.0), vertical(80.0), vertical(130.0)]];
    let r = culane_f1(&gts, &gts, &cfg(), None).unwrap();
    assert_eq!((r.f1(), r.fp(), r.fn_()), (1.0, 0, 0));
    let r = culane_f1(&[vec![]], &gts, &cfg(), None).unwrap();
    assert_eq!((r.f1(), r.fn_()), (0.0, 3));
    assert!(culane_f1(&[vec![], vec![]], &gts, &cfg(), None).is_err());
    assert!((cfg().lane_width - 30.0 * 160.0 / 1640.0).abs() < 1e-12);
}

#[test]
fn tusimple_examples() {
    let c = TusimpleConfig::default();
    let gts = vec![vec![vertical(50.0), vertical(100.0)]];
    let r = tusimple_accuracy(&gts, &gts, &c, None).unwrap();
    assert_eq!(r.accuracy(), Some(1.0));
    assert_eq!((r.fp(), r.fn_()), (0, 0));

    let r = tusimple_accuracy(&[vec![]], &gts, &c, None).unwrap();
    assert_eq!(r.accuracy(), Some(0.0));
    assert_eq!(r.total.fn_rate, Some(1.0));

    // Off by 25 px on every other row.
    let gt = vec![vec![vertical(50.0)]];
    let xs: Vec<f64> = (0..N).map(|i| if i % 2 == 0 { 75.0 } else { 50.0 }).collect();
    let pred = vec![vec![Lane::full(xs, H as f64).unwrap()]];
    let r = tusimple_accuracy(&pred, &gt, &c, None).unwrap();
    assert!((r.accuracy().unwrap() - 0.5).abs() < 1e-12);
    assert_eq!((r.tp(), r.fp(), r.fn_()), (0, 1, 1));

    let short = vec![vec![Lane::full(vec![50.0; 10], H as f64).unwrap()]];
    assert!(tusimple_accuracy(&short, &gt, &c, None).is_err());
}

#[test]
fn categories_split_counts() {
    let gts = vec![vec![vertical(40.0)], vec![vertical(90.0)]];
    let preds = vec![vec![vertical(40.0)], vec![]];
    let tags = vec![vec![Tag::Straight], vec![Tag::Curve, Tag::Night]];
    let r = culane_f1(&preds, &gts, &cfg(), Some(&tags)).unwrap();
    assert_eq!(r.categories["straight"].tp, 1);
    assert_eq!(r.categories["curve"].fn_, 1);
    assert_eq!(r.categories["night"].f1, 0.0);
    let table = r.table();
    assert!(table.lines().count() == 5 && table.contains("night"));
    let json: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
    assert_eq!(json["total"]["fn"], 1);
}

/// Best matching by exhaustive enumeration: most admissible pairs, then
/// largest score sum.
fn brute_matching(score: &[Vec<f64>], ok: &[Vec<bool>]) -> (usize, f64) {
    fn rec(
        s: &[Vec<f64>],
        ok: &[Vec<bool>],
        i: usize,
        used: &mut Vec<bool>,
        acc: (usize, f64),
        best: &mut (usize, f64),
    ) {
        if i == s.len() {
            if acc.0 > best.0 || (acc.0 == best.0 && acc.1 > best.1) {
                *best = acc;
            }
            return;
        }
        rec(s, ok, i + 1, used, acc, best);
        for j in 0..used.len() {
            if !used[j] && ok[i][j] {
                used[j] = true;
                rec(s, ok, i + 1, used, (acc.0 + 1, acc.1 + s[i][j]), best);
                used[j] = false;
            }
        }
    }
    let cols = score.first().map_or(0, Vec::len);
    let mut best = (0, 0.0);
    rec(score, ok, 0, &mut vec![false; cols], (0, 0.0), &mut best);
    best
}

#[test]
fn max_matching_matches_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for trial in 0..500 {
        let (r, c) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
        let score: Vec<Vec<f64>> = (0..r)
            .map(|_| (0..c).map(|_| rng.gen_range(0.0..1.0)).collect())
            .collect();
        let ok: Vec<Vec<bool>> = score
            .iter()
            .map(|row| row.iter().map(|&v| v >= 0.5).collect())
            .collect();
        let got = max_matching(&score, &ok);
        let (count, sum) = brute_matching(&score, &ok);
        assert_eq!(got.len(), count, "trial {trial}");
        let s: f64 = got.iter().map(|&(i, j)| score[i][j]).sum();
        assert!((s - sum).abs() < 1e-9, "trial {trial}");
    }
}

fn scene(xs: &[f64]) -> Vec<Lane> {
    xs.iter().map(|&x| vertical(x)).collect()
}

proptest! {
    #[test]
    fn metrics_ignore_prediction_order(
        gx in prop::collection::vec(5.0..155.0f64, 0..5),
        px in prop::collection::vec(5.0..155.0f64, 0..6),
        seed in 0u64..1000,
    ) {
        let (gts, preds) = (scene(&gx), scene(&px));
        let mut shuffled = preds.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, rng.gen_range(0..=i));
        }
        let a = culane_f1(std::slice::from_ref(&preds), std::slice::from_ref(&gts), &cfg(), None).unwrap();
        let b = culane_f1(&[shuffled.clone()], std::slice::from_ref(&gts), &cfg(), None).unwrap();
        prop_assert_eq!(a.total, b.total);
        let c = TusimpleConfig::default();
        let a = tusimple_accuracy(&[preds], std::slice::from_ref(&gts), &c, None).unwrap();
        let b = tusimple_accuracy(&[shuffled], &[gts], &c, None).unwrap();
        prop_assert_eq!(a.total, b.total);
    }

    #[test]
    fn adding_a_matching_prediction_never_lowers_f1(
        gx in prop::collection::vec(5.0..155.0f64, 1..5),
        px in prop::collection::vec(5.0..155.0f64, 0..5),
    ) {
        let (gts, preds) = (scene(&gx), scene(&px));
        let before = culane_f1(std::slice::from_ref(&preds), std::slice::from_ref(&gts), &cfg(), None).unwrap();
        // Append each ground truth in turn as an extra prediction.
        let mut with = preds.clone();
        for g in &gts {
            with.push(g.clone());
            let after = culane_f1(&[with.clone()], std::slice::from_ref(&gts), &cfg(), None).unwrap();
            if after.tp() > before.tp() {
                prop_assert!(after.f1() >= before.f1() - 1e-12);
            }
            with.pop();
        }
    }
}
