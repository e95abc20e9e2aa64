use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use srlane::geometry::Lane;
use srlane::sampler::*;
use srlane_numerics::gradcheck::{grad_check, GradCheckOptions};
use srlane_numerics::{Array, Tape, Var};

const STRIDES: [f64; 3] = [8.0, 16.0, 32.0];

/// Direct evaluation written out term by term.
fn direct_weights(z: f64, strides: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = strides.iter().map(|s| (-(2f64.powf(z) - s).abs()).exp()).collect();
    let t: f64 = e.iter().sum();
    e.iter().map(|v| v / t).collect()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

#[test]
fn scale_weights_match_direct_evaluation() {
    for z in [3.0, 4.0, 5.0] {
        let w = scale_weights(z, &STRIDES);
        for (a, b) in w.iter().zip(direct_weights(z, &STRIDES)) {
            assert!(rel(*a, b) < 1e-6, "z={z}: {a} vs {b}");
        }
    }
    let w3 = scale_weights(3.0, &STRIDES);
    assert!((w3[0] - 0.999665).abs() < 5e-7);
    assert!((w3[1] - 3.35e-4).abs() < 5e-7);
    // e^-24 / (1 + e^-8 + e^-24)
    assert!(rel(w3[2], 3.7739e-11) < 1e-4);
    let w4 = scale_weights(4.0, &STRIDES);
    assert!((w4[1] - 0.999665).abs() < 5e-7);
    assert!((w4[0] - 3.35e-4).abs() < 5e-7);
    assert!(rel(w4[2], 1.125e-7) < 1e-3);
    assert_eq!(scale_weights(-7.0, &[8.0]), vec![1.0]);
}

fn level(rng: &mut ChaCha8Rng, d: usize, h: usize, w: usize) -> Array<f64> {
    let v: Vec<f64> = (0..d * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Array::from_f64(&[d, h, w], &v).unwrap()
}

#[test]
fn bilinear_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let f = FeatureLevel::new(8.0, level(&mut rng, 3, 8, 20)).unwrap();
    let cell = |r: usize, c: usize| -> Vec<f64> { (0..3).map(|ch| f.data.data()[(ch * 8 + r) * 20 + c]).collect() };
    // Cell (2, 5) is centered at ((5+0.5)·8, (2+0.5)·8).
    assert_eq!(bilinear_sample(&f, 44.0, 20.0), cell(2, 5));
    assert!(bilinear_sample(&f, -500.0, 900.0).iter().all(|&v| v == 0.0));
    let mid = bilinear_sample(&f, 48.0, 24.0);
    for (ch, m) in mid.iter().enumerate() {
        let mean = (cell(2, 5)[ch] + cell(2, 6)[ch] + cell(3, 5)[ch] + cell(3, 6)[ch]) / 4.0;
        assert!((m - mean).abs() < 1e-12);
    }
}

#[test]
fn tape_sampling_matches_plain_bilinear_mixture() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let levels: Vec<Array<f64>> = STRIDES
        .iter()
        .map(|&s| level(&mut rng, 4, (64.0 / s) as usize, (160.0 / s) as usize))
        .collect();
    let np = 6;
    let z: Vec<f64> = (0..np).map(|_| rng.gen_range(2.0..6.0)).collect();
    let lanes: Vec<Lane> = (0..3)
        .map(|_| {
            let xs = (0..72).map(|i| rng.gen_range(-10.0..170.0) * 0.1 + i as f64).collect();
            Lane::new(xs, rng.gen_range(0.0..20.0), rng.gen_range(30.0..64.0), 64.0).unwrap()
        })
        .collect();
    let mut tape = Tape::<f64>::new();
    let vars: Vec<(f64, Var)> = STRIDES
        .iter()
        .zip(&levels)
        .map(|(&s, a)| (s, tape.constant(a.clone())))
        .collect();
    let zv = tape.constant(Array::from_f64(&[np], &z).unwrap());
    let out = sample_proposal_features(&mut tape, &vars, &lanes, zv, Sampling::Adaptive).unwrap();
    let got = tape.value(out).data().to_vec();
    let plain: Vec<FeatureLevel<f64>> = STRIDES
        .iter()
        .zip(&levels)
        .map(|(&s, a)| FeatureLevel::new(s, a.clone()).unwrap())
        .collect();
    for (li, lane) in lanes.iter().enumerate() {
        for (j, (x, y)) in sample_points(lane, np).into_iter().enumerate() {
            let w = direct_weights(z[j], &STRIDES);
            let mut want = [0.0; 4];
            for (lv, wt) in plain.iter().zip(&w) {
                for (o, v) in want.iter_mut().zip(lv.sample(x, y)) {
                    *o += wt * v;
                }
            }
            for ch in 0..4 {
                let g = got[(li * np + j) * 4 + ch];
                assert!((g - want[ch]).abs() < 1e-12, "lane {li} point {j} ch {ch}");
            }
        }
    }
}

fn sample_with(levels: &[Array<f64>], z: f64, lane: &Lane, np: usize) -> Vec<f64> {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<(f64, Var)> = STRIDES
        .iter()
        .zip(levels)
        .map(|(&s, a)| (s, tape.constant(a.clone())))
        .collect();
    let zv = tape.constant(Array::from_f64(&[np], &vec![z; np]).unwrap());
    let out = sample_proposal_features(&mut tape, &vars, std::slice::from_ref(lane), zv, Sampling::Adaptive).unwrap();
    tape.value(out).data().to_vec()
}

#[test]
fn constant_pyramid_gives_constant_features() {
    let levels: Vec<Array<f64>> = STRIDES
        .iter()
        .map(|&s| {
            Array::from_f64(
                &[2, (64.0 / s) as usize, (160.0 / s) as usize],
                &vec![1.0; 2 * (64.0 / s) as usize * (160.0 / s) as usize],
            )
            .unwrap()
        })
        .collect();
    // Points well inside the image, so every bilinear tap is in range.
    let lane = Lane::new(vec![80.0; 72], 20.0, 40.0, 64.0).unwrap();
    for z in [0.0, 3.0, 4.4, 9.0] {
        for v in sample_with(&levels, z, &lane, 6) {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn one_hot_pyramid_scales_by_level_weight() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut levels: Vec<Array<f64>> = STRIDES
        .iter()
        .map(|&s| Array::zeros(&[3, (64.0 / s) as usize, (160.0 / s) as usize]))
        .collect();
    levels[0] = level(&mut rng, 3, 8, 20);
    let lane = Lane::new(vec![77.0; 72], 10.0, 50.0, 64.0).unwrap();
    let base = FeatureLevel::new(8.0, levels[0].clone()).unwrap();
    for z in [4.0, 5.0] {
        let w8 = direct_weights(z, &STRIDES)[0];
        let got = sample_with(&levels, z, &lane, 4);
        for (j, (x, y)) in sample_points(&lane, 4).into_iter().enumerate() {
            for (ch, v) in base.sample(x, y).into_iter().enumerate() {
                let g = got[j * 3 + ch];
                assert!((g - w8 * v).abs() <= 1e-12 * (w8 * v).abs() + 1e-300, "z={z}");
            }
        }
    }
    assert!(rel(direct_weights(4.0, &STRIDES)[0], 3.3535e-4) < 1e-4);
}

#[test]
fn sampling_is_linear_in_pyramid() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mk = |rng: &mut ChaCha8Rng| -> Vec<Array<f64>> {
        STRIDES
            .iter()
            .map(|&s| level(rng, 2, (64.0 / s) as usize, (160.0 / s) as usize))
            .collect()
    };
    let (a, b) = (mk(&mut rng), mk(&mut rng));
    let combo: Vec<Array<f64>> = a
        .iter()
        .zip(&b)
        .map(|(x, y)| {
            let v: Vec<f64> = x.data().iter().zip(y.data()).map(|(p, q)| 2.0 * p - 3.0 * q).collect();
            Array::from_f64(x.shape(), &v).unwrap()
        })
        .collect();
    let lane = Lane::new((0..72).map(|i| 30.0 + i as f64).collect(), 5.0, 60.0, 64.0).unwrap();
    let (sa, sb, sc) = (
        sample_with(&a, 3.7, &lane, 6),
        sample_with(&b, 3.7, &lane, 6),
        sample_with(&combo, 3.7, &lane, 6),
    );
    for i in 0..sa.len() {
        assert!((sc[i] - (2.0 * sa[i] - 3.0 * sb[i])).abs() < 1e-12);
    }
}

#[test]
fn gradient_wrt_z_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let levels: Vec<Array<f64>> = STRIDES
        .iter()
        .map(|&s| level(&mut rng, 3, (64.0 / s) as usize, (160.0 / s) as usize))
        .collect();
    let lane = Lane::new((0..72).map(|i| 40.0 + 0.8 * i as f64).collect(), 3.0, 61.0, 64.0).unwrap();
    let probe: Vec<f64> = (0..8 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    for z0 in [2.71, 3.42, 4.23, 4.61] {
        let z = Array::from_f64(&[8], &(0..8).map(|i| z0 + 0.037 * i as f64).collect::<Vec<_>>()).unwrap();
        let report = grad_check(
            |t, v| {
                let vars: Vec<(f64, Var)> = STRIDES
                    .iter()
                    .zip(&levels)
                    .map(|(&s, a)| (s, t.constant(a.clone())))
                    .collect();
                let out = sample_proposal_features(t, &vars, std::slice::from_ref(&lane), v[0], Sampling::Adaptive)
                    .map_err(|e| srlane_numerics::NumericsError::Invalid {
                        op: "test",
                        msg: e.to_string(),
                    })?;
                let p = t.constant(Array::from_f64(&[8, 3], &probe)?);
                let m = t.mul(out, p)?;
                Ok(t.sum(m))
            },
            &[z],
            &GradCheckOptions {
                tol: 1e-6,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.passed(), "z0={z0}: {report:?}");
    }
}

fn projection_setup(rng: &mut ChaCha8Rng, layout: &GroupLayout, d: usize) -> Vec<(Array<f64>, Array<f64>)> {
    (0..layout.groups)
        .map(|g| {
            let rows = layout.point_range(g).len() * d;
            let cols = layout.group_width();
            let w: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..cols).map(|_| rng.gen_range(-0.5..0.5)).collect();
            (
                Array::from_f64(&[rows, cols], &w).unwrap(),
                Array::from_f64(&[cols], &b).unwrap(),
            )
        })
        .collect()
}

fn project(raw: &Array<f64>, layout: &GroupLayout, params: &[(Array<f64>, Array<f64>)]) -> Vec<f64> {
    let mut tape = Tape::<f64>::new();
    let r = tape.constant(raw.clone());
    let p: Vec<(Var, Var)> = params
        .iter()
        .map(|(w, b)| (tape.constant(w.clone()), tape.constant(b.clone())))
        .collect();
    let out = project_features(&mut tape, r, layout, &p).unwrap();
    tape.value(out).data().to_vec()
}

#[test]
fn projection_matches_dense_matmul_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (l, d) = (3, 4);
    let layout = GroupLayout::new(12, 3, 9).unwrap();
    let params = projection_setup(&mut rng, &layout, d);
    let raw_v: Vec<f64> = (0..l * 12 * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let raw = Array::from_f64(&[l * 12, d], &raw_v).unwrap();
    let got = project(&raw, &layout, &params);
    let cg = layout.group_width();
    for i in 0..l {
        for g in 0..3 {
            let pts = layout.point_range(g);
            let (w, b) = (&params[g].0, &params[g].1);
            for o in 0..cg {
                let mut acc = b.data()[o];
                for (k, p) in pts.clone().enumerate() {
                    for ch in 0..d {
                        acc += raw_v[(i * 12 + p) * d + ch] * w.data()[(k * d + ch) * cg + o];
                    }
                }
                let want = acc.max(0.0);
                let have = got[i * 9 + g * cg + o];
                assert!((have - want).abs() < 1e-6, "proposal {i} group {g} out {o}");
            }
        }
    }
}

#[test]
fn projection_structure() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let d = 2;
    let layout = GroupLayout::new(6, 3, 6).unwrap();
    let mut params = projection_setup(&mut rng, &layout, d);
    for (_, b) in params.iter_mut() {
        *b = Array::zeros(b.shape());
    }
    assert!(project(&Array::zeros(&[12, d]), &layout, &params)
        .iter()
        .all(|&v| v == 0.0));

    let raw_v: Vec<f64> = (0..6 * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let base = project(&Array::from_f64(&[6, d], &raw_v).unwrap(), &layout, &params);
    // Swap the two points of group 1 (points 2 and 3).
    let mut swapped = raw_v.clone();
    for ch in 0..d {
        swapped.swap(2 * d + ch, 3 * d + ch);
    }
    let moved = project(&Array::from_f64(&[6, d], &swapped).unwrap(), &layout, &params);
    for c in 0..6 {
        if layout.channel_range(1).contains(&c) {
            continue;
        }
        assert_eq!(base[c], moved[c], "channel {c}");
    }
    assert!(GroupLayout::new(36, 6, 100).is_err());
}

proptest! {
    #[test]
    fn weights_sum_to_one(z in -5.0..8.0f64, strides in prop::collection::vec(1.0..128.0f64, 1..6)) {
        let w = scale_weights(z, &strides);
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(w.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn argmax_weight_is_nearest_stride(z in 1.0..7.0f64) {
        let w = scale_weights(z, &STRIDES);
        let two = z.exp2();
        let best_w = (0..3).max_by(|&a, &b| w[a].partial_cmp(&w[b]).unwrap()).unwrap();
        let best_d = (0..3).min_by(|&a, &b| (two - STRIDES[a]).abs().partial_cmp(&(two - STRIDES[b]).abs()).unwrap()).unwrap();
        let da = (two - STRIDES[best_w]).abs();
        let db = (two - STRIDES[best_d]).abs();
        prop_assert!((da - db).abs() < 1e-9);
    }
}
