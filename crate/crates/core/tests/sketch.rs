use proptest::prelude::*;
use srlane::geometry::{lane_from_polyline, line_iou, Polyline};
use srlane::sketch::*;

const W: f64 = 160.0;
const H: f64 = 64.0;
const N: usize = 72;

fn quadratic(samples: usize) -> Polyline {
    // x = 40 + 0.9·y + 0.012·y², bending right towards the bottom.
    Polyline::new(
        (0..=samples)
            .map(|i| {
                let y = 4.0 + 56.0 * i as f64 / samples as f64;
                (40.0 + 0.9 * y + 0.012 * y * y, y)
            })
            .collect(),
    )
    .unwrap()
}

/// Equal-arc pieces of a 20 000-point resampling: chord angle and point
/// cloud (grid units) per piece.
fn oracle_pieces(k: usize, rows: usize, cols: usize) -> Vec<(f64, Vec<(f64, f64)>)> {
    let dense = quadratic(20_000);
    let pts = dense.points();
    let mut cum = vec![0.0];
    for w in pts.windows(2) {
        cum.push(cum.last().unwrap() + (w[1].0 - w[0].0).hypot(w[1].1 - w[0].1));
    }
    let total = *cum.last().unwrap();
    let (sx, sy) = (cols as f64 / W, rows as f64 / H);
    (0..k)
        .map(|j| {
            let (lo, hi) = (total * j as f64 / k as f64, total * (j + 1) as f64 / k as f64);
            let idx: Vec<usize> = (0..pts.len()).filter(|&i| cum[i] >= lo && cum[i] <= hi).collect();
            let (a, b) = (pts[idx[0]], pts[*idx.last().unwrap()]);
            let theta = (b.1 - a.1).atan2(b.0 - a.0).to_degrees().rem_euclid(180.0);
            (theta, idx.iter().map(|&i| (pts[i].0 * sx, pts[i].1 * sy)).collect())
        })
        .collect()
}

#[test]
fn curved_direction_gt_matches_nearest_piece_oracle() {
    let (rows, cols, k, tau) = (16, 40, 8, 1.5);
    let map = encode_direction_gt(&[quadratic(400)], rows, cols, k, tau, W, H).unwrap();
    let pieces = oracle_pieces(k, rows, cols);
    let mask = map.mask.as_ref().unwrap();
    let mut compared = 0;
    for r in 0..rows {
        for c in 0..cols {
            let (cx, cy) = (c as f64 + 0.5, r as f64 + 0.5);
            let mut d: Vec<(f64, f64)> = pieces
                .iter()
                .map(|(theta, cloud)| {
                    let m = cloud
                        .iter()
                        .map(|p| (p.0 - cx).hypot(p.1 - cy))
                        .fold(f64::INFINITY, f64::min);
                    (m, *theta)
                })
                .collect();
            d.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            // Cells on a decision boundary (equidistant pieces or exactly at τ) are ambiguous.
            if (d[0].0 - tau).abs() < 1e-3 || (d.len() > 1 && d[1].0 - d[0].0 < 1e-3) {
                continue;
            }
            let inside = d[0].0 <= tau;
            assert_eq!(mask[r * cols + c], inside, "cell ({r}, {c})");
            if inside {
                let got = map.angle(r, c);
                assert!((got - d[0].1).abs() < 0.5, "cell ({r}, {c}): {got} vs {}", d[0].1);
                compared += 1;
            } else {
                assert_eq!(map.angle(r, c), 90.0);
            }
        }
    }
    assert!(compared > 50, "only {compared} supervised cells");
}

#[test]
fn direction_gt_examples() {
    let vertical = Polyline::new(vec![(80.0, 0.0), (80.0, H)]).unwrap();
    let m = encode_direction_gt(&[vertical], 4, 10, 4, 1.5, W, H).unwrap();
    let mask = m.mask.clone().unwrap();
    assert!(mask.iter().any(|&b| b));
    for (i, &on) in mask.iter().enumerate() {
        assert_eq!(m.angles[i], 90.0, "cell {i} (mask {on})");
    }

    let diag = Polyline::new(vec![(0.0, 0.0), (64.0, 64.0)]).unwrap();
    let m = encode_direction_gt(&[diag], 8, 20, 8, 1.5, W, H).unwrap();
    let mask = m.mask.clone().unwrap();
    for (i, &on) in mask.iter().enumerate() {
        if on {
            assert!((m.angles[i] - 45.0).abs() < 1e-9);
        }
    }

    let empty = encode_direction_gt(&[], 4, 10, 4, 1.5, W, H).unwrap();
    assert_eq!(empty.masked_cells(), 0);
    assert!(encode_direction_gt(&[], 4, 10, 0, 1.5, W, H).is_err());
}

fn smooth_field(x: f64, y: f64) -> f64 {
    70.0 + 30.0 * x / W + 10.0 * (std::f64::consts::PI * y / H).sin()
}

fn field_map(rows: usize, cols: usize) -> DirectionMap {
    let mut angles = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let (x, y) = ((c as f64 + 0.5) * W / cols as f64, (r as f64 + 0.5) * H / rows as f64);
            angles.push(smooth_field(x, y));
        }
    }
    DirectionMap::new(rows, cols, angles, W, H).unwrap()
}

#[test]
fn resize_upsample_tracks_smooth_field() {
    let up = resize_direction_map(&field_map(4, 10), 8, 20).unwrap();
    // Sample positions clamp to the outermost source centers.
    let (cw, ch) = (W / 10.0, H / 4.0);
    let mut worst: f64 = 0.0;
    for r in 0..8 {
        for c in 0..20 {
            let (x, y) = up.cell_center(r, c);
            let (x, y) = (x.clamp(cw / 2.0, W - cw / 2.0), y.clamp(ch / 2.0, H - ch / 2.0));
            worst = worst.max((up.angle(r, c) - smooth_field(x, y)).abs());
        }
    }
    // Bilinear error bound h²/8·|f''| for the sine term: 16²/8·10·(π/64)² ≈ 0.77°.
    assert!(worst < 1.0, "max deviation {worst}°");
}

#[test]
fn resize_examples() {
    let m = field_map(4, 10);
    assert_eq!(resize_direction_map(&m, 4, 10).unwrap().angles, m.angles);
    let pair = DirectionMap::new(1, 2, vec![179.0, 1.0], W, H).unwrap();
    let one = resize_direction_map(&pair, 1, 1).unwrap();
    let a = one.angle(0, 0);
    assert!(!(1e-9..=180.0 - 1e-9).contains(&a), "{a}");
    // Opposite doubled-angle vectors cancel: nearest-cell fallback.
    let opposed = DirectionMap::new(1, 2, vec![45.0, 135.0], W, H).unwrap();
    let f = resize_direction_map(&opposed, 1, 1).unwrap();
    assert!([45.0, 135.0].contains(&f.angle(0, 0)));
    assert!(resize_direction_map(&m, 0, 3).is_err());
}

#[test]
fn proposals_are_flip_equivariant() {
    let map = field_map(4, 10);
    let flipped = map.flipped();
    let a = construct_proposals(&map, N, H, W);
    let b = construct_proposals(&flipped, N, H, W);
    for r in 0..4 {
        for c in 0..10 {
            let pa = &a.proposals[r * 10 + c].lane;
            let pb = &b.proposals[r * 10 + (9 - c)].lane;
            for (xa, xb) in pa.xs.iter().zip(&pb.xs) {
                assert!((W - xa - xb).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn proposals_pass_through_origin_and_are_row_major() {
    let map = field_map(4, 10);
    let set = construct_proposals(&map, 5, H, W);
    assert_eq!(set.len(), 40);
    for (k, p) in set.proposals.iter().enumerate() {
        let (x, y) = map.cell_center(k / 10, k % 10);
        assert_eq!(p.origin, (x, y));
        assert!((p.lane.x_at(y) - x).abs() < 1e-9, "proposal {k}");
    }
}

#[test]
fn oracle_map_gives_exact_proposals_for_straight_lanes() {
    // Column 3 centers sit at x = 56; the 45° diagonal through (8, 8) crosses
    // the centers (8 + 16k, 8 + 16k).
    for gt in [
        Polyline::new(vec![(56.0, 0.0), (56.0, H)]).unwrap(),
        Polyline::new(vec![(0.0, 0.0), (64.0, 64.0)]).unwrap(),
    ] {
        let map = encode_direction_gt(std::slice::from_ref(&gt), 4, 10, 4, 1.5, W, H).unwrap();
        let set = construct_proposals(&map, N, H, W);
        let gt_lane = lane_from_polyline(&gt, N, H).unwrap();
        let on_lane: Vec<_> = set
            .proposals
            .iter()
            .filter(|p| (gt.x_at(p.origin.1) - p.origin.0).abs() < 1e-9)
            .collect();
        assert!(!on_lane.is_empty());
        for p in on_lane {
            assert!(line_iou(&p.lane, &gt_lane, 7.5).unwrap() >= 0.99);
        }
    }
}

#[test]
fn anchors_match_default_grid_size() {
    let a = default_anchors(N, H, W);
    assert_eq!(a.len(), DEFAULT_GRID.0 * DEFAULT_GRID.1);
    for p in &a.proposals {
        assert_eq!(p.origin.1, H);
        assert!(ANCHOR_ANGLES.contains(&p.angle));
    }
}

proptest! {
    #[test]
    fn mask_nonempty_when_lane_crosses_grid(
        x0 in 0.0..W, x1 in 0.0..W, y0 in 0.0..20.0f64, y1 in 40.0..H,
    ) {
        let gt = Polyline::new(vec![(x0, y0), (x1, y1)]).unwrap();
        let m = encode_direction_gt(&[gt], 4, 10, 4, 1.5, W, H).unwrap();
        prop_assert!(m.masked_cells() > 0);
        prop_assert!(m.angles.iter().all(|a| (0.0..180.0).contains(a)));
    }

    #[test]
    fn resized_angles_stay_in_range(
        angles in prop::collection::vec(0.0..180.0f64, 40), rows in 1usize..9, cols in 1usize..21,
    ) {
        let m = DirectionMap::new(4, 10, angles, W, H).unwrap();
        let r = resize_direction_map(&m, rows, cols).unwrap();
        prop_assert!(r.angles.iter().all(|a| (0.0..180.0).contains(a)));
    }
}
