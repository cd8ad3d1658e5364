use crowdseg::pseudolabel::{circular_region_merge, rasterize_disc, select_keyframes};
use crowdseg::Point;
use proptest::prelude::*;

const SIDE: usize = 64;

fn particles(max: usize) -> impl Strategy<Value = Vec<Point>> {
    proptest::collection::vec(
        (-5.0f64..69.0, -5.0f64..69.0).prop_map(|(x, y)| Point::new(x, y)),
        0..=max,
    )
}

fn brute_force(ps: &[Point], r: f64) -> Vec<bool> {
    let mut out = Vec::with_capacity(SIDE * SIDE);
    for y in 0..SIDE {
        for x in 0..SIDE {
            out.push(ps.iter().any(|p| {
                let (dx, dy) = (x as f64 - p.x, y as f64 - p.y);
                dx * dx + dy * dy <= r * r
            }));
        }
    }
    out
}

proptest! {
    #[test]
    fn merge_equals_pixelwise_disjunction(ps in particles(10), r in 0.5f64..15.0) {
        let m = circular_region_merge(&ps, r, SIDE, SIDE);
        let oracle = brute_force(&ps, r);
        prop_assert_eq!(m.bits(), oracle.as_slice());
    }

    #[test]
    fn adding_a_particle_only_grows(ps in particles(10), extra in particles(1), r in 0.5f64..15.0) {
        let before = circular_region_merge(&ps, r, SIDE, SIDE);
        let mut more = ps.clone();
        more.extend(extra);
        let after = circular_region_merge(&more, r, SIDE, SIDE);
        for (a, b) in before.bits().iter().zip(after.bits()) {
            prop_assert!(!*a || *b);
        }
    }

    #[test]
    fn order_does_not_matter(ps in particles(10).prop_shuffle(), r in 0.5f64..15.0) {
        let mut sorted = ps.clone();
        sorted.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
        prop_assert_eq!(circular_region_merge(&ps, r, SIDE, SIDE), circular_region_merge(&sorted, r, SIDE, SIDE));
    }

    #[test]
    fn particles_lie_inside_their_mask(ps in proptest::collection::vec((0.0f64..63.0, 0.0f64..63.0), 1..10), r in 1.0f64..10.0) {
        let ps: Vec<Point> = ps.into_iter().map(|(x, y)| Point::new(x, y)).collect();
        let m = circular_region_merge(&ps, r, SIDE, SIDE);
        for p in &ps {
            prop_assert!(m.get(p.x.round() as usize, p.y.round() as usize));
        }
        prop_assert!(m.count() <= SIDE * SIDE);
    }
}

#[test]
fn disc_pixel_counts() {
    let c = Point::new(32.0, 32.0);
    assert_eq!(rasterize_disc(c, 2.0, SIDE, SIDE).count(), 13);
    assert_eq!(rasterize_disc(c, 1.0, SIDE, SIDE).count(), 5);
    assert_eq!(rasterize_disc(c, 0.5, SIDE, SIDE).count(), 1);
}

#[test]
fn keyframe_selection() {
    assert_eq!(select_keyframes(40, 20), vec![0, 20]);
    assert_eq!(select_keyframes(5, 1), vec![0, 1, 2, 3, 4]);
    assert_eq!(select_keyframes(5, 20), vec![0]);
    assert!(select_keyframes(0, 20).is_empty());
}
