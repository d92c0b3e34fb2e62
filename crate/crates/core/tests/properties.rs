//! Invariants checked over random inputs.

use std::f64::consts::PI;

use flow_planner::config::Config;
use flow_planner::flow::{guided_velocity, interpolate, keyed_rng, predicted_velocity};
use flow_planner::harness::idm::{idm_accel, integrate, IdmParams, Leader};
use flow_planner::scenario::{from_ego_frame, quintic_fit, to_ego_frame, wrap_angle, EgoTrajectory, NormStats, Obb, Pose};
use flow_planner::tokenizer::SegmentLayout;
use numgrad::Tensor;
use proptest::prelude::*;
use rand::Rng;

/// `(count, stride, overlap)` giving a valid layout.
fn layout() -> impl Strategy<Value = SegmentLayout> {
    (1usize..8, 1usize..16, 0usize..12).prop_map(|(count, stride, overlap)| {
        let seg = stride + overlap;
        SegmentLayout::new(seg + (count - 1) * stride, seg, overlap).unwrap()
    })
}

fn matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = keyed_rng(&[seed]);
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-3.0..3.0)).collect())
}

fn pose() -> impl Strategy<Value = Pose> {
    (-500.0..500.0f64, -500.0..500.0f64, -PI..PI).prop_map(|(x, y, h)| Pose::new(x, y, h))
}

proptest! {
    #[test]
    fn segments_reassemble_exactly(lay in layout(), seed in any::<u64>()) {
        let traj = matrix(lay.len, 4, seed);
        let segs = lay.segment(&traj).unwrap();
        prop_assert_eq!(segs.len(), lay.count);
        let back = lay.reassemble(&segs).unwrap();
        if lay.overlap <= lay.stride {
            // Each point is a single value or the mean of two equal ones.
            prop_assert_eq!(back, traj);
        } else {
            for (a, b) in back.data().iter().zip(traj.data()) {
                prop_assert!((a - b).abs() <= 1e-14 * b.abs().max(1.0));
            }
        }
        prop_assert_eq!(lay.consistency_loss(&segs).unwrap(), 0.0);
    }

    #[test]
    fn segments_cover_every_point(lay in layout()) {
        prop_assert_eq!(lay.range(0).start, 0);
        prop_assert_eq!(lay.range(lay.count - 1).end, lay.len);
        for i in 0..lay.len {
            prop_assert!(lay.coverage(i) >= 1);
        }
    }

    #[test]
    fn untileable_layouts_are_rejected(len in 2usize..100, seg in 1usize..100, overlap in 0usize..100) {
        let ok = seg <= len && overlap < seg && (len - seg) % (seg - overlap) == 0;
        prop_assert_eq!(SegmentLayout::new(len, seg, overlap).is_ok(), ok);
    }

    #[test]
    fn disagreeing_overlaps_cost_something(lay in layout(), seed in any::<u64>()) {
        prop_assume!(lay.count >= 2 && lay.overlap >= 1);
        let traj = matrix(lay.len, 4, seed);
        let mut segs = lay.segment(&traj).unwrap();
        let last = lay.seg_len - 1;
        let v = segs[0].get(last, 0);
        segs[0].set(last, 0, v + 1.0);
        prop_assert!(lay.consistency_loss(&segs).unwrap() > 0.0);
    }

    #[test]
    fn config_text_round_trips(seed in any::<u64>(), lr in 1e-6..1e-1f64, batch in 1usize..512, paper in any::<bool>()) {
        let mut cfg = if paper { Config::paper() } else { Config::desk() };
        cfg.seed = seed;
        cfg.lr = lr;
        cfg.batch_size = batch;
        prop_assert_eq!(Config::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn ego_frame_round_trips(p in pose(), ego in pose()) {
        let back = from_ego_frame(to_ego_frame(p, ego), ego);
        prop_assert!((back.x - p.x).abs() < 1e-9 && (back.y - p.y).abs() < 1e-9);
        prop_assert!(wrap_angle(back.heading - p.heading).abs() < 1e-9);
        let own = to_ego_frame(ego, ego);
        prop_assert!(own.x.abs() < 1e-9 && own.y.abs() < 1e-9 && own.heading.abs() < 1e-12);
    }

    #[test]
    fn wrapped_angles_are_principal(a in -1e3..1e3f64) {
        let w = wrap_angle(a);
        prop_assert!(w > -PI - 1e-12 && w <= PI + 1e-12);
        let turns = (a - w) / (2.0 * PI);
        prop_assert!((turns - turns.round()).abs() < 1e-9);
    }

    #[test]
    fn box_overlap_is_symmetric(a in pose(), b in pose(), la in 0.5..6.0f64, wa in 0.5..3.0f64, lb in 0.5..6.0f64, wb in 0.5..3.0f64) {
        let (p, q) = (Obb::new(a, la, wa), Obb::new(b, lb, wb));
        prop_assert_eq!(p.overlaps(&q), q.overlaps(&p));
        prop_assert!(p.overlaps(&p));
        let gap = a.dist(&b);
        if gap > (la.hypot(wa) + lb.hypot(wb)) / 2.0 {
            prop_assert!(!p.overlaps(&q));
        }
        if gap < wa.min(la) / 2.0 + wb.min(lb) / 2.0 {
            prop_assert!(p.overlaps(&q));
        }
    }

    #[test]
    fn normalization_round_trips(points in prop::collection::vec(pose(), 1..30), mean in -50.0..50.0f64, std in 0.1..40.0f64, ys in 0.1..10.0f64) {
        let stats = NormStats::new(mean, std, ys).unwrap();
        let traj = EgoTrajectory { points };
        let back = stats.denormalize_traj(&stats.normalize_traj(&traj).unwrap()).unwrap();
        for (a, b) in back.points.iter().zip(&traj.points) {
            prop_assert!((a.x - b.x).abs() < 1e-9 && (a.y - b.y).abs() < 1e-9);
            prop_assert!(wrap_angle(a.heading - b.heading).abs() < 1e-9);
        }
    }

    #[test]
    fn quintic_meets_both_ends(s0 in prop::array::uniform3(-20.0..20.0f64), s1 in prop::array::uniform3(-20.0..20.0f64), d in 0.5..10.0f64) {
        let q = quintic_fit(s0, s1, d);
        let close = |a: [f64; 3], b: [f64; 3]| a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= 1e-7 * (1.0 + y.abs()));
        prop_assert!(close(q.state(0.0), s0));
        prop_assert!(close(q.state(d), s1), "{:?} vs {:?}", q.state(d), s1);
    }

    #[test]
    fn exact_prediction_gives_the_straight_line_velocity(seed in any::<u64>(), t in 0.0..0.99f64) {
        let (tau0, tau1) = (matrix(6, 4, seed), matrix(6, 4, seed ^ 1));
        prop_assert_eq!(interpolate(&tau0, &tau1, 0.0).unwrap(), tau0.clone());
        prop_assert_eq!(interpolate(&tau0, &tau1, 1.0).unwrap(), tau1.clone());
        let tau_t = interpolate(&tau0, &tau1, t).unwrap();
        let v = predicted_velocity(&tau1, &tau_t, t, 1e-3).unwrap();
        for ((v, a), b) in v.data().iter().zip(tau0.data()).zip(tau1.data()) {
            prop_assert!((v - (b - a)).abs() < 1e-8, "{v} vs {}", b - a);
        }
    }

    #[test]
    fn guidance_is_the_affine_blend(seed in any::<u64>(), omega in -1.0..4.0f64) {
        let (u, c) = (matrix(5, 4, seed), matrix(5, 4, seed ^ 7));
        prop_assert_eq!(guided_velocity(&u, &c, 1.0).unwrap(), c.clone());
        prop_assert_eq!(guided_velocity(&u, &c, 0.0).unwrap(), u.clone());
        let g = guided_velocity(&u, &c, omega).unwrap();
        for ((g, u), c) in g.data().iter().zip(u.data()).zip(c.data()) {
            prop_assert!((g - (u + omega * (c - u))).abs() < 1e-12);
        }
    }

    #[test]
    fn idm_output_stays_in_bounds(v in 0.0..40.0f64, v0 in -1.0..40.0f64, gap in -5.0..200.0f64, dv in -20.0..20.0f64, lead in any::<bool>()) {
        let p = IdmParams::default();
        let leader = lead.then_some(Leader { gap, dv });
        let a = idm_accel(v, v0, leader, &p);
        prop_assert!(a.is_finite() && a >= -p.b_max && a <= p.a);
        let (ds, v1) = integrate(v, a, 0.1);
        prop_assert!(ds >= 0.0 && v1 >= 0.0);
    }

    #[test]
    fn keyed_streams_depend_only_on_their_keys(a in any::<u64>(), b in any::<u64>()) {
        let x: u64 = keyed_rng(&[a, b]).gen();
        prop_assert_eq!(x, keyed_rng(&[a, b]).gen::<u64>());
        prop_assert_ne!(x, keyed_rng(&[a, b, 0]).gen::<u64>());
        if a != b {
            prop_assert_ne!(x, keyed_rng(&[b, a]).gen::<u64>());
        }
    }
}
