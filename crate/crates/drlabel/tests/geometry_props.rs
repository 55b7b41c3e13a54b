//! Property tests for the deconstruction / reconstruction core: round-trip
//! identity, sphere membership, rigid-motion behavior, uniqueness across
//! graph constructions, duplication robustness, and degeneracy detection.

use drlabel::geometry::{
    deconstruct_labels, project_displacement, reconstruct_positions, sphere_fit, unit_direction,
};
use drlabel::graph::{
    build_full_graph, build_knn_graph, build_radius_graph, perturb_graph, AtomicSystem,
    PerturbMode,
};
use drlabel::vec3::{apply_e3, E3Transform, Vec3};

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn vec3_strategy(scale: f64) -> impl Strategy<Value = Vec3> {
    (
        prop::num::f64::NORMAL.prop_map(move |v| (v % scale).abs()),
        prop::num::f64::NORMAL.prop_map(move |v| (v % scale).abs()),
        prop::num::f64::NORMAL.prop_map(move |v| (v % scale).abs()),
    )
        .prop_map(|(x, y, z)| Vec3::new(x - 0.5, y - 0.5, z - 0.5))
}

fn spanning_measure(vectors: &[Vec3]) -> f64 {
    let scale = vectors.iter().map(Vec3::norm).fold(0.0_f64, f64::max);
    if scale == 0.0 {
        return 0.0;
    }
    let mut best = 0.0_f64;
    for a in 0..vectors.len() {
        for b in a + 1..vectors.len() {
            for c in b + 1..vectors.len() {
                best = best.max(vectors[a].dot(&vectors[b].cross(&vectors[c])).abs());
            }
        }
    }
    best / (scale * scale * scale)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn projection_is_parallel_and_bounded(dp in vec3_strategy(1.0), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = loop {
            let v = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            if v.norm() > 1e-3 {
                break drlabel::vec3::UnitVec3::try_new(v).unwrap();
            }
        };
        let (m, proj) = project_displacement(&dp, &d);
        // parallel to the direction
        prop_assert!(proj.cross(&d.as_vec3()).norm() < 1e-10 * (1.0 + m.abs()));
        // never longer than the displacement
        prop_assert!(proj.norm() <= dp.norm() + 1e-12);
        // sphere membership: x.x == 2 x.(dp/2)
        let lhs = proj.norm_sq();
        let rhs = 2.0 * proj.dot(&dp.scale(0.5));
        prop_assert!((lhs - rhs).abs() < 1e-12 * (1.0 + lhs));
    }

    #[test]
    fn round_trip_recovers_displacement(seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dp = Vec3::new(
            rng.random_range(-0.4..0.4),
            rng.random_range(-0.4..0.4),
            rng.random_range(-0.4..0.4),
        );
        let n_dirs = rng.random_range(3..=12);
        let projections = loop {
            let projs: Vec<Vec3> = (0..n_dirs)
                .map(|_| {
                    let v = Vec3::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    );
                    let d = v.scale(1.0 / v.norm().max(1e-9));
                    d.scale(dp.dot(&d))
                })
                .collect();
            if spanning_measure(&projs) > 1e-3 {
                break projs;
            }
        };
        let fit = sphere_fit(&projections).unwrap();
        prop_assert!(!fit.degenerate);
        prop_assert!((fit.displacement - dp).norm() < 1e-9);
    }
}

#[test]
fn reconstruction_equivariance_under_rigid_motions() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for trial in 0..40 {
        let n = rng.random_range(5..10);
        let positions: Vec<Vec3> = (0..n)
            .map(|_| {
                Vec3::new(
                    rng.random_range(0.0..3.0),
                    rng.random_range(0.0..3.0),
                    rng.random_range(0.0..3.0),
                )
            })
            .collect();
        // keep atoms separated
        if positions
            .iter()
            .enumerate()
            .any(|(i, p)| positions.iter().skip(i + 1).any(|q| (*p - *q).norm() < 0.1))
        {
            continue;
        }
        let disps: Vec<Vec3> = (0..n)
            .map(|_| {
                Vec3::new(
                    rng.random_range(-0.2..0.2),
                    rng.random_range(-0.2..0.2),
                    rng.random_range(-0.2..0.2),
                )
            })
            .collect();
        let graph = drlabel::graph::complete_graph(n);
        let mags = deconstruct_labels(&positions, &disps, &graph).unwrap();
        let rec = reconstruct_positions(&mags, &graph, &positions).unwrap();

        let t = E3Transform::sample(&mut rng, trial % 2 == 0, 5.0);
        let moved_pos = apply_e3(&t, &positions);
        let moved_disp: Vec<Vec3> = disps.iter().map(|d| t.apply_linear(d)).collect();
        let moved_mags = deconstruct_labels(&moved_pos, &moved_disp, &graph).unwrap();

        // magnitudes invariant
        for ((_, _, a), (_, _, b)) in mags.iter().zip(moved_mags.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
        // reconstruction equivariant
        let moved_rec = reconstruct_positions(&moved_mags, &graph, &moved_pos).unwrap();
        let expected = apply_e3(&t, &rec.positions);
        for (got, want) in moved_rec.positions.iter().zip(&expected) {
            assert!((*got - *want).norm() < 1e-9);
        }
    }
}

#[test]
fn uniqueness_across_graph_policies_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    for _ in 0..30 {
        let n = rng.random_range(5..11);
        let seed: u64 = rng.random();
        let system = drlabel::sim::sample_system(n, 3, (n as f64 / 0.5).cbrt(), 0.75, seed).unwrap();
        let disps: Vec<Vec3> = (0..n)
            .map(|_| {
                Vec3::new(
                    rng.random_range(-0.3..0.3),
                    rng.random_range(-0.3..0.3),
                    rng.random_range(-0.3..0.3),
                )
            })
            .collect();
        let full = build_full_graph(&system);
        let radius = build_radius_graph(&system, 2.0, None).unwrap();
        let knn = build_knn_graph(&system, (n - 1).min(4)).unwrap();
        let m_full = deconstruct_labels(&system.positions, &disps, &full).unwrap();
        for graph in [&radius, &knn] {
            let m = deconstruct_labels(&system.positions, &disps, graph).unwrap();
            for (i, j, value) in m.iter() {
                let reference = m_full.get(i, j).unwrap();
                assert_eq!(value.to_bits(), reference.to_bits(), "edge ({i},{j})");
            }
        }
    }
}

#[test]
fn duplication_of_exact_projections_is_harmless() {
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    for _ in 0..25 {
        let n = rng.random_range(5..10);
        let seed: u64 = rng.random();
        let system = drlabel::sim::sample_system(n, 2, (n as f64 / 0.5).cbrt(), 0.75, seed).unwrap();
        let disps: Vec<Vec3> = (0..n)
            .map(|_| {
                Vec3::new(
                    rng.random_range(-0.3..0.3),
                    rng.random_range(-0.3..0.3),
                    rng.random_range(-0.3..0.3),
                )
            })
            .collect();
        let graph = build_full_graph(&system);
        let mags = deconstruct_labels(&system.positions, &disps, &graph).unwrap();
        let base = reconstruct_positions(&mags, &graph, &system.positions).unwrap();
        let (dup_graph, _) =
            perturb_graph(&graph, PerturbMode::AddDuplicate, 0.6, rng.random()).unwrap();
        let dup = reconstruct_positions(&mags, &dup_graph, &system.positions).unwrap();
        for (a, b) in base.positions.iter().zip(&dup.positions) {
            assert!((*a - *b).norm() < 1e-9);
        }
    }
}

#[test]
fn degenerate_inputs_always_raise_the_flag() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..200 {
        // projections confined to a random plane
        let a = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let b = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let count = rng.random_range(1..=5);
        let projs: Vec<Vec3> = (0..count)
            .map(|_| {
                a.scale(rng.random_range(-0.5..0.5)) + b.scale(rng.random_range(-0.5..0.5))
            })
            .collect();
        // independent rank check
        assert!(spanning_measure(&projs) < 1e-9);
        let fit = sphere_fit(&projs).unwrap();
        assert!(fit.degenerate, "rank-deficient projections must be flagged");
        assert_eq!(fit.displacement, Vec3::ZERO);
    }
}

#[test]
fn unit_direction_convention_points_from_neighbor_to_node() {
    // dp_i projected on edge (i, j) uses the direction from p_j to p_i.
    let p_i = Vec3::new(2.0, 0.0, 0.0);
    let p_j = Vec3::new(0.0, 0.0, 0.0);
    let d = unit_direction(&p_i, &p_j).unwrap();
    assert_eq!(d.as_vec3(), Vec3::new(1.0, 0.0, 0.0));

    let system = AtomicSystem::new(
        vec![0, 0],
        vec![p_i, p_j],
        vec![true, true],
    )
    .unwrap();
    let graph = build_full_graph(&system);
    let disps = vec![Vec3::new(0.5, 0.0, 0.0), Vec3::ZERO];
    let mags = deconstruct_labels(&system.positions, &disps, &graph).unwrap();
    assert_eq!(mags.get(0, 1), Some(0.5)); // direction (1,0,0)
    assert_eq!(mags.get(1, 0), Some(0.0)); // node 1 has zero label
}
