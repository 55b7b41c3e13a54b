//! Graph-builder and simulator invariants: permutation consistency, radius
//! symmetry, k-NN nesting, perturbation determinism, energy monotonicity,
//! translation covariance of relaxation, and force/finite-difference
//! agreement.

use drlabel::graph::{
    build_full_graph, build_knn_graph, build_radius_graph, perturb_graph, AtomicSystem,
    PerturbMode,
};
use drlabel::sim::{
    forces, generate_dataset, mark_fixed_bottom, potential_energy, relax, sample_system,
    DatasetConfig, PotentialParams,
};
use drlabel::vec3::Vec3;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_system(rng: &mut ChaCha8Rng, n: usize) -> AtomicSystem {
    let seed: u64 = rng.random();
    sample_system(n, 3, (n as f64 / 0.5).cbrt(), 0.75, seed).unwrap()
}

fn permuted_system(system: &AtomicSystem, perm: &[usize]) -> AtomicSystem {
    AtomicSystem::new(
        perm.iter().map(|&old| system.atom_types[old]).collect(),
        perm.iter().map(|&old| system.positions[old]).collect(),
        perm.iter().map(|&old| system.free_mask[old]).collect(),
    )
    .unwrap()
}

#[test]
fn graph_builders_are_permutation_consistent() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..20 {
        let n = rng.random_range(5..10);
        let system = random_system(&mut rng, n);
        // perm[new_index] = old_index; node mapping old -> new
        let mut perm: Vec<usize> = (0..n).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut rng);
        let mut old_to_new = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            old_to_new[old] = new;
        }
        let permuted = permuted_system(&system, &perm);

        let g_old = build_radius_graph(&system, 2.0, None).unwrap();
        let g_new = build_radius_graph(&permuted, 2.0, None).unwrap();
        assert_eq!(g_old.relabel(&old_to_new).sorted_edges(), g_new.sorted_edges());

        let k = (n - 1).min(3);
        let k_old = build_knn_graph(&system, k).unwrap();
        let k_new = build_knn_graph(&permuted, k).unwrap();
        assert_eq!(k_old.relabel(&old_to_new).sorted_edges(), k_new.sorted_edges());
    }
}

#[test]
fn radius_graph_is_directionally_symmetric() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..20 {
        let n = rng.random_range(4..12);
        let system = random_system(&mut rng, n);
        let g = build_radius_graph(&system, 1.8, None).unwrap();
        let edges: std::collections::BTreeSet<(usize, usize)> =
            g.edges().iter().copied().collect();
        for &(i, j) in g.edges() {
            assert!(edges.contains(&(j, i)), "({i},{j}) present without ({j},{i})");
        }
    }
}

#[test]
fn knn_edges_nest_as_k_grows() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..20 {
        let n = rng.random_range(5..12);
        let system = random_system(&mut rng, n);
        for k in 1..n - 1 {
            let a: std::collections::BTreeSet<_> =
                build_knn_graph(&system, k).unwrap().edges().iter().copied().collect();
            let b: std::collections::BTreeSet<_> =
                build_knn_graph(&system, k + 1).unwrap().edges().iter().copied().collect();
            assert!(a.is_subset(&b), "knn({k}) not nested in knn({})", k + 1);
        }
    }
}

#[test]
fn perturbation_is_bit_identical_per_seed() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let system = random_system(&mut rng, 9);
    let g = build_full_graph(&system);
    for mode in [PerturbMode::Drop, PerturbMode::AddDuplicate, PerturbMode::AddNewPair] {
        for fraction in [0.1, 0.35, 0.6] {
            let (a, _) = perturb_graph(&g, mode, fraction, 99).unwrap();
            let (b, _) = perturb_graph(&g, mode, fraction, 99).unwrap();
            assert_eq!(a.edges(), b.edges());
        }
    }
}

#[test]
fn energy_is_monotone_along_relaxation() {
    // replays the descent manually, checking each accepted step
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let potential = PotentialParams::default_for(3);
    for _ in 0..5 {
        let mut system = random_system(&mut rng, 8);
        mark_fixed_bottom(&mut system, 0.25);
        let mut positions = system.positions.clone();
        let mut energy = potential_energy(&positions, &system.atom_types, &potential);
        for _ in 0..200 {
            let f = forces(&positions, &system.atom_types, &potential);
            let mut step = 0.1;
            let mut moved = false;
            for _ in 0..=20 {
                let trial: Vec<Vec3> = positions
                    .iter()
                    .zip(&f)
                    .zip(&system.free_mask)
                    .map(|((p, fi), &free)| if free { *p + fi.scale(step) } else { *p })
                    .collect();
                let e = potential_energy(&trial, &system.atom_types, &potential);
                if e <= energy {
                    assert!(e <= energy);
                    positions = trial;
                    energy = e;
                    moved = true;
                    break;
                }
                step *= 0.5;
            }
            if !moved {
                break;
            }
        }
    }
}

#[test]
fn relaxation_commutes_with_rigid_translation() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let potential = PotentialParams::default_for(3);
    for _ in 0..5 {
        let mut system = random_system(&mut rng, 8);
        mark_fixed_bottom(&mut system, 0.25);
        let inst = relax(&system, &potential, 0.1, 20_000, 1e-4);
        assert!(inst.converged);

        let shift = Vec3::new(3.0, -2.0, 1.5);
        let mut moved = system.clone();
        for p in &mut moved.positions {
            *p += shift;
        }
        let moved_inst = relax(&moved, &potential, 0.1, 20_000, 1e-4);
        assert!(moved_inst.converged);
        for (a, b) in inst.equilibrium_positions.iter().zip(&moved_inst.equilibrium_positions) {
            assert!(((*a + shift) - *b).norm() < 1e-8);
        }
    }
}

#[test]
fn analytic_forces_match_finite_differences_everywhere() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let potential = PotentialParams::default_for(4);
    for _ in 0..5 {
        let system = random_system(&mut rng, 8);
        let f = forces(&system.positions, &system.atom_types, &potential);
        let h = 1e-6;
        for i in 0..system.len() {
            for axis in 0..3 {
                let mut plus = system.positions.clone();
                let mut minus = system.positions.clone();
                let (p, m) = (&mut plus[i], &mut minus[i]);
                match axis {
                    0 => {
                        p.x += h;
                        m.x -= h;
                    }
                    1 => {
                        p.y += h;
                        m.y -= h;
                    }
                    _ => {
                        p.z += h;
                        m.z -= h;
                    }
                }
                let fd = -(potential_energy(&plus, &system.atom_types, &potential)
                    - potential_energy(&minus, &system.atom_types, &potential))
                    / (2.0 * h);
                let analytic = match axis {
                    0 => f[i].x,
                    1 => f[i].y,
                    _ => f[i].z,
                };
                let denom = analytic.abs().max(fd.abs()).max(1e-8);
                assert!(((analytic - fd) / denom).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn converged_instances_satisfy_force_tolerance() {
    let config = DatasetConfig {
        n_instances: 12,
        n_atoms_min: 6,
        n_atoms_max: 12,
        ..DatasetConfig::default()
    };
    let potential = PotentialParams::default_for(config.n_species);
    let ds = generate_dataset(&config, 31).unwrap();
    assert!(ds.instances.len() as f64 >= 0.9 * 12.0);
    for inst in &ds.instances {
        let f = forces(&inst.equilibrium_positions, &inst.system.atom_types, &potential);
        let max_free = f
            .iter()
            .zip(&inst.system.free_mask)
            .filter(|(_, &free)| free)
            .map(|(fi, _)| fi.norm())
            .fold(0.0_f64, f64::max);
        assert!(max_free < config.f_tol, "max free force {max_free}");
    }
}
