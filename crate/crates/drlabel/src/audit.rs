//! Randomized audits of the core geometric properties: round-trip
//! reversibility, sphere membership, rigid-motion behavior, label
//! uniqueness across graph policies, duplication robustness, and
//! degeneracy detection. Each section reports its worst observed error
//! against a fixed tolerance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{deconstruct_labels, reconstruct_positions, sphere_fit};
use crate::graph::{
    build_full_graph, build_knn_graph, build_radius_graph, perturb_graph, AtomicSystem,
    PerturbMode,
};
use crate::sim::sample_system;
use crate::vec3::{apply_e3, E3Transform, Vec3};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditSection {
    pub name: String,
    pub trials: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditReport {
    pub seed: u64,
    pub requested_trials: usize,
    pub corrupted: bool,
    pub sections: Vec<AuditSection>,
    pub passed: bool,
}

fn section(name: &str, trials: usize, max_error: f64, tolerance: f64) -> AuditSection {
    AuditSection {
        name: name.to_string(),
        trials,
        max_error,
        tolerance,
        passed: max_error <= tolerance,
    }
}

fn random_vec(rng: &mut ChaCha8Rng, scale: f64) -> Vec3 {
    Vec3::new(
        rng.random_range(-scale..scale),
        rng.random_range(-scale..scale),
        rng.random_range(-scale..scale),
    )
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = random_vec(rng, 1.0);
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v.scale(1.0 / n);
        }
    }
}

/// Independent spanning measure: largest |triple product| over all triples,
/// relative to the cube of the largest vector norm.
fn spanning_measure(vectors: &[Vec3]) -> f64 {
    let scale = vectors.iter().map(Vec3::norm).fold(0.0_f64, f64::max);
    if scale == 0.0 {
        return 0.0;
    }
    let mut best = 0.0_f64;
    for a in 0..vectors.len() {
        for b in a + 1..vectors.len() {
            for c in b + 1..vectors.len() {
                let t = vectors[a].dot(&vectors[b].cross(&vectors[c])).abs();
                best = best.max(t);
            }
        }
    }
    best / (scale * scale * scale)
}

fn sample_audit_system(rng: &mut ChaCha8Rng) -> AtomicSystem {
    let n = rng.random_range(6..=12);
    let box_side = (n as f64 / 0.5).cbrt();
    let seed: u64 = rng.random();
    sample_system(n, 3, box_side, 0.75, seed).expect("audit sampling box is feasible")
}

fn random_displacements(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
    (0..n).map(|_| random_vec(rng, 0.3)).collect()
}

/// Runs all property sections with `trials` randomized trials each.
/// `corrupt` deliberately damages one projected magnitude, as a negative
/// control that must fail the reversibility section.
pub fn run_audit(trials: usize, seed: u64, corrupt: bool) -> AuditReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sections = Vec::new();

    // Reversibility: deconstruct then sphere-fit recovers the displacement
    // whenever the projections span 3D.
    {
        let mut max_err = 0.0_f64;
        for trial in 0..trials {
            let dp = random_vec(&mut rng, 0.4);
            let n_dirs = rng.random_range(3..=12);
            let projections = loop {
                let dirs: Vec<Vec3> = (0..n_dirs).map(|_| random_unit(&mut rng)).collect();
                let projs: Vec<Vec3> = dirs.iter().map(|d| d.scale(dp.dot(d))).collect();
                if spanning_measure(&projs) > 1e-3 {
                    break projs;
                }
            };
            let mut projections = projections;
            if corrupt && trial == 0 {
                projections[0] += Vec3::new(0.05, 0.0, 0.0);
            }
            let fit = sphere_fit(&projections).expect("non-empty");
            max_err = max_err.max((fit.displacement - dp).norm());
        }
        sections.push(section("reversibility", trials, max_err, 1e-9));
    }

    // Sphere membership: every exact projection x = (dp . d) d satisfies
    // x.x = 2 x.(dp/2).
    {
        let mut max_err = 0.0_f64;
        for _ in 0..trials {
            let dp = random_vec(&mut rng, 0.5);
            let d = random_unit(&mut rng);
            let x = d.scale(dp.dot(&d));
            let lhs = x.norm_sq();
            let rhs = 2.0 * x.dot(&dp.scale(0.5));
            max_err = max_err.max((lhs - rhs).abs());
        }
        sections.push(section("sphere-membership", trials, max_err, 1e-12));
    }

    // Rigid motions: magnitudes invariant, reconstruction equivariant.
    {
        let n_sys = (trials / 10).clamp(1, 200);
        let mut max_mag_err = 0.0_f64;
        let mut max_rec_err = 0.0_f64;
        for _ in 0..n_sys {
            let system = sample_audit_system(&mut rng);
            let disps = random_displacements(&mut rng, system.len());
            let graph = build_full_graph(&system);
            let mags = deconstruct_labels(&system.positions, &disps, &graph).expect("valid");
            let rec = reconstruct_positions(&mags, &graph, &system.positions).expect("valid");
            for _ in 0..10 {
                let reflect = rng.random_bool(0.5);
                let t = E3Transform::sample(&mut rng, reflect, 4.0);
                let moved_pos = apply_e3(&t, &system.positions);
                let moved_disp: Vec<Vec3> = disps.iter().map(|d| t.apply_linear(d)).collect();
                let moved_mags =
                    deconstruct_labels(&moved_pos, &moved_disp, &graph).expect("valid");
                for ((_, _, a), (_, _, b)) in mags.iter().zip(moved_mags.iter()) {
                    max_mag_err = max_mag_err.max((a - b).abs());
                }
                let moved_rec =
                    reconstruct_positions(&moved_mags, &graph, &moved_pos).expect("valid");
                let expected = apply_e3(&t, &rec.positions);
                for (got, want) in moved_rec.positions.iter().zip(&expected) {
                    max_rec_err = max_rec_err.max((*got - *want).norm());
                }
            }
        }
        sections.push(section("deconstruction-invariance", n_sys * 10, max_mag_err, 1e-10));
        sections.push(section("reconstruction-equivariance", n_sys * 10, max_rec_err, 1e-9));
    }

    // Uniqueness: a directed edge shared by radius, k-NN, and full graphs
    // carries a bit-identical magnitude in each.
    {
        let n_sys = (trials / 10).clamp(1, 200);
        let mut max_err = 0.0_f64;
        for _ in 0..n_sys {
            let system = sample_audit_system(&mut rng);
            let disps = random_displacements(&mut rng, system.len());
            let full = build_full_graph(&system);
            let radius = build_radius_graph(&system, 2.0, None).expect("positive cutoff");
            let k = 4.min(system.len() - 1);
            let knn = build_knn_graph(&system, k).expect("valid k");
            let m_full = deconstruct_labels(&system.positions, &disps, &full).expect("valid");
            for graph in [&radius, &knn] {
                let m = deconstruct_labels(&system.positions, &disps, graph).expect("valid");
                for (i, j, value) in m.iter() {
                    let reference = m_full.get(i, j).expect("full graph covers all pairs");
                    let diff = (value - reference).abs();
                    max_err = max_err.max(diff);
                }
            }
        }
        sections.push(section("uniqueness-across-policies", n_sys, max_err, 0.0));
    }

    // Duplication robustness: duplicating exact projections leaves the
    // reconstruction unchanged.
    {
        let n_sys = (trials / 10).clamp(1, 200);
        let mut max_err = 0.0_f64;
        for _ in 0..n_sys {
            let system = sample_audit_system(&mut rng);
            let disps = random_displacements(&mut rng, system.len());
            let graph = build_full_graph(&system);
            let mags = deconstruct_labels(&system.positions, &disps, &graph).expect("valid");
            let base = reconstruct_positions(&mags, &graph, &system.positions).expect("valid");
            let dup_seed: u64 = rng.random();
            let (dup_graph, _) =
                perturb_graph(&graph, PerturbMode::AddDuplicate, 0.6, dup_seed).expect("valid");
            let dup = reconstruct_positions(&mags, &dup_graph, &system.positions).expect("valid");
            for (a, b) in base.positions.iter().zip(&dup.positions) {
                max_err = max_err.max((*a - *b).norm());
            }
        }
        sections.push(section("duplication-robustness", n_sys, max_err, 1e-9));
    }

    // Degeneracy detection: projections of rank < 3 must raise the flag;
    // well-spanning sets must not. Rank is checked independently through
    // triple products.
    {
        let mut mismatches = 0usize;
        let n_checks = trials.clamp(1, 2000);
        for trial in 0..n_checks {
            let deficient = trial % 2 == 0;
            let projections: Vec<Vec3> = if deficient {
                // directions confined to a random plane (or line)
                let a = random_unit(&mut rng);
                let b = random_unit(&mut rng);
                let count = rng.random_range(1..=5);
                (0..count)
                    .map(|_| {
                        let c = a.scale(rng.random_range(-1.0..1.0))
                            + b.scale(rng.random_range(-1.0..1.0));
                        c.scale(rng.random_range(0.1..0.5))
                    })
                    .collect()
            } else {
                let dp = random_vec(&mut rng, 0.4);
                loop {
                    let projs: Vec<Vec3> = (0..rng.random_range(3..=8))
                        .map(|_| {
                            let d = random_unit(&mut rng);
                            d.scale(dp.dot(&d))
                        })
                        .collect();
                    if spanning_measure(&projs) > 1e-3 {
                        break projs;
                    }
                }
            };
            let independent_rank_deficient = spanning_measure(&projections) < 1e-9;
            let fit = sphere_fit(&projections).expect("non-empty");
            if independent_rank_deficient && !fit.degenerate {
                mismatches += 1;
            }
            if !independent_rank_deficient && fit.degenerate {
                mismatches += 1;
            }
        }
        sections.push(section("degeneracy-detection", n_checks, mismatches as f64, 0.0));
    }

    let passed = sections.iter().all(|s| s.passed);
    AuditReport { seed, requested_trials: trials, corrupted: corrupt, sections, passed }
}

/// Convenience check used by tests: a tiny deterministic audit.
pub fn quick_audit_passes(seed: u64) -> bool {
    run_audit(200, seed, false).passed
}
