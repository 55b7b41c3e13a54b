//! Synthetic relaxation data: random atom clusters relaxed under a
//! species-pair harmonic potential by gradient descent with backtracking.
//! Stand-in for first-principles relaxation at desk scale.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{AtomicSystem, GraphError};
use crate::vec3::Vec3;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("sampling exhausted after {attempts} rejected attempts")]
    SamplingExhausted { attempts: usize },
    #[error("invalid potential: {0}")]
    InvalidPotential(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("only {converged}/{attempted} instances converged (need >= 90%)")]
    InsufficientConverged { converged: usize, attempted: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

const MAX_SAMPLING_REJECTS: usize = 100_000;

/// Species-pair harmonic potential. Pairs closer than `cutoff` contribute
/// `0.5 * k * (|p_i - p_j| - r0)^2`; `r0` and `k` depend symmetrically on
/// the two species.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PotentialParams {
    pub n_species: usize,
    /// Flattened symmetric tables, indexed `s * n_species + t`.
    pub r0: Vec<f64>,
    pub k: Vec<f64>,
    pub cutoff: f64,
}

impl PotentialParams {
    pub fn new(n_species: usize, r0: Vec<f64>, k: Vec<f64>, cutoff: f64) -> Result<Self, SimError> {
        if r0.len() != n_species * n_species || k.len() != n_species * n_species {
            return Err(SimError::InvalidPotential(format!(
                "tables must have {} entries",
                n_species * n_species
            )));
        }
        let r0_max = r0.iter().cloned().fold(0.0_f64, f64::max);
        if r0.iter().any(|&v| v <= 0.0) || k.iter().any(|&v| v <= 0.0) {
            return Err(SimError::InvalidPotential("r0 and k must be positive".into()));
        }
        if cutoff <= r0_max {
            return Err(SimError::InvalidPotential(format!(
                "cutoff {cutoff} must exceed max r0 {r0_max}"
            )));
        }
        Ok(PotentialParams { n_species, r0, k, cutoff })
    }

    /// Default tables: `r0(s,t) = 0.9 + 0.05 (s + t)`, `k(s,t) = 1 + 0.1 |s - t|`,
    /// cutoff 8.0. Species-dependent bond lengths keep the relaxed geometry
    /// varied. The default cutoff covers the whole sampling box of the
    /// default dataset configs: a hard cutoff inside the cluster makes the
    /// energy jump when a pair crosses the shell, which stalls backtracking
    /// descent.
    pub fn default_for(n_species: usize) -> Self {
        let mut r0 = vec![0.0; n_species * n_species];
        let mut k = vec![0.0; n_species * n_species];
        for s in 0..n_species {
            for t in 0..n_species {
                r0[s * n_species + t] = 0.9 + 0.05 * (s + t) as f64;
                k[s * n_species + t] = 1.0 + 0.1 * (s as f64 - t as f64).abs();
            }
        }
        PotentialParams { n_species, r0, k, cutoff: 8.0 }
    }

    pub fn r0_for(&self, s: u32, t: u32) -> f64 {
        self.r0[s as usize * self.n_species + t as usize]
    }

    pub fn k_for(&self, s: u32, t: u32) -> f64 {
        self.k[s as usize * self.n_species + t as usize]
    }
}

/// One training record: a system, its initial and relaxed positions, and
/// the relaxed energy. `converged` implies the max free-atom force norm is
/// below the tolerance used during relaxation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RelaxationInstance {
    pub system: AtomicSystem,
    pub initial_positions: Vec<Vec3>,
    pub equilibrium_positions: Vec<Vec3>,
    pub equilibrium_energy: f64,
    pub converged: bool,
    pub steps: usize,
}

impl RelaxationInstance {
    /// Displacement labels `p* - p0`.
    pub fn displacements(&self) -> Vec<Vec3> {
        self.initial_positions
            .iter()
            .zip(&self.equilibrium_positions)
            .map(|(p0, ps)| *ps - *p0)
            .collect()
    }
}

/// Rejection-samples `n_atoms` positions uniformly in `[0, box]^3` with
/// pairwise separation at least `min_sep`; species uniform in
/// `0..n_species`. All atoms start free. Deterministic per seed.
pub fn sample_system(
    n_atoms: usize,
    n_species: usize,
    box_side: f64,
    min_sep: f64,
    seed: u64,
) -> Result<AtomicSystem, SimError> {
    if n_atoms < 2 {
        return Err(SimError::InvalidConfig("need at least 2 atoms".into()));
    }
    if min_sep <= 0.0 || box_side <= 0.0 {
        return Err(SimError::InvalidConfig("box and min_sep must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut positions: Vec<Vec3> = Vec::with_capacity(n_atoms);
    let mut rejects = 0usize;
    while positions.len() < n_atoms {
        let candidate = Vec3::new(
            rng.random_range(0.0..box_side),
            rng.random_range(0.0..box_side),
            rng.random_range(0.0..box_side),
        );
        if positions.iter().all(|p| (*p - candidate).norm() >= min_sep) {
            positions.push(candidate);
        } else {
            rejects += 1;
            if rejects >= MAX_SAMPLING_REJECTS {
                return Err(SimError::SamplingExhausted { attempts: rejects });
            }
        }
    }
    let atom_types: Vec<u32> = (0..n_atoms).map(|_| rng.random_range(0..n_species as u32)).collect();
    Ok(AtomicSystem::new(atom_types, positions, vec![true; n_atoms])?)
}

/// Marks the lowest-z `fraction` of atoms as fixed, mirroring sub-surface
/// slab atoms held frozen during relaxation.
pub fn mark_fixed_bottom(system: &mut AtomicSystem, fraction: f64) {
    let n = system.len();
    let n_fixed = (fraction * n as f64).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        system.positions[a]
            .z
            .partial_cmp(&system.positions[b].z)
            .expect("finite z")
            .then(a.cmp(&b))
    });
    for &idx in order.iter().take(n_fixed) {
        system.free_mask[idx] = false;
    }
}

/// Total harmonic pair energy over in-cutoff pairs.
pub fn potential_energy(positions: &[Vec3], species: &[u32], params: &PotentialParams) -> f64 {
    let n = positions.len();
    let mut energy = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let dist = (positions[i] - positions[j]).norm();
            if dist < params.cutoff {
                let r0 = params.r0_for(species[i], species[j]);
                let k = params.k_for(species[i], species[j]);
                let stretch = dist - r0;
                energy += 0.5 * k * stretch * stretch;
            }
        }
    }
    energy
}

/// Analytic forces (negative energy gradient) on every atom, fixed atoms
/// included; callers zero fixed atoms where needed.
pub fn forces(positions: &[Vec3], species: &[u32], params: &PotentialParams) -> Vec<Vec3> {
    let n = positions.len();
    let mut out = vec![Vec3::ZERO; n];
    for i in 0..n {
        for j in i + 1..n {
            let diff = positions[i] - positions[j];
            let dist = diff.norm();
            if dist < params.cutoff && dist > 0.0 {
                let r0 = params.r0_for(species[i], species[j]);
                let k = params.k_for(species[i], species[j]);
                // dE/dp_i = k (dist - r0) * diff / dist; force is the negative
                let f = diff.scale(-k * (dist - r0) / dist);
                out[i] += f;
                out[j] -= f;
            }
        }
    }
    out
}

fn max_free_force_norm(forces: &[Vec3], free_mask: &[bool]) -> f64 {
    forces
        .iter()
        .zip(free_mask)
        .filter(|(_, &free)| free)
        .map(|(f, _)| f.norm())
        .fold(0.0, f64::max)
}

/// Gradient descent on free atoms with per-step backtracking: a step that
/// raises the energy is halved up to 20 times; if it still raises the
/// energy, the run stops unconverged. Energy is monotonically
/// non-increasing along the accepted trajectory.
pub fn relax(
    system: &AtomicSystem,
    params: &PotentialParams,
    step_size: f64,
    max_steps: usize,
    f_tol: f64,
) -> RelaxationInstance {
    assert!(step_size > 0.0, "step_size must be positive");
    let species = &system.atom_types;
    let free = &system.free_mask;
    let initial = system.positions.clone();
    let mut positions = initial.clone();
    let mut energy = potential_energy(&positions, species, params);
    let mut steps = 0usize;
    let mut converged = false;

    for _ in 0..max_steps {
        let f = forces(&positions, species, params);
        if max_free_force_norm(&f, free) < f_tol {
            converged = true;
            break;
        }
        let mut step = step_size;
        let mut accepted = false;
        for _ in 0..=20 {
            let trial: Vec<Vec3> = positions
                .iter()
                .zip(&f)
                .zip(free)
                .map(|((p, fi), &is_free)| if is_free { *p + fi.scale(step) } else { *p })
                .collect();
            let trial_energy = potential_energy(&trial, species, params);
            if trial_energy <= energy {
                positions = trial;
                energy = trial_energy;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        steps += 1;
    }
    if !converged {
        let f = forces(&positions, species, params);
        converged = max_free_force_norm(&f, free) < f_tol;
    }

    let mut relaxed_system = system.clone();
    relaxed_system.positions = initial.clone();
    RelaxationInstance {
        system: relaxed_system,
        initial_positions: initial,
        equilibrium_positions: positions,
        equilibrium_energy: energy,
        converged,
        steps,
    }
}

/// Generation settings for a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub n_instances: usize,
    pub n_atoms_min: usize,
    pub n_atoms_max: usize,
    pub n_species: usize,
    /// Atoms per unit volume used to size the sampling box.
    pub density: f64,
    pub min_sep: f64,
    /// Fraction of atoms (lowest z) held fixed.
    pub fixed_fraction: f64,
    pub step_size: f64,
    pub max_steps: usize,
    pub f_tol: f64,
    /// Standard deviation of the Gaussian kick applied to a relaxed
    /// template to produce the instance's initial state. Zero falls back to
    /// using the uniform sample itself as the initial state, which yields
    /// large collapse-style displacements instead of local adjustments.
    pub init_sigma: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_instances: 3000,
            n_atoms_min: 8,
            n_atoms_max: 20,
            n_species: 4,
            density: 1.0,
            min_sep: 0.75,
            fixed_fraction: 0.25,
            step_size: 0.1,
            max_steps: 20_000,
            f_tol: 1e-4,
            init_sigma: 0.25,
        }
    }
}

/// Output of dataset generation: converged instances plus counts of what
/// was attempted and excluded.
#[derive(Debug)]
pub struct GeneratedDataset {
    pub instances: Vec<RelaxationInstance>,
    pub attempted: usize,
    pub non_converged: usize,
}

impl GeneratedDataset {
    pub fn mean_free_displacement(&self) -> f64 {
        let mut sum = 0.0;
        let mut count = 0usize;
        for inst in &self.instances {
            for (d, &free) in inst.displacements().iter().zip(&inst.system.free_mask) {
                if free {
                    sum += d.norm();
                    count += 1;
                }
            }
        }
        if count == 0 {
            0.0
        } else {
            sum / count as f64
        }
    }
}

/// Generates `n_instances` independent relaxation instances. Non-converged
/// runs are excluded and counted; fails if fewer than 90% converge.
///
/// With `init_sigma > 0` each instance starts from a Gaussian kick of a
/// relaxed template cluster, so displacement labels are local adjustments
/// of the kind a structure-to-equilibrium predictor faces, instead of
/// whole-cloud collapses.
pub fn generate_dataset(config: &DatasetConfig, seed: u64) -> Result<GeneratedDataset, SimError> {
    if config.n_atoms_min < 2 || config.n_atoms_max < config.n_atoms_min {
        return Err(SimError::InvalidConfig("bad atom count range".into()));
    }
    if !(0.0..=1.0).contains(&config.fixed_fraction) {
        return Err(SimError::InvalidConfig("fixed_fraction outside [0, 1]".into()));
    }
    if config.init_sigma < 0.0 {
        return Err(SimError::InvalidConfig("init_sigma must be non-negative".into()));
    }
    let potential = PotentialParams::default_for(config.n_species);
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut instances = Vec::with_capacity(config.n_instances);
    let mut non_converged = 0usize;
    for _ in 0..config.n_instances {
        let sub_seed: u64 = master.random();
        let n_atoms = master.random_range(config.n_atoms_min..=config.n_atoms_max);
        let box_side = (n_atoms as f64 / config.density).cbrt();
        let mut system = sample_system(n_atoms, config.n_species, box_side, config.min_sep, sub_seed)?;
        mark_fixed_bottom(&mut system, config.fixed_fraction);
        let mut start = system.clone();
        if config.init_sigma > 0.0 {
            let template =
                relax(&system, &potential, config.step_size, config.max_steps, config.f_tol);
            if !template.converged {
                non_converged += 1;
                continue;
            }
            start.positions = kick_positions(
                &template.equilibrium_positions,
                config.init_sigma,
                &mut master,
            );
        }
        let instance = relax(&start, &potential, config.step_size, config.max_steps, config.f_tol);
        if instance.converged {
            instances.push(instance);
        } else {
            non_converged += 1;
        }
    }
    let attempted = config.n_instances;
    if (instances.len() as f64) < 0.9 * attempted as f64 {
        return Err(SimError::InsufficientConverged { converged: instances.len(), attempted });
    }
    Ok(GeneratedDataset { instances, attempted, non_converged })
}

/// Gaussian position kick, resampled until no pair collapses below a safe
/// separation.
fn kick_positions(positions: &[Vec3], sigma: f64, rng: &mut ChaCha8Rng) -> Vec<Vec3> {
    use rand_distr::StandardNormal;
    'attempt: for _ in 0..100 {
        let kicked: Vec<Vec3> = positions
            .iter()
            .map(|p| {
                *p + Vec3::new(
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                )
                .scale(sigma)
            })
            .collect();
        for (i, p) in kicked.iter().enumerate() {
            for q in kicked.iter().skip(i + 1) {
                if (*p - *q).norm() < 0.3 {
                    continue 'attempt;
                }
            }
        }
        return kicked;
    }
    // give up on the safety margin; the relaxation copes with close pairs
    positions.to_vec()
}
