//! Noisy-node augmentation: interpolate the initial positions toward the
//! equilibrium and add isotropic Gaussian noise; the node target becomes
//! the residual displacement to the (unchanged) equilibrium.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::dataset::DatasetRecord;
use crate::sim::RelaxationInstance;
use crate::vec3::Vec3;

/// One interpolation coefficient per instance, applied only to atoms with a
/// non-zero displacement label. Atoms with `dp* = 0` (fixed atoms in
/// particular) are untouched. The identity `noisy_initial + new_target =
/// equilibrium` holds exactly by construction.
fn perturb_positions<R: Rng>(
    initial: &[Vec3],
    equilibrium: &[Vec3],
    alpha: f64,
    sigma: f64,
    rng: &mut R,
) -> Vec<Vec3> {
    initial
        .iter()
        .zip(equilibrium)
        .map(|(p0, ps)| {
            let dp = *ps - *p0;
            if dp == Vec3::ZERO {
                *p0
            } else {
                let noise = Vec3::new(
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                )
                .scale(sigma);
                *p0 + dp.scale(alpha) + noise
            }
        })
        .collect()
}

/// Augments an instance with a freshly drawn `alpha ~ U[0, 1]`.
pub fn noisy_augment<R: Rng>(
    instance: &RelaxationInstance,
    sigma: f64,
    rng: &mut R,
) -> RelaxationInstance {
    let alpha = rng.random_range(0.0..=1.0);
    noisy_augment_with_alpha(instance, alpha, sigma, rng)
}

/// Augmentation with a caller-chosen interpolation coefficient.
pub fn noisy_augment_with_alpha<R: Rng>(
    instance: &RelaxationInstance,
    alpha: f64,
    sigma: f64,
    rng: &mut R,
) -> RelaxationInstance {
    assert!(sigma >= 0.0, "sigma must be non-negative");
    let noisy = perturb_positions(
        &instance.initial_positions,
        &instance.equilibrium_positions,
        alpha,
        sigma,
        rng,
    );
    let mut out = instance.clone();
    out.system.positions = noisy.clone();
    out.initial_positions = noisy;
    out
}

/// Record-level augmentation: same transformation, keeping the stored edge
/// set (directions and labels are recomputed from the noisy positions by
/// downstream consumers).
pub fn noisy_augment_record<R: Rng>(
    record: &DatasetRecord,
    sigma: f64,
    rng: &mut R,
) -> DatasetRecord {
    let alpha = rng.random_range(0.0..=1.0);
    let noisy = perturb_positions(
        &record.initial_positions,
        &record.equilibrium_positions,
        alpha,
        sigma,
        rng,
    );
    let mut out = record.clone();
    out.initial_positions = noisy;
    out
}
