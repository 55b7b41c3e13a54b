// How predictable is the displacement field? Fit the best uniform
// contraction-toward-centroid coefficient per instance and report its MAE.
use drlabel::sim::*;
use drlabel::vec3::Vec3;

fn main() {
    for density in [0.7_f64, 1.0, 1.3] {
        let config = DatasetConfig {
            n_instances: 60,
            n_atoms_min: 8,
            n_atoms_max: 14,
            density,
            ..DatasetConfig::default()
        };
        let ds = generate_dataset(&config, 5).unwrap();
        let mut zero_mae = 0.0;
        let mut oracle_mae = 0.0;
        let mut disp_mean = 0.0;
        let n = ds.instances.len() as f64;
        for inst in &ds.instances {
            let disps = inst.displacements();
            let free = &inst.system.free_mask;
            let centroid = {
                let mut c = Vec3::ZERO;
                for p in &inst.initial_positions {
                    c += *p;
                }
                c.scale(1.0 / inst.initial_positions.len() as f64)
            };
            // least-squares alpha for dp ~ alpha (c - p) over free atoms
            let mut num = 0.0;
            let mut den = 0.0;
            for ((p, d), &f) in inst.initial_positions.iter().zip(&disps).zip(free) {
                if f {
                    let v = centroid - *p;
                    num += v.dot(d);
                    den += v.norm_sq();
                }
            }
            let alpha = if den > 0.0 { num / den } else { 0.0 };
            let mut z = 0.0;
            let mut o = 0.0;
            let mut cnt = 0;
            for ((p, d), &f) in inst.initial_positions.iter().zip(&disps).zip(free) {
                if f {
                    z += d.norm();
                    o += (*d - (centroid - *p).scale(alpha)).norm();
                    cnt += 1;
                }
            }
            zero_mae += z / cnt as f64;
            oracle_mae += o / cnt as f64;
            disp_mean += z / cnt as f64;
        }
        println!(
            "density {density}: zero MAE {:.4}, centroid-fit MAE {:.4} ({:.0}% reduction), mean |dp| {:.3}",
            zero_mae / n,
            oracle_mae / n,
            100.0 * (1.0 - oracle_mae / zero_mae),
            disp_mean / n
        );
    }
}
