//! Objective-preserving instance symmetries used to diversify training
//! samples that share one baseline.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::env::ffsp::Ffsp;
use crate::env::hcvrp::Hcvrp;
use crate::env::omdcpdp::Omdcpdp;
use crate::mdp::Environment;

/// Index-selectable symmetry transforms. Index 0 is always the identity,
/// and every image has the same optimal objective as the original.
pub trait Augment: Environment {
    fn augment(&self, inst: &Self::Instance, k: usize, seed: u64) -> Self::Instance;
}

/// The k-th of the 8 symmetries of the unit square (4 rotations, then the
/// same 4 after a horizontal flip).
fn dihedral(p: [f64; 2], k: usize) -> [f64; 2] {
    let [mut x, mut y] = p;
    if k % 8 >= 4 {
        x = 1.0 - x;
    }
    for _ in 0..(k % 4) {
        let rotated = [y, 1.0 - x];
        x = rotated[0];
        y = rotated[1];
    }
    [x, y]
}

fn rotate_about_center(p: [f64; 2], angle: f64) -> [f64; 2] {
    let (sin, cos) = angle.sin_cos();
    let x = p[0] - 0.5;
    let y = p[1] - 0.5;
    [0.5 + x * cos - y * sin, 0.5 + x * sin + y * cos]
}

/// Dihedral image for k < 8; past that, the same cycle composed with a
/// small random rotation so sample counts above 8 stay distinct.
fn planar(p: [f64; 2], k: usize, angle: Option<f64>) -> [f64; 2] {
    let q = dihedral(p, k % 8);
    match angle {
        Some(a) => rotate_about_center(q, a),
        None => q,
    }
}

fn extra_angle(k: usize, seed: u64) -> Option<f64> {
    if k < 8 {
        None
    } else {
        let quarter = std::f64::consts::FRAC_PI_4;
        Some(ChaCha8Rng::seed_from_u64(seed).gen_range(-quarter..quarter))
    }
}

impl Augment for Hcvrp {
    fn augment(&self, inst: &Self::Instance, k: usize, seed: u64) -> Self::Instance {
        if k == 0 {
            return inst.clone();
        }
        let angle = extra_angle(k, seed);
        let mut out = inst.clone();
        out.depot = planar(inst.depot, k, angle);
        out.coords = inst.coords.iter().map(|&p| planar(p, k, angle)).collect();
        out
    }
}

impl Augment for Omdcpdp {
    fn augment(&self, inst: &Self::Instance, k: usize, seed: u64) -> Self::Instance {
        if k == 0 {
            return inst.clone();
        }
        let angle = extra_angle(k, seed);
        let mut out = inst.clone();
        out.starts = inst.starts.iter().map(|&p| planar(p, k, angle)).collect();
        out.pickups = inst.pickups.iter().map(|&p| planar(p, k, angle)).collect();
        out.deliveries = inst.deliveries.iter().map(|&p| planar(p, k, angle)).collect();
        out
    }
}

impl Augment for Ffsp {
    /// Relabels machines within each stage; schedules map one-to-one, so
    /// the optimal makespan is untouched.
    fn augment(&self, inst: &Self::Instance, k: usize, seed: u64) -> Self::Instance {
        if k == 0 {
            return inst.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = inst.clone();
        for (stage, &machines) in inst.machines_per_stage.iter().enumerate() {
            let mut perm: Vec<usize> = (0..machines).collect();
            perm.shuffle(&mut rng);
            for job_row in out.proc_times[stage].iter_mut() {
                let original = job_row.clone();
                for (local, &source) in perm.iter().enumerate() {
                    job_row[local] = original[source];
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{dist, ffsp, hcvrp, omdcpdp};
    use crate::oracle;

    #[test]
    fn index_zero_is_the_identity_everywhere() {
        let h = hcvrp::generate(5, 2, 1);
        assert_eq!(Hcvrp.augment(&h, 0, 99), h);
        let o = omdcpdp::generate(4, 2, 2);
        assert_eq!(Omdcpdp.augment(&o, 0, 99), o);
        let f = ffsp::generate(4, 2, &[2, 2], 3);
        assert_eq!(Ffsp.augment(&f, 0, 99), f);
    }

    #[test]
    fn the_eight_dihedral_images_are_distinct() {
        let p = [0.1, 0.3];
        let images: Vec<[f64; 2]> = (0..8).map(|k| dihedral(p, k)).collect();
        for a in 0..8 {
            for b in a + 1..8 {
                assert_ne!(images[a], images[b], "images {a} and {b} collide");
            }
        }
    }

    #[test]
    fn reflections_and_rotations_preserve_pairwise_distances() {
        let points = [[0.12, 0.7], [0.55, 0.25], [0.9, 0.9]];
        for k in [1, 4, 6, 9, 13] {
            let angle = extra_angle(k, 77);
            let mapped: Vec<[f64; 2]> = points.iter().map(|&p| planar(p, k, angle)).collect();
            for i in 0..3 {
                for j in i + 1..3 {
                    let before = dist(points[i], points[j]);
                    let after = dist(mapped[i], mapped[j]);
                    assert!((before - after).abs() < 1e-12, "k={k} pair {i},{j}");
                }
            }
        }
    }

    #[test]
    fn reflection_keeps_the_routing_optimum() {
        let inst = hcvrp::generate(4, 2, 11);
        let flipped = Hcvrp.augment(&inst, 4, 0);
        let base = oracle::solve_hcvrp(&inst).unwrap();
        let image = oracle::solve_hcvrp(&flipped).unwrap();
        assert!((base.objective - image.objective).abs() < 1e-9);
    }

    #[test]
    fn rotation_keeps_the_delivery_optimum() {
        let inst = omdcpdp::generate(3, 2, 21);
        let turned = Omdcpdp.augment(&inst, 10, 5);
        let base = oracle::solve_omdcpdp(&inst).unwrap();
        let image = oracle::solve_omdcpdp(&turned).unwrap();
        assert!((base.objective - image.objective).abs() < 1e-9);
    }

    #[test]
    fn machine_permutation_keeps_the_makespan() {
        let inst = ffsp::generate(3, 2, &[2, 2], 31);
        for k in 1..4 {
            let shuffled = Ffsp.augment(&inst, k, 40 + k as u64);
            let base = oracle::solve_ffsp(&inst).unwrap();
            let image = oracle::solve_ffsp(&shuffled).unwrap();
            assert_eq!(base.objective, image.objective);
        }
    }
}
