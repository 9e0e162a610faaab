//! Finite-difference verification of analytic gradients.
//!
//! Checks run at 64-bit regardless of the training dtype. A check evaluates a
//! scalar-valued function of a set of leaf arrays twice per sampled
//! coordinate (central differences) and compares against the analytic
//! gradient from one backward sweep. The relative error uses the safe
//! denominator `max(|a|, |n|, 1e-8)`.

use ndarray::ArrayD;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Result of one finite-difference comparison.
#[derive(Clone, Debug)]
pub struct CheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
}

/// Compare analytic gradients of `run` against central differences.
///
/// `run(leaves, want_grads)` must return the scalar output and, when asked,
/// one gradient array per leaf. At least `min_coords` coordinates are probed
/// (all of them if the leaves are smaller than that).
pub fn check_scalar_fn(
    leaves: &[ArrayD<f64>],
    mut run: impl FnMut(&[ArrayD<f64>], bool) -> (f64, Vec<ArrayD<f64>>),
    eps: f64,
    min_coords: usize,
    seed: u64,
) -> CheckReport {
    let (_, grads) = run(leaves, true);
    assert_eq!(grads.len(), leaves.len(), "one gradient per leaf");
    let total: usize = leaves.iter().map(|l| l.len()).sum();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);

    // Sample coordinates across leaves, proportionally, at least one per leaf.
    let mut coords: Vec<(usize, usize)> = Vec::new();
    if total <= min_coords {
        for (li, l) in leaves.iter().enumerate() {
            coords.extend((0..l.len()).map(|ci| (li, ci)));
        }
    } else {
        for (li, l) in leaves.iter().enumerate() {
            let take = ((l.len() * min_coords).div_ceil(total)).clamp(1, l.len());
            let mut seen = std::collections::HashSet::new();
            while seen.len() < take {
                seen.insert(rng.gen_range(0..l.len()));
            }
            coords.extend(seen.into_iter().map(|ci| (li, ci)));
        }
        // Hash-set iteration order must not leak into the probe sequence.
        coords.sort_unstable();
    }

    let mut max_rel = 0.0f64;
    let mut work: Vec<ArrayD<f64>> = leaves.to_vec();
    for &(li, ci) in &coords {
        let orig = work[li].as_slice().unwrap()[ci];
        work[li].as_slice_mut().unwrap()[ci] = orig + eps;
        let (f_plus, _) = run(&work, false);
        work[li].as_slice_mut().unwrap()[ci] = orig - eps;
        let (f_minus, _) = run(&work, false);
        work[li].as_slice_mut().unwrap()[ci] = orig;
        let numeric = (f_plus - f_minus) / (2.0 * eps);
        let analytic = grads[li].as_slice().unwrap()[ci];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    CheckReport {
        max_rel_err: max_rel,
        coords_checked: coords.len(),
    }
}

/// Seeded uniform array in `[lo, hi)`, for test inputs.
pub fn seeded_uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> ArrayD<f64> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    ArrayD::from_shape_vec(ndarray::IxDyn(shape), data).unwrap()
}
