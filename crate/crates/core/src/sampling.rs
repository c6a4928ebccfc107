//! Deterministic low-discrepancy sampling used by constant estimation.

/// Van der Corput radical inverse in the given base.
fn radical_inverse(mut index: u64, base: u64) -> f64 {
    let mut result = 0.0;
    let mut fraction = 1.0 / base as f64;
    while index > 0 {
        result += (index % base) as f64 * fraction;
        index /= base;
        fraction /= base as f64;
    }
    result
}

const PRIMES: [u64; 8] = [2, 3, 5, 7, 11, 13, 17, 19];

/// Halton point in [0,1)^dim. `offset` shifts the sequence start so a seed
/// can select a different (still deterministic) sample set.
pub fn halton(index: u64, offset: u64, dim: usize) -> Vec<f64> {
    assert!(dim <= PRIMES.len(), "halton sampling limited to 8 dims");
    (0..dim)
        .map(|d| radical_inverse(index + offset + 1, PRIMES[d]))
        .collect()
}

/// Deterministic direction on the unit sphere in R^dim, from a Halton point
/// pushed through the Box-Muller map coordinate pairs.
pub fn unit_direction(index: u64, offset: u64, dim: usize) -> Vec<f64> {
    let h = halton(index, offset, 2 * dim.div_ceil(2));
    let mut v = Vec::with_capacity(dim);
    for pair in 0..dim.div_ceil(2) {
        let u1 = h[2 * pair].max(1e-12);
        let u2 = h[2 * pair + 1];
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = 2.0 * std::f64::consts::PI * u2;
        v.push(radius * angle.cos());
        if v.len() < dim {
            v.push(radius * angle.sin());
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn halton_is_deterministic_and_in_unit_cube() {
        for i in 0..64 {
            let a = halton(i, 7, 3);
            let b = halton(i, 7, 3);
            assert_eq!(a, b);
            assert!(a.iter().all(|&x| (0.0..1.0).contains(&x)));
        }
    }

    #[test]
    fn unit_directions_have_unit_norm() {
        for i in 0..32 {
            let d = unit_direction(i, 0, 5);
            let n = d.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }
}
