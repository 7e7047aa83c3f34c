use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::fieldgrid::{ComplexField, Grid, C64};

/// Sum of a few random Gaussian packets, well resolved on the grid and
/// negligible at the box faces.
pub fn smooth_random_field(grid: &Grid, seed: u64) -> ComplexField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = grid.length();
    let dim = grid.dim();
    let kmax = 0.05 * grid.frequency_step() * grid.points() as f64;
    let packets: Vec<_> = (0..4)
        .map(|_| {
            let mut c = [0.0; 3];
            let mut k = [0.0; 3];
            for a in 0..dim {
                c[a] = rng.gen_range(-0.1 * l..0.1 * l);
                k[a] = rng.gen_range(-kmax..kmax);
            }
            let amp = C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let width = rng.gen_range(0.03 * l..0.045 * l).max(3.0 * grid.spacing());
            (c, k, amp, width)
        })
        .collect();
    ComplexField::from_fn(grid, |x| {
        packets
            .iter()
            .map(|(c, k, amp, w)| {
                let mut r2 = 0.0;
                let mut ph = 0.0;
                for a in 0..3 {
                    r2 += (x[a] - c[a]).powi(2);
                    ph += k[a] * x[a];
                }
                amp * C64::from_polar((-r2 / (2.0 * w * w)).exp(), ph)
            })
            .sum()
    })
}
