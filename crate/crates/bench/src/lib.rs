//! Fixed workloads shared by the benchmarks.

use vcplm::lp::PinballProblem;
use vcplm::model::uniform_grid;
use vcplm::simbench::{generate, replication_rng};
use vcplm::{Dataset, ErrorDist};

pub const SEED: u64 = 42;

/// One replication of a simulation design with normal errors.
pub fn design(example: u8, n: usize) -> Dataset {
    generate(example, n, &ErrorDist::normal(), &mut replication_rng(SEED, 0)).expect("built-in design")
}

/// Median regression of the design-1 response on an intercept and `z`.
pub fn median_problem(n: usize) -> PinballProblem {
    let d = design(1, n);
    let z = d.z();
    let mut prob = PinballProblem::with_capacity(1 + z.ncols(), n);
    let mut row = vec![1.0; 1 + z.ncols()];
    for (i, y) in d.y().iter().enumerate() {
        for j in 0..z.ncols() {
            row[1 + j] = z[(i, j)];
        }
        prob.push_row(&row, *y, 0.5, 1.0).expect("finite row");
    }
    prob
}

pub fn output_grid() -> Vec<f64> {
    uniform_grid(0.0, 1.0, 50)
}
