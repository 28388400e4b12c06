//! Numerical checks of two facts about classifiers on rank-deficient
//! features: directions orthogonal to the feature span never change the
//! loss, and a text matrix of lower rank than the best classifier is at least
//! the tail singular energy away from it.
//!
//!     cargo run --release --example bounds -- [trials]

use mgclip::data::{EmbeddingTable, Modality};
use mgclip::linalg::Matrix;
use mgclip::subspace::{fit_linear_classifier, random_verification, verify_misalignment_bound, verify_orthogonal_irrelevance};

fn main() -> mgclip::Result<()> {
    // Features confined to the first two axes of R^4.
    let x = Matrix::from_rows(&[
        vec![1.0, 0.0, 0.0, 0.0],
        vec![0.0, 1.0, 0.0, 0.0],
        vec![0.6, 0.8, 0.0, 0.0],
        vec![-0.8, 0.6, 0.0, 0.0],
    ])?;
    let features = EmbeddingTable::new(x, vec![0, 1, 0, 1], Modality::Image)?;
    let mut w = fit_linear_classifier(&features, 2, 200, 0.5)?;
    w.row_mut(3)[0] += 5.0;
    let irr = verify_orthogonal_irrelevance(&w, &features)?;
    println!(
        "orthogonal part norm {:.3}, loss {:.6} vs projected {:.6}, holds: {}",
        irr.perp_norm,
        irr.loss_full,
        irr.loss_parallel,
        irr.holds()
    );

    let w_opt = Matrix::from_diag(&[3.0, 2.0, 1.0]);
    let t = Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 0.0], vec![0.0, 0.0, 0.0]])?;
    let b = verify_misalignment_bound(&t, &w_opt)?;
    println!(
        "rank {} text vs rank {} optimum: error {:.3} >= bound {:.3} (best {:.3}), holds: {}",
        b.r,
        b.r_prime,
        b.achieved_error,
        b.lower_bound,
        b.optimal_error,
        b.holds()
    );

    let trials = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(100);
    let sweep = random_verification(trials, 0)?;
    println!("{}", serde_json::to_string_pretty(&sweep)?);
    Ok(())
}
