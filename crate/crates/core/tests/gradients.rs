mod common;

use common::{encoder_gradient_error, gaussian, max_relative_error, rng, small_encoder, FD_TOLERANCE};
use mgclip::compensation::cosine_ce;
use mgclip::encoder::{Objective, ParamScope};
use mgclip::linalg::Matrix;

fn batch(seed: u64, n: usize) -> (Matrix, Matrix) {
    let mut r = rng(seed);
    (gaussian(&mut r, n, 5), gaussian(&mut r, 4, 4))
}

fn check(objective: Objective<'_>, scope: ParamScope, seeds: std::ops::Range<u64>) {
    for seed in seeds {
        let enc = small_encoder(seed);
        let (img, txt) = batch(100 + seed, 6);
        let err = encoder_gradient_error(&enc, &img, &txt, objective, scope);
        assert!(err < FD_TOLERANCE, "seed {seed} {scope:?}: relative error {err:e}");
    }
}

#[test]
fn contrastive_base_weights_and_log_scale() {
    let labels = [2, 0, 3, 1];
    for seed in 0..3 {
        let enc = small_encoder(seed);
        let (img, txt) = batch(200 + seed, 4);
        let err = encoder_gradient_error(&enc, &img, &txt, Objective::Contrastive { labels: &labels }, ParamScope::Base);
        assert!(err < FD_TOLERANCE, "seed {seed}: {err:e}");
    }
}

#[test]
fn plain_ce_all_classes() {
    let labels = [0, 1, 2, 3, 1, 2];
    let active = [true; 4];
    let objective = Objective::TextCe {
        labels: &labels,
        active: &active,
        alignment_weight: 0.0,
    };
    check(objective, ParamScope::Adapters, 0..3);
    check(objective, ParamScope::Base, 3..5);
}

#[test]
fn masked_ce_ignores_inactive_rows() {
    let labels = [1, 2, 1, 2, 2, 1];
    let active = [false, true, true, false];
    let objective = Objective::TextCe {
        labels: &labels,
        active: &active,
        alignment_weight: 0.0,
    };
    check(objective, ParamScope::Adapters, 0..3);
    check(objective, ParamScope::Base, 3..5);
}

#[test]
fn ce_with_alignment_term() {
    let labels = [3, 2, 3, 2, 3, 2];
    let active = [false, false, true, true];
    for weight in [1.0, 0.3] {
        let objective = Objective::TextCe {
            labels: &labels,
            active: &active,
            alignment_weight: weight,
        };
        check(objective, ParamScope::Adapters, 0..3);
        check(objective, ParamScope::Base, 3..4);
    }
}

#[test]
fn cosine_classifier_ce() {
    for seed in 0..5 {
        let mut r = rng(300 + seed);
        let w = gaussian(&mut r, 5, 4);
        let x = gaussian(&mut r, 7, 5);
        let targets = [0, 1, 2, 3, 0, 2, 1];
        let (_, grad) = cosine_ce(&w, &x, &targets, 16.0).unwrap();
        let (rows, cols) = w.shape();
        let mut f = |p: &[f64]| cosine_ce(&Matrix::new(rows, cols, p.to_vec()).unwrap(), &x, &targets, 16.0).unwrap().0;
        let err = max_relative_error(&mut f, w.data(), grad.data());
        assert!(err < FD_TOLERANCE, "seed {seed}: {err:e}");
    }
}

#[test]
fn inactive_text_rows_receive_no_gradient() {
    // Base-scope text weights only see rows through the active logits, so a
    // text row that is inactive everywhere can change freely.
    let labels = [1, 2, 1];
    let active = [false, true, true, false];
    let enc = small_encoder(9);
    let (img, txt) = batch(9, 3);
    let objective = Objective::TextCe {
        labels: &labels,
        active: &active,
        alignment_weight: 0.0,
    };
    let (loss, _) = mgclip::encoder::batch_objective(&enc, &img, &txt, objective, ParamScope::Base).unwrap();
    let mut moved = txt.clone();
    moved.row_mut(0).iter_mut().for_each(|v| *v += 3.0);
    moved.row_mut(3).iter_mut().for_each(|v| *v -= 2.0);
    let (loss2, _) = mgclip::encoder::batch_objective(&enc, &img, &moved, objective, ParamScope::Base).unwrap();
    assert_eq!(loss, loss2);
}
