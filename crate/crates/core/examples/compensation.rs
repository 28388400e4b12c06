//! Text head alone against the text + visual ensemble after a full
//! class-incremental run, across a sweep of beta.
//!
//!     cargo run --release --example compensation

use mgclip::compensation::{ensemble_predict, EnsembleConfig};
use mgclip::data::holdout_split;
use mgclip::encoder::argmax;
use mgclip::protocol::{load_dataset, run_with_cache, MethodVariant, PretrainCache, RunConfig};

fn main() -> mgclip::Result<()> {
    let cfg = RunConfig {
        method: MethodVariant::Full,
        ..RunConfig::default()
    };
    let out = run_with_cache(&cfg, &mut PretrainCache::new())?;
    let clf = out.classifier.expect("full method trains a visual classifier");

    let data = load_dataset(&cfg.data)?;
    let (_, test) = holdout_split(&data.labels, cfg.data.test_fraction, cfg.seed);
    let raw = data.raw_image.select_rows(&test);
    let labels: Vec<usize> = test.iter().map(|&i| data.labels[i]).collect();
    let texts = out.encoder.embed_texts(&data.raw_text)?;
    let accuracy = |scores: &mgclip::linalg::Matrix| {
        let hits = (0..labels.len())
            .filter(|&i| texts.labels()[argmax(scores.row(i))] == labels[i])
            .count();
        hits as f64 / labels.len() as f64
    };

    println!("classes in visual head: {:?}", clf.class_ids());
    println!("text head only: {:.4}", accuracy(&out.encoder.classify_text(&raw, &texts, None)?));
    for beta in [0.0, 0.5, 1.0, 2.0, 4.0, 8.0, 1e6] {
        let scores = ensemble_predict(&out.encoder, &clf, &raw, &texts, &EnsembleConfig { beta })?;
        println!("beta {beta:>9}: {:.4}", accuracy(&scores));
    }
    Ok(())
}
