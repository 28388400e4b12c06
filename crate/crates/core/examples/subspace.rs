//! How well the text classifier, the visual classifier and both together
//! span the image features after a full run, plus the same analysis for
//! each energy threshold.
//!
//!     cargo run --release --example subspace

use mgclip::data::holdout_split;
use mgclip::protocol::{load_dataset, run_with_cache, MethodVariant, PretrainCache, RunConfig};
use mgclip::subspace::{analyze_subspaces, SubspaceAnalysis};

fn main() -> mgclip::Result<()> {
    let cfg = RunConfig {
        method: MethodVariant::Full,
        ..RunConfig::default()
    };
    let out = run_with_cache(&cfg, &mut PretrainCache::new())?;
    let clf = out.classifier.expect("full method trains a visual classifier");
    let data = load_dataset(&cfg.data)?;
    let (train, _) = holdout_split(&data.labels, cfg.data.test_fraction, cfg.seed);
    let features = out
        .encoder
        .embed_images(&data.raw_image.select_rows(&train), train.iter().map(|&i| data.labels[i]).collect())?;
    let text = out.encoder.embed_texts(&data.raw_text)?.select(clf.class_ids()).vectors().transpose();

    println!("energy,{}", SubspaceAnalysis::CSV_HEADER);
    for energy in [0.8, 0.9, 0.95, 0.99] {
        let a = analyze_subspaces(&features, &text, clf.weights(), energy)?;
        for row in a.csv_rows() {
            println!("{energy},{row}");
        }
    }
    Ok(())
}
