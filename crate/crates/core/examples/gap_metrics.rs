//! Modality-gap statistics on the synthetic cone benchmark: the generator's
//! reference embeddings, then a pretrained encoder's view of the same images.
//!
//!     cargo run --release --example gap_metrics

use mgclip::data::{generate_synthetic, holdout_split, SyntheticConfig};
use mgclip::gapmetrics::{measure_gap, relative_delta, GapReport};
use mgclip::protocol::{load_dataset, pretrain_model, RunConfig};

fn main() -> mgclip::Result<()> {
    let synth = generate_synthetic(&SyntheticConfig::default())?;
    let reference = measure_gap(&synth.image, &synth.text)?;

    let cfg = RunConfig::default();
    let data = load_dataset(&cfg.data)?;
    let (train, _) = holdout_split(&data.labels, cfg.data.test_fraction, cfg.seed);
    let enc = pretrain_model(&cfg, &data, &train)?;
    let images = enc.embed_images(&data.raw_image.select_rows(&train), train.iter().map(|&i| data.labels[i]).collect())?;
    let learned = measure_gap(&images, &enc.embed_texts(&data.raw_text)?)?;

    println!("stage,{}", GapReport::CSV_HEADER);
    println!("reference,{}", reference.to_csv_row());
    println!("pretrained,{}", learned.to_csv_row());
    println!(
        "relative change of neg, reference -> pretrained: {:.4}",
        relative_delta(learned.neg, reference.neg)?
    );
    Ok(())
}
