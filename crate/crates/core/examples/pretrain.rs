//! Contrastive pretraining of the toy dual encoder, with a checkpoint round
//! trip at the end.
//!
//!     cargo run --release --example pretrain -- [config.toml]

use mgclip::data::holdout_split;
use mgclip::encoder::{load_checkpoint, save_checkpoint};
use mgclip::gapmetrics::measure_gap;
use mgclip::protocol::{load_dataset, pretrain_model, RunConfig};

fn main() -> mgclip::Result<()> {
    let cfg = match std::env::args().nth(1) {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let data = load_dataset(&cfg.data)?;
    let (train, test) = holdout_split(&data.labels, cfg.data.test_fraction, cfg.seed);
    let enc = pretrain_model(&cfg, &data, &train)?;

    let texts = enc.embed_texts(&data.raw_text)?;
    let labels: Vec<usize> = test.iter().map(|&i| data.labels[i]).collect();
    let images = enc.embed_images(&data.raw_image.select_rows(&test), labels.clone())?;
    let gap = measure_gap(&images, &texts)?;
    let scores = enc.classify_text(&data.raw_image.select_rows(&test), &texts, None)?;
    let correct = (0..labels.len())
        .filter(|&i| mgclip::encoder::argmax(scores.row(i)) == labels[i])
        .count();
    println!("logit scale {:.3}", enc.logit_scale);
    println!("held-out pos {:.4} neg {:.4}", gap.pos, gap.neg);
    println!("zero-shot accuracy {:.4}", correct as f64 / labels.len() as f64);

    let stem = std::env::temp_dir().join("mgclip-pretrained");
    save_checkpoint(&stem, &enc, None)?;
    let back = load_checkpoint(&stem)?;
    println!("checkpoint {} reloads identically: {}", stem.display(), back.encoder == enc);
    Ok(())
}
