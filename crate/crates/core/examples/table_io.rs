//! Writes an embedding table with class names, reads it back and checks the
//! round trip.
//!
//!     cargo run --release --example table_io -- [out_dir]

use std::path::PathBuf;

use mgclip::data::{generate_synthetic, read_table, sidecar_path, write_table, SyntheticConfig};

fn main() -> mgclip::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(std::env::temp_dir);
    let synth = generate_synthetic(&SyntheticConfig::default())?;
    let names = (0..synth.text.len()).map(|c| format!("class_{c}")).collect();
    let text = synth.text.quantize_f32().with_class_names(names)?;
    let image = synth.image.quantize_f32();

    let text_path = dir.join("text.embt");
    let image_path = dir.join("image.embt");
    write_table(&text, &text_path)?;
    write_table(&image, &image_path)?;

    let text_back = read_table(&text_path)?;
    let image_back = read_table(&image_path)?;
    println!("{} -> {} rows, dim {}", text_path.display(), text_back.len(), text_back.dim());
    println!("{} -> {} rows, dim {}", image_path.display(), image_back.len(), image_back.dim());
    println!("sidecar: {}", sidecar_path(&text_path).display());
    println!("text round trip exact: {}", text_back == text);
    println!("image round trip exact: {}", image_back == image);
    Ok(())
}
