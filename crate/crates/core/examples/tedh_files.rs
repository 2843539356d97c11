//! Writes hidden states to a TEDH file, reads them back, and shows how a
//! damaged header is reported.
//!
//! `cargo run --example tedh_files`

use tedkit::encoder::{text_hash, HiddenStateSource, ToyEncoder, ToyEncoderConfig};
use tedkit::io::tedh::{decode, encode, read_tedh, write_tedh};

fn main() -> tedkit::Result<()> {
    let encoder = ToyEncoder::new(ToyEncoderConfig {
        layers: 4,
        dim: 16,
        max_tokens: 12,
        ..ToyEncoderConfig::default()
    })?;
    let text = "two dogs share a stick";
    let h = encoder.encode(text)?;

    let dir = std::env::temp_dir().join("tedkit-example");
    std::fs::create_dir_all(&dir).map_err(|e| tedkit::Error::io("creating temp dir", e))?;
    let path = dir.join(format!("{}.tedh", text_hash(text)));
    write_tedh(&h, &path)?;
    let back = read_tedh(&path)?;
    println!("wrote {} ({} bytes)", path.display(), encode(&h)?.len());
    println!("round trip identical: {}", back == h);
    for (k, v) in back.meta() {
        println!("  {k} = {v}");
    }

    let mut bytes = encode(&h)?;
    bytes[0] = b'X';
    match decode(&bytes) {
        Ok(_) => println!("corruption went unnoticed"),
        Err(e) => println!("corrupted magic -> {} ({e})", e.code()),
    }
    Ok(())
}
