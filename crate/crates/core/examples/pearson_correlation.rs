//! Pearson correlation with a two-sided Student-t p-value between
//! benchmark accuracies and downstream scores of four encoders.
//!
//! `cargo run --example pearson_correlation`

use tedkit::stats::pearson;

fn main() -> tedkit::Result<()> {
    let benchmark = [53.62, 55.37, 55.31, 56.81];
    let downstream = [65.13, 70.59, 68.70, 77.94];
    let c = pearson(&benchmark, &downstream)?;
    println!("{c}");
    print!("{}", c.to_record());
    Ok(())
}
