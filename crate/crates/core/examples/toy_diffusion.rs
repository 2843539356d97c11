//! Jointly trains a toy conditional denoiser and learnable fusion weights,
//! freezes the weights part way, and compares against a run whose
//! conditions are drawn independently of the data.
//!
//! `cargo run --release --example toy_diffusion -- 5000 3000`

use tedkit::diffusion::{select_captions, train_joint, trajectory_report, ConditioningMode, ToyDiffConfig};
use tedkit::encoder::{ToyEncoder, ToyEncoderConfig};
use tedkit::toygen::{generate, ToyCorpusConfig};

fn main() -> tedkit::Result<()> {
    let mut args = std::env::args().skip(1).map(|s| s.parse::<u64>().ok());
    let steps = args.next().flatten().unwrap_or(5000);
    let freeze = args.next().flatten().unwrap_or(steps * 3 / 5);
    let corpus = generate(&ToyCorpusConfig::default())?;
    let captions: Vec<String> = corpus.pairs.into_iter().map(|p| p.caption_a).collect();
    let captions = select_captions(&captions, 64, 0);
    let encoder = ToyEncoder::new(ToyEncoderConfig::default())?;

    let cfg = ToyDiffConfig {
        steps,
        freeze_step: Some(freeze),
        ..ToyDiffConfig::default()
    };
    let run = train_joint(&captions, &encoder, &cfg)?;
    let path = std::env::temp_dir().join("tedkit-trajectory.tsv");
    trajectory_report(&run.trajectory, &path)?;
    println!("trajectory written to {}", path.display());
    let a: Vec<String> = run.weights.alphas().iter().map(|v| format!("{v:.4}")).collect();
    println!("alphas frozen at step {freeze}: {}", a.join(" "));

    let control = train_joint(
        &captions,
        &encoder,
        &ToyDiffConfig {
            conditioning: ConditioningMode::Shuffled,
            ..cfg
        },
    )?;
    let gap = 1.0 - run.final_loss / control.final_loss;
    println!("held-out loss {:.4} vs {:.4} with uninformative conditions ({:.1}% lower)", run.final_loss, control.final_loss, 100.0 * gap);
    Ok(())
}
