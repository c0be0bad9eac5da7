//! Desk-preset pre-training on the synthetic corpus, printing evaluations.
//!
//! `cargo run --release -p shaper --example desk_run -- [steps]`

use std::time::Instant;

use shaper::data::{Corpus, Vocab};
use shaper::synth::{generate, SynthConfig};
use shaper::train::{super_pretrain_with, TrainingConfig};
use shaper::{BackboneConfig, Supernet};

fn main() -> shaper::Result<()> {
    let steps = std::env::args().nth(1).map_or(2000, |s| s.parse().expect("steps"));
    let text = generate(&SynthConfig::default())?;
    let vocab = Vocab::build(&text, 2000)?;
    let (train, eval) = Corpus::from_text(&text, &vocab).split_every(20);
    let mut model = Supernet::build(BackboneConfig::desk(), 0)?;
    let config = TrainingConfig {
        steps,
        ..TrainingConfig::desk()
    };
    let start = Instant::now();
    let log = super_pretrain_with(&mut model, &train, &eval, &config, &mut |r| {
        println!(
            "{:>7.1}s step {:>5} {:<14} ppl {:.3}",
            start.elapsed().as_secs_f64(),
            r.step,
            r.shape.to_key(),
            r.perplexity
        )
    })?;
    println!("{} steps in {:.1}s", log.steps.len(), start.elapsed().as_secs_f64());
    Ok(())
}
