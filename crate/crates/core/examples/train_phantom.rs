//! Trains the toy network on a synthetic eight-subject cohort and scores it
//! on its own training split with sliding-window inference.
//!
//! `cargo run --release --example train_phantom -- [epochs] [out_dir]`

use std::path::PathBuf;
use std::time::Instant;

use cardioseg::data_io::Split;
use cardioseg::metrics::{write_metrics_csv, Aggregation};
use cardioseg::phantom::{generate_cohort, CohortConfig};
use cardioseg::training::{
    evaluate, load_split, train, write_epoch_log, TrainConfig, TrainOptions,
};
use cardioseg::unet::UNet;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(60);
    let out = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("cardioseg_phantom"));

    let index = generate_cohort(8, &CohortConfig::default(), 7, &out)?;
    let cfg = TrainConfig {
        epochs,
        batch_size: 4,
        base_channels: 8,
        seed: 7,
        ..TrainConfig::default()
    };
    let volumes = load_split(&index, &out, Split::Train, cfg.clean_masks)?;
    println!("{} training volumes in {}", volumes.len(), out.display());

    let start = Instant::now();
    let model = UNet::build(cfg.unet_config())?;
    println!("{} parameters", model.parameter_count());
    let opts = TrainOptions {
        on_epoch: Some(Box::new(|e| {
            println!(
                "epoch {:3}  lr {:.6}  loss {:.4}  soft dice {:.4}  [{:.0?}]",
                e.epoch,
                e.lr,
                e.train_loss,
                e.train_dice,
                start.elapsed()
            )
        })),
        ..TrainOptions::default()
    };
    let outcome = train(model, &volumes, &[], &cfg, opts)?;
    write_epoch_log(&outcome.log, std::fs::File::create(out.join("epochs.csv"))?)?;

    let report = evaluate(
        &outcome.model,
        &volumes,
        cfg.stride,
        cfg.clean_masks,
        Aggregation::PerVolume,
    )?;
    write_metrics_csv(&report, std::io::stdout())?;
    println!("total {:.0?}", start.elapsed());
    Ok(())
}
