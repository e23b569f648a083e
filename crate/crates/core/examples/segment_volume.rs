//! Builds a small network, saves and reloads it, and segments a whole
//! phantom volume by sliding-window inference.
//!
//! `cargo run --release --example segment_volume`

use cardioseg::data_io::{LV_CAVITY, MYOCARDIUM};
use cardioseg::phantom::{generate, CohortConfig};
use cardioseg::preprocess::{canonicalize, CANONICAL_SHAPE};
use cardioseg::unet::{
    load_model, save_model, sliding_window_infer, window_starts, UNet, UNetConfig, DEFAULT_STRIDE,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let config = UNetConfig {
        base_channels: 4,
        seed: 1,
        ..UNetConfig::default()
    };
    let model = UNet::build(config)?;
    println!(
        "pool windows {:?}, {} parameters",
        model.config().pool_windows(),
        model.parameter_count()
    );
    let path = std::env::temp_dir().join("cardioseg_untrained.csg");
    save_model(&model, &path)?;
    let model = load_model(&path)?;

    let ph = generate(&CohortConfig::default().sample(&mut ChaCha8Rng::seed_from_u64(2)))?;
    let canon = canonicalize(&ph.ed.image, None, CANONICAL_SHAPE)?;
    let patch = model.config().patch_shape;
    for axis in 0..3 {
        println!(
            "axis {axis}: windows start at {:?}",
            window_starts(CANONICAL_SHAPE[axis], patch[axis], DEFAULT_STRIDE[axis])
        );
    }
    let labels = sliding_window_infer(&model, &canon.image, DEFAULT_STRIDE)?;
    // untrained weights: the label counts only show the pipeline runs end to end
    println!(
        "predicted {:?}: myocardium {} cavity {} voxels",
        labels.dims(),
        labels.count(MYOCARDIUM),
        labels.count(LV_CAVITY)
    );
    Ok(())
}
