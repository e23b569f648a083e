//! Overlap metrics of a perturbed prediction against its reference, per
//! volume and aggregated by phase.
//!
//! `cargo run --release --example metrics_report`

use cardioseg::data_io::{Phase, MYOCARDIUM};
use cardioseg::metrics::{
    aggregate_report, confusion, evaluate_volume, write_metrics_csv, Aggregation,
};
use cardioseg::phantom::{generate, CohortConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut rows = Vec::new();
    for s in 0..3 {
        let ph = generate(&CohortConfig::default().sample(&mut rng))?;
        for phase in [Phase::ED, Phase::ES] {
            let gt = &ph.frame(phase).clean_mask;
            // flip 2% of voxels to a random label
            let mut pred = gt.clone();
            for l in pred.labels.iter_mut() {
                if rng.random_bool(0.02) {
                    *l = rng.random_range(0..3);
                }
            }
            if s == 0 && phase == Phase::ED {
                println!(
                    "myocardium confusion: {:?}",
                    confusion(&pred, gt, MYOCARDIUM)?
                );
            }
            rows.extend(evaluate_volume(&format!("s{s}"), phase, &pred, gt)?);
        }
    }
    for mode in [Aggregation::PerVolume, Aggregation::Pooled] {
        println!("-- {mode:?}");
        write_metrics_csv(&aggregate_report(rows.clone(), mode)?, std::io::stdout())?;
    }
    Ok(())
}
