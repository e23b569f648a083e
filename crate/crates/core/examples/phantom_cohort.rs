//! Synthetic hearts with known volumes: one analytic phantom, then a small
//! cohort written as NIfTI with an index and ground-truth sidecars.
//!
//! `cargo run --release --example phantom_cohort -- [out_dir]`

use std::path::PathBuf;

use cardioseg::clinical::label_volume_ml;
use cardioseg::data_io::{Split, LV_CAVITY, MYOCARDIUM};
use cardioseg::phantom::{generate, generate_cohort, Blob, CohortConfig, PhantomSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("cardioseg_cohort"));

    let mut spec = PhantomSpec::sphere(20.0);
    spec.blobs.push(Blob {
        offset_mm: [6.0, 0.0, 0.0],
        radius_mm: 4.0,
    });
    let ph = generate(&spec)?;
    println!("analytic truth: {:?}", ph.truth);
    for (phase, f) in [("ED", &ph.ed), ("ES", &ph.es)] {
        println!(
            "{phase}: voxelized cavity {:.3} ml (raw {:.3} ml), myocardium {:.3} ml",
            label_volume_ml(&f.clean_mask, LV_CAVITY),
            label_volume_ml(&f.raw_mask, LV_CAVITY),
            label_volume_ml(&f.clean_mask, MYOCARDIUM)
        );
    }

    let index = generate_cohort(6, &CohortConfig::default(), 42, &out)?;
    println!(
        "cohort of {} subjects in {}: {} train / {} val / {} test volumes",
        index.subjects().len(),
        out.display(),
        index.count(Split::Train),
        index.count(Split::Val),
        index.count(Split::Test)
    );
    Ok(())
}
