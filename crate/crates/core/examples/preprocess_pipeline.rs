//! Heart localization, cropping to the canonical grid, papillary-muscle
//! cleaning and training-patch sampling on one phantom subject.
//!
//! `cargo run --release --example preprocess_pipeline`

use cardioseg::data_io::{LV_CAVITY, MYOCARDIUM};
use cardioseg::phantom::{generate, CohortConfig};
use cardioseg::preprocess::{
    canonicalize, clean_mask, extract_patches, locate_heart_bbox, locate_heart_maskless,
    Connectivity, CANONICAL_SHAPE, PATCH_SHAPE,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = CohortConfig::default().sample(&mut ChaCha8Rng::seed_from_u64(3));
    let ph = generate(&spec)?;
    let (image, raw) = (&ph.ed.image, &ph.ed.raw_mask);
    println!(
        "source grid {:?}, ventricle center at {:?} mm",
        image.dims(),
        spec.center_mm
    );
    println!("bbox center from mask:    {:?}", locate_heart_bbox(raw)?);
    println!(
        "center from intensities:  {:?}",
        locate_heart_maskless(image)
    );

    let cleaned = clean_mask(raw, Connectivity::Slice8);
    println!(
        "cleaning moved {} myocardium voxels into the cavity; matches truth: {}",
        raw.count(MYOCARDIUM) - cleaned.count(MYOCARDIUM),
        cleaned == ph.ed.clean_mask
    );

    let canon = canonicalize(image, Some(&cleaned), CANONICAL_SHAPE)?;
    let mask = canon.mask.expect("mask was given");
    println!(
        "canonical {:?}: cavity voxels kept {} of {}",
        canon.image.dims(),
        mask.count(LV_CAVITY),
        cleaned.count(LV_CAVITY)
    );

    let patches = extract_patches(&canon.image, &mask, PATCH_SHAPE, 8, 9)?;
    for (i, p) in patches.iter().enumerate() {
        let fg: f32 = p.label.data()[p.label.len() / 3..].iter().sum();
        println!("patch {i}: origin {:?}, foreground voxels {fg}", p.origin);
    }
    Ok(())
}
