//! Ventricular volumes, ejection fraction and myocardial mass with and
//! without papillary muscles, and Bland-Altman agreement of the two.
//!
//! `cargo run --release --example clinical_papillary`

use cardioseg::clinical::{
    bland_altman, compare_variants, write_bland_altman_csv, write_clinical_csv, PARAMETERS,
};
use cardioseg::phantom::{generate, CohortConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut comparisons = Vec::new();
    for s in 0..6 {
        let ph = generate(&CohortConfig::default().sample(&mut rng))?;
        let cmp = compare_variants(
            &format!("s{s}"),
            (&ph.ed.raw_mask, &ph.es.raw_mask),
            (&ph.ed.clean_mask, &ph.es.clean_mask),
        )?;
        assert!(cmp.direction_consistent());
        println!(
            "s{s}: analytic LVEF {:.1}%  included {:.1}%  excluded {:.1}%",
            ph.truth.lvef_percent, cmp.included.lvef_percent, cmp.excluded.lvef_percent
        );
        comparisons.push(cmp);
    }
    let reports: Vec<_> = comparisons
        .iter()
        .flat_map(|c| [c.included.clone(), c.excluded.clone()])
        .collect();
    write_clinical_csv(&reports, std::io::stdout())?;

    // included minus excluded, one row per endpoint
    let mut stats = Vec::new();
    for name in PARAMETERS {
        let pairs: Vec<(f64, f64)> = comparisons
            .iter()
            .map(|c| {
                (
                    c.included.parameter(name).unwrap(),
                    c.excluded.parameter(name).unwrap(),
                )
            })
            .collect();
        stats.push((name.to_string(), bland_altman(&pairs)?));
    }
    write_bland_altman_csv(&stats, std::io::stdout())?;
    Ok(())
}
