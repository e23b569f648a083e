//! NIfTI-1 round trip of an image and a label mask, and a subject-level
//! dataset split.
//!
//! `cargo run --release --example nifti_io`

use std::path::PathBuf;

use cardioseg::data_io::{
    read_nifti, split_dataset, write_mask, write_volume, DatasetEntry, DatasetIndex, LabelMask,
    Phase, Split, SplitFractions, Volume, VolumeHeader,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join("cardioseg_nifti");
    std::fs::create_dir_all(&dir)?;
    let header = VolumeHeader::new([32, 24, 6], [1.5, 1.5, 10.0]);
    let image = Volume::new(
        header,
        (0..header.voxel_count())
            .map(|i| (i as f32 * 0.37).sin())
            .collect(),
    );
    let labels = (0..header.voxel_count()).map(|i| (i % 3) as u8).collect();
    let mask = LabelMask::new(header, labels);

    write_volume(&image, dir.join("image.nii.gz"), true)?;
    write_mask(&mask, dir.join("mask.nii"), false)?;
    let back = read_nifti(dir.join("image.nii.gz"))?.into_volume();
    let same = back
        .values
        .iter()
        .zip(&image.values)
        .all(|(a, b)| a.to_bits() == b.to_bits());
    println!(
        "image {:?} mm {:?}: bit-exact round trip {same}",
        back.dims(),
        back.header.spacing_mm
    );
    let mask_back = read_nifti(dir.join("mask.nii"))?.into_label_mask()?;
    println!("mask round trip equal: {}", mask_back == mask);

    let entries = (0..20)
        .flat_map(|s| {
            [Phase::ED, Phase::ES].map(|phase| DatasetEntry {
                subject: format!("p{s:02}"),
                phase,
                image: PathBuf::from(format!("p{s:02}_{phase}_image.nii.gz")),
                mask: PathBuf::from(format!("p{s:02}_{phase}_mask.nii.gz")),
                split: Split::Train,
            })
        })
        .collect();
    let index = split_dataset(&DatasetIndex::new(entries), SplitFractions::default(), 1)?;
    for split in [Split::Train, Split::Val, Split::Test] {
        let subjects: Vec<&str> = index
            .in_split(split)
            .filter(|e| e.phase == Phase::ED)
            .map(|e| e.subject.as_str())
            .collect();
        println!(
            "{split:?}: {} images, subjects {subjects:?}",
            index.count(split)
        );
    }
    Ok(())
}
