//! Surface meshes of the cavity and myocardium of a phantom, checked for
//! closure and exported as STL and OBJ.
//!
//! `cargo run --release --example reconstruct_mesh -- [out_dir]`

use std::path::PathBuf;

use cardioseg::clinical::label_volume_ml;
use cardioseg::data_io::{LV_CAVITY, MYOCARDIUM};
use cardioseg::phantom::{generate, PhantomSpec};
use cardioseg::reconstruct::{export_obj, export_stl, marching_cubes};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("cardioseg_mesh"));
    std::fs::create_dir_all(&out)?;
    let ph = generate(&PhantomSpec::sphere(18.0))?;
    let mask = &ph.ed.clean_mask;
    for (label, name) in [(LV_CAVITY, "lv"), (MYOCARDIUM, "myo")] {
        let mesh = marching_cubes(mask, label);
        println!(
            "{name}: {} vertices, {} triangles, watertight {}, oriented {}, chi {}, enclosed {:.2} ml vs voxels {:.2} ml",
            mesh.vertices.len(),
            mesh.triangles.len(),
            mesh.is_watertight(),
            mesh.is_consistently_oriented(),
            mesh.euler_characteristic(),
            mesh.enclosed_volume_mm3() / 1000.0,
            label_volume_ml(mask, label)
        );
        export_stl(&mesh, out.join(format!("{name}.stl")))?;
        export_obj(&mesh, out.join(format!("{name}.obj")))?;
    }
    println!("meshes written to {}", out.display());
    Ok(())
}
