//! Synthetic cardiac phantoms: a left ventricle modelled as concentric
//! ellipsoids with optional spherical papillary muscles in the blood pool,
//! at end-diastole and end-systole, with closed-form volumes.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clinical;
use crate::data_io::{
    split_dataset, voxel_index, write_mask, write_volume, DatasetEntry, DatasetError, DatasetIndex,
    LabelMask, NiftiError, Phase, Split, SplitFractions, Volume, VolumeHeader, BACKGROUND,
    LV_CAVITY, MYOCARDIUM,
};

pub const BACKGROUND_INTENSITY: f32 = 0.1;
pub const MYOCARDIUM_INTENSITY: f32 = 0.5;
pub const CAVITY_INTENSITY: f32 = 0.9;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("invalid phantom: {0}")]
    Invalid(String),
    #[error("papillary blob {index} is not enclosed by the cavity at {phase}")]
    BlobOutsideCavity { index: usize, phase: Phase },
    #[error(transparent)]
    Nifti(#[from] NiftiError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, PhantomError>;

/// Sphere of papillary muscle. The offset is from the ventricle center and
/// shrinks with the cavity at end-systole; the radius does not.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub offset_mm: [f64; 3],
    pub radius_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing_mm: [f32; 3],
    /// Ventricle center; voxel `i` sits at `i · spacing`.
    pub center_mm: [f64; 3],
    /// End-diastolic endocardial semi-axes.
    pub endo_axes_mm: [f64; 3],
    /// Epicardial semi-axes are the end-diastolic endocardial ones plus this.
    pub thickness_mm: f64,
    /// End-systolic scale of the endocardial semi-axes, in (0, 1).
    pub es_scale: f64,
    pub blobs: Vec<Blob>,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl PhantomSpec {
    /// Sphere of radius `r` mm centred in a 1 mm grid, no blobs, no noise.
    pub fn sphere(r: f64) -> Self {
        let n = (2.0 * (r + 8.0)).ceil() as usize + 4;
        let c = (n / 2) as f64;
        Self {
            dims: [n, n, n],
            spacing_mm: [1.0; 3],
            center_mm: [c, c, c],
            endo_axes_mm: [r; 3],
            thickness_mm: 6.0,
            es_scale: 0.75,
            blobs: Vec::new(),
            noise_sigma: 0.0,
            seed: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PhantomError::Invalid(m.to_string()));
        if self.dims.contains(&0) {
            return bad("grid dims must be positive");
        }
        if self.spacing_mm.iter().any(|&s| !(s > 0.0)) {
            return bad("spacing must be positive");
        }
        if self.endo_axes_mm.iter().any(|&a| !(a > 0.0)) {
            return bad("semi-axes must be positive");
        }
        if !(self.thickness_mm > 0.0) {
            return bad("myocardial thickness must be positive");
        }
        if !(self.es_scale > 0.0 && self.es_scale < 1.0) {
            return bad("end-systolic scale must lie in (0, 1)");
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise sigma must be non-negative");
        }
        if self.blobs.iter().any(|b| !(b.radius_mm > 0.0)) {
            return bad("blob radius must be positive");
        }
        Ok(())
    }

    fn header(&self) -> VolumeHeader {
        VolumeHeader::new(self.dims, self.spacing_mm)
    }
}

/// Closed-form volumes written as the JSON sidecar. Cavity volumes include
/// the papillary muscles (they are excluded from the myocardium).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub edv_ml: f64,
    pub esv_ml: f64,
    pub lvef_percent: f64,
    pub myo_ml: f64,
    pub papillary_ml: f64,
}

fn ellipsoid_ml(axes: [f64; 3]) -> f64 {
    4.0 / 3.0 * PI * axes[0] * axes[1] * axes[2] / 1000.0
}

impl GroundTruth {
    pub fn of(spec: &PhantomSpec) -> Self {
        let a = spec.endo_axes_mm;
        let edv_ml = ellipsoid_ml(a);
        let esv_ml = ellipsoid_ml(a.map(|v| v * spec.es_scale));
        let myo_ml = ellipsoid_ml(a.map(|v| v + spec.thickness_mm)) - edv_ml;
        Self {
            edv_ml,
            esv_ml,
            lvef_percent: clinical::lvef(edv_ml, esv_ml).expect("positive volume"),
            myo_ml,
            papillary_ml: spec
                .blobs
                .iter()
                .map(|b| ellipsoid_ml([b.radius_mm; 3]))
                .sum(),
        }
    }
}

/// One cardiac phase: the image, the annotation with papillary muscles as
/// myocardium, and the cleaned annotation with them absorbed by the cavity.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomFrame {
    pub image: Volume,
    pub raw_mask: LabelMask,
    pub clean_mask: LabelMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub ed: PhantomFrame,
    pub es: PhantomFrame,
    pub truth: GroundTruth,
}

impl Phantom {
    pub fn frame(&self, phase: Phase) -> &PhantomFrame {
        match phase {
            Phase::ED => &self.ed,
            Phase::ES => &self.es,
        }
    }
}

fn inside(p: [f64; 3], center: [f64; 3], axes: [f64; 3]) -> bool {
    (0..3)
        .map(|i| ((p[i] - center[i]) / axes[i]).powi(2))
        .sum::<f64>()
        <= 1.0
}

fn frame(spec: &PhantomSpec, phase: Phase, rng: &mut ChaCha8Rng) -> Result<PhantomFrame> {
    let s = match phase {
        Phase::ED => 1.0,
        Phase::ES => spec.es_scale,
    };
    let endo = spec.endo_axes_mm.map(|a| a * s);
    let epi = spec.endo_axes_mm.map(|a| a + spec.thickness_mm);
    let c = spec.center_mm;
    let blobs: Vec<([f64; 3], f64)> = spec
        .blobs
        .iter()
        .map(|b| {
            (
                std::array::from_fn(|i| c[i] + b.offset_mm[i] * s),
                b.radius_mm,
            )
        })
        .collect();
    let dims = spec.dims;
    let pos = |x: usize, y: usize, z: usize| -> [f64; 3] {
        let idx = [x, y, z];
        std::array::from_fn(|i| idx[i] as f64 * spec.spacing_mm[i] as f64)
    };
    let mut raw = vec![BACKGROUND; dims.iter().product()];
    let mut clean = raw.clone();
    let mut blob_voxels: Vec<Vec<[usize; 3]>> = vec![Vec::new(); blobs.len()];
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let p = pos(x, y, z);
                let i = voxel_index(dims, x, y, z);
                if inside(p, c, endo) {
                    clean[i] = LV_CAVITY;
                    raw[i] = LV_CAVITY;
                    for (k, &(bc, r)) in blobs.iter().enumerate() {
                        if inside(p, bc, [r; 3]) {
                            raw[i] = MYOCARDIUM;
                            blob_voxels[k].push([x, y, z]);
                        }
                    }
                } else if inside(p, c, epi) {
                    clean[i] = MYOCARDIUM;
                    raw[i] = MYOCARDIUM;
                }
            }
        }
    }
    // a blob must sit in the blood pool: its in-slice neighbors are cavity
    for (index, voxels) in blob_voxels.iter().enumerate() {
        let enclosed = voxels.iter().all(|&[x, y, z]| {
            (-1isize..=1).all(|dy| {
                (-1isize..=1).all(|dx| {
                    let (nx, ny) = (x as isize + dx, y as isize + dy);
                    nx >= 0
                        && ny >= 0
                        && (nx as usize) < dims[0]
                        && (ny as usize) < dims[1]
                        && clean[voxel_index(dims, nx as usize, ny as usize, z)] == LV_CAVITY
                })
            })
        });
        if !enclosed {
            return Err(PhantomError::BlobOutsideCavity { index, phase });
        }
    }
    let noise =
        Normal::new(0.0, spec.noise_sigma).map_err(|e| PhantomError::Invalid(e.to_string()))?;
    let values = raw
        .iter()
        .map(|&l| {
            let base = match l {
                MYOCARDIUM => MYOCARDIUM_INTENSITY,
                LV_CAVITY => CAVITY_INTENSITY,
                _ => BACKGROUND_INTENSITY,
            };
            if spec.noise_sigma == 0.0 {
                base
            } else {
                (base + noise.sample(rng) as f32).clamp(0.0, 1.0)
            }
        })
        .collect();
    let header = spec.header();
    Ok(PhantomFrame {
        image: Volume::new(header, values),
        raw_mask: LabelMask::new(header, raw),
        clean_mask: LabelMask::new(header, clean),
    })
}

/// Voxelizes both phases of `spec`. Blobs whose cross-sections touch
/// anything but cavity in their slice are rejected.
pub fn generate(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let ed = frame(spec, Phase::ED, &mut rng)?;
    let es = frame(spec, Phase::ES, &mut rng)?;
    Ok(Phantom {
        ed,
        es,
        truth: GroundTruth::of(spec),
    })
}

/// Per-subject variation of a cohort around a base geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortConfig {
    pub dims: [usize; 3],
    pub spacing_mm: [f32; 3],
    pub axes_min_mm: [f64; 3],
    pub axes_max_mm: [f64; 3],
    pub thickness_range_mm: [f64; 2],
    pub es_scale_range: [f64; 2],
    /// Maximum in-plane displacement of the ventricle from the grid center.
    pub center_jitter_mm: f64,
    pub blob_radius_mm: f64,
    /// Blob offsets as fractions of the in-plane semi-axes, with an absolute
    /// z offset in millimeters.
    pub blob_offsets: Vec<[f64; 3]>,
    pub noise_sigma: f64,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            dims: [140, 140, 6],
            spacing_mm: [1.5, 1.5, 12.0],
            axes_min_mm: [22.0, 20.0, 24.0],
            axes_max_mm: [26.0, 24.0, 28.0],
            thickness_range_mm: [7.0, 9.0],
            es_scale_range: [0.65, 0.8],
            center_jitter_mm: 6.0,
            blob_radius_mm: 3.5,
            blob_offsets: vec![[0.3, 0.15, 6.0], [-0.25, -0.2, -6.0]],
            noise_sigma: 0.08,
        }
    }
}

impl CohortConfig {
    /// Draws one subject's geometry.
    pub fn sample(&self, rng: &mut impl Rng) -> PhantomSpec {
        let mut uniform = |lo: f64, hi: f64| {
            if hi > lo {
                rng.random_range(lo..hi)
            } else {
                lo
            }
        };
        let axes: [f64; 3] =
            std::array::from_fn(|i| uniform(self.axes_min_mm[i], self.axes_max_mm[i]));
        let thickness = uniform(self.thickness_range_mm[0], self.thickness_range_mm[1]);
        let es_scale = uniform(self.es_scale_range[0], self.es_scale_range[1]);
        let j = self.center_jitter_mm;
        let jitter = [uniform(-j, j), uniform(-j, j)];
        let seed = rng.random();
        // slices sit at z·spacing; the mid-plane falls between the two middle slices
        let mid = |i: usize| (self.dims[i] as f64 - 1.0) / 2.0 * self.spacing_mm[i] as f64;
        let center_mm = [mid(0) + jitter[0], mid(1) + jitter[1], mid(2)];
        let blobs = self
            .blob_offsets
            .iter()
            .map(|o| Blob {
                offset_mm: [o[0] * axes[0], o[1] * axes[1], o[2]],
                radius_mm: self.blob_radius_mm,
            })
            .collect();
        PhantomSpec {
            dims: self.dims,
            spacing_mm: self.spacing_mm,
            center_mm,
            endo_axes_mm: axes,
            thickness_mm: thickness,
            es_scale,
            blobs,
            noise_sigma: self.noise_sigma,
            seed,
        }
    }
}

pub fn subject_id(i: usize) -> String {
    format!("ph{i:03}")
}

/// Writes `n` subjects into `out_dir`: per subject the ED/ES images and raw
/// masks as gzipped NIfTI plus a ground-truth JSON sidecar, and an
/// `index.json` split 70/10/20 by subject. Output depends only on the seed.
pub fn generate_cohort(
    n: usize,
    config: &CohortConfig,
    seed: u64,
    out_dir: impl AsRef<Path>,
) -> Result<DatasetIndex> {
    if n == 0 {
        return Err(PhantomError::Invalid(
            "cohort needs at least one subject".into(),
        ));
    }
    let out_dir = out_dir.as_ref();
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| PhantomError::Io { path, source }
    };
    fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    for i in 0..n {
        let subject = subject_id(i);
        let spec = config.sample(&mut rng);
        let ph = generate(&spec)?;
        for phase in [Phase::ED, Phase::ES] {
            let image = PathBuf::from(format!("{subject}_{phase}_image.nii.gz"));
            let mask = PathBuf::from(format!("{subject}_{phase}_mask.nii.gz"));
            let f = ph.frame(phase);
            write_volume(&f.image, out_dir.join(&image), true)?;
            write_mask(&f.raw_mask, out_dir.join(&mask), true)?;
            entries.push(DatasetEntry {
                subject: subject.clone(),
                phase,
                image,
                mask,
                split: Split::Train,
            });
        }
        let truth_path = out_dir.join(format!("{subject}_truth.json"));
        let text = serde_json::to_string_pretty(&ph.truth).expect("truth serializes") + "\n";
        fs::write(&truth_path, text).map_err(io(&truth_path))?;
    }
    let index = split_dataset(&DatasetIndex::new(entries), SplitFractions::default(), seed)?;
    index.save(out_dir.join("index.json"))?;
    Ok(index)
}
