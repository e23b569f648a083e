//! Clinical endpoints from ED/ES label masks, the papillary-muscle
//! inclusion/exclusion comparison, and Bland-Altman agreement.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use thiserror::Error;

use crate::data_io::{LabelMask, LV_CAVITY, MYOCARDIUM};
use crate::numfmt::sig6;

/// Myocardial tissue density in g/mL.
pub const MYOCARDIAL_DENSITY: f64 = 1.05;
/// Two-sided 95% normal quantile used for the limits of agreement.
pub const LOA_Z: f64 = 1.96;

#[derive(Debug, Error)]
pub enum ClinicalError {
    #[error("end-diastolic volume must be positive, got {0}")]
    NonPositiveEdv(f64),
    #[error("end-systolic volume must be non-negative, got {0}")]
    NegativeEsv(f64),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("Bland-Altman needs at least 2 pairs, got {0}")]
    TooFewPairs(usize),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed clinical table: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, ClinicalError>;

/// `count(label) · dx·dy·dz / 1000`.
pub fn label_volume_ml(mask: &LabelMask, label: u8) -> f64 {
    mask.count(label) as f64 * mask.header.voxel_volume_mm3() / 1000.0
}

/// Ejection fraction in percent.
pub fn lvef(edv_ml: f64, esv_ml: f64) -> Result<f64> {
    if edv_ml.is_nan() || edv_ml <= 0.0 {
        return Err(ClinicalError::NonPositiveEdv(edv_ml));
    }
    if esv_ml.is_nan() || esv_ml < 0.0 {
        return Err(ClinicalError::NegativeEsv(esv_ml));
    }
    Ok((edv_ml - esv_ml) / edv_ml * 100.0)
}

pub fn myocardial_mass_g(myo_ml: f64) -> f64 {
    myo_ml * MYOCARDIAL_DENSITY
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    PapillaryIncluded,
    PapillaryExcluded,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::PapillaryIncluded => "papillary_included",
            Variant::PapillaryExcluded => "papillary_excluded",
        })
    }
}

impl FromStr for Variant {
    type Err = ClinicalError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "papillary_included" => Ok(Variant::PapillaryIncluded),
            "papillary_excluded" => Ok(Variant::PapillaryExcluded),
            _ => Err(ClinicalError::Format(format!("unknown variant {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClinicalReport {
    pub subject: String,
    pub variant: Variant,
    pub edv_ml: f64,
    pub esv_ml: f64,
    pub sv_ml: f64,
    pub lvef_percent: f64,
    /// Measured on the end-diastolic mask.
    pub myo_mass_g: f64,
    /// ESV exceeds EDV, which is physiologically invalid.
    pub esv_exceeds_edv: bool,
}

/// Endpoints of one subject from its ED and ES masks.
pub fn clinical_report(
    subject: &str,
    variant: Variant,
    ed: &LabelMask,
    es: &LabelMask,
) -> Result<ClinicalReport> {
    if ed.dims() != es.dims() || ed.header.spacing_mm != es.header.spacing_mm {
        return Err(ClinicalError::DimMismatch(format!(
            "ED grid {:?} {:?} vs ES grid {:?} {:?}",
            ed.dims(),
            ed.header.spacing_mm,
            es.dims(),
            es.header.spacing_mm
        )));
    }
    let edv_ml = label_volume_ml(ed, LV_CAVITY);
    let esv_ml = label_volume_ml(es, LV_CAVITY);
    Ok(ClinicalReport {
        subject: subject.to_string(),
        variant,
        edv_ml,
        esv_ml,
        sv_ml: edv_ml - esv_ml,
        lvef_percent: lvef(edv_ml, esv_ml)?,
        myo_mass_g: myocardial_mass_g(label_volume_ml(ed, MYOCARDIUM)),
        esv_exceeds_edv: esv_ml > edv_ml,
    })
}

/// Included (raw masks) and excluded (cleaned masks) endpoints of a subject.
#[derive(Debug, Clone, PartialEq)]
pub struct VariantComparison {
    pub included: ClinicalReport,
    pub excluded: ClinicalReport,
}

impl VariantComparison {
    /// Exclusion can only move voxels from myocardium into the cavity.
    pub fn direction_consistent(&self) -> bool {
        self.excluded.edv_ml >= self.included.edv_ml
            && self.excluded.esv_ml >= self.included.esv_ml
            && self.excluded.myo_mass_g <= self.included.myo_mass_g
    }
}

pub fn compare_variants(
    subject: &str,
    raw: (&LabelMask, &LabelMask),
    cleaned: (&LabelMask, &LabelMask),
) -> Result<VariantComparison> {
    if raw.0.dims() != cleaned.0.dims() || raw.1.dims() != cleaned.1.dims() {
        return Err(ClinicalError::DimMismatch(
            "raw and cleaned masks differ in shape".into(),
        ));
    }
    Ok(VariantComparison {
        included: clinical_report(subject, Variant::PapillaryIncluded, raw.0, raw.1)?,
        excluded: clinical_report(subject, Variant::PapillaryExcluded, cleaned.0, cleaned.1)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlandAltmanStats {
    pub bias: f64,
    pub sd_diff: f64,
    pub loa_low: f64,
    pub loa_high: f64,
    pub n: usize,
    /// `(mean_i, diff_i)` for plotting.
    pub points: Vec<(f64, f64)>,
}

/// Agreement of paired measurements with differences `a − b`, sample SD and
/// `bias ± 1.96·SD` limits.
pub fn bland_altman(pairs: &[(f64, f64)]) -> Result<BlandAltmanStats> {
    let n = pairs.len();
    if n < 2 {
        return Err(ClinicalError::TooFewPairs(n));
    }
    let points: Vec<(f64, f64)> = pairs.iter().map(|&(a, b)| ((a + b) / 2.0, a - b)).collect();
    let bias = points.iter().map(|p| p.1).sum::<f64>() / n as f64;
    let var = points.iter().map(|p| (p.1 - bias).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sd_diff = var.sqrt();
    Ok(BlandAltmanStats {
        bias,
        sd_diff,
        loa_low: bias - LOA_Z * sd_diff,
        loa_high: bias + LOA_Z * sd_diff,
        n,
        points,
    })
}

pub const CLINICAL_HEADER: [&str; 7] = [
    "subject",
    "variant",
    "edv_ml",
    "esv_ml",
    "sv_ml",
    "lvef_percent",
    "myo_mass_g",
];
pub const BLAND_ALTMAN_HEADER: [&str; 6] = ["parameter", "bias", "sd", "loa_low", "loa_high", "n"];

/// Clinical parameters compared by Bland-Altman, with their CSV columns.
pub const PARAMETERS: [&str; 5] = ["edv_ml", "esv_ml", "sv_ml", "lvef_percent", "myo_mass_g"];

impl ClinicalReport {
    pub fn parameter(&self, name: &str) -> Option<f64> {
        Some(match name {
            "edv_ml" => self.edv_ml,
            "esv_ml" => self.esv_ml,
            "sv_ml" => self.sv_ml,
            "lvef_percent" => self.lvef_percent,
            "myo_mass_g" => self.myo_mass_g,
            _ => return None,
        })
    }
}

pub fn write_clinical_csv(reports: &[ClinicalReport], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CLINICAL_HEADER)?;
    for r in reports {
        w.write_record([
            r.subject.clone(),
            r.variant.to_string(),
            sig6(r.edv_ml),
            sig6(r.esv_ml),
            sig6(r.sv_ml),
            sig6(r.lvef_percent),
            sig6(r.myo_mass_g),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a table written by [`write_clinical_csv`].
pub fn read_clinical_csv(input: impl Read) -> Result<Vec<ClinicalReport>> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != CLINICAL_HEADER {
        return Err(ClinicalError::Format(format!(
            "unexpected header {headers:?}"
        )));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let num = |i: usize| {
            rec[i]
                .parse::<f64>()
                .map_err(|e| ClinicalError::Format(format!("column {}: {e}", CLINICAL_HEADER[i])))
        };
        let (edv_ml, esv_ml) = (num(2)?, num(3)?);
        out.push(ClinicalReport {
            subject: rec[0].to_string(),
            variant: rec[1].parse()?,
            edv_ml,
            esv_ml,
            sv_ml: num(4)?,
            lvef_percent: num(5)?,
            myo_mass_g: num(6)?,
            esv_exceeds_edv: esv_ml > edv_ml,
        });
    }
    Ok(out)
}

pub fn write_bland_altman_csv(stats: &[(String, BlandAltmanStats)], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(BLAND_ALTMAN_HEADER)?;
    for (name, s) in stats {
        w.write_record([
            name.clone(),
            sig6(s.bias),
            sig6(s.sd_diff),
            sig6(s.loa_low),
            sig6(s.loa_high),
            s.n.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_points_csv(stats: &BlandAltmanStats, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["mean", "diff"])?;
    for &(m, d) in &stats.points {
        w.write_record([sig6(m), sig6(d)])?;
    }
    w.flush()?;
    Ok(())
}
