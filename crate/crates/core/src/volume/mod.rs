//! Volumes with physical spacing, case records, and the raw RVOL file format.
//!
//! Axis convention: extents are `(H, W, D)` with H the fastest-varying axis
//! in memory and on disk (`idx = h + H*(w + W*d)`). H and W span the axial
//! plane; D walks slices.

mod augment;
mod grid;
mod preprocess;

pub use augment::{amplify_case, augment_case, rotate_translate_volume, AugmentMode};
pub use grid::sliding_window_grid;
pub use preprocess::{
    bounding_box, clamp_hu, crop_resize_roi, normalize_zscore, preprocess_case,
    resize_nearest, resize_trilinear, supplement_vessel_mask, HU_CLAMP_HI, HU_CLAMP_LO,
};

use std::fs;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("format error at byte {pos}: {msg}")]
    Format { pos: usize, msg: String },
    #[error("extent mismatch: {lhs:?} vs {rhs:?}")]
    ExtentMismatch { lhs: [usize; 3], rhs: [usize; 3] },
    #[error("degenerate ROI: liver mask is empty")]
    DegenerateRoi,
    #[error("degenerate statistics: volume has fewer than two distinct values")]
    DegenerateStats,
    #[error("mask is not binary: {0}")]
    NotBinary(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Scalar type of a persisted volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VoxelType {
    F32,
    U8,
}

impl VoxelType {
    fn name(self) -> &'static str {
        match self {
            VoxelType::F32 => "f32",
            VoxelType::U8 => "u8",
        }
    }
}

/// Dense 3D scalar grid with voxel spacing in millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    extents: [usize; 3],
    spacing: [f64; 3],
    data: Vec<f32>,
}

impl Volume {
    pub fn new(extents: [usize; 3], spacing: [f64; 3], data: Vec<f32>) -> Result<Self, VolumeError> {
        let numel: usize = extents.iter().product();
        if data.len() != numel {
            return Err(VolumeError::InvalidArgument(format!(
                "data length {} does not match extents {:?}",
                data.len(),
                extents
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(VolumeError::InvalidArgument(format!(
                "spacing must be strictly positive, got {spacing:?}"
            )));
        }
        Ok(Volume {
            extents,
            spacing,
            data,
        })
    }

    pub fn zeros(extents: [usize; 3], spacing: [f64; 3]) -> Self {
        let numel = extents.iter().product();
        Volume {
            extents,
            spacing,
            data: vec![0.0; numel],
        }
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing[0] * self.spacing[1] * self.spacing[2]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, h: usize, w: usize, d: usize) -> usize {
        h + self.extents[0] * (w + self.extents[1] * d)
    }

    #[inline]
    pub fn at(&self, h: usize, w: usize, d: usize) -> f32 {
        self.data[self.index(h, w, d)]
    }

    #[inline]
    pub fn set(&mut self, h: usize, w: usize, d: usize, v: f32) {
        let i = self.index(h, w, d);
        self.data[i] = v;
    }

    pub fn min_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn max_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn mean_and_variance(&self) -> (f64, f64) {
        let n = self.data.len() as f64;
        let mean = self.data.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = self
            .data
            .iter()
            .map(|&v| {
                let d = v as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        (mean, var)
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn check_same_extents(&self, other: &Volume) -> Result<(), VolumeError> {
        if self.extents != other.extents {
            return Err(VolumeError::ExtentMismatch {
                lhs: self.extents,
                rhs: other.extents,
            });
        }
        Ok(())
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0.0).count()
    }
}

/// One training/evaluation case: CT image plus liver and vessel masks.
#[derive(Debug, Clone)]
pub struct CaseRecord {
    pub case_id: String,
    pub image: Volume,
    pub liver_mask: Volume,
    pub vessel_mask: Volume,
}

impl CaseRecord {
    pub fn validate(&self) -> Result<(), VolumeError> {
        self.image.check_same_extents(&self.liver_mask)?;
        self.image.check_same_extents(&self.vessel_mask)?;
        if self.image.spacing != self.liver_mask.spacing
            || self.image.spacing != self.vessel_mask.spacing
        {
            return Err(VolumeError::InvalidArgument(
                "case volumes disagree on spacing".into(),
            ));
        }
        if !self.liver_mask.is_binary() {
            return Err(VolumeError::NotBinary("liver mask".into()));
        }
        if !self.vessel_mask.is_binary() {
            return Err(VolumeError::NotBinary("vessel mask".into()));
        }
        Ok(())
    }
}

const MAGIC: &str = "RVOL1";

/// Write a volume: one text header line
/// `RVOL1 H W D sx sy sz dtype\n`, then little-endian scalars, H fastest.
pub fn save_volume(v: &Volume, path: &Path, dtype: VoxelType) -> Result<(), VolumeError> {
    let header = format!(
        "{MAGIC} {} {} {} {} {} {} {}\n",
        v.extents[0],
        v.extents[1],
        v.extents[2],
        v.spacing[0],
        v.spacing[1],
        v.spacing[2],
        dtype.name()
    );
    let mut bytes = header.into_bytes();
    match dtype {
        VoxelType::F32 => {
            bytes.reserve(v.data.len() * 4);
            for &x in &v.data {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        VoxelType::U8 => {
            bytes.reserve(v.data.len());
            for &x in &v.data {
                if x < 0.0 || x > 255.0 || x.fract() != 0.0 {
                    return Err(VolumeError::InvalidArgument(format!(
                        "value {x} not representable as u8"
                    )));
                }
                bytes.push(x as u8);
            }
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_volume(path: &Path) -> Result<Volume, VolumeError> {
    let bytes = fs::read(path)?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or(VolumeError::Format {
            pos: bytes.len(),
            msg: "missing header newline".into(),
        })?;
    let header = std::str::from_utf8(&bytes[..newline]).map_err(|e| VolumeError::Format {
        pos: e.valid_up_to(),
        msg: "header is not UTF-8".into(),
    })?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 8 || fields[0] != MAGIC {
        return Err(VolumeError::Format {
            pos: 0,
            msg: format!("expected `{MAGIC} H W D sx sy sz dtype`, got `{header}`"),
        });
    }
    let parse_extent = |s: &str, what: &str| -> Result<usize, VolumeError> {
        s.parse::<usize>().map_err(|_| VolumeError::Format {
            pos: 0,
            msg: format!("bad {what} extent `{s}`"),
        })
    };
    let extents = [
        parse_extent(fields[1], "H")?,
        parse_extent(fields[2], "W")?,
        parse_extent(fields[3], "D")?,
    ];
    let parse_spacing = |s: &str| -> Result<f64, VolumeError> {
        let v = s.parse::<f64>().map_err(|_| VolumeError::Format {
            pos: 0,
            msg: format!("bad spacing `{s}`"),
        })?;
        if !(v > 0.0) {
            return Err(VolumeError::Format {
                pos: 0,
                msg: format!("non-positive spacing {v}"),
            });
        }
        Ok(v)
    };
    let spacing = [
        parse_spacing(fields[4])?,
        parse_spacing(fields[5])?,
        parse_spacing(fields[6])?,
    ];
    let payload = &bytes[newline + 1..];
    let numel: usize = extents.iter().product();
    let (elem, dtype) = match fields[7] {
        "f32" => (4usize, VoxelType::F32),
        "u8" => (1usize, VoxelType::U8),
        other => {
            return Err(VolumeError::Format {
                pos: 0,
                msg: format!("unknown dtype `{other}`"),
            })
        }
    };
    let expected = numel * elem;
    if payload.len() != expected {
        return Err(VolumeError::Format {
            pos: newline + 1 + payload.len().min(expected),
            msg: format!(
                "payload holds {} bytes but extents {:?} ({}) require {expected}",
                payload.len(),
                extents,
                dtype.name()
            ),
        });
    }
    let data: Vec<f32> = match dtype {
        VoxelType::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        VoxelType::U8 => payload.iter().map(|&b| b as f32).collect(),
    };
    Volume::new(extents, spacing, data)
}

/// Case directory layout: image.rvol + liver_mask.rvol + vessel_mask.rvol.
pub fn save_case(case: &CaseRecord, dir: &Path) -> Result<(), VolumeError> {
    fs::create_dir_all(dir)?;
    save_volume(&case.image, &dir.join("image.rvol"), VoxelType::F32)?;
    save_volume(&case.liver_mask, &dir.join("liver_mask.rvol"), VoxelType::U8)?;
    save_volume(&case.vessel_mask, &dir.join("vessel_mask.rvol"), VoxelType::U8)?;
    Ok(())
}

pub fn load_case(dir: &Path) -> Result<CaseRecord, VolumeError> {
    let case = CaseRecord {
        case_id: dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "case".into()),
        image: load_volume(&dir.join("image.rvol"))?,
        liver_mask: load_volume(&dir.join("liver_mask.rvol"))?,
        vessel_mask: load_volume(&dir.join("vessel_mask.rvol"))?,
    };
    case.validate()?;
    Ok(case)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn sample_volume() -> Volume {
        let mut v = Volume::zeros([3, 4, 5], [0.7, 0.8, 1.25]);
        for (i, x) in v.data_mut().iter_mut().enumerate() {
            *x = (i as f32 * 0.37).sin() * 100.0;
        }
        v
    }

    #[test]
    fn save_load_round_trip_f32() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("v.rvol");
        let v = sample_volume();
        save_volume(&v, &p, VoxelType::F32).unwrap();
        let back = load_volume(&p).unwrap();
        assert_eq!(back.extents(), v.extents());
        assert_eq!(back.spacing(), v.spacing());
        assert_eq!(back.data(), v.data());
    }

    #[test]
    fn save_load_round_trip_u8_mask() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("m.rvol");
        let mut m = Volume::zeros([4, 4, 4], [1.0, 1.0, 1.0]);
        for i in (0..64).step_by(3) {
            m.data_mut()[i] = 1.0;
        }
        save_volume(&m, &p, VoxelType::U8).unwrap();
        let back = load_volume(&p).unwrap();
        assert_eq!(back.data(), m.data());
        assert!(back.is_binary());
    }

    #[test]
    fn payload_size_mismatch_reports_position() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("bad.rvol");
        // header declares 2x2x2 but provides 7 scalars
        let mut bytes = b"RVOL1 2 2 2 1 1 1 f32\n".to_vec();
        for i in 0..7 {
            bytes.extend_from_slice(&(i as f32).to_le_bytes());
        }
        std::fs::write(&p, bytes).unwrap();
        let err = load_volume(&p).unwrap_err();
        match err {
            VolumeError::Format { pos, msg } => {
                assert!(pos > 0, "position should point into the payload");
                assert!(msg.contains("28") && msg.contains("32"), "{msg}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_header_rejected() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("bad.rvol");
        std::fs::write(&p, b"RVOL1 2 2\n").unwrap();
        assert!(matches!(
            load_volume(&p).unwrap_err(),
            VolumeError::Format { .. }
        ));
        std::fs::write(&p, b"NOPE 2 2 2 1 1 1 f32\n").unwrap();
        assert!(matches!(
            load_volume(&p).unwrap_err(),
            VolumeError::Format { .. }
        ));
    }

    #[test]
    fn case_round_trip_and_validation() {
        let dir = tempdir().unwrap();
        let image = sample_volume();
        let mut liver = Volume::zeros([3, 4, 5], [0.7, 0.8, 1.25]);
        liver.data_mut()[10] = 1.0;
        let vessel = Volume::zeros([3, 4, 5], [0.7, 0.8, 1.25]);
        let case = CaseRecord {
            case_id: "c0".into(),
            image,
            liver_mask: liver,
            vessel_mask: vessel,
        };
        case.validate().unwrap();
        let cdir = dir.path().join("c0");
        save_case(&case, &cdir).unwrap();
        let back = load_case(&cdir).unwrap();
        assert_eq!(back.case_id, "c0");
        assert_eq!(back.image.data(), case.image.data());
        assert_eq!(back.vessel_mask.data(), case.vessel_mask.data());
    }
}
