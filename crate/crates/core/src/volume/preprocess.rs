//! Four-step case preprocessing: ROI crop + resize, HU clamp, vessel-mask
//! supplement, z-score normalization. The pipeline resamples exactly once
//! (the crop-and-resize step); nothing downstream resamples again.

use super::{CaseRecord, Volume, VolumeError};

pub const HU_CLAMP_LO: f32 = -50.0;
pub const HU_CLAMP_HI: f32 = 250.0;

/// Clip intensities to `[lo, hi]`; metadata unchanged.
pub fn clamp_hu(v: &Volume, lo: f32, hi: f32) -> Result<Volume, VolumeError> {
    if !(lo < hi) {
        return Err(VolumeError::InvalidArgument(format!(
            "clamp bounds must satisfy lo < hi, got [{lo}, {hi}]"
        )));
    }
    let mut out = v.clone();
    for x in out.data_mut() {
        *x = x.clamp(lo, hi);
    }
    Ok(out)
}

/// Inclusive bounding box of the nonzero voxels, or None for an empty mask.
pub fn bounding_box(mask: &Volume) -> Option<([usize; 3], [usize; 3])> {
    let e = mask.extents();
    let mut lo = e;
    let mut hi = [0usize; 3];
    let mut any = false;
    for d in 0..e[2] {
        for w in 0..e[1] {
            for h in 0..e[0] {
                if mask.at(h, w, d) != 0.0 {
                    any = true;
                    let p = [h, w, d];
                    for a in 0..3 {
                        lo[a] = lo[a].min(p[a]);
                        hi[a] = hi[a].max(p[a]);
                    }
                }
            }
        }
    }
    any.then_some((lo, hi))
}

fn crop(v: &Volume, lo: [usize; 3], hi: [usize; 3]) -> Volume {
    let ext = [hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1];
    let mut out = Volume::zeros(ext, v.spacing());
    for d in 0..ext[2] {
        for w in 0..ext[1] {
            for h in 0..ext[0] {
                out.set(h, w, d, v.at(lo[0] + h, lo[1] + w, lo[2] + d));
            }
        }
    }
    out
}

/// Source coordinate for an output index: endpoints map to endpoints.
fn src_coord(i: usize, n_in: usize, n_out: usize) -> f64 {
    if n_in <= 1 || n_out <= 1 {
        0.0
    } else {
        i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
    }
}

fn resized_spacing(v: &Volume, target: [usize; 3]) -> [f64; 3] {
    let e = v.extents();
    let s = v.spacing();
    [
        s[0] * e[0] as f64 / target[0] as f64,
        s[1] * e[1] as f64 / target[1] as f64,
        s[2] * e[2] as f64 / target[2] as f64,
    ]
}

pub fn resize_trilinear(v: &Volume, target: [usize; 3]) -> Volume {
    let e = v.extents();
    if e == target {
        return v.clone();
    }
    let mut out = Volume::zeros(target, resized_spacing(v, target));
    for d in 0..target[2] {
        let fz = src_coord(d, e[2], target[2]);
        let (z0, fz) = (fz.floor() as usize, fz.fract());
        let z1 = (z0 + 1).min(e[2] - 1);
        for w in 0..target[1] {
            let fy = src_coord(w, e[1], target[1]);
            let (y0, fy) = (fy.floor() as usize, fy.fract());
            let y1 = (y0 + 1).min(e[1] - 1);
            for h in 0..target[0] {
                let fx = src_coord(h, e[0], target[0]);
                let (x0, fx) = (fx.floor() as usize, fx.fract());
                let x1 = (x0 + 1).min(e[0] - 1);
                let mut acc = 0.0f64;
                for (zc, wz) in [(z0, 1.0 - fz), (z1, fz)] {
                    for (yc, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                        for (xc, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                            let wgt = wz * wy * wx;
                            if wgt != 0.0 {
                                acc += wgt * v.at(xc, yc, zc) as f64;
                            }
                        }
                    }
                }
                out.set(h, w, d, acc as f32);
            }
        }
    }
    out
}

pub fn resize_nearest(v: &Volume, target: [usize; 3]) -> Volume {
    let e = v.extents();
    if e == target {
        return v.clone();
    }
    let mut out = Volume::zeros(target, resized_spacing(v, target));
    for d in 0..target[2] {
        let z = src_coord(d, e[2], target[2]).round() as usize;
        for w in 0..target[1] {
            let y = src_coord(w, e[1], target[1]).round() as usize;
            for h in 0..target[0] {
                let x = src_coord(h, e[0], target[0]).round() as usize;
                out.set(h, w, d, v.at(x.min(e[0] - 1), y.min(e[1] - 1), z.min(e[2] - 1)));
            }
        }
    }
    out
}

/// Crop every volume of the case to the liver-mask bounding box and resize to
/// `target` (trilinear for the image, nearest for masks).
pub fn crop_resize_roi(case: &CaseRecord, target: [usize; 3]) -> Result<CaseRecord, VolumeError> {
    case.image.check_same_extents(&case.liver_mask)?;
    case.image.check_same_extents(&case.vessel_mask)?;
    let (lo, hi) = bounding_box(&case.liver_mask).ok_or(VolumeError::DegenerateRoi)?;
    if target.iter().any(|&t| t == 0) {
        return Err(VolumeError::InvalidArgument("zero target extent".into()));
    }
    Ok(CaseRecord {
        case_id: case.case_id.clone(),
        image: resize_trilinear(&crop(&case.image, lo, hi), target),
        liver_mask: resize_nearest(&crop(&case.liver_mask, lo, hi), target),
        vessel_mask: resize_nearest(&crop(&case.vessel_mask, lo, hi), target),
    })
}

/// Keep vessel voxels outside the liver as supplementary labels: the vessel
/// mask is taken as-is, never intersected with the liver mask.
pub fn supplement_vessel_mask(vessel: &Volume, liver: &Volume) -> Result<Volume, VolumeError> {
    vessel.check_same_extents(liver)?;
    Ok(vessel.clone())
}

/// Shift and scale to zero mean, unit variance over all voxels.
pub fn normalize_zscore(v: &Volume) -> Result<Volume, VolumeError> {
    let (mean, var) = v.mean_and_variance();
    if var == 0.0 {
        return Err(VolumeError::DegenerateStats);
    }
    let inv_std = 1.0 / var.sqrt();
    let mut out = v.clone();
    for x in out.data_mut() {
        *x = ((*x as f64 - mean) * inv_std) as f32;
    }
    Ok(out)
}

/// The full fixed-order pipeline: crop/resize -> clamp -> supplement ->
/// normalize. Masks only pass through the geometric step.
pub fn preprocess_case(case: &CaseRecord, target: [usize; 3]) -> Result<CaseRecord, VolumeError> {
    let c = crop_resize_roi(case, target)?;
    let image = clamp_hu(&c.image, HU_CLAMP_LO, HU_CLAMP_HI)?;
    let vessel_mask = supplement_vessel_mask(&c.vessel_mask, &c.liver_mask)?;
    let image = normalize_zscore(&image)?;
    Ok(CaseRecord {
        case_id: c.case_id,
        image,
        liver_mask: c.liver_mask,
        vessel_mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_volume(extents: [usize; 3]) -> Volume {
        let mut v = Volume::zeros(extents, [1.0, 1.0, 1.0]);
        for (i, x) in v.data_mut().iter_mut().enumerate() {
            *x = -400.0 + i as f32 * 7.0;
        }
        v
    }

    #[test]
    fn clamp_reference_values() {
        let mut v = Volume::zeros([2, 2, 1], [1.0, 1.0, 1.0]);
        v.data_mut().copy_from_slice(&[300.0, -400.0, 0.0, 250.0]);
        let c = clamp_hu(&v, -50.0, 250.0).unwrap();
        assert_eq!(c.data(), &[250.0, -50.0, 0.0, 250.0]);
        assert_eq!(c.min_value(), -50.0);
        assert_eq!(c.max_value(), 250.0);

        // already in range -> unchanged
        let mut v2 = Volume::zeros([2, 1, 1], [1.0, 1.0, 1.0]);
        v2.data_mut().copy_from_slice(&[-50.0, 249.0]);
        assert_eq!(clamp_hu(&v2, -50.0, 250.0).unwrap().data(), v2.data());

        assert!(clamp_hu(&v, 10.0, 10.0).is_err());
    }

    #[test]
    fn bounding_box_cases() {
        let mut m = Volume::zeros([10, 10, 10], [1.0, 1.0, 1.0]);
        assert!(bounding_box(&m).is_none());
        m.set(5, 6, 7, 1.0);
        assert_eq!(bounding_box(&m), Some(([5, 6, 7], [5, 6, 7])));
        // full mask -> full box
        let full = Volume::new([3, 3, 3], [1.0; 3], vec![1.0; 27]).unwrap();
        assert_eq!(bounding_box(&full), Some(([0, 0, 0], [2, 2, 2])));
    }

    #[test]
    fn crop_resize_roi_reaches_target_extents() {
        let image = ramp_volume([20, 22, 18]);
        let mut liver = Volume::zeros([20, 22, 18], [1.0, 1.0, 1.0]);
        for d in 4..14 {
            for w in 3..19 {
                for h in 2..17 {
                    liver.set(h, w, d, 1.0);
                }
            }
        }
        let mut vessel = Volume::zeros([20, 22, 18], [1.0, 1.0, 1.0]);
        vessel.set(10, 10, 8, 1.0);
        let case = CaseRecord {
            case_id: "t".into(),
            image,
            liver_mask: liver,
            vessel_mask: vessel,
        };
        let out = crop_resize_roi(&case, [32, 32, 24]).unwrap();
        assert_eq!(out.image.extents(), [32, 32, 24]);
        assert_eq!(out.liver_mask.extents(), [32, 32, 24]);
        assert!(out.liver_mask.is_binary());
        assert!(out.vessel_mask.is_binary());

        // empty liver -> degenerate ROI
        let empty = CaseRecord {
            liver_mask: Volume::zeros([20, 22, 18], [1.0, 1.0, 1.0]),
            ..case
        };
        assert!(matches!(
            crop_resize_roi(&empty, [32, 32, 24]),
            Err(VolumeError::DegenerateRoi)
        ));
    }

    #[test]
    fn full_mask_crop_is_identity_then_resize() {
        let image = ramp_volume([8, 8, 8]);
        let liver = Volume::new([8, 8, 8], [1.0; 3], vec![1.0; 512]).unwrap();
        let vessel = Volume::zeros([8, 8, 8], [1.0; 3]);
        let case = CaseRecord {
            case_id: "t".into(),
            image: image.clone(),
            liver_mask: liver,
            vessel_mask: vessel,
        };
        // same target as input: crop is identity, resize is identity
        let out = crop_resize_roi(&case, [8, 8, 8]).unwrap();
        assert_eq!(out.image.data(), image.data());
    }

    #[test]
    fn supplement_keeps_extra_hepatic_vessels() {
        let mut vessel = Volume::zeros([4, 4, 4], [1.0; 3]);
        vessel.set(0, 0, 0, 1.0); // outside liver
        vessel.set(2, 2, 2, 1.0); // inside liver
        let mut liver = Volume::zeros([4, 4, 4], [1.0; 3]);
        liver.set(2, 2, 2, 1.0);
        let out = supplement_vessel_mask(&vessel, &liver).unwrap();
        assert_eq!(out.at(0, 0, 0), 1.0, "extra-hepatic voxel must be retained");
        assert_eq!(out.at(2, 2, 2), 1.0);
        assert_eq!(out.foreground_count(), 2);

        // empty vessel mask stays empty
        let empty = Volume::zeros([4, 4, 4], [1.0; 3]);
        assert_eq!(
            supplement_vessel_mask(&empty, &liver)
                .unwrap()
                .foreground_count(),
            0
        );

        let wrong = Volume::zeros([4, 4, 5], [1.0; 3]);
        assert!(matches!(
            supplement_vessel_mask(&vessel, &wrong),
            Err(VolumeError::ExtentMismatch { .. })
        ));
    }

    #[test]
    fn normalize_reference_and_idempotence() {
        // {0, 2} equally frequent -> {-1, +1}
        let v = Volume::new([2, 2, 1], [1.0; 3], vec![0.0, 2.0, 0.0, 2.0]).unwrap();
        let n = normalize_zscore(&v).unwrap();
        assert_eq!(n.data(), &[-1.0, 1.0, -1.0, 1.0]);

        let (mean, var) = n.mean_and_variance();
        assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-5);

        // applying twice equals applying once (within float tolerance)
        let again = normalize_zscore(&n).unwrap();
        for (a, b) in again.data().iter().zip(n.data()) {
            assert!((a - b).abs() < 1e-6);
        }

        let constant = Volume::new([2, 1, 1], [1.0; 3], vec![3.0, 3.0]).unwrap();
        assert!(matches!(
            normalize_zscore(&constant),
            Err(VolumeError::DegenerateStats)
        ));
    }

    #[test]
    fn normalize_random_volume_statistics() {
        let v = ramp_volume([6, 5, 4]);
        let n = normalize_zscore(&v).unwrap();
        let (mean, var) = n.mean_and_variance();
        assert!(mean.abs() < 1e-6, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-5, "var {var}");
    }

    #[test]
    fn pipeline_applied_twice_leaves_masks_unchanged() {
        // After one pass the liver mask touches every face of the volume, so
        // the second crop/resize is the identity on the masks.
        let mut image = Volume::zeros([16, 14, 12], [1.0; 3]);
        for (i, x) in image.data_mut().iter_mut().enumerate() {
            *x = (i as f32 * 0.37).sin() * 100.0; // varied inside [-100, 100]
        }
        let mut liver = Volume::zeros([16, 14, 12], [1.0; 3]);
        for d in 2..10 {
            for w in 3..12 {
                for h in 4..15 {
                    liver.set(h, w, d, 1.0);
                }
            }
        }
        let mut vessel = Volume::zeros([16, 14, 12], [1.0; 3]);
        for h in 6..12 {
            vessel.set(h, 7, 6, 1.0);
        }
        let case = CaseRecord {
            case_id: "t".into(),
            image,
            liver_mask: liver,
            vessel_mask: vessel,
        };
        let target = [16, 16, 16];
        let once = preprocess_case(&case, target).unwrap();
        let twice = preprocess_case(&once, target).unwrap();
        assert_eq!(once.liver_mask.data(), twice.liver_mask.data());
        assert_eq!(once.vessel_mask.data(), twice.vessel_mask.data());
    }
}
