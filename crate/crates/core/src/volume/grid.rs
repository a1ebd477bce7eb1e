//! Sliding-window patch grids for tiled inference.

use super::VolumeError;

/// Origins along one axis: multiples of `stride` while the patch fits, with
/// the final origin clamped so the last patch touches the boundary. When
/// clamping the final multiple would open a gap wider than the patch, the
/// boundary origin is appended instead so coverage always holds.
fn axis_origins(extent: usize, patch: usize, stride: usize) -> Vec<usize> {
    let last = extent - patch;
    let mut v: Vec<usize> = (0..)
        .map(|k| k * stride)
        .take_while(|o| o + patch <= extent)
        .collect();
    match v.last().copied() {
        Some(o) if o == last => {}
        Some(_) if v.len() >= 2 && last <= v[v.len() - 2] + patch => {
            *v.last_mut().unwrap() = last;
        }
        Some(_) => v.push(last),
        None => v.push(last),
    }
    v
}

/// Patch origins covering `extents` with stride-spaced overlapping patches.
/// Origins are in raster order (H outermost, D innermost per origin triple
/// iteration below). Every voxel is covered by at least one patch.
pub fn sliding_window_grid(
    extents: [usize; 3],
    patch: [usize; 3],
    stride: usize,
) -> Result<Vec<[usize; 3]>, VolumeError> {
    for a in 0..3 {
        if patch[a] == 0 || patch[a] > extents[a] {
            return Err(VolumeError::InvalidArgument(format!(
                "patch {patch:?} does not fit in extents {extents:?}"
            )));
        }
    }
    if stride == 0 || (0..3).any(|a| stride > patch[a]) {
        return Err(VolumeError::InvalidArgument(format!(
            "stride {stride} must be in 1..=min(patch) for patch {patch:?}"
        )));
    }
    let hs = axis_origins(extents[0], patch[0], stride);
    let ws = axis_origins(extents[1], patch[1], stride);
    let ds = axis_origins(extents[2], patch[2], stride);
    let mut out = Vec::with_capacity(hs.len() * ws.len() * ds.len());
    for &h in &hs {
        for &w in &ws {
            for &d in &ds {
                out.push([h, w, d]);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn exact_fit_gives_single_origin() {
        let g = sliding_window_grid([128, 128, 96], [128, 128, 96], 24).unwrap();
        assert_eq!(g, vec![[0, 0, 0]]);
    }

    #[test]
    fn reference_grid_is_180_patches() {
        let g = sliding_window_grid([256, 256, 192], [128, 128, 96], 24).unwrap();
        assert_eq!(g.len(), 180);
        assert_eq!(axis_origins(256, 128, 24), vec![0, 24, 48, 72, 96, 128]);
        assert_eq!(axis_origins(192, 96, 24), vec![0, 24, 48, 72, 96]);
    }

    #[test]
    fn patch_larger_than_extent_rejected() {
        assert!(sliding_window_grid([100, 100, 50], [128, 128, 96], 24).is_err());
    }

    #[test]
    fn stride_must_not_exceed_patch() {
        assert!(sliding_window_grid([256, 256, 192], [128, 128, 96], 97).is_err());
        assert!(sliding_window_grid([256, 256, 192], [128, 128, 96], 0).is_err());
    }

    fn covered(extent: usize, patch: usize, origins: &[usize]) -> bool {
        let mut hit = vec![false; extent];
        for &o in origins {
            for x in o..o + patch {
                hit[x] = true;
            }
        }
        hit.iter().all(|&b| b)
    }

    proptest! {
        #[test]
        fn every_voxel_covered(
            patch in 1usize..40,
            extra in 0usize..100,
            stride_frac in 1usize..41,
        ) {
            let extent = patch + extra;
            let stride = stride_frac.min(patch);
            let origins = axis_origins(extent, patch, stride);
            prop_assert!(covered(extent, patch, &origins));
            // last patch touches the boundary
            prop_assert_eq!(*origins.last().unwrap(), extent - patch);
            // origins strictly increasing
            prop_assert!(origins.windows(2).all(|p| p[0] < p[1]));
        }
    }
}
