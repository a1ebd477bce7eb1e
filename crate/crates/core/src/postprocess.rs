//! Prediction clean-up: connected-component analysis, removal of small
//! components by physical volume, and morphological closing.

use crate::volume::{Volume, VolumeError};
use serde::{Deserialize, Serialize};

pub const DEFAULT_MIN_COMPONENT_MM3: f64 = 180.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Connectivity {
    Six,
    TwentySix,
}

impl Connectivity {
    fn offsets(self) -> Vec<[i64; 3]> {
        match self {
            Connectivity::Six => vec![
                [1, 0, 0],
                [-1, 0, 0],
                [0, 1, 0],
                [0, -1, 0],
                [0, 0, 1],
                [0, 0, -1],
            ],
            Connectivity::TwentySix => {
                let mut out = Vec::with_capacity(26);
                for a in -1i64..=1 {
                    for b in -1i64..=1 {
                        for c in -1i64..=1 {
                            if (a, b, c) != (0, 0, 0) {
                                out.push([a, b, c]);
                            }
                        }
                    }
                }
                out
            }
        }
    }
}

/// Flood labeling of a binary volume. Labels are 1..=K in raster order of
/// each component's first voxel; 0 is background.
#[derive(Debug, Clone)]
pub struct ComponentLabeling {
    pub extents: [usize; 3],
    pub spacing: [f64; 3],
    pub labels: Vec<u32>,
    pub sizes: Vec<usize>,
}

impl ComponentLabeling {
    pub fn component_count(&self) -> usize {
        self.sizes.len()
    }

    pub fn component_volume_mm3(&self, label: u32) -> f64 {
        let voxels = self.sizes[(label - 1) as usize] as f64;
        voxels * self.spacing[0] * self.spacing[1] * self.spacing[2]
    }
}

pub fn connected_components(
    mask: &Volume,
    connectivity: Connectivity,
) -> Result<ComponentLabeling, VolumeError> {
    if !mask.is_binary() {
        return Err(VolumeError::NotBinary("component analysis input".into()));
    }
    let e = mask.extents();
    let n = mask.numel();
    let offsets = connectivity.offsets();
    let mut labels = vec![0u32; n];
    let mut sizes = Vec::new();
    let mut stack: Vec<[usize; 3]> = Vec::new();
    for start in 0..n {
        if mask.data()[start] == 0.0 || labels[start] != 0 {
            continue;
        }
        let label = sizes.len() as u32 + 1;
        let mut size = 0usize;
        // decompose the flat index (H fastest)
        let h0 = start % e[0];
        let w0 = (start / e[0]) % e[1];
        let d0 = start / (e[0] * e[1]);
        labels[start] = label;
        stack.push([h0, w0, d0]);
        while let Some([h, w, d]) = stack.pop() {
            size += 1;
            for off in &offsets {
                let nh = h as i64 + off[0];
                let nw = w as i64 + off[1];
                let nd = d as i64 + off[2];
                if nh < 0
                    || nw < 0
                    || nd < 0
                    || nh >= e[0] as i64
                    || nw >= e[1] as i64
                    || nd >= e[2] as i64
                {
                    continue;
                }
                let (nh, nw, nd) = (nh as usize, nw as usize, nd as usize);
                let idx = mask.index(nh, nw, nd);
                if mask.data()[idx] != 0.0 && labels[idx] == 0 {
                    labels[idx] = label;
                    stack.push([nh, nw, nd]);
                }
            }
        }
        sizes.push(size);
    }
    Ok(ComponentLabeling {
        extents: e,
        spacing: mask.spacing(),
        labels,
        sizes,
    })
}

/// Keep a component iff its physical volume reaches `min_volume_mm3`
/// (components at exactly the threshold survive).
pub fn filter_small(labeling: &ComponentLabeling, min_volume_mm3: f64) -> Volume {
    let voxel = labeling.spacing[0] * labeling.spacing[1] * labeling.spacing[2];
    let keep: Vec<bool> = labeling
        .sizes
        .iter()
        .map(|&s| s as f64 * voxel >= min_volume_mm3)
        .collect();
    let data = labeling
        .labels
        .iter()
        .map(|&l| {
            if l > 0 && keep[(l - 1) as usize] {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Volume::new(labeling.extents, labeling.spacing, data).expect("labels match extents")
}

/// One separable morphology pass along `axis` (cubic structuring elements
/// factor into per-axis segments). Out-of-bounds voxels read as background.
fn morph_axis(buf: &[bool], e: [usize; 3], axis: usize, r: i64, dilate: bool) -> Vec<bool> {
    let idx = |h: usize, w: usize, d: usize| h + e[0] * (w + e[1] * d);
    let mut out = vec![false; buf.len()];
    for d in 0..e[2] {
        for w in 0..e[1] {
            for h in 0..e[0] {
                let mut acc = !dilate;
                for o in -r..=r {
                    let mut p = [h as i64, w as i64, d as i64];
                    p[axis] += o;
                    let inside = p[axis] >= 0 && p[axis] < e[axis] as i64;
                    let v = inside && buf[idx(p[0] as usize, p[1] as usize, p[2] as usize)];
                    if dilate && v {
                        acc = true;
                        break;
                    }
                    if !dilate && !v {
                        acc = false;
                        break;
                    }
                }
                out[idx(h, w, d)] = acc;
            }
        }
    }
    out
}

/// Morphological closing (dilation then erosion) with a cubic structuring
/// element of the given radius, computed on a zero-padded domain so border
/// content behaves as on an unbounded grid; the result is cropped back.
pub fn morph_close(mask: &Volume, radius: usize) -> Result<Volume, VolumeError> {
    if !mask.is_binary() {
        return Err(VolumeError::NotBinary("morphological closing input".into()));
    }
    if radius == 0 {
        return Ok(mask.clone());
    }
    let e = mask.extents();
    let r = radius;
    let pe = [e[0] + 2 * r, e[1] + 2 * r, e[2] + 2 * r];
    let pidx = |h: usize, w: usize, d: usize| h + pe[0] * (w + pe[1] * d);
    let mut buf = vec![false; pe[0] * pe[1] * pe[2]];
    for d in 0..e[2] {
        for w in 0..e[1] {
            for h in 0..e[0] {
                buf[pidx(h + r, w + r, d + r)] = mask.at(h, w, d) != 0.0;
            }
        }
    }
    for axis in 0..3 {
        buf = morph_axis(&buf, pe, axis, r as i64, true);
    }
    for axis in 0..3 {
        buf = morph_axis(&buf, pe, axis, r as i64, false);
    }
    let mut out = Volume::zeros(e, mask.spacing());
    for d in 0..e[2] {
        for w in 0..e[1] {
            for h in 0..e[0] {
                out.set(h, w, d, buf[pidx(h + r, w + r, d + r)] as u8 as f32);
            }
        }
    }
    Ok(out)
}

/// Full clean-up as applied to thresholded predictions: optional closing,
/// then removal of components below the physical-volume threshold.
pub fn postprocess_mask(
    mask: &Volume,
    connectivity: Connectivity,
    min_volume_mm3: f64,
    close_radius: Option<usize>,
) -> Result<Volume, VolumeError> {
    let closed = match close_radius {
        Some(r) => morph_close(mask, r)?,
        None => mask.clone(),
    };
    let labeling = connected_components(&closed, connectivity)?;
    Ok(filter_small(&labeling, min_volume_mm3))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask_from(extents: [usize; 3], spacing: [f64; 3], on: &[[usize; 3]]) -> Volume {
        let mut v = Volume::zeros(extents, spacing);
        for &[h, w, d] in on {
            v.set(h, w, d, 1.0);
        }
        v
    }

    #[test]
    fn face_neighbors_one_component_both_connectivities() {
        let m = mask_from([4, 4, 4], [1.0; 3], &[[1, 1, 1], [2, 1, 1]]);
        for conn in [Connectivity::Six, Connectivity::TwentySix] {
            let l = connected_components(&m, conn).unwrap();
            assert_eq!(l.component_count(), 1);
            assert_eq!(l.sizes, vec![2]);
        }
    }

    #[test]
    fn corner_neighbors_split_at_six_connectivity() {
        let m = mask_from([4, 4, 4], [1.0; 3], &[[1, 1, 1], [2, 2, 2]]);
        let six = connected_components(&m, Connectivity::Six).unwrap();
        assert_eq!(six.component_count(), 2);
        let full = connected_components(&m, Connectivity::TwentySix).unwrap();
        assert_eq!(full.component_count(), 1);
    }

    #[test]
    fn empty_mask_has_no_components() {
        let m = Volume::zeros([3, 3, 3], [1.0; 3]);
        let l = connected_components(&m, Connectivity::TwentySix).unwrap();
        assert_eq!(l.component_count(), 0);
        assert!(filter_small(&l, 180.0).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn labels_in_raster_order_of_first_voxel() {
        let m = mask_from([8, 1, 1], [1.0; 3], &[[6, 0, 0], [0, 0, 0], [3, 0, 0]]);
        let l = connected_components(&m, Connectivity::Six).unwrap();
        assert_eq!(l.labels[0], 1);
        assert_eq!(l.labels[3], 2);
        assert_eq!(l.labels[6], 3);
    }

    #[test]
    fn volume_threshold_at_unit_spacing() {
        // 179 voxels removed, 181 voxels kept at spacing (1,1,1)
        let mut m = Volume::zeros([400, 1, 1], [1.0; 3]);
        for h in 0..179 {
            m.set(h, 0, 0, 1.0);
        }
        for h in 200..381 {
            m.set(h, 0, 0, 1.0);
        }
        let l = connected_components(&m, Connectivity::TwentySix).unwrap();
        assert_eq!(l.sizes, vec![179, 181]);
        let kept = filter_small(&l, 180.0);
        assert_eq!(kept.at(0, 0, 0), 0.0, "179-voxel component removed");
        assert_eq!(kept.at(200, 0, 0), 1.0, "181-voxel component kept");
        assert_eq!(kept.foreground_count(), 181);
    }

    #[test]
    fn volume_threshold_scales_with_spacing() {
        // 23 voxels at spacing (2,2,2) = 184 mm^3, above threshold
        let mut m = Volume::zeros([23, 1, 1], [2.0; 3]);
        for h in 0..23 {
            m.set(h, 0, 0, 1.0);
        }
        let l = connected_components(&m, Connectivity::Six).unwrap();
        assert!((l.component_volume_mm3(1) - 184.0).abs() < 1e-9);
        let kept = filter_small(&l, 180.0);
        assert_eq!(kept.foreground_count(), 23);
    }

    #[test]
    fn exact_threshold_component_is_kept() {
        let mut m = Volume::zeros([180, 1, 1], [1.0; 3]);
        for h in 0..180 {
            m.set(h, 0, 0, 1.0);
        }
        let l = connected_components(&m, Connectivity::Six).unwrap();
        let kept = filter_small(&l, 180.0);
        assert_eq!(kept.foreground_count(), 180);
    }

    #[test]
    fn filter_output_is_subset_meeting_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..10 {
            let mut m = Volume::zeros([12, 12, 12], [1.0; 3]);
            for v in m.data_mut() {
                *v = (rng.gen::<f64>() < 0.2) as u8 as f32;
            }
            let l = connected_components(&m, Connectivity::TwentySix).unwrap();
            let kept = filter_small(&l, 5.0);
            // subset of input
            for (a, b) in kept.data().iter().zip(m.data()) {
                assert!(*a == 0.0 || *b == 1.0);
            }
            // every surviving component meets the threshold
            let l2 = connected_components(&kept, Connectivity::TwentySix).unwrap();
            for &s in &l2.sizes {
                assert!(s as f64 >= 5.0);
            }
        }
    }

    #[test]
    fn components_partition_foreground_and_are_maximal() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut m = Volume::zeros([10, 10, 10], [1.0; 3]);
        for v in m.data_mut() {
            *v = (rng.gen::<f64>() < 0.25) as u8 as f32;
        }
        let l = connected_components(&m, Connectivity::Six).unwrap();
        // every foreground voxel labeled, background unlabeled
        for (i, &v) in m.data().iter().enumerate() {
            assert_eq!(l.labels[i] > 0, v != 0.0);
        }
        // sizes sum to foreground count
        assert_eq!(l.sizes.iter().sum::<usize>(), m.foreground_count());
        // maximality: no two distinct labels are face-adjacent
        let e = m.extents();
        for d in 0..e[2] {
            for w in 0..e[1] {
                for h in 0..e[0] {
                    let a = l.labels[m.index(h, w, d)];
                    if a == 0 {
                        continue;
                    }
                    for (nh, nw, nd) in
                        [(h + 1, w, d), (h, w + 1, d), (h, w, d + 1)]
                    {
                        if nh < e[0] && nw < e[1] && nd < e[2] {
                            let b = l.labels[m.index(nh, nw, nd)];
                            if b != 0 {
                                assert_eq!(a, b, "face-adjacent voxels differ in label");
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn closing_reference_cases() {
        // solid cube unchanged
        let mut cube = Volume::zeros([7, 7, 7], [1.0; 3]);
        for d in 1..6 {
            for w in 1..6 {
                for h in 1..6 {
                    cube.set(h, w, d, 1.0);
                }
            }
        }
        let closed = morph_close(&cube, 1).unwrap();
        assert_eq!(closed.data(), cube.data());

        // single-voxel hole inside the cube gets filled
        let mut holed = cube.clone();
        holed.set(3, 3, 3, 0.0);
        let closed = morph_close(&holed, 1).unwrap();
        assert_eq!(closed.at(3, 3, 3), 1.0);
        assert_eq!(closed.data(), cube.data());
    }

    #[test]
    fn closing_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let mut m = Volume::zeros([9, 9, 9], [1.0; 3]);
            for v in m.data_mut() {
                *v = (rng.gen::<f64>() < 0.3) as u8 as f32;
            }
            let once = morph_close(&m, 1).unwrap();
            let twice = morph_close(&once, 1).unwrap();
            assert_eq!(once.data(), twice.data());
        }
    }
}
