//! 3D window machinery: partition/merge, cyclic shift, shifted-window
//! attention masks, and the relative-position bias index map.
//!
//! All data movement is expressed as row index maps (one row per token) so
//! the same maps drive both plain tensors and tape nodes.

use crate::tensor::{Scalar, Tensor};
use std::sync::Arc;
use thiserror::Error;

/// Additive mask value for forbidden token pairs. Large enough that the
/// pair's softmax weight underflows to zero even in 32-bit.
pub const MASK_VALUE: f64 = -1e4;

#[derive(Debug, Error)]
pub enum WindowError {
    #[error("token grid {grid:?} is not divisible by window {window:?}; pad the token grid to the next multiple (adaptive resize), then crop after merging")]
    NotDivisible {
        grid: [usize; 3],
        window: [usize; 3],
    },
    #[error("window set ({windows} windows of {per_window} tokens) does not cover grid {grid:?}")]
    CountMismatch {
        windows: usize,
        per_window: usize,
        grid: [usize; 3],
    },
    #[error("window extents must be >= 1, got {0:?}")]
    EmptyWindow([usize; 3]),
    #[error("token count mismatch: expected {expected} rows, tensor has {got}")]
    TokenCount { expected: usize, got: usize },
}

/// Window geometry: per-axis window extents and the half-window shift used by
/// the second block of each pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowConfig {
    pub window: [usize; 3],
}

impl WindowConfig {
    pub fn new(window: [usize; 3]) -> Result<Self, WindowError> {
        if window.iter().any(|&s| s == 0) {
            return Err(WindowError::EmptyWindow(window));
        }
        Ok(WindowConfig { window })
    }

    pub fn cubic(s: usize) -> Result<Self, WindowError> {
        Self::new([s, s, s])
    }

    /// Half-window shift, floored.
    pub fn shift(&self) -> [usize; 3] {
        [self.window[0] / 2, self.window[1] / 2, self.window[2] / 2]
    }

    /// Tokens per window, P.
    pub fn tokens_per_window(&self) -> usize {
        self.window.iter().product()
    }

    /// Number of windows for a divisible grid.
    pub fn window_count(&self, grid: [usize; 3]) -> Result<usize, WindowError> {
        self.check_divisible(grid)?;
        Ok((0..3).map(|a| grid[a] / self.window[a]).product())
    }

    pub fn check_divisible(&self, grid: [usize; 3]) -> Result<(), WindowError> {
        if (0..3).any(|a| grid[a] % self.window[a] != 0 || grid[a] == 0) {
            return Err(WindowError::NotDivisible {
                grid,
                window: self.window,
            });
        }
        Ok(())
    }

    /// Smallest grid >= `grid` divisible by the window extents.
    pub fn padded_grid(&self, grid: [usize; 3]) -> [usize; 3] {
        let mut out = grid;
        for a in 0..3 {
            out[a] = grid[a].div_ceil(self.window[a]) * self.window[a];
        }
        out
    }
}

fn grid_index(grid: [usize; 3], h: usize, w: usize, d: usize) -> usize {
    (h * grid[1] + w) * grid[2] + d
}

/// Token row map realizing window partition: output rows are ordered by
/// window raster position then in-window raster position.
pub fn partition_map(grid: [usize; 3], cfg: &WindowConfig) -> Result<Vec<i64>, WindowError> {
    cfg.check_divisible(grid)?;
    let [sh, sw, sd] = cfg.window;
    let (nh, nw, nd) = (grid[0] / sh, grid[1] / sw, grid[2] / sd);
    let mut map = Vec::with_capacity(grid[0] * grid[1] * grid[2]);
    for wh in 0..nh {
        for ww in 0..nw {
            for wd in 0..nd {
                for i in 0..sh {
                    for j in 0..sw {
                        for k in 0..sd {
                            map.push(grid_index(
                                grid,
                                wh * sh + i,
                                ww * sw + j,
                                wd * sd + k,
                            ) as i64);
                        }
                    }
                }
            }
        }
    }
    Ok(map)
}

/// Inverse of `partition_map`: output rows are grid raster order.
pub fn merge_map(grid: [usize; 3], cfg: &WindowConfig) -> Result<Vec<i64>, WindowError> {
    let fwd = partition_map(grid, cfg)?;
    let mut inv = vec![0i64; fwd.len()];
    for (dst, &src) in fwd.iter().enumerate() {
        inv[src as usize] = dst as i64;
    }
    Ok(inv)
}

/// Toroidal roll: content at grid position q appears at q - offset (mod
/// extent), i.e. out[j] = in[(j + offset) mod extent] along each axis.
pub fn shift_map(grid: [usize; 3], offsets: [i64; 3]) -> Vec<i64> {
    let wrap = |v: i64, e: usize| -> usize {
        let e = e as i64;
        (((v % e) + e) % e) as usize
    };
    let mut map = Vec::with_capacity(grid[0] * grid[1] * grid[2]);
    for h in 0..grid[0] {
        for w in 0..grid[1] {
            for d in 0..grid[2] {
                let sh = wrap(h as i64 + offsets[0], grid[0]);
                let sw = wrap(w as i64 + offsets[1], grid[1]);
                let sd = wrap(d as i64 + offsets[2], grid[2]);
                map.push(grid_index(grid, sh, sw, sd) as i64);
            }
        }
    }
    map
}

/// Map embedding a grid into a larger zero-padded grid (row -1 = fill zero).
pub fn pad_map(from: [usize; 3], to: [usize; 3]) -> Vec<i64> {
    debug_assert!((0..3).all(|a| to[a] >= from[a]));
    let mut map = Vec::with_capacity(to[0] * to[1] * to[2]);
    for h in 0..to[0] {
        for w in 0..to[1] {
            for d in 0..to[2] {
                if h < from[0] && w < from[1] && d < from[2] {
                    map.push(grid_index(from, h, w, d) as i64);
                } else {
                    map.push(-1);
                }
            }
        }
    }
    map
}

/// Map cropping a padded grid back to the original extents.
pub fn crop_map(from: [usize; 3], to: [usize; 3]) -> Vec<i64> {
    debug_assert!((0..3).all(|a| to[a] <= from[a]));
    let mut map = Vec::with_capacity(to[0] * to[1] * to[2]);
    for h in 0..to[0] {
        for w in 0..to[1] {
            for d in 0..to[2] {
                map.push(grid_index(from, h, w, d) as i64);
            }
        }
    }
    map
}

fn apply_row_map<T: Scalar>(t: &Tensor<T>, map: &[i64], row: usize, shape: Vec<usize>) -> Tensor<T> {
    let mut out = vec![T::zero(); map.len() * row];
    for (r, &m) in map.iter().enumerate() {
        if m >= 0 {
            let s = m as usize * row;
            out[r * row..(r + 1) * row].copy_from_slice(&t.data()[s..s + row]);
        }
    }
    Tensor::new(shape, out).expect("map length matches shape")
}

/// Partition a channels-last token grid `[h, w, d, C]` into `[N, P, C]`.
pub fn partition_windows<T: Scalar>(
    t: &Tensor<T>,
    cfg: &WindowConfig,
) -> Result<Tensor<T>, WindowError> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(WindowError::TokenCount {
            expected: 4,
            got: s.len(),
        });
    }
    let grid = [s[0], s[1], s[2]];
    let c = s[3];
    let map = partition_map(grid, cfg)?;
    let n = cfg.window_count(grid)?;
    let p = cfg.tokens_per_window();
    Ok(apply_row_map(t, &map, c, vec![n, p, c]))
}

/// Exact inverse of `partition_windows`.
pub fn merge_windows<T: Scalar>(
    ws: &Tensor<T>,
    grid: [usize; 3],
    cfg: &WindowConfig,
) -> Result<Tensor<T>, WindowError> {
    let s = ws.shape();
    if s.len() != 3 {
        return Err(WindowError::TokenCount {
            expected: 3,
            got: s.len(),
        });
    }
    let (n, p, c) = (s[0], s[1], s[2]);
    if n * p != grid[0] * grid[1] * grid[2] {
        return Err(WindowError::CountMismatch {
            windows: n,
            per_window: p,
            grid,
        });
    }
    let map = merge_map(grid, cfg)?;
    Ok(apply_row_map(ws, &map, c, vec![grid[0], grid[1], grid[2], c]))
}

/// Toroidal roll of a `[h, w, d, C]` token grid.
pub fn cyclic_shift<T: Scalar>(t: &Tensor<T>, offsets: [i64; 3]) -> Tensor<T> {
    let s = t.shape();
    let grid = [s[0], s[1], s[2]];
    let map = shift_map(grid, offsets);
    apply_row_map(t, &map, s[3], s.to_vec())
}

/// Region labels in the cyclic-shifted frame. Positions whose contents
/// originate from the same pre-shift region share a label; padding tokens
/// (from `valid`, given in the unshifted frame) all receive a dedicated
/// label so real tokens never attend across them.
fn region_labels(
    grid: [usize; 3],
    cfg: &WindowConfig,
    shifted: bool,
    valid: Option<&[bool]>,
) -> Vec<i64> {
    let n = grid[0] * grid[1] * grid[2];
    let mut labels = vec![0i64; n];
    if shifted {
        let shift = cfg.shift();
        let seg = |x: usize, extent: usize, s: usize, win: usize| -> i64 {
            if s == 0 {
                0
            } else if x < extent - win {
                0
            } else if x < extent - s {
                1
            } else {
                2
            }
        };
        let mut idx = 0;
        for h in 0..grid[0] {
            let lh = seg(h, grid[0], shift[0], cfg.window[0]);
            for w in 0..grid[1] {
                let lw = seg(w, grid[1], shift[1], cfg.window[1]);
                for d in 0..grid[2] {
                    let ld = seg(d, grid[2], shift[2], cfg.window[2]);
                    labels[idx] = (lh * 3 + lw) * 3 + ld;
                    idx += 1;
                }
            }
        }
    }
    if let Some(valid) = valid {
        debug_assert_eq!(valid.len(), n);
        // A padding token at unshifted position q sits at (q - offset) mod
        // extent after the roll; equivalently, shifted position j holds the
        // content of (j + offset) mod extent.
        let offsets = if shifted {
            let s = cfg.shift();
            [s[0] as i64, s[1] as i64, s[2] as i64]
        } else {
            [0, 0, 0]
        };
        let map = shift_map(grid, offsets);
        for (j, &src) in map.iter().enumerate() {
            if !valid[src as usize] {
                labels[j] = 27;
            }
        }
    }
    labels
}

/// Per-window additive attention mask `[N, P, P]`: 0 where the token pair
/// originates from the same pre-shift region, `MASK_VALUE` otherwise.
pub fn build_shift_mask<T: Scalar>(
    grid: [usize; 3],
    cfg: &WindowConfig,
    shifted: bool,
    valid: Option<&[bool]>,
) -> Result<Tensor<T>, WindowError> {
    cfg.check_divisible(grid)?;
    let labels = region_labels(grid, cfg, shifted, valid);
    let part = partition_map(grid, cfg)?;
    let n = cfg.window_count(grid)?;
    let p = cfg.tokens_per_window();
    let mask_v = T::from_f64(MASK_VALUE);
    let mut mask = vec![T::zero(); n * p * p];
    for win in 0..n {
        let rows = &part[win * p..(win + 1) * p];
        let m = &mut mask[win * p * p..(win + 1) * p * p];
        for i in 0..p {
            let li = labels[rows[i] as usize];
            for j in 0..p {
                if li != labels[rows[j] as usize] {
                    m[i * p + j] = mask_v;
                }
            }
        }
    }
    Tensor::new(vec![n, p, p], mask).map_err(|_| WindowError::CountMismatch {
        windows: n,
        per_window: p,
        grid,
    })
}

/// Number of distinct content regions in the naive shifted partition
/// (the per-axis segment counts multiplied together).
pub fn naive_region_count(grid: [usize; 3], cfg: &WindowConfig) -> usize {
    let shift = cfg.shift();
    (0..3)
        .map(|a| {
            if shift[a] == 0 {
                grid[a] / cfg.window[a]
            } else {
                grid[a] / cfg.window[a] + 1
            }
        })
        .product()
}

/// Relative-position bias indexing: a `(2S_H-1)(2S_W-1)(2S_D-1)` table and a
/// P x P map sending each token pair to its displacement's table slot.
#[derive(Debug, Clone)]
pub struct RelPosIndex {
    pub table_dims: [usize; 3],
    pub index_map: Arc<Vec<usize>>,
    pub tokens: usize,
}

impl RelPosIndex {
    pub fn table_size(&self) -> usize {
        self.table_dims.iter().product()
    }
}

/// Build the displacement index map for a window. The displacement of token
/// j from token i along each axis lies in [-(S-1), S-1]; each axis offset by
/// S-1 gives a bijective index into the table.
pub fn build_rel_pos_index(cfg: &WindowConfig) -> RelPosIndex {
    let [sh, sw, sd] = cfg.window;
    let dims = [2 * sh - 1, 2 * sw - 1, 2 * sd - 1];
    let p = cfg.tokens_per_window();
    let mut pos = Vec::with_capacity(p);
    for i in 0..sh {
        for j in 0..sw {
            for k in 0..sd {
                pos.push([i as i64, j as i64, k as i64]);
            }
        }
    }
    let mut map = Vec::with_capacity(p * p);
    for a in &pos {
        for b in &pos {
            let dh = (b[0] - a[0] + sh as i64 - 1) as usize;
            let dw = (b[1] - a[1] + sw as i64 - 1) as usize;
            let dd = (b[2] - a[2] + sd as i64 - 1) as usize;
            map.push((dh * dims[1] + dw) * dims[2] + dd);
        }
    }
    RelPosIndex {
        table_dims: dims,
        index_map: Arc::new(map),
        tokens: p,
    }
}

/// Expand a per-head bias table `[n_h, table_size]` to per-pair biases
/// `[n_h, P, P]` through the displacement index map.
pub fn gather_bias<T: Scalar>(
    table: &Tensor<T>,
    idx: &RelPosIndex,
) -> Result<Tensor<T>, WindowError> {
    let s = table.shape();
    if s.len() != 2 || s[1] != idx.table_size() {
        return Err(WindowError::TokenCount {
            expected: idx.table_size(),
            got: if s.len() == 2 { s[1] } else { 0 },
        });
    }
    let (heads, tsize) = (s[0], s[1]);
    let p = idx.tokens;
    let mut out = vec![T::zero(); heads * p * p];
    for h in 0..heads {
        let trow = &table.data()[h * tsize..(h + 1) * tsize];
        let orow = &mut out[h * p * p..(h + 1) * p * p];
        for (o, &i) in orow.iter_mut().zip(idx.index_map.iter()) {
            *o = trow[i];
        }
    }
    Ok(Tensor::new(vec![heads, p, p], out).expect("shape"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Initializer;
    use proptest::prelude::*;

    #[test]
    fn partition_counts_match_reference_grids() {
        let cfg = WindowConfig::cubic(4).unwrap();
        assert_eq!(cfg.window_count([8, 8, 8]).unwrap(), 8);
        assert_eq!(cfg.window_count([4, 4, 4]).unwrap(), 1);
        assert_eq!(cfg.tokens_per_window(), 64);
        assert!(matches!(
            cfg.window_count([6, 8, 8]),
            Err(WindowError::NotDivisible { .. })
        ));
    }

    #[test]
    fn single_window_partition_is_identity() {
        let mut init = Initializer::new(3);
        let t: Tensor<f32> = init.uniform(&[4, 4, 4, 3], -1.0, 1.0);
        let cfg = WindowConfig::cubic(4).unwrap();
        let ws = partition_windows(&t, &cfg).unwrap();
        assert_eq!(ws.shape(), &[1, 64, 3]);
        assert_eq!(ws.data(), t.data());
    }

    #[test]
    fn permuted_windows_do_not_merge_back() {
        let mut init = Initializer::new(5);
        let t: Tensor<f32> = init.uniform(&[4, 4, 8, 2], -1.0, 1.0);
        let cfg = WindowConfig::cubic(4).unwrap();
        let ws = partition_windows(&t, &cfg).unwrap();
        // swap the two windows
        let p = cfg.tokens_per_window() * 2;
        let mut swapped = ws.data().to_vec();
        swapped.rotate_left(p);
        let ws2 = Tensor::new(ws.shape().to_vec(), swapped).unwrap();
        let merged = merge_windows(&ws2, [4, 4, 8], &cfg).unwrap();
        assert_ne!(merged.data(), t.data());
    }

    #[test]
    fn cyclic_shift_identity_and_inverse() {
        let mut init = Initializer::new(7);
        let t: Tensor<f32> = init.uniform(&[4, 6, 8, 2], -1.0, 1.0);
        let same = cyclic_shift(&t, [0, 0, 0]);
        assert_eq!(same.data(), t.data());
        let back = cyclic_shift(&cyclic_shift(&t, [2, 2, 2]), [-2, -2, -2]);
        assert_eq!(back.data(), t.data());
    }

    #[test]
    fn cyclic_shift_marker_convention() {
        // marker at (0,0,0), offsets (2,2,2): content moves by -offset,
        // landing at (h-2, w-2, d-2).
        let mut t = Tensor::<f32>::zeros(&[6, 5, 4, 1]);
        t.data_mut()[0] = 1.0;
        let rolled = cyclic_shift(&t, [2, 2, 2]);
        let at = ((6 - 2) * 5 + (5 - 2)) * 4 + (4 - 2);
        for (i, &v) in rolled.data().iter().enumerate() {
            assert_eq!(v, if i == at { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn unshifted_mask_is_zero() {
        let cfg = WindowConfig::cubic(4).unwrap();
        let mask: Tensor<f32> = build_shift_mask([8, 8, 8], &cfg, false, None).unwrap();
        assert!(mask.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shifted_mask_region_counts_match_reference() {
        let cfg = WindowConfig::cubic(4).unwrap();
        assert_eq!(naive_region_count([8, 8, 8], &cfg), 27);
        assert_eq!(cfg.window_count([8, 8, 8]).unwrap(), 8);
        // labels are symmetric and zero on the diagonal
        let mask: Tensor<f32> = build_shift_mask([8, 8, 8], &cfg, true, None).unwrap();
        let p = 64;
        for win in 0..8 {
            let m = &mask.data()[win * p * p..(win + 1) * p * p];
            for i in 0..p {
                assert_eq!(m[i * p + i], 0.0);
                for j in 0..p {
                    assert_eq!(m[i * p + j], m[j * p + i]);
                }
            }
        }
        // some pairs must be masked in the shifted configuration
        assert!(mask.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn rel_pos_table_sizes() {
        let m4 = build_rel_pos_index(&WindowConfig::cubic(4).unwrap());
        assert_eq!(m4.table_size(), 343);
        assert_eq!(m4.index_map.len(), 64 * 64);

        let m1 = build_rel_pos_index(&WindowConfig::cubic(1).unwrap());
        assert_eq!(m1.table_size(), 1);
        assert!(m1.index_map.iter().all(|&i| i == 0));
    }

    #[test]
    fn rel_pos_index_matches_exhaustive_displacements_m2() {
        // Independent displacement enumeration over all 8x8 token pairs.
        let cfg = WindowConfig::cubic(2).unwrap();
        let idx = build_rel_pos_index(&cfg);
        let mut positions = vec![];
        for i in 0..2i64 {
            for j in 0..2i64 {
                for k in 0..2i64 {
                    positions.push((i, j, k));
                }
            }
        }
        for (a, &pa) in positions.iter().enumerate() {
            for (b, &pb) in positions.iter().enumerate() {
                let disp = (pb.0 - pa.0, pb.1 - pa.1, pb.2 - pa.2);
                // brute-force index: offset each axis by M-1 = 1, base 3
                let expect = ((disp.0 + 1) * 3 + (disp.1 + 1)) * 3 + (disp.2 + 1);
                assert_eq!(idx.index_map[a * 8 + b], expect as usize);
            }
        }
        // bijectivity in displacement: same index iff same displacement
        assert_eq!(idx.table_size(), 27);
    }

    #[test]
    fn central_index_identical_on_diagonal() {
        let idx = build_rel_pos_index(&WindowConfig::cubic(3).unwrap());
        let p = idx.tokens;
        let central = idx.index_map[0];
        for i in 0..p {
            assert_eq!(idx.index_map[i * p + i], central);
        }
    }

    #[test]
    fn gather_bias_reference_cases() {
        let cfg = WindowConfig::cubic(2).unwrap();
        let idx = build_rel_pos_index(&cfg);
        let p = idx.tokens;

        let zero = Tensor::<f32>::zeros(&[2, idx.table_size()]);
        let b = gather_bias(&zero, &idx).unwrap();
        assert!(b.data().iter().all(|&v| v == 0.0));

        // one-hot at the central (zero displacement) slot -> identity indicator
        let central = idx.index_map[0];
        let mut hot = Tensor::<f32>::zeros(&[1, idx.table_size()]);
        hot.data_mut()[central] = 1.0;
        let b = gather_bias(&hot, &idx).unwrap();
        for i in 0..p {
            for j in 0..p {
                assert_eq!(b.data()[i * p + j], if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn gather_bias_depends_only_on_displacement() {
        let cfg = WindowConfig::new([2, 3, 2]).unwrap();
        let idx = build_rel_pos_index(&cfg);
        let mut init = Initializer::new(13);
        let table: Tensor<f64> = init.uniform(&[2, idx.table_size()], -1.0, 1.0);
        let b = gather_bias(&table, &idx).unwrap();
        let p = idx.tokens;
        // every pair with an equal index-map entry must carry an equal bias
        for h in 0..2 {
            for i in 0..p * p {
                for j in 0..p * p {
                    if idx.index_map[i] == idx.index_map[j] {
                        assert_eq!(b.data()[h * p * p + i], b.data()[h * p * p + j]);
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn partition_merge_round_trip(
            nh in 1usize..3, nw in 1usize..3, nd in 1usize..3,
            sh in 1usize..4, sw in 1usize..4, sd in 1usize..4,
            seed in 0u64..1000,
        ) {
            let cfg = WindowConfig::new([sh, sw, sd]).unwrap();
            let grid = [nh * sh, nw * sw, nd * sd];
            let mut init = Initializer::new(seed);
            let t: Tensor<f32> = init.uniform(&[grid[0], grid[1], grid[2], 3], -2.0, 2.0);
            let ws = partition_windows(&t, &cfg).unwrap();
            let back = merge_windows(&ws, grid, &cfg).unwrap();
            prop_assert_eq!(back.data(), t.data());
        }

        #[test]
        fn shift_then_unshift_is_identity(
            h in 1usize..6, w in 1usize..6, d in 1usize..6,
            oh in -3i64..4, ow in -3i64..4, od in -3i64..4,
            seed in 0u64..1000,
        ) {
            let mut init = Initializer::new(seed);
            let t: Tensor<f32> = init.uniform(&[h, w, d, 2], -1.0, 1.0);
            let back = cyclic_shift(&cyclic_shift(&t, [oh, ow, od]), [-oh, -ow, -od]);
            prop_assert_eq!(back.data(), t.data());
        }
    }
}
