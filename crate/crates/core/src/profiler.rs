//! Analytical attention cost model: exact integer FLOP counts for global MSA
//! versus windowed IB-MSA, plus window-count accounting for the shifted
//! configuration.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("dimensions must be positive, got {0}")]
    NonPositive(String),
    #[error("arithmetic overflow computing {0}")]
    Overflow(&'static str),
    #[error("grid {grid:?} not divisible by window {window:?}")]
    NotDivisible {
        grid: [usize; 3],
        window: [usize; 3],
    },
}

/// Global multi-head self-attention cost on an h x w x d token grid with
/// channel width C: `4 h w d C^2 + 2 (h w d)^2 C` multiply-accumulates
/// counted as in the windowed formula below.
pub fn flops_msa(h: usize, w: usize, d: usize, c: usize) -> Result<u128, ProfileError> {
    check_positive(&[("h", h), ("w", w), ("d", d), ("C", c)])?;
    let t = (h as u128)
        .checked_mul(w as u128)
        .and_then(|x| x.checked_mul(d as u128))
        .ok_or(ProfileError::Overflow("token count"))?;
    let c = c as u128;
    let proj = t
        .checked_mul(c)
        .and_then(|x| x.checked_mul(c))
        .and_then(|x| x.checked_mul(4))
        .ok_or(ProfileError::Overflow("projection term"))?;
    let attn = t
        .checked_mul(t)
        .and_then(|x| x.checked_mul(c))
        .and_then(|x| x.checked_mul(2))
        .ok_or(ProfileError::Overflow("attention term"))?;
    proj.checked_add(attn)
        .ok_or(ProfileError::Overflow("total"))
}

/// Windowed IB-MSA cost: `4 h w d C^2 + 2 S_H S_W S_D h w d C`.
pub fn flops_ibmsa(
    h: usize,
    w: usize,
    d: usize,
    c: usize,
    window: [usize; 3],
) -> Result<u128, ProfileError> {
    check_positive(&[
        ("h", h),
        ("w", w),
        ("d", d),
        ("C", c),
        ("S_H", window[0]),
        ("S_W", window[1]),
        ("S_D", window[2]),
    ])?;
    let t = (h as u128)
        .checked_mul(w as u128)
        .and_then(|x| x.checked_mul(d as u128))
        .ok_or(ProfileError::Overflow("token count"))?;
    let c = c as u128;
    let p = (window[0] as u128) * (window[1] as u128) * (window[2] as u128);
    let proj = t
        .checked_mul(c)
        .and_then(|x| x.checked_mul(c))
        .and_then(|x| x.checked_mul(4))
        .ok_or(ProfileError::Overflow("projection term"))?;
    let attn = p
        .checked_mul(t)
        .and_then(|x| x.checked_mul(c))
        .and_then(|x| x.checked_mul(2))
        .ok_or(ProfileError::Overflow("attention term"))?;
    proj.checked_add(attn)
        .ok_or(ProfileError::Overflow("total"))
}

/// Window counts for a divisible grid: the regular partition, the naive
/// shifted partition (one extra window per axis), and the batched shifted
/// computation, which folds the shifted windows back to the regular count.
pub fn window_counts(
    grid: [usize; 3],
    window: [usize; 3],
) -> Result<(u64, u64, u64), ProfileError> {
    check_positive(&[
        ("grid h", grid[0]),
        ("grid w", grid[1]),
        ("grid d", grid[2]),
        ("S_H", window[0]),
        ("S_W", window[1]),
        ("S_D", window[2]),
    ])?;
    if (0..3).any(|a| grid[a] % window[a] != 0) {
        return Err(ProfileError::NotDivisible { grid, window });
    }
    let regular: u64 = (0..3).map(|a| (grid[a] / window[a]) as u64).product();
    let naive: u64 = (0..3).map(|a| (grid[a] / window[a] + 1) as u64).product();
    Ok((regular, naive, regular))
}

fn check_positive(items: &[(&str, usize)]) -> Result<(), ProfileError> {
    for &(name, v) in items {
        if v == 0 {
            return Err(ProfileError::NonPositive(name.into()));
        }
    }
    Ok(())
}

/// Full cost comparison for one configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostReport {
    pub grid: [usize; 3],
    pub dim: usize,
    pub window: [usize; 3],
    #[serde(with = "u128_string")]
    pub flops_msa: u128,
    #[serde(with = "u128_string")]
    pub flops_ibmsa: u128,
    /// flops_ibmsa / flops_msa
    pub ratio: f64,
    pub windows_regular: u64,
    pub windows_naive_shifted: u64,
    pub windows_batched: u64,
}

pub fn cost_report(
    grid: [usize; 3],
    dim: usize,
    window: [usize; 3],
) -> Result<CostReport, ProfileError> {
    let msa = flops_msa(grid[0], grid[1], grid[2], dim)?;
    let ib = flops_ibmsa(grid[0], grid[1], grid[2], dim, window)?;
    let (regular, naive, batched) = window_counts(grid, window)?;
    Ok(CostReport {
        grid,
        dim,
        window,
        flops_msa: msa,
        flops_ibmsa: ib,
        ratio: ib as f64 / msa as f64,
        windows_regular: regular,
        windows_naive_shifted: naive,
        windows_batched: batched,
    })
}

impl CostReport {
    /// Human-readable table used by the CLI.
    pub fn table(&self) -> String {
        format!(
            "grid          : {} x {} x {} tokens\n\
             channels      : {}\n\
             window        : {} x {} x {}\n\
             MSA flops     : {}\n\
             IB-MSA flops  : {}\n\
             ratio         : {:.6}\n\
             windows       : regular {}, naive shifted {}, batched {}\n",
            self.grid[0],
            self.grid[1],
            self.grid[2],
            self.dim,
            self.window[0],
            self.window[1],
            self.window[2],
            self.flops_msa,
            self.flops_ibmsa,
            self.ratio,
            self.windows_regular,
            self.windows_naive_shifted,
            self.windows_batched,
        )
    }
}

mod u128_string {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u128, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u128, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{AttentionConfig, AttentionLayer, PositionMode};
    use crate::tensor::{Initializer, ParamBinding, ParamSet, Tape};
    use crate::windowing::WindowConfig;
    use num_bigint::BigUint;

    /// Independent big-integer evaluation of both formulas.
    fn big_msa(h: u64, w: u64, d: u64, c: u64) -> BigUint {
        let t = BigUint::from(h) * w * d;
        BigUint::from(4u32) * &t * c * c + BigUint::from(2u32) * &t * &t * c
    }

    fn big_ibmsa(h: u64, w: u64, d: u64, c: u64, s: [u64; 3]) -> BigUint {
        let t = BigUint::from(h) * w * d;
        let p = BigUint::from(s[0]) * s[1] * s[2];
        BigUint::from(4u32) * &t * c * c + BigUint::from(2u32) * p * &t * c
    }

    #[test]
    fn unit_evaluation() {
        assert_eq!(flops_msa(1, 1, 1, 1).unwrap(), 6);
        assert_eq!(flops_ibmsa(1, 1, 1, 1, [1, 1, 1]).unwrap(), 6);
        assert!(flops_msa(0, 1, 1, 1).is_err());
    }

    #[test]
    fn formulas_match_big_integer_oracle() {
        let configs: [(usize, usize, usize, usize, [usize; 3]); 5] = [
            (32, 32, 24, 128, [4, 4, 4]),
            (8, 8, 8, 16, [4, 4, 4]),
            (16, 16, 12, 256, [4, 4, 4]),
            (64, 64, 48, 128, [4, 4, 4]),
            (4, 4, 4, 32, [2, 2, 2]),
        ];
        for (h, w, d, c, s) in configs {
            let msa = flops_msa(h, w, d, c).unwrap();
            let ib = flops_ibmsa(h, w, d, c, s).unwrap();
            let bm = big_msa(h as u64, w as u64, d as u64, c as u64);
            let bi = big_ibmsa(
                h as u64,
                w as u64,
                d as u64,
                c as u64,
                [s[0] as u64, s[1] as u64, s[2] as u64],
            );
            assert_eq!(BigUint::from(msa), bm, "MSA mismatch at {h}x{w}x{d} C={c}");
            assert_eq!(BigUint::from(ib), bi, "IB-MSA mismatch at {h}x{w}x{d} C={c}");
            // windowed is strictly cheaper whenever the window is a strict
            // sub-volume
            if s[0] * s[1] * s[2] < h * w * d {
                assert!(ib < msa);
            }
        }
    }

    #[test]
    fn reference_config_closed_form() {
        // h=w=32, d=24, C=128: first term 4*24576*16384, second 2*24576^2*128
        let msa = flops_msa(32, 32, 24, 128).unwrap();
        assert_eq!(msa, 4u128 * 24576 * 16384 + 2u128 * 24576 * 24576 * 128);
        let ib = flops_ibmsa(32, 32, 24, 128, [4, 4, 4]).unwrap();
        assert_eq!(ib, 4u128 * 24576 * 16384 + 2u128 * 64 * 24576 * 128);
    }

    #[test]
    fn scaling_structure() {
        // doubling C with hwd fixed scales the first term x4 and the second x2
        let (h, w, d) = (8, 8, 8);
        let t = (h * w * d) as u128;
        for c in [16usize, 32, 64] {
            let a = flops_msa(h, w, d, c).unwrap();
            let b = flops_msa(h, w, d, 2 * c).unwrap();
            let first_a = 4 * t * (c as u128) * (c as u128);
            let second_a = a - first_a;
            let first_b = 4 * t * (2 * c as u128) * (2 * c as u128);
            let second_b = b - first_b;
            assert_eq!(first_b, 4 * first_a);
            assert_eq!(second_b, 2 * second_a);
        }
    }

    #[test]
    fn window_count_reference() {
        assert_eq!(window_counts([8, 8, 8], [4, 4, 4]).unwrap(), (8, 27, 8));
        assert_eq!(window_counts([4, 4, 4], [4, 4, 4]).unwrap(), (1, 8, 1));
        // batched always equals regular
        for grid in [[8usize, 8, 8], [16, 16, 12], [4, 8, 12]] {
            let (r, _, b) = window_counts(grid, [4, 4, 4]).unwrap();
            assert_eq!(r, b);
        }
        assert!(window_counts([6, 8, 8], [4, 4, 4]).is_err());
    }

    #[test]
    fn windowed_never_exceeds_global() {
        for (grid, c) in [([8usize, 8, 8], 16), ([16, 16, 8], 32), ([4, 4, 4], 8)] {
            for s in [[2usize, 2, 2], [4, 4, 4]] {
                if (0..3).all(|a| s[a] <= grid[a]) {
                    let ib = flops_ibmsa(grid[0], grid[1], grid[2], c, s).unwrap();
                    let msa = flops_msa(grid[0], grid[1], grid[2], c).unwrap();
                    assert!(ib <= msa);
                }
            }
        }
    }

    #[test]
    fn instrumented_mac_tally_matches_formula() {
        // One IB-MSA forward at desk scale must spend exactly
        // 4 T C^2 + 2 P T C multiply-accumulates (T = hwd tokens).
        let (grid, c, heads, s) = ([8usize, 8, 8], 16usize, 4usize, 4usize);
        let cfg = AttentionConfig {
            dim: c,
            heads,
            window: WindowConfig::cubic(s).unwrap(),
            mode: PositionMode::InductiveBiased,
        };
        let mut params = ParamSet::<f32>::new();
        let mut init = Initializer::new(2);
        let layer = AttentionLayer::new("a", cfg, true, &mut params, &mut init).unwrap();
        let mut data_rng = Initializer::new(3);
        let tokens = data_rng.uniform(&[grid[0], grid[1], grid[2], c], -1.0, 1.0);
        for shifted in [false, true] {
            let mut tape = Tape::new();
            let bind = ParamBinding::bind(&mut tape, &params);
            let tok = tape.constant(tokens.clone());
            tape.reset_mac_count();
            layer.forward(&mut tape, &bind, tok, shifted).unwrap();
            // the formula's terms are multiply-accumulate counts:
            // 4TC^2 = qkv (3TC^2) + proj (TC^2), 2PTC = scores + apply
            let expected = flops_ibmsa(grid[0], grid[1], grid[2], c, [s, s, s]).unwrap();
            assert_eq!(
                tape.mac_count(),
                expected,
                "shifted={shifted}: tally {} vs formula {}",
                tape.mac_count(),
                expected
            );
        }
    }
}
