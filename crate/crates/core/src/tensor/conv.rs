//! Raw 3D convolution kernels on channels-first `[C, H, W, D]` buffers.
//!
//! Cross-correlation semantics (no kernel flip). The transposed convolution is
//! the exact adjoint of the forward convolution with shared weights, which the
//! backward passes reuse directly.

use super::Scalar;
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvDims {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub inp: [usize; 3],
    pub out: [usize; 3],
}

/// Output extent of a forward convolution along one axis.
pub fn conv_out_extent(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < k || stride == 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Output extent of a transposed convolution along one axis.
pub fn conv_transpose_out_extent(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let grown = (input - 1) * stride + k;
    if grown < 2 * pad || input == 0 || stride == 0 {
        return None;
    }
    Some(grown - 2 * pad)
}

/// y[co, o] = sum_{ci,k} x[ci, o*stride + k - pad] * w[co, ci, k] (+ b[co]).
pub(crate) fn conv3d_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    b: Option<&[T]>,
    d: ConvDims,
) -> Vec<T> {
    let [ih, iw, id] = d.inp;
    let [oh, ow, od] = d.out;
    let in_sp = ih * iw * id;
    let out_sp = oh * ow * od;
    let ksz = d.k * d.k * d.k;
    let mut y = vec![T::zero(); d.cout * out_sp];

    y.par_chunks_mut(out_sp).enumerate().for_each(|(co, yc)| {
        let wc = &w[co * d.cin * ksz..(co + 1) * d.cin * ksz];
        let bias = b.map(|b| b[co]).unwrap_or_else(T::zero);
        for zo in 0..oh {
            for yo in 0..ow {
                for xo in 0..od {
                    let mut acc = bias;
                    for ci in 0..d.cin {
                        let xin = &x[ci * in_sp..(ci + 1) * in_sp];
                        let wk = &wc[ci * ksz..(ci + 1) * ksz];
                        for kz in 0..d.k {
                            let iz = (zo * d.stride + kz) as isize - d.pad as isize;
                            if iz < 0 || iz >= ih as isize {
                                continue;
                            }
                            for ky in 0..d.k {
                                let iy = (yo * d.stride + ky) as isize - d.pad as isize;
                                if iy < 0 || iy >= iw as isize {
                                    continue;
                                }
                                let row = (iz as usize * iw + iy as usize) * id;
                                let wrow = (kz * d.k + ky) * d.k;
                                for kx in 0..d.k {
                                    let ix = (xo * d.stride + kx) as isize - d.pad as isize;
                                    if ix < 0 || ix >= id as isize {
                                        continue;
                                    }
                                    acc += xin[row + ix as usize] * wk[wrow + kx];
                                }
                            }
                        }
                    }
                    yc[(zo * ow + yo) * od + xo] = acc;
                }
            }
        }
    });
    y
}

/// Adjoint of `conv3d_forward` in its input: scatters `g[cout, out]` back to
/// `[cin, inp]` through the shared weights. Also the forward pass of the
/// transposed convolution (with `cin`/`cout` read from the same `ConvDims`).
pub(crate) fn conv3d_backward_input<T: Scalar>(g: &[T], w: &[T], d: ConvDims) -> Vec<T> {
    let [ih, iw, id] = d.inp;
    let [oh, ow, od] = d.out;
    let in_sp = ih * iw * id;
    let out_sp = oh * ow * od;
    let ksz = d.k * d.k * d.k;
    let mut gx = vec![T::zero(); d.cin * in_sp];

    gx.par_chunks_mut(in_sp).enumerate().for_each(|(ci, gxc)| {
        for co in 0..d.cout {
            let gc = &g[co * out_sp..(co + 1) * out_sp];
            let wk = &w[(co * d.cin + ci) * ksz..(co * d.cin + ci + 1) * ksz];
            for zo in 0..oh {
                for yo in 0..ow {
                    for xo in 0..od {
                        let gv = gc[(zo * ow + yo) * od + xo];
                        if gv == T::zero() {
                            continue;
                        }
                        for kz in 0..d.k {
                            let iz = (zo * d.stride + kz) as isize - d.pad as isize;
                            if iz < 0 || iz >= ih as isize {
                                continue;
                            }
                            for ky in 0..d.k {
                                let iy = (yo * d.stride + ky) as isize - d.pad as isize;
                                if iy < 0 || iy >= iw as isize {
                                    continue;
                                }
                                let row = (iz as usize * iw + iy as usize) * id;
                                let wrow = (kz * d.k + ky) * d.k;
                                for kx in 0..d.k {
                                    let ix = (xo * d.stride + kx) as isize - d.pad as isize;
                                    if ix < 0 || ix >= id as isize {
                                        continue;
                                    }
                                    gxc[row + ix as usize] += gv * wk[wrow + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    gx
}

/// Weight gradient: gw[co, ci, k] = sum_out x[ci, out*stride + k - pad] * g[co, out].
pub(crate) fn conv3d_backward_weight<T: Scalar>(x: &[T], g: &[T], d: ConvDims) -> Vec<T> {
    let [ih, iw, id] = d.inp;
    let [oh, ow, od] = d.out;
    let in_sp = ih * iw * id;
    let out_sp = oh * ow * od;
    let ksz = d.k * d.k * d.k;
    let mut gw = vec![T::zero(); d.cout * d.cin * ksz];

    gw.par_chunks_mut(d.cin * ksz).enumerate().for_each(|(co, gwc)| {
        let gc = &g[co * out_sp..(co + 1) * out_sp];
        for ci in 0..d.cin {
            let xin = &x[ci * in_sp..(ci + 1) * in_sp];
            for kz in 0..d.k {
                for ky in 0..d.k {
                    for kx in 0..d.k {
                        let mut acc = T::zero();
                        for zo in 0..oh {
                            let iz = (zo * d.stride + kz) as isize - d.pad as isize;
                            if iz < 0 || iz >= ih as isize {
                                continue;
                            }
                            for yo in 0..ow {
                                let iy = (yo * d.stride + ky) as isize - d.pad as isize;
                                if iy < 0 || iy >= iw as isize {
                                    continue;
                                }
                                let row = (iz as usize * iw + iy as usize) * id;
                                for xo in 0..od {
                                    let ix = (xo * d.stride + kx) as isize - d.pad as isize;
                                    if ix < 0 || ix >= id as isize {
                                        continue;
                                    }
                                    acc += xin[row + ix as usize] * gc[(zo * ow + yo) * od + xo];
                                }
                            }
                        }
                        gwc[(ci * d.k + kz) * d.k * d.k + (ky * d.k + kx)] = acc;
                    }
                }
            }
        }
    });
    gw
}

/// Per-channel sum of the output gradient (bias gradient).
pub(crate) fn conv3d_backward_bias<T: Scalar>(g: &[T], cout: usize, out_sp: usize) -> Vec<T> {
    (0..cout)
        .map(|co| {
            let mut acc = T::zero();
            for v in &g[co * out_sp..(co + 1) * out_sp] {
                acc += *v;
            }
            acc
        })
        .collect()
}
