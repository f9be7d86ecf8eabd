//! Dense kernels shared by the networks.
//!
//! Activations use a channel-major `(C, B, H, W)` layout so that a 3x3
//! convolution over a whole batch is a single `(O, 9C) x (9C, BHW)` product.

use ndarray::{s, Array2, Array4, ArrayView2, ArrayView4, Axis};

use crate::real::Real;

pub const LRELU_SLOPE: f64 = 0.2;

pub fn im2col3x3<T: Real>(x: ArrayView4<'_, T>) -> Array2<T> {
    let (c, b, h, w) = x.dim();
    let hw = h * w;
    let mut cols = Array2::<T>::zeros((c * 9, b * hw));
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let out = cols.as_slice_mut().expect("fresh array");
    let row_len = b * hw;
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let r = ci * 9 + ky * 3 + kx;
                let dst_row = &mut out[r * row_len..(r + 1) * row_len];
                for bi in 0..b {
                    let src = &xs[(ci * b + bi) * hw..(ci * b + bi + 1) * hw];
                    let dst = &mut dst_row[bi * hw..(bi + 1) * hw];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                        let drow = &mut dst[y * w..(y + 1) * w];
                        match kx {
                            0 => drow[1..].copy_from_slice(&srow[..w - 1]),
                            1 => drow.copy_from_slice(srow),
                            _ => drow[..w - 1].copy_from_slice(&srow[1..]),
                        }
                    }
                }
            }
        }
    }
    cols
}

pub fn col2im3x3<T: Real>(cols: ArrayView2<'_, T>, dim: (usize, usize, usize, usize)) -> Array4<T> {
    let (c, b, h, w) = dim;
    let hw = h * w;
    let row_len = b * hw;
    let mut x = Array4::<T>::zeros(dim);
    let cols = cols.as_standard_layout();
    let cs = cols.as_slice().expect("standard layout");
    let xs = x.as_slice_mut().expect("fresh array");
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let r = ci * 9 + ky * 3 + kx;
                let src_row = &cs[r * row_len..(r + 1) * row_len];
                for bi in 0..b {
                    let dst = &mut xs[(ci * b + bi) * hw..(ci * b + bi + 1) * hw];
                    let src = &src_row[bi * hw..(bi + 1) * hw];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let drow = &mut dst[sy as usize * w..(sy as usize + 1) * w];
                        let srow = &src[y * w..(y + 1) * w];
                        match kx {
                            0 => add_into(&mut drow[..w - 1], &srow[1..]),
                            1 => add_into(drow, srow),
                            _ => add_into(&mut drow[1..], &srow[..w - 1]),
                        }
                    }
                }
            }
        }
    }
    x
}

#[inline]
fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn flat<T: Real>(x: &Array4<T>) -> ArrayView2<'_, T> {
    let (c, b, h, w) = x.dim();
    x.view()
        .into_shape_with_order((c, b * h * w))
        .expect("contiguous activation")
}

fn unflat<T: Real>(y: Array2<T>, b: usize, h: usize, w: usize) -> Array4<T> {
    let o = y.nrows();
    y.into_shape_with_order((o, b, h, w)).expect("gemm output is contiguous")
}

/// Same-padded 3x3 convolution. `weight` is `(O, C*9)`, input `(C, B, H, W)`.
pub fn conv3x3<T: Real>(weight: ArrayView2<'_, T>, x: &Array4<T>) -> Array4<T> {
    let (_, b, h, w) = x.dim();
    let cols = im2col3x3(x.view());
    unflat(weight.dot(&cols), b, h, w)
}

/// Returns `(grad_weight, grad_input)`; the weight gradient is skipped when
/// `want_weight` is false.
pub fn conv3x3_backward<T: Real>(
    weight: ArrayView2<'_, T>,
    x: &Array4<T>,
    grad_out: &Array4<T>,
    want_weight: bool,
) -> (Option<Array2<T>>, Array4<T>) {
    let g = flat(grad_out);
    let gw = if want_weight {
        let cols = im2col3x3(x.view());
        Some(g.dot(&cols.t()))
    } else {
        None
    };
    let gcols = weight.t().dot(&g);
    (gw, col2im3x3(gcols.view(), x.dim()))
}

/// Pointwise convolution. `weight` is `(O, C)`.
pub fn conv1x1<T: Real>(weight: ArrayView2<'_, T>, x: &Array4<T>) -> Array4<T> {
    let (_, b, h, w) = x.dim();
    unflat(weight.dot(&flat(x)), b, h, w)
}

pub fn conv1x1_backward<T: Real>(
    weight: ArrayView2<'_, T>,
    x: &Array4<T>,
    grad_out: &Array4<T>,
    want_weight: bool,
) -> (Option<Array2<T>>, Array4<T>) {
    let (_, b, h, w) = x.dim();
    let g = flat(grad_out);
    let gw = want_weight.then(|| g.dot(&flat(x).t()));
    (gw, unflat(weight.t().dot(&g), b, h, w))
}

pub fn add_channel_bias<T: Real>(x: &mut Array4<T>, bias: &[T]) {
    for (mut plane, &bv) in x.axis_iter_mut(Axis(0)).zip(bias) {
        plane.mapv_inplace(|v| v + bv);
    }
}

pub fn channel_sums<T: Real>(g: &Array4<T>) -> Vec<T> {
    g.axis_iter(Axis(0)).map(|p| p.sum()).collect()
}

pub fn lrelu<T: Real>(x: T) -> T {
    if x >= T::zero() {
        x
    } else {
        x * T::lit(LRELU_SLOPE)
    }
}

/// Derivative of [`lrelu`] evaluated from its *pre-activation* input.
pub fn lrelu_grad<T: Real>(pre: T) -> T {
    if pre >= T::zero() {
        T::one()
    } else {
        T::lit(LRELU_SLOPE)
    }
}

pub fn upsample2x<T: Real>(x: &Array4<T>) -> Array4<T> {
    let (c, b, h, w) = x.dim();
    let mut y = Array4::<T>::zeros((c, b, 2 * h, 2 * w));
    for dy in 0..2 {
        for dx in 0..2 {
            y.slice_mut(s![.., .., dy..;2, dx..;2]).assign(x);
        }
    }
    y
}

pub fn upsample2x_backward<T: Real>(g: &Array4<T>) -> Array4<T> {
    let (c, b, h, w) = g.dim();
    let mut x = Array4::<T>::zeros((c, b, h / 2, w / 2));
    for dy in 0..2 {
        for dx in 0..2 {
            x += &g.slice(s![.., .., dy..;2, dx..;2]);
        }
    }
    x
}

pub fn avgpool2x<T: Real>(x: &Array4<T>) -> Array4<T> {
    let (c, b, h, w) = x.dim();
    let mut y = Array4::<T>::zeros((c, b, h / 2, w / 2));
    for dy in 0..2 {
        for dx in 0..2 {
            y += &x.slice(s![.., .., dy..;2, dx..;2]);
        }
    }
    y.mapv_inplace(|v| v * T::lit(0.25));
    y
}

pub fn avgpool2x_backward<T: Real>(g: &Array4<T>) -> Array4<T> {
    let quarter = g.mapv(|v| v * T::lit(0.25));
    upsample2x(&quarter)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand4(dim: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array::from_shape_fn(dim, |_| rng.gen_range(-1.0..1.0))
    }

    /// Direct-loop convolution used as an oracle for the im2col path.
    fn conv_naive(weight: &Array2<f64>, x: &Array4<f64>) -> Array4<f64> {
        let (c, b, h, w) = x.dim();
        let o = weight.nrows();
        let mut y = Array4::zeros((o, b, h, w));
        for oi in 0..o {
            for bi in 0..b {
                for yy in 0..h {
                    for xx in 0..w {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let sy = yy as isize + ky as isize - 1;
                                    let sx = xx as isize + kx as isize - 1;
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                        continue;
                                    }
                                    acc += weight[[oi, ci * 9 + ky * 3 + kx]]
                                        * x[[ci, bi, sy as usize, sx as usize]];
                                }
                            }
                        }
                        y[[oi, bi, yy, xx]] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv3x3_matches_direct_loops() {
        let x = rand4((3, 2, 5, 4), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let wt = Array2::from_shape_fn((4, 27), |_| rng.gen_range(-1.0..1.0));
        let fast = conv3x3(wt.view(), &x);
        let slow = conv_naive(&wt, &x);
        for (a, b) in fast.iter().zip(slow.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        let x = rand4((2, 3, 4, 6), 3);
        let cols = im2col3x3(x.view());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = Array2::from_shape_fn(cols.dim(), |_| rng.gen_range(-1.0..1.0));
        let lhs = (&cols * &c).sum();
        let rhs = (&x * &col2im3x3(c.view(), x.dim())).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn pooling_pairs_are_adjoint() {
        let x = rand4((2, 2, 4, 4), 5);
        let g = rand4((2, 2, 8, 8), 6);
        let lhs = (&upsample2x(&x) * &g).sum();
        let rhs = (&x * &upsample2x_backward(&g)).sum();
        assert!((lhs - rhs).abs() < 1e-10);
        let g2 = rand4((2, 2, 2, 2), 7);
        let lhs = (&avgpool2x(&x) * &g2).sum();
        let rhs = (&x * &avgpool2x_backward(&g2)).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
