//! Spatial operations on (B, C, H, W) maps: grouped 2-D convolution via
//! im2col + matmul, nearest-neighbor upsampling and pixel shuffle.
//!
//! Backward passes recompute the column matrices instead of caching them,
//! trading a little compute for a much smaller live graph.

use ndarray::{Array2, ArrayD, ArrayView2, ArrayView4, ArrayViewMut4, IxDyn};

use super::{Data, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for ConvSpec {
    fn default() -> Self {
        ConvSpec { stride: 1, padding: 0, groups: 1 }
    }
}

pub fn conv_out_len(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

/// Grouped 2-D convolution.
///
/// `x`: (B, C_in, H, W); `weight`: (C_out, C_in/g, kh, kw); optional bias (C_out).
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, spec: ConvSpec) -> Tensor {
    let xs = x.shape();
    let ws = weight.shape();
    assert_eq!(xs.len(), 4, "conv2d input must be (B, C, H, W)");
    assert_eq!(ws.len(), 4, "conv2d weight must be (C_out, C_in/g, kh, kw)");
    let (b, c_in, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (c_out, c_in_g, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    let g = spec.groups;
    assert_eq!(c_in % g, 0, "groups must divide input channels");
    assert_eq!(c_out % g, 0, "groups must divide output channels");
    assert_eq!(c_in / g, c_in_g, "weight channel count inconsistent with groups");
    let h_out = conv_out_len(h, kh, spec.stride, spec.padding);
    let w_out = conv_out_len(w, kw, spec.stride, spec.padding);
    let l = h_out * w_out;
    let cg_out = c_out / g;
    let krows = c_in_g * kh * kw;

    let mut value = ArrayD::zeros(IxDyn(&[b, c_out, h_out, w_out]));
    {
        let xv = x.value();
        let x4 = view4(&xv);
        let wv = weight.value();
        let wmat = view2_of(&wv, c_out, krows);
        let mut out4 = view4_mut(&mut value);
        for bi in 0..b {
            let cols = im2col(&x4, bi, kh, kw, spec, h_out, w_out); // (c_in*kh*kw, L)
            for gi in 0..g {
                let wg = wmat.slice(ndarray::s![gi * cg_out..(gi + 1) * cg_out, ..]);
                let colg = cols.slice(ndarray::s![gi * krows..(gi + 1) * krows, ..]);
                let og = wg.dot(&colg); // (cg_out, L)
                for co in 0..cg_out {
                    let mut dst = out4.slice_mut(ndarray::s![bi, gi * cg_out + co, .., ..]);
                    dst.assign(
                        &og.row(co)
                            .into_shape_with_order((h_out, w_out))
                            .expect("row reshape"),
                    );
                }
            }
        }
        if let Some(bt) = bias {
            let bv = bt.value();
            for co in 0..c_out {
                out4.slice_mut(ndarray::s![.., co, .., ..])
                    .mapv_inplace(|v| v + bv[[co]]);
            }
        }
    }

    let mut parents = vec![x.clone(), weight.clone()];
    if let Some(bt) = bias {
        parents.push(bt.clone());
    }
    let (tx, tw) = (x.clone(), weight.clone());
    let has_bias = bias.is_some();
    Tensor::from_op(value, parents, move |gout| {
        let g4 = view4(gout);
        let xv = tx.value();
        let x4 = view4(&xv);
        let wv = tw.value();
        let wmat = view2_of(&wv, c_out, krows);

        let mut dx = ArrayD::zeros(IxDyn(&[b, c_in, h, w]));
        let mut dw = Array2::<f64>::zeros((c_out, krows));
        let mut db = vec![0.0f64; c_out];
        {
            let mut dx4 = view4_mut(&mut dx);
            for bi in 0..b {
                let cols = im2col(&x4, bi, kh, kw, spec, h_out, w_out);
                // upstream as (c_out, L)
                let mut gmat = Array2::<f64>::zeros((c_out, l));
                for co in 0..c_out {
                    let src = g4.slice(ndarray::s![bi, co, .., ..]);
                    gmat.row_mut(co)
                        .assign(&src.into_shape_with_order(l).expect("flatten"));
                }
                let mut dcols = Array2::<f64>::zeros((c_in * kh * kw, l));
                for gi in 0..g {
                    let gg = gmat.slice(ndarray::s![gi * cg_out..(gi + 1) * cg_out, ..]);
                    let colg = cols.slice(ndarray::s![gi * krows..(gi + 1) * krows, ..]);
                    let wg = wmat.slice(ndarray::s![gi * cg_out..(gi + 1) * cg_out, ..]);
                    let mut dwg = dw.slice_mut(ndarray::s![gi * cg_out..(gi + 1) * cg_out, ..]);
                    dwg += &gg.dot(&colg.t());
                    dcols
                        .slice_mut(ndarray::s![gi * krows..(gi + 1) * krows, ..])
                        .assign(&wg.t().dot(&gg));
                }
                col2im_add(&dcols.view(), &mut dx4, bi, kh, kw, spec, h_out, w_out);
                if has_bias {
                    for co in 0..c_out {
                        db[co] += gmat.row(co).sum();
                    }
                }
            }
        }
        let dw = dw
            .into_shape_with_order(IxDyn(&[c_out, c_in_g, kh, kw]))
            .expect("dw reshape");
        let mut grads = vec![Some(dx), Some(dw)];
        if has_bias {
            grads.push(Some(ArrayD::from_shape_vec(IxDyn(&[c_out]), db).expect("db")));
        }
        grads
    })
}

/// Nearest-neighbor upsampling by an integer factor.
pub fn upsample_nearest(x: &Tensor, scale: usize) -> Tensor {
    let xs = x.shape();
    assert_eq!(xs.len(), 4, "upsample expects (B, C, H, W)");
    let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let mut value = ArrayD::zeros(IxDyn(&[b, c, h * scale, w * scale]));
    {
        let xv = x.value();
        for bi in 0..b {
            for ci in 0..c {
                for i in 0..h * scale {
                    for j in 0..w * scale {
                        value[[bi, ci, i, j]] = xv[[bi, ci, i / scale, j / scale]];
                    }
                }
            }
        }
    }
    Tensor::from_op(value, vec![x.clone()], move |g| {
        let mut dx = ArrayD::zeros(IxDyn(&[b, c, h, w]));
        for bi in 0..b {
            for ci in 0..c {
                for i in 0..h * scale {
                    for j in 0..w * scale {
                        dx[[bi, ci, i / scale, j / scale]] += g[[bi, ci, i, j]];
                    }
                }
            }
        }
        vec![Some(dx)]
    })
}

/// Rearranges (B, C*r^2, H, W) -> (B, C, H*r, W*r).
pub fn pixel_shuffle(x: &Tensor, r: usize) -> Tensor {
    let xs = x.shape();
    assert_eq!(xs.len(), 4, "pixel_shuffle expects (B, C, H, W)");
    let (b, c_in, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    assert_eq!(c_in % (r * r), 0, "channels must divide by r^2");
    let c = c_in / (r * r);
    let mut value = ArrayD::zeros(IxDyn(&[b, c, h * r, w * r]));
    {
        let xv = x.value();
        for bi in 0..b {
            for ci in 0..c {
                for dy in 0..r {
                    for dx_ in 0..r {
                        let src_c = ci * r * r + dy * r + dx_;
                        for i in 0..h {
                            for j in 0..w {
                                value[[bi, ci, i * r + dy, j * r + dx_]] = xv[[bi, src_c, i, j]];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_op(value, vec![x.clone()], move |g| {
        let mut dx = ArrayD::zeros(IxDyn(&[b, c_in, h, w]));
        for bi in 0..b {
            for ci in 0..c {
                for dy in 0..r {
                    for dx_ in 0..r {
                        let src_c = ci * r * r + dy * r + dx_;
                        for i in 0..h {
                            for j in 0..w {
                                dx[[bi, src_c, i, j]] = g[[bi, ci, i * r + dy, j * r + dx_]];
                            }
                        }
                    }
                }
            }
        }
        vec![Some(dx)]
    })
}

fn view4<'a>(d: &'a Data) -> ArrayView4<'a, f64> {
    d.view()
        .into_dimensionality::<ndarray::Ix4>()
        .expect("expected rank-4 array")
}

fn view4_mut(d: &mut Data) -> ArrayViewMut4<'_, f64> {
    d.view_mut()
        .into_dimensionality::<ndarray::Ix4>()
        .expect("expected rank-4 array")
}

fn view2_of(d: &Data, rows: usize, cols: usize) -> ArrayView2<'_, f64> {
    d.view()
        .into_shape_with_order((rows, cols))
        .expect("weight reshape")
}

/// Unrolls one batch item into a (C*kh*kw, H_out*W_out) column matrix with
/// zero padding.
fn im2col(
    x: &ArrayView4<'_, f64>,
    bi: usize,
    kh: usize,
    kw: usize,
    spec: ConvSpec,
    h_out: usize,
    w_out: usize,
) -> Array2<f64> {
    let (c, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut cols = Array2::<f64>::zeros((c * kh * kw, h_out * w_out));
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let mut dst = cols.row_mut(row);
                for oy in 0..h_out {
                    let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..w_out {
                        let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dst[oy * w_out + ox] = x[[bi, ci, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds a column-matrix gradient back onto the input map.
fn col2im_add(
    cols: &ArrayView2<'_, f64>,
    dx: &mut ArrayViewMut4<'_, f64>,
    bi: usize,
    kh: usize,
    kw: usize,
    spec: ConvSpec,
    h_out: usize,
    w_out: usize,
) {
    let (c, h, w) = (dx.shape()[1], dx.shape()[2], dx.shape()[3]);
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let src = cols.row(row);
                for oy in 0..h_out {
                    let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..w_out {
                        let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[[bi, ci, iy as usize, ix as usize]] += src[oy * w_out + ox];
                    }
                }
            }
        }
    }
}
