//! Differentiable operations: elementwise arithmetic with broadcasting,
//! activations, reductions, shape manipulation, matmul, softmax, layer norm
//! and the gather/scatter primitives the detector needs.

use ndarray::{concatenate, ArrayD, Axis, IxDyn, Slice};

use super::{broadcast_shape, reduce_to_shape, Data, Tensor};

fn broadcast_eval(a: &Data, b: &Data, f: impl Fn(f64, f64) -> f64) -> Data {
    let shape = broadcast_shape(a.shape(), b.shape());
    let av = a.broadcast(IxDyn(&shape)).expect("broadcast lhs");
    let bv = b.broadcast(IxDyn(&shape)).expect("broadcast rhs");
    let mut out = ArrayD::zeros(IxDyn(&shape));
    ndarray::Zip::from(&mut out)
        .and(&av)
        .and(&bv)
        .for_each(|o, &x, &y| *o = f(x, y));
    out
}

impl Tensor {
    // ---- binary elementwise (broadcasting) ----

    pub fn add(&self, rhs: &Tensor) -> Tensor {
        let value = broadcast_eval(&self.value(), &rhs.value(), |x, y| x + y);
        let (sa, sb) = (self.shape(), rhs.shape());
        Tensor::from_op(value, vec![self.clone(), rhs.clone()], move |g| {
            vec![
                Some(reduce_to_shape(g, &sa)),
                Some(reduce_to_shape(g, &sb)),
            ]
        })
    }

    pub fn sub(&self, rhs: &Tensor) -> Tensor {
        let value = broadcast_eval(&self.value(), &rhs.value(), |x, y| x - y);
        let (sa, sb) = (self.shape(), rhs.shape());
        Tensor::from_op(value, vec![self.clone(), rhs.clone()], move |g| {
            vec![
                Some(reduce_to_shape(g, &sa)),
                Some(reduce_to_shape(&g.mapv(|v| -v), &sb)),
            ]
        })
    }

    pub fn mul(&self, rhs: &Tensor) -> Tensor {
        let value = broadcast_eval(&self.value(), &rhs.value(), |x, y| x * y);
        let (a, b) = (self.clone(), rhs.clone());
        let (sa, sb) = (self.shape(), rhs.shape());
        Tensor::from_op(value, vec![self.clone(), rhs.clone()], move |g| {
            let ga = broadcast_eval(g, &b.value(), |u, y| u * y);
            let gb = broadcast_eval(g, &a.value(), |u, x| u * x);
            vec![
                Some(reduce_to_shape(&ga, &sa)),
                Some(reduce_to_shape(&gb, &sb)),
            ]
        })
    }

    pub fn div(&self, rhs: &Tensor) -> Tensor {
        let value = broadcast_eval(&self.value(), &rhs.value(), |x, y| x / y);
        let (a, b) = (self.clone(), rhs.clone());
        let (sa, sb) = (self.shape(), rhs.shape());
        Tensor::from_op(value, vec![self.clone(), rhs.clone()], move |g| {
            let ga = broadcast_eval(g, &b.value(), |u, y| u / y);
            let gb = {
                let num = broadcast_eval(&a.value(), &b.value(), |x, y| -x / (y * y));
                broadcast_eval(g, &num, |u, w| u * w)
            };
            vec![
                Some(reduce_to_shape(&ga, &sa)),
                Some(reduce_to_shape(&gb, &sb)),
            ]
        })
    }

    /// Elementwise minimum; the gradient flows to whichever input is smaller
    /// (ties go to `self`).
    pub fn minimum(&self, rhs: &Tensor) -> Tensor {
        let value = broadcast_eval(&self.value(), &rhs.value(), f64::min);
        let (a, b) = (self.clone(), rhs.clone());
        let (sa, sb) = (self.shape(), rhs.shape());
        Tensor::from_op(value, vec![self.clone(), rhs.clone()], move |g| {
            let mask = broadcast_eval(&a.value(), &b.value(), |x, y| if x <= y { 1.0 } else { 0.0 });
            let ga = broadcast_eval(g, &mask, |u, m| u * m);
            let gb = broadcast_eval(g, &mask, |u, m| u * (1.0 - m));
            vec![
                Some(reduce_to_shape(&ga, &sa)),
                Some(reduce_to_shape(&gb, &sb)),
            ]
        })
    }

    pub fn maximum(&self, rhs: &Tensor) -> Tensor {
        let value = broadcast_eval(&self.value(), &rhs.value(), f64::max);
        let (a, b) = (self.clone(), rhs.clone());
        let (sa, sb) = (self.shape(), rhs.shape());
        Tensor::from_op(value, vec![self.clone(), rhs.clone()], move |g| {
            let mask = broadcast_eval(&a.value(), &b.value(), |x, y| if x >= y { 1.0 } else { 0.0 });
            let ga = broadcast_eval(g, &mask, |u, m| u * m);
            let gb = broadcast_eval(g, &mask, |u, m| u * (1.0 - m));
            vec![
                Some(reduce_to_shape(&ga, &sa)),
                Some(reduce_to_shape(&gb, &sb)),
            ]
        })
    }

    // ---- unary elementwise ----

    fn unary(
        &self,
        fwd: impl Fn(f64) -> f64,
        dydx: impl Fn(f64, f64) -> f64 + 'static, // (x, y) -> dy/dx
    ) -> Tensor {
        let value = self.value().mapv(&fwd);
        let x = self.clone();
        let y = value.clone();
        Tensor::from_op(value, vec![self.clone()], move |g| {
            let mut out = g.clone();
            ndarray::Zip::from(&mut out)
                .and(&x.value().view())
                .and(&y)
                .for_each(|o, &xv, &yv| *o *= dydx(xv, yv));
            vec![Some(out)]
        })
    }

    pub fn neg(&self) -> Tensor {
        self.unary(|x| -x, |_, _| -1.0)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.unary(move |x| c * x, move |_, _| c)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.unary(move |x| x + c, |_, _| 1.0)
    }

    pub fn abs(&self) -> Tensor {
        self.unary(f64::abs, |x, _| if x >= 0.0 { 1.0 } else { -1.0 })
    }

    pub fn relu(&self) -> Tensor {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(sigmoid_scalar, |_, y| y * (1.0 - y))
    }

    pub fn softplus(&self) -> Tensor {
        self.unary(softplus_scalar, |x, _| sigmoid_scalar(x))
    }

    pub fn exp(&self) -> Tensor {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn ln(&self) -> Tensor {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(&self) -> Tensor {
        self.unary(f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn square(&self) -> Tensor {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn atan(&self) -> Tensor {
        self.unary(f64::atan, |x, _| 1.0 / (1.0 + x * x))
    }

    pub fn clamp_min(&self, c: f64) -> Tensor {
        self.unary(move |x| x.max(c), move |x, _| if x > c { 1.0 } else { 0.0 })
    }

    // ---- reductions ----

    pub fn sum_all(&self) -> Tensor {
        let total: f64 = self.value().sum();
        let shape = self.shape();
        Tensor::from_op(
            ArrayD::from_elem(IxDyn(&[]), total),
            vec![self.clone()],
            move |g| {
                let u = *g.iter().next().expect("scalar grad");
                vec![Some(ArrayD::from_elem(IxDyn(&shape), u))]
            },
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.len().max(1) as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Sum over `axis`, keeping it as a length-1 dimension.
    pub fn sum_axis_keep(&self, axis: usize) -> Tensor {
        let value = self.value().sum_axis(Axis(axis)).insert_axis(Axis(axis));
        let shape = self.shape();
        Tensor::from_op(value, vec![self.clone()], move |g| {
            let gb = g
                .broadcast(IxDyn(&shape))
                .expect("broadcast grad")
                .to_owned();
            vec![Some(gb)]
        })
    }

    pub fn mean_axis_keep(&self, axis: usize) -> Tensor {
        let n = self.shape()[axis] as f64;
        self.sum_axis_keep(axis).scale(1.0 / n)
    }

    /// Mean over the two trailing spatial axes of a (B, C, H, W) map -> (B, C).
    pub fn global_avg_pool(&self) -> Tensor {
        let shape = self.shape();
        assert_eq!(shape.len(), 4, "global_avg_pool expects (B, C, H, W)");
        let (h, w) = (shape[2], shape[3]);
        let value = self
            .value()
            .sum_axis(Axis(3))
            .sum_axis(Axis(2))
            .mapv(|v| v / (h * w) as f64);
        let shape_c = shape.clone();
        Tensor::from_op(value, vec![self.clone()], move |g| {
            let scale = 1.0 / (h * w) as f64;
            let g4 = g
                .clone()
                .insert_axis(Axis(2))
                .insert_axis(Axis(3));
            let gb = g4
                .broadcast(IxDyn(&shape_c))
                .expect("broadcast grad")
                .mapv(|v| v * scale);
            vec![Some(gb)]
        })
    }

    // ---- shape manipulation ----

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        let orig = self.shape();
        let value = self
            .value()
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: incompatible shapes");
        Tensor::from_op(value, vec![self.clone()], move |g| {
            vec![Some(
                g.as_standard_layout()
                    .to_owned()
                    .into_shape_with_order(IxDyn(&orig))
                    .expect("reshape grad"),
            )]
        })
    }

    pub fn permute(&self, axes: &[usize]) -> Tensor {
        let value = self
            .value()
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        let mut inverse = vec![0usize; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        Tensor::from_op(value, vec![self.clone()], move |g| {
            vec![Some(
                g.view()
                    .permuted_axes(IxDyn(&inverse))
                    .as_standard_layout()
                    .to_owned(),
            )]
        })
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor {
        let value = self
            .value()
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        let shape = self.shape();
        Tensor::from_op(value, vec![self.clone()], move |g| {
            let mut out = ArrayD::zeros(IxDyn(&shape));
            out.slice_axis_mut(Axis(axis), Slice::from(start..start + len))
                .assign(g);
            vec![Some(out)]
        })
    }

    pub fn flip(&self, axis: usize) -> Tensor {
        let value = self
            .value()
            .slice_axis(Axis(axis), Slice::new(0, None, -1))
            .as_standard_layout()
            .to_owned();
        Tensor::from_op(value, vec![self.clone()], move |g| {
            vec![Some(
                g.slice_axis(Axis(axis), Slice::new(0, None, -1))
                    .as_standard_layout()
                    .to_owned(),
            )]
        })
    }

    /// Reorders `axis` by `indices` (gather). Backward scatter-adds.
    pub fn index_select(&self, axis: usize, indices: &[usize]) -> Tensor {
        let idx = indices.to_vec();
        let value = self.value().select(Axis(axis), &idx);
        let shape = self.shape();
        Tensor::from_op(value, vec![self.clone()], move |g| {
            let mut out = ArrayD::zeros(IxDyn(&shape));
            for (i, &src) in idx.iter().enumerate() {
                let mut dst = out.index_axis_mut(Axis(axis), src);
                dst += &g.index_axis(Axis(axis), i);
            }
            vec![Some(out)]
        })
    }

    pub fn broadcast_like(&self, shape: &[usize]) -> Tensor {
        let value = self
            .value()
            .broadcast(IxDyn(shape))
            .expect("broadcast_like: incompatible")
            .to_owned();
        let orig = self.shape();
        Tensor::from_op(value, vec![self.clone()], move |g| {
            vec![Some(reduce_to_shape(g, &orig))]
        })
    }

    // ---- linear algebra ----

    /// 2-D matrix product (m, k) x (k, n) -> (m, n).
    pub fn matmul(&self, rhs: &Tensor) -> Tensor {
        let value = {
            let av = self.value();
            let bv = rhs.value();
            let a = view2(&av);
            let b = view2(&bv);
            assert_eq!(a.ncols(), b.nrows(), "matmul: inner dimensions differ");
            a.dot(&b).into_dyn()
        };
        let (ta, tb) = (self.clone(), rhs.clone());
        Tensor::from_op(value, vec![self.clone(), rhs.clone()], move |g| {
            let av = ta.value();
            let bv = tb.value();
            let g2 = view2(g);
            let ga = g2.dot(&view2(&bv).t()).into_dyn();
            let gb = view2(&av).t().dot(&g2).into_dyn();
            vec![Some(ga), Some(gb)]
        })
    }

    // ---- fused layers ----

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Tensor {
        let v = self.value();
        let mut value = v.to_owned();
        for mut lane in value.lanes_mut(Axis(axis)) {
            let m = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            lane.mapv_inplace(|x| (x - m).exp());
            let s: f64 = lane.sum();
            lane.mapv_inplace(|x| x / s);
        }
        drop(v);
        let y = value.clone();
        Tensor::from_op(value, vec![self.clone()], move |g| {
            let mut out = g * &y;
            for (mut olane, ylane) in out
                .lanes_mut(Axis(axis))
                .into_iter()
                .zip(y.lanes(Axis(axis)))
            {
                let dot: f64 = olane.sum();
                ndarray::Zip::from(&mut olane)
                    .and(&ylane)
                    .for_each(|o, &yv| *o -= dot * yv);
            }
            vec![Some(out)]
        })
    }

    /// Layer normalization over the last axis with affine parameters.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
        let x = self.value().to_owned();
        let ax = x.ndim() - 1;
        let c = x.shape()[ax] as f64;
        let mu = x.mean_axis(Axis(ax)).expect("mean").insert_axis(Axis(ax));
        let centered = &x - &mu;
        let var = centered.mapv(|v| v * v).mean_axis(Axis(ax)).expect("var").insert_axis(Axis(ax));
        let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
        let xhat = &centered * &inv_std;
        let value = {
            let gv = gamma.value();
            let bv = beta.value();
            let scaled = broadcast_eval(&xhat, &gv, |a, b| a * b);
            broadcast_eval(&scaled, &bv, |a, b| a + b)
        };
        let (tg, xhat_c, inv_std_c) = (gamma.clone(), xhat, inv_std);
        let gamma_shape = gamma.shape();
        let beta_shape = beta.shape();
        Tensor::from_op(
            value,
            vec![self.clone(), gamma.clone(), beta.clone()],
            move |g| {
                // dxhat = g * gamma
                let dxhat = broadcast_eval(g, &tg.value(), |u, w| u * w);
                let sum_dxhat = dxhat.sum_axis(Axis(ax)).insert_axis(Axis(ax));
                let sum_dxhat_xhat = (&dxhat * &xhat_c).sum_axis(Axis(ax)).insert_axis(Axis(ax));
                // dx = inv_std/C * (C*dxhat - sum(dxhat) - xhat * sum(dxhat*xhat))
                let dx = (&dxhat.mapv(|v| v * c) - &sum_dxhat - &(&xhat_c * &sum_dxhat_xhat))
                    .mapv(|v| v / c)
                    * &inv_std_c;
                let dgamma = reduce_to_shape(&(g * &xhat_c), &gamma_shape);
                let dbeta = reduce_to_shape(g, &beta_shape);
                vec![Some(dx), Some(dgamma), Some(dbeta)]
            },
        )
    }

    /// Normalizes a (B, C, H, W) map to zero mean / unit variance within
    /// each of `groups` channel groups per batch item (no affine part).
    pub fn group_norm_base(&self, groups: usize, eps: f64) -> Tensor {
        let shape = self.shape();
        assert_eq!(shape.len(), 4, "group_norm expects (B, C, H, W)");
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        assert_eq!(c % groups, 0, "groups must divide channels");
        let set = (c / groups) * h * w;
        let grouped = [b * groups, set];

        let x = self
            .value()
            .view()
            .into_shape_with_order((b * groups, set))
            .expect("group reshape")
            .to_owned();
        let mu = x.mean_axis(Axis(1)).expect("mean").insert_axis(Axis(1));
        let centered = &x - &mu;
        let var = centered
            .mapv(|v| v * v)
            .mean_axis(Axis(1))
            .expect("var")
            .insert_axis(Axis(1));
        let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
        let xhat = &centered * &inv_std;
        let value = xhat
            .clone()
            .into_shape_with_order(IxDyn(&shape))
            .expect("ungroup reshape");
        let n = set as f64;
        Tensor::from_op(value, vec![self.clone()], move |g| {
            let g2 = g
                .view()
                .into_shape_with_order((grouped[0], grouped[1]))
                .expect("grad reshape")
                .to_owned();
            let sum_g = g2.sum_axis(Axis(1)).insert_axis(Axis(1));
            let sum_gx = (&g2 * &xhat).sum_axis(Axis(1)).insert_axis(Axis(1));
            let dx = (&g2.mapv(|v| v * n) - &sum_g - &(&xhat * &sum_gx)).mapv(|v| v / n)
                * &inv_std;
            vec![Some(
                dx.into_shape_with_order(IxDyn(&shape)).expect("dx reshape"),
            )]
        })
    }

    /// Stable binary cross-entropy on logits against constant targets,
    /// elementwise (no reduction).
    pub fn bce_with_logits(&self, targets: &Data) -> Tensor {
        let x = self.value();
        assert_eq!(x.shape(), targets.shape(), "bce: target shape mismatch");
        let mut value = ArrayD::zeros(x.raw_dim());
        ndarray::Zip::from(&mut value)
            .and(&*x)
            .and(targets)
            .for_each(|o, &xv, &tv| {
                *o = xv.max(0.0) - xv * tv + (-xv.abs()).exp().ln_1p();
            });
        drop(x);
        let t = targets.clone();
        let xt = self.clone();
        Tensor::from_op(value, vec![self.clone()], move |g| {
            let mut out = g.clone();
            ndarray::Zip::from(&mut out)
                .and(&xt.value().view())
                .and(&t)
                .for_each(|o, &xv, &tv| *o *= sigmoid_scalar(xv) - tv);
            vec![Some(out)]
        })
    }

    /// Gathers feature vectors at spatial cells of a (B, C, H, W) map,
    /// producing (P, C). Backward scatter-adds into the map.
    pub fn gather_cells(&self, coords: &[(usize, usize, usize)]) -> Tensor {
        let shape = self.shape();
        assert_eq!(shape.len(), 4, "gather_cells expects (B, C, H, W)");
        let c = shape[1];
        let v = self.value();
        let mut value = ArrayD::zeros(IxDyn(&[coords.len(), c]));
        for (p, &(b, y, x)) in coords.iter().enumerate() {
            for ch in 0..c {
                value[[p, ch]] = v[[b, ch, y, x]];
            }
        }
        drop(v);
        let coords = coords.to_vec();
        Tensor::from_op(value, vec![self.clone()], move |g| {
            let mut out = ArrayD::zeros(IxDyn(&shape));
            for (p, &(b, y, x)) in coords.iter().enumerate() {
                for ch in 0..c {
                    out[[b, ch, y, x]] += g[[p, ch]];
                }
            }
            vec![Some(out)]
        })
    }
}

/// Concatenation along `axis`.
pub fn concat(axis: usize, parts: &[Tensor]) -> Tensor {
    assert!(!parts.is_empty(), "concat of zero tensors");
    let views: Vec<_> = parts.iter().map(|t| t.to_data()).collect();
    let value = concatenate(
        Axis(axis),
        &views.iter().map(|v| v.view()).collect::<Vec<_>>(),
    )
    .expect("concat: incompatible shapes");
    let sizes: Vec<usize> = parts.iter().map(|t| t.shape()[axis]).collect();
    Tensor::from_op(value, parts.to_vec(), move |g| {
        let mut grads = Vec::with_capacity(sizes.len());
        let mut off = 0;
        for &s in &sizes {
            grads.push(Some(
                g.slice_axis(Axis(axis), Slice::from(off..off + s)).to_owned(),
            ));
            off += s;
        }
        grads
    })
}

fn view2(d: &Data) -> ndarray::ArrayView2<'_, f64> {
    d.view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("expected rank-2 array")
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus_scalar(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}
