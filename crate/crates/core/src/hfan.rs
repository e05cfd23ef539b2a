//! Hierarchical feature aggregation neck: refine-then-fuse pyramid assembly.
//!
//! Each adaptive scale fusion block (ASFB) upsamples its deep neighbor with
//! content-aware kernel reassembly, downsamples its shallow neighbor with
//! modulated deformable sampling, fuses the three maps with a fast
//! normalized weighted sum, and finishes with a light convolution. Stacking
//! ASFBs along a top-down then a bottom-up pass turns {P2..P5} into
//! {P'2..P'5} at unchanged shapes.

use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;

use crate::error::{FuseError, Result};
use crate::nn::{Collect, Conv2d, ConvNorm, ParamMap};
use crate::tensor::conv::{conv_out_len, pixel_shuffle, upsample_nearest, ConvSpec};
use crate::tensor::{Data, Tensor};

/// Ordered feature maps for pyramid levels 2..=5; level l has spatial size
/// input / 2^l and all levels share the batch and channel dimensions here.
#[derive(Clone)]
pub struct FeaturePyramid {
    maps: Vec<Tensor>,
}

pub const PYRAMID_LEVELS: [usize; 4] = [2, 3, 4, 5];

impl FeaturePyramid {
    pub fn new(maps: Vec<Tensor>) -> Result<Self> {
        if maps.len() != 4 {
            return Err(FuseError::ShapeMismatch(format!(
                "pyramid must have levels 2..=5, got {} maps",
                maps.len()
            )));
        }
        for i in 0..3 {
            let a = maps[i].shape();
            let b = maps[i + 1].shape();
            if a[2] != 2 * b[2] || a[3] != 2 * b[3] {
                return Err(FuseError::ShapeMismatch(format!(
                    "level {} is {:?} but level {} is {:?}: expected exact halving",
                    PYRAMID_LEVELS[i],
                    a,
                    PYRAMID_LEVELS[i + 1],
                    b
                )));
            }
            if a[0] != b[0] {
                return Err(FuseError::ShapeMismatch("pyramid batch sizes differ".into()));
            }
        }
        Ok(FeaturePyramid { maps })
    }

    /// Map at pyramid level `l` (2..=5).
    pub fn level(&self, l: usize) -> &Tensor {
        assert!((2..=5).contains(&l), "pyramid level {l} out of range");
        &self.maps[l - 2]
    }

    pub fn maps(&self) -> &[Tensor] {
        &self.maps
    }
}

/// Content-reconstruction upsampler: predicts a normalized k x k reassembly
/// kernel per output location and reassembles the (zero-padded) source
/// neighborhood.
pub struct CruUpsampler {
    pub compress: ConvNorm,
    pub predict: Conv2d,
    pub kernel_size: usize,
    pub scale: usize,
}

impl CruUpsampler {
    pub fn new(channels: usize, kernel_size: usize, scale: usize, rng: &mut impl Rng) -> Self {
        let mid = (channels / 4).max(4);
        CruUpsampler {
            compress: ConvNorm::new(channels, mid, 1, ConvSpec::default(), rng),
            predict: Conv2d::new(
                mid,
                kernel_size * kernel_size * scale * scale,
                3,
                ConvSpec { stride: 1, padding: 1, groups: 1 },
                rng,
            ),
            kernel_size,
            scale,
        }
    }

    /// Predicted kernel field, softmax-normalized over the k^2 axis, shaped
    /// (B, k^2, H*scale, W*scale). Taps whose source position falls outside
    /// the map are masked out before the softmax, so every kernel is a
    /// distribution over the valid neighborhood and constant inputs survive
    /// upsampling exactly, borders included.
    pub fn kernel_field(&self, x: &Tensor) -> Tensor {
        let logits = self.predict.forward(&self.compress.forward(x).relu());
        let shuffled = pixel_shuffle(&logits, self.scale);
        let xs = x.shape();
        let mask = Tensor::constant(border_mask(xs[2], xs[3], self.kernel_size, self.scale));
        shuffled.add(&mask).softmax(1)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let kernels = self.kernel_field(x);
        reassemble(x, &kernels, self.kernel_size, self.scale)
    }
}

impl Collect for CruUpsampler {
    fn collect(&self, prefix: &str, params: &mut ParamMap) {
        self.compress.collect(&format!("{prefix}.compress"), params);
        self.predict.collect(&format!("{prefix}.predict"), params);
    }
}

/// Additive logit mask (1, k^2, H*scale, W*scale): 0 where the tap's source
/// position is inside the map, a large negative value where it is not.
pub fn border_mask(h: usize, w: usize, k: usize, scale: usize) -> Data {
    let half = (k / 2) as isize;
    let mut mask = ArrayD::zeros(IxDyn(&[1, k * k, h * scale, w * scale]));
    for oy in 0..h * scale {
        let sy = (oy / scale) as isize;
        for ox in 0..w * scale {
            let sx = (ox / scale) as isize;
            for n in 0..k * k {
                let py = sy + (n / k) as isize - half;
                let px = sx + (n % k) as isize - half;
                if py < 0 || py >= h as isize || px < 0 || px >= w as isize {
                    mask[[0, n, oy, ox]] = -1e30;
                }
            }
        }
    }
    mask
}

/// Kernel reassembly: `F_out(i,j) = sum_{(p,q) in N_k(i,j)} K_ij(p,q) F_in(p,q)`
/// where the neighborhood is centered on the source location (i/scale,
/// j/scale) and reads zeros beyond the border.
///
/// `kernels` must be (B, k^2, H*scale, W*scale) with nonnegative entries
/// summing to 1 per location.
pub fn reassemble(x: &Tensor, kernels: &Tensor, k: usize, scale: usize) -> Result<Tensor> {
    let xs = x.shape();
    let ks = kernels.shape();
    if xs.len() != 4 || ks.len() != 4 {
        return Err(FuseError::ShapeMismatch("reassemble expects rank-4 inputs".into()));
    }
    let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (ho, wo) = (h * scale, w * scale);
    if ks != [b, k * k, ho, wo] {
        return Err(FuseError::ShapeMismatch(format!(
            "kernel field must be ({b}, {}, {ho}, {wo}), got {ks:?}",
            k * k
        )));
    }
    {
        let kv = kernels.value();
        for bi in 0..b {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut sum = 0.0;
                    for n in 0..k * k {
                        let v = kv[[bi, n, oy, ox]];
                        if v < -1e-9 {
                            return Err(FuseError::InvalidConfig(
                                "reassembly kernel has negative entries".into(),
                            ));
                        }
                        sum += v;
                    }
                    if (sum - 1.0).abs() > 1e-6 {
                        return Err(FuseError::InvalidConfig(format!(
                            "reassembly kernel at ({bi},{oy},{ox}) sums to {sum}, expected 1"
                        )));
                    }
                }
            }
        }
    }

    let half = (k / 2) as isize;
    let mut value = ArrayD::zeros(IxDyn(&[b, c, ho, wo]));
    {
        let xv = x.value();
        let kv = kernels.value();
        for bi in 0..b {
            for oy in 0..ho {
                let sy = (oy / scale) as isize;
                for ox in 0..wo {
                    let sx = (ox / scale) as isize;
                    for n in 0..k * k {
                        let kw = kv[[bi, n, oy, ox]];
                        if kw == 0.0 {
                            continue;
                        }
                        let py = sy + (n / k) as isize - half;
                        let px = sx + (n % k) as isize - half;
                        if py < 0 || py >= h as isize || px < 0 || px >= w as isize {
                            continue;
                        }
                        for ci in 0..c {
                            value[[bi, ci, oy, ox]] += kw * xv[[bi, ci, py as usize, px as usize]];
                        }
                    }
                }
            }
        }
    }

    let (tx, tk) = (x.clone(), kernels.clone());
    Ok(Tensor::from_op(
        value,
        vec![x.clone(), kernels.clone()],
        move |g| {
            let xv = tx.value();
            let kv = tk.value();
            let mut dx = ArrayD::zeros(IxDyn(&[b, c, h, w]));
            let mut dk = ArrayD::zeros(IxDyn(&[b, k * k, ho, wo]));
            for bi in 0..b {
                for oy in 0..ho {
                    let sy = (oy / scale) as isize;
                    for ox in 0..wo {
                        let sx = (ox / scale) as isize;
                        for n in 0..k * k {
                            let py = sy + (n / k) as isize - half;
                            let px = sx + (n % k) as isize - half;
                            if py < 0 || py >= h as isize || px < 0 || px >= w as isize {
                                continue;
                            }
                            let (py, px) = (py as usize, px as usize);
                            let kw = kv[[bi, n, oy, ox]];
                            let mut dk_acc = 0.0;
                            for ci in 0..c {
                                let gv = g[[bi, ci, oy, ox]];
                                dx[[bi, ci, py, px]] += kw * gv;
                                dk_acc += gv * xv[[bi, ci, py, px]];
                            }
                            dk[[bi, n, oy, ox]] += dk_acc;
                        }
                    }
                }
            }
            vec![Some(dx), Some(dk)]
        },
    ))
}

/// Geometric-alignment downsampler: a 3 x 3 stride-s convolution whose nine
/// taps are shifted by learned offsets and scaled by sigmoid modulation,
/// sampled bilinearly with zeros beyond the border.
pub struct GadDownsampler {
    pub offset_conv: Conv2d, // C -> 18 (dy, dx per tap)
    pub modulation_conv: Conv2d, // C -> 9, sigmoid
    pub weight: Tensor,      // (C_out, C_in, 3, 3)
    pub bias: Tensor,        // (C_out)
    pub stride: usize,
}

impl GadDownsampler {
    pub fn new(channels: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let spec = ConvSpec { stride, padding: 1, groups: 1 };
        let offset_conv = Conv2d::new(channels, 18, 3, spec, rng);
        // Offsets start near zero so training begins at the plain conv.
        offset_conv.weight.update_value(|w| w.mapv_inplace(|v| v * 0.01));
        if let Some(b) = &offset_conv.bias {
            b.update_value(|v| v.fill(0.0));
        }
        let modulation_conv = Conv2d::new(channels, 9, 3, spec, rng);
        let bound = 1.0 / ((channels * 9) as f64).sqrt();
        let n = channels * channels * 9;
        let wdata: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        let bdata: Vec<f64> = (0..channels).map(|_| rng.gen_range(-bound..bound)).collect();
        GadDownsampler {
            offset_conv,
            modulation_conv,
            weight: Tensor::new(
                ArrayD::from_shape_vec(IxDyn(&[channels, channels, 3, 3]), wdata).expect("w"),
                true,
            ),
            bias: Tensor::new(ArrayD::from_shape_vec(IxDyn(&[channels]), bdata).expect("b"), true),
            stride,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let offsets = self.offset_conv.forward(x);
        let modulation = self.modulation_conv.forward(x).sigmoid();
        deform_conv(x, &offsets, &modulation, &self.weight, &self.bias, self.stride)
    }
}

impl Collect for GadDownsampler {
    fn collect(&self, prefix: &str, params: &mut ParamMap) {
        self.offset_conv.collect(&format!("{prefix}.offset_conv"), params);
        self.modulation_conv.collect(&format!("{prefix}.modulation_conv"), params);
        params.push(format!("{prefix}.weight"), &self.weight);
        params.push(format!("{prefix}.bias"), &self.bias);
    }
}

fn bilinear_sample(x: &Data, bi: usize, ci: usize, py: f64, px: f64, h: usize, w: usize) -> f64 {
    let y0 = py.floor() as isize;
    let x0 = px.floor() as isize;
    let fy = py - y0 as f64;
    let fx = px - x0 as f64;
    let mut acc = 0.0;
    for (dy, wy) in [(0isize, 1.0 - fy), (1, fy)] {
        let yy = y0 + dy;
        if yy < 0 || yy >= h as isize || wy == 0.0 {
            continue;
        }
        for (dx, wx) in [(0isize, 1.0 - fx), (1, fx)] {
            let xx = x0 + dx;
            if xx < 0 || xx >= w as isize || wx == 0.0 {
                continue;
            }
            acc += wy * wx * x[[bi, ci, yy as usize, xx as usize]];
        }
    }
    acc
}

/// Modulated deformable 3 x 3 convolution (padding 1):
/// `F_out(p0) = sum_n w(p_n) F_in(p0 + p_n + dp_n) m_n`.
///
/// `offsets` is (B, 18, Ho, Wo) as (dy, dx) pairs per tap; `modulation`
/// (B, 9, Ho, Wo) in [0, 1]; `weight` (C_out, C_in, 3, 3).
pub fn deform_conv(
    x: &Tensor,
    offsets: &Tensor,
    modulation: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
) -> Result<Tensor> {
    let xs = x.shape();
    if xs.len() != 4 {
        return Err(FuseError::ShapeMismatch("deform_conv expects (B, C, H, W)".into()));
    }
    let (b, c_in, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let ws = weight.shape();
    let c_out = ws[0];
    if ws != [c_out, c_in, 3, 3] {
        return Err(FuseError::ShapeMismatch(format!(
            "weight must be (C_out, {c_in}, 3, 3), got {ws:?}"
        )));
    }
    let ho = conv_out_len(h, 3, stride, 1);
    let wo = conv_out_len(w, 3, stride, 1);
    if offsets.shape() != [b, 18, ho, wo] {
        return Err(FuseError::ShapeMismatch(format!(
            "offsets must be ({b}, 18, {ho}, {wo}), got {:?}",
            offsets.shape()
        )));
    }
    if modulation.shape() != [b, 9, ho, wo] {
        return Err(FuseError::ShapeMismatch(format!(
            "modulation must be ({b}, 9, {ho}, {wo}), got {:?}",
            modulation.shape()
        )));
    }
    if offsets.value().iter().any(|v| !v.is_finite()) {
        return Err(FuseError::NonFinite("deform_conv offsets".into()));
    }

    let l = ho * wo;
    // Sampling positions for output (oy, ox), tap n = 3*u + v:
    // py = oy*stride + u - 1 + dy, px = ox*stride + v - 1 + dx.
    let sample_cols = move |xv: &Data, ov: &Data, mv: &Data| -> (Array2<f64>, Array2<f64>) {
        // raw (unmodulated) samples and modulated columns, both (C*9, L) per batch item
        let mut raw = Array2::<f64>::zeros((b * c_in * 9, l));
        let mut cols = Array2::<f64>::zeros((b * c_in * 9, l));
        for bi in 0..b {
            for oy in 0..ho {
                for ox in 0..wo {
                    let li = oy * wo + ox;
                    for n in 0..9 {
                        let dy = ov[[bi, 2 * n, oy, ox]];
                        let dx = ov[[bi, 2 * n + 1, oy, ox]];
                        let py = (oy * stride + n / 3) as f64 - 1.0 + dy;
                        let px = (ox * stride + n % 3) as f64 - 1.0 + dx;
                        let m = mv[[bi, n, oy, ox]];
                        for ci in 0..c_in {
                            let s = bilinear_sample(xv, bi, ci, py, px, h, w);
                            raw[[(bi * c_in + ci) * 9 + n, li]] = s;
                            cols[[(bi * c_in + ci) * 9 + n, li]] = s * m;
                        }
                    }
                }
            }
        }
        (raw, cols)
    };

    let mut value = ArrayD::zeros(IxDyn(&[b, c_out, ho, wo]));
    {
        let xv = x.value();
        let ov = offsets.value();
        let mv = modulation.value();
        let wv = weight.value();
        let bv = bias.value();
        let wmat = wv
            .view()
            .into_shape_with_order((c_out, c_in * 9))
            .expect("weight reshape");
        let (_, cols) = sample_cols(&xv, &ov, &mv);
        for bi in 0..b {
            let colsb = cols.slice(ndarray::s![bi * c_in * 9..(bi + 1) * c_in * 9, ..]);
            let out = wmat.dot(&colsb); // (C_out, L)
            for co in 0..c_out {
                for li in 0..l {
                    value[[bi, co, li / wo, li % wo]] = out[[co, li]] + bv[[co]];
                }
            }
        }
    }

    let parents = vec![
        x.clone(),
        offsets.clone(),
        modulation.clone(),
        weight.clone(),
        bias.clone(),
    ];
    let (tx, to, tm, tw) = (x.clone(), offsets.clone(), modulation.clone(), weight.clone());
    Ok(Tensor::from_op(value, parents, move |g| {
        let xv = tx.value();
        let ov = to.value();
        let mv = tm.value();
        let wv = tw.value();
        let wmat = wv
            .view()
            .into_shape_with_order((c_out, c_in * 9))
            .expect("weight reshape");
        let (raw, cols) = sample_cols(&xv, &ov, &mv);

        let mut dx = ArrayD::zeros(IxDyn(&[b, c_in, h, w]));
        let mut doff = ArrayD::zeros(IxDyn(&[b, 18, ho, wo]));
        let mut dmod = ArrayD::zeros(IxDyn(&[b, 9, ho, wo]));
        let mut dw = Array2::<f64>::zeros((c_out, c_in * 9));
        let mut db = ArrayD::zeros(IxDyn(&[c_out]));

        for bi in 0..b {
            let mut gmat = Array2::<f64>::zeros((c_out, l));
            for co in 0..c_out {
                for li in 0..l {
                    let gv = g[[bi, co, li / wo, li % wo]];
                    gmat[[co, li]] = gv;
                    db[[co]] += gv;
                }
            }
            let colsb = cols.slice(ndarray::s![bi * c_in * 9..(bi + 1) * c_in * 9, ..]);
            dw += &gmat.dot(&colsb.t());
            let dcols = wmat.t().dot(&gmat); // (C_in*9, L)

            for oy in 0..ho {
                for ox in 0..wo {
                    let li = oy * wo + ox;
                    for n in 0..9 {
                        let dy = ov[[bi, 2 * n, oy, ox]];
                        let dxo = ov[[bi, 2 * n + 1, oy, ox]];
                        let py = (oy * stride + n / 3) as f64 - 1.0 + dy;
                        let px = (ox * stride + n % 3) as f64 - 1.0 + dxo;
                        let m = mv[[bi, n, oy, ox]];
                        let y0 = py.floor() as isize;
                        let x0 = px.floor() as isize;
                        let fy = py - y0 as f64;
                        let fx = px - x0 as f64;
                        let mut doff_y = 0.0;
                        let mut doff_x = 0.0;
                        for ci in 0..c_in {
                            let dcol = dcols[[ci * 9 + n, li]];
                            if dcol == 0.0 {
                                continue;
                            }
                            dmod[[bi, n, oy, ox]] += dcol * raw[[(bi * c_in + ci) * 9 + n, li]];
                            let ds = dcol * m;
                            // Corner reads (zero outside) and their weights.
                            let mut corner = [[0.0f64; 2]; 2];
                            for (iy, yy) in [(0usize, y0), (1, y0 + 1)] {
                                for (ix, xx) in [(0usize, x0), (1, x0 + 1)] {
                                    if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                                        corner[iy][ix] = xv[[bi, ci, yy as usize, xx as usize]];
                                        let wgt = (if iy == 0 { 1.0 - fy } else { fy })
                                            * (if ix == 0 { 1.0 - fx } else { fx });
                                        dx[[bi, ci, yy as usize, xx as usize]] += ds * wgt;
                                    }
                                }
                            }
                            doff_y += ds
                                * ((corner[1][0] - corner[0][0]) * (1.0 - fx)
                                    + (corner[1][1] - corner[0][1]) * fx);
                            doff_x += ds
                                * ((corner[0][1] - corner[0][0]) * (1.0 - fy)
                                    + (corner[1][1] - corner[1][0]) * fy);
                        }
                        doff[[bi, 2 * n, oy, ox]] += doff_y;
                        doff[[bi, 2 * n + 1, oy, ox]] += doff_x;
                    }
                }
            }
        }
        let dw = dw
            .into_shape_with_order(IxDyn(&[c_out, c_in, 3, 3]))
            .expect("dw reshape");
        vec![Some(dx), Some(doff), Some(dmod), Some(dw), Some(db)]
    }))
}

/// Fast normalized weighted fusion of up to three maps:
/// `(w1 a + w2 b + w3 c) / (w1 + w2 + w3 + eps)` with weights clamped at
/// zero; absent inputs contribute neither numerator nor denominator.
pub struct AdaptiveWeightedFuser {
    pub raw_weights: Tensor, // (3), projected by clamp-at-zero
    pub eps: f64,
}

impl AdaptiveWeightedFuser {
    pub fn new() -> Self {
        AdaptiveWeightedFuser {
            raw_weights: Tensor::new(ArrayD::ones(IxDyn(&[3])), true),
            eps: 1e-4,
        }
    }

    /// Inputs ordered (deep, mid, shallow); `None` pins that weight to 0.
    pub fn forward(&self, inputs: [Option<&Tensor>; 3]) -> Result<Tensor> {
        let mut shape: Option<Vec<usize>> = None;
        for t in inputs.iter().flatten() {
            match &shape {
                None => shape = Some(t.shape()),
                Some(s) => {
                    if t.shape() != *s {
                        return Err(FuseError::ShapeMismatch(format!(
                            "fusion inputs differ: {:?} vs {s:?}",
                            t.shape()
                        )));
                    }
                }
            }
        }
        if shape.is_none() {
            return Err(FuseError::InvalidConfig("weighted fusion of zero inputs".into()));
        }
        let w = self.raw_weights.clamp_min(0.0);
        let mut numer: Option<Tensor> = None;
        let mut denom: Option<Tensor> = None;
        for (i, t) in inputs.iter().enumerate() {
            let Some(t) = t else { continue };
            let wi = w.narrow(0, i, 1);
            let term = t.mul(&wi);
            numer = Some(match numer {
                Some(acc) => acc.add(&term),
                None => term,
            });
            denom = Some(match denom {
                Some(acc) => acc.add(&wi),
                None => wi,
            });
        }
        let numer = numer.expect("at least one input");
        let denom = denom.expect("at least one input").add_scalar(self.eps);
        Ok(numer.div(&denom))
    }
}

impl Default for AdaptiveWeightedFuser {
    fn default() -> Self {
        Self::new()
    }
}

impl Collect for AdaptiveWeightedFuser {
    fn collect(&self, prefix: &str, params: &mut ParamMap) {
        params.push(format!("{prefix}.raw_weights"), &self.raw_weights);
    }
}

/// Component toggles for the neck ablations.
#[derive(Clone, Copy, Debug)]
pub struct NeckOptions {
    pub use_cru: bool,
    pub use_gad: bool,
    pub use_awf: bool,
    /// Top-down pass only when false (the hierarchical-structure ablation).
    pub bidirectional: bool,
}

impl Default for NeckOptions {
    fn default() -> Self {
        NeckOptions { use_cru: true, use_gad: true, use_awf: true, bidirectional: true }
    }
}

/// One adaptive scale fusion block operating at a fixed "mid" level.
pub struct Asfb {
    pub cru: Option<CruUpsampler>,
    pub gad: Option<GadDownsampler>,
    /// Plain stride-2 conv used when the deformable path is disabled.
    pub plain_down: Option<ConvNorm>,
    pub awf: Option<AdaptiveWeightedFuser>,
    pub post: ConvNorm,
    has_deep: bool,
    has_shallow: bool,
}

impl Asfb {
    pub fn new(
        channels: usize,
        has_deep: bool,
        has_shallow: bool,
        opts: NeckOptions,
        rng: &mut impl Rng,
    ) -> Self {
        let cru = (has_deep && opts.use_cru).then(|| CruUpsampler::new(channels, 5, 2, rng));
        let gad = (has_shallow && opts.use_gad).then(|| GadDownsampler::new(channels, 2, rng));
        let plain_down = (has_shallow && !opts.use_gad).then(|| {
            ConvNorm::new(channels, channels, 3, ConvSpec { stride: 2, padding: 1, groups: 1 }, rng)
        });
        let awf = opts.use_awf.then(AdaptiveWeightedFuser::new);
        Asfb {
            cru,
            gad,
            plain_down,
            awf,
            post: ConvNorm::new(channels, channels, 3, ConvSpec { stride: 1, padding: 1, groups: 1 }, rng),
            has_deep,
            has_shallow,
        }
    }

    /// `deep` is the coarser neighbor (half resolution), `shallow` the finer
    /// one (double resolution); the output lives at the mid resolution.
    pub fn forward(
        &self,
        deep: Option<&Tensor>,
        mid: &Tensor,
        shallow: Option<&Tensor>,
    ) -> Result<Tensor> {
        if deep.is_some() != self.has_deep || shallow.is_some() != self.has_shallow {
            return Err(FuseError::InvalidConfig(
                "ASFB invoked with a different neighbor pattern than it was built for".into(),
            ));
        }
        let ms = mid.shape();
        let refined_deep = match deep {
            Some(d) => {
                let ds = d.shape();
                if ms[2] != 2 * ds[2] || ms[3] != 2 * ds[3] {
                    return Err(FuseError::ShapeMismatch(format!(
                        "deep level {:?} is not the adjacent coarser scale of {:?}",
                        ds, ms
                    )));
                }
                Some(match &self.cru {
                    Some(cru) => cru.forward(d)?,
                    None => upsample_nearest(d, 2),
                })
            }
            None => None,
        };
        let refined_shallow = match shallow {
            Some(s) => {
                let ss = s.shape();
                if ss[2] != 2 * ms[2] || ss[3] != 2 * ms[3] {
                    return Err(FuseError::ShapeMismatch(format!(
                        "shallow level {:?} is not the adjacent finer scale of {:?}",
                        ss, ms
                    )));
                }
                Some(match (&self.gad, &self.plain_down) {
                    (Some(gad), _) => gad.forward(s)?,
                    (None, Some(conv)) => conv.forward(s),
                    (None, None) => unreachable!("downsampler missing"),
                })
            }
            None => None,
        };

        let fused = match &self.awf {
            Some(awf) => {
                awf.forward([refined_deep.as_ref(), Some(mid), refined_shallow.as_ref()])?
            }
            None => {
                // Plain unweighted sum of the available maps.
                let mut acc = mid.clone();
                if let Some(d) = &refined_deep {
                    acc = acc.add(d);
                }
                if let Some(s) = &refined_shallow {
                    acc = acc.add(s);
                }
                acc
            }
        };
        Ok(self.post.forward(&fused))
    }
}

impl Collect for Asfb {
    fn collect(&self, prefix: &str, params: &mut ParamMap) {
        if let Some(cru) = &self.cru {
            cru.collect(&format!("{prefix}.cru"), params);
        }
        if let Some(gad) = &self.gad {
            gad.collect(&format!("{prefix}.gad"), params);
        }
        if let Some(conv) = &self.plain_down {
            conv.collect(&format!("{prefix}.plain_down"), params);
        }
        if let Some(awf) = &self.awf {
            awf.collect(&format!("{prefix}.awf"), params);
        }
        self.post.collect(&format!("{prefix}.post"), params);
    }
}

/// The full neck: one ASFB per level along a top-down pass, then (unless
/// running single-pass) one per level along a bottom-up pass. Boundary
/// levels run two-input fusion with the absent neighbor's weight pinned to 0.
pub struct Hfan {
    /// Top-down blocks for levels 5, 4, 3, 2 in that order.
    pub top_down: Vec<Asfb>,
    /// Bottom-up blocks for levels 2, 3, 4, 5 in that order.
    pub bottom_up: Vec<Asfb>,
    pub opts: NeckOptions,
}

impl Hfan {
    pub fn new(channels: usize, opts: NeckOptions, rng: &mut impl Rng) -> Self {
        // Top-down visits 5 -> 2: deep neighbor exists below 5, shallow above 2.
        let top_down = [5usize, 4, 3, 2]
            .iter()
            .map(|&l| Asfb::new(channels, l != 5, l != 2, opts, rng))
            .collect();
        let bottom_up = if opts.bidirectional {
            [2usize, 3, 4, 5]
                .iter()
                .map(|&l| Asfb::new(channels, l != 5, l != 2, opts, rng))
                .collect()
        } else {
            Vec::new()
        };
        Hfan { top_down, bottom_up, opts }
    }

    pub fn forward(&self, pyramid: &FeaturePyramid) -> Result<FeaturePyramid> {
        // Top-down: T_l = ASFB(deep = T_{l+1}, mid = X_l, shallow = X_{l-1}).
        let mut td: Vec<Option<Tensor>> = vec![None; 4];
        for (i, l) in [5usize, 4, 3, 2].iter().enumerate() {
            let deep = if *l == 5 { None } else { td[*l + 1 - 2].clone() };
            let shallow = if *l == 2 { None } else { Some(pyramid.level(*l - 1).clone()) };
            let out = self.top_down[i].forward(
                deep.as_ref(),
                pyramid.level(*l),
                shallow.as_ref(),
            )?;
            td[*l - 2] = Some(out);
        }
        let td: Vec<Tensor> = td.into_iter().map(|t| t.expect("level computed")).collect();
        if !self.opts.bidirectional {
            return FeaturePyramid::new(td);
        }

        // Bottom-up: U_l = ASFB(deep = T_{l+1}, mid = T_l, shallow = U_{l-1}).
        let mut bu: Vec<Option<Tensor>> = vec![None; 4];
        for (i, l) in [2usize, 3, 4, 5].iter().enumerate() {
            let deep = if *l == 5 { None } else { Some(td[*l + 1 - 2].clone()) };
            let shallow = if *l == 2 { None } else { bu[*l - 1 - 2].clone() };
            let out = self.bottom_up[i].forward(deep.as_ref(), &td[*l - 2], shallow.as_ref())?;
            bu[*l - 2] = Some(out);
        }
        FeaturePyramid::new(bu.into_iter().map(|t| t.expect("level computed")).collect())
    }
}

impl Collect for Hfan {
    fn collect(&self, prefix: &str, params: &mut ParamMap) {
        for (i, l) in [5usize, 4, 3, 2].iter().enumerate() {
            self.top_down[i].collect(&format!("{prefix}.td{l}"), params);
        }
        for (i, l) in [2usize, 3, 4, 5].iter().enumerate() {
            if i < self.bottom_up.len() {
                self.bottom_up[i].collect(&format!("{prefix}.bu{l}"), params);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::grad_check;
    use crate::tensor::conv::conv2d;
    use ndarray::Array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_map(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(Array::from_shape_vec(IxDyn(shape), v).unwrap(), false)
    }

    fn max_abs_diff(a: &Data, b: &Data) -> f64 {
        a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    /// Brute-force reassembly oracle iterating every output location.
    fn reassemble_oracle(x: &Data, kernels: &Data, k: usize, scale: usize) -> Data {
        let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let half = (k / 2) as isize;
        let mut out = ArrayD::zeros(IxDyn(&[b, c, h * scale, w * scale]));
        for bi in 0..b {
            for ci in 0..c {
                for oy in 0..h * scale {
                    for ox in 0..w * scale {
                        let mut acc = 0.0;
                        for u in 0..k {
                            for v in 0..k {
                                let py = (oy / scale) as isize + u as isize - half;
                                let px = (ox / scale) as isize + v as isize - half;
                                let xval = if py < 0
                                    || py >= h as isize
                                    || px < 0
                                    || px >= w as isize
                                {
                                    0.0
                                } else {
                                    x[[bi, ci, py as usize, px as usize]]
                                };
                                acc += kernels[[bi, u * k + v, oy, ox]] * xval;
                            }
                        }
                        out[[bi, ci, oy, ox]] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn reassemble_delta_kernel_is_nearest_upsampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let x = rand_map(&mut rng, &[1, 3, 4, 4]);
        let k = 3;
        let mut kf = ArrayD::zeros(IxDyn(&[1, k * k, 8, 8]));
        for oy in 0..8 {
            for ox in 0..8 {
                kf[[0, (k * k) / 2, oy, ox]] = 1.0; // delta at the center tap
            }
        }
        let out = reassemble(&x, &Tensor::constant(kf), k, 2).unwrap();
        let expect = upsample_nearest(&x, 2);
        assert_eq!(out.to_data(), expect.to_data());
    }

    #[test]
    fn reassemble_uniform_kernels_average_zero_padded_neighborhood() {
        // 2x2 input [[1,2],[3,4]], uniform 3x3 kernels, scale 2: each output
        // is the mean of the zero-padded 3x3 neighborhood of its source.
        let x = Tensor::constant(
            Array::from_shape_vec(IxDyn(&[1, 1, 2, 2]), vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        );
        let kf = ArrayD::from_elem(IxDyn(&[1, 9, 4, 4]), 1.0 / 9.0);
        let out = reassemble(&x, &Tensor::constant(kf.clone()), 3, 2).unwrap();
        let oracle = reassemble_oracle(&x.to_data(), &kf, 3, 2);
        assert!(max_abs_diff(&out.to_data(), &oracle) < 1e-12);
        // Spot value: source (0,0) sees {1,2,3,4} among nine taps.
        assert!((out.value()[[0, 0, 0, 0]] - 10.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn reassemble_matches_brute_force_on_random_fields() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let x = rand_map(&mut rng, &[2, 3, 3, 5]);
        // Random normalized kernel field.
        let mut kf = ArrayD::zeros(IxDyn(&[2, 25, 6, 10]));
        for bi in 0..2 {
            for oy in 0..6 {
                for ox in 0..10 {
                    let raw: Vec<f64> = (0..25).map(|_| rng.gen_range(0.0..1.0)).collect();
                    let sum: f64 = raw.iter().sum();
                    for (n, v) in raw.iter().enumerate() {
                        kf[[bi, n, oy, ox]] = v / sum;
                    }
                }
            }
        }
        let out = reassemble(&x, &Tensor::constant(kf.clone()), 5, 2).unwrap();
        let oracle = reassemble_oracle(&x.to_data(), &kf, 5, 2);
        assert!(max_abs_diff(&out.to_data(), &oracle) < 1e-12);
    }

    #[test]
    fn reassemble_rejects_unnormalized_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let x = rand_map(&mut rng, &[1, 1, 2, 2]);
        let kf = ArrayD::from_elem(IxDyn(&[1, 9, 4, 4]), 0.2);
        assert!(reassemble(&x, &Tensor::constant(kf), 3, 2).is_err());
    }

    #[test]
    fn cru_preserves_constant_inputs_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let cru = CruUpsampler::new(4, 5, 2, &mut rng);
        let x = Tensor::constant(ArrayD::from_elem(IxDyn(&[1, 4, 4, 4]), 2.75));
        let out = cru.forward(&x).unwrap();
        assert_eq!(out.shape(), vec![1, 4, 8, 8]);
        for v in out.value().iter() {
            assert!((v - 2.75).abs() < 1e-9, "constant not preserved: {v}");
        }
    }

    #[test]
    fn cru_kernels_are_normalized_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(54);
        let cru = CruUpsampler::new(4, 5, 2, &mut rng);
        let x = rand_map(&mut rng, &[2, 4, 3, 3]);
        let kf = cru.kernel_field(&x);
        let v = kf.value();
        for bi in 0..2 {
            for oy in 0..6 {
                for ox in 0..6 {
                    let sum: f64 = (0..25).map(|n| v[[bi, n, oy, ox]]).sum();
                    assert!((sum - 1.0).abs() < 1e-6);
                    assert!((0..25).all(|n| v[[bi, n, oy, ox]] >= 0.0));
                }
            }
        }
    }

    #[test]
    fn cru_output_within_neighborhood_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let cru = CruUpsampler::new(2, 3, 2, &mut rng);
        let x = rand_map(&mut rng, &[1, 2, 4, 4]);
        let out = cru.forward(&x).unwrap();
        let xv = x.value();
        let ov = out.value();
        for ci in 0..2 {
            for oy in 0..8 {
                for ox in 0..8 {
                    let (sy, sx) = (oy / 2, ox / 2);
                    let mut lo = f64::INFINITY;
                    let mut hi = f64::NEG_INFINITY;
                    for u in -1i64..=1 {
                        for v in -1i64..=1 {
                            let (py, px) = (sy as i64 + u, sx as i64 + v);
                            if py >= 0 && py < 4 && px >= 0 && px < 4 {
                                let val = xv[[0, ci, py as usize, px as usize]];
                                lo = lo.min(val);
                                hi = hi.max(val);
                            }
                        }
                    }
                    let o = ov[[0, ci, oy, ox]];
                    assert!(o >= lo - 1e-9 && o <= hi + 1e-9);
                }
            }
        }
    }

    #[test]
    fn cru_gradients_input_and_kernel_logits() {
        // Gradient check through reassembly and the masked softmax.
        let mut rng = ChaCha8Rng::seed_from_u64(56);
        let x = Tensor::new(rand_map(&mut rng, &[1, 2, 3, 3]).to_data(), true);
        let logits = Tensor::new(rand_map(&mut rng, &[1, 9, 6, 6]).to_data(), true);
        let mask = Tensor::constant(border_mask(3, 3, 3, 2));
        let report = grad_check(
            |ins| {
                let kernels = ins[1].add(&mask).softmax(1);
                reassemble(&ins[0], &kernels, 3, 2).unwrap().square().sum_all()
            },
            &[x, logits],
            1e-4,
            1e-3,
        );
        report.assert_pass();
    }

    #[test]
    fn gad_zero_offsets_equal_standard_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(57);
        let gad = GadDownsampler::new(3, 2, &mut rng);
        let x = rand_map(&mut rng, &[2, 3, 6, 6]);
        let zero_off = Tensor::constant(ArrayD::zeros(IxDyn(&[2, 18, 3, 3])));
        let unit_mod = Tensor::constant(ArrayD::ones(IxDyn(&[2, 9, 3, 3])));
        let out = deform_conv(&x, &zero_off, &unit_mod, &gad.weight, &gad.bias, 2).unwrap();
        let std_conv = conv2d(
            &x,
            &gad.weight,
            Some(&gad.bias),
            ConvSpec { stride: 2, padding: 1, groups: 1 },
        );
        assert!(max_abs_diff(&out.to_data(), &std_conv.to_data()) < 1e-6);
    }

    #[test]
    fn gad_integer_offset_matches_integer_indexing_oracle() {
        // dy = +1 everywhere: every tap reads one row below its regular
        // position. The oracle indexes the input directly at the integer
        // positions (zero outside) instead of sampling bilinearly.
        let mut rng = ChaCha8Rng::seed_from_u64(58);
        let gad = GadDownsampler::new(2, 2, &mut rng);
        let x = rand_map(&mut rng, &[1, 2, 6, 6]);
        let mut off = ArrayD::zeros(IxDyn(&[1, 18, 3, 3]));
        for n in 0..9 {
            for oy in 0..3 {
                for ox in 0..3 {
                    off[[0, 2 * n, oy, ox]] = 1.0;
                }
            }
        }
        let unit_mod = Tensor::constant(ArrayD::ones(IxDyn(&[1, 9, 3, 3])));
        let out =
            deform_conv(&x, &Tensor::constant(off), &unit_mod, &gad.weight, &gad.bias, 2).unwrap();

        let xv = x.to_data();
        let wv = gad.weight.to_data();
        let bv = gad.bias.to_data();
        let mut expect = ArrayD::zeros(IxDyn(&[1, 2, 3, 3]));
        for co in 0..2 {
            for oy in 0..3usize {
                for ox in 0..3usize {
                    let mut acc = bv[[co]];
                    for ci in 0..2 {
                        for u in 0..3usize {
                            for v in 0..3usize {
                                let py = (oy * 2 + u) as isize; // -1 pad +1 offset
                                let px = (ox * 2 + v) as isize - 1;
                                if py < 0 || py >= 6 || px < 0 || px >= 6 {
                                    continue;
                                }
                                acc += wv[[co, ci, u, v]]
                                    * xv[[0, ci, py as usize, px as usize]];
                            }
                        }
                    }
                    expect[[0, co, oy, ox]] = acc;
                }
            }
        }
        assert!(max_abs_diff(&out.to_data(), &expect) < 1e-9);
    }

    #[test]
    fn gad_all_out_of_bounds_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(59);
        let gad = GadDownsampler::new(2, 2, &mut rng);
        gad.bias.update_value(|b| b.fill(0.0));
        let x = rand_map(&mut rng, &[1, 2, 4, 4]);
        let off = Tensor::constant(ArrayD::from_elem(IxDyn(&[1, 18, 2, 2]), 1000.0));
        let unit_mod = Tensor::constant(ArrayD::ones(IxDyn(&[1, 9, 2, 2])));
        let out = deform_conv(&x, &off, &unit_mod, &gad.weight, &gad.bias, 2).unwrap();
        assert!(out.value().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gad_rejects_non_finite_offsets() {
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let gad = GadDownsampler::new(2, 2, &mut rng);
        let x = rand_map(&mut rng, &[1, 2, 4, 4]);
        let off = Tensor::constant(ArrayD::from_elem(IxDyn(&[1, 18, 2, 2]), f64::NAN));
        let unit_mod = Tensor::constant(ArrayD::ones(IxDyn(&[1, 9, 2, 2])));
        assert!(deform_conv(&x, &off, &unit_mod, &gad.weight, &gad.bias, 2).is_err());
    }

    #[test]
    fn gad_output_size_is_ceil_of_input_over_stride() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let gad = GadDownsampler::new(2, 2, &mut rng);
        for (h, w) in [(6, 6), (5, 7), (4, 4)] {
            let x = rand_map(&mut rng, &[1, 2, h, w]);
            let out = gad.forward(&x).unwrap();
            assert_eq!(out.shape()[2], h.div_ceil(2));
            assert_eq!(out.shape()[3], w.div_ceil(2));
        }
    }

    #[test]
    fn gad_gradients_input_offsets_modulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let x = Tensor::new(rand_map(&mut rng, &[1, 2, 6, 6]).to_data(), true);
        // Fractional offsets keep the bilinear surface smooth at the check point.
        let off_data: Vec<f64> = (0..18 * 9).map(|_| rng.gen_range(-0.8..0.8)).collect();
        let off = Tensor::new(
            Array::from_shape_vec(IxDyn(&[1, 18, 3, 3]), off_data).unwrap(),
            true,
        );
        let mod_logits = Tensor::new(rand_map(&mut rng, &[1, 9, 3, 3]).to_data(), true);
        let weight = Tensor::new(rand_map(&mut rng, &[2, 2, 3, 3]).to_data(), true);
        let bias = Tensor::new(rand_map(&mut rng, &[2]).to_data(), true);
        let report = grad_check(
            |ins| {
                deform_conv(&ins[0], &ins[1], &ins[2].sigmoid(), &ins[3], &ins[4], 2)
                    .unwrap()
                    .square()
                    .sum_all()
            },
            &[x, off, mod_logits, weight, bias],
            1e-5,
            1e-3,
        );
        report.assert_pass();
    }

    #[test]
    fn awf_single_weight_passes_deep_scaled() {
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        let awf = AdaptiveWeightedFuser::new();
        awf.raw_weights.update_value(|w| {
            w[[0]] = 1.0;
            w[[1]] = 0.0;
            w[[2]] = 0.0;
        });
        let deep = rand_map(&mut rng, &[1, 2, 3, 3]);
        let mid = rand_map(&mut rng, &[1, 2, 3, 3]);
        let shallow = rand_map(&mut rng, &[1, 2, 3, 3]);
        let out = awf.forward([Some(&deep), Some(&mid), Some(&shallow)]).unwrap();
        let expect = deep.scale(1.0 / (1.0 + awf.eps));
        assert!(max_abs_diff(&out.to_data(), &expect.to_data()) < 1e-12);
    }

    #[test]
    fn awf_equal_inputs_scale_by_weight_ratio() {
        let awf = AdaptiveWeightedFuser::new();
        let f = Tensor::constant(ArrayD::from_elem(IxDyn(&[1, 1, 2, 2]), 1.7));
        let out = awf.forward([Some(&f), Some(&f), Some(&f)]).unwrap();
        let expect = 1.7 * 3.0 / (3.0 + awf.eps);
        for v in out.value().iter() {
            assert!((v - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn awf_weighted_constants_match_scalar_oracle() {
        // w = (1,2,3), constant maps (1,2,3), eps = 1e-4:
        // (1*1 + 2*2 + 3*3) / (6 + 1e-4) = 14 / 6.0001 = 2.33329...
        let awf = AdaptiveWeightedFuser::new();
        awf.raw_weights.update_value(|w| {
            w[[0]] = 1.0;
            w[[1]] = 2.0;
            w[[2]] = 3.0;
        });
        let a = Tensor::constant(ArrayD::from_elem(IxDyn(&[1, 1, 2, 2]), 1.0));
        let b = Tensor::constant(ArrayD::from_elem(IxDyn(&[1, 1, 2, 2]), 2.0));
        let c = Tensor::constant(ArrayD::from_elem(IxDyn(&[1, 1, 2, 2]), 3.0));
        let out = awf.forward([Some(&a), Some(&b), Some(&c)]).unwrap();
        let expect = 14.0 / 6.0001;
        for v in out.value().iter() {
            assert!((v - expect).abs() < 1e-12);
            assert!((v - 2.33329).abs() < 1e-4);
        }
    }

    #[test]
    fn awf_negative_raw_weights_are_clamped() {
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        let awf = AdaptiveWeightedFuser::new();
        awf.raw_weights.update_value(|w| {
            w[[0]] = -5.0;
            w[[1]] = 1.0;
            w[[2]] = -2.0;
        });
        let deep = rand_map(&mut rng, &[1, 1, 2, 2]);
        let mid = rand_map(&mut rng, &[1, 1, 2, 2]);
        let shallow = rand_map(&mut rng, &[1, 1, 2, 2]);
        let out = awf.forward([Some(&deep), Some(&mid), Some(&shallow)]).unwrap();
        let expect = mid.scale(1.0 / (1.0 + awf.eps));
        assert!(max_abs_diff(&out.to_data(), &expect.to_data()) < 1e-12);
    }

    #[test]
    fn awf_rejects_shape_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(65);
        let awf = AdaptiveWeightedFuser::new();
        let a = rand_map(&mut rng, &[1, 1, 2, 2]);
        let b = rand_map(&mut rng, &[1, 1, 3, 3]);
        assert!(awf.forward([Some(&a), Some(&b), None]).is_err());
    }

    #[test]
    fn awf_gradient_in_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(66);
        let awf = AdaptiveWeightedFuser::new();
        let deep = rand_map(&mut rng, &[1, 2, 6, 6]);
        let mid = rand_map(&mut rng, &[1, 2, 6, 6]);
        let shallow = rand_map(&mut rng, &[1, 2, 6, 6]);
        let report = grad_check(
            |ins| {
                let f = AdaptiveWeightedFuser { raw_weights: ins[0].clone(), eps: 1e-4 };
                f.forward([Some(&deep), Some(&mid), Some(&shallow)])
                    .unwrap()
                    .square()
                    .sum_all()
            },
            &[awf.raw_weights.clone()],
            1e-5,
            1e-3,
        );
        report.assert_pass();
    }

    #[test]
    fn asfb_output_has_mid_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(67);
        let asfb = Asfb::new(4, true, true, NeckOptions::default(), &mut rng);
        let deep = rand_map(&mut rng, &[1, 4, 2, 2]);
        let mid = rand_map(&mut rng, &[1, 4, 4, 4]);
        let shallow = rand_map(&mut rng, &[1, 4, 8, 8]);
        let out = asfb.forward(Some(&deep), &mid, Some(&shallow)).unwrap();
        assert_eq!(out.shape(), mid.shape());
    }

    #[test]
    fn asfb_rejects_non_adjacent_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(68);
        let asfb = Asfb::new(4, true, true, NeckOptions::default(), &mut rng);
        let deep = rand_map(&mut rng, &[1, 4, 1, 1]); // not mid/2
        let mid = rand_map(&mut rng, &[1, 4, 4, 4]);
        let shallow = rand_map(&mut rng, &[1, 4, 8, 8]);
        assert!(asfb.forward(Some(&deep), &mid, Some(&shallow)).is_err());
    }

    #[test]
    fn asfb_mid_only_weight_reduces_to_post_conv() {
        // w = (0,1,0): output = Conv(F_mid / (1 + eps)).
        let mut rng = ChaCha8Rng::seed_from_u64(69);
        let asfb = Asfb::new(4, true, true, NeckOptions::default(), &mut rng);
        let awf = asfb.awf.as_ref().unwrap();
        awf.raw_weights.update_value(|w| {
            w[[0]] = 0.0;
            w[[1]] = 1.0;
            w[[2]] = 0.0;
        });
        let deep = rand_map(&mut rng, &[1, 4, 2, 2]);
        let mid = rand_map(&mut rng, &[1, 4, 4, 4]);
        let shallow = rand_map(&mut rng, &[1, 4, 8, 8]);
        let out = asfb.forward(Some(&deep), &mid, Some(&shallow)).unwrap();
        let expect = asfb.post.forward(&mid.scale(1.0 / (1.0 + awf.eps)));
        assert!(max_abs_diff(&out.to_data(), &expect.to_data()) < 1e-12);
    }

    #[test]
    fn asfb_gradient_reaches_all_three_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let asfb = Asfb::new(4, true, true, NeckOptions::default(), &mut rng);
        let deep = Tensor::new(rand_map(&mut rng, &[1, 4, 2, 2]).to_data(), true);
        let mid = Tensor::new(rand_map(&mut rng, &[1, 4, 4, 4]).to_data(), true);
        let shallow = Tensor::new(rand_map(&mut rng, &[1, 4, 8, 8]).to_data(), true);
        let loss = asfb
            .forward(Some(&deep), &mid, Some(&shallow))
            .unwrap()
            .square()
            .sum_all();
        loss.backward();
        for t in [&deep, &mid, &shallow] {
            let g = t.grad().expect("gradient present");
            assert!(g.iter().any(|v| v.abs() > 1e-9));
        }
    }

    fn random_pyramid(rng: &mut ChaCha8Rng, b: usize, c: usize, base: usize) -> FeaturePyramid {
        let maps = (0..4)
            .map(|i| rand_map(rng, &[b, c, base >> i, base >> i]))
            .collect();
        FeaturePyramid::new(maps).unwrap()
    }

    #[test]
    fn hfan_preserves_shapes_across_levels() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let neck = Hfan::new(4, NeckOptions::default(), &mut rng);
        let pyr = random_pyramid(&mut rng, 2, 4, 16);
        let out = neck.forward(&pyr).unwrap();
        for l in PYRAMID_LEVELS {
            assert_eq!(out.level(l).shape(), pyr.level(l).shape());
        }
    }

    #[test]
    fn hfan_single_pass_mode_produces_valid_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(72);
        let opts = NeckOptions { bidirectional: false, ..Default::default() };
        let neck = Hfan::new(4, opts, &mut rng);
        let pyr = random_pyramid(&mut rng, 1, 4, 16);
        let out = neck.forward(&pyr).unwrap();
        for l in PYRAMID_LEVELS {
            assert_eq!(out.level(l).shape(), pyr.level(l).shape());
        }
    }

    #[test]
    fn hfan_component_ablations_run() {
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        for opts in [
            NeckOptions { use_cru: false, ..Default::default() },
            NeckOptions { use_gad: false, ..Default::default() },
            NeckOptions { use_awf: false, ..Default::default() },
        ] {
            let neck = Hfan::new(4, opts, &mut rng);
            let pyr = random_pyramid(&mut rng, 1, 4, 16);
            let out = neck.forward(&pyr).unwrap();
            for l in PYRAMID_LEVELS {
                assert_eq!(out.level(l).shape(), pyr.level(l).shape());
            }
        }
    }

    #[test]
    fn hfan_perturbation_at_p5_reaches_p2() {
        let mut rng = ChaCha8Rng::seed_from_u64(74);
        let neck = Hfan::new(4, NeckOptions::default(), &mut rng);
        let pyr = random_pyramid(&mut rng, 1, 4, 16);
        let base = neck.forward(&pyr).unwrap();

        let mut bumped5 = pyr.level(5).to_data();
        bumped5[[0, 0, 0, 0]] += 0.5;
        let maps = vec![
            pyr.level(2).clone(),
            pyr.level(3).clone(),
            pyr.level(4).clone(),
            Tensor::constant(bumped5),
        ];
        let out = neck.forward(&FeaturePyramid::new(maps).unwrap()).unwrap();
        let diff = max_abs_diff(&out.level(2).to_data(), &base.level(2).to_data());
        assert!(diff > 1e-9, "P5 perturbation did not reach P'_2 (diff {diff})");
    }

    #[test]
    fn pyramid_rejects_missing_or_misscaled_levels() {
        let mut rng = ChaCha8Rng::seed_from_u64(75);
        let maps3 = (0..3).map(|i| rand_map(&mut rng, &[1, 4, 16 >> i, 16 >> i])).collect();
        assert!(FeaturePyramid::new(maps3).is_err());
        let bad = vec![
            rand_map(&mut rng, &[1, 4, 16, 16]),
            rand_map(&mut rng, &[1, 4, 8, 8]),
            rand_map(&mut rng, &[1, 4, 5, 5]),
            rand_map(&mut rng, &[1, 4, 2, 2]),
        ];
        assert!(FeaturePyramid::new(bad).is_err());
    }
}
