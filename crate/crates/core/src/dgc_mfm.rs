//! Dual-gated complementary Mamba fusion: illumination gate, difference
//! gate, dual-gated fusion, bidirectional Mamba refinement, residual
//! integration, and the fusion-shuffle step.
//!
//! The pipeline per scale is
//!
//! ```text
//!   gates -> F_fused = (W_light . W_diff_rgb) . F_rgb + ((1-W_light) . W_diff_ir) . F_ir
//!         -> Mamba refinement -> 1x1 projection into (F'_rgb, F'_ir)
//!         -> residual add per stream -> group conv + channel shuffle -> sum
//! ```

use ndarray::{ArrayD, IxDyn};
use rand::Rng;

use crate::error::{FuseError, Result};
use crate::nn::{Collect, Conv2d, Linear, ParamMap};
use crate::ssm::{MambaBlock, TokenSequence};
use crate::tensor::conv::ConvSpec;
use crate::tensor::Tensor;

/// Static configuration for one fusion scale.
#[derive(Clone, Copy, Debug)]
pub struct FusionScaleConfig {
    /// Channel width C at this scale.
    pub channels: usize,
    /// Squeeze bottleneck of the difference-gate MLP.
    pub bottleneck: usize,
    /// Channel-shuffle group count; must divide `channels`.
    pub shuffle_groups: usize,
    /// Number of stacked Mamba blocks.
    pub mamba_depth: usize,
    /// State dimension of each scan direction.
    pub state_dim: usize,
    /// Bidirectional scans (false = forward only).
    pub bidirectional: bool,
    /// Learned gating (false = fixed 0.5 illumination weight, unit
    /// difference weights, i.e. plain averaging before refinement).
    pub gated: bool,
}

impl FusionScaleConfig {
    pub fn new(channels: usize) -> Self {
        FusionScaleConfig {
            channels,
            bottleneck: (channels / 4).max(4),
            shuffle_groups: if channels < 8 { 2 } else { 4 },
            mamba_depth: 1,
            state_dim: 8,
            bidirectional: true,
            gated: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bottleneck < 1 {
            return Err(FuseError::InvalidConfig("bottleneck must be >= 1".into()));
        }
        if self.channels % self.shuffle_groups != 0 {
            return Err(FuseError::InvalidConfig(format!(
                "shuffle groups {} must divide channels {}",
                self.shuffle_groups, self.channels
            )));
        }
        Ok(())
    }
}

/// Gate activations for one batch.
pub struct GateOutputs {
    /// Per-sample scalar in (0, 1), shaped (B, 1, 1, 1) for broadcasting.
    pub w_light: Tensor,
    /// Channel attention (B, C); rows sum to 1.
    pub a_diff: Tensor,
    /// Per-channel weights in (0, 1), shaped (B, C).
    pub w_diff_rgb: Tensor,
    pub w_diff_ir: Tensor,
}

/// Brightness comparison gate: `sigma(gamma * (L_rgb - L_ir))` with
/// `L_m = GAP(Conv(F_m))` through a single estimator shared by both
/// modalities.
pub struct IlluminationGate {
    pub brightness: Conv2d,
    pub gamma: Tensor,
}

impl IlluminationGate {
    pub fn new(channels: usize, rng: &mut impl Rng) -> Self {
        IlluminationGate {
            brightness: Conv2d::new(
                channels,
                1,
                3,
                ConvSpec { stride: 1, padding: 1, groups: 1 },
                rng,
            ),
            gamma: Tensor::new(ArrayD::ones(IxDyn(&[1])), true),
        }
    }

    /// Returns the per-sample illumination weight shaped (B, 1, 1, 1).
    pub fn forward(&self, f_rgb: &Tensor, f_ir: &Tensor) -> Result<Tensor> {
        if f_rgb.shape() != f_ir.shape() {
            return Err(FuseError::ShapeMismatch(format!(
                "illumination gate inputs differ: {:?} vs {:?}",
                f_rgb.shape(),
                f_ir.shape()
            )));
        }
        let b = f_rgb.shape()[0];
        let l_rgb = self.brightness.forward(f_rgb).global_avg_pool(); // (B, 1)
        let l_ir = self.brightness.forward(f_ir).global_avg_pool();
        let w = l_rgb.sub(&l_ir).mul(&self.gamma).sigmoid();
        Ok(w.reshape(&[b, 1, 1, 1]))
    }
}

impl Collect for IlluminationGate {
    fn collect(&self, prefix: &str, params: &mut ParamMap) {
        self.brightness.collect(&format!("{prefix}.brightness"), params);
        params.push(format!("{prefix}.gamma"), &self.gamma);
    }
}

/// Channel attention from the absolute feature difference, plus the two
/// sigmoid heads that turn it into per-modality channel weights.
pub struct DifferenceGate {
    pub squeeze: Linear,   // W1: C -> d, no bias
    pub excite: Linear,    // W2: d -> C, no bias
    pub head_rgb: Linear,  // C -> C
    pub head_ir: Linear,   // C -> C
}

impl DifferenceGate {
    pub fn new(channels: usize, bottleneck: usize, rng: &mut impl Rng) -> Self {
        DifferenceGate {
            squeeze: Linear::new_no_bias(channels, bottleneck, rng),
            excite: Linear::new_no_bias(bottleneck, channels, rng),
            head_rgb: Linear::new(channels, channels, rng),
            head_ir: Linear::new(channels, channels, rng),
        }
    }

    /// Returns `(a_diff, w_diff_rgb, w_diff_ir)`, each (B, C).
    pub fn forward(&self, f_rgb: &Tensor, f_ir: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        if f_rgb.shape() != f_ir.shape() {
            return Err(FuseError::ShapeMismatch(format!(
                "difference gate inputs differ: {:?} vs {:?}",
                f_rgb.shape(),
                f_ir.shape()
            )));
        }
        let c = f_rgb.shape()[1];
        if self.squeeze.weight.shape()[1] != c {
            return Err(FuseError::ShapeMismatch(format!(
                "difference gate built for {} channels, got {c}",
                self.squeeze.weight.shape()[1]
            )));
        }
        let diff = f_rgb.sub(f_ir).abs(); // F_diff
        let pooled = diff.global_avg_pool(); // (B, C)
        let a_diff = self
            .excite
            .forward(&self.squeeze.forward(&pooled).relu())
            .softmax(1);
        let w_rgb = self.head_rgb.forward(&a_diff).sigmoid();
        let w_ir = self.head_ir.forward(&a_diff).sigmoid();
        Ok((a_diff, w_rgb, w_ir))
    }
}

impl Collect for DifferenceGate {
    fn collect(&self, prefix: &str, params: &mut ParamMap) {
        self.squeeze.collect(&format!("{prefix}.squeeze"), params);
        self.excite.collect(&format!("{prefix}.excite"), params);
        self.head_rgb.collect(&format!("{prefix}.head_rgb"), params);
        self.head_ir.collect(&format!("{prefix}.head_ir"), params);
    }
}

/// Combines both modalities under the gates:
/// `(W_light . W_rgb) . F_rgb + ((1 - W_light) . W_ir) . F_ir`.
pub fn dual_gated_fuse(f_rgb: &Tensor, f_ir: &Tensor, gates: &GateOutputs) -> Result<Tensor> {
    if f_rgb.shape() != f_ir.shape() {
        return Err(FuseError::ShapeMismatch(format!(
            "fusion inputs differ: {:?} vs {:?}",
            f_rgb.shape(),
            f_ir.shape()
        )));
    }
    let shape = f_rgb.shape();
    let (b, c) = (shape[0], shape[1]);
    if gates.w_diff_rgb.shape() != [b, c] || gates.w_diff_ir.shape() != [b, c] {
        return Err(FuseError::ShapeMismatch(format!(
            "channel weights must be ({b}, {c}), got {:?} / {:?}",
            gates.w_diff_rgb.shape(),
            gates.w_diff_ir.shape()
        )));
    }
    let w_rgb = gates.w_diff_rgb.reshape(&[b, c, 1, 1]);
    let w_ir = gates.w_diff_ir.reshape(&[b, c, 1, 1]);
    let one_minus = gates.w_light.neg().add_scalar(1.0);
    let rgb_term = gates.w_light.mul(&w_rgb).mul(f_rgb);
    let ir_term = one_minus.mul(&w_ir).mul(f_ir);
    Ok(rgb_term.add(&ir_term))
}

/// Residual integration `F_out = F + F'` for one stream.
pub fn residual_integrate(f: &Tensor, refined: &Tensor) -> Result<Tensor> {
    if f.shape() != refined.shape() {
        return Err(FuseError::ShapeMismatch(format!(
            "residual shapes differ: {:?} vs {:?}",
            f.shape(),
            refined.shape()
        )));
    }
    Ok(f.add(refined))
}

/// The interleaving permutation of channel shuffle with `groups` groups.
pub fn shuffle_permutation(channels: usize, groups: usize) -> Vec<usize> {
    let per = channels / groups;
    (0..channels).map(|j| (j % groups) * per + j / groups).collect()
}

/// Per-stream group convolution, channel shuffle, then elementwise sum of
/// the two streams.
pub struct FusionShuffle {
    pub conv_rgb: Conv2d,
    pub conv_ir: Conv2d,
    pub groups: usize,
}

impl FusionShuffle {
    pub fn new(channels: usize, groups: usize, rng: &mut impl Rng) -> Result<Self> {
        if channels % groups != 0 {
            return Err(FuseError::InvalidConfig(format!(
                "shuffle groups {groups} must divide channels {channels}"
            )));
        }
        let spec = ConvSpec { stride: 1, padding: 1, groups };
        Ok(FusionShuffle {
            conv_rgb: Conv2d::new(channels, channels, 3, spec, rng),
            conv_ir: Conv2d::new(channels, channels, 3, spec, rng),
            groups,
        })
    }

    pub fn forward(&self, f_rgb: &Tensor, f_ir: &Tensor) -> Result<Tensor> {
        if f_rgb.shape() != f_ir.shape() {
            return Err(FuseError::ShapeMismatch(format!(
                "fusion-shuffle inputs differ: {:?} vs {:?}",
                f_rgb.shape(),
                f_ir.shape()
            )));
        }
        let c = f_rgb.shape()[1];
        let perm = shuffle_permutation(c, self.groups);
        let rgb = self.conv_rgb.forward(f_rgb).index_select(1, &perm);
        let ir = self.conv_ir.forward(f_ir).index_select(1, &perm);
        Ok(rgb.add(&ir))
    }
}

impl Collect for FusionShuffle {
    fn collect(&self, prefix: &str, params: &mut ParamMap) {
        self.conv_rgb.collect(&format!("{prefix}.conv_rgb"), params);
        self.conv_ir.collect(&format!("{prefix}.conv_ir"), params);
    }
}

/// One fusion module instance, applied at a single pyramid scale.
pub struct DgcMfm {
    pub cfg: FusionScaleConfig,
    pub illumination: IlluminationGate,
    pub difference: DifferenceGate,
    pub mamba: Vec<MambaBlock>,
    pub proj: Conv2d, // 1x1, C -> 2C, split into the two refined maps
    pub shuffle: FusionShuffle,
}

impl DgcMfm {
    pub fn new(cfg: FusionScaleConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        Ok(DgcMfm {
            illumination: IlluminationGate::new(c, rng),
            difference: DifferenceGate::new(c, cfg.bottleneck, rng),
            mamba: (0..cfg.mamba_depth)
                .map(|_| MambaBlock::new(c, cfg.state_dim, cfg.bidirectional, rng))
                .collect(),
            proj: Conv2d::new(c, 2 * c, 1, ConvSpec::default(), rng),
            shuffle: FusionShuffle::new(c, cfg.shuffle_groups, rng)?,
            cfg,
        })
    }

    /// Runs both gates. In ungated mode the illumination weight is fixed at
    /// 0.5 and the channel weights at 1 (plain averaging).
    pub fn gates(&self, f_rgb: &Tensor, f_ir: &Tensor) -> Result<GateOutputs> {
        let shape = f_rgb.shape();
        let (b, c) = (shape[0], shape[1]);
        if self.cfg.gated {
            let w_light = self.illumination.forward(f_rgb, f_ir)?;
            let (a_diff, w_diff_rgb, w_diff_ir) = self.difference.forward(f_rgb, f_ir)?;
            Ok(GateOutputs { w_light, a_diff, w_diff_rgb, w_diff_ir })
        } else {
            Ok(GateOutputs {
                w_light: Tensor::constant(ArrayD::from_elem(IxDyn(&[b, 1, 1, 1]), 0.5)),
                a_diff: Tensor::constant(ArrayD::from_elem(IxDyn(&[b, c]), 1.0 / c as f64)),
                w_diff_rgb: Tensor::constant(ArrayD::ones(IxDyn(&[b, c]))),
                w_diff_ir: Tensor::constant(ArrayD::ones(IxDyn(&[b, c]))),
            })
        }
    }

    /// Mamba refinement: flatten, run the block stack, unflatten, project to
    /// 2C channels and split into the two refined maps.
    pub fn refine(&self, f_fused: &Tensor) -> Result<(Tensor, Tensor)> {
        let c = self.cfg.channels;
        let mut seq = TokenSequence::from_feature_map(f_fused)?;
        for block in &self.mamba {
            seq = block.forward(&seq)?;
        }
        let refined = self.proj.forward(&seq.to_feature_map());
        let f_rgb = refined.narrow(1, 0, c);
        let f_ir = refined.narrow(1, c, c);
        Ok((f_rgb, f_ir))
    }

    /// Full pipeline: gate, fuse, refine, residual-integrate, fusion-shuffle.
    pub fn forward(&self, f_rgb: &Tensor, f_ir: &Tensor) -> Result<Tensor> {
        let gates = self.gates(f_rgb, f_ir)?;
        let fused = dual_gated_fuse(f_rgb, f_ir, &gates)?;
        let (r_rgb, r_ir) = self.refine(&fused)?;
        let out_rgb = residual_integrate(f_rgb, &r_rgb)?;
        let out_ir = residual_integrate(f_ir, &r_ir)?;
        self.shuffle.forward(&out_rgb, &out_ir)
    }
}

impl Collect for DgcMfm {
    fn collect(&self, prefix: &str, params: &mut ParamMap) {
        if self.cfg.gated {
            self.illumination.collect(&format!("{prefix}.illumination"), params);
            self.difference.collect(&format!("{prefix}.difference"), params);
        }
        for (i, block) in self.mamba.iter().enumerate() {
            block.collect(&format!("{prefix}.mamba.{i}"), params);
        }
        self.proj.collect(&format!("{prefix}.proj"), params);
        self.shuffle.collect(&format!("{prefix}.shuffle"), params);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::grad_check;
    use ndarray::Array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_map(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(Array::from_shape_vec(IxDyn(shape), v).unwrap(), false)
    }

    fn const_map(shape: &[usize], v: f64) -> Tensor {
        Tensor::constant(ArrayD::from_elem(IxDyn(shape), v))
    }

    /// Brightness estimator that passes the input through: a center-tap
    /// delta kernel on single-channel maps, so L = GAP(F).
    fn identity_brightness(gate: &mut IlluminationGate) {
        gate.brightness.weight.update_value(|w| {
            w.fill(0.0);
            w[[0, 0, 1, 1]] = 1.0;
        });
        if let Some(b) = &gate.brightness.bias {
            b.update_value(|v| v.fill(0.0));
        }
    }

    #[test]
    fn illumination_gate_identical_inputs_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let gate = IlluminationGate::new(3, &mut rng);
        let f = rand_map(&mut rng, &[2, 3, 4, 4]);
        let w = gate.forward(&f, &f).unwrap();
        for v in w.value().iter() {
            assert_eq!(*v, 0.5);
        }
    }

    #[test]
    fn illumination_gate_zero_temperature_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let gate = IlluminationGate::new(2, &mut rng);
        gate.gamma.update_value(|g| g.fill(0.0));
        let a = rand_map(&mut rng, &[1, 2, 5, 5]);
        let b = rand_map(&mut rng, &[1, 2, 5, 5]);
        let w = gate.forward(&a, &b).unwrap();
        assert_eq!(w.value()[[0, 0, 0, 0]], 0.5);
    }

    #[test]
    fn illumination_gate_sigmoid_of_brightness_difference() {
        // L_rgb - L_ir = 0.6 with gamma = 1: sigma(0.6) = 0.6456563062...
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mut gate = IlluminationGate::new(1, &mut rng);
        identity_brightness(&mut gate);
        let rgb = const_map(&[1, 1, 4, 4], 0.8);
        let ir = const_map(&[1, 1, 4, 4], 0.2);
        let w = gate.forward(&rgb, &ir).unwrap();
        assert!((w.value()[[0, 0, 0, 0]] - 0.6456563062257955).abs() < 1e-12);
    }

    #[test]
    fn illumination_gate_monotone_in_brightness_gap() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut gate = IlluminationGate::new(1, &mut rng);
        identity_brightness(&mut gate);
        let mut last = -1.0;
        for step in 0..7 {
            let gap = -0.9 + 0.3 * step as f64;
            let rgb = const_map(&[1, 1, 4, 4], 0.5 + gap / 2.0);
            let ir = const_map(&[1, 1, 4, 4], 0.5 - gap / 2.0);
            let w = gate.forward(&rgb, &ir).unwrap().item();
            assert!(w > last, "w_light must increase with L_rgb - L_ir");
            assert!(w > 0.0 && w < 1.0);
            last = w;
        }
    }

    #[test]
    fn illumination_gate_rejects_shape_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let gate = IlluminationGate::new(2, &mut rng);
        let a = rand_map(&mut rng, &[1, 2, 4, 4]);
        let b = rand_map(&mut rng, &[1, 2, 5, 5]);
        assert!(gate.forward(&a, &b).is_err());
    }

    #[test]
    fn difference_gate_identical_inputs_uniform_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let gate = DifferenceGate::new(4, 4, &mut rng);
        let f = rand_map(&mut rng, &[2, 4, 3, 3]);
        let (a_diff, _, _) = gate.forward(&f, &f).unwrap();
        for v in a_diff.value().iter() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn difference_gate_hand_set_identity_projections() {
        // C = 2, identity squeeze/excite, GAP(F_diff) = (1, 0):
        // A_diff = softmax((1, 0)) = (e/(e+1), 1/(e+1)).
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let gate = DifferenceGate::new(2, 2, &mut rng);
        gate.squeeze.weight.update_value(|w| {
            w.fill(0.0);
            w[[0, 0]] = 1.0;
            w[[1, 1]] = 1.0;
        });
        gate.excite.weight.update_value(|w| {
            w.fill(0.0);
            w[[0, 0]] = 1.0;
            w[[1, 1]] = 1.0;
        });
        let rgb = crate::tensor::ops::concat(
            1,
            &[const_map(&[1, 1, 2, 2], 1.0), const_map(&[1, 1, 2, 2], 0.3)],
        );
        let ir = crate::tensor::ops::concat(
            1,
            &[const_map(&[1, 1, 2, 2], 0.0), const_map(&[1, 1, 2, 2], 0.3)],
        );
        let (a_diff, _, _) = gate.forward(&rgb, &ir).unwrap();
        let e = std::f64::consts::E;
        assert!((a_diff.value()[[0, 0]] - e / (e + 1.0)).abs() < 1e-10);
        assert!((a_diff.value()[[0, 1]] - 1.0 / (e + 1.0)).abs() < 1e-10);
        assert!((a_diff.value()[[0, 0]] - 0.73106).abs() < 1e-5);
        assert!((a_diff.value()[[0, 1]] - 0.26894).abs() < 1e-5);
    }

    #[test]
    fn difference_gate_attention_is_probability_vector() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let gate = DifferenceGate::new(6, 4, &mut rng);
        for _ in 0..10 {
            let a = rand_map(&mut rng, &[3, 6, 4, 4]);
            let b = rand_map(&mut rng, &[3, 6, 4, 4]);
            let (a_diff, w_rgb, w_ir) = gate.forward(&a, &b).unwrap();
            let v = a_diff.value();
            for bi in 0..3 {
                let sum: f64 = (0..6).map(|ci| v[[bi, ci]]).sum();
                assert!((sum - 1.0).abs() < 1e-6);
            }
            for w in w_rgb.value().iter().chain(w_ir.value().iter()) {
                assert!(*w > 0.0 && *w < 1.0);
            }
        }
    }

    #[test]
    fn difference_gate_rejects_channel_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let gate = DifferenceGate::new(4, 4, &mut rng);
        let a = rand_map(&mut rng, &[1, 6, 4, 4]);
        assert!(gate.forward(&a, &a).is_err());
    }

    fn manual_gates(b: usize, c: usize, w_light: f64, w_rgb: f64, w_ir: f64) -> GateOutputs {
        GateOutputs {
            w_light: const_map(&[b, 1, 1, 1], w_light),
            a_diff: const_map(&[b, c], 1.0 / c as f64),
            w_diff_rgb: const_map(&[b, c], w_rgb),
            w_diff_ir: const_map(&[b, c], w_ir),
        }
    }

    #[test]
    fn dual_gated_fuse_collapses_to_rgb() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let rgb = rand_map(&mut rng, &[2, 3, 4, 4]);
        let ir = rand_map(&mut rng, &[2, 3, 4, 4]);
        let out = dual_gated_fuse(&rgb, &ir, &manual_gates(2, 3, 1.0, 1.0, 1.0)).unwrap();
        assert_eq!(out.to_data(), rgb.to_data());
    }

    #[test]
    fn dual_gated_fuse_collapses_to_ir() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let rgb = rand_map(&mut rng, &[2, 3, 4, 4]);
        let ir = rand_map(&mut rng, &[2, 3, 4, 4]);
        let out = dual_gated_fuse(&rgb, &ir, &manual_gates(2, 3, 0.0, 1.0, 1.0)).unwrap();
        assert_eq!(out.to_data(), ir.to_data());
    }

    #[test]
    fn dual_gated_fuse_constant_maps() {
        // w_light = 0.5, unit channel weights, F_rgb = 2, F_ir = 4 -> 3.
        let rgb = const_map(&[1, 2, 3, 3], 2.0);
        let ir = const_map(&[1, 2, 3, 3], 4.0);
        let out = dual_gated_fuse(&rgb, &ir, &manual_gates(1, 2, 0.5, 1.0, 1.0)).unwrap();
        for v in out.value().iter() {
            assert!((v - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dual_gated_fuse_convex_combination_bound() {
        // With unit channel weights the fused map lies between the inputs.
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..10 {
            let w_light: f64 = rng.gen_range(0.001..0.999);
            let rgb = rand_map(&mut rng, &[1, 2, 4, 4]);
            let ir = rand_map(&mut rng, &[1, 2, 4, 4]);
            let out = dual_gated_fuse(&rgb, &ir, &manual_gates(1, 2, w_light, 1.0, 1.0)).unwrap();
            let (ov, rv, iv) = (out.value(), rgb.value(), ir.value());
            for ((o, r), i) in ov.iter().zip(rv.iter()).zip(iv.iter()) {
                assert!(*o >= r.min(*i) - 1e-12 && *o <= r.max(*i) + 1e-12);
            }
        }
    }

    #[test]
    fn dual_gated_fuse_rejects_bad_gate_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let rgb = rand_map(&mut rng, &[1, 3, 4, 4]);
        let ir = rand_map(&mut rng, &[1, 3, 4, 4]);
        let mut gates = manual_gates(1, 3, 0.5, 1.0, 1.0);
        gates.w_diff_rgb = const_map(&[1, 5], 1.0);
        assert!(dual_gated_fuse(&rgb, &ir, &gates).is_err());
    }

    #[test]
    fn residual_integrate_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let f = rand_map(&mut rng, &[1, 2, 3, 3]);
        let zero = const_map(&[1, 2, 3, 3], 0.0);
        assert_eq!(residual_integrate(&f, &zero).unwrap().to_data(), f.to_data());

        let ones = const_map(&[1, 2, 3, 3], 1.0);
        let twos = const_map(&[1, 2, 3, 3], 2.0);
        for v in residual_integrate(&ones, &twos).unwrap().value().iter() {
            assert_eq!(*v, 3.0);
        }

        let refined = rand_map(&mut rng, &[1, 2, 3, 3]);
        let out = residual_integrate(&f, &refined).unwrap();
        let diff = out.to_data() - f.to_data();
        assert_eq!(diff, refined.to_data());

        let bad = rand_map(&mut rng, &[1, 2, 4, 4]);
        assert!(residual_integrate(&f, &bad).is_err());
    }

    #[test]
    fn shuffle_permutation_matches_interleave_definition() {
        assert_eq!(shuffle_permutation(4, 1), vec![0, 1, 2, 3]);
        assert_eq!(shuffle_permutation(4, 2), vec![0, 2, 1, 3]);
        assert_eq!(shuffle_permutation(8, 4), vec![0, 2, 4, 6, 1, 3, 5, 7]);
    }

    #[test]
    fn shuffle_permutation_is_bijection() {
        for (c, g) in [(8, 2), (8, 4), (12, 3), (16, 4)] {
            let perm = shuffle_permutation(c, g);
            let mut seen = vec![false; c];
            for &p in &perm {
                assert!(!seen[p]);
                seen[p] = true;
            }
            // Applying the inverse permutation restores the identity.
            let mut inverse = vec![0usize; c];
            for (i, &p) in perm.iter().enumerate() {
                inverse[p] = i;
            }
            let restored: Vec<usize> = inverse.iter().map(|&i| perm[i]).collect();
            assert_eq!(restored, (0..c).collect::<Vec<_>>());
        }
    }

    /// Group conv weights that map every channel to itself (center tap 1).
    fn identity_group_conv(conv: &Conv2d) {
        conv.weight.update_value(|w| {
            w.fill(0.0);
            let c_out = w.shape()[0];
            let per = w.shape()[1]; // C_in / groups
            for o in 0..c_out {
                w[[o, o % per, 1, 1]] = 1.0;
            }
        });
        if let Some(b) = &conv.bias {
            b.update_value(|v| v.fill(0.0));
        }
    }

    #[test]
    fn fusion_shuffle_identity_conv_permutes_rgb() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let shuffle = FusionShuffle::new(4, 2, &mut rng).unwrap();
        identity_group_conv(&shuffle.conv_rgb);
        identity_group_conv(&shuffle.conv_ir);
        let rgb = rand_map(&mut rng, &[1, 4, 3, 3]);
        let ir = const_map(&[1, 4, 3, 3], 0.0);
        let out = shuffle.forward(&rgb, &ir).unwrap();
        // Direct permutation oracle: output channel j = input channel perm[j].
        let perm = shuffle_permutation(4, 2);
        let (ov, rv) = (out.value(), rgb.value());
        for j in 0..4 {
            for y in 0..3 {
                for x in 0..3 {
                    assert!((ov[[0, j, y, x]] - rv[[0, perm[j], y, x]]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn fusion_shuffle_rejects_non_dividing_groups() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        assert!(FusionShuffle::new(6, 4, &mut rng).is_err());
    }

    #[test]
    fn refine_zero_projection_gives_zero_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let module = DgcMfm::new(FusionScaleConfig::new(4), &mut rng).unwrap();
        module.proj.weight.update_value(|w| w.fill(0.0));
        if let Some(b) = &module.proj.bias {
            b.update_value(|v| v.fill(0.0));
        }
        let fused = rand_map(&mut rng, &[1, 4, 3, 3]);
        let (r_rgb, r_ir) = module.refine(&fused).unwrap();
        assert!(r_rgb.value().iter().all(|v| *v == 0.0));
        assert!(r_ir.value().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn refine_single_pixel_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let module = DgcMfm::new(FusionScaleConfig::new(4), &mut rng).unwrap();
        let fused = rand_map(&mut rng, &[2, 4, 1, 1]);
        let (r_rgb, r_ir) = module.refine(&fused).unwrap();
        assert_eq!(r_rgb.shape(), vec![2, 4, 1, 1]);
        assert_eq!(r_ir.shape(), vec![2, 4, 1, 1]);
        assert!(r_rgb.value().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn refine_shape_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(38);
        let module = DgcMfm::new(FusionScaleConfig::new(4), &mut rng).unwrap();
        let fused = rand_map(&mut rng, &[2, 4, 4, 4]);
        let (r_rgb, r_ir) = module.refine(&fused).unwrap();
        assert_eq!(r_rgb.shape(), vec![2, 4, 4, 4]);
        assert_eq!(r_ir.shape(), vec![2, 4, 4, 4]);
    }

    #[test]
    fn forward_preserves_shape_across_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(39);
        for (c, hw) in [(4, 8), (8, 4), (16, 2)] {
            let module = DgcMfm::new(FusionScaleConfig::new(c), &mut rng).unwrap();
            let rgb = rand_map(&mut rng, &[2, c, hw, hw]);
            let ir = rand_map(&mut rng, &[2, c, hw, hw]);
            let out = module.forward(&rgb, &ir).unwrap();
            assert_eq!(out.shape(), vec![2, c, hw, hw]);
        }
    }

    #[test]
    fn forward_composed_degenerate_path() {
        // Zero refinement + identity shuffle convs: the pipeline reduces to
        // shuffle(F_rgb) + shuffle(F_ir).
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let module = DgcMfm::new(FusionScaleConfig::new(4), &mut rng).unwrap();
        module.proj.weight.update_value(|w| w.fill(0.0));
        if let Some(b) = &module.proj.bias {
            b.update_value(|v| v.fill(0.0));
        }
        identity_group_conv(&module.shuffle.conv_rgb);
        identity_group_conv(&module.shuffle.conv_ir);
        let rgb = rand_map(&mut rng, &[1, 4, 3, 3]);
        let ir = rand_map(&mut rng, &[1, 4, 3, 3]);
        let out = module.forward(&rgb, &ir).unwrap();
        let perm = shuffle_permutation(4, module.cfg.shuffle_groups);
        let expect = rgb.index_select(1, &perm).add(&ir.index_select(1, &perm));
        let diff: f64 = (out.to_data() - expect.to_data())
            .iter()
            .map(|v| v.abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-12, "max abs diff {diff}");
    }

    #[test]
    fn forward_gradients_reach_both_modalities() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let mut cfg = FusionScaleConfig::new(4);
        cfg.state_dim = 2;
        let module = DgcMfm::new(cfg, &mut rng).unwrap();
        let rgb = Tensor::new(rand_map(&mut rng, &[1, 4, 3, 3]).to_data(), true);
        let ir = Tensor::new(rand_map(&mut rng, &[1, 4, 3, 3]).to_data(), true);
        let loss = module.forward(&rgb, &ir).unwrap().square().sum_all();
        loss.backward();
        let g_rgb = rgb.grad().unwrap();
        let g_ir = ir.grad().unwrap();
        assert!(g_rgb.iter().any(|v| v.abs() > 1e-9));
        assert!(g_ir.iter().any(|v| v.abs() > 1e-9));
    }

    #[test]
    fn forward_end_to_end_gradient_check() {
        // 2x8x4x4 instance, inputs checked against central differences.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut cfg = FusionScaleConfig::new(8);
        cfg.state_dim = 2;
        let module = DgcMfm::new(cfg, &mut rng).unwrap();
        let rgb = Tensor::new(rand_map(&mut rng, &[2, 8, 4, 4]).to_data(), true);
        let ir = Tensor::new(rand_map(&mut rng, &[2, 8, 4, 4]).to_data(), true);
        let report = grad_check(
            |ins| module.forward(&ins[0], &ins[1]).unwrap().square().sum_all(),
            &[rgb, ir],
            1e-4,
            1e-3,
        );
        report.assert_pass();
    }
}
