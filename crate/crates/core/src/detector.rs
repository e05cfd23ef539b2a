//! End-to-end toy detectors: dual-stream backbone with per-scale fusion,
//! neck (plain FPN baseline or the HFAN), four decoupled anchor-free heads,
//! the training loss and the decode + NMS path.

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::{BBox, Detection, GroundTruthBox};
use crate::dgc_mfm::{DgcMfm, FusionScaleConfig};
use crate::error::{FuseError, Result};
use crate::eval::iou;
use crate::hfan::{FeaturePyramid, Hfan, NeckOptions, PYRAMID_LEVELS};
use crate::nn::{Collect, Conv2d, ConvNorm, ParamMap};
use crate::tensor::conv::{upsample_nearest, ConvSpec};
use crate::tensor::ops::sigmoid_scalar;
use crate::tensor::{no_grad, Tensor};

/// Backbone fusion strategy (the Table-style ablation axis).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Dual gates + bidirectional Mamba refinement (the full fusion module).
    Full,
    /// Channel concatenation + 1x1 projection.
    ConcatFusion,
    /// Ungated averaging + unidirectional Mamba refinement.
    UniMamba,
    /// Ungated averaging + bidirectional Mamba refinement.
    BiMamba,
    /// One stream only; the second modality is ignored.
    SingleStream,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Variant> {
        match s {
            "full" | "dgc-gate" => Ok(Variant::Full),
            "concat-fusion" | "concat" => Ok(Variant::ConcatFusion),
            "uni-mamba" => Ok(Variant::UniMamba),
            "bi-mamba" => Ok(Variant::BiMamba),
            "single-stream" => Ok(Variant::SingleStream),
            other => Err(FuseError::InvalidConfig(format!("unknown variant '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::ConcatFusion => "concat-fusion",
            Variant::UniMamba => "uni-mamba",
            Variant::BiMamba => "bi-mamba",
            Variant::SingleStream => "single-stream",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NeckKind {
    Fpn,
    Hfan,
}

impl NeckKind {
    pub fn parse(s: &str) -> Result<NeckKind> {
        match s {
            "fpn" => Ok(NeckKind::Fpn),
            "hfan" => Ok(NeckKind::Hfan),
            other => Err(FuseError::InvalidConfig(format!("unknown neck '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            NeckKind::Fpn => "fpn",
            NeckKind::Hfan => "hfan",
        }
    }
}

/// Static model configuration.
#[derive(Clone, Copy, Debug)]
pub struct ModelConfig {
    pub variant: Variant,
    pub neck: NeckKind,
    pub class_count: usize,
    pub input_size: usize,
    /// Channel widths at pyramid levels 2..=5.
    pub scale_channels: [usize; 4],
    /// Uniform channel width inside the neck and heads.
    pub neck_width: usize,
    pub state_dim: usize,
    pub mamba_depth: usize,
    /// Component toggles for the HFAN (ignored by the FPN baseline).
    pub neck_options: NeckOptions,
    /// Highest-resolution detection head; disabling it drops level 2.
    pub use_p2_head: bool,
}

impl ModelConfig {
    pub fn new(variant: Variant, neck: NeckKind, class_count: usize, input_size: usize) -> Self {
        ModelConfig {
            variant,
            neck,
            class_count,
            input_size,
            scale_channels: [16, 32, 64, 128],
            neck_width: 32,
            state_dim: 8,
            mamba_depth: 1,
            neck_options: NeckOptions::default(),
            use_p2_head: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size % 32 != 0 || self.input_size == 0 {
            return Err(FuseError::InvalidConfig(format!(
                "input size {} must be a positive multiple of 32",
                self.input_size
            )));
        }
        if self.class_count == 0 {
            return Err(FuseError::InvalidConfig("class count must be positive".into()));
        }
        Ok(())
    }

    pub fn head_levels(&self) -> Vec<usize> {
        if self.use_p2_head {
            PYRAMID_LEVELS.to_vec()
        } else {
            vec![3, 4, 5]
        }
    }
}

/// One convolutional stage: 3x3 stride-2 conv + group norm + ReLU.
struct Stage {
    conv: ConvNorm,
}

impl Stage {
    fn new(c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        Stage {
            conv: ConvNorm::new(c_in, c_out, 3, ConvSpec { stride: 2, padding: 1, groups: 1 }, rng),
        }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        self.conv.forward(x).relu()
    }
}

impl Collect for Stage {
    fn collect(&self, prefix: &str, params: &mut ParamMap) {
        self.conv.collect(prefix, params);
    }
}

/// Five stride-2 stages: a stem then one stage per pyramid level.
struct Stream {
    stem: Stage,
    stages: Vec<Stage>,
}

impl Stream {
    fn new(scale_channels: &[usize; 4], rng: &mut impl Rng) -> Self {
        let stem_out = scale_channels[0] / 2;
        let stem = Stage::new(3, stem_out, rng);
        let mut stages = Vec::new();
        let mut c_in = stem_out;
        for &c_out in scale_channels {
            stages.push(Stage::new(c_in, c_out, rng));
            c_in = c_out;
        }
        Stream { stem, stages }
    }

    /// Per-level feature maps C2..C5.
    fn forward(&self, image: &Tensor) -> Vec<Tensor> {
        let mut x = self.stem.forward(image);
        let mut out = Vec::with_capacity(4);
        for stage in &self.stages {
            x = stage.forward(&x);
            out.push(x.clone());
        }
        out
    }
}

impl Collect for Stream {
    fn collect(&self, prefix: &str, params: &mut ParamMap) {
        self.stem.collect(&format!("{prefix}.stem"), params);
        for (i, s) in self.stages.iter().enumerate() {
            s.collect(&format!("{prefix}.stage{}", PYRAMID_LEVELS[i]), params);
        }
    }
}

enum FusionStage {
    Dgc(Box<DgcMfm>),
    Concat(Conv2d),
}

/// Dual-stream (or single-stream) backbone producing the fused pyramid.
pub struct Backbone {
    rgv: Stream,
    ir: Option<Stream>,
    fusion: Vec<FusionStage>,
}

impl Backbone {
    fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let rgv = Stream::new(&cfg.scale_channels, rng);
        if cfg.variant == Variant::SingleStream {
            return Ok(Backbone { rgv, ir: None, fusion: Vec::new() });
        }
        let ir = Stream::new(&cfg.scale_channels, rng);
        let mut fusion = Vec::new();
        for &c in &cfg.scale_channels {
            fusion.push(match cfg.variant {
                Variant::ConcatFusion => {
                    FusionStage::Concat(Conv2d::new(2 * c, c, 1, ConvSpec::default(), rng))
                }
                Variant::Full | Variant::UniMamba | Variant::BiMamba => {
                    let mut fc = FusionScaleConfig::new(c);
                    fc.state_dim = cfg.state_dim;
                    fc.mamba_depth = cfg.mamba_depth;
                    fc.gated = cfg.variant == Variant::Full;
                    fc.bidirectional = cfg.variant != Variant::UniMamba;
                    FusionStage::Dgc(Box::new(DgcMfm::new(fc, rng)?))
                }
                Variant::SingleStream => unreachable!(),
            });
        }
        Ok(Backbone { rgv, ir: Some(ir), fusion })
    }

    /// Produces the fused pyramid P2..P5 at the backbone channel widths.
    pub fn forward(&self, rgb: &Tensor, ir: &Tensor) -> Result<FeaturePyramid> {
        let rs = rgb.shape();
        if rs.len() != 4 || rs[1] != 3 {
            return Err(FuseError::ShapeMismatch(format!(
                "rgb batch must be (B, 3, H, W), got {rs:?}"
            )));
        }
        let rgb_maps = self.rgv.forward(rgb);
        let Some(ir_stream) = &self.ir else {
            return FeaturePyramid::new(rgb_maps);
        };
        if ir.shape() != rs {
            return Err(FuseError::ShapeMismatch(format!(
                "modalities must be registered to the same size: {:?} vs {rs:?}",
                ir.shape()
            )));
        }
        let ir_maps = ir_stream.forward(ir);
        let mut fused = Vec::with_capacity(4);
        for (i, (fr, fi)) in rgb_maps.iter().zip(&ir_maps).enumerate() {
            fused.push(match &self.fusion[i] {
                FusionStage::Dgc(m) => m.forward(fr, fi)?,
                FusionStage::Concat(proj) => proj.forward(&crate::tensor::ops::concat(1, &[fr.clone(), fi.clone()])),
            });
        }
        FeaturePyramid::new(fused)
    }
}

impl Collect for Backbone {
    fn collect(&self, prefix: &str, params: &mut ParamMap) {
        self.rgv.collect(&format!("{prefix}.rgb"), params);
        if let Some(ir) = &self.ir {
            ir.collect(&format!("{prefix}.ir"), params);
        }
        for (i, f) in self.fusion.iter().enumerate() {
            let name = format!("{prefix}.fuse{}", PYRAMID_LEVELS[i]);
            match f {
                FusionStage::Dgc(m) => m.collect(&name, params),
                FusionStage::Concat(c) => c.collect(&name, params),
            }
        }
    }
}

/// Baseline neck: top-down nearest-upsample + add + 3x3 smoothing, then
/// bottom-up stride-2 conv + add.
pub struct FpnNeck {
    smooth: Vec<ConvNorm>, // levels 2..=4
    down: Vec<ConvNorm>,   // levels 3..=5
}

impl FpnNeck {
    pub fn new(width: usize, rng: &mut impl Rng) -> Self {
        FpnNeck {
            smooth: (0..3)
                .map(|_| ConvNorm::new(width, width, 3, ConvSpec { stride: 1, padding: 1, groups: 1 }, rng))
                .collect(),
            down: (0..3)
                .map(|_| ConvNorm::new(width, width, 3, ConvSpec { stride: 2, padding: 1, groups: 1 }, rng))
                .collect(),
        }
    }

    pub fn forward(&self, pyramid: &FeaturePyramid) -> Result<FeaturePyramid> {
        // Top-down.
        let mut td: Vec<Tensor> = vec![pyramid.level(5).clone()];
        for l in [4usize, 3, 2] {
            let up = upsample_nearest(td.last().expect("seeded"), 2);
            let merged = pyramid.level(l).add(&up);
            td.push(self.smooth[l - 2].forward(&merged));
        }
        td.reverse(); // now levels 2..=5
        // Bottom-up.
        let mut bu: Vec<Tensor> = vec![td[0].clone()];
        for l in [3usize, 4, 5] {
            let down = self.down[l - 3].forward(bu.last().expect("seeded"));
            bu.push(td[l - 2].add(&down));
        }
        FeaturePyramid::new(bu)
    }
}

impl Collect for FpnNeck {
    fn collect(&self, prefix: &str, params: &mut ParamMap) {
        for (i, c) in self.smooth.iter().enumerate() {
            c.collect(&format!("{prefix}.smooth{}", i + 2), params);
        }
        for (i, c) in self.down.iter().enumerate() {
            c.collect(&format!("{prefix}.down{}", i + 3), params);
        }
    }
}

pub enum Neck {
    Fpn(FpnNeck),
    Hfan(Box<Hfan>),
}

impl Neck {
    pub fn forward(&self, pyramid: &FeaturePyramid) -> Result<FeaturePyramid> {
        match self {
            Neck::Fpn(n) => n.forward(pyramid),
            Neck::Hfan(n) => n.forward(pyramid),
        }
    }
}

/// Decoupled anchor-free head for one pyramid level.
pub struct Head {
    cls_stack: ConvNorm,
    cls_out: Conv2d,
    box_stack: ConvNorm,
    box_out: Conv2d,
}

impl Head {
    fn new(width: usize, classes: usize, rng: &mut impl Rng) -> Self {
        let mid = (width / 2).max(8);
        let spec3 = ConvSpec { stride: 1, padding: 1, groups: 1 };
        Head {
            cls_stack: ConvNorm::new(width, mid, 3, spec3, rng),
            cls_out: Conv2d::new(mid, classes, 1, ConvSpec::default(), rng),
            box_stack: ConvNorm::new(width, mid, 3, spec3, rng),
            box_out: Conv2d::new(mid, 4, 1, ConvSpec::default(), rng),
        }
    }

    fn forward(&self, x: &Tensor) -> LevelPrediction {
        LevelPrediction {
            cls_logits: self.cls_out.forward(&self.cls_stack.forward(x).relu()),
            box_raw: self.box_out.forward(&self.box_stack.forward(x).relu()),
        }
    }
}

impl Collect for Head {
    fn collect(&self, prefix: &str, params: &mut ParamMap) {
        self.cls_stack.collect(&format!("{prefix}.cls_stack"), params);
        self.cls_out.collect(&format!("{prefix}.cls_out"), params);
        self.box_stack.collect(&format!("{prefix}.box_stack"), params);
        self.box_out.collect(&format!("{prefix}.box_out"), params);
    }
}

/// Per-level predictions: class logits (B, K, H, W) and raw box regressions
/// (B, 4, H, W); softplus of the raw values gives the side distances in
/// cell units (left, top, right, bottom).
pub struct LevelPrediction {
    pub cls_logits: Tensor,
    pub box_raw: Tensor,
}

pub struct HeadOutput {
    /// (pyramid level, prediction) in ascending level order.
    pub levels: Vec<(usize, LevelPrediction)>,
}

/// The assembled detector.
pub struct Model {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    laterals: Vec<ConvNorm>,
    neck: Neck,
    heads: Vec<Head>,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::new(&cfg, &mut rng)?;
        let laterals = cfg
            .scale_channels
            .iter()
            .map(|&c| ConvNorm::new(c, cfg.neck_width, 1, ConvSpec::default(), &mut rng))
            .collect();
        let neck = match cfg.neck {
            NeckKind::Fpn => Neck::Fpn(FpnNeck::new(cfg.neck_width, &mut rng)),
            NeckKind::Hfan => Neck::Hfan(Box::new(Hfan::new(cfg.neck_width, cfg.neck_options, &mut rng))),
        };
        let heads = cfg
            .head_levels()
            .iter()
            .map(|_| Head::new(cfg.neck_width, cfg.class_count, &mut rng))
            .collect();
        Ok(Model { cfg, backbone, laterals, neck, heads })
    }

    /// Backbone + lateral projections + neck + heads.
    ///
    /// The single-stream variant reads only `rgb` (callers decide which
    /// modality to feed there).
    pub fn forward(&self, rgb: &Tensor, ir: &Tensor) -> Result<HeadOutput> {
        let pyramid = self.backbone.forward(rgb, ir)?;
        let projected = FeaturePyramid::new(
            pyramid
                .maps()
                .iter()
                .zip(&self.laterals)
                .map(|(m, lat)| lat.forward(m))
                .collect(),
        )?;
        let refined = self.neck.forward(&projected)?;
        let levels = self.cfg.head_levels();
        let mut out = Vec::with_capacity(levels.len());
        for (i, &l) in levels.iter().enumerate() {
            out.push((l, self.heads[i].forward(refined.level(l))));
        }
        Ok(HeadOutput { levels: out })
    }

    pub fn params(&self) -> ParamMap {
        let mut params = ParamMap::new();
        self.backbone.collect("backbone", &mut params);
        for (i, lat) in self.laterals.iter().enumerate() {
            lat.collect(&format!("lateral{}", PYRAMID_LEVELS[i]), &mut params);
        }
        match &self.neck {
            Neck::Fpn(n) => n.collect("neck", &mut params),
            Neck::Hfan(n) => n.collect("neck", &mut params),
        }
        for (head, l) in self.heads.iter().zip(self.cfg.head_levels()) {
            head.collect(&format!("head{l}"), &mut params);
        }
        params
    }
}

/// Pyramid level responsible for a box, by its larger side relative to the
/// image: < 1/16 goes to P2 (or P3 when the P2 head is off), then 1/8 and
/// 1/4 split P3/P4/P5.
pub fn assign_level(gt: &GroundTruthBox, levels: &[usize]) -> usize {
    let side = gt.w.max(gt.h);
    let ideal = if side < 1.0 / 16.0 {
        2
    } else if side < 1.0 / 8.0 {
        3
    } else if side < 1.0 / 4.0 {
        4
    } else {
        5
    };
    ideal
        .max(*levels.first().expect("at least one level"))
        .min(*levels.last().expect("at least one level"))
}

/// Positive cell for a target at a given grid size: (row, col).
pub fn positive_cell(gt: &GroundTruthBox, h: usize, w: usize) -> (usize, usize) {
    let row = ((gt.cy * h as f64).floor() as usize).min(h - 1);
    let col = ((gt.cx * w as f64).floor() as usize).min(w - 1);
    (row, col)
}

/// Encodes a box at its positive cell as (left, top, right, bottom) side
/// distances in cell units.
pub fn encode_box(gt: &GroundTruthBox, row: usize, col: usize, h: usize, w: usize) -> [f64; 4] {
    let b = gt.bbox();
    let cx = (col as f64 + 0.5) / w as f64;
    let cy = (row as f64 + 0.5) / h as f64;
    [
        (cx - b.x1) * w as f64,
        (cy - b.y1) * h as f64,
        (b.x2 - cx) * w as f64,
        (b.y2 - cy) * h as f64,
    ]
}

/// Inverse of [`encode_box`]: side distances in cell units back to corners.
pub fn decode_box(dist: [f64; 4], row: usize, col: usize, h: usize, w: usize) -> BBox {
    let cx = (col as f64 + 0.5) / w as f64;
    let cy = (row as f64 + 0.5) / h as f64;
    BBox {
        x1: cx - dist[0] / w as f64,
        y1: cy - dist[1] / h as f64,
        x2: cx + dist[2] / w as f64,
        y2: cy + dist[3] / h as f64,
    }
}

pub struct LossOutput {
    pub total: Tensor,
    pub cls_component: f64,
    pub box_component: f64,
    pub num_positives: usize,
}

/// Classification BCE over every cell (positives at the assigned center
/// cell) plus complete-IoU box loss on the positives.
pub fn compute_loss(pred: &HeadOutput, targets: &[Vec<GroundTruthBox>]) -> Result<LossOutput> {
    let levels: Vec<usize> = pred.levels.iter().map(|(l, _)| *l).collect();
    let batch = pred.levels[0].1.cls_logits.shape()[0];
    if targets.len() != batch {
        return Err(FuseError::ShapeMismatch(format!(
            "{} target lists for batch of {batch}",
            targets.len()
        )));
    }
    for (bi, boxes) in targets.iter().enumerate() {
        for g in boxes {
            if g.w <= 0.0 || g.h <= 0.0 {
                return Err(FuseError::InvalidConfig(format!(
                    "target with non-positive size in batch item {bi}: {g:?}"
                )));
            }
        }
    }

    // Assignment: one positive cell per target on its level; first target
    // claims a contested cell.
    struct Positive {
        level_idx: usize,
        cell: (usize, usize, usize), // (batch, row, col)
        target: GroundTruthBox,
    }
    let mut positives: Vec<Positive> = Vec::new();
    let mut cls_targets: Vec<ArrayD<f64>> = pred
        .levels
        .iter()
        .map(|(_, p)| ArrayD::zeros(IxDyn(&p.cls_logits.shape())))
        .collect();
    for (bi, boxes) in targets.iter().enumerate() {
        for g in boxes {
            let level = assign_level(g, &levels);
            let li = levels.iter().position(|&l| l == level).expect("level present");
            let shape = pred.levels[li].1.cls_logits.shape();
            let (h, w) = (shape[2], shape[3]);
            let (row, col) = positive_cell(g, h, w);
            let claimed = positives
                .iter()
                .any(|p| p.level_idx == li && p.cell == (bi, row, col));
            if claimed {
                continue;
            }
            cls_targets[li][[bi, g.class_id, row, col]] = 1.0;
            positives.push(Positive { level_idx: li, cell: (bi, row, col), target: *g });
        }
    }
    let num_pos = positives.len();

    // Classification: BCE with logits, positives and negatives normalized
    // separately (the raw cell population is ~250:1 negative-heavy, which
    // otherwise drowns the positive signal).
    let mut pos_sum: Option<Tensor> = None;
    let mut neg_sum: Option<Tensor> = None;
    let mut total_cells = 0usize;
    for ((_, p), t) in pred.levels.iter().zip(cls_targets) {
        total_cells += p.cls_logits.len();
        let bce = p.cls_logits.bce_with_logits(&t);
        let mask = Tensor::constant(t);
        let pos = bce.mul(&mask).sum_all();
        let neg = bce.sum_all().sub(&pos);
        pos_sum = Some(match pos_sum {
            Some(acc) => acc.add(&pos),
            None => pos,
        });
        neg_sum = Some(match neg_sum {
            Some(acc) => acc.add(&neg),
            None => neg,
        });
    }
    let num_neg = total_cells - num_pos;
    let neg_weight = 1.5;
    let cls_loss = pos_sum
        .expect("at least one level")
        .scale(1.0 / (num_pos + 1) as f64)
        .add(&neg_sum.expect("at least one level").scale(neg_weight / (num_neg + 1) as f64));

    // Box regression: CIoU at the positive cells.
    let box_loss = if num_pos == 0 {
        Tensor::scalar(0.0)
    } else {
        let mut per_level: Vec<Tensor> = Vec::new();
        for li in 0..pred.levels.len() {
            let cells: Vec<(usize, usize, usize)> = positives
                .iter()
                .filter(|p| p.level_idx == li)
                .map(|p| p.cell)
                .collect();
            if cells.is_empty() {
                continue;
            }
            let shape = pred.levels[li].1.cls_logits.shape();
            let (h, w) = (shape[2], shape[3]);
            let raw = pred.levels[li].1.box_raw.gather_cells(&cells); // (P, 4)
            let dist = raw.softplus();
            // Decode to corners: cell center offsets are constants.
            let n = cells.len();
            let mut cx = ArrayD::zeros(IxDyn(&[n, 1]));
            let mut cy = ArrayD::zeros(IxDyn(&[n, 1]));
            let mut tgt = ArrayD::zeros(IxDyn(&[n, 4]));
            for (pi, p) in positives.iter().filter(|p| p.level_idx == li).enumerate() {
                let (_, row, col) = p.cell;
                cx[[pi, 0]] = (col as f64 + 0.5) / w as f64;
                cy[[pi, 0]] = (row as f64 + 0.5) / h as f64;
                let b = p.target.bbox();
                tgt[[pi, 0]] = b.x1;
                tgt[[pi, 1]] = b.y1;
                tgt[[pi, 2]] = b.x2;
                tgt[[pi, 3]] = b.y2;
            }
            let cx = Tensor::constant(cx);
            let cy = Tensor::constant(cy);
            let x1 = cx.sub(&dist.narrow(1, 0, 1).scale(1.0 / w as f64));
            let y1 = cy.sub(&dist.narrow(1, 1, 1).scale(1.0 / h as f64));
            let x2 = cx.add(&dist.narrow(1, 2, 1).scale(1.0 / w as f64));
            let y2 = cy.add(&dist.narrow(1, 3, 1).scale(1.0 / h as f64));
            let pred_boxes = crate::tensor::ops::concat(1, &[x1, y1, x2, y2]);
            per_level.push(ciou_loss(&pred_boxes, &Tensor::constant(tgt)));
        }
        let mut acc: Option<Tensor> = None;
        for t in per_level {
            acc = Some(match acc {
                Some(a) => a.add(&t),
                None => t,
            });
        }
        acc.expect("positives exist").scale(1.0 / num_pos as f64)
    };

    let cls_component = cls_loss.item();
    let box_component = box_loss.item();
    let total = cls_loss.add(&box_loss.scale(2.0));
    Ok(LossOutput { total, cls_component, box_component, num_positives: num_pos })
}

/// Sum of (1 - CIoU) over (N, 4) corner boxes against constant targets.
fn ciou_loss(pred: &Tensor, target: &Tensor) -> Tensor {
    let eps = 1e-9;
    let (px1, py1) = (pred.narrow(1, 0, 1), pred.narrow(1, 1, 1));
    let (px2, py2) = (pred.narrow(1, 2, 1), pred.narrow(1, 3, 1));
    let (tx1, ty1) = (target.narrow(1, 0, 1), target.narrow(1, 1, 1));
    let (tx2, ty2) = (target.narrow(1, 2, 1), target.narrow(1, 3, 1));

    let pw = px2.sub(&px1).clamp_min(0.0);
    let ph = py2.sub(&py1).clamp_min(0.0);
    let tw = tx2.sub(&tx1);
    let th = ty2.sub(&ty1);

    let inter_w = px2.minimum(&tx2).sub(&px1.maximum(&tx1)).clamp_min(0.0);
    let inter_h = py2.minimum(&ty2).sub(&py1.maximum(&ty1)).clamp_min(0.0);
    let inter = inter_w.mul(&inter_h);
    let union = pw.mul(&ph).add(&tw.mul(&th)).sub(&inter).add_scalar(eps);
    let iou_t = inter.div(&union);

    // Center distance over enclosing-box diagonal.
    let pcx = px1.add(&px2).scale(0.5);
    let pcy = py1.add(&py2).scale(0.5);
    let tcx = tx1.add(&tx2).scale(0.5);
    let tcy = ty1.add(&ty2).scale(0.5);
    let rho2 = pcx.sub(&tcx).square().add(&pcy.sub(&tcy).square());
    let cw = px2.maximum(&tx2).sub(&px1.minimum(&tx1));
    let ch = py2.maximum(&ty2).sub(&py1.minimum(&ty1));
    let c2 = cw.square().add(&ch.square()).add_scalar(eps);
    let dist_term = rho2.div(&c2);

    // Aspect-ratio term with its balancing weight kept in-graph (the
    // combined alpha*v term stays smooth as v -> 0).
    let four_over_pi2 = 4.0 / (std::f64::consts::PI * std::f64::consts::PI);
    let v = aspect_atan(&tw, &th)
        .sub(&aspect_atan(&pw, &ph))
        .square()
        .scale(four_over_pi2);
    let alpha = v.div(&v.add(&iou_t.neg().add_scalar(1.0)).add_scalar(eps));

    let ciou = iou_t.sub(&dist_term).sub(&alpha.mul(&v));
    ciou.neg().add_scalar(1.0).sum_all()
}

fn aspect_atan(w: &Tensor, h: &Tensor) -> Tensor {
    w.div(&h.add_scalar(1e-9)).atan()
}

/// Decodes head outputs into per-image detections: sigmoid scores above
/// `conf_threshold`, greedy per-class NMS at `iou_threshold`, results sorted
/// by descending confidence with ties broken by (level, row, column).
pub fn decode_and_nms(
    pred: &HeadOutput,
    conf_threshold: f64,
    iou_threshold: f64,
) -> Result<Vec<Vec<Detection>>> {
    for t in [conf_threshold, iou_threshold] {
        if !(t > 0.0 && t < 1.0) {
            return Err(FuseError::InvalidConfig(
                "confidence and IoU thresholds must lie in (0, 1)".into(),
            ));
        }
    }
    let batch = pred.levels[0].1.cls_logits.shape()[0];
    let mut results = Vec::with_capacity(batch);
    no_grad(|| {
        for bi in 0..batch {
            // (confidence, class, level, row, col, box)
            let mut candidates: Vec<(f64, usize, usize, usize, usize, BBox)> = Vec::new();
            for (level, p) in &pred.levels {
                let cls = p.cls_logits.value();
                let reg = p.box_raw.value();
                let shape = cls.shape();
                let (k, h, w) = (shape[1], shape[2], shape[3]);
                for row in 0..h {
                    for col in 0..w {
                        let dist = [
                            crate::tensor::ops::softplus_scalar(reg[[bi, 0, row, col]]),
                            crate::tensor::ops::softplus_scalar(reg[[bi, 1, row, col]]),
                            crate::tensor::ops::softplus_scalar(reg[[bi, 2, row, col]]),
                            crate::tensor::ops::softplus_scalar(reg[[bi, 3, row, col]]),
                        ];
                        let mut bbox = decode_box(dist, row, col, h, w);
                        bbox.x1 = bbox.x1.clamp(0.0, 1.0);
                        bbox.y1 = bbox.y1.clamp(0.0, 1.0);
                        bbox.x2 = bbox.x2.clamp(0.0, 1.0);
                        bbox.y2 = bbox.y2.clamp(0.0, 1.0);
                        for class in 0..k {
                            let score = sigmoid_scalar(cls[[bi, class, row, col]]);
                            if score > conf_threshold {
                                candidates.push((score, class, *level, row, col, bbox));
                            }
                        }
                    }
                }
            }
            candidates.sort_by(|a, b| {
                b.0.partial_cmp(&a.0)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.2.cmp(&b.2))
                    .then(a.3.cmp(&b.3))
                    .then(a.4.cmp(&b.4))
                    .then(a.1.cmp(&b.1))
            });
            let mut kept: Vec<Detection> = Vec::new();
            for (score, class, _, _, _, bbox) in candidates {
                let suppressed = kept
                    .iter()
                    .any(|d| d.class_id == class && iou(&d.bbox, &bbox) >= iou_threshold);
                if !suppressed {
                    kept.push(Detection { class_id: class, confidence: score, bbox });
                }
            }
            results.push(kept);
        }
    });
    Ok(results)
}
