//! Synthetic dual-modality scenes with controllable illumination and
//! modality-exclusive targets, a loader for YOLO-format datasets
//! (images/rgb, images/ir, labels), and the batch iterator.
//!
//! RGB scenes are textured backgrounds whose brightness and target contrast
//! both scale with the illumination level lambda; IR scenes are low-texture
//! backgrounds with high-intensity target blobs. Targets carry a visibility
//! mode so that part of the population exists in only one modality.

use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::GroundTruthBox;
use crate::error::{FuseError, Result};
use crate::tensor::{Data, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Visibility {
    Both,
    RgbOnly,
    IrOnly,
}

/// Recipe for one synthetic scene.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SceneSpec {
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object size range as a fraction of the image side, sampled biased
    /// toward the small end.
    pub min_size: f64,
    pub max_size: f64,
    /// Illumination level in [0, 1].
    pub lambda: f64,
    /// Sampling weights for (both, rgb-only, ir-only) visibility.
    pub mode_weights: [f64; 3],
    pub class_count: usize,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(FuseError::InvalidConfig("image size too small".into()));
        }
        if self.min_objects > self.max_objects {
            return Err(FuseError::InvalidConfig("min_objects > max_objects".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(FuseError::InvalidConfig(format!(
                "lambda {} outside [0, 1]",
                self.lambda
            )));
        }
        if self.min_size <= 0.0 || self.max_size > 0.9 || self.min_size > self.max_size {
            return Err(FuseError::InvalidConfig("bad object size range".into()));
        }
        if self.class_count == 0 {
            return Err(FuseError::InvalidConfig("class count must be positive".into()));
        }
        if self.mode_weights.iter().sum::<f64>() <= 0.0 {
            return Err(FuseError::InvalidConfig("mode weights sum to zero".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SceneMeta {
    pub lambda: f64,
    pub modes: Vec<Visibility>,
    /// Objects dropped because no non-overlapping placement was found.
    pub placement_shortfall: usize,
    pub seed: u64,
}

/// One registered RGB + IR pair with annotations.
#[derive(Clone, Debug)]
pub struct ModalitySample {
    /// (3, S, S) in [0, 1].
    pub rgb: Data,
    /// (1, S, S) in [0, 1].
    pub ir: Data,
    pub boxes: Vec<GroundTruthBox>,
    pub meta: SceneMeta,
}

const PALETTE: [[f64; 3]; 6] = [
    [0.95, 0.30, 0.25],
    [0.25, 0.90, 0.35],
    [0.30, 0.45, 0.95],
    [0.95, 0.85, 0.25],
    [0.85, 0.30, 0.90],
    [0.25, 0.90, 0.90],
];

/// Smooth value-noise field: a coarse random grid upsampled bilinearly.
fn smooth_noise(rng: &mut ChaCha8Rng, size: usize, cells: usize) -> Vec<f64> {
    let grid: Vec<f64> = (0..(cells + 1) * (cells + 1))
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let fy = y as f64 / size as f64 * cells as f64;
            let fx = x as f64 / size as f64 * cells as f64;
            let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
            let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
            let g = |yy: usize, xx: usize| grid[yy * (cells + 1) + xx];
            out[y * size + x] = g(y0, x0) * (1.0 - ty) * (1.0 - tx)
                + g(y0, x0 + 1) * (1.0 - ty) * tx
                + g(y0 + 1, x0) * ty * (1.0 - tx)
                + g(y0 + 1, x0 + 1) * ty * tx;
        }
    }
    out
}

fn shape_mask(class_id: usize, w_px: f64, h_px: f64, dx: f64, dy: f64) -> bool {
    // dx, dy in [-0.5, 0.5] relative to the box.
    match class_id % 3 {
        // Filled rectangle.
        0 => true,
        // Filled ellipse.
        1 => {
            let rx = dx * 2.0;
            let ry = dy * 2.0;
            rx * rx + ry * ry <= 1.0
        }
        // Hollow rectangle (border ~ 30% of the half side).
        _ => {
            let bx = 0.5 - 0.30 * (1.0f64).min(w_px.min(h_px) / w_px.max(h_px) + 0.5);
            dx.abs() >= bx || dy.abs() >= bx
        }
    }
}

/// Deterministic scene synthesis: same spec (including seed) gives
/// bit-identical images and boxes.
pub fn generate_scene(spec: &SceneSpec) -> Result<ModalitySample> {
    spec.validate()?;
    let s = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // RGB background: base brightness and texture amplitude scale with lambda.
    let base = 0.05 + 0.55 * spec.lambda;
    let mut rgb = ArrayD::zeros(IxDyn(&[3, s, s]));
    for c in 0..3 {
        let tex = smooth_noise(&mut rng, s, 8);
        let tint = 1.0 + 0.08 * (c as f64 - 1.0);
        for y in 0..s {
            for x in 0..s {
                let v = base * tint + 0.10 * spec.lambda * tex[y * s + x];
                rgb[[c, y, x]] = v.clamp(0.0, 1.0);
            }
        }
    }
    // IR background: dim and low-texture, independent of lambda.
    let ir_base = 0.15;
    let mut ir = ArrayD::zeros(IxDyn(&[1, s, s]));
    let ir_tex = smooth_noise(&mut rng, s, 4);
    for y in 0..s {
        for x in 0..s {
            ir[[0, y, x]] = (ir_base + 0.04 * ir_tex[y * s + x]).clamp(0.0, 1.0);
        }
    }

    // Objects.
    let count = rng.gen_range(spec.min_objects..=spec.max_objects);
    let total_mode_weight: f64 = spec.mode_weights.iter().sum();
    let mut boxes: Vec<GroundTruthBox> = Vec::new();
    let mut modes: Vec<Visibility> = Vec::new();
    let mut shortfall = 0;
    for _ in 0..count {
        // Biased-small size draw.
        let u: f64 = rng.gen_range(0.0..1.0);
        let side = spec.min_size + (spec.max_size - spec.min_size) * u * u;
        let aspect: f64 = rng.gen_range(0.75..1.3333);
        let w = (side * aspect.sqrt()).clamp(spec.min_size * 0.5, 0.95);
        let h = (side / aspect.sqrt()).clamp(spec.min_size * 0.5, 0.95);
        let class_id = rng.gen_range(0..spec.class_count);
        let mode = {
            let draw: f64 = rng.gen_range(0.0..total_mode_weight);
            if draw < spec.mode_weights[0] {
                Visibility::Both
            } else if draw < spec.mode_weights[0] + spec.mode_weights[1] {
                Visibility::RgbOnly
            } else {
                Visibility::IrOnly
            }
        };
        // Bounded-retry placement with limited overlap.
        let mut placed = None;
        for _ in 0..20 {
            let cx = rng.gen_range(w / 2.0..1.0 - w / 2.0);
            let cy = rng.gen_range(h / 2.0..1.0 - h / 2.0);
            let candidate = GroundTruthBox { class_id, cx, cy, w, h };
            let overlaps = boxes
                .iter()
                .any(|b| crate::eval::iou(&b.bbox(), &candidate.bbox()) > 0.25);
            if !overlaps {
                placed = Some(candidate);
                break;
            }
        }
        let Some(b) = placed else {
            shortfall += 1;
            continue;
        };

        // Rasterize.
        let x1 = (b.cx - b.w / 2.0) * s as f64;
        let y1 = (b.cy - b.h / 2.0) * s as f64;
        let (w_px, h_px) = (b.w * s as f64, b.h * s as f64);
        let color = PALETTE[class_id % PALETTE.len()];
        let ir_level = 0.82 + 0.06 * ((class_id % 3) as f64);
        for y in y1.floor().max(0.0) as usize..((y1 + h_px).ceil() as usize).min(s) {
            for x in x1.floor().max(0.0) as usize..((x1 + w_px).ceil() as usize).min(s) {
                let dx = (x as f64 + 0.5 - (x1 + w_px / 2.0)) / w_px;
                let dy = (y as f64 + 0.5 - (y1 + h_px / 2.0)) / h_px;
                if dx.abs() > 0.5 || dy.abs() > 0.5 || !shape_mask(class_id, w_px, h_px, dx, dy)
                {
                    continue;
                }
                if mode != Visibility::IrOnly {
                    // Contrast scales with lambda: invisible in the dark.
                    for c in 0..3 {
                        let bg = rgb[[c, y, x]];
                        rgb[[c, y, x]] = bg + spec.lambda * (color[c] - bg);
                    }
                }
                if mode != Visibility::RgbOnly {
                    ir[[0, y, x]] = ir_level;
                }
            }
        }
        boxes.push(b);
        modes.push(mode);
    }

    Ok(ModalitySample {
        rgb,
        ir,
        boxes,
        meta: SceneMeta {
            lambda: spec.lambda,
            modes,
            placement_shortfall: shortfall,
            seed: spec.seed,
        },
    })
}

/// Generates `count` scenes with per-scene seeds `base_seed + i` and
/// uniformly drawn illumination levels.
pub fn generate_dataset(
    template: &SceneSpec,
    count: usize,
    base_seed: u64,
) -> Result<Vec<ModalitySample>> {
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let mut spec = template.clone();
        spec.seed = base_seed.wrapping_add(i as u64);
        // Per-scene illumination drawn from the seed so the split covers
        // the whole range deterministically.
        let mut lrng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9e37_79b9_7f4a_7c15);
        spec.lambda = lrng.gen_range(0.0..=1.0);
        out.push(generate_scene(&spec)?);
    }
    Ok(out)
}

// ---- YOLO-format directory loading ----

fn stem_of(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if let Some(ext) = path.extension().and_then(|e| e.to_str()) {
            if matches!(ext.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg" | "bmp") {
                out.push(path);
            }
        }
    }
    out.sort_by_key(|p| stem_of(p));
    Ok(out)
}

fn load_rgb_image(path: &Path) -> Result<Data> {
    let img = image::open(path)
        .map_err(|e| FuseError::Dataset(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = ArrayD::zeros(IxDyn(&[3, h, w]));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = p.0[c] as f64 / 255.0;
        }
    }
    Ok(out)
}

fn load_gray_image(path: &Path) -> Result<Data> {
    let img = image::open(path)
        .map_err(|e| FuseError::Dataset(format!("{}: {e}", path.display())))?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = ArrayD::zeros(IxDyn(&[1, h, w]));
    for (x, y, p) in img.enumerate_pixels() {
        out[[0, y as usize, x as usize]] = p.0[0] as f64 / 255.0;
    }
    Ok(out)
}

fn parse_label_file(path: &Path) -> Result<Vec<GroundTruthBox>> {
    let text = std::fs::read_to_string(path)?;
    let mut boxes = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let fail = |msg: &str| {
            FuseError::Dataset(format!("{}:{}: {msg}: '{line}'", path.display(), ln + 1))
        };
        if fields.len() != 5 {
            return Err(fail("expected 'class cx cy w h'"));
        }
        let class_id = fields[0]
            .parse::<f64>()
            .map_err(|_| fail("bad class id"))? as i64;
        if class_id < 0 {
            return Err(fail("negative class id"));
        }
        let nums: Vec<f64> = fields[1..]
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| fail("bad number")))
            .collect::<Result<_>>()?;
        let b = GroundTruthBox {
            class_id: class_id as usize,
            cx: nums[0],
            cy: nums[1],
            w: nums[2],
            h: nums[3],
        };
        if !b.is_valid() {
            return Err(fail("box out of range"));
        }
        boxes.push(b);
    }
    Ok(boxes)
}

/// Loads a dataset laid out as `images/rgb/*`, optional `images/ir/*`, and
/// `labels/*.txt` with normalized "class cx cy w h" lines. Pairs files by
/// stem; a missing IR folder yields single-modality samples whose IR channel
/// is the RGB luminance.
pub fn load_yolo_dataset(root: &Path) -> Result<Vec<ModalitySample>> {
    let rgb_dir = root.join("images").join("rgb");
    if !rgb_dir.is_dir() {
        return Err(FuseError::Dataset(format!(
            "missing directory {}",
            rgb_dir.display()
        )));
    }
    let ir_dir = root.join("images").join("ir");
    let labels_dir = root.join("labels");
    let rgb_files = list_images(&rgb_dir)?;
    if rgb_files.is_empty() {
        return Err(FuseError::Dataset("no RGB images found".into()));
    }
    let ir_files = if ir_dir.is_dir() { Some(list_images(&ir_dir)?) } else { None };
    if let Some(irs) = &ir_files {
        let rgb_stems: Vec<String> = rgb_files.iter().map(|p| stem_of(p)).collect();
        let ir_stems: Vec<String> = irs.iter().map(|p| stem_of(p)).collect();
        if rgb_stems != ir_stems {
            return Err(FuseError::Dataset(format!(
                "rgb/ir stem mismatch: {rgb_stems:?} vs {ir_stems:?}"
            )));
        }
    }

    let mut samples = Vec::with_capacity(rgb_files.len());
    for (i, rgb_path) in rgb_files.iter().enumerate() {
        let rgb = load_rgb_image(rgb_path)?;
        let ir = match &ir_files {
            Some(irs) => load_gray_image(&irs[i])?,
            None => {
                let (h, w) = (rgb.shape()[1], rgb.shape()[2]);
                let mut luma = ArrayD::zeros(IxDyn(&[1, h, w]));
                for y in 0..h {
                    for x in 0..w {
                        luma[[0, y, x]] = 0.299 * rgb[[0, y, x]]
                            + 0.587 * rgb[[1, y, x]]
                            + 0.114 * rgb[[2, y, x]];
                    }
                }
                luma
            }
        };
        let label_path = labels_dir.join(format!("{}.txt", stem_of(rgb_path)));
        let boxes = if label_path.is_file() {
            parse_label_file(&label_path)?
        } else {
            Vec::new()
        };
        let modes = vec![Visibility::Both; boxes.len()];
        samples.push(ModalitySample {
            rgb,
            ir,
            boxes,
            meta: SceneMeta { lambda: 1.0, modes, placement_shortfall: 0, seed: i as u64 },
        });
    }
    Ok(samples)
}

/// Writes samples back out in the loader's directory layout.
pub fn export_yolo_dataset(samples: &[ModalitySample], root: &Path) -> Result<()> {
    let rgb_dir = root.join("images").join("rgb");
    let ir_dir = root.join("images").join("ir");
    let labels_dir = root.join("labels");
    std::fs::create_dir_all(&rgb_dir)?;
    std::fs::create_dir_all(&ir_dir)?;
    std::fs::create_dir_all(&labels_dir)?;
    for (i, sample) in samples.iter().enumerate() {
        let stem = format!("{i:06}");
        save_rgb_png(&sample.rgb, &rgb_dir.join(format!("{stem}.png")))?;
        save_gray_png(&sample.ir, &ir_dir.join(format!("{stem}.png")))?;
        let mut lines = String::new();
        for b in &sample.boxes {
            lines.push_str(&format!("{} {} {} {} {}\n", b.class_id, b.cx, b.cy, b.w, b.h));
        }
        std::fs::write(labels_dir.join(format!("{stem}.txt")), lines)?;
    }
    Ok(())
}

pub fn save_rgb_png(data: &Data, path: &Path) -> Result<()> {
    let (h, w) = (data.shape()[1], data.shape()[2]);
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                (data[[0, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (data[[1, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (data[[2, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
            ];
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img.save(path).map_err(|e| FuseError::Dataset(format!("{}: {e}", path.display())))
}

pub fn save_gray_png(data: &Data, path: &Path) -> Result<()> {
    let (h, w) = (data.shape()[1], data.shape()[2]);
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = (data[[0, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8;
            img.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    img.save(path).map_err(|e| FuseError::Dataset(format!("{}: {e}", path.display())))
}

// ---- batching ----

/// One training batch; IR is replicated to three channels so both streams
/// share the stem shape.
pub struct Batch {
    pub rgb: Tensor,
    pub ir: Tensor,
    pub boxes: Vec<Vec<GroundTruthBox>>,
    pub indices: Vec<usize>,
}

/// Nearest-neighbor letterbox onto a square canvas, preserving aspect ratio;
/// returns the resized image and the (scale, pad_x, pad_y) transform in
/// target pixels.
fn letterbox(data: &Data, channels: usize, target: usize) -> (Data, f64, f64, f64) {
    let (h, w) = (data.shape()[1], data.shape()[2]);
    let scale = (target as f64 / h as f64).min(target as f64 / w as f64);
    let (nh, nw) = ((h as f64 * scale).round() as usize, (w as f64 * scale).round() as usize);
    let pad_y = ((target - nh) / 2) as f64;
    let pad_x = ((target - nw) / 2) as f64;
    let mut out = ArrayD::from_elem(IxDyn(&[channels, target, target]), 0.5);
    for c in 0..channels {
        for y in 0..nh {
            for x in 0..nw {
                let sy = ((y as f64 + 0.5) / scale) as usize;
                let sx = ((x as f64 + 0.5) / scale) as usize;
                out[[c, y + pad_y as usize, x + pad_x as usize]] =
                    data[[c, sy.min(h - 1), sx.min(w - 1)]];
            }
        }
    }
    (out, scale, pad_x, pad_y)
}

fn letterbox_box(
    b: &GroundTruthBox,
    src: (usize, usize),
    scale: f64,
    pad: (f64, f64),
    target: usize,
) -> GroundTruthBox {
    let (h, w) = src;
    GroundTruthBox {
        class_id: b.class_id,
        cx: (b.cx * w as f64 * scale + pad.0) / target as f64,
        cy: (b.cy * h as f64 * scale + pad.1) / target as f64,
        w: b.w * w as f64 * scale / target as f64,
        h: b.h * h as f64 * scale / target as f64,
    }
}

/// Seeded shuffling + letterboxing + optional horizontal flip (applied
/// identically to both modalities). Returns the full epoch as a batch list.
pub fn iterate_batches(
    samples: &[ModalitySample],
    batch_size: usize,
    seed: u64,
    augment: bool,
    target_size: usize,
) -> Result<Vec<Batch>> {
    if samples.is_empty() {
        return Err(FuseError::Dataset("empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(FuseError::InvalidConfig("batch size must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    // Fisher-Yates with the seeded stream.
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }

    let mut batches = Vec::new();
    for chunk in order.chunks(batch_size) {
        let b = chunk.len();
        let mut rgb = ArrayD::zeros(IxDyn(&[b, 3, target_size, target_size]));
        let mut ir = ArrayD::zeros(IxDyn(&[b, 3, target_size, target_size]));
        let mut boxes = Vec::with_capacity(b);
        for (bi, &si) in chunk.iter().enumerate() {
            let sample = &samples[si];
            let (h, w) = (sample.rgb.shape()[1], sample.rgb.shape()[2]);
            let (rgb_lb, scale, px, py) = letterbox(&sample.rgb, 3, target_size);
            let (ir_lb, _, _, _) = letterbox(&sample.ir, 1, target_size);
            let flip = augment && rng.gen_bool(0.5);
            for y in 0..target_size {
                for x in 0..target_size {
                    let sx = if flip { target_size - 1 - x } else { x };
                    for c in 0..3 {
                        rgb[[bi, c, y, x]] = rgb_lb[[c, y, sx]];
                        ir[[bi, c, y, x]] = ir_lb[[0, y, sx]];
                    }
                }
            }
            let mut bs: Vec<GroundTruthBox> = sample
                .boxes
                .iter()
                .map(|bx| letterbox_box(bx, (h, w), scale, (px, py), target_size))
                .collect();
            if flip {
                for bx in &mut bs {
                    bx.cx = 1.0 - bx.cx;
                }
            }
            boxes.push(bs);
        }
        batches.push(Batch {
            rgb: Tensor::constant(rgb),
            ir: Tensor::constant(ir),
            boxes,
            indices: chunk.to_vec(),
        });
    }
    Ok(batches)
}
#[cfg(test)]
mod tests {
    use super::*;

    fn default_spec() -> SceneSpec {
        SceneSpec {
            image_size: 64,
            min_objects: 2,
            max_objects: 5,
            min_size: 0.08,
            max_size: 0.25,
            lambda: 0.8,
            mode_weights: [0.4, 0.3, 0.3],
            class_count: 3,
            seed: 7,
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let spec = default_spec();
        let a = generate_scene(&spec).unwrap();
        let b = generate_scene(&spec).unwrap();
        assert_eq!(a.rgb, b.rgb);
        assert_eq!(a.ir, b.ir);
        assert_eq!(a.boxes, b.boxes);
    }

    #[test]
    fn boxes_stay_inside_unit_square() {
        for seed in 0..50 {
            let mut spec = default_spec();
            spec.seed = seed;
            let s = generate_scene(&spec).unwrap();
            for b in &s.boxes {
                assert!(b.is_valid(), "box out of bounds: {b:?}");
            }
        }
    }

    /// Mean abs difference inside the target boxes between the rendered
    /// scene and the same scene generated with zero objects.
    fn rgb_contrast(spec: &SceneSpec) -> f64 {
        let with = generate_scene(spec).unwrap();
        let mut empty_spec = spec.clone();
        empty_spec.min_objects = 0;
        empty_spec.max_objects = 0;
        let without = generate_scene(&empty_spec).unwrap();
        let s = spec.image_size;
        let mut acc = 0.0;
        let mut n = 0usize;
        for b in &with.boxes {
            let bb = b.bbox();
            for y in (bb.y1 * s as f64) as usize..((bb.y2 * s as f64) as usize).min(s) {
                for x in (bb.x1 * s as f64) as usize..((bb.x2 * s as f64) as usize).min(s) {
                    for c in 0..3 {
                        acc += (with.rgb[[c, y, x]] - without.rgb[[c, y, x]]).abs();
                        n += 1;
                    }
                }
            }
        }
        if n == 0 {
            0.0
        } else {
            acc / n as f64
        }
    }

    #[test]
    fn dark_scenes_hide_rgb_only_targets() {
        let mut spec = default_spec();
        spec.lambda = 0.0;
        spec.mode_weights = [0.0, 1.0, 0.0]; // all rgb-only
        let contrast = rgb_contrast(&spec);
        assert!(contrast < 0.02, "contrast {contrast} at lambda 0");
        // And the IR image carries no targets: identical to the empty render.
        let with = generate_scene(&spec).unwrap();
        let mut empty_spec = spec.clone();
        empty_spec.min_objects = 0;
        empty_spec.max_objects = 0;
        let without = generate_scene(&empty_spec).unwrap();
        assert_eq!(with.ir, without.ir);
        assert!(!with.boxes.is_empty());
    }

    #[test]
    fn bright_scenes_show_rgb_targets() {
        let mut spec = default_spec();
        spec.lambda = 1.0;
        spec.mode_weights = [1.0, 0.0, 0.0];
        let contrast = rgb_contrast(&spec);
        assert!(contrast > 0.1, "contrast {contrast} at lambda 1");
    }

    #[test]
    fn ir_targets_exceed_background_by_margin() {
        // Measured over 100 scenes: mean IR intensity inside an ir-visible
        // box exceeds the background mean by >= 0.3.
        let mut deficit = 0usize;
        let mut boxes_seen = 0usize;
        for seed in 0..100 {
            let mut spec = default_spec();
            spec.seed = 1000 + seed;
            spec.mode_weights = [0.5, 0.0, 0.5];
            let s = generate_scene(&spec).unwrap();
            let size = spec.image_size;
            let mut bg_acc = 0.0;
            let mut bg_n = 0usize;
            'pix: for y in 0..size {
                for x in 0..size {
                    let (fy, fx) = ((y as f64 + 0.5) / size as f64, (x as f64 + 0.5) / size as f64);
                    for b in &s.boxes {
                        let bb = b.bbox();
                        if fx >= bb.x1 && fx <= bb.x2 && fy >= bb.y1 && fy <= bb.y2 {
                            continue 'pix;
                        }
                    }
                    bg_acc += s.ir[[0, y, x]];
                    bg_n += 1;
                }
            }
            let bg_mean = bg_acc / bg_n as f64;
            for (b, mode) in s.boxes.iter().zip(&s.meta.modes) {
                if *mode == Visibility::RgbOnly {
                    continue;
                }
                boxes_seen += 1;
                let bb = b.bbox();
                let mut acc = 0.0;
                let mut n = 0usize;
                for y in (bb.y1 * size as f64) as usize..((bb.y2 * size as f64) as usize).min(size) {
                    for x in (bb.x1 * size as f64) as usize..((bb.x2 * size as f64) as usize).min(size)
                    {
                        acc += s.ir[[0, y, x]];
                        n += 1;
                    }
                }
                if n > 0 && acc / n as f64 - bg_mean < 0.3 {
                    deficit += 1;
                }
            }
        }
        assert!(boxes_seen > 50);
        // Hollow shapes include background pixels; allow a small failure rate.
        assert!(
            (deficit as f64) < 0.05 * boxes_seen as f64,
            "{deficit}/{boxes_seen} ir boxes below the 0.3 margin"
        );
    }

    #[test]
    fn linear_probe_recovers_lambda_from_gap_rgb() {
        // Closed-form least squares of lambda on the channel means; R^2
        // evaluated on held-out scenes.
        let template = default_spec();
        let train = generate_dataset(&template, 120, 10_000).unwrap();
        let test = generate_dataset(&template, 60, 20_000).unwrap();
        let feats = |s: &ModalitySample| -> [f64; 4] {
            let mut f = [0.0; 4];
            let (h, w) = (s.rgb.shape()[1], s.rgb.shape()[2]);
            for c in 0..3 {
                let mut acc = 0.0;
                for y in 0..h {
                    for x in 0..w {
                        acc += s.rgb[[c, y, x]];
                    }
                }
                f[c] = acc / (h * w) as f64;
            }
            f[3] = 1.0;
            f
        };
        let mut xtx = [[0.0f64; 4]; 4];
        let mut xty = [0.0f64; 4];
        for s in &train {
            let f = feats(s);
            for i in 0..4 {
                for j in 0..4 {
                    xtx[i][j] += f[i] * f[j];
                }
                xty[i] += f[i] * s.meta.lambda;
            }
        }
        let mut a = xtx;
        let mut b = xty;
        for i in 0..4 {
            let pivot = (i..4)
                .max_by(|&r, &s2| a[r][i].abs().partial_cmp(&a[s2][i].abs()).unwrap())
                .unwrap();
            a.swap(i, pivot);
            b.swap(i, pivot);
            for r in i + 1..4 {
                let m = a[r][i] / a[i][i];
                for c in i..4 {
                    a[r][c] -= m * a[i][c];
                }
                b[r] -= m * b[i];
            }
        }
        let mut coef = [0.0f64; 4];
        for i in (0..4).rev() {
            let mut acc = b[i];
            for j in i + 1..4 {
                acc -= a[i][j] * coef[j];
            }
            coef[i] = acc / a[i][i];
        }
        let mean_lambda: f64 = test.iter().map(|s| s.meta.lambda).sum::<f64>() / test.len() as f64;
        let mut ss_res = 0.0;
        let mut ss_tot = 0.0;
        for s in &test {
            let f = feats(s);
            let pred: f64 = (0..4).map(|i| coef[i] * f[i]).sum();
            ss_res += (pred - s.meta.lambda).powi(2);
            ss_tot += (s.meta.lambda - mean_lambda).powi(2);
        }
        let r2 = 1.0 - ss_res / ss_tot;
        assert!(r2 > 0.9, "R^2 = {r2}");
    }

    #[test]
    fn complementarity_neither_modality_sees_everything() {
        let mut spec = default_spec();
        spec.mode_weights = [0.4, 0.3, 0.3];
        let mut rgb_only = 0usize;
        let mut ir_only = 0usize;
        let mut total = 0usize;
        for seed in 0..500 {
            spec.seed = 30_000 + seed;
            let s = generate_scene(&spec).unwrap();
            for mode in &s.meta.modes {
                total += 1;
                match mode {
                    Visibility::RgbOnly => rgb_only += 1,
                    Visibility::IrOnly => ir_only += 1,
                    Visibility::Both => {}
                }
            }
        }
        assert!(total > 1000);
        assert!(rgb_only > 0, "IR misses some targets only if rgb-only exist");
        assert!(ir_only > 0, "RGB misses some targets only if ir-only exist");
        let rgb_visible = total - ir_only;
        let ir_visible = total - rgb_only;
        assert!(rgb_visible < total && ir_visible < total);
    }

    #[test]
    fn yolo_round_trip_and_loader_errors() {
        let dir = std::env::temp_dir().join(format!("mambafuse_yolo_{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        let spec = default_spec();
        let samples: Vec<ModalitySample> = (0..3)
            .map(|i| {
                let mut sp = spec.clone();
                sp.seed = 40_000 + i;
                generate_scene(&sp).unwrap()
            })
            .collect();
        export_yolo_dataset(&samples, &dir).unwrap();
        let loaded = load_yolo_dataset(&dir).unwrap();
        assert_eq!(loaded.len(), 3);
        for (orig, back) in samples.iter().zip(&loaded) {
            assert_eq!(orig.boxes.len(), back.boxes.len());
            for (a, b) in orig.boxes.iter().zip(&back.boxes) {
                assert_eq!(a.class_id, b.class_id);
                assert!((a.cx - b.cx).abs() < 1e-9);
                assert!((a.w - b.w).abs() < 1e-9);
            }
            let max_err = orig
                .rgb
                .iter()
                .zip(back.rgb.iter())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            assert!(max_err <= 0.5 / 255.0 + 1e-9, "max pixel error {max_err}");
        }

        let bad = dir.join("labels").join("000001.txt");
        std::fs::write(&bad, "0 1.2 0.5 0.1 0.1\n").unwrap();
        let err = load_yolo_dataset(&dir).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("000001.txt"), "message lacks file: {msg}");
        assert!(msg.contains(":1"), "message lacks line: {msg}");
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn label_line_format() {
        let dir = std::env::temp_dir().join(format!("mambafuse_lbl_{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        let f = dir.join("x.txt");
        std::fs::write(&f, "0 0.5 0.5 0.1 0.1\n").unwrap();
        let boxes = parse_label_file(&f).unwrap();
        assert_eq!(boxes.len(), 1);
        assert_eq!(boxes[0].class_id, 0);
        assert!((boxes[0].cx - 0.5).abs() < 1e-12);
        assert!((boxes[0].w - 0.1).abs() < 1e-12);
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn batching_sizes_and_determinism() {
        let template = default_spec();
        let samples = generate_dataset(&template, 10, 50_000).unwrap();
        let batches = iterate_batches(&samples, 4, 3, false, 64).unwrap();
        assert_eq!(batches.len(), 3);
        assert_eq!(batches[0].rgb.shape()[0], 4);
        assert_eq!(batches[1].rgb.shape()[0], 4);
        assert_eq!(batches[2].rgb.shape()[0], 2);

        let again = iterate_batches(&samples, 4, 3, false, 64).unwrap();
        for (a, b) in batches.iter().zip(&again) {
            assert_eq!(a.indices, b.indices);
            assert_eq!(a.rgb.to_data(), b.rgb.to_data());
        }

        assert!(iterate_batches(&[], 4, 3, false, 64).is_err());
    }

    #[test]
    fn horizontal_flip_mirrors_images_and_boxes() {
        let template = default_spec();
        let samples = generate_dataset(&template, 6, 60_000).unwrap();
        let plain = iterate_batches(&samples, 6, 1, false, 64).unwrap();
        let flipped = iterate_batches(&samples, 6, 1, true, 64).unwrap();
        let pv = plain[0].rgb.to_data();
        let fv = flipped[0].rgb.to_data();
        let mut saw_flip = false;
        for bi in 0..6 {
            let mut mirrored = true;
            let mut identical = true;
            for y in 0..64 {
                for x in 0..64 {
                    for c in 0..3 {
                        if (fv[[bi, c, y, x]] - pv[[bi, c, y, 63 - x]]).abs() > 1e-12 {
                            mirrored = false;
                        }
                        if (fv[[bi, c, y, x]] - pv[[bi, c, y, x]]).abs() > 1e-12 {
                            identical = false;
                        }
                    }
                }
            }
            assert!(mirrored || identical, "sample {bi} neither flipped nor kept");
            if mirrored && !identical {
                saw_flip = true;
                let p_boxes = &plain[0].boxes[bi];
                let f_boxes = &flipped[0].boxes[bi];
                for (a, b) in p_boxes.iter().zip(f_boxes) {
                    assert!((b.cx - (1.0 - a.cx)).abs() < 1e-9);
                    assert!((b.cy - a.cy).abs() < 1e-12);
                }
            }
        }
        assert!(saw_flip, "no sample flipped under augmentation");
    }

    #[test]
    fn ir_batch_replicates_single_channel() {
        let template = default_spec();
        let samples = generate_dataset(&template, 2, 70_000).unwrap();
        let batches = iterate_batches(&samples, 2, 0, false, 64).unwrap();
        let ir = batches[0].ir.to_data();
        for y in 0..64 {
            for x in 0..64 {
                assert_eq!(ir[[0, 0, y, x]], ir[[0, 1, y, x]]);
                assert_eq!(ir[[0, 1, y, x]], ir[[0, 2, y, x]]);
            }
        }
    }
}
