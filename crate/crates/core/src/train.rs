//! Training loop, run configuration, checkpoint container and metric
//! reports.
//!
//! Every run is a pure function of its `RunConfig`: data generation,
//! shuffling, initialization and optimization are all seeded from it, so two
//! runs with the same config produce byte-identical reports. Checkpoints
//! carry the config hash, seed, epoch, the named parameter arrays and the
//! optimizer state (so a resumed run continues the exact trajectory).

use std::collections::BTreeMap;
use std::io::{Read as _, Write as _};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::boxes::{Detection, GroundTruthBox};
use crate::datagen::{generate_dataset, iterate_batches, load_yolo_dataset, ModalitySample, SceneSpec};
use crate::detector::{compute_loss, decode_and_nms, Model, ModelConfig, NeckKind, Variant};
use crate::error::{FuseError, Result};
use crate::eval::{map50, MatchResult};
use crate::hfan::NeckOptions;
use crate::nn::{AdamW, ParamMap};
use crate::tensor::{no_grad, Data};

/// Full description of one run; hashed into every artifact.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RunConfig {
    pub variant: String,
    pub neck: String,
    pub classes: usize,
    pub img_size: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Synthetic split sizes (ignored when `data_dir` is set).
    pub train_scenes: usize,
    pub eval_scenes: usize,
    /// Optional YOLO-layout dataset root; when present the synthetic
    /// generator is bypassed and the last 20% of samples form the eval split.
    pub data_dir: Option<String>,
    pub augment: bool,
    /// Decode threshold used for visualization; evaluation sweeps the PR
    /// curve from `eval_conf_threshold`.
    pub conf_threshold: f64,
    pub eval_conf_threshold: f64,
    pub nms_iou_threshold: f64,
    // Synthetic benchmark knobs.
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_size: f64,
    pub max_size: f64,
    pub mode_weights: [f64; 3],
    // Model details.
    pub state_dim: usize,
    pub mamba_depth: usize,
    pub neck_use_cru: bool,
    pub neck_use_gad: bool,
    pub neck_use_awf: bool,
    pub neck_bidirectional: bool,
    pub use_p2_head: bool,
    /// Which image feeds the primary stream: "rgb" or "ir" (single-stream
    /// runs only).
    pub input_modality: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            variant: "full".into(),
            neck: "hfan".into(),
            classes: 3,
            img_size: 64,
            epochs: 30,
            batch_size: 16,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            seed: 0,
            train_scenes: 400,
            eval_scenes: 100,
            data_dir: None,
            augment: true,
            conf_threshold: 0.25,
            eval_conf_threshold: 0.05,
            nms_iou_threshold: 0.5,
            min_objects: 2,
            max_objects: 6,
            min_size: 0.08,
            max_size: 0.28,
            mode_weights: [0.4, 0.3, 0.3],
            state_dim: 8,
            mamba_depth: 1,
            neck_use_cru: true,
            neck_use_gad: true,
            neck_use_awf: true,
            neck_bidirectional: true,
            use_p2_head: true,
            input_modality: "rgb".into(),
        }
    }
}

impl RunConfig {
    pub fn model_config(&self) -> Result<ModelConfig> {
        let variant = Variant::parse(&self.variant)?;
        let neck = NeckKind::parse(&self.neck)?;
        if self.input_modality != "rgb" && self.input_modality != "ir" {
            return Err(FuseError::InvalidConfig(format!(
                "input modality '{}' must be rgb or ir",
                self.input_modality
            )));
        }
        if self.input_modality == "ir" && variant != Variant::SingleStream {
            return Err(FuseError::InvalidConfig(
                "ir input modality requires the single-stream variant".into(),
            ));
        }
        let mut cfg = ModelConfig::new(variant, neck, self.classes, self.img_size);
        cfg.state_dim = self.state_dim;
        cfg.mamba_depth = self.mamba_depth;
        cfg.neck_options = NeckOptions {
            use_cru: self.neck_use_cru,
            use_gad: self.neck_use_gad,
            use_awf: self.neck_use_awf,
            bidirectional: self.neck_bidirectional,
        };
        cfg.use_p2_head = self.use_p2_head;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn scene_template(&self) -> SceneSpec {
        SceneSpec {
            image_size: self.img_size,
            min_objects: self.min_objects,
            max_objects: self.max_objects,
            min_size: self.min_size,
            max_size: self.max_size,
            lambda: 0.5,
            mode_weights: self.mode_weights,
            class_count: self.classes,
            seed: 0,
        }
    }

    /// Stable hex digest over the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        hex_prefix(&digest, 16)
    }
}

fn hex_prefix(bytes: &[u8], chars: usize) -> String {
    let mut s = String::with_capacity(chars);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
        if s.len() >= chars {
            break;
        }
    }
    s.truncate(chars);
    s
}

/// Train/eval sample splits for a config (synthetic or loaded).
pub struct DataSplits {
    pub train: Vec<ModalitySample>,
    pub eval: Vec<ModalitySample>,
}

/// Builds the splits. Synthetic data depends only on (config geometry,
/// seed), so different model variants under the same seed see identical
/// scenes.
pub fn build_data(cfg: &RunConfig) -> Result<DataSplits> {
    if let Some(dir) = &cfg.data_dir {
        let all = load_yolo_dataset(Path::new(dir))?;
        if all.len() < 2 {
            return Err(FuseError::Dataset("need at least 2 samples".into()));
        }
        let split = (all.len() * 4) / 5;
        let mut all = all;
        let eval = all.split_off(split.max(1));
        if eval.is_empty() {
            return Err(FuseError::Dataset("empty eval split".into()));
        }
        return Ok(DataSplits { train: all, eval });
    }
    let template = cfg.scene_template();
    let train_base = 0x0005_EED0_0000_0000u64 ^ (cfg.seed.wrapping_mul(1_000_003));
    let eval_base = 0x000E_7A10_0000_0000u64 ^ (cfg.seed.wrapping_mul(1_000_033));
    Ok(DataSplits {
        train: generate_dataset(&template, cfg.train_scenes, train_base)?,
        eval: generate_dataset(&template, cfg.eval_scenes, eval_base)?,
    })
}

/// Picks the image pair to feed the model, honoring the input modality.
fn model_inputs<'a>(
    batch: &'a crate::datagen::Batch,
    cfg: &RunConfig,
) -> (&'a crate::tensor::Tensor, &'a crate::tensor::Tensor) {
    if cfg.input_modality == "ir" {
        (&batch.ir, &batch.ir)
    } else {
        (&batch.rgb, &batch.ir)
    }
}

/// Runs the detector over a split and scores mAP@.5.
pub fn evaluate_model(
    model: &Model,
    samples: &[ModalitySample],
    cfg: &RunConfig,
) -> Result<MatchResult> {
    if samples.is_empty() {
        return Err(FuseError::Dataset("empty eval split".into()));
    }
    let batches = iterate_batches(samples, cfg.batch_size, 0, false, cfg.img_size)?;
    let mut dets: Vec<Vec<Detection>> = vec![Vec::new(); samples.len()];
    let mut gts: Vec<Vec<GroundTruthBox>> = vec![Vec::new(); samples.len()];
    for batch in &batches {
        let (primary, secondary) = model_inputs(batch, cfg);
        let pred = no_grad(|| model.forward(primary, secondary))?;
        let decoded = decode_and_nms(&pred, cfg.eval_conf_threshold, cfg.nms_iou_threshold)?;
        for (bi, &si) in batch.indices.iter().enumerate() {
            dets[si] = decoded[bi].clone();
            gts[si] = batch.boxes[bi].clone();
        }
    }
    map50(&dets, &gts, cfg.classes)
}

#[derive(Clone, Debug, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub total_loss: f64,
    pub cls_loss: f64,
    pub box_loss: f64,
    pub map50: f64,
}

pub struct TrainOutcome {
    pub best_map: f64,
    pub best_epoch: usize,
    pub history: Vec<EpochLog>,
    pub model: Model,
    pub config_hash: String,
    /// Parameter snapshot at the best epoch.
    pub best_params: Vec<(String, Data)>,
}

fn cosine_lr(base: f64, epoch: usize, total: usize) -> f64 {
    if total <= 1 {
        return base;
    }
    let t = epoch as f64 / (total - 1) as f64;
    let floor = 0.1 * base;
    floor + 0.5 * (base - floor) * (1.0 + (std::f64::consts::PI * t).cos())
}

fn shuffle_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ ((epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Full seeded training run. When `out_dir` is given, writes `train.log`
/// (one line per epoch), `best.ckpt`, `last.ckpt` and `report.json`; when
/// `resume` is set and a `last.ckpt` matches the config hash, continues
/// from it.
pub fn train(cfg: &RunConfig, out_dir: Option<&Path>, resume: bool) -> Result<TrainOutcome> {
    train_session(cfg, out_dir, resume, None)
}

/// Like [`train`] but stops this session after `session_epochs` epochs (the
/// run state lands in `last.ckpt` and can be resumed later).
pub fn train_session(
    cfg: &RunConfig,
    out_dir: Option<&Path>,
    resume: bool,
    session_epochs: Option<usize>,
) -> Result<TrainOutcome> {
    let model_cfg = cfg.model_config()?;
    let splits = build_data(cfg)?;
    let config_hash = cfg.hash();
    let model = Model::new(model_cfg, cfg.seed)?;
    let params = model.params();
    let mut opt = AdamW::new(params.tensors(), cfg.learning_rate, cfg.weight_decay);

    let mut start_epoch = 0usize;
    let mut resumed_best: Option<(f64, usize)> = None;
    if resume {
        if let Some(dir) = out_dir {
            let last = dir.join("last.ckpt");
            if last.is_file() {
                let loaded = load_checkpoint(&last)?;
                if loaded.config_hash != config_hash {
                    return Err(FuseError::Checkpoint(format!(
                        "checkpoint config hash {} does not match this run ({config_hash})",
                        loaded.config_hash
                    )));
                }
                restore_params(&params, &loaded)?;
                restore_optimizer(&mut opt, &loaded)?;
                start_epoch = loaded.epoch + 1;
                if let (Some(bm), Some(be)) =
                    (loaded.get("meta.best_map"), loaded.get("meta.best_epoch"))
                {
                    resumed_best = Some((bm[[0]], be[[0]] as usize));
                }
            }
        }
    }

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let log_path = out_dir.map(|d| d.join("train.log"));
    if start_epoch == 0 {
        if let Some(p) = &log_path {
            std::fs::write(p, format!("# config_hash={config_hash} seed={}\n", cfg.seed))?;
        }
    }

    let mut history = Vec::new();
    let mut best_map = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut best_params: Vec<(String, Data)> = snapshot_params(&params);
    if let Some((bm, be)) = resumed_best {
        best_map = bm;
        best_epoch = be;
        if let Some(dir) = out_dir {
            let best_path = dir.join("best.ckpt");
            if best_path.is_file() {
                let loaded = load_checkpoint(&best_path)?;
                best_params = loaded.arrays;
            }
        }
    }

    let end_epoch = match session_epochs {
        Some(limit) => cfg.epochs.min(start_epoch + limit),
        None => cfg.epochs,
    };
    for epoch in start_epoch..end_epoch {
        opt.lr = cosine_lr(cfg.learning_rate, epoch, cfg.epochs);
        let batches = iterate_batches(
            &splits.train,
            cfg.batch_size,
            shuffle_seed(cfg.seed, epoch),
            cfg.augment,
            cfg.img_size,
        )?;
        let mut loss_acc = 0.0;
        let mut cls_acc = 0.0;
        let mut box_acc = 0.0;
        for (bi, batch) in batches.iter().enumerate() {
            let (primary, secondary) = model_inputs(batch, cfg);
            let pred = model.forward(primary, secondary)?;
            let loss = compute_loss(&pred, &batch.boxes)?;
            let total = loss.total.item();
            if !total.is_finite() {
                return Err(FuseError::NonFinite(format!(
                    "loss diverged at epoch {epoch}, batch {bi} (shuffle seed {})",
                    shuffle_seed(cfg.seed, epoch)
                )));
            }
            opt.zero_grads();
            loss.total.backward();
            opt.step();
            loss_acc += total;
            cls_acc += loss.cls_component;
            box_acc += loss.box_component;
        }
        let n = batches.len() as f64;
        let eval_result = evaluate_model(&model, &splits.eval, cfg)?;
        let entry = EpochLog {
            epoch,
            total_loss: loss_acc / n,
            cls_loss: cls_acc / n,
            box_loss: box_acc / n,
            map50: eval_result.map,
        };
        if let Some(p) = &log_path {
            let mut f = std::fs::OpenOptions::new().append(true).open(p)?;
            writeln!(
                f,
                "epoch={} loss={:.6} cls={:.6} box={:.6} map50={:.6}",
                entry.epoch, entry.total_loss, entry.cls_loss, entry.box_loss, entry.map50
            )?;
        }
        if eval_result.map > best_map {
            best_map = eval_result.map;
            best_epoch = epoch;
            best_params = snapshot_params(&params);
            if let Some(dir) = out_dir {
                save_checkpoint(&dir.join("best.ckpt"), &config_hash, cfg.seed, epoch, &params, None)?;
            }
        }
        if let Some(dir) = out_dir {
            let mut extra = vec![
                ("meta.best_map".to_string(), ArrayD::from_elem(IxDyn(&[1]), best_map)),
                ("meta.best_epoch".to_string(), ArrayD::from_elem(IxDyn(&[1]), best_epoch as f64)),
            ];
            save_checkpoint_with_extra(
                &dir.join("last.ckpt"),
                &config_hash,
                cfg.seed,
                epoch,
                &params,
                Some(&opt),
                &mut extra,
            )?;
        }
        history.push(entry);
    }

    if let Some(dir) = out_dir {
        let mut report = Report::new(&config_hash, cfg.seed);
        report.insert("split", "eval");
        report.insert_f64("map50.best", best_map);
        report.insert_f64("epoch.best", best_epoch as f64);
        if let Some(last) = history.last() {
            report.insert_f64("loss.final", last.total_loss);
            report.insert_f64("map50.final", last.map50);
        }
        report.write(&dir.join("report.json"))?;
    }

    Ok(TrainOutcome {
        best_map,
        best_epoch,
        history,
        model,
        config_hash,
        best_params,
    })
}

fn snapshot_params(params: &ParamMap) -> Vec<(String, Data)> {
    params.iter().map(|(n, t)| (n.to_string(), t.to_data())).collect()
}

/// Loads a snapshot (by name) back into live parameters.
pub fn load_snapshot(params: &ParamMap, snapshot: &[(String, Data)]) -> Result<()> {
    for (name, data) in snapshot {
        let t = params.get(name).ok_or_else(|| {
            FuseError::Checkpoint(format!("snapshot parameter '{name}' not found in model"))
        })?;
        if t.shape() != data.shape() {
            return Err(FuseError::Checkpoint(format!(
                "snapshot parameter '{name}' has shape {:?}, model expects {:?}",
                data.shape(),
                t.shape()
            )));
        }
        t.update_value(|v| v.assign(data));
    }
    Ok(())
}

// ---- checkpoint container ----
//
// Layout (little-endian):
//   bytes 0..8    magic "MFCK0001"
//   bytes 8..16   u64 manifest length M
//   bytes 16..16+M JSON manifest {version, config_hash, seed, epoch,
//                  arrays: [{name, shape, offset, len}]}
//   remainder     f64 array data, concatenated in manifest order
//                 (offset/len are in elements)

const CKPT_MAGIC: &[u8; 8] = b"MFCK0001";

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    config_hash: String,
    seed: u64,
    epoch: usize,
    arrays: Vec<ArrayEntry>,
}

pub struct LoadedCheckpoint {
    pub config_hash: String,
    pub seed: u64,
    pub epoch: usize,
    pub arrays: Vec<(String, Data)>,
}

impl LoadedCheckpoint {
    pub fn get(&self, name: &str) -> Option<&Data> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, d)| d)
    }
}

pub fn save_checkpoint(
    path: &Path,
    config_hash: &str,
    seed: u64,
    epoch: usize,
    params: &ParamMap,
    opt: Option<&AdamW>,
) -> Result<()> {
    save_checkpoint_with_extra(path, config_hash, seed, epoch, params, opt, &mut Vec::new())
}

fn save_checkpoint_with_extra(
    path: &Path,
    config_hash: &str,
    seed: u64,
    epoch: usize,
    params: &ParamMap,
    opt: Option<&AdamW>,
    extra: &mut Vec<(String, Data)>,
) -> Result<()> {
    let mut arrays: Vec<(String, Data)> = snapshot_params(params);
    if let Some(opt) = opt {
        arrays.extend(opt.state_arrays());
    }
    arrays.append(extra);
    let mut entries = Vec::with_capacity(arrays.len());
    let mut offset = 0usize;
    for (name, data) in &arrays {
        entries.push(ArrayEntry {
            name: name.clone(),
            shape: data.shape().to_vec(),
            offset,
            len: data.len(),
        });
        offset += data.len();
    }
    let manifest = Manifest {
        version: 1,
        config_hash: config_hash.to_string(),
        seed,
        epoch,
        arrays: entries,
    };
    let manifest_json = serde_json::to_vec(&manifest)
        .map_err(|e| FuseError::Checkpoint(format!("manifest: {e}")))?;
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(CKPT_MAGIC)?;
    file.write_all(&(manifest_json.len() as u64).to_le_bytes())?;
    file.write_all(&manifest_json)?;
    for (_, data) in &arrays {
        for v in data.iter() {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    file.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(FuseError::Checkpoint(format!(
            "{}: bad magic (not a checkpoint)",
            path.display()
        )));
    }
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)?;
    let manifest_len = u64::from_le_bytes(len_bytes) as usize;
    let mut manifest_json = vec![0u8; manifest_len];
    file.read_exact(&mut manifest_json)?;
    let manifest: Manifest = serde_json::from_slice(&manifest_json)
        .map_err(|e| FuseError::Checkpoint(format!("manifest: {e}")))?;
    let mut rest = Vec::new();
    file.read_to_end(&mut rest)?;
    let mut arrays = Vec::with_capacity(manifest.arrays.len());
    for entry in &manifest.arrays {
        let start = entry.offset * 8;
        let end = start + entry.len * 8;
        if end > rest.len() {
            return Err(FuseError::Checkpoint(format!(
                "array '{}' extends past end of file",
                entry.name
            )));
        }
        let values: Vec<f64> = rest[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let data = ArrayD::from_shape_vec(IxDyn(&entry.shape), values)
            .map_err(|e| FuseError::Checkpoint(format!("array '{}': {e}", entry.name)))?;
        arrays.push((entry.name.clone(), data));
    }
    Ok(LoadedCheckpoint {
        config_hash: manifest.config_hash,
        seed: manifest.seed,
        epoch: manifest.epoch,
        arrays,
    })
}

pub fn restore_params(params: &ParamMap, loaded: &LoadedCheckpoint) -> Result<()> {
    for (name, t) in params.iter() {
        let data = loaded.get(name).ok_or_else(|| {
            FuseError::Checkpoint(format!("checkpoint missing parameter '{name}'"))
        })?;
        if t.shape() != data.shape() {
            return Err(FuseError::Checkpoint(format!(
                "parameter '{name}' has shape {:?} in checkpoint, model expects {:?}",
                data.shape(),
                t.shape()
            )));
        }
        t.update_value(|v| v.assign(data));
    }
    Ok(())
}

pub fn restore_optimizer(opt: &mut AdamW, loaded: &LoadedCheckpoint) -> Result<()> {
    opt.load_state(&loaded.arrays)
}

// ---- flat key-value metric report ----

/// Flat key-value document; keys serialize sorted, so identical runs emit
/// byte-identical files.
#[derive(Clone, Debug, Default, Serialize)]
pub struct Report(pub BTreeMap<String, serde_json::Value>);

impl Report {
    pub fn new(config_hash: &str, seed: u64) -> Report {
        let mut r = Report::default();
        r.insert("config_hash", config_hash);
        r.0.insert("seed".into(), serde_json::json!(seed));
        r
    }

    pub fn insert(&mut self, key: &str, value: &str) {
        self.0.insert(key.into(), serde_json::Value::String(value.into()));
    }

    pub fn insert_f64(&mut self, key: &str, value: f64) {
        self.0.insert(
            key.into(),
            serde_json::Number::from_f64(value)
                .map(serde_json::Value::Number)
                .unwrap_or(serde_json::Value::Null),
        );
    }

    pub fn from_match_result(config_hash: &str, seed: u64, result: &MatchResult) -> Report {
        let mut r = Report::new(config_hash, seed);
        r.insert_f64("map50", result.map);
        for (class, ap) in &result.ap_per_class {
            r.insert_f64(&format!("ap.{class}"), *ap);
        }
        r.insert_f64("predictions", result.flags.len() as f64);
        r
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.0).expect("report serializes")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }
}
