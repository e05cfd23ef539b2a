use mambafuse::boxes::GroundTruthBox;
use mambafuse::datagen::iterate_batches;
use mambafuse::detector::{
    assign_level, compute_loss, positive_cell, Model,
};
use mambafuse::eval::iou;
use mambafuse::nn::AdamW;
use mambafuse::tensor::ops::softplus_scalar;
use mambafuse::tensor::{no_grad, Tensor};
use mambafuse::train::{build_data, evaluate_model, RunConfig};
use ndarray::{ArrayD, IxDyn};

fn main() {
    // Part 1: can a bare head fit boxes through the loss pipeline?
    // Fake a single-level prediction parameterized directly by tensors.
    let grid = 8usize;
    let targets = vec![vec![
        GroundTruthBox { class_id: 0, cx: 0.3, cy: 0.4, w: 0.11, h: 0.09 },
        GroundTruthBox { class_id: 1, cx: 0.7, cy: 0.62, w: 0.09, h: 0.12 },
    ]];
    let cls = Tensor::new(ArrayD::zeros(IxDyn(&[1, 3, grid, grid])), true);
    let reg = Tensor::new(ArrayD::zeros(IxDyn(&[1, 4, grid, grid])), true);
    let mut opt = AdamW::new(vec![cls.clone(), reg.clone()], 0.05, 0.0);
    for step in 0..300 {
        let pred = mambafuse::detector::HeadOutput {
            levels: vec![(
                3,
                mambafuse::detector::LevelPrediction {
                    cls_logits: cls.reshape(&[1, 3, grid, grid]),
                    box_raw: reg.reshape(&[1, 4, grid, grid]),
                },
            )],
        };
        let loss = compute_loss(&pred, &targets).unwrap();
        opt.zero_grads();
        loss.total.backward();
        opt.step();
        if step % 75 == 0 || step == 299 {
            println!(
                "bare step {step}: total {:.4} cls {:.4} box {:.4}",
                loss.total.item(),
                loss.cls_component,
                loss.box_component
            );
        }
    }
    // Measure IoU of the fitted boxes at the positive cells.
    let rv = reg.value();
    for g in &targets[0] {
        let (row, col) = positive_cell(g, grid, grid);
        let dist = [
            softplus_scalar(rv[[0, 0, row, col]]),
            softplus_scalar(rv[[0, 1, row, col]]),
            softplus_scalar(rv[[0, 2, row, col]]),
            softplus_scalar(rv[[0, 3, row, col]]),
        ];
        let decoded = mambafuse::detector::decode_box(dist, row, col, grid, grid);
        println!("bare fit IoU: {:.4}", iou(&decoded, &g.bbox()));
    }

    // Part 2: full model; track IoU at positive cells over training.
    let mut cfg = RunConfig::default();
    cfg.variant = "single-stream".into();
    cfg.neck = "fpn".into();
    cfg.train_scenes = 100;
    cfg.eval_scenes = 40;
    cfg.mode_weights = [1.0, 0.0, 0.0];
    let splits = build_data(&cfg).unwrap();
    let model = Model::new(cfg.model_config().unwrap(), cfg.seed).unwrap();
    let params = model.params();
    let mut opt = AdamW::new(params.tensors(), cfg.learning_rate, cfg.weight_decay);
    for epoch in 0..60 {
        let batches = iterate_batches(&splits.train, 16, 1000 + epoch as u64, true, 64).unwrap();
        let mut acc = (0.0, 0.0, 0.0);
        for batch in &batches {
            let pred = model.forward(&batch.rgb, &batch.ir).unwrap();
            let loss = compute_loss(&pred, &batch.boxes).unwrap();
            opt.zero_grads();
            loss.total.backward();
            opt.step();
            acc.0 += loss.total.item();
            acc.1 += loss.cls_component;
            acc.2 += loss.box_component;
        }
        if epoch % 10 == 0 || epoch == 59 {
            let eb = iterate_batches(&splits.eval, 8, 0, false, 64).unwrap();
            let pred = no_grad(|| model.forward(&eb[0].rgb, &eb[0].ir)).unwrap();
            let levels: Vec<usize> = pred.levels.iter().map(|(l, _)| *l).collect();
            let mut ious = Vec::new();
            for (bi, boxes) in eb[0].boxes.iter().enumerate() {
                for g in boxes {
                    let l = assign_level(g, &levels);
                    let li = levels.iter().position(|&x| x == l).unwrap();
                    let s = pred.levels[li].1.cls_logits.shape();
                    let (row, col) = positive_cell(g, s[2], s[3]);
                    let rv = pred.levels[li].1.box_raw.value();
                    let dist = [
                        softplus_scalar(rv[[bi, 0, row, col]]),
                        softplus_scalar(rv[[bi, 1, row, col]]),
                        softplus_scalar(rv[[bi, 2, row, col]]),
                        softplus_scalar(rv[[bi, 3, row, col]]),
                    ];
                    let decoded = mambafuse::detector::decode_box(dist, row, col, s[2], s[3]);
                    ious.push(iou(&decoded, &g.bbox()));
                }
            }
            ious.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let med = ious[ious.len() / 2];
            let n = batches.len() as f64;
            let result = evaluate_model(&model, &splits.eval, &cfg).unwrap();
            println!(
                "epoch {epoch}: loss {:.3} (cls {:.3} box {:.3}) | median IoU@pos {:.3} | map {:.4}",
                acc.0 / n, acc.1 / n, acc.2 / n, med, result.map
            );
        }
    }
}
