use mambafuse::datagen::iterate_batches;
use mambafuse::detector::{compute_loss, decode_and_nms, positive_cell, assign_level, Model};
use mambafuse::nn::AdamW;
use mambafuse::tensor::no_grad;
use mambafuse::train::{build_data, evaluate_model, RunConfig};

fn main() {
    let mut cfg = RunConfig::default();
    cfg.variant = "single-stream".into();
    cfg.neck = "fpn".into();
    cfg.train_scenes = 100;
    cfg.eval_scenes = 40;
    cfg.epochs = 25;
    cfg.mode_weights = [1.0, 0.0, 0.0];
    let splits = build_data(&cfg).unwrap();
    let model = Model::new(cfg.model_config().unwrap(), cfg.seed).unwrap();
    let params = model.params();
    println!("params: {}", mambafuse::eval::count_params(&params));
    let mut opt = AdamW::new(params.tensors(), cfg.learning_rate, cfg.weight_decay);

    for epoch in 0..cfg.epochs {
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
        let n = batches.len() as f64;
        if epoch % 4 == 0 || epoch == cfg.epochs - 1 {
            // Score stats at GT cells on one eval batch.
            let eb = iterate_batches(&splits.eval, 8, 0, false, 64).unwrap();
            let pred = no_grad(|| model.forward(&eb[0].rgb, &eb[0].ir)).unwrap();
            let mut pos_scores: Vec<f64> = Vec::new();
            let levels: Vec<usize> = pred.levels.iter().map(|(l, _)| *l).collect();
            for (bi, boxes) in eb[0].boxes.iter().enumerate() {
                for g in boxes {
                    let l = assign_level(g, &levels);
                    let li = levels.iter().position(|&x| x == l).unwrap();
                    let s = pred.levels[li].1.cls_logits.shape();
                    let (row, col) = positive_cell(g, s[2], s[3]);
                    let v = pred.levels[li].1.cls_logits.value()[[bi, g.class_id, row, col]];
                    pos_scores.push(1.0 / (1.0 + (-v).exp()));
                }
            }
            pos_scores.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let med = pos_scores[pos_scores.len() / 2];
            let dets = decode_and_nms(&pred, 0.05, 0.5).unwrap();
            let ndets: usize = dets.iter().map(|d| d.len()).sum();
            let result = evaluate_model(&model, &splits.eval, &cfg).unwrap();
            println!(
                "epoch {epoch}: loss {:.3} (cls {:.3} box {:.3}) | median pos score {:.4}, max {:.4} | dets@0.05 {} | map {:.4}",
                acc.0 / n, acc.1 / n, acc.2 / n, med, pos_scores.last().unwrap(), ndets, result.map
            );
        }
    }
}
