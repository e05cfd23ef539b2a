use mambafuse::boxes::GroundTruthBox;
use mambafuse::detector::{compute_loss, Model, ModelConfig, NeckKind, Variant};
use mambafuse::eval::{grad_check, grad_check_sampled};
use mambafuse::tensor::Tensor;
use ndarray::{Array, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rt(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64, grad: bool) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(Array::from_shape_vec(IxDyn(shape), v).unwrap(), grad)
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    // Proper group-norm check: weighted readout so gradients are O(1).
    let x = rt(&mut rng, &[2, 8, 3, 3], -1.0, 1.0, true);
    let w = rt(&mut rng, &[2, 8, 3, 3], -1.0, 1.0, false);
    let r = grad_check(
        |ins| ins[0].group_norm_base(4, 1e-5).mul(&w).sum_all(),
        &[x],
        1e-5,
        1e-3,
    );
    println!("group_norm weighted: max_rel {:.3e} pass={}", r.max_rel_err, r.pass);

    // Full model, predict.weight only, at several steps.
    let mut cfg = ModelConfig::new(Variant::Full, NeckKind::Hfan, 2, 32);
    cfg.state_dim = 2;
    let model = Model::new(cfg, 0xACCE).unwrap();
    let rgb = rt(&mut rng, &[1, 3, 32, 32], 0.0, 1.0, true);
    let ir = rt(&mut rng, &[1, 3, 32, 32], 0.0, 1.0, true);
    let targets = vec![vec![
        GroundTruthBox { class_id: 0, cx: 0.3, cy: 0.3, w: 0.05, h: 0.05 },
        GroundTruthBox { class_id: 1, cx: 0.65, cy: 0.6, w: 0.12, h: 0.1 },
    ]];
    let params = model.params();
    let t = params
        .iter()
        .find(|(n, _)| *n == "neck.td3.cru.predict.weight")
        .map(|(_, t)| t.clone())
        .unwrap();
    for step in [1e-3, 1e-4, 1e-5] {
        let r = grad_check_sampled(
            |_| compute_loss(&model.forward(&rgb, &ir).unwrap(), &targets).unwrap().total,
            &[t.clone()],
            step,
            1e-3,
            40,
        );
        println!("predict.weight step {step:.0e}: max_rel {:.3e} worst {:?}", r.max_rel_err, r.worst);
    }
}
