use mambafuse::eval::{grad_check, grad_check_sampled};
use mambafuse::hfan::CruUpsampler;
use mambafuse::tensor::conv::pixel_shuffle;
use mambafuse::tensor::Tensor;
use ndarray::{Array, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rt(rng: &mut ChaCha8Rng, shape: &[usize], grad: bool) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(Array::from_shape_vec(IxDyn(shape), v).unwrap(), grad)
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);

    // (a) group_norm_base backward
    let x = rt(&mut rng, &[2, 8, 3, 3], true);
    let r = grad_check(
        |ins| ins[0].group_norm_base(4, 1e-5).square().sum_all(),
        &[x],
        1e-5,
        1e-3,
    );
    println!("group_norm_base: max_rel {:.3e} pass={}", r.max_rel_err, r.pass);

    // (b) pixel_shuffle backward
    let x = rt(&mut rng, &[1, 8, 3, 3], true);
    let r = grad_check(
        |ins| pixel_shuffle(&ins[0], 2).square().sum_all(),
        &[x],
        1e-5,
        1e-3,
    );
    println!("pixel_shuffle: max_rel {:.3e} pass={}", r.max_rel_err, r.pass);

    // (c) full CRU forward wrt input + both conv weights
    let cru = CruUpsampler::new(4, 5, 2, &mut rng);
    let x = rt(&mut rng, &[1, 4, 3, 3], true);
    let inputs = [
        x,
        cru.compress.conv.weight.clone(),
        cru.predict.weight.clone(),
    ];
    let r = grad_check(
        |ins| cru.forward(&ins[0]).unwrap().square().sum_all(),
        &inputs,
        1e-5,
        1e-3,
    );
    println!("cru full: max_rel {:.3e} pass={} worst={:?}", r.max_rel_err, r.pass, r.worst);

    // (d) same with larger step to compare
    let r2 = grad_check_sampled(
        |ins| cru.forward(&ins[0]).unwrap().square().sum_all(),
        &inputs,
        1e-4,
        1e-3,
        50,
    );
    println!("cru full step 1e-4 sampled: max_rel {:.3e} pass={}", r2.max_rel_err, r2.pass);
}
