use mambafuse::eval::grad_check_sampled;
use mambafuse::hfan::{Asfb, FeaturePyramid, Hfan, NeckOptions};
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
    let mut rng = ChaCha8Rng::seed_from_u64(11);

    // (a) Single ASFB, gradcheck its CRU predictor weight.
    let asfb = Asfb::new(8, true, true, NeckOptions::default(), &mut rng);
    let deep = rt(&mut rng, &[1, 8, 2, 2], false);
    let mid = rt(&mut rng, &[1, 8, 4, 4], false);
    let shallow = rt(&mut rng, &[1, 8, 8, 8], false);
    let w = asfb.cru.as_ref().unwrap().predict.weight.clone();
    for step in [1e-4, 1e-5] {
        let r = grad_check_sampled(
            |_| {
                asfb.forward(Some(&deep), &mid, Some(&shallow))
                    .unwrap()
                    .square()
                    .sum_all()
            },
            &[w.clone()],
            step,
            1e-3,
            60,
        );
        println!("asfb cru predict step {step:.0e}: max_rel {:.3e} worst {:?}", r.max_rel_err, r.worst);
    }

    // (b) Full neck, gradcheck td3's CRU predictor weight.
    let neck = Hfan::new(8, NeckOptions::default(), &mut rng);
    let maps: Vec<Tensor> = (0..4).map(|i| rt(&mut rng, &[1, 8, 16 >> i, 16 >> i], false)).collect();
    let pyr = FeaturePyramid::new(maps).unwrap();
    // top_down[2] is the level-3 block.
    let w3 = neck.top_down[2].cru.as_ref().unwrap().predict.weight.clone();
    for step in [1e-4, 1e-5] {
        let r = grad_check_sampled(
            |_| {
                let out = neck.forward(&pyr).unwrap();
                let mut loss = out.level(2).square().sum_all();
                for l in 3..=5 {
                    loss = loss.add(&out.level(l).square().sum_all());
                }
                loss
            },
            &[w3.clone()],
            step,
            1e-3,
            60,
        );
        println!("hfan td3 cru predict step {step:.0e}: max_rel {:.3e} worst {:?}", r.max_rel_err, r.worst);
    }
}
