use super::gradcheck::max_rel_err;
use super::*;
use crate::rng::SplitMix64;

const GRAD_TOL: f64 = 1e-6;

fn rand_param(rng: &mut SplitMix64, shape: Vec<usize>) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    // Keep values away from activation kinks so finite differences stay clean.
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let v = rng.uniform_range(-1.0, 1.0);
            if v.abs() < 0.05 {
                v + 0.1 * v.signum().max(0.5)
            } else {
                v
            }
        })
        .collect();
    Tensor::param(shape, data).unwrap()
}

#[test]
fn conv1d_trivial_cases() {
    let x = Tensor::from_vec(vec![1, 3], vec![1.0f32, 2.0, 3.0]).unwrap();
    let w = Tensor::from_vec(vec![1, 1, 2], vec![1.0, 1.0]).unwrap();
    let b = Tensor::from_vec(vec![1], vec![0.0]).unwrap();
    let y = conv1d(&x, &w, &b, 1, 0).unwrap();
    assert_eq!(y.to_vec(), vec![3.0, 5.0]);

    // identity kernel
    let w1 = Tensor::from_vec(vec![1, 1, 1], vec![1.0]).unwrap();
    let y = conv1d(&x, &w1, &b, 1, 0).unwrap();
    assert_eq!(y.to_vec(), x.to_vec());
}

#[test]
fn conv1d_gradcheck() {
    let mut rng = SplitMix64::new(11);
    for _ in 0..20 {
        let x = rand_param(&mut rng, vec![2, 16]);
        let w = rand_param(&mut rng, vec![3, 2, 4]);
        let b = rand_param(&mut rng, vec![3]);
        let leaves = [x.clone(), w.clone(), b.clone()];
        let err = max_rel_err(&leaves, || {
            sum(&conv1d(&x, &w, &b, 2, 1).unwrap())
        });
        assert!(err < GRAD_TOL, "conv1d grad err {err}");
    }
}

#[test]
fn conv2d_identity_and_depthwise() {
    let x = Tensor::from_vec(vec![1, 2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
    let w = Tensor::from_vec(vec![1, 1, 1, 1], vec![1.0]).unwrap();
    let b = Tensor::from_vec(vec![1], vec![0.0]).unwrap();
    let y = conv2d(&x, &w, &b, (1, 1), (0, 0), 1).unwrap();
    assert_eq!(y.to_vec(), x.to_vec());

    // depthwise all-ones 3x3 on constant-1 3x3 input, pad 1
    let x = Tensor::from_vec(vec![1, 3, 3], vec![1.0f32; 9]).unwrap();
    let w = Tensor::from_vec(vec![1, 1, 3, 3], vec![1.0f32; 9]).unwrap();
    let y = conv2d(&x, &w, &b, (1, 1), (1, 1), 1).unwrap();
    let v = y.to_vec();
    assert_eq!(v[4], 9.0); // center
    assert_eq!(v[0], 4.0); // corner
    assert_eq!(v[8], 4.0);
}

#[test]
fn conv2d_gradcheck_grouped() {
    let mut rng = SplitMix64::new(12);
    for groups in [1usize, 4] {
        for _ in 0..10 {
            let x = rand_param(&mut rng, vec![4, 6, 6]);
            let w = rand_param(&mut rng, vec![4, 4 / groups, 3, 3]);
            let b = rand_param(&mut rng, vec![4]);
            let leaves = [x.clone(), w.clone(), b.clone()];
            let err = max_rel_err(&leaves, || {
                sum(&conv2d(&x, &w, &b, (2, 1), (1, 1), groups).unwrap())
            });
            assert!(err < GRAD_TOL, "conv2d groups={groups} grad err {err}");
        }
    }
}

#[test]
fn conv2d_pointwise_gradcheck() {
    let mut rng = SplitMix64::new(13);
    for _ in 0..10 {
        let x = rand_param(&mut rng, vec![3, 4, 5]);
        let w = rand_param(&mut rng, vec![2, 3, 1, 1]);
        let b = rand_param(&mut rng, vec![2]);
        let leaves = [x.clone(), w.clone(), b.clone()];
        let err = max_rel_err(&leaves, || {
            sum(&conv2d(&x, &w, &b, (1, 1), (0, 0), 1).unwrap())
        });
        assert!(err < GRAD_TOL, "pointwise conv2d grad err {err}");
    }
}

#[test]
fn sigmoid_closed_form() {
    let x = Tensor::param(vec![1], vec![0.0f64]).unwrap();
    let y = sigmoid(&x);
    assert_eq!(y.to_vec(), vec![0.5]);
    sum(&y).backward().unwrap();
    let g = x.grad().unwrap();
    assert!((g[0] - 0.25).abs() < 1e-12);
}

#[test]
fn sigmoid_clamps_output() {
    let x = Tensor::from_vec(vec![2], vec![100.0f32, -100.0]).unwrap();
    let y = sigmoid(&x).to_vec();
    assert!(y[0] <= 1.0 - 0.9e-7);
    assert!(y[1] >= 0.9e-7);
}

#[test]
fn batchnorm_constant_batch_is_zero() {
    let x = Tensor::from_vec(vec![2, 4], vec![3.0f32; 8]).unwrap();
    let gamma = Tensor::from_vec(vec![2], vec![1.0, 1.0]).unwrap();
    let beta = Tensor::from_vec(vec![2], vec![0.0, 0.0]).unwrap();
    let rm = Tensor::zeros(vec![2]);
    let rv = Tensor::from_vec(vec![2], vec![1.0, 1.0]).unwrap();
    let y = batch_norm(&x, &gamma, &beta, &rm, &rv, 0.1, true).unwrap();
    for v in y.to_vec() {
        assert!(v.abs() < 1e-6);
    }
    // running stats moved toward batch stats
    let rm_v = rm.to_vec();
    assert!((rm_v[0] - 0.3).abs() < 1e-6);
}

#[test]
fn batchnorm_eval_uses_initial_running_stats() {
    let x = Tensor::from_vec(vec![1, 2], vec![2.0f32, 4.0]).unwrap();
    let gamma = Tensor::from_vec(vec![1], vec![1.0]).unwrap();
    let beta = Tensor::from_vec(vec![1], vec![0.0]).unwrap();
    let rm = Tensor::zeros(vec![1]);
    let rv = Tensor::from_vec(vec![1], vec![1.0]).unwrap();
    let y = batch_norm(&x, &gamma, &beta, &rm, &rv, 0.1, false).unwrap();
    let v = y.to_vec();
    assert!((v[0] - 2.0 / (1.0f32 + 1e-5).sqrt()).abs() < 1e-5);
    assert!((v[1] - 4.0 / (1.0f32 + 1e-5).sqrt()).abs() < 1e-5);
}

#[test]
fn norm_ops_gradcheck() {
    let mut rng = SplitMix64::new(14);
    for _ in 0..20 {
        let x = rand_param(&mut rng, vec![3, 5]);
        let gamma = rand_param(&mut rng, vec![3]);
        let beta = rand_param(&mut rng, vec![3]);
        let leaves = [x.clone(), gamma.clone(), beta.clone()];
        let err = max_rel_err(&leaves, || {
            sum(&layer_norm_ch(&x, &gamma, &beta).unwrap())
        });
        assert!(err < GRAD_TOL, "layer_norm grad err {err}");

        let rm = Tensor::zeros(vec![3]);
        let rv = Tensor::from_vec(vec![3], vec![1.0; 3]).unwrap();
        for training in [true, false] {
            let err = max_rel_err(&leaves, || {
                // weight the channels so the reduction is not trivially flat
                let y = batch_norm(&x, &gamma, &beta, &rm, &rv, 0.1, training).unwrap();
                let sq = mul(&y, &y).unwrap();
                sum(&sq)
            });
            assert!(err < GRAD_TOL, "batch_norm training={training} grad err {err}");
        }
    }
}

#[test]
fn activation_and_linear_gradcheck() {
    let mut rng = SplitMix64::new(15);
    for _ in 0..20 {
        let x = rand_param(&mut rng, vec![3, 4]);
        let w = rand_param(&mut rng, vec![2, 4]);
        let b = rand_param(&mut rng, vec![2]);
        let leaves = [x.clone(), w.clone(), b.clone()];
        let err = max_rel_err(&leaves, || {
            let h = linear(&x, &w, &b).unwrap();
            let h = leaky_relu(&h, 0.01);
            let h = sigmoid(&h);
            mean(&h)
        });
        assert!(err < GRAD_TOL, "linear+act grad err {err}");

        let err = max_rel_err(std::slice::from_ref(&x), || sum(&relu(&x)));
        assert!(err < GRAD_TOL, "relu grad err {err}");
    }
}

#[test]
fn pool_flatten_concat_gradcheck() {
    let mut rng = SplitMix64::new(16);
    for _ in 0..20 {
        let x = rand_param(&mut rng, vec![2, 3, 4]);
        let y = rand_param(&mut rng, vec![2, 3, 4]);
        let leaves = [x.clone(), y.clone()];
        let err = max_rel_err(&leaves, || {
            let c = concat0(&[&x, &y]).unwrap();
            let p = global_avg_pool(&c).unwrap();
            let f = flatten_frames(&x).unwrap();
            add(&sum(&p), &mean(&f)).unwrap()
        });
        assert!(err < GRAD_TOL, "pool/flatten/concat grad err {err}");
    }
}

#[test]
fn concat_trailing_roundtrip_and_shapes() {
    let a = Tensor::<f64>::from_vec(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let b = Tensor::<f64>::from_vec(vec![2, 2], vec![7.0, 8.0, 9.0, 10.0]).unwrap();
    let c = concat_trailing(&[&a, &b]).unwrap();
    assert_eq!(c.shape(), vec![2, 5]);
    assert_eq!(c.to_vec(), vec![1.0, 2.0, 3.0, 7.0, 8.0, 4.0, 5.0, 6.0, 9.0, 10.0]);
    let a2 = slice_trailing(&c, 0, vec![2, 3]).unwrap();
    let b2 = slice_trailing(&c, 3, vec![2, 2]).unwrap();
    assert_eq!(a2.to_vec(), a.to_vec());
    assert_eq!(b2.to_vec(), b.to_vec());
    // channel mismatch and out-of-range slices are rejected
    let odd = Tensor::<f64>::from_vec(vec![3, 2], vec![0.0; 6]).unwrap();
    assert!(concat_trailing(&[&a, &odd]).is_err());
    assert!(slice_trailing(&c, 4, vec![2, 2]).is_err());
}

#[test]
fn concat_slice_trailing_gradcheck() {
    let mut rng = SplitMix64::new(21);
    for _ in 0..20 {
        let c = 2 + rng.below(3);
        let m1 = 2 + rng.below(4);
        let m2 = 2 + rng.below(4);
        let x = rand_param(&mut rng, vec![c, m1]);
        let y = rand_param(&mut rng, vec![c, 2, m2]);
        let gamma = rand_param(&mut rng, vec![c]);
        let beta = rand_param(&mut rng, vec![c]);
        let leaves = [x.clone(), y.clone(), gamma.clone(), beta.clone()];
        let err = max_rel_err(&leaves, || {
            let cat = concat_trailing(&[&x, &y]).unwrap();
            let rm = Tensor::from_vec(vec![c], vec![0.0; c]).unwrap();
            let rv = Tensor::from_vec(vec![c], vec![1.0; c]).unwrap();
            let n = batch_norm(&cat, &gamma, &beta, &rm, &rv, 0.1, true).unwrap();
            let back = slice_trailing(&n, m1, vec![c, 2, m2]).unwrap();
            add(&sum(&back), &mean(&slice_trailing(&n, 0, vec![c, m1]).unwrap())).unwrap()
        });
        assert!(err < GRAD_TOL, "concat/slice grad err {err}");
    }
}

#[test]
fn loss_ops_gradcheck() {
    let mut rng = SplitMix64::new(17);
    for _ in 0..20 {
        let logits = rand_param(&mut rng, vec![20]);
        let targets: Vec<f64> = (0..20).map(|_| if rng.uniform() < 0.5 { 0.0 } else { 1.0 }).collect();
        let leaves = [logits.clone()];
        let t2 = targets.clone();
        let err = max_rel_err(&leaves, || {
            let p = sigmoid(&logits);
            mse_loss(&p, &t2).unwrap()
        });
        assert!(err < GRAD_TOL, "mse grad err {err}");
        let t3 = targets.clone();
        let err = max_rel_err(&leaves, || {
            let p = sigmoid(&logits);
            soft_iou_loss(&p, &t3).unwrap()
        });
        assert!(err < GRAD_TOL, "soft_iou grad err {err}");

        let scalar_logit = rand_param(&mut rng, vec![1]);
        let y = if rng.uniform() < 0.5 { 0.0 } else { 1.0 };
        let err = max_rel_err(std::slice::from_ref(&scalar_logit), || {
            let p = reshape(&sigmoid(&scalar_logit), vec![]).unwrap();
            bce_loss(&p, y).unwrap()
        });
        assert!(err < GRAD_TOL, "bce grad err {err}");
    }
}

#[test]
fn backward_simple_products() {
    let x = Tensor::from_vec(vec![3], vec![1.0f64, 2.0, 3.0]).unwrap();
    let w = Tensor::param(vec![3], vec![0.5, 0.5, 0.5]).unwrap();
    let loss = sum(&mul(&w, &x).unwrap());
    loss.backward().unwrap();
    assert_eq!(w.grad().unwrap(), vec![1.0, 2.0, 3.0]);
}

#[test]
fn backward_accumulates_until_zeroed() {
    let w = Tensor::param(vec![2], vec![1.0f64, 2.0]).unwrap();
    let build = || sum(&scale(&w, 3.0));
    build().backward().unwrap();
    build().backward().unwrap();
    assert_eq!(w.grad().unwrap(), vec![6.0, 6.0]);
    w.zero_grad();
    build().backward().unwrap();
    assert_eq!(w.grad().unwrap(), vec![3.0, 3.0]);
}

#[test]
fn backward_sums_shared_subexpressions() {
    let x = Tensor::param(vec![1], vec![5.0f64]).unwrap();
    let y = add(&x, &x).unwrap();
    sum(&y).backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let x = Tensor::param(vec![2], vec![1.0f64, 2.0]).unwrap();
    assert!(scale(&x, 2.0).backward().is_err());
}

#[test]
fn adam_zero_grad_keeps_params() {
    let mut store = ParamStore::new();
    let p = Tensor::param(vec![2], vec![1.0f64, -1.0]).unwrap();
    store.insert("p", p.clone()).unwrap();
    // populate zero grads through a zero-valued loss path
    let loss = sum(&scale(&p, 0.0));
    loss.backward().unwrap();
    let mut opt = Adam::new(0.1);
    opt.step(&store).unwrap();
    assert_eq!(p.to_vec(), vec![1.0, -1.0]);
}

#[test]
fn adam_missing_grad_is_usage_error() {
    let mut store = ParamStore::new();
    store
        .insert("p", Tensor::param(vec![1], vec![0.0f64]).unwrap())
        .unwrap();
    let mut opt = Adam::new(0.1);
    assert!(opt.step(&store).is_err());
}

#[test]
fn adam_first_step_closed_form() {
    let mut store = ParamStore::new();
    let p = Tensor::param(vec![1], vec![2.0f64]).unwrap();
    store.insert("p", p.clone()).unwrap();
    // loss = 3 * p  =>  g = 3
    sum(&scale(&p, 3.0)).backward().unwrap();
    let mut opt = Adam::new(0.001);
    opt.step(&store).unwrap();
    // mhat = g, vhat = g^2  =>  delta = lr * g / (|g| + eps)
    let expected = 2.0 - 0.001 * 3.0 / (3.0 + 1e-8);
    assert!((p.item() - expected).abs() < 1e-12);
}

#[test]
fn adam_converges_on_quadratic() {
    let mut store = ParamStore::new();
    let p = Tensor::param(vec![1], vec![0.0f64]).unwrap();
    store.insert("p", p.clone()).unwrap();
    let mut opt = Adam::new(0.1);
    for _ in 0..200 {
        store.zero_grads();
        let d = add(&p, &Tensor::from_vec(vec![1], vec![-3.0]).unwrap()).unwrap();
        let loss = sum(&mul(&d, &d).unwrap());
        loss.backward().unwrap();
        opt.step(&store).unwrap();
    }
    assert!((p.item() - 3.0).abs() < 0.05, "final p = {}", p.item());
}

#[test]
fn forward_is_deterministic() {
    let mut rng = SplitMix64::new(18);
    let x = rand_param(&mut rng, vec![3, 8]);
    let w = rand_param(&mut rng, vec![2, 3, 3]);
    let b = rand_param(&mut rng, vec![2]);
    let a = conv1d(&x, &w, &b, 1, 1).unwrap().to_vec();
    let bv = conv1d(&x, &w, &b, 1, 1).unwrap().to_vec();
    assert_eq!(a, bv);
}
