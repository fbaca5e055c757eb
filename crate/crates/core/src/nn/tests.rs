use super::*;
use ndarray::{Array4, IxDyn};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn random_tensor(shape: (usize, usize, usize, usize), seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array4::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0f32))
}

/// Scalar probe loss: weighted sum of the output against fixed coefficients.
fn probe_loss(y: &Tensor, r: &Tensor) -> f64 {
    y.iter().zip(r.iter()).map(|(&a, &b)| a as f64 * b as f64).sum()
}

#[test]
fn conv_gradients_match_finite_differences() {
    let mut params = ParamSet::default();
    let mut rng = InitRng::new(1);
    let mut conv = Conv2d::new(&mut params, &mut rng, "c", 2, 3, 3, true);
    let x = random_tensor((2, 2, 5, 5), 10);
    let y = conv.forward(&params, &x);
    let r = random_tensor(y.dim(), 11);

    params.zero_grads();
    let _ = conv.forward(&params, &x);
    let gy = r.clone();
    let gx = conv.backward(&mut params, &gy);

    let step = 1e-3f32;
    // Input gradient.
    for idx in [(0, 0, 0, 0), (1, 1, 2, 3), (0, 1, 4, 4)] {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[idx] += step;
        xm[idx] -= step;
        let fp = probe_loss(&conv.forward(&params, &xp), &r);
        let fm = probe_loss(&conv.forward(&params, &xm), &r);
        let fd = (fp - fm) / (2.0 * step as f64);
        assert!(
            (fd - gx[idx] as f64).abs() < 1e-2 * fd.abs().max(1.0),
            "conv input grad mismatch at {idx:?}: fd={fd}, got={}",
            gx[idx]
        );
    }
    // Weight gradient.
    let wid = conv.weight;
    let g = params.get(wid).grad.clone();
    for flat in [0usize, 7, 20] {
        let orig = params.value(wid).as_slice().unwrap()[flat];
        params.value_mut(wid).as_slice_mut().unwrap()[flat] = orig + step;
        let fp = probe_loss(&conv.forward(&params, &x), &r);
        params.value_mut(wid).as_slice_mut().unwrap()[flat] = orig - step;
        let fm = probe_loss(&conv.forward(&params, &x), &r);
        params.value_mut(wid).as_slice_mut().unwrap()[flat] = orig;
        let fd = (fp - fm) / (2.0 * step as f64);
        let got = g.as_slice().unwrap()[flat] as f64;
        assert!(
            (fd - got).abs() < 1e-2 * fd.abs().max(1.0),
            "conv weight grad mismatch at {flat}: fd={fd}, got={got}"
        );
    }
}

#[test]
fn batchnorm_gradients_match_finite_differences() {
    let mut params = ParamSet::default();
    let mut bn = BatchNorm2d::new(&mut params, "bn", 2);
    let x = random_tensor((3, 2, 4, 4), 20);
    let r = random_tensor((3, 2, 4, 4), 21);

    params.zero_grads();
    let _ = bn.forward(&mut params, &x, true);
    let gx = bn.backward(&mut params, &r);

    // Running stats change on every training forward; snapshot and restore so
    // finite differences probe a fixed function.
    let rm = params.value(bn.running_mean).clone();
    let rv = params.value(bn.running_var).clone();
    let step = 1e-3f32;
    for idx in [(0, 0, 0, 0), (2, 1, 3, 2), (1, 0, 2, 2)] {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[idx] += step;
        xm[idx] -= step;
        *params.value_mut(bn.running_mean) = rm.clone();
        *params.value_mut(bn.running_var) = rv.clone();
        let fp = probe_loss(&bn.forward(&mut params, &xp, true), &r);
        *params.value_mut(bn.running_mean) = rm.clone();
        *params.value_mut(bn.running_var) = rv.clone();
        let fm = probe_loss(&bn.forward(&mut params, &xm, true), &r);
        let fd = (fp - fm) / (2.0 * step as f64);
        assert!(
            (fd - gx[idx] as f64).abs() < 2e-2 * fd.abs().max(1.0),
            "bn input grad mismatch at {idx:?}: fd={fd}, got={}",
            gx[idx]
        );
    }
}

#[test]
fn frozen_batchnorm_uses_running_stats_and_keeps_them() {
    let mut params = ParamSet::default();
    let mut bn = BatchNorm2d::new(&mut params, "bn", 1);
    let x = random_tensor((2, 1, 4, 4), 30);
    let _ = bn.forward(&mut params, &x, true);
    let rm = params.value(bn.running_mean).clone();
    bn.frozen = true;
    let _ = bn.forward(&mut params, &x, true);
    assert_eq!(params.value(bn.running_mean), &rm);
}

#[test]
fn pool_and_upsample_are_adjoint() {
    // <pool(x), r> must equal <x, pool_backward(r)>; same for upsampling.
    let x = random_tensor((1, 2, 6, 6), 40);
    let mut pool = AvgPool2::new();
    let y = pool.forward(&x);
    let r = random_tensor(y.dim(), 41);
    let gx = pool.backward(&r);
    let lhs = probe_loss(&y, &r);
    let rhs = probe_loss(&x, &gx);
    assert!((lhs - rhs).abs() < 1e-4);

    let mut up = UpsampleNearest2;
    let y = up.forward(&x);
    let r = random_tensor(y.dim(), 42);
    let gx = up.backward(&r);
    assert!((probe_loss(&y, &r) - probe_loss(&x, &gx)).abs() < 1e-4);
}

#[test]
fn concat_split_round_trip() {
    let a = random_tensor((2, 3, 4, 4), 50);
    let b = random_tensor((2, 2, 4, 4), 51);
    let mut cat = Concat2::new();
    let y = cat.forward(&a, &b);
    assert_eq!(y.dim(), (2, 5, 4, 4));
    let (ga, gb) = cat.backward(&y);
    assert_eq!(ga, a);
    assert_eq!(gb, b);
}

#[test]
fn activations_bound_outputs() {
    let x = random_tensor((1, 1, 4, 4), 60) * 5.0;
    let mut sig = Sigmoid::new();
    let y = sig.forward(&x);
    assert!(y.iter().all(|&v| v > 0.0 && v < 1.0));
    let mut clamp = ClampUnit::new();
    let y = clamp.forward(&x);
    assert!(y.iter().all(|&v| (0.0..=1.0).contains(&v)));
}

#[test]
fn adam_minimizes_quadratic() {
    let mut params = ParamSet::default();
    let id = params.register("w", ArrayD::from_elem(IxDyn(&[4]), 3.0f32), true);
    let mut adam = Adam::new(&params, 0.05);
    for _ in 0..500 {
        let g = params.value(id).mapv(|v| 2.0 * v);
        *params.grad_mut(id) += &g;
        adam.step(&mut params);
    }
    assert!(params.value(id).iter().all(|&v| v.abs() < 1e-2));
}

#[test]
fn adam_skips_frozen_parameters() {
    let mut params = ParamSet::default();
    let id = params.register("enc.w", ArrayD::from_elem(IxDyn(&[2]), 1.0f32), true);
    let frozen = params.freeze_prefix("enc.");
    assert_eq!(frozen, vec!["enc.w".to_string()]);
    let mut adam = Adam::new(&params, 0.1);
    *params.grad_mut(id) += 5.0;
    adam.step(&mut params);
    assert!(params.value(id).iter().all(|&v| v == 1.0));
}

#[test]
fn init_stream_is_deterministic() {
    let mut a = InitRng::new(26);
    let mut b = InitRng::new(26);
    for _ in 0..100 {
        assert_eq!(a.normal(1.0), b.normal(1.0));
    }
}
