use proptest::prelude::*;

use super::*;
use crate::gradcheck::{check_gradients, DEFAULT_STEP};
use crate::rng::stream;

fn t(data: &[f64], shape: &[usize]) -> Tensor {
    Tensor::new(data.to_vec(), shape).unwrap()
}

fn p(data: &[f64], shape: &[usize]) -> Tensor {
    Tensor::parameter(data.to_vec(), shape).unwrap()
}

fn uniform(n: usize, lo: f64, hi: f64, seed: u64) -> Vec<f64> {
    use rand::Rng;
    let mut rng = stream(seed, 0);
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

#[test]
fn add_vectors() {
    let out = t(&[1.0, 2.0], &[2]).add(&t(&[3.0, 4.0], &[2])).unwrap();
    assert_eq!(out.data(), &[4.0, 6.0]);
}

#[test]
fn exp_inverts_log() {
    let x = t(&[0.3, 1.0, 7.5], &[3]);
    let back = x.log().unwrap().exp();
    for (a, b) in back.data().iter().zip(x.data()) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn square_derivative_at_three() {
    let x = p(&[3.0], &[]);
    x.mul(&x).unwrap().sum().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![6.0]);
}

#[test]
fn shape_mismatch_names_both_shapes() {
    let err = t(&[1.0, 2.0, 3.0], &[3]).add(&t(&[1.0, 2.0], &[2])).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[3]") && msg.contains("[2]"), "{msg}");
}

#[test]
fn log_of_negative_is_domain_error() {
    assert!(matches!(t(&[-1.0], &[1]).log(), Err(Error::Domain { .. })));
    assert!(matches!(t(&[-1.0], &[1]).sqrt(), Err(Error::Domain { .. })));
}

#[test]
fn log_clamps_zero() {
    let y = t(&[0.0], &[1]).log().unwrap();
    assert_eq!(y.item(), CLAMP_MIN.ln());
}

#[test]
fn division_by_zero_is_clamped() {
    let y = t(&[1.0], &[1]).div(&t(&[0.0], &[1])).unwrap();
    assert!(y.all_finite());
}

#[test]
fn matmul_identity() {
    let eye = t(&[1.0, 0.0, 0.0, 1.0], &[2, 2]);
    let m = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
    assert_eq!(eye.matmul(&m).unwrap().data(), m.data());
    assert!(m.matmul(&m).is_err());
}

#[test]
fn unit_kernel_conv_is_identity() {
    let x = t(&uniform(16, -1.0, 1.0, 1), &[1, 1, 4, 4]);
    let k = t(&[1.0], &[1, 1, 1, 1]);
    let y = x.conv2d(&k, None, 1, 0).unwrap();
    assert_eq!(y.shape(), x.shape());
    assert_eq!(y.data(), x.data());
}

#[test]
fn conv_output_size() {
    let x = Tensor::zeros(&[2, 3, 9, 7]);
    let k = Tensor::zeros(&[4, 3, 3, 3]);
    let y = x.conv2d(&k, None, 2, 1).unwrap();
    assert_eq!(y.shape(), &[2, 4, (9 + 2 - 3) / 2 + 1, (7 + 2 - 3) / 2 + 1]);
    let too_big = Tensor::zeros(&[1, 3, 5, 5]);
    assert!(Tensor::zeros(&[1, 3, 2, 2]).conv2d(&too_big, None, 1, 1).is_err());
}

#[test]
fn conv_matches_direct_loops() {
    let x = t(&uniform(2 * 2 * 5 * 5, -1.0, 1.0, 2), &[2, 2, 5, 5]);
    let k = t(&uniform(3 * 2 * 3 * 3, -1.0, 1.0, 3), &[3, 2, 3, 3]);
    let b = t(&[0.1, -0.2, 0.3], &[3]);
    let y = x.conv2d(&k, Some(&b), 2, 1).unwrap();
    let (hout, wout) = (3, 3);
    for n in 0..2 {
        for co in 0..3 {
            for oy in 0..hout {
                for ox in 0..wout {
                    let mut acc = b.data()[co];
                    for ci in 0..2 {
                        for ki in 0..3 {
                            for kj in 0..3 {
                                let iy = (oy * 2 + ki) as isize - 1;
                                let ix = (ox * 2 + kj) as isize - 1;
                                if (0..5).contains(&iy) && (0..5).contains(&ix) {
                                    acc += x.data()[((n * 2 + ci) * 5 + iy as usize) * 5 + ix as usize]
                                        * k.data()[((co * 2 + ci) * 3 + ki) * 3 + kj];
                                }
                            }
                        }
                    }
                    let got = y.data()[((n * 3 + co) * hout + oy) * wout + ox];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn mean_of_three() {
    assert_eq!(t(&[2.0, 4.0, 6.0], &[3]).mean().item(), 4.0);
}

#[test]
fn sum_gradient_is_ones() {
    let x = p(&[0.5, -1.0, 2.0], &[3]);
    x.sum().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
}

#[test]
fn sigmoid_bce_at_zero_logit() {
    let x = p(&[0.0], &[1]);
    let y = t(&[1.0], &[1]);
    x.bce_after(&y, Activation::Sigmoid).unwrap().backward().unwrap();
    assert!((x.grad().unwrap()[0] + 0.5).abs() < 1e-15);

    let x2 = p(&[0.0], &[1]);
    x2.sigmoid().bce(&y).unwrap().backward().unwrap();
    assert!((x2.grad().unwrap()[0] + 0.5).abs() < 1e-12);
}

#[test]
fn non_scalar_backward_is_error() {
    let x = p(&[1.0, 2.0], &[2]);
    assert!(matches!(x.square().backward(), Err(Error::NonScalarLoss(_))));
}

#[test]
fn gradients_accumulate_until_zeroed() {
    let x = p(&[2.0], &[1]);
    x.square().sum().backward().unwrap();
    x.square().sum().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![8.0]);
    x.zero_grad();
    assert!(x.grad().is_none());
}

#[test]
fn stop_gradient_keeps_value_and_blocks_gradient() {
    let x = p(&[3.0], &[]);
    let frozen = x.stop_gradient();
    assert_eq!(frozen.data(), x.data());
    assert!(!frozen.requires_grad());
    x.mul(&frozen).unwrap().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![3.0]);
}

#[test]
fn stop_gradient_only_path_gives_no_grad() {
    let x = p(&[3.0], &[]);
    let y = x.stop_gradient().square().add(&x.mul_scalar(0.0)).unwrap();
    y.backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![0.0]);
}

#[test]
fn broadcast_gradient_sums_over_axes() {
    let a = p(&uniform(6, -1.0, 1.0, 4), &[2, 3]);
    let b = p(&[1.0, 2.0, 3.0], &[3]);
    a.mul(&b).unwrap().sum().backward().unwrap();
    let gb = b.grad().unwrap();
    assert_eq!(gb.len(), 3);
    for j in 0..3 {
        let expect = a.data()[j] + a.data()[3 + j];
        assert!((gb[j] - expect).abs() < 1e-15);
    }
}

#[test]
fn upsample_then_pool_round_trips_exactly() {
    let x = t(&uniform(2 * 8 * 8, -3.0, 3.0, 5), &[1, 2, 8, 8]);
    let back = x.upsample_nearest(4).unwrap().avg_pool2d(4).unwrap();
    assert_eq!(back.data(), x.data());
}

#[test]
fn softmax_rows_sum_to_one() {
    let x = t(&uniform(2 * 3 * 4, -5.0, 5.0, 6), &[2, 3, 4]);
    let s = x.softmax(1).unwrap();
    for o in 0..2 {
        for i in 0..4 {
            let total: f64 = (0..3).map(|k| s.data()[(o * 3 + k) * 4 + i]).sum();
            assert!((total - 1.0).abs() < 1e-14);
        }
    }
}

#[test]
fn narrow_and_concat_are_inverse() {
    let x = t(&uniform(2 * 4 * 3, -1.0, 1.0, 7), &[2, 4, 3]);
    let lo = x.narrow(1, 0, 1).unwrap();
    let hi = x.narrow(1, 1, 3).unwrap();
    assert_eq!(Tensor::concat(&[lo, hi], 1).unwrap().data(), x.data());
}

#[test]
fn backward_is_bit_deterministic() {
    let run = || {
        let x = p(&uniform(2 * 2 * 4 * 4, -2.0, 2.0, 8), &[2, 2, 4, 4]);
        let k = p(&uniform(3 * 2 * 3 * 3, -2.0, 2.0, 9), &[3, 2, 3, 3]);
        let y = x.conv2d(&k, None, 1, 1).unwrap().silu().softmax(1).unwrap().log().unwrap().mean();
        y.backward().unwrap();
        (x.grad().unwrap(), k.grad().unwrap())
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
}

type Op = fn(&[Tensor]) -> Result<Tensor>;

/// Every differentiable op against central differences on inputs in [-2, 2].
#[test]
fn every_op_matches_finite_differences() {
    let cases: Vec<(&str, Vec<Vec<usize>>, Op)> = vec![
        ("add", vec![vec![2, 3], vec![3]], |v| Ok(v[0].add(&v[1])?.square().sum())),
        ("sub", vec![vec![2, 3], vec![2, 1]], |v| Ok(v[0].sub(&v[1])?.square().sum())),
        ("mul", vec![vec![2, 3], vec![2, 3]], |v| Ok(v[0].mul(&v[1])?.sum())),
        ("div", vec![vec![4], vec![4]], |v| Ok(v[0].div(&v[1].square().add_scalar(1.0))?.sum())),
        ("pow", vec![vec![4]], |v| Ok(v[0].square().add_scalar(0.3).pow(1.7)?.sum())),
        ("exp", vec![vec![4]], |v| Ok(v[0].exp().sum())),
        ("log", vec![vec![4]], |v| Ok(v[0].square().add_scalar(0.5).log()?.sum())),
        ("sqrt", vec![vec![4]], |v| Ok(v[0].square().add_scalar(0.5).sqrt()?.sum())),
        ("sigmoid", vec![vec![4]], |v| Ok(v[0].sigmoid().square().sum())),
        ("silu", vec![vec![4]], |v| Ok(v[0].silu().square().sum())),
        ("tanh", vec![vec![4]], |v| Ok(v[0].tanh().square().sum())),
        ("softplus", vec![vec![4]], |v| Ok(v[0].softplus().square().sum())),
        ("log1mexp", vec![vec![4]], |v| Ok(v[0].square().add_scalar(0.1).neg().log1mexp().sum())),
        ("matmul", vec![vec![2, 3], vec![3, 4]], |v| Ok(v[0].matmul(&v[1])?.square().mean())),
        ("conv2d", vec![vec![2, 2, 5, 5], vec![3, 2, 3, 3], vec![3]], |v| {
            Ok(v[0].conv2d(&v[1], Some(&v[2]), 2, 1)?.square().mean())
        }),
        ("upsample", vec![vec![1, 2, 2, 2]], |v| Ok(v[0].upsample_nearest(2)?.square().sum())),
        ("avg_pool", vec![vec![1, 2, 4, 4]], |v| Ok(v[0].avg_pool2d(2)?.square().sum())),
        ("softmax", vec![vec![2, 3, 2]], |v| Ok(v[0].softmax(1)?.square().sum())),
        ("log_softmax", vec![vec![2, 3, 2]], |v| Ok(v[0].log_softmax(1)?.square().sum())),
        ("sum_axis", vec![vec![2, 3, 2]], |v| Ok(v[0].sum_axis(1, false)?.square().sum())),
        ("reshape", vec![vec![2, 3]], |v| Ok(v[0].reshape(&[3, 2])?.matmul(&v[0])?.sum())),
        ("concat", vec![vec![2, 2], vec![2, 1]], |v| Ok(Tensor::concat(&[v[0].clone(), v[1].clone()], 1)?.square().sum())),
        ("narrow", vec![vec![2, 4]], |v| Ok(v[0].narrow(1, 1, 2)?.square().sum())),
        ("mse", vec![vec![3], vec![3]], |v| v[0].mse(&v[1])),
        ("bce", vec![vec![3], vec![3]], |v| v[0].sigmoid().bce(&v[1].sigmoid())),
        ("bce_sigmoid", vec![vec![3], vec![3]], |v| v[0].bce_after(&v[1].sigmoid(), Activation::Sigmoid)),
        ("bce_softmax", vec![vec![2, 3], vec![2, 3]], |v| v[0].bce_after(&v[1].softmax(1)?, Activation::Softmax)),
        ("cross_entropy", vec![vec![2, 3], vec![2, 3]], |v| v[0].cross_entropy(&v[1].softmax(1)?)),
    ];
    for (i, (name, shapes, f)) in cases.into_iter().enumerate() {
        let inputs: Vec<Tensor> = shapes
            .iter()
            .enumerate()
            .map(|(j, s)| t(&uniform(numel(s), -2.0, 2.0, 100 + 10 * i as u64 + j as u64), s))
            .collect();
        let report = check_gradients(&inputs, f, DEFAULT_STEP).unwrap();
        assert!(report.passes(1e-4), "{name}: max rel error {} at {}", report.max_rel_error, report.worst_index);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn broadcast_grad_has_source_shape(rows in 1usize..4, cols in 1usize..4, seed in 0u64..1000) {
        let a = p(&uniform(rows * cols, -2.0, 2.0, seed), &[rows, cols]);
        let b = p(&uniform(cols, -2.0, 2.0, seed + 1), &[1, cols]);
        let loss = a.mul(&b).unwrap().square().sum();
        loss.backward().unwrap();
        prop_assert_eq!(b.grad().unwrap().len(), cols);
        let report = check_gradients(
            &[a.clone(), b.clone()],
            |v| Ok(v[0].mul(&v[1])?.square().sum()),
            DEFAULT_STEP,
        ).unwrap();
        prop_assert!(report.passes(1e-4));
    }
}
