use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tubesal::tensor::gradcheck::{grad_check, random_input, GradCheckOptions};
use tubesal::{Error, Graph, Tensor, Var};

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn eval1(x: Tensor<f64>, f: impl Fn(&mut Graph<f64>, Var) -> Var) -> Tensor<f64> {
    let mut g = Graph::new();
    let v = g.constant(x);
    let out = f(&mut g, v);
    g.value(out).clone()
}

/// erf by its Maclaurin series, independent of libm.
fn erf_series(x: f64) -> f64 {
    let mut term = x;
    let mut sum = x;
    for n in 1..60 {
        term *= -x * x / n as f64;
        sum += term / (2 * n + 1) as f64;
    }
    sum * 2.0 / std::f64::consts::PI.sqrt()
}

#[test]
fn matmul_examples() {
    let mut g = Graph::<f64>::new();
    let id = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let b = g.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
    let ia = g.matmul(id, a).unwrap();
    assert_eq!(g.value(ia).data(), &[1.0, 2.0, 3.0, 4.0]);
    let ab = g.matmul(a, b).unwrap();
    assert_eq!(g.value(ab).data(), &[19.0, 22.0, 43.0, 50.0]);

    let x = g.constant(Tensor::zeros(vec![2, 3]));
    let y = g.constant(Tensor::zeros(vec![4, 5]));
    match g.matmul(x, y) {
        Err(Error::Dimension(msg)) => assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}"),
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn matmul_broadcast_batches() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random_input(&[2, 1, 3, 4], 1.0, &mut rng);
    let b = random_input(&[3, 4, 2], 1.0, &mut rng);
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let c = g.matmul(va, vb).unwrap();
    assert_eq!(g.shape(c), &[2, 3, 3, 2]);
    let c = g.value(c);
    for i in 0..2 {
        for j in 0..3 {
            for r in 0..3 {
                for col in 0..2 {
                    let want: f64 = (0..4).map(|k| a.at(&[i, 0, r, k]) * b.at(&[j, k, col])).sum();
                    assert!((c.at(&[i, j, r, col]) - want).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn softmax_examples() {
    let out = eval1(t(&[3], &[0.7, 0.7, 0.7]), |g, v| g.softmax(v, 0).unwrap());
    for &p in out.data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
    let out = eval1(t(&[2], &[0.0, 2f64.ln()]), |g, v| g.softmax(v, 0).unwrap());
    assert!((out.data()[0] - 1.0 / 3.0).abs() < 1e-15);
    assert!((out.data()[1] - 2.0 / 3.0).abs() < 1e-15);

    let x = t(&[4], &[0.3, -1.2, 2.0, 0.0]);
    let base = eval1(x.clone(), |g, v| g.softmax(v, 0).unwrap());
    let shifted = eval1(x.map(|v| v + 123.0), |g, v| g.softmax(v, 0).unwrap());
    assert!(base.max_abs_diff(&shifted) < 1e-12);

    // no overflow for large logits
    let big = eval1(t(&[2], &[1000.0, 1000.0]), |g, v| g.softmax(v, 0).unwrap());
    assert_eq!(big.data(), &[0.5, 0.5]);
}

fn layer_norm_eval(x: Tensor<f64>, gamma: f64, beta: f64) -> Tensor<f64> {
    let len = *x.shape().last().unwrap();
    let axis = x.rank() - 1;
    let mut g = Graph::new();
    let v = g.constant(x);
    let ga = g.constant(Tensor::full(vec![len], gamma));
    let be = g.constant(Tensor::full(vec![len], beta));
    let y = g.layer_norm(v, ga, be, axis, 1e-5).unwrap();
    g.value(y).clone()
}

#[test]
fn layer_norm_examples() {
    let out = layer_norm_eval(t(&[4], &[2.5; 4]), 1.0, 0.0);
    assert!(out.data().iter().all(|&v| v == 0.0));

    let out = layer_norm_eval(t(&[2], &[1.0, 3.0]), 1.0, 0.0);
    let scale = 1.0 / (1.0f64 + 1e-5).sqrt();
    assert!((out.data()[0] + scale).abs() < 1e-12);
    assert!((out.data()[1] - scale).abs() < 1e-12);

    let out = layer_norm_eval(t(&[3], &[0.1, -4.0, 9.0]), 0.0, 0.75);
    assert!(out.data().iter().all(|&v| v == 0.75));
}

#[test]
fn layer_norm_rejects_wrong_affine_extent() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(vec![2, 3]));
    let ga = g.constant(Tensor::ones(vec![2]));
    let be = g.constant(Tensor::zeros(vec![3]));
    assert!(matches!(g.layer_norm(x, ga, be, 1, 1e-5), Err(Error::Dimension(_))));
}

#[test]
fn gelu_examples() {
    let out = eval1(t(&[3], &[0.0, 1.0, 10.0]), |g, v| g.gelu(v));
    assert_eq!(out.data()[0], 0.0);
    let phi1 = 0.5 * (1.0 + erf_series(1.0 / 2f64.sqrt()));
    assert!((out.data()[1] - phi1).abs() < 1e-12);
    assert!((out.data()[1] - 0.841345).abs() < 5e-7);
    assert!((out.data()[2] - 10.0).abs() < 1e-6);
}

#[test]
fn gelu_monotone_nondecreasing_on_grid() {
    // Exact GELU dips below zero on (-inf, ~-0.75); monotonicity holds on its
    // increasing branch.
    let xs: Vec<f64> = (0..=400).map(|i| -0.75 + i as f64 * 0.02).collect();
    let out = eval1(t(&[xs.len()], &xs), |g, v| g.gelu(v));
    assert!(out.data().windows(2).all(|w| w[1] >= w[0]));
}

#[test]
fn conv2d_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random_input(&[1, 1, 5, 4], 1.0, &mut rng);
    let mut delta = Tensor::<f64>::zeros(vec![1, 1, 3, 3]);
    delta.set(&[0, 0, 1, 1], 1.0);
    let mut g = Graph::new();
    let (vx, vk) = (g.constant(x.clone()), g.constant(delta));
    let b = g.constant(Tensor::zeros(vec![1]));
    let y = g.conv2d(vx, vk, Some(b)).unwrap();
    assert_eq!(g.value(y), &x);

    let ones = g.constant(Tensor::ones(vec![1, 1, 4, 4]));
    let k = g.constant(Tensor::ones(vec![1, 1, 3, 3]));
    let y = g.conv2d(ones, k, None).unwrap();
    let y = g.value(y);
    assert_eq!(y.at(&[0, 0, 1, 2]), 9.0);
    assert_eq!(y.at(&[0, 0, 0, 0]), 4.0);
    assert_eq!(y.at(&[0, 0, 0, 2]), 6.0);
    assert_eq!(y.shape(), &[1, 1, 4, 4]);

    let wrong = g.constant(Tensor::ones(vec![1, 2, 3, 3]));
    assert!(matches!(g.conv2d(ones, wrong, None), Err(Error::Dimension(_))));
}

fn bce(z: &[f64], targets: &[f64]) -> Result<f64, Error> {
    let mut g = Graph::new();
    let v = g.constant(t(&[z.len()], z));
    let l = g.sigmoid_bce(v, &t(&[targets.len()], targets))?;
    Ok(g.value(l).item())
}

#[test]
fn sigmoid_bce_examples() {
    assert!((bce(&[0.0], &[1.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
    assert!(bce(&[40.0], &[1.0]).unwrap() < 1e-9);
    let z = [0.3, -2.0, 5.5, 0.0];
    let tt = [0.0, 0.25, 1.0, 0.6];
    let flipped_z: Vec<f64> = z.iter().map(|v| -v).collect();
    let flipped_t: Vec<f64> = tt.iter().map(|v| 1.0 - v).collect();
    let a = bce(&z, &tt).unwrap();
    assert!(a >= 0.0);
    assert!((a - bce(&flipped_z, &flipped_t).unwrap()).abs() < 1e-15);
    assert!(matches!(bce(&[0.0], &[1.5]), Err(Error::Domain(_))));
    assert!(matches!(bce(&[0.0], &[-0.1]), Err(Error::Domain(_))));
}

// ---- finite-difference gradient checks -------------------------------------

const SEEDS: u64 = 10;

fn check(
    name: &str,
    shapes: &[&[usize]],
    tolerance: f64,
    op: impl Fn(&mut Graph<f64>, &[Var]) -> tubesal::Result<Var>,
) {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + 1);
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| random_input(s, 1.5, &mut rng)).collect();
        let opts = GradCheckOptions {
            seed,
            ..Default::default()
        };
        let report = grad_check(&op, &inputs, &opts).unwrap();
        assert!(
            report.passes(tolerance),
            "{name} seed {seed}: max rel error {} at {:?}",
            report.max_rel_error,
            report.worst
        );
    }
}

#[test]
fn grad_matmul() {
    check("matmul", &[&[3, 4], &[4, 2]], 1e-7, |g, v| g.matmul(v[0], v[1]));
    check("matmul batched", &[&[2, 3, 4], &[4, 5]], 1e-7, |g, v| g.matmul(v[0], v[1]));
    check("matmul broadcast", &[&[2, 1, 3, 4], &[3, 4, 2]], 1e-7, |g, v| g.matmul(v[0], v[1]));
}

#[test]
fn grad_elementwise() {
    check("add", &[&[2, 3], &[2, 3]], 1e-4, |g, v| g.add(v[0], v[1]));
    check("add suffix", &[&[2, 3, 4], &[4]], 1e-4, |g, v| g.add(v[0], v[1]));
    check("add prefix-broadcast lhs", &[&[3, 4], &[2, 3, 4]], 1e-4, |g, v| g.add(v[0], v[1]));
    check("mul", &[&[2, 3], &[2, 3]], 1e-4, |g, v| g.mul(v[0], v[1]));
    check("mul suffix", &[&[2, 3, 4], &[3, 4]], 1e-4, |g, v| g.mul(v[0], v[1]));
    check("mul lhs suffix", &[&[4], &[3, 4]], 1e-4, |g, v| g.mul(v[0], v[1]));
    check("scale", &[&[5]], 1e-4, |g, v| Ok(g.scale(v[0], -2.5)));
    check("sum", &[&[2, 3]], 1e-4, |g, v| Ok(g.sum(v[0])));
    check("mean", &[&[2, 3]], 1e-4, |g, v| Ok(g.mean(v[0])));
}

#[test]
fn grad_layout_ops() {
    check("permute", &[&[2, 3, 4]], 1e-4, |g, v| g.permute(v[0], &[2, 0, 1]));
    check("reshape", &[&[2, 3, 4]], 1e-4, |g, v| g.reshape(v[0], &[6, 4]));
    check("narrow", &[&[3, 5, 2]], 1e-4, |g, v| g.narrow(v[0], 1, 1, 3));
}

#[test]
fn grad_nonlinear() {
    check("gelu", &[&[4, 5]], 1e-5, |g, v| Ok(g.gelu(v[0])));
    check("sigmoid", &[&[4, 5]], 1e-4, |g, v| Ok(g.sigmoid(v[0])));
    check("softmax last", &[&[3, 5]], 1e-4, |g, v| g.softmax(v[0], 1));
    check("softmax first", &[&[3, 5]], 1e-4, |g, v| g.softmax(v[0], 0));
}

#[test]
fn grad_layer_norm() {
    check("layer_norm last", &[&[3, 6], &[6], &[6]], 1e-4, |g, v| {
        g.layer_norm(v[0], v[1], v[2], 1, 1e-5)
    });
    check("layer_norm middle", &[&[2, 4, 3], &[4], &[4]], 1e-4, |g, v| {
        g.layer_norm(v[0], v[1], v[2], 1, 1e-5)
    });
}

#[test]
fn grad_conv2d() {
    check("conv2d", &[&[2, 2, 5, 4], &[3, 2, 3, 3], &[3]], 1e-4, |g, v| {
        g.conv2d(v[0], v[1], Some(v[2]))
    });
}

#[test]
fn grad_sigmoid_bce() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let targets = Tensor::<f64>::rand_uniform(vec![3, 4], 0.0, 1.0, &mut rng);
        let z = random_input(&[3, 4], 3.0, &mut rng);
        let report = grad_check(
            |g, v| g.sigmoid_bce(v[0], &targets),
            &[z],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passes(1e-4), "seed {seed}: {report:?}");
    }
}

#[test]
fn grad_check_reports_nonfinite() {
    let x = t(&[2], &[1.0, 2.0]);
    let res = grad_check(
        |g, v| {
            let big = g.scale(v[0], 1e308);
            Ok(g.scale(big, 1e308))
        },
        &[x],
        &GradCheckOptions::default(),
    );
    assert!(matches!(res, Err(Error::NonFinite(_))));
}

#[test]
fn backward_requires_scalar() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::ones(vec![2]));
    assert!(g.backward(x).is_err());
}

#[test]
fn gradients_accumulate_over_shared_use() {
    let mut g = Graph::<f64>::new();
    let x = g.param(t(&[2], &[1.0, -3.0]));
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2.0, -6.0]);
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(vals in proptest::collection::vec(-30.0f64..30.0, 12)) {
        let out = eval1(t(&[3, 4], &vals), |g, v| g.softmax(v, 1).unwrap());
        for row in out.data().chunks(4) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_standardizes(vals in proptest::collection::vec(-50.0f64..50.0, 8), spread in 1.0f64..20.0) {
        // guarantee variance well above eps
        let mut x: Vec<f64> = vals;
        x[0] = -spread;
        x[1] = spread;
        let out = layer_norm_eval(t(&[8], &x), 1.0, 0.0);
        let mean = out.data().iter().sum::<f64>() / 8.0;
        let var = out.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        prop_assert!(mean.abs() < 1e-7);
        prop_assert!((var - 1.0).abs() < 1e-4);
    }
}
