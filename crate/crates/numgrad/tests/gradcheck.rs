//! Finite-difference oracle over every kernel, on random inputs.

use numgrad::{
    check_gradients, step_adagrad, step_adam, AdagradState, AdamState, ComputeGraph, Kernel,
    NodeId, ParamStore, Tensor, DEFAULT_STEP, DEFAULT_TOLERANCE,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

/// Reduce any node to a scalar through a fixed random quadratic so every
/// kernel output entry influences the loss.
fn reduce_to_scalar(g: &mut ComputeGraph, rng: &mut ChaCha8Rng, id: NodeId) -> NodeId {
    let shape = g.value(id).shape().to_vec();
    let target = g.constant(random_tensor(rng, &shape)).unwrap();
    let mask_data: Vec<f64> = (0..g.value(id).len())
        .map(|_| rng.gen_range(0.5..1.5))
        .collect();
    let mask = g
        .constant(Tensor::from_vec(shape, mask_data).unwrap())
        .unwrap();
    g.apply(Kernel::SquaredDistanceMasked, &[id, target, mask])
        .unwrap()
}

fn assert_all_kernel_grads(seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // linear: matrix-vector and matrix-matrix
    for x_shape in [vec![4], vec![3, 4]] {
        let mut store = ParamStore::new();
        store.insert("w", random_tensor(&mut rng, &[2, 4]));
        store.insert("x", random_tensor(&mut rng, &x_shape));
        let mut g = ComputeGraph::new();
        let w = g.param("w", &store).unwrap();
        let x = g.param("x", &store).unwrap();
        let y = g.apply(Kernel::Linear, &[w, x]).unwrap();
        let loss = reduce_to_scalar(&mut g, &mut rng, y);
        g.set_loss(loss).unwrap();
        let report = check_gradients(&mut g, &mut store, DEFAULT_STEP, DEFAULT_TOLERANCE).unwrap();
        assert!(report.all_passed(), "linear {x_shape:?}: {:?}", report.entries);
    }

    // batch-normalize, training (batch statistics) and inference (running)
    for training in [true, false] {
        let mut store = ParamStore::new();
        store.insert("x", random_tensor(&mut rng, &[5, 3]));
        store.insert("scale", random_tensor(&mut rng, &[3]));
        store.insert("shift", random_tensor(&mut rng, &[3]));
        let mut g = ComputeGraph::new();
        let x = g.param("x", &store).unwrap();
        let scale = g.param("scale", &store).unwrap();
        let shift = g.param("shift", &store).unwrap();
        let rmean = g.constant(Tensor::vector(&[0.1, -0.2, 0.3])).unwrap();
        let rvar = g.constant(Tensor::vector(&[1.1, 0.9, 1.4])).unwrap();
        let y = g
            .apply(
                Kernel::BatchNorm {
                    training,
                    eps: 1e-5,
                },
                &[x, scale, shift, rmean, rvar],
            )
            .unwrap();
        let loss = reduce_to_scalar(&mut g, &mut rng, y);
        g.set_loss(loss).unwrap();
        let report = check_gradients(&mut g, &mut store, DEFAULT_STEP, DEFAULT_TOLERANCE).unwrap();
        assert!(
            report.all_passed(),
            "batch-norm training={training}: {:?}",
            report.entries
        );
    }

    // dropout with a fixed mask
    {
        let mut store = ParamStore::new();
        store.insert("x", random_tensor(&mut rng, &[2, 3]));
        let mut g = ComputeGraph::new();
        let x = g.param("x", &store).unwrap();
        let mask_data: Vec<f64> = (0..6)
            .map(|_| if rng.gen_bool(0.7) { 1.0 / 0.7 } else { 0.0 })
            .collect();
        let mask = g
            .constant(Tensor::matrix(2, 3, mask_data).unwrap())
            .unwrap();
        let y = g
            .apply(
                Kernel::Dropout {
                    keep: 0.7,
                    training: true,
                },
                &[x, mask],
            )
            .unwrap();
        let loss = reduce_to_scalar(&mut g, &mut rng, y);
        g.set_loss(loss).unwrap();
        let report = check_gradients(&mut g, &mut store, DEFAULT_STEP, DEFAULT_TOLERANCE).unwrap();
        assert!(report.all_passed(), "dropout: {:?}", report.entries);
    }

    // single-input elementwise / row kernels
    let unary: Vec<(Kernel, Vec<usize>)> = vec![
        (Kernel::SoftmaxRow, vec![3, 4]),
        (Kernel::SoftmaxRow, vec![5]),
        (Kernel::Sigmoid, vec![2, 3]),
        (Kernel::MeanRows, vec![4, 3]),
        (Kernel::Hinge { margin: 0.2 }, vec![6]),
        (Kernel::RowSums, vec![3, 4]),
        (Kernel::Reshape { shape: vec![6] }, vec![2, 3]),
        (
            Kernel::GatherRows {
                indices: vec![2, 0, 2, 1],
            },
            vec![3, 4],
        ),
    ];
    for (kernel, shape) in unary {
        let mut store = ParamStore::new();
        store.insert("x", random_tensor(&mut rng, &shape));
        let mut g = ComputeGraph::new();
        let x = g.param("x", &store).unwrap();
        let y = g.apply(kernel.clone(), &[x]).unwrap();
        let loss = reduce_to_scalar(&mut g, &mut rng, y);
        g.set_loss(loss).unwrap();
        let report = check_gradients(&mut g, &mut store, DEFAULT_STEP, DEFAULT_TOLERANCE).unwrap();
        assert!(
            report.all_passed(),
            "{} {shape:?}: {:?}",
            kernel.name(),
            report.entries
        );
    }

    // weighted-sum-rows
    {
        let mut store = ParamStore::new();
        store.insert("w", random_tensor(&mut rng, &[4]));
        store.insert("x", random_tensor(&mut rng, &[4, 3]));
        let mut g = ComputeGraph::new();
        let w = g.param("w", &store).unwrap();
        let x = g.param("x", &store).unwrap();
        let y = g.apply(Kernel::WeightedSumRows, &[w, x]).unwrap();
        let loss = reduce_to_scalar(&mut g, &mut rng, y);
        g.set_loss(loss).unwrap();
        let report = check_gradients(&mut g, &mut store, DEFAULT_STEP, DEFAULT_TOLERANCE).unwrap();
        assert!(report.all_passed(), "weighted-sum-rows: {:?}", report.entries);
    }

    // squared-distance-masked directly as the loss, all three inputs live
    {
        let mut store = ParamStore::new();
        store.insert("x", random_tensor(&mut rng, &[5]));
        store.insert("y", random_tensor(&mut rng, &[5]));
        store.insert("m", random_tensor(&mut rng, &[5]));
        let mut g = ComputeGraph::new();
        let x = g.param("x", &store).unwrap();
        let y = g.param("y", &store).unwrap();
        let m = g.param("m", &store).unwrap();
        let d = g.apply(Kernel::SquaredDistanceMasked, &[x, y, m]).unwrap();
        g.set_loss(d).unwrap();
        let report = check_gradients(&mut g, &mut store, DEFAULT_STEP, DEFAULT_TOLERANCE).unwrap();
        assert!(report.all_passed(), "sdm: {:?}", report.entries);
    }

    // mul and scalar-weighted-sum
    {
        let mut store = ParamStore::new();
        store.insert("a", random_tensor(&mut rng, &[2, 3]));
        store.insert("b", random_tensor(&mut rng, &[2, 3]));
        store.insert("c", random_tensor(&mut rng, &[2, 3]));
        let mut g = ComputeGraph::new();
        let a = g.param("a", &store).unwrap();
        let b = g.param("b", &store).unwrap();
        let c = g.param("c", &store).unwrap();
        let prod = g.apply(Kernel::Mul, &[a, b]).unwrap();
        let combo = g
            .apply(
                Kernel::ScalarWeightedSum {
                    coeffs: vec![0.5, -2.0],
                },
                &[prod, c],
            )
            .unwrap();
        let loss = reduce_to_scalar(&mut g, &mut rng, combo);
        g.set_loss(loss).unwrap();
        let report = check_gradients(&mut g, &mut store, DEFAULT_STEP, DEFAULT_TOLERANCE).unwrap();
        assert!(report.all_passed(), "mul+sws: {:?}", report.entries);
    }

    // sigmoid cross-entropy
    {
        let mut store = ParamStore::new();
        store.insert("logits", random_tensor(&mut rng, &[7]));
        let mut g = ComputeGraph::new();
        let logits = g.param("logits", &store).unwrap();
        let targets_data: Vec<f64> = (0..7).map(|_| f64::from(rng.gen_bool(0.4))).collect();
        let targets = g.constant(Tensor::vector(&targets_data)).unwrap();
        let loss = g
            .apply(Kernel::SigmoidCrossEntropy, &[logits, targets])
            .unwrap();
        g.set_loss(loss).unwrap();
        let report = check_gradients(&mut g, &mut store, DEFAULT_STEP, DEFAULT_TOLERANCE).unwrap();
        assert!(report.all_passed(), "sigmoid-xent: {:?}", report.entries);
    }
}

#[test]
fn every_kernel_matches_finite_differences() {
    for seed in [1, 2, 3] {
        assert_all_kernel_grads(seed);
    }
}

#[test]
fn corrupted_gradient_flags_exactly_that_parameter() {
    // Build a two-parameter loss, then compare a doctored analytic gradient
    // against the finite-difference probe by hand.
    let mut store = ParamStore::new();
    store.insert("u", Tensor::vector(&[0.4, -0.3]));
    store.insert("v", Tensor::vector(&[1.2, 0.1]));
    let mut g = ComputeGraph::new();
    let u = g.param("u", &store).unwrap();
    let v = g.param("v", &store).unwrap();
    let m = g.constant(Tensor::vector(&[1.0, 1.0])).unwrap();
    let d = g.apply(Kernel::SquaredDistanceMasked, &[u, v, m]).unwrap();
    g.set_loss(d).unwrap();

    let mut analytic = g.backward().unwrap();
    // corrupt one entry of u's gradient (×2)
    analytic.get_mut("u").unwrap().data_mut()[0] *= 2.0;

    let eps = 1e-5;
    let mut flagged = Vec::new();
    for name in ["u", "v"] {
        let mut worst = 0.0_f64;
        for i in 0..2 {
            let orig = store.get(name).unwrap().data()[i];
            store.get_mut(name).unwrap().data_mut()[i] = orig + eps;
            g.reeval(&store).unwrap();
            let plus = g.loss_value().unwrap();
            store.get_mut(name).unwrap().data_mut()[i] = orig - eps;
            g.reeval(&store).unwrap();
            let minus = g.loss_value().unwrap();
            store.get_mut(name).unwrap().data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[name].data()[i];
            let err = (a - numeric).abs() / 1.0_f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
        if worst > 1e-4 {
            flagged.push(name);
        }
    }
    assert_eq!(flagged, vec!["u"]);
}

#[test]
fn graph_evaluation_is_deterministic() {
    let build = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut store = ParamStore::new();
        store.insert("w", random_tensor(&mut rng, &[3, 4]));
        let mut g = ComputeGraph::new();
        let w = g.param("w", &store).unwrap();
        let x = g.constant(random_tensor(&mut rng, &[4])).unwrap();
        let y = g.apply(Kernel::Linear, &[w, x]).unwrap();
        let s = g.apply(Kernel::SoftmaxRow, &[y]).unwrap();
        let loss = reduce_to_scalar(&mut g, &mut rng, s);
        g.set_loss(loss).unwrap();
        g.loss_value().unwrap()
    };
    assert_eq!(build().to_bits(), build().to_bits());
}

#[test]
fn dropout_training_expectation_matches_identity() {
    // Monte-Carlo over masks: mean of dropped activations approaches the
    // raw input within 3 standard errors.
    let keep = 0.7;
    let x_val = 1.25;
    let n = 20_000;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut sum = 0.0;
    for _ in 0..n {
        let mut g = ComputeGraph::new();
        let x = g.constant(Tensor::vector(&[x_val])).unwrap();
        let m = if rng.gen_bool(keep) { 1.0 / keep } else { 0.0 };
        let mask = g.constant(Tensor::vector(&[m])).unwrap();
        let y = g
            .apply(
                Kernel::Dropout {
                    keep,
                    training: true,
                },
                &[x, mask],
            )
            .unwrap();
        sum += g.value(y).data()[0];
    }
    let mean = sum / n as f64;
    // per-sample variance of x·m: x²(1/keep − 1)
    let sigma = (x_val * x_val * (1.0 / keep - 1.0) / n as f64).sqrt();
    assert!(
        (mean - x_val).abs() < 3.0 * sigma,
        "mean={mean} expected={x_val} sigma={sigma}"
    );
}

#[test]
fn optimizers_apply_only_given_gradients() {
    let mut store = ParamStore::new();
    store.insert("train_me", Tensor::scalar(1.0));
    store.insert("frozen", Tensor::scalar(5.0));
    let mut grads = BTreeMap::new();
    grads.insert("train_me".to_string(), Tensor::scalar(0.5));

    let mut ada = AdagradState::new(1.0);
    step_adagrad(&mut store, &grads, &mut ada).unwrap();
    assert_eq!(store.get("frozen").unwrap().data()[0], 5.0);
    assert!(store.get("train_me").unwrap().data()[0] < 1.0);

    let mut adam = AdamState::new(0.01);
    step_adam(&mut store, &grads, &mut adam).unwrap();
    assert_eq!(store.get("frozen").unwrap().data()[0], 5.0);
}
