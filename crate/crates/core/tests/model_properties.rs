mod common;

use common::*;
use measurenet::data::{duplicate_set, SetBatch};
use measurenet::model::{init_model, ClassTag, InitSpec, Layer, MeasureNet, NetShape};
use measurenet::numerics::{Activation, Matrix, Rng};
use measurenet::optim::{objective, train, Loss, Targets, TrainConfig, TrainingData};

#[test]
fn backward_matches_finite_differences() {
    for (i, case) in gradient_cases(101).iter().enumerate() {
        let e = backward_error(case);
        assert!(e < 1e-5, "case {i} ({:?}): relative error {e}", case.net.class());
    }
}

#[test]
fn deepsets_backward_matches_finite_differences() {
    let mut rng = Rng::new(5);
    for act in [Activation::Relu, Activation::Relu2] {
        for _ in 0..5 {
            let case = random_case(&mut rng, ClassTag::DeepSetsUnnormalized, act);
            // sum pooling with squared ReLUs can leave a large loss with a
            // vanishing gradient
            let e = backward_error_with_floor(&case, 1e-3);
            assert!(e < 1e-5, "{act:?}: {e}");
        }
    }
}

#[test]
fn path_norm_gradient_matches_finite_differences() {
    let mut rng = Rng::new(77);
    for class in ClassTag::MEASURE_CLASSES {
        for _ in 0..10 {
            let case = random_case(&mut rng, class, Activation::Relu);
            let g = case.net.path_norm_gradient();
            for layer in case.net.trainable_layers() {
                let fd = finite_difference(&case.net, layer, 1e-6, &|n: &MeasureNet| n.path_norm());
                let e = relative_error(g.get(layer).unwrap(), &fd);
                assert!(e < 1e-5, "{class:?} {layer:?}: {e}");
            }
        }
    }
}

#[test]
fn path_norm_is_homogeneous_in_the_last_layer() {
    let mut rng = Rng::new(8);
    for class in [ClassTag::S1, ClassTag::S2, ClassTag::S3, ClassTag::DeepSetsUnnormalized] {
        let case = random_case(&mut rng, class, Activation::Relu);
        let base = case.net.path_norm();
        for c in [-3.0, 0.5, 2.0] {
            let mut n = case.net.clone();
            n.set_layer(Layer::Third, n.layer(Layer::Third).scaled(c)).unwrap();
            assert!((n.path_norm() - c.abs() * base).abs() <= 1e-12 * base.max(1.0));
        }
    }
}

#[test]
fn permutation_invariance() {
    let mut rng = Rng::new(12);
    for class in [ClassTag::S1, ClassTag::S2, ClassTag::S3, ClassTag::DeepSetsUnnormalized] {
        let shape = NetShape::for_class(class, 3).with_widths(20, 10);
        let net = init_model(shape, InitSpec::kaiming(rng.next_u64())).unwrap();
        let set = random_matrix(&mut rng, 9, 3, 1.0);
        let base = net.predict(&set).unwrap();
        for _ in 0..10 {
            let mut idx: Vec<usize> = (0..9).collect();
            rng.shuffle(&mut idx);
            let out = net.predict(&set.select_rows(&idx)).unwrap();
            assert!((out[0] - base[0]).abs() < 1e-12);
        }
    }
}

#[test]
fn duplication_invariance_of_normalized_classes() {
    let mut rng = Rng::new(13);
    let set = random_matrix(&mut rng, 5, 2, 1.0);
    for class in ClassTag::MEASURE_CLASSES {
        let net = init_model(NetShape::for_class(class, 2).with_widths(30, 20), InitSpec::kaiming(3)).unwrap();
        let a = net.predict(&set).unwrap()[0];
        for k in [2, 3, 4] {
            let b = net.predict(&duplicate_set(&set, k)).unwrap()[0];
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{class:?} k={k}");
        }
    }
    let ds = init_model(
        NetShape::for_class(ClassTag::DeepSetsUnnormalized, 2).with_widths(30, 20),
        InitSpec::kaiming(3),
    )
    .unwrap();
    let p1 = ds.pooled_features(&SetBatch::single(set.clone()).unwrap()).unwrap();
    let p2 = ds.pooled_features(&SetBatch::single(duplicate_set(&set, 2)).unwrap()).unwrap();
    assert!(p1.frobenius_norm() > 0.0);
    assert!(p2.max_abs_diff(&p1.scaled(2.0)) < 1e-12);
}

fn tiny_training(class: ClassTag, lambda: f64, iterations: usize) -> (MeasureNet, MeasureNet, TrainingData) {
    let mut rng = Rng::new(40);
    let sets: Vec<Matrix> = (0..20).map(|_| random_matrix(&mut rng, 4, 3, 1.0)).collect();
    let y = Matrix::from_vec(20, 1, (0..20).map(|_| rng.normal()).collect()).unwrap();
    let data = TrainingData::new(SetBatch::new(3, sets).unwrap(), Targets::Values(y)).unwrap();
    let init = init_model(NetShape::for_class(class, 3).with_widths(16, 12), InitSpec::kaiming(2)).unwrap();
    let mut net = init.clone();
    let cfg = TrainConfig {
        iterations,
        lambda,
        ..TrainConfig::synthetic()
    };
    train(&mut net, &data, &cfg).unwrap();
    (init, net, data)
}

#[test]
fn frozen_layers_are_bitwise_unchanged() {
    for class in ClassTag::MEASURE_CLASSES {
        let (init, net, _) = tiny_training(class, 1e-3, 200);
        for layer in Layer::ALL {
            let same = init.layer(layer) == net.layer(layer);
            assert_eq!(same, net.is_frozen(layer), "{class:?} {layer:?}");
        }
    }
}

#[test]
fn history_matches_independent_objective() {
    let mut rng = Rng::new(41);
    let sets: Vec<Matrix> = (0..10).map(|_| random_matrix(&mut rng, 3, 2, 1.0)).collect();
    let y = Matrix::from_vec(10, 1, (0..10).map(|_| rng.normal()).collect()).unwrap();
    let data = TrainingData::new(SetBatch::new(2, sets).unwrap(), Targets::Values(y)).unwrap();
    for class in ClassTag::MEASURE_CLASSES {
        let mut net = init_model(NetShape::for_class(class, 2).with_widths(8, 6), InitSpec::kaiming(9)).unwrap();
        let cfg = TrainConfig {
            iterations: 1,
            lambda: 0.01,
            ..TrainConfig::synthetic()
        };
        let (l0, p0) = objective(&net, &data, Loss::Mse, 0.01).unwrap();
        let rep = train(&mut net, &data, &cfg).unwrap();
        let h = &rep.history[0];
        assert!((h.data_loss - l0).abs() <= 1e-10 && (h.penalty - p0).abs() <= 1e-10);
    }
}

#[test]
fn large_penalty_shrinks_output_layer() {
    let (init, net, data) = tiny_training(ClassTag::S3, 1e3, 2000);
    assert!(net.layer(Layer::Third).frobenius_norm() < 0.05 * init.layer(Layer::Third).frobenius_norm());
    let out = net.predict_batch(&data.sets).unwrap();
    assert!(out.as_slice().iter().all(|v| v.abs() < 0.05));
}

#[test]
fn training_is_deterministic() {
    let (_, a, _) = tiny_training(ClassTag::S1, 1e-4, 100);
    let (_, b, _) = tiny_training(ClassTag::S1, 1e-4, 100);
    assert_eq!(a, b);
}
