#![allow(dead_code)]

use measurenet::data::SetBatch;
use measurenet::model::{init_model, ClassTag, InitSpec, Layer, MeasureNet, NetShape};
use measurenet::numerics::{Activation, Matrix, Rng};

pub fn random_matrix(rng: &mut Rng, r: usize, c: usize, scale: f64) -> Matrix {
    Matrix::from_vec(r, c, (0..r * c).map(|_| scale * rng.normal()).collect()).unwrap()
}

/// Random small network, batch and targets for gradient checks.
pub struct GradCase {
    pub net: MeasureNet,
    pub batch: SetBatch,
    pub targets: Matrix,
}

pub fn random_case(rng: &mut Rng, class: ClassTag, act: Activation) -> GradCase {
    let d = 1 + rng.below(4);
    let (h1, h2) = (1 + rng.below(5), 1 + rng.below(5));
    let out = 1 + rng.below(2);
    let shape = NetShape::for_class(class, d)
        .with_widths(h1, h2)
        .with_out(out)
        .with_activations(act, act)
        .with_aug(0.5 + rng.uniform());
    let net = init_model(shape, InitSpec::kaiming(rng.next_u64())).unwrap();
    let sets: Vec<Matrix> = (0..1 + rng.below(3))
        .map(|_| {
            let n = 1 + rng.below(3);
            random_matrix(rng, n, d, 1.0)
        })
        .collect();
    let batch = SetBatch::new(d, sets).unwrap();
    let targets = random_matrix(rng, batch.len(), out, 1.0);
    GradCase { net, batch, targets }
}

/// `½ Σ (out − y)²` over the batch.
pub fn half_sq_loss(net: &MeasureNet, batch: &SetBatch, y: &Matrix) -> f64 {
    let out = net.predict_batch(batch).unwrap();
    out.as_slice().iter().zip(y.as_slice()).map(|(a, b)| 0.5 * (a - b) * (a - b)).sum()
}

/// Central differences of `f` with respect to every entry of `layer`.
pub fn finite_difference(net: &MeasureNet, layer: Layer, h: f64, f: &dyn Fn(&MeasureNet) -> f64) -> Matrix {
    let w = net.layer(layer).clone();
    let mut g = Matrix::zeros(w.rows(), w.cols());
    let mut probe = net.clone();
    for i in 0..w.as_slice().len() {
        let mut plus = w.clone();
        plus.as_mut_slice()[i] += h;
        probe.set_layer(layer, plus).unwrap();
        let fp = f(&probe);
        let mut minus = w.clone();
        minus.as_mut_slice()[i] -= h;
        probe.set_layer(layer, minus).unwrap();
        let fm = f(&probe);
        g.as_mut_slice()[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &Matrix, b: &Matrix) -> f64 {
    let mut diff = a.clone();
    diff.add_scaled(-1.0, b);
    let scale = a.frobenius_norm().max(b.frobenius_norm());
    if scale < 1e-12 {
        0.0
    } else {
        diff.frobenius_norm() / scale
    }
}

/// Largest relative error of backward against finite differences over the
/// trainable layers of one case.
pub fn backward_error(case: &GradCase) -> f64 {
    backward_error_with_floor(case, 0.0)
}

/// As [`backward_error`], but layers whose gradient norm is below `floor`
/// are compared in absolute terms: there the differences are dominated by
/// rounding in the loss, not by the gradient.
pub fn backward_error_with_floor(case: &GradCase, floor: f64) -> f64 {
    let (out, cache) = case.net.forward_batch(&case.batch).unwrap();
    let mut up = out.clone();
    up.add_scaled(-1.0, &case.targets);
    let grads = case.net.backward(&cache, &up).unwrap();
    let f = |n: &MeasureNet| half_sq_loss(n, &case.batch, &case.targets);
    let mut worst = 0.0f64;
    for layer in Layer::ALL {
        match grads.get(layer) {
            Some(g) => {
                let fd = finite_difference(&case.net, layer, 1e-5, &f);
                let mut diff = g.clone();
                diff.add_scaled(-1.0, &fd);
                let scale = g.frobenius_norm().max(fd.frobenius_norm()).max(floor);
                worst = worst.max(if scale < 1e-12 { 0.0 } else { diff.frobenius_norm() / scale });
            }
            None => assert!(case.net.is_frozen(layer), "{layer:?} has no gradient but is trainable"),
        }
    }
    worst
}

/// The 50 configurations of the gradient check: every class and
/// activation combination appears.
pub fn gradient_cases(seed: u64) -> Vec<GradCase> {
    let mut rng = Rng::new(seed);
    (0..50)
        .map(|i| {
            let class = ClassTag::MEASURE_CLASSES[i % 3];
            let act = if (i / 3) % 2 == 0 { Activation::Relu } else { Activation::Relu2 };
            random_case(&mut rng, class, act)
        })
        .collect()
}
