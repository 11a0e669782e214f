use cmer::tensor::{finite_difference, GradCheckStats, TensorError};
use cmer::{GradTape, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..shape.iter().product::<usize>()).map(|_| rng.random_range(lo..hi)).collect()
}

/// Gradient of `sum(w * f(inputs))` against central differences for every
/// input element; `w` is a fixed random weighting.
fn check<F>(shapes: &[&[usize]], range: (f64, f64), f: F) -> GradCheckStats
where
    F: Fn(&mut GradTape<'_, f64>, &[Var]) -> Var,
{
    let inputs: Vec<Vec<f64>> = shapes.iter().enumerate().map(|(i, s)| random(s, 10 + i as u64, range.0, range.1)).collect();
    let forward = |values: &[Vec<f64>], grad: bool| {
        let mut tape = GradTape::detached();
        let vars: Vec<Var> = values
            .iter()
            .zip(shapes)
            .map(|(v, s)| {
                let x = t(s, v);
                tape.input(if grad { x.with_grad() } else { x })
            })
            .collect();
        let y = f(&mut tape, &vars);
        let w = random(tape.shape(y), 99, -1.0, 1.0);
        let wv = tape.constant(t(tape.shape(y), &w));
        let p = tape.mul(y, wv).unwrap();
        let l = tape.sum_all(p).unwrap();
        (tape, vars, l)
    };
    let (tape, vars, l) = forward(&inputs, true);
    let grads = tape.backward(l).unwrap();
    let mut stats = GradCheckStats::default();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v).unwrap().to_vec();
        let numeric = finite_difference(
            |x| {
                let mut vals = inputs.clone();
                vals[i] = x.to_vec();
                let (tape, _, l) = forward(&vals, false);
                tape.item(l).unwrap()
            },
            &inputs[i],
            1e-6,
        );
        stats.merge(&GradCheckStats::compare(&analytic, &numeric, 1e-8));
    }
    stats
}

fn assert_grad(name: &str, stats: GradCheckStats, tol: f64) {
    assert!(stats.count > 0);
    assert!(stats.max_relative < tol, "{name}: {stats:?}");
}

#[test]
fn matmul_examples() {
    let mut tape = GradTape::detached();
    let i2 = tape.input(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let m = tape.input(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let y = tape.matmul(i2, m).unwrap();
    assert_eq!(tape.value(y), &[1.0, 2.0, 3.0, 4.0]);
    let p = tape.input(t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]));
    let b = tape.input(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
    let y = tape.matmul(p, b).unwrap();
    assert_eq!(tape.value(y), &[5.0, 6.0, 0.0, 0.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = GradTape::<f64>::detached();
    let a = tape.input(Tensor::zeros(vec![3, 4]));
    let b = tape.input(Tensor::zeros(vec![3, 2]));
    let err = tape.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, TensorError::ShapeMismatch { .. }));
    assert!(msg.contains("[3, 4]") && msg.contains("[3, 2]"), "{msg}");
}

#[test]
fn matmul_gradients() {
    assert_grad("matmul", check(&[&[3, 4], &[4, 2]], (-1.0, 1.0), |tp, v| tp.matmul(v[0], v[1]).unwrap()), 1e-6);
    assert_grad("matmul_nt", check(&[&[3, 4], &[2, 4]], (-1.0, 1.0), |tp, v| tp.matmul_nt(v[0], v[1]).unwrap()), 1e-6);
    assert_grad("transpose", check(&[&[3, 4]], (-1.0, 1.0), |tp, v| tp.transpose(v[0]).unwrap()), 1e-6);
}

#[test]
fn softmax_examples() {
    let mut tape = GradTape::detached();
    let x = tape.input(t(&[4], &[0.0; 4]));
    let y = tape.softmax(x, 0).unwrap();
    assert_eq!(tape.value(y), &[0.25; 4]);
    let x = tape.input(t(&[2], &[1000.0, 0.0]));
    let y = tape.softmax(x, 0).unwrap();
    assert!((tape.value(y)[0] - 1.0).abs() < 1e-12 && tape.value(y)[1].abs() < 1e-12);
    let x = tape.input(t(&[3], &[1e4, -1e4, 0.0]));
    let y = tape.softmax(x, 0).unwrap();
    assert!(tape.value(y).iter().all(|v| v.is_finite()));
    assert_grad("softmax", check(&[&[3]], (1.0, 3.0), |tp, v| tp.softmax(v[0], 0).unwrap()), 1e-6);
    assert_grad("softmax rows", check(&[&[3, 5]], (-2.0, 2.0), |tp, v| tp.softmax(v[0], 1).unwrap()), 1e-5);
    let mask = [true, false, true, true, false];
    let masked = check(&[&[2, 5]], (-2.0, 2.0), |tp, v| tp.softmax_masked(v[0], 1, Some(&mask.repeat(2))).unwrap());
    assert_grad("softmax masked", masked, 1e-5);
}

#[test]
fn elementwise_examples() {
    let mut tape = GradTape::detached();
    let x = tape.input(t(&[3], &[-1.0, 0.0, 2.0]));
    let y = tape.relu(x).unwrap();
    assert_eq!(tape.value(y), &[0.0, 0.0, 2.0]);
    let z = tape.input(Tensor::scalar(0.0));
    let s = tape.sigmoid(z).unwrap();
    assert_eq!(tape.item(s), Some(0.5));
    let neg = tape.input(t(&[2], &[1.0, -1.0]));
    assert!(matches!(tape.log(neg), Err(TensorError::Domain { .. })));
    assert!(matches!(tape.sqrt(neg), Err(TensorError::Domain { .. })));
}

#[test]
fn unary_gradients() {
    let tanh = check(&[&[1]], (0.3, 0.3 + 1e-12), |tp, v| tp.tanh(v[0]).unwrap());
    assert_grad("tanh at 0.3", tanh, 1e-6);
    type Unary = fn(&mut GradTape<'_, f64>, Var) -> Result<Var, TensorError>;
    let ops: [(&str, Unary, (f64, f64)); 9] = [
        ("relu", |tp, x| tp.relu(x), (0.1, 2.0)),
        ("gelu", |tp, x| tp.gelu(x), (-2.0, 2.0)),
        ("tanh", |tp, x| tp.tanh(x), (-2.0, 2.0)),
        ("sigmoid", |tp, x| tp.sigmoid(x), (-3.0, 3.0)),
        ("exp", |tp, x| tp.exp(x), (-1.0, 1.0)),
        ("log", |tp, x| tp.log(x), (0.5, 3.0)),
        ("sqrt", |tp, x| tp.sqrt(x), (0.5, 3.0)),
        ("recip", |tp, x| tp.recip(x), (0.5, 3.0)),
        ("square", |tp, x| tp.square(x), (-2.0, 2.0)),
    ];
    for (name, op, range) in ops {
        assert_grad(name, check(&[&[2, 3]], range, |tp, v| op(tp, v[0]).unwrap()), 1e-5);
    }
    let negative_relu = check(&[&[2, 3]], (-2.0, -0.1), |tp, v| tp.relu(v[0]).unwrap());
    assert_eq!(negative_relu.max_absolute, 0.0);
}

#[test]
fn binary_gradients() {
    assert_grad("add", check(&[&[2, 3], &[2, 3]], (-1.0, 1.0), |tp, v| tp.add(v[0], v[1]).unwrap()), 1e-5);
    assert_grad("sub", check(&[&[2, 3], &[2, 3]], (-1.0, 1.0), |tp, v| tp.sub(v[0], v[1]).unwrap()), 1e-5);
    assert_grad("mul", check(&[&[2, 3], &[2, 3]], (-1.0, 1.0), |tp, v| tp.mul(v[0], v[1]).unwrap()), 1e-5);
    assert_grad("div", check(&[&[2, 3], &[2, 3]], (0.5, 2.0), |tp, v| tp.div(v[0], v[1]).unwrap()), 1e-5);
    assert_grad("mul scalar", check(&[&[2, 3], &[]], (-1.0, 1.0), |tp, v| tp.mul(v[0], v[1]).unwrap()), 1e-5);
    assert_grad("div by scalar", check(&[&[2, 3], &[]], (0.5, 2.0), |tp, v| tp.div(v[0], v[1]).unwrap()), 1e-5);
    assert_grad("scalar minus", check(&[&[], &[2, 3]], (-1.0, 1.0), |tp, v| tp.sub(v[0], v[1]).unwrap()), 1e-5);
    assert_grad("scale", check(&[&[2, 3]], (-1.0, 1.0), |tp, v| tp.scale(v[0], -2.5).unwrap()), 1e-5);
    assert_grad("add_scalar", check(&[&[2, 3]], (-1.0, 1.0), |tp, v| tp.add_scalar(v[0], 0.7).unwrap()), 1e-5);
    let mut tape = GradTape::<f64>::detached();
    let a = tape.input(Tensor::zeros(vec![2, 3]));
    let b = tape.input(Tensor::zeros(vec![3, 2]));
    assert!(tape.add(a, b).is_err());
}

#[test]
fn reduce_examples() {
    let mut tape = GradTape::detached();
    let x = tape.input(t(&[3], &[1.0, 2.0, 3.0]).with_grad());
    let m = tape.mean(x, 0, false).unwrap();
    assert_eq!(tape.item(m), Some(2.0));
    let m2 = tape.input(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let s = tape.sum(m2, 0, false).unwrap();
    assert_eq!(tape.value(s), &[4.0, 6.0]);
    assert_eq!(tape.shape(s), &[2]);
    let k = tape.sum(m2, 0, true).unwrap();
    assert_eq!(tape.shape(k), &[1, 2]);
    let g = tape.backward(m).unwrap();
    assert_eq!(g.wrt(x).unwrap(), &[1.0 / 3.0; 3]);
}

#[test]
fn reduce_gradients() {
    for axis in 0..2 {
        assert_grad("sum", check(&[&[3, 4]], (-1.0, 1.0), |tp, v| tp.sum(v[0], axis, false).unwrap()), 1e-5);
        assert_grad("mean", check(&[&[3, 4]], (-1.0, 1.0), |tp, v| tp.mean(v[0], axis, true).unwrap()), 1e-5);
        assert_grad("max", check(&[&[3, 4]], (-1.0, 1.0), |tp, v| tp.max(v[0], axis, false).unwrap()), 1e-5);
    }
    assert_grad("mean_all", check(&[&[3, 4]], (-1.0, 1.0), |tp, v| tp.mean_all(v[0]).unwrap()), 1e-5);
}

#[test]
fn concat_examples() {
    let mut tape = GradTape::detached();
    let a = tape.input(t(&[2, 1], &[1.0, 2.0]).with_grad());
    let b = tape.input(t(&[2, 1], &[3.0, 4.0]).with_grad());
    let c = tape.concat(&[a, b], 1).unwrap();
    assert_eq!(tape.value(c), &[1.0, 3.0, 2.0, 4.0]);
    let v = tape.input(t(&[3], &[7.0, 8.0, 9.0]));
    let k = tape.concat(&[v, v, v], 0).unwrap();
    assert_eq!(tape.shape(k), &[9]);
    assert_eq!(&tape.value(k)[3..6], &[7.0, 8.0, 9.0]);
    let bad = tape.input(Tensor::zeros(vec![3, 1]));
    assert!(matches!(tape.concat(&[a, bad], 1), Err(TensorError::ShapeMismatch { .. })));
    let s = tape.sum_all(c).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.wrt(a).unwrap(), &[1.0, 1.0]);
    assert_eq!(g.wrt(b).unwrap(), &[1.0, 1.0]);
}

#[test]
fn structural_gradients() {
    assert_grad("concat", check(&[&[2, 3], &[2, 1]], (-1.0, 1.0), |tp, v| tp.concat(&[v[0], v[1]], 1).unwrap()), 1e-5);
    assert_grad("narrow", check(&[&[4, 3]], (-1.0, 1.0), |tp, v| tp.narrow(v[0], 1, 1, 2).unwrap()), 1e-5);
    assert_grad("gather", check(&[&[4, 3]], (-1.0, 1.0), |tp, v| tp.gather_rows(v[0], &[3, 0, 3, 1]).unwrap()), 1e-5);
    assert_grad("reshape", check(&[&[4, 3]], (-1.0, 1.0), |tp, v| tp.reshape(v[0], &[2, 6]).unwrap()), 1e-5);
    assert_grad("repeat_rows", check(&[&[1, 3]], (-1.0, 1.0), |tp, v| tp.repeat_rows(v[0], 4).unwrap()), 1e-5);
    assert_grad("repeat_cols", check(&[&[3, 1]], (-1.0, 1.0), |tp, v| tp.repeat_cols(v[0], 4).unwrap()), 1e-5);
    assert_grad(
        "unfold",
        check(&[&[7, 2]], (-1.0, 1.0), |tp, v| tp.unfold(v[0], &[4, 3], 3, 2, 1).unwrap().0),
        1e-5,
    );
}

#[test]
fn cross_entropy_examples() {
    let mut tape = GradTape::detached();
    let l = tape.input(t(&[1, 4], &[0.0; 4]));
    let ce = tape.cross_entropy(l, &[2]).unwrap();
    assert!((tape.item(ce).unwrap() - 4f64.ln()).abs() < 1e-12);
    let l = tape.input(t(&[1, 4], &[10.0, -10.0, -10.0, -10.0]));
    let ce = tape.cross_entropy(l, &[0]).unwrap();
    assert!(tape.item(ce).unwrap() < 1e-8);
    assert!(tape.cross_entropy(l, &[4]).is_err());
    let grad = check(&[&[3, 4]], (-2.0, 2.0), |tp, v| tp.cross_entropy(v[0], &[0, 3, 1]).unwrap());
    assert_grad("cross_entropy", grad, 1e-6);
}

#[test]
fn backward_examples_and_accumulation() {
    let mut store = ParamStore::new();
    let w = store.add("w", t(&[2], &[1.0, -2.0]));
    for _ in 0..2 {
        let grads = {
            let mut tape = GradTape::new(&store);
            let x = tape.param(w);
            let sq = tape.square(x).unwrap();
            let l = tape.sum_all(sq).unwrap();
            tape.backward(l).unwrap()
        };
        store.accumulate(&grads);
    }
    assert_eq!(store.tensor(w).grad().unwrap(), &[4.0, -8.0]);
    store.zero_grad();
    let mut tape = GradTape::new(&store);
    let x = tape.param(w);
    let l = tape.sum_all(x).unwrap();
    let g = tape.backward(l).unwrap();
    assert_eq!(g.param(w).unwrap(), &[1.0, 1.0]);

    let mut tape = GradTape::new(&store);
    let x = tape.param(w);
    let err = tape.backward(x).unwrap_err();
    assert_eq!(err, TensorError::NonScalarLoss(vec![2]));
}

#[test]
fn three_op_chain_matches_closed_form() {
    // L = sum(tanh(a * x)^2); dL/dx = 2 tanh(ax) (1 - tanh(ax)^2) a
    let (a, xs) = (0.7, [0.2, -1.1, 0.5]);
    let mut tape = GradTape::detached();
    let x = tape.input(t(&[3], &xs).with_grad());
    let y = tape.scale(x, a).unwrap();
    let y = tape.tanh(y).unwrap();
    let y = tape.square(y).unwrap();
    let l = tape.sum_all(y).unwrap();
    let g = tape.backward(l).unwrap();
    for (got, &x) in g.wrt(x).unwrap().iter().zip(&xs) {
        let th = (a * x).tanh();
        let want = 2.0 * th * (1.0 - th * th) * a;
        assert!((got - want).abs() < 1e-15);
    }
}

#[test]
fn backward_visits_in_reverse_order() {
    let mut tape = GradTape::detached();
    let x = tape.input(t(&[2], &[1.0, 2.0]).with_grad());
    let y = tape.exp(x).unwrap();
    let z = tape.mul(y, x).unwrap();
    let l = tape.sum_all(z).unwrap();
    let g = tape.backward(l).unwrap();
    let order = g.visit_order().to_vec();
    let mut sorted = order.clone();
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    assert_eq!(order, sorted);
}

#[test]
fn non_finite_forward_is_an_error() {
    let mut tape = GradTape::detached();
    let x = tape.input(t(&[1], &[1000.0]));
    assert!(matches!(tape.exp(x), Err(TensorError::NonFinite { .. })));
    assert!(Tensor::new(vec![1], vec![f64::NAN]).is_err());
}
