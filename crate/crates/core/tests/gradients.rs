//! Every differentiable tape op against central finite differences.

use m6_core::finite_diff::{gradient, max_rel_error};
use m6_core::tensor::{Tape, Tensor, Var};
use m6_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const FLOOR: f64 = 1e-6;

type Build = dyn Fn(&mut Tape<'static, f64>, &[Var]) -> Result<Var>;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..shape.iter().product::<usize>()).map(|_| rng.random_range(-1.5..1.5)).collect()
}

/// Reduce the op output to a scalar with fixed random weights so that every
/// output element influences the loss differently.
fn loss_of(tape: &mut Tape<'static, f64>, out: Var, weights: &[f64]) -> Var {
    if tape.value(out).len() == 1 {
        out
    } else {
        tape.dot_const(out, &weights[..tape.value(out).len()]).unwrap()
    }
}

fn check(name: &str, shapes: &[&[usize]], build: &Build) {
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 7919);
    let inputs: Vec<Vec<f64>> = shapes.iter().map(|s| random(s, &mut rng)).collect();
    let weights: Vec<f64> = (0..4096).map(|_| rng.random_range(-1.0..1.0)).collect();

    let eval = |vals: &[Vec<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals
            .iter()
            .zip(shapes)
            .map(|(v, s)| tape.leaf(Tensor::from_f64(s.to_vec(), v).unwrap()))
            .collect();
        let out = build(&mut tape, &vars).unwrap();
        let l = loss_of(&mut tape, out, &weights);
        tape.scalar_value(l)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .zip(shapes)
        .map(|(v, s)| tape.leaf(Tensor::from_f64(s.to_vec(), v).unwrap().with_grad()))
        .collect();
    let out = build(&mut tape, &vars).unwrap();
    let l = loss_of(&mut tape, out, &weights);
    let grads = tape.backward(l).unwrap();

    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        let numeric = gradient(
            |x| {
                let mut vals = inputs.clone();
                vals[i] = x.to_vec();
                eval(&vals)
            },
            &inputs[i],
            H,
        );
        let err = max_rel_error(&analytic, &numeric, FLOOR);
        assert!(err < TOL, "{name}: input {i} rel err {err:e}\n analytic {analytic:?}\n numeric {numeric:?}");
    }
}

#[test]
fn matmul_variants() {
    check("matmul", &[&[3, 4], &[4, 2]], &|t, v| t.matmul(v[0], v[1]));
    check("matmul_nt", &[&[3, 4], &[5, 4]], &|t, v| t.matmul_nt(v[0], v[1]));
    check("sum_of_product", &[&[2, 3], &[3, 2]], &|t, v| {
        let p = t.matmul(v[0], v[1])?;
        t.sum(p)
    });
}

#[test]
fn elementwise() {
    check("add", &[&[2, 3], &[2, 3]], &|t, v| t.add(v[0], v[1]));
    check("sub", &[&[2, 3], &[2, 3]], &|t, v| t.sub(v[0], v[1]));
    check("mul", &[&[2, 3], &[2, 3]], &|t, v| t.mul(v[0], v[1]));
    check("scale", &[&[4]], &|t, v| t.scale(v[0], -2.5));
    check("gelu", &[&[2, 5]], &|t, v| t.gelu(v[0]));
    check("sigmoid", &[&[2, 5]], &|t, v| t.sigmoid(v[0]));
    check("add_row", &[&[3, 4], &[4]], &|t, v| t.add_row(v[0], v[1]));
    check("mul_col", &[&[3, 4], &[3, 1]], &|t, v| t.mul_col(v[0], v[1]));
}

#[test]
fn normalisation_and_softmax() {
    check("layer_norm", &[&[3, 5], &[5], &[5]], &|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5));
    check("softmax_last", &[&[3, 4]], &|t, v| t.softmax(v[0], 1));
    check("softmax_first", &[&[3, 4]], &|t, v| t.softmax(v[0], 0));
    check("softmax_3d_mid", &[&[2, 3, 2]], &|t, v| t.softmax(v[0], 1));
    let mask = [true, false, true, true, true, false, false, true, true];
    check("masked_softmax", &[&[3, 3]], &move |t, v| t.masked_softmax(v[0], &mask));
}

#[test]
fn losses() {
    check("cross_entropy", &[&[4, 5]], &|t, v| t.cross_entropy(v[0], &[0, 3, u32::MAX, 1], u32::MAX));
    check("mse", &[&[2, 3]], &|t, v| t.mse(v[0], &[0.1, 0.2, -0.3, 0.0, 1.0, 0.5]));
    check("mean_rows", &[&[4, 3]], &|t, v| t.mean_rows(v[0]));
}

#[test]
fn indexing() {
    check("gather_rows", &[&[4, 3]], &|t, v| t.gather_rows(v[0], &[2, 0, 2]));
    check("index_add_rows", &[&[2, 3], &[3, 3]], &|t, v| {
        t.index_add_rows(4, 3, vec![(v[0], vec![1, 3]), (v[1], vec![0, 1, 1])])
    });
    check("slice", &[&[4, 5]], &|t, v| t.slice(v[0], 1..3, 2..5));
    check("concat_rows", &[&[2, 3], &[1, 3]], &|t, v| t.concat_rows(&[v[0], v[1]]));
    check("concat_cols", &[&[2, 3], &[2, 1]], &|t, v| t.concat_cols(&[v[0], v[1]]));
    check("reshape", &[&[2, 3]], &|t, v| t.reshape(v[0], vec![3, 2]));
}

#[test]
fn routing_weights() {
    // selection must act on a positive matrix, so route through a softmax
    check("select_normalized", &[&[3, 4]], &|t, v| {
        let p = t.softmax(v[0], 1)?;
        t.select_normalized(p, &[vec![0, 2], vec![3, 1], vec![1, 2]])
    });
}
