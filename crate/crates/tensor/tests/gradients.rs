use hybrid_tensor::gradcheck::{check, DEFAULT_STEP};
use hybrid_tensor::{Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Reduces an arbitrary output to a scalar with fixed random weights so
/// every output element contributes a distinct gradient.
fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let w = rand_tensor(&mut rng, tape.value(y).shape());
    let w = tape.constant(w)?;
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn run<F>(name: &str, shapes: &[&[usize]], f: F)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Tensor> = shapes.iter().map(|s| rand_tensor(&mut rng, s)).collect();
        let report = check(&inputs, DEFAULT_STEP, |tape, v| {
            let y = f(tape, v)?;
            weighted_sum(tape, y, seed)
        })
        .unwrap();
        assert!(
            report.max_rel_error < TOL,
            "{name} seed {seed}: rel err {}",
            report.max_rel_error
        );
    }
}

#[test]
fn matmul() {
    run("matmul", &[&[3, 4], &[4, 5]], |t, v| t.matmul(v[0], v[1]));
}

#[test]
fn transpose() {
    run("transpose", &[&[3, 4]], |t, v| t.transpose(v[0]));
}

#[test]
fn add_sub_mul_scale() {
    run("add", &[&[2, 3], &[2, 3]], |t, v| t.add(v[0], v[1]));
    run("sub", &[&[2, 3], &[2, 3]], |t, v| t.sub(v[0], v[1]));
    run("mul", &[&[2, 3], &[2, 3]], |t, v| t.mul(v[0], v[1]));
    run("scale", &[&[2, 3]], |t, v| t.scale(v[0], -1.7));
}

#[test]
fn add_row() {
    run("add_row", &[&[4, 3], &[1, 3]], |t, v| t.add_row(v[0], v[1]));
}

#[test]
fn softmax() {
    run("softmax_rows", &[&[3, 5]], |t, v| t.softmax_rows(v[0]));
    run("masked_softmax_rows", &[&[3, 5]], |t, v| {
        t.masked_softmax_rows(v[0], &[true, false, true, true, false])
    });
}

#[test]
fn layer_norm() {
    run("layer_norm", &[&[3, 6], &[1, 6], &[1, 6]], |t, v| {
        t.layer_norm(v[0], v[1], v[2])
    });
}

#[test]
fn gelu_and_sigmoid() {
    run("gelu", &[&[3, 4]], |t, v| t.gelu(v[0]));
    run("sigmoid", &[&[3, 4]], |t, v| t.sigmoid(v[0]));
}

#[test]
fn mean_rows() {
    run("mean_rows", &[&[5, 3]], |t, v| t.mean_rows(v[0], &[true, true, false, true, false]));
}

#[test]
fn concat_and_slices() {
    run("concat0", &[&[2, 3], &[1, 3]], |t, v| t.concat(&[v[0], v[1]], 0));
    run("concat1", &[&[2, 3], &[2, 2]], |t, v| t.concat(&[v[0], v[1]], 1));
    run("slice_rows", &[&[4, 3]], |t, v| t.slice_rows(v[0], 1, 3));
    run("slice_cols", &[&[4, 5]], |t, v| t.slice_cols(v[0], 2, 4));
    run("reshape", &[&[2, 6]], |t, v| t.reshape(v[0], 3, 4));
}

#[test]
fn cross_entropy() {
    run("cross_entropy", &[&[1, 6]], |t, v| t.cross_entropy(v[0], 3));
}

#[test]
fn attention_block() {
    // softmax(Q K^T / sqrt(d)) V composed from primitives.
    run("attention", &[&[4, 6], &[4, 6], &[4, 6]], |t, v| {
        let kt = t.transpose(v[1])?;
        let s = t.matmul(v[0], kt)?;
        let s = t.scale(s, 1.0 / 6f64.sqrt())?;
        let p = t.masked_softmax_rows(s, &[true, true, true, false])?;
        t.matmul(p, v[2])
    });
}

#[test]
fn two_consumers_sum_contributions() {
    // f(x) = sum(x * x) + sum(3x): both paths feed x, grad = 2x + 3.
    let x = Tensor::new(&[1, 3], vec![0.5, -1.0, 2.0]).unwrap();
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone()).unwrap();
    let sq = tape.mul(xv, xv).unwrap();
    let a = tape.sum(sq).unwrap();
    let s3 = tape.scale(xv, 3.0).unwrap();
    let b = tape.sum(s3).unwrap();
    let l = tape.add(a, b).unwrap();
    tape.backward(l).unwrap();
    let expected: Vec<f64> = x.data().iter().map(|v| 2.0 * v + 3.0).collect();
    assert_eq!(tape.grad(xv).unwrap().data(), expected.as_slice());
    let fd = check(&[x], DEFAULT_STEP, |t, v| {
        let sq = t.mul(v[0], v[0])?;
        let a = t.sum(sq)?;
        let s3 = t.scale(v[0], 3.0)?;
        let b = t.sum(s3)?;
        t.add(a, b)
    })
    .unwrap();
    assert!(fd.max_rel_error < TOL);
}
