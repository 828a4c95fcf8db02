//! Every tape primitive against central finite differences on random inputs in [-1, 1].

use dcgcn::diff::{gradient_check, DiffError, ParamStore, Sampling, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-6;

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::new(vec![r, c], (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Registers one input per shape, projects the primitive's output onto fixed
/// random weights and checks every input entry. Returns the max relative error.
fn check<F>(seed: u64, shapes: &[(usize, usize)], op: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, DiffError>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    let ids: Vec<_> = shapes
        .iter()
        .enumerate()
        .map(|(i, &(r, c))| params.register(format!("x{i}"), random(&mut rng, r, c)))
        .collect();
    let out_shape = {
        let mut tape = Tape::new(&params);
        let xs: Vec<Var> = ids.iter().map(|&id| tape.param(id).unwrap()).collect();
        let y = op(&mut tape, &xs).unwrap();
        tape.shape(y)
    };
    let weights = random(&mut rng, out_shape.0, out_shape.1);
    let report = gradient_check(
        &mut params,
        |tape| {
            let xs = ids.iter().map(|&id| tape.param(id)).collect::<Result<Vec<_>, _>>()?;
            let y = op(tape, &xs)?;
            let w = tape.constant(weights.clone())?;
            let p = tape.mul(y, w)?;
            tape.sum(p)
        },
        TOL,
        Sampling::All,
        &mut rng,
    )
    .unwrap();
    report.max_rel_error()
}

/// Inputs sitting closer than this to a ReLU kink make finite differences meaningless.
fn clear_of_kinks(seed: u64, r: usize, c: usize) -> bool {
    let t = random(&mut ChaCha8Rng::seed_from_u64(seed), r, c);
    t.data().iter().all(|x| x.abs() > 1e-3)
}

fn dims() -> impl Strategy<Value = (usize, usize)> {
    (1usize..5, 1usize..5)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn matmul(seed: u64, (n, k) in dims(), m in 1usize..5) {
        prop_assert!(check(seed, &[(n, k), (k, m)], |t, x| t.matmul(x[0], x[1])) <= TOL);
    }

    #[test]
    fn matmul_nt(seed: u64, (n, k) in dims(), m in 1usize..5) {
        prop_assert!(check(seed, &[(n, k), (m, k)], |t, x| t.matmul_nt(x[0], x[1])) <= TOL);
    }

    #[test]
    fn elementwise_binary(seed: u64, (r, c) in dims()) {
        prop_assert!(check(seed, &[(r, c), (r, c)], |t, x| t.add(x[0], x[1])) <= TOL);
        prop_assert!(check(seed, &[(r, c), (r, c)], |t, x| t.mul(x[0], x[1])) <= TOL);
        prop_assert!(check(seed, &[(r, c), (1, c)], |t, x| t.add_row(x[0], x[1])) <= TOL);
        prop_assert!(check(seed, &[(r, c), (r, 1)], |t, x| t.mul_col(x[0], x[1])) <= TOL);
        prop_assert!(check(seed, &[(r, c), (r, c)], |t, x| t.linear_vars(x[0], x[1], None)) <= TOL);
        prop_assert!(check(seed, &[(r, c), (c, c), (1, c)], |t, x| t.linear_vars(x[0], x[1], Some(x[2]))) <= TOL);
    }

    #[test]
    fn smooth_unary(seed: u64, (r, c) in dims()) {
        prop_assert!(check(seed, &[(r, c)], |t, x| t.scale(x[0], -1.7)) <= TOL);
        prop_assert!(check(seed, &[(r, c)], |t, x| t.tanh(x[0])) <= TOL);
        prop_assert!(check(seed, &[(r, c)], |t, x| t.sigmoid(x[0])) <= TOL);
        prop_assert!(check(seed, &[(r, c)], |t, x| t.exp(x[0])) <= TOL);
    }

    #[test]
    fn rectifiers(seed: u64, (r, c) in dims()) {
        prop_assume!(clear_of_kinks(seed, r, c));
        prop_assert!(check(seed, &[(r, c)], |t, x| t.relu(x[0])) <= TOL);
        prop_assert!(check(seed, &[(r, c)], |t, x| t.leaky_relu(x[0], 0.2)) <= TOL);
    }

    #[test]
    fn concat_and_slice(seed: u64, r in 1usize..5, (a, b) in dims()) {
        prop_assert!(check(seed, &[(r, a), (r, b)], |t, x| t.concat(&[x[0], x[1], x[0]])) <= TOL);
        prop_assert!(check(seed, &[(a, r), (b, r)], |t, x| t.concat_rows(&[x[1], x[0], x[1]])) <= TOL);
        prop_assert!(check(seed, &[(r, a + b)], |t, x| t.slice_cols(x[0], a, a + b)) <= TOL);
        prop_assert!(check(seed, &[(a + b, r)], |t, x| t.slice_rows(x[0], b, a + b)) <= TOL);
    }

    #[test]
    fn gather_and_scatter(seed: u64, (r, c) in dims(), idx in prop::collection::vec(0usize..4, 1..8)) {
        let idx: Vec<usize> = idx.iter().map(|&i| i % r).collect();
        prop_assert!(check(seed, &[(r, c)], |t, x| t.gather_rows(x[0], &idx)) <= TOL);
        prop_assert!(check(seed, &[(idx.len(), c)], |t, x| t.scatter_add_rows(x[0], &idx, r)) <= TOL);
    }

    #[test]
    fn softmaxes(seed: u64, (r, c) in dims(), segment in prop::collection::vec(0usize..3, 1..9)) {
        let e = segment.len();
        prop_assert!(check(seed, &[(e, 1)], |t, x| t.segment_softmax(x[0], &segment, 3)) <= TOL);
        prop_assert!(check(seed, &[(r, c)], |t, x| t.log_softmax_rows(x[0])) <= TOL);
    }

    #[test]
    fn reductions(seed: u64, (r, c) in dims(), pick in prop::collection::vec(0usize..4, 4)) {
        let idx: Vec<usize> = pick[..r].iter().map(|&j| j % c).collect();
        prop_assert!(check(seed, &[(r, c)], |t, x| t.pick(x[0], &idx)) <= TOL);
        prop_assert!(check(seed, &[(r, c)], |t, x| t.sum(x[0])) <= TOL);
        prop_assert!(check(seed, &[(r, c)], |t, x| t.mean(x[0])) <= TOL);
        prop_assert!(check(seed, &[(r, c)], |t, x| t.mean_rows(x[0])) <= TOL);
    }
}
