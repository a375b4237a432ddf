use dualguide_core::gradcheck::check_gradient;
use dualguide_core::{Result, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(shape, -1.0, 1.0, &mut rng).unwrap()
}

/// Weighted sum with fixed random weights, so every output coordinate matters.
fn project<'t>(y: &Var<'t>, seed: u64) -> Result<Var<'t>> {
    let w = y.tape().constant(rand_tensor(y.shape(), seed ^ 0xabc));
    Ok(y.mul(&w)?.sum())
}

fn check(name: &str, shape: &[usize], seed: u64, f: impl for<'t> Fn(&Var<'t>) -> Result<Var<'t>>) {
    let x = rand_tensor(shape, seed);
    let err = check_gradient(|x| project(&f(x)?, seed), &x, H).unwrap();
    assert!(err < TOL, "{name}: relative error {err}");
}

#[test]
fn elementwise_ops() {
    let other = rand_tensor(&[3, 4], 77);
    let o = other.clone();
    check("add", &[3, 4], 1, move |x| x.add(&x.tape().constant(o.clone())));
    let o = other.clone();
    check("sub", &[3, 4], 2, move |x| x.tape().constant(o.clone()).sub(x));
    let o = other.clone();
    check("mul", &[3, 4], 3, move |x| x.mul(&x.tape().constant(o.clone())));
    check("mul_self", &[3, 4], 4, |x| x.mul(x));
    check("scale", &[3, 4], 5, |x| Ok(x.scale(-1.7)));
    check("add_scalar", &[3, 4], 6, |x| Ok(x.add_scalar(0.3)));
    check("relu", &[3, 4], 7, |x| Ok(x.relu()));
    check("tanh", &[3, 4], 8, |x| Ok(x.tanh()));
    check("silu", &[3, 4], 30, |x| Ok(x.silu()));
    check("square", &[3, 4], 9, |x| Ok(x.square()));
    check("sqrt", &[3, 4], 10, |x| x.square().add_scalar(0.1).sqrt());
    check("clamp", &[3, 4], 11, |x| Ok(x.clamp(-0.5, 0.5)));
    check("scalar_broadcast", &[1], 12, |x| {
        let t = x.tape().constant(rand_tensor(&[5], 99));
        t.mul(x)
    });
}

#[test]
fn reductions_and_views() {
    check("sum", &[2, 3], 20, |x| Ok(x.sum()));
    check("mean", &[2, 3], 21, |x| Ok(x.mean()));
    check("reshape", &[2, 6], 22, |x| x.reshape(&[3, 4]));
    check("slice", &[2, 5, 3], 23, |x| x.slice(1, 1, 4));
    check("transpose", &[2, 5], 24, |x| x.transpose());
}

#[test]
fn matrix_ops() {
    let b = rand_tensor(&[4, 2], 30);
    let bb = b.clone();
    check("matmul_lhs", &[3, 4], 31, move |x| {
        x.matmul(&x.tape().constant(bb.clone()))
    });
    let a = rand_tensor(&[3, 4], 32);
    check("matmul_rhs", &[4, 2], 33, move |x| {
        x.tape().constant(a.clone()).matmul(x)
    });
    let row = rand_tensor(&[4], 34);
    check("add_row_vector", &[3, 4], 35, move |x| {
        x.add_row_vector(&x.tape().constant(row.clone()))
    });
    let m = rand_tensor(&[3, 4], 36);
    check("add_row_vector_row", &[4], 37, move |x| {
        x.tape().constant(m.clone()).add_row_vector(x)
    });
    check("l2_normalize_rows", &[3, 4], 38, |x| x.l2_normalize_rows(1e-8));
    check("log_softmax_rows", &[3, 4], 39, |x| x.log_softmax_rows());
}

#[test]
fn spatial_ops() {
    let w = rand_tensor(&[3, 2, 3, 3], 40);
    let b = rand_tensor(&[3], 41);
    let (w1, b1) = (w.clone(), b.clone());
    check("conv2d_input", &[2, 2, 4, 4], 42, move |x| {
        let t = x.tape();
        x.conv2d(&t.constant(w1.clone()), Some(&t.constant(b1.clone())))
    });
    let x0 = rand_tensor(&[2, 2, 4, 4], 43);
    let (x1, b2) = (x0.clone(), b.clone());
    check("conv2d_weight", &[3, 2, 3, 3], 44, move |w| {
        let t = w.tape();
        t.constant(x1.clone()).conv2d(w, Some(&t.constant(b2.clone())))
    });
    let w3 = w.clone();
    check("conv2d_bias", &[3], 45, move |b| {
        let t = b.tape();
        t.constant(x0.clone()).conv2d(&t.constant(w3.clone()), Some(b))
    });
    check("avg_pool2", &[1, 2, 4, 6], 46, |x| x.avg_pool2());
    check("upsample2", &[1, 2, 3, 2], 47, |x| x.upsample2());
    check("l2_normalize_channels", &[2, 3, 2, 2], 48, |x| {
        x.l2_normalize_channels(1e-8)
    });

    let scale = rand_tensor(&[2, 3], 49);
    let shift = rand_tensor(&[2, 3], 50);
    let (s1, h1) = (scale.clone(), shift.clone());
    check("channel_affine_x", &[2, 3, 2, 2], 51, move |x| {
        let t = x.tape();
        x.channel_affine(&t.constant(s1.clone()), &t.constant(h1.clone()))
    });
    let base = rand_tensor(&[2, 3, 2, 2], 52);
    let (b1, h2) = (base.clone(), shift.clone());
    check("channel_affine_scale", &[2, 3], 53, move |s| {
        let t = s.tape();
        t.constant(b1.clone()).channel_affine(s, &t.constant(h2.clone()))
    });
    check("channel_affine_shift", &[2, 3], 54, move |h| {
        let t = h.tape();
        t.constant(base.clone()).channel_affine(&t.constant(scale.clone()), h)
    });
}

/// Two-layer conv-relu network, differentiated w.r.t. its input.
#[test]
fn conv_relu_network_matches_finite_differences() {
    let w1 = rand_tensor(&[4, 1, 3, 3], 60);
    let w2 = rand_tensor(&[2, 4, 3, 3], 61);
    let x = rand_tensor(&[1, 1, 5, 5], 62);
    let err = check_gradient(
        |x| {
            let t = x.tape();
            let h = x.conv2d(&t.constant(w1.clone()), None)?.relu();
            let y = h.conv2d(&t.constant(w2.clone()), None)?.tanh();
            project(&y, 63)
        },
        &x,
        H,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// Gradient of a fan-out graph equals the sum of per-path gradients.
    #[test]
    fn fan_out_is_sum_of_paths(seed in 0u64..10_000) {
        let x0 = rand_tensor(&[6], seed);
        fn path_a<'t>(x: &Var<'t>) -> Var<'t> { x.tanh().square().sum() }
        fn path_b<'t>(x: &Var<'t>) -> Var<'t> { x.scale(1.3).relu().sum() }

        let tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let joint = path_a(&x).add(&path_b(&x)).unwrap();
        let g = tape.backward(&joint).unwrap().wrt(&x);

        let ta = Tape::new();
        let xa = ta.leaf(x0.clone());
        let ga = ta.backward(&path_a(&xa)).unwrap().wrt(&xa);
        let tb = Tape::new();
        let xb = tb.leaf(x0);
        let gb = tb.backward(&path_b(&xb)).unwrap().wrt(&xb);

        let sum = ga.add(&gb).unwrap();
        prop_assert!(g.max_abs_diff(&sum).unwrap() <= 1e-12);
    }

    /// Tracing never changes forward values.
    #[test]
    fn traced_forward_is_bit_identical(seed in 0u64..10_000) {
        let x0 = rand_tensor(&[1, 2, 4, 4], seed);
        let w = rand_tensor(&[3, 2, 3, 3], seed + 1);
        let run = |tape: &Tape| {
            let x = tape.leaf(x0.clone());
            let y = x.conv2d(&tape.constant(w.clone()), None).unwrap().relu().avg_pool2().unwrap();
            y.l2_normalize_channels(1e-8).unwrap().value().clone()
        };
        let traced = run(&Tape::new());
        let plain = run(&Tape::untraced());
        let tb: Vec<u64> = traced.data().iter().map(|v| v.to_bits()).collect();
        let pb: Vec<u64> = plain.data().iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(tb, pb);
    }
}
