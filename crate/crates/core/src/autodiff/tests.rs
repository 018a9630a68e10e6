use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

/// Central finite differences of `f` around `inputs` versus the tape gradient.
/// Returns the worst relative error `|a - n| / max(|a|, |n|, 1e-4)`.
fn gradcheck(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let mut g = Graph::standalone();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out).unwrap();

    let eval = |ins: &[Tensor]| {
        let mut g = Graph::standalone();
        let vars: Vec<Var> = ins.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = f(&mut g, &vars);
        g.value(out).item()
    };

    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]).map(<[f64]>::to_vec).unwrap_or(vec![0.0; t.len()]);
        for j in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
            worst = worst.max(err);
        }
    }
    worst
}

fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Random values kept at least `gap` away from zero, for ops with a kink at 0.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: Vec<usize>, gap: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(gap..1.0);
            if rng.gen() {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

const TOL: f64 = 1e-4;

#[test]
fn every_op_matches_finite_differences() {
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut rng, vec![3, 4]);
        let b = random(&mut rng, vec![4, 2]);
        let c = random(&mut rng, vec![3, 4]);
        let bias = random(&mut rng, vec![4]);
        let u = random(&mut rng, vec![5]);
        let v = random(&mut rng, vec![5]);
        let kinked = away_from_zero(&mut rng, vec![3, 4], 1e-2);
        let positive = Tensor::new(vec![6], (0..6).map(|_| rng.gen_range(0.1..2.0)).collect()).unwrap();

        let cases: Vec<(&str, Vec<Tensor>, Box<dyn Fn(&mut Graph, &[Var]) -> Var>)> = vec![
            ("matmul", vec![a.clone(), b.clone()], Box::new(|g, x| {
                let y = g.matmul(x[0], x[1]).unwrap();
                let y = g.mul(y, y).unwrap();
                g.sum(y)
            })),
            ("transpose", vec![a.clone()], Box::new(|g, x| {
                let t = g.transpose(x[0]).unwrap();
                let y = g.matmul(x[0], t).unwrap();
                g.sum(y)
            })),
            ("add_sub_mul", vec![a.clone(), c.clone()], Box::new(|g, x| {
                let s = g.add(x[0], x[1]).unwrap();
                let d = g.sub(x[0], x[1]).unwrap();
                let p = g.mul(s, d).unwrap();
                g.mean(p)
            })),
            ("add_bias_scale_add_scalar", vec![a.clone(), bias.clone()], Box::new(|g, x| {
                let y = g.add_bias(x[0], x[1]).unwrap();
                let y = g.scale(y, -1.7);
                let y = g.add_scalar(y, 0.3);
                let y = g.mul(y, y).unwrap();
                g.sum(y)
            })),
            ("relu", vec![kinked.clone()], Box::new(|g, x| {
                let y = g.relu(x[0]);
                let y = g.mul(y, y).unwrap();
                g.sum(y)
            })),
            ("hinge", vec![kinked.clone()], Box::new(|g, x| {
                let y = g.scale(x[0], 3.0);
                let y = g.hinge(y);
                g.sum(y)
            })),
            ("sigmoid_log", vec![a.clone()], Box::new(|g, x| {
                let y = g.sigmoid(x[0]);
                let y = g.log(y);
                g.sum(y)
            })),
            ("clamp", vec![positive.clone()], Box::new(|g, x| {
                let y = g.clamp(x[0], 0.05, 5.0);
                let y = g.log(y);
                g.sum(y)
            })),
            ("softmax_axis1", vec![a.clone(), c.clone()], Box::new(|g, x| {
                let y = g.softmax(x[0], 1).unwrap();
                let y = g.mul(y, x[1]).unwrap();
                g.sum(y)
            })),
            ("softmax_axis0", vec![a.clone(), c.clone()], Box::new(|g, x| {
                let y = g.softmax(x[0], 0).unwrap();
                let y = g.mul(y, x[1]).unwrap();
                g.sum(y)
            })),
            ("log_softmax_pick", vec![a.clone()], Box::new(|g, x| {
                let y = g.log_softmax(x[0]);
                let p = g.pick(y, &[0, 3, 1]).unwrap();
                g.sum(p)
            })),
            ("layer_norm", vec![a.clone(), bias.clone(), random(&mut rng, vec![4]), c.clone()], Box::new(|g, x| {
                let y = g.layer_norm(x[0], x[1], x[2], 1e-5).unwrap();
                let y = g.mul(y, x[3]).unwrap();
                g.sum(y)
            })),
            ("embedding_gather", vec![a.clone()], Box::new(|g, x| {
                let y = g.embedding_gather(x[0], &[2, 0, 2]).unwrap();
                let y = g.mul(y, y).unwrap();
                g.sum(y)
            })),
            ("mean_pool", vec![a.clone(), bias.clone()], Box::new(|g, x| {
                let y = g.mean_pool(x[0], &[0, 2]).unwrap();
                let y = g.mul(y, x[1]).unwrap();
                let y = g.mul(y, y).unwrap();
                g.sum(y)
            })),
            ("concat_slice", vec![a.clone(), c.clone()], Box::new(|g, x| {
                let y = g.concat(&[x[0], x[1]], 1).unwrap();
                let s = g.slice_cols(y, 2, 7).unwrap();
                let z = g.concat(&[s, s], 0).unwrap();
                let z = g.mul(z, z).unwrap();
                g.sum(z)
            })),
            ("reshape_select_row", vec![a.clone()], Box::new(|g, x| {
                let r = g.reshape(x[0], vec![4, 3]).unwrap();
                let row = g.select_row(r, 1).unwrap();
                let y = g.mul(row, row).unwrap();
                g.sum(y)
            })),
            ("cosine", vec![u.clone(), v.clone()], Box::new(|g, x| g.cosine_similarity(x[0], x[1]).unwrap())),
        ];

        for (name, inputs, f) in cases {
            let err = gradcheck(&inputs, f);
            assert!(err <= TOL, "{name} seed {seed}: relative error {err}");
        }
    }
}

#[test]
fn forward_examples() {
    let mut g = Graph::standalone();
    let u = g.leaf(Tensor::vector(vec![0.3, -1.2, 2.0]), false);
    let c = g.cosine_similarity(u, u).unwrap();
    assert!((g.value(c).item() - 1.0).abs() < 1e-12);

    let m = g.leaf(Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(), false);
    let p = g.mean_pool(m, &[1]).unwrap();
    assert_eq!(g.data(p), &[3.0, 4.0]);

    let z = g.leaf(Tensor::vector(vec![0.0, 0.0]), false);
    let s = g.softmax(z, 0).unwrap();
    assert_eq!(g.data(s), &[0.5, 0.5]);
}

#[test]
fn shape_errors_name_the_op() {
    let mut g = Graph::standalone();
    let a = g.leaf(Tensor::zeros(vec![2, 3]), true);
    let b = g.leaf(Tensor::zeros(vec![2, 3]), true);
    let err = g.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    let v = g.leaf(Tensor::zeros(vec![4]), true);
    assert!(g.add(a, v).unwrap_err().to_string().contains("add"));
    assert!(g.mean_pool(a, &[]).is_err());
    assert!(g.mean_pool(a, &[5]).is_err());
}

#[test]
fn sum_gives_all_ones() {
    let mut g = Graph::standalone();
    let w = g.leaf(Tensor::matrix(2, 2, vec![1.0, -3.0, 4.0, 0.5]).unwrap(), true);
    let s = g.sum(w);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.wrt(w).unwrap(), &[1.0; 4]);
}

#[test]
fn hinge_is_flat_below_and_at_zero() {
    for (x, expected) in [(-0.5, 0.0), (0.0, 0.0), (0.7, 1.0)] {
        let mut g = Graph::standalone();
        let v = g.leaf(Tensor::vector(vec![x]), true);
        let h = g.hinge(v);
        let s = g.sum(h);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(v).unwrap(), &[expected], "x = {x}");
    }
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut g = Graph::standalone();
    let w = g.leaf(Tensor::vector(vec![1.0, 2.0]), true);
    let y = g.scale(w, 2.0);
    assert!(g.backward(y).is_err());
}

#[test]
fn inference_graph_records_nothing() {
    let mut store = ParamStore::new();
    let id = store.push("w", Tensor::vector(vec![1.0, 2.0]));
    let mut g = Graph::inference(&store);
    let w = g.param(id);
    let s = g.sum(w);
    assert_eq!(g.value(s).item(), 3.0);
    assert!(!g.requires_grad(s));
    assert!(g.backward(s).is_err());
}

#[test]
fn parameter_gradients_accumulate_and_are_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let w = store.add("w", vec![3, 3], Init::Xavier, &mut rng);
        let mut g = Graph::new(&store);
        let x = g.constant(random(&mut rng, vec![2, 3]));
        let wv = g.param(w);
        // the same parameter used twice
        let y = g.matmul(x, wv).unwrap();
        let y = g.matmul(y, wv).unwrap();
        let y = g.mul(y, y).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        let mut buf = GradBuffer::zeros_like(&store);
        grads.accumulate_into(&mut buf, 0.5);
        buf.get(w).to_vec()
    };
    let a = run();
    assert_eq!(a, run());
    assert!(a.iter().any(|v| *v != 0.0));
}
