#![allow(dead_code)]

use ctrlkit::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Normal entries pushed at least `gap` away from zero (for kinks).
pub fn randn_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = StandardNormal.sample(rng);
            if v.abs() > gap {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn weighted_sum<F>(inputs: &[Tensor<f64>], build: &F, weights: &Tensor<f64>) -> f64
where
    F: Fn(&mut Tape<'_, f64>, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = build(&mut tape, &vars);
    tape.value(out)
        .data()
        .iter()
        .zip(weights.data())
        .map(|(a, b)| a * b)
        .sum()
}

/// Relative error `‖fd − analytic‖ / max(‖fd‖, ‖analytic‖)` of the gradient
/// of `Σ w ⊙ build(inputs)` with random weights `w`, by central differences.
pub fn grad_rel_error<F>(inputs: &[Tensor<f64>], build: F, h: f64, rng: &mut ChaCha8Rng) -> f64
where
    F: Fn(&mut Tape<'_, f64>, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = build(&mut tape, &vars);
    let weights = randn(rng, tape.value(out).shape());
    let grads = tape.backward_with(out, weights.clone()).unwrap();

    let mut diff = 0.0;
    let mut fd_norm = 0.0;
    let mut an_norm = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let zeros = Tensor::zeros(inputs[i].shape().to_vec());
        let analytic = grads.get(*v).unwrap_or(&zeros);
        for k in 0..inputs[i].numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[k] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[k] -= h;
            let fd = (weighted_sum(&plus, &build, &weights) - weighted_sum(&minus, &build, &weights)) / (2.0 * h);
            let an = analytic.data()[k];
            diff += (fd - an).powi(2);
            fd_norm += fd * fd;
            an_norm += an * an;
        }
    }
    let scale = fd_norm.sqrt().max(an_norm.sqrt());
    if scale < 1e-12 {
        diff.sqrt()
    } else {
        diff.sqrt() / scale
    }
}

pub fn dims(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Every differentiable tape op, as `(name, case runner)`. Each runner draws
/// random shapes and values and returns the relative gradient error.
pub fn op_cases() -> Vec<(&'static str, fn(&mut ChaCha8Rng, f64) -> f64)> {
    vec![
        ("matmul", |r, h| {
            let (m, k, n) = (dims(r, 1, 5), dims(r, 1, 5), dims(r, 1, 5));
            let ins = [randn(r, &[m, k]), randn(r, &[k, n])];
            grad_rel_error(&ins, |t, v| t.matmul(v[0], v[1]).unwrap(), h, r)
        }),
        ("transpose", |r, h| {
            let shape = [dims(r, 1, 5), dims(r, 1, 5)];
            let ins = [randn(r, &shape)];
            grad_rel_error(&ins, |t, v| t.transpose(v[0]).unwrap(), h, r)
        }),
        ("add", |r, h| {
            let shape = [dims(r, 1, 4), dims(r, 1, 5)];
            let ins = [randn(r, &shape), randn(r, &shape)];
            grad_rel_error(&ins, |t, v| t.add(v[0], v[1]).unwrap(), h, r)
        }),
        ("scale", |r, h| {
            let f: f64 = r.random_range(-3.0..3.0);
            let shape = [dims(r, 1, 4), dims(r, 1, 5)];
            let ins = [randn(r, &shape)];
            grad_rel_error(&ins, move |t, v| t.scale(v[0], f), h, r)
        }),
        ("relu", |r, h| {
            let shape = [dims(r, 1, 4), dims(r, 1, 6)];
            let ins = [randn_away_from_zero(r, &shape, 1e-2)];
            grad_rel_error(&ins, |t, v| t.relu(v[0]), h, r)
        }),
        ("softmax_rows", |r, h| {
            let shape = [dims(r, 1, 4), dims(r, 1, 6)];
            let ins = [randn(r, &shape)];
            grad_rel_error(&ins, |t, v| t.softmax_rows(v[0]).unwrap(), h, r)
        }),
        ("causal_mask", |r, h| {
            let n = dims(r, 1, 5);
            let ins = [randn(r, &[n, n])];
            grad_rel_error(
                &ins,
                |t, v| {
                    let m = t.causal_mask(v[0]).unwrap();
                    t.softmax_rows(m).unwrap()
                },
                h,
                r,
            )
        }),
        ("layernorm", |r, h| {
            let (m, n) = (dims(r, 1, 4), dims(r, 2, 6));
            let ins = [randn(r, &[m, n]), randn(r, &[n]), randn(r, &[n])];
            grad_rel_error(&ins, |t, v| t.layernorm(v[0], v[1], v[2], 1e-5).unwrap(), h, r)
        }),
        ("embed", |r, h| {
            let (vocab, d) = (dims(r, 2, 7), dims(r, 1, 4));
            let ids: Vec<u32> = (0..dims(r, 1, 6)).map(|_| r.random_range(0..vocab as u32)).collect();
            let ins = [randn(r, &[vocab, d])];
            grad_rel_error(&ins, move |t, v| t.embed(v[0], &ids).unwrap(), h, r)
        }),
        ("cross_entropy", |r, h| {
            let (m, vocab) = (dims(r, 1, 4), dims(r, 2, 7));
            let targets: Vec<u32> = (0..m).map(|_| r.random_range(0..vocab as u32)).collect();
            let ins = [randn(r, &[m, vocab])];
            grad_rel_error(&ins, move |t, v| t.cross_entropy(v[0], &targets).unwrap(), h, r)
        }),
        ("dropout", |r, h| {
            let seed: u64 = r.random();
            let shape = [dims(r, 1, 4), dims(r, 1, 6)];
            let ins = [randn(r, &shape)];
            grad_rel_error(
                &ins,
                move |t, v| t.dropout(v[0], 0.3, true, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap(),
                h,
                r,
            )
        }),
        ("slice", |r, h| {
            let (m, n) = (dims(r, 1, 5), dims(r, 1, 5));
            let (r0, c0) = (r.random_range(0..m), r.random_range(0..n));
            let (r1, c1) = (r.random_range(r0 + 1..=m), r.random_range(c0 + 1..=n));
            let ins = [randn(r, &[m, n])];
            grad_rel_error(&ins, move |t, v| t.slice(v[0], r0..r1, c0..c1).unwrap(), h, r)
        }),
        ("concat_cols", |r, h| {
            let m = dims(r, 1, 4);
            let ins: Vec<Tensor<f64>> = (0..dims(r, 1, 3))
                .map(|_| {
                    let n = dims(r, 1, 3);
                    randn(r, &[m, n])
                })
                .collect();
            grad_rel_error(&ins, |t, v| t.concat_cols(v).unwrap(), h, r)
        }),
        ("concat_rows", |r, h| {
            let n = dims(r, 1, 4);
            let ins: Vec<Tensor<f64>> = (0..dims(r, 1, 3))
                .map(|_| {
                    let m = dims(r, 1, 3);
                    randn(r, &[m, n])
                })
                .collect();
            grad_rel_error(&ins, |t, v| t.concat_rows(v).unwrap(), h, r)
        }),
    ]
}
