//! Central finite-difference gradient checks for tape operations.

use uvforge_core::nn::{NnError, Tape, Var};
use uvforge_core::rng;

pub type OpFn = dyn Fn(&mut Tape, &[Var]) -> Result<Var, NnError>;

/// How to draw one input tensor.
#[derive(Clone, Copy)]
pub enum Draw {
    /// Standard normal.
    Normal,
    /// Normal but kept at least `gap` away from zero (for kinks at 0).
    AwayFromZero(f64),
    /// Uniform in `[lo, hi]`.
    Uniform(f64, f64),
}

pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<(Vec<usize>, Draw)>,
    pub f: Box<OpFn>,
}

fn draw(r: &mut rng::SeededRng, d: Draw) -> f64 {
    match d {
        Draw::Normal => rng::standard_normal(r),
        Draw::AwayFromZero(gap) => {
            let v = rng::standard_normal(r);
            v.signum() * (v.abs() + gap)
        }
        Draw::Uniform(lo, hi) => rng::uniform(r, lo, hi),
    }
}

/// Largest relative difference between backward gradients and central
/// differences of `sum(f(inputs) * R)` for a random weighting `R`.
/// Relative error is `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn max_relative_error(case: &OpCase, seed: u64) -> f64 {
    let mut r = rng::seeded(seed);
    let values: Vec<Vec<f64>> = case
        .inputs
        .iter()
        .map(|(shape, d)| (0..shape.iter().product::<usize>()).map(|_| draw(&mut r, *d)).collect())
        .collect();

    let mut tape = Tape::new();
    let vars: Vec<Var> = values.iter().zip(&case.inputs).map(|(v, (s, _))| tape.variable(v.clone(), s).unwrap()).collect();
    let out = (case.f)(&mut tape, &vars).unwrap();
    let out_shape = tape.shape(out).to_vec();
    let weights: Vec<f64> = (0..tape.value(out).len()).map(|_| rng::standard_normal(&mut r)).collect();
    let wv = tape.constant(weights.clone(), &out_shape).unwrap();
    let m = tape.mul(out, wv).unwrap();
    let loss = tape.sum(m).unwrap();
    let grads = tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| grads.wrt(v).map_or_else(|| vec![0.0; tape.value(v).len()], |g| g.to_vec())).collect();

    let eval = |vals: &[Vec<f64>]| -> f64 {
        let mut t = Tape::new();
        let vs: Vec<Var> = vals.iter().zip(&case.inputs).map(|(v, (s, _))| t.constant(v.clone(), s).unwrap()).collect();
        let o = (case.f)(&mut t, &vs).unwrap();
        t.value(o).iter().zip(&weights).map(|(a, b)| a * b).sum()
    };
    let h = 1e-5;
    let mut worst = 0.0f64;
    for i in 0..values.len() {
        for j in 0..values[i].len() {
            let mut plus = values.clone();
            plus[i][j] += h;
            let mut minus = values.clone();
            minus[i][j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic[i][j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    worst
}

/// Every differentiable tape operation, on small random tensors.
pub fn op_cases() -> Vec<OpCase> {
    use Draw::*;
    let mut cases = vec![
        OpCase {
            name: "conv2d_stride1",
            inputs: vec![(vec![2, 2, 5, 5], Normal), (vec![3, 2, 3, 3], Normal), (vec![3], Normal)],
            f: Box::new(|t, v| t.conv2d(v[0], v[1], v[2], 1, 1)),
        },
        OpCase {
            name: "conv2d_stride2",
            inputs: vec![(vec![2, 3, 6, 6], Normal), (vec![2, 3, 4, 4], Normal), (vec![2], Normal)],
            f: Box::new(|t, v| t.conv2d(v[0], v[1], v[2], 2, 1)),
        },
        OpCase {
            name: "conv_transpose2d",
            inputs: vec![(vec![2, 3, 3, 3], Normal), (vec![3, 2, 4, 4], Normal), (vec![2], Normal)],
            f: Box::new(|t, v| t.conv_transpose2d(v[0], v[1], v[2], 2, 1)),
        },
        OpCase {
            name: "linear",
            inputs: vec![(vec![3, 5], Normal), (vec![4, 5], Normal), (vec![4], Normal)],
            f: Box::new(|t, v| t.linear(v[0], v[1], v[2])),
        },
        OpCase { name: "leaky_relu", inputs: vec![(vec![2, 9], AwayFromZero(0.01))], f: Box::new(|t, v| t.leaky_relu(v[0], 0.2)) },
        OpCase { name: "relu", inputs: vec![(vec![2, 9], AwayFromZero(0.01))], f: Box::new(|t, v| t.relu(v[0])) },
        OpCase { name: "sigmoid", inputs: vec![(vec![2, 9], Normal)], f: Box::new(|t, v| t.sigmoid(v[0])) },
        OpCase { name: "tanh", inputs: vec![(vec![2, 9], Normal)], f: Box::new(|t, v| t.tanh(v[0])) },
        OpCase { name: "abs", inputs: vec![(vec![2, 9], AwayFromZero(0.01))], f: Box::new(|t, v| t.abs(v[0])) },
        OpCase { name: "square", inputs: vec![(vec![2, 9], Normal)], f: Box::new(|t, v| t.square(v[0])) },
        OpCase { name: "log", inputs: vec![(vec![2, 9], Uniform(0.2, 3.0))], f: Box::new(|t, v| t.log(v[0])) },
        OpCase { name: "affine", inputs: vec![(vec![2, 9], Normal)], f: Box::new(|t, v| t.affine(v[0], -1.7, 0.3)) },
        OpCase {
            name: "clamp",
            inputs: vec![(vec![3, 9], Uniform(-2.0, 2.0))],
            f: Box::new(|t, v| {
                // Kinks at +-1 are avoided by pushing inputs off them.
                let shifted = t.affine(v[0], 1.0, 0.0)?;
                t.clamp(shifted, -1.0, 1.0)
            }),
        },
        OpCase { name: "add", inputs: vec![(vec![2, 7], Normal), (vec![2, 7], Normal)], f: Box::new(|t, v| t.add(v[0], v[1])) },
        OpCase { name: "sub", inputs: vec![(vec![2, 7], Normal), (vec![2, 7], Normal)], f: Box::new(|t, v| t.sub(v[0], v[1])) },
        OpCase { name: "mul", inputs: vec![(vec![2, 7], Normal), (vec![2, 7], Normal)], f: Box::new(|t, v| t.mul(v[0], v[1])) },
        OpCase {
            name: "concat_channels",
            inputs: vec![(vec![2, 2, 3, 3], Normal), (vec![2, 1, 3, 3], Normal)],
            f: Box::new(|t, v| t.concat_channels(v[0], v[1])),
        },
        OpCase { name: "crop", inputs: vec![(vec![2, 2, 6, 5], Normal)], f: Box::new(|t, v| t.crop(v[0], 1, 2, 3, 2)) },
        OpCase { name: "reshape", inputs: vec![(vec![2, 3, 2], Normal)], f: Box::new(|t, v| t.reshape(v[0], &[3, 4])) },
        OpCase { name: "sum", inputs: vec![(vec![3, 4], Normal)], f: Box::new(|t, v| t.sum(v[0])) },
        OpCase { name: "mean", inputs: vec![(vec![3, 4], Normal)], f: Box::new(|t, v| t.mean(v[0])) },
        OpCase { name: "sum_rows", inputs: vec![(vec![3, 4], Normal)], f: Box::new(|t, v| t.sum_rows(v[0])) },
        OpCase {
            name: "gather",
            inputs: vec![(vec![2, 3, 4, 4], Normal)],
            f: Box::new(|t, v| {
                let map = |shift: u32| {
                    std::rc::Rc::new(uvforge_core::nn::SparseMap {
                        input_len: 16,
                        rows: (0..5u32).map(|r| vec![((r * 3 + shift) % 16, 0.5), ((r * 7 + 1) % 16, -1.25)]).collect(),
                    })
                };
                t.gather(v[0], vec![map(0), map(5)])
            }),
        },
        OpCase {
            name: "softmax_cross_entropy",
            inputs: vec![(vec![4, 5], Normal)],
            f: Box::new(|t, v| t.softmax_cross_entropy(v[0], &[0, 3, 4, 3])),
        },
    ];
    cases.push(OpCase {
        name: "log_one_minus_sigmoid",
        inputs: vec![(vec![2, 6], Normal)],
        f: Box::new(|t, v| {
            let p = t.sigmoid(v[0])?;
            let q = t.affine(p, -1.0, 1.0)?;
            t.log(q)
        }),
    });
    cases
}
