#![allow(dead_code)]

use kd_core::losses::{fbce, kd_total, probabilities, soft_mse, LossConfig};
use kd_core::tensor::{finite_diff_check, Tape, Tensor, Var};
use kd_core::Result;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

pub const FD_STEP: f64 = 1e-3;

pub const PRIMITIVES: &[&str] = &[
    "conv2d.input",
    "conv2d.kernel",
    "conv2d.bias",
    "maxpool2d",
    "global_avg_pool",
    "dense.input",
    "dense.weight",
    "dense.bias",
    "relu",
    "sigmoid",
    "log",
    "pow_const",
    "scale",
    "add_const",
    "clamp",
    "add",
    "sub",
    "mul",
    "sum_all",
    "mean_all",
    "sum_axes",
    "mean_axes",
    "reshape",
];

pub const LOSSES: &[&str] = &["fbce", "soft_mse", "kd_total"];

pub fn rng(seed: u64) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values at least 0.05 apart, so that a finite-difference probe never
/// changes which element wins a max or which side of a kink it is on.
fn separated(rng: &mut impl Rng, shape: &[usize], offset: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| offset + 0.05 * (i as f64 - n as f64 / 2.0)).collect();
    v.shuffle(rng);
    Tensor::new(shape.to_vec(), v).unwrap()
}

/// Reduces `out` to a scalar with fixed random weights so every output
/// element contributes a distinct gradient.
fn weighted_sum(tape: &mut Tape, out: Var, weights_seed: u64) -> Result<Var> {
    let shape = tape.shape(out)?.to_vec();
    let w = uniform(&mut rng(weights_seed), &shape, -1.0, 1.0);
    let wv = tape.constant(&w)?;
    let prod = tape.mul(out, wv)?;
    tape.sum_all(prod)
}

/// Worst relative finite-difference error of one randomized trial.
pub fn primitive_error(name: &str, trial: u64) -> Result<f64> {
    let mut r = rng(0x5eed ^ trial.wrapping_mul(7919) ^ (name.len() as u64 * 131));
    let ws = r.random::<u64>();
    let b = r.random_range(1..=2);
    let c = r.random_range(1..=3);
    let h = r.random_range(3..=6);
    let w = r.random_range(3..=6);
    let k = r.random_range(1..=3);
    let stride = r.random_range(1..=2);
    let pad = r.random_range(0..=1);
    let o = r.random_range(1..=3);
    let input = uniform(&mut r, &[b, c, h, w], -1.0, 1.0);
    let kernel = uniform(&mut r, &[o, c, k, k], -1.0, 1.0);
    let bias = uniform(&mut r, &[o], -1.0, 1.0);
    let (fi, fo) = (r.random_range(1..=5), r.random_range(1..=4));
    let x2 = uniform(&mut r, &[b, fi], -1.0, 1.0);
    let dw = uniform(&mut r, &[fo, fi], -1.0, 1.0);
    let db = uniform(&mut r, &[fo], -1.0, 1.0);
    let general = uniform(&mut r, &[2, 3, 2], -2.0, 2.0);
    let other = uniform(&mut r, &[2, 3, 2], -2.0, 2.0);
    let positive = uniform(&mut r, &[2, 3, 2], 0.2, 3.0);
    let factor = r.random_range(-3.0..3.0);

    macro_rules! check {
        ($point:expr, |$t:ident, $x:ident| $body:expr) => {{
            finite_diff_check(
                |$t: &mut Tape, $x: Var| {
                    let out = $body?;
                    weighted_sum($t, out, ws)
                },
                &$point,
                FD_STEP,
            )
        }};
    }

    match name {
        "conv2d.input" => check!(input, |t, x| {
            let (kv, bv) = (t.constant(&kernel)?, t.constant(&bias)?);
            t.conv2d(x, kv, bv, stride, pad)
        }),
        "conv2d.kernel" => check!(kernel, |t, x| {
            let (iv, bv) = (t.constant(&input)?, t.constant(&bias)?);
            t.conv2d(iv, x, bv, stride, pad)
        }),
        "conv2d.bias" => check!(bias, |t, x| {
            let (iv, kv) = (t.constant(&input)?, t.constant(&kernel)?);
            t.conv2d(iv, kv, x, stride, pad)
        }),
        "maxpool2d" => {
            let win = r.random_range(1..=2);
            let p = separated(&mut r, &[b, c, 2 * h, 2 * w], 0.0);
            check!(p, |t, x| t.maxpool2d(x, win))
        }
        "global_avg_pool" => check!(input, |t, x| t.global_avg_pool(x)),
        "dense.input" => check!(x2, |t, x| {
            let (wv, bv) = (t.constant(&dw)?, t.constant(&db)?);
            t.dense(x, wv, bv)
        }),
        "dense.weight" => check!(dw, |t, x| {
            let (iv, bv) = (t.constant(&x2)?, t.constant(&db)?);
            t.dense(iv, x, bv)
        }),
        "dense.bias" => check!(db, |t, x| {
            let (iv, wv) = (t.constant(&x2)?, t.constant(&dw)?);
            t.dense(iv, wv, x)
        }),
        "relu" => {
            let p = separated(&mut r, &[2, 3, 2], 0.025);
            check!(p, |t, x| t.relu(x))
        }
        "sigmoid" => check!(general, |t, x| t.sigmoid(x)),
        "log" => check!(positive, |t, x| t.log(x)),
        "pow_const" => {
            let e = r.random_range(0.0..3.0);
            check!(positive, |t, x| t.pow_const(x, e))
        }
        "scale" => check!(general, |t, x| t.scale(x, factor)),
        "add_const" => check!(general, |t, x| t.add_const(x, factor)),
        "clamp" => {
            let p = separated(&mut r, &[2, 3, 2], 0.0125);
            check!(p, |t, x| t.clamp(x, -0.1, 0.1))
        }
        "add" => check!(general, |t, x| {
            let y = t.constant(&other)?;
            t.add(x, y)
        }),
        "sub" => check!(general, |t, x| {
            let y = t.constant(&other)?;
            t.sub(y, x)
        }),
        "mul" => check!(general, |t, x| {
            let y = t.constant(&other)?;
            let xy = t.mul(x, y)?;
            t.mul(xy, x)
        }),
        "sum_all" => check!(general, |t, x| t.sum_all(x)),
        "mean_all" => check!(general, |t, x| t.mean_all(x)),
        "sum_axes" => check!(general, |t, x| t.sum_axes(x, &[0, 2])),
        "mean_axes" => check!(general, |t, x| t.mean_axes(x, &[1])),
        "reshape" => check!(general, |t, x| t.reshape(x, &[3, 4])),
        other => panic!("unknown primitive {other}"),
    }
}

/// Worst relative error of a loss's gradient with respect to student
/// logits, for one randomized trial.
pub fn loss_error(name: &str, trial: u64) -> Result<f64> {
    let mut r = rng(0x1055 ^ trial.wrapping_mul(104_729) ^ name.len() as u64);
    let (b, c) = (r.random_range(1..=6), r.random_range(1..=5));
    let logits = uniform(&mut r, &[b, c], -3.0, 3.0);
    let teacher = uniform(&mut r, &[b, c], -4.0, 4.0);
    let y = Tensor::new(
        [b, c],
        (0..b * c).map(|_| f64::from(u8::from(r.random_bool(0.4)))).collect(),
    )
    .unwrap();
    let cfg = LossConfig {
        alpha: r.random_range(0.0..=1.0),
        gamma: [0.0, 1.0, 2.0, r.random_range(0.0..5.0)][r.random_range(0..4)],
        temperature: r.random_range(0.5..8.0),
        ..LossConfig::default()
    };
    // Loss gradients are O(1/numel); compare them at unit scale.
    let scale = (b * c) as f64;
    let f = |t: &mut Tape, x: Var| -> Result<Var> {
        let loss = match name {
            "fbce" => {
                let p = probabilities(t, x, cfg.eps)?;
                fbce(t, p, &y, cfg.gamma)?
            }
            "soft_mse" => soft_mse(t, x, &teacher, cfg.temperature)?,
            "kd_total" => {
                let p = probabilities(t, x, cfg.eps)?;
                kd_total(t, p, x, &teacher, &y, &cfg)?.total
            }
            other => panic!("unknown loss {other}"),
        };
        t.scale(loss, scale)
    };
    finite_diff_check(f, &logits, FD_STEP)
}
