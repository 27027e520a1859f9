//! Central-difference verification of tape gradients, in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{iffnet_forward, BufferStore, Ctx, IffArchConfig, IffNet, ParamVars};
use crate::tape::{RunningStats, Tape, Var};
use crate::tensor::{AttentionAxis, Tensor};
use crate::train::multitask_loss;

/// Outcome of [`check_gradients`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(1, |analytic|)` over all elements.
    pub max_rel_error: f64,
    /// The same maximum restricted to each input.
    pub per_input: Vec<f64>,
    pub checked_elements: usize,
}

fn eval<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(Error::NonScalarLoss(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences with step `eps`, for every element of every input.
pub fn check_gradients<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid("finite_diff_check", "eps must be positive"));
    }
    let first = eval(&f, inputs)?;
    let second = eval(&f, inputs)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut per_input = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut checked = 0;
    for (i, &var) in vars.iter().enumerate() {
        let analytic = grads.get(var).expect("inputs require grad").clone();
        let mut worst = 0.0f64;
        for j in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[j];
            work[i].data_mut()[j] = x0 + eps;
            let plus = eval(&f, &work)?;
            work[i].data_mut()[j] = x0 - eps;
            let minus = eval(&f, &work)?;
            work[i].data_mut()[j] = x0;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[j];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            worst = if err.is_nan() {
                f64::INFINITY
            } else {
                worst.max(err)
            };
            checked += 1;
        }
        per_input.push(worst);
    }
    Ok(GradCheckReport {
        max_rel_error: per_input.iter().copied().fold(0.0, f64::max),
        per_input,
        checked_elements: checked,
    })
}

/// Single-input form of [`check_gradients`]; returns the max relative error.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    check_gradients(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)
        .map(|r| r.max_rel_error)
}

/// Result of one entry of [`standard_suite`].
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteEntry {
    pub name: String,
    pub max_rel_error: f64,
    pub checked_elements: usize,
}

/// Shape of the end-to-end network check.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetCheckShape {
    pub channels: usize,
    pub frames: usize,
    pub bins: usize,
    pub blocks: usize,
}

impl NetCheckShape {
    pub const SMALL: Self = Self {
        channels: 2,
        frames: 4,
        bins: 3,
        blocks: 1,
    };
    pub const LARGE: Self = Self {
        channels: 4,
        frames: 6,
        bins: 5,
        blocks: 1,
    };
}

pub const SUITE_EPS: f64 = 1e-5;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Weighted sum so every output element gets a distinct sensitivity.
fn probe(tape: &mut Tape<f64>, y: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let yw = tape.mul(y, w)?;
    Ok(tape.sum(yw))
}

fn entry(name: &str, r: GradCheckReport) -> SuiteEntry {
    SuiteEntry {
        name: name.to_string(),
        max_rel_error: r.max_rel_error,
        checked_elements: r.checked_elements,
    }
}

/// Gradient check of every primitive plus the full network under the
/// multitask loss, in `f64` with central differences.
pub fn standard_suite(seed: u64, nets: &[NetCheckShape]) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let (n, c, t, f) = (1, 3, 4, 5);
    let x4 = [n, c, t, f];

    macro_rules! check {
        ($name:expr, $inputs:expr, $out_shape:expr, |$tape:ident, $v:ident| $body:expr) => {{
            let w = random(&$out_shape, &mut rng);
            let r = check_gradients(
                |$tape: &mut Tape<f64>, $v: &[Var]| {
                    let y = $body?;
                    probe($tape, y, &w)
                },
                &$inputs,
                SUITE_EPS,
            )?;
            out.push(entry($name, r));
        }};
    }

    check!(
        "conv2d 3x3",
        [
            random(&x4, &mut rng),
            random(&[2, c, 3, 3], &mut rng),
            random(&[2], &mut rng)
        ],
        [n, 2, t, f],
        |tp, v| tp.conv2d(v[0], v[1], v[2])
    );
    check!(
        "conv2d 1x1",
        [
            random(&x4, &mut rng),
            random(&[2, c, 1, 1], &mut rng),
            random(&[2], &mut rng)
        ],
        [n, 2, t, f],
        |tp, v| tp.conv2d(v[0], v[1], v[2])
    );
    let running = RunningStats {
        mean: vec![0.1, -0.2, 0.3],
        var: vec![0.5, 1.5, 2.0],
    };
    for training in [true, false] {
        let name = if training {
            "batch_norm train"
        } else {
            "batch_norm eval"
        };
        check!(
            name,
            [
                random(&[2, c, t, f], &mut rng),
                random(&[c], &mut rng),
                random(&[c], &mut rng)
            ],
            [2, c, t, f],
            |tp, v| tp
                .batch_norm(v[0], v[1], v[2], &running, training)
                .map(|r| r.0)
        );
    }
    check!(
        "prelu",
        [random(&x4, &mut rng), random(&[c], &mut rng)],
        x4,
        |tp, v| tp.prelu(v[0], v[1])
    );
    check!(
        "sigmoid",
        [random(&x4, &mut rng)],
        x4,
        |tp, v| Ok::<_, Error>(tp.sigmoid(v[0]))
    );
    check!(
        "softmax_rows",
        [random(&[2, 3, 4], &mut rng)],
        [2, 3, 4],
        |tp, v| tp.softmax_rows(v[0])
    );
    check!(
        "matmul",
        [random(&[2, 3, 4], &mut rng), random(&[2, 4, 5], &mut rng)],
        [2, 3, 5],
        |tp, v| tp.matmul(v[0], v[1])
    );
    check!(
        "matmul_bt",
        [random(&[2, 3, 4], &mut rng), random(&[2, 5, 4], &mut rng)],
        [2, 3, 5],
        |tp, v| tp.matmul_bt(v[0], v[1])
    );
    for axis in [AttentionAxis::Temporal, AttentionAxis::Frequency] {
        let (rows, cols) = axis.matrix_dims(c, t, f);
        check!(
            &format!("reshape_axis {axis:?}"),
            [random(&x4, &mut rng)],
            [n, rows, cols],
            |tp, v| tp.reshape_axis(v[0], axis)
        );
        check!(
            &format!("reshape_axis_inv {axis:?}"),
            [random(&[n, rows, cols], &mut rng)],
            x4,
            |tp, v| tp.reshape_axis_inv(v[0], axis, &x4)
        );
    }
    check!(
        "concat_channels",
        [
            random(&[n, 1, t, f], &mut rng),
            random(&[n, 2, t, f], &mut rng)
        ],
        [n, 4, t, f],
        |tp, v| tp.concat_channels(&[v[0], v[1], v[0]])
    );
    check!(
        "add",
        [random(&x4, &mut rng), random(&x4, &mut rng)],
        x4,
        |tp, v| tp.add(v[0], v[1])
    );
    check!(
        "mul",
        [random(&x4, &mut rng), random(&x4, &mut rng)],
        x4,
        |tp, v| tp.mul(v[0], v[1])
    );
    let mask = Tensor::uniform(&x4, 0.05, 0.95, &mut rng);
    check!(
        "affine_combine",
        [random(&x4, &mut rng), random(&x4, &mut rng), mask],
        x4,
        |tp, v| tp.affine_combine(v[0], v[1], v[2])
    );
    {
        let r = check_gradients(
            |tp: &mut Tape<f64>, v: &[Var]| tp.mse(v[0], v[1]),
            &[random(&x4, &mut rng), random(&x4, &mut rng)],
            SUITE_EPS,
        )?;
        out.push(entry("mse", r));
    }
    for axis in [AttentionAxis::Temporal, AttentionAxis::Frequency] {
        check!(
            &format!("self_attention {axis:?}"),
            [random(&x4, &mut rng)],
            x4,
            |tp, v| {
                let params = ParamVars::default();
                let buffers = BufferStore::empty();
                let mut ctx = Ctx::new(tp, &params, &buffers, true);
                ctx.separable_self_attention(v[0], axis)
            }
        );
    }
    for shape in nets {
        let r = network_check(*shape, rng.random())?;
        out.push(entry(
            &format!(
                "iffnet+loss C={} T={} F={} B={}",
                shape.channels, shape.frames, shape.bins, shape.blocks
            ),
            r,
        ));
    }
    Ok(out)
}

/// End-to-end check of `iffnet_forward` followed by the multitask loss,
/// with respect to both inputs and every parameter. Training-mode
/// batch norm, batch of one.
pub fn network_check(shape: NetCheckShape, seed: u64) -> Result<GradCheckReport> {
    let cfg = IffArchConfig::sized(shape.blocks, shape.channels);
    let model = IffNet::<f64>::init(cfg.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
    let feat = [1, 1, shape.frames, shape.bins];
    let mut inputs = vec![
        random(&feat, &mut rng),
        random(&feat, &mut rng),
        random(&feat, &mut rng),
    ];
    let paths: Vec<String> = model.params.paths().map(str::to_string).collect();
    for (_, p) in model.params.iter() {
        // move slopes, gammas and biases off their symmetric initial values
        let jitter: Tensor<f64> = Tensor::uniform(p.shape(), -0.1, 0.1, &mut rng);
        let mut q = p.clone();
        q.data_mut()
            .iter_mut()
            .zip(jitter.data())
            .for_each(|(a, b)| *a += b);
        inputs.push(q);
    }
    let buffers = model.buffers.clone();
    check_gradients(
        |tp: &mut Tape<f64>, v: &[Var]| {
            let params = ParamVars::from_pairs(paths.iter().cloned().zip(v[3..].iter().copied()));
            let mut ctx = Ctx::new(tp, &params, &buffers, true);
            let vars = iffnet_forward(&mut ctx, &cfg, v[0], v[1])?;
            multitask_loss(tp, vars.fused, v[2], vars.enh.x_in, v[2], 0.3)
        },
        &inputs,
        SUITE_EPS,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(shape, -1.0, 1.0, &mut rng)
    }

    #[test]
    fn sum_of_squares() {
        let x = random(&[3, 4], 1);
        let err = finite_diff_check(
            |t, v| {
                let sq = t.mul(v, v)?;
                Ok(t.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn sum_of_sigmoid() {
        let x = random(&[5], 2);
        let err = finite_diff_check(
            |t, v| {
                let s = t.sigmoid(v);
                Ok(t.sum(s))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = random(&[4], 3);
        let err = finite_diff_check(|t, _| Ok(t.constant(Tensor::scalar(2.5))), &x, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn rejects_nondeterministic_function() {
        let x = random(&[2], 4);
        let calls = Cell::new(0u32);
        let res = finite_diff_check(
            |t, v| {
                calls.set(calls.get() + 1);
                let s = t.sum(v);
                Ok(t.scale(s, calls.get() as f64))
            },
            &x,
            1e-5,
        );
        assert!(matches!(res, Err(Error::NonDeterministic { .. })));
    }
}
