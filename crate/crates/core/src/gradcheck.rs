//! Central finite-difference verification of tape gradients.

use crate::autodiff::{Tape, UnaryKind, Var};
use crate::error::{DapaError, Result};
use crate::layers::{
    bilstm_forward, linear_forward, mlp_head_forward, scaled_dot_attention, AttentionParams,
    ForwardCtx, LinearParams, LstmStackParams,
};
use crate::model::{DapaModel, ModelConfig};
use crate::params::{Bound, ParamStore};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Worst coordinate found by a finite-difference comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub analytic: f64,
    pub numeric: f64,
    /// `(input index, flat coordinate)` of the worst entry.
    pub worst: (usize, usize),
    pub coordinates: usize,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares tape gradients of a scalar function against central differences
/// `(f(x + eps e_i) - f(x - eps e_i)) / 2 eps` for every coordinate of `x`.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    finite_diff_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)
}

/// Multi-input variant: every coordinate of every input is perturbed.
pub fn finite_diff_check_many<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(DapaError::Usage(format!("finite-difference step must be positive, got {eps}")));
    }
    let eval = |ts: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ts.iter().map(|t| tape.param(t)).collect();
        let out = f(&mut tape, &vars)?;
        scalar_of(&tape, out)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let out = f(&mut tape, &vars)?;
    scalar_of(&tape, out)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheck {
        max_rel_error: 0.0,
        analytic: 0.0,
        numeric: 0.0,
        worst: (0, 0),
        coordinates: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let zeros = vec![0.0; inputs[which].numel()];
        let analytic = grads.get(*var).unwrap_or(&zeros).to_vec();
        for (i, &a) in analytic.iter().enumerate() {
            let orig = inputs[which].data()[i];
            work[which].data_mut()[i] = orig + eps;
            let plus = eval(&work)?;
            work[which].data_mut()[i] = orig - eps;
            let minus = eval(&work)?;
            work[which].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(a, numeric);
            report.coordinates += 1;
            if err > report.max_rel_error || report.coordinates == 1 {
                report.max_rel_error = err;
                report.analytic = a;
                report.numeric = numeric;
                report.worst = (which, i);
            }
        }
    }
    Ok(report)
}

fn scalar_of(tape: &Tape<f64>, v: Var) -> Result<f64> {
    match tape.value(v) {
        [x] => Ok(*x),
        _ => Err(DapaError::Usage(format!(
            "checked function must return a scalar, got shape {:?}",
            tape.shape(v)
        ))),
    }
}


/// Result of one named block of the verification suite.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockResult {
    pub block: String,
    pub check: GradCheck,
    pub tolerance: f64,
}

impl BlockResult {
    pub fn passed(&self) -> bool {
        self.check.max_rel_error < self.tolerance
    }
}

pub const SUITE_TOLERANCE: f64 = 1e-4;
/// Root seed of every random input in [`run_suite`].
pub const SUITE_SEED: u64 = 0x6772_6164;
/// Step for single primitives and layer blocks.
pub const BLOCK_EPS: f64 = 1e-5;
/// Step for the end-to-end model check (see [`end_to_end_check`]).
pub const END_TO_END_EPS: f64 = 5e-4;

fn random(shape: &[usize], rng: &mut RngStream) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.uniform_range(-1.0, 1.0))
}

/// `sum(y * r)` with a fixed random `r`, so every output entry carries a
/// distinct upstream gradient.
fn weighted_sum(tape: &mut Tape<f64>, y: Var, rng: &mut RngStream) -> Result<Var> {
    let r = random(tape.shape(y), rng);
    let rv = tape.constant(&r);
    let p = tape.mul(y, rv)?;
    Ok(tape.sum(p))
}

type BlockFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

fn block(name: &str, inputs: Vec<Tensor<f64>>, f: BlockFn) -> Result<BlockResult> {
    Ok(BlockResult {
        block: name.to_string(),
        check: finite_diff_check_many(f, &inputs, BLOCK_EPS)?,
        tolerance: SUITE_TOLERANCE,
    })
}

/// Every tape primitive and layer block at small random sizes; with `full`
/// also the end-to-end model and loss.
pub fn run_suite(full: bool) -> Result<Vec<BlockResult>> {
    let mut rng = RngStream::new(SUITE_SEED);
    let mut out = Vec::new();
    let mut r = |shape: &[usize]| random(shape, &mut rng);

    out.push(block("matmul", vec![r(&[3, 4]), r(&[4, 2])], Box::new(|t, v| {
        let y = t.matmul(v[0], v[1])?;
        weighted_sum(t, y, &mut RngStream::new(1))
    }))?);
    out.push(block("matmul_transposed", vec![r(&[4, 3]), r(&[2, 4])], Box::new(|t, v| {
        let y = t.matmul_t(v[0], v[1], true, true)?;
        weighted_sum(t, y, &mut RngStream::new(2))
    }))?);
    out.push(block("add_row_bias", vec![r(&[3, 4]), r(&[4])], Box::new(|t, v| {
        let y = t.add_row_bias(v[0], v[1])?;
        weighted_sum(t, y, &mut RngStream::new(3))
    }))?);
    out.push(block("add_sub_mul", vec![r(&[2, 3]), r(&[2, 3])], Box::new(|t, v| {
        let a = t.add(v[0], v[1])?;
        let s = t.sub(v[0], v[1])?;
        let m = t.mul(a, s)?;
        let y = t.scale(m, 0.7);
        weighted_sum(t, y, &mut RngStream::new(4))
    }))?);
    for (name, kind) in [
        ("tanh", UnaryKind::Tanh),
        ("sigmoid", UnaryKind::Sigmoid),
        ("exp", UnaryKind::Exp),
        ("neg", UnaryKind::Neg),
    ] {
        out.push(block(name, vec![r(&[3, 3])], Box::new(move |t, v| {
            let y = t.unary(v[0], kind);
            weighted_sum(t, y, &mut RngStream::new(5))
        }))?);
    }
    out.push(block("softmax_rows", vec![r(&[3, 5])], Box::new(|t, v| {
        let y = t.softmax_rows(v[0]);
        weighted_sum(t, y, &mut RngStream::new(6))
    }))?);
    out.push(block("concat_slice", vec![r(&[2, 3]), r(&[2, 2])], Box::new(|t, v| {
        let c = t.concat(&[v[0], v[1]], 1)?;
        let s = t.slice(c, 1, 1, 3)?;
        let c0 = t.concat(&[s, v[0]], 0)?;
        weighted_sum(t, c0, &mut RngStream::new(7))
    }))?);
    out.push(block("mul_const", vec![r(&[2, 3])], Box::new(|t, v| {
        let c = std::sync::Arc::new(vec![0.5, -1.5, 2.0, 0.0, 1.0, 3.0]);
        let y = t.mul_const(v[0], c)?;
        weighted_sum(t, y, &mut RngStream::new(16))
    }))?);
    out.push(block("dropout", vec![r(&[4, 4])], Box::new(|t, v| {
        let y = t.dropout(v[0], 0.3, &mut RngStream::new(8), true)?;
        weighted_sum(t, y, &mut RngStream::new(9))
    }))?);
    out.push(block("ccc_loss", vec![r(&[12])], Box::new(|t, v| {
        let truth: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).sin()).collect();
        t.ccc_loss(v[0], &truth)
    }))?);
    out.push(block("lstm_forward_direction", vec![r(&[5, 3]), r(&[8, 3]), r(&[8, 2]), r(&[8])], Box::new(|t, v| {
        let y = t.lstm(v[0], v[1], v[2], v[3], false)?;
        weighted_sum(t, y, &mut RngStream::new(10))
    }))?);
    out.push(block("lstm_backward_direction", vec![r(&[5, 3]), r(&[8, 3]), r(&[8, 2]), r(&[8])], Box::new(|t, v| {
        let y = t.lstm(v[0], v[1], v[2], v[3], true)?;
        weighted_sum(t, y, &mut RngStream::new(11))
    }))?);
    out.push(layer_block("linear", &mut rng, |store, rng| {
        let p = LinearParams::init(store, "fc", 4, 3, rng);
        Box::new(move |t, b, x, rng| {
            let y = linear_forward(t, b, &p, x)?;
            weighted_sum(t, y, rng)
        })
    }, &[6, 4])?);
    out.push(layer_block("bilstm_stack", &mut rng, |store, rng| {
        let p = LstmStackParams::init(store, "enc", 4, 3, 2, rng);
        Box::new(move |t, b, x, rng| {
            let mut ctx = ForwardCtx::train(0.2, RngStream::new(12));
            let (f, bw) = bilstm_forward(t, b, &p, x, &mut ctx)?;
            let y = t.concat(&[f, bw], 1)?;
            weighted_sum(t, y, rng)
        })
    }, &[6, 4])?);
    out.push(layer_block("cross_attention", &mut rng, |store, rng| {
        let p = AttentionParams::init(store, "att", 4, 2, true, rng).expect("4 splits into 2 heads");
        Box::new(move |t, b, x, rng| {
            let kv = t.slice(x, 0, 1, 4)?;
            let kv = t.tanh(kv);
            let y = scaled_dot_attention(t, b, &p, x, kv, kv)?;
            weighted_sum(t, y, rng)
        })
    }, &[6, 4])?);
    out.push(layer_block("mlp_head", &mut rng, |store, rng| {
        let layers = vec![
            LinearParams::init(store, "h0", 4, 5, rng),
            LinearParams::init(store, "h1", 5, 1, rng),
        ];
        Box::new(move |t, b, x, rng| {
            let mut ctx = ForwardCtx::train(0.2, RngStream::new(13));
            let y = mlp_head_forward(t, b, &layers, x, &mut ctx)?;
            weighted_sum(t, y, rng)
        })
    }, &[6, 4])?);
    if full {
        out.push(end_to_end_check()?);
    }
    Ok(out)
}

type LayerFn = Box<dyn Fn(&mut Tape<f64>, &Bound, Var, &mut RngStream) -> Result<Var>>;

/// Checks a layer against its parameters and its input together.
fn layer_block(
    name: &str,
    rng: &mut RngStream,
    build: impl FnOnce(&mut ParamStore<f64>, &mut RngStream) -> LayerFn,
    input_shape: &[usize],
) -> Result<BlockResult> {
    let mut store = ParamStore::new();
    let f = build(&mut store, rng);
    let mut inputs: Vec<Tensor<f64>> = store.tensors().to_vec();
    // Non-zero biases so their gradients do not hide behind a zero init.
    for t in &mut inputs {
        t.data_mut().iter_mut().for_each(|v| *v += rng.uniform_range(-0.2, 0.2));
    }
    inputs.push(random(input_shape, rng));
    let np = store.len();
    block(name, inputs, Box::new(move |t, v| {
        let bound = Bound::from_vars(v[..np].to_vec());
        f(t, &bound, v[np], &mut RngStream::new(14))
    }))
}

/// Full model plus CCC loss at `d_model = 8`, 6-frame windows and two
/// interaction layers, with dropout active under a fixed mask.
///
/// Parameters are drawn uniformly from `[-0.8, 0.8]`: a freshly initialised
/// model outputs nearly constant scores, which leaves gradients so small that
/// f64 rounding dominates any finite difference. Even so, some coordinates
/// carry gradients near 1e-8, so the step sits where rounding (`~1/eps`)
/// and truncation (`~eps^2`) errors balance.
pub fn end_to_end_check() -> Result<BlockResult> {
    end_to_end_check_at(END_TO_END_EPS)
}

pub fn end_to_end_check_at(eps: f64) -> Result<BlockResult> {
    let cfg = ModelConfig {
        d_in: 5,
        d_prompt: 3,
        d_model: 8,
        lstm_layers: 2,
        num_dapa_layers: 2,
        attention_heads: 2,
        head_hidden: vec![8],
        window_len: 6,
        ..ModelConfig::default()
    };
    let domains = vec!["alpha".to_string(), "beta".to_string()];
    let mut model = DapaModel::<f64>::new(cfg, &domains, 3)?;
    let mut rng = RngStream::new(0xe2e);
    for t in model.params.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = rng.uniform_range(-0.8, 0.8));
    }
    let xt = random(&[6, 5], &mut rng);
    let xp = random(&[6, 5], &mut rng);
    let truth: Vec<f64> = (0..6).map(|_| rng.uniform()).collect();
    let check = finite_diff_check_many(
        |tape, vars| {
            let bound = Bound::from_vars(vars.to_vec());
            let (a, b) = (tape.constant(&xt), tape.constant(&xp));
            let mut ctx = ForwardCtx::train(0.1, RngStream::new(15));
            let y = model.forward(tape, &bound, a, b, "beta", &mut ctx)?;
            tape.ccc_loss(y, &truth)
        },
        model.params.tensors(),
        eps,
    )?;
    Ok(BlockResult {
        block: "dapa_end_to_end".into(),
        check,
        tolerance: SUITE_TOLERANCE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = RngStream::new(seed);
        Tensor::from_fn(shape, |_| rng.uniform_range(-1.0, 1.0))
    }

    #[test]
    fn quadratic_is_exact() {
        let x = random(&[5], 1);
        let r = finite_diff_check(
            |t, v| {
                let sq = t.mul(v, v)?;
                Ok(t.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        assert_eq!(r.coordinates, 5);
    }

    #[test]
    fn detects_wrong_gradient() {
        // exp(x) routed through a constant copy has no gradient path.
        let x = random(&[3], 2);
        let r = finite_diff_check(
            |t, v| {
                let detached = t.constant(&t.tensor(v));
                let e = t.exp(detached);
                let s = t.sum(e);
                let z = t.scale(v, 0.0);
                let zs = t.sum(z);
                t.add(s, zs)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error > 0.5);
    }

    #[test]
    fn suite_passes_every_block() {
        let results = run_suite(false).unwrap();
        assert!(results.len() >= 18);
        for r in &results {
            assert!(r.passed(), "{r:?}");
            assert!(r.check.coordinates > 0);
        }
        assert_eq!(results, run_suite(false).unwrap());
    }

    #[test]
    fn rejects_nonpositive_step() {
        let x = random(&[1], 3);
        assert!(finite_diff_check(|t, v| Ok(t.sum(v)), &x, 0.0).is_err());
    }
}
