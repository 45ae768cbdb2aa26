//! Neural building blocks recorded on a [`Tape`].
//!
//! Parameters live in a [`ParamStore`]; the structs here only hold
//! [`ParamId`]s plus the sizes needed to validate inputs.

use crate::autodiff::{Tape, Var};
use crate::error::{DapaError, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-forward state: train/eval mode and the dropout stream.
#[derive(Debug, Clone)]
pub struct ForwardCtx {
    pub training: bool,
    pub dropout: f64,
    pub rng: RngStream,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        Self {
            training: false,
            dropout: 0.0,
            rng: RngStream::new(0),
        }
    }

    pub fn train(dropout: f64, rng: RngStream) -> Self {
        Self {
            training: true,
            dropout,
            rng,
        }
    }

    pub fn dropout<T: Scalar>(&mut self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        tape.dropout(x, self.dropout, &mut self.rng, self.training)
    }
}

/// `uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))` matrix.
pub fn uniform_init<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut RngStream) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.uniform_range(-bound, bound)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LinearParams {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut RngStream,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), uniform_init(&[out_dim, in_dim], in_dim, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// `in * out + out`.
    pub fn param_count(in_dim: usize, out_dim: usize) -> usize {
        in_dim * out_dim + out_dim
    }
}

/// `x * W^T + b`, broadcast over rows.
pub fn linear_forward<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    p: &LinearParams,
    x: Var,
) -> Result<Var> {
    let cols = tape.shape(x).last().copied().unwrap_or(0);
    if cols != p.in_dim {
        return Err(DapaError::Dimension(format!(
            "linear layer expects width {}, got input of shape {:?}",
            p.in_dim,
            tape.shape(x)
        )));
    }
    let y = tape.matmul_t(x, bound.var(p.weight), false, true)?;
    tape.add_row_bias(y, bound.var(p.bias))
}

/// Weights of one LSTM direction, gate blocks ordered input, forget, cell, output.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmDirection {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmStackParams {
    /// `[forward, backward]` per layer.
    pub layers: Vec<[LstmDirection; 2]>,
    pub input_dim: usize,
    pub hidden: usize,
}

impl LstmStackParams {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        input_dim: usize,
        hidden: usize,
        num_layers: usize,
        rng: &mut RngStream,
    ) -> Self {
        let layers = (0..num_layers)
            .map(|l| {
                let in_l = if l == 0 { input_dim } else { 2 * hidden };
                let mut dir = |tag: &str| {
                    let prefix = format!("{name}.l{l}.{tag}");
                    let w_ih = store.add(
                        format!("{prefix}.w_ih"),
                        uniform_init(&[4 * hidden, in_l], in_l, rng),
                    );
                    let w_hh = store.add(
                        format!("{prefix}.w_hh"),
                        uniform_init(&[4 * hidden, hidden], hidden, rng),
                    );
                    let bias = store.add(
                        format!("{prefix}.bias"),
                        Tensor::from_fn(&[4 * hidden], |i| {
                            if (hidden..2 * hidden).contains(&i) {
                                T::one()
                            } else {
                                T::zero()
                            }
                        }),
                    );
                    LstmDirection { w_ih, w_hh, bias }
                };
                [dir("fwd"), dir("bwd")]
            })
            .collect();
        Self {
            layers,
            input_dim,
            hidden,
        }
    }

    /// Per direction and layer: `4h * in_l + 4h * h + 4h`.
    pub fn param_count(input_dim: usize, hidden: usize, num_layers: usize) -> usize {
        (0..num_layers)
            .map(|l| {
                let in_l = if l == 0 { input_dim } else { 2 * hidden };
                2 * (4 * hidden * in_l + 4 * hidden * hidden + 4 * hidden)
            })
            .sum()
    }
}

/// Stacked bidirectional LSTM returning the top layer's forward (reactive)
/// and backward (anticipatory) hidden sequences as separate `N x h` nodes.
///
/// Lower layers feed `[forward | backward]` to the next layer, with dropout
/// in between when training.
pub fn bilstm_forward<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    p: &LstmStackParams,
    x: Var,
    ctx: &mut ForwardCtx,
) -> Result<(Var, Var)> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(DapaError::Usage(format!(
            "BiLSTM needs a non-empty frames x features input, got {shape:?}"
        )));
    }
    if shape[1] != p.input_dim {
        return Err(DapaError::Dimension(format!(
            "BiLSTM expects width {}, got {shape:?}",
            p.input_dim
        )));
    }
    let mut input = x;
    let mut out = None;
    for (l, [fwd, bwd]) in p.layers.iter().enumerate() {
        let f = tape.lstm(input, bound.var(fwd.w_ih), bound.var(fwd.w_hh), bound.var(fwd.bias), false)?;
        let b = tape.lstm(input, bound.var(bwd.w_ih), bound.var(bwd.w_hh), bound.var(bwd.bias), true)?;
        if l + 1 < p.layers.len() {
            let both = tape.concat(&[f, b], 1)?;
            input = ctx.dropout(tape, both)?;
        }
        out = Some((f, b));
    }
    out.ok_or_else(|| DapaError::Config("BiLSTM stack has no layers".into()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    /// Square query/key/value projections, when enabled.
    pub proj: Option<[ParamId; 3]>,
    pub dim: usize,
    pub heads: usize,
}

impl AttentionParams {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        projections: bool,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(DapaError::Config(format!(
                "attention width {dim} is not divisible into {heads} heads"
            )));
        }
        let proj = projections.then(|| {
            ["q", "k", "v"].map(|tag| {
                store.add(format!("{name}.w_{tag}"), uniform_init(&[dim, dim], dim, rng))
            })
        });
        Ok(Self { proj, dim, heads })
    }

    pub fn param_count(dim: usize, projections: bool) -> usize {
        if projections {
            3 * dim * dim
        } else {
            0
        }
    }
}

/// `softmax(Q K^T / sqrt(d_k)) V`, optionally after learned projections of
/// `q`, `k` and `v`; with several heads the feature axis is split evenly and
/// the head outputs are concatenated.
pub fn scaled_dot_attention<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    p: &AttentionParams,
    q: Var,
    k: Var,
    v: Var,
) -> Result<Var> {
    let (qs, ks, vs) = (tape.shape(q).to_vec(), tape.shape(k).to_vec(), tape.shape(v).to_vec());
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 {
        return Err(DapaError::Dimension("attention operands must be matrices".into()));
    }
    if qs[1] != p.dim || ks[1] != p.dim || vs[1] != p.dim || ks[0] != vs[0] {
        return Err(DapaError::Dimension(format!(
            "attention width {}: q {qs:?}, k {ks:?}, v {vs:?}",
            p.dim
        )));
    }
    let (q, k, v) = match &p.proj {
        Some([wq, wk, wv]) => (
            tape.matmul_t(q, bound.var(*wq), false, true)?,
            tape.matmul_t(k, bound.var(*wk), false, true)?,
            tape.matmul_t(v, bound.var(*wv), false, true)?,
        ),
        None => (q, k, v),
    };
    let d_head = p.dim / p.heads;
    let scale = T::from_f64_lossy(1.0 / (d_head as f64).sqrt());
    let mut outs = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let (qh, kh, vh) = if p.heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice(q, 1, h * d_head, d_head)?,
                tape.slice(k, 1, h * d_head, d_head)?,
                tape.slice(v, 1, h * d_head, d_head)?,
            )
        };
        let scores = tape.matmul_t(qh, kh, false, true)?;
        let scores = tape.scale(scores, scale);
        let weights = tape.softmax_rows(scores);
        outs.push(tape.matmul(weights, vh)?);
    }
    tape.concat(&outs, 1)
}

/// Hidden layers use tanh and dropout; the last layer has width 1 and a
/// sigmoid, so every output lies in `(0, 1)`.
pub fn mlp_head_forward<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    layers: &[LinearParams],
    x: Var,
    ctx: &mut ForwardCtx,
) -> Result<Var> {
    let (last, hidden) = layers
        .split_last()
        .ok_or_else(|| DapaError::Config("prediction head has no layers".into()))?;
    if last.out_dim != 1 {
        return Err(DapaError::Config(format!(
            "prediction head must end in width 1, got {}",
            last.out_dim
        )));
    }
    let mut h = x;
    for layer in hidden {
        let z = linear_forward(tape, bound, layer, h)?;
        let a = tape.tanh(z);
        h = ctx.dropout(tape, a)?;
    }
    let z = linear_forward(tape, bound, last, h)?;
    Ok(tape.sigmoid(z))
}
