//! The full dyadic engagement network.
//!
//! Pipeline for one window of `N` frames:
//!
//! 1. attach the domain prompt to target and partner features (same prompt),
//! 2. project both streams with two fully connected layers (tanh + dropout),
//! 3. run `num_dapa_layers` interaction layers, each made of two independent
//!    BiLSTM encoders, four cross-attention flows and a fusion step,
//! 4. concatenate the final target and partner representations and map them
//!    through the MLP head to a score in `(0, 1)` per frame.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{DapaError, Result};
use crate::layers::{
    bilstm_forward, linear_forward, mlp_head_forward, scaled_dot_attention, AttentionParams,
    ForwardCtx, LinearParams, LstmStackParams,
};
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// How the domain prompt is joined to the frame features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    /// Row `t` of the prompt is concatenated to the features of frame `t`.
    Feature,
    /// Prompt rows are extra leading frames, dropped again before the head.
    Time,
}

/// What to do with a domain that has no prompt in the pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnknownDomainPolicy {
    Error,
    /// Use the element-wise mean of every prompt in the pool.
    MeanPrompt,
}

/// What the partner stream carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartnerInput {
    Features,
    /// Partner features are replaced by zeros (interaction ablation).
    Zeros,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_in: usize,
    /// Prompt width; `0` disables domain prompts.
    pub d_prompt: usize,
    pub d_model: usize,
    /// BiLSTM depth inside each interaction layer.
    pub lstm_layers: usize,
    pub num_dapa_layers: usize,
    pub attention_projections: bool,
    pub attention_heads: usize,
    pub head_hidden: Vec<usize>,
    pub window_len: usize,
    pub prompt_mode: PromptMode,
    pub prompt_init_std: f64,
    pub unknown_domain: UnknownDomainPolicy,
    pub partner_input: PartnerInput,
}

/// 88 eGeMAPS + 768 Swin + 714 OpenFace + 139 OpenPose + 1280 Whisper.
pub const CHALLENGE_FEATURE_BLOCKS: [(&str, usize); 5] = [
    ("egemaps", 88),
    ("swin", 768),
    ("openface", 714),
    ("openpose", 139),
    ("whisper", 1280),
];

pub const CHALLENGE_FEATURE_DIM: usize = 2989;

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_in: CHALLENGE_FEATURE_DIM,
            d_prompt: 64,
            d_model: 512,
            lstm_layers: 3,
            num_dapa_layers: 1,
            attention_projections: true,
            attention_heads: 1,
            head_hidden: vec![512],
            window_len: 96,
            prompt_mode: PromptMode::Feature,
            prompt_init_std: 0.02,
            unknown_domain: UnknownDomainPolicy::Error,
            partner_input: PartnerInput::Features,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_in", self.d_in),
            ("d_model", self.d_model),
            ("lstm_layers", self.lstm_layers),
            ("num_dapa_layers", self.num_dapa_layers),
            ("attention_heads", self.attention_heads),
            ("window_len", self.window_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(DapaError::Config(format!("model.{name} must be positive")));
            }
        }
        if self.head_hidden.contains(&0) {
            return Err(DapaError::Config("model.head_hidden sizes must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.attention_heads) {
            return Err(DapaError::Config(format!(
                "model.d_model {} is not divisible by {} attention heads",
                self.d_model, self.attention_heads
            )));
        }
        if self.prompt_init_std.is_nan() || self.prompt_init_std < 0.0 {
            return Err(DapaError::Config("model.prompt_init_std must be non-negative".into()));
        }
        Ok(())
    }

    pub fn prompts_enabled(&self) -> bool {
        match self.prompt_mode {
            PromptMode::Feature => self.d_prompt > 0,
            PromptMode::Time => true,
        }
    }

    /// Width entering the projection layers.
    pub fn projection_in(&self) -> usize {
        match self.prompt_mode {
            PromptMode::Feature => self.d_in + self.d_prompt,
            PromptMode::Time => self.d_in,
        }
    }

    pub fn prompt_shape(&self) -> [usize; 2] {
        match self.prompt_mode {
            PromptMode::Feature => [self.window_len, self.d_prompt],
            PromptMode::Time => [self.window_len, self.d_in],
        }
    }

    /// Closed-form parameter count for `num_domains` prompts:
    ///
    /// * prompts: `K * N_w * D_p` (time mode: `K * N_w * D_in`)
    /// * projection: `(P + 1) d + (d + 1) d` with `P` the projection input
    /// * per interaction layer `j`: two encoders, each a BiLSTM whose first
    ///   layer reads `d` (j = 0) or `2d` (j > 0) and whose upper layers read
    ///   `2d`, every direction holding `4d * in + 4d * d + 4d`; plus four
    ///   attention blocks of `3 d^2` when projections are on
    /// * head: linear layers from `4d` through `head_hidden` to 1.
    pub fn param_count(&self, num_domains: usize) -> usize {
        let d = self.d_model;
        let prompts = if self.prompts_enabled() {
            let [r, c] = self.prompt_shape();
            num_domains * r * c
        } else {
            0
        };
        let projection =
            LinearParams::param_count(self.projection_in(), d) + LinearParams::param_count(d, d);
        let layers: usize = (0..self.num_dapa_layers)
            .map(|j| {
                let enc_in = if j == 0 { d } else { 2 * d };
                2 * LstmStackParams::param_count(enc_in, d, self.lstm_layers)
                    + 4 * AttentionParams::param_count(d, self.attention_projections)
            })
            .sum();
        let mut head = 0;
        let mut width = 4 * d;
        for &h in self.head_hidden.iter().chain(std::iter::once(&1)) {
            head += LinearParams::param_count(width, h);
            width = h;
        }
        prompts + projection + layers + head
    }
}

/// One learnable prompt per training domain; domains are indexed in
/// alphabetical order.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainPromptPool {
    pub prompts: Vec<ParamId>,
    pub domain_index: BTreeMap<String, usize>,
}

impl DomainPromptPool {
    pub fn len(&self) -> usize {
        self.domain_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domain_index.is_empty()
    }

    pub fn domains(&self) -> impl Iterator<Item = &str> {
        self.domain_index.keys().map(String::as_str)
    }
}

/// Parameters of one interaction layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DapaLayerParams {
    pub target_encoder: LstmStackParams,
    pub partner_encoder: LstmStackParams,
    pub anticipatory_tp: AttentionParams,
    pub anticipatory_pt: AttentionParams,
    pub reactive_tp: AttentionParams,
    pub reactive_pt: AttentionParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelLayout {
    pub prompt_pool: DomainPromptPool,
    pub projection: [LinearParams; 2],
    pub layers: Vec<DapaLayerParams>,
    pub head: Vec<LinearParams>,
}

/// Forward (reactive) and backward (anticipatory) states of both participants.
#[derive(Debug, Clone, Copy)]
pub struct ContextStates {
    pub reactive_t: Var,
    pub anticipatory_t: Var,
    pub reactive_p: Var,
    pub anticipatory_p: Var,
}

/// The four cross-attention outputs of one layer.
#[derive(Debug, Clone, Copy)]
pub struct Alignments {
    pub anticipatory_tp: Var,
    pub anticipatory_pt: Var,
    pub reactive_tp: Var,
    pub reactive_pt: Var,
}

#[derive(Debug, Clone)]
pub struct DapaModel<T> {
    pub config: ModelConfig,
    pub layout: ModelLayout,
    pub params: ParamStore<T>,
}

impl<T: Scalar> DapaModel<T> {
    /// Builds a freshly initialised model with one prompt per domain.
    pub fn new(config: ModelConfig, domains: &[String], seed: u64) -> Result<Self> {
        config.validate()?;
        let mut names: Vec<String> = domains.to_vec();
        names.sort();
        names.dedup();
        if names.is_empty() {
            return Err(DapaError::Config(
                "at least one domain is required to build the prompt pool".into(),
            ));
        }
        let root = RngStream::new(seed).derive(0x6d_6f64_656c);
        let mut params = ParamStore::new();
        let d = config.d_model;

        let mut rng = root.derive(1);
        let mut prompts = Vec::new();
        if config.prompts_enabled() {
            let shape = config.prompt_shape();
            for name in &names {
                let t = Tensor::from_fn(&shape, |_| {
                    T::from_f64_lossy(config.prompt_init_std * rng.normal())
                });
                prompts.push(params.add(format!("prompt.{name}"), t));
            }
        }
        let domain_index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();

        let mut rng = root.derive(2);
        let projection = [
            LinearParams::init(&mut params, "proj.fc1", config.projection_in(), d, &mut rng),
            LinearParams::init(&mut params, "proj.fc2", d, d, &mut rng),
        ];

        let mut layers = Vec::with_capacity(config.num_dapa_layers);
        for j in 0..config.num_dapa_layers {
            let mut rng = root.derive(100 + j as u64);
            let enc_in = if j == 0 { d } else { 2 * d };
            let pre = format!("layer{j}");
            let target_encoder = LstmStackParams::init(
                &mut params,
                &format!("{pre}.target_enc"),
                enc_in,
                d,
                config.lstm_layers,
                &mut rng,
            );
            let partner_encoder = LstmStackParams::init(
                &mut params,
                &format!("{pre}.partner_enc"),
                enc_in,
                d,
                config.lstm_layers,
                &mut rng,
            );
            let mut att = |tag: &str| {
                AttentionParams::init(
                    &mut params,
                    &format!("{pre}.att_{tag}"),
                    d,
                    config.attention_heads,
                    config.attention_projections,
                    &mut rng,
                )
            };
            let anticipatory_tp = att("anticipatory_tp")?;
            let anticipatory_pt = att("anticipatory_pt")?;
            let reactive_tp = att("reactive_tp")?;
            let reactive_pt = att("reactive_pt")?;
            layers.push(DapaLayerParams {
                target_encoder,
                partner_encoder,
                anticipatory_tp,
                anticipatory_pt,
                reactive_tp,
                reactive_pt,
            });
        }

        let mut rng = root.derive(3);
        let mut head = Vec::new();
        let mut width = 4 * d;
        for (i, &h) in config.head_hidden.iter().chain(std::iter::once(&1)).enumerate() {
            head.push(LinearParams::init(&mut params, &format!("head.fc{i}"), width, h, &mut rng));
            width = h;
        }

        let model = Self {
            config,
            layout: ModelLayout {
                prompt_pool: DomainPromptPool {
                    prompts,
                    domain_index,
                },
                projection,
                layers,
                head,
            },
            params,
        };
        debug_assert_eq!(model.params.numel(), model.config.param_count(names.len()));
        Ok(model)
    }

    pub fn domains(&self) -> Vec<String> {
        self.layout.prompt_pool.domain_index.keys().cloned().collect()
    }

    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    /// Same architecture with a different parameter set (e.g. EMA weights).
    pub fn with_params(&self, values: &[Tensor<T>]) -> Result<Self> {
        let mut m = self.clone();
        m.params.assign(values)?;
        Ok(m)
    }

    fn prompt_var(&self, tape: &mut Tape<T>, bound: &Bound, domain: &str) -> Result<Var> {
        let pool = &self.layout.prompt_pool;
        if let Some(&i) = pool.domain_index.get(domain) {
            return Ok(bound.var(pool.prompts[i]));
        }
        match self.config.unknown_domain {
            UnknownDomainPolicy::Error => Err(DapaError::Lookup(format!(
                "domain '{domain}' has no prompt (known: {}); set model.unknown_domain = \"mean_prompt\" to fall back to the mean prompt",
                pool.domains().collect::<Vec<_>>().join(", ")
            ))),
            UnknownDomainPolicy::MeanPrompt => {
                let mut acc = bound.var(pool.prompts[0]);
                for &p in &pool.prompts[1..] {
                    acc = tape.add(acc, bound.var(p))?;
                }
                Ok(tape.scale(acc, T::from_f64_lossy(1.0 / pool.prompts.len() as f64)))
            }
        }
    }

    /// Joins the same domain prompt to both participants' features.
    pub fn attach_prompt(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        x_t: Var,
        x_p: Var,
        domain: &str,
    ) -> Result<(Var, Var)> {
        for x in [x_t, x_p] {
            let s = tape.shape(x);
            if s.len() != 2 || s[1] != self.config.d_in {
                return Err(DapaError::Dimension(format!(
                    "expected frames x {} features, got {:?}",
                    self.config.d_in, s
                )));
            }
        }
        if tape.shape(x_t)[0] != tape.shape(x_p)[0] {
            return Err(DapaError::Dimension(format!(
                "target has {} frames, partner has {}",
                tape.shape(x_t)[0],
                tape.shape(x_p)[0]
            )));
        }
        if !self.config.prompts_enabled() {
            if !self.layout.prompt_pool.domain_index.contains_key(domain)
                && self.config.unknown_domain == UnknownDomainPolicy::Error
            {
                return Err(DapaError::Lookup(format!(
                    "unknown domain '{domain}'; set model.unknown_domain = \"mean_prompt\" to accept it"
                )));
            }
            return Ok((x_t, x_p));
        }
        let prompt = self.prompt_var(tape, bound, domain)?;
        let axis = match self.config.prompt_mode {
            PromptMode::Feature => {
                let rows = tape.shape(x_t)[0];
                if rows != self.config.window_len {
                    return Err(DapaError::Dimension(format!(
                        "prompt has {} rows but the window has {rows} frames",
                        self.config.window_len
                    )));
                }
                1
            }
            PromptMode::Time => 0,
        };
        Ok((
            tape.concat(&[prompt, x_t], axis)?,
            tape.concat(&[prompt, x_p], axis)?,
        ))
    }

    fn project(&self, tape: &mut Tape<T>, bound: &Bound, x: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        let mut h = x;
        for fc in &self.layout.projection {
            let z = linear_forward(tape, bound, fc, h)?;
            let a = tape.tanh(z);
            h = ctx.dropout(tape, a)?;
        }
        Ok(h)
    }

    /// Runs both independent encoders of `layer`.
    pub fn encode_context(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        layer: &DapaLayerParams,
        h_t: Var,
        h_p: Var,
        ctx: &mut ForwardCtx,
    ) -> Result<ContextStates> {
        let (reactive_t, anticipatory_t) = bilstm_forward(tape, bound, &layer.target_encoder, h_t, ctx)?;
        let (reactive_p, anticipatory_p) = bilstm_forward(tape, bound, &layer.partner_encoder, h_p, ctx)?;
        Ok(ContextStates {
            reactive_t,
            anticipatory_t,
            reactive_p,
            anticipatory_p,
        })
    }

    /// Four attention flows; each pathway only attends within its own
    /// direction (reactive to reactive, anticipatory to anticipatory).
    pub fn parallel_cross_attention(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        layer: &DapaLayerParams,
        s: &ContextStates,
    ) -> Result<Alignments> {
        let (at, ap) = (s.anticipatory_t, s.anticipatory_p);
        let (rt, rp) = (s.reactive_t, s.reactive_p);
        Ok(Alignments {
            anticipatory_tp: scaled_dot_attention(tape, bound, &layer.anticipatory_tp, at, ap, ap)?,
            anticipatory_pt: scaled_dot_attention(tape, bound, &layer.anticipatory_pt, ap, at, at)?,
            reactive_tp: scaled_dot_attention(tape, bound, &layer.reactive_tp, rt, rp, rp)?,
            reactive_pt: scaled_dot_attention(tape, bound, &layer.reactive_pt, rp, rt, rt)?,
        })
    }

    /// Full forward pass for one window; returns `N x 1` scores in `(0, 1)`.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        x_t: Var,
        x_p: Var,
        domain: &str,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let frames = tape.shape(x_t).first().copied().unwrap_or(0);
        let x_p = match self.config.partner_input {
            PartnerInput::Features => x_p,
            PartnerInput::Zeros => {
                let shape = tape.shape(x_p).to_vec();
                tape.constant(&Tensor::zeros(&shape))
            }
        };
        let (x_t, x_p) = self.attach_prompt(tape, bound, x_t, x_p, domain)?;
        let mut h_t = self.project(tape, bound, x_t, ctx)?;
        let mut h_p = self.project(tape, bound, x_p, ctx)?;
        for layer in &self.layout.layers {
            let states = self.encode_context(tape, bound, layer, h_t, h_p, ctx)?;
            let a = self.parallel_cross_attention(tape, bound, layer, &states)?;
            h_t = fuse_alignments(tape, a.reactive_tp, a.anticipatory_tp)?;
            h_p = fuse_alignments(tape, a.reactive_pt, a.anticipatory_pt)?;
        }
        let mut dyadic = tape.concat(&[h_t, h_p], 1)?;
        let total = tape.shape(dyadic)[0];
        if total != frames {
            // Time-mode prompt rows sit in front of the real frames.
            dyadic = tape.slice(dyadic, 0, total - frames, frames)?;
        }
        mlp_head_forward(tape, bound, &self.layout.head, dyadic, ctx)
    }

    /// Evaluation-mode prediction for one window.
    pub fn predict(&self, x_t: &Tensor<T>, x_p: &Tensor<T>, domain: &str) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let xt = tape.constant(x_t);
        let xp = tape.constant(x_p);
        let y = self.forward(&mut tape, &bound, xt, xp, domain, &mut ForwardCtx::eval())?;
        Ok(tape.tensor(y))
    }
}

/// `[reactive | anticipatory]` along features.
pub fn fuse_alignments<T: Scalar>(tape: &mut Tape<T>, a_r: Var, a_a: Var) -> Result<Var> {
    if tape.shape(a_r).first() != tape.shape(a_a).first() {
        return Err(DapaError::Dimension(format!(
            "cannot fuse alignments of shapes {:?} and {:?}",
            tape.shape(a_r),
            tape.shape(a_a)
        )));
    }
    tape.concat(&[a_r, a_a], 1)
}

/// `1 - CCC(pred, truth)`.
pub fn ccc_loss<T: Scalar>(tape: &mut Tape<T>, pred: Var, truth: &[T]) -> Result<Var> {
    tape.ccc_loss(pred, truth)
}
