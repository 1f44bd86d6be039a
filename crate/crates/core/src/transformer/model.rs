use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, NormMode, OutputMode};
use crate::attention::{
    attention_entropy, head_sigma_kq, sigma_x, AttentionConfig, AttentionStats,
};
use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::linalg::{spectral_norm_from, Matrix};
use crate::reparam::{reparam_on_tape, ReparamMode, SpectralState};
use crate::rng::{seeded, trunc_normal_matrix};

/// Power-iteration budget used to settle `u`, `v` when a model is built.
const INIT_POWER_TOL: f64 = 1e-12;
const INIT_POWER_STEPS: usize = 2000;

const STATS_TOL: f64 = 1e-8;
const STATS_STEPS: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Matrix,
    /// Receives weight decay (matrices do, biases, gains and `γ` do not).
    pub decay: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    /// One target per position, `B × T`.
    Tokens(Vec<Vec<usize>>),
    /// One label per sequence.
    Labels(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub tokens: Vec<Vec<usize>>,
    pub targets: Targets,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Spectral layers refresh `u`, `v` with one power-iteration step.
    Train,
    /// Spectral layers reuse the stored `u`, `v`; the forward is a pure function of the parameters.
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSnapshot {
    pub layer_index: usize,
    pub attention_stats: AttentionStats,
    /// `‖·‖∞` of the gradient over the attention weights `W_K, W_Q, W_V, W_O`.
    pub grad_inf_norm: f64,
    pub grad_l2_norm: f64,
    /// Spectral norm of each effective weight in the block.
    pub sigma_per_matrix: BTreeMap<String, f64>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub loss: f64,
    /// `(B·T) × vocab` for token outputs, `B × vocab` for pooled outputs.
    pub logits: Matrix,
    pub snapshots: Vec<LayerSnapshot>,
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub loss: f64,
    /// One gradient per parameter, in [`Model::params`] order.
    pub grads: Vec<Matrix>,
    pub snapshots: Vec<LayerSnapshot>,
}

#[derive(Debug, Clone)]
enum LinearKind {
    Plain,
    Spectral {
        state: SpectralState,
        gamma: Option<usize>,
    },
    WeightNorm {
        gain: usize,
    },
}

#[derive(Debug, Clone)]
struct Linear {
    name: String,
    w: usize,
    b: Option<usize>,
    kind: LinearKind,
}

#[derive(Debug, Clone)]
struct Block {
    ln1: Option<(usize, usize)>,
    ln2: Option<(usize, usize)>,
    wk: usize,
    wq: usize,
    wv: usize,
    wo: usize,
    fc1: usize,
    fc2: usize,
}

impl Block {
    fn linears(&self) -> [(&'static str, usize); 6] {
        [
            ("w_k", self.wk),
            ("w_q", self.wq),
            ("w_v", self.wv),
            ("w_o", self.wo),
            ("mlp_in", self.fc1),
            ("mlp_out", self.fc2),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    cfg: ModelConfig,
    params: Vec<Param>,
    linears: Vec<Linear>,
    blocks: Vec<Block>,
    tok_embed: usize,
    pos_embed: usize,
    final_ln: Option<(usize, usize)>,
    head: usize,
    temperature: f64,
}

struct LayerTrace {
    input: NodeId,
    wk: NodeId,
    wq: NodeId,
    /// Per example, per head: (softmax input, attention).
    heads: Vec<(NodeId, NodeId)>,
    effective: Vec<(&'static str, NodeId)>,
}

struct Pass {
    tape: Tape,
    nodes: Vec<NodeId>,
    hidden: NodeId,
    logits: NodeId,
    loss: Option<NodeId>,
    layers: Vec<LayerTrace>,
    batch: usize,
    seq: usize,
}

struct Builder<'a> {
    params: Vec<Param>,
    rng: &'a mut crate::rng::LabRng,
}

impl Builder<'_> {
    fn add(&mut self, name: String, value: Matrix, decay: bool) -> usize {
        self.params.push(Param { name, value, decay });
        self.params.len() - 1
    }

    fn layer_norm(&mut self, name: &str, d: usize) -> (usize, usize) {
        let g = self.add(format!("{name}.gain"), Matrix::filled(1, d, 1.0), false);
        let b = self.add(format!("{name}.bias"), Matrix::zeros(1, d), false);
        (g, b)
    }

    fn linear(
        &mut self,
        cfg: &ModelConfig,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Result<Linear> {
        let value = trunc_normal_matrix(self.rng, d_in, d_out, cfg.weight_std());
        let kind = match cfg.reparam_mode {
            ReparamMode::Plain => LinearKind::Plain,
            ReparamMode::SigmaReparam | ReparamMode::SpectralNormOnly => {
                let mut state = SpectralState::for_weight(&value, cfg.gamma_init, self.rng)?;
                spectral_norm_from(
                    &value,
                    &mut state.u,
                    &mut state.v,
                    INIT_POWER_TOL,
                    INIT_POWER_STEPS,
                )?;
                let gamma = if cfg.reparam_mode == ReparamMode::SigmaReparam {
                    Some(self.params.len() + 1 + usize::from(bias))
                } else {
                    None
                };
                LinearKind::Spectral { state, gamma }
            }
            ReparamMode::WeightNorm => LinearKind::WeightNorm {
                gain: self.params.len() + 1 + usize::from(bias),
            },
        };
        let w = self.add(format!("{name}.weight"), value, true);
        let b = bias.then(|| self.add(format!("{name}.bias"), Matrix::zeros(1, d_out), false));
        match &kind {
            LinearKind::Spectral {
                state,
                gamma: Some(_),
            } => {
                let g = state.gamma;
                self.add(format!("{name}.gamma"), Matrix::scalar(g), false);
            }
            LinearKind::WeightNorm { .. } => {
                let w_val = &self.params[w].value;
                let norms: Vec<f64> = (0..d_out)
                    .map(|j| crate::linalg::norm(&w_val.col(j)))
                    .collect();
                self.add(format!("{name}.gain"), Matrix::row_vector(&norms), false);
            }
            _ => {}
        }
        Ok(Linear {
            name: name.to_string(),
            w,
            b,
            kind,
        })
    }
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seeded(cfg.seed.unwrap_or(0));
        let d = cfg.d_model;
        let mut b = Builder {
            params: Vec::new(),
            rng: &mut rng,
        };
        let tok = trunc_normal_matrix(b.rng, cfg.vocab_size, d, cfg.embed_std);
        let tok_embed = b.add("embed.token".into(), tok, true);
        let pos = trunc_normal_matrix(b.rng, cfg.max_seq_len, d, cfg.embed_std);
        let pos_embed = b.add("embed.position".into(), pos, true);

        let mut linears = Vec::new();
        let mut blocks = Vec::new();
        let has_ln = cfg.norm_mode != NormMode::None;
        for l in 0..cfg.n_layers {
            let p = format!("layers.{l}");
            let ln1 = has_ln.then(|| b.layer_norm(&format!("{p}.ln1"), d));
            let mut push = |lin: Linear| {
                linears.push(lin);
                linears.len() - 1
            };
            let wk = push(b.linear(&cfg, &format!("{p}.attn.w_k"), d, d, false)?);
            let wq = push(b.linear(&cfg, &format!("{p}.attn.w_q"), d, d, false)?);
            let wv = push(b.linear(&cfg, &format!("{p}.attn.w_v"), d, d, false)?);
            let wo = push(b.linear(&cfg, &format!("{p}.attn.w_o"), d, d, true)?);
            let ln2 = has_ln.then(|| b.layer_norm(&format!("{p}.ln2"), d));
            let fc1 = push(b.linear(&cfg, &format!("{p}.mlp.fc_in"), d, cfg.mlp_dim, true)?);
            let fc2 = push(b.linear(&cfg, &format!("{p}.mlp.fc_out"), cfg.mlp_dim, d, true)?);
            blocks.push(Block {
                ln1,
                ln2,
                wk,
                wq,
                wv,
                wo,
                fc1,
                fc2,
            });
        }
        let final_ln = (cfg.norm_mode == NormMode::PreLn).then(|| b.layer_norm("final_ln", d));
        linears.push(b.linear(&cfg, "head", d, cfg.vocab_size, true)?);
        let head = linears.len() - 1;
        let params = b.params;
        Ok(Self {
            temperature: cfg.temperature,
            cfg,
            params,
            linears,
            blocks,
            tok_embed,
            pos_embed,
            final_ln,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Matrix> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .map(|p| &p.value)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.params
            .iter_mut()
            .find(|p| p.name == name)
            .map(|p| &mut p.value)
    }

    pub fn n_params(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    /// Takes effect on the next forward, for every layer.
    pub fn set_global_temperature(&mut self, tau: f64) -> Result<()> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::Domain(format!(
                "temperature must be positive, got {tau}"
            )));
        }
        self.temperature = tau;
        Ok(())
    }

    /// Power-iteration state of every spectrally reparameterized weight, keyed
    /// by the weight's parameter name.
    pub fn spectral_states(&self) -> Vec<(&str, &SpectralState)> {
        self.linears
            .iter()
            .filter_map(|l| match &l.kind {
                LinearKind::Spectral { state, .. } => Some((self.params[l.w].name.as_str(), state)),
                _ => None,
            })
            .collect()
    }

    pub fn spectral_state_mut(&mut self, weight_name: &str) -> Option<&mut SpectralState> {
        let params = &self.params;
        self.linears.iter_mut().find_map(|l| match &mut l.kind {
            LinearKind::Spectral { state, .. } if params[l.w].name == weight_name => Some(state),
            _ => None,
        })
    }

    /// All parameters concatenated in [`Model::params`] order.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for p in &self.params {
            out.extend_from_slice(p.value.data());
        }
        out
    }

    pub fn set_flat_params(&mut self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.n_params() {
            return Err(Error::shape(
                "set_flat_params",
                format!("{} values for {} parameters", theta.len(), self.n_params()),
            ));
        }
        let mut at = 0;
        for p in &mut self.params {
            let n = p.value.len();
            p.value.data_mut().copy_from_slice(&theta[at..at + n]);
            at += n;
        }
        self.sync_gammas();
        Ok(())
    }

    fn sync_gammas(&mut self) {
        for l in &mut self.linears {
            if let LinearKind::Spectral {
                state,
                gamma: Some(g),
            } = &mut l.kind
            {
                state.gamma = self.params[*g].value.data()[0];
            }
        }
    }

    /// Call after modifying parameters in place so cached `γ` values follow.
    pub fn parameters_changed(&mut self) {
        self.sync_gammas();
    }

    pub fn flatten(grads: &[Matrix]) -> Vec<f64> {
        grads
            .iter()
            .flat_map(|g| g.data().iter().copied())
            .collect()
    }

    fn attention_config(&self) -> AttentionConfig {
        AttentionConfig {
            d_model: self.cfg.d_model,
            n_heads: self.cfg.n_heads,
            head_dim: self.cfg.head_dim(),
            value_dim: self.cfg.head_dim(),
            use_sqrt_d_scaling: self.cfg.use_sqrt_d_scaling,
            temperature: self.temperature,
        }
    }

    fn check_tokens(&self, tokens: &[Vec<usize>]) -> Result<(usize, usize)> {
        let b = tokens.len();
        if b == 0 {
            return Err(Error::shape("model_forward", "empty batch"));
        }
        let t = tokens[0].len();
        if t == 0 || t > self.cfg.max_seq_len {
            return Err(Error::shape(
                "model_forward",
                format!("sequence length {t} outside 1..={}", self.cfg.max_seq_len),
            ));
        }
        for row in tokens {
            if row.len() != t {
                return Err(Error::shape("model_forward", "ragged token batch"));
            }
            if let Some(&bad) = row.iter().find(|&&x| x >= self.cfg.vocab_size) {
                return Err(Error::shape(
                    "model_forward",
                    format!("token {bad} out of range for vocab {}", self.cfg.vocab_size),
                ));
            }
        }
        Ok((b, t))
    }

    fn effective_weight(
        &mut self,
        tape: &mut Tape,
        nodes: &[NodeId],
        li: usize,
        mode: Mode,
    ) -> Result<NodeId> {
        let sigma_grad = self.cfg.sigma_gradient;
        let lin = &mut self.linears[li];
        let w = nodes[lin.w];
        match &mut lin.kind {
            LinearKind::Plain => Ok(w),
            LinearKind::Spectral { state, gamma } => {
                let g = gamma.map(|g| nodes[g]);
                reparam_on_tape(tape, w, g, state, mode == Mode::Train, sigma_grad)
            }
            LinearKind::WeightNorm { gain } => tape.weight_norm_cols(w, nodes[*gain]),
        }
    }

    fn apply_linear(
        &mut self,
        tape: &mut Tape,
        nodes: &[NodeId],
        li: usize,
        x: NodeId,
        mode: Mode,
    ) -> Result<(NodeId, NodeId)> {
        let w = self.effective_weight(tape, nodes, li, mode)?;
        let mut y = tape.matmul(x, w)?;
        if let Some(b) = self.linears[li].b {
            y = tape.add_row(y, nodes[b])?;
        }
        Ok((y, w))
    }

    fn run(
        &mut self,
        tokens: &[Vec<usize>],
        targets: Option<&Targets>,
        mode: Mode,
    ) -> Result<Pass> {
        let (batch, seq) = self.check_tokens(tokens)?;
        let mut tape = Tape::new();
        let nodes: Vec<NodeId> = self
            .params
            .iter()
            .map(|p| tape.param(p.value.clone()))
            .collect();

        let flat: Vec<usize> = tokens.iter().flatten().copied().collect();
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
        let te = tape.embedding(nodes[self.tok_embed], &flat)?;
        let pe = tape.embedding(nodes[self.pos_embed], &positions)?;
        let mut x = tape.add(te, pe)?;

        let acfg = self.attention_config();
        let scale = acfg.logit_scale();
        let (nh, hd) = (acfg.n_heads, acfg.head_dim);
        let norm_mode = self.cfg.norm_mode;
        let causal = self.cfg.causal;
        let mut layers = Vec::with_capacity(self.blocks.len());

        for bi in 0..self.blocks.len() {
            let block = self.blocks[bi].clone();
            let ln = |tape: &mut Tape, x: NodeId, p: Option<(usize, usize)>| -> Result<NodeId> {
                match p {
                    Some((g, b)) => tape.layer_norm(x, nodes[g], nodes[b]),
                    None => Ok(x),
                }
            };
            let attn_in = if norm_mode == NormMode::PreLn {
                ln(&mut tape, x, block.ln1)?
            } else {
                x
            };

            let (k_all, wk) = self.apply_linear(&mut tape, &nodes, block.wk, attn_in, mode)?;
            let (q_all, wq) = self.apply_linear(&mut tape, &nodes, block.wq, attn_in, mode)?;
            let (v_all, wv) = self.apply_linear(&mut tape, &nodes, block.wv, attn_in, mode)?;
            let mut heads = Vec::with_capacity(batch * nh);
            let mut per_example = Vec::with_capacity(batch);
            for b in 0..batch {
                let kb = tape.slice_rows(k_all, b * seq, seq)?;
                let qb = tape.slice_rows(q_all, b * seq, seq)?;
                let vb = tape.slice_rows(v_all, b * seq, seq)?;
                let mut outs = Vec::with_capacity(nh);
                for h in 0..nh {
                    let k = tape.slice_cols(kb, h * hd, hd)?;
                    let q = tape.slice_cols(qb, h * hd, hd)?;
                    let v = tape.slice_cols(vb, h * hd, hd)?;
                    let qt = tape.transpose(q)?;
                    let raw = tape.matmul(k, qt)?;
                    let logits = tape.scale(raw, scale)?;
                    let p = if causal {
                        tape.causal_softmax_rows(logits, 1.0)?
                    } else {
                        tape.softmax_rows(logits, 1.0)?
                    };
                    heads.push((logits, p));
                    outs.push(tape.matmul(p, v)?);
                }
                per_example.push(if nh == 1 {
                    outs[0]
                } else {
                    tape.concat_cols(&outs)?
                });
            }
            let attn_cat = if batch == 1 {
                per_example[0]
            } else {
                tape.concat_rows(&per_example)?
            };
            let (attn_out, wo) = self.apply_linear(&mut tape, &nodes, block.wo, attn_cat, mode)?;

            let mut h = tape.add(x, attn_out)?;
            if norm_mode == NormMode::PostLn {
                h = ln(&mut tape, h, block.ln1)?;
            }
            let mlp_in = if norm_mode == NormMode::PreLn {
                ln(&mut tape, h, block.ln2)?
            } else {
                h
            };
            let (z, fc1) = self.apply_linear(&mut tape, &nodes, block.fc1, mlp_in, mode)?;
            let z = tape.gelu(z)?;
            let (z, fc2) = self.apply_linear(&mut tape, &nodes, block.fc2, z, mode)?;
            x = tape.add(h, z)?;
            if norm_mode == NormMode::PostLn {
                x = ln(&mut tape, x, block.ln2)?;
            }
            layers.push(LayerTrace {
                input: attn_in,
                wk,
                wq,
                heads,
                effective: vec![
                    ("w_k", wk),
                    ("w_q", wq),
                    ("w_v", wv),
                    ("w_o", wo),
                    ("mlp_in", fc1),
                    ("mlp_out", fc2),
                ],
            });
        }

        if let Some((g, b)) = self.final_ln {
            x = tape.layer_norm(x, nodes[g], nodes[b])?;
        }
        let features = match self.cfg.output {
            OutputMode::Tokens => x,
            OutputMode::Pooled => {
                let mut pool = Matrix::zeros(batch, batch * seq);
                for b in 0..batch {
                    for t in 0..seq {
                        pool[(b, b * seq + t)] = 1.0 / seq as f64;
                    }
                }
                let pool = tape.constant(pool);
                tape.matmul(pool, x)?
            }
        };
        let head = self.head;
        let (logits, _) = self.apply_linear(&mut tape, &nodes, head, features, mode)?;

        let loss = match targets {
            None => None,
            Some(t) => {
                let flat_targets = self.flat_targets(t, batch, seq)?;
                Some(tape.cross_entropy(logits, &flat_targets)?)
            }
        };
        Ok(Pass {
            tape,
            nodes,
            hidden: x,
            logits,
            loss,
            layers,
            batch,
            seq,
        })
    }

    fn flat_targets(&self, targets: &Targets, batch: usize, seq: usize) -> Result<Vec<usize>> {
        match (targets, self.cfg.output) {
            (Targets::Tokens(rows), OutputMode::Tokens) => {
                if rows.len() != batch || rows.iter().any(|r| r.len() != seq) {
                    return Err(Error::shape(
                        "model_forward",
                        "targets do not match the token batch",
                    ));
                }
                Ok(rows.iter().flatten().copied().collect())
            }
            (Targets::Labels(labels), OutputMode::Pooled) => {
                if labels.len() != batch {
                    return Err(Error::shape(
                        "model_forward",
                        "one label per sequence expected",
                    ));
                }
                Ok(labels.clone())
            }
            _ => Err(Error::Config(
                "target kind does not match the model output mode".into(),
            )),
        }
    }

    fn snapshots(&self, pass: &Pass, grads: Option<&[Matrix]>) -> Result<Vec<LayerSnapshot>> {
        let acfg = self.attention_config();
        let tape = &pass.tape;
        let mut out = Vec::with_capacity(pass.layers.len());
        for (li, layer) in pass.layers.iter().enumerate() {
            let mut per_row = Vec::new();
            let mut max_row_norm: f64 = 0.0;
            for &(logits, attn) in &layer.heads {
                if !tape.value(attn).is_finite() || !tape.value(logits).is_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite attention in layer {li}"
                    )));
                }
                per_row.extend(attention_entropy(tape.value(attn))?.per_row);
                let l = tape.value(logits);
                for i in 0..l.rows() {
                    max_row_norm = max_row_norm.max(crate::linalg::norm(l.row(i)));
                }
            }
            let sigma_kq = head_sigma_kq(tape.value(layer.wk), tape.value(layer.wq), &acfg)?
                .into_iter()
                .fold(0.0, f64::max);
            let input = tape.value(layer.input);
            if !input.is_finite()
                || layer
                    .effective
                    .iter()
                    .any(|&(_, n)| !tape.value(n).is_finite())
            {
                return Err(Error::Numerical(format!(
                    "non-finite activations or weights in layer {li}"
                )));
            }
            let mut sx: f64 = 0.0;
            for b in 0..pass.batch {
                sx = sx.max(sigma_x(&input.slice_rows(b * pass.seq, pass.seq)?)?);
            }
            let stats = AttentionStats {
                mean_entropy: per_row.iter().sum::<f64>() / per_row.len().max(1) as f64,
                min_row_entropy: per_row.iter().copied().fold(f64::INFINITY, f64::min),
                max_logit_row_norm: max_row_norm,
                sigma_kq,
                sigma_x: sx,
                logit_scale: acfg.logit_scale(),
                seq_len: pass.seq,
                n_rows: per_row.len(),
            };
            let mut sigma_per_matrix = BTreeMap::new();
            for &(name, node) in &layer.effective {
                let w = tape.value(node);
                let mut u = crate::linalg::start_vector(w.rows());
                let mut v = crate::linalg::start_vector(w.cols());
                let est = spectral_norm_from(w, &mut u, &mut v, STATS_TOL, STATS_STEPS)?;
                sigma_per_matrix.insert(name.to_string(), est.sigma);
            }
            let (mut inf, mut sq) = (0.0f64, 0.0f64);
            if let Some(g) = grads {
                let block = &self.blocks[li];
                for li in [block.wk, block.wq, block.wv, block.wo] {
                    for &x in g[self.linears[li].w].data() {
                        inf = inf.max(x.abs());
                        sq += x * x;
                    }
                }
            }
            out.push(LayerSnapshot {
                layer_index: li,
                attention_stats: stats,
                grad_inf_norm: inf,
                grad_l2_norm: sq.sqrt(),
                sigma_per_matrix,
            });
        }
        Ok(out)
    }

    /// Loss and per-layer snapshots; gradient norms in the snapshots are zero.
    pub fn forward(&mut self, batch: &Batch, mode: Mode) -> Result<ForwardOutput> {
        let pass = self.run(&batch.tokens, Some(&batch.targets), mode)?;
        let loss = pass.tape.value(pass.loss.expect("targets given")).data()[0];
        let snapshots = self.snapshots(&pass, None)?;
        Ok(ForwardOutput {
            loss,
            logits: pass.tape.value(pass.logits).clone(),
            snapshots,
        })
    }

    /// Output logits without a loss.
    pub fn logits(&mut self, tokens: &[Vec<usize>], mode: Mode) -> Result<Matrix> {
        let pass = self.run(tokens, None, mode)?;
        Ok(pass.tape.value(pass.logits).clone())
    }

    /// Hidden states entering the output head (after the final LN in pre-LN mode).
    pub fn hidden(&mut self, tokens: &[Vec<usize>], mode: Mode) -> Result<Matrix> {
        let pass = self.run(tokens, None, mode)?;
        Ok(pass.tape.value(pass.hidden).clone())
    }

    fn backward(&self, pass: &mut Pass) -> Result<(f64, Vec<Matrix>)> {
        let loss = pass.loss.expect("targets given");
        pass.tape.backward(loss)?;
        let grads = pass
            .nodes
            .iter()
            .map(|&n| pass.tape.grad_or_zeros(n))
            .collect();
        Ok((pass.tape.value(loss).data()[0], grads))
    }

    /// Loss, gradients and snapshots (with gradient norms) for one batch.
    pub fn loss_and_grad(&mut self, batch: &Batch, mode: Mode) -> Result<StepOutput> {
        let mut pass = self.run(&batch.tokens, Some(&batch.targets), mode)?;
        let (loss, grads) = self.backward(&mut pass)?;
        let snapshots = self.snapshots(&pass, Some(&grads))?;
        Ok(StepOutput {
            loss,
            grads,
            snapshots,
        })
    }

    /// Loss and gradients without snapshot bookkeeping.
    pub fn loss_and_grad_only(&mut self, batch: &Batch, mode: Mode) -> Result<(f64, Vec<Matrix>)> {
        let mut pass = self.run(&batch.tokens, Some(&batch.targets), mode)?;
        self.backward(&mut pass)
    }

    /// Loss only, in the given mode.
    pub fn loss(&mut self, batch: &Batch, mode: Mode) -> Result<f64> {
        let pass = self.run(&batch.tokens, Some(&batch.targets), mode)?;
        Ok(pass.tape.value(pass.loss.expect("targets given")).data()[0])
    }

    /// Fraction of correct argmax predictions (per position or per sequence).
    pub fn accuracy(&mut self, batch: &Batch) -> Result<f64> {
        let logits = self.logits(&batch.tokens, Mode::Eval)?;
        let (b, t) = (batch.len(), batch.tokens[0].len());
        let targets = self.flat_targets(&batch.targets, b, t)?;
        let correct = targets
            .iter()
            .enumerate()
            .filter(|&(i, &y)| argmax(logits.row(i)) == y)
            .count();
        Ok(correct as f64 / targets.len() as f64)
    }

    pub(crate) fn restore(
        cfg: ModelConfig,
        temperature: f64,
        params: Vec<(String, Matrix)>,
        states: Vec<(String, SpectralState)>,
    ) -> Result<Self> {
        let mut model = Model::new(cfg)?;
        model.set_global_temperature(temperature)?;
        if params.len() != model.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameters, model expects {}",
                params.len(),
                model.params.len()
            )));
        }
        for (p, (name, value)) in model.params.iter_mut().zip(params) {
            if p.name != name || p.value.shape() != value.shape() {
                return Err(Error::Format(format!(
                    "checkpoint parameter {name} {:?} does not match {} {:?}",
                    value.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            p.value = value;
        }
        for (name, state) in states {
            let slot = model
                .spectral_state_mut(&name)
                .ok_or_else(|| Error::Format(format!("no spectral layer named {name}")))?;
            if slot.u.len() != state.u.len() || slot.v.len() != state.v.len() {
                return Err(Error::Format(format!(
                    "spectral state {name} has the wrong size"
                )));
            }
            *slot = state;
        }
        model.sync_gammas();
        Ok(model)
    }

    /// Names of the linear layers, in construction order.
    pub fn linear_names(&self) -> Vec<&str> {
        self.linears.iter().map(|l| l.name.as_str()).collect()
    }

    /// Block linears as `(short name, weight parameter name)` for layer `l`.
    pub fn block_weights(&self, l: usize) -> Option<Vec<(&'static str, &str)>> {
        let block = self.blocks.get(l)?;
        Some(
            block
                .linears()
                .iter()
                .map(|&(short, li)| (short, self.params[self.linears[li].w].name.as_str()))
                .collect(),
        )
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}
