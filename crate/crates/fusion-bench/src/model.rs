//! Model assembly: unimodal towers and the multimodal model for every
//! (fusion layer, fusion method, loss mode) combination.
//!
//! Pipeline order inside a tower is projection -> Bi-GRU -> self-attention
//! -> FC (logits). The fusion layer names where the two modalities merge:
//! EF on projected features, MF after the Bi-GRU, LF after attention, LGF
//! on logits. Layers after the merge are shared; with the perspective
//! objective each modality also continues through its own independent
//! copies of the remaining layers, fed by the shared lower layers.

use std::str::FromStr;

use ndarray::{Array2, Array3, ArrayD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::corpus::{DialogueBatch, AUDIO_DIM, N_CLASSES, TEXT_DIM};
use crate::error::{Error, Result};
use crate::nn::{self, BoundParams, ParamSet};

/// Stream ids for the per-run rng; init, shuffle, and dropout use
/// disjoint streams of the same seed so extra draws in one never perturb
/// the others.
pub const STREAM_INIT: u64 = 1;
pub const STREAM_SHUFFLE: u64 = 2;
pub const STREAM_DROPOUT: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionLayer {
    Ef,
    Mf,
    Lf,
    Lgf,
    /// Audio-only baseline; no fusion, no text tower.
    NoneAudio,
    /// Text-only baseline; no fusion, no audio tower.
    NoneText,
}

impl FusionLayer {
    pub const FUSING: [FusionLayer; 4] = [
        FusionLayer::Ef,
        FusionLayer::Mf,
        FusionLayer::Lf,
        FusionLayer::Lgf,
    ];

    pub fn is_unimodal(self) -> bool {
        matches!(self, FusionLayer::NoneAudio | FusionLayer::NoneText)
    }

    pub fn name(self) -> &'static str {
        match self {
            FusionLayer::Ef => "ef",
            FusionLayer::Mf => "mf",
            FusionLayer::Lf => "lf",
            FusionLayer::Lgf => "lgf",
            FusionLayer::NoneAudio => "none_audio",
            FusionLayer::NoneText => "none_text",
        }
    }
}

impl FromStr for FusionLayer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ef" => Ok(FusionLayer::Ef),
            "mf" => Ok(FusionLayer::Mf),
            "lf" => Ok(FusionLayer::Lf),
            "lgf" => Ok(FusionLayer::Lgf),
            "none_audio" | "audio" => Ok(FusionLayer::NoneAudio),
            "none_text" | "text" => Ok(FusionLayer::NoneText),
            other => Err(Error::Config(format!("unknown fusion layer {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMethod {
    Add,
    Concat,
    At,
}

impl FusionMethod {
    pub const ALL: [FusionMethod; 3] = [FusionMethod::Add, FusionMethod::Concat, FusionMethod::At];

    pub fn name(self) -> &'static str {
        match self {
            FusionMethod::Add => "add",
            FusionMethod::Concat => "concat",
            FusionMethod::At => "at",
        }
    }
}

impl FromStr for FusionMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "add" => Ok(FusionMethod::Add),
            "concat" => Ok(FusionMethod::Concat),
            "at" => Ok(FusionMethod::At),
            other => Err(Error::Config(format!("unknown fusion method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    Single,
    Perspective,
}

impl LossMode {
    pub const ALL: [LossMode; 2] = [LossMode::Single, LossMode::Perspective];

    pub fn name(self) -> &'static str {
        match self {
            LossMode::Single => "single",
            LossMode::Perspective => "perspective",
        }
    }
}

impl FromStr for LossMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "single" => Ok(LossMode::Single),
            "perspective" => Ok(LossMode::Perspective),
            other => Err(Error::Config(format!("unknown loss mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub fusion_layer: FusionLayer,
    pub fusion_method: FusionMethod,
    pub loss_mode: LossMode,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_classes: usize,
    pub dropout_p: f64,
    pub audio_dim: usize,
    pub text_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            fusion_layer: FusionLayer::Lgf,
            fusion_method: FusionMethod::Add,
            loss_mode: LossMode::Perspective,
            d_model: 100,
            n_heads: 4,
            n_classes: N_CLASSES,
            dropout_p: 0.2,
            audio_dim: AUDIO_DIM,
            text_dim: TEXT_DIM,
        }
    }
}

impl ModelConfig {
    /// Validate dimensions and apply the unimodal normalization rule:
    /// baselines ignore the fusion method and always train single-loss.
    pub fn normalized(mut self) -> Result<ModelConfig> {
        if self.d_model == 0 || self.d_model % 2 != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be positive and even (Bi-GRU halves it per direction)",
                self.d_model
            )));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must divide evenly into {} heads",
                self.d_model, self.n_heads
            )));
        }
        if self.n_classes < 2 {
            return Err(Error::Config("n_classes must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!(
                "dropout_p {} outside [0, 1)",
                self.dropout_p
            )));
        }
        if self.uses_audio() && self.audio_dim == 0 {
            return Err(Error::Config("audio_dim must be positive".into()));
        }
        if self.uses_text() && self.text_dim == 0 {
            return Err(Error::Config("text_dim must be positive".into()));
        }
        if self.fusion_layer.is_unimodal() {
            self.loss_mode = LossMode::Single;
        }
        Ok(self)
    }

    pub fn uses_audio(&self) -> bool {
        self.fusion_layer != FusionLayer::NoneText
    }

    pub fn uses_text(&self) -> bool {
        self.fusion_layer != FusionLayer::NoneAudio
    }

    /// Width of the representations entering the fusion operator.
    fn fusion_dim(&self) -> usize {
        if self.fusion_layer == FusionLayer::Lgf {
            self.n_classes
        } else {
            self.d_model
        }
    }

    /// Whether per-modality logits exist in the forward output.
    pub fn has_unimodal_branches(&self) -> bool {
        !self.fusion_layer.is_unimodal()
            && (self.loss_mode == LossMode::Perspective || self.fusion_layer == FusionLayer::Lgf)
    }
}

/// Register fusion-operator parameters for `method` at width `dim`.
pub fn init_fusion(params: &mut ParamSet, rng: &mut ChaCha8Rng, method: FusionMethod, dim: usize) {
    match method {
        FusionMethod::Add => {}
        FusionMethod::Concat => {
            // single [dim, 2*dim] map, no bias
            nn::init_linear(params, rng, "fuse", dim, 2 * dim, false);
        }
        FusionMethod::At => {
            nn::init_linear(params, rng, "fuse.score", dim, dim, false);
            nn::init_linear(params, rng, "fuse.u", 1, dim, false);
        }
    }
}

/// Merge two [B, S, dim] representations. Returns the fused tensor and,
/// for the attention method, the [B, S, 2] modality weights.
pub fn fuse_on_tape(
    tape: &mut Tape,
    bp: &BoundParams,
    method: FusionMethod,
    a: NodeId,
    t: NodeId,
) -> (NodeId, Option<NodeId>) {
    match method {
        FusionMethod::Add => (tape.add(a, t), None),
        FusionMethod::Concat => {
            let cat = tape.concat_last(a, t);
            let z = nn::linear(tape, bp, "fuse", cat);
            (z, None)
        }
        FusionMethod::At => {
            // s_m = u^T tanh(W_s f_m); softmax over the two scores.
            let score = |tape: &mut Tape, f: NodeId| {
                let hidden = nn::linear(tape, bp, "fuse.score", f);
                let hidden = tape.tanh(hidden);
                nn::linear(tape, bp, "fuse.u", hidden)
            };
            let s_a = score(tape, a);
            let s_t = score(tape, t);
            let scores = tape.concat_last(s_a, s_t);
            let alphas = tape.softmax_last(scores, None);
            let alpha_a = tape.slice_last(alphas, 0, 1);
            let alpha_t = tape.slice_last(alphas, 1, 1);
            let za = tape.mul_bcast_last(alpha_a, a);
            let zt = tape.mul_bcast_last(alpha_t, t);
            (tape.add(za, zt), Some(alphas))
        }
    }
}

/// Tape handles on the logits each configuration exposes.
pub struct ForwardNodes {
    pub fused: Option<NodeId>,
    pub audio: Option<NodeId>,
    pub text: Option<NodeId>,
    pub at_weights: Option<NodeId>,
}

impl ForwardNodes {
    /// The branch predictions come from: fused when present, else the
    /// single unimodal branch.
    pub fn designated(&self) -> Result<NodeId> {
        if let Some(f) = self.fused {
            return Ok(f);
        }
        match (self.audio, self.text) {
            (Some(a), None) => Ok(a),
            (None, Some(t)) => Ok(t),
            _ => Err(Error::Config(
                "forward output exposes no unambiguous prediction branch".into(),
            )),
        }
    }
}

/// Value-level forward results.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub fused_logits: Option<Array3<f64>>,
    pub audio_logits: Option<Array3<f64>>,
    pub text_logits: Option<Array3<f64>>,
    pub at_weights: Option<Array3<f64>>,
}

impl ForwardOutput {
    pub fn designated_logits(&self) -> Result<&Array3<f64>> {
        if let Some(f) = &self.fused_logits {
            return Ok(f);
        }
        match (&self.audio_logits, &self.text_logits) {
            (Some(a), None) => Ok(a),
            (None, Some(t)) => Ok(t),
            _ => Err(Error::Config(
                "forward output exposes no unambiguous prediction branch".into(),
            )),
        }
    }
}

/// A built model: immutable config plus its trainable parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
}

/// Initialize all parameters for `config`, drawing from the init stream
/// of `seed`. Registration order is fixed: audio tower, text tower,
/// shared tower, fusion operator.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<Model> {
    let config = config.clone().normalized()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_INIT);
    let mut params = ParamSet::new();
    let d = config.d_model;
    let c = config.n_classes;

    // Which stages exist per modality tower, keyed by fusion position:
    // stages strictly below the merge are always per-modality; stages at
    // or above it exist per-modality only for perspective continuations
    // (or always, for LGF).
    let unimodal_depth = |layer: FusionLayer| match layer {
        FusionLayer::Ef => 1,        // proj only
        FusionLayer::Mf => 2,        // proj + gru
        FusionLayer::Lf => 3,        // proj + gru + attn
        FusionLayer::Lgf | FusionLayer::NoneAudio | FusionLayer::NoneText => 4,
    };
    let full_tower = config.fusion_layer.is_unimodal() || config.has_unimodal_branches();
    let depth = if full_tower {
        4
    } else {
        unimodal_depth(config.fusion_layer)
    };

    let init_tower = |rng: &mut ChaCha8Rng, params: &mut ParamSet, name: &str, in_dim: usize| {
        nn::init_linear(params, rng, &format!("{name}.proj"), d, in_dim, true);
        if depth >= 2 {
            nn::init_bigru(params, rng, &format!("{name}.gru"), d, d);
        }
        if depth >= 3 {
            nn::init_attention(params, rng, &format!("{name}.attn"), d);
        }
        if depth >= 4 {
            nn::init_linear(params, rng, &format!("{name}.fc"), c, d, true);
        }
    };

    if config.uses_audio() {
        init_tower(&mut rng, &mut params, "audio", config.audio_dim);
    }
    if config.uses_text() {
        init_tower(&mut rng, &mut params, "text", config.text_dim);
    }

    // Shared stages from the merge point onward (absent for LGF, where
    // fusion happens on finished logits, and for unimodal baselines).
    match config.fusion_layer {
        FusionLayer::Ef => {
            nn::init_bigru(&mut params, &mut rng, "shared.gru", d, d);
            nn::init_attention(&mut params, &mut rng, "shared.attn", d);
            nn::init_linear(&mut params, &mut rng, "shared.fc", c, d, true);
        }
        FusionLayer::Mf => {
            nn::init_attention(&mut params, &mut rng, "shared.attn", d);
            nn::init_linear(&mut params, &mut rng, "shared.fc", c, d, true);
        }
        FusionLayer::Lf => {
            nn::init_linear(&mut params, &mut rng, "shared.fc", c, d, true);
        }
        FusionLayer::Lgf | FusionLayer::NoneAudio | FusionLayer::NoneText => {}
    }

    if !config.fusion_layer.is_unimodal() {
        init_fusion(&mut params, &mut rng, config.fusion_method, config.fusion_dim());
    }

    Ok(Model { config, params })
}

struct TowerCtx<'a> {
    mask2: &'a Array2<f64>,
    mask_d: ArrayD<f64>,
    training: bool,
    dropout_p: f64,
    n_heads: usize,
}

impl TowerCtx<'_> {
    fn drop(
        &self,
        tape: &mut Tape,
        x: NodeId,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> NodeId {
        if self.training && self.dropout_p > 0.0 {
            let rng = rng.as_mut().expect("training forward requires an rng");
            nn::dropout(tape, x, self.dropout_p, rng)
        } else {
            x
        }
    }

    fn proj(&self, tape: &mut Tape, bp: &BoundParams, name: &str, x: NodeId) -> NodeId {
        let y = nn::linear(tape, bp, &format!("{name}.proj"), x);
        let y = tape.relu(y);
        tape.mask_last(y, &self.mask_d)
    }

    fn gru(
        &self,
        tape: &mut Tape,
        bp: &BoundParams,
        name: &str,
        x: NodeId,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> NodeId {
        let y = nn::bigru(tape, bp, &format!("{name}.gru"), x, self.mask2);
        self.drop(tape, y, rng)
    }

    fn attn(
        &self,
        tape: &mut Tape,
        bp: &BoundParams,
        name: &str,
        x: NodeId,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> NodeId {
        let (y, _) = nn::self_attention(
            tape,
            bp,
            &format!("{name}.attn"),
            x,
            self.mask2,
            self.n_heads,
        );
        self.drop(tape, y, rng)
    }

    fn fc(&self, tape: &mut Tape, bp: &BoundParams, name: &str, x: NodeId) -> NodeId {
        let y = nn::linear(tape, bp, &format!("{name}.fc"), x);
        tape.mask_last(y, &self.mask_d)
    }
}

/// Build the forward graph for one batch on an existing tape with
/// already-bound parameters. `rng` drives dropout and is required only
/// in training mode with nonzero dropout.
pub fn forward_on_tape(
    tape: &mut Tape,
    bp: &BoundParams,
    config: &ModelConfig,
    batch: &DialogueBatch,
    training: bool,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<ForwardNodes> {
    let (b, s) = (batch.mask.shape()[0], batch.mask.shape()[1]);
    if config.uses_audio() && batch.audio.shape() != [b, s, config.audio_dim] {
        return Err(Error::Shape(format!(
            "audio batch {:?} does not match configured [{b},{s},{}]",
            batch.audio.shape(),
            config.audio_dim
        )));
    }
    if config.uses_text() && batch.text.shape() != [b, s, config.text_dim] {
        return Err(Error::Shape(format!(
            "text batch {:?} does not match configured [{b},{s},{}]",
            batch.text.shape(),
            config.text_dim
        )));
    }
    if training && config.dropout_p > 0.0 && rng.is_none() {
        return Err(Error::Config(
            "training forward with dropout requires an rng".into(),
        ));
    }

    let ctx = TowerCtx {
        mask2: &batch.mask,
        mask_d: batch.mask.clone().into_dyn(),
        training,
        dropout_p: config.dropout_p,
        n_heads: config.n_heads,
    };
    let rng = &mut rng;

    let audio_in = if config.uses_audio() {
        let x = tape.constant(batch.audio.clone().into_dyn());
        Some(ctx.proj(tape, bp, "audio", x))
    } else {
        None
    };
    let text_in = if config.uses_text() {
        let x = tape.constant(batch.text.clone().into_dyn());
        Some(ctx.proj(tape, bp, "text", x))
    } else {
        None
    };

    let perspective = config.loss_mode == LossMode::Perspective;
    let mut out = ForwardNodes {
        fused: None,
        audio: None,
        text: None,
        at_weights: None,
    };

    // Completes one modality tower from the stage after `from` onward.
    let finish_tower = |tape: &mut Tape,
                        rng: &mut Option<&mut ChaCha8Rng>,
                        name: &str,
                        x: NodeId,
                        from: usize|
     -> NodeId {
        let mut h = x;
        if from < 2 {
            h = ctx.gru(tape, bp, name, h, rng);
        }
        if from < 3 {
            h = ctx.attn(tape, bp, name, h, rng);
        }
        ctx.fc(tape, bp, name, h)
    };

    match config.fusion_layer {
        FusionLayer::NoneAudio => {
            let a = audio_in.unwrap();
            out.audio = Some(finish_tower(tape, rng, "audio", a, 1));
        }
        FusionLayer::NoneText => {
            let t = text_in.unwrap();
            out.text = Some(finish_tower(tape, rng, "text", t, 1));
        }
        FusionLayer::Ef => {
            let (a, t) = (audio_in.unwrap(), text_in.unwrap());
            let (z, w) = fuse_on_tape(tape, bp, config.fusion_method, a, t);
            out.at_weights = w;
            let h = ctx.gru(tape, bp, "shared", z, rng);
            let h = ctx.attn(tape, bp, "shared", h, rng);
            out.fused = Some(ctx.fc(tape, bp, "shared", h));
            if perspective {
                out.audio = Some(finish_tower(tape, rng, "audio", a, 1));
                out.text = Some(finish_tower(tape, rng, "text", t, 1));
            }
        }
        FusionLayer::Mf => {
            let (a, t) = (audio_in.unwrap(), text_in.unwrap());
            let ga = ctx.gru(tape, bp, "audio", a, rng);
            let gt = ctx.gru(tape, bp, "text", t, rng);
            let (z, w) = fuse_on_tape(tape, bp, config.fusion_method, ga, gt);
            out.at_weights = w;
            let h = ctx.attn(tape, bp, "shared", z, rng);
            out.fused = Some(ctx.fc(tape, bp, "shared", h));
            if perspective {
                out.audio = Some(finish_tower(tape, rng, "audio", ga, 2));
                out.text = Some(finish_tower(tape, rng, "text", gt, 2));
            }
        }
        FusionLayer::Lf => {
            let (a, t) = (audio_in.unwrap(), text_in.unwrap());
            let ga = ctx.gru(tape, bp, "audio", a, rng);
            let gt = ctx.gru(tape, bp, "text", t, rng);
            let ha = ctx.attn(tape, bp, "audio", ga, rng);
            let ht = ctx.attn(tape, bp, "text", gt, rng);
            let (z, w) = fuse_on_tape(tape, bp, config.fusion_method, ha, ht);
            out.at_weights = w;
            out.fused = Some(ctx.fc(tape, bp, "shared", z));
            if perspective {
                out.audio = Some(ctx.fc(tape, bp, "audio", ha));
                out.text = Some(ctx.fc(tape, bp, "text", ht));
            }
        }
        FusionLayer::Lgf => {
            let (a, t) = (audio_in.unwrap(), text_in.unwrap());
            let la = finish_tower(tape, rng, "audio", a, 1);
            let lt = finish_tower(tape, rng, "text", t, 1);
            let (z, w) = fuse_on_tape(tape, bp, config.fusion_method, la, lt);
            out.at_weights = w;
            out.fused = Some(z);
            out.audio = Some(la);
            out.text = Some(lt);
        }
    }
    Ok(out)
}

impl Model {
    /// Bind parameters and build the forward graph on `tape`.
    pub fn forward_nodes(
        &self,
        tape: &mut Tape,
        batch: &DialogueBatch,
        training: bool,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(BoundParams, ForwardNodes)> {
        let bp = BoundParams::bind(tape, &self.params);
        let nodes = forward_on_tape(tape, &bp, &self.config, batch, training, rng)?;
        Ok((bp, nodes))
    }

    /// Value-level forward pass.
    pub fn forward(
        &self,
        batch: &DialogueBatch,
        training: bool,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardOutput> {
        let mut tape = Tape::new();
        let (_, nodes) = self.forward_nodes(&mut tape, batch, training, rng)?;
        let take3 = |id: Option<NodeId>| -> Result<Option<Array3<f64>>> {
            id.map(|id| {
                tape.value(id)
                    .view()
                    .into_dimensionality::<ndarray::Ix3>()
                    .map(|v| v.to_owned())
                    .map_err(|e| Error::Shape(e.to_string()))
            })
            .transpose()
        };
        Ok(ForwardOutput {
            fused_logits: take3(nodes.fused)?,
            audio_logits: take3(nodes.audio)?,
            text_logits: take3(nodes.text)?,
            at_weights: take3(nodes.at_weights)?,
        })
    }
}

/// Argmax over the class axis, ties resolved to the lowest index.
/// Callers gate on the mask; padded rows argmax to class 0.
pub fn predictions(logits: &Array3<f64>) -> Array2<i64> {
    let (b, s, c) = logits.dim();
    let mut preds = Array2::<i64>::zeros((b, s));
    for bi in 0..b {
        for si in 0..s {
            let mut best = 0usize;
            for ci in 1..c {
                if logits[[bi, si, ci]] > logits[[bi, si, best]] {
                    best = ci;
                }
            }
            preds[[bi, si]] = best as i64;
        }
    }
    preds
}
