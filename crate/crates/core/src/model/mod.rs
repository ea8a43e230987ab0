//! The forecasting network.
//!
//! ```text
//! x [L] ─ embed ─> [L, D] ─ segment ─> [L/P₀, P₀, D]
//!   encoder stage 1 ─ merge ─> stage 2 ─ merge ─> ... stage M      (bottom-up)
//!        │                      │                    │
//!        │ lateral              │ lateral            │ lateral
//!        ▼                      ▼                    ▼
//!   decoder stage M <─ split ─ ... <─ split ─ decoder stage 1 <─ query (top-down)
//!
//! forecast = head_enc(flatten(encoder stage M)) + head_dec(flatten(decoder output))
//! ```
//!
//! Each encoder stage runs diagonal-masked element-wise self-attention inside
//! every patch and then diagonal-masked patch-wise self-attention across
//! patches. Each decoder stage first cross-attends (patch-wise) onto the
//! encoder stage of equal patch length, then runs unmasked element-wise
//! self-attention inside each decoder patch.

mod checkpoint;
mod config;
pub mod patching;

pub use checkpoint::{load_checkpoint, manifest_path, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{ModelConfig, Variant, POINT_WISE_MAX_LEN};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    element_wise_self_attention, patch_wise_cross_attention, patch_wise_self_attention, AttentionBlock, MaskKind, Pass,
    ScoreRecord, ShapeStep, Site, SiteKind,
};
use crate::error::{Error, Result};
use crate::tensor::{Init, ParamId, ParamSet, Tape, Tensor, Var};
use patching::{merge_var, segment_var, split_var};

/// Encoder or decoder feature map `[S, P, D]` at one stage.
#[derive(Debug, Clone, Copy)]
pub struct StageFeatures {
    pub var: Var,
    /// 1-based stage index.
    pub stage: usize,
    pub patches: usize,
    pub patch_len: usize,
}

#[derive(Debug, Clone)]
struct EncoderStage {
    elem: Option<AttentionBlock>,
    patch: Option<AttentionBlock>,
}

#[derive(Debug, Clone)]
struct DecoderStage {
    cross: AttentionBlock,
    elem: Option<AttentionBlock>,
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
pub struct Fppformer {
    config: ModelConfig,
    params: ParamSet,
    embed: Linear,
    encoder: Vec<EncoderStage>,
    query: ParamId,
    decoder: Vec<DecoderStage>,
    head_enc: Linear,
    head_dec: Linear,
}

impl Fppformer {
    /// Builds a freshly initialised model; initialisation is a pure function
    /// of `(config, seed)`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let d = config.embed_dim;
        let m = config.stages;
        let (l, h) = (config.input_len, config.pred_len);
        let variant = config.variant;
        let ff = config.feed_forward;
        let drop = config.dropout;

        let embed = Linear {
            weight: ps.add("embed.weight", vec![1, d], Init::FanIn(1), &mut rng),
            bias: ps.add("embed.bias", vec![d], Init::Zeros, &mut rng),
        };

        let mut encoder = Vec::with_capacity(m);
        for i in 0..m {
            let prefix = format!("enc{}", i + 1);
            let elem = variant
                .has_element_blocks()
                .then(|| AttentionBlock::new(&mut ps, &format!("{prefix}.elem"), d, ff, drop, &mut rng));
            let patch = variant.has_patch_blocks().then(|| {
                let width = config.stage_patch(i) * d;
                AttentionBlock::new(&mut ps, &format!("{prefix}.patch"), width, ff, drop, &mut rng)
            });
            encoder.push(EncoderStage { elem, patch });
        }

        let coarse = config.coarse_patch();
        let query = ps.add("dec.query", vec![h / coarse, coarse, d], Init::Uniform(0.02), &mut rng);

        let mut decoder = Vec::with_capacity(m);
        for j in 0..m {
            let prefix = format!("dec{}", j + 1);
            let width = match variant {
                Variant::PointWiseOnly => d,
                Variant::BottomUpDecoder => config.stage_patch(j) * d,
                _ => config.stage_patch(m - 1 - j) * d,
            };
            let cross = AttentionBlock::new(&mut ps, &format!("{prefix}.cross"), width, ff, drop, &mut rng);
            let elem = variant
                .has_element_blocks()
                .then(|| AttentionBlock::new(&mut ps, &format!("{prefix}.elem"), d, ff, drop, &mut rng));
            decoder.push(DecoderStage { cross, elem });
        }

        let head_enc = Linear {
            weight: ps.add("head.enc.weight", vec![l * d, h], Init::FanIn(l * d), &mut rng),
            bias: ps.add("head.enc.bias", vec![h], Init::Zeros, &mut rng),
        };
        let head_dec = Linear {
            weight: ps.add("head.dec.weight", vec![h * d, h], Init::FanIn(h * d), &mut rng),
            bias: ps.add("head.dec.bias", vec![h], Init::Zeros, &mut rng),
        };

        Ok(Fppformer {
            config,
            params: ps,
            embed,
            encoder,
            query,
            decoder,
            head_enc,
            head_dec,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Ids of parameters that only influence the decoder path (decoder
    /// query, decoder stages, decoder projection).
    pub fn decoder_param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.query];
        for st in &self.decoder {
            ids.extend(st.cross.param_ids());
            if let Some(e) = &st.elem {
                ids.extend(e.param_ids());
            }
        }
        ids.extend([self.head_dec.weight, self.head_dec.bias]);
        ids
    }

    fn encoder_mask(&self) -> MaskKind {
        match self.config.variant {
            Variant::NoDM => MaskKind::None,
            _ => MaskKind::Diagonal,
        }
    }

    fn linear(&self, tape: &mut Tape, x: Var, lin: Linear) -> Result<Var> {
        let w = tape.param(self.params.spec(lin.weight));
        let b = tape.param(self.params.spec(lin.bias));
        tape.linear(x, w, b)
    }

    /// Maps every element independently through one shared `1 → D` affine
    /// map: `[L] → [L, D]`.
    pub fn embed(&self, tape: &mut Tape, x: &[f64]) -> Result<Var> {
        if x.len() != self.config.input_len {
            return Err(Error::shape(format!(
                "input window has {} values, model expects {}",
                x.len(),
                self.config.input_len
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite value in input window".into()));
        }
        let input = tape.constant(Tensor::new(vec![x.len(), 1], x.to_vec())?);
        self.linear(tape, input, self.embed)
    }

    /// One encoder stage on `[S, P, D]` (0-based `index`).
    pub fn encoder_stage(&self, tape: &mut Tape, index: usize, x: Var, pass: &mut Pass) -> Result<Var> {
        let stage = &self.encoder[index];
        let mask = self.encoder_mask();
        let n = index + 1;
        let shape = tape.shape(x).to_vec();
        let mut h = x;
        if let Some(elem) = &stage.elem {
            let site = Site {
                stage: n,
                kind: SiteKind::EncElem,
            };
            h = element_wise_self_attention(tape, &self.params, elem, h, mask, pass, site)?;
            pass.note(tape, format!("enc{n}.element_wise"), h);
        }
        if let Some(patch) = &stage.patch {
            let (s, p, d) = (shape[0], shape[1], shape[2]);
            let flat = tape.reshape(h, vec![s, p * d])?;
            pass.note(tape, format!("enc{n}.reshape"), flat);
            let site = Site {
                stage: n,
                kind: SiteKind::EncPatch,
            };
            let out = patch_wise_self_attention(tape, &self.params, patch, flat, mask, pass, site)?;
            pass.note(tape, format!("enc{n}.patch_wise"), out);
            h = tape.reshape(out, shape)?;
        }
        Ok(h)
    }

    /// Bottom-up encoder over the embedded sequence `[L, D]`.
    pub fn encode(&self, tape: &mut Tape, embedded: Var, pass: &mut Pass) -> Result<Vec<StageFeatures>> {
        let cfg = &self.config;
        let mut out = Vec::with_capacity(cfg.stages);
        if cfg.variant == Variant::PointWiseOnly {
            let mut h = tape.reshape(embedded, vec![1, cfg.input_len, cfg.embed_dim])?;
            for i in 0..cfg.stages {
                h = self.encoder_stage(tape, i, h, pass)?;
                out.push(StageFeatures {
                    var: h,
                    stage: i + 1,
                    patches: 1,
                    patch_len: cfg.input_len,
                });
            }
            return Ok(out);
        }
        let mut h = segment_var(tape, embedded, cfg.patch_size)?;
        pass.note(tape, "segmentation", h);
        for i in 0..cfg.stages {
            if i > 0 {
                h = merge_var(tape, h)?;
                pass.note(tape, format!("enc{}.merge", i + 1), h);
            }
            h = self.encoder_stage(tape, i, h, pass)?;
            let shape = tape.shape(h);
            out.push(StageFeatures {
                var: h,
                stage: i + 1,
                patches: shape[0],
                patch_len: shape[1],
            });
        }
        Ok(out)
    }

    /// One decoder stage (0-based `index`): cross-attention onto the lateral
    /// encoder map, then element-wise self-attention inside each patch.
    pub fn decoder_stage(&self, tape: &mut Tape, index: usize, query: Var, lateral: &StageFeatures, pass: &mut Pass) -> Result<Var> {
        let stage = &self.decoder[index];
        let n = index + 1;
        let qshape = tape.shape(query).to_vec();
        let (sq, pq, d) = (qshape[0], qshape[1], qshape[2]);
        let (q2, s2) = if self.config.variant == Variant::PointWiseOnly {
            (
                tape.reshape(query, vec![sq * pq, d])?,
                tape.reshape(lateral.var, vec![lateral.patches * lateral.patch_len, d])?,
            )
        } else {
            if pq != lateral.patch_len {
                return Err(Error::shape(format!(
                    "decoder stage {} has patch length {} but its lateral encoder stage {} has {}",
                    n, pq, lateral.stage, lateral.patch_len
                )));
            }
            (
                tape.reshape(query, vec![sq, pq * d])?,
                tape.reshape(lateral.var, vec![lateral.patches, lateral.patch_len * d])?,
            )
        };
        let site = Site {
            stage: n,
            kind: SiteKind::DecCross,
        };
        let crossed = patch_wise_cross_attention(tape, &self.params, &stage.cross, q2, s2, pass, site)?;
        pass.note(tape, format!("dec{n}.cross"), crossed);
        let mut h = tape.reshape(crossed, qshape)?;
        if let Some(elem) = &stage.elem {
            let site = Site {
                stage: n,
                kind: SiteKind::DecElem,
            };
            h = element_wise_self_attention(tape, &self.params, elem, h, MaskKind::None, pass, site)?;
            pass.note(tape, format!("dec{n}.element_wise"), h);
        }
        Ok(h)
    }

    /// Encoder stage (0-based) feeding decoder stage `j`.
    fn lateral_index(&self, j: usize) -> usize {
        match self.config.variant {
            Variant::BottomUpDecoder => j,
            _ => self.config.stages - 1 - j,
        }
    }

    /// Top-down decoder. Returns the final map, `[H/P₀, P₀, D]` for the
    /// pyramid variants.
    pub fn decode(&self, tape: &mut Tape, encoded: &[StageFeatures], pass: &mut Pass) -> Result<Var> {
        let cfg = &self.config;
        if encoded.len() != cfg.stages {
            return Err(Error::shape(format!(
                "decoder needs {} encoder maps, got {}",
                cfg.stages,
                encoded.len()
            )));
        }
        let (h, d) = (cfg.pred_len, cfg.embed_dim);
        let q = tape.param(self.params.spec(self.query));
        let mut x = match cfg.variant {
            Variant::PointWiseOnly => tape.reshape(q, vec![1, h, d])?,
            Variant::BottomUpDecoder => tape.reshape(q, vec![h / cfg.patch_size, cfg.patch_size, d])?,
            _ => q,
        };
        pass.note(tape, "dec.query", x);
        for j in 0..cfg.stages {
            let lateral = encoded[self.lateral_index(j)];
            x = self.decoder_stage(tape, j, x, &lateral, pass)?;
            if j + 1 < cfg.stages {
                x = match cfg.variant {
                    Variant::PointWiseOnly => x,
                    Variant::BottomUpDecoder => merge_var(tape, x)?,
                    _ => split_var(tape, x)?,
                };
                pass.note(tape, format!("dec{}.resample", j + 1), x);
            }
        }
        Ok(x)
    }

    /// `head_enc(flatten(enc_final)) + head_dec(flatten(dec_final))`, `[H]`.
    pub fn project(&self, tape: &mut Tape, enc_final: Var, dec_final: Option<Var>) -> Result<Var> {
        let cfg = &self.config;
        let (l, h, d) = (cfg.input_len, cfg.pred_len, cfg.embed_dim);
        let e = tape.reshape(enc_final, vec![1, l * d])?;
        let mut y = self.linear(tape, e, self.head_enc)?;
        if let Some(dec) = dec_final {
            let flat = tape.reshape(dec, vec![1, h * d])?;
            let yd = self.linear(tape, flat, self.head_dec)?;
            y = tape.add(y, yd)?;
        }
        tape.reshape(y, vec![h])
    }

    /// Direct multi-step forecast of a (RevIN-normalised) window.
    pub fn forward(&self, tape: &mut Tape, x: &[f64], pass: &mut Pass) -> Result<Var> {
        let input = tape.constant(Tensor::vector(x.to_vec()));
        pass.note(tape, "input", input);
        let emb = self.embed(tape, x)?;
        pass.note(tape, "embedding", emb);
        let encoded = self.encode(tape, emb, pass)?;
        let enc_final = encoded.last().expect("at least one stage").var;
        let dec = if self.config.variant == Variant::LinearDecoder {
            None
        } else {
            Some(self.decode(tape, &encoded, pass)?)
        };
        let y = self.project(tape, enc_final, dec)?;
        pass.note(tape, "prediction", y);
        Ok(y)
    }

    /// Evaluation-mode forecast in normalised space.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new(self.params.data());
        let y = self.forward(&mut tape, x, &mut Pass::eval())?;
        Ok(tape.value(y).to_vec())
    }

    /// Loss and flat parameter gradient at `params` (same layout as
    /// [`Fppformer::params`]). Dropout is active iff `rng` is given.
    pub fn loss_and_grad(&self, params: &[f64], x: &[f64], target: &[f64], rng: Option<&mut ChaCha8Rng>) -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new(params);
        let mut pass = Pass {
            rng,
            ..Default::default()
        };
        let pred = self.forward(&mut tape, x, &mut pass)?;
        let loss = forecast_loss(&mut tape, pred, target)?;
        let value = tape.value(loss)[0];
        let grads = tape.backward(loss)?;
        Ok((value, grads.into_params()))
    }

    /// Evaluation-mode loss at `params`.
    pub fn loss_at(&self, params: &[f64], x: &[f64], target: &[f64]) -> Result<f64> {
        let mut tape = Tape::new(params);
        let pred = self.forward(&mut tape, x, &mut Pass::eval())?;
        let loss = forecast_loss(&mut tape, pred, target)?;
        Ok(tape.value(loss)[0])
    }

    /// Post-softmax weights of every attention block for one window, in
    /// execution order.
    pub fn attention_scores(&self, x: &[f64]) -> Result<Vec<ScoreRecord>> {
        let mut sink = Vec::new();
        let mut tape = Tape::new(self.params.data());
        self.forward(&mut tape, x, &mut Pass::recording(&mut sink))?;
        Ok(sink)
    }

    /// Shapes at every stage boundary of one forward pass.
    pub fn shape_trace(&self) -> Result<Vec<ShapeStep>> {
        let mut sink = Vec::new();
        let mut tape = Tape::new(self.params.data());
        let x = vec![0.0; self.config.input_len];
        self.forward(&mut tape, &x, &mut Pass::tracing(&mut sink))?;
        Ok(sink)
    }
}

/// `MSE(pred, target) + MAE(pred, target)`.
pub fn forecast_loss(tape: &mut Tape, pred: Var, target: &[f64]) -> Result<Var> {
    if tape.shape(pred) != [target.len()] {
        return Err(Error::shape(format!(
            "prediction of shape {:?} against a target of length {}",
            tape.shape(pred),
            target.len()
        )));
    }
    let t = tape.constant(Tensor::vector(target.to_vec()));
    let diff = tape.sub(pred, t)?;
    let sq = tape.square(diff);
    let mse = tape.mean(sq);
    let ab = tape.abs(diff);
    let mae = tape.mean(ab);
    tape.add(mse, mae)
}
