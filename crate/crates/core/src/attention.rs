//! Attention primitives: scaled dot-product attention with optional diagonal
//! masking, and the residual block wrapping it (pre-norm, single head,
//! rectified feed-forward).
//!
//! Three block flavours are used by the model:
//!
//! * element-wise self-attention over `[S, P, D]`: each of the `S` patches
//!   attends over its own `P` elements, so no information crosses patches;
//! * patch-wise self-attention over `[S, P·D]`: every patch is one token;
//! * patch-wise cross-attention from decoder patches onto encoder patches.
//!
//! Encoder self-attention uses [`MaskKind::Diagonal`], which removes each
//! token's own key from its softmax so that it is expressed purely by the
//! other tokens.

use std::fmt;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Init, ParamId, ParamSet, Tape, Tensor, Var};

/// Additive logit applied to masked positions.
pub const MASK_SENTINEL: f64 = -1e30;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    None,
    Diagonal,
}

/// Output of [`scaled_dot_product`].
#[derive(Debug, Clone, Copy)]
pub struct Attended {
    pub output: Var,
    /// Post-softmax weights, `[..., T, T_k]`.
    pub weights: Var,
}

/// `softmax(q·kᵀ/√d + mask)·v` over the last two axes.
pub fn scaled_dot_product(tape: &mut Tape, q: Var, k: Var, v: Var, mask: MaskKind) -> Result<Attended> {
    let (qs, ks) = (tape.shape(q).to_vec(), tape.shape(k).to_vec());
    if qs.len() < 2 || ks.len() < 2 {
        return Err(Error::shape(format!("attention needs matrices, got q {:?} k {:?}", qs, ks)));
    }
    let t = qs[qs.len() - 2];
    let d = qs[qs.len() - 1];
    let tk = ks[ks.len() - 2];
    if mask == MaskKind::Diagonal {
        if t != tk {
            return Err(Error::shape(format!(
                "diagonal mask needs a square score matrix, got {}x{}",
                t, tk
            )));
        }
        if t < 2 {
            return Err(Error::shape(
                "diagonal mask over a single token masks the whole row".to_string(),
            ));
        }
    }
    let raw = tape.matmul_bt(q, k)?;
    let mut scores = tape.scale(raw, 1.0 / (d as f64).sqrt());
    if mask == MaskKind::Diagonal {
        let mut m = Tensor::zeros(vec![t, t]);
        for i in 0..t {
            m.data_mut()[i * t + i] = MASK_SENTINEL;
        }
        let m = tape.constant(m);
        scores = tape.add_broadcast(scores, m)?;
    }
    let last = tape.shape(scores).len() - 1;
    let weights = tape.softmax(scores, last)?;
    let output = tape.matmul(weights, v)?;
    Ok(Attended { output, weights })
}

/// Which attention block a score matrix came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SiteKind {
    EncElem,
    EncPatch,
    DecCross,
    DecElem,
}

impl SiteKind {
    pub fn label(self) -> &'static str {
        match self {
            SiteKind::EncElem => "enc_elem",
            SiteKind::EncPatch => "enc_patch",
            SiteKind::DecCross => "dec_cross",
            SiteKind::DecElem => "dec_elem",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Site {
    /// 1-based stage index within the encoder or decoder.
    pub stage: usize,
    pub kind: SiteKind,
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}_{}", self.stage, self.kind.label())
    }
}

#[derive(Debug, Clone)]
pub struct ScoreRecord {
    pub site: Site,
    pub weights: Tensor,
}

impl ScoreRecord {
    /// Weights flattened to a row-major matrix: batched element-wise maps
    /// `[S, P, P]` become `S·P` rows of length `P`.
    pub fn rows(&self) -> Vec<&[f64]> {
        let cols = *self.weights.shape().last().expect("non-empty shape");
        self.weights.data().chunks(cols).collect()
    }
}

/// Named tensor shape observed at a boundary inside a forward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeStep {
    pub label: String,
    pub shape: Vec<usize>,
}

/// Per-forward-pass context: the dropout rng (training mode iff present) and
/// optional sinks for attention weights and intermediate shapes.
#[derive(Default)]
pub struct Pass<'a> {
    pub rng: Option<&'a mut ChaCha8Rng>,
    pub scores: Option<&'a mut Vec<ScoreRecord>>,
    pub shapes: Option<&'a mut Vec<ShapeStep>>,
}

impl<'a> Pass<'a> {
    pub fn eval() -> Self {
        Pass::default()
    }

    pub fn train(rng: &'a mut ChaCha8Rng) -> Self {
        Pass {
            rng: Some(rng),
            ..Default::default()
        }
    }

    pub fn recording(sink: &'a mut Vec<ScoreRecord>) -> Self {
        Pass {
            scores: Some(sink),
            ..Default::default()
        }
    }

    pub fn tracing(sink: &'a mut Vec<ShapeStep>) -> Self {
        Pass {
            shapes: Some(sink),
            ..Default::default()
        }
    }

    pub(crate) fn note(&mut self, tape: &Tape, label: impl Into<String>, v: Var) {
        if let Some(sink) = self.shapes.as_deref_mut() {
            sink.push(ShapeStep {
                label: label.into(),
                shape: tape.shape(v).to_vec(),
            });
        }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    fn record(&mut self, tape: &Tape, site: Site, weights: Var) {
        if let Some(sink) = self.scores.as_deref_mut() {
            sink.push(ScoreRecord {
                site,
                weights: tape.tensor(weights),
            });
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Affine {
    weight: ParamId,
    bias: ParamId,
}

/// Key projection. It has no bias: `q·b` is constant along each score row
/// and cancels in the softmax.
#[derive(Debug, Clone, Copy)]
struct KeyProj {
    weight: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct FeedForward {
    up: Affine,
    down: Affine,
}

/// Parameters of one residual attention block.
///
/// Layout: `x + drop(W_o · attn(LN₁ x))`, then `+ drop(W₂ relu(W₁ LN₂ ·))`
/// when the feed-forward sub-block is enabled.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    dim: usize,
    dropout: f64,
    norm1: Affine,
    query: Affine,
    key: KeyProj,
    value: Affine,
    out: Affine,
    norm2: Option<Affine>,
    ff: Option<FeedForward>,
}

fn affine<R: Rng>(ps: &mut ParamSet, prefix: &str, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Affine {
    Affine {
        weight: ps.add(format!("{prefix}.{name}.weight"), vec![fan_in, fan_out], Init::FanIn(fan_in), rng),
        bias: ps.add(format!("{prefix}.{name}.bias"), vec![fan_out], Init::Zeros, rng),
    }
}

fn norm<R: Rng>(ps: &mut ParamSet, prefix: &str, name: &str, dim: usize, rng: &mut R) -> Affine {
    Affine {
        weight: ps.add(format!("{prefix}.{name}.gain"), vec![dim], Init::Ones, rng),
        bias: ps.add(format!("{prefix}.{name}.bias"), vec![dim], Init::Zeros, rng),
    }
}

impl AttentionBlock {
    /// Registers the block's parameters under `prefix`.
    pub fn new<R: Rng>(ps: &mut ParamSet, prefix: &str, dim: usize, feed_forward: bool, dropout: f64, rng: &mut R) -> Self {
        let norm1 = norm(ps, prefix, "norm1", dim, rng);
        let query = affine(ps, prefix, "query", dim, dim, rng);
        let key = KeyProj {
            weight: ps.add(format!("{prefix}.key.weight"), vec![dim, dim], Init::FanIn(dim), rng),
        };
        let value = affine(ps, prefix, "value", dim, dim, rng);
        let out = affine(ps, prefix, "out", dim, dim, rng);
        let (norm2, ff) = if feed_forward {
            let n2 = norm(ps, prefix, "norm2", dim, rng);
            let up = affine(ps, prefix, "ff_up", dim, 4 * dim, rng);
            let down = affine(ps, prefix, "ff_down", 4 * dim, dim, rng);
            (Some(n2), Some(FeedForward { up, down }))
        } else {
            (None, None)
        };
        AttentionBlock {
            dim,
            dropout,
            norm1,
            query,
            key,
            value,
            out,
            norm2,
            ff,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Every parameter id owned by this block.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        let mut push = |a: &Affine| ids.extend([a.weight, a.bias]);
        push(&self.norm1);
        push(&self.query);
        push(&self.value);
        push(&self.out);
        if let Some(n) = &self.norm2 {
            push(n);
        }
        if let Some(ff) = &self.ff {
            push(&ff.up);
            push(&ff.down);
        }
        ids.push(self.key.weight);
        ids
    }

    fn apply_affine(&self, tape: &mut Tape, ps: &ParamSet, x: Var, a: &Affine) -> Result<Var> {
        let w = tape.param(ps.spec(a.weight));
        let b = tape.param(ps.spec(a.bias));
        tape.linear(x, w, b)
    }

    fn apply_key(&self, tape: &mut Tape, ps: &ParamSet, x: Var) -> Result<Var> {
        let w = tape.param(ps.spec(self.key.weight));
        tape.matmul(x, w)
    }

    fn apply_norm(&self, tape: &mut Tape, ps: &ParamSet, x: Var, a: &Affine) -> Result<Var> {
        let g = tape.param(ps.spec(a.weight));
        let b = tape.param(ps.spec(a.bias));
        tape.layer_norm(x, g, b, LN_EPS)
    }

    fn check_dim(&self, tape: &Tape, x: Var) -> Result<()> {
        let last = *tape.shape(x).last().expect("non-empty shape");
        if last != self.dim {
            return Err(Error::shape(format!(
                "block of width {} applied to features of shape {:?}",
                self.dim,
                tape.shape(x)
            )));
        }
        Ok(())
    }

    /// Residual attention step without the feed-forward part. Returns the
    /// updated stream and the raw attention result.
    fn attend(&self, tape: &mut Tape, ps: &ParamSet, query: Var, source: Option<Var>, mask: MaskKind, pass: &mut Pass) -> Result<(Var, Attended)> {
        let hq = self.apply_norm(tape, ps, query, &self.norm1)?;
        let hs = match source {
            Some(s) => self.apply_norm(tape, ps, s, &self.norm1)?,
            None => hq,
        };
        let q = self.apply_affine(tape, ps, hq, &self.query)?;
        let k = self.apply_key(tape, ps, hs)?;
        let v = self.apply_affine(tape, ps, hs, &self.value)?;
        let att = scaled_dot_product(tape, q, k, v, mask)?;
        let o = self.apply_affine(tape, ps, att.output, &self.out)?;
        let o = tape.dropout(o, self.dropout, pass.rng.as_deref_mut())?;
        Ok((tape.add(query, o)?, att))
    }

    fn feed_forward(&self, tape: &mut Tape, ps: &ParamSet, x: Var, pass: &mut Pass) -> Result<Var> {
        let (Some(n2), Some(ff)) = (&self.norm2, &self.ff) else {
            return Ok(x);
        };
        let h = self.apply_norm(tape, ps, x, n2)?;
        let h = self.apply_affine(tape, ps, h, &ff.up)?;
        let h = tape.relu(h);
        let h = self.apply_affine(tape, ps, h, &ff.down)?;
        let h = tape.dropout(h, self.dropout, pass.rng.as_deref_mut())?;
        tape.add(x, h)
    }

    /// Self-attention over the second-to-last axis of `x` (`[..., T, dim]`);
    /// leading axes are independent batches.
    pub fn self_attention(&self, tape: &mut Tape, ps: &ParamSet, x: Var, mask: MaskKind, pass: &mut Pass, site: Site) -> Result<Var> {
        self.check_dim(tape, x)?;
        let (x1, att) = self.attend(tape, ps, x, None, mask, pass)?;
        pass.record(tape, site, att.weights);
        self.feed_forward(tape, ps, x1, pass)
    }

    /// Unmasked attention of `query` rows onto `source` rows.
    pub fn cross_attention(&self, tape: &mut Tape, ps: &ParamSet, query: Var, source: Var, pass: &mut Pass, site: Site) -> Result<Var> {
        self.check_dim(tape, query)?;
        self.check_dim(tape, source)?;
        let (x1, att) = self.attend(tape, ps, query, Some(source), MaskKind::None, pass)?;
        pass.record(tape, site, att.weights);
        self.feed_forward(tape, ps, x1, pass)
    }

    /// The raw attention output (before output projection and residual) of a
    /// self-attention call, for inspection.
    pub fn raw_self_attention(&self, tape: &mut Tape, ps: &ParamSet, x: Var, mask: MaskKind) -> Result<Attended> {
        self.check_dim(tape, x)?;
        let h = self.apply_norm(tape, ps, x, &self.norm1)?;
        let q = self.apply_affine(tape, ps, h, &self.query)?;
        let k = self.apply_key(tape, ps, h)?;
        let v = self.apply_affine(tape, ps, h, &self.value)?;
        scaled_dot_product(tape, q, k, v, mask)
    }
}

/// Element-wise self-attention over `[S, P, D]`, independently per patch.
pub fn element_wise_self_attention(tape: &mut Tape, ps: &ParamSet, block: &AttentionBlock, x: Var, mask: MaskKind, pass: &mut Pass, site: Site) -> Result<Var> {
    let shape = tape.shape(x);
    if shape.len() != 3 {
        return Err(Error::shape(format!("element-wise attention expects [S, P, D], got {:?}", shape)));
    }
    if mask == MaskKind::Diagonal && shape[1] < 2 {
        return Err(Error::shape(format!(
            "diagonal-masked element-wise attention needs patches of at least 2 elements, got {}",
            shape[1]
        )));
    }
    block.self_attention(tape, ps, x, mask, pass, site)
}

/// Patch-wise self-attention over `[S, P·D]`.
pub fn patch_wise_self_attention(tape: &mut Tape, ps: &ParamSet, block: &AttentionBlock, x: Var, mask: MaskKind, pass: &mut Pass, site: Site) -> Result<Var> {
    let shape = tape.shape(x);
    if shape.len() != 2 {
        return Err(Error::shape(format!("patch-wise attention expects [S, P·D], got {:?}", shape)));
    }
    if mask == MaskKind::Diagonal && shape[0] < 2 {
        return Err(Error::shape(format!(
            "diagonal-masked patch-wise attention needs at least 2 patches, got {}",
            shape[0]
        )));
    }
    block.self_attention(tape, ps, x, mask, pass, site)
}

/// Unmasked cross-attention from `[S_q, F]` decoder patches onto `[S_k, F]`
/// encoder patches.
pub fn patch_wise_cross_attention(tape: &mut Tape, ps: &ParamSet, block: &AttentionBlock, query: Var, source: Var, pass: &mut Pass, site: Site) -> Result<Var> {
    let (qs, ss) = (tape.shape(query), tape.shape(source));
    if qs.len() != 2 || ss.len() != 2 || qs[1] != ss[1] {
        return Err(Error::shape(format!(
            "cross-attention feature mismatch: query {:?}, source {:?}",
            qs, ss
        )));
    }
    block.cross_attention(tape, ps, query, source, pass, site)
}

/// Formats a float with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{:.16e}", x)
}

/// Writes one `{stage}_{site}.csv` per record into `dir`. Returns the paths
/// in record order.
pub fn write_score_csvs(records: &[ScoreRecord], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(records.len());
    for rec in records {
        let path = dir.join(format!("{}.csv", rec.site));
        let mut w = csv::WriterBuilder::new().has_headers(false).from_path(&path)?;
        for row in rec.rows() {
            w.write_record(row.iter().map(|&v| fmt_f64(v)))?;
        }
        w.flush()?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Scores, softmax and weighted sum evaluated with plain loops.
    fn attention_oracle(q: &Tensor, k: &Tensor, v: &Tensor, diagonal: bool) -> (Vec<f64>, Vec<f64>) {
        let (t, d) = (q.shape()[0], q.shape()[1]);
        let tk = k.shape()[0];
        let dv = v.shape()[1];
        let mut w = vec![0.0; t * tk];
        for i in 0..t {
            let mut row: Vec<f64> = (0..tk)
                .map(|j| (0..d).map(|c| q.data()[i * d + c] * k.data()[j * d + c]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            if diagonal {
                row[i] = f64::NEG_INFINITY;
            }
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|s| (s - mx).exp()).sum();
            for j in 0..tk {
                w[i * tk + j] = (row[j] - mx).exp() / z;
            }
        }
        let mut out = vec![0.0; t * dv];
        for i in 0..t {
            for j in 0..tk {
                for c in 0..dv {
                    out[i * dv + c] += w[i * tk + j] * v.data()[j * dv + c];
                }
            }
        }
        (w, out)
    }

    #[test]
    fn two_token_diagonal_swaps_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::detached();
        let q = tape.constant(rand_tensor(&mut rng, vec![2, 3]));
        let k = tape.constant(rand_tensor(&mut rng, vec![2, 3]));
        let vt = rand_tensor(&mut rng, vec![2, 3]);
        let v = tape.constant(vt.clone());
        let a = scaled_dot_product(&mut tape, q, k, v, MaskKind::Diagonal).unwrap();
        let w = tape.value(a.weights);
        for (x, y) in w.iter().zip([0.0, 1.0, 1.0, 0.0]) {
            assert!((x - y).abs() < 1e-12);
        }
        let out = tape.value(a.output);
        assert!((out[0] - vt.data()[3]).abs() < 1e-12);
        assert!((out[3] - vt.data()[0]).abs() < 1e-12);
    }

    #[test]
    fn zero_query_averages_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::detached();
        let q = tape.constant(Tensor::zeros(vec![3, 4]));
        let k = tape.constant(rand_tensor(&mut rng, vec![5, 4]));
        let vt = rand_tensor(&mut rng, vec![5, 2]);
        let v = tape.constant(vt.clone());
        let a = scaled_dot_product(&mut tape, q, k, v, MaskKind::None).unwrap();
        for c in 0..2 {
            let mean = (0..5).map(|j| vt.data()[j * 2 + c]).sum::<f64>() / 5.0;
            for i in 0..3 {
                assert!((tape.value(a.output)[i * 2 + c] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matches_step_by_step_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for diagonal in [false, true] {
            let (qt, kt, vt) = (
                rand_tensor(&mut rng, vec![4, 8]),
                rand_tensor(&mut rng, vec![4, 8]),
                rand_tensor(&mut rng, vec![4, 8]),
            );
            let mut tape = Tape::detached();
            let q = tape.constant(qt.clone());
            let k = tape.constant(kt.clone());
            let v = tape.constant(vt.clone());
            let mask = if diagonal { MaskKind::Diagonal } else { MaskKind::None };
            let a = scaled_dot_product(&mut tape, q, k, v, mask).unwrap();
            let (w, out) = attention_oracle(&qt, &kt, &vt, diagonal);
            for (x, y) in tape.value(a.weights).iter().zip(&w) {
                assert!((x - y).abs() < 1e-12);
            }
            for (x, y) in tape.value(a.output).iter().zip(&out) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn degenerate_diagonal_is_an_error() {
        let mut tape = Tape::detached();
        let x = tape.constant(Tensor::zeros(vec![1, 3]));
        assert!(scaled_dot_product(&mut tape, x, x, x, MaskKind::Diagonal).is_err());
        let y = tape.constant(Tensor::zeros(vec![2, 3]));
        assert!(scaled_dot_product(&mut tape, x, y, y, MaskKind::Diagonal).is_err());
    }

    #[test]
    fn diagonal_excludes_own_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let qt = rand_tensor(&mut rng, vec![5, 3]);
        let kt = rand_tensor(&mut rng, vec![5, 3]);
        let vt = rand_tensor(&mut rng, vec![5, 3]);
        let run = |v: Tensor| {
            let mut tape = Tape::detached();
            let q = tape.constant(qt.clone());
            let k = tape.constant(kt.clone());
            let v = tape.constant(v);
            let a = scaled_dot_product(&mut tape, q, k, v, MaskKind::Diagonal).unwrap();
            tape.value(a.output).to_vec()
        };
        let base = run(vt.clone());
        for i in 0..5 {
            let mut vp = vt.clone();
            for c in 0..3 {
                vp.data_mut()[i * 3 + c] += 10.0;
            }
            let out = run(vp);
            assert_eq!(&out[i * 3..i * 3 + 3], &base[i * 3..i * 3 + 3]);
            assert!(out != base);
        }
    }

    fn block(dim: usize, seed: u64) -> (ParamSet, AttentionBlock) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let b = AttentionBlock::new(&mut ps, "blk", dim, true, 0.1, &mut rng);
        (ps, b)
    }

    const SITE: Site = Site {
        stage: 1,
        kind: SiteKind::EncElem,
    };

    #[test]
    fn element_wise_is_patch_independent() {
        let (ps, blk) = block(4, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let patch = rand_tensor(&mut rng, vec![1, 3, 4]);
        let mut both = patch.data().to_vec();
        both.extend_from_slice(patch.data());
        let mut tape = Tape::new(ps.data());
        let x = tape.constant(Tensor::new(vec![2, 3, 4], both).unwrap());
        let y = element_wise_self_attention(&mut tape, &ps, &blk, x, MaskKind::Diagonal, &mut Pass::eval(), SITE).unwrap();
        let out = tape.value(y);
        assert_eq!(&out[..12], &out[12..]);

        // zeroing patch 1 leaves patch 0 untouched
        let mut other = patch.data().to_vec();
        other.extend(std::iter::repeat(0.0).take(12));
        let x2 = tape.constant(Tensor::new(vec![2, 3, 4], other).unwrap());
        let y2 = element_wise_self_attention(&mut tape, &ps, &blk, x2, MaskKind::Diagonal, &mut Pass::eval(), SITE).unwrap();
        assert_eq!(&tape.value(y2)[..12], &tape.value(y)[..12]);
    }

    #[test]
    fn zeroed_block_is_identity() {
        let (mut ps, blk) = block(6, 7);
        ps.data_mut().iter_mut().for_each(|v| *v = 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let xt = rand_tensor(&mut rng, vec![4, 6]);
        let mut tape = Tape::new(ps.data());
        let x = tape.constant(xt.clone());
        let y = patch_wise_self_attention(&mut tape, &ps, &blk, x, MaskKind::Diagonal, &mut Pass::eval(), SITE).unwrap();
        assert_eq!(tape.value(y), xt.data());
    }

    #[test]
    fn element_wise_single_patch_matches_composition_oracle() {
        // S=1, P=2, D=2 with hand-set parameters and no feed-forward.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut ps = ParamSet::new();
        let blk = AttentionBlock::new(&mut ps, "b", 2, false, 0.0, &mut rng);
        let xt = Tensor::new(vec![1, 2, 2], vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let mut tape = Tape::new(ps.data());
        let x = tape.constant(xt.clone());
        let y = element_wise_self_attention(&mut tape, &ps, &blk, x, MaskKind::Diagonal, &mut Pass::eval(), SITE).unwrap();

        // Oracle: LN each row, project v, swap rows (2-token diagonal), project out, add residual.
        let ln = |r: &[f64]| -> Vec<f64> {
            let m = (r[0] + r[1]) / 2.0;
            let var = ((r[0] - m).powi(2) + (r[1] - m).powi(2)) / 2.0;
            r.iter().map(|v| (v - m) / (var + 1e-5).sqrt()).collect()
        };
        let lin = |x: &[f64], name: &str| -> Vec<f64> {
            let w = ps.values(ps.find(&format!("b.{name}.weight")).unwrap());
            let b = ps.find(&format!("b.{name}.bias")).map_or(vec![0.0; 2], |id| ps.values(id).to_vec());
            (0..2).map(|j| x[0] * w[j] + x[1] * w[2 + j] + b[j]).collect()
        };
        let rows = [ln(&xt.data()[..2]), ln(&xt.data()[2..])];
        let vals = [lin(&rows[0], "value"), lin(&rows[1], "value")];
        let out0 = lin(&vals[1], "out");
        let out1 = lin(&vals[0], "out");
        let want = [
            xt.data()[0] + out0[0],
            xt.data()[1] + out0[1],
            xt.data()[2] + out1[0],
            xt.data()[3] + out1[1],
        ];
        for (a, b) in tape.value(y).iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn unmasked_patch_block_matches_generic_block() {
        let (ps, blk) = block(6, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let xt = rand_tensor(&mut rng, vec![4, 6]);
        let mut t1 = Tape::new(ps.data());
        let x = t1.constant(xt.clone());
        let a = patch_wise_self_attention(&mut t1, &ps, &blk, x, MaskKind::None, &mut Pass::eval(), SITE).unwrap();
        let mut t2 = Tape::new(ps.data());
        let x = t2.constant(xt);
        let b = blk.self_attention(&mut t2, &ps, x, MaskKind::None, &mut Pass::eval(), SITE).unwrap();
        assert_eq!(t1.value(a), t2.value(b));
    }

    #[test]
    fn fig5_geometry_has_four_masked_cells() {
        // 48 elements in 4 patches of 12, D = 2 → tokens of width 24
        let (ps, blk) = block(24, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut sink = Vec::new();
        let mut tape = Tape::new(ps.data());
        let x = tape.constant(rand_tensor(&mut rng, vec![4, 24]));
        let site = Site {
            stage: 1,
            kind: SiteKind::EncPatch,
        };
        patch_wise_self_attention(&mut tape, &ps, &blk, x, MaskKind::Diagonal, &mut Pass::recording(&mut sink), site).unwrap();
        let w = &sink[0].weights;
        assert_eq!(w.shape(), &[4, 4]);
        let masked = (0..16).filter(|&i| w.data()[i] <= 1e-300).count();
        assert_eq!(masked, 4);
        for i in 0..4 {
            assert!(w.data()[i * 5] <= 1e-300);
        }
    }

    #[test]
    fn two_patch_diagonal_weights() {
        let (ps, blk) = block(4, 14);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut sink = Vec::new();
        let mut tape = Tape::new(ps.data());
        let x = tape.constant(rand_tensor(&mut rng, vec![2, 4]));
        patch_wise_self_attention(&mut tape, &ps, &blk, x, MaskKind::Diagonal, &mut Pass::recording(&mut sink), SITE).unwrap();
        for (a, b) in sink[0].weights.data().iter().zip([0.0, 1.0, 1.0, 0.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        let single = tape.constant(rand_tensor(&mut rng, vec![1, 4]));
        assert!(patch_wise_self_attention(&mut tape, &ps, &blk, single, MaskKind::Diagonal, &mut Pass::eval(), SITE).is_err());
    }

    #[test]
    fn cross_attention_cases() {
        let (ps, blk) = block(4, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let site = Site {
            stage: 1,
            kind: SiteKind::DecCross,
        };
        // single source patch → all weights 1
        let mut sink = Vec::new();
        let mut tape = Tape::new(ps.data());
        let q = tape.constant(rand_tensor(&mut rng, vec![3, 4]));
        let s = tape.constant(rand_tensor(&mut rng, vec![1, 4]));
        patch_wise_cross_attention(&mut tape, &ps, &blk, q, s, &mut Pass::recording(&mut sink), site).unwrap();
        assert!(sink[0].weights.data().iter().all(|&w| w == 1.0));

        // identical query rows → identical outputs
        let row = rand_tensor(&mut rng, vec![1, 4]);
        let qq = tape.constant(Tensor::new(vec![2, 4], [row.data(), row.data()].concat()).unwrap());
        let src = tape.constant(rand_tensor(&mut rng, vec![3, 4]));
        let y = patch_wise_cross_attention(&mut tape, &ps, &blk, qq, src, &mut Pass::eval(), site).unwrap();
        let out = tape.value(y);
        assert_eq!(&out[..4], &out[4..]);

        let bad = tape.constant(rand_tensor(&mut rng, vec![3, 5]));
        assert!(patch_wise_cross_attention(&mut tape, &ps, &blk, qq, bad, &mut Pass::eval(), site).is_err());
    }

    #[test]
    fn cross_attention_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let mut ps = ParamSet::new();
        let blk = AttentionBlock::new(&mut ps, "c", 3, false, 0.0, &mut rng);
        let qt = rand_tensor(&mut rng, vec![2, 3]);
        let st = rand_tensor(&mut rng, vec![3, 3]);
        let mut tape = Tape::new(ps.data());
        let q = tape.constant(qt.clone());
        let s = tape.constant(st.clone());
        let site = Site {
            stage: 1,
            kind: SiteKind::DecCross,
        };
        let y = patch_wise_cross_attention(&mut tape, &ps, &blk, q, s, &mut Pass::eval(), site).unwrap();

        let ln = |r: &[f64]| -> Vec<f64> {
            let m = r.iter().sum::<f64>() / 3.0;
            let var = r.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 3.0;
            r.iter().map(|v| (v - m) / (var + 1e-5).sqrt()).collect()
        };
        let lin = |x: &[f64], name: &str| -> Vec<f64> {
            let w = ps.values(ps.find(&format!("c.{name}.weight")).unwrap());
            let b = ps.find(&format!("c.{name}.bias")).map_or(vec![0.0; 3], |id| ps.values(id).to_vec());
            (0..3).map(|j| (0..3).map(|i| x[i] * w[i * 3 + j]).sum::<f64>() + b[j]).collect()
        };
        let qn: Vec<Vec<f64>> = qt.data().chunks(3).map(|r| lin(&ln(r), "query")).collect();
        let kn: Vec<Vec<f64>> = st.data().chunks(3).map(|r| lin(&ln(r), "key")).collect();
        let vn: Vec<Vec<f64>> = st.data().chunks(3).map(|r| lin(&ln(r), "value")).collect();
        let flat = |rows: &[Vec<f64>]| Tensor::new(vec![rows.len(), 3], rows.concat()).unwrap();
        let (_, att) = attention_oracle(&flat(&qn), &flat(&kn), &flat(&vn), false);
        for i in 0..2 {
            let o = lin(&att[i * 3..i * 3 + 3], "out");
            for c in 0..3 {
                let want = qt.data()[i * 3 + c] + o[c];
                assert!((tape.value(y)[i * 3 + c] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn training_pass_applies_dropout_deterministically() {
        let (ps, blk) = block(4, 19);
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let xt = rand_tensor(&mut rng, vec![3, 4]);
        let run = |seed: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let mut tape = Tape::new(ps.data());
            let x = tape.constant(xt.clone());
            let y = blk.self_attention(&mut tape, &ps, x, MaskKind::None, &mut Pass::train(&mut r), SITE).unwrap();
            tape.value(y).to_vec()
        };
        assert_eq!(run(1), run(1));
        let mut tape = Tape::new(ps.data());
        let x = tape.constant(xt.clone());
        let y = blk.self_attention(&mut tape, &ps, x, MaskKind::None, &mut Pass::eval(), SITE).unwrap();
        assert_ne!(run(1), tape.value(y).to_vec());
    }
}
