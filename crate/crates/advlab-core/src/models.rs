//! Toy dual encoder (vision + text towers with a learnable temperature)
//! and toy image-conditioned autoregressive captioner.

use rand_chacha::ChaCha8Rng;

use crate::data::{TokenSeq, BOS, PAD, SEP};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{no_grad, Tensor};

pub const WIDTH: usize = 64;
pub const EMBED: usize = 32;
pub const HEADS: usize = 4;
pub const BLOCKS: usize = 2;
pub const MLP_RATIO: usize = 4;
pub const PATCH_GRID: usize = 4;
pub const N_PATCHES: usize = PATCH_GRID * PATCH_GRID;
pub const MAX_TEXT_LEN: usize = 32;
pub const MAX_SEQ_LEN: usize = 64;
pub const MAX_NEW_TOKENS: usize = 32;
pub const LN_EPS: f64 = 1e-5;
/// Attention logits at masked slots; exp(-1e9 - max) underflows to exactly
/// zero, so masking is exact in f64.
const MASK_OFF: f64 = -1e9;
pub const INIT_INV_TAU: f64 = 14.3;
pub const MAX_INV_TAU: f64 = 100.0;

fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    x.matmul(w)?.add(b)
}

fn glorot(rng_: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, shape: &[usize]) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    Tensor::param(rng::glorot_uniform(rng_, fan_in, fan_out, n), shape)
}

#[derive(Clone)]
pub struct LnParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LnParams {
    fn init(width: usize) -> Result<LnParams> {
        Ok(LnParams {
            gamma: Tensor::param(vec![1.0; width], &[width])?,
            beta: Tensor::param(vec![0.0; width], &[width])?,
        })
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(&self.gamma, &self.beta, LN_EPS)
    }

    fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.gamma"), self.gamma.clone()));
        out.push((format!("{prefix}.beta"), self.beta.clone()));
    }

    fn deep_clone(&self) -> Result<LnParams> {
        Ok(LnParams { gamma: copy_param(&self.gamma)?, beta: copy_param(&self.beta)? })
    }
}

/// Fresh leaf with the same data; nothing is shared with the source.
fn copy_param(t: &Tensor) -> Result<Tensor> {
    let c = Tensor::param(t.data(), &t.shape())?;
    c.set_requires_grad(t.requires_grad());
    Ok(c)
}

/// Pre-norm transformer block: multi-head attention and a GELU MLP, each
/// behind a residual connection.
#[derive(Clone)]
pub struct Block {
    pub ln1: LnParams,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2: LnParams,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl Block {
    fn init(rng_: &mut ChaCha8Rng, width: usize) -> Result<Block> {
        let hidden = MLP_RATIO * width;
        Ok(Block {
            ln1: LnParams::init(width)?,
            wq: glorot(rng_, width, width, &[width, width])?,
            bq: Tensor::param(vec![0.0; width], &[width])?,
            wk: glorot(rng_, width, width, &[width, width])?,
            bk: Tensor::param(vec![0.0; width], &[width])?,
            wv: glorot(rng_, width, width, &[width, width])?,
            bv: Tensor::param(vec![0.0; width], &[width])?,
            wo: glorot(rng_, width, width, &[width, width])?,
            bo: Tensor::param(vec![0.0; width], &[width])?,
            ln2: LnParams::init(width)?,
            w1: glorot(rng_, width, hidden, &[width, hidden])?,
            b1: Tensor::param(vec![0.0; hidden], &[hidden])?,
            w2: glorot(rng_, hidden, width, &[hidden, width])?,
            b2: Tensor::param(vec![0.0; width], &[width])?,
        })
    }

    /// `mask` is additive, broadcastable to B×H×T×T.
    fn forward(&self, x: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let shape = x.shape();
        let (b, t, w) = (shape[0], shape[1], shape[2]);
        let dh = w / HEADS;
        let split = |y: Tensor| -> Result<Tensor> {
            y.reshape(&[b, t, HEADS, dh])?.transpose(1, 2)
        };
        let xn = self.ln1.apply(x)?;
        let q = split(linear(&xn, &self.wq, &self.bq)?)?;
        let k = split(linear(&xn, &self.wk, &self.bk)?)?;
        let v = split(linear(&xn, &self.wv, &self.bv)?)?;
        let scores = q
            .matmul(&k.transpose(2, 3)?)?
            .scalar_mul(1.0 / (dh as f64).sqrt())?
            .add(mask)?;
        let attn = scores.softmax(3)?;
        let ctx = attn.matmul(&v)?.transpose(1, 2)?.reshape(&[b, t, w])?;
        let x = x.add(&linear(&ctx, &self.wo, &self.bo)?)?;
        let xn = self.ln2.apply(&x)?;
        let h = linear(&xn, &self.w1, &self.b1)?.gelu()?;
        x.add(&linear(&h, &self.w2, &self.b2)?)
    }

    fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.ln1.collect(&format!("{prefix}.ln1"), out);
        for (n, t) in [
            ("wq", &self.wq), ("bq", &self.bq), ("wk", &self.wk), ("bk", &self.bk),
            ("wv", &self.wv), ("bv", &self.bv), ("wo", &self.wo), ("bo", &self.bo),
        ] {
            out.push((format!("{prefix}.attn.{n}"), t.clone()));
        }
        self.ln2.collect(&format!("{prefix}.ln2"), out);
        for (n, t) in [("w1", &self.w1), ("b1", &self.b1), ("w2", &self.w2), ("b2", &self.b2)] {
            out.push((format!("{prefix}.mlp.{n}"), t.clone()));
        }
    }

    fn deep_clone(&self) -> Result<Block> {
        Ok(Block {
            ln1: self.ln1.deep_clone()?,
            wq: copy_param(&self.wq)?,
            bq: copy_param(&self.bq)?,
            wk: copy_param(&self.wk)?,
            bk: copy_param(&self.bk)?,
            wv: copy_param(&self.wv)?,
            bv: copy_param(&self.bv)?,
            wo: copy_param(&self.wo)?,
            bo: copy_param(&self.bo)?,
            ln2: self.ln2.deep_clone()?,
            w1: copy_param(&self.w1)?,
            b1: copy_param(&self.b1)?,
            w2: copy_param(&self.w2)?,
            b2: copy_param(&self.b2)?,
        })
    }
}

fn zeros_mask(t: usize) -> Tensor {
    Tensor::zeros(&[1, 1, t, t])
}

/// Vision tower: fixed 4×4 patch grid at any supported resolution.
#[derive(Clone)]
pub struct VisionEncoder {
    pub resolution: usize,
    pub patch: usize,
    pub patch_w: Tensor,
    pub patch_b: Tensor,
    pub pos: Tensor,
    pub blocks: Vec<Block>,
    pub ln_f: LnParams,
    pub proj: Tensor,
}

impl VisionEncoder {
    pub fn init(rng_: &mut ChaCha8Rng, resolution: usize) -> Result<VisionEncoder> {
        if resolution % PATCH_GRID != 0 {
            return Err(Error::InvalidArgument(format!(
                "resolution {resolution} not divisible into a {PATCH_GRID}x{PATCH_GRID} grid"
            )));
        }
        let patch = resolution / PATCH_GRID;
        let pdim = 3 * patch * patch;
        let mut blocks = Vec::with_capacity(BLOCKS);
        for _ in 0..BLOCKS {
            blocks.push(Block::init(rng_, WIDTH)?);
        }
        Ok(VisionEncoder {
            resolution,
            patch,
            patch_w: glorot(rng_, pdim, WIDTH, &[pdim, WIDTH])?,
            patch_b: Tensor::param(vec![0.0; WIDTH], &[WIDTH])?,
            pos: glorot(rng_, N_PATCHES, WIDTH, &[N_PATCHES, WIDTH])?,
            blocks,
            ln_f: LnParams::init(WIDTH)?,
            proj: glorot(rng_, WIDTH, EMBED, &[WIDTH, EMBED])?,
        })
    }

    /// Swaps the patch embedding for a new resolution; everything else
    /// (positions, blocks, projection) carries over unchanged.
    pub fn reinit_patch(&mut self, rng_: &mut ChaCha8Rng, resolution: usize) -> Result<()> {
        if resolution % PATCH_GRID != 0 {
            return Err(Error::InvalidArgument(format!(
                "resolution {resolution} not divisible into a {PATCH_GRID}x{PATCH_GRID} grid"
            )));
        }
        self.resolution = resolution;
        self.patch = resolution / PATCH_GRID;
        let pdim = 3 * self.patch * self.patch;
        self.patch_w = glorot(rng_, pdim, WIDTH, &[pdim, WIDTH])?;
        self.patch_b = Tensor::param(vec![0.0; WIDTH], &[WIDTH])?;
        Ok(())
    }

    /// Carries the patch embedding to a new resolution by nearest-neighbor
    /// resampling of the kernels, scaled by the pixel-count ratio so
    /// pre-activations keep their magnitude. A pixel-duplicated 2x upsample
    /// of an image maps to (numerically) the same features as the original.
    pub fn resize_patch(&mut self, resolution: usize) -> Result<()> {
        if resolution % PATCH_GRID != 0 {
            return Err(Error::InvalidArgument(format!(
                "resolution {resolution} not divisible into a {PATCH_GRID}x{PATCH_GRID} grid"
            )));
        }
        let p0 = self.patch;
        let p1 = resolution / PATCH_GRID;
        if p1 != p0 {
            let old = self.patch_w.data();
            let scale = (p0 * p0) as f64 / (p1 * p1) as f64;
            let mut w = vec![0.0; 3 * p1 * p1 * WIDTH];
            for c in 0..3 {
                for y1 in 0..p1 {
                    let y0 = y1 * p0 / p1;
                    for x1 in 0..p1 {
                        let x0 = x1 * p0 / p1;
                        let src = (c * p0 * p0 + y0 * p0 + x0) * WIDTH;
                        let dst = (c * p1 * p1 + y1 * p1 + x1) * WIDTH;
                        for k in 0..WIDTH {
                            w[dst + k] = old[src + k] * scale;
                        }
                    }
                }
            }
            self.patch = p1;
            self.patch_w = Tensor::param(w, &[3 * p1 * p1, WIDTH])?;
        }
        self.resolution = resolution;
        Ok(())
    }

    fn patchify(&self, images: &Tensor) -> Result<Tensor> {
        let s = images.shape();
        if s.len() != 4 || s[1] != 3 || s[2] != self.resolution || s[3] != self.resolution {
            return Err(Error::ShapeMismatch {
                op: "patchify",
                lhs: s,
                rhs: vec![0, 3, self.resolution, self.resolution],
            });
        }
        let (b, p, g) = (s[0], self.patch, PATCH_GRID);
        images
            .reshape(&[b, 3, g, p, g, p])?
            .transpose(1, 2)? // b gh c ph gw pw
            .transpose(2, 4)? // b gh gw ph c pw
            .transpose(3, 4)? // b gh gw c ph pw
            .reshape(&[b, N_PATCHES, 3 * p * p])
    }

    /// Per-patch features after the final norm: B×16×width.
    pub fn features(&self, images: &Tensor) -> Result<Tensor> {
        let tokens = self.patchify(images)?;
        let mut x = linear(&tokens, &self.patch_w, &self.patch_b)?.add(&self.pos)?;
        let mask = zeros_mask(N_PATCHES);
        for blk in &self.blocks {
            x = blk.forward(&x, &mask)?;
        }
        self.ln_f.apply(&x)
    }

    /// Unit-norm joint embeddings: B×embed.
    pub fn embed(&self, images: &Tensor) -> Result<Tensor> {
        self.embed_from_features(&self.features(images)?)
    }

    /// Pooling head on precomputed patch features, for callers that share
    /// one features pass between several heads.
    pub fn embed_from_features(&self, feats: &Tensor) -> Result<Tensor> {
        feats.mean(Some(1))?.matmul(&self.proj)?.l2_normalize(1)
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.patch_embed.w"), self.patch_w.clone()));
        out.push((format!("{prefix}.patch_embed.b"), self.patch_b.clone()));
        out.push((format!("{prefix}.pos"), self.pos.clone()));
        for (i, blk) in self.blocks.iter().enumerate() {
            blk.collect(&format!("{prefix}.block{i}"), out);
        }
        self.ln_f.collect(&format!("{prefix}.ln_f"), out);
        out.push((format!("{prefix}.proj"), self.proj.clone()));
    }

    pub fn deep_clone(&self) -> Result<VisionEncoder> {
        Ok(VisionEncoder {
            resolution: self.resolution,
            patch: self.patch,
            patch_w: copy_param(&self.patch_w)?,
            patch_b: copy_param(&self.patch_b)?,
            pos: copy_param(&self.pos)?,
            blocks: self.blocks.iter().map(|b| b.deep_clone()).collect::<Result<_>>()?,
            ln_f: self.ln_f.deep_clone()?,
            proj: copy_param(&self.proj)?,
        })
    }
}

/// Text tower: token embedding, bidirectional blocks with PAD keys masked,
/// masked mean pooling.
#[derive(Clone)]
pub struct TextEncoder {
    pub tok: Tensor,
    pub pos: Tensor,
    pub blocks: Vec<Block>,
    pub ln_f: LnParams,
    pub proj: Tensor,
}

impl TextEncoder {
    pub fn init(rng_: &mut ChaCha8Rng, vocab: usize) -> Result<TextEncoder> {
        let mut blocks = Vec::with_capacity(BLOCKS);
        for _ in 0..BLOCKS {
            blocks.push(Block::init(rng_, WIDTH)?);
        }
        Ok(TextEncoder {
            tok: glorot(rng_, vocab, WIDTH, &[vocab, WIDTH])?,
            pos: glorot(rng_, MAX_TEXT_LEN, WIDTH, &[MAX_TEXT_LEN, WIDTH])?,
            blocks,
            ln_f: LnParams::init(WIDTH)?,
            proj: glorot(rng_, WIDTH, EMBED, &[WIDTH, EMBED])?,
        })
    }

    /// Unit-norm joint embeddings: B×embed. Sequences are padded to the
    /// batch maximum; PAD is excluded from attention keys and pooling.
    pub fn embed(&self, texts: &[TokenSeq]) -> Result<Tensor> {
        if texts.is_empty() {
            return Err(Error::InvalidArgument("empty text batch".into()));
        }
        let b = texts.len();
        let t = texts.iter().map(|s| s.ids.len()).max().unwrap();
        if t > MAX_TEXT_LEN {
            return Err(Error::InvalidArgument(format!(
                "text length {t} exceeds encoder maximum {MAX_TEXT_LEN}"
            )));
        }
        let vocab = self.tok.shape()[0];
        let mut ids = Vec::with_capacity(b * t);
        let mut key_mask = Vec::with_capacity(b * t);
        let mut pool_mask = Vec::with_capacity(b * t);
        let mut counts = Vec::with_capacity(b);
        for seq in texts {
            let mut n = 0.0;
            for u in 0..t {
                let id = seq.ids.get(u).copied().unwrap_or(PAD);
                if id as usize >= vocab {
                    return Err(Error::OutOfVocab { id, vocab_size: vocab });
                }
                ids.push(id as usize);
                let live = id != PAD;
                key_mask.push(if live { 0.0 } else { MASK_OFF });
                pool_mask.push(if live { 1.0 } else { 0.0 });
                if live {
                    n += 1.0;
                }
            }
            if n == 0.0 {
                return Err(Error::InvalidArgument("all-PAD sequence".into()));
            }
            counts.push(n);
        }
        let emb = Tensor::lookup(&self.tok, &ids, &[b, t])?;
        let mut x = emb.add(&self.pos.slice(0, 0, t)?)?;
        let mask = Tensor::from_vec(key_mask, &[b, 1, 1, t])?;
        for blk in &self.blocks {
            x = blk.forward(&x, &mask)?;
        }
        let x = self.ln_f.apply(&x)?;
        let pooled = x
            .mul(&Tensor::from_vec(pool_mask, &[b, t, 1])?)?
            .sum(Some(1))?
            .div(&Tensor::from_vec(counts, &[b, 1])?)?;
        pooled.matmul(&self.proj)?.l2_normalize(1)
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.tok"), self.tok.clone()));
        out.push((format!("{prefix}.pos"), self.pos.clone()));
        for (i, blk) in self.blocks.iter().enumerate() {
            blk.collect(&format!("{prefix}.block{i}"), out);
        }
        self.ln_f.collect(&format!("{prefix}.ln_f"), out);
        out.push((format!("{prefix}.proj"), self.proj.clone()));
    }

    pub fn deep_clone(&self) -> Result<TextEncoder> {
        Ok(TextEncoder {
            tok: copy_param(&self.tok)?,
            pos: copy_param(&self.pos)?,
            blocks: self.blocks.iter().map(|b| b.deep_clone()).collect::<Result<_>>()?,
            ln_f: self.ln_f.deep_clone()?,
            proj: copy_param(&self.proj)?,
        })
    }
}

/// Dual encoder with learnable temperature, stored as log(1/τ) and clamped
/// so 1/τ never exceeds 100.
pub struct DualEncoderParams {
    pub vision: VisionEncoder,
    pub text: TextEncoder,
    pub logit_scale: Tensor,
}

impl DualEncoderParams {
    pub fn init(seed: u64, resolution: usize, vocab: usize) -> Result<DualEncoderParams> {
        let mut r = rng::stream(seed, "dual-encoder-init");
        Ok(DualEncoderParams {
            vision: VisionEncoder::init(&mut r, resolution)?,
            text: TextEncoder::init(&mut r, vocab)?,
            logit_scale: Tensor::param(vec![INIT_INV_TAU.ln()], &[1])?,
        })
    }

    /// Differentiable 1/τ with the clamp applied.
    pub fn inv_tau(&self) -> Result<Tensor> {
        self.logit_scale.clamp(f64::NEG_INFINITY, MAX_INV_TAU.ln())?.exp()
    }

    pub fn encode_image(&self, images: &Tensor) -> Result<Tensor> {
        self.vision.embed(images)
    }

    pub fn encode_text(&self, texts: &[TokenSeq]) -> Result<Tensor> {
        self.text.embed(texts)
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.vision.collect("vision", &mut out);
        self.text.collect("text", &mut out);
        out.push(("logit_scale".to_string(), self.logit_scale.clone()));
        out
    }

    pub fn vision_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.vision.collect("vision", &mut out);
        out
    }

    pub fn text_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.text.collect("text", &mut out);
        out
    }

    pub fn deep_clone(&self) -> Result<DualEncoderParams> {
        Ok(DualEncoderParams {
            vision: self.vision.deep_clone()?,
            text: self.text.deep_clone()?,
            logit_scale: copy_param(&self.logit_scale)?,
        })
    }
}

/// Copies `src` values into the identically named tensors of `dst`.
/// Strict: every destination name must be present with matching element
/// count, and no extra source entries are allowed.
pub fn load_named(dst: &[(String, Tensor)], src: &[(String, Tensor)]) -> Result<()> {
    if src.len() != dst.len() {
        return Err(Error::LengthMismatch { what: "parameter list".into() });
    }
    for (name, t) in dst {
        let s = src
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))?;
        if s.1.shape() != t.shape() {
            return Err(Error::ShapeMismatch { op: "load_named", lhs: t.shape(), rhs: s.1.shape() });
        }
        t.set_data(&s.1.data())?;
    }
    Ok(())
}

/// One tuning/eval example: an image, an instruction, and the answer the
/// model should produce. The answer carries its terminating EOS.
#[derive(Debug, Clone)]
pub struct InstructionSample {
    pub image: Tensor,
    pub instruction: TokenSeq,
    pub answer: TokenSeq,
}

impl InstructionSample {
    pub fn validate(&self) -> Result<()> {
        if self.instruction.words().is_empty() {
            return Err(Error::InvalidArgument("instruction must have at least one token".into()));
        }
        if self.answer.words().is_empty() {
            return Err(Error::InvalidArgument("answer must have at least one token".into()));
        }
        Ok(())
    }
}

/// Token-side inputs of a captioner forward; the instruction may be empty
/// (captioning mode), the answer never is.
#[derive(Debug, Clone)]
pub struct SampleTokens {
    pub instr: Vec<u16>,
    pub answer: Vec<u16>,
}

impl SampleTokens {
    pub fn new(instruction: &TokenSeq, answer: &TokenSeq) -> Result<SampleTokens> {
        let ans: Vec<u16> = answer.words().to_vec();
        if ans.is_empty() {
            return Err(Error::InvalidArgument("empty answer".into()));
        }
        Ok(SampleTokens { instr: instruction.words().to_vec(), answer: ans })
    }

    /// Text layout: BOS, instruction, SEP, answer words, EOS.
    fn layout(&self) -> Vec<u16> {
        let mut y = Vec::with_capacity(self.instr.len() + self.answer.len() + 3);
        y.push(BOS);
        y.extend_from_slice(&self.instr);
        y.push(SEP);
        y.extend_from_slice(&self.answer);
        y.push(crate::data::EOS);
        y
    }

    fn answer_span(&self) -> (usize, usize) {
        let start = 1 + self.instr.len() + 1;
        (start, self.answer.len() + 1) // answer words plus EOS
    }
}

/// Everything the losses need from one captioner forward pass.
pub struct CaptionForward {
    /// B×T×V; entry [b, t] is the distribution over text token t of sample
    /// b given the image prefix and text tokens < t.
    pub logits: Tensor,
    /// Text tokens actually fed, padded: B×T.
    pub targets: Vec<Vec<u16>>,
    /// 1.0 exactly at answer positions (answer words + EOS): B×T.
    pub answer_mask: Vec<f64>,
    /// Answer token count per sample.
    pub answer_counts: Vec<f64>,
    pub text_len: usize,
}

/// Image-conditioned captioner: vision patch features are projected into
/// the decoder and prepended as a 16-token prefix.
pub struct CaptionerParams {
    pub proj_w: Tensor,
    pub proj_b: Tensor,
    pub tok: Tensor,
    pub pos: Tensor,
    pub blocks: Vec<Block>,
    pub ln_f: LnParams,
    pub head: Tensor,
}

impl CaptionerParams {
    pub fn init(seed: u64, vocab: usize) -> Result<CaptionerParams> {
        let mut r = rng::stream(seed, "captioner-init");
        let mut blocks = Vec::with_capacity(BLOCKS);
        for _ in 0..BLOCKS {
            blocks.push(Block::init(&mut r, WIDTH)?);
        }
        Ok(CaptionerParams {
            proj_w: glorot(&mut r, WIDTH, WIDTH, &[WIDTH, WIDTH])?,
            proj_b: Tensor::param(vec![0.0; WIDTH], &[WIDTH])?,
            tok: glorot(&mut r, vocab, WIDTH, &[vocab, WIDTH])?,
            pos: glorot(&mut r, MAX_SEQ_LEN, WIDTH, &[MAX_SEQ_LEN, WIDTH])?,
            blocks,
            ln_f: LnParams::init(WIDTH)?,
            head: glorot(&mut r, WIDTH, vocab, &[WIDTH, vocab])?,
        })
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        out.push(("cap.proj.w".to_string(), self.proj_w.clone()));
        out.push(("cap.proj.b".to_string(), self.proj_b.clone()));
        out.push(("cap.tok".to_string(), self.tok.clone()));
        out.push(("cap.pos".to_string(), self.pos.clone()));
        for (i, blk) in self.blocks.iter().enumerate() {
            blk.collect(&format!("cap.block{i}"), &mut out);
        }
        self.ln_f.collect("cap.ln_f", &mut out);
        out.push(("cap.head".to_string(), self.head.clone()));
        out
    }

    pub fn deep_clone(&self) -> Result<CaptionerParams> {
        Ok(CaptionerParams {
            proj_w: copy_param(&self.proj_w)?,
            proj_b: copy_param(&self.proj_b)?,
            tok: copy_param(&self.tok)?,
            pos: copy_param(&self.pos)?,
            blocks: self.blocks.iter().map(|b| b.deep_clone()).collect::<Result<_>>()?,
            ln_f: self.ln_f.deep_clone()?,
            head: copy_param(&self.head)?,
        })
    }

    /// Prefix-causal attention mask for one batch: prefix positions attend
    /// among themselves; text position u attends to the prefix and to live
    /// text positions ≤ u.
    fn build_mask(b: usize, p: usize, t: usize, live: &[bool]) -> Result<Tensor> {
        let s = p + t;
        let mut m = vec![MASK_OFF; b * s * s];
        for bi in 0..b {
            let base = bi * s * s;
            for q in 0..s {
                for k in 0..s {
                    let allowed = if q < p {
                        k < p
                    } else {
                        k < p || (k <= q && live[bi * t + (k - p)])
                    };
                    if allowed {
                        m[base + q * s + k] = 0.0;
                    }
                }
            }
        }
        Tensor::from_vec(m, &[b, 1, s, s])
    }

    /// Full forward over a batch of (image, tokens) pairs. `images` must be
    /// B×3×R×R matching the vision encoder; gradients flow back to them.
    pub fn forward(
        &self,
        vision: &VisionEncoder,
        images: &Tensor,
        toks: &[SampleTokens],
    ) -> Result<CaptionForward> {
        if images.shape().first().copied() != Some(toks.len()) {
            return Err(Error::InvalidArgument(format!(
                "batch mismatch: {} token rows vs image shape {:?}",
                toks.len(),
                images.shape()
            )));
        }
        self.forward_from_features(&vision.features(images)?, toks)
    }

    /// Forward on precomputed vision features (B×16×width).
    pub fn forward_from_features(
        &self,
        feats: &Tensor,
        toks: &[SampleTokens],
    ) -> Result<CaptionForward> {
        let b = toks.len();
        if b == 0 || feats.shape()[0] != b {
            return Err(Error::InvalidArgument(format!(
                "batch mismatch: {} token rows vs feature shape {:?}",
                b,
                feats.shape()
            )));
        }
        let vocab = self.tok.shape()[0];
        let layouts: Vec<Vec<u16>> = toks.iter().map(|s| s.layout()).collect();
        let t = layouts.iter().map(|l| l.len()).max().unwrap();
        let p = N_PATCHES;
        if p + t > MAX_SEQ_LEN {
            return Err(Error::InvalidArgument(format!(
                "sequence length {} exceeds maximum {MAX_SEQ_LEN}",
                p + t
            )));
        }
        let mut ids = Vec::with_capacity(b * t);
        let mut live = Vec::with_capacity(b * t);
        let mut targets = Vec::with_capacity(b);
        let mut answer_mask = vec![0.0; b * t];
        let mut answer_counts = Vec::with_capacity(b);
        for (bi, (layout, tk)) in layouts.iter().zip(toks).enumerate() {
            for u in 0..t {
                let id = layout.get(u).copied().unwrap_or(PAD);
                if id as usize >= vocab {
                    return Err(Error::OutOfVocab { id, vocab_size: vocab });
                }
                ids.push(id as usize);
                live.push(u < layout.len());
            }
            let (start, len) = tk.answer_span();
            for u in start..start + len {
                answer_mask[bi * t + u] = 1.0;
            }
            answer_counts.push(len as f64);
            let mut padded = layout.clone();
            padded.resize(t, PAD);
            targets.push(padded);
        }

        let prefix = linear(feats, &self.proj_w, &self.proj_b)?;
        let text_emb = Tensor::lookup(&self.tok, &ids, &[b, t])?;
        let seq = Tensor::concat(&[prefix, text_emb], 1)?;
        let s = p + t;
        let mut x = seq.add(&self.pos.slice(0, 0, s)?)?;
        let mask = Self::build_mask(b, p, t, &live)?;
        for blk in &self.blocks {
            x = blk.forward(&x, &mask)?;
        }
        let h = self.ln_f.apply(&x)?;
        // Hidden p-1+u predicts text token u; slice is length t starting at
        // the last prefix position.
        let pred_h = h.slice(1, p - 1, t)?;
        let logits = pred_h.matmul(&self.head)?;
        Ok(CaptionForward { logits, targets, answer_mask, answer_counts, text_len: t })
    }

    /// Greedy decoding. Ties break toward the lowest token id; stops at EOS
    /// or after `max_new` tokens. The result always ends with exactly one
    /// EOS.
    pub fn generate(
        &self,
        vision: &VisionEncoder,
        image: &Tensor,
        instruction: &TokenSeq,
        max_new: usize,
    ) -> Result<TokenSeq> {
        if max_new > MAX_NEW_TOKENS {
            return Err(Error::InvalidArgument(format!(
                "max_new {max_new} exceeds limit {MAX_NEW_TOKENS}"
            )));
        }
        let images = if image.shape().len() == 3 {
            let s = image.shape();
            image.reshape(&[1, s[0], s[1], s[2]])?
        } else {
            image.clone()
        };
        no_grad(|| {
            let vocab = self.tok.shape()[0];
            let mut generated: Vec<u16> = Vec::new();
            // The image prefix is constant across decoding steps.
            let feats = vision.features(&images)?;
            let prefix = linear(&feats, &self.proj_w, &self.proj_b)?;
            loop {
                // Running sequence: BOS, instruction, SEP, answer so far;
                // the next token is read from the final hidden state.
                let mut text: Vec<u16> = vec![BOS];
                text.extend_from_slice(instruction.words());
                text.push(SEP);
                text.extend_from_slice(&generated);
                let t = text.len();
                if N_PATCHES + t + 1 > MAX_SEQ_LEN {
                    break;
                }
                let ids: Vec<usize> = text.iter().map(|&i| i as usize).collect();
                let text_emb = Tensor::lookup(&self.tok, &ids, &[1, t])?;
                let seq = Tensor::concat(&[prefix.clone(), text_emb], 1)?;
                let s = N_PATCHES + t;
                let mut x = seq.add(&self.pos.slice(0, 0, s)?)?;
                let live = vec![true; t];
                let mask = Self::build_mask(1, N_PATCHES, t, &live)?;
                for blk in &self.blocks {
                    x = blk.forward(&x, &mask)?;
                }
                let h = self.ln_f.apply(&x)?;
                let last = h.slice(1, s - 1, 1)?.reshape(&[1, WIDTH])?;
                let logits = last.matmul(&self.head)?.data();
                let mut best = 0usize;
                for i in 1..vocab {
                    if logits[i] > logits[best] {
                        best = i;
                    }
                }
                let tok = best as u16;
                if tok == crate::data::EOS {
                    break;
                }
                generated.push(tok);
                if generated.len() >= max_new {
                    break;
                }
            }
            let mut ids = generated;
            ids.push(crate::data::EOS);
            Ok(TokenSeq { ids })
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_dataset, TokenSeq};

    fn enc() -> DualEncoderParams {
        DualEncoderParams::init(5, 16, crate::data::vocab_size()).unwrap()
    }

    #[test]
    fn image_embeddings_unit_norm_and_pure() {
        let m = enc();
        let d = make_dataset(16, 16, 2).unwrap();
        let batch = d.image_batch(&[0, 1, 0]);
        let e = m.encode_image(&batch).unwrap();
        assert_eq!(e.shape(), vec![3, EMBED]);
        let data = e.data();
        for row in data.chunks(EMBED) {
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-10);
        }
        // Duplicated input rows give duplicated output rows.
        for j in 0..EMBED {
            assert_eq!(data[j], data[2 * EMBED + j]);
        }
    }

    #[test]
    fn pixel_perturbation_moves_embedding() {
        let m = enc();
        let d = make_dataset(16, 16, 3).unwrap();
        let img = d.image_batch(&[0]);
        let e0 = m.encode_image(&img).unwrap().data();
        let mut px = img.data();
        px[40] = (px[40] + 1e-3).min(1.0);
        let img2 = Tensor::from_vec(px, &[1, 3, 16, 16]).unwrap();
        let e1 = m.encode_image(&img2).unwrap().data();
        assert!(e0.iter().zip(&e1).any(|(a, b)| a != b));
    }

    #[test]
    fn resized_patch_embedding_matches_on_duplicated_pixels() {
        let m = enc();
        let d = make_dataset(16, 16, 4).unwrap();
        let img = d.image_batch(&[0, 5]);
        let f0 = m.vision.embed(&img).unwrap().data();
        let mut hi = m.vision.deep_clone().unwrap();
        hi.resize_patch(32).unwrap();
        assert_eq!(hi.resolution, 32);
        assert_eq!(hi.patch_w.shape(), vec![3 * 8 * 8, WIDTH]);
        let lo = img.data();
        let mut up = vec![0.0; 2 * 3 * 32 * 32];
        for b in 0..2 {
            for c in 0..3 {
                for y in 0..32 {
                    for x in 0..32 {
                        up[((b * 3 + c) * 32 + y) * 32 + x] =
                            lo[((b * 3 + c) * 16 + y / 2) * 16 + x / 2];
                    }
                }
            }
        }
        let img2 = Tensor::from_vec(up, &[2, 3, 32, 32]).unwrap();
        let f1 = hi.embed(&img2).unwrap().data();
        for (a, b) in f0.iter().zip(&f1) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        // Doubling then halving lands back on the original kernels exactly:
        // the nearest-neighbor pick hits the duplicated entry and the two
        // power-of-two scales cancel.
        hi.resize_patch(16).unwrap();
        assert_eq!(hi.patch_w.data(), m.vision.patch_w.data());
    }

    #[test]
    fn text_embeddings_pad_invariant_and_permutable() {
        let m = enc();
        let a = TokenSeq::tokenize("a red circle in the center").unwrap();
        let b = TokenSeq::tokenize("there is a blue square at the top left").unwrap();
        let e_ab = m.encode_text(&[a.clone(), b.clone()]).unwrap().data();
        let e_ba = m.encode_text(&[b.clone(), a.clone()]).unwrap().data();
        for j in 0..EMBED {
            assert!((e_ab[j] - e_ba[EMBED + j]).abs() < 1e-12);
            assert!((e_ab[EMBED + j] - e_ba[j]).abs() < 1e-12);
        }
        // Explicit PAD suffix leaves the embedding unchanged.
        let mut padded = a.clone();
        padded.ids.extend_from_slice(&[PAD, PAD, PAD]);
        let e_pad = m.encode_text(&[padded]).unwrap().data();
        let e_a = m.encode_text(&[a]).unwrap().data();
        for j in 0..EMBED {
            assert!((e_pad[j] - e_a[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn out_of_vocab_text_rejected() {
        let m = enc();
        let bad = TokenSeq { ids: vec![200, crate::data::EOS] };
        assert!(matches!(m.encode_text(&[bad]), Err(Error::OutOfVocab { .. })));
    }

    #[test]
    fn captioner_batch_independence() {
        let m = enc();
        let cap = CaptionerParams::init(9, crate::data::vocab_size()).unwrap();
        let d = make_dataset(16, 16, 4).unwrap();
        let instr = TokenSeq::tokenize("describe the image").unwrap();
        let t0 = SampleTokens::new(&instr, &d.captions[0]).unwrap();
        let t1 = SampleTokens::new(&instr, &d.captions[1]).unwrap();
        let single = cap.forward(&m.vision, &d.image_batch(&[0]), &[t0.clone()]).unwrap();
        let pair = cap.forward(&m.vision, &d.image_batch(&[0, 1]), &[t0, t1]).unwrap();
        let ls = single.logits.data();
        let lp = pair.logits.data();
        let t = single.text_len;
        let tp = pair.text_len;
        let v = crate::data::vocab_size();
        for u in 0..t {
            for j in 0..v {
                let a = ls[u * v + j];
                let b = lp[u * v + j];
                assert!((a - b).abs() < 1e-12, "mismatch at ({u},{j}): {a} vs {b}");
            }
        }
        assert!(tp >= t);
    }

    #[test]
    fn captioner_causality() {
        let m = enc();
        let cap = CaptionerParams::init(11, crate::data::vocab_size()).unwrap();
        let d = make_dataset(16, 16, 4).unwrap();
        let instr = TokenSeq::tokenize("what is shown").unwrap();
        let base = SampleTokens::new(&instr, &d.captions[0]).unwrap();
        let mut changed = base.clone();
        // Flip the second answer word.
        changed.answer[1] = if changed.answer[1] == 4 { 5 } else { 4 };
        let (start, _) = base.answer_span();
        let tpos = start + 1;
        let f0 = cap.forward(&m.vision, &d.image_batch(&[0]), &[base]).unwrap();
        let f1 = cap.forward(&m.vision, &d.image_batch(&[0]), &[changed]).unwrap();
        let v = crate::data::vocab_size();
        let (l0, l1) = (f0.logits.data(), f1.logits.data());
        for u in 0..=tpos {
            for j in 0..v {
                assert_eq!(l0[u * v + j], l1[u * v + j], "logits at position {u} changed");
            }
        }
        // Positions after t must differ somewhere.
        assert!(l0.iter().zip(&l1).any(|(a, b)| a != b));
    }

    #[test]
    fn image_conditioning_matters() {
        let m = enc();
        let cap = CaptionerParams::init(13, crate::data::vocab_size()).unwrap();
        let d = make_dataset(16, 16, 6).unwrap();
        let instr = TokenSeq::tokenize("describe the image").unwrap();
        let tk = SampleTokens::new(&instr, &d.captions[0]).unwrap();
        let real = cap.forward(&m.vision, &d.image_batch(&[0]), &[tk.clone()]).unwrap();
        let flat = Tensor::full(&[1, 3, 16, 16], 0.5);
        let blank = cap.forward(&m.vision, &flat, &[tk]).unwrap();
        assert!(real.logits.data().iter().zip(blank.logits.data()).any(|(a, b)| *a != b));
    }

    #[test]
    fn generate_deterministic_and_stops() {
        let m = enc();
        let cap = CaptionerParams::init(17, crate::data::vocab_size()).unwrap();
        let d = make_dataset(16, 16, 8).unwrap();
        let instr = TokenSeq::tokenize("caption this picture").unwrap();
        let a = cap.generate(&m.vision, &d.image(0), &instr, 8).unwrap();
        let b = cap.generate(&m.vision, &d.image(0), &instr, 8).unwrap();
        assert_eq!(a, b);
        assert!(a.ids.len() <= 9);
        assert_eq!(*a.ids.last().unwrap(), crate::data::EOS);
    }

    #[test]
    fn rigged_eos_head_gives_empty_answer() {
        let m = enc();
        let mut cap = CaptionerParams::init(19, crate::data::vocab_size()).unwrap();
        // Bias every hidden state onto the EOS column via a rank-one head.
        let v = crate::data::vocab_size();
        let mut w = vec![0.0; WIDTH * v];
        for r in 0..WIDTH {
            w[r * v + crate::data::EOS as usize] = 1e3;
            w[r * v + 10] = -1e3;
        }
        cap.head = Tensor::param(w, &[WIDTH, v]).unwrap();
        let d = make_dataset(16, 16, 8).unwrap();
        let instr = TokenSeq::tokenize("what is shown").unwrap();
        let out = cap.generate(&m.vision, &d.image(0), &instr, 8).unwrap();
        assert_eq!(out.ids, vec![crate::data::EOS]);
        assert_eq!(out.detokenize().unwrap(), "");
    }

    #[test]
    fn inv_tau_initial_value_and_clamp() {
        let m = enc();
        let it = m.inv_tau().unwrap().item().unwrap();
        assert!((it - INIT_INV_TAU).abs() < 1e-9);
        m.logit_scale.set_data(&[10.0]).unwrap();
        let clamped = m.inv_tau().unwrap().item().unwrap();
        assert!((clamped - MAX_INV_TAU).abs() < 1e-9);
    }

    #[test]
    fn param_names_unique() {
        let m = enc();
        let cap = CaptionerParams::init(1, crate::data::vocab_size()).unwrap();
        let mut names: Vec<String> = m.named_params().into_iter().map(|(n, _)| n).collect();
        names.extend(cap.named_params().into_iter().map(|(n, _)| n));
        let total = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), total);
    }
}
