//! Min-max training loops: staged adversarial contrastive pre-training of
//! the dual encoder (with an auxiliary caption decoder) and adversarial
//! instruction tuning of the captioner.

use rand_chacha::ChaCha8Rng;

use crate::attacks::{pgd, PerturbationBudget};
use crate::data::{instruction_for, make_dataset, Dataset, TokenSeq, EOS, SPLIT_TRAIN};
use crate::error::{Error, Result};
use crate::losses;
use crate::models::{CaptionerParams, DualEncoderParams, SampleTokens, VisionEncoder};
use crate::optim::{cosine_lr, OptimizerState};
use crate::rng::{derive_seed, stream, uniform_f64};
use crate::tensor::{no_grad, Tensor};

/// One stage of the contrastive pre-training schedule.
#[derive(Debug, Clone)]
pub struct TrainStageConfig {
    pub resolution: usize,
    pub attack_steps: usize,
    pub epsilon: f64,
    /// Total samples drawn this stage; steps = ceil(samples / batch).
    pub samples: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub freeze_text: bool,
    pub lambda_caption: f64,
}

/// Desk-scale default schedule: resolutions 16 -> 32 -> 32, attack steps
/// 2/3/4, ε 4/255, 4/255, 8/255, sample ratios 10 : 1 : 0.25.
pub fn default_stages(base_samples: usize, batch_size: usize, lr: f64) -> Vec<TrainStageConfig> {
    let mk = |resolution, attack_steps, epsilon, samples| TrainStageConfig {
        resolution,
        attack_steps,
        epsilon,
        samples,
        batch_size,
        lr,
        freeze_text: true,
        lambda_caption: 0.5,
    };
    vec![
        mk(16, 2, 4.0 / 255.0, base_samples),
        mk(32, 3, 4.0 / 255.0, base_samples / 10),
        mk(32, 4, 8.0 / 255.0, base_samples / 40),
    ]
}

/// Instruction-tuning recipe. The vision encoder always trains at
/// `vision_lr_ratio` times the base rate; zero freezes it.
#[derive(Debug, Clone)]
pub struct InstructionTuneConfig {
    pub attack_steps: usize,
    pub epsilon: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub vision_lr_ratio: f64,
    pub adversarial: bool,
    pub weight_decay: f64,
}

impl InstructionTuneConfig {
    pub fn clean(epochs: usize) -> InstructionTuneConfig {
        InstructionTuneConfig {
            attack_steps: 0,
            epsilon: 0.0,
            epochs,
            batch_size: 16,
            lr: 3e-4,
            vision_lr_ratio: 1.0 / 20.0,
            adversarial: false,
            weight_decay: 1e-4,
        }
    }

    pub fn adversarial(epochs: usize, epsilon: f64, attack_steps: usize) -> InstructionTuneConfig {
        InstructionTuneConfig {
            attack_steps,
            epsilon,
            epochs,
            batch_size: 16,
            lr: 3e-4,
            vision_lr_ratio: 1.0 / 20.0,
            adversarial: true,
            weight_decay: 1e-4,
        }
    }
}

/// Per-step record; histories hold exactly one entry per optimizer step.
#[derive(Debug, Clone)]
pub struct StepMetrics {
    pub stage: usize,
    pub step: usize,
    pub clean_loss: f64,
    pub adv_loss: f64,
    pub delta_norm: f64,
    pub feasible: bool,
    /// True when ε=0 degenerated the step to clean training.
    pub clean_degenerate: bool,
    pub lr: f64,
}

/// Dual encoder plus the auxiliary caption decoder trained alongside it.
pub struct ClipWithAux {
    pub enc: DualEncoderParams,
    pub aux: CaptionerParams,
}

impl ClipWithAux {
    pub fn init(seed: u64, resolution: usize, vocab: usize) -> Result<ClipWithAux> {
        Ok(ClipWithAux {
            enc: DualEncoderParams::init(seed, resolution, vocab)?,
            aux: CaptionerParams::init(derive_seed(seed, "aux-captioner"), vocab)?,
        })
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = self.enc.named_params();
        out.extend(self.aux.named_params());
        out
    }

    pub fn deep_clone(&self) -> Result<ClipWithAux> {
        Ok(ClipWithAux { enc: self.enc.deep_clone()?, aux: self.aux.deep_clone()? })
    }
}

#[derive(Debug, Clone)]
pub struct ClipTrainConfig {
    pub stages: Vec<TrainStageConfig>,
    pub data_n: usize,
    pub data_seed: u64,
    pub model_seed: u64,
    pub weight_decay: f64,
    /// Restrict the outer update to vision-tower weights only (excludes
    /// the temperature and the auxiliary decoder).
    pub strict_vision_only: bool,
    /// Restrict the inner attack to the contrastive term (drop λ·caption).
    pub attack_contrastive_only: bool,
    /// Blend the outer loss 50/50 between clean and adversarial points.
    pub clean_mix: bool,
}

impl ClipTrainConfig {
    pub fn new(stages: Vec<TrainStageConfig>, data_n: usize, data_seed: u64, model_seed: u64) -> ClipTrainConfig {
        ClipTrainConfig {
            stages,
            data_n,
            data_seed,
            model_seed,
            weight_decay: 1e-4,
            strict_vision_only: false,
            attack_contrastive_only: false,
            clean_mix: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::InvalidArgument("no training stages".into()));
        }
        let mut prev = 0;
        for (i, st) in self.stages.iter().enumerate() {
            if st.resolution < prev {
                return Err(Error::InvalidArgument(format!(
                    "stage {i} lowers resolution to {} from {prev}",
                    st.resolution
                )));
            }
            prev = st.resolution;
            if st.batch_size == 0 || st.samples == 0 {
                return Err(Error::InvalidArgument(format!("stage {i} has empty batch or sample budget")));
            }
            if !(st.epsilon >= 0.0) || !(st.lr > 0.0) || !(st.lambda_caption >= 0.0) {
                return Err(Error::InvalidArgument(format!("stage {i} has invalid epsilon/lr/lambda")));
            }
        }
        Ok(())
    }
}

fn zero_grads(params: &[(String, Tensor)]) {
    for (_, p) in params {
        p.zero_grad();
    }
}

fn mark_divergence(e: Error, step: usize) -> Error {
    match e {
        Error::NonFinite { .. } | Error::NonFiniteGradient { .. } => {
            Error::Divergence { step }
        }
        other => other,
    }
}

/// Contrastive plus λ-weighted caption loss over one image batch. `text`
/// supplies precomputed text embeddings (held constant); None encodes the
/// captions inside the graph.
fn clip_loss(
    m: &ClipWithAux,
    images: &Tensor,
    captions: &[TokenSeq],
    text: Option<&Tensor>,
    lambda: f64,
) -> Result<Tensor> {
    let feats = m.enc.vision.features(images)?;
    let ie = m.enc.vision.embed_from_features(&feats)?;
    let te = match text {
        Some(t) => t.clone(),
        None => m.enc.encode_text(captions)?,
    };
    let mut loss = losses::contrastive_loss(&ie, &te, &m.enc.inv_tau()?)?;
    if lambda > 0.0 {
        let empty = TokenSeq { ids: vec![EOS] };
        let toks: Vec<SampleTokens> = captions
            .iter()
            .map(|c| SampleTokens::new(&empty, c))
            .collect::<Result<_>>()?;
        let fw = m.aux.forward_from_features(&feats, &toks)?;
        loss = loss.add(&losses::answer_nll(&fw)?.scalar_mul(lambda)?)?;
    }
    Ok(loss)
}

pub struct ClipStepOutcome {
    pub metrics: StepMetrics,
    pub adv_images: Vec<f64>,
}

/// One min-max step of contrastive pre-training: the inner attack perturbs
/// the image batch against the (frozen-parameter) loss, the outer step
/// updates `trainable` at the adversarial point. ε=0 degenerates to a
/// clean step through the same code path and is flagged in the metrics.
#[allow(clippy::too_many_arguments)]
pub fn adv_clip_step(
    m: &ClipWithAux,
    opt: &mut OptimizerState,
    trainable: &[(String, Tensor)],
    images: &Tensor,
    captions: &[TokenSeq],
    budget: &PerturbationBudget,
    lambda: f64,
    attack_contrastive_only: bool,
    clean_mix: bool,
    text_frozen: bool,
) -> Result<ClipStepOutcome> {
    let all_params = m.named_params();
    // Text embeddings are constants for the attack; also reused by the
    // outer loss while the text tower is frozen.
    let te_cached = no_grad(|| -> Result<Tensor> {
        let e = m.enc.encode_text(captions)?;
        Tensor::from_vec(e.data(), &e.shape())
    })?;
    let clean_loss = no_grad(|| -> Result<f64> {
        clip_loss(m, images, captions, Some(&te_cached), lambda)?.item()
    })?;

    let attack_lambda = if attack_contrastive_only { 0.0 } else { lambda };
    let result = {
        let mut obj = |xt: &Tensor| clip_loss(m, xt, captions, Some(&te_cached), attack_lambda);
        pgd(&mut obj, &images.data(), &images.shape(), budget)?
    };
    // The attack's backward passes accumulated gradients into parameters;
    // clear them before the outer pass.
    zero_grads(&all_params);

    let adv_images = result.adv(&images.data());
    let adv = Tensor::from_vec(adv_images.clone(), &images.shape())?;
    let text_arg = if text_frozen { Some(&te_cached) } else { None };
    let mut loss = clip_loss(m, &adv, captions, text_arg, lambda)?;
    if clean_mix && budget.epsilon > 0.0 {
        let clean = clip_loss(m, images, captions, text_arg, lambda)?;
        loss = loss.add(&clean)?.scalar_mul(0.5)?;
    }
    let adv_loss = loss.item()?;
    loss.backward()?;
    opt.step(trainable)?;
    zero_grads(&all_params);

    Ok(ClipStepOutcome {
        metrics: StepMetrics {
            stage: 0,
            step: 0,
            clean_loss,
            adv_loss,
            delta_norm: result.max_norm,
            feasible: result.feasible(budget.epsilon),
            clean_degenerate: budget.epsilon == 0.0,
            lr: opt.lr,
        },
        adv_images,
    })
}

fn draw_batch(r: &mut ChaCha8Rng, pool: &[usize], n: usize) -> Vec<usize> {
    (0..n).map(|_| pool[(uniform_f64(r) * pool.len() as f64) as usize % pool.len()]).collect()
}

/// Runs the staged schedule. The patch embedding is carried across
/// resolution changes by kernel resampling; the dataset is re-rendered per
/// stage; each stage gets a fresh optimizer with cosine decay. `text_from`
/// copies a pretrained text tower in before training starts.
pub fn train_clip_staged(
    cfg: &ClipTrainConfig,
    text_from: Option<&DualEncoderParams>,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<(ClipWithAux, Vec<StepMetrics>)> {
    cfg.validate()?;
    let vocab = crate::data::vocab_size();
    let mut m = ClipWithAux::init(cfg.model_seed, cfg.stages[0].resolution, vocab)?;
    if let Some(src) = text_from {
        crate::models::load_named(&m.enc.text_params(), &src.text_params())?;
    }
    let mut history = Vec::new();
    let mut global_step = 0usize;
    for (si, st) in cfg.stages.iter().enumerate() {
        if st.resolution != m.enc.vision.resolution {
            m.enc.vision.resize_patch(st.resolution)?;
        }
        for (_, t) in m.enc.text_params() {
            t.set_requires_grad(!st.freeze_text);
        }
        let data = make_dataset(cfg.data_n, st.resolution, cfg.data_seed)?;
        let train_idx = data.indices_of_split(SPLIT_TRAIN);
        let steps = st.samples.div_ceil(st.batch_size);
        let mut trainable: Vec<(String, Tensor)> = if cfg.strict_vision_only {
            m.enc.vision_params()
        } else {
            let mut v = m.enc.vision_params();
            v.push(("logit_scale".to_string(), m.enc.logit_scale.clone()));
            v.extend(m.aux.named_params());
            v
        };
        if !st.freeze_text {
            trainable.extend(m.enc.text_params());
        }
        let mut opt = OptimizerState::adamw(st.lr, cfg.weight_decay);
        let mut batch_rng = stream(cfg.model_seed, &format!("batches-stage-{si}"));
        for s in 0..steps {
            opt.lr = cosine_lr(st.lr, s as u64, steps as u64, 0.01);
            let idxs = draw_batch(&mut batch_rng, &train_idx, st.batch_size);
            let images = data.image_batch(&idxs);
            let captions: Vec<TokenSeq> = idxs.iter().map(|&i| data.captions[i].clone()).collect();
            let budget = PerturbationBudget::train_linf(
                st.epsilon,
                st.attack_steps,
                derive_seed(cfg.model_seed, &format!("attack-{si}-{s}")),
            );
            let out = adv_clip_step(
                &m,
                &mut opt,
                &trainable,
                &images,
                &captions,
                &budget,
                st.lambda_caption,
                cfg.attack_contrastive_only,
                cfg.clean_mix,
                st.freeze_text,
            )
            .map_err(|e| mark_divergence(e, global_step))?;
            let mut rec = out.metrics;
            rec.stage = si;
            rec.step = global_step;
            on_step(&rec);
            history.push(rec);
            global_step += 1;
        }
    }
    Ok((m, history))
}

/// Clean pre-training of the full dual encoder (the text tower's training
/// run): the staged schedule with every ε forced to zero and nothing
/// frozen. Returns the model with its text tower marked frozen, ready to
/// donate text weights to adversarial runs, and doubles as the
/// clean-baseline encoder.
pub fn pretrain_text_encoder(
    cfg: &ClipTrainConfig,
    on_step: impl FnMut(&StepMetrics),
) -> Result<(ClipWithAux, Vec<StepMetrics>)> {
    let mut c = cfg.clone();
    for st in &mut c.stages {
        st.epsilon = 0.0;
        st.attack_steps = 0;
        st.freeze_text = false;
    }
    let (m, h) = train_clip_staged(&c, None, on_step)?;
    for (_, t) in m.enc.text_params() {
        t.set_requires_grad(false);
    }
    Ok((m, h))
}

pub struct CaptionStepOutcome {
    pub metrics: StepMetrics,
}

/// One min-max step of instruction tuning: inner attack maximizes the
/// answer NLL over the image batch, outer step updates the captioner at
/// the base rate and the vision tower at its ratio.
pub fn adv_instruction_step(
    cap: &CaptionerParams,
    vision: &VisionEncoder,
    opt: &mut OptimizerState,
    trainable: &[(String, Tensor)],
    images: &Tensor,
    toks: &[SampleTokens],
    budget: &PerturbationBudget,
) -> Result<CaptionStepOutcome> {
    let clean_loss = no_grad(|| -> Result<f64> {
        losses::instruction_loss(cap, vision, images, toks)?.item()
    })?;
    let result = {
        let mut obj = |xt: &Tensor| losses::instruction_loss(cap, vision, xt, toks);
        pgd(&mut obj, &images.data(), &images.shape(), budget)?
    };
    zero_grads(trainable);
    let adv = Tensor::from_vec(result.adv(&images.data()), &images.shape())?;
    let loss = losses::instruction_loss(cap, vision, &adv, toks)?;
    let adv_loss = loss.item()?;
    loss.backward()?;
    opt.step(trainable)?;
    zero_grads(trainable);
    Ok(CaptionStepOutcome {
        metrics: StepMetrics {
            stage: 0,
            step: 0,
            clean_loss,
            adv_loss,
            delta_norm: result.max_norm,
            feasible: result.feasible(budget.epsilon),
            clean_degenerate: budget.epsilon == 0.0,
            lr: opt.lr,
        },
    })
}

/// Instruction-tunes a captioner on top of a copy of `vision_src`.
/// Artifact flavor is determined by the vision source (clean vs robust)
/// and `cfg.adversarial`; this function is the single code path for all
/// four. Returns the tuned captioner together with its (updated) vision
/// tower.
pub fn train_captioner(
    cfg: &InstructionTuneConfig,
    vision_src: &VisionEncoder,
    data: &Dataset,
    model_seed: u64,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<(CaptionerParams, VisionEncoder, Vec<StepMetrics>)> {
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::InvalidArgument("captioner tuning needs epochs and a batch size".into()));
    }
    if !(cfg.vision_lr_ratio >= 0.0) {
        return Err(Error::InvalidArgument("vision lr ratio must be >= 0".into()));
    }
    let vision = vision_src.deep_clone()?;
    let cap = CaptionerParams::init(derive_seed(model_seed, "captioner-tune"), crate::data::vocab_size())?;
    let mut trainable = cap.named_params();
    let mut vp = Vec::new();
    vision.collect("vision", &mut vp);
    trainable.extend(vp);
    let mut opt = OptimizerState::adamw(cfg.lr, cfg.weight_decay);
    opt.lr_scales.push(("vision".to_string(), cfg.vision_lr_ratio));

    let train_idx = data.indices_of_split(SPLIT_TRAIN);
    let steps_per_epoch = train_idx.len().div_ceil(cfg.batch_size);
    let total = (cfg.epochs * steps_per_epoch) as u64;
    let mut history = Vec::new();
    let mut global_step = 0usize;
    for e in 0..cfg.epochs {
        let mut order = train_idx.clone();
        let mut r = stream(model_seed, &format!("cap-shuffle-{e}"));
        for i in (1..order.len()).rev() {
            let j = (uniform_f64(&mut r) * (i + 1) as f64) as usize % (i + 1);
            order.swap(i, j);
        }
        for chunk in order.chunks(cfg.batch_size) {
            opt.lr = cosine_lr(cfg.lr, global_step as u64, total, 0.01);
            let images = data.image_batch(chunk);
            let toks: Vec<SampleTokens> = chunk
                .iter()
                .map(|&i| SampleTokens::new(&instruction_for(i)?, &data.captions[i]))
                .collect::<Result<_>>()?;
            let budget = if cfg.adversarial {
                PerturbationBudget::train_linf(
                    cfg.epsilon,
                    cfg.attack_steps,
                    derive_seed(model_seed, &format!("cap-attack-{global_step}")),
                )
            } else {
                PerturbationBudget::train_linf(0.0, 0, 0)
            };
            let out =
                adv_instruction_step(&cap, &vision, &mut opt, &trainable, &images, &toks, &budget)
                    .map_err(|e| mark_divergence(e, global_step))?;
            let mut rec = out.metrics;
            rec.stage = e;
            rec.step = global_step;
            on_step(&rec);
            history.push(rec);
            global_step += 1;
        }
    }
    Ok((cap, vision, history))
}

/// Functional artifact names for the four captioner configurations.
pub fn captioner_artifact_name(robust_vision: bool, adversarial_tuning: bool) -> &'static str {
    match (robust_vision, adversarial_tuning) {
        (false, false) => "cap-clean-clean",
        (true, false) => "cap-robust-clean",
        (true, true) => "cap-robust-adv",
        (false, true) => "cap-clean-adv",
    }
}
