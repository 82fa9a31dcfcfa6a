//! Gradient attacks on [0,1]-valued inputs: projection, FGSM, PGD, APGD
//! with adaptive step halving, the weak-to-strong composite pipeline, and
//! the targeted caption attack.

use crate::data::TokenSeq;
use crate::error::{Error, Result};
use crate::losses;
use crate::models::{CaptionerParams, SampleTokens, VisionEncoder, MAX_NEW_TOKENS};
use crate::rng;
use crate::tensor::{no_grad, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    Linf,
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitKind {
    Zero,
    RandomUniform,
}

#[derive(Debug, Clone)]
pub struct PerturbationBudget {
    pub norm: NormKind,
    pub epsilon: f64,
    pub steps: usize,
    /// Per-step size; defaults to 2ε/k when absent.
    pub step_size: Option<f64>,
    pub init: InitKind,
    pub track_best: bool,
    pub seed: u64,
}

impl PerturbationBudget {
    /// Evaluation setting: zero init with best tracking, so the adversarial
    /// objective can never fall below the clean one.
    pub fn eval_linf(epsilon: f64, steps: usize) -> PerturbationBudget {
        PerturbationBudget {
            norm: NormKind::Linf,
            epsilon,
            steps,
            step_size: None,
            init: InitKind::Zero,
            track_best: true,
            seed: 0,
        }
    }

    /// Training setting: random init inside the ball, final iterate kept.
    pub fn train_linf(epsilon: f64, steps: usize, seed: u64) -> PerturbationBudget {
        PerturbationBudget {
            norm: NormKind::Linf,
            epsilon,
            steps,
            step_size: None,
            init: InitKind::RandomUniform,
            track_best: false,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidArgument(format!("epsilon must be finite and >= 0, got {}", self.epsilon)));
        }
        if let Some(a) = self.step_size {
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::InvalidArgument(format!("step size must be finite and > 0, got {a}")));
            }
        }
        Ok(())
    }

    pub fn alpha(&self) -> f64 {
        self.step_size.unwrap_or(2.0 * self.epsilon / self.steps.max(1) as f64)
    }
}

#[derive(Debug, Clone)]
pub struct AttackResult {
    pub delta: Vec<f64>,
    /// Objective value at every evaluated iterate, in evaluation order.
    pub trace: Vec<f64>,
    /// Index into `trace` of the returned iterate.
    pub best_step: usize,
    /// Objective at the returned iterate.
    pub best_value: f64,
    /// Targeted/pipeline verdict; None for plain maximization runs.
    pub success: Option<bool>,
    /// ‖δ‖ in the budget's norm.
    pub max_norm: f64,
    /// Count of elements where x+δ left [0,1]; zero by construction.
    pub domain_violations: usize,
    pub grad_evals: usize,
}

impl AttackResult {
    pub fn adv(&self, x0: &[f64]) -> Vec<f64> {
        x0.iter().zip(&self.delta).map(|(x, d)| x + d).collect()
    }

    pub fn feasible(&self, epsilon: f64) -> bool {
        self.max_norm <= epsilon + 1e-9 && self.domain_violations == 0
    }
}

fn delta_norm(delta: &[f64], norm: NormKind) -> f64 {
    match norm {
        NormKind::Linf => delta.iter().fold(0.0, |m, d| m.max(d.abs())),
        NormKind::L2 => delta.iter().map(|d| d * d).sum::<f64>().sqrt(),
    }
}

fn finish(
    x0: &[f64],
    norm: NormKind,
    delta: Vec<f64>,
    trace: Vec<f64>,
    best_step: usize,
    grad_evals: usize,
) -> AttackResult {
    let violations = x0
        .iter()
        .zip(&delta)
        .filter(|(x, d)| {
            let v = *x + *d;
            !(0.0..=1.0).contains(&v)
        })
        .count();
    let best_value = trace[best_step];
    AttackResult {
        max_norm: delta_norm(&delta, norm),
        domain_violations: violations,
        delta,
        best_step,
        best_value,
        success: None,
        trace,
        grad_evals,
    }
}

fn toward_zero(d: f64) -> f64 {
    if d == 0.0 {
        0.0
    } else {
        f64::from_bits(d.to_bits() - 1)
    }
}

/// Projects δ onto the ε-ball around x intersected with the [0,1] box.
/// x must lie in [0,1]. The box constraint holds exactly on return: any
/// element whose sum still rounds outside [0,1] is nudged toward zero one
/// ulp at a time.
pub fn project(delta: &mut [f64], x: &[f64], norm: NormKind, epsilon: f64) {
    assert_eq!(delta.len(), x.len(), "projection shape mismatch");
    if norm == NormKind::L2 {
        let n = delta_norm(delta, NormKind::L2);
        if n > epsilon {
            let scale = epsilon / n;
            for d in delta.iter_mut() {
                *d *= scale;
            }
        }
    }
    for (d, &xi) in delta.iter_mut().zip(x) {
        let mut v = *d;
        if norm == NormKind::Linf {
            v = v.clamp(-epsilon, epsilon);
        }
        v = v.clamp(-xi, 1.0 - xi);
        while xi + v < 0.0 || xi + v > 1.0 {
            v = toward_zero(v);
        }
        *d = v;
    }
}

fn check_domain(x0: &[f64]) -> Result<()> {
    if x0.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidArgument("attack input must lie in [0,1]".into()));
    }
    Ok(())
}

/// Ascent direction from a gradient: elementwise sign for ℓ∞, normalized
/// gradient for ℓ2 (zero gradient gives a zero direction).
fn direction(g: &[f64], norm: NormKind) -> Vec<f64> {
    match norm {
        NormKind::Linf => g
            .iter()
            .map(|&v| {
                if v > 0.0 {
                    1.0
                } else if v < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            })
            .collect(),
        NormKind::L2 => {
            let n = delta_norm(g, NormKind::L2);
            if n == 0.0 {
                vec![0.0; g.len()]
            } else {
                g.iter().map(|&v| v / n).collect()
            }
        }
    }
}

pub type Objective<'a> = dyn FnMut(&Tensor) -> Result<Tensor> + 'a;

fn eval_value(f: &mut Objective, x: &[f64], shape: &[usize]) -> Result<f64> {
    no_grad(|| {
        let xt = Tensor::from_vec(x.to_vec(), shape)?;
        let loss = f(&xt)?;
        loss.item()
    })
}

fn eval_value_grad(
    f: &mut Objective,
    x: &[f64],
    shape: &[usize],
    step: usize,
) -> Result<(f64, Vec<f64>)> {
    let xt = Tensor::param(x.to_vec(), shape)?;
    let loss = f(&xt)?;
    let v = loss.item()?;
    let g = if loss.requires_grad() {
        loss.backward()?;
        xt.grad().unwrap_or_else(|| vec![0.0; x.len()])
    } else {
        vec![0.0; x.len()]
    };
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteGradient { what: "attack objective".into(), step: Some(step) });
    }
    Ok((v, g))
}

/// Single-step sign attack: δ = project(ε · sign ∇f(x)). Always returns the
/// stepped point; equals PGD with k=1, α=ε, zero init, no best tracking.
pub fn fgsm(f: &mut Objective, x0: &[f64], shape: &[usize], epsilon: f64) -> Result<AttackResult> {
    check_domain(x0)?;
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidArgument(format!("epsilon must be finite and >= 0, got {epsilon}")));
    }
    let (f0, g) = eval_value_grad(f, x0, shape, 0)?;
    let mut delta: Vec<f64> = direction(&g, NormKind::Linf).iter().map(|d| epsilon * d).collect();
    project(&mut delta, x0, NormKind::Linf, epsilon);
    let adv: Vec<f64> = x0.iter().zip(&delta).map(|(x, d)| x + d).collect();
    let f1 = eval_value(f, &adv, shape)?;
    Ok(finish(x0, NormKind::Linf, delta, vec![f0, f1], 1, 1))
}

fn init_delta(x0: &[f64], budget: &PerturbationBudget) -> Vec<f64> {
    let mut delta = match budget.init {
        InitKind::Zero => vec![0.0; x0.len()],
        InitKind::RandomUniform => {
            let mut r = rng::stream(budget.seed, "attack-init");
            (0..x0.len())
                .map(|_| rng::uniform_in(&mut r, -budget.epsilon, budget.epsilon))
                .collect()
        }
    };
    project(&mut delta, x0, budget.norm, budget.epsilon);
    delta
}

/// Null budget: the input is returned bit-identical, the objective is
/// evaluated once without building a graph, and no RNG is consumed.
fn null_budget_result(
    f: &mut Objective,
    x0: &[f64],
    shape: &[usize],
    norm: NormKind,
    trace_len: usize,
) -> Result<AttackResult> {
    let v = eval_value(f, x0, shape)?;
    Ok(finish(x0, norm, vec![0.0; x0.len()], vec![v; trace_len], 0, 0))
}

/// Projected gradient ascent on f over the ε-ball around x0 intersected
/// with [0,1]. The trace holds k+1 values: the init and every iterate.
/// With `track_best` the returned δ is the best iterate seen (the init
/// counts); otherwise it is the final iterate.
pub fn pgd(
    f: &mut Objective,
    x0: &[f64],
    shape: &[usize],
    budget: &PerturbationBudget,
) -> Result<AttackResult> {
    check_domain(x0)?;
    budget.validate()?;
    if budget.epsilon == 0.0 {
        return null_budget_result(f, x0, shape, budget.norm, budget.steps + 1);
    }
    let alpha = budget.alpha();
    let mut delta = init_delta(x0, budget);
    let mut trace = Vec::with_capacity(budget.steps + 1);
    let mut grad_evals = 0;
    let mut best = delta.clone();
    let mut f_best = f64::NEG_INFINITY;
    let mut best_step = 0;
    for k in 0..budget.steps {
        let adv: Vec<f64> = x0.iter().zip(&delta).map(|(x, d)| x + d).collect();
        let (v, g) = eval_value_grad(f, &adv, shape, k)?;
        grad_evals += 1;
        trace.push(v);
        if v > f_best {
            f_best = v;
            best.copy_from_slice(&delta);
            best_step = trace.len() - 1;
        }
        let d = direction(&g, budget.norm);
        for (di, s) in delta.iter_mut().zip(&d) {
            *di += alpha * s;
        }
        project(&mut delta, x0, budget.norm, budget.epsilon);
    }
    let adv: Vec<f64> = x0.iter().zip(&delta).map(|(x, d)| x + d).collect();
    let v = eval_value(f, &adv, shape)?;
    trace.push(v);
    if v > f_best {
        best.copy_from_slice(&delta);
        best_step = trace.len() - 1;
    }
    let (kept, kept_step) = if budget.track_best {
        (best, best_step)
    } else {
        let last = trace.len() - 1;
        (delta, last)
    };
    Ok(finish(x0, budget.norm, kept, trace, kept_step, grad_evals))
}

/// APGD constants.
const APGD_MOMENTUM: f64 = 0.75;
const APGD_RHO: f64 = 0.75;

fn apgd_checkpoints(n: usize) -> Vec<usize> {
    let mut ps = vec![0.0_f64, 0.22];
    while *ps.last().unwrap() < 1.0 {
        let j = ps.len();
        let next = ps[j - 1] + (ps[j - 1] - ps[j - 2] - 0.03).max(0.06);
        ps.push(next);
    }
    let mut ws: Vec<usize> = ps[1..]
        .iter()
        .map(|p| (p * n as f64).ceil() as usize)
        .filter(|&w| w >= 1 && w <= n)
        .collect();
    ws.dedup();
    ws
}

/// Momentum-accelerated projected ascent with adaptive step halving.
/// Initial step 2ε; at each checkpoint the step halves and the search
/// restarts from the best-so-far point if progress stalled (too few
/// improving steps, or neither the step nor the best changed). Always
/// returns the best iterate seen.
pub fn apgd(
    f: &mut Objective,
    x0: &[f64],
    shape: &[usize],
    budget: &PerturbationBudget,
) -> Result<AttackResult> {
    check_domain(x0)?;
    budget.validate()?;
    if budget.steps < 2 {
        return Err(Error::InvalidArgument(format!(
            "adaptive attack needs at least 2 steps, got {}",
            budget.steps
        )));
    }
    if budget.epsilon == 0.0 {
        return null_budget_result(f, x0, shape, budget.norm, budget.steps + 1);
    }
    let n = budget.steps;
    let checkpoints = apgd_checkpoints(n);
    let mut eta = 2.0 * budget.epsilon;

    let mut cur = init_delta(x0, budget);
    let at = |d: &[f64]| -> Vec<f64> { x0.iter().zip(d).map(|(x, di)| x + di).collect() };
    let (f0, mut grad) = eval_value_grad(f, &at(&cur), shape, 0)?;
    let mut grad_evals = 1;
    let mut trace = vec![f0];
    let mut f_cur = f0;
    let mut best = cur.clone();
    let mut f_best = f0;
    let mut best_step = 0usize;
    let mut prev = cur.clone();

    let mut improves = 0usize;
    let mut last_ckpt = 0usize;
    let mut eta_at_ckpt = eta;
    let mut fbest_at_ckpt = f_best;

    for k in 1..=n {
        let d = direction(&grad, budget.norm);
        let mut z: Vec<f64> = cur.iter().zip(&d).map(|(c, s)| c + eta * s).collect();
        project(&mut z, x0, budget.norm, budget.epsilon);
        let mut next: Vec<f64> = if k == 1 {
            z
        } else {
            let mut v: Vec<f64> = (0..cur.len())
                .map(|i| {
                    cur[i]
                        + APGD_MOMENTUM * (z[i] - cur[i])
                        + (1.0 - APGD_MOMENTUM) * (cur[i] - prev[i])
                })
                .collect();
            project(&mut v, x0, budget.norm, budget.epsilon);
            v
        };
        let (fv, g) = eval_value_grad(f, &at(&next), shape, k)?;
        grad_evals += 1;
        trace.push(fv);
        if fv > f_cur {
            improves += 1;
        }
        if fv > f_best {
            f_best = fv;
            best = next.clone();
            best_step = trace.len() - 1;
        }
        prev = std::mem::replace(&mut cur, std::mem::take(&mut next));
        f_cur = fv;
        grad = g;

        if checkpoints.contains(&k) && k < n {
            let gap = k - last_ckpt;
            let cond1 = (improves as f64) < APGD_RHO * gap as f64;
            let cond2 = eta == eta_at_ckpt && f_best == fbest_at_ckpt;
            if cond1 || cond2 {
                eta *= 0.5;
                cur = best.clone();
                let (fb, gb) = eval_value_grad(f, &at(&cur), shape, k)?;
                grad_evals += 1;
                trace.push(fb);
                f_cur = fb;
                grad = gb;
                prev = cur.clone();
            }
            improves = 0;
            last_ckpt = k;
            eta_at_ckpt = eta;
            fbest_at_ckpt = f_best;
        }
    }
    Ok(finish(x0, budget.norm, best, trace, best_step, grad_evals))
}

pub struct PipelineStage<'a> {
    pub name: String,
    pub run: Box<dyn FnMut(usize, &[f64]) -> Result<AttackResult> + 'a>,
}

#[derive(Debug, Clone)]
pub struct CompositeResult {
    pub result: AttackResult,
    /// Stage whose result was kept: the first breaking stage, else the one
    /// with the highest recorded objective.
    pub stage: usize,
    pub stage_name: String,
    pub broken: bool,
}

/// Weak-to-strong attack composition over a sample set: each stage attacks
/// only the samples no earlier stage broke; a sample's final result is the
/// first breaking attack, else the best-objective attack across stages.
pub fn composite_pipeline(
    inputs: &[Vec<f64>],
    stages: &mut [PipelineStage],
    mut broken_by: impl FnMut(usize, &[f64]) -> Result<bool>,
) -> Result<Vec<CompositeResult>> {
    if stages.is_empty() {
        return Err(Error::InvalidArgument("composite pipeline needs at least one stage".into()));
    }
    let mut out: Vec<Option<CompositeResult>> = vec![None; inputs.len()];
    let mut alive: Vec<usize> = (0..inputs.len()).collect();
    for (si, stage) in stages.iter_mut().enumerate() {
        let mut still = Vec::with_capacity(alive.len());
        for &i in &alive {
            let mut r = (stage.run)(i, &inputs[i])?;
            let adv = r.adv(&inputs[i]);
            let hit = broken_by(i, &adv)?;
            r.success = Some(hit);
            let cand = CompositeResult {
                result: r,
                stage: si,
                stage_name: stage.name.clone(),
                broken: hit,
            };
            if hit {
                out[i] = Some(cand);
            } else {
                let better = match &out[i] {
                    None => true,
                    Some(prev) => cand.result.best_value > prev.result.best_value,
                };
                if better {
                    out[i] = Some(cand);
                }
                still.push(i);
            }
        }
        alive = still;
        if alive.is_empty() {
            break;
        }
    }
    Ok(out.into_iter().map(|o| o.unwrap()).collect())
}

/// Targeted attack on the captioner: maximize the negative answer-NLL of
/// the attacker's target string, then check whether greedy decoding emits
/// the target as a contiguous token subsequence.
pub fn targeted_caption_attack(
    cap: &CaptionerParams,
    vision: &VisionEncoder,
    image: &Tensor,
    instruction: &TokenSeq,
    target: &TokenSeq,
    budget: &PerturbationBudget,
) -> Result<AttackResult> {
    if target.words().len() > MAX_NEW_TOKENS {
        return Err(Error::InvalidArgument(format!(
            "target length {} exceeds generation limit {MAX_NEW_TOKENS}",
            target.words().len()
        )));
    }
    let toks = vec![SampleTokens::new(instruction, target)?];
    let shape = image.shape();
    let (x0, shape) = if shape.len() == 3 {
        (image.data(), vec![1, shape[0], shape[1], shape[2]])
    } else {
        (image.data(), shape)
    };
    let mut obj: Box<Objective> = Box::new(|xt: &Tensor| {
        losses::instruction_loss(cap, vision, xt, &toks)?.neg()
    });
    let mut result = if budget.epsilon == 0.0 {
        null_budget_result(&mut obj, &x0, &shape, budget.norm, budget.steps.max(1) + 1)?
    } else {
        apgd(&mut obj, &x0, &shape, budget)?
    };
    let adv = Tensor::from_vec(result.adv(&x0), &shape)?;
    let emitted = cap.generate(vision, &adv, instruction, MAX_NEW_TOKENS)?;
    result.success = Some(contains_contiguous(emitted.words(), target.words()));
    Ok(result)
}

/// True when `needle` occurs in `haystack` as a contiguous run.
pub fn contains_contiguous(haystack: &[u16], needle: &[u16]) -> bool {
    if needle.is_empty() {
        return true;
    }
    if needle.len() > haystack.len() {
        return false;
    }
    haystack.windows(needle.len()).any(|w| w == needle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, uniform_f64};

    fn concave(center: f64) -> impl FnMut(&Tensor) -> Result<Tensor> {
        move |t: &Tensor| {
            let d = t.add_scalar(-center)?;
            d.mul(&d)?.neg()?.sum(None)
        }
    }

    #[test]
    fn project_examples() {
        let mut d = vec![0.3];
        project(&mut d, &[0.5], NormKind::Linf, 0.1);
        assert_eq!(d, vec![0.1]);
        let mut d = vec![0.1];
        project(&mut d, &[0.95], NormKind::Linf, 0.2);
        assert!((d[0] - 0.05).abs() < 1e-15);
        let mut d = vec![0.0, 0.0];
        project(&mut d, &[0.3, 0.9], NormKind::Linf, 0.5);
        assert_eq!(d, vec![0.0, 0.0]);
    }

    #[test]
    fn project_l2_rescales() {
        let mut d = vec![0.3, 0.4];
        project(&mut d, &[0.5, 0.5], NormKind::L2, 0.25);
        let n = (d[0] * d[0] + d[1] * d[1]).sqrt();
        assert!(n <= 0.25 + 1e-12);
        assert!((d[0] / d[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn project_box_exact_at_boundary() {
        // Values chosen so x + (1-x) rounds above 1 without the nudge.
        let xs = [0.1, 0.3000000000000004, 0.7, 0.9999999999999999];
        for &x in &xs {
            let mut d = vec![5.0];
            project(&mut d, &[x], NormKind::Linf, 5.0);
            assert!(x + d[0] <= 1.0 && x + d[0] >= 0.0);
            let mut d = vec![-5.0];
            project(&mut d, &[x], NormKind::Linf, 5.0);
            assert!(x + d[0] >= 0.0);
        }
    }

    #[test]
    fn fgsm_linear_closed_form() {
        let mut f = |t: &Tensor| {
            let c = Tensor::from_vec(vec![2.0, -3.0, 0.0], &[3])?;
            t.mul(&c)?.sum(None)
        };
        let r = fgsm(&mut f, &[0.5, 0.5, 0.5], &[3], 0.1).unwrap();
        assert_eq!(r.delta, vec![0.1, -0.1, 0.0]);
        assert_eq!(r.grad_evals, 1);
        assert!(r.feasible(0.1));
        let r0 = fgsm(&mut f, &[0.5, 0.5, 0.5], &[3], 0.0).unwrap();
        assert_eq!(r0.delta, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn fgsm_equals_single_step_pgd() {
        let mut f = concave(0.9);
        let mut g = concave(0.9);
        let x0 = [0.4, 0.6];
        let a = fgsm(&mut f, &x0, &[2], 0.07).unwrap();
        let budget = PerturbationBudget {
            norm: NormKind::Linf,
            epsilon: 0.07,
            steps: 1,
            step_size: Some(0.07),
            init: InitKind::Zero,
            track_best: false,
            seed: 0,
        };
        let b = pgd(&mut g, &x0, &[2], &budget).unwrap();
        assert_eq!(a.delta, b.delta);
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn pgd_concave_toy_reaches_boundary() {
        let mut f = concave(0.9);
        let budget = PerturbationBudget {
            norm: NormKind::Linf,
            epsilon: 0.2,
            steps: 20,
            step_size: Some(0.05),
            init: InitKind::Zero,
            track_best: true,
            seed: 0,
        };
        let r = pgd(&mut f, &[0.5], &[1], &budget).unwrap();
        let v = 0.5 + r.delta[0];
        assert!((v - 0.7).abs() < 1e-6, "got {v}");
        assert_eq!(r.trace.len(), 21);
        assert!(r.feasible(0.2));
    }

    #[test]
    fn pgd_null_budget_identity() {
        let mut f = concave(0.9);
        let budget = PerturbationBudget::eval_linf(0.0, 5);
        let r = pgd(&mut f, &[0.5], &[1], &budget).unwrap();
        assert_eq!(r.delta, vec![0.0]);
        assert_eq!(r.trace.len(), 6);
        assert!(r.trace.iter().all(|&v| v == r.trace[0]));
        assert_eq!(r.grad_evals, 0);
    }

    #[test]
    fn pgd_track_best_beats_clean() {
        // Oscillating landscape: steps can overshoot, best tracking keeps
        // the top iterate which is at least the clean value (zero init).
        let mut f = |t: &Tensor| t.scalar_mul(40.0)?.exp()?.sum(None);
        let budget = PerturbationBudget::eval_linf(0.3, 6);
        let r = pgd(&mut f, &[0.4, 0.5], &[2], &budget).unwrap();
        assert!(r.best_value >= r.trace[0]);
        let max = r.trace.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(r.best_value, max);
    }

    #[test]
    fn pgd_random_init_stays_feasible_and_deterministic() {
        let mut f = concave(0.2);
        let budget = PerturbationBudget::train_linf(0.15, 3, 77);
        let a = pgd(&mut f, &[0.1, 0.9, 0.5], &[3], &budget).unwrap();
        let b = pgd(&mut f, &[0.1, 0.9, 0.5], &[3], &budget).unwrap();
        assert_eq!(a.delta, b.delta);
        assert!(a.feasible(0.15));
    }

    #[test]
    fn apgd_checkpoint_schedule() {
        let ws = apgd_checkpoints(100);
        assert_eq!(ws[0], 22);
        assert!(ws.windows(2).all(|w| w[0] < w[1]));
        assert!(*ws.last().unwrap() <= 100);
        // Gaps shrink but never below 6 steps (for N=100).
        let mut prev = 0;
        for &w in &ws {
            assert!(w - prev >= 3, "gap too small at {w}");
            prev = w;
        }
    }

    #[test]
    fn apgd_concave_toy_matches_or_beats_pgd() {
        let budget = PerturbationBudget::eval_linf(0.2, 20);
        let mut f = concave(0.9);
        let p = pgd(&mut f, &[0.5], &[1], &budget).unwrap();
        let mut g = concave(0.9);
        let a = apgd(&mut g, &[0.5], &[1], &budget).unwrap();
        assert!(a.best_value >= p.best_value - 1e-12);
        let v = 0.5 + a.delta[0];
        assert!((v - 0.7).abs() < 1e-6, "got {v}");
    }

    #[test]
    fn apgd_best_is_max_of_trace_and_nondecreasing() {
        let mut f = |t: &Tensor| {
            let s = t.scalar_mul(7.0)?.exp()?.sum(None)?;
            let d = t.add_scalar(-0.3)?;
            s.sub(&d.mul(&d)?.sum(None)?.scalar_mul(30.0)?)
        };
        let budget = PerturbationBudget::eval_linf(0.25, 30);
        let r = apgd(&mut f, &[0.2, 0.6, 0.45], &[3], &budget).unwrap();
        let max = r.trace.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(r.best_value, max);
        assert!(r.feasible(0.25));
        let mut run = f64::NEG_INFINITY;
        for (i, &v) in r.trace.iter().enumerate() {
            run = run.max(v);
            if i == r.best_step {
                assert_eq!(run, v);
            }
        }
    }

    #[test]
    fn apgd_needs_two_steps() {
        let mut f = concave(0.9);
        let budget = PerturbationBudget::eval_linf(0.1, 1);
        assert!(apgd(&mut f, &[0.5], &[1], &budget).is_err());
    }

    #[test]
    fn non_finite_gradient_reports_step() {
        // log(x) has gradient 1/x which overflows to inf at subnormal x.
        let mut f = |t: &Tensor| t.log()?.sum(None);
        let budget = PerturbationBudget {
            norm: NormKind::Linf,
            epsilon: 0.5,
            steps: 4,
            step_size: Some(0.5),
            init: InitKind::Zero,
            track_best: false,
            seed: 0,
        };
        let err = pgd(&mut f, &[1e-320], &[1], &budget).unwrap_err();
        match err {
            Error::NonFiniteGradient { step, .. } => assert_eq!(step, Some(0)),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn feasibility_fuzz() {
        let mut r = stream(4242, "attack-fuzz");
        for case in 0..120 {
            let n = 1 + (uniform_f64(&mut r) * 6.0) as usize;
            let x0: Vec<f64> = (0..n).map(|_| uniform_f64(&mut r)).collect();
            let eps = [0.0, 1.0 / 255.0, 0.1, 0.5][case % 4];
            let steps = 1 + case % 4;
            let norm = if case % 2 == 0 { NormKind::Linf } else { NormKind::L2 };
            let seed = case as u64;
            let center = uniform_f64(&mut r);
            let budget = PerturbationBudget {
                norm,
                epsilon: eps,
                steps,
                step_size: None,
                init: if case % 3 == 0 { InitKind::Zero } else { InitKind::RandomUniform },
                track_best: case % 5 != 0,
                seed,
            };
            let mut f = concave(center);
            let res = pgd(&mut f, &x0, &[n], &budget).unwrap();
            assert!(res.feasible(eps), "case {case}: norm {} eps {eps}", res.max_norm);
            if norm == NormKind::Linf {
                assert!(res.max_norm <= eps);
            }
            for (x, d) in x0.iter().zip(&res.delta) {
                let v = x + d;
                assert!((0.0..=1.0).contains(&v));
            }
            if steps >= 2 {
                let mut g = concave(center);
                let res = apgd(&mut g, &x0, &[n], &budget).unwrap();
                assert!(res.feasible(eps), "apgd case {case}");
            }
        }
    }

    #[test]
    fn composite_short_circuits_and_degenerates() {
        let inputs: Vec<Vec<f64>> = vec![vec![0.2], vec![0.8]];
        let calls = std::cell::RefCell::new(vec![0usize; 2]);
        let stage = |eps: f64| {
            let calls = &calls;
            PipelineStage {
                name: format!("pgd-{eps}"),
                run: Box::new(move |i: usize, x: &[f64]| {
                    calls.borrow_mut()[i] += 1;
                    let mut f = concave(1.0);
                    pgd(&mut f, x, &[1], &PerturbationBudget::eval_linf(eps, 2))
                }),
            }
        };
        // Sample 0 breaks on stage one (adv value crosses 0.25); sample 1
        // is already past the threshold and also breaks immediately.
        let mut stages = vec![stage(0.1), stage(0.3)];
        let out = composite_pipeline(&inputs, &mut stages, |_, adv| Ok(adv[0] > 0.25)).unwrap();
        assert!(out[0].broken && out[1].broken);
        assert_eq!(*calls.borrow(), vec![1, 1]);
        assert_eq!(out[0].stage, 0);

        // Impossible predicate: both stages run on every sample and the
        // kept result is the better objective (larger ε reaches higher).
        calls.borrow_mut().iter_mut().for_each(|c| *c = 0);
        let mut stages = vec![stage(0.1), stage(0.3)];
        let out = composite_pipeline(&inputs, &mut stages, |_, _| Ok(false)).unwrap();
        assert_eq!(*calls.borrow(), vec![2, 2]);
        assert!(out.iter().all(|o| !o.broken && o.stage == 1));

        // One-stage pipeline equals the bare attack.
        let mut single = vec![stage(0.1)];
        let out = composite_pipeline(&inputs, &mut single, |_, _| Ok(false)).unwrap();
        let mut f = concave(1.0);
        let bare = pgd(&mut f, &inputs[0], &[1], &PerturbationBudget::eval_linf(0.1, 2)).unwrap();
        assert_eq!(out[0].result.delta, bare.delta);
        assert_eq!(out[0].result.trace, bare.trace);

        assert!(composite_pipeline(&inputs, &mut [], |_, _| Ok(false)).is_err());
    }

    #[test]
    fn contiguous_containment() {
        assert!(contains_contiguous(&[1, 2, 3, 4], &[2, 3]));
        assert!(!contains_contiguous(&[1, 2, 3, 4], &[2, 4]));
        assert!(contains_contiguous(&[1, 2], &[]));
        assert!(!contains_contiguous(&[1], &[1, 2]));
        assert!(contains_contiguous(&[5, 5, 6], &[5, 6]));
    }

    #[test]
    fn targeted_vacuous_target_succeeds_at_null_budget() {
        let enc = crate::models::DualEncoderParams::init(21, 16, crate::data::vocab_size()).unwrap();
        let cap = CaptionerParams::init(22, crate::data::vocab_size()).unwrap();
        let d = crate::data::make_dataset(16, 16, 23).unwrap();
        let instr = TokenSeq::tokenize("describe the image").unwrap();
        let img = d.image(0);
        let own = cap.generate(&enc.vision, &img, &instr, 8).unwrap();
        let budget = PerturbationBudget::eval_linf(0.0, 2);
        if own.words().is_empty() {
            // Untrained model emitted EOS immediately; use any non-empty
            // target and assert failure instead.
            let t = TokenSeq::tokenize("red circle").unwrap();
            let r = targeted_caption_attack(&cap, &enc.vision, &img, &instr, &t, &budget).unwrap();
            assert_eq!(r.success, Some(false));
        } else {
            let r = targeted_caption_attack(&cap, &enc.vision, &img, &instr, &own, &budget).unwrap();
            assert_eq!(r.success, Some(true));
            assert!(r.delta.iter().all(|&d| d == 0.0));
        }
    }

    #[test]
    fn attacks_leave_parameters_unchanged() {
        let enc = crate::models::DualEncoderParams::init(31, 16, crate::data::vocab_size()).unwrap();
        let before: Vec<Vec<f64>> = enc.named_params().iter().map(|(_, t)| t.data()).collect();
        let d = crate::data::make_dataset(16, 16, 32).unwrap();
        let img = d.image_batch(&[0]);
        let caps = vec![d.captions[0].clone()];
        let mut f = |xt: &Tensor| {
            let ie = enc.encode_image(xt)?;
            let te = enc.encode_text(&caps)?;
            losses::contrastive_loss(&ie, &te, &enc.inv_tau()?)
        };
        let budget = PerturbationBudget::eval_linf(4.0 / 255.0, 3);
        pgd(&mut f, &img.data(), &img.shape(), &budget).unwrap();
        let after: Vec<Vec<f64>> = enc.named_params().iter().map(|(_, t)| t.data()).collect();
        assert_eq!(before, after);
    }
}
