//! Dev scaffolding: targeted-ASR probe vs attack steps and tuning recipe.
//! Args: epochs lr tsteps [n_targets] [n_samples]. Reads /tmp/pilots.

use std::path::Path;
use std::time::Instant;

use advlab_core::attacks::{targeted_caption_attack, PerturbationBudget};
use advlab_core::checkpoint;
use advlab_core::data::{instruction_for, make_dataset, TokenSeq};
use advlab_core::eval::{eval_targeted_asr, TargetedEvalConfig, ATTACK_TARGETS};
use advlab_core::models::{load_named, DualEncoderParams, SampleTokens, MAX_NEW_TOKENS};
use advlab_core::train::{train_captioner, InstructionTuneConfig};
use advlab_core::Tensor;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(6);
    let lr: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(3e-4);
    let tsteps: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(300);
    let n_targets: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(2);
    let n_samples: usize = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(3);
    eprintln!("epochs={epochs} lr={lr} tsteps={tsteps} targets={n_targets} samples={n_samples}");
    let t0 = Instant::now();

    let src = checkpoint::load(Path::new("/tmp/pilots/clean-encoder.ddf1")).unwrap();
    let enc = DualEncoderParams::init(0, 32, advlab_core::data::vocab_size()).unwrap();
    load_named(&enc.named_params(), &src).unwrap();

    let data = make_dataset(512, 32, 7).unwrap();
    let eval_data = make_dataset(128, 32, 1007).unwrap();

    let mut cfg = InstructionTuneConfig::clean(epochs);
    cfg.lr = lr;
    let (cap, vis, h) = train_captioner(&cfg, &enc.vision, &data, 11, |_| {}).unwrap();
    eprintln!(
        "[{:5.0}s] tuned: {} steps, first nll {:.3} last nll {:.3}",
        t0.elapsed().as_secs_f64(),
        h.len(),
        h.first().unwrap().adv_loss,
        h.last().unwrap().adv_loss
    );

    let eps_list: Vec<f64> = args
        .get(6)
        .map(|s| s.split(',').map(|v| v.parse::<f64>().unwrap() / 255.0).collect())
        .unwrap_or_else(|| vec![16.0 / 255.0]);
    for &eps in &eps_list {
        let tcfg = TargetedEvalConfig {
            epsilon: eps,
            attack_steps: tsteps,
            samples_per_target: n_samples,
            seed: 99,
            targets: ATTACK_TARGETS[..n_targets].iter().map(|s| s.to_string()).collect(),
        };
        let rep = eval_targeted_asr(&cap, &vis, &eval_data, &tcfg).unwrap();
        for t in &rep.per_target {
            eprintln!("  target {:28} hits {}/{}", format!("{:?}", t.target), t.hits, t.attempts);
        }
        eprintln!(
            "[{:5.0}s] eps {:.4} asr {:.3} helpfulness {:.3}",
            t0.elapsed().as_secs_f64(),
            eps,
            rep.asr,
            rep.helpfulness_token_accuracy
        );
    }

    // One-sample dissection: how far does the attack push the target NLL,
    // and does the teacher-forced argmax chain reach the target tokens?
    let image = eval_data.image(0);
    let instruction = instruction_for(0).unwrap();
    let target = TokenSeq::tokenize(ATTACK_TARGETS[0]).unwrap();
    let budget = PerturbationBudget::eval_linf(*eps_list.last().unwrap(), tsteps);
    let res = targeted_caption_attack(&cap, &vis, &image, &instruction, &target, &budget).unwrap();
    eprintln!(
        "diag: best -nll {:.4} at step {}/{} (clean {:.4}), success {:?}",
        res.best_value,
        res.best_step,
        res.trace.len(),
        res.trace[0],
        res.success
    );
    let shape = image.shape();
    let adv = Tensor::from_vec(res.adv(&image.data()), &[1, shape[0], shape[1], shape[2]]).unwrap();
    let gen = cap.generate(&vis, &adv, &instruction, MAX_NEW_TOKENS).unwrap();
    eprintln!("diag: target ids {:?}", target.words());
    eprintln!("diag: greedy  ids {:?}", gen.words());
    let st = SampleTokens::new(&instruction, &target).unwrap();
    let fw = cap.forward(&vis, &adv, &[st]).unwrap();
    let ldata = fw.logits.data();
    let lshape = fw.logits.shape();
    let (tt, vv) = (lshape[1], lshape[2]);
    let mut wants = Vec::new();
    let mut gots = Vec::new();
    for t in 0..tt {
        if fw.answer_mask[t] == 1.0 {
            let row = &ldata[t * vv..(t + 1) * vv];
            let mut best = 0usize;
            for i in 1..vv {
                if row[i] > row[best] {
                    best = i;
                }
            }
            wants.push(fw.targets[0][t]);
            gots.push(best as u16);
        }
    }
    eprintln!("diag: forced want {wants:?}");
    eprintln!("diag: forced got  {gots:?}");
}
