//! Dev scaffolding: single-stage clean contrastive training with periodic
//! zero-shot accuracy probes. Args: lr steps batch lambda [res].

use std::time::Instant;

use advlab_core::attacks::PerturbationBudget;
use advlab_core::data::{make_dataset, TokenSeq, SPLIT_TRAIN};
use advlab_core::eval::{classify, default_zero_shot_head};
use advlab_core::optim::{cosine_lr, OptimizerState};
use advlab_core::rng::{stream, uniform_f64};
use advlab_core::train::{adv_clip_step, ClipWithAux};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(5e-4);
    let steps: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(600);
    let batch: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(32);
    let lambda: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(0.5);
    let res: usize = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(32);
    eprintln!("lr={lr} steps={steps} batch={batch} lambda={lambda} res={res}");

    let t0 = Instant::now();
    let data = make_dataset(512, res, 7).unwrap();
    let eval_data = make_dataset(128, res, 1007).unwrap();
    let train_idx = data.indices_of_split(SPLIT_TRAIN);

    let m = ClipWithAux::init(11, res, advlab_core::data::vocab_size()).unwrap();
    let mut trainable = m.enc.named_params();
    trainable.extend(m.aux.named_params());
    let mut opt = OptimizerState::adamw(lr, 1e-4);
    let mut rng = stream(11, "pilot-batches");

    let eval_images = eval_data.image_batch(&(0..eval_data.len()).collect::<Vec<_>>());
    let probe = |m: &ClipWithAux, step: usize, loss: f64| {
        let head = default_zero_shot_head(&m.enc).unwrap();
        let pred = classify(&m.enc, &head, &eval_images).unwrap();
        let acc = pred
            .iter()
            .zip(&eval_data.labels)
            .filter(|(p, l)| **p == **l as usize)
            .count() as f64
            / pred.len() as f64;
        eprintln!("[{:5.0}s] step {step:5} loss {loss:.4} acc {acc:.3}", t0.elapsed().as_secs_f64());
    };

    let budget = PerturbationBudget::train_linf(0.0, 0, 0);
    let mut last = f64::NAN;
    for s in 0..steps {
        opt.lr = cosine_lr(lr, s as u64, steps as u64, 0.01);
        let idxs: Vec<usize> = (0..batch)
            .map(|_| train_idx[(uniform_f64(&mut rng) * train_idx.len() as f64) as usize % train_idx.len()])
            .collect();
        let images = data.image_batch(&idxs);
        let captions: Vec<TokenSeq> = idxs.iter().map(|&i| data.captions[i].clone()).collect();
        let out =
            adv_clip_step(&m, &mut opt, &trainable, &images, &captions, &budget, lambda, false, false, false)
                .unwrap();
        last = out.metrics.clean_loss;
        if s % 100 == 99 {
            probe(&m, s + 1, last);
        }
    }
    probe(&m, steps, last);
}
