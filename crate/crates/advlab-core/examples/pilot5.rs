//! Dev scaffolding: staged clean-vs-adversarial encoder comparison at a
//! chosen scale. Args: clean_steps s1 s2 s3 lr [batch] [clean_mix(0/1)].

use std::time::Instant;

use advlab_core::data::make_dataset;
use advlab_core::eval::{default_zero_shot_head, eval_robust_accuracy, RobustEvalConfig};
use advlab_core::train::{pretrain_text_encoder, train_clip_staged, ClipTrainConfig, TrainStageConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let c0: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(500);
    let s1: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(400);
    let s2: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(400);
    let s3: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(100);
    let lr: f64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(2e-3);
    let batch: usize = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(32);
    let clean_mix: bool = args.get(7).map(|s| s != "0").unwrap_or(false);
    eprintln!("clean={c0} steps=({s1},{s2},{s3}) lr={lr} batch={batch} clean_mix={clean_mix}");
    let t0 = Instant::now();

    let stage = |res: usize, k: usize, eps: f64, steps: usize| TrainStageConfig {
        resolution: res,
        attack_steps: k,
        epsilon: eps,
        samples: steps * batch,
        batch_size: batch,
        lr,
        freeze_text: true,
        lambda_caption: 0.5,
    };

    let clean_cfg = ClipTrainConfig::new(vec![stage(32, 0, 0.0, c0)], 512, 7, 11);
    let (clean_m, h) = pretrain_text_encoder(&clean_cfg, |_| {}).unwrap();
    eprintln!("[{:5.0}s] clean encoder: {} steps, last loss {:.4}", t0.elapsed().as_secs_f64(), h.len(), h.last().unwrap().clean_loss);

    let stages = vec![
        stage(16, 2, 4.0 / 255.0, s1),
        stage(32, 3, 4.0 / 255.0, s2),
        stage(32, 4, 8.0 / 255.0, s3),
    ];
    let mut adv_cfg = ClipTrainConfig::new(stages, 512, 7, 11);
    adv_cfg.clean_mix = clean_mix;
    let (adv_m, h) = train_clip_staged(&adv_cfg, Some(&clean_m.enc), |_| {}).unwrap();
    eprintln!("[{:5.0}s] adv encoder: {} steps, last adv loss {:.4}", t0.elapsed().as_secs_f64(), h.len(), h.last().unwrap().adv_loss);

    let eval_data = make_dataset(128, 32, 1007).unwrap();
    let eval_cfg = RobustEvalConfig::new(4.0 / 255.0, 64, 99);
    let head_c = default_zero_shot_head(&clean_m.enc).unwrap();
    let rep_c = eval_robust_accuracy(&clean_m.enc, &head_c, &eval_data, &eval_cfg).unwrap();
    eprintln!("[{:5.0}s] clean-trained: clean_acc {:.3} robust_acc {:.3}", t0.elapsed().as_secs_f64(), rep_c.clean_accuracy, rep_c.robust_accuracy);
    let head_a = default_zero_shot_head(&adv_m.enc).unwrap();
    let rep_a = eval_robust_accuracy(&adv_m.enc, &head_a, &eval_data, &eval_cfg).unwrap();
    eprintln!("[{:5.0}s] adv-trained:   clean_acc {:.3} robust_acc {:.3}", t0.elapsed().as_secs_f64(), rep_a.clean_accuracy, rep_a.robust_accuracy);

    eprintln!(
        "criterion margins: clean robust {:.3} (< 0.05?) | adv - clean robust = {:.3} (need >= 0.20) | clean acc gap = {:.3} (need <= 0.15)",
        rep_c.robust_accuracy,
        rep_a.robust_accuracy - rep_c.robust_accuracy,
        rep_c.clean_accuracy - rep_a.clean_accuracy,
    );

    std::fs::create_dir_all("/tmp/pilots").unwrap();
    advlab_core::checkpoint::save(std::path::Path::new("/tmp/pilots/clean-encoder.ddf1"), &clean_m.enc.named_params()).unwrap();
    advlab_core::checkpoint::save(std::path::Path::new("/tmp/pilots/adv-encoder.ddf1"), &adv_m.enc.named_params()).unwrap();
    eprintln!("saved encoders to /tmp/pilots");
}
