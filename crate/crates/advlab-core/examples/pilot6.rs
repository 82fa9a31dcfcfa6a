//! Dev scaffolding: captioner chain on top of pilot encoders. Args:
//! epochs lr [adv_eps] [adv_k]. Reads /tmp/pilots/{clean,adv}-encoder.ddf1.

use std::path::Path;
use std::time::Instant;

use advlab_core::checkpoint;
use advlab_core::data::make_dataset;
use advlab_core::eval::{
    eval_caption_robustness, eval_targeted_asr, CaptionEvalConfig, TargetedEvalConfig,
};
use advlab_core::models::{load_named, CaptionerParams, DualEncoderParams, VisionEncoder};
use advlab_core::train::{train_captioner, InstructionTuneConfig};

fn load_encoder(path: &str) -> DualEncoderParams {
    let src = checkpoint::load(Path::new(path)).unwrap();
    let enc = DualEncoderParams::init(0, 32, advlab_core::data::vocab_size()).unwrap();
    load_named(&enc.named_params(), &src).unwrap();
    enc
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(10);
    let lr: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let adv_eps: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(8.0 / 255.0);
    let adv_k: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(3);
    eprintln!("epochs={epochs} lr={lr} adv=({adv_eps:.4},{adv_k})");
    let t0 = Instant::now();

    let clean_enc = load_encoder("/tmp/pilots/clean-encoder.ddf1");
    let adv_enc = load_encoder("/tmp/pilots/adv-encoder.ddf1");
    let data = make_dataset(512, 32, 7).unwrap();
    let eval_data = make_dataset(128, 32, 1007).unwrap();

    let mut clean_cfg = InstructionTuneConfig::clean(epochs);
    clean_cfg.lr = lr;
    let mut adv_cfg = InstructionTuneConfig::adversarial(epochs, adv_eps, adv_k);
    adv_cfg.lr = lr;

    let tune = |name: &str, vision: &VisionEncoder, cfg: &InstructionTuneConfig| -> (CaptionerParams, VisionEncoder) {
        let (cap, vis, h) = train_captioner(cfg, vision, &data, 11, |_| {}).unwrap();
        eprintln!(
            "[{:5.0}s] {name}: {} steps, first nll {:.3} last nll {:.3}",
            t0.elapsed().as_secs_f64(),
            h.len(),
            h.first().unwrap().adv_loss,
            h.last().unwrap().adv_loss
        );
        (cap, vis)
    };

    let (cap_cc, vis_cc) = tune("cap-clean-clean", &clean_enc.vision, &clean_cfg);
    let (cap_rc, vis_rc) = tune("cap-robust-clean", &adv_enc.vision, &clean_cfg);
    let (cap_ra, vis_ra) = tune("cap-robust-adv", &adv_enc.vision, &adv_cfg);

    let ceval = CaptionEvalConfig { epsilon: 16.0 / 255.0, attack_steps: 20, samples: 32, seed: 99 };
    let teval = TargetedEvalConfig::new(16.0 / 255.0, 60, 10, 99);

    let mut rows = Vec::new();
    for (name, cap, vis) in
        [("cap-clean-clean", &cap_cc, &vis_cc), ("cap-robust-clean", &cap_rc, &vis_rc), ("cap-robust-adv", &cap_ra, &vis_ra)]
    {
        let c = eval_caption_robustness(cap, vis, &eval_data, &ceval).unwrap();
        let t = eval_targeted_asr(cap, vis, &eval_data, &teval).unwrap();
        eprintln!(
            "[{:5.0}s] {name}: clean_tok {:.3} adv_tok {:.3} degr {:.3} | asr {:.3} help_tok {:.3}",
            t0.elapsed().as_secs_f64(),
            c.clean_token_accuracy,
            c.adv_token_accuracy,
            c.clean_token_accuracy - c.adv_token_accuracy,
            t.asr,
            t.helpfulness_token_accuracy
        );
        rows.push((name, c.clean_token_accuracy - c.adv_token_accuracy, t.asr));
    }
    eprintln!(
        "orderings: degr d2<=d1 {} | asr d2<=d1 {} asr d1<=llava {} | llava asr >= 0.9 {}",
        rows[2].1 <= rows[1].1,
        rows[2].2 <= rows[1].2,
        rows[1].2 <= rows[0].2,
        rows[0].2 >= 0.9
    );
}
