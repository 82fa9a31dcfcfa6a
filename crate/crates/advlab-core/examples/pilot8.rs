//! Dev scaffolding: criterion-6 dress rehearsal. Tunes the three captioner
//! variants once (cached under /tmp/pilots), then sweeps targeted-attack
//! settings. Args: epochs lr n_targets n_samples settings
//! where settings = comma list of eps255:steps, e.g. 140:300,166:300.

use std::path::{Path, PathBuf};
use std::time::Instant;

use advlab_core::checkpoint;
use advlab_core::data::make_dataset;
use advlab_core::eval::{
    eval_caption_robustness, eval_targeted_asr, CaptionEvalConfig, TargetedEvalConfig,
    ATTACK_TARGETS,
};
use advlab_core::models::{load_named, CaptionerParams, DualEncoderParams, VisionEncoder};
use advlab_core::rng::stream;
use advlab_core::train::{train_captioner, InstructionTuneConfig};

fn load_encoder(path: &str) -> DualEncoderParams {
    let src = checkpoint::load(Path::new(path)).unwrap();
    let enc = DualEncoderParams::init(0, 32, advlab_core::data::vocab_size()).unwrap();
    load_named(&enc.named_params(), &src).unwrap();
    enc
}

fn save_pair(path: &PathBuf, cap: &CaptionerParams, vision: &VisionEncoder) {
    let mut entries = cap.named_params();
    vision.collect("vision", &mut entries);
    checkpoint::save(path, &entries).unwrap();
}

fn load_pair(path: &PathBuf) -> (CaptionerParams, VisionEncoder) {
    let src = checkpoint::load(path).unwrap();
    let vis_src: Vec<(String, advlab_core::Tensor)> =
        src.iter().filter(|(n, _)| n.starts_with("vision.")).cloned().collect();
    let cap_src: Vec<(String, advlab_core::Tensor)> =
        src.iter().filter(|(n, _)| !n.starts_with("vision.")).cloned().collect();
    let cap = CaptionerParams::init(0, advlab_core::data::vocab_size()).unwrap();
    load_named(&cap.named_params(), &cap_src).unwrap();
    let vision = VisionEncoder::init(&mut stream(0, "load"), 32).unwrap();
    let mut dst = Vec::new();
    vision.collect("vision", &mut dst);
    load_named(&dst, &vis_src).unwrap();
    (cap, vision)
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(10);
    let lr: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let n_targets: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(2);
    let n_samples: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(3);
    let settings: Vec<(f64, usize)> = args
        .get(5)
        .map(|s| {
            s.split(',')
                .map(|p| {
                    let (e, k) = p.split_once(':').unwrap();
                    (e.parse::<f64>().unwrap() / 255.0, k.parse::<usize>().unwrap())
                })
                .collect()
        })
        .unwrap_or_else(|| vec![(140.0 / 255.0, 300)]);
    eprintln!("epochs={epochs} lr={lr} targets={n_targets} samples={n_samples} settings={settings:?}");
    let t0 = Instant::now();

    let data = make_dataset(512, 32, 7).unwrap();
    let eval_data = make_dataset(128, 32, 1007).unwrap();

    let names = ["cap-cc", "cap-rc", "cap-ra"];
    let mut pairs: Vec<(CaptionerParams, VisionEncoder)> = Vec::new();
    let all_cached = names.iter().all(|n| Path::new(&format!("/tmp/pilots/{n}-e{epochs}.ddf1")).exists());
    if all_cached {
        for n in names {
            pairs.push(load_pair(&PathBuf::from(format!("/tmp/pilots/{n}-e{epochs}.ddf1"))));
        }
        eprintln!("[{:5.0}s] loaded cached captioners", t0.elapsed().as_secs_f64());
    } else {
        let clean_enc = load_encoder("/tmp/pilots/clean-encoder.ddf1");
        let adv_enc = load_encoder("/tmp/pilots/adv-encoder.ddf1");
        let mut clean_cfg = InstructionTuneConfig::clean(epochs);
        clean_cfg.lr = lr;
        let mut adv_cfg = InstructionTuneConfig::adversarial(epochs, 8.0 / 255.0, 3);
        adv_cfg.lr = lr;
        let specs: [(&str, &VisionEncoder, &InstructionTuneConfig); 3] = [
            ("cap-cc", &clean_enc.vision, &clean_cfg),
            ("cap-rc", &adv_enc.vision, &clean_cfg),
            ("cap-ra", &adv_enc.vision, &adv_cfg),
        ];
        for (name, vis_src, cfg) in specs {
            let (cap, vis, h) = train_captioner(cfg, vis_src, &data, 11, |_| {}).unwrap();
            eprintln!(
                "[{:5.0}s] {name}: {} steps, last nll {:.3}",
                t0.elapsed().as_secs_f64(),
                h.len(),
                h.last().unwrap().adv_loss
            );
            save_pair(&PathBuf::from(format!("/tmp/pilots/{name}-e{epochs}.ddf1")), &cap, &vis);
            pairs.push((cap, vis));
        }
    }

    for (eps, steps) in settings {
        let mut degr = Vec::new();
        let mut asr = Vec::new();
        for (i, (cap, vis)) in pairs.iter().enumerate() {
            let ccfg = CaptionEvalConfig { epsilon: eps, attack_steps: 20, samples: 16, seed: 99 };
            let crep = eval_caption_robustness(cap, vis, &eval_data, &ccfg).unwrap();
            let tcfg = TargetedEvalConfig {
                epsilon: eps,
                attack_steps: steps,
                samples_per_target: n_samples,
                seed: 99,
                targets: ATTACK_TARGETS[..n_targets].iter().map(|s| s.to_string()).collect(),
            };
            let trep = eval_targeted_asr(cap, vis, &eval_data, &tcfg).unwrap();
            eprintln!(
                "[{:5.0}s] eps {:.3} steps {steps} {}: clean_tok {:.3} adv_tok {:.3} degr {:.3} | asr {:.3} help {:.3}",
                t0.elapsed().as_secs_f64(),
                eps,
                names[i],
                crep.clean_token_accuracy,
                crep.adv_token_accuracy,
                crep.clean_token_accuracy - crep.adv_token_accuracy,
                trep.asr,
                trep.helpfulness_token_accuracy
            );
            degr.push(crep.clean_token_accuracy - crep.adv_token_accuracy);
            asr.push(trep.asr);
        }
        eprintln!(
            "eps {:.3}: degr order {} | asr order {} {} | llava>=0.9 {}",
            eps,
            degr[2] <= degr[1],
            asr[2] <= asr[1],
            asr[1] <= asr[0],
            asr[0] >= 0.9
        );
    }
}
