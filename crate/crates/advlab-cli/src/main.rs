mod artifacts;
mod config;
mod figures;
mod rundir;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};

use advlab_core::data::{load_dataset, make_dataset, save_dataset, Dataset};
use advlab_core::eval::{
    default_eval_stages, default_zero_shot_head, eval_caption_robustness, eval_robust_accuracy,
    eval_targeted_asr, AttackAlgo, AttackObjective, CaptionEvalConfig, EvalAttackSpec, EvalReport,
    RobustEvalConfig, TargetedEvalConfig, ATTACK_TARGETS,
};
use advlab_core::train::{pretrain_text_encoder, train_captioner, train_clip_staged, StepMetrics};
use advlab_core::{checkpoint, Error, Result};

use config::RunConfig;
use rundir::RunDir;

#[derive(Parser)]
#[command(name = "advlab", version, about = "Train, attack, and evaluate toy vision-language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum AttackKind {
    Fgsm,
    Pgd,
    Apgd,
    Targeted,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossKind {
    Ce,
    Dlr,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset to a DDS1 file.
    GenData {
        /// Output directory; the filename encodes n, resolution, and seed.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        res: usize,
        #[arg(long)]
        seed: u64,
    },
    /// Train a dual encoder (clean pretraining or the staged adversarial schedule).
    TrainClip {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Instruction-tune a captioner on top of an encoder checkpoint's vision tower.
    TrainCaptioner {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Run one attack against a checkpoint and write a JSON report.
    Attack {
        #[arg(long)]
        checkpoint: PathBuf,
        /// DDS1 dataset file to attack on.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        kind: AttackKind,
        #[arg(long, value_enum, default_value = "ce")]
        loss: LossKind,
        #[arg(long)]
        epsilon: f64,
        #[arg(long)]
        steps: usize,
        /// Target string for kind=targeted; omitted = the built-in target list.
        #[arg(long)]
        target: Option<String>,
        #[arg(long, default_value_t = 32)]
        samples: usize,
        #[arg(long, default_value_t = 99)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint (robustness for encoders, captioning + targeted for captioners).
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Report name under reports/; defaults to the checkpoint kind.
        #[arg(long)]
        label: Option<String>,
        /// Override [eval].epsilon for encoder robustness.
        #[arg(long)]
        epsilon: Option<f64>,
    },
    /// Aggregate EvalReports from run directories into figures and CSV tables.
    Report {
        #[arg(long)]
        out: PathBuf,
        /// Run directories, each containing reports/*.json.
        runs: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { out, n, res, seed } => gen_data(&out, n, res, seed),
        Command::TrainClip { config, run_dir } => train_clip(&config, &run_dir),
        Command::TrainCaptioner { config, run_dir } => train_captioner_cmd(&config, &run_dir),
        Command::Attack { checkpoint, data, kind, loss, epsilon, steps, target, samples, seed, out } => {
            attack_cmd(&checkpoint, &data, kind, loss, epsilon, steps, target, samples, seed, &out)
        }
        Command::Eval { config, run_dir, checkpoint, label, epsilon } => {
            eval_cmd(&config, &run_dir, &checkpoint, label, epsilon)
        }
        Command::Report { out, runs } => report_cmd(&out, &runs),
    }
}

fn gen_data(out: &Path, n: usize, res: usize, seed: u64) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let data = make_dataset(n, res, seed)?;
    let path = out.join(format!("dataset-n{n}-r{res}-s{seed}.dds1"));
    save_dataset(&path, &data)?;
    println!("{}", path.display());
    Ok(())
}

fn record_step(dir: &RunDir, m: &StepMetrics) {
    let tag = format!("stage{}/step{}", m.stage, m.step);
    let _ = dir.append_metric(&tag, "clean_loss", m.clean_loss);
    let _ = dir.append_metric(&tag, "adv_loss", m.adv_loss);
}

fn train_clip(config: &Path, run_dir: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let dir = RunDir::create(run_dir)?;
    dir.write_resolved_config(&cfg.resolved_toml()?)?;
    let train_cfg = cfg.clip_train_config()?;
    let clip = cfg.clip_section()?;
    let (model, history) = if clip.mode == "clean" {
        pretrain_text_encoder(&train_cfg, |m| record_step(&dir, m))?
    } else {
        let donor = match &clip.text_from {
            Some(p) => artifacts::load_encoder(p)?,
            None => {
                return Err(Error::InvalidArgument(
                    "adversarial mode freezes the text tower; clip.text_from must point at a pretrained encoder".into(),
                ))
            }
        };
        train_clip_staged(&train_cfg, Some(&donor), |m| record_step(&dir, m))?
    };
    let path = dir.checkpoint_path("encoder.ddf1");
    artifacts::save_encoder(&path, &model.enc)?;
    println!("{} steps={} checkpoint={}", dir.run_id, history.len(), path.display());
    Ok(())
}

fn train_captioner_cmd(config: &Path, run_dir: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let dir = RunDir::create(run_dir)?;
    dir.write_resolved_config(&cfg.resolved_toml()?)?;
    let tune = cfg.instruction_tune_config()?;
    let encoder = artifacts::load_encoder(&cfg.captioner_section()?.vision_from)?;
    let data = make_dataset(cfg.data.n, encoder.vision.resolution, cfg.data.seed)?;
    let (cap, vision, history) = train_captioner(&tune, &encoder.vision, &data, cfg.run.seed, |m| {
        let tag = format!("epoch{}/step{}", m.stage, m.step);
        let _ = dir.append_metric(&tag, "answer_nll", m.adv_loss);
    })?;
    let path = dir.checkpoint_path("captioner.ddf1");
    artifacts::save_captioner(&path, &cap, &vision)?;
    println!("{} steps={} checkpoint={}", dir.run_id, history.len(), path.display());
    Ok(())
}

fn load_eval_dataset(file: Option<&PathBuf>, n: usize, resolution: usize, seed: u64) -> Result<Dataset> {
    match file {
        Some(p) => load_dataset(p),
        None => make_dataset(n, resolution, seed),
    }
}

fn is_captioner_checkpoint(path: &Path) -> Result<bool> {
    let entries = checkpoint::load(path)?;
    Ok(entries.iter().any(|(n, _)| n.starts_with("cap.")))
}

fn write_report(path: &Path, report: &EvalReport) -> Result<()> {
    let text = serde_json::to_string_pretty(report)
        .map_err(|e| Error::InvalidArgument(format!("report: {e}")))?;
    std::fs::write(path, text)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn attack_cmd(
    ckpt: &Path,
    data_path: &Path,
    kind: AttackKind,
    loss: LossKind,
    epsilon: f64,
    steps: usize,
    target: Option<String>,
    samples: usize,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let data = load_dataset(data_path)?;
    let started = Instant::now();
    let run_id = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let mut report = EvalReport {
        run_id,
        robust: None,
        caption: None,
        targeted: None,
        wall_clock_seconds: 0.0,
    };
    let captioner = is_captioner_checkpoint(ckpt)?;
    match kind {
        AttackKind::Targeted => {
            if !captioner {
                return Err(Error::InvalidArgument("targeted attacks need a captioner checkpoint".into()));
            }
            let (cap, vision) = artifacts::load_captioner(ckpt)?;
            let targets = match target {
                Some(t) => vec![t],
                None => ATTACK_TARGETS.iter().map(|s| s.to_string()).collect(),
            };
            let cfg = TargetedEvalConfig {
                epsilon,
                attack_steps: steps,
                samples_per_target: samples,
                seed,
                targets,
            };
            report.targeted = Some(eval_targeted_asr(&cap, &vision, &data, &cfg)?);
        }
        AttackKind::Fgsm | AttackKind::Pgd | AttackKind::Apgd if captioner => {
            let (cap, vision) = artifacts::load_captioner(ckpt)?;
            let cfg = CaptionEvalConfig { epsilon, attack_steps: steps, samples, seed };
            report.caption = Some(eval_caption_robustness(&cap, &vision, &data, &cfg)?);
        }
        AttackKind::Fgsm | AttackKind::Pgd | AttackKind::Apgd => {
            let enc = artifacts::load_encoder(ckpt)?;
            let head = default_zero_shot_head(&enc)?;
            let spec = EvalAttackSpec {
                algo: match kind {
                    AttackKind::Apgd => AttackAlgo::Apgd,
                    _ => AttackAlgo::Pgd,
                },
                objective: match loss {
                    LossKind::Ce => AttackObjective::Ce,
                    LossKind::Dlr => AttackObjective::Dlr,
                },
                steps: if matches!(kind, AttackKind::Fgsm) { 1 } else { steps },
            };
            let cfg = RobustEvalConfig { epsilon, samples, seed, stages: vec![spec] };
            report.robust = Some(eval_robust_accuracy(&enc, &head, &data, &cfg)?);
        }
    }
    report.wall_clock_seconds = started.elapsed().as_secs_f64();
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    write_report(out, &report)?;
    println!("{}", out.display());
    Ok(())
}

fn eval_cmd(
    config: &Path,
    run_dir: &Path,
    ckpt: &Path,
    label: Option<String>,
    epsilon: Option<f64>,
) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let dir = RunDir::create(run_dir)?;
    dir.write_resolved_config(&cfg.resolved_toml()?)?;
    let e = cfg.eval_section();
    let started = Instant::now();
    let captioner = is_captioner_checkpoint(ckpt)?;
    let mut report = EvalReport {
        run_id: dir.run_id.clone(),
        robust: None,
        caption: None,
        targeted: None,
        wall_clock_seconds: 0.0,
    };
    let label = label.unwrap_or_else(|| if captioner { "captioner".into() } else { "encoder".into() });
    if captioner {
        let (cap, vision) = artifacts::load_captioner(ckpt)?;
        let data = load_eval_dataset(e.data_file.as_ref(), e.data_n, vision.resolution, e.data_seed)?;
        let caption_cfg = CaptionEvalConfig {
            epsilon: e.caption_epsilon,
            attack_steps: e.caption_steps,
            samples: e.caption_samples,
            seed: e.seed,
        };
        let caption = eval_caption_robustness(&cap, &vision, &data, &caption_cfg)?;
        dir.append_metric(&label, "clean_token_accuracy", caption.clean_token_accuracy)?;
        dir.append_metric(&label, "adv_token_accuracy", caption.adv_token_accuracy)?;
        let targeted_cfg = TargetedEvalConfig::new(
            e.targeted_epsilon,
            e.targeted_steps,
            e.targeted_samples_per_target,
            e.seed,
        );
        let targeted = eval_targeted_asr(&cap, &vision, &data, &targeted_cfg)?;
        dir.append_metric(&label, "asr", targeted.asr)?;
        dir.append_metric(&label, "helpfulness_token_accuracy", targeted.helpfulness_token_accuracy)?;
        report.caption = Some(caption);
        report.targeted = Some(targeted);
    } else {
        let enc = artifacts::load_encoder(ckpt)?;
        let head = default_zero_shot_head(&enc)?;
        let data =
            load_eval_dataset(e.data_file.as_ref(), e.data_n, enc.vision.resolution, e.data_seed)?;
        let cfg_r = RobustEvalConfig {
            epsilon: epsilon.unwrap_or(e.epsilon),
            samples: e.samples,
            seed: e.seed,
            stages: default_eval_stages(e.steps),
        };
        let robust = eval_robust_accuracy(&enc, &head, &data, &cfg_r)?;
        dir.append_metric(&label, "clean_accuracy", robust.clean_accuracy)?;
        dir.append_metric(&label, "robust_accuracy", robust.robust_accuracy)?;
        report.robust = Some(robust);
    }
    report.wall_clock_seconds = started.elapsed().as_secs_f64();
    let path = dir.report_path(&format!("eval-{label}.json"));
    write_report(&path, &report)?;
    println!("{}", path.display());
    Ok(())
}

/// Trailing integer of an attack stage name, e.g. "apgd-ce-20" -> 20.
fn steps_in_name(name: &str) -> usize {
    name.rsplit('-').next().and_then(|s| s.parse().ok()).unwrap_or(0)
}

struct RunReports {
    run_id: String,
    reports: Vec<EvalReport>,
}

fn collect_reports(runs: &[PathBuf]) -> Result<Vec<RunReports>> {
    let mut out = Vec::new();
    for run in runs {
        let reports_dir = run.join("reports");
        let mut files: Vec<PathBuf> = std::fs::read_dir(&reports_dir)
            .map_err(|_| Error::Io(format!("missing report directory {}", reports_dir.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Io(format!("no report files under {}", reports_dir.display())));
        }
        let run_id = run
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".to_string());
        let mut reports = Vec::new();
        for f in &files {
            let text = std::fs::read_to_string(f)
                .map_err(|_| Error::Io(format!("missing report file {}", f.display())))?;
            let r: EvalReport = serde_json::from_str(&text)
                .map_err(|e| Error::InvalidArgument(format!("{}: {e}", f.display())))?;
            reports.push(r);
        }
        out.push(RunReports { run_id, reports });
    }
    Ok(out)
}

fn csv_row(metric: &str, attack: &str, epsilon: f64, steps: usize, value: f64, seed: u64) -> String {
    format!("{metric},{attack},{epsilon:.6},{steps},{value:.6},{seed}\n")
}

fn run_csv(rr: &RunReports) -> String {
    let mut out = String::from("metric,attack,epsilon,steps,value,seed\n");
    for r in &rr.reports {
        if let Some(ro) = &r.robust {
            let attack = ro.stage_names.join("+");
            let steps = ro.stage_names.iter().map(|n| steps_in_name(n)).max().unwrap_or(0);
            out.push_str(&csv_row("clean_accuracy", "none", 0.0, 0, ro.clean_accuracy, ro.seed));
            out.push_str(&csv_row("robust_accuracy", &attack, ro.epsilon, steps, ro.robust_accuracy, ro.seed));
        }
        if let Some(c) = &r.caption {
            out.push_str(&csv_row("clean_token_accuracy", "none", 0.0, 0, c.clean_token_accuracy, c.seed));
            out.push_str(&csv_row("adv_token_accuracy", "apgd-ce", c.epsilon, c.attack_steps, c.adv_token_accuracy, c.seed));
            out.push_str(&csv_row("clean_answer_nll", "none", 0.0, 0, c.clean_answer_nll, c.seed));
            out.push_str(&csv_row("adv_answer_nll", "apgd-ce", c.epsilon, c.attack_steps, c.adv_answer_nll, c.seed));
        }
        if let Some(t) = &r.targeted {
            out.push_str(&csv_row("asr", "targeted", t.epsilon, t.attack_steps, t.asr, t.seed));
            out.push_str(&csv_row(
                "helpfulness_token_accuracy",
                "targeted",
                t.epsilon,
                t.attack_steps,
                t.helpfulness_token_accuracy,
                t.seed,
            ));
            for pt in &t.per_target {
                let slug = pt.target.replace(' ', "-");
                out.push_str(&csv_row(
                    &format!("asr:{slug}"),
                    "targeted",
                    t.epsilon,
                    t.attack_steps,
                    pt.success_rate,
                    t.seed,
                ));
            }
        }
    }
    out
}

fn report_cmd(out: &Path, runs: &[PathBuf]) -> Result<()> {
    if runs.is_empty() {
        return Err(Error::InvalidArgument("report needs at least one run directory".into()));
    }
    let collected = collect_reports(runs)?;
    let figures_dir = out.join("figures");
    let tables_dir = out.join("tables");
    std::fs::create_dir_all(&figures_dir)?;
    std::fs::create_dir_all(&tables_dir)?;

    for rr in &collected {
        std::fs::write(tables_dir.join(format!("{}.csv", rr.run_id)), run_csv(rr))?;
    }

    // Accuracy vs epsilon: the clean point sits at epsilon 0, then one
    // robust point per robust report, sorted by epsilon.
    let mut series = Vec::new();
    for rr in &collected {
        let mut robust: Vec<_> = rr.reports.iter().filter_map(|r| r.robust.as_ref()).collect();
        robust.sort_by(|a, b| a.epsilon.total_cmp(&b.epsilon));
        if robust.is_empty() {
            continue;
        }
        let mut pts = vec![(0.0, robust[0].clean_accuracy)];
        pts.extend(robust.iter().map(|r| (r.epsilon, r.robust_accuracy)));
        series.push((rr.run_id.clone(), pts));
    }
    std::fs::write(
        figures_dir.join("accuracy-vs-epsilon.svg"),
        figures::line_chart("Zero-shot accuracy under attack", "epsilon", "accuracy", &series),
    )?;

    let bars: Vec<(String, f64)> = collected
        .iter()
        .filter_map(|rr| {
            rr.reports
                .iter()
                .filter_map(|r| r.targeted.as_ref())
                .next_back()
                .map(|t| (rr.run_id.clone(), t.asr))
        })
        .collect();
    std::fs::write(
        figures_dir.join("asr.svg"),
        figures::bar_chart("Targeted attack success rate", "ASR", &bars),
    )?;

    let points: Vec<(String, f64, f64)> = collected
        .iter()
        .filter_map(|rr| {
            let mut robust: Vec<_> = rr.reports.iter().filter_map(|r| r.robust.as_ref()).collect();
            robust.sort_by(|a, b| a.epsilon.total_cmp(&b.epsilon));
            robust.first().map(|r| (rr.run_id.clone(), r.clean_accuracy, r.robust_accuracy))
        })
        .collect();
    std::fs::write(
        figures_dir.join("clean-vs-robust.svg"),
        figures::scatter("Clean vs robust accuracy", "clean accuracy", "robust accuracy", &points),
    )?;

    println!("{}", out.display());
    Ok(())
}
