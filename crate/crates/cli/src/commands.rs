use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use gridner::corpus::load::{read_raw_corpus, records_from_raw};
use gridner::corpus::stats::match_split_combinations;
use gridner::corpus::{
    build_pipeline_vocab, load_corpus, mlm_corpus, validate, InstanceOptions, LabelScheme, SentenceRecord,
};
use gridner::decode_eval::{evaluate_corpus, predict as predict_record, GoldOracle, GridScorer, ReportFormat};
use gridner::diffcore::checks::{op_checks, OP_TOLERANCE};
use gridner::diffcore::fault::{with_fault, FaultSite};
use gridner::diffcore::GradCheckReport;
use gridner::model::{end_to_end_check, Model, END_TO_END_TOLERANCE};
use gridner::train::{finetune, load_checkpoint, mlm_pretrain, save_checkpoint, Checkpoint, CheckpointMeta};
use serde_json::json;

use crate::config::RunConfig;
use crate::Failure;

fn write(path: &Path, contents: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Failure::usage(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, contents).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

fn pretty(v: &impl serde::Serialize) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

/// Loads a corpus, listing every validation violation before failing.
fn load_checked(path: &Path) -> Result<Vec<SentenceRecord>, Failure> {
    let raw = read_raw_corpus(path)?;
    let mut listing = String::new();
    let mut n = 0;
    for (i, r) in raw.iter().enumerate() {
        for v in validate(r) {
            n += 1;
            let _ = writeln!(listing, "{}: record {i}: {v}", path.display());
        }
    }
    if n > 0 {
        eprint!("{listing}");
        return Err(Failure::usage(format!("{n} validation violation(s) in {}", path.display())));
    }
    Ok(records_from_raw(raw)?)
}

pub fn stats(data: &Path, dev: Option<&Path>, test: Option<&Path>, out: &Path) -> Result<(), Failure> {
    let train = load_checked(data)?;
    let dev = dev.map(load_checked).transpose()?;
    let test = test.map(load_checked).transpose()?;
    let mut combos = Vec::new();
    if dev.is_none() && test.is_none() {
        combos.push(("data".to_string(), train.clone()));
    } else {
        combos.push(("train".to_string(), train.clone()));
        let mut acc = train;
        if let Some(d) = dev {
            acc.extend(d);
            combos.push(("train+dev".to_string(), acc.clone()));
        }
        if let Some(t) = test {
            acc.extend(t);
            combos.push(("all".to_string(), acc));
        }
    }
    let splits = match_split_combinations(combos);
    let mut md = String::new();
    for (name, s) in &splits.combinations {
        let _ = writeln!(md, "## {name}\n\n{}", s.to_markdown());
    }
    match &splits.matched {
        Some(name) => {
            let _ = writeln!(md, "Reference V1 figures reproduced by: {name}");
        }
        None => {
            let _ = writeln!(md, "No split combination reproduces the reference V1 figures.");
        }
    }
    write(&out.join("stats.json"), &pretty(&splits))?;
    write(&out.join("stats.md"), &md)?;
    for (name, s) in &splits.combinations {
        println!(
            "{name}: {} records, {} entities ({} flat, {} nested, {:.2}% nested)",
            s.records, s.total, s.nesting.flat, s.nesting.nested, s.nesting.nested_percent
        );
    }
    println!("reference match: {}", splits.matched.as_deref().unwrap_or("none"));
    Ok(())
}

fn load_optional(path: Option<&PathBuf>) -> Result<Vec<SentenceRecord>, Failure> {
    Ok(match path {
        Some(p) => load_corpus(p)?,
        None => Vec::new(),
    })
}

pub fn pretrain(config: &Path, init: Option<&Path>) -> Result<(), Failure> {
    let cfg = RunConfig::load(config)?;
    let mut records = load_corpus(cfg.train_file()?)?;
    records.extend(load_optional(cfg.data.dev_file.as_ref())?);
    let (vocab, mut model, start_step) = match init {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            let mut model = Model::new(cfg.model.clone(), ck.header.vocab.len(), cfg.seed)?;
            ck.apply_to(&mut model)?;
            log::info!("resuming from {} at step {}", p.display(), ck.header.step);
            (ck.header.vocab, model, ck.header.step)
        }
        None => {
            let vocab = build_pipeline_vocab(&records, cfg.vocab_min_freq)?;
            let model = Model::new(cfg.model.clone(), vocab.len(), cfg.seed)?;
            (vocab, model, 0)
        }
    };
    let sequences = mlm_corpus(&records, &vocab, cfg.model.max_len)?;
    log::info!("masked-LM pre-training on {} sequences", sequences.len());
    let report = mlm_pretrain(&mut model, &sequences, &cfg.train)?;
    let step = start_step + report.steps;
    let ckpt = cfg.data.checkpoint_dir.join("pretrain.ckpt");
    let meta = CheckpointMeta {
        step,
        dev_metric: None,
        extra: json!({ "stage": "pretrain", "run_config": cfg.echo() }),
    };
    std::fs::create_dir_all(&cfg.data.checkpoint_dir)
        .map_err(|e| Failure::usage(format!("{}: {e}", cfg.data.checkpoint_dir.display())))?;
    save_checkpoint(&ckpt, &model, &vocab, &meta)?;
    let log = json!({
        "start_step": start_step,
        "step": step,
        "epoch_losses": report.epoch_losses,
        "skipped": report.skipped,
    });
    write(&cfg.data.report_dir.join("pretrain_log.json"), &pretty(&log))?;
    println!("wrote {} (step {step})", ckpt.display());
    Ok(())
}

pub fn train(config: &Path, init: Option<&Path>) -> Result<(), Failure> {
    let cfg = RunConfig::load(config)?;
    let train = load_corpus(cfg.train_file()?)?;
    let dev = load_optional(cfg.data.dev_file.as_ref())?;
    let (vocab, model) = match init {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            let mut model = Model::new(cfg.model.clone(), ck.header.vocab.len(), cfg.seed)?;
            let n = ck.apply_encoder_to(&mut model)?;
            log::info!("initialized {n} encoder tensors from {}", p.display());
            (ck.header.vocab, model)
        }
        None => {
            let vocab = build_pipeline_vocab(&train, cfg.vocab_min_freq)?;
            let model = Model::new(cfg.model.clone(), vocab.len(), cfg.seed)?;
            (vocab, model)
        }
    };
    let mut model = model;
    log::info!(
        "fine-tuning {} parameters on {} records ({} dev)",
        model.num_parameters(),
        train.len(),
        dev.len()
    );
    let report = finetune(&mut model, &train, &dev, &vocab, &cfg.instances, &cfg.train)?;
    let (train_metrics, _) = evaluate_corpus(&model, &train, &vocab, &cfg.instances)?;
    log::info!(
        "train micro P {:.4} R {:.4} F1 {:.4}",
        train_metrics.micro.precision,
        train_metrics.micro.recall,
        train_metrics.micro.f1
    );
    std::fs::create_dir_all(&cfg.data.checkpoint_dir)
        .map_err(|e| Failure::usage(format!("{}: {e}", cfg.data.checkpoint_dir.display())))?;
    let ckpt = cfg.data.checkpoint_dir.join("best.ckpt");
    let meta = CheckpointMeta {
        step: report.steps,
        dev_metric: report.best_dev_f1,
        extra: json!({ "stage": "train", "run_config": cfg.echo() }),
    };
    save_checkpoint(&ckpt, &model, &vocab, &meta)?;
    let log = json!({
        "run_config": cfg.echo(),
        "finetune": report,
        "train_micro": train_metrics.micro,
    });
    write(&cfg.data.report_dir.join("train_log.json"), &pretty(&log))?;
    println!(
        "wrote {} after {} epochs; train micro F1 {:.4}",
        ckpt.display(),
        report.history.len(),
        train_metrics.micro.f1
    );
    Ok(())
}

pub fn eval(config: &Path, checkpoint: Option<&Path>, data: &Path, oracle: bool) -> Result<(), Failure> {
    let cfg = RunConfig::load(config)?;
    let records = load_corpus(data)?;
    let ck = checkpoint.map(load_checkpoint).transpose()?;
    let (mut report, preds) = if oracle {
        let vocab = match &ck {
            Some(ck) => ck.header.vocab.clone(),
            None => build_pipeline_vocab(&records, cfg.vocab_min_freq)?,
        };
        evaluate_corpus(&GoldOracle, &records, &vocab, &cfg.instances)?
    } else {
        let ck = ck.expect("clap requires --checkpoint without --oracle");
        let mut model = Model::new(cfg.model.clone(), ck.header.vocab.len(), cfg.seed)?;
        ck.apply_to(&mut model)?;
        evaluate_corpus(&model, &records, &ck.header.vocab, &cfg.instances)?
    };
    report.config = cfg.echo();
    let stem = data.file_stem().map_or("data".into(), |s| s.to_string_lossy().into_owned());
    let dir = &cfg.data.report_dir;
    write(&dir.join(format!("{stem}.metrics.json")), &report.render(ReportFormat::Json))?;
    write(&dir.join(format!("{stem}.metrics.md")), &report.render(ReportFormat::Markdown))?;
    write(&dir.join(format!("{stem}.predictions.json")), &pretty(&preds))?;
    println!(
        "micro P {} R {} F1 {}; reports in {}",
        gridner::decode_eval::pct(report.micro.precision),
        gridner::decode_eval::pct(report.micro.recall),
        gridner::decode_eval::pct(report.micro.f1),
        dir.display()
    );
    Ok(())
}

/// Instance options recorded by `train`, or defaults sized to the model.
fn stored_instance_options(ck: &Checkpoint, model: &Model) -> InstanceOptions {
    ck.header
        .extra
        .get("run_config")
        .and_then(|c| c.get("instances"))
        .and_then(|v| serde_json::from_value(v.clone()).ok())
        .unwrap_or(InstanceOptions {
            max_len: model.config.max_len,
            pad_to: None,
            label_scheme: if model.config.n_classes == 2 {
                LabelScheme::Binary
            } else {
                LabelScheme::PerType
            },
        })
}

fn predict_text(text: &str, scorer: &dyn GridScorer, ck: &Checkpoint, opts: &InstanceOptions) -> Result<String, Failure> {
    if text.is_empty() {
        return Ok("[]".into());
    }
    let record = SentenceRecord::new(text, Vec::new());
    let p = predict_record(&record, scorer, &ck.header.vocab, opts)?;
    if p.truncation.truncated_instances > 0 {
        log::warn!("text of {} characters truncated to max_len {}", record.char_len(), opts.max_len);
    }
    Ok(serde_json::to_string(&p.entities).expect("serializable"))
}

pub fn predict(checkpoint: &Path, text: Option<&str>, input: Option<&Path>) -> Result<(), Failure> {
    let ck = load_checkpoint(checkpoint)?;
    let model = ck.build_model()?;
    let opts = stored_instance_options(&ck, &model);
    if let Some(t) = text {
        println!("{}", predict_text(t, &model, &ck, &opts)?);
    }
    if let Some(p) = input {
        let contents = std::fs::read_to_string(p).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?;
        for line in contents.lines() {
            println!("{}", predict_text(line.trim_end_matches('\r'), &model, &ck, &opts)?);
        }
    }
    Ok(())
}

const END_TO_END: &str = "end_to_end";

pub fn gradcheck(op: Option<&str>, fault: Option<&str>, seed: u64) -> Result<(), Failure> {
    let fault: Option<FaultSite> = fault.map(str::parse).transpose().map_err(Failure::usage)?;
    let checks = op_checks(seed);
    let mut names: Vec<&str> = checks.iter().map(|c| c.name).collect();
    names.push(END_TO_END);
    if let Some(op) = op {
        if !names.contains(&op) {
            return Err(Failure::usage(format!("unknown op '{op}'; expected one of: {}", names.join(", "))));
        }
    }
    let selected = |name: &str| op.is_none_or(|o| o == name);
    let armed = |f: &dyn Fn() -> gridner::Result<GradCheckReport>| match fault {
        Some(site) => with_fault(site, f),
        None => f(),
    };
    let started = Instant::now();
    let mut rows: Vec<(&str, f64, f64)> = Vec::new();
    for c in checks.iter().filter(|c| selected(c.name)) {
        rows.push((c.name, armed(&|| c.run())?.max_rel_error, OP_TOLERANCE));
    }
    if selected(END_TO_END) {
        rows.push((END_TO_END, armed(&end_to_end_check)?.max_rel_error, END_TO_END_TOLERANCE));
    }
    println!("{:<22} {:>12} {:>10}  result", "op", "max_rel_err", "tolerance");
    let mut failed = 0;
    for (name, err, tol) in &rows {
        let pass = *err < *tol;
        failed += usize::from(!pass);
        println!("{name:<22} {err:>12.3e} {tol:>10.0e}  {}", if pass { "pass" } else { "FAIL" });
    }
    println!("{} rows, {failed} failed, {:.1}s", rows.len(), started.elapsed().as_secs_f64());
    if failed > 0 {
        return Err(Failure::check(format!("{failed} gradient check(s) failed")));
    }
    Ok(())
}
