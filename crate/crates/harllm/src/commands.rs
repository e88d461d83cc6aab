//! CLI argument parsing, subcommand orchestration and run outputs.
//!
//! Every run writes into one output directory and finishes by writing
//! `run.json` (config digest + seed). A directory with a manifest is only
//! overwritten under --force; a run that aborts removes its partial output.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::backbone::lora_param_count;
use crate::checks;
use crate::config::{DataSource, ExperimentConfig, LodoConfig};
use crate::data::recording::{load_recordings, LabelVocab, Recording};
use crate::data::synth::synth_generate;
use crate::data::windows::{apply_stats, compute_stats_per_domain, make_windows, WindowSet};
use crate::data::{
    save_dataset, split_and_subsample, subsample_per_class, DatasetManifest, NormalizationInfo,
    PreparedDataset, SplitName, DATASET_VERSION,
};
use crate::metrics::EvalReport;
use crate::model::Model;
use crate::rng::SeedStream;
use crate::train::{evaluate_model, fit, write_train_log, FitReport};
use crate::{Error, Result};

pub const RUN_MANIFEST: &str = "run.json";

#[derive(Parser)]
#[command(name = "harllm", version, about = "Inertial activity recognition on a frozen language-model backbone")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    /// JSON experiment config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overwrite a previous run's outputs.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Materialize windows, splits and normalization statistics.
    Prepare,
    /// Train on the prepared dataset and evaluate on its test split.
    Train,
    /// Label-fraction sweep over (fraction, seed) cells.
    Sweep,
    /// Hold one domain out: source training, zero-shot transfer, fine-tuning.
    Lodo,
    /// Self-checks: parameter accounting, gradients, adapter algebra.
    Audit,
    /// Evaluate a saved checkpoint on one split of the prepared dataset.
    Eval {
        /// Directory written by `train` (model.tensors + model.json).
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
}

pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => {
            let cfg = ExperimentConfig::default();
            cfg.validate()?;
            cfg
        }
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = Some(out.clone());
    }
    match cli.cmd {
        Cmd::Prepare => cmd_prepare(&cfg, cli.force),
        Cmd::Train => cmd_train(&cfg, cli.force),
        Cmd::Sweep => cmd_sweep(&cfg, cli.force),
        Cmd::Lodo => cmd_lodo(&cfg, cli.force),
        Cmd::Audit => cmd_audit(&cfg),
        Cmd::Eval { checkpoint, split } => cmd_eval(&cfg, &checkpoint, &split, cli.force),
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_sha256: String,
    pub seed: u64,
}

/// Claimed output directory. Dropping it before `commit` wipes whatever
/// was written, so aborted runs leave nothing behind.
struct RunDir {
    path: PathBuf,
    committed: bool,
}

impl RunDir {
    fn claim(path: &Path, force: bool) -> Result<RunDir> {
        if path.exists() && path.read_dir()?.next().is_some() {
            if !path.join(RUN_MANIFEST).exists() {
                return Err(Error::config(format!(
                    "output directory {} is not empty and holds no run manifest; refusing to touch it",
                    path.display()
                )));
            }
            if !force {
                return Err(Error::config(format!(
                    "output directory {} already contains results (rerun with --force)",
                    path.display()
                )));
            }
            std::fs::remove_dir_all(path)?;
        }
        std::fs::create_dir_all(path)?;
        Ok(RunDir { path: path.to_path_buf(), committed: false })
    }

    fn path(&self) -> &Path {
        &self.path
    }

    fn commit(mut self, command: &str, cfg: &ExperimentConfig) -> Result<()> {
        let manifest = RunManifest {
            command: command.to_string(),
            config_sha256: cfg.sha256_hex(),
            seed: cfg.seed,
        };
        std::fs::write(
            self.path.join(RUN_MANIFEST),
            serde_json::to_vec_pretty(&manifest)?,
        )?;
        self.committed = true;
        Ok(())
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        if !self.committed {
            let _ = std::fs::remove_dir_all(&self.path);
        }
    }
}

fn resolve_out(cfg: &ExperimentConfig) -> Result<PathBuf> {
    cfg.out
        .clone()
        .ok_or_else(|| Error::config("no output directory: pass --out or set `out`"))
}

fn resolve_prepared(cfg: &ExperimentConfig) -> Result<&Path> {
    cfg.data
        .prepared
        .as_deref()
        .ok_or_else(|| Error::config("data.prepared must point at a prepared dataset directory"))
}

fn parse_split(name: &str) -> Result<SplitName> {
    match name {
        "train" => Ok(SplitName::Train),
        "val" => Ok(SplitName::Val),
        "test" => Ok(SplitName::Test),
        other => Err(Error::config(format!(
            "unknown split `{other}` (expected train, val or test)"
        ))),
    }
}

fn load_source_recordings(cfg: &ExperimentConfig, seeds: &SeedStream) -> Result<(Vec<Recording>, f64)> {
    match &cfg.data.source {
        DataSource::Synth { spec } => Ok((synth_generate(spec, seeds)?, spec.rate)),
        DataSource::Csv { dir, labels } => {
            let vocab = LabelVocab::new(labels)?;
            let recs = load_recordings(dir, &vocab)?;
            match cfg.data.rate {
                Some(rate) => Ok((
                    recs.iter().map(|r| r.resample_linear(rate)).collect(),
                    rate,
                )),
                None => {
                    let rate = recs[0].rate;
                    if recs.iter().any(|r| (r.rate - rate).abs() > 1e-9) {
                        return Err(Error::config(
                            "recordings have mixed sampling rates; set data.rate to resample",
                        ));
                    }
                    Ok((recs, rate))
                }
            }
        }
    }
}

fn cmd_prepare(cfg: &ExperimentConfig, force: bool) -> Result<()> {
    let out = resolve_out(cfg)?;
    let dir = RunDir::claim(&out, force)?;
    let seeds = SeedStream::new(cfg.seed);
    let vocab = LabelVocab::new(&cfg.data.source.label_names())?;
    let (recordings, rate) = load_source_recordings(cfg, &seeds)?;

    let subjects: Vec<String> = recordings
        .iter()
        .map(|r| r.subject.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let domains: Vec<String> = recordings
        .iter()
        .map(|r| r.domain.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();

    let mut set = WindowSet::new(cfg.data.w);
    for rec in &recordings {
        let sid = subjects.binary_search(&rec.subject).expect("enumerated") as u32;
        let did = domains.binary_search(&rec.domain).expect("enumerated") as u32;
        make_windows(rec, cfg.data.w, cfg.data.overlap, sid, did, &mut set)?;
    }
    if set.is_empty() {
        return Err(Error::config(format!(
            "no windows produced: every recording is shorter than w = {}",
            cfg.data.w
        )));
    }

    let splits = split_and_subsample(&set, &cfg.data.split, vocab.len(), &seeds)?;
    let stats_opt = compute_stats_per_domain(&set, &splits.train, domains.len());
    apply_stats(&mut set, &stats_opt)?;
    let per_domain = stats_opt
        .into_iter()
        .map(|s| s.expect("apply_stats verified presence"))
        .collect();

    let manifest = DatasetManifest {
        version: DATASET_VERSION,
        w: cfg.data.w,
        channels: 6,
        count: set.len(),
        rate,
        overlap: cfg.data.overlap,
        seed: cfg.seed,
        labels: vocab.names().to_vec(),
        subjects,
        domains,
        normalization: NormalizationInfo::Dataset { per_domain },
    };
    save_dataset(dir.path(), &manifest, &set, &splits)?;
    println!(
        "prepared {} windows of {}x6: {} classes, {} domains, {} subjects (train {}, val {}, test {})",
        set.len(),
        cfg.data.w,
        manifest.labels.len(),
        manifest.domains.len(),
        manifest.subjects.len(),
        splits.train.len(),
        splits.val.len(),
        splits.test.len(),
    );
    dir.commit("prepare", cfg)
}

fn build_model(cfg: &ExperimentConfig, vocab: LabelVocab, seeds: &SeedStream) -> Result<Model<f32>> {
    let mut model = Model::new(
        cfg.frontend.clone(),
        cfg.backbone.clone(),
        cfg.lora.clone(),
        vocab,
        seeds,
    )?;
    if let Some(path) = &cfg.backbone_weights {
        model.load_gpt2_backbone(path)?;
    }
    Ok(model)
}

struct SupervisedRun {
    fit: FitReport,
    test: EvalReport,
}

/// Shared protocol core: fit on train/val, evaluate on test.
fn run_supervised(
    cfg: &ExperimentConfig,
    prepared: &PreparedDataset,
    train_set: &WindowSet,
    seeds: &SeedStream,
) -> Result<(Model<f32>, SupervisedRun)> {
    let vocab = LabelVocab::new(&prepared.manifest.labels)?;
    let val_set = prepared.split_set(SplitName::Val, None);
    let test_set = prepared.split_set(SplitName::Test, None);
    let mut model = build_model(cfg, vocab, seeds)?;
    let fit_report = fit(&mut model, train_set, &val_set, &cfg.train, seeds)?;
    let test = evaluate_model(&model, &test_set, cfg.train.batch_size)?;
    Ok((model, SupervisedRun { fit: fit_report, test }))
}

fn print_param_summary(model: &Model<f32>) {
    let table = model.param_table();
    let trainable: usize = table.iter().filter(|(_, _, t)| *t).map(|(_, n, _)| n).sum();
    let frozen: usize = table.iter().filter(|(_, _, t)| !*t).map(|(_, n, _)| n).sum();
    for (name, count, is_trainable) in &table {
        let status = if *is_trainable { "trainable" } else { "frozen" };
        println!("  {name:<9} {count:>12}  {status}");
    }
    println!("  trainable {trainable}, frozen {frozen}");
}

fn cmd_train(cfg: &ExperimentConfig, force: bool) -> Result<()> {
    let out = resolve_out(cfg)?;
    let dir = RunDir::claim(&out, force)?;
    let prepared = PreparedDataset::open(resolve_prepared(cfg)?)?;
    let seeds = SeedStream::new(cfg.seed);
    let train_set = prepared.split_set(SplitName::Train, None);
    let (model, run) = run_supervised(cfg, &prepared, &train_set, &seeds)?;

    model.save(&dir.path().join("model"))?;
    write_train_log(&dir.path().join("train_log.csv"), &run.fit.log)?;
    std::fs::write(
        dir.path().join("eval.json"),
        serde_json::to_vec_pretty(&run.test)?,
    )?;

    print_param_summary(&model);
    println!(
        "best epoch {} (val weighted F1 {:.4})",
        run.fit.best_epoch, run.fit.best_val_weighted_f1
    );
    println!(
        "test weighted F1 {:.4}, accuracy {:.4}",
        run.test.weighted_f1, run.test.accuracy
    );
    dir.commit("train", cfg)
}

fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_sweep(cfg: &ExperimentConfig, force: bool) -> Result<()> {
    let out = resolve_out(cfg)?;
    let dir = RunDir::claim(&out, force)?;
    let prepared = PreparedDataset::open(resolve_prepared(cfg)?)?;
    let k = prepared.n_classes();
    let train_indices = prepared.split_indices(SplitName::Train).to_vec();

    let mut rows = Vec::new();
    for &fraction in &cfg.sweep.fractions {
        for &seed in &cfg.sweep.seeds {
            let cell = SeedStream::new(seed);
            let labeled = subsample_per_class(
                &train_indices,
                prepared.window_set(),
                fraction,
                k,
                &cell,
            )?;
            let train_set = prepared.window_set().select(&labeled);
            let (_, run) = run_supervised(cfg, &prepared, &train_set, &cell)?;
            println!(
                "sweep fraction {fraction} seed {seed}: {} labeled windows, test weighted F1 {:.4}",
                labeled.len(),
                run.test.weighted_f1
            );
            rows.push(vec![
                format!("{fraction:.6}"),
                seed.to_string(),
                format!("{:.6}", run.test.weighted_f1),
                format!("{:.6}", run.test.accuracy),
            ]);
        }
    }
    write_table(
        &dir.path().join("sweep.csv"),
        &["fraction", "seed", "weighted_f1", "accuracy"],
        &rows,
    )?;
    dir.commit("sweep", cfg)
}

fn resolve_domain(manifest_domains: &[String], name: &str) -> Result<u32> {
    manifest_domains
        .iter()
        .position(|d| d == name)
        .map(|i| i as u32)
        .ok_or_else(|| {
            Error::config(format!(
                "domain `{name}` not in dataset (available: {})",
                manifest_domains.join(", ")
            ))
        })
}

fn cmd_lodo(cfg: &ExperimentConfig, force: bool) -> Result<()> {
    let lodo: &LodoConfig = cfg
        .lodo
        .as_ref()
        .ok_or_else(|| Error::config("lodo section missing from config"))?;
    let out = resolve_out(cfg)?;
    let dir = RunDir::claim(&out, force)?;
    let prepared = PreparedDataset::open(resolve_prepared(cfg)?)?;
    let seeds = SeedStream::new(cfg.seed);
    let vocab = LabelVocab::new(&prepared.manifest.labels)?;
    let k = vocab.len();

    let target_id = resolve_domain(&prepared.manifest.domains, &lodo.target)?;
    let source_ids: Vec<u32> = match &lodo.sources {
        Some(names) => names
            .iter()
            .map(|n| resolve_domain(&prepared.manifest.domains, n))
            .collect::<Result<_>>()?,
        None => (0..prepared.n_domains() as u32)
            .filter(|&d| d != target_id)
            .collect(),
    };
    if source_ids.is_empty() {
        return Err(Error::config("hold-out needs at least one source domain"));
    }

    // Stage 1: the target's train and val splits stay unopened.
    let src_train = prepared.split_set(SplitName::Train, Some(&source_ids));
    let src_val = prepared.split_set(SplitName::Val, Some(&source_ids));
    let mut pretrained = build_model(cfg, vocab, &seeds)?;
    let stage1 = fit(&mut pretrained, &src_train, &src_val, &cfg.train, &seeds)?;
    let tgt_test = prepared.split_set(SplitName::Test, Some(&[target_id]));
    let zero_shot = evaluate_model(&pretrained, &tgt_test, cfg.train.batch_size)?;

    let stage1_log = prepared.access_log();
    for split in ["train", "val"] {
        let banned = format!("{split}/{}", lodo.target);
        if stage1_log.iter().any(|e| e == &banned) {
            return Err(Error::Eval(format!(
                "stage 1 opened `{banned}`; the held-out domain leaked into training"
            )));
        }
    }
    std::fs::write(dir.path().join("access_log_stage1.txt"), stage1_log.join("\n") + "\n")?;
    pretrained.save(&dir.path().join("pretrained"))?;
    println!(
        "stage 1: trained on {} source windows, best val weighted F1 {:.4}",
        src_train.len(),
        stage1.best_val_weighted_f1
    );
    println!(
        "zero-shot on `{}`: weighted F1 {:.4}, accuracy {:.4}",
        lodo.target, zero_shot.weighted_f1, zero_shot.accuracy
    );

    let mut rows = vec![vec![
        "zero_shot".to_string(),
        format!("{:.6}", 0.0),
        format!("{:.6}", zero_shot.weighted_f1),
        format!("{:.6}", zero_shot.accuracy),
    ]];

    // Stage 2: fine-tune a copy per fraction of target training data.
    let tgt_train_full = prepared.split_set(SplitName::Train, Some(&[target_id]));
    for (fi, &fraction) in lodo.fractions.iter().enumerate() {
        let ft = SeedStream::new(seeds.child_seed(&format!("lodo/ft.{fi}")));
        let all: Vec<usize> = (0..tgt_train_full.len()).collect();
        let mut labeled = subsample_per_class(&all, &tgt_train_full, fraction, k, &ft)?;
        labeled.sort_unstable();
        if labeled.len() < 2 {
            return Err(Error::config(format!(
                "fraction {fraction} keeps {} target window(s); need at least 2",
                labeled.len()
            )));
        }
        use rand::seq::SliceRandom;
        labeled.shuffle(&mut ft.stream("lodo/ft_val"));
        let n_val = ((labeled.len() as f64 * 0.1).round() as usize).clamp(1, labeled.len() - 1);
        let ft_val = tgt_train_full.select(&labeled[..n_val]);
        let ft_train = tgt_train_full.select(&labeled[n_val..]);

        let mut tuned = pretrained.clone();
        fit(&mut tuned, &ft_train, &ft_val, &cfg.train, &ft)?;
        let report = evaluate_model(&tuned, &tgt_test, cfg.train.batch_size)?;
        println!(
            "fine-tune fraction {fraction}: {} target windows, test weighted F1 {:.4}",
            labeled.len(),
            report.weighted_f1
        );
        rows.push(vec![
            "fine_tune".to_string(),
            format!("{fraction:.6}"),
            format!("{:.6}", report.weighted_f1),
            format!("{:.6}", report.accuracy),
        ]);
    }

    std::fs::write(
        dir.path().join("access_log.txt"),
        prepared.access_log().join("\n") + "\n",
    )?;
    write_table(
        &dir.path().join("lodo.csv"),
        &["stage", "fraction", "weighted_f1", "accuracy"],
        &rows,
    )?;
    dir.commit("lodo", cfg)
}

fn audit_gate(name: &str, measured: f64, tolerance: f64) -> Result<()> {
    let ok = measured <= tolerance;
    println!(
        "audit {name}: measured {measured:.3e}, tolerance {tolerance:.1e} ... {}",
        if ok { "ok" } else { "FAILED" }
    );
    if ok {
        Ok(())
    } else {
        Err(Error::CheckFailed {
            name: name.to_string(),
            measured,
            tolerance,
        })
    }
}

fn cmd_audit(cfg: &ExperimentConfig) -> Result<()> {
    let k = cfg.data.source.label_names().len();
    let fe = cfg.frontend.param_count();
    let adapters = lora_param_count(&cfg.backbone, &cfg.lora);
    let head = cfg.frontend.d_llm * k + k;
    let backbone = cfg.backbone.param_count();
    let trainable = fe + adapters + head;
    println!("parameter accounting for the configured geometry ({k} classes):");
    println!("  frontend  {fe:>12}  trainable");
    println!("  adapters  {adapters:>12}  trainable");
    println!("  head      {head:>12}  trainable");
    println!("  backbone  {backbone:>12}  frozen");
    let share = adapters as f64 / backbone as f64;
    println!(
        "  trainable total {trainable}; adapter share of backbone {:.4}%",
        share * 100.0
    );
    if cfg.backbone.vocab_size.is_some() {
        audit_gate("adapter_share_of_backbone", share, 0.01)?;
    }

    let grad = checks::reference_gradient_check()?;
    audit_gate("gradient_check", grad.max_rel_err, checks::GRAD_TOLERANCE)?;
    audit_gate("zero_init_equivalence", checks::zero_init_check()?, 0.0)?;
    audit_gate("merge_equivalence", checks::merge_check(50)?, checks::MERGE_TOLERANCE)?;
    println!("audit passed");
    Ok(())
}

fn cmd_eval(cfg: &ExperimentConfig, checkpoint: &Path, split: &str, force: bool) -> Result<()> {
    let prepared = PreparedDataset::open(resolve_prepared(cfg)?)?;
    let model = Model::<f32>::load(checkpoint)?;
    if model.labels.names() != prepared.manifest.labels {
        return Err(Error::Eval(format!(
            "checkpoint vocabulary {:?} does not match dataset labels {:?}",
            model.labels.names(),
            prepared.manifest.labels
        )));
    }
    let set = prepared.split_set(parse_split(split)?, None);
    let report = evaluate_model(&model, &set, cfg.train.batch_size)?;
    println!(
        "eval {split}: weighted F1 {:.4}, accuracy {:.4} over {} windows",
        report.weighted_f1, report.accuracy, report.total
    );
    if let Some(out) = &cfg.out {
        let dir = RunDir::claim(out, force)?;
        std::fs::write(
            dir.path().join("eval.json"),
            serde_json::to_vec_pretty(&report)?,
        )?;
        dir.commit("eval", cfg)?;
    } else {
        println!("{}", serde_json::to_string_pretty(&report)?);
    }
    Ok(())
}
