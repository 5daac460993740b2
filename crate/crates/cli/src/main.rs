//! Command-line driver: dataset generation, pretraining, fine-tuning,
//! evaluation, ablation grids, and embedding export.
//!
//! Exit codes: 0 success, 2 bad flags/config, 3 missing inputs, 4 runtime
//! failure.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use modcl::config::{apply_overrides, parse_flat, to_flat_string, RunConfig};
use modcl::heads::FusionMode;
use modcl::pipeline::{self, EncoderSet, StageResult};
use modcl::sigdata::{self, generate_dataset, split, Dataset, GenConfig, Modulation, SplitSpec};

#[derive(Parser)]
#[command(name = "modcl", version, about = "Multi-domain contrastive pretraining for radio modulation recognition")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic modulated-signal dataset (.sigds directory).
    Gen(GenArgs),
    /// Run RL-wrapped contrastive pretraining into a run directory.
    Pretrain(RunArgs),
    /// Fine-tune the fusion heads on the labeled support split.
    Finetune(RunDirArgs),
    /// Evaluate the frozen model on the query split and write report.json.
    Eval(RunDirArgs),
    /// Run one ablation axis as a sequence of config-diff runs.
    Ablate(AblateArgs),
    /// Dump concatenated encoder embeddings plus labels for a split.
    ExportEmbeddings(ExportArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Comma-separated scheme list (bpsk,qpsk,8psk,16qam,64qam,pam4,cpfsk,2fsk).
    #[arg(long)]
    classes: String,
    /// Frames per class per SNR level.
    #[arg(long = "per-class")]
    per_class: usize,
    /// SNR levels in dB: `lo:hi:step` or a comma list.
    #[arg(long)]
    snr: String,
    /// Frame length N.
    #[arg(long, default_value_t = 128)]
    len: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Maximum |carrier frequency offset| in cycles/sample.
    #[arg(long = "cfo-max", default_value_t = 0.0025)]
    cfo_max: f64,
    /// Output dataset directory (conventionally *.sigds).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// Flat key=value config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set lambda=1.0` (repeatable).
    #[arg(long = "set")]
    sets: Vec<String>,
    /// Train dataset path (overrides `data.train`).
    #[arg(long)]
    train: Option<PathBuf>,
    /// Test dataset path (overrides `data.test`).
    #[arg(long)]
    test: Option<PathBuf>,
    /// Run directory to create.
    #[arg(long)]
    out: PathBuf,
    /// Overwrite an existing run directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct RunDirArgs {
    /// Run directory produced by `pretrain`.
    #[arg(long)]
    run: PathBuf,
    #[arg(long = "set")]
    sets: Vec<String>,
    /// Overwrite existing stage outputs.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set")]
    sets: Vec<String>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    /// Ablation axis: loss | aug | domains | fusion | encoder.
    #[arg(long)]
    axis: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    run: PathBuf,
    /// Which split to embed: base | support | query.
    #[arg(long)]
    split: String,
    /// Output file prefix; writes `<prefix>.f32` and `<prefix>.labels`.
    #[arg(long)]
    out: PathBuf,
}

enum CliError {
    BadInput(String),
    Missing(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::BadInput(_) => 2,
            CliError::Missing(_) => 3,
            CliError::Runtime(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::BadInput(m) | CliError::Missing(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<modcl::Error> for CliError {
    fn from(e: modcl::Error) -> Self {
        match &e {
            modcl::Error::Config(_) | modcl::Error::InvalidParam(_) | modcl::Error::UnknownModulation(_) => {
                CliError::BadInput(e.to_string())
            }
            modcl::Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => CliError::Missing(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Gen(a) => cmd_gen(a),
        Cmd::Pretrain(a) => cmd_pretrain(a),
        Cmd::Finetune(a) => cmd_finetune(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Ablate(a) => cmd_ablate(a),
        Cmd::ExportEmbeddings(a) => cmd_export(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn parse_snr_list(spec: &str) -> CliResult<Vec<i16>> {
    let bad = |msg: &str| CliError::BadInput(format!("--snr `{spec}`: {msg}"));
    if spec.contains(':') {
        let parts: Vec<&str> = spec.split(':').collect();
        if parts.len() != 3 {
            return Err(bad("expected lo:hi:step"));
        }
        let lo: i16 = parts[0].parse().map_err(|_| bad("bad lo"))?;
        let hi: i16 = parts[1].parse().map_err(|_| bad("bad hi"))?;
        let step: i16 = parts[2].parse().map_err(|_| bad("bad step"))?;
        if step <= 0 || hi < lo {
            return Err(bad("need step > 0 and hi ≥ lo"));
        }
        let mut v = Vec::new();
        let mut s = lo;
        while s <= hi {
            v.push(s);
            s += step;
        }
        Ok(v)
    } else {
        spec.split(',')
            .map(|p| p.trim().parse::<i16>().map_err(|_| bad("bad level")))
            .collect()
    }
}

fn parse_classes(spec: &str) -> CliResult<Vec<Modulation>> {
    spec.split(',')
        .map(|p| Modulation::from_str(p.trim()).map_err(|e| CliError::BadInput(format!("--classes: {e}"))))
        .collect()
}

fn cmd_gen(a: GenArgs) -> CliResult<()> {
    let classes = parse_classes(&a.classes)?;
    let snr = parse_snr_list(&a.snr)?;
    let gen_cfg = GenConfig { cfo_range: (-a.cfo_max, a.cfo_max), ..GenConfig::default() };
    let ds = generate_dataset(&classes, a.per_class, &snr, a.len, a.seed, &gen_cfg)?;
    sigdata::save(&ds, &a.out)?;
    println!(
        "wrote {} frames ({} classes × {} SNR levels × {}) to {}",
        ds.len(),
        classes.len(),
        snr.len(),
        a.per_class,
        a.out.display()
    );
    Ok(())
}

fn load_config(path: Option<&Path>, sets: &[String]) -> CliResult<RunConfig> {
    let base = match path {
        None => RunConfig::default(),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::Missing(format!("config {}: {e}", p.display())))?;
            parse_flat(&text)?
        }
    };
    Ok(apply_overrides(&base, sets)?)
}

fn load_datasets(cfg: &RunConfig) -> CliResult<(Dataset, Dataset)> {
    if cfg.data.train.is_empty() || cfg.data.test.is_empty() {
        return Err(CliError::BadInput(
            "data.train and data.test must be set (config keys or --train/--test flags)".into(),
        ));
    }
    let train = sigdata::load(Path::new(&cfg.data.train)).map_err(|e| missing_or(e, &cfg.data.train))?;
    let test = sigdata::load(Path::new(&cfg.data.test)).map_err(|e| missing_or(e, &cfg.data.test))?;
    Ok((train, test))
}

fn missing_or(e: modcl::Error, path: &str) -> CliError {
    match &e {
        modcl::Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => {
            CliError::Missing(format!("dataset {path}: {e}"))
        }
        _ => CliError::Runtime(format!("dataset {path}: {e}")),
    }
}

fn make_split(cfg: &RunConfig, train: &Dataset, test: &Dataset) -> CliResult<(Dataset, Dataset, Dataset)> {
    let spec = SplitSpec { base_fraction: cfg.base_fraction, shots: cfg.shots, seed: cfg.seed };
    Ok(split(train, test, &spec)?)
}

fn append_metrics(run: &Path, events: &[serde_json::Value]) -> CliResult<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(run.join("metrics.jsonl"))
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    for ev in events {
        writeln!(f, "{ev}").map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    Ok(())
}

fn write_stage(run: &Path, stage: &StageResult, ck_dir: &str, force: bool) -> CliResult<()> {
    let ck_path = run.join("checkpoints").join(ck_dir);
    if ck_path.exists() && !force {
        return Err(CliError::BadInput(format!(
            "{} already exists; pass --force to overwrite",
            ck_path.display()
        )));
    }
    stage.checkpoint.save_dir(&ck_path)?;
    if let Some(agent) = &stage.agent_checkpoint {
        agent.save_dir(&run.join("checkpoints").join("agent"))?;
    }
    append_metrics(run, &stage.metrics)?;
    Ok(())
}

fn cmd_pretrain(a: RunArgs) -> CliResult<()> {
    let mut cfg = load_config(a.config.as_deref(), &a.sets)?;
    if let Some(p) = &a.train {
        cfg.data.train = p.display().to_string();
    }
    if let Some(p) = &a.test {
        cfg.data.test = p.display().to_string();
    }
    let (train, test) = load_datasets(&cfg)?;
    let (base, support, _query) = make_split(&cfg, &train, &test)?;

    if a.out.join("checkpoints").join("encoders").exists() && !a.force {
        return Err(CliError::BadInput(format!(
            "run directory {} already holds a pretraining checkpoint; pass --force",
            a.out.display()
        )));
    }
    fs::create_dir_all(&a.out).map_err(|e| CliError::Runtime(e.to_string()))?;
    fs::write(a.out.join("config.txt"), to_flat_string(&cfg)).map_err(|e| CliError::Runtime(e.to_string()))?;

    let result = pipeline::pretrain(base.unlabeled(), &support, &cfg)?;
    write_stage(&a.out, &result, "encoders", a.force)?;
    println!(
        "pretraining done: {} RL steps, best clustering acc {:.4} (base {} frames, support {})",
        result.rl_trace.len(),
        result.best_acc,
        base.len(),
        support.len()
    );
    for s in &result.rl_trace {
        println!(
            "  step {}: acc {:.4} reward {:+.4} action [{}]",
            s.step,
            s.acc,
            s.reward,
            s.action.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>().join(", ")
        );
    }
    Ok(())
}

fn run_config(run: &Path, sets: &[String]) -> CliResult<RunConfig> {
    let path = run.join("config.txt");
    if !path.exists() {
        return Err(CliError::Missing(format!("{} (not a run directory?)", path.display())));
    }
    load_config(Some(&path), sets)
}

fn load_checkpoint(run: &Path, name: &str) -> CliResult<modcl::checkpoint::Checkpoint> {
    let dir = run.join("checkpoints").join(name);
    if !dir.exists() {
        return Err(CliError::Missing(format!(
            "checkpoint {} missing; run the earlier stage first",
            dir.display()
        )));
    }
    Ok(modcl::checkpoint::Checkpoint::load_dir(&dir)?)
}

fn cmd_finetune(a: RunDirArgs) -> CliResult<()> {
    let cfg = run_config(&a.run, &a.sets)?;
    let (train, test) = load_datasets(&cfg)?;
    let (_base, support, _query) = make_split(&cfg, &train, &test)?;
    let enc_ck = load_checkpoint(&a.run, "encoders")?;
    let result = pipeline::finetune(&enc_ck, &support, &cfg)?;
    write_stage(&a.run, &result, "heads", a.force)?;
    println!(
        "finetuning done: support acc {:.4} → {:.4} over {} epochs ({} shots/class)",
        result.support_acc_curve.first().unwrap(),
        result.support_acc_curve.last().unwrap(),
        cfg.finetune_epochs,
        cfg.shots
    );
    Ok(())
}

fn cmd_eval(a: RunDirArgs) -> CliResult<()> {
    let cfg = run_config(&a.run, &a.sets)?;
    let (train, test) = load_datasets(&cfg)?;
    let (_base, _support, query) = make_split(&cfg, &train, &test)?;
    let enc_ck = load_checkpoint(&a.run, "encoders")?;
    let heads_ck = load_checkpoint(&a.run, "heads")?;
    let report = pipeline::evaluate(&enc_ck, &heads_ck, &query, &cfg)?;
    let body = serde_json::to_vec_pretty(&report).map_err(|e| CliError::Runtime(e.to_string()))?;
    fs::write(a.run.join("report.json"), body).map_err(|e| CliError::Runtime(e.to_string()))?;
    println!("query accuracy: {:.4} over {} frames ({}-shot)", report.overall, report.n_query, report.shots);
    println!("  per class:");
    for (name, s) in &report.per_class {
        println!("    {name:>8}: {:.4} (n={})", s.acc, s.n);
    }
    println!("  per SNR (dB):");
    for (snr, s) in &report.per_snr {
        println!("    {snr:>8}: {:.4} (n={})", s.acc, s.n);
    }
    Ok(())
}

fn cmd_export(a: ExportArgs) -> CliResult<()> {
    let cfg = run_config(&a.run, &[])?;
    let (train, test) = load_datasets(&cfg)?;
    let (base, support, query) = make_split(&cfg, &train, &test)?;
    let ds = match a.split.as_str() {
        "base" => &base,
        "support" => &support,
        "query" => &query,
        other => return Err(CliError::BadInput(format!("unknown split `{other}` (base|support|query)"))),
    };
    let enc_ck = load_checkpoint(&a.run, "encoders")?;
    let encs = EncoderSet::from_checkpoint(&enc_ck)?;

    let mut emb_bytes: Vec<u8> = Vec::new();
    let mut label_bytes: Vec<u8> = Vec::new();
    let chunk = cfg.probe_batch_size.max(1);
    let mut idx = 0usize;
    let mut width = 0usize;
    while idx < ds.len() {
        let end = (idx + chunk).min(ds.len());
        let triples = pipeline::build_triples((idx..end).map(|i| ds.iq(i)), &cfg);
        let refs: Vec<&modcl::domains::DomainTriple> = triples.iter().collect();
        let batches = pipeline::stack_batches(&refs, &encs.active, encs.freq_repr());
        let feats = encs.infer_features(&batches);
        let fused = modcl::heads::fuse(&feats, FusionMode::Concat)?;
        width = fused.dim().1;
        for row in fused.rows() {
            for &v in row.iter() {
                emb_bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        for i in idx..end {
            label_bytes.extend_from_slice(&ds.label(i).to_le_bytes());
        }
        idx = end;
    }
    let emb_path = a.out.with_extension("f32");
    let label_path = a.out.with_extension("labels");
    fs::write(&emb_path, &emb_bytes).map_err(|e| CliError::Runtime(e.to_string()))?;
    fs::write(&label_path, &label_bytes).map_err(|e| CliError::Runtime(e.to_string()))?;
    println!(
        "exported {} × {} embeddings to {} (+ labels at {})",
        ds.len(),
        width,
        emb_path.display(),
        label_path.display()
    );
    Ok(())
}

struct AblationRow {
    label: String,
    sets: Vec<String>,
}

fn ablation_rows(axis: &str) -> CliResult<Vec<AblationRow>> {
    let row = |label: &str, sets: &[&str]| AblationRow {
        label: label.to_string(),
        sets: sets.iter().map(|s| s.to_string()).collect(),
    };
    Ok(match axis {
        "loss" => vec![
            row("loss1", &["loss_terms.inter_orig=false", "loss_terms.inter_aug=false", "loss_terms.inter_cross=false"]),
            row("loss1+2", &["loss_terms.inter_aug=false", "loss_terms.inter_cross=false"]),
            row("loss1+3", &["loss_terms.inter_orig=false", "loss_terms.inter_cross=false"]),
            row("loss1+2+3", &["loss_terms.inter_cross=false"]),
            row("loss1+2+3+4", &["loss_terms.inter_cross=true"]),
        ],
        "aug" => vec![
            row("noise", &["aug.enabled=[true,false,false,false,false]"]),
            row("noise+shift", &["aug.enabled=[true,true,false,false,false]"]),
            row("noise+shift+scale", &["aug.enabled=[true,true,true,false,false]"]),
            row("noise+shift+scale+dropout", &["aug.enabled=[true,true,true,true,false]"]),
            row("all-five", &["aug.enabled=[true,true,true,true,true]"]),
        ],
        "domains" => vec![
            row("T", &["domains=t", "rl_enabled=false"]),
            row("T+F", &["domains=tf", "rl_enabled=false"]),
            row("T+F+C", &["domains=tfc", "rl_enabled=false"]),
            row("T+F+C+R", &["domains=tfc", "rl_enabled=true"]),
        ],
        "fusion" => vec![
            row("A", &["fusion.mode=add", "fusion.use_attention=false", "fusion.use_classifier_head=false"]),
            row("D", &["fusion.mode=dot", "fusion.use_attention=false", "fusion.use_classifier_head=false"]),
            row("C", &["fusion.mode=concat", "fusion.use_attention=false", "fusion.use_classifier_head=false"]),
            row("C+AM", &["fusion.mode=concat", "fusion.use_attention=true", "fusion.use_classifier_head=false"]),
            row("C+LC", &["fusion.mode=concat", "fusion.use_attention=false", "fusion.use_classifier_head=true"]),
            row("C+AM+LC", &["fusion.mode=concat", "fusion.use_attention=true", "fusion.use_classifier_head=true"]),
        ],
        "encoder" => vec![
            row("res1d", &["enc.time_kind=res1d"]),
            row("cnn1d-plain", &["enc.time_kind=cnn1d-plain"]),
        ],
        other => {
            return Err(CliError::BadInput(format!(
                "unknown ablation axis `{other}`; valid axes: loss, aug, domains, fusion, encoder"
            )))
        }
    })
}

fn cmd_ablate(a: AblateArgs) -> CliResult<()> {
    let rows = ablation_rows(&a.axis)?;
    let mut cfg = load_config(a.config.as_deref(), &a.sets)?;
    if let Some(p) = &a.train {
        cfg.data.train = p.display().to_string();
    }
    if let Some(p) = &a.test {
        cfg.data.test = p.display().to_string();
    }
    let (train, test) = load_datasets(&cfg)?;
    fs::create_dir_all(&a.out).map_err(|e| CliError::Runtime(e.to_string()))?;
    let report_path = a.out.join("ablate_report.json");
    if report_path.exists() && !a.force {
        return Err(CliError::BadInput(format!("{} exists; pass --force", report_path.display())));
    }

    let mut results = Vec::new();
    for row in &rows {
        let row_cfg = apply_overrides(&cfg, &row.sets)?;
        let (base, support, query) = make_split(&row_cfg, &train, &test)?;
        eprintln!("[ablate:{}] {} ...", a.axis, row.label);
        let pre = pipeline::pretrain(base.unlabeled(), &support, &row_cfg)?;
        let ft = pipeline::finetune(&pre.checkpoint, &support, &row_cfg)?;
        let report = pipeline::evaluate(&pre.checkpoint, &ft.checkpoint, &query, &row_cfg)?;
        eprintln!("[ablate:{}] {} → query acc {:.4}", a.axis, row.label, report.overall);
        results.push(serde_json::json!({
            "label": row.label,
            "overrides": row.sets,
            "query_acc": report.overall,
            "cluster_acc_best": pre.best_acc,
        }));
    }
    let body = serde_json::json!({"axis": a.axis, "seed": cfg.seed, "rows": results});
    fs::write(&report_path, serde_json::to_vec_pretty(&body).map_err(|e| CliError::Runtime(e.to_string()))?)
        .map_err(|e| CliError::Runtime(e.to_string()))?;

    println!("ablation `{}` (seed {}):", a.axis, cfg.seed);
    println!("  {:<28} {:>10}", "row", "query acc");
    for r in body["rows"].as_array().unwrap() {
        println!("  {:<28} {:>10.4}", r["label"].as_str().unwrap(), r["query_acc"].as_f64().unwrap());
    }
    println!("written to {}", report_path.display());
    Ok(())
}
