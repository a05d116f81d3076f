mod config;

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use velf::data::{ingest_movielens, read_splits, synth_coldstart, write_splits, SplitSet, SplitStats, SynthConfig, Vocabulary};
use velf::eval::{aggregate, evaluate_splits, evaluate_with, render_summary, render_table, AucSummary, SplitReport};
use velf::selfcheck::{check_groups, check_primitives, CheckLine};
use velf::training::{load_checkpoint, save_checkpoint, train, EpochRecord, TrainConfig, Variant};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "velf", about = "Variational embeddings for cold-start CTR prediction")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build train/test splits and vocabularies from MovieLens-1M or a synthetic generator.
    Ingest(IngestArgs),
    /// Train one model and write a checkpoint plus a JSON-lines epoch log.
    Train(TrainArgs),
    /// Score a checkpoint on every held-out split.
    Eval(EvalArgs),
    /// Train and evaluate all four variants over several seeds.
    Ablate(AblateArgs),
    /// Finite-difference check of every primitive and parameter group.
    Gradcheck(GradcheckArgs),
}

/// Flags shared by commands that read a run config.
#[derive(Args, Clone)]
struct Common {
    /// Flat JSON config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory written by `ingest`.
    #[arg(long)]
    splits: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = RunConfig::load(self.config.as_deref())?;
        if let Some(s) = &self.splits {
            c.splits = Some(s.clone());
        }
        let t = &mut c.train;
        if let Some(v) = self.seed {
            t.seed = v;
        }
        if let Some(v) = self.epochs {
            t.epochs = v;
        }
        if let Some(v) = self.lr {
            t.lr = v;
        }
        if let Some(v) = self.dim {
            t.dim = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.max_steps {
            t.max_steps = Some(v);
        }
        t.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct IngestArgs {
    /// MovieLens-1M directory holding ratings.dat, users.dat and movies.dat.
    #[arg(long, conflicts_with = "synthetic")]
    data_dir: Option<PathBuf>,
    /// Generate a synthetic cold-start corpus instead.
    #[arg(long)]
    synthetic: bool,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Generator seed (synthetic only).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2000)]
    users: usize,
    #[arg(long, default_value_t = 2000)]
    items: usize,
    #[arg(long, default_value_t = 100_000)]
    train_size: usize,
    /// Test instances per block (seen, new item, new user).
    #[arg(long, default_value_t = 10_000)]
    test_size: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    variant: Option<String>,
    /// Output directory for model.velf, epochs.jsonl and config.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    splits: PathBuf,
    /// Report of the reference model; fills the RelaImpr column.
    #[arg(long)]
    base_report: Option<PathBuf>,
    /// Model name in the report; defaults to the checkpoint's variant.
    #[arg(long)]
    name: Option<String>,
    /// Report path; defaults to report.jsonl next to the checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    /// Number of seeds, counted up from the base seed; ignored if the config lists seeds.
    #[arg(long)]
    seeds: Option<usize>,
    /// Comma-separated subset of full,no_r,fixed,point.
    #[arg(long, value_delimiter = ',')]
    variants: Option<Vec<String>>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Add this amount to every adjoint under test (mutation self-test; expected to fail).
    #[arg(long)]
    fault: Option<f64>,
}

fn threads() -> Result<usize> {
    match std::env::var("VELF_THREADS") {
        Err(_) => Ok(1),
        Ok(s) => {
            let n: usize = s.trim().parse().with_context(|| format!("VELF_THREADS={s:?} is not a count"))?;
            ensure!(n >= 1, "VELF_THREADS must be at least 1");
            Ok(n)
        }
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn render_stats(s: &SplitStats) -> String {
    let rows = [
        ("users", s.users),
        ("items", s.items),
        ("train", s.train),
        ("test_all", s.test_all),
        ("test_new_user", s.test_new_user),
        ("test_new_item", s.test_new_item),
        ("test_infreq_user", s.test_infreq_user),
        ("test_infreq_item", s.test_infreq_item),
        ("skipped_empty_users", s.skipped_empty_users),
    ];
    rows.iter().map(|(k, v)| format!("{k:<20} {v}\n")).collect()
}

fn cmd_ingest(a: IngestArgs) -> Result<()> {
    let cfg = RunConfig::load(a.config.as_deref())?;
    let (splits, stats, vocab, oracle) = if a.synthetic {
        let sc = SynthConfig {
            seed: a.seed,
            n_users: a.users,
            n_items: a.items,
            n_train: a.train_size,
            n_test_new_items: a.test_size,
            ..Default::default()
        };
        ensure!(sc.n_users >= 1 && sc.n_items >= 1 && sc.n_train >= 1 && sc.n_test_new_items >= 1, "synthetic sizes must be at least 1");
        let corpus = synth_coldstart(&sc);
        let oracle = evaluate_with("oracle", &corpus.splits, |b| Ok(b.iter().map(|i| corpus.oracle_logit(i)).collect()))?;
        let vocab = Vocabulary::identity(&corpus.splits.schema);
        let stats = SplitStats::of(&corpus.splits, 0);
        (corpus.splits, stats, vocab, Some(oracle))
    } else {
        let dir = a.data_dir.or(cfg.data_dir).context("pass --data-dir or --synthetic")?;
        let (splits, stats, vocab) = ingest_movielens(&dir, &cfg.rules)?;
        (splits, stats, vocab, None)
    };
    write_splits(&a.out, &splits, &vocab)?;
    let text = render_stats(&stats);
    write(&a.out.join("stats.txt"), &text)?;
    if let Some(o) = oracle {
        write(&a.out.join("oracle_report.jsonl"), &o.to_jsonl())?;
        println!("{}", render_table(&[o]));
    }
    print!("{text}");
    Ok(())
}

fn epoch_jsonl(log: &[EpochRecord]) -> String {
    log.iter().map(|r| serde_json::to_string(r).expect("serializable") + "\n").collect()
}

/// Train one model into `out`; returns its evaluation report.
fn train_one(cfg: &TrainConfig, splits: &SplitSet, out: &Path, name: &str) -> Result<SplitReport> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let t0 = Instant::now();
    let (model, outcome) = train(cfg, &splits.schema, &splits.train).with_context(|| format!("training {name}"))?;
    info!("{name}: trained {} epochs in {:.1}s", outcome.epochs.len(), t0.elapsed().as_secs_f64());
    save_checkpoint(&model, &outcome.epochs, &out.join("model.velf"))?;
    write(&out.join("epochs.jsonl"), &epoch_jsonl(&outcome.epochs))?;
    let report = evaluate_splits(name, &model, splits)?;
    write(&out.join("report.jsonl"), &report.to_jsonl())?;
    Ok(report)
}

fn load_splits(dir: &Path) -> Result<SplitSet> {
    let (splits, _) = read_splits(dir).with_context(|| format!("reading splits from {}", dir.display()))?;
    Ok(splits)
}

fn parse_variant(s: &str) -> Result<Variant> {
    Variant::parse(s).with_context(|| format!("unknown variant {s:?}; expected full, no_r, fixed or point"))
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = a.common.resolve()?;
    if let Some(v) = &a.variant {
        cfg.train.variant = parse_variant(v)?;
    }
    if let Some(o) = a.out {
        cfg.out = Some(o);
    }
    let out = cfg.require_out()?.to_path_buf();
    let splits = load_splits(cfg.require_splits()?)?;
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write(&out.join("config.json"), &cfg.to_json())?;
    let report = train_one(&cfg.train, &splits, &out, cfg.train.variant.name())?;
    print!("{}", render_table(&[report]));
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    ensure!(a.checkpoint.exists(), "checkpoint {} does not exist", a.checkpoint.display());
    let (model, _) = load_checkpoint(&a.checkpoint)?;
    let splits = load_splits(&a.splits)?;
    let name = a.name.unwrap_or_else(|| model.variant().name().to_string());
    let mut report = evaluate_splits(&name, &model, &splits)?;
    let mut shown = Vec::new();
    if let Some(b) = &a.base_report {
        let text = std::fs::read_to_string(b).with_context(|| format!("reading {}", b.display()))?;
        let base = SplitReport::from_jsonl(&text).with_context(|| format!("parsing {}", b.display()))?;
        report = report.with_base(&base);
        shown.push(base);
    }
    let out = a.out.unwrap_or_else(|| a.checkpoint.with_file_name("report.jsonl"));
    write(&out, &report.to_jsonl())?;
    shown.push(report);
    print!("{}", render_table(&shown));
    Ok(())
}

/// "full 0.7551 > no_r 0.7502 > ..." on the `all` split.
fn ordering(rows: &[AucSummary]) -> String {
    let mut all: Vec<&AucSummary> = rows.iter().filter(|r| r.split == "all" && r.runs > 0).collect();
    all.sort_by(|a, b| b.mean.total_cmp(&a.mean).then(a.model.cmp(&b.model)));
    let parts: Vec<String> = all.iter().map(|r| format!("{} {:.4}", r.model, r.mean)).collect();
    format!("ordering on all: {}\n", parts.join(" > "))
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let mut cfg = a.common.resolve()?;
    if let Some(o) = a.out {
        cfg.out = Some(o);
    }
    let out = cfg.require_out()?.to_path_buf();
    let seeds: Vec<u64> = match (&cfg.seeds, a.seeds) {
        (Some(list), _) => list.clone(),
        (None, Some(k)) => {
            ensure!(k >= 1, "--seeds must be at least 1");
            (0..k as u64).map(|j| cfg.train.seed + j).collect()
        }
        (None, None) => vec![cfg.train.seed],
    };
    let variants: Vec<Variant> = match &a.variants {
        Some(v) => v.iter().map(|s| parse_variant(s)).collect::<Result<_>>()?,
        None => Variant::ALL.to_vec(),
    };
    let splits = load_splits(cfg.require_splits()?)?;
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    cfg.seeds = Some(seeds.clone());
    write(&out.join("config.json"), &cfg.to_json())?;

    let jobs: Vec<(Variant, u64)> = variants.iter().flat_map(|&v| seeds.iter().map(move |&s| (v, s))).collect();
    let results: Mutex<Vec<Option<Result<SplitReport>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let workers = threads()?.min(jobs.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(variant, seed)) = jobs.get(k) else { break };
                let tc = TrainConfig { variant, seed, ..cfg.train.clone() };
                let dir = out.join(variant.name()).join(format!("seed{seed}"));
                let r = train_one(&tc, &splits, &dir, variant.name());
                results.lock().expect("no worker panicked")[k] = Some(r);
            });
        }
    });
    let mut reports: Vec<(Variant, SplitReport)> = Vec::new();
    for ((v, s), r) in jobs.iter().zip(results.into_inner().expect("no worker panicked")) {
        let r = r.expect("every job ran").with_context(|| format!("variant {} seed {s}", v.name()))?;
        reports.push((*v, r));
    }
    let mut rows = Vec::new();
    for v in &variants {
        let runs: Vec<SplitReport> = reports.iter().filter(|(w, _)| w == v).map(|(_, r)| r.clone()).collect();
        rows.extend(aggregate(v.name(), &runs));
    }
    let jsonl: String = rows.iter().map(|r| serde_json::to_string(r).expect("serializable") + "\n").collect();
    write(&out.join("summary.jsonl"), &jsonl)?;
    let text = format!("{} runs ({} variants x {} seeds)\n{}{}", jobs.len(), variants.len(), seeds.len(), render_summary(&rows), ordering(&rows));
    write(&out.join("summary.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<()> {
    if let Some(d) = a.fault {
        ensure!(d.is_finite() && d != 0.0, "--fault must be a non-zero finite number");
        println!("mutation self-test: every adjoint under test perturbed by {d}");
    }
    let lines: Vec<CheckLine> = check_primitives(a.fault).into_iter().chain(check_groups(a.fault)).collect();
    let mut failed = 0;
    for l in &lines {
        println!("{}", l.render());
        // Untouched groups have an all-zero gradient either way; they cannot fail.
        if !l.pass() {
            failed += 1;
        }
    }
    if failed > 0 {
        bail!("{failed} of {} gradient checks failed", lines.len());
    }
    println!("all {} gradient checks passed", lines.len());
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = Cli::parse();
    let r = threads().and_then(|_| match cli.cmd {
        Cmd::Ingest(a) => cmd_ingest(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Ablate(a) => cmd_ablate(a),
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
    });
    if let Err(e) = r {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
