//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Failing criteria are reported, not asserted, so that the rest of the suite
//! still runs and prints. Set `VELF_ACCEPTANCE_STRICT=1` to turn any FAIL into
//! a non-zero exit. Criteria 6 and 7 need MovieLens-1M in
//! `VELF_MOVIELENS_DIR`; without it they FAIL with that reason.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use velf::backbone::HeadKind;
use velf::data::{ingest_movielens, synth_coldstart, SplitRules, SplitSet, SynthConfig};
use velf::eval::{auc, auc_brute_force, evaluate_splits, mean_std, rela_impr};
use velf::training::{derive_seed, train, train_steps, DeepFmBaseline, TrainConfig, Variant, VelfModel};
use velf::varembed::{kl_gaussian, kl_monte_carlo};

struct Outcome {
    pass: bool,
    detail: String,
}

type Check = fn(&mut Shared) -> Outcome;

/// MovieLens runs are shared between criteria 6 and 7.
#[derive(Default)]
struct Shared {
    movielens: Option<Result<MovieLensRuns, String>>,
}

fn velf_bin() -> &'static str {
    env!("CARGO_BIN_EXE_velf")
}

fn fail(detail: impl Into<String>) -> Outcome {
    Outcome { pass: false, detail: detail.into() }
}

fn c1_gradcheck(_: &mut Shared) -> Outcome {
    let run = |args: &[&str]| Command::new(velf_bin()).args(args).env("VELF_THREADS", "1").output();
    let clean = match run(&["gradcheck"]) {
        Ok(o) => o,
        Err(e) => return fail(format!("could not run velf: {e}")),
    };
    let text = String::from_utf8_lossy(&clean.stdout).to_string();
    let lines: Vec<&str> = text.lines().filter(|l| l.starts_with("PASS") || l.starts_with("FAIL")).collect();
    let failed: Vec<&&str> = lines.iter().filter(|l| l.starts_with("FAIL")).collect();
    let faulty = match run(&["gradcheck", "--fault", "0.01"]) {
        Ok(o) => o,
        Err(e) => return fail(format!("could not run velf: {e}")),
    };
    let faulty_text = String::from_utf8_lossy(&faulty.stdout).to_string();
    let caught = faulty_text.lines().filter(|l| l.starts_with("FAIL")).count();
    let pass = clean.status.success() && failed.is_empty() && !lines.is_empty() && !faulty.status.success() && caught > 0;
    Outcome {
        pass,
        detail: format!(
            "{} checks, {} failed; mutation self-test (adjoints +1e-2) flagged {caught} checks, exit {}",
            lines.len(),
            failed.len(),
            faulty.status.code().unwrap_or(-1)
        ),
    }
}

fn c2_kl_oracle(_: &mut Shared) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst = 0.0f64;
    let mut outside = 0;
    let mut self_kl_nonzero = 0;
    for _ in 0..50 {
        let d = 4;
        let mut draw = |lo: f64, hi: f64| -> Vec<f64> { (0..d).map(|_| rng.random_range(lo..hi)).collect() };
        let (mq, sq, mp, sp) = (draw(-1.5, 1.5), draw(0.3, 2.0), draw(-1.5, 1.5), draw(0.3, 2.0));
        let exact = kl_gaussian(&mq, &sq, &mp, &sp).expect("valid parameters");
        let (mc, se) = kl_monte_carlo(&mut rng, &mq, &sq, &mp, &sp, 100_000);
        let z = (exact - mc).abs() / se;
        worst = worst.max(z);
        if z > 3.0 {
            outside += 1;
        }
        if kl_gaussian(&mq, &sq, &mq, &sq).expect("valid") != 0.0 {
            self_kl_nonzero += 1;
        }
    }
    Outcome {
        pass: outside == 0 && self_kl_nonzero == 0,
        detail: format!("50 pairs, worst |exact - mc| = {worst:.2} SE, {outside} beyond 3 SE; KL(q||q) != 0 in {self_kl_nonzero} cases"),
    }
}

fn c3_auc_oracle(_: &mut Shared) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let mut tied_cases = 0;
    for case in 0..200 {
        let n = rng.random_range(2..120);
        let levels = rng.random_range(1..10);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 * 0.1).collect();
        let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        labels[case % n] = 1;
        labels[(case + 1) % n] = 0;
        if (levels as usize) < n {
            tied_cases += 1;
        }
        let a = auc(&scores, &labels).expect("two classes");
        let b = auc_brute_force(&scores, &labels).expect("two classes");
        worst = worst.max((a - b).abs());
    }
    let ri = rela_impr(0.7551, 0.7210).expect("base above 0.5");
    Outcome {
        pass: worst <= 1e-12 && (ri - 15.4).abs() <= 0.05,
        detail: format!("200 cases ({tied_cases} with ties), max |rank-sum - brute force| = {worst:.1e}; RelaImpr(0.7551, 0.7210) = {ri:.3}%"),
    }
}

fn c4_point_equivalence(_: &mut Shared) -> Outcome {
    let c = synth_coldstart(&SynthConfig { n_users: 300, n_items: 300, n_train: 30_000, n_test_new_items: 100, ..Default::default() });
    let cfg = TrainConfig { variant: Variant::Point, seed: 4, max_steps: Some(100), epochs: 10, ..Default::default() };
    let (uf, itf) = velf::data::build_frequency_tables(&c.splits.train);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0));
    let mut point: VelfModel<f32> = match VelfModel::init(&mut rng, &cfg, &c.splits.schema, uf, itf) {
        Ok(m) => m,
        Err(e) => return fail(e.to_string()),
    };
    let mut baseline = DeepFmBaseline::from_model(&point);
    let a = train_steps(&mut point, &cfg, &c.splits.train);
    let b = train_steps(&mut baseline, &cfg, &c.splits.train);
    match (a, b) {
        (Ok(a), Ok(b)) => {
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            let same = bits(&a.step_losses) == bits(&b.step_losses);
            let first_diff = a.step_losses.iter().zip(&b.step_losses).position(|(x, y)| x.to_bits() != y.to_bits());
            Outcome {
                pass: same && a.step_losses.len() == 100,
                detail: format!(
                    "{} steps each; trajectories {}; loss {:.5} -> {:.5}",
                    a.step_losses.len(),
                    match first_diff {
                        None if same => "bitwise identical".to_string(),
                        None => "differ in length".to_string(),
                        Some(k) => format!("first differ at step {k}"),
                    },
                    a.step_losses.first().copied().unwrap_or(f64::NAN),
                    a.step_losses.last().copied().unwrap_or(f64::NAN)
                ),
            }
        }
        (Err(e), _) | (_, Err(e)) => fail(e.to_string()),
    }
}

/// Settings for the synthetic cold-start comparison. Attributes reach the
/// model only through the priors, so the point baseline sees IDs alone. A
/// full-weight KL term pulls every posterior onto its prior and the model
/// stops using IDs, so the annealing horizon is ten times the run.
fn synthetic_config(variant: Variant, seed: u64) -> TrainConfig {
    TrainConfig {
        variant,
        seed,
        dim: 8,
        epochs: 10,
        lr: 3e-3,
        batch_size: 256,
        hidden: vec![32, 32, 32],
        prior_hidden: vec![32, 32, 32],
        head: HeadKind::DeepFm,
        attrs_in_backbone: false,
        // Ten epochs of 3910 steps reach alpha = 0.1.
        anneal_steps: Some(391_000),
        ..Default::default()
    }
}

fn synthetic_corpus_config() -> SynthConfig {
    SynthConfig { seed: 0, attr_fields: 1, n_attrs: 4, coef_scale: 2.0, ..Default::default() }
}

fn c5_synthetic_coldstart(_: &mut Shared) -> Outcome {
    let t0 = Instant::now();
    let corpus = synth_coldstart(&synthetic_corpus_config());
    let labels: Vec<u8> = corpus.splits.test_new_item.iter().map(|i| i.label).collect();
    let oracle = auc(&corpus.oracle_scores(&corpus.splits.test_new_item), &labels).unwrap_or(f64::NAN);
    let mut velf = Vec::new();
    let mut point = Vec::new();
    for seed in 0..3 {
        for (variant, out) in [(Variant::Full, &mut velf), (Variant::Point, &mut point)] {
            let cfg = synthetic_config(variant, seed);
            let r = train(&cfg, &corpus.splits.schema, &corpus.splits.train)
                .map_err(|e| e.to_string())
                .and_then(|(m, _)| evaluate_splits(variant.name(), &m, &corpus.splits).map_err(|e| e.to_string()));
            match r.map(|r| r.auc("new_item")) {
                Ok(Some(a)) => out.push(a),
                Ok(None) => return fail(format!("{} seed {seed}: new_item AUC undefined", variant.name())),
                Err(e) => return fail(format!("{} seed {seed}: {e}", variant.name())),
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let (vm, vs) = mean_std(&velf);
    let (pm, ps) = mean_std(&point);
    Outcome {
        pass: vm >= 0.65 && pm <= 0.55 && secs <= 600.0,
        detail: format!(
            "new_item AUC over 3 seeds: velf {vm:.4}±{vs:.4} (need >= 0.65), point {pm:.4}±{ps:.4} (need <= 0.55); oracle {oracle:.4}; {secs:.0}s (limit 600s)"
        ),
    }
}

struct MovieLensRuns {
    /// Per variant, one report per seed: (all, new_item) AUCs.
    aucs: Vec<(Variant, Vec<(f64, f64)>)>,
    seconds_full_point: f64,
    seconds_total: f64,
    train_size: usize,
}

impl MovieLensRuns {
    fn mean(&self, v: Variant, pick: fn(&(f64, f64)) -> f64) -> f64 {
        let xs: Vec<f64> = self.aucs.iter().find(|(w, _)| *w == v).map(|(_, r)| r.iter().map(pick).collect()).unwrap_or_default();
        mean_std(&xs).0
    }
}

/// Desk-scale settings: dim 8, three hidden layers of 200, batch 256, Adam.
fn movielens_config(variant: Variant, seed: u64) -> TrainConfig {
    TrainConfig { variant, seed, dim: 8, hidden: vec![200; 3], prior_hidden: vec![200; 3], batch_size: 256, lr: 1e-3, epochs: 1, ..Default::default() }
}

fn run_movielens(dir: &Path) -> Result<MovieLensRuns, String> {
    let t0 = Instant::now();
    let (splits, stats, _) = ingest_movielens(dir, &SplitRules::default()).map_err(|e| e.to_string())?;
    let one = |v: Variant, seed: u64, splits: &SplitSet| -> Result<(f64, f64), String> {
        let (m, _) = train(&movielens_config(v, seed), &splits.schema, &splits.train).map_err(|e| e.to_string())?;
        let r = evaluate_splits(v.name(), &m, splits).map_err(|e| e.to_string())?;
        Ok((r.auc("all").unwrap_or(f64::NAN), r.auc("new_item").unwrap_or(f64::NAN)))
    };
    let mut aucs = Vec::new();
    let mut seconds_full_point = 0.0;
    for v in [Variant::Point, Variant::Full, Variant::Fixed, Variant::NoR] {
        let mut runs = Vec::new();
        for seed in 0..3 {
            runs.push(one(v, seed, &splits)?);
        }
        aucs.push((v, runs));
        if v == Variant::Full {
            seconds_full_point = t0.elapsed().as_secs_f64();
        }
    }
    Ok(MovieLensRuns { aucs, seconds_full_point, seconds_total: t0.elapsed().as_secs_f64(), train_size: stats.train })
}

fn movielens(shared: &mut Shared) -> &Result<MovieLensRuns, String> {
    shared.movielens.get_or_insert_with(|| match std::env::var_os("VELF_MOVIELENS_DIR") {
        None => Err("MovieLens-1M not available: set VELF_MOVIELENS_DIR to a directory with ratings.dat, users.dat, movies.dat".into()),
        Some(d) => run_movielens(&PathBuf::from(d)),
    })
}

fn c6_movielens(shared: &mut Shared) -> Outcome {
    let r = match movielens(shared) {
        Err(e) => return fail(e.clone()),
        Ok(r) => r,
    };
    let all = |p: &(f64, f64)| p.0;
    let new_item = |p: &(f64, f64)| p.1;
    let base_all = r.mean(Variant::Point, all);
    let velf_all = r.mean(Variant::Full, all);
    let gap_new = r.mean(Variant::Full, new_item) - r.mean(Variant::Point, new_item);
    let a = (0.70..=0.74).contains(&base_all);
    let b = velf_all - base_all >= 0.010;
    let c = gap_new >= 0.030;
    let d = r.seconds_full_point <= 3600.0;
    Outcome {
        pass: a && b && c && d,
        detail: format!(
            "train {}; (a) point all {base_all:.4} {}; (b) velf all {velf_all:.4}, gap {:+.4} {}; (c) new_item gap {gap_new:+.4} {}; (d) {:.0}s {}",
            r.train_size,
            ok(a),
            velf_all - base_all,
            ok(b),
            ok(c),
            r.seconds_full_point,
            ok(d)
        ),
    }
}

fn c7_ablation(shared: &mut Shared) -> Outcome {
    let r = match movielens(shared) {
        Err(e) => return fail(e.clone()),
        Ok(r) => r,
    };
    let all = |p: &(f64, f64)| p.0;
    let (full, no_r, fixed, point) = (r.mean(Variant::Full, all), r.mean(Variant::NoR, all), r.mean(Variant::Fixed, all), r.mean(Variant::Point, all));
    let pass = full >= fixed + 0.005 && full >= point + 0.010 && full >= no_r - 0.002;
    Outcome {
        pass,
        detail: format!("all AUC: full {full:.4}, no_r {no_r:.4}, fixed {fixed:.4}, point {point:.4}; {:.0}s", r.seconds_total),
    }
}

fn ok(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "MISSED"
    }
}

/// Run every command twice and compare every output byte for byte.
fn c8_determinism(_: &mut Shared) -> Outcome {
    let tmp = match tempfile::tempdir() {
        Ok(t) => t,
        Err(e) => return fail(e.to_string()),
    };
    let config = tmp.path().join("run.json");
    if let Err(e) = std::fs::write(&config, r#"{"epochs": 2, "hidden": [16, 16], "prior_hidden": [16], "batch_size": 128, "lr": 0.005}"#) {
        return fail(e.to_string());
    }
    let pass_once = |root: &Path| -> Result<Vec<(String, Vec<u8>)>, String> {
        let run = |args: &[&str]| -> Result<Vec<u8>, String> {
            let o = Command::new(velf_bin()).args(args).env("VELF_THREADS", "1").output().map_err(|e| e.to_string())?;
            if !o.status.success() {
                return Err(format!("velf {args:?} failed: {}", String::from_utf8_lossy(&o.stderr)));
            }
            Ok(o.stdout)
        };
        let p = |s: &str| root.join(s).display().to_string();
        let cfg = config.display().to_string();
        let mut stdout = Vec::new();
        stdout.push(run(&["ingest", "--synthetic", "--seed", "8", "--users", "150", "--items", "150", "--train-size", "6000", "--test-size", "600", "--out", &p("splits")])?);
        stdout.push(run(&["train", "--config", &cfg, "--splits", &p("splits"), "--variant", "point", "--seed", "1", "--out", &p("point")])?);
        stdout.push(run(&["train", "--config", &cfg, "--splits", &p("splits"), "--variant", "full", "--seed", "1", "--out", &p("full")])?);
        stdout.push(run(&["eval", "--checkpoint", &p("full/model.velf"), "--splits", &p("splits"), "--base-report", &p("point/report.jsonl"), "--out", &p("eval.jsonl")])?);
        stdout.push(run(&["ablate", "--config", &cfg, "--splits", &p("splits"), "--seeds", "2", "--max-steps", "20", "--out", &p("ablate")])?);
        let mut files: Vec<(String, Vec<u8>)> = Vec::new();
        collect(root, root, &mut files).map_err(|e| e.to_string())?;
        files.sort();
        for (k, s) in stdout.into_iter().enumerate() {
            files.push((format!("<stdout {k}>"), s));
        }
        Ok(files)
    };
    let a = pass_once(&tmp.path().join("a"));
    let b = pass_once(&tmp.path().join("b"));
    match (a, b) {
        (Ok(a), Ok(b)) => {
            // Paths embedded in config.json differ only by the a/b prefix.
            let norm = |v: Vec<(String, Vec<u8>)>, tag: &str| -> Vec<(String, Vec<u8>)> {
                let from = tmp.path().join(tag).display().to_string();
                v.into_iter().map(|(n, bytes)| (n, String::from_utf8_lossy(&bytes).replace(&from, "<root>").into_bytes())).collect()
            };
            let raw_checkpoints_equal = a.iter().filter(|(n, _)| n.ends_with(".velf")).all(|(n, x)| b.iter().any(|(m, y)| m == n && x == y));
            let (a, b) = (norm(a, "a"), norm(b, "b"));
            let differing: Vec<&String> = a.iter().zip(&b).filter(|(x, y)| x != y).map(|(x, _)| &x.0).collect();
            Outcome {
                pass: a.len() == b.len() && differing.is_empty() && raw_checkpoints_equal,
                detail: format!("{} outputs compared (files and stdout), {} differ {:?}", a.len(), differing.len(), differing),
            }
        }
        (Err(e), _) | (_, Err(e)) => fail(e),
    }
}

fn collect(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) -> std::io::Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).expect("under root").display().to_string();
            out.push((rel, std::fs::read(&path)?));
        }
    }
    Ok(())
}

fn main() {
    // `cargo test -- <filter>` passes the filter through; honour a numeric one.
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(u32, &str, Check); 8] = [
        (1, "gradient correctness", c1_gradcheck),
        (2, "KL oracle", c2_kl_oracle),
        (3, "AUC oracle", c3_auc_oracle),
        (4, "point-estimate equivalence", c4_point_equivalence),
        (5, "synthetic cold-start", c5_synthetic_coldstart),
        (6, "MovieLens-1M reproduction", c6_movielens),
        (7, "ablation ordering", c7_ablation),
        (8, "determinism", c8_determinism),
    ];
    let mut shared = Shared::default();
    let mut failed = 0;
    for (n, name, check) in criteria {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let t0 = Instant::now();
        let o = check(&mut shared);
        if !o.pass {
            failed += 1;
        }
        println!(
            "criterion {n} ({name}): {} - {} [{:.1}s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            t0.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {failed} criteria failed");
    if failed > 0 && std::env::var("VELF_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
