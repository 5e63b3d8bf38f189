//! `basis` — train and inspect char-level models whose dense layers compute
//! weight gradients from balanced count-sketch compressions of their
//! activations.
//!
//! Subcommands: `train` (one run), `sweep` (exact baseline + one run per
//! sketch rank), `diagnose` (estimator checks), `audit` (activation-memory
//! accounting). Exit codes: 0 success, 1 config/usage error, 2 numeric
//! failure.

mod config;
mod svg;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use basis_core::data::{CharCorpus, TokenBatch};
use basis_core::diagnostics::{
    compare_hashing_variance, check_norm_invariance, estimate_sts_mean, finite_difference_check,
    memory_audit,
};
use basis_core::model::{Execution, LmModel, ModelConfig, ModelKind};
use basis_core::rng::Rng;
use basis_core::tensor::Matrix;
use basis_core::train::{run_rank_sweep, run_training, RunReport};
use basis_core::Error;

use config::{AppConfig, DiagHashing};

#[derive(Parser)]
#[command(name = "basis", version, about = "Sketched-gradient training toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model; writes run.csv, report.txt, loss.svg
    Train(CommonArgs),
    /// Exact baseline plus one run per rank; writes sweep.csv, table.txt, sweep.svg
    Sweep(SweepArgs),
    /// Estimator and memory diagnostics; writes diagnose.txt
    Diagnose(CommonArgs),
    /// Activation-memory accounting; writes audit.txt
    Audit(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Flat key-value config file (one dotted key per line)
    #[arg(long)]
    config: PathBuf,
    /// Override a config key, e.g. --override rank=8 (repeatable)
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (overrides output.dir)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Full-scale preset: 50,000 steps, eval every 1,000
    #[arg(long)]
    paper_scale: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Comma-separated sketch ranks (overrides sweep.ranks)
    #[arg(long, value_name = "LIST")]
    ranks: Option<String>,
    /// Parallel runs (overrides sweep.jobs)
    #[arg(long)]
    jobs: Option<usize>,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(err: Error) -> Self {
        let code = match err {
            Error::NonFiniteLoss { .. } | Error::NonFiniteGradient { .. } => 2,
            _ => 1,
        };
        Failure { code, message: err.to_string() }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // --help/--version print and exit 0; real usage errors exit 1.
            let code = if err.use_stderr() { 1 } else { 0 };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Diagnose(args) => cmd_diagnose(args),
        Command::Audit(args) => cmd_audit(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {}", failure.message);
            ExitCode::from(failure.code)
        }
    }
}

fn load_config(args: &CommonArgs) -> Result<AppConfig, Failure> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|source| Error::Io { path: args.config.clone(), source })?;
    let mut map = config::parse_key_values(&text)?;
    for entry in &args.overrides {
        config::apply_override(&mut map, entry)?;
    }
    let mut app = config::build(&map)?;
    if args.paper_scale {
        app.train.steps = 50_000;
        app.train.eval_interval = 1_000;
    }
    if let Some(out) = &args.out {
        app.out_dir = out.clone();
    }
    Ok(app)
}

fn prepare_out_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|source| {
        Failure::from(Error::Io { path: dir.to_path_buf(), source })
    })
}

fn load_corpus(app: &AppConfig) -> Result<CharCorpus, Failure> {
    let path = app.corpus_path.as_ref().ok_or_else(|| {
        Failure::from(config::config_error("corpus.path", "required but not set"))
    })?;
    Ok(CharCorpus::load(path, app.split_fraction)?)
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf, Failure> {
    let path = dir.join(name);
    std::fs::write(&path, contents)
        .map_err(|source| Failure::from(Error::Io { path: path.clone(), source }))?;
    Ok(path)
}

fn loss_series(report: &RunReport) -> [svg::Series; 2] {
    [
        svg::Series {
            label: "train".into(),
            points: report.records.iter().map(|r| (r.step as f64, r.train_loss)).collect(),
        },
        svg::Series {
            label: "val".into(),
            points: report.records.iter().map(|r| (r.step as f64, r.val_loss)).collect(),
        },
    ]
}

fn cmd_train(args: CommonArgs) -> Result<(), Failure> {
    let app = load_config(&args)?;
    let corpus = load_corpus(&app)?;
    prepare_out_dir(&app.out_dir)?;
    let report = run_training(&app.train, &corpus)?;

    let csv = write_file(&app.out_dir, "run.csv", &report.to_csv())?;
    let txt = write_file(&app.out_dir, "report.txt", &report.to_text())?;
    let chart = svg::line_chart(
        &format!("loss ({} mode)", report.config.mode_label()),
        "step",
        "loss",
        &loss_series(&report),
    );
    let svg_path = write_file(&app.out_dir, "loss.svg", &chart)?;

    println!(
        "trained {} steps ({} mode): final train {:.4}, val {:.4}",
        report.config.steps,
        report.config.mode_label(),
        report.final_train_loss,
        report.final_val_loss
    );
    println!("wrote {}, {}, {}", csv.display(), txt.display(), svg_path.display());
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<(), Failure> {
    let app = load_config(&args.common)?;
    let ranks = match &args.ranks {
        Some(raw) => config::parse_ranks(raw)?,
        None => app.ranks.clone(),
    };
    let jobs = args.jobs.unwrap_or(app.jobs);
    if jobs == 0 {
        return Err(Failure::from(config::config_error("sweep.jobs", "must be >= 1")));
    }
    let corpus = load_corpus(&app)?;
    prepare_out_dir(&app.out_dir)?;

    let sweep = run_rank_sweep(&app.train, &ranks, &corpus, jobs)?;
    let csv = write_file(&app.out_dir, "sweep.csv", &sweep.combined_csv())?;
    let table = sweep.comparison_table();
    let table_path = write_file(&app.out_dir, "table.txt", &table)?;
    let series: Vec<svg::Series> = sweep
        .runs
        .iter()
        .map(|run| svg::Series {
            label: match run.config.mode {
                basis_core::model::LayerMode::Exact => "exact".to_string(),
                basis_core::model::LayerMode::Basis => format!("r={}", run.config.rank),
            },
            points: run.records.iter().map(|r| (r.step as f64, r.val_loss)).collect(),
        })
        .collect();
    let chart = svg::line_chart("validation loss by sketch rank", "step", "val loss", &series);
    let svg_path = write_file(&app.out_dir, "sweep.svg", &chart)?;

    print!("{table}");
    println!("wrote {}, {}, {}", csv.display(), table_path.display(), svg_path.display());
    Ok(())
}

enum Verdict {
    Pass,
    Fail,
    Ctrl,
}

struct CheckLine {
    verdict: Verdict,
    claim: String,
    measured: String,
    bound: String,
}

impl CheckLine {
    fn render(&self) -> String {
        let tag = match self.verdict {
            Verdict::Pass => "PASS",
            Verdict::Fail => "FAIL",
            Verdict::Ctrl => "CTRL",
        };
        format!("[{tag}] {} | measured {} | bound {}", self.claim, self.measured, self.bound)
    }
}

fn check(claim: &str, measured: String, bound: String, pass: bool) -> CheckLine {
    CheckLine {
        verdict: if pass { Verdict::Pass } else { Verdict::Fail },
        claim: claim.to_string(),
        measured,
        bound,
    }
}

/// One finite-difference scenario: label, model, batch pair, execution
/// settings, tolerance.
type FdCase = (&'static str, LmModel, TokenBatch, TokenBatch, Execution, f64);

fn diagnostics_models(seed: u64) -> Result<Vec<FdCase>, Error> {
    let mut out = Vec::new();
    let mut rng = Rng::new(seed);
    for (label, kind, layers, exec_rank, tol) in [
        ("mlp exact", ModelKind::Mlp, 1usize, None, 1e-4),
        ("transformer exact", ModelKind::Transformer, 2, None, 1e-3),
        ("transformer basis r=rows", ModelKind::Transformer, 1, Some(12usize), 1e-3),
    ] {
        let cfg = ModelConfig {
            kind,
            vocab_size: 11,
            seq_len: 6,
            d_model: 8,
            n_heads: 2,
            n_layers: layers,
        };
        let model = LmModel::new(&cfg, rng.next_u64())?;
        let ids: Vec<usize> =
            (0..13).map(|_| rng.next_below(cfg.vocab_size as u64) as usize).collect();
        let inputs = TokenBatch { batch: 2, seq: 6, ids: ids[..12].to_vec() };
        let targets = TokenBatch { batch: 2, seq: 6, ids: ids[1..].to_vec() };
        let exec = match exec_rank {
            None => Execution::exact(),
            Some(rank) => Execution::basis(rank),
        };
        out.push((label, model, inputs, targets, exec, tol));
    }
    Ok(out)
}

fn cmd_diagnose(args: CommonArgs) -> Result<(), Failure> {
    let app = load_config(&args)?;
    prepare_out_dir(&app.out_dir)?;
    let diag = &app.diag;
    let seed = app.train.seed;
    let mut lines: Vec<CheckLine> = Vec::new();

    // Projector mean: diagonal deterministic, off-diagonal within 4/sqrt(T).
    let sts = estimate_sts_mean(diag.sts_batch, diag.sts_rank, diag.sts_trials, seed)?;
    lines.push(check(
        &format!(
            "mean(S'S) diagonal over {} trials (B={}, R={})",
            diag.sts_trials, diag.sts_batch, diag.sts_rank
        ),
        if sts.diagonal_always_one { "exactly 1 in every trial".into() } else { "deviation observed".into() },
        "exactly 1".into(),
        sts.diagonal_always_one,
    ));
    let sts_bound = 4.0 / (diag.sts_trials as f64).sqrt();
    lines.push(check(
        "mean(S'S) max |off-diagonal|",
        format!("{:.5}", sts.max_offdiag_abs),
        format!("< {sts_bound:.5}"),
        sts.max_offdiag_abs < sts_bound,
    ));

    // Variance: balanced vs uniform on a fixed random instance, raw scaling.
    let mut rng = Rng::new(basis_core::rng::derive(seed, 0xD1A6));
    let x = Matrix::random_normal(16, 8, 1.0, &mut rng);
    let dy = Matrix::random_normal(16, 8, 1.0, &mut rng);
    let (balanced, uniform) = compare_hashing_variance(&x, &dy, 4, diag.var_trials, seed)?;
    match diag.hashing {
        DiagHashing::Both => lines.push(check(
            &format!("balanced-hashing variance <= uniform ({} trials, B=16, R=4)", diag.var_trials),
            format!("{:.5} vs {:.5}", balanced.per_entry_variance, uniform.per_entry_variance),
            "balanced <= uniform".into(),
            balanced.per_entry_variance <= uniform.per_entry_variance,
        )),
        DiagHashing::Uniform => lines.push(CheckLine {
            verdict: Verdict::Ctrl,
            claim: format!("uniform-hashing control variance ({} trials)", diag.var_trials),
            measured: format!("{:.5}", uniform.per_entry_variance),
            bound: "control measurement only".into(),
        }),
    }
    let (full_rank, _) = compare_hashing_variance(&x, &dy, 16, 256.min(diag.var_trials), seed)?;
    lines.push(check(
        "variance at R == B",
        format!("{:.2e}", full_rank.per_entry_variance),
        "0 (to f64 rounding, < 1e-24)".into(),
        full_rank.per_entry_variance < 1e-24,
    ));

    // Norm invariance across ranks.
    let mut worst_gap = 0.0f64;
    let mut ceiling_ok = true;
    for (i, rank) in [1usize, 2, 8, 16].into_iter().enumerate() {
        let sample = Matrix::random_normal(16, 8, 1.0, &mut rng);
        let report = check_norm_invariance(&sample, rank, seed + i as u64, app.train.epsilon)?;
        ceiling_ok &= report.scaled_norm <= report.source_norm;
        if report.raw_norm >= 1e-2 {
            worst_gap = worst_gap.max(report.relative_gap);
        }
    }
    lines.push(check(
        "scaled sketch norm never exceeds source norm (ranks 1,2,8,B)",
        if ceiling_ok { "holds".into() } else { "violated".into() },
        "||X_hat|| <= ||X||".into(),
        ceiling_ok,
    ));
    lines.push(check(
        "norm gap when raw sketch retains mass",
        format!("{worst_gap:.2e}"),
        "<= 1e-6".into(),
        worst_gap <= 1e-6,
    ));

    // Finite differences across model kinds and modes.
    for (label, mut model, inputs, targets, exec, tol) in diagnostics_models(seed)? {
        let reports =
            finite_difference_check(&mut model, &inputs, &targets, &exec, tol, 1e-5, 20, seed)?;
        let worst =
            reports.iter().map(|r| r.max_rel_err).fold(0.0f64, f64::max);
        let all_pass = reports.iter().all(|r| r.pass);
        lines.push(check(
            &format!("finite-difference gradients, {label}"),
            format!("max rel err {worst:.2e}"),
            format!("< {tol:.0e}"),
            all_pass,
        ));
    }

    // Memory accounting on the configured architecture.
    let audit_cfg = ModelConfig {
        kind: app.train.model,
        vocab_size: if app.train.vocab_size > 0 { app.train.vocab_size } else { 28 },
        seq_len: app.train.seq_len,
        d_model: app.train.d_model,
        n_heads: app.train.n_heads,
        n_layers: app.train.n_layers,
    };
    let model = LmModel::new(&audit_cfg, seed)?;
    let ids: Vec<usize> = (0..app.train.batch_size * app.train.seq_len)
        .map(|_| rng.next_below(audit_cfg.vocab_size as u64) as usize)
        .collect();
    let batch = TokenBatch { batch: app.train.batch_size, seq: app.train.seq_len, ids };
    let exact_mem = memory_audit(&model, &batch, &Execution::exact())?;
    let basis_mem = memory_audit(&model, &batch, &Execution::basis(app.train.rank))?;
    lines.push(check(
        "exact-mode cached floats equal sum of rows x N over dense layers",
        format!("{}", exact_mem.total_activation_floats),
        format!("== {}", exact_mem.theoretical_floats),
        exact_mem.total_activation_floats == exact_mem.theoretical_floats,
    ));
    lines.push(check(
        &format!("basis-mode cached floats equal sum of min(R={}, rows) x N", app.train.rank),
        format!("{}", basis_mem.total_activation_floats),
        format!("== {}", basis_mem.theoretical_floats),
        basis_mem.total_activation_floats == basis_mem.theoretical_floats,
    ));

    let mut out = String::from("estimator diagnostics\n=====================\n");
    for line in &lines {
        out.push_str(&line.render());
        out.push('\n');
    }
    let failed = lines.iter().filter(|l| matches!(l.verdict, Verdict::Fail)).count();
    out.push_str(&format!(
        "\n{} checks, {} failed\n",
        lines.len(),
        failed
    ));
    print!("{out}");
    write_file(&app.out_dir, "diagnose.txt", &out)?;
    if failed > 0 {
        return Err(Failure { code: 2, message: format!("{failed} diagnostic check(s) failed") });
    }
    Ok(())
}

fn cmd_audit(args: CommonArgs) -> Result<(), Failure> {
    let app = load_config(&args)?;
    prepare_out_dir(&app.out_dir)?;
    let vocab_size = if app.train.vocab_size > 0 {
        app.train.vocab_size
    } else if app.corpus_path.is_some() {
        load_corpus(&app)?.vocab_size()
    } else {
        return Err(Failure::from(config::config_error(
            "model.vocab_size",
            "set a vocabulary size or corpus.path so the model can be instantiated",
        )));
    };
    let cfg = ModelConfig {
        kind: app.train.model,
        vocab_size,
        seq_len: app.train.seq_len,
        d_model: app.train.d_model,
        n_heads: app.train.n_heads,
        n_layers: app.train.n_layers,
    };
    let model = LmModel::new(&cfg, app.train.seed)?;
    let mut rng = Rng::new(app.train.seed);
    let mk_batch = |b: usize, rng: &mut Rng| TokenBatch {
        batch: b,
        seq: app.train.seq_len,
        ids: (0..b * app.train.seq_len).map(|_| rng.next_below(vocab_size as u64) as usize).collect(),
    };
    let batch = mk_batch(app.train.batch_size, &mut rng);
    let exact = memory_audit(&model, &batch, &Execution::exact())?;
    let basis = memory_audit(&model, &batch, &Execution::basis(app.train.rank))?;
    let batch4 = mk_batch(4 * app.train.batch_size, &mut rng);
    let basis4 = memory_audit(&model, &batch4, &Execution::basis(app.train.rank))?;

    let mut out = String::from("activation-memory audit\n=======================\n\n");
    out.push_str(&exact.to_text());
    out.push('\n');
    out.push_str(&basis.to_text());
    out.push_str(&format!(
        "\ncompression: {:.4}x (exact {} / basis {})\n",
        exact.total_activation_floats as f64 / basis.total_activation_floats as f64,
        exact.total_activation_floats,
        basis.total_activation_floats
    ));
    out.push_str(&format!(
        "batch-size invariance: basis total at {}x batch = {} ({})\n",
        4,
        basis4.total_activation_floats,
        if basis4.total_activation_floats == basis.total_activation_floats {
            "identical"
        } else {
            "DIFFERS"
        }
    ));
    print!("{out}");
    write_file(&app.out_dir, "audit.txt", &out)?;
    Ok(())
}
