//! Operator front end: `train`, `eval`, `predict`, `ig`, `gradcheck`, and
//! `sweep` subcommands over TSV corpora and a concept lexicon.
//!
//! Settings resolve in three layers: built-in defaults, then a `key = value`
//! settings file (the `--config` flag, or the `KEAT_CONFIG` environment
//! variable as a fallback), then individual CLI flags. All machine-readable
//! output is TSV with LF line endings and `.`-decimal numbers.
//!
//! Exit codes: 0 success, 1 failed verification, 2 usage or input error,
//! 3 numerical abort (non-finite loss or gradient).

use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::concept::ConceptLexicon;
use crate::corpus::{build_documents, intern_labels, read_records, tokenize, Document, IgReport, Vocab};
use crate::error::{KeatError, Result};
use crate::gradcheck::{compare, fd_gradients, CheckOutcome, DEFAULT_STEP, DEFAULT_TOLERANCE};
use crate::local_attn::{
    local_attention_layer, LocalAttnMode, LocalAttnParams, ScoreMode, WindowSource,
};
use crate::model::{model_batch_loss, Example, HyperParams, KeatModel};
use crate::pipeline::{self, TrainedModel};
use crate::tape::{ParamSet, Tape};
use crate::tensor::Tensor;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Column header of the `ig` report.
pub const IG_HEADER: &str = "token\tdoc_freq\tig_bits\trank";

// ── Argument surface ─────────────────────────────────────────────────────────

#[derive(Parser)]
#[command(name = "keat", about = "Knowledge-enhanced attention text classifier", max_term_width = 100)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a classifier on a labeled TSV corpus and write a checkpoint
    Train(TrainArgs),
    /// Score a labeled TSV corpus with a saved checkpoint
    Eval(EvalArgs),
    /// Label lines of text read from stdin with a saved checkpoint
    Predict(PredictArgs),
    /// Rank vocabulary tokens by information gain over the class labels
    Ig(IgArgs),
    /// Verify tape gradients against finite differences on built-in fixtures
    Gradcheck(GradcheckArgs),
    /// Train once per γ value and tabulate held-out accuracy
    Sweep(SweepArgs),
}

/// Hyperparameter overrides shared by the training-style subcommands.
/// Anything not covered by a dedicated flag can be set via `--config`.
#[derive(Args, Clone, Default)]
struct HpOverrides {
    /// RNG seed for initialization, shuffling, and dropout
    #[arg(long)]
    seed: Option<u64>,
    /// Concept-fusion mix γ in [0, 1]
    #[arg(long)]
    gamma: Option<f64>,
    /// Keep only the top-k vocabulary tokens by information gain
    #[arg(long)]
    top_k: Option<usize>,
    /// Training epochs
    #[arg(long)]
    epochs: Option<usize>,
    /// Minibatch size
    #[arg(long)]
    batch: Option<usize>,
    /// Adam learning rate
    #[arg(long)]
    lr: Option<f64>,
    /// L2 regularization coefficient λ
    #[arg(long)]
    lambda: Option<f64>,
    /// GRU hidden width per direction
    #[arg(long)]
    hidden: Option<usize>,
    /// Self-attention head count
    #[arg(long)]
    heads: Option<usize>,
    /// Attention stage: off (multi-head), original, or improved (|score|)
    #[arg(long)]
    local_attn: Option<String>,
    /// `key = value` settings file (KEAT_CONFIG is the fallback)
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Labeled `<class>\t<text>` training TSV
    #[arg(long)]
    train: PathBuf,
    /// Concept lexicon TSV: `<surface>\t<concept>\t<score>`
    #[arg(long)]
    lexicon: PathBuf,
    /// Checkpoint output path (a `.meta` sidecar is written next to it)
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    hp: HpOverrides,
}

#[derive(Args)]
struct EvalArgs {
    /// Saved checkpoint
    #[arg(long)]
    ckpt: PathBuf,
    /// Labeled `<class>\t<text>` evaluation TSV
    #[arg(long)]
    eval: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    /// Saved checkpoint
    #[arg(long)]
    ckpt: PathBuf,
}

#[derive(Args)]
struct IgArgs {
    /// Labeled `<class>\t<text>` training TSV
    #[arg(long)]
    train: PathBuf,
    /// Truncate the report to the k best tokens (0 prints the header only)
    #[arg(long)]
    top_k: Option<usize>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Finite-difference step size
    #[arg(long, default_value_t = DEFAULT_STEP)]
    perturb: f64,
    /// Corrupt one tape gradient before comparing (negative control)
    #[arg(long, hide = true)]
    corrupt: bool,
}

#[derive(Args)]
struct SweepArgs {
    /// Labeled `<class>\t<text>` training TSV
    #[arg(long)]
    train: PathBuf,
    /// Labeled `<class>\t<text>` held-out TSV
    #[arg(long)]
    eval: PathBuf,
    /// Concept lexicon TSV: `<surface>\t<concept>\t<score>`
    #[arg(long)]
    lexicon: PathBuf,
    /// Comma-separated γ list, e.g. `0,0.25,0.5,0.75,1`
    #[arg(long)]
    gammas: String,
    #[command(flatten)]
    hp: HpOverrides,
}

// ── Entry point ──────────────────────────────────────────────────────────────

/// Parses the process arguments, runs the selected subcommand, and returns
/// the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests land here too; only real usage
            // errors are failures.
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Ig(a) => cmd_ig(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Sweep(a) => cmd_sweep(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                KeatError::NonFinite(_) => EXIT_NUMERIC,
                _ => EXIT_USAGE,
            }
        }
    }
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(KeatError::Io(io::Error::new(
            io::ErrorKind::NotFound,
            format!("{}: no such file", path.display()),
        )))
    }
}

// ── Settings resolution ──────────────────────────────────────────────────────

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum StageChoice {
    Off,
    Original,
    Improved,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum WindowChoice {
    Learned,
    Frequency,
}

/// Attention-stage settings gathered from config and flags, resolved into a
/// [`LocalAttnMode`] only once every layer has been applied.
#[derive(Default, Clone, Copy)]
struct AttnSettings {
    stage: Option<StageChoice>,
    window: Option<WindowChoice>,
    omega: Option<f64>,
}

impl AttnSettings {
    fn resolve(&self) -> Result<Option<LocalAttnMode>> {
        let stage = self.stage.unwrap_or(StageChoice::Off);
        if stage == StageChoice::Off {
            if self.window.is_some() || self.omega.is_some() {
                return Err(KeatError::config(
                    "local_window/local_omega need local_attn = original or improved",
                ));
            }
            return Ok(None);
        }
        let score = match stage {
            StageChoice::Original => ScoreMode::Original,
            _ => ScoreMode::ImprovedAbs,
        };
        let window = match self.window.unwrap_or(WindowChoice::Learned) {
            WindowChoice::Learned => {
                if self.omega.is_some() {
                    return Err(KeatError::config("local_omega needs local_window = frequency"));
                }
                WindowSource::Learned
            }
            WindowChoice::Frequency => {
                let omega = self.omega.ok_or_else(|| {
                    KeatError::config("local_window = frequency needs local_omega")
                })?;
                if !(omega > 0.0) {
                    return Err(KeatError::config(format!(
                        "local_omega must be > 0, got {omega}"
                    )));
                }
                WindowSource::Frequency(omega)
            }
        };
        Ok(Some(LocalAttnMode { score, window }))
    }
}

fn stage_choice(value: &str) -> Option<StageChoice> {
    match value {
        "off" => Some(StageChoice::Off),
        "original" => Some(StageChoice::Original),
        "improved" => Some(StageChoice::Improved),
        _ => None,
    }
}

fn window_choice(value: &str) -> Option<WindowChoice> {
    match value {
        "learned" => Some(WindowChoice::Learned),
        "frequency" => Some(WindowChoice::Frequency),
        _ => None,
    }
}

fn parse_num<T: std::str::FromStr>(
    value: &str,
    key: &str,
    origin: &str,
    line: usize,
) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| KeatError::parse(origin, line, format!("{key}: cannot parse `{value}`")))
}

fn apply_setting(
    hp: &mut HyperParams,
    attn: &mut AttnSettings,
    key: &str,
    value: &str,
    origin: &str,
    line: usize,
) -> Result<()> {
    match key {
        "word_dim" => hp.word_dim = parse_num(value, key, origin, line)?,
        "char_dim" => hp.char_dim = parse_num(value, key, origin, line)?,
        "concept_dim" => hp.concept_dim = parse_num(value, key, origin, line)?,
        "hidden" => hp.hidden = parse_num(value, key, origin, line)?,
        "heads" => hp.heads = parse_num(value, key, origin, line)?,
        "fusion_text_dim" => hp.fusion_text_dim = parse_num(value, key, origin, line)?,
        "fusion_set_dim" => hp.fusion_set_dim = parse_num(value, key, origin, line)?,
        "gamma" => hp.gamma = parse_num(value, key, origin, line)?,
        "lambda" => hp.lambda = parse_num(value, key, origin, line)?,
        "dropout" => hp.dropout = parse_num(value, key, origin, line)?,
        "lr" => hp.learning_rate = parse_num(value, key, origin, line)?,
        "beta1" => hp.beta1 = parse_num(value, key, origin, line)?,
        "beta2" => hp.beta2 = parse_num(value, key, origin, line)?,
        "epsilon" => hp.epsilon = parse_num(value, key, origin, line)?,
        "init_std" => hp.init_std = parse_num(value, key, origin, line)?,
        "batch" => hp.batch_size = parse_num(value, key, origin, line)?,
        "epochs" => hp.epochs = parse_num(value, key, origin, line)?,
        "seed" => hp.seed = parse_num(value, key, origin, line)?,
        "max_concepts" => hp.max_concepts = parse_num(value, key, origin, line)?,
        "top_k" => hp.top_k = Some(parse_num(value, key, origin, line)?),
        "use_raw_alpha" => hp.use_raw_alpha = parse_num(value, key, origin, line)?,
        "local_attn" => {
            attn.stage = Some(stage_choice(value).ok_or_else(|| {
                KeatError::parse(
                    origin,
                    line,
                    format!("local_attn expects off|original|improved, got `{value}`"),
                )
            })?)
        }
        "local_window" => {
            attn.window = Some(window_choice(value).ok_or_else(|| {
                KeatError::parse(
                    origin,
                    line,
                    format!("local_window expects learned|frequency, got `{value}`"),
                )
            })?)
        }
        "local_omega" => attn.omega = Some(parse_num(value, key, origin, line)?),
        _ => {
            return Err(KeatError::parse(origin, line, format!("unknown setting `{key}`")));
        }
    }
    Ok(())
}

fn parse_config(
    text: &str,
    origin: &str,
    hp: &mut HyperParams,
    attn: &mut AttnSettings,
) -> Result<()> {
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(KeatError::parse(origin, line_no, "expected `key = value`"));
        };
        apply_setting(hp, attn, key.trim(), value.trim(), origin, line_no)?;
    }
    Ok(())
}

/// Built-in defaults, overlaid by the config file (`--config`, else
/// `KEAT_CONFIG`), overlaid by individual flags.
fn effective_hp(o: &HpOverrides) -> Result<HyperParams> {
    let mut hp = HyperParams::default();
    let mut attn = AttnSettings::default();
    let config = o.config.clone().or_else(|| {
        std::env::var_os("KEAT_CONFIG").filter(|v| !v.is_empty()).map(PathBuf::from)
    });
    if let Some(path) = config {
        let origin = path.display().to_string();
        let text = fs::read_to_string(&path)
            .map_err(|e| KeatError::parse(&origin, 0, format!("cannot read config: {e}")))?;
        parse_config(&text, &origin, &mut hp, &mut attn)?;
    }
    if let Some(v) = o.seed {
        hp.seed = v;
    }
    if let Some(v) = o.gamma {
        hp.gamma = v;
    }
    if let Some(v) = o.top_k {
        hp.top_k = Some(v);
    }
    if let Some(v) = o.epochs {
        hp.epochs = v;
    }
    if let Some(v) = o.batch {
        hp.batch_size = v;
    }
    if let Some(v) = o.lr {
        hp.learning_rate = v;
    }
    if let Some(v) = o.lambda {
        hp.lambda = v;
    }
    if let Some(v) = o.hidden {
        hp.hidden = v;
    }
    if let Some(v) = o.heads {
        hp.heads = v;
    }
    if let Some(s) = &o.local_attn {
        attn.stage = Some(stage_choice(s).ok_or_else(|| {
            KeatError::config(format!("--local-attn expects off|original|improved, got `{s}`"))
        })?);
    }
    hp.local_attn = attn.resolve()?;
    hp.validate()?;
    Ok(hp)
}

// ── Subcommands ──────────────────────────────────────────────────────────────

fn cmd_train(a: &TrainArgs) -> Result<i32> {
    require_file(&a.train)?;
    require_file(&a.lexicon)?;
    let hp = effective_hp(&a.hp)?;
    let records = read_records(&a.train)?;
    let lexicon = ConceptLexicon::load(&a.lexicon)?;
    println!("epoch\tloss\taccuracy");
    let (trained, run) = TrainedModel::train_with(&records, lexicon, &hp, &mut |m| {
        println!("{}\t{:.6}\t{:.6}", m.epoch, m.loss, m.accuracy);
        let _ = io::stdout().flush();
    })?;
    trained.save(&a.out, Some(&run.adam), Some(&run.rng))?;
    Ok(EXIT_OK)
}

fn cmd_eval(a: &EvalArgs) -> Result<i32> {
    require_file(&a.ckpt)?;
    require_file(&a.eval)?;
    let loaded = TrainedModel::load(&a.ckpt)?;
    let records = read_records(&a.eval)?;
    let ev = loaded.pipeline.evaluate_records(&records)?;
    let classes = &loaded.pipeline.classes;
    println!("accuracy\t{:.6}", ev.accuracy);
    println!("class\tprecision\trecall\tsupport");
    for (name, m) in classes.iter().zip(&ev.per_class) {
        println!("{name}\t{:.6}\t{:.6}\t{}", m.precision, m.recall, m.support);
    }
    println!("confusion\t{}", classes.join("\t"));
    for (name, row) in classes.iter().zip(&ev.confusion) {
        let counts: Vec<String> = row.iter().map(|c| c.to_string()).collect();
        println!("{name}\t{}", counts.join("\t"));
    }
    Ok(EXIT_OK)
}

fn cmd_predict(a: &PredictArgs) -> Result<i32> {
    require_file(&a.ckpt)?;
    let loaded = TrainedModel::load(&a.ckpt)?;
    let stdin = io::stdin();
    for line in stdin.lock().lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (label, probs) = loaded.pipeline.predict_text(&line)?;
        let cells: Vec<String> = probs.iter().map(|p| format!("{p:.6}")).collect();
        println!("{line}\t{label}\t{}", cells.join(","));
    }
    Ok(EXIT_OK)
}

fn cmd_ig(a: &IgArgs) -> Result<i32> {
    require_file(&a.train)?;
    let records = read_records(&a.train)?;
    let (classes, labels) = intern_labels(&records);
    let token_docs: Vec<Vec<String>> = records.iter().map(|r| tokenize(&r.text)).collect();
    let vocab = Vocab::build(&token_docs);
    let docs = build_documents(&records, &labels, &vocab);
    let report = IgReport::build(&docs, classes.len())?;
    println!("{IG_HEADER}");
    let tsv = report.to_tsv();
    match a.top_k {
        None => print!("{tsv}"),
        Some(k) => {
            for line in tsv.lines().take(k) {
                println!("{line}");
            }
        }
    }
    Ok(EXIT_OK)
}

fn cmd_sweep(a: &SweepArgs) -> Result<i32> {
    require_file(&a.train)?;
    require_file(&a.eval)?;
    require_file(&a.lexicon)?;
    let hp = effective_hp(&a.hp)?;
    let gammas = parse_gammas(&a.gammas)?;
    let train = read_records(&a.train)?;
    let eval = read_records(&a.eval)?;
    let lexicon = ConceptLexicon::load(&a.lexicon)?;
    let rows = pipeline::sweep(&train, &eval, &lexicon, &hp, &gammas)?;
    println!("gamma\taccuracy");
    for (gamma, accuracy) in rows {
        println!("{gamma}\t{accuracy:.6}");
    }
    Ok(EXIT_OK)
}

/// Comma-separated γ values; rejects anything outside [0, 1] and drops
/// duplicates with a warning on stderr.
fn parse_gammas(list: &str) -> Result<Vec<f64>> {
    let mut out: Vec<f64> = Vec::new();
    for part in list.split(',') {
        let text = part.trim();
        if text.is_empty() {
            return Err(KeatError::config(format!("empty gamma entry in `{list}`")));
        }
        let gamma: f64 = text
            .parse()
            .map_err(|_| KeatError::config(format!("cannot parse gamma `{text}`")))?;
        if !(0.0..=1.0).contains(&gamma) {
            return Err(KeatError::config(format!("gamma must lie in [0, 1], got {gamma}")));
        }
        if out.contains(&gamma) {
            eprintln!("warning: duplicate gamma {gamma} ignored");
            continue;
        }
        out.push(gamma);
    }
    Ok(out)
}

// ── Gradient self-check ──────────────────────────────────────────────────────

/// The deterministic network and two-document batch behind `keat gradcheck`:
/// tiny layer widths, one document with concepts and one without, both
/// attention stages reachable.
pub fn gradcheck_fixture() -> Result<(KeatModel, Vec<Example>)> {
    let hp = HyperParams {
        word_dim: 6,
        char_dim: 4,
        concept_dim: 5,
        hidden: 4,
        heads: 2,
        fusion_text_dim: 3,
        fusion_set_dim: 3,
        lambda: 1e-3,
        dropout: 0.0,
        init_std: 0.3,
        batch_size: 2,
        ..HyperParams::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let model = KeatModel::new(&hp, 9, 5, 3, &mut rng)?;
    let doc = |label: usize, words: &[usize]| Document {
        label,
        tokens: Vec::new(),
        word_ids: words.to_vec(),
        char_ids: words.iter().map(|&w| vec![(w % 26) + 1, ((w * 3) % 26) + 1]).collect(),
    };
    let examples = vec![
        Example { doc: doc(0, &[2, 5, 3, 7]), concept_ids: vec![0, 2, 4] },
        Example { doc: doc(2, &[8, 4]), concept_ids: vec![] },
    ];
    Ok((model, examples))
}

/// Full-model check: batch loss (cross-entropy + L2) of [`gradcheck_fixture`],
/// tape backward vs central differences. `corrupt` bumps one tape gradient to
/// exercise the failure path.
fn model_fixture_check(h: f64, corrupt: bool) -> Result<CheckOutcome> {
    let (mut model, examples) = gradcheck_fixture()?;
    let refs: Vec<&Example> = examples.iter().collect();
    let KeatModel { ref mut set, ref parts, ref hp, num_classes } = model;
    let mut ad = {
        let mut tape = Tape::new();
        let loss = model_batch_loss(&mut tape, set, parts, hp, num_classes, &refs, None)?;
        tape.backward(loss, set)?
    };
    if corrupt {
        ad.get_mut(0).data_mut()[0] += 1.0;
    }
    let fd = fd_gradients(set, h, &mut |s| {
        let mut tape = Tape::new();
        let loss = model_batch_loss(&mut tape, s, parts, hp, num_classes, &refs, None)?;
        Ok(tape.value(loss).item())
    })?;
    Ok(compare(set, &ad, &fd))
}

/// Stand-alone local-attention layer check over a fixed random input, for one
/// score/window mode.
fn local_fixture_check(seed: u64, mode: LocalAttnMode, h: f64, corrupt: bool) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = ParamSet::new();
    let p = LocalAttnParams::register(&mut set, 3, 2, 4, 0.4, &mut rng);
    let mut input_rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let u = Tensor::randn(vec![5, 3], 0.8, &mut input_rng);
    let build = |tape: &mut Tape, s: &ParamSet| {
        let uv = tape.leaf(u.clone());
        let out = local_attention_layer(tape, s, &p, uv, mode)?;
        let sq = tape.mul(out.pooled, out.pooled)?;
        tape.sum(sq)
    };
    let mut ad = {
        let mut tape = Tape::new();
        let loss = build(&mut tape, &set)?;
        tape.backward(loss, &set)?
    };
    if corrupt {
        ad.get_mut(0).data_mut()[0] += 1.0;
    }
    let fd = fd_gradients(&mut set, h, &mut |s| {
        let mut tape = Tape::new();
        let loss = build(&mut tape, s)?;
        Ok(tape.value(loss).item())
    })?;
    Ok(compare(&set, &ad, &fd))
}

fn print_reports(stage: &str, outcome: &CheckOutcome) -> bool {
    for r in &outcome.reports {
        let ok = r.max_rel <= DEFAULT_TOLERANCE;
        println!("{stage}\t{}\t{:.3e}\t{}", r.name, r.max_rel, if ok { "ok" } else { "FAIL" });
    }
    outcome.pass(DEFAULT_TOLERANCE)
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<i32> {
    if !(a.perturb > 0.0) || !a.perturb.is_finite() {
        return Err(KeatError::config(format!("--perturb must be > 0, got {}", a.perturb)));
    }
    let mut all_ok = print_reports("model", &model_fixture_check(a.perturb, a.corrupt)?);
    let stages = [
        ("local-original", 20, LocalAttnMode { score: ScoreMode::Original, window: WindowSource::Learned }),
        ("local-improved", 21, LocalAttnMode { score: ScoreMode::ImprovedAbs, window: WindowSource::Learned }),
        ("local-frequency", 22, LocalAttnMode { score: ScoreMode::ImprovedAbs, window: WindowSource::Frequency(3.0) }),
    ];
    for (label, seed, mode) in stages {
        let outcome = local_fixture_check(seed, mode, a.perturb, a.corrupt)?;
        all_ok &= print_reports(label, &outcome);
    }
    if all_ok {
        println!("gradcheck\tpass");
        Ok(EXIT_OK)
    } else {
        println!("gradcheck\tFAIL");
        Ok(EXIT_CHECK_FAILED)
    }
}
