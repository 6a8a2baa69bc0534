//! Command-line front end: grammar checks, closure tables, parsing, prediction, robust parsing
//! and EM training.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use pearley::estimation::{train_with, TrainOptions};
use pearley::oracle::{self, OracleConfig};
use pearley::*;
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "pearley", version, about = "Probabilistic Earley parsing for stochastic context-free grammars")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Report grammar diagnostics.
    Check(GrammarArgs),
    /// Dump the epsilon probabilities and the left-corner and unit closure matrices.
    Tables(GrammarArgs),
    /// Sentence and prefix probabilities for each sentence.
    Parse(ParseCmd),
    /// Distribution of the next word after a prefix.
    Prefix(ParseCmd),
    /// Most likely parse tree and its probability.
    Viterbi(ParseCmd),
    /// Partial parses for sentences the grammar does not cover.
    Robust(RobustCmd),
    /// Re-estimate production probabilities with EM on a corpus.
    Train(TrainCmd),
}

#[derive(Args)]
struct GrammarArgs {
    /// Grammar file.
    #[arg(short = 'g', long = "grammar")]
    grammar: PathBuf,
    /// Treat an improper grammar as an error; in training, abort on unparseable sentences.
    #[arg(long)]
    strict: bool,
    /// Replace the grammar by an equivalent one without null productions.
    #[arg(long)]
    eliminate_null: bool,
    /// Divide each production probability by its left-hand side total.
    #[arg(long)]
    renormalize: bool,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    /// JSON.
    Structured,
}

#[derive(Args)]
struct InputArgs {
    /// Sentences, each a quoted string of space-separated tokens.
    sentences: Vec<String>,
    /// File with one sentence per line.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Disable left-corner terminal filtering during prediction.
    #[arg(long)]
    no_filter: bool,
    /// Keep at most N states per set.
    #[arg(long, value_name = "N", conflicts_with = "prune_rel")]
    prune: Option<usize>,
    /// Drop states whose forward probability is below R times the best in their set.
    #[arg(long, value_name = "R")]
    prune_rel: Option<f64>,
    /// Print the chart after each sentence.
    #[arg(long)]
    dump_chart: bool,
}

#[derive(Args)]
struct ParseCmd {
    #[command(flatten)]
    grammar: GrammarArgs,
    #[command(flatten)]
    input: InputArgs,
    /// Recompute results with the brute-force oracle and report the largest deviation.
    #[arg(long)]
    verify: bool,
}

#[derive(Args)]
struct RobustCmd {
    #[command(flatten)]
    grammar: GrammarArgs,
    #[command(flatten)]
    input: InputArgs,
    /// Only report maximal partial parses.
    #[arg(long)]
    maximal: bool,
}

#[derive(Args)]
struct TrainCmd {
    #[command(flatten)]
    grammar: GrammarArgs,
    /// Training corpus, one sentence per line; brackets allowed.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = TrainOptions::default().max_iterations)]
    iterations: usize,
    /// Stop when the log-likelihood gain or the largest parameter change falls below this.
    #[arg(long, default_value_t = TrainOptions::default().tol)]
    tol: f64,
}

/// Relative deviation above which `--verify` reports a failure.
const VERIFY_TOL: f64 = 1e-9;
/// Longest sentence `--verify` sends to the oracle.
const VERIFY_MAX_LEN: usize = 12;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .format_target(false)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {:#}", e);
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let mut out = String::new();
    let code = match cli.command {
        Command::Check(a) => check(&a, &mut out)?,
        Command::Tables(a) => tables(&a, &mut out)?,
        Command::Parse(c) => parse_cmd(&c, Mode::Parse, &mut out)?,
        Command::Viterbi(c) => parse_cmd(&c, Mode::Viterbi, &mut out)?,
        Command::Prefix(c) => prefix(&c, &mut out)?,
        Command::Robust(c) => robust(&c, &mut out)?,
        Command::Train(c) => train_cmd(&c, &mut out)?,
    };
    let mut stdout = std::io::stdout().lock();
    stdout.write_all(out.as_bytes())?;
    stdout.flush()?;
    Ok(code)
}

fn load_grammar(a: &GrammarArgs) -> Result<(Grammar, Vec<String>)> {
    let text = fs::read_to_string(&a.grammar).with_context(|| format!("reading {}", a.grammar.display()))?;
    let (mut g, warnings) = parse_grammar(&text).with_context(|| format!("loading {}", a.grammar.display()))?;
    if a.renormalize {
        g = renormalize(&g)?;
    }
    if a.eliminate_null {
        g = eliminate_null(&g)?;
    }
    Ok((g, warnings))
}

/// Load, report warnings and build the closure tables.
fn prepare(a: &GrammarArgs) -> Result<(Grammar, ClosureTables)> {
    let (g, warnings) = load_grammar(a)?;
    for w in &warnings {
        log::warn!("{}", w);
    }
    let diag = validate(&g);
    if a.strict && !diag.is_proper() {
        bail!(GrammarError::Improper(improper_list(&g, &diag)));
    }
    let tables = ClosureTables::build(&g).map_err(GrammarError::from)?;
    Ok((g, tables))
}

fn improper_list(g: &Grammar, d: &GrammarDiagnostics) -> String {
    d.improper_lhs
        .iter()
        .map(|&(x, s)| format!("{} sums to {}", g.nonterminal_name(x), fmt_prob(s)))
        .collect::<Vec<_>>()
        .join(", ")
}

fn emit_json(out: &mut String, v: &Value) -> Result<()> {
    out.push_str(&serde_json::to_string_pretty(v)?);
    out.push('\n');
    Ok(())
}

fn check(a: &GrammarArgs, out: &mut String) -> Result<ExitCode> {
    let (g, warnings) = load_grammar(a)?;
    let d = validate(&g);
    let name = |x: &usize| g.nonterminal_name(*x).to_string();
    if a.format == Format::Structured {
        let improper: Vec<Value> =
            d.improper_lhs.iter().map(|(x, s)| json!({"lhs": g.nonterminal_name(*x), "sum": s})).collect();
        emit_json(
            out,
            &json!({
                "nonterminals": g.num_nonterminals(),
                "terminals": g.num_terminals(),
                "productions": g.productions().len(),
                "start": g.nonterminal_name(g.start()),
                "proper": d.is_proper(),
                "improper_lhs": improper,
                "useless": d.useless.iter().map(name).collect::<Vec<_>>(),
                "null_start": d.null_start,
                "consistency_estimate": finite_or_null(d.consistency_estimate),
                "warnings": warnings,
            }),
        )?;
    } else {
        for w in &warnings {
            writeln!(out, "warning: {}", w)?;
        }
        writeln!(out, "nonterminals: {}", g.num_nonterminals())?;
        writeln!(out, "terminals: {}", g.num_terminals())?;
        writeln!(out, "productions: {}", g.productions().len())?;
        writeln!(out, "start: {}", g.nonterminal_name(g.start()))?;
        if d.is_proper() {
            writeln!(out, "proper: yes")?;
        } else {
            writeln!(out, "proper: no ({})", improper_list(&g, &d))?;
        }
        let useless: Vec<String> = d.useless.iter().map(name).collect();
        writeln!(out, "useless: {}", if useless.is_empty() { "none".to_string() } else { useless.join(" ") })?;
        writeln!(out, "null_start: {}", d.null_start)?;
        writeln!(out, "consistency_estimate: {}", fmt_prob(d.consistency_estimate))?;
    }
    if a.strict && !d.is_proper() {
        eprintln!("error: {}", GrammarError::Improper(improper_list(&g, &d)));
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn finite_or_null(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else {
        Value::Null
    }
}

fn tables(a: &GrammarArgs, out: &mut String) -> Result<ExitCode> {
    let (g, t) = prepare(a)?;
    if a.format == Format::Text {
        out.push_str(&t.dump(&g));
        return Ok(ExitCode::SUCCESS);
    }
    let e: serde_json::Map<String, Value> =
        t.eps.e.iter().enumerate().map(|(x, v)| (g.nonterminal_name(x).to_string(), json!(v))).collect();
    let matrix = |m: &NtMatrix| -> Vec<Value> {
        (0..m.dim())
            .flat_map(|x| m.row(x).iter().map(move |&(y, v)| (x, y, v)))
            .map(|(x, y, v)| json!({"from": g.nonterminal_name(x), "to": g.nonterminal_name(y), "value": v}))
            .collect()
    };
    emit_json(
        out,
        &json!({"e": e, "P_L": matrix(&t.pl), "R_L": matrix(&t.rl), "P_U": matrix(&t.pu), "R_U": matrix(&t.ru)}),
    )?;
    Ok(ExitCode::SUCCESS)
}

fn read_sentences(inp: &InputArgs) -> Result<Vec<String>> {
    let mut sentences = inp.sentences.clone();
    if let Some(path) = &inp.input {
        sentences.extend(read_lines(path)?);
    }
    if sentences.is_empty() {
        bail!("no sentences given; pass them as arguments or with --input");
    }
    Ok(sentences)
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

fn options(inp: &InputArgs) -> Result<ParseOptions> {
    let pruning = match (inp.prune, inp.prune_rel) {
        (Some(n), _) => Pruning::Beam(n),
        (None, Some(r)) if (0.0..1.0).contains(&r) => Pruning::Relative(r),
        (None, Some(r)) => bail!("--prune-rel must be in [0, 1), got {}", r),
        (None, None) => Pruning::Off,
    };
    Ok(ParseOptions { filter: !inp.no_filter, viterbi: true, pruning })
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Mode {
    Parse,
    Viterbi,
}

fn fmt_list(xs: &[f64]) -> String {
    xs.iter().map(|&x| fmt_prob(x)).collect::<Vec<_>>().join(" ")
}

fn result_record(sentence: &str, r: &ParseResult, partial: &[&PartialParse]) -> Value {
    let partial: Vec<Value> = partial
        .iter()
        .map(|p| {
            json!({
                "labels": p.labels,
                "split_points": p.split_points,
                "inner_prob": p.inner_prob,
                "viterbi_prob": p.viterbi_prob,
                "maximal": p.maximal,
                "trees": p.trees.iter().map(|t| t.to_string()).collect::<Vec<_>>(),
            })
        })
        .collect();
    json!({
        "sentence": sentence,
        "accepted": r.accepted,
        "sentence_prob": r.sentence_prob,
        "prefix_probs": r.prefix_probs,
        "viterbi_prob": r.viterbi_prob,
        "viterbi_tree": r.viterbi_tree.as_ref().map(|t| t.to_string()),
        "partial_parses": partial,
        "approximate": r.approximate,
        "rejected_at": r.rejected_at,
    })
}

/// Largest relative deviations of sentence and Viterbi probabilities from the oracle.
#[derive(Default)]
struct Verification {
    checked: usize,
    skipped: usize,
    sentence: f64,
    viterbi: f64,
}

impl Verification {
    fn add(&mut self, g: &Grammar, tokens: &[String], r: &ParseResult) {
        let x = match oracle::terminal_ids(g, tokens) {
            Some(x) if r.brackets.is_empty() && !x.is_empty() && x.len() <= VERIFY_MAX_LEN => x,
            _ => {
                self.skipped += 1;
                return;
            }
        };
        let cfg = OracleConfig { max_len: x.len(), ..OracleConfig::default() };
        let (Ok(p), Ok(v)) = (oracle::string_prob(g, &x, &cfg), oracle::viterbi(g, &x, &cfg)) else {
            self.skipped += 1;
            return;
        };
        let v = v.map_or(0.0, |(_, v)| v);
        self.checked += 1;
        self.sentence = self.sentence.max(rel_dev(r.sentence_prob, p));
        self.viterbi = self.viterbi.max(rel_dev(r.viterbi_prob.unwrap_or(0.0), v));
    }

    fn ok(&self) -> bool {
        self.sentence <= VERIFY_TOL && self.viterbi <= VERIFY_TOL
    }

    fn json(&self) -> Value {
        json!({
            "checked": self.checked,
            "skipped": self.skipped,
            "max_sentence_deviation": self.sentence,
            "max_viterbi_deviation": self.viterbi,
            "tolerance": VERIFY_TOL,
            "ok": self.ok(),
        })
    }

    fn text(&self) -> String {
        format!(
            "verify: {} checked, {} skipped, max relative deviation sentence {:.1e} viterbi {:.1e} ({})\n",
            self.checked,
            self.skipped,
            self.sentence,
            self.viterbi,
            if self.ok() { "within tolerance" } else { "EXCEEDS TOLERANCE" }
        )
    }
}

fn rel_dev(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

fn parse_cmd(c: &ParseCmd, mode: Mode, out: &mut String) -> Result<ExitCode> {
    let (g, t) = prepare(&c.grammar)?;
    let opts = options(&c.input)?;
    let sentences = read_sentences(&c.input)?;
    let structured = c.grammar.format == Format::Structured;
    let mut records = Vec::new();
    let mut verification = Verification::default();
    let mut rejected = false;
    for (i, s) in sentences.iter().enumerate() {
        let tokens = tokenize(s);
        let r = parse_bracketed(&g, &t, &tokens, &opts).with_context(|| format!("sentence {}", i + 1))?;
        rejected |= !r.accepted;
        if c.verify {
            let words: Vec<String> = tokens.iter().filter(|w| *w != "(" && *w != ")").cloned().collect();
            verification.add(&g, &words, &r);
        }
        if structured {
            let mut rec = result_record(s, &r, &[]);
            if c.input.dump_chart {
                rec["chart"] = json!(r.chart.dump(&g));
            }
            records.push(rec);
            continue;
        }
        if i > 0 {
            out.push('\n');
        }
        writeln!(out, "sentence: {}", s)?;
        match mode {
            Mode::Parse => {
                writeln!(out, "accepted: {}", r.accepted)?;
                if let Some(k) = r.rejected_at {
                    writeln!(out, "rejected at token {} ({})", k, r.chart.input[k - 1])?;
                }
                writeln!(out, "sentence_prob: {}", fmt_prob(r.sentence_prob))?;
                writeln!(out, "prefix_probs: {}", fmt_list(&r.prefix_probs))?;
            }
            Mode::Viterbi => match (&r.viterbi_tree, r.viterbi_prob) {
                (Some(tree), Some(v)) => {
                    writeln!(out, "viterbi_prob: {}", fmt_prob(v))?;
                    writeln!(out, "viterbi_tree: {}", tree)?;
                }
                _ => writeln!(out, "rejected")?,
            },
        }
        if r.approximate {
            writeln!(out, "approximate: true")?;
        }
        if c.input.dump_chart {
            out.push_str(&r.chart.dump(&g));
        }
    }
    if structured {
        let mut doc = json!({ "results": records });
        if c.verify {
            doc["verify"] = verification.json();
        }
        emit_json(out, &doc)?;
    } else if c.verify {
        out.push('\n');
        out.push_str(&verification.text());
    }
    Ok(if rejected || (c.verify && !verification.ok()) { ExitCode::from(1) } else { ExitCode::SUCCESS })
}

fn prefix(c: &ParseCmd, out: &mut String) -> Result<ExitCode> {
    if c.verify {
        bail!("--verify is supported by parse and viterbi only");
    }
    let (g, t) = prepare(&c.grammar)?;
    let opts = options(&c.input)?;
    let prefixes = if c.input.sentences.is_empty() && c.input.input.is_none() {
        vec![String::new()]
    } else {
        read_sentences(&c.input)?
    };
    let structured = c.grammar.format == Format::Structured;
    let mut records = Vec::new();
    let mut rejected = false;
    for (i, s) in prefixes.iter().enumerate() {
        let dist = match next_word_distribution(&g, &t, &tokenize(s), &opts) {
            Ok(d) => Some(d),
            Err(ParseError::Rejected) => None,
            Err(e) => return Err(e).with_context(|| format!("prefix {}", i + 1)),
        };
        rejected |= dist.is_none();
        if structured {
            let next: Option<Vec<Value>> = dist.map(|d| d.iter().map(|(w, p)| json!({"word": w, "prob": p})).collect());
            records.push(json!({"prefix": s, "accepted": next.is_some(), "next": next}));
            continue;
        }
        if i > 0 {
            out.push('\n');
        }
        writeln!(out, "prefix: {}", s)?;
        match dist {
            Some(d) => {
                for (w, p) in d {
                    writeln!(out, "{}\t{}", w, fmt_prob(p))?;
                }
            }
            None => writeln!(out, "rejected")?,
        }
    }
    if structured {
        emit_json(out, &json!({ "results": records }))?;
    }
    Ok(if rejected { ExitCode::from(1) } else { ExitCode::SUCCESS })
}

fn robust(c: &RobustCmd, out: &mut String) -> Result<ExitCode> {
    let (g, t) = prepare(&c.grammar)?;
    let opts = options(&c.input)?;
    let sentences = read_sentences(&c.input)?;
    let structured = c.grammar.format == Format::Structured;
    let mut records = Vec::new();
    for (i, s) in sentences.iter().enumerate() {
        let r = parse_robust(&g, &t, &tokenize(s), &opts).with_context(|| format!("sentence {}", i + 1))?;
        let shown: Vec<&PartialParse> = r.partial_parses.iter().filter(|p| !c.maximal || p.maximal).collect();
        if structured {
            let mut rec = result_record(s, &r.result, &shown);
            if c.input.dump_chart {
                rec["chart"] = json!(r.result.chart.dump(&r.grammar));
            }
            records.push(rec);
            continue;
        }
        if i > 0 {
            out.push('\n');
        }
        writeln!(out, "sentence: {}", s)?;
        writeln!(out, "accepted: {}", r.result.accepted)?;
        if r.result.accepted {
            writeln!(out, "sentence_prob: {}", fmt_prob(r.result.sentence_prob))?;
        }
        for p in shown {
            let spans: Vec<String> = p.split_points.windows(2).map(|w| format!("{}-{}", w[0], w[1])).collect();
            writeln!(
                out,
                "{}\tinner {}\tviterbi {}\tspans {}",
                p.label_string(),
                fmt_prob(p.inner_prob),
                fmt_prob(p.viterbi_prob),
                spans.join(" ")
            )?;
        }
        if c.input.dump_chart {
            out.push_str(&r.result.chart.dump(&r.grammar));
        }
    }
    if structured {
        emit_json(out, &json!({ "results": records }))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn train_cmd(c: &TrainCmd, out: &mut String) -> Result<ExitCode> {
    let (g, _) = prepare(&c.grammar)?;
    let corpus: Vec<Vec<String>> = read_lines(&c.input)?.iter().map(|l| tokenize(l)).collect();
    if corpus.is_empty() {
        bail!("{} contains no sentences", c.input.display());
    }
    let opts = TrainOptions { max_iterations: c.iterations, tol: c.tol, strict: c.grammar.strict };
    let structured = c.grammar.format == Format::Structured;
    let report = train_with(&g, &corpus, &opts, |k, ll| {
        if !structured {
            eprintln!("iteration {}: log-likelihood {}", k, fmt_prob(ll));
        }
    })?;
    let final_ll = *report.log_likelihoods.last().expect("final log-likelihood");
    if structured {
        emit_json(
            out,
            &json!({
                "iterations": report.iterations,
                "converged": report.converged,
                "log_likelihoods": report.log_likelihoods,
                "grammar": report.grammar.to_text(),
            }),
        )?;
    } else {
        eprintln!(
            "final log-likelihood {} after {} iterations ({})",
            fmt_prob(final_ll),
            report.iterations,
            if report.converged { "converged" } else { "iteration limit reached" }
        );
        out.push_str(&report.grammar.to_text());
    }
    Ok(ExitCode::SUCCESS)
}
