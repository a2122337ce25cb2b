//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 when validation finds a numeric mismatch,
//! 2 for usage errors and unreadable or invalid inputs.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::attrs::{AttributeRegistry, NodeAttribute, Role};
use crate::context::PruneContext;
use crate::error::{Diagnostic, Error, Result};
use crate::interp::{validate_equivalence, ValidationOptions};
use crate::model::{load_model_with_warnings, save_model, synthesize_model, FixtureSpec, ModelArchive};
use crate::report::summarize;
use crate::rewrite::apply_plan;
use crate::scoring::{Criterion, Mode, NormKind, PruningPlan};
use crate::tree::{forest_to_dot, tree_to_json, TreeJson, TreePolicy};

#[derive(Debug, Parser)]
#[command(name = "treeprune", version, about = "Structured channel pruning for ONNX models")]
pub struct Cli {
    /// Worker threads; defaults to one per core.
    #[arg(long, global = true, env = "TREEPRUNE_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic fixture model.
    Synth(SynthArgs),
    /// List nodes, their attributes and which ones can be pruned.
    Inspect(InspectArgs),
    /// Print association trees and pruning groups.
    Tree(TreeArgs),
    /// Plan, rewrite and save a pruned model.
    Prune(PruneArgs),
    /// Check a pruned model against the masked original.
    Validate(ValidateArgs),
    /// Parameter, FLOP and overlap statistics for a pruned model.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct GraphOpts {
    /// Also prune layers whose outputs reach a graph output.
    #[arg(long)]
    pub include_classifier: bool,
    /// Extra operator attributes, one `OpType=attribute` per line.
    #[arg(long, value_name = "FILE")]
    pub extensions: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Args)]
pub struct CriterionOpts {
    /// Filter norm.
    #[arg(long, default_value = "l1")]
    pub criterion: NormKind,
    /// Tree-level scores or producer-only scores.
    #[arg(long, default_value = "tree")]
    pub mode: Mode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TreeFormat {
    Json,
    Dot,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Fixture name, e.g. vgg16_cifar or fire_module.
    pub template: String,
    #[arg(short, long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of convolutions (conv_chain only).
    #[arg(long, default_value_t = 2)]
    pub depth: usize,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub model: PathBuf,
    #[command(flatten)]
    pub graph: GraphOpts,
    #[arg(long, value_enum, default_value = "text")]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct TreeArgs {
    pub model: PathBuf,
    #[command(flatten)]
    pub graph: GraphOpts,
    #[arg(long, value_enum, default_value = "json")]
    pub format: TreeFormat,
    /// Write to a file instead of standard output.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PruneArgs {
    pub model: PathBuf,
    #[arg(short, long)]
    pub output: PathBuf,
    /// Fraction of channels removed from every group, in [0, 1).
    #[arg(long, value_parser = parse_ratio)]
    pub ratio: f64,
    #[command(flatten)]
    pub criterion: CriterionOpts,
    #[command(flatten)]
    pub graph: GraphOpts,
    /// Save the plan as JSON.
    #[arg(long, value_name = "FILE")]
    pub plan_out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "text")]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    /// The unpruned model.
    pub model: PathBuf,
    #[arg(long)]
    pub pruned: PathBuf,
    #[arg(long)]
    pub plan: PathBuf,
    #[command(flatten)]
    pub graph: GraphOpts,
    #[arg(long, default_value_t = 8)]
    pub trials: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "text")]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// The unpruned model.
    pub model: PathBuf,
    #[arg(long)]
    pub pruned: PathBuf,
    #[arg(long)]
    pub plan: PathBuf,
    /// Plan to compare against: a plan file, or `single` / `tree` to score
    /// the model again in that mode.
    #[arg(long)]
    pub reference: Option<String>,
    #[command(flatten)]
    pub graph: GraphOpts,
    #[arg(long, value_enum, default_value = "text")]
    pub format: Format,
}

fn parse_ratio(s: &str) -> std::result::Result<f64, String> {
    let r: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if (0.0..1.0).contains(&r) {
        Ok(r)
    } else {
        Err(format!("ratio must be in [0, 1), got {r}"))
    }
}

enum Failure {
    Input(Error),
    Numeric,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Input(e)
    }
}

type CmdResult = std::result::Result<(), Failure>;

struct Io<'a> {
    out: &'a mut dyn Write,
    err: &'a mut dyn Write,
}

impl Io<'_> {
    fn print(&mut self, text: &str) -> Result<()> {
        write!(self.out, "{text}").map_err(|source| Error::Io {
            path: PathBuf::from("<stdout>"),
            source,
        })
    }

    fn warn(&mut self, d: &Diagnostic) {
        let _ = writeln!(self.err, "{d}");
    }
}

/// Parses `args` and runs the command, writing to `out` and `err`.
/// Returns the process exit code.
pub fn run_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let rendered = e.render();
            if code == 0 {
                let _ = write!(out, "{rendered}");
            } else {
                let _ = write!(err, "{rendered}");
            }
            return code;
        }
    };
    if let Some(n) = cli.threads.filter(|&n| n > 0) {
        // Fails only when a pool already exists, which is fine.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let mut io = Io { out, err };
    let result = match &cli.command {
        Command::Synth(a) => synth(a, &mut io),
        Command::Inspect(a) => inspect(a, &mut io),
        Command::Tree(a) => tree(a, &mut io),
        Command::Prune(a) => prune(a, &mut io),
        Command::Validate(a) => validate(a, &mut io),
        Command::Report(a) => report(a, &mut io),
    };
    match result {
        Ok(()) => 0,
        Err(Failure::Numeric) => 1,
        Err(Failure::Input(e)) => {
            let _ = writeln!(io.err, "error: {e}");
            if let Error::Validation(ds) = &e {
                for d in ds {
                    let _ = writeln!(io.err, "  {d}");
                }
            }
            2
        }
    }
}

/// Entry point for the binary.
pub fn main() -> i32 {
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_with(std::env::args_os(), &mut stdout.lock(), &mut stderr.lock())
}

fn load(path: &Path, io: &mut Io) -> Result<ModelArchive> {
    let (model, warnings) = load_model_with_warnings(path)?;
    for w in warnings {
        io.warn(&Diagnostic::warning(None, w));
    }
    Ok(model)
}

fn registry(opts: &GraphOpts) -> Result<AttributeRegistry> {
    let base = AttributeRegistry::builtin();
    match &opts.extensions {
        None => Ok(base),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|source| Error::Io {
                path: p.clone(),
                source,
            })?;
            base.with_extensions_text(&text)
        }
    }
}

fn context(path: &Path, opts: &GraphOpts, io: &mut Io) -> Result<PruneContext> {
    let model = load(path, io)?;
    let policy = TreePolicy {
        include_classifier: opts.include_classifier,
    };
    PruneContext::new(model, registry(opts)?, policy)
}

/// Refuses to overwrite `input` and checks that the output directory exists.
fn check_output(output: &Path, inputs: &[&Path]) -> Result<()> {
    let same = |a: &Path, b: &Path| match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => a == b,
    };
    if let Some(i) = inputs.iter().find(|i| same(output, i)) {
        return Err(Error::InvalidArgument(format!(
            "output {} would overwrite an input",
            i.display()
        )));
    }
    match output.parent() {
        Some(dir) if !dir.as_os_str().is_empty() && !dir.is_dir() => Err(Error::InvalidArgument(format!(
            "output directory {} does not exist",
            dir.display()
        ))),
        _ => Ok(()),
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_owned(),
        source,
    })
}

fn synth(a: &SynthArgs, io: &mut Io) -> CmdResult {
    check_output(&a.output, &[])?;
    let model = synthesize_model(&FixtureSpec::new(&a.template).depth(a.depth).seed(a.seed))?;
    save_model(&model, &a.output)?;
    io.print(&format!(
        "wrote {} ({} nodes, {} initializers)\n",
        a.output.display(),
        model.graph.nodes.len(),
        model.graph.initializers.len()
    ))?;
    Ok(())
}

#[derive(Serialize)]
struct NodeRow {
    index: usize,
    name: String,
    op_type: String,
    attribute: Option<NodeAttribute>,
    status: &'static str,
}

#[derive(Serialize)]
struct Inspection {
    nodes: Vec<NodeRow>,
    prunable: usize,
    excluded: Vec<String>,
    unknown_ops: Vec<String>,
    diagnostics: Vec<Diagnostic>,
}

fn inspect(a: &InspectArgs, io: &mut Io) -> CmdResult {
    let ctx = context(&a.model, &a.graph, io)?;
    let g = &ctx.graph;
    let skipped: BTreeSet<usize> = ctx.forest.skipped.iter().map(|(i, _)| *i).collect();
    let mut unknown = BTreeSet::new();
    let mut diagnostics = ctx.diagnostics();
    let nodes: Vec<NodeRow> = g
        .topo_order()
        .iter()
        .map(|&i| {
            let op = &g.node(i).op_type;
            let role = if ctx.registry.is_root_op(op) { Role::Root } else { Role::Descendant };
            let attribute = match ctx.registry.classify_node(g, i, role) {
                Ok((attr, note)) => {
                    diagnostics.extend(note);
                    Some(attr)
                }
                Err(_) => {
                    unknown.insert(op.clone());
                    None
                }
            };
            let status = if ctx.forest.trees.contains_key(&i) {
                "prunable"
            } else if ctx.forest.excluded.contains(&i) {
                "classifier"
            } else if skipped.contains(&i) {
                "skipped"
            } else {
                "-"
            };
            NodeRow {
                index: i,
                name: g.label(i),
                op_type: op.clone(),
                attribute,
                status,
            }
        })
        .collect();
    for op in &unknown {
        diagnostics.push(Diagnostic::warning(None, format!("unknown operator `{op}`")));
    }
    let report = Inspection {
        prunable: ctx.forest.trees.len(),
        excluded: ctx.forest.excluded.iter().map(|&i| g.label(i)).collect(),
        unknown_ops: unknown.into_iter().collect(),
        nodes,
        diagnostics,
    };
    for d in &report.diagnostics {
        io.warn(d);
    }
    let text = match a.format {
        Format::Json => serde_json::to_string_pretty(&report).map_err(Error::from)? + "\n",
        Format::Text => {
            let w = report.nodes.iter().map(|n| n.name.len()).max().unwrap_or(4).max(4);
            let mut s = format!("{:>5}  {:<w$}  {:<20}  {:<16}  status\n", "index", "node", "op", "attribute");
            for n in &report.nodes {
                let attr = n.attribute.map_or("unknown", NodeAttribute::as_str);
                s += &format!("{:>5}  {:<w$}  {:<20}  {:<16}  {}\n", n.index, n.name, n.op_type, attr, n.status);
            }
            s += &format!("prunable nodes: {}", report.prunable);
            if !report.excluded.is_empty() {
                s += &format!(" ({} excluded: {})", report.excluded.len(), report.excluded.join(", "));
            }
            s + "\n"
        }
    };
    io.print(&text)?;
    Ok(())
}

#[derive(Serialize)]
struct TreeEntry {
    root: String,
    channels: usize,
    tree: TreeJson,
}

#[derive(Serialize)]
struct GroupEntry {
    id: usize,
    members: Vec<String>,
    channels: usize,
    prunable: bool,
}

#[derive(Serialize)]
struct TreeDump {
    trees: Vec<TreeEntry>,
    groups: Vec<GroupEntry>,
    excluded: Vec<String>,
    diagnostics: Vec<Diagnostic>,
}

fn tree(a: &TreeArgs, io: &mut Io) -> CmdResult {
    if let Some(o) = &a.output {
        check_output(o, &[&a.model])?;
    }
    let ctx = context(&a.model, &a.graph, io)?;
    let g = &ctx.graph;
    let diagnostics = ctx.diagnostics();
    for d in &diagnostics {
        io.warn(d);
    }
    let text = match a.format {
        TreeFormat::Dot => forest_to_dot(g, ctx.forest.trees.values()),
        TreeFormat::Json => {
            let dump = TreeDump {
                trees: ctx
                    .forest
                    .trees
                    .values()
                    .map(|t| TreeEntry {
                        root: g.label(t.root()),
                        channels: t.channels(),
                        tree: tree_to_json(g, t),
                    })
                    .collect(),
                groups: ctx
                    .groups
                    .iter()
                    .zip(&ctx.layouts)
                    .map(|(grp, l)| GroupEntry {
                        id: grp.id,
                        members: grp.members.iter().map(|&m| g.label(m)).collect(),
                        channels: grp.channels,
                        prunable: l.is_prunable(),
                    })
                    .collect(),
                excluded: ctx.forest.excluded.iter().map(|&i| g.label(i)).collect(),
                diagnostics,
            };
            serde_json::to_string_pretty(&dump).map_err(Error::from)? + "\n"
        }
    };
    match &a.output {
        Some(p) => write_file(p, &text)?,
        None => io.print(&text)?,
    }
    Ok(())
}

fn prune(a: &PruneArgs, io: &mut Io) -> CmdResult {
    check_output(&a.output, &[&a.model])?;
    if let Some(p) = &a.plan_out {
        check_output(p, &[&a.model, &a.output])?;
    }
    let ctx = context(&a.model, &a.graph, io)?;
    for d in &ctx.forest.skipped {
        io.warn(&d.1);
    }
    let criterion = Criterion::new(a.criterion.criterion, a.criterion.mode);
    let (plan, diagnostics) = ctx.plan(a.ratio, &criterion)?;
    for d in &diagnostics {
        io.warn(d);
    }
    let rewritten = apply_plan(&ctx, &plan)?;
    save_model(&rewritten.model, &a.output)?;
    if let Some(p) = &a.plan_out {
        plan.save(p)?;
    }
    let report = summarize(&ctx.model, &rewritten.model, &plan, None)?;
    let text = match a.format {
        Format::Json => report.to_json()? + "\n",
        Format::Text => format!("wrote {}\n{}", a.output.display(), report.to_text()),
    };
    io.print(&text)?;
    Ok(())
}

fn validate(a: &ValidateArgs, io: &mut Io) -> CmdResult {
    if a.tolerance.is_nan() || a.tolerance < 0.0 {
        return Err(Error::InvalidArgument(format!("tolerance {} is negative", a.tolerance)).into());
    }
    let ctx = context(&a.model, &a.graph, io)?;
    let pruned = load(&a.pruned, io)?;
    let plan = PruningPlan::load(&a.plan)?;
    let opts = ValidationOptions {
        trials: a.trials,
        tolerance: a.tolerance,
        seed: a.seed,
        batch: 1,
    };
    let r = validate_equivalence(&ctx, &plan, &pruned, &opts)?;
    for w in &r.warnings {
        io.warn(&Diagnostic::warning(None, w.clone()));
    }
    let text = match a.format {
        Format::Json => r.to_json()? + "\n",
        Format::Text => {
            let fmt = |d: Option<f64>| d.map_or("shape mismatch".to_owned(), |d| format!("{d:.3e}"));
            let mut s = String::new();
            for t in &r.trials {
                s += &format!("trial {:>3}  seed {:>6}  max deviation {}\n", t.trial, t.seed, fmt(t.max_deviation));
            }
            s + &format!(
                "{}: max deviation {} (tolerance {:e})\n",
                serde_json::to_value(r.status).map_err(Error::from)?.as_str().unwrap_or("?"),
                fmt(r.max_deviation),
                r.tolerance
            )
        }
    };
    io.print(&text)?;
    if r.passed() {
        Ok(())
    } else {
        Err(Failure::Numeric)
    }
}

fn report(a: &ReportArgs, io: &mut Io) -> CmdResult {
    let ctx = context(&a.model, &a.graph, io)?;
    let pruned = load(&a.pruned, io)?;
    let plan = PruningPlan::load(&a.plan)?;
    let reference = match a.reference.as_deref() {
        None => None,
        Some(r @ ("single" | "tree")) => {
            let norm: NormKind = plan.criterion.split('/').next().unwrap_or("l1").parse()?;
            let (p, _) = ctx.plan(plan.ratio, &Criterion::new(norm, r.parse()?))?;
            Some(p)
        }
        Some(path) => Some(PruningPlan::load(Path::new(path))?),
    };
    let r = summarize(&ctx.model, &pruned, &plan, reference.as_ref())?;
    let text = match a.format {
        Format::Json => r.to_json()? + "\n",
        Format::Text => r.to_text(),
    };
    io.print(&text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(args: &[&str]) -> (i32, String, String) {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let mut full = vec!["treeprune"];
        full.extend_from_slice(args);
        let code = run_with(full, &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn ratio_must_be_below_one() {
        assert_eq!(run(&["prune", "m.onnx", "-o", "o.onnx", "--ratio", "1.0"]).0, 2);
        assert!(parse_ratio("0.5").is_ok());
        assert!(parse_ratio("-0.1").is_err());
    }

    #[test]
    fn missing_model_is_an_input_error() {
        let (code, _, err) = run(&["inspect", "/nonexistent/model.onnx"]);
        assert_eq!(code, 2);
        assert!(err.contains("error"));
    }

    #[test]
    fn help_exits_zero() {
        let (code, out, _) = run(&["--help"]);
        assert_eq!(code, 0);
        for sub in ["synth", "inspect", "tree", "prune", "validate", "report"] {
            assert!(out.contains(sub), "{sub}");
        }
    }
}
