//! Command-line workflows: `select`, `simulate` and `report`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{ColumnType, Dataset};
use crate::design::{build_design, DesignOptions};
use crate::error::{Error, Result};
use crate::exec::{derive_seed, init_threads};
use crate::family::Family;
use crate::formula::{parse_formula, ModelFormula};
use crate::projector::{ProjectionResult, ReferenceFit, DEFAULT_EVAL_CLUSTERS, DEFAULT_SEARCH_CLUSTERS};
use crate::reference::ApproxPosterior;
use crate::search::SolutionPath;
use crate::select::{select, SelectOptions, Selection};
use crate::simulate::{run_grid, threshold_grid, GridOptions, GridResults, SimConfig};
use crate::validate::{DrawsReference, LooMode, LooReference};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Select,
    Simulate,
    Report,
}

#[derive(Debug, Parser)]
#[command(name = "projpred", version, about = "Projection predictive variable and structure selection")]
pub struct Args {
    pub command: Command,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

fn default_search_clusters() -> usize {
    DEFAULT_SEARCH_CLUSTERS
}
fn default_eval_clusters() -> usize {
    DEFAULT_EVAL_CLUSTERS
}
fn default_se_multiplier() -> f64 {
    1.0
}
fn default_n_draws() -> usize {
    200
}
fn default_true() -> bool {
    true
}
fn default_replicates() -> usize {
    25
}
fn default_thresholds() -> usize {
    20
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    #[serde(default = "default_search_clusters")]
    pub search_clusters: usize,
    #[serde(default = "default_eval_clusters")]
    pub eval_clusters: usize,
    #[serde(default)]
    pub max_size: Option<usize>,
    #[serde(default = "default_se_multiplier")]
    pub se_multiplier: f64,
    #[serde(default)]
    pub loo_mode: LooMode,
    /// Draws of the internal approximate reference when no draws file is given.
    #[serde(default = "default_n_draws")]
    pub n_draws: usize,
    /// One covariance block per grouping factor (otherwise independent terms).
    #[serde(default = "default_true")]
    pub correlated: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub grid: Vec<SimConfig>,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    /// Number of threshold steps between 0 and 1.
    #[serde(default = "default_thresholds")]
    pub thresholds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub command: Option<Command>,
    #[serde(default)]
    pub data_path: Option<PathBuf>,
    /// CSV of reference means, one row per draw and one column per
    /// observation; an optional `phi` column holds Gaussian SD draws.
    #[serde(default)]
    pub draws_path: Option<PathBuf>,
    #[serde(default)]
    pub formula: Option<String>,
    #[serde(default)]
    pub family: Option<String>,
    #[serde(default)]
    pub column_types: BTreeMap<String, ColumnType>,
    #[serde(default)]
    pub search: SearchConfig,
    #[serde(default)]
    pub simulate: Option<SimulateConfig>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    fn output_dir(&self) -> Result<&Path> {
        self.output_dir
            .as_deref()
            .ok_or_else(|| Error::Config("output directory missing (set output_dir or --output)".into()))
    }

    /// Checks the fields each command needs.
    pub fn validate(&self, command: Command) -> Result<()> {
        self.output_dir()?;
        match command {
            Command::Select => {
                let data = self.data_path.as_ref().ok_or_else(|| Error::Config("select needs data_path".into()))?;
                for p in std::iter::once(data).chain(self.draws_path.as_ref()) {
                    if !p.exists() {
                        return Err(Error::Config(format!("{} does not exist", p.display())));
                    }
                }
                if self.formula.is_none() {
                    return Err(Error::Config("select needs a formula".into()));
                }
                if self.search.search_clusters == 0 || self.search.eval_clusters == 0 {
                    return Err(Error::Config("cluster counts must be positive".into()));
                }
            }
            Command::Simulate => {
                let sim = self.simulate.as_ref().ok_or_else(|| Error::Config("simulate needs a `simulate` section".into()))?;
                if sim.grid.is_empty() || sim.replicates == 0 || sim.thresholds == 0 {
                    return Err(Error::Config("simulate needs a nonempty grid, replicates and thresholds".into()));
                }
                for c in &sim.grid {
                    c.validate()?;
                }
            }
            Command::Report => {}
        }
        Ok(())
    }

    fn formula(&self) -> Result<ModelFormula> {
        let mut f = parse_formula(self.formula.as_deref().unwrap_or_default())?;
        if let Some(fam) = &self.family {
            f = f.with_family(fam.parse::<Family>()?);
        }
        Ok(f)
    }

    fn select_options(&self) -> SelectOptions {
        let mut o = SelectOptions {
            se_multiplier: self.search.se_multiplier,
            ..Default::default()
        };
        o.loo.mode = self.search.loo_mode;
        o.loo.search_clusters = self.search.search_clusters;
        o.loo.eval_clusters = self.search.eval_clusters;
        o.loo.seed = self.seed;
        o.loo.search.max_size = self.search.max_size;
        o.loo.search.design = self.design_options();
        o
    }

    fn design_options(&self) -> DesignOptions {
        DesignOptions {
            correlated: self.search.correlated,
            ..Default::default()
        }
    }
}

/// Process exit status for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Numerical(_) => 3,
        Error::Io { .. } => 4,
        Error::Csv(e) if matches!(e.kind(), csv::ErrorKind::Io(_)) => 4,
        _ => 2,
    }
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let p = dir.join(name);
    fs::write(&p, contents).map_err(|e| Error::io(p, e))
}

fn csv_writer(dir: &Path, name: &str) -> Result<csv::Writer<fs::File>> {
    let p = dir.join(name);
    let f = fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
    Ok(csv::Writer::from_writer(f))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Reads a draws CSV: a header, then one row per draw.
pub fn read_draws(path: &Path, family: Family, n_obs: usize) -> Result<ReferenceFit> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other:?}", path.display())),
    })?;
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let phi_col = headers.iter().position(|h| h == "phi");
    let mut mu = Vec::new();
    let mut phi = Vec::new();
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec?;
        for (j, v) in rec.iter().enumerate() {
            let x: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::Data(format!("{} row {}: `{v}` is not a number", path.display(), rows + 1)))?;
            if Some(j) == phi_col {
                phi.push(x);
            } else {
                mu.push(x);
            }
        }
        rows += 1;
    }
    let cols = headers.len() - usize::from(phi_col.is_some());
    if cols != n_obs || mu.len() != rows * cols {
        return Err(Error::Data(format!("draws file has {cols} mean columns, data has {n_obs} observations")));
    }
    if family.has_dispersion() && phi.is_empty() {
        return Err(Error::Data("Gaussian draws need a `phi` column".into()));
    }
    ReferenceFit::new(family, DMatrix::from_row_slice(rows, cols, &mu), phi)
}

#[derive(Serialize)]
struct ProjectionReport<'a> {
    size: usize,
    formula: String,
    coefficient_names: &'a [String],
    projection: &'a ProjectionResult,
}

pub fn run_select(cfg: &RunConfig) -> Result<Selection> {
    cfg.validate(Command::Select)?;
    let out = cfg.output_dir()?;
    let full = cfg.formula()?;
    let data = Dataset::from_csv(cfg.data_path.as_deref().expect("validated"), &full.response, &cfg.column_types)?;
    let opts = cfg.select_options();
    let reference: Box<dyn LooReference> = match &cfg.draws_path {
        Some(p) => Box::new(DrawsReference::new(read_draws(p, full.family, data.n_obs())?, data.response.clone())?),
        None => Box::new(ApproxPosterior::fit(&data, &full, &opts.loo.search.design, cfg.search.n_draws, cfg.seed, 1.0)?),
    };
    let sel = select(&full, reference.as_ref(), &data, &opts)?;

    create_dir(out)?;
    write_file(out, "path.json", &serde_json::to_string_pretty(&sel.path)?)?;
    let mut w = csv_writer(out, "elpd.csv")?;
    w.write_record(["size", "formula", "kl", "elpd", "se", "diff", "diff_se", "flags"])?;
    w.write_record(["reference", &full.render(), "0", &sel.loo.reference.elpd.to_string(), &sel.loo.reference.se.to_string(), "0", "0", "0"])?;
    for (s, sm) in sel.loo.sizes.iter().enumerate() {
        let kl = if s == 0 { sel.path.intercept_kl } else { sel.path.entries[s - 1].kl };
        let (d, dse) = sm.diff_vs_reference.unwrap_or((0.0, 0.0));
        let f = ModelFormula::render_terms(&full.response, &sel.path.terms_at(s));
        w.write_record([s.to_string(), f, kl.to_string(), sm.elpd.to_string(), sm.se.to_string(), d.to_string(), dse.to_string(), sm.flags.len().to_string()])?;
    }
    w.flush().map_err(|e| Error::io(out.join("elpd.csv"), e))?;
    let mut w = csv_writer(out, "pointwise.csv")?;
    w.write_record(["size", "observation", "lpd"])?;
    for (i, v) in sel.loo.reference.pointwise.iter().enumerate() {
        w.write_record(["reference".to_string(), i.to_string(), v.to_string()])?;
    }
    for (s, sm) in sel.loo.sizes.iter().enumerate() {
        for (i, v) in sm.pointwise.iter().enumerate() {
            w.write_record([s.to_string(), i.to_string(), v.to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io(out.join("pointwise.csv"), e))?;

    let k = sel.suggested_size;
    let terms = sel.path.terms_at(k);
    let design = build_design(&data, &terms, &opts.loo.search.design)?;
    let report = ProjectionReport {
        size: k,
        formula: ModelFormula::render_terms(&full.response, &terms),
        coefficient_names: &design.x_names,
        projection: &sel.loo.projections[k],
    };
    write_file(out, &format!("projection_{k}.json"), &serde_json::to_string_pretty(&report)?)?;
    Ok(sel)
}

pub fn simulate_options(sim: &SimulateConfig, search: &SearchConfig) -> GridOptions {
    let mut o = GridOptions {
        n_draws: search.n_draws,
        thresholds: threshold_grid(sim.thresholds),
        ..Default::default()
    };
    o.select.se_multiplier = search.se_multiplier;
    o.select.loo.mode = search.loo_mode;
    o.select.loo.search_clusters = search.search_clusters;
    o.select.loo.eval_clusters = search.eval_clusters;
    o.select.loo.search.max_size = search.max_size;
    o.select.loo.search.design.correlated = search.correlated;
    o
}

const CELL_COLUMNS: [&str; 9] = ["cell", "d", "v", "k", "rho", "l", "n", "family", "s"];

fn cell_fields(cell: usize, c: &SimConfig) -> Vec<String> {
    vec![
        cell.to_string(),
        c.d.to_string(),
        c.v.to_string(),
        c.k.to_string(),
        c.rho.to_string(),
        c.l.to_string(),
        c.n.to_string(),
        c.family.to_string(),
        c.s.to_string(),
    ]
}

pub fn write_grid_results(out: &Path, grid: &[SimConfig], res: &GridResults) -> Result<()> {
    create_dir(out)?;
    let mut w = csv_writer(out, "grid_results.csv")?;
    let mut header: Vec<&str> = CELL_COLUMNS.to_vec();
    header.extend(["replicate", "seed", "suggested_size", "total_terms", "elpd_ref", "elpd_at_suggested", "diff", "diff_se", "path", "status"]);
    w.write_record(&header)?;
    for r in &res.replicates {
        let mut row = cell_fields(r.cell, &grid[r.cell]);
        row.extend([
            r.replicate.to_string(),
            r.seed.to_string(),
            r.suggested_size.to_string(),
            r.total_terms.to_string(),
            r.elpd_ref.to_string(),
            r.elpd_at_suggested.to_string(),
            r.diff_at_suggested.to_string(),
            r.diff_se_at_suggested.to_string(),
            r.terms.iter().map(|t| t.id()).collect::<Vec<_>>().join(" "),
            "ok".to_string(),
        ]);
        w.write_record(&row)?;
    }
    for (c, r, e) in &res.failures {
        let mut row = cell_fields(*c, &grid[*c]);
        row.extend([r.to_string(), String::new(), String::new(), String::new(), String::new(), String::new(), String::new(), String::new(), String::new(), format!("failed: {e}")]);
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(out.join("grid_results.csv"), e))?;

    let mut w = csv_writer(out, "roc.csv")?;
    let mut header: Vec<&str> = CELL_COLUMNS.to_vec();
    header.extend(["replicate", "t", "tpr", "fpr"]);
    w.write_record(&header)?;
    for r in &res.replicates {
        for p in &r.roc {
            let mut row = cell_fields(r.cell, &grid[r.cell]);
            row.extend([r.replicate.to_string(), p.t.to_string(), opt(p.tpr), opt(p.fpr)]);
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(|e| Error::io(out.join("roc.csv"), e))?;

    let mut w = csv_writer(out, "grid_summary.csv")?;
    let mut header: Vec<&str> = CELL_COLUMNS.to_vec();
    header.extend(["replicates", "failures", "mean_relative_size", "lower_2.5", "upper_97.5", "auc"]);
    w.write_record(&header)?;
    for c in &res.cells {
        let mut row = cell_fields(c.cell, &c.config);
        row.extend([
            c.replicates.to_string(),
            c.failures.to_string(),
            c.mean_relative_size.to_string(),
            c.lower.to_string(),
            c.upper.to_string(),
            c.auc.to_string(),
        ]);
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(out.join("grid_summary.csv"), e))
}

pub fn run_simulate(cfg: &RunConfig) -> Result<GridResults> {
    cfg.validate(Command::Simulate)?;
    let sim = cfg.simulate.as_ref().expect("validated");
    let grid: Vec<SimConfig> = sim
        .grid
        .iter()
        .enumerate()
        .map(|(c, g)| SimConfig {
            seed: if g.seed == 0 { derive_seed(cfg.seed, c as u64) } else { g.seed },
            ..g.clone()
        })
        .collect();
    let opts = simulate_options(sim, &cfg.search);
    let res = run_grid(&grid, sim.replicates, &opts)?;
    write_grid_results(cfg.output_dir()?, &grid, &res)?;
    Ok(res)
}

/// Human-readable summary of a solution path.
pub fn summarize_path(path: &SolutionPath) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "Solution path for `{}` ({} of {} terms searched)", path.response, path.len(), path.total_terms);
    if let (Some(e), Some(se)) = (path.reference_elpd, path.reference_se) {
        let _ = writeln!(s, "Reference ELPD: {e:.3} (se {se:.3})");
    }
    let _ = writeln!(s, "\n{:>4}  {:>12}  {:>10}  {:>10}  {:>8}  formula", "size", "kl", "elpd", "diff", "diff_se");
    for size in 0..=path.len() {
        let kl = if size == 0 { path.intercept_kl } else { path.entries[size - 1].kl };
        let f = ModelFormula::render_terms(&path.response, &path.terms_at(size));
        let st = path.stats_at(size);
        let fmt = |v: Option<f64>, w: usize| v.map(|x| format!("{x:>w$.3}")).unwrap_or_else(|| format!("{:>w$}", "-"));
        let _ = writeln!(
            s,
            "{size:>4}  {kl:>12.6}  {}  {}  {}  {f}",
            fmt(st.map(|x| x.elpd), 10),
            fmt(st.map(|x| x.diff), 10),
            fmt(st.map(|x| x.diff_se), 8)
        );
    }
    match path.suggested_size {
        Some(k) => {
            let _ = writeln!(s, "\nSuggested size: {k}\nSuggested model: {}", ModelFormula::render_terms(&path.response, &path.terms_at(k)));
        }
        None => {
            let _ = writeln!(s, "\nNo suggested size (LOO summaries missing)");
        }
    }
    s
}

/// Reads `path.json` from the output directory and writes `summary.txt`
/// and `path_summary.csv` next to it.
pub fn run_report(cfg: &RunConfig) -> Result<String> {
    cfg.validate(Command::Report)?;
    let dir = cfg.output_dir()?;
    let p = dir.join("path.json");
    if !p.exists() {
        return Err(Error::Config(format!("no path.json in {}", dir.display())));
    }
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let path: SolutionPath = serde_json::from_str(&text)?;
    let summary = summarize_path(&path);
    let mut body = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut body);
        w.write_record(["size", "term", "formula", "kl", "elpd", "se", "diff", "diff_se", "suggested"])?;
        for e in &path.entries {
            let st = e.stats;
            w.write_record([
                e.size.to_string(),
                e.term.id(),
                e.formula.clone(),
                e.kl.to_string(),
                opt(st.map(|x| x.elpd)),
                opt(st.map(|x| x.se)),
                opt(st.map(|x| x.diff)),
                opt(st.map(|x| x.diff_se)),
                (path.suggested_size == Some(e.size)).to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(dir.join("path_summary.csv"), e))?;
    }
    let body = String::from_utf8(body).expect("csv output is utf-8");
    write_file(dir, "summary.txt", &summary)?;
    write_file(dir, "path_summary.csv", &body)?;
    Ok(summary)
}

/// Parses arguments, runs the command and returns the exit status.
pub fn run(args: Args) -> i32 {
    let result = (|| -> Result<()> {
        let mut cfg = match &args.config {
            Some(p) => RunConfig::from_path(p)?,
            None => serde_json::from_str("{}")?,
        };
        if let Some(c) = cfg.command {
            if c != args.command {
                log::warn!("config command {c:?} overridden by {:?}", args.command);
            }
        }
        if let Some(s) = args.seed {
            cfg.seed = s;
        }
        if let Some(o) = &args.output {
            cfg.output_dir = Some(o.clone());
        }
        if let Some(t) = args.threads {
            if t == 0 {
                return Err(Error::Config("--threads must be positive".into()));
            }
            init_threads(t);
        }
        match args.command {
            Command::Select => {
                let sel = run_select(&cfg)?;
                println!("suggested size {} of {}", sel.suggested_size, sel.path.len());
            }
            Command::Simulate => {
                let res = run_simulate(&cfg)?;
                for c in &res.cells {
                    println!(
                        "cell {}: {} replicates, mean relative size {:.3} [{:.3}, {:.3}], auc {:.3}",
                        c.cell, c.replicates, c.mean_relative_size, c.lower, c.upper, c.auc
                    );
                }
            }
            Command::Report => print!("{}", run_report(&cfg)?),
        }
        Ok(())
    })();
    match result {
        Ok(()) => 0,
        Err(e) => {
            let code = exit_code(&e);
            eprintln!("{}", serde_json::json!({ "error": e.to_string(), "exit_code": code }));
            code
        }
    }
}
