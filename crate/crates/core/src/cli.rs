//! Command-line front end: `generate`, `stats`, `train`, `eval`, `embed`.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::datagen::{analyze_graph, class_summary, generate, neighbor_risk_histogram, DatagenError, GenConfig, HIST_BINS};
use crate::features::build_feature_table;
use crate::graph::{load_graph, save_graph, TribeStyleGraph};
use crate::model::{Ablation, Model, ModelError};
use crate::training::{evaluate, train, EpochRecord, TrainConfig, TrainError};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "tribe-gnn", version, about = "Hierarchical GNN on tribe-style graphs")]
struct Cli {
    /// Worker threads for tribe-level parallel work.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic graph directory.
    Generate {
        /// Generator JSON; defaults are used for missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write tribe statistics, class means, neighbor histogram and features.
    Stats {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write metrics, the epoch curve and a checkpoint.
    Train {
        #[arg(long)]
        graph: PathBuf,
        /// Training JSON; defaults are used for missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        ablation: AblationArg,
    },
    /// Score every labeled node with a saved model.
    Eval {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump eval-mode tribe representations.
    Embed {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
struct AblationArg {
    /// Comma list of parts to remove: tse, ggrl, cl, fusion, attrs, emb.
    #[arg(long, value_parser = Ablation::parse_list)]
    ablation: Option<Ablation>,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Data(_) => EXIT_DATA,
            CliError::Numerical(_) => EXIT_NUMERICAL,
        }
    }
}

fn data<E: std::fmt::Display>(ctx: &str) -> impl Fn(E) -> CliError + '_ {
    move |e| CliError::Data(format!("{ctx}: {e}"))
}

fn write_err<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Data(format!("write failed: {e}"))
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Data(e.to_string())
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Data(e.to_string())
        }
    }
}

impl From<DatagenError> for CliError {
    fn from(e: DatagenError) -> Self {
        CliError::Data(e.to_string())
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    if cli.threads == 0 {
        eprintln!("error: --threads must be at least 1");
        return EXIT_USAGE;
    }
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start thread pool: {e}");
            return EXIT_DATA;
        }
    };
    match pool.install(|| execute(cli.command)) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(cmd: Command) -> Result<String, CliError> {
    match cmd {
        Command::Generate { config, out, seed } => {
            let mut cfg = match config {
                Some(p) => GenConfig::from_json(&read_text(&p)?).map_err(data("generator config"))?,
                None => GenConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let g = generate(&cfg)?;
            save_graph(&g, &out).map_err(data("writing graph"))?;
            let risky = g.global().labels().iter().filter(|l| **l == Some(true)).count();
            Ok(format!(
                "generated {} tribes ({} risky), {} global edges -> {}",
                g.n_central(),
                risky,
                g.global().edges().len(),
                out.display()
            ))
        }
        Command::Stats { graph, out } => {
            let g = load(&graph)?;
            create_dir(&out)?;
            write_stats(&g, &out)
        }
        Command::Train { graph, config, out, seed, ablation } => {
            let mut cfg = match config {
                Some(p) => TrainConfig::from_json(&read_text(&p)?).map_err(data("training config"))?,
                None => TrainConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(a) = ablation.ablation {
                cfg.set_ablation(cfg.ablation().merge(a));
            }
            let g = load(&graph)?;
            create_dir(&out)?;
            let outcome = train::<f64>(&g, &cfg)?;
            write_json(&out.join("metrics.json"), &outcome.report)?;
            write_epochs(&out.join("epochs.csv"), &outcome.report.epochs)?;
            let file = create(&out.join("checkpoint.csv"))?;
            outcome.model.save_checkpoint(BufWriter::new(file))?;
            let r = &outcome.report;
            Ok(format!("test auc {:.4} f1 {:.4} (best epoch {}) -> {}", r.test.auc, r.test.f1, r.best_epoch, out.display()))
        }
        Command::Eval { graph, checkpoint, out } => {
            let (g, model) = load_with_model(&graph, &checkpoint)?;
            let prepared = model.prepare(&g)?;
            let idx = g.global().labeled_nodes();
            let m = evaluate(&model, &prepared, &idx)?;
            create_parent(&out)?;
            write_json(&out, &m)?;
            Ok(format!("auc {:.4} f1 {:.4} over {} labeled nodes", m.auc, m.f1, idx.len()))
        }
        Command::Embed { graph, checkpoint, out } => {
            let (g, model) = load_with_model(&graph, &checkpoint)?;
            let prepared = model.prepare(&g)?;
            let emb = model.embed(&prepared)?;
            create_parent(&out)?;
            let mut w = csv::Writer::from_writer(BufWriter::new(create(&out)?));
            let mut header = vec!["central_id".to_string()];
            header.extend((0..emb.cols()).map(|c| format!("h{c}")));
            w.write_record(&header).map_err(write_err)?;
            for i in 0..emb.rows() {
                let mut rec = vec![i.to_string()];
                rec.extend(emb.row(i).iter().map(f64::to_string));
                w.write_record(&rec).map_err(write_err)?;
            }
            w.flush().map_err(write_err)?;
            Ok(format!("wrote {} x {} embeddings -> {}", emb.rows(), emb.cols(), out.display()))
        }
    }
}

fn read_text(p: &Path) -> Result<String, CliError> {
    fs::read_to_string(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))
}

fn load(dir: &Path) -> Result<TribeStyleGraph, CliError> {
    load_graph(dir).map_err(data("loading graph"))
}

fn load_with_model(graph: &Path, checkpoint: &Path) -> Result<(TribeStyleGraph, Model<f64>), CliError> {
    let file = File::open(checkpoint).map_err(|e| CliError::Data(format!("{}: {e}", checkpoint.display())))?;
    let model = Model::<f64>::load_checkpoint(BufReader::new(file))?;
    Ok((load(graph)?, model))
}

fn create_dir(p: &Path) -> Result<(), CliError> {
    fs::create_dir_all(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))
}

fn create_parent(p: &Path) -> Result<(), CliError> {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => create_dir(d),
        _ => Ok(()),
    }
}

fn create(p: &Path) -> Result<File, CliError> {
    File::create(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))
}

fn write_json<T: serde::Serialize>(p: &Path, v: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(v).map_err(data("serializing"))?;
    text.push('\n');
    fs::write(p, text).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))
}

fn write_epochs(p: &Path, rows: &[EpochRecord]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(create(p)?);
    for r in rows {
        w.serialize(r).map_err(write_err)?;
    }
    w.flush().map_err(write_err)
}

fn write_stats(g: &TribeStyleGraph, out: &Path) -> Result<String, CliError> {
    let stats = analyze_graph(g);
    let labels = g.global().labels();

    let mut w = csv::Writer::from_writer(create(&out.join("tribe_stats.csv"))?);
    w.write_record(["tribe_id", "label", "degree_centrality", "eigenvector_centrality", "clustering_coefficient", "n_bridges", "central_degree"])
        .map_err(write_err)?;
    for (i, s) in stats.iter().enumerate() {
        let label = labels[i].map_or("-1", |l| if l { "1" } else { "0" });
        w.write_record([
            i.to_string(),
            label.to_string(),
            s.degree_centrality.to_string(),
            s.eigenvector_centrality.to_string(),
            s.clustering_coefficient.to_string(),
            s.n_bridges.to_string(),
            s.central_degree.to_string(),
        ])
        .map_err(write_err)?;
    }
    w.flush().map_err(write_err)?;

    let summary = class_summary(g, &stats);
    let mut w = csv::Writer::from_writer(create(&out.join("class_summary.csv"))?);
    w.write_record(["class", "count", "degree_centrality", "eigenvector_centrality", "clustering_coefficient", "n_bridges", "central_degree"])
        .map_err(write_err)?;
    for c in &summary {
        w.write_record([
            if c.risky { "risky" } else { "normal" }.to_string(),
            c.count.to_string(),
            c.degree_centrality.to_string(),
            c.eigenvector_centrality.to_string(),
            c.clustering_coefficient.to_string(),
            c.n_bridges.to_string(),
            c.central_degree.to_string(),
        ])
        .map_err(write_err)?;
    }
    w.flush().map_err(write_err)?;

    let mut w = csv::Writer::from_writer(create(&out.join("neighbor_hist.csv"))?);
    w.write_record(["bin_low", "bin_high", "risky_count", "risky_fraction", "normal_count", "normal_fraction"]).map_err(write_err)?;
    let hist_note = match neighbor_risk_histogram(g) {
        Ok(h) => {
            let (rf, nf) = (h.risky_fraction(), h.normal_fraction());
            for b in 0..HIST_BINS {
                w.write_record([
                    format!("{:.1}", b as f64 / HIST_BINS as f64),
                    format!("{:.1}", (b + 1) as f64 / HIST_BINS as f64),
                    h.risky[b].to_string(),
                    rf[b].to_string(),
                    h.normal[b].to_string(),
                    nf[b].to_string(),
                ])
                .map_err(write_err)?;
            }
            let (r, n) = h.mass_above_08();
            format!("risky-neighbor share >= 0.8: risky {r:.3}, normal {n:.3}")
        }
        Err(DatagenError::NoEdges) => "no global edges; neighbor histogram left empty".to_string(),
        Err(e) => return Err(e.into()),
    };
    w.flush().map_err(write_err)?;

    let mut w = BufWriter::new(create(&out.join("features.csv"))?);
    writeln!(w, "tribe_id,local_id,deg_in,deg_out,kind,spd,eig").map_err(write_err)?;
    for t in g.tribes() {
        let ft = build_feature_table::<f64>(t).map_err(data("structural features"))?;
        for v in 0..t.len() {
            writeln!(w, "{},{},{},{},{},{},{}", t.tribe_id(), v, ft.deg_in[v], ft.deg_out[v], ft.kind[v].code(), ft.spd[v], ft.eig[v])
                .map_err(write_err)?;
        }
    }
    w.flush().map_err(write_err)?;

    let mut text = format!("{} tribes analyzed -> {}\n", g.n_central(), out.display());
    for c in &summary {
        text.push_str(&format!(
            "{:>6}: n={} degree {:.3} eigenvector {:.3} clustering {:.3} bridges {:.1} central degree {:.1}\n",
            if c.risky { "risky" } else { "normal" },
            c.count,
            c.degree_centrality,
            c.eigenvector_centrality,
            c.clustering_coefficient,
            c.n_bridges,
            c.central_degree
        ));
    }
    text.push_str(&hist_note);
    Ok(text)
}
