use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use aqp_core::lifecycle::Engine;
use aqp_core::{AggKind, EngineConfig, Tuple};
use aqp_harness::config::load_config;
use aqp_harness::convert::{convert_csv, CsvSpec};
use aqp_harness::datagen::{generate_dataset, generate_workload, workload_in, Profile, DOMAIN};
use aqp_harness::runner::{run, RunOptions};
use aqp_harness::stream::{read_ops_file, write_ops, Op};
use aqp_harness::EngineRegistry;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "aqp", version, about = "Replay update streams through approximate range-aggregate engines")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Replay a stream through engines and write an accuracy report.
    Run {
        #[arg(long)]
        stream: PathBuf,
        /// Query ops appended after the stream.
        #[arg(long)]
        queries: Option<PathBuf>,
        /// Engine config, .json or .toml.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "dpt,rs,srs")]
        engines: Vec<String>,
        /// Report path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Leave wall-clock numbers out of the report.
        #[arg(long)]
        omit_timing: bool,
        /// Include one record per query.
        #[arg(long)]
        per_query: bool,
    },
    /// Write a synthetic insert stream.
    GenData {
        #[arg(long, default_value = "uniform")]
        profile: Profile,
        #[arg(long, default_value_t = 10_000)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        d: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Probability of deleting a random live tuple after each insert.
        #[arg(long, default_value_t = 0.0)]
        deletes: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write random range queries.
    GenQueries {
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Stream whose inserted tuples bound the query corners; the
        /// synthetic domain is used when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        d: usize,
        /// Use one aggregate for every query instead of cycling count, sum, avg.
        #[arg(long)]
        kind: Option<AggKind>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Convert a CSV file into an insert stream.
    ConvertCsv {
        #[arg(long)]
        agg_col: String,
        #[arg(long, value_delimiter = ',', required = true)]
        pred_cols: Vec<String>,
        #[arg(long)]
        id_col: Option<String>,
        #[arg(long)]
        skip_bad_rows: bool,
        /// CSV path; stdin when absent.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Replay a stream through the partition-tree engine and print its status.
    Status {
        #[arg(long)]
        stream: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("cannot create {}", p.display()))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn config(path: Option<&Path>) -> Result<EngineConfig> {
    match path {
        Some(p) => load_config(p),
        None => Ok(EngineConfig::default()),
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().cmd {
        Cmd::Run { stream, queries, config: cfg_path, engines, out, omit_timing, per_query } => {
            let cfg = config(cfg_path.as_deref())?;
            let mut ops = read_ops_file(&stream)?;
            if let Some(q) = queries {
                ops.extend(read_ops_file(&q)?);
            }
            let opts = RunOptions { omit_timing, per_query, stream_name: Some(stream.display().to_string()) };
            let report = run(&ops, &cfg, &engines, &EngineRegistry::default(), &opts)?;
            let mut w = output(out.as_deref())?;
            serde_json::to_writer_pretty(&mut w, &report)?;
            writeln!(w)?;
            w.flush()?;
        }
        Cmd::GenData { profile, n, d, seed, deletes, out } => {
            let ops = generate_dataset(seed, profile, n, d, deletes);
            write_ops(output(out.as_deref())?, &ops)?;
        }
        Cmd::GenQueries { n, seed, data, d, kind, out } => {
            let mut qs = match data {
                Some(p) => {
                    let tuples: Vec<Tuple> = read_ops_file(&p)?
                        .into_iter()
                        .filter_map(|o| match o {
                            Op::Insert(t) => Some(t),
                            _ => None,
                        })
                        .collect();
                    let d = tuples.first().map_or(d, |t| t.coords.len());
                    generate_workload(seed, &tuples, n, d)?
                }
                None => workload_in(seed, &vec![0.0; d], &vec![DOMAIN; d], n)?,
            };
            if let Some(k) = kind {
                qs.iter_mut().for_each(|q| q.kind = k);
            }
            let ops: Vec<Op> = qs.into_iter().map(Op::Query).collect();
            write_ops(output(out.as_deref())?, &ops)?;
        }
        Cmd::ConvertCsv { agg_col, pred_cols, id_col, skip_bad_rows, input, out } => {
            let spec = CsvSpec { agg_col, pred_cols, id_col, skip_bad_rows };
            let w = output(out.as_deref())?;
            let n = match input {
                Some(p) => convert_csv(BufReader::new(File::open(&p).with_context(|| format!("cannot open {}", p.display()))?), w, &spec)?,
                None => convert_csv(io::stdin().lock(), w, &spec)?,
            };
            log::info!("converted {n} rows");
        }
        Cmd::Status { stream, config: cfg_path } => {
            let cfg = config(cfg_path.as_deref())?;
            let mut e = Engine::new(cfg)?;
            for (i, op) in read_ops_file(&stream)?.iter().enumerate() {
                match op {
                    Op::Query(q) => {
                        e.query(q).with_context(|| format!("stream op {}", i + 1))?;
                    }
                    _ => e.apply(op.event().expect("update op")).with_context(|| format!("stream op {}", i + 1))?,
                }
            }
            if !e.is_initialized() && e.archive().len() >= e.config().k {
                e.initialize()?;
            }
            let mut w = output(None)?;
            serde_json::to_writer_pretty(&mut w, &e.status())?;
            writeln!(w)?;
            w.flush()?;
        }
    }
    Ok(())
}
