use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use debris_core::config::SurveyConfig;
use debris_core::interface::{self, http, AppError, Providers};
use debris_core::store::SurveyStore;

/// Aerial marine-debris survey tool.
#[derive(Parser)]
#[command(name = "debris", version)]
struct Cli {
    /// Store directory.
    #[arg(long, env = "DEBRIS_STORE", default_value = "debris-store", global = true)]
    store: PathBuf,
    /// Survey config file (TOML).
    #[arg(long, env = "DEBRIS_CONFIG", global = true)]
    config: Option<PathBuf>,
    /// Machine-readable output; errors go to stderr as JSON.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Add every JPEG/PNG of a directory to a survey.
    Ingest {
        dir: PathBuf,
        /// Existing or new survey id; a fresh one is allocated when omitted.
        #[arg(long)]
        survey: Option<String>,
    },
    /// Detect and classify debris in all survey images.
    Detect {
        #[arg(long)]
        survey: String,
    },
    /// Group cross-frame duplicates and pick one survivor per group.
    Dedup {
        #[arg(long)]
        survey: String,
    },
    /// Write the survey as CSV or GeoJSON.
    Export {
        #[arg(long)]
        survey: String,
        #[arg(long, value_enum)]
        format: Format,
        /// Output file; stdout when omitted.
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Replace a survey's records with a CSV export.
    Import {
        #[arg(long)]
        survey: String,
        csv: PathBuf,
    },
    /// Score the survey's records against annotations (JSON, or CSV by extension).
    Evaluate {
        #[arg(long)]
        survey: String,
        #[arg(long)]
        truth: PathBuf,
    },
    /// Per-class counts and hotspot summaries.
    Stats {
        #[arg(long)]
        survey: String,
    },
    /// Print the effective configuration.
    Config,
    /// Start the HTTP API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Geojson,
}

fn emit<T: Serialize>(json: bool, value: &T, text: impl FnOnce() -> String) {
    let mut out = std::io::stdout().lock();
    if json {
        let _ = writeln!(out, "{}", serde_json::to_string_pretty(value).expect("plain data"));
    } else {
        let _ = write!(out, "{}", text());
    }
}

fn open_store(cli: &Cli) -> Result<SurveyStore, AppError> {
    Ok(SurveyStore::open(&cli.store)?)
}

fn run(cli: &Cli) -> Result<(), AppError> {
    let cfg = SurveyConfig::discover(cli.config.as_deref())?;
    match &cli.command {
        Command::Ingest { dir, survey } => {
            let store = open_store(cli)?;
            let s = interface::ingest_dir(&store, survey.as_deref(), dir, &cfg)?;
            emit(cli.json, &s, || {
                let mut t = format!("survey {}\n", s.survey_id);
                for img in &s.images {
                    let place = match &img.meta {
                        Some(m) => format!("{:.6}, {:.6} at {} m", m.latitude, m.longitude, m.altitude),
                        None => "unmapped (no GPS)".into(),
                    };
                    t += &format!("  {:<24} {}x{}  {}\n", img.image_id, img.width, img.height, place);
                }
                for r in &s.rejected {
                    t += &format!("  {:<24} rejected: {}\n", r.image_id, r.reason);
                }
                t
            });
        }
        Command::Detect { survey } => {
            let store = open_store(cli)?;
            let providers = Providers::from_config(&cfg);
            let s = interface::detect_survey(&store, survey, &cfg, &providers)?;
            for w in &s.warnings {
                eprintln!("warning: {w}");
            }
            emit(cli.json, &s, || {
                let mut t = format!("{} records from {} images\n", s.records, s.images);
                for f in &s.failures {
                    t += &format!("  failed {}: {}\n", f.image_id, f.reason);
                }
                t
            });
        }
        Command::Dedup { survey } => {
            let store = open_store(cli)?;
            let r = interface::dedup_stored(&store, survey, &cfg)?;
            for w in &r.warnings {
                eprintln!("warning: {w}");
            }
            emit(cli.json, &r, || {
                let mut t = format!(
                    "{} candidate pairs, {} SIFT comparisons, {} groups, {} of {} records survive\n",
                    r.candidate_pairs,
                    r.sift_comparisons,
                    r.groups.len(),
                    r.surviving,
                    r.records
                );
                for g in &r.groups {
                    t += &format!("  {}  keep {}  members {}\n", g.group_id, g.canonical, g.members.join(" "));
                }
                t
            });
        }
        Command::Export { survey, format, output } => {
            let store = open_store(cli)?;
            let bytes = match format {
                Format::Csv => interface::export_csv(&store, survey)?,
                Format::Geojson => interface::export_geojson(&store, survey, &cfg)?,
            };
            match output {
                Some(p) => std::fs::write(p, bytes)
                    .map_err(|e| AppError::Data(format!("cannot write {}: {e}", p.display())))?,
                None => {
                    let _ = std::io::stdout().lock().write_all(&bytes);
                }
            }
        }
        Command::Import { survey, csv } => {
            let store = open_store(cli)?;
            let bytes = std::fs::read(csv).map_err(|e| AppError::Data(format!("cannot read {}: {e}", csv.display())))?;
            let n = interface::import_csv(&store, survey, &bytes, &cfg)?;
            emit(cli.json, &serde_json::json!({"survey_id": survey, "records": n}), || {
                format!("imported {n} records into {survey}\n")
            });
        }
        Command::Evaluate { survey, truth } => {
            let store = open_store(cli)?;
            let report = interface::evaluate_stored(&store, survey, truth, &cfg)?;
            emit(cli.json, &report, || {
                format!(
                    "{}\n{}\n",
                    report.to_table(),
                    serde_json::to_string_pretty(&report).expect("plain data")
                )
            });
        }
        Command::Stats { survey } => {
            let store = open_store(cli)?;
            let s = interface::stats(&store, survey, &cfg)?;
            emit(cli.json, &s, || {
                let mut t = format!(
                    "{} records, {} after duplicate removal, {} unmapped\n",
                    s.total_records, s.surviving_records, s.unmapped_records
                );
                for c in &s.classes {
                    t += &format!("  {:<14}{:>6}\n", c.label, c.count);
                }
                for c in &s.clusters {
                    t += &format!(
                        "  hotspot {} : {} objects near {:.6}, {:.6}\n",
                        c.cluster_id, c.size, c.centroid.latitude, c.centroid.longitude
                    );
                }
                t
            });
        }
        Command::Config => {
            emit(cli.json, &cfg, || cfg.to_toml());
        }
        Command::Serve { port, host } => {
            let store = Arc::new(open_store(cli)?);
            let state = Arc::new(http::AppState::new(store, cfg));
            let addr = std::net::SocketAddr::new(*host, *port);
            let rt = tokio::runtime::Runtime::new().map_err(|e| AppError::Config(e.to_string()))?;
            eprintln!("listening on http://{addr}");
            rt.block_on(http::serve(state, addr))
                .map_err(|e| AppError::Config(format!("cannot serve on {addr}: {e}")))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if cli.json {
                let body = serde_json::json!({
                    "error": e.kind(),
                    "message": e.to_string(),
                    "exit_code": e.exit_code(),
                });
                eprintln!("{body}");
            } else {
                eprintln!("error: {e}");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
