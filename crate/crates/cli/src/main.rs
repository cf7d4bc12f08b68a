use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use dissect_bridge::ServerConfig;
use dissect_core::geometry::{write_tet_mesh, PhantomResolution, PhantomSize, WedgePhantom};
use dissect_core::harness::{
    append_summary_csv, batch, compare_aps, persist_run, run_assist_request, verify_jacobians, MeshSource, Scenario,
    Workbench, OUTPUT_ENV,
};
use dissect_core::Vec3;
use tracing::info;

#[derive(Parser)]
#[command(name = "dissect", version, about = "Simulated dissection-assistance workbench")]
struct Cli {
    /// error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "warn")]
    log_level: String,
    /// Output directory for run artifacts.
    #[arg(long, global = true, env = OUTPUT_ENV)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// One assistance request; prints the report.
    Run {
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Independent trials over seeds, e.g. `0,1,2` or `0..5`.
    Batch {
        scenario: PathBuf,
        #[arg(long)]
        seeds: String,
    },
    /// Per-face APS score map as JSON.
    ApsMap {
        scenario: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// APS against a fixed grasp point over matched seeds.
    CompareAps {
        scenario: PathBuf,
        /// Fixed point `x,y,z` in metres; defaults to 1.5 cm from the segment.
        #[arg(long)]
        fixed: Option<String>,
        #[arg(long, default_value_t = 5)]
        trials: usize,
    },
    /// Analytic Jacobians against finite differences.
    VerifyJacobians {
        scenario: PathBuf,
        #[arg(long, default_value_t = 20)]
        states: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Writes a wedge phantom mesh and optionally a scenario using it.
    GenPhantom {
        #[arg(long, default_value_t = 45.0)]
        angle: f64,
        /// `length,width,height,groove_depth` in metres.
        #[arg(long)]
        size: Option<String>,
        /// `along,across,depth` cell counts.
        #[arg(long)]
        resolution: Option<String>,
        #[arg(long)]
        out: PathBuf,
        /// Also write a scenario file referencing the mesh.
        #[arg(long)]
        scenario: Option<PathBuf>,
    },
    /// WebSocket bridge for the operator UI on `/session`.
    Serve {
        /// Scenario file; the 45 degree groove when omitted.
        scenario: Option<PathBuf>,
        #[arg(long, default_value_t = 8765)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 15_000)]
        heartbeat_ms: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let filter = tracing_subscriber::EnvFilter::try_new(&cli.log_level)
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn"));
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).init();
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn load(path: &Path) -> Result<Scenario> {
    Scenario::load(path).with_context(|| format!("loading {}", path.display()))
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn execute(cli: Cli) -> Result<ExitCode> {
    let out = cli.out_dir.filter(|p| !p.as_os_str().is_empty());
    match cli.command {
        Command::Run { scenario, seed } => {
            let mut s = load(&scenario)?;
            if let Some(seed) = seed {
                s.seed = seed;
            }
            let output = run_assist_request(&s);
            if let Some(root) = &out {
                let dir = persist_run(root, &s, &output)?;
                append_summary_csv(root, [&output.report])?;
                info!(dir = %dir.display(), "persisted");
            }
            print_json(&output.report)?;
            Ok(if output.report.failure.is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            })
        }
        Command::Batch { scenario, seeds } => {
            let s = load(&scenario)?;
            let seeds = parse_seeds(&seeds)?;
            let summary = batch(&s, &seeds)?;
            if let Some(root) = &out {
                for o in &summary.outputs {
                    let mut per = s.clone();
                    per.seed = o.report.seed;
                    persist_run(root, &per, o)?;
                }
                append_summary_csv(root, summary.reports())?;
            }
            let reports: Vec<_> = summary.reports().collect();
            print_json(&serde_json::json!({ "stats": summary.stats, "reports": reports }))?;
            Ok(ExitCode::SUCCESS)
        }
        Command::ApsMap { scenario, output } => {
            let bench = Workbench::prepare(&load(&scenario)?)?;
            let map = bench.aps_map()?.to_json();
            let text = serde_json::to_string_pretty(&map)?;
            match output {
                Some(p) => std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?,
                None => println!("{text}"),
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::CompareAps { scenario, fixed, trials } => {
            let s = load(&scenario)?;
            let point = match fixed {
                Some(f) => parse_vec3(&f)?,
                None => s.default_fixed_point(),
            };
            let table = compare_aps(&s, &point, trials)?;
            if let Some(root) = &out {
                std::fs::create_dir_all(root)?;
                std::fs::write(root.join("comparison.json"), serde_json::to_string_pretty(&table)?)?;
                append_summary_csv(root, table.rows.iter().flat_map(|r| [&r.aps, &r.fixed]))?;
            }
            print!("{}", table.to_markdown());
            Ok(ExitCode::SUCCESS)
        }
        Command::VerifyJacobians { scenario, states, seed } => {
            let bench = Workbench::prepare(&load(&scenario)?)?;
            let check = verify_jacobians(&bench, states, seed)?;
            let worst = check.max_observation_error();
            print_json(&serde_json::json!({
                "states": states,
                "max_observation_error": worst,
                "observation_errors": check.observation_errors,
                "deformation_error": check.deformation_error,
            }))?;
            Ok(if worst < 1e-4 {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(3)
            })
        }
        Command::GenPhantom {
            angle,
            size,
            resolution,
            out: mesh_path,
            scenario,
        } => {
            let phantom = WedgePhantom {
                opening_angle_deg: angle,
                size: match size {
                    Some(t) => {
                        let [length, width, height, groove_depth] = parse_floats::<4>(&t)?;
                        PhantomSize {
                            length,
                            width,
                            height,
                            groove_depth,
                        }
                    }
                    None => PhantomSize::default(),
                },
                resolution: match resolution {
                    Some(t) => {
                        let [along, across, depth] = parse_counts::<3>(&t)?;
                        PhantomResolution { along, across, depth }
                    }
                    None => PhantomResolution::default(),
                },
            };
            let mesh = phantom.generate()?;
            std::fs::write(&mesh_path, write_tet_mesh(&mesh))
                .with_context(|| format!("writing {}", mesh_path.display()))?;
            if let Some(sp) = scenario {
                let mut s = Scenario::phantom("phantom", phantom.clone());
                let rel = mesh_path
                    .canonicalize()
                    .ok()
                    .zip(sp.parent().and_then(|d| d.canonicalize().ok()))
                    .and_then(|(m, d)| m.strip_prefix(&d).ok().map(Path::to_path_buf))
                    .unwrap_or_else(|| mesh_path.clone());
                s.mesh = MeshSource::File { path: rel };
                std::fs::write(&sp, s.to_json()).with_context(|| format!("writing {}", sp.display()))?;
            }
            eprintln!(
                "{} vertices, {} tets, {} surface faces",
                mesh.vertex_count(),
                mesh.tets.len(),
                mesh.surface.face_count()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Serve {
            scenario,
            port,
            host,
            heartbeat_ms,
        } => {
            let s = match scenario {
                Some(p) => load(&p)?,
                None => Scenario::p1_analogue(),
            };
            let addr: SocketAddr = format!("{host}:{port}").parse().context("bad host or port")?;
            let config = ServerConfig {
                heartbeat: Duration::from_millis(heartbeat_ms),
                output_dir: out,
            };
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(dissect_bridge::serve(&s, addr, config))?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    if let Some((a, b)) = text.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse()?, b.trim().parse()?);
        if b <= a {
            bail!("empty seed range {text}");
        }
        return Ok((a..b).collect());
    }
    text.split(',')
        .map(|t| t.trim().parse::<u64>().with_context(|| format!("bad seed {t:?}")))
        .collect()
}

fn parse_floats<const N: usize>(text: &str) -> Result<[f64; N]> {
    let v: Vec<f64> = text
        .split(',')
        .map(|t| t.trim().parse::<f64>().with_context(|| format!("bad number {t:?}")))
        .collect::<Result<_>>()?;
    v.try_into().map_err(|v: Vec<f64>| anyhow::anyhow!("expected {N} comma-separated values, got {}", v.len()))
}

fn parse_counts<const N: usize>(text: &str) -> Result<[usize; N]> {
    let f = parse_floats::<N>(text)?;
    if f.iter().any(|x| x.fract() != 0.0 || *x < 1.0) {
        bail!("cell counts must be positive integers");
    }
    Ok(f.map(|x| x as usize))
}

fn parse_vec3(text: &str) -> Result<Vec3> {
    let [x, y, z] = parse_floats::<3>(text)?;
    Ok(Vec3::new(x, y, z))
}
