use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use vmfcl::backbone::forward;
use vmfcl::bench::{run_experiment, DataSource, Method, RunConfig, SessionReport};
use vmfcl::checkpoint::read_checkpoint;
use vmfcl::streams::{generate_synthetic, read_stream, write_stream, Role, StreamRecord};
use vmfcl::Error;

#[derive(Parser)]
#[command(name = "vmfcl", version, about = "Domain-aware continual learning with vMF mixtures")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic pool as train.vmfs and test.vmfs.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run all sessions and write the report and artifacts.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = ["domain_aware", "replay_baseline"])]
        method: Option<String>,
    },
    /// Summarize a report.json (or a run directory).
    Report { path: PathBuf },
    /// Map a stream through a checkpoint's backbone and write the features.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> vmfcl::Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    Ok(match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn synth(config: Option<&Path>, seed: Option<u64>, out: &Path) -> vmfcl::Result<()> {
    let cfg = load_config(config, seed)?;
    let DataSource::Synthetic(s) = &cfg.data else {
        return Err(Error::Config("synth needs [data] source = synthetic".into()));
    };
    let sp = generate_synthetic(s)?;
    std::fs::create_dir_all(out)?;
    write_stream(&out.join("train.vmfs"), sp.pool.dim, &sp.pool.train)?;
    write_stream(&out.join("test.vmfs"), sp.pool.dim, &sp.pool.test)?;
    println!("wrote {} train and {} test records to {}", sp.pool.train.len(), sp.pool.test.len(), out.display());
    Ok(())
}

fn run(config: Option<&Path>, seed: Option<u64>, out: &Path, method: Option<&str>) -> vmfcl::Result<bool> {
    let mut cfg = load_config(config, seed)?;
    if let Some(m) = method {
        cfg.method = m.parse::<Method>()?;
    }
    let outcome = run_experiment(&cfg, Some(out))?;
    print_summary(&outcome.report);
    if let Some(e) = &outcome.report.error {
        eprintln!("run aborted: {e}");
    }
    Ok(outcome.report.complete)
}

fn print_summary(r: &SessionReport) {
    println!("method {} split {} seed {}", r.method, r.split, r.seed);
    for (t, acc) in r.per_session_acc.iter().enumerate() {
        let purity = r.purity_per_session[t].map_or("n/a".to_string(), |p| format!("{p:.4}"));
        let comps: Vec<String> = r.components_per_class[t].iter().map(|(c, k)| format!("{c}:{k}")).collect();
        println!("session {t} acc {acc:.2} purity {purity} components [{}]", comps.join(" "));
    }
    println!("avg_inc_acc {:.2} final_acc {:.2}", r.avg_inc_acc, r.final_acc);
    match r.forgetting {
        Some(f) => println!("forgetting {f:.2}"),
        None => println!("forgetting n/a"),
    }
}

fn report(path: &Path) -> vmfcl::Result<()> {
    let file = if path.is_dir() { path.join("report.json") } else { path.to_path_buf() };
    let text = std::fs::read_to_string(&file)?;
    let v: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", file.display())))?;
    let num = |k: &str| v[k].as_f64().map_or("n/a".to_string(), |x| format!("{x:.2}"));
    println!("method {} split {} seed {}", v["method"], v["split"], v["seed"]);
    if let Some(accs) = v["per_session_acc"].as_array() {
        for (t, a) in accs.iter().enumerate() {
            let p = v["purity_per_session"][t].as_f64().map_or("n/a".to_string(), |p| format!("{p:.4}"));
            println!("session {t} acc {:.2} purity {p}", a.as_f64().unwrap_or(f64::NAN));
        }
    }
    println!("avg_inc_acc {} final_acc {} forgetting {}", num("avg_inc_acc"), num("final_acc"), num("forgetting"));
    println!("complete {}", v["complete"]);
    Ok(())
}

fn export(checkpoint: &Path, data: &Path, out: &Path) -> vmfcl::Result<()> {
    let (bank, backbone) = read_checkpoint(checkpoint)?;
    let backbone = backbone.ok_or_else(|| Error::Config("checkpoint has no backbone section".into()))?;
    let (_, records) = read_stream(data)?;
    let feats = records
        .iter()
        .map(|r| {
            let x: Vec<f64> = r.input.iter().map(|&v| v as f64).collect();
            let v = forward(&backbone, &x)?;
            Ok(StreamRecord {
                id: r.id,
                class: r.class,
                domain: r.domain,
                role: r.role,
                input: v.as_slice().iter().map(|&f| f as f32).collect(),
            })
        })
        .collect::<vmfcl::Result<Vec<_>>>()?;
    write_stream(out, bank.dim(), &feats)?;
    let n_test = feats.iter().filter(|r| r.role == Role::Test).count();
    println!("wrote {} embeddings ({} test) to {}", feats.len(), n_test, out.display());
    Ok(())
}

fn exit_for(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    match e {
        Error::Config(_) => ExitCode::from(1),
        _ => ExitCode::from(2),
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Synth { config, seed, out } => synth(config.as_deref(), *seed, out).map(|_| true),
        Command::Run { config, seed, out, method } => run(config.as_deref(), *seed, out, method.as_deref()),
        Command::Report { path } => report(path).map(|_| true),
        Command::ExportEmbeddings { checkpoint, data, out } => export(checkpoint, data, out).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => exit_for(&e),
    }
}
