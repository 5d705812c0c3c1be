use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use silmesh::sil::corpus::run_fuzz;
use silmesh::sil::{canonicalize, validate_xml};

#[derive(Parser)]
#[command(name = "silctl", version, about = "Interface-language document tools")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Check a document against the grammar; exit 1 listing violations
    Validate { file: PathBuf },
    /// Print the canonical form of a document
    Canon { file: PathBuf },
    /// Round-trip a generated corpus and check every single-constraint mutant is rejected
    Fuzz {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 500)]
        count: usize,
    },
}

fn read(file: &PathBuf) -> Result<Vec<u8>> {
    std::fs::read(file).with_context(|| format!("reading {}", file.display()))
}

fn run(cmd: Cmd) -> Result<ExitCode> {
    match cmd {
        Cmd::Validate { file } => {
            let report = match validate_xml(&read(&file)?) {
                Ok(r) => r,
                Err(e) => {
                    println!("{}: not well-formed: {e}", file.display());
                    return Ok(ExitCode::FAILURE);
                }
            };
            if report.is_empty() {
                println!("{}: valid", file.display());
                Ok(ExitCode::SUCCESS)
            } else {
                println!("{report}");
                Ok(ExitCode::FAILURE)
            }
        }
        Cmd::Canon { file } => match canonicalize(&read(&file)?) {
            Ok(bytes) => {
                std::io::stdout().write_all(&bytes)?;
                Ok(ExitCode::SUCCESS)
            }
            Err(e) => {
                eprintln!("{}: {e}", file.display());
                Ok(ExitCode::FAILURE)
            }
        },
        Cmd::Fuzz { seed, count } => {
            let r = run_fuzz(seed, count);
            for f in r.roundtrip_failures.iter().chain(&r.escaped_mutants) {
                println!("{f}");
            }
            println!(
                "seed {seed}: {} documents, {} round-trip failures; {} mutants, {} escaped",
                r.documents,
                r.roundtrip_failures.len(),
                r.mutants,
                r.escaped_mutants.len()
            );
            Ok(if r.is_clean() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
    }
}

fn main() -> ExitCode {
    run(Cli::parse().cmd).unwrap_or_else(|e| {
        eprintln!("error: {e:#}");
        ExitCode::FAILURE
    })
}
