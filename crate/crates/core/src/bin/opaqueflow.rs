use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use opaqueflow::cli::{self, TransportChoice};

#[derive(Parser)]
#[command(name = "opaqueflow", version, about = "Validate flow manifests and run sandbox scenarios")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and validate a manifest.
    Check { manifest: PathBuf },
    /// Print every declared flow of a manifest.
    Disclose { manifest: PathBuf },
    /// Run a built-in scenario (login-ok, login-exfiltration,
    /// malicious-library) or a scenario file.
    Run {
        scenario: String,
        /// Write the attempt log export to this file.
        #[arg(long)]
        log: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut out = std::io::stdout().lock();
    let mut err = std::io::stderr().lock();
    let code = match cli.command {
        Command::Check { manifest } => cli::cmd_check(&manifest, &mut out, &mut err),
        Command::Disclose { manifest } => cli::cmd_disclose(&manifest, &mut out, &mut err),
        Command::Run { scenario, log } => match TransportChoice::from_env() {
            Ok(transport) => cli::cmd_run(&scenario, log.as_deref(), transport, &mut out, &mut err),
            Err(msg) => {
                use std::io::Write;
                let _ = writeln!(err, "error: {msg}");
                cli::EXIT_INVALID
            }
        },
    };
    ExitCode::from(code as u8)
}
