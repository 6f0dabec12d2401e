use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use prunekit::cli::{execute, exit_code, Command, Invocation, Preset, RunConfig};
use prunekit::Error;

/// Staged structured pruning and distillation of a toy decoder-only transformer.
///
/// Any config key can also be given as a flag of the same name, e.g.
/// `--stage.alpha 0.1` or `--distill.gamma=0.5`. Precedence: preset, then
/// --config file, then --seed/--out, then per-key flags.
#[derive(Debug, Parser)]
#[command(name = "prunekit", version)]
struct Args {
    /// train-teacher, compress, oneshot, single-stage, evaluate, ablate-distill or ablate-prune.
    command: String,
    /// Flat `section.key = value` file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long)]
    out: Option<PathBuf>,
    /// tiny, desk or scaled.
    #[arg(long, default_value = "desk")]
    preset: String,
    /// Teacher checkpoint; defaults to <out>/teacher.pkpt.
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Checkpoint to evaluate.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Suppress progress output.
    #[arg(long)]
    quiet: bool,
}

/// Splits `--section.key value` and `--section.key=value` pairs out of argv.
fn split_overrides(argv: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>), Error> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = argv.into_iter();
    while let Some(arg) = it.next() {
        let is_key = |f: &&str| f.split('=').next().is_some_and(|k| k.contains('.'));
        let Some(flag) = arg.strip_prefix("--").filter(is_key) else {
            rest.push(arg);
            continue;
        };
        let (key, value) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| Error::Config(format!("--{flag} needs a value")))?;
                (flag.to_string(), v)
            }
        };
        overrides.push((key, value));
    }
    Ok((rest, overrides))
}

fn invocation() -> Result<Invocation, Error> {
    let (argv, overrides) = split_overrides(std::env::args().collect())?;
    let args = match Args::try_parse_from(argv) {
        Ok(a) => a,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            std::process::exit(0);
        }
        Err(e) => return Err(Error::Config(e.to_string())),
    };
    let command: Command = args.command.parse()?;
    let preset: Preset = args.preset.parse()?;
    let mut config = RunConfig::preset(preset);
    if let Some(path) = &args.config {
        config.apply_file(path).map_err(|e| match e {
            Error::Io(io) => Error::Config(format!("cannot read {}: {io}", path.display())),
            other => other,
        })?;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(out) = args.out {
        config.out = out;
    }
    for (k, v) in overrides {
        config.set(&k, &v)?;
    }
    Ok(Invocation {
        command,
        config,
        teacher: args.teacher,
        checkpoint: args.checkpoint,
        verbose: !args.quiet,
    })
}

fn main() -> ExitCode {
    let result = invocation().and_then(|inv| execute(&inv));
    match result {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
