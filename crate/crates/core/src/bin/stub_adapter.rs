//! Stub adapter process: `agmask-stub-adapter [--mode ones|wrong-dims|delay] [--delay-ms N]`.

use std::io::{stdin, stdout};
use std::process::ExitCode;

use agmask_core::adapter::stub::{serve, StubMode};

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut mode = "ones".to_string();
    let mut delay_ms = 1000;
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        match (arg.as_str(), it.next()) {
            ("--mode", Some(v)) => mode = v.clone(),
            ("--delay-ms", Some(v)) => match v.parse() {
                Ok(ms) => delay_ms = ms,
                Err(_) => {
                    eprintln!("invalid --delay-ms `{v}`");
                    return ExitCode::from(1);
                }
            },
            _ => {
                eprintln!("usage: agmask-stub-adapter [--mode ones|wrong-dims|delay] [--delay-ms N]");
                return ExitCode::from(1);
            }
        }
    }
    let mode = match StubMode::parse(&mode, delay_ms) {
        Ok(m) => m,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(1);
        }
    };
    match serve(stdin().lock(), stdout().lock(), mode) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(3)
        }
    }
}
