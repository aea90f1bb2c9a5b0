use std::process::ExitCode;

use mcwf_cli::{parse_args, run, Parsed};

fn main() -> ExitCode {
    let result = parse_args(std::env::args_os()).and_then(|p| match p {
        Parsed::Run(cfg) => run(&cfg).map(|_| ()),
        Parsed::Exit(text) => {
            print!("{text}");
            Ok(())
        }
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
