use clap::Parser;
use mopd_core::cli::{run, Cli};
use mopd_core::MopdError;

fn main() {
    // clap's default usage-error exit code is 2; keep 2 reserved for
    // numerical aborts and report usage problems as 1.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = if err.use_stderr() { 1 } else { 0 };
            let _ = err.print();
            std::process::exit(code);
        }
    };
    if let Err(err) = run(cli) {
        eprintln!("error: {err}");
        if let MopdError::NumericalAbort { dump, .. } = &err {
            let dump_path = std::env::temp_dir().join("mopd_abort_dump.json");
            if std::fs::write(&dump_path, dump).is_ok() {
                eprintln!("diagnostic state dump: {}", dump_path.display());
            }
        }
        std::process::exit(err.exit_code());
    }
}
