use clap::Parser;
use mcs_cli::{run, Args};

fn main() {
    let args = Args::parse();
    match run(&args) {
        Ok(dir) => println!("{}", dir.display()),
        Err(e) => {
            eprintln!("mcs: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
