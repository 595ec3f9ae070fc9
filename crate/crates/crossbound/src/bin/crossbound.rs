use std::io::{stderr, stdout};
use std::process::exit;

fn main() {
    let argv: Vec<String> = std::env::args().collect();
    let code = crossbound::cli::dispatch(&argv, &mut stdout(), &mut stderr());
    exit(code);
}
