use std::io;

fn main() {
    let code = pullnet::cli::run_cli(std::env::args_os(), &mut io::stdout().lock(), &mut io::stderr().lock());
    std::process::exit(code.code());
}
