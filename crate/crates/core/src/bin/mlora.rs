use std::io;
use std::process;

fn main() {
    let status = mlora::cli::run(
        std::env::args_os(),
        &mut io::stdin().lock(),
        &mut io::stdout().lock(),
        &mut io::stderr(),
    );
    process::exit(status.code());
}
