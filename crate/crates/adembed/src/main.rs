fn main() {
    if let Err(e) = adembed::cli::run_cli() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
