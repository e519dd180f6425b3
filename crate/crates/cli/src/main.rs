fn main() {
    let argv: Vec<String> = std::env::args().collect();
    std::process::exit(tcan_cli::run(&argv));
}
