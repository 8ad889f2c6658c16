fn main() {
    let code = vitlab::harness::cli::run(std::env::args().skip(1).collect());
    std::process::exit(code);
}
