fn main() {
    let code = morphgate::cli::run(std::env::args_os());
    std::process::exit(code);
}
