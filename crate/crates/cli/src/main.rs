fn main() {
    std::process::exit(ordermask_cli::run(std::env::args_os()));
}
