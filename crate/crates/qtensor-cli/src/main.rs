fn main() {
    std::process::exit(qtensor_cli::run(std::env::args_os()));
}
