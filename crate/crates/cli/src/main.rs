fn main() {
    std::process::exit(measure_filter_cli::run(std::env::args_os()));
}
