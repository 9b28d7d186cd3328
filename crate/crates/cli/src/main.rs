fn main() {
    std::process::exit(kpiforge_cli::main_with_args(std::env::args_os()));
}
