fn main() {
    std::process::exit(toothloc_cli::main_with_args(std::env::args_os()));
}
