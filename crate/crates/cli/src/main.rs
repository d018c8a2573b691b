fn main() {
    std::process::exit(splatkit_cli::run(std::env::args_os()));
}
