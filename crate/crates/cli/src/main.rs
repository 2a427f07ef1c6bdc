fn main() {
    std::process::exit(pbarl_cli::dispatch(std::env::args_os()));
}
