fn main() {
    std::process::exit(gssm_cli::main_with(std::env::args_os()));
}
