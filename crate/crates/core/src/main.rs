fn main() {
    std::process::exit(idcycle::cli::cli(std::env::args_os()));
}
