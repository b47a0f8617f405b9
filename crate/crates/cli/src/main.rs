fn main() {
    std::process::exit(repgeo_cli::run(std::env::args_os()));
}
