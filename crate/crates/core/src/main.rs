fn main() {
    std::process::exit(fpcontrol::cli::run(std::env::args_os()));
}
