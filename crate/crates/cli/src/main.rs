fn main() {
    std::process::exit(segcam_cli::run(std::env::args_os()));
}
