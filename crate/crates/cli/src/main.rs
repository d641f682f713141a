fn main() {
    std::process::exit(vlscore_cli::run(std::env::args_os()));
}
