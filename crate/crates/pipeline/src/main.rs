fn main() {
    std::process::exit(moco::cli::run(std::env::args_os()));
}
