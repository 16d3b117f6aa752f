fn main() {
    std::process::exit(omni_embed::cli::run(std::env::args_os()));
}
