fn main() {
    std::process::exit(vgfm_core::cli::run(std::env::args_os()));
}
