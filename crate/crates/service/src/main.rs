fn main() {
    std::process::exit(slotgen_service::cli::run(std::env::args_os()));
}
