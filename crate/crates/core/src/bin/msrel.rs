fn main() {
    env_logger::init();
    std::process::exit(msrel::cli::main());
}
