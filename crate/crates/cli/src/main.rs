fn main() {
    std::process::exit(pdi_cli::main_exit());
}
