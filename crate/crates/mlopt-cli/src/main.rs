fn main() {
    std::process::exit(mlopt_cli::run_cli());
}
