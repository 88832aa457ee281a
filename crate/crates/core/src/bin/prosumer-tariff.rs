fn main() {
    let code = prosumer_tariff::cli::main_with_args(std::env::args_os(), &mut std::io::stdout());
    std::process::exit(code);
}
