fn main() {
    std::process::exit(spl::cli::main_with(std::env::args_os()));
}
