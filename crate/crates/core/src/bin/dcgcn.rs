fn main() {
    std::process::exit(dcgcn::cli::main_with_args(std::env::args_os()));
}
