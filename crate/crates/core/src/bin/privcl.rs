fn main() {
    std::process::exit(privcl::cli::main_with_args(std::env::args_os()));
}
