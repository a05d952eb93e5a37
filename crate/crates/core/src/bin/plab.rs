fn main() { std::process::exit(plab_core::cli::main_with_args(std::env::args_os())); }
