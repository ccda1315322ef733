fn main() {
    std::process::exit(resofilter::cli::main_with_args(std::env::args_os()));
}
