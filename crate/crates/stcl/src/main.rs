fn main() {
    std::process::exit(stcl::cli::run(std::env::args_os()));
}
