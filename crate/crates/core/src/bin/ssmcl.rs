fn main() {
    std::process::exit(ssmcl::cli::run(std::env::args_os()));
}
