fn main() {
    std::process::exit(weakseg::cli::run(std::env::args_os()));
}
