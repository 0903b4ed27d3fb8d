fn main() {
    std::process::exit(muxncs::cli::run(std::env::args_os()));
}
