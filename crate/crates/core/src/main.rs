fn main() {
    std::process::exit(mmscore::cli::cli_main(std::env::args_os()));
}
