fn main() {
    std::process::exit(mctg::evalcli::cli::run(std::env::args_os()));
}
