fn main() {
    std::process::exit(cinelora::cli_main());
}
