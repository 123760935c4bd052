fn main() {
    std::process::exit(motion4d::cli_main());
}
