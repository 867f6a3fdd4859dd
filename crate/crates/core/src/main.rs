fn main() {
    std::process::exit(occ4d::cli::run(std::env::args_os()));
}
