fn main() {
    std::process::exit(geoface::cli::run(std::env::args_os()));
}
