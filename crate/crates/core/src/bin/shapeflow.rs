fn main() {
    std::process::exit(shapeflow::cli::run(std::env::args_os()));
}
