fn main() {
    std::process::exit(cdemapper::run(std::env::args_os()));
}
