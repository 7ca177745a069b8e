fn main() {
    std::process::exit(dp_core::runner::run(std::env::args_os()));
}
