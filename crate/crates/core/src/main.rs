fn main() {
    std::process::exit(glassdepth::cli::main_with(std::env::args_os()));
}
