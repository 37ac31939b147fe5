fn main() {
    std::process::exit(ava_nvs::cli::main_with_args(std::env::args_os()));
}
