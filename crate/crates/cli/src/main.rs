fn main() {
    std::process::exit(patchlab_cli::run(std::env::args_os()));
}
