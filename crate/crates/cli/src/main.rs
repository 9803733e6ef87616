fn main() {
    std::process::exit(esp_cli::run(std::env::args_os()));
}
