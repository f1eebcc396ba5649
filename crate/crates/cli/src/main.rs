fn main() {
    std::process::exit(latent_translate_cli::run(std::env::args_os()));
}
