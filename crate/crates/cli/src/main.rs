use clap::Parser;

fn main() {
    let cli = glm_spectral_cli::Cli::parse();
    std::process::exit(glm_spectral_cli::run(cli));
}
