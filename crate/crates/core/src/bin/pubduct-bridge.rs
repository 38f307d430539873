fn main() {
    let argv = std::env::args().collect();
    std::process::exit(pubduct::cli::bridge_main(argv, pubduct::cli::EnvOverrides::from_process()));
}
