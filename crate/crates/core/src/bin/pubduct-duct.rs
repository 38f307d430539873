fn main() {
    let argv = std::env::args().collect();
    std::process::exit(pubduct::cli::duct_main(argv, pubduct::cli::EnvOverrides::from_process()));
}
