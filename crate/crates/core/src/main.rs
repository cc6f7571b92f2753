fn main() {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    let mut out = String::new();
    let code = skillrun::cli::run_cli(std::env::args_os(), &mut out);
    print!("{out}");
    std::process::exit(code);
}
