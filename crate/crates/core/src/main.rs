fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp_secs().init();
    let code = scribblegate::cli::run_cli(std::env::args_os());
    scribblegate::cli::flush_stdout();
    std::process::exit(code);
}
