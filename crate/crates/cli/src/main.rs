fn main() {
    let code = trigger_xai_cli::run(std::env::args_os(), &mut std::io::stderr());
    std::process::exit(code);
}
