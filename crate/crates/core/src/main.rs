fn main() {
    let code = warpbench::harness::cli::cli_main(std::env::args_os());
    std::process::exit(code);
}
