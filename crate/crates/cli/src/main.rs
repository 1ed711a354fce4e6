fn main() {
    std::process::exit(expfunc_cli::run(std::env::args_os()));
}
