fn main() {
    std::process::exit(guidedmix::app::main_with_args(std::env::args_os()));
}
