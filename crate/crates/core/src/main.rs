fn main() {
    std::process::exit(krasovskii::cli::main_with_args(std::env::args_os()));
}
