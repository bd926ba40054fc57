fn main() {
    std::process::exit(cfg_mcts::cli::main_with_args(std::env::args_os()));
}
