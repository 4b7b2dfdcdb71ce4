fn main() {
    std::process::exit(vmfgraph_cli::main_with_args(std::env::args_os()));
}
