fn main() {
    std::process::exit(evgraph_cli::run(std::env::args_os()));
}
