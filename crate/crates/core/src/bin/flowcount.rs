fn main() { std::process::exit(flowcount::cli::run_main()); }
