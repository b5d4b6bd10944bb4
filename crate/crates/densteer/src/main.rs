fn main() {
    std::process::exit(densteer::cli::main());
}
