fn main() {
    std::process::exit(kgqd_core::cli::run());
}
