fn main() {
    std::process::exit(vpp_core::cli::run());
}
