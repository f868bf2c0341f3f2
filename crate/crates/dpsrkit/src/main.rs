fn main() {
    std::process::exit(dpsrkit::run_cli());
}
