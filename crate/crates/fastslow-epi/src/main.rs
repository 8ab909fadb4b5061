fn main() {
    std::process::exit(fastslow_epi::report::main_entry());
}
