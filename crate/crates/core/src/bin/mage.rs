fn main() {
    std::process::exit(mage::cli::main_exit());
}
