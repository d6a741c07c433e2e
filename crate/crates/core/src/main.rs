fn main() {
    std::process::exit(graphrec::cli::main_entry());
}
