fn main() {
    // Placeholder until the cli module lands.
    eprintln!("upd: not yet wired");
    std::process::exit(1);
}
