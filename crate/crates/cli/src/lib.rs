pub fn run() {
    eprintln!("not yet wired");
    std::process::exit(2);
}
