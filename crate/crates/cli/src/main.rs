fn main() {
    fermichain_cli::run()
}
