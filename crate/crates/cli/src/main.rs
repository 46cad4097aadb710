fn main() {
    eprintln!("command-line front end under construction");
    std::process::exit(2);
}
