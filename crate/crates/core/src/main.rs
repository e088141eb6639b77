fn main() {
    std::process::exit(gesture_vit::cli::run(std::env::args_os()));
}
