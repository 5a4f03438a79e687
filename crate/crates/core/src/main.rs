fn main() {
    std::process::exit(iou_balanced::cli::run(std::env::args_os()));
}
