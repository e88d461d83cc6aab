fn main() {
    std::process::exit(harllm::run());
}
