fn main() {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    tch::set_num_threads(1);
    std::process::exit(semsynth::cli::run_from_args(std::env::args_os()));
}
