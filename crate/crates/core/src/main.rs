use mimalloc::MiMalloc;

// Training allocates large activation buffers every step; mimalloc reuses
// them instead of returning pages to the OS between steps.
#[global_allocator]
static GLOBAL: MiMalloc = MiMalloc;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    std::process::exit(s3n::cli::run(std::env::args_os()));
}
