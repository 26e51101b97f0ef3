use clap::Parser;

fn main() {
    let cli = match fisheye_bev_cli::Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            std::process::exit(if e.use_stderr() { 1 } else { 0 });
        }
    };
    std::process::exit(fisheye_bev_cli::run(cli));
}
