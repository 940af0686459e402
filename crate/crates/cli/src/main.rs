use clap::Parser;

fn main() {
    let cli = match qmi_info::Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { qmi_info::EXIT_CONFIG } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    std::process::exit(qmi_info::run(&cli));
}
