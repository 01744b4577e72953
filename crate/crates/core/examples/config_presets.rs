//! Print the desk and full-size presets as TOML.
//!
//! `cargo run --example config_presets -- desk > configs/desk.toml`

use fedsct::config::ExperimentConfig;

fn main() {
    let which = std::env::args().nth(1).unwrap_or_else(|| "desk".into());
    let cfg = match which.as_str() {
        "desk" => ExperimentConfig::desk(),
        "paper" => ExperimentConfig::paper(),
        other => {
            eprintln!("unknown preset `{other}`; use desk or paper");
            std::process::exit(2);
        }
    };
    print!("{}", cfg.to_toml_string());
}
