//! TOML run configuration: defaults, strict parsing, hashing and schema.

use mcinet::RunConfig;

fn main() {
    let cfg = RunConfig::default();
    let text = cfg.to_toml_string();
    println!("{}", text);
    println!("config hash {}", cfg.hash());

    let parsed = RunConfig::from_toml_str(&text).expect("round trip");
    println!("round trip equal: {}", parsed == cfg);

    match RunConfig::from_toml_str("[train]\nsteps = 10\nstpes = 20\n") {
        Ok(_) => println!("unexpectedly accepted a misspelt key"),
        Err(e) => println!("rejected: {}", e),
    }
    let schema = RunConfig::schema_json();
    println!("schema: {} bytes of JSON Schema", schema.len());
}
