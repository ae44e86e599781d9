//! Per-layer shapes and parameter counts for the preset network sizes.
//!
//! Usage: `cargo run --example inspect_network [default|small|large] [H W D]`

use voxseg::network::{Network, NetworkConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let cfg = match args.first().map(String::as_str) {
        Some("small") => NetworkConfig::small(),
        Some("large") => NetworkConfig::large(),
        _ => NetworkConfig::default(),
    };
    let dims = match &args[1.min(args.len())..] {
        [h, w, d] => [h.parse()?, w.parse()?, d.parse()?],
        _ => [181, 217, 181],
    };
    let net = Network::build(&cfg, 0)?;
    println!("{}", net.listing(dims)?);
    println!("branch dims {:?}", net.branch_dims(dims)?);
    Ok(())
}
