//! Writes a planted-community interaction file as `user<TAB>item` lines.
//!
//! Usage: `planted_dataset OUT [USERS ITEMS COMMUNITIES PER_USER SEED]`

use std::fs::File;
use std::io::{BufWriter, Write};

use lerg_core::synthetic::{planted_communities, PlantedConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let out = args.first().ok_or("missing output path")?;
    let num = |i: usize| args.get(i).map(|s| s.parse::<usize>()).transpose();
    let defaults = PlantedConfig::default();
    let cfg = PlantedConfig {
        num_users: num(1)?.unwrap_or(defaults.num_users),
        num_items: num(2)?.unwrap_or(defaults.num_items),
        communities: num(3)?.unwrap_or(defaults.communities),
        interactions_per_user: num(4)?.unwrap_or(defaults.interactions_per_user),
        seed: num(5)?.map_or(defaults.seed, |s| s as u64),
        ..defaults
    };
    let ds = planted_communities(&cfg)?;
    let mut w = BufWriter::new(File::create(out)?);
    for &(u, i) in &ds.pairs {
        writeln!(w, "u{u}\ti{i}")?;
    }
    w.flush()?;
    eprintln!(
        "{} users, {} items, {} interactions",
        ds.num_users,
        ds.num_items,
        ds.pairs.len()
    );
    Ok(())
}
