//! Writes a small separable corpus: `cargo run --example synthetic_corpus -- <dir> [n] [seed]`.

use std::path::PathBuf;

fn main() -> semfuse::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "synthetic".into()));
    let n = args.next().and_then(|s| s.parse().ok()).unwrap_or(40);
    let seed = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let path = semfuse::synthetic::write_synthetic_corpus(&dir, n, seed)?;
    println!("wrote {n} records to {}", path.display());
    Ok(())
}
