//! Renders a scene, synthesizes a three-exposure LDR bracket and writes it
//! out as PNGs plus the ground-truth PFM.
//!
//! cargo run --release --example synth_bracket -- [out_dir]

use std::path::PathBuf;

use hdr_adapt::bracket::{bracket_from_raw, export_bracket, BracketConfig};
use hdr_adapt::scene::{generate_sequence, DomainStyle};

fn main() -> hdr_adapt::Result<()> {
    let out: PathBuf = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("hdr-adapt-bracket"));
    let seq = generate_sequence(&DomainStyle::Synthetic.sample_scene(64, 64, 5, 3))?;
    let cfg = BracketConfig {
        seed: 3,
        ..BracketConfig::default()
    };
    let b = bracket_from_raw(&seq, &cfg)?;
    for (k, name) in ["short", "mid", "long"].iter().enumerate() {
        let ldr = &b.ldr[k];
        let clipped = ldr.data().iter().filter(|&&v| v >= 1.0).count() as f64 / ldr.data().len() as f64;
        println!(
            "{name:>5}: ev {:+.0}, frame {}, noise sigma {:.2e}, clipped {:.1}%",
            b.ev_offsets[k],
            b.frame_indices[k],
            b.sigmas[k],
            100.0 * clipped
        );
    }
    export_bracket(&b, &out)?;
    println!("bracket written to {}", out.display());
    Ok(())
}
