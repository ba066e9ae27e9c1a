//! Prints the header and tensor statistics of any artifact.
//!
//! ```text
//! cargo run --release --example inspect -- runs/desk/tuples/tuples.bin
//! ```

use std::path::PathBuf;

use grad_transformer::inspect::{inspect, render};

fn main() {
    let Some(path) = std::env::args().nth(1).map(PathBuf::from) else {
        eprintln!("usage: inspect <file>");
        std::process::exit(2);
    };
    match inspect(&path) {
        Ok(summary) => print!("{}", render(&summary)),
        Err(e) => {
            eprintln!("{e}");
            std::process::exit(grad_transformer::pipeline::exit_code(&e));
        }
    }
}
