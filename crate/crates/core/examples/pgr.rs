//! Performance gap recovered from three scores.
//!
//! ```text
//! cargo run --example pgr -- <p_hat> <p_small> <p_large>
//! ```

use grad_transformer::eval::pgr;

fn main() {
    let args: Vec<f64> = std::env::args()
        .skip(1)
        .map(|a| a.parse().expect("scores must be numbers"))
        .collect();
    let rows: Vec<[f64; 3]> = match args.as_slice() {
        [h, s, t] => vec![[*h, *s, *t]],
        [] => vec![[61.02, 48.43, 58.66], [73.59, 62.62, 73.16], [0.5, 0.5, 0.5]],
        _ => {
            eprintln!("usage: pgr <p_hat> <p_small> <p_large>");
            std::process::exit(2);
        }
    };
    for [h, s, t] in rows {
        match pgr(h, s, t) {
            Ok(v) => println!("P_hat {h:>6}  P_S {s:>6}  P_T {t:>6}  PGR {v:.2}%"),
            Err(e) => println!("P_hat {h:>6}  P_S {s:>6}  P_T {t:>6}  {e}"),
        }
    }
}
