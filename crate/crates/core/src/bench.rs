//! Scoring and decoding throughput across sentence lengths and type counts.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::decoder::{decode, DecodeConfig};
use crate::error::Result;
use crate::heads::{added_params, Head, HeadKind, SpanMask};
use crate::numerics::Matrix;
use crate::rope::{RotaryEncoding, DEFAULT_BASE};

pub const LENGTHS: [usize; 4] = [32, 64, 128, 256];
pub const TYPE_COUNTS: [usize; 3] = [1, 4, 10];

#[derive(Clone, Debug, PartialEq)]
pub struct BenchCell {
    pub head: HeadKind,
    pub n: usize,
    pub types: usize,
    pub seconds_per_sentence: f64,
    pub weight_count: usize,
    pub added_per_type: usize,
}

/// Times `head.score` plus nested decoding on random token vectors.
pub fn run(v: usize, d: usize, reps: usize, seed: u64) -> Result<Vec<BenchCell>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rope = RotaryEncoding::new(d, DEFAULT_BASE)?;
    let reps = reps.max(1);
    let mut cells = Vec::new();
    for head_kind in HeadKind::ALL {
        for &types in &TYPE_COUNTS {
            let head = Head::new(head_kind, types, v, d, &mut rng);
            for &n in &LENGTHS {
                let h = Matrix::from_vec(n, v, (0..n * v).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
                let start = Instant::now();
                for _ in 0..reps {
                    let scores = head.score(&h, SpanMask::full(n), Some(&rope))?;
                    std::hint::black_box(decode(&scores, DecodeConfig::default()));
                }
                cells.push(BenchCell {
                    head: head_kind,
                    n,
                    types,
                    seconds_per_sentence: start.elapsed().as_secs_f64() / reps as f64,
                    weight_count: head.weight_count(),
                    added_per_type: added_params(head_kind, v, d),
                });
            }
        }
    }
    Ok(cells)
}

/// Cells whose time per sentence drops as `n` grows, for the same head and
/// type count.
pub fn non_monotone(cells: &[BenchCell]) -> Vec<String> {
    let mut out = Vec::new();
    for pair in cells.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        if a.head == b.head && a.types == b.types && b.n > a.n && b.seconds_per_sentence < a.seconds_per_sentence {
            out.push(format!(
                "{} |E|={}: n={} took {:.3e}s but n={} took {:.3e}s",
                a.head.as_str(),
                a.types,
                a.n,
                a.seconds_per_sentence,
                b.n,
                b.seconds_per_sentence
            ));
        }
    }
    out
}

pub fn table(cells: &[BenchCell]) -> String {
    let mut t = String::new();
    let _ = writeln!(t, "{:<6} {:>4} {:>5} {:>14} {:>10} {:>14}", "head", "|E|", "n", "sec/sentence", "weights", "added/type");
    for c in cells {
        let _ = writeln!(
            t,
            "{:<6} {:>4} {:>5} {:>14.6e} {:>10} {:>14}",
            c.head.as_str(),
            c.types,
            c.n,
            c.seconds_per_sentence,
            c.weight_count,
            c.added_per_type
        );
    }
    t
}
