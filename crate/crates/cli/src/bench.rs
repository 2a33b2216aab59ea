//! Forward-pass latency of single recurrent blocks.

use std::time::Instant;

use clap::ValueEnum;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use fastfusion::recurrent::{
    bi_sru, gru_forward, lstm_forward, sru_forward, BiSruParams, GruParams, LstmParams, OpCount,
    SeqMask, SruLayerParams,
};
use fastfusion::{Error, ParamStore, Result, Tape, Tensor};

pub const SCHEMA_VERSION: &str = "1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Block {
    Sru,
    BiSru,
    Lstm,
    Gru,
}

impl Block {
    pub fn name(self) -> &'static str {
        match self {
            Block::Sru => "sru",
            Block::BiSru => "bi_sru",
            Block::Lstm => "lstm",
            Block::Gru => "gru",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub schema_version: String,
    pub block: Block,
    pub seq_len: usize,
    pub dim: usize,
    pub trials: usize,
    pub warmup: usize,
    pub median_ns: u64,
    pub mean_ns: u64,
    pub p90_ns: u64,
    pub op_count: OpCount,
    /// Hash of the output bits, identical for every trial.
    pub checksum: String,
}

/// Median and nearest-rank 90th percentile of sorted samples.
pub fn summarize(samples: &mut [u64]) -> (u64, u64, u64) {
    samples.sort_unstable();
    let n = samples.len();
    let median = if n % 2 == 1 {
        samples[n / 2]
    } else {
        (samples[n / 2 - 1] + samples[n / 2]) / 2
    };
    let mean = (samples.iter().map(|&x| u128::from(x)).sum::<u128>() / n as u128) as u64;
    let rank = ((0.9 * n as f64).ceil() as usize).clamp(1, n);
    (median, mean, samples[rank - 1])
}

/// FNV-1a over the bit patterns of `values`.
pub fn checksum(values: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

enum Built {
    Sru(SruLayerParams),
    BiSru(BiSruParams),
    Lstm(LstmParams),
    Gru(GruParams),
}

fn build(block: Block, dim: usize, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Built {
    match block {
        Block::Sru => Built::Sru(SruLayerParams::init(store, "sru", dim, dim, rng)),
        Block::BiSru => Built::BiSru(BiSruParams::init(store, "bi_sru", dim, dim, rng)),
        Block::Lstm => Built::Lstm(LstmParams::init(store, "lstm", dim, dim, rng)),
        Block::Gru => Built::Gru(GruParams::init(store, "gru", dim, dim, rng)),
    }
}

fn op_count(b: &Built, steps: usize) -> OpCount {
    match b {
        Built::Sru(p) => p.op_count(steps),
        Built::BiSru(p) => p.fwd.op_count(steps) + p.bwd.op_count(steps),
        Built::Lstm(p) => p.op_count(steps),
        Built::Gru(p) => p.op_count(steps),
    }
}

fn forward(b: &Built, store: &ParamStore, x: &Tensor) -> Result<Vec<f64>> {
    let tape = Tape::with_params(store);
    let xv = tape.constant(x.clone());
    let out = match b {
        Built::Sru(p) => sru_forward(&tape, p, xv, None)?.h,
        Built::BiSru(p) => bi_sru(&tape, p, xv, &SeqMask::all(x.rows()))?,
        Built::Lstm(p) => lstm_forward(&tape, p, xv)?,
        Built::Gru(p) => gru_forward(&tape, p, xv)?,
    };
    Ok(tape.data(out))
}

/// Times `trials` forward passes of one block on a fixed random input after
/// `warmup` untimed passes. Fails if any pass produces different output.
pub fn bench_block(
    block: Block,
    seq_len: usize,
    dim: usize,
    trials: usize,
    warmup: usize,
    seed: u64,
) -> Result<BenchReport> {
    if trials < 5 || warmup < 1 || seq_len < 1 || dim < 1 {
        return Err(Error::Config(
            "trials must be at least 5; warmup, seq_len and dim at least 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let built = build(block, dim, &mut store, &mut rng);
    let x = Tensor::uniform(&[seq_len, dim], 1.0, &mut rng);

    let reference = checksum(&forward(&built, &store, &x)?);
    for _ in 1..warmup {
        forward(&built, &store, &x)?;
    }
    let mut samples = Vec::with_capacity(trials);
    for _ in 0..trials {
        let t0 = Instant::now();
        let out = forward(&built, &store, &x)?;
        samples.push(t0.elapsed().as_nanos().max(1) as u64);
        if checksum(&out) != reference {
            return Err(Error::Contract(format!(
                "{} output changed between trials",
                block.name()
            )));
        }
    }
    let (median_ns, mean_ns, p90_ns) = summarize(&mut samples);
    Ok(BenchReport {
        schema_version: SCHEMA_VERSION.into(),
        block,
        seq_len,
        dim,
        trials,
        warmup,
        median_ns,
        mean_ns,
        p90_ns,
        op_count: op_count(&built, seq_len),
        checksum: format!("{reference:016x}"),
    })
}

pub fn format_table(reports: &[BenchReport]) -> String {
    let mut out = format!(
        "{:<8} {:>6} {:>5} {:>12} {:>12} {:>12} {:>8} {:>6}\n",
        "block", "T", "d", "median_us", "mean_us", "p90_us", "matmuls", "steps"
    );
    for r in reports {
        out.push_str(&format!(
            "{:<8} {:>6} {:>5} {:>12.1} {:>12.1} {:>12.1} {:>8} {:>6}\n",
            r.block.name(),
            r.seq_len,
            r.dim,
            r.median_ns as f64 / 1e3,
            r.mean_ns as f64 / 1e3,
            r.p90_ns as f64 / 1e3,
            r.op_count.matmuls,
            r.op_count.sequential_steps
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_statistics() {
        let mut s = vec![5, 1, 3, 2, 4];
        assert_eq!(summarize(&mut s), (3, 3, 5));
        let mut s = vec![10, 20];
        assert_eq!(summarize(&mut s), (15, 15, 20));
        let mut s: Vec<u64> = (1..=10).collect();
        assert_eq!(summarize(&mut s).2, 9);
    }

    #[test]
    fn op_counts_are_analytic() {
        let r = bench_block(Block::Sru, 8, 4, 5, 1, 0).unwrap();
        assert_eq!(r.op_count, OpCount { matmuls: 3, sequential_steps: 8 });
        let r2 = bench_block(Block::Sru, 16, 4, 5, 1, 0).unwrap();
        assert_eq!(r2.op_count.sequential_steps, 2 * r.op_count.sequential_steps);
        let r = bench_block(Block::Lstm, 8, 4, 5, 1, 0).unwrap();
        assert_eq!(r.op_count, OpCount { matmuls: 9, sequential_steps: 8 });
        let r = bench_block(Block::BiSru, 8, 4, 5, 1, 0).unwrap();
        assert_eq!(r.op_count, OpCount { matmuls: 6, sequential_steps: 16 });
    }

    #[test]
    fn report_round_trips() {
        let r = bench_block(Block::Gru, 4, 3, 5, 1, 1).unwrap();
        assert!(r.p90_ns >= r.median_ns && r.median_ns > 0);
        let json = serde_json::to_string(&r).unwrap();
        let back: BenchReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
        assert_eq!(serde_json::to_string(&back).unwrap(), json);
        assert!(json.contains("\"block\":\"gru\""));
    }

    #[test]
    fn checksum_independent_of_timing() {
        let a = bench_block(Block::Sru, 6, 4, 5, 1, 2).unwrap();
        let b = bench_block(Block::Sru, 6, 4, 7, 2, 2).unwrap();
        assert_eq!(a.checksum, b.checksum);
        assert!(bench_block(Block::Sru, 6, 4, 0, 1, 2).is_err());
    }
}
