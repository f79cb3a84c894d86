//! Multiply-accumulate counts of full versus axial self-attention.

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{kernel, mac_counter, oracle_unguarded};
use crate::error::{Error, Result};
use crate::tensor::{transpose_hw, Tensor};

/// Largest side accepted for the full-attention column.
pub const MAX_FULL_SIDE: usize = 128;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub side: usize,
    pub channels: usize,
    pub full_macs: u64,
    /// One width-axis pass.
    pub axial_macs: u64,
    /// Height pass followed by width pass.
    pub axial_hw_macs: u64,
    pub full_secs: f64,
    pub axial_secs: f64,
}

impl BenchRow {
    /// `2 (s^2)^2 C`: one dot product and one weighted sum per query/key pair.
    pub fn analytic_full(side: usize, channels: usize) -> u64 {
        2 * (side * side * side * side * channels) as u64
    }

    /// `2 s^2 s C` for a single axis.
    pub fn analytic_axial(side: usize, channels: usize) -> u64 {
        2 * (side * side * side * channels) as u64
    }

    pub fn exact(&self) -> bool {
        self.full_macs == Self::analytic_full(self.side, self.channels)
            && self.axial_macs == Self::analytic_axial(self.side, self.channels)
            && self.axial_hw_macs == 2 * Self::analytic_axial(self.side, self.channels)
    }
}

impl fmt::Display for BenchRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:>5} {:>14} {:>14} {:>12} {:>12} {:>12} {:>9.1} {:>10.3} {:>10.3}",
            self.side,
            self.full_macs,
            Self::analytic_full(self.side, self.channels),
            self.axial_macs,
            Self::analytic_axial(self.side, self.channels),
            self.axial_hw_macs,
            self.full_macs as f64 / self.axial_macs as f64,
            self.full_secs * 1e3,
            self.axial_secs * 1e3,
        )
    }
}

pub const HEADER: &str = "    s      full_macs  full_analytic   axial_macs axial_analyt    h+w_macs     ratio    full_ms   axial_ms";

fn counted<R>(f: impl FnOnce() -> Result<R>) -> Result<(R, u64, f64)> {
    mac_counter::reset();
    let t = Instant::now();
    let r = f()?;
    Ok((r, mac_counter::get(), t.elapsed().as_secs_f64()))
}

/// Measures one `side x side` map with `channels` channels.
pub fn bench_side(side: usize, channels: usize, seed: u64) -> Result<BenchRow> {
    if side == 0 || side > MAX_FULL_SIDE {
        return Err(Error::Config(format!(
            "bench size {side} is outside 1..={MAX_FULL_SIDE} allowed for full attention"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rand = |shape: Vec<usize>| Tensor::<f64>::from_fn(shape, |_| rng.random_range(-1.0..1.0));
    let x = rand(vec![1, channels, side, side])?;
    let eye = Tensor::from_fn(vec![channels, channels, 1, 1], |i| {
        if i / channels == i % channels {
            1.0
        } else {
            0.0
        }
    })?;
    let (_, full_macs, full_secs) = counted(|| oracle_unguarded(&x, &eye, &eye, &eye))?;
    let (_, axial_macs, axial_secs) = counted(|| kernel::forward(&x, &x, &x, None, None))?;
    let (_, axial_hw_macs, _) = counted(|| {
        let xt = transpose_hw(&x)?;
        let (h, _) = kernel::forward(&xt, &xt, &xt, None, None)?;
        let h = transpose_hw(&h)?;
        kernel::forward(&h, &h, &h, None, None)
    })?;
    Ok(BenchRow {
        side,
        channels,
        full_macs,
        axial_macs,
        axial_hw_macs,
        full_secs,
        axial_secs,
    })
}
