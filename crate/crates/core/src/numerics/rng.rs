//! Counter-based random streams (Philox 4x32-10).
//!
//! Every value drawn is a pure function of `(master_seed, stream_id,
//! counter)`, so Monte Carlo work can be partitioned across threads or
//! machines and re-run bit-identically in any order. Streams are forked with
//! [`RngStream::child`] rather than shared.

use serde::{Deserialize, Serialize};

use super::matrix::Matrix;

const PHILOX_M0: u64 = 0xD251_1F53;
const PHILOX_M1: u64 = 0xCD9E_8D57;
const PHILOX_W0: u32 = 0x9E37_79B9;
const PHILOX_W1: u32 = 0xBB67_AE85;
const PHILOX_ROUNDS: usize = 10;

/// One 128-bit Philox block: 4 output words from a 128-bit counter and a
/// 64-bit key.
fn philox_block(key: u64, ctr: [u32; 4]) -> [u32; 4] {
    let mut c = ctr;
    let mut k0 = key as u32;
    let mut k1 = (key >> 32) as u32;
    for round in 0..PHILOX_ROUNDS {
        if round > 0 {
            k0 = k0.wrapping_add(PHILOX_W0);
            k1 = k1.wrapping_add(PHILOX_W1);
        }
        let p0 = PHILOX_M0.wrapping_mul(c[0] as u64);
        let p1 = PHILOX_M1.wrapping_mul(c[2] as u64);
        c = [
            ((p1 >> 32) as u32) ^ c[1] ^ k0,
            p1 as u32,
            ((p0 >> 32) as u32) ^ c[3] ^ k1,
            p0 as u32,
        ];
    }
    c
}

/// SplitMix64 finalizer, used to derive child stream ids.
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic random stream addressed by `(master_seed, stream_id, counter)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngStream {
    pub master_seed: u64,
    pub stream_id: u64,
    pub counter: u64,
}

impl RngStream {
    pub fn new(master_seed: u64, stream_id: u64) -> Self {
        RngStream {
            master_seed,
            stream_id,
            counter: 0,
        }
    }

    /// Forks a statistically independent stream. Children of distinct tags,
    /// and children of distinct parents, get distinct stream ids; the child
    /// counter starts at zero.
    pub fn child(&self, tag: u64) -> RngStream {
        RngStream {
            master_seed: self.master_seed,
            stream_id: mix64(
                self.stream_id ^ mix64(tag.wrapping_add(0x9E37_79B9_7F4A_7C15)),
            ),
            counter: 0,
        }
    }

    /// The raw 128-bit block at an absolute counter position. Does not
    /// advance the stream.
    fn block_at(&self, counter: u64) -> [u32; 4] {
        let ctr = [
            counter as u32,
            (counter >> 32) as u32,
            self.stream_id as u32,
            (self.stream_id >> 32) as u32,
        ];
        philox_block(self.master_seed, ctr)
    }

    /// Two standard normal values from the block at `counter` (Box–Muller).
    fn gaussian_pair_at(&self, counter: u64) -> (f64, f64) {
        let b = self.block_at(counter);
        let v0 = ((b[0] as u64) << 32) | b[1] as u64;
        let v1 = ((b[2] as u64) << 32) | b[3] as u64;
        // 53-bit mantissas; u1 in (0,1] so the log is finite.
        let u1 = 1.0 - (v0 >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0);
        let u2 = (v1 >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0);
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        (r * theta.cos(), r * theta.sin())
    }

    /// Next standard normal value, advancing the counter by one block.
    /// The sibling value of the Box–Muller pair is discarded; bulk fills use
    /// both lanes.
    pub fn next_gaussian(&mut self) -> f64 {
        let (z, _) = self.gaussian_pair_at(self.counter);
        self.counter += 1;
        z
    }

    /// Next uniform value in `[0, 1)`, advancing the counter by one block.
    pub fn next_uniform(&mut self) -> f64 {
        let b = self.block_at(self.counter);
        self.counter += 1;
        let v = ((b[0] as u64) << 32) | b[1] as u64;
        (v >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Fills `out` with i.i.d. standard normals. Consumes `ceil(len/2)`
    /// blocks; a trailing odd value discards its pair lane.
    pub fn fill_gaussian(&mut self, out: &mut [f64]) {
        let mut i = 0;
        while i < out.len() {
            let (z0, z1) = self.gaussian_pair_at(self.counter);
            self.counter += 1;
            out[i] = z0;
            i += 1;
            if i < out.len() {
                out[i] = z1;
                i += 1;
            }
        }
    }

    /// An `rows x cols` matrix of i.i.d. standard normal entries.
    pub fn gaussian_matrix(&mut self, rows: usize, cols: usize) -> Matrix {
        let mut buf = vec![0.0; rows * cols];
        self.fill_gaussian(&mut buf);
        Matrix::from_vec(rows, cols, buf).expect("buffer sized to rows*cols")
    }

    pub fn gaussian_vec(&mut self, len: usize) -> Vec<f64> {
        let mut buf = vec![0.0; len];
        self.fill_gaussian(&mut buf);
        buf
    }
}

/// Standalone draw with the spec'd signature: the stream is taken by value,
/// so the caller's copy is left untouched.
pub fn gaussian_draw(mut stream: RngStream, rows: usize, cols: usize) -> Matrix {
    stream.gaussian_matrix(rows, cols)
}
