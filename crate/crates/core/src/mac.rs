//! Exact multiply-accumulate accounting.
//!
//! MAC counts are a hardware-independent cost model for scaling-shape
//! claims: softmax attention is quadratic in sequence length during prefill
//! and linear in context during decode, the delta rule is linear during
//! prefill and constant during decode. The counts tally multiplies inside
//! matmuls, attention score/mix loops, delta state updates, convolutions,
//! and norms; exponentials and comparisons are free.
//!
//! Conventions, applied uniformly so ratios come out exact:
//! - a linear layer `[rows, d_in] x [d_in, d_out]` costs `rows*d_in*d_out`;
//! - softmax attention costs `3*d_head` per (query, attended key) pair:
//!   `2*d_head` for the scaled score and `d_head` for the value mix;
//! - one delta-rule step costs `3*d_head^2` per head: state read for the
//!   correction, state write, and the query contraction;
//! - chunked delta cost is the per-chunk closed form times the number of
//!   chunks, so doubling a chunk-aligned T exactly doubles the count.

/// Per-component MAC tally shaped like a parameter report.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MacBreakdown {
    /// Thin-block entry/exit projections and attention q/k/v/o projections.
    pub proj: u64,
    /// Softmax attention score and mix loops.
    pub attn: u64,
    /// Delta-rule recurrence (state update plus query read).
    pub delta: u64,
    /// Delta feature short convolutions.
    pub conv: u64,
    /// Feed-forward inner layers.
    pub ffn: u64,
    /// Router logits and gates.
    pub router: u64,
    /// Final norm plus vocabulary head.
    pub head: u64,
    /// RMS and L2 norms.
    pub norm: u64,
}

impl MacBreakdown {
    pub fn total(&self) -> u64 {
        self.proj + self.attn + self.delta + self.conv + self.ffn + self.router + self.head
            + self.norm
    }

    pub fn add(&mut self, other: &MacBreakdown) {
        self.proj += other.proj;
        self.attn += other.attn;
        self.delta += other.delta;
        self.conv += other.conv;
        self.ffn += other.ffn;
        self.router += other.router;
        self.head += other.head;
        self.norm += other.norm;
    }

    pub fn scaled(&self, c: u64) -> MacBreakdown {
        MacBreakdown {
            proj: self.proj * c,
            attn: self.attn * c,
            delta: self.delta * c,
            conv: self.conv * c,
            ffn: self.ffn * c,
            router: self.router * c,
            head: self.head * c,
            norm: self.norm * c,
        }
    }
}

pub fn linear_macs(rows: usize, d_in: usize, d_out: usize) -> u64 {
    rows as u64 * d_in as u64 * d_out as u64
}

/// Causal softmax prefill: query `i` attends `i+1` keys, `3*d_head` each.
pub fn attn_prefill_macs(heads: usize, d_head: usize, t: usize) -> u64 {
    let pairs = t as u64 * (t as u64 + 1) / 2;
    heads as u64 * 3 * d_head as u64 * pairs
}

/// One decode step attending to `context` cached positions.
pub fn attn_decode_macs(heads: usize, d_head: usize, context: usize) -> u64 {
    heads as u64 * 3 * d_head as u64 * context as u64
}

/// One delta-rule step; independent of position.
pub fn delta_step_macs(heads: usize, d_head: usize) -> u64 {
    heads as u64 * 3 * (d_head as u64).pow(2)
}

/// Sequential delta prefill: `t` identical steps.
pub fn delta_prefill_macs(heads: usize, d_head: usize, t: usize) -> u64 {
    delta_step_macs(heads, d_head) * t as u64
}

/// Chunked delta prefill. Within a chunk of length `c`: pairwise decay and
/// key-overlap terms cost `c*(c+1)/2` dots of `d_head` for scores, the same
/// again for the output mix, and `3*d_head^2` per step for the state
/// carry, matching the sequential convention at the state boundary.
pub fn delta_chunk_prefill_macs(heads: usize, d_head: usize, t: usize, chunk: usize) -> u64 {
    assert!(chunk > 0, "chunk size must be positive");
    let per_chunk = |c: u64| -> u64 {
        let pairs = c * (c + 1) / 2;
        2 * pairs * d_head as u64 + 3 * c * (d_head as u64).pow(2)
    };
    let full = (t / chunk) as u64;
    let rem = (t % chunk) as u64;
    heads as u64 * (full * per_chunk(chunk as u64) + per_chunk(rem))
}

/// Depthwise causal conv over `t` rows of `ch` channels.
pub fn conv_macs(t: usize, ch: usize, width: usize) -> u64 {
    t as u64 * ch as u64 * width as u64
}

/// One normalization pass: a squared sum plus a scaled write per element.
pub fn norm_macs(rows: usize, cols: usize) -> u64 {
    2 * rows as u64 * cols as u64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn test_attn_decode_ratio_is_exactly_four_at_4x_context() {
        let a = attn_decode_macs(8, 64, 256);
        let b = attn_decode_macs(8, 64, 1024);
        assert_eq!(b, 4 * a);
    }

    #[test]
    fn test_attn_prefill_closed_form() {
        // 2 heads, d_head 4, T=3: pairs = 6, macs = 2*3*4*6 = 144
        assert_eq!(attn_prefill_macs(2, 4, 3), 144);
    }

    #[test]
    fn test_delta_step_constant_in_context() {
        assert_eq!(delta_step_macs(4, 32), delta_step_macs(4, 32));
        assert_eq!(delta_step_macs(1, 8), 3 * 64);
    }

    #[test]
    fn test_chunked_prefill_doubles_exactly_at_chunk_aligned_2t() {
        let one = delta_chunk_prefill_macs(3, 16, 512, 64);
        let two = delta_chunk_prefill_macs(3, 16, 1024, 64);
        assert_eq!(two, 2 * one);
    }

    #[test]
    fn test_breakdown_total_and_add() {
        let mut a = MacBreakdown { proj: 1, attn: 2, delta: 3, ..Default::default() };
        let b = MacBreakdown { proj: 10, head: 5, ..Default::default() };
        a.add(&b);
        assert_eq!(a.total(), 21);
    }
}
