//! Thread-local work counters updated by the kernels.
//!
//! Counts are multiply-accumulates (MACs) for dense products and attended
//! (query, key) pairs for attention. Attention pairs are split by the role of
//! the query and key rows so that the context-context term can be compared
//! against the closed-form cost model.

use std::cell::Cell;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlopCounts {
    /// MACs spent in dense matrix products (linear layers).
    pub linear_macs: u64,
    /// Row-attention pairs where both query and key are context rows.
    pub context_pairs: u64,
    /// Row-attention pairs from a query row to a context row.
    pub query_context_pairs: u64,
    /// Row-attention pairs from a query row to itself.
    pub query_self_pairs: u64,
    /// Row-attention pairs under an explicit boolean mask.
    pub explicit_pairs: u64,
    /// Column-attention pairs (within one row).
    pub col_pairs: u64,
    /// MACs spent in attention scores and value mixing, summed over heads.
    pub attention_macs: u64,
}

impl FlopCounts {
    pub fn row_pairs(&self) -> u64 {
        self.context_pairs + self.query_context_pairs + self.query_self_pairs + self.explicit_pairs
    }

    pub fn total_macs(&self) -> u64 {
        self.linear_macs + self.attention_macs
    }

    fn add(&mut self, other: &FlopCounts) {
        self.linear_macs += other.linear_macs;
        self.context_pairs += other.context_pairs;
        self.query_context_pairs += other.query_context_pairs;
        self.query_self_pairs += other.query_self_pairs;
        self.explicit_pairs += other.explicit_pairs;
        self.col_pairs += other.col_pairs;
        self.attention_macs += other.attention_macs;
    }
}

thread_local! {
    static COUNTS: Cell<FlopCounts> = const { Cell::new(FlopCounts {
        linear_macs: 0,
        context_pairs: 0,
        query_context_pairs: 0,
        query_self_pairs: 0,
        explicit_pairs: 0,
        col_pairs: 0,
        attention_macs: 0,
    }) };
}

pub(crate) fn record(delta: FlopCounts) {
    COUNTS.with(|c| {
        let mut cur = c.get();
        cur.add(&delta);
        c.set(cur);
    });
}

pub fn snapshot() -> FlopCounts {
    COUNTS.with(|c| c.get())
}

pub fn reset() {
    COUNTS.with(|c| c.set(FlopCounts::default()));
}

/// Runs `f` and returns the work it performed on this thread.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, FlopCounts) {
    let before = snapshot();
    let out = f();
    let after = snapshot();
    let delta = FlopCounts {
        linear_macs: after.linear_macs - before.linear_macs,
        context_pairs: after.context_pairs - before.context_pairs,
        query_context_pairs: after.query_context_pairs - before.query_context_pairs,
        query_self_pairs: after.query_self_pairs - before.query_self_pairs,
        explicit_pairs: after.explicit_pairs - before.explicit_pairs,
        col_pairs: after.col_pairs - before.col_pairs,
        attention_macs: after.attention_macs - before.attention_macs,
    };
    (out, delta)
}
