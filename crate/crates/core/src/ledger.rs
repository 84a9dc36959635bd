//! Per-round tally of transmitted scalars and the closed-form protocol costs.
//!
//! One unit is one 64-bit scalar. For the Fisher L-BFGS protocol a round costs
//!
//! ```text
//! d                 broadcast w_t
//! + d * ceil(log2 tau)   tree-reduce the client gradients
//! + d                 broadcast s_t
//! + d * ceil(log2 tau)   tree-reduce the Fisher-vector products
//! + (m^2 + m)         curvature-pair maintenance
//! + (m + d)           direction search
//! ```
//!
//! and a FedAvg round costs `k * d + d` (one broadcast, `k` uploads).

/// `ceil(log2(tau))` for `tau >= 1`.
pub fn ceil_log2(tau: u64) -> u64 {
    assert!(tau >= 1, "ceil_log2 needs tau >= 1");
    u64::from(u64::BITS - (tau - 1).leading_zeros())
}

/// Scalars sent in one Fisher L-BFGS round.
pub fn comm_cost_proposed(d: u64, tau: u64, m: u64) -> u64 {
    let log = ceil_log2(tau);
    d + d * log + d + d * log + (m * m + m) + (m + d)
}

/// Scalars sent in one FedAvg round with `k` participants.
pub fn comm_cost_fedavg(d: u64, k: u64) -> u64 {
    k * d + d
}

/// What moved during one round.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LedgerRecord {
    pub round: usize,
    pub scalars_broadcast: u64,
    pub scalars_gathered: u64,
    pub pair_maintenance_scalars: u64,
}

impl LedgerRecord {
    pub fn total(&self) -> u64 {
        self.scalars_broadcast + self.scalars_gathered + self.pair_maintenance_scalars
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CommunicationLedger {
    records: Vec<LedgerRecord>,
    open: Option<LedgerRecord>,
    cumulative: u64,
}

impl CommunicationLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn begin_round(&mut self, round: usize) {
        assert!(self.open.is_none(), "previous ledger round still open");
        self.open = Some(LedgerRecord {
            round,
            ..LedgerRecord::default()
        });
    }

    fn current(&mut self) -> &mut LedgerRecord {
        self.open.as_mut().expect("no ledger round open")
    }

    pub fn broadcast(&mut self, scalars: u64) {
        self.current().scalars_broadcast += scalars;
    }

    pub fn gather(&mut self, scalars: u64) {
        self.current().scalars_gathered += scalars;
    }

    pub fn pair_maintenance(&mut self, scalars: u64) {
        self.current().pair_maintenance_scalars += scalars;
    }

    /// Closes the open round and returns its record.
    pub fn end_round(&mut self) -> LedgerRecord {
        let rec = self.open.take().expect("no ledger round open");
        self.cumulative += rec.total();
        self.records.push(rec);
        rec
    }

    pub fn records(&self) -> &[LedgerRecord] {
        &self.records
    }

    pub fn cumulative(&self) -> u64 {
        self.cumulative
    }
}
