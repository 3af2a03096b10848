use serde::Serialize;

use super::plan::Strategy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BufferClass {
    /// Activation-sized tensor.
    Large,
    /// Per-channel vector.
    Small,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LedgerEntry {
    pub layer: usize,
    pub name: &'static str,
    pub elements: usize,
    pub bytes: usize,
    pub class: BufferClass,
}

/// Buffers retained across the forward/backward boundary.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct BufferLedger {
    pub entries: Vec<LedgerEntry>,
    /// Bytes held at the forward/backward boundary, when everything retained
    /// is alive at once.
    pub peak_bytes: usize,
    pub saved_large_buffers: usize,
}

impl BufferLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(
        &mut self,
        layer: usize,
        name: &'static str,
        elements: usize,
        elem_bytes: usize,
        class: BufferClass,
    ) {
        let bytes = elements * elem_bytes;
        self.entries.push(LedgerEntry {
            layer,
            name,
            elements,
            bytes,
            class,
        });
        self.peak_bytes += bytes;
        if class == BufferClass::Large {
            self.saved_large_buffers += 1;
        }
    }

    pub fn bytes_of(&self, class: BufferClass) -> usize {
        self.entries
            .iter()
            .filter(|e| e.class == class)
            .map(|e| e.bytes)
            .sum()
    }

    pub fn layers(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.entries.iter().map(|e| e.layer).collect();
        ids.dedup();
        ids
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerSummary {
    pub layer: usize,
    pub large_buffers: usize,
    pub large_bytes: usize,
    pub small_bytes: usize,
    pub buffers: Vec<&'static str>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LedgerReport {
    pub strategy: Strategy,
    pub layers: Vec<LayerSummary>,
    pub saved_large_buffers: usize,
    pub large_bytes: usize,
    pub small_bytes: usize,
    pub total_bytes: usize,
    pub baseline_large_buffers: usize,
    pub baseline_total_bytes: usize,
    /// Reduction in saved large buffers relative to the baseline, in percent.
    pub buffer_saving_pct: f64,
    /// Reduction in retained bytes (large and small) relative to the baseline, in percent.
    pub byte_saving_pct: f64,
}

fn saving(ours: usize, baseline: usize) -> f64 {
    if baseline == 0 {
        0.0
    } else {
        100.0 * (baseline as f64 - ours as f64) / baseline as f64
    }
}

/// Summarizes `ledger` and compares it against `baseline`, normally the
/// ledger of the Standard strategy on the same plan and input.
pub fn ledger_report(
    strategy: Strategy,
    ledger: &BufferLedger,
    baseline: &BufferLedger,
) -> LedgerReport {
    let layers = ledger
        .layers()
        .into_iter()
        .map(|layer| {
            let entries: Vec<&LedgerEntry> =
                ledger.entries.iter().filter(|e| e.layer == layer).collect();
            LayerSummary {
                layer,
                large_buffers: entries
                    .iter()
                    .filter(|e| e.class == BufferClass::Large)
                    .count(),
                large_bytes: entries
                    .iter()
                    .filter(|e| e.class == BufferClass::Large)
                    .map(|e| e.bytes)
                    .sum(),
                small_bytes: entries
                    .iter()
                    .filter(|e| e.class == BufferClass::Small)
                    .map(|e| e.bytes)
                    .sum(),
                buffers: entries.iter().map(|e| e.name).collect(),
            }
        })
        .collect();
    LedgerReport {
        strategy,
        layers,
        saved_large_buffers: ledger.saved_large_buffers,
        large_bytes: ledger.bytes_of(BufferClass::Large),
        small_bytes: ledger.bytes_of(BufferClass::Small),
        total_bytes: ledger.peak_bytes,
        baseline_large_buffers: baseline.saved_large_buffers,
        baseline_total_bytes: baseline.peak_bytes,
        buffer_saving_pct: saving(ledger.saved_large_buffers, baseline.saved_large_buffers),
        byte_saving_pct: saving(ledger.peak_bytes, baseline.peak_bytes),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_tallies() {
        let mut l = BufferLedger::new();
        l.record(0, "x", 100, 8, BufferClass::Large);
        l.record(0, "var", 4, 8, BufferClass::Small);
        l.record(1, "z", 50, 8, BufferClass::Large);
        assert_eq!(l.saved_large_buffers, 2);
        assert_eq!(l.peak_bytes, 1232);
        assert_eq!(l.bytes_of(BufferClass::Small), 32);
        assert_eq!(l.layers(), vec![0, 1]);
    }

    #[test]
    fn self_comparison_saves_nothing() {
        let mut l = BufferLedger::new();
        l.record(0, "x", 10, 4, BufferClass::Large);
        let r = ledger_report(Strategy::Standard, &l, &l);
        assert_eq!(r.buffer_saving_pct, 0.0);
        assert_eq!(r.byte_saving_pct, 0.0);
        assert_eq!(r.layers.len(), 1);
        assert_eq!(r.layers[0].buffers, vec!["x"]);
    }

    #[test]
    fn empty_baseline_reports_zero() {
        let l = BufferLedger::new();
        assert_eq!(
            ledger_report(Strategy::InPlaceAbnI, &l, &l).buffer_saving_pct,
            0.0
        );
    }
}
