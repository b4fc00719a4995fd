//! Fixtures shared by the benchmarks in `benches/`.

use apcval_core::{DopRecord, Label};

/// A labeled campaign of `n` DOPs with roughly 90% safe, every safe record
/// counted and unsampled.
pub fn synthetic_campaign(n: usize) -> Vec<DopRecord> {
    (0..n)
        .map(|i| {
            let m = 5 + (i % 9) as u32;
            let k = m + u32::from(i % 17 == 0) - u32::from(i % 23 == 0 && m > 0);
            let label = if i % 10 == 0 { Label::Unsafe } else { Label::Safe };
            DopRecord::counted(format!("d{i}"), m, k).with_label(label).with_duration(40.0)
        })
        .collect()
}
