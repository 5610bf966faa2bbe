use std::path::Path;

use super::write_atomic;
use crate::error::Result;
use crate::train::EpochMetrics;

/// `epoch<TAB>train_loss<TAB>val_loss<TAB>val_acc`, floats at 6 decimals.
pub fn format_metrics_line(m: &EpochMetrics) -> String {
    format!(
        "{}\t{:.6}\t{:.6}\t{:.6}\n",
        m.epoch, m.train_loss, m.val_loss, m.val_acc
    )
}

pub fn write_metrics(path: impl AsRef<Path>, metrics: &[EpochMetrics]) -> Result<()> {
    let text: String = metrics.iter().map(format_metrics_line).collect();
    write_atomic(path.as_ref(), text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_format() {
        let m = EpochMetrics {
            epoch: 3,
            train_loss: 1.0 / 3.0,
            val_loss: 2.5,
            val_acc: 0.9,
        };
        assert_eq!(format_metrics_line(&m), "3\t0.333333\t2.500000\t0.900000\n");
    }
}
