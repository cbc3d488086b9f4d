use std::io::Write;

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

/// Per-epoch training record, written as `epoch split metric value`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub rows: Vec<HistoryRow>,
}

impl History {
    pub fn push(&mut self, epoch: usize, split: &str, metric: &str, value: f64) {
        self.rows.push(HistoryRow {
            epoch,
            split: split.to_string(),
            metric: metric.to_string(),
            value,
        });
    }

    pub fn get(&self, epoch: usize, split: &str, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.epoch == epoch && r.split == split && r.metric == metric)
            .map(|r| r.value)
    }

    /// Values of one series in epoch order.
    pub fn series(&self, split: &str, metric: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.split == split && r.metric == metric)
            .map(|r| r.value)
            .collect()
    }

    pub fn write_tsv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "epoch\tsplit\tmetric\tvalue")?;
        for r in &self.rows {
            writeln!(w, "{}\t{}\t{}\t{}", r.epoch, r.split, r.metric, r.value)?;
        }
        w.flush()
    }
}
