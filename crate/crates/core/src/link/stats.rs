//! Per-frame run statistics: CSV logging and summaries.

use std::fs::File;
use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ec::reconcile::realized_efficiency;
use crate::pa::PaFrame;

/// One reporting interval (one privacy-amplified frame). Rates are per
/// second of simulated clock time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub sifted_rate: f64,
    pub secure_rate: f64,
    pub qber: f64,
    pub ec_failure_rate: f64,
    /// Empty when the frame carried no corrected errors.
    pub f_ec_realized: Option<f64>,
    pub compression_ratio: f64,
    pub cumulative_secure_bits: u64,
}

pub const CSV_HEADER: [&str; 7] = [
    "sifted_rate",
    "secure_rate",
    "qber",
    "ec_failure_rate",
    "f_ec_realized",
    "compression_ratio",
    "cumulative_secure_bits",
];

impl RunStats {
    pub fn for_frame(
        frame: &PaFrame,
        secure_bits: u64,
        cumulative_before: u64,
        clock_rate_hz: f64,
    ) -> Self {
        let n = frame.corrected_bits.len();
        let per_second = |bits: u64| {
            if frame.elapsed_slots == 0 {
                0.0
            } else {
                bits as f64 * clock_rate_hz / frame.elapsed_slots as f64
            }
        };
        RunStats {
            sifted_rate: per_second(frame.sifted_bits),
            secure_rate: per_second(secure_bits),
            qber: if n == 0 {
                0.0
            } else {
                frame.corrected_errors as f64 / n as f64
            },
            ec_failure_rate: if frame.blocks == 0 {
                0.0
            } else {
                frame.failed_blocks as f64 / frame.blocks as f64
            },
            f_ec_realized: realized_efficiency(frame.leak_bits, n, frame.corrected_errors),
            compression_ratio: if n == 0 {
                0.0
            } else {
                secure_bits as f64 / n as f64
            },
            cumulative_secure_bits: cumulative_before + secure_bits,
        }
    }
}

/// Appends rows to a stats CSV, flushing after each one.
pub struct StatsWriter {
    inner: csv::Writer<File>,
}

impl StatsWriter {
    /// Creates (truncates) the file and writes the header.
    pub fn create(path: &Path) -> io::Result<Self> {
        let mut inner = csv::WriterBuilder::new()
            .has_headers(false)
            .from_path(path)?;
        inner.write_record(CSV_HEADER)?;
        inner.flush()?;
        Ok(StatsWriter { inner })
    }

    pub fn append(&mut self, row: &RunStats) -> io::Result<()> {
        self.inner.serialize(row)?;
        self.inner.flush()
    }
}

pub fn read_stats(path: &Path) -> io::Result<Vec<RunStats>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    if headers.iter().ne(CSV_HEADER) {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("unexpected stats columns: {headers:?}"),
        ));
    }
    rdr.deserialize()
        .map(|r| r.map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e)))
        .collect()
}

/// Aggregate over a whole run.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RunSummary {
    pub frames: usize,
    pub mean_sifted_rate: f64,
    pub mean_secure_rate: f64,
    /// Standard deviation over mean of the per-frame secure rate.
    pub secure_rate_fluctuation: f64,
    pub mean_qber: f64,
    pub mean_ec_failure_rate: f64,
    pub mean_f_ec: Option<f64>,
    pub mean_compression_ratio: f64,
    pub total_secure_bits: u64,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

pub fn summarize(rows: &[RunStats]) -> RunSummary {
    if rows.is_empty() {
        return RunSummary::default();
    }
    let m = |f: fn(&RunStats) -> f64| mean(rows.iter().map(f)).unwrap_or(0.0);
    let mean_secure_rate = m(|r| r.secure_rate);
    let var = mean(
        rows.iter()
            .map(|r| (r.secure_rate - mean_secure_rate).powi(2)),
    )
    .unwrap_or(0.0);
    RunSummary {
        frames: rows.len(),
        mean_sifted_rate: m(|r| r.sifted_rate),
        mean_secure_rate,
        secure_rate_fluctuation: if mean_secure_rate > 0.0 {
            var.sqrt() / mean_secure_rate
        } else {
            0.0
        },
        mean_qber: m(|r| r.qber),
        mean_ec_failure_rate: m(|r| r.ec_failure_rate),
        mean_f_ec: mean(rows.iter().filter_map(|r| r.f_ec_realized)),
        mean_compression_ratio: m(|r| r.compression_ratio),
        total_secure_bits: rows.last().map_or(0, |r| r.cumulative_secure_bits),
    }
}

impl RunSummary {
    pub fn write_report<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "frames                 {}", self.frames)?;
        writeln!(
            out,
            "sifted rate            {:.4} Mb/s",
            self.mean_sifted_rate / 1e6
        )?;
        writeln!(
            out,
            "secure rate            {:.4} Mb/s",
            self.mean_secure_rate / 1e6
        )?;
        writeln!(
            out,
            "secure rate std/mean   {:.4}",
            self.secure_rate_fluctuation
        )?;
        writeln!(out, "qber                   {:.5}", self.mean_qber)?;
        writeln!(
            out,
            "ec failure rate        {:.5}",
            self.mean_ec_failure_rate
        )?;
        match self.mean_f_ec {
            Some(f) => writeln!(out, "f_ec realized          {f:.4}")?,
            None => writeln!(out, "f_ec realized          -")?,
        }
        writeln!(
            out,
            "compression ratio      {:.4}",
            self.mean_compression_ratio
        )?;
        writeln!(out, "total secure bits      {}", self.total_secure_bits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bits::BitVec;
    use crate::sifting::DecoyTally;

    fn frame(n: usize, slots: u64) -> PaFrame {
        PaFrame {
            frame_id: 0,
            corrected_bits: BitVec::zeros(n),
            block_ids: vec![0],
            leak_bits: 0,
            tally: DecoyTally::default(),
            corrected_errors: 0,
            sifted_bits: n as u64,
            elapsed_slots: slots,
            blocks: 3,
            failed_blocks: 0,
        }
    }

    #[test]
    fn secure_rate_uses_simulated_time() {
        // 2 s at 1 GHz.
        let f = frame(1000, 2_000_000_000);
        let s = RunStats::for_frame(&f, 29_390_000, 0, 1e9);
        assert!((s.secure_rate - 14.695e6).abs() < 1.0);
        assert_eq!(s.ec_failure_rate, 0.0);
        assert_eq!(s.cumulative_secure_bits, 29_390_000);
        assert_eq!(s.f_ec_realized, None);
    }

    #[test]
    fn csv_round_trip_and_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stats.csv");
        drop(StatsWriter::create(&path).unwrap());
        assert_eq!(
            std::fs::read_to_string(&path).unwrap().trim(),
            CSV_HEADER.join(",")
        );
        assert!(read_stats(&path).unwrap().is_empty());
        assert_eq!(summarize(&[]).frames, 0);

        let mut w = StatsWriter::create(&path).unwrap();
        let mut rows = Vec::new();
        let mut cum = 0;
        for i in 0..4u64 {
            let mut f = frame(3000, 1_000_000 + i * 1000);
            f.corrected_errors = 90 + i;
            f.leak_bits = 800;
            f.failed_blocks = i % 2;
            let r = RunStats::for_frame(&f, 800 + i, cum, 1e9);
            cum = r.cumulative_secure_bits;
            w.append(&r).unwrap();
            rows.push(r);
        }
        drop(w);
        let back = read_stats(&path).unwrap();
        assert_eq!(back, rows);
        let s = summarize(&back);
        assert_eq!(s.frames, 4);
        assert_eq!(s.total_secure_bits, 800 + 801 + 802 + 803);
        assert!((s.mean_ec_failure_rate - 1.0 / 6.0).abs() < 1e-12);
        assert!(s.mean_f_ec.unwrap() > 1.0);
        let mut text = Vec::new();
        s.write_report(&mut text).unwrap();
        assert!(String::from_utf8(text)
            .unwrap()
            .contains("total secure bits      3206"));
    }

    #[test]
    fn wrong_columns_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "a,b\n1,2\n").unwrap();
        assert!(read_stats(&path).is_err());
    }
}
