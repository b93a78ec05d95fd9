//! Offline profiling lookup table: maps kernel launch parameters to the
//! execution time and utilization recorded during isolated profiling runs.

use crate::error::{ConfigError, LookupMiss};
use crate::units::{us, Nanos};
use crate::workload::Workload;
use std::collections::BTreeMap;
use std::path::Path;

/// One profiled row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LookupRow {
    pub exec_time: Nanos,
    pub utilization: f64,
    pub gpu_segment_id: u32,
}

/// Rows keyed by `(kernel_id, grid_dim, block_dim)`. Multiple rows per key
/// are retained as a history; lookups return the most recent.
#[derive(Debug, Clone, Default)]
pub struct LookupTable {
    rows: BTreeMap<(u64, u32, u32), Vec<LookupRow>>,
}

impl LookupTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, kernel_id: u64, grid: u32, block: u32, row: LookupRow) {
        self.rows.entry((kernel_id, grid, block)).or_default().push(row);
    }

    /// Most recent row for the key. A miss signals an unprofiled kernel;
    /// callers fall back to the task-level mean.
    pub fn lookup(&self, kernel_id: u64, grid: u32, block: u32) -> Result<LookupRow, LookupMiss> {
        self.rows
            .get(&(kernel_id, grid, block))
            .and_then(|h| h.last().copied())
            .ok_or(LookupMiss {
                kernel_id,
                grid,
                block,
            })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Builds the table a profiling pass would produce: one row per kernel
    /// in the workload.
    pub fn from_workload(w: &Workload) -> Self {
        let mut t = Self::new();
        for chain in &w.chains {
            for task in &chain.tasks {
                for k in &task.kernels {
                    t.insert(
                        k.kernel_id,
                        k.grid_dim,
                        k.block_dim,
                        LookupRow {
                            exec_time: k.nominal_exec,
                            utilization: k.utilization,
                            gpu_segment_id: k.gpu_segment_id,
                        },
                    );
                }
            }
        }
        t
    }

    /// Loads a table from CSV with header
    /// `kernel_id,grid,block,exec_us,util_pct,segment_id`.
    pub fn from_csv(path: &Path) -> Result<Self, ConfigError> {
        let mut rdr = csv::Reader::from_path(path).map_err(|e| {
            ConfigError::Parse(format!("{}: {e}", path.display()))
        })?;
        let expected = ["kernel_id", "grid", "block", "exec_us", "util_pct", "segment_id"];
        {
            let got = rdr
                .headers()
                .map_err(|e| ConfigError::Parse(format!("{}: {e}", path.display())))?;
            let got: Vec<&str> = got.iter().collect();
            if got != expected {
                return Err(ConfigError::Parse(format!(
                    "{}: expected header {:?}, got {:?}",
                    path.display(),
                    expected.join(","),
                    got.join(",")
                )));
            }
        }
        let mut t = Self::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| ConfigError::Parse(format!("{}: {e}", path.display())))?;
            let line = i + 2;
            let field = |idx: usize, name: &str| -> Result<String, ConfigError> {
                rec.get(idx)
                    .map(str::to_owned)
                    .ok_or_else(|| {
                        ConfigError::Parse(format!(
                            "{} line {line}: missing field `{name}`",
                            path.display()
                        ))
                    })
            };
            let parse = |v: String, name: &str| -> Result<f64, ConfigError> {
                v.trim().parse::<f64>().map_err(|_| {
                    ConfigError::Parse(format!(
                        "{} line {line}: field `{name}` is not a number: `{v}`",
                        path.display()
                    ))
                })
            };
            let kernel_id = parse(field(0, "kernel_id")?, "kernel_id")? as u64;
            let grid = parse(field(1, "grid")?, "grid")? as u32;
            let block = parse(field(2, "block")?, "block")? as u32;
            let exec_us = parse(field(3, "exec_us")?, "exec_us")?;
            let util_pct = parse(field(4, "util_pct")?, "util_pct")?;
            let segment = parse(field(5, "segment_id")?, "segment_id")? as u32;
            if exec_us <= 0.0 {
                return Err(ConfigError::invalid(format!(
                    "{} line {line}: exec_us must be > 0",
                    path.display()
                )));
            }
            t.insert(
                kernel_id,
                grid,
                block,
                LookupRow {
                    exec_time: us(exec_us),
                    utilization: util_pct / 100.0,
                    gpu_segment_id: segment,
                },
            );
        }
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    // the path-finder example rows: 0.028 ms at 19%, 0.037 ms at 33%,
    // 0.044 ms at 42%
    fn example_table() -> LookupTable {
        let mut t = LookupTable::new();
        t.insert(0, 22, 512, LookupRow { exec_time: us(28.0), utilization: 0.19, gpu_segment_id: 0 });
        t.insert(0, 32, 512, LookupRow { exec_time: us(37.0), utilization: 0.33, gpu_segment_id: 0 });
        t.insert(1, 40, 512, LookupRow { exec_time: us(44.0), utilization: 0.42, gpu_segment_id: 1 });
        t
    }

    #[test]
    fn lookup_returns_profiled_rows() {
        let t = example_table();
        let r = t.lookup(0, 22, 512).unwrap();
        assert_eq!(r.exec_time, us(28.0));
        assert!((r.utilization - 0.19).abs() < 1e-12);
        let r = t.lookup(1, 40, 512).unwrap();
        assert_eq!(r.exec_time, us(44.0));
        assert!((r.utilization - 0.42).abs() < 1e-12);
        assert_eq!(r.gpu_segment_id, 1);
    }

    #[test]
    fn unknown_key_is_a_miss() {
        let t = example_table();
        let err = t.lookup(9, 1, 1).unwrap_err();
        assert_eq!(err.kernel_id, 9);
    }

    #[test]
    fn most_recent_row_wins() {
        let mut t = example_table();
        t.insert(0, 22, 512, LookupRow { exec_time: us(30.0), utilization: 0.25, gpu_segment_id: 0 });
        assert_eq!(t.lookup(0, 22, 512).unwrap().exec_time, us(30.0));
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lookup.csv");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "kernel_id,grid,block,exec_us,util_pct,segment_id").unwrap();
        writeln!(f, "0,22,512,28,19,0").unwrap();
        writeln!(f, "1,40,512,44,42,1").unwrap();
        drop(f);
        let t = LookupTable::from_csv(&path).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.lookup(0, 22, 512).unwrap().exec_time, us(28.0));
    }

    #[test]
    fn csv_bad_field_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lookup.csv");
        std::fs::write(
            &path,
            "kernel_id,grid,block,exec_us,util_pct,segment_id\n0,22,512,oops,19,0\n",
        )
        .unwrap();
        let err = LookupTable::from_csv(&path).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
        assert!(err.contains("exec_us"), "{err}");
    }
}
