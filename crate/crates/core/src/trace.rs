//! Event trace output: an optional CSV dump
//! (`time_ns,seq,kind,chain,instance,detail`), an optional in-memory
//! capture for equivalence tests, and a short ring of recent events for
//! invariant diagnostics.

use crate::units::Nanos;
use std::collections::VecDeque;
use std::io::{BufWriter, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceKind {
    FrameArrival,
    CpuSegmentDone,
    LaunchIssued,
    KernelDispatched,
    KernelCompleted,
    MemcpyCompleted,
    SyncSatisfied,
    SleepWake,
    DeviceBarrierDone,
    EarlyExit,
    InstanceDone,
    ThresholdRecalibrated,
}

impl TraceKind {
    pub fn name(self) -> &'static str {
        match self {
            TraceKind::FrameArrival => "FrameArrival",
            TraceKind::CpuSegmentDone => "CpuSegmentDone",
            TraceKind::LaunchIssued => "LaunchIssued",
            TraceKind::KernelDispatched => "KernelDispatched",
            TraceKind::KernelCompleted => "KernelCompleted",
            TraceKind::MemcpyCompleted => "MemcpyCompleted",
            TraceKind::SyncSatisfied => "SyncSatisfied",
            TraceKind::SleepWake => "SleepWake",
            TraceKind::DeviceBarrierDone => "DeviceBarrierDone",
            TraceKind::EarlyExit => "EarlyExit",
            TraceKind::InstanceDone => "InstanceDone",
            TraceKind::ThresholdRecalibrated => "ThresholdRecalibrated",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub time: Nanos,
    pub seq: u64,
    pub kind: TraceKind,
    pub chain: i64,
    pub instance: i64,
    pub detail: String,
}

pub struct TraceSink {
    seq: u64,
    csv: Option<BufWriter<std::fs::File>>,
    capture: Option<Vec<TraceRecord>>,
    urgency_csv: Option<BufWriter<std::fs::File>>,
    recent: VecDeque<String>,
}

impl TraceSink {
    pub fn new() -> Self {
        TraceSink {
            seq: 0,
            csv: None,
            capture: None,
            urgency_csv: None,
            recent: VecDeque::with_capacity(64),
        }
    }

    pub fn with_csv(mut self, path: &Path) -> std::io::Result<Self> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "time_ns,seq,kind,chain,instance,detail")?;
        self.csv = Some(w);
        Ok(self)
    }

    pub fn with_urgency_csv(mut self, path: &Path) -> std::io::Result<Self> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "time_ns,chain,instance,urgency")?;
        self.urgency_csv = Some(w);
        Ok(self)
    }

    pub fn with_capture(mut self) -> Self {
        self.capture = Some(Vec::new());
        self
    }

    pub fn record(&mut self, time: Nanos, kind: TraceKind, chain: i64, instance: i64, detail: &str) {
        let seq = self.seq;
        self.seq += 1;
        if self.csv.is_none() && self.capture.is_none() {
            // keep only the diagnostics ring hot
            if self.recent.len() == 64 {
                self.recent.pop_front();
            }
            self.recent
                .push_back(format!("{time} {seq} {} {chain} {instance} {detail}", kind.name()));
            return;
        }
        if let Some(w) = &mut self.csv {
            let _ = writeln!(w, "{time},{seq},{},{chain},{instance},{detail}", kind.name());
        }
        if let Some(v) = &mut self.capture {
            v.push(TraceRecord {
                time,
                seq,
                kind,
                chain,
                instance,
                detail: detail.to_string(),
            });
        }
        if self.recent.len() == 64 {
            self.recent.pop_front();
        }
        self.recent
            .push_back(format!("{time} {seq} {} {chain} {instance} {detail}", kind.name()));
    }

    pub fn record_urgency(&mut self, time: Nanos, chain: u32, instance: u64, urgency: f64) {
        if let Some(w) = &mut self.urgency_csv {
            let _ = writeln!(w, "{time},{chain},{instance},{urgency:.6}");
        }
    }

    pub fn recent_dump(&self) -> String {
        self.recent.iter().cloned().collect::<Vec<_>>().join("\n")
    }

    pub fn into_capture(mut self) -> Option<Vec<TraceRecord>> {
        self.flush();
        self.capture.take()
    }

    pub fn flush(&mut self) {
        if let Some(w) = &mut self.csv {
            let _ = w.flush();
        }
        if let Some(w) = &mut self.urgency_csv {
            let _ = w.flush();
        }
    }
}

impl Default for TraceSink {
    fn default() -> Self {
        Self::new()
    }
}
