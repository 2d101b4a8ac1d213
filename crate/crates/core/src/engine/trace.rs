use std::collections::VecDeque;
use std::io::{self, Write};

use serde::Serialize;

use crate::model::{Bandwidth, CoreId, ServerId, TaskId, Tick};
use crate::rational::Rational;

/// One trace line. Field order is the declaration order; times are exact
/// rationals printed as strings.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceRecord {
    JobArrival {
        t: Rational,
        task: TaskId,
        job: u64,
        demand: Tick,
    },
    JobComplete {
        t: Rational,
        task: TaskId,
        job: u64,
        server: ServerId,
        v: Rational,
        missed: bool,
    },
    Postpone {
        t: Rational,
        server: ServerId,
        v: Rational,
        d: Rational,
    },
    TempMigration {
        task: TaskId,
        from: CoreId,
        to: CoreId,
        t: Rational,
        grant: Bandwidth,
    },
    TempReturn {
        task: TaskId,
        t: Rational,
    },
    PermMigration {
        task: TaskId,
        from: CoreId,
        to: CoreId,
        t: Rational,
    },
    LbDeferred {
        task: TaskId,
        target: CoreId,
        t: Rational,
    },
    LbAbort {
        task: TaskId,
        target: CoreId,
        t: Rational,
    },
    TaskAdmitted {
        task: TaskId,
        core: CoreId,
        t: Rational,
    },
    TaskRejected {
        task: TaskId,
        t: Rational,
    },
    TaskDeparted {
        task: TaskId,
        t: Rational,
    },
    ServerDeadlineMiss {
        server: ServerId,
        t: Rational,
    },
    GedfMigration {
        server: ServerId,
        from: CoreId,
        to: CoreId,
        t: Rational,
    },
}

impl TraceRecord {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("trace record serializes")
    }
}

pub fn write_ndjson<W: Write>(records: &[TraceRecord], mut out: W) -> io::Result<()> {
    for r in records {
        writeln!(out, "{}", r.to_line())?;
    }
    Ok(())
}

const TAIL: usize = 32;

/// Collects the full trace and/or a short tail for error reports; records
/// are only built when one of them is enabled.
pub(crate) struct Recorder {
    full: Option<Vec<TraceRecord>>,
    tail: Option<VecDeque<TraceRecord>>,
}

impl Recorder {
    pub fn new(full: bool, tail: bool) -> Recorder {
        Recorder {
            full: full.then(Vec::new),
            tail: tail.then(VecDeque::new),
        }
    }

    pub fn emit(&mut self, make: impl FnOnce() -> TraceRecord) {
        if self.full.is_none() && self.tail.is_none() {
            return;
        }
        let r = make();
        if let Some(tail) = &mut self.tail {
            if tail.len() == TAIL {
                tail.pop_front();
            }
            tail.push_back(r.clone());
        }
        if let Some(full) = &mut self.full {
            full.push(r);
        }
    }

    pub fn tail_lines(&self) -> Vec<String> {
        match (&self.tail, &self.full) {
            (Some(t), _) => t.iter().map(TraceRecord::to_line).collect(),
            (None, Some(f)) => f[f.len().saturating_sub(TAIL)..]
                .iter()
                .map(TraceRecord::to_line)
                .collect(),
            _ => Vec::new(),
        }
    }

    pub fn into_full(self) -> Option<Vec<TraceRecord>> {
        self.full
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_format_is_stable() {
        let r = TraceRecord::TempMigration {
            task: TaskId(3),
            from: CoreId(0),
            to: CoreId(1),
            t: Rational::new(7, 2),
            grant: Bandwidth::ratio(1, 10),
        };
        assert_eq!(
            r.to_line(),
            r#"{"event":"temp_migration","task":3,"from":0,"to":1,"t":"7/2","grant":"1/10"}"#
        );
    }

    #[test]
    fn recorder_keeps_bounded_tail() {
        let mut rec = Recorder::new(false, true);
        for k in 0..100u64 {
            rec.emit(|| TraceRecord::TempReturn {
                task: TaskId(0),
                t: Rational::from(k),
            });
        }
        let tail = rec.tail_lines();
        assert_eq!(tail.len(), TAIL);
        assert!(tail.last().unwrap().contains("\"99\""));
        assert!(rec.into_full().is_none());
    }
}
