//! Trace export: density CSV, summary JSON and a binary event log.
//!
//! Event-log records are 14 bytes, little endian: `f64` time, `u8` species
//! (0 or 1), `u8` class (right, left, birth, death), `u32` site.

use std::io::{ErrorKind, Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Species;

use super::run::PathTrace;
use super::state::{Event, EventKind};
use super::tracker::{MartingaleSummary, TransitionClass};

pub const EVENT_RECORD_BYTES: usize = 14;

/// Long-format CSV: one row per `(replica, t, species, site)`.
pub fn write_trace_csv<W: Write>(w: W, traces: &[PathTrace]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["replica", "t", "species", "site", "density"])?;
    for tr in traces {
        let n = tr.n_scale as f64;
        for s in &tr.samples {
            for sp in Species::BOTH {
                for (j, &c) in s.counts(sp).iter().enumerate() {
                    out.write_record(&[
                        tr.replica.to_string(),
                        s.t.to_string(),
                        (sp.index() + 1).to_string(),
                        j.to_string(),
                        (c as f64 / n).to_string(),
                    ])?;
                }
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// Per-replica scalars of a trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub replica: u64,
    pub m: usize,
    pub n_scale: u64,
    pub t_end: f64,
    pub events: u64,
    pub absorbed_at: Option<f64>,
    pub approximate: bool,
    pub final_mass: [f64; 2],
    /// `N_A` per class, in [`TransitionClass::ALL`] order.
    pub jumps: [u64; 4],
    pub raw_intensity: [f64; 4],
    pub intensity: [f64; 4],
    pub martingale: Option<MartingaleSummary>,
    pub mart_check_error: Option<f64>,
    pub gap: Option<[f64; 2]>,
    pub initial_gap: Option<[f64; 2]>,
}

impl TraceSummary {
    pub fn of(tr: &PathTrace) -> Self {
        let last = tr.last();
        Self {
            replica: tr.replica,
            m: tr.m,
            n_scale: tr.n_scale,
            t_end: tr.t_end,
            events: tr.events,
            absorbed_at: tr.absorbed_at,
            approximate: tr.approximate,
            final_mass: Species::BOTH.map(|s| last.mass(s, tr.n_scale)),
            jumps: TransitionClass::ALL.map(|c| tr.account.count(c)),
            raw_intensity: TransitionClass::ALL.map(|c| tr.account.raw_intensity(c)),
            intensity: TransitionClass::ALL.map(|c| tr.account.intensity(c)),
            martingale: tr.martingale.clone(),
            mart_check_error: tr.mart_check_error,
            gap: tr.gap,
            initial_gap: tr.initial_gap,
        }
    }
}

pub fn write_summary_json<W: Write>(w: W, traces: &[PathTrace]) -> Result<()> {
    let summaries: Vec<TraceSummary> = traces.iter().map(TraceSummary::of).collect();
    serde_json::to_writer_pretty(w, &summaries)?;
    Ok(())
}

pub fn write_event_log<W: Write>(mut w: W, events: &[Event]) -> Result<()> {
    let mut buf = [0u8; EVENT_RECORD_BYTES];
    for ev in events {
        let site = u32::try_from(ev.site).map_err(|_| Error::Config(format!("site {} exceeds u32", ev.site)))?;
        buf[0..8].copy_from_slice(&ev.t.to_le_bytes());
        buf[8] = ev.species.index() as u8;
        buf[9] = ev.kind.index() as u8;
        buf[10..14].copy_from_slice(&site.to_le_bytes());
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_event_log<R: Read>(mut r: R) -> Result<Vec<Event>> {
    let mut out = Vec::new();
    let mut buf = [0u8; EVENT_RECORD_BYTES];
    loop {
        match r.read_exact(&mut buf) {
            Ok(()) => {}
            Err(e) if e.kind() == ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let t = f64::from_le_bytes(buf[0..8].try_into().unwrap());
        let species = match buf[8] {
            0 => Species::U,
            1 => Species::V,
            b => return Err(Error::Config(format!("bad species byte {b} in event log"))),
        };
        if buf[9] > 3 {
            return Err(Error::Config(format!("bad class byte {} in event log", buf[9])));
        }
        let kind = EventKind::from_index(buf[9] as usize);
        let site = u32::from_le_bytes(buf[10..14].try_into().unwrap()) as usize;
        out.push(Event { t, species, kind, site });
    }
    Ok(out)
}
