use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::metrics::{compute_metrics, overall_metrics, FrameRecord, MetricParams};
use crate::simnet::{run_simulation, traffic_report, Engine, SimConfig, SimulationResult, TrafficLedger};

use super::config::{ExperimentConfig, Mode};

/// Domain label of the summary row that aggregates every frame.
pub const ALL_DOMAINS: &str = "all";

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub mode: String,
    pub domain: String,
    pub epe: f64,
    pub d1_percent: f64,
    pub frames: usize,
    pub rounds: u32,
    pub to_server_mbps: Option<f64>,
    pub to_client_mbps: Option<f64>,
    pub to_server_mb_per_update: Option<f64>,
    pub to_client_mb_per_update: Option<f64>,
}

/// Per-domain rows in first-appearance order, then the overall row.
pub fn summarize(mode: Mode, records: &[FrameRecord], ledger: &TrafficLedger, rounds: u32, params: &MetricParams) -> Result<Vec<SummaryRow>> {
    let traffic = traffic_report(ledger, rounds as usize);
    let row = |domain: &str, m: crate::metrics::DomainMetrics| SummaryRow {
        mode: mode.name().into(),
        domain: domain.into(),
        epe: m.epe,
        d1_percent: m.d1_percent,
        frames: m.frames,
        rounds,
        to_server_mbps: traffic.mbps_to_server,
        to_client_mbps: traffic.mbps_to_client,
        to_server_mb_per_update: traffic.mb_per_update_to_server,
        to_client_mb_per_update: traffic.mb_per_update_to_client,
    };
    let mut rows: Vec<SummaryRow> = compute_metrics(records, params)?
        .into_iter()
        .map(|(d, m)| row(&d, m))
        .collect();
    rows.push(row(ALL_DOMAINS, overall_metrics(records, params)?));
    Ok(rows)
}

fn float(v: f64) -> String {
    format!("{v:.8e}")
}

fn opt(v: Option<f64>) -> String {
    v.map(float).unwrap_or_default()
}

fn csv_string(header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub const FRAMES_HEADER: [&str; 7] = ["frame", "domain", "prediction", "target", "epe", "d1", "round"];
pub const SUMMARY_HEADER: [&str; 10] = [
    "mode",
    "domain",
    "epe",
    "d1_percent",
    "frames",
    "rounds",
    "to_server_mbps",
    "to_client_mbps",
    "to_server_mb_per_update",
    "to_client_mb_per_update",
];
pub const TRAFFIC_HEADER: [&str; 5] = ["round", "time_ns", "upload_bytes", "dispatch_bytes", "segments"];

pub fn frames_csv(records: &[FrameRecord]) -> Result<String> {
    csv_string(
        &FRAMES_HEADER,
        records.iter().map(|r| {
            vec![
                r.index.to_string(),
                r.domain.to_string(),
                float(r.prediction),
                float(r.target),
                float(r.epe),
                u8::from(r.d1).to_string(),
                r.round.to_string(),
            ]
        }),
    )
}

fn summary_fields(r: &SummaryRow) -> Vec<String> {
    vec![
        r.mode.clone(),
        r.domain.clone(),
        float(r.epe),
        float(r.d1_percent),
        r.frames.to_string(),
        r.rounds.to_string(),
        opt(r.to_server_mbps),
        opt(r.to_client_mbps),
        opt(r.to_server_mb_per_update),
        opt(r.to_client_mb_per_update),
    ]
}

pub fn summary_csv(rows: &[SummaryRow]) -> Result<String> {
    csv_string(&SUMMARY_HEADER, rows.iter().map(summary_fields))
}

pub fn traffic_csv(ledger: &TrafficLedger) -> Result<String> {
    csv_string(
        &TRAFFIC_HEADER,
        ledger.rounds().iter().map(|r| {
            vec![
                r.round.to_string(),
                r.time_ns.to_string(),
                r.upload_bytes.to_string(),
                r.dispatch_bytes.to_string(),
                r.segments.to_string(),
            ]
        }),
    )
}

/// Parses a `frames.csv` back into records.
pub fn read_frames_csv(text: &str, params: &MetricParams) -> Result<Vec<FrameRecord>> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).ok_or_else(|| Error::Invariant(format!("frames.csv row missing column {i}")));
        let num = |i: usize| -> Result<f64> {
            field(i)?
                .parse()
                .map_err(|_| Error::Invariant(format!("frames.csv: bad number in column {i}")))
        };
        let int = |i: usize| -> Result<u64> {
            field(i)?
                .parse()
                .map_err(|_| Error::Invariant(format!("frames.csv: bad integer in column {i}")))
        };
        let mut r = FrameRecord::new(int(0)? as usize, Arc::from(field(1)?), num(2)?, num(3)?, int(6)?, params);
        r.epe = num(4)?;
        r.d1 = int(5)? == 1;
        out.push(r);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    pub mode: Mode,
    pub summary: Vec<SummaryRow>,
    pub result: SimulationResult,
    pub frames_csv: String,
    pub summary_csv: String,
    pub traffic_csv: String,
}

impl ExperimentOutput {
    pub fn overall(&self) -> &SummaryRow {
        self.summary.last().expect("summary always has the overall row")
    }

    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("frames.csv"), &self.frames_csv)?;
        std::fs::write(dir.join("summary.csv"), &self.summary_csv)?;
        std::fs::write(dir.join("traffic.csv"), &self.traffic_csv)?;
        Ok(())
    }
}

/// Cross-checks a finished run; any failure is an invariant violation.
pub fn check_invariants(sim: &SimConfig, out: &ExperimentOutput) -> Result<()> {
    let result = &out.result;
    let ledger = &result.ledger;
    let uploaded: u64 = ledger.uploads().iter().map(|u| u.bytes).sum();
    if uploaded != ledger.bytes_to_server() {
        return Err(Error::Invariant(format!(
            "to-server counter {} differs from the sum of uploads {uploaded}",
            ledger.bytes_to_server()
        )));
    }
    let dispatched: u64 = ledger.rounds().iter().map(|r| r.dispatch_bytes).sum();
    if dispatched != ledger.bytes_to_client() {
        return Err(Error::Invariant(format!(
            "to-client counter {} differs from the sum of dispatches {dispatched}",
            ledger.bytes_to_client()
        )));
    }
    if sim.schedule.start_barrier {
        if let Some((client, &t)) = result.first_upload_ns.iter().find(|(_, &t)| t > result.listener_start_ns) {
            return Err(Error::Invariant(format!(
                "listener started at {} ns before client {client}'s first upload at {t} ns",
                result.listener_start_ns
            )));
        }
    }
    let reparsed = read_frames_csv(&out.frames_csv, &sim.metrics)?;
    let again = summarize(out.mode, &reparsed, ledger, result.rounds, &sim.metrics)?;
    // frames.csv carries 9 significant digits
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-7 * a.abs().max(b.abs()).max(1.0);
    let consistent = again.len() == out.summary.len()
        && again.iter().zip(&out.summary).all(|(a, b)| {
            a.domain == b.domain && a.frames == b.frames && close(a.epe, b.epe) && close(a.d1_percent, b.d1_percent)
        });
    if !consistent {
        return Err(Error::Invariant("summary is not recomputable from frames.csv".into()));
    }
    Ok(())
}

/// Runs an already-built simulation and renders its artifacts.
pub fn run_built(mode: Mode, sim: &SimConfig, engine: Engine) -> Result<ExperimentOutput> {
    let result = run_simulation(sim, engine)?;
    let summary = summarize(mode, &result.records, &result.ledger, result.rounds, &sim.metrics)?;
    let out = ExperimentOutput {
        mode,
        frames_csv: frames_csv(&result.records)?,
        summary_csv: summary_csv(&summary)?,
        traffic_csv: traffic_csv(&result.ledger)?,
        summary,
        result,
    };
    check_invariants(sim, &out)?;
    Ok(out)
}

/// Validates `cfg`, runs it with `engine` and returns the artifacts. Nothing
/// is written; see [`ExperimentOutput::write_to`].
pub fn run_experiment(cfg: &ExperimentConfig, engine: Engine) -> Result<ExperimentOutput> {
    let sim = cfg.build()?;
    run_built(cfg.mode, &sim, engine)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    UpdateInterval,
    NumClients,
    FedMode,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "T" | "t" | "update_interval" => Ok(SweepAxis::UpdateInterval),
            "num_clients" | "clients" => Ok(SweepAxis::NumClients),
            "fed_mode" | "mode" => Ok(SweepAxis::FedMode),
            other => Err(Error::config("axis", format!("unknown sweep axis `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::UpdateInterval => "T",
            SweepAxis::NumClients => "num_clients",
            SweepAxis::FedMode => "fed_mode",
        }
    }

    /// `base` with this axis set to `value`; everything else, seeds
    /// included, is shared.
    pub fn apply(self, base: &ExperimentConfig, value: &str) -> Result<ExperimentConfig> {
        let mut cfg = base.clone();
        let count = |v: &str| {
            v.parse::<usize>()
                .map_err(|_| Error::config("values", format!("`{v}` is not a non-negative integer")))
        };
        match self {
            SweepAxis::UpdateInterval => cfg.update_interval = count(value)?,
            SweepAxis::NumClients => cfg.active.count = count(value)?,
            SweepAxis::FedMode => cfg.mode = Mode::parse(value)?,
        }
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub value: String,
    pub row: SummaryRow,
}

pub const SWEEP_HEADER_PREFIX: [&str; 2] = ["axis", "value"];

pub fn sweep_csv(axis: SweepAxis, points: &[SweepPoint]) -> Result<String> {
    let header: Vec<&str> = SWEEP_HEADER_PREFIX.iter().chain(SUMMARY_HEADER.iter()).copied().collect();
    csv_string(
        &header,
        points.iter().map(|p| {
            let mut f = vec![axis.name().to_string(), p.value.clone()];
            f.extend(summary_fields(&p.row));
            f
        }),
    )
}

/// One overall summary row per value. Every point is validated before any
/// runs; points run in parallel.
pub fn run_sweep(base: &ExperimentConfig, axis: SweepAxis, values: &[String], engine: Engine) -> Result<Vec<SweepPoint>> {
    if values.is_empty() {
        return Err(Error::config("values", "must not be empty"));
    }
    let cfgs = values.iter().map(|v| axis.apply(base, v)).collect::<Result<Vec<_>>>()?;
    let sims = cfgs.par_iter().map(|c| c.build()).collect::<Result<Vec<_>>>()?;
    cfgs.par_iter()
        .zip(sims.par_iter())
        .zip(values.par_iter())
        .map(|((cfg, sim), value)| {
            let out = run_built(cfg.mode, sim, engine)?;
            Ok(SweepPoint {
                value: value.clone(),
                row: out.overall().clone(),
            })
        })
        .collect()
}
