//! On-disk formats: topology JSON, workload CSV and newline-delimited
//! telemetry JSON.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    validate_topology, validate_workload, Fragment, HostSpec, ModelError, PowerModelParams,
    TelemetrySample, Topology, WorkloadTask,
};

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("workload task {task}: {message}")]
    Workload { task: String, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl FormatError {
    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        FormatError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct HostRecord {
    id: String,
    core_count: u32,
    core_frequency_mhz: f64,
    memory_mib: u64,
    p_idle_w: f64,
    p_max_w: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TopologyRecord {
    name: String,
    hosts: Vec<HostRecord>,
}

/// Parses a topology document; every host starts at exponent `initial_r`.
pub fn topology_from_json(json: &str, initial_r: f64) -> Result<Topology, FormatError> {
    let record: TopologyRecord = serde_json::from_str(json).map_err(|e| FormatError::Parse {
        line: e.line(),
        message: e.to_string(),
    })?;
    let topology = Topology {
        name: record.name,
        hosts: record
            .hosts
            .into_iter()
            .map(|h| HostSpec {
                id: h.id,
                core_count: h.core_count,
                core_frequency: h.core_frequency_mhz,
                memory: h.memory_mib,
                power: PowerModelParams {
                    p_idle: h.p_idle_w,
                    p_max: h.p_max_w,
                    r: initial_r,
                },
            })
            .collect(),
    };
    Ok(validate_topology(topology)?)
}

pub fn topology_to_json(topology: &Topology) -> String {
    let record = TopologyRecord {
        name: topology.name.clone(),
        hosts: topology
            .hosts
            .iter()
            .map(|h| HostRecord {
                id: h.id.clone(),
                core_count: h.core_count,
                core_frequency_mhz: h.core_frequency,
                memory_mib: h.memory,
                p_idle_w: h.power.p_idle,
                p_max_w: h.power.p_max,
            })
            .collect(),
    };
    serde_json::to_string_pretty(&record).expect("topology serializes")
}

pub fn load_topology(path: &Path, initial_r: f64) -> Result<Topology, FormatError> {
    let text = std::fs::read_to_string(path).map_err(|e| FormatError::io(path, e))?;
    topology_from_json(&text, initial_r)
}

#[derive(Debug, Serialize, Deserialize)]
struct WorkloadRow {
    task_id: String,
    submit_time_s: i64,
    core_request: u32,
    fragment_index: usize,
    duration_s: i64,
    cpu_demand_mhz: f64,
}

/// Reads a workload CSV (one row per fragment) into validated tasks sorted by
/// `(submit_time, id)`.
pub fn read_workload<R: Read>(reader: R) -> Result<Vec<WorkloadTask>, FormatError> {
    let mut csv = csv::Reader::from_reader(reader);
    let mut rows: BTreeMap<String, Vec<WorkloadRow>> = BTreeMap::new();
    for (i, row) in csv.deserialize::<WorkloadRow>().enumerate() {
        let row = row.map_err(|e| FormatError::Parse {
            // header is line 1
            line: e.position().map_or(i + 2, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        rows.entry(row.task_id.clone()).or_default().push(row);
    }

    let mut tasks = Vec::with_capacity(rows.len());
    for (id, mut fragments) in rows {
        fragments.sort_by_key(|r| r.fragment_index);
        let fail = |message: &str| FormatError::Workload {
            task: id.clone(),
            message: message.to_string(),
        };
        if fragments
            .iter()
            .enumerate()
            .any(|(i, r)| r.fragment_index != i)
        {
            return Err(fail("fragment_index must be contiguous from 0"));
        }
        let first = &fragments[0];
        if fragments
            .iter()
            .any(|r| r.submit_time_s != first.submit_time_s || r.core_request != first.core_request)
        {
            return Err(fail("submit_time_s and core_request must agree across fragments"));
        }
        tasks.push(WorkloadTask {
            id: id.clone(),
            submit_time: first.submit_time_s,
            core_request: first.core_request,
            fragments: fragments
                .iter()
                .map(|r| Fragment {
                    duration: r.duration_s,
                    cpu_demand: r.cpu_demand_mhz,
                })
                .collect(),
        });
    }
    Ok(validate_workload(tasks)?)
}

pub fn load_workload(path: &Path) -> Result<Vec<WorkloadTask>, FormatError> {
    let file = File::open(path).map_err(|e| FormatError::io(path, e))?;
    read_workload(BufReader::new(file))
}

pub fn write_workload<W: Write>(writer: W, tasks: &[WorkloadTask]) -> Result<(), FormatError> {
    let mut csv = csv::Writer::from_writer(writer);
    let to_parse = |e: csv::Error| FormatError::Parse {
        line: 0,
        message: e.to_string(),
    };
    for task in tasks {
        for (index, fragment) in task.fragments.iter().enumerate() {
            csv.serialize(WorkloadRow {
                task_id: task.id.clone(),
                submit_time_s: task.submit_time,
                core_request: task.core_request,
                fragment_index: index,
                duration_s: fragment.duration,
                cpu_demand_mhz: fragment.cpu_demand,
            })
            .map_err(to_parse)?;
        }
    }
    csv.flush().map_err(|e| FormatError::Parse {
        line: 0,
        message: e.to_string(),
    })
}

/// Parses one telemetry record; `line` is 1-based and only used for errors.
pub fn parse_telemetry_line(text: &str, line: usize) -> Result<TelemetrySample, FormatError> {
    serde_json::from_str(text).map_err(|e| FormatError::Parse {
        line,
        message: e.to_string(),
    })
}

/// Reads newline-delimited telemetry records, skipping blank lines.
pub fn read_telemetry<R: Read>(reader: R) -> Result<Vec<TelemetrySample>, FormatError> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line.map_err(|e| FormatError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_telemetry_line(&line, i + 1)?);
    }
    Ok(out)
}

pub fn telemetry_line(sample: &TelemetrySample) -> String {
    serde_json::to_string(sample).expect("telemetry serializes")
}

pub fn write_telemetry<W: Write>(mut writer: W, samples: &[TelemetrySample]) -> io::Result<()> {
    for sample in samples {
        writeln!(writer, "{}", telemetry_line(sample))?;
    }
    writer.flush()
}
