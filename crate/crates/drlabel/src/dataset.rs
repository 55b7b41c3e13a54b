//! JSONL dataset records: one relaxation instance per line, with the graph
//! edges pinned at generation time.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{AtomicSystem, DirectedGraph, GraphError, GraphPolicy};
use crate::sim::RelaxationInstance;
use crate::vec3::Vec3;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("record has inconsistent lengths")]
    InconsistentRecord,
}

/// One serialized instance. Positions are arrays of 3 floats; edges are
/// `[owner, neighbor]` index pairs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetRecord {
    pub atom_types: Vec<u32>,
    pub free_mask: Vec<bool>,
    pub initial_positions: Vec<Vec3>,
    pub equilibrium_positions: Vec<Vec3>,
    pub equilibrium_energy: f64,
    pub edges: Vec<[usize; 2]>,
}

impl DatasetRecord {
    pub fn from_instance(
        instance: &RelaxationInstance,
        graph: &DirectedGraph,
    ) -> Self {
        DatasetRecord {
            atom_types: instance.system.atom_types.clone(),
            free_mask: instance.system.free_mask.clone(),
            initial_positions: instance.initial_positions.clone(),
            equilibrium_positions: instance.equilibrium_positions.clone(),
            equilibrium_energy: instance.equilibrium_energy,
            edges: graph.edges().iter().map(|&(i, j)| [i, j]).collect(),
        }
    }

    pub fn n_atoms(&self) -> usize {
        self.atom_types.len()
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let n = self.n_atoms();
        if self.free_mask.len() != n
            || self.initial_positions.len() != n
            || self.equilibrium_positions.len() != n
        {
            return Err(DatasetError::InconsistentRecord);
        }
        if self.edges.iter().any(|&[i, j]| i == j || i >= n || j >= n) {
            return Err(DatasetError::InconsistentRecord);
        }
        Ok(())
    }

    pub fn graph(&self) -> DirectedGraph {
        DirectedGraph::from_edges_unchecked(
            self.n_atoms(),
            self.edges.iter().map(|&[i, j]| (i, j)).collect(),
        )
    }

    pub fn system(&self) -> Result<AtomicSystem, GraphError> {
        AtomicSystem::new(
            self.atom_types.clone(),
            self.initial_positions.clone(),
            self.free_mask.clone(),
        )
    }

    /// Displacement labels `p* - p0`.
    pub fn displacements(&self) -> Vec<Vec3> {
        self.initial_positions
            .iter()
            .zip(&self.equilibrium_positions)
            .map(|(p0, ps)| *ps - *p0)
            .collect()
    }
}

/// Metadata sidecar written next to the dataset file at generation time.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetMeta {
    pub n_records: usize,
    pub n_species: usize,
    pub graph: GraphPolicy,
    pub seed: u64,
    pub convergence_rate: f64,
    pub mean_free_displacement: f64,
}

pub fn write_jsonl(path: &Path, records: &[DatasetRecord]) -> Result<(), DatasetError> {
    let mut file = BufWriter::new(File::create(path)?);
    for record in records {
        serde_json::to_writer(&mut file, record)?;
        file.write_all(b"\n")?;
    }
    file.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<DatasetRecord>, DatasetError> {
    let file = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (idx, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DatasetRecord =
            serde_json::from_str(&line).map_err(|source| DatasetError::Parse { line: idx + 1, source })?;
        record.validate()?;
        out.push(record);
    }
    Ok(out)
}

/// Sidecar path convention: `<dataset>.meta.json`.
pub fn meta_path(dataset: &Path) -> std::path::PathBuf {
    let mut os = dataset.as_os_str().to_owned();
    os.push(".meta.json");
    std::path::PathBuf::from(os)
}

pub fn write_meta(dataset: &Path, meta: &DatasetMeta) -> Result<(), DatasetError> {
    let file = BufWriter::new(File::create(meta_path(dataset))?);
    serde_json::to_writer_pretty(file, meta)?;
    Ok(())
}

pub fn read_meta(dataset: &Path) -> Result<Option<DatasetMeta>, DatasetError> {
    let path = meta_path(dataset);
    if !path.exists() {
        return Ok(None);
    }
    let file = BufReader::new(File::open(path)?);
    Ok(Some(serde_json::from_reader(file)?))
}
