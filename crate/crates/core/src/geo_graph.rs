//! Station graph built from observed water-level correlation and great-circle distance.
//!
//! Two stations are joined when their observed series correlate above `rho_min`
//! and they lie closer than `d_max_km`. The edge weight is the correlation.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Mean Earth radius used for all distances.
pub const EARTH_RADIUS_KM: f64 = 6371.0;
pub const DEFAULT_RHO_MIN: f64 = 0.8;
pub const DEFAULT_D_MAX_KM: f64 = 500.0;

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("station {station} has a constant observed series")]
    ZeroVariance { station: usize },
    #[error("series length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("series too short for correlation (need at least 2 samples, got {0})")]
    TooShort(usize),
    #[error("invalid station table: {0}")]
    InvalidStation(String),
    #[error("need at least two stations, got {0}")]
    TooFewStations(usize),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed graph file: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed stations file: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Station {
    #[serde(rename = "id")]
    pub node_id: usize,
    pub name: String,
    pub agency: String,
    pub lat: f64,
    pub lon: f64,
}

impl Station {
    pub fn coords(&self) -> (f64, f64) {
        (self.lat, self.lon)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    pub weight: f64,
}

/// Undirected weighted station graph.
#[derive(Debug, Clone, PartialEq)]
pub struct StationGraph {
    stations: Vec<Station>,
    edges: Vec<Edge>,
    adjacency: Vec<f64>,
    rho_min: f64,
    d_max_km: f64,
    earth_radius_km: f64,
}

#[derive(Serialize, Deserialize)]
struct GraphFile {
    earth_radius_km: f64,
    rho_min: f64,
    d_max_km: f64,
    stations: Vec<Station>,
    edges: Vec<Edge>,
}

impl StationGraph {
    /// Assembles a graph from an explicit edge list; edges are normalized to
    /// `i < j` and sorted.
    pub fn from_edges(
        stations: Vec<Station>,
        mut edges: Vec<Edge>,
        rho_min: f64,
        d_max_km: f64,
    ) -> Result<Self, GraphError> {
        validate_stations(&stations)?;
        let n = stations.len();
        for e in &mut edges {
            if e.i == e.j || e.i >= n || e.j >= n {
                return Err(GraphError::InvalidStation(format!(
                    "edge ({}, {}) is not a valid station pair",
                    e.i, e.j
                )));
            }
            if e.i > e.j {
                std::mem::swap(&mut e.i, &mut e.j);
            }
        }
        edges.sort_by_key(|a| (a.i, a.j));
        edges.dedup_by(|a, b| a.i == b.i && a.j == b.j);
        let mut adjacency = vec![0.0; n * n];
        for e in &edges {
            adjacency[e.i * n + e.j] = e.weight;
            adjacency[e.j * n + e.i] = e.weight;
        }
        Ok(Self {
            stations,
            edges,
            adjacency,
            rho_min,
            d_max_km,
            earth_radius_km: EARTH_RADIUS_KM,
        })
    }

    pub fn len(&self) -> usize {
        self.stations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stations.is_empty()
    }

    pub fn stations(&self) -> &[Station] {
        &self.stations
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn rho_min(&self) -> f64 {
        self.rho_min
    }

    pub fn d_max_km(&self) -> f64 {
        self.d_max_km
    }

    /// Row-major `N × N` weighted adjacency.
    pub fn adjacency(&self) -> &[f64] {
        &self.adjacency
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.adjacency[i * self.len() + j]
    }

    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        let n = self.len();
        (0..n).filter(move |&j| self.adjacency[i * n + j] != 0.0)
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.len()];
        for e in &self.edges {
            deg[e.i] += 1;
            deg[e.j] += 1;
        }
        deg
    }

    pub fn isolated(&self) -> Vec<usize> {
        self.degrees()
            .iter()
            .enumerate()
            .filter(|(_, &d)| d == 0)
            .map(|(i, _)| i)
            .collect()
    }

    /// Relabels nodes so that old node `perm[k]` becomes new node `k`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.len();
        assert_eq!(perm.len(), n);
        let mut inverse = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new;
        }
        let stations = perm
            .iter()
            .enumerate()
            .map(|(new, &old)| Station {
                node_id: new,
                ..self.stations[old].clone()
            })
            .collect();
        let edges = self
            .edges
            .iter()
            .map(|e| Edge {
                i: inverse[e.i],
                j: inverse[e.j],
                weight: e.weight,
            })
            .collect();
        Self::from_edges(stations, edges, self.rho_min, self.d_max_km)
            .expect("permutation keeps graph valid")
    }

    /// Subgraph on the nodes `keep` (in that order), renumbered `0..keep.len()`.
    pub fn induced(&self, keep: &[usize]) -> Result<Self, GraphError> {
        let n = self.len();
        let mut position = vec![None; n];
        for (new, &old) in keep.iter().enumerate() {
            if old >= n || position[old].is_some() {
                return Err(GraphError::InvalidStation(format!(
                    "node {old} is out of range or repeated in the subgraph selection"
                )));
            }
            position[old] = Some(new);
        }
        let stations = keep
            .iter()
            .enumerate()
            .map(|(new, &old)| Station {
                node_id: new,
                ..self.stations[old].clone()
            })
            .collect();
        let edges = self
            .edges
            .iter()
            .filter_map(|e| {
                Some(Edge {
                    i: position[e.i]?,
                    j: position[e.j]?,
                    weight: e.weight,
                })
            })
            .collect();
        let mut g = Self::from_edges(stations, edges, self.rho_min, self.d_max_km)?;
        g.earth_radius_km = self.earth_radius_km;
        Ok(g)
    }

    pub fn to_json(&self) -> String {
        let file = GraphFile {
            earth_radius_km: self.earth_radius_km,
            rho_min: self.rho_min,
            d_max_km: self.d_max_km,
            stations: self.stations.clone(),
            edges: self.edges.clone(),
        };
        let mut s = serde_json::to_string_pretty(&file).expect("graph serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, GraphError> {
        let file: GraphFile = serde_json::from_str(text)?;
        let mut g = Self::from_edges(file.stations, file.edges, file.rho_min, file.d_max_km)?;
        g.earth_radius_km = file.earth_radius_km;
        Ok(g)
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    pub fn save(&self, path: &Path) -> Result<(), GraphError> {
        std::fs::write(path, self.to_json()).map_err(|source| GraphError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, GraphError> {
        let text = std::fs::read_to_string(path).map_err(|source| GraphError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }
}

fn validate_stations(stations: &[Station]) -> Result<(), GraphError> {
    for (k, s) in stations.iter().enumerate() {
        if s.node_id != k {
            return Err(GraphError::InvalidStation(format!(
                "node ids must be 0..N-1 in order; found {} at position {k}",
                s.node_id
            )));
        }
        if !(-90.0..=90.0).contains(&s.lat) || !(-180.0..=180.0).contains(&s.lon) {
            return Err(GraphError::InvalidStation(format!(
                "station {} has out-of-range coordinates ({}, {})",
                s.node_id, s.lat, s.lon
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Deserialize, Serialize)]
struct StationRow {
    node_id: usize,
    name: String,
    agency: String,
    lat: f64,
    lon: f64,
}

/// Reads a `node_id,name,agency,lat,lon` table; rows may appear in any order.
pub fn read_stations_csv(path: &Path) -> Result<Vec<Station>, GraphError> {
    let file = std::fs::File::open(path).map_err(|source| GraphError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_stations_csv(file)
}

pub fn parse_stations_csv(reader: impl std::io::Read) -> Result<Vec<Station>, GraphError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let expected = ["node_id", "name", "agency", "lat", "lon"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(GraphError::InvalidStation(format!(
            "expected header {}, got {}",
            expected.join(","),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut stations: Vec<Station> = Vec::new();
    for row in rdr.deserialize() {
        let row: StationRow = row?;
        stations.push(Station {
            node_id: row.node_id,
            name: row.name,
            agency: row.agency,
            lat: row.lat,
            lon: row.lon,
        });
    }
    stations.sort_by_key(|s| s.node_id);
    validate_stations(&stations)?;
    Ok(stations)
}

pub fn write_stations_csv(path: &Path, stations: &[Station]) -> Result<(), GraphError> {
    let mut w = csv::Writer::from_path(path)?;
    for s in stations {
        w.serialize(StationRow {
            node_id: s.node_id,
            name: s.name.clone(),
            agency: s.agency.clone(),
            lat: s.lat,
            lon: s.lon,
        })?;
    }
    w.flush().map_err(|source| GraphError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Product-moment correlation of two equal-length series.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, GraphError> {
    if x.len() != y.len() {
        return Err(GraphError::LengthMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(GraphError::TooShort(x.len()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if is_constant(x) || sxx == 0.0 {
        return Err(GraphError::ZeroVariance { station: 0 });
    }
    if is_constant(y) || syy == 0.0 {
        return Err(GraphError::ZeroVariance { station: 1 });
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

fn is_constant(x: &[f64]) -> bool {
    x.iter().all(|&v| v == x[0])
}

/// Correlation over the timesteps where both series are present.
pub fn pearson_pairwise(x: &[Option<f64>], y: &[Option<f64>]) -> Result<f64, GraphError> {
    if x.len() != y.len() {
        return Err(GraphError::LengthMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    let (a, b): (Vec<f64>, Vec<f64>) = x
        .iter()
        .zip(y)
        .filter_map(|(p, q)| Some(((*p)?, (*q)?)))
        .unzip();
    pearson(&a, &b)
}

/// Great-circle distance in kilometres between `(lat, lon)` pairs in degrees.
pub fn haversine(a: (f64, f64), b: (f64, f64)) -> f64 {
    haversine_with_radius(a, b, EARTH_RADIUS_KM)
}

pub fn haversine_with_radius(a: (f64, f64), b: (f64, f64), radius_km: f64) -> f64 {
    let (phi1, phi2) = (a.0.to_radians(), b.0.to_radians());
    let dphi = phi2 - phi1;
    let dlambda = (b.1 - a.1).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * radius_km * h.clamp(0.0, 1.0).sqrt().asin()
}

/// Pairwise correlations and distances, both `N × N` row-major.
#[derive(Debug, Clone)]
pub struct PairStats {
    pub n: usize,
    pub rho: Vec<f64>,
    pub dist_km: Vec<f64>,
}

pub fn pair_stats(
    stations: &[Station],
    series: &[Vec<Option<f64>>],
) -> Result<PairStats, GraphError> {
    let n = stations.len();
    if n < 2 {
        return Err(GraphError::TooFewStations(n));
    }
    if series.len() != n {
        return Err(GraphError::LengthMismatch {
            left: n,
            right: series.len(),
        });
    }
    let len = series[0].len();
    for (k, s) in series.iter().enumerate() {
        if s.len() != len {
            return Err(GraphError::LengthMismatch {
                left: len,
                right: s.len(),
            });
        }
        let valid: Vec<f64> = s.iter().flatten().copied().collect();
        if valid.len() < 2 {
            return Err(GraphError::TooShort(valid.len()));
        }
        if is_constant(&valid) {
            return Err(GraphError::ZeroVariance { station: k });
        }
    }
    let mut rho = vec![0.0; n * n];
    let mut dist_km = vec![0.0; n * n];
    for i in 0..n {
        rho[i * n + i] = 1.0;
        for j in i + 1..n {
            let r = pearson_pairwise(&series[i], &series[j]).map_err(|e| match e {
                GraphError::ZeroVariance { station } => GraphError::ZeroVariance {
                    station: if station == 0 { i } else { j },
                },
                other => other,
            })?;
            let d = haversine(stations[i].coords(), stations[j].coords());
            rho[i * n + j] = r;
            rho[j * n + i] = r;
            dist_km[i * n + j] = d;
            dist_km[j * n + i] = d;
        }
    }
    Ok(PairStats { n, rho, dist_km })
}

impl PairStats {
    /// Edges passing both strict gates, sorted by `(i, j)`.
    pub fn edges(&self, rho_min: f64, d_max_km: f64) -> Vec<Edge> {
        let n = self.n;
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                let (r, d) = (self.rho[i * n + j], self.dist_km[i * n + j]);
                if r > rho_min && d < d_max_km {
                    edges.push(Edge { i, j, weight: r });
                }
            }
        }
        edges
    }
}

/// A built graph together with the stations left without neighbours.
#[derive(Debug, Clone)]
pub struct GraphBuild {
    pub graph: StationGraph,
    /// Disconnected-node diagnostic; empty when every station has an edge.
    pub isolated: Vec<usize>,
}

pub fn build_graph(
    stations: &[Station],
    series: &[Vec<Option<f64>>],
    rho_min: f64,
    d_max_km: f64,
) -> Result<GraphBuild, GraphError> {
    let stats = pair_stats(stations, series)?;
    let graph = StationGraph::from_edges(
        stations.to_vec(),
        stats.edges(rho_min, d_max_km),
        rho_min,
        d_max_km,
    )?;
    let isolated = graph.isolated();
    for &k in &isolated {
        log::warn!("station {k} ({}) has no neighbours", stations[k].name);
    }
    Ok(GraphBuild { graph, isolated })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DegreeReport {
    pub degrees: Vec<usize>,
    pub min_degree: usize,
    pub max_degree: usize,
    /// First node attaining the maximum degree.
    pub argmax: usize,
}

pub fn degree_report(graph: &StationGraph) -> DegreeReport {
    let degrees = graph.degrees();
    let min_degree = degrees.iter().copied().min().unwrap_or(0);
    let max_degree = degrees.iter().copied().max().unwrap_or(0);
    let argmax = degrees.iter().position(|&d| d == max_degree).unwrap_or(0);
    DegreeReport {
        degrees,
        min_degree,
        max_degree,
        argmax,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub rho_min: f64,
    pub d_max_km: f64,
    pub edges: usize,
    pub isolated: usize,
    pub min_degree: usize,
}

/// Edge counts and connectivity for every `(rho_min, d_max)` grid point.
pub fn threshold_sweep(
    stations: &[Station],
    series: &[Vec<Option<f64>>],
    rho_grid: &[f64],
    d_grid: &[f64],
) -> Result<Vec<SweepRow>, GraphError> {
    let stats = pair_stats(stations, series)?;
    Ok(sweep_from_stats(&stats, rho_grid, d_grid))
}

pub fn sweep_from_stats(stats: &PairStats, rho_grid: &[f64], d_grid: &[f64]) -> Vec<SweepRow> {
    let mut rows = Vec::with_capacity(rho_grid.len() * d_grid.len());
    for &rho_min in rho_grid {
        for &d_max_km in d_grid {
            let edges = stats.edges(rho_min, d_max_km);
            let mut deg = vec![0usize; stats.n];
            for e in &edges {
                deg[e.i] += 1;
                deg[e.j] += 1;
            }
            rows.push(SweepRow {
                rho_min,
                d_max_km,
                edges: edges.len(),
                isolated: deg.iter().filter(|&&d| d == 0).count(),
                min_degree: deg.iter().copied().min().unwrap_or(0),
            });
        }
    }
    rows
}
