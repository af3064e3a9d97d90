//! Calorimeter-like channel geometry: coordinates, segmentation-map
//! ingestion, channel masking, and RBX graph construction.

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Propagation, Scalar, Tensor};

/// Grid extents and the synthetic segmentation rule.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GeometryConfig {
    /// Total iη bins; iη spans `[-n_ieta/2, n_ieta/2]` excluding 0.
    pub n_ieta: usize,
    pub n_iphi: usize,
    pub n_depth: usize,
    /// Inclusive |iη| band of instrumented channels.
    pub active_abs_ieta: (i32, i32),
    /// RBX sectors per hemisphere; total RBX count is `2 * sectors`.
    pub rbx_iphi_sectors: usize,
    /// RBX id excluded from the active mask (mirrors a failed readout box).
    pub disabled_rbx: Option<String>,
}

impl GeometryConfig {
    /// Full-scale geometry: 64 x 72 x 7 grid, |iη| in [16, 29], 36 RBXes.
    pub fn full() -> Self {
        GeometryConfig {
            n_ieta: 64,
            n_iphi: 72,
            n_depth: 7,
            active_abs_ieta: (16, 29),
            rbx_iphi_sectors: 18,
            disabled_rbx: None,
        }
    }

    /// Desk-scale geometry: 16 x 24 x 3 grid, fully instrumented, 4 RBXes.
    pub fn toy() -> Self {
        GeometryConfig {
            n_ieta: 16,
            n_iphi: 24,
            n_depth: 3,
            active_abs_ieta: (1, 8),
            rbx_iphi_sectors: 2,
            disabled_rbx: None,
        }
    }

    pub fn n_cells(&self) -> usize {
        self.n_ieta * self.n_iphi * self.n_depth
    }

    pub fn spatial_shape(&self) -> [usize; 3] {
        [self.n_ieta, self.n_iphi, self.n_depth]
    }

    pub fn coordinate_in_bounds(&self, c: &ChannelCoordinate) -> bool {
        let half = (self.n_ieta / 2) as i32;
        c.ieta != 0
            && c.ieta >= -half
            && c.ieta <= half
            && c.iphi >= 1
            && c.iphi <= self.n_iphi as i32
            && c.depth >= 1
            && c.depth <= self.n_depth as i32
    }

    /// Flat row-major cell index of a coordinate.
    pub fn flat_index(&self, c: &ChannelCoordinate) -> usize {
        debug_assert!(self.coordinate_in_bounds(c));
        let half = (self.n_ieta / 2) as i32;
        let ieta_idx = if c.ieta < 0 {
            (c.ieta + half) as usize
        } else {
            (c.ieta + half - 1) as usize
        };
        (ieta_idx * self.n_iphi + (c.iphi - 1) as usize) * self.n_depth + (c.depth - 1) as usize
    }

    pub fn coordinate_of(&self, flat: usize) -> ChannelCoordinate {
        let half = (self.n_ieta / 2) as i32;
        let depth = (flat % self.n_depth) as i32 + 1;
        let rest = flat / self.n_depth;
        let iphi = (rest % self.n_iphi) as i32 + 1;
        let ieta_idx = (rest / self.n_iphi) as i32;
        let ieta = if ieta_idx < half {
            ieta_idx - half
        } else {
            ieta_idx - half + 1
        };
        ChannelCoordinate { ieta, iphi, depth }
    }

    /// RBX id of a coordinate under the synthetic partition: hemispheres
    /// split by iη sign, each cut into equal iφ sectors.
    pub fn synthetic_rbx(&self, c: &ChannelCoordinate) -> String {
        let side = usize::from(c.ieta > 0);
        let sector = (c.iphi - 1) as usize * self.rbx_iphi_sectors / self.n_iphi;
        format!("RBX{:02}", side * self.rbx_iphi_sectors + sector)
    }
}

/// One calorimeter readout channel address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ChannelCoordinate {
    pub ieta: i32,
    pub iphi: i32,
    pub depth: i32,
}

/// Channel -> RBX assignment plus the active-channel mask.
#[derive(Debug, Clone)]
pub struct SegmentationMap {
    pub geom: GeometryConfig,
    /// RBX id per flat cell index; `None` for uninstrumented cells.
    rbx: Vec<Option<String>>,
    active: Vec<bool>,
}

impl SegmentationMap {
    /// Synthetic segmentation from the geometry's band and sector rule.
    pub fn synthetic(geom: &GeometryConfig) -> SegmentationMap {
        let mut rbx = vec![None; geom.n_cells()];
        let mut active = vec![false; geom.n_cells()];
        for flat in 0..geom.n_cells() {
            let c = geom.coordinate_of(flat);
            let abs = c.ieta.abs();
            if abs < geom.active_abs_ieta.0 || abs > geom.active_abs_ieta.1 {
                continue;
            }
            let id = geom.synthetic_rbx(&c);
            if geom.disabled_rbx.as_deref() == Some(id.as_str()) {
                continue;
            }
            rbx[flat] = Some(id);
            active[flat] = true;
        }
        SegmentationMap {
            geom: geom.clone(),
            rbx,
            active,
        }
    }

    /// Load a `ieta,iphi,depth,rbx` CSV. Rejects out-of-bounds coordinates
    /// and duplicate entries.
    pub fn load(path: &Path, geom: &GeometryConfig) -> Result<SegmentationMap> {
        let mut reader = csv::Reader::from_path(path).map_err(|e| Error::parse(path, e.to_string()))?;
        let mut rbx = vec![None; geom.n_cells()];
        let mut active = vec![false; geom.n_cells()];
        for record in reader.records() {
            let record = record.map_err(|e| Error::parse(path, e.to_string()))?;
            if record.len() != 4 {
                return Err(Error::parse(path, format!("expected 4 columns, got {}", record.len())));
            }
            let parse_i32 = |s: &str| {
                s.trim()
                    .parse::<i32>()
                    .map_err(|e| Error::parse(path, format!("bad integer `{s}`: {e}")))
            };
            let c = ChannelCoordinate {
                ieta: parse_i32(&record[0])?,
                iphi: parse_i32(&record[1])?,
                depth: parse_i32(&record[2])?,
            };
            if !geom.coordinate_in_bounds(&c) {
                return Err(Error::CoordinateOutOfBounds {
                    ieta: c.ieta,
                    iphi: c.iphi,
                    depth: c.depth,
                });
            }
            let flat = geom.flat_index(&c);
            if active[flat] {
                return Err(Error::DuplicateChannel {
                    ieta: c.ieta,
                    iphi: c.iphi,
                    depth: c.depth,
                });
            }
            rbx[flat] = Some(record[3].trim().to_string());
            active[flat] = true;
        }
        Ok(SegmentationMap {
            geom: geom.clone(),
            rbx,
            active,
        })
    }

    pub fn active_mask(&self) -> &[bool] {
        &self.active
    }

    pub fn is_active(&self, flat: usize) -> bool {
        self.active[flat]
    }

    pub fn rbx_of(&self, flat: usize) -> Option<&str> {
        self.rbx[flat].as_deref()
    }

    pub fn n_active(&self) -> usize {
        self.active.iter().filter(|a| **a).count()
    }

    pub fn rbx_ids(&self) -> BTreeSet<&str> {
        self.rbx.iter().flatten().map(String::as_str).collect()
    }
}

/// Active channels as graph nodes grouped into RBX cliques, with the cached
/// normalized propagation matrix.
#[derive(Debug)]
pub struct ChannelGraph {
    /// Node id per flat cell index (active channels only), node order is
    /// flat-index order.
    node_of_flat: Vec<Option<usize>>,
    flat_of_node: Vec<usize>,
    /// Node-id cliques, one per RBX, in first-seen (flat-index) order.
    pub blocks: Vec<(String, Vec<usize>)>,
    pub prop: Arc<Propagation>,
}

/// Adjacency per the shared-RBX rule; Â computed once and cached.
pub fn build_graph(seg: &SegmentationMap) -> Result<ChannelGraph> {
    let mut node_of_flat = vec![None; seg.geom.n_cells()];
    let mut flat_of_node = Vec::new();
    let mut blocks: IndexMap<String, Vec<usize>> = IndexMap::new();
    for flat in 0..seg.geom.n_cells() {
        if !seg.active[flat] {
            continue;
        }
        let node = flat_of_node.len();
        node_of_flat[flat] = Some(node);
        flat_of_node.push(flat);
        let id = seg.rbx[flat].clone().expect("active channel without rbx id");
        blocks.entry(id).or_default().push(node);
    }
    if flat_of_node.is_empty() {
        return Err(Error::Geometry("segmentation has no active channels".into()));
    }
    let n = flat_of_node.len();
    let blocks: Vec<(String, Vec<usize>)> = blocks.into_iter().collect();
    let prop = Arc::new(Propagation::UniformBlocks {
        n,
        blocks: blocks.iter().map(|(_, b)| b.clone()).collect(),
    });
    Ok(ChannelGraph {
        node_of_flat,
        flat_of_node,
        blocks,
        prop,
    })
}

impl ChannelGraph {
    pub fn n_nodes(&self) -> usize {
        self.flat_of_node.len()
    }

    pub fn node_of_flat(&self, flat: usize) -> Option<usize> {
        self.node_of_flat[flat]
    }

    pub fn flat_of_node(&self, node: usize) -> usize {
        self.flat_of_node[node]
    }

    /// Gather active-channel map values into node order as a `[M,1]` tensor.
    pub fn map_to_node_features<S: Scalar>(&self, values: &[S], n_cells: usize) -> Tensor<S> {
        assert_eq!(values.len(), n_cells, "map does not match geometry");
        let data: Vec<S> = self.flat_of_node.iter().map(|&f| values[f]).collect();
        Tensor::from_vec(&[self.n_nodes(), 1], data)
    }

    /// Inverse of [`Self::map_to_node_features`]: scatter node values back
    /// onto the grid (inactive cells stay zero).
    pub fn node_features_to_map<S: Scalar>(&self, nodes: &[S], n_cells: usize) -> Vec<S> {
        assert_eq!(nodes.len(), self.n_nodes(), "node vector length mismatch");
        let mut out = vec![S::zero(); n_cells];
        for (node, &flat) in self.flat_of_node.iter().enumerate() {
            out[flat] = nodes[node];
        }
        out
    }
}

/// One lumisection's run metadata.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LumisectionMeta {
    pub run_id: u32,
    pub ls: u32,
    /// Number of events ξ.
    pub events: f64,
    /// Received luminosity β.
    pub lumi: f64,
}

/// One lumisection's 3D digi-occupancy histogram plus metadata.
#[derive(Debug, Clone)]
pub struct DigiOccupancyMap {
    pub meta: LumisectionMeta,
    /// Row-major `[n_ieta, n_iphi, n_depth]` cell values.
    pub values: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn flat_index_bijection() {
        let g = GeometryConfig::toy();
        for flat in 0..g.n_cells() {
            let c = g.coordinate_of(flat);
            assert!(g.coordinate_in_bounds(&c), "{c:?}");
            assert_eq!(g.flat_index(&c), flat);
        }
    }

    #[test]
    fn synthetic_full_geometry_has_36_complete_blocks() {
        let g = GeometryConfig::full();
        let seg = SegmentationMap::synthetic(&g);
        let graph = build_graph(&seg).unwrap();
        assert_eq!(graph.blocks.len(), 36);
        // each block spans 4 iphi columns over the active band and all depths
        let expect = 14 * (72 / 18) * 7;
        for (_, b) in &graph.blocks {
            assert_eq!(b.len(), expect);
        }
    }

    #[test]
    fn disabled_rbx_is_excluded_everywhere() {
        let mut g = GeometryConfig::toy();
        g.disabled_rbx = Some("RBX01".into());
        let seg = SegmentationMap::synthetic(&g);
        let graph = build_graph(&seg).unwrap();
        assert_eq!(graph.blocks.len(), 3);
        assert!(graph.blocks.iter().all(|(id, _)| id != "RBX01"));
        assert_eq!(seg.n_active(), 3 * (8 * 12 * 3));
    }

    #[test]
    fn load_segmentation_roundtrip_and_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seg.csv");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "ieta,iphi,depth,rbx\n16,1,1,HEP01\n-16,1,1,HEM01").unwrap();
        let g = GeometryConfig::full();
        let seg = SegmentationMap::load(&path, &g).unwrap();
        let flat = g.flat_index(&ChannelCoordinate { ieta: 16, iphi: 1, depth: 1 });
        assert_eq!(seg.rbx_of(flat), Some("HEP01"));
        assert_eq!(seg.n_active(), 2);

        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "ieta,iphi,depth,rbx\n16,1,1,A\n16,1,1,B").unwrap();
        let err = SegmentationMap::load(&path, &g).unwrap_err();
        assert!(err.to_string().contains("ieta=16"));
    }

    #[test]
    fn out_of_bounds_coordinate_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seg.csv");
        std::fs::write(&path, "ieta,iphi,depth,rbx\n0,1,1,A\n").unwrap();
        let err = SegmentationMap::load(&path, &GeometryConfig::full()).unwrap_err();
        assert!(matches!(err, Error::CoordinateOutOfBounds { .. }));
    }

    #[test]
    fn two_channel_graphs() {
        // same RBX: propagation rows are [0.5, 0.5]
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seg.csv");
        std::fs::write(&path, "ieta,iphi,depth,rbx\n16,1,1,A\n16,1,2,A\n").unwrap();
        let g = GeometryConfig::full();
        let graph = build_graph(&SegmentationMap::load(&path, &g).unwrap()).unwrap();
        let dense = graph.prop.to_dense();
        assert_eq!(dense, vec![0.5, 0.5, 0.5, 0.5]);

        // different RBXes: propagation is the identity
        std::fs::write(&path, "ieta,iphi,depth,rbx\n16,1,1,A\n16,1,2,B\n").unwrap();
        let graph = build_graph(&SegmentationMap::load(&path, &g).unwrap()).unwrap();
        assert_eq!(graph.prop.to_dense(), vec![1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn gather_scatter_roundtrip_conserves_active_values() {
        let g = GeometryConfig::toy();
        let seg = SegmentationMap::synthetic(&g);
        let graph = build_graph(&seg).unwrap();
        let values: Vec<f64> = (0..g.n_cells()).map(|i| i as f64).collect();
        let nodes = graph.map_to_node_features(&values, g.n_cells());
        let back = graph.node_features_to_map(&nodes.to_vec(), g.n_cells());
        for (flat, (v, b)) in values.iter().zip(&back).enumerate() {
            if seg.is_active(flat) {
                assert_eq!(v, b);
            } else {
                assert_eq!(*b, 0.0);
            }
        }
        let sum_nodes: f64 = nodes.to_vec().iter().sum();
        let sum_active: f64 = values
            .iter()
            .enumerate()
            .filter(|(f, _)| seg.is_active(*f))
            .map(|(_, v)| v)
            .sum();
        assert_eq!(sum_nodes, sum_active);
    }
}
