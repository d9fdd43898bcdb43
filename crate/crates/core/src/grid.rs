//! Uniform box grids, node-based fields, finite-difference gradients and the
//! flat binary field container.
//!
//! Nodes are numbered row-major: axis 0 varies slowest. Cell corners are
//! numbered by bit masks, bit `k` set meaning "+1 along axis k".

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{retract_sl3, DetPolicy};
use crate::{Mat3, SL3Element};

/// Box domain `origin + [0, extent]` split into uniform cells, with an
/// optional cell mask selecting a subdomain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridDomain {
    dim: usize,
    origin: Vec<f64>,
    extent: Vec<f64>,
    cells: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mask: Option<Vec<bool>>,
}

impl GridDomain {
    pub fn new(origin: Vec<f64>, extent: Vec<f64>, cells: Vec<usize>) -> Result<Self> {
        let dim = cells.len();
        if !(1..=3).contains(&dim) || origin.len() != dim || extent.len() != dim {
            return Err(Error::InvalidInput(format!(
                "grid needs matching origin/extent/cells of length 1..=3, got {}/{}/{}",
                origin.len(),
                extent.len(),
                cells.len()
            )));
        }
        if let Some(c) = cells.iter().find(|&&c| c < 2) {
            return Err(Error::InvalidInput(format!("resolution must be >= 2 per axis, got {c}")));
        }
        if extent.iter().any(|e| !(*e > 0.0 && e.is_finite())) || origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidInput("grid extent must be positive and finite".into()));
        }
        Ok(Self {
            dim,
            origin,
            extent,
            cells,
            mask: None,
        })
    }

    /// `(0, side)^dim` with `cells` cells per axis.
    pub fn cube(dim: usize, side: f64, cells: usize) -> Result<Self> {
        Self::new(vec![0.0; dim], vec![side; dim], vec![cells; dim])
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.n_cells() {
            return Err(Error::InvalidInput(format!(
                "mask has {} entries for {} cells",
                mask.len(),
                self.n_cells()
            )));
        }
        self.mask = Some(mask);
        Ok(self)
    }

    pub fn without_mask(&self) -> Self {
        let mut d = self.clone();
        d.mask = None;
        d
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn origin(&self) -> &[f64] {
        &self.origin
    }

    pub fn extent(&self) -> &[f64] {
        &self.extent
    }

    pub fn cells(&self) -> &[usize] {
        &self.cells
    }

    pub fn mask(&self) -> Option<&[bool]> {
        self.mask.as_deref()
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        self.extent[axis] / self.cells[axis] as f64
    }

    pub fn node_dims(&self) -> Vec<usize> {
        self.cells.iter().map(|c| c + 1).collect()
    }

    pub fn n_nodes(&self) -> usize {
        self.cells.iter().map(|c| c + 1).product()
    }

    pub fn n_cells(&self) -> usize {
        self.cells.iter().product()
    }

    pub fn n_corners(&self) -> usize {
        1 << self.dim
    }

    pub fn cell_volume(&self) -> f64 {
        (0..self.dim).map(|a| self.spacing(a)).product()
    }

    pub fn node_index(&self, multi: &[usize]) -> usize {
        let mut idx = 0;
        for a in 0..self.dim {
            idx = idx * (self.cells[a] + 1) + multi[a];
        }
        idx
    }

    pub fn node_multi(&self, mut idx: usize) -> [usize; 3] {
        let mut out = [0; 3];
        for a in (0..self.dim).rev() {
            let n = self.cells[a] + 1;
            out[a] = idx % n;
            idx /= n;
        }
        out
    }

    pub fn cell_multi(&self, mut idx: usize) -> [usize; 3] {
        let mut out = [0; 3];
        for a in (0..self.dim).rev() {
            out[a] = idx % self.cells[a];
            idx /= self.cells[a];
        }
        out
    }

    pub fn cell_index(&self, multi: &[usize]) -> usize {
        let mut idx = 0;
        for a in 0..self.dim {
            idx = idx * self.cells[a] + multi[a];
        }
        idx
    }

    /// Physical coordinates; unused axes are 0.
    pub fn node_coord(&self, idx: usize) -> [f64; 3] {
        let m = self.node_multi(idx);
        let mut x = [0.0; 3];
        for a in 0..self.dim {
            x[a] = self.origin[a] + m[a] as f64 * self.spacing(a);
        }
        x
    }

    pub fn cell_center(&self, idx: usize) -> [f64; 3] {
        let m = self.cell_multi(idx);
        let mut x = [0.0; 3];
        for a in 0..self.dim {
            x[a] = self.origin[a] + (m[a] as f64 + 0.5) * self.spacing(a);
        }
        x
    }

    /// Node indices of the `2^dim` cell corners, by corner bit mask.
    pub fn cell_corners(&self, idx: usize) -> [usize; 8] {
        let m = self.cell_multi(idx);
        let mut out = [0; 8];
        for (corner, slot) in out.iter_mut().enumerate().take(self.n_corners()) {
            let mut nm = [0; 3];
            for a in 0..self.dim {
                nm[a] = m[a] + ((corner >> a) & 1);
            }
            *slot = self.node_index(&nm);
        }
        out
    }

    pub fn cell_active(&self, idx: usize) -> bool {
        self.mask.as_ref().map_or(true, |m| m[idx])
    }

    pub fn active_cells(&self) -> Vec<usize> {
        (0..self.n_cells()).filter(|&c| self.cell_active(c)).collect()
    }

    pub fn active_volume(&self) -> f64 {
        self.active_cells().len() as f64 * self.cell_volume()
    }

    pub fn is_boundary_node(&self, idx: usize) -> bool {
        let m = self.node_multi(idx);
        (0..self.dim).any(|a| m[a] == 0 || m[a] == self.cells[a])
    }

    /// Whether two grids have the same nodes.
    pub fn conforms(&self, other: &GridDomain) -> bool {
        self.dim == other.dim
            && self.cells == other.cells
            && self.origin == other.origin
            && self.extent == other.extent
    }
}

/// Cells whose centers lie in the open box `(lo, hi)`.
pub fn box_mask(domain: &GridDomain, lo: &[f64], hi: &[f64]) -> Vec<bool> {
    (0..domain.n_cells())
        .map(|c| {
            let x = domain.cell_center(c);
            (0..domain.dim()).all(|a| x[a] > lo[a] && x[a] < hi[a])
        })
        .collect()
}

pub fn mask_union(a: &[bool], b: &[bool]) -> Vec<bool> {
    a.iter().zip(b).map(|(x, y)| *x || *y).collect()
}

pub fn mask_intersection(a: &[bool], b: &[bool]) -> Vec<bool> {
    a.iter().zip(b).map(|(x, y)| *x && *y).collect()
}

pub fn mask_difference(a: &[bool], b: &[bool]) -> Vec<bool> {
    a.iter().zip(b).map(|(x, y)| *x && !*y).collect()
}

/// Pairwise (tree) summation; the order depends only on the length.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    const LEAF: usize = 8;
    if v.len() <= LEAF {
        return v.iter().sum();
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}

/// Node-based field with a fixed number of components per node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridField {
    pub components: usize,
    pub data: Vec<f64>,
}

/// Deformation `y`, one `dim`-vector per node.
pub type DeformationField = GridField;

impl GridField {
    pub fn zeros(domain: &GridDomain, components: usize) -> Self {
        Self {
            components,
            data: vec![0.0; domain.n_nodes() * components],
        }
    }

    pub fn from_fn(domain: &GridDomain, components: usize, f: impl Fn(&[f64; 3]) -> Vec<f64>) -> Self {
        let mut data = Vec::with_capacity(domain.n_nodes() * components);
        for n in 0..domain.n_nodes() {
            let v = f(&domain.node_coord(n));
            debug_assert_eq!(v.len(), components);
            data.extend_from_slice(&v);
        }
        Self { components, data }
    }

    /// `y(x) = A x + b` restricted to the first `dim` components.
    pub fn affine(domain: &GridDomain, a: &Mat3, b: &[f64; 3]) -> Self {
        let d = domain.dim();
        Self::from_fn(domain, d, |x| {
            (0..d)
                .map(|i| b[i] + (0..d).map(|j| a[(i, j)] * x[j]).sum::<f64>())
                .collect()
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.data.len() / self.components
    }

    pub fn node(&self, idx: usize) -> &[f64] {
        &self.data[idx * self.components..(idx + 1) * self.components]
    }

    pub fn node_mut(&mut self, idx: usize) -> &mut [f64] {
        &mut self.data[idx * self.components..(idx + 1) * self.components]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_conforms(&self, domain: &GridDomain, components: usize) -> Result<()> {
        if self.components != components || self.data.len() != domain.n_nodes() * components {
            return Err(Error::InvalidInput(format!(
                "field with {} components and {} values does not conform to a grid of {} nodes with {} components",
                self.components,
                self.data.len(),
                domain.n_nodes(),
                components
            )));
        }
        if !self.is_finite() {
            return Err(Error::InvalidInput("field has non-finite entries".into()));
        }
        Ok(())
    }
}

/// Plastic strain `P`, one SL(3) element per node. In `dim = 2` the values
/// carry the identity in the third row and column.
#[derive(Clone, Debug, PartialEq)]
pub struct PlasticField {
    pub nodes: Vec<SL3Element>,
}

impl PlasticField {
    pub fn constant(domain: &GridDomain, p: SL3Element) -> Self {
        Self {
            nodes: vec![p; domain.n_nodes()],
        }
    }

    pub fn identity(domain: &GridDomain) -> Self {
        Self::constant(domain, SL3Element::identity())
    }

    pub fn from_fn(domain: &GridDomain, f: impl Fn(&[f64; 3]) -> SL3Element) -> Self {
        Self {
            nodes: (0..domain.n_nodes()).map(|n| f(&domain.node_coord(n))).collect(),
        }
    }

    pub fn check_conforms(&self, domain: &GridDomain) -> Result<()> {
        if self.nodes.len() != domain.n_nodes() {
            return Err(Error::InvalidInput(format!(
                "plastic field has {} nodes, grid has {}",
                self.nodes.len(),
                domain.n_nodes()
            )));
        }
        Ok(())
    }

    /// Nine components per node, row-major.
    pub fn to_grid_field(&self) -> GridField {
        GridField {
            components: 9,
            data: self.nodes.iter().flat_map(|p| p.value().to_row_vec()).collect(),
        }
    }

    /// Reads nine components per node; each node is retracted onto SL(3)
    /// and must already be within the determinant tolerance.
    pub fn from_grid_field(field: &GridField) -> Result<Self> {
        if field.components != 9 {
            return Err(Error::InvalidInput(format!(
                "plastic field needs 9 components, got {}",
                field.components
            )));
        }
        let nodes = field
            .data
            .chunks_exact(9)
            .map(|c| SL3Element::new(Mat3::from_row_slice(c)?, DetPolicy::Strict))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { nodes })
    }

    pub fn max_det_drift(&self) -> f64 {
        self.nodes
            .iter()
            .map(|p| (p.value().det() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Mean of the given nodes retracted onto SL(3).
    pub fn mean_of(&self, idx: &[usize]) -> Result<SL3Element> {
        let mut acc = Mat3::zeros();
        for &i in idx {
            acc += *self.nodes[i].value();
        }
        retract_sl3(&acc.scale(1.0 / idx.len() as f64))
    }
}

/// Maps free nodal values to optimization unknowns.
#[derive(Clone, Debug)]
pub struct DofMap {
    node_dof: Vec<Option<usize>>,
    slots: usize,
    components: usize,
}

impl DofMap {
    /// Every node free.
    pub fn free(domain: &GridDomain, components: usize) -> Self {
        Self {
            node_dof: (0..domain.n_nodes()).map(Some).collect(),
            slots: domain.n_nodes(),
            components,
        }
    }

    /// Boundary nodes fixed.
    pub fn dirichlet(domain: &GridDomain, components: usize) -> Self {
        let mut next = 0;
        let node_dof = (0..domain.n_nodes())
            .map(|n| {
                if domain.is_boundary_node(n) {
                    None
                } else {
                    next += 1;
                    Some(next - 1)
                }
            })
            .collect();
        Self { node_dof, slots: next, components }
    }

    /// Opposite faces identified.
    pub fn periodic(domain: &GridDomain, components: usize) -> Self {
        let d = domain.dim();
        let node_dof = (0..domain.n_nodes())
            .map(|n| {
                let m = domain.node_multi(n);
                let mut w = [0; 3];
                for a in 0..d {
                    w[a] = m[a] % domain.cells()[a];
                }
                Some(domain.cell_index(&w))
            })
            .collect();
        Self {
            node_dof,
            slots: domain.n_cells(),
            components,
        }
    }

    pub fn n_dofs(&self) -> usize {
        self.slots * self.components
    }

    /// Field with free nodes from `x` and the others from `fixed`.
    pub fn expand(&self, x: &[f64], fixed: &GridField) -> GridField {
        let c = self.components;
        let mut out = fixed.clone();
        for (n, dof) in self.node_dof.iter().enumerate() {
            if let Some(k) = dof {
                out.data[n * c..(n + 1) * c].copy_from_slice(&x[k * c..(k + 1) * c]);
            }
        }
        out
    }

    pub fn restrict(&self, field: &GridField) -> Vec<f64> {
        let c = self.components;
        let mut x = vec![0.0; self.n_dofs()];
        for (n, dof) in self.node_dof.iter().enumerate().rev() {
            if let Some(k) = dof {
                x[k * c..(k + 1) * c].copy_from_slice(field.node(n));
            }
        }
        x
    }

    /// Chain rule from nodal gradients to unknowns.
    pub fn reduce(&self, g: &[f64]) -> Vec<f64> {
        let c = self.components;
        let mut out = vec![0.0; self.n_dofs()];
        for (n, dof) in self.node_dof.iter().enumerate() {
            if let Some(k) = dof {
                for i in 0..c {
                    out[k * c + i] += g[n * c + i];
                }
            }
        }
        out
    }
}

/// Nodal finite-difference gradient: second-order central differences in
/// the interior and second-order one-sided stencils on the boundary, so the
/// result is exact for quadratic fields. Output layout per node is
/// `component * dim + axis`.
pub fn grad_fd(field: &GridField, domain: &GridDomain) -> GridField {
    let d = domain.dim();
    let c = field.components;
    let mut out = GridField {
        components: c * d,
        data: vec![0.0; domain.n_nodes() * c * d],
    };
    let dims = domain.node_dims();
    let mut strides = vec![1usize; d];
    for a in (0..d.saturating_sub(1)).rev() {
        strides[a] = strides[a + 1] * dims[a + 1];
    }
    for n in 0..domain.n_nodes() {
        let m = domain.node_multi(n);
        for a in 0..d {
            let h = domain.spacing(a);
            let s = strides[a];
            let last = dims[a] - 1;
            for k in 0..c {
                let u = |idx: usize| field.data[idx * c + k];
                let g = if m[a] == 0 {
                    (-3.0 * u(n) + 4.0 * u(n + s) - u(n + 2 * s)) / (2.0 * h)
                } else if m[a] == last {
                    (3.0 * u(n) - 4.0 * u(n - s) + u(n - 2 * s)) / (2.0 * h)
                } else {
                    (u(n + s) - u(n - s)) / (2.0 * h)
                };
                out.data[n * c * d + k * d + a] = g;
            }
        }
    }
    out
}

const MAGIC: &[u8; 4] = b"PLHF";

/// JSON header of the binary field container.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldHeader {
    /// Nodes per axis.
    pub dims: Vec<usize>,
    pub components: usize,
    pub dtype: String,
    pub order: String,
    pub kind: String,
    #[serde(default)]
    pub origin: Vec<f64>,
    #[serde(default)]
    pub extent: Vec<f64>,
}

/// Writes `PLHF`, a little-endian u32 header length, the JSON header and the
/// float64 little-endian payload (node-major, components fastest).
pub fn write_field<W: Write>(mut w: W, domain: &GridDomain, field: &GridField, kind: &str) -> Result<()> {
    let header = FieldHeader {
        dims: domain.node_dims(),
        components: field.components,
        dtype: "float64".into(),
        order: "row-major".into(),
        kind: kind.into(),
        origin: domain.origin().to_vec(),
        extent: domain.extent().to_vec(),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    let mut buf = Vec::with_capacity(field.data.len() * 8);
    for v in &field.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_field<R: Read>(mut r: R) -> Result<(FieldHeader, GridField)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::InvalidInput("not a field file: bad magic".into()));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut json)?;
    let header: FieldHeader = serde_json::from_slice(&json)?;
    if header.dtype != "float64" || header.order != "row-major" {
        return Err(Error::InvalidInput(format!(
            "unsupported field layout {} / {}",
            header.dtype, header.order
        )));
    }
    let count = header.dims.iter().product::<usize>() * header.components;
    let mut raw = vec![0u8; count * 8];
    r.read_exact(&mut raw)?;
    let data = raw
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
        .collect();
    Ok((
        header.clone(),
        GridField {
            components: header.components,
            data,
        },
    ))
}

pub fn save_field(path: impl AsRef<Path>, domain: &GridDomain, field: &GridField, kind: &str) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_field(std::io::BufWriter::new(file), domain, field, kind)
}

pub fn load_field(path: impl AsRef<Path>) -> Result<(FieldHeader, GridField)> {
    read_field(std::io::BufReader::new(std::fs::File::open(path)?))
}
