use super::codebook::Codebook;
use crate::error::{Error, Result};

/// Distances below this count as an exact hit on an atom.
pub const EXACT_MATCH: f64 = 1e-12;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Output of group quantization for a single vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupQuantized {
    pub group: usize,
    /// Nearest atom inside the chosen group; this is the index put on the wire.
    pub index: usize,
    pub blended: Vec<f64>,
    /// Normalized weights over the chosen group's atoms (sum to 1).
    pub weights: Vec<f64>,
}

/// Quantized grid: indices per cell and slice, plus the quantized vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizeResult {
    pub cells: usize,
    pub slices: usize,
    pub dim: usize,
    /// `cells x slices`, cell-major.
    pub indices: Vec<u32>,
    /// `cells x M`, the `z_q` rows.
    pub quantized: Vec<f64>,
    /// For group quantization: atoms per group and the normalized blend
    /// weights, `cells x slices x group_size`.
    pub blend: Option<(usize, Vec<f64>)>,
}

impl QuantizeResult {
    pub fn index(&self, cell: usize, slice: usize) -> u32 {
        self.indices[cell * self.slices + slice]
    }

    pub fn cell(&self, cell: usize) -> &[f64] {
        &self.quantized[cell * self.dim..(cell + 1) * self.dim]
    }

    /// Recomputes the quantized rows from `codebook` keeping the selected
    /// indices and blend weights fixed.
    pub fn requantize(&self, codebook: &Codebook) -> Vec<f64> {
        let d = self.dim / self.slices;
        let mut out = vec![0.0; self.cells * self.dim];
        for c in 0..self.cells {
            for s in 0..self.slices {
                let dst = &mut out[c * self.dim + s * d..c * self.dim + (s + 1) * d];
                let idx = self.index(c, s) as usize;
                match &self.blend {
                    None => dst.copy_from_slice(codebook.sub_atom(idx, s)),
                    Some((ng, weights)) => {
                        let start = (idx / ng) * ng;
                        let w = &weights[(c * self.slices + s) * ng..(c * self.slices + s + 1) * ng];
                        for (k, wk) in w.iter().enumerate() {
                            if *wk != 0.0 {
                                dst.iter_mut().zip(codebook.sub_atom(start + k, s)).for_each(|(o, a)| *o += wk * a);
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Adds `grads` (one row of length `M` per cell) into `atom_grad` (`K x M`),
    /// routing each slice to its selected atom or, for group quantization,
    /// across the chosen group by normalized weight.
    pub fn scatter_to_atoms(&self, grads: &[f64], atom_grad: &mut [f64]) {
        let m = self.dim;
        let d = m / self.slices;
        for c in 0..self.cells {
            for s in 0..self.slices {
                let g = &grads[c * m + s * d..c * m + (s + 1) * d];
                let idx = self.index(c, s) as usize;
                match &self.blend {
                    None => {
                        let row = &mut atom_grad[idx * m + s * d..idx * m + (s + 1) * d];
                        row.iter_mut().zip(g).for_each(|(r, v)| *r += v);
                    }
                    Some((ng, weights)) => {
                        let start = (idx / ng) * ng;
                        let w = &weights[(c * self.slices + s) * ng..(c * self.slices + s + 1) * ng];
                        for (k, wk) in w.iter().enumerate() {
                            if *wk == 0.0 {
                                continue;
                            }
                            let a = start + k;
                            let row = &mut atom_grad[a * m + s * d..a * m + (s + 1) * d];
                            row.iter_mut().zip(g).for_each(|(r, v)| *r += wk * v);
                        }
                    }
                }
            }
        }
    }
}

/// Nearest atom by squared distance over atoms `[0, k)` for slice `slice`.
fn nearest_in(cb: &Codebook, v: &[f64], slice: usize, range: std::ops::Range<usize>) -> usize {
    let mut best = range.start;
    let mut best_d = f64::INFINITY;
    for i in range {
        let d = sq_dist(v, cb.sub_atom(i, slice));
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Group quantization of one sub-vector against slice `slice`.
fn group_in(cb: &Codebook, v: &[f64], slice: usize, groups: usize) -> GroupQuantized {
    let ng = cb.size() / groups;
    let mut group = 0;
    let mut best_d = f64::INFINITY;
    for g in 0..groups {
        let d = if ng == 1 {
            sq_dist(v, cb.sub_atom(g, slice))
        } else {
            (g * ng..(g + 1) * ng)
                .map(|i| sq_dist(v, cb.sub_atom(i, slice)).sqrt())
                .sum::<f64>()
                / ng as f64
        };
        if d < best_d {
            best_d = d;
            group = g;
        }
    }
    let start = group * ng;
    let index = nearest_in(cb, v, slice, start..start + ng);
    let dists: Vec<f64> = (start..start + ng)
        .map(|i| sq_dist(v, cb.sub_atom(i, slice)).sqrt())
        .collect();
    if ng == 1 || dists[index - start] < EXACT_MATCH {
        let mut weights = vec![0.0; ng];
        weights[index - start] = 1.0;
        return GroupQuantized {
            group,
            index,
            blended: cb.sub_atom(index, slice).to_vec(),
            weights,
        };
    }
    let raw: Vec<f64> = dists.iter().map(|d| 1.0 / d).collect();
    let total: f64 = raw.iter().sum();
    let mut blended = vec![0.0; v.len()];
    for (k, w) in raw.iter().enumerate() {
        for (b, a) in blended.iter_mut().zip(cb.sub_atom(start + k, slice)) {
            *b += w * a;
        }
    }
    blended.iter_mut().for_each(|b| *b /= total);
    GroupQuantized {
        group,
        index,
        blended,
        weights: raw.iter().map(|w| w / total).collect(),
    }
}

fn check_vector(cb: &Codebook, v: &[f64]) -> Result<()> {
    if cb.size() == 0 {
        return Err(Error::Empty("codebook"));
    }
    if v.len() != cb.dim() {
        return Err(Error::shape("quantizer input vector", &[cb.dim()], &[v.len()]));
    }
    if cb.config().slices != 1 {
        return Err(Error::Config("whole-vector quantization needs n_c = 1".into()));
    }
    Ok(())
}

/// Index and value of the closest atom; ties go to the lowest index.
pub fn nearest_atom<'a>(vector: &[f64], codebook: &'a Codebook) -> Result<(usize, &'a [f64])> {
    check_vector(codebook, vector)?;
    let i = nearest_in(codebook, vector, 0, 0..codebook.size());
    Ok((i, codebook.atom(i)))
}

/// Chooses the group with the smallest mean atom distance and returns the
/// inverse-distance blend of its atoms.
pub fn group_quantize(vector: &[f64], codebook: &Codebook) -> Result<GroupQuantized> {
    check_vector(codebook, vector)?;
    Ok(group_in(codebook, vector, 0, codebook.config().groups))
}

/// Quantizes `cells` rows of length `M` slice by slice. With `G > 1` each
/// slice is group-quantized; otherwise plain nearest-atom lookup is used.
pub fn slice_quantize(grid: &[f64], codebook: &Codebook) -> Result<QuantizeResult> {
    let cfg = *codebook.config();
    cfg.validate()?;
    let (m, nc, d) = (cfg.dim, cfg.slices, cfg.slice_dim());
    if grid.len() % m != 0 {
        return Err(Error::shape("quantizer grid", &[grid.len() / m.max(1), m], &[grid.len()]));
    }
    let cells = grid.len() / m;
    let mut indices = Vec::with_capacity(cells * nc);
    let mut quantized = Vec::with_capacity(grid.len());
    let grouped = cfg.groups > 1;
    let ng = cfg.group_size();
    let mut weights = Vec::new();
    for c in 0..cells {
        for s in 0..nc {
            let v = &grid[c * m + s * d..c * m + (s + 1) * d];
            if grouped {
                let q = group_in(codebook, v, s, cfg.groups);
                indices.push(q.index as u32);
                quantized.extend_from_slice(&q.blended);
                weights.extend_from_slice(&q.weights);
            } else {
                let i = nearest_in(codebook, v, s, 0..cfg.size);
                indices.push(i as u32);
                quantized.extend_from_slice(codebook.sub_atom(i, s));
            }
        }
    }
    Ok(QuantizeResult {
        cells,
        slices: nc,
        dim: m,
        indices,
        quantized,
        blend: grouped.then_some((ng, weights)),
    })
}

/// Gradient pass-through across the quantization boundary.
pub fn straight_through(decoder_grad: &[f64]) -> Vec<f64> {
    decoder_grad.to_vec()
}
