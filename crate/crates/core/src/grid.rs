//! Uniform lattices, domain masks, and grid functions.
//!
//! A grid covers the box [-L, L]^n with m nodes per axis (m odd, so the
//! origin is a node). A domain mask selects the lattice nodes strictly
//! inside a domain; functions carry values on those interior nodes and
//! are implicitly zero everywhere else, which is how the exterior-zero
//! condition is represented. All integral quantities use node-value
//! quadrature with weight h^n per node, so discrete inequalities between
//! norms hold exactly in the counting measure.

use crate::error::{Error, Result};
use crate::sum;
use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::sync::Arc;

/// Uniform lattice over [-L, L]^n with m nodes per axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid {
    n: usize,
    half_width: f64,
    m: usize,
}

/// Build a grid. The resolution must be odd so that radial and centered
/// test functions have an exact center node.
pub fn build_grid(n: usize, half_width: f64, m: usize) -> Result<Grid> {
    if n < 3 {
        return Err(Error::InvalidParameter(format!(
            "dimension {n} below 3"
        )));
    }
    if m < 3 || m % 2 == 0 {
        return Err(Error::InvalidParameter(format!(
            "resolution {m} must be odd and at least 3"
        )));
    }
    if !(half_width > 0.0) || !half_width.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "half width {half_width} must be positive and finite"
        )));
    }
    let grid = Grid {
        n,
        half_width,
        m,
    };
    grid.node_count()?;
    Ok(grid)
}

impl Grid {
    /// Spatial dimension n.
    pub fn dimension(&self) -> usize {
        self.n
    }

    /// Half width L of the bounding box [-L, L]^n.
    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    /// Nodes per axis.
    pub fn resolution(&self) -> usize {
        self.m
    }

    /// Lattice spacing h = 2L/(m-1).
    pub fn spacing(&self) -> f64 {
        2.0 * self.half_width / (self.m - 1) as f64
    }

    /// Total lattice size m^n, rejected if it overflows the address space.
    pub fn node_count(&self) -> Result<usize> {
        let mut total = 1usize;
        for _ in 0..self.n {
            total = total.checked_mul(self.m).ok_or_else(|| {
                Error::InvalidParameter(format!(
                    "lattice {}^{} exceeds addressable size",
                    self.m, self.n
                ))
            })?;
        }
        Ok(total)
    }

    /// Coordinate of axis index i: -L + i h.
    pub fn axis_coordinate(&self, i: usize) -> f64 {
        -self.half_width + self.spacing() * i as f64
    }

    /// Multi-index of a flat row-major node index (first axis slowest).
    pub fn multi_of_flat(&self, flat: usize, out: &mut [usize]) {
        let mut rest = flat;
        for d in (0..self.n).rev() {
            out[d] = rest % self.m;
            rest /= self.m;
        }
    }

    /// Flat row-major index of a multi-index.
    pub fn flat_of_multi(&self, multi: &[usize]) -> usize {
        let mut flat = 0usize;
        for &i in multi {
            flat = flat * self.m + i;
        }
        flat
    }

    /// Point coordinates of a node given by multi-index.
    pub fn point_of_multi(&self, multi: &[usize], out: &mut [f64]) {
        for (o, &i) in out.iter_mut().zip(multi) {
            *o = self.axis_coordinate(i);
        }
    }
}

/// Domain descriptor attached to a mask.
#[derive(Clone, Debug, PartialEq)]
pub enum Domain {
    /// Open ball of the given center and radius.
    Ball { center: Vec<f64>, radius: f64 },
    /// Open box |x_d| < half_widths[d], centered at the origin.
    Box { half_widths: Vec<f64> },
    /// Membership sampled from a caller predicate, identified by label.
    Predicate { label: String },
}

/// Interior-node mask for one domain on one grid.
///
/// Interior nodes are stored as sorted flat indices together with the
/// inverse map, the node-counting volume estimate, and a content hash
/// that identifies the mask across processes for caching.
pub struct DomainMask {
    grid: Grid,
    domain: Domain,
    interior: Vec<u32>,
    rank: Vec<i32>,
    volume: f64,
    hash: [u8; 32],
    predicate: Option<Arc<dyn Fn(&[f64]) -> bool + Send + Sync>>,
}

impl std::fmt::Debug for DomainMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DomainMask")
            .field("grid", &self.grid)
            .field("domain", &self.domain)
            .field("interior_count", &self.interior.len())
            .field("volume", &self.volume)
            .finish()
    }
}

fn mask_from_predicate(
    grid: Grid,
    domain: Domain,
    pred: &dyn Fn(&[f64]) -> bool,
) -> Result<(Vec<u32>, Vec<i32>)> {
    let total = grid.node_count()?;
    if total > u32::MAX as usize {
        return Err(Error::InvalidParameter(format!(
            "lattice of {total} nodes exceeds the mask index range"
        )));
    }
    let n = grid.dimension();
    let m = grid.resolution();
    let mut interior = Vec::new();
    let mut rank = vec![-1_i32; total];
    let mut multi = vec![0usize; n];
    let mut point = vec![0.0_f64; n];
    for flat in 0..total {
        grid.multi_of_flat(flat, &mut multi);
        grid.point_of_multi(&multi, &mut point);
        if !pred(&point) {
            continue;
        }
        if multi.iter().any(|&i| i == 0 || i == m - 1) {
            return Err(Error::InvalidParameter(format!(
                "domain {domain:?} reaches the outermost lattice layer; \
                 the exterior-zero condition needs a one-node margin"
            )));
        }
        rank[flat] = interior.len() as i32;
        interior.push(flat as u32);
    }
    if interior.is_empty() {
        return Err(Error::EmptyMask);
    }
    Ok((interior, rank))
}

fn mask_hash(grid: &Grid, domain: &Domain, interior: &[u32]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(grid.n.to_le_bytes());
    hasher.update(grid.half_width.to_bits().to_le_bytes());
    hasher.update(grid.m.to_le_bytes());
    hasher.update(format!("{domain:?}").as_bytes());
    for &flat in interior {
        hasher.update(flat.to_le_bytes());
    }
    hasher.finalize().into()
}

fn finish_mask(
    grid: Grid,
    domain: Domain,
    interior: Vec<u32>,
    rank: Vec<i32>,
    predicate: Option<Arc<dyn Fn(&[f64]) -> bool + Send + Sync>>,
) -> DomainMask {
    let volume = interior.len() as f64 * grid.spacing().powi(grid.n as i32);
    let hash = mask_hash(&grid, &domain, &interior);
    DomainMask {
        grid,
        domain,
        interior,
        rank,
        volume,
        hash,
        predicate,
    }
}

/// Mask of the open ball |x - center| < radius. The ball must keep a
/// one-node margin to the bounding box.
pub fn mask_ball(grid: Grid, center: &[f64], radius: f64) -> Result<DomainMask> {
    if center.len() != grid.dimension() {
        return Err(Error::InvalidParameter(format!(
            "center has {} coordinates on a dimension-{} grid",
            center.len(),
            grid.dimension()
        )));
    }
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "ball radius {radius} must be positive and finite"
        )));
    }
    let margin = grid.half_width() - grid.spacing();
    for (d, &c) in center.iter().enumerate() {
        if c.abs() + radius > margin {
            return Err(Error::InvalidParameter(format!(
                "ball reaches within one node of the box along axis {d}: \
                 |{c}| + {radius} > {margin}"
            )));
        }
    }
    let center_own = center.to_vec();
    let domain = Domain::Ball {
        center: center_own.clone(),
        radius,
    };
    let pred = move |x: &[f64]| {
        let d2: f64 = x
            .iter()
            .zip(&center_own)
            .map(|(a, c)| (a - c) * (a - c))
            .sum();
        d2 < radius * radius
    };
    let (interior, rank) = mask_from_predicate(grid, domain.clone(), &pred)?;
    Ok(finish_mask(grid, domain, interior, rank, Some(Arc::new(pred))))
}

/// Mask of the open box |x_d| < half_widths[d] centered at the origin,
/// keeping a one-node margin to the bounding box.
pub fn mask_box(grid: Grid, half_widths: &[f64]) -> Result<DomainMask> {
    if half_widths.len() != grid.dimension() {
        return Err(Error::InvalidParameter(format!(
            "{} half widths on a dimension-{} grid",
            half_widths.len(),
            grid.dimension()
        )));
    }
    let margin = grid.half_width() - grid.spacing();
    for (d, &w) in half_widths.iter().enumerate() {
        if !(w > 0.0) || !w.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "half width {w} along axis {d} must be positive and finite"
            )));
        }
        if w > margin {
            return Err(Error::InvalidParameter(format!(
                "box half width {w} along axis {d} exceeds the one-node margin {margin}"
            )));
        }
    }
    let widths = half_widths.to_vec();
    let domain = Domain::Box {
        half_widths: widths.clone(),
    };
    let pred = move |x: &[f64]| x.iter().zip(&widths).all(|(a, w)| a.abs() < *w);
    let (interior, rank) = mask_from_predicate(grid, domain.clone(), &pred)?;
    Ok(finish_mask(grid, domain, interior, rank, Some(Arc::new(pred))))
}

/// Mask sampled from an arbitrary membership predicate. The predicate is
/// retained for boundary-distance queries; masks read back from JSON keep
/// only the sampled node set.
pub fn mask_predicate(
    grid: Grid,
    label: &str,
    pred: impl Fn(&[f64]) -> bool + Send + Sync + 'static,
) -> Result<DomainMask> {
    let domain = Domain::Predicate {
        label: label.to_string(),
    };
    let (interior, rank) = mask_from_predicate(grid, domain.clone(), &pred)?;
    Ok(finish_mask(grid, domain, interior, rank, Some(Arc::new(pred))))
}

impl DomainMask {
    /// The underlying grid.
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    /// The domain descriptor.
    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    /// Sorted flat indices of the interior nodes.
    pub fn interior(&self) -> &[u32] {
        &self.interior
    }

    /// Number of interior nodes.
    pub fn interior_count(&self) -> usize {
        self.interior.len()
    }

    /// Node-counting measure estimate: interior count times h^n.
    pub fn volume(&self) -> f64 {
        self.volume
    }

    /// Whether the flat node index is interior.
    pub fn is_interior(&self, flat: usize) -> bool {
        self.rank[flat] >= 0
    }

    /// Position of a flat node index within the interior ordering.
    pub fn rank_of(&self, flat: usize) -> Option<usize> {
        let r = self.rank[flat];
        (r >= 0).then_some(r as usize)
    }

    /// Content hash identifying grid, domain, and interior set.
    pub fn content_hash(&self) -> &[u8; 32] {
        &self.hash
    }

    /// Content hash as lowercase hex.
    pub fn content_hash_hex(&self) -> String {
        self.hash.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Whether two masks describe the same interior set on the same grid.
    pub fn same_mask(&self, other: &DomainMask) -> bool {
        std::ptr::eq(self, other) || self.hash == other.hash
    }

    /// Fraction alpha in (0, 1] of the step from an interior node to its
    /// exterior axis neighbor at which the true domain boundary sits.
    /// Balls and boxes are answered analytically; predicate domains by
    /// bisection on the retained membership test. Masks without geometry
    /// (read back from JSON) fall back to the full step.
    pub fn boundary_fraction(&self, multi: &[usize], axis: usize, step: i64) -> f64 {
        let h = self.grid.spacing();
        let x_d = self.grid.axis_coordinate(multi[axis]);
        let dir = step.signum() as f64;
        match &self.domain {
            Domain::Ball { center, radius } => {
                // Along the axis the boundary satisfies
                // (x_d + alpha h dir - c_d)^2 = radius^2 - off2.
                let mut off2 = 0.0;
                for (d, &c) in center.iter().enumerate() {
                    if d != axis {
                        let t = self.grid.axis_coordinate(multi[d]) - c;
                        off2 += t * t;
                    }
                }
                let rem = radius * radius - off2;
                debug_assert!(rem > 0.0, "interior node outside the ball cylinder");
                let reach = rem.sqrt();
                let alpha = (dir * (center[axis] - x_d) + reach) / h;
                alpha.clamp(f64::MIN_POSITIVE, 1.0)
            }
            Domain::Box { half_widths } => {
                let alpha = (half_widths[axis] - x_d.abs()) / h;
                alpha.clamp(f64::MIN_POSITIVE, 1.0)
            }
            Domain::Predicate { .. } => match &self.predicate {
                Some(pred) => {
                    let n = self.grid.dimension();
                    let mut point = vec![0.0_f64; n];
                    self.grid.point_of_multi(multi, &mut point);
                    let mut lo = 0.0_f64;
                    let mut hi = 1.0_f64;
                    for _ in 0..60 {
                        let mid = 0.5 * (lo + hi);
                        point[axis] = x_d + mid * h * dir;
                        if pred(&point) {
                            lo = mid;
                        } else {
                            hi = mid;
                        }
                    }
                    hi.clamp(f64::MIN_POSITIVE, 1.0)
                }
                None => 1.0,
            },
        }
    }

    /// Fraction of the cell [x - h/2, x + h/2]^n around a node that lies
    /// inside the domain. Boxes are exact; balls cut the cell by the
    /// tangent plane at the nearest boundary point, which is exact to
    /// O(h^2 / radius) per straddling cell. Predicate domains have no
    /// usable geometry and report a full cell.
    pub fn cell_fraction(&self, multi: &[usize]) -> f64 {
        let h = self.grid.spacing();
        let n = self.grid.dimension();
        match &self.domain {
            Domain::Ball { center, radius } => {
                let mut point = vec![0.0_f64; n];
                self.grid.point_of_multi(multi, &mut point);
                let dist: f64 = point
                    .iter()
                    .zip(center)
                    .map(|(x, c)| (x - c) * (x - c))
                    .sum::<f64>()
                    .sqrt();
                let depth = radius - dist;
                let reach = 0.5 * h * (n as f64).sqrt();
                if depth >= reach {
                    return 1.0;
                }
                if depth <= -reach {
                    return 0.0;
                }
                if dist < 1e-12 * h {
                    // Ball smaller than the cell around its own center.
                    return (unit_ball_volume(n) * radius.powi(n as i32) / h.powi(n as i32))
                        .min(1.0);
                }
                let normal: Vec<f64> = point
                    .iter()
                    .zip(center)
                    .map(|(x, c)| (x - c) / dist)
                    .collect();
                halfspace_cell_fraction(&normal, depth / h)
            }
            Domain::Box { half_widths } => {
                let mut frac = 1.0;
                for (d, &w) in half_widths.iter().enumerate() {
                    let x_d = self.grid.axis_coordinate(multi[d]);
                    let overlap = (w.min(x_d + 0.5 * h) - (-w).max(x_d - 0.5 * h)) / h;
                    frac *= overlap.clamp(0.0, 1.0);
                }
                frac
            }
            Domain::Predicate { .. } => 1.0,
        }
    }
}

fn unit_ball_volume(n: usize) -> f64 {
    let mut v = if n % 2 == 0 { std::f64::consts::PI } else { 2.0 };
    let mut k = if n % 2 == 0 { 2 } else { 1 };
    while k < n {
        k += 2;
        v *= 2.0 * std::f64::consts::PI / k as f64;
    }
    v
}

/// Volume fraction of the unit cube [-1/2, 1/2]^n on the inner side of
/// the plane {z : normal . z = depth}, where the normal points outward
/// and depth is the signed distance from the cell center to the plane in
/// cell units. Evaluated by inclusion-exclusion over cube corners; axes
/// nearly parallel to the plane drop out as unconstrained.
fn halfspace_cell_fraction(normal: &[f64], depth: f64) -> f64 {
    let comps: Vec<f64> = normal.iter().map(|c| c.abs()).filter(|&c| c > 1e-9).collect();
    if comps.is_empty() {
        return if depth >= 0.0 { 1.0 } else { 0.0 };
    }
    let k = comps.len();
    let shifted = depth + 0.5 * comps.iter().sum::<f64>();
    let mut numer = 0.0;
    for subset in 0..(1_u32 << k) {
        let mut t = shifted;
        for (d, c) in comps.iter().enumerate() {
            if subset >> d & 1 == 1 {
                t -= c;
            }
        }
        if t > 0.0 {
            let sign = if subset.count_ones() % 2 == 0 { 1.0 } else { -1.0 };
            numer += sign * t.powi(k as i32);
        }
    }
    let mut denom = 1.0;
    for (i, c) in comps.iter().enumerate() {
        denom *= c * (i + 1) as f64;
    }
    (numer / denom).clamp(0.0, 1.0)
}

/// Values on the interior nodes of one mask; zero everywhere else.
#[derive(Clone, Debug)]
pub struct GridFunction {
    mask: Arc<DomainMask>,
    values: Vec<f64>,
}

impl GridFunction {
    /// Wrap interior values for a mask.
    pub fn new(mask: Arc<DomainMask>, values: Vec<f64>) -> Result<Self> {
        if values.len() != mask.interior_count() {
            return Err(Error::MaskMismatch);
        }
        Ok(Self { mask, values })
    }

    /// Zero function on a mask.
    pub fn zeros(mask: Arc<DomainMask>) -> Self {
        let values = vec![0.0; mask.interior_count()];
        Self { mask, values }
    }

    /// The mask this function lives on.
    pub fn mask(&self) -> &Arc<DomainMask> {
        &self.mask
    }

    /// Interior values in interior order.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mutable interior values.
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Value at a flat lattice index: the stored value on interior nodes
    /// and exactly zero everywhere else.
    pub fn value_at_flat(&self, flat: usize) -> f64 {
        match self.mask.rank_of(flat) {
            Some(r) => self.values[r],
            None => 0.0,
        }
    }

    /// Serialize to the interchange document: grid parameters, domain
    /// descriptor, and one value per lattice node in row-major order.
    pub fn to_json(&self) -> Result<String> {
        let doc = GridFunctionDoc::from_function(self);
        Ok(serde_json::to_string(&doc)?)
    }

    /// Read a function back from the interchange document.
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: GridFunctionDoc = serde_json::from_str(text)?;
        doc.into_function()
    }
}

/// Sample a function on the interior nodes of a mask.
pub fn sample(
    mask: &Arc<DomainMask>,
    f: impl Fn(&[f64]) -> f64,
) -> Result<GridFunction> {
    let grid = mask.grid();
    let n = grid.dimension();
    let mut multi = vec![0usize; n];
    let mut point = vec![0.0_f64; n];
    let mut values = Vec::with_capacity(mask.interior_count());
    for &flat in mask.interior() {
        grid.multi_of_flat(flat as usize, &mut multi);
        grid.point_of_multi(&multi, &mut point);
        let v = f(&point);
        if !v.is_finite() {
            return Err(Error::NonFiniteSample {
                node: flat as usize,
            });
        }
        values.push(v);
    }
    GridFunction::new(mask.clone(), values)
}

/// Counting-measure Lebesgue norm (sum |u_i|^q h^n)^(1/q) over the
/// interior nodes; exterior zeros contribute nothing.
pub fn lq_norm(u: &GridFunction, q: f64) -> Result<f64> {
    if !(q >= 1.0) || !q.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "Lebesgue exponent {q} below 1"
        )));
    }
    let h = u.mask().grid().spacing();
    let n = u.mask().grid().dimension() as i32;
    let total = if q == 2.0 {
        sum::norm_sq(u.values())
    } else {
        sum::sum_iter(u.values().iter().map(|v| v.abs().powf(q)))
    };
    Ok((total * h.powi(n)).powf(1.0 / q))
}

/// Critical Sobolev exponent 2n/(n-2) as an exact rational.
pub fn two_star(n: usize) -> Result<Ratio<i64>> {
    if n < 3 {
        return Err(Error::InvalidParameter(format!(
            "dimension {n} below 3"
        )));
    }
    Ok(Ratio::new(2 * n as i64, n as i64 - 2))
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
enum DomainDoc {
    Ball {
        center: Vec<f64>,
        radius: f64,
    },
    Box {
        half_widths: Vec<f64>,
    },
    Predicate {
        label: String,
        interior: Vec<u32>,
    },
}

/// Interchange form of a grid function: {n, L, m, domain, values}, with
/// one value per lattice node in row-major order.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridFunctionDoc {
    n: usize,
    #[serde(rename = "L")]
    half_width: f64,
    m: usize,
    domain: DomainDoc,
    values: Vec<f64>,
}

impl GridFunctionDoc {
    fn from_function(u: &GridFunction) -> Self {
        let mask = u.mask();
        let grid = mask.grid();
        let total = grid.node_count().expect("existing grid fits memory");
        let mut values = vec![0.0_f64; total];
        for (r, &flat) in mask.interior().iter().enumerate() {
            values[flat as usize] = u.values()[r];
        }
        let domain = match mask.domain() {
            Domain::Ball { center, radius } => DomainDoc::Ball {
                center: center.clone(),
                radius: *radius,
            },
            Domain::Box { half_widths } => DomainDoc::Box {
                half_widths: half_widths.clone(),
            },
            Domain::Predicate { label } => DomainDoc::Predicate {
                label: label.clone(),
                interior: mask.interior().to_vec(),
            },
        };
        Self {
            n: grid.dimension(),
            half_width: grid.half_width(),
            m: grid.resolution(),
            domain,
            values,
        }
    }

    fn into_function(self) -> Result<GridFunction> {
        let grid = build_grid(self.n, self.half_width, self.m)?;
        let total = grid.node_count()?;
        if self.values.len() != total {
            return Err(Error::InvalidParameter(format!(
                "document carries {} values for a lattice of {total} nodes",
                self.values.len()
            )));
        }
        let mask = match self.domain {
            DomainDoc::Ball { center, radius } => mask_ball(grid, &center, radius)?,
            DomainDoc::Box { half_widths } => mask_box(grid, &half_widths)?,
            DomainDoc::Predicate { label, interior } => {
                let mut rank = vec![-1_i32; total];
                let mut previous = None;
                for (r, &flat) in interior.iter().enumerate() {
                    let flat_us = flat as usize;
                    if flat_us >= total || previous.is_some_and(|p| p >= flat) {
                        return Err(Error::InvalidParameter(
                            "interior node list is not strictly increasing within the lattice"
                                .to_string(),
                        ));
                    }
                    previous = Some(flat);
                    rank[flat_us] = r as i32;
                }
                if interior.is_empty() {
                    return Err(Error::EmptyMask);
                }
                finish_mask(
                    grid,
                    Domain::Predicate { label },
                    interior,
                    rank,
                    None,
                )
            }
        };
        let mut interior_values = Vec::with_capacity(mask.interior_count());
        for (flat, &v) in self.values.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFiniteSample { node: flat });
            }
            match mask.rank_of(flat) {
                Some(_) => interior_values.push(v),
                None if v != 0.0 => {
                    return Err(Error::InvalidParameter(format!(
                        "nonzero value {v} on exterior node {flat}"
                    )));
                }
                None => {}
            }
        }
        GridFunction::new(Arc::new(mask), interior_values)
    }
}
