//! Discrete quadratic forms of the mixed local/nonlocal operator.
//!
//! For functions that vanish outside the masked domain the Gagliardo
//! double integral splits into an interior-pair interaction plus a
//! confinement potential integrating the kernel over the complement.
//! The assembly realizes both pieces on the lattice: raw-kernel pair
//! weights w_ij = theta_i theta_j h^(2n) |x_i - x_j|^(-(n+2s)), where
//! theta is the fraction of a node's cell inside the domain, and a
//! per-node kappa combining an exact exterior lattice sum (the cut-off
//! cell parts included) with the analytic far-field tail. Without the
//! cell fractions the quadrature would integrate over the union of full
//! cells, whose volume fluctuates at order h^(3/2) as curved boundaries
//! slide across the lattice; that wobble is what dominates eigenvalue
//! errors, and the theta weights remove it. The local part is a
//! centered-difference Dirichlet energy whose boundary-crossing edges
//! are weighted by the fractional distance to the true domain boundary.
//!
//! Node-value quadrature of the singular kernel misses interaction mass
//! near the diagonal. For smooth functions the defect per node is the
//! lattice constant D(n, s) times h^(2-2s) |grad u|^2, where D is an
//! analytically continued Epstein zeta value; the energy adds that
//! correction as a multiple of the discrete gradient sum, which is what
//! makes the discrete seminorm track the continuum one at O(h^2).

use crate::error::{Error, Result};
use crate::grid::{Domain, DomainMask, GridFunction};
use crate::quad::{self, QuadOptions};
use crate::sobolev::sphere_area;
use crate::sum::Accumulator;
use sha2::{Digest, Sha256};
use statrs::function::gamma::gamma;
use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

/// Selects which quadratic form an operator action or diagonal refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FormKind {
    /// Local Dirichlet form only.
    Local,
    /// Nonlocal Gagliardo form only.
    Fractional,
    /// Sum of both, the form of rho^2.
    Mixed,
}

/// Assembled local and nonlocal forms on one mask at one order s.
pub struct MixedForms {
    mask: Arc<DomainMask>,
    s: f64,
    n: usize,
    h: f64,
    /// Integer node coordinates, node-major, n entries per node.
    coords: Vec<i32>,
    /// Kernel lookup by squared integer distance: d2^(-(n+2s)/2).
    kernel: Vec<f64>,
    /// Physical pair weight scale h^(n-2s); w_ij = pair_scale *
    /// theta_i * theta_j * kernel[d2].
    pair_scale: f64,
    /// Interior volume fraction of each node's cell, 1 away from the
    /// boundary.
    theta: Vec<f64>,
    /// Per-node sum of theta_j * kernel[d2] over the other interior
    /// nodes.
    kernel_row_sum: Vec<f64>,
    /// Confinement potential kappa per interior node.
    kappa: Vec<f64>,
    /// Per-node truncation radius beyond which the tail is analytic.
    tail_radius: Vec<f64>,
    /// Analytic tail constant sigma_(n-1) / (2s).
    tail_constant: f64,
    /// Near-diagonal defect constant D(n, s).
    near_field: f64,
    /// Interior-neighbor ranks, 2n per node (+ then - per axis), -1 if
    /// the neighbor is exterior.
    neighbors: Vec<i32>,
    /// Boundary fractions for exterior edges, 1 on interior edges.
    alphas: Vec<f64>,
}

fn check_order(s: f64) -> Result<()> {
    if !(s > 0.0 && s < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "fractional order {s} outside (0, 1)"
        )));
    }
    Ok(())
}

fn check_dimension(n: usize) -> Result<()> {
    if !(3..=5).contains(&n) {
        return Err(Error::InvalidParameter(format!(
            "forms support dimensions 3 through 5, got {n}"
        )));
    }
    Ok(())
}

/// Analytic continuation of the Epstein zeta sum over the nonzero
/// integer lattice, sum |z|^(-a), to exponents 0 < a < n, via the
/// incomplete theta split at t = 1.
fn epstein_zeta(n: usize, a: f64) -> f64 {
    let nf = n as f64;
    let integrand = |t: f64| {
        let mut theta = 1.0;
        let mut k = 1.0_f64;
        loop {
            let term = 2.0 * (-PI * t * k * k).exp();
            theta += term;
            if term < 1e-300 {
                break;
            }
            k += 1.0;
        }
        (t.powf(0.5 * a) + t.powf(0.5 * (nf - a))) * (theta.powi(n as i32) - 1.0) / t
    };
    let opts = QuadOptions {
        abs_tol: 1e-14,
        rel_tol: 1e-13,
        max_intervals: 400,
    };
    let tail = quad::integrate(integrand, 1.0, 60.0, &opts);
    PI.powf(0.5 * a) / gamma(0.5 * a) * (-2.0 / a - 2.0 / (nf - a) + tail.value)
}

/// Near-diagonal defect constant D(n, s): the direction-averaged gap
/// between the continuum kernel integral and the unit-lattice kernel sum
/// against quadratic growth, equal to -Z_n(n + 2s - 2) / n.
pub fn near_field_constant(n: usize, s: f64) -> Result<f64> {
    check_dimension(n)?;
    check_order(s)?;
    Ok(-epstein_zeta(n, n as f64 + 2.0 * s - 2.0) / n as f64)
}

/// Count of integer lattice vectors at each squared length up to cap.
fn shell_histogram(n: usize, cap: usize) -> Vec<f64> {
    fn descend(dims_left: usize, rem: i64, sum: usize, hist: &mut [f64]) {
        if dims_left == 0 {
            hist[sum] += 1.0;
            return;
        }
        let mut z = 0_i64;
        while z * z <= rem {
            let zz = (z * z) as usize;
            descend(dims_left - 1, rem - (zz as i64), sum + zz, hist);
            if z > 0 {
                descend(dims_left - 1, rem - (zz as i64), sum + zz, hist);
            }
            z += 1;
        }
    }
    let mut hist = vec![0.0_f64; cap + 1];
    descend(n, cap as i64, 0, &mut hist);
    hist[0] = 0.0;
    hist
}

fn pair_row_sums<const D: usize>(
    coords: &[i32],
    kernel: &[f64],
    theta: &[f64],
    out: &mut [f64],
) {
    let count = out.len();
    for i in 0..count {
        let ci: [i32; D] = coords[i * D..(i + 1) * D].try_into().unwrap();
        let ti = theta[i];
        let mut row = 0.0;
        for j in (i + 1)..count {
            let mut d2 = 0_i32;
            for d in 0..D {
                let t = ci[d] - coords[j * D + d];
                d2 += t * t;
            }
            let k = kernel[d2 as usize];
            row += theta[j] * k;
            out[j] += ti * k;
        }
        out[i] += row;
    }
}

fn pair_energy<const D: usize>(coords: &[i32], kernel: &[f64], theta: &[f64], u: &[f64]) -> f64 {
    let count = u.len();
    let mut acc = Accumulator::new();
    for i in 0..count {
        let ci: [i32; D] = coords[i * D..(i + 1) * D].try_into().unwrap();
        let ui = u[i];
        let mut row = 0.0;
        for j in (i + 1)..count {
            let mut d2 = 0_i32;
            for d in 0..D {
                let t = ci[d] - coords[j * D + d];
                d2 += t * t;
            }
            let du = ui - u[j];
            row += theta[j] * du * du * kernel[d2 as usize];
        }
        acc.add(theta[i] * row);
    }
    acc.value()
}

fn pair_apply<const D: usize>(
    coords: &[i32],
    kernel: &[f64],
    theta: &[f64],
    u: &[f64],
    out: &mut [f64],
) {
    let count = u.len();
    for i in 0..count {
        let ci: [i32; D] = coords[i * D..(i + 1) * D].try_into().unwrap();
        let ui = u[i];
        let ti = theta[i];
        let mut row = 0.0;
        for j in (i + 1)..count {
            let mut d2 = 0_i32;
            for d in 0..D {
                let t = ci[d] - coords[j * D + d];
                d2 += t * t;
            }
            let flow = theta[j] * kernel[d2 as usize] * (ui - u[j]);
            row += flow;
            out[j] -= ti * flow;
        }
        out[i] += ti * row;
    }
}

macro_rules! dispatch_dim {
    ($n:expr, $func:ident ( $($arg:expr),* )) => {
        match $n {
            3 => $func::<3>($($arg),*),
            4 => $func::<4>($($arg),*),
            _ => $func::<5>($($arg),*),
        }
    };
}

/// Assemble the mixed forms for a mask at fractional order s.
pub fn assemble(mask: &Arc<DomainMask>, s: f64) -> Result<MixedForms> {
    assemble_inner(mask, s, None)
}

/// Assemble with a binary cache of the O(N^2) kernel row sums, keyed by
/// the mask content hash and the bits of s. A cache hit reproduces the
/// fresh assembly bit for bit; unreadable or mismatched entries are
/// recomputed and rewritten.
pub fn assemble_with_cache(mask: &Arc<DomainMask>, s: f64, dir: &Path) -> Result<MixedForms> {
    assemble_inner(mask, s, Some(dir))
}

fn cache_path(mask: &DomainMask, s: f64, dir: &Path) -> std::path::PathBuf {
    let mut hasher = Sha256::new();
    hasher.update(mask.content_hash());
    hasher.update(s.to_bits().to_le_bytes());
    let key: [u8; 32] = hasher.finalize().into();
    let hex: String = key[..12].iter().map(|b| format!("{b:02x}")).collect();
    dir.join(format!("kernel-sums-{hex}.bin"))
}

const CACHE_MAGIC: &[u8; 8] = b"MIXKRS2\n";

fn read_cached_row_sums(path: &Path, mask: &DomainMask, s: f64) -> Option<Vec<f64>> {
    let mut file = std::fs::File::open(path).ok()?;
    let mut header = [0u8; 8 + 32 + 8 + 8];
    file.read_exact(&mut header).ok()?;
    if &header[..8] != CACHE_MAGIC
        || header[8..40] != mask.content_hash()[..]
        || header[40..48] != s.to_bits().to_le_bytes()
        || header[48..56] != (mask.interior_count() as u64).to_le_bytes()
    {
        return None;
    }
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).ok()?;
    if bytes.len() != mask.interior_count() * 8 {
        return None;
    }
    Some(
        bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    )
}

fn write_cached_row_sums(path: &Path, mask: &DomainMask, s: f64, sums: &[f64]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(CACHE_MAGIC)?;
    file.write_all(mask.content_hash())?;
    file.write_all(&s.to_bits().to_le_bytes())?;
    file.write_all(&(sums.len() as u64).to_le_bytes())?;
    for v in sums {
        file.write_all(&v.to_bits().to_le_bytes())?;
    }
    Ok(())
}

fn assemble_inner(mask: &Arc<DomainMask>, s: f64, cache_dir: Option<&Path>) -> Result<MixedForms> {
    check_order(s)?;
    let grid = *mask.grid();
    let n = grid.dimension();
    check_dimension(n)?;
    let h = grid.spacing();
    let count = mask.interior_count();
    let gamma_exp = 0.5 * (n as f64 + 2.0 * s);

    let mut coords = vec![0_i32; count * n];
    let mut theta = vec![1.0_f64; count];
    let mut multi = vec![0usize; n];
    for (rank, &flat) in mask.interior().iter().enumerate() {
        grid.multi_of_flat(flat as usize, &mut multi);
        for d in 0..n {
            coords[rank * n + d] = multi[d] as i32;
        }
        theta[rank] = mask.cell_fraction(&multi);
    }

    // Cells of exterior nodes can poke into the domain; that orphaned
    // interior mass is claimed by the nearest interior node. The
    // weighted cells then tile the domain itself rather than the union
    // of full cells, whose volume fluctuates with the grid offset.
    // Predicate masks have no cell geometry and keep unit weights.
    if !matches!(mask.domain(), Domain::Predicate { .. }) {
        let mut nb = vec![0usize; n];
        for flat in 0..grid.node_count()? {
            if mask.rank_of(flat).is_some() {
                continue;
            }
            grid.multi_of_flat(flat, &mut multi);
            let orphan = mask.cell_fraction(&multi);
            if orphan <= 0.0 {
                continue;
            }
            let mut best: Option<(i64, i64)> = None;
            for code in 0..5_usize.pow(n as u32) {
                let mut rest = code;
                let mut d2 = 0_i64;
                let mut valid = true;
                for d in 0..n {
                    let off = (rest % 5) as i64 - 2;
                    rest /= 5;
                    let idx = multi[d] as i64 + off;
                    if idx < 0 || idx >= grid.resolution() as i64 {
                        valid = false;
                        break;
                    }
                    nb[d] = idx as usize;
                    d2 += off * off;
                }
                if !valid || d2 == 0 {
                    continue;
                }
                let nb_flat = grid.flat_of_multi(&nb);
                if mask.rank_of(nb_flat).is_some() {
                    let key = (d2, nb_flat as i64);
                    if best.map_or(true, |b| key < b) {
                        best = Some(key);
                    }
                }
            }
            if let Some((_, nearest_flat)) = best {
                if let Some(rank) = mask.rank_of(nearest_flat as usize) {
                    theta[rank] += orphan;
                }
            }
        }
    }

    // Truncation radii: beyond R_i every lattice node is exterior, so the
    // complement sum continues as the analytic tail. Ball and box domains
    // use the exact supremum of distances into the domain; sampled
    // predicates bound it by the interior bounding-box corners.
    let mut tail_radius = vec![0.0_f64; count];
    let mut point = vec![0.0_f64; n];
    match mask.domain() {
        Domain::Ball { center, radius } => {
            for (rank, &flat) in mask.interior().iter().enumerate() {
                grid.multi_of_flat(flat as usize, &mut multi);
                grid.point_of_multi(&multi, &mut point);
                let dist: f64 = point
                    .iter()
                    .zip(center)
                    .map(|(x, c)| (x - c) * (x - c))
                    .sum::<f64>()
                    .sqrt();
                tail_radius[rank] = dist + radius;
            }
        }
        Domain::Box { half_widths } => {
            for (rank, &flat) in mask.interior().iter().enumerate() {
                grid.multi_of_flat(flat as usize, &mut multi);
                grid.point_of_multi(&multi, &mut point);
                let sq: f64 = point
                    .iter()
                    .zip(half_widths)
                    .map(|(x, w)| (x.abs() + w) * (x.abs() + w))
                    .sum();
                tail_radius[rank] = sq.sqrt();
            }
        }
        Domain::Predicate { .. } => {
            let mut lo = vec![i32::MAX; n];
            let mut hi = vec![i32::MIN; n];
            for rank in 0..count {
                for d in 0..n {
                    let c = coords[rank * n + d];
                    lo[d] = lo[d].min(c);
                    hi[d] = hi[d].max(c);
                }
            }
            for rank in 0..count {
                let mut sq = 0_i64;
                for d in 0..n {
                    let c = coords[rank * n + d] as i64;
                    let r = (c - lo[d] as i64).max(hi[d] as i64 - c);
                    sq += r * r;
                }
                tail_radius[rank] = h * (sq as f64).sqrt();
            }
        }
    }

    let shell_caps: Vec<usize> = tail_radius
        .iter()
        .map(|&r| ((r / h) * (r / h)).floor() as usize)
        .collect();
    let cap = shell_caps.iter().copied().max().unwrap_or(0).max(1);

    let mut kernel = vec![0.0_f64; cap + 1];
    for (d2, k) in kernel.iter_mut().enumerate().skip(1) {
        *k = (d2 as f64).powf(-gamma_exp);
    }

    // Prefix sums of the full-lattice kernel by squared radius turn each
    // per-node exterior sum into one lookup minus the theta-weighted
    // interior row sum, so the cut-off parts of straddling interior
    // cells count toward the exterior where they geometrically belong.
    let hist = shell_histogram(n, cap);
    let mut lattice_prefix = vec![0.0_f64; cap + 1];
    let mut running = Accumulator::new();
    for d2 in 1..=cap {
        running.add(hist[d2] * kernel[d2]);
        lattice_prefix[d2] = running.value();
    }

    let kernel_row_sum = match cache_dir {
        Some(dir) => {
            let path = cache_path(mask, s, dir);
            match read_cached_row_sums(&path, mask, s) {
                Some(sums) => sums,
                None => {
                    let mut sums = vec![0.0_f64; count];
                    dispatch_dim!(n, pair_row_sums(&coords, &kernel, &theta, &mut sums));
                    write_cached_row_sums(&path, mask, s, &sums)?;
                    sums
                }
            }
        }
        None => {
            let mut sums = vec![0.0_f64; count];
            dispatch_dim!(n, pair_row_sums(&coords, &kernel, &theta, &mut sums));
            sums
        }
    };

    // Confinement per node, weighted by the cell mass it carries so the
    // pair and confinement quadratures integrate over the same support.
    let tail_constant = sphere_area(n) / (2.0 * s);
    let h_pow = h.powf(-2.0 * s);
    let mut kappa = vec![0.0_f64; count];
    for rank in 0..count {
        let exterior_sum = lattice_prefix[shell_caps[rank]] - kernel_row_sum[rank];
        kappa[rank] = theta[rank]
            * (h_pow * exterior_sum.max(0.0)
                + tail_constant * tail_radius[rank].powf(-2.0 * s));
    }

    let mut neighbors = vec![-1_i32; count * 2 * n];
    let mut alphas = vec![1.0_f64; count * 2 * n];
    for (rank, &flat) in mask.interior().iter().enumerate() {
        grid.multi_of_flat(flat as usize, &mut multi);
        for d in 0..n {
            for (slot, step) in [(2 * d, 1_i64), (2 * d + 1, -1_i64)] {
                let mut nb = multi.clone();
                nb[d] = (nb[d] as i64 + step) as usize;
                match mask.rank_of(grid.flat_of_multi(&nb)) {
                    Some(r) => neighbors[rank * 2 * n + slot] = r as i32,
                    None => {
                        alphas[rank * 2 * n + slot] = mask.boundary_fraction(&multi, d, step);
                    }
                }
            }
        }
    }

    Ok(MixedForms {
        mask: mask.clone(),
        s,
        n,
        h,
        coords,
        kernel,
        pair_scale: h.powf(n as f64 - 2.0 * s),
        theta,
        kernel_row_sum,
        kappa,
        tail_radius,
        tail_constant,
        near_field: near_field_constant(n, s)?,
        neighbors,
        alphas,
    })
}

impl MixedForms {
    /// The mask the forms were assembled on.
    pub fn mask(&self) -> &Arc<DomainMask> {
        &self.mask
    }

    /// Fractional order s.
    pub fn order(&self) -> f64 {
        self.s
    }

    /// Confinement potential per interior node.
    pub fn kappa(&self) -> &[f64] {
        &self.kappa
    }

    /// Per-node truncation radius of the analytic tail.
    pub fn tail_radius(&self) -> &[f64] {
        &self.tail_radius
    }

    /// Analytic tail constant sigma_(n-1) / (2s).
    pub fn tail_constant(&self) -> f64 {
        self.tail_constant
    }

    /// Near-diagonal defect constant D(n, s) used by the energy.
    pub fn near_field(&self) -> f64 {
        self.near_field
    }

    /// Per-node interior kernel row sums (diagnostic and cache payload).
    pub fn kernel_row_sums(&self) -> &[f64] {
        &self.kernel_row_sum
    }

    /// Interior cell-volume fraction per node.
    pub fn cell_fractions(&self) -> &[f64] {
        &self.theta
    }

    /// Interaction weight w_ij between two interior ranks.
    pub fn interaction_weight(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return 0.0;
        }
        let mut d2 = 0_i32;
        for d in 0..self.n {
            let t = self.coords[i * self.n + d] - self.coords[j * self.n + d];
            d2 += t * t;
        }
        self.theta[i] * self.theta[j] * self.pair_scale * self.kernel[d2 as usize]
    }

    fn check_function(&self, u: &GridFunction) -> Result<()> {
        if !u.mask().same_mask(&self.mask) {
            return Err(Error::MaskMismatch);
        }
        Ok(())
    }

    /// Sum over interior-interior lattice edges of (u_i - u_j)^2, the
    /// discrete gradient mass shared by the local energy and the
    /// near-field correction.
    fn edge_sum(&self, u: &[f64]) -> f64 {
        let two_n = 2 * self.n;
        let mut acc = Accumulator::new();
        for i in 0..u.len() {
            let mut node = 0.0;
            for d in 0..self.n {
                let nb = self.neighbors[i * two_n + 2 * d];
                if nb >= 0 {
                    let du = u[i] - u[nb as usize];
                    node += du * du;
                }
            }
            acc.add(node);
        }
        acc.value()
    }

    /// Boundary-crossing contribution: sum of u_i^2 / alpha over exterior
    /// edges.
    fn crossing_sum(&self, u: &[f64]) -> f64 {
        let two_n = 2 * self.n;
        let mut acc = Accumulator::new();
        for i in 0..u.len() {
            let mut node = 0.0;
            for slot in 0..two_n {
                if self.neighbors[i * two_n + slot] < 0 {
                    node += u[i] * u[i] / self.alphas[i * two_n + slot];
                }
            }
            acc.add(node);
        }
        acc.value()
    }

    /// Local Dirichlet energy: centered differences over lattice edges
    /// with exterior values zero, boundary edges weighted by the inverse
    /// fractional boundary distance.
    pub fn dirichlet_energy(&self, u: &GridFunction) -> Result<f64> {
        self.check_function(u)?;
        let v = u.values();
        Ok(self.h.powi(self.n as i32 - 2) * (self.edge_sum(v) + self.crossing_sum(v)))
    }

    /// Nonlocal energy: interior pair interaction, confinement, and the
    /// near-diagonal defect correction.
    pub fn gagliardo_energy(&self, u: &GridFunction) -> Result<f64> {
        self.check_function(u)?;
        let v = u.values();
        let pair = dispatch_dim!(
            self.n,
            pair_energy(&self.coords, &self.kernel, &self.theta, v)
        );
        let mut conf = Accumulator::new();
        for (value, k) in v.iter().zip(&self.kappa) {
            conf.add(value * value * k);
        }
        let hn = self.h.powi(self.n as i32);
        Ok(2.0 * self.pair_scale * pair
            + 2.0 * hn * conf.value()
            + self.near_field * self.pair_scale * self.edge_sum(v))
    }

    /// Squared global norm rho(u)^2: local plus nonlocal energy.
    pub fn rho_squared(&self, u: &GridFunction) -> Result<f64> {
        Ok(self.dirichlet_energy(u)? + self.gagliardo_energy(u)?)
    }

    /// Riesz action of one of the forms on raw interior values, writing
    /// the result over `out`: the pairing <out, v> h^n equals the chosen
    /// bilinear form applied to (u, v) for every v on the mask.
    pub fn apply_slice(&self, kind: FormKind, u: &[f64], out: &mut [f64]) {
        assert_eq!(u.len(), self.kappa.len());
        assert_eq!(out.len(), u.len());
        let count = u.len();
        let two_n = 2 * self.n;
        let hn = self.h.powi(self.n as i32);
        let local_scale = self.h.powi(-2);
        let frac_scale = self.pair_scale / hn;
        let do_local = kind != FormKind::Fractional;
        let do_frac = kind != FormKind::Local;

        out.fill(0.0);
        if do_frac {
            dispatch_dim!(
                self.n,
                pair_apply(&self.coords, &self.kernel, &self.theta, u, out)
            );
        }
        for i in 0..count {
            let mut crossing = 0.0;
            let mut edge_flow = 0.0;
            for d in 0..self.n {
                for slot in [2 * d, 2 * d + 1] {
                    let nb = self.neighbors[i * two_n + slot];
                    if nb >= 0 {
                        edge_flow += u[i] - u[nb as usize];
                    } else {
                        crossing += u[i] / self.alphas[i * two_n + slot];
                    }
                }
            }
            let mut acc = 0.0;
            if do_frac {
                acc += frac_scale * (2.0 * out[i] + self.near_field * edge_flow)
                    + 2.0 * self.kappa[i] * u[i];
            }
            if do_local {
                acc += local_scale * (edge_flow + crossing);
            }
            out[i] = acc;
        }
    }

    /// Riesz action A u of the full form rho^2 as a grid function.
    pub fn apply_operator(&self, u: &GridFunction) -> Result<GridFunction> {
        self.check_function(u)?;
        let mut out = vec![0.0_f64; u.values().len()];
        self.apply_slice(FormKind::Mixed, u.values(), &mut out);
        GridFunction::new(self.mask.clone(), out)
    }

    /// Diagonal of the chosen form's operator in the h^n pairing, for
    /// preconditioning and positivity checks.
    pub fn diagonal_of(&self, kind: FormKind) -> Vec<f64> {
        let count = self.kappa.len();
        let two_n = 2 * self.n;
        let hn = self.h.powi(self.n as i32);
        let local_scale = self.h.powi(-2);
        let frac_scale = self.pair_scale / hn;
        let do_local = kind != FormKind::Fractional;
        let do_frac = kind != FormKind::Local;
        let mut diag = vec![0.0_f64; count];
        for i in 0..count {
            let mut crossing = 0.0;
            let mut degree = 0.0;
            for slot in 0..two_n {
                if self.neighbors[i * two_n + slot] >= 0 {
                    degree += 1.0;
                } else {
                    crossing += 1.0 / self.alphas[i * two_n + slot];
                }
            }
            let mut acc = 0.0;
            if do_frac {
                acc += frac_scale
                    * (2.0 * self.theta[i] * self.kernel_row_sum[i] + self.near_field * degree)
                    + 2.0 * self.kappa[i];
            }
            if do_local {
                acc += local_scale * (degree + crossing);
            }
            diag[i] = acc;
        }
        diag
    }

    /// Diagonal of the full operator.
    pub fn diagonal(&self) -> Vec<f64> {
        self.diagonal_of(FormKind::Mixed)
    }

    /// Energy of the chosen form.
    pub fn energy_of(&self, kind: FormKind, u: &GridFunction) -> Result<f64> {
        match kind {
            FormKind::Local => self.dirichlet_energy(u),
            FormKind::Fractional => self.gagliardo_energy(u),
            FormKind::Mixed => self.rho_squared(u),
        }
    }

    /// Ratio of the nonlocal energy to the full local H^1 norm, the
    /// quantity bounded by the continuous embedding.
    pub fn embedding_constant_probe(&self, u: &GridFunction) -> Result<f64> {
        self.check_function(u)?;
        if u.values().iter().all(|&v| v == 0.0) {
            return Err(Error::InvalidParameter(
                "embedding probe of the zero function".to_string(),
            ));
        }
        let hn = self.h.powi(self.n as i32);
        let l2_sq = hn * crate::sum::norm_sq(u.values());
        Ok(self.gagliardo_energy(u)? / (l2_sq + self.dirichlet_energy(u)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_grid, mask_ball, sample, lq_norm};
    use crate::quad::window;
    use crate::sobolev;
    use crate::sum;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_ball_forms(m: usize, s: f64) -> (Arc<DomainMask>, MixedForms) {
        let g = build_grid(3, 1.25, m).unwrap();
        let mask = Arc::new(mask_ball(g, &[0.0; 3], 1.0).unwrap());
        let forms = assemble(&mask, s).unwrap();
        (mask, forms)
    }

    fn radial_sample(mask: &Arc<DomainMask>, f: impl Fn(f64) -> f64) -> GridFunction {
        sample(mask, |x| {
            f(x.iter().map(|a| a * a).sum::<f64>().sqrt())
        })
        .unwrap()
    }

    fn random_bump_function(
        mask: &Arc<DomainMask>,
        rng: &mut ChaCha8Rng,
    ) -> GridFunction {
        let n = mask.grid().dimension();
        let center: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.3..0.3)).collect();
        let width: f64 = rng.gen_range(0.2..0.6);
        let amp: f64 = rng.gen_range(0.5..2.0);
        sample(mask, |x| {
            let r = x
                .iter()
                .zip(&center)
                .map(|(a, c)| (a - c) * (a - c))
                .sum::<f64>()
                .sqrt();
            amp * window(r / width)
        })
        .unwrap()
    }

    #[test]
    fn near_field_constants_match_continuation_oracle() {
        // Independently computed Epstein zeta continuations.
        let pinned = [
            (3, 0.10, 1.16346793670245588),
            (3, 0.25, 1.60757331141318173),
            (3, 0.50, 2.97121097252838376),
            (3, 0.75, 7.13051136611141765),
            (3, 0.90, 19.6804622227584993),
            (4, 0.50, 3.81499411915586941),
            (5, 0.50, 4.28423433939214511),
        ];
        for (n, s, want) in pinned {
            let got = near_field_constant(n, s).unwrap();
            assert!(
                (got - want).abs() / want < 1e-9,
                "D({n}, {s}) = {got}, want {want}"
            );
        }
    }

    #[test]
    fn kappa_at_ball_center_matches_exact_integral() {
        let (mask, forms) = unit_ball_forms(25, 0.5);
        let g = mask.grid();
        let center_flat = g.flat_of_multi(&[12, 12, 12]);
        let rank = mask.rank_of(center_flat).unwrap();
        let exact = 4.0 * PI;
        let got = forms.kappa()[rank];
        assert!(
            (got - exact).abs() / exact < 0.01,
            "kappa at center {got} vs {exact}"
        );
        assert!((forms.tail_radius()[rank] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kappa_off_center_matches_radial_confinement_oracle() {
        let (mask, forms) = unit_ball_forms(25, 0.5);
        let g = mask.grid();
        // Node five steps along the x axis, at radius 5h inside the ball.
        let multi = [17, 12, 12];
        let rank = mask.rank_of(g.flat_of_multi(&multi)).unwrap();
        let r = 5.0 * g.spacing();
        let oracle = sobolev::radial_confinement(3, 0.5, 1.0, r).unwrap() / sphere_area(3);
        let got = forms.kappa()[rank];
        assert!(
            (got - oracle).abs() / oracle < 0.02,
            "kappa at r=0.5: {got} vs {oracle}"
        );
    }

    #[test]
    fn kappa_is_positive_everywhere() {
        for s in [0.25, 0.5, 0.75] {
            let (_, forms) = unit_ball_forms(17, s);
            assert!(forms.kappa().iter().all(|&k| k > 0.0));
        }
    }

    #[test]
    fn interaction_weights_are_symmetric() {
        let (_, forms) = unit_ball_forms(13, 0.5);
        let count = forms.kappa().len();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let i = rng.gen_range(0..count);
            let j = rng.gen_range(0..count);
            let wij = forms.interaction_weight(i, j);
            let wji = forms.interaction_weight(j, i);
            assert_eq!(wij.to_bits(), wji.to_bits());
            assert!(wij >= 0.0);
        }
    }

    #[test]
    fn constant_function_energy_is_purely_confinement() {
        let (mask, forms) = unit_ball_forms(13, 0.5);
        let ones = sample(&mask, |_| 1.0).unwrap();
        let hn = mask.grid().spacing().powi(3);
        let expected = 2.0 * hn * sum::sum(forms.kappa());
        let got = forms.gagliardo_energy(&ones).unwrap();
        assert!(
            (got - expected).abs() <= 1e-12 * expected,
            "{got} vs {expected}"
        );
    }

    #[test]
    fn zero_function_has_zero_energies() {
        let (mask, forms) = unit_ball_forms(13, 0.5);
        let zero = GridFunction::zeros(mask.clone());
        assert_eq!(forms.dirichlet_energy(&zero).unwrap(), 0.0);
        assert_eq!(forms.gagliardo_energy(&zero).unwrap(), 0.0);
        assert_eq!(forms.rho_squared(&zero).unwrap(), 0.0);
    }

    #[test]
    fn energies_are_quadratically_homogeneous() {
        let (mask, forms) = unit_ball_forms(13, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let u = random_bump_function(&mask, &mut rng);
        let mut scaled = u.clone();
        for v in scaled.values_mut() {
            *v *= -3.0;
        }
        let base_d = forms.dirichlet_energy(&u).unwrap();
        let base_g = forms.gagliardo_energy(&u).unwrap();
        assert!(
            (forms.dirichlet_energy(&scaled).unwrap() - 9.0 * base_d).abs() <= 1e-10 * base_d
        );
        assert!(
            (forms.gagliardo_energy(&scaled).unwrap() - 9.0 * base_g).abs() <= 1e-10 * base_g
        );
    }

    #[test]
    fn energies_are_positive_on_nonzero_functions() {
        let (mask, forms) = unit_ball_forms(13, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..5 {
            let mut u = GridFunction::zeros(mask.clone());
            for v in u.values_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
            assert!(forms.dirichlet_energy(&u).unwrap() > 0.0);
            assert!(forms.gagliardo_energy(&u).unwrap() > 0.0);
        }
        // A single interior spike away from the boundary.
        let mut spike = GridFunction::zeros(mask.clone());
        let rank = mask.rank_of(mask.grid().flat_of_multi(&[6, 6, 6])).unwrap();
        spike.values_mut()[rank] = 1.0;
        assert!(forms.dirichlet_energy(&spike).unwrap() > 0.0);
        assert!(forms.gagliardo_energy(&spike).unwrap() > 0.0);
    }

    #[test]
    fn sampled_ball_mode_rayleigh_quotient_approaches_pi_squared() {
        let g = build_grid(3, 1.25, 33).unwrap();
        let mask = Arc::new(mask_ball(g, &[0.0; 3], 1.0).unwrap());
        let forms = assemble(&mask, 0.5).unwrap();
        let u = radial_sample(&mask, |r| {
            if r < 1e-12 {
                1.0
            } else {
                (PI * r).sin() / (PI * r)
            }
        });
        let quotient =
            forms.dirichlet_energy(&u).unwrap() / lq_norm(&u, 2.0).unwrap().powi(2);
        let target = PI * PI;
        assert!(
            (quotient - target).abs() / target < 0.02,
            "Rayleigh quotient {quotient} vs {target}"
        );
    }

    #[test]
    fn gagliardo_matches_radial_oracle_on_smooth_bump() {
        let s = 0.5;
        let (mask, forms) = unit_ball_forms(25, s);
        let profile = sobolev::RadialProfile::new(3, sobolev::ProfileKind::Gaussian)
            .unwrap()
            .windowed(0.95)
            .unwrap();
        let u = radial_sample(&mask, |r| profile.eval(r));
        let oracle = sobolev::radial_gagliardo(&profile, s).unwrap();
        let got = forms.gagliardo_energy(&u).unwrap();
        assert!(
            (got - oracle).abs() / oracle < 0.03,
            "discrete {got} vs oracle {oracle}"
        );
    }

    #[test]
    fn rescaled_lattice_obeys_exact_scaling_laws() {
        // Same node values, domain and spacing shrunk by k = 2, values
        // amplified by k^((n-2)/2): the nonlocal energy scales by
        // k^(2s-2) and the local energy is invariant.
        for s in [0.25, 0.5, 0.75] {
            let k = 2.0_f64;
            let g1 = build_grid(3, 1.25, 17).unwrap();
            let g2 = build_grid(3, 1.25 / k, 17).unwrap();
            let mask1 = Arc::new(mask_ball(g1, &[0.0; 3], 1.0).unwrap());
            let mask2 = Arc::new(mask_ball(g2, &[0.0; 3], 1.0 / k).unwrap());
            assert_eq!(mask1.interior_count(), mask2.interior_count());
            let forms1 = assemble(&mask1, s).unwrap();
            let forms2 = assemble(&mask2, s).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let u1 = random_bump_function(&mask1, &mut rng);
            let amp = k.powf(0.5);
            let u2 = GridFunction::new(
                mask2.clone(),
                u1.values().iter().map(|v| amp * v).collect(),
            )
            .unwrap();

            let gag_ratio =
                forms2.gagliardo_energy(&u2).unwrap() / forms1.gagliardo_energy(&u1).unwrap();
            let want = k.powf(2.0 * s - 2.0);
            assert!(
                (gag_ratio - want).abs() / want < 1e-10,
                "s={s}: nonlocal ratio {gag_ratio} vs {want}"
            );
            let dir_ratio =
                forms2.dirichlet_energy(&u2).unwrap() / forms1.dirichlet_energy(&u1).unwrap();
            assert!(
                (dir_ratio - 1.0).abs() < 1e-10,
                "s={s}: local ratio {dir_ratio}"
            );
        }
    }

    #[test]
    fn rho_squared_is_the_sum_of_both_energies() {
        let (mask, forms) = unit_ball_forms(13, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let u = random_bump_function(&mask, &mut rng);
        let d = forms.dirichlet_energy(&u).unwrap();
        let g = forms.gagliardo_energy(&u).unwrap();
        let rho = forms.rho_squared(&u).unwrap();
        assert_eq!(rho, d + g);
        assert!(rho >= d);
    }

    #[test]
    fn critical_quotient_stays_above_sharp_constant_window() {
        let talenti = sobolev::talenti_constant(3).unwrap();
        let (mask, forms) = unit_ball_forms(25, 0.5);
        let mut candidates = Vec::new();
        let profile = sobolev::aubin_talenti(3, 3.0, &[0.0; 3]).unwrap();
        candidates.push(radial_sample(&mask, |r| profile.eval(r)));
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..3 {
            candidates.push(random_bump_function(&mask, &mut rng));
        }
        let mut spike = GridFunction::zeros(mask.clone());
        let rank = mask
            .rank_of(mask.grid().flat_of_multi(&[12, 12, 12]))
            .unwrap();
        spike.values_mut()[rank] = 1.0;
        candidates.push(spike);
        for u in &candidates {
            let quotient =
                forms.rho_squared(u).unwrap() / lq_norm(u, 6.0).unwrap().powi(2);
            assert!(
                quotient >= 0.9 * talenti,
                "quotient {quotient} below 0.9 * {talenti}"
            );
        }
    }

    #[test]
    fn operator_application_is_linear() {
        let (mask, forms) = unit_ball_forms(13, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let u = random_bump_function(&mask, &mut rng);
        let v = random_bump_function(&mask, &mut rng);
        let mut w = u.clone();
        for (a, b) in w.values_mut().iter_mut().zip(v.values()) {
            *a += *b;
        }
        let au = forms.apply_operator(&u).unwrap();
        let av = forms.apply_operator(&v).unwrap();
        let aw = forms.apply_operator(&w).unwrap();
        let scale: f64 = aw.values().iter().map(|x| x.abs()).fold(0.0, f64::max);
        for i in 0..aw.values().len() {
            let lin = au.values()[i] + av.values()[i];
            assert!((aw.values()[i] - lin).abs() <= 1e-12 * scale.max(1.0));
        }
    }

    #[test]
    fn operator_pairing_reproduces_rho_squared() {
        let (mask, forms) = unit_ball_forms(13, 0.5);
        let hn = mask.grid().spacing().powi(3);
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        for _ in 0..3 {
            let u = random_bump_function(&mask, &mut rng);
            let au = forms.apply_operator(&u).unwrap();
            let pairing = hn * sum::dot(au.values(), u.values());
            let rho = forms.rho_squared(&u).unwrap();
            assert!(
                (pairing - rho).abs() <= 1e-10 * rho,
                "pairing {pairing} vs rho^2 {rho}"
            );
        }
    }

    #[test]
    fn operator_is_symmetric_on_random_pairs() {
        let (mask, forms) = unit_ball_forms(13, 0.5);
        let hn = mask.grid().spacing().powi(3);
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        for _ in 0..5 {
            let u = random_bump_function(&mask, &mut rng);
            let v = random_bump_function(&mask, &mut rng);
            let au = forms.apply_operator(&u).unwrap();
            let av = forms.apply_operator(&v).unwrap();
            let left = hn * sum::dot(au.values(), v.values());
            let right = hn * sum::dot(av.values(), u.values());
            let scale = left.abs().max(right.abs()).max(1e-300);
            assert!(
                (left - right).abs() <= 1e-10 * scale,
                "pairing asymmetry {left} vs {right}"
            );
        }
    }

    #[test]
    fn operator_diagonal_is_nonnegative() {
        let (_, forms) = unit_ball_forms(13, 0.5);
        assert!(forms.diagonal().iter().all(|&d| d > 0.0));
    }

    #[test]
    fn embedding_probe_is_bounded_and_scale_free() {
        let mut worst_per_m = Vec::new();
        for m in [17, 25, 33] {
            let (mask, forms) = unit_ball_forms(m, 0.5);
            let mut rng = ChaCha8Rng::seed_from_u64(61);
            let mut worst = 0.0_f64;
            for _ in 0..50 {
                let u = random_bump_function(&mask, &mut rng);
                let ratio = forms.embedding_constant_probe(&u).unwrap();
                assert!(ratio.is_finite() && ratio > 0.0);
                worst = worst.max(ratio);
            }
            assert!(worst < 50.0, "m={m}: max embedding ratio {worst}");
            worst_per_m.push(worst);
        }
        let lo = worst_per_m.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = worst_per_m.iter().copied().fold(0.0, f64::max);
        assert!(hi / lo < 3.0, "embedding ratios drift across m: {worst_per_m:?}");

        let (mask, forms) = unit_ball_forms(13, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(67);
        let u = random_bump_function(&mask, &mut rng);
        let base = forms.embedding_constant_probe(&u).unwrap();
        let mut scaled = u.clone();
        for v in scaled.values_mut() {
            *v *= 7.0;
        }
        let got = forms.embedding_constant_probe(&scaled).unwrap();
        assert!((got - base).abs() <= 1e-12 * base);
        for s in [0.25, 0.75] {
            let forms_s = assemble(&mask, s).unwrap();
            assert!(forms_s.embedding_constant_probe(&u).unwrap().is_finite());
        }
        let zero = GridFunction::zeros(mask.clone());
        assert!(forms.embedding_constant_probe(&zero).is_err());
    }

    #[test]
    fn assembly_rejects_bad_order_and_foreign_functions() {
        let g = build_grid(3, 1.25, 13).unwrap();
        let mask = Arc::new(mask_ball(g, &[0.0; 3], 1.0).unwrap());
        assert!(assemble(&mask, 0.0).is_err());
        assert!(assemble(&mask, 1.0).is_err());
        assert!(assemble(&mask, -0.5).is_err());

        let forms = assemble(&mask, 0.5).unwrap();
        let other = Arc::new(mask_ball(g, &[0.0; 3], 0.8).unwrap());
        let foreign = sample(&other, |_| 1.0).unwrap();
        assert!(matches!(
            forms.dirichlet_energy(&foreign),
            Err(Error::MaskMismatch)
        ));
        assert!(matches!(
            forms.apply_operator(&foreign),
            Err(Error::MaskMismatch)
        ));
    }

    #[test]
    fn kernel_sum_cache_hit_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let g = build_grid(3, 1.25, 13).unwrap();
        let mask = Arc::new(mask_ball(g, &[0.0; 3], 1.0).unwrap());
        let fresh = assemble(&mask, 0.5).unwrap();
        let miss = assemble_with_cache(&mask, 0.5, dir.path()).unwrap();
        let hit = assemble_with_cache(&mask, 0.5, dir.path()).unwrap();
        for ((a, b), c) in fresh
            .kernel_row_sums()
            .iter()
            .zip(miss.kernel_row_sums())
            .zip(hit.kernel_row_sums())
        {
            assert_eq!(a.to_bits(), b.to_bits());
            assert_eq!(a.to_bits(), c.to_bits());
        }
        for (a, b) in fresh.kappa().iter().zip(hit.kappa()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        // A corrupt entry is recomputed, not trusted.
        let path = std::fs::read_dir(dir.path())
            .unwrap()
            .next()
            .unwrap()
            .unwrap()
            .path();
        std::fs::write(&path, b"garbage").unwrap();
        let recovered = assemble_with_cache(&mask, 0.5, dir.path()).unwrap();
        for (a, b) in fresh.kernel_row_sums().iter().zip(recovered.kernel_row_sums()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
