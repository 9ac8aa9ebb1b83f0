//! Quasi-1D exciton model: a hole fixed at a point defect and an electron in
//! the band profile of cubic inclusions embedded in hexagonal material.
//!
//! Positions along the stacking axis are given in bilayer units: bilayer `i`
//! spans `[(i − ½)·d, (i + ½)·d)`, so integers are bilayer centres and
//! half-integers are the planes between bilayers.
//!
//! Each contiguous cubic segment of width `w` carries a uniform field `F`
//! inside it and compensating fields of the opposite sense in hexagonal
//! flanks of width `w/2` on either side. The electrostatic potential therefore
//! falls from `+F·w/2` to `−F·w/2` across the segment and returns to zero
//! outside the flanks, so the net drop far away vanishes.

use std::io::Write;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// ħ²/(2 m₀) in eV·nm².
pub const HBAR2_OVER_2M0: f64 = 0.0380998;
/// e²/(4π ε₀) in eV·nm.
pub const COULOMB_EV_NM: f64 = 1.439964;
/// hc in eV·nm.
pub const HC_EV_NM: f64 = 1239.842;
/// |ψ|² at the hard walls above which the domain is considered too tight.
pub const WALL_DENSITY_LIMIT: f64 = 1e-6;
/// Minimum hexagonal padding between inclusion fields and the walls, nm.
pub const MIN_PADDING_NM: f64 = 10.0;

#[derive(Debug, Error)]
pub enum ExcitonError {
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
    #[error("domain too small: {0}")]
    DomainTooSmall(String),
    #[error("eigen-iteration did not converge after {0} iterations")]
    NonConvergence(usize),
    #[error("no defect positions given")]
    NoPositions,
    #[error("calibration failed: {0}")]
    Calibration(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Hexagonal,
    Cubic,
}

/// Finite stacking sequence embedded in hexagonal material. Entry `k` of
/// `bilayers` is bilayer index `first_index + k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackProfile {
    pub bilayers: Vec<Phase>,
    pub first_index: i64,
    pub bilayer_thickness_nm: f64,
}

impl Default for StackProfile {
    fn default() -> Self {
        Self::cubic_inclusion(3)
    }
}

impl StackProfile {
    pub const DEFAULT_BILAYER_NM: f64 = 0.259;

    /// Stack whose list is centred on bilayer index 0.
    pub fn centered(bilayers: Vec<Phase>, bilayer_thickness_nm: f64) -> Self {
        let first_index = -((bilayers.len() as i64 - 1) / 2);
        Self { bilayers, first_index, bilayer_thickness_nm }
    }

    /// `n` cubic bilayers centred on index 0.
    pub fn cubic_inclusion(n: usize) -> Self {
        Self::centered(vec![Phase::Cubic; n], Self::DEFAULT_BILAYER_NM)
    }

    /// Parses a string of `h`/`c` characters, centred on index 0.
    pub fn parse(s: &str, bilayer_thickness_nm: f64) -> Result<Self, ExcitonError> {
        let bilayers = s
            .chars()
            .filter(|c| !c.is_whitespace())
            .map(|c| match c.to_ascii_lowercase() {
                'h' => Ok(Phase::Hexagonal),
                'c' => Ok(Phase::Cubic),
                other => Err(ExcitonError::InvalidParams(format!("unknown phase {other:?}"))),
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self::centered(bilayers, bilayer_thickness_nm))
    }

    /// Two cubic bilayers, `gap` hexagonal bilayers, one cubic bilayer.
    pub fn two_plus_one(gap: usize) -> Self {
        let mut b = vec![Phase::Cubic; 2];
        b.extend(std::iter::repeat_n(Phase::Hexagonal, gap));
        b.push(Phase::Cubic);
        Self::centered(b, Self::DEFAULT_BILAYER_NM)
    }

    pub fn validate(&self) -> Result<(), ExcitonError> {
        if !(self.bilayer_thickness_nm > 0.0 && self.bilayer_thickness_nm.is_finite()) {
            return Err(ExcitonError::InvalidParams(format!(
                "bilayer thickness must be > 0, got {}",
                self.bilayer_thickness_nm
            )));
        }
        Ok(())
    }

    pub fn phase(&self, index: i64) -> Phase {
        let k = index - self.first_index;
        if k < 0 || k >= self.bilayers.len() as i64 {
            Phase::Hexagonal
        } else {
            self.bilayers[k as usize]
        }
    }

    pub fn is_all_hexagonal(&self) -> bool {
        self.bilayers.iter().all(|&p| p == Phase::Hexagonal)
    }

    /// Contiguous cubic runs as inclusive index ranges.
    pub fn cubic_segments(&self) -> Vec<(i64, i64)> {
        let mut segs: Vec<(i64, i64)> = Vec::new();
        for (k, &p) in self.bilayers.iter().enumerate() {
            if p != Phase::Cubic {
                continue;
            }
            let i = self.first_index + k as i64;
            match segs.last_mut() {
                Some(last) if last.1 == i - 1 => last.1 = i,
                _ => segs.push((i, i)),
            }
        }
        segs
    }

    /// Planes bounding each cubic segment, in bilayer units.
    pub fn interface_sites(&self) -> Vec<f64> {
        self.cubic_segments().iter().flat_map(|&(a, b)| [a as f64 - 0.5, b as f64 + 0.5]).collect()
    }

    /// Cubic fraction at a position: 1 inside cubic material, 0 in hexagonal,
    /// and the mean of both sides on a boundary plane.
    pub fn cubic_fraction(&self, position: f64) -> f64 {
        let ind = |i: i64| if self.phase(i) == Phase::Cubic { 1.0 } else { 0.0 };
        if (position - position.floor() - 0.5).abs() == 0.0 {
            let left = position.floor() as i64;
            0.5 * (ind(left) + ind(left + 1))
        } else {
            ind(position.round() as i64)
        }
    }

    /// The same stack moved by `k` bilayers.
    pub fn shifted(&self, k: i64) -> Self {
        Self { first_index: self.first_index + k, ..self.clone() }
    }

    /// Reflection `i → −i`.
    pub fn mirrored(&self) -> Self {
        let mut bilayers = self.bilayers.clone();
        bilayers.reverse();
        let last = self.first_index + self.bilayers.len() as i64 - 1;
        Self { bilayers, first_index: -last, bilayer_thickness_nm: self.bilayer_thickness_nm }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExcitonParams {
    /// Electron effective mass in units of m₀.
    pub m_eff: f64,
    pub eps_r: f64,
    pub coulomb_softening_nm: f64,
    /// ZPL energy of a defect in homogeneous hexagonal material.
    pub e0_ev: f64,
    /// Conduction-band offset cubic − hexagonal.
    pub d_e_cbm_ev: f64,
    /// Valence-band offset cubic − hexagonal.
    pub d_e_vbm_ev: f64,
    /// Field inside cubic segments, MV/cm. The sign sets its direction.
    pub interface_field_mv_cm: f64,
}

impl Default for ExcitonParams {
    fn default() -> Self {
        Self {
            m_eff: 0.2,
            eps_r: 9.5,
            coulomb_softening_nm: 0.3,
            e0_ev: HC_EV_NM / 1350.0,
            d_e_cbm_ev: -0.25,
            d_e_vbm_ev: 0.05,
            interface_field_mv_cm: 2.9,
        }
    }
}

impl ExcitonParams {
    pub fn validate(&self) -> Result<(), ExcitonError> {
        let pos = [
            ("m_eff", self.m_eff),
            ("eps_r", self.eps_r),
            ("coulomb_softening_nm", self.coulomb_softening_nm),
            ("e0_ev", self.e0_ev),
        ];
        for (name, v) in pos {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ExcitonError::InvalidParams(format!("{name} must be > 0, got {v}")));
            }
        }
        for (name, v) in [
            ("d_e_cbm_ev", self.d_e_cbm_ev),
            ("d_e_vbm_ev", self.d_e_vbm_ev),
            ("interface_field_mv_cm", self.interface_field_mv_cm),
        ] {
            if !v.is_finite() {
                return Err(ExcitonError::InvalidParams(format!("{name} must be finite")));
            }
        }
        Ok(())
    }

    /// Field in V/nm (1 MV/cm = 0.1 V/nm).
    pub fn field_v_per_nm(&self) -> f64 {
        0.1 * self.interface_field_mv_cm
    }
}

/// Uniform grid `[−half_width, half_width]` around a centre, hard walls one
/// step beyond the end points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub half_width_nm: f64,
    pub step_nm: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { half_width_nm: 20.0, step_nm: 0.02 }
    }
}

impl GridSpec {
    fn half_points(&self) -> Result<usize, ExcitonError> {
        if !(self.step_nm > 0.0 && self.half_width_nm > 0.0) || self.step_nm > self.half_width_nm {
            return Err(ExcitonError::InvalidParams(format!(
                "grid needs 0 < step ≤ half_width, got step {} and half_width {}",
                self.step_nm, self.half_width_nm
            )));
        }
        Ok((self.half_width_nm / self.step_nm).round() as usize)
    }
}

/// Band edges sampled as cell averages on a uniform grid. `offset_nm[i]` is
/// the position relative to `center_nm`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PotentialGrid {
    pub center_nm: f64,
    pub step_nm: f64,
    pub offset_nm: Vec<f64>,
    pub v_cbm: Vec<f64>,
    pub v_vbm: Vec<f64>,
}

impl PotentialGrid {
    pub fn len(&self) -> usize {
        self.offset_nm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offset_nm.is_empty()
    }

    pub fn z_nm(&self) -> Vec<f64> {
        self.offset_nm.iter().map(|o| self.center_nm + o).collect()
    }
}

/// Potential of one cubic segment relative to the domain centre, in nm.
struct Segment {
    /// Knots of the continuous piecewise-linear electrostatic term.
    knots: [(f64, f64); 4],
    lo: f64,
    hi: f64,
}

impl Segment {
    fn new(lo: f64, hi: f64, field: f64) -> Self {
        let w = hi - lo;
        let half = 0.5 * field * w;
        Self { knots: [(lo - 0.5 * w, 0.0), (lo, half), (hi, -half), (hi + 0.5 * w, 0.0)], lo, hi }
    }

    fn extent(&self) -> (f64, f64) {
        (self.knots[0].0, self.knots[3].0)
    }

    /// ∫ₐᵇ of the electrostatic term.
    fn field_integral(&self, a: f64, b: f64) -> f64 {
        self.knots
            .windows(2)
            .map(|k| {
                let ((p0, v0), (p1, v1)) = (k[0], k[1]);
                let (l, r) = (a.max(p0), b.min(p1));
                if r <= l {
                    return 0.0;
                }
                let at = |x: f64| v0 + (v1 - v0) * (x - p0) / (p1 - p0);
                0.5 * (at(l) + at(r)) * (r - l)
            })
            .sum()
    }

    /// Electrostatic term at a point.
    fn point(&self, x: f64) -> f64 {
        for k in self.knots.windows(2) {
            let ((p0, v0), (p1, v1)) = (k[0], k[1]);
            if x >= p0 && x <= p1 {
                return v0 + (v1 - v0) * (x - p0) / (p1 - p0);
            }
        }
        0.0
    }

    /// Length of `[a, b]` inside the cubic material.
    fn overlap(&self, a: f64, b: f64) -> f64 {
        (b.min(self.hi) - a.max(self.lo)).max(0.0)
    }
}

fn segments(stack: &StackProfile, params: &ExcitonParams, center_bilayers: f64) -> Vec<Segment> {
    let d = stack.bilayer_thickness_nm;
    let f = params.field_v_per_nm();
    stack
        .cubic_segments()
        .iter()
        .map(|&(a, b)| {
            let lo = (a as f64 - 0.5 - center_bilayers) * d;
            let hi = (b as f64 + 0.5 - center_bilayers) * d;
            Segment::new(lo, hi, f)
        })
        .collect()
}

/// Builds cell-averaged band-edge profiles on a grid centred at
/// `center_bilayers` (bilayer units).
///
/// Every inclusion together with its field flanks must either lie at least
/// [`MIN_PADDING_NM`] inside the walls or entirely outside the domain.
pub fn build_potential(
    stack: &StackProfile,
    params: &ExcitonParams,
    center_bilayers: f64,
    grid: &GridSpec,
) -> Result<PotentialGrid, ExcitonError> {
    stack.validate()?;
    params.validate()?;
    let m = grid.half_points()?;
    let h = grid.step_nm;
    let w = m as f64 * h;
    let segs = segments(stack, params, center_bilayers);
    for s in &segs {
        let (l, r) = s.extent();
        let outside = r <= -w - h || l >= w + h;
        let padded = l >= -w + MIN_PADDING_NM && r <= w - MIN_PADDING_NM;
        if !outside && !padded {
            return Err(ExcitonError::DomainTooSmall(format!(
                "inclusion field region [{l:.3}, {r:.3}] nm needs {MIN_PADDING_NM} nm padding inside ±{w:.3} nm"
            )));
        }
    }

    let n = 2 * m + 1;
    let offset_nm: Vec<f64> = (0..n).map(|i| (i as f64 - m as f64) * h).collect();
    let mut v_cbm = vec![0.0; n];
    let mut v_vbm = vec![0.0; n];
    for (i, &x) in offset_nm.iter().enumerate() {
        let (a, b) = (x - 0.5 * h, x + 0.5 * h);
        let (mut u, mut cub) = (0.0, 0.0);
        for s in &segs {
            u += s.field_integral(a, b);
            cub += s.overlap(a, b);
        }
        v_cbm[i] = (u + params.d_e_cbm_ev * cub) / h;
        v_vbm[i] = (u + params.d_e_vbm_ev * cub) / h;
    }
    Ok(PotentialGrid { center_nm: center_bilayers * stack.bilayer_thickness_nm, step_nm: h, offset_nm, v_cbm, v_vbm })
}

/// Valence-band edge at a point (bilayer units), taking the mean of both
/// one-sided limits on a boundary plane.
pub fn vbm_at(stack: &StackProfile, params: &ExcitonParams, position: f64) -> f64 {
    let u: f64 = segments(stack, params, position).iter().map(|s| s.point(0.0)).sum();
    u + params.d_e_vbm_ev * stack.cubic_fraction(position)
}

/// Tridiagonal electron Hamiltonian `(diagonal, off-diagonal)` in eV with the
/// hole at `hole_nm`.
pub fn hamiltonian(
    potential: &PotentialGrid,
    hole_nm: f64,
    params: &ExcitonParams,
) -> Result<(Vec<f64>, f64), ExcitonError> {
    params.validate()?;
    let h = potential.step_nm;
    let t = HBAR2_OVER_2M0 / (params.m_eff * h * h);
    let zh = hole_nm - potential.center_nm;
    let s2 = params.coulomb_softening_nm.powi(2);
    let k = COULOMB_EV_NM / params.eps_r;
    let diag = potential
        .offset_nm
        .iter()
        .zip(&potential.v_cbm)
        .map(|(&x, &v)| {
            let r = x - zh;
            v - k / (r * r + s2).sqrt() + 2.0 * t
        })
        .collect();
    Ok((diag, -t))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ElectronState {
    pub energy_ev: f64,
    /// Normalized so that `Σ ψᵢ²·Δz = 1`, positive at its maximum.
    pub psi: Vec<f64>,
    /// ⟨z⟩ in absolute coordinates, nm.
    pub mean_z_nm: f64,
    /// Larger of `ψ²` at the two end points.
    pub wall_density: f64,
    /// `wall_density` exceeds [`WALL_DENSITY_LIMIT`].
    pub boundary_warning: bool,
}

/// Number of eigenvalues below `x` of the symmetric tridiagonal matrix.
fn sturm_count(diag: &[f64], off: f64, x: f64) -> usize {
    let b2 = off * off;
    let mut count = 0;
    let mut q = 1.0;
    for (i, &a) in diag.iter().enumerate() {
        q = a - x - if i == 0 { 0.0 } else { b2 / q };
        if q == 0.0 {
            q = -f64::EPSILON * (a.abs() + off.abs()).max(f64::MIN_POSITIVE);
        }
        if q < 0.0 {
            count += 1;
        }
    }
    count
}

/// Lowest eigenvalue by Sturm bisection to full precision.
pub fn lowest_eigenvalue(diag: &[f64], off: f64) -> f64 {
    let r = 2.0 * off.abs();
    let mut lo = diag.iter().fold(f64::INFINITY, |m, &a| m.min(a)) - r;
    let mut hi = diag.iter().fold(f64::INFINITY, |m, &a| m.min(a)) + r;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if sturm_count(diag, off, mid) >= 1 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Solves `(T − σ)·x = b` for the tridiagonal `T` with constant off-diagonal.
fn solve_shifted(diag: &[f64], off: f64, sigma: f64, b: &[f64]) -> Vec<f64> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut y = vec![0.0; n];
    let mut piv = diag[0] - sigma;
    c[0] = off / piv;
    y[0] = b[0] / piv;
    for i in 1..n {
        piv = diag[i] - sigma - off * c[i - 1];
        c[i] = off / piv;
        y[i] = (b[i] - off * y[i - 1]) / piv;
    }
    for i in (0..n - 1).rev() {
        y[i] -= c[i] * y[i + 1];
    }
    y
}

/// Lowest eigenpair of the electron Hamiltonian with hard walls.
pub fn solve_electron(
    potential: &PotentialGrid,
    hole_nm: f64,
    params: &ExcitonParams,
) -> Result<ElectronState, ExcitonError> {
    const MAX_ITER: usize = 50;
    let (diag, off) = hamiltonian(potential, hole_nm, params)?;
    let n = diag.len();
    let energy = lowest_eigenvalue(&diag, off);
    // Shifting just below the lowest eigenvalue keeps T − σ positive definite,
    // so the unpivoted elimination is stable.
    let scale = diag.iter().fold(off.abs(), |m, &a| m.max(a.abs()));
    let sigma = energy - 1e-10 * scale;
    let mut x = vec![1.0 / (n as f64).sqrt(); n];
    let mut converged = false;
    for _ in 0..MAX_ITER {
        let mut y = solve_shifted(&diag, off, sigma, &x);
        let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        y.iter_mut().for_each(|v| *v /= norm);
        let delta = y.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        x = y;
        if delta < 1e-13 {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(ExcitonError::NonConvergence(MAX_ITER));
    }

    let h = potential.step_nm;
    let imax = x.iter().enumerate().fold(0, |m, (i, v)| if v.abs() > x[m].abs() { i } else { m });
    let sign = x[imax].signum();
    let norm = (x.iter().map(|v| v * v).sum::<f64>() * h).sqrt();
    let psi: Vec<f64> = x.iter().map(|v| sign * v / norm).collect();
    let mean_z_nm = potential.center_nm + psi.iter().zip(&potential.offset_nm).map(|(p, z)| p * p * z).sum::<f64>() * h;
    let wall_density = (psi[0] * psi[0]).max(psi[n - 1] * psi[n - 1]);
    Ok(ElectronState {
        energy_ev: energy,
        psi,
        mean_z_nm,
        wall_density,
        boundary_warning: wall_density > WALL_DENSITY_LIMIT,
    })
}

/// Dense symmetric eigensolve of the same Hamiltonian; the lowest eigenvalue.
pub fn ground_energy_dense(
    potential: &PotentialGrid,
    hole_nm: f64,
    params: &ExcitonParams,
) -> Result<f64, ExcitonError> {
    let (diag, off) = hamiltonian(potential, hole_nm, params)?;
    let n = diag.len();
    let m = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            diag[i]
        } else if i.abs_diff(j) == 1 {
            off
        } else {
            0.0
        }
    });
    Ok(m.symmetric_eigenvalues().iter().fold(f64::INFINITY, |a, &b| a.min(b)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ZplEntry {
    /// Defect position in bilayer units.
    pub defect_position: f64,
    pub zpl_nm: f64,
    /// Electron binding gained relative to the homogeneous reference,
    /// `E_ref − E_e` (positive means more strongly bound).
    pub binding_ev: f64,
    pub boundary_warning: bool,
}

fn reference_energy(params: &ExcitonParams, grid: &GridSpec) -> Result<f64, ExcitonError> {
    let flat = build_potential(&StackProfile::centered(vec![], 1.0), params, 0.0, grid)?;
    Ok(solve_electron(&flat, 0.0, params)?.energy_ev)
}

fn zpl_entry(
    stack: &StackProfile,
    position: f64,
    params: &ExcitonParams,
    grid: &GridSpec,
    e_ref: f64,
) -> Result<ZplEntry, ExcitonError> {
    let pot = build_potential(stack, params, position, grid)?;
    let st = solve_electron(&pot, pot.center_nm, params)?;
    let energy = params.e0_ev + vbm_at(stack, params, position) + (st.energy_ev - e_ref);
    if !(energy > 0.0) {
        return Err(ExcitonError::InvalidParams(format!("non-positive ZPL energy {energy} eV at position {position}")));
    }
    Ok(ZplEntry {
        defect_position: position,
        zpl_nm: HC_EV_NM / energy,
        binding_ev: e_ref - st.energy_ev,
        boundary_warning: st.boundary_warning,
    })
}

/// ZPL of a defect at `position` (bilayer units):
/// `E = E0 + V_vbm(z_d) + E_e(z_d) − E_e(ref)` where the reference is the
/// same defect in homogeneous hexagonal material. The domain is centred on
/// the defect.
pub fn zpl_for_defect(
    stack: &StackProfile,
    position: f64,
    params: &ExcitonParams,
    grid: &GridSpec,
) -> Result<ZplEntry, ExcitonError> {
    let e_ref = reference_energy(params, grid)?;
    zpl_entry(stack, position, params, grid, e_ref)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HistogramBin {
    /// Bin centre.
    pub lambda_nm: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Cluster {
    pub mean_nm: f64,
    pub min_nm: f64,
    pub max_nm: f64,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ZplSpectrum {
    pub entries: Vec<ZplEntry>,
    pub bin_nm: f64,
    pub histogram: Vec<HistogramBin>,
}

impl ZplSpectrum {
    pub const BIN_NM: f64 = 10.0;
    pub const CLUSTER_GAP_NM: f64 = 50.0;

    fn from_entries(entries: Vec<ZplEntry>) -> Self {
        let bin = Self::BIN_NM;
        let idx = |l: f64| (l / bin).floor() as i64;
        let lo = entries.iter().map(|e| idx(e.zpl_nm)).min().unwrap_or(0);
        let hi = entries.iter().map(|e| idx(e.zpl_nm)).max().unwrap_or(-1);
        let mut histogram: Vec<HistogramBin> =
            (lo..=hi).map(|k| HistogramBin { lambda_nm: (k as f64 + 0.5) * bin, count: 0 }).collect();
        for e in &entries {
            histogram[(idx(e.zpl_nm) - lo) as usize].count += 1;
        }
        Self { entries, bin_nm: bin, histogram }
    }

    /// `(min, max)` wavelength.
    pub fn span_nm(&self) -> (f64, f64) {
        self.entries.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), e| (a.min(e.zpl_nm), b.max(e.zpl_nm)))
    }

    /// Single-linkage clusters: sorted wavelengths split wherever
    /// neighbours differ by more than `gap_nm`.
    pub fn clusters(&self, gap_nm: f64) -> Vec<Cluster> {
        let mut l: Vec<f64> = self.entries.iter().map(|e| e.zpl_nm).collect();
        l.sort_by(f64::total_cmp);
        let mut out: Vec<Vec<f64>> = Vec::new();
        for v in l {
            match out.last_mut() {
                Some(c) if v - c[c.len() - 1] <= gap_nm => c.push(v),
                _ => out.push(vec![v]),
            }
        }
        out.into_iter()
            .map(|c| Cluster {
                mean_nm: c.iter().sum::<f64>() / c.len() as f64,
                min_nm: c[0],
                max_nm: c[c.len() - 1],
                size: c.len(),
            })
            .collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), ExcitonError> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["defect_index", "zpl_nm", "binding_ev"])?;
        for e in &self.entries {
            wr.write_record(&[
                e.defect_position.to_string(),
                format!("{:.12e}", e.zpl_nm),
                format!("{:.12e}", e.binding_ev),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn write_histogram_csv<W: Write>(&self, w: W) -> Result<(), ExcitonError> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["lambda_nm", "count"])?;
        for b in &self.histogram {
            wr.write_record(&[b.lambda_nm.to_string(), b.count.to_string()])?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// ZPLs for a set of defect positions, solved in parallel; entries keep the
/// input order.
pub fn zpl_distribution(
    stack: &StackProfile,
    positions: &[f64],
    params: &ExcitonParams,
    grid: &GridSpec,
) -> Result<ZplSpectrum, ExcitonError> {
    if positions.is_empty() {
        return Err(ExcitonError::NoPositions);
    }
    let e_ref = reference_energy(params, grid)?;
    let entries =
        positions.par_iter().map(|&p| zpl_entry(stack, p, params, grid, e_ref)).collect::<Result<Vec<_>, _>>()?;
    Ok(ZplSpectrum::from_entries(entries))
}

/// Positions from bilayer `lo` to `hi` inclusive with `per_bilayer` samples
/// per bilayer, boundary planes included.
pub fn uniform_positions(lo: i64, hi: i64, per_bilayer: u32) -> Vec<f64> {
    let per = per_bilayer.max(1) as i64;
    (0..=(hi - lo).max(0) * per).map(|k| lo as f64 + k as f64 / per as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Calibration {
    pub params: ExcitonParams,
    pub targets_nm: [f64; 2],
    /// Interface ZPLs after calibration, shorter first.
    pub cluster_nm: [f64; 2],
    pub rms_error_nm: f64,
    /// The optimum of `d_e_cbm_ev` lies at an edge of the search bracket.
    pub at_bracket_edge: bool,
}

fn golden_section(mut a: f64, mut b: f64, tol: f64, f: impl Fn(f64) -> f64) -> f64 {
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > tol {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Tunes `(d_e_cbm_ev, e0_ev)` so the two interface sites of `stack` emit at
/// `targets_nm` (shorter wavelength first), minimizing the squared wavelength
/// error. For each trial band offset the best `E0` is found in `[0.3, 3]` eV;
/// the higher-energy interface is paired with the shorter target.
pub fn calibrate(
    stack: &StackProfile,
    params: &ExcitonParams,
    grid: &GridSpec,
    targets_nm: [f64; 2],
    d_e_cbm_bracket: (f64, f64),
) -> Result<Calibration, ExcitonError> {
    let sites = stack.interface_sites();
    if sites.len() != 2 {
        return Err(ExcitonError::Calibration(format!(
            "needs exactly one cubic segment (two interfaces), found {} interfaces",
            sites.len()
        )));
    }
    let [t_short, t_long] = targets_nm;
    // Energy shifts relative to E0, sorted high to low.
    let shifts = |dec: f64| -> Result<[f64; 2], ExcitonError> {
        let p = ExcitonParams { d_e_cbm_ev: dec, e0_ev: 1.0, ..*params };
        let s = zpl_distribution(stack, &sites, &p, grid)?;
        let mut e: Vec<f64> = s.entries.iter().map(|x| HC_EV_NM / x.zpl_nm - 1.0).collect();
        e.sort_by(|a, b| b.total_cmp(a));
        Ok([e[0], e[1]])
    };
    let cost_e0 = |s: [f64; 2], e0: f64| {
        let l = |x: f64| if x > 0.0 { HC_EV_NM / x } else { 1e9 };
        (l(e0 + s[0]) - t_short).powi(2) + (l(e0 + s[1]) - t_long).powi(2)
    };
    let best_e0 = |s: [f64; 2]| golden_section(0.3, 3.0, 1e-12, |e0| cost_e0(s, e0));
    let cost = |dec: f64| match shifts(dec) {
        Ok(s) => cost_e0(s, best_e0(s)),
        Err(_) => f64::INFINITY,
    };
    // The cost is not unimodal in the band offset: scan coarsely, then refine
    // around the best grid point.
    let (a, b) = d_e_cbm_bracket;
    const SCAN: usize = 20;
    let grid_pts: Vec<f64> = (0..=SCAN).map(|i| a + (b - a) * i as f64 / SCAN as f64).collect();
    let costs: Vec<f64> = grid_pts.iter().map(|&x| cost(x)).collect();
    let best = (0..=SCAN).fold(0, |m, i| if costs[i] < costs[m] { i } else { m });
    let lo = grid_pts[best.saturating_sub(1)];
    let hi = grid_pts[(best + 1).min(SCAN)];
    let dec = golden_section(lo, hi, 1e-6, cost);
    let s = shifts(dec)?;
    let e0 = best_e0(s);
    let cluster_nm = [HC_EV_NM / (e0 + s[0]), HC_EV_NM / (e0 + s[1])];
    let rms_error_nm = (0.5 * cost_e0(s, e0)).sqrt();
    let edge = 1e-4 * (b - a).abs();
    Ok(Calibration {
        params: ExcitonParams { d_e_cbm_ev: dec, e0_ev: e0, ..*params },
        targets_nm,
        cluster_nm,
        rms_error_nm,
        at_bracket_edge: (dec - a).abs() < edge || (b - dec).abs() < edge,
    })
}
