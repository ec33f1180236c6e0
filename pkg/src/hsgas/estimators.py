"""Statistical estimators built on ensembles of hard-sphere runs.

The collector half of this module rides along with the event loop (one
collector per replica, fed snapshots and collision events) and produces small
picklable tables.  The analysis half turns lists of per-replica tables into:

* one-particle phase-space densities from weighted empirical measures, on a
  radial-shell x speed grid and on an (x, v_x) marginal grid,
* near-contact pair statistics, estimated two ways (occupancy of thin gap
  shells extrapolated to zero gap, and collision-flux counting), and the
  collision-sphere correction term they induce,
* a Monte Carlo hard-sphere collision integral for arbitrary velocity
  densities,
* finite-difference free-streaming residual fields with bootstrap errors,
* a velocity-factorization defect for well-separated pairs,
* coarse spatial field profiles and nested-ball density probes.

Weighted counting convention: a particle contributes weight 1/N unless it is
exactly in contact (center distance exactly equal to the diameter, or wall
clearance exactly zero), in which case it contributes nothing.  Those
configurations have measure zero at sampled instants, so separate shell-based
occupancy diagnostics quantify the near-contact deficit at finite width.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field

import numpy as np

from . import stats
from .core import DomainSpec, ModelParams, SimulationError, SystemState
from .dynamics import PAIR


class EstimatorError(SimulationError):
    pass


class ContinuationError(EstimatorError):
    """Raised when a requested split needs bins that carry no statistics."""


class InsufficientSamplesError(EstimatorError):
    """Raised when a time-derivative diagnostic has fewer than three frames."""


# ---------------------------------------------------------------------------
# configuration and per-replica collection


@dataclass(frozen=True)
class EstimatorConfig:
    """Binning and probe layout shared by every replica of an ensemble."""

    n_radial: int = 24
    n_speed: int = 32
    speed_max_factor: float = 4.5      # speed axis covers [0, factor*sqrt(T)]
    n_x: int = 24
    n_vx: int = 32
    vx_max_factor: float = 4.0
    n_contact_speed_bins: int = 8      # equal Maxwell mass below speed_max
    n_contact_sub_shells: int = 4
    shell_width_factor: float = 0.1    # gap shell width as a fraction of d
    afc_speed_bins: int = 5
    afc_min_separation: float = 3.0    # pair separation cut, units of d
    n_field_shells: int = 12
    vanhove_radius_factors: tuple = (0.25, 0.4, 0.55, 0.7, 0.85, 1.0)
    vanhove_offset_factor: float = 0.0  # probe center offset, units of domain radius
    collect_time_resolved: bool = True
    collect_speed_samples: bool = True
    pair_scan_block: int = 256


def _searchsorted_bins(edges: np.ndarray, x: np.ndarray):
    """Bin indices for in-range values plus a boolean in-range mask."""
    idx = np.searchsorted(edges, x, side="right") - 1
    ok = (x >= edges[0]) & (x < edges[-1])
    return np.clip(idx, 0, len(edges) - 2), ok


def phase_point_weights(state: SystemState, params: ModelParams, domain: DomainSpec,
                        min_center_dist: np.ndarray | None = None) -> np.ndarray:
    """Per-particle counting weights: 1/N, zeroed for exact contacts.

    `min_center_dist` (distance to the nearest other center, per particle) can
    be passed in when the caller has already done the pair scan.
    """
    pos = state.pos
    n = len(pos)
    if min_center_dist is None:
        min_center_dist = _pair_scan(pos, params.d, 0.0)[0]
    r = np.sqrt(np.einsum("ij,ij->i", pos, pos))
    blocked = (min_center_dist <= params.d) | (r >= domain.center_radius(params.d))
    w = np.full(n, 1.0 / n)
    w[blocked] = 0.0
    return w


def _pair_scan(pos: np.ndarray, d: float, delta: float, block: int = 256):
    """One pass over all pairs.

    Returns (min_dist, ii, jj, gaps): the distance from each particle to its
    nearest neighbor, plus every unordered pair (i < j) whose surface gap is
    at most `delta` with the corresponding gaps.
    """
    n = len(pos)
    min_d2 = np.full(n, np.inf)
    thresh2 = (d + delta) ** 2
    cols = np.arange(n)
    out_i, out_j, out_g = [], [], []
    for a0 in range(0, n, block):
        a1 = min(a0 + block, n)
        diff = pos[a0:a1, None, :] - pos[None, :, :]
        d2 = np.einsum("ijk,ijk->ij", diff, diff)
        rows = np.arange(a0, a1)
        d2[rows - a0, rows] = np.inf
        np.minimum(min_d2[a0:a1], d2.min(axis=1), out=min_d2[a0:a1])
        mask = (d2 <= thresh2) & (cols[None, :] > rows[:, None])
        ri, cj = np.nonzero(mask)
        if len(ri):
            out_i.append(rows[ri])
            out_j.append(cj)
            out_g.append(np.sqrt(d2[ri, cj]) - d)
    if out_i:
        ii = np.concatenate(out_i)
        jj = np.concatenate(out_j)
        gg = np.maximum(np.concatenate(out_g), 0.0)
    else:
        ii = jj = np.empty(0, dtype=np.int64)
        gg = np.empty(0)
    return np.sqrt(min_d2), ii, jj, gg


class NullCollector:
    """Collector that records nothing (rate-only ensembles)."""

    def begin(self, state, t_offset):
        pass

    def on_event(self, t, kind, i, j, vi_pre, vj_pre, vi_post, vj_post, ri, rj):
        pass

    def on_sample(self, state):
        pass

    def partial(self, horizon):
        return {}


class EstimatorCollector:
    """Per-replica observer accumulating every estimator table in one pass.

    Snapshot work is dominated by a blocked all-pairs distance scan, which is
    shared between the counting weights, the near-contact shell statistics,
    and the interacting-fraction diagnostic.
    """

    def __init__(self, config: EstimatorConfig, params: ModelParams,
                 domain: DomainSpec, rng: np.random.Generator):
        self.config = config
        self.params = params
        self.domain = domain
        self.rng = rng
        T, d = params.T, params.d
        R = domain.radius
        c = config
        s_max = c.speed_max_factor * math.sqrt(T)
        self.edges_r = np.linspace(0.0, R, c.n_radial + 1)
        self.edges_s = np.linspace(0.0, s_max, c.n_speed + 1)
        self.edges_x = np.linspace(-R, R, c.n_x + 1)
        vx_max = c.vx_max_factor * math.sqrt(T)
        self.edges_vx = np.linspace(-vx_max, vx_max, c.n_vx + 1)
        self.contact_edges = stats.equal_mass_speed_edges(c.n_contact_speed_bins, T, s_max)
        self._contact_edges_list = self.contact_edges.tolist()
        self.shell_width = c.shell_width_factor * d
        self.sub_edges = np.linspace(0.0, self.shell_width, c.n_contact_sub_shells + 1)
        self.afc_edges = stats.equal_mass_speed_edges(c.afc_speed_bins, T, s_max)
        self.field_edges = np.linspace(0.0, R, c.n_field_shells + 1)
        self.vh_radii = np.array([f * R for f in c.vanhove_radius_factors])
        self.vh_center = np.array([0.0, 0.0, c.vanhove_offset_factor * R])

        self.W = np.zeros((c.n_radial, c.n_speed))
        self.f1_overflow = 0.0
        self.coarse_mass = np.zeros(c.n_contact_speed_bins)
        self.snapshots = 0
        self.shell_counts = np.zeros((c.n_contact_speed_bins, c.n_contact_sub_shells))
        self.shell_overflow = 0
        self.flux_counts = np.zeros(c.n_contact_speed_bins)
        self.flux_overflow = 0
        self.field_counts = np.zeros(c.n_field_shells)
        self.vh_counts = np.zeros(len(self.vh_radii))
        self.afc_joint = np.zeros((c.afc_speed_bins, c.afc_speed_bins))
        self.xv_frames: list[np.ndarray] = []
        self.xv_times: list[float] = []
        self.xv_overflow = 0.0
        # per-interval event-source frames on the same (x, v_x) grid; an
        # interval opens at each snapshot and closes at the next one
        self.wall_frames: list[np.ndarray] = []
        self.pair_frames: list[np.ndarray] = []
        self._cur_wall: np.ndarray | None = None
        self._cur_pair: np.ndarray | None = None
        self._edges_x_list = self.edges_x.tolist()
        self._edges_vx_list = self.edges_vx.tolist()
        self.free_mass_sum = 0.0
        self.speeds_first: np.ndarray | None = None
        self.speeds_last: np.ndarray | None = None
        self.min_gap_over_d = np.inf
        self.min_wall_clearance_over_d = np.inf
        self.ke_sum = 0.0
        self.t_offset = 0.0

    def begin(self, state: SystemState, t_offset: float):
        self.t_offset = t_offset

    def _deposit_source(self, frame: np.ndarray, x: float, vx: float, weight: float):
        ex, ev = self._edges_x_list, self._edges_vx_list
        if not (ev[0] <= vx < ev[-1]):
            return
        ix = min(bisect.bisect_right(ex, x) - 1, len(ex) - 2)
        iv = bisect.bisect_right(ev, vx) - 1
        frame[ix, iv] += weight

    def on_event(self, t, kind, i, j, vi_pre, vj_pre, vi_post, vj_post, ri, rj):
        inv_n = 1.0 / self.params.N
        if kind == PAIR:
            for v in (vi_pre, vj_pre):
                s = math.sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2])
                b = bisect.bisect_right(self._contact_edges_list, s) - 1
                if 0 <= b < len(self.flux_counts):
                    self.flux_counts[b] += 1.0
                else:
                    self.flux_overflow += 1
            if self._cur_pair is not None:
                for pos, v_pre, v_post in ((ri, vi_pre, vi_post), (rj, vj_pre, vj_post)):
                    self._deposit_source(self._cur_pair, pos[0], v_pre[0], -inv_n)
                    self._deposit_source(self._cur_pair, pos[0], v_post[0], inv_n)
        elif self._cur_wall is not None:
            self._deposit_source(self._cur_wall, ri[0], vi_pre[0], -inv_n)
            self._deposit_source(self._cur_wall, ri[0], vi_post[0], inv_n)

    def on_sample(self, state: SystemState):
        params, domain, cfg = self.params, self.domain, self.config
        pos, vel = state.pos, state.vel
        n = len(pos)
        d = params.d
        r = np.sqrt(np.einsum("ij,ij->i", pos, pos))
        speeds = np.sqrt(np.einsum("ij,ij->i", vel, vel))
        min_dist, ii, jj, gaps = _pair_scan(pos, d, self.shell_width, cfg.pair_scan_block)
        r_c = domain.center_radius(d)

        w = np.full(n, 1.0 / n)
        w[(min_dist <= d) | (r >= r_c)] = 0.0

        ir, _ = _searchsorted_bins(self.edges_r, r)
        is_, s_ok = _searchsorted_bins(self.edges_s, speeds)
        np.add.at(self.W, (ir[s_ok], is_[s_ok]), w[s_ok])
        self.f1_overflow += float(w[~s_ok].sum())
        ic, c_ok = _searchsorted_bins(self.contact_edges, speeds)
        np.add.at(self.coarse_mass, ic[c_ok], w[c_ok])

        if len(ii):
            sub, _ = _searchsorted_bins(self.sub_edges, gaps)
            for side in (ii, jj):
                sb, ok = _searchsorted_bins(self.contact_edges, speeds[side])
                np.add.at(self.shell_counts, (sb[ok], sub[ok]), 1.0)
                self.shell_overflow += int(np.count_nonzero(~ok))

        interacting = (min_dist <= d + self.shell_width) | (r >= r_c - self.shell_width)
        self.free_mass_sum += 1.0 - np.count_nonzero(interacting) / n

        if cfg.collect_time_resolved:
            frame = np.zeros((cfg.n_x, cfg.n_vx))
            ix, _ = _searchsorted_bins(self.edges_x, pos[:, 0])
            iv, v_ok = _searchsorted_bins(self.edges_vx, vel[:, 0])
            np.add.at(frame, (ix[v_ok], iv[v_ok]), w[v_ok])
            self.xv_overflow += float(w[~v_ok].sum())
            self.xv_frames.append(frame)
            self.xv_times.append(state.time - self.t_offset)
            if self._cur_wall is not None:
                self.wall_frames.append(self._cur_wall)
                self.pair_frames.append(self._cur_pair)
            self._cur_wall = np.zeros((cfg.n_x, cfg.n_vx))
            self._cur_pair = np.zeros((cfg.n_x, cfg.n_vx))

        self.field_counts += np.histogram(r, self.field_edges)[0]
        dist_probe = np.sqrt(np.einsum("ij,ij->i", pos - self.vh_center, pos - self.vh_center))
        for k, radius in enumerate(self.vh_radii):
            self.vh_counts[k] += np.count_nonzero(dist_probe <= radius)

        perm = self.rng.permutation(n)
        if n % 2:
            perm = perm[:-1]
        a, b = perm[0::2], perm[1::2]
        sep = np.sqrt(np.einsum("ij,ij->i", pos[a] - pos[b], pos[a] - pos[b]))
        keep = sep > cfg.afc_min_separation * d
        if np.any(keep):
            ba, ok_a = _searchsorted_bins(self.afc_edges, speeds[a[keep]])
            bb, ok_b = _searchsorted_bins(self.afc_edges, speeds[b[keep]])
            both = ok_a & ok_b
            np.add.at(self.afc_joint, (ba[both], bb[both]), 1.0)

        if cfg.collect_speed_samples:
            if self.speeds_first is None:
                self.speeds_first = speeds.copy()
            self.speeds_last = speeds

        self.min_gap_over_d = min(self.min_gap_over_d, float(min_dist.min() - d) / d)
        self.min_wall_clearance_over_d = min(
            self.min_wall_clearance_over_d, float(r_c - r.max()) / d)
        self.ke_sum += 0.5 * float(np.sum(speeds**2))
        self.snapshots += 1

    def partial(self, horizon: float) -> dict:
        out = {
            "snapshots": self.snapshots,
            "meas_time": horizon,
            "f1_rs": self.W,
            "f1_overflow": self.f1_overflow,
            "f1_coarse": self.coarse_mass,
            "shell_counts": self.shell_counts,
            "shell_overflow": self.shell_overflow,
            "flux_counts": self.flux_counts,
            "flux_overflow": self.flux_overflow,
            "field_counts": self.field_counts,
            "vanhove_counts": self.vh_counts,
            "afc_joint": self.afc_joint,
            "free_mass": self.free_mass_sum / max(self.snapshots, 1),
            "min_gap_over_d": self.min_gap_over_d,
            "min_wall_clearance_over_d": self.min_wall_clearance_over_d,
            "ke_per_particle": self.ke_sum / max(self.snapshots * self.params.N, 1),
        }
        if self.config.collect_time_resolved and self.xv_frames:
            out["xv"] = np.stack(self.xv_frames)
            out["xv_times"] = np.array(self.xv_times)
            out["xv_overflow"] = self.xv_overflow
            if self.wall_frames:
                out["wall_source"] = np.stack(self.wall_frames)
                out["pair_source"] = np.stack(self.pair_frames)
        if self.config.collect_speed_samples and self.speeds_first is not None:
            out["speeds_first"] = self.speeds_first
            out["speeds_last"] = self.speeds_last
        return out


@dataclass(frozen=True)
class CollectorFactory:
    """Picklable factory handed to ensemble runs; one collector per replica."""

    config: EstimatorConfig = field(default_factory=EstimatorConfig)
    enabled: bool = True

    def __call__(self, params, domain, rng):
        if not self.enabled:
            return NullCollector()
        return EstimatorCollector(self.config, params, domain, rng)


def collector_factory(config: EstimatorConfig | None = None, enabled: bool = True):
    return CollectorFactory(config if config is not None else EstimatorConfig(), enabled)


# ---------------------------------------------------------------------------
# one-particle densities


@dataclass
class PhaseDensity:
    """Binned one-particle density with replica-level errors.

    `mass` is the mean per-snapshot weighted occupancy of each cell; `density`
    divides by the cell phase-space volume (a 6-d volume for radial x speed
    cells, an area element for the (x, v_x) marginal)."""

    kind: str
    edges_pos: np.ndarray
    edges_vel: np.ndarray
    mass: np.ndarray
    mass_sem: np.ndarray
    density: np.ndarray
    density_sem: np.ndarray
    cell_volume: np.ndarray
    overflow_fraction: float
    replicas: int

    def total_mass(self) -> float:
        return float(self.mass.sum() + self.overflow_fraction)


def _shell_volumes(edges: np.ndarray) -> np.ndarray:
    return 4.0 * math.pi / 3.0 * np.diff(edges**3)


def _require_snapshots(partials: list) -> list:
    usable = [p for p in partials if p.get("snapshots", 0) > 0]
    if not usable:
        raise InsufficientSamplesError("no snapshots were collected")
    return usable


def build_phase_density(partials: list, edges_pos: np.ndarray, edges_vel: np.ndarray,
                        kind: str = "radial_speed") -> PhaseDensity:
    """Assemble a PhaseDensity from per-replica tables.

    kind "radial_speed" expects tables under key "f1_rs" and uses 6-d cell
    volumes (position shell x velocity shell); kind "x_vx" expects "xv"
    stacks, averages them over time, and uses dx*dv cell areas.
    """
    usable = _require_snapshots(partials)
    if kind == "radial_speed":
        tables = [p["f1_rs"] / p["snapshots"] for p in usable]
        over = [p["f1_overflow"] / p["snapshots"] for p in usable]
        vol = _shell_volumes(edges_pos)[:, None] * _shell_volumes(edges_vel)[None, :]
    elif kind == "x_vx":
        tables = [p["xv"].mean(axis=0) for p in usable if "xv" in p]
        if not tables:
            raise InsufficientSamplesError("no time-resolved frames collected")
        over = [p.get("xv_overflow", 0.0) / p["snapshots"] for p in usable if "xv" in p]
        vol = np.diff(edges_pos)[:, None] * np.diff(edges_vel)[None, :]
    else:
        raise ValueError(f"unknown density kind {kind!r}")
    mean, sem = stats.replica_mean_sem(tables)
    return PhaseDensity(
        kind=kind,
        edges_pos=edges_pos,
        edges_vel=edges_vel,
        mass=mean,
        mass_sem=sem,
        density=mean / vol,
        density_sem=sem / vol,
        cell_volume=vol,
        overflow_fraction=float(np.mean(over)),
        replicas=len(tables),
    )


# ---------------------------------------------------------------------------
# near-contact statistics and the collision-sphere correction


@dataclass
class ContactEstimate:
    """Ordered-pair density at contact per speed bin, two independent routes.

    Values are densities of ordered pairs per (d^3x1 d^3v1 d^3x12) with the
    partner velocity integrated out, position-averaged over the accessible
    ball.  `shell_value` extrapolates thin gap-shell occupancy linearly to
    zero gap; `flux_value` converts collision participation rates through the
    Maxwell-averaged relative-speed factor."""

    speed_edges: np.ndarray
    shell_value: np.ndarray
    shell_sigma: np.ndarray
    flux_value: np.ndarray
    flux_sigma: np.ndarray
    sub_gap_centers: np.ndarray
    sub_density: np.ndarray
    bin_counts: np.ndarray
    valid: np.ndarray
    max_abs_z: float


def _shell_sub_volumes(d: float, sub_edges: np.ndarray) -> np.ndarray:
    return 4.0 * math.pi / 3.0 * np.diff((d + sub_edges) ** 3)


def _vel_shell_volumes(edges: np.ndarray) -> np.ndarray:
    return 4.0 * math.pi / 3.0 * np.diff(edges**3)


def _contact_shell_statistic(edges_sub_centers, sub_vols, vel_vols, v_avail):
    def statistic(tables):
        counts = np.sum([t["shell_counts"] for t in tables], axis=0)
        snaps = sum(t["snapshots"] for t in tables)
        dens = counts / (snaps * sub_vols[None, :] * vel_vols[:, None] * v_avail)
        # unweighted straight-line fit in the gap coordinate, intercept at 0
        x = edges_sub_centers
        xbar = x.mean()
        denom = np.sum((x - xbar) ** 2)
        slope = (dens * (x - xbar)[None, :]).sum(axis=1) / denom
        return dens.mean(axis=1) - slope * xbar

    return statistic


def _contact_flux_statistic(vel_vols, v_avail, d, m1_bar):
    def statistic(tables):
        counts = np.sum([t["flux_counts"] for t in tables], axis=0)
        time = sum(t["meas_time"] for t in tables)
        rate = counts / time
        return rate / (math.pi * d**2 * m1_bar * vel_vols * v_avail)

    return statistic


def contact_statistics(partials: list, params: ModelParams, domain: DomainSpec,
                       config: EstimatorConfig, rng: np.random.Generator | None = None,
                       n_boot: int = 300, min_counts: int = 25) -> ContactEstimate:
    usable = _require_snapshots(partials)
    d, T = params.d, params.T
    edges = stats.equal_mass_speed_edges(config.n_contact_speed_bins, T,
                                         config.speed_max_factor * math.sqrt(T))
    sub_edges = np.linspace(0.0, config.shell_width_factor * d,
                            config.n_contact_sub_shells + 1)
    sub_centers = 0.5 * (sub_edges[:-1] + sub_edges[1:])
    sub_vols = _shell_sub_volumes(d, sub_edges)
    vel_vols = _vel_shell_volumes(edges)
    v_avail = domain.center_radius(d) ** 3 * 4.0 * math.pi / 3.0
    m1_bar = stats.binned_mean_relative_speed(edges, T)

    shell_stat = _contact_shell_statistic(sub_centers, sub_vols, vel_vols, v_avail)
    flux_stat = _contact_flux_statistic(vel_vols, v_avail, d, m1_bar)
    if rng is None:
        rng = np.random.default_rng(0)
    shell_value, shell_sigma = stats.bootstrap_over_replicas(usable, shell_stat, n_boot, rng)
    flux_value, flux_sigma = stats.bootstrap_over_replicas(usable, flux_stat, n_boot, rng)

    counts = np.sum([p["shell_counts"] for p in usable], axis=0)
    snaps = sum(p["snapshots"] for p in usable)
    dens = counts / (snaps * sub_vols[None, :] * vel_vols[:, None] * v_avail)
    bin_counts = counts.sum(axis=1)
    fcounts = np.sum([p["flux_counts"] for p in usable], axis=0)
    valid = (bin_counts >= min_counts) & (fcounts >= min_counts)

    with np.errstate(divide="ignore", invalid="ignore"):
        z = (shell_value - flux_value) / np.sqrt(shell_sigma**2 + flux_sigma**2)
    max_abs_z = float(np.max(np.abs(z[valid]))) if np.any(valid) else math.inf

    return ContactEstimate(
        speed_edges=edges,
        shell_value=shell_value,
        shell_sigma=shell_sigma,
        flux_value=flux_value,
        flux_sigma=flux_sigma,
        sub_gap_centers=sub_centers,
        sub_density=dens,
        bin_counts=bin_counts,
        valid=valid,
        max_abs_z=max_abs_z,
    )


@dataclass
class ContinuationSplit:
    """Decomposition of the measured one-particle density per speed bin into
    a pointwise part plus the collision-sphere correction term.

    All rows are position-averaged velocity-space densities in the same
    normalization as PhaseDensity (total mass 1).  `overlap_density` uses the
    shell-extrapolated contact value; `overlap_flux` is the flux-route
    cross-check.  `majorization_ratios` divide the correction by
    (N-1) d^3 / V times the pointwise density."""

    speed_edges: np.ndarray
    f1_density: np.ndarray
    f1_sigma: np.ndarray
    overlap_density: np.ndarray
    overlap_sigma: np.ndarray
    overlap_flux: np.ndarray
    overlap_flux_sigma: np.ndarray
    full_density: np.ndarray
    valid: np.ndarray
    majorization_ratios: np.ndarray
    majorization_constant: float
    contact: ContactEstimate


def continuation_split(partials: list, contact: ContactEstimate, params: ModelParams,
                       domain: DomainSpec, config: EstimatorConfig,
                       on_empty: str = "raise") -> ContinuationSplit:
    """Split the coarse-binned density into pointwise and correction parts.

    on_empty: "raise" rejects the request if any speed bin carries no
    statistics; "mask" marks such bins invalid and continues.
    """
    if on_empty not in ("raise", "mask"):
        raise ValueError(f"on_empty must be 'raise' or 'mask', got {on_empty!r}")
    usable = _require_snapshots(partials)
    N, d = params.N, params.d
    vel_vols = _vel_shell_volumes(contact.speed_edges)
    v_avail = domain.center_radius(d) ** 3 * 4.0 * math.pi / 3.0
    tables = [p["f1_coarse"] / p["snapshots"] for p in usable]
    mass, mass_sem = stats.replica_mean_sem(tables)
    f1 = mass / (vel_vols * v_avail)
    f1_sigma = mass_sem / (vel_vols * v_avail)

    ball = 4.0 * math.pi / 3.0 * d**3
    overlap = ball * contact.shell_value / N
    overlap_sigma = ball * contact.shell_sigma / N
    overlap_flux = ball * contact.flux_value / N
    overlap_flux_sigma = ball * contact.flux_sigma / N

    empty = (mass <= 0.0) | ~contact.valid
    if np.any(empty) and on_empty == "raise":
        raise ContinuationError(
            f"speed bins {np.nonzero(empty)[0].tolist()} carry no statistics; "
            "use on_empty='mask' to proceed with partial coverage")
    valid = ~empty

    scale = (N - 1) * d**3 / params.volume
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = overlap / (scale * f1)
    ratios = np.where(valid, ratios, np.nan)
    k_const = float(np.nanmax(ratios)) if np.any(valid) else math.nan

    return ContinuationSplit(
        speed_edges=contact.speed_edges,
        f1_density=f1,
        f1_sigma=f1_sigma,
        overlap_density=overlap,
        overlap_sigma=overlap_sigma,
        overlap_flux=overlap_flux,
        overlap_flux_sigma=overlap_flux_sigma,
        full_density=f1 + overlap,
        valid=valid,
        majorization_ratios=ratios,
        majorization_constant=k_const,
        contact=contact,
    )


# ---------------------------------------------------------------------------
# collision integral


def maxwellian_velocity_density(T: float, prefactor: float = 1.0):
    """Vectorized Maxwell velocity density callable, scaled by `prefactor`."""

    def f(v: np.ndarray) -> np.ndarray:
        return prefactor * stats.maxwell_velocity_pdf(v, T)

    return f


def isotropic_speed_interpolant(density: PhaseDensity):
    """Velocity-density callable from a measured radial x speed table.

    Averages the density over position shells weighted by shell volume, then
    interpolates linearly in speed (zero outside the covered range)."""
    if density.kind != "radial_speed":
        raise ValueError("need a radial_speed density")
    shell_w = _shell_volumes(density.edges_pos)
    avg = np.average(density.density, axis=0, weights=shell_w)
    centers = 0.5 * (density.edges_vel[:-1] + density.edges_vel[1:])
    # convert per-(d^3x d^3v) density to per-d^3v by multiplying the position
    # volume back in: the position average above already is the per-d^3v
    # profile divided by total position volume, so rescale.
    vol_pos = shell_w.sum()
    profile = avg * vol_pos

    def f(v: np.ndarray) -> np.ndarray:
        s = np.sqrt(np.einsum("...i,...i->...", v, v))
        return np.interp(s, centers, profile, left=profile[0], right=0.0)

    return f


def boltzmann_collision_integral(f, params: ModelParams, velocities: np.ndarray,
                                 n_samples: int = 200_000,
                                 rng: np.random.Generator | None = None,
                                 T_ref: float | None = None):
    """Monte Carlo hard-sphere collision integral at the given velocities.

    Q(v) = N d^2 \\int d^3w \\int_{approach} dn [f(v') f(w') - f(v) f(w)]
    |(v - w) . n|, with (v', w') the elastic transform along n.  Partner
    velocities are importance-sampled from a Maxwellian at T_ref and the
    contact normal uniformly on the approach hemisphere.  Returns (values,
    sigmas) with one-sigma Monte Carlo errors.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    T_ref = params.T if T_ref is None else T_ref
    velocities = np.atleast_2d(np.asarray(velocities, dtype=float))
    values = np.empty(len(velocities))
    sigmas = np.empty(len(velocities))
    pref = params.N * params.d**2 * 2.0 * math.pi
    for q, v in enumerate(velocities):
        w = rng.normal(0.0, math.sqrt(T_ref), size=(n_samples, 3))
        nvec = rng.normal(size=(n_samples, 3))
        nvec /= np.linalg.norm(nvec, axis=1, keepdims=True)
        rel = v[None, :] - w
        proj = np.einsum("ij,ij->i", rel, nvec)
        # fold onto the approach hemisphere (rel . n <= 0)
        flip = proj > 0.0
        nvec[flip] *= -1.0
        proj = -np.abs(proj)
        v_post = v[None, :] - proj[:, None] * nvec
        w_post = w + proj[:, None] * nvec
        weight = stats.maxwell_velocity_pdf(w, T_ref)
        gain = f(v_post) * f(w_post)
        loss = f(np.broadcast_to(v, w.shape)) * f(w)
        samples = (gain - loss) * np.abs(proj) / weight
        values[q] = pref * samples.mean()
        sigmas[q] = pref * samples.std(ddof=1) / math.sqrt(n_samples)
    return values, sigmas


# ---------------------------------------------------------------------------
# free-streaming residual


@dataclass
class TransportResidual:
    """Central-difference residual of the transport balance on the (x, v_x)
    marginal.

    In a spherical container the wall reflects particles at every x, so the
    marginal obeys d_t g + v_x d_x g = S_wall + S_coll with event-source
    fields on the right.  The residual subtracts the wall source measured
    from wall events, leaving the collision contribution plus noise.

    Because the expected absolute value of pure noise is positive, the
    summary statistic is a cross-replica product estimator of the squared
    signal (`l2_excess`, unbiased, may fluctuate negative under the null);
    `norm` is sqrt(max(l2_excess, 0)).  Consistency with zero means
    l2_excess within a few sigma of 0.  The same construction applied to the
    measured pair-collision source gives `collision_l2_excess`."""

    times: np.ndarray            # interior frame times
    centers_x: np.ndarray        # interior x bin centers
    centers_vx: np.ndarray
    residual: np.ndarray         # (n_times, n_x_interior, n_vx)
    residual_sigma: np.ndarray
    norm: float
    l2_excess: float
    l2_excess_sigma: float
    raw_l1: float
    collision_norm: float
    collision_l2_excess: float
    collision_l2_excess_sigma: float
    max_abs_z: float
    scale: float                 # typical advection magnitude for context


def _stack_xv(partials: list):
    frames = [p["xv"] for p in partials if "xv" in p]
    if not frames:
        raise InsufficientSamplesError("no time-resolved frames collected")
    times = partials[0]["xv_times"]
    for p in partials:
        if "xv_times" in p and not np.allclose(p["xv_times"], times, rtol=0, atol=1e-9):
            raise EstimatorError("replicas disagree on the sampling schedule")
    return np.asarray(frames), times


def _window_rate(source_mass: np.ndarray, dt: float, dx: float, dv: float) -> np.ndarray:
    """Source-rate density over the two intervals around each interior frame.

    source_mass has one slab per inter-sample interval; the window matching
    a central difference at frame k spans intervals k-1 and k."""
    return (source_mass[:-1] + source_mass[1:]) / (2.0 * dt * dx * dv)


def _residual_fields(mean_mass, wall_mass, times, dx, dv, centers_vx):
    g = mean_mass / (dx * dv)
    dt = times[1] - times[0]
    dgdt = (g[2:] - g[:-2]) / (2.0 * dt)
    dgdx = (g[:, 2:, :] - g[:, :-2, :]) / (2.0 * dx)
    resid = dgdt[:, 1:-1, :] + centers_vx[None, None, :] * dgdx[1:-1]
    if wall_mass is not None:
        resid = resid - _window_rate(wall_mass, dt, dx, dv)[:, 1:-1, :]
    return resid


def free_streaming_residual(partials: list, config: EstimatorConfig,
                            params: ModelParams, domain: DomainSpec,
                            rng: np.random.Generator | None = None,
                            n_boot: int = 200,
                            subtract_wall: bool = True) -> TransportResidual:
    """Finite-difference transport-balance check on the (x, v_x) marginal.

    Needs at least three uniformly spaced frames; raises
    InsufficientSamplesError otherwise.  With subtract_wall=True (default)
    the wall-reflection source measured from wall events is removed, so the
    residual isolates what pair collisions (plus discretization and noise)
    contribute."""
    usable = _require_snapshots(partials)
    frames, times = _stack_xv(usable)
    if frames.shape[1] < 3:
        raise InsufficientSamplesError(
            f"need at least 3 frames for a central time difference, "
            f"have {frames.shape[1]}")
    steps = np.diff(times)
    if not np.allclose(steps, steps[0], rtol=1e-6, atol=1e-12 * max(times[-1], 1.0)):
        raise EstimatorError("sampling times are not uniformly spaced")

    have_sources = all("wall_source" in p for p in usable)
    use_wall = subtract_wall and have_sources
    wall = np.asarray([p["wall_source"] for p in usable]) if use_wall else None
    pair = np.asarray([p["pair_source"] for p in usable]) if have_sources else None

    R = domain.radius
    dx = 2.0 * R / config.n_x
    vx_max = config.vx_max_factor * math.sqrt(params.T)
    dv = 2.0 * vx_max / config.n_vx
    centers_x = np.linspace(-R, R, config.n_x + 1)
    centers_x = 0.5 * (centers_x[:-1] + centers_x[1:])
    centers_vx = np.linspace(-vx_max, vx_max, config.n_vx + 1)
    centers_vx = 0.5 * (centers_vx[:-1] + centers_vx[1:])

    mean = frames.mean(axis=0)
    wall_mean = wall.mean(axis=0) if use_wall else None
    resid = _residual_fields(mean, wall_mean, times, dx, dv, centers_vx)

    m = len(frames)
    dt = times[1] - times[0]
    if m >= 2:
        sem = frames.std(axis=0, ddof=1) / math.sqrt(m) / (dx * dv)
        var_t = (sem[2:] ** 2 + sem[:-2] ** 2) / (2.0 * dt) ** 2
        var_x = (sem[:, 2:, :] ** 2 + sem[:, :-2, :] ** 2) / (2.0 * dx) ** 2
        var = var_t[:, 1:-1, :] + centers_vx[None, None, :] ** 2 * var_x[1:-1]
        if use_wall:
            wall_sem = wall.std(axis=0, ddof=1) / math.sqrt(m)
            wall_var = (wall_sem[:-1] ** 2 + wall_sem[1:] ** 2) / (2.0 * dt * dx * dv) ** 2
            var = var + wall_var[:, 1:-1, :]
        sigma = np.sqrt(var)
    else:
        sigma = np.full_like(resid, np.inf)

    wts = np.maximum(mean[1:-1, 1:-1, :] / (dx * dv), 0.0)
    wsum = wts.sum()
    if wsum <= 0:
        raise InsufficientSamplesError("interior cells carry no mass")

    def replica_fields(tables, key_mass, key_src, with_src):
        out = []
        for t in tables:
            src = t[key_src] if (with_src and key_src in t) else None
            out.append(_residual_fields(t[key_mass], src, times, dx, dv, centers_vx))
        return np.asarray(out)

    def cross_l2(fields, weights, wtotal):
        # unbiased estimate of the squared signal field, averaged with the
        # given weights: sum_{r != s} f_r f_s / (m (m - 1)) per cell
        k = len(fields)
        if k < 2:
            return math.nan
        cross = (fields.sum(axis=0) ** 2 - (fields**2).sum(axis=0)) / (k * (k - 1))
        return float((weights * cross).sum() / wtotal)

    def l2_stat(tables):
        mm = np.mean([t["xv"] for t in tables], axis=0)
        ww = np.maximum(mm[1:-1, 1:-1, :] / (dx * dv), 0.0)
        ws = max(ww.sum(), 1e-300)
        return cross_l2(replica_fields(tables, "xv", "wall_source", use_wall), ww, ws)

    def coll_fields(tables):
        return np.asarray(
            [_window_rate(t["pair_source"], dt, dx, dv)[:, 1:-1, :] for t in tables])

    def coll_stat(tables):
        mm = np.mean([t["xv"] for t in tables], axis=0)
        ww = np.maximum(mm[1:-1, 1:-1, :] / (dx * dv), 0.0)
        ws = max(ww.sum(), 1e-300)
        return cross_l2(coll_fields(tables), ww, ws)

    l2 = l2_stat(usable)
    raw_l1 = float((wts * np.abs(resid)).sum() / wsum)
    if rng is not None and m >= 2:
        _, l2_sigma = stats.bootstrap_over_replicas(usable, l2_stat, n_boot, rng)
        l2_sigma = float(l2_sigma)
    else:
        l2_sigma = math.inf

    if pair is not None and m >= 2:
        coll_l2 = coll_stat(usable)
        if rng is not None:
            _, coll_l2_sigma = stats.bootstrap_over_replicas(usable, coll_stat, n_boot, rng)
            coll_l2_sigma = float(coll_l2_sigma)
        else:
            coll_l2_sigma = math.inf
    else:
        coll_l2 = math.nan
        coll_l2_sigma = math.inf

    with np.errstate(divide="ignore", invalid="ignore"):
        zf = np.abs(resid) / sigma
    max_abs_z = float(np.nanmax(zf[np.isfinite(zf)])) if np.any(np.isfinite(zf)) else math.inf

    g_int = mean[1:-1, 1:-1, :] / (dx * dv)
    scale = float((wts * np.abs(centers_vx[None, None, :]) * g_int).sum() / wsum / (2.0 * R))

    return TransportResidual(
        times=times[1:-1],
        centers_x=centers_x[1:-1],
        centers_vx=centers_vx,
        residual=resid,
        residual_sigma=sigma,
        norm=math.sqrt(max(l2, 0.0)) if not math.isnan(l2) else math.nan,
        l2_excess=l2,
        l2_excess_sigma=l2_sigma,
        raw_l1=raw_l1,
        collision_norm=math.sqrt(max(coll_l2, 0.0)) if not math.isnan(coll_l2) else math.nan,
        collision_l2_excess=coll_l2,
        collision_l2_excess_sigma=coll_l2_sigma,
        max_abs_z=max_abs_z,
        scale=scale,
    )


# ---------------------------------------------------------------------------
# factorization defect for well-separated pairs


@dataclass
class FactorizationDefect:
    """Mass-weighted L1 distance of the joint speed table of distant pairs
    from the product of its marginals."""

    value: float
    sigma: float
    joint: np.ndarray
    n_pairs: float
    speed_edges: np.ndarray


def _defect_statistic(tables):
    J = np.sum([t["afc_joint"] for t in tables], axis=0)
    n = J.sum()
    if n <= 0:
        return math.nan
    pa = J.sum(axis=1) / n
    pb = J.sum(axis=0) / n
    outer = np.outer(pa, pb)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = (J / n) / outer
    mask = outer > 0
    return float(np.sum(outer[mask] * np.abs(ratio[mask] - 1.0)))


def factorization_defect(partials: list, params: ModelParams, config: EstimatorConfig,
                         rng: np.random.Generator | None = None,
                         n_boot: int = 400) -> FactorizationDefect:
    usable = _require_snapshots(partials)
    if rng is None:
        rng = np.random.default_rng(0)
    value, sigma = stats.bootstrap_over_replicas(usable, _defect_statistic, n_boot, rng)
    J = np.sum([p["afc_joint"] for p in usable], axis=0)
    edges = stats.equal_mass_speed_edges(config.afc_speed_bins, params.T,
                                         config.speed_max_factor * math.sqrt(params.T))
    return FactorizationDefect(value=float(value), sigma=float(sigma), joint=J,
                               n_pairs=float(J.sum()), speed_edges=edges)


# ---------------------------------------------------------------------------
# spatial field profiles and nested-ball probes


@dataclass
class FieldProfile:
    """Radial number-density and local packing profiles with a flatness score
    over shells fully inside the accessible region."""

    edges: np.ndarray
    number_density: np.ndarray
    number_density_sem: np.ndarray
    packing: np.ndarray
    packing_sem: np.ndarray
    mean_total: float
    flat_max_z: float
    interior: np.ndarray


def field_profile(partials: list, params: ModelParams, domain: DomainSpec,
                  config: EstimatorConfig) -> FieldProfile:
    usable = _require_snapshots(partials)
    edges = np.linspace(0.0, domain.radius, config.n_field_shells + 1)
    vols = _shell_volumes(edges)
    tables = [p["field_counts"] / p["snapshots"] for p in usable]
    mean_counts, sem_counts = stats.replica_mean_sem(tables)
    dens = mean_counts / vols
    dens_sem = sem_counts / vols
    # local packing from the collision-sphere volume, matching the global
    # eta_bar convention
    sphere = 4.0 * math.pi / 3.0 * params.d**3
    r_c = domain.center_radius(params.d)
    interior = edges[1:] <= r_c
    expect = params.N / (4.0 * math.pi / 3.0 * r_c**3)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.abs(dens - expect) / dens_sem
    flat = float(np.nanmax(z[interior])) if np.any(interior) else math.inf
    return FieldProfile(
        edges=edges,
        number_density=dens,
        number_density_sem=dens_sem,
        packing=dens * sphere,
        packing_sem=dens_sem * sphere,
        mean_total=float(mean_counts.sum()),
        flat_max_z=flat,
        interior=interior,
    )


@dataclass
class NestedBallProbe:
    """Time-averaged particle counts in nested balls around a probe point.

    `volumes` are geometric ball volumes clipped to the region accessible to
    sphere centers.  `count_ratio` compares each ball to the largest one;
    `density_ratio` compares local to global number density (with a single
    shared diameter the quantity N(r) d^2 / V(r) inherits exactly this
    ratio)."""

    radii: np.ndarray
    mean_counts: np.ndarray
    counts_sem: np.ndarray
    volumes: np.ndarray
    count_ratio: np.ndarray
    density_ratio: np.ndarray
    flagged: np.ndarray
    offset: float


def nested_ball_probe(partials: list, params: ModelParams, domain: DomainSpec,
                      config: EstimatorConfig, flag_tolerance: float = 0.2) -> NestedBallProbe:
    usable = _require_snapshots(partials)
    radii = np.array([f * domain.radius for f in config.vanhove_radius_factors])
    if np.any(np.diff(radii) <= 0):
        raise EstimatorError("probe radii must be strictly increasing")
    offset = config.vanhove_offset_factor * domain.radius
    tables = [p["vanhove_counts"] / p["snapshots"] for p in usable]
    mean_counts, sem = stats.replica_mean_sem(tables)
    r_c = domain.center_radius(params.d)
    vols = np.array([stats.sphere_intersection_volume(r, r_c, offset) for r in radii])
    global_density = params.N / (4.0 * math.pi / 3.0 * r_c**3)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = (mean_counts / vols) / global_density
        count_ratio = mean_counts / mean_counts[-1]
    flagged = np.abs(ratio - 1.0) > flag_tolerance
    return NestedBallProbe(radii=radii, mean_counts=mean_counts, counts_sem=sem,
                           volumes=vols, count_ratio=count_ratio,
                           density_ratio=ratio, flagged=flagged, offset=offset)


def free_fraction(partials: list) -> tuple[float, float]:
    """Mean and standard error of the fraction of particles that are neither
    within one gap-shell width of another particle nor of the wall."""
    usable = _require_snapshots(partials)
    vals = np.array([p["free_mass"] for p in usable])
    mean, sem = stats.replica_mean_sem(vals[:, None])
    return float(mean[0]), float(sem[0])


def pooled_speed_samples(partials: list, which: str = "last") -> np.ndarray:
    key = {"first": "speeds_first", "last": "speeds_last"}[which]
    arrs = [p[key] for p in partials if key in p]
    if not arrs:
        raise InsufficientSamplesError("no speed samples collected")
    return np.concatenate(arrs)
