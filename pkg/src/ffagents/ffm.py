"""Forest fire cellular automaton on an L x L torus.

Cells hold one byte each (see :class:`CellState`). A step is synchronous and
is computed from the pre-step snapshot only:

* fire burns out to an empty site (ash) after exactly one step,
* a tree with a burning von Neumann neighbour catches fire,
* otherwise a tree ignites spontaneously with probability ``p_fire``,
* an empty site grows a tree with probability ``p_tree``,
* a surviving plain tree regrows a resource with probability ``p_resource``.

Trees carrying a resource burn exactly like plain trees and lose the resource
when they ignite.

Random draws: each step consumes one uniform per cell in row-major order for
growth/ignition, then (only when ``p_resource > 0``) a second row-major block
for resource regrowth.
"""
from __future__ import annotations

import csv
import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .errors import ContractViolation, NonConvergence


class CellState(enum.IntEnum):
    EMPTY = 0
    TREE = 1
    RESOURCE = 2  # tree carrying a consumable resource
    FIRE = 3


EMPTY, TREE, RESOURCE, FIRE = (int(s) for s in CellState)

_TO_CHAR = {EMPTY: ".", TREE: "T", RESOURCE: "R", FIRE: "F"}
_FROM_CHAR = {v: k for k, v in _TO_CHAR.items()}


@dataclass(frozen=True)
class FfmParams:
    p_tree: float = 0.08
    p_fire: float = 0.005
    p_resource: float = 0.005

    def __post_init__(self):
        for name in ("p_tree", "p_fire", "p_resource"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ContractViolation(f"{name} must lie in [0, 1], got {value}")


@dataclass
class Lattice:
    cells: np.ndarray
    generation: int = 0

    def __post_init__(self):
        cells = np.ascontiguousarray(self.cells, dtype=np.uint8)
        if cells.ndim != 2 or cells.shape[0] != cells.shape[1] or cells.shape[0] == 0:
            raise ContractViolation(f"lattice must be a non-empty square grid, got shape {cells.shape}")
        if cells.size and cells.max() > FIRE:
            raise ContractViolation("lattice contains an unknown cell state")
        self.cells = cells

    @classmethod
    def filled(cls, size: int, state: int = EMPTY) -> "Lattice":
        return cls(np.full((size, size), state, dtype=np.uint8))

    @classmethod
    def from_text(cls, text: str, generation: int = 0) -> "Lattice":
        rows = [line.strip() for line in text.strip().splitlines() if line.strip()]
        try:
            cells = np.array([[_FROM_CHAR[ch] for ch in row] for row in rows], dtype=np.uint8)
        except KeyError as exc:
            raise ContractViolation(f"unknown cell character {exc}") from None
        return cls(cells, generation)

    @property
    def size(self) -> int:
        return self.cells.shape[0]

    def copy(self) -> "Lattice":
        return Lattice(self.cells.copy(), self.generation)

    def to_text(self) -> str:
        lut = np.array([ord(_TO_CHAR[s]) for s in range(4)], dtype=np.uint8)
        return "\n".join(bytes(row).decode("ascii") for row in lut[self.cells]) + "\n"

    def counts(self) -> dict[str, int]:
        hist = np.bincount(self.cells.ravel(), minlength=4)
        return {
            "empty": int(hist[EMPTY]),
            "trees": int(hist[TREE] + hist[RESOURCE]),
            "resources": int(hist[RESOURCE]),
            "fires": int(hist[FIRE]),
        }

    def __eq__(self, other):
        if not isinstance(other, Lattice):
            return NotImplemented
        return self.generation == other.generation and np.array_equal(self.cells, other.cells)


def neighbors_von_neumann(r: tuple[int, int], size: int) -> list[tuple[int, int]]:
    """The four orthogonal neighbours of ``r`` on a torus of side ``size``."""
    i, j = r
    return [((i - 1) % size, j), ((i + 1) % size, j), (i, (j - 1) % size), (i, (j + 1) % size)]


def burning_neighbour(fire: np.ndarray) -> np.ndarray:
    """Boolean mask of cells with at least one burning von Neumann neighbour."""
    out = np.zeros_like(fire)
    out[1:] = fire[:-1]
    out[0] |= fire[-1]
    out[:-1] |= fire[1:]
    out[-1] |= fire[0]
    out[:, 1:] |= fire[:, :-1]
    out[:, 0] |= fire[:, -1]
    out[:, :-1] |= fire[:, 1:]
    out[:, -1] |= fire[:, 0]
    return out


def _advance(cells: np.ndarray, params: FfmParams, u: np.ndarray, v: np.ndarray | None) -> np.ndarray:
    fire = cells == FIRE
    empty = cells == EMPTY
    spark = u < params.p_fire
    ignite = burning_neighbour(fire) | spark if fire.any() else spark
    ignite &= ~(fire | empty)
    new = np.where(fire, np.uint8(EMPTY), cells)
    new[empty & (u < params.p_tree)] = TREE
    new[ignite] = FIRE
    if v is not None:
        new[(cells == TREE) & ~ignite & (v < params.p_resource)] = RESOURCE
    return new


def _draws(rng: np.random.Generator, params: FfmParams, shape) -> tuple[np.ndarray, np.ndarray | None]:
    u = rng.random(shape)
    v = rng.random(shape) if params.p_resource > 0 else None
    return u, v


def step_ca(lattice: Lattice, params: FfmParams, rng: np.random.Generator) -> Lattice:
    """Return the successor lattice; the input is left untouched."""
    u, v = _draws(rng, params, lattice.cells.shape)
    return Lattice(_advance(lattice.cells, params, u, v), lattice.generation + 1)


# ---------------------------------------------------------------------------
# cascades
# ---------------------------------------------------------------------------

@dataclass
class CascadeRecord:
    cascade_id: int
    start_step: int
    end_step: int
    size: int


@dataclass
class CascadeLedger:
    """Labels every burning cell with the id of the ignition it descends from.

    ``labels`` is 0 on non-burning cells. A cascade is open while at least one
    burning cell carries its id; it closes on the first step without one.
    """

    size: int
    labels: np.ndarray = field(init=False)
    sizes: dict[int, int] = field(default_factory=dict)
    start: dict[int, int] = field(default_factory=dict)
    end: dict[int, int] = field(default_factory=dict)
    open_ids: set[int] = field(default_factory=set)
    closed: list[CascadeRecord] = field(default_factory=list)
    next_id: int = 1

    def __post_init__(self):
        self.labels = np.zeros((self.size, self.size), dtype=np.int64)

    def records(self, include_open: bool = True) -> list[CascadeRecord]:
        out = list(self.closed)
        if include_open:
            out += [CascadeRecord(c, self.start[c], self.end[c], self.sizes[c]) for c in sorted(self.open_ids)]
        return sorted(out, key=lambda rec: rec.cascade_id)

    def closed_sizes(self) -> np.ndarray:
        return np.array([rec.size for rec in self.closed], dtype=np.int64)


_NO_LABEL = np.iinfo(np.int64).max


def _track(ledger: CascadeLedger, before_fire: np.ndarray, after_fire: np.ndarray, generation: int) -> None:
    if not after_fire.any():
        if ledger.open_ids:
            _close(ledger, set(ledger.open_ids))
            ledger.labels[:] = 0
        return

    masked = np.where(before_fire, ledger.labels, _NO_LABEL)
    nb_min = np.minimum(
        np.minimum(np.roll(masked, 1, axis=0), np.roll(masked, -1, axis=0)),
        np.minimum(np.roll(masked, 1, axis=1), np.roll(masked, -1, axis=1)),
    )
    labels = np.zeros_like(ledger.labels)
    propagated = after_fire & (nb_min != _NO_LABEL)
    labels[propagated] = nb_min[propagated]

    spontaneous = np.flatnonzero(after_fire & ~propagated)
    if spontaneous.size:
        new_ids = np.arange(ledger.next_id, ledger.next_id + spontaneous.size, dtype=np.int64)
        labels.ravel()[spontaneous] = new_ids
        ledger.next_id += spontaneous.size
        for cid in new_ids.tolist():
            ledger.start[cid] = generation
            ledger.sizes[cid] = 0

    ids, counts = np.unique(labels[after_fire], return_counts=True)
    alive = set(ids.tolist())
    for cid, n in zip(ids.tolist(), counts.tolist()):
        ledger.sizes[cid] += n
        ledger.end[cid] = generation
    _close(ledger, ledger.open_ids - alive)
    ledger.open_ids = alive
    ledger.labels = labels


def _close(ledger: CascadeLedger, ids: set[int]) -> None:
    for cid in sorted(ids):
        ledger.closed.append(CascadeRecord(cid, ledger.start.pop(cid), ledger.end.pop(cid), ledger.sizes.pop(cid)))
    ledger.open_ids -= ids


def track_cascades(before: Lattice, after: Lattice, ledger: CascadeLedger) -> CascadeLedger:
    """Advance ``ledger`` across one CA step (mutated in place and returned).

    Spontaneous ignitions open cascades, ids assigned in row-major order.
    A cell ignited by propagation inherits the smallest id among its burning
    neighbours.
    """
    if before.size != after.size or before.size != ledger.size:
        raise ContractViolation("lattice sizes and ledger size disagree")
    if after.generation != before.generation + 1:
        raise ContractViolation(f"after.generation must be {before.generation + 1}, got {after.generation}")
    before_fire = before.cells == FIRE
    after_fire = after.cells == FIRE
    if np.any(after_fire & ((before.cells == EMPTY) | before_fire)):
        raise ContractViolation("a cell is burning after the step without having been a tree before it")
    if np.any(before_fire & (after.cells != EMPTY)):
        raise ContractViolation("a burning cell did not burn out to an empty site")
    if not np.array_equal(ledger.labels > 0, before_fire):
        raise ContractViolation("ledger labels do not match the burning cells of the 'before' lattice")
    _track(ledger, before_fire, after_fire, after.generation)
    return ledger


def seed_ledger(lattice: Lattice) -> CascadeLedger:
    """A ledger for a lattice that may already contain fire (each burning cell opens a cascade)."""
    ledger = CascadeLedger(lattice.size)
    fire = lattice.cells == FIRE
    idx = np.flatnonzero(fire)
    for k, flat in enumerate(idx.tolist()):
        cid = k + 1
        ledger.labels.ravel()[flat] = cid
        ledger.sizes[cid] = 1
        ledger.start[cid] = ledger.end[cid] = lattice.generation
        ledger.open_ids.add(cid)
    ledger.next_id = idx.size + 1
    return ledger


@dataclass
class CaSeries:
    """Per-step traces gathered by :func:`run_ca` (index k is generation start+k+1)."""

    burning: np.ndarray
    trees: np.ndarray
    resources: np.ndarray
    empty: np.ndarray


def run_ca(
    lattice: Lattice,
    params: FfmParams,
    steps: int,
    rng: np.random.Generator,
    ledger: CascadeLedger | None = None,
    block: int = 1024,
) -> tuple[Lattice, CaSeries]:
    """Run ``steps`` CA updates without agents.

    Produces the same trajectory as repeated :func:`step_ca` calls on the same
    generator; uniforms are simply drawn ``block`` steps at a time.
    """
    size = lattice.size
    cells = lattice.cells.copy()
    generation = lattice.generation
    burning = np.zeros(steps, dtype=np.int64)
    trees = np.zeros(steps, dtype=np.int64)
    resources = np.zeros(steps, dtype=np.int64)
    per_step = 2 if params.p_resource > 0 else 1

    done = 0
    while done < steps:
        n = min(block, steps - done)
        draws = rng.random((n, per_step, size, size))
        for k in range(n):
            before_fire = cells == FIRE if ledger is not None else None
            cells = _advance(cells, params, draws[k, 0], draws[k, 1] if per_step == 2 else None)
            generation += 1
            hist = np.bincount(cells.ravel(), minlength=4)
            burning[done + k] = hist[FIRE]
            trees[done + k] = hist[TREE] + hist[RESOURCE]
            resources[done + k] = hist[RESOURCE]
            if ledger is not None and (hist[FIRE] or ledger.open_ids):
                _track(ledger, before_fire, cells == FIRE, generation)
        done += n
    empty = size * size - trees - burning
    return Lattice(cells, generation), CaSeries(burning, trees, resources, empty)


# ---------------------------------------------------------------------------
# mean-field approximation
# ---------------------------------------------------------------------------

def meanfield_rhs(rho_t: float, rho_f: float, p: float, f: float) -> tuple[float, float]:
    rho_e = 1.0 - rho_t - rho_f
    spread = 4.0 * rho_t * rho_f
    return p * rho_e - f * rho_t - spread, f * rho_t + spread - rho_f


def meanfield_fixed_point(
    params: FfmParams,
    tol: float = 1e-12,
    initial: tuple[float, float] = (0.5, 0.01),
    dt: float = 0.1,
    max_iter: int = 10_000_000,
) -> tuple[float, float, float]:
    """Integrate the well-mixed pair approximation to a fixed point; returns (rho_T, rho_F, rho_E).

    ``dρT/dt = p ρE - f ρT - 4 ρT ρF`` and ``dρF/dt = f ρT + 4 ρT ρF - ρF``,
    advanced with classical RK4 until the derivative norm drops below ``tol``.
    """
    if tol <= 0:
        raise ContractViolation("tol must be positive")
    p, f = params.p_tree, params.p_fire
    rt, rf = initial
    for _ in range(max_iter):
        k1 = meanfield_rhs(rt, rf, p, f)
        if max(abs(k1[0]), abs(k1[1])) < tol:
            rt, rf = max(rt, 0.0), max(rf, 0.0)
            return rt, rf, 1.0 - rt - rf
        k2 = meanfield_rhs(rt + 0.5 * dt * k1[0], rf + 0.5 * dt * k1[1], p, f)
        k3 = meanfield_rhs(rt + 0.5 * dt * k2[0], rf + 0.5 * dt * k2[1], p, f)
        k4 = meanfield_rhs(rt + dt * k3[0], rf + dt * k3[1], p, f)
        rt += dt / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        rf += dt / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
    raise NonConvergence(f"mean-field integration did not converge in {max_iter} steps", (rt, rf, 1.0 - rt - rf))


# ---------------------------------------------------------------------------
# snapshot and log formats
# ---------------------------------------------------------------------------

FRAME_MAGIC = b"FFMF"
FRAME_VERSION = 1
_FRAME_HEADER = struct.Struct("<4sHIQ")


def encode_frame(lattice: Lattice) -> bytes:
    header = _FRAME_HEADER.pack(FRAME_MAGIC, FRAME_VERSION, lattice.size, lattice.generation)
    return header + lattice.cells.tobytes(order="C")


def decode_frames(data: bytes) -> Iterator[Lattice]:
    offset = 0
    while offset < len(data):
        if len(data) - offset < _FRAME_HEADER.size:
            raise ContractViolation("truncated frame header")
        magic, version, size, generation = _FRAME_HEADER.unpack_from(data, offset)
        if magic != FRAME_MAGIC:
            raise ContractViolation(f"bad frame magic {magic!r}")
        if version != FRAME_VERSION:
            raise ContractViolation(f"unsupported frame version {version}")
        offset += _FRAME_HEADER.size
        payload = data[offset:offset + size * size]
        if len(payload) != size * size:
            raise ContractViolation("truncated frame payload")
        offset += size * size
        yield Lattice(np.frombuffer(payload, dtype=np.uint8).reshape(size, size).copy(), generation)


def write_frames(path: Path, frames: Iterable[Lattice]) -> None:
    with open(path, "wb") as fh:
        for lattice in frames:
            fh.write(encode_frame(lattice))


def read_frames(path: Path) -> list[Lattice]:
    return list(decode_frames(Path(path).read_bytes()))


def write_cascade_csv(path: Path, records: Iterable[CascadeRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cascade_id", "start_step", "end_step", "size"])
        for rec in records:
            writer.writerow([rec.cascade_id, rec.start_step, rec.end_step, rec.size])
