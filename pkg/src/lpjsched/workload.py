"""Job specifications, communication matrices and affinity lookup.

Volumes follow the usual GPT analytical model: a DP group synchronises the
weights of one pipeline stage, a PP boundary carries one micro-batch of
activations.  Per-GPU values divide the per-stage figures by the TP degree.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from importlib import resources
from typing import List, Optional, Tuple

from .topology import GPUS_PER_NODE

VALID_TP = (1, 2, 4, 8)


class WorkloadError(ValueError):
    pass


class UnknownGpuType(LookupError):
    def __init__(self, gpu_type: str, available):
        self.gpu_type = gpu_type
        self.available = sorted(set(available))
        super().__init__(f"no profile entry for gpu type {gpu_type!r}; available: {', '.join(self.available) or 'none'}")


@dataclass(frozen=True)
class ModelHyper:
    vocab: int = 32000
    seq_len: int = 2048
    hidden: int = 4096
    layers: int = 32
    # MoE: parameter count of one MoE block, replacing the dense FFN term
    experts: int = 0
    moe_layer_params: Optional[int] = None

    def __post_init__(self):
        for name in ("vocab", "seq_len", "hidden", "layers"):
            if getattr(self, name) <= 0:
                raise WorkloadError(f"{name} must be positive")
        if self.moe_layer_params is not None and self.moe_layer_params <= 0:
            raise WorkloadError("moe_layer_params must be positive")

    @property
    def is_moe(self) -> bool:
        return self.moe_layer_params is not None

    @classmethod
    def from_dict(cls, d: dict) -> "ModelHyper":
        return cls(**d)


@dataclass(frozen=True)
class JobSpec:
    gpus: int
    tp: int
    pp: int
    mb: int = 1
    gb: Optional[int] = None
    vp: int = 1
    model: ModelHyper = field(default_factory=ModelHyper)
    gpu_type: str = "H800"
    bytes_per_element: int = 2
    dp_bytes: Optional[int] = None
    pp_bytes: Optional[int] = None
    dp_volume_multiplier: float = 1.0

    def __post_init__(self):
        if self.gpus <= 0 or self.pp <= 0 or self.mb <= 0 or self.vp <= 0:
            raise WorkloadError("gpus, pp, mb and vp must be positive")
        if self.tp not in VALID_TP:
            raise WorkloadError(f"tp must be one of {VALID_TP}, got {self.tp}")
        if self.gpus % (self.tp * self.pp):
            raise WorkloadError(f"gpus={self.gpus} not divisible by tp*pp={self.tp * self.pp}")
        if self.gb is None:
            object.__setattr__(self, "gb", self.mb * self.dp)
        if self.gb <= 0 or self.gb % (self.mb * self.dp):
            raise WorkloadError(f"gb={self.gb} not divisible by mb*dp={self.mb * self.dp}")
        if self.model.layers % self.pp:
            raise WorkloadError(f"layers={self.model.layers} not divisible by pp={self.pp}")

    @property
    def dp(self) -> int:
        return self.gpus // self.tp // self.pp

    @property
    def dp_elem_bytes(self) -> int:
        return self.dp_bytes or self.bytes_per_element

    @property
    def pp_elem_bytes(self) -> int:
        return self.pp_bytes or self.bytes_per_element

    @classmethod
    def from_parallelism(cls, dp: int, tp: int, pp: int, **kw) -> "JobSpec":
        return cls(gpus=dp * tp * pp, tp=tp, pp=pp, **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "JobSpec":
        d = dict(d)
        if "model" in d:
            d["model"] = ModelHyper.from_dict(d["model"])
        if "dp" in d and "gpus" not in d:
            d["gpus"] = d.pop("dp") * d["tp"] * d["pp"]
        d.pop("dp", None)
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def load_job(path) -> JobSpec:
    with open(path) as f:
        return JobSpec.from_dict(json.load(f))


# -- analytical volume model ----------------------------------------------

def dp_volume(model: ModelHyper, pp: int) -> int:
    """Parameter elements held by one pipeline stage (DP sync volume)."""
    if model.layers % pp:
        raise WorkloadError(f"layers={model.layers} not divisible by pp={pp}")
    h = model.hidden
    ffn = model.moe_layer_params if model.is_moe else 8 * h * h + 7 * h
    per_layer = 4 * h * h + 2 * h + ffn
    return h * (model.vocab + model.seq_len) + (model.layers // pp) * per_layer


def pp_volume(mb: int, seq_len: int, hidden: int) -> int:
    """Activation elements crossing one stage boundary per micro-batch."""
    if mb <= 0 or seq_len <= 0 or hidden <= 0:
        raise WorkloadError("mb, seq_len and hidden must be positive")
    return 2 * mb * seq_len * hidden


def microbatch_count(gb: int, mb: int, dp: int) -> int:
    if gb <= 0 or mb <= 0 or dp <= 0:
        raise WorkloadError("gb, mb and dp must be positive")
    if gb % (mb * dp):
        raise WorkloadError(f"gb={gb} not divisible by mb*dp={mb * dp}")
    return gb // (mb * dp)


@dataclass(frozen=True)
class VolumeVector:
    v_w: float  # parameter elements per GPU
    v_d: float  # DP bytes per GPU per step
    v_p: float  # PP bytes per GPU per micro-batch


def volume_vector(spec: JobSpec) -> VolumeVector:
    weights = dp_volume(spec.model, spec.pp)
    v_w = weights / spec.tp
    v_d = weights * spec.dp_elem_bytes * spec.dp_volume_multiplier / spec.tp
    if spec.pp == 1:
        v_p = 0.0
    else:
        v_p = pp_volume(spec.mb, spec.model.seq_len, spec.model.hidden) * spec.pp_elem_bytes / spec.tp
    return VolumeVector(v_w, v_d, v_p)


@dataclass(frozen=True)
class CommMatrix:
    """Rows are PP groups, columns are DP groups; one cell per physical node."""

    rows: int
    cols: int
    volume: VolumeVector

    @property
    def num_cells(self) -> int:
        return self.rows * self.cols

    def cells(self) -> List[Tuple[int, int]]:
        return [(r, c) for r in range(self.rows) for c in range(self.cols)]

    def node_slot(self, row: int, col: int) -> int:
        return row * self.cols + col

    def pp_groups(self) -> List[List[Tuple[int, int]]]:
        return [[(r, c) for c in range(self.cols)] for r in range(self.rows)]

    def dp_groups(self) -> List[List[Tuple[int, int]]]:
        return [[(r, c) for r in range(self.rows)] for c in range(self.cols)]


def build_comm_matrix(spec: JobSpec, gpus_per_node: int = GPUS_PER_NODE) -> CommMatrix:
    dp = spec.dp
    if spec.tp > gpus_per_node or gpus_per_node % spec.tp:
        raise WorkloadError(f"tp={spec.tp} does not tile a {gpus_per_node}-GPU node")
    per_node = gpus_per_node // spec.tp
    if dp % per_node:
        # dp*tp must fill whole nodes; a node may not host pieces of two PP groups
        raise WorkloadError(f"dp*tp={dp * spec.tp} is not a multiple of {gpus_per_node}")
    return CommMatrix(dp // per_node, spec.pp, volume_vector(spec))


def compute_ratios(spec: JobSpec) -> Tuple[float, float]:
    """(compute/communication ratio, DP/PP volume ratio)."""
    vol = volume_vector(spec)
    if vol.v_d + vol.v_p <= 0:
        raise WorkloadError("job has no inter-node communication")
    if vol.v_p == 0:
        raise WorkloadError("DP/PP ratio is undefined for pp=1")
    r1 = spec.mb * vol.v_w * spec.bytes_per_element / (vol.v_d + vol.v_p)
    r2 = vol.v_d / vol.v_p
    return r1, r2


# -- profile database --------------------------------------------------------

@dataclass(frozen=True)
class ProfileEntry:
    gpu_type: str
    tag: str
    r1: float
    r2: float
    j_dp: float
    j_pp: float
    note: str = ""

    def __post_init__(self):
        if self.j_dp < 0 or self.j_pp < 0 or self.j_dp + self.j_pp <= 0:
            raise WorkloadError(f"profile {self.gpu_type}/{self.tag}: improvements must be >= 0 with a positive sum")

    @property
    def affinity(self) -> Tuple[float, float]:
        total = self.j_dp + self.j_pp
        return self.j_dp / total, self.j_pp / total


class ProfileDB:
    def __init__(self, entries=()):
        self.entries: List[ProfileEntry] = list(entries)

    def __len__(self):
        return len(self.entries)

    def add(self, entry: ProfileEntry) -> None:
        self.entries.append(entry)

    @classmethod
    def load(cls, path) -> "ProfileDB":
        with open(path) as f:
            return cls(ProfileEntry(**e) for e in json.load(f))

    @classmethod
    def seed(cls) -> "ProfileDB":
        text = resources.files("lpjsched").joinpath("data/profiles.json").read_text()
        return cls(ProfileEntry(**e) for e in json.loads(text))

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump([asdict(e) for e in self.entries], f, indent=2, sort_keys=True)
            f.write("\n")

    def best_match(self, gpu_type: str, r1: float, r2: float) -> ProfileEntry:
        best, best_d = None, math.inf
        for entry in self.entries:
            if entry.gpu_type != gpu_type:
                continue
            d = math.hypot(r1 - entry.r1, r2 - entry.r2)
            if d < best_d:
                best, best_d = entry, d
        if best is None:
            raise UnknownGpuType(gpu_type, (e.gpu_type for e in self.entries))
        return best


def lookup_affinity(db: ProfileDB, gpu_type: str, r1: float, r2: float) -> Tuple[float, float]:
    """(alpha, beta) from the nearest profiled job; first entry wins ties."""
    return db.best_match(gpu_type, r1, r2).affinity
