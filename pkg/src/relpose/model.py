"""Pose-lifting networks: fully connected baseline and relational networks.

Relational variants run one residual stack per ordered group pair
``(i, j), i < j`` (no weight sharing), average the pair features with
per-sample weights and regress the root-relative 3D pose from the average.
Relational dropout is expressed entirely through those weights: pairs that
touch a dropped group get weight 0 and the survivors are re-averaged.
"""

from __future__ import annotations

import itertools
import struct
import zlib
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .layers import EVAL, TRAIN, BlockConfig, Linear, ResBlock, Tape, _check_mode
from .numerics import Rng
from .skeleton import GROUPS, N_JOINTS, NormStats

VARIANTS = ("FC", "FC-drop", "RN", "RN-hier")


class GroupConfig:
    """Partition of the input joints into ordered groups."""

    def __init__(self, groups=GROUPS, n_joints: int = N_JOINTS):
        self.groups = tuple(tuple(int(j) for j in g) for g in groups)
        flat = sorted(j for g in self.groups for j in g)
        if flat != list(range(n_joints)):
            raise ValueError("groups must partition the joints exactly once each")
        self.n_joints = n_joints
        self.pairs = enumerate_pairs(len(self.groups))
        self.group_of = np.empty(n_joints, dtype=np.int64)
        for k, g in enumerate(self.groups):
            self.group_of[list(g)] = k

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    @property
    def n_pairs(self) -> int:
        return len(self.pairs)

    def intra_pairs(self):
        """(group, joint_a, joint_b) for every joint pair inside a group."""
        out = []
        for k, g in enumerate(self.groups):
            for a, b in itertools.combinations(g, 2):
                out.append((k, a, b))
        return out

    def to_text(self) -> str:
        return ";".join(",".join(str(j) for j in g) for g in self.groups)

    @classmethod
    def from_text(cls, text: str) -> "GroupConfig":
        return cls([tuple(int(j) for j in part.split(",")) for part in text.split(";")])

    def __eq__(self, other) -> bool:
        return isinstance(other, GroupConfig) and self.groups == other.groups


def enumerate_pairs(n_groups: int) -> list[tuple[int, int]]:
    return list(itertools.combinations(range(n_groups), 2))


@dataclass(frozen=True)
class DropMask:
    """Relational-dropout decision for one sample."""

    groups: tuple[int, ...] = ()
    joints: tuple[int, ...] = ()

    @property
    def empty(self) -> bool:
        return not self.groups and not self.joints


NO_DROP = DropMask()


def relational_weights(n_groups: int, dropped=()) -> np.ndarray:
    """Per-pair averaging weights.

    Without drops every pair gets ``1/n_p``. Pairs touching a dropped group
    get 0 and the survivors share the mean equally, which for one dropped
    group is ``1/(n_p - n_G + 1)``. Returns zeros if nothing survives.
    """
    pairs = enumerate_pairs(n_groups)
    dropped = set(dropped)
    alive = np.array([0.0 if (i in dropped or j in dropped) else 1.0 for i, j in pairs])
    n_alive = alive.sum()
    if n_alive == 0:
        return alive
    return alive / n_alive


@dataclass(frozen=True)
class ModelSpec:
    variant: str = "RN"
    f_dim: int = 2048
    g_dim: int = 1024
    intra_dim: int = 256
    f_dropout: float = 0.5
    g_dropout: float = 0.25
    intra_dropout: float = 0.1
    group_pdrop: float = 0.0
    joint_pdrop: float = 0.0
    input_pdrop: float = 0.0
    f_blocks: int = 2
    g_blocks: int = 1
    intra_blocks: int = 1
    input_dim: int = 32
    output_dim: int = 45
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    seed: int = 0
    groups: str = GroupConfig().to_text()

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        gc = self.group_config
        if self.input_dim != 2 * gc.n_joints:
            raise ValueError("input_dim must equal 2 * number of joints")
        if self.output_dim != 3 * (gc.n_joints - 1):
            raise ValueError("output_dim must equal 3 * (number of joints - 1)")
        for name in ("f_dropout", "g_dropout", "intra_dropout", "group_pdrop",
                     "joint_pdrop", "input_pdrop"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in [0, 1)")
        if min(self.f_dim, self.g_dim, self.intra_dim, self.f_blocks) < 1:
            raise ValueError("dimensions and f_blocks must be positive")
        if self.joint_pdrop > 0 and self.variant != "RN-hier":
            raise ValueError("joint-level relational dropout needs the RN-hier variant")
        if self.group_pdrop > 0 and self.variant not in ("RN", "RN-hier"):
            raise ValueError("group-level relational dropout needs a relational variant")
        if self.input_pdrop > 0 and self.variant != "FC-drop":
            raise ValueError("input zeroing is the FC-drop variant")

    @property
    def group_config(self) -> GroupConfig:
        return GroupConfig.from_text(self.groups)

    @property
    def relational(self) -> bool:
        return self.variant in ("RN", "RN-hier")

    @property
    def uses_relational_dropout(self) -> bool:
        return self.relational and (self.group_pdrop > 0 or self.joint_pdrop > 0)

    @property
    def tag(self) -> str:
        if not self.relational:
            return self.variant
        return self.variant + ("-drop" if self.uses_relational_dropout else "")

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str) -> "ModelSpec":
        kinds = {f.name: f.type for f in fields(cls)}
        values = {}
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            key, _, raw = line.partition("=")
            if key not in kinds:
                raise ValueError(f"unknown ModelSpec key {key!r}")
            values[key] = _coerce(kinds[key], raw)
        return cls(**values)


def _coerce(kind, raw: str):
    kind = kind if isinstance(kind, str) else kind.__name__
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


PRESETS = {
    "FC": dict(variant="FC"),
    "FC-drop": dict(variant="FC-drop", input_pdrop=0.1),
    "RN": dict(variant="RN"),
    "RN-drop": dict(variant="RN", group_pdrop=0.2),
    "RN-hier": dict(variant="RN-hier"),
    "RN-hier-drop": dict(variant="RN-hier", group_pdrop=0.2, joint_pdrop=0.1),
}


def preset(tag: str, **overrides) -> ModelSpec:
    """ModelSpec for a named model tag (FC, FC-drop, RN, RN-drop, ...)."""
    if tag not in PRESETS:
        raise ValueError(f"unknown model tag {tag!r}; expected one of {tuple(PRESETS)}")
    return ModelSpec(**{**PRESETS[tag], **overrides})


def parameter_count(spec: ModelSpec) -> int:
    """Closed-form number of learnable scalars."""

    def block(dim, in_dim=None):
        n = 2 * (dim * dim + dim) + 2 * 2 * dim
        if in_dim is not None:
            n += in_dim * dim + dim
        return n

    def stack(dim, in_dim, n_blocks):
        return block(dim, in_dim) + (n_blocks - 1) * block(dim)

    gc = spec.group_config
    total = spec.f_dim * spec.output_dim + spec.output_dim
    if not spec.relational:
        return total + stack(spec.f_dim, spec.input_dim, spec.f_blocks)
    total += stack(spec.f_dim, spec.g_dim, spec.f_blocks)
    if spec.variant == "RN":
        for i, j in gc.pairs:
            in_dim = 2 * (len(gc.groups[i]) + len(gc.groups[j]))
            total += stack(spec.g_dim, in_dim, spec.g_blocks)
        return total
    total += gc.n_pairs * stack(spec.g_dim, 2 * spec.intra_dim, spec.g_blocks)
    total += len(gc.intra_pairs()) * stack(spec.intra_dim, 4, spec.intra_blocks)
    return total


class PoseModel:
    """Parameters, running statistics and forward/backward for one ModelSpec."""

    def __init__(self, spec: ModelSpec, stats: NormStats | None = None):
        self.spec = spec
        self.stats = stats
        self.gc = spec.group_config
        rng = Rng(spec.seed).split("init")
        bn = dict(momentum=spec.bn_momentum, eps=spec.bn_eps)
        f_in = spec.g_dim if spec.relational else spec.input_dim
        fcfg = BlockConfig(spec.f_dim, spec.f_dropout, **bn)
        self.f_blocks = [ResBlock("f.block0", fcfg, rng, in_dim=f_in)]
        self.f_blocks += [ResBlock(f"f.block{b}", fcfg, rng) for b in range(1, spec.f_blocks)]
        self.readout = Linear("out", spec.f_dim, spec.output_dim, rng)
        self.pair_entries: list[Linear] = []
        self.g_blocks: list[ResBlock] = []
        self.intra_blocks: list[ResBlock] = []
        n_p = self.gc.n_pairs
        gcfg = BlockConfig(spec.g_dim, spec.g_dropout, bank=(n_p,), **bn)
        if spec.variant == "RN":
            self._pair_cols = []
            for p, (i, j) in enumerate(self.gc.pairs):
                joints = self.gc.groups[i] + self.gc.groups[j]
                cols = [2 * k + c for k in joints for c in (0, 1)]
                self._pair_cols.append(np.array(cols))
                self.pair_entries.append(Linear(f"g.entry{p}", len(cols), spec.g_dim, rng))
            self.g_blocks = [ResBlock(f"g.block{b}", gcfg, rng) for b in range(spec.g_blocks)]
        elif spec.variant == "RN-hier":
            ip = self.gc.intra_pairs()
            self._intra = ip
            icfg = BlockConfig(spec.intra_dim, spec.intra_dropout, bank=(len(ip),), **bn)
            self.intra_blocks = [ResBlock("intra.block0", icfg, rng, in_dim=4)]
            self.intra_blocks += [ResBlock(f"intra.block{b}", icfg, rng)
                                  for b in range(1, spec.intra_blocks)]
            self._intra_a = np.array([a for _, a, _ in ip])
            self._intra_b = np.array([b for _, _, b in ip])
            self._intra_group = np.array([k for k, _, _ in ip])
            self.g_blocks = [ResBlock("g.block0", gcfg, rng, in_dim=2 * spec.intra_dim)]
            self.g_blocks += [ResBlock(f"g.block{b}", gcfg, rng) for b in range(1, spec.g_blocks)]
        self._pi = np.array([i for i, _ in self.gc.pairs], dtype=np.int64)
        self._pj = np.array([j for _, j in self.gc.pairs], dtype=np.int64)

    # ------------------------------------------------------------------
    # parameter access

    def blocks(self):
        return [*self.intra_blocks, *self.g_blocks, *self.f_blocks]

    def parameters(self):
        """(name, array) in the fixed schema order."""
        for block in self.intra_blocks:
            yield from block.parameters()
        for entry in self.pair_entries:
            yield from entry.parameters()
        for block in self.g_blocks:
            yield from block.parameters()
        for block in self.f_blocks:
            yield from block.parameters()
        yield from self.readout.parameters()

    def buffers(self):
        for block in self.blocks():
            yield from block.buffers()

    def n_parameters(self) -> int:
        return sum(a.size for _, a in self.parameters())

    def copy(self) -> "PoseModel":
        clone = PoseModel(self.spec, self.stats)
        for (_, dst), (_, src) in zip(clone.parameters(), self.parameters()):
            dst[...] = src
        for (_, dst), (_, src) in zip(clone.buffers(), self.buffers()):
            dst[...] = src
        return clone

    # ------------------------------------------------------------------
    # masks

    def pair_weights(self, masks, batch: int, mode: str) -> np.ndarray:
        """(batch, n_p) averaging weights for the group-pair features."""
        n_g = self.gc.n_groups
        base = relational_weights(n_g)
        w = np.tile(base, (batch, 1))
        if masks is None:
            return w
        if len(masks) != batch:
            raise ValueError("one DropMask per sample is required")
        for b, m in enumerate(masks):
            if not m.groups:
                continue
            if mode == TRAIN and len(m.groups) > 1:
                raise ValueError("training masks may drop at most one group per sample")
            row = relational_weights(n_g, m.groups)
            if not row.any():
                raise ValueError(f"sample {b}: every group pair is dropped")
            w[b] = row
        return w

    def intra_weights(self, masks, batch: int) -> np.ndarray:
        """(batch, n_intra) averaging weights inside each group."""
        group = self._intra_group
        w = np.zeros((batch, len(group)))
        alive = np.ones((batch, len(group)), dtype=bool)
        if masks is not None:
            for b, m in enumerate(masks):
                for j in m.joints:
                    alive[b] &= (self._intra_a != j) & (self._intra_b != j)
        for k in range(self.gc.n_groups):
            sel = group == k
            cnt = alive[:, sel].sum(axis=1)
            if np.any(cnt == 0):
                b = int(np.flatnonzero(cnt == 0)[0])
                raise ValueError(
                    f"sample {b}: group {k} has fewer than 2 visible joints; drop the group instead")
            w[:, sel] = alive[:, sel] / cnt[:, None]
        return w

    # ------------------------------------------------------------------
    # forward / backward

    def forward(self, x, masks=None, mode: str = EVAL, rng: Rng | None = None,
                tape: Tape | None = None) -> np.ndarray:
        """(batch, 32) mean-subtracted 2D -> (batch, 45) normalised 3D."""
        _check_mode(mode)
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.spec.input_dim:
            raise ValueError(f"expected input of shape (batch, {self.spec.input_dim}), got {x.shape}")
        if mode == TRAIN and rng is None:
            raise ValueError("train mode needs an rng")
        batch = x.shape[0]
        if self.spec.variant == "RN":
            feat = self._rn_features(x, masks, mode, rng, tape)
        elif self.spec.variant == "RN-hier":
            feat = self._hier_features(x, masks, mode, rng, tape)
        else:
            if masks is not None and any(not m.empty for m in masks):
                raise ValueError("FC variants take no relational drop masks")
            feat = x
            if self.spec.variant == "FC-drop" and mode == TRAIN and self.spec.input_pdrop > 0:
                keep = rng.split("input").random((batch, self.spec.input_dim // 2)) >= self.spec.input_pdrop
                feat = x * np.repeat(keep, 2, axis=1)
            if tape is not None:
                tape.push(self, None)
        h = feat
        for block in self.f_blocks:
            h = block.forward(h, mode, rng, tape)
        out = self.readout.forward(h, tape)
        if not np.all(np.isfinite(out)):
            raise FloatingPointError("non-finite activations in forward pass")
        return out

    def _rn_features(self, x, masks, mode, rng, tape):
        batch = x.shape[0]
        w = self.pair_weights(masks, batch, mode)
        h = np.stack([e.forward(x[:, cols], tape)
                      for e, cols in zip(self.pair_entries, self._pair_cols)])
        for block in self.g_blocks:
            h = block.forward(h, mode, rng, tape)
        feat = np.einsum("pbd,bp->bd", h, w)
        if tape is not None:
            tape.push(self, (w, h))
        return feat

    def _hier_features(self, x, masks, mode, rng, tape):
        batch = x.shape[0]
        w = self.pair_weights(masks, batch, mode)
        wi = self.intra_weights(masks, batch)
        pts = x.reshape(batch, -1, 2)
        inp = np.concatenate([pts[:, self._intra_a], pts[:, self._intra_b]], axis=2)
        z = inp.transpose(1, 0, 2)  # (Q, B, 4)
        for block in self.intra_blocks:
            z = block.forward(z, mode, rng, tape)
        wz = z * wi.T[:, :, None]
        gfeat = np.zeros((self.gc.n_groups, batch, z.shape[-1]))
        np.add.at(gfeat, self._intra_group, wz)
        h = np.concatenate([gfeat[self._pi], gfeat[self._pj]], axis=2)
        for block in self.g_blocks:
            h = block.forward(h, mode, rng, tape)
        feat = np.einsum("pbd,bp->bd", h, w)
        if tape is not None:
            tape.push(self, (w, wi, h, z))
        return feat

    def backward(self, tape: Tape, dout, grads: dict | None = None) -> dict:
        """Parameter gradients of ``sum(dout * forward(...))``."""
        if grads is None:
            grads = {}
        d = self.readout.backward(tape, dout, grads)
        for block in reversed(self.f_blocks):
            d = block.backward(tape, d, grads)
        cache = tape.pop(self)
        if self.spec.variant == "RN":
            w, h = cache
            dh = w.T[:, :, None] * d[None, :, :]
            for block in reversed(self.g_blocks):
                dh = block.backward(tape, dh, grads)
            for p in reversed(range(len(self.pair_entries))):
                self.pair_entries[p].backward(tape, dh[p], grads)
        elif self.spec.variant == "RN-hier":
            w, wi, h, z = cache
            dh = w.T[:, :, None] * d[None, :, :]
            for block in reversed(self.g_blocks):
                dh = block.backward(tape, dh, grads)
            di = self.spec.intra_dim
            dg = np.zeros((self.gc.n_groups,) + dh.shape[1:-1] + (di,))
            np.add.at(dg, self._pi, dh[..., :di])
            np.add.at(dg, self._pj, dh[..., di:])
            dz = dg[self._intra_group] * wi.T[:, :, None]
            for block in reversed(self.intra_blocks):
                dz = block.backward(tape, dz, grads)
        if len(tape):
            raise RuntimeError("tape not fully consumed by backward")
        for name, arr in self.parameters():
            if name not in grads:
                grads[name] = np.zeros_like(arr)
        return grads

    def predict(self, x, masks=None) -> np.ndarray:
        return self.forward(x, masks, EVAL)

    # ------------------------------------------------------------------
    # finetune switches

    def set_bn_frozen(self, frozen: bool) -> None:
        from .layers import set_frozen
        set_frozen(self.blocks(), frozen)

    def set_all_dropout(self, p: float | None) -> None:
        """Override every dropout rate (``None`` restores the ModelSpec rates)."""
        from .layers import set_dropout
        if p is None:
            set_dropout(self.intra_blocks, self.spec.intra_dropout)
            set_dropout(self.g_blocks, self.spec.g_dropout)
            set_dropout(self.f_blocks, self.spec.f_dropout)
        else:
            set_dropout(self.blocks(), p)


# --------------------------------------------------------------------------
# relational-dropout sampling and test-time masks


def sample_drop(rng: Rng, spec: ModelSpec, batch: int) -> list[DropMask] | None:
    """Per-sample training-time relational-dropout masks.

    A group is dropped with probability ``group_pdrop``; otherwise (RN-hier
    only) a single joint is dropped with probability ``joint_pdrop``.
    Returns ``None`` when relational dropout is disabled.
    """
    if not spec.uses_relational_dropout:
        return None
    gc = spec.group_config
    u = rng.random((batch, 4))
    masks = []
    for b in range(batch):
        if u[b, 0] < spec.group_pdrop:
            k = min(int(u[b, 1] * gc.n_groups), gc.n_groups - 1)
            masks.append(DropMask(groups=(k,)))
        elif spec.variant == "RN-hier" and u[b, 2] < spec.joint_pdrop:
            j = min(int(u[b, 3] * gc.n_joints), gc.n_joints - 1)
            masks.append(DropMask(joints=(j,)))
        else:
            masks.append(NO_DROP)
    return masks


def mask_from_visibility(visibility, spec: ModelSpec) -> DropMask:
    """Test-time mask for one sample's visibility flags."""
    visibility = np.asarray(visibility, dtype=bool)
    if not spec.relational:
        return NO_DROP
    gc = spec.group_config
    groups, joints = [], []
    for k, g in enumerate(gc.groups):
        missing = [j for j in g if not visibility[j]]
        if not missing:
            continue
        if spec.variant == "RN-hier" and len(missing) == 1:
            joints.append(missing[0])
        else:
            groups.append(k)
    if len(groups) >= gc.n_groups - 1:
        raise ValueError("too many groups missing: no group pair survives")
    return DropMask(groups=tuple(groups), joints=tuple(joints))


# --------------------------------------------------------------------------
# model file


MAGIC = b"RLFT"
FORMAT_VERSION = 1


class ModelFileError(ValueError):
    pass


def _tensors(model: PoseModel):
    """Flatten to 2-D named tensors; banked arrays are split per slice."""
    items = list(model.parameters()) + list(model.buffers())
    if model.stats is not None:
        items += [("norm.mean2d", model.stats.mean2d), ("norm.mean3d", model.stats.mean3d)]
    for name, arr in items:
        if arr.ndim <= 2:
            yield name, np.atleast_2d(arr)
        else:
            for p in range(arr.shape[0]):
                yield f"{name}@{p}", arr[p]


def save_model(model: PoseModel, path) -> None:
    payload = bytearray(MAGIC)
    payload += struct.pack("<I", FORMAT_VERSION)
    text = model.spec.to_text().encode("utf-8")
    payload += struct.pack("<Q", len(text)) + text
    for name, arr in _tensors(model):
        raw = name.encode("utf-8")
        rows, cols = arr.shape
        payload += struct.pack("<Q", len(raw)) + raw + struct.pack("<QQ", rows, cols)
        payload += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    payload += struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)
    Path(path).write_bytes(bytes(payload))


def load_model(path) -> PoseModel:
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != MAGIC:
        raise ModelFileError(f"{path}: not a model file (bad magic)")
    body, crc = data[:-4], struct.unpack("<I", data[-4:])[0]
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ModelFileError(f"{path}: CRC mismatch")
    (version,) = struct.unpack_from("<I", body, 4)
    if version != FORMAT_VERSION:
        raise ModelFileError(f"{path}: unsupported format version {version}")
    pos = 8
    (n,) = struct.unpack_from("<Q", body, pos)
    pos += 8
    spec = ModelSpec.from_text(body[pos:pos + n].decode("utf-8"))
    pos += n
    tensors = {}
    while pos < len(body):
        (n,) = struct.unpack_from("<Q", body, pos)
        pos += 8
        name = body[pos:pos + n].decode("utf-8")
        pos += n
        rows, cols = struct.unpack_from("<QQ", body, pos)
        pos += 16
        count = rows * cols
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=pos).reshape(rows, cols)
        pos += 8 * count
        if not np.all(np.isfinite(arr)):
            raise ModelFileError(f"{path}: tensor {name} has non-finite entries")
        tensors[name] = arr.astype(np.float64)
    model = PoseModel(spec)
    expected = dict(_tensors(model))
    if "norm.mean2d" in tensors or "norm.mean3d" in tensors:
        try:
            model.stats = NormStats(tensors.pop("norm.mean2d")[0].copy(),
                                    tensors.pop("norm.mean3d")[0].copy())
        except KeyError as exc:
            raise ModelFileError(f"{path}: incomplete normalisation statistics") from exc
    if set(expected) != set(tensors):
        missing = sorted(set(expected) - set(tensors))
        extra = sorted(set(tensors) - set(expected))
        raise ModelFileError(f"{path}: tensors inconsistent with spec (missing {missing[:3]}, extra {extra[:3]})")
    for name, view in expected.items():
        if view.shape != tensors[name].shape:
            raise ModelFileError(f"{path}: tensor {name} has shape {tensors[name].shape}, expected {view.shape}")
        view[...] = tensors[name]
    return model
