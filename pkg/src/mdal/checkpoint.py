"""Meta-learner state and its binary checkpoint format.

Layout: ``b"MDAL"``, format version (u16 LE), header length (u32 LE), UTF-8
JSON header, then float64 LE payload. The header lists the architecture,
the array names and shapes, and the payload sections in order: theta,
alpha, then the Adam moments for theta and alpha.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from .errors import ContractViolation, LoadError
from .params import Arch, ParamSet

MAGIC = b"MDAL"
FORMAT_VERSION = 1
SECTIONS = ("theta", "alpha", "m_theta", "v_theta", "m_alpha", "v_alpha")


@dataclass(frozen=True)
class MetaLearnerState:
    theta: ParamSet
    alpha: ParamSet
    m_theta: ParamSet
    v_theta: ParamSet
    m_alpha: ParamSet
    v_alpha: ParamSet
    iteration: int = 0
    rng_state: dict[str, Any] = field(default_factory=dict)
    flags: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.theta.check_congruent(self.alpha, self.m_theta, self.v_theta, self.m_alpha, self.v_alpha)

    @classmethod
    def fresh(cls, theta: ParamSet, alpha_init: float, rng_state: dict[str, Any],
              flags: dict[str, Any] | None = None) -> "MetaLearnerState":
        z = theta.zeros_like()
        return cls(theta, theta.full_like(alpha_init), z, z, z, z, 0, rng_state, dict(flags or {}))

    @property
    def arch(self) -> Arch | None:
        return self.theta.arch

    def replace(self, **kw: Any) -> "MetaLearnerState":
        return replace(self, **kw)

    def bitwise_equal(self, other: "MetaLearnerState") -> bool:
        return (all(getattr(self, s) == getattr(other, s) for s in SECTIONS)
                and self.iteration == other.iteration
                and self.rng_state == other.rng_state)


def _jsonable_rng(state: dict[str, Any]) -> dict[str, Any]:
    # PCG64 state contains Python ints larger than 64 bits; JSON handles them
    return json.loads(json.dumps(state))


def save_checkpoint(state: MetaLearnerState, path: Path) -> None:
    theta = state.theta
    names = list(theta)
    header = {
        "arch": theta.arch.to_dict() if theta.arch else None,
        "names": names,
        "shapes": [list(theta[k].shape) for k in names],
        "sections": list(SECTIONS),
        "iteration": int(state.iteration),
        "rng_state": _jsonable_rng(state.rng_state),
        "flags": state.flags,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(
        np.ascontiguousarray(getattr(state, s)[k], dtype="<f8").tobytes()
        for s in SECTIONS for k in names
    )
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(MAGIC + struct.pack("<HI", FORMAT_VERSION, len(hbytes)) + hbytes + payload)
    tmp.replace(path)


def read_header(path: Path) -> tuple[dict[str, Any], bytes]:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise LoadError(f"{path}: {e}") from e
    if len(raw) < 10 or raw[:4] != MAGIC:
        raise LoadError(f"{path}: not an MDAL checkpoint (bad magic)")
    version, hlen = struct.unpack("<HI", raw[4:10])
    if version != FORMAT_VERSION:
        raise LoadError(f"{path}: checkpoint format version {version}, expected {FORMAT_VERSION}")
    if len(raw) < 10 + hlen:
        raise LoadError(f"{path}: truncated header")
    try:
        header = json.loads(raw[10:10 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise LoadError(f"{path}: corrupt header: {e}") from e
    return header, raw[10 + hlen:]


def load_checkpoint(path: Path, expect_arch: Arch | None = None) -> MetaLearnerState:
    header, payload = read_header(path)
    arch = Arch.from_dict(header["arch"]) if header.get("arch") else None
    names, shapes = header["names"], [tuple(s) for s in header["shapes"]]
    if expect_arch is not None:
        if arch != expect_arch or dict(zip(names, shapes)) != expect_arch.shapes():
            raise LoadError(f"{path}: architecture {arch} does not match expected {expect_arch}")
    elif arch is not None and dict(zip(names, shapes)) != arch.shapes():
        raise LoadError(f"{path}: array shapes inconsistent with declared architecture")
    sections = header.get("sections", list(SECTIONS))
    if tuple(sections) != SECTIONS:
        raise LoadError(f"{path}: unsupported section layout {sections}")
    per = sum(int(np.prod(s)) for s in shapes)
    expected = 8 * per * len(SECTIONS)
    if len(payload) != expected:
        raise LoadError(f"{path}: payload has {len(payload)} bytes, expected {expected}")
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    out, pos = {}, 0
    for s in SECTIONS:
        arrays = {}
        for k, shp in zip(names, shapes):
            n = int(np.prod(shp))
            arrays[k] = flat[pos:pos + n].reshape(shp)
            pos += n
        try:
            out[s] = ParamSet(arrays, arch)
        except ContractViolation as e:
            raise LoadError(f"{path}: section {s}: {e}") from e
    return MetaLearnerState(
        iteration=int(header["iteration"]),
        rng_state=header.get("rng_state", {}),
        flags=header.get("flags", {}),
        **out,
    )
